use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{
    derive_seed, generate_timeline, render_features, ActionVocabulary, ClassEmbedding,
    DependencyGrammar, EventTimeline, FeatureSequence,
};
use crate::error::{Error, Result};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub actions: ActionVocabulary,
    pub grammar: DependencyGrammar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: FeatureSequence,
    pub timeline: EventTimeline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub actions: ActionVocabulary,
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.actions.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.train
            .first()
            .or(self.test.first())
            .map_or(0, |v| v.features.feature_dim())
    }
}

fn make_video(
    cfg: &DatasetConfig,
    embedding: &ClassEmbedding,
    split: &str,
    stream: u64,
    index: usize,
) -> Result<Video> {
    let seed = derive_seed(cfg.seed, stream, index as u64);
    let timeline = generate_timeline(&cfg.grammar, &cfg.actions, cfg.num_frames, seed)?;
    let features = render_features(
        &timeline,
        embedding,
        cfg.noise_sigma,
        derive_seed(seed, NOISE_STREAM, 0),
    )?;
    Ok(Video {
        id: format!("{split}_{index:04}"),
        features,
        timeline,
    })
}

/// Generates the train and test splits. Every video has its own seed derived
/// from the master seed and split tag; all share one class embedding.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_videos == 0 || cfg.test_videos == 0 {
        return Err(Error::Config(format!(
            "both splits need at least one video (train {}, test {})",
            cfg.train_videos, cfg.test_videos
        )));
    }
    let embedding = ClassEmbedding::seeded(cfg.actions.num_classes(), cfg.feature_dim, cfg.seed)?;

    let train_seeds: HashSet<u64> = (0..cfg.train_videos)
        .map(|i| derive_seed(cfg.seed, TRAIN_STREAM, i as u64))
        .collect();
    if (0..cfg.test_videos)
        .any(|i| train_seeds.contains(&derive_seed(cfg.seed, TEST_STREAM, i as u64)))
    {
        return Err(Error::Config(
            "seed collision between train and test splits".into(),
        ));
    }

    let train = (0..cfg.train_videos)
        .map(|i| make_video(cfg, &embedding, "train", TRAIN_STREAM, i))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_videos)
        .map(|i| make_video(cfg, &embedding, "test", TEST_STREAM, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        actions: cfg.actions.clone(),
        train,
        test,
    })
}

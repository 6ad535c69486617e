use std::collections::HashMap;

use ndarray::{s, Array2};
use rayon::prelude::*;

use super::{evaluate, EvalReport, ScoreTable};
use crate::error::{Error, Result};
use crate::memory::{FeatureWindow, MemoryBank, MemoryConfig, MemoryMode};
use crate::model::{classify, HeadMode, Joadaa, PredictionBundle};
use crate::synth::Video;

/// Where the stream is when a prediction is requested.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub video: &'a str,
    /// Index of the current frame.
    pub t: usize,
}

/// Anything that maps (past window, current frame) to logits.
pub trait StreamingPredictor: Sync {
    fn num_classes(&self) -> usize;
    fn anticipation_horizon(&self) -> usize;
    fn head_mode(&self) -> HeadMode;
    fn predict(
        &self,
        ctx: StepContext<'_>,
        window: &FeatureWindow,
        current: &[f64],
    ) -> Result<PredictionBundle>;
}

impl StreamingPredictor for Joadaa {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn anticipation_horizon(&self) -> usize {
        self.config().anticipation_horizon
    }

    fn head_mode(&self) -> HeadMode {
        self.config().head_mode
    }

    fn predict(
        &self,
        _ctx: StepContext<'_>,
        window: &FeatureWindow,
        current: &[f64],
    ) -> Result<PredictionBundle> {
        Joadaa::predict(self, window, current)
    }
}

/// Emits the ground truth (or its negation) as sigmoid logits. Used to check
/// the evaluation plumbing.
#[derive(Debug, Clone)]
pub struct OracleModel {
    labels: HashMap<String, Array2<u8>>,
    num_classes: usize,
    horizon: usize,
    sign: f64,
}

impl OracleModel {
    pub fn new(videos: &[Video], horizon: usize) -> Self {
        let num_classes = videos.first().map_or(0, |v| v.timeline.num_classes());
        Self {
            labels: videos
                .iter()
                .map(|v| (v.id.clone(), v.timeline.labels().clone()))
                .collect(),
            num_classes,
            horizon,
            sign: 1.0,
        }
    }

    /// Ranks every frame in exactly the wrong order.
    pub fn inverted(mut self) -> Self {
        self.sign = -1.0;
        self
    }

    fn logits(&self, labels: &Array2<u8>, frame: usize) -> ndarray::Array1<f64> {
        if frame < labels.nrows() {
            labels
                .row(frame)
                .mapv(|v| self.sign * (if v == 1 { 10.0 } else { -10.0 }))
        } else {
            ndarray::Array1::zeros(self.num_classes)
        }
    }
}

impl StreamingPredictor for OracleModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn anticipation_horizon(&self) -> usize {
        self.horizon
    }

    fn head_mode(&self) -> HeadMode {
        HeadMode::Sigmoid
    }

    fn predict(
        &self,
        ctx: StepContext<'_>,
        window: &FeatureWindow,
        _current: &[f64],
    ) -> Result<PredictionBundle> {
        let labels = self.labels.get(ctx.video).ok_or_else(|| {
            Error::Config(format!("oracle has no labels for video `{}`", ctx.video))
        })?;
        let mut past = Array2::zeros((window.len(), self.num_classes));
        let real = window.len() - window.num_padded();
        for i in 0..real {
            past.row_mut(window.num_padded() + i)
                .assign(&self.logits(labels, ctx.t - real + i));
        }
        let mut ant = Array2::zeros((self.horizon + 1, self.num_classes));
        for k in 0..=self.horizon {
            ant.row_mut(k).assign(&self.logits(labels, ctx.t + k));
        }
        Ok(PredictionBundle {
            past_logits: past,
            anticipation_logits: ant,
            online_logits: self.logits(labels, ctx.t),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamingConfig {
    pub memory: MemoryConfig,
    pub mode: MemoryMode,
    /// Anticipation horizons to score, each `>= 1`.
    pub horizons: Vec<usize>,
    /// Count the current frame as the first anticipated frame, so horizon
    /// `k` reads row `k - 1`. Off by default: horizon `k` is `k` frames after
    /// the current one.
    pub horizon_includes_current: bool,
}

impl StreamingConfig {
    pub fn new(memory: MemoryConfig, mode: MemoryMode, horizons: Vec<usize>) -> Self {
        Self {
            memory,
            mode,
            horizons,
            horizon_includes_current: false,
        }
    }

    /// Anticipation row, and frame offset from the current frame, of horizon `h`.
    pub fn row_of(&self, h: usize) -> usize {
        h - usize::from(self.horizon_includes_current)
    }
}

/// Scores of one video. OAD rows cover frames `1..n`; the horizon-`k` rows
/// cover frames `1 + k..n` (`k..n` when horizons include the current frame).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub id: String,
    pub oad: ScoreTable,
    pub anticipation: Vec<(usize, ScoreTable)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamingResult {
    pub oad: EvalReport,
    /// One report per requested horizon, same order.
    pub anticipation: Vec<EvalReport>,
    pub videos: Vec<VideoScores>,
}

fn probabilities(logits: &Array2<f64>, mode: HeadMode, classes: usize) -> Array2<f64> {
    classify(logits, mode).slice(s![.., ..classes]).to_owned()
}

/// Streams one video frame by frame through a memory bank.
///
/// At time `t` the bank holds frames `< t` and frame `t` is the current
/// frame. Frame 0 has no past and is not scored. The anticipation row `k`
/// produced at time `t` is scored against frame `t + k`; see
/// [`StreamingConfig::row_of`] for the row of each horizon.
pub fn stream_video(
    model: &dyn StreamingPredictor,
    video: &Video,
    cfg: &StreamingConfig,
) -> Result<VideoScores> {
    let available = model.anticipation_horizon() + usize::from(cfg.horizon_includes_current);
    if cfg.horizons.contains(&0) {
        return Err(Error::Config("anticipation horizons start at 1".into()));
    }
    if let Some(&h) = cfg.horizons.iter().find(|&&h| h > available) {
        return Err(Error::HorizonTooLarge {
            requested: h,
            available,
        });
    }
    let n = video.features.num_frames();
    let classes = model.num_classes();
    if video.timeline.num_classes() != classes {
        return Err(Error::shape(
            "stream_video classes",
            classes,
            video.timeline.num_classes(),
        ));
    }
    let labels = video.timeline.labels();
    let mut bank = MemoryBank::new(cfg.memory, video.features.feature_dim())?;
    let mut oad = Vec::with_capacity(n.saturating_sub(1));
    let mut ant: Vec<Vec<ndarray::Array1<f64>>> = vec![Vec::new(); cfg.horizons.len()];
    for t in 0..n {
        let current = video.features.row_f64(t);
        if t > 0 {
            let window = bank.window(cfg.mode)?;
            let bundle = model.predict(
                StepContext {
                    video: &video.id,
                    t,
                },
                &window,
                &current,
            )?;
            let online = bundle.online_logits.clone().insert_axis(ndarray::Axis(0));
            oad.push(
                probabilities(&online, model.head_mode(), classes)
                    .row(0)
                    .to_owned(),
            );
            let ant_p = probabilities(&bundle.anticipation_logits, model.head_mode(), classes);
            for (slot, &h) in ant.iter_mut().zip(&cfg.horizons) {
                let row = cfg.row_of(h);
                if t + row < n {
                    slot.push(ant_p.row(row).to_owned());
                }
            }
        }
        bank.push_frame(&current)?;
    }
    let stack = |rows: &[ndarray::Array1<f64>], first: usize| -> Result<ScoreTable> {
        let mut scores = Array2::zeros((rows.len(), classes));
        for (i, r) in rows.iter().enumerate() {
            scores.row_mut(i).assign(r);
        }
        let targets = labels.slice(s![first..first + rows.len(), ..]).to_owned();
        ScoreTable::new(scores, targets)
    };
    let oad = stack(&oad, 1)?;
    let anticipation = cfg
        .horizons
        .iter()
        .zip(&ant)
        .map(|(&h, rows)| Ok((h, stack(rows, 1 + cfg.row_of(h))?)))
        .collect::<Result<_>>()?;
    Ok(VideoScores {
        id: video.id.clone(),
        oad,
        anticipation,
    })
}

/// Streams every video (concurrently across videos) and reports OAD mAP and
/// anticipation mAP per horizon over the pooled frames.
pub fn streaming_eval(
    model: &dyn StreamingPredictor,
    videos: &[Video],
    cfg: &StreamingConfig,
) -> Result<StreamingResult> {
    let videos: Vec<VideoScores> = videos
        .par_iter()
        .map(|v| stream_video(model, v, cfg))
        .collect::<Result<_>>()?;
    let oad_tables: Vec<&ScoreTable> = videos.iter().map(|v| &v.oad).collect();
    let oad = evaluate(&ScoreTable::concat(&oad_tables)?, 0)?;
    let anticipation = cfg
        .horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let tables: Vec<&ScoreTable> = videos.iter().map(|v| &v.anticipation[i].1).collect();
            evaluate(&ScoreTable::concat(&tables)?, h)
        })
        .collect::<Result<_>>()?;
    Ok(StreamingResult {
        oad,
        anticipation,
        videos,
    })
}

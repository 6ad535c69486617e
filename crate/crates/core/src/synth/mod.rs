//! Synthetic, densely annotated action streams.
//!
//! A [`DependencyGrammar`] describes how actions start spontaneously, how
//! they trigger each other after a delay and which of them tend to co-occur.
//! [`generate_timeline`] samples a per-frame multi-hot label matrix from it and
//! [`render_features`] turns the labels into noisy feature rows that stand in
//! for clip features from a pretrained video backbone.

mod dataset;
mod features;
pub mod io;
mod timeline;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{make_dataset, Dataset, DatasetConfig, Video};
pub use features::{render_features, ClassEmbedding, FeatureSequence};
pub use timeline::{generate_timeline, EventTimeline, MAX_GENERATION_ATTEMPTS};

/// Ordered action identifiers; the index of an action is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ActionVocabulary {
    actions: Vec<String>,
}

impl ActionVocabulary {
    pub fn new<S: Into<String>>(actions: impl IntoIterator<Item = S>) -> Result<Self> {
        let actions: Vec<String> = actions.into_iter().map(Into::into).collect();
        if actions.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 actions, got {}",
                actions.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &actions {
            if !seen.insert(a.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate action `{a}` in vocabulary"
                )));
            }
        }
        Ok(Self { actions })
    }

    pub fn num_classes(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn index_of(&self, action: &str) -> Result<usize> {
        self.actions
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| Error::UnknownAction(action.to_string()))
    }
}

impl TryFrom<Vec<String>> for ActionVocabulary {
    type Error = Error;

    fn try_from(actions: Vec<String>) -> Result<Self> {
        Self::new(actions)
    }
}

impl From<ActionVocabulary> for Vec<String> {
    fn from(v: ActionVocabulary) -> Self {
        v.actions
    }
}

/// Single-label (at most one active action per frame) or multi-label streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Sparse,
    #[default]
    Dense,
}

/// `target` starts `delay` frames after `source` ends, with the given probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub source: String,
    pub target: String,
    /// Inclusive `[min, max]` delay in frames, measured from the first frame
    /// after the source stopped being active.
    pub delay: [usize; 2],
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrence {
    pub a: String,
    pub b: String,
    pub probability: f64,
}

/// An action that always starts at a given frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedStart {
    pub action: String,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyGrammar {
    #[serde(default)]
    pub density: Density,
    /// Per-frame probability that an idle action starts on its own.
    pub base_rates: BTreeMap<String, f64>,
    /// Inclusive `[min, max]` duration in frames for every action that can start.
    pub durations: BTreeMap<String, [usize; 2]>,
    #[serde(default)]
    pub triggers: Vec<Trigger>,
    #[serde(default)]
    pub co_occurrence: Vec<CoOccurrence>,
    #[serde(default)]
    pub forced: Vec<ForcedStart>,
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "{what}: probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Grammar resolved against a vocabulary: every name replaced by its class index.
#[derive(Debug, Clone)]
pub(crate) struct CompiledGrammar {
    pub density: Density,
    pub base_rates: Vec<f64>,
    pub durations: Vec<Option<(usize, usize)>>,
    pub triggers: Vec<(usize, usize, (usize, usize), f64)>,
    pub co_occurrence: Vec<(usize, usize, f64)>,
    pub forced: Vec<(usize, usize)>,
}

impl DependencyGrammar {
    pub(crate) fn compile(&self, vocab: &ActionVocabulary) -> Result<CompiledGrammar> {
        let c = vocab.num_classes();
        let mut base_rates = vec![0.0; c];
        for (name, &p) in &self.base_rates {
            check_probability(&format!("base rate of `{name}`"), p)?;
            base_rates[vocab.index_of(name)?] = p;
        }
        let mut durations = vec![None; c];
        for (name, &[lo, hi]) in &self.durations {
            if lo < 1 || lo > hi {
                return Err(Error::Config(format!(
                    "duration of `{name}` must satisfy 1 <= min <= max, got [{lo}, {hi}]"
                )));
            }
            durations[vocab.index_of(name)?] = Some((lo, hi));
        }
        let mut triggers = Vec::with_capacity(self.triggers.len());
        for t in &self.triggers {
            check_probability(
                &format!("trigger {} -> {}", t.source, t.target),
                t.probability,
            )?;
            let [lo, hi] = t.delay;
            if lo > hi {
                return Err(Error::Config(format!(
                    "trigger {} -> {}: delay min {lo} exceeds max {hi}",
                    t.source, t.target
                )));
            }
            triggers.push((
                vocab.index_of(&t.source)?,
                vocab.index_of(&t.target)?,
                (lo, hi),
                t.probability,
            ));
        }
        let mut co_occurrence = Vec::with_capacity(self.co_occurrence.len());
        for co in &self.co_occurrence {
            check_probability(
                &format!("co-occurrence {} ~ {}", co.a, co.b),
                co.probability,
            )?;
            co_occurrence.push((
                vocab.index_of(&co.a)?,
                vocab.index_of(&co.b)?,
                co.probability,
            ));
        }
        let forced = self
            .forced
            .iter()
            .map(|f| Ok((vocab.index_of(&f.action)?, f.frame)))
            .collect::<Result<Vec<_>>>()?;

        let compiled = CompiledGrammar {
            density: self.density,
            base_rates,
            durations,
            triggers,
            co_occurrence,
            forced,
        };
        // Every action that can become active needs a duration.
        let can_start = |a: usize| {
            compiled.base_rates[a] > 0.0
                || compiled.triggers.iter().any(|t| t.1 == a)
                || compiled
                    .co_occurrence
                    .iter()
                    .any(|co| co.0 == a || co.1 == a)
                || compiled.forced.iter().any(|f| f.0 == a)
        };
        for (a, name) in vocab.actions().iter().enumerate() {
            if can_start(a) && compiled.durations[a].is_none() {
                return Err(Error::Config(format!(
                    "missing duration for action `{name}`"
                )));
            }
        }
        Ok(compiled)
    }
}

/// Mixes a master seed with a stream tag and an index into an independent
/// 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

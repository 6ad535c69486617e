use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, ActionVocabulary, CompiledGrammar, Density, DependencyGrammar};
use crate::error::{Error, Result};

/// Regeneration budget for grammars that keep producing empty timelines.
pub const MAX_GENERATION_ATTEMPTS: usize = 100;

/// Per-frame multi-hot ground truth, shape `(num_frames, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTimeline {
    labels: Array2<u8>,
}

impl EventTimeline {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if labels.nrows() == 0 || labels.ncols() == 0 {
            return Err(Error::shape("EventTimeline", "non-empty", labels.dim()));
        }
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::format("labels", "entries must be 0 or 1"));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn num_frames(&self) -> usize {
        self.labels.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn is_active(&self, frame: usize, class: usize) -> bool {
        self.labels[[frame, class]] == 1
    }

    /// Mean number of active labels per frame.
    pub fn density(&self) -> f64 {
        self.labels.iter().map(|&v| v as f64).sum::<f64>() / self.num_frames() as f64
    }
}

struct Sampler<'g> {
    g: &'g CompiledGrammar,
    rng: ChaCha8Rng,
    /// Exclusive end frame of each currently active action.
    active: Vec<Option<usize>>,
    pending: BTreeMap<usize, Vec<usize>>,
}

impl Sampler<'_> {
    fn end(&mut self, action: usize, frame: usize) {
        self.active[action] = None;
        for i in 0..self.g.triggers.len() {
            let (source, target, (lo, hi), p) = self.g.triggers[i];
            if source != action || p <= 0.0 {
                continue;
            }
            if p >= 1.0 || self.rng.random::<f64>() < p {
                let delay = if lo == hi {
                    lo
                } else {
                    self.rng.random_range(lo..=hi)
                };
                self.pending.entry(frame + delay).or_default().push(target);
            }
        }
    }

    fn start(&mut self, action: usize, frame: usize) {
        let (lo, hi) = self.g.durations[action].expect("validated at compile time");
        let dur = if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        };
        if self.g.density == Density::Sparse {
            for other in 0..self.active.len() {
                if other != action && self.active[other].is_some() {
                    self.end(other, frame);
                }
            }
        }
        let end = frame + dur;
        self.active[action] = Some(self.active[action].map_or(end, |e| e.max(end)));
    }

    fn run(mut self, num_frames: usize) -> Array2<u8> {
        let c = self.active.len();
        let sparse = self.g.density == Density::Sparse;
        let mut labels = Array2::zeros((num_frames, c));
        for &(a, frame) in &self.g.forced {
            self.pending.entry(frame).or_default().push(a);
        }
        for t in 0..num_frames {
            for a in 0..c {
                if self.active[a] == Some(t) {
                    self.end(a, t);
                }
            }

            let mut started = Vec::new();
            // Zero-delay triggers fired by a preempted action land on this frame again.
            while let Some(queue) = self.pending.remove(&t) {
                for a in queue {
                    if sparse && !started.is_empty() {
                        continue;
                    }
                    self.start(a, t);
                    started.push(a);
                }
            }

            if sparse {
                if self.active.iter().all(Option::is_none) {
                    for a in 0..c {
                        let p = self.g.base_rates[a];
                        if p > 0.0 && self.rng.random::<f64>() < p {
                            self.start(a, t);
                            started.push(a);
                            break;
                        }
                    }
                }
            } else {
                for a in 0..c {
                    let p = self.g.base_rates[a];
                    if self.active[a].is_none() && p > 0.0 && self.rng.random::<f64>() < p {
                        self.start(a, t);
                        started.push(a);
                    }
                }
                // Partners start alongside, without cascading further.
                for &s in &started.clone() {
                    for i in 0..self.g.co_occurrence.len() {
                        let (a, b, p) = self.g.co_occurrence[i];
                        let partner = if a == s {
                            b
                        } else if b == s {
                            a
                        } else {
                            continue;
                        };
                        if self.active[partner].is_none() && self.rng.random::<f64>() < p {
                            self.start(partner, t);
                        }
                    }
                }
            }

            for a in 0..c {
                if self.active[a].is_some() {
                    labels[[t, a]] = 1;
                }
            }
        }
        labels
    }
}

/// Samples a label timeline from `grammar`.
///
/// Deterministic in `seed`. Timelines without a single active frame are
/// resampled (with a derived seed) up to [`MAX_GENERATION_ATTEMPTS`] times.
pub fn generate_timeline(
    grammar: &DependencyGrammar,
    vocab: &ActionVocabulary,
    num_frames: usize,
    seed: u64,
) -> Result<EventTimeline> {
    if num_frames == 0 {
        return Err(Error::Config("num_frames must be at least 1".into()));
    }
    let compiled = grammar.compile(vocab)?;
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let sampler = Sampler {
            g: &compiled,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x71, attempt as u64)),
            active: vec![None; vocab.num_classes()],
            pending: BTreeMap::new(),
        };
        let labels = sampler.run(num_frames);
        if labels.iter().any(|&v| v == 1) {
            return EventTimeline::new(labels);
        }
    }
    Err(Error::DegenerateGrammar {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

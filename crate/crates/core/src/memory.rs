//! Streaming store of past frame features.
//!
//! The bank keeps the most recent `long_capacity + short_capacity` rows. The
//! newest `short_capacity` rows form the short-term segment and everything
//! before them the long-term segment. Windows are always full size: missing
//! rows at stream start are zero rows at the front, flagged invalid in the
//! window's mask.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    ShortOnly,
    #[default]
    LongShort,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::ShortOnly => "short_only",
            MemoryMode::LongShort => "long_short",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" | "short_only" => Ok(MemoryMode::ShortOnly),
            "long_short" => Ok(MemoryMode::LongShort),
            other => Err(Error::Config(format!("unknown memory mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub long_capacity: usize,
    pub short_capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            long_capacity: 512,
            short_capacity: 32,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.short_capacity == 0 {
            return Err(Error::Config("short_capacity must be at least 1".into()));
        }
        Ok(())
    }

    /// Window length `T` for a given mode.
    pub fn window_len(&self, mode: MemoryMode) -> usize {
        match mode {
            MemoryMode::ShortOnly => self.short_capacity,
            MemoryMode::LongShort => self.long_capacity + self.short_capacity,
        }
    }
}

/// Causal feature window handed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    features: Array2<f64>,
    valid: Vec<bool>,
    mode: MemoryMode,
}

impl FeatureWindow {
    /// Builds a window from `rows` (oldest first), front-padding to `len`.
    fn padded<'a>(
        rows: impl ExactSizeIterator<Item = &'a [f64]>,
        len: usize,
        dim: usize,
        mode: MemoryMode,
    ) -> Self {
        let real = rows.len();
        debug_assert!(real <= len);
        let pad = len - real;
        let mut features = Array2::zeros((len, dim));
        for (i, row) in rows.enumerate() {
            features
                .row_mut(pad + i)
                .iter_mut()
                .zip(row)
                .for_each(|(d, s)| *d = *s);
        }
        let mut valid = vec![false; pad];
        valid.resize(len, true);
        Self {
            features,
            valid,
            mode,
        }
    }

    /// Window over frames `0..end` of a recorded stream; identical to the
    /// window of a bank that was fed exactly those frames.
    pub fn from_stream(
        stream: &FeatureSequence,
        end: usize,
        cfg: &MemoryConfig,
        mode: MemoryMode,
    ) -> Result<Self> {
        if end == 0 {
            return Err(Error::EmptyBank);
        }
        if end > stream.num_frames() {
            return Err(Error::shape(
                "FeatureWindow::from_stream",
                stream.num_frames(),
                end,
            ));
        }
        let len = cfg.window_len(mode);
        let start = end.saturating_sub(len);
        let rows: Vec<Vec<f64>> = (start..end).map(|t| stream.row_f64(t)).collect();
        Ok(Self::padded(
            rows.iter().map(Vec::as_slice),
            len,
            stream.feature_dim(),
            mode,
        ))
    }

    /// A window with explicit contents; `valid[i] == false` marks padding.
    pub fn from_parts(features: Array2<f64>, valid: Vec<bool>, mode: MemoryMode) -> Result<Self> {
        if valid.len() != features.nrows() {
            return Err(Error::shape("FeatureWindow", features.nrows(), valid.len()));
        }
        Ok(Self {
            features,
            valid,
            mode,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// `true` for real rows, `false` for padding.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn num_padded(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    cfg: MemoryConfig,
    dim: usize,
    buffer: VecDeque<Vec<f64>>,
    total_pushed: usize,
}

impl MemoryBank {
    pub fn new(cfg: MemoryConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dim,
            buffer: VecDeque::with_capacity(cfg.long_capacity + cfg.short_capacity + 1),
            total_pushed: 0,
        })
    }

    pub fn push_frame(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape("MemoryBank::push_frame", self.dim, row.len()));
        }
        self.buffer.push_back(row.to_vec());
        if self.buffer.len() > self.capacity() {
            self.buffer.pop_front();
        }
        self.total_pushed += 1;
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.cfg.long_capacity + self.cfg.short_capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn total_pushed(&self) -> usize {
        self.total_pushed
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    /// Newest `min(short_capacity, len)` rows, oldest first.
    pub fn short_segment(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        let n = self.cfg.short_capacity.min(self.buffer.len());
        self.buffer
            .range(self.buffer.len() - n..)
            .map(Vec::as_slice)
    }

    /// Rows older than the short segment, oldest first.
    pub fn long_segment(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        let n = self.buffer.len() - self.cfg.short_capacity.min(self.buffer.len());
        self.buffer.range(..n).map(Vec::as_slice)
    }

    pub fn window(&self, mode: MemoryMode) -> Result<FeatureWindow> {
        if self.buffer.is_empty() {
            return Err(Error::EmptyBank);
        }
        let len = self.cfg.window_len(mode);
        Ok(match mode {
            MemoryMode::ShortOnly => {
                FeatureWindow::padded(self.short_segment(), len, self.dim, mode)
            }
            // The long segment is only non-empty once the short one is full, so
            // padding the concatenation at the front pads each segment at its front.
            MemoryMode::LongShort => {
                FeatureWindow::padded(self.buffer.iter().map(Vec::as_slice), len, self.dim, mode)
            }
        })
    }
}

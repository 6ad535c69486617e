use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision of one class.
///
/// Frames are ranked by descending score; equal scores keep their original
/// order. AP is the mean, over positives, of the precision at each positive's
/// rank.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::shape(
            "average_precision",
            scores.len(),
            targets.len(),
        ));
    }
    let positives = targets.iter().filter(|t| **t).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::format("scores", "non-finite score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-frame scores with their binary targets, `(frames × classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scores: Array2<f64>,
    targets: Array2<u8>,
}

impl ScoreTable {
    pub fn new(scores: Array2<f64>, targets: Array2<u8>) -> Result<Self> {
        if scores.dim() != targets.dim() {
            return Err(Error::shape("ScoreTable", scores.dim(), targets.dim()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::format("scores", "non-finite score"));
        }
        Ok(Self { scores, targets })
    }

    pub fn empty(classes: usize) -> Self {
        Self {
            scores: Array2::zeros((0, classes)),
            targets: Array2::zeros((0, classes)),
        }
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn targets(&self) -> &Array2<u8> {
        &self.targets
    }

    pub fn num_frames(&self) -> usize {
        self.scores.nrows()
    }

    /// Stacks tables frame-wise.
    pub fn concat(tables: &[&ScoreTable]) -> Result<Self> {
        let classes = tables.first().map_or(0, |t| t.scores.ncols());
        if tables.iter().any(|t| t.scores.ncols() != classes) {
            return Err(Error::shape("ScoreTable::concat", classes, "mixed widths"));
        }
        let scores: Vec<_> = tables.iter().map(|t| t.scores.view()).collect();
        let targets: Vec<_> = tables.iter().map(|t| t.targets.view()).collect();
        if scores.is_empty() {
            return Ok(Self::empty(0));
        }
        Ok(Self {
            scores: ndarray::concatenate(ndarray::Axis(0), &scores).expect("equal widths"),
            targets: ndarray::concatenate(ndarray::Axis(0), &targets).expect("equal widths"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes without positives, which are left out of the mean.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    /// `0` for online detection, `k` for anticipation `k` frames ahead.
    pub horizon: usize,
    pub num_frames_evaluated: usize,
}

/// Per-class AP and their mean over classes that have positives.
pub fn evaluate(table: &ScoreTable, horizon: usize) -> Result<EvalReport> {
    let per_class_ap: Vec<Option<f64>> = (0..table.scores.ncols())
        .map(|c| {
            let scores: Vec<f64> = table.scores.column(c).to_vec();
            let targets: Vec<bool> = table.targets.column(c).iter().map(|t| *t != 0).collect();
            match average_precision(&scores, &targets) {
                Ok(ap) => Ok(Some(ap)),
                Err(Error::NoPositives) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoPositives);
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport {
        per_class_ap,
        map,
        horizon,
        num_frames_evaluated: table.num_frames(),
    })
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{streaming_eval, StreamingConfig};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryMode};
use crate::model::{ModelConfig, OnlineHead, PastBlock};
use crate::synth::Dataset;
use crate::train::{train, TrainConfig};

pub const DEFAULT_HORIZONS: [usize; 4] = [1, 2, 4, 6];

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "JOADAA_THREADS";

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    /// Key of the dataset the cell trains and evaluates on.
    pub dataset: String,
    #[serde(default)]
    pub memory_mode: MemoryMode,
    #[serde(default = "yes")]
    pub anticipation: bool,
    #[serde(default)]
    pub head: OnlineHead,
    #[serde(default)]
    pub past_block: PastBlock,
}

fn yes() -> bool {
    true
}

impl AblationCell {
    /// Applies the cell's overrides. Turning anticipation off removes the
    /// future queries and their loss term.
    pub fn configure(
        &self,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        m.memory_mode = self.memory_mode;
        m.online_head = self.head;
        m.past_block = self.past_block;
        if !self.anticipation {
            m.anticipation_horizon = 0;
            t.loss_weights[1] = 0.0;
        }
        (m, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub oad_map: f64,
    /// Parallel to the table's horizons; `None` when the cell does not anticipate.
    pub aa_map: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub horizons: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: usize,
    pub oad_median: f64,
    pub aa_median: Vec<Option<f64>>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationTable {
    /// Cell names in first-appearance order.
    pub fn cells(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell) {
                out.push(r.cell.clone());
            }
        }
        out
    }

    pub fn summary(&self, cell: &str) -> Option<CellSummary> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.cell == cell).collect();
        if rows.is_empty() {
            return None;
        }
        let oad: Vec<f64> = rows.iter().map(|r| r.oad_map).collect();
        let aa_median = (0..self.horizons.len())
            .map(|i| {
                let v: Vec<f64> = rows.iter().filter_map(|r| r.aa_map[i]).collect();
                median(&v)
            })
            .collect();
        Some(CellSummary {
            cell: cell.to_string(),
            seeds: rows.len(),
            oad_median: median(&oad).expect("non-empty"),
            aa_median,
        })
    }

    pub fn summaries(&self) -> Vec<CellSummary> {
        self.cells()
            .iter()
            .filter_map(|c| self.summary(c))
            .collect()
    }

    /// Keeps only the listed horizons, in the given order.
    pub fn select_horizons(&self, horizons: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = horizons
            .iter()
            .map(|h| {
                self.horizons
                    .iter()
                    .position(|x| x == h)
                    .ok_or_else(|| Error::Config(format!("horizon {h} is not in the table")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            horizons: horizons.to_vec(),
            rows: self
                .rows
                .iter()
                .map(|r| AblationRow {
                    aa_map: idx.iter().map(|&i| r.aa_map[i]).collect(),
                    ..r.clone()
                })
                .collect(),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cell".to_string(), "seed".into(), "oad_map".into()];
        header.extend(self.horizons.iter().map(|h| format!("aa_map@{h}")));
        let to_csv_err = |e: csv::Error| Error::format("ablation table", e.to_string());
        w.write_record(&header).map_err(to_csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.cell.clone(), r.seed.to_string(), format!("{}", r.oad_map)];
            rec.extend(
                r.aa_map
                    .iter()
                    .map(|v| v.map(|x| format!("{x}")).unwrap_or_default()),
            );
            w.write_record(&rec).map_err(to_csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::format("ablation table", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("ablation table", d);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.len() < 3
            || &header[0] != "cell"
            || &header[1] != "seed"
            || &header[2] != "oad_map"
        {
            return Err(bad("expected columns cell, seed, oad_map".into()));
        }
        let horizons = header
            .iter()
            .skip(3)
            .map(|h| {
                h.strip_prefix("aa_map@")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("unexpected column `{h}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            rows.push(AblationRow {
                cell: rec[0].to_string(),
                seed: rec[1].parse().map_err(|e| bad(format!("seed: {e}")))?,
                oad_map: num(&rec[2])?,
                aa_map: rec
                    .iter()
                    .skip(3)
                    .map(|v| {
                        if v.is_empty() {
                            Ok(None)
                        } else {
                            num(v).map(Some)
                        }
                    })
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self { horizons, rows })
    }

    /// Fixed-width text table of per-cell medians, mAP in percent.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let width = self
            .cells()
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(4)
            .max(4);
        let _ = write!(out, "{:<width$}  seeds  OAD mAP", "cell");
        for h in &self.horizons {
            let _ = write!(out, "  AA@{h:<4}");
        }
        out.push('\n');
        for s in self.summaries() {
            let _ = write!(
                out,
                "{:<width$}  {:>5}  {:>7.2}",
                s.cell,
                s.seeds,
                100.0 * s.oad_median
            );
            for v in &s.aa_median {
                match v {
                    Some(v) => {
                        let _ = write!(out, "  {:>7.2}", 100.0 * v);
                    }
                    None => out.push_str("        -"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Shared settings of every ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBase {
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub train: TrainConfig,
}

/// Trains and evaluates one cell with one seed.
pub fn run_cell(
    datasets: &BTreeMap<String, Dataset>,
    base: &AblationBase,
    cell: &AblationCell,
    seed: u64,
    horizons: &[usize],
) -> Result<AblationRow> {
    let wrap = |e: Error| Error::Cell {
        cell: cell.name.clone(),
        seed,
        source: Box::new(e),
    };
    let dataset = datasets
        .get(&cell.dataset)
        .ok_or_else(|| wrap(Error::Config(format!("unknown dataset `{}`", cell.dataset))))?;
    let (model_cfg, mut train_cfg) = cell.configure(&base.model, &base.train);
    train_cfg.seed = seed;
    train_cfg.eval_every = 0;
    let outcome = train(dataset, &model_cfg, &base.memory, &train_cfg, None, |_| {
        Ok(ControlFlow::Continue(()))
    })
    .map_err(wrap)?;
    let scored: Vec<usize> = if cell.anticipation {
        horizons
            .iter()
            .copied()
            .filter(|&h| h <= model_cfg.anticipation_horizon)
            .collect()
    } else {
        Vec::new()
    };
    let scfg = StreamingConfig::new(base.memory, model_cfg.memory_mode, scored.clone());
    let result = streaming_eval(&outcome.model, &dataset.test, &scfg).map_err(wrap)?;
    let aa_map = horizons
        .iter()
        .map(|h| {
            scored
                .iter()
                .position(|s| s == h)
                .map(|i| result.anticipation[i].map)
        })
        .collect();
    info!(
        "cell {} seed {seed}: OAD mAP {:.4}",
        cell.name, result.oad.map
    );
    Ok(AblationRow {
        cell: cell.name.clone(),
        seed,
        oad_map: result.oad.map,
        aa_map,
    })
}

/// Worker count from `JOADAA_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every `cells × seeds` combination. Rows come out in cell-major order
/// whatever the scheduling.
pub fn ablation_suite(
    datasets: &BTreeMap<String, Dataset>,
    base: &AblationBase,
    cells: &[AblationCell],
    seeds: &[u64],
    horizons: &[usize],
) -> Result<AblationTable> {
    if seeds.is_empty() || cells.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one cell and one seed".into(),
        ));
    }
    let jobs: Vec<(&AblationCell, u64)> = cells
        .iter()
        .flat_map(|c| seeds.iter().map(move |s| (c, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|(c, s)| run_cell(datasets, base, c, *s, horizons))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(AblationTable {
        horizons: horizons.to_vec(),
        rows,
    })
}

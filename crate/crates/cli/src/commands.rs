use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use joadaa_core::eval::{
    ablation_suite, render_reports, streaming_eval, AblationTable, EvalReport, OracleModel,
    ScoreTable, StreamingConfig, StreamingPredictor, DEFAULT_HORIZONS,
};
use joadaa_core::memory::MemoryConfig;
use joadaa_core::model::checkpoint::Checkpoint;
use joadaa_core::synth::io::{read_dataset, write_dataset};
use joadaa_core::synth::{make_dataset, Dataset};
use joadaa_core::train::{train as run_training, MetricsRecord};
use joadaa_core::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{
    create_dir, file_digest, io_error, read_to_string, tree_digest, write, RunManifest,
};
use crate::svg::{timeline_svg, Strip};
use crate::{EvalArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.jdck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_TEXT: &str = "eval.txt";
pub const EVAL_JSON: &str = "eval.json";
pub const SCORES_JSON: &str = "scores.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const SUMMARY_TEXT: &str = "summary.txt";

pub fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config, None)?;
    let mut dcfg = cfg.dataset()?.clone();
    if let Some(seed) = seed {
        dcfg.seed = seed;
    }
    cfg.dataset = Some(dcfg.clone());
    let mut manifest = RunManifest::new("gen-data", &cfg, dcfg.seed)?.artifact("dataset", out);
    manifest.write(out)?;
    let ds = make_dataset(&dcfg)?;
    write_dataset(out, &dcfg, &ds)?;
    let digest = tree_digest(out)?;
    info!(
        "wrote {} train / {} test videos to {} (sha256 {digest})",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    manifest.digests.insert("dataset".into(), digest);
    manifest.write(out)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (_, ds) = read_dataset(&args.dataset)?;
    let mut cfg = RunConfig::load(&args.config, Some((ds.feature_dim(), ds.num_classes())))?;
    cfg.apply(&args.overrides);
    cfg.model.validate()?;
    let out = &args.out;
    let ck_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let mut manifest = RunManifest::new("train", &cfg, cfg.train.seed)?
        .artifact("dataset", &args.dataset)
        .artifact("checkpoint", &ck_path)
        .artifact("metrics", &metrics_path);
    manifest
        .digests
        .insert("dataset".into(), tree_digest(&args.dataset)?);

    let resume = if args.resume {
        let ck = Checkpoint::load(&ck_path)?;
        let kept = completed_metrics(&metrics_path, ck.state.epoch)?;
        manifest.write(out)?;
        write(&metrics_path, kept.as_bytes())?;
        info!(
            "resuming after epoch {} (step {})",
            ck.state.epoch, ck.state.step
        );
        Some(ck)
    } else {
        manifest.write(out)?;
        write(&metrics_path, b"")?;
        None
    };

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| io_error(&metrics_path, e))?;
    let stop = args.stop_after_epoch;
    let outcome = run_training(
        &ds,
        &cfg.model,
        &cfg.memory,
        &cfg.train,
        resume.as_ref(),
        |end| {
            log.write_all(metrics_lines(end.records)?.as_bytes())
                .map_err(|e| io_error(&metrics_path, e))?;
            save_atomic(&end.checkpoint(cfg.memory), &ck_path)?;
            Ok(if stop.is_some_and(|s| end.state.epoch >= s) {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            })
        },
    )?;
    info!(
        "trained to epoch {} (step {})",
        outcome.state.epoch, outcome.state.step
    );
    manifest
        .digests
        .insert("checkpoint".into(), file_digest(&ck_path)?);
    manifest.write(out)
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("jdck.tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn metrics_lines(records: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// Log lines of epochs before `epochs`, kept byte for byte.
fn completed_metrics(path: &Path, epochs: usize) -> Result<String> {
    let mut kept = String::new();
    for line in read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
    {
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            what: "metrics log",
            detail: e.to_string(),
        })?;
        if record.epoch < epochs {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Per-frame scores and targets of one table, starting at `first_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub horizon: usize,
    pub first_frame: usize,
    pub scores: Vec<Vec<f64>>,
    pub targets: Vec<Vec<u8>>,
}

impl TableRecord {
    fn new(horizon: usize, first_frame: usize, table: &ScoreTable) -> Self {
        Self {
            horizon,
            first_frame,
            scores: table.scores().outer_iter().map(|r| r.to_vec()).collect(),
            targets: table.targets().outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub num_frames: usize,
    /// Online detection first, then one table per horizon.
    pub tables: Vec<TableRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub classes: Vec<String>,
    pub oad: EvalReport,
    pub anticipation: Vec<EvalReport>,
}

impl EvalRecord {
    fn reports(&self) -> Vec<EvalReport> {
        std::iter::once(self.oad.clone())
            .chain(self.anticipation.iter().cloned())
            .collect()
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (_, ds) = read_dataset(&args.dataset)?;
    let out = &args.out;
    let (model, memory, mode): (Box<dyn StreamingPredictor>, MemoryConfig, _) =
        match &args.checkpoint {
            Some(path) if !args.oracle => {
                let ck = Checkpoint::load(path)?;
                let mode = ck.model.memory_mode;
                (Box::new(ck.restore()?), ck.memory, mode)
            }
            _ => {
                let reach = args
                    .horizons
                    .as_deref()
                    .unwrap_or(&DEFAULT_HORIZONS)
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(0)
                    .saturating_sub(usize::from(args.horizon_includes_current));
                let memory = MemoryConfig::default();
                (
                    Box::new(OracleModel::new(&ds.test, reach)),
                    memory,
                    Default::default(),
                )
            }
        };
    let horizons = match &args.horizons {
        Some(h) => h.clone(),
        None => DEFAULT_HORIZONS
            .iter()
            .copied()
            .filter(|&h| {
                h <= model.anticipation_horizon() + usize::from(args.horizon_includes_current)
            })
            .collect(),
    };
    let snapshot = serde_json::json!({
        "oracle": args.oracle,
        "horizons": horizons,
        "memory": memory,
        "memory_mode": mode,
        "horizon_includes_current": args.horizon_includes_current,
    });
    let mut manifest = RunManifest::new("eval", &snapshot, 0)?
        .artifact("dataset", &args.dataset)
        .artifact("report", out.join(EVAL_TEXT))
        .artifact("record", out.join(EVAL_JSON))
        .artifact("scores", out.join(SCORES_JSON));
    if let Some(path) = &args.checkpoint {
        manifest = manifest.artifact("checkpoint", path);
        manifest
            .digests
            .insert("checkpoint".into(), file_digest(path)?);
    }
    manifest
        .digests
        .insert("dataset".into(), tree_digest(&args.dataset)?);
    manifest.write(out)?;

    let mut scfg = StreamingConfig::new(memory, mode, horizons.clone());
    scfg.horizon_includes_current = args.horizon_includes_current;
    let result = streaming_eval(model.as_ref(), &ds.test, &scfg)?;
    let record = EvalRecord {
        classes: ds.actions.actions().to_vec(),
        oad: result.oad,
        anticipation: result.anticipation,
    };
    let videos: Vec<VideoRecord> = result
        .videos
        .iter()
        .zip(&ds.test)
        .map(|(v, video)| VideoRecord {
            id: v.id.clone(),
            num_frames: video.timeline.num_frames(),
            tables: std::iter::once(TableRecord::new(0, 1, &v.oad))
                .chain(
                    v.anticipation
                        .iter()
                        .map(|(h, t)| TableRecord::new(*h, 1 + scfg.row_of(*h), t)),
                )
                .collect(),
        })
        .collect();
    let text = render_reports(&record.reports(), &record.classes);
    print!("{text}");
    println!("OAD mAP {:.4}", record.oad.map);
    write(&out.join(EVAL_TEXT), text.as_bytes())?;
    write(&out.join(EVAL_JSON), to_json(&record)?.as_bytes())?;
    write(&out.join(SCORES_JSON), to_json(&videos)?.as_bytes())
}

fn to_json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::Format {
        what,
        detail: e.to_string(),
    })
}

pub fn ablate(config: &Path, out: &Path, horizons: Option<Vec<usize>>) -> Result<()> {
    let mut cfg = RunConfig::load(config, None)?;
    let mut ablation = cfg.ablation()?.clone();
    if let Some(h) = horizons {
        ablation.horizons = h;
    }
    cfg.ablation = Some(ablation.clone());
    let seed = ablation.seeds.first().copied().unwrap_or_default();
    let manifest = RunManifest::new("ablate", &cfg, seed)?
        .artifact("table", out.join(ABLATION_CSV))
        .artifact("summary", out.join(SUMMARY_TEXT));
    manifest.write(out)?;

    let datasets = ablation
        .datasets
        .iter()
        .map(|(name, d)| Ok((name.clone(), make_dataset(d)?)))
        .collect::<Result<BTreeMap<String, Dataset>>>()?;
    let table = ablation_suite(
        &datasets,
        &cfg.ablation_base(),
        &ablation.cells,
        &ablation.seeds,
        &ablation.horizons,
    )?;
    let summary = table.render_summary();
    print!("{summary}");
    write(&out.join(ABLATION_CSV), table.to_csv()?.as_bytes())?;
    write(&out.join(SUMMARY_TEXT), summary.as_bytes())
}

pub fn report(runs: &[PathBuf], out: &Path, horizons: Option<Vec<usize>>) -> Result<()> {
    let names = run_names(runs);
    let mut manifest = RunManifest::new(
        "report",
        &serde_json::json!({ "runs": runs, "horizons": horizons }),
        0,
    )?;
    for name in &names {
        manifest = manifest.artifact(name, out.join(name));
    }
    manifest.write(out)?;
    for (run, name) in runs.iter().zip(&names) {
        let dest = out.join(name);
        create_dir(&dest)?;
        let mut found = false;
        if run.join(ABLATION_CSV).is_file() {
            found = true;
            report_ablation(run, &dest, horizons.as_deref())?;
        }
        if run.join(EVAL_JSON).is_file() {
            found = true;
            report_eval(run, &dest, horizons.as_deref())?;
        }
        if !found {
            return Err(Error::Format {
                what: "run directory",
                detail: format!(
                    "{} holds neither {ABLATION_CSV} nor {EVAL_JSON}",
                    run.display()
                ),
            });
        }
    }
    Ok(())
}

/// Output subdirectory per run, from the run directory's name.
fn run_names(runs: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for run in runs {
        let base = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let mut name = base.clone();
        let mut i = 1;
        while names.contains(&name) {
            i += 1;
            name = format!("{base}_{i}");
        }
        names.push(name);
    }
    names
}

fn report_ablation(run: &Path, dest: &Path, horizons: Option<&[usize]>) -> Result<()> {
    let mut table = AblationTable::from_csv(&read_to_string(&run.join(ABLATION_CSV))?)?;
    if let Some(h) = horizons {
        table = table.select_horizons(h)?;
    }
    let summary = table.render_summary();
    print!("{summary}");
    write(&dest.join(ABLATION_CSV), table.to_csv()?.as_bytes())?;
    write(&dest.join(SUMMARY_TEXT), summary.as_bytes())
}

fn report_eval(run: &Path, dest: &Path, horizons: Option<&[usize]>) -> Result<()> {
    let mut record: EvalRecord = from_json(&run.join(EVAL_JSON), "eval record")?;
    let mut videos: Vec<VideoRecord> = from_json(&run.join(SCORES_JSON), "score record")?;
    if let Some(h) = horizons {
        let missing: Vec<usize> = h
            .iter()
            .copied()
            .filter(|k| !record.anticipation.iter().any(|r| r.horizon == *k))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "horizons {missing:?} were not evaluated in {}",
                run.display()
            )));
        }
        record.anticipation.retain(|r| h.contains(&r.horizon));
        for v in &mut videos {
            v.tables
                .retain(|t| t.horizon == 0 || h.contains(&t.horizon));
        }
    }
    let text = render_reports(&record.reports(), &record.classes);
    print!("{text}");
    write(&dest.join(EVAL_TEXT), text.as_bytes())?;
    write(&dest.join("eval.csv"), eval_csv(&record).as_bytes())?;
    let strips_dir = dest.join("strips");
    create_dir(&strips_dir)?;
    for v in &videos {
        let Some(oad) = v.tables.first() else {
            continue;
        };
        let truth: Vec<Vec<f64>> = oad
            .targets
            .iter()
            .map(|r| r.iter().map(|&t| f64::from(t)).collect())
            .collect();
        let mut strips = vec![Strip {
            label: "ground truth".into(),
            first_frame: oad.first_frame,
            values: &truth,
        }];
        for t in &v.tables {
            strips.push(Strip {
                label: if t.horizon == 0 {
                    "online detection".into()
                } else {
                    format!("anticipation +{}", t.horizon)
                },
                first_frame: t.first_frame,
                values: &t.scores,
            });
        }
        let svg = timeline_svg(&v.id, &record.classes, v.num_frames, &strips);
        write(&strips_dir.join(format!("{}.svg", v.id)), svg.as_bytes())?;
    }
    Ok(())
}

fn eval_csv(record: &EvalRecord) -> String {
    let mut s = String::from("task,frames,map");
    for c in &record.classes {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for r in record.reports() {
        let task = if r.horizon == 0 {
            "oad".to_string()
        } else {
            format!("aa@{}", r.horizon)
        };
        s.push_str(&format!("{task},{},{}", r.num_frames_evaluated, r.map));
        for ap in &r.per_class_ap {
            s.push(',');
            if let Some(v) = ap {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

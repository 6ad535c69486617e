use std::ops::ControlFlow;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, compute_loss, lr_at, AdamW, LossReport, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{streaming_eval, StreamingConfig};
use crate::memory::{FeatureWindow, MemoryConfig};
use crate::model::checkpoint::{Checkpoint, TrainState};
use crate::model::{Dropout, Joadaa, ModelConfig, PredictionBundle};
use crate::synth::{derive_seed, Dataset, Video};

const STREAM_INIT: u64 = 0x1A;
const STREAM_ORDER: u64 = 0x0D;
const STREAM_DROPOUT: u64 = 0xD0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_past: f64,
    pub loss_ant: f64,
    pub loss_present: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_map: Option<f64>,
}

/// A training example: current frame `t` of training video `video`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub video: usize,
    pub t: usize,
}

/// Handed to the epoch callback after every epoch.
pub struct EpochEnd<'a> {
    pub model: &'a Joadaa,
    pub optimizer: &'a AdamW,
    pub state: TrainState,
    /// Records produced during this epoch.
    pub records: &'a [MetricsRecord],
}

impl EpochEnd<'_> {
    pub fn checkpoint(&self, memory: MemoryConfig) -> Checkpoint {
        Checkpoint::capture(
            self.model,
            memory,
            self.state,
            Some(self.optimizer.moments().clone()),
        )
    }
}

pub struct TrainOutcome {
    pub model: Joadaa,
    pub optimizer: AdamW,
    pub state: TrainState,
    /// Records produced by this call.
    pub records: Vec<MetricsRecord>,
}

/// Shuffled samples of one epoch, fixed by `(seed, epoch)`.
pub fn sample_epoch(videos: &[Video], cfg: &TrainConfig, epoch: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ORDER, epoch as u64));
    let mut out = Vec::with_capacity(videos.len() * cfg.samples_per_video);
    for (v, video) in videos.iter().enumerate() {
        let n = video.timeline.num_frames();
        if n < 2 {
            continue;
        }
        for _ in 0..cfg.samples_per_video {
            out.push(Sample {
                video: v,
                t: rng.random_range(1..n),
            });
        }
    }
    out.shuffle(&mut rng);
    out
}

fn steps_per_epoch(videos: &[Video], cfg: &TrainConfig) -> usize {
    let usable = videos
        .iter()
        .filter(|v| v.timeline.num_frames() >= 2)
        .count();
    (usable * cfg.samples_per_video).div_ceil(cfg.batch_size)
}

pub fn total_steps(videos: &[Video], cfg: &TrainConfig) -> usize {
    steps_per_epoch(videos, cfg) * cfg.epochs
}

/// Loss and parameter gradients for one example, gradients scaled by `scale`.
pub fn example_gradients(
    model: &Joadaa,
    video: &Video,
    t: usize,
    memory: &MemoryConfig,
    cfg: &TrainConfig,
    dropout: Dropout,
    scale: f64,
) -> Result<(LossReport, Vec<Array2<f64>>)> {
    let mcfg = model.config();
    let window = FeatureWindow::from_stream(&video.features, t, memory, mcfg.memory_mode)?;
    let current = video.features.row_f64(t);
    let mut tape = crate::autograd::Tape::new(model.params());
    let mut drop = dropout;
    let vars = model.forward(&mut tape, &window, &current, &mut drop)?;
    let bundle = PredictionBundle {
        past_logits: tape.value(vars.past_logits).clone(),
        anticipation_logits: tape.value(vars.anticipation_logits).clone(),
        online_logits: tape.value(vars.online_logits).row(0).to_owned(),
    };
    let out = compute_loss(
        &bundle,
        &video.timeline,
        t,
        window.valid(),
        mcfg.head_mode,
        cfg.loss_weights,
    )?;
    let grads = tape
        .backward(&[
            (vars.past_logits, out.past_grad * scale),
            (vars.anticipation_logits, out.anticipation_grad * scale),
            (vars.online_logits, out.online_grad * scale),
        ])?
        .param_grads(model.params());
    Ok((out.report, grads))
}

fn check_finite(report: &LossReport, step: usize, batch: &[Sample]) -> Result<()> {
    const LOSSES: [&str; 3] = ["past loss", "anticipation loss", "present loss"];
    for (head, loss) in LOSSES.iter().zip(report.per_head) {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                head,
                videos: batch.iter().map(|s| s.video).collect(),
            });
        }
    }
    Ok(())
}

/// Trains on `dataset.train`, optionally continuing from `resume`.
///
/// `on_epoch` runs after every epoch; returning `Break` stops training early.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    memory: &MemoryConfig,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&EpochEnd) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    memory.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if model_cfg.feature_dim != dataset.feature_dim()
        || model_cfg.num_classes != dataset.num_classes()
    {
        return Err(Error::Config(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            model_cfg.feature_dim,
            model_cfg.num_classes,
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }

    let (mut model, mut optimizer, mut state) = match resume {
        Some(ck) => {
            if &ck.model != model_cfg || &ck.memory != memory {
                return Err(Error::Config(
                    "checkpoint was written with a different model or memory config".into(),
                ));
            }
            let model = ck.restore()?;
            let moments = ck
                .moments
                .clone()
                .ok_or_else(|| Error::format("checkpoint", "no optimiser state to resume from"))?;
            let opt = AdamW::resume(moments, ck.state.step, cfg.weight_decay);
            (model, opt, ck.state)
        }
        None => {
            let model = Joadaa::new(model_cfg.clone(), derive_seed(cfg.seed, STREAM_INIT, 0))?;
            let opt = AdamW::new(model.params(), cfg.weight_decay);
            (model, opt, TrainState::default())
        }
    };

    let total = total_steps(&dataset.train, cfg);
    let per_epoch = steps_per_epoch(&dataset.train, cfg);
    if total == 0 {
        return Err(Error::Config(
            "training videos need at least two frames".into(),
        ));
    }
    let mut all_records = Vec::new();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let samples = sample_epoch(&dataset.train, cfg, epoch);
        let mut records = Vec::with_capacity(per_epoch + 1);
        let mut epoch_sum = [0.0; 4];
        for (b, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(state.step, total, cfg)?;
            let scale = 1.0 / batch.len() as f64;
            let first = epoch * samples.len() + b * cfg.batch_size;
            let results: Vec<Result<(LossReport, Vec<Array2<f64>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let drop = Dropout::train(
                        model_cfg.dropout,
                        derive_seed(cfg.seed, STREAM_DROPOUT, (first + i) as u64),
                    );
                    example_gradients(
                        &model,
                        &dataset.train[s.video],
                        s.t,
                        memory,
                        cfg,
                        drop,
                        scale,
                    )
                })
                .collect();
            let mut grads: Option<Vec<Array2<f64>>> = None;
            let mut sum = [0.0; 4];
            for r in results {
                let (report, g) = r?;
                check_finite(&report, state.step, batch)?;
                sum[0] += report.total * scale;
                for h in 0..3 {
                    sum[h + 1] += report.per_head[h] * scale;
                }
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    head: "gradient",
                    videos: batch.iter().map(|s| s.video).collect(),
                });
            }
            optimizer.step(model.params_mut(), &grads, lr)?;
            if model
                .params()
                .ids()
                .any(|id| model.params().get(id).iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    head: "parameter update",
                    videos: batch.iter().map(|s| s.video).collect(),
                });
            }
            state.step += 1;
            for (e, s) in epoch_sum.iter_mut().zip(sum) {
                *e += s;
            }
            debug!(
                "step {} lr {lr:.3e} loss {:.5} grad-norm {norm:.4}",
                state.step, sum[0]
            );
            records.push(MetricsRecord {
                kind: RecordKind::Step,
                step: state.step,
                epoch,
                lr,
                loss_total: sum[0],
                loss_past: sum[1],
                loss_ant: sum[2],
                loss_present: sum[3],
                eval_map: None,
            });
        }
        state.epoch += 1;

        let eval_map = if cfg.eval_every > 0
            && state.epoch % cfg.eval_every == 0
            && !dataset.test.is_empty()
        {
            let scfg = StreamingConfig::new(*memory, model_cfg.memory_mode, vec![]);
            Some(streaming_eval(&model, &dataset.test, &scfg)?.oad.map)
        } else {
            None
        };
        let n = per_epoch as f64;
        let lr = lr_at(state.step, total, cfg)?;
        records.push(MetricsRecord {
            kind: RecordKind::Epoch,
            step: state.step,
            epoch,
            lr,
            loss_total: epoch_sum[0] / n,
            loss_past: epoch_sum[1] / n,
            loss_ant: epoch_sum[2] / n,
            loss_present: epoch_sum[3] / n,
            eval_map,
        });
        info!(
            "epoch {} loss {:.5}{}",
            state.epoch,
            epoch_sum[0] / n,
            eval_map
                .map(|m| format!(" eval mAP {:.4}", m))
                .unwrap_or_default()
        );
        let flow = on_epoch(&EpochEnd {
            model: &model,
            optimizer: &optimizer,
            state,
            records: &records,
        })?;
        all_records.extend(records);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        state,
        records: all_records,
    })
}

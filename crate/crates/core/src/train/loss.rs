use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadMode, PredictionBundle};
use crate::synth::EventTimeline;

pub const HEAD_NAMES: [&str; 3] = ["past", "anticipation", "present"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `[past, anticipation, present]`
    pub per_head: [f64; 3],
    pub step: usize,
}

/// Loss value plus its gradient with respect to each logit block.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    pub past_grad: Array2<f64>,
    pub anticipation_grad: Array2<f64>,
    /// `(1 × output_dim)`
    pub online_grad: Array2<f64>,
}

/// Training target for one frame, `output_dim` wide.
///
/// Sigmoid heads get the binary label vector. Softmax heads get the labels
/// normalised to a distribution, with all mass on the trailing background
/// column when nothing is active.
pub fn frame_target(timeline: &EventTimeline, frame: usize, mode: HeadMode) -> Array1<f64> {
    let labels = timeline.labels().row(frame).mapv(f64::from);
    match mode {
        HeadMode::Sigmoid => labels,
        HeadMode::Softmax => {
            let mut out = Array1::zeros(labels.len() + 1);
            let active = labels.sum();
            if active == 0.0 {
                out[labels.len()] = 1.0;
            } else {
                out.slice_mut(ndarray::s![..labels.len()])
                    .assign(&(labels / active));
            }
            out
        }
    }
}

/// Mean loss over `rows` of `logits` against `targets`, and its gradient.
/// BCE averages over rows and classes, cross-entropy over rows.
fn head_loss(
    logits: Vec<(usize, ArrayView1<'_, f64>)>,
    targets: &[Array1<f64>],
    mode: HeadMode,
    grad: &mut Array2<f64>,
) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let width = grad.ncols() as f64;
    let denom = match mode {
        HeadMode::Sigmoid => targets.len() as f64 * width,
        HeadMode::Softmax => targets.len() as f64,
    };
    let mut total = 0.0;
    for ((row, x), y) in logits.into_iter().zip(targets) {
        let (loss, g) = match mode {
            HeadMode::Sigmoid => bce_with_logits(x, y.view()),
            HeadMode::Softmax => cross_entropy(x, y.view()),
        };
        total += loss;
        grad.row_mut(row).assign(&(g / denom));
    }
    total / denom
}

/// Summed BCE over one row and its gradient.
fn bce_with_logits(x: ArrayView1<f64>, y: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let mut loss = 0.0;
    let grad = Array1::from_iter(x.iter().zip(y.iter()).map(|(&x, &y)| {
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        crate::autograd::sigmoid(x) - y
    }));
    (loss, grad)
}

/// Cross-entropy of one row against a target distribution and its gradient.
fn cross_entropy(x: ArrayView1<f64>, y: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_p = x.mapv(|v| v - log_z);
    let loss = -(&y * &log_p).sum();
    let grad = log_p.mapv(f64::exp) * y.sum() - y;
    (loss, grad)
}

/// Losses of all three heads for current frame `t`.
///
/// * past: window rows flagged in `valid`; real row `i` of `r` holds frame `t - r + i`
/// * anticipation: row `k` targets frame `t + k`; rows past the end are skipped
/// * present: frame `t`
pub fn compute_loss(
    bundle: &PredictionBundle,
    timeline: &EventTimeline,
    t: usize,
    valid: &[bool],
    mode: HeadMode,
    weights: [f64; 3],
) -> Result<LossOutput> {
    let width = match mode {
        HeadMode::Sigmoid => timeline.num_classes(),
        HeadMode::Softmax => timeline.num_classes() + 1,
    };
    let check = |ctx: &'static str, cols: usize| {
        if cols == width {
            Ok(())
        } else {
            Err(Error::shape(ctx, width, cols))
        }
    };
    check("past logits", bundle.past_logits.ncols())?;
    check("anticipation logits", bundle.anticipation_logits.ncols())?;
    check("online logits", bundle.online_logits.len())?;
    if bundle.past_logits.nrows() != valid.len() {
        return Err(Error::shape(
            "past logits rows",
            valid.len(),
            bundle.past_logits.nrows(),
        ));
    }
    if t >= timeline.num_frames() {
        return Err(Error::shape("current frame", timeline.num_frames(), t));
    }
    let real = valid.iter().filter(|v| **v).count();
    if real > t {
        return Err(Error::shape("past window frames", t, real));
    }

    let mut past_grad = Array2::zeros(bundle.past_logits.dim());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut frame = t - real;
    for (i, v) in valid.iter().enumerate() {
        if *v {
            rows.push((i, bundle.past_logits.row(i)));
            targets.push(frame_target(timeline, frame, mode));
            frame += 1;
        }
    }
    let past = head_loss(rows, &targets, mode, &mut past_grad);

    let mut anticipation_grad = Array2::zeros(bundle.anticipation_logits.dim());
    let horizon = bundle
        .anticipation_logits
        .nrows()
        .min(timeline.num_frames() - t);
    let rows = (0..horizon)
        .map(|k| (k, bundle.anticipation_logits.row(k)))
        .collect();
    let targets: Vec<_> = (0..horizon)
        .map(|k| frame_target(timeline, t + k, mode))
        .collect();
    let anticipation = head_loss(rows, &targets, mode, &mut anticipation_grad);

    let mut online_grad = Array2::zeros((1, width));
    let present = head_loss(
        vec![(0, bundle.online_logits.view())],
        &[frame_target(timeline, t, mode)],
        mode,
        &mut online_grad,
    );

    let per_head = [past, anticipation, present];
    let total = weights.iter().zip(per_head).map(|(w, l)| w * l).sum();
    past_grad *= weights[0];
    anticipation_grad *= weights[1];
    online_grad *= weights[2];
    Ok(LossOutput {
        report: LossReport {
            total,
            per_head,
            step: 0,
        },
        past_grad,
        anticipation_grad,
        online_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn timeline(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> EventTimeline {
        let mut labels =
            Array2::from_shape_simple_fn((frames, classes), || rng.random_bool(0.3) as u8);
        labels[[0, 0]] = 1;
        EventTimeline::new(labels).unwrap()
    }

    fn bundle_from(
        tl: &EventTimeline,
        t: usize,
        valid: &[bool],
        nq: usize,
        mode: HeadMode,
        f: impl Fn(f64) -> f64,
    ) -> PredictionBundle {
        let real = valid.iter().filter(|v| **v).count();
        let width = frame_target(tl, 0, mode).len();
        let mut past = Array2::zeros((valid.len(), width));
        let mut frame = t - real;
        for (i, v) in valid.iter().enumerate() {
            if *v {
                past.row_mut(i)
                    .assign(&frame_target(tl, frame, mode).mapv(&f));
                frame += 1;
            }
        }
        let mut ant = Array2::zeros((nq, width));
        for k in 0..nq.min(tl.num_frames() - t) {
            ant.row_mut(k)
                .assign(&frame_target(tl, t + k, mode).mapv(&f));
        }
        PredictionBundle {
            past_logits: past,
            anticipation_logits: ant,
            online_logits: frame_target(tl, t, mode).mapv(&f),
        }
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tl = timeline(&mut rng, 30, 4);
        let valid = [false, false, true, true, true, true];
        let b = bundle_from(&tl, 10, &valid, 3, HeadMode::Sigmoid, |y| {
            if y > 0.5 {
                20.0
            } else {
                -20.0
            }
        });
        let out = compute_loss(&b, &tl, 10, &valid, HeadMode::Sigmoid, [1.0; 3]).unwrap();
        assert!(out.report.total < 1e-6, "{:?}", out.report);
        let b = bundle_from(&tl, 10, &valid, 3, HeadMode::Softmax, |y| 20.0 * y);
        let out = compute_loss(&b, &tl, 10, &valid, HeadMode::Softmax, [1.0; 3]).unwrap();
        // soft targets have entropy, so compare against it
        let entropy = |frame: usize| {
            let y = frame_target(&tl, frame, HeadMode::Softmax);
            -y.iter()
                .filter(|v| **v > 0.0)
                .map(|v| v * v.ln())
                .sum::<f64>()
        };
        let expected = entropy(10);
        assert!((out.report.per_head[2] - expected).abs() < 1e-6);
    }

    #[test]
    fn zero_logits_cost_ln2_per_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tl = timeline(&mut rng, 20, 5);
        let valid = [true; 4];
        let b = PredictionBundle {
            past_logits: Array2::zeros((4, 5)),
            anticipation_logits: Array2::zeros((3, 5)),
            online_logits: Array1::zeros(5),
        };
        let out = compute_loss(&b, &tl, 6, &valid, HeadMode::Sigmoid, [1.0; 3]).unwrap();
        for l in out.report.per_head {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!((out.report.total - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Plain nested loops over rows and classes.
    fn bce_oracle(logits: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let mut sum = 0.0;
        for i in 0..logits.nrows() {
            for c in 0..logits.ncols() {
                let p = 1.0 / (1.0 + (-logits[[i, c]]).exp());
                let y = targets[[i, c]];
                sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        sum / logits.len() as f64
    }

    #[test]
    fn matches_scalar_bce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let tl = timeline(&mut rng, 25, 4);
            let t = rng.random_range(1..25);
            let pad = rng.random_range(0..4);
            let real = rng.random_range(1..=t.min(6));
            let valid: Vec<bool> = (0..pad + real).map(|i| i >= pad).collect();
            let nq = rng.random_range(1..5);
            let mut r = |rows, cols| {
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-4.0..4.0))
            };
            let b = PredictionBundle {
                past_logits: r(valid.len(), 4),
                anticipation_logits: r(nq, 4),
                online_logits: r(1, 4).row(0).to_owned(),
            };
            let w = [0.5, 2.0, 1.5];
            let out = compute_loss(&b, &tl, t, &valid, HeadMode::Sigmoid, w).unwrap();

            let labels = tl.labels().mapv(f64::from);
            let past_t = labels.slice(ndarray::s![t - real..t, ..]).to_owned();
            let past_l = b.past_logits.slice(ndarray::s![pad.., ..]).to_owned();
            let h = nq.min(25 - t);
            let ant_t = labels.slice(ndarray::s![t..t + h, ..]).to_owned();
            let ant_l = b.anticipation_logits.slice(ndarray::s![..h, ..]).to_owned();
            let on_t = labels.slice(ndarray::s![t..t + 1, ..]).to_owned();
            let on_l = b.online_logits.clone().insert_axis(ndarray::Axis(0));
            let expected = [
                bce_oracle(&past_l, &past_t),
                bce_oracle(&ant_l, &ant_t),
                bce_oracle(&on_l, &on_t),
            ];
            for (a, e) in out.report.per_head.iter().zip(expected) {
                assert!((a - e).abs() <= 1e-6 * e.abs(), "{a} vs {e}");
            }
            let total: f64 = w.iter().zip(expected).map(|(w, e)| w * e).sum();
            assert!((out.report.total - total).abs() <= 1e-6 * total);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tl = timeline(&mut rng, 12, 3);
        let valid = [false, true, true, true];
        for mode in [HeadMode::Sigmoid, HeadMode::Softmax] {
            let width = frame_target(&tl, 0, mode).len();
            let mut r = |rows, cols| {
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-3.0..3.0))
            };
            let mut b = PredictionBundle {
                past_logits: r(4, width),
                anticipation_logits: r(4, width),
                online_logits: r(1, width).row(0).to_owned(),
            };
            let w = [0.7, 1.3, 0.4];
            let t = 10;
            let out = compute_loss(&b, &tl, t, &valid, mode, w).unwrap();
            let eps = 1e-6;
            let loss = |b: &PredictionBundle| {
                compute_loss(b, &tl, t, &valid, mode, w)
                    .unwrap()
                    .report
                    .total
            };
            for i in 0..4 {
                for c in 0..width {
                    let orig = b.anticipation_logits[[i, c]];
                    b.anticipation_logits[[i, c]] = orig + eps;
                    let up = loss(&b);
                    b.anticipation_logits[[i, c]] = orig - eps;
                    let down = loss(&b);
                    b.anticipation_logits[[i, c]] = orig;
                    let n = (up - down) / (2.0 * eps);
                    assert!((n - out.anticipation_grad[[i, c]]).abs() < 1e-7);
                    // rows beyond the video end carry no gradient
                    if i >= 2 {
                        assert_eq!(out.anticipation_grad[[i, c]], 0.0);
                    }

                    let orig = b.past_logits[[i, c]];
                    b.past_logits[[i, c]] = orig + eps;
                    let up = loss(&b);
                    b.past_logits[[i, c]] = orig - eps;
                    let down = loss(&b);
                    b.past_logits[[i, c]] = orig;
                    assert!(((up - down) / (2.0 * eps) - out.past_grad[[i, c]]).abs() < 1e-7);
                }
            }
            for c in 0..width {
                let orig = b.online_logits[c];
                b.online_logits[c] = orig + eps;
                let up = loss(&b);
                b.online_logits[c] = orig - eps;
                let down = loss(&b);
                b.online_logits[c] = orig;
                assert!(((up - down) / (2.0 * eps) - out.online_grad[[0, c]]).abs() < 1e-7);
            }
            assert!(out.past_grad.row(0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn softmax_background_target() {
        let mut labels = Array2::zeros((3, 2));
        labels[[1, 0]] = 1;
        labels[[1, 1]] = 1;
        let tl = EventTimeline::new(labels).unwrap();
        assert_eq!(
            frame_target(&tl, 0, HeadMode::Softmax).to_vec(),
            vec![0.0, 0.0, 1.0]
        );
        assert_eq!(
            frame_target(&tl, 1, HeadMode::Softmax).to_vec(),
            vec![0.5, 0.5, 0.0]
        );
        assert_eq!(
            frame_target(&tl, 1, HeadMode::Sigmoid).to_vec(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tl = timeline(&mut rng, 10, 3);
        let b = PredictionBundle {
            past_logits: Array2::zeros((2, 4)),
            anticipation_logits: Array2::zeros((2, 3)),
            online_logits: Array1::zeros(3),
        };
        assert!(compute_loss(&b, &tl, 4, &[true, true], HeadMode::Sigmoid, [1.0; 3]).is_err());
        let b = PredictionBundle {
            past_logits: Array2::zeros((2, 3)),
            ..b
        };
        assert!(compute_loss(&b, &tl, 4, &[true], HeadMode::Sigmoid, [1.0; 3]).is_err());
        assert!(compute_loss(&b, &tl, 1, &[true, true], HeadMode::Sigmoid, [1.0; 3]).is_err());
        assert!(compute_loss(&b, &tl, 4, &[true, true], HeadMode::Sigmoid, [1.0; 3]).is_ok());
    }
}

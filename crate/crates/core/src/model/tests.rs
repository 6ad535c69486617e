use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::{MemoryConfig, MemoryMode};

fn tiny() -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 10,
        num_encoder_layers: 1,
        num_decoder_layers: 2,
        num_head_encoder_layers: 1,
        anticipation_horizon: 2,
        num_classes: 3,
        dropout: 0.0,
        lstm_layers: 2,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn window(rng: &mut ChaCha8Rng, len: usize, pad: usize, dim: usize) -> FeatureWindow {
    let mut f = random(rng, len, dim);
    f.slice_mut(s![..pad, ..]).fill(0.0);
    let valid = (0..len).map(|i| i >= pad).collect();
    FeatureWindow::from_parts(f, valid, MemoryMode::LongShort).unwrap()
}

fn current(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn shape_contract_with_default_memory() {
    let cfg = ModelConfig {
        anticipation_horizon: 6,
        ..tiny()
    };
    let mem = MemoryConfig::default();
    let t = mem.window_len(MemoryMode::LongShort);
    assert_eq!(t, 544);
    let model = Joadaa::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = window(&mut rng, t, 500, cfg.feature_dim);
    let cur = current(&mut rng, cfg.feature_dim);

    let mut tape = Tape::new(model.params());
    let mut drop = Dropout::disabled();
    let (fp, past) = model.past_encode(&mut tape, &w, &mut drop).unwrap();
    assert_eq!(tape.shape(fp), (544, 8));
    assert_eq!(tape.shape(past), (544, 3));
    let (emb, ant) = model
        .anticipate(&mut tape, fp, w.valid(), &mut drop)
        .unwrap();
    assert_eq!(tape.shape(emb), (7, 8));
    assert_eq!(tape.shape(ant), (7, 3));
    let on = model
        .online_predict(&mut tape, fp, w.valid(), emb, &cur, &mut drop)
        .unwrap();
    assert_eq!(tape.shape(on.pseudo_full_memory), (551, 8));
    assert_eq!(tape.shape(on.past_and_present), (545, 8));
    assert_eq!(tape.shape(on.updated_current), (1, 8));
    assert_eq!(tape.shape(on.online_logits), (1, 3));

    let softmax = Joadaa::new(
        ModelConfig {
            head_mode: HeadMode::Softmax,
            ..cfg
        },
        1,
    )
    .unwrap();
    let b = softmax.predict(&w, &cur).unwrap();
    assert_eq!(b.past_logits.dim(), (544, 4));
    assert_eq!(b.anticipation_logits.dim(), (7, 4));
    assert_eq!(b.online_logits.len(), 4);
}

#[test]
fn wrong_dimensions_are_rejected() {
    let model = Joadaa::new(tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = window(&mut rng, 6, 0, 4);
    assert!(matches!(
        model.predict(&w, &[0.0; 5]),
        Err(Error::Shape { .. })
    ));
    let w = window(&mut rng, 6, 0, 5);
    assert!(matches!(
        model.predict(&w, &[0.0; 4]),
        Err(Error::Shape { .. })
    ));
    let empty = window(&mut rng, 4, 4, 5);
    assert!(model.predict(&empty, &[0.0; 5]).is_err());
}

#[test]
fn parameter_count_matches_store() {
    let base = tiny();
    let variants = [
        base.clone(),
        ModelConfig {
            online_head: OnlineHead::Fc,
            ..base.clone()
        },
        ModelConfig {
            past_block: PastBlock::Lstm,
            ..base.clone()
        },
        ModelConfig {
            head_mode: HeadMode::Softmax,
            tcn_kernel_size: 5,
            ..base.clone()
        },
        ModelConfig {
            anticipation_horizon: 0,
            num_head_encoder_layers: 2,
            ..base
        },
    ];
    for cfg in variants {
        let model = Joadaa::new(cfg.clone(), 0).unwrap();
        assert_eq!(
            model.params().num_scalars(),
            cfg.parameter_count(),
            "{cfg:?}"
        );
    }
}

#[test]
fn initialisation_is_seeded() {
    let a = Joadaa::new(tiny(), 9).unwrap();
    let b = Joadaa::new(tiny(), 9).unwrap();
    let c = Joadaa::new(tiny(), 10).unwrap();
    let same = |x: &Joadaa, y: &Joadaa| {
        x.params()
            .ids()
            .all(|id| x.params().get(id) == y.params().get(id))
    };
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
    for id in a.params().ids() {
        assert!(a.params().get(id).iter().all(|v| (*v as f32) as f64 == *v));
    }
}

#[test]
fn padded_rows_have_no_influence() {
    for past_block in [PastBlock::Transformer, PastBlock::Lstm] {
        let cfg = ModelConfig {
            past_block,
            ..tiny()
        };
        let model = Joadaa::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = window(&mut rng, 12, 5, 5);
        let cur = current(&mut rng, 5);
        let a = model.predict(&w, &cur).unwrap();

        let mut garbage = w.features().clone();
        garbage
            .slice_mut(s![..5, ..])
            .assign(&random(&mut rng, 5, 5).mapv(|v| 50.0 * v));
        let w2 = FeatureWindow::from_parts(garbage, w.valid().to_vec(), w.mode()).unwrap();
        let b = model.predict(&w2, &cur).unwrap();
        assert_eq!(a, b);

        let bias = model.params().get(model.layout.past_cls.bias);
        for row in 0..5 {
            assert_eq!(a.past_logits.row(row), bias.row(0));
        }
        assert_ne!(a.past_logits.row(5), bias.row(0));
    }
}

#[test]
fn anticipation_and_online_share_one_decoder() {
    let model = Joadaa::new(tiny(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = window(&mut rng, 9, 2, 5);
    let cur = current(&mut rng, 5);
    let decoder = model.decoder_param_ids();
    assert!(!decoder.is_empty());

    let mut tape = Tape::new(model.params());
    let vars = model
        .forward(&mut tape, &w, &cur, &mut Dropout::disabled())
        .unwrap();
    let ant = tape
        .backward(&[(
            vars.anticipation_logits,
            Array2::ones(tape.shape(vars.anticipation_logits)),
        )])
        .unwrap();
    let on = tape
        .backward(&[(
            vars.updated_current,
            Array2::ones(tape.shape(vars.updated_current)),
        )])
        .unwrap();
    for id in &decoder {
        let ga = ant.param(*id).expect("anticipation reaches decoder");
        let go = on.param(*id).expect("online reaches decoder");
        assert!(ga.iter().any(|v| *v != 0.0), "{}", model.params().name(*id));
        assert!(go.iter().any(|v| *v != 0.0), "{}", model.params().name(*id));
    }
    let names: Vec<&str> = decoder.iter().map(|id| model.params().name(*id)).collect();
    assert!(names.iter().all(|n| n.starts_with("decoder.")));
    assert_eq!(
        model
            .params()
            .ids()
            .filter(|id| model.params().name(*id).starts_with("decoder."))
            .count(),
        decoder.len()
    );
}

#[test]
fn online_prediction_depends_on_future_order() {
    let model = Joadaa::new(tiny(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = window(&mut rng, 8, 1, 5);
    let cur = current(&mut rng, 5);
    let mut tape = Tape::new(model.params());
    let mut drop = Dropout::disabled();
    let (fp, _) = model.past_encode(&mut tape, &w, &mut drop).unwrap();
    let (emb, _) = model
        .anticipate(&mut tape, fp, w.valid(), &mut drop)
        .unwrap();
    let base = model
        .online_predict(&mut tape, fp, w.valid(), emb, &cur, &mut drop)
        .unwrap();

    let rows: Vec<Var> = (0..3)
        .map(|i| tape.slice_rows(emb, i, i + 1).unwrap())
        .collect();
    let swapped = tape.concat_rows(&[rows[2], rows[1], rows[0]]).unwrap();
    let perm = model
        .online_predict(&mut tape, fp, w.valid(), swapped, &cur, &mut drop)
        .unwrap();

    let zero = tape.input(Array2::zeros((3, 8)));
    let blank = model
        .online_predict(&mut tape, fp, w.valid(), zero, &cur, &mut drop)
        .unwrap();

    let a = tape.value(base.online_logits).clone();
    assert!(max_abs_diff(&a, tape.value(perm.online_logits)) > 1e-9);
    assert!(max_abs_diff(&a, tape.value(blank.online_logits)) > 1e-9);
}

#[test]
fn last_row_head_matches_full_head() {
    for kernel in [1, 3, 5] {
        for head_layers in [0, 1, 2] {
            let cfg = ModelConfig {
                tcn_kernel_size: kernel,
                num_head_encoder_layers: head_layers,
                ..tiny()
            };
            let model = Joadaa::new(cfg, 13).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            for (len, pad) in [(10, 3), (2, 1), (6, 0)] {
                let w = window(&mut rng, len, pad, 5);
                let cur = current(&mut rng, 5);
                let mut tape = Tape::new(model.params());
                let mut drop = Dropout::disabled();
                let (fp, _) = model.past_encode(&mut tape, &w, &mut drop).unwrap();
                let (emb, _) = model
                    .anticipate(&mut tape, fp, w.valid(), &mut drop)
                    .unwrap();
                let on = model
                    .online_predict(&mut tape, fp, w.valid(), emb, &cur, &mut drop)
                    .unwrap();
                let mut valid = w.valid().to_vec();
                valid.push(true);
                let full = model
                    .local_global_head(&mut tape, on.past_and_present, &valid, &mut drop)
                    .unwrap();
                let last = tape.value(full).slice(s![len..len + 1, ..]).to_owned();
                let d = max_abs_diff(&last, tape.value(on.online_logits));
                assert!(d < 1e-12, "k={kernel} layers={head_layers} len={len}: {d}");
            }
        }
    }
}

#[test]
fn local_branch_is_causal() {
    let model = Joadaa::new(
        ModelConfig {
            tcn_kernel_size: 3,
            ..tiny()
        },
        15,
    )
    .unwrap();
    let (tcn, _, _) = model.fused_parts().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, 9, 8);
    let run = |x: Array2<f64>| {
        let mut tape = Tape::new(model.params());
        let v = tape.input(x);
        let out = model.local_branch(&mut tape, tcn, v).unwrap();
        tape.value(out).clone()
    };
    let base = run(x.clone());
    let mut y = x;
    y.row_mut(4).mapv_inplace(|v| v + 1.0);
    let moved = run(y);
    for t in 0..9 {
        let changed = base.row(t) != moved.row(t);
        assert_eq!(changed, (4..=6).contains(&t), "row {t}");
    }
}

#[test]
fn fc_head_reads_updated_embedding() {
    let model = Joadaa::new(
        ModelConfig {
            online_head: OnlineHead::Fc,
            ..tiny()
        },
        17,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w = window(&mut rng, 7, 2, 5);
    let cur = current(&mut rng, 5);
    let mut tape = Tape::new(model.params());
    let vars = model
        .forward(&mut tape, &w, &cur, &mut Dropout::disabled())
        .unwrap();
    let HeadLayers::Fc(fc) = &model.layout.head else {
        unreachable!()
    };
    let u = tape.value(vars.updated_current).clone();
    let expected = u.dot(model.params().get(fc.weight)) + model.params().get(fc.bias);
    assert!(max_abs_diff(&expected, tape.value(vars.online_logits)) < 1e-12);
    assert!(model
        .local_global_head(&mut tape, vars.f_prime, w.valid(), &mut Dropout::disabled())
        .is_err());
}

#[test]
fn classify_produces_distributions() {
    let logits =
        Array2::from_shape_vec((2, 3), vec![0.0, 1.0, -1.0, 1000.0, 0.0, -1000.0]).unwrap();
    let p = classify(&logits, HeadMode::Softmax);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let q = classify(&logits, HeadMode::Sigmoid);
    assert_eq!(q[[0, 0]], 0.5);
    assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn dropout_is_identity_when_disabled_and_seeded_when_enabled() {
    let model = Joadaa::new(
        ModelConfig {
            dropout: 0.3,
            ..tiny()
        },
        19,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let w = window(&mut rng, 6, 1, 5);
    let cur = current(&mut rng, 5);
    let run = |drop: &mut Dropout| {
        let mut tape = Tape::new(model.params());
        let v = model.forward(&mut tape, &w, &cur, drop).unwrap();
        tape.value(v.online_logits).clone()
    };
    let a = run(&mut Dropout::train(0.3, 1));
    let b = run(&mut Dropout::train(0.3, 1));
    let c = run(&mut Dropout::train(0.3, 2));
    let d = run(&mut Dropout::disabled());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(d.row(0), model.predict(&w, &cur).unwrap().online_logits);
}

/// Sum of all three heads weighted by fixed random matrices.
fn weighted_loss(model: &Joadaa, w: &FeatureWindow, cur: &[f64], r: &[Array2<f64>; 3]) -> f64 {
    let b = model.predict(w, cur).unwrap();
    (&b.past_logits * &r[0]).sum()
        + (&b.anticipation_logits * &r[1]).sum()
        + (b.online_logits * r[2].row(0)).sum()
}

fn gradient_check(cfg: ModelConfig, seed: u64) {
    let model = Joadaa::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let w = window(&mut rng, 7, 2, cfg.feature_dim);
    let cur = current(&mut rng, cfg.feature_dim);
    let k = cfg.output_dim();
    let r = [
        random(&mut rng, 7, k),
        random(&mut rng, cfg.num_queries(), k),
        random(&mut rng, 1, k),
    ];

    let mut tape = Tape::new(model.params());
    let vars = model
        .forward(&mut tape, &w, &cur, &mut Dropout::disabled())
        .unwrap();
    let grads = tape
        .backward(&[
            (vars.past_logits, r[0].clone()),
            (vars.anticipation_logits, r[1].clone()),
            (vars.online_logits, r[2].clone()),
        ])
        .unwrap()
        .param_grads(model.params());

    let eps = 1e-5;
    let floor = 1e-7;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    let per_tensor = (220 / ids.len()).max(3);
    for (pi, id) in ids.iter().enumerate() {
        let n = model.params().get(*id).len();
        for _ in 0..per_tensor.min(n) {
            let flat = rng.random_range(0..n);
            let orig = model.params().get(*id).as_slice().unwrap()[flat];
            probe.params_mut().get_mut(*id).as_slice_mut().unwrap()[flat] = orig + eps;
            let up = weighted_loss(&probe, &w, &cur, &r);
            probe.params_mut().get_mut(*id).as_slice_mut().unwrap()[flat] = orig - eps;
            let down = weighted_loss(&probe, &w, &cur, &r);
            probe.params_mut().get_mut(*id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[pi].as_slice().unwrap()[flat];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4 || (analytic - numeric).abs() < 1e-8,
                "{}[{flat}]: analytic {analytic} numeric {numeric}",
                model.params().name(*id)
            );
            checked += 1;
        }
    }
    assert!(checked >= 200, "only {checked} samples");
}

#[test]
fn gradients_match_finite_differences() {
    gradient_check(tiny(), 21);
}

#[test]
fn gradients_match_finite_differences_softmax_lstm_fc() {
    gradient_check(
        ModelConfig {
            head_mode: HeadMode::Softmax,
            past_block: PastBlock::Lstm,
            online_head: OnlineHead::Fc,
            ..tiny()
        },
        22,
    );
}

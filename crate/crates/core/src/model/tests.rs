use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Fwd, Grn, VariableSelection};
use crate::autograd::Var;
use super::*;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

fn toy_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        dropout: 0.0,
        seq_len: 6,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn rand_batch(cfg: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        static_x: rand_mat(&mut rng, b, cfg.n_static),
        weather: rand_mat(&mut rng, b * cfg.seq_len, cfg.n_temporal),
    }
}

fn objective(out: &ModelOutput, gp: &Mat, gq: &Mat) -> f64 {
    let dot = |a: &Mat, b: &Mat| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.trigger_probs, gp) + dot(&out.quantile_proj, gq)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig { n_heads: 3, ..ModelConfig::default() },
        ModelConfig { quantiles: vec![0.1, 0.9], ..ModelConfig::default() },
        ModelConfig { quantiles: vec![0.5, 0.1], ..ModelConfig::default() },
        ModelConfig { dropout: 1.0, ..ModelConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert_eq!("Transformer".parse::<ModelKind>().unwrap(), ModelKind::Transformer);
    assert!("lstm".parse::<ModelKind>().is_err());
}

#[test]
fn init_is_deterministic_and_bounded() {
    for kind in ModelKind::ALL {
        let a = Model::new(kind, toy_cfg()).unwrap();
        let b = Model::new(kind, toy_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.all_finite());
        for (name, t) in a.params.names.iter().zip(&a.params.tensors) {
            let bound = 1.0 / (t.rows as f64).sqrt();
            if !name.ends_with(".gain") {
                assert!(t.data.iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
        let wide = Model::new(kind, ModelConfig { d_model: 16, ..toy_cfg() }).unwrap();
        assert!(wide.param_count() > a.param_count(), "{kind}");
    }
}

#[test]
fn default_output_shapes() {
    let cfg = ModelConfig { d_model: 16, ..ModelConfig::default() };
    for kind in ModelKind::ALL {
        let m = Model::new(kind, cfg.clone()).unwrap();
        let out = m.predict(&rand_batch(&cfg, 2, 1)).unwrap();
        assert_eq!(out.trigger_probs.shape(), (48, 2));
        assert_eq!(out.quantile_proj.shape(), (48, 6));
        assert!(out.trigger_probs.data.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = toy_cfg();
    let m = Model::new(ModelKind::Tft, cfg.clone()).unwrap();
    let mut b = rand_batch(&cfg, 2, 1);
    b.weather.data[3] = f64::NAN;
    assert!(matches!(m.predict(&b), Err(Error::NonFinite(_))));
    let b = Batch {
        static_x: Mat::zeros(1, 12),
        weather: Mat::zeros(6, 13),
    };
    assert!(matches!(m.predict(&b), Err(Error::Shape(_))));
}

#[test]
fn eval_is_deterministic_and_train_mode_uses_dropout() {
    let cfg = ModelConfig { dropout: 0.3, ..toy_cfg() };
    let batch = rand_batch(&cfg, 3, 2);
    for kind in ModelKind::ALL {
        let m = Model::new(kind, cfg.clone()).unwrap();
        assert_eq!(m.predict(&batch).unwrap(), m.predict(&batch).unwrap());
        let (_, t1) = m.record(&batch, Mode::Train, 1).unwrap();
        let (_, t1b) = m.record(&batch, Mode::Train, 1).unwrap();
        let (_, t2) = m.record(&batch, Mode::Train, 2).unwrap();
        assert_eq!(t1, t1b);
        assert_ne!(t1.quantile_proj, t2.quantile_proj, "{kind}");
    }
}

#[test]
fn causality_holds_for_every_model() {
    let cfg = ModelConfig { d_model: 16, seq_len: 24, ..toy_cfg() };
    let batch = rand_batch(&cfg, 2, 3);
    let mut perturbed = batch.clone();
    for b in 0..2 {
        for t in 20..24 {
            for c in 0..cfg.n_temporal {
                let i = (b * 24 + t) * cfg.n_temporal + c;
                perturbed.weather.data[i] += 3.0 + c as f64;
            }
        }
    }
    for kind in ModelKind::ALL {
        let m = Model::new(kind, cfg.clone()).unwrap();
        let a = m.predict(&batch).unwrap();
        let p = m.predict(&perturbed).unwrap();
        for b in 0..2 {
            for t in 0..24 {
                let r = b * 24 + t;
                let same = a.trigger_probs.row(r) == p.trigger_probs.row(r)
                    && a.quantile_proj.row(r) == p.quantile_proj.row(r);
                assert_eq!(same, t < 20, "{kind} row {r}");
            }
        }
    }
}

#[test]
fn attention_rows_are_causal_simplices() {
    let cfg = toy_cfg();
    let m = Model::new(ModelKind::Tft, cfg.clone()).unwrap();
    let out = m.predict(&rand_batch(&cfg, 2, 4)).unwrap();
    let att = out.attention.unwrap();
    assert_eq!(att.shape(), (12, 6));
    for r in 0..12 {
        let t = r % 6;
        let row = att.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row[t + 1..].iter().all(|v| *v == 0.0));
        if t == 0 {
            assert_eq!(row[0], 1.0);
        }
    }
    for w in [out.static_weights.unwrap(), out.temporal_weights.unwrap()] {
        for r in 0..w.rows {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.row(r).iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn static_contexts_distinguish_buildings() {
    let cfg = toy_cfg();
    let m = Model::new(ModelKind::Tft, cfg.clone()).unwrap();
    let Network::Tft(net) = &m.net else { unreachable!() };
    let mut x = Mat::zeros(2, cfg.n_static);
    x.row_mut(1).copy_from_slice(&[0.5; 13]);
    let mut f = Fwd::new(&m.params, None);
    let xv = f.g.constant(x);
    let (c_sel, c_enr, _) = net.static_encoder(&mut f, xv).unwrap();
    for c in [c_sel, c_enr] {
        let v = f.g.value(c);
        assert_eq!(v.shape(), (2, cfg.d_model));
        assert!(v.is_finite());
        assert_ne!(v.row(0), v.row(1));
    }
}

#[test]
fn grn_preserves_shape_and_closed_gate_is_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    let grn = Grn::new(&mut store, &mut rng, "g", 5, 5, 5, Some(3));
    let a = rand_mat(&mut rng, 7, 5);
    let c = rand_mat(&mut rng, 7, 3);
    let mut f = Fwd::new(&store, None);
    let av = f.g.constant(a.clone());
    let cv = f.g.constant(c);
    let y = grn.apply(&mut f, av, Some(layers::Context::Rows(cv)));
    assert_eq!(f.g.value(y).shape(), (7, 5));

    store.tensors[grn.glu.w].fill(0.0);
    let gb = grn.glu.b.unwrap();
    for j in 5..10 {
        store.tensors[gb].data[j] = -1e4;
    }
    let mut f = Fwd::new(&store, None);
    let av = f.g.constant(a.clone());
    let y = grn.apply(&mut f, av, None);
    let y = f.g.value(y);
    for r in 0..7 {
        let row = a.row(r);
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            let expect = (row[j] - mean) / (var + 1e-5).sqrt();
            assert!((y.get(r, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn grn_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParameterStore::new();
    let grn = Grn::new(&mut store, &mut rng, "g", 3, 3, 3, Some(3));
    let a = rand_mat(&mut rng, 4, 3);
    let c = rand_mat(&mut rng, 4, 3);
    let probe = rand_mat(&mut rng, 4, 3);
    let eval = |s: &ParameterStore| -> (f64, crate::autograd::ParamGrads) {
        let mut f = Fwd::new(s, None);
        let av = f.g.constant(a.clone());
        let cv = f.g.constant(c.clone());
        let y = grn.apply(&mut f, av, Some(layers::Context::Rows(cv)));
        let v: f64 = f.g.value(y).data.iter().zip(&probe.data).map(|(x, p)| x * p).sum();
        (v, f.g.backward(&[(y, &probe)]))
    };
    let (_, grads) = eval(&store);
    let mut checked = 0;
    for (i, g) in &grads.grads {
        for j in 0..g.len() {
            let mut s = store.clone();
            s.tensors[*i].data[j] += 1e-5;
            let up = eval(&s).0;
            s.tensors[*i].data[j] -= 2e-5;
            let down = eval(&s).0;
            let num = (up - down) / 2e-5;
            let an = g.data[j];
            assert!((num - an).abs() <= 1e-4 * num.abs().max(an.abs()) + 1e-9, "{} {j}: {an} vs {num}", store.names[*i]);
            checked += 1;
        }
    }
    assert_eq!(checked, store.count());
}

#[test]
fn variable_selection_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParameterStore::new();
    let vsn = VariableSelection::new(&mut store, &mut rng, "v", 4, 3, None);
    let single = VariableSelection::new(&mut store, &mut rng, "s", 1, 3, None);
    let embs: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, 5, 3)).collect();

    let mut f = Fwd::new(&store, None);
    let vars: Vec<Var> = embs.iter().map(|e| f.g.constant(e.clone())).collect();
    let (_, w) = vsn.apply(&mut f, &vars, None);
    for r in 0..5 {
        assert!((f.g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let (_, w1) = single.apply(&mut f, &vars[..1], None);
    assert!(f.g.value(w1).data.iter().all(|v| *v == 1.0));

    // Force the selection logits: zero layer-norm gain, large bias on variable 2.
    let j = 2;
    store.tensors[vsn.flat.ln.gain].fill(0.0);
    store.tensors[vsn.flat.ln.bias].data[j] = 60.0;
    let mut f = Fwd::new(&store, None);
    let vars: Vec<Var> = embs.iter().map(|e| f.g.constant(e.clone())).collect();
    let (combined, _) = vsn.apply(&mut f, &vars, None);
    let only = vsn.per_var[j].apply(&mut f, vars[j], None);
    assert!(f.g.value(combined).max_abs_diff(f.g.value(only)) < 1e-12);
}

#[test]
fn backward_requires_forward_and_is_repeatable() {
    let cfg = toy_cfg();
    let batch = rand_batch(&cfg, 2, 6);
    let mut m = Model::new(ModelKind::Tft, cfg.clone()).unwrap();
    let dp = Mat::filled(12, 2, 0.1);
    let dq = Mat::zeros(12, 6);
    assert!(matches!(m.backward(&dp, &dq), Err(Error::State(_))));
    m.forward(&batch, Mode::Train, 0).unwrap();
    m.backward(&dp, &dq).unwrap();
    let first = m.params.grads.clone();
    m.backward(&dp, &dq).unwrap();
    assert_eq!(first, m.params.grads);
    // With no quantile gradient the quantile head receives none.
    let qw = m.params.index_of("head.quantile.w").unwrap();
    assert!(m.params.grads[qw].data.iter().all(|g| *g == 0.0));
    assert!(m.params.grads.iter().all(Mat::is_finite));
    assert!(matches!(m.backward(&Mat::zeros(3, 2), &dq), Err(Error::Shape(_))));
}

#[test]
fn full_model_finite_difference() {
    let cfg = toy_cfg();
    let batch = rand_batch(&cfg, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gp = rand_mat(&mut rng, 12, 2);
    let gq = rand_mat(&mut rng, 12, 6);
    for kind in ModelKind::ALL {
        let mut m = Model::new(kind, cfg.clone()).unwrap();
        m.forward(&batch, Mode::Eval, 0).unwrap();
        m.backward(&gp, &gq).unwrap();
        let analytic = m.params.grads.clone();
        // Sample coordinates spread over every parameter tensor.
        let mut coords = Vec::new();
        for (i, t) in m.params.tensors.iter().enumerate() {
            coords.push((i, rng.gen_range(0..t.len())));
        }
        let total = m.param_count();
        while coords.len() < 240.min(total) {
            let i = rng.gen_range(0..m.params.len());
            coords.push((i, rng.gen_range(0..m.params.tensors[i].len())));
        }
        let mut worst: f64 = 0.0;
        for (i, j) in coords {
            let mut probe = m.clone();
            probe.params.tensors[i].data[j] += 1e-5;
            let up = objective(&probe.predict(&batch).unwrap(), &gp, &gq);
            probe.params.tensors[i].data[j] -= 2e-5;
            let down = objective(&probe.predict(&batch).unwrap(), &gp, &gq);
            let num = (up - down) / 2e-5;
            let an = analytic[i].data[j];
            let err = (num - an).abs() / (num.abs().max(an.abs()) + 1e-7);
            worst = worst.max(err);
            assert!(err < 1e-4, "{kind} {}[{j}]: analytic {an}, numeric {num}", m.params.names[i]);
        }
        assert!(worst < 1e-4);
    }
}

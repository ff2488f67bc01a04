//! Gradient checks shared by the gradient and acceptance suites.

use msr_core::dnc::{ControllerKind, Encoder, EncoderConfig, EncoderMode};
use msr_core::features::{Batch, Standardizer};
use msr_core::gradcheck::{finite_diff_check, numeric_gradient, relative_error};
use msr_core::kd::{CityMemoryBank, KdModel};
use msr_core::model::{bce_loss, Ablation, MvModel};
use msr_core::params::{uniform, ParamStore};
use msr_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_samples, tiny_config};

/// Loss = Σ c ⊙ op(inputs) with fixed random coefficients `c`.
pub fn op_check(
    seed: u64,
    shapes: &[(usize, usize)],
    range: (f64, f64),
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|&(r, c)| Tensor::from_fn(r, c, |_, _| rng.random_range(range.0..range.1)))
        .collect();
    let eval = |inputs: &[Tensor], coeffs: Option<&Tensor>| -> (f64, Vec<f64>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let (r, c) = g.shape(out);
        let coeffs = coeffs
            .cloned()
            .unwrap_or_else(|| Tensor::from_fn(r, c, |i, j| 0.3 + ((i * 7 + j * 3) % 5) as f64 * 0.4));
        let cv = g.constant(coeffs.clone());
        let weighted = g.mul(out, cv).unwrap();
        let loss = g.sum(weighted);
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let mut flat = Vec::new();
        for v in &vars {
            match grads.get(*v) {
                Ok(t) => flat.extend_from_slice(t.data()),
                Err(_) => flat.extend(std::iter::repeat_n(0.0, g.value(*v).len())),
            }
        }
        (value, flat, coeffs)
    };
    let (_, analytic, coeffs) = eval(&inputs, None);
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |flat: &[f64]| {
        let mut offset = 0;
        let ts: Vec<Tensor> = inputs
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::new(t.rows(), t.cols(), flat[offset..offset + n].to_vec()).unwrap();
                offset += n;
                out
            })
            .collect();
        eval(&ts, Some(&coeffs)).0
    };
    finite_diff_check(f, &theta, &analytic, 1e-6).unwrap()
}

/// Coordinates whose gradient magnitude sits at the central-difference
/// roundoff floor (about 1e-11 for O(1) losses at eps 1e-5) are held to an
/// absolute bound instead of the relative one.
pub const FLOOR: f64 = 1e-6;

pub fn floored_check(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let n = numeric_gradient(&mut f, theta, i, 1e-5);
        if a.abs() + n.abs() < FLOOR {
            assert!((a - n).abs() < 1e-9, "coordinate {i}: analytic {a} numeric {n}");
        } else {
            worst = worst.max(relative_error(a, n));
        }
    }
    worst
}

pub fn encoder_check(controller: ControllerKind, mode: EncoderMode, seed: u64, steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        ctx_width: 3,
        hidden: 4,
        layers: 2,
        mem_rows: 4,
        mem_cols: 3,
        read_heads: 2,
        embed_dim: 3,
        controller,
        mode,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, "enc", &mut store, &mut rng);
    let mem_id = store.add("memory", uniform(4, 3, 0.8, &mut rng));
    let xs: Vec<Tensor> = (0..steps)
        .map(|_| Tensor::from_fn(2, 3, |_, _| rng.random_range(-1.5..1.5)))
        .collect();
    let coeffs = Tensor::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
    let run = |store: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let steps: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let mem = g.param(mem_id, store.get(mem_id));
        let (e, _) = enc.encode(&mut g, store, &steps, Some(mem)).unwrap();
        let c = g.constant(coeffs.clone());
        let w = g.mul(e, c).unwrap();
        let loss = g.sum(w);
        let value = g.value(loss).item();
        let flat = grad.then(|| {
            let grads = g.backward(loss).unwrap();
            let mut flat = vec![0.0; store.scalar_count()];
            for (id, t) in grads.params() {
                flat[store.flat_range(id)].copy_from_slice(t.data());
            }
            flat
        });
        (value, flat)
    };
    let analytic = run(&store, true).1.unwrap();
    let theta = store.flatten();
    let mut probe = store.clone();
    floored_check(
        |flat| {
            probe.set_flat(flat);
            run(&probe, false).0
        },
        &theta,
        &analytic,
    )
}

pub fn mv_check(ablation: Ablation, seed: u64) -> f64 {
    let cfg = tiny_config(ablation);
    let samples = random_samples(2, cfg.ctx_len, seed);
    let stats = Standardizer::fit(&samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let model = MvModel::new(cfg, stats.clone(), &mut rng).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::build(&refs, &stats, cfg.vocab).unwrap();
    let run = |store: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let out = model.net.forward(&mut g, store, &batch, None).unwrap();
        let loss = bce_loss(&mut g, out.logits, &batch.labels).unwrap();
        let value = g.value(loss).item();
        let flat = grad.then(|| {
            let grads = g.backward(loss).unwrap();
            let mut flat = vec![0.0; store.scalar_count()];
            for (id, t) in grads.params() {
                flat[store.flat_range(id)].copy_from_slice(t.data());
            }
            flat
        });
        (value, flat)
    };
    let analytic = run(&model.store, true).1.unwrap();
    let theta = model.store.flatten();
    let mut probe = model.store.clone();
    floored_check(
        |flat| {
            probe.set_flat(flat);
            run(&probe, false).0
        },
        &theta,
        &analytic,
    )
}

pub fn kd_check(seed: u64) -> f64 {
    let cfg = tiny_config(Ablation::default());
    let samples = random_samples(2, cfg.ctx_len, seed);
    let stats = Standardizer::fit(&samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let bank = CityMemoryBank::new(
        ["A", "B"]
            .iter()
            .map(|c| (c.to_string(), uniform(cfg.mem_rows, cfg.mem_cols, 0.5, &mut rng)))
            .collect(),
    )
    .unwrap();
    let model = KdModel::new(cfg, &bank, None, stats.clone(), &mut rng).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::build(&refs, &stats, cfg.vocab).unwrap();
    let run = |store: &ParamStore, grad: bool| {
        let mut g = Graph::new();
        let t = model.net.teacher_forward(&mut g, store, &batch).unwrap();
        let s = model.net.student_forward(&mut g, store, &batch).unwrap();
        let terms = model.net.loss(&mut g, store, &t, &s, &batch.labels).unwrap();
        let value = g.value(terms.total).item();
        let flat = grad.then(|| {
            let grads = g.backward(terms.total).unwrap();
            let mut flat = vec![0.0; store.scalar_count()];
            for (id, t) in grads.params() {
                flat[store.flat_range(id)].copy_from_slice(t.data());
            }
            flat
        });
        (value, flat)
    };
    let analytic = run(&model.store, true).1.unwrap();
    let full = model.store.flatten();
    let trainable: Vec<usize> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, _)| model.store.flat_range(id))
        .collect();
    for (id, p) in model.store.iter() {
        if !p.trainable {
            assert!(analytic[model.store.flat_range(id)].iter().all(|&x| x == 0.0));
        }
    }
    let theta: Vec<f64> = trainable.iter().map(|&i| full[i]).collect();
    let reduced: Vec<f64> = trainable.iter().map(|&i| analytic[i]).collect();
    let mut probe = model.store.clone();
    let mut buf = full.clone();
    floored_check(
        |sub| {
            for (&i, &x) in trainable.iter().zip(sub) {
                buf[i] = x;
            }
            probe.set_flat(&buf);
            run(&probe, false).0
        },
        &theta,
        &reduced,
    )
}

mod common;

use msr_core::dnc::{
    allocation_weighting, content_weights, in_simplex, memory_read, memory_write, EncoderMode,
};
use msr_core::features::{
    extract_features, window_counts, Batch, Event, EventKind, HistoricalLogs, LatLon, OrderFeatures,
    PassengerDriverPair, Standardizer, ZoneGrid, ZoneSeries, DAY, WINDOWS,
};
use msr_core::graph::{activation, softmax_row};
use msr_core::metrics::{auc, rmse};
use msr_core::model::{attentive_combine, bce_loss, Ablation, AttentionParams, MvModel, MvNet};
use msr_core::optim::{AdamConfig, AdamState};
use msr_core::params::{uniform, ParamStore};
use msr_core::{Activation, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

/// A vector in the weight simplex: non-negative, summing to at most 1.
fn simplex(n: usize) -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(0.0..1.0f64, n), 0.0..=1.0f64).prop_map(move |(raw, mass)| {
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        Tensor::row(&raw.iter().map(|x| x / total * mass).collect::<Vec<_>>())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 7, -50.0, 50.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v);
        let out = g.value(s);
        for r in 0..4 {
            let row = out.row_slice(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_stay_finite(x in matrix(3, 5, -10.0, 10.0)) {
        for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Relu] {
            prop_assert!(activation(&x, kind).is_finite());
        }
        prop_assert!(softmax_row(&x.clone().reshape(1, 15).unwrap()).is_finite());
        let mut g = Graph::new();
        let v = g.leaf(x);
        let s = g.sigmoid(v);
        let t = g.tanh(s);
        let sp = g.softplus(t);
        let e = g.exp(sp);
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(v).unwrap().is_finite());
    }

    #[test]
    fn pure_add_is_an_outer_product(
        m in matrix(6, 4, -3.0, 3.0),
        w in simplex(6),
        a in matrix(1, 4, -3.0, 3.0),
    ) {
        let out = memory_write(&m, &w, &Tensor::zeros(1, 4), &a).unwrap();
        let outer = w.transpose().matmul(&a).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                prop_assert!((out.get(i, j) - m.get(i, j) - outer.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_write_read_round_trip(
        m in matrix(8, 5, -3.0, 3.0),
        a in matrix(1, 5, -3.0, 3.0),
        k in 0usize..8,
    ) {
        let mut w = Tensor::zeros(1, 8);
        w.set(0, k, 1.0);
        let out = memory_write(&m, &w, &Tensor::full(1, 5, 1.0), &a).unwrap();
        for i in 0..8 {
            let want = if i == k { a.data() } else { m.row_slice(i) };
            prop_assert_eq!(out.row_slice(i), want);
        }
        let read = memory_read(&out, &w).unwrap();
        prop_assert_eq!(read.data(), a.data());
    }

    #[test]
    fn addressing_weights_lie_in_simplex(
        usage in prop::collection::vec(0.0..=1.0f64, 1..12),
        m in matrix(6, 3, -2.0, 2.0),
        key in prop::collection::vec(-2.0..2.0f64, 3),
        beta in 1.0..30.0f64,
    ) {
        let alloc = allocation_weighting(&usage);
        prop_assert!(in_simplex(&alloc));
        let c = content_weights(&m, &key, beta).unwrap();
        prop_assert!(in_simplex(&c));
        prop_assert!((c.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_counts_match_brute_force(
        offsets in prop::collection::vec((0i64..40 * DAY, 0usize..3), 0..80),
        at in 30 * DAY..40 * DAY,
    ) {
        let base = 1_600_000_000;
        let mut events: Vec<Event> = offsets
            .iter()
            .map(|&(o, k)| Event { ts: base + o, kind: EventKind::ALL[k] })
            .collect();
        events.sort();
        let ts = base + at;
        let mut logs = logs();
        logs.passengers.insert(1, events.clone());
        let pair = PassengerDriverPair {
            pair_id: "p".into(),
            passenger_id: 1,
            driver_id: 9,
            loc_origin: LatLon { lat: 30.05, lon: 120.05 },
            loc_dest: LatLon { lat: 30.15, lon: 120.15 },
            ts,
            order: OrderFeatures::default(),
            label: 1,
            city: "X".into(),
        };
        let (p, d, _, _) = extract_features(&pair, &logs, 4).unwrap();
        prop_assert_eq!(p, window_counts(&events, ts));
        for (k, kind) in EventKind::ALL.iter().enumerate() {
            for (w, len) in WINDOWS.iter().enumerate() {
                let n = events.iter().filter(|e| e.kind == *kind && e.ts > ts - len && e.ts <= ts).count();
                prop_assert_eq!(p.counts[k][w] as usize, n);
                prop_assert_eq!(d.counts[k][w], 0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn erase_write_matches_elementwise_oracle(
        m in matrix(16, 16, -5.0, 5.0),
        w in simplex(16),
        e in matrix(1, 16, 0.0, 1.0),
        a in matrix(1, 16, -5.0, 5.0),
    ) {
        let out = memory_write(&m, &w, &e, &a).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let wi = w.data()[i];
                let want = m.get(i, j) * (1.0 - wi * e.data()[j]) + wi * a.data()[j];
                prop_assert!((out.get(i, j) - want).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn sort_auc_matches_pairwise(
        rows in prop::collection::vec((0u8..6, any::<bool>()), 2..60),
    ) {
        // coarse scores force ties
        let scores: Vec<f64> = rows.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<f64> = rows.iter().map(|(_, y)| *y as u8 as f64).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        core::cmp::Ordering::Greater => 1.0,
                        core::cmp::Ordering::Equal => 0.5,
                        core::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        match auc(&scores, &labels) {
            None => prop_assert_eq!(pairs, 0.0),
            Some(v) => prop_assert!((v - wins / pairs).abs() < 1e-12),
        }
        prop_assert_eq!(rmse(&labels, &labels), 0.0);
    }
}

fn logs() -> HistoricalLogs {
    let base = 1_600_000_000;
    let grid = ZoneGrid {
        south_west: LatLon { lat: 30.0, lon: 120.0 },
        north_east: LatLon { lat: 30.2, lon: 120.2 },
        cells: 1,
    };
    let mut logs = HistoricalLogs::new((base, base + 40 * DAY), grid, 3600);
    logs.zones.insert(
        0,
        ZoneSeries {
            start_ts: base,
            slots: vec![[1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.5]; 40 * 24],
        },
    );
    logs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_weights_stay_in_simplex(seed in any::<u64>(), scale in 0.1..5.0f64) {
        let cfg = common::tiny_config(Ablation::default());
        let samples = common::random_samples(3, cfg.ctx_len, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = MvNet::new(cfg, EncoderMode::Full, "p", None, &mut store, &mut rng).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = store.get_mut(id);
            *t = t.map(|x| x * scale);
        }
        let refs: Vec<_> = samples.iter().collect();
        let batch = Batch::build(&refs, &Standardizer::identity(), cfg.vocab).unwrap();
        let mut g = Graph::new();
        let mem = net.memory.map(|id| g.param(id, store.get(id)));
        let mut state = net.encoder.init_state(&mut g, 3, mem).unwrap();
        for x in &batch.context {
            let x = g.constant(x.clone());
            let (_, next) = net.encoder.step(&mut g, &store, x, &state).unwrap();
            let m = next.memory.as_ref().unwrap();
            prop_assert!(in_simplex(g.value(m.write_weight)));
            for &w in &m.read_weights {
                prop_assert!(in_simplex(g.value(w)));
            }
            prop_assert!(g.value(m.usage).data().iter().all(|&u| (-1e-12..=1.0 + 1e-12).contains(&u)));
            state = next;
        }
    }

    #[test]
    fn concatenation_ignores_query_and_key(seed in any::<u64>()) {
        let cfg = common::tiny_config(Ablation::parse("s2").unwrap());
        let samples = common::random_samples(4, cfg.ctx_len, seed);
        let stats = Standardizer::fit(&samples);
        let model = MvModel::new(cfg, stats, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let before = model.predict(&samples).unwrap();
        let mut perturbed = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for p in &model.net.attention {
            for id in [p.query, p.key] {
                let (r, c) = perturbed.store.get(id).shape();
                *perturbed.store.get_mut(id) = uniform(r, c, 3.0, &mut rng);
            }
        }
        prop_assert_eq!(before, perturbed.predict(&samples).unwrap());
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), perm in Just(()).prop_perturb(|_, mut r| {
        let mut p: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            p.swap(i, (r.next_u32() as usize) % (i + 1));
        }
        p
    })) {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params: Vec<AttentionParams> = (0..5)
            .map(|i| AttentionParams {
                query: store.add(format!("q{i}"), uniform(d, d, 1.0, &mut rng)),
                key: store.add(format!("k{i}"), uniform(d, d, 1.0, &mut rng)),
                value: store.add(format!("v{i}"), uniform(d, d, 1.0, &mut rng)),
            })
            .collect();
        let order = uniform(2, d, 1.0, &mut rng);
        let reps: Vec<Tensor> = (0..5).map(|_| uniform(2, d, 1.0, &mut rng)).collect();
        let run = |idx: &[usize]| {
            let mut g = Graph::new();
            let o = g.constant(order.clone());
            let r: Vec<_> = idx.iter().map(|&i| g.constant(reps[i].clone())).collect();
            let p: Vec<_> = idx.iter().map(|&i| params[i]).collect();
            let (v, w) = attentive_combine(&mut g, &store, o, &r, &p).unwrap();
            (g.value(v).clone(), g.value(w).clone())
        };
        let (v0, w0) = run(&[0, 1, 2, 3, 4]);
        let (v1, w1) = run(&perm);
        for row in 0..2 {
            for (slot, &src) in perm.iter().enumerate() {
                prop_assert!((w1.get(row, slot) - w0.get(row, src)).abs() < 1e-12);
                for c in 0..d {
                    prop_assert!((v1.get(row, slot * d + c) - v0.get(row, src * d + c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn standardizer_sees_only_training_rows(seed in any::<u64>(), n in 2usize..20) {
        let train = common::random_samples(n, 3, seed);
        let mut rest = common::random_samples(10, 3, seed ^ 7);
        let stats = Standardizer::fit(&train);
        let mut all = train.clone();
        all.append(&mut rest);
        prop_assert_eq!(&Standardizer::fit(&all[..n]), &stats);
        for (k, mean) in stats.passenger.mean.iter().enumerate() {
            let want = train.iter().map(|s| s.passenger.to_vec()[k]).sum::<f64>() / n as f64;
            prop_assert!((mean - want).abs() < 1e-9);
        }
        let ctx_mean = train.iter().flat_map(|s| s.context.iter().map(|c| c[6])).sum::<f64>()
            / (3 * n) as f64;
        prop_assert!((stats.context.mean[6] - ctx_mean).abs() < 1e-9);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = common::tiny_config(Ablation::default());
    let samples = common::random_samples(6, cfg.ctx_len, 3);
    let stats = Standardizer::fit(&samples);
    let a = MvModel::new(cfg, stats.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = MvModel::new(cfg, stats, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a.store.flatten(), b.store.flatten());
    let (pa, pb) = (a.predict(&samples).unwrap(), b.predict(&samples).unwrap());
    assert_eq!(pa, pb);
    assert!(pa.iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn adam_reduces_loss_on_a_small_batch() {
    let cfg = common::tiny_config(Ablation::default());
    let samples = common::random_samples(32, cfg.ctx_len, 11);
    let stats = Standardizer::fit(&samples);
    let mut model = MvModel::new(cfg, stats.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::build(&refs, &stats, cfg.vocab).unwrap();
    let mut adam = AdamState::new(&model.store, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let out = model.net.forward(&mut g, &model.store, &batch, None).unwrap();
        let loss = bce_loss(&mut g, out.logits, &batch.labels).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        adam.step(&mut model.store, &grads).unwrap();
    }
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

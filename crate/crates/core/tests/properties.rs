mod common;

use latent_rul::ingest::{
    fit_minmax, make_windows, parse_cmapss, EngineSeries, FeatureSpec, RawRecord,
};
use latent_rul::metrics::{phm_score, rmse, score_contribution};
use latent_rul::nn::{positional_encoding, scaled_dot_attention, Graph, ParamStore, PositionOrigin, Tensor};
use latent_rul::prior::{ema_update, estimate_transition, regularize, steady_state, SmoothedTransitionMatrix};
use latent_rul::similarity::{js, nearest, predict_rul, LibraryEntry, Neighbor, PriorLibrary};
use latent_rul::vq::{quantize, vq_loss};
use proptest::prelude::*;
use std::f64::consts::LN_2;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0..1.0f64], n).prop_filter_map(
        "all-zero mass",
        |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        },
    )
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn record_strategy() -> impl Strategy<Value = ([f64; 3], [f64; 21])> {
    let value = prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e4..1e4f64,
        (-100i32..10000).prop_map(|i| i as f64 / 100.0),
    ];
    (prop::array::uniform3(value.clone()), prop::array::uniform21(value))
}

fn series(unit_id: u32, rows: Vec<([f64; 3], [f64; 21])>) -> EngineSeries {
    let records: Vec<RawRecord> = rows
        .into_iter()
        .enumerate()
        .map(|(i, (settings, sensors))| RawRecord {
            unit_id,
            cycle: i as u32 + 1,
            settings,
            sensors,
        })
        .collect();
    EngineSeries {
        unit_id,
        total_life: Some(records.len() as u32),
        truth_rul: None,
        records,
    }
}

fn pair_count_oracle(states: &[usize], n: usize) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; n]; n];
    for (a, row) in p.iter_mut().enumerate() {
        let visits = (0..states.len() - 1).filter(|&i| states[i] == a).count();
        if visits == 0 {
            continue;
        }
        for (b, cell) in row.iter_mut().enumerate() {
            let pairs = (0..states.len() - 1)
                .filter(|&i| states[i] == a && states[i + 1] == b)
                .count();
            *cell = pairs as f64 / visits as f64;
        }
    }
    p
}

fn brute_force_nearest(query: &[f64], lib: &PriorLibrary, k: usize, exclude: Option<u32>) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = lib
        .entries
        .iter()
        .filter(|e| Some(e.system_id) != exclude)
        .map(|e| Neighbor {
            system_id: e.system_id,
            window_id: e.window_id,
            rul: e.rul,
            divergence: js(query, &e.pi).unwrap(),
        })
        .collect();
    all.sort_by(|a, b| {
        a.divergence
            .total_cmp(&b.divergence)
            .then(a.system_id.cmp(&b.system_id))
            .then(a.window_id.cmp(&b.window_id))
    });
    all.truncate(k);
    all
}

fn library_strategy(n: usize) -> impl Strategy<Value = PriorLibrary> {
    // Few distinct distributions shared by many entries, so ties are common.
    (prop::collection::vec(distribution(n), 1..6), prop::collection::vec((0usize..6, 0u32..5, 0.0..125.0f64), 1..60))
        .prop_map(move |(pis, picks)| {
            let mut lib = PriorLibrary::new(n, None);
            for (i, (which, system, rul)) in picks.into_iter().enumerate() {
                lib.push(LibraryEntry {
                    system_id: system,
                    window_id: i as u32 + 1,
                    pi: pis[which % pis.len()].clone(),
                    rul,
                })
                .unwrap();
            }
            lib
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // ---- ingest ----

    #[test]
    fn records_round_trip_bit_exact(rows in prop::collection::vec(record_strategy(), 1..6)) {
        let s = series(3, rows);
        let text: String = s.records.iter().map(|r| r.to_line() + "\n").collect();
        let parsed = parse_cmapss(text.as_bytes()).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        for (a, b) in parsed[0].records.iter().zip(&s.records) {
            for (x, y) in a.settings.iter().chain(&a.sensors).zip(b.settings.iter().chain(&b.sensors)) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!((a.unit_id, a.cycle), (b.unit_id, b.cycle));
        }
    }

    #[test]
    fn window_invariants(
        rows in prop::collection::vec(record_strategy(), 1..40),
        other in prop::collection::vec(record_strategy(), 1..10),
        t in 1usize..25,
    ) {
        let s = series(1, rows);
        let spec = FeatureSpec::new(vec![2, 3, 4, 7, 11], 2).unwrap();
        let stats = fit_minmax(std::slice::from_ref(&s), &spec).unwrap();
        let windows = make_windows(&s, t, &spec, &stats, 125.0).unwrap();
        prop_assert_eq!(windows.len(), s.len().saturating_sub(t - 1).max(1));
        for pair in windows.windows(2) {
            prop_assert!(pair[1].rul_target <= pair[0].rul_target);
        }
        for w in &windows {
            prop_assert!(w.rul_target <= 125.0 && w.rul_target >= 0.0);
            prop_assert_eq!(w.values.len(), t);
            prop_assert!(w.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        // Held-out data scaled with training statistics is clamped.
        let test = series(2, other);
        let test_windows = make_windows(&test, t, &spec, &stats, 125.0).unwrap();
        prop_assert!(test_windows.iter().flat_map(|w| w.values.iter().flatten()).all(|v| (0.0..=1.0).contains(v)));
    }

    // ---- nn ----

    #[test]
    fn attention_rows_are_convex(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 2)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let kt = g.transpose(kn).unwrap();
        let scores = g.matmul(qn, kt).unwrap();
        let weights = g.softmax_rows(scores);
        for r in 0..3 {
            let s: f64 = g.value(weights).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let out = scaled_dot_attention(&mut g, qn, kn, vn).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..5).map(|r| v.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..3 {
                let x = g.value(out).get(r, c);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn positional_encoding_bounded(len in 1usize..40, half in 1usize..16) {
        let pe = positional_encoding(len, 2 * half, PositionOrigin::Zero).unwrap();
        prop_assert!(pe.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        for (i, v) in pe.row(0).iter().enumerate() {
            prop_assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    // ---- vq ----

    #[test]
    fn quantization_optimal_and_idempotent(z in matrix(4, 3), cb in matrix(6, 3)) {
        let q = quantize(&z, &cb).unwrap();
        for r in 0..4 {
            let dist = |k: usize| -> f64 { z.row(r).iter().zip(cb.row(k)).map(|(a, b)| (a - b) * (a - b)).sum() };
            let chosen = dist(q.indices[r]);
            for k in 0..6 {
                prop_assert!(chosen <= dist(k));
                if dist(k) == chosen {
                    prop_assert!(q.indices[r] <= k);
                }
            }
        }
        let again = quantize(&q.z_q, &cb).unwrap();
        prop_assert_eq!(again.z_q, q.z_q);
    }

    #[test]
    fn vq_loss_decomposes_and_routes_gradients(z in matrix(3, 2), cb in matrix(4, 2), target in -1.0..1.0f64, beta in 0.0..1.0f64) {
        let mut store = ParamStore::new();
        let zid = store.add("z", z.clone());
        let cid = store.add("cb", cb.clone());
        let q = quantize(&z, &cb).unwrap();
        let mut g = Graph::new(&store);
        let (zn, cn) = (g.param(zid), g.param(cid));
        let sel = g.gather_rows(cn, &q.indices).unwrap();
        let (sg_z, sg_sel) = (g.stop_grad(zn), g.stop_grad(sel));
        let st = g.straight_through(zn, sel).unwrap();
        let pred = g.mean_rows(st);
        let pred = g.sum(pred);
        let tgt = g.constant(Tensor::scalar(target));
        let l = vq_loss(&mut g, pred, tgt, zn, sg_z, sel, sg_sel, beta).unwrap();
        let parts = [l.task, l.codebook, l.commitment].map(|n| g.value(n).values()[0]);
        prop_assert!((g.value(l.total).values()[0] - parts.iter().sum::<f64>()).abs() < 1e-12);

        // The codebook term is the only one that reaches the codebook.
        let zero = |t: Option<&Tensor>| t.is_none_or(|t| t.values().iter().all(|v| *v == 0.0));
        let task = g.backward(l.task).unwrap();
        let commit = g.backward(l.commitment).unwrap();
        let codebook = g.backward(l.codebook).unwrap();
        prop_assert!(zero(task.param(cid)));
        prop_assert!(zero(commit.param(cid)));
        prop_assert!(zero(codebook.param(zid)));
    }

    // ---- prior ----

    #[test]
    fn transitions_equal_pair_counting(states in prop::collection::vec(0usize..6, 2..60)) {
        let t = estimate_transition(&states, 6).unwrap();
        let oracle = pair_count_oracle(&states, 6);
        for a in 0..6 {
            for b in 0..6 {
                prop_assert_eq!(t.matrix.get(a, b), oracle[a][b]);
            }
            if t.visits[a] > 0 {
                prop_assert!((t.matrix.row_sum(a) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_is_convex_and_stochastic(s1 in prop::collection::vec(0usize..5, 2..30), s2 in prop::collection::vec(0usize..5, 2..30), lambda in 0.0..=1.0f64) {
        let p1 = estimate_transition(&s1, 5).unwrap();
        let p2 = estimate_transition(&s2, 5).unwrap();
        // Make the previous state fully stochastic so rows stay comparable.
        let prev = SmoothedTransitionMatrix { matrix: regularize(&p1.matrix, 1e-3).unwrap(), lambda, windows_folded: 1 };
        let m = ema_update(Some(&prev), &p2, lambda).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let (x, y) = (prev.matrix.get(a, b), p2.matrix.get(a, b));
                let v = m.matrix.get(a, b);
                prop_assert!(v >= x.min(y) - 1e-15 && v <= x.max(y) + 1e-15);
            }
            if p2.visits[a] > 0 {
                prop_assert!((m.matrix.row_sum(a) - 1.0).abs() < 1e-12);
            }
        }
        let reg = regularize(&m.matrix, 1e-6).unwrap();
        for a in 0..5 {
            prop_assert!((reg.row_sum(a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smaller_lambda_tracks_latest_window(s1 in prop::collection::vec(0usize..5, 2..30), s2 in prop::collection::vec(0usize..5, 2..30), l1 in 0.0..=1.0f64, l2 in 0.0..=1.0f64) {
        // One blending step from a common previous state.
        let p1 = estimate_transition(&s1, 5).unwrap();
        let p2 = estimate_transition(&s2, 5).unwrap();
        let prev = ema_update(None, &p1, 0.5).unwrap();
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let d_lo = ema_update(Some(&prev), &p2, lo).unwrap().matrix.l1_distance(&p2.matrix);
        let d_hi = ema_update(Some(&prev), &p2, hi).unwrap().matrix.l1_distance(&p2.matrix);
        prop_assert!(d_lo <= d_hi + 1e-12);
    }

    #[test]
    fn steady_state_is_fixed_point(states in prop::collection::vec(0usize..8, 2..80), eps in 1e-8..1e-2f64) {
        let p = estimate_transition(&states, 8).unwrap();
        let m = regularize(&p.matrix, eps).unwrap();
        let ss = steady_state(&m, 1e-10, 100_000).unwrap();
        let next = m.left_multiply(&ss.pi);
        let res: f64 = next.iter().zip(&ss.pi).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(res <= 1e-10);
        prop_assert!((ss.pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(ss.pi.iter().all(|v| *v > 0.0));
    }

    // ---- similarity ----

    #[test]
    fn js_axioms(p in distribution(6), q in distribution(6), r in distribution(6)) {
        let pq = js(&p, &q).unwrap();
        prop_assert_eq!(pq, js(&q, &p).unwrap());
        prop_assert!((0.0..=LN_2).contains(&pq));
        prop_assert_eq!(js(&p, &p).unwrap(), 0.0);
        let (pr, rq) = (js(&p, &r).unwrap(), js(&r, &q).unwrap());
        prop_assert!(pq.sqrt() <= pr.sqrt() + rq.sqrt() + 1e-9);
        if pq < 1e-15 {
            let diff: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!(diff < 1e-6);
        }
    }

    #[test]
    fn nearest_matches_brute_force(lib in library_strategy(5), query in distribution(5), k in 1usize..12, exclude in prop::option::of(0u32..5)) {
        let eligible = lib.entries.iter().filter(|e| Some(e.system_id) != exclude).count();
        match nearest(&query, &lib, k, exclude) {
            Ok(set) => {
                prop_assert_eq!(set.neighbors, brute_force_nearest(&query, &lib, k, exclude));
            }
            Err(_) => prop_assert_eq!(eligible, 0),
        }
    }

    #[test]
    fn prediction_within_neighbor_range(lib in library_strategy(4), query in distribution(4), k in 1usize..10) {
        let set = nearest(&query, &lib, k, None).unwrap();
        let r = predict_rul(&set).unwrap();
        let lo = set.neighbors.iter().map(|n| n.rul).fold(f64::INFINITY, f64::min);
        let hi = set.neighbors.iter().map(|n| n.rul).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r >= lo - 1e-9 && r <= hi + 1e-9);
    }

    #[test]
    fn distant_entry_does_not_change_neighbors(lib in library_strategy(4), query in distribution(4), k in 1usize..5) {
        prop_assume!(lib.len() >= k);
        let before = nearest(&query, &lib, k, None).unwrap();
        let kth = before.neighbors.last().unwrap().divergence;
        // The point mass farthest from the query.
        let far_state = (0..4).min_by(|&a, &b| query[a].total_cmp(&query[b])).unwrap();
        let mut far = vec![0.0; 4];
        far[far_state] = 1.0;
        prop_assume!(js(&query, &far).unwrap() > kth);
        let mut bigger = lib.clone();
        bigger.push(LibraryEntry { system_id: 99, window_id: 1, pi: far, rul: 0.0 }).unwrap();
        prop_assert_eq!(nearest(&query, &bigger, k, None).unwrap(), before);
    }

    // ---- metrics ----

    #[test]
    fn metric_signs(pred in prop::collection::vec(0.0..150.0f64, 1..20), shift in prop::collection::vec(-30.0..30.0f64, 20)) {
        let truth: Vec<f64> = pred.iter().zip(&shift).map(|(p, s)| p + s).collect();
        prop_assert!(rmse(&pred, &truth).unwrap() >= 0.0);
        prop_assert!(phm_score(&pred, &truth).unwrap() >= 0.0);
        prop_assert_eq!(rmse(&pred, &pred).unwrap(), 0.0);
        prop_assert_eq!(phm_score(&pred, &pred).unwrap(), 0.0);
        if shift[..pred.len()].iter().any(|s| *s != 0.0) {
            prop_assert!(rmse(&pred, &truth).unwrap() > 0.0);
            prop_assert!(phm_score(&pred, &truth).unwrap() > 0.0);
        }
    }

    #[test]
    fn score_monotone_in_magnitude(a in 0.0..100.0f64, b in 0.0..100.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(lo < hi);
        prop_assert!(score_contribution(hi) > score_contribution(lo));
        prop_assert!(score_contribution(-hi) > score_contribution(-lo));
    }
}

#[test]
fn late_predictions_cost_more() {
    for h in [1.0, 5.0, 13.0, 50.0] {
        assert!(score_contribution(h) > score_contribution(-h), "h = {h}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let model = common::miniature_model(21);
        let window: Vec<Vec<f64>> = (0..4).map(|t| vec![0.1 * t as f64, 0.4, 0.9 - 0.2 * t as f64]).collect();
        let mut g = Graph::new(model.params());
        let lg = model
            .loss_graph(&mut g, &window, 50.0, latent_rul::model::LossMode::Live)
            .unwrap();
        let grads = g.backward(lg.nodes.total).unwrap();
        let flat: Vec<u64> = model
            .params()
            .ids()
            .flat_map(|id| grads.param(id).map(|t| t.values().to_vec()).unwrap_or_default())
            .map(f64::to_bits)
            .collect();
        (g.value(lg.nodes.total).values()[0].to_bits(), flat, model.encode(&window).unwrap())
    };
    assert_eq!(run(), run());
}

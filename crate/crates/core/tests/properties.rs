use patchmoe::balance::{channel_balance_loss, temporal_balance_loss};
use patchmoe::metrics::{auc_roc, mase, msmape, ForecastEval};
use patchmoe::numerics::{softmax, Tensor};
use patchmoe::preprocess::{embed, patchify, revin_normalize, SeriesBatch, REVIN_EPS};
use patchmoe::router::gates_from_scores;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Selection by counting strictly better entries, lower index winning ties.
fn in_top_k(s: &[f64], i: usize, k: usize) -> bool {
    let better = (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
    better < k
}

/// Direct loop form: for each group g and expert i,
/// f = N_r/(k*M) * #{members choosing i}, P = mean member probability.
fn loop_loss(h: &Tensor, channels: usize, n: usize, k: usize, channel_axis: bool) -> f64 {
    let ne = h.cols();
    let (groups, members) = if channel_axis { (n, channels) } else { (channels, n) };
    let mut loss = 0.0;
    for g in 0..groups {
        for i in 0..ne {
            let mut f = 0.0;
            let mut p = 0.0;
            for m in 0..members {
                let tok = if channel_axis { m * n + g } else { g * n + m };
                let row = h.row(tok);
                let mut z = 0.0;
                for j in 0..ne {
                    z += row[j].exp();
                }
                let s: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
                if in_top_k(&s, i, k) {
                    f += ne as f64 / (k * members) as f64;
                }
                p += s[i] / members as f64;
            }
            loss += f * p;
        }
    }
    loss
}

fn balance_case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>)> {
    (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(nc, n, ne)| {
        let k = 1..=ne.min(2);
        // coarse grid so ties appear
        let scores = prop::collection::vec((-6i32..=6).prop_map(|v| v as f64 * 0.5), nc * n * ne);
        (Just(nc), Just(n), Just(ne), k, scores)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn balance_matches_loop_oracle((nc, n, ne, k, s) in balance_case()) {
        let h = Tensor::matrix(nc * n, ne, s);
        let (cha, _) = channel_balance_loss(&h, nc, n, k).unwrap();
        let (tem, _) = temporal_balance_loss(&h, nc, n, k).unwrap();
        prop_assert!((cha - loop_loss(&h, nc, n, k, true)).abs() < 1e-10);
        prop_assert!((tem - loop_loss(&h, nc, n, k, false)).abs() < 1e-10);
        prop_assert!(cha >= 0.0 && tem >= 0.0);
        if ne == 1 {
            prop_assert_eq!(cha, n as f64);
            prop_assert_eq!(tem, nc as f64);
        }
    }

    #[test]
    fn temporal_is_channel_on_swapped_layout((nc, n, ne, k, s) in balance_case()) {
        let h = Tensor::matrix(nc * n, ne, s);
        let rows: Vec<Vec<f64>> = (0..n * nc).map(|r| h.row((r % nc) * n + r / nc).to_vec()).collect();
        let swapped = Tensor::from_rows(&rows).unwrap();
        let (tem, _) = temporal_balance_loss(&h, nc, n, k).unwrap();
        let (cha, _) = channel_balance_loss(&swapped, n, nc, k).unwrap();
        prop_assert!((tem - cha).abs() < 1e-12);
    }

    #[test]
    fn shifting_a_token_leaves_losses_unchanged(
        (nc, n, ne, k, s) in balance_case(),
        shift in -50.0f64..50.0,
        tok in 0usize..9,
    ) {
        let h = Tensor::matrix(nc * n, ne, s);
        let mut moved = h.clone();
        let t = tok % (nc * n);
        for v in moved.row_mut(t) {
            *v += shift;
        }
        let a = channel_balance_loss(&h, nc, n, k).unwrap().0;
        let b = channel_balance_loss(&moved, nc, n, k).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9);
        let a = temporal_balance_loss(&h, nc, n, k).unwrap().0;
        let b = temporal_balance_loss(&moved, nc, n, k).unwrap().0;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn gates_keep_exactly_k(s in prop::collection::vec(-8.0f64..8.0, 5 * 6), k in 1usize..=5) {
        let g = gates_from_scores(&Tensor::matrix(6, 5, s), k).unwrap();
        for w in &g.weights {
            prop_assert_eq!(w.len(), k);
            prop_assert!(w.iter().all(|&v| v > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let dense = g.dense();
        for r in 0..6 {
            prop_assert_eq!(dense.row(r).iter().filter(|&&v| v > 0.0).count(), k);
        }
    }

    #[test]
    fn raising_a_score_never_deselects(s in prop::collection::vec(-3.0f64..3.0, 6), k in 1usize..=6, i in 0usize..6, up in 0.0f64..5.0) {
        let before = gates_from_scores(&Tensor::matrix(1, 6, s.clone()), k).unwrap();
        let mut s2 = s;
        s2[i] += up;
        let after = gates_from_scores(&Tensor::matrix(1, 6, s2), k).unwrap();
        if before.selected[0].contains(&i) {
            prop_assert!(after.selected[0].contains(&i));
        }
    }

    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let s = softmax(&v).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn standardization_removes_channel_affine(
        data in prop::collection::vec(-10.0f64..10.0, 2 * 20),
        a in 0.1f64..20.0,
        b in -50.0f64..50.0,
    ) {
        let x = SeriesBatch::unnamed(Tensor::matrix(2, 20, data)).unwrap();
        let y = SeriesBatch::unnamed(x.values.map(|v| a * v + b)).unwrap();
        let (xs, sx) = revin_normalize(&x, 0.0);
        prop_assume!(sx.std.iter().all(|&s| s > 1e-3));
        let (ys, _) = revin_normalize(&y, 0.0);
        for (u, v) in xs.values.data().iter().zip(ys.values.data()) {
            prop_assert!((u - v).abs() < 1e-9);
        }
        // with eps the scales differ by eps * |1/a - 1| / std relative
        let (xe, _) = revin_normalize(&x, REVIN_EPS);
        let (ye, _) = revin_normalize(&y, REVIN_EPS);
        for c in 0..2 {
            let bound = REVIN_EPS * (1.0 / a - 1.0).abs() / sx.std[c] + 1e-9;
            for t in 0..20 {
                let z = xs.values.get(c, t);
                prop_assert!((xe.values.get(c, t) - ye.values.get(c, t)).abs() <= bound * z.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_tiling_reconstructs_series(n in 1usize..6, p in 1usize..8, ch in 1usize..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = n * p;
        let x = SeriesBatch::unnamed(Tensor::matrix(ch, t, (0..ch * t).map(|_| rng.random()).collect())).unwrap();
        let xp = patchify(&x, p, p).unwrap();
        prop_assert_eq!(xp.pad_len, 0);
        prop_assert_eq!(xp.patches.data(), x.values.data());
    }

    #[test]
    fn embedding_commutes_with_channel_permutation(seed in 0u64..1000, t in 5usize..30, p in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = SeriesBatch::unnamed(Tensor::matrix(3, t, r(3 * t))).unwrap();
        let stride = p.max(2) - 1;
        let xp = patchify(&x, p, stride).unwrap();
        let (d, n) = (4, xp.n);
        let w = Tensor::matrix(p, d, r(p * d));
        let bias = r(d);
        let pos = Tensor::matrix(n, d, r(n * d));
        let tok = embed(&xp, &w, &bias, &pos).unwrap();
        let perm = [2usize, 0, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&c| x.values.row(c).to_vec()).collect();
        let xq = SeriesBatch::unnamed(Tensor::from_rows(&rows).unwrap()).unwrap();
        let tq = embed(&patchify(&xq, p, stride).unwrap(), &w, &bias, &pos).unwrap();
        for (new_c, &old_c) in perm.iter().enumerate() {
            for q in 0..n {
                prop_assert_eq!(tq.token(new_c, q), tok.token(old_c, q));
            }
        }
    }

    #[test]
    fn mase_is_scale_free(
        hist in prop::collection::vec(-5.0f64..5.0, 6..20),
        act in prop::collection::vec(-5.0f64..5.0, 3),
        fc in prop::collection::vec(-5.0f64..5.0, 3),
        c in 0.01f64..100.0,
    ) {
        let e = ForecastEval::new(hist.clone(), act.clone(), fc.clone(), 2);
        let scaled = ForecastEval::new(
            hist.iter().map(|v| v * c).collect(),
            act.iter().map(|v| v * c).collect(),
            fc.iter().map(|v| v * c).collect(),
            2,
        );
        if let (Ok(a), Ok(b)) = (mase(&e), mase(&scaled)) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn msmape_is_bounded(f in prop::collection::vec(-1e6f64..1e6, 1..10), seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = f.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
        let v = msmape(&f, &y, 0.1).unwrap();
        prop_assert!((0.0..=200.0).contains(&v));
    }

    #[test]
    fn auc_rank_form_equals_all_pairs(
        pts in prop::collection::vec(((0i32..20).prop_map(f64::from), any::<bool>()), 2..200),
    ) {
        let (s, l): (Vec<f64>, Vec<bool>) = pts.into_iter().unzip();
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        prop_assert!((auc_roc(&s, &l).unwrap() - wins / pairs).abs() < 1e-12);
    }
}

#[test]
fn single_expert_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (nc, n) in [(1, 1), (2, 3), (3, 2), (4, 5)] {
        let h = Tensor::matrix(nc * n, 1, (0..nc * n).map(|_| rng.random_range(-9.0..9.0)).collect());
        assert_eq!(channel_balance_loss(&h, nc, n, 1).unwrap().0, n as f64);
        assert_eq!(temporal_balance_loss(&h, nc, n, 1).unwrap().0, nc as f64);
    }
}

#[test]
fn spread_routing_minimizes_temporal_loss() {
    // N=1, n=4, N_r=4, k=1: every assignment of patches to experts
    let big = 60.0;
    let mut best = (f64::INFINITY, vec![]);
    let mut single = 0.0;
    for code in 0..256usize {
        let assign: Vec<usize> = (0..4).map(|q| (code >> (2 * q)) & 3).collect();
        let mut h = Tensor::full(&[4, 4], -big);
        for (q, &e) in assign.iter().enumerate() {
            h.set(q, e, big);
        }
        let (l, _) = temporal_balance_loss(&h, 1, 4, 1).unwrap();
        if assign.iter().all(|&e| e == assign[0]) {
            single = l;
        }
        if l < best.0 - 1e-12 {
            best = (l, assign);
        }
    }
    let mut sorted = best.1.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
    assert!(best.0 < single);
    assert!((single - 4.0).abs() < 1e-9);
}

#[test]
fn gates_over_many_random_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (tokens, ne, k) = (10_000, 10, 3);
    let s = Tensor::matrix(tokens, ne, (0..tokens * ne).map(|_| rng.random_range(-4.0..4.0)).collect());
    let g = gates_from_scores(&s, k).unwrap();
    for w in &g.weights {
        assert_eq!(w.iter().filter(|&&v| v > 0.0).count(), k);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(gates_from_scores(&s, k).unwrap(), g);
}

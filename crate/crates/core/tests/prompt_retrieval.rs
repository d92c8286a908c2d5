use multits_core::prompt::PromptPool;
use multits_core::tensor::{param_gradcheck, seeded_normal, Array, Binder, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pool(m: usize, w: usize, d: usize, kappa: usize, seed: u64) -> (ParamStore, PromptPool) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PromptPool::new(&mut store, "pool", m, w, d, kappa, &mut rng);
    (store, p)
}

/// Straight-line recomputation of every prompt score.
fn oracle_scores(store: &ParamStore, p: &PromptPool, s: &[f64]) -> Vec<f64> {
    let (w, d) = (p.w, p.d);
    let (wq, wk, wv, keys) = (store.value(p.w_q), store.value(p.w_k), store.value(p.w_v), store.value(p.keys));
    (0..p.m)
        .map(|m| {
            let mut total = 0.0;
            for j in 0..d {
                let u: f64 = (0..w).map(|t| s[t * d + j] * wq.get(&[t, j])).sum::<f64>() / w as f64;
                let k: f64 = (0..d).map(|c| wk.get(&[j, c]) * keys.get(&[m, c])).sum();
                total += wv.get(&[j]) * (u + k).tanh();
            }
            total
        })
        .collect()
}

/// Selection by repeated arg-max with a lower-index preference.
fn brute_top(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    (0..k)
        .map(|_| {
            let mut best: Option<usize> = None;
            for (i, &v) in scores.iter().enumerate() {
                if !taken[i] && best.is_none_or(|b| v > scores[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            b
        })
        .collect()
}

#[test]
fn retrieval_equals_brute_force_on_200_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ties = 0;
    for case in 0..200u64 {
        let m = rng.random_range(1..=32);
        let kappa = rng.random_range(1..=m);
        let (w, d) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (mut store, p) = pool(m, w, d, kappa, case);
        store.set_value(p.keys, seeded_normal(&[m, d], case + 1, 1.0).unwrap()).unwrap();
        if case % 3 == 0 {
            // duplicated keys give exactly tied scores
            let mut keys = store.value(p.keys).clone();
            for i in (1..m).step_by(2) {
                for c in 0..d {
                    let v = keys.get(&[i - 1, c]);
                    keys.set(&[i, c], v);
                }
            }
            store.set_value(p.keys, keys).unwrap();
        }
        if case % 7 == 0 {
            store.set_value(p.w_v, Array::zeros(&[d])).unwrap();
        }
        let s = seeded_normal(&[w * d], case + 2, 1.0).unwrap();
        let scores = p.scores(&store, s.data());
        let want = oracle_scores(&store, &p, s.data());
        for (a, b) in scores.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "case {case}: score mismatch");
        }
        let r = p.retrieve(&store, s.data());
        assert_eq!(r.indices, brute_top(&scores, kappa), "case {case}");
        assert!(r.scores.windows(2).all(|x| x[0] >= x[1]));
        let mut sorted = r.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), kappa);
        if r.scores.windows(2).any(|x| x[0] == x[1]) {
            ties += 1;
        }
    }
    assert!(ties > 20, "tie cases exercised: {ties}");
}

#[test]
fn identical_windows_retrieve_identical_sets() {
    let (store, p) = pool(15, 12, 8, 4, 3);
    let s = seeded_normal(&[12 * 8], 4, 1.0).unwrap();
    let twin = s.clone();
    assert_eq!(p.retrieve(&store, s.data()), p.retrieve(&store, twin.data()));
}

#[test]
fn permuting_the_pool_permutes_indices_but_not_the_embedding() {
    let (m, w, d, kappa) = (6, 3, 4, 2);
    let (store, p) = pool(m, w, d, kappa, 11);
    let perm = [3, 5, 0, 1, 4, 2];
    let mut permuted = store.clone();
    let permute_rows = |a: &Array| {
        let row: usize = a.len() / m;
        let mut data = vec![0.0; a.len()];
        for (new, &old) in perm.iter().enumerate() {
            data[new * row..(new + 1) * row].copy_from_slice(&a.data()[old * row..(old + 1) * row]);
        }
        Array::new(a.shape().to_vec(), data).unwrap()
    };
    permuted.set_value(p.keys, permute_rows(store.value(p.keys))).unwrap();
    permuted.set_value(p.values, permute_rows(store.value(p.values))).unwrap();
    let s = seeded_normal(&[2, w, d], 5, 1.0).unwrap();
    let run = |st: &ParamStore| {
        let tape = Tape::new();
        let b = Binder::new(&tape, st, false);
        let (out, r) = p.forward(&b, b.constant(s.clone())).unwrap();
        (out.value(), r)
    };
    let (a, ra) = run(&store);
    let (b, rb) = run(&permuted);
    for (x, y) in ra.iter().zip(&rb) {
        let mapped: Vec<usize> = y.indices.iter().map(|&i| perm[i]).collect();
        assert_eq!(mapped, x.indices);
    }
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn gradients_reach_every_pool_parameter() {
    let (w, d) = (3, 2);
    let (mut store, p) = pool(5, w, d, 2, 23);
    store.set_value(p.keys, seeded_normal(&[5, d], 1, 1.0).unwrap()).unwrap();
    store.set_value(p.values, seeded_normal(&[5, w, d], 2, 1.0).unwrap()).unwrap();
    store.set_value(p.in_bias, seeded_normal(&[d], 3, 0.5).unwrap()).unwrap();
    store.set_value(p.mask_weight, seeded_normal(&[d], 4, 0.5).unwrap()).unwrap();
    let x = seeded_normal(&[3, w], 6, 1.0).unwrap();
    let mask = Array::new(vec![3, w], vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    let ids = store.trainable_ids();
    let report = param_gradcheck(&store, &ids, 1e-5, |b| {
        let s = p.project_input(b, b.constant(x.clone()), Some(b.constant(mask.clone())))?;
        Ok(p.forward(b, s)?.0.tanh().square().sum())
    })
    .unwrap();
    assert_eq!(report.len(), 9);
    let grads = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, true);
        let s = p.project_input(&b, b.constant(x.clone()), Some(b.constant(mask.clone()))).unwrap();
        p.forward(&b, s).unwrap().0.tanh().square().sum().backward().unwrap();
        b.gradients()
    };
    for (name, err) in &report {
        assert!(*err < 1e-4, "{name}: {err:e}");
    }
    for id in [p.keys, p.values, p.w_q, p.w_k, p.w_v, p.w_o] {
        let g = grads[id.0].as_ref().expect("gradient present");
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has a zero gradient", store.get(id).name);
    }
}

use multits_core::attention::{inter_series, intra_series, GqAttention};
use multits_core::tensor::{param_gradcheck, seeded_normal, Array, Binder, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Column block `blk` (width `w`) of a row-major matrix with `cols` columns.
fn block(m: &Array, blk: usize, w: usize) -> Vec<Vec<f64>> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..rows).map(|r| (0..w).map(|c| m.data()[r * cols + blk * w + c]).collect()).collect()
}

fn mat(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum()).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-(group, head) loop evaluation for one batch element.
fn loop_oracle(store: &ParamStore, att: &GqAttention, xq: &[Vec<f64>], xkv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (g, h, d) = (att.groups, att.heads, att.d);
    let wq = store.value(att.query.0);
    let wk = store.value(att.key.0);
    let wv = store.value(att.value.0);
    let wo = store.value(att.output.0);
    let scale = 1.0 / ((d / h) as f64).sqrt();
    let lq = xq.len();
    let mut out = vec![vec![0.0; d]; lq];
    for gi in 0..g {
        let k = mat(xkv, &block(wk, gi, d));
        let v = mat(xkv, &block(wv, gi, d));
        let mut cat = vec![Vec::with_capacity(h * d); lq];
        for hi in 0..h {
            let q = mat(xq, &block(wq, gi * h + hi, d));
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k.iter().map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()).collect();
                let p = softmax(&scores);
                cat[i].extend((0..d).map(|c| p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum::<f64>()));
            }
        }
        let wo_rows: Vec<Vec<f64>> = (0..h * d).map(|r| wo.data()[r * d..(r + 1) * d].to_vec()).collect();
        for (o, row) in out.iter_mut().zip(mat(&cat, &wo_rows)) {
            for (a, b) in o.iter_mut().zip(row) {
                *a += b / g as f64;
            }
        }
    }
    out
}

fn rows(a: &Array, start: usize, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| a.data()[(start + i) * d..(start + i + 1) * d].to_vec()).collect()
}

#[test]
fn single_group_single_head_is_textbook_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100u64 {
        let l = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let att = GqAttention::new(&mut store, "a", 1, 1, d, &mut rng);
        let x = seeded_normal(&[1, l, d], case, 1.0).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let (y, w) = att.attend(&b, b.constant(x.clone()), b.constant(x.clone()), false).unwrap();
        let y = y.value();

        let xs = rows(&x, 0, l, d);
        let q = mat(&xs, &block(store.value(att.query.0), 0, d));
        let k = mat(&xs, &block(store.value(att.key.0), 0, d));
        let v = mat(&xs, &block(store.value(att.value.0), 0, d));
        let wo = block(store.value(att.output.0), 0, d);
        for i in 0..l {
            let scores: Vec<f64> = k.iter().map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let p = softmax(&scores);
            let ctx: Vec<f64> = (0..d).map(|c| p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum()).collect();
            let want = mat(&[ctx], &wo);
            for c in 0..d {
                assert!((y.get(&[0, i, c]) - want[0][c]).abs() < 1e-12, "case {case}");
            }
            let row_sum: f64 = (0..l).map(|j| w.get(&[0, 0, 0, i, j])).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn grouped_heads_match_loop_oracle_and_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..40u64 {
        let (g, h) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let d = h * rng.random_range(1..=3);
        let (lq, lk) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut store = ParamStore::new();
        let att = GqAttention::new(&mut store, "a", g, h, d, &mut rng);
        let xq = seeded_normal(&[2, lq, d], 10 * case, 1.0).unwrap();
        let xkv = seeded_normal(&[2, lk, d], 10 * case + 1, 1.0).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store, false);
        let (y, w) = att.attend(&b, b.constant(xq.clone()), b.constant(xkv.clone()), false).unwrap();
        let y = y.value();
        assert_eq!(w.shape(), &[2, g, h, lq, lk]);
        for r in w.data().chunks(lk) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&p| p >= 0.0));
        }
        for bi in 0..2 {
            let want = loop_oracle(&store, &att, &rows(&xq, bi * lq, lq, d), &rows(&xkv, bi * lk, lk, d));
            for (i, wr) in want.iter().enumerate() {
                for (c, wv) in wr.iter().enumerate() {
                    assert!((y.get(&[bi, i, c]) - wv).abs() < 1e-12, "case {case}");
                }
            }
        }
    }
}

fn run_stage(stage: &str, store: &ParamStore, att: &GqAttention, x: &Array) -> Array {
    let tape = Tape::new();
    let b = Binder::new(&tape, store, false);
    let xt = b.constant(x.clone());
    match stage {
        "intra" => intra_series(&b, xt, att),
        _ => inter_series(&b, xt, att),
    }
    .unwrap()
    .value()
}

#[test]
fn intra_series_isolates_sensors_and_inter_series_isolates_steps() {
    let (bsz, n, w, d) = (2, 4, 5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let att = GqAttention::new(&mut store, "a", 2, 3, d, &mut rng);
    let x = seeded_normal(&[bsz, n, w, d], 1, 1.0).unwrap();
    for stage in ["intra", "inter"] {
        let base = run_stage(stage, &store, &att, &x);
        for target in 0..if stage == "intra" { n } else { w } {
            let mut y = x.clone();
            for bi in 0..bsz {
                for s in 0..n {
                    for t in 0..w {
                        let hit = if stage == "intra" { s == target } else { t == target };
                        if hit {
                            for c in 0..d {
                                let v = y.get(&[bi, s, t, c]);
                                y.set(&[bi, s, t, c], v + 3.0);
                            }
                        }
                    }
                }
            }
            let out = run_stage(stage, &store, &att, &y);
            for bi in 0..bsz {
                for s in 0..n {
                    for t in 0..w {
                        let hit = if stage == "intra" { s == target } else { t == target };
                        let same = (0..d).all(|c| out.get(&[bi, s, t, c]).to_bits() == base.get(&[bi, s, t, c]).to_bits());
                        assert_eq!(same, !hit, "{stage}: perturbing {target} vs ({s}, {t})");
                    }
                }
            }
        }
    }
}

#[test]
fn gradients_through_both_stages_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let intra = GqAttention::new(&mut store, "intra", 2, 2, 4, &mut rng);
    let inter = GqAttention::new(&mut store, "inter", 1, 2, 4, &mut rng);
    let x = seeded_normal(&[1, 3, 3, 4], 2, 1.0).unwrap();
    let ids = store.trainable_ids();
    let report = param_gradcheck(&store, &ids, 1e-5, |b| {
        let h = intra_series(b, b.constant(x.clone()), &intra)?;
        Ok(inter_series(b, h, &inter)?.tanh().square().sum())
    })
    .unwrap();
    assert_eq!(report.len(), 8);
    for (name, err) in report {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

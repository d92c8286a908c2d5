use multits_core::data::synthetic::{generate, SyntheticConfig};
use multits_core::diagnostics::micro_lm_config;
use multits_core::model::MultiTsConfig;
use multits_core::optim::{lr_schedule, AdamConfig, OptimState};
use multits_core::pipeline::{ablate, forecast_rows, ForecastBundle, Experiment, PipelineError, Variant};
use multits_core::tensor::{seeded_normal, Array, Gradients, ParamStore};
use multits_core::text::{TinyLm, TrendVocabulary};
use multits_core::train::{evaluate, evaluate_arrays, train, TrainConfig, DEFAULT_HORIZONS, MAPE_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> MultiTsConfig {
    MultiTsConfig {
        w: 6,
        nu: 3,
        d: 4,
        m: 4,
        kappa: 2,
        groups: 1,
        heads: 2,
        k_cheb: 2,
        ..Default::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch: 16,
        epochs: 6,
        patience: 2,
        shards: 2,
        ..Default::default()
    }
}

fn small_lm() -> TinyLm {
    TinyLm::new(&micro_lm_config(), TrendVocabulary::default().size()).unwrap()
}

fn small_data() -> (multits_core::data::RawSeries, multits_core::data::Adjacency) {
    generate(&SyntheticConfig {
        n: 3,
        t: 260,
        period: 24,
        seed: 5,
        ..Default::default()
    })
}

#[test]
fn adam_matches_straight_line_reference() {
    let cfg = AdamConfig::adamw(0.01, 0.05);
    let mut store = ParamStore::new();
    let p = store.add("p", seeded_normal(&[7], 1, 1.0).unwrap(), true);
    let frozen = store.add("f", seeded_normal(&[2], 2, 1.0).unwrap(), false);
    let mut state = OptimState::new(cfg);
    let mut theta = store.value(p).data().to_vec();
    let (mut m, mut v) = (vec![0.0; 7], vec![0.0; 7]);
    for t in 1..=25 {
        let g = seeded_normal(&[7], 100 + t, 1.0).unwrap();
        let mut grads: Gradients = vec![None; store.len()];
        grads[p.0] = Some(g.clone());
        grads[frozen.0] = Some(Array::full(&[2], 1.0));
        state.step(&mut store, &grads).unwrap();
        for i in 0..7 {
            let gi = g.data()[i];
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
            theta[i] -= 0.01 * 0.05 * theta[i];
            theta[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        for (a, b) in store.value(p).data().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12, "step {t}");
        }
    }
    assert_eq!(store.value(frozen), &seeded_normal(&[2], 2, 1.0).unwrap());
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..30 {
        let (b, n, nu) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..13));
        let target = seeded_normal(&[b, n, nu], case, 5.0).unwrap().map(|v| v + 3.0);
        let pred = seeded_normal(&[b, n, nu], case + 500, 5.0).unwrap();
        let Ok(report) = evaluate_arrays(&pred, &target, &DEFAULT_HORIZONS) else {
            continue;
        };
        let brute = |steps: &[usize]| {
            let (mut abs, mut sq, mut pct, mut cnt, mut kept) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for bi in 0..b {
                for s in 0..n {
                    for &h in steps {
                        let (p, y) = (pred.get(&[bi, s, h]), target.get(&[bi, s, h]));
                        abs += (p - y).abs();
                        sq += (p - y) * (p - y);
                        cnt += 1.0;
                        if y.abs() >= MAPE_EPS {
                            pct += (p - y).abs() / y.abs();
                            kept += 1.0;
                        }
                    }
                }
            }
            (abs / cnt, (sq / cnt).sqrt(), 100.0 * pct / kept)
        };
        let all: Vec<usize> = (0..nu).collect();
        let (mae, rmse, mape) = brute(&all);
        assert!((report.aggregate.mae - mae).abs() < 1e-12);
        assert!((report.aggregate.rmse - rmse).abs() < 1e-12);
        assert!((report.aggregate.mape - mape).abs() < 1e-9);
        let expected: Vec<usize> = DEFAULT_HORIZONS.iter().copied().filter(|&h| h <= nu).collect();
        assert_eq!(report.horizons.iter().map(|r| r.horizon).collect::<Vec<_>>(), expected);
        for row in &report.horizons {
            let (mae, _, _) = brute(&[row.horizon - 1]);
            assert!((row.metrics.mae - mae).abs() < 1e-12);
        }
    }
}

#[test]
fn plateau_schedule_halves_after_stale_epochs() {
    let hist = [1.0, 0.9, 0.95, 0.91, 0.92, 0.93, 0.94, 0.95];
    assert_eq!(lr_schedule(1e-3, &hist[..4], 3, 1e-4, 1e-5), 1e-3);
    assert_eq!(lr_schedule(1e-3, &hist[..5], 3, 1e-4, 1e-5), 5e-4);
    assert_eq!(lr_schedule(1e-3, &hist, 3, 1e-4, 1e-5), 2.5e-4);
    assert_eq!(lr_schedule(1e-5, &hist[..5], 3, 1e-4, 1e-5), 1e-5);
}

#[test]
fn training_is_deterministic_and_restores_the_best_epoch() {
    let (series, graph) = small_data();
    let lm = small_lm();
    let exp = Experiment {
        series: &series,
        graph: &graph,
        model: small_model(),
        train: small_train(),
        ratios: (0.7, 0.1, 0.2),
        seed: 9,
        lm: Some(&lm),
        horizons: DEFAULT_HORIZONS.to_vec(),
    };
    let a = exp.run(&exp.all_observed()).unwrap();
    let b = exp.run(&exp.all_observed()).unwrap();
    assert_eq!(a.history.val_mae, b.history.val_mae);
    assert_eq!(a.history.train_loss, b.history.train_loss);
    let bytes_a = ForecastBundle::from_run(&a, &graph, Some(&lm), 9).to_checkpoint().to_bytes();
    let bytes_b = ForecastBundle::from_run(&b, &graph, Some(&lm), 9).to_checkpoint().to_bytes();
    assert!(bytes_a == bytes_b, "checkpoints differ");

    let h = &a.history;
    let argmin = h.val_mae.iter().enumerate().fold(0, |best, (i, &v)| if v < h.val_mae[best] { i } else { best });
    assert_eq!(h.best_epoch, argmin);
    assert!(h.val_mae.len() <= h.best_epoch + small_train().patience + 1);
    let prep = &a.prepared;
    let val = evaluate(&a.model, &prep.val, a.bank.as_ref(), &prep.norm, &[]).unwrap();
    assert!((val.aggregate.mae - h.best_val_mae()).abs() < 1e-9);
}

#[test]
fn bundle_round_trip_reproduces_validation_metrics() {
    let (series, graph) = small_data();
    let lm = small_lm();
    let exp = Experiment {
        series: &series,
        graph: &graph,
        model: MultiTsConfig {
            uncertainty: true,
            ..small_model()
        },
        train: TrainConfig {
            epochs: 2,
            ..small_train()
        },
        ratios: (0.7, 0.1, 0.2),
        seed: 4,
        lm: Some(&lm),
        horizons: DEFAULT_HORIZONS.to_vec(),
    };
    let out = exp.run(&exp.all_observed()).unwrap();
    let bundle = ForecastBundle::from_run(&out, &graph, Some(&lm), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    bundle.save(&path).unwrap();
    let loaded = ForecastBundle::load(&path).unwrap();
    assert_eq!(loaded.to_checkpoint().to_bytes(), bundle.to_checkpoint().to_bytes());
    let prep = exp.prepare(&exp.all_observed()).unwrap();
    let bank = loaded.bank_for(&prep).unwrap();
    let val = evaluate(&loaded.model, &prep.val, bank.as_ref(), &prep.norm, &[]).unwrap();
    assert!((val.aggregate.mae - loaded.best_val_mae).abs() < 1e-9);

    let rows = loaded.forecast(&series).unwrap();
    let (n, w, nu) = (3, 6, 3);
    assert_eq!(rows.len(), (series.t() - w + 1) * n * nu);
    let last = rows.last().unwrap();
    assert_eq!((last.anchor_t, last.horizon_step, last.y_true), (series.t(), nu, None));
    assert!(rows.iter().all(|r| r.sigma.unwrap() > 0.0 && r.lo90.unwrap() < r.hi90.unwrap()));
    let first_test = &prep.test[0];
    let direct = forecast_rows(&loaded.model, &prep.test[..1], bank.as_ref(), &prep.norm).unwrap();
    let from_series: Vec<_> = rows.iter().filter(|r| r.anchor_t == first_test.anchor_t).collect();
    assert_eq!(from_series.len(), direct.len());
    for (a, b) in from_series.iter().zip(&direct) {
        assert!((a.y_pred - b.y_pred).abs() < 1e-9 && (a.y_true.unwrap() - b.y_true.unwrap()).abs() < 1e-9);
    }

    let mut other = prep.clone();
    other.norm.mean[0] += 1.0;
    assert!(loaded.bank_for(&other).is_err());
    let mut bytes = bundle.to_checkpoint().to_bytes();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(ForecastBundle::load(&path).is_err());
}

#[test]
fn variants_parse_and_switch_one_component() {
    for v in Variant::ALL {
        let parsed: Variant = v.label().parse().unwrap();
        assert_eq!(parsed, v);
        let cfg = v.apply(&small_model());
        let base = small_model();
        let changed = [
            cfg.use_text != base.use_text,
            cfg.use_prompt != base.use_prompt,
            cfg.use_intra != base.use_intra,
            cfg.use_inter != base.use_inter,
            cfg.use_cma != base.use_cma,
        ];
        assert_eq!(changed.iter().filter(|&&c| c).count(), 1, "{v:?}");
    }
    for s in ["no-text", "no-dp", "no-intra", "no-inter", "no-cma", "w-o-llms"] {
        assert!(s.parse::<Variant>().is_ok(), "{s}");
    }
    assert!(matches!("no-head".parse::<Variant>(), Err(PipelineError::UnknownVariant(_))));
}

#[test]
fn ablation_rows_follow_the_requested_variants() {
    let (series, graph) = small_data();
    let lm = small_lm();
    let exp = Experiment {
        series: &series,
        graph: &graph,
        model: small_model(),
        train: TrainConfig {
            epochs: 1,
            ..small_train()
        },
        ratios: (0.7, 0.1, 0.2),
        seed: 1,
        lm: Some(&lm),
        horizons: DEFAULT_HORIZONS.to_vec(),
    };
    let rows = ablate(&exp, &[Variant::NoText, Variant::NoCma], None).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(labels.len(), 3);
    assert!(labels.contains(&"w/o LLMs") && labels.contains(&"w/o CMA"));
    assert!(rows.iter().all(|r| r.report.aggregate.mae.is_finite()));
}

#[test]
fn train_rejects_empty_splits() {
    let (series, graph) = small_data();
    let exp = Experiment {
        series: &series,
        graph: &graph,
        model: MultiTsConfig {
            use_text: false,
            ..small_model()
        },
        train: small_train(),
        ratios: (0.7, 0.1, 0.2),
        seed: 1,
        lm: None,
        horizons: DEFAULT_HORIZONS.to_vec(),
    };
    let prep = exp.prepare(&exp.all_observed()).unwrap();
    let mut model = multits_core::model::MultiTs::new(&exp.model, 3, Some(&graph), 1, 0).unwrap();
    assert!(train(&mut model, &[], &prep.val, None, &prep.norm, &exp.train, 0).is_err());
    assert!(train(&mut model, &prep.train, &[], None, &prep.norm, &exp.train, 0).is_err());
    let with_text = Experiment {
        model: small_model(),
        ..exp.clone()
    };
    assert!(with_text.run(&with_text.all_observed()).is_err());
}

use std::path::{Path, PathBuf};

use multits_core::checkpoint::Checkpoint;
use multits_core::data::synthetic::generate;
use multits_core::data::{load_adjacency, load_series, Adjacency, AdjacencyMode, AdjacencySource, MissingMask, MissingScheme, RawSeries, SeriesFormat};
use multits_core::diagnostics::{run_gradcheck, GRADCHECK_TOL};
use multits_core::pipeline::{
    ablate, forecast_rows, instruction_pairs, make_mask, simulate_missing, text_bank, train_trend_lm, Experiment, ForecastBundle, ForecastRow, MissingGridConfig, Variant,
};
use multits_core::tensor::Array;
use multits_core::text::{write_jsonl, LmHistory, TinyLm};
use multits_core::train::{evaluate, EvalReport, HorizonMetrics, Metrics, TrainHistory};
use serde::Serialize;

use crate::config::{AdjacencyKind, RunConfig};
use crate::rundir::RunDir;
use crate::{Cli, CliError, Command};

pub struct Dataset {
    pub series: RawSeries,
    pub graph: Adjacency,
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Input {
            path: path.to_path_buf(),
            msg: "file not found".into(),
        })
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let Some(path) = &cfg.data.series else {
        let (series, graph) = generate(&cfg.data.synthetic);
        return Ok(Dataset { series, graph });
    };
    require_file(path)?;
    let series = load_series(path, SeriesFormat::from_path(path)).map_err(multits_core::pipeline::PipelineError::from)?;
    let graph = match &cfg.data.adjacency {
        Some(adj) => {
            require_file(adj)?;
            let mode = match cfg.data.adjacency_kind {
                AdjacencyKind::EdgeList => AdjacencyMode::EdgeList,
                AdjacencyKind::Distance => AdjacencyMode::Distance,
            };
            load_adjacency(adj, series.n(), mode, cfg.data.threshold_kappa).map_err(multits_core::pipeline::PipelineError::from)?
        }
        None => Adjacency::from_matrix(Array::zeros(&[series.n(), series.n()]), AdjacencySource::Generated)
            .map_err(multits_core::pipeline::PipelineError::from)?,
    };
    Ok(Dataset { series, graph })
}

/// Config file plus command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.common.runs {
        cfg.runs = r;
    }
    if let Some(o) = &cli.common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(rates) = &cli.common.rates {
        cfg.missing.rates = rates.clone();
    }
    if let Some(s) = cli.common.scheme {
        cfg.missing.schemes = vec![s.into()];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = resolve_config(cli)?;
    let mut rd = RunDir::create(&cfg.output_dir, cli.command.name(), cfg.seed)?;
    rd.write_bytes("config.json", cfg.to_json().as_bytes())?;
    let outcome = match cli.command {
        Command::Prepare => prepare(&cfg, &mut rd),
        Command::Train => train(&cfg, cli.common.checkpoint.as_deref(), &mut rd),
        Command::TrainLm => train_lm(&cfg, &mut rd),
        Command::Evaluate => evaluate_cmd(&cfg, required_checkpoint(cli)?, &mut rd),
        Command::Forecast => forecast(&cfg, required_checkpoint(cli)?, cli.common.input.as_deref(), &mut rd),
        Command::SimulateMissing => missing(&cfg, cli.common.checkpoint.as_deref(), &mut rd),
        Command::Ablate => ablation(&cfg, cli.common.variants.as_deref(), cli.common.checkpoint.as_deref(), &mut rd),
        Command::Gradcheck => gradcheck(&cfg, &mut rd),
    };
    let dir = rd.finish()?;
    outcome.map(|()| dir)
}

fn required_checkpoint(cli: &Cli) -> Result<&Path, CliError> {
    let p = cli
        .common
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{} needs --checkpoint PATH", cli.command.name())))?;
    require_file(p)?;
    Ok(p)
}

fn experiment<'a>(cfg: &RunConfig, data: &'a Dataset, lm: Option<&'a TinyLm>, seed: u64) -> Experiment<'a> {
    Experiment {
        series: &data.series,
        graph: &data.graph,
        model: cfg.model.clone(),
        train: cfg.optimizer.clone(),
        ratios: cfg.split_ratios,
        seed,
        lm,
        horizons: cfg.horizons.clone(),
    }
}

/// Tuned LM from `--checkpoint` or trained on instruction pairs of the
/// fully observed training split. `None` when no configured run reads text.
fn obtain_lm(cfg: &RunConfig, data: &Dataset, checkpoint: Option<&Path>, rd: &mut RunDir) -> Result<Option<TinyLm>, CliError> {
    if !cfg.model.use_text {
        return Ok(None);
    }
    if let Some(p) = checkpoint {
        require_file(p)?;
        let ck = Checkpoint::load(p).map_err(multits_core::pipeline::PipelineError::from)?;
        let lm = TinyLm::from_checkpoint(&ck).map_err(multits_core::pipeline::PipelineError::from)?;
        return Ok(Some(lm));
    }
    let (lm, history) = tune_lm(cfg, data, rd)?;
    println!("trend LM: cross-entropy {:.4} -> {:.4}", history.epoch_loss.first().unwrap_or(&f64::NAN), history.epoch_loss.last().unwrap_or(&f64::NAN));
    Ok(Some(lm))
}

fn tune_lm(cfg: &RunConfig, data: &Dataset, rd: &mut RunDir) -> Result<(TinyLm, LmHistory), CliError> {
    let exp = experiment(cfg, data, None, cfg.seed);
    let prep = exp.prepare(&exp.all_observed())?;
    let pairs = instruction_pairs(&prep, cfg.lm_pairs);
    let jsonl = rd.file("instructions.jsonl");
    write_jsonl(&jsonl, &pairs).map_err(multits_core::pipeline::PipelineError::from)?;
    rd.record("instructions.jsonl");
    let (lm, history) = train_trend_lm(&pairs, &cfg.lm, cfg.seed)?;
    rd.write_bytes("lm_adapters.ckpt", &lm.adapter_checkpoint().to_bytes())?;
    rd.write_json("lm_history.json", &history)?;
    Ok((lm, history))
}

fn seeds(cfg: &RunConfig) -> impl Iterator<Item = u64> + '_ {
    (0..cfg.runs as u64).map(move |i| cfg.seed + i)
}

fn prepare(cfg: &RunConfig, rd: &mut RunDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let exp = experiment(cfg, &data, None, cfg.seed);
    let (n, t) = (data.series.n(), data.series.t());
    let mask = match (cfg.missing.schemes.as_slice(), cfg.missing.rates.first()) {
        ([scheme], Some(&rate)) if rate > 0.0 => make_mask(n, t, *scheme, rate, cfg.missing.block_len, cfg.missing.mask_seed)?,
        _ => MissingMask::all_observed(n, t),
    };
    let prep = exp.prepare(&mask)?;
    rd.write_json("prepared.json", &prep)?;
    rd.write_json("norm.json", &prep.norm)?;
    if mask.realized_rate() > 0.0 {
        let mut w = csv::Writer::from_path(rd.file("mask.csv"))?;
        w.write_record((0..n).map(|i| format!("s{i}")))?;
        for time in 0..t {
            w.write_record((0..n).map(|node| if mask.observed(node, time) { "1" } else { "0" }))?;
        }
        w.flush().map_err(|e| CliError::Io {
            path: rd.file("mask.csv"),
            source: e,
        })?;
        rd.record("mask.csv");
    }
    println!(
        "windows: train {} / val {} / test {}; {} distinct descriptions; missing rate {:.4}",
        prep.train.len(),
        prep.val.len(),
        prep.test.len(),
        prep.texts.len(),
        prep.realized_missing
    );
    Ok(())
}

fn train_lm(cfg: &RunConfig, rd: &mut RunDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let (lm, history) = tune_lm(cfg, &data, rd)?;
    let exp = experiment(cfg, &data, None, cfg.seed);
    let prep = exp.prepare(&exp.all_observed())?;
    rd.write_json("text_bank.json", &text_bank(&lm, &prep)?)?;
    println!("epoch cross-entropy: {:?}", history.epoch_loss);
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    best_val_mae: f64,
    test: EvalReport,
}

#[derive(Serialize)]
struct TrainMetrics {
    runs: Vec<RunSummary>,
    mean: EvalReport,
    std: EvalReport,
    ha_baseline: EvalReport,
}

/// Element-wise mean and population std of reports with identical layout.
pub fn mean_std(reports: &[EvalReport]) -> (EvalReport, EvalReport) {
    let k = reports.len() as f64;
    let stat = |pick: &dyn Fn(&EvalReport) -> Metrics| {
        let ms: Vec<Metrics> = reports.iter().map(pick).collect();
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(f).sum::<f64>() / k;
        let sd = |f: fn(&Metrics) -> f64, m: f64| (ms.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / k).sqrt();
        let (mae, rmse, mape) = (mean(|m| m.mae), mean(|m| m.rmse), mean(|m| m.mape));
        (
            Metrics { mae, rmse, mape },
            Metrics {
                mae: sd(|m| m.mae, mae),
                rmse: sd(|m| m.rmse, rmse),
                mape: sd(|m| m.mape, mape),
            },
        )
    };
    let (agg_m, agg_s) = stat(&|r| r.aggregate);
    let mut hm = Vec::new();
    let mut hs = Vec::new();
    for (i, h) in reports[0].horizons.iter().enumerate() {
        let (m, s) = stat(&|r| r.horizons[i].metrics);
        hm.push(HorizonMetrics { horizon: h.horizon, metrics: m });
        hs.push(HorizonMetrics { horizon: h.horizon, metrics: s });
    }
    (
        EvalReport { horizons: hm, aggregate: agg_m },
        EvalReport { horizons: hs, aggregate: agg_s },
    )
}

/// One CSV row per horizon plus an `all` row, after the given label columns.
fn metric_rows(labels: &[String], mean: &EvalReport, std: Option<&EvalReport>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let fmt = |m: &Metrics| vec![format!("{}", m.mae), format!("{}", m.rmse), format!("{}", m.mape)];
    let mut push = |h: String, m: &Metrics, s: Option<&Metrics>| {
        let mut row = labels.to_vec();
        row.push(h);
        row.extend(fmt(m));
        if let Some(s) = s {
            row.extend(fmt(s));
        }
        rows.push(row);
    };
    for (i, h) in mean.horizons.iter().enumerate() {
        push(h.horizon.to_string(), &h.metrics, std.map(|s| &s.horizons[i].metrics));
    }
    push("all".into(), &mean.aggregate, std.map(|s| &s.aggregate));
    rows
}

fn write_csv(rd: &mut RunDir, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let path = rd.file(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::Io { path, source: e })?;
    rd.record(name);
    Ok(())
}

const METRIC_COLS: [&str; 3] = ["MAE", "RMSE", "MAPE"];
const STD_COLS: [&str; 3] = ["MAE_std", "RMSE_std", "MAPE_std"];

fn header<'a>(labels: &[&'a str], with_std: bool) -> Vec<&'a str> {
    let mut h = labels.to_vec();
    h.push("horizon");
    h.extend(METRIC_COLS);
    if with_std {
        h.extend(STD_COLS);
    }
    h
}

fn train(cfg: &RunConfig, lm_checkpoint: Option<&Path>, rd: &mut RunDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let lm = obtain_lm(cfg, &data, lm_checkpoint, rd)?;
    let mut histories: Vec<TrainHistory> = Vec::new();
    let mut runs = Vec::new();
    let mut ha = None;
    for (i, seed) in seeds(cfg).enumerate() {
        let exp = experiment(cfg, &data, lm.as_ref(), seed);
        let out = exp.run(&exp.all_observed())?;
        let bundle = ForecastBundle::from_run(&out, &data.graph, lm.as_ref(), seed);
        let name = if i == 0 { "model.ckpt".to_string() } else { format!("model-run{i}.ckpt") };
        rd.write_bytes(&name, &bundle.to_checkpoint().to_bytes())?;
        println!(
            "seed {seed}: best epoch {} val MAE {:.6} test MAE {:.6} (HA {:.6})",
            out.history.best_epoch,
            out.history.best_val_mae(),
            out.test.aggregate.mae,
            out.ha.aggregate.mae
        );
        runs.push(RunSummary {
            seed,
            best_epoch: out.history.best_epoch,
            best_val_mae: out.history.best_val_mae(),
            test: out.test,
        });
        histories.push(out.history);
        ha.get_or_insert(out.ha);
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.test.clone()).collect();
    let (mean, std) = mean_std(&reports);
    rd.write_json("history.json", &histories)?;
    let rows = metric_rows(&["test".into()], &mean, Some(&std));
    let ha = ha.expect("at least one run");
    let mut all = rows;
    all.extend(metric_rows(&["ha".into()], &ha, Some(&mean_std(std::slice::from_ref(&ha)).1)));
    write_csv(rd, "metrics.csv", &header(&["model"], true), &all)?;
    rd.write_json(
        "metrics.json",
        &TrainMetrics {
            runs,
            mean,
            std,
            ha_baseline: ha,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    validation: EvalReport,
    test: EvalReport,
    logged_best_epoch: usize,
    logged_best_val_mae: f64,
    reproduced_val_mae: f64,
    abs_difference: f64,
}

fn load_bundle(path: &Path) -> Result<ForecastBundle, CliError> {
    Ok(ForecastBundle::load(path)?)
}

fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, rd: &mut RunDir) -> Result<(), CliError> {
    let bundle = load_bundle(checkpoint)?;
    let data = load_data(cfg)?;
    let mut exp = experiment(cfg, &data, None, bundle.seed);
    exp.model = bundle.model.config.clone();
    let prep = exp.prepare(&exp.all_observed())?;
    let bank = bundle.bank_for(&prep)?;
    let val = evaluate(&bundle.model, &prep.val, bank.as_ref(), &prep.norm, &cfg.horizons).map_err(multits_core::pipeline::PipelineError::from)?;
    let test = evaluate(&bundle.model, &prep.test, bank.as_ref(), &prep.norm, &cfg.horizons).map_err(multits_core::pipeline::PipelineError::from)?;
    let rows = forecast_rows(&bundle.model, &prep.test, bank.as_ref(), &prep.norm)?;
    write_predictions(rd, &rows, bundle.model.config.uncertainty)?;
    let mut csv_rows = metric_rows(&["validation".into()], &val, None);
    csv_rows.extend(metric_rows(&["test".into()], &test, None));
    write_csv(rd, "metrics.csv", &header(&["split"], false), &csv_rows)?;
    let out = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        abs_difference: (val.aggregate.mae - bundle.best_val_mae).abs(),
        reproduced_val_mae: val.aggregate.mae,
        logged_best_epoch: bundle.best_epoch,
        logged_best_val_mae: bundle.best_val_mae,
        validation: val,
        test,
    };
    println!(
        "validation MAE {:.9} (logged at best epoch {}: {:.9}); test MAE {:.6}",
        out.reproduced_val_mae, out.logged_best_epoch, out.logged_best_val_mae, out.test.aggregate.mae
    );
    rd.write_json("metrics.json", &out)?;
    Ok(())
}

fn write_predictions(rd: &mut RunDir, rows: &[ForecastRow], uncertainty: bool) -> Result<(), CliError> {
    let mut head = vec!["sensor_id", "anchor_t", "horizon_step", "y_true", "y_pred"];
    if uncertainty {
        head.extend(["mu", "sigma", "lo90", "hi90"]);
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.sensor_id.to_string(),
                r.anchor_t.to_string(),
                r.horizon_step.to_string(),
                opt(r.y_true),
                r.y_pred.to_string(),
            ];
            if uncertainty {
                row.extend([opt(r.mu), opt(r.sigma), opt(r.lo90), opt(r.hi90)]);
            }
            row
        })
        .collect();
    write_csv(rd, "predictions.csv", &head, &table)
}

fn forecast(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>, rd: &mut RunDir) -> Result<(), CliError> {
    let bundle = load_bundle(checkpoint)?;
    let series = match input {
        Some(p) => {
            require_file(p)?;
            load_series(p, SeriesFormat::from_path(p)).map_err(multits_core::pipeline::PipelineError::from)?
        }
        None => load_data(cfg)?.series,
    };
    let rows = bundle.forecast(&series)?;
    write_predictions(rd, &rows, bundle.model.config.uncertainty)?;
    println!("{} prediction rows", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct GridCell {
    scheme: MissingScheme,
    rate: f64,
    realized_rate: f64,
    mean: EvalReport,
    std: EvalReport,
}

fn missing(cfg: &RunConfig, lm_checkpoint: Option<&Path>, rd: &mut RunDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let lm = obtain_lm(cfg, &data, lm_checkpoint, rd)?;
    let grid = MissingGridConfig {
        schemes: cfg.missing.schemes.clone(),
        rates: cfg.missing.rates.clone(),
        block_len: cfg.missing.block_len,
        mask_seed: cfg.missing.mask_seed,
    };
    let mut per_seed = Vec::new();
    for seed in seeds(cfg) {
        per_seed.push(simulate_missing(&experiment(cfg, &data, lm.as_ref(), seed), &grid, None)?);
    }
    let cells: Vec<GridCell> = (0..per_seed[0].len())
        .map(|i| {
            let reports: Vec<EvalReport> = per_seed.iter().map(|rows| rows[i].report.clone()).collect();
            let (mean, std) = mean_std(&reports);
            let r = &per_seed[0][i];
            GridCell {
                scheme: r.scheme,
                rate: r.rate,
                realized_rate: r.realized_rate,
                mean,
                std,
            }
        })
        .collect();
    let mut rows = Vec::new();
    for c in &cells {
        let scheme = if c.rate == 0.0 { "none".to_string() } else { format!("{:?}", c.scheme).to_lowercase() };
        rows.extend(metric_rows(&[scheme, c.rate.to_string(), c.realized_rate.to_string()], &c.mean, Some(&c.std)));
        println!("{:>5} rate {:.2} (realized {:.4}): MAE {:.6}", format!("{:?}", c.scheme), c.rate, c.realized_rate, c.mean.aggregate.mae);
    }
    write_csv(rd, "missing_grid.csv", &header(&["scheme", "rate", "realized_rate"], true), &rows)?;
    rd.write_json("missing_grid.json", &cells)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationCell {
    variant: String,
    mean: EvalReport,
    std: EvalReport,
}

fn ablation(cfg: &RunConfig, variants: Option<&[String]>, lm_checkpoint: Option<&Path>, rd: &mut RunDir) -> Result<(), CliError> {
    let variants: Vec<Variant> = match variants {
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let data = load_data(cfg)?;
    let lm = obtain_lm(cfg, &data, lm_checkpoint, rd)?;
    let mut per_seed = Vec::new();
    for seed in seeds(cfg) {
        per_seed.push(ablate(&experiment(cfg, &data, lm.as_ref(), seed), &variants, None)?);
    }
    let cells: Vec<AblationCell> = (0..per_seed[0].len())
        .map(|i| {
            let reports: Vec<EvalReport> = per_seed.iter().map(|rows| rows[i].report.clone()).collect();
            let (mean, std) = mean_std(&reports);
            AblationCell {
                variant: per_seed[0][i].variant.clone(),
                mean,
                std,
            }
        })
        .collect();
    let mut rows = Vec::new();
    for c in &cells {
        rows.extend(metric_rows(std::slice::from_ref(&c.variant), &c.mean, Some(&c.std)));
        println!("{:>12}: MAE {:.6}", c.variant, c.mean.aggregate.mae);
    }
    write_csv(rd, "ablation.csv", &header(&["variant"], true), &rows)?;
    rd.write_json("ablation.json", &cells)?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    tolerance: f64,
    passed: bool,
    seconds: f64,
    modules: std::collections::BTreeMap<String, f64>,
    entries: Vec<multits_core::diagnostics::GradcheckEntry>,
}

fn gradcheck(cfg: &RunConfig, rd: &mut RunDir) -> Result<(), CliError> {
    let report = run_gradcheck(cfg.seed)?;
    let modules = report.per_module();
    for (m, err) in &modules {
        println!("{m:<28} max rel err {err:.3e} {}", if *err < GRADCHECK_TOL { "ok" } else { "FAIL" });
    }
    println!("{} tensors checked in {:.2}s", report.entries.len(), report.seconds);
    let rows: Vec<Vec<String>> = modules.iter().map(|(m, e)| vec![m.clone(), e.to_string()]).collect();
    write_csv(rd, "gradcheck.csv", &["module", "max_rel_err"], &rows)?;
    let passed = report.passed();
    rd.write_json(
        "gradcheck.json",
        &GradcheckOutput {
            tolerance: GRADCHECK_TOL,
            passed,
            seconds: report.seconds,
            modules,
            entries: report.entries.clone(),
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(report.max_error()))
    }
}

//! Command-line driver: dataset generation, station matching, the two
//! training stages, single-model baselines, metric evaluation, significance
//! tests, and the full comparison grid.
//!
//! Exit codes: 0 success, 2 argument/config error, 3 data error, 4 training
//! divergence. `METCROSS_OUT` sets the root for default output paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use metcross_core::eval::{dm_outcome, dm_test, mae_rmse, DmLoss, DmOutcome};
use metcross_core::experiment::{
    digest_json, load_city, prepare, resolve_grid, run_experiment, MetcrossVariant, RunConfig,
};
use metcross_core::framework::{train_baseline, FusionConfig, Regime};
use metcross_core::io::read_flow_csv;
use metcross_core::matching::{build_match, TransformKind};
use metcross_core::pipeline::{finetune, pretrain, MetcrossConfig, PretrainedSource};
use metcross_core::synth::{write_dataset, SynthSpec};
use metcross_core::Error;

#[derive(Parser)]
#[command(name = "metcross", version, about = "Two-city metro inflow forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic two-city dataset.
    Generate(GenerateArgs),
    /// Pair target stations with source stations by training-range similarity.
    Match(MatchArgs),
    /// Stage 1: train the source-city nets and save the checkpoint.
    Pretrain(PretrainArgs),
    /// Stage 2: train the target-city model from a source checkpoint.
    Finetune(FinetuneArgs),
    /// Train and evaluate one fusion baseline.
    Baseline(BaselineArgs),
    /// Recompute metrics from a predictions.csv.
    Evaluate(EvaluateArgs),
    /// Per-station Diebold-Mariano test between two predictions.csv files.
    Dmtest(DmtestArgs),
    /// Run the full comparison grid from a config file.
    Experiment(ExperimentArgs),
}

fn out_root() -> PathBuf {
    std::env::var_os("METCROSS_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory (default $METCROSS_OUT/data).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 115)]
    s_stations: usize,
    #[arg(long, default_value_t = 44)]
    g_stations: usize,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 10)]
    granularity: u32,
    #[arg(long, default_value_t = 6)]
    latents: usize,
    #[arg(long, default_value_t = 0.8)]
    coupling: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate dry weather (no rain episodes).
    #[arg(long)]
    no_rain: bool,
    /// Omit edge lengths from topology.csv.
    #[arg(long)]
    no_edge_lengths: bool,
    /// Also write a run-config TOML pointing at the dataset.
    #[arg(long)]
    emit_config: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    /// Source city directory (holds flow.csv).
    #[arg(long)]
    source: PathBuf,
    /// Target city directory (holds flow.csv).
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 25)]
    train_days: usize,
    #[arg(long, default_value_t = 5)]
    test_days: usize,
    /// Write the pairing CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Training hyperparameters shared by the stage subcommands.
#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value = "mlp")]
    base: String,
    #[arg(long, default_value_t = 25)]
    train_days: usize,
    #[arg(long, default_value_t = 5)]
    test_days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    emb: usize,
    #[arg(long, default_value_t = 1)]
    n_e: usize,
    #[arg(long, default_value_t = 1)]
    n_d: usize,
    #[arg(long, default_value_t = 5)]
    h: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.5)]
    w: f64,
    /// Alignment applied to frozen source embeddings: aj, we, or si.
    #[arg(long, default_value = "we")]
    align: String,
    /// Keep negative similarities when aligning with si.
    #[arg(long)]
    raw_si: bool,
    /// Drop weather and station attributes from the embedder input.
    #[arg(long)]
    no_covariates: bool,
    /// Drop the plain flow-predictor branch from the fused output.
    #[arg(long)]
    no_residual: bool,
}

impl HyperArgs {
    fn run_config(&self, data_dir: PathBuf, out_dir: PathBuf) -> Result<RunConfig, Error> {
        Ok(RunConfig {
            data_dir,
            out_dir,
            bases: vec![self.base.parse()?],
            train_days: vec![self.train_days],
            test_days: self.test_days,
            seeds: vec![self.seed],
            h: self.h,
            w: self.w,
            emb: self.emb,
            hidden: self.hidden,
            n_e: self.n_e,
            n_d: self.n_d,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            dropout: self.dropout,
            align_kind: self.align.parse()?,
            raw_si: self.raw_si,
            ..RunConfig::default()
        })
    }

    fn metcross_config(&self, cfg: &RunConfig) -> Result<MetcrossConfig, Error> {
        let variant = match (self.no_covariates, self.no_residual) {
            (true, _) => MetcrossVariant::WoEx,
            (false, true) => MetcrossVariant::WoRes,
            (false, false) => MetcrossVariant::Full,
        };
        let mut mcfg = cfg.metcross_config(cfg.bases[0], self.seed, variant);
        // The variants are one-flag ablations; honor both flags together.
        mcfg.with_covariates = !self.no_covariates;
        mcfg.with_residual = !self.no_residual;
        mcfg.validate()?;
        Ok(mcfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory holding source/ and target/.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path (default $METCROSS_OUT/pretrained.json).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset directory holding source/ and target/.
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint written by `pretrain`.
    #[arg(long)]
    pretrained: PathBuf,
    /// Output directory (default $METCROSS_OUT/finetune).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct BaselineArgs {
    /// Dataset directory holding source/ and target/.
    #[arg(long)]
    data: PathBuf,
    /// nf, df, ff, pf, ft_p, or ft_f.
    #[arg(long)]
    regime: String,
    /// aj, we, or si; required by df/ff/pf.
    #[arg(long)]
    transform: Option<String>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// predictions.csv written by a training subcommand.
    #[arg(long)]
    predictions: PathBuf,
}

#[derive(Args)]
struct DmtestArgs {
    /// predictions.csv of the candidate model.
    #[arg(long)]
    predictions_a: PathBuf,
    /// predictions.csv of the reference model.
    #[arg(long)]
    predictions_b: PathBuf,
    #[arg(long, default_value = "absolute")]
    loss: String,
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Run-config TOML; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory (default $METCROSS_OUT/runs).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated model labels.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated base kinds (mlp,lstm).
    #[arg(long, value_delimiter = ',')]
    bases: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    train_days: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Print the resolved grid without training.
    #[arg(long)]
    dry_run: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        let code = err.downcast_ref::<Error>().map_or(3, Error::exit_code);
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Match(a) => match_cities(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Dmtest(a) => dmtest_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(|| out_root().join("data"));
    let spec = SynthSpec {
        s_stations: a.s_stations,
        g_stations: a.g_stations,
        days: a.days,
        granularity_minutes: a.granularity,
        latent_profiles: a.latents,
        coupling: a.coupling,
        noise: a.noise,
        seed: a.seed,
        with_rain: !a.no_rain,
        emit_edge_lengths: !a.no_edge_lengths,
    };
    let output = write_dataset(&spec, &out).context("generating dataset")?;
    println!(
        "wrote {} source and {} target stations over {} days to {}",
        output.source.flow.stations().len(),
        output.target.flow.stations().len(),
        a.days,
        out.display()
    );
    if let Some(cfg_path) = a.emit_config {
        let cfg = RunConfig {
            data_dir: out.clone(),
            out_dir: out_root().join("runs"),
            ..RunConfig::default()
        };
        cfg.save_toml(&cfg_path)?;
        println!("wrote run config to {}", cfg_path.display());
    }
    Ok(())
}

fn match_cities(a: MatchArgs) -> anyhow::Result<()> {
    let source = read_flow_csv(&a.source.join("flow.csv"), "source")?;
    let target = read_flow_csv(&a.target.join("flow.csv"), "target")?;
    let (train, _) = target.train_test_ranges(a.train_days, a.test_days)?;
    let m = build_match(&source, &target, train)?;

    let mut rows = vec!["target_id,source_id,similarity".to_string()];
    for (g, &s) in m.pairs().iter().enumerate() {
        rows.push(format!(
            "{},{},{}",
            target.stations().ids()[g],
            source.stations().ids()[s],
            m.pair_weights()[g],
        ));
    }
    let text = rows.join("\n") + "\n";
    match a.out {
        Some(path) => {
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} pairs to {}", m.pairs().len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn stage_hash(data_dir: &Path, mcfg: &MetcrossConfig) -> anyhow::Result<String> {
    Ok(digest_json(&(data_dir.to_string_lossy(), mcfg))?)
}

fn pretrain_cmd(a: PretrainArgs) -> anyhow::Result<()> {
    let out = a.out.unwrap_or_else(|| out_root().join("pretrained.json"));
    let cfg = a.hyper.run_config(a.data.clone(), out_root())?;
    let mcfg = a.hyper.metcross_config(&cfg)?;
    let source = load_city(&a.data.join("source"), "source")?;
    let target = load_city(&a.data.join("target"), "target")?;
    let prep = prepare(&source, &target, &cfg, a.hyper.train_days)?;

    let hash = stage_hash(&a.data, &mcfg)?;
    let pre = pretrain(&prep.source_train, &mcfg, &hash).context("pre-training")?;
    pre.save(&out, mcfg.seed)?;
    let last = pre.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pre-trained {} epochs (final train MAE {last:.6}); checkpoint at {}",
        pre.epoch_losses.len(),
        out.display()
    );
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> anyhow::Result<()> {
    let out_dir = a.out_dir.unwrap_or_else(|| out_root().join("finetune"));
    let cfg = a.hyper.run_config(a.data.clone(), out_dir.clone())?;
    let mcfg = a.hyper.metcross_config(&cfg)?;
    let source = load_city(&a.data.join("source"), "source")?;
    let target = load_city(&a.data.join("target"), "target")?;
    let prep = prepare(&source, &target, &cfg, a.hyper.train_days)?;

    let a_dim = prep.source_train[0].a.ncols();
    let d_dim = prep.source_train[0].d.nrows();
    let pre = PretrainedSource::load(&a.pretrained, &mcfg, a_dim, d_dim)
        .context("loading pre-trained checkpoint")?;
    let model = finetune(&prep.source_train, &prep.target_train, &pre, &prep.m, &mcfg)
        .context("fine-tuning")?;

    let pred = prep.target_norm.invert(&model.predict(&prep.target_test, &prep.source_test)?.view())?;
    let metrics = mae_rmse(&pred.view(), &prep.actual_test.view())?;
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let hash = stage_hash(&a.data, &mcfg)?;
    write_json(
        &out_dir.join("metrics.json"),
        &serde_json::json!({
            "config_hash": hash,
            "seed": mcfg.seed,
            "model": "metcross",
            "config": mcfg,
            "metrics": metrics,
        }),
    )?;
    write_predictions(&out_dir.join("predictions.csv"), &prep, &pred)?;
    model.save(&out_dir.join("checkpoint"), mcfg.seed, &hash)?;
    println!(
        "fine-tuned; test MAE {:.6}, RMSE {:.6}; artifacts in {}",
        metrics.mae,
        metrics.rmse,
        out_dir.display()
    );
    Ok(())
}

fn baseline_cmd(a: BaselineArgs) -> anyhow::Result<()> {
    let cfg = a.hyper.run_config(a.data.clone(), out_root())?;
    let regime: Regime = a.regime.parse()?;
    let transform = a.transform.as_deref().map(|s| s.parse::<TransformKind>()).transpose()?;
    let fc = FusionConfig::new(regime, transform, cfg.bases[0])?;
    let source = load_city(&a.data.join("source"), "source")?;
    let target = load_city(&a.data.join("target"), "target")?;
    let prep = prepare(&source, &target, &cfg, a.hyper.train_days)?;

    let p = cfg.train_params(a.hyper.seed);
    let trained = train_baseline(
        &fc,
        regime.needs_source().then_some(prep.source_train.as_slice()),
        &prep.target_train,
        regime.needs_transform().then_some(&prep.m),
        cfg.raw_si,
        &p,
    )
    .with_context(|| format!("training {}", fc.label()))?;
    let pred = prep.target_norm.invert(
        &trained
            .model
            .predict(
                &prep.target_test,
                trained.model.needs_source().then_some(prep.source_test.as_slice()),
            )?
            .view(),
    )?;
    let metrics = mae_rmse(&pred.view(), &prep.actual_test.view())?;
    let report = serde_json::json!({
        "model": fc.label(),
        "base": cfg.bases[0].to_string(),
        "train_days": a.hyper.train_days,
        "seed": a.hyper.seed,
        "metrics": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = a.out {
        write_json(&path, &report)?;
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let (pred, actual, _) = read_predictions(&a.predictions)?;
    let metrics = mae_rmse(&pred.view(), &actual.view())?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn dmtest_cmd(a: DmtestArgs) -> anyhow::Result<()> {
    let loss: DmLoss = a.loss.parse()?;
    let (pred_a, actual_a, ids) = read_predictions(&a.predictions_a)?;
    let (pred_b, actual_b, ids_b) = read_predictions(&a.predictions_b)?;
    if ids != ids_b || actual_a != actual_b {
        return Err(Error::Data(
            "prediction files disagree on stations, steps, or actual values".into(),
        )
        .into());
    }

    let mut rows = Vec::with_capacity(ids.len());
    let mut better = 0usize;
    let mut worse = 0usize;
    for (g, id) in ids.iter().enumerate() {
        let ea: Vec<f64> = (0..pred_a.ncols()).map(|j| pred_a[[g, j]] - actual_a[[g, j]]).collect();
        let eb: Vec<f64> = (0..pred_b.ncols()).map(|j| pred_b[[g, j]] - actual_b[[g, j]]).collect();
        let (stat, p) = dm_test(&ea, &eb, loss, a.horizon)?;
        let outcome = dm_outcome(stat, p, a.alpha);
        match outcome {
            DmOutcome::ModelBetter => better += 1,
            DmOutcome::BaselineBetter => worse += 1,
            DmOutcome::Inconclusive => {}
        }
        rows.push(serde_json::json!({
            "station_id": id,
            "dm": stat,
            "p": p,
            "outcome": outcome.as_str(),
        }));
    }
    let report = serde_json::json!({
        "a_better": better,
        "b_better": worse,
        "inconclusive": ids.len() - better - worse,
        "stations": rows,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load_toml(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.data_dir {
        cfg.data_dir = v;
    }
    cfg.out_dir = match a.out_dir {
        Some(v) => v,
        None if a.config.is_none() => out_root().join("runs"),
        None => cfg.out_dir,
    };
    if let Some(v) = a.models {
        cfg.models = v;
    }
    if let Some(v) = a.bases {
        cfg.bases = v.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?;
    }
    if let Some(v) = a.train_days {
        cfg.train_days = v;
    }
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }

    if a.dry_run {
        let cells = resolve_grid(&cfg)?;
        for cell in &cells {
            println!("{cell}");
        }
        println!("{} cells", cells.len());
        return Ok(());
    }
    let summary = run_experiment(&cfg).context("running experiment grid")?;
    println!("{} cells -> {}", summary.cells, summary.out_dir.display());
    for row in &summary.rows {
        let boost = row
            .boost_mae
            .map(|b| format!(" boost {b:+.3}%"))
            .unwrap_or_default();
        println!(
            "{} train{}d {}: MAE {:.6} RMSE {:.6}{boost}",
            row.base, row.train_days, row.model, row.mae, row.rmse
        );
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_predictions(
    path: &Path,
    prep: &metcross_core::experiment::Prepared,
    pred: &ndarray::Array2<f64>,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station_id", "step", "prediction", "actual"])?;
    for (g, id) in prep.target_ids.iter().enumerate() {
        for (j, &step) in prep.test_steps.iter().enumerate() {
            w.write_record([
                id.as_str(),
                &step.to_string(),
                &format!("{}", pred[[g, j]]),
                &format!("{}", prep.actual_test[[g, j]]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a predictions.csv back into [stations x steps] matrices. Rows must
/// form a complete grid in station-major order.
fn read_predictions(
    path: &Path,
) -> anyhow::Result<(ndarray::Array2<f64>, ndarray::Array2<f64>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut per_station: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Data(format!(
                "{}: expected 4 columns, got {}",
                path.display(),
                record.len()
            ))
            .into());
        }
        let id = record[0].to_string();
        let parse = |i: usize| -> anyhow::Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
        };
        if !per_station.contains_key(&id) {
            order.push(id.clone());
        }
        per_station.entry(id).or_default().push((parse(2)?, parse(3)?));
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{}: no prediction rows", path.display())).into());
    }
    let steps = per_station[&order[0]].len();
    if per_station.values().any(|v| v.len() != steps) {
        return Err(Error::Data(format!(
            "{}: stations have unequal step counts",
            path.display()
        ))
        .into());
    }
    let mut pred = ndarray::Array2::zeros((order.len(), steps));
    let mut actual = ndarray::Array2::zeros((order.len(), steps));
    for (g, id) in order.iter().enumerate() {
        for (j, &(p, a)) in per_station[id].iter().enumerate() {
            pred[[g, j]] = p;
            actual[[g, j]] = a;
        }
    }
    Ok((pred, actual, order))
}

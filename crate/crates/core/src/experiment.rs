//! Comparative experiment runner. Loads two city directories, prepares
//! normalized train/test features per training length, trains every selected
//! model x base x seed cell, and writes per-cell artifacts plus summary
//! tables.
//!
//! Leakage discipline: normalizers, station matches, and all training see
//! only the training range; test bundles exist as a separate handle that is
//! first read at prediction time. All metrics are computed on de-normalized
//! values.
//!
//! Determinism: every training run is seeded, cells execute in a fixed
//! order, and floats are serialized in shortest round-trip form, so a rerun
//! with an identical config reproduces every output file byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariates::{assemble_static_vectors, MetroGraph};
use crate::data::{
    build_feature_bundles, CovariatePanel, FeatureBundle, FlowPanel, NormKind, Normalizer,
    WindowSpec,
};
use crate::error::{Error, Result};
use crate::eval::{best_station_counts, boost, dm_grid_mode, mae_rmse_mode, DmLoss, MetricSet};
use crate::exec::ExecMode;
use crate::framework::{train_baseline, FusionConfig, Regime};
use crate::io::{load_city_dir, read_scalars_json, SCALARS_FILE};
use crate::matching::{build_match, StationMatch, TransformKind};
use crate::nn::{BaseKind, Checkpoint};
use crate::pipeline::{finetune, pretrain, MetcrossConfig, PretrainedSource};
use crate::trainer::TrainParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetcrossVariant {
    Full,
    /// No weather-driven dynamic covariates and no static attributes in the
    /// embedder input.
    WoEx,
    /// No plain flow-predictor branch added to the fused output.
    WoRes,
}

/// One column of the comparison grid, parsed from its label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelSpec {
    Baseline {
        regime: Regime,
        transform: Option<TransformKind>,
    },
    Metcross(MetcrossVariant),
}

impl ModelSpec {
    pub fn parse(label: &str) -> Result<Self> {
        let norm = label.to_ascii_lowercase().replace('-', "_");
        let spec = match norm.as_str() {
            "nf" => ModelSpec::Baseline { regime: Regime::Nf, transform: None },
            "ft_p" => ModelSpec::Baseline { regime: Regime::FtP, transform: None },
            "ft_f" => ModelSpec::Baseline { regime: Regime::FtF, transform: None },
            "metcross" => ModelSpec::Metcross(MetcrossVariant::Full),
            "metcross_wo_ex" => ModelSpec::Metcross(MetcrossVariant::WoEx),
            "metcross_wo_res" => ModelSpec::Metcross(MetcrossVariant::WoRes),
            other => {
                let (regime, kind) = other.split_once('_').ok_or_else(|| unknown_model(label))?;
                let regime = match regime {
                    "df" => Regime::Df,
                    "ff" => Regime::Ff,
                    "pf" => Regime::Pf,
                    _ => return Err(unknown_model(label)),
                };
                let kind = match kind {
                    "aj" => TransformKind::Aj,
                    "we" => TransformKind::We,
                    "si" => TransformKind::Si,
                    _ => return Err(unknown_model(label)),
                };
                ModelSpec::Baseline { regime, transform: Some(kind) }
            }
        };
        Ok(spec)
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::Baseline { regime, transform: Some(k) } => format!("{regime}_{k}"),
            ModelSpec::Baseline { regime, transform: None } => regime.to_string(),
            ModelSpec::Metcross(MetcrossVariant::Full) => "metcross".into(),
            ModelSpec::Metcross(MetcrossVariant::WoEx) => "metcross_wo_ex".into(),
            ModelSpec::Metcross(MetcrossVariant::WoRes) => "metcross_wo_res".into(),
        }
    }
}

fn unknown_model(label: &str) -> Error {
    Error::Config(format!(
        "unknown model {label:?}; valid: {} and metcross ablations metcross_wo_ex, metcross_wo_res",
        default_models().join(", ")
    ))
}

/// The thirteen comparison columns: twelve fusion baselines plus the full
/// transfer pipeline.
pub fn default_models() -> Vec<String> {
    let mut labels: Vec<String> = FusionConfig::grid(BaseKind::Mlp)
        .iter()
        .map(FusionConfig::label)
        .collect();
    labels.push("metcross".into());
    labels
}

fn default_bases() -> Vec<BaseKind> {
    vec![BaseKind::Mlp, BaseKind::Lstm]
}

fn default_train_days() -> Vec<usize> {
    vec![25, 7, 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding `source/` and `target/` city subdirectories.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub models: Vec<String>,
    pub bases: Vec<BaseKind>,
    pub train_days: Vec<usize>,
    /// The final days of the panel, used only for evaluation.
    pub test_days: usize,
    pub seeds: Vec<u64>,
    pub h: usize,
    pub w: f64,
    pub emb: usize,
    pub hidden: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub align_kind: TransformKind,
    pub raw_si: bool,
    pub dm_alpha: f64,
    pub dm_horizon: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            models: default_models(),
            bases: default_bases(),
            train_days: default_train_days(),
            test_days: 5,
            seeds: vec![0],
            h: 5,
            w: 0.5,
            emb: 128,
            hidden: 128,
            n_e: 1,
            n_d: 1,
            epochs: 100,
            batch: 256,
            lr: 0.001,
            dropout: 0.0,
            align_kind: TransformKind::We,
            raw_si: false,
            dm_alpha: 0.05,
            dm_horizon: 1,
        }
    }
}

impl RunConfig {
    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.bases.is_empty() || self.train_days.is_empty() {
            return Err(Error::Config("models, bases, and train_days must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for label in &self.models {
            ModelSpec::parse(label)?;
            if !seen.insert(label.clone()) {
                return Err(Error::Config(format!("model {label} listed twice")));
            }
        }
        if self.train_days.iter().any(|&d| d == 0) || self.test_days == 0 {
            return Err(Error::Config("train_days and test_days must be positive".into()));
        }
        if !(self.dm_alpha > 0.0 && self.dm_alpha < 1.0) {
            return Err(Error::Config(format!("dm_alpha {} outside (0, 1)", self.dm_alpha)));
        }
        // Hyperparameters are shared by both kinds of training config;
        // validating probes catches bad values once, up front.
        self.metcross_config(self.bases[0], self.seeds[0], MetcrossVariant::Full).validate()?;
        self.train_params(self.seeds[0]).validate()?;
        Ok(())
    }

    pub fn train_params(&self, seed: u64) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            hidden: self.hidden,
            dropout: self.dropout,
            seed,
        }
    }

    pub fn metcross_config(&self, base: BaseKind, seed: u64, variant: MetcrossVariant) -> MetcrossConfig {
        MetcrossConfig {
            w: self.w,
            emb: self.emb,
            n_e: self.n_e,
            n_d: self.n_d,
            h: self.h,
            base_kind: base,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            hidden: self.hidden,
            dropout: self.dropout,
            with_residual: variant != MetcrossVariant::WoRes,
            with_covariates: variant != MetcrossVariant::WoEx,
            align_kind: self.align_kind,
            raw_si: self.raw_si,
            seed,
        }
    }
}

/// Identity of one grid cell, embedded in every file the cell writes. The
/// hash of this structure is the cell's config hash: equal hashes mean the
/// same data directory, hyperparameters, and cell coordinates, hence equal
/// result files.
#[derive(Clone, Debug, Serialize)]
pub struct CellConfig {
    pub data_dir: PathBuf,
    pub model: String,
    pub base: String,
    pub train_days: usize,
    pub test_days: usize,
    pub seed: u64,
    pub h: usize,
    pub w: f64,
    pub emb: usize,
    pub hidden: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub align_kind: TransformKind,
    pub raw_si: bool,
}

impl CellConfig {
    fn new(cfg: &RunConfig, model: &str, base: BaseKind, train_days: usize, seed: u64) -> Self {
        CellConfig {
            data_dir: cfg.data_dir.clone(),
            model: model.to_string(),
            base: base.to_string(),
            train_days,
            test_days: cfg.test_days,
            seed,
            h: cfg.h,
            w: cfg.w,
            emb: cfg.emb,
            hidden: cfg.hidden,
            n_e: cfg.n_e,
            n_d: cfg.n_d,
            epochs: cfg.epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            dropout: cfg.dropout,
            align_kind: cfg.align_kind,
            raw_si: cfg.raw_si,
        }
    }

    pub fn hash(&self) -> Result<String> {
        digest_json(self)
    }
}

/// Hex sha256 of a value's JSON form; stamps result files with the
/// configuration that produced them.
pub fn digest_json<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// One loaded city: flow panel, weather covariates on the flow clock, and
/// the raw station-attribute matrix.
pub struct CityData {
    pub flow: FlowPanel,
    pub dynamics: CovariatePanel,
    pub statics_raw: Array2<f64>,
}

pub fn load_city(dir: &Path, city: &str) -> Result<CityData> {
    let cd = load_city_dir(dir, city)?;
    let scalars = read_scalars_json(&dir.join(SCALARS_FILE))?;
    let graph = MetroGraph::from_topology(cd.flow.stations().clone(), &cd.topology)?;
    let statics_raw = assemble_static_vectors(&graph, &cd.poi, &cd.attrs, &scalars)?;
    let dynamics = cd.weather.to_panel(&cd.flow)?;
    Ok(CityData { flow: cd.flow, dynamics, statics_raw })
}

/// Train/test features for one training length. Normalizers and the station
/// match are fitted on the training range only.
pub struct Prepared {
    pub source_train: Vec<FeatureBundle>,
    pub source_test: Vec<FeatureBundle>,
    pub target_train: Vec<FeatureBundle>,
    pub target_test: Vec<FeatureBundle>,
    pub m: StationMatch,
    pub target_norm: Normalizer,
    /// Original-scale target flows over the test range, [G x T'].
    pub actual_test: Array2<f64>,
    pub target_ids: Vec<String>,
    pub test_steps: Vec<usize>,
}

struct CityPrepared {
    train: Vec<FeatureBundle>,
    test: Vec<FeatureBundle>,
    norm: Normalizer,
    norm_flow: FlowPanel,
}

fn prepare_city(
    city: &CityData,
    train: std::ops::Range<usize>,
    test: std::ops::Range<usize>,
    h: usize,
) -> Result<CityPrepared> {
    let norm = Normalizer::fit_rows(NormKind::MinMax, &city.flow.values().view(), train.clone())?;
    let norm_flow = city.flow.with_values(norm.transform(&city.flow.values().view())?)?;

    let stat_norm = Normalizer::fit_cols(NormKind::MinMax, &city.statics_raw.view())?;
    let statics = Arc::new(stat_norm.transform(&city.statics_raw.view())?);

    let dyn_norm = Normalizer::fit_rows(NormKind::MinMax, &city.dynamics.values().view(), train.clone())?;
    let dynamics = city.dynamics.with_values(dyn_norm.transform(&city.dynamics.values().view())?)?;

    let spec = WindowSpec::new(h)?;
    let train_targets = train.start.max(h)..train.end;
    let train_bundles = build_feature_bundles(&norm_flow, &dynamics, &statics, spec, train_targets)?;
    let test_bundles = build_feature_bundles(&norm_flow, &dynamics, &statics, spec, test)?;
    Ok(CityPrepared { train: train_bundles, test: test_bundles, norm, norm_flow })
}

pub fn prepare(source: &CityData, target: &CityData, cfg: &RunConfig, train_days: usize) -> Result<Prepared> {
    if source.flow.n_steps() != target.flow.n_steps()
        || source.flow.granularity_min() != target.flow.granularity_min()
        || source.flow.start() != target.flow.start()
    {
        return Err(Error::Alignment(
            "source and target panels must share start, granularity, and step count".into(),
        ));
    }
    let (train, test) = target.flow.train_test_ranges(train_days, cfg.test_days)?;

    let s = prepare_city(source, train.clone(), test.clone(), cfg.h)?;
    let g = prepare_city(target, train.clone(), test.clone(), cfg.h)?;
    let m = build_match(&s.norm_flow, &g.norm_flow, train)?;

    let actual_test = target
        .flow
        .values()
        .slice(ndarray::s![.., test.start..test.end])
        .to_owned();
    Ok(Prepared {
        source_train: s.train,
        source_test: s.test,
        target_train: g.train,
        target_test: g.test,
        m,
        target_norm: g.norm,
        actual_test,
        target_ids: target.flow.stations().ids().to_vec(),
        test_steps: test.collect(),
    })
}

/// Trained-cell products: de-normalized predictions and the parameter
/// checkpoint serializer.
struct CellProduct {
    pred: Array2<f64>,
    write_checkpoint: Box<dyn FnMut(&Path, u64, &str) -> Result<()>>,
}

/// Source pre-training is shared: the full pipeline and the no-residual
/// ablation reuse one checkpoint; the no-covariates ablation needs its own.
#[derive(Default)]
struct PretrainSlots {
    with_cov: Option<PretrainedSource>,
    without_cov: Option<PretrainedSource>,
}

impl PretrainSlots {
    /// The covariate flag changes the embedder's input width, so the two
    /// ablation families cannot share a checkpoint.
    fn get(
        &mut self,
        source_train: &[FeatureBundle],
        mcfg: &MetcrossConfig,
        hash: &str,
    ) -> Result<&PretrainedSource> {
        let slot = if mcfg.with_covariates { &mut self.with_cov } else { &mut self.without_cov };
        if slot.is_none() {
            *slot = Some(pretrain(source_train, mcfg, hash)?);
        }
        Ok(slot.as_ref().expect("just filled"))
    }
}

fn run_cell(
    spec: ModelSpec,
    base: BaseKind,
    seed: u64,
    cfg: &RunConfig,
    prep: &Prepared,
    slots: &mut PretrainSlots,
    cell_hash: &str,
) -> Result<CellProduct> {
    match spec {
        ModelSpec::Baseline { regime, transform } => {
            let fc = FusionConfig::new(regime, transform, base)?;
            let p = cfg.train_params(seed);
            let needs_source = regime.needs_source();
            let trained = train_baseline(
                &fc,
                needs_source.then_some(prep.source_train.as_slice()),
                &prep.target_train,
                trained_match(regime, prep),
                cfg.raw_si,
                &p,
            )?;
            let pred = trained.model.predict(
                &prep.target_test,
                trained.model.needs_source().then_some(prep.source_test.as_slice()),
            )?;
            let mut model = trained.model;
            Ok(CellProduct {
                pred,
                write_checkpoint: Box::new(move |path, seed, hash| {
                    Checkpoint::capture(&mut model, seed, hash).save(path)
                }),
            })
        }
        ModelSpec::Metcross(variant) => {
            let mcfg = cfg.metcross_config(base, seed, variant);
            let pre = slots.get(&prep.source_train, &mcfg, cell_hash)?;
            let model = finetune(&prep.source_train, &prep.target_train, pre, &prep.m, &mcfg)?;
            let pred = model.predict(&prep.target_test, &prep.source_test)?;
            let mut model = model;
            Ok(CellProduct {
                pred,
                write_checkpoint: Box::new(move |path, seed, hash| {
                    Checkpoint::capture(&mut model, seed, hash).save(path)
                }),
            })
        }
    }
}

fn trained_match(regime: Regime, prep: &Prepared) -> Option<&StationMatch> {
    regime.needs_transform().then_some(&prep.m)
}

#[derive(Clone, Debug, Serialize)]
pub struct SummaryRow {
    pub base: String,
    pub train_days: usize,
    pub model: String,
    /// Means across seeds, original scale.
    pub mae: f64,
    pub rmse: f64,
    /// Error reduction relative to the same base and length's NF column,
    /// absent when NF is not in the grid.
    pub boost_mae: Option<f64>,
    pub boost_rmse: Option<f64>,
}

pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
    pub cells: usize,
    pub out_dir: PathBuf,
}

/// Cell directories in execution order.
pub fn resolve_grid(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &train_days in &cfg.train_days {
        for &base in &cfg.bases {
            for &seed in &cfg.seeds {
                for label in &cfg.models {
                    out.push(cell_dir_name(train_days, base, label, seed));
                }
            }
        }
    }
    Ok(out)
}

fn cell_dir_name(train_days: usize, base: BaseKind, label: &str, seed: u64) -> String {
    format!("train{train_days}d/{base}/{label}/seed{seed}")
}

#[derive(Serialize)]
struct CellReport<'a> {
    config_hash: &'a str,
    seed: u64,
    model: &'a str,
    base: &'a str,
    train_days: usize,
    test_range: &'a str,
    config: &'a CellConfig,
    metrics: &'a MetricSet,
}

struct CellOutcome {
    metrics: MetricSet,
    errors: Array2<f64>,
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let source = load_city(&cfg.data_dir.join("source"), "source")?;
    let target = load_city(&cfg.data_dir.join("target"), "target")?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io_at(&cfg.out_dir, e))?;
    cfg.save_toml(&cfg.out_dir.join("run_config.toml"))?;

    let mode = ExecMode::default();
    let mut summary_rows: Vec<SummaryRow> = Vec::new();
    let mut dm_rows: Vec<Vec<String>> = Vec::new();
    let mut best_rows: Vec<Vec<String>> = Vec::new();
    let mut cells = 0usize;

    for &train_days in &cfg.train_days {
        let prep = prepare(&source, &target, cfg, train_days)?;
        let test_range = format!(
            "steps {}..{} (last {} days)",
            prep.test_steps.first().expect("non-empty test range"),
            prep.test_steps.last().expect("non-empty test range") + 1,
            cfg.test_days,
        );
        for &base in &cfg.bases {
            // label -> per-seed outcomes, in cfg.models / cfg.seeds order.
            let mut group: BTreeMap<String, Vec<CellOutcome>> = BTreeMap::new();
            for &seed in &cfg.seeds {
                let mut slots = PretrainSlots::default();
                for label in &cfg.models {
                    let spec = ModelSpec::parse(label)?;
                    let cell = CellConfig::new(cfg, label, base, train_days, seed);
                    let hash = cell.hash()?;
                    let mut product = run_cell(spec, base, seed, cfg, &prep, &mut slots, &hash)
                        .map_err(|e| {
                            Error::Data(format!(
                                "cell {} (hash {hash}): {e}",
                                cell_dir_name(train_days, base, label, seed)
                            ))
                        })?;
                    let pred = prep.target_norm.invert(&product.pred.view())?;
                    let metrics = mae_rmse_mode(&pred.view(), &prep.actual_test.view(), mode)?;
                    let errors = &pred - &prep.actual_test;

                    let dir = cfg.out_dir.join(cell_dir_name(train_days, base, label, seed));
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
                    write_metrics_json(
                        &dir.join("metrics.json"),
                        &CellReport {
                            config_hash: &hash,
                            seed,
                            model: label,
                            base: &base.to_string(),
                            train_days,
                            test_range: &test_range,
                            config: &cell,
                            metrics: &metrics,
                        },
                    )?;
                    write_predictions_csv(&dir.join("predictions.csv"), &pred, &prep)?;
                    (product.write_checkpoint)(&dir.join("checkpoint"), seed, &hash)?;

                    group.entry(label.clone()).or_default().push(CellOutcome { metrics, errors });
                    cells += 1;
                }
            }
            summarize_group(cfg, train_days, base, &group, &mut summary_rows)?;
            dm_and_best_rows(cfg, train_days, base, &group, mode, &mut dm_rows, &mut best_rows, &prep)?;
        }
    }

    write_summary_csv(&cfg.out_dir.join("summary.csv"), &summary_rows)?;
    for &base in &cfg.bases {
        write_table4_csv(cfg, base, &summary_rows)?;
    }
    write_rows_csv(
        &cfg.out_dir.join("dm_grid.csv"),
        &["base", "train_days", "seed", "baseline", "station_id", "outcome"],
        &dm_rows,
    )?;
    write_rows_csv(
        &cfg.out_dir.join("best_station.csv"),
        &["base", "train_days", "seed", "metric", "model", "count"],
        &best_rows,
    )?;

    Ok(RunSummary { rows: summary_rows, cells, out_dir: cfg.out_dir.clone() })
}

fn summarize_group(
    cfg: &RunConfig,
    train_days: usize,
    base: BaseKind,
    group: &BTreeMap<String, Vec<CellOutcome>>,
    rows: &mut Vec<SummaryRow>,
) -> Result<()> {
    let mean_of = |label: &str| -> Option<(f64, f64)> {
        let outcomes = group.get(label)?;
        let n = outcomes.len() as f64;
        Some((
            outcomes.iter().map(|o| o.metrics.mae).sum::<f64>() / n,
            outcomes.iter().map(|o| o.metrics.rmse).sum::<f64>() / n,
        ))
    };
    let nf = mean_of("nf");
    for label in &cfg.models {
        let (mae, rmse) = mean_of(label).expect("every selected model ran");
        let (boost_mae, boost_rmse) = match nf {
            Some((nf_mae, nf_rmse)) => (Some(boost(nf_mae, mae)?), Some(boost(nf_rmse, rmse)?)),
            None => (None, None),
        };
        rows.push(SummaryRow {
            base: base.to_string(),
            train_days,
            model: label.clone(),
            mae,
            rmse,
            boost_mae,
            boost_rmse,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dm_and_best_rows(
    cfg: &RunConfig,
    train_days: usize,
    base: BaseKind,
    group: &BTreeMap<String, Vec<CellOutcome>>,
    mode: ExecMode,
    dm_rows: &mut Vec<Vec<String>>,
    best_rows: &mut Vec<Vec<String>>,
    prep: &Prepared,
) -> Result<()> {
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        // Best-station counts over both metrics, in model order.
        for metric in ["mae", "rmse"] {
            let per_model: Vec<Vec<f64>> = cfg
                .models
                .iter()
                .map(|label| {
                    let o = &group[label][si];
                    if metric == "mae" {
                        o.metrics.per_station_mae.clone()
                    } else {
                        o.metrics.per_station_rmse.clone()
                    }
                })
                .collect();
            let counts = best_station_counts(&per_model)?;
            for (label, count) in cfg.models.iter().zip(counts) {
                best_rows.push(vec![
                    base.to_string(),
                    train_days.to_string(),
                    seed.to_string(),
                    metric.to_string(),
                    label.clone(),
                    count.to_string(),
                ]);
            }
        }

        // Significance grid: the full pipeline against every other column.
        if !group.contains_key("metcross") {
            continue;
        }
        let model_errors = &group["metcross"][si].errors;
        let baselines: Vec<(String, Array2<f64>)> = cfg
            .models
            .iter()
            .filter(|l| l.as_str() != "metcross")
            .map(|l| (l.clone(), group[l][si].errors.clone()))
            .collect();
        if baselines.is_empty() {
            continue;
        }
        let grid = dm_grid_mode(
            &model_errors.view(),
            &baselines,
            DmLoss::Absolute,
            cfg.dm_horizon,
            cfg.dm_alpha,
            mode,
        )?;
        for (baseline, outcomes) in grid {
            for (g, outcome) in outcomes.iter().enumerate() {
                dm_rows.push(vec![
                    base.to_string(),
                    train_days.to_string(),
                    seed.to_string(),
                    baseline.clone(),
                    prep.target_ids[g].clone(),
                    outcome.as_str().to_string(),
                ]);
            }
        }
    }
    Ok(())
}

fn write_metrics_json(path: &Path, report: &CellReport<'_>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_predictions_csv(path: &Path, pred: &Array2<f64>, prep: &Prepared) -> Result<()> {
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

fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["base", "train_days", "model", "mae", "rmse", "boost_mae", "boost_rmse"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.base.as_str(),
            &r.train_days.to_string(),
            &r.model,
            &format!("{}", r.mae),
            &format!("{}", r.rmse),
            &opt(r.boost_mae),
            &opt(r.boost_rmse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wide comparison table for one base kind: a row per (train length, metric),
/// a column per model, and the full pipeline's boost over NF when both ran.
fn write_table4_csv(cfg: &RunConfig, base: BaseKind, rows: &[SummaryRow]) -> Result<()> {
    let path = cfg.out_dir.join(format!("table_{base}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["train_days".to_string(), "metric".to_string()];
    header.extend(cfg.models.iter().cloned());
    header.push("boost".into());
    w.write_record(&header)?;

    let find = |train_days: usize, label: &str| -> Option<&SummaryRow> {
        rows.iter().find(|r| {
            r.base == base.to_string() && r.train_days == train_days && r.model == label
        })
    };
    for &train_days in &cfg.train_days {
        for metric in ["mae", "rmse"] {
            let mut record = vec![train_days.to_string(), metric.to_string()];
            for label in &cfg.models {
                let r = find(train_days, label).expect("summary covers the grid");
                let v = if metric == "mae" { r.mae } else { r.rmse };
                record.push(format!("{v}"));
            }
            let boost_cell = find(train_days, "metcross")
                .and_then(|r| if metric == "mae" { r.boost_mae } else { r.boost_rmse })
                .map(|b| format!("{b}"))
                .unwrap_or_default();
            record.push(boost_cell);
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_rows_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

//! Cross-city fusion baselines over a shared base predictor. Five regimes:
//! target-only training, input-level fusion (transformed source windows added
//! to target windows), feature-level fusion (concatenated embeddings),
//! prediction-level fusion (learned per-station affine merge of a frozen
//! source predictor and a target predictor), and transfer by initializing
//! from a source-trained model with selective fine-tuning.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::matching::{StationMatch, TransformKind};
use crate::nn::params::join;
use crate::nn::{mae_loss, Adam, BaseKind, Dense, FeatureCache, FeatureNetwork, Params};
use crate::trainer::{check_paired, require_bundles, shuffled_batches, EpochAccum, TrainParams};

pub(crate) fn check_match_dims(m: &StationMatch, n_source: usize, n_target: usize) -> Result<()> {
    if m.n_source() != n_source || m.n_target() != n_target {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "match over {} source x {} target stations",
                m.n_source(),
                m.n_target()
            ),
            got: format!("bundles with {n_source} source x {n_target} target stations"),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Nf,
    Df,
    Ff,
    Pf,
    FtP,
    FtF,
}

impl Regime {
    pub fn needs_transform(self) -> bool {
        matches!(self, Regime::Df | Regime::Ff | Regime::Pf)
    }

    pub fn needs_source(self) -> bool {
        !matches!(self, Regime::Nf)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Nf => "nf",
            Regime::Df => "df",
            Regime::Ff => "ff",
            Regime::Pf => "pf",
            Regime::FtP => "ft_p",
            Regime::FtF => "ft_f",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nf" => Ok(Regime::Nf),
            "df" => Ok(Regime::Df),
            "ff" => Ok(Regime::Ff),
            "pf" => Ok(Regime::Pf),
            "ft_p" => Ok(Regime::FtP),
            "ft_f" => Ok(Regime::FtF),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (nf|df|ff|pf|ft_p|ft_f)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub regime: Regime,
    /// Required for the fusing regimes, absent for NF and fine-tuning.
    pub transform_kind: Option<TransformKind>,
    pub base_kind: BaseKind,
}

impl FusionConfig {
    pub fn new(regime: Regime, transform_kind: Option<TransformKind>, base_kind: BaseKind) -> Result<Self> {
        let cfg = FusionConfig { regime, transform_kind, base_kind };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.regime.needs_transform(), self.transform_kind) {
            (true, None) => Err(Error::Config(format!(
                "regime {} requires a transform kind",
                self.regime
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "regime {} takes no transform kind",
                self.regime
            ))),
            _ => Ok(()),
        }
    }

    /// Column label, e.g. "nf", "df_aj", "ft_p".
    pub fn label(&self) -> String {
        match self.transform_kind {
            Some(k) => format!("{}_{}", self.regime, k),
            None => self.regime.to_string(),
        }
    }

    /// The twelve baseline columns for one base kind: NF, DF/FF/PF across the
    /// three transforms, and the two fine-tuning variants.
    pub fn grid(base_kind: BaseKind) -> Vec<FusionConfig> {
        let mut out = vec![FusionConfig { regime: Regime::Nf, transform_kind: None, base_kind }];
        for regime in [Regime::Df, Regime::Ff, Regime::Pf] {
            for kind in [TransformKind::Aj, TransformKind::We, TransformKind::Si] {
                out.push(FusionConfig { regime, transform_kind: Some(kind), base_kind });
            }
        }
        out.push(FusionConfig { regime: Regime::FtP, transform_kind: None, base_kind });
        out.push(FusionConfig { regime: Regime::FtF, transform_kind: None, base_kind });
        out
    }
}

/// Feature extractor plus a linear prediction head: the unit every regime
/// trains or transfers.
#[derive(Clone, Debug)]
pub struct BasePredictor {
    pub feature: FeatureNetwork,
    pub head: Dense,
}

/// Forward state needed to run the backward pass.
pub struct BaseCache {
    feat: FeatureCache,
    hidden: Array2<f64>,
}

impl BasePredictor {
    pub fn new(
        kind: BaseKind,
        input_dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(BasePredictor {
            feature: FeatureNetwork::new(kind, input_dim, hidden, hidden, dropout, rng)?,
            head: Dense::new(hidden, 1, rng),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.feature.in_dim()
    }

    pub fn forward(&self, x: &ndarray::ArrayView2<f64>) -> Result<(Array2<f64>, BaseCache)> {
        let (hidden, feat) = self.feature.forward(x)?;
        let pred = self.head.forward(&hidden.view())?;
        Ok((pred, BaseCache { feat, hidden }))
    }

    pub fn forward_train(
        &self,
        x: &ndarray::ArrayView2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<f64>, BaseCache)> {
        let (hidden, feat) = self.feature.forward_train(x, rng)?;
        let pred = self.head.forward(&hidden.view())?;
        Ok((pred, BaseCache { feat, hidden }))
    }

    pub fn backward(&mut self, cache: &BaseCache, grad_pred: &ndarray::ArrayView2<f64>) -> Result<Array2<f64>> {
        let dh = self.head.backward(&cache.hidden.view(), grad_pred)?;
        self.feature.backward(&cache.feat, &dh.view())
    }
}

impl Params for BasePredictor {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.feature.visit(&join(prefix, "feature"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Subset {
    All,
    HeadOnly,
    FeatureOnly,
}

/// Restricts which parameters the optimizer sees; gradients are still
/// computed for everything, the frozen part just never moves.
struct SubsetView<'a> {
    net: &'a mut BasePredictor,
    subset: Subset,
}

impl Params for SubsetView<'_> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        match self.subset {
            Subset::All => self.net.visit(prefix, f),
            Subset::HeadOnly => self.net.head.visit(&join(prefix, "head"), f),
            Subset::FeatureOnly => self.net.feature.visit(&join(prefix, "feature"), f),
        }
    }
}

fn stack_chunk(
    bundles: &[FeatureBundle],
    inputs: Option<&[Array2<f64>]>,
    idxs: &[usize],
) -> (Array2<f64>, Array2<f64>) {
    let row_of = |i: usize| -> &Array2<f64> {
        match inputs {
            Some(v) => &v[i],
            None => &bundles[i].l,
        }
    };
    let n = row_of(idxs[0]).nrows();
    let width = row_of(idxs[0]).ncols();
    let mut x = Array2::zeros((idxs.len() * n, width));
    let mut y = Array2::zeros((idxs.len() * n, 1));
    for (bi, &idx) in idxs.iter().enumerate() {
        x.slice_mut(s![bi * n..(bi + 1) * n, ..]).assign(row_of(idx));
        for st in 0..n {
            y[[bi * n + st, 0]] = bundles[idx].target[st];
        }
    }
    (x, y)
}

/// Epoch loop shared by the plain regimes: MAE on stacked rows, Adam on the
/// chosen parameter subset. Returns per-epoch mean training loss.
fn run_base_training(
    net: &mut BasePredictor,
    bundles: &[FeatureBundle],
    inputs: Option<&[Array2<f64>]>,
    subset: Subset,
    p: &TrainParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(p.lr);
    let mut epoch_losses = Vec::with_capacity(p.epochs);
    for _ in 0..p.epochs {
        let mut acc = EpochAccum::default();
        for chunk in shuffled_batches(rng, bundles.len(), p.batch) {
            let (x, y) = stack_chunk(bundles, inputs, &chunk);
            let (pred, cache) = net.forward_train(&x.view(), rng)?;
            let (loss, grad) = mae_loss(&pred.view(), &y.view())?;
            net.zero_grads();
            net.backward(&cache, &grad.view())?;
            adam.step(&mut SubsetView { net, subset })?;
            acc.add(loss, x.nrows());
        }
        epoch_losses.push(acc.mean());
    }
    Ok(epoch_losses)
}

#[derive(Clone, Debug)]
pub struct DfModel {
    pub net: BasePredictor,
    pub m: StationMatch,
    pub kind: TransformKind,
    pub raw_si: bool,
}

#[derive(Clone, Debug)]
pub struct FfModel {
    pub source_feature: FeatureNetwork,
    pub target_feature: FeatureNetwork,
    pub head: Dense,
    pub m: StationMatch,
    pub kind: TransformKind,
    pub raw_si: bool,
}

impl Params for FfModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.source_feature.visit(&join(prefix, "source_feature"), f);
        self.target_feature.visit(&join(prefix, "target_feature"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug)]
pub struct PfModel {
    /// Trained on the source city, then held fixed.
    pub source: BasePredictor,
    pub target: BasePredictor,
    pub fuse_a: Array1<f64>,
    pub fuse_b: Array1<f64>,
    grad_a: Array1<f64>,
    grad_b: Array1<f64>,
    pub m: StationMatch,
    pub kind: TransformKind,
    pub raw_si: bool,
}

impl Params for PfModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.source.visit(&join(prefix, "source"), f);
        self.target.visit(&join(prefix, "target"), f);
        let g = self.fuse_a.len();
        f(
            &join(prefix, "fuse_a"),
            self.fuse_a.as_slice_mut().expect("contiguous"),
            self.grad_a.as_slice_mut().expect("contiguous"),
            &[g],
        );
        f(
            &join(prefix, "fuse_b"),
            self.fuse_b.as_slice_mut().expect("contiguous"),
            self.grad_b.as_slice_mut().expect("contiguous"),
            &[g],
        );
    }
}

/// Optimizer view of a prediction-fusion model: everything except the frozen
/// source predictor.
struct PfTrainView<'a>(&'a mut PfModel);

impl Params for PfTrainView<'_> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.0.target.visit(&join(prefix, "target"), f);
        let g = self.0.fuse_a.len();
        f(
            &join(prefix, "fuse_a"),
            self.0.fuse_a.as_slice_mut().expect("contiguous"),
            self.0.grad_a.as_slice_mut().expect("contiguous"),
            &[g],
        );
        f(
            &join(prefix, "fuse_b"),
            self.0.fuse_b.as_slice_mut().expect("contiguous"),
            self.0.grad_b.as_slice_mut().expect("contiguous"),
            &[g],
        );
    }
}

#[derive(Clone, Debug)]
pub enum FrameworkModel {
    Plain(BasePredictor),
    Df(DfModel),
    Ff(FfModel),
    Pf(PfModel),
}

impl Params for FrameworkModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        match self {
            FrameworkModel::Plain(net) => net.visit(prefix, f),
            FrameworkModel::Df(dfm) => dfm.net.visit(prefix, f),
            FrameworkModel::Ff(ffm) => ffm.visit(prefix, f),
            FrameworkModel::Pf(pfm) => pfm.visit(prefix, f),
        }
    }
}

impl FrameworkModel {
    pub fn needs_source(&self) -> bool {
        !matches!(self, FrameworkModel::Plain(_))
    }

    /// Predictions as [n_target_stations x n_bundles]. `source` must cover
    /// the same time steps as `target` for the fusing variants.
    pub fn predict(
        &self,
        target: &[FeatureBundle],
        source: Option<&[FeatureBundle]>,
    ) -> Result<Array2<f64>> {
        require_bundles(target, "prediction")?;
        let fused_source = |m: &StationMatch| -> Result<&[FeatureBundle]> {
            let src = source.ok_or_else(|| {
                Error::Data("this model fuses source data; source bundles required".into())
            })?;
            check_paired(src, target)?;
            check_match_dims(m, src[0].l.nrows(), target[0].l.nrows())?;
            Ok(src)
        };
        let n = target[0].l.nrows();
        let t_count = target.len();
        let to_panel = |flat: Array2<f64>| -> Array2<f64> {
            Array2::from_shape_fn((n, t_count), |(g, j)| flat[[j * n + g, 0]])
        };
        match self {
            FrameworkModel::Plain(net) => {
                let idxs: Vec<usize> = (0..t_count).collect();
                let (x, _) = stack_chunk(target, None, &idxs);
                let (pred, _) = net.forward(&x.view())?;
                Ok(to_panel(pred))
            }
            FrameworkModel::Df(dfm) => {
                let src = fused_source(&dfm.m)?;
                let inputs = df_inputs(src, target, &dfm.m, dfm.kind, dfm.raw_si)?;
                let idxs: Vec<usize> = (0..t_count).collect();
                let (x, _) = stack_chunk(target, Some(&inputs), &idxs);
                let (pred, _) = dfm.net.forward(&x.view())?;
                Ok(to_panel(pred))
            }
            FrameworkModel::Ff(ffm) => {
                let src = fused_source(&ffm.m)?;
                let mix = ffm.m.mixing_matrix(ffm.kind, ffm.raw_si);
                let s_count = src[0].l.nrows();
                let idxs: Vec<usize> = (0..t_count).collect();
                let (xs, _) = stack_chunk(src, None, &idxs);
                let (xg, _) = stack_chunk(target, None, &idxs);
                let (es, _) = ffm.source_feature.forward(&xs.view())?;
                let (eg, _) = ffm.target_feature.forward(&xg.view())?;
                let h = eg.ncols();
                let mut concat = Array2::zeros((t_count * n, 2 * h));
                for j in 0..t_count {
                    let aligned = mix.dot(&es.slice(s![j * s_count..(j + 1) * s_count, ..]));
                    concat.slice_mut(s![j * n..(j + 1) * n, ..h]).assign(&aligned);
                }
                concat.slice_mut(s![.., h..]).assign(&eg);
                let pred = ffm.head.forward(&concat.view())?;
                Ok(to_panel(pred))
            }
            FrameworkModel::Pf(pfm) => {
                let src = fused_source(&pfm.m)?;
                let idxs: Vec<usize> = (0..t_count).collect();
                let (xs, _) = stack_chunk(src, None, &idxs);
                let (xg, _) = stack_chunk(target, None, &idxs);
                let (ps_flat, _) = pfm.source.forward(&xs.view())?;
                let (pg_flat, _) = pfm.target.forward(&xg.view())?;
                let s_count = src[0].l.nrows();
                let mut out = Array2::zeros((n, t_count));
                for j in 0..t_count {
                    let ps = ps_flat.slice(s![j * s_count..(j + 1) * s_count, ..]);
                    let aligned = pfm.m.transform(&ps, pfm.kind, pfm.raw_si)?;
                    for g in 0..n {
                        out[[g, j]] =
                            pfm.fuse_a[g] * aligned[[g, 0]] + pfm.fuse_b[g] * pg_flat[[j * n + g, 0]];
                    }
                }
                Ok(out)
            }
        }
    }
}

pub struct TrainedBaseline {
    pub model: FrameworkModel,
    pub epoch_losses: Vec<f64>,
}

pub fn train_nf(target: &[FeatureBundle], base_kind: BaseKind, p: &TrainParams) -> Result<TrainedBaseline> {
    p.validate()?;
    require_bundles(target, "target")?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = target[0].l.ncols();
    let mut net = BasePredictor::new(base_kind, width, p.hidden, p.dropout, &mut rng)?;
    let epoch_losses = run_base_training(&mut net, target, None, Subset::All, p, &mut rng)?;
    Ok(TrainedBaseline { model: FrameworkModel::Plain(net), epoch_losses })
}

/// Per-bundle fused input: transform(source windows) + target windows.
fn df_inputs(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    m: &StationMatch,
    kind: TransformKind,
    raw_si: bool,
) -> Result<Vec<Array2<f64>>> {
    source
        .iter()
        .zip(target)
        .map(|(sb, tb)| Ok(m.transform(&sb.l.view(), kind, raw_si)? + &tb.l))
        .collect()
}

pub fn train_df(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    m: &StationMatch,
    kind: TransformKind,
    raw_si: bool,
    base_kind: BaseKind,
    p: &TrainParams,
) -> Result<TrainedBaseline> {
    p.validate()?;
    require_bundles(target, "target")?;
    require_bundles(source, "source")?;
    check_paired(source, target)?;
    check_match_dims(m, source[0].l.nrows(), target[0].l.nrows())?;
    let inputs = df_inputs(source, target, m, kind, raw_si)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = target[0].l.ncols();
    let mut net = BasePredictor::new(base_kind, width, p.hidden, p.dropout, &mut rng)?;
    let epoch_losses = run_base_training(&mut net, target, Some(&inputs), Subset::All, p, &mut rng)?;
    Ok(TrainedBaseline {
        model: FrameworkModel::Df(DfModel { net, m: m.clone(), kind, raw_si }),
        epoch_losses,
    })
}

pub fn train_ff(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    m: &StationMatch,
    kind: TransformKind,
    raw_si: bool,
    base_kind: BaseKind,
    p: &TrainParams,
) -> Result<TrainedBaseline> {
    p.validate()?;
    require_bundles(target, "target")?;
    require_bundles(source, "source")?;
    check_paired(source, target)?;
    let s_count = source[0].l.nrows();
    let g_count = target[0].l.nrows();
    check_match_dims(m, s_count, g_count)?;

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = target[0].l.ncols();
    let mut model = FfModel {
        source_feature: FeatureNetwork::new(base_kind, width, p.hidden, p.hidden, p.dropout, &mut rng)?,
        target_feature: FeatureNetwork::new(base_kind, width, p.hidden, p.hidden, p.dropout, &mut rng)?,
        head: Dense::new(2 * p.hidden, 1, &mut rng),
        m: m.clone(),
        kind,
        raw_si,
    };
    let mix = model.m.mixing_matrix(kind, raw_si);
    let mix_t = mix.t().to_owned();
    let h = p.hidden;

    let mut adam = Adam::new(p.lr);
    let mut epoch_losses = Vec::with_capacity(p.epochs);
    for _ in 0..p.epochs {
        let mut acc = EpochAccum::default();
        for chunk in shuffled_batches(&mut rng, target.len(), p.batch) {
            let k = chunk.len();
            let (xs, _) = stack_chunk(source, None, &chunk);
            let (xg, y) = stack_chunk(target, None, &chunk);
            let (es, cache_s) = model.source_feature.forward_train(&xs.view(), &mut rng)?;
            let (eg, cache_g) = model.target_feature.forward_train(&xg.view(), &mut rng)?;
            let mut concat = Array2::zeros((k * g_count, 2 * h));
            for j in 0..k {
                let aligned = mix.dot(&es.slice(s![j * s_count..(j + 1) * s_count, ..]));
                concat.slice_mut(s![j * g_count..(j + 1) * g_count, ..h]).assign(&aligned);
            }
            concat.slice_mut(s![.., h..]).assign(&eg);
            let pred = model.head.forward(&concat.view())?;
            let (loss, grad) = mae_loss(&pred.view(), &y.view())?;

            model.zero_grads();
            let dconcat = model.head.backward(&concat.view(), &grad.view())?;
            let d_eg = dconcat.slice(s![.., h..]).to_owned();
            model.target_feature.backward(&cache_g, &d_eg.view())?;
            let mut d_es = Array2::zeros((k * s_count, h));
            for j in 0..k {
                let d_aligned = dconcat.slice(s![j * g_count..(j + 1) * g_count, ..h]);
                d_es
                    .slice_mut(s![j * s_count..(j + 1) * s_count, ..])
                    .assign(&mix_t.dot(&d_aligned));
            }
            model.source_feature.backward(&cache_s, &d_es.view())?;
            adam.step(&mut model)?;
            acc.add(loss, pred.nrows());
        }
        epoch_losses.push(acc.mean());
    }
    Ok(TrainedBaseline { model: FrameworkModel::Ff(model), epoch_losses })
}

pub fn train_pf(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    m: &StationMatch,
    kind: TransformKind,
    raw_si: bool,
    base_kind: BaseKind,
    p: &TrainParams,
) -> Result<TrainedBaseline> {
    p.validate()?;
    require_bundles(target, "target")?;
    require_bundles(source, "source")?;
    check_paired(source, target)?;
    let s_count = source[0].l.nrows();
    let g_count = target[0].l.nrows();
    check_match_dims(m, s_count, g_count)?;

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = target[0].l.ncols();

    // Stage 1: source predictor on source targets, then frozen.
    let mut source_net = BasePredictor::new(base_kind, width, p.hidden, p.dropout, &mut rng)?;
    run_base_training(&mut source_net, source, None, Subset::All, p, &mut rng)?;

    // Aligned source predictions are constants of stage 2.
    let mut aligned_pred = Array2::zeros((source.len(), g_count));
    for (j, sb) in source.iter().enumerate() {
        let (ps, _) = source_net.forward(&sb.l.view())?;
        let row = m.transform(&ps.view(), kind, raw_si)?;
        for g in 0..g_count {
            aligned_pred[[j, g]] = row[[g, 0]];
        }
    }

    let mut model = PfModel {
        source: source_net,
        target: BasePredictor::new(base_kind, width, p.hidden, p.dropout, &mut rng)?,
        fuse_a: Array1::zeros(g_count),
        fuse_b: Array1::ones(g_count),
        grad_a: Array1::zeros(g_count),
        grad_b: Array1::zeros(g_count),
        m: m.clone(),
        kind,
        raw_si,
    };

    let mut adam = Adam::new(p.lr);
    let mut epoch_losses = Vec::with_capacity(p.epochs);
    for _ in 0..p.epochs {
        let mut acc = EpochAccum::default();
        for chunk in shuffled_batches(&mut rng, target.len(), p.batch) {
            let k = chunk.len();
            let (xg, y) = stack_chunk(target, None, &chunk);
            let (pg, cache_g) = model.target.forward_train(&xg.view(), &mut rng)?;
            let mut xhat = Array2::zeros((k * g_count, 1));
            for (j, &idx) in chunk.iter().enumerate() {
                for g in 0..g_count {
                    let r = j * g_count + g;
                    xhat[[r, 0]] =
                        model.fuse_a[g] * aligned_pred[[idx, g]] + model.fuse_b[g] * pg[[r, 0]];
                }
            }
            let (loss, grad) = mae_loss(&xhat.view(), &y.view())?;

            model.zero_grads();
            let mut d_pg = Array2::zeros((k * g_count, 1));
            for (j, &idx) in chunk.iter().enumerate() {
                for g in 0..g_count {
                    let r = j * g_count + g;
                    let d = grad[[r, 0]];
                    model.grad_a[g] += d * aligned_pred[[idx, g]];
                    model.grad_b[g] += d * pg[[r, 0]];
                    d_pg[[r, 0]] = d * model.fuse_b[g];
                }
            }
            model.target.backward(&cache_g, &d_pg.view())?;
            adam.step(&mut PfTrainView(&mut model))?;
            acc.add(loss, k * g_count);
        }
        epoch_losses.push(acc.mean());
    }
    Ok(TrainedBaseline { model: FrameworkModel::Pf(model), epoch_losses })
}

pub fn train_ft(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    variant: Regime,
    base_kind: BaseKind,
    p: &TrainParams,
) -> Result<TrainedBaseline> {
    let subset = match variant {
        Regime::FtP => Subset::HeadOnly,
        Regime::FtF => Subset::FeatureOnly,
        other => return Err(Error::Config(format!("{other} is not a fine-tuning variant"))),
    };
    p.validate()?;
    require_bundles(target, "target")?;
    require_bundles(source, "source")?;
    if source[0].l.ncols() != target[0].l.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("window width {}", source[0].l.ncols()),
            got: format!("{}", target[0].l.ncols()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let width = target[0].l.ncols();
    let mut net = BasePredictor::new(base_kind, width, p.hidden, p.dropout, &mut rng)?;
    run_base_training(&mut net, source, None, Subset::All, p, &mut rng)?;
    // Transfer: all parameters start at the source optimum; only the chosen
    // part keeps training.
    let epoch_losses = run_base_training(&mut net, target, None, subset, p, &mut rng)?;
    Ok(TrainedBaseline { model: FrameworkModel::Plain(net), epoch_losses })
}

/// Dispatch on a validated config; `source` and `m` are required by the
/// regimes that fuse or transfer.
pub fn train_baseline(
    cfg: &FusionConfig,
    source: Option<&[FeatureBundle]>,
    target: &[FeatureBundle],
    m: Option<&StationMatch>,
    raw_si: bool,
    p: &TrainParams,
) -> Result<TrainedBaseline> {
    cfg.validate()?;
    let need_src = || {
        source.ok_or_else(|| Error::Data(format!("regime {} requires source bundles", cfg.regime)))
    };
    let need_m = || {
        m.ok_or_else(|| Error::Data(format!("regime {} requires a station match", cfg.regime)))
    };
    match cfg.regime {
        Regime::Nf => train_nf(target, cfg.base_kind, p),
        Regime::Df => train_df(
            need_src()?,
            target,
            need_m()?,
            cfg.transform_kind.expect("validated"),
            raw_si,
            cfg.base_kind,
            p,
        ),
        Regime::Ff => train_ff(
            need_src()?,
            target,
            need_m()?,
            cfg.transform_kind.expect("validated"),
            raw_si,
            cfg.base_kind,
            p,
        ),
        Regime::Pf => train_pf(
            need_src()?,
            target,
            need_m()?,
            cfg.transform_kind.expect("validated"),
            raw_si,
            cfg.base_kind,
            p,
        ),
        Regime::FtP | Regime::FtF => train_ft(need_src()?, target, cfg.regime, cfg.base_kind, p),
    }
}

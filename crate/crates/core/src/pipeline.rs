//! Two-stage transfer pipeline. Stage 1 trains a dynamic-covariate net, an
//! encoder-decoder embedder, and a prediction head on the source city. Stage
//! 2 initializes the target city's nets from that checkpoint and trains them
//! jointly on target data: a similarity-weighted embedding-alignment loss
//! pulls paired stations' embeddings together while a fused head combines a
//! plain flow predictor (residual branch) with a transformation of frozen
//! source embeddings.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::framework::check_match_dims;
use crate::matching::{StationMatch, TransformKind};
use crate::nn::params::join;
use crate::nn::{
    mae_loss, weighted_row_distance, Adam, BaseKind, Checkpoint, Dense, EncoderDecoder,
    FeatureCache, FeatureNetwork, MlpNet, Params,
};
use crate::trainer::{
    check_paired, require_bundles, shuffled_batches, stack_flow_rows, EpochAccum,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetcrossConfig {
    /// Joint-loss balance: (1-w) on the regression term, w on the
    /// embedding-alignment term.
    pub w: f64,
    /// Station embedding width.
    pub emb: usize,
    pub n_e: usize,
    pub n_d: usize,
    /// Flow-window lag count; windows are h lags plus their mean.
    pub h: usize,
    pub base_kind: BaseKind,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub with_residual: bool,
    pub with_covariates: bool,
    /// How frozen source embeddings are aligned to target rows before the
    /// transformation net. Scaled pairing by default; plain gather via Aj.
    pub align_kind: TransformKind,
    pub raw_si: bool,
    pub seed: u64,
}

impl Default for MetcrossConfig {
    fn default() -> Self {
        MetcrossConfig {
            w: 0.5,
            emb: 128,
            n_e: 1,
            n_d: 1,
            h: 5,
            base_kind: BaseKind::Mlp,
            epochs: 100,
            batch: 256,
            lr: 0.001,
            hidden: 128,
            dropout: 0.0,
            with_residual: true,
            with_covariates: true,
            align_kind: TransformKind::We,
            raw_si: false,
            seed: 0,
        }
    }
}

impl MetcrossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!("balance w={} outside [0, 1]", self.w)));
        }
        if self.emb == 0 || self.n_e == 0 || self.n_d == 0 {
            return Err(Error::Config("emb, n_e, n_d must all be >= 1".into()));
        }
        if self.h == 0 {
            return Err(Error::Config("window length h must be >= 1".into()));
        }
        if self.batch == 0 || self.hidden == 0 {
            return Err(Error::Config("batch and hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn window_width(&self) -> usize {
        self.h + 1
    }

    fn embed_in_dim(&self, a_dim: usize, d_dim: usize) -> usize {
        if self.with_covariates {
            self.window_width() + a_dim + d_dim
        } else {
            self.window_width()
        }
    }
}

/// Stage-1 nets: dynamic-covariate feature net, encoder-decoder embedder,
/// prediction head.
#[derive(Clone, Debug)]
pub struct SourceNets {
    pub f_d: FeatureNetwork,
    pub f_ed: EncoderDecoder,
    pub pre: Dense,
}

impl SourceNets {
    /// Draw order: f_d, f_ed, pre.
    pub fn new(cfg: &MetcrossConfig, a_dim: usize, d_dim: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let width = cfg.window_width();
        Ok(SourceNets {
            f_d: FeatureNetwork::new(cfg.base_kind, width, cfg.hidden, 1, cfg.dropout, rng)?,
            f_ed: EncoderDecoder::new(
                cfg.base_kind,
                cfg.n_e,
                cfg.n_d,
                cfg.embed_in_dim(a_dim, d_dim),
                cfg.emb,
                cfg.hidden,
                cfg.dropout,
                rng,
            )?,
            pre: Dense::new(cfg.emb, 1, rng),
        })
    }
}

impl Params for SourceNets {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.f_d.visit(&join(prefix, "f_d"), f);
        self.f_ed.visit(&join(prefix, "f_ed"), f);
        self.pre.visit(&join(prefix, "pre"), f);
    }
}

#[derive(Clone, Debug)]
pub struct PretrainedSource {
    pub nets: SourceNets,
    pub config_hash: String,
    pub with_covariates: bool,
    pub epoch_losses: Vec<f64>,
}

impl PretrainedSource {
    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let mut nets = self.nets.clone();
        Checkpoint::capture(&mut nets, seed, &self.config_hash).save(path)
    }

    /// Rebuilds the net shapes from the config, then loads the tensors.
    pub fn load(path: &std::path::Path, cfg: &MetcrossConfig, a_dim: usize, d_dim: usize) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
        let mut nets = SourceNets::new(cfg, a_dim, d_dim, &mut rng)?;
        ck.restore(&mut nets)?;
        Ok(PretrainedSource {
            nets,
            config_hash: ck.config_hash.clone(),
            with_covariates: cfg.with_covariates,
            epoch_losses: Vec::new(),
        })
    }
}

/// Stage-2 nets. The covariate net and embedder start from the source
/// checkpoint; the flow predictor, transformation net, and fusion head are
/// fresh (the fusion head's output layer starts at zero so fused predictions
/// begin exactly at the flow predictor's output).
#[derive(Clone, Debug)]
pub struct TargetNets {
    pub f_d: FeatureNetwork,
    pub f_ed: EncoderDecoder,
    pub f_b: FeatureNetwork,
    pub f_tr: MlpNet,
    pub f_i: MlpNet,
}

impl TargetNets {
    /// Draw order for the fresh nets: f_b, f_tr, f_i.
    pub fn from_source(source: &SourceNets, cfg: &MetcrossConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let width = cfg.window_width();
        let mut f_i = MlpNet::new(2 * cfg.emb, cfg.hidden, 1, cfg.dropout, rng)?;
        zero_output_layer(&mut f_i);
        Ok(TargetNets {
            f_d: source.f_d.clone(),
            f_ed: source.f_ed.clone(),
            f_b: FeatureNetwork::new(cfg.base_kind, width, cfg.hidden, 1, cfg.dropout, rng)?,
            f_tr: MlpNet::new(cfg.emb, cfg.hidden, cfg.emb, cfg.dropout, rng)?,
            f_i,
        })
    }
}

impl Params for TargetNets {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.f_d.visit(&join(prefix, "f_d"), f);
        self.f_ed.visit(&join(prefix, "f_ed"), f);
        self.f_b.visit(&join(prefix, "f_b"), f);
        self.f_tr.visit(&join(prefix, "f_tr"), f);
        self.f_i.visit(&join(prefix, "f_i"), f);
    }
}

fn zero_output_layer(net: &mut MlpNet) {
    net.l2.visit("", &mut |_, p, _, _| p.fill(0.0));
}

/// Applies the shared-weight covariate net to each covariate row of one
/// window: [D x (h+1)] -> [D x 1], the estimate of each covariate's next
/// value.
pub fn dynamic_feature_forward(f_d: &FeatureNetwork, d_window: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if d_window.ncols() != f_d.in_dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("window width {}", f_d.in_dim()),
            got: format!("{}", d_window.ncols()),
        });
    }
    let (out, _) = f_d.forward(d_window)?;
    Ok(out)
}

/// Builds the embedder input: flow window rows, optionally joined with
/// static rows and the dynamic estimates replicated onto every station row.
pub fn embed_input(
    l: &ArrayView2<f64>,
    a: Option<&ArrayView2<f64>>,
    d_out: Option<&ArrayView2<f64>>,
) -> Array2<f64> {
    let n = l.nrows();
    let a_dim = a.map_or(0, |m| m.ncols());
    let d_dim = d_out.map_or(0, |m| m.nrows());
    let mut x = Array2::zeros((n, l.ncols() + a_dim + d_dim));
    x.slice_mut(s![.., ..l.ncols()]).assign(l);
    if let Some(a) = a {
        x.slice_mut(s![.., l.ncols()..l.ncols() + a_dim]).assign(a);
    }
    if let Some(d) = d_out {
        for i in 0..n {
            for j in 0..d_dim {
                x[[i, l.ncols() + a_dim + j]] = d[[j, 0]];
            }
        }
    }
    x
}

/// Row-wise station embedding for a single time step.
pub fn embed(
    f_ed: &EncoderDecoder,
    l: &ArrayView2<f64>,
    a: Option<&ArrayView2<f64>>,
    d_out: Option<&ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let x = embed_input(l, a, d_out);
    let (out, _) = f_ed.forward(&x.view())?;
    Ok(out)
}

/// Similarity-weighted mean euclidean distance between each target station's
/// embedding and its paired source station's embedding. Pair weights are the
/// training-range similarities clipped below at 0.
pub fn embedding_loss(
    f_a_g: &ArrayView2<f64>,
    f_a_s: &ArrayView2<f64>,
    m: &StationMatch,
) -> Result<(f64, Array2<f64>)> {
    check_match_dims(m, f_a_s.nrows(), f_a_g.nrows())?;
    if f_a_g.ncols() != f_a_s.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding width {}", f_a_g.ncols()),
            got: format!("{}", f_a_s.ncols()),
        });
    }
    let mut paired = Array2::zeros(f_a_g.raw_dim());
    for (g, &p) in m.pairs().iter().enumerate() {
        paired.row_mut(g).assign(&f_a_s.row(p));
    }
    weighted_row_distance(f_a_g, &paired.view(), &m.pair_weights())
}

/// (1-w) * regression + w * alignment.
pub fn joint_loss(loss_r: f64, loss_st: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidValue(format!("balance w={w} outside [0, 1]")));
    }
    Ok((1.0 - w) * loss_r + w * loss_st)
}

/// Inference-time fusion for one time step: align frozen source embeddings
/// to target rows, transform, concatenate with target embeddings, predict,
/// and add the flow-predictor branch when the residual is on.
#[allow(clippy::too_many_arguments)]
pub fn fuse_predict(
    nets: &TargetNets,
    f_a_s: &ArrayView2<f64>,
    f_a_g: &ArrayView2<f64>,
    l_g: &ArrayView2<f64>,
    m: &StationMatch,
    align_kind: TransformKind,
    raw_si: bool,
    with_residual: bool,
) -> Result<Array2<f64>> {
    check_match_dims(m, f_a_s.nrows(), f_a_g.nrows())?;
    let aligned = m.transform(f_a_s, align_kind, raw_si)?;
    let (transformed, _) = nets.f_tr.forward(&aligned.view())?;
    let emb = f_a_g.ncols();
    let mut concat = Array2::zeros((f_a_g.nrows(), 2 * emb));
    concat.slice_mut(s![.., ..emb]).assign(&transformed);
    concat.slice_mut(s![.., emb..]).assign(f_a_g);
    let (initial, _) = nets.f_i.forward(&concat.view())?;
    if with_residual {
        let (base, _) = nets.f_b.forward(l_g)?;
        Ok(base + initial)
    } else {
        Ok(initial)
    }
}

/// Forward state of one stacked embedding pass over a chunk of bundles.
struct EmbedPass {
    emb: Array2<f64>,
    ed_caches: Vec<FeatureCache>,
    fd_cache: Option<FeatureCache>,
    k: usize,
    n: usize,
    width: usize,
    a_dim: usize,
    d_dim: usize,
}

/// Stacks `idxs` bundles into one embedder pass: the covariate net runs on
/// all of the chunk's windows at once and its outputs are replicated onto
/// each bundle's station rows.
fn embed_chunk(
    f_d: &FeatureNetwork,
    f_ed: &EncoderDecoder,
    bundles: &[FeatureBundle],
    idxs: &[usize],
    with_covariates: bool,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<EmbedPass> {
    let k = idxs.len();
    let first = &bundles[idxs[0]];
    let n = first.l.nrows();
    let width = first.l.ncols();
    let (a_dim, d_dim) = if with_covariates {
        (first.a.ncols(), first.d.nrows())
    } else {
        (0, 0)
    };

    let (fd_out, fd_cache) = if with_covariates {
        let mut d_stack = Array2::zeros((k * d_dim, width));
        for (j, &idx) in idxs.iter().enumerate() {
            d_stack.slice_mut(s![j * d_dim..(j + 1) * d_dim, ..]).assign(&bundles[idx].d);
        }
        let (out, cache) = match rng {
            Some(ref mut r) => f_d.forward_train(&d_stack.view(), &mut **r)?,
            None => f_d.forward(&d_stack.view())?,
        };
        (Some(out), Some(cache))
    } else {
        (None, None)
    };

    let mut x = Array2::zeros((k * n, width + a_dim + d_dim));
    for (j, &idx) in idxs.iter().enumerate() {
        let b = &bundles[idx];
        let rows = s![j * n..(j + 1) * n, ..];
        x.slice_mut(rows).slice_mut(s![.., ..width]).assign(&b.l);
        if with_covariates {
            x.slice_mut(rows).slice_mut(s![.., width..width + a_dim]).assign(&*b.a);
            let fd = fd_out.as_ref().expect("covariate outputs");
            for st in 0..n {
                for di in 0..d_dim {
                    x[[j * n + st, width + a_dim + di]] = fd[[j * d_dim + di, 0]];
                }
            }
        }
    }

    let (emb, ed_caches) = match rng {
        Some(r) => f_ed.forward_train(&x.view(), r)?,
        None => f_ed.forward(&x.view())?,
    };
    Ok(EmbedPass { emb, ed_caches, fd_cache, k, n, width, a_dim, d_dim })
}

/// Pushes embedding gradients back through the embedder and, via the
/// replicated columns, into the covariate net (replication sums station
/// rows' gradients).
fn embed_chunk_backward(
    f_d: &mut FeatureNetwork,
    f_ed: &mut EncoderDecoder,
    pass: &EmbedPass,
    d_emb: &ArrayView2<f64>,
) -> Result<()> {
    let dx = f_ed.backward(&pass.ed_caches, d_emb)?;
    if let Some(cache) = &pass.fd_cache {
        let off = pass.width + pass.a_dim;
        let mut d_fd = Array2::zeros((pass.k * pass.d_dim, 1));
        for j in 0..pass.k {
            for di in 0..pass.d_dim {
                let mut sum = 0.0;
                for st in 0..pass.n {
                    sum += dx[[j * pass.n + st, off + di]];
                }
                d_fd[[j * pass.d_dim + di, 0]] = sum;
            }
        }
        f_d.backward(cache, &d_fd.view())?;
    }
    Ok(())
}

fn check_window_width(bundles: &[FeatureBundle], cfg: &MetcrossConfig) -> Result<()> {
    if bundles[0].l.ncols() != cfg.window_width() {
        return Err(Error::ShapeMismatch {
            expected: format!("window width {}", cfg.window_width()),
            got: format!("{}", bundles[0].l.ncols()),
        });
    }
    Ok(())
}

/// Stage 1: train the source city's covariate net, embedder, and prediction
/// head on source targets; per-epoch mean training losses are recorded.
pub fn pretrain(source: &[FeatureBundle], cfg: &MetcrossConfig, config_hash: &str) -> Result<PretrainedSource> {
    cfg.validate()?;
    require_bundles(source, "source")?;
    check_window_width(source, cfg)?;
    let a_dim = source[0].a.ncols();
    let d_dim = source[0].d.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = SourceNets::new(cfg, a_dim, d_dim, &mut rng)?;
    let mut adam = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc = EpochAccum::default();
        for chunk in shuffled_batches(&mut rng, source.len(), cfg.batch) {
            let pass = embed_chunk(&nets.f_d, &nets.f_ed, source, &chunk, cfg.with_covariates, Some(&mut rng))?;
            let pred = nets.pre.forward(&pass.emb.view())?;
            let (_, y) = stack_flow_rows(source, &chunk);
            let (loss, grad) = mae_loss(&pred.view(), &y.view())?;
            nets.zero_grads();
            let d_emb = nets.pre.backward(&pass.emb.view(), &grad.view())?;
            embed_chunk_backward(&mut nets.f_d, &mut nets.f_ed, &pass, &d_emb.view())?;
            adam.step(&mut nets)?;
            acc.add(loss, pred.nrows());
        }
        epoch_losses.push(acc.mean());
    }
    Ok(PretrainedSource {
        nets,
        config_hash: config_hash.to_string(),
        with_covariates: cfg.with_covariates,
        epoch_losses,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub joint: f64,
    pub regression: f64,
    pub embedding: f64,
}

/// A fine-tuned target-city model plus the frozen source nets needed to
/// compute source embeddings at inference time.
#[derive(Clone, Debug)]
pub struct MetcrossModel {
    pub target: TargetNets,
    pub source: SourceNets,
    pub m: StationMatch,
    pub cfg: MetcrossConfig,
    pub epoch_losses: Vec<EpochLoss>,
}

impl Params for MetcrossModel {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize])) {
        self.target.visit(&join(prefix, "target"), f);
        self.source.visit(&join(prefix, "source"), f);
    }
}

/// Frozen per-bundle source quantities consumed by fine-tuning: source
/// embeddings aligned onto target rows, and the paired rows used by the
/// alignment loss. Both are [n_bundles*G x emb], bundle-major.
pub(crate) struct FrozenSource {
    pub aligned: Array2<f64>,
    pub paired: Array2<f64>,
}

fn compute_frozen_source(
    nets: &SourceNets,
    source: &[FeatureBundle],
    m: &StationMatch,
    cfg: &MetcrossConfig,
) -> Result<FrozenSource> {
    let g_count = m.n_target();
    let s_count = m.n_source();
    let emb = cfg.emb;
    let mix = m.mixing_matrix(cfg.align_kind, cfg.raw_si);
    let mut aligned = Array2::zeros((source.len() * g_count, emb));
    let mut paired = Array2::zeros((source.len() * g_count, emb));
    let chunk_size = cfg.batch.max(1);
    let idxs: Vec<usize> = (0..source.len()).collect();
    for chunk in idxs.chunks(chunk_size) {
        let pass = embed_chunk(&nets.f_d, &nets.f_ed, source, chunk, cfg.with_covariates, None)?;
        for (j, &idx) in chunk.iter().enumerate() {
            let rows = pass.emb.slice(s![j * s_count..(j + 1) * s_count, ..]);
            aligned
                .slice_mut(s![idx * g_count..(idx + 1) * g_count, ..])
                .assign(&mix.dot(&rows));
            for (g, &p) in m.pairs().iter().enumerate() {
                paired.row_mut(idx * g_count + g).assign(&rows.row(p));
            }
        }
    }
    Ok(FrozenSource { aligned, paired })
}

/// The stage-2 training loop over precomputed frozen source rows. Exposed
/// within the crate so tests can drive it with synthetic frozen inputs.
pub(crate) fn finetune_core(
    nets: &mut TargetNets,
    target: &[FeatureBundle],
    frozen: &FrozenSource,
    weights: &[f64],
    cfg: &MetcrossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLoss>> {
    let g_count = target[0].l.nrows();
    let emb = cfg.emb;
    let mut adam = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc_joint = EpochAccum::default();
        let mut acc_reg = EpochAccum::default();
        let mut acc_emb = EpochAccum::default();
        for chunk in shuffled_batches(rng, target.len(), cfg.batch) {
            let k = chunk.len();
            let rows = k * g_count;

            let mut aligned = Array2::zeros((rows, emb));
            let mut paired = Array2::zeros((rows, emb));
            for (j, &idx) in chunk.iter().enumerate() {
                aligned
                    .slice_mut(s![j * g_count..(j + 1) * g_count, ..])
                    .assign(&frozen.aligned.slice(s![idx * g_count..(idx + 1) * g_count, ..]));
                paired
                    .slice_mut(s![j * g_count..(j + 1) * g_count, ..])
                    .assign(&frozen.paired.slice(s![idx * g_count..(idx + 1) * g_count, ..]));
            }
            let tiled_weights: Vec<f64> = (0..rows).map(|r| weights[r % g_count]).collect();

            let pass = embed_chunk(&nets.f_d, &nets.f_ed, target, &chunk, cfg.with_covariates, Some(&mut *rng))?;
            let (loss_st, d_emb_st) =
                weighted_row_distance(&pass.emb.view(), &paired.view(), &tiled_weights)?;

            let (tr_out, tr_cache) = nets.f_tr.forward_train(&aligned.view(), rng)?;
            let mut concat = Array2::zeros((rows, 2 * emb));
            concat.slice_mut(s![.., ..emb]).assign(&tr_out);
            concat.slice_mut(s![.., emb..]).assign(&pass.emb);
            let (initial, fi_cache) = nets.f_i.forward_train(&concat.view(), rng)?;

            let (l_stack, y) = stack_flow_rows(target, &chunk);
            let (xhat, fb_cache) = if cfg.with_residual {
                let (base, cache) = nets.f_b.forward_train(&l_stack.view(), rng)?;
                (base + &initial, Some(cache))
            } else {
                (initial.clone(), None)
            };
            let (loss_r, d_xhat_raw) = mae_loss(&xhat.view(), &y.view())?;
            let loss_f = joint_loss(loss_r, loss_st, cfg.w)?;

            nets.zero_grads();
            let d_xhat = d_xhat_raw.mapv(|v| (1.0 - cfg.w) * v);
            if let Some(cache) = &fb_cache {
                nets.f_b.backward(cache, &d_xhat.view())?;
            }
            let d_concat = nets.f_i.backward(&fi_cache, &d_xhat.view())?;
            let d_tr_out = d_concat.slice(s![.., ..emb]).to_owned();
            nets.f_tr.backward(&tr_cache, &d_tr_out.view())?;
            let mut d_emb_total = d_concat.slice(s![.., emb..]).to_owned();
            d_emb_total.zip_mut_with(&d_emb_st, |a, &b| *a += cfg.w * b);
            embed_chunk_backward(&mut nets.f_d, &mut nets.f_ed, &pass, &d_emb_total.view())?;
            adam.step(nets)?;

            acc_joint.add(loss_f, rows);
            acc_reg.add(loss_r, rows);
            acc_emb.add(loss_st, rows);
        }
        epoch_losses.push(EpochLoss {
            joint: acc_joint.mean(),
            regression: acc_reg.mean(),
            embedding: acc_emb.mean(),
        });
    }
    Ok(epoch_losses)
}

/// Stage 2: initialize target nets from the source checkpoint and train them
/// on target data against the weighted joint loss. The source nets are used
/// only to compute frozen embeddings and are never updated.
pub fn finetune(
    source: &[FeatureBundle],
    target: &[FeatureBundle],
    pre: &PretrainedSource,
    m: &StationMatch,
    cfg: &MetcrossConfig,
) -> Result<MetcrossModel> {
    cfg.validate()?;
    require_bundles(source, "source")?;
    require_bundles(target, "target")?;
    check_paired(source, target)?;
    check_window_width(target, cfg)?;
    check_match_dims(m, source[0].l.nrows(), target[0].l.nrows())?;
    if pre.with_covariates != cfg.with_covariates {
        return Err(Error::Config(format!(
            "pretrained checkpoint was built with with_covariates={}, config says {}",
            pre.with_covariates, cfg.with_covariates
        )));
    }
    if pre.nets.f_ed.in_dim() != cfg.embed_in_dim(source[0].a.ncols(), source[0].d.nrows()) {
        return Err(Error::ShapeMismatch {
            expected: format!("embedder input width {}", pre.nets.f_ed.in_dim()),
            got: format!("{}", cfg.embed_in_dim(source[0].a.ncols(), source[0].d.nrows())),
        });
    }

    let frozen = compute_frozen_source(&pre.nets, source, m, cfg)?;
    let weights = m.pair_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = TargetNets::from_source(&pre.nets, cfg, &mut rng)?;
    let epoch_losses = finetune_core(&mut nets, target, &frozen, &weights, cfg, &mut rng)?;
    Ok(MetcrossModel {
        target: nets,
        source: pre.nets.clone(),
        m: m.clone(),
        cfg: *cfg,
        epoch_losses,
    })
}

impl MetcrossModel {
    /// Predictions [n_target_stations x n_bundles]; source bundles must cover
    /// the same time steps.
    pub fn predict(&self, target: &[FeatureBundle], source: &[FeatureBundle]) -> Result<Array2<f64>> {
        require_bundles(target, "prediction")?;
        check_paired(source, target)?;
        check_match_dims(&self.m, source[0].l.nrows(), target[0].l.nrows())?;
        let g_count = target[0].l.nrows();
        let s_count = source[0].l.nrows();
        let emb = self.cfg.emb;
        let mix = self.m.mixing_matrix(self.cfg.align_kind, self.cfg.raw_si);
        let mut out = Array2::zeros((g_count, target.len()));
        let idxs: Vec<usize> = (0..target.len()).collect();
        for chunk in idxs.chunks(self.cfg.batch.max(1)) {
            let k = chunk.len();
            let rows = k * g_count;
            let pass_s = embed_chunk(
                &self.source.f_d,
                &self.source.f_ed,
                source,
                chunk,
                self.cfg.with_covariates,
                None,
            )?;
            let mut aligned = Array2::zeros((rows, emb));
            for j in 0..k {
                let src_rows = pass_s.emb.slice(s![j * s_count..(j + 1) * s_count, ..]);
                aligned
                    .slice_mut(s![j * g_count..(j + 1) * g_count, ..])
                    .assign(&mix.dot(&src_rows));
            }
            let pass_g = embed_chunk(
                &self.target.f_d,
                &self.target.f_ed,
                target,
                chunk,
                self.cfg.with_covariates,
                None,
            )?;
            let (tr_out, _) = self.target.f_tr.forward(&aligned.view())?;
            let mut concat = Array2::zeros((rows, 2 * emb));
            concat.slice_mut(s![.., ..emb]).assign(&tr_out);
            concat.slice_mut(s![.., emb..]).assign(&pass_g.emb);
            let (initial, _) = self.target.f_i.forward(&concat.view())?;
            let xhat = if self.cfg.with_residual {
                let (l_stack, _) = stack_flow_rows(target, chunk);
                let (base, _) = self.target.f_b.forward(&l_stack.view())?;
                base + &initial
            } else {
                initial
            };
            for (j, &idx) in chunk.iter().enumerate() {
                for g in 0..g_count {
                    out[[g, idx]] = xhat[[j * g_count + g, 0]];
                }
            }
        }
        Ok(out)
    }

    /// The flow-predictor branch alone, [n_target_stations x n_bundles].
    pub fn baseline_predict(&self, target: &[FeatureBundle]) -> Result<Array2<f64>> {
        require_bundles(target, "prediction")?;
        let g_count = target[0].l.nrows();
        let idxs: Vec<usize> = (0..target.len()).collect();
        let (l_stack, _) = stack_flow_rows(target, &idxs);
        let (base, _) = self.target.f_b.forward(&l_stack.view())?;
        Ok(Array2::from_shape_fn((g_count, target.len()), |(g, j)| base[[j * g_count + g, 0]]))
    }

    pub fn save(&self, path: &std::path::Path, seed: u64, config_hash: &str) -> Result<()> {
        let mut copy = self.clone();
        Checkpoint::capture(&mut copy, seed, config_hash).save(path)
    }

    /// Rebuilds shapes from the config and match, then loads the tensors.
    pub fn load(
        path: &std::path::Path,
        cfg: &MetcrossConfig,
        m: StationMatch,
        a_dim: usize,
        d_dim: usize,
    ) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.seed);
        let source = SourceNets::new(cfg, a_dim, d_dim, &mut rng)?;
        let target = TargetNets::from_source(&source, cfg, &mut rng)?;
        let mut model = MetcrossModel {
            target,
            source,
            m,
            cfg: *cfg,
            epoch_losses: Vec::new(),
        };
        ck.restore(&mut model)?;
        Ok(model)
    }
}

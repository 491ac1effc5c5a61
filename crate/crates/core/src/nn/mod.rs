//! Minimal differentiable kernel: dense/MLP/LSTM networks with manual
//! gradients, Adam, losses, and JSON checkpoints. Everything is f64,
//! single-threaded, and deterministic given a seed.

pub mod adam;
pub mod checkpoint;
pub mod dense;
pub mod loss;
pub mod lstm;
pub mod mlp;
pub mod params;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use adam::Adam;
pub use checkpoint::{Checkpoint, TensorEntry};
pub use dense::Dense;
pub use loss::{mae_loss, weighted_row_distance};
pub use lstm::{LstmCache, LstmNet};
pub use mlp::{MlpCache, MlpNet};
pub use params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Mlp,
    Lstm,
}

impl std::fmt::Display for BaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseKind::Mlp => "mlp",
            BaseKind::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for BaseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BaseKind::Mlp),
            "lstm" => Ok(BaseKind::Lstm),
            _ => Err(Error::Config(format!("unknown base kind {s:?} (mlp|lstm)"))),
        }
    }
}

/// A feature network of either kind: [batch × in] → [batch × out].
#[derive(Clone, Debug)]
pub enum FeatureNetwork {
    Mlp(MlpNet),
    Lstm(LstmNet),
}

#[derive(Clone, Debug)]
pub enum FeatureCache {
    Mlp(MlpCache),
    Lstm(LstmCache),
}

impl FeatureNetwork {
    pub fn new(
        kind: BaseKind,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BaseKind::Mlp => FeatureNetwork::Mlp(MlpNet::new(input_dim, hidden, output_dim, dropout, rng)?),
            BaseKind::Lstm => FeatureNetwork::Lstm(LstmNet::new(input_dim, hidden, output_dim, dropout, rng)?),
        })
    }

    pub fn kind(&self) -> BaseKind {
        match self {
            FeatureNetwork::Mlp(_) => BaseKind::Mlp,
            FeatureNetwork::Lstm(_) => BaseKind::Lstm,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            FeatureNetwork::Mlp(n) => n.in_dim(),
            FeatureNetwork::Lstm(n) => n.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureNetwork::Mlp(n) => n.out_dim(),
            FeatureNetwork::Lstm(n) => n.out_dim(),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, FeatureCache)> {
        Ok(match self {
            FeatureNetwork::Mlp(n) => {
                let (y, c) = n.forward(x)?;
                (y, FeatureCache::Mlp(c))
            }
            FeatureNetwork::Lstm(n) => {
                let (y, c) = n.forward(x)?;
                (y, FeatureCache::Lstm(c))
            }
        })
    }

    pub fn forward_train(
        &self,
        x: &ArrayView2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<f64>, FeatureCache)> {
        Ok(match self {
            FeatureNetwork::Mlp(n) => {
                let (y, c) = n.forward_train(x, rng)?;
                (y, FeatureCache::Mlp(c))
            }
            FeatureNetwork::Lstm(n) => {
                let (y, c) = n.forward_train(x, rng)?;
                (y, FeatureCache::Lstm(c))
            }
        })
    }

    pub fn backward(&mut self, cache: &FeatureCache, grad_out: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match (self, cache) {
            (FeatureNetwork::Mlp(n), FeatureCache::Mlp(c)) => n.backward(c, grad_out),
            (FeatureNetwork::Lstm(n), FeatureCache::Lstm(c)) => n.backward(c, grad_out),
            _ => Err(Error::Checkpoint("cache kind does not match network kind".into())),
        }
    }
}

impl Params for FeatureNetwork {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    ) {
        match self {
            FeatureNetwork::Mlp(n) => n.visit(prefix, f),
            FeatureNetwork::Lstm(n) => n.visit(prefix, f),
        }
    }
}

/// Encoder-decoder stack: the first block maps input_dim→emb, every later
/// block emb→emb; n_e encoder blocks then n_d decoder blocks, output is the
/// feature embedding [batch × emb].
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub n_e: usize,
    pub n_d: usize,
    blocks: Vec<FeatureNetwork>,
}

impl EncoderDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: BaseKind,
        n_e: usize,
        n_d: usize,
        input_dim: usize,
        emb: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_e == 0 || n_d == 0 {
            return Err(Error::Config("encoder and decoder need at least 1 block each".into()));
        }
        if emb == 0 || input_dim == 0 {
            return Err(Error::Config("emb and input_dim must be >= 1".into()));
        }
        let total = n_e + n_d;
        let mut blocks = Vec::with_capacity(total);
        for b in 0..total {
            let in_dim = if b == 0 { input_dim } else { emb };
            blocks.push(FeatureNetwork::new(kind, in_dim, hidden, emb, dropout, rng)?);
        }
        Ok(EncoderDecoder { n_e, n_d, blocks })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].in_dim()
    }

    pub fn emb_dim(&self) -> usize {
        self.blocks[0].out_dim()
    }

    pub fn kind(&self) -> BaseKind {
        self.blocks[0].kind()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<FeatureCache>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.to_owned();
        for block in &self.blocks {
            let (next, cache) = block.forward(&cur.view())?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    pub fn forward_train(
        &self,
        x: &ArrayView2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<f64>, Vec<FeatureCache>)> {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.to_owned();
        for block in &self.blocks {
            let (next, cache) = block.forward_train(&cur.view(), rng)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    pub fn backward(&mut self, caches: &[FeatureCache], grad_out: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if caches.len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "{} caches for {} blocks",
                caches.len(),
                self.blocks.len()
            )));
        }
        let mut grad = grad_out.to_owned();
        for (block, cache) in self.blocks.iter_mut().zip(caches.iter()).rev() {
            grad = block.backward(cache, &grad.view())?;
        }
        Ok(grad)
    }
}

impl Params for EncoderDecoder {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    ) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&params::join(prefix, &format!("block{i}")), f);
        }
    }
}

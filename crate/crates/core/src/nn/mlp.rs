//! One-hidden-layer perceptron: dense → ReLU → (dropout) → dense.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::dense::Dense;
use crate::nn::params::{join, Params};

#[derive(Clone, Debug)]
pub struct MlpNet {
    pub l1: Dense,
    pub l2: Dense,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Array2<f64>,
    /// hidden pre-activation
    z: Array2<f64>,
    /// inverted-dropout mask applied after ReLU (None when dropout is 0 or
    /// the pass is inference-mode)
    mask: Option<Array2<f64>>,
}

impl MlpNet {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(MlpNet {
            l1: Dense::new(in_dim, hidden, rng),
            l2: Dense::new(hidden, out_dim, rng),
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.l1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.l2.out_dim()
    }

    fn run(&self, x: &ArrayView2<f64>, rng: Option<&mut dyn rand::RngCore>) -> Result<(Array2<f64>, MlpCache)> {
        let z = self.l1.forward(x)?;
        let mut h = z.mapv(|v| v.max(0.0));
        let mask = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let m = Array2::from_shape_simple_fn(h.dim(), || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h *= &m;
                Some(m)
            }
            _ => None,
        };
        let y = self.l2.forward(&h.view())?;
        Ok((
            y,
            MlpCache {
                x: x.to_owned(),
                z,
                mask,
            },
        ))
    }

    /// Inference pass: dropout disabled.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.run(x, None)
    }

    /// Training pass: applies dropout when the rate is positive. At rate 0
    /// this is exactly `forward`.
    pub fn forward_train(
        &self,
        x: &ArrayView2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<f64>, MlpCache)> {
        self.run(x, Some(rng))
    }

    /// Accumulates gradients and returns grad w.r.t. the input.
    pub fn backward(&mut self, cache: &MlpCache, grad_out: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = cache.z.mapv(|v| v.max(0.0));
        if let Some(mask) = &cache.mask {
            h *= mask;
        }
        let mut gh = self.l2.backward(&h.view(), grad_out)?;
        if let Some(mask) = &cache.mask {
            gh *= mask;
        }
        let gz = &gh * &cache.z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.l1.backward(&cache.x.view(), &gz.view())
    }
}

impl Params for MlpNet {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    ) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }
}

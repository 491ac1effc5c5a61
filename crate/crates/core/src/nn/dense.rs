//! Fully connected layer with explicit gradient buffers.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::params::{join, Params};

/// y = x·w + b with w: [in × out].
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

/// Uniform init in [−1/√fan_in, +1/√fan_in].
pub(crate) fn init_uniform(rng: &mut impl Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let bound = 1.0 / (fan_in as f64).sqrt();
    move || rng.gen::<f64>() * 2.0 * bound - bound
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = init_uniform(rng, in_dim);
        let w = Array2::from_shape_simple_fn((in_dim, out_dim), &mut draw);
        let b = Array1::from_shape_simple_fn(out_dim, &mut draw);
        Dense {
            gw: Array2::zeros(w.dim()),
            gb: Array1::zeros(b.dim()),
            w,
            b,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Array2::zeros((in_dim, out_dim)),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((in_dim, out_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input columns", self.in_dim()),
                got: format!("{}", x.ncols()),
            });
        }
        Ok(x.dot(&self.w) + &self.b)
    }

    /// Accumulates gw/gb from the cached input and returns grad w.r.t. x.
    pub fn backward(&mut self, x: &ArrayView2<f64>, grad_out: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if grad_out.ncols() != self.out_dim() || grad_out.nrows() != x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("[{} × {}] upstream gradient", x.nrows(), self.out_dim()),
                got: format!("[{} × {}]", grad_out.nrows(), grad_out.ncols()),
            });
        }
        self.gw += &x.t().dot(grad_out);
        self.gb += &grad_out.sum_axis(Axis(0));
        Ok(grad_out.dot(&self.w.t()))
    }
}

impl Params for Dense {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    ) {
        let shape = vec![self.w.nrows(), self.w.ncols()];
        f(
            &join(prefix, "w"),
            self.w.as_slice_mut().expect("contiguous"),
            self.gw.as_slice_mut().expect("contiguous"),
            &shape,
        );
        let blen = self.b.len();
        f(
            &join(prefix, "b"),
            self.b.as_slice_mut().expect("contiguous"),
            self.gb.as_slice_mut().expect("contiguous"),
            &[blen],
        );
    }
}

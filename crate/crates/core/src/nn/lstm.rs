//! Single-layer LSTM over the input's column axis (each row is a sequence of
//! scalars), with a linear head on the last hidden state. Gradients are
//! computed by backpropagation through time.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::dense::{init_uniform, Dense};
use crate::nn::params::{join, Params};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[derive(Clone, Debug)]
pub struct LstmNet {
    pub hidden: usize,
    seq_len: usize,
    /// [1 × 4H]: input weights for gates i, f, g, o (chunks of H).
    pub w_ih: Array2<f64>,
    /// [H × 4H]
    pub w_hh: Array2<f64>,
    /// [4H]
    pub b: Array1<f64>,
    pub head: Dense,
    pub dropout: f64,
    pub gw_ih: Array2<f64>,
    pub gw_hh: Array2<f64>,
    pub gb: Array1<f64>,
}

#[derive(Clone, Debug)]
struct StepCache {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Array2<f64>,
    steps: Vec<StepCache>,
    /// hs[t] is the hidden state entering step t; hs[T] is the final state.
    hs: Vec<Array2<f64>>,
    mask: Option<Array2<f64>>,
}

impl LstmNet {
    pub fn new(
        seq_len: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if seq_len == 0 || hidden == 0 {
            return Err(Error::Config("lstm needs seq_len >= 1 and hidden >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let (w_ih, w_hh, b) = {
            let mut draw = init_uniform(rng, hidden);
            (
                Array2::from_shape_simple_fn((1, 4 * hidden), &mut draw),
                Array2::from_shape_simple_fn((hidden, 4 * hidden), &mut draw),
                Array1::from_shape_simple_fn(4 * hidden, &mut draw),
            )
        };
        Ok(LstmNet {
            hidden,
            seq_len,
            gw_ih: Array2::zeros(w_ih.dim()),
            gw_hh: Array2::zeros(w_hh.dim()),
            gb: Array1::zeros(b.len()),
            w_ih,
            w_hh,
            b,
            head: Dense::new(hidden, out_dim, rng),
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.seq_len
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn run(
        &self,
        x: &ArrayView2<f64>,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Array2<f64>, LstmCache)> {
        if x.ncols() != self.seq_len {
            return Err(Error::ShapeMismatch {
                expected: format!("{} sequence steps", self.seq_len),
                got: format!("{}", x.ncols()),
            });
        }
        let batch = x.nrows();
        let h_dim = self.hidden;
        let mut hs = Vec::with_capacity(self.seq_len + 1);
        hs.push(Array2::zeros((batch, h_dim)));
        let mut c = Array2::zeros((batch, h_dim));
        let mut steps = Vec::with_capacity(self.seq_len);

        for t in 0..self.seq_len {
            let h_prev = &hs[t];
            // z = x_t · w_ih + h_prev · w_hh + b
            let mut z = h_prev.dot(&self.w_hh);
            for r in 0..batch {
                let xv = x[[r, t]];
                for k in 0..4 * h_dim {
                    z[[r, k]] += xv * self.w_ih[[0, k]] + self.b[k];
                }
            }
            let i = z.slice(s![.., 0..h_dim]).mapv(sigmoid);
            let f = z.slice(s![.., h_dim..2 * h_dim]).mapv(sigmoid);
            let g = z.slice(s![.., 2 * h_dim..3 * h_dim]).mapv(f64::tanh);
            let o = z.slice(s![.., 3 * h_dim..4 * h_dim]).mapv(sigmoid);
            c = &f * &c + &i * &g;
            let tanh_c = c.mapv(f64::tanh);
            let h = &o * &tanh_c;
            hs.push(h);
            steps.push(StepCache {
                i,
                f,
                g,
                o,
                c: c.clone(),
                tanh_c,
            });
        }

        let mut h_last = hs[self.seq_len].clone();
        let mask = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let m = Array2::from_shape_simple_fn(h_last.dim(), || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h_last *= &m;
                Some(m)
            }
            _ => None,
        };
        let y = self.head.forward(&h_last.view())?;
        Ok((
            y,
            LstmCache {
                x: x.to_owned(),
                steps,
                hs,
                mask,
            },
        ))
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, LstmCache)> {
        self.run(x, None)
    }

    pub fn forward_train(
        &self,
        x: &ArrayView2<f64>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Array2<f64>, LstmCache)> {
        self.run(x, Some(rng))
    }

    pub fn backward(&mut self, cache: &LstmCache, grad_out: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let t_len = self.seq_len;
        let h_dim = self.hidden;
        let batch = cache.x.nrows();

        let mut h_last = cache.hs[t_len].clone();
        if let Some(mask) = &cache.mask {
            h_last *= mask;
        }
        let mut dh = self.head.backward(&h_last.view(), grad_out)?;
        if let Some(mask) = &cache.mask {
            dh *= mask;
        }

        let mut dc = Array2::zeros((batch, h_dim));
        let mut dx = Array2::zeros((batch, t_len));
        for t in (0..t_len).rev() {
            let step = &cache.steps[t];
            let do_ = &dh * &step.tanh_c;
            dc = dc + &dh * &step.o * step.tanh_c.mapv(|v| 1.0 - v * v);
            let di = &dc * &step.g;
            let dg = &dc * &step.i;
            let df = if t == 0 {
                Array2::zeros((batch, h_dim))
            } else {
                &dc * &cache.steps[t - 1].c
            };

            let mut dz = Array2::zeros((batch, 4 * h_dim));
            dz.slice_mut(s![.., 0..h_dim])
                .assign(&(&di * &step.i * step.i.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., h_dim..2 * h_dim])
                .assign(&(&df * &step.f * step.f.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., 2 * h_dim..3 * h_dim])
                .assign(&(&dg * step.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * h_dim..4 * h_dim])
                .assign(&(&do_ * &step.o * step.o.mapv(|v| 1.0 - v)));

            let x_t = cache.x.column(t);
            for k in 0..4 * h_dim {
                let mut acc = 0.0;
                for r in 0..batch {
                    acc += x_t[r] * dz[[r, k]];
                }
                self.gw_ih[[0, k]] += acc;
            }
            self.gw_hh += &cache.hs[t].t().dot(&dz);
            self.gb += &dz.sum_axis(Axis(0));

            for r in 0..batch {
                let mut acc = 0.0;
                for k in 0..4 * h_dim {
                    acc += dz[[r, k]] * self.w_ih[[0, k]];
                }
                dx[[r, t]] = acc;
            }
            dh = dz.dot(&self.w_hh.t());
            dc = &dc * &step.f;
        }
        Ok(dx)
    }
}

impl Params for LstmNet {
    fn visit(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut [f64], &mut [f64], &[usize]),
    ) {
        let wih_shape = vec![1, 4 * self.hidden];
        f(
            &join(prefix, "w_ih"),
            self.w_ih.as_slice_mut().expect("contiguous"),
            self.gw_ih.as_slice_mut().expect("contiguous"),
            &wih_shape,
        );
        let whh_shape = vec![self.hidden, 4 * self.hidden];
        f(
            &join(prefix, "w_hh"),
            self.w_hh.as_slice_mut().expect("contiguous"),
            self.gw_hh.as_slice_mut().expect("contiguous"),
            &whh_shape,
        );
        let blen = self.b.len();
        f(
            &join(prefix, "b"),
            self.b.as_slice_mut().expect("contiguous"),
            self.gb.as_slice_mut().expect("contiguous"),
            &[blen],
        );
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = LstmNet::new(4, 3, 2, 0.0, &mut rng).unwrap();
        net.w_ih.fill(0.0);
        net.w_hh.fill(0.0);
        net.b.fill(0.0);
        net.head = Dense::zeros(3, 2);
        let x = array![[1.0, -2.0, 0.5, 3.0]];
        let (y, _) = net.forward(&x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LstmNet::new(5, 4, 1, 0.0, &mut rng).unwrap();
        let x2 = array![[0.1, 0.2, 0.3, 0.4, 0.5], [9.0, -3.0, 2.0, 0.0, 1.0]];
        let (y2, _) = net.forward(&x2.view()).unwrap();
        let row0 = x2.slice(s![0..1, ..]).to_owned();
        let (y0, _) = net.forward(&row0.view()).unwrap();
        assert!((y2[[0, 0]] - y0[[0, 0]]).abs() < 1e-15);
    }

    #[test]
    fn wrong_seq_len_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = LstmNet::new(5, 4, 1, 0.0, &mut rng).unwrap();
        let x = array![[1.0, 2.0]];
        assert!(net.forward(&x.view()).is_err());
    }

    #[test]
    fn monotone_gate_response() {
        // With positive input weights on the input gate and zero elsewhere,
        // larger final inputs push the output up through the cell state.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = LstmNet::new(3, 1, 1, 0.0, &mut rng).unwrap();
        net.w_ih.fill(1.0);
        net.w_hh.fill(0.0);
        net.b.fill(0.0);
        net.head.w.fill(1.0);
        net.head.b.fill(0.0);
        let lo = array![[0.0, 0.0, 0.1]];
        let hi = array![[0.0, 0.0, 2.0]];
        let (y_lo, _) = net.forward(&lo.view()).unwrap();
        let (y_hi, _) = net.forward(&hi.view()).unwrap();
        assert!(y_hi[[0, 0]] > y_lo[[0, 0]]);
    }
}

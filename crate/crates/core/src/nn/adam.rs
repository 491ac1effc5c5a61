//! Adam with bias correction. Rejects non-finite parameters or gradients,
//! surfacing training divergence with the step index.

use crate::error::{Error, Result};
use crate::nn::params::Params;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Moment buffers are
    /// keyed by visitation order and validated by tensor name on every call.
    pub fn step(&mut self, net: &mut dyn Params) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);

        let first = self.names.is_empty();
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        let names = &mut self.names;
        let ms = &mut self.m;
        let vs = &mut self.v;
        net.visit("", &mut |name, p, g, _| {
            if err.is_some() {
                return;
            }
            if first {
                names.push(name.to_string());
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            } else if idx >= names.len() || names[idx] != name || ms[idx].len() != p.len() {
                err = Some(Error::Checkpoint(format!(
                    "optimizer state mismatch at tensor {idx} ({name})"
                )));
                return;
            }
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for k in 0..p.len() {
                let gk = g[k];
                if !gk.is_finite() {
                    err = Some(Error::Divergence {
                        step: t,
                        detail: format!("non-finite gradient in {name}"),
                    });
                    return;
                }
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
                if !p[k].is_finite() {
                    err = Some(Error::Divergence {
                        step: t,
                        detail: format!("non-finite parameter in {name}"),
                    });
                    return;
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !first && idx != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer saw {idx} tensors, expected {}",
                self.names.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::Dense;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut d = Dense::zeros(2, 2);
        d.w[[0, 0]] = 1.5;
        d.b[0] = -0.5;
        let before = d.snapshot();
        let mut adam = Adam::new(0.01);
        adam.step(&mut d).unwrap();
        assert_eq!(d.snapshot(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn gradient_moves_parameter_against_sign() {
        let mut d = Dense::zeros(1, 1);
        d.gw[[0, 0]] = 1.0;
        let mut adam = Adam::new(0.1);
        adam.step(&mut d).unwrap();
        assert!(d.w[[0, 0]] < 0.0);
        // First step with bias correction moves by almost exactly lr.
        assert!((d.w[[0, 0]] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut d = Dense::zeros(1, 1);
        d.gw[[0, 0]] = f64::NAN;
        let mut adam = Adam::new(0.1);
        match adam.step(&mut d) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpGrads};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.eps > 0.0) || !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter group. The moment buffers mirror the
/// parameter slices they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    hyper: AdamHyper,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(hyper: AdamHyper, shapes: &[usize]) -> Result<Self> {
        hyper.validate()?;
        Ok(Adam {
            hyper,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_mlp(hyper: AdamHyper, net: &Mlp) -> Result<Self> {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        Self::new(hyper, &shapes)
    }

    /// Rebuilds a state from serialized parts.
    pub fn from_parts(hyper: AdamHyper, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self> {
        hyper.validate()?;
        let same = m.len() == v.len() && m.iter().zip(&v).all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(Error::shape("Adam::from_parts", "moment buffers disagree"));
        }
        Ok(Adam { hyper, t, m, v })
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    /// Number of updates applied so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let shapes_ok = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_ok {
            return Err(Error::shape(
                "Adam::step",
                "parameters, gradients and moment buffers differ in shape",
            ));
        }
        self.t += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        let g = grads.slices();
        let mut p = net.param_slices_mut();
        self.step_slices(&mut p, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_adam(lr: f64) -> Adam {
        Adam::new(
            AdamHyper {
                lr,
                ..AdamHyper::default()
            },
            &[1],
        )
        .unwrap()
    }

    fn step_scalar(adam: &mut Adam, p: &mut f64, g: f64) {
        let mut buf = [*p];
        adam.step_slices(&mut [&mut buf[..]], &[&[g][..]]).unwrap();
        *p = buf[0];
    }

    #[test]
    fn zero_gradient_on_fresh_state_is_a_no_op() {
        let mut adam = scalar_adam(0.1);
        let mut p = 1.25;
        for _ in 0..50 {
            step_scalar(&mut adam, &mut p, 0.0);
        }
        assert_eq!(p, 1.25);
        assert_eq!(adam.t(), 50);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut adam = scalar_adam(0.1);
        let mut p = 0.0;
        step_scalar(&mut adam, &mut p, 1.0);
        assert!((p + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{p}");
    }

    #[test]
    fn zero_gradient_steps_after_a_kick_decay() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        // Recurrence evaluated by hand: g = (1, 0, 0).
        let mut m = 0.0;
        let mut v = 0.0;
        let mut expected = Vec::new();
        for (t, g) in [1.0, 0.0, 0.0].into_iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (t + 1) as i32;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expected.push(lr * mh / (vh.sqrt() + eps));
        }

        let mut adam = scalar_adam(lr);
        let mut p = 0.0;
        let mut deltas = Vec::new();
        for g in [1.0, 0.0, 0.0] {
            let before = p;
            step_scalar(&mut adam, &mut p, g);
            deltas.push(before - p);
        }
        for (d, e) in deltas.iter().zip(&expected) {
            assert!((d - e).abs() < 1e-14);
        }
        assert!(deltas[1].abs() < deltas[0].abs());
        assert!(deltas[2].abs() < deltas[1].abs());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(AdamHyper::default(), &[2]).unwrap();
        let mut p = [0.0; 3];
        let err = adam.step_slices(&mut [&mut p[..]], &[&[0.0; 3][..]]);
        assert!(matches!(err, Err(Error::Shape { .. })));
        assert_eq!(adam.t(), 0);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        for h in [
            AdamHyper { beta1: 1.0, ..AdamHyper::default() },
            AdamHyper { beta2: -0.1, ..AdamHyper::default() },
            AdamHyper { eps: 0.0, ..AdamHyper::default() },
        ] {
            assert!(Adam::new(h, &[1]).is_err());
        }
    }
}

use super::params::{FlatGrad, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers laid out like the flattened parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    layout_hash: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let layout = params.layout();
        Self {
            config,
            first: vec![0.0; layout.total()],
            second: vec![0.0; layout.total()],
            step: 0,
            layout_hash: layout.hash(),
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient is rejected before any state
    /// changes.
    pub fn step(&mut self, params: &mut ParamSet, g: &FlatGrad) -> Result<()> {
        if g.layout_hash != self.layout_hash || g.len() != self.first.len() {
            return Err(Error::Layout(
                "gradient does not match optimizer state".into(),
            ));
        }
        if params.layout().hash() != self.layout_hash {
            return Err(Error::Layout(
                "parameters do not match optimizer state".into(),
            ));
        }
        if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "adam_step",
                format!("gradient entry {i} is {}", g.values[i]),
            ));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut offset = 0;
        for t in params.tensors_mut() {
            for p in t.values_mut() {
                let gi = g.values[offset];
                let m = &mut self.first[offset];
                let v = &mut self.second[offset];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
                offset += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::Tensor;

    fn params(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        p
    }

    fn grad(p: &ParamSet, vals: &[f64]) -> FlatGrad {
        FlatGrad::new(vals.to_vec(), p.layout().hash())
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut p = params(&[1.0, -2.0]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        {
            let g = grad(&p, &[0.0, 0.0]);
            s.step(&mut p, &g)
        }
        .unwrap();
        assert_eq!(p.flatten_values(), vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = params(&[0.0]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        {
            let g = grad(&p, &[2.0]);
            s.step(&mut p, &g)
        }
        .unwrap();
        let (m, v) = (s.first[0], s.second[0]);
        {
            let g = grad(&p, &[0.0]);
            s.step(&mut p, &g)
        }
        .unwrap();
        assert_eq!(s.first[0], 0.9 * m);
        assert_eq!(s.second[0], 0.999 * v);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = params(&[0.0, 0.0, 0.0]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.01));
        {
            let g = grad(&p, &[1.0, -3.0, 0.5]);
            s.step(&mut p, &g)
        }
        .unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = [
            -0.01 / (1.0 + 1e-8),
            0.01 * 3.0 / (3.0 + 1e-8),
            -0.01 * 0.5 / (0.5 + 1e-8),
        ];
        for (a, b) in p.flatten_values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn second_identical_step_matches_scalar_recurrence() {
        let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.05, 0.9, 0.999, 1e-8);
        let g = 0.3;
        // independent scalar re-evaluation of two steps
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut deltas = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            let d = lr * mh / (vh.sqrt() + eps);
            x -= d;
            deltas.push(d);
        }
        let mut p = params(&[1.0]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(lr));
        {
            let g = grad(&p, &[g]);
            s.step(&mut p, &g)
        }
        .unwrap();
        let after_one = p.flatten_values()[0];
        {
            let g = grad(&p, &[g]);
            s.step(&mut p, &g)
        }
        .unwrap();
        let after_two = p.flatten_values()[0];
        assert!(((after_one - after_two) - deltas[1]).abs() < 1e-15);
        assert!((after_two - x).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = params(&[1.0, 2.0]);
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        {
            let g = grad(&p, &[0.5, 0.5]);
            s.step(&mut p, &g)
        }
        .unwrap();
        let (before_p, before_s) = (p.clone(), s.clone());
        let err = {
            let g = grad(&p, &[f64::NAN, 1.0]);
            s.step(&mut p, &g)
        }
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Numeric {
                op: "adam_step",
                ..
            }
        ));
        assert_eq!(p, before_p);
        assert_eq!(s, before_s);
    }
}

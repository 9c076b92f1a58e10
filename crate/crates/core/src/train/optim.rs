use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3.2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Vec<f32>]) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `θ ← θ·(1 − lr·wd)`, then the
/// bias-corrected Adam step. Element arithmetic is done in f64.
pub fn adamw_step(params: &mut [Vec<f32>], grads: &[Vec<f32>], opt: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == opt.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&opt.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch {
            expected: "gradients and moments aligned with parameters".into(),
            found: "misaligned tensors".into(),
        });
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (k, p) in params.iter_mut().enumerate() {
        let (g, m, v) = (&grads[k], &mut opt.m[k], &mut opt.v[k]);
        for i in 0..p.len() {
            let gi = f64::from(g[i]);
            let mi = cfg.beta1 * f64::from(m[i]) + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * f64::from(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            p[i] = (f64::from(p[i]) * decay - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![vec![0.5f32, -1.25, 3.0]];
        let before = p.clone();
        let mut opt = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[vec![0.0; 3]], &mut opt, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_scales() {
        let mut p = vec![vec![0.5f32, -1.25, 3.0]];
        let before = p.clone();
        let mut opt = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &[vec![0.0; 3]], &mut opt, &cfg).unwrap();
        for (a, b) in p[0].iter().zip(&before[0]) {
            assert_eq!(*a, (f64::from(*b) * (1.0 - 0.1 * 0.5)) as f32);
        }
    }

    #[test]
    fn first_steps_match_reference() {
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.1,
            ..Default::default()
        };
        let g = [0.3f32, -2.0, 1e-4];
        let theta0 = [1.0f32, -0.5, 0.25];
        let mut p = vec![theta0.to_vec()];
        let mut opt = OptimizerState::new(&p);
        adamw_step(&mut p, &[g.to_vec()], &mut opt, &cfg).unwrap();
        for i in 0..3 {
            let gi = f64::from(g[i]);
            // bias-corrected moments after one step are g and g^2
            let want = f64::from(theta0[i]) * (1.0 - 1e-2 * 0.1) - 1e-2 * gi / (gi.abs() + 1e-8);
            assert!((f64::from(p[0][i]) - want).abs() < 1e-6, "{i}");
        }
        // second step with the same gradient, moments tracked by hand
        let prev = p[0].clone();
        adamw_step(&mut p, &[g.to_vec()], &mut opt, &cfg).unwrap();
        for i in 0..3 {
            let gi = f64::from(g[i]);
            let m = 0.9 * 0.1 * gi + 0.1 * gi;
            let v = 0.999 * 0.001 * gi * gi + 0.001 * gi * gi;
            let mhat = m / (1.0 - 0.81);
            let vhat = v / (1.0 - 0.999f64.powi(2));
            let want = f64::from(prev[i]) * (1.0 - 1e-3) - 1e-2 * mhat / (vhat.sqrt() + 1e-8);
            assert!((f64::from(p[0][i]) - want).abs() < 1e-6, "{i}");
        }
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut p = vec![vec![0.0f32; 3]];
        let mut opt = OptimizerState::new(&p);
        assert!(adamw_step(&mut p, &[vec![0.0; 2]], &mut opt, &AdamWConfig::default()).is_err());
    }
}

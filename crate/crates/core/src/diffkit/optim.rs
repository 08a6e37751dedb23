use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `cap`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], cap: f64) -> Result<f64> {
    if cap <= 0.0 || !cap.is_finite() {
        return contract(format!("gradient cap must be positive, got {cap}"));
    }
    let norm = global_norm(grads);
    if norm > cap {
        let factor = cap / norm;
        grads.iter_mut().for_each(|g| g.scale(factor));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer `{other}` (expected adam or sgd)")),
        }
    }
}

/// Per-parameter optimizer state for one set of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&Tensor]) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return contract(format!("learning rate must be positive, got {lr}"));
        }
        let zeros = |ps: &[&Tensor]| ps.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let (first, second) = match kind {
            OptimizerKind::Adam => (zeros(params), zeros(params)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            kind,
            lr,
            step: 0,
            first,
            second,
        })
    }

    pub fn adam(lr: f64, params: &[&Tensor]) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr, params)
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One descent step on `params` along `grads` (gradients of a loss).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return contract(format!(
                "optimizer got {} params and {} grads",
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(w, d)| *w -= self.lr * d);
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != params.len() {
                    return contract("optimizer state was built for a different parameter set");
                }
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let d = g.data()[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_to_cap() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        let pre = clip_global_norm(&mut g, 0.75).unwrap();
        assert_eq!(pre, 5.0);
        assert!((g[0].data()[0] - 0.45).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.60).abs() < 1e-15);
    }

    #[test]
    fn clip_below_cap_is_noop() {
        let mut g = vec![Tensor::from_vec(vec![0.1, 0.1])];
        clip_global_norm(&mut g, 10.0).unwrap();
        assert_eq!(g[0].data(), &[0.1, 0.1]);
        let mut z = vec![Tensor::zeros(&[3])];
        clip_global_norm(&mut z, 1.0).unwrap();
        assert_eq!(z[0].data(), &[0.0; 3]);
    }

    #[test]
    fn clip_rejects_non_positive_cap() {
        let mut g = vec![Tensor::from_vec(vec![1.0])];
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![0.5, -0.5]);
        let mut opt = OptimizerState::adam(1e-3, &[&p]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[0.5, -0.5]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε) = −lr·sign(g)·|g|/(|g| + ε).
        let mut p = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let g = Tensor::from_vec(vec![0.3, -2.0, 1e-3]);
        let lr = 0.01;
        let mut opt = OptimizerState::adam(lr, &[&p]).unwrap();
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        for (w, d) in p.data().iter().zip(g.data()) {
            let expected = 1.0 - lr * d / (d.abs() + ADAM_EPS);
            assert!((w - expected).abs() < 1e-15);
            assert!(((1.0 - w) - lr * d.signum()).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut opt = OptimizerState::adam(1e-3, &[&p]).unwrap();
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.2, -0.1, 0.7]);
            let mut opt = OptimizerState::adam(1e-2, &[&p]).unwrap();
            for k in 0..20 {
                let g = Tensor::from_vec(vec![(k as f64).sin(), 0.3, -(k as f64) * 0.01]);
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_step() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.5, &[&p]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::from_vec(vec![2.0])]).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }
}

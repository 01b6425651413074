use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam optimizer state keyed by parameter name.
///
/// Moments are created lazily as zeros the first time a parameter is
/// updated, so parameters added mid-run (adapters) start fresh.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Advance the step counter. Call once per optimizer step, before
    /// [`AdamState::update`].
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected Adam update of one parameter.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if grad.len() != param.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        if self.t == 0 {
            return Err(TensorError::Invalid("adam update before begin_step".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let n = grad.len();
        let mom = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        if mom.m.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: vec![mom.m.len()],
            });
        }
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let dtype = param.dtype();
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            data[i] = dtype.round(data[i] - lr * mhat / (vhat.sqrt() + eps));
        }
        Ok(())
    }
}

/// One Adam step over positionally matched parameters and gradients.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::Invalid(format!(
            "adam_step got {} parameters and {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(&i.to_string(), p, g.data())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(&[0.5])];
        let g = vec![Tensor::vector(&[1.0])];
        let mut st = AdamState::new(cfg(0.1));
        adam_step(&mut p, &g, &mut st).unwrap();
        // m̂ = 1, v̂ = 1  =>  Δ = -0.1 / (1 + 1e-8)
        let delta = p[0].data()[0] - 0.5;
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::vector(&[1.0, -2.0])];
        let g = vec![Tensor::vector(&[0.0, 0.0])];
        let mut st = AdamState::new(cfg(0.1));
        adam_step(&mut p, &g, &mut st).unwrap();
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn first_moment_follows_geometric_recurrence() {
        let mut p = vec![Tensor::vector(&[0.0])];
        let g = vec![Tensor::vector(&[2.0])];
        let mut st = AdamState::new(cfg(0.01));
        for t in 1..=3 {
            adam_step(&mut p, &g, &mut st).unwrap();
            // m_t = g (1 - β1^t): the gap to g shrinks by β1 each step
            let m = st.moments("0").unwrap().m[0];
            let expected = 2.0 * (1.0 - 0.9f64.powi(t));
            assert!((m - expected).abs() < 1e-15, "t={t} m={m}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(&[0.0, 1.0])];
        let g = vec![Tensor::vector(&[1.0])];
        let mut st = AdamState::new(cfg(0.1));
        assert!(adam_step(&mut p, &g, &mut st).is_err());
        assert_eq!(st.step_count(), 0);
    }
}

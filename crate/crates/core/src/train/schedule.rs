use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// `factor · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoamSchedule {
    pub factor: f64,
    pub warmup: u64,
    pub d_model: usize,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(TrainError::Schedule("noam steps start at 1".into()));
        }
        if self.warmup == 0 || self.d_model == 0 {
            return Err(TrainError::Schedule(
                "noam warmup and d_model must be positive".into(),
            ));
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.factor * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
    }

    pub fn peak(&self) -> f64 {
        self.lr(self.warmup.max(1)).unwrap_or(0.0)
    }
}

/// Linear ramp from 0 to `peak`, a flat hold, then exponential decay that
/// reaches `lambda · peak` at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriStageSchedule {
    pub peak: f64,
    pub ramp: u64,
    pub hold: u64,
    pub lambda: f64,
}

impl TriStageSchedule {
    /// Phase lengths as fractions of `total` steps.
    pub fn fractions(peak: f64, total: u64, ramp: f64, hold: f64, lambda: f64) -> Self {
        TriStageSchedule {
            peak,
            ramp: (total as f64 * ramp).round() as u64,
            hold: (total as f64 * hold).round() as u64,
            lambda,
        }
    }

    pub fn lr(&self, step: u64, total: u64) -> Result<f64> {
        // A decay phase of at least one step is needed for the final lr to
        // land on lambda · peak.
        if self.ramp + self.hold >= total {
            return Err(TrainError::Schedule(format!(
                "ramp {} + hold {} must be below the {total} total steps",
                self.ramp, self.hold
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(TrainError::Schedule(format!(
                "decay ratio {} outside (0, 1]",
                self.lambda
            )));
        }
        if step > total {
            return Err(TrainError::Schedule(format!(
                "step {step} past the {total} total steps"
            )));
        }
        if step < self.ramp {
            return Ok(self.peak * step as f64 / self.ramp as f64);
        }
        let decay_start = self.ramp + self.hold;
        if step < decay_start {
            return Ok(self.peak);
        }
        if step == total {
            return Ok(self.lambda * self.peak);
        }
        let frac = (step - decay_start) as f64 / (total - decay_start) as f64;
        Ok(self.peak * self.lambda.powf(frac))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Noam(NoamSchedule),
    TriStage(TriStageSchedule),
    Constant { lr: f64 },
}

impl Schedule {
    /// Learning rate for training step `step ∈ 1..=total`.
    pub fn lr(&self, step: u64, total: u64) -> Result<f64> {
        match self {
            Schedule::Noam(s) => s.lr(step),
            Schedule::TriStage(s) => s.lr(step, total),
            Schedule::Constant { lr } => Ok(*lr),
        }
    }

    /// Same shape with every learning rate multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Schedule {
        match *self {
            Schedule::Noam(s) => Schedule::Noam(NoamSchedule {
                factor: s.factor * c,
                ..s
            }),
            Schedule::TriStage(s) => Schedule::TriStage(TriStageSchedule {
                peak: s.peak * c,
                ..s
            }),
            Schedule::Constant { lr } => Schedule::Constant { lr: lr * c },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_closed_form_and_peak() {
        let s = NoamSchedule {
            factor: 1.0,
            warmup: 4,
            d_model: 4,
        };
        assert!((s.lr(4).unwrap() - 0.25).abs() < 1e-15);
        assert!((s.lr(1).unwrap() / s.lr(4).unwrap() - 0.25).abs() < 1e-15);
        assert!(s.lr(0).is_err());
        let lrs: Vec<f64> = (1..=40).map(|k| s.lr(k).unwrap()).collect();
        assert!(lrs[..4].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[3..].windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.peak(), s.lr(4).unwrap());
    }

    #[test]
    fn tri_stage_phases() {
        let s = TriStageSchedule {
            peak: 3e-5,
            ramp: 4,
            hold: 16,
            lambda: 0.05,
        };
        assert_eq!(s.lr(0, 40).unwrap(), 0.0);
        assert_eq!(s.lr(2, 40).unwrap(), 1.5e-5);
        assert_eq!(s.lr(12, 40).unwrap(), 3e-5);
        assert!((s.lr(40, 40).unwrap() - 1.5e-6).abs() < 1e-12);
        let decay: Vec<f64> = (20..=40).map(|k| s.lr(k, 40).unwrap()).collect();
        assert!(decay.windows(2).all(|w| w[0] > w[1]));
        assert!(s.lr(5, 20).is_err());
        assert!(s.lr(41, 40).is_err());
    }

    #[test]
    fn scaling_halves_every_step() {
        let s = Schedule::Noam(NoamSchedule {
            factor: 2.0,
            warmup: 10,
            d_model: 64,
        });
        for k in [1, 10, 50] {
            assert!((s.scaled(0.5).lr(k, 50).unwrap() - 0.5 * s.lr(k, 50).unwrap()).abs() < 1e-18);
        }
    }
}

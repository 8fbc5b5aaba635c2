use crate::error::{Error, Result};

/// Triangular cyclical learning rate: a linear ramp from `lr_min` to `lr_max`
/// over `half_cycle` steps, then back down, with period `2 * half_cycle`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CyclicalLrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub half_cycle: u64,
}

impl Default for CyclicalLrSchedule {
    fn default() -> Self {
        CyclicalLrSchedule {
            lr_min: 1e-5,
            lr_max: 3e-5,
            half_cycle: 2000,
        }
    }
}

impl CyclicalLrSchedule {
    pub fn new(lr_min: f64, lr_max: f64, half_cycle: u64) -> Result<Self> {
        let s = CyclicalLrSchedule {
            lr_min,
            lr_max,
            half_cycle,
        };
        s.validate()?;
        Ok(s)
    }

    /// A schedule fixed at zero is accepted too; it leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_min >= 0.0
            && self.lr_max >= self.lr_min
            && self.lr_max.is_finite()
            && self.half_cycle >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "learning-rate schedule needs 0 <= lr_min <= lr_max and half_cycle >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let pos = step % (2 * self.half_cycle);
        let frac = if pos <= self.half_cycle {
            pos as f64 / self.half_cycle as f64
        } else {
            (2 * self.half_cycle - pos) as f64 / self.half_cycle as f64
        };
        self.lr_min + (self.lr_max - self.lr_min) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = CyclicalLrSchedule::default();
        for (step, want) in [
            (0, 1e-5),
            (1000, 2e-5),
            (2000, 3e-5),
            (4000, 1e-5),
            (6000, 3e-5),
        ] {
            assert!((s.lr_at(step) - want).abs() < 1e-18, "step {step}");
        }
    }

    #[test]
    fn matches_closed_form_triangle() {
        let s = CyclicalLrSchedule::new(0.1, 0.5, 7).unwrap();
        for step in 0..100u64 {
            // distance to the nearest trough, in half cycles
            let phase = (step as f64 / 7.0) % 2.0;
            let tri = 1.0 - (phase - 1.0).abs();
            let want = 0.1 + 0.4 * tri;
            assert!((s.lr_at(step) - want).abs() < 1e-12, "step {step}");
            assert!((s.lr_at(step) - s.lr_at(step + 14)).abs() == 0.0);
            assert!(s.lr_at(step) >= 0.1 && s.lr_at(step) <= 0.5);
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(CyclicalLrSchedule::new(0.2, 0.1, 5).is_err());
        assert!(CyclicalLrSchedule::new(-0.1, 0.1, 5).is_err());
        assert!(CyclicalLrSchedule::new(0.1, 0.2, 0).is_err());
        assert!(CyclicalLrSchedule::new(0.0, 0.0, 1).is_ok());
    }
}

//! Learning-rate schedules: warmup-stable-decay (WSD) and warmup-cosine-decay (WCD).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScheduleKind {
    Wsd,
    Wcd,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WSD" => Ok(Self::Wsd),
            "WCD" => Ok(Self::Wcd),
            other => Err(Error::Config(format!("unknown lr_scheduler {other:?} (expected WSD or WCD)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wsd => "WSD",
            Self::Wcd => "WCD",
        })
    }
}

/// Rounds phase boundaries that miss an integer step only by float error.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    /// Fraction of steps spent decaying; ignored by WCD.
    pub decay_ratio: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak lr must be positive, got {}", self.peak_lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return bad(format!("min lr must be non-negative, got {}", self.min_lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if self.kind == ScheduleKind::Wsd {
            if !(0.0..=1.0).contains(&self.decay_ratio) {
                return bad(format!("decay_ratio {} outside [0, 1]", self.decay_ratio));
            }
            if self.warmup_ratio + self.decay_ratio > 1.0 {
                return bad("warmup_ratio + decay_ratio exceeds 1".into());
            }
        }
        Ok(())
    }

    pub fn warmup_end(&self) -> f64 {
        snap(self.warmup_ratio * self.total_steps as f64)
    }

    /// First step of the WSD decay segment.
    pub fn decay_start(&self) -> f64 {
        snap(self.total_steps as f64 * (1.0 - self.decay_ratio))
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Input(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let s = step as f64;
        let total = self.total_steps as f64;
        let warm = self.warmup_end();
        if s < warm {
            return Ok(self.peak_lr * s / warm);
        }
        let lr = match self.kind {
            ScheduleKind::Wsd => {
                let start = self.decay_start();
                if s <= start || total <= start {
                    self.peak_lr
                } else {
                    self.min_lr + (self.peak_lr - self.min_lr) * (total - s) / (total - start)
                }
            }
            ScheduleKind::Wcd => {
                if total <= warm {
                    self.peak_lr
                } else {
                    let progress = (s - warm) / (total - warm);
                    self.min_lr + (self.peak_lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
                }
            }
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wsd(total: u64) -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::Wsd,
            peak_lr: 3e-6,
            warmup_ratio: 0.03,
            decay_ratio: 0.1,
            total_steps: total,
            min_lr: 0.0,
        }
    }

    #[test]
    fn wsd_stable_phase_is_peak() {
        assert_eq!(wsd(1000).lr_at(500).unwrap(), 3e-6);
    }

    #[test]
    fn both_kinds_start_at_zero() {
        let mut s = wsd(1000);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        s.kind = ScheduleKind::Wcd;
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn wcd_cosine_midpoint() {
        let s = ScheduleConfig {
            kind: ScheduleKind::Wcd,
            peak_lr: 1e-5,
            warmup_ratio: 0.25,
            decay_ratio: 0.0,
            total_steps: 1000,
            min_lr: 0.0,
        };
        assert!((s.lr_at(625).unwrap() - 5e-6).abs() < 1e-18);
        assert_eq!(s.lr_at(250).unwrap(), 1e-5);
        assert!(s.lr_at(1000).unwrap().abs() < 1e-20);
    }

    #[test]
    fn step_past_end_is_rejected() {
        assert!(matches!(wsd(10).lr_at(11), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_ratios_rejected() {
        let mut s = wsd(10);
        s.decay_ratio = 0.99;
        assert!(s.validate().is_err());
        s.decay_ratio = 0.1;
        s.peak_lr = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn schedules_are_continuous() {
        for kind in [ScheduleKind::Wsd, ScheduleKind::Wcd] {
            let s = ScheduleConfig {
                kind,
                peak_lr: 1e-3,
                warmup_ratio: 0.1,
                decay_ratio: 0.2,
                total_steps: 10_000,
                min_lr: 1e-5,
            };
            let mut prev = s.lr_at(0).unwrap();
            for step in 1..=s.total_steps {
                let lr = s.lr_at(step).unwrap();
                assert!((lr - prev).abs() <= 1e-3 / 900.0, "{kind} jump at {step}");
                prev = lr;
            }
            assert_eq!(s.lr_at(s.total_steps).unwrap(), 1e-5);
            assert_eq!(s.lr_at(1000).unwrap(), 1e-3);
        }
    }
}

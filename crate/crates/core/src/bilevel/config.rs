use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the synthetic pixels start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticInit {
    /// Standard-normal noise in normalized space.
    #[default]
    Noise,
    /// Randomly chosen real images of each class.
    Real,
}

/// Hyper-parameters of the bi-level condensation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondenseConfig {
    pub ipc: usize,
    /// Real images per class in each outer batch.
    pub real_per_class: usize,
    /// Synthetic images per class in each batch; `None` means `min(ipc, 256)`.
    pub synth_per_class: Option<usize>,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: usize,
    pub l_out: usize,
    pub l_in: usize,
    pub outer_lr: f64,
    pub outer_lr_milestones: Vec<usize>,
    pub max_outer_iters: usize,
    pub inner_lr: f64,
    /// Total query images, split evenly across classes.
    pub query_size: usize,
    pub init: SyntheticInit,
    /// Set programmatically; run configs carry the seed at top level.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            ipc: 1,
            real_per_class: 256,
            synth_per_class: None,
            beta: 1.0,
            lambda1: 0.05,
            lambda2: 0.05,
            gamma: 10,
            l_out: 10,
            l_in: 50,
            outer_lr: 0.1,
            outer_lr_milestones: vec![1200, 1400, 1800],
            max_outer_iters: 2000,
            inner_lr: 0.01,
            query_size: 1024,
            init: SyntheticInit::Noise,
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda1", self.lambda1)?;
        positive("lambda2", self.lambda2)?;
        positive("beta", self.beta)?;
        if !self.outer_lr.is_finite() || self.outer_lr < 0.0 {
            return Err(Error::config(format!("outer_lr must be finite and non-negative, got {}", self.outer_lr)));
        }
        if !self.inner_lr.is_finite() || self.inner_lr < 0.0 {
            return Err(Error::config(format!("inner_lr must be finite and non-negative, got {}", self.inner_lr)));
        }
        if self.gamma < 2 {
            return Err(Error::config(format!("gamma must be at least 2, got {}", self.gamma)));
        }
        if self.ipc == 0 {
            return Err(Error::config("ipc must be at least 1"));
        }
        if let Some(m) = self.synth_per_class {
            if m == 0 || m > self.ipc {
                return Err(Error::config(format!("synth_per_class must be in 1..={}, got {m}", self.ipc)));
            }
        }
        if self.real_per_class == 0 {
            return Err(Error::config("real_per_class must be at least 1"));
        }
        if self.query_size == 0 {
            return Err(Error::config("query_size must be at least 1"));
        }
        Ok(())
    }

    pub fn synth_batch(&self) -> usize {
        self.synth_per_class.unwrap_or(self.ipc.min(256))
    }

    /// Outer learning rate at a global outer iteration: halved at each milestone reached.
    pub fn outer_lr_at(&self, outer_iter: usize) -> f64 {
        let halvings = self.outer_lr_milestones.iter().filter(|&&m| outer_iter >= m).count();
        self.outer_lr * 0.5f64.powi(halvings as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = CondenseConfig::default();
        assert_eq!(c.outer_lr_at(0), 0.1);
        assert_eq!(c.outer_lr_at(1199), 0.1);
        assert_eq!(c.outer_lr_at(1200), 0.05);
        assert_eq!(c.outer_lr_at(1400), 0.025);
        assert_eq!(c.outer_lr_at(1800), 0.0125);
    }

    #[test]
    fn invariants_enforced() {
        let ok = CondenseConfig::default();
        ok.validate().unwrap();
        for bad in [
            CondenseConfig { lambda1: 0.0, ..ok.clone() },
            CondenseConfig { lambda2: -1.0, ..ok.clone() },
            CondenseConfig { gamma: 1, ..ok.clone() },
            CondenseConfig { ipc: 0, ..ok.clone() },
            CondenseConfig { synth_per_class: Some(2), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn synth_batch_default() {
        let c = CondenseConfig { ipc: 300, ..Default::default() };
        assert_eq!(c.synth_batch(), 256);
        assert_eq!(CondenseConfig { ipc: 10, ..c }.synth_batch(), 10);
    }
}

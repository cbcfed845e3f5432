use serde::{Deserialize, Serialize};

/// Plateau and early-stopping rules on a per-epoch loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Multiplies the learning rate on a plateau.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// An epoch improves only if it beats the best loss by more than this.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            plateau_factor: 0.05,
            plateau_patience: 5,
            early_stop_patience: 10,
            threshold: 1e-4,
            min_lr: 1e-7,
        }
    }
}

/// Epochs since the last improvement over the running best.
pub fn epochs_since_improvement(history: &[f64], threshold: f64) -> usize {
    let Some(&first) = history.first() else {
        return 0;
    };
    let (mut best, mut last) = (first, 0);
    for (i, &l) in history.iter().enumerate().skip(1) {
        if l < best - threshold {
            best = l;
            last = i;
        }
    }
    history.len() - 1 - last
}

/// Scales `lr` by the plateau factor after every `plateau_patience` epochs
/// without improvement, never going below `min_lr`.
pub fn reduce_lr_on_plateau(history: &[f64], lr: f64, cfg: &ScheduleConfig) -> f64 {
    let stale = epochs_since_improvement(history, cfg.threshold);
    if stale > 0 && stale % cfg.plateau_patience == 0 {
        (lr * cfg.plateau_factor).max(cfg.min_lr).min(lr)
    } else {
        lr
    }
}

pub fn early_stop(history: &[f64], cfg: &ScheduleConfig) -> bool {
    epochs_since_improvement(history, cfg.threshold) >= cfg.early_stop_patience
}

//! Reduce-on-plateau learning rate and early stopping on validation loss.

use serde::{Deserialize, Serialize};

/// Minimum decrease in validation loss that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: Option<f64>,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_delta: MIN_DELTA,
            min_lr: 1e-6,
            best: None,
            wait: 0,
        }
    }

    /// Record one epoch's validation loss and return the learning rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(best) if val_loss > best - self.min_delta => {
                self.wait += 1;
                if self.wait >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr.min(self.lr));
                    self.wait = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying `history` through a fresh scheduler.
pub fn plateau_scheduler(history: &[f64], lr: f64, factor: f64, patience: usize) -> f64 {
    let mut s = PlateauScheduler::new(lr, factor, patience);
    for &v in history {
        s.observe(v);
    }
    s.lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            min_delta: MIN_DELTA,
            best: None,
            wait: 0,
        }
    }

    /// Record one epoch; `true` means stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        match self.best {
            Some(best) if val_loss > best - self.min_delta => self.wait += 1,
            _ => {
                self.best = Some(val_loss);
                self.wait = 0;
            }
        }
        self.wait >= self.patience
    }
}

/// Whether `history` has gone `patience` epochs without improving.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut e = EarlyStopping::new(patience);
    history.iter().any(|&v| e.observe(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_keep_lr() {
        let h: Vec<f64> = (0..20).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert_eq!(plateau_scheduler(&h, 0.001, 0.25, 5), 0.001);
        assert!(!early_stop(&h, 10));
    }

    #[test]
    fn stagnation_triggers() {
        assert_eq!(plateau_scheduler(&[1.0; 6], 0.001, 0.25, 5), 0.00025);
        assert_eq!(plateau_scheduler(&[1.0; 5], 0.001, 0.25, 5), 0.001);
        assert_eq!(plateau_scheduler(&[1.0; 11], 0.001, 0.25, 5), 0.0000625);
    }

    #[test]
    fn lr_floor() {
        assert_eq!(plateau_scheduler(&[1.0; 200], 0.001, 0.25, 5), 1e-6);
    }

    #[test]
    fn early_stop_counter_resets() {
        assert!(early_stop(&[1.0; 11], 10));
        assert!(!early_stop(&[1.0; 10], 10));
        // An improvement after nine stagnant epochs restarts the count.
        let mut h = vec![1.0; 10];
        h.push(0.5);
        h.extend([0.5; 9]);
        assert!(!early_stop(&h, 10));
        h.push(0.5);
        assert!(early_stop(&h, 10));
    }
}

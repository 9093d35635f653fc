//! Optimizer and learning-rate machinery: Adam, global-norm gradient
//! clipping, and the two-phase scheduler.
//!
//! The scheduler starts in reduce-on-plateau mode (halve the rate every
//! `rrp_patience` stagnant epochs, floored at the cyclic base rate). Once
//! validation accuracy has stagnated for `switch_after` epochs it switches
//! to a triangular cyclic schedule that sweeps between `clr_base` and
//! `clr_max` with half-period `clr_step`, and after `early_stop` stagnant
//! epochs it calls the run off. A single stagnation counter drives all
//! three thresholds; any strict improvement resets it (and signals the
//! caller to snapshot the model).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::NdArray;

/// Adam moment estimates for every tensor of a parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|p| NdArray::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| NdArray::zeros(p.value.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for k in 0..p.value.len() {
                let g = p.grad.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * g;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * g * g;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.value.data_mut()[k] -= lr * update;
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store.iter().map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.grad.data_mut().iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Scheduler thresholds and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Initial learning rate for the plateau phase.
    pub lr0: f64,
    /// Multiplier applied on each plateau.
    pub rrp_factor: f64,
    /// Stagnant epochs between plateau reductions.
    pub rrp_patience: usize,
    /// Stagnant epochs before switching to the cyclic phase.
    pub switch_after: usize,
    /// Cyclic phase: lowest rate (also the plateau-phase floor).
    pub clr_base: f64,
    /// Cyclic phase: peak rate.
    pub clr_max: f64,
    /// Cyclic phase: epochs from base to peak (half a cycle).
    pub clr_step: usize,
    /// Stagnant epochs before training stops.
    pub early_stop: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            lr0: 1e-3,
            rrp_factor: 0.5,
            rrp_patience: 5,
            switch_after: 15,
            clr_base: 1e-5,
            clr_max: 1e-3,
            clr_step: 5,
            early_stop: 30,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr0", self.lr0), ("clr_base", self.clr_base), ("clr_max", self.clr_max)]
        {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("scheduler {name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rrp_factor) || self.rrp_factor <= 0.0 {
            return Err(Error::Config(format!(
                "rrp_factor must lie in (0, 1), got {}",
                self.rrp_factor
            )));
        }
        if self.rrp_patience == 0 || self.clr_step == 0 {
            return Err(Error::Config("rrp_patience and clr_step must be nonzero".into()));
        }
        if self.switch_after >= self.early_stop {
            return Err(Error::Config(format!(
                "switch_after ({}) must come before early_stop ({})",
                self.switch_after, self.early_stop
            )));
        }
        Ok(())
    }
}

/// Which schedule currently sets the rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ReducePlateau,
    Cyclic,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::ReducePlateau => write!(f, "rrp"),
            Phase::Cyclic => write!(f, "clr"),
        }
    }
}

/// What [`SchedulerState::observe`] decided for the epoch just finished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    /// Strict best-so-far improvement — snapshot the model now.
    pub improved: bool,
    /// Patience exhausted — stop training.
    pub stop: bool,
}

/// Mutable scheduler state across epochs.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    lr_rrp: f64,
    phase: Phase,
    epochs_since_best: usize,
    best_val: f64,
    switch_epoch: Option<usize>,
}

impl SchedulerState {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        SchedulerState {
            lr_rrp: cfg.lr0,
            phase: Phase::ReducePlateau,
            epochs_since_best: 0,
            best_val: f64::NEG_INFINITY,
            switch_epoch: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    /// Learning rate to use for epoch `epoch` (0-based).
    pub fn lr_for_epoch(&self, cfg: &SchedulerConfig, epoch: usize) -> f64 {
        match self.phase {
            Phase::ReducePlateau => self.lr_rrp,
            Phase::Cyclic => {
                let rel = epoch.saturating_sub(self.switch_epoch.expect("cyclic phase has a start"));
                let x = rel % (2 * cfg.clr_step);
                let tri = if x <= cfg.clr_step {
                    x as f64 / cfg.clr_step as f64
                } else {
                    (2 * cfg.clr_step - x) as f64 / cfg.clr_step as f64
                };
                cfg.clr_base + (cfg.clr_max - cfg.clr_base) * tri
            }
        }
    }

    /// Fold in the validation score of finished epoch `epoch` and advance
    /// the schedule for the next one.
    pub fn observe(&mut self, cfg: &SchedulerConfig, epoch: usize, val_acc: f64) -> Tick {
        let improved = val_acc > self.best_val;
        if improved {
            self.best_val = val_acc;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }

        let stop = self.epochs_since_best >= cfg.early_stop;
        if !stop && self.phase == Phase::ReducePlateau && self.epochs_since_best > 0 {
            if self.epochs_since_best >= cfg.switch_after {
                self.phase = Phase::Cyclic;
                // The cyclic phase starts at the next epoch, at the base
                // rate.
                self.switch_epoch = Some(epoch + 1);
            } else if self.epochs_since_best % cfg.rrp_patience == 0 {
                self.lr_rrp = (self.lr_rrp * cfg.rrp_factor).max(cfg.clr_base);
            }
        }
        Tick { improved, stop }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamStore;
    use approx::assert_relative_eq;

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut store = ParamStore::new();
        let n = values.len();
        store.add("p", NdArray::from_vec(&[n], values).unwrap());
        store.iter_mut().next().unwrap().grad.data_mut().copy_from_slice(&grads);
        store
    }

    #[test]
    fn adam_matches_a_hand_rolled_reference_over_three_steps() {
        let grads = [0.3_f64, -1.2, 0.7];
        let mut store = store_with(vec![1.0], vec![grads[0]]);
        let mut adam = AdamState::new(&store);

        // Independent scalar reference.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let (mut m, mut v, mut theta) = (0.0, 0.0, 1.0);
        for (t, &g) in grads.iter().enumerate() {
            store.iter_mut().next().unwrap().grad.data_mut()[0] = g;
            adam.step(&mut store, lr);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1_pow(b1, t as u64 + 1));
            let vh = v / (1.0 - b1_pow(b2, t as u64 + 1));
            theta -= lr * mh / (vh.sqrt() + eps);
            assert_relative_eq!(
                store.iter().next().unwrap().value.data()[0],
                theta,
                max_relative = 1e-14
            );
        }
    }

    fn b1_pow(b: f64, t: u64) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn first_adam_step_moves_by_roughly_the_learning_rate() {
        // With bias correction, the first step is lr · g/(|g| + ε̃).
        let mut store = store_with(vec![0.0], vec![1.0]);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 1e-3);
        let moved = -store.iter().next().unwrap().value.data()[0];
        assert_relative_eq!(moved, 1e-3, max_relative = 1e-6);
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let mut store = store_with(vec![0.0, 0.0], vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut store, 5.0);
        assert_relative_eq!(norm, 5.0, max_relative = 1e-15);
        assert_eq!(store.iter().next().unwrap().grad.data(), &[3.0, 4.0]);

        let norm = clip_global_norm(&mut store, 1.0);
        assert_relative_eq!(norm, 5.0, max_relative = 1e-15);
        let g = store.iter().next().unwrap().grad.data().to_vec();
        assert_relative_eq!((g[0] * g[0] + g[1] * g[1]).sqrt(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(g[1] / g[0], 4.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn stagnation_walks_through_halving_switching_and_stopping() {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(&cfg);
        // Epoch 0 improves, everything after stagnates.
        let tick = s.observe(&cfg, 0, 0.9);
        assert!(tick.improved && !tick.stop);
        assert_relative_eq!(s.lr_for_epoch(&cfg, 1), 1e-3);

        let mut switch_at = None;
        for epoch in 1..=31 {
            let tick = s.observe(&cfg, epoch, 0.5);
            assert!(!tick.improved);
            let counter = epoch; // epochs since the epoch-0 best
            match counter {
                1..=4 => assert_relative_eq!(s.lr_for_epoch(&cfg, epoch + 1), 1e-3),
                5..=9 => assert_relative_eq!(s.lr_for_epoch(&cfg, epoch + 1), 5e-4),
                10..=14 => assert_relative_eq!(s.lr_for_epoch(&cfg, epoch + 1), 2.5e-4),
                _ => {}
            }
            if counter == 15 {
                assert_eq!(s.phase(), Phase::Cyclic);
                switch_at = Some(epoch + 1);
            }
            if counter < 30 {
                assert!(!tick.stop, "stopped early at counter {counter}");
            } else if counter == 30 {
                assert!(tick.stop, "patience 30 must stop the run");
                break;
            }
        }
        // Triangular shape relative to the switch epoch.
        let s0 = switch_at.unwrap();
        assert_relative_eq!(s.lr_for_epoch(&cfg, s0), 1e-5);
        assert_relative_eq!(s.lr_for_epoch(&cfg, s0 + 5), 1e-3);
        assert_relative_eq!(s.lr_for_epoch(&cfg, s0 + 10), 1e-5);
        assert_relative_eq!(
            s.lr_for_epoch(&cfg, s0 + 2),
            1e-5 + (1e-3 - 1e-5) * 0.4,
            max_relative = 1e-12
        );
    }

    #[test]
    fn improvement_resets_the_stagnation_counter() {
        let cfg = SchedulerConfig::default();
        let mut s = SchedulerState::new(&cfg);
        let mut val = 0.5;
        for epoch in 0..40 {
            // Improve every fourth epoch: the counter never reaches 5.
            if epoch % 4 == 0 {
                val += 0.01;
            }
            let tick = s.observe(&cfg, epoch, val);
            assert!(!tick.stop);
            assert_eq!(tick.improved, epoch % 4 == 0);
        }
        assert_relative_eq!(s.lr_for_epoch(&cfg, 40), 1e-3, max_relative = 1e-15);
        assert_eq!(s.phase(), Phase::ReducePlateau);
    }

    #[test]
    fn plateau_reductions_floor_at_the_cyclic_base_rate() {
        let cfg = SchedulerConfig { lr0: 4e-5, ..SchedulerConfig::default() };
        let mut s = SchedulerState::new(&cfg);
        s.observe(&cfg, 0, 0.9);
        for epoch in 1..=10 {
            s.observe(&cfg, epoch, 0.1);
        }
        // 4e-5 → 2e-5 → floor 1e-5 (not 1e-5 · 0.5).
        assert_relative_eq!(s.lr_for_epoch(&cfg, 11), 1e-5, max_relative = 1e-15);
    }

    #[test]
    fn scheduler_config_validation_catches_nonsense() {
        let mut cfg = SchedulerConfig::default();
        cfg.rrp_factor = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SchedulerConfig::default();
        cfg.switch_after = 30;
        assert!(cfg.validate().is_err(), "switching after the stop point is unreachable");
        let mut cfg = SchedulerConfig::default();
        cfg.clr_step = 0;
        assert!(cfg.validate().is_err());
        assert!(SchedulerConfig::default().validate().is_ok());
    }
}

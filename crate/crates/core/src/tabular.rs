//! Tabular twin of the deep trainer: a small deterministic MDP with the
//! same action layout, rewards, step cap, and masking, trained with the
//! same clipped-target arithmetic. Exists so Q-learning can be checked
//! against an exact fixed point without a network in the way.

use serde::{Deserialize, Serialize};

use crate::clip::Label;
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::trainer::{argmax_masked, bootstrap_target, masked_max};

/// A finite MDP over labeled states: region actions walk a fixed
/// transition table, classification ends the episode with the usual
/// correct/incorrect reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub labels: Vec<Label>,
    /// region_next[s][r] is the state after region action r in state s.
    pub region_next: Vec<Vec<usize>>,
    pub n_steps: usize,
    pub r_correct: f64,
    pub r_incorrect: f64,
    pub r_region: f64,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("need at least one state".into()));
        }
        if self.region_next.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "{} states but {} transition rows",
                self.labels.len(),
                self.region_next.len()
            )));
        }
        let k = self.num_regions();
        if k == 0 {
            return Err(Error::Config("need at least one region action".into()));
        }
        for (s, row) in self.region_next.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Config(format!(
                    "state {s} has {} region targets, expected {k}",
                    row.len()
                )));
            }
            if let Some(&bad) = row.iter().find(|&&n| n >= self.labels.len()) {
                return Err(Error::Config(format!("state {s} jumps to missing state {bad}")));
            }
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be nonzero".into()));
        }
        if self.r_correct <= 0.0 || self.r_incorrect >= 0.0 {
            return Err(Error::Config("classification rewards must straddle zero".into()));
        }
        if self.r_region <= 0.0 || self.r_region >= self.r_correct {
            return Err(Error::Config(format!(
                "r_region {} must sit in (0, {})",
                self.r_region, self.r_correct
            )));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.labels.len()
    }

    pub fn num_regions(&self) -> usize {
        self.region_next.first().map_or(0, |r| r.len())
    }

    pub fn num_actions(&self) -> usize {
        self.num_regions() + 2
    }

    /// Analytic return range, same shape as the env's.
    pub fn q_bounds(&self) -> (f64, f64) {
        (self.r_incorrect, self.r_correct + (self.n_steps - 1) as f64 * self.r_region)
    }

    /// Valid actions at a step: classification always, regions while a
    /// later step remains for classifying.
    pub fn action_mask(&self, step: usize) -> Vec<bool> {
        let k = self.num_regions();
        let regions_ok = step + 1 < self.n_steps;
        let mut mask = vec![regions_ok; k + 2];
        mask[k] = true;
        mask[k + 1] = true;
        mask
    }

    /// Apply an action index: reward, the successor (state, step) while the
    /// episode continues, and the done flag.
    pub fn step(&self, state: usize, step: usize, action: usize) -> Result<(f64, Option<(usize, usize)>, bool)> {
        let k = self.num_regions();
        if state >= self.num_states() || step >= self.n_steps || action >= k + 2 {
            return Err(Error::InvalidAction(format!(
                "state {state} step {step} action {action} out of range"
            )));
        }
        if action < k {
            if step + 1 >= self.n_steps {
                return Err(Error::InvalidAction("region action at the final step".into()));
            }
            return Ok((self.r_region, Some((self.region_next[state][action], step + 1)), false));
        }
        let predicted = if action == k { Label::Violent } else { Label::NonViolent };
        let reward = if predicted == self.labels[state] { self.r_correct } else { self.r_incorrect };
        Ok((reward, None, true))
    }
}

/// Q[state][step][action] as a flat table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub num_states: usize,
    pub n_steps: usize,
    pub num_actions: usize,
    pub q: Vec<f64>,
}

impl QTable {
    pub fn zeros(mdp: &TabularMdp) -> QTable {
        QTable {
            num_states: mdp.num_states(),
            n_steps: mdp.n_steps,
            num_actions: mdp.num_actions(),
            q: vec![0.0; mdp.num_states() * mdp.n_steps * mdp.num_actions()],
        }
    }

    pub fn idx(&self, state: usize, step: usize, action: usize) -> usize {
        (state * self.n_steps + step) * self.num_actions + action
    }

    pub fn get(&self, state: usize, step: usize, action: usize) -> f64 {
        self.q[self.idx(state, step, action)]
    }

    /// Row of action values at one (state, step).
    pub fn row(&self, state: usize, step: usize) -> &[f64] {
        let base = self.idx(state, step, 0);
        &self.q[base..base + self.num_actions]
    }

    /// Largest difference to another table over every entry.
    pub fn linf_distance(&self, other: &QTable) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub episodes: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// Behavior-policy exploration rate, held fixed; 1.0 is uniform random
    /// over valid actions, which keeps every table entry visited.
    pub epsilon: f64,
    pub q_min: Option<f64>,
    pub q_max: Option<f64>,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            episodes: 60_000,
            alpha: 0.2,
            gamma: 0.9,
            epsilon: 1.0,
            q_min: None,
            q_max: None,
            seed: 0,
        }
    }
}

impl TabularConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} not in [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// Off-policy Q-learning over the table, episodes started from uniformly
/// random (state, step) pairs so every entry is reachable. Targets go
/// through the same clipped bootstrap as the network trainer.
pub fn tabular_q_learning(mdp: &TabularMdp, cfg: &TabularConfig) -> Result<QTable> {
    mdp.validate()?;
    cfg.validate()?;
    let (lo, hi) = mdp.q_bounds();
    let (q_min, q_max) = (cfg.q_min.unwrap_or(lo), cfg.q_max.unwrap_or(hi));
    if !(q_min < q_max) {
        return Err(Error::Config(format!("q_min {q_min} must be below q_max {q_max}")));
    }
    let mut table = QTable::zeros(mdp);
    let mut rng = Pcg32::new(cfg.seed, 29);
    for _ in 0..cfg.episodes {
        let mut state = rng.below(mdp.num_states());
        let mut step = rng.below(mdp.n_steps);
        loop {
            let mask = mdp.action_mask(step);
            let action = if rng.chance(cfg.epsilon) {
                let valid: Vec<usize> =
                    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
                valid[rng.below(valid.len())]
            } else {
                argmax_masked(table.row(state, step), &mask).expect("classify always valid")
            };
            let (reward, next, done) = mdp.step(state, step, action)?;
            let best_next = next.map(|(ns, nt)| {
                masked_max(table.row(ns, nt), &mdp.action_mask(nt)).expect("classify always valid")
            });
            let y = bootstrap_target(reward, best_next, cfg.gamma, q_min, q_max);
            let i = table.idx(state, step, action);
            table.q[i] += cfg.alpha * (y - table.q[i]);
            match next {
                Some((ns, nt)) if !done => {
                    state = ns;
                    step = nt;
                }
                _ => break,
            }
        }
    }
    Ok(table)
}

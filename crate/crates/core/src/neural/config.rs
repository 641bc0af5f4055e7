//! Estimator configuration and the parameter prior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::StepDecay;
use crate::error::{Error, Result};
use crate::gsun::{GsunTheta, THETA_NAMES};
use crate::numcore::rng::RngStream;

/// Independent uniform boxes for the seven parameters, in wire order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub lower: [f64; 7],
    pub upper: [f64; 7],
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { lower: [0.3, 0.01, 0.3, 0.01, 0.3, -3.0, -3.0], upper: [3.0, 1.0, 2.0, 1.0, 2.0, 3.0, 3.0] }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for k in 0..7 {
            let (lo, hi) = (self.lower[k], self.upper[k]);
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!("prior box for {} is ({lo}, {hi})", THETA_NAMES[k])));
            }
        }
        if let Some(k) = (0..5).find(|&k| self.lower[k] <= 0.0) {
            return Err(Error::InvalidParameter(format!("prior box for {} must be positive", THETA_NAMES[k])));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 7] {
        std::array::from_fn(|k| 0.5 * (self.lower[k] + self.upper[k]))
    }

    pub fn half_width(&self) -> [f64; 7] {
        std::array::from_fn(|k| 0.5 * (self.upper[k] - self.lower[k]))
    }

    pub fn clip(&self, theta: [f64; 7]) -> [f64; 7] {
        std::array::from_fn(|k| theta[k].clamp(self.lower[k], self.upper[k]))
    }

    pub fn contains(&self, theta: &[f64; 7]) -> bool {
        (0..7).all(|k| theta[k] >= self.lower[k] && theta[k] <= self.upper[k])
    }
}

/// Independent uniform draws, with no rejection near `δ = 0`.
pub fn sample_prior(prior: &PriorSpec, rng: &mut RngStream) -> GsunTheta {
    GsunTheta::from_array(std::array::from_fn(|k| rng.random_range(prior.lower[k]..prior.upper[k])))
}

/// Stop once the loss stays below `eps` for `consecutive` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stopping {
    pub eps: f64,
    pub consecutive: usize,
}

/// Running state of a [`Stopping`] rule.
#[derive(Debug, Clone, Default)]
pub struct StopTracker {
    run: usize,
}

impl StopTracker {
    /// Feeds one loss; true when the rule fires.
    pub fn update(&mut self, rule: &Stopping, loss: f64) -> bool {
        if loss < rule.eps {
            self.run += 1;
        } else {
            self.run = 0;
        }
        rule.consecutive > 0 && self.run >= rule.consecutive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Output width of each GAT layer. All but the last concatenate heads,
    /// so their widths must be divisible by `gat_heads`; the last averages.
    pub gat_dims: Vec<usize>,
    pub gat_heads: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    /// Hidden width of the encoder feed-forward sublayers and of the FFN
    /// between the GAT stack and the encoders.
    pub ffn_hidden: usize,
    /// Hidden width of the prediction head.
    pub head_hidden: usize,
    pub dropout: f64,
    pub radius: f64,
    pub prior: PriorSpec,
    pub schedule: StepDecay,
    pub stopping: Stopping,
    pub max_iterations: usize,
    /// Global gradient-norm clip; zero disables.
    pub clip_norm: f64,
}

/// Radius paired with three GAT layers.
pub const BASE_RADIUS: f64 = 0.34;

/// Radius scaled to the layer count so the stack still spans the domain.
pub fn radius_for_layers(layers: usize) -> f64 {
    BASE_RADIUS * 3.0 / layers.max(1) as f64
}

impl EstimatorConfig {
    /// Full-size network.
    pub fn paper() -> Self {
        Self {
            gat_dims: vec![32, 256, 512],
            gat_heads: 8,
            encoder_blocks: 6,
            encoder_heads: 8,
            ffn_hidden: 1024,
            head_hidden: 128,
            dropout: 0.1,
            radius: radius_for_layers(3),
            prior: PriorSpec::default(),
            schedule: StepDecay { base_lr: 1e-3, milestones: vec![1_000_000, 5_000_000, 10_000_000, 30_000_000], gamma: 0.1 },
            stopping: Stopping { eps: 1e-5, consecutive: 100 },
            max_iterations: 50_000_000,
            clip_norm: 0.0,
        }
    }

    /// Small network that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            gat_dims: vec![8, 16, 16],
            gat_heads: 2,
            encoder_blocks: 2,
            encoder_heads: 2,
            ffn_hidden: 32,
            head_hidden: 32,
            dropout: 0.1,
            radius: radius_for_layers(3),
            prior: PriorSpec::default(),
            schedule: StepDecay { base_lr: 3e-3, milestones: vec![1500], gamma: 0.1 },
            stopping: Stopping { eps: 1e-5, consecutive: 100 },
            max_iterations: 2000,
            clip_norm: 5.0,
        }
    }

    /// Width of the node embeddings entering the encoders.
    pub fn model_dim(&self) -> usize {
        *self.gat_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.gat_dims.is_empty() || self.gat_dims.contains(&0) {
            return bad(format!("gat dims {:?} must be non-empty and positive", self.gat_dims));
        }
        if self.gat_heads == 0 || self.encoder_heads == 0 {
            return bad("head counts must be positive".into());
        }
        for d in &self.gat_dims[..self.gat_dims.len() - 1] {
            if d % self.gat_heads != 0 {
                return bad(format!("gat dim {d} not divisible by {} heads", self.gat_heads));
            }
        }
        if self.model_dim() % self.encoder_heads != 0 {
            return bad(format!("encoder dim {} not divisible by {} heads", self.model_dim(), self.encoder_heads));
        }
        if self.ffn_hidden == 0 || self.head_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius {} must be positive", self.radius));
        }
        if !(self.schedule.base_lr > 0.0) || !(self.schedule.gamma > 0.0) {
            return bad("learning rate schedule must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip norm must be non-negative".into());
        }
        self.prior.validate()
    }

    /// Stable hash of the configuration, stored with the weights.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

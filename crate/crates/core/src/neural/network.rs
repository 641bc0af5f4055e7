//! The estimator network: GAT stack, distance embedding, encoder stack,
//! pooling over nodes and replicates, and the prediction head.

use serde::{Deserialize, Serialize};

use super::config::EstimatorConfig;
use super::graph::{GraphBatch, DIST_BINS};
use crate::autodiff::layers::{EncoderBlock, FeedForward, GatLayer, Linear};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gsun::{GsunTheta, SpatialSample};
use crate::numcore::rng::RngStream;

/// Node features per graph: value and two coordinates.
pub const NODE_FEATURES: usize = 3;

/// Layer handles of the network. The tensors live in the accompanying
/// [`ParamStore`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub gat: Vec<GatLayer>,
    pub dist: Linear,
    pub ffn: FeedForward,
    pub blocks: Vec<EncoderBlock>,
    pub head: FeedForward,
}

impl Network {
    /// Registers every parameter in `store` in a fixed order.
    pub fn build(config: &EstimatorConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut gat = Vec::new();
        let mut inputs = NODE_FEATURES;
        let last = config.gat_dims.len() - 1;
        for (l, &d) in config.gat_dims.iter().enumerate() {
            let concat = l < last;
            let per_head = if concat { d / config.gat_heads } else { d };
            let layer = GatLayer::new(store, &format!("gat{l}"), inputs, per_head, config.gat_heads, concat, rng);
            inputs = layer.output_dim();
            gat.push(layer);
        }
        let d = config.model_dim();
        let dist = Linear::new(store, "dist", DIST_BINS, d, true, rng);
        let ffn = FeedForward::new(store, "ffn", d, config.ffn_hidden, d, rng);
        let blocks = (0..config.encoder_blocks)
            .map(|b| EncoderBlock::new(store, &format!("enc{b}"), d, config.encoder_heads, config.ffn_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = FeedForward::new(store, "head", d, config.head_hidden, 7, rng);
        Ok(Self { gat, dist, ffn, blocks, head })
    }
}

/// Trained (or freshly initialized) estimator.
#[derive(Debug, Clone)]
pub struct EstimatorWeights {
    pub config: EstimatorConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl EstimatorWeights {
    pub fn init(config: &EstimatorConfig, rng: &mut RngStream) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store, rng)?;
        Ok(Self { config: config.clone(), store, net })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }
}

/// Records the network on `tape` and returns the 1×7 raw prediction.
pub fn forward_tape(tape: &mut Tape, w: &EstimatorWeights, store: &ParamStore, batch: &GraphBatch, training: bool, rng: &mut RngStream) -> Result<Var> {
    let cfg = &w.config;
    let net = &w.net;
    let dist_in = tape.constant(batch.dist_features.clone());
    let dist_emb = net.dist.forward(tape, store, dist_in)?;
    let mut pooled: Option<Var> = None;
    for g in &batch.graphs {
        if g.features.cols != NODE_FEATURES || g.len() != batch.nodes() {
            return Err(Error::ShapeMismatch(format!("graph with {}x{} features in a batch of {} nodes", g.len(), g.features.cols, batch.nodes())));
        }
        let mut h = tape.constant(g.features.clone());
        for layer in &net.gat {
            h = layer.forward(tape, store, h, &batch.adjacency)?;
            h = tape.dropout(h, cfg.dropout, training, rng)?;
        }
        h = tape.add(h, dist_emb)?;
        h = net.ffn.forward(tape, store, h)?;
        h = tape.dropout(h, cfg.dropout, training, rng)?;
        for block in &net.blocks {
            h = block.forward(tape, store, h, cfg.dropout, training, rng)?;
        }
        let m = tape.mean_rows(h);
        pooled = Some(match pooled {
            None => m,
            Some(p) => tape.add(p, m)?,
        });
    }
    let pooled = pooled.ok_or_else(|| Error::DimensionMismatch("empty graph batch".into()))?;
    let pooled = tape.scale(pooled, 1.0 / batch.replicates() as f64);
    let raw = net.head.forward(tape, store, pooled)?;
    let hw = tape.constant(Tensor::row(&cfg.prior.half_width()));
    let scaled = tape.mul(raw, hw)?;
    let center = tape.constant(Tensor::row(&cfg.prior.center()));
    tape.add_row(scaled, center)
}

/// Unclipped 7-vector prediction.
pub fn forward(w: &EstimatorWeights, batch: &GraphBatch, training: bool, rng: &mut RngStream) -> Result<[f64; 7]> {
    let mut tape = Tape::new();
    let out = forward_tape(&mut tape, w, &w.store, batch, training, rng)?;
    let v = tape.value(out);
    Ok(std::array::from_fn(|k| v.data[k]))
}

/// True when both skewness parameters are within 0.1 of zero, where the
/// latent range and smoothness are not identifiable.
pub fn loss_is_masked(theta: &GsunTheta) -> bool {
    theta.delta1.abs() <= 0.1 && theta.delta2.abs() <= 0.1
}

fn loss_mask(theta: &GsunTheta) -> [f64; 7] {
    if loss_is_masked(theta) {
        [1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
    } else {
        [1.0; 7]
    }
}

/// Mean squared error over the unmasked components.
pub fn masked_loss(theta_true: &GsunTheta, theta_hat: &[f64; 7]) -> f64 {
    let mask = loss_mask(theta_true);
    let t = theta_true.to_array();
    let count: f64 = mask.iter().sum();
    (0..7).map(|k| mask[k] * (theta_hat[k] - t[k]).powi(2)).sum::<f64>() / count
}

/// [`masked_loss`] recorded on a tape.
pub fn masked_loss_tape(tape: &mut Tape, theta_true: &GsunTheta, theta_hat: Var) -> Result<Var> {
    let mask = loss_mask(theta_true);
    let count: f64 = mask.iter().sum();
    let t = tape.constant(Tensor::row(&theta_true.to_array()));
    let diff = tape.sub(theta_hat, t)?;
    let sq = tape.square(diff);
    let m = tape.constant(Tensor::row(&mask));
    let masked = tape.mul(sq, m)?;
    let s = tape.sum_all(masked);
    Ok(tape.scale(s, 1.0 / count))
}

/// Point estimate from every replicate of `sample`, clipped into the prior.
pub fn estimate(w: &EstimatorWeights, sample: &SpatialSample, radius: f64) -> Result<GsunTheta> {
    let batch = GraphBatch::from_sample(sample, radius)?;
    estimate_batch(w, &batch)
}

pub fn estimate_batch(w: &EstimatorWeights, batch: &GraphBatch) -> Result<GsunTheta> {
    let raw = forward(w, batch, false, &mut RngStream::new(0))?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::DomainError("estimator produced a non-finite output".into()));
    }
    Ok(GsunTheta::from_array(w.config.prior.clip(raw)))
}

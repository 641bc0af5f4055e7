//! Bootstrap-then-simulate quantiles of the estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::GraphBatch;
use super::network::{estimate_batch, EstimatorWeights};
use crate::error::{Error, Result};
use crate::gsun::{simulate, GsunTheta, SpatialSample};
use crate::numcore::rng::RngStream;

/// Default levels: the central 95%, 90% and 50% intervals and the median.
pub const DEFAULT_LEVELS: [f64; 7] = [0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub levels: Vec<f64>,
    /// `quantiles[l][p]` is the `levels[l]` quantile of parameter `p`.
    pub quantiles: Vec<[f64; 7]>,
    /// Mean of the bootstrap estimates.
    pub theta_bar: [f64; 7],
    /// Estimates from the `k` simulated data sets.
    pub estimates: Vec<[f64; 7]>,
}

impl QuantileTable {
    /// Quantile of parameter `p` at `level`, if that level is tabulated.
    pub fn get(&self, level: f64, p: usize) -> Option<f64> {
        self.levels.iter().position(|l| (l - level).abs() < 1e-12).map(|i| self.quantiles[i][p])
    }

    pub fn is_monotone(&self) -> bool {
        self.quantiles.windows(2).all(|w| (0..7).all(|p| w[0][p] <= w[1][p]))
    }

    /// Whether `[q(lo), q(hi)]` contains `theta[p]`.
    pub fn covers(&self, lo: f64, hi: f64, p: usize, theta: &GsunTheta) -> Option<bool> {
        let t = theta.to_array()[p];
        Some(self.get(lo, p)? <= t && t <= self.get(hi, p)?)
    }
}

/// Linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `j` node-bootstrap estimates are averaged into `Θ̄`; `k` data sets are
/// then simulated from `Θ̄` at the observed locations, each with as many
/// replicates as `sample`, and estimated. Returns quantiles of those `k`
/// estimates at `levels`.
pub fn uncertainty(
    w: &EstimatorWeights,
    sample: &SpatialSample,
    j: usize,
    k: usize,
    radius: f64,
    levels: &[f64],
    rng: &mut RngStream,
) -> Result<QuantileTable> {
    if j == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!("bootstrap needs j >= 1 and k >= 1, got j={j}, k={k}")));
    }
    if levels.iter().any(|l| !(0.0..=1.0).contains(l)) || levels.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidParameter("quantile levels must be sorted within [0, 1]".into()));
    }
    let n = sample.locs.len();
    let reps = sample.replicates();
    let points = sample.locs.points();

    let mut boot = rng.substream("bootstrap", 0);
    let mut theta_bar = [0.0; 7];
    for _ in 0..j {
        let idx: Vec<usize> = (0..n).map(|_| boot.random_range(0..n)).collect();
        let pts: Vec<[f64; 2]> = idx.iter().map(|&i| points[i]).collect();
        let vals: Vec<Vec<f64>> = (0..reps).map(|r| idx.iter().map(|&i| sample.values[(i, r)]).collect()).collect();
        let batch = GraphBatch::from_points(&pts, &vals, radius)?;
        let est = estimate_batch(w, &batch)?.to_array();
        for p in 0..7 {
            theta_bar[p] += est[p] / j as f64;
        }
    }

    let bar = GsunTheta::from_array(theta_bar);
    let mut sim_rng = rng.substream("simulate", 0);
    let sims = simulate(&bar, &sample.locs, k * reps, &mut sim_rng)?;
    let mut estimates = Vec::with_capacity(k);
    for s in 0..k {
        let vals: Vec<Vec<f64>> = (0..reps).map(|r| sims.replicate(s * reps + r).as_slice().to_vec()).collect();
        let batch = GraphBatch::from_points(points, &vals, radius)?;
        estimates.push(estimate_batch(w, &batch)?.to_array());
    }

    let mut quantiles = vec![[0.0; 7]; levels.len()];
    for p in 0..7 {
        let mut col: Vec<f64> = estimates.iter().map(|e| e[p]).collect();
        col.sort_by(f64::total_cmp);
        for (l, level) in levels.iter().enumerate() {
            quantiles[l][p] = quantile_sorted(&col, *level);
        }
    }
    Ok(QuantileTable { levels: levels.to_vec(), quantiles, theta_bar, estimates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::gsun::LocationSet;
    use crate::neural::config::EstimatorConfig;

    fn toy() -> (EstimatorWeights, SpatialSample) {
        let mut cfg = EstimatorConfig::desk();
        cfg.gat_dims = vec![4, 4];
        cfg.encoder_blocks = 1;
        let mut w = EstimatorWeights::init(&cfg, &mut RngStream::new(1)).unwrap();
        let head = w.net.head.l2.w;
        let rows = w.store.get(head).rows;
        *w.store.get_mut(head) = Tensor::from_fn(rows, 7, |i, j| 0.2 * ((i + 2 * j) as f64).cos());
        let mut rng = RngStream::new(2);
        let locs = LocationSet::random(25, &mut rng);
        let theta = GsunTheta::from_array([1.0, 0.2, 1.0, 0.1, 0.5, 0.5, -0.3]);
        (w, simulate(&theta, &locs, 1, &mut rng).unwrap())
    }

    #[test]
    fn table_is_monotone_and_reproducible() {
        let (w, s) = toy();
        let a = uncertainty(&w, &s, 5, 12, 0.4, &DEFAULT_LEVELS, &mut RngStream::new(3)).unwrap();
        assert!(a.is_monotone());
        assert_eq!(a.estimates.len(), 12);
        let b = uncertainty(&w, &s, 5, 12, 0.4, &DEFAULT_LEVELS, &mut RngStream::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(w.config.prior.contains(&a.theta_bar));
    }

    #[test]
    fn single_draw_is_degenerate() {
        let (w, s) = toy();
        let t = uncertainty(&w, &s, 2, 1, 0.4, &DEFAULT_LEVELS, &mut RngStream::new(4)).unwrap();
        for q in &t.quantiles {
            assert_eq!(q, &t.quantiles[0]);
        }
        assert!(uncertainty(&w, &s, 0, 1, 0.4, &DEFAULT_LEVELS, &mut RngStream::new(4)).is_err());
    }

    #[test]
    fn interpolated_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}

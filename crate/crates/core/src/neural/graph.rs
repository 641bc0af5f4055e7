//! Radius graphs over spatial samples.

use crate::autodiff::layers::Adjacency;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gsun::{LocationSet, SpatialSample};

/// Number of radial bins used to summarize a row of the distance matrix.
pub const DIST_BINS: usize = 64;

/// Node features `(z_i, x_i, y_i)` and the undirected edges within `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub features: Tensor,
    /// Pairs `(i, j)` with `i < j`.
    pub edges: Vec<(usize, usize)>,
    pub radius: f64,
}

impl SpatialGraph {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    /// Edge list in both directions.
    pub fn symmetric_edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect()
    }
}

fn radius_edges(points: &[[f64; 2]], radius: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
            if d <= radius {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn check_radius(radius: f64) -> Result<()> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("graph radius must be positive, got {radius}")));
    }
    Ok(())
}

fn graph_from_points(points: &[[f64; 2]], values: &[f64], edges: Vec<(usize, usize)>, radius: f64) -> SpatialGraph {
    let features = Tensor::from_fn(points.len(), 3, |i, j| if j == 0 { values[i] } else { points[i][j - 1] });
    SpatialGraph { features, edges, radius }
}

pub fn build_graph(locs: &LocationSet, values: &[f64], radius: f64) -> Result<SpatialGraph> {
    check_radius(radius)?;
    if values.len() != locs.len() {
        return Err(Error::DimensionMismatch(format!("{} values for {} locations", values.len(), locs.len())));
    }
    let edges = radius_edges(locs.points(), radius);
    Ok(graph_from_points(locs.points(), values, edges, radius))
}

/// Replicates over one set of points, with the shared adjacency and the
/// binned distance rows.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub graphs: Vec<SpatialGraph>,
    /// n×n Euclidean distances.
    pub dist: Tensor,
    /// n×[`DIST_BINS`] radial histogram of each distance row.
    pub dist_features: Tensor,
    pub adjacency: Adjacency,
}

impl GraphBatch {
    pub fn from_sample(sample: &SpatialSample, radius: f64) -> Result<Self> {
        let values: Vec<Vec<f64>> = (0..sample.replicates()).map(|r| sample.replicate(r).as_slice().to_vec()).collect();
        Self::from_points(sample.locs.points(), &values, radius)
    }

    /// Points may repeat, as they do after a bootstrap resample.
    pub fn from_points(points: &[[f64; 2]], replicates: &[Vec<f64>], radius: f64) -> Result<Self> {
        check_radius(radius)?;
        let n = points.len();
        if n == 0 || replicates.is_empty() {
            return Err(Error::DimensionMismatch("graph batch needs at least one node and one replicate".into()));
        }
        if let Some(r) = replicates.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!("replicate of length {} for {n} points", r.len())));
        }
        let edges = radius_edges(points, radius);
        let adjacency = Adjacency::from_edges(n, &edges)?;
        let graphs = replicates.iter().map(|v| graph_from_points(points, v, edges.clone(), radius)).collect();
        let dist = Tensor::from_fn(n, n, |i, j| (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]));
        let dist_features = radial_bins(&dist);
        Ok(Self { graphs, dist, dist_features, adjacency })
    }

    pub fn nodes(&self) -> usize {
        self.dist.rows
    }

    pub fn replicates(&self) -> usize {
        self.graphs.len()
    }
}

/// Fraction of the other nodes falling in each of [`DIST_BINS`] equal bins
/// on `[0, √2]`.
pub fn radial_bins(dist: &Tensor) -> Tensor {
    let n = dist.rows;
    let width = std::f64::consts::SQRT_2 / DIST_BINS as f64;
    let mut out = Tensor::zeros(n, DIST_BINS);
    if n < 2 {
        return out;
    }
    let inv = 1.0 / (n - 1) as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let b = ((dist.get(i, j) / width) as usize).min(DIST_BINS - 1);
            out.data[i * DIST_BINS + b] += inv;
        }
    }
    out
}

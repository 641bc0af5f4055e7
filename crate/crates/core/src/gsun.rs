//! The GSUN spatial process: Matérn dependence, the skewness matrix `H`,
//! simulation, analytic covariance and kriging.
//!
//! `Z ~ SUN_{n,n}(0, Σ(θ₁), H, 0, C(θ₂))` with
//! `H = δ₁ I + δ₂ diag{Σᵢ (λ_{i,Σ} P_{i,Σ} + λ_{i,C} P_{i,C}) / (2n)}`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::bessel::bessel_k_scaled;
use crate::numcore::linalg::{sym_eigen, DenseMatrix, SpectralDecomposition, Vector};
use crate::numcore::rng::RngStream;
use crate::numcore::special::ln_gamma;
use crate::sun::SunParams;

pub const MIN_SEPARATION: f64 = 1e-9;
pub const THETA_NAMES: [&str; 7] = ["sigma2", "beta1", "nu1", "beta2", "nu2", "delta1", "delta2"];

/// Process parameters in wire order `(σ², β₁, ν₁, β₂, ν₂, δ₁, δ₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsunTheta {
    pub sigma2: f64,
    pub beta1: f64,
    pub nu1: f64,
    pub beta2: f64,
    pub nu2: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl GsunTheta {
    pub fn from_array(a: [f64; 7]) -> Self {
        Self { sigma2: a[0], beta1: a[1], nu1: a[2], beta2: a[3], nu2: a[4], delta1: a[5], delta2: a[6] }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.sigma2, self.beta1, self.nu1, self.beta2, self.nu2, self.delta1, self.delta2]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("theta entries must be finite".into()));
        }
        for (i, v) in a.iter().enumerate().take(5) {
            if *v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{} must be positive, got {v}", THETA_NAMES[i])));
            }
        }
        Ok(())
    }
}

impl FromStr for GsunTheta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("theta entry {p:?}: {e}"))))
            .collect::<Result<_>>()?;
        let arr: [f64; 7] = parts
            .try_into()
            .map_err(|v: Vec<f64>| Error::Parse(format!("theta needs 7 comma-separated values, got {}", v.len())))?;
        let t = Self::from_array(arr);
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for GsunTheta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        write!(f, "{}", a.map(|v| v.to_string()).join(","))
    }
}

/// Points in the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationSet {
    points: Vec<[f64; 2]>,
}

impl LocationSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::InvalidParameter(format!("location {i} ({}, {}) is outside the unit square", p[0], p[1])));
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                if dist(points[i], points[j]) < MIN_SEPARATION {
                    return Err(Error::DuplicateLocation(i));
                }
            }
        }
        Ok(Self { points })
    }

    /// `n` independent uniform points.
    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        loop {
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
            if let Ok(s) = Self::new(pts) {
                return s;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut pts = Vec::with_capacity(idx.len());
        for &i in idx {
            pts.push(*self.points.get(i).ok_or(Error::IndexOutOfRange { index: i, dim: self.len() })?);
        }
        Self::new(pts)
    }

    /// Concatenation; fails on a point shared by both sets.
    pub fn union(&self, other: &LocationSet) -> Result<Self> {
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        Self::new(pts)
    }

    pub fn distances(&self) -> DenseMatrix {
        let n = self.len();
        DenseMatrix::from_fn(n, n, |i, j| dist(self.points[i], self.points[j]))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Matérn covariance `σ² 2^{1−ν}/Γ(ν) (h/β)^ν K_ν(h/β)` at lag `h`.
pub fn matern_value(h: f64, sigma2: f64, beta: f64, nu: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && beta > 0.0 && nu > 0.0) {
        return Err(Error::InvalidParameter(format!("matern needs positive parameters, got ({sigma2}, {beta}, {nu})")));
    }
    if h == 0.0 {
        return Ok(sigma2);
    }
    let x = h / beta;
    let log_k = bessel_k_scaled(nu, x)?.ln() - x;
    let log_m = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + log_k;
    Ok(sigma2 * log_m.exp().min(1.0))
}

/// Matérn covariance matrix over `locs`; the correlation matrix is `sigma2 = 1`.
pub fn matern(locs: &LocationSet, sigma2: f64, beta: f64, nu: f64) -> Result<DenseMatrix> {
    let n = locs.len();
    let pts = locs.points();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = matern_value(0.0, sigma2, beta, nu)?;
        for j in 0..i {
            let v = matern_value(dist(pts[i], pts[j]), sigma2, beta, nu)?;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Which eigenvectors pair with the eigenvalues of `C(θ₂)` in `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum HReading {
    /// `λ_{i,C} P_{i,C}`.
    #[default]
    Corrected,
    /// `λ_{i,C} P_{i,Σ}`, the formula as printed.
    Literal,
}

/// The vector `V` with `H = δ₁ I + δ₂ diag(V)`.
pub fn h_direction(sigma: &SpectralDecomposition, c: &SpectralDecomposition, reading: HReading) -> Result<Vector> {
    let n = sigma.dim();
    if c.dim() != n {
        return Err(Error::DimensionMismatch(format!("eigen systems of size {n} and {}", c.dim())));
    }
    let mut v = Vector::zeros(n);
    for i in 0..n {
        v.axpy(sigma.eigenvalues[i], &sigma.eigenvectors.column(i), 1.0);
        let p = match reading {
            HReading::Corrected => c.eigenvectors.column(i),
            HReading::Literal => sigma.eigenvectors.column(i),
        };
        v.axpy(c.eigenvalues[i], &p, 1.0);
    }
    Ok(v / (2.0 * n as f64))
}

/// Diagonal skewness matrix `H`.
pub fn build_h(sigma: &SpectralDecomposition, c: &SpectralDecomposition, delta1: f64, delta2: f64, reading: HReading) -> Result<DenseMatrix> {
    let v = h_direction(sigma, c, reading)?;
    Ok(DenseMatrix::from_diagonal(&v.map(|x| delta1 + delta2 * x)))
}

/// The process restricted to a location set.
#[derive(Debug, Clone)]
pub struct GsunField {
    pub theta: GsunTheta,
    pub locs: LocationSet,
    pub params: SunParams,
    pub sigma_eigen: SpectralDecomposition,
    pub c_eigen: SpectralDecomposition,
}

impl GsunField {
    pub fn h_diag(&self) -> Vector {
        self.params.h_mat.diagonal()
    }
}

pub fn to_sun(theta: &GsunTheta, locs: &LocationSet) -> Result<GsunField> {
    to_sun_with(theta, locs, HReading::default())
}

pub fn to_sun_with(theta: &GsunTheta, locs: &LocationSet, reading: HReading) -> Result<GsunField> {
    theta.validate()?;
    if locs.is_empty() {
        return Err(Error::InvalidParameter("location set is empty".into()));
    }
    let n = locs.len();
    let sigma = matern(locs, theta.sigma2, theta.beta1, theta.nu1)?;
    let c = matern(locs, 1.0, theta.beta2, theta.nu2)?;
    let sigma_eigen = sym_eigen(&sigma)?;
    let c_eigen = sym_eigen(&c)?;
    let h = build_h(&sigma_eigen, &c_eigen, theta.delta1, theta.delta2, reading)?;
    let params = SunParams::new(Vector::zeros(n), sigma, h, Vector::zeros(n), c)?;
    Ok(GsunField { theta: *theta, locs: locs.clone(), params, sigma_eigen, c_eigen })
}

/// Replicated observations: `values` is `n × replicates`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSample {
    pub locs: LocationSet,
    pub values: DenseMatrix,
}

/// Seventeen significant digits, enough for an exact 64-bit round trip.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

impl SpatialSample {
    pub fn new(locs: LocationSet, values: DenseMatrix) -> Result<Self> {
        if values.nrows() != locs.len() || values.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} locations but a {}x{} value matrix",
                locs.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self { locs, values })
    }

    pub fn replicates(&self) -> usize {
        self.values.ncols()
    }

    pub fn replicate(&self, r: usize) -> Vector {
        self.values.column(r).into_owned()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((0..self.replicates()).map(|r| format!("rep_{r}")));
        wr.write_record(&header).map_err(csv_err)?;
        for (i, p) in self.locs.points().iter().enumerate() {
            let mut row = vec![fmt17(p[0]), fmt17(p[1])];
            row.extend(self.values.row(i).iter().map(|v| fmt17(*v)));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "x" || &header[1] != "y" {
            return Err(Error::Parse("sample CSV header must start with x,y followed by rep_ columns".into()));
        }
        for (k, name) in header.iter().skip(2).enumerate() {
            if name != format!("rep_{k}") {
                return Err(Error::Parse(format!("unexpected column {name:?}, expected rep_{k}")));
            }
        }
        let reps = header.len() - 2;
        let mut pts = Vec::new();
        let mut vals = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {f:?}: {e}", line + 1))))
                .collect::<Result<_>>()?;
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("row {} has a non-finite value", line + 1)));
            }
            if nums.len() != reps + 2 {
                return Err(Error::Parse(format!("row {} has {} fields, expected {}", line + 1, nums.len(), reps + 2)));
            }
            pts.push([nums[0], nums[1]]);
            vals.extend_from_slice(&nums[2..]);
        }
        let n = pts.len();
        let values = DenseMatrix::from_row_slice(n, reps, &vals);
        Self::new(LocationSet::new(pts)?, values)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn simulate(theta: &GsunTheta, locs: &LocationSet, replicates: usize, rng: &mut RngStream) -> Result<SpatialSample> {
    let field = to_sun(theta, locs)?;
    simulate_field(&field, replicates, rng)
}

pub fn simulate_field(field: &GsunField, replicates: usize, rng: &mut RngStream) -> Result<SpatialSample> {
    let values = field.params.sample(replicates, rng)?;
    SpatialSample::new(field.locs.clone(), values)
}

/// `cov{Z(sᵢ), Z(sⱼ)} = Σᵢⱼ + Hᵢᵢ var(U)ᵢⱼ Hⱼⱼ`.
pub fn cov_zz(field: &GsunField, u_cov: &DenseMatrix) -> Result<DenseMatrix> {
    let n = field.locs.len();
    if u_cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("latent covariance is {:?}, expected {n}x{n}", u_cov.shape())));
    }
    let h = field.h_diag();
    Ok(DenseMatrix::from_fn(n, n, |i, j| field.params.psi[(i, j)] + h[i] * u_cov[(i, j)] * h[j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kriging {
    pub mean: Vector,
    pub var: Vector,
    pub mean_se: Vector,
}

/// Conditional mean and variance at `pred_locs` given one observed replicate.
pub fn krige(theta: &GsunTheta, observed: &SpatialSample, pred_locs: &LocationSet, draws: usize, rng: &mut RngStream) -> Result<Kriging> {
    if observed.replicates() != 1 {
        return Err(Error::InvalidParameter(format!("kriging needs exactly one replicate, got {}", observed.replicates())));
    }
    let union = pred_locs.union(&observed.locs)?;
    let field = to_sun(theta, &union)?;
    let n1 = pred_locs.len();
    let part1: Vec<usize> = (0..n1).collect();
    let part2: Vec<usize> = (n1..union.len()).collect();
    let cond = field.params.conditional(&part1, &part2, &observed.replicate(0))?;
    let m = cond.params.moments(draws, rng)?;
    Ok(Kriging { mean: m.mean, var: m.cov.diagonal(), mean_se: m.mean_se })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn locs(pts: &[[f64; 2]]) -> LocationSet {
        LocationSet::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn matern_half_integer_forms() {
        let mut rng = RngStream::new(1);
        let l = LocationSet::random(20, &mut rng);
        let d = l.distances();
        let m05 = matern(&l, 1.7, 0.2, 0.5).unwrap();
        let m15 = matern(&l, 1.7, 0.2, 1.5).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let x = d[(i, j)] / 0.2;
                assert!((m05[(i, j)] - 1.7 * (-x).exp()).abs() < 1e-10);
                assert!((m15[(i, j)] - 1.7 * (1.0 + x) * (-x).exp()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matern_tiny_lag_tends_to_variance() {
        let v = matern_value(1e-9, 2.0, 0.5, 1.3).unwrap();
        assert!((v - 2.0).abs() < 1e-6);
    }

    #[test]
    fn h_reduces_to_common_skewness() {
        let mut rng = RngStream::new(2);
        let l = LocationSet::random(8, &mut rng);
        let f = to_sun(&GsunTheta::from_array([1.0, 0.2, 1.0, 0.1, 0.5, 0.7, 0.0]), &l).unwrap();
        assert_eq!(f.params.h_mat, DenseMatrix::identity(8, 8) * 0.7);
    }

    #[test]
    fn h_single_location() {
        let l = locs(&[[0.5, 0.5]]);
        let f = to_sun(&GsunTheta::from_array([2.5, 0.2, 1.0, 0.1, 0.5, 0.3, -0.8]), &l).unwrap();
        assert!((f.params.h_mat[(0, 0)] - (0.3 - 0.8 * (2.5 + 1.0) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn h_is_affine_in_deltas() {
        let mut rng = RngStream::new(3);
        let l = LocationSet::random(10, &mut rng);
        let s = sym_eigen(&matern(&l, 1.0, 0.3, 1.0).unwrap()).unwrap();
        let c = sym_eigen(&matern(&l, 1.0, 0.1, 0.5).unwrap()).unwrap();
        let v = build_h(&s, &c, 0.0, 1.0, HReading::Corrected).unwrap().diagonal();
        let h = build_h(&s, &c, 0.4, -1.3, HReading::Corrected).unwrap();
        for k in 0..10 {
            assert!((h[(k, k)] - (0.4 - 1.3 * v[k])).abs() < 1e-14);
        }
        assert_eq!(h, build_h(&s, &c, 0.4, -1.3, HReading::Corrected).unwrap());
    }

    #[test]
    fn two_point_hand_instance() {
        let l = locs(&[[0.1, 0.1], [0.4, 0.5]]);
        let f = to_sun(&GsunTheta::from_array([1.5, 0.2, 0.5, 0.3, 1.5, 0.0, 0.0]), &l).unwrap();
        let h: f64 = 0.5;
        assert!((f.params.psi[(0, 1)] - 1.5 * (-h / 0.2).exp()).abs() < 1e-12);
        assert!((f.params.gamma_bar[(0, 1)] - (1.0 + h / 0.3) * (-h / 0.3).exp()).abs() < 1e-12);
        assert_eq!(f.params.gamma_bar[(0, 0)], 1.0);
    }

    #[test]
    fn simulate_is_deterministic() {
        let theta = GsunTheta::from_array([1.0, 0.15, 1.0, 0.1, 0.5, 0.55, -0.3]);
        let l = LocationSet::random(15, &mut RngStream::new(4));
        let a = simulate(&theta, &l, 3, &mut RngStream::new(9)).unwrap();
        let b = simulate(&theta, &l, 3, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let theta = GsunTheta::from_array([1.0, 0.15, 1.0, 0.1, 0.5, 0.55, -0.3]);
        let l = LocationSet::random(6, &mut RngStream::new(4));
        let s = simulate(&theta, &l, 2, &mut RngStream::new(1)).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,rep_0,rep_1\n"));
        assert_eq!(SpatialSample::read_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn theta_parsing() {
        let t: GsunTheta = "1,0.15,1,0.1,0.5,0.55,-0.3".parse().unwrap();
        assert_eq!(t.to_array(), [1.0, 0.15, 1.0, 0.1, 0.5, 0.55, -0.3]);
        assert!("1,2,3".parse::<GsunTheta>().is_err());
        assert!("0,0.15,1,0.1,0.5,0.55,-0.3".parse::<GsunTheta>().is_err());
    }

    #[test]
    fn locations_validate() {
        assert!(matches!(LocationSet::new(vec![[0.2, 0.2], [0.2, 0.2]]), Err(Error::DuplicateLocation(1))));
        assert!(LocationSet::new(vec![[1.2, 0.2]]).is_err());
    }

    #[test]
    fn gaussian_kriging_is_simple_kriging() {
        let theta = GsunTheta::from_array([1.0, 0.3, 1.5, 0.1, 0.5, 0.0, 0.0]);
        let obs = locs(&[[0.1, 0.1], [0.5, 0.2], [0.8, 0.9], [0.3, 0.7]]);
        let z = Vector::from_column_slice(&[0.5, -0.2, 1.1, 0.3]);
        let sample = SpatialSample::new(obs.clone(), DenseMatrix::from_column_slice(4, 1, z.as_slice())).unwrap();
        let pred = locs(&[[0.4, 0.4], [0.9, 0.1]]);
        let k = krige(&theta, &sample, &pred, 10_000, &mut RngStream::new(1)).unwrap();
        let all = pred.union(&obs).unwrap();
        let s = matern(&all, 1.0, 0.3, 1.5).unwrap();
        let s22 = s.view((2, 2), (4, 4)).into_owned();
        let s12 = s.view((0, 2), (2, 4)).into_owned();
        let inv = s22.try_inverse().unwrap();
        let mean = &s12 * &inv * &z;
        let var = s.view((0, 0), (2, 2)).into_owned() - &s12 * &inv * s12.transpose();
        for i in 0..2 {
            assert!((k.mean[i] - mean[i]).abs() < 1e-10);
            assert!((k.var[i] - var[(i, i)]).abs() < 1e-10);
            assert!(k.var[i] > 0.0);
        }
    }

    #[test]
    fn kriging_near_an_observation_recovers_it() {
        let theta = GsunTheta::from_array([1.0, 0.3, 1.5, 0.1, 0.5, 0.0, 0.0]);
        let obs = locs(&[[0.1, 0.1], [0.5, 0.2], [0.8, 0.9]]);
        let sample = SpatialSample::new(obs, DenseMatrix::from_column_slice(3, 1, &[0.5, -0.2, 1.1])).unwrap();
        let pred = locs(&[[0.5, 0.2 + 1e-6]]);
        let k = krige(&theta, &sample, &pred, 10_000, &mut RngStream::new(1)).unwrap();
        assert!((k.mean[0] + 0.2).abs() < 1e-3);
    }
}

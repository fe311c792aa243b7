//! Heat-kernel densities and Brownian motion on the latent manifold.
//!
//! The density is the zeroth-order parametrix
//! `log p(z) = -(d/2)·log(2πt) + ½(log det G_z − log det G_μ) − l(z, μ)²/(2t)`
//! with respect to the Riemannian volume measure, and the sampler is the
//! coordinate random walk `z_k = z_{k-1} + √(t/T)·L(z_{k-1})·η_k` with
//! `L Lᵀ = G⁻¹`.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Result, RvaeError};
use crate::geometry::{curve_length, fit_geodesic, pullback_metric, GeodesicOptions, GeodesicSpline, Immersion};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::parallel::stream_rng;

pub const DEFAULT_WALK_STEPS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatKernel {
    center: DenseVector,
    log_time: f64,
}

impl HeatKernel {
    pub fn new(center: DenseVector, time: f64) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(RvaeError::contract(format!("diffusion time must be positive, got {time}")));
        }
        Self::from_log_time(center, time.ln())
    }

    pub fn from_log_time(center: DenseVector, log_time: f64) -> Result<Self> {
        if !log_time.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(RvaeError::contract("heat kernel parameters must be finite"));
        }
        Ok(HeatKernel { center, log_time })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn time(&self) -> f64 {
        self.log_time.exp()
    }

    pub fn log_time(&self) -> f64 {
        self.log_time
    }

    /// The same kernel with its diffusion time multiplied by `factor`.
    pub fn scaled_time(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(RvaeError::contract("time scale must be positive"));
        }
        Self::from_log_time(self.center.clone(), self.log_time + factor.ln())
    }
}

/// Parametrix log density from its ingredients: the log determinants of the
/// metric at the point and at the center, and the squared geodesic distance.
pub fn heat_kernel_log_density(
    dim: usize,
    log_time: f64,
    log_det_point: f64,
    log_det_center: f64,
    sq_distance: f64,
) -> f64 {
    let t = log_time.exp();
    -0.5 * dim as f64 * (2.0 * PI).ln() - 0.5 * dim as f64 * log_time + 0.5 * (log_det_point - log_det_center)
        - sq_distance / (2.0 * t)
}

fn with_points(e: RvaeError, z: &[f64], mu: &[f64]) -> RvaeError {
    match e {
        RvaeError::Numerical(msg) => RvaeError::Numerical(format!("{msg} (z = {z:?}, center = {mu:?})")),
        other => other,
    }
}

/// Log density of the kernel at `z` with the distance from a fitted spline
/// geodesic.
pub fn heat_kernel_logpdf<I: Immersion + ?Sized>(
    hk: &HeatKernel,
    z: &[f64],
    imm: &I,
    geo: &GeodesicOptions,
) -> Result<f64> {
    check_len("heat kernel point", hk.dim(), z.len())?;
    let l = fit_geodesic(imm, z, hk.center(), geo)
        .map_err(|e| with_points(e, z, hk.center()))?
        .length;
    logpdf_with_distance(hk, z, imm, l * l)
}

/// As [`heat_kernel_logpdf`], with the distance measured along the straight
/// segment; exact when the metric is constant.
pub fn heat_kernel_logpdf_straight<I: Immersion + ?Sized>(
    hk: &HeatKernel,
    z: &[f64],
    imm: &I,
    n_segments: usize,
) -> Result<f64> {
    check_len("heat kernel point", hk.dim(), z.len())?;
    let l = if z == hk.center() {
        0.0
    } else {
        let line = GeodesicSpline::new(z, hk.center(), 0)?;
        curve_length(imm, &line, n_segments).map_err(|e| with_points(e, z, hk.center()))?
    };
    logpdf_with_distance(hk, z, imm, l * l)
}

pub fn logpdf_with_distance<I: Immersion + ?Sized>(hk: &HeatKernel, z: &[f64], imm: &I, sq_distance: f64) -> Result<f64> {
    let gz = pullback_metric(imm, z)?;
    let gm = pullback_metric(imm, hk.center())?;
    Ok(heat_kernel_log_density(hk.dim(), hk.log_time(), gz.log_det(), gm.log_det(), sq_distance))
}

/// `L` with `L Lᵀ = (g + jitter·I)⁻¹`.
pub fn metric_inverse_chol(metric: &crate::geometry::MetricTensor) -> DenseMatrix {
    metric.inverse_sqrt()
}

fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DenseVector {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn check_walk(sigma_sq: f64, steps: usize) -> Result<()> {
    if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
        return Err(RvaeError::contract(format!("diffusion must be non-negative, got {sigma_sq}")));
    }
    if steps == 0 {
        return Err(RvaeError::contract("a walk needs at least one step"));
    }
    Ok(())
}

/// One increment of the walk: `z + √(σ²/T)·L(z)·η`.
pub fn brownian_step<I: Immersion + ?Sized, R: Rng + ?Sized>(
    imm: &I,
    z_prev: &[f64],
    sigma_sq: f64,
    steps: usize,
    rng: &mut R,
) -> Result<DenseVector> {
    check_walk(sigma_sq, steps)?;
    let eta = standard_normal(z_prev.len(), rng);
    let l = pullback_metric(imm, z_prev)?.inverse_sqrt();
    let scale = (sigma_sq / steps as f64).sqrt();
    let inc = l.matvec(&eta)?;
    Ok(z_prev.iter().zip(&inc).map(|(z, i)| z + scale * i).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    /// `T + 1` points; the first is the start, the last the sample.
    pub steps: Vec<DenseVector>,
    pub total_time: f64,
    pub seed: u64,
}

impl BrownianPath {
    pub fn endpoint(&self) -> &[f64] {
        self.steps.last().expect("a path holds its start")
    }
}

pub fn brownian_walk<I: Immersion + ?Sized, R: Rng + ?Sized>(
    imm: &I,
    start: &[f64],
    total_time: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<DenseVector>> {
    check_walk(total_time, steps)?;
    check_len("walk start", imm.latent_dim(), start.len())?;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(start.to_vec());
    for _ in 0..steps {
        let next = brownian_step(imm, path.last().expect("non-empty"), total_time, steps, rng)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(RvaeError::numerical("non-finite Brownian increment"));
        }
        path.push(next);
    }
    Ok(path)
}

/// Walk of total time `t` from the kernel center; the endpoint is a draw
/// from the prior.
pub fn sample_prior<I: Immersion + ?Sized>(hk: &HeatKernel, imm: &I, steps: usize, seed: u64) -> Result<BrownianPath> {
    let mut rng = stream_rng(seed, 0);
    Ok(BrownianPath {
        steps: brownian_walk(imm, hk.center(), hk.time(), steps, &mut rng)?,
        total_time: hk.time(),
        seed,
    })
}

/// `count` independent prior paths, path `k` driven by stream `k` of
/// `master_seed`; computed in parallel, returned in index order.
pub fn sample_prior_paths<I: Immersion + ?Sized>(
    hk: &HeatKernel,
    imm: &I,
    steps: usize,
    count: usize,
    master_seed: u64,
) -> Result<Vec<BrownianPath>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(master_seed, k as u64);
            Ok(BrownianPath {
                steps: brownian_walk(imm, hk.center(), hk.time(), steps, &mut rng)?,
                total_time: hk.time(),
                seed: master_seed,
            })
        })
        .collect()
}

/// A posterior draw together with what the pathwise gradient needs: the
/// per-step factors `L_k` and normal draws `η_k`. With the factors held
/// fixed the sample is `z = μ + √(t/T)·Σ_k L_k η_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub z: DenseVector,
    pub center: DenseVector,
    pub log_time: f64,
    pub steps: usize,
    pub factors: Vec<DenseMatrix>,
    pub noise: Vec<DenseVector>,
}

impl PosteriorSample {
    /// Recomputes the sample for new kernel parameters with the recorded
    /// factors and noise.
    pub fn replay(&self, center: &[f64], log_time: f64) -> Result<DenseVector> {
        check_len("replay center", self.center.len(), center.len())?;
        let scale = (log_time.exp() / self.steps as f64).sqrt();
        let mut z = center.to_vec();
        for (l, eta) in self.factors.iter().zip(&self.noise) {
            let inc = l.matvec(eta)?;
            z.iter_mut().zip(&inc).for_each(|(zi, i)| *zi += scale * i);
        }
        Ok(z)
    }

    /// Pulls `∂f/∂z` back to `(∂f/∂μ, ∂f/∂log t)`; `∂z/∂μ = I` and
    /// `∂z/∂log t = ½(z − μ)`.
    pub fn pullback(&self, upstream: &[f64]) -> (DenseVector, f64) {
        let d_log_t = 0.5
            * upstream
                .iter()
                .zip(self.z.iter().zip(&self.center))
                .map(|(u, (z, m))| u * (z - m))
                .sum::<f64>();
        (upstream.to_vec(), d_log_t)
    }
}

pub fn sample_posterior<I: Immersion + ?Sized, R: Rng + ?Sized>(
    hk: &HeatKernel,
    imm: &I,
    steps: usize,
    rng: &mut R,
) -> Result<PosteriorSample> {
    check_walk(hk.time(), steps)?;
    check_len("posterior center", imm.latent_dim(), hk.dim())?;
    let scale = (hk.time() / steps as f64).sqrt();
    let mut z = hk.center().to_vec();
    let mut factors = Vec::with_capacity(steps);
    let mut noise = Vec::with_capacity(steps);
    for _ in 0..steps {
        let eta = standard_normal(z.len(), rng);
        let l = pullback_metric(imm, &z)?.inverse_sqrt();
        let inc = l.matvec(&eta)?;
        z.iter_mut().zip(&inc).for_each(|(zi, i)| *zi += scale * i);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(RvaeError::numerical("non-finite posterior sample"));
        }
        factors.push(l);
        noise.push(eta);
    }
    Ok(PosteriorSample {
        z,
        center: hk.center().to_vec(),
        log_time: hk.log_time(),
        steps,
        factors,
        noise,
    })
}

/// CSV rows `path, step, z1…zd`.
pub fn write_paths_csv<W: Write>(paths: &[BrownianPath], dim: usize, out: &mut W) -> Result<()> {
    let mut header = String::from("path,step");
    for k in 0..dim {
        header.push_str(&format!(",z{}", k + 1));
    }
    writeln!(out, "{header}")?;
    for (p, path) in paths.iter().enumerate() {
        for (s, z) in path.steps.iter().enumerate() {
            check_len("path point", dim, z.len())?;
            let mut row = format!("{p},{s}");
            for x in z {
                row.push_str(&format!(",{x}"));
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MetricTensor;
    use crate::oracles::{gaussian_logpdf, AnalyticImmersion};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_density_is_normalizer() {
        let imm = AnalyticImmersion::identity_pad(2, 4);
        let hk = HeatKernel::new(vec![0.5, -1.0], 0.7).unwrap();
        let lp = heat_kernel_logpdf(&hk, &[0.5, -1.0], &imm, &GeodesicOptions::default()).unwrap();
        assert!((lp + (2.0 * PI * 0.7).ln()).abs() < 1e-14);
    }

    #[test]
    fn straight_distance_reproduces_gaussian() {
        let imm = AnalyticImmersion::identity_pad(3, 3);
        let hk = HeatKernel::new(vec![0.1, 0.2, 0.3], 1.7).unwrap();
        let z = [1.0, -0.5, 0.0];
        let lp = heat_kernel_logpdf_straight(&hk, &z, &imm, 32).unwrap();
        let reference = gaussian_logpdf(&z, hk.center(), &DenseMatrix::from_diag(&[1.7; 3])).unwrap();
        assert!((lp - reference).abs() < 1e-9);
    }

    #[test]
    fn inverse_chol_of_simple_metrics() {
        let g = MetricTensor::from_matrix(DenseMatrix::identity(2)).unwrap();
        assert_eq!(metric_inverse_chol(&g), DenseMatrix::identity(2));
        let g = MetricTensor::from_matrix(DenseMatrix::from_diag(&[4.0])).unwrap();
        assert_eq!(metric_inverse_chol(&g).get(0, 0), 0.5);
    }

    #[test]
    fn zero_diffusion_stays_put() {
        let imm = AnalyticImmersion::Saddle;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(brownian_step(&imm, &[0.3, 0.4], 0.0, 10, &mut rng).unwrap(), vec![0.3, 0.4]);
    }

    #[test]
    fn invalid_walks_are_rejected() {
        let imm = AnalyticImmersion::Saddle;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(brownian_step(&imm, &[0.0, 0.0], -1.0, 10, &mut rng).is_err());
        assert!(brownian_step(&imm, &[0.0, 0.0], 1.0, 0, &mut rng).is_err());
        assert!(HeatKernel::new(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn prior_paths_are_deterministic() {
        let imm = AnalyticImmersion::Saddle;
        let hk = HeatKernel::new(vec![0.0, 0.0], 0.5).unwrap();
        let a = sample_prior(&hk, &imm, 10, 42).unwrap();
        let b = sample_prior(&hk, &imm, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 11);
        assert_eq!(a.steps[0], vec![0.0, 0.0]);
        let many = sample_prior_paths(&hk, &imm, 10, 4, 9).unwrap();
        assert_eq!(many, sample_prior_paths(&hk, &imm, 10, 4, 9).unwrap());
        assert_ne!(many[0], many[1]);
    }

    #[test]
    fn posterior_gradient_in_flat_space() {
        let imm = AnalyticImmersion::identity_pad(2, 2);
        let hk = HeatKernel::new(vec![1.0, 2.0], 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_posterior(&hk, &imm, 10, &mut rng).unwrap();
        let (d_mu, _) = s.pullback(&[1.0, 0.0]);
        assert_eq!(d_mu, vec![1.0, 0.0]);
        assert_eq!(s.replay(&[1.0, 2.0], hk.log_time()).unwrap(), s.z);
    }

    #[test]
    fn tiny_time_collapses_to_center() {
        let imm = AnalyticImmersion::Saddle;
        let hk = HeatKernel::new(vec![0.2, -0.1], 1e-14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_posterior(&hk, &imm, 10, &mut rng).unwrap();
        assert!(s.z.iter().zip(hk.center()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn path_csv_header_only_when_empty() {
        let mut buf = Vec::new();
        write_paths_csv(&[], 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "path,step,z1,z2\n");
    }
}

use std::io::Write;

use super::spline::{GeodesicSpline, NaturalCubicBasis};
use super::{DecoderImmersion, Immersion};
use crate::error::{check_len, Result, RvaeError};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::nn::AdamState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeodesicOptions {
    pub n_basis: usize,
    pub n_segments: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Consecutive iterations below `rel_tol` needed to declare convergence.
    pub patience: usize,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        GeodesicOptions {
            n_basis: 8,
            n_segments: 32,
            lr: 1e-2,
            max_iters: 500,
            rel_tol: 1e-6,
            patience: 10,
        }
    }
}

/// Quadrature nodes with trapezoid weights and the basis tabulated on them.
struct Grid {
    s: Vec<f64>,
    weights: Vec<f64>,
    phi: Vec<DenseVector>,
    dphi: Vec<DenseVector>,
}

impl Grid {
    fn new(basis: &NaturalCubicBasis, n_segments: usize) -> Result<Self> {
        if n_segments < 2 {
            return Err(RvaeError::contract(format!("need at least 2 segments, got {n_segments}")));
        }
        let h = 1.0 / n_segments as f64;
        let s: Vec<f64> = (0..=n_segments).map(|k| k as f64 * h).collect();
        let weights = (0..=n_segments)
            .map(|k| if k == 0 || k == n_segments { 0.5 * h } else { h })
            .collect();
        let (phi, dphi) = s.iter().map(|&t| basis.eval(t)).unzip();
        Ok(Grid { s, weights, phi, dphi })
    }
}

/// Curve energy `½∫ γ̇ᵀGγ̇ ds` and its gradients with respect to the spline
/// coefficients and both endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyGrad {
    pub energy: f64,
    pub length: f64,
    pub coefficients: DenseMatrix,
    pub start: DenseVector,
    pub end: DenseVector,
}

fn check_dims<I: Immersion + ?Sized>(imm: &I, spline: &GeodesicSpline) -> Result<()> {
    check_len("spline dimension", imm.latent_dim(), spline.dim())
}

fn energy_and_length<I: Immersion + ?Sized>(imm: &I, spline: &GeodesicSpline, grid: &Grid) -> Result<(f64, f64)> {
    let mut energy = 0.0;
    let mut length = 0.0;
    for p in 0..grid.s.len() {
        let z = spline.point_from(grid.s[p], &grid.phi[p]);
        let v = spline.velocity_from(&grid.dphi[p]);
        let g = imm.metric_matrix(&z)?;
        let f = g.bilinear(&v, &v).max(0.0);
        energy += 0.5 * grid.weights[p] * f;
        length += grid.weights[p] * f.sqrt();
    }
    Ok((energy, length))
}

fn energy_grad_on<I: Immersion + ?Sized>(imm: &I, spline: &GeodesicSpline, grid: &Grid) -> Result<EnergyGrad> {
    let d = spline.dim();
    let nb = spline.basis().len();
    let mut out = EnergyGrad {
        energy: 0.0,
        length: 0.0,
        coefficients: DenseMatrix::zeros(nb, d),
        start: vec![0.0; d],
        end: vec![0.0; d],
    };
    for p in 0..grid.s.len() {
        let s = grid.s[p];
        let z = spline.point_from(s, &grid.phi[p]);
        let v = spline.velocity_from(&grid.dphi[p]);
        let q = imm.quad_form(&z, &v)?;
        let w = 0.5 * grid.weights[p];
        out.energy += w * q.value;
        out.length += grid.weights[p] * q.value.max(0.0).sqrt();
        for i in 0..nb {
            let (phi, dphi) = (grid.phi[p][i], grid.dphi[p][i]);
            let row = out.coefficients.row_mut(i);
            for k in 0..d {
                row[k] += w * (phi * q.grad_z[k] + dphi * q.grad_v[k]);
            }
        }
        for k in 0..d {
            out.start[k] += w * ((1.0 - s) * q.grad_z[k] - q.grad_v[k]);
            out.end[k] += w * (s * q.grad_z[k] + q.grad_v[k]);
        }
    }
    Ok(out)
}

pub fn curve_energy<I: Immersion + ?Sized>(imm: &I, spline: &GeodesicSpline, n_segments: usize) -> Result<f64> {
    check_dims(imm, spline)?;
    let grid = Grid::new(spline.basis(), n_segments)?;
    Ok(energy_and_length(imm, spline, &grid)?.0)
}

pub fn curve_length<I: Immersion + ?Sized>(imm: &I, spline: &GeodesicSpline, n_segments: usize) -> Result<f64> {
    check_dims(imm, spline)?;
    let grid = Grid::new(spline.basis(), n_segments)?;
    Ok(energy_and_length(imm, spline, &grid)?.1)
}

pub fn curve_energy_grad<I: Immersion + ?Sized>(
    imm: &I,
    spline: &GeodesicSpline,
    n_segments: usize,
) -> Result<EnergyGrad> {
    check_dims(imm, spline)?;
    let grid = Grid::new(spline.basis(), n_segments)?;
    energy_grad_on(imm, spline, &grid)
}

/// Accumulates `scale · ∂E/∂(log-weights)` of the decoder's variance network
/// into `out`, with the curve held fixed.
pub fn sigma_energy_grad(
    imm: &DecoderImmersion<'_>,
    spline: &GeodesicSpline,
    n_segments: usize,
    out: &mut [f64],
    scale: f64,
) -> Result<()> {
    check_dims(imm, spline)?;
    let Some(net) = imm.sigma else { return Ok(()) };
    let grid = Grid::new(spline.basis(), n_segments)?;
    for p in 0..grid.s.len() {
        let z = spline.point_from(grid.s[p], &grid.phi[p]);
        let v = spline.velocity_from(&grid.dphi[p]);
        net.sigma_jvp_sq_norm(&z, &v, Some((&mut *out, scale * 0.5 * grid.weights[p])))?;
    }
    Ok(())
}

fn degenerate(a: &[f64], n_basis: usize) -> Result<GeodesicSpline> {
    let mut spline = GeodesicSpline::new(a, a, n_basis)?;
    spline.converged = true;
    Ok(spline)
}

/// Energy-minimizing spline between `a` and `b`, started from the straight
/// line. Knots are placed on the quadrature grid.
pub fn fit_geodesic<I: Immersion + ?Sized>(
    imm: &I,
    a: &[f64],
    b: &[f64],
    opts: &GeodesicOptions,
) -> Result<GeodesicSpline> {
    check_len("geodesic start", imm.latent_dim(), a.len())?;
    check_len("geodesic end", imm.latent_dim(), b.len())?;
    if a == b {
        return degenerate(a, opts.n_basis);
    }
    let basis = NaturalCubicBasis::snapped(opts.n_basis, opts.n_segments);
    let init = GeodesicSpline::with_basis(a, b, basis)?;
    Ok(fit_geodesic_from(imm, init, opts)?.0)
}

/// Adam on the spline coefficients from an arbitrary starting curve. A step
/// that would raise the energy is undone and the step size halved, so the
/// returned energy trace never increases.
pub fn fit_geodesic_from<I: Immersion + ?Sized>(
    imm: &I,
    init: GeodesicSpline,
    opts: &GeodesicOptions,
) -> Result<(GeodesicSpline, Vec<f64>)> {
    check_dims(imm, &init)?;
    if init.start() == init.end() {
        return Ok((degenerate(init.start(), init.basis().len())?, Vec::new()));
    }
    let grid = Grid::new(init.basis(), opts.n_segments)?;
    let mut spline = init;
    let n_params = spline.coefficients().data().len();
    let mut adam = AdamState::new(&[n_params]);
    let mut trace: Vec<f64> = Vec::with_capacity(opts.max_iters);
    let mut current = energy_grad_on(imm, &spline, &grid)?;
    if !current.energy.is_finite() || !current.coefficients.is_finite() {
        return Err(RvaeError::numerical("non-finite curve energy at iteration 0"));
    }
    trace.push(current.energy);
    let mut lr = opts.lr;
    let mut stable = 0;
    let mut converged = n_params == 0;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let saved = spline.coefficients().clone();
        adam.step(&mut [spline.coefficients_mut().data_mut()], &[current.coefficients.data()], lr)?;
        let proposal = energy_grad_on(imm, &spline, &grid)?;
        if !proposal.energy.is_finite() || !proposal.coefficients.is_finite() {
            return Err(RvaeError::numerical(format!("non-finite curve energy at iteration {iterations}")));
        }
        let prev = current.energy;
        if proposal.energy <= prev {
            current = proposal;
        } else {
            // undo an uphill step and retry with a smaller one
            *spline.coefficients_mut() = saved;
            lr *= 0.5;
        }
        trace.push(current.energy);
        let rel = (prev - current.energy) / f64::max(prev.abs(), f64::MIN_POSITIVE);
        stable = if rel < opts.rel_tol { stable + 1 } else { 0 };
        converged = stable >= opts.patience;
    }
    spline.energy = current.energy;
    spline.length = current.length;
    spline.converged = converged;
    spline.iterations = iterations;
    Ok((spline, trace))
}

pub fn geodesic_distance<I: Immersion + ?Sized>(imm: &I, a: &[f64], b: &[f64], opts: &GeodesicOptions) -> Result<f64> {
    Ok(fit_geodesic(imm, a, b, opts)?.length)
}

/// CSV rows `s, z1…zd, speed` at `n_points` equispaced parameters, where the
/// speed is the metric norm of the velocity.
pub fn write_geodesic_csv<I: Immersion + ?Sized, W: Write>(
    imm: &I,
    spline: &GeodesicSpline,
    n_points: usize,
    out: &mut W,
) -> Result<()> {
    check_dims(imm, spline)?;
    if n_points < 2 {
        return Err(RvaeError::contract("geodesic export needs at least 2 points"));
    }
    let mut header = String::from("s");
    for k in 0..spline.dim() {
        header.push_str(&format!(",z{}", k + 1));
    }
    header.push_str(",speed");
    writeln!(out, "{header}")?;
    for p in 0..n_points {
        let s = p as f64 / (n_points - 1) as f64;
        let z = spline.point(s)?;
        let v = spline.velocity(s)?;
        let speed = imm.metric_matrix(&z)?.bilinear(&v, &v).max(0.0).sqrt();
        let mut row = format!("{s}");
        for x in &z {
            row.push_str(&format!(",{x}"));
        }
        row.push_str(&format!(",{speed}"));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

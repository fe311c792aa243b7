//! Brute-force and closed-form references for testing the geometry. These
//! routines deliberately avoid the library's own factorizations and
//! derivative code.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{check_len, Result, RvaeError};
use crate::geometry::{Immersion, QuadForm};
use crate::linalg::{DenseMatrix, DenseVector};

/// Central-difference Jacobian, one column per input coordinate.
pub fn finite_diff_jacobian<F>(f: F, z: &[f64], h: f64) -> DenseMatrix
where
    F: Fn(&[f64]) -> DenseVector,
{
    let m = f(z).len();
    let mut jac = DenseMatrix::zeros(m, z.len());
    let mut zp = z.to_vec();
    for i in 0..z.len() {
        zp[i] = z[i] + h;
        let fp = f(&zp);
        zp[i] = z[i] - h;
        let fm = f(&zp);
        zp[i] = z[i];
        for r in 0..m {
            jac.set(r, i, (fp[r] - fm[r]) / (2.0 * h));
        }
    }
    jac
}

/// Toy immersions with closed-form metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticImmersion {
    /// `z ↦ (z, 0, …, 0) ∈ ℝ^ambient`; metric `I`.
    IdentityPad { latent: usize, ambient: usize },
    /// `z ↦ A z`; metric `AᵀA`.
    Linear(DenseMatrix),
    /// `(z₁, z₂) ↦ (z₁, z₂, z₁² − z₂²)`.
    Saddle,
}

impl AnalyticImmersion {
    pub fn identity_pad(latent: usize, ambient: usize) -> Self {
        assert!(ambient >= latent, "padding cannot shrink the dimension");
        AnalyticImmersion::IdentityPad { latent, ambient }
    }

    pub fn map(&self, z: &[f64]) -> DenseVector {
        match self {
            AnalyticImmersion::IdentityPad { ambient, .. } => {
                let mut x = z.to_vec();
                x.resize(*ambient, 0.0);
                x
            }
            AnalyticImmersion::Linear(a) => (0..a.rows())
                .map(|r| a.row(r).iter().zip(z).map(|(p, q)| p * q).sum())
                .collect(),
            AnalyticImmersion::Saddle => vec![z[0], z[1], z[0] * z[0] - z[1] * z[1]],
        }
    }

    pub fn closed_form_metric(&self, z: &[f64]) -> DenseMatrix {
        match self {
            AnalyticImmersion::IdentityPad { latent, .. } => DenseMatrix::identity(*latent),
            AnalyticImmersion::Linear(a) => {
                let d = a.cols();
                let mut g = DenseMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        g.set(i, j, (0..a.rows()).map(|r| a.get(r, i) * a.get(r, j)).sum());
                    }
                }
                g
            }
            AnalyticImmersion::Saddle => {
                let (x, y) = (z[0], z[1]);
                DenseMatrix::from_rows(&[&[1.0 + 4.0 * x * x, -4.0 * x * y], &[-4.0 * x * y, 1.0 + 4.0 * y * y]])
            }
        }
    }

    fn sq_norm(&self, z: &[f64], v: &[f64]) -> f64 {
        let g = self.closed_form_metric(z);
        let n = v.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += v[i] * g.get(i, j) * v[j];
            }
        }
        s
    }
}

impl Immersion for AnalyticImmersion {
    fn latent_dim(&self) -> usize {
        match self {
            AnalyticImmersion::IdentityPad { latent, .. } => *latent,
            AnalyticImmersion::Linear(a) => a.cols(),
            AnalyticImmersion::Saddle => 2,
        }
    }

    fn ambient_dim(&self) -> usize {
        match self {
            AnalyticImmersion::IdentityPad { ambient, .. } => *ambient,
            AnalyticImmersion::Linear(a) => a.rows(),
            AnalyticImmersion::Saddle => 3,
        }
    }

    fn jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        check_len("analytic immersion input", self.latent_dim(), z.len())?;
        Ok(match self {
            AnalyticImmersion::IdentityPad { latent, ambient } => {
                let mut j = DenseMatrix::zeros(*ambient, *latent);
                for i in 0..*latent {
                    j.set(i, i, 1.0);
                }
                j
            }
            AnalyticImmersion::Linear(a) => a.clone(),
            AnalyticImmersion::Saddle => DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0 * z[0], -2.0 * z[1]]]),
        })
    }

    fn metric_matrix(&self, z: &[f64]) -> Result<DenseMatrix> {
        check_len("analytic immersion input", self.latent_dim(), z.len())?;
        Ok(self.closed_form_metric(z))
    }

    fn quad_form(&self, z: &[f64], v: &[f64]) -> Result<QuadForm> {
        check_len("analytic immersion input", self.latent_dim(), z.len())?;
        check_len("analytic immersion tangent", self.latent_dim(), v.len())?;
        let g = self.closed_form_metric(z);
        let n = v.len();
        let grad_v = (0..n).map(|i| 2.0 * (0..n).map(|j| g.get(i, j) * v[j]).sum::<f64>()).collect();
        let grad_z = match self {
            AnalyticImmersion::Saddle => {
                let w = 2.0 * z[0] * v[0] - 2.0 * z[1] * v[1];
                vec![4.0 * w * v[0], -4.0 * w * v[1]]
            }
            _ => vec![0.0; n],
        };
        Ok(QuadForm { value: self.sq_norm(z, v), grad_z, grad_v })
    }
}

/// LU factorization with partial pivoting; returns `(sign, log|det|)`.
pub fn lu_log_det(a: &DenseMatrix) -> Result<(f64, f64)> {
    let (lu, _perm, sign) = lu_factor(a)?;
    let mut log_abs = 0.0;
    let mut s = sign;
    for i in 0..lu.rows() {
        let p = lu.get(i, i);
        if p < 0.0 {
            s = -s;
        }
        log_abs += p.abs().ln();
    }
    Ok((s, log_abs))
}

fn lu_factor(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<usize>, f64)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(RvaeError::contract("LU needs a square matrix"));
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| lu.get(i, k).abs().total_cmp(&lu.get(j, k).abs()))
            .unwrap_or(k);
        if lu.get(piv, k) == 0.0 {
            return Err(RvaeError::contract("matrix is singular"));
        }
        if piv != k {
            for c in 0..n {
                let tmp = lu.get(k, c);
                lu.set(k, c, lu.get(piv, c));
                lu.set(piv, c, tmp);
            }
            perm.swap(k, piv);
            sign = -sign;
        }
        for i in (k + 1)..n {
            let f = lu.get(i, k) / lu.get(k, k);
            lu.set(i, k, f);
            for c in (k + 1)..n {
                lu.set(i, c, lu.get(i, c) - f * lu.get(k, c));
            }
        }
    }
    Ok((lu, perm, sign))
}

fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Result<DenseVector> {
    let (lu, perm, _) = lu_factor(a)?;
    let n = b.len();
    let mut y: DenseVector = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for k in 0..i {
            y[i] -= lu.get(i, k) * y[k];
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= lu.get(i, k) * y[k];
        }
        y[i] /= lu.get(i, i);
    }
    Ok(y)
}

fn require_spd(s: &DenseMatrix, what: &str) -> Result<()> {
    let n = s.rows();
    if n != s.cols() {
        return Err(RvaeError::contract(format!("{what} must be square")));
    }
    for i in 0..n {
        for j in 0..i {
            let (x, y) = (s.get(i, j), s.get(j, i));
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(RvaeError::contract(format!("{what} is not symmetric")));
            }
        }
    }
    // leading principal minors via LU without pivoting
    let mut m = s.clone();
    for k in 0..n {
        let p = m.get(k, k);
        if !(p > 0.0) {
            return Err(RvaeError::contract(format!("{what} is not positive definite")));
        }
        for i in (k + 1)..n {
            let f = m.get(i, k) / p;
            for c in k..n {
                m.set(i, c, m.get(i, c) - f * m.get(k, c));
            }
        }
    }
    Ok(())
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₂, Σ₂))`.
pub fn gaussian_kl_closed_form(mu1: &[f64], cov1: &DenseMatrix, mu2: &[f64], cov2: &DenseMatrix) -> Result<f64> {
    let d = mu1.len();
    check_len("kl mean", d, mu2.len())?;
    check_len("kl covariance", d, cov1.rows())?;
    check_len("kl covariance", d, cov2.rows())?;
    require_spd(cov1, "first covariance")?;
    require_spd(cov2, "second covariance")?;
    let mut trace = 0.0;
    for c in 0..d {
        let col = cov1.column(c);
        trace += lu_solve(cov2, &col)?[c];
    }
    let diff: DenseVector = mu2.iter().zip(mu1).map(|(a, b)| a - b).collect();
    let sol = lu_solve(cov2, &diff)?;
    let maha: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
    let (_, ld1) = lu_log_det(cov1)?;
    let (_, ld2) = lu_log_det(cov2)?;
    Ok(0.5 * (trace + maha - d as f64 + ld2 - ld1))
}

/// The same divergence written as a difference of expected log densities
/// through Cholesky-whitened coordinates: `KL = E₁[log p₁ − log p₂]` in
/// closed form.
pub fn gaussian_kl_whitened(mu1: &[f64], cov1: &DenseMatrix, mu2: &[f64], cov2: &DenseMatrix) -> Result<f64> {
    let d = mu1.len();
    let l1 = cholesky_local(cov1).ok_or_else(|| RvaeError::contract("first covariance is not SPD"))?;
    let l2 = cholesky_local(cov2).ok_or_else(|| RvaeError::contract("second covariance is not SPD"))?;
    // ‖L₂⁻¹L₁‖²_F = tr(Σ₂⁻¹Σ₁)
    let mut frob = 0.0;
    for c in 0..d {
        let col: DenseVector = (0..d).map(|r| l1[r][c]).collect();
        let w = forward_sub(&l2, &col);
        frob += w.iter().map(|x| x * x).sum::<f64>();
    }
    let diff: DenseVector = mu2.iter().zip(mu1).map(|(a, b)| a - b).collect();
    let w = forward_sub(&l2, &diff);
    let maha: f64 = w.iter().map(|x| x * x).sum();
    let half_ld1: f64 = (0..d).map(|i| l1[i][i].ln()).sum();
    let half_ld2: f64 = (0..d).map(|i| l2[i][i].ln()).sum();
    // E₁[log p₁] = −d/2·log 2π − ½log|Σ₁| − d/2
    let e_log_p1 = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - half_ld1 - 0.5 * d as f64;
    let e_log_p2 = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - half_ld2 - 0.5 * (frob + maha);
    Ok(e_log_p1 - e_log_p2)
}

fn cholesky_local(a: &DenseMatrix) -> Option<Vec<Vec<f64>>> {
    let n = a.rows();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a.get(i, j) - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> DenseVector {
    let mut x = b.to_vec();
    for i in 0..x.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (x[i] - s) / l[i][i];
    }
    x
}

/// Multivariate normal log density, via LU.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &DenseMatrix) -> Result<f64> {
    let d = x.len();
    check_len("gaussian mean", d, mean.len())?;
    let diff: DenseVector = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let sol = lu_solve(cov, &diff)?;
    let maha: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
    let (sign, ld) = lu_log_det(cov)?;
    if sign <= 0.0 {
        return Err(RvaeError::contract("covariance has non-positive determinant"));
    }
    Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + ld + maha))
}

/// Independent diagonal-Gaussian log likelihood with precisions `beta`.
pub fn diag_gaussian_loglik(x: &[f64], mean: &[f64], beta: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..x.len() {
        let var = 1.0 / beta[j];
        let r = x[j] - mean[j];
        total += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - r * r / (2.0 * var);
    }
    total
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Riemannian length of the straight segment `p → q`, split into pieces no
/// longer than `step` with the metric taken at each piece's midpoint.
fn segment_length<I: Immersion + ?Sized>(imm: &I, p: &[f64], q: &[f64], step: f64) -> Result<f64> {
    let delta: DenseVector = q.iter().zip(p).map(|(a, b)| a - b).collect();
    let euclid = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let pieces = ((euclid / step).ceil() as usize).max(1);
    let piece: DenseVector = delta.iter().map(|x| x / pieces as f64).collect();
    let mut total = 0.0;
    for k in 0..pieces {
        let t = (k as f64 + 0.5) / pieces as f64;
        let mid: DenseVector = p.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
        let g = imm.metric_matrix(&mid)?;
        total += g.bilinear(&piece, &piece).max(0.0).sqrt();
    }
    Ok(total)
}

/// Shortest-path distance on an 8-connected `resolution × resolution` grid
/// over `bounds = [(lo₁, hi₁), (lo₂, hi₂)]`, followed by greedy shortcutting
/// and vertex relaxation of the resulting polyline. Two-dimensional latent
/// spaces only.
pub fn grid_geodesic<I: Immersion + ?Sized>(
    imm: &I,
    bounds: [(f64, f64); 2],
    resolution: usize,
    a: &[f64],
    b: &[f64],
) -> Result<f64> {
    check_len("grid geodesic latent dimension", 2, imm.latent_dim())?;
    check_len("grid geodesic start", 2, a.len())?;
    check_len("grid geodesic end", 2, b.len())?;
    if resolution < 2 {
        return Err(RvaeError::contract("grid resolution must be at least 2"));
    }
    for p in [a, b] {
        for k in 0..2 {
            if !(bounds[k].0 <= p[k] && p[k] <= bounds[k].1) {
                return Err(RvaeError::contract(format!("point {p:?} outside grid bounds {bounds:?}")));
            }
        }
    }
    let n = resolution;
    let hx = (bounds[0].1 - bounds[0].0) / (n - 1) as f64;
    let hy = (bounds[1].1 - bounds[1].0) / (n - 1) as f64;
    let coord = |node: usize| -> [f64; 2] {
        let (i, j) = (node % n, node / n);
        [bounds[0].0 + i as f64 * hx, bounds[1].0 + j as f64 * hy]
    };
    let nearest = |p: &[f64]| -> usize {
        let i = ((p[0] - bounds[0].0) / hx).round().clamp(0.0, (n - 1) as f64) as usize;
        let j = ((p[1] - bounds[1].0) / hy).round().clamp(0.0, (n - 1) as f64) as usize;
        j * n + i
    };
    let step = hx.min(hy);
    let (src, dst) = (nearest(a), nearest(b));

    let mut dist = vec![f64::INFINITY; n * n];
    let mut prev = vec![usize::MAX; n * n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Frontier { dist: 0.0, node: src });
    while let Some(Frontier { dist: d, node }) = heap.pop() {
        if node == dst {
            break;
        }
        if d > dist[node] {
            continue;
        }
        let (i, j) = ((node % n) as isize, (node / n) as isize);
        let here = coord(node);
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                if di == 0 && dj == 0 {
                    continue;
                }
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= n as isize || nj >= n as isize {
                    continue;
                }
                let next = nj as usize * n + ni as usize;
                let there = coord(next);
                let mid = [(here[0] + there[0]) / 2.0, (here[1] + there[1]) / 2.0];
                let delta = [there[0] - here[0], there[1] - here[1]];
                let w = imm.metric_matrix(&mid)?.bilinear(&delta, &delta).max(0.0).sqrt();
                let nd = d + w;
                if nd < dist[next] {
                    dist[next] = nd;
                    prev[next] = node;
                    heap.push(Frontier { dist: nd, node: next });
                }
            }
        }
    }
    if !dist[dst].is_finite() {
        return Err(RvaeError::numerical("grid search did not reach the target"));
    }

    let mut nodes = vec![dst];
    while *nodes.last().expect("non-empty") != src {
        nodes.push(prev[*nodes.last().expect("non-empty")]);
    }
    nodes.reverse();
    let mut path: Vec<DenseVector> = Vec::with_capacity(nodes.len() + 2);
    path.push(a.to_vec());
    path.extend(nodes.iter().map(|&v| coord(v).to_vec()));
    path.push(b.to_vec());
    path.dedup();

    shortcut(imm, &mut path, step)?;
    relax(imm, &mut path, step)?;
    let mut total = 0.0;
    for w in path.windows(2) {
        total += segment_length(imm, &w[0], &w[1], step)?;
    }
    Ok(total)
}

/// Replaces runs of the polyline by straight segments while that shortens
/// the Riemannian length; repeated until a pass makes no change.
fn shortcut<I: Immersion + ?Sized>(imm: &I, path: &mut Vec<DenseVector>, step: f64) -> Result<()> {
    for _ in 0..8 {
        let mut seg = Vec::with_capacity(path.len());
        for w in path.windows(2) {
            seg.push(segment_length(imm, &w[0], &w[1], step)?);
        }
        let mut out = vec![path[0].clone()];
        let mut i = 0;
        let mut changed = false;
        while i + 1 < path.len() {
            let mut jump = i + 1;
            let mut along = 0.0;
            let mut best_j = i + 1;
            while jump < path.len() {
                along += seg[jump - 1];
                if jump >= i + 2 {
                    let direct = segment_length(imm, &path[i], &path[jump], step)?;
                    if direct < along * (1.0 - 1e-12) {
                        best_j = jump;
                    }
                }
                jump += 1;
            }
            if best_j > i + 1 {
                changed = true;
            }
            out.push(path[best_j].clone());
            i = best_j;
        }
        *path = out;
        if !changed {
            break;
        }
    }
    Ok(())
}

/// Subdivides the polyline and nudges each interior vertex by a shrinking
/// compass search while that shortens its two adjacent segments, which
/// removes the lattice bias left after shortcutting.
fn relax<I: Immersion + ?Sized>(imm: &I, path: &mut Vec<DenseVector>, step: f64) -> Result<()> {
    let max_piece = 4.0 * step;
    let mut fine = vec![path[0].clone()];
    for w in path.windows(2) {
        let len = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let pieces = ((len / max_piece).ceil() as usize).max(1);
        for k in 1..=pieces {
            let t = k as f64 / pieces as f64;
            fine.push(w[0].iter().zip(&w[1]).map(|(a, b)| a + t * (b - a)).collect());
        }
    }
    let local = |path: &[DenseVector], i: usize, p: &[f64]| -> Result<f64> {
        Ok(segment_length(imm, &path[i - 1], p, step)? + segment_length(imm, p, &path[i + 1], step)?)
    };
    let total = |path: &[DenseVector]| -> Result<f64> {
        path.windows(2).map(|w| segment_length(imm, &w[0], &w[1], step)).sum()
    };
    let mut length = total(&fine)?;
    for _ in 0..5000 {
        for i in 1..fine.len().saturating_sub(1) {
            let mut best = local(&fine, i, &fine[i])?;
            let mut delta = step;
            while delta > step / 256.0 {
                let mut improved = false;
                for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                    let cand = vec![fine[i][0] + dx * delta, fine[i][1] + dy * delta];
                    let len = local(&fine, i, &cand)?;
                    if len < best {
                        best = len;
                        fine[i] = cand;
                        improved = true;
                    }
                }
                if !improved {
                    delta *= 0.5;
                }
            }
        }
        let next = total(&fine)?;
        let done = length - next < 1e-10 * length;
        length = next;
        if done {
            break;
        }
    }
    *path = fine;
    Ok(())
}

/// Goodness of fit between samples and an elliptical density with mode
/// `center`: under the density, `r² = 2(log p(center) − log p(z))` is
/// chi-square with `d` degrees of freedom. Samples are binned into `bins`
/// equal-probability shells of that law and compared by Pearson's
/// chi-square test; returns the p-value.
pub fn gof_radial_chisquare<F>(samples: &DenseMatrix, logpdf: F, center: &[f64], bins: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let n = samples.rows();
    if n < 1000 {
        return Err(RvaeError::contract(format!("goodness of fit needs at least 1000 samples, got {n}")));
    }
    if bins < 2 {
        return Err(RvaeError::contract("goodness of fit needs at least 2 bins"));
    }
    check_len("goodness-of-fit center", samples.cols(), center.len())?;
    let law = ChiSquared::new(samples.cols() as f64).map_err(|e| RvaeError::contract(e.to_string()))?;
    let top = logpdf(center);
    let mut counts = vec![0usize; bins];
    for r in 0..n {
        let r2 = (2.0 * (top - logpdf(samples.row(r)))).max(0.0);
        let u = law.cdf(r2);
        let k = ((u * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let reference = ChiSquared::new((bins - 1) as f64).map_err(|e| RvaeError::contract(e.to_string()))?;
    Ok(1.0 - reference.cdf(stat))
}

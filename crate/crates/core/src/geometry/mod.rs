//! Pull-back geometry of a decoder: the metric `G_z = J_μᵀJ_μ + J_σᵀJ_σ`,
//! its volume measure, and spline geodesics.

mod geodesic;
mod spline;

pub use geodesic::{
    curve_energy, curve_energy_grad, curve_length, fit_geodesic, fit_geodesic_from, geodesic_distance,
    sigma_energy_grad, write_geodesic_csv, EnergyGrad, GeodesicOptions,
};
pub use spline::{GeodesicSpline, NaturalCubicBasis};

use crate::error::{check_len, Result, RvaeError};
use crate::linalg::{cholesky, lower_inverse, solve_lower, solve_lower_transpose, DenseMatrix, DenseVector};
use crate::nn::Mlp;
use crate::rbf::RbfNetwork;

/// `vᵀ G(z) v` together with its gradients in `z` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadForm {
    pub value: f64,
    pub grad_z: DenseVector,
    pub grad_v: DenseVector,
}

/// A smooth map from latent space into data space, seen through its
/// Jacobian.
pub trait Immersion: Sync {
    fn latent_dim(&self) -> usize;

    fn ambient_dim(&self) -> usize;

    fn jacobian(&self, z: &[f64]) -> Result<DenseMatrix>;

    fn metric_matrix(&self, z: &[f64]) -> Result<DenseMatrix> {
        Ok(self.jacobian(z)?.gram())
    }

    fn quad_form(&self, z: &[f64], v: &[f64]) -> Result<QuadForm>;
}

impl<T: Immersion + ?Sized> Immersion for &T {
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn ambient_dim(&self) -> usize {
        (**self).ambient_dim()
    }
    fn jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        (**self).jacobian(z)
    }
    fn metric_matrix(&self, z: &[f64]) -> Result<DenseMatrix> {
        (**self).metric_matrix(z)
    }
    fn quad_form(&self, z: &[f64], v: &[f64]) -> Result<QuadForm> {
        (**self).quad_form(z, v)
    }
}

/// The decoder as a diagonal immersion `z ↦ (μ(z), σ(z))`. Without a
/// variance network the metric reduces to `J_μᵀJ_μ`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderImmersion<'a> {
    pub mean: &'a Mlp,
    pub sigma: Option<&'a RbfNetwork>,
}

impl<'a> DecoderImmersion<'a> {
    pub fn new(mean: &'a Mlp, sigma: Option<&'a RbfNetwork>) -> Result<Self> {
        if let Some(net) = sigma {
            check_len("immersion sigma input", mean.input_dim(), net.latent_dim())?;
            check_len("immersion sigma output", mean.output_dim(), net.output_dim())?;
        }
        Ok(DecoderImmersion { mean, sigma })
    }
}

impl Immersion for DecoderImmersion<'_> {
    fn latent_dim(&self) -> usize {
        self.mean.input_dim()
    }

    fn ambient_dim(&self) -> usize {
        self.mean.output_dim() * if self.sigma.is_some() { 2 } else { 1 }
    }

    /// `[J_μ; J_σ]` stacked row-wise.
    fn jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        let jm = self.mean.input_jacobian(z)?;
        let Some(net) = self.sigma else { return Ok(jm) };
        let js = net.sigma_jacobian(z)?;
        let mut data = jm.into_data();
        data.extend_from_slice(js.data());
        DenseMatrix::from_vec(2 * self.mean.output_dim(), z.len(), data)
    }

    fn metric_matrix(&self, z: &[f64]) -> Result<DenseMatrix> {
        let mut g = self.mean.input_jacobian(z)?.gram();
        if let Some(net) = self.sigma {
            g.add_assign(&net.sigma_jacobian(z)?.gram())?;
        }
        Ok(g)
    }

    fn quad_form(&self, z: &[f64], v: &[f64]) -> Result<QuadForm> {
        let (mut value, mut grad_z, mut grad_v) = self.mean.jvp_sq_norm(z, v)?;
        if let Some(net) = self.sigma {
            let (s, gz, gv) = net.sigma_jvp_sq_norm(z, v, None)?;
            value += s;
            grad_z.iter_mut().zip(&gz).for_each(|(a, b)| *a += b);
            grad_v.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        }
        Ok(QuadForm { value, grad_z, grad_v })
    }
}

/// An immersion precomposed with the linear reparameterization `z ↦ R z`.
#[derive(Clone, Debug)]
pub struct Reparameterized<I> {
    pub inner: I,
    pub linear: DenseMatrix,
}

impl<I: Immersion> Reparameterized<I> {
    pub fn new(inner: I, linear: DenseMatrix) -> Result<Self> {
        check_len("reparameterization rows", inner.latent_dim(), linear.rows())?;
        Ok(Reparameterized { inner, linear })
    }

    pub fn map(&self, z: &[f64]) -> Result<DenseVector> {
        self.linear.matvec(z)
    }
}

impl<I: Immersion> Immersion for Reparameterized<I> {
    fn latent_dim(&self) -> usize {
        self.linear.cols()
    }

    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }

    fn jacobian(&self, z: &[f64]) -> Result<DenseMatrix> {
        self.inner.jacobian(&self.map(z)?)?.matmul(&self.linear)
    }

    fn quad_form(&self, z: &[f64], v: &[f64]) -> Result<QuadForm> {
        let q = self.inner.quad_form(&self.map(z)?, &self.map(v)?)?;
        Ok(QuadForm {
            value: q.value,
            grad_z: self.linear.tr_matvec(&q.grad_z)?,
            grad_v: self.linear.tr_matvec(&q.grad_v)?,
        })
    }
}

const JITTER_LADDER: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

/// Symmetric positive-definite metric with its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTensor {
    g: DenseMatrix,
    chol: DenseMatrix,
    log_det: f64,
    jitter_used: f64,
}

impl MetricTensor {
    /// Symmetrizes `g` and factors it, adding `jitter · mean(diag g) · I` from
    /// the ladder 1e-10 … 1e-4 only when the plain factorization fails.
    pub fn from_matrix(mut g: DenseMatrix) -> Result<Self> {
        if g.rows() != g.cols() {
            return Err(RvaeError::contract("metric must be square"));
        }
        if !g.is_finite() {
            return Err(RvaeError::numerical("metric has non-finite entries"));
        }
        g.symmetrize();
        let scale = g.mean_diag().abs().max(f64::MIN_POSITIVE);
        let attempts = std::iter::once(0.0).chain(JITTER_LADDER.iter().map(|j| j * scale));
        for jitter in attempts {
            let mut shifted = g.clone();
            for i in 0..g.rows() {
                shifted.add_at(i, i, jitter);
            }
            if let Some(chol) = cholesky(&shifted) {
                let log_det = 2.0 * (0..g.rows()).map(|i| chol.get(i, i).ln()).sum::<f64>();
                if log_det.is_finite() {
                    return Ok(MetricTensor { g, chol, log_det, jitter_used: jitter });
                }
            }
        }
        Err(RvaeError::numerical(format!(
            "metric is not positive definite even with jitter {:e}",
            JITTER_LADDER[3] * scale
        )))
    }

    pub fn dim(&self) -> usize {
        self.g.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.g
    }

    /// Lower factor `C` with `C Cᵀ = g + jitter·I`.
    pub fn chol(&self) -> &DenseMatrix {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.g.bilinear(u, v)
    }

    /// Solves `(g + jitter·I) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<DenseVector> {
        check_len("metric solve", self.dim(), b.len())?;
        Ok(solve_lower_transpose(&self.chol, &solve_lower(&self.chol, b)))
    }

    /// Upper factor `L = C⁻ᵀ` with `L Lᵀ = (g + jitter·I)⁻¹`; the scale of a
    /// Brownian increment.
    pub fn inverse_sqrt(&self) -> DenseMatrix {
        lower_inverse(&self.chol).transpose()
    }
}

pub fn pullback_metric<I: Immersion + ?Sized>(imm: &I, z: &[f64]) -> Result<MetricTensor> {
    check_len("metric point", imm.latent_dim(), z.len())?;
    MetricTensor::from_matrix(imm.metric_matrix(z)?).map_err(|e| match e {
        RvaeError::Numerical(msg) => RvaeError::Numerical(format!("{msg} at z = {z:?}")),
        other => other,
    })
}

/// `½ log det G`, the log of the Riemannian volume element.
pub fn log_volume_measure(metric: &MetricTensor) -> f64 {
    0.5 * metric.log_det()
}

/// `log det G(z)` and its gradient in `z`, using
/// `d log det G = Σ_a l_aᵀ dG l_a` over the columns `l_a` of `L` with
/// `L Lᵀ = G⁻¹`. With `sigma_grad` set, also accumulates
/// `scale · ∂ log det G / ∂(log-weights)` of the variance network.
pub fn log_det_gradient(
    imm: &DecoderImmersion<'_>,
    z: &[f64],
    sigma_grad: Option<(&mut [f64], f64)>,
) -> Result<(f64, DenseVector)> {
    let metric = pullback_metric(imm, z)?;
    let l = metric.inverse_sqrt();
    let d = z.len();
    let mut grad = vec![0.0; d];
    let mut sigma_grad = sigma_grad;
    for a in 0..d {
        let col = l.column(a);
        let q = imm.quad_form(z, &col)?;
        grad.iter_mut().zip(&q.grad_z).for_each(|(g, v)| *g += v);
        if let (Some(net), Some((out, scale))) = (imm.sigma, sigma_grad.as_mut()) {
            net.sigma_jvp_sq_norm(z, &col, Some((&mut **out, *scale)))?;
        }
    }
    Ok((metric.log_det(), grad))
}

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{time_transform_derivative, Encoding, Mode, RvaeModel};
use crate::brownian::{sample_posterior, HeatKernel, DEFAULT_WALK_STEPS};
use crate::error::{check_len, Result, RvaeError};
use crate::geometry::{
    curve_energy_grad, fit_geodesic, fit_geodesic_from, log_det_gradient, pullback_metric, sigma_energy_grad,
    DecoderImmersion, GeodesicOptions, GeodesicSpline, Immersion, NaturalCubicBasis,
};
use crate::linalg::DenseVector;
use crate::nn::MlpGrads;

/// `Σ_j ½(log β_j − log 2π − β_j (x_j − mean_j)²)`.
pub fn recon_loglik(x: &[f64], mean: &[f64], precision: &[f64]) -> Result<f64> {
    check_len("reconstruction mean", x.len(), mean.len())?;
    check_len("reconstruction precision", x.len(), precision.len())?;
    let log_2pi = (2.0 * PI).ln();
    Ok(x.iter()
        .zip(mean)
        .zip(precision)
        .map(|((&xj, &mj), &bj)| 0.5 * (bj.ln() - log_2pi - bj * (xj - mj) * (xj - mj)))
        .sum())
}

/// `KL(N(mean, diag var) ‖ N(0, I))`.
pub fn gaussian_kl_standard(mean: &[f64], var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(var)
        .map(|(&m, &v)| m * m + v - 1.0 - v.ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboOptions {
    /// Posterior draws per datapoint.
    pub samples: usize,
    pub walk_steps: usize,
    pub geodesic: GeodesicOptions,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            samples: 16,
            walk_steps: DEFAULT_WALK_STEPS,
            geodesic: GeodesicOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// Monte-Carlo standard error of `kl`; 0 when it is exact.
    pub kl_se: f64,
}

fn with_context(e: RvaeError, ctx: &str) -> RvaeError {
    match e {
        RvaeError::Numerical(msg) => RvaeError::Numerical(format!("{ctx}: {msg}")),
        RvaeError::Contract(msg) => RvaeError::Contract(format!("{ctx}: {msg}")),
        other => other,
    }
}

/// Per-sample integrands of the Monte-Carlo KL between two heat kernels,
/// with the log-determinants at the samples cancelled:
/// `½[log det G(μ_p) − log det G(μ_q) + l²(z, μ_p)/t_p − l²(z, μ_q)/t_q + d(log t_p − log t_q)]`.
/// Their mean is the estimate.
pub fn kl_mc_terms<I: Immersion + ?Sized>(
    q: &HeatKernel,
    p: &HeatKernel,
    imm: &I,
    samples: &[DenseVector],
    geo: &GeodesicOptions,
) -> Result<Vec<f64>> {
    check_len("KL prior dimension", q.dim(), p.dim())?;
    check_len("KL immersion dimension", imm.latent_dim(), q.dim())?;
    let ld_p = pullback_metric(imm, p.center())?.log_det();
    let ld_q = pullback_metric(imm, q.center())?.log_det();
    let base = ld_p - ld_q + q.dim() as f64 * (p.log_time() - q.log_time());
    samples
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let ctx = || format!("KL sample {i}");
            check_len("KL sample", q.dim(), z.len())?;
            let lp = fit_geodesic(imm, z, p.center(), geo).map_err(|e| with_context(e, &ctx()))?.length;
            let lq = fit_geodesic(imm, z, q.center(), geo).map_err(|e| with_context(e, &ctx()))?.length;
            Ok(0.5 * (base + lp * lp / p.time() - lq * lq / q.time()))
        })
        .collect()
}

/// Monte-Carlo `KL(q ‖ p)` from `n` posterior walks of
/// [`DEFAULT_WALK_STEPS`] steps.
pub fn kl_mc<I: Immersion + ?Sized, R: Rng + ?Sized>(
    q: &HeatKernel,
    p: &HeatKernel,
    imm: &I,
    n: usize,
    geo: &GeodesicOptions,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(RvaeError::contract("KL needs at least one sample"));
    }
    let samples = (0..n)
        .map(|_| Ok(sample_posterior(q, imm, DEFAULT_WALK_STEPS, rng)?.z))
        .collect::<Result<Vec<_>>>()?;
    let terms = kl_mc_terms(q, p, imm, &samples, geo)?;
    Ok(terms.iter().sum::<f64>() / n as f64)
}

/// ELBO of one datapoint: reconstruction averaged over `opts.samples`
/// posterior draws minus the KL (Monte-Carlo on the same draws in
/// Riemannian mode, closed form for the baseline).
pub fn elbo<R: Rng + ?Sized>(model: &RvaeModel, x: &[f64], opts: &ElboOptions, rng: &mut R) -> Result<ElboTerms> {
    if opts.samples == 0 {
        return Err(RvaeError::contract("ELBO needs at least one posterior sample"));
    }
    match model.mode {
        Mode::EuclideanBaseline => {
            let noise: Vec<DenseVector> = (0..opts.samples)
                .map(|_| (0..model.latent_dim()).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            elbo_euclidean_with_noise(model, x, &noise)
        }
        Mode::Riemannian => {
            let q = model.encode(x)?;
            let imm = model.immersion()?;
            model.precision_network()?;
            let mut samples = Vec::with_capacity(opts.samples);
            let mut recon = 0.0;
            for _ in 0..opts.samples {
                let z = sample_posterior(&q, &imm, opts.walk_steps, rng)?.z;
                let (mean, beta) = model.decode(&z)?;
                recon += recon_loglik(x, &mean, &beta)?;
                samples.push(z);
            }
            recon /= opts.samples as f64;
            let terms = kl_mc_terms(&q, &model.prior, &imm, &samples, &opts.geodesic)?;
            let n = terms.len() as f64;
            let kl = terms.iter().sum::<f64>() / n;
            let kl_se = if terms.len() > 1 {
                (terms.iter().map(|v| (v - kl).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            Ok(ElboTerms { elbo: recon - kl, recon, kl, kl_se })
        }
    }
}

/// Baseline ELBO with the standard-normal draws supplied:
/// `z_i = μ + √var ⊙ ε_i`.
pub fn elbo_euclidean_with_noise(model: &RvaeModel, x: &[f64], noise: &[DenseVector]) -> Result<ElboTerms> {
    if model.mode != Mode::EuclideanBaseline {
        return Err(RvaeError::contract("closed-form KL applies to the baseline only"));
    }
    if noise.is_empty() {
        return Err(RvaeError::contract("ELBO needs at least one posterior sample"));
    }
    let enc = model.encode_full(x)?;
    let mut recon = 0.0;
    for eps in noise {
        check_len("baseline noise", model.latent_dim(), eps.len())?;
        let z = reparameterize(&enc, eps);
        let (mean, beta) = model.decode(&z)?;
        recon += recon_loglik(x, &mean, &beta)?;
    }
    recon /= noise.len() as f64;
    let kl = gaussian_kl_standard(&enc.mean, &enc.time);
    Ok(ElboTerms { elbo: recon - kl, recon, kl, kl_se: 0.0 })
}

pub(crate) fn reparameterize(enc: &Encoding, eps: &[f64]) -> DenseVector {
    enc.mean
        .iter()
        .zip(&enc.time)
        .zip(eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect()
}

/// `log det G` at the prior center with its gradients in the center and in
/// the variance log-weights; shared by every datapoint of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorGrad {
    pub log_det: f64,
    pub center: DenseVector,
    pub log_weights: Vec<f64>,
}

impl PriorGrad {
    pub fn new(model: &RvaeModel) -> Result<Self> {
        let imm = model.immersion()?;
        let mut log_weights = vec![0.0; model.precision_network()?.log_weights().data().len()];
        let (log_det, center) = log_det_gradient(&imm, model.prior.center(), Some((&mut log_weights, 1.0)))?;
        Ok(PriorGrad { log_det, center, log_weights })
    }
}

/// Warm-start curves kept per datapoint between epochs.
#[derive(Clone, Debug, Default)]
pub struct GeodesicCache {
    pub to_prior: Option<GeodesicSpline>,
    pub to_posterior: Option<GeodesicSpline>,
}

/// Stage-2 loss `−log p(x|z) + KL` of one datapoint with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub log_weights: Vec<f64>,
    pub prior_center: DenseVector,
    pub prior_log_time: f64,
    pub time_head: Option<MlpGrads>,
}

/// Squared length of a geodesic refined from the cached curve, with
/// `(∂/∂start, ∂/∂end)` of `2E` standing in for those of `l²`.
fn warm_geodesic(
    imm: &DecoderImmersion<'_>,
    a: &[f64],
    b: &[f64],
    geo: &GeodesicOptions,
    slot: &mut Option<GeodesicSpline>,
) -> Result<Option<(f64, GeodesicSpline, DenseVector, DenseVector)>> {
    if a == b {
        return Ok(None);
    }
    let init = match slot.take() {
        Some(mut s) if s.basis().len() == geo.n_basis => {
            s.set_endpoints(a, b)?;
            s
        }
        _ => GeodesicSpline::with_basis(a, b, NaturalCubicBasis::snapped(geo.n_basis, geo.n_segments))?,
    };
    let (spline, _) = fit_geodesic_from(imm, init, geo)?;
    let eg = curve_energy_grad(imm, &spline, geo.n_segments)?;
    let start = eg.start.iter().map(|g| 2.0 * g).collect();
    let end = eg.end.iter().map(|g| 2.0 * g).collect();
    *slot = Some(spline.clone());
    Ok(Some((eg.length * eg.length, spline, start, end)))
}

/// Riemannian stage-2 loss with one posterior walk. Gradients flow to the
/// variance log-weights, the prior `(μ_p, log t_p)`, and the time head;
/// the encoder trunk, mean head and decoder mean are frozen. The geodesic
/// terms use the envelope gradient of the fitted curve.
#[allow(clippy::too_many_arguments)]
pub fn riemannian_loss_grad<R: Rng + ?Sized>(
    model: &RvaeModel,
    x: &[f64],
    enc: &Encoding,
    prior_grad: &PriorGrad,
    walk_steps: usize,
    geo: &GeodesicOptions,
    cache: &mut GeodesicCache,
    rng: &mut R,
) -> Result<LossGrad> {
    let net = model.precision_network()?;
    let imm = model.immersion()?;
    let d = model.latent_dim();
    let q = HeatKernel::new(enc.mean.clone(), enc.time[0])?;
    let p = &model.prior;
    let mut w_grad = vec![0.0; net.log_weights().data().len()];

    let sample = sample_posterior(&q, &imm, walk_steps, rng)?;
    let z = &sample.z;

    // reconstruction
    let trace = model.decoder_mean.forward_trace(z)?;
    let mean = trace.output();
    let beta = net.precision(z)?;
    let recon = recon_loglik(x, mean, &beta)?;
    let up_mean: DenseVector = (0..x.len()).map(|j| -beta[j] * (x[j] - mean[j])).collect();
    let up_beta: DenseVector = (0..x.len())
        .map(|j| -0.5 * (1.0 / beta[j] - (x[j] - mean[j]).powi(2)))
        .collect();
    let mut g_z = model.decoder_mean.input_gradient(&trace, &up_mean)?;
    let gz_beta = net.precision_vjp(z, &up_beta, Some((&mut w_grad, 1.0)))?;
    g_z.iter_mut().zip(&gz_beta).for_each(|(a, b)| *a += b);

    // geodesic terms
    let tp = p.time();
    let tq = q.time();
    let mut center_grad = prior_grad.center.iter().map(|g| 0.5 * g).collect::<DenseVector>();
    let mut d_log_tp = 0.5 * d as f64;
    let mut d_log_tq = -0.5 * d as f64;
    let mut lp2 = 0.0;
    if let Some((sq, spline, gs, ge)) = warm_geodesic(&imm, z, p.center(), geo, &mut cache.to_prior)? {
        lp2 = sq;
        for i in 0..d {
            g_z[i] += 0.5 * gs[i] / tp;
            center_grad[i] += 0.5 * ge[i] / tp;
        }
        sigma_energy_grad(&imm, &spline, geo.n_segments, &mut w_grad, 1.0 / tp)?;
        d_log_tp -= 0.5 * sq / tp;
    }
    let mut lq2 = 0.0;
    if let Some((sq, spline, gs, _)) = warm_geodesic(&imm, z, q.center(), geo, &mut cache.to_posterior)? {
        lq2 = sq;
        for i in 0..d {
            g_z[i] -= 0.5 * gs[i] / tq;
        }
        sigma_energy_grad(&imm, &spline, geo.n_segments, &mut w_grad, -1.0 / tq)?;
        d_log_tq += 0.5 * sq / tq;
    }

    // center log-determinants
    let (ld_q, _) = log_det_gradient(&imm, q.center(), Some((&mut w_grad, -0.5)))?;
    w_grad
        .iter_mut()
        .zip(&prior_grad.log_weights)
        .for_each(|(g, v)| *g += 0.5 * v);
    let kl = 0.5 * (prior_grad.log_det - ld_q + lp2 / tp - lq2 / tq + d as f64 * (p.log_time() - q.log_time()));

    // the sample moves with log t_q
    d_log_tq += sample.pullback(&g_z).1;
    let pre = enc.time_pre[0];
    let d_pre = d_log_tq * time_transform_derivative(pre) / tq;
    let time_head = model.encoder_time.param_gradients(&enc.features, &[d_pre])?;

    let loss = kl - recon;
    if !loss.is_finite() {
        return Err(RvaeError::numerical("non-finite stage-2 loss"));
    }
    Ok(LossGrad {
        loss,
        recon,
        kl,
        log_weights: w_grad,
        prior_center: center_grad,
        prior_log_time: d_log_tp,
        time_head: Some(time_head),
    })
}

/// Baseline stage-2 loss at one reparameterized draw. Gradients flow to
/// the variance log-weights and the posterior variance head.
pub fn euclidean_loss_grad<R: Rng + ?Sized>(model: &RvaeModel, x: &[f64], enc: &Encoding, rng: &mut R) -> Result<LossGrad> {
    let net = model.precision_network()?;
    let d = model.latent_dim();
    let eps: DenseVector = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let z = reparameterize(enc, &eps);
    let trace = model.decoder_mean.forward_trace(&z)?;
    let mean = trace.output();
    let beta = net.precision(&z)?;
    let recon = recon_loglik(x, mean, &beta)?;
    let up_mean: DenseVector = (0..x.len()).map(|j| -beta[j] * (x[j] - mean[j])).collect();
    let up_beta: DenseVector = (0..x.len())
        .map(|j| -0.5 * (1.0 / beta[j] - (x[j] - mean[j]).powi(2)))
        .collect();
    let mut w_grad = vec![0.0; net.log_weights().data().len()];
    let mut g_z = model.decoder_mean.input_gradient(&trace, &up_mean)?;
    let gz_beta = net.precision_vjp(&z, &up_beta, Some((&mut w_grad, 1.0)))?;
    g_z.iter_mut().zip(&gz_beta).for_each(|(a, b)| *a += b);
    let d_pre: DenseVector = (0..d)
        .map(|i| {
            let var = enc.time[i];
            let d_var = g_z[i] * eps[i] / (2.0 * var.sqrt()) + 0.5 * (1.0 - 1.0 / var);
            d_var * time_transform_derivative(enc.time_pre[i])
        })
        .collect();
    let time_head = model.encoder_time.param_gradients(&enc.features, &d_pre)?;
    let kl = gaussian_kl_standard(&enc.mean, &enc.time);
    let loss = kl - recon;
    if !loss.is_finite() {
        return Err(RvaeError::numerical("non-finite stage-2 loss"));
    }
    Ok(LossGrad {
        loss,
        recon,
        kl,
        log_weights: w_grad,
        prior_center: vec![0.0; d],
        prior_log_time: 0.0,
        time_head: Some(time_head),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::heat_kernel_logpdf;
    use crate::oracles::{diag_gaussian_loglik, gaussian_kl_closed_form, AnalyticImmersion};
    use crate::linalg::DenseMatrix;
    use crate::rbf::RbfNetwork;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recon_loglik_anchors() {
        let m = 7;
        let v = recon_loglik(&vec![0.3; m], &vec![0.3; m], &vec![1.0; m]).unwrap();
        assert!((v + 0.5 * m as f64 * (2.0 * PI).ln()).abs() < 1e-12);
        let v = recon_loglik(&[1.0], &[0.0], &[1.0]).unwrap();
        assert!((v + 1.4189385332046727).abs() < 1e-12);
        assert!(recon_loglik(&[1.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn recon_loglik_matches_gaussian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mean: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let beta: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..50.0)).collect();
            let ours = recon_loglik(&x, &mean, &beta).unwrap();
            let oracle = diag_gaussian_loglik(&x, &mean, &beta);
            assert!((ours - oracle).abs() < 1e-12 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn standard_kl_matches_closed_form_oracle() {
        let mean = [0.3, -1.2];
        let var = [0.5, 2.0];
        let oracle = gaussian_kl_closed_form(
            &mean,
            &DenseMatrix::from_diag(&var),
            &[0.0, 0.0],
            &DenseMatrix::identity(2),
        )
        .unwrap();
        assert!((gaussian_kl_standard(&mean, &var) - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_kernels_is_exactly_zero() {
        let imm = AnalyticImmersion::Saddle;
        let hk = HeatKernel::new(vec![0.3, -0.2], 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geo = GeodesicOptions { max_iters: 50, ..Default::default() };
        assert_eq!(kl_mc(&hk, &hk, &imm, 8, &geo, &mut rng).unwrap(), 0.0);
        assert!(kl_mc(&hk, &hk, &imm, 0, &geo, &mut rng).is_err());
    }

    #[test]
    fn cancelled_form_equals_direct_difference() {
        let imm = AnalyticImmersion::Saddle;
        let q = HeatKernel::new(vec![0.3, -0.2], 0.05).unwrap();
        let p = HeatKernel::new(vec![-0.1, 0.4], 0.3).unwrap();
        let geo = GeodesicOptions { max_iters: 200, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<DenseVector> =
            (0..6).map(|_| sample_posterior(&q, &imm, 10, &mut rng).unwrap().z).collect();
        let terms = kl_mc_terms(&q, &p, &imm, &samples, &geo).unwrap();
        for (z, t) in samples.iter().zip(&terms) {
            let direct = heat_kernel_logpdf(&q, z, &imm, &geo).unwrap() - heat_kernel_logpdf(&p, z, &imm, &geo).unwrap();
            assert!((direct - t).abs() < 1e-8, "{direct} vs {t}");
        }
    }

    fn tiny_model(mode: Mode) -> RvaeModel {
        let mut m = RvaeModel::new(mode, 5, 2, &[3, 4], 11).unwrap();
        let centers = DenseMatrix::from_rows(&[&[0.0, 0.0], &[1.0, -0.5], &[-0.8, 0.9]]);
        m.decoder_precision = Some(RbfNetwork::with_uniform_weights(centers, 0.7, 5, 1.0, 0.01).unwrap());
        m
    }

    #[test]
    fn baseline_elbo_matches_textbook_vae() {
        let model = tiny_model(Mode::EuclideanBaseline);
        let x = [0.1, 0.9, 0.4, 0.3, 0.7];
        let noise = vec![vec![0.3, -1.1], vec![1.5, 0.2], vec![-0.4, 0.05]];
        let got = elbo_euclidean_with_noise(&model, &x, &noise).unwrap();

        // textbook: reparameterized Gaussian log-likelihood, analytic KL
        let feats = model.encoder_trunk.forward(&x).unwrap();
        let mu = model.encoder_mean.forward(&feats).unwrap();
        let var: Vec<f64> = model
            .encoder_time
            .forward(&feats)
            .unwrap()
            .iter()
            .map(|&a| (1.0 + a.exp()).ln() + 1e-4)
            .collect();
        let rbf = model.decoder_precision.as_ref().unwrap();
        let mut rec = 0.0;
        for eps in &noise {
            let z: Vec<f64> = (0..2).map(|i| mu[i] + var[i].sqrt() * eps[i]).collect();
            let mean = model.decoder_mean.forward(&z).unwrap();
            let obs_precision = rbf.precision(&z).unwrap();
            rec += diag_gaussian_loglik(&x, &mean, &obs_precision);
        }
        rec /= noise.len() as f64;
        let kl: f64 = (0..2).map(|i| 0.5 * (mu[i] * mu[i] + var[i] - 1.0 - var[i].ln())).sum();
        assert!((got.recon - rec).abs() < 1e-10);
        assert!((got.kl - kl).abs() < 1e-10);
        assert!((got.elbo - (rec - kl)).abs() < 1e-10);
    }

    #[test]
    fn riemannian_elbo_is_finite_and_consistent() {
        let model = tiny_model(Mode::Riemannian);
        let opts = ElboOptions { samples: 4, walk_steps: 5, geodesic: GeodesicOptions { max_iters: 60, ..Default::default() } };
        let x = [0.1, 0.9, 0.4, 0.3, 0.7];
        let a = elbo(&model, &x, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = elbo(&model, &x, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.elbo.is_finite());
        assert!((a.elbo - (a.recon - a.kl)).abs() < 1e-12);
        let base = tiny_model(Mode::EuclideanBaseline);
        let c = elbo(&base, &x, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(c.kl >= 0.0);
    }

    fn stage2_loss(model: &RvaeModel, x: &[[f64; 5]], seed: u64, geo: &GeodesicOptions) -> (f64, DenseVector, f64) {
        let pg = PriorGrad::new(model).unwrap();
        let mut loss = 0.0;
        let mut gc = vec![0.0; 2];
        let mut gt = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let enc = model.encode_full(xi).unwrap();
            let mut rng = crate::parallel::stream_rng(seed, i as u64);
            let mut cache = GeodesicCache::default();
            let g = riemannian_loss_grad(model, xi, &enc, &pg, 4, geo, &mut cache, &mut rng).unwrap();
            loss += g.loss;
            gc.iter_mut().zip(&g.prior_center).for_each(|(a, b)| *a += b);
            gt += g.prior_log_time;
        }
        let n = x.len() as f64;
        (loss / n, gc.iter().map(|v| v / n).collect(), gt / n)
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let mut model = tiny_model(Mode::Riemannian);
        model.prior = HeatKernel::new(vec![0.2, -0.1], 0.5).unwrap();
        model.encoder_time.layers_mut()[0].bias = vec![-2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<[f64; 5]> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let geo = GeodesicOptions { max_iters: 3000, rel_tol: 1e-12, patience: 20, ..Default::default() };
        let (_, gc, gt) = stage2_loss(&model, &x, 21, &geo);
        let h = 1e-4;
        let eval = |center: Vec<f64>, log_t: f64| {
            let mut m = model.clone();
            m.prior = HeatKernel::from_log_time(center, log_t).unwrap();
            stage2_loss(&m, &x, 21, &geo).0
        };
        let c = model.prior.center().to_vec();
        let lt = model.prior.log_time();
        for i in 0..2 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[i] += h;
            cm[i] -= h;
            let fd = (eval(cp, lt) - eval(cm, lt)) / (2.0 * h);
            assert!((fd - gc[i]).abs() < 1e-2 * fd.abs().max(1e-3), "center {i}: {fd} vs {}", gc[i]);
        }
        let fd = (eval(c.clone(), lt + h) - eval(c, lt - h)) / (2.0 * h);
        assert!((fd - gt).abs() < 1e-2 * fd.abs().max(1e-3), "log t: {fd} vs {gt}");
    }

    #[test]
    fn time_head_gradient_matches_finite_differences() {
        // one walk step keeps the stopped factor at the fixed posterior center
        let mut model = tiny_model(Mode::Riemannian);
        model.prior = HeatKernel::new(vec![0.2, -0.1], 0.5).unwrap();
        model.encoder_time.layers_mut()[0].bias = vec![-2.0];
        let x = [0.2, 0.8, 0.5, 0.1, 0.6];
        let geo = GeodesicOptions { max_iters: 3000, rel_tol: 1e-12, patience: 20, ..Default::default() };
        let run = |m: &RvaeModel| {
            let pg = PriorGrad::new(m).unwrap();
            let enc = m.encode_full(&x).unwrap();
            let mut rng = crate::parallel::stream_rng(4, 0);
            riemannian_loss_grad(m, &x, &enc, &pg, 1, &geo, &mut GeodesicCache::default(), &mut rng).unwrap()
        };
        let g = run(&model);
        // the inner geodesic solves leave ~1e-6 noise in the loss, so a small step is swamped
        let h = 1e-3;
        let shifted = |delta: f64| {
            let mut m = model.clone();
            m.encoder_time.layers_mut()[0].bias[0] += delta;
            run(&m).loss
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an = g.time_head.as_ref().unwrap().biases[0][0];
        assert!((fd - an).abs() < 1e-2 * fd.abs().max(1e-2), "time head: {fd} vs {an}");
    }

    #[test]
    fn baseline_stage2_gradients_match_finite_differences() {
        let model = tiny_model(Mode::EuclideanBaseline);
        let x = [0.2, 0.8, 0.5, 0.1, 0.6];
        let run = |m: &RvaeModel| {
            let enc = m.encode_full(&x).unwrap();
            euclidean_loss_grad(m, &x, &enc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
        };
        let g = run(&model);
        assert_eq!(g.prior_log_time, 0.0);
        let h = 1e-6;
        for idx in [0, 4, 8, 14] {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.decoder_precision.as_mut().unwrap().update_log_weights(|w| w[idx] += delta);
                run(&m).loss
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!((fd - g.log_weights[idx]).abs() < 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", g.log_weights[idx]);
        }
        let th = g.time_head.as_ref().unwrap();
        for (r, c) in [(0, 0), (1, 2)] {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let w = &mut m.encoder_time.layers_mut()[0].weights;
                w.set(r, c, w.get(r, c) + delta);
                run(&m).loss
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an = th.weights[0].get(r, c);
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1e-3), "{fd} vs {an}");
        }
    }
}

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::objective::{euclidean_loss_grad, riemannian_loss_grad, GeodesicCache, LossGrad, PriorGrad};
use super::{time_transform, ElboOptions, Encoding, Mode, RvaeModel, TIME_FLOOR};
use crate::brownian::{HeatKernel, DEFAULT_WALK_STEPS};
use crate::data::Dataset;
use crate::error::{check_len, Result, RvaeError};
use crate::geometry::{curve_length, GeodesicOptions, GeodesicSpline};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::nn::{softplus_inverse, AdamState, MlpGrads};
use crate::parallel::stream_rng;
use crate::rbf::{fit_centers, RbfNetwork, DEFAULT_BANDWIDTH, DEFAULT_PRECISION_FLOOR, MAX_CENTERS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Posterior walks per datapoint in the stage-2 loss.
    pub kl_samples: usize,
    /// Posterior walks per datapoint at evaluation.
    pub eval_samples: usize,
    pub walk_steps: usize,
    pub seed: u64,
    /// Warm-started solves inside the stage-2 loss.
    pub geodesic: GeodesicOptions,
    pub eval_geodesic: GeodesicOptions,
    pub rbf_bandwidth: f64,
    pub rbf_floor: f64,
    pub max_centers: usize,
    /// Full-batch steps fitting the variance network to stage-1 residuals.
    pub rbf_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Riemannian,
            stage1_epochs: 100,
            stage2_epochs: 200,
            batch_size: 100,
            lr: 1e-3,
            kl_samples: 1,
            eval_samples: 16,
            walk_steps: DEFAULT_WALK_STEPS,
            seed: 0,
            geodesic: GeodesicOptions { max_iters: 100, ..GeodesicOptions::default() },
            eval_geodesic: GeodesicOptions::default(),
            rbf_bandwidth: DEFAULT_BANDWIDTH,
            rbf_floor: DEFAULT_PRECISION_FLOOR,
            max_centers: MAX_CENTERS,
            rbf_warmup_steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("kl_samples", self.kl_samples),
            ("eval_samples", self.eval_samples),
            ("walk_steps", self.walk_steps),
            ("max_centers", self.max_centers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(RvaeError::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr", self.lr), ("rbf_bandwidth", self.rbf_bandwidth), ("rbf_floor", self.rbf_floor)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RvaeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, g) in [("geodesic", &self.geodesic), ("eval_geodesic", &self.eval_geodesic)] {
            if g.n_segments < 2 || !(g.lr > 0.0) || g.patience == 0 {
                return Err(RvaeError::Config(format!("invalid {name} options {g:?}")));
            }
        }
        Ok(())
    }

    pub fn elbo_options(&self) -> ElboOptions {
        ElboOptions {
            samples: self.eval_samples,
            walk_steps: self.walk_steps,
            geodesic: self.eval_geodesic,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    /// Counted across both stages, from 1.
    pub epoch: usize,
    pub stage: u8,
    pub neg_elbo: f64,
    pub rec: f64,
    pub kl: f64,
    pub t_p: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
}

/// `epoch,stage,neg_elbo,rec,kl,t_p,wall_seconds`. Without `wall_clock` the
/// last column is written as 0 so reruns are byte-identical.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], wall_clock: bool, out: &mut W) -> Result<()> {
    writeln!(out, "epoch,stage,neg_elbo,rec,kl,t_p,wall_seconds")?;
    for r in rows {
        let wall = if wall_clock { r.wall_seconds } else { 0.0 };
        writeln!(
            out,
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.3}",
            r.epoch, r.stage, r.neg_elbo, r.rec, r.kl, r.t_p, wall
        )?;
    }
    Ok(())
}

const STAGE2_STREAM: u64 = 2 << 56;

fn item_stream(stage: u64, epoch: usize, index: usize) -> u64 {
    stage | ((epoch as u64) << 32) | index as u64
}

/// Two-stage training. Stage 1 fits the encoder and decoder mean as an
/// autoencoder in both modes. Stage 2 freezes them,
/// builds the variance network on the stage-1 codes and optimizes it with
/// the prior and the posterior spread head on the full objective.
pub fn train(model: &mut RvaeModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RvaeError::contract("training needs a non-empty dataset"));
    }
    check_len("training data dimension", model.data_dim(), data.dim())?;
    if model.mode != cfg.mode {
        return Err(RvaeError::Config(format!(
            "model mode {} does not match configured mode {}",
            model.mode, cfg.mode
        )));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    stage_one(model, data, cfg, &mut shuffle_rng, &mut report, start)?;
    if cfg.stage2_epochs > 0 {
        prepare_stage_two(model, data, cfg, &mut shuffle_rng)?;
        stage_two(model, data, cfg, &mut shuffle_rng, &mut report, start)?;
    }
    Ok(report)
}

struct StageOneGrad {
    loss_sq: f64,
    trunk: MlpGrads,
    mean: MlpGrads,
    decoder: MlpGrads,
}

impl StageOneGrad {
    fn add(&mut self, other: &StageOneGrad) {
        self.loss_sq += other.loss_sq;
        self.trunk.add_assign(&other.trunk);
        self.mean.add_assign(&other.mean);
        self.decoder.add_assign(&other.decoder);
    }

    fn scale(&mut self, s: f64) {
        self.trunk.scale(s);
        self.mean.scale(s);
        self.decoder.scale(s);
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.slices();
        out.extend(self.mean.slices());
        out.extend(self.decoder.slices());
        out
    }
}

/// Squared-error autoencoder step for one input through the code mean.
fn stage_one_item(model: &RvaeModel, x: &[f64]) -> Result<StageOneGrad> {
    let trunk_trace = model.encoder_trunk.forward_trace(x)?;
    let mean_trace = model.encoder_mean.forward_trace(trunk_trace.output())?;
    let dec_trace = model.decoder_mean.forward_trace(mean_trace.output())?;
    let resid: DenseVector = dec_trace.output().iter().zip(x).map(|(r, xi)| r - xi).collect();
    let loss_sq: f64 = resid.iter().map(|r| r * r).sum();
    if !loss_sq.is_finite() {
        return Err(RvaeError::numerical("non-finite reconstruction"));
    }
    let up: DenseVector = resid.iter().map(|r| 2.0 * r).collect();
    let (decoder, g_code) = model.decoder_mean.backward(&dec_trace, &up)?;
    let (mean, g_features) = model.encoder_mean.backward(&mean_trace, &g_code)?;
    let (trunk, _) = model.encoder_trunk.backward(&trunk_trace, &g_features)?;
    Ok(StageOneGrad { loss_sq, trunk, mean, decoder })
}

fn stage_one_params(model: &mut RvaeModel) -> Vec<&mut [f64]> {
    let mut params = model.encoder_trunk.param_slices_mut();
    params.extend(model.encoder_mean.param_slices_mut());
    params.extend(model.decoder_mean.param_slices_mut());
    params
}

fn stage_one(
    model: &mut RvaeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
    start: Instant,
) -> Result<()> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let lens: Vec<usize> = stage_one_params(model).iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&lens);
    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(shuffle_rng);
        let mut sq_total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &*model;
            let items = batch
                .par_iter()
                .map(|&i| stage_one_item(snapshot, data.features.row(i)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| at_batch(e, 1, epoch, b))?;
            let mut iter = items.into_iter();
            let mut total = iter.next().expect("batches are non-empty");
            for g in iter {
                total.add(&g);
            }
            sq_total += total.loss_sq;
            total.scale(1.0 / batch.len() as f64);
            adam.step(&mut stage_one_params(model), &total.slices(), cfg.lr)
                .map_err(|e| at_batch(e, 1, epoch, b))?;
        }
        let rec = sq_total / n as f64;
        report.metrics.push(MetricRow {
            epoch: epoch + 1,
            stage: 1,
            neg_elbo: rec,
            rec,
            kl: 0.0,
            t_p: model.prior.time(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

fn at_batch(e: RvaeError, stage: u8, epoch: usize, batch: usize) -> RvaeError {
    let ctx = format!("stage {stage}, epoch {}, batch {batch}", epoch + 1);
    match e {
        RvaeError::Numerical(msg) => RvaeError::Numerical(format!("{ctx}: {msg}")),
        other => other,
    }
}

/// Builds the variance network on the stage-1 codes and initializes the
/// prior and the posterior spread head.
fn prepare_stage_two(model: &mut RvaeModel, data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = data.len();
    let m = data.dim();
    let d = model.latent_dim();
    let per_item = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(DenseVector, DenseVector, f64)> {
            let x = data.features.row(i);
            let code = model.encode_full(x)?.mean;
            let recon = model.decoder_mean.forward(&code)?;
            let sq = recon.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).collect();
            let jac_sq: f64 = model.decoder_mean.input_jacobian(&code)?.data().iter().map(|v| v * v).sum();
            Ok((code, sq, jac_sq))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut codes = DenseMatrix::zeros(n, d);
    let mut sq_resid = DenseMatrix::zeros(n, m);
    let mean_jac_sq = per_item.iter().map(|p| p.2).sum::<f64>() / n as f64;
    for (i, (code, sq, _)) in per_item.iter().enumerate() {
        codes.row_mut(i).copy_from_slice(code);
        sq_resid.row_mut(i).copy_from_slice(sq);
    }
    let k = cfg.max_centers.min(n / 2).max(1);
    let centers = fit_centers(&codes, k, rng)?;
    let mean_sq = sq_resid.data().iter().sum::<f64>() / (n * m) as f64;
    let probe = RbfNetwork::with_uniform_weights(centers.clone(), cfg.rbf_bandwidth, 1, 0.0, cfg.rbf_floor)?;
    let mass = (0..n).map(|i| probe.kernels(codes.row(i)).iter().sum::<f64>()).sum::<f64>() / n as f64;
    // start near the precision that matches the average residual
    let log_w = (1.0 / (mean_sq.max(1e-12) * mass.max(1e-300))).ln();
    let mut net = RbfNetwork::with_uniform_weights(centers, cfg.rbf_bandwidth, m, log_w, cfg.rbf_floor)?;
    net.fit_weights(&codes, &sq_resid, cfg.rbf_warmup_steps, 1e-2)?;
    model.decoder_precision = Some(net);

    if model.mode == Mode::Riemannian {
        let mut center = vec![0.0; d];
        for i in 0..n {
            center.iter_mut().zip(codes.row(i)).for_each(|(c, v)| *c += v / n as f64);
        }
        let imm = model.immersion()?;
        let sq_lengths = (0..n)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let code = codes.row(i);
                if code == center.as_slice() {
                    return Ok(0.0);
                }
                let line = GeodesicSpline::new(code, &center, 0)?;
                let l = curve_length(&imm, &line, cfg.geodesic.n_segments)?;
                Ok(l * l)
            })
            .collect::<Result<Vec<f64>>>()?;
        let t_p = (sq_lengths.iter().sum::<f64>() / (n * d) as f64).max(TIME_FLOOR);
        model.prior = HeatKernel::new(center, t_p)?;
    }
    // Posterior spread starts input-independent. A walk at time t adds
    // about t·d to the squared error; a Gaussian of variance s² adds
    // s²·|J|², so both start at the same extra error d·mean_sq.
    let t_q = match model.mode {
        Mode::Riemannian => mean_sq,
        Mode::EuclideanBaseline => d as f64 * mean_sq / mean_jac_sq.max(f64::MIN_POSITIVE),
    }
    .max(2.0 * TIME_FLOOR);
    for layer in model.encoder_time.layers_mut() {
        layer.weights.scale(0.0);
        layer.bias.iter_mut().for_each(|b| *b = softplus_inverse(t_q - TIME_FLOOR));
    }
    Ok(())
}

fn stage_two(
    model: &mut RvaeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    shuffle_rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
    start: Instant,
) -> Result<()> {
    let n = data.len();
    let d = model.latent_dim();
    let offset = cfg.stage1_epochs;
    let riemannian = model.mode == Mode::Riemannian;
    // trunk and mean head are frozen from here on
    let frozen = (0..n)
        .into_par_iter()
        .map(|i| model.encode_full(data.features.row(i)))
        .collect::<Result<Vec<Encoding>>>()?;
    let n_weights = model.precision_network()?.log_weights().data().len();
    let head_lens: Vec<usize> = model.encoder_time.param_slices_mut().iter().map(|p| p.len()).collect();
    let mut lens = vec![n_weights];
    if riemannian {
        lens.extend([d, 1]);
    }
    lens.extend(&head_lens);
    let mut adam = AdamState::new(&lens);
    let mut caches: Vec<GeodesicCache> = vec![GeodesicCache::default(); n];
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(shuffle_rng);
        let (mut loss_total, mut rec_total, mut kl_total) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &*model;
            let prior_grad = if riemannian { Some(PriorGrad::new(snapshot)?) } else { None };
            let mut work: Vec<(usize, GeodesicCache)> =
                batch.iter().map(|&i| (i, std::mem::take(&mut caches[i]))).collect();
            let items = work
                .par_iter_mut()
                .map(|(i, cache)| {
                    let x = data.features.row(*i);
                    let mut enc = frozen[*i].clone();
                    enc.time_pre = snapshot.encoder_time.forward(&enc.features)?;
                    enc.time = enc.time_pre.iter().map(|&a| time_transform(a)).collect();
                    let mut rng = stream_rng(cfg.seed, item_stream(STAGE2_STREAM, epoch, *i));
                    let mut acc: Option<LossGrad> = None;
                    for _ in 0..cfg.kl_samples {
                        let g = match &prior_grad {
                            Some(pg) => riemannian_loss_grad(
                                snapshot,
                                x,
                                &enc,
                                pg,
                                cfg.walk_steps,
                                &cfg.geodesic,
                                cache,
                                &mut rng,
                            )?,
                            None => euclidean_loss_grad(snapshot, x, &enc, &mut rng)?,
                        };
                        acc = Some(match acc {
                            None => g,
                            Some(a) => add_loss_grad(a, &g),
                        });
                    }
                    Ok(scale_loss_grad(acc.expect("kl_samples > 0"), 1.0 / cfg.kl_samples as f64))
                })
                .collect::<Result<Vec<LossGrad>>>()
                .map_err(|e| at_batch(e, 2, offset + epoch, b))?;
            for (i, cache) in work {
                caches[i] = cache;
            }
            let mut iter = items.into_iter();
            let mut total = iter.next().expect("batches are non-empty");
            for g in iter {
                total = add_loss_grad(total, &g);
            }
            loss_total += total.loss;
            rec_total -= total.recon;
            kl_total += total.kl;
            let total = scale_loss_grad(total, 1.0 / batch.len() as f64);
            let head = total.time_head.as_ref().expect("both modes train the spread head");
            let mut grads: Vec<&[f64]> = vec![&total.log_weights];
            let log_t_grad = [total.prior_log_time];
            if riemannian {
                grads.push(&total.prior_center);
                grads.push(&log_t_grad);
            }
            grads.extend(head.slices());

            let mut center = model.prior.center().to_vec();
            let mut log_t = [model.prior.log_time()];
            let RvaeModel { decoder_precision, encoder_time, .. } = &mut *model;
            let net = decoder_precision.as_mut().expect("built before stage two");
            let step = net.update_log_weights(|lw| {
                let mut params: Vec<&mut [f64]> = vec![lw];
                if riemannian {
                    params.push(&mut center);
                    params.push(&mut log_t);
                }
                params.extend(encoder_time.param_slices_mut());
                adam.step(&mut params, &grads, cfg.lr)
            });
            step.map_err(|e| at_batch(e, 2, offset + epoch, b))?;
            if riemannian {
                model.prior = HeatKernel::from_log_time(center, log_t[0])
                    .map_err(|e| at_batch(e, 2, offset + epoch, b))?;
            }
        }
        report.metrics.push(MetricRow {
            epoch: offset + epoch + 1,
            stage: 2,
            neg_elbo: loss_total / n as f64,
            rec: rec_total / n as f64,
            kl: kl_total / n as f64,
            t_p: model.prior.time(),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

fn add_loss_grad(mut a: LossGrad, b: &LossGrad) -> LossGrad {
    a.loss += b.loss;
    a.recon += b.recon;
    a.kl += b.kl;
    a.log_weights.iter_mut().zip(&b.log_weights).for_each(|(x, y)| *x += y);
    a.prior_center.iter_mut().zip(&b.prior_center).for_each(|(x, y)| *x += y);
    a.prior_log_time += b.prior_log_time;
    if let (Some(x), Some(y)) = (a.time_head.as_mut(), b.time_head.as_ref()) {
        x.add_assign(y);
    }
    a
}

fn scale_loss_grad(mut a: LossGrad, s: f64) -> LossGrad {
    a.loss *= s;
    a.recon *= s;
    a.kl *= s;
    a.log_weights.iter_mut().for_each(|v| *v *= s);
    a.prior_center.iter_mut().for_each(|v| *v *= s);
    a.prior_log_time *= s;
    if let Some(h) = a.time_head.as_mut() {
        h.scale(s);
    }
    a
}

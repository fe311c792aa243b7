//! One-hidden-layer ReLU classifier on latent codes, scored by F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Result, RvaeError};
use crate::linalg::DenseMatrix;
use crate::nn::{Activation, AdamState, Mlp, MlpGrads};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of the codes held out for scoring.
    pub test_fraction: f64,
    /// Fixes the train/test split across classifier seeds.
    pub split_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 100,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    /// Classes never predicted; their F1 is 0.
    pub degenerate: Vec<usize>,
}

/// Per-class `2PR/(P+R)` and their unweighted mean.
pub fn f1_scores(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<F1Report> {
    check_len("predictions", truth.len(), predicted.len())?;
    if n_classes == 0 {
        return Err(RvaeError::contract("F1 needs at least one class"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(RvaeError::contract(format!("label out of range: {t} or {p} ≥ {n_classes}")));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut degenerate = Vec::new();
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            if tp[c] + fp[c] == 0 {
                degenerate.push(c);
                return 0.0;
            }
            let precision = tp[c] as f64 / (tp[c] + fp[c]) as f64;
            let recall = if tp[c] + fn_[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fn_[c]) as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / n_classes as f64;
    Ok(F1Report { per_class, macro_f1, degenerate })
}

/// Trained network with the input standardization it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: Mlp,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Classifier {
    pub fn predict(&self, code: &[f64]) -> Result<usize> {
        check_len("classifier input", self.shift.len(), code.len())?;
        let x: Vec<f64> = code
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let logits = self.net.forward(&x)?;
        Ok(argmax(&logits))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy trained with Adam on standardized codes.
pub fn train_classifier(
    codes: &DenseMatrix,
    labels: &[usize],
    n_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier> {
    check_len("classifier labels", codes.rows(), labels.len())?;
    if codes.rows() == 0 || n_classes < 2 {
        return Err(RvaeError::contract("classifier needs data and at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(RvaeError::contract(format!("label {bad} out of range for {n_classes} classes")));
    }
    let n = codes.rows();
    let d = codes.cols();
    let mut shift = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for i in 0..n {
        shift.iter_mut().zip(codes.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    for i in 0..n {
        for (k, v) in codes.row(i).iter().enumerate() {
            scale[k] += (v - shift[k]).powi(2) / n as f64;
        }
    }
    scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|i| codes.row(i).iter().enumerate().map(|(k, v)| (v - shift[k]) / scale[k]).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::he_init(&[d, cfg.hidden, n_classes], &[Activation::Relu, Activation::Linear], &mut rng);
    let lens: Vec<usize> = net.param_slices_mut().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&lens);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = MlpGrads::zeros_like(&net);
            for &i in batch {
                let trace = net.forward_trace(&inputs[i])?;
                let logits = trace.output();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let total: f64 = exps.iter().sum();
                let up: Vec<f64> = exps
                    .iter()
                    .enumerate()
                    .map(|(c, e)| (e / total - if c == labels[i] { 1.0 } else { 0.0 }) / batch.len() as f64)
                    .collect();
                grads.add_assign(&net.backward(&trace, &up)?.0);
            }
            adam.step(&mut net.param_slices_mut(), &grads.slices(), cfg.lr)?;
        }
    }
    Ok(Classifier { net, shift, scale })
}

/// Splits the codes once with `cfg.split_seed`, trains with `seed` and
/// scores the held-out part.
pub fn classify_codes(
    codes: &DenseMatrix,
    labels: &[usize],
    n_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<F1Report> {
    check_len("classifier labels", codes.rows(), labels.len())?;
    let n = codes.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(RvaeError::contract(format!("cannot hold out {n_test} of {n} codes")));
    }
    let (test_idx, train_idx) = idx.split_at(n_test);
    let pick = |ids: &[usize]| -> Result<(DenseMatrix, Vec<usize>)> {
        let mut data = Vec::with_capacity(ids.len() * codes.cols());
        for &i in ids {
            data.extend_from_slice(codes.row(i));
        }
        Ok((DenseMatrix::from_vec(ids.len(), codes.cols(), data)?, ids.iter().map(|&i| labels[i]).collect()))
    };
    let (train_x, train_y) = pick(train_idx)?;
    let (test_x, test_y) = pick(test_idx)?;
    let clf = train_classifier(&train_x, &train_y, n_classes, cfg, seed)?;
    let predicted = (0..test_x.rows())
        .map(|i| clf.predict(test_x.row(i)))
        .collect::<Result<Vec<_>>>()?;
    f1_scores(&test_y, &predicted, n_classes)
}

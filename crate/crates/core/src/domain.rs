//! Domain-adversarial head: pooled encoder latents pass through a gradient
//! reversal into a small discriminator trained with binary cross-entropy.

use trajformer_autodiff::{Tape, Tensor, Var};

use crate::config::{parse_bool, parse_value, Configurable};
use crate::error::{Error, Result};
use crate::data::TrajectorySample;
use crate::model::{encode_batch, Batch, ModelConfig};
use crate::params::{linear, Bound, ParamStore};
use crate::transformer::Dropout;

/// Discriminator outputs are kept this far from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct DatConfig {
    pub enabled: bool,
    /// Gradient-reversal coefficient; also the effective weight of the
    /// adversarial term seen by the encoder.
    pub lambda: f64,
}

impl Default for DatConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 1.0,
        }
    }
}

impl DatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("dat_lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

impl Configurable for DatConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "dat" => self.enabled = parse_bool(key, value)?,
            "dat_lambda" => self.lambda = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dat", if self.enabled { "on" } else { "off" }.to_string()),
            ("dat_lambda", format!("{:?}", self.lambda)),
        ]
    }
}

/// Pooling matrix `[B × S·T]` averaging each sample's sequences over time.
pub fn pooling_matrix(sequence_sample: &[usize], samples: usize, steps: usize) -> Result<Tensor> {
    let seqs = sequence_sample.len();
    let mut counts = vec![0usize; samples];
    for &k in sequence_sample {
        if k >= samples {
            return Err(Error::Contract(format!("sequence owned by sample {k} of {samples}")));
        }
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("sample {k} has every agent masked")));
    }
    Ok(Tensor::from_fn([samples, seqs * steps], |idx| {
        let (k, col) = (idx / (seqs * steps), idx % (seqs * steps));
        if sequence_sample[col / steps] == k {
            1.0 / (counts[k] * steps) as f64
        } else {
            0.0
        }
    }))
}

/// Mean over time and valid agents of the memory `[S × T × d]`: `[B × d]`.
pub fn pool_latent(tape: &mut Tape, memory: Var, sequence_sample: &[usize], samples: usize) -> Result<Var> {
    let s = tape.shape(memory).to_vec();
    if s.len() != 3 || s[0] != sequence_sample.len() {
        return Err(Error::Contract(format!(
            "memory {s:?} does not match {} sequences",
            sequence_sample.len()
        )));
    }
    let pool = tape.constant(pooling_matrix(sequence_sample, samples, s[1])?);
    let flat = tape.reshape(memory, &[s[0] * s[1], s[2]])?;
    Ok(tape.matmul(pool, flat)?)
}

/// Pooled encoder latents (one row per sample) from frozen parameters,
/// computed `chunk` samples at a time.
pub fn latent_features(params: &ParamStore, cfg: &ModelConfig, samples: &[TrajectorySample], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&TrajectorySample> = part.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let memory = encode_batch(&mut tape, &p, cfg, &batch, &mut Dropout::disabled())?;
        let pooled = pool_latent(&mut tape, memory, &batch.sequence_sample, part.len())?;
        let value = tape.value(pooled);
        let d = value.shape()[1];
        rows.extend(value.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(rows)
}

/// Identity forward; gradient multiplied by `-lambda` on the way back.
pub fn grad_reverse(tape: &mut Tape, x: Var, lambda: f64) -> Var {
    tape.scale_grad(x, -lambda)
}

/// `[B × d]` → clamped probabilities `[B × 1]` of the target domain.
pub fn discriminate(tape: &mut Tape, p: &Bound, latent: Var) -> Result<Var> {
    let h = linear(tape, p, "disc.0", latent)?;
    let h = tape.relu(h);
    let logit = linear(tape, p, "disc.1", h)?;
    let prob = tape.sigmoid(logit);
    Ok(tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Batch-mean binary cross-entropy of `predicted` (`[B × 1]`) against 0/1 labels.
pub fn domain_bce(tape: &mut Tape, predicted: Var, labels: &[f64]) -> Result<Var> {
    let b = labels.len();
    if tape.shape(predicted) != [b, 1] {
        return Err(Error::Contract(format!(
            "{} labels for predictions of shape {:?}",
            b,
            tape.shape(predicted)
        )));
    }
    let a = tape.constant(Tensor::new([b, 1], labels.to_vec())?);
    let not_a = tape.constant(Tensor::new([b, 1], labels.iter().map(|l| 1.0 - l).collect())?);
    let one = tape.scalar(1.0);
    let log_p = tape.log(predicted);
    let neg_p = tape.neg(predicted);
    let q = tape.add(neg_p, one)?;
    let log_q = tape.log(q);
    let pos = tape.mul(a, log_p)?;
    let neg = tape.mul(not_a, log_q)?;
    let total = tape.add(pos, neg)?;
    let mean = tape.mean(total);
    Ok(tape.neg(mean))
}

/// Binary cross-entropy of plain values, clamped like the discriminator.
pub fn bce_value(predicted: f64, label: f64) -> f64 {
    let p = predicted.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

pub struct DatOutputs {
    pub loss: Var,
    /// `[B × 1]` probabilities.
    pub predicted: Var,
}

/// Pool → reverse → discriminate → BCE against the batch's domain labels.
pub fn dat_forward(tape: &mut Tape, p: &Bound, memory: Var, batch: &Batch, cfg: &DatConfig) -> Result<DatOutputs> {
    let pooled = pool_latent(tape, memory, &batch.sequence_sample, batch.samples)?;
    let reversed = grad_reverse(tape, pooled, cfg.lambda);
    let predicted = discriminate(tape, p, reversed)?;
    let loss = domain_bce(tape, predicted, &batch.labels)?;
    Ok(DatOutputs { loss, predicted })
}

/// Fraction of samples whose thresholded prediction matches the label.
pub fn discriminator_accuracy(predicted: &Tensor, labels: &[f64]) -> f64 {
    let hits = predicted
        .data()
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l >= 0.5))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Logistic-regression probe on fixed features, for measuring how much
/// domain information a representation carries.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearProbe {
    /// Standardizes features, then runs full-batch gradient descent on the
    /// L2-regularized logistic loss.
    pub fn fit(features: &[Vec<f64>], labels: &[f64], epochs: usize, learning_rate: f64, l2: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Contract(format!("{n} feature rows for {} labels", labels.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Contract("ragged probe features".into()));
        }
        let (mean, scale) = standardization(features);
        let mut probe = Self {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let err = probe.prob_standardized(x) - y;
                for j in 0..d {
                    gw[j] += err * x[j];
                }
                gb += err;
            }
            for j in 0..d {
                probe.weights[j] -= learning_rate * (gw[j] / n as f64 + l2 * probe.weights[j]);
            }
            probe.bias -= learning_rate * gb / n as f64;
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn prob_standardized(&self, x: &[f64]) -> f64 {
        let z: f64 = self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        self.prob_standardized(&self.standardize(features))
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[f64]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| (self.probability(f) >= 0.5) == (l >= 0.5))
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Two-layer probe with the discriminator's shape (`relu` hidden layer,
/// sigmoid output), fitted with full-batch Adam on standardized features.
#[derive(Debug, Clone)]
pub struct MlpProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: ParamStore,
}

fn standardization(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let d = features[0].len();
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (mean, scale)
}

impl MlpProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[f64], hidden: usize, steps: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let n = features.len();
        if n == 0 || labels.len() != n {
            return Err(Error::Contract(format!("{n} feature rows for {} labels", labels.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Contract("ragged probe features".into()));
        }
        let (mean, scale) = standardization(features);
        let mut params = ParamStore::new();
        let mut rng = crate::rng::stream(seed, "probe.init");
        crate::params::init_linear(&mut params, &mut rng, "probe.0", d, hidden);
        crate::params::init_linear(&mut params, &mut rng, "probe.1", hidden, 1);
        let mut probe = Self { mean, scale, params };
        let x = probe.design(features)?;
        let cfg = crate::training::AdamConfig {
            learning_rate,
            ..Default::default()
        };
        let mut state = crate::training::AdamState::new(&probe.params);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let p = probe.params.bind(&mut tape);
            let input = tape.constant(x.clone());
            let predicted = Self::forward(&mut tape, &p, input)?;
            let loss = domain_bce(&mut tape, predicted, labels)?;
            tape.backward(loss)?;
            crate::training::adam_step(&mut probe.params, &p.grads(&tape), &mut state, &cfg)?;
        }
        Ok(probe)
    }

    fn design(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let d = self.mean.len();
        let data = features
            .iter()
            .flat_map(|f| f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s))
            .collect();
        Ok(Tensor::new([features.len(), d], data)?)
    }

    fn forward(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = linear(tape, p, "probe.0", x)?;
        let h = tape.relu(h);
        let logit = linear(tape, p, "probe.1", h)?;
        let prob = tape.sigmoid(logit);
        Ok(tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))
    }

    pub fn probabilities(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let x = tape.constant(self.design(features)?);
        let out = Self::forward(&mut tape, &p, x)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
        let probs = Tensor::new([labels.len(), 1], self.probabilities(features)?)?;
        Ok(discriminator_accuracy(&probs, labels))
    }
}

/// Which classifier a probe fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    /// Hidden width of the two-layer probe.
    Mlp(usize),
}

/// Fits a probe on a seeded random half of the rows and reports accuracy on
/// the other half.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[f64], kind: ProbeKind, seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    if features.len() < 2 || labels.len() != features.len() {
        return Err(Error::Contract("probe needs at least two labelled rows".into()));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut crate::rng::stream(seed, "probe.split"));
    let half = order.len() / 2;
    let take = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) { idx.iter().map(|&i| (features[i].clone(), labels[i])).unzip() };
    let (train_x, train_y) = take(&order[..half]);
    let (test_x, test_y) = take(&order[half..]);
    match kind {
        ProbeKind::Linear => Ok(LinearProbe::fit(&train_x, &train_y, 500, 0.5, 1e-3)?.accuracy(&test_x, &test_y)),
        ProbeKind::Mlp(hidden) => MlpProbe::fit(&train_x, &train_y, hidden, 400, 1e-2, seed)?.accuracy(&test_x, &test_y),
    }
}

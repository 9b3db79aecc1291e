//! Per-horizon RMSE in meters and report rendering.

use serde::{Deserialize, Serialize};
use trajformer_autodiff::Tensor;

use crate::data::sample::TrajectorySample;
use crate::data::scaler::Scaler;
use crate::data::segment::FUTURE_FRAMES;
use crate::error::{Error, Result};
use crate::model::{predict_samples, ModelConfig, COORDS};
use crate::params::ParamStore;

/// Reported horizons in seconds.
pub const HORIZONS: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Predicted frames per second.
pub const FRAMES_PER_SECOND: usize = 5;

/// Zero-based predicted frame scored at `horizon_s`; horizon 0 maps to the
/// first predicted frame.
pub fn horizon_frame(horizon_s: usize) -> usize {
    (FRAMES_PER_SECOND * horizon_s).max(1) - 1
}

/// RMSE at one horizon over metric predictions and truths (`[25 × n × 2]`
/// each), pooling every trajectory, unmasked agent and coordinate.
pub fn rmse_at_horizon(predictions: &[Tensor], truths: &[Tensor], masks: &[Vec<bool>], horizon_s: usize) -> Result<f64> {
    if predictions.len() != truths.len() || truths.len() != masks.len() {
        return Err(Error::Contract(format!(
            "{} predictions, {} truths, {} masks",
            predictions.len(),
            truths.len(),
            masks.len()
        )));
    }
    if horizon_s > 5 {
        return Err(Error::Contract(format!("horizon {horizon_s} s beyond the 5 s window")));
    }
    let f = horizon_frame(horizon_s);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, t), mask) in predictions.iter().zip(truths).zip(masks) {
        let n = mask.len();
        if p.shape() != [FUTURE_FRAMES, n, COORDS] || t.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "prediction {:?} / truth {:?} for {n} agent slots",
                p.shape(),
                t.shape()
            )));
        }
        let base = f * n * COORDS;
        for i in (0..n).filter(|&i| mask[i]) {
            for c in 0..COORDS {
                let at = base + i * COORDS + c;
                total += (p.data()[at] - t.data()[at]).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("no unmasked agents to score".into()));
    }
    Ok((total / count as f64).sqrt())
}

/// Maps a normalized `[T × n × 2]` trajectory back to meters, leaving
/// padding slots at zero.
pub fn denormalize_trajectory(t: &Tensor, mask: &[bool], scaler: &Scaler) -> Tensor {
    let n = mask.len();
    let mut out = t.clone();
    for (k, pair) in out.data_mut().chunks_mut(COORDS).enumerate() {
        if mask[k % n] {
            let m = scaler.denormalize([pair[0], pair[1]]);
            pair.copy_from_slice(&m);
        } else {
            pair.fill(0.0);
        }
    }
    out
}

/// Anything that maps samples to normalized `[25 × n × 2]` predictions.
pub trait Predictor {
    fn predict(&self, samples: &[TrajectorySample]) -> Result<Vec<Tensor>>;
}

/// Autoregressive inference with trained parameters.
pub struct ModelPredictor<'a> {
    pub params: &'a ParamStore,
    pub config: &'a ModelConfig,
    pub chunk: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, samples: &[TrajectorySample]) -> Result<Vec<Tensor>> {
        predict_samples(self.params, self.config, samples, self.chunk)
    }
}

/// Returns the ground truth; a reference point for the report machinery.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, samples: &[TrajectorySample]) -> Result<Vec<Tensor>> {
        Ok(samples.iter().map(|s| s.future.clone()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub model: String,
    pub domain: String,
    pub samples: usize,
    /// RMSE in meters at horizons 0..=5 s.
    pub rows: [f64; 6],
    pub average: f64,
}

impl HorizonReport {
    pub fn new(model: impl Into<String>, domain: impl Into<String>, samples: usize, rows: [f64; 6]) -> Self {
        Self {
            model: model.into(),
            domain: domain.into(),
            samples,
            rows,
            average: rows.iter().sum::<f64>() / rows.len() as f64,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon_s,rmse_m\n");
        for (h, r) in HORIZONS.iter().zip(&self.rows) {
            s.push_str(&format!("{h},{r:.6}\n"));
        }
        s.push_str(&format!("average,{:.6}\n", self.average));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "model: {}\ndomain: {}\ntrajectories: {}\n\n{:>18}  {:>10}\n",
            self.model, self.domain, self.samples, "horizon (s)", "RMSE (m)"
        );
        for (h, r) in HORIZONS.iter().zip(&self.rows) {
            s.push_str(&format!("{h:>18}  {r:>10.4}\n"));
        }
        s.push_str(&format!("{:>18}  {:>10.4}\n", "average", self.average));
        s
    }
}

/// Predicts every sample, denormalizes, and scores all horizons.
pub fn full_report(
    predictor: &dyn Predictor,
    samples: &[TrajectorySample],
    scaler: &Scaler,
    model: &str,
    domain: &str,
) -> Result<HorizonReport> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    let predictions = predictor.predict(samples)?;
    if predictions.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.mask.clone()).collect();
    let preds: Vec<Tensor> = predictions
        .iter()
        .zip(&masks)
        .map(|(p, m)| denormalize_trajectory(p, m, scaler))
        .collect();
    let truths: Vec<Tensor> = samples
        .iter()
        .map(|s| denormalize_trajectory(&s.future, &s.mask, scaler))
        .collect();
    let mut rows = [0.0; 6];
    for (row, &h) in rows.iter_mut().zip(&HORIZONS) {
        *row = rmse_at_horizon(&preds, &truths, &masks, h)?;
    }
    Ok(HorizonReport::new(model, domain, samples.len(), rows))
}

/// Relative improvement of `candidate` over `baseline`, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: HorizonReport,
    pub candidate: HorizonReport,
    pub rows: [f64; 6],
    pub average: f64,
}

fn improvement(baseline: f64, candidate: f64) -> f64 {
    if baseline == candidate {
        0.0
    } else {
        100.0 * (baseline - candidate) / baseline
    }
}

pub fn compare_reports(baseline: &HorizonReport, candidate: &HorizonReport) -> Result<Comparison> {
    if baseline.domain != candidate.domain {
        return Err(Error::Contract(format!(
            "cannot compare reports on different domains ({} vs {})",
            baseline.domain, candidate.domain
        )));
    }
    let mut rows = [0.0; 6];
    for (i, r) in rows.iter_mut().enumerate() {
        *r = improvement(baseline.rows[i], candidate.rows[i]);
    }
    Ok(Comparison {
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        rows,
        average: improvement(baseline.average, candidate.average),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon_s,baseline_rmse_m,rmse_m,improvement_pct\n");
        for (i, h) in HORIZONS.iter().enumerate() {
            s.push_str(&format!(
                "{h},{:.6},{:.6},{:.4}\n",
                self.baseline.rows[i], self.candidate.rows[i], self.rows[i]
            ));
        }
        s.push_str(&format!(
            "average,{:.6},{:.6},{:.4}\n",
            self.baseline.average, self.candidate.average, self.average
        ));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "domain: {}\n\n{:>12}  {:>14}  {:>14}  {:>12}\n",
            self.baseline.domain, "horizon (s)", self.baseline.model, self.candidate.model, "improvement"
        );
        for (i, h) in HORIZONS.iter().enumerate() {
            s.push_str(&format!(
                "{h:>12}  {:>14.4}  {:>14.4}  {:>11.2}%\n",
                self.baseline.rows[i], self.candidate.rows[i], self.rows[i]
            ));
        }
        s.push_str(&format!(
            "{:>12}  {:>14.4}  {:>14.4}  {:>11.2}%\n",
            "average", self.baseline.average, self.candidate.average, self.average
        ));
        s
    }
}

//! The optimization loop.
//!
//! Batch membership and dropout masks for step `s` are derived from the run
//! seed and `s` alone, so a run resumed from a checkpoint at step `s`
//! continues exactly as the uninterrupted run would.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use trajformer_autodiff::Tape;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_bool, parse_value, Configurable, KvConfig};
use crate::data::sample::TrajectorySample;
use crate::domain::{dat_forward, discriminator_accuracy, DatConfig};
use crate::error::{Error, Result};
use crate::model::{forward_train, init_params, Batch, ModelConfig};
use crate::params::ParamStore;
use crate::rng::indexed_stream;
use crate::training::adam::{adam_step, AdamConfig, AdamState};
use crate::training::loss::mse_loss;
use crate::training::splits::{split_indices, CaseStudy};
use crate::transformer::Dropout;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Total optimizer updates.
    pub steps: u64,
    pub seed: u64,
    pub dat: DatConfig,
    pub case_study: CaseStudy,
    pub checkpoint_every: u64,
    /// Fraction of the source training set held out for best-checkpoint
    /// selection; 0 disables it.
    pub validation_fraction: f64,
    /// Adds elapsed milliseconds to each log line (breaks byte-identical logs).
    pub log_wall_ms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            steps: 1000,
            seed: 1,
            dat: DatConfig::default(),
            case_study: CaseStudy::CrossCity,
            checkpoint_every: 200,
            validation_fraction: 0.0,
            log_wall_ms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.dat.enabled && self.batch_size < 2 {
            return Err(Error::Config("adversarial training needs batch_size >= 2".into()));
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam.eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        self.case_study.validate()?;
        self.dat.validate()
    }
}

impl Configurable for TrainConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.adam.learning_rate = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "case_study" => self.case_study = CaseStudy::parse(value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "validation_fraction" => self.validation_fraction = parse_value(key, value)?,
            "log_wall_ms" => self.log_wall_ms = parse_bool(key, value)?,
            _ => return self.dat.apply(key, value),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = vec![
            ("learning_rate", format!("{:?}", self.adam.learning_rate)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("case_study", self.case_study.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("validation_fraction", format!("{:?}", self.validation_fraction)),
            ("log_wall_ms", self.log_wall_ms.to_string()),
        ];
        kv.extend(self.dat.to_kv());
        kv
    }
}

/// Model plus training settings: everything a config file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut run = Self::default();
        run.apply_all(kv)?;
        run.validate()?;
        Ok(run)
    }

    pub fn to_kv_config(&self) -> KvConfig {
        KvConfig::from_configurable(&[self])
    }
}

impl Configurable for RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.apply(key, value)? {
            return Ok(true);
        }
        self.train.apply(key, value)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
}

/// Training sets handed to the loop. Test splits never enter here.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub source: &'a [TrajectorySample],
    pub target: Option<&'a [TrajectorySample]>,
}

/// Epoch-wise reshuffled index stream over `len` items.
struct Cycle {
    len: usize,
    seed: u64,
    name: &'static str,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl Cycle {
    fn new(len: usize, seed: u64, name: &'static str) -> Self {
        Self {
            len,
            seed,
            name,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn at(&mut self, position: u64) -> usize {
        let epoch = position / self.len as u64;
        if self.epoch != Some(epoch) {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut indexed_stream(self.seed, self.name, epoch));
            self.epoch = Some(epoch);
        }
        self.order[(position % self.len as u64) as usize]
    }

    fn take(&mut self, start: u64, count: usize) -> Vec<usize> {
        (0..count as u64).map(|i| self.at(start + i)).collect()
    }
}

/// Where a run writes its artifacts; `None` keeps that output in memory only.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl TrainOutput {
    pub fn best_checkpoint(&self) -> Option<PathBuf> {
        self.checkpoint.as_ref().map(|p| {
            let mut s = p.clone().into_os_string();
            s.push(".best");
            PathBuf::from(s)
        })
    }
}

pub struct Trainer {
    pub run: RunConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
    best_val: Option<f64>,
}

/// Source and target sample counts in one batch.
pub fn batch_split(batch_size: usize, dat: bool) -> (usize, usize) {
    if dat {
        let source = batch_size.div_ceil(2);
        (source, batch_size - source)
    } else {
        (batch_size, 0)
    }
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let params = init_params(&run.model, run.train.seed, run.train.dat.enabled);
        let optimizer = AdamState::new(&params);
        Ok(Self {
            run,
            params,
            optimizer,
            best_val: None,
        })
    }

    /// Restores parameters, optimizer state and configuration. `overrides`
    /// (e.g. a larger step budget) are applied on top of the stored config.
    pub fn resume(ckpt: Checkpoint, overrides: &KvConfig) -> Result<Self> {
        ckpt.validate()?;
        let mut kv = ckpt.header.clone();
        kv.remove("best_val_mse");
        for (k, v) in overrides.iter() {
            kv.insert(k, v);
        }
        let run = RunConfig::from_kv(&kv)?;
        if run.train.dat.enabled != ckpt.has_discriminator() {
            return Err(Error::Config("cannot toggle adversarial training when resuming".into()));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Self {
            run,
            params: ckpt.params,
            optimizer,
            best_val: ckpt.header.get("best_val_mse").and_then(|v| v.parse().ok()),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut header = self.run.to_kv_config();
        if let Some(v) = self.best_val {
            header.insert("best_val_mse", format!("{v:?}"));
        }
        Checkpoint {
            header,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Parameters only, for evaluation.
    pub fn model_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.run.to_kv_config(),
            params: self.params.clone(),
            optimizer: None,
        }
    }

    fn check_data(&self, data: &TrainData<'_>) -> Result<()> {
        if data.source.is_empty() {
            return Err(Error::Config("source training set is empty".into()));
        }
        if self.run.train.dat.enabled && data.target.is_none_or(|t| t.is_empty()) {
            return Err(Error::Config(
                "adversarial training needs target-domain training samples".into(),
            ));
        }
        Ok(())
    }

    /// Indices into the source and target sets drawn for update `step`.
    pub fn batch_indices(&self, data: &TrainData<'_>, step: u64) -> (Vec<usize>, Vec<usize>) {
        let cfg = &self.run.train;
        let (ns, nt) = batch_split(cfg.batch_size, cfg.dat.enabled);
        let mut src = Cycle::new(data.source.len(), cfg.seed, "batch.source");
        let source = src.take(step * ns as u64, ns);
        let target = match data.target {
            Some(t) if nt > 0 && !t.is_empty() => Cycle::new(t.len(), cfg.seed, "batch.target").take(step * nt as u64, nt),
            _ => Vec::new(),
        };
        (source, target)
    }

    /// Runs one update and returns its log record (without timing).
    pub fn train_step(&mut self, data: &TrainData<'_>) -> Result<StepRecord> {
        self.check_data(data)?;
        let step = self.optimizer.step;
        let (si, ti) = self.batch_indices(data, step);
        let mut samples: Vec<&TrajectorySample> = si.iter().map(|&i| &data.source[i]).collect();
        if let Some(t) = data.target {
            samples.extend(ti.iter().map(|&i| &t[i]));
        }
        let batch = Batch::new(&samples)?;
        let cfg = &self.run;

        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let mut drop = Dropout::new(
            cfg.model.transformer.dropout,
            indexed_stream(cfg.train.seed, "dropout", step),
        );
        let out = forward_train(&mut tape, &p, &cfg.model, &batch, &mut drop)?;
        let mse = mse_loss(&mut tape, out.predictions, &batch)?;
        let mut record = StepRecord {
            step: step + 1,
            mse: tape.value(mse).data()[0],
            bce: None,
            disc_accuracy: None,
            val_mse: None,
            wall_ms: None,
        };
        let loss = if cfg.train.dat.enabled {
            let dat = dat_forward(&mut tape, &p, out.memory, &batch, &cfg.train.dat)?;
            record.bce = Some(tape.value(dat.loss).data()[0]);
            record.disc_accuracy = Some(discriminator_accuracy(tape.value(dat.predicted), &batch.labels));
            tape.add(mse, dat.loss)?
        } else {
            mse
        };
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        adam_step(&mut self.params, &grads, &mut self.optimizer, &cfg.train.adam)?;
        Ok(record)
    }

    /// Mean teacher-forced regression loss over `samples`, no dropout.
    pub fn evaluate_mse(&self, samples: &[TrajectorySample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(self.run.train.batch_size.max(1)) {
            let refs: Vec<&TrajectorySample> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let out = forward_train(&mut tape, &p, &self.run.model, &batch, &mut Dropout::disabled())?;
            let mse = mse_loss(&mut tape, out.predictions, &batch)?;
            total += tape.value(mse).data()[0] * chunk.len() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Trains until the configured step budget, logging every update.
    pub fn run(&mut self, data: TrainData<'_>, output: &TrainOutput) -> Result<Vec<StepRecord>> {
        self.check_data(&data)?;
        if data.target.is_some() && !self.run.train.dat.enabled {
            log::info!("adversarial training off: target-domain samples are not used");
        }
        let (train_source, validation) = if self.run.train.validation_fraction > 0.0 {
            let (tr, va) = split_indices(
                data.source.len(),
                self.run.train.validation_fraction,
                self.run.train.seed,
                "split.validation",
            );
            (
                tr.iter().map(|&i| data.source[i].clone()).collect::<Vec<_>>(),
                va.iter().map(|&i| data.source[i].clone()).collect::<Vec<_>>(),
            )
        } else {
            (data.source.to_vec(), Vec::new())
        };
        let data = TrainData {
            source: &train_source,
            target: data.target.filter(|_| self.run.train.dat.enabled),
        };
        self.check_data(&data)?;

        let mut log = match &output.metrics {
            Some(path) => Some(open_log(path, self.step())?),
            None => None,
        };
        let started = Instant::now();
        let mut records = Vec::new();
        while self.step() < self.run.train.steps {
            let mut record = self.train_step(&data)?;
            let every = self.run.train.checkpoint_every;
            let at_boundary = (every > 0 && record.step % every == 0) || record.step == self.run.train.steps;
            if at_boundary && !validation.is_empty() {
                let val = self.evaluate_mse(&validation)?;
                record.val_mse = Some(val);
                if self.best_val.is_none_or(|b| val < b) {
                    self.best_val = Some(val);
                    if let Some(best) = output.best_checkpoint() {
                        self.model_checkpoint().save(&best)?;
                    }
                }
            }
            if self.run.train.log_wall_ms {
                record.wall_ms = Some(started.elapsed().as_millis() as u64);
            }
            if let Some((file, path)) = log.as_mut() {
                let line = serde_json::to_string(&record).expect("plain record serializes");
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                file.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            if record.step % 100 == 0 {
                log::info!(
                    "step {} mse {:.6}{}",
                    record.step,
                    record.mse,
                    record.bce.map(|b| format!(" bce {b:.4}")).unwrap_or_default()
                );
            }
            records.push(record);
            if at_boundary {
                if let Some(path) = &output.checkpoint {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = &output.checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(records)
    }
}

/// Opens the metrics log for appending after `step`; lines beyond `step`
/// (left by an interrupted run) are dropped.
fn open_log(path: &Path, step: u64) -> Result<(File, PathBuf)> {
    let kept: Vec<String> = if step == 0 || !path.exists() {
        Vec::new()
    } else {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut kept = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let record: StepRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad metrics line in {}: {e}", path.display())))?;
            if record.step <= step {
                kept.push(line);
            }
        }
        kept
    };
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok((file, path.to_path_buf()))
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("bad metrics line: {e}")))
        })
        .collect()
}

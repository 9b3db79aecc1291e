//! Full predictor: graph embedding, temporal encoder-decoder and output head,
//! plus batch assembly from samples.

use trajformer_autodiff::{Tape, Tensor, Var};

use crate::config::{parse_value, Configurable};
use crate::data::sample::TrajectorySample;
use crate::data::segment::{FUTURE_FRAMES, HISTORY_FRAMES};
use crate::error::{Error, Result};
use crate::graph::GcnBlock;
use crate::params::{init_linear, linear, Bound, ParamStore};
use crate::rng::stream;
use crate::transformer::{decode, decode_infer, encode, init_decoder, init_encoder, positional_encode, Dropout, TransformerConfig};

/// Coordinates per agent per frame.
pub const COORDS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub gcn_layers: usize,
    /// Hidden width of the domain discriminator.
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            gcn_layers: 1,
            disc_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        if self.disc_hidden == 0 {
            return Err(Error::Config("disc_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.transformer.d_model
    }

    pub fn source_gcn(&self) -> GcnBlock {
        GcnBlock::new("gcn.src", COORDS, self.d_model(), self.gcn_layers)
    }

    pub fn target_gcn(&self) -> GcnBlock {
        GcnBlock::new("gcn.tgt", COORDS, self.d_model(), self.gcn_layers)
    }
}

impl Configurable for ModelConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "gcn_layers" => self.gcn_layers = parse_value(key, value)?,
            "disc_hidden" => self.disc_hidden = parse_value(key, value)?,
            _ => return self.transformer.apply(key, value),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = self.transformer.to_kv();
        kv.push(("gcn_layers", self.gcn_layers.to_string()));
        kv.push(("disc_hidden", self.disc_hidden.to_string()));
        kv
    }
}

/// Prefix reserved for discriminator parameters.
pub const DISC_PREFIX: &str = "disc.";

/// Fresh predictor parameters (and discriminator parameters when asked),
/// each group drawn from its own named stream.
pub fn init_params(cfg: &ModelConfig, seed: u64, with_discriminator: bool) -> ParamStore {
    let d = cfg.d_model();
    let mut store = ParamStore::new();
    cfg.source_gcn().init(&mut store, &mut stream(seed, "init.gcn.src"));
    cfg.target_gcn().init(&mut store, &mut stream(seed, "init.gcn.tgt"));
    init_encoder(&mut store, &mut stream(seed, "init.enc"), &cfg.transformer);
    init_decoder(&mut store, &mut stream(seed, "init.dec"), &cfg.transformer);
    init_linear(&mut store, &mut stream(seed, "init.head"), "head", d, COORDS);
    if with_discriminator {
        init_discriminator(&mut store, cfg, seed);
    }
    store
}

pub fn init_discriminator(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = stream(seed, "init.disc");
    init_linear(store, &mut rng, "disc.0", cfg.d_model(), cfg.disc_hidden);
    init_linear(store, &mut rng, "disc.1", cfg.disc_hidden, 1);
}

/// Every expected parameter name with its shape.
pub fn param_shapes(cfg: &ModelConfig, with_discriminator: bool) -> Vec<(String, Vec<usize>)> {
    init_params(cfg, 0, with_discriminator)
        .iter()
        .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
        .collect()
}

/// Samples packed for one forward pass. Valid agents become sequences in
/// (sample, agent) order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: usize,
    pub slots: usize,
    /// `[B·15 × n × 2]`.
    pub history: Tensor,
    /// `[B·15 × n × n]` normalized adjacency per history frame.
    pub history_adjacency: Tensor,
    /// `[B·25 × n × 2]`: last history frame followed by future frames 0..24.
    pub decoder_input: Tensor,
    /// `[B·25 × n × n]`: the last history graph repeated.
    pub decoder_adjacency: Tensor,
    /// `[S × 25 × 2]` ground truth of every sequence.
    pub truth: Tensor,
    /// Owning sample of each sequence.
    pub sequence_sample: Vec<usize>,
    /// Agent slot of each sequence.
    pub sequence_slot: Vec<usize>,
    /// Domain label (0 source, 1 target) per sample.
    pub labels: Vec<f64>,
    /// Whether each sample's future enters the regression loss.
    pub supervised: Vec<bool>,
}

fn concat_data<'a>(parts: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    parts.flat_map(|p| p.iter().copied()).collect()
}

impl Batch {
    /// Every sample supervised.
    pub fn new(samples: &[&TrajectorySample]) -> Result<Self> {
        Self::with_supervision(samples, &vec![true; samples.len()])
    }

    pub fn with_supervision(samples: &[&TrajectorySample], supervised: &[bool]) -> Result<Self> {
        let b = samples.len();
        if b == 0 || supervised.len() != b {
            return Err(Error::Contract(format!(
                "batch needs samples and one supervision flag each ({b} samples, {} flags)",
                supervised.len()
            )));
        }
        let n = samples[0].agents();
        if let Some(s) = samples.iter().find(|s| s.agents() != n) {
            return Err(Error::Contract(format!(
                "mixed agent slot counts in batch ({n} and {})",
                s.agents()
            )));
        }
        for s in samples {
            s.validate_layout()?;
            if !s.mask.iter().any(|&m| m) {
                return Err(Error::Contract("sample with every agent masked".into()));
            }
        }
        let (th, tf) = (HISTORY_FRAMES, FUTURE_FRAMES);
        let frame = n * COORDS;
        let history = Tensor::new([b * th, n, COORDS], concat_data(samples.iter().map(|s| s.history.data())))?;
        let history_adjacency = Tensor::new(
            [b * th, n, n],
            concat_data(samples.iter().flat_map(|s| s.adjacency.iter().map(|g| g.norm_adjacency().data()))),
        )?;
        let mut dec = Vec::with_capacity(b * tf * frame);
        let mut dec_adj = Vec::with_capacity(b * tf * n * n);
        for s in samples {
            let h = s.history.data();
            dec.extend_from_slice(&h[(th - 1) * frame..th * frame]);
            dec.extend_from_slice(&s.future.data()[..(tf - 1) * frame]);
            let last = s.adjacency[th - 1].norm_adjacency().data();
            for _ in 0..tf {
                dec_adj.extend_from_slice(last);
            }
        }
        let mut sequence_sample = Vec::new();
        let mut sequence_slot = Vec::new();
        let mut truth = Vec::new();
        for (k, s) in samples.iter().enumerate() {
            for i in (0..n).filter(|&i| s.mask[i]) {
                sequence_sample.push(k);
                sequence_slot.push(i);
                for t in 0..tf {
                    let at = (t * n + i) * COORDS;
                    truth.extend_from_slice(&s.future.data()[at..at + COORDS]);
                }
            }
        }
        let seqs = sequence_sample.len();
        Ok(Self {
            samples: b,
            slots: n,
            history,
            history_adjacency,
            decoder_input: Tensor::new([b * tf, n, COORDS], dec)?,
            decoder_adjacency: Tensor::new([b * tf, n, n], dec_adj)?,
            truth: Tensor::new([seqs, tf, COORDS], truth)?,
            sequence_sample,
            sequence_slot,
            labels: samples.iter().map(|s| s.domain.label()).collect(),
            supervised: supervised.to_vec(),
        })
    }

    pub fn sequences(&self) -> usize {
        self.sequence_sample.len()
    }

    /// Valid agents in sample `k`.
    pub fn valid_agents(&self, k: usize) -> usize {
        self.sequence_sample.iter().filter(|&&s| s == k).count()
    }

    /// GCN output rows, ordered (sequence, time), for `steps` frames per sample.
    fn gather_rows(&self, steps: usize) -> Vec<usize> {
        let n = self.slots;
        self.sequence_sample
            .iter()
            .zip(&self.sequence_slot)
            .flat_map(|(&k, &i)| (0..steps).map(move |t| (k * steps + t) * n + i))
            .collect()
    }
}

/// GCN embedding of `[B·T × n × 2]` frames, regrouped as `[S × T × d]` and
/// positionally encoded.
fn embed(tape: &mut Tape, p: &Bound, block: &GcnBlock, batch: &Batch, frames: Tensor, adjacency: Tensor, steps: usize) -> Result<Var> {
    let x = tape.constant(frames);
    let adj = tape.constant(adjacency);
    let rows = block.forward(tape, p, x, adj)?;
    let gathered = tape.embedding_lookup(rows, &batch.gather_rows(steps))?;
    let seq = tape.reshape(gathered, &[batch.sequences(), steps, block.width])?;
    positional_encode(tape, seq)
}

/// Encoder memory `[S × 15 × d]`.
pub fn encode_batch(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &Batch, drop: &mut Dropout) -> Result<Var> {
    let x = embed(
        tape,
        p,
        &cfg.source_gcn(),
        batch,
        batch.history.clone(),
        batch.history_adjacency.clone(),
        HISTORY_FRAMES,
    )?;
    encode(tape, p, &cfg.transformer, x, drop)
}

/// Output head on decoder states `[S × T × d]` → `[S × T × 2]`.
fn project(tape: &mut Tape, p: &Bound, states: Var) -> Result<Var> {
    let s = tape.shape(states).to_vec();
    let flat = tape.reshape(states, &[s[0] * s[1], s[2]])?;
    let out = linear(tape, p, "head", flat)?;
    Ok(tape.reshape(out, &[s[0], s[1], COORDS])?)
}

pub struct TrainOutputs {
    /// `[S × 15 × d]`.
    pub memory: Var,
    /// `[S × 25 × 2]` teacher-forced predictions.
    pub predictions: Var,
}

/// Teacher-forced forward pass.
pub fn forward_train(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &Batch, drop: &mut Dropout) -> Result<TrainOutputs> {
    let memory = encode_batch(tape, p, cfg, batch, drop)?;
    let target = embed(
        tape,
        p,
        &cfg.target_gcn(),
        batch,
        batch.decoder_input.clone(),
        batch.decoder_adjacency.clone(),
        FUTURE_FRAMES,
    )?;
    let states = decode(tape, p, &cfg.transformer, memory, target, drop)?;
    let predictions = project(tape, p, states)?;
    Ok(TrainOutputs { memory, predictions })
}

/// Decoder-input frames `[B × n × 2]` stacked to `[B·T × n × 2]` in
/// (sample, time) order.
fn stack_frames(frames: &[Tensor], b: usize, n: usize) -> Result<Tensor> {
    let frame = n * COORDS;
    let mut data = Vec::with_capacity(b * frames.len() * frame);
    for k in 0..b {
        for f in frames {
            data.extend_from_slice(&f.data()[k * frame..(k + 1) * frame]);
        }
    }
    Ok(Tensor::new([b * frames.len(), n, COORDS], data)?)
}

/// Autoregressive predictions for a batch, one `[25 × n × 2]` tensor per
/// sample with zeros in padding slots. Parameters are treated as constants.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, batch: &Batch) -> Result<Vec<Tensor>> {
    let (b, n) = (batch.samples, batch.slots);
    let memory = {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let m = encode_batch(&mut tape, &p, cfg, batch, &mut Dropout::disabled())?;
        tape.value(m).clone()
    };
    let frame = n * COORDS;
    let start = Tensor::new(
        [b, n, COORDS],
        (0..b)
            .flat_map(|k| {
                let at = (k * HISTORY_FRAMES + HISTORY_FRAMES - 1) * frame;
                batch.history.data()[at..at + frame].to_vec()
            })
            .collect(),
    )?;
    let last_graphs: Vec<&[f64]> = (0..b)
        .map(|k| {
            let at = (k * FUTURE_FRAMES) * n * n;
            &batch.decoder_adjacency.data()[at..at + n * n]
        })
        .collect();
    let block = cfg.target_gcn();
    let frames = decode_infer(start, FUTURE_FRAMES, |seen| {
        let steps = seen.len();
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let adjacency = Tensor::new(
            [b * steps, n, n],
            last_graphs.iter().flat_map(|g| std::iter::repeat_n(*g, steps).flatten().copied()).collect(),
        )?;
        let target = embed(&mut tape, &p, &block, batch, stack_frames(seen, b, n)?, adjacency, steps)?;
        let mem = tape.constant(memory.clone());
        let states = decode(&mut tape, &p, &cfg.transformer, mem, target, &mut Dropout::disabled())?;
        let newest = tape.slice(states, 1, steps - 1, steps)?;
        let out = project(&mut tape, &p, newest)?;
        let out = tape.value(out).data();
        let mut next = vec![0.0; b * frame];
        for (s, (&k, &i)) in batch.sequence_sample.iter().zip(&batch.sequence_slot).enumerate() {
            let at = (k * n + i) * COORDS;
            next[at..at + COORDS].copy_from_slice(&out[s * COORDS..(s + 1) * COORDS]);
        }
        Ok(Tensor::new([b, n, COORDS], next)?)
    })?;
    (0..b)
        .map(|k| {
            let data = frames
                .iter()
                .flat_map(|f| f.data()[k * frame..(k + 1) * frame].iter().copied())
                .collect();
            Ok(Tensor::new([FUTURE_FRAMES, n, COORDS], data)?)
        })
        .collect()
}

/// Predictions for any number of samples, evaluated `chunk` at a time.
pub fn predict_samples(params: &ParamStore, cfg: &ModelConfig, samples: &[TrajectorySample], chunk: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&TrajectorySample> = part.iter().collect();
        out.extend(predict(params, cfg, &Batch::new(&refs)?)?);
    }
    Ok(out)
}

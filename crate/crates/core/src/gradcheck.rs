//! Finite-difference checks for every differentiable layer of the model.
//!
//! Each layer is wrapped as a scalar function of named inputs (its
//! parameters and, where meaningful, its input activations). The scalar is
//! a fixed pseudo-random projection of the layer output so that every
//! output element carries a distinct weight.

use rand::Rng;
use trajformer_autodiff::gradcheck::relative_error;
use trajformer_autodiff::{GradCheckConfig, GradCheckReport, Tape, Tensor, TensorError, Var};

use crate::data::sample::{Domain, TrajectorySample};
use crate::domain::{discriminate, domain_bce, grad_reverse, pool_latent};
use crate::error::Result;
use crate::graph::{GcnBlock, SceneGraph};
use crate::model::Batch;
use crate::params::{init_linear, Bound, ParamStore};
use crate::rng::indexed_stream;
use crate::training::loss::mse_loss;
use crate::transformer::{
    causal_mask, decode, encode, feed_forward, init_attention, init_decoder, init_encoder, multi_head_attention,
    positional_encode, Dropout, TransformerConfig,
};

/// Registered layers, in report order.
pub const LAYERS: [&str; 8] = [
    "gcn",
    "attention",
    "layer_norm",
    "feedforward",
    "grl_composite",
    "mse",
    "bce",
    "full_model",
];

/// Reversal coefficient used by the composite check.
const GRL_LAMBDA: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
    /// Name of the input holding the worst element.
    pub worst_input: Option<String>,
}

type Build = Box<dyn Fn(&mut Tape, &Bound) -> Result<Var>>;

/// A layer under test: named inputs plus the function producing its output.
struct Fixture {
    inputs: ParamStore,
    build: Build,
    /// Multiplier applied to the numeric gradient of inputs whose names
    /// start with the given prefix (used for reversed-gradient paths).
    scaled: Vec<(String, f64)>,
}

fn lift<T>(r: Result<T>) -> trajformer_autodiff::Result<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "layer",
            reason: other.to_string(),
        },
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Keeps checked scalars small, so that one ulp of round-off in a finite
/// difference stays far below the error floor for gradients that are
/// structurally zero (e.g. key biases under softmax).
const OUTPUT_SCALE: f64 = 1e-2;

/// Fixed projection weights for an output of `len` elements.
fn projection(len: usize, seed: u64) -> Vec<f64> {
    (0..len)
        .map(|k| OUTPUT_SCALE * (((k as f64 + 1.0) * 0.618_033_988_75 + seed as f64 * 0.1).fract() - 0.5))
        .collect()
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::new(shape, projection(tape.value(out).len(), seed))?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        d_model: 4,
        heads: 2,
        ff_width: 6,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout: 0.0,
        norm_eps: 1e-5,
    }
}

/// Scene graph with agents 0..real linked to each other and padding after.
fn clique(n: usize, real: usize) -> SceneGraph {
    SceneGraph::from_adjacency(Tensor::from_fn([n, n], |k| {
        let (i, j) = (k / n, k % n);
        if i < real && j < real && (i == j || (i + j) % 3 != 0) {
            1.0
        } else {
            0.0
        }
    }))
    .expect("square")
}

fn random_sample(rng: &mut impl Rng, n: usize, real: usize, domain: Domain) -> TrajectorySample {
    let mask: Vec<bool> = (0..n).map(|i| i < real).collect();
    let coords = |rng: &mut _, frames: usize| {
        let mut t = uniform(rng, &[frames, n, 2], -0.9, 0.9);
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            if (k / 2) % n >= real {
                *v = 0.0;
            }
        }
        t
    };
    TrajectorySample {
        history: coords(rng, 15),
        future: coords(rng, 25),
        agent_ids: (0..real as i64).collect(),
        lane_ids: vec![0; 40 * n],
        adjacency: vec![clique(n, real); 15],
        domain,
        mask,
    }
}

fn fixture(layer: &str, seed: u64) -> Fixture {
    let mut rng = indexed_stream(seed, "gradcheck", LAYERS.iter().position(|&l| l == layer).unwrap_or(0) as u64);
    let mut inputs = ParamStore::new();
    let mut scaled = Vec::new();
    let build: Build = match layer {
        "gcn" => {
            let block = GcnBlock::new("gcn", 2, 4, 2);
            block.init(&mut inputs, &mut rng);
            inputs.insert("input.features", uniform(&mut rng, &[2, 3, 2], -1.0, 1.0));
            let adj: Vec<f64> = [clique(3, 3), clique(3, 2)]
                .iter()
                .flat_map(|g| g.norm_adjacency().data().to_vec())
                .collect();
            let adj = Tensor::new([2, 3, 3], adj).expect("two frames");
            Box::new(move |tape, p| {
                let a = tape.constant(adj.clone());
                let out = block.forward(tape, p, p.get("input.features")?, a)?;
                project(tape, out, seed)
            })
        }
        "attention" => {
            init_attention(&mut inputs, &mut rng, "self", 4);
            init_attention(&mut inputs, &mut rng, "cross", 4);
            inputs.insert("input.query", uniform(&mut rng, &[2, 4, 4], -1.0, 1.0));
            inputs.insert("input.context", uniform(&mut rng, &[2, 5, 4], -1.0, 1.0));
            Box::new(move |tape, p| {
                let q = p.get("input.query")?;
                let c = p.get("input.context")?;
                let mask = causal_mask(4);
                let (s, _) = multi_head_attention(tape, p, "self", q, q, 2, Some(&mask))?;
                let (x, _) = multi_head_attention(tape, p, "cross", s, c, 2, None)?;
                project(tape, x, seed)
            })
        }
        "layer_norm" => {
            inputs.insert("norm.gain", uniform(&mut rng, &[6], 0.5, 1.5));
            inputs.insert("norm.bias", uniform(&mut rng, &[6], -0.5, 0.5));
            inputs.insert("input.x", uniform(&mut rng, &[5, 6], -2.0, 2.0));
            Box::new(move |tape, p| {
                let out = crate::params::norm(tape, p, "norm", p.get("input.x")?, 1e-5)?;
                project(tape, out, seed)
            })
        }
        "feedforward" => {
            init_linear(&mut inputs, &mut rng, "ffn.ff1", 4, 7);
            init_linear(&mut inputs, &mut rng, "ffn.ff2", 7, 4);
            // Non-zero biases keep relu inputs away from exact zeros.
            inputs.insert("ffn.ff1.bias", uniform(&mut rng, &[7], -0.3, 0.3));
            inputs.insert("input.x", uniform(&mut rng, &[6, 4], -1.0, 1.0));
            Box::new(move |tape, p| {
                let out = feed_forward(tape, p, "ffn", p.get("input.x")?)?;
                project(tape, out, seed)
            })
        }
        "grl_composite" => {
            init_linear(&mut inputs, &mut rng, "disc.0", 4, 5);
            init_linear(&mut inputs, &mut rng, "disc.1", 5, 1);
            inputs.insert("disc.0.bias", uniform(&mut rng, &[5], -0.3, 0.3));
            inputs.insert("input.memory", uniform(&mut rng, &[3, 4, 4], -1.0, 1.0));
            // Gradients reaching the memory pass through the reversal.
            scaled.push(("input.".to_string(), -GRL_LAMBDA));
            Box::new(move |tape, p| {
                let pooled = pool_latent(tape, p.get("input.memory")?, &[0, 0, 1], 2)?;
                let reversed = grad_reverse(tape, pooled, GRL_LAMBDA);
                let prob = discriminate(tape, p, reversed)?;
                domain_bce(tape, prob, &[0.0, 1.0])
            })
        }
        "mse" => {
            let a = random_sample(&mut rng, 3, 2, Domain::Source);
            let b = random_sample(&mut rng, 3, 3, Domain::Target);
            let batch = Batch::new(&[&a, &b]).expect("consistent samples");
            inputs.insert("input.predictions", uniform(&mut rng, &[5, 25, 2], -1.0, 1.0));
            Box::new(move |tape, p| mse_loss(tape, p.get("input.predictions")?, &batch))
        }
        "bce" => {
            inputs.insert("input.probabilities", uniform(&mut rng, &[4, 1], 0.05, 0.95));
            Box::new(move |tape, p| domain_bce(tape, p.get("input.probabilities")?, &[0.0, 1.0, 1.0, 0.0]))
        }
        "full_model" => {
            let cfg = tiny_transformer();
            let src = GcnBlock::new("gcn.src", 2, 4, 1);
            let tgt = GcnBlock::new("gcn.tgt", 2, 4, 1);
            src.init(&mut inputs, &mut rng);
            tgt.init(&mut inputs, &mut rng);
            init_encoder(&mut inputs, &mut rng, &cfg);
            init_decoder(&mut inputs, &mut rng, &cfg);
            init_linear(&mut inputs, &mut rng, "head", 4, 2);
            for (name, t) in inputs.iter_mut() {
                if name.ends_with(".bias") && !name.contains("norm") {
                    *t = uniform(&mut rng, t.shape(), -0.2, 0.2);
                }
            }
            let (frames, agents) = (4, 2);
            inputs.insert("input.history", uniform(&mut rng, &[frames, agents, 2], -1.0, 1.0));
            let target_in = uniform(&mut rng, &[frames, agents, 2], -1.0, 1.0);
            let truth = uniform(&mut rng, &[agents, frames, 2], -1.0, 1.0);
            let graph = clique(agents, agents);
            let adj = Tensor::new(
                [frames, agents, agents],
                (0..frames).flat_map(|_| graph.norm_adjacency().data().to_vec()).collect(),
            )
            .expect("stacked frames");
            Box::new(move |tape, p| {
                let embed = |tape: &mut Tape, block: &GcnBlock, x: Var| -> Result<Var> {
                    let a = tape.constant(adj.clone());
                    let rows = block.forward(tape, p, x, a)?;
                    let grid = tape.reshape(rows, &[frames, agents, 4])?;
                    let seq = tape.permute(grid, &[1, 0, 2])?;
                    positional_encode(tape, seq)
                };
                let hist = embed(tape, &src, p.get("input.history")?)?;
                let memory = encode(tape, p, &cfg, hist, &mut Dropout::disabled())?;
                let t_in = tape.constant(target_in.clone());
                let tgt_seq = embed(tape, &tgt, t_in)?;
                let states = decode(tape, p, &cfg, memory, tgt_seq, &mut Dropout::disabled())?;
                let flat = tape.reshape(states, &[agents * frames, 4])?;
                let out = crate::params::linear(tape, p, "head", flat)?;
                let out = tape.reshape(out, &[agents, frames, 2])?;
                let truth = tape.constant(truth.clone());
                let diff = tape.sub(out, truth)?;
                let sq = tape.mul(diff, diff)?;
                let mse = tape.mean(sq);
                Ok(tape.scale(mse, OUTPUT_SCALE))
            })
        }
        other => panic!("unregistered layer {other}"),
    };
    Fixture { inputs, build, scaled }
}

fn forward_value(f: &dyn Fn(&mut Tape, &[Var]) -> trajformer_autodiff::Result<Var>, inputs: &[Tensor]) -> trajformer_autodiff::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Checks one registered layer. With `inject_sign_bug` the layer's output
/// gradient is negated (forward unchanged), which the check must catch.
pub fn check_layer(layer: &'static str, seed: u64, cfg: &GradCheckConfig, inject_sign_bug: bool) -> Result<LayerCheck> {
    let fx = fixture(layer, seed);
    let names: Vec<String> = fx.inputs.iter().map(|(k, _)| k.to_string()).collect();
    let tensors: Vec<Tensor> = fx.inputs.iter().map(|(_, t)| t.clone()).collect();
    let build = &fx.build;
    let f = |tape: &mut Tape, vars: &[Var]| -> trajformer_autodiff::Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let out = lift(build(tape, &bound))?;
        Ok(if inject_sign_bug { tape.scale_grad(out, -1.0) } else { out })
    };
    let report = if fx.scaled.is_empty() {
        trajformer_autodiff::check_gradients(&tensors, f, cfg)?
    } else {
        // Reversed paths: compare against the scaled finite difference.
        let analytic = trajformer_autodiff::gradcheck::analytic_gradients(&f, &tensors)?;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
            checked: 0,
            passed: true,
        };
        let mut probe = tensors.clone();
        for (which, grad) in analytic.iter().enumerate() {
            let factor = fx
                .scaled
                .iter()
                .find(|(prefix, _)| names[which].starts_with(prefix.as_str()))
                .map_or(1.0, |&(_, s)| s);
            for elem in 0..grad.len() {
                let original = probe[which].data()[elem];
                probe[which].data_mut()[elem] = original + cfg.step;
                let plus = forward_value(&f, &probe)?;
                probe[which].data_mut()[elem] = original - cfg.step;
                let minus = forward_value(&f, &probe)?;
                probe[which].data_mut()[elem] = original;
                let numeric = factor * (plus - minus) / (2.0 * cfg.step);
                let a = grad.data()[elem];
                let err = relative_error(a, numeric, cfg.floor);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((which, elem));
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
        report.passed = report.max_rel_error < cfg.tolerance;
        report
    };
    Ok(LayerCheck {
        layer,
        seed,
        worst_input: report.worst.map(|(i, _)| names[i].clone()),
        report,
    })
}

/// Every registered layer on every seed.
pub fn check_all(seeds: &[u64], cfg: &GradCheckConfig, sign_bug_layer: Option<&str>) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::with_capacity(LAYERS.len() * seeds.len());
    for &layer in &LAYERS {
        for &seed in seeds {
            out.push(check_layer(layer, seed, cfg, sign_bug_layer == Some(layer))?);
        }
    }
    Ok(out)
}

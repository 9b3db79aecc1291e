use std::collections::BTreeMap;

use trajformer_autodiff::{Tape, Tensor};
use trajformer_core::checkpoint::Checkpoint;
use trajformer_core::config::KvConfig;
use trajformer_core::data::{Domain, TrajectorySample, FUTURE_FRAMES, HISTORY_FRAMES};
use trajformer_core::domain::{dat_forward, discriminate, domain_bce, pool_latent, DatConfig};
use trajformer_core::graph::SceneGraph;
use trajformer_core::model::{encode_batch, forward_train, init_params, Batch, ModelConfig};
use trajformer_core::rng::stream;
use trajformer_core::training::loss::mse_loss;
use trajformer_core::training::{read_metrics, RunConfig, TrainData, TrainOutput, Trainer};
use trajformer_core::transformer::{Dropout, TransformerConfig};

use rand::Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            d_model: 8,
            heads: 2,
            ff_width: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.0,
            norm_eps: 1e-5,
        },
        gcn_layers: 1,
        disc_hidden: 6,
    }
}

fn random_frames(rng: &mut impl Rng, frames: usize, n: usize) -> Tensor {
    Tensor::from_fn([frames, n, 2], |_| rng.random_range(-0.9..0.9))
}

/// Two linked agents with random normalized coordinates.
fn two_agent_sample(seed: u64, domain: Domain) -> TrajectorySample {
    let mut rng = stream(seed, "test.sample");
    let graph = SceneGraph::from_adjacency(Tensor::full([2, 2], 1.0)).unwrap();
    TrajectorySample {
        history: random_frames(&mut rng, HISTORY_FRAMES, 2),
        future: random_frames(&mut rng, FUTURE_FRAMES, 2),
        agent_ids: vec![1, 2],
        lane_ids: vec![1; (HISTORY_FRAMES + FUTURE_FRAMES) * 2],
        adjacency: vec![graph; HISTORY_FRAMES],
        domain,
        mask: vec![true, true],
    }
}

fn teacher_forced(cfg: &ModelConfig, params: &trajformer_core::params::ParamStore, sample: &TrajectorySample) -> Tensor {
    let batch = Batch::new(&[sample]).unwrap();
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let out = forward_train(&mut tape, &p, cfg, &batch, &mut Dropout::disabled()).unwrap();
    tape.value(out.predictions).clone()
}

#[test]
fn decoder_outputs_ignore_later_target_frames() {
    let cfg = small_model();
    let params = init_params(&cfg, 3, false);
    let base = two_agent_sample(1, Domain::Source);
    let reference = teacher_forced(&cfg, &params, &base);
    // Decoder position k reads future frame k-1, so perturbing future frames
    // k.. leaves positions 0..=k untouched.
    let mut rng = stream(2, "test.perturb");
    for k in [0, 7, 23] {
        let mut poked = base.clone();
        for v in &mut poked.future.data_mut()[k * 4..] {
            *v = rng.random_range(-0.9..0.9);
        }
        let out = teacher_forced(&cfg, &params, &poked);
        let keep = (k + 1) * 2;
        for s in 0..2 {
            let row = s * FUTURE_FRAMES * 2;
            assert_eq!(out.data()[row..row + keep], reference.data()[row..row + keep], "k={k}");
        }
        if k + 1 < FUTURE_FRAMES {
            assert_ne!(out.data(), reference.data(), "perturbation had no effect at k={k}");
        }
    }
}

fn encoder_grads(cfg: &ModelConfig, batch: &Batch, lambda: Option<f64>) -> BTreeMap<String, Tensor> {
    let params = init_params(cfg, 5, true);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let memory = encode_batch(&mut tape, &p, cfg, batch, &mut Dropout::disabled()).unwrap();
    let loss = match lambda {
        Some(lambda) => {
            let dat = DatConfig {
                lambda,
                ..DatConfig::default()
            };
            dat_forward(&mut tape, &p, memory, batch, &dat).unwrap().loss
        }
        None => {
            let pooled = pool_latent(&mut tape, memory, &batch.sequence_sample, batch.samples).unwrap();
            let predicted = discriminate(&mut tape, &p, pooled).unwrap();
            domain_bce(&mut tape, predicted, &batch.labels).unwrap()
        }
    };
    tape.backward(loss).unwrap();
    p.grads(&tape)
        .into_iter()
        .filter(|(k, _)| k.starts_with("gcn.src") || k.starts_with("enc."))
        .collect()
}

#[test]
fn reversal_scales_encoder_gradients_by_minus_lambda() {
    let cfg = small_model();
    let a = two_agent_sample(1, Domain::Source);
    let b = two_agent_sample(2, Domain::Target);
    let batch = Batch::new(&[&a, &b]).unwrap();
    let plain = encoder_grads(&cfg, &batch, None);
    assert!(!plain.is_empty());
    for lambda in [0.0, 0.5, 1.0] {
        let reversed = encoder_grads(&cfg, &batch, Some(lambda));
        assert_eq!(reversed.keys().collect::<Vec<_>>(), plain.keys().collect::<Vec<_>>());
        for (name, g) in &plain {
            for (x, y) in reversed[name].data().iter().zip(g.data()) {
                assert!((x - (-lambda * y)).abs() <= 1e-12, "{name} lambda {lambda}: {x} vs {}", -lambda * y);
            }
        }
    }
}

fn loss_grads(cfg: &ModelConfig, batch: &Batch, with_mse: bool, with_bce: bool) -> BTreeMap<String, Tensor> {
    let params = init_params(cfg, 7, true);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let out = forward_train(&mut tape, &p, cfg, batch, &mut Dropout::disabled()).unwrap();
    let mse = mse_loss(&mut tape, out.predictions, batch).unwrap();
    let bce = dat_forward(&mut tape, &p, out.memory, batch, &DatConfig::default()).unwrap().loss;
    let loss = match (with_mse, with_bce) {
        (true, true) => tape.add(mse, bce).unwrap(),
        (true, false) => mse,
        _ => bce,
    };
    tape.backward(loss).unwrap();
    let mut grads = p.grads(&tape);
    for (name, value) in params.iter() {
        grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
    }
    grads
}

#[test]
fn combined_gradient_is_sum_of_parts() {
    let cfg = small_model();
    let a = two_agent_sample(3, Domain::Source);
    let b = two_agent_sample(4, Domain::Target);
    let batch = Batch::new(&[&a, &b]).unwrap();
    let both = loss_grads(&cfg, &batch, true, true);
    let mse = loss_grads(&cfg, &batch, true, false);
    let bce = loss_grads(&cfg, &batch, false, true);
    for (name, g) in &both {
        for ((t, m), d) in g.data().iter().zip(mse[name].data()).zip(bce[name].data()) {
            assert!((t - (m + d)).abs() <= 1e-12 * (1.0 + t.abs()), "{name}");
        }
    }
    // The head never sees the discriminator loss and the discriminator never
    // sees the regression loss.
    assert!(bce["head.weight"].data().iter().all(|&v| v == 0.0));
    assert!(mse["disc.0.weight"].data().iter().all(|&v| v == 0.0));
}

fn tiny_run(dat: bool, steps: u64) -> RunConfig {
    let mut kv = KvConfig::default();
    for (k, v) in [
        ("d_model", "8"),
        ("heads", "2"),
        ("ff_width", "16"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("disc_hidden", "6"),
        ("dropout", "0.1"),
        ("batch_size", "4"),
        ("checkpoint_every", "5"),
    ] {
        kv.insert(k, v);
    }
    kv.insert("steps", steps);
    kv.insert("dat", if dat { "on" } else { "off" });
    RunConfig::from_kv(&kv).unwrap()
}

fn corpus(domain: Domain, count: u64, offset: u64) -> Vec<TrajectorySample> {
    (0..count).map(|i| two_agent_sample(offset + i, domain)).collect()
}

#[test]
fn disabled_adaptation_ignores_target_data() {
    let source = corpus(Domain::Source, 6, 0);
    let target = corpus(Domain::Target, 6, 100);
    let mut with = Trainer::new(tiny_run(false, 6)).unwrap();
    let mut without = Trainer::new(tiny_run(false, 6)).unwrap();
    let a = with
        .run(
            TrainData {
                source: &source,
                target: Some(&target),
            },
            &TrainOutput::default(),
        )
        .unwrap();
    let b = without
        .run(
            TrainData {
                source: &source,
                target: None,
            },
            &TrainOutput::default(),
        )
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(with.params, without.params);
    assert!(!with.params.iter().any(|(k, _)| k.starts_with("disc.")));
}

#[test]
fn adaptation_without_target_is_rejected() {
    let source = corpus(Domain::Source, 4, 0);
    let mut t = Trainer::new(tiny_run(true, 2)).unwrap();
    let err = t
        .run(
            TrainData {
                source: &source,
                target: None,
            },
            &TrainOutput::default(),
        )
        .unwrap_err();
    assert!(err.to_string().contains("target"), "{err}");
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let source = corpus(Domain::Source, 5, 0);
    let target = corpus(Domain::Target, 5, 100);
    let data = TrainData {
        source: &source,
        target: Some(&target),
    };
    let dir = tempfile::tempdir().unwrap();
    let straight_log = dir.path().join("straight.jsonl");
    let mut straight = Trainer::new(tiny_run(true, 12)).unwrap();
    straight
        .run(
            data,
            &TrainOutput {
                checkpoint: None,
                metrics: Some(straight_log.clone()),
            },
        )
        .unwrap();

    let ckpt_path = dir.path().join("run.ckpt");
    let resumed_log = dir.path().join("resumed.jsonl");
    let output = TrainOutput {
        checkpoint: Some(ckpt_path.clone()),
        metrics: Some(resumed_log.clone()),
    };
    let mut first = Trainer::new(tiny_run(true, 7)).unwrap();
    first.run(data, &output).unwrap();
    let mut overrides = KvConfig::default();
    overrides.insert("steps", 12);
    let mut second = Trainer::resume(Checkpoint::load(&ckpt_path).unwrap(), &overrides).unwrap();
    assert_eq!(second.step(), 7);
    second.run(data, &output).unwrap();

    assert_eq!(second.params, straight.params);
    assert_eq!(second.optimizer, straight.optimizer);
    assert_eq!(
        std::fs::read(&resumed_log).unwrap(),
        std::fs::read(&straight_log).unwrap()
    );
    assert_eq!(read_metrics(&resumed_log).unwrap().len(), 12);
}

#[test]
fn resume_cannot_toggle_adaptation() {
    let t = Trainer::new(tiny_run(false, 2)).unwrap();
    let mut overrides = KvConfig::default();
    overrides.insert("dat", "on");
    assert!(Trainer::resume(t.checkpoint(), &overrides).is_err());
}

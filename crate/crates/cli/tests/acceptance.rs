//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use trajformer_autodiff::{Tape, Tensor};
use trajformer_core::config::KvConfig;
use trajformer_core::data::{
    prepare_domains, segment_and_downsample, synth_generate, Domain, PreparedData, SynthSpec, TrajectoryRecord,
    TrajectorySample, FUTURE_FRAMES, HISTORY_FRAMES,
};
use trajformer_core::domain::{dat_forward, discriminate, domain_bce, latent_features, pool_latent, probe_accuracy, DatConfig, ProbeKind};
use trajformer_core::evaluation::{full_report, horizon_frame, rmse_at_horizon, ModelPredictor};
use trajformer_core::gradcheck::LAYERS;
use trajformer_core::graph::SceneGraph;
use trajformer_core::model::{encode_batch, forward_train, init_params, Batch, ModelConfig};
use trajformer_core::params::ParamStore;
use trajformer_core::rng::{stream, StreamRng};
use trajformer_core::training::{split_counts, CaseStudy, RunConfig, TrainData, TrainOutput, Trainer};
use trajformer_core::transformer::{Dropout, TransformerConfig};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const OVERFIT_MSE: f64 = 1e-3;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const GRL_TOLERANCE: f64 = 1e-12;
const PROBE_DAT_OFF_MIN: f64 = 0.85;
const PROBE_DAT_ON_MAX: f64 = 0.65;
const EQUILIBRIUM_BUDGET: Duration = Duration::from_secs(1800);
const BENEFIT_SEEDS: [u64; 3] = [1, 2, 3];
const BENEFIT_MIN_WINS: usize = 2;
const RMSE_TOLERANCE: f64 = 1e-9;
const RMSE_INSTANCES: usize = 100;

type Check = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_model(layers: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            d_model: 16,
            heads: 2,
            ff_width: 32,
            encoder_layers: layers,
            decoder_layers: layers,
            dropout,
            norm_eps: 1e-5,
        },
        gcn_layers: 1,
        disc_hidden: 64,
    }
}

fn run_config(pairs: &[(&str, &str)]) -> RunConfig {
    let mut kv = KvConfig::default();
    for (k, v) in pairs {
        kv.insert(*k, *v);
    }
    RunConfig::from_kv(&kv).expect("valid acceptance config")
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_trajformer"))
        .args(["gradcheck", "--seed", "1", "--seeds", "5"])
        .output()
        .expect("binary runs");
    let elapsed = started.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let passing = LAYERS
        .iter()
        .filter(|layer| stdout.lines().any(|l| l.split_whitespace().next() == Some(layer) && l.contains(" pass ")))
        .count();
    outcome(
        out.status.success() && passing == LAYERS.len() && elapsed < GRADCHECK_BUDGET,
        format!("{passing}/{} layers pass on 5 seeds in {:.1} s", LAYERS.len(), elapsed.as_secs_f64()),
    )
}

fn two_agent_sample(seed: u64) -> TrajectorySample {
    let mut rng = stream(seed, "acceptance.sample");
    let mut frames = |count: usize| Tensor::from_fn([count, 2, 2], |_| rng.random_range(-0.9..0.9));
    let graph = SceneGraph::from_adjacency(Tensor::full([2, 2], 1.0)).unwrap();
    TrajectorySample {
        history: frames(HISTORY_FRAMES),
        future: frames(FUTURE_FRAMES),
        agent_ids: vec![1, 2],
        lane_ids: vec![2; (HISTORY_FRAMES + FUTURE_FRAMES) * 2],
        adjacency: vec![graph; HISTORY_FRAMES],
        domain: Domain::Source,
        mask: vec![true, true],
    }
}

fn teacher_forced(params: &ParamStore, cfg: &ModelConfig, sample: &TrajectorySample) -> Tensor {
    let batch = Batch::new(&[sample]).unwrap();
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let out = forward_train(&mut tape, &p, cfg, &batch, &mut Dropout::disabled()).unwrap();
    tape.value(out.predictions).clone()
}

fn causality() -> Outcome {
    let cfg = small_model(2, 0.0);
    let params = init_params(&cfg, 1, false);
    let base = two_agent_sample(1);
    let reference = teacher_forced(&params, &cfg, &base);
    let mut rng = stream(2, "acceptance.perturb");
    let mut leaks = Vec::new();
    let mut inert = 0;
    for k in 0..FUTURE_FRAMES {
        // Decoder position j reads future frame j-1, so target positions > k
        // are future frames k and later.
        let mut poked = base.clone();
        for v in &mut poked.future.data_mut()[k * 2 * 2..] {
            *v = rng.random_range(-0.9..0.9);
        }
        let out = teacher_forced(&params, &cfg, &poked);
        let identical = (0..2).all(|s| {
            let row = s * FUTURE_FRAMES * 2;
            out.data()[row..row + (k + 1) * 2]
                .iter()
                .zip(&reference.data()[row..row + (k + 1) * 2])
                .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !identical {
            leaks.push(k);
        }
        if k + 1 < FUTURE_FRAMES && out.data() == reference.data() {
            inert += 1;
        }
    }
    outcome(
        leaks.is_empty() && inert == 0,
        format!(
            "2 agents, k = 0..{}: leaking steps {leaks:?}, perturbations without any effect {inert}",
            FUTURE_FRAMES - 1
        ),
    )
}

fn overfit() -> Outcome {
    let data = synth_generate(&SynthSpec::default(), 1).unwrap();
    let prepared = prepare_domains(&data.source, None, CaseStudy::CrossCity, 1, 1).unwrap();
    let samples: Vec<TrajectorySample> = prepared.source.train.iter().take(32).cloned().collect();
    let run = run_config(&[
        ("d_model", "16"),
        ("heads", "2"),
        ("ff_width", "32"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("dropout", "0"),
        ("batch_size", "32"),
        ("learning_rate", "3e-3"),
        ("steps", "2000"),
        ("seed", "1"),
        ("dat", "off"),
    ]);
    let started = Instant::now();
    let mut trainer = Trainer::new(run).unwrap();
    trainer
        .run(
            TrainData {
                source: &samples,
                target: None,
            },
            &TrainOutput::default(),
        )
        .unwrap();
    let mse = trainer.evaluate_mse(&samples).unwrap();
    let elapsed = started.elapsed();
    outcome(
        samples.len() == 32 && mse < OVERFIT_MSE && elapsed < OVERFIT_BUDGET,
        format!(
            "{} samples, 2000 steps: normalized MSE {mse:.3e} (< {OVERFIT_MSE:e}) in {:.1} s",
            samples.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn encoder_grads(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, lambda: Option<f64>) -> BTreeMap<String, Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let memory = encode_batch(&mut tape, &p, cfg, batch, &mut Dropout::disabled()).unwrap();
    let loss = match lambda {
        Some(lambda) => {
            let dat = DatConfig { enabled: true, lambda };
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
        .filter(|(k, _)| k.starts_with("gcn.src.") || k.starts_with("enc."))
        .collect()
}

fn grl_exactness() -> Outcome {
    let data = synth_generate(&SynthSpec::default(), 1).unwrap();
    let prepared = prepare_domains(&data.source, Some(&data.target), CaseStudy::CrossCity, 3, 1).unwrap();
    let target = prepared.target.unwrap();
    let samples: Vec<&TrajectorySample> = prepared.source.train[..3].iter().chain(&target.train[..3]).collect();
    let batch = Batch::new(&samples).unwrap();
    let cfg = small_model(2, 0.0);
    let params = init_params(&cfg, 1, true);
    let plain = encoder_grads(&params, &cfg, &batch, None);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut keys_match = true;
    for lambda in [0.0, 0.5, 1.0] {
        let reversed = encoder_grads(&params, &cfg, &batch, Some(lambda));
        keys_match &= reversed.keys().eq(plain.keys());
        for (name, g) in &plain {
            for (r, v) in reversed[name].data().iter().zip(g.data()) {
                worst = worst.max((r - (-lambda * v)).abs());
                count += 1;
            }
        }
    }
    let nonzero = plain.values().any(|g| g.data().iter().any(|&v| v != 0.0));
    outcome(
        keys_match && nonzero && worst <= GRL_TOLERANCE,
        format!(
            "lambda in {{0, 0.5, 1}}, {count} encoder gradient entries: max |g_grl + lambda g| = {worst:.1e} (<= {GRL_TOLERANCE:e})"
        ),
    )
}

/// Two-domain synthetic task shared by the equilibrium and benefit checks:
/// ego-only scenes, source and target differing by a +5 m/s speed offset.
fn two_domain_data(seed: u64) -> PreparedData {
    let spec = SynthSpec {
        vehicles: 240,
        duration_s: 300.0,
        speed_std: 0.75,
        speed_drift: 0.05,
        ..SynthSpec::default()
    };
    assert_eq!(spec.speed_offset, 5.0);
    let data = synth_generate(&spec, seed).unwrap();
    prepare_domains(&data.source, Some(&data.target), CaseStudy::CrossCity, 1, seed).unwrap()
}

struct DomainRun {
    probe: f64,
    target_rmse: f64,
}

fn train_two_domain(prepared: &PreparedData, seed: u64, dat: bool) -> DomainRun {
    let seed_text = seed.to_string();
    let run = run_config(&[
        ("d_model", "16"),
        ("heads", "2"),
        ("ff_width", "32"),
        ("encoder_layers", "1"),
        ("decoder_layers", "1"),
        ("batch_size", "16"),
        ("learning_rate", "3e-3"),
        ("steps", "5000"),
        ("dat_lambda", "1"),
        ("seed", &seed_text),
        ("dat", if dat { "on" } else { "off" }),
    ]);
    let target = prepared.target.as_ref().unwrap();
    let mut trainer = Trainer::new(run).unwrap();
    trainer
        .run(
            TrainData {
                source: &prepared.source.train,
                target: Some(&target.train),
            },
            &TrainOutput::default(),
        )
        .unwrap();
    let cfg = &trainer.run.model;

    // Balanced probe set over every sample of both domains.
    let source: Vec<TrajectorySample> = prepared.source.test.iter().chain(&prepared.source.train).cloned().collect();
    let target_all: Vec<TrajectorySample> = target.test.iter().chain(&target.train).cloned().collect();
    let k = source.len().min(target_all.len());
    let mut features = latent_features(&trainer.params, cfg, &source[..k], 64).unwrap();
    features.extend(latent_features(&trainer.params, cfg, &target_all[..k], 64).unwrap());
    let labels: Vec<f64> = (0..2 * k).map(|i| if i < k { 0.0 } else { 1.0 }).collect();
    let probe = probe_accuracy(&features, &labels, ProbeKind::Mlp(64), seed).unwrap();

    let predictor = ModelPredictor {
        params: &trainer.params,
        config: cfg,
        chunk: 64,
    };
    let report = full_report(&predictor, &target.test, &prepared.scaler, "acceptance", "target").unwrap();
    DomainRun {
        probe,
        target_rmse: report.average,
    }
}

struct TwoDomainRuns {
    by_seed: BTreeMap<u64, (DomainRun, DomainRun)>,
    seed_one_time: Duration,
}

fn two_domain_runs(seeds: &[u64]) -> TwoDomainRuns {
    let mut by_seed = BTreeMap::new();
    let mut seed_one_time = Duration::ZERO;
    for &seed in seeds {
        let started = Instant::now();
        let prepared = two_domain_data(seed);
        let off = train_two_domain(&prepared, seed, false);
        let on = train_two_domain(&prepared, seed, true);
        if seed == 1 {
            seed_one_time = started.elapsed();
        }
        by_seed.insert(seed, (off, on));
    }
    TwoDomainRuns { by_seed, seed_one_time }
}

fn equilibrium(runs: &TwoDomainRuns) -> Outcome {
    let (off, on) = &runs.by_seed[&1];
    outcome(
        off.probe > PROBE_DAT_OFF_MIN && on.probe <= PROBE_DAT_ON_MAX && runs.seed_one_time < EQUILIBRIUM_BUDGET,
        format!(
            "seed 1, 5000 steps: probe accuracy dat off {:.3} (> {PROBE_DAT_OFF_MIN}), dat on {:.3} (<= {PROBE_DAT_ON_MAX}), {:.0} s",
            off.probe,
            on.probe,
            runs.seed_one_time.as_secs_f64()
        ),
    )
}

fn benefit(runs: &TwoDomainRuns) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, (off, on)) in &runs.by_seed {
        if on.target_rmse <= off.target_rmse {
            wins += 1;
        }
        parts.push(format!("seed {seed}: {:.2} -> {:.2} m", off.target_rmse, on.target_rmse));
    }
    outcome(
        runs.by_seed.len() == BENEFIT_SEEDS.len() && wins >= BENEFIT_MIN_WINS,
        format!(
            "target-test average RMSE dat off -> on: {}; {wins}/{} seeds improve",
            parts.join(", "),
            runs.by_seed.len()
        ),
    )
}

fn brute_force_rmse(p: &[Tensor], t: &[Tensor], masks: &[Vec<bool>], horizon: usize) -> f64 {
    let f = horizon_frame(horizon);
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, mask) in masks.iter().enumerate() {
        for (i, &valid) in mask.iter().enumerate() {
            for c in 0..2 {
                if valid {
                    let d = p[s].get(&[f, i, c]).unwrap() - t[s].get(&[f, i, c]).unwrap();
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    (sum / count as f64).sqrt()
}

fn metric_oracle() -> Outcome {
    let mut rng = stream(7, "acceptance.rmse");
    let mut worst: f64 = 0.0;
    for _ in 0..RMSE_INSTANCES {
        let samples = rng.random_range(1..6);
        let n = rng.random_range(1..5);
        let traj = |rng: &mut StreamRng| {
            Tensor::from_fn([FUTURE_FRAMES, n, 2], |_| rng.random_range(-100.0..100.0))
        };
        let p: Vec<Tensor> = (0..samples).map(|_| traj(&mut rng)).collect();
        let t: Vec<Tensor> = (0..samples).map(|_| traj(&mut rng)).collect();
        let masks: Vec<Vec<bool>> = (0..samples)
            .map(|_| (0..n).map(|i| i == 0 || rng.random_bool(0.6)).collect())
            .collect();
        let h = rng.random_range(0..6);
        let got = rmse_at_horizon(&p, &t, &masks, h).unwrap();
        let want = brute_force_rmse(&p, &t, &masks, h);
        worst = worst.max((got - want).abs());
    }
    let truth = Tensor::zeros([FUTURE_FRAMES, 1, 2]);
    let pred = Tensor::from_fn([FUTURE_FRAMES, 1, 2], |k| if k % 2 == 1 { 2.0 } else { 0.0 });
    let worked = rmse_at_horizon(&[pred], &[truth], &[vec![true]], 1).unwrap();
    outcome(
        worst <= RMSE_TOLERANCE && worked == 2f64.sqrt(),
        format!(
            "{RMSE_INSTANCES} instances: max |impl - oracle| = {worst:.1e} (<= {RMSE_TOLERANCE:e}); errors (0, 2) give {worked} (sqrt 2 = {})",
            2f64.sqrt()
        ),
    )
}

fn pipeline_arithmetic() -> Outcome {
    let records: Vec<TrajectoryRecord> = (0..80)
        .map(|tick| TrajectoryRecord {
            vehicle_id: 1,
            frame_id: 100 + tick,
            local_x: 1.8,
            local_y: tick as f64,
            lane_id: 1,
        })
        .collect();
    let (windows, _) = segment_and_downsample(&records);
    let window_ok = windows.len() == 1
        && windows[0].frame_ids.len() == 40
        && windows[0].history_frames().len() == 15
        && windows[0].future_frames().len() == 25;
    let study = CaseStudy::CrossCity;
    let (src_train, src_test) = split_counts(5398, study.source_test_fraction());
    let (tgt_train, tgt_test) = split_counts(7799, study.target_test_fraction());
    let counts_ok = (src_train, src_test) == (3602, 1796) && (tgt_train, tgt_test) == (3897, 3902);
    outcome(
        window_ok && counts_ok,
        format!(
            "80 ticks -> {} window(s) of {} frames ({}/{}); 5398 -> {src_train}/{src_test} (want 3602/1796), 7799 -> {tgt_train}/{tgt_test} (want 3897/3902)",
            windows.len(),
            windows.first().map_or(0, |w| w.frame_ids.len()),
            windows.first().map_or(0, |w| w.history_frames().len()),
            windows.first().map_or(0, |w| w.future_frames().len()),
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_trajformer");
    let root = dir.path();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("binary runs");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let p = |name: &str| root.join(name).to_str().unwrap().to_owned();
    run(&[
        "synth", "--out", &p("data"), "--seed", "5", "--max-agents", "3", "--set", "vehicles=40", "--set", "duration_s=60",
    ]);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let ckpt = p(&format!("{name}.ckpt"));
        let metrics = p(&format!("{name}.jsonl"));
        run(&[
            "train",
            "--source",
            &p("data/source"),
            "--target",
            &p("data/target"),
            "--dat",
            "on",
            "--out",
            &ckpt,
            "--metrics",
            &metrics,
            "--set",
            "d_model=16",
            "--set",
            "heads=2",
            "--set",
            "ff_width=32",
            "--set",
            "dropout=0.1",
            "--set",
            "batch_size=8",
            "--set",
            "steps=40",
            "--set",
            "checkpoint_every=10",
            "--set",
            "seed=11",
        ]);
        logs.push(std::fs::read(&metrics).unwrap());
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    outcome(
        lines == 40 && logs[0] == logs[1],
        format!(
            "two dat-on runs, seed 11: {lines} log lines, {} bytes each, identical: {}",
            logs[0].len(),
            logs[0] == logs[1]
        ),
    )
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        let line = format!(
            "criterion {n} {name:<24} {}  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        println!("{line}");
        std::io::stdout().flush().ok();
        results.push((n, name, o));
    };
    let simple: [Check; 4] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "causality", causality),
        (3, "overfit probe", overfit),
        (4, "GRL exactness", grl_exactness),
    ];
    for (n, name, check) in simple {
        if selected(n) {
            report(n, name, check());
        }
    }
    if selected(5) || selected(6) {
        let seeds: &[u64] = if selected(6) { &BENEFIT_SEEDS } else { &[1] };
        let runs = two_domain_runs(seeds);
        if selected(5) {
            report(5, "adversarial equilibrium", equilibrium(&runs));
        }
        if selected(6) {
            report(6, "adaptation benefit", benefit(&runs));
        }
    }
    let rest: [Check; 3] = [
        (7, "metric oracle", metric_oracle),
        (8, "pipeline arithmetic", pipeline_arithmetic),
        (9, "determinism", determinism),
    ];
    for (n, name, check) in rest {
        if selected(n) {
            report(n, name, check());
        }
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| !o.pass)
        .map(|(n, _, _)| n.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

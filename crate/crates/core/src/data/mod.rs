//! Record ingestion, windowing, normalization and sample assembly.

pub mod records;
pub mod sample;
pub mod scaler;
pub mod segment;
pub mod shard;
pub mod synth;

use std::path::Path;

pub use records::{load_records, read_records, write_records, LoadedRecords, TrajectoryRecord};
pub use sample::{build_sample, extract_scene, Domain, RawScene, SampleRejection, SceneIndex, TrajectorySample};
pub use scaler::{fit_scaler, Scaler};
pub use segment::{segment_and_downsample, RawWindow, SegmentStats, FUTURE_FRAMES, HISTORY_FRAMES};
pub use shard::{read_shard, write_shard};
pub use synth::{synth_generate, SynthDatasets, SynthSpec};

use crate::error::Result;
use crate::training::splits::{split_indices, CaseStudy};

/// Default number of agent slots per scene.
pub const DEFAULT_MAX_AGENTS: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SceneStats {
    pub windows: usize,
    pub ego_missing: usize,
    pub out_of_range: usize,
}

/// Builds the metric scene for every ego window of one domain.
pub fn extract_scenes(records: &[TrajectoryRecord], max_agents: usize, domain: Domain) -> (Vec<RawScene>, SceneStats) {
    let (windows, seg) = segment_and_downsample(records);
    log::info!(
        "{domain}: {} windows from {} runs ({} short runs dropped)",
        windows.len(),
        seg.runs,
        seg.short_runs
    );
    let index = SceneIndex::new(records);
    let mut stats = SceneStats {
        windows: windows.len(),
        ..SceneStats::default()
    };
    let scenes = windows
        .iter()
        .filter_map(|w| match extract_scene(w, &index, max_agents, domain) {
            Ok(s) => Some(s),
            Err(_) => {
                stats.ego_missing += 1;
                None
            }
        })
        .collect();
    (scenes, stats)
}

/// Normalizes scenes, dropping (and counting) any that leave `[-1, 1]`.
pub fn normalize_scenes(scenes: &[RawScene], scaler: &Scaler, max_agents: usize, stats: &mut SceneStats) -> Vec<TrajectorySample> {
    scenes
        .iter()
        .filter_map(|s| match s.normalize(scaler, max_agents) {
            Ok(sample) => Some(sample),
            Err(e) => {
                log::warn!("sample dropped: {e}");
                stats.out_of_range += 1;
                None
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train: Vec<TrajectorySample>,
    pub test: Vec<TrajectorySample>,
    pub stats: SceneStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub scaler: Scaler,
    pub source: DomainSplit,
    pub target: Option<DomainSplit>,
}

fn partition<T: Clone>(items: &[T], test_fraction: f64, seed: u64, stream: &str) -> (Vec<T>, Vec<T>) {
    let (train, test) = split_indices(items.len(), test_fraction, seed, stream);
    (
        train.iter().map(|&i| items[i].clone()).collect(),
        test.iter().map(|&i| items[i].clone()).collect(),
    )
}

/// Full preparation: windows → scenes → seeded train/test split → scaler fit
/// on source-train coordinates → normalization of both domains.
pub fn prepare_domains(
    source: &[TrajectoryRecord],
    target: Option<&[TrajectoryRecord]>,
    study: CaseStudy,
    max_agents: usize,
    seed: u64,
) -> Result<PreparedData> {
    let (src_scenes, mut src_stats) = extract_scenes(source, max_agents, Domain::Source);
    let (src_train, src_test) = partition(&src_scenes, study.source_test_fraction(), seed, "split.source");
    let scaler = fit_scaler(src_train.iter().flat_map(|s| s.coordinates().collect::<Vec<_>>()))?;
    let source = DomainSplit {
        train: normalize_scenes(&src_train, &scaler, max_agents, &mut src_stats),
        test: normalize_scenes(&src_test, &scaler, max_agents, &mut src_stats),
        stats: src_stats,
    };
    let target = target
        .map(|records| {
            let (scenes, mut stats) = extract_scenes(records, max_agents, Domain::Target);
            let (train, test) = partition(&scenes, study.target_test_fraction(), seed, "split.target");
            DomainSplit {
                train: normalize_scenes(&train, &scaler, max_agents, &mut stats),
                test: normalize_scenes(&test, &scaler, max_agents, &mut stats),
                stats,
            }
        });
    Ok(PreparedData {
        scaler,
        source,
        target,
    })
}

/// Prepares one domain against an existing scaler (e.g. a target dataset
/// normalized with the source scaler).
pub fn prepare_with_scaler(
    records: &[TrajectoryRecord],
    domain: Domain,
    test_fraction: f64,
    scaler: &Scaler,
    max_agents: usize,
    seed: u64,
) -> DomainSplit {
    let (scenes, mut stats) = extract_scenes(records, max_agents, domain);
    let (train, test) = partition(&scenes, test_fraction, seed, &format!("split.{domain}"));
    DomainSplit {
        train: normalize_scenes(&train, scaler, max_agents, &mut stats),
        test: normalize_scenes(&test, scaler, max_agents, &mut stats),
        stats,
    }
}

pub const TRAIN_SHARD: &str = "train.shard";
pub const TEST_SHARD: &str = "test.shard";
pub const SCALER_FILE: &str = "scaler.txt";

/// Writes `train.shard`, `test.shard` and `scaler.txt` into `dir`.
pub fn write_domain_dir(dir: &Path, split: &DomainSplit, scaler: &Scaler) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    write_shard(&dir.join(TRAIN_SHARD), &split.train)?;
    write_shard(&dir.join(TEST_SHARD), &split.test)?;
    scaler.save(&dir.join(SCALER_FILE))
}

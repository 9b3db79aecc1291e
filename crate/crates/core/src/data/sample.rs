//! Scene extraction around an ego window and the normalized training sample.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;
use trajformer_autodiff::Tensor;

use crate::data::records::TrajectoryRecord;
use crate::data::scaler::Scaler;
use crate::data::segment::{RawWindow, FRAMES_PER_WINDOW, FUTURE_FRAMES, HISTORY_FRAMES};
use crate::error::{Error, Result};
use crate::graph::{build_scene_graph, is_neighbor, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator label: 0 for source, 1 for target.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Config(format!("unknown domain `{s}` (expected source|target)"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lookup of records by `(vehicle_id, frame_id)` and by frame.
pub struct SceneIndex<'a> {
    by_key: HashMap<(i64, i64), &'a TrajectoryRecord>,
    by_frame: HashMap<i64, Vec<&'a TrajectoryRecord>>,
}

impl<'a> SceneIndex<'a> {
    pub fn new(records: &'a [TrajectoryRecord]) -> Self {
        let mut by_key = HashMap::with_capacity(records.len());
        let mut by_frame: HashMap<i64, Vec<&TrajectoryRecord>> = HashMap::new();
        for r in records {
            by_key.insert((r.vehicle_id, r.frame_id), r);
            by_frame.entry(r.frame_id).or_default().push(r);
        }
        Self { by_key, by_frame }
    }

    pub fn get(&self, vehicle: i64, frame: i64) -> Option<&'a TrajectoryRecord> {
        self.by_key.get(&(vehicle, frame)).copied()
    }

    pub fn at_frame(&self, frame: i64) -> &[&'a TrajectoryRecord] {
        self.by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleRejection {
    #[error("ego vehicle {vehicle} missing at frame {frame}")]
    EgoMissing { vehicle: i64, frame: i64 },
    #[error("normalized coordinate outside [-1, 1] for vehicle {vehicle}")]
    OutOfRange { vehicle: i64 },
}

/// Scene around one ego window in metric coordinates, real agents only.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScene {
    pub domain: Domain,
    /// Ego first, then ascending distance at the first history frame.
    pub agent_ids: Vec<i64>,
    /// `[frame][agent]` positions in meters over the 40 window frames.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// `[frame][agent]` lane ids over the 40 window frames.
    pub lanes: Vec<Vec<i64>>,
}

impl RawScene {
    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn coordinates(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.positions.iter().flatten().copied()
    }

    /// Pads to `max_agents`, scales into `[-1, 1]` and attaches one scene
    /// graph per history frame (computed on metric positions).
    pub fn normalize(&self, scaler: &Scaler, max_agents: usize) -> std::result::Result<TrajectorySample, SampleRejection> {
        let n = max_agents;
        let real = self.agents().min(n);
        let mask: Vec<bool> = (0..n).map(|i| i < real).collect();
        let mut coords = vec![0.0; FRAMES_PER_WINDOW * n * 2];
        let mut lane_ids = vec![0i64; FRAMES_PER_WINDOW * n];
        for f in 0..FRAMES_PER_WINDOW {
            for i in 0..real {
                let p = scaler.normalize(self.positions[f][i]);
                if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(SampleRejection::OutOfRange {
                        vehicle: self.agent_ids[i],
                    });
                }
                coords[(f * n + i) * 2] = p[0];
                coords[(f * n + i) * 2 + 1] = p[1];
                lane_ids[f * n + i] = self.lanes[f][i];
            }
        }
        let adjacency = (0..HISTORY_FRAMES)
            .map(|f| {
                let mut pos = vec![[0.0; 2]; n];
                pos[..real].copy_from_slice(&self.positions[f][..real]);
                build_scene_graph(&pos, &lane_ids[f * n..(f + 1) * n], &mask)
                    .expect("inputs have matching lengths")
            })
            .collect();
        let split = HISTORY_FRAMES * n * 2;
        Ok(TrajectorySample {
            history: Tensor::new([HISTORY_FRAMES, n, 2], coords[..split].to_vec())
                .expect("history shape"),
            future: Tensor::new([FUTURE_FRAMES, n, 2], coords[split..].to_vec())
                .expect("future shape"),
            agent_ids: self.agent_ids[..real].to_vec(),
            lane_ids,
            adjacency,
            domain: self.domain,
            mask,
        })
    }
}

/// Collects the ego's scene: agents present at the first history frame that
/// satisfy the neighbourhood rule with the ego and are observed in all 40
/// frames, ordered ego first then by distance, truncated to `max_agents`.
pub fn extract_scene(
    window: &RawWindow,
    index: &SceneIndex<'_>,
    max_agents: usize,
    domain: Domain,
) -> std::result::Result<RawScene, SampleRejection> {
    let ego = window.vehicle_id;
    for &f in &window.frame_ids {
        if index.get(ego, f).is_none() {
            return Err(SampleRejection::EgoMissing { vehicle: ego, frame: f });
        }
    }
    let anchor_frame = window.frame_ids[0];
    let anchor = index.get(ego, anchor_frame).expect("checked above");
    let mut neighbors: Vec<(f64, i64)> = index
        .at_frame(anchor_frame)
        .iter()
        .filter(|r| r.vehicle_id != ego)
        .filter(|r| is_neighbor(anchor.position(), anchor.lane_id, r.position(), r.lane_id))
        .filter(|r| window.frame_ids.iter().all(|&f| index.get(r.vehicle_id, f).is_some()))
        .map(|r| {
            let d = ((r.local_x - anchor.local_x).powi(2) + (r.local_y - anchor.local_y).powi(2)).sqrt();
            (d, r.vehicle_id)
        })
        .collect();
    neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut agent_ids = vec![ego];
    agent_ids.extend(neighbors.iter().map(|&(_, id)| id));
    agent_ids.truncate(max_agents.max(1));

    let mut positions = Vec::with_capacity(FRAMES_PER_WINDOW);
    let mut lanes = Vec::with_capacity(FRAMES_PER_WINDOW);
    for &f in &window.frame_ids {
        let recs: Vec<&TrajectoryRecord> = agent_ids
            .iter()
            .map(|&id| index.get(id, f).expect("presence checked"))
            .collect();
        positions.push(recs.iter().map(|r| r.position()).collect());
        lanes.push(recs.iter().map(|r| r.lane_id).collect());
    }
    Ok(RawScene {
        domain,
        agent_ids,
        positions,
        lanes,
    })
}

/// One normalized example: 15 history and 25 future frames for a padded
/// set of agents, with per-history-frame scene graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    /// `[15 × n × 2]` normalized coordinates.
    pub history: Tensor,
    /// `[25 × n × 2]` normalized coordinates.
    pub future: Tensor,
    /// Ids of the real agents, ego first.
    pub agent_ids: Vec<i64>,
    /// `[40 × n]` lane ids, zero for padding.
    pub lane_ids: Vec<i64>,
    /// Scene graph of each history frame.
    pub adjacency: Vec<SceneGraph>,
    pub domain: Domain,
    /// Validity flag per agent slot.
    pub mask: Vec<bool>,
}

impl TrajectorySample {
    pub fn agents(&self) -> usize {
        self.mask.len()
    }

    pub fn real_agents(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn history_len(&self) -> usize {
        self.history.shape()[0]
    }

    pub fn future_len(&self) -> usize {
        self.future.shape()[0]
    }

    /// Checks the frame counts, the coordinate range and mask consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.agents();
        let fail = |m: String| Err(Error::Contract(m));
        if self.history.shape() != [HISTORY_FRAMES, n, 2] || self.future.shape() != [FUTURE_FRAMES, n, 2] {
            return fail(format!(
                "sample shapes {:?}/{:?} do not match 15/25 frames of {n} agents",
                self.history.shape(),
                self.future.shape()
            ));
        }
        self.validate_layout()
    }

    /// Like [`validate`](Self::validate) without fixing the frame counts.
    pub fn validate_layout(&self) -> Result<()> {
        let n = self.agents();
        let fail = |m: String| Err(Error::Contract(m));
        if self.real_agents() == 0 || !self.mask[0] {
            return fail("sample has no ego agent".into());
        }
        if self.agent_ids.len() != self.real_agents() {
            return fail("agent id count differs from mask".into());
        }
        if self.adjacency.len() != self.history_len() {
            return fail("one scene graph per history frame required".into());
        }
        for t in [&self.history, &self.future] {
            if t.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return fail("normalized coordinate outside [-1, 1]".into());
            }
            for (k, v) in t.data().iter().enumerate() {
                let agent = (k / 2) % n;
                if !self.mask[agent] && *v != 0.0 {
                    return fail(format!("padding agent {agent} has non-zero coordinates"));
                }
            }
        }
        for g in &self.adjacency {
            let a = g.adjacency().data();
            for i in 0..n {
                for j in 0..n {
                    let v = a[i * n + j];
                    if v != a[j * n + i] {
                        return fail("adjacency not symmetric".into());
                    }
                    if (!self.mask[i] || !self.mask[j]) && v != 0.0 {
                        return fail("padding agent has adjacency entries".into());
                    }
                    if i == j && self.mask[i] && v != 1.0 {
                        return fail("missing self-loop".into());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Extracts and normalizes the scene for `window`.
pub fn build_sample(
    window: &RawWindow,
    index: &SceneIndex<'_>,
    scaler: &Scaler,
    max_agents: usize,
    domain: Domain,
) -> std::result::Result<TrajectorySample, SampleRejection> {
    extract_scene(window, index, max_agents, domain)?.normalize(scaler, max_agents)
}

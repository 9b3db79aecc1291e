//! Synthetic multi-lane freeway traffic with a controllable domain shift.
//!
//! Vehicles enter a straight road segment at `y = 0`, follow their leader
//! with the Intelligent Driver Model, occasionally change lanes along a
//! smooth lateral profile, and leave at `y = road_length`. The target domain
//! re-runs the simulation with the speed offset and lane-change multiplier
//! applied, on its own random stream.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_value, Configurable, KvConfig};
use crate::data::records::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::rng;

const DT: f64 = 0.1;
const VEHICLE_LENGTH: f64 = 4.5;
const IDM_MAX_ACCEL: f64 = 1.5;
const IDM_COMFORT_DECEL: f64 = 2.0;
const IDM_MIN_GAP: f64 = 2.0;
const IDM_HEADWAY_S: f64 = 1.2;
const LANE_CHANGE_S: f64 = 3.0;
const LANE_CHANGE_CLEARANCE: f64 = 12.0;
const ENTRY_CLEARANCE: f64 = 15.0;
/// Vehicles join (as if merging) uniformly over this leading fraction of the
/// section, so window positions do not line up on a speed-dependent grid.
const ENTRY_SPAN: f64 = 0.5;

/// Generator parameters, loadable from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub lanes: usize,
    /// Vehicles per domain.
    pub vehicles: usize,
    pub duration_s: f64,
    /// Mean desired speed of the source domain, m/s.
    pub mean_speed: f64,
    /// Spread of desired speeds around the mean, m/s.
    pub speed_std: f64,
    /// Added to the target domain's mean desired speed, m/s.
    pub speed_offset: f64,
    /// Stationary spread of each driver's slow speed drift, as a fraction
    /// of the domain's mean speed.
    pub speed_drift: f64,
    /// Expected lane changes per vehicle per minute (source domain).
    pub lanechange_rate: f64,
    /// Target-domain multiplier on `lanechange_rate`.
    pub lanechange_multiplier: f64,
    /// Standard deviation of position measurement noise, m.
    pub noise_std: f64,
    pub lane_width: f64,
    pub road_length: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            lanes: 3,
            vehicles: 120,
            duration_s: 180.0,
            mean_speed: 15.0,
            speed_std: 1.5,
            speed_offset: 5.0,
            speed_drift: 0.1,
            lanechange_rate: 0.5,
            lanechange_multiplier: 1.0,
            noise_std: 0.05,
            lane_width: 3.7,
            road_length: 400.0,
            seed: 1,
        }
    }
}

impl Configurable for SynthSpec {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lanes" => self.lanes = parse_value(key, value)?,
            "vehicles" => self.vehicles = parse_value(key, value)?,
            "duration_s" => self.duration_s = parse_value(key, value)?,
            "mean_speed" => self.mean_speed = parse_value(key, value)?,
            "speed_std" => self.speed_std = parse_value(key, value)?,
            "speed_offset" => self.speed_offset = parse_value(key, value)?,
            "speed_drift" => self.speed_drift = parse_value(key, value)?,
            "lanechange_rate" => self.lanechange_rate = parse_value(key, value)?,
            "lanechange_multiplier" => self.lanechange_multiplier = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "lane_width" => self.lane_width = parse_value(key, value)?,
            "road_length" => self.road_length = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lanes", self.lanes.to_string()),
            ("vehicles", self.vehicles.to_string()),
            ("duration_s", format!("{:?}", self.duration_s)),
            ("mean_speed", format!("{:?}", self.mean_speed)),
            ("speed_std", format!("{:?}", self.speed_std)),
            ("speed_offset", format!("{:?}", self.speed_offset)),
            ("speed_drift", format!("{:?}", self.speed_drift)),
            ("lanechange_rate", format!("{:?}", self.lanechange_rate)),
            ("lanechange_multiplier", format!("{:?}", self.lanechange_multiplier)),
            ("noise_std", format!("{:?}", self.noise_std)),
            ("lane_width", format!("{:?}", self.lane_width)),
            ("road_length", format!("{:?}", self.road_length)),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        spec.apply_all(&KvConfig::load(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.lanes == 0 {
            return fail("lanes must be at least 1");
        }
        if self.vehicles == 0 {
            return fail("vehicles must be at least 1");
        }
        let positive = [
            ("duration_s", self.duration_s),
            ("mean_speed", self.mean_speed),
            ("lane_width", self.lane_width),
            ("road_length", self.road_length),
            ("target mean speed", self.mean_speed + self.speed_offset),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(&format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("speed_std", self.speed_std),
            ("speed_drift", self.speed_drift),
            ("lanechange_rate", self.lanechange_rate),
            ("lanechange_multiplier", self.lanechange_multiplier),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return fail(&format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.speed_offset.is_finite() {
            return fail("speed_offset must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasets {
    pub source: Vec<TrajectoryRecord>,
    pub target: Vec<TrajectoryRecord>,
}

/// Generates source and target traffic. Identical `spec` and `seed` give
/// bitwise-identical output.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthDatasets> {
    spec.validate()?;
    let source = simulate(
        spec,
        spec.mean_speed,
        spec.lanechange_rate,
        &mut rng::stream(seed, "synth.source"),
    );
    let target = simulate(
        spec,
        spec.mean_speed + spec.speed_offset,
        spec.lanechange_rate * spec.lanechange_multiplier,
        &mut rng::stream(seed, "synth.target"),
    );
    Ok(SynthDatasets { source, target })
}

struct Vehicle {
    id: i64,
    y: f64,
    v: f64,
    desired: f64,
    /// Deviation of the desired speed, an Ornstein-Uhlenbeck process.
    drift: f64,
    lane: usize,
    change: Option<LaneChange>,
}

struct LaneChange {
    from: usize,
    elapsed: f64,
}

impl Vehicle {
    fn lateral(&self, width: f64) -> f64 {
        let center = |lane: usize| (lane as f64 + 0.5) * width;
        match &self.change {
            None => center(self.lane),
            Some(c) => {
                let u = (c.elapsed / LANE_CHANGE_S).clamp(0.0, 1.0);
                let s = u * u * (3.0 - 2.0 * u);
                center(c.from) + s * (center(self.lane) - center(c.from))
            }
        }
    }

    /// Lanes this vehicle currently occupies (two while changing).
    fn occupies(&self, lane: usize) -> bool {
        self.lane == lane || self.change.as_ref().is_some_and(|c| c.from == lane)
    }
}

fn idm_accel(v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / desired).powi(4);
    let interaction = match leader {
        Some((gap, lead_v)) => {
            let gap = gap.max(0.1);
            let s_star = IDM_MIN_GAP
                + (v * IDM_HEADWAY_S + v * (v - lead_v) / (2.0 * (IDM_MAX_ACCEL * IDM_COMFORT_DECEL).sqrt()))
                    .max(0.0);
            (s_star / gap).powi(2)
        }
        None => 0.0,
    };
    IDM_MAX_ACCEL * (free - interaction)
}

fn simulate(spec: &SynthSpec, mean_speed: f64, lanechange_per_min: f64, rng: &mut impl Rng) -> Vec<TrajectoryRecord> {
    let speed_dist = Normal::new(0.0, spec.speed_std).expect("validated std");
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let total_ticks = (spec.duration_s / DT).round() as i64;
    let transit = spec.road_length / mean_speed;
    let spawn_window = (spec.duration_s - transit).max(spec.duration_s * 0.5);
    let interval = spawn_window / spec.vehicles as f64;

    let mut pending: Vec<(i64, usize, f64)> = (0..spec.vehicles)
        .map(|i| {
            let t = (i as f64 + rng.random::<f64>()) * interval;
            let entry = rng.random::<f64>() * spec.road_length * ENTRY_SPAN;
            ((t / DT) as i64, rng.random_range(0..spec.lanes), entry)
        })
        .collect();
    pending.reverse();

    let change_prob = lanechange_per_min / 60.0 * DT;
    let drift_decay = (-DT / 10.0f64).exp();
    let drift_scale = (1.0 - drift_decay * drift_decay).sqrt() * spec.speed_drift * mean_speed;
    let mut active: Vec<Vehicle> = Vec::new();
    let mut next_id = 1i64;
    let mut records = Vec::new();

    for tick in 0..total_ticks {
        while let Some(&(spawn_tick, lane, entry)) = pending.last() {
            if spawn_tick > tick {
                break;
            }
            let blocked = active
                .iter()
                .any(|v| v.occupies(lane) && (v.y - entry).abs() < ENTRY_CLEARANCE);
            if blocked {
                break;
            }
            pending.pop();
            let desired = (mean_speed + speed_dist.sample(rng)).max(2.0);
            let entry_speed = active
                .iter()
                .filter(|v| v.occupies(lane) && v.y > entry)
                .min_by(|a, b| a.y.total_cmp(&b.y))
                .map_or(desired, |lead| lead.v.min(desired));
            active.push(Vehicle {
                id: next_id,
                y: entry,
                v: entry_speed,
                desired,
                drift: 0.0,
                lane,
                change: None,
            });
            next_id += 1;
        }

        let accels: Vec<f64> = active
            .iter()
            .map(|me| {
                let leader = active
                    .iter()
                    .filter(|o| o.id != me.id && o.y > me.y && (o.occupies(me.lane)))
                    .min_by(|a, b| a.y.total_cmp(&b.y))
                    .map(|o| (o.y - me.y - VEHICLE_LENGTH, o.v));
                idm_accel(me.v, (me.desired + me.drift).max(1.0), leader)
            })
            .collect();
        for (veh, a) in active.iter_mut().zip(accels) {
            veh.v = (veh.v + a * DT).max(0.0);
            veh.y += veh.v * DT;
            veh.drift = veh.drift * drift_decay + drift_scale * unit.sample(rng);
            if let Some(c) = &mut veh.change {
                c.elapsed += DT;
                if c.elapsed >= LANE_CHANGE_S {
                    veh.change = None;
                }
            }
        }

        for i in 0..active.len() {
            if active[i].change.is_some() || rng.random::<f64>() >= change_prob {
                continue;
            }
            let lane = active[i].lane;
            let mut options = Vec::with_capacity(2);
            if lane > 0 {
                options.push(lane - 1);
            }
            if lane + 1 < spec.lanes {
                options.push(lane + 1);
            }
            if options.is_empty() {
                continue;
            }
            let to = options[rng.random_range(0..options.len())];
            let y = active[i].y;
            let clear = active
                .iter()
                .enumerate()
                .all(|(j, o)| j == i || !o.occupies(to) || (o.y - y).abs() >= LANE_CHANGE_CLEARANCE);
            if clear {
                active[i].change = Some(LaneChange {
                    from: lane,
                    elapsed: 0.0,
                });
                active[i].lane = to;
            }
        }

        active.retain(|v| v.y <= spec.road_length);
        for veh in &active {
            let x = veh.lateral(spec.lane_width) + noise.sample(rng);
            let y = veh.y + noise.sample(rng);
            let lane_id = ((x / spec.lane_width).floor() as i64 + 1).clamp(1, spec.lanes as i64);
            records.push(TrajectoryRecord {
                vehicle_id: veh.id,
                frame_id: tick + 1,
                local_x: x,
                local_y: y,
                lane_id,
            });
        }
    }
    records.sort_by_key(|r| (r.vehicle_id, r.frame_id));
    records
}

/// Mean frame-to-frame displacement over consecutive ticks of each vehicle.
pub fn mean_step_displacement(records: &[TrajectoryRecord]) -> f64 {
    let (sum, count) = records
        .windows(2)
        .filter(|w| w[0].vehicle_id == w[1].vehicle_id && w[1].frame_id == w[0].frame_id + 1)
        .fold((0.0, 0usize), |(s, c), w| {
            let d = ((w[1].local_x - w[0].local_x).powi(2) + (w[1].local_y - w[0].local_y).powi(2)).sqrt();
            (s + d, c + 1)
        });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            vehicles: 40,
            duration_s: 90.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = synth_generate(&small(), 7).unwrap();
        let b = synth_generate(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(), 8).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn speed_offset_raises_target_displacement() {
        let spec = SynthSpec {
            speed_offset: 5.0,
            speed_drift: 0.1,
            ..small()
        };
        let d = synth_generate(&spec, 3).unwrap();
        let (s, t) = (mean_step_displacement(&d.source), mean_step_displacement(&d.target));
        assert!(t > s, "target {t} vs source {s}");
        // ≈ 0.5 m per tick of extra speed at 10 Hz.
        assert!(t - s > 0.3);
    }

    #[test]
    fn null_shift_is_statistically_matched() {
        let spec = SynthSpec {
            speed_offset: 0.0,
            lanechange_multiplier: 1.0,
            vehicles: 80,
            duration_s: 150.0,
            ..SynthSpec::default()
        };
        let d = synth_generate(&spec, 5).unwrap();
        let (s, t) = (mean_step_displacement(&d.source), mean_step_displacement(&d.target));
        assert!((s - t).abs() / s < 0.05, "source {s} target {t}");
        let ratio = d.source.len() as f64 / d.target.len() as f64;
        assert!((ratio - 1.0).abs() < 0.1, "record count ratio {ratio}");
    }

    #[test]
    fn tracks_are_contiguous_and_on_road() {
        let spec = small();
        let d = synth_generate(&spec, 11).unwrap();
        for w in d.source.windows(2) {
            if w[0].vehicle_id == w[1].vehicle_id {
                assert_eq!(w[1].frame_id, w[0].frame_id + 1);
            }
        }
        assert!(d
            .source
            .iter()
            .all(|r| (1..=spec.lanes as i64).contains(&r.lane_id) && r.local_y < spec.road_length + 1.0));
    }

    #[test]
    fn invalid_spec_is_config_error() {
        for spec in [
            SynthSpec { lanes: 0, ..small() },
            SynthSpec { mean_speed: -1.0, ..small() },
            SynthSpec { speed_offset: -20.0, ..small() },
            SynthSpec { noise_std: -0.1, ..small() },
        ] {
            assert!(matches!(synth_generate(&spec, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn spec_file_keys_parse() {
        let kv = KvConfig::parse("lanes = 4\nvehicles = 10\nduration_s = 60\nmean_speed = 12\nspeed_offset = 0\nlanechange_rate = 1\nnoise_std = 0.1\nseed = 3\n").unwrap();
        let mut spec = SynthSpec::default();
        spec.apply_all(&kv).unwrap();
        assert_eq!((spec.lanes, spec.vehicles, spec.seed), (4, 10, 3));
        assert!(spec.apply_all(&KvConfig::parse("bogus = 1").unwrap()).is_err());
    }
}

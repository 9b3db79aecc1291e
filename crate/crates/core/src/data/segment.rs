//! Cutting vehicle tracks into fixed 8 s windows and downsampling to 5 Hz.

use crate::data::records::TrajectoryRecord;

/// 8 s at 10 Hz.
pub const TICKS_PER_WINDOW: usize = 80;
pub const DOWNSAMPLE_FACTOR: usize = 2;
pub const FRAMES_PER_WINDOW: usize = TICKS_PER_WINDOW / DOWNSAMPLE_FACTOR;
/// 3 s of history at 5 Hz.
pub const HISTORY_FRAMES: usize = 15;
/// 5 s of future at 5 Hz.
pub const FUTURE_FRAMES: usize = 25;

/// One ego window: 40 frame ids at 5 Hz, frame `k` being tick `2k` of the
/// 80-tick segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawWindow {
    pub vehicle_id: i64,
    pub frame_ids: Vec<i64>,
}

impl RawWindow {
    pub fn history_frames(&self) -> &[i64] {
        &self.frame_ids[..HISTORY_FRAMES]
    }

    pub fn future_frames(&self) -> &[i64] {
        &self.frame_ids[HISTORY_FRAMES..]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentStats {
    pub runs: usize,
    /// Contiguous runs shorter than one window.
    pub short_runs: usize,
    /// Ticks left over after the last full window of each run.
    pub dropped_ticks: usize,
}

/// Splits each vehicle's contiguous tick runs into non-overlapping 80-tick
/// windows and keeps every second tick. `records` must be sorted by
/// `(vehicle_id, frame_id)`.
pub fn segment_and_downsample(records: &[TrajectoryRecord]) -> (Vec<RawWindow>, SegmentStats) {
    let mut windows = Vec::new();
    let mut stats = SegmentStats::default();
    let mut start = 0;
    while start < records.len() {
        let mut end = start + 1;
        while end < records.len()
            && records[end].vehicle_id == records[start].vehicle_id
            && records[end].frame_id == records[end - 1].frame_id + 1
        {
            end += 1;
        }
        let run = &records[start..end];
        stats.runs += 1;
        if run.len() < TICKS_PER_WINDOW {
            stats.short_runs += 1;
        }
        stats.dropped_ticks += run.len() % TICKS_PER_WINDOW;
        for chunk in run.chunks_exact(TICKS_PER_WINDOW) {
            windows.push(RawWindow {
                vehicle_id: chunk[0].vehicle_id,
                frame_ids: chunk
                    .iter()
                    .step_by(DOWNSAMPLE_FACTOR)
                    .map(|r| r.frame_id)
                    .collect(),
            });
        }
        start = end;
    }
    (windows, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(vehicle: i64, frames: impl IntoIterator<Item = i64>) -> Vec<TrajectoryRecord> {
        frames
            .into_iter()
            .map(|f| TrajectoryRecord {
                vehicle_id: vehicle,
                frame_id: f,
                local_x: 0.0,
                local_y: f as f64,
                lane_id: 1,
            })
            .collect()
    }

    #[test]
    fn eighty_ticks_give_one_window_of_forty() {
        let (w, _) = segment_and_downsample(&track(1, 100..180));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].frame_ids.len(), FRAMES_PER_WINDOW);
        assert_eq!(w[0].history_frames().len(), 15);
        assert_eq!(w[0].future_frames().len(), 25);
    }

    #[test]
    fn seventy_nine_ticks_give_nothing() {
        let (w, stats) = segment_and_downsample(&track(1, 0..79));
        assert!(w.is_empty());
        assert_eq!(stats.short_runs, 1);
    }

    #[test]
    fn one_sixty_ticks_give_two_windows() {
        let (w, _) = segment_and_downsample(&track(1, 0..160));
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].frame_ids[0], 80);
    }

    #[test]
    fn frame_k_is_tick_2k() {
        let (w, _) = segment_and_downsample(&track(3, 1000..1080));
        for (k, &f) in w[0].frame_ids.iter().enumerate() {
            assert_eq!(f, 1000 + 2 * k as i64);
        }
    }

    #[test]
    fn gaps_split_runs() {
        let mut recs = track(1, 0..70);
        recs.extend(track(1, 75..160));
        let (w, stats) = segment_and_downsample(&recs);
        assert_eq!(stats.runs, 2);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].frame_ids[0], 75);
    }

    #[test]
    fn vehicles_are_separate_runs() {
        let mut recs = track(1, 0..50);
        recs.extend(track(2, 50..130));
        let (w, _) = segment_and_downsample(&recs);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].vehicle_id, 2);
    }
}

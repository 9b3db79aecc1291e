//! Min-max scaling of metric coordinates into `[-1, 1]`.

use std::path::Path;

use crate::config::{parse_value, KvConfig};
use crate::error::{Error, Result};

/// Fraction of each axis span added as margin on both sides when fitting.
pub const SCALER_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaler {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Scaler {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite())
            && x_max > x_min
            && y_max > y_min;
        if !ok {
            return Err(Error::Config(format!(
                "degenerate scaler bounds x [{x_min}, {x_max}], y [{y_min}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            2.0 * (p[0] - self.x_min) / (self.x_max - self.x_min) - 1.0,
            2.0 * (p[1] - self.y_min) / (self.y_max - self.y_min) - 1.0,
        ]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] + 1.0) * 0.5 * (self.x_max - self.x_min) + self.x_min,
            (p[1] + 1.0) * 0.5 * (self.y_max - self.y_min) + self.y_min,
        ]
    }

    /// Half the span per axis: meters per normalized unit.
    pub fn half_span(&self) -> [f64; 2] {
        [(self.x_max - self.x_min) / 2.0, (self.y_max - self.y_min) / 2.0]
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.insert("x_min", format!("{:?}", self.x_min));
        kv.insert("x_max", format!("{:?}", self.x_max));
        kv.insert("y_min", format!("{:?}", self.y_min));
        kv.insert("y_max", format!("{:?}", self.y_max));
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let v = kv
                .get(k)
                .ok_or_else(|| Error::Config(format!("scaler file lacks `{k}`")))?;
            parse_value(k, v)
        };
        Self::new(get("x_min")?, get("x_max")?, get("y_min")?, get("y_max")?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv().to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvConfig::load(path)?)
    }
}

/// Fits per-axis bounds with a margin of 1% of the span on each side.
pub fn fit_scaler(coords: impl IntoIterator<Item = [f64; 2]>) -> Result<Scaler> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for p in coords {
        any = true;
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !any {
        return Err(Error::Config("cannot fit a scaler on an empty coordinate set".into()));
    }
    if lo[0] >= hi[0] || lo[1] >= hi[1] {
        return Err(Error::Config(format!(
            "degenerate coordinate range x [{}, {}], y [{}, {}]",
            lo[0], hi[0], lo[1], hi[1]
        )));
    }
    let mx = SCALER_MARGIN * (hi[0] - lo[0]);
    let my = SCALER_MARGIN * (hi[1] - lo[1]);
    Scaler::new(lo[0] - mx, hi[0] + mx, lo[1] - my, hi[1] + my)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn margin_is_one_percent_of_span() {
        let s = fit_scaler([[0.0, 5.0], [100.0, 15.0]]).unwrap();
        assert_eq!((s.x_min, s.x_max), (-1.0, 101.0));
        assert!((s.y_min - 4.9).abs() < 1e-12 && (s.y_max - 15.1).abs() < 1e-12);
    }

    #[test]
    fn midpoint_maps_to_zero() {
        let s = fit_scaler([[0.0, 0.0], [100.0, 100.0]]).unwrap();
        assert!(s.normalize([50.0, 50.0])[0].abs() < 1e-15);
    }

    #[test]
    fn degenerate_axis_is_config_error() {
        assert!(matches!(
            fit_scaler([[1.0, 0.0], [1.0, 5.0]]),
            Err(Error::Config(_))
        ));
        assert!(fit_scaler(std::iter::empty()).is_err());
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let s = fit_scaler([[0.1, -3.3], [17.7, 421.9]]).unwrap();
        let back = Scaler::from_kv(&KvConfig::parse(&s.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(
            x in -50.0f64..50.0, y in 0.0f64..600.0,
            lo in -100.0f64..0.0, w in 1.0f64..200.0, lo_y in -10.0f64..0.0, h in 10.0f64..700.0,
        ) {
            let s = Scaler::new(lo, lo + w, lo_y, lo_y + h).unwrap();
            let back = s.denormalize(s.normalize([x, y]));
            prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
        }
    }
}

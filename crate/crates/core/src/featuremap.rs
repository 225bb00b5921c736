//! The 22 contextual raw feature maps and their construction from kinematic
//! trajectories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ms_to_mph, Daylight, KinematicPoint, KinematicTrajectory, RoadType};

pub const NUM_SPECS: usize = 22;
pub const DEFAULT_BINS: usize = 20;

/// Feature map identifier T1..T22.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecId(u8);

impl SpecId {
    pub fn new(n: u8) -> Result<Self> {
        if (1..=NUM_SPECS as u8).contains(&n) {
            Ok(SpecId(n))
        } else {
            Err(Error::ConfigInvalid(format!("no feature map T{n}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = SpecId> {
        (1..=NUM_SPECS as u8).map(SpecId)
    }
}

impl fmt::Display for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for SpecId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .strip_prefix('T')
            .and_then(|d| d.parse::<u8>().ok())
            .ok_or_else(|| Error::ConfigInvalid(format!("bad feature map id {s:?}")))?;
        SpecId::new(n)
    }
}

impl Serialize for SpecId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpecId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecGroup {
    G1,
    G2,
    G3,
    G4,
    G5,
    G6,
}

impl SpecGroup {
    pub const ALL: [SpecGroup; 6] = [
        SpecGroup::G1,
        SpecGroup::G2,
        SpecGroup::G3,
        SpecGroup::G4,
        SpecGroup::G5,
        SpecGroup::G6,
    ];
}

impl fmt::Display for SpecGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for SpecGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SpecGroup::ALL
            .into_iter()
            .find(|g| g.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown feature group {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    /// mph
    Speed,
    /// m/s²
    Acceleration,
    /// degrees
    AngleChange,
    /// radians per hour
    AngularSpeed,
}

impl Attribute {
    pub fn value(self, k: &KinematicPoint) -> Option<f64> {
        match self {
            Attribute::Speed => Some(ms_to_mph(k.speed)),
            Attribute::Acceleration => k.accel,
            Attribute::AngleChange => k.angle_change,
            Attribute::AngularSpeed => k.angular_speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextFilter {
    None,
    Urban,
    Highway,
    Day,
    Night,
    Turn,
}

impl ContextFilter {
    fn check_annotated(self, kt: &KinematicTrajectory, spec: SpecId) -> Result<()> {
        let (applied, context) = match self {
            ContextFilter::None => return Ok(()),
            ContextFilter::Urban | ContextFilter::Highway => (kt.annotations.road_type, "road type"),
            ContextFilter::Day | ContextFilter::Night => (kt.annotations.daylight, "daylight"),
            ContextFilter::Turn => (kt.annotations.turns, "turn"),
        };
        if applied {
            Ok(())
        } else {
            Err(Error::MissingContext {
                spec: spec.to_string(),
                context,
            })
        }
    }

    pub fn accepts(self, daylight: Daylight, k: &KinematicPoint) -> bool {
        match self {
            ContextFilter::None => true,
            ContextFilter::Urban => k.road_type == RoadType::Urban,
            ContextFilter::Highway => k.road_type == RoadType::Highway,
            ContextFilter::Day => daylight == Daylight::Day,
            ContextFilter::Night => daylight == Daylight::Night,
            ContextFilter::Turn => k.in_turn,
        }
    }
}

/// Closed numeric interval split into equal-width bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub low: f64,
    pub high: f64,
}

impl AxisRange {
    pub const fn new(low: f64, high: f64) -> Self {
        AxisRange { low, high }
    }

    /// Lower edge of bin `i`; `edge(bins)` is the upper bound.
    pub fn edge(&self, i: usize, bins: usize) -> f64 {
        self.low + (self.high - self.low) * (i as f64) / (bins as f64)
    }

    /// Bin index of `v`, or `None` outside [low, high]. The upper bound lands in the last bin.
    pub fn bin(&self, v: f64, bins: usize) -> Option<usize> {
        if !(v >= self.low && v <= self.high) {
            return None;
        }
        let raw = ((v - self.low) / (self.high - self.low) * bins as f64).floor();
        let mut i = (raw.max(0.0) as usize).min(bins - 1);
        // settle floating disagreements against the canonical edges
        while i > 0 && v < self.edge(i, bins) {
            i -= 1;
        }
        while i + 1 < bins && v >= self.edge(i + 1, bins) {
            i += 1;
        }
        Some(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub id: SpecId,
    pub y_attr: Attribute,
    pub x_attr: Attribute,
    pub y_range: AxisRange,
    pub x_range: AxisRange,
    pub y_bins: usize,
    pub x_bins: usize,
    pub context: ContextFilter,
    pub group: SpecGroup,
}

impl FeatureMapSpec {
    pub fn cells(&self) -> usize {
        self.y_bins * self.x_bins
    }

    /// Same spec with a different bin resolution.
    pub fn with_bins(mut self, y_bins: usize, x_bins: usize) -> Result<Self> {
        if y_bins < 2 || x_bins < 2 {
            return Err(Error::ConfigInvalid(format!(
                "feature maps need at least 2 bins per axis, got {y_bins}x{x_bins}"
            )));
        }
        self.y_bins = y_bins;
        self.x_bins = x_bins;
        Ok(self)
    }
}

const SPEED_LOW: AxisRange = AxisRange::new(5.0, 25.0);
const SPEED_MID: AxisRange = AxisRange::new(25.0, 45.0);
const SPEED_HIGH: AxisRange = AxisRange::new(45.0, 80.0);

/// The 22 raw feature map definitions at the default 20×20 resolution.
pub fn builtin_specs() -> Vec<FeatureMapSpec> {
    use Attribute::*;
    use ContextFilter as C;
    use SpecGroup::*;
    let r = AxisRange::new;
    #[rustfmt::skip]
    let rows: [(SpecGroup, Attribute, Attribute, ContextFilter, AxisRange, AxisRange); NUM_SPECS] = [
        (G1, Speed, Acceleration, C::None, SPEED_LOW, r(-2.5, 2.5)),
        (G1, Speed, Acceleration, C::None, SPEED_MID, r(-2.0, 2.0)),
        (G1, Speed, Acceleration, C::None, SPEED_HIGH, r(-1.0, 1.0)),
        (G2, Speed, Acceleration, C::Urban, SPEED_LOW, r(-2.5, 2.5)),
        (G2, Speed, Acceleration, C::Urban, SPEED_MID, r(-2.0, 2.0)),
        (G2, Speed, Acceleration, C::Highway, SPEED_LOW, r(-2.5, 2.5)),
        (G2, Speed, Acceleration, C::Highway, SPEED_MID, r(-2.0, 2.0)),
        (G2, Speed, Acceleration, C::Highway, SPEED_HIGH, r(-1.0, 1.0)),
        (G3, Speed, Acceleration, C::Day, SPEED_LOW, r(-2.5, 2.5)),
        (G3, Speed, Acceleration, C::Day, SPEED_MID, r(-2.0, 2.0)),
        (G3, Speed, Acceleration, C::Day, SPEED_HIGH, r(-1.0, 1.0)),
        (G3, Speed, Acceleration, C::Night, SPEED_LOW, r(-2.5, 2.5)),
        (G3, Speed, Acceleration, C::Night, SPEED_MID, r(-2.0, 2.0)),
        (G3, Speed, Acceleration, C::Night, SPEED_HIGH, r(-1.0, 1.0)),
        (G4, Speed, Acceleration, C::Turn, SPEED_LOW, r(-3.0, 3.0)),
        (G4, Speed, Acceleration, C::Turn, SPEED_MID, r(-3.5, 3.5)),
        (G4, Speed, Acceleration, C::Turn, SPEED_HIGH, r(-2.0, 2.0)),
        (G5, Speed, AngleChange, C::Turn, SPEED_LOW, r(0.0, 20.0)),
        (G5, Speed, AngleChange, C::Turn, SPEED_MID, r(0.0, 6.0)),
        (G5, Speed, AngleChange, C::Turn, SPEED_HIGH, r(0.0, 4.0)),
        (G6, Acceleration, AngleChange, C::Turn, r(-2.0, 2.0), r(0.0, 7.0)),
        (G6, AngularSpeed, AngleChange, C::Turn, r(0.0, 0.025), r(0.0, 15.0)),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(group, y_attr, x_attr, context, y_range, x_range))| FeatureMapSpec {
            id: SpecId(i as u8 + 1),
            y_attr,
            x_attr,
            y_range,
            x_range,
            y_bins: DEFAULT_BINS,
            x_bins: DEFAULT_BINS,
            context,
            group,
        })
        .collect()
}

/// Built-in specs at a custom resolution.
pub fn specs_with_bins(y_bins: usize, x_bins: usize) -> Result<Vec<FeatureMapSpec>> {
    builtin_specs()
        .into_iter()
        .map(|s| s.with_bins(y_bins, x_bins))
        .collect()
}

/// Max-normalized 2-D frequency matrix, row-major with y as the row axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub spec_id: SpecId,
    pub y_bins: usize,
    pub x_bins: usize,
    pub cells: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureMap {
    pub fn zeros(spec_id: SpecId, y_bins: usize, x_bins: usize) -> Self {
        FeatureMap {
            spec_id,
            y_bins,
            x_bins,
            cells: vec![0.0; y_bins * x_bins],
            sample_count: 0,
        }
    }

    pub fn cell(&self, y: usize, x: usize) -> f64 {
        self.cells[y * self.x_bins + x]
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count == 0
    }

    pub fn from_counts(spec_id: SpecId, y_bins: usize, x_bins: usize, counts: &[u32]) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        let sample_count = counts.iter().map(|&c| c as usize).sum();
        let cells = if max == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| f64::from(c) / f64::from(max)).collect()
        };
        FeatureMap {
            spec_id,
            y_bins,
            x_bins,
            cells,
            sample_count,
        }
    }
}

pub fn build_raw_feature_map(kt: &KinematicTrajectory, spec: &FeatureMapSpec) -> Result<FeatureMap> {
    spec.context.check_annotated(kt, spec.id)?;
    let mut counts = vec![0u32; spec.cells()];
    for k in &kt.kpoints {
        if !spec.context.accepts(kt.daylight, k) {
            continue;
        }
        let (Some(yv), Some(xv)) = (spec.y_attr.value(k), spec.x_attr.value(k)) else {
            continue;
        };
        let (Some(yi), Some(xi)) = (
            spec.y_range.bin(yv, spec.y_bins),
            spec.x_range.bin(xv, spec.x_bins),
        ) else {
            continue;
        };
        counts[yi * spec.x_bins + xi] += 1;
    }
    Ok(FeatureMap::from_counts(spec.id, spec.y_bins, spec.x_bins, &counts))
}

/// Element-wise mean of maps sharing one spec.
pub fn average_feature_map(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps.first().ok_or(Error::EmptyInput("no feature maps to average"))?;
    let mut acc = vec![0.0; first.cells.len()];
    let mut sample_count = 0;
    for m in maps {
        if m.spec_id != first.spec_id || m.cells.len() != first.cells.len() {
            return Err(Error::SpecMismatch {
                expected: first.spec_id.to_string(),
                found: m.spec_id.to_string(),
            });
        }
        for (a, c) in acc.iter_mut().zip(&m.cells) {
            *a += c;
        }
        sample_count += m.sample_count;
    }
    let n = maps.len() as f64;
    Ok(FeatureMap {
        spec_id: first.spec_id,
        y_bins: first.y_bins,
        x_bins: first.x_bins,
        cells: acc.into_iter().map(|a| a / n).collect(),
        sample_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{mph_to_ms, Annotations, GeoPoint};

    fn kpoint(speed_mph: f64, accel: f64) -> KinematicPoint {
        KinematicPoint {
            t: 0,
            speed: mph_to_ms(speed_mph),
            heading: 0.0,
            pos: GeoPoint { lat: 0.0, lng: 0.0 },
            accel: Some(accel),
            angle_change: None,
            angular_speed: None,
            road_type: RoadType::Unknown,
            in_turn: false,
        }
    }

    fn kt(kpoints: Vec<KinematicPoint>) -> KinematicTrajectory {
        KinematicTrajectory {
            trajectory_id: "t".into(),
            driver_id: "d".into(),
            start_time: 0,
            daylight: Daylight::Unknown,
            kpoints,
            annotations: Annotations::default(),
        }
    }

    fn spec(n: u8) -> FeatureMapSpec {
        builtin_specs()[n as usize - 1].clone()
    }

    #[test]
    fn table_rows() {
        let specs = builtin_specs();
        assert_eq!(specs.len(), 22);
        let t3 = &specs[2];
        assert_eq!((t3.y_attr, t3.x_attr), (Attribute::Speed, Attribute::Acceleration));
        assert_eq!(t3.context, ContextFilter::None);
        assert_eq!(t3.y_range, AxisRange::new(45.0, 80.0));
        assert_eq!(t3.x_range, AxisRange::new(-1.0, 1.0));
        let t12 = &specs[11];
        assert_eq!(t12.context, ContextFilter::Night);
        assert_eq!(t12.y_range, AxisRange::new(5.0, 25.0));
        let t22 = &specs[21];
        assert_eq!((t22.y_attr, t22.x_attr), (Attribute::AngularSpeed, Attribute::AngleChange));
        assert_eq!(t22.y_range, AxisRange::new(0.0, 0.025));
        assert_eq!(t22.x_range, AxisRange::new(0.0, 15.0));
        assert_eq!(t22.context, ContextFilter::Turn);
        assert_eq!(specs[17].x_range, AxisRange::new(0.0, 20.0));
        for s in &specs {
            assert!(s.y_range.low < s.y_range.high && s.x_range.low < s.x_range.high);
            assert_eq!((s.y_bins, s.x_bins), (20, 20));
        }
    }

    #[test]
    fn group_sizes() {
        let specs = builtin_specs();
        let count = |g| specs.iter().filter(|s| s.group == g).count();
        use SpecGroup::*;
        assert_eq!(
            [count(G1), count(G2), count(G3), count(G4), count(G5), count(G6)],
            [3, 5, 6, 3, 3, 2]
        );
    }

    #[test]
    fn spec_id_parsing() {
        assert_eq!("T7".parse::<SpecId>().unwrap().number(), 7);
        assert!("T0".parse::<SpecId>().is_err());
        assert!("T23".parse::<SpecId>().is_err());
        assert!("7".parse::<SpecId>().is_err());
        assert_eq!("g3".parse::<SpecGroup>().unwrap(), SpecGroup::G3);
        let json = serde_json::to_string(&SpecId::new(12).unwrap()).unwrap();
        assert_eq!(json, "\"T12\"");
    }

    #[test]
    fn binning_edges() {
        let r = AxisRange::new(5.0, 25.0);
        assert_eq!(r.bin(5.0, 20), Some(0));
        assert_eq!(r.bin(25.0, 20), Some(19));
        assert_eq!(r.bin(6.0, 20), Some(1));
        assert_eq!(r.bin(4.999, 20), None);
        assert_eq!(r.bin(25.0001, 20), None);
        assert_eq!(r.bin(f64::NAN, 20), None);
    }

    #[test]
    fn empty_map_is_all_zero() {
        let m = build_raw_feature_map(&kt(vec![kpoint(100.0, 0.1)]), &spec(1)).unwrap();
        assert_eq!(m.sample_count, 0);
        assert!(m.cells.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn single_cell() {
        let m = build_raw_feature_map(&kt(vec![kpoint(15.5, 0.1); 3]), &spec(1)).unwrap();
        assert_eq!(m.sample_count, 3);
        // 15.5 mph → y bin 10; 0.1 m/s² → x bin 10
        assert_eq!(m.cell(10, 10), 1.0);
        assert_eq!(m.cells.iter().filter(|&&c| c != 0.0).count(), 1);
    }

    #[test]
    fn two_to_one_normalization() {
        let m = build_raw_feature_map(
            &kt(vec![kpoint(15.5, 0.1), kpoint(15.5, 0.1), kpoint(6.5, -2.4)]),
            &spec(1),
        )
        .unwrap();
        assert_eq!(m.cell(10, 10), 1.0);
        assert_eq!(m.cell(1, 0), 0.5);
        assert_eq!(m.sample_count, 3);
    }

    #[test]
    fn missing_context_is_an_error() {
        let err = build_raw_feature_map(&kt(vec![kpoint(15.5, 0.1)]), &spec(4)).unwrap_err();
        assert!(matches!(err, Error::MissingContext { .. }));
        assert!(build_raw_feature_map(&kt(vec![kpoint(15.5, 0.1)]), &spec(12)).is_err());
        assert!(build_raw_feature_map(&kt(vec![kpoint(15.5, 0.1)]), &spec(15)).is_err());
    }

    #[test]
    fn averaging() {
        let a = build_raw_feature_map(&kt(vec![kpoint(15.5, 0.1); 3]), &spec(1)).unwrap();
        let b = build_raw_feature_map(
            &kt(vec![kpoint(15.5, 0.1), kpoint(15.5, 0.1), kpoint(6.5, -2.4)]),
            &spec(1),
        )
        .unwrap();
        assert_eq!(average_feature_map(std::slice::from_ref(&a)).unwrap(), a);
        let avg = average_feature_map(&[a, b]).unwrap();
        assert_eq!(avg.cell(10, 10), 1.0);
        assert_eq!(avg.cell(1, 0), 0.25);
        assert_eq!(avg.sample_count, 6);

        let zeros = FeatureMap::zeros(SpecId(1), 2, 2);
        let ones = FeatureMap { cells: vec![1.0; 4], ..zeros.clone() };
        let half = average_feature_map(&[zeros, ones]).unwrap();
        assert!(half.cells.iter().all(|&c| c == 0.5));

        assert!(matches!(average_feature_map(&[]), Err(Error::EmptyInput(_))));
        let other = FeatureMap::zeros(SpecId(2), 2, 2);
        let mine = FeatureMap::zeros(SpecId(1), 2, 2);
        assert!(matches!(
            average_feature_map(&[mine, other]),
            Err(Error::SpecMismatch { .. })
        ));
    }
}

//! Context annotation: road type from a speed-limit grid, daylight from civil
//! twilight, and turn segments from heading changes.

mod solar;
mod turns;

pub use solar::{civil_twilight, PolarFlag, TwilightWindow};
pub use turns::{annotate_turns, detect_turns, TurnParams, TurnSegment};

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Daylight, GeoPoint, KinematicTrajectory, RoadType};

/// Upper speed limit (mph) of the urban class; limits at or above it are highways.
pub const URBAN_MAX_MPH: f64 = 50.0;
pub const HIGHWAY_MAX_MPH: f64 = 90.0;

/// Speed limits keyed by position rounded to `cell_size` degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedLimitGrid {
    cell_size: f64,
    entries: BTreeMap<(i64, i64), f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeedLimitRow {
    lat: f64,
    lng: f64,
    limit_mph: f64,
}

impl SpeedLimitGrid {
    pub fn new(cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "speed-limit cell size must be positive, got {cell_size}"
            )));
        }
        Ok(SpeedLimitGrid {
            cell_size,
            entries: BTreeMap::new(),
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key(&self, lat: f64, lng: f64) -> (i64, i64) {
        (
            (lat / self.cell_size).round() as i64,
            (lng / self.cell_size).round() as i64,
        )
    }

    pub fn insert(&mut self, lat: f64, lng: f64, limit_mph: f64) -> Result<()> {
        if !(limit_mph > 0.0 && limit_mph <= HIGHWAY_MAX_MPH) {
            return Err(Error::ConfigInvalid(format!(
                "speed limit {limit_mph} mph outside (0, {HIGHWAY_MAX_MPH}]"
            )));
        }
        let key = self.key(lat, lng);
        self.entries.insert(key, limit_mph);
        Ok(())
    }

    /// Exact-cell lookup after rounding; `None` when the cell is unknown.
    pub fn speed_limit_at(&self, p: GeoPoint) -> Option<f64> {
        self.entries.get(&self.key(p.lat, p.lng)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.entries.iter().map(|(&(la, ln), &limit)| {
            (la as f64 * self.cell_size, ln as f64 * self.cell_size, limit)
        })
    }

    /// Reads the `lat,lng,limit_mph` CSV format.
    pub fn read_csv(path: &Path, cell_size: f64) -> Result<Self> {
        let mut grid = SpeedLimitGrid::new(cell_size)?;
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
        for row in rdr.deserialize::<SpeedLimitRow>() {
            let row = row.map_err(|e| Error::parse(path, e))?;
            grid.insert(row.lat, row.lng, row.limit_mph)
                .map_err(|e| Error::parse(path, e))?;
        }
        Ok(grid)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let decimals = (-self.cell_size.log10()).ceil().max(0.0) as usize + 1;
        let mut out = String::from("lat,lng,limit_mph\n");
        for (lat, lng, limit) in self.iter() {
            out.push_str(&format!("{lat:.decimals$},{lng:.decimals$},{limit}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Urban below 50 mph, highway from 50 through 90 mph.
pub fn classify_limit(limit_mph: Option<f64>) -> RoadType {
    match limit_mph {
        Some(l) if l < URBAN_MAX_MPH => RoadType::Urban,
        Some(l) if l <= HIGHWAY_MAX_MPH => RoadType::Highway,
        _ => RoadType::Unknown,
    }
}

pub fn annotate_road_type(mut kt: KinematicTrajectory, grid: &SpeedLimitGrid) -> KinematicTrajectory {
    for k in &mut kt.kpoints {
        k.road_type = classify_limit(grid.speed_limit_at(k.pos));
    }
    kt.annotations.road_type = true;
    kt
}

/// Local civil date of an epoch instant under a fixed UTC offset.
pub fn local_date(t: i64, utc_offset_minutes: i32) -> NaiveDate {
    let local = t + i64::from(utc_offset_minutes) * 60;
    DateTime::from_timestamp(local.div_euclid(86_400) * 86_400, 0)
        .expect("timestamp in chrono range")
        .date_naive()
}

/// Labels the whole trajectory Day or Night from its start time.
pub fn annotate_daylight(
    mut kt: KinematicTrajectory,
    pos: GeoPoint,
    utc_offset_minutes: i32,
) -> KinematicTrajectory {
    let start = kt.start_time;
    let window = civil_twilight(local_date(start, utc_offset_minutes), pos, utc_offset_minutes);
    kt.daylight = if window.contains(start) {
        Daylight::Day
    } else {
        Daylight::Night
    };
    kt.annotations.daylight = true;
    kt
}

/// Runs all three annotators with the trajectory's first fix as the daylight position.
pub fn annotate_all(
    kt: KinematicTrajectory,
    grid: &SpeedLimitGrid,
    utc_offset_minutes: i32,
    turns: &TurnParams,
) -> KinematicTrajectory {
    let pos = kt.kpoints.first().map(|k| k.pos);
    let kt = annotate_road_type(kt, grid);
    let kt = match pos {
        Some(pos) => annotate_daylight(kt, pos, utc_offset_minutes),
        None => kt,
    };
    annotate_turns(kt, turns).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{derive_kinematics, Trajectory, TrajectoryPoint};
    use proptest::prelude::*;

    fn gp(lat: f64, lng: f64) -> GeoPoint {
        GeoPoint { lat, lng }
    }

    #[test]
    fn speed_limit_lookup() {
        let grid = SpeedLimitGrid::new(0.001).unwrap();
        assert_eq!(grid.speed_limit_at(gp(40.0, -83.0)), None);

        let mut grid = SpeedLimitGrid::new(0.001).unwrap();
        grid.insert(40.000, -83.000, 35.0).unwrap();
        assert_eq!(grid.speed_limit_at(gp(40.0002, -83.0001)), Some(35.0));

        let mut grid = SpeedLimitGrid::new(0.001).unwrap();
        grid.insert(40.000, -83.000, 65.0).unwrap();
        assert_eq!(grid.speed_limit_at(gp(41.0, -83.0)), None);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(SpeedLimitGrid::new(0.0).is_err());
        let mut grid = SpeedLimitGrid::new(0.001).unwrap();
        assert!(grid.insert(0.0, 0.0, 0.0).is_err());
        assert!(grid.insert(0.0, 0.0, 95.0).is_err());
    }

    #[test]
    fn grid_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("limits.csv");
        let mut grid = SpeedLimitGrid::new(0.001).unwrap();
        grid.insert(40.001, -83.002, 35.0).unwrap();
        grid.insert(39.999, -82.5, 65.0).unwrap();
        grid.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("lat,lng,limit_mph\n"));
        assert_eq!(SpeedLimitGrid::read_csv(&path, 0.001).unwrap(), grid);
    }

    #[test]
    fn road_type_classes() {
        assert_eq!(classify_limit(Some(35.0)), RoadType::Urban);
        assert_eq!(classify_limit(Some(65.0)), RoadType::Highway);
        assert_eq!(classify_limit(Some(50.0)), RoadType::Highway);
        assert_eq!(classify_limit(Some(49.999)), RoadType::Urban);
        assert_eq!(classify_limit(None), RoadType::Unknown);
    }

    fn kt_at(t0: i64, lat: f64, lng: f64) -> KinematicTrajectory {
        let pts = (0..3)
            .map(|i| TrajectoryPoint {
                t: t0 + i,
                speed: 10.0,
                heading: 0.0,
                pos: gp(lat + i as f64 * 1e-4, lng),
            })
            .collect();
        derive_kinematics(&Trajectory::new("t", "d", pts).unwrap()).unwrap()
    }

    #[test]
    fn daylight_at_noon_and_midnight() {
        // 2019-03-20 00:00 UTC
        let midnight = 1_553_040_000;
        let day = annotate_daylight(kt_at(midnight + 12 * 3600, 0.0, 0.0), gp(0.0, 0.0), 0);
        assert_eq!(day.daylight, Daylight::Day);
        assert!(day.annotations.daylight);
        let night = annotate_daylight(kt_at(midnight, 0.0, 0.0), gp(0.0, 0.0), 0);
        assert_eq!(night.daylight, Daylight::Night);
    }

    #[test]
    fn daylight_dawn_boundary() {
        let date = NaiveDate::from_ymd_opt(2019, 3, 20).unwrap();
        let w = civil_twilight(date, gp(0.0, 0.0), 0);
        let before = annotate_daylight(kt_at(w.civil_dawn - 60, 0.0, 0.0), gp(0.0, 0.0), 0);
        assert_eq!(before.daylight, Daylight::Night);
        let at = annotate_daylight(kt_at(w.civil_dawn, 0.0, 0.0), gp(0.0, 0.0), 0);
        assert_eq!(at.daylight, Daylight::Day);
    }

    #[test]
    fn local_date_respects_offset() {
        // 2019-06-01 03:00 UTC is still May 31 at UTC-5
        let t = 1_559_358_000;
        assert_eq!(local_date(t, 0), NaiveDate::from_ymd_opt(2019, 6, 1).unwrap());
        assert_eq!(local_date(t, -300), NaiveDate::from_ymd_opt(2019, 5, 31).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn road_type_partition(limits in proptest::collection::vec(proptest::option::of(1.0..=90.0f64), 1..40)) {
            let mut grid = SpeedLimitGrid::new(0.001).unwrap();
            let pts: Vec<_> = limits.iter().enumerate().map(|(i, _)| TrajectoryPoint {
                t: i as i64, speed: 5.0, heading: 0.0, pos: gp(10.0 + i as f64 * 0.01, 20.0),
            }).chain(std::iter::once(TrajectoryPoint {
                t: limits.len() as i64, speed: 5.0, heading: 0.0, pos: gp(9.0, 20.0),
            })).collect();
            for (i, l) in limits.iter().enumerate() {
                if let Some(l) = l {
                    grid.insert(10.0 + (i + 1) as f64 * 0.01, 20.0, *l).unwrap();
                }
            }
            let kt = derive_kinematics(&Trajectory::new("t", "d", pts).unwrap()).unwrap();
            let kt = annotate_road_type(kt, &grid);
            for k in &kt.kpoints {
                match grid.speed_limit_at(k.pos) {
                    Some(l) if l < 50.0 => prop_assert_eq!(k.road_type, RoadType::Urban),
                    Some(_) => prop_assert_eq!(k.road_type, RoadType::Highway),
                    None => prop_assert_eq!(k.road_type, RoadType::Unknown),
                }
            }
        }
    }
}

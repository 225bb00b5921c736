//! Deterministic synthetic driver populations.
//!
//! Drivers travel a Manhattan street grid with quarter-arc corners. A simple
//! speed controller tracks `limit + bias`, brakes ahead of corners and takes
//! them at a lateral-acceleration-limited speed scaled by the driver's turn
//! aggressiveness. Samples carry GPS and heading noise.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohorts::{write_records, DriverRecord};
use crate::context::SpeedLimitGrid;
use crate::error::{Error, Result};
use crate::trajectory::{mph_to_ms, write_trajectories_csv, GeoPoint, Trajectory, TrajectoryPoint, EARTH_RADIUS_M};

pub const ORIGIN_LAT: f64 = 40.0;
pub const ORIGIN_LNG: f64 = -83.0;
pub const UTC_OFFSET_MINUTES: i32 = -300;
pub const BLOCK_M: f64 = 400.0;
/// Streets are numbered 0..=STREETS on both axes.
pub const STREETS: i64 = 40;
pub const SPEED_LIMIT_CELL: f64 = 0.001;

/// Records are drawn from a gamma-Poisson mixture with this shape.
const RECORD_SHAPE: f64 = 4.0;
const ACCIDENT_SHARE: f64 = 0.3;
const YEAR_2019_UTC: i64 = 1_546_300_800;
const SUBSTEPS: usize = 10;
const LATERAL_ACCEL: f64 = 1.8;
const CONTROLLER_GAIN: f64 = 0.5;
/// Seconds of unconstrained driving before a sample counts as cruising.
const SETTLE_S: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Archetype {
    Safe,
    Risky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub driver_id: String,
    pub archetype: Archetype,
    pub planted_risk: f64,
    pub speeding_bias_mph: f64,
    /// m/s²
    pub accel_sigma: f64,
    pub turn_speed_factor: f64,
    pub night_trip_fraction: f64,
    pub max_accel: f64,
    pub brake_decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub n_reference: usize,
    pub n_modeling: usize,
    pub n_heldout: usize,
    pub trajectories_per_driver: usize,
    pub points_per_trajectory: usize,
    pub sampling_hz: f64,
    pub risky_fraction: f64,
    pub risky_speeding_bias_mph: f64,
    pub record_years: u32,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_reference: 100,
            n_modeling: 100,
            n_heldout: 30,
            trajectories_per_driver: 100,
            points_per_trajectory: 300,
            sampling_hz: 1.0,
            risky_fraction: 0.5,
            risky_speeding_bias_mph: 12.0,
            record_years: 5,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n_reference == 0 || self.n_modeling == 0 || self.n_heldout == 0 {
            return bad("driver counts must be positive".into());
        }
        if self.n_reference < 2 {
            return bad("the reference set needs at least 2 drivers".into());
        }
        if self.trajectories_per_driver == 0 {
            return bad("trajectories_per_driver must be positive".into());
        }
        if self.points_per_trajectory < 3 {
            return bad(format!(
                "points_per_trajectory must be at least 3, got {}",
                self.points_per_trajectory
            ));
        }
        self.sample_period()?;
        if !(0.0..=1.0).contains(&self.risky_fraction) {
            return bad(format!("risky_fraction must be in [0, 1], got {}", self.risky_fraction));
        }
        if !(self.risky_speeding_bias_mph >= 2.0 && self.risky_speeding_bias_mph <= 18.0) {
            return bad(format!(
                "risky_speeding_bias_mph must be in [2, 18], got {}",
                self.risky_speeding_bias_mph
            ));
        }
        if self.record_years == 0 {
            return bad("record_years must be positive".into());
        }
        Ok(())
    }

    /// Whole seconds between samples; timestamps are integral.
    pub fn sample_period(&self) -> Result<i64> {
        let period = 1.0 / self.sampling_hz;
        if !(self.sampling_hz > 0.0) || (period - period.round()).abs() > 1e-9 || period.round() < 1.0 {
            return Err(Error::ConfigInvalid(format!(
                "sampling_hz must be 1/n for a whole number n, got {}",
                self.sampling_hz
            )));
        }
        Ok(period.round() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverSet {
    Reference,
    Modeling,
    Heldout,
}

impl DriverSet {
    pub const ALL: [DriverSet; 3] = [DriverSet::Reference, DriverSet::Modeling, DriverSet::Heldout];

    pub fn prefix(self) -> &'static str {
        match self {
            DriverSet::Reference => "ref",
            DriverSet::Modeling => "mod",
            DriverSet::Heldout => "hold",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            DriverSet::Reference => "reference.csv",
            DriverSet::Modeling => "modeling.csv",
            DriverSet::Heldout => "heldout.csv",
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for anything keyed by name under a master seed.
pub fn derive_seed(master: u64, key: &str) -> u64 {
    splitmix(master ^ fnv1a(key))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RoadClass {
    Local,
    Arterial,
    Highway,
}

impl RoadClass {
    fn corner_radius(self) -> f64 {
        match self {
            RoadClass::Local => 12.0,
            RoadClass::Arterial => 40.0,
            RoadClass::Highway => 150.0,
        }
    }
}

/// Posted limit of street `idx`, identical for both axes.
pub fn street_limit_mph(idx: i64) -> f64 {
    match idx.rem_euclid(5) {
        0 => [55.0, 65.0, 70.0][(idx / 5).rem_euclid(3) as usize],
        2 => 45.0,
        _ if idx % 2 == 1 => 25.0,
        _ => 35.0,
    }
}

fn street_class(idx: i64) -> RoadClass {
    match street_limit_mph(idx) {
        l if l >= 50.0 => RoadClass::Highway,
        l if l >= 45.0 => RoadClass::Arterial,
        _ => RoadClass::Local,
    }
}

fn meters_per_deg_lat() -> f64 {
    EARTH_RADIUS_M * PI / 180.0
}

fn meters_per_deg_lng() -> f64 {
    meters_per_deg_lat() * ORIGIN_LAT.to_radians().cos()
}

/// Local metric plane (x east, y north) to geographic coordinates.
pub fn to_geo(x: f64, y: f64) -> GeoPoint {
    GeoPoint {
        lat: ORIGIN_LAT + y / meters_per_deg_lat(),
        lng: ORIGIN_LNG + x / meters_per_deg_lng(),
    }
}

fn from_geo(p: GeoPoint) -> (f64, f64) {
    (
        (p.lng - ORIGIN_LNG) * meters_per_deg_lng(),
        (p.lat - ORIGIN_LAT) * meters_per_deg_lat(),
    )
}

/// Speed limits of every cell within 80 m of a street.
pub fn speed_limit_grid() -> SpeedLimitGrid {
    let mut grid = SpeedLimitGrid::new(SPEED_LIMIT_CELL).expect("positive cell size");
    let span = STREETS as f64 * BLOCK_M;
    let lo = to_geo(-BLOCK_M / 2.0, -BLOCK_M / 2.0);
    let hi = to_geo(span + BLOCK_M / 2.0, span + BLOCK_M / 2.0);
    let cells = |a: f64, b: f64| (a / SPEED_LIMIT_CELL).floor() as i64..=(b / SPEED_LIMIT_CELL).ceil() as i64;
    for i in cells(lo.lat, hi.lat) {
        for j in cells(lo.lng, hi.lng) {
            let (lat, lng) = (i as f64 * SPEED_LIMIT_CELL, j as f64 * SPEED_LIMIT_CELL);
            let (x, y) = from_geo(GeoPoint { lat, lng });
            let (vx, hy) = ((x / BLOCK_M).round(), (y / BLOCK_M).round());
            let in_range = |k: f64| (0.0..=STREETS as f64).contains(&k);
            let dv = if in_range(vx) { (x - vx * BLOCK_M).abs() } else { f64::INFINITY };
            let dh = if in_range(hy) { (y - hy * BLOCK_M).abs() } else { f64::INFINITY };
            if dv.min(dh) > 80.0 {
                continue;
            }
            let idx = (if dv <= dh { vx } else { hy }) as i64;
            grid.insert(lat, lng, street_limit_mph(idx)).expect("limits are in range");
        }
    }
    grid
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Straight {
        start: (f64, f64),
        dir: (f64, f64),
        len: f64,
        limit_mph: f64,
    },
    Arc {
        center: (f64, f64),
        d0: (f64, f64),
        d1: (f64, f64),
        radius: f64,
        limit_mph: f64,
    },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Straight { len, .. } => len,
            Piece::Arc { radius, .. } => radius * FRAC_PI_2,
        }
    }

    fn limit_mph(&self) -> f64 {
        match *self {
            Piece::Straight { limit_mph, .. } | Piece::Arc { limit_mph, .. } => limit_mph,
        }
    }

    /// Position and travel direction at arc length `s` into the piece.
    fn eval(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        match *self {
            Piece::Straight { start, dir, .. } => ((start.0 + dir.0 * s, start.1 + dir.1 * s), dir),
            Piece::Arc {
                center,
                d0,
                d1,
                radius,
                ..
            } => {
                let phi = s / radius;
                let (c, sn) = (phi.cos(), phi.sin());
                let pos = (
                    center.0 + radius * (-d1.0 * c + d0.0 * sn),
                    center.1 + radius * (-d1.1 * c + d0.1 * sn),
                );
                (pos, (d1.0 * sn + d0.0 * c, d1.1 * sn + d0.1 * c))
            }
        }
    }
}

fn compass(dir: (f64, f64)) -> f64 {
    dir.0.atan2(dir.1).to_degrees().rem_euclid(360.0)
}

/// Street index a leg runs along: vertical streets for north/south travel.
fn street_of(at: (i64, i64), dir: (i64, i64)) -> i64 {
    if dir.0 == 0 {
        at.0
    } else {
        at.1
    }
}

/// Random grid walk long enough for `min_len` meters, as drivable pieces.
fn build_route(rng: &mut ChaCha8Rng, min_len: f64) -> Vec<Piece> {
    const DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    let inside = |p: (i64, i64)| (1..STREETS).contains(&p.0) && (1..STREETS).contains(&p.1);
    let mut at = (rng.random_range(2..STREETS - 1), rng.random_range(2..STREETS - 1));
    let mut dir = DIRS[rng.random_range(0..4)];
    // corners: (intersection, incoming dir, outgoing dir)
    let mut waypoints = vec![at];
    let mut dirs = vec![dir];
    let first_leg = rng.random_range(1..=2);
    let mut blocks_on_leg = 0;
    let mut total = 0.0;
    let mut first_turn_done = false;
    while total < min_len + 2.0 * BLOCK_M {
        let next = (at.0 + dir.0, at.1 + dir.1);
        if !inside(next) {
            unreachable!("walk never leaves the interior");
        }
        at = next;
        total += BLOCK_M;
        blocks_on_leg += 1;
        let left = (-dir.1, dir.0);
        let right = (dir.1, -dir.0);
        let ahead_ok = inside((at.0 + dir.0, at.1 + dir.1));
        let turns: Vec<(i64, i64)> = [left, right]
            .into_iter()
            .filter(|d| inside((at.0 + d.0, at.1 + d.1)))
            .collect();
        let must_turn = !first_turn_done && blocks_on_leg >= first_leg;
        let new_dir = if (must_turn || !ahead_ok) && !turns.is_empty() {
            turns[rng.random_range(0..turns.len())]
        } else {
            let u: f64 = rng.random();
            if u < 0.5 || turns.is_empty() {
                dir
            } else {
                turns[((u - 0.5) * 2.0 * turns.len() as f64) as usize % turns.len()]
            }
        };
        if new_dir != dir {
            waypoints.push(at);
            dirs.push(new_dir);
            dir = new_dir;
            blocks_on_leg = 0;
            first_turn_done = true;
        }
    }
    waypoints.push(at);

    let to_m = |p: (i64, i64)| (p.0 as f64 * BLOCK_M, p.1 as f64 * BLOCK_M);
    let fdir = |d: (i64, i64)| (d.0 as f64, d.1 as f64);
    let mut pieces = Vec::new();
    let mut cursor = to_m(waypoints[0]);
    for k in 0..dirs.len() {
        let d = dirs[k];
        let street = street_of(waypoints[k], d);
        let end = to_m(waypoints[k + 1]);
        let is_corner = k + 1 < dirs.len();
        let radius = if is_corner {
            let next_street = street_of(waypoints[k + 1], dirs[k + 1]);
            street_class(street).min(street_class(next_street)).corner_radius()
        } else {
            0.0
        };
        let df = fdir(d);
        let stop = (end.0 - df.0 * radius, end.1 - df.1 * radius);
        let len = ((stop.0 - cursor.0).powi(2) + (stop.1 - cursor.1).powi(2)).sqrt();
        pieces.push(Piece::Straight {
            start: cursor,
            dir: df,
            len,
            limit_mph: street_limit_mph(street),
        });
        if is_corner {
            let d1 = fdir(dirs[k + 1]);
            let next_street = street_of(waypoints[k + 1], dirs[k + 1]);
            pieces.push(Piece::Arc {
                center: (end.0 - radius * df.0 + radius * d1.0, end.1 - radius * df.1 + radius * d1.1),
                d0: df,
                d1,
                radius,
                limit_mph: street_limit_mph(street).min(street_limit_mph(next_street)),
            });
            cursor = (end.0 + d1.0 * radius, end.1 + d1.1 * radius);
        }
    }
    pieces
}

/// One generated trip plus per-sample ground truth for self-checks.
#[derive(Debug, Clone)]
pub struct TripTrace {
    pub trajectory: Trajectory,
    /// Posted limit at each sample.
    pub limit_mph: Vec<f64>,
    /// True where the driver was cruising on a straight, unconstrained by corners.
    pub cruise: Vec<bool>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite positive sd")
}

/// Trip start (UTC epoch seconds) on a random 2019 day, by day/night slot.
fn start_time(rng: &mut ChaCha8Rng, night: bool) -> i64 {
    let day = rng.random_range(0..365i64);
    let local_midnight = YEAR_2019_UTC + day * 86_400 - i64::from(UTC_OFFSET_MINUTES) * 60;
    let local_s = if night {
        rng.random_range(22 * 3600..28 * 3600)
    } else {
        rng.random_range(8 * 3600 + 1800..16 * 3600 + 1800)
    };
    local_midnight + local_s
}

pub fn generate_trip(
    profile: &DriverProfile,
    trajectory_id: &str,
    points: usize,
    period_s: i64,
    rng: &mut ChaCha8Rng,
) -> Result<TripTrace> {
    let night = rng.random::<f64>() < profile.night_trip_fraction;
    let t0 = start_time(rng, night);
    let duration = (points as f64 - 1.0) * period_s as f64;
    let pieces = build_route(rng, duration * mph_to_ms(95.0));
    let trip_bias = profile.speeding_bias_mph + normal(0.0, 0.5).sample(rng);
    let accel_noise = normal(0.0, profile.accel_sigma);
    let gps = normal(0.0, 0.3);
    let heading_noise = normal(0.0, 1.0);

    let h = 1.0 / SUBSTEPS as f64;
    let mut piece = 0usize;
    let mut s_in = 0.0;
    let mut v: f64 = 0.0;
    let mut noise = 0.0;
    let mut settled = 0.0;
    let mut last_heading = compass(pieces[0].eval(0.0).1);
    let mut out = Vec::with_capacity(points);
    let mut limits = Vec::with_capacity(points);
    let mut cruise = Vec::with_capacity(points);
    let steps_per_sample = SUBSTEPS * period_s as usize;

    for sample in 0..points {
        if sample > 0 {
            for step in 0..steps_per_sample {
                if step % SUBSTEPS == 0 {
                    noise = accel_noise.sample(rng);
                }
                let cur = pieces[piece];
                let cruise_v = mph_to_ms(cur.limit_mph() + trip_bias).max(1.0);
                let mut target = match cur {
                    Piece::Arc { radius, .. } => {
                        (LATERAL_ACCEL * radius).sqrt() * profile.turn_speed_factor
                    }
                    Piece::Straight { .. } => cruise_v,
                };
                target = target.min(cruise_v);
                let mut constrained = matches!(cur, Piece::Arc { .. });
                if let Some(Piece::Arc { radius, .. }) = pieces.get(piece + 1) {
                    let v_arc = (LATERAL_ACCEL * radius).sqrt() * profile.turn_speed_factor;
                    let d = cur.len() - s_in;
                    let allowed = (v_arc * v_arc + 2.0 * profile.brake_decel * d).sqrt();
                    if allowed < target {
                        target = allowed;
                        constrained = true;
                    }
                }
                let a = (CONTROLLER_GAIN * (target - v)).clamp(-profile.brake_decel * 1.5, profile.max_accel) + noise;
                v = (v + a * h).max(0.0);
                s_in += v * h;
                while s_in > pieces[piece].len() && piece + 1 < pieces.len() {
                    s_in -= pieces[piece].len();
                    piece += 1;
                }
                settled = if constrained || v < 0.5 * cruise_v { 0.0 } else { settled + h };
            }
        }
        let cur = pieces[piece];
        let (pos, dir) = cur.eval(s_in.min(cur.len()));
        if v > 0.5 {
            last_heading = compass(dir);
        }
        let heading = (last_heading + heading_noise.sample(rng)).rem_euclid(360.0);
        let geo = to_geo(pos.0 + gps.sample(rng), pos.1 + gps.sample(rng));
        out.push(TrajectoryPoint {
            t: t0 + sample as i64 * period_s,
            speed: v,
            heading: if heading >= 360.0 { 0.0 } else { heading },
            pos: geo,
        });
        limits.push(cur.limit_mph());
        cruise.push(matches!(cur, Piece::Straight { .. }) && settled >= SETTLE_S);
    }
    Ok(TripTrace {
        trajectory: Trajectory::new(trajectory_id, &profile.driver_id, out)?,
        limit_mph: limits,
        cruise,
    })
}

/// Draws behaviour parameters for one driver.
pub fn generate_profile(
    driver_id: &str,
    archetype: Archetype,
    risky_bias_mph: f64,
    rng: &mut ChaCha8Rng,
) -> DriverProfile {
    match archetype {
        Archetype::Safe => DriverProfile {
            driver_id: driver_id.to_string(),
            archetype,
            planted_risk: rng.random_range(0.0..=0.3),
            speeding_bias_mph: normal(0.0, 1.0).sample(rng).clamp(-1.5, 1.5),
            accel_sigma: rng.random_range(0.2..0.35),
            turn_speed_factor: rng.random_range(1.0..1.1),
            night_trip_fraction: rng.random_range(0.05..0.2),
            max_accel: 2.0,
            brake_decel: 1.5,
        },
        Archetype::Risky => DriverProfile {
            driver_id: driver_id.to_string(),
            archetype,
            planted_risk: rng.random_range(0.7..=0.9),
            speeding_bias_mph: rng.random_range(risky_bias_mph - 2.0..=risky_bias_mph + 2.0),
            accel_sigma: rng.random_range(0.7..1.0),
            turn_speed_factor: rng.random_range(1.25..1.45),
            night_trip_fraction: rng.random_range(0.25..0.45),
            max_accel: 3.0,
            brake_decel: 3.0,
        },
    }
}

/// Weak record counts with mean `2 · planted_risk` per 5 years.
pub fn generate_records(profile: &DriverProfile, years: u32, seed: u64) -> DriverRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = 2.0 * profile.planted_risk * f64::from(years) / 5.0;
    let total = if mean > 0.0 {
        let rate = Gamma::new(RECORD_SHAPE, mean / RECORD_SHAPE)
            .expect("positive gamma parameters")
            .sample(&mut rng);
        if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut rng) as u32
        } else {
            0
        }
    } else {
        0
    };
    let accidents = (0..total).filter(|_| rng.random::<f64>() < ACCIDENT_SHARE).count() as u32;
    DriverRecord {
        driver_id: profile.driver_id.clone(),
        citations: total - accidents,
        at_fault_accidents: accidents,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDriver {
    pub set: DriverSet,
    pub profile: DriverProfile,
    pub record: DriverRecord,
    pub trips: Vec<Trajectory>,
}

/// Generates one driver; depends only on the master seed and the driver id.
pub fn generate_driver(
    config: &PopulationConfig,
    set: DriverSet,
    driver_id: &str,
    archetype: Archetype,
) -> Result<SyntheticDriver> {
    let seed = derive_seed(config.seed, driver_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = generate_profile(driver_id, archetype, config.risky_speeding_bias_mph, &mut rng);
    let period = config.sample_period()?;
    let trips = (0..config.trajectories_per_driver)
        .map(|k| {
            generate_trip(
                &profile,
                &format!("{driver_id}-t{k:03}"),
                config.points_per_trajectory,
                period,
                &mut rng,
            )
            .map(|t| t.trajectory)
        })
        .collect::<Result<Vec<_>>>()?;
    let record = match set {
        // reference drivers are selected for a clean record
        DriverSet::Reference => DriverRecord {
            driver_id: driver_id.to_string(),
            citations: 0,
            at_fault_accidents: 0,
        },
        _ => generate_records(&profile, config.record_years, splitmix(seed ^ 0x5eed)),
    };
    Ok(SyntheticDriver {
        set,
        profile,
        record,
        trips,
    })
}

pub struct Population {
    pub config: PopulationConfig,
    pub drivers: Vec<SyntheticDriver>,
    pub grid: SpeedLimitGrid,
}

impl Population {
    pub fn set(&self, set: DriverSet) -> impl Iterator<Item = &SyntheticDriver> {
        self.drivers.iter().filter(move |d| d.set == set)
    }
}

/// Archetype per driver of a set: an exact risky share at shuffled positions.
fn archetypes(n: usize, risky_fraction: f64, seed: u64) -> Vec<Archetype> {
    let n_risky = (n as f64 * risky_fraction).round() as usize;
    let mut a: Vec<Archetype> = (0..n)
        .map(|i| if i < n_risky { Archetype::Risky } else { Archetype::Safe })
        .collect();
    a.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    a
}

pub fn generate_population(config: &PopulationConfig) -> Result<Population> {
    config.validate()?;
    let mut jobs: Vec<(DriverSet, String, Archetype)> = Vec::new();
    for set in DriverSet::ALL {
        let n = match set {
            DriverSet::Reference => config.n_reference,
            DriverSet::Modeling => config.n_modeling,
            DriverSet::Heldout => config.n_heldout,
        };
        let kinds = match set {
            DriverSet::Reference => vec![Archetype::Safe; n],
            _ => archetypes(n, config.risky_fraction, derive_seed(config.seed, set.prefix())),
        };
        for (i, kind) in kinds.into_iter().enumerate() {
            jobs.push((set, format!("{}-{i:04}", set.prefix()), kind));
        }
    }
    let drivers = jobs
        .par_iter()
        .map(|(set, id, kind)| generate_driver(config, *set, id, *kind))
        .collect::<Result<Vec<_>>>()?;
    Ok(Population {
        config: config.clone(),
        drivers,
        grid: speed_limit_grid(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDriver {
    pub driver_id: String,
    pub set: DriverSet,
    pub archetype: Archetype,
    pub planted_risk: f64,
    pub speeding_bias_mph: f64,
    pub accel_sigma: f64,
    pub turn_speed_factor: f64,
    pub night_trip_fraction: f64,
}

/// Ground truth written next to, but never read by, the modeling inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PopulationConfig,
    pub utc_offset_minutes: i32,
    pub speed_limit_cell: f64,
    pub drivers: Vec<ManifestDriver>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn by_id(&self) -> BTreeMap<&str, &ManifestDriver> {
        self.drivers.iter().map(|d| (d.driver_id.as_str(), d)).collect()
    }
}

impl Population {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config.clone(),
            utc_offset_minutes: UTC_OFFSET_MINUTES,
            speed_limit_cell: SPEED_LIMIT_CELL,
            drivers: self
                .drivers
                .iter()
                .map(|d| ManifestDriver {
                    driver_id: d.profile.driver_id.clone(),
                    set: d.set,
                    archetype: d.profile.archetype,
                    planted_risk: d.profile.planted_risk,
                    speeding_bias_mph: d.profile.speeding_bias_mph,
                    accel_sigma: d.profile.accel_sigma,
                    turn_speed_factor: d.profile.turn_speed_factor,
                    night_trip_fraction: d.profile.night_trip_fraction,
                })
                .collect(),
        }
    }

    /// Writes the three trajectory files, records, speed limits and manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for set in DriverSet::ALL {
            write_trajectories_csv(&dir.join(set.file_name()), self.set(set).flat_map(|d| d.trips.iter()))?;
        }
        write_records(&dir.join("records.csv"), self.drivers.iter().map(|d| &d.record))?;
        self.grid.write_csv(&dir.join("speed_limits.csv"))?;
        let path = dir.join("population.json");
        let json = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::parse(&path, e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

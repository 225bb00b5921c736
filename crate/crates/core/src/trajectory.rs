//! Trajectory data model and kinematic derivation.
//!
//! Speeds are carried internally in m/s. The CSV ingestion path converts from
//! km/h and the feature-map binning converts to mph.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earth radius in meters used by every distance computation.
pub const EARTH_RADIUS_M: f64 = 6.3781e6;

pub const MPH_TO_MS: f64 = 0.44704;
pub const KMH_TO_MS: f64 = 1.0 / 3.6;

pub fn mph_to_ms(mph: f64) -> f64 {
    mph * MPH_TO_MS
}

pub fn ms_to_mph(ms: f64) -> f64 {
    ms / MPH_TO_MS
}

pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

pub fn ms_to_kmh(ms: f64) -> f64 {
    ms * 3.6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lng: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lng: f64) -> Result<Self> {
        let p = GeoPoint { lat, lng };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::InvalidPoint { lat, lng })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lng.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Seconds since the Unix epoch.
    pub t: i64,
    /// m/s
    pub speed: f64,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
    pub pos: GeoPoint,
}

impl TrajectoryPoint {
    fn validate(&self) -> std::result::Result<(), String> {
        if !self.pos.is_valid() {
            return Err(format!("invalid position at t={}", self.t));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(format!("invalid speed {} at t={}", self.speed, self.t));
        }
        if !(self.heading.is_finite() && (0.0..360.0).contains(&self.heading)) {
            return Err(format!("invalid heading {} at t={}", self.heading, self.t));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    id: String,
    driver_id: String,
    points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// Builds a trajectory, checking point validity, length and strictly increasing time.
    pub fn new(
        id: impl Into<String>,
        driver_id: impl Into<String>,
        points: Vec<TrajectoryPoint>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidTrajectory {
            id: id.clone(),
            reason,
        };
        if points.len() < 2 {
            return Err(invalid(format!("{} points, need at least 2", points.len())));
        }
        for p in &points {
            p.validate().map_err(&invalid)?;
        }
        if let Some(w) = points.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(invalid(format!(
                "timestamps not strictly increasing ({} -> {})",
                w[0].t, w[1].t
            )));
        }
        Ok(Trajectory {
            id,
            driver_id: driver_id.into(),
            points,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn driver_id(&self) -> &str {
        &self.driver_id
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn start_time(&self) -> i64 {
        self.points[0].t
    }

    /// Same points under a different driver, used when cloning trips between drivers.
    pub fn with_driver(&self, id: impl Into<String>, driver_id: impl Into<String>) -> Self {
        Trajectory {
            id: id.into(),
            driver_id: driver_id.into(),
            points: self.points.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoadType {
    Urban,
    Highway,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Daylight {
    Day,
    Night,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicPoint {
    pub t: i64,
    /// m/s
    pub speed: f64,
    pub heading: f64,
    pub pos: GeoPoint,
    /// m/s², backward difference against the previous sample.
    pub accel: Option<f64>,
    /// Degrees in [0, 180]; absent at the last sample and on degenerate geometry.
    pub angle_change: Option<f64>,
    /// Radians per hour.
    pub angular_speed: Option<f64>,
    pub road_type: RoadType,
    pub in_turn: bool,
}

/// Which context annotators have been run over a kinematic trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub road_type: bool,
    pub daylight: bool,
    pub turns: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicTrajectory {
    pub trajectory_id: String,
    pub driver_id: String,
    pub start_time: i64,
    pub daylight: Daylight,
    pub kpoints: Vec<KinematicPoint>,
    pub annotations: Annotations,
}

/// Great-circle distance in meters.
pub fn haversine(p1: GeoPoint, p2: GeoPoint) -> f64 {
    let (lat1, lat2) = (p1.lat.to_radians(), p2.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlng = (p2.lng - p1.lng).to_radians();
    let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlng / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Projects `p` onto a local east/north plane (meters) centered at `origin`.
fn local_xy(origin: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let x = (p.lng - origin.lng) * origin.lat.to_radians().cos() * k;
    let y = (p.lat - origin.lat) * k;
    (x, y)
}

/// Turning angle at `b` between the displacement vectors AB and BC, in degrees.
pub fn angle_between(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> Result<f64> {
    let (ax, ay) = local_xy(b, a);
    let (cx, cy) = local_xy(b, c);
    let (abx, aby) = (-ax, -ay);
    let (bcx, bcy) = (cx, cy);
    let n1 = abx.hypot(aby);
    let n2 = bcx.hypot(bcy);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    let cos = ((abx * bcx + aby * bcy) / (n1 * n2)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Angular displacement between two fixes in radians per hour.
pub fn angular_speed(p1: GeoPoint, p2: GeoPoint, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInterval(dt));
    }
    Ok(haversine(p1, p2) / EARTH_RADIUS_M * (3600.0 / dt))
}

/// Derives per-sample kinematics. The first source point only serves as the
/// backward reference, so the output has `points.len() - 1` entries.
pub fn derive_kinematics(traj: &Trajectory) -> Result<KinematicTrajectory> {
    let pts = traj.points();
    if pts.len() < 2 {
        return Err(Error::InvalidTrajectory {
            id: traj.id().to_string(),
            reason: "fewer than 2 points".into(),
        });
    }
    let mut kpoints = Vec::with_capacity(pts.len() - 1);
    for i in 1..pts.len() {
        let (prev, cur) = (&pts[i - 1], &pts[i]);
        if cur.t <= prev.t {
            return Err(Error::InvalidTrajectory {
                id: traj.id().to_string(),
                reason: format!("timestamps not strictly increasing at index {i}"),
            });
        }
        let dt = (cur.t - prev.t) as f64;
        let angle_change = pts
            .get(i + 1)
            .and_then(|next| angle_between(prev.pos, cur.pos, next.pos).ok());
        kpoints.push(KinematicPoint {
            t: cur.t,
            speed: cur.speed,
            heading: cur.heading,
            pos: cur.pos,
            accel: Some((cur.speed - prev.speed) / dt),
            angle_change,
            angular_speed: angular_speed(prev.pos, cur.pos, dt).ok(),
            road_type: RoadType::Unknown,
            in_turn: false,
        });
    }
    Ok(KinematicTrajectory {
        trajectory_id: traj.id().to_string(),
        driver_id: traj.driver_id().to_string(),
        start_time: traj.start_time(),
        daylight: Daylight::Unknown,
        kpoints,
        annotations: Annotations::default(),
    })
}

/// Column header of the trajectory CSV format.
pub const TRAJECTORY_CSV_HEADER: [&str; 7] = ["trajectory_id", "driver_id", "t", "speed_kmh", "heading", "lat", "lng"];

/// Reads trajectories from CSV. Rows may come in any order; each trajectory's
/// points are sorted by time and the result is ordered by trajectory id.
pub fn read_trajectories_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(TRAJECTORY_CSV_HEADER) {
        return Err(Error::parse(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows: BTreeMap<String, (String, Vec<TrajectoryPoint>)> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| -> Result<f64> {
            rec[i].trim().parse::<f64>().map_err(|_| {
                Error::parse(path, format!("row {}: bad {} {:?}", line + 2, TRAJECTORY_CSV_HEADER[i], &rec[i]))
            })
        };
        let t: i64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, format!("row {}: bad t {:?}", line + 2, &rec[2])))?;
        let point = TrajectoryPoint {
            t,
            speed: kmh_to_ms(field(3)?),
            heading: field(4)?,
            pos: GeoPoint {
                lat: field(5)?,
                lng: field(6)?,
            },
        };
        let entry = rows
            .entry(rec[0].to_string())
            .or_insert_with(|| (rec[1].to_string(), Vec::new()));
        if entry.0 != rec[1] {
            return Err(Error::InvalidTrajectory {
                id: rec[0].to_string(),
                reason: format!("rows name two drivers, {} and {}", entry.0, &rec[1]),
            });
        }
        entry.1.push(point);
    }
    rows.into_iter()
        .map(|(id, (driver, mut points))| {
            points.sort_by_key(|p| p.t);
            Trajectory::new(id, driver, points)
        })
        .collect()
}

/// Writes trajectories in the CSV format read by [`read_trajectories_csv`].
pub fn write_trajectories_csv<'a>(path: &Path, trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Result<()> {
    let mut out = TRAJECTORY_CSV_HEADER.join(",");
    out.push('\n');
    for traj in trajectories {
        for p in traj.points() {
            // rounding may land exactly on 360
            let mut heading = (p.heading * 100.0).round() / 100.0;
            if heading >= 360.0 {
                heading -= 360.0;
            }
            out.push_str(&format!(
                "{},{},{},{:.3},{:.2},{:.7},{:.7}\n",
                traj.id(),
                traj.driver_id(),
                p.t,
                ms_to_kmh(p.speed),
                heading,
                p.pos.lat,
                p.pos.lng
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

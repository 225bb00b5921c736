//! Invariant property suites for every module, runnable from any test target.
//!
//! Each property runs a deterministic proptest runner, so a given case count
//! always exercises the same inputs.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use chrono::NaiveDate;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use crate::classifier::{specs_in_groups, vectorize, CohortClassifier, FeatureLayout, FeatureVector, RiskModel};
use crate::cohorts::{
    clustering_label_to_risk_cohort_label, identify_risk_cohorts, kmeans, CohortConfig, DriverRecord, Records,
};
use crate::context::{civil_twilight, classify_limit, detect_turns, PolarFlag, TurnParams};
use crate::deviation::{
    build_deviation_maps, difference, hellinger_distance, obtain_difference, obtain_histogram_matrix, summarize,
    DeviationFeatureMap, DeviationParams, DriverDeviationMaps, TripsByDriver, HELLINGER_MAX,
};
use crate::featuremap::{
    build_raw_feature_map, builtin_specs, specs_with_bins, AxisRange, Attribute, ContextFilter, FeatureMap,
    FeatureMapSpec, SpecGroup, SpecId,
};
use crate::gbdt::{Ensemble, GbcParams};
use crate::report::cohort_report;
use crate::synth::{generate_driver, generate_profile, generate_records, Archetype, DriverSet, PopulationConfig};
use crate::trajectory::{
    angle_between, derive_kinematics, haversine, Annotations, Daylight, GeoPoint, KinematicPoint, KinematicTrajectory,
    RoadType, Trajectory, TrajectoryPoint,
};
use crate::cohorts::CohortLabel;

pub const MIN_CASES: u32 = 200;

pub struct Property {
    pub module: &'static str,
    pub name: &'static str,
    /// False for statistical checks that run once on a fixed population.
    pub randomized: bool,
    pub run: fn(u32) -> Result<(), String>,
}

pub struct Outcome {
    pub module: &'static str,
    pub name: &'static str,
    pub cases: u32,
    pub result: Result<(), String>,
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn all() -> Vec<Property> {
    macro_rules! p {
        ($module:literal, $name:ident) => {
            p!($module, $name, true)
        };
        ($module:literal, $name:ident, $random:expr) => {
            Property {
                module: $module,
                name: stringify!($name),
                randomized: $random,
                run: $name,
            }
        };
    }
    vec![
        p!("trajectory-core", haversine_symmetry),
        p!("trajectory-core", angle_scale_invariance),
        p!("trajectory-core", reversed_speeds_negate_accel),
        p!("trajectory-core", attributes_finite_or_absent),
        p!("context-annotate", road_type_partition),
        p!("context-annotate", twilight_monotonic),
        p!("context-annotate", turns_shift_invariant),
        p!("context-annotate", turns_sorted_disjoint),
        p!("feature-maps", binning_matches_oracle),
        p!("feature-maps", permutation_invariance),
        p!("feature-maps", filter_monotonicity),
        p!("feature-maps", group_coverage, false),
        p!("deviation-engine", hellinger_metric),
        p!("deviation-engine", deviation_ranges),
        p!("deviation-engine", deviation_determinism),
        p!("deviation-engine", batched_matches_independent),
        p!("risk-cohorts", voting_monotonicity),
        p!("risk-cohorts", vote_accounting),
        p!("risk-cohorts", kmeans_best_restart),
        p!("risk-cohorts", relabel_invariance),
        p!("risk-classifier", training_determinism),
        p!("risk-classifier", label_score_consistency),
        p!("risk-classifier", boosting_loss_non_increasing),
        p!("risk-classifier", layout_prefix_restriction),
        p!("synth-population", reference_purity),
        p!("synth-population", distributional_separation, false),
        p!("synth-population", weak_label_noise, false),
        p!("pipeline-cli", report_conservation),
    ]
}

pub fn run_all(cases: u32) -> Vec<Outcome> {
    all()
        .into_iter()
        .map(|p| Outcome {
            module: p.module,
            name: p.name,
            cases: if p.randomized { cases } else { 1 },
            result: (p.run)(cases),
        })
        .collect()
}

// ---- strategies ----

fn arb_geo() -> impl Strategy<Value = GeoPoint> {
    (-80.0..80.0f64, -179.0..179.0f64).prop_map(|(lat, lng)| GeoPoint { lat, lng })
}

/// Uniform values mixed with exact bin edges of the given ranges.
fn edgy(lo: f64, hi: f64, ranges: &'static [(f64, f64)]) -> BoxedStrategy<f64> {
    prop_oneof![
        3 => lo..hi,
        1 => (0..ranges.len(), 0usize..=20).prop_map(move |(r, i)| {
            let (a, b) = ranges[r];
            AxisRange::new(a, b).edge(i, 20)
        }),
    ]
    .boxed()
}

const SPEED_RANGES: &[(f64, f64)] = &[(5.0, 25.0), (25.0, 45.0), (45.0, 80.0)];
const ACCEL_RANGES: &[(f64, f64)] = &[(-2.5, 2.5), (-2.0, 2.0), (-1.0, 1.0), (-3.0, 3.0), (-3.5, 3.5)];
const ANGLE_RANGES: &[(f64, f64)] = &[(0.0, 20.0), (0.0, 6.0), (0.0, 4.0), (0.0, 7.0), (0.0, 15.0)];
const ANGULAR_RANGES: &[(f64, f64)] = &[(0.0, 0.025)];

fn arb_kpoint() -> impl Strategy<Value = KinematicPoint> {
    (
        edgy(0.0, 90.0, SPEED_RANGES),
        proptest::option::weighted(0.9, edgy(-4.0, 4.0, ACCEL_RANGES)),
        proptest::option::weighted(0.9, edgy(0.0, 25.0, ANGLE_RANGES)),
        proptest::option::weighted(0.9, edgy(0.0, 0.03, ANGULAR_RANGES)),
        prop_oneof![Just(RoadType::Urban), Just(RoadType::Highway), Just(RoadType::Unknown)],
        any::<bool>(),
    )
        .prop_map(|(mph, accel, angle_change, angular_speed, road_type, in_turn)| KinematicPoint {
            t: 0,
            speed: mph * 0.44704,
            heading: 0.0,
            pos: GeoPoint { lat: 40.0, lng: -83.0 },
            accel,
            angle_change,
            angular_speed,
            road_type,
            in_turn,
        })
}

fn arb_daylight() -> impl Strategy<Value = Daylight> {
    prop_oneof![Just(Daylight::Day), Just(Daylight::Night), Just(Daylight::Unknown)]
}

fn annotated(kpoints: Vec<KinematicPoint>, daylight: Daylight) -> KinematicTrajectory {
    let kpoints = kpoints
        .into_iter()
        .enumerate()
        .map(|(i, mut k)| {
            k.t = i as i64 + 1;
            k
        })
        .collect();
    KinematicTrajectory {
        trajectory_id: "t".into(),
        driver_id: "d".into(),
        start_time: 0,
        daylight,
        kpoints,
        annotations: Annotations {
            road_type: true,
            daylight: true,
            turns: true,
        },
    }
}

fn arb_trip(max_points: usize) -> impl Strategy<Value = KinematicTrajectory> {
    (proptest::collection::vec(arb_kpoint(), 1..=max_points), arb_daylight()).prop_map(|(k, d)| annotated(k, d))
}

// ---- naive binning oracle ----

fn oracle_value(attr: Attribute, k: &KinematicPoint) -> Option<f64> {
    match attr {
        Attribute::Speed => Some(k.speed / 0.44704),
        Attribute::Acceleration => k.accel,
        Attribute::AngleChange => k.angle_change,
        Attribute::AngularSpeed => k.angular_speed,
    }
}

fn oracle_passes(filter: ContextFilter, daylight: Daylight, k: &KinematicPoint) -> bool {
    match filter {
        ContextFilter::None => true,
        ContextFilter::Urban => k.road_type == RoadType::Urban,
        ContextFilter::Highway => k.road_type == RoadType::Highway,
        ContextFilter::Day => daylight == Daylight::Day,
        ContextFilter::Night => daylight == Daylight::Night,
        ContextFilter::Turn => k.in_turn,
    }
}

fn in_bin(v: f64, range: AxisRange, bins: usize, i: usize) -> bool {
    let edge = |j: usize| range.low + (range.high - range.low) * j as f64 / bins as f64;
    if v < range.low || v > range.high {
        return false;
    }
    v >= edge(i) && (v < edge(i + 1) || i == bins - 1)
}

/// Count-then-normalize over every cell with a full scan of the points.
pub fn naive_feature_map(kt: &KinematicTrajectory, spec: &FeatureMapSpec) -> Vec<f64> {
    let mut counts = vec![0u64; spec.y_bins * spec.x_bins];
    for y in 0..spec.y_bins {
        for x in 0..spec.x_bins {
            for k in &kt.kpoints {
                if !oracle_passes(spec.context, kt.daylight, k) {
                    continue;
                }
                if let (Some(yv), Some(xv)) = (oracle_value(spec.y_attr, k), oracle_value(spec.x_attr, k)) {
                    if in_bin(yv, spec.y_range, spec.y_bins, y) && in_bin(xv, spec.x_range, spec.x_bins, x) {
                        counts[y * spec.x_bins + x] += 1;
                    }
                }
            }
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    counts
        .iter()
        .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
        .collect()
}

// ---- trajectory-core ----

pub fn haversine_symmetry(cases: u32) -> Result<(), String> {
    check(cases, (arb_geo(), arb_geo()), |(a, b)| {
        prop_assert!((haversine(a, b) - haversine(b, a)).abs() < 1e-9);
        prop_assert!(haversine(a, b) >= 0.0);
        Ok(())
    })
}

pub fn angle_scale_invariance(cases: u32) -> Result<(), String> {
    let offset = (-1e-3..1e-3f64, -1e-3..1e-3f64).prop_filter("non-degenerate", |(a, b)| a.abs() + b.abs() > 1e-5);
    check(cases, (offset.clone(), offset, 0.1..10.0f64), |((a0, a1), (c0, c1), s)| {
        let b = GeoPoint { lat: 40.0, lng: -83.0 };
        let at = |dlat: f64, dlng: f64, k: f64| GeoPoint {
            lat: b.lat + dlat * k,
            lng: b.lng + dlng * k,
        };
        let t1 = angle_between(at(a0, a1, 1.0), b, at(c0, c1, 1.0)).unwrap();
        let t2 = angle_between(at(a0, a1, s), b, at(c0, c1, s)).unwrap();
        prop_assert!((t1 - t2).abs() < 1e-6, "{} vs {}", t1, t2);
        prop_assert!((0.0..=180.0).contains(&t1));
        Ok(())
    })
}

fn arb_raw_points() -> impl Strategy<Value = Vec<TrajectoryPoint>> {
    proptest::collection::vec((0.0..40.0f64, 1i64..4, -1e-3..1e-3f64, -1e-3..1e-3f64), 2..30).prop_map(|rows| {
        let mut t = 0;
        let (mut lat, mut lng) = (40.0, -83.0);
        rows.into_iter()
            .map(|(speed, dt, dlat, dlng)| {
                t += dt;
                lat += dlat;
                lng += dlng;
                TrajectoryPoint {
                    t,
                    speed,
                    heading: 0.0,
                    pos: GeoPoint { lat, lng },
                }
            })
            .collect()
    })
}

pub fn reversed_speeds_negate_accel(cases: u32) -> Result<(), String> {
    check(cases, arb_raw_points(), |pts| {
        // time reversal flips the sign of every finite difference
        let n = pts.len();
        let fwd = derive_kinematics(&Trajectory::new("f", "d", pts.clone()).unwrap()).unwrap();
        let t_end = pts[n - 1].t;
        let rev_pts: Vec<TrajectoryPoint> = pts
            .iter()
            .rev()
            .map(|p| TrajectoryPoint { t: t_end - p.t, ..*p })
            .collect();
        let rev = derive_kinematics(&Trajectory::new("r", "d", rev_pts).unwrap()).unwrap();
        for i in 0..n - 1 {
            prop_assert_eq!(fwd.kpoints[i].accel.unwrap(), -rev.kpoints[n - 2 - i].accel.unwrap());
        }
        Ok(())
    })
}

pub fn attributes_finite_or_absent(cases: u32) -> Result<(), String> {
    check(cases, arb_raw_points(), |pts| {
        let kt = derive_kinematics(&Trajectory::new("f", "d", pts).unwrap()).unwrap();
        for k in &kt.kpoints {
            for v in [k.accel, k.angle_change, k.angular_speed].into_iter().flatten() {
                prop_assert!(v.is_finite());
            }
            if let Some(a) = k.angle_change {
                prop_assert!((0.0..=180.0).contains(&a));
            }
            if let Some(w) = k.angular_speed {
                prop_assert!(w >= 0.0);
            }
        }
        prop_assert!(kt.kpoints.last().unwrap().angle_change.is_none());
        Ok(())
    })
}

// ---- context-annotate ----

pub fn road_type_partition(cases: u32) -> Result<(), String> {
    check(cases, proptest::option::of(0.001..=90.0f64), |limit| {
        let class = classify_limit(limit);
        match limit {
            None => prop_assert_eq!(class, RoadType::Unknown),
            Some(l) => {
                prop_assert!(class == RoadType::Urban || class == RoadType::Highway);
                prop_assert_eq!(class == RoadType::Urban, l < 50.0);
            }
        }
        Ok(())
    })
}

pub fn twilight_monotonic(cases: u32) -> Result<(), String> {
    let dates = [(2018, 12, 21), (2019, 2, 5), (2019, 3, 21), (2019, 5, 6), (2019, 6, 21)];
    check(cases, (25.0..55.0f64, -180.0..180.0f64), move |(lat, lng)| {
        let offset = ((lng / 15.0).round() * 60.0) as i32;
        let mut prev: Option<i64> = None;
        for (y, m, d) in dates {
            let date = NaiveDate::from_ymd_opt(y, m, d).unwrap();
            let w = civil_twilight(date, GeoPoint { lat, lng }, offset);
            prop_assert_eq!(w.polar_flag, PolarFlag::Normal);
            let cur = w.civil_dusk - w.civil_dawn;
            if let Some(p) = prev {
                prop_assert!(cur > p, "{} -> {} at {}", p, cur, date);
            }
            prev = Some(cur);
        }
        Ok(())
    })
}

fn heading_trip(headings: &[f64]) -> KinematicTrajectory {
    let kpoints = headings
        .iter()
        .map(|&h| KinematicPoint {
            t: 0,
            speed: 8.0,
            heading: h.rem_euclid(360.0),
            pos: GeoPoint { lat: 0.0, lng: 0.0 },
            accel: Some(0.0),
            angle_change: None,
            angular_speed: None,
            road_type: RoadType::Unknown,
            in_turn: false,
        })
        .collect();
    annotated(kpoints, Daylight::Unknown)
}

fn arb_headings() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-30.0..30.0f64, 2..80).prop_map(|steps| {
        let mut h = vec![0.0];
        for s in steps {
            h.push(h.last().unwrap() + s);
        }
        h
    })
}

pub fn turns_shift_invariant(cases: u32) -> Result<(), String> {
    check(cases, (arb_headings(), 0.0..360.0f64), |(h, shift)| {
        let params = TurnParams::default();
        let idx = |v: Vec<crate::context::TurnSegment>| v.iter().map(|s| (s.start_index, s.end_index)).collect::<Vec<_>>();
        let shifted: Vec<f64> = h.iter().map(|x| x + shift).collect();
        prop_assert_eq!(
            idx(detect_turns(&heading_trip(&h), &params)),
            idx(detect_turns(&heading_trip(&shifted), &params))
        );
        Ok(())
    })
}

pub fn turns_sorted_disjoint(cases: u32) -> Result<(), String> {
    check(cases, arb_headings(), |h| {
        let segs = detect_turns(&heading_trip(&h), &TurnParams::default());
        for w in segs.windows(2) {
            prop_assert!(w[0].end_index < w[1].start_index);
        }
        for s in &segs {
            prop_assert!(s.start_index <= s.end_index);
        }
        Ok(())
    })
}

// ---- feature-maps ----

pub fn binning_matches_oracle(cases: u32) -> Result<(), String> {
    let specs = builtin_specs();
    check(cases, arb_trip(10), move |kt| {
        for spec in &specs {
            let map = build_raw_feature_map(&kt, spec).unwrap();
            let oracle = naive_feature_map(&kt, spec);
            for (a, b) in map.cells.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-12, "{}: {} vs {}", spec.id, a, b);
            }
        }
        Ok(())
    })
}

pub fn permutation_invariance(cases: u32) -> Result<(), String> {
    let specs = builtin_specs();
    let strat = (proptest::collection::vec(arb_kpoint(), 1..=12), arb_daylight())
        .prop_flat_map(|(k, d)| (Just(k.clone()), Just(k).prop_shuffle(), Just(d)));
    check(cases, strat, move |(a, b, d)| {
        let (ta, tb) = (annotated(a, d), annotated(b, d));
        for spec in &specs {
            prop_assert_eq!(build_raw_feature_map(&ta, spec).unwrap(), build_raw_feature_map(&tb, spec).unwrap());
        }
        Ok(())
    })
}

pub fn filter_monotonicity(cases: u32) -> Result<(), String> {
    let specs = builtin_specs();
    check(cases, arb_trip(12), move |kt| {
        for spec in specs.iter().filter(|s| s.context != ContextFilter::None) {
            let open = FeatureMapSpec {
                context: ContextFilter::None,
                ..spec.clone()
            };
            prop_assert!(
                build_raw_feature_map(&kt, spec).unwrap().sample_count
                    <= build_raw_feature_map(&kt, &open).unwrap().sample_count
            );
        }
        Ok(())
    })
}

pub fn group_coverage(_: u32) -> Result<(), String> {
    let sizes: Vec<usize> = SpecGroup::ALL.iter().map(|g| specs_in_groups(&[*g]).len()).collect();
    ensure(sizes == [3, 5, 6, 3, 3, 2], || format!("group sizes {sizes:?}"))?;
    let mut all: Vec<SpecId> = SpecGroup::ALL.iter().flat_map(|g| specs_in_groups(&[*g])).collect();
    all.sort();
    all.dedup();
    ensure(all.len() == 22, || format!("{} distinct specs across groups", all.len()))
}

// ---- deviation-engine ----

fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0..1.0f64, n)
        .prop_filter("non-zero mass", |v| v.iter().sum::<f64>() > 1e-6)
        .prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
}

pub fn hellinger_metric(cases: u32) -> Result<(), String> {
    let strat = (1usize..16).prop_flat_map(|n| (prob_vec(n), prob_vec(n)));
    check(cases, strat, |(p, q)| {
        let d = hellinger_distance(&p, &q).unwrap();
        prop_assert_eq!(d, hellinger_distance(&q, &p).unwrap());
        prop_assert!(hellinger_distance(&p, &p).unwrap().abs() < 1e-12);
        prop_assert!((0.0..=SQRT_2 / 2.0 + 1e-12).contains(&d));
        Ok(())
    })
}

fn arb_maps(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<FeatureMap>> {
    proptest::collection::vec(proptest::collection::vec(0.0..=1.0f64, 4), n).prop_map(|rows| {
        rows.into_iter()
            .map(|cells| FeatureMap {
                spec_id: SpecId::new(1).unwrap(),
                y_bins: 2,
                x_bins: 2,
                cells,
                sample_count: 1,
            })
            .collect()
    })
}

pub fn deviation_ranges(cases: u32) -> Result<(), String> {
    check(cases, (arb_maps(1..12), arb_maps(1..12), arb_maps(1..12), arb_maps(1..12)), |(base, c1, c2, obs)| {
        let base = obtain_histogram_matrix(&base, 10).unwrap();
        let diffs: Vec<_> = [c1, c2]
            .iter()
            .map(|c| obtain_difference(&base, &obtain_histogram_matrix(c, 10).unwrap()).unwrap())
            .collect();
        for d in &diffs {
            prop_assert!(d.cells.iter().all(|v| (0.0..=HELLINGER_MAX + 1e-12).contains(v)));
        }
        let natural = summarize(&diffs).unwrap();
        let observed = obtain_difference(&base, &obtain_histogram_matrix(&obs, 10).unwrap()).unwrap();
        let map = difference("d", &observed, &natural).unwrap();
        prop_assert!(map.cells.iter().all(|v| v.abs() <= HELLINGER_MAX + 1e-12));
        Ok(())
    })
}

fn arb_drivers(prefix: &'static str, n: std::ops::Range<usize>) -> impl Strategy<Value = TripsByDriver> {
    proptest::collection::vec(proptest::collection::vec(arb_trip(10), 1..4), n).prop_map(move |drivers| {
        drivers
            .into_iter()
            .enumerate()
            .map(|(i, trips)| {
                let id = format!("{prefix}{i}");
                let trips = trips
                    .into_iter()
                    .enumerate()
                    .map(|(j, mut t)| {
                        t.driver_id = id.clone();
                        t.trajectory_id = format!("{id}-{j}");
                        t
                    })
                    .collect();
                (id, trips)
            })
            .collect()
    })
}

fn small_specs() -> Vec<FeatureMapSpec> {
    specs_with_bins(4, 4)
        .unwrap()
        .into_iter()
        .filter(|s| [1, 4, 9, 18].contains(&s.id.number()))
        .collect()
}

fn population() -> impl Strategy<Value = (TripsByDriver, TripsByDriver, TripsByDriver)> {
    (arb_drivers("b", 2..5), arb_drivers("c", 1..4), arb_drivers("o", 1..5))
}

const SMALL_PARAMS: DeviationParams = DeviationParams {
    h_bins: 10,
    min_control_trajectories: 1,
};

pub fn deviation_determinism(cases: u32) -> Result<(), String> {
    let specs = small_specs();
    check(cases, population(), move |(base, control, obs)| {
        let a = build_deviation_maps(&base, &control, &obs, &specs, &SMALL_PARAMS);
        let b = build_deviation_maps(&base, &control, &obs, &specs, &SMALL_PARAMS);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                for d in &a.1 {
                    for m in d.maps.values() {
                        prop_assert!(m.cells.iter().all(|v| v.abs() <= HELLINGER_MAX + 1e-12));
                    }
                }
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "runs disagree on success"),
        }
        Ok(())
    })
}

pub fn batched_matches_independent(cases: u32) -> Result<(), String> {
    let specs = small_specs();
    check(cases, population(), move |(base, control, obs)| {
        let (model, batched) = build_deviation_maps(&base, &control, &obs, &specs, &SMALL_PARAMS).unwrap();
        for (d, (id, trips)) in batched.iter().zip(&obs) {
            prop_assert_eq!(d, &model.deviation_maps(id, trips).unwrap());
        }
        Ok(())
    })
}

// ---- risk-cohorts ----

fn record(id: &str, score: u32) -> DriverRecord {
    DriverRecord {
        driver_id: id.to_string(),
        citations: score,
        at_fault_accidents: 0,
    }
}

fn arb_cohort_population() -> impl Strategy<Value = (Vec<DriverDeviationMaps>, Records)> {
    proptest::collection::vec(
        (proptest::collection::vec(-0.7..0.7f64, 3 * 4), 0u32..4, any::<u8>()),
        6..16,
    )
    .prop_map(|rows| {
        let mut drivers = Vec::new();
        let mut records = Records::new();
        for (i, (cells, score, mask)) in rows.into_iter().enumerate() {
            let id = format!("d{i:02}");
            let mut maps = BTreeMap::new();
            for s in 0..3u8 {
                if s > 0 && mask >> s & 1 == 1 {
                    continue;
                }
                let spec = SpecId::new(s + 1).unwrap();
                maps.insert(
                    spec,
                    DeviationFeatureMap {
                        spec_id: spec,
                        driver_id: id.clone(),
                        y_bins: 2,
                        x_bins: 2,
                        cells: cells[s as usize * 4..(s as usize + 1) * 4].to_vec(),
                    },
                );
            }
            drivers.push(DriverDeviationMaps { driver_id: id.clone(), maps });
            records.insert(id.clone(), record(&id, score));
        }
        (drivers, records)
    })
}

fn three_specs() -> Vec<SpecId> {
    (1..=3).map(|s| SpecId::new(s).unwrap()).collect()
}

pub fn voting_monotonicity(cases: u32) -> Result<(), String> {
    check(cases, (arb_cohort_population(), any::<u64>(), 0.5..1.0f64, 0.0..0.5f64), |((drivers, records), seed, lo, delta)| {
        let cfg = |confidence| CohortConfig {
            confidence,
            seed,
            ..CohortConfig::default()
        };
        let loose = identify_risk_cohorts(&drivers, &three_specs(), &records, &cfg(lo)).unwrap().labeled();
        let strict = identify_risk_cohorts(&drivers, &three_specs(), &records, &cfg((lo + delta).min(1.0)))
            .unwrap()
            .labeled();
        for id in strict.keys() {
            prop_assert!(loose.contains_key(id));
        }
        Ok(())
    })
}

pub fn vote_accounting(cases: u32) -> Result<(), String> {
    check(cases, (arb_cohort_population(), any::<u64>()), |((drivers, records), seed)| {
        let cfg = CohortConfig {
            seed,
            ..CohortConfig::default()
        };
        let out = identify_risk_cohorts(&drivers, &three_specs(), &records, &cfg).unwrap();
        for (d, c) in drivers.iter().zip(&out.drivers) {
            prop_assert_eq!(&d.driver_id, &c.driver_id);
            let present = three_specs().iter().filter(|s| d.maps.contains_key(s)).count();
            if 2 * present < 3 {
                prop_assert!(c.votes.is_empty());
                continue;
            }
            let expected = out.clustered_specs.iter().filter(|s| d.maps.contains_key(s)).count();
            prop_assert_eq!(c.votes.len(), expected);
        }
        Ok(())
    })
}

pub fn kmeans_best_restart(cases: u32) -> Result<(), String> {
    let strat = (
        proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 3), 4..30),
        2usize..4,
        any::<u64>(),
        1usize..8,
    );
    check(cases, strat, |(pts, k, seed, restarts)| {
        if let Ok(km) = kmeans(&pts, k, seed, restarts) {
            prop_assert_eq!(km.restart_wcss.len(), restarts);
            for w in &km.restart_wcss {
                prop_assert!(km.wcss <= *w);
            }
        }
        Ok(())
    })
}

pub fn relabel_invariance(cases: u32) -> Result<(), String> {
    let strat = (
        proptest::collection::vec(0usize..3, 6..30),
        proptest::collection::vec(0u32..6, 30),
        Just(vec![0usize, 1, 2]).prop_shuffle(),
    );
    check(cases, strat, |(assign, scores, perm)| {
        let scores = &scores[..assign.len()];
        let k = 3;
        if (0..k).any(|c| !assign.contains(&c)) {
            return Ok(());
        }
        // skip the documented exact-tie path: two clusters with equal mean risk
        let means: Vec<(usize, usize)> = (0..k)
            .map(|c| {
                let m: Vec<u32> = assign.iter().zip(scores).filter(|(a, _)| **a == c).map(|(_, s)| *s).collect();
                (m.iter().map(|&s| s as usize).sum(), m.len())
            })
            .collect();
        for i in 0..k {
            for j in i + 1..k {
                if means[i].0 * means[j].1 == means[j].0 * means[i].1 {
                    return Ok(());
                }
            }
        }
        let a = clustering_label_to_risk_cohort_label(&assign, k, scores).unwrap();
        let permuted: Vec<usize> = assign.iter().map(|&c| perm[c]).collect();
        let b = clustering_label_to_risk_cohort_label(&permuted, k, scores).unwrap();
        for (x, y) in assign.iter().zip(&permuted) {
            prop_assert_eq!(a[*x], b[*y]);
        }
        Ok(())
    })
}

// ---- risk-classifier ----

fn arb_training() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (1usize..4, 6usize..24)
        .prop_flat_map(|(d, n)| {
            (
                proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, d), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
}

fn small_gbc(seed: u64) -> GbcParams {
    GbcParams {
        num_estimators: 12,
        max_depth: 3,
        seed,
        ..GbcParams::default()
    }
}

pub fn training_determinism(cases: u32) -> Result<(), String> {
    check(cases, (arb_training(), any::<u64>(), 0.5..=1.0f64), |((x, y), seed, subsample)| {
        let params = GbcParams {
            subsample,
            ..small_gbc(seed)
        };
        let a = Ensemble::fit(&x, &y, &params).unwrap();
        let b = Ensemble::fit(&x, &y, &params).unwrap();
        prop_assert_eq!(&a, &b);
        for row in &x {
            prop_assert_eq!(a.predict_proba(row).unwrap().to_bits(), b.predict_proba(row).unwrap().to_bits());
        }
        Ok(())
    })
}

pub fn label_score_consistency(cases: u32) -> Result<(), String> {
    let layout = FeatureLayout::for_groups(&[SpecGroup::G6], 2, 2).unwrap();
    check(cases, (arb_training(), -3.0..3.0f64, proptest::collection::vec(-3.0..3.0f64, 8)), move |((x, y), init, probe)| {
        let d = x[0].len();
        let widen = |r: &Vec<f64>| {
            let mut v = vec![0.0; layout.input_len()];
            v[..d].copy_from_slice(r);
            v
        };
        let wide: Vec<Vec<f64>> = x.iter().map(widen).collect();
        let mut ensemble = Ensemble::fit(&wide, &y, &small_gbc(1)).unwrap();
        ensemble.initial_score = init;
        let model = RiskModel {
            version: crate::classifier::MODEL_VERSION,
            mode: crate::classifier::ModelMode::Refined,
            groups: vec![SpecGroup::G6],
            layout: layout.clone(),
            params: small_gbc(1),
            ensemble,
        };
        let fv = FeatureVector {
            driver_id: "p".into(),
            values: probe,
            mask: vec![true, false],
        };
        let (label, score) = model.predict(&fv).unwrap();
        prop_assert!(score > 0.0 && score < 1.0);
        prop_assert_eq!(label == CohortLabel::HighRisk, score >= 0.5);
        Ok(())
    })
}

pub fn boosting_loss_non_increasing(cases: u32) -> Result<(), String> {
    check(cases, arb_training(), |(x, y)| {
        let params = GbcParams {
            num_estimators: 25,
            ..small_gbc(0)
        };
        let (_, losses) = Ensemble::fit_traced(&x, &y, &params).unwrap();
        for w in losses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        Ok(())
    })
}

pub fn layout_prefix_restriction(cases: u32) -> Result<(), String> {
    let groups = || proptest::sample::subsequence(SpecGroup::ALL.to_vec(), 1..=6);
    check(cases, (groups(), groups(), 2usize..5), |(g, extra, bins)| {
        let mut union = g.clone();
        union.extend(extra);
        union.sort();
        union.dedup();
        let maps: BTreeMap<SpecId, FeatureMap> = SpecId::all()
            .map(|s| {
                let mut m = FeatureMap::zeros(s, bins, bins);
                for (i, c) in m.cells.iter_mut().enumerate() {
                    *c = f64::from(s.number()) + i as f64 / 100.0;
                }
                (s, m)
            })
            .collect();
        let small_layout = FeatureLayout::for_groups(&g, bins, bins).unwrap();
        let big_layout = FeatureLayout::for_groups(&union, bins, bins).unwrap();
        let small = vectorize("d", &maps, &small_layout).unwrap();
        let big = vectorize("d", &maps, &big_layout).unwrap();
        let cells = bins * bins;
        let mut restricted = Vec::new();
        for (i, s) in big_layout.specs.iter().enumerate() {
            if small_layout.specs.contains(s) {
                restricted.extend_from_slice(&big.values[i * cells..(i + 1) * cells]);
            }
        }
        prop_assert_eq!(restricted, small.values);
        Ok(())
    })
}

// ---- synth-population ----

fn tiny_population(seed: u64) -> PopulationConfig {
    PopulationConfig {
        trajectories_per_driver: 1,
        points_per_trajectory: 5,
        seed,
        ..PopulationConfig::default()
    }
}

pub fn reference_purity(cases: u32) -> Result<(), String> {
    check(cases, (any::<u64>(), 0usize..10_000), |(seed, n)| {
        let cfg = tiny_population(seed);
        let d = generate_driver(&cfg, DriverSet::Reference, &format!("ref-{n:04}"), Archetype::Safe).unwrap();
        prop_assert_eq!(d.record.risk_score(), 0);
        prop_assert_eq!(d.profile.archetype, Archetype::Safe);
        Ok(())
    })
}

/// Mean T1 maps of 50 Safe and 50 Risky drivers differ by > 0.01 per cell on average.
pub fn distributional_separation(_: u32) -> Result<(), String> {
    use rayon::prelude::*;
    let cfg = PopulationConfig {
        trajectories_per_driver: 30,
        seed: 1234,
        ..PopulationConfig::default()
    };
    let spec = builtin_specs().remove(0);
    let mean_map = |kind: Archetype, prefix: &str| -> Result<Vec<f64>, String> {
        let maps = (0..50)
            .into_par_iter()
            .map(|i| {
                let d = generate_driver(&cfg, DriverSet::Modeling, &format!("{prefix}-{i:04}"), kind)
                    .map_err(|e| e.to_string())?;
                let mut sum = vec![0.0; spec.cells()];
                for t in &d.trips {
                    let kt = derive_kinematics(t).map_err(|e| e.to_string())?;
                    let m = build_raw_feature_map(&kt, &spec).map_err(|e| e.to_string())?;
                    for (s, c) in sum.iter_mut().zip(&m.cells) {
                        *s += c;
                    }
                }
                Ok(sum.into_iter().map(|s| s / d.trips.len() as f64).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>, String>>()?;
        let mut mean = vec![0.0; spec.cells()];
        for m in &maps {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += b / maps.len() as f64;
            }
        }
        Ok(mean)
    };
    let safe = mean_map(Archetype::Safe, "safe")?;
    let risky = mean_map(Archetype::Risky, "risky")?;
    let diff = safe.iter().zip(&risky).map(|(a, b)| (a - b).abs()).sum::<f64>() / safe.len() as f64;
    ensure(diff > 0.01, || format!("mean absolute T1 difference {diff:.4}"))
}

/// Over 200 drivers per archetype: ≥ 20% of Risky have no record, ≥ 10% of Safe have one.
pub fn weak_label_noise(_: u32) -> Result<(), String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let (mut risky_clean, mut safe_dirty) = (0, 0);
    for i in 0..200u64 {
        let r = generate_profile("r", Archetype::Risky, 12.0, &mut rng);
        let s = generate_profile("s", Archetype::Safe, 12.0, &mut rng);
        risky_clean += usize::from(generate_records(&r, 5, 2 * i).risk_score() == 0);
        safe_dirty += usize::from(generate_records(&s, 5, 2 * i + 1).risk_score() > 0);
    }
    ensure(risky_clean >= 40 && safe_dirty >= 20, || {
        format!("risky without record {risky_clean}/200, safe with record {safe_dirty}/200")
    })
}

// ---- pipeline-cli ----

pub fn report_conservation(cases: u32) -> Result<(), String> {
    check(cases, proptest::collection::vec((0u32..5, 0usize..4), 1..60), |entries| {
        let kinds = [CohortLabel::LowRisk, CohortLabel::MediumRisk, CohortLabel::HighRisk, CohortLabel::Null];
        let mut records = Records::new();
        let mut labels = Vec::new();
        for (i, &(score, k)) in entries.iter().enumerate() {
            let id = format!("d{i}");
            records.insert(id.clone(), record(&id, score));
            labels.push((id, kinds[k]));
        }
        let r = cohort_report(&labels, &records, None).unwrap();
        let labeled = entries.iter().filter(|(_, k)| *k != 3).count();
        prop_assert_eq!(r.rows.iter().map(|x| x.drivers).sum::<usize>(), labeled);
        if labeled > 0 {
            prop_assert!((r.rows.iter().map(|x| x.share_pct).sum::<f64>() - 100.0).abs() < 1e-9);
            let recombined =
                r.rows.iter().map(|x| x.mean_risk_score * x.drivers as f64).sum::<f64>() / labeled as f64;
            prop_assert!((recombined - r.overall_mean_risk).abs() < 1e-9);
        }
        Ok(())
    })
}

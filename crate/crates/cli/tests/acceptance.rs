//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use chrono::{Datelike, NaiveDate};
use telerisk::cohorts::{identify_risk_cohorts, CohortLabel, Records};
use telerisk::context::{civil_twilight, PolarFlag};
use telerisk::deviation::{hellinger_distance, DeviationModel, DeviationParams, TripsByDriver};
use telerisk::featuremap::builtin_specs;
use telerisk::pipeline::{annotate_trajectories, fit_models, predict_drivers, PipelineConfig};
use telerisk::properties;
use telerisk::synth::{
    generate_driver, generate_population, speed_limit_grid, Archetype, DriverSet, PopulationConfig, SyntheticDriver,
};
use telerisk::trajectory::{angle_between, angular_speed, GeoPoint, EARTH_RADIUS_M};

// Tolerances and thresholds, one per checked quantity.
const ANGLE_TOL_DEG: f64 = 1e-3;
const ANGULAR_SPEED_TOL: f64 = 1e-4;
const HELLINGER_TOL: f64 = 1e-6;
const IDENTICAL_TOL: f64 = 1e-12;
const BINNING_CASES: u32 = 500;
const NULL_MEAN_ABS_MAX: f64 = 0.05;
const NULL_TRAJECTORIES: usize = 100;
const NULL_CONTROL_DRIVERS: usize = 20;
const NULL_BASE_DRIVERS: usize = 50;
const SEPARATION_MIN: f64 = 0.8;
const PLANTED_GAP_MIN: f64 = 0.3;
const ORACLE_ACCURACY_MIN: f64 = 0.85;
const ARCHETYPE_RECOVERY_MIN: f64 = 0.8;
const BASELINE_SEEDS: [u64; 3] = [42, 43, 44];
const TWILIGHT_TOL_S: i64 = 5 * 60;
const INVARIANT_CASES: u32 = 200;

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- criterion 1 ----

#[allow(clippy::approx_constant)]
fn formula_oracles() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol || got.is_nan() {
            failures.push(format!("{name}: {got} vs {want}±{tol}"));
        }
    };
    let o = GeoPoint { lat: 10.0, lng: 20.0 };
    let step = 1e-3;
    let collinear = angle_between(
        GeoPoint { lat: o.lat - step, lng: o.lng },
        o,
        GeoPoint { lat: o.lat + step, lng: o.lng },
    )
    .map_err(|e| e.to_string())?;
    check("collinear", collinear, 0.0, ANGLE_TOL_DEG);
    let right = angle_between(
        GeoPoint { lat: 0.0, lng: -step },
        GeoPoint { lat: 0.0, lng: 0.0 },
        GeoPoint { lat: step, lng: 0.0 },
    )
    .map_err(|e| e.to_string())?;
    check("right angle", right, 90.0, ANGLE_TOL_DEG);

    let dlat = (44.29 / EARTH_RADIUS_M).to_degrees();
    let w = angular_speed(GeoPoint { lat: 40.0, lng: -83.0 }, GeoPoint { lat: 40.0 + dlat, lng: -83.0 }, 1.0)
        .map_err(|e| e.to_string())?;
    check("angular speed", w, 0.025, ANGULAR_SPEED_TOL);

    let h = hellinger_distance(&[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?;
    // 0.70711 is the 5-digit rounding of sqrt(1/2); the tolerance applies to the exact value
    check("hellinger disjoint", h, 0.5f64.sqrt(), HELLINGER_TOL);
    check("hellinger disjoint, 5 digits", (h * 1e5).round() / 1e5, 0.70711, 0.0);
    let same = [0.2, 0.3, 0.5];
    let h0 = hellinger_distance(&same, &same).map_err(|e| e.to_string())?;
    check("hellinger identical", h0, 0.0, IDENTICAL_TOL);
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("right angle {right:.6}, angular speed {w:.6} rad/h, hellinger {h:.6}")
        } else {
            failures.join("; ")
        },
    )
}

// ---- criterion 2 ----

fn binning_oracle() -> Outcome {
    properties::binning_matches_oracle(BINNING_CASES)
        .map(|()| format!("{BINNING_CASES} trajectories x 22 specs match the brute-force oracle"))
}

// ---- criterion 3 ----

fn trips_of(drivers: &[SyntheticDriver], cfg: &PipelineConfig) -> Result<TripsByDriver, String> {
    let trips: Vec<_> = drivers.iter().flat_map(|d| d.trips.iter().cloned()).collect();
    annotate_trajectories(&trips, &speed_limit_grid(), cfg).map_err(|e| e.to_string())
}

fn null_test() -> Outcome {
    let cfg = PipelineConfig::default();
    let pop = PopulationConfig {
        trajectories_per_driver: NULL_TRAJECTORIES,
        seed: 7,
        ..PopulationConfig::default()
    };
    let safe = |i: usize| {
        generate_driver(&pop, DriverSet::Reference, &format!("ref-{i:04}"), Archetype::Safe).map_err(|e| e.to_string())
    };
    let all = (0..NULL_BASE_DRIVERS + NULL_CONTROL_DRIVERS + 1)
        .map(safe)
        .collect::<Result<Vec<_>, _>>()?;
    let (base, rest) = all.split_at(NULL_BASE_DRIVERS);
    let (control, observed) = rest.split_at(NULL_CONTROL_DRIVERS);
    let specs = builtin_specs();
    let params = DeviationParams {
        h_bins: cfg.h_bins,
        min_control_trajectories: cfg.min_control_trajectories,
    };
    let model =
        DeviationModel::fit(&trips_of(base, &cfg)?, &trips_of(control, &cfg)?, &specs, &params).map_err(|e| e.to_string())?;
    let obs_trips = trips_of(observed, &cfg)?;
    let (id, trips) = obs_trips.iter().next().ok_or("no observed driver")?;
    let maps = model.deviation_maps(id, trips).map_err(|e| e.to_string())?;
    let mut worst = (String::new(), 0.0f64);
    for (spec, m) in &maps.maps {
        let mean = m.cells.iter().map(|v| v.abs()).sum::<f64>() / m.cells.len() as f64;
        if mean > worst.1 {
            worst = (spec.to_string(), mean);
        }
    }
    verdict(
        !maps.maps.is_empty() && worst.1 < NULL_MEAN_ABS_MAX,
        format!("{} specs, largest mean |cell| {:.4} ({})", maps.maps.len(), worst.1, worst.0),
    )
}

// ---- criteria 4-6 ----

struct Experiment {
    risky_high: (usize, usize),
    safe_low: (usize, usize),
    cohort_gap: f64,
    oracle_agreement: (usize, usize),
    archetype_recovery: (usize, usize),
    refined_gap: f64,
    baseline_gap: f64,
}

fn planted_gap(labels: impl Iterator<Item = (String, CohortLabel)>, truth: &BTreeMap<String, (Archetype, f64)>) -> f64 {
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for (id, l) in labels {
        match l {
            CohortLabel::HighRisk => hi.push(truth[&id].1),
            CohortLabel::LowRisk => lo.push(truth[&id].1),
            _ => {}
        }
    }
    if hi.is_empty() || lo.is_empty() {
        // one cohort only: no separation at all
        return 0.0;
    }
    hi.iter().sum::<f64>() / hi.len() as f64 - lo.iter().sum::<f64>() / lo.len() as f64
}

fn experiment(seed: u64) -> Result<Experiment, String> {
    let err = |e: telerisk::Error| e.to_string();
    let mut cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    cfg.population.n_reference = 100;
    cfg.population.n_modeling = 100;
    cfg.population.n_heldout = 30;
    cfg.population.risky_fraction = 0.5;
    cfg.population.trajectories_per_driver = 30;
    cfg.cohort.k = 2;
    cfg.cohort.confidence = 0.8;
    let seeded = cfg.seeded();
    let pop = generate_population(&seeded.population).map_err(err)?;
    let trips = |set| {
        let v: Vec<_> = pop.set(set).flat_map(|d| d.trips.iter().cloned()).collect();
        annotate_trajectories(&v, &pop.grid, &cfg).map_err(err)
    };
    let (reference, modeling, heldout) = (trips(DriverSet::Reference)?, trips(DriverSet::Modeling)?, trips(DriverSet::Heldout)?);
    let records: Records = pop.drivers.iter().map(|d| (d.record.driver_id.clone(), d.record.clone())).collect();
    let truth: BTreeMap<String, (Archetype, f64)> = pop
        .drivers
        .iter()
        .map(|d| (d.profile.driver_id.clone(), (d.profile.archetype, d.profile.planted_risk)))
        .collect();

    let art = fit_models(&cfg, &reference, &modeling, &records).map_err(err)?;
    let labeled = art.cohorts.labeled();
    let (mut risky_high, mut safe_low) = ((0, 0), (0, 0));
    for (id, l) in &labeled {
        match truth[id].0 {
            Archetype::Risky => {
                risky_high.1 += 1;
                risky_high.0 += usize::from(*l == CohortLabel::HighRisk);
            }
            Archetype::Safe => {
                safe_low.1 += 1;
                safe_low.0 += usize::from(*l == CohortLabel::LowRisk);
            }
        }
    }
    let cohort_gap = planted_gap(labeled.clone().into_iter(), &truth);

    let mut warnings = Vec::new();
    let (refined, baseline) =
        predict_drivers(&art.deviation, &art.model, &art.baseline, &heldout, &mut warnings).map_err(err)?;

    // Oracle: the same consensus labeling run over modeling and held-out drivers together.
    let mut pooled = art.deviation_maps.clone();
    for (id, t) in &heldout {
        pooled.push(art.deviation.deviation_maps(id, t).map_err(err)?);
    }
    let layout = seeded.layout().map_err(err)?;
    let oracle = identify_risk_cohorts(&pooled, &layout.specs, &records, &seeded.cohort)
        .map_err(err)?
        .labeled();
    let mut oracle_agreement = (0, 0);
    let mut archetype_recovery = (0, 0);
    for p in &refined {
        if let Some(o) = oracle.get(&p.driver_id) {
            oracle_agreement.1 += 1;
            oracle_agreement.0 += usize::from(*o == p.label);
        }
        archetype_recovery.1 += 1;
        archetype_recovery.0 += usize::from((p.label == CohortLabel::HighRisk) == (truth[&p.driver_id].0 == Archetype::Risky));
    }
    Ok(Experiment {
        risky_high,
        safe_low,
        cohort_gap,
        oracle_agreement,
        archetype_recovery,
        refined_gap: planted_gap(refined.iter().map(|p| (p.driver_id.clone(), p.label)), &truth),
        baseline_gap: planted_gap(baseline.iter().map(|p| (p.driver_id.clone(), p.label)), &truth),
    })
}

fn ratio((a, b): (usize, usize)) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn separation(e: &Experiment) -> Outcome {
    let (r, s) = (ratio(e.risky_high), ratio(e.safe_low));
    verdict(
        r >= SEPARATION_MIN && s >= SEPARATION_MIN && e.cohort_gap >= PLANTED_GAP_MIN,
        format!(
            "risky->HighRisk {}/{}, safe->LowRisk {}/{}, planted gap {:.3}",
            e.risky_high.0, e.risky_high.1, e.safe_low.0, e.safe_low.1, e.cohort_gap
        ),
    )
}

fn classifier(e: &Experiment) -> Outcome {
    let (a, r) = (ratio(e.oracle_agreement), ratio(e.archetype_recovery));
    verdict(
        a >= ORACLE_ACCURACY_MIN && r >= ARCHETYPE_RECOVERY_MIN,
        format!(
            "agreement with oracle {}/{} ({a:.3}), archetype recovery {}/{} ({r:.3})",
            e.oracle_agreement.0, e.oracle_agreement.1, e.archetype_recovery.0, e.archetype_recovery.1
        ),
    )
}

fn baseline_inferiority(runs: &[(u64, Experiment)]) -> Outcome {
    let detail: Vec<String> = runs
        .iter()
        .map(|(s, e)| format!("seed {s}: refined {:.3} vs baseline {:.3}", e.refined_gap, e.baseline_gap))
        .collect();
    verdict(runs.iter().all(|(_, e)| e.baseline_gap < e.refined_gap), detail.join(", "))
}

// ---- criterion 7 ----

/// Sunrise/sunset algorithm from the Almanac for Computers, with the civil
/// zenith. Returns UT hours, or the polar flag when the sun never crosses it.
fn almanac_twilight(date: NaiveDate, lat: f64, lng: f64) -> Result<(f64, f64), PolarFlag> {
    let rad = PI / 180.0;
    let n = f64::from(date.ordinal());
    let lng_hour = lng / 15.0;
    let event = |rising: bool| -> Result<f64, PolarFlag> {
        let t = n + ((if rising { 6.0 } else { 18.0 }) - lng_hour) / 24.0;
        let m = 0.9856 * t - 3.289;
        let l = (m + 1.916 * (m * rad).sin() + 0.020 * (2.0 * m * rad).sin() + 282.634).rem_euclid(360.0);
        let mut ra = ((0.91764 * (l * rad).tan()).atan() / rad).rem_euclid(360.0);
        ra += (l / 90.0).floor() * 90.0 - (ra / 90.0).floor() * 90.0;
        ra /= 15.0;
        let sin_dec = 0.39782 * (l * rad).sin();
        let cos_dec = sin_dec.asin().cos();
        let cos_h = ((96.0 * rad).cos() - sin_dec * (lat * rad).sin()) / (cos_dec * (lat * rad).cos());
        if cos_h > 1.0 {
            return Err(PolarFlag::AllNight);
        }
        if cos_h < -1.0 {
            return Err(PolarFlag::AllDay);
        }
        let h = if rising { 360.0 - cos_h.acos() / rad } else { cos_h.acos() / rad } / 15.0;
        let local = h + ra - 0.06571 * t - 6.622;
        Ok((local - lng_hour).rem_euclid(24.0))
    };
    Ok((event(true)?, event(false)?))
}

/// Oracle UT hours resolved to the instant nearest `near`; the oracle only knows the hour of day.
fn nearest_instant(date: NaiveDate, ut_hours: f64, near: i64) -> i64 {
    let midnight = date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp();
    let base = midnight + (ut_hours * 3600.0).round() as i64;
    [base - 86_400, base, base + 86_400]
        .into_iter()
        .min_by_key(|t| (t - near).abs())
        .unwrap()
}

fn twilight() -> Outcome {
    let date = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).unwrap();
    let cases = [
        ("equator equinox", date(2019, 3, 20), 0.0, 0.0, 0),
        ("equator equinox, 80W", date(2019, 3, 20), 0.0, -80.0, -300),
        ("40N June solstice", date(2019, 6, 21), 40.0, 0.0, 0),
        ("40N December solstice", date(2019, 12, 22), 40.0, 0.0, 0),
        ("40N June solstice, 83W", date(2019, 6, 21), 40.0, -83.0, -300),
        ("40N December solstice, 83W", date(2019, 12, 22), 40.0, -83.0, -300),
    ];
    let mut worst = 0i64;
    let mut failures = Vec::new();
    for (name, d, lat, lng, offset) in cases {
        let w = civil_twilight(d, GeoPoint { lat, lng }, offset);
        let (dawn, dusk) = almanac_twilight(d, lat, lng).map_err(|f| format!("{name}: oracle says {f:?}"))?;
        if w.polar_flag != PolarFlag::Normal {
            failures.push(format!("{name}: {:?}", w.polar_flag));
            continue;
        }
        let err_dawn = (nearest_instant(d, dawn, w.civil_dawn) - w.civil_dawn).abs();
        let err_dusk = (nearest_instant(d, dusk, w.civil_dusk) - w.civil_dusk).abs();
        worst = worst.max(err_dawn).max(err_dusk);
        if err_dawn > TWILIGHT_TOL_S || err_dusk > TWILIGHT_TOL_S {
            failures.push(format!("{name}: dawn off {err_dawn}s, dusk off {err_dusk}s"));
        }
    }
    for (name, d, want) in [
        ("80N June", date(2019, 6, 21), PolarFlag::AllDay),
        ("80N December", date(2019, 12, 22), PolarFlag::AllNight),
    ] {
        let got = civil_twilight(d, GeoPoint { lat: 80.0, lng: 0.0 }, 0).polar_flag;
        let oracle = almanac_twilight(d, 80.0, 0.0).err();
        if got != want || oracle != Some(want) {
            failures.push(format!("{name}: got {got:?}, oracle {oracle:?}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("6 dates within {worst}s of the almanac oracle, polar cases flagged")
        } else {
            failures.join("; ")
        },
    )
}

// ---- criterion 8 ----

const DETERMINISM_CONFIG: &str = r#"
seed = 11
[population]
n_reference = 40
n_modeling = 40
n_heldout = 12
trajectories_per_driver = 20
points_per_trajectory = 200
[classifier]
num_estimators = 60
"#;

fn telerisk(args: &[&str], config: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_telerisk"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(bytes) = std::fs::read(&path) {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    files
}

fn pipeline_run(root: &Path, workers: usize) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let config = root.join("config.toml");
    let body = format!(
        "workers = {workers}\n{DETERMINISM_CONFIG}[paths]\ndata_dir = {:?}\noutput_dir = {:?}\n",
        root.join("data"),
        root.join("out")
    );
    std::fs::write(&config, body).map_err(|e| e.to_string())?;
    for cmd in ["synth", "model", "predict", "report"] {
        telerisk(&[cmd], &config)?;
    }
    let mut files = snapshot(&root.join("data"));
    for (k, v) in snapshot(&root.join("out")) {
        files.insert(Path::new("out").join(k), v);
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [("a", 1), ("b", 1), ("c", 8)]
        .into_iter()
        .map(|(name, w)| {
            let dir = tmp.path().join(name);
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            pipeline_run(&dir, w)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut diffs = Vec::new();
    for other in &runs[1..] {
        if other.keys().ne(runs[0].keys()) {
            diffs.push("file sets differ".to_string());
        }
        for (path, bytes) in &runs[0] {
            if other.get(path) != Some(bytes) {
                diffs.push(path.display().to_string());
            }
        }
    }

    // predict must leave the model artifacts untouched
    let a = tmp.path().join("a");
    let before = snapshot(&a.join("out/model"));
    telerisk(&["predict"], &a.join("config.toml"))?;
    let after = snapshot(&a.join("out/model"));
    let repeat = std::fs::read(a.join("out/predictions.csv")).map_err(|e| e.to_string())?;
    if before != after {
        diffs.push("predict modified the model directory".into());
    }
    if Some(&repeat) != runs[0].get(Path::new("out/predictions.csv")) {
        diffs.push("repeated predict changed predictions.csv".into());
    }
    diffs.sort();
    diffs.dedup();
    verdict(
        diffs.is_empty(),
        if diffs.is_empty() {
            format!("{} files identical over 2 runs and 1 vs 8 workers; predict is read-only", runs[0].len())
        } else {
            format!("differences: {}", diffs.join(", "))
        },
    )
}

// ---- criterion 9 ----

fn invariants() -> Outcome {
    let outcomes = properties::run_all(INVARIANT_CASES);
    let failed: Vec<String> = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().err().map(|e| format!("{}::{}: {e}", o.module, o.name)))
        .collect();
    let modules: std::collections::BTreeSet<&str> = outcomes.iter().map(|o| o.module).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!(
                "{} properties across {} modules, {INVARIANT_CASES} cases each where randomized",
                outcomes.len(),
                modules.len()
            )
        } else {
            failed.join("; ")
        },
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    };

    let t = Instant::now();
    report(1, "formula oracles", t, formula_oracles());
    let t = Instant::now();
    report(2, "binning oracle", t, binning_oracle());
    let t = Instant::now();
    report(3, "deviation null test", t, null_test());

    let t = Instant::now();
    let mut runs = Vec::new();
    let mut experiment_error = None;
    for seed in BASELINE_SEEDS {
        match experiment(seed) {
            Ok(e) => runs.push((seed, e)),
            Err(e) => experiment_error = Some(format!("seed {seed}: {e}")),
        }
    }
    match (&experiment_error, runs.iter().find(|(s, _)| *s == 42)) {
        (None, Some((_, e))) => {
            report(4, "cohort separation", t, separation(e));
            report(5, "classifier", t, classifier(e));
            report(6, "baseline inferiority", t, baseline_inferiority(&runs));
        }
        _ => {
            let msg = experiment_error.unwrap_or_else(|| "seed 42 missing".into());
            for (n, name) in [(4, "cohort separation"), (5, "classifier"), (6, "baseline inferiority")] {
                report(n, name, t, Err(msg.clone()));
            }
        }
    }

    let t = Instant::now();
    report(7, "civil twilight", t, twilight());
    let t = Instant::now();
    report(8, "determinism", t, determinism());
    let t = Instant::now();
    report(9, "invariant suites", t, invariants());

    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

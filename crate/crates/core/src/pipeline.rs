//! End-to-end orchestration: synthesize, model, predict and report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    cross_validate, read_predictions, train_baseline, train_gbc, vectorize, write_predictions, CohortClassifier,
    CvReport, FeatureLayout, FeatureVector, Prediction, RiskModel,
};
use crate::cohorts::{identify_risk_cohorts, read_records, CohortConfig, CohortLabel, CohortOutcome, Records};
use crate::context::{annotate_all, SpeedLimitGrid, TurnParams};
use crate::deviation::{
    summarize_drivers, DeviationModel, DeviationParams, DriverDeviationMaps, DriverFeatures, ReferenceSplit,
    TripsByDriver,
};
use crate::error::{Error, Result};
use crate::featuremap::{build_raw_feature_map, specs_with_bins, FeatureMap, SpecGroup, SpecId};
use crate::gbdt::GbcParams;
use crate::report::{cohort_report, CohortReport};
use crate::synth::{derive_seed, generate_population, Manifest, PopulationConfig, DriverSet};
use crate::trajectory::{derive_kinematics, read_trajectories_csv, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Where `synth` writes and the other stages read the dataset.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub reference: Option<PathBuf>,
    pub modeling: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub speed_limits: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            reference: None,
            modeling: None,
            heldout: None,
            records: None,
            speed_limits: None,
            manifest: None,
        }
    }
}

impl PathsConfig {
    fn or_data(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.data_dir.join(name))
    }
    pub fn reference(&self) -> PathBuf {
        self.or_data(&self.reference, DriverSet::Reference.file_name())
    }
    pub fn modeling(&self) -> PathBuf {
        self.or_data(&self.modeling, DriverSet::Modeling.file_name())
    }
    pub fn heldout(&self) -> PathBuf {
        self.or_data(&self.heldout, DriverSet::Heldout.file_name())
    }
    pub fn records(&self) -> PathBuf {
        self.or_data(&self.records, "records.csv")
    }
    pub fn speed_limits(&self) -> PathBuf {
        self.or_data(&self.speed_limits, "speed_limits.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.or_data(&self.manifest, "population.json")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("model")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub utc_offset_minutes: i32,
    pub speed_limit_cell: f64,
    pub y_bins: usize,
    pub x_bins: usize,
    pub h_bins: usize,
    pub split_fraction: f64,
    pub min_control_trajectories: usize,
    pub groups: Vec<SpecGroup>,
    pub turns: TurnParams,
    pub cohort: CohortConfig,
    pub classifier: GbcParams,
    pub population: PopulationConfig,
    pub cv_folds: usize,
    /// Also persist every per-trajectory raw map.
    pub write_raw_maps: bool,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 0,
            utc_offset_minutes: crate::synth::UTC_OFFSET_MINUTES,
            speed_limit_cell: crate::synth::SPEED_LIMIT_CELL,
            y_bins: crate::featuremap::DEFAULT_BINS,
            x_bins: crate::featuremap::DEFAULT_BINS,
            h_bins: crate::deviation::DEFAULT_H_BINS,
            split_fraction: 0.7,
            min_control_trajectories: 20,
            groups: vec![SpecGroup::G1],
            turns: TurnParams::default(),
            cohort: CohortConfig::default(),
            classifier: GbcParams::default(),
            population: PopulationConfig::default(),
            cv_folds: 5,
            write_raw_maps: false,
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads TOML or JSON, chosen by extension (TOML otherwise).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction must be in (0, 1), got {}", self.split_fraction));
        }
        if self.groups.is_empty() {
            return bad("groups must select at least one feature group".into());
        }
        if self.y_bins < 2 || self.x_bins < 2 || self.h_bins < 2 {
            return bad("y_bins, x_bins and h_bins must be at least 2".into());
        }
        if !(self.speed_limit_cell > 0.0) {
            return bad(format!("speed_limit_cell must be positive, got {}", self.speed_limit_cell));
        }
        if !(self.turns.min_heading_change_deg > 0.0) || self.turns.max_window_s <= 0 {
            return bad("turn thresholds must be positive".into());
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be at least 2".into());
        }
        self.cohort.validate()?;
        self.classifier.validate()?;
        self.population.validate()
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.population.seed = derive_seed(self.seed, "population");
        c.cohort.seed = derive_seed(self.seed, "cohort");
        c.classifier.seed = derive_seed(self.seed, "classifier");
        c
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn deviation_params(&self) -> DeviationParams {
        DeviationParams {
            h_bins: self.h_bins,
            min_control_trajectories: self.min_control_trajectories,
        }
    }

    pub fn layout(&self) -> Result<FeatureLayout> {
        FeatureLayout::for_groups(&self.groups, self.y_bins, self.x_bins)
    }

    /// Runs `f` on a pool sized by `workers`.
    pub fn run<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("cannot start {} workers: {e}", self.workers)))?;
        pool.install(f)
    }
}

/// Derives kinematics and context for every trajectory, grouped by driver.
pub fn annotate_trajectories(
    trajectories: &[Trajectory],
    grid: &SpeedLimitGrid,
    config: &PipelineConfig,
) -> Result<TripsByDriver> {
    let annotated = trajectories
        .par_iter()
        .map(|t| {
            derive_kinematics(t).map(|kt| annotate_all(kt, grid, config.utc_offset_minutes, &config.turns))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_driver = TripsByDriver::new();
    for kt in annotated {
        by_driver.entry(kt.driver_id.clone()).or_default().push(kt);
    }
    Ok(by_driver)
}

pub fn load_trips(path: &Path, grid: &SpeedLimitGrid, config: &PipelineConfig) -> Result<TripsByDriver> {
    let trajectories = read_trajectories_csv(path)?;
    info!("{}: {} trajectories", path.display(), trajectories.len());
    annotate_trajectories(&trajectories, grid, config)
}

pub type DriverMaps = BTreeMap<SpecId, FeatureMap>;

/// Per-driver average raw maps, the baseline's input.
pub fn average_raw_maps(features: &[DriverFeatures], deviation: &DeviationModel) -> BTreeMap<String, DriverMaps> {
    features
        .iter()
        .map(|f| {
            let maps = deviation
                .specs
                .iter()
                .zip(&f.specs)
                .filter_map(|(spec, s)| s.average_map(spec).map(|m| (spec.id, m)))
                .collect();
            (f.driver_id.clone(), maps)
        })
        .collect()
}

/// Vectorizes every driver it can; too-sparse drivers are reported and skipped.
pub fn vectorize_all<'a, M: crate::classifier::CellGrid + 'a>(
    drivers: impl IntoIterator<Item = (&'a str, &'a BTreeMap<SpecId, M>)>,
    layout: &FeatureLayout,
    warnings: &mut Vec<String>,
) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::new();
    for (id, maps) in drivers {
        match vectorize(id, maps, layout) {
            Ok(fv) => out.push(fv),
            Err(e @ Error::TooSparse { .. }) => {
                warn!("{e}");
                warnings.push(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Everything the modeling process produces.
#[derive(Debug, Clone)]
pub struct ModelArtifacts {
    pub split: ReferenceSplit,
    pub deviation: DeviationModel,
    pub deviation_maps: Vec<DriverDeviationMaps>,
    pub average_maps: BTreeMap<String, DriverMaps>,
    pub cohorts: CohortOutcome,
    pub model: RiskModel,
    pub baseline: RiskModel,
    pub warnings: Vec<String>,
}

/// Reference statistics and deviation maps for the modeling drivers.
pub fn fit_deviation(
    config: &PipelineConfig,
    reference: &TripsByDriver,
    modeling: &TripsByDriver,
) -> Result<(ReferenceSplit, DeviationModel, Vec<DriverDeviationMaps>, BTreeMap<String, DriverMaps>)> {
    let split = ReferenceSplit::new(reference.keys().map(String::as_str), config.split_fraction, config.split_seed())?;
    let pick = |ids: &BTreeSet<String>| -> TripsByDriver {
        reference
            .iter()
            .filter(|(id, _)| ids.contains(*id))
            .map(|(id, t)| (id.clone(), t.clone()))
            .collect()
    };
    let specs = specs_with_bins(config.y_bins, config.x_bins)?;
    let deviation = DeviationModel::fit(&pick(&split.base), &pick(&split.control), &specs, &config.deviation_params())?;
    let features = summarize_drivers(modeling, &specs, config.h_bins)?;
    let maps = features
        .par_iter()
        .map(|f| deviation.deviation_maps_from(f))
        .collect::<Result<Vec<_>>>()?;
    let averages = average_raw_maps(&features, &deviation);
    Ok((split, deviation, maps, averages))
}

/// The modeling process: deviation maps, cohort labels and both classifiers.
pub fn fit_models(
    config: &PipelineConfig,
    reference: &TripsByDriver,
    modeling: &TripsByDriver,
    records: &Records,
) -> Result<ModelArtifacts> {
    let config = config.seeded();
    let layout = config.layout()?;
    let (split, deviation, deviation_maps, average_maps) = fit_deviation(&config, reference, modeling)?;
    let cohorts = identify_risk_cohorts(&deviation_maps, &layout.specs, records, &config.cohort)?;
    let mut warnings = cohorts.warnings.clone();

    let labeled = cohorts.labeled();
    let by_id: BTreeMap<&str, &DriverDeviationMaps> =
        deviation_maps.iter().map(|d| (d.driver_id.as_str(), d)).collect();
    let refined = vectorize_all(
        labeled.keys().map(|id| (id.as_str(), &by_id[id.as_str()].maps)),
        &layout,
        &mut warnings,
    )?;
    let labels: Vec<bool> = refined
        .iter()
        .map(|fv| labeled[&fv.driver_id] == CohortLabel::HighRisk)
        .collect();
    info!(
        "training on {} refined labels ({} high-risk)",
        labels.len(),
        labels.iter().filter(|&&l| l).count()
    );
    let model = train_gbc(&refined, &labels, &config.groups, &layout, &config.classifier)?;

    let raw = vectorize_all(average_maps.iter().map(|(id, m)| (id.as_str(), m)), &layout, &mut warnings)?;
    let baseline = train_baseline(&raw, records, &config.groups, &layout, &config.classifier)?;

    Ok(ModelArtifacts {
        split,
        deviation,
        deviation_maps,
        average_maps,
        cohorts,
        model,
        baseline,
        warnings,
    })
}

/// The prediction process for unseen drivers, refined and baseline.
pub fn predict_drivers(
    deviation: &DeviationModel,
    model: &RiskModel,
    baseline: &RiskModel,
    trips: &TripsByDriver,
    warnings: &mut Vec<String>,
) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    check_layout(deviation, model)?;
    check_layout(deviation, baseline)?;
    let features = summarize_drivers(trips, &deviation.specs, deviation.h_bins)?;
    let maps = features
        .par_iter()
        .map(|f| deviation.deviation_maps_from(f))
        .collect::<Result<Vec<_>>>()?;
    let averages = average_raw_maps(&features, deviation);

    let score = |m: &RiskModel, fvs: Vec<FeatureVector>| -> Result<Vec<Prediction>> {
        fvs.par_iter()
            .map(|fv| {
                let (label, score) = m.predict(fv)?;
                Ok(Prediction {
                    driver_id: fv.driver_id.clone(),
                    label,
                    score,
                })
            })
            .collect()
    };
    let refined = vectorize_all(maps.iter().map(|d| (d.driver_id.as_str(), &d.maps)), &model.layout, warnings)?;
    let raw = vectorize_all(averages.iter().map(|(id, m)| (id.as_str(), m)), &baseline.layout, warnings)?;
    Ok((score(model, refined)?, score(baseline, raw)?))
}

/// Fails unless the stored reference statistics can featurize for `model`.
pub fn check_layout(deviation: &DeviationModel, model: &RiskModel) -> Result<()> {
    for spec in &model.layout.specs {
        let Some(s) = deviation.specs.iter().find(|s| s.id == *spec) else {
            return Err(Error::ModelMismatch(format!("{spec} is not in the stored deviation model")));
        };
        if (s.y_bins, s.x_bins) != (model.layout.y_bins, model.layout.x_bins) {
            return Err(Error::ModelMismatch(format!(
                "{spec}: stored maps are {}x{} but the model expects {}x{}",
                s.y_bins, s.x_bins, model.layout.y_bins, model.layout.x_bins
            )));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value).map_err(|e| Error::parse(path, e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub const MODEL_FILE: &str = "model.json";
pub const BASELINE_FILE: &str = "baseline_model.json";
pub const DEVIATION_FILE: &str = "deviation_model.json";
pub const SPLIT_FILE: &str = "split.json";
pub const COHORTS_FILE: &str = "cohorts.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const BASELINE_PREDICTIONS_FILE: &str = "baseline_predictions.csv";

/// Deviation map JSON, without the redundant bin sizes.
#[derive(Serialize)]
struct DeviationMapFile<'a> {
    spec_id: SpecId,
    driver_id: &'a str,
    cells: &'a [f64],
}

impl ModelArtifacts {
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.model.save(&dir.join(MODEL_FILE))?;
        self.baseline.save(&dir.join(BASELINE_FILE))?;
        write_json(&dir.join(DEVIATION_FILE), &self.deviation)?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        self.cohorts.write_csv(&dir.join(COHORTS_FILE))?;

        let maps_dir = dir.join("deviation_maps");
        create_dir(&maps_dir)?;
        let mut missing = String::from("driver_id,spec_id\n");
        for d in &self.deviation_maps {
            let driver_dir = maps_dir.join(&d.driver_id);
            create_dir(&driver_dir)?;
            for m in d.maps.values() {
                write_json(
                    &driver_dir.join(format!("{}.json", m.spec_id)),
                    &DeviationMapFile {
                        spec_id: m.spec_id,
                        driver_id: &d.driver_id,
                        cells: &m.cells,
                    },
                )?;
            }
            for spec in d.missing(&self.deviation.specs) {
                missing.push_str(&format!("{},{spec}\n", d.driver_id));
            }
        }
        let path = maps_dir.join("missing.csv");
        std::fs::write(&path, missing).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("warnings.txt");
        std::fs::write(&path, self.warnings.join("\n")).map_err(|e| Error::io(&path, e))
    }
}

/// Persists `<driver>/<trajectory>/<spec>.json` for every non-empty raw map.
pub fn write_raw_maps(dir: &Path, trips: &TripsByDriver, config: &PipelineConfig) -> Result<()> {
    let specs = specs_with_bins(config.y_bins, config.x_bins)?;
    trips.par_iter().try_for_each(|(driver, kts)| {
        for kt in kts {
            let tdir = dir.join(driver).join(&kt.trajectory_id);
            create_dir(&tdir)?;
            for spec in &specs {
                let map = build_raw_feature_map(kt, spec)?;
                if !map.is_empty() {
                    write_json(&tdir.join(format!("{}.json", spec.id)), &map)?;
                }
            }
        }
        Ok(())
    })
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<Manifest> {
    let config = config.seeded();
    config.run(|| {
        let population = generate_population(&config.population)?;
        population.write(&config.paths.data_dir)?;
        Ok(population.manifest())
    })
}

fn load_grid(config: &PipelineConfig) -> Result<SpeedLimitGrid> {
    SpeedLimitGrid::read_csv(&config.paths.speed_limits(), config.speed_limit_cell)
}

pub fn cmd_model(config: &PipelineConfig) -> Result<ModelArtifacts> {
    config.run(|| {
        let records = read_records(&config.paths.records())?;
        let grid = load_grid(config)?;
        let reference = load_trips(&config.paths.reference(), &grid, config)?;
        let modeling = load_trips(&config.paths.modeling(), &grid, config)?;
        for id in modeling.keys() {
            if !records.contains_key(id) {
                return Err(Error::DriverSetMismatch(format!("no record for modeling driver {id}")));
            }
        }
        let artifacts = fit_models(config, &reference, &modeling, &records)?;
        artifacts.write(&config.paths.model_dir())?;
        if config.write_raw_maps {
            write_raw_maps(&config.paths.output_dir.join("raw_maps"), &modeling, config)?;
        }
        Ok(artifacts)
    })
}

pub struct StoredModels {
    pub model: RiskModel,
    pub baseline: RiskModel,
    pub deviation: DeviationModel,
}

pub fn load_models(dir: &Path) -> Result<StoredModels> {
    Ok(StoredModels {
        model: RiskModel::load(&dir.join(MODEL_FILE))?,
        baseline: RiskModel::load(&dir.join(BASELINE_FILE))?,
        deviation: read_json(&dir.join(DEVIATION_FILE))?,
    })
}

/// Predicts the held-out drivers with the stored models; never writes into the model directory.
pub fn cmd_predict(config: &PipelineConfig) -> Result<(Vec<Prediction>, Vec<Prediction>)> {
    config.run(|| {
        let stored = load_models(&config.paths.model_dir())?;
        if (stored.model.layout.y_bins, stored.model.layout.x_bins) != (config.y_bins, config.x_bins) {
            return Err(Error::ModelMismatch(format!(
                "model was trained on {}x{} maps, config asks for {}x{}",
                stored.model.layout.y_bins, stored.model.layout.x_bins, config.y_bins, config.x_bins
            )));
        }
        let grid = load_grid(config)?;
        let heldout = load_trips(&config.paths.heldout(), &grid, config)?;
        let mut warnings = Vec::new();
        let (refined, baseline) =
            predict_drivers(&stored.deviation, &stored.model, &stored.baseline, &heldout, &mut warnings)?;
        create_dir(&config.paths.output_dir)?;
        write_predictions(&config.paths.output_dir.join(PREDICTIONS_FILE), &refined)?;
        write_predictions(&config.paths.output_dir.join(BASELINE_PREDICTIONS_FILE), &baseline)?;
        Ok((refined, baseline))
    })
}

/// Reports for the refined and baseline predictions, written next to them.
pub fn cmd_report(config: &PipelineConfig) -> Result<(CohortReport, CohortReport)> {
    let records = read_records(&config.paths.records())?;
    let manifest_path = config.paths.manifest();
    let planted: Option<BTreeMap<String, f64>> = if manifest_path.exists() {
        let m = Manifest::load(&manifest_path)?;
        Some(m.drivers.into_iter().map(|d| (d.driver_id, d.planted_risk)).collect())
    } else {
        None
    };
    let out = &config.paths.output_dir;
    let mut reports = Vec::new();
    for (file, prefix) in [(PREDICTIONS_FILE, "report"), (BASELINE_PREDICTIONS_FILE, "baseline_report")] {
        let preds = read_predictions(&out.join(file))?;
        let labels: Vec<(String, CohortLabel)> = preds.into_iter().map(|p| (p.driver_id, p.label)).collect();
        let report = cohort_report(&labels, &records, planted.as_ref())?;
        report.write(out, prefix)?;
        reports.push(report);
    }
    let baseline = reports.pop().expect("two reports");
    Ok((reports.pop().expect("two reports"), baseline))
}

/// k-fold cross-validation of the refined classifier on the modeling set.
pub fn cmd_cv(config: &PipelineConfig) -> Result<CvReport> {
    config.run(|| {
        let cfg = config.seeded();
        let records = read_records(&cfg.paths.records())?;
        let grid = load_grid(&cfg)?;
        let reference = load_trips(&cfg.paths.reference(), &grid, &cfg)?;
        let modeling = load_trips(&cfg.paths.modeling(), &grid, &cfg)?;
        let layout = cfg.layout()?;
        let (_, _, maps, _) = fit_deviation(&cfg, &reference, &modeling)?;
        let cohorts = identify_risk_cohorts(&maps, &layout.specs, &records, &cfg.cohort)?;
        let labeled = cohorts.labeled();
        let mut warnings = Vec::new();
        let fvs = vectorize_all(
            maps.iter()
                .filter(|d| labeled.contains_key(&d.driver_id))
                .map(|d| (d.driver_id.as_str(), &d.maps)),
            &layout,
            &mut warnings,
        )?;
        let labels: Vec<bool> = fvs.iter().map(|f| labeled[&f.driver_id] == CohortLabel::HighRisk).collect();
        cross_validate(&fvs, &labels, &layout, &cfg.classifier, cfg.cv_folds, cfg.classifier.seed)
    })
}

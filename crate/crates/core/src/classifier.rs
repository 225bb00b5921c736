//! Risk-cohort classifier over flattened feature maps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohorts::{CohortLabel, DriverRecord};
use crate::deviation::DeviationFeatureMap;
use crate::error::{Error, Result};
use crate::featuremap::{builtin_specs, FeatureMap, SpecGroup, SpecId};
use crate::gbdt::{log_loss, Ensemble, GbcParams};

pub const MODEL_VERSION: u32 = 1;

/// Anything that flattens to a row-major `y_bins × x_bins` grid.
pub trait CellGrid {
    fn dims(&self) -> (usize, usize);
    fn cells(&self) -> &[f64];
}

impl CellGrid for FeatureMap {
    fn dims(&self) -> (usize, usize) {
        (self.y_bins, self.x_bins)
    }
    fn cells(&self) -> &[f64] {
        &self.cells
    }
}

impl CellGrid for DeviationFeatureMap {
    fn dims(&self) -> (usize, usize) {
        (self.y_bins, self.x_bins)
    }
    fn cells(&self) -> &[f64] {
        &self.cells
    }
}

/// Spec ids of the selected groups, in canonical T-order.
pub fn specs_in_groups(groups: &[SpecGroup]) -> Vec<SpecId> {
    builtin_specs()
        .into_iter()
        .filter(|s| groups.contains(&s.group))
        .map(|s| s.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub specs: Vec<SpecId>,
    pub y_bins: usize,
    pub x_bins: usize,
}

impl FeatureLayout {
    pub fn for_groups(groups: &[SpecGroup], y_bins: usize, x_bins: usize) -> Result<Self> {
        let specs = specs_in_groups(groups);
        if specs.is_empty() {
            return Err(Error::ConfigInvalid("no feature group selected".into()));
        }
        Ok(FeatureLayout { specs, y_bins, x_bins })
    }

    /// Number of map cells, excluding mask bits.
    pub fn len(&self) -> usize {
        self.specs.len() * self.y_bins * self.x_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model input width: cells followed by one mask bit per spec.
    pub fn input_len(&self) -> usize {
        self.len() + self.specs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub driver_id: String,
    pub values: Vec<f64>,
    /// One entry per layout spec, true where the map was present.
    pub mask: Vec<bool>,
}

impl FeatureVector {
    pub fn model_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.values.len() + self.mask.len());
        v.extend_from_slice(&self.values);
        v.extend(self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        v
    }
}

/// Flattens a driver's maps; absent specs are zero-filled and masked off.
pub fn vectorize<M: CellGrid>(
    driver_id: &str,
    maps: &BTreeMap<SpecId, M>,
    layout: &FeatureLayout,
) -> Result<FeatureVector> {
    let available = layout.specs.iter().filter(|s| maps.contains_key(s)).count();
    let required = layout.specs.len().div_ceil(2);
    if available < required {
        return Err(Error::TooSparse {
            driver: driver_id.to_string(),
            available,
            required,
        });
    }
    let cells = layout.y_bins * layout.x_bins;
    let mut values = Vec::with_capacity(layout.len());
    let mut mask = Vec::with_capacity(layout.specs.len());
    for spec in &layout.specs {
        match maps.get(spec) {
            Some(m) => {
                if m.dims() != (layout.y_bins, layout.x_bins) || m.cells().len() != cells {
                    return Err(Error::DimensionMismatch {
                        expected: cells,
                        found: m.cells().len(),
                    });
                }
                values.extend_from_slice(m.cells());
                mask.push(true);
            }
            None => {
                values.extend(std::iter::repeat_n(0.0, cells));
                mask.push(false);
            }
        }
    }
    Ok(FeatureVector {
        driver_id: driver_id.to_string(),
        values,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    Refined,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub version: u32,
    pub mode: ModelMode,
    pub groups: Vec<SpecGroup>,
    pub layout: FeatureLayout,
    pub params: GbcParams,
    #[serde(flatten)]
    pub ensemble: Ensemble,
}

/// Scoring seam shared by all cohort classifiers.
pub trait CohortClassifier {
    /// Probability of the HighRisk cohort.
    fn score(&self, fv: &FeatureVector) -> Result<f64>;

    fn predict(&self, fv: &FeatureVector) -> Result<(CohortLabel, f64)> {
        let s = self.score(fv)?;
        let label = if s >= 0.5 {
            CohortLabel::HighRisk
        } else {
            CohortLabel::LowRisk
        };
        Ok((label, s))
    }
}

impl CohortClassifier for RiskModel {
    fn score(&self, fv: &FeatureVector) -> Result<f64> {
        if fv.values.len() != self.layout.len() || fv.mask.len() != self.layout.specs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.len(),
                found: fv.values.len(),
            });
        }
        self.ensemble.predict_proba(&fv.model_input())
    }
}

impl RiskModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: RiskModel = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if model.version != MODEL_VERSION {
            return Err(Error::ModelMismatch(format!(
                "{}: model version {} is not supported (expected {MODEL_VERSION})",
                path.display(),
                model.version
            )));
        }
        if model.ensemble.n_features != model.layout.input_len() {
            return Err(Error::ModelMismatch(format!(
                "{}: model expects {} inputs but its layout has {}",
                path.display(),
                model.ensemble.n_features,
                model.layout.input_len()
            )));
        }
        Ok(model)
    }
}

pub fn predict(model: &RiskModel, fv: &FeatureVector) -> Result<(CohortLabel, f64)> {
    model.predict(fv)
}

fn design_matrix(features: &[FeatureVector], layout: &FeatureLayout) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|f| {
            if f.values.len() != layout.len() || f.mask.len() != layout.specs.len() {
                return Err(Error::DimensionMismatch {
                    expected: layout.len(),
                    found: f.values.len(),
                });
            }
            Ok(f.model_input())
        })
        .collect()
}

/// Trains the refined-label classifier; `labels[i]` is true for HighRisk.
pub fn train_gbc(
    features: &[FeatureVector],
    labels: &[bool],
    groups: &[SpecGroup],
    layout: &FeatureLayout,
    params: &GbcParams,
) -> Result<RiskModel> {
    train(ModelMode::Refined, features, labels, groups, layout, params)
}

fn train(
    mode: ModelMode,
    features: &[FeatureVector],
    labels: &[bool],
    groups: &[SpecGroup],
    layout: &FeatureLayout,
    params: &GbcParams,
) -> Result<RiskModel> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: features.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(Error::DegenerateLabels);
    }
    let x = design_matrix(features, layout)?;
    let ensemble = Ensemble::fit(&x, labels, params)?;
    Ok(RiskModel {
        version: MODEL_VERSION,
        mode,
        groups: groups.to_vec(),
        layout: layout.clone(),
        params: *params,
        ensemble,
    })
}

/// Original weak label: any citation or at-fault accident counts as risky.
pub fn baseline_label(record: &DriverRecord) -> bool {
    record.risk_score() > 0
}

/// Baseline classifier on averaged raw maps and the original weak labels.
pub fn train_baseline(
    avg_raw_maps: &[FeatureVector],
    records: &BTreeMap<String, DriverRecord>,
    groups: &[SpecGroup],
    layout: &FeatureLayout,
    params: &GbcParams,
) -> Result<RiskModel> {
    let labels = avg_raw_maps
        .iter()
        .map(|f| {
            records
                .get(&f.driver_id)
                .map(baseline_label)
                .ok_or_else(|| Error::DriverSetMismatch(format!("no record for driver {}", f.driver_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    train(ModelMode::Baseline, avg_raw_maps, &labels, groups, layout, params)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub fold_log_loss: Vec<f64>,
    pub mean_log_loss: f64,
}

/// k-fold cross-validation scored by held-out log-loss.
pub fn cross_validate(
    features: &[FeatureVector],
    labels: &[bool],
    layout: &FeatureLayout,
    params: &GbcParams,
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    if folds < 2 || folds > features.len() {
        return Err(Error::ConfigInvalid(format!(
            "fold count {folds} must be in [2, {}]",
            features.len()
        )));
    }
    let x = design_matrix(features, layout)?;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_log_loss = Vec::with_capacity(folds);
    for f in 0..folds {
        let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == f {
                vx.push(x[i].clone());
                vy.push(labels[i]);
            } else {
                tx.push(x[i].clone());
                ty.push(labels[i]);
            }
        }
        let model = Ensemble::fit(&tx, &ty, params)?;
        let p = vx
            .iter()
            .map(|r| model.predict_proba(r))
            .collect::<Result<Vec<_>>>()?;
        fold_log_loss.push(log_loss(&vy, &p));
    }
    let mean_log_loss = fold_log_loss.iter().sum::<f64>() / folds as f64;
    Ok(CvReport {
        fold_log_loss,
        mean_log_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub driver_id: String,
    pub label: CohortLabel,
    pub score: f64,
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::from("driver_id,label,score\n");
    for p in predictions {
        out.push_str(&format!("{},{},{:.12}\n", p.driver_id, p.label, p.score));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::parse(path, format!("expected 3 columns, got {}", row.len())));
        }
        let label: CohortLabel = row[1]
            .parse()
            .map_err(|e: Error| Error::parse(path, e.to_string()))?;
        let score: f64 = row[2]
            .parse()
            .map_err(|_| Error::parse(path, format!("bad score {:?}", &row[2])))?;
        out.push(Prediction {
            driver_id: row[0].to_string(),
            label,
            score,
        });
    }
    Ok(out)
}

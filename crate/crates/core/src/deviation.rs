//! Deviation feature maps: per-cell histograms over populations of raw
//! feature maps, Hellinger differences against a base population, the
//! natural deviation of presumably safe control drivers, and the signed
//! per-driver deviation map.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featuremap::{build_raw_feature_map, FeatureMap, FeatureMapSpec, SpecId};
use crate::trajectory::KinematicTrajectory;

pub const DEFAULT_H_BINS: usize = 10;
/// Largest value of the Hellinger form used here, ½·√2.
pub const HELLINGER_MAX: f64 = std::f64::consts::SQRT_2 / 2.0;

/// Annotated trips keyed by driver id.
pub type TripsByDriver = BTreeMap<String, Vec<KinematicTrajectory>>;

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotADistribution(sum));
    }
    Ok(())
}

/// `½·√(Σ(√p − √q)²)` over two probability vectors.
pub fn hellinger_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok(0.5 * s.sqrt())
}

/// Distance between two per-cell distributions.
pub trait Divergence: Sync {
    fn distance(&self, p: &[f64], q: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Hellinger;

impl Divergence for Hellinger {
    fn distance(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        hellinger_distance(p, q)
    }
}

/// For every feature-map cell, the distribution of that cell's value across
/// a population of maps, as `h_bins` uniform bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMatrix {
    pub spec_id: SpecId,
    pub y_bins: usize,
    pub x_bins: usize,
    pub h_bins: usize,
    /// `y_bins * x_bins` probability vectors of length `h_bins`, row-major.
    pub probs: Vec<f64>,
    pub contributing_maps: usize,
}

impl HistogramMatrix {
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        self.cell_at(y * self.x_bins + x)
    }

    fn cell_at(&self, idx: usize) -> &[f64] {
        &self.probs[idx * self.h_bins..(idx + 1) * self.h_bins]
    }

    fn check_same_layout(&self, other: &HistogramMatrix) -> Result<()> {
        if self.spec_id != other.spec_id
            || self.y_bins != other.y_bins
            || self.x_bins != other.x_bins
            || self.h_bins != other.h_bins
        {
            return Err(Error::SpecMismatch {
                expected: format!("{} {}x{}x{}", self.spec_id, self.y_bins, self.x_bins, self.h_bins),
                found: format!(
                    "{} {}x{}x{}",
                    other.spec_id, other.y_bins, other.x_bins, other.h_bins
                ),
            });
        }
        Ok(())
    }
}

/// Bin of a normalized cell value; 1.0 falls in the last bin.
fn value_bin(v: f64, h_bins: usize) -> usize {
    let mut i = ((v * h_bins as f64).floor().max(0.0) as usize).min(h_bins - 1);
    while i > 0 && v < i as f64 / h_bins as f64 {
        i -= 1;
    }
    while i + 1 < h_bins && v >= (i + 1) as f64 / h_bins as f64 {
        i += 1;
    }
    i
}

/// Streaming builder for a [`HistogramMatrix`].
#[derive(Debug, Clone)]
pub struct HistogramAccumulator {
    spec_id: SpecId,
    y_bins: usize,
    x_bins: usize,
    h_bins: usize,
    counts: Vec<u32>,
    maps: usize,
}

impl HistogramAccumulator {
    pub fn new(spec_id: SpecId, y_bins: usize, x_bins: usize, h_bins: usize) -> Self {
        HistogramAccumulator {
            spec_id,
            y_bins,
            x_bins,
            h_bins,
            counts: vec![0; y_bins * x_bins * h_bins],
            maps: 0,
        }
    }

    pub fn for_spec(spec: &FeatureMapSpec, h_bins: usize) -> Self {
        Self::new(spec.id, spec.y_bins, spec.x_bins, h_bins)
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn add(&mut self, map: &FeatureMap) -> Result<()> {
        if map.spec_id != self.spec_id || map.cells.len() != self.y_bins * self.x_bins {
            return Err(Error::SpecMismatch {
                expected: self.spec_id.to_string(),
                found: map.spec_id.to_string(),
            });
        }
        for (cell, &v) in map.cells.iter().enumerate() {
            self.counts[cell * self.h_bins + value_bin(v, self.h_bins)] += 1;
        }
        self.maps += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &HistogramAccumulator) -> Result<()> {
        if other.spec_id != self.spec_id || other.counts.len() != self.counts.len() {
            return Err(Error::SpecMismatch {
                expected: self.spec_id.to_string(),
                found: other.spec_id.to_string(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.maps += other.maps;
        Ok(())
    }

    pub fn finish(&self) -> Result<HistogramMatrix> {
        if self.maps == 0 {
            return Err(Error::EmptyInput("no feature maps for histogram matrix"));
        }
        let n = self.maps as f64;
        Ok(HistogramMatrix {
            spec_id: self.spec_id,
            y_bins: self.y_bins,
            x_bins: self.x_bins,
            h_bins: self.h_bins,
            probs: self.counts.iter().map(|&c| f64::from(c) / n).collect(),
            contributing_maps: self.maps,
        })
    }
}

pub fn obtain_histogram_matrix(maps: &[FeatureMap], h_bins: usize) -> Result<HistogramMatrix> {
    let first = maps.first().ok_or(Error::EmptyInput("no feature maps for histogram matrix"))?;
    let mut acc = HistogramAccumulator::new(first.spec_id, first.y_bins, first.x_bins, h_bins);
    for m in maps {
        acc.add(m)?;
    }
    acc.finish()
}

/// Per-cell divergences between two histogram matrices, in [0, ½·√2] for Hellinger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationMatrix {
    pub spec_id: SpecId,
    pub y_bins: usize,
    pub x_bins: usize,
    pub cells: Vec<f64>,
}

pub fn obtain_difference(base: &HistogramMatrix, other: &HistogramMatrix) -> Result<DeviationMatrix> {
    obtain_difference_with(&Hellinger, base, other)
}

pub fn obtain_difference_with(
    divergence: &dyn Divergence,
    base: &HistogramMatrix,
    other: &HistogramMatrix,
) -> Result<DeviationMatrix> {
    base.check_same_layout(other)?;
    let cells = (0..base.y_bins * base.x_bins)
        .map(|i| divergence.distance(base.cell_at(i), other.cell_at(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationMatrix {
        spec_id: base.spec_id,
        y_bins: base.y_bins,
        x_bins: base.x_bins,
        cells,
    })
}

/// Element-wise mean of deviation matrices.
pub fn summarize(diffs: &[DeviationMatrix]) -> Result<DeviationMatrix> {
    let first = diffs.first().ok_or(Error::EmptyInput("no deviation matrices to summarize"))?;
    let mut acc = vec![0.0; first.cells.len()];
    for d in diffs {
        if d.spec_id != first.spec_id || d.cells.len() != first.cells.len() {
            return Err(Error::SpecMismatch {
                expected: first.spec_id.to_string(),
                found: d.spec_id.to_string(),
            });
        }
        for (a, v) in acc.iter_mut().zip(&d.cells) {
            *a += v;
        }
    }
    let n = diffs.len() as f64;
    Ok(DeviationMatrix {
        cells: acc.into_iter().map(|a| a / n).collect(),
        ..first.clone()
    })
}

/// Observed deviation minus natural deviation for one driver and spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationFeatureMap {
    pub spec_id: SpecId,
    pub driver_id: String,
    pub y_bins: usize,
    pub x_bins: usize,
    pub cells: Vec<f64>,
}

pub fn difference(
    driver_id: &str,
    observed: &DeviationMatrix,
    natural: &DeviationMatrix,
) -> Result<DeviationFeatureMap> {
    if observed.spec_id != natural.spec_id || observed.cells.len() != natural.cells.len() {
        return Err(Error::SpecMismatch {
            expected: natural.spec_id.to_string(),
            found: observed.spec_id.to_string(),
        });
    }
    Ok(DeviationFeatureMap {
        spec_id: observed.spec_id,
        driver_id: driver_id.to_string(),
        y_bins: observed.y_bins,
        x_bins: observed.x_bins,
        cells: observed
            .cells
            .iter()
            .zip(&natural.cells)
            .map(|(o, n)| o - n)
            .collect(),
    })
}

/// Random 70/30-style partition of the reference drivers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSplit {
    pub base: BTreeSet<String>,
    pub control: BTreeSet<String>,
    pub seed: u64,
}

impl ReferenceSplit {
    pub fn new<'a>(
        reference: impl IntoIterator<Item = &'a str>,
        base_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(base_fraction > 0.0 && base_fraction < 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "reference split fraction must be in (0, 1), got {base_fraction}"
            )));
        }
        let mut ids: Vec<String> = reference
            .into_iter()
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if ids.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "reference set needs at least 2 drivers, has {}",
                ids.len()
            )));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_base = ((ids.len() as f64 * base_fraction).round() as usize).clamp(1, ids.len() - 1);
        let control = ids.split_off(n_base);
        Ok(ReferenceSplit {
            base: ids.into_iter().collect(),
            control: control.into_iter().collect(),
            seed,
        })
    }
}

/// Per-spec statistics of one driver's trips, gathered in a single pass.
#[derive(Debug, Clone)]
pub struct SpecSummary {
    pub hist: HistogramAccumulator,
    /// Sum of the cells of every non-empty raw map, in trip order.
    pub map_sum: Vec<f64>,
    pub samples: usize,
}

impl SpecSummary {
    /// Mean of the driver's non-empty raw maps, or `None` without any.
    pub fn average_map(&self, spec: &FeatureMapSpec) -> Option<FeatureMap> {
        let n = self.hist.maps();
        (n > 0).then(|| FeatureMap {
            spec_id: spec.id,
            y_bins: spec.y_bins,
            x_bins: spec.x_bins,
            cells: self.map_sum.iter().map(|s| s / n as f64).collect(),
            sample_count: self.samples,
        })
    }
}

/// Raw-map summaries of one driver, one entry per spec in spec order.
#[derive(Debug, Clone)]
pub struct DriverFeatures {
    pub driver_id: String,
    pub trips: usize,
    pub specs: Vec<SpecSummary>,
}

/// Builds every raw map of every trip. Empty maps (no point passed the
/// context filter and ranges) carry no information and are skipped.
pub fn summarize_driver(
    driver_id: &str,
    trips: &[KinematicTrajectory],
    specs: &[FeatureMapSpec],
    h_bins: usize,
) -> Result<DriverFeatures> {
    let mut summaries: Vec<SpecSummary> = specs
        .iter()
        .map(|s| SpecSummary {
            hist: HistogramAccumulator::for_spec(s, h_bins),
            map_sum: vec![0.0; s.cells()],
            samples: 0,
        })
        .collect();
    for trip in trips {
        for (spec, summary) in specs.iter().zip(summaries.iter_mut()) {
            let map = build_raw_feature_map(trip, spec).map_err(|e| Error::Provenance {
                driver: driver_id.to_string(),
                spec: spec.id.to_string(),
                source: Box::new(e),
            })?;
            if map.is_empty() {
                continue;
            }
            summary.hist.add(&map)?;
            for (s, c) in summary.map_sum.iter_mut().zip(&map.cells) {
                *s += c;
            }
            summary.samples += map.sample_count;
        }
    }
    Ok(DriverFeatures {
        driver_id: driver_id.to_string(),
        trips: trips.len(),
        specs: summaries,
    })
}

/// Summaries for many drivers, computed in parallel and returned in key order.
pub fn summarize_drivers(
    trips: &TripsByDriver,
    specs: &[FeatureMapSpec],
    h_bins: usize,
) -> Result<Vec<DriverFeatures>> {
    trips
        .par_iter()
        .map(|(id, t)| summarize_driver(id, t, specs, h_bins))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationParams {
    pub h_bins: usize,
    /// Control drivers with fewer trips are rejected.
    pub min_control_trajectories: usize,
}

impl Default for DeviationParams {
    fn default() -> Self {
        DeviationParams {
            h_bins: DEFAULT_H_BINS,
            min_control_trajectories: 20,
        }
    }
}

/// Base histogram matrix and natural deviation for one spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecReference {
    pub base: HistogramMatrix,
    pub natural: DeviationMatrix,
    pub control_drivers: usize,
}

/// Everything needed to turn a driver's trips into deviation maps: computed
/// once from the reference split, then shared read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationModel {
    pub specs: Vec<FeatureMapSpec>,
    pub h_bins: usize,
    /// `None` where the base or control population produced no maps for the spec.
    pub references: Vec<Option<SpecReference>>,
}

/// One driver's deviation maps; specs without data are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverDeviationMaps {
    pub driver_id: String,
    pub maps: BTreeMap<SpecId, DeviationFeatureMap>,
}

impl DriverDeviationMaps {
    pub fn missing<'a>(&'a self, specs: &'a [FeatureMapSpec]) -> impl Iterator<Item = SpecId> + 'a {
        specs
            .iter()
            .map(|s| s.id)
            .filter(|id| !self.maps.contains_key(id))
    }
}

impl DeviationModel {
    pub fn fit(
        base: &TripsByDriver,
        control: &TripsByDriver,
        specs: &[FeatureMapSpec],
        params: &DeviationParams,
    ) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::EmptyInput("base set has no drivers"));
        }
        if control.is_empty() {
            return Err(Error::EmptyInput("control set has no drivers"));
        }
        if let Some((id, trips)) = control
            .iter()
            .find(|(_, t)| t.len() < params.min_control_trajectories)
        {
            return Err(Error::InsufficientData(format!(
                "control driver {id} has {} trajectories, need {}",
                trips.len(),
                params.min_control_trajectories
            )));
        }

        let base_features = summarize_drivers(base, specs, params.h_bins)?;
        let control_features = summarize_drivers(control, specs, params.h_bins)?;

        let references = specs
            .par_iter()
            .enumerate()
            .map(|(si, spec)| {
                let mut acc = HistogramAccumulator::for_spec(spec, params.h_bins);
                for f in &base_features {
                    acc.merge(&f.specs[si].hist)?;
                }
                if acc.maps() == 0 {
                    warn!("{}: base set produced no feature maps", spec.id);
                    return Ok(None);
                }
                let base_hist = acc.finish()?;
                let diffs = control_features
                    .iter()
                    .filter(|f| f.specs[si].hist.maps() > 0)
                    .map(|f| obtain_difference(&base_hist, &f.specs[si].hist.finish()?))
                    .collect::<Result<Vec<_>>>()?;
                if diffs.is_empty() {
                    warn!("{}: no control driver produced feature maps", spec.id);
                    return Ok(None);
                }
                Ok(Some(SpecReference {
                    natural: summarize(&diffs)?,
                    control_drivers: diffs.len(),
                    base: base_hist,
                }))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(DeviationModel {
            specs: specs.to_vec(),
            h_bins: params.h_bins,
            references,
        })
    }

    /// Deviation maps from an already summarized driver.
    pub fn deviation_maps_from(&self, features: &DriverFeatures) -> Result<DriverDeviationMaps> {
        let mut maps = BTreeMap::new();
        for ((spec, reference), summary) in self.specs.iter().zip(&self.references).zip(&features.specs) {
            let Some(reference) = reference else { continue };
            if summary.hist.maps() == 0 {
                continue;
            }
            let observed = obtain_difference(&reference.base, &summary.hist.finish()?)?;
            maps.insert(
                spec.id,
                difference(&features.driver_id, &observed, &reference.natural)?,
            );
        }
        Ok(DriverDeviationMaps {
            driver_id: features.driver_id.clone(),
            maps,
        })
    }

    pub fn deviation_maps(&self, driver_id: &str, trips: &[KinematicTrajectory]) -> Result<DriverDeviationMaps> {
        self.deviation_maps_from(&summarize_driver(driver_id, trips, &self.specs, self.h_bins)?)
    }
}

/// Full deviation-map construction: reference statistics from base and
/// control, then one map set per observed driver, in driver-id order.
pub fn build_deviation_maps(
    base: &TripsByDriver,
    control: &TripsByDriver,
    observed: &TripsByDriver,
    specs: &[FeatureMapSpec],
    params: &DeviationParams,
) -> Result<(DeviationModel, Vec<DriverDeviationMaps>)> {
    let model = DeviationModel::fit(base, control, specs, params)?;
    let maps = observed
        .par_iter()
        .map(|(id, trips)| model.deviation_maps(id, trips))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, maps))
}

//! Risk-cohort identification: per-spec k-means over deviation maps, cluster
//! labeling from weak records, and confidence-thresholded voting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deviation::DriverDeviationMaps;
use crate::error::{Error, Result};
use crate::featuremap::SpecId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverRecord {
    pub driver_id: String,
    pub citations: u32,
    pub at_fault_accidents: u32,
}

impl DriverRecord {
    pub fn risk_score(&self) -> u32 {
        self.citations + self.at_fault_accidents
    }
}

pub type Records = BTreeMap<String, DriverRecord>;

pub fn read_records(path: &Path) -> Result<Records> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::parse(path, e),
    })?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<DriverRecord>() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        if out.insert(row.driver_id.clone(), row).is_some() {
            return Err(Error::parse(path, "duplicate driver id"));
        }
    }
    Ok(out)
}

pub fn write_records<'a>(path: &Path, records: impl IntoIterator<Item = &'a DriverRecord>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CohortLabel {
    LowRisk,
    MediumRisk,
    HighRisk,
    Null,
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for CohortLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LowRisk" => Ok(CohortLabel::LowRisk),
            "MediumRisk" => Ok(CohortLabel::MediumRisk),
            "HighRisk" => Ok(CohortLabel::HighRisk),
            "Null" => Ok(CohortLabel::Null),
            other => Err(Error::ConfigInvalid(format!("unknown cohort label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub k: usize,
    pub confidence: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            k: 2,
            confidence: 0.8,
            seed: 0,
            restarts: 10,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::ConfigInvalid(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.confidence > 0.5 && self.confidence <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "confidence must be in (0.5, 1], got {}",
                self.confidence
            )));
        }
        if self.restarts == 0 {
            return Err(Error::ConfigInvalid("restarts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// Objective of every restart, in run order.
    pub restart_wcss: Vec<f64>,
}

const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..vectors.len())
        };
        centroids.push(vectors[next].clone());
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(vectors: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let k = centroids.len();
    let dim = vectors[0].len();
    let mut assignments = vec![usize::MAX; vectors.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, v) in assignments.iter_mut().zip(vectors) {
            let (c, _) = nearest(v, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        // repair empty clusters from the point farthest from its own centroid
        loop {
            let mut sizes = vec![0usize; k];
            for &a in &assignments {
                sizes[a] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
            let far = (0..vectors.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&i, &j| {
                    let di = sq_dist(&vectors[i], &centroids[assignments[i]]);
                    let dj = sq_dist(&vectors[j], &centroids[assignments[j]]);
                    di.total_cmp(&dj).then(j.cmp(&i))
                })
                .expect("k <= n guarantees a donor cluster");
            assignments[far] = empty;
            centroids[empty] = vectors[far].clone();
            changed = true;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            *c = s.into_iter().map(|x| x / n as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let wcss = vectors
        .iter()
        .zip(&assignments)
        .map(|(v, &a)| sq_dist(v, &centroids[a]))
        .sum();
    (assignments, centroids, wcss)
}

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by WCSS.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let distinct = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len();
    if k == 0 || distinct < k {
        return Err(Error::TooFewPoints { distinct, k });
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: v.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    let mut restart_wcss = Vec::with_capacity(restarts.max(1));
    for _ in 0..restarts.max(1) {
        let run = lloyd(vectors, plus_plus_seeds(vectors, k, &mut rng));
        restart_wcss.push(run.2);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignments, centroids, wcss) = best.expect("at least one restart");
    Ok(KMeansResult {
        assignments,
        centroids,
        wcss,
        restart_wcss,
    })
}

/// Orders clusters by mean risk score (ties: larger cluster first, then lower
/// index) and maps rank to cohort: lowest → LowRisk, highest → HighRisk.
pub fn clustering_label_to_risk_cohort_label(
    assignments: &[usize],
    k: usize,
    risk_scores: &[u32],
) -> Result<Vec<CohortLabel>> {
    if assignments.len() != risk_scores.len() {
        return Err(Error::LengthMismatch(assignments.len(), risk_scores.len()));
    }
    let mut sums = vec![0u64; k];
    let mut sizes = vec![0usize; k];
    for (&a, &s) in assignments.iter().zip(risk_scores) {
        if a >= k {
            return Err(Error::EmptyCluster(a));
        }
        sums[a] += u64::from(s);
        sizes[a] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster(empty));
    }
    let mut order: Vec<usize> = (0..k).collect();
    // compare means exactly as cross-multiplied integers
    order.sort_by(|&a, &b| {
        (u128::from(sums[a]) * sizes[b] as u128)
            .cmp(&(u128::from(sums[b]) * sizes[a] as u128))
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    let mut labels = vec![CohortLabel::MediumRisk; k];
    labels[order[0]] = CohortLabel::LowRisk;
    labels[order[k - 1]] = CohortLabel::HighRisk;
    Ok(labels)
}

/// The modal label if its share of the votes reaches `confidence`, else Null.
pub fn find_frequent_label(labels: &[CohortLabel], confidence: f64) -> CohortLabel {
    let mut counts: BTreeMap<CohortLabel, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != CohortLabel::Null) {
        *counts.entry(l).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return CohortLabel::Null;
    }
    let (label, count) = counts
        .iter()
        .fold((CohortLabel::Null, 0), |best, (&l, &c)| if c > best.1 { (l, c) } else { best });
    if count as f64 / total as f64 >= confidence {
        label
    } else {
        CohortLabel::Null
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverCohort {
    pub driver_id: String,
    pub label: CohortLabel,
    /// Per-spec votes in canonical spec order.
    pub votes: Vec<(SpecId, CohortLabel)>,
}

impl DriverCohort {
    pub fn count(&self, label: CohortLabel) -> usize {
        self.votes.iter().filter(|(_, l)| *l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortOutcome {
    /// Every driver considered, in driver-id order, Null labels included.
    pub drivers: Vec<DriverCohort>,
    /// Specs whose clustering succeeded.
    pub clustered_specs: Vec<SpecId>,
    pub warnings: Vec<String>,
}

impl CohortOutcome {
    /// The final labeled set: drivers with a non-Null cohort.
    pub fn labeled(&self) -> BTreeMap<String, CohortLabel> {
        self.drivers
            .iter()
            .filter(|d| d.label != CohortLabel::Null)
            .map(|d| (d.driver_id.clone(), d.label))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("driver_id,label,votes_low,votes_high,votes_total\n");
        for d in &self.drivers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                d.driver_id,
                d.label,
                d.count(CohortLabel::LowRisk),
                d.count(CohortLabel::HighRisk),
                d.votes.len()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Clusters drivers once per spec in `specs`, labels each clustering from
/// the records, and keeps drivers whose votes agree at `config.confidence`.
pub fn identify_risk_cohorts(
    drivers: &[DriverDeviationMaps],
    specs: &[SpecId],
    records: &Records,
    config: &CohortConfig,
) -> Result<CohortOutcome> {
    config.validate()?;
    let mut warnings = Vec::new();
    let mut note = |msg: String| {
        warn!("{msg}");
        warnings.push(msg);
    };

    for d in drivers {
        if !records.contains_key(&d.driver_id) {
            return Err(Error::DriverSetMismatch(format!(
                "no record for driver {}",
                d.driver_id
            )));
        }
    }

    let in_scope: BTreeSet<SpecId> = specs.iter().copied().collect();
    let eligible: Vec<&DriverDeviationMaps> = drivers
        .iter()
        .filter(|d| {
            let present = d.maps.keys().filter(|s| in_scope.contains(s)).count();
            let ok = 2 * present >= in_scope.len();
            if !ok {
                warn!(
                    "driver {} has deviation maps for {present} of {} specs; excluded from voting",
                    d.driver_id,
                    in_scope.len()
                );
            }
            ok
        })
        .collect();
    if eligible.len() < drivers.len() {
        note(format!(
            "{} drivers lack deviation maps for half the specs and were left unlabeled",
            drivers.len() - eligible.len()
        ));
    }

    let ordered: Vec<SpecId> = in_scope.iter().copied().collect();
    let per_spec: Vec<(SpecId, Result<Vec<(usize, CohortLabel)>>)> = ordered
        .par_iter()
        .map(|&spec| {
            let members: Vec<usize> = (0..eligible.len())
                .filter(|&i| eligible[i].maps.contains_key(&spec))
                .collect();
            let vectors: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| eligible[i].maps[&spec].cells.clone())
                .collect();
            let scores: Vec<u32> = members
                .iter()
                .map(|&i| records[&eligible[i].driver_id].risk_score())
                .collect();
            let seed = config.seed ^ (u64::from(spec.number()) << 32);
            let result = kmeans(&vectors, config.k, seed, config.restarts).and_then(|km| {
                let labels = clustering_label_to_risk_cohort_label(&km.assignments, config.k, &scores)?;
                Ok(members
                    .iter()
                    .zip(&km.assignments)
                    .map(|(&i, &a)| (i, labels[a]))
                    .collect())
            });
            (spec, result)
        })
        .collect();

    let mut votes: Vec<Vec<(SpecId, CohortLabel)>> = vec![Vec::new(); eligible.len()];
    let mut clustered_specs = Vec::new();
    for (spec, result) in per_spec {
        match result {
            Ok(assigned) => {
                clustered_specs.push(spec);
                for (i, label) in assigned {
                    votes[i].push((spec, label));
                }
            }
            Err(e @ Error::TooFewPoints { .. }) => {
                note(format!("{spec}: clustering skipped, degenerate input ({e})"));
            }
            Err(e) => return Err(e),
        }
    }
    if clustered_specs.is_empty() && !ordered.is_empty() {
        note("no spec could be clustered; every driver is unlabeled".into());
    }

    let mut by_id: BTreeMap<&str, Vec<(SpecId, CohortLabel)>> = eligible
        .iter()
        .zip(votes)
        .map(|(d, v)| (d.driver_id.as_str(), v))
        .collect();
    let drivers = drivers
        .iter()
        .map(|d| {
            let votes = by_id.remove(d.driver_id.as_str()).unwrap_or_default();
            let labels: Vec<CohortLabel> = votes.iter().map(|(_, l)| *l).collect();
            DriverCohort {
                driver_id: d.driver_id.clone(),
                label: find_frequent_label(&labels, config.confidence),
                votes,
            }
        })
        .collect();
    Ok(CohortOutcome {
        drivers,
        clustered_specs,
        warnings,
    })
}

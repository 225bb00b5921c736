//! Cohort statistics for predicted labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::cohorts::{CohortLabel, Records};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortRow {
    pub label: CohortLabel,
    pub drivers: usize,
    pub share_pct: f64,
    pub zero_record_pct: f64,
    pub mean_risk_score: f64,
    pub mean_planted_risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortReport {
    /// LowRisk and HighRisk always, MediumRisk only when predicted.
    pub rows: Vec<CohortRow>,
    pub labeled_drivers: usize,
    pub overall_mean_risk: f64,
    pub overall_mean_planted_risk: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Empty cohorts are reported with explicit zeros.
pub fn cohort_report(
    labels: &[(String, CohortLabel)],
    records: &Records,
    planted: Option<&BTreeMap<String, f64>>,
) -> Result<CohortReport> {
    let mut groups: BTreeMap<CohortLabel, Vec<(u32, Option<f64>)>> = BTreeMap::new();
    for (id, label) in labels {
        if *label == CohortLabel::Null {
            continue;
        }
        let rec = records
            .get(id)
            .ok_or_else(|| Error::DriverSetMismatch(format!("no record for predicted driver {id}")))?;
        let p = match planted {
            Some(m) => Some(
                *m.get(id)
                    .ok_or_else(|| Error::DriverSetMismatch(format!("driver {id} is not in the manifest")))?,
            ),
            None => None,
        };
        groups.entry(*label).or_default().push((rec.risk_score(), p));
    }
    let labeled: usize = groups.values().map(Vec::len).sum();
    let mut order = vec![CohortLabel::LowRisk];
    if groups.contains_key(&CohortLabel::MediumRisk) {
        order.push(CohortLabel::MediumRisk);
    }
    order.push(CohortLabel::HighRisk);

    let all: Vec<&(u32, Option<f64>)> = groups.values().flatten().collect();
    let risk = |v: &[&(u32, Option<f64>)]| mean(&v.iter().map(|(r, _)| f64::from(*r)).collect::<Vec<_>>());
    let planted_mean =
        |v: &[&(u32, Option<f64>)]| planted.map(|_| mean(&v.iter().filter_map(|(_, p)| *p).collect::<Vec<_>>()));

    let rows = order
        .into_iter()
        .map(|label| {
            let members: Vec<&(u32, Option<f64>)> = groups.get(&label).map(|g| g.iter().collect()).unwrap_or_default();
            CohortRow {
                label,
                drivers: members.len(),
                share_pct: pct(members.len(), labeled),
                zero_record_pct: pct(members.iter().filter(|(r, _)| *r == 0).count(), members.len()),
                mean_risk_score: risk(&members),
                mean_planted_risk: planted_mean(&members),
            }
        })
        .collect();
    Ok(CohortReport {
        rows,
        labeled_drivers: labeled,
        overall_mean_risk: risk(&all),
        overall_mean_planted_risk: planted_mean(&all),
    })
}

impl CohortReport {
    pub fn row(&self, label: CohortLabel) -> Option<&CohortRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// HighRisk minus LowRisk mean planted risk, when both cohorts are populated.
    pub fn planted_gap(&self) -> Option<f64> {
        let hi = self.row(CohortLabel::HighRisk)?;
        let lo = self.row(CohortLabel::LowRisk)?;
        if hi.drivers == 0 || lo.drivers == 0 {
            return None;
        }
        Some(hi.mean_planted_risk? - lo.mean_planted_risk?)
    }

    pub fn to_csv(&self) -> String {
        let planted = |p: Option<f64>| p.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("cohort,drivers,share_pct,no_records_pct,mean_risk_score,mean_planted_risk\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.6},{}",
                r.label,
                r.drivers,
                r.share_pct,
                r.zero_record_pct,
                r.mean_risk_score,
                planted(r.mean_planted_risk)
            );
        }
        let _ = writeln!(
            s,
            "overall,{},100.0000,,{:.6},{}",
            self.labeled_drivers,
            self.overall_mean_risk,
            planted(self.overall_mean_planted_risk)
        );
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} labeled drivers\n", self.labeled_drivers);
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>9} {:>12} {:>10} {:>13}",
            "cohort", "drivers", "share %", "no record %", "avg risk", "avg planted"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>9.1} {:>12.1} {:>10.3} {:>13}",
                r.label.to_string(),
                r.drivers,
                r.share_pct,
                r.zero_record_pct,
                r.mean_risk_score,
                r.mean_planted_risk.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into())
            );
        }
        let _ = writeln!(s, "overall average risk score: {:.3}", self.overall_mean_risk);
        s
    }

    /// Bar-chart data: one `category,value` row per plotted bar.
    pub fn to_chart(&self) -> String {
        let mut s = String::from("category,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{} share_pct,{:.4}", r.label, r.share_pct);
            let _ = writeln!(s, "{} mean_risk_score,{:.6}", r.label, r.mean_risk_score);
            if let Some(p) = r.mean_planted_risk {
                let _ = writeln!(s, "{} mean_planted_risk,{p:.6}", r.label);
            }
        }
        let _ = writeln!(s, "overall mean_risk_score,{:.6}", self.overall_mean_risk);
        s
    }

    /// Writes `<prefix>.csv`, `<prefix>.txt` and `<prefix>_chart.csv`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (name, body) in [
            (format!("{prefix}.csv"), self.to_csv()),
            (format!("{prefix}.txt"), self.to_text()),
            (format!("{prefix}_chart.csv"), self.to_chart()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohorts::DriverRecord;
    use proptest::prelude::*;

    fn records(scores: &[(&str, u32)]) -> Records {
        scores
            .iter()
            .map(|&(id, c)| {
                (
                    id.to_string(),
                    DriverRecord {
                        driver_id: id.to_string(),
                        citations: c,
                        at_fault_accidents: 0,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn all_low_risk() {
        let recs = records(&[("a", 0), ("b", 3)]);
        let labels = vec![("a".into(), CohortLabel::LowRisk), ("b".into(), CohortLabel::LowRisk)];
        let r = cohort_report(&labels, &recs, None).unwrap();
        assert_eq!(r.row(CohortLabel::LowRisk).unwrap().share_pct, 100.0);
        let hi = r.row(CohortLabel::HighRisk).unwrap();
        assert_eq!((hi.drivers, hi.share_pct, hi.mean_risk_score), (0, 0.0, 0.0));
        assert!(r.to_csv().contains("HighRisk,0,0.0000,0.0000,0.000000,"));
        assert_eq!(r.planted_gap(), None);
    }

    #[test]
    fn hand_computed_cohorts() {
        let recs = records(&[("a1", 0), ("a2", 1), ("b1", 1), ("b2", 2)]);
        let labels = vec![
            ("a1".into(), CohortLabel::LowRisk),
            ("a2".into(), CohortLabel::LowRisk),
            ("b1".into(), CohortLabel::HighRisk),
            ("b2".into(), CohortLabel::HighRisk),
        ];
        let planted: BTreeMap<String, f64> =
            [("a1", 0.1), ("a2", 0.2), ("b1", 0.8), ("b2", 0.9)].iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let r = cohort_report(&labels, &recs, Some(&planted)).unwrap();
        let lo = r.row(CohortLabel::LowRisk).unwrap();
        let hi = r.row(CohortLabel::HighRisk).unwrap();
        assert_eq!((lo.mean_risk_score, hi.mean_risk_score), (0.5, 1.5));
        assert_eq!((lo.zero_record_pct, hi.zero_record_pct), (50.0, 0.0));
        assert!((r.planted_gap().unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(r.overall_mean_risk, 1.0);
    }

    #[test]
    fn unknown_driver_is_a_mismatch() {
        let recs = records(&[("a", 0)]);
        let labels = vec![("zz".into(), CohortLabel::HighRisk)];
        assert!(matches!(cohort_report(&labels, &recs, None), Err(Error::DriverSetMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn conservation(entries in proptest::collection::vec((0u32..5, 0usize..4), 1..60)) {
            let ids: Vec<String> = (0..entries.len()).map(|i| format!("d{i}")).collect();
            let recs: Records = ids.iter().zip(&entries).map(|(id, &(s, _))| (id.clone(), DriverRecord {
                driver_id: id.clone(), citations: s, at_fault_accidents: 0,
            })).collect();
            let kinds = [CohortLabel::LowRisk, CohortLabel::MediumRisk, CohortLabel::HighRisk, CohortLabel::Null];
            let labels: Vec<(String, CohortLabel)> = ids.iter().zip(&entries).map(|(id, &(_, k))| (id.clone(), kinds[k])).collect();
            let r = cohort_report(&labels, &recs, None).unwrap();
            let labeled = entries.iter().filter(|(_, k)| *k != 3).count();
            prop_assert_eq!(r.rows.iter().map(|x| x.drivers).sum::<usize>(), labeled);
            prop_assert_eq!(r.labeled_drivers, labeled);
            if labeled > 0 {
                let share: f64 = r.rows.iter().map(|x| x.share_pct).sum();
                prop_assert!((share - 100.0).abs() < 1e-9);
                let recombined: f64 = r.rows.iter().map(|x| x.mean_risk_score * x.drivers as f64).sum::<f64>() / labeled as f64;
                prop_assert!((recombined - r.overall_mean_risk).abs() < 1e-9);
            }
        }
    }
}

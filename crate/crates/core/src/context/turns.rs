//! Rule-based turn detection over reported headings.
//!
//! A turn is any window of at most `max_window_s` seconds whose cumulative
//! signed heading change reaches `min_heading_change_deg`. Only minimal
//! windows are kept (no proper sub-window qualifies), then overlapping or
//! adjacent windows are merged into segments.

use serde::{Deserialize, Serialize};

use crate::trajectory::KinematicTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnParams {
    pub min_heading_change_deg: f64,
    pub max_window_s: i64,
}

impl Default for TurnParams {
    fn default() -> Self {
        TurnParams {
            min_heading_change_deg: 25.0,
            max_window_s: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnSegment {
    /// Inclusive kpoint indices.
    pub start_index: usize,
    pub end_index: usize,
    /// Largest-magnitude signed heading change between two kpoints of the segment.
    pub cumulative_heading_change: f64,
}

/// Wraps a heading difference into (-180, 180].
fn wrap_step(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

pub fn detect_turns(kt: &KinematicTrajectory, params: &TurnParams) -> Vec<TurnSegment> {
    let kp = &kt.kpoints;
    let n = kp.len();
    if n < 2 {
        return Vec::new();
    }
    let mut cum = Vec::with_capacity(n);
    cum.push(0.0);
    for w in kp.windows(2) {
        cum.push(cum.last().unwrap() + wrap_step(w[1].heading - w[0].heading));
    }
    let threshold = params.min_heading_change_deg;
    let qualifies = |i: usize, j: usize| (cum[j] - cum[i]).abs() >= threshold;

    let mut windows: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        let first_end = (i + 1..n)
            .take_while(|&j| kp[j].t - kp[i].t <= params.max_window_s)
            .find(|&j| qualifies(i, j));
        let Some(j) = first_end else { continue };
        // no later start inside the window may reach the threshold at `j`
        if (i + 1..j).all(|s| !qualifies(s, j)) {
            windows.push((i, j));
        }
    }

    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in windows {
        match merged.last_mut() {
            Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }

    merged
        .into_iter()
        .map(|(s, e)| {
            let mut best = 0.0f64;
            for a in s..=e {
                for b in a + 1..=e {
                    let d = cum[b] - cum[a];
                    if d.abs() > best.abs() {
                        best = d;
                    }
                }
            }
            TurnSegment {
                start_index: s,
                end_index: e,
                cumulative_heading_change: best,
            }
        })
        .collect()
}

/// Detects turns and flags every covered kpoint.
pub fn annotate_turns(
    mut kt: KinematicTrajectory,
    params: &TurnParams,
) -> (KinematicTrajectory, Vec<TurnSegment>) {
    let segments = detect_turns(&kt, params);
    for k in &mut kt.kpoints {
        k.in_turn = false;
    }
    for seg in &segments {
        for k in &mut kt.kpoints[seg.start_index..=seg.end_index] {
            k.in_turn = true;
        }
    }
    kt.annotations.turns = true;
    (kt, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Annotations, Daylight, GeoPoint, KinematicPoint, RoadType};
    use proptest::prelude::*;

    fn kt_from_headings(headings: &[f64]) -> KinematicTrajectory {
        let kpoints = headings
            .iter()
            .enumerate()
            .map(|(i, &h)| KinematicPoint {
                t: i as i64,
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
        KinematicTrajectory {
            trajectory_id: "t".into(),
            driver_id: "d".into(),
            start_time: 0,
            daylight: Daylight::Unknown,
            kpoints,
            annotations: Annotations::default(),
        }
    }

    #[test]
    fn constant_heading_has_no_turns() {
        let (kt, segs) = annotate_turns(kt_from_headings(&[90.0; 60]), &TurnParams::default());
        assert!(segs.is_empty());
        assert!(kt.kpoints.iter().all(|k| !k.in_turn));
        assert!(kt.annotations.turns);
    }

    #[test]
    fn ramp_is_one_segment() {
        // 20 s straight, 0→90° over 8 s, 20 s straight
        let mut h = vec![0.0; 20];
        h.extend((1..=8).map(|i| i as f64 * 11.25));
        h.extend(vec![90.0; 20]);
        let (kt, segs) = annotate_turns(kt_from_headings(&h), &TurnParams::default());
        assert_eq!(segs.len(), 1);
        let s = segs[0];
        // ramp spans from the last 0° sample (index 19) to the first 90° sample (27)
        assert_eq!((s.start_index, s.end_index), (19, 27));
        assert!((s.cumulative_heading_change - 90.0).abs() < 1e-9);
        assert_eq!(kt.kpoints.iter().filter(|k| k.in_turn).count(), 9);
    }

    #[test]
    fn oscillation_is_not_a_turn() {
        let h: Vec<f64> = (0..80).map(|i| if i % 2 == 0 { 5.0 } else { -5.0 }).collect();
        assert!(detect_turns(&kt_from_headings(&h), &TurnParams::default()).is_empty());
    }

    #[test]
    fn wraps_across_north() {
        let h: Vec<f64> = (0..30).map(|i| 350.0 + (i.min(10) as f64) * 4.0).collect();
        let segs = detect_turns(&kt_from_headings(&h), &TurnParams::default());
        assert_eq!(segs.len(), 1);
        assert!(segs[0].cumulative_heading_change > 25.0);
    }

    #[test]
    fn slow_drift_beyond_window_is_ignored() {
        // 1°/s never accumulates 25° inside 20 s
        let h: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(detect_turns(&kt_from_headings(&h), &TurnParams::default()).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn shift_invariant_and_disjoint(
            steps in proptest::collection::vec(-30.0..30.0f64, 2..80),
            shift in 0.0..360.0f64,
        ) {
            let mut h = vec![0.0];
            for s in &steps {
                h.push(h.last().unwrap() + s);
            }
            let params = TurnParams::default();
            let a = detect_turns(&kt_from_headings(&h), &params);
            let shifted: Vec<f64> = h.iter().map(|x| x + shift).collect();
            let b = detect_turns(&kt_from_headings(&shifted), &params);
            let idx = |v: &[TurnSegment]| v.iter().map(|s| (s.start_index, s.end_index)).collect::<Vec<_>>();
            prop_assert_eq!(idx(&a), idx(&b));
            for w in a.windows(2) {
                prop_assert!(w[0].end_index + 1 < w[1].start_index);
            }
            for s in &a {
                prop_assert!(s.start_index < s.end_index);
                prop_assert!(s.cumulative_heading_change.abs() >= params.min_heading_change_deg - 1e-9);
            }
        }
    }
}

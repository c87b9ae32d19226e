//! Track-level metrics: distance-binned false-negative rate and angular
//! error, and the false-positive rate on source-free audio. A detection
//! counts only when it is stable over the last three frames.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unit_vector, SteeringDirection};
use crate::labeling::{angular_distance, GroundTruthFrame};
use crate::scalar::Scalar;

pub const STABILITY_WINDOW: usize = 3;
pub const STABILITY_MAX_DEG: f64 = 10.0;
/// Range bin edges in meters; bin `i` is `[EDGES[i], EDGES[i + 1])`.
pub const RANGE_EDGES_M: [f64; 4] = [0.0, 50.0, 100.0, 200.0];

/// Per-frame estimates paired with ground truth, in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord<T> {
    frames: Vec<(Option<SteeringDirection<T>>, GroundTruthFrame<T>)>,
}

impl<T: Scalar> TrackRecord<T> {
    /// Frames must be contiguous and ascending.
    pub fn new(frames: Vec<(Option<SteeringDirection<T>>, GroundTruthFrame<T>)>) -> Result<Self> {
        for w in frames.windows(2) {
            if w[1].1.frame_index != w[0].1.frame_index + 1 {
                return Err(Error::InvalidParameter(format!(
                    "track frames not contiguous: {} follows {}",
                    w[1].1.frame_index, w[0].1.frame_index
                )));
            }
        }
        Ok(Self { frames })
    }

    /// Joins estimates and truth by frame index; every truth frame must have
    /// an estimate row.
    pub fn join(estimates: &[(usize, Option<SteeringDirection<T>>)], truth: &[GroundTruthFrame<T>]) -> Result<Self> {
        let by_frame: std::collections::HashMap<usize, Option<SteeringDirection<T>>> = estimates.iter().copied().collect();
        let frames = truth
            .iter()
            .map(|g| {
                by_frame
                    .get(&g.frame_index)
                    .map(|e| (*e, *g))
                    .ok_or_else(|| Error::InvalidParameter(format!("no estimate row for frame {}", g.frame_index)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[(Option<SteeringDirection<T>>, GroundTruthFrame<T>)] {
        &self.frames
    }
}

/// RMS great-circle distance of the directions from their normalized vector
/// mean, degrees. `None` when the mean vector vanishes.
pub fn dispersion_deg<T: Scalar>(dirs: &[SteeringDirection<T>]) -> Option<f64> {
    let mut m = [0.0f64; 3];
    for d in dirs {
        let u = unit_vector(&d.cast::<f64>());
        for k in 0..3 {
            m[k] += u[k];
        }
    }
    let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
    if n < 1e-12 {
        return None;
    }
    let ms = dirs
        .iter()
        .map(|d| {
            let u = unit_vector(&d.cast::<f64>());
            let c = ((u[0] * m[0] + u[1] * m[1] + u[2] * m[2]) / n).clamp(-1.0, 1.0);
            c.acos().to_degrees().powi(2)
        })
        .sum::<f64>()
        / dirs.len() as f64;
    Some(ms.sqrt())
}

/// True when the window ending at `frame` (a position in the track) holds
/// three estimates with dispersion at most 10 degrees.
pub fn stability_flag<T: Scalar>(track: &TrackRecord<T>, frame: usize) -> bool {
    if frame + 1 < STABILITY_WINDOW || frame >= track.len() {
        return false;
    }
    let dirs: Option<Vec<_>> = track.frames[frame + 1 - STABILITY_WINDOW..=frame].iter().map(|f| f.0).collect();
    dirs.and_then(|d| dispersion_deg(&d)).is_some_and(|s| s <= STABILITY_MAX_DEG)
}

pub fn range_bin(range_m: f64) -> Option<usize> {
    RANGE_EDGES_M.windows(2).position(|w| range_m >= w[0] && range_m < w[1])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo_m: f64,
    pub hi_m: f64,
    /// Source-present frames whose range falls in the bin.
    pub frames: usize,
    pub false_negatives: usize,
    /// Absent when the bin holds no frames.
    pub fnr: Option<f64>,
    /// Mean over frames that are not false negatives.
    pub mean_error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bins: Vec<BinStats>,
    pub no_source_frames: usize,
    pub false_positives: usize,
    /// Absent when no source-free frame was evaluated.
    pub fpr: Option<f64>,
}

impl EvalReport {
    fn empty() -> Self {
        let bins = RANGE_EDGES_M.windows(2).map(|w| BinStats { lo_m: w[0], hi_m: w[1], ..Default::default() }).collect();
        Self { bins, no_source_frames: 0, false_positives: 0, fpr: None }
    }

    fn finish(mut self, error_sums: &[f64]) -> Self {
        for (b, sum) in self.bins.iter_mut().zip(error_sums) {
            b.fnr = (b.frames > 0).then(|| b.false_negatives as f64 / b.frames as f64);
            let hits = b.frames - b.false_negatives;
            b.mean_error_deg = (hits > 0).then(|| sum / hits as f64);
        }
        self.fpr = (self.no_source_frames > 0).then(|| self.false_positives as f64 / self.no_source_frames as f64);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat rows `metric,bin_lo_m,bin_hi_m,value,count`; absent values are
    /// empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        for b in &self.bins {
            writeln!(s, "fnr,{},{},{},{}", b.lo_m, b.hi_m, opt(b.fnr), b.frames).unwrap();
            writeln!(s, "mean_error_deg,{},{},{},{}", b.lo_m, b.hi_m, opt(b.mean_error_deg), b.frames - b.false_negatives).unwrap();
        }
        writeln!(s, "fpr,,,{},{}", opt(self.fpr), self.no_source_frames).unwrap();
        s
    }
}

pub const EVAL_CSV_HEADER: &str = "metric,bin_lo_m,bin_hi_m,value,count";

/// Pools counts over tracks; the stability window never crosses a track
/// boundary.
pub fn evaluate<T: Scalar>(tracks: &[TrackRecord<T>]) -> EvalReport {
    let mut rep = EvalReport::empty();
    let mut error_sums = vec![0.0; rep.bins.len()];
    for track in tracks {
        for (i, (est, gt)) in track.frames.iter().enumerate() {
            let stable = stability_flag(track, i);
            if !gt.present {
                rep.no_source_frames += 1;
                rep.false_positives += stable as usize;
                continue;
            }
            let Some(b) = range_bin(gt.range_m.to_f64_lossy()) else { continue };
            let bin = &mut rep.bins[b];
            bin.frames += 1;
            match est {
                Some(e) if stable => error_sums[b] += angular_distance(&e.cast::<f64>(), &gt.direction.cast::<f64>()),
                _ => bin.false_negatives += 1,
            }
        }
    }
    rep.finish(&error_sums)
}

pub fn fnr_by_bin<T: Scalar>(track: &TrackRecord<T>) -> Vec<Option<f64>> {
    evaluate(std::slice::from_ref(track)).bins.iter().map(|b| b.fnr).collect()
}

pub fn angular_error_by_bin<T: Scalar>(track: &TrackRecord<T>) -> Vec<Option<f64>> {
    evaluate(std::slice::from_ref(track)).bins.iter().map(|b| b.mean_error_deg).collect()
}

/// Fraction of frames with a stable detection; every frame must be source-free.
pub fn fpr_no_source<T: Scalar>(track: &TrackRecord<T>) -> Result<f64> {
    if track.frames.iter().any(|f| f.1.present) {
        return Err(Error::InvalidParameter("no-source track contains source-present frames".into()));
    }
    Ok(evaluate(std::slice::from_ref(track)).fpr.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dir(az: f64, el: f64) -> SteeringDirection<f64> {
        SteeringDirection::new(az, el).unwrap()
    }

    fn present_track(ests: Vec<Option<SteeringDirection<f64>>>, truth: SteeringDirection<f64>, range: impl Fn(usize) -> f64) -> TrackRecord<f64> {
        let frames = ests.into_iter().enumerate().map(|(i, e)| (e, GroundTruthFrame::present(i, truth, range(i)))).collect();
        TrackRecord::new(frames).unwrap()
    }

    #[test]
    fn dispersion_examples() {
        let s = |v: &[SteeringDirection<f64>]| dispersion_deg(v).unwrap();
        assert!(s(&[dir(10.0, 20.0); 3]) < 1e-6);
        assert!(s(&[dir(0.0, 0.0), dir(0.0, 0.0), dir(180.0, 0.0)]) > 60.0);
        // +-8 degrees about zero: distances 8, 0, 8 from the mean
        let d = s(&[dir(-8.0, 0.0), dir(0.0, 0.0), dir(8.0, 0.0)]);
        assert!((d - (128.0f64 / 3.0).sqrt()).abs() < 1e-9, "{d}");
        assert!((d - 6.53).abs() < 0.01);
    }

    #[test]
    fn stability_needs_three_estimates() {
        let t = present_track(vec![Some(dir(0.0, 10.0)); 4], dir(0.0, 10.0), |_| 30.0);
        assert_eq!((0..4).map(|i| stability_flag(&t, i)).collect::<Vec<_>>(), vec![false, false, true, true]);
        let t = present_track(vec![Some(dir(0.0, 10.0)), None, Some(dir(0.0, 10.0)), Some(dir(0.0, 10.0))], dir(0.0, 10.0), |_| 30.0);
        assert!(!stability_flag(&t, 2) && !stability_flag(&t, 3));
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let truth = dir(40.0, 30.0);
        let ranges = |i: usize| [20.0, 70.0, 150.0][i % 3];
        let mut e = vec![Some(truth); 30];
        // the first two frames can never be stable, so give them no source
        let mut frames: Vec<_> = e.drain(..).enumerate().map(|(i, e)| (e, GroundTruthFrame::present(i, truth, ranges(i)))).collect();
        frames[0].1 = GroundTruthFrame::absent(0);
        frames[1].1 = GroundTruthFrame::absent(1);
        let t = TrackRecord::new(frames).unwrap();
        assert_eq!(fnr_by_bin(&t), vec![Some(0.0); 3]);
        for v in angular_error_by_bin(&t) {
            assert!(v.unwrap() < 1e-6);
        }

        let silent = present_track(vec![None; 30], truth, ranges);
        assert_eq!(fnr_by_bin(&silent), vec![Some(1.0); 3]);
        assert_eq!(angular_error_by_bin(&silent), vec![None; 3]);
    }

    #[test]
    fn empty_bin_is_absent() {
        let t = present_track(vec![Some(dir(0.0, 0.0)); 5], dir(0.0, 0.0), |_| 10.0);
        let f = fnr_by_bin(&t);
        assert!(f[0].is_some() && f[1].is_none() && f[2].is_none());
        // out-of-range frames fall in no bin
        let far = present_track(vec![Some(dir(0.0, 0.0)); 5], dir(0.0, 0.0), |_| 250.0);
        assert_eq!(evaluate(&[far]).bins.iter().map(|b| b.frames).sum::<usize>(), 0);
    }

    #[test]
    fn constant_offset_error() {
        let t = present_track(vec![Some(dir(5.0, 0.0)); 10], dir(0.0, 0.0), |_| 60.0);
        let e = angular_error_by_bin(&t)[1].unwrap();
        assert!((e - 5.0).abs() < 1e-9);
    }

    #[test]
    fn half_removed_in_middle_bin() {
        // 60 frames in 50-100 m; drop every other estimate
        let truth = dir(-20.0, 15.0);
        let ests: Vec<_> = (0..60).map(|i| (i % 2 == 0).then_some(truth)).collect();
        let t = present_track(ests.clone(), truth, |_| 75.0);
        // brute-force rule: an FN unless the three-frame window is all present
        let fn_count = (0..60).filter(|&i| i < 2 || ests[i - 2..=i].iter().any(|e| e.is_none())).count();
        assert_eq!(fnr_by_bin(&t)[1], Some(fn_count as f64 / 60.0));
        assert_eq!(fnr_by_bin(&t)[1], Some(1.0));
    }

    #[test]
    fn no_source_rates() {
        let absent = |ests: Vec<Option<SteeringDirection<f64>>>| {
            TrackRecord::new(ests.into_iter().enumerate().map(|(i, e)| (e, GroundTruthFrame::absent(i))).collect()).unwrap()
        };
        assert_eq!(fpr_no_source(&absent(vec![None; 20])).unwrap(), 0.0);
        // the first two frames lack a full window
        assert_eq!(fpr_no_source(&absent(vec![Some(dir(10.0, 10.0)); 20])).unwrap(), 18.0 / 20.0);
        assert!(fpr_no_source(&present_track(vec![None; 3], dir(0.0, 0.0), |_| 1.0)).is_err());
    }

    #[test]
    fn report_serializations() {
        let t = present_track(vec![Some(dir(5.0, 0.0)); 10], dir(0.0, 0.0), |_| 60.0);
        let r = evaluate(&[t]);
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with(EVAL_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 2 * 3 + 1);
    }

    #[test]
    fn join_rejects_missing_rows() {
        let truth = vec![GroundTruthFrame::<f64>::absent(0), GroundTruthFrame::absent(1)];
        assert!(TrackRecord::join(&[(0, None)], &truth).is_err());
        assert_eq!(TrackRecord::join(&[(1, None), (0, None)], &truth).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn rates_partition_and_stay_in_range(
            rows in proptest::collection::vec((proptest::option::of((-180.0f64..180.0, 0.0f64..90.0)), 0.0f64..220.0, proptest::bool::ANY), 1..80)
        ) {
            let frames = rows.iter().enumerate().map(|(i, (e, r, present))| {
                let est = e.map(|(a, el)| dir(a, el));
                let gt = if *present { GroundTruthFrame::present(i, dir(0.0, 30.0), *r) } else { GroundTruthFrame::absent(i) };
                (est, gt)
            }).collect();
            let t = TrackRecord::new(frames).unwrap();
            let rep = evaluate(&[t]);
            let in_range = rows.iter().filter(|r| r.2 && r.1 < 200.0).count();
            prop_assert_eq!(rep.bins.iter().map(|b| b.frames).sum::<usize>(), in_range);
            for b in &rep.bins {
                if let Some(f) = b.fnr {
                    prop_assert!((0.0..=1.0).contains(&f));
                    let hit = (b.frames - b.false_negatives) as f64 / b.frames as f64;
                    prop_assert!((f + hit - 1.0).abs() < 1e-12);
                }
                if let Some(e) = b.mean_error_deg {
                    prop_assert!(e >= 0.0);
                }
            }
            if let Some(p) = rep.fpr {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}

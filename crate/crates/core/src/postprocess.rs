//! Probability mask to direction: threshold, one 3x3 erosion, largest
//! 8-connected component, centroid in the disk plane.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::PolarLayout;
use crate::geometry::SteeringDirection;
use crate::scalar::Scalar;
use crate::unet::ProbabilityMask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoAEstimate<T> {
    pub direction: SteeringDirection<T>,
    /// Mean probability over the selected component.
    pub confidence: T,
    pub area_px: usize,
    /// Component centroid in continuous image coordinates `(x, y)`.
    pub centroid_px: (f64, f64),
}

/// Pixels strictly above `threshold`.
pub fn binarize<T: Scalar>(p: &[T], threshold: T) -> Vec<bool> {
    p.iter().map(|&v| v > threshold).collect()
}

/// One pass of 3x3 binary erosion; pixels beyond the border count as off.
pub fn erode3x3(m: &[bool], side: usize) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for r in 1..side.saturating_sub(1) {
        for c in 1..side - 1 {
            out[r * side + c] = (r - 1..=r + 1).all(|rr| (c - 1..=c + 1).all(|cc| m[rr * side + cc]));
        }
    }
    out
}

/// 8-connected components as lists of flat pixel indices, in raster order
/// of their first pixel.
pub fn components8(m: &[bool], side: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; m.len()];
    let mut comps = Vec::new();
    for start in 0..m.len() {
        if !m[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut i = 0;
        while i < comp.len() {
            let (r, c) = ((comp[i] / side) as isize, (comp[i] % side) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                        continue;
                    }
                    let j = rr as usize * side + cc as usize;
                    if m[j] && !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                    }
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

pub fn segment_to_doa<T: Scalar>(yhat: &ProbabilityMask<T>, threshold: f64, layout: &PolarLayout) -> Result<Option<DoAEstimate<T>>> {
    let side = layout.side();
    if yhat.data.len() != side * side {
        return Err(Error::Shape(format!("mask has {} pixels, layout needs {}", yhat.data.len(), side * side)));
    }
    let eroded = erode3x3(&binarize(&yhat.data, T::lit(threshold)), side);
    let mean_p = |c: &[usize]| c.iter().map(|&i| yhat.data[i].to_f64_lossy()).sum::<f64>() / c.len() as f64;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for comp in components8(&eroded, side) {
        let m = mean_p(&comp);
        let better = match &best {
            None => true,
            Some((b, bm)) => comp.len() > b.len() || (comp.len() == b.len() && m > *bm),
        };
        if better {
            best = Some((comp, m));
        }
    }
    let Some((comp, conf)) = best else { return Ok(None) };
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in &comp {
        let (x, y) = layout.pixel_center(i / side, i % side);
        sx += x;
        sy += y;
    }
    let n = comp.len() as f64;
    let centroid = (sx / n, sy / n);
    let direction = layout.polar_to_direction(centroid.0, centroid.1)?;
    Ok(Some(DoAEstimate { direction, confidence: T::lit(conf), area_px: comp.len(), centroid_px: centroid }))
}

/// One row of an estimates file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEstimate<T> {
    pub frame: usize,
    pub estimate: Option<DoAEstimate<T>>,
}

pub const ESTIMATES_CSV_HEADER: &str = "frame,detected,azimuth_deg,elevation_deg,confidence,area_px";

pub fn estimates_to_csv<T: Scalar>(rows: &[FrameEstimate<T>]) -> String {
    let mut s = format!("{ESTIMATES_CSV_HEADER}\n");
    for r in rows {
        match &r.estimate {
            Some(e) => writeln!(
                s,
                "{},1,{},{},{},{}",
                r.frame,
                e.direction.azimuth_deg(),
                e.direction.elevation_deg(),
                e.confidence,
                e.area_px
            ),
            None => writeln!(s, "{},0,,,,", r.frame),
        }
        .expect("write to string");
    }
    s
}

/// Parses an estimates file. The centroid is recovered from the direction
/// on a layout of radius `radius_px`.
pub fn estimates_from_csv<T: Scalar>(s: &str, layout: &PolarLayout) -> Result<Vec<FrameEstimate<T>>> {
    let mut lines = s.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == ESTIMATES_CSV_HEADER => {}
        other => return Err(Error::Csv(format!("expected header {ESTIMATES_CSV_HEADER:?}, found {other:?}"))),
    }
    let num = |f: &str, what: &str, line: usize| -> Result<f64> {
        f.trim().parse::<f64>().map_err(|_| Error::Csv(format!("line {line}: bad {what} {f:?}")))
    };
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Csv(format!("line {line}: expected 6 fields, found {}", f.len())));
            }
            let frame = f[0].trim().parse::<usize>().map_err(|_| Error::Csv(format!("line {line}: bad frame {:?}", f[0])))?;
            let estimate = match f[1].trim() {
                "0" => None,
                "1" => {
                    let direction = SteeringDirection::new(T::lit(num(f[2], "azimuth", line)?), T::lit(num(f[3], "elevation", line)?))?;
                    let area_px = f[5].trim().parse::<usize>().map_err(|_| Error::Csv(format!("line {line}: bad area {:?}", f[5])))?;
                    Some(DoAEstimate {
                        direction,
                        confidence: T::lit(num(f[4], "confidence", line)?),
                        area_px,
                        centroid_px: layout.direction_to_polar(&direction),
                    })
                }
                other => return Err(Error::Csv(format!("line {line}: detected must be 0 or 1, found {other:?}"))),
            };
            Ok(FrameEstimate { frame, estimate })
        })
        .collect()
}

pub fn load_estimates<T: Scalar>(path: impl AsRef<Path>, layout: &PolarLayout) -> Result<Vec<FrameEstimate<T>>> {
    estimates_from_csv(&std::fs::read_to_string(path)?, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::angular_distance;
    use proptest::prelude::*;

    fn layout() -> PolarLayout {
        PolarLayout::new(23)
    }

    fn mask_from(pixels: &[(usize, usize, f64)]) -> ProbabilityMask<f64> {
        let l = layout();
        let side = l.side();
        let mut data = vec![0.0; side * side];
        for &(r, c, p) in pixels {
            data[r * side + c] = p;
        }
        ProbabilityMask { layout: l, data }
    }

    /// The `n` in-disk pixels nearest to a direction's image point.
    fn blob(az: f64, el: f64, n: usize) -> Vec<(usize, usize)> {
        let l = layout();
        let (px, py) = l.direction_to_polar(&SteeringDirection::new(az, el).unwrap());
        let side = l.side();
        let mut all: Vec<(f64, usize, usize)> = (0..side * side)
            .filter(|&i| l.is_valid(i / side, i % side))
            .map(|i| {
                let (x, y) = l.pixel_center(i / side, i % side);
                ((x - px).hypot(y - py), i / side, i % side)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.into_iter().take(n).map(|(_, r, c)| (r, c)).collect()
    }

    #[test]
    fn empty_mask_has_no_estimate() {
        assert!(segment_to_doa(&mask_from(&[]), 0.5, &layout()).unwrap().is_none());
    }

    #[test]
    fn centered_disk_points_up() {
        let l = layout();
        let px: Vec<_> = (0..46 * 46)
            .filter(|&i| {
                let (x, y) = l.pixel_center(i / 46, i % 46);
                (x - 23.0).hypot(y - 23.0) <= 5.0
            })
            .map(|i| (i / 46, i % 46, 0.9))
            .collect();
        let e = segment_to_doa(&mask_from(&px), 0.5, &l).unwrap().unwrap();
        assert!((e.direction.elevation_deg() - 90.0).abs() < 1e-9);
        assert!((e.confidence - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_pick_the_larger() {
        let big = blob(30.0, 20.0, 40);
        let small = blob(-100.0, 50.0, 10);
        let px: Vec<_> = big.iter().chain(&small).map(|&(r, c)| (r, c, 0.8)).collect();
        let e = segment_to_doa(&mask_from(&px), 0.5, &layout()).unwrap().unwrap();
        let truth = SteeringDirection::new(30.0, 20.0).unwrap();
        assert!(angular_distance(&e.direction, &truth) < 2.0, "{:?}", e.direction);

        // brute-force oracle: erode by checking 3x3 neighborhoods directly
        let set: std::collections::HashSet<(usize, usize)> = big.iter().chain(&small).copied().collect();
        let kept: Vec<&(usize, usize)> = big
            .iter()
            .filter(|&&(r, c)| (0..3).all(|i| (0..3).all(|j| set.contains(&(r + i - 1, c + j - 1)))))
            .collect();
        let cx = kept.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / kept.len() as f64;
        let cy = kept.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / kept.len() as f64;
        assert_eq!(e.area_px, kept.len());
        assert!((e.centroid_px.0 - cx).abs() < 1e-12 && (e.centroid_px.1 - cy).abs() < 1e-12);
    }

    #[test]
    fn equal_size_tie_goes_to_higher_probability() {
        let a: Vec<_> = blob(0.0, 30.0, 25).into_iter().map(|(r, c)| (r, c, 0.6)).collect();
        let b: Vec<_> = blob(180.0, 30.0, 25).into_iter().map(|(r, c)| (r, c, 0.95)).collect();
        let e = segment_to_doa(&mask_from(&[a, b].concat()), 0.5, &layout()).unwrap().unwrap();
        assert!(e.direction.azimuth_deg().abs() > 150.0);
    }

    #[test]
    fn csv_round_trip() {
        let l = layout();
        let d = SteeringDirection::new(12.5, 33.25).unwrap();
        let rows = vec![
            FrameEstimate { frame: 0, estimate: None },
            FrameEstimate { frame: 1, estimate: Some(DoAEstimate { direction: d, confidence: 0.75, area_px: 12, centroid_px: l.direction_to_polar(&d) }) },
        ];
        let s = estimates_to_csv(&rows);
        assert!(s.starts_with(ESTIMATES_CSV_HEADER));
        assert_eq!(estimates_from_csv::<f64>(&s, &l).unwrap(), rows);
        assert!(estimates_from_csv::<f64>("frame\n", &l).is_err());
    }

    fn hull_contains(points: &[(f64, f64)], q: (f64, f64)) -> bool {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        if pts.len() < 3 {
            return pts.iter().any(|p| (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9) || pts.len() == 2;
        }
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
            for &p in iter {
                while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                    hull.pop();
                }
                hull.push(p);
            }
            hull.pop();
        }
        (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], q) >= -1e-9)
    }

    proptest! {
        #[test]
        fn isolated_noise_never_changes_estimate(az in -180.0f64..180.0, el in 10.0f64..70.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let l = layout();
            let base: Vec<_> = blob(az, el, 30).into_iter().map(|(r, c)| (r, c, 0.9)).collect();
            let clean = segment_to_doa(&mask_from(&base), 0.5, &l).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut px = base.clone();
            for _ in 0..200 {
                let (r, c) = (rng.gen_range(0..46usize), rng.gen_range(0..46usize));
                if !l.is_valid(r, c) {
                    continue;
                }
                let far = px.iter().all(|&(pr, pc, _)| pr.abs_diff(r) >= 2 || pc.abs_diff(c) >= 2);
                if far {
                    px.push((r, c, rng.gen_range(0.51..1.0)));
                }
            }
            prop_assert_eq!(segment_to_doa(&mask_from(&px), 0.5, &l).unwrap(), clean);
        }

        #[test]
        fn rotation_by_90_rotates_azimuth(az in -180.0f64..180.0, el in 10.0f64..75.0, n in 20usize..60) {
            let l = layout();
            let px: Vec<_> = blob(az, el, n).into_iter().map(|(r, c)| (r, c, 0.9)).collect();
            let m = mask_from(&px);
            let rotated = ProbabilityMask { layout: l, data: l.rotate_image(&m.data, 90.0) };
            let a = segment_to_doa(&m, 0.5, &l).unwrap().unwrap();
            let b = segment_to_doa(&rotated, 0.5, &l).unwrap().unwrap();
            let diff = crate::geometry::wrap_azimuth(b.direction.azimuth_deg() - a.direction.azimuth_deg() - 90.0);
            prop_assert!(diff.abs() < 1.0 || a.direction.elevation_deg() > 89.0, "{:?} {:?}", a, b);
        }

        #[test]
        fn centroid_inside_component_hull(az in -180.0f64..180.0, el in 0.0f64..80.0, n in 9usize..80) {
            let l = layout();
            let px: Vec<_> = blob(az, el, n).into_iter().map(|(r, c)| (r, c, 0.7)).collect();
            if let Some(e) = segment_to_doa(&mask_from(&px), 0.5, &l).unwrap() {
                let eroded = erode3x3(&binarize(&mask_from(&px).data, 0.5), 46);
                let comps = components8(&eroded, 46);
                let comp = comps.iter().max_by_key(|c| c.len()).unwrap();
                let pts: Vec<_> = comp.iter().map(|&i| l.pixel_center(i / 46, i % 46)).collect();
                prop_assert!(hull_contains(&pts, e.centroid_px));
            }
        }
    }
}

//! Ground truth: spherical coordinates of source positions, GPS-to-local
//! conversion, great-circle distances and binary supervision masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::PolarLayout;
use crate::geometry::{dot, norm, unit_vector, SteeringDirection, Vec3};
use crate::scalar::{lit, Scalar};
use crate::simulator::SourceTrajectory;
use crate::{FRAME_LEN, SAMPLE_RATE_HZ};

/// Default mask tolerance around the true direction, degrees.
pub const DEFAULT_DELTA_DEG: f64 = 10.0;

/// `(azimuth_deg, elevation_deg, range_m)` of a Cartesian point. The azimuth
/// of points on the z axis is reported as 0.
pub fn cartesian_to_spherical<T: Scalar>(p: &Vec3<T>) -> Result<(T, T, T)> {
    let r = norm(p);
    if !(r > T::zero()) {
        return Err(Error::InvalidParameter("zero vector has no direction".into()));
    }
    let az = if p[0] == T::zero() && p[1] == T::zero() {
        T::zero()
    } else {
        p[1].atan2(p[0]).to_degrees()
    };
    let el = (p[2] / r).max(-T::one()).min(T::one()).asin().to_degrees();
    Ok((az, el, r))
}

/// WGS-84 ellipsoid.
const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// Local East-North-Up coordinates (meters) of a GPS fix relative to a
/// reference fix, using the tangent plane at the reference:
///
/// `east = dlon * (N + h0) * cos(lat0)`, `north = dlat * (M + h0)`,
/// `up = h - h0`, with `N`, `M` the prime-vertical and meridional radii of
/// curvature at `lat0`. Accurate to well under a meter within ~1 km.
pub fn gps_to_local(lat: f64, lon: f64, alt: f64, ref_lat: f64, ref_lon: f64, ref_alt: f64) -> Result<[f64; 3]> {
    if !(-90.0..=90.0).contains(&lat) || !(-90.0..=90.0).contains(&ref_lat) {
        return Err(Error::InvalidParameter("latitude outside [-90, 90]".into()));
    }
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let phi0 = ref_lat.to_radians();
    let s2 = phi0.sin().powi(2);
    let n = WGS84_A / (1.0 - e2 * s2).sqrt();
    let m = WGS84_A * (1.0 - e2) / (1.0 - e2 * s2).powf(1.5);
    let mut dlon = lon - ref_lon;
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let east = dlon.to_radians() * (n + ref_alt) * phi0.cos();
    let north = (lat - ref_lat).to_radians() * (m + ref_alt);
    Ok([east, north, alt - ref_alt])
}

/// Great-circle angle between two directions, degrees.
pub fn angular_distance<T: Scalar>(a: &SteeringDirection<T>, b: &SteeringDirection<T>) -> T {
    let c = dot(&unit_vector(a), &unit_vector(b)).max(-T::one()).min(T::one());
    c.acos().to_degrees()
}

/// Per-frame annotation. `direction` and `range_m` are meaningful only when
/// `present`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthFrame<T> {
    pub frame_index: usize,
    pub present: bool,
    pub direction: SteeringDirection<T>,
    pub range_m: T,
}

impl<T: Scalar> GroundTruthFrame<T> {
    pub fn present(frame_index: usize, direction: SteeringDirection<T>, range_m: T) -> Self {
        Self { frame_index, present: true, direction, range_m }
    }

    pub fn absent(frame_index: usize) -> Self {
        Self {
            frame_index,
            present: false,
            direction: SteeringDirection::new(T::zero(), T::zero()).expect("origin direction"),
            range_m: T::zero(),
        }
    }

    pub fn source(&self) -> Option<SteeringDirection<T>> {
        self.present.then_some(self.direction)
    }
}

/// Annotates `n_frames` consecutive 100 ms frames from a trajectory, sampled
/// at each frame's center. Sources below the horizon are rejected.
pub fn ground_truth_frames<T: Scalar>(traj: &SourceTrajectory<T>, n_frames: usize, first_index: usize) -> Result<Vec<GroundTruthFrame<T>>> {
    let frame_s = FRAME_LEN as f64 / SAMPLE_RATE_HZ as f64;
    (0..n_frames)
        .map(|f| {
            let t = T::lit((f as f64 + 0.5) * frame_s);
            let (az, el, r) = cartesian_to_spherical(&traj.position_at(t))?;
            let dir = SteeringDirection::new(az, el)
                .map_err(|_| Error::InvalidParameter(format!("source below the horizon in frame {f} ({el} deg)")))?;
            Ok(GroundTruthFrame::present(first_index + f, dir, r))
        })
        .collect()
}

pub const TRUTH_CSV_HEADER: &str = "frame,present,azimuth_deg,elevation_deg,range_m";

pub fn truth_to_csv<T: Scalar>(frames: &[GroundTruthFrame<T>]) -> String {
    let mut out = String::from(TRUTH_CSV_HEADER);
    out.push('\n');
    for g in frames {
        if g.present {
            out.push_str(&format!(
                "{},1,{},{},{}\n",
                g.frame_index,
                g.direction.azimuth_deg(),
                g.direction.elevation_deg(),
                g.range_m
            ));
        } else {
            out.push_str(&format!("{},0,,,\n", g.frame_index));
        }
    }
    out
}

pub fn truth_from_csv<T: Scalar>(s: &str) -> Result<Vec<GroundTruthFrame<T>>> {
    let mut lines = s.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == TRUTH_CSV_HEADER => {}
        other => return Err(Error::Csv(format!("unexpected truth header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Csv(format!("truth row {}: expected 5 fields", i + 1)));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Csv(format!("truth row {}: {e}", i + 1));
            let frame: usize = f[0].parse().map_err(|e| bad(&e))?;
            match f[1] {
                "0" => Ok(GroundTruthFrame::absent(frame)),
                "1" => {
                    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&e));
                    let dir = SteeringDirection::new(T::lit(num(f[2])?), T::lit(num(f[3])?))?;
                    Ok(GroundTruthFrame::present(frame, dir, T::lit(num(f[4])?)))
                }
                other => Err(bad(&format!("present flag {other:?}"))),
            }
        })
        .collect()
}

pub fn load_truth<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<GroundTruthFrame<T>>> {
    truth_from_csv(&std::fs::read_to_string(path)?)
}

/// `side x side` {0,1} mask (row-major) plus the in-disk validity map.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    side: usize,
    data: Vec<u8>,
    valid: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(layout: &PolarLayout) -> Self {
        Self { side: layout.side(), data: vec![0; layout.side().pow(2)], valid: layout.validity() }
    }

    /// Builds a mask from raw values; pixels outside the disk are forced to 0.
    pub fn from_data(layout: &PolarLayout, data: Vec<u8>) -> Result<Self> {
        if data.len() != layout.side().pow(2) {
            return Err(Error::Shape(format!("mask has {} pixels, layout needs {}", data.len(), layout.side().pow(2))));
        }
        let valid = layout.validity();
        let data = data.iter().zip(&valid).map(|(&v, &ok)| u8::from(ok && v != 0)).collect();
        Ok(Self { side: layout.side(), data, valid })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.side + col]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Marks every in-disk pixel whose center direction lies within `delta_deg`
/// (great-circle) of the ground truth; all-zero when no source is present.
pub fn make_mask<T: Scalar>(gt: &GroundTruthFrame<T>, layout: &PolarLayout, delta_deg: T) -> BinaryMask {
    let mut mask = BinaryMask::empty(layout);
    if !gt.present {
        return mask;
    }
    let truth = unit_vector(&gt.direction);
    let cos_delta = delta_deg.to_radians().cos();
    let side = layout.side();
    for row in 0..side {
        for col in 0..side {
            let idx = row * side + col;
            if !mask.valid[idx] {
                continue;
            }
            let (px, py) = layout.pixel_center(row, col);
            let dir: SteeringDirection<T> = layout.polar_to_direction(px, py).expect("valid pixel maps into the disk");
            // compare cosines; equivalent to angular_distance <= delta
            if dot(&unit_vector(&dir), &truth) >= cos_delta - lit(1e-12) {
                mask.data[idx] = 1;
            }
        }
    }
    mask
}

//! Microphone-array geometry, steering directions and far-field steering
//! delays.
//!
//! Angles cross the API in degrees; [`SteeringDirection::radians`] is the only
//! place they are converted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub type Vec3<T> = [T; 3];

#[inline]
pub fn dot<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm<T: Scalar>(a: &Vec3<T>) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

/// Microphone positions (meters, array origin at `(0, 0, 0)`) and the speed
/// of sound.
///
/// Every microphone lies within one aperture of the origin, which bounds all
/// steering delays by `aperture / c`. A single microphone at the origin is a
/// valid (degenerate) array.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArrayGeometry<T> {
    mics: Vec<Vec3<T>>,
    speed_of_sound: T,
}

#[derive(Serialize, Deserialize)]
struct GeometryFile {
    c: f64,
    mics: Vec<[f64; 3]>,
}

impl<T: Scalar> MicArrayGeometry<T> {
    pub fn new(mics: Vec<Vec3<T>>, speed_of_sound: T) -> Result<Self> {
        if mics.is_empty() {
            return Err(Error::Geometry("no microphones".into()));
        }
        if !(speed_of_sound.is_finite() && speed_of_sound > T::zero()) {
            return Err(Error::Geometry(format!(
                "speed of sound must be positive and finite, got {speed_of_sound}"
            )));
        }
        if let Some(i) = mics.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Geometry(format!("microphone {i} has a non-finite coordinate")));
        }
        let geom = Self { mics, speed_of_sound };
        let aperture = geom.aperture();
        if geom.mics.len() >= 2 && aperture <= T::zero() {
            return Err(Error::Geometry("all microphones coincide (zero aperture)".into()));
        }
        let reach = geom.max_radius();
        // small slack for coordinates that are exactly on the bound
        if reach > aperture * lit(1.0 + 1e-9) + lit(1e-12) {
            return Err(Error::Geometry(format!(
                "microphones extend {reach} m from the origin, beyond the {aperture} m aperture; \
                 place the origin inside the array"
            )));
        }
        Ok(geom)
    }

    pub fn mic_count(&self) -> usize {
        self.mics.len()
    }

    pub fn mics(&self) -> &[Vec3<T>] {
        &self.mics
    }

    pub fn speed_of_sound(&self) -> T {
        self.speed_of_sound
    }

    /// Maximum pairwise microphone distance.
    pub fn aperture(&self) -> T {
        let mut best = T::zero();
        for (i, a) in self.mics.iter().enumerate() {
            for b in &self.mics[i + 1..] {
                best = best.max(norm(&sub(a, b)));
            }
        }
        best
    }

    /// Minimum pairwise microphone distance (zero for a single microphone).
    pub fn min_spacing(&self) -> T {
        let mut best = T::infinity();
        for (i, a) in self.mics.iter().enumerate() {
            for b in &self.mics[i + 1..] {
                best = best.min(norm(&sub(a, b)));
            }
        }
        if best.is_finite() {
            best
        } else {
            T::zero()
        }
    }

    /// Largest distance of any microphone from the origin.
    pub fn max_radius(&self) -> T {
        self.mics.iter().map(norm).fold(T::zero(), T::max)
    }

    /// Upper bound on `|tau_n|` over all directions, in seconds.
    pub fn max_delay_s(&self) -> T {
        self.aperture() / self.speed_of_sound
    }

    pub fn scaled(&self, k: T) -> Result<Self> {
        let mics = self.mics.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect();
        Self::new(mics, self.speed_of_sound)
    }

    pub fn cast<U: Scalar>(&self) -> MicArrayGeometry<U> {
        MicArrayGeometry {
            mics: self
                .mics
                .iter()
                .map(|p| p.map(|v| U::lit(v.to_f64_lossy())))
                .collect(),
            speed_of_sound: U::lit(self.speed_of_sound.to_f64_lossy()),
        }
    }

    /// Parses `{"c": 343.0, "mics": [[x, y, z], ...]}` (meters).
    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: GeometryFile = serde_json::from_str(s)?;
        let mics = file.mics.iter().map(|p| p.map(T::lit)).collect();
        Self::new(mics, T::lit(file.c))
    }

    pub fn to_json_string(&self) -> String {
        let file = GeometryFile {
            c: self.speed_of_sound.to_f64_lossy(),
            mics: self.mics.iter().map(|p| p.map(|v| v.to_f64_lossy())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("geometry serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

/// A look direction. Azimuth is wrapped into `[-180, 180)` degrees on
/// construction; elevation must lie in `[0, 90]` degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringDirection<T> {
    azimuth_deg: T,
    elevation_deg: T,
}

impl<T: Scalar> SteeringDirection<T> {
    pub fn new(azimuth_deg: T, elevation_deg: T) -> Result<Self> {
        if !azimuth_deg.is_finite() || !elevation_deg.is_finite() {
            return Err(Error::Direction("non-finite angle".into()));
        }
        let tol = lit::<T>(1e-9);
        if elevation_deg < -tol || elevation_deg > lit::<T>(90.0) + tol {
            return Err(Error::Direction(format!(
                "elevation {elevation_deg} deg outside [0, 90]"
            )));
        }
        let elevation_deg = elevation_deg.max(T::zero()).min(lit(90.0));
        Ok(Self { azimuth_deg: wrap_azimuth(azimuth_deg), elevation_deg })
    }

    pub fn azimuth_deg(&self) -> T {
        self.azimuth_deg
    }

    pub fn elevation_deg(&self) -> T {
        self.elevation_deg
    }

    /// `(azimuth, elevation)` in radians.
    pub fn radians(&self) -> (T, T) {
        (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians())
    }

    pub fn cast<U: Scalar>(&self) -> SteeringDirection<U> {
        SteeringDirection {
            azimuth_deg: U::lit(self.azimuth_deg.to_f64_lossy()),
            elevation_deg: U::lit(self.elevation_deg.to_f64_lossy()),
        }
    }
}

/// Wraps an azimuth into `[-180, 180)`.
pub fn wrap_azimuth<T: Scalar>(az: T) -> T {
    let full = lit::<T>(360.0);
    let half = lit::<T>(180.0);
    let mut w = (az + half) % full;
    if w < T::zero() {
        w += full;
    }
    let w = w - half;
    // rounding can land exactly on +180
    if w >= half {
        w - full
    } else {
        w
    }
}

/// Unit vector `[cos(el) cos(az), cos(el) sin(az), sin(el)]`.
pub fn unit_vector<T: Scalar>(dir: &SteeringDirection<T>) -> Vec3<T> {
    let (az, el) = dir.radians();
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Per-microphone steering delays in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayVector<T>(pub Vec<T>);

impl<T: Scalar> DelayVector<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, d| m.max(d.abs()))
    }
}

/// `tau_n = (p_n . u) / c`.
pub fn steering_delays<T: Scalar>(geom: &MicArrayGeometry<T>, dir: &SteeringDirection<T>) -> DelayVector<T> {
    let u = unit_vector(dir);
    let c = geom.speed_of_sound();
    DelayVector(geom.mics().iter().map(|p| dot(p, &u) / c).collect())
}

/// Construction parameters of the built-in 24-microphone array: three
/// tripod legs of six microphones plus a horizontal six-microphone ring.
pub mod default_layout {
    /// Height of the tripod apex above the ring plane, meters.
    pub const APEX_HEIGHT_M: f64 = 0.45;
    /// Leg tilt from vertical, degrees.
    pub const LEG_TILT_DEG: f64 = 45.0;
    /// Leg azimuths, degrees.
    pub const LEG_AZIMUTHS_DEG: [f64; 3] = [90.0, 210.0, 330.0];
    /// Microphone distances from the apex along each leg, meters.
    pub const LEG_MIC_DISTANCES_M: [f64; 6] = [0.05, 0.09, 0.17, 0.31, 0.55, 0.90];
    pub const RING_RADIUS_M: f64 = 0.25;
    pub const RING_HEIGHT_M: f64 = 0.0;
    /// Ring microphone azimuths are `k * RING_STEP_DEG`, `k = 0..6`.
    pub const RING_STEP_DEG: f64 = 60.0;
}

/// The built-in 24-microphone array (see [`default_layout`]). Pairwise
/// distances range from 0.04 m (adjacent leg microphones) to about 1.10 m
/// (lowest microphones of two different legs).
pub fn default_array<T: Scalar>() -> MicArrayGeometry<T> {
    use default_layout::*;
    let tilt = LEG_TILT_DEG.to_radians();
    let mut mics = Vec::with_capacity(24);
    for az in LEG_AZIMUTHS_DEG {
        let az = az.to_radians();
        for d in LEG_MIC_DISTANCES_M {
            let r = d * tilt.sin();
            mics.push([r * az.cos(), r * az.sin(), APEX_HEIGHT_M - d * tilt.cos()]);
        }
    }
    for k in 0..6 {
        let az = (k as f64 * RING_STEP_DEG).to_radians();
        mics.push([RING_RADIUS_M * az.cos(), RING_RADIUS_M * az.sin(), RING_HEIGHT_M]);
    }
    let mics = mics.into_iter().map(|p| p.map(T::lit)).collect();
    MicArrayGeometry::new(mics, T::lit(DEFAULT_SPEED_OF_SOUND)).expect("default array is valid")
}

//! PNG heatmaps with direction markers.
//!
//! Every data pixel becomes a `SCALE x SCALE` block. A direction maps to the
//! continuous image point of the underlying grid; its marker is drawn
//! centered on the output pixel containing that point scaled by `SCALE`.

use std::path::Path;

use image::{Rgb, RgbImage};
use sphseg::beamformer::BeamGrid;
use sphseg::features::PolarLayout;
use sphseg::geometry::{wrap_azimuth, SteeringDirection};
use sphseg::{Error, Real, Result};

pub const SCALE: u32 = 8;
pub const MARKER_RADIUS: i64 = 5;
pub const TRUTH_RGB: [u8; 3] = [255, 0, 0];
pub const BASELINE_RGB: [u8; 3] = [0, 255, 255];
pub const ESTIMATE_RGB: [u8; 3] = [255, 0, 255];
const OUTSIDE_RGB: [u8; 3] = [40, 40, 40];

/// Viridis anchors, interpolated linearly. None of them is close to a
/// marker color.
const RAMP: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

fn ramp(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    [mix(RAMP[i][0], RAMP[i + 1][0]), mix(RAMP[i][1], RAMP[i + 1][1]), mix(RAMP[i][2], RAMP[i + 1][2])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    /// Ground truth.
    Cross,
    /// Beamformer baseline.
    Dot,
    /// Network estimate.
    Triangle,
}

impl Marker {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Marker::Cross => TRUTH_RGB,
            Marker::Dot => BASELINE_RGB,
            Marker::Triangle => ESTIMATE_RGB,
        }
    }

    /// Offsets covered by the marker; each shape is symmetric about its
    /// bounding-box center.
    fn covers(self, dx: i64, dy: i64) -> bool {
        let r = MARKER_RADIUS;
        match self {
            Marker::Cross => (dx.abs() - dy.abs()).abs() <= 1,
            Marker::Dot => dx * dx + dy * dy <= r * r,
            // apex up, base on the bottom row
            Marker::Triangle => 2 * dx.abs() <= dy + r,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Mapping {
    /// Azimuth on x (-180 at the left), elevation on y (horizon at the
    /// bottom).
    Rect(BeamGrid),
    Polar(PolarLayout),
}

pub struct Canvas {
    img: RgbImage,
    mapping: Mapping,
}

impl Canvas {
    /// `values` is an `n_az x n_el` map, azimuth-major.
    pub fn rect(values: &[f32], grid: BeamGrid) -> Self {
        let (lo, hi) = range(values.iter().copied());
        let mut img = RgbImage::new(grid.n_az as u32 * SCALE, grid.n_el as u32 * SCALE);
        for az in 0..grid.n_az {
            for el in 0..grid.n_el {
                let c = ramp((values[grid.cell_index(az, el)] as f64 - lo) / (hi - lo));
                block(&mut img, az as u32, (grid.n_el - 1 - el) as u32, c);
            }
        }
        Self { img, mapping: Mapping::Rect(grid) }
    }

    /// `values` is a `side x side` image; pixels outside the disk are gray.
    pub fn polar(values: &[f32], layout: PolarLayout) -> Self {
        let side = layout.side();
        let inside = |i: usize| layout.is_valid(i / side, i % side);
        let (lo, hi) = range(values.iter().enumerate().filter(|(i, _)| inside(*i)).map(|(_, v)| *v));
        let mut img = RgbImage::new(side as u32 * SCALE, side as u32 * SCALE);
        for (i, v) in values.iter().enumerate() {
            let c = if inside(i) { ramp((*v as f64 - lo) / (hi - lo)) } else { OUTSIDE_RGB };
            block(&mut img, (i % side) as u32, (i / side) as u32, c);
        }
        Self { img, mapping: Mapping::Polar(layout) }
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    /// Output pixel on which a direction's marker is centered.
    pub fn anchor(&self, dir: &SteeringDirection<Real>) -> (i64, i64) {
        let (x, y) = match self.mapping {
            Mapping::Rect(g) => {
                let az = wrap_azimuth(dir.azimuth_deg()) as f64;
                let x = (az + 180.0) / g.az_step_deg + 0.5;
                let y = g.n_el as f64 - (dir.elevation_deg() as f64 / g.el_step_deg + 0.5);
                (x, y)
            }
            Mapping::Polar(l) => l.direction_to_polar(dir),
        };
        ((x * SCALE as f64).floor() as i64, (y * SCALE as f64).floor() as i64)
    }

    pub fn mark(&mut self, dir: &SteeringDirection<Real>, marker: Marker) {
        let (cx, cy) = self.anchor(dir);
        let r = MARKER_RADIUS;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                let inside = x >= 0 && y >= 0 && x < self.width() as i64 && y < self.height() as i64;
                if inside && marker.covers(dx, dy) {
                    self.img.put_pixel(x as u32, y as u32, Rgb(marker.rgb()));
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(other.to_string()),
        })
    }
}

/// Finite min and max; a flat or empty map spans `[lo, lo + 1]`.
fn range(values: impl Iterator<Item = f32>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v as f64), hi.max(v as f64)));
    if lo >= hi {
        let lo = if lo.is_finite() { lo } else { 0.0 };
        return (lo, lo + 1.0);
    }
    (lo, hi)
}

fn block(img: &mut RgbImage, col: u32, row: u32, c: [u8; 3]) {
    for y in row * SCALE..(row + 1) * SCALE {
        for x in col * SCALE..(col + 1) * SCALE {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

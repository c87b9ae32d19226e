//! Band-power spectral maps over the steering grid and their reprojection
//! onto a polar disk (zenith at the center, horizon on the rim).

use rustfft::{num_complex::Complex, FftPlanner};

use crate::beamformer::{BeamGrid, SnapshotTensor};
use crate::error::{Error, Result};
use crate::geometry::SteeringDirection;
use crate::labeling::BinaryMask;
use crate::scalar::Scalar;
use crate::{FRAME_LEN, SAMPLE_RATE_HZ};

/// Spectral band layout: `n_bands` equal-width bands over `[lo_hz, hi_hz)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandConfig {
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub n_bands: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { lo_hz: 200.0, hi_hz: 2200.0, n_bands: 16 }
    }
}

impl BandConfig {
    /// `(fft_bin, band)` pairs for a `FRAME_LEN`-point FFT at 48 kHz: every
    /// bin whose frequency lies in `[lo, hi)`, assigned by the band edges
    /// `linspace(lo, hi, n_bands + 1)`.
    pub fn bin_assignment(&self) -> Result<Vec<(usize, usize)>> {
        let df = SAMPLE_RATE_HZ as f64 / FRAME_LEN as f64;
        if !(self.lo_hz >= 0.0 && self.hi_hz > self.lo_hz && self.hi_hz <= SAMPLE_RATE_HZ as f64 / 2.0) || self.n_bands == 0 {
            return Err(Error::InvalidParameter(format!(
                "invalid band {}..{} Hz with {} bands",
                self.lo_hz, self.hi_hz, self.n_bands
            )));
        }
        let width = (self.hi_hz - self.lo_hz) / self.n_bands as f64;
        let mut out = Vec::new();
        let mut counts = vec![0usize; self.n_bands];
        let k0 = (self.lo_hz / df).ceil() as usize;
        for k in k0.. {
            let f = k as f64 * df;
            if f >= self.hi_hz - 1e-9 {
                break;
            }
            let b = (((f - self.lo_hz) / width + 1e-9).floor() as usize).min(self.n_bands - 1);
            counts[b] += 1;
            out.push((k, b));
        }
        if let Some(b) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidParameter(format!("band {b} contains no FFT bin")));
        }
        Ok(out)
    }

    pub fn band_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.n_bands];
        for (_, b) in self.bin_assignment()? {
            counts[b] += 1;
        }
        Ok(counts)
    }
}

/// Normalized band powers, `n_az x n_el x n_bands`, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMap<T> {
    pub grid: BeamGrid,
    pub n_bands: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SpectralMap<T> {
    pub fn zeros(grid: BeamGrid, n_bands: usize) -> Self {
        Self { grid, n_bands, data: vec![T::zero(); grid.cell_count() * n_bands] }
    }

    #[inline]
    pub fn get(&self, az: usize, el: usize, band: usize) -> T {
        self.data[(az * self.grid.n_el + el) * self.n_bands + band]
    }

    pub fn cell(&self, az: usize, el: usize) -> &[T] {
        let i = (az * self.grid.n_el + el) * self.n_bands;
        &self.data[i..i + self.n_bands]
    }
}

/// Min-max normalizes `data` in place to `[0, 1]`. Degenerate input (all
/// values equal, or non-finite range) becomes all zeros; returns whether the
/// input was non-degenerate.
pub fn normalize_min_max<T: Scalar>(data: &mut [T]) -> bool {
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span > T::zero()) || !span.is_finite() {
        data.iter_mut().for_each(|v| *v = T::zero());
        return false;
    }
    let inv = T::one() / span;
    data.iter_mut().for_each(|v| *v = ((*v - lo) * inv).min(T::one()).max(T::zero()));
    true
}

/// Per-direction mean band powers of the snapshot's magnitude spectra,
/// min-max normalized over the whole frame.
pub fn spectral_features<T: Scalar>(snap: &SnapshotTensor<T>, bands: &BandConfig) -> Result<SpectralMap<T>> {
    if snap.t_len != FRAME_LEN {
        return Err(Error::Shape(format!("snapshot has {} samples per direction, expected {FRAME_LEN}", snap.t_len)));
    }
    let assignment = bands.bin_assignment()?;
    let counts = bands.band_counts()?;
    let fft = FftPlanner::<T>::new().plan_fft_forward(FRAME_LEN);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); FRAME_LEN];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut map = SpectralMap::zeros(snap.grid, bands.n_bands);
    for cell in 0..snap.grid.cell_count() {
        for (b, &v) in buf.iter_mut().zip(snap.cell_by_index(cell)) {
            *b = Complex::new(v, T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let out = &mut map.data[cell * bands.n_bands..(cell + 1) * bands.n_bands];
        for &(k, b) in &assignment {
            out[b] += buf[k].norm_sqr();
        }
        for (o, &c) in out.iter_mut().zip(&counts) {
            *o /= T::from_usize_lossy(c);
        }
    }
    normalize_min_max(&mut map.data);
    Ok(map)
}

/// Geometry of the polar disk image. The image is `2E x 2E` pixels; pixel
/// `(row, col)` has its center at continuous coordinates
/// `(x, y) = (col + 0.5, row + 0.5)` and the disk center sits at `(E, E)`.
/// Azimuth 0 points right (+x), azimuth 90 points up (towards row 0); the
/// radius is `E * (90 - elevation) / 90`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolarLayout {
    radius_px: usize,
}

impl PolarLayout {
    pub fn new(radius_px: usize) -> Self {
        assert!(radius_px > 0, "polar layout needs a positive radius");
        Self { radius_px }
    }

    /// Layout matching a grid with `E` elevation bins.
    pub fn for_grid(grid: &BeamGrid) -> Self {
        Self::new(grid.n_el)
    }

    pub fn radius_px(&self) -> usize {
        self.radius_px
    }

    pub fn side(&self) -> usize {
        2 * self.radius_px
    }

    pub fn center(&self) -> (f64, f64) {
        (self.radius_px as f64, self.radius_px as f64)
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn radius_of(&self, row: usize, col: usize) -> f64 {
        let (px, py) = self.pixel_center(row, col);
        let (cx, cy) = self.center();
        (px - cx).hypot(py - cy)
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.radius_of(row, col) <= self.radius_px as f64
    }

    /// Row-major in-disk flags.
    pub fn validity(&self) -> Vec<bool> {
        let side = self.side();
        (0..side * side).map(|i| self.is_valid(i / side, i % side)).collect()
    }

    /// Direction of a continuous image point inside the disk.
    pub fn polar_to_direction<T: Scalar>(&self, px: f64, py: f64) -> Result<SteeringDirection<T>> {
        let (cx, cy) = self.center();
        let (dx, dy) = (px - cx, cy - py);
        let r = dx.hypot(dy);
        let e = self.radius_px as f64;
        if !(r <= e + 1e-9) {
            return Err(Error::InvalidParameter(format!("point ({px}, {py}) lies outside the polar disk")));
        }
        let az = if r == 0.0 { 0.0 } else { dy.atan2(dx).to_degrees() };
        let el = (90.0 * (1.0 - r / e)).max(0.0);
        SteeringDirection::new(T::lit(az), T::lit(el))
    }

    /// Continuous image point of a direction.
    pub fn direction_to_polar<T: Scalar>(&self, dir: &SteeringDirection<T>) -> (f64, f64) {
        let (cx, cy) = self.center();
        let r = self.radius_px as f64 * (90.0 - dir.elevation_deg().to_f64_lossy()) / 90.0;
        let az = dir.azimuth_deg().to_f64_lossy().to_radians();
        (cx + r * az.cos(), cy - r * az.sin())
    }

    /// Pixel containing a continuous point, if inside the image.
    pub fn pixel_at(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let side = self.side() as f64;
        if px < 0.0 || py < 0.0 || px >= side || py >= side {
            return None;
        }
        Some((py.floor() as usize, px.floor() as usize))
    }

    /// Source pixel for output pixel `(row, col)` after rotating the image by
    /// `deg` about the disk center (counter-clockwise, i.e. increasing
    /// azimuth), nearest-neighbor.
    fn rotated_source(&self, row: usize, col: usize, deg: f64) -> Option<(usize, usize)> {
        let (px, py) = self.pixel_center(row, col);
        let (cx, cy) = self.center();
        let (dx, dy) = (px - cx, cy - py);
        let (s, c) = (-deg.to_radians()).sin_cos();
        let (sx, sy) = (c * dx - s * dy, s * dx + c * dy);
        self.pixel_at(cx + sx, cy - sy)
    }

    /// Rotates a single-channel image by `deg` of azimuth.
    pub fn rotate_image<T: Scalar>(&self, img: &[T], deg: f64) -> Vec<T> {
        let side = self.side();
        (0..side * side)
            .map(|i| match self.rotated_source(i / side, i % side, deg) {
                Some((r, c)) if self.is_valid(i / side, i % side) => img[r * side + c],
                _ => T::zero(),
            })
            .collect()
    }

    pub fn rotate_mask(&self, mask: &BinaryMask, deg: f64) -> BinaryMask {
        let side = self.side();
        let data = (0..side * side)
            .map(|i| match self.rotated_source(i / side, i % side, deg) {
                Some((r, c)) => mask.get(r, c),
                None => 0,
            })
            .collect();
        BinaryMask::from_data(self, data).expect("same layout")
    }
}

/// Network input: `n_bands` channels of `side x side` pixels, stored
/// channel-major (`[band][row][col]`); zero outside the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarImage<T> {
    pub layout: PolarLayout,
    pub n_bands: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PolarImage<T> {
    pub fn zeros(layout: PolarLayout, n_bands: usize) -> Self {
        Self { layout, n_bands, data: vec![T::zero(); n_bands * layout.side().pow(2)] }
    }

    pub fn band(&self, b: usize) -> &[T] {
        let n = self.layout.side().pow(2);
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> T {
        let side = self.layout.side();
        self.data[(band * side + row) * side + col]
    }

    /// Sum over bands per pixel.
    pub fn band_sum(&self) -> Vec<T> {
        let n = self.layout.side().pow(2);
        let mut out = vec![T::zero(); n];
        for b in 0..self.n_bands {
            for (o, &v) in out.iter_mut().zip(self.band(b)) {
                *o += v;
            }
        }
        out
    }

    /// `side x side x n_bands` (pixel-major) copy, the on-disk layout.
    pub fn to_hwc(&self) -> Vec<T> {
        let n = self.layout.side().pow(2);
        let mut out = vec![T::zero(); n * self.n_bands];
        for b in 0..self.n_bands {
            for p in 0..n {
                out[p * self.n_bands + b] = self.data[b * n + p];
            }
        }
        out
    }

    pub fn from_hwc(layout: PolarLayout, n_bands: usize, hwc: &[T]) -> Result<Self> {
        let n = layout.side().pow(2);
        if hwc.len() != n * n_bands {
            return Err(Error::Shape(format!("polar image needs {} values, got {}", n * n_bands, hwc.len())));
        }
        let mut img = Self::zeros(layout, n_bands);
        for p in 0..n {
            for b in 0..n_bands {
                img.data[b * n + p] = hwc[p * n_bands + b];
            }
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    pixel: usize,
    cells: [usize; 4],
    weights: [f64; 4],
}

/// Precomputed bilinear sampling from a rectangular grid to a polar layout.
#[derive(Debug, Clone)]
pub struct PolarProjector {
    grid: BeamGrid,
    layout: PolarLayout,
    taps: Vec<Tap>,
}

impl PolarProjector {
    pub fn new(grid: BeamGrid, layout: PolarLayout) -> Self {
        let side = layout.side();
        let mut taps = Vec::new();
        for row in 0..side {
            for col in 0..side {
                if !layout.is_valid(row, col) {
                    continue;
                }
                let (px, py) = layout.pixel_center(row, col);
                let dir: SteeringDirection<f64> = layout.polar_to_direction(px, py).expect("valid pixel");
                let (cells, weights) = grid.bilinear(dir.azimuth_deg(), dir.elevation_deg());
                taps.push(Tap { pixel: row * side + col, cells, weights });
            }
        }
        Self { grid, layout, taps }
    }

    pub fn layout(&self) -> PolarLayout {
        self.layout
    }

    /// Resamples every band of `sm` onto the disk.
    pub fn project<T: Scalar>(&self, sm: &SpectralMap<T>) -> Result<PolarImage<T>> {
        if sm.grid != self.grid {
            return Err(Error::Shape("spectral map grid differs from projector grid".into()));
        }
        let nb = sm.n_bands;
        let n = self.layout.side().pow(2);
        let mut img = PolarImage::zeros(self.layout, nb);
        for tap in &self.taps {
            for b in 0..nb {
                let mut acc = 0.0;
                for (c, w) in tap.cells.iter().zip(&tap.weights) {
                    acc += w * sm.data[c * nb + b].to_f64_lossy();
                }
                img.data[b * n + tap.pixel] = T::lit(acc);
            }
        }
        Ok(img)
    }

    /// Resamples a single `n_az x n_el` map (e.g. an energy map).
    pub fn project_scalar<T: Scalar>(&self, map: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.layout.side().pow(2)];
        for tap in &self.taps {
            let acc: f64 = tap.cells.iter().zip(&tap.weights).map(|(&c, w)| w * map[c].to_f64_lossy()).sum();
            out[tap.pixel] = T::lit(acc);
        }
        out
    }
}

/// Bilinear reprojection of a spectral map onto the polar disk.
pub fn polar_project<T: Scalar>(sm: &SpectralMap<T>, layout: &PolarLayout) -> Result<PolarImage<T>> {
    if layout.radius_px() != sm.grid.n_el {
        return Err(Error::Shape(format!(
            "layout side {} does not match 2E = {}",
            layout.side(),
            2 * sm.grid.n_el
        )));
    }
    PolarProjector::new(sm.grid, *layout).project(sm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn default_band_layout() {
        let a = BandConfig::default().bin_assignment().unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.first(), Some(&(20, 0)));
        assert_eq!(a.last(), Some(&(219, 15)));
        // 1000 Hz -> bin 100 -> band 6 ([950, 1075) Hz)
        assert_eq!(a.iter().find(|(k, _)| *k == 100).unwrap().1, 6);
        let c = BandConfig::default().band_counts().unwrap();
        assert_eq!(c.iter().sum::<usize>(), 200);
        assert!(c.iter().all(|&n| n == 12 || n == 13));
        assert!(BandConfig { lo_hz: 200.0, hi_hz: 210.0, n_bands: 4 }.bin_assignment().is_err());
    }

    #[test]
    fn normalization_rules() {
        let mut v = vec![2.0, 4.0, 3.0];
        assert!(normalize_min_max(&mut v));
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
        let mut flat = vec![5.0f32; 4];
        assert!(!normalize_min_max(&mut flat));
        assert!(flat.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn polar_layout_examples() {
        let l = PolarLayout::new(23);
        assert_eq!(l.side(), 46);
        let c: SteeringDirection<f64> = l.polar_to_direction(23.0, 23.0).unwrap();
        assert_eq!(c.elevation_deg(), 90.0);
        let edge: SteeringDirection<f64> = l.polar_to_direction(46.0, 23.0).unwrap();
        assert!(edge.azimuth_deg().abs() < 1e-12 && edge.elevation_deg().abs() < 1e-12);
        let up: SteeringDirection<f64> = l.polar_to_direction(23.0, 10.0).unwrap();
        assert!((up.azimuth_deg() - 90.0).abs() < 1e-12);
        assert!(l.polar_to_direction::<f64>(0.0, 0.0).is_err());
        assert!(l.is_valid(22, 22) && !l.is_valid(0, 0));
    }

    #[test]
    fn direction_round_trip() {
        let l = PolarLayout::new(23);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = SteeringDirection::new(rng.gen_range(-180.0..180.0), rng.gen_range(0.0..=90.0)).unwrap();
            let (px, py) = l.direction_to_polar(&d);
            let back: SteeringDirection<f64> = l.polar_to_direction(px, py).unwrap();
            let (qx, qy) = l.direction_to_polar(&back);
            assert!((px - qx).hypot(py - qy) < 1e-9);
            assert!((d.elevation_deg() - back.elevation_deg()).abs() < 1e-9, "{d:?} {back:?}");
            let daz = crate::geometry::wrap_azimuth(d.azimuth_deg() - back.azimuth_deg());
            assert!(daz.abs() < 1e-9 || d.elevation_deg() > 90.0 - 1e-9, "{d:?} {back:?}");
        }
    }

    #[test]
    fn constant_map_projects_to_constant_disk() {
        let grid = BeamGrid::default();
        let mut sm = SpectralMap::<f64>::zeros(grid, 3);
        sm.data.iter_mut().for_each(|v| *v = 0.625);
        let img = polar_project(&sm, &PolarLayout::for_grid(&grid)).unwrap();
        let valid = img.layout.validity();
        for b in 0..3 {
            for (v, ok) in img.band(b).iter().zip(&valid) {
                assert!((*v - if *ok { 0.625 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn horizon_impulse_lands_on_right_edge() {
        let grid = BeamGrid::default();
        let mut sm = SpectralMap::<f64>::zeros(grid, 1);
        let (a0, e0) = (grid.az_index_of(0.0).unwrap(), 0);
        sm.data[a0 * grid.n_el + e0] = 1.0;
        let layout = PolarLayout::for_grid(&grid);
        let img = polar_project(&sm, &layout).unwrap();
        let side = layout.side();
        let mut total = 0.0;
        for row in 0..side {
            for col in 0..side {
                let v = img.get(0, row, col);
                if v > 0.0 {
                    total += v;
                    // only the right half-disk near the rim
                    assert!(col >= side / 2, "mass at ({row}, {col})");
                    assert!(layout.radius_of(row, col) > 18.0);
                }
            }
        }
        assert!(total > 0.0);
        // the rim pixel on the phi = 0 ray carries mass
        assert!(img.get(0, 22, 45) > 0.0 || img.get(0, 23, 45) > 0.0);
    }

    #[test]
    fn hwc_round_trip() {
        let layout = PolarLayout::new(4);
        let mut img = PolarImage::<f32>::zeros(layout, 3);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        let back = PolarImage::from_hwc(layout, 3, &img.to_hwc()).unwrap();
        assert_eq!(img, back);
    }

    proptest! {
        #[test]
        fn projection_preserves_order(seed in 0u64..1000) {
            // two maps with a >= b everywhere keep the ordering on every pixel
            let grid = BeamGrid::default();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut a = SpectralMap::<f64>::zeros(grid, 2);
            let mut b = SpectralMap::<f64>::zeros(grid, 2);
            for (x, y) in a.data.iter_mut().zip(b.data.iter_mut()) {
                *y = rng.gen::<f64>();
                *x = *y + rng.gen::<f64>() * 0.1;
            }
            let layout = PolarLayout::for_grid(&grid);
            let pa = polar_project(&a, &layout).unwrap();
            let pb = polar_project(&b, &layout).unwrap();
            for (x, y) in pa.data.iter().zip(&pb.data) {
                prop_assert!(x >= y);
            }
        }
    }
}

//! Delay-and-sum beamforming over an azimuth/elevation grid and the
//! energy-argmax baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fracdelay::{accumulate_kernel, Kernel};
use crate::geometry::{steering_delays, MicArrayGeometry, SteeringDirection};
use crate::scalar::Scalar;
use crate::simulator::MultichannelRecording;
use crate::{FRAME_LEN, SAMPLE_RATE_HZ};

/// Uniform steering grid. Azimuths start at -180 deg, elevations at 0 deg;
/// elevations stay strictly below 90 deg so the grid is uniform.
/// Cells are indexed `az * n_el + el`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "GridSteps", into = "GridSteps")]
pub struct BeamGrid {
    pub az_step_deg: f64,
    pub el_step_deg: f64,
    pub n_az: usize,
    pub n_el: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct GridSteps {
    az_step_deg: f64,
    el_step_deg: f64,
}

impl TryFrom<GridSteps> for BeamGrid {
    type Error = Error;
    fn try_from(s: GridSteps) -> Result<Self> {
        BeamGrid::new(s.az_step_deg, s.el_step_deg)
    }
}

impl From<BeamGrid> for GridSteps {
    fn from(g: BeamGrid) -> Self {
        GridSteps { az_step_deg: g.az_step_deg, el_step_deg: g.el_step_deg }
    }
}

impl Default for BeamGrid {
    fn default() -> Self {
        Self::new(4.0, 4.0).expect("default grid")
    }
}

impl BeamGrid {
    /// The azimuth step must divide 360 deg.
    pub fn new(az_step_deg: f64, el_step_deg: f64) -> Result<Self> {
        if !(az_step_deg > 0.0 && az_step_deg <= 360.0 && el_step_deg > 0.0 && el_step_deg <= 90.0) {
            return Err(Error::InvalidParameter(format!("grid steps {az_step_deg},{el_step_deg} out of range")));
        }
        let n_az_f = 360.0 / az_step_deg;
        let n_az = n_az_f.round() as usize;
        if (n_az_f - n_az as f64).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("azimuth step {az_step_deg} does not divide 360")));
        }
        let n_el = (90.0 / el_step_deg - 1e-9).ceil() as usize;
        Ok(Self { az_step_deg, el_step_deg, n_az, n_el })
    }

    pub fn cell_count(&self) -> usize {
        self.n_az * self.n_el
    }

    pub fn azimuth_deg(&self, az: usize) -> f64 {
        -180.0 + az as f64 * self.az_step_deg
    }

    pub fn elevation_deg(&self, el: usize) -> f64 {
        el as f64 * self.el_step_deg
    }

    pub fn max_elevation_deg(&self) -> f64 {
        self.elevation_deg(self.n_el - 1)
    }

    pub fn cell_index(&self, az: usize, el: usize) -> usize {
        az * self.n_el + el
    }

    /// `(az, el)` indices of a cell.
    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.n_el, cell % self.n_el)
    }

    pub fn direction<T: Scalar>(&self, cell: usize) -> SteeringDirection<T> {
        let (a, e) = self.cell_coords(cell);
        SteeringDirection::new(T::lit(self.azimuth_deg(a)), T::lit(self.elevation_deg(e))).expect("grid direction")
    }

    /// Index of an azimuth lying exactly on the grid.
    pub fn az_index_of(&self, az_deg: f64) -> Option<usize> {
        let f = (crate::geometry::wrap_azimuth(az_deg) + 180.0) / self.az_step_deg;
        let i = f.round();
        ((f - i).abs() < 1e-9).then_some(i as usize % self.n_az)
    }

    /// Nearest cell to a direction (azimuth wraps, elevation clamps).
    pub fn nearest_cell<T: Scalar>(&self, dir: &SteeringDirection<T>) -> usize {
        let a = ((dir.azimuth_deg().to_f64_lossy() + 180.0) / self.az_step_deg).round() as usize % self.n_az;
        let e = ((dir.elevation_deg().to_f64_lossy() / self.el_step_deg).round() as usize).min(self.n_el - 1);
        self.cell_index(a, e)
    }

    /// Bilinear sampling cells and weights for an arbitrary direction, with
    /// azimuth wraparound at +-180 deg and elevation clamped to the grid.
    pub fn bilinear(&self, az_deg: f64, el_deg: f64) -> ([usize; 4], [f64; 4]) {
        let fa = (crate::geometry::wrap_azimuth(az_deg) + 180.0) / self.az_step_deg;
        let a0f = fa.floor();
        let wa = fa - a0f;
        let a0 = a0f as usize % self.n_az;
        let a1 = (a0 + 1) % self.n_az;
        let fe = el_deg.clamp(0.0, self.max_elevation_deg()) / self.el_step_deg;
        let e0 = (fe.floor() as usize).min(self.n_el - 1);
        let e1 = (e0 + 1).min(self.n_el - 1);
        let we = fe - e0 as f64;
        (
            [self.cell_index(a0, e0), self.cell_index(a0, e1), self.cell_index(a1, e0), self.cell_index(a1, e1)],
            [(1.0 - wa) * (1.0 - we), (1.0 - wa) * we, wa * (1.0 - we), wa * we],
        )
    }
}

/// Beamformed waveforms for one frame: `cell_count x t_len`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTensor<T> {
    pub grid: BeamGrid,
    pub frame_index: usize,
    pub t_len: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> SnapshotTensor<T> {
    pub fn zeros(grid: BeamGrid, frame_index: usize) -> Self {
        Self { grid, frame_index, t_len: FRAME_LEN, data: vec![T::zero(); grid.cell_count() * FRAME_LEN] }
    }

    pub fn sample_rate_hz(&self) -> u32 {
        SAMPLE_RATE_HZ
    }

    pub fn cell_by_index(&self, cell: usize) -> &[T] {
        &self.data[cell * self.t_len..(cell + 1) * self.t_len]
    }

    pub fn cell(&self, az: usize, el: usize) -> &[T] {
        self.cell_by_index(self.grid.cell_index(az, el))
    }
}

/// Per-direction RMS of the beamformed signal, `n_az x n_el`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap<T> {
    pub grid: BeamGrid,
    pub data: Vec<T>,
}

impl<T: Scalar> EnergyMap<T> {
    pub fn get(&self, az: usize, el: usize) -> T {
        self.data[self.grid.cell_index(az, el)]
    }
}

pub fn energy_map<T: Scalar>(snap: &SnapshotTensor<T>) -> EnergyMap<T> {
    let data = (0..snap.grid.cell_count())
        .map(|c| {
            let s: f64 = snap.cell_by_index(c).iter().map(|v| v.to_f64_lossy().powi(2)).sum();
            T::lit((s / snap.t_len as f64).sqrt())
        })
        .collect();
    EnergyMap { grid: snap.grid, data }
}

/// Direction of the strongest cell. Ties go to the lowest elevation, then the
/// lowest azimuth index. `None` for an all-zero (or non-finite) map.
pub fn bf_argmax<T: Scalar>(map: &EnergyMap<T>) -> Option<SteeringDirection<T>> {
    let g = map.grid;
    let mut best: Option<(usize, T)> = None;
    for e in 0..g.n_el {
        for a in 0..g.n_az {
            let v = map.get(a, e);
            if v > T::zero() && best.is_none_or(|(_, b)| v > b) {
                best = Some((g.cell_index(a, e), v));
            }
        }
    }
    best.map(|(c, _)| g.direction(c))
}

/// Context samples on either side of a frame needed by every steering delay
/// and the interpolation kernel.
pub fn context_pad<T: Scalar>(geom: &MicArrayGeometry<T>) -> usize {
    (geom.aperture().to_f64_lossy() / geom.speed_of_sound().to_f64_lossy() * SAMPLE_RATE_HZ as f64).ceil() as usize + 8
}

/// Copies `[start, start + len)` of `x`, zero outside the signal.
pub(crate) fn padded_window<T: Scalar>(x: &[T], start: isize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    let n = x.len() as isize;
    let lo = start.max(0);
    let hi = (start + len as isize).min(n);
    if lo < hi {
        out[(lo - start) as usize..(hi - start) as usize].copy_from_slice(&x[lo as usize..hi as usize]);
    }
    out
}

pub(crate) fn check_frame<T: Scalar>(rec: &MultichannelRecording<T>, n_mics: usize, frame: usize) -> Result<()> {
    if rec.channel_count() != n_mics {
        return Err(Error::ChannelMismatch { recording: rec.channel_count(), geometry: n_mics });
    }
    if rec.sample_rate_hz() != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate { found: rec.sample_rate_hz(), expected: SAMPLE_RATE_HZ });
    }
    if frame >= rec.frame_count() {
        return Err(Error::FrameOutOfRange { frame, available: rec.frame_count() });
    }
    Ok(())
}

/// Time-domain delay-and-sum beamformer with interpolation kernels cached
/// per (direction, microphone).
#[derive(Debug, Clone)]
pub struct DasBeamformer<T> {
    grid: BeamGrid,
    n_mics: usize,
    pad: usize,
    kernels: Vec<Kernel<T>>,
}

impl<T: Scalar> DasBeamformer<T> {
    pub fn new(geom: &MicArrayGeometry<T>, grid: BeamGrid) -> Self {
        let fs = SAMPLE_RATE_HZ as f64;
        let kernels = (0..grid.cell_count())
            .flat_map(|c| {
                let dir = grid.direction::<T>(c);
                steering_delays(geom, &dir).0.into_iter().map(move |tau| Kernel::at(-tau.to_f64_lossy() * fs))
            })
            .collect();
        Self { grid, n_mics: geom.mic_count(), pad: context_pad(geom), kernels }
    }

    pub fn grid(&self) -> BeamGrid {
        self.grid
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// `y(t) = (1/N) sum_n x_n(t - tau_n)` for every grid direction over frame
    /// `frame`, drawing samples from a zero-padded context window.
    pub fn snapshot(&self, rec: &MultichannelRecording<T>, frame: usize) -> Result<SnapshotTensor<T>> {
        check_frame(rec, self.n_mics, frame)?;
        let start = (frame * FRAME_LEN) as isize - self.pad as isize;
        let ctx: Vec<Vec<T>> =
            rec.channels().iter().map(|ch| padded_window(ch, start, FRAME_LEN + 2 * self.pad)).collect();
        let gain = T::one() / T::from_usize_lossy(self.n_mics);
        let mut snap = SnapshotTensor::zeros(self.grid, frame);
        snap.data.par_chunks_mut(FRAME_LEN).enumerate().for_each(|(c, out)| {
            for (n, x) in ctx.iter().enumerate() {
                accumulate_kernel(x, self.pad as isize, &self.kernels[c * self.n_mics + n], gain, out);
            }
        });
        Ok(snap)
    }
}

/// One-shot snapshot; builds the kernel cache on every call.
pub fn das_snapshot<T: Scalar>(
    rec: &MultichannelRecording<T>,
    frame: usize,
    grid: BeamGrid,
    geom: &MicArrayGeometry<T>,
) -> Result<SnapshotTensor<T>> {
    DasBeamformer::new(geom, grid).snapshot(rec, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{default_array, unit_vector};
    use crate::labeling::angular_distance;
    use crate::simulator::{render_noise_only, render_scene, RenderOptions, SourceTrajectory};

    fn tone(len: usize, f: f64) -> Vec<f64> {
        (0..len).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 48000.0).sin()).collect()
    }

    fn far(az: f64, el: f64) -> SourceTrajectory<f64> {
        let u = unit_vector(&SteeringDirection::new(az, el).unwrap());
        SourceTrajectory::stationary(u.map(|v| 100.0 * v), 10.0).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = BeamGrid::default();
        assert_eq!((g.n_az, g.n_el), (90, 23));
        assert_eq!(g.azimuth_deg(89), 176.0);
        assert_eq!(g.max_elevation_deg(), 88.0);
        assert!(BeamGrid::new(7.0, 4.0).is_err());
        let j = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<BeamGrid>(&j).unwrap(), g);
    }

    #[test]
    fn single_mic_at_origin_is_identity() {
        let geom = MicArrayGeometry::new(vec![[0.0; 3]], 343.0).unwrap();
        let x: Vec<f64> = (0..3 * FRAME_LEN).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let rec = MultichannelRecording::new(48000, vec![x.clone()]).unwrap();
        let grid = BeamGrid::new(90.0, 30.0).unwrap();
        let snap = das_snapshot(&rec, 1, grid, &geom).unwrap();
        for c in 0..grid.cell_count() {
            assert_eq!(snap.cell_by_index(c), &x[FRAME_LEN..2 * FRAME_LEN]);
        }
    }

    #[test]
    fn frame_and_channel_errors() {
        let geom = default_array::<f64>();
        let rec = MultichannelRecording::new(48000, vec![vec![0.0; FRAME_LEN]; 3]).unwrap();
        assert!(matches!(das_snapshot(&rec, 0, BeamGrid::default(), &geom), Err(Error::ChannelMismatch { .. })));
        let rec = MultichannelRecording::new(48000, vec![vec![0.0; FRAME_LEN]; 24]).unwrap();
        assert!(matches!(das_snapshot(&rec, 1, BeamGrid::default(), &geom), Err(Error::FrameOutOfRange { .. })));
    }

    #[test]
    fn tone_peaks_at_true_cell() {
        let geom = default_array::<f64>();
        let src = tone(3 * FRAME_LEN, 1000.0);
        let rec = render_scene(&geom, &far(60.0, 20.0), &src, &RenderOptions::default()).unwrap();
        let grid = BeamGrid::default();
        let map = energy_map(&das_snapshot(&rec, 1, grid, &geom).unwrap());
        let truth = grid.cell_index(grid.az_index_of(60.0).unwrap(), 5);
        let t = SteeringDirection::new(60.0, 20.0).unwrap();
        for c in 0..grid.cell_count() {
            if angular_distance(&grid.direction::<f64>(c), &t) >= 20.0 {
                assert!(map.data[truth] >= map.data[c]);
            }
        }
        assert_eq!(bf_argmax(&map).unwrap(), t);
    }

    #[test]
    fn incoherent_noise_is_averaged_down() {
        let geom = default_array::<f64>();
        let grid = BeamGrid::new(30.0, 30.0).unwrap();
        let bf = DasBeamformer::new(&geom, grid);
        let mut ratios = Vec::new();
        for seed in 0..4 {
            let rec = render_noise_only(&geom, 0.3, 1.0, seed).unwrap();
            let map = energy_map(&bf.snapshot(&rec, 1).unwrap());
            let mean = map.data.iter().sum::<f64>() / map.data.len() as f64;
            ratios.push(mean * 24f64.sqrt());
        }
        let r = ratios.iter().sum::<f64>() / ratios.len() as f64;
        // the interpolation kernel slightly attenuates white noise
        assert!((r - 1.0).abs() < 0.2, "ratio {r}");
    }

    #[test]
    fn energy_map_trivial_cases() {
        let grid = BeamGrid::new(90.0, 45.0).unwrap();
        let mut snap = SnapshotTensor::<f64>::zeros(grid, 0);
        let map = energy_map(&snap);
        assert!(map.data.iter().all(|&v| v == 0.0));
        assert!(bf_argmax(&map).is_none());
        snap.data[3 * FRAME_LEN + 10] = 2.0;
        let map = energy_map(&snap);
        for (c, v) in map.data.iter().enumerate() {
            assert_eq!(*v > 0.0, c == 3);
        }
    }

    #[test]
    fn argmax_tie_breaks() {
        let grid = BeamGrid::default();
        let flat = EnergyMap { grid, data: vec![1.0; grid.cell_count()] };
        let d = bf_argmax(&flat).unwrap();
        assert_eq!((d.azimuth_deg(), d.elevation_deg()), (-180.0, 0.0));
        let mut two = EnergyMap { grid, data: vec![0.0; grid.cell_count()] };
        two.data[grid.cell_index(50, 10)] = 3.0;
        two.data[grid.cell_index(70, 0)] = 3.0;
        let d = bf_argmax(&two).unwrap();
        assert_eq!((d.azimuth_deg(), d.elevation_deg()), (grid.azimuth_deg(70), 0.0));
    }

    #[test]
    fn snapshot_is_linear() {
        let geom = default_array::<f64>();
        let grid = BeamGrid::new(45.0, 30.0).unwrap();
        let a = render_noise_only(&geom, 0.2, 1.0, 1).unwrap();
        let b = render_noise_only(&geom, 0.2, 1.0, 2).unwrap();
        let mix: Vec<Vec<f64>> = a
            .channels()
            .iter()
            .zip(b.channels())
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| 2.0 * p - 0.5 * q).collect())
            .collect();
        let mix = MultichannelRecording::new(48000, mix).unwrap();
        let bf = DasBeamformer::new(&geom, grid);
        let (sa, sb, sm) = (bf.snapshot(&a, 1).unwrap(), bf.snapshot(&b, 1).unwrap(), bf.snapshot(&mix, 1).unwrap());
        for i in 0..sm.data.len() {
            assert!((sm.data[i] - (2.0 * sa.data[i] - 0.5 * sb.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn steering_consistency_under_source_rotation() {
        // re-simulate at a rotated azimuth; both true cells have near-equal RMS
        let geom = default_array::<f64>();
        let grid = BeamGrid::default();
        let bf = DasBeamformer::new(&geom, grid);
        let src = tone(3 * FRAME_LEN, 1000.0);
        let at = |az: f64| {
            let rec = render_scene(&geom, &far(az, 32.0), &src, &RenderOptions::default()).unwrap();
            let map = energy_map(&bf.snapshot(&rec, 1).unwrap());
            map.get(grid.az_index_of(az).unwrap(), 8)
        };
        for (a, b) in [(0.0, 120.0), (-40.0, 80.0), (100.0, -140.0)] {
            let (x, y) = (at(a), at(b));
            assert!((x - y).abs() / x < 0.02, "{a}: {x} vs {b}: {y}");
        }
    }
}

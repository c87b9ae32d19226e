//! Frequency-domain evaluation of the beamformer outputs that the pipeline
//! consumes (band features and the energy map) without materializing the
//! `cells x 4800` snapshot.
//!
//! Band features: the DFT of each channel over the frame window is tabulated
//! for every integer offset reachable by a steering delay (sliding DFT), and
//! the residual sub-sample delay is applied as a phase ramp.
//!
//! Energy: `sum_t y(t)^2` expands into pairwise channel cross-correlations
//! filtered by the correlation of the two interpolation kernels. The
//! correlations are taken over the unshifted frame window, so each term
//! differs from the time-domain sum only by the samples that slide in and
//! out at the window edges.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::beamformer::{check_frame, context_pad, padded_window, BeamGrid, EnergyMap};
use crate::error::Result;
use crate::features::{normalize_min_max, BandConfig, SpectralMap};
use crate::fracdelay::{Kernel, TAPS};
use crate::geometry::{steering_delays, MicArrayGeometry};
use crate::scalar::Scalar;
use crate::simulator::MultichannelRecording;
use crate::{FRAME_LEN, SAMPLE_RATE_HZ};

/// Sub-sample phase table resolution (levels per sample).
const PHASE_LEVELS: usize = 1024;
const PAIR_TAPS: usize = 2 * TAPS - 1;

/// Band features and energy map of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnalysis<T> {
    pub frame_index: usize,
    pub spectral: SpectralMap<T>,
    pub energy: EnergyMap<T>,
}

/// Per-geometry tables for fast frame analysis. Build once, then analyze any
/// number of frames (concurrently if desired).
pub struct FrameAnalyzer {
    grid: BeamGrid,
    bands: BandConfig,
    n_mics: usize,
    pad: usize,
    first_bin: usize,
    n_bins: usize,
    bin_band: Vec<usize>,
    band_counts: Vec<usize>,
    // per (cell, mic): offset index (o + pad) and phase row
    steer_off: Vec<u32>,
    steer_q: Vec<u16>,
    phase_re: Vec<f32>,
    phase_im: Vec<f32>,
    // per (cell, pair): first correlation lag index and combined filter
    pairs: Vec<(usize, usize)>,
    pair_lag: Vec<u32>,
    pair_filt: Vec<f32>,
    fft_len: usize,
    fft_fwd: Arc<dyn Fft<f32>>,
    fft_inv: Arc<dyn Fft<f32>>,
    dft_frame: Arc<dyn Fft<f64>>,
}

/// Smallest 2-3-5-smooth integer >= n.
fn smooth_size(n: usize) -> usize {
    (n..)
        .find(|&m| {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .expect("unbounded search")
}

impl FrameAnalyzer {
    pub fn new<T: Scalar>(geom: &MicArrayGeometry<T>, grid: BeamGrid, bands: BandConfig) -> Result<Self> {
        let fs = SAMPLE_RATE_HZ as f64;
        let n_mics = geom.mic_count();
        let pad = context_pad(geom);
        let assignment = bands.bin_assignment()?;
        let first_bin = assignment[0].0;
        let n_bins = assignment.len();
        debug_assert!(assignment.iter().enumerate().all(|(i, &(k, _))| k == first_bin + i));
        let bin_band = assignment.iter().map(|&(_, b)| b).collect();
        let band_counts = bands.band_counts()?;

        let mut phase_re = Vec::with_capacity((PHASE_LEVELS + 1) * n_bins);
        let mut phase_im = Vec::with_capacity((PHASE_LEVELS + 1) * n_bins);
        for q in 0..=PHASE_LEVELS {
            let df = q as f64 / PHASE_LEVELS as f64 - 0.5;
            for k in first_bin..first_bin + n_bins {
                let (s, c) = (-std::f64::consts::TAU * k as f64 * df / FRAME_LEN as f64).sin_cos();
                phase_re.push(c as f32);
                phase_im.push(s as f32);
            }
        }

        let pairs: Vec<(usize, usize)> = (0..n_mics).flat_map(|n| (n..n_mics).map(move |m| (n, m))).collect();
        let cells = grid.cell_count();
        let mut steer_off = Vec::with_capacity(cells * n_mics);
        let mut steer_q = Vec::with_capacity(cells * n_mics);
        let mut pair_lag = Vec::with_capacity(cells * pairs.len());
        let mut pair_filt = Vec::with_capacity(cells * pairs.len() * PAIR_TAPS);
        let inv_n2 = 1.0 / (n_mics * n_mics) as f64;
        for c in 0..cells {
            let delays: Vec<f64> =
                steering_delays(geom, &grid.direction::<T>(c)).0.iter().map(|t| t.to_f64_lossy() * fs).collect();
            for &d in &delays {
                let oi = d.round();
                let q = ((d - oi + 0.5) * PHASE_LEVELS as f64).round() as usize;
                steer_off.push((pad as f64 - oi) as u32);
                steer_q.push(q.min(PHASE_LEVELS) as u16);
            }
            let kernels: Vec<Kernel<f64>> = delays.iter().map(|&d| Kernel::at(-d)).collect();
            for &(n, m) in &pairs {
                let (hn, hm) = (&kernels[n], &kernels[m]);
                let lag0 = hm.base - hn.base - (TAPS as isize - 1) + pad as isize;
                debug_assert!(lag0 >= 0 && lag0 as usize + PAIR_TAPS <= 2 * pad + 1);
                pair_lag.push(lag0 as u32);
                let w = if n == m { inv_n2 } else { 2.0 * inv_n2 };
                let mut f = [0.0f64; PAIR_TAPS];
                for (j, a) in hn.taps.iter().enumerate() {
                    for (k, b) in hm.taps.iter().enumerate() {
                        f[k + TAPS - 1 - j] += a * b;
                    }
                }
                pair_filt.extend(f.iter().map(|v| (w * v) as f32));
            }
        }

        let fft_len = smooth_size(FRAME_LEN + 2 * pad);
        let mut planner = FftPlanner::<f32>::new();
        Ok(Self {
            grid,
            bands,
            n_mics,
            pad,
            first_bin,
            n_bins,
            bin_band,
            band_counts,
            steer_off,
            steer_q,
            phase_re,
            phase_im,
            pairs,
            pair_lag,
            pair_filt,
            fft_len,
            fft_fwd: planner.plan_fft_forward(fft_len),
            fft_inv: planner.plan_fft_inverse(fft_len),
            dft_frame: FftPlanner::<f64>::new().plan_fft_forward(FRAME_LEN),
        })
    }

    pub fn grid(&self) -> BeamGrid {
        self.grid
    }

    pub fn bands(&self) -> BandConfig {
        self.bands
    }

    fn contexts<T: Scalar>(&self, rec: &MultichannelRecording<T>, frame: usize) -> Result<Vec<Vec<f64>>> {
        check_frame(rec, self.n_mics, frame)?;
        let start = (frame * FRAME_LEN) as isize - self.pad as isize;
        Ok(rec
            .channels()
            .iter()
            .map(|ch| padded_window(ch, start, FRAME_LEN + 2 * self.pad).iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }

    pub fn analyze<T: Scalar>(&self, rec: &MultichannelRecording<T>, frame: usize) -> Result<FrameAnalysis<T>> {
        let ctx = self.contexts(rec, frame)?;
        Ok(FrameAnalysis { frame_index: frame, spectral: self.spectral_from(&ctx), energy: self.energy_from(&ctx) })
    }

    pub fn spectral<T: Scalar>(&self, rec: &MultichannelRecording<T>, frame: usize) -> Result<SpectralMap<T>> {
        Ok(self.spectral_from(&self.contexts(rec, frame)?))
    }

    pub fn energy<T: Scalar>(&self, rec: &MultichannelRecording<T>, frame: usize) -> Result<EnergyMap<T>> {
        Ok(self.energy_from(&self.contexts(rec, frame)?))
    }

    /// Sliding DFT `W_n(o, k)` for offsets `o in [-pad, pad]`, stored as
    /// `[mic][o + pad][bin]` split into real and imaginary planes.
    fn sliding_dft(&self, ctx: &[Vec<f64>]) -> (Vec<f32>, Vec<f32>) {
        let n_off = 2 * self.pad + 1;
        let kb = self.n_bins;
        let mut re = vec![0.0f32; self.n_mics * n_off * kb];
        let mut im = vec![0.0f32; self.n_mics * n_off * kb];
        let rot: Vec<Complex<f64>> = (0..kb)
            .map(|i| Complex::from_polar(1.0, std::f64::consts::TAU * (self.first_bin + i) as f64 / FRAME_LEN as f64))
            .collect();
        let mut buf = vec![Complex::new(0.0, 0.0); FRAME_LEN];
        for (n, x) in ctx.iter().enumerate() {
            for (b, &v) in buf.iter_mut().zip(&x[..FRAME_LEN]) {
                *b = Complex::new(v, 0.0);
            }
            self.dft_frame.process(&mut buf);
            let mut w: Vec<Complex<f64>> = buf[self.first_bin..self.first_bin + kb].to_vec();
            for o in 0..n_off {
                let base = (n * n_off + o) * kb;
                for (i, v) in w.iter().enumerate() {
                    re[base + i] = v.re as f32;
                    im[base + i] = v.im as f32;
                }
                if o + 1 < n_off {
                    let d = x[o + FRAME_LEN] - x[o];
                    for (v, r) in w.iter_mut().zip(&rot) {
                        *v = (*v + d) * r;
                    }
                }
            }
        }
        (re, im)
    }

    fn spectral_from<T: Scalar>(&self, ctx: &[Vec<f64>]) -> SpectralMap<T> {
        let (w_re, w_im) = self.sliding_dft(ctx);
        let n_off = 2 * self.pad + 1;
        let (kb, nb, nm) = (self.n_bins, self.bands.n_bands, self.n_mics);
        let mut out = vec![0.0f64; self.grid.cell_count() * nb];
        out.par_chunks_mut(nb).enumerate().for_each_init(
            || (vec![0.0f32; kb], vec![0.0f32; kb]),
            |(yr, yi), (c, bands)| {
                yr.iter_mut().for_each(|v| *v = 0.0);
                yi.iter_mut().for_each(|v| *v = 0.0);
                for n in 0..nm {
                    let w0 = (n * n_off + self.steer_off[c * nm + n] as usize) * kb;
                    let p0 = self.steer_q[c * nm + n] as usize * kb;
                    let (wr, wi) = (&w_re[w0..w0 + kb], &w_im[w0..w0 + kb]);
                    let (pr, pi) = (&self.phase_re[p0..p0 + kb], &self.phase_im[p0..p0 + kb]);
                    for i in 0..kb {
                        yr[i] += wr[i] * pr[i] - wi[i] * pi[i];
                        yi[i] += wr[i] * pi[i] + wi[i] * pr[i];
                    }
                }
                let scale = 1.0 / (nm * nm) as f64;
                for i in 0..kb {
                    bands[self.bin_band[i]] += (yr[i] as f64).powi(2) + (yi[i] as f64).powi(2);
                }
                for (b, &cnt) in bands.iter_mut().zip(&self.band_counts) {
                    *b *= scale / cnt as f64;
                }
            },
        );
        let mut data: Vec<T> = out.into_iter().map(T::lit).collect();
        normalize_min_max(&mut data);
        SpectralMap { grid: self.grid, n_bands: nb, data }
    }

    /// Cross-correlations `C_nm(L) = sum_t x_n(s+t) x_m(s+t+L)`, `|L| <= pad`,
    /// stored as `[pair][L + pad]`.
    fn correlations(&self, ctx: &[Vec<f64>]) -> Vec<f32> {
        let m = self.fft_len;
        let n_lag = 2 * self.pad + 1;
        let zero = Complex::new(0.0f32, 0.0);
        let mut scratch = vec![zero; self.fft_fwd.get_inplace_scratch_len().max(self.fft_inv.get_inplace_scratch_len())];
        let spectra = |range: std::ops::Range<usize>, scratch: &mut Vec<Complex<f32>>| -> Vec<Vec<Complex<f32>>> {
            ctx.iter()
                .map(|x| {
                    let mut buf = vec![zero; m];
                    for (b, &v) in buf.iter_mut().zip(&x[range.clone()]) {
                        *b = Complex::new(v as f32, 0.0);
                    }
                    self.fft_fwd.process_with_scratch(&mut buf, scratch);
                    buf
                })
                .collect()
        };
        let a = spectra(self.pad..self.pad + FRAME_LEN, &mut scratch);
        let b = spectra(0..FRAME_LEN + 2 * self.pad, &mut scratch);
        let mut out = vec![0.0f32; self.pairs.len() * n_lag];
        let inv = 1.0 / m as f32;
        let mut buf = vec![zero; m];
        for (p0, chunk) in self.pairs.chunks(2).enumerate() {
            let (n1, m1) = chunk[0];
            let second = chunk.get(1).copied();
            for f in 0..m {
                let s1 = a[n1][f].conj() * b[m1][f];
                buf[f] = match second {
                    Some((n2, m2)) => {
                        let s2 = a[n2][f].conj() * b[m2][f];
                        // s1 + i * s2
                        Complex::new(s1.re - s2.im, s1.im + s2.re)
                    }
                    None => s1,
                };
            }
            self.fft_inv.process_with_scratch(&mut buf, &mut scratch);
            let p = 2 * p0;
            for l in 0..n_lag {
                out[p * n_lag + l] = buf[l].re * inv;
                if second.is_some() {
                    out[(p + 1) * n_lag + l] = buf[l].im * inv;
                }
            }
        }
        out
    }

    fn energy_from<T: Scalar>(&self, ctx: &[Vec<f64>]) -> EnergyMap<T> {
        let corr = self.correlations(ctx);
        let n_lag = 2 * self.pad + 1;
        let np = self.pairs.len();
        let data: Vec<T> = (0..self.grid.cell_count())
            .into_par_iter()
            .map(|c| {
                let mut e = 0.0f64;
                for p in 0..np {
                    let lag = self.pair_lag[c * np + p] as usize;
                    let r = &corr[p * n_lag + lag..p * n_lag + lag + PAIR_TAPS];
                    let f = &self.pair_filt[(c * np + p) * PAIR_TAPS..(c * np + p + 1) * PAIR_TAPS];
                    let mut acc = 0.0f32;
                    for i in 0..PAIR_TAPS {
                        acc += f[i] * r[i];
                    }
                    e += acc as f64;
                }
                T::lit((e.max(0.0) / FRAME_LEN as f64).sqrt())
            })
            .collect();
        EnergyMap { grid: self.grid, data }
    }
}

//! Synthetic multichannel scenes: a moving far-field point source with a
//! harmonic, drone-like signature, plus independent per-channel white noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fracdelay::accumulate_shifted;
use crate::geometry::{norm, MicArrayGeometry, Vec3};
use crate::scalar::Scalar;
use crate::{FRAME_LEN, SAMPLE_RATE_HZ};

/// Time-stamped source positions (meters, array frame), strictly increasing
/// in time. Positions are linearly interpolated between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrajectory<T> {
    samples: Vec<(T, Vec3<T>)>,
}

impl<T: Scalar> SourceTrajectory<T> {
    pub fn new(samples: Vec<(T, Vec3<T>)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter("empty trajectory".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::InvalidParameter(format!(
                    "trajectory times must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for (t, p) in &samples {
            if !t.is_finite() || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite trajectory sample".into()));
            }
            if norm(p) <= T::zero() {
                return Err(Error::InvalidParameter(format!("source at the array origin at t = {t}")));
            }
        }
        Ok(Self { samples })
    }

    /// A source parked at `pos` for `[0, duration_s]`.
    pub fn stationary(pos: Vec3<T>, duration_s: T) -> Result<Self> {
        Self::new(vec![(T::zero(), pos), (duration_s.max(T::epsilon()), pos)])
    }

    pub fn samples(&self) -> &[(T, Vec3<T>)] {
        &self.samples
    }

    pub fn start_s(&self) -> T {
        self.samples[0].0
    }

    pub fn end_s(&self) -> T {
        self.samples[self.samples.len() - 1].0
    }

    /// Position at time `t`, clamped to the trajectory's time span.
    pub fn position_at(&self, t: T) -> Vec3<T> {
        let s = &self.samples;
        if t <= s[0].0 {
            return s[0].1;
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1;
        }
        let i = s.partition_point(|(ts, _)| *ts <= t) - 1;
        let (t0, p0) = s[i];
        let (t1, p1) = s[i + 1];
        let w = (t - t0) / (t1 - t0);
        [0, 1, 2].map(|k| p0[k] + (p1[k] - p0[k]) * w)
    }

    pub fn covers(&self, start_s: T, end_s: T) -> bool {
        let tol = T::lit(1e-9);
        self.start_s() <= start_s + tol && self.end_s() >= end_s - tol
    }

    /// Parses CSV with header `time_s,x,y,z`.
    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Csv("empty trajectory file".into()))?;
        if header.trim() != "time_s,x,y,z" {
            return Err(Error::Csv(format!("unexpected trajectory header {header:?}")));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Csv(format!("trajectory row {}: {e}", i + 1)))?;
            if v.len() != 4 {
                return Err(Error::Csv(format!("trajectory row {} has {} fields", i + 1, v.len())));
            }
            samples.push((T::lit(v[0]), [T::lit(v[1]), T::lit(v[2]), T::lit(v[3])]));
        }
        Self::new(samples)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("time_s,x,y,z\n");
        for (t, p) in &self.samples {
            out.push_str(&format!("{},{},{},{}\n", t, p[0], p[1], p[2]));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Equal-length waveforms, one per microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelRecording<T> {
    sample_rate_hz: u32,
    channels: Vec<Vec<T>>,
}

impl<T: Scalar> MultichannelRecording<T> {
    pub fn new(sample_rate_hz: u32, channels: Vec<Vec<T>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidParameter("recording has no channels".into()));
        }
        let len = channels[0].len();
        if let Some(i) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::Shape(format!(
                "channel {i} has {} samples, channel 0 has {len}",
                channels[i].len()
            )));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidParameter("zero sample rate".into()));
        }
        Ok(Self { sample_rate_hz, channels })
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn channel(&self, n: usize) -> &[T] {
        &self.channels[n]
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Number of complete 100 ms frames.
    pub fn frame_count(&self) -> usize {
        self.len() / FRAME_LEN
    }

    pub fn peak(&self) -> T {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, k: T) {
        self.channels.iter_mut().flat_map(|c| c.iter_mut()).for_each(|v| *v *= k);
    }

    /// Scales the whole recording down so its peak is at most `limit`;
    /// returns the applied gain (1 when no scaling was needed).
    pub fn limit_peak(&mut self, limit: T) -> T {
        let peak = self.peak();
        if peak > limit {
            let g = limit / peak;
            self.scale(g);
            g
        } else {
            T::one()
        }
    }

    pub fn into_channels(self) -> Vec<Vec<T>> {
        self.channels
    }
}

/// Harmonic source signature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SourceSignature {
    pub fundamental_hz: f64,
    pub n_harmonics: usize,
    /// Amplitude ratio between consecutive harmonics.
    pub harmonic_decay: f64,
    /// White-noise RMS relative to the harmonic RMS.
    pub noise_floor: f64,
}

impl Default for SourceSignature {
    fn default() -> Self {
        Self { fundamental_hz: 190.0, n_harmonics: 10, harmonic_decay: 0.7, noise_floor: 0.05 }
    }
}

const PEAK_LEVEL: f64 = 0.9;

/// Deterministic harmonic waveform with random per-harmonic phases and a
/// white-noise floor, peak-normalized to 0.9.
pub fn synth_source_waveform<T: Scalar>(duration_s: f64, sig: &SourceSignature, seed: u64) -> Result<Vec<T>> {
    let nyquist = SAMPLE_RATE_HZ as f64 / 2.0;
    if !(sig.fundamental_hz >= 50.0) {
        return Err(Error::InvalidParameter(format!("fundamental {} Hz below 50 Hz", sig.fundamental_hz)));
    }
    if sig.n_harmonics == 0 {
        return Err(Error::InvalidParameter("at least one harmonic required".into()));
    }
    if sig.fundamental_hz * sig.n_harmonics as f64 >= nyquist {
        return Err(Error::InvalidParameter(format!(
            "highest harmonic {} Hz violates Nyquist ({nyquist} Hz)",
            sig.fundamental_hz * sig.n_harmonics as f64
        )));
    }
    if !(duration_s > 0.0) || !(sig.harmonic_decay > 0.0) || !(sig.noise_floor >= 0.0) {
        return Err(Error::InvalidParameter("duration, decay must be positive and noise floor non-negative".into()));
    }
    let len = (duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmonics: Vec<(f64, f64, f64)> = (1..=sig.n_harmonics)
        .map(|h| {
            let amp = sig.harmonic_decay.powi(h as i32 - 1);
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            (std::f64::consts::TAU * sig.fundamental_hz * h as f64 / SAMPLE_RATE_HZ as f64, amp, phase)
        })
        .collect();
    let harmonic_rms = (harmonics.iter().map(|h| h.1 * h.1).sum::<f64>() / 2.0).sqrt();
    let noise_sd = sig.noise_floor * harmonic_rms;
    let mut x: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64;
            let tonal: f64 = harmonics.iter().map(|&(w, a, p)| a * (w * t + p).sin()).sum();
            let noise = if noise_sd > 0.0 { noise_sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            tonal + noise
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK_LEVEL / peak);
    }
    Ok(x.into_iter().map(T::lit).collect())
}

/// Scene rendering options.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct RenderOptions {
    /// Broadband per-channel SNR (dB) relative to the source RMS at unit gain;
    /// `None` disables noise.
    pub snr_db: Option<f64>,
    /// Reference range (m) for optional `r_ref / r` amplitude spreading; the
    /// SNR then holds at the reference range.
    pub spreading_ref_m: Option<f64>,
    pub seed: u64,
}


pub fn rms<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    let s: f64 = x.iter().map(|v| v.to_f64_lossy().powi(2)).sum();
    T::lit((s / x.len() as f64).sqrt())
}

fn mix_seed(seed: u64, channel: u64, block: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ channel.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ block.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adds white Gaussian noise of standard deviation `sd` to one block of one
/// channel. The stream depends only on `(seed, channel, block)`, so blocks
/// and channels can be generated in any order.
fn add_block_noise<T: Scalar>(out: &mut [T], sd: f64, seed: u64, channel: usize, block: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, channel as u64, block as u64));
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += T::lit(sd * z);
    }
}

/// Renders `src` as a far-field plane wave arriving from the trajectory's
/// direction. Channel `n` is `g * src(t + tau_n)`, with the direction (and
/// optional spreading gain) held constant over each 100 ms block and taken
/// at the block center.
pub fn render_scene<T: Scalar>(
    geom: &MicArrayGeometry<T>,
    traj: &SourceTrajectory<T>,
    src: &[T],
    opts: &RenderOptions,
) -> Result<MultichannelRecording<T>> {
    let fs = SAMPLE_RATE_HZ as f64;
    let len = src.len();
    let duration = len as f64 / fs;
    if !traj.covers(T::zero(), T::lit(duration)) {
        return Err(Error::TrajectoryCoverage {
            start: traj.start_s().to_f64_lossy(),
            end: traj.end_s().to_f64_lossy(),
            needed: duration,
        });
    }
    if let Some(r) = opts.spreading_ref_m {
        if !(r > 0.0) {
            return Err(Error::InvalidParameter("spreading reference range must be positive".into()));
        }
    }
    let n_blocks = len.div_ceil(FRAME_LEN);
    // per-block (delays in samples, amplitude gain)
    let blocks: Vec<(Vec<f64>, f64)> = (0..n_blocks)
        .map(|b| {
            let start = b * FRAME_LEN;
            let end = (start + FRAME_LEN).min(len);
            let t_mid = T::lit((start + end) as f64 / 2.0 / fs);
            let pos = traj.position_at(t_mid).map(|v| v.to_f64_lossy());
            let range = (pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2]).sqrt();
            let u = pos.map(|v| v / range);
            let c = geom.speed_of_sound().to_f64_lossy();
            let delays = geom
                .mics()
                .iter()
                .map(|p| (p[0].to_f64_lossy() * u[0] + p[1].to_f64_lossy() * u[1] + p[2].to_f64_lossy() * u[2]) / c * fs)
                .collect();
            let gain = opts.spreading_ref_m.map_or(1.0, |r_ref| r_ref / range);
            (delays, gain)
        })
        .collect();
    let noise_sd = opts.snr_db.map(|snr| rms(src).to_f64_lossy() / 10f64.powf(snr / 20.0));
    let channels: Vec<Vec<T>> = (0..geom.mic_count())
        .into_par_iter()
        .map(|n| {
            let mut out = vec![T::zero(); len];
            for (b, (delays, gain)) in blocks.iter().enumerate() {
                let start = b * FRAME_LEN;
                let end = (start + FRAME_LEN).min(len);
                accumulate_shifted(src, start as isize, delays[n], T::lit(*gain), &mut out[start..end]);
                if let Some(sd) = noise_sd {
                    add_block_noise(&mut out[start..end], sd, opts.seed, n, b);
                }
            }
            out
        })
        .collect();
    MultichannelRecording::new(SAMPLE_RATE_HZ, channels)
}

/// Independent white noise on every channel, no source.
pub fn render_noise_only<T: Scalar>(
    geom: &MicArrayGeometry<T>,
    duration_s: f64,
    noise_rms: f64,
    seed: u64,
) -> Result<MultichannelRecording<T>> {
    if !(duration_s > 0.0) || !(noise_rms >= 0.0) {
        return Err(Error::InvalidParameter("duration must be positive and noise level non-negative".into()));
    }
    let len = (duration_s * SAMPLE_RATE_HZ as f64).round() as usize;
    let channels = (0..geom.mic_count())
        .into_par_iter()
        .map(|n| {
            let mut out = vec![T::zero(); len];
            for (b, chunk) in out.chunks_mut(FRAME_LEN).enumerate() {
                add_block_noise(chunk, noise_rms, seed, n, b);
            }
            out
        })
        .collect();
    MultichannelRecording::new(SAMPLE_RATE_HZ, channels)
}

/// Noise standard deviation that `render_scene` uses for a given source and
/// SNR, for generating matching noise-only recordings.
pub fn noise_rms_for_snr<T: Scalar>(src: &[T], snr_db: f64) -> f64 {
    rms(src).to_f64_lossy() / 10f64.powf(snr_db / 20.0)
}

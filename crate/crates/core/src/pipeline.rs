//! End-to-end orchestration: synthetic scenes, per-frame features, the
//! training set, and the benchmark that scores the network against the
//! beamforming-argmax baseline.
//!
//! Flights and noise are generated in independent segments. Frame numbers
//! run across segments with a one-frame gap between consecutive segments, so
//! evaluation splits tracks at the gaps and the stability window never spans
//! two recordings.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::FrameAnalyzer;
use crate::beamformer::{bf_argmax, EnergyMap};
use crate::config::{PipelineConfig, SceneConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, TrackRecord};
use crate::features::{PolarImage, PolarLayout, PolarProjector};
use crate::geometry::{default_array, unit_vector, MicArrayGeometry, SteeringDirection, Vec3};
use crate::labeling::{ground_truth_frames, make_mask, BinaryMask, GroundTruthFrame};
use crate::postprocess::{segment_to_doa, DoAEstimate, FrameEstimate};
use crate::simulator::{
    noise_rms_for_snr, render_noise_only, render_scene, synth_source_waveform, MultichannelRecording, RenderOptions,
    SourceTrajectory,
};
use crate::unet::{train, EpochLoss, UNet, UNetParams};
use crate::{Real, FRAME_LEN, SAMPLE_RATE_HZ};

const FRAME_S: f64 = FRAME_LEN as f64 / SAMPLE_RATE_HZ as f64;

/// Independent seed for `(seed, stream, index)`.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// seed streams
const S_TRAJ: u64 = 1;
const S_SOURCE: u64 = 2;
const S_NOISE: u64 = 3;
const S_NOISE_ONLY: u64 = 4;
const S_SPLIT: u64 = 5;
const S_REF: u64 = 6;
/// Split tags keep training and test scenes disjoint.
const TAG_TRAIN: u64 = 0x7472_6169;
const TAG_TEST: u64 = 0x7465_7374;

pub fn load_geometry(cfg: &PipelineConfig) -> Result<MicArrayGeometry<Real>> {
    match &cfg.geometry {
        Some(p) => Ok(MicArrayGeometry::<f64>::load(p)?.cast()),
        None => Ok(default_array()),
    }
}

/// A piecewise-straight flight between random waypoints at constant speed.
/// Waypoint ranges and elevations are uniform in the configured intervals,
/// so no point of the flight sits below the minimum elevation. Legs passing
/// closer than half the minimum range to the array are redrawn.
pub fn flight_trajectory(scene: &SceneConfig, duration_s: f64, seed: u64) -> Result<SourceTrajectory<Real>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waypoint = |rng: &mut ChaCha8Rng| -> Vec3<f64> {
        let r = rng.gen_range(scene.range_m[0]..=scene.range_m[1]);
        let el = rng.gen_range(scene.elevation_deg[0]..=scene.elevation_deg[1]);
        let az = rng.gen_range(-180.0..180.0);
        unit_vector(&SteeringDirection::new(az, el).expect("valid waypoint")).map(|u| r * u)
    };
    let min_pass = scene.range_m[0] / 2.0;
    let mut t = 0.0;
    let mut p = waypoint(&mut rng);
    let mut samples = vec![(0.0, p)];
    while t <= duration_s + FRAME_S {
        let mut q = waypoint(&mut rng);
        for _ in 0..1000 {
            if closest_approach(&p, &q) >= min_pass {
                break;
            }
            q = waypoint(&mut rng);
        }
        let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt();
        if d < 1e-9 {
            continue;
        }
        t += d / scene.speed_mps;
        samples.push((t, q));
        p = q;
    }
    SourceTrajectory::new(samples.into_iter().map(|(t, p)| (t as Real, p.map(|v| v as Real))).collect())
}

fn closest_approach(p: &Vec3<f64>, q: &Vec3<f64>) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let s = if dd > 0.0 { (-(p[0] * d[0] + p[1] * d[1] + p[2] * d[2]) / dd).clamp(0.0, 1.0) } else { 0.0 };
    let c = [p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Noise standard deviation matching the scene SNR for the configured source
/// signature; zero when noise is disabled.
pub fn scene_noise_rms(cfg: &PipelineConfig) -> Result<f64> {
    match cfg.scene.snr_db {
        None => Ok(0.0),
        Some(snr) => {
            let reference: Vec<Real> = synth_source_waveform(10.0, &cfg.scene.signature, sub_seed(cfg.seed, S_REF, 0))?;
            Ok(noise_rms_for_snr(&reference, snr))
        }
    }
}

/// One rendered recording with its per-frame truth (frame numbers local to
/// the recording).
pub struct Scene {
    pub recording: MultichannelRecording<Real>,
    pub trajectory: Option<SourceTrajectory<Real>>,
    pub truth: Vec<GroundTruthFrame<Real>>,
}

pub fn simulate_flight(geom: &MicArrayGeometry<Real>, scene: &SceneConfig, duration_s: f64, seed: u64) -> Result<Scene> {
    let traj = flight_trajectory(scene, duration_s, sub_seed(seed, S_TRAJ, 0))?;
    let src: Vec<Real> = synth_source_waveform(duration_s, &scene.signature, sub_seed(seed, S_SOURCE, 0))?;
    let opts = RenderOptions { snr_db: scene.snr_db, spreading_ref_m: scene.spreading_ref_m, seed: sub_seed(seed, S_NOISE, 0) };
    let recording = render_scene(geom, &traj, &src, &opts)?;
    let truth = ground_truth_frames(&traj, recording.frame_count(), 0)?;
    Ok(Scene { recording, trajectory: Some(traj), truth })
}

pub fn simulate_noise(geom: &MicArrayGeometry<Real>, duration_s: f64, noise_rms: f64, seed: u64) -> Result<Scene> {
    let recording = render_noise_only(geom, duration_s, noise_rms, sub_seed(seed, S_NOISE_ONLY, 0))?;
    let truth = (0..recording.frame_count()).map(GroundTruthFrame::absent).collect();
    Ok(Scene { recording, trajectory: None, truth })
}

/// Per-frame feature extraction shared by training, inference and the
/// baseline.
pub struct FramePipeline {
    analyzer: FrameAnalyzer,
    projector: PolarProjector,
}

impl FramePipeline {
    pub fn new(geom: &MicArrayGeometry<Real>, cfg: &PipelineConfig) -> Result<Self> {
        let analyzer = FrameAnalyzer::new(geom, cfg.grid, cfg.bands)?;
        let projector = PolarProjector::new(cfg.grid, PolarLayout::for_grid(&cfg.grid));
        Ok(Self { analyzer, projector })
    }

    pub fn layout(&self) -> PolarLayout {
        self.projector.layout()
    }

    /// Network input and energy map of one frame.
    pub fn frame(&self, rec: &MultichannelRecording<Real>, frame: usize) -> Result<(PolarImage<Real>, EnergyMap<Real>)> {
        let a = self.analyzer.analyze(rec, frame)?;
        Ok((self.projector.project(&a.spectral)?, a.energy))
    }

    pub fn image(&self, rec: &MultichannelRecording<Real>, frame: usize) -> Result<PolarImage<Real>> {
        self.projector.project(&self.analyzer.spectral(rec, frame)?)
    }

    pub fn energy(&self, rec: &MultichannelRecording<Real>, frame: usize) -> Result<EnergyMap<Real>> {
        self.analyzer.energy(rec, frame)
    }
}

/// Segment plan of a split: `(is_flight, duration_s, seed)` per segment.
fn segments(cfg: &PipelineConfig, split: &SplitConfig, tag: u64) -> Vec<(bool, f64, u64)> {
    let mut out = Vec::new();
    let mut plan = |total: f64, flight: bool| {
        let mut left = total;
        let mut k = 0u64;
        while left > 1e-9 {
            let d = left.min(cfg.scene.segment_s);
            let stream = if flight { 0 } else { 1 };
            out.push((flight, d, sub_seed(cfg.seed ^ tag, stream, k)));
            left -= d;
            k += 1;
        }
    };
    plan(split.flight_s, true);
    plan(split.noise_s, false);
    out
}

/// Renders one planned segment.
fn render_segment(geom: &MicArrayGeometry<Real>, cfg: &PipelineConfig, noise_rms: f64, seg: (bool, f64, u64)) -> Result<Scene> {
    let (flight, d, seed) = seg;
    if flight {
        simulate_flight(geom, &cfg.scene, d, seed)
    } else {
        simulate_noise(geom, d, noise_rms, seed)
    }
}

pub type Sample = (PolarImage<Real>, BinaryMask);

/// Training and validation samples from the training split. Flight frames
/// are labeled with caps of `delta_deg`; noise frames get empty masks.
pub fn training_set(
    geom: &MicArrayGeometry<Real>,
    fp: &FramePipeline,
    cfg: &PipelineConfig,
    mut progress: impl FnMut(&str),
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let noise_rms = scene_noise_rms(cfg)?;
    let layout = fp.layout();
    let mut all = Vec::new();
    for (i, seg) in segments(cfg, &cfg.train, TAG_TRAIN).into_iter().enumerate() {
        let scene = render_segment(geom, cfg, noise_rms, seg)?;
        for f in (0..scene.recording.frame_count()).step_by(cfg.train.frame_stride) {
            let img = fp.image(&scene.recording, f)?;
            all.push((img, make_mask(&scene.truth[f], &layout, cfg.delta_deg as Real)));
        }
        progress(&format!("training segment {i}: {} samples so far", all.len()));
    }
    Ok(split_validation(all, cfg.training.validation_fraction, cfg.seed))
}

/// Seeded split into `(train, validation)`; the validation share is rounded
/// to whole samples.
pub fn split_validation<S>(all: Vec<S>, fraction: f64, seed: u64) -> (Vec<S>, Vec<S>) {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, S_SPLIT, 0)));
    let n_val = (all.len() as f64 * fraction).round() as usize;
    let mut slots: Vec<Option<S>> = all.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("unique index")).collect::<Vec<S>>();
    let val = take(&order[..n_val]);
    let tr = take(&order[n_val..]);
    (tr, val)
}

/// Per-frame outputs of both methods on the test split.
#[derive(Debug, Clone, Default)]
pub struct TestRun {
    pub truth: Vec<GroundTruthFrame<Real>>,
    pub unet: Vec<FrameEstimate<Real>>,
    pub baseline: Vec<FrameEstimate<Real>>,
}

/// Baseline estimate: the energy-map argmax, reported with confidence 1 and
/// an area of one cell.
pub fn baseline_estimate(map: &EnergyMap<Real>, layout: &PolarLayout) -> Option<DoAEstimate<Real>> {
    bf_argmax(map).map(|direction| DoAEstimate { direction, confidence: 1.0, area_px: 1, centroid_px: layout.direction_to_polar(&direction) })
}

pub fn run_test_split(
    geom: &MicArrayGeometry<Real>,
    fp: &FramePipeline,
    cfg: &PipelineConfig,
    net: &UNet,
    params: &UNetParams<Real>,
    mut progress: impl FnMut(&str),
) -> Result<TestRun> {
    let noise_rms = scene_noise_rms(cfg)?;
    let layout = fp.layout();
    let mut run = TestRun::default();
    let mut next = 0usize;
    for (i, seg) in segments(cfg, &cfg.test, TAG_TEST).into_iter().enumerate() {
        let scene = render_segment(geom, cfg, noise_rms, seg)?;
        for f in (0..scene.recording.frame_count()).step_by(cfg.test.frame_stride) {
            let (img, energy) = fp.frame(&scene.recording, f)?;
            let prob = net.forward(params, &img)?;
            let frame = next;
            next += 1;
            run.unet.push(FrameEstimate { frame, estimate: segment_to_doa(&prob, cfg.threshold, &layout)? });
            run.baseline.push(FrameEstimate { frame, estimate: baseline_estimate(&energy, &layout) });
            run.truth.push(GroundTruthFrame { frame_index: frame, ..scene.truth[f] });
        }
        next += 1;
        progress(&format!("test segment {i}: {} frames so far", run.truth.len()));
    }
    Ok(run)
}

/// Splits paired estimates and truth into contiguous tracks.
pub fn tracks(estimates: &[FrameEstimate<Real>], truth: &[GroundTruthFrame<Real>]) -> Result<Vec<TrackRecord<Real>>> {
    let rows: Vec<(usize, Option<SteeringDirection<Real>>)> = estimates.iter().map(|e| (e.frame, e.estimate.map(|d| d.direction))).collect();
    let mut sorted = truth.to_vec();
    sorted.sort_by_key(|g| g.frame_index);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=sorted.len() {
        if i == sorted.len() || sorted[i].frame_index != sorted[i - 1].frame_index + 1 {
            if sorted.get(i).is_some_and(|g| g.frame_index == sorted[i - 1].frame_index) {
                return Err(Error::InvalidParameter(format!("duplicate truth frame {}", sorted[i].frame_index)));
            }
            out.push(TrackRecord::join(&rows, &sorted[start..i])?);
            start = i;
        }
    }
    Ok(out)
}

/// Both methods' scores on identical frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub unet: EvalReport,
    pub baseline: EvalReport,
}

impl Comparison {
    /// Network mean error at most the baseline's in every bin where both are
    /// defined (and at least one bin defined).
    pub fn error_claim_holds(&self) -> bool {
        let mut any = false;
        for (u, b) in self.unet.bins.iter().zip(&self.baseline.bins) {
            match (u.mean_error_deg, b.mean_error_deg) {
                (Some(u), Some(b)) => {
                    any = true;
                    if u > b {
                        return false;
                    }
                }
                (None, Some(_)) => return false,
                _ => {}
            }
        }
        any
    }

    pub fn fpr_claim_holds(&self) -> bool {
        matches!((self.unet.fpr, self.baseline.fpr), (Some(u), Some(b)) if u < b)
    }
}

pub fn compare(run: &TestRun) -> Result<Comparison> {
    Ok(Comparison { unet: evaluate(&tracks(&run.unet, &run.truth)?), baseline: evaluate(&tracks(&run.baseline, &run.truth)?) })
}

/// Everything the benchmark produces.
pub struct BenchmarkOutput {
    pub net: UNet,
    pub params: UNetParams<Real>,
    pub best_epoch: usize,
    pub history: Vec<EpochLoss>,
    pub run: TestRun,
    pub comparison: Comparison,
    /// Wall-clock seconds per stage: training data, training, test split.
    pub timings_s: [f64; 3],
}

/// Builds the training set, trains, runs both methods on the test split and
/// scores them.
pub fn run_benchmark(cfg: &PipelineConfig, mut progress: impl FnMut(&str)) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    let geom = load_geometry(cfg)?;
    let fp = FramePipeline::new(&geom, cfg)?;
    let t0 = Instant::now();
    let (tr, val) = training_set(&geom, &fp, cfg, &mut progress)?;
    let t1 = Instant::now();
    let net = UNet::new(cfg.unet_config())?;
    let out = train(&net, net.init::<Real>(), &tr, &val, &cfg.train_config(), |e| {
        progress(&format!("epoch {}: train {:.4} val {}", e.epoch, e.train, e.validation.map_or("-".into(), |v| format!("{v:.4}"))))
    })?;
    drop((tr, val));
    let t2 = Instant::now();
    let run = run_test_split(&geom, &fp, cfg, &net, &out.best, &mut progress)?;
    let comparison = compare(&run)?;
    let t3 = Instant::now();
    Ok(BenchmarkOutput {
        net,
        params: out.best,
        best_epoch: out.best_epoch,
        history: out.history,
        run,
        comparison,
        timings_s: [(t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64(), (t3 - t2).as_secs_f64()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::cartesian_to_spherical;

    #[test]
    fn flights_stay_in_bounds() {
        let sc = SceneConfig::default();
        let traj = flight_trajectory(&sc, 60.0, 3).unwrap();
        assert!(traj.covers(0.0, 60.0));
        for k in 0..600 {
            let p = traj.position_at(k as Real * 0.1).map(f64::from);
            let (_, el, r) = cartesian_to_spherical(&p).unwrap();
            assert!(r >= sc.range_m[0] / 2.0 - 1e-3 && r <= sc.range_m[1] + 1e-3, "{r}");
            // straight legs can rise above the top waypoint elevation but never
            // dip below the lowest
            assert!(el >= sc.elevation_deg[0] - 1e-3, "{el}");
        }
        assert_eq!(flight_trajectory(&sc, 60.0, 3).unwrap(), traj);
        assert_ne!(flight_trajectory(&sc, 60.0, 4).unwrap(), traj);
    }

    #[test]
    fn segment_plan_covers_durations() {
        let cfg = PipelineConfig::default();
        let s = segments(&cfg, &SplitConfig { flight_s: 150.0, noise_s: 30.0, frame_stride: 1 }, TAG_TEST);
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![true, true, true, false]);
        assert!((s.iter().map(|x| x.1).sum::<f64>() - 180.0).abs() < 1e-9);
        let train = segments(&cfg, &SplitConfig { flight_s: 150.0, noise_s: 30.0, frame_stride: 1 }, TAG_TRAIN);
        assert!(s.iter().zip(&train).all(|(a, b)| a.2 != b.2));
    }

    #[test]
    fn tracks_split_at_gaps() {
        let truth: Vec<GroundTruthFrame<Real>> = [0, 1, 2, 4, 5].into_iter().map(GroundTruthFrame::absent).collect();
        let est: Vec<FrameEstimate<Real>> = truth.iter().map(|g| FrameEstimate { frame: g.frame_index, estimate: None }).collect();
        let t = tracks(&est, &truth).unwrap();
        assert_eq!(t.iter().map(|t| t.len()).collect::<Vec<_>>(), vec![3, 2]);
    }

    #[test]
    fn comparison_claims() {
        use crate::eval::BinStats;
        let rep = |errs: [Option<f64>; 3], fpr: Option<f64>| EvalReport {
            bins: errs.iter().map(|&e| BinStats { mean_error_deg: e, ..Default::default() }).collect(),
            no_source_frames: 1,
            false_positives: 0,
            fpr,
        };
        let c = Comparison { unet: rep([Some(1.0), Some(2.0), None], Some(0.1)), baseline: rep([Some(1.5), Some(2.0), None], Some(0.5)) };
        assert!(c.error_claim_holds() && c.fpr_claim_holds());
        let c = Comparison { unet: rep([Some(1.6), Some(2.0), None], Some(0.5)), baseline: rep([Some(1.5), Some(2.0), None], Some(0.5)) };
        assert!(!c.error_claim_holds() && !c.fpr_claim_holds());
    }
}

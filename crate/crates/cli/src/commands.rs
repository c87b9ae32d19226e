//! Subcommand implementations. Every stage resolves the shared config,
//! validates its inputs, writes its outputs into `--out-dir` and finishes
//! with `<command>.manifest.json`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use sphseg::beamformer::{BeamGrid, EnergyMap};
use sphseg::config::{resolve, Manifest, PipelineConfig};
use sphseg::eval::TrackRecord;
use sphseg::features::{PolarImage, PolarLayout};
use sphseg::geometry::MicArrayGeometry;
use sphseg::labeling::{ground_truth_frames, load_truth, make_mask, truth_to_csv, BinaryMask, GroundTruthFrame};
use sphseg::pipeline::{
    baseline_estimate, compare, load_geometry, run_benchmark, scene_noise_rms, simulate_flight, simulate_noise,
    split_validation, tracks, FramePipeline,
};
use sphseg::postprocess::{estimates_to_csv, load_estimates, segment_to_doa, FrameEstimate};
use sphseg::simulator::SourceTrajectory;
use sphseg::storage::{read_wav, write_wav, Tensor, WavEncoding};
use sphseg::unet::{load_checkpoint, save_checkpoint, train as train_net, train::loss_history_csv, UNet};
use sphseg::{Error, Real, Result};

use crate::plot;
use crate::Common;

struct Stage {
    cfg: PipelineConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Stage {
    fn new(command: &str, common: &Common, geometry: Option<&PathBuf>) -> Result<Self> {
        let mut cfg = resolve(common.config.as_deref(), &common.overrides())?;
        if let Some(g) = geometry {
            cfg.geometry = Some(g.clone());
        }
        std::fs::create_dir_all(&common.out_dir)?;
        let mut manifest = Manifest::new(command, &cfg);
        if let Some(c) = &common.config {
            manifest.input(c)?;
        }
        Ok(Self { cfg, out: common.out_dir.clone(), manifest })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents)?;
        self.manifest.output(&p)?;
        Ok(p)
    }

    fn save_tensor(&mut self, name: &str, t: &Tensor) -> Result<PathBuf> {
        let p = self.path(name);
        t.save(&p)?;
        self.manifest.output(&p)?;
        Ok(p)
    }

    fn finish(self) -> Result<()> {
        let command = self.manifest.command.clone();
        self.manifest.save(self.out.join(format!("{command}.manifest.json")))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Encoding {
    F32,
    I16,
    I24,
}

impl From<Encoding> for WavEncoding {
    fn from(e: Encoding) -> Self {
        match e {
            Encoding::F32 => WavEncoding::Float32,
            Encoding::I16 => WavEncoding::Int16,
            Encoding::I24 => WavEncoding::Int24,
        }
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Recording length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Render sensor noise only (no source).
    #[arg(long)]
    pub noise_only: bool,
    /// Microphone geometry JSON (default: built-in 24-microphone array).
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    pub encoding: Encoding,
}

/// Writes `recording.wav`, `geometry.json` and, for flights,
/// `trajectory.csv`. Recordings louder than full scale are scaled down and
/// the gain is noted in the manifest.
pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut st = Stage::new("simulate", &a.common, a.geometry.as_ref())?;
    let geom = load_geometry(&st.cfg)?;
    if let Some(g) = &st.cfg.geometry {
        st.manifest.input(g)?;
    }
    let mut scene = if a.noise_only {
        simulate_noise(&geom, a.duration, scene_noise_rms(&st.cfg)?, st.cfg.seed)?
    } else {
        simulate_flight(&geom, &st.cfg.scene, a.duration, st.cfg.seed)?
    };
    let gain = scene.recording.limit_peak(1.0);
    if gain != 1.0 {
        st.manifest.notes.push(format!("peak limited by gain {gain}"));
    }
    let wav = st.path("recording.wav");
    write_wav(&wav, &scene.recording, a.encoding.into())?;
    st.manifest.output(&wav)?;
    st.write("geometry.json", geom.cast::<f64>().to_json_string())?;
    if let Some(t) = &scene.trajectory {
        st.write("trajectory.csv", t.to_csv_string())?;
    }
    st.finish()
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    #[command(flatten)]
    pub common: Common,
    /// Flight trajectory CSV; omit with `--absent`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Label every frame as source-free.
    #[arg(long)]
    pub absent: bool,
    /// Take the frame count from this recording.
    #[arg(long)]
    pub recording: Option<PathBuf>,
    /// Frame count (when no recording is given).
    #[arg(long)]
    pub frames: Option<usize>,
}

/// Writes `truth.csv` and `masks.spht` (u8, `[frames, 2E, 2E]`).
pub fn label(a: LabelArgs) -> Result<()> {
    let mut st = Stage::new("label", &a.common, None)?;
    let n = match (&a.recording, a.frames) {
        (Some(r), _) => {
            st.manifest.input(r)?;
            read_wav::<Real>(r)?.frame_count()
        }
        (None, Some(n)) => n,
        (None, None) => return Err(Error::InvalidParameter("give --recording or --frames".into())),
    };
    let truth: Vec<GroundTruthFrame<Real>> = match (&a.trajectory, a.absent) {
        (Some(t), false) => {
            st.manifest.input(t)?;
            ground_truth_frames(&SourceTrajectory::load(t)?, n, 0)?
        }
        (None, true) => (0..n).map(GroundTruthFrame::absent).collect(),
        _ => return Err(Error::InvalidParameter("give exactly one of --trajectory or --absent".into())),
    };
    let layout = PolarLayout::for_grid(&st.cfg.grid);
    let side = layout.side();
    let masks: Vec<u8> = truth.iter().flat_map(|g| make_mask(g, &layout, st.cfg.delta_deg as Real).data().to_vec()).collect();
    st.write("truth.csv", truth_to_csv(&truth))?;
    st.save_tensor("masks.spht", &Tensor::from_u8(vec![n, side, side], masks)?)?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct BeamformArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub recording: PathBuf,
    #[arg(long)]
    pub geometry: Option<PathBuf>,
}

fn open_recording(st: &mut Stage, path: &Path) -> Result<(MicArrayGeometry<Real>, sphseg::Recording)> {
    let geom = load_geometry(&st.cfg)?;
    if let Some(g) = &st.cfg.geometry {
        st.manifest.input(g)?;
    }
    st.manifest.input(path)?;
    let rec = read_wav::<Real>(path)?;
    if rec.channel_count() != geom.mic_count() {
        return Err(Error::ChannelMismatch { recording: rec.channel_count(), geometry: geom.mic_count() });
    }
    Ok((geom, rec))
}

/// Writes `energy.spht` (f32, `[frames, n_az, n_el]`) and `baseline.csv`.
pub fn beamform(a: BeamformArgs) -> Result<()> {
    let mut st = Stage::new("beamform", &a.common, a.geometry.as_ref())?;
    let (geom, rec) = open_recording(&mut st, &a.recording)?;
    let fp = FramePipeline::new(&geom, &st.cfg)?;
    let maps: Vec<EnergyMap<Real>> = (0..rec.frame_count()).into_par_iter().map(|f| fp.energy(&rec, f)).collect::<Result<_>>()?;
    let layout = fp.layout();
    let est: Vec<FrameEstimate<Real>> =
        maps.iter().enumerate().map(|(frame, m)| FrameEstimate { frame, estimate: baseline_estimate(m, &layout) }).collect();
    let g = st.cfg.grid;
    let data: Vec<Real> = maps.iter().flat_map(|m| m.data.iter().copied()).collect();
    st.save_tensor("energy.spht", &Tensor::from_f32(vec![maps.len(), g.n_az, g.n_el], data)?)?;
    st.write("baseline.csv", estimates_to_csv(&est))?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub recording: PathBuf,
    #[arg(long)]
    pub geometry: Option<PathBuf>,
}

/// Writes `features.spht` (f32, `[frames, bands, 2E, 2E]`).
pub fn featurize(a: FeaturizeArgs) -> Result<()> {
    let mut st = Stage::new("featurize", &a.common, a.geometry.as_ref())?;
    let (geom, rec) = open_recording(&mut st, &a.recording)?;
    let fp = FramePipeline::new(&geom, &st.cfg)?;
    let imgs: Vec<PolarImage<Real>> = (0..rec.frame_count()).into_par_iter().map(|f| fp.image(&rec, f)).collect::<Result<_>>()?;
    let side = fp.layout().side();
    let data: Vec<Real> = imgs.iter().flat_map(|i| i.data.iter().copied()).collect();
    st.save_tensor("features.spht", &Tensor::from_f32(vec![imgs.len(), st.cfg.bands.n_bands, side, side], data)?)?;
    st.finish()
}

/// Splits a `[frames, bands, side, side]` tensor into images.
fn load_features(path: &Path, layout: &PolarLayout) -> Result<Vec<PolarImage<Real>>> {
    let t = Tensor::load(path)?;
    let d = t.dims().to_vec();
    if d.len() != 4 || d[2] != layout.side() || d[3] != layout.side() {
        return Err(Error::Shape(format!("{}: expected [frames, bands, {s}, {s}], found {d:?}", path.display(), s = layout.side())));
    }
    let per = d[1] * d[2] * d[3];
    Ok(t.as_f32()?.chunks(per).map(|c| PolarImage { layout: *layout, n_bands: d[1], data: c.to_vec() }).collect())
}

fn load_masks(path: &Path, layout: &PolarLayout) -> Result<Vec<BinaryMask>> {
    let t = Tensor::load(path)?;
    let d = t.dims().to_vec();
    if d.len() != 3 || d[1] != layout.side() || d[2] != layout.side() {
        return Err(Error::Shape(format!("{}: expected [frames, {s}, {s}], found {d:?}", path.display(), s = layout.side())));
    }
    t.as_u8()?.chunks(d[1] * d[2]).map(|c| BinaryMask::from_data(layout, c.to_vec())).collect()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Feature tensors; pair each with a `--masks` file in the same order.
    #[arg(long, required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub masks: Vec<PathBuf>,
}

/// Writes `model.spht` + `model.json` (best validation epoch) and `loss.csv`.
pub fn train(a: TrainArgs) -> Result<()> {
    let mut st = Stage::new("train", &a.common, None)?;
    if a.features.len() != a.masks.len() {
        return Err(Error::InvalidParameter(format!("{} feature files but {} mask files", a.features.len(), a.masks.len())));
    }
    let layout = PolarLayout::for_grid(&st.cfg.grid);
    let mut samples = Vec::new();
    for (f, m) in a.features.iter().zip(&a.masks) {
        let x = load_features(f, &layout)?;
        let y = load_masks(m, &layout)?;
        if x.len() != y.len() {
            return Err(Error::Shape(format!("{} holds {} frames, {} holds {}", f.display(), x.len(), m.display(), y.len())));
        }
        if let Some(img) = x.first() {
            if img.n_bands != st.cfg.bands.n_bands {
                return Err(Error::Shape(format!("{} has {} bands, config expects {}", f.display(), img.n_bands, st.cfg.bands.n_bands)));
            }
        }
        st.manifest.input(f)?;
        st.manifest.input(m)?;
        samples.extend(x.into_iter().zip(y));
    }
    let (tr, val) = split_validation(samples, st.cfg.training.validation_fraction, st.cfg.seed);
    let net = UNet::new(st.cfg.unet_config())?;
    let out = train_net(&net, net.init::<Real>(), &tr, &val, &st.cfg.train_config(), |e| {
        eprintln!("epoch {} train {:.5} val {}", e.epoch, e.train, e.validation.map_or("-".into(), |v| format!("{v:.5}")))
    })?;
    let model = st.path("model.spht");
    save_checkpoint(&model, &net, &out.best, Some(out.best_epoch))?;
    st.manifest.output(&model)?;
    st.manifest.output(st.path("model.json"))?;
    st.write("loss.csv", loss_history_csv(&out.history))?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint tensor (its `.json` sidecar must sit beside it).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
}

/// Writes `estimates.csv` and `probabilities.spht` (f32, `[frames, 2E, 2E]`).
pub fn infer(a: InferArgs) -> Result<()> {
    let mut st = Stage::new("infer", &a.common, None)?;
    let (net, params, _) = load_checkpoint::<Real>(&a.model)?;
    st.manifest.input(&a.model)?;
    st.manifest.input(&a.features)?;
    let layout = net.config().layout();
    let imgs = load_features(&a.features, &layout)?;
    let threshold = st.cfg.threshold;
    let results: Vec<(Vec<Real>, FrameEstimate<Real>)> = imgs
        .par_iter()
        .enumerate()
        .map(|(frame, img)| {
            let p = net.forward(&params, img)?;
            let estimate = segment_to_doa(&p, threshold, &layout)?;
            Ok((p.data, FrameEstimate { frame, estimate }))
        })
        .collect::<Result<_>>()?;
    let side = layout.side();
    let probs: Vec<Real> = results.iter().flat_map(|r| r.0.iter().copied()).collect();
    let est: Vec<FrameEstimate<Real>> = results.into_iter().map(|r| r.1).collect();
    st.write("estimates.csv", estimates_to_csv(&est))?;
    st.save_tensor("probabilities.spht", &Tensor::from_f32(vec![est.len(), side, side], probs)?)?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Estimates CSV.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Report JSON path (a flat CSV is written beside it); default
    /// `<out-dir>/report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Tracks are split wherever frame numbers jump.
pub fn eval(a: EvalArgs) -> Result<()> {
    let mut st = Stage::new("eval", &a.common, None)?;
    let layout = PolarLayout::for_grid(&st.cfg.grid);
    let est = load_estimates::<Real>(&a.pred, &layout)?;
    let truth = load_truth::<Real>(&a.truth)?;
    st.manifest.input(&a.pred)?;
    st.manifest.input(&a.truth)?;
    let tr: Vec<TrackRecord<Real>> = tracks(&est, &truth)?;
    let report = sphseg::eval::evaluate(&tr);
    let json = a.out.unwrap_or_else(|| st.path("report.json"));
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&json, report.to_json() + "\n")?;
    let csv = json.with_extension("csv");
    std::fs::write(&csv, report.to_csv())?;
    st.manifest.output(&json)?;
    st.manifest.output(&csv)?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tensor: energy `[N, A, E]`, features `[N, F, S, S]`, or masks and
    /// probabilities `[N, S, S]`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Feature band to show (default: sum over bands).
    #[arg(long)]
    pub channel: Option<usize>,
    /// Ground-truth CSV: drawn as an X.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Baseline estimates CSV: drawn as a dot.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Network estimates CSV: drawn as a triangle.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Output PNG; default `<out-dir>/frame_<k>.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let mut st = Stage::new("plot", &a.common, None)?;
    let t = Tensor::load(&a.input)?;
    st.manifest.input(&a.input)?;
    let grid: BeamGrid = st.cfg.grid;
    let layout = PolarLayout::for_grid(&grid);
    let values: Vec<f32> = match t.data() {
        sphseg::storage::TensorData::F32(v) => v.clone(),
        sphseg::storage::TensorData::U8(v) => v.iter().map(|&b| b as f32).collect(),
    };
    let d = t.dims().to_vec();
    let n = d.first().copied().unwrap_or(0);
    if a.frame >= n {
        return Err(Error::FrameOutOfRange { frame: a.frame, available: n });
    }
    let frame_len: usize = d[1..].iter().product();
    let frame = &values[a.frame * frame_len..(a.frame + 1) * frame_len];
    let canvas = if d.len() == 3 && d[1] == grid.n_az && d[2] == grid.n_el {
        plot::Canvas::rect(frame, grid)
    } else if d.len() == 3 && d[1] == layout.side() && d[2] == layout.side() {
        plot::Canvas::polar(frame, layout)
    } else if d.len() == 4 && d[2] == layout.side() && d[3] == layout.side() {
        let side2 = d[2] * d[3];
        let img: Vec<f32> = match a.channel {
            Some(c) if c < d[1] => frame[c * side2..(c + 1) * side2].to_vec(),
            Some(c) => return Err(Error::InvalidParameter(format!("channel {c} out of range (tensor has {})", d[1]))),
            None => (0..side2).map(|i| (0..d[1]).map(|c| frame[c * side2 + i]).sum()).collect(),
        };
        plot::Canvas::polar(&img, layout)
    } else {
        return Err(Error::Shape(format!("cannot plot tensor of shape {d:?} with grid {}x{}", grid.n_az, grid.n_el)));
    };
    let mut canvas = canvas;
    if let Some(p) = &a.truth {
        st.manifest.input(p)?;
        if let Some(g) = load_truth::<Real>(p)?.iter().find(|g| g.frame_index == a.frame) {
            if let Some(dir) = g.source() {
                canvas.mark(&dir, plot::Marker::Cross);
            }
        }
    }
    for (path, marker) in [(&a.baseline, plot::Marker::Dot), (&a.estimates, plot::Marker::Triangle)] {
        if let Some(p) = path {
            st.manifest.input(p)?;
            if let Some(e) = load_estimates::<Real>(p, &layout)?.iter().find(|e| e.frame == a.frame) {
                if let Some(est) = &e.estimate {
                    canvas.mark(&est.direction, marker);
                }
            }
        }
    }
    let out = a.out.unwrap_or_else(|| st.path(&format!("frame_{}.png", a.frame)));
    canvas.save(&out)?;
    st.manifest.output(&out)?;
    st.finish()
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
}

/// Full run: training data, training, test split for both methods, scores.
/// Writes the model, loss history, truth and both estimate files, the
/// per-method reports and `metrics.json` (both reports plus the claims).
pub fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut st = Stage::new("pipeline", &a.common, None)?;
    st.write("config.json", st.cfg.to_json_string())?;
    let out = run_benchmark(&st.cfg, |m| eprintln!("{m}"))?;
    let model = st.path("model.spht");
    save_checkpoint(&model, &out.net, &out.params, Some(out.best_epoch))?;
    st.manifest.output(&model)?;
    st.manifest.output(st.path("model.json"))?;
    st.write("loss.csv", loss_history_csv(&out.history))?;
    st.write("truth.csv", truth_to_csv(&out.run.truth))?;
    st.write("estimates_unet.csv", estimates_to_csv(&out.run.unet))?;
    st.write("estimates_baseline.csv", estimates_to_csv(&out.run.baseline))?;
    // metrics recomputed from the written files match the in-memory run
    debug_assert_eq!(compare(&out.run)?, out.comparison);
    let c = &out.comparison;
    st.write("report_unet.json", c.unet.to_json() + "\n")?;
    st.write("report_unet.csv", c.unet.to_csv())?;
    st.write("report_baseline.json", c.baseline.to_json() + "\n")?;
    st.write("report_baseline.csv", c.baseline.to_csv())?;
    let metrics = serde_json::json!({
        "unet": c.unet,
        "baseline": c.baseline,
        "error_claim_holds": c.error_claim_holds(),
        "fpr_claim_holds": c.fpr_claim_holds(),
        "best_epoch": out.best_epoch,
    });
    st.write("metrics.json", serde_json::to_string_pretty(&metrics)? + "\n")?;
    eprintln!(
        "stage seconds: data {:.1}, training {:.1}, test {:.1}",
        out.timings_s[0], out.timings_s[1], out.timings_s[2]
    );
    st.finish()
}

//! The run configuration shared by every stage, and CLI overrides.
//!
//! Precedence is flag > file > built-in default: a file may omit any field,
//! and [`Overrides::apply`] runs last.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beamformer::BeamGrid;
use crate::error::{Error, Result};
use crate::features::BandConfig;
use crate::simulator::SourceSignature;
use crate::unet::{Attention, TrainConfig, TverskyParams, UNetConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Synthetic flight and noise scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub signature: SourceSignature,
    /// Per-channel broadband SNR; `null` renders noiseless scenes.
    pub snr_db: Option<f64>,
    /// When set, amplitude follows `r_ref / r` and `snr_db` holds at `r_ref`.
    pub spreading_ref_m: Option<f64>,
    /// Flight recordings are generated in independent segments of this length.
    pub segment_s: f64,
    pub range_m: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub speed_mps: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            signature: SourceSignature::default(),
            snr_db: Some(10.0),
            spreading_ref_m: None,
            segment_s: 60.0,
            range_m: [10.0, 200.0],
            elevation_deg: [10.0, 75.0],
            speed_mps: 8.0,
        }
    }
}

/// Durations of one data split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub flight_s: f64,
    pub noise_s: f64,
    /// Keep every `stride`-th frame.
    pub frame_stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub kernel: usize,
    pub attention: Attention,
    pub learning_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self { base_filters: u.base_filters, depth: u.depth, kernel: u.kernel, attention: u.attention, learning_rate: u.learning_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    /// Share of training frames held out for checkpoint selection.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            alpha: t.tversky.alpha,
            beta: t.tversky.beta,
            eps: t.tversky.eps,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    /// Geometry JSON; `null` selects the built-in 24-microphone array.
    pub geometry: Option<PathBuf>,
    pub grid: BeamGrid,
    pub bands: BandConfig,
    /// Label cap half-angle.
    pub delta_deg: f64,
    pub scene: SceneConfig,
    /// Data the network is trained on (separate seed stream from `test`).
    pub train: SplitConfig,
    /// Data both methods are evaluated on.
    pub test: SplitConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            geometry: None,
            grid: BeamGrid::default(),
            bands: BandConfig::default(),
            delta_deg: crate::labeling::DEFAULT_DELTA_DEG,
            scene: SceneConfig::default(),
            train: SplitConfig { flight_s: 240.0, noise_s: 60.0, frame_stride: 2 },
            test: SplitConfig { flight_s: 1800.0, noise_s: 300.0, frame_stride: 1 },
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            threshold: crate::postprocess::DEFAULT_THRESHOLD,
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { flight_s: 60.0, noise_s: 10.0, frame_stride: 1 }
    }
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        self.bands.bin_assignment()?;
        if !(self.delta_deg > 0.0 && self.delta_deg < 180.0) {
            return bad(format!("delta_deg {} outside (0, 180)", self.delta_deg));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        let s = &self.scene;
        if !(s.segment_s > 0.0) || !(s.speed_mps > 0.0) {
            return bad("segment length and speed must be positive".into());
        }
        if !(s.range_m[0] > 0.0 && s.range_m[0] < s.range_m[1]) {
            return bad(format!("range {:?} must be increasing and positive", s.range_m));
        }
        if !(s.elevation_deg[0] > 0.0 && s.elevation_deg[0] <= s.elevation_deg[1] && s.elevation_deg[1] < 90.0) {
            return bad(format!("elevation {:?} must lie in (0, 90)", s.elevation_deg));
        }
        for (name, sp) in [("train", &self.train), ("test", &self.test)] {
            if !(sp.flight_s >= 0.0 && sp.noise_s >= 0.0) || sp.frame_stride == 0 {
                return bad(format!("{name}: durations must be non-negative and stride at least 1"));
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.alpha > 0.0 && t.beta > 0.0 && t.eps > 0.0) || !(0.0..1.0).contains(&t.validation_fraction) {
            return bad("training: batch_size >= 1, alpha, beta, eps > 0 and validation_fraction in [0, 1) required".into());
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        let n = &self.network;
        UNetConfig {
            in_channels: self.bands.n_bands,
            base_filters: n.base_filters,
            depth: n.depth,
            kernel: n.kernel,
            attention: n.attention,
            learning_rate: n.learning_rate,
            seed: self.seed,
            image_side: 2 * self.grid.n_el,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig { epochs: t.epochs, batch_size: t.batch_size, tversky: TverskyParams { alpha: t.alpha, beta: t.beta, eps: t.eps } }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// A file consumed or produced by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self { path: path.display().to_string(), sha256: file_sha256(path)? })
    }
}

/// Provenance written beside every run's outputs. Holds no timestamps, so
/// reruns with identical inputs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Free-form run facts (for example an applied peak-limiting gain).
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Command-line overrides; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// `(az_step_deg, el_step_deg)`.
    pub grid: Option<(f64, f64)>,
    /// `(lo_hz, hi_hz)`.
    pub band: Option<(f64, f64)>,
    pub n_bands: Option<usize>,
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some((a, e)) = self.grid {
            cfg.grid = BeamGrid::new(a, e)?;
        }
        if let Some((lo, hi)) = self.band {
            cfg.bands.lo_hz = lo;
            cfg.bands.hi_hz = hi;
        }
        if let Some(n) = self.n_bands {
            cfg.bands.n_bands = n;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(a) = self.alpha {
            cfg.training.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.training.beta = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.network.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        cfg.validate()
    }
}

/// Resolves the effective config: defaults, then the optional file, then
/// overrides.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match file {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_json_str(&c.to_json_string()).unwrap(), c);
        assert_eq!(c.unet_config().image_side, 46);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "threshold": 0.7, "training": {"epochs": 3}}"#).unwrap();
        let file_only = resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((file_only.seed, file_only.threshold, file_only.training.epochs), (5, 0.7, 3));
        // untouched fields keep their defaults
        assert_eq!(file_only.training.batch_size, TrainingConfig::default().batch_size);
        let both = resolve(Some(&path), &Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!((both.seed, both.threshold), (9, 0.7));
        let none = resolve(None, &Overrides { threshold: Some(0.3), ..Default::default() }).unwrap();
        assert_eq!((none.seed, none.threshold), (0, 0.3));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_json_str(r#"{"version": 2}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"threshold": 1.5}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"unknown_field": 1}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"grid": {"az_step_deg": 7, "el_step_deg": 4}}"#).is_err());
        let mut c = PipelineConfig::default();
        assert!(Overrides { n_bands: Some(0), ..Default::default() }.apply(&mut c).is_err());
    }

    #[test]
    fn manifest_records_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "abc").unwrap();
        let mut m = Manifest::new("eval", &PipelineConfig::default());
        m.input(&f).unwrap();
        // sha256("abc")
        assert_eq!(m.inputs[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back: Manifest = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}

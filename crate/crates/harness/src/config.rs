//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use asc_core::adaptation::{AdaptConfig, AdaptMode};
use asc_core::channel::{ChannelConfig, ChannelKind};
use asc_core::data::{procedural_corpus, scene_frames, Image};
use asc_core::jscc_codec::DecoderSnr;
use asc_core::metrics::CbrPolicy;
use asc_core::model::ModelConfig;
use asc_core::model_delta_codec::DeltaQuantConfig;
use asc_core::optim::OptimizerKind;
use asc_core::{AscError, Result};

use crate::images::load_folder;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Independent procedural images.
    Procedural,
    /// Frames of one synthetic panning scene.
    Scene,
    /// Every PNG in a folder, in file-name order.
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub kind: SourceKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_count")]
    pub count: usize,
    /// Side of generated images, or of the centre crop taken from files.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_count() -> usize {
    30
}
fn default_size() -> usize {
    64
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(AscError::Config("image size must be positive".into()));
        }
        match (self.kind, &self.path) {
            (SourceKind::Folder, None) => Err(AscError::Config("folder source requires a path".into())),
            (SourceKind::Folder, Some(p)) if !p.is_dir() => {
                Err(AscError::Config(format!("dataset folder {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }

    /// Loads or generates the images. File images are centre-cropped to
    /// `size` when larger and rejected when smaller.
    pub fn load(&self) -> Result<Vec<Image>> {
        self.validate()?;
        let images = match self.kind {
            SourceKind::Procedural => procedural_corpus(self.seed, self.count, self.size, self.size),
            SourceKind::Scene => scene_frames(self.seed, self.count, self.size, self.size),
            SourceKind::Folder => {
                let all = load_folder(self.path.as_deref().expect("validated"))?;
                all.into_iter()
                    .take(self.count)
                    .map(|img| centre_crop(&img, self.size))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if images.is_empty() {
            return Err(AscError::Config("dataset is empty".into()));
        }
        Ok(images)
    }
}

fn centre_crop(img: &Image, size: usize) -> Result<Image> {
    if img.height < size || img.width < size {
        return Err(AscError::Data(format!(
            "image {}x{} is smaller than {size}x{size}",
            img.height, img.width
        )));
    }
    img.crop((img.height - size) / 2, (img.width - size) / 2, size, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
}

/// One operating point on the rate axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePoint {
    pub eta_y: f64,
    /// Defaults to the training λ.
    #[serde(default)]
    pub lambda: Option<f64>,
}

/// Optional per-scheme overrides of the adaptation defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeOverrides {
    pub steps: Option<usize>,
    pub y_steps: Option<usize>,
    pub s_steps: Option<usize>,
    pub lr: Option<f64>,
    pub lr_enc: Option<f64>,
    pub lr_dec: Option<f64>,
    pub beta: Option<f64>,
    pub select_every: Option<usize>,
    /// Channel realizations per image in the held-out selection loss.
    pub held_out_draws: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    TxModel,
    TxCode,
    TxrxFull,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::TxModel => "tx_model",
            Scheme::TxCode => "tx_code",
            Scheme::TxrxFull => "txrx_full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Scheme::Baseline, Scheme::TxModel, Scheme::TxCode, Scheme::TxrxFull]
            .into_iter()
            .find(|x| x.name() == s)
    }

    pub fn mode(self) -> Option<AdaptMode> {
        match self {
            Scheme::Baseline => None,
            Scheme::TxModel => Some(AdaptMode::TxModel),
            Scheme::TxCode => Some(AdaptMode::TxCode),
            Scheme::TxrxFull => Some(AdaptMode::TxrxFull),
        }
    }
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Baseline, Scheme::TxModel, Scheme::TxCode, Scheme::TxrxFull]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub tx_model: SchemeOverrides,
    #[serde(default)]
    pub tx_code: SchemeOverrides,
    #[serde(default)]
    pub txrx_full: SchemeOverrides,
    #[serde(default)]
    pub delta: DeltaQuantConfig,
    #[serde(default)]
    pub decoder_snr: DecoderSnr,
    #[serde(default)]
    pub cbr: CbrPolicy,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            schemes: default_schemes(),
            tx_model: SchemeOverrides::default(),
            tx_code: SchemeOverrides::default(),
            txrx_full: SchemeOverrides::default(),
            delta: DeltaQuantConfig::default(),
            decoder_snr: DecoderSnr::default(),
            cbr: CbrPolicy::default(),
        }
    }
}

impl AdaptSection {
    /// Full adaptation config for `scheme` at a rate point.
    pub fn config_for(&self, scheme: Scheme, lambda: f64, eta_y: f64, eta_z: f64, seed: u64) -> Option<AdaptConfig> {
        let mode = scheme.mode()?;
        let mut c = AdaptConfig::new(mode, lambda);
        let o = match mode {
            AdaptMode::TxModel => &self.tx_model,
            AdaptMode::TxCode => &self.tx_code,
            AdaptMode::TxrxFull => &self.txrx_full,
        };
        if let Some(v) = o.steps {
            c.steps = v;
        }
        if let Some(v) = o.y_steps {
            c.y_steps = v;
        }
        if let Some(v) = o.s_steps {
            c.s_steps = v;
        }
        c.lr = o.lr;
        if let Some(v) = o.lr_enc {
            c.lr_enc = v;
        }
        if let Some(v) = o.lr_dec {
            c.lr_dec = v;
        }
        if let Some(v) = o.beta {
            c.beta = v;
        }
        if let Some(v) = o.select_every {
            c.select_every = v;
        }
        if let Some(v) = o.held_out_draws {
            c.held_out_draws = v;
        }
        if let Some(v) = o.optimizer {
            c.optimizer = v;
        }
        c.eta_y = eta_y;
        c.eta_z = eta_z;
        c.seed = seed;
        c.delta = self.delta.clone();
        c.decoder_snr = self.decoder_snr;
        if mode == AdaptMode::TxrxFull {
            c.domain_scope = asc_core::adaptation::DomainScope::Domain;
        }
        Some(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataSource,
    pub train: TrainConfig,
    /// Training channel. Its SNR is the nominal training SNR.
    #[serde(default = "default_channel")]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub domains: Vec<Domain>,
    /// Evaluation channel points.
    #[serde(default = "default_eval_channels")]
    pub eval_channels: Vec<ChannelConfig>,
    #[serde(default = "default_rate_points")]
    pub rate_points: Vec<RatePoint>,
    #[serde(default)]
    pub adapt: AdaptSection,
}

fn default_channel() -> ChannelConfig {
    ChannelConfig::awgn(10.0)
}

fn default_eval_channels() -> Vec<ChannelConfig> {
    vec![ChannelConfig::awgn(10.0)]
}

fn default_rate_points() -> Vec<RatePoint> {
    [0.1, 0.15, 0.2, 0.3]
        .into_iter()
        .map(|eta_y| RatePoint { eta_y, lambda: None })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AscError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AscError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        for d in &mut self.domains {
            if let Some(p) = d.source.path.as_mut() {
                fix(p);
            }
        }
        for c in self.eval_channels.iter_mut().chain(std::iter::once(&mut self.channel)) {
            if let Some(p) = c.csi_path.as_mut() {
                fix(p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        if self.eval_channels.is_empty() {
            return Err(AscError::Config("evaluation channel grid is empty".into()));
        }
        for c in &self.eval_channels {
            c.validate()?;
            if c.kind == ChannelKind::CsiFile && c.csi_path.as_ref().is_some_and(|p| !p.is_file()) {
                return Err(AscError::Config("csi_path does not exist".into()));
            }
        }
        if self.rate_points.is_empty() {
            return Err(AscError::Config("rate grid is empty".into()));
        }
        for r in &self.rate_points {
            if !(r.eta_y > 0.0) || r.lambda.is_some_and(|l| !(l > 0.0)) {
                return Err(AscError::Config("rate points need positive eta_y and lambda".into()));
            }
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(AscError::Config("domain names must be unique".into()));
        }
        if self.domains.iter().any(|d| d.name.is_empty() || d.name.contains([',', '/'])) {
            return Err(AscError::Config("domain names must be non-empty without ',' or '/'".into()));
        }
        self.adapt.delta.validate()?;
        Ok(())
    }

    pub fn lambda_at(&self, r: &RatePoint) -> f64 {
        r.lambda.unwrap_or(self.train.lambda)
    }
}

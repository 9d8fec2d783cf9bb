//! Baseline training on the expected RD loss with a single channel draw per
//! sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use asc_core::channel::{sample_noise, ChannelConfig, CsiSampler};
use asc_core::data::Image;
use asc_core::model::{forward, hyper_noise, ChannelDraw, ChannelSource, HyperMode, NtsccModel, PassOptions, RdWeights};
use asc_core::jscc_codec::DecoderSnr;
use asc_core::metrics::psnr_from_mse;
use asc_core::optim::{Optimizer, OptimizerKind};
use asc_core::nn::Group;
use asc_core::{AscError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Fraction of the run after which the learning rate drops tenfold.
    #[serde(default = "default_decay_at")]
    pub decay_at: f64,
    pub lambda: f64,
    /// `eta_y` is drawn log-uniformly from this range per sample, which
    /// trains one model across bandwidth ratios.
    #[serde(default = "default_eta_y")]
    pub eta_y: (f64, f64),
    #[serde(default = "default_eta_z")]
    pub eta_z: f64,
    /// Training SNR range in dB, drawn uniformly per sample. Overrides the
    /// channel's own SNR.
    #[serde(default)]
    pub snr_db: Option<(f64, f64)>,
    /// Image side the samples are cropped to.
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    4000
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_decay_at() -> f64 {
    0.8
}
fn default_eta_y() -> (f64, f64) {
    (0.2, 0.2)
}
fn default_eta_z() -> f64 {
    1.0
}
fn default_crop() -> usize {
    64
}
fn default_log_every() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AscError::Config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.batch == 0 || self.log_every == 0 || self.crop == 0 {
            return bad("batch, crop and log_every must be positive".into());
        }
        if !(self.eta_y.0 > 0.0 && self.eta_y.0 <= self.eta_y.1) {
            return bad(format!("eta_y range {:?} is invalid", self.eta_y));
        }
        if let Some((lo, hi)) = self.snr_db {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("snr range ({lo}, {hi}) is invalid"));
            }
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.decay_at) {
            return bad("lr must be positive and decay_at within [0, 1]".into());
        }
        Ok(())
    }
}

/// Fresh gains from a sampler with an explicitly chosen noise variance.
pub struct NoiseChannel<'a> {
    pub sampler: &'a mut CsiSampler,
    pub rng: &'a mut ChaCha8Rng,
    pub noise_var: f64,
}

impl ChannelSource for NoiseChannel<'_> {
    fn draw(&mut self, k: usize) -> Result<ChannelDraw> {
        let csi = self.sampler.sample(k, self.rng)?;
        Ok(ChannelDraw {
            gains: csi.gains,
            noise: sample_noise(k, self.noise_var, self.rng),
            noise_var: self.noise_var,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub psnr: f64,
}

fn random_crop(img: &Image, size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if img.height < size || img.width < size {
        return Err(AscError::Data(format!(
            "image {}x{} is smaller than the {size}px crop",
            img.height, img.width
        )));
    }
    if img.height == size && img.width == size {
        return Ok(img.clone());
    }
    let top = rng.random_range(0..=img.height - size);
    let left = rng.random_range(0..=img.width - size);
    let mut c = img.crop(top, left, size, size)?;
    if rng.random::<bool>() {
        let w = c.width;
        for r in 0..c.height {
            for col in 0..w / 2 {
                for k in 0..3 {
                    c.data.swap((r * w + col) * 3 + k, (r * w + w - 1 - col) * 3 + k);
                }
            }
        }
    }
    Ok(c)
}

/// Trains every parameter group of `model` jointly. Deterministic given
/// `cfg.seed`. Parameters are rounded to f32 at the end so that the saved
/// checkpoint reproduces the returned model exactly.
pub fn train_baseline(
    model: &mut NtsccModel,
    data: &[Image],
    channel: &ChannelConfig,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    cfg.validate()?;
    channel.validate()?;
    if data.is_empty() {
        return Err(AscError::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = CsiSampler::new(channel.clone())?;
    let lrs: Vec<(Group, f64)> = Group::ALL.iter().map(|g| (*g, cfg.lr)).collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, &lrs);
    let decay_step = (cfg.decay_at * cfg.steps as f64).round() as usize;
    let mut logs = Vec::new();
    let (mut acc_loss, mut acc_r, mut acc_d, mut acc_n) = (0.0, 0.0, 0.0, 0usize);
    let sizes: Vec<usize> = model.params.params().iter().map(|p| p.data.len()).collect();
    for step in 0..cfg.steps {
        if step == decay_step {
            for g in Group::ALL {
                opt.set_lr(g, cfg.lr * 0.1);
            }
        }
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|n| vec![0.0; *n]).collect();
        for _ in 0..cfg.batch {
            let img = random_crop(&data[rng.random_range(0..data.len())], cfg.crop, &mut rng)?;
            let eta_y = if cfg.eta_y.0 == cfg.eta_y.1 {
                cfg.eta_y.0
            } else {
                (rng.random_range(cfg.eta_y.0.ln()..cfg.eta_y.1.ln())).exp()
            };
            let noise_var = match cfg.snr_db {
                Some((lo, hi)) => {
                    let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
                    channel.signal_power * 10f64.powf(-snr / 10.0)
                }
                None => sampler.noise_variance(),
            };
            let opts = PassOptions {
                weights: RdWeights {
                    lambda: cfg.lambda,
                    eta_y,
                    eta_z: cfg.eta_z,
                },
                hyper: HyperMode::Noise(hyper_noise(model, &img, &mut rng)?),
                decoder_snr: DecoderSnr::PerToken,
            };
            let mut g = asc_core::autodiff::Graph::new();
            let b = model.params.bind(&mut g);
            let mut ch = NoiseChannel {
                sampler: &mut sampler,
                rng: &mut rng,
                noise_var,
            };
            let f = forward(model, &mut g, &b, &img, &opts, &mut ch)?;
            let c = f.components(&g);
            if !c.loss.is_finite() {
                return Err(AscError::Consistency(format!("training loss diverged at step {step}")));
            }
            acc_loss += c.loss;
            acc_r += c.r_y * eta_y + c.r_z * cfg.eta_z;
            acc_d += c.distortion;
            acc_n += 1;
            let gr = g.backward(f.loss);
            for (i, v) in b.vars().iter().enumerate() {
                if let Some(gv) = gr.get(*v) {
                    grads[i].iter_mut().zip(gv).for_each(|(a, x)| *a += x / cfg.batch as f64);
                }
            }
        }
        opt.step_with(&mut model.params, |i| Some(grads[i].as_slice()));
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let n = acc_n.max(1) as f64;
            let entry = TrainLog {
                step: step + 1,
                loss: acc_loss / n,
                r: acc_r / n,
                d: acc_d / n,
                psnr: psnr_from_mse(acc_d / n),
            };
            on_log(&entry);
            logs.push(entry);
            (acc_loss, acc_r, acc_d, acc_n) = (0.0, 0.0, 0.0, 0);
        }
    }
    model.params.round_to_f32();
    Ok(logs)
}

//! Command implementations behind the `asc` binary.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use asc_core::adaptation::{adapt, transmit_code, AdaptConfig};
use asc_core::channel::{ChannelConfig, ChannelKind, CsiSampler};
use asc_core::checkpoint::{load_model, save, CheckpointMeta};
use asc_core::data::Image;
use asc_core::jscc_codec::DecoderSnr;
use asc_core::metrics::{cbr, CbrPolicy};
use asc_core::model::{fixed_draw, transmit_image, NtsccModel, RdWeights, SampledChannel};
use asc_core::{AscError, Result};

use crate::campaign::{run_campaign, CampaignReport};
use crate::config::{ExperimentConfig, Scheme};
use crate::evaluate::{evaluate_reports, BdRow};
use crate::images::{load_png, save_png};
use crate::plot::plot_reports;
use crate::train::{train_baseline, TrainLog};

pub const CHECKPOINT_NAME: &str = "baseline.ckpt";

fn kind_name(kind: ChannelKind) -> String {
    toml::Value::try_from(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Trains the baseline of an experiment and writes the checkpoint and the
/// training log into its output directory.
pub fn train_command(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = cfg.data.load()?;
    let mut model = NtsccModel::new(cfg.model.clone(), cfg.seed)?;
    let logs = train_baseline(&mut model, &data, &cfg.channel, &cfg.train, |l| {
        log::info!("step {} loss {:.5} R {:.4} psnr {:.2}", l.step, l.loss, l.r, l.psnr)
    })?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("train_log.csv"))
        .map_err(|e| AscError::Data(e.to_string()))?;
    for l in &logs {
        w.serialize::<&TrainLog>(l).map_err(|e| AscError::Data(e.to_string()))?;
    }
    w.flush()?;
    let nominal = cfg.channel.nominal_snr_db();
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        side_info_bits: cfg.model.jscc.q(),
        lambda: cfg.train.lambda,
        eta_y: (cfg.train.eta_y.0 * cfg.train.eta_y.1).sqrt(),
        eta_z: cfg.train.eta_z,
        train_snr_db: cfg.train.snr_db.unwrap_or((nominal, nominal)),
        channel: kind_name(cfg.channel.kind),
        seed: cfg.seed,
        steps: cfg.train.steps,
    };
    let path = cfg.output_dir.join(CHECKPOINT_NAME);
    save(&path, &meta, &model.params)?;
    Ok(path)
}

/// Runs the evaluation campaign of an experiment on a trained checkpoint.
/// Reports go to `<output_dir>/reports`.
pub fn adapt_command(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(PathBuf, CampaignReport)> {
    let (meta, model) = load_model(checkpoint)?;
    if meta.model != cfg.model {
        return Err(AscError::Consistency(
            "checkpoint architecture differs from the configured model".into(),
        ));
    }
    let dir = cfg.output_dir.join("reports");
    let report = run_campaign(cfg, &model, meta.lambda, &dir)?;
    Ok((dir, report))
}

#[derive(Clone, Debug)]
pub struct TransmitArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub snr_db: f64,
    pub scheme: Scheme,
    pub channel: ChannelKind,
    pub eta_y: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransmitOutcome {
    pub r: f64,
    pub m: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// Sends one PNG image with the chosen scheme over one channel draw.
pub fn transmit_command(args: &TransmitArgs) -> Result<TransmitOutcome> {
    let (meta, model) = load_model(&args.checkpoint)?;
    let img = load_png(&args.image)?;
    let ch = ChannelConfig::with_kind(args.channel, args.snr_db);
    ch.validate()?;
    let eta_y = args.eta_y.unwrap_or(meta.eta_y);
    let weights = RdWeights {
        lambda: meta.lambda,
        eta_y,
        eta_z: meta.eta_z,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut sampler = CsiSampler::new(ch.clone())?;
    let draw = fixed_draw(&model, &img, &mut sampler, &mut rng)?;
    let images = std::slice::from_ref(&img);
    let mut model_bits = 0.0;
    let tr = match args.scheme.mode() {
        None => transmit_image(&model, &img, weights, DecoderSnr::PerToken, &mut draw.clone())?,
        Some(mode) => {
            let mut acfg = AdaptConfig::new(mode, meta.lambda);
            acfg.eta_y = eta_y;
            acfg.eta_z = meta.eta_z;
            acfg.seed = args.seed;
            if let Some(s) = args.steps {
                acfg.steps = s;
                acfg.y_steps = s / 2;
                acfg.s_steps = s - s / 2;
            }
            let mut src = SampledChannel {
                sampler: &mut sampler,
                rng: &mut rng,
            };
            let res = adapt(&model, images, &mut src, &acfg)?;
            model_bits = res.stream.as_ref().map_or(0.0, |s| (s.len() * 8) as f64);
            match &res.code {
                Some(code) => transmit_code(&res.model, &img, code, DecoderSnr::PerToken, &mut draw.clone())?,
                None => transmit_image(&res.model, &img, weights, DecoderSnr::PerToken, &mut draw.clone())?,
            }
        }
    };
    let (r, m) = cbr(&tr.alloc, CbrPolicy::default(), model_bits, img.dims(), 1)?;
    if let Some(out) = &args.output {
        save_png(out, &Image::new(img.height, img.width, tr.x_hat.clone())?)?;
    }
    Ok(TransmitOutcome {
        r,
        m,
        mse: tr.mse,
        psnr: tr.psnr,
    })
}

pub fn evaluate_command(reports: &Path) -> Result<Vec<BdRow>> {
    if !reports.is_dir() {
        return Err(AscError::Config(format!("{} is not a directory", reports.display())));
    }
    evaluate_reports(reports)
}

pub fn plot_command(reports: &Path) -> Result<Vec<PathBuf>> {
    if !reports.is_dir() {
        return Err(AscError::Config(format!("{} is not a directory", reports.display())));
    }
    plot_reports(reports)
}

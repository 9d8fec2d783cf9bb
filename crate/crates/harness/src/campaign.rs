//! Evaluation campaigns: every scheme at every rate point on every channel
//! point, with channel realizations shared across schemes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use asc_core::adaptation::{adapt, transmit_code, AdaptConfig, AdaptResult, StepLog};
use asc_core::channel::{ChannelConfig, CsiSampler};
use asc_core::data::Image;
use asc_core::jscc_codec::DecoderSnr;
use asc_core::metrics::{cbr, CbrPolicy, RdmRecord, REPORT_HEADER};
use asc_core::model::{fixed_draw, transmit_image, ChannelDraw, NtsccModel, RdWeights, SampledChannel, Transmission};
use asc_core::{AscError, Result};

use crate::config::{Domain, ExperimentConfig, Scheme};

/// Mixes a base seed with a path of indices (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = base;
    for p in path {
        s = s.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        s = (s ^ (s >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        s = (s ^ (s >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s ^= s >> 31;
    }
    s
}

const EVAL_TAG: u64 = 1;
const ADAPT_TAG: u64 = 2;

#[derive(Clone, Debug, Serialize)]
struct SeedRow {
    purpose: &'static str,
    channel: usize,
    domain: String,
    rate_point: String,
    item: usize,
    seed: u64,
}

#[derive(Clone, Debug, Serialize)]
struct ErrorRow {
    scheme: &'static str,
    scope: String,
    snr_db: f64,
    lambda: f64,
    eta_y: f64,
    error: String,
}

#[derive(Clone, Debug, Serialize)]
struct AdaptRow {
    step: usize,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "M")]
    m: f64,
    #[serde(rename = "D")]
    d: f64,
    loss: f64,
    psnr: f64,
}

impl From<&StepLog> for AdaptRow {
    fn from(l: &StepLog) -> Self {
        Self {
            step: l.step,
            r: l.r,
            m: l.m,
            d: l.d,
            loss: l.loss,
            psnr: l.psnr,
        }
    }
}

/// Everything a campaign produced, also written to the report directory.
#[derive(Clone, Debug, Default)]
pub struct CampaignReport {
    pub records: Vec<(Scheme, RdmRecord)>,
    pub errors: usize,
    pub files: Vec<PathBuf>,
}

impl CampaignReport {
    /// `(R + M, psnr)` points of one scheme at one SNR, in rate-point order.
    pub fn curve(&self, scheme: Scheme, scope: &str, snr_db: f64) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|(s, r)| *s == scheme && r.scope == scope && r.snr_db == snr_db)
            .map(|(_, r)| (r.cbr_total, r.psnr))
            .collect()
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a NtsccModel,
    default_lambda: f64,
    policy: CbrPolicy,
    decoder_snr: DecoderSnr,
    seeds: Vec<SeedRow>,
    errors: Vec<ErrorRow>,
}

/// Mean content rate, model rate and mse. The model stream is shared by
/// all images, so each carries `1/n` of it.
fn summarize(trs: &[Transmission], images: &[Image], policy: CbrPolicy, model_bits: f64) -> Result<(f64, f64, f64)> {
    let (mut r, mut m, mut d) = (0.0, 0.0, 0.0);
    for (t, img) in trs.iter().zip(images) {
        let (ri, mi) = cbr(&t.alloc, policy, model_bits, img.dims(), trs.len())?;
        r += ri;
        m += mi;
        d += t.mse;
    }
    let n = trs.len() as f64;
    Ok((r / n, m / n, d / n))
}

impl Ctx<'_> {
    fn eval_draws(&mut self, ci: usize, di: usize, domain: &Domain, images: &[Image]) -> Result<Vec<ChannelDraw>> {
        let ch = &self.cfg.eval_channels[ci];
        let mut out = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let seed = derive_seed(self.cfg.seed, &[EVAL_TAG, ci as u64, di as u64, i as u64]);
            self.seeds.push(SeedRow {
                purpose: "eval_channel",
                channel: ci,
                domain: domain.name.clone(),
                rate_point: String::new(),
                item: i,
                seed,
            });
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sampler = CsiSampler::new(ch.clone())?;
            out.push(fixed_draw(self.model, img, &mut sampler, &mut rng)?);
        }
        Ok(out)
    }

    fn adapt_one(
        &mut self,
        images: &[Image],
        ch: &ChannelConfig,
        acfg: &AdaptConfig,
        label: (usize, &str, usize, usize),
    ) -> Result<AdaptResult<NtsccModel>> {
        let (ci, dname, ri, item) = label;
        let seed = acfg.seed;
        self.seeds.push(SeedRow {
            purpose: acfg.mode.name(),
            channel: ci,
            domain: dname.to_string(),
            rate_point: ri.to_string(),
            item,
            seed,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
        let mut sampler = CsiSampler::new(ch.clone())?;
        let mut src = SampledChannel {
            sampler: &mut sampler,
            rng: &mut rng,
        };
        adapt(self.model, images, &mut src, acfg)
    }

    /// Runs one scheme over a domain; returns `(R, M, mse)`.
    #[allow(clippy::too_many_arguments)]
    fn run_scheme(
        &mut self,
        scheme: Scheme,
        ci: usize,
        (di, domain): (usize, &Domain),
        (ri, lambda, eta_y): (usize, f64, f64),
        images: &[Image],
        draws: &[ChannelDraw],
        out_dir: &Path,
        files: &mut Vec<PathBuf>,
    ) -> Result<(f64, f64, f64, f64)> {
        let ch = self.cfg.eval_channels[ci].clone();
        let weights = RdWeights {
            lambda,
            eta_y,
            eta_z: self.cfg.train.eta_z,
        };
        let seed_of = |item: usize| derive_seed(self.cfg.seed, &[ADAPT_TAG, scheme as u64, ci as u64, di as u64, ri as u64, item as u64]);
        let cfg_of = |item: usize| {
            self.cfg
                .adapt
                .config_for(scheme, lambda, eta_y, self.cfg.train.eta_z, seed_of(item))
                .expect("adaptive scheme")
        };
        let mut trs = Vec::with_capacity(images.len());
        let mut model_bits = 0.0;
        let mut beta = 0.0;
        match scheme {
            Scheme::Baseline => {
                for (img, draw) in images.iter().zip(draws) {
                    trs.push(transmit_image(self.model, img, weights, self.decoder_snr, &mut draw.clone())?);
                }
            }
            Scheme::TxModel | Scheme::TxCode => {
                for (i, (img, draw)) in images.iter().zip(draws).enumerate() {
                    let acfg = cfg_of(i);
                    let res = self.adapt_one(std::slice::from_ref(img), &ch, &acfg, (ci, &domain.name, ri, i))?;
                    let t = match &res.code {
                        Some(code) => transmit_code(&res.model, img, code, self.decoder_snr, &mut draw.clone())?,
                        None => transmit_image(&res.model, img, weights, self.decoder_snr, &mut draw.clone())?,
                    };
                    trs.push(t);
                }
            }
            Scheme::TxrxFull => {
                let acfg = cfg_of(0);
                beta = acfg.beta;
                let res = self.adapt_one(images, &ch, &acfg, (ci, &domain.name, ri, 0))?;
                let path = out_dir.join(format!("adapt_{}_c{ci}_r{ri}.csv", domain.name));
                let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
                for l in &res.trajectory {
                    w.serialize(AdaptRow::from(l)).map_err(csv_err)?;
                }
                w.flush()?;
                files.push(path);
                model_bits = res.stream.as_ref().map_or(0.0, |s| (s.len() * 8) as f64);
                for (img, draw) in images.iter().zip(draws) {
                    trs.push(transmit_image(&res.model, img, weights, self.decoder_snr, &mut draw.clone())?);
                }
            }
        }
        let (r, m, d) = summarize(&trs, images, self.policy, model_bits)?;
        Ok((r, m, d, beta))
    }
}

fn csv_err(e: csv::Error) -> AscError {
    AscError::Data(format!("csv: {e}"))
}

/// Report file of one scheme.
pub fn report_path(dir: &Path, scheme: Scheme) -> PathBuf {
    dir.join(format!("rd_{}.csv", scheme.name()))
}

/// Runs the whole grid and writes `rd_<scheme>.csv`, `errors.csv`,
/// `seeds.csv` and one trajectory log per transceiver adaptation into
/// `out_dir`. Consistency failures abort; other per-point failures are
/// logged and reported as NaN rows.
pub fn run_campaign(
    cfg: &ExperimentConfig,
    model: &NtsccModel,
    default_lambda: f64,
    out_dir: &Path,
) -> Result<CampaignReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let domains: Vec<(Domain, Vec<Image>)> = cfg
        .domains
        .iter()
        .map(|d| d.source.load().map(|imgs| (d.clone(), imgs)))
        .collect::<Result<_>>()?;
    if domains.is_empty() {
        return Err(AscError::Config("no evaluation domains configured".into()));
    }
    let mut ctx = Ctx {
        cfg,
        model,
        default_lambda,
        policy: cfg.adapt.cbr,
        decoder_snr: cfg.adapt.decoder_snr,
        seeds: Vec::new(),
        errors: Vec::new(),
    };
    let mut report = CampaignReport::default();
    let mut files = Vec::new();
    for ci in 0..cfg.eval_channels.len() {
        let snr_db = cfg.eval_channels[ci].nominal_snr_db();
        for (di, (domain, images)) in domains.iter().enumerate() {
            let draws = ctx.eval_draws(ci, di, domain, images)?;
            for (ri, rp) in cfg.rate_points.iter().enumerate() {
                let lambda = rp.lambda.unwrap_or(ctx.default_lambda);
                for &scheme in &cfg.adapt.schemes {
                    log::info!(
                        "{} on {} at {snr_db} dB, eta_y {} (lambda {lambda})",
                        scheme.name(),
                        domain.name,
                        rp.eta_y
                    );
                    let outcome = ctx.run_scheme(
                        scheme,
                        ci,
                        (di, domain),
                        (ri, lambda, rp.eta_y),
                        images,
                        &draws,
                        out_dir,
                        &mut files,
                    );
                    let rec = match outcome {
                        Ok((r, m, d, beta)) => RdmRecord::new(&domain.name, snr_db, lambda, beta, r, m, d),
                        Err(e @ AscError::Consistency(_)) => return Err(e),
                        Err(e) => {
                            log::warn!("{} failed on {}: {e}", scheme.name(), domain.name);
                            ctx.errors.push(ErrorRow {
                                scheme: scheme.name(),
                                scope: domain.name.clone(),
                                snr_db,
                                lambda,
                                eta_y: rp.eta_y,
                                error: e.to_string(),
                            });
                            RdmRecord::new(&domain.name, snr_db, lambda, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                        }
                    };
                    report.records.push((scheme, rec));
                }
            }
        }
    }

    for &scheme in &cfg.adapt.schemes {
        let path = report_path(out_dir, scheme);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err)?;
        w.write_record(REPORT_HEADER).map_err(csv_err)?;
        for (_, rec) in report.records.iter().filter(|(s, _)| *s == scheme) {
            w.serialize(rec).map_err(csv_err)?;
        }
        w.flush()?;
        files.push(path);
    }
    let path = out_dir.join("errors.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(csv_err)?;
    w.write_record(["scheme", "scope", "snr_db", "lambda", "eta_y", "error"]).map_err(csv_err)?;
    for e in &ctx.errors {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush()?;
    files.push(path);
    let path = out_dir.join("seeds.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for s in &ctx.seeds {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush()?;
    files.push(path);

    report.errors = ctx.errors.len();
    report.files = files;
    Ok(report)
}

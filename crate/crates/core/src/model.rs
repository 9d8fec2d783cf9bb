//! The end-to-end transmission pipeline and the rate-distortion objective.
//!
//! `x -> g_a -> y -> f_e -> s -> channel -> f_d -> y_hat -> g_s -> x_hat`,
//! with `y -> h_a -> z -> h_s -> (mu, sigma)` pricing `y` and driving the
//! per-token bandwidth allocation.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::channel::{average_snr, per_token_snr, sample_noise, CsiSampler, CsiVector};
use crate::data::Image;
use crate::entropy_model::{allocate_bandwidth, factorized_bits, gaussian_bits, FactorizedPrior, RateAllocation, PRIOR_TENSORS};
use crate::error::{AscError, Result};
use crate::jscc_codec::{power_normalize, DecoderSnr, JsccConfig, SNR_CLAMP_DB};
use crate::nn::{Bound, Group, ParamSet};
use crate::transforms::ArchConfig;

fn default_prior_scale() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub jscc: JsccConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.jscc.validate()?;
        Ok(())
    }
}

/// Token layout of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentShape {
    pub tokens: usize,
    pub channels: usize,
    pub hyper_channels: usize,
    pub grid: (usize, usize),
}

/// How the hyper latent is treated in a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum HyperMode {
    /// Uniform-noise proxy `z + u` with the given noise realization.
    Noise(Rc<Vec<f64>>),
    /// Rounded `z`, as at inference.
    Round,
}

/// A learned transmission model usable by the adaptation procedures.
pub trait RdModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn values(&self) -> &[usize];
    fn latent_shape(&self, height: usize, width: usize) -> Result<LatentShape>;
    fn analysis(&self, g: &mut Graph, b: &Bound, x: Var, height: usize, width: usize) -> Result<Var>;
    /// Returns `(mu, sigma, hyper bits)`.
    fn prior(&self, g: &mut Graph, b: &Bound, y: Var, hyper: &HyperMode) -> Result<(Var, Var, Option<Var>)>;
    fn encode(&self, g: &mut Graph, b: &Bound, y: Var, alloc: &RateAllocation, cqi_db: f64, grid: (usize, usize)) -> Result<Var>;
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        s_hat: Var,
        alloc: &RateAllocation,
        snr_db: &[f64],
        grid: (usize, usize),
    ) -> Result<Var>;
    fn synthesis(&self, g: &mut Graph, b: &Bound, y_hat: Var, height: usize, width: usize) -> Result<Var>;
    /// Transmit-power constraint applied to freely optimized symbols.
    fn constrain_symbols(&self, g: &mut Graph, s: Var) -> Result<Var> {
        power_normalize(g, s)
    }
}

/// The desk-scale NTSCC model.
#[derive(Clone, Debug, PartialEq)]
pub struct NtsccModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl NtsccModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        config.arch.register(&mut params, &mut rng);
        FactorizedPrior::init(config.arch.hyper_channels, default_prior_scale(), &mut rng).register(&mut params);
        config.jscc.register(&mut params, &mut rng, config.arch.channels);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for p in reference.params.params() {
            match params.get(&p.name) {
                Some(q) if q.rows == p.rows && q.cols == p.cols && q.group == p.group => {}
                Some(q) => {
                    return Err(AscError::Shape(format!(
                        "parameter {} has shape {}x{}, expected {}x{}",
                        p.name, q.rows, q.cols, p.rows, p.cols
                    )))
                }
                None => return Err(AscError::Shape(format!("missing parameter {}", p.name))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(AscError::Shape("checkpoint has unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn prior_density(&self) -> Result<FactorizedPrior> {
        FactorizedPrior::from_params(&self.params)
    }
}

impl RdModel for NtsccModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn values(&self) -> &[usize] {
        &self.config.jscc.values
    }

    fn latent_shape(&self, height: usize, width: usize) -> Result<LatentShape> {
        let grid = self.config.arch.token_grid(height, width)?;
        Ok(LatentShape {
            tokens: grid.0 * grid.1,
            channels: self.config.arch.channels,
            hyper_channels: self.config.arch.hyper_channels,
            grid,
        })
    }

    fn analysis(&self, g: &mut Graph, b: &Bound, x: Var, height: usize, width: usize) -> Result<Var> {
        self.config.arch.analysis(g, b, x, height, width)
    }

    fn prior(&self, g: &mut Graph, b: &Bound, y: Var, hyper: &HyperMode) -> Result<(Var, Var, Option<Var>)> {
        let z = self.config.arch.hyper_analysis(g, b, y);
        let z_tilde = match hyper {
            HyperMode::Noise(u) => {
                if u.len() != g.value(z).len() {
                    return Err(AscError::Dimension(format!(
                        "hyper noise has {} values, hyper latent has {}",
                        u.len(),
                        g.value(z).len()
                    )));
                }
                g.add_const(z, u)
            }
            HyperMode::Round => g.map(z, |v| (v.round(), 1.0)),
        };
        let pv: [Var; 8] = std::array::from_fn(|i| b.var(&format!("prior.{}", PRIOR_TENSORS[i])));
        let z_bits = factorized_bits(g, z_tilde, pv);
        let (mu, sigma) = self.config.arch.hyper_synthesis(g, b, z_tilde);
        Ok((mu, sigma, Some(z_bits)))
    }

    fn encode(&self, g: &mut Graph, b: &Bound, y: Var, alloc: &RateAllocation, cqi_db: f64, grid: (usize, usize)) -> Result<Var> {
        self.config.jscc.encode(g, b, y, alloc, Some(cqi_db), grid)
    }

    fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        s_hat: Var,
        alloc: &RateAllocation,
        snr_db: &[f64],
        grid: (usize, usize),
    ) -> Result<Var> {
        self.config.jscc.decode(g, b, s_hat, alloc, snr_db, self.config.arch.channels, grid)
    }

    fn synthesis(&self, g: &mut Graph, b: &Bound, y_hat: Var, height: usize, width: usize) -> Result<Var> {
        self.config.arch.synthesis(g, b, y_hat, height, width)
    }
}

/// Lagrangian weights of the RD objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdWeights {
    pub lambda: f64,
    pub eta_y: f64,
    pub eta_z: f64,
}

/// One channel use: gains, additive noise and its variance. Vectors may be
/// longer than the symbol count; the prefix is used.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub gains: Vec<f64>,
    pub noise: Vec<f64>,
    pub noise_var: f64,
}

impl ChannelDraw {
    pub fn noiseless(k: usize) -> Self {
        Self {
            gains: vec![1.0; k],
            noise: vec![0.0; k],
            noise_var: 0.0,
        }
    }

    fn prefix(&self, k: usize) -> Result<(CsiVector, &[f64])> {
        if self.gains.len() < k || self.noise.len() < k {
            return Err(AscError::Dimension(format!(
                "channel draw holds {} symbols, {k} needed",
                self.gains.len().min(self.noise.len())
            )));
        }
        Ok((CsiVector { gains: self.gains[..k].to_vec() }, &self.noise[..k]))
    }
}

/// Supplies channel realizations once the symbol count is known.
pub trait ChannelSource {
    fn draw(&mut self, k: usize) -> Result<ChannelDraw>;
}

impl ChannelSource for ChannelDraw {
    fn draw(&mut self, k: usize) -> Result<ChannelDraw> {
        let (h, n) = self.prefix(k)?;
        Ok(ChannelDraw {
            gains: h.gains,
            noise: n.to_vec(),
            noise_var: self.noise_var,
        })
    }
}

/// Fresh CSI and noise from a channel domain on every call.
pub struct SampledChannel<'a> {
    pub sampler: &'a mut CsiSampler,
    pub rng: &'a mut ChaCha8Rng,
}

impl ChannelSource for SampledChannel<'_> {
    fn draw(&mut self, k: usize) -> Result<ChannelDraw> {
        let csi = self.sampler.sample(k, self.rng)?;
        let noise_var = self.sampler.noise_variance();
        let noise = sample_noise(k, noise_var, self.rng);
        Ok(ChannelDraw {
            gains: csi.gains,
            noise,
            noise_var,
        })
    }
}

/// Per-pass settings.
#[derive(Clone, Debug)]
pub struct PassOptions {
    pub weights: RdWeights,
    pub hyper: HyperMode,
    pub decoder_snr: DecoderSnr,
}

/// Everything produced by one forward pass.
pub struct Forward {
    pub y: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    pub token_bits: Vec<f64>,
    pub alloc: RateAllocation,
    pub s: Var,
    pub draw: ChannelDraw,
    pub cqi_db: f64,
    pub token_snr_db: Vec<f64>,
    pub y_hat: Var,
    pub x_hat: Var,
    /// Latent rate in bits per source dimension.
    pub r_y: Var,
    /// Hyper rate in bits per source dimension.
    pub r_z: Option<Var>,
    pub rate_term: Var,
    pub distortion: Var,
    pub loss: Var,
}

impl Forward {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            r_y: g.scalar(self.r_y),
            r_z: self.r_z.map_or(0.0, |v| g.scalar(v)),
            rate_term: g.scalar(self.rate_term),
            distortion: g.scalar(self.distortion),
            loss: g.scalar(self.loss),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossComponents {
    pub r_y: f64,
    pub r_z: f64,
    pub rate_term: f64,
    pub distortion: f64,
    pub loss: f64,
}

/// Places an image on the tape as `[h*w, 3]`.
pub fn image_leaf(g: &mut Graph, img: &Image) -> Var {
    g.leaf(img.height * img.width, 3, img.data.clone())
}

fn clamp_snr(v: f64) -> f64 {
    if v.is_nan() {
        SNR_CLAMP_DB.0
    } else {
        v.clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1)
    }
}

/// Receiver-side SNR bookkeeping: `(cqi, per-token SNR)` in dB.
pub fn link_snr(draw: &ChannelDraw, alloc: &RateAllocation) -> Result<(f64, Vec<f64>)> {
    let (h, _) = draw.prefix(alloc.total_symbols)?;
    if draw.noise_var <= 0.0 {
        return Ok((SNR_CLAMP_DB.1, vec![SNR_CLAMP_DB.1; alloc.tokens()]));
    }
    let cqi = clamp_snr(average_snr(&h, draw.noise_var, 1.0)?);
    let tok = per_token_snr(&h, draw.noise_var, &alloc.spans(), 1.0)?
        .into_iter()
        .map(clamp_snr)
        .collect();
    Ok((cqi, tok))
}

/// `h * s + n` followed by the per-symbol linear MMSE scaling
/// `h / (h^2 + noise_var)` applied by the receiver, which knows `h` exactly.
pub fn receive(g: &mut Graph, s: Var, draw: &ChannelDraw) -> Result<Var> {
    let k = g.value(s).len();
    let (h, n) = draw.prefix(k)?;
    let eq: Vec<f64> = h
        .gains
        .iter()
        .map(|hj| {
            let d = hj * hj + draw.noise_var;
            if d > 0.0 {
                hj / d
            } else {
                0.0
            }
        })
        .collect();
    let gain: Vec<f64> = h.gains.iter().zip(&eq).map(|(a, e)| a * e).collect();
    let noise: Vec<f64> = n.iter().zip(&eq).map(|(a, e)| a * e).collect();
    let scaled = g.mul_const(s, Rc::new(gain));
    Ok(g.add_const(scaled, &noise))
}

/// Token rates, allocation and the rate part of the objective for a latent.
pub struct RatePart {
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    pub token_bits: Vec<f64>,
    pub alloc: RateAllocation,
    pub r_y: Var,
    pub r_z: Option<Var>,
    pub rate_term: Var,
}

pub fn rate_part<M: RdModel + ?Sized>(
    model: &M,
    g: &mut Graph,
    b: &Bound,
    y: Var,
    m: usize,
    opts: &PassOptions,
) -> Result<RatePart> {
    let (mu, sigma, z_bits) = model.prior(g, b, y, &opts.hyper)?;
    if g.value(sigma).iter().any(|s| !(*s > 0.0)) {
        return Err(AscError::Domain("latent scale must be positive".into()));
    }
    let bits = gaussian_bits(g, y, mu, sigma);
    let token = g.row_sum(bits);
    let token_bits = g.value(token).to_vec();
    let alloc = allocate_bandwidth(&token_bits, opts.weights.eta_y, model.values())?;
    let inv_m = 1.0 / m as f64;
    let sy = g.sum(bits);
    let r_y = g.scale(sy, inv_m);
    let r_z = z_bits.map(|zb| {
        let sz = g.sum(zb);
        g.scale(sz, inv_m)
    });
    let wy = g.scale(r_y, opts.weights.lambda * opts.weights.eta_y);
    let rate_term = match r_z {
        Some(rz) => {
            let wz = g.scale(rz, opts.weights.lambda * opts.weights.eta_z);
            g.add(wy, wz)
        }
        None => wy,
    };
    Ok(RatePart {
        mu: Some(mu),
        sigma: Some(sigma),
        token_bits,
        alloc,
        r_y,
        r_z,
        rate_term,
    })
}

/// Channel, decoder and synthesis from transmitted symbols `s`. Returns
/// `(y_hat, x_hat, distortion, cqi, per-token SNR)`.
#[allow(clippy::too_many_arguments)]
pub fn receiver_part<M: RdModel + ?Sized>(
    model: &M,
    g: &mut Graph,
    b: &Bound,
    img: &Image,
    s: Var,
    alloc: &RateAllocation,
    draw: &ChannelDraw,
    decoder_snr: DecoderSnr,
) -> Result<(Var, Var, Var, f64, Vec<f64>)> {
    let shape = model.latent_shape(img.height, img.width)?;
    let (cqi, tok) = link_snr(draw, alloc)?;
    let s_hat = receive(g, s, draw)?;
    let dec_snr = match decoder_snr {
        DecoderSnr::PerToken => tok.clone(),
        DecoderSnr::Cqi => vec![cqi; alloc.tokens()],
    };
    let y_hat = model.decode(g, b, s_hat, alloc, &dec_snr, shape.grid)?;
    let x_hat = model.synthesis(g, b, y_hat, img.height, img.width)?;
    let d = g.mse_const(x_hat, Rc::new(img.data.clone()));
    Ok((y_hat, x_hat, d, cqi, tok))
}

/// Full pass from a latent `y` already on the tape.
pub fn forward_from_y<M: RdModel + ?Sized>(
    model: &M,
    g: &mut Graph,
    b: &Bound,
    img: &Image,
    y: Var,
    opts: &PassOptions,
    channel: &mut dyn ChannelSource,
) -> Result<Forward> {
    let shape = model.latent_shape(img.height, img.width)?;
    let rp = rate_part(model, g, b, y, img.dims(), opts)?;
    let draw = channel.draw(rp.alloc.total_symbols)?;
    let (cqi, _) = link_snr(&draw, &rp.alloc)?;
    let s = model.encode(g, b, y, &rp.alloc, cqi, shape.grid)?;
    let (y_hat, x_hat, d, cqi, tok) = receiver_part(model, g, b, img, s, &rp.alloc, &draw, opts.decoder_snr)?;
    let loss = g.add(rp.rate_term, d);
    Ok(Forward {
        y,
        mu: rp.mu,
        sigma: rp.sigma,
        token_bits: rp.token_bits,
        alloc: rp.alloc,
        s,
        draw,
        cqi_db: cqi,
        token_snr_db: tok,
        y_hat,
        x_hat,
        r_y: rp.r_y,
        r_z: rp.r_z,
        rate_term: rp.rate_term,
        distortion: d,
        loss,
    })
}

/// Full pass from an image.
pub fn forward<M: RdModel + ?Sized>(
    model: &M,
    g: &mut Graph,
    b: &Bound,
    img: &Image,
    opts: &PassOptions,
    channel: &mut dyn ChannelSource,
) -> Result<Forward> {
    let x = image_leaf(g, img);
    let y = model.analysis(g, b, x, img.height, img.width)?;
    forward_from_y(model, g, b, img, y, opts, channel)
}

/// Result of transmitting one image at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub alloc: RateAllocation,
    pub x_hat: Vec<f64>,
    pub mse: f64,
    pub psnr: f64,
    pub components: LossComponents,
}

/// Inference pass with rounded hyper latent and clamped reconstruction.
pub fn transmit_image<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    weights: RdWeights,
    decoder_snr: DecoderSnr,
    channel: &mut dyn ChannelSource,
) -> Result<Transmission> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let opts = PassOptions {
        weights,
        hyper: HyperMode::Round,
        decoder_snr,
    };
    let f = forward(model, &mut g, &b, img, &opts, channel)?;
    Ok(finish_transmission(&g, &f, img))
}

pub fn finish_transmission(g: &Graph, f: &Forward, img: &Image) -> Transmission {
    let x_hat: Vec<f64> = g.value(f.x_hat).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mse = crate::metrics::mse(&img.data, &x_hat);
    Transmission {
        alloc: f.alloc.clone(),
        psnr: crate::metrics::psnr_from_mse(mse),
        mse,
        x_hat,
        components: f.components(g),
    }
}

/// Hyper-noise realization `U(-1/2, 1/2)` sized for an image.
pub fn hyper_noise<M: RdModel + ?Sized>(model: &M, img: &Image, rng: &mut ChaCha8Rng) -> Result<Rc<Vec<f64>>> {
    let shape = model.latent_shape(img.height, img.width)?;
    Ok(Rc::new(crate::entropy_model::add_uniform_noise(
        &vec![0.0; shape.tokens * shape.hyper_channels],
        rng,
    )))
}

/// A reusable channel realization long enough for any allocation of `img`.
pub fn fixed_draw<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    sampler: &mut CsiSampler,
    rng: &mut ChaCha8Rng,
) -> Result<ChannelDraw> {
    let shape = model.latent_shape(img.height, img.width)?;
    let kmax = shape.tokens * model.values().iter().max().copied().unwrap_or(1);
    SampledChannel { sampler, rng }.draw(kmax)
}

/// A two-parameter linear pipeline used as an analytic reference: `y = a x`,
/// `x_hat = b y_hat`, a fixed unit Gaussian prior, one token per pixel with
/// three symbols each and no power normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearToy {
    pub params: ParamSet,
    values: Vec<usize>,
}

impl LinearToy {
    pub fn new(a: f64, b: f64) -> Self {
        let mut params = ParamSet::new();
        params.add("toy.a", Group::AnalysisG, 1, 1, vec![a]);
        params.add("toy.b", Group::SynthesisG, 1, 1, vec![b]);
        Self {
            params,
            values: vec![3],
        }
    }

    fn scale(g: &mut Graph, t: Var, k: Var) -> Var {
        let (r, c) = g.shape(t);
        let flat = g.reshape(t, r * c, 1);
        let out = g.matmul(flat, k);
        g.reshape(out, r, c)
    }
}

impl RdModel for LinearToy {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn values(&self) -> &[usize] {
        &self.values
    }

    fn latent_shape(&self, height: usize, width: usize) -> Result<LatentShape> {
        Ok(LatentShape {
            tokens: height * width,
            channels: 3,
            hyper_channels: 0,
            grid: (height, width),
        })
    }

    fn analysis(&self, g: &mut Graph, b: &Bound, x: Var, _height: usize, _width: usize) -> Result<Var> {
        Ok(Self::scale(g, x, b.var("toy.a")))
    }

    fn prior(&self, g: &mut Graph, _b: &Bound, y: Var, _hyper: &HyperMode) -> Result<(Var, Var, Option<Var>)> {
        let (r, c) = g.shape(y);
        let mu = g.leaf(r, c, vec![0.0; r * c]);
        let sigma = g.leaf(r, c, vec![1.0; r * c]);
        Ok((mu, sigma, None))
    }

    fn encode(&self, g: &mut Graph, _b: &Bound, y: Var, alloc: &RateAllocation, _cqi: f64, _grid: (usize, usize)) -> Result<Var> {
        if alloc.k_bar.iter().any(|k| *k != 3) {
            return Err(AscError::Allocation("toy model carries exactly 3 symbols per token".into()));
        }
        let n = g.value(y).len();
        Ok(g.reshape(y, n, 1))
    }

    fn decode(
        &self,
        g: &mut Graph,
        _b: &Bound,
        s_hat: Var,
        alloc: &RateAllocation,
        _snr: &[f64],
        _grid: (usize, usize),
    ) -> Result<Var> {
        Ok(g.reshape(s_hat, alloc.tokens(), 3))
    }

    fn synthesis(&self, g: &mut Graph, b: &Bound, y_hat: Var, _height: usize, _width: usize) -> Result<Var> {
        Ok(Self::scale(g, y_hat, b.var("toy.b")))
    }

    fn constrain_symbols(&self, _g: &mut Graph, s: Var) -> Result<Var> {
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelConfig, ChannelKind};
    use crate::data::procedural_corpus;

    fn small_model(modnet: bool) -> NtsccModel {
        let cfg = ModelConfig {
            arch: ArchConfig {
                width: 8,
                channels: 8,
                hyper_channels: 4,
                ..ArchConfig::default()
            },
            jscc: JsccConfig {
                values: vec![2, 4, 8, 16],
                modnet,
            },
        };
        NtsccModel::new(cfg, 1).unwrap()
    }

    fn weights() -> RdWeights {
        RdWeights {
            lambda: 0.05,
            eta_y: 0.2,
            eta_z: 1.0,
        }
    }

    #[test]
    fn loss_recomposes_from_components() {
        let model = small_model(true);
        let img = procedural_corpus(2, 1, 16, 16).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sampler = CsiSampler::new(ChannelConfig::with_kind(ChannelKind::SelectiveFading, 5.0)).unwrap();
        let mut draw = fixed_draw(&model, &img, &mut sampler, &mut rng).unwrap();
        let opts = PassOptions {
            weights: weights(),
            hyper: HyperMode::Noise(hyper_noise(&model, &img, &mut rng).unwrap()),
            decoder_snr: DecoderSnr::PerToken,
        };
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let f = forward(&model, &mut g, &b, &img, &opts, &mut draw).unwrap();
        let c = f.components(&g);
        let w = weights();
        let recomposed = w.lambda * (w.eta_y * c.r_y + w.eta_z * c.r_z) + c.distortion;
        assert!((recomposed - c.loss).abs() < 1e-9);
        assert_eq!(f.alloc.tokens(), 4);
        assert_eq!(g.value(f.s).len(), f.alloc.total_symbols);
    }

    #[test]
    fn zero_lambda_leaves_only_distortion() {
        let model = small_model(false);
        let img = procedural_corpus(3, 1, 16, 16).remove(0);
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let opts = PassOptions {
            weights: RdWeights {
                lambda: 0.0,
                ..weights()
            },
            hyper: HyperMode::Round,
            decoder_snr: DecoderSnr::PerToken,
        };
        let mut ch = ChannelDraw::noiseless(64);
        let f = forward(&model, &mut g, &b, &img, &opts, &mut ch).unwrap();
        assert_eq!(g.scalar(f.loss), g.scalar(f.distortion));
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let model = small_model(true);
        let img = procedural_corpus(5, 1, 16, 16).remove(0);
        let run = || {
            let mut ch = ChannelDraw::noiseless(64);
            transmit_image(&model, &img, weights(), DecoderSnr::PerToken, &mut ch).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_image_gives_finite_tokens() {
        let model = small_model(false);
        let img = Image::filled(16, 16, 0.0);
        let mut g = Graph::new();
        let b = model.params.bind(&mut g);
        let x = image_leaf(&mut g, &img);
        let y = model.analysis(&mut g, &b, x, 16, 16).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn receive_equalizes_known_gain() {
        let mut g = Graph::new();
        let s = g.leaf(2, 1, vec![1.0, -2.0]);
        let draw = ChannelDraw {
            gains: vec![0.5, 2.0],
            noise: vec![0.0, 0.0],
            noise_var: 0.0,
        };
        let r = receive(&mut g, s, &draw).unwrap();
        assert_eq!(g.value(r), &[1.0, -2.0]);
    }
}

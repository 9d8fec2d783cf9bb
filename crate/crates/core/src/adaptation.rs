//! Online overfitting of the transmitter, the transmitted codes, or the whole
//! transceiver to an instance or a domain of instances.
//!
//! Every procedure works under the RD objective `λ(η_y R_y + η_z R_z) + D`;
//! the transceiver variant adds the model-stream term `β η_δ (−log2 p(δ̃))`.
//! The entropy model (`h_a`, `h_s`, the factorized prior) is never touched.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Var};
use crate::data::Image;
use crate::entropy_model::RateAllocation;
use crate::error::{AscError, Result};
use crate::jscc_codec::DecoderSnr;
use crate::metrics::psnr_from_mse;
use crate::model::{
    forward, forward_from_y, hyper_noise, image_leaf, link_snr, rate_part, receiver_part, ChannelDraw, ChannelSource,
    HyperMode, LossComponents, PassOptions, RdModel, RdWeights, Transmission,
};
use crate::model_delta_codec::{
    decode_stream, encode_stream, ideal_bits, quantize, quantize_ste, rate_proxy_bits, DeltaQuantConfig,
    QuantizedDelta,
};
use crate::nn::{Group, ParamSet};
use crate::optim::{Optimizer, OptimizerKind, VectorAdam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    TxModel,
    TxCode,
    TxrxFull,
}

impl AdaptMode {
    pub fn name(self) -> &'static str {
        match self {
            AdaptMode::TxModel => "tx_model",
            AdaptMode::TxCode => "tx_code",
            AdaptMode::TxrxFull => "txrx_full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainScope {
    #[default]
    Instance,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// T_max for `tx_model` and `txrx_full`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_code_steps")]
    pub y_steps: usize,
    #[serde(default = "default_code_steps")]
    pub s_steps: usize,
    /// Learning rate of `tx_model` / `tx_code`; the mode default when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_lr_enc")]
    pub lr_enc: f64,
    #[serde(default = "default_lr_dec")]
    pub lr_dec: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub eta_y: f64,
    #[serde(default = "one")]
    pub eta_z: f64,
    #[serde(default)]
    pub domain_scope: DomainScope,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub delta: DeltaQuantConfig,
    /// Best-step selection interval of `txrx_full`.
    #[serde(default = "default_select_every")]
    pub select_every: usize,
    /// Fixed channel and hyper-noise realizations per image used to score
    /// the initial and final objective (and selection candidates).
    #[serde(default = "default_held_out_draws")]
    pub held_out_draws: usize,
    #[serde(default)]
    pub decoder_snr: DecoderSnr,
}

fn default_steps() -> usize {
    100
}
fn default_code_steps() -> usize {
    50
}
fn default_lr_enc() -> f64 {
    1e-5
}
fn default_lr_dec() -> f64 {
    1e-4
}
fn one() -> f64 {
    1.0
}
fn default_select_every() -> usize {
    100
}
fn default_held_out_draws() -> usize {
    4
}

impl AdaptConfig {
    /// Defaults for `mode` at the given λ.
    pub fn new(mode: AdaptMode, lambda: f64) -> Self {
        Self {
            mode,
            steps: if mode == AdaptMode::TxrxFull { 10_000 } else { default_steps() },
            y_steps: default_code_steps(),
            s_steps: default_code_steps(),
            lr: None,
            lr_enc: default_lr_enc(),
            lr_dec: default_lr_dec(),
            lambda,
            beta: 1.0,
            eta_y: 1.0,
            eta_z: 1.0,
            domain_scope: DomainScope::Instance,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            delta: DeltaQuantConfig::default(),
            select_every: default_select_every(),
            held_out_draws: default_held_out_draws(),
            decoder_snr: DecoderSnr::PerToken,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AscError::Config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.eta_y > 0.0) || !(self.eta_z > 0.0) {
            return bad("eta_y and eta_z must be positive".into());
        }
        for lr in [self.lr.unwrap_or(0.0), self.lr_enc, self.lr_dec] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be non-negative, got {lr}"));
            }
        }
        if self.select_every == 0 || self.held_out_draws == 0 {
            return bad("select_every and held_out_draws must be at least 1".into());
        }
        self.delta.validate()
    }

    /// Learning rate of the single-rate modes.
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            AdaptMode::TxCode => 1e-3,
            _ => 1e-4,
        })
    }

    pub fn weights(&self) -> RdWeights {
        RdWeights {
            lambda: self.lambda,
            eta_y: self.eta_y,
            eta_z: self.eta_z,
        }
    }
}

/// One row of the adaptation log. `r = η_y R_y + η_z R_z` and `m = η_δ
/// bits / dims` so that `loss = λ r + β m + d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub loss: f64,
    pub psnr: f64,
}

/// Optimized transmission of one instance by `tx_code`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeState {
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub alloc: RateAllocation,
}

#[derive(Clone, Debug)]
pub struct AdaptResult<M> {
    pub model: M,
    pub code: Option<CodeState>,
    pub trajectory: Vec<StepLog>,
    /// Objective of the baseline at the held-out realization. For the
    /// transceiver mode this prices the all-zero model stream.
    pub initial: StepLog,
    /// Objective of the result at the same realization.
    pub final_eval: StepLog,
    pub delta: Option<QuantizedDelta>,
    pub stream: Option<Vec<u8>>,
    pub best_step: Option<usize>,
    pub steps: usize,
    pub elapsed: Duration,
}

/// A fixed hyper-noise and channel realization per instance.
#[derive(Clone, Debug)]
pub struct HeldOut {
    /// Image index of each realization.
    pub image: Vec<usize>,
    pub hyper: Vec<Rc<Vec<f64>>>,
    pub draws: Vec<ChannelDraw>,
}

impl HeldOut {
    pub fn draw<M: RdModel + ?Sized>(
        model: &M,
        images: &[Image],
        channel: &mut dyn ChannelSource,
        rng: &mut ChaCha8Rng,
        per_image: usize,
    ) -> Result<Self> {
        let n = images.len() * per_image;
        let mut held = Self {
            image: Vec::with_capacity(n),
            hyper: Vec::with_capacity(n),
            draws: Vec::with_capacity(n),
        };
        for (i, img) in images.iter().enumerate() {
            for _ in 0..per_image {
                held.image.push(i);
                held.hyper.push(hyper_noise(model, img, rng)?);
                held.draws.push(channel.draw(max_symbols(model, img)?)?);
            }
        }
        Ok(held)
    }
}

fn max_symbols<M: RdModel + ?Sized>(model: &M, img: &Image) -> Result<usize> {
    let shape = model.latent_shape(img.height, img.width)?;
    Ok(shape.tokens * model.values().iter().max().copied().unwrap_or(1))
}

/// Quantized receiver update relative to a base parameter set.
pub struct DeltaTerm<'a> {
    pub base: &'a ParamSet,
    pub cfg: &'a DeltaQuantConfig,
    /// Uniform noise for δ̃, one entry per receiver weight. `None` prices
    /// nothing (the forward still uses the quantized parameters).
    pub noise: Option<&'a [f64]>,
    pub beta: f64,
    /// Source dimensions the update is amortized over.
    pub dims: usize,
}

/// One differentiable pass. `leaves[i]` is the tape leaf of parameter `i`.
pub struct Pass {
    pub g: Graph,
    pub leaves: Vec<Var>,
    pub loss: Var,
    pub y: Var,
    pub s: Var,
    pub log: StepLog,
}

impl Pass {
    pub fn backward(&self) -> Gradients {
        self.g.backward(self.loss)
    }
}

fn log_of(g: &Graph, weights: RdWeights, r_y: Var, r_z: Option<Var>, d: Var, m: f64, loss: Var) -> StepLog {
    let r = weights.eta_y * g.scalar(r_y) + r_z.map_or(0.0, |v| weights.eta_z * g.scalar(v));
    let d = g.scalar(d);
    StepLog {
        step: 0,
        r,
        m,
        d,
        loss: g.scalar(loss),
        psnr: psnr_from_mse(d),
    }
}

/// RD (or RDM when `delta` is given) objective for one instance. Receiver
/// parameters enter as `base + Q(θ − base)` through the straight-through
/// quantizer when `delta` is present.
pub fn rdm_pass<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    opts: &PassOptions,
    delta: Option<&DeltaTerm>,
    channel: &mut dyn ChannelSource,
) -> Result<Pass> {
    let mut g = Graph::new();
    let mut leaves = Vec::with_capacity(model.params().len());
    let mut bit_parts: Vec<Var> = Vec::new();
    let mut offset = 0usize;
    let b = model.params().bind_with(&mut g, |g, p| {
        let leaf = g.leaf(p.rows, p.cols, p.data.clone());
        leaves.push(leaf);
        let Some(dt) = delta else { return leaf };
        if !p.group.is_receiver() {
            return leaf;
        }
        let base = &dt.base.get(&p.name).expect("base parameter set mismatch").data;
        let neg: Vec<f64> = base.iter().map(|v| -v).collect();
        let dv = g.add_const(leaf, &neg);
        let q = quantize_ste(g, dv, dt.cfg);
        if let Some(noise) = dt.noise {
            let n = p.data.len();
            let noisy = g.add_const(dv, &noise[offset..offset + n]);
            offset += n;
            let bits = rate_proxy_bits(g, noisy, dt.cfg);
            bit_parts.push(g.sum(bits));
        }
        g.add_const(q, base)
    });
    if let Some(noise) = delta.and_then(|d| d.noise) {
        if offset != noise.len() {
            return Err(AscError::Dimension(format!(
                "model noise has {} entries, receiver holds {offset}",
                noise.len()
            )));
        }
    }
    let f = forward(model, &mut g, &b, img, opts, channel)?;
    let (loss, m) = match (delta, bit_parts.is_empty()) {
        (Some(dt), false) => {
            let mut bits = bit_parts[0];
            for v in &bit_parts[1..] {
                bits = g.add(bits, *v);
            }
            let k = dt.cfg.eta_delta / dt.dims as f64;
            let mv = g.scale(bits, k);
            let m = g.scalar(mv);
            let mt = g.scale(mv, dt.beta);
            (g.add(f.loss, mt), m)
        }
        _ => (f.loss, 0.0),
    };
    let log = log_of(&g, opts.weights, f.r_y, f.r_z, f.distortion, m, loss);
    Ok(Pass {
        g,
        leaves,
        loss,
        y: f.y,
        s: f.s,
        log,
    })
}

/// `λ(η_y R_y + η_z R_z) + D` for one instance and channel realization.
pub fn rd_loss<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    opts: &PassOptions,
    channel: &mut dyn ChannelSource,
) -> Result<StepLog> {
    Ok(rdm_pass(model, img, opts, None, channel)?.log)
}

/// RD loss at quantized receiver parameters plus `β η_δ (−log2 p(δ̃))`.
pub fn rdm_loss<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    opts: &PassOptions,
    delta: &DeltaTerm,
    channel: &mut dyn ChannelSource,
) -> Result<StepLog> {
    Ok(rdm_pass(model, img, opts, Some(delta), channel)?.log)
}

fn receiver_len(ps: &ParamSet) -> usize {
    ps.params().iter().filter(|p| p.group.is_receiver()).map(|p| p.data.len()).sum()
}

/// `δ = θ − base` over the receiver parameters, flattened in set order.
pub fn receiver_delta(ps: &ParamSet, base: &ParamSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(receiver_len(ps));
    for p in ps.params().iter().filter(|p| p.group.is_receiver()) {
        let b = &base.get(&p.name).expect("base parameter set mismatch").data;
        out.extend(p.data.iter().zip(b).map(|(t, b)| t - b));
    }
    out
}

fn receiver_layout(ps: &ParamSet) -> Vec<(String, usize)> {
    ps.params()
        .iter()
        .filter(|p| p.group.is_receiver())
        .map(|p| (p.name.clone(), p.data.len()))
        .collect()
}

/// Receiver parameters `base + kΔ` rebuilt from a quantized update.
pub fn apply_delta(ps: &mut ParamSet, base: &ParamSet, qd: &QuantizedDelta, cfg: &DeltaQuantConfig) -> Result<()> {
    let n = receiver_len(base);
    if qd.len() != n {
        return Err(AscError::Dimension(format!("update holds {} values, receiver has {n}", qd.len())));
    }
    let mut i = 0;
    for p in ps.params_mut().iter_mut().filter(|p| p.group.is_receiver()) {
        let b = &base.get(&p.name).expect("base parameter set mismatch").data;
        for (w, bv) in p.data.iter_mut().zip(b) {
            *w = bv + qd.indices[i] as f64 * cfg.delta_bin;
            i += 1;
        }
    }
    Ok(())
}

fn pick<'a>(images: &'a [Image], scope: DomainScope, rng: &mut ChaCha8Rng) -> (usize, &'a Image) {
    let i = match scope {
        DomainScope::Instance => 0,
        DomainScope::Domain => rng.random_range(0..images.len()),
    };
    (i, &images[i])
}

fn check_scope(images: &[Image], cfg: &AdaptConfig) -> Result<()> {
    if images.is_empty() {
        return Err(AscError::Data("adaptation scope holds no images".into()));
    }
    if cfg.domain_scope == DomainScope::Instance && images.len() != 1 {
        return Err(AscError::Config(format!(
            "instance scope needs exactly one image, got {}",
            images.len()
        )));
    }
    Ok(())
}

fn training_opts(cfg: &AdaptConfig, hyper: Rc<Vec<f64>>) -> PassOptions {
    PassOptions {
        weights: cfg.weights(),
        hyper: HyperMode::Noise(hyper),
        decoder_snr: cfg.decoder_snr,
    }
}

/// Mean objective over a scope at its held-out realizations, with model
/// rate `m` already in CBR units.
pub fn evaluate_scope<M: RdModel + ?Sized>(
    model: &M,
    images: &[Image],
    held: &HeldOut,
    cfg: &AdaptConfig,
    m: f64,
) -> Result<StepLog> {
    let mut r = 0.0;
    let mut d = 0.0;
    for (k, &i) in held.image.iter().enumerate() {
        let opts = training_opts(cfg, Rc::clone(&held.hyper[k]));
        let mut draw = held.draws[k].clone();
        let l = rd_loss(model, &images[i], &opts, &mut draw)?;
        r += l.r;
        d += l.d;
    }
    let n = held.image.len() as f64;
    let (r, d) = (r / n, d / n);
    Ok(StepLog {
        step: 0,
        r,
        m,
        d,
        loss: cfg.lambda * r + cfg.beta * m + d,
        psnr: psnr_from_mse(d),
    })
}

fn numbered(mut log: StepLog, step: usize) -> StepLog {
    log.step = step;
    log
}

/// Transmitter-model adaptation: gradient steps on `g_a` and `f_e` only,
/// with fresh hyper noise and a fresh channel draw every step.
pub fn tx_model_adapt<M: RdModel + Clone>(
    baseline: &M,
    images: &[Image],
    channel: &mut dyn ChannelSource,
    cfg: &AdaptConfig,
) -> Result<AdaptResult<M>> {
    cfg.validate()?;
    check_scope(images, cfg)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let held = HeldOut::draw(baseline, images, channel, &mut rng, cfg.held_out_draws)?;
    let initial = evaluate_scope(baseline, images, &held, cfg, 0.0)?;
    let mut model = baseline.clone();
    let lr = cfg.base_lr();
    let mut opt = Optimizer::new(cfg.optimizer, &[(Group::AnalysisG, lr), (Group::JsccEnc, lr)]);
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for t in 0..=cfg.steps {
        let (_, img) = pick(images, cfg.domain_scope, &mut rng);
        let opts = training_opts(cfg, hyper_noise(&model, img, &mut rng)?);
        let pass = rdm_pass(&model, img, &opts, None, channel)?;
        trajectory.push(numbered(pass.log, t));
        if t == cfg.steps {
            break;
        }
        let grads = pass.backward();
        opt.step_with(model.params_mut(), |i| grads.get(pass.leaves[i]));
    }
    let final_eval = evaluate_scope(&model, images, &held, cfg, 0.0)?;
    Ok(AdaptResult {
        model,
        code: None,
        trajectory,
        initial,
        final_eval,
        delta: None,
        stream: None,
        best_step: None,
        steps: cfg.steps,
        elapsed: start.elapsed(),
    })
}

/// Rate term, allocation and transmitted symbols for a fixed latent.
fn code_rate<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    y: &[f64],
    opts: &PassOptions,
    draw: &ChannelDraw,
) -> Result<(f64, f64, RateAllocation, Vec<f64>)> {
    let shape = model.latent_shape(img.height, img.width)?;
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let yv = g.leaf(shape.tokens, shape.channels, y.to_vec());
    let rp = rate_part(model, &mut g, &b, yv, img.dims(), opts)?;
    let (cqi, _) = link_snr(draw, &rp.alloc)?;
    let s = model.encode(&mut g, &b, yv, &rp.alloc, cqi, shape.grid)?;
    let r = opts.weights.eta_y * g.scalar(rp.r_y) + rp.r_z.map_or(0.0, |v| opts.weights.eta_z * g.scalar(v));
    Ok((g.scalar(rp.rate_term), r, rp.alloc, g.value(s).to_vec()))
}

/// Objective of transmitting fixed symbols `s` with a fixed rate term.
#[allow(clippy::too_many_arguments)]
fn code_pass<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    u: &[f64],
    alloc: &RateAllocation,
    rate_term: f64,
    r: f64,
    decoder_snr: DecoderSnr,
    channel: &mut dyn ChannelSource,
) -> Result<(Graph, Var, Var, StepLog)> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let uv = g.leaf(u.len(), 1, u.to_vec());
    let s = model.constrain_symbols(&mut g, uv)?;
    let draw = channel.draw(alloc.total_symbols)?;
    let (_, _, d, _, _) = receiver_part(model, &mut g, &b, img, s, alloc, &draw, decoder_snr)?;
    let rt = g.scalar_leaf(rate_term);
    let loss = g.add(rt, d);
    let dv = g.scalar(d);
    let log = StepLog {
        step: 0,
        r,
        m: 0.0,
        d: dv,
        loss: g.scalar(loss),
        psnr: psnr_from_mse(dv),
    };
    Ok((g, uv, loss, log))
}

/// Code adaptation: phase 1 optimizes the latent `y` for `y_steps`
/// (re-deriving the prior, allocation and symbols every step); phase 2
/// freezes `y*` and optimizes the power-constrained symbols for `s_steps`.
pub fn tx_code_adapt<M: RdModel + Clone>(
    baseline: &M,
    img: &Image,
    channel: &mut dyn ChannelSource,
    cfg: &AdaptConfig,
) -> Result<AdaptResult<M>> {
    cfg.validate()?;
    let start = Instant::now();
    let images = std::slice::from_ref(img);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let held = HeldOut::draw(baseline, images, channel, &mut rng, cfg.held_out_draws)?;
    let initial = evaluate_scope(baseline, images, &held, cfg, 0.0)?;
    let shape = baseline.latent_shape(img.height, img.width)?;
    let lr = cfg.base_lr();

    let mut y = {
        let mut g = Graph::new();
        let b = baseline.params().bind(&mut g);
        let x = image_leaf(&mut g, img);
        let yv = baseline.analysis(&mut g, &b, x, img.height, img.width)?;
        g.value(yv).to_vec()
    };
    let total = cfg.y_steps + cfg.s_steps;
    let mut trajectory = Vec::with_capacity(total + 1);
    let mut adam = VectorAdam::new(cfg.optimizer, lr, y.len());
    for t in 0..cfg.y_steps {
        let opts = training_opts(cfg, hyper_noise(baseline, img, &mut rng)?);
        let mut g = Graph::new();
        let b = baseline.params().bind(&mut g);
        let yv = g.leaf(shape.tokens, shape.channels, y.clone());
        let f = forward_from_y(baseline, &mut g, &b, img, yv, &opts, channel)?;
        trajectory.push(numbered(log_of(&g, opts.weights, f.r_y, f.r_z, f.distortion, 0.0, f.loss), t));
        let grads = g.backward(f.loss);
        let gy = grads.get_or_zeros(yv, y.len());
        adam.step(&mut y, &gy);
    }

    let opts = training_opts(cfg, hyper_noise(baseline, img, &mut rng)?);
    let first = channel.draw(max_symbols(baseline, img)?)?;
    let (rate_term, r, alloc, s0) = code_rate(baseline, img, &y, &opts, &first)?;
    let mut u = s0;
    let mut adam = VectorAdam::new(cfg.optimizer, lr, u.len());
    for t in cfg.y_steps..total {
        let (g, uv, loss, log) = code_pass(baseline, img, &u, &alloc, rate_term, r, cfg.decoder_snr, channel)?;
        trajectory.push(numbered(log, t));
        let grads = g.backward(loss);
        let gu = grads.get_or_zeros(uv, u.len());
        adam.step(&mut u, &gu);
    }
    let s = if cfg.s_steps > 0 {
        let mut g = Graph::new();
        let uv = g.leaf(u.len(), 1, u.clone());
        let sv = baseline.constrain_symbols(&mut g, uv)?;
        g.value(sv).to_vec()
    } else {
        u
    };
    let (_, _, _, last) = code_pass(baseline, img, &s, &alloc, rate_term, r, cfg.decoder_snr, channel)?;
    trajectory.push(numbered(last, total));

    let code = CodeState { y, s, alloc };
    let final_eval = evaluate_code(baseline, img, &code, &held, cfg)?;
    Ok(AdaptResult {
        model: baseline.clone(),
        code: Some(code),
        trajectory,
        initial,
        final_eval,
        delta: None,
        stream: None,
        best_step: None,
        steps: total,
        elapsed: start.elapsed(),
    })
}

/// Objective of an adapted code at the held-out realizations.
pub fn evaluate_code<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    code: &CodeState,
    held: &HeldOut,
    cfg: &AdaptConfig,
) -> Result<StepLog> {
    let (mut rt, mut r, mut d) = (0.0, 0.0, 0.0);
    for (hyper, draw) in held.hyper.iter().zip(&held.draws) {
        let opts = training_opts(cfg, Rc::clone(hyper));
        let (rate_term, rk, alloc, _) = code_rate(model, img, &code.y, &opts, draw)?;
        if alloc != code.alloc {
            log::debug!("held-out hyper noise changes the allocation; keeping the transmitted one");
        }
        let (_, _, _, log) =
            code_pass(model, img, &code.s, &code.alloc, rate_term, rk, cfg.decoder_snr, &mut draw.clone())?;
        rt += rate_term;
        r += rk;
        d += log.d;
    }
    let n = held.draws.len() as f64;
    let (rt, r, d) = (rt / n, r / n, d / n);
    Ok(StepLog {
        step: 0,
        r,
        m: 0.0,
        d,
        loss: rt + d,
        psnr: psnr_from_mse(d),
    })
}

/// Sends an adapted code over a fresh channel use and decodes it with the
/// unchanged receiver.
pub fn transmit_code<M: RdModel + ?Sized>(
    model: &M,
    img: &Image,
    code: &CodeState,
    decoder_snr: DecoderSnr,
    channel: &mut dyn ChannelSource,
) -> Result<Transmission> {
    let mut g = Graph::new();
    let b = model.params().bind(&mut g);
    let s = g.leaf(code.s.len(), 1, code.s.clone());
    let draw = channel.draw(code.alloc.total_symbols)?;
    let (_, x_hat, d, _, _) = receiver_part(model, &mut g, &b, img, s, &code.alloc, &draw, decoder_snr)?;
    let x_hat: Vec<f64> = g.value(x_hat).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mse = crate::metrics::mse(&img.data, &x_hat);
    Ok(Transmission {
        alloc: code.alloc.clone(),
        psnr: psnr_from_mse(mse),
        mse,
        x_hat,
        components: LossComponents {
            distortion: g.scalar(d),
            ..LossComponents::default()
        },
    })
}

fn quantized_model<M: RdModel + Clone>(model: &M, base: &M, cfg: &DeltaQuantConfig) -> Result<(M, QuantizedDelta)> {
    let qd = quantize(&receiver_delta(model.params(), base.params()), cfg).with_layout(receiver_layout(base.params()));
    let mut out = model.clone();
    apply_delta(out.params_mut(), base.params(), &qd, cfg)?;
    Ok((out, qd))
}

/// Full transceiver adaptation under the RDM objective. Receiver parameters
/// are updated through the straight-through quantizer; every `select_every`
/// steps (and at the end) the quantized model is scored on the held-out
/// realization and the best one is emitted as an entropy-coded update.
pub fn txrx_adapt<M: RdModel + Clone>(
    baseline: &M,
    images: &[Image],
    channel: &mut dyn ChannelSource,
    cfg: &AdaptConfig,
) -> Result<AdaptResult<M>> {
    cfg.validate()?;
    check_scope(images, cfg)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let held = HeldOut::draw(baseline, images, channel, &mut rng, cfg.held_out_draws)?;
    let dims: usize = images.iter().map(|i| i.dims()).sum();
    let n_recv = receiver_len(baseline.params());
    let model_rate = |bits: f64| cfg.delta.eta_delta * bits / dims as f64;
    // The unadapted receiver still has to be signalled, as an all-zero update.
    let zero_bits = (encode_stream(&QuantizedDelta::zeros(n_recv), &cfg.delta)?.len() * 8) as f64;
    let initial = evaluate_scope(baseline, images, &held, cfg, model_rate(zero_bits))?;

    let mut model = baseline.clone();
    let mut opt = Optimizer::new(
        cfg.optimizer,
        &[
            (Group::AnalysisG, cfg.lr_enc),
            (Group::JsccEnc, cfg.lr_enc),
            (Group::SynthesisG, cfg.lr_dec),
            (Group::JsccDec, cfg.lr_dec),
        ],
    );
    let half = 0.5 * cfg.delta.delta_bin;
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, usize, M, QuantizedDelta)> = None;
    for t in 0..=cfg.steps {
        if t % cfg.select_every == 0 || t == cfg.steps {
            let (qm, qd) = quantized_model(&model, baseline, &cfg.delta)?;
            let m = model_rate(ideal_bits(&qd, &cfg.delta));
            let score = evaluate_scope(&qm, images, &held, cfg, m)?.loss;
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, t, qm, qd));
            }
        }
        let (_, img) = pick(images, cfg.domain_scope, &mut rng);
        let opts = training_opts(cfg, hyper_noise(&model, img, &mut rng)?);
        let noise: Vec<f64> = (0..n_recv).map(|_| rng.random_range(-half..half)).collect();
        let term = DeltaTerm {
            base: baseline.params(),
            cfg: &cfg.delta,
            noise: Some(&noise),
            beta: cfg.beta,
            dims,
        };
        let pass = rdm_pass(&model, img, &opts, Some(&term), channel)?;
        trajectory.push(numbered(pass.log, t));
        if t == cfg.steps {
            break;
        }
        let grads = pass.backward();
        opt.step_with(model.params_mut(), |i| grads.get(pass.leaves[i]));
    }
    let (_, best_step, selected, qd) = best.expect("selection runs at step 0");

    let stream = encode_stream(&qd, &cfg.delta)?;
    let decoded = decode_stream(&stream, qd.len(), &cfg.delta)?;
    if decoded.indices != qd.indices {
        return Err(AscError::Consistency("model stream does not decode to the selected update".into()));
    }
    let mut rebuilt = selected.clone();
    apply_delta(rebuilt.params_mut(), baseline.params(), &decoded, &cfg.delta)?;
    let same = rebuilt
        .params()
        .params()
        .iter()
        .zip(selected.params().params())
        .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !same {
        return Err(AscError::Consistency(
            "receiver parameters rebuilt from the stream differ from the selected ones".into(),
        ));
    }
    let final_eval = evaluate_scope(&rebuilt, images, &held, cfg, model_rate((stream.len() * 8) as f64))?;
    Ok(AdaptResult {
        model: rebuilt,
        code: None,
        trajectory,
        initial,
        final_eval,
        delta: Some(decoded.with_layout(receiver_layout(baseline.params()))),
        stream: Some(stream),
        best_step: Some(best_step),
        steps: cfg.steps,
        elapsed: start.elapsed(),
    })
}

/// Dispatches on `cfg.mode`. `tx_code` adapts the first image only.
pub fn adapt<M: RdModel + Clone>(
    baseline: &M,
    images: &[Image],
    channel: &mut dyn ChannelSource,
    cfg: &AdaptConfig,
) -> Result<AdaptResult<M>> {
    match cfg.mode {
        AdaptMode::TxModel => tx_model_adapt(baseline, images, channel, cfg),
        AdaptMode::TxCode => {
            let img = images
                .first()
                .ok_or_else(|| AscError::Data("adaptation scope holds no images".into()))?;
            tx_code_adapt(baseline, img, channel, cfg)
        }
        AdaptMode::TxrxFull => txrx_adapt(baseline, images, channel, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::procedural_corpus;
    use crate::entropy_model::{normal_cdf, normal_pdf};
    use crate::model::{LinearToy, ModelConfig, NtsccModel};
    use crate::transforms::ArchConfig;

    fn small_model() -> NtsccModel {
        let cfg = ModelConfig {
            arch: ArchConfig {
                width: 8,
                channels: 8,
                hyper_channels: 4,
                ..ArchConfig::default()
            },
            ..ModelConfig::default()
        };
        NtsccModel::new(cfg, 11).unwrap()
    }

    fn img() -> Image {
        procedural_corpus(21, 1, 16, 16).remove(0)
    }

    fn awgn(seed: u64) -> (crate::channel::CsiSampler, ChaCha8Rng) {
        (
            crate::channel::CsiSampler::new(crate::channel::ChannelConfig::awgn(10.0)).unwrap(),
            ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn frozen_identical(a: &ParamSet, b: &ParamSet) -> bool {
        a.params()
            .iter()
            .zip(b.params())
            .filter(|(p, _)| matches!(p.group, Group::HyperA | Group::HyperS | Group::Prior))
            .all(|(p, q)| p.data == q.data)
    }

    fn bits_grad(y: f64) -> f64 {
        let p = normal_cdf(y + 0.5) - normal_cdf(y - 0.5);
        -(normal_pdf(y + 0.5) - normal_pdf(y - 0.5)) / (p * std::f64::consts::LN_2)
    }

    #[test]
    fn tx_model_single_step_matches_hand_gradient() {
        let (a, b) = (0.8, 1.1);
        let toy = LinearToy::new(a, b);
        let image = procedural_corpus(2, 1, 4, 4).remove(0);
        let mut cfg = AdaptConfig::new(AdaptMode::TxModel, 0.3);
        cfg.steps = 1;
        cfg.lr = Some(0.05);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.eta_y = 2.0;
        let mut channel = ChannelDraw::noiseless(image.dims());
        let res = tx_model_adapt(&toy, std::slice::from_ref(&image), &mut channel, &cfg).unwrap();
        let m = image.dims() as f64;
        let x = &image.data;
        let dmse: f64 = x.iter().map(|v| 2.0 * (a * b - 1.0) * b * v * v).sum::<f64>() / m;
        let drate: f64 = x.iter().map(|v| bits_grad(a * v) * v).sum::<f64>() / m;
        let grad = cfg.lambda * cfg.eta_y * drate + dmse;
        let new_a = res.model.params.get("toy.a").unwrap().data[0];
        assert!((new_a - (a - 0.05 * grad)).abs() < 1e-10, "{new_a} vs {}", a - 0.05 * grad);
        assert_eq!(res.model.params.get("toy.b").unwrap().data[0], b);
        assert_eq!(res.trajectory.len(), 2);
    }

    #[test]
    fn tx_code_phase_two_matches_hand_gradient() {
        let (a, b) = (0.9, 1.2);
        let toy = LinearToy::new(a, b);
        let image = procedural_corpus(4, 1, 3, 3).remove(0);
        let mut cfg = AdaptConfig::new(AdaptMode::TxCode, 0.5);
        cfg.y_steps = 0;
        cfg.s_steps = 1;
        cfg.lr = Some(0.1);
        cfg.optimizer = OptimizerKind::Sgd;
        let mut channel = ChannelDraw::noiseless(image.dims());
        let res = tx_code_adapt(&toy, &image, &mut channel, &cfg).unwrap();
        let m = image.dims() as f64;
        let code = res.code.unwrap();
        for (i, x) in image.data.iter().enumerate() {
            let s0 = a * x;
            let g = 2.0 * (b * s0 - x) * b / m;
            assert!((code.s[i] - (s0 - 0.1 * g)).abs() < 1e-12);
        }
        assert_eq!(res.trajectory.len(), 2);
    }

    #[test]
    fn zero_steps_and_zero_rate_leave_parameters_alone() {
        let model = small_model();
        let image = img();
        let (mut sampler, mut rng) = awgn(1);
        let mut ch = crate::model::SampledChannel {
            sampler: &mut sampler,
            rng: &mut rng,
        };
        let mut cfg = AdaptConfig::new(AdaptMode::TxModel, 0.05);
        cfg.steps = 0;
        let r = tx_model_adapt(&model, std::slice::from_ref(&image), &mut ch, &cfg).unwrap();
        assert_eq!(r.model, model);
        assert_eq!(r.trajectory.len(), 1);
        cfg.steps = 3;
        cfg.lr = Some(0.0);
        let r = tx_model_adapt(&model, std::slice::from_ref(&image), &mut ch, &cfg).unwrap();
        assert_eq!(r.model, model);
        assert_eq!(r.trajectory.len(), 4);
    }

    #[test]
    fn code_adapt_with_no_steps_returns_baseline_code() {
        let model = small_model();
        let image = img();
        let mut cfg = AdaptConfig::new(AdaptMode::TxCode, 0.05);
        cfg.y_steps = 0;
        cfg.s_steps = 0;
        let k = max_symbols(&model, &image).unwrap();
        let mut channel = ChannelDraw::noiseless(k);
        let r = tx_code_adapt(&model, &image, &mut channel, &cfg).unwrap();
        let code = r.code.unwrap();
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let x = image_leaf(&mut g, &image);
        let y = model.analysis(&mut g, &b, x, 16, 16).unwrap();
        assert_eq!(code.y, g.value(y));
        assert_eq!(r.trajectory.len(), 1);
        assert!((code.s.iter().map(|v| v * v).sum::<f64>() / code.s.len() as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rdm_components_recompose_and_reduce_to_rd() {
        let model = small_model();
        let image = img();
        let k = max_symbols(&model, &image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = PassOptions {
            weights: RdWeights {
                lambda: 0.07,
                eta_y: 1.3,
                eta_z: 0.8,
            },
            hyper: HyperMode::Noise(hyper_noise(&model, &image, &mut rng).unwrap()),
            decoder_snr: DecoderSnr::PerToken,
        };
        let mut draw = ChannelDraw {
            gains: vec![1.0; k],
            noise: crate::channel::sample_noise(k, 0.1, &mut rng),
            noise_var: 0.1,
        };
        let rd = rd_loss(&model, &image, &opts, &mut draw).unwrap();
        assert!((rd.loss - (0.07 * rd.r + rd.d)).abs() < 1e-9);

        let cfg = DeltaQuantConfig::default();
        let n = receiver_len(model.params());
        let noise = vec![0.0; n];
        let mut moved = model.clone();
        for p in moved.params_mut().params_mut() {
            if p.group.is_receiver() {
                p.data.iter_mut().enumerate().for_each(|(i, v)| *v += if i % 7 == 0 { 0.006 } else { 0.001 });
            }
        }
        for beta in [0.0, 2.5] {
            let term = DeltaTerm {
                base: model.params(),
                cfg: &cfg,
                noise: Some(&noise),
                beta,
                dims: image.dims(),
            };
            let l = rdm_loss(&moved, &image, &opts, &term, &mut draw).unwrap();
            assert!((l.loss - (0.07 * l.r + beta * l.m + l.d)).abs() < 1e-9);
            let (qm, qd) = quantized_model(&moved, &model, &cfg).unwrap();
            assert!(qd.nonzero() > 0);
            let rq = rd_loss(&qm, &image, &opts, &mut draw).unwrap();
            assert!((l.loss - beta * l.m - rq.loss).abs() < 1e-12);
        }
        // At δ = 0 the model term is the zero-update floor.
        let term = DeltaTerm {
            base: model.params(),
            cfg: &cfg,
            noise: Some(&noise),
            beta: 1.0,
            dims: image.dims(),
        };
        let l = rdm_loss(&model, &image, &opts, &term, &mut draw).unwrap();
        let floor = cfg.eta_delta * n as f64 * crate::model_delta_codec::rate_proxy(&[0.0], &cfg) / image.dims() as f64;
        assert!((l.m - floor).abs() < 1e-12);
        assert!((l.loss - rd.loss - floor).abs() < 1e-9);
    }

    #[test]
    fn adaptation_keeps_entropy_model_frozen() {
        let model = small_model();
        let image = img();
        for mode in [AdaptMode::TxModel, AdaptMode::TxrxFull] {
            let (mut sampler, mut rng) = awgn(5);
            let mut ch = crate::model::SampledChannel {
                sampler: &mut sampler,
                rng: &mut rng,
            };
            let mut cfg = AdaptConfig::new(mode, 0.05);
            cfg.steps = 4;
            cfg.select_every = 2;
            cfg.lr_enc = 1e-3;
            cfg.lr_dec = 1e-2;
            let r = adapt(&model, std::slice::from_ref(&image), &mut ch, &cfg).unwrap();
            assert!(frozen_identical(r.model.params(), model.params()));
            assert_eq!(r.trajectory.len(), 5);
        }
    }

    #[test]
    fn txrx_with_no_steps_emits_zero_update() {
        let model = small_model();
        let image = img();
        let (mut sampler, mut rng) = awgn(8);
        let mut ch = crate::model::SampledChannel {
            sampler: &mut sampler,
            rng: &mut rng,
        };
        let mut cfg = AdaptConfig::new(AdaptMode::TxrxFull, 0.05);
        cfg.steps = 0;
        let r = txrx_adapt(&model, std::slice::from_ref(&image), &mut ch, &cfg).unwrap();
        let qd = r.delta.unwrap();
        assert_eq!(qd.nonzero(), 0);
        assert_eq!(qd.len(), receiver_len(model.params()));
        assert_eq!(r.model, model);
        assert!((r.final_eval.d - r.initial.d).abs() < 1e-15);
        assert_eq!(r.final_eval.loss, r.initial.loss);
        let bits = r.stream.unwrap().len() * 8;
        assert!((bits as f64) < 128.0 + 64.0 + qd.len() as f64 * 0.0054);
    }

    #[test]
    fn txrx_updates_round_trip_through_the_stream() {
        let model = small_model();
        let image = img();
        let (mut sampler, mut rng) = awgn(9);
        let mut ch = crate::model::SampledChannel {
            sampler: &mut sampler,
            rng: &mut rng,
        };
        let mut cfg = AdaptConfig::new(AdaptMode::TxrxFull, 0.05);
        cfg.steps = 40;
        cfg.select_every = 10;
        cfg.lr_dec = 2e-3;
        cfg.beta = 0.0;
        let r = txrx_adapt(&model, std::slice::from_ref(&image), &mut ch, &cfg).unwrap();
        let qd = r.delta.unwrap();
        let mut rebuilt = model.clone();
        let decoded = decode_stream(r.stream.as_ref().unwrap(), qd.len(), &cfg.delta).unwrap();
        apply_delta(rebuilt.params_mut(), model.params(), &decoded, &cfg.delta).unwrap();
        for (p, q) in rebuilt.params().params().iter().zip(r.model.params().params()) {
            if p.group.is_receiver() {
                assert_eq!(p.data, q.data);
            }
        }
        assert!(r.best_step.unwrap() % 10 == 0);
    }
}

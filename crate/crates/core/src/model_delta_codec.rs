//! Quantization, prior pricing and entropy coding of model updates.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::entropy_model::{normal_cdf, normal_pdf};
use crate::error::{AscError, Result};
use crate::range_coder::{FreqTable, RangeDecoder, RangeEncoder};

pub const STREAM_MAGIC: u8 = 0xD7;
pub const HEADER_BYTES: usize = 16;

/// Smallest mass fed to a logarithm by the relaxed rate.
const PROXY_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Gaussian,
    SpikeSlab,
}

impl PriorKind {
    fn code(self) -> u8 {
        match self {
            PriorKind::Gaussian => 0,
            PriorKind::SpikeSlab => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PriorKind::Gaussian),
            1 => Some(PriorKind::SpikeSlab),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaQuantConfig {
    #[serde(default = "default_delta_bin")]
    pub delta_bin: f64,
    #[serde(default = "default_num_bins")]
    pub num_bins: usize,
    #[serde(default = "default_prior_kind")]
    pub prior_kind: PriorKind,
    #[serde(default = "default_slab_sigma")]
    pub slab_sigma: f64,
    #[serde(default = "default_spike_weight")]
    pub spike_weight: f64,
    /// Scales model bits into the CBR domain. Defaults to 1/C with C = 2.
    #[serde(default = "default_eta_delta")]
    pub eta_delta: f64,
}

fn default_delta_bin() -> f64 {
    0.005
}
fn default_num_bins() -> usize {
    41
}
fn default_prior_kind() -> PriorKind {
    PriorKind::SpikeSlab
}
fn default_slab_sigma() -> f64 {
    0.05
}
fn default_spike_weight() -> f64 {
    1000.0
}
fn default_eta_delta() -> f64 {
    0.5
}

impl Default for DeltaQuantConfig {
    fn default() -> Self {
        Self {
            delta_bin: default_delta_bin(),
            num_bins: default_num_bins(),
            prior_kind: default_prior_kind(),
            slab_sigma: default_slab_sigma(),
            spike_weight: default_spike_weight(),
            eta_delta: default_eta_delta(),
        }
    }
}

impl DeltaQuantConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AscError::Config(m));
        if !(self.delta_bin > 0.0 && self.delta_bin.is_finite()) {
            return bad(format!("delta_bin must be positive, got {}", self.delta_bin));
        }
        if self.num_bins < 3 || self.num_bins % 2 == 0 || self.num_bins > u16::MAX as usize {
            return bad(format!("num_bins must be odd and in [3, 65535], got {}", self.num_bins));
        }
        if !(self.slab_sigma > 0.0 && self.slab_sigma.is_finite()) {
            return bad(format!("slab_sigma must be positive, got {}", self.slab_sigma));
        }
        if !(self.spike_weight >= 0.0 && self.spike_weight.is_finite()) {
            return bad(format!("spike_weight must be non-negative, got {}", self.spike_weight));
        }
        if !(self.eta_delta > 0.0 && self.eta_delta.is_finite()) {
            return bad(format!("eta_delta must be positive, got {}", self.eta_delta));
        }
        Ok(())
    }

    pub fn spike_sigma(&self) -> f64 {
        self.delta_bin / 6.0
    }

    /// Largest bin index magnitude, (N - 1) / 2.
    pub fn half_range(&self) -> i32 {
        (self.num_bins as i32 - 1) / 2
    }

    /// Clip bound (N - 1) Δ / 2.
    pub fn clip(&self) -> f64 {
        self.half_range() as f64 * self.delta_bin
    }

    /// Mixture components as `(weight, sigma)`.
    fn components(&self) -> Vec<(f64, f64)> {
        match self.prior_kind {
            PriorKind::Gaussian => vec![(1.0, self.slab_sigma)],
            PriorKind::SpikeSlab => {
                let z = 1.0 + self.spike_weight;
                vec![(1.0 / z, self.slab_sigma), (self.spike_weight / z, self.spike_sigma())]
            }
        }
    }
}

/// A quantized update: integer bin indices plus the layout of the parameter
/// tensors they were flattened from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedDelta {
    pub indices: Vec<i32>,
    pub layout: Vec<(String, usize)>,
}

impl QuantizedDelta {
    pub fn zeros(n: usize) -> Self {
        Self {
            indices: vec![0; n],
            layout: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn values(&self, cfg: &DeltaQuantConfig) -> Vec<f64> {
        self.indices.iter().map(|k| *k as f64 * cfg.delta_bin).collect()
    }

    pub fn nonzero(&self) -> usize {
        self.indices.iter().filter(|k| **k != 0).count()
    }

    pub fn with_layout(mut self, layout: Vec<(String, usize)>) -> Self {
        self.layout = layout;
        self
    }
}

pub fn quantize_index(d: f64, cfg: &DeltaQuantConfig) -> i32 {
    let h = cfg.half_range() as f64;
    (d / cfg.delta_bin).round().clamp(-h, h) as i32
}

/// Round to the nearest bin, then clip to ±(N - 1) Δ / 2.
pub fn quantize(delta: &[f64], cfg: &DeltaQuantConfig) -> QuantizedDelta {
    QuantizedDelta {
        indices: delta.iter().map(|d| quantize_index(*d, cfg)).collect(),
        layout: Vec::new(),
    }
}

/// Straight-through quantizer on the tape. The forward value is the quantized
/// delta; the backward pass is the identity where |δ| is inside the clip
/// range and zero where the clip is active.
pub fn quantize_ste(g: &mut Graph, delta: Var, cfg: &DeltaQuantConfig) -> Var {
    let clip = cfg.clip();
    g.map(delta, |d| {
        let q = quantize_index(d, cfg) as f64 * cfg.delta_bin;
        (q, if d.abs() <= clip { 1.0 } else { 0.0 })
    })
}

/// Mass of a centered Gaussian over `[x - h, x + h]`, evaluated on the side
/// nearer the mean.
fn interval_mass(x: f64, h: f64, sigma: f64) -> f64 {
    let d = x.abs();
    normal_cdf((h - d) / sigma) - normal_cdf((-h - d) / sigma)
}

/// Mass beyond `t >= 0` on one side.
fn upper_tail(t: f64, sigma: f64) -> f64 {
    normal_cdf(-t / sigma)
}

/// Discrete prior mass of bin `k`, with the tail beyond the outermost bins
/// folded into the edge bins.
pub fn bin_mass(k: i32, cfg: &DeltaQuantConfig) -> f64 {
    let h = cfg.half_range();
    let delta = cfg.delta_bin;
    cfg.components()
        .iter()
        .map(|(w, s)| {
            let m = if k.abs() == h {
                upper_tail((h as f64 - 0.5) * delta, *s)
            } else {
                interval_mass(k as f64 * delta, 0.5 * delta, *s)
            };
            w * m
        })
        .sum()
}

/// Prior mass of the bin containing `value` after quantization.
pub fn prior_mass(value: f64, cfg: &DeltaQuantConfig) -> f64 {
    bin_mass(quantize_index(value, cfg), cfg)
}

/// The full pmf over bin indices `-(N-1)/2 ..= (N-1)/2`.
pub fn pmf(cfg: &DeltaQuantConfig) -> Vec<f64> {
    let h = cfg.half_range();
    (-h..=h).map(|k| bin_mass(k, cfg)).collect()
}

/// Ideal code length of `qd` in bits under the discrete prior.
pub fn ideal_bits(qd: &QuantizedDelta, cfg: &DeltaQuantConfig) -> f64 {
    let h = cfg.half_range();
    let table: Vec<f64> = pmf(cfg).iter().map(|p| -p.log2()).collect();
    qd.indices.iter().map(|k| table[(k + h) as usize]).sum()
}

/// Relaxed mass `P(δ̃)` over `[δ̃ - Δ/2, δ̃ + Δ/2]` and its derivative.
fn relaxed_mass(x: f64, cfg: &DeltaQuantConfig) -> (f64, f64) {
    let h = 0.5 * cfg.delta_bin;
    let mut m = 0.0;
    let mut dm = 0.0;
    for (w, s) in cfg.components() {
        m += w * interval_mass(x, h, s);
        dm += w * (normal_pdf((x + h) / s) - normal_pdf((x - h) / s)) / s;
    }
    (m, dm)
}

/// Σ −log2 P(δ̃_i) over a plain slice.
pub fn rate_proxy(delta_noisy: &[f64], cfg: &DeltaQuantConfig) -> f64 {
    delta_noisy
        .iter()
        .map(|x| -relaxed_mass(*x, cfg).0.max(PROXY_FLOOR).log2())
        .sum()
}

/// Tape version of [`rate_proxy`]: per-element bits, differentiable in δ̃.
pub fn rate_proxy_bits(g: &mut Graph, delta_noisy: Var, cfg: &DeltaQuantConfig) -> Var {
    g.map(delta_noisy, |x| {
        let (m, dm) = relaxed_mass(x, cfg);
        if m <= PROXY_FLOOR {
            (-PROXY_FLOOR.log2(), 0.0)
        } else {
            (-m.log2(), -dm / (m * LN_2))
        }
    })
}

fn header(cfg: &DeltaQuantConfig) -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[0] = STREAM_MAGIC;
    h[1] = cfg.prior_kind.code();
    h[2..4].copy_from_slice(&(cfg.num_bins as u16).to_le_bytes());
    h[4..8].copy_from_slice(&(cfg.delta_bin as f32).to_le_bytes());
    h[8..12].copy_from_slice(&(cfg.spike_weight as f32).to_le_bytes());
    h[12..16].copy_from_slice(&(cfg.slab_sigma as f32).to_le_bytes());
    h
}

fn table(cfg: &DeltaQuantConfig) -> Result<FreqTable> {
    FreqTable::from_probabilities(&pmf(cfg))
}

/// Header followed by the range-coded bin indices.
pub fn encode_stream(qd: &QuantizedDelta, cfg: &DeltaQuantConfig) -> Result<Vec<u8>> {
    cfg.validate()?;
    let h = cfg.half_range();
    let t = table(cfg)?;
    let mut enc = RangeEncoder::new();
    for (i, k) in qd.indices.iter().enumerate() {
        if k.abs() > h {
            return Err(AscError::Config(format!("index {k} at position {i} outside ±{h}")));
        }
        enc.encode(&t, (k + h) as usize);
    }
    let mut out = header(cfg).to_vec();
    out.extend(enc.finish());
    Ok(out)
}

/// Decodes exactly `count` indices. The embedded header must match `cfg` and
/// the payload must be consumed exactly.
pub fn decode_stream(bytes: &[u8], count: usize, cfg: &DeltaQuantConfig) -> Result<QuantizedDelta> {
    cfg.validate()?;
    if bytes.len() < HEADER_BYTES {
        return Err(AscError::Decode(format!("stream of {} bytes has no header", bytes.len())));
    }
    let (head, payload) = bytes.split_at(HEADER_BYTES);
    if head[0] != STREAM_MAGIC {
        return Err(AscError::Decode(format!("bad magic byte {:#04x}", head[0])));
    }
    if PriorKind::from_code(head[1]).is_none() {
        return Err(AscError::Decode(format!("unknown prior kind {}", head[1])));
    }
    if head != header(cfg) {
        return Err(AscError::Decode("stream header does not match the decoder configuration".into()));
    }
    let h = cfg.half_range();
    let t = table(cfg)?;
    let mut dec = RangeDecoder::new(payload)?;
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        indices.push(dec.decode(&t)? as i32 - h);
    }
    dec.finish()?;
    Ok(QuantizedDelta {
        indices,
        layout: Vec::new(),
    })
}

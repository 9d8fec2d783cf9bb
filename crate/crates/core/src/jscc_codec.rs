//! Variable-rate deep JSCC encoder f_e and decoder f_d with per-rate heads,
//! rate tokens, power normalization and the SNR-conditioned ModNet.

use std::collections::HashMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::entropy_model::{validate_value_set, RateAllocation};
use crate::error::{AscError, Result};
use crate::nn::{add_linear, add_res_block, identity, init_matrix, linear, res_block, Bound, Group, ParamSet};
use crate::transforms::rms_normalize_eps;

/// FC layers in the ModNet stack; SM modules sit between consecutive layers.
pub const MODNET_FC: usize = 8;
pub const MODNET_SM: usize = MODNET_FC - 1;

/// Initial SM output bias; sigmoid(2) keeps the gates near 0.88.
const SM_BIAS_INIT: f64 = 2.0;

/// SNR values fed to the ModNet are clamped to this range (dB).
pub const SNR_CLAMP_DB: (f64, f64) = (-20.0, 60.0);

fn default_values() -> Vec<usize> {
    vec![2, 4, 8, 16]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsccConfig {
    /// Bandwidth value set V (symbols per token), ascending, `2^q` entries.
    #[serde(default = "default_values")]
    pub values: Vec<usize>,
    /// Enables the SNR-conditioned ModNet on both sides.
    #[serde(default)]
    pub modnet: bool,
}

impl Default for JsccConfig {
    fn default() -> Self {
        Self {
            values: default_values(),
            modnet: false,
        }
    }
}

/// Which SNR the decoder ModNet is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderSnr {
    #[default]
    PerToken,
    Cqi,
}

impl JsccConfig {
    pub fn validate(&self) -> Result<usize> {
        validate_value_set(&self.values)
    }

    pub fn q(&self) -> usize {
        self.values.len().trailing_zeros() as usize
    }

    /// Registers phi_f and theta_f for token width `c`.
    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng, c: usize) {
        let nv = self.values.len();
        ps.add("fe.rate", Group::JsccEnc, nv, c, init_matrix(rng, nv, c, 0.1));
        add_res_block(ps, rng, "fe.r1", Group::JsccEnc, c);
        add_res_block(ps, rng, "fe.r2", Group::JsccEnc, c);
        if self.modnet {
            register_modnet(ps, rng, "fe.mod", Group::JsccEnc, c);
        }
        for v in &self.values {
            add_linear(ps, rng, &format!("fe.head{v}"), Group::JsccEnc, c, *v, 1.0);
        }

        for v in &self.values {
            add_linear(ps, rng, &format!("fd.head{v}"), Group::JsccDec, *v, c, 1.0);
        }
        ps.add("fd.rate", Group::JsccDec, nv, c, init_matrix(rng, nv, c, 0.1));
        if self.modnet {
            register_modnet(ps, rng, "fd.mod", Group::JsccDec, c);
        }
        add_res_block(ps, rng, "fd.r1", Group::JsccDec, c);
        add_res_block(ps, rng, "fd.r2", Group::JsccDec, c);
    }

    fn value_index(&self, alloc: &RateAllocation) -> Result<Vec<usize>> {
        let pos: HashMap<usize, usize> = self.values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        alloc
            .k_bar
            .iter()
            .map(|k| {
                pos.get(k)
                    .copied()
                    .ok_or_else(|| AscError::Allocation(format!("bandwidth {k} is not in {:?}", self.values)))
            })
            .collect()
    }

    fn rate_tokens(&self, g: &mut Graph, table: Var, vidx: &[usize], c: usize) -> Var {
        let idx: Vec<u32> = vidx
            .iter()
            .flat_map(|&vi| (0..c).map(move |ch| (vi * c + ch) as u32))
            .collect();
        g.gather(table, Rc::new(idx), vidx.len(), c)
    }

    /// f_e: tokens `[l, c]` to unit-power symbols `[k, 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        y: Var,
        alloc: &RateAllocation,
        cqi_db: Option<f64>,
        grid: (usize, usize),
    ) -> Result<Var> {
        let (l, c) = g.shape(y);
        if alloc.tokens() != l || grid.0 * grid.1 != l {
            return Err(AscError::Allocation(format!(
                "allocation covers {} tokens, latent has {l}",
                alloc.tokens()
            )));
        }
        let vidx = self.value_index(alloc)?;
        let rt = self.rate_tokens(g, b.var("fe.rate"), &vidx, c);
        let mut h = g.add(y, rt);
        h = res_block(g, b, "fe.r1", h, grid.0, grid.1);
        h = res_block(g, b, "fe.r2", h, grid.0, grid.1);
        if self.modnet {
            let cqi = cqi_db.ok_or_else(|| AscError::Config("ModNet encoder requires a CQI value".into()))?;
            h = modnet(g, b, "fe.mod", h, &vec![cqi; l]);
        }

        let mut parts = Vec::new();
        let mut part_offset = HashMap::new();
        let mut offset = 0;
        for v in &self.values {
            let members: Vec<usize> = (0..l).filter(|&i| alloc.k_bar[i] == *v).collect();
            if members.is_empty() {
                continue;
            }
            let idx: Vec<u32> = members
                .iter()
                .flat_map(|&i| (0..c).map(move |ch| (i * c + ch) as u32))
                .collect();
            let rows = g.gather(h, Rc::new(idx), members.len(), c);
            parts.push(linear(g, b, &format!("fe.head{v}"), rows));
            for (rank, &i) in members.iter().enumerate() {
                part_offset.insert(i, offset + rank * v);
            }
            offset += members.len() * v;
        }
        let flat = g.concat(&parts, offset, 1);
        let order: Vec<u32> = (0..l)
            .flat_map(|i| {
                let start = part_offset[&i];
                (0..alloc.k_bar[i]).map(move |j| (start + j) as u32)
            })
            .collect();
        let s = g.gather(flat, Rc::new(order), alloc.total_symbols, 1);
        power_normalize(g, s)
    }

    /// f_d: received (equalized) symbols `[k, 1]` to tokens `[l, c]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        s_hat: Var,
        alloc: &RateAllocation,
        snr_db: &[f64],
        c: usize,
        grid: (usize, usize),
    ) -> Result<Var> {
        let l = alloc.tokens();
        if g.value(s_hat).len() != alloc.total_symbols || grid.0 * grid.1 != l {
            return Err(AscError::Dimension(format!(
                "received {} symbols, allocation spans {}",
                g.value(s_hat).len(),
                alloc.total_symbols
            )));
        }
        if self.modnet && snr_db.len() != l {
            return Err(AscError::Dimension(format!(
                "{} SNR values for {l} tokens",
                snr_db.len()
            )));
        }
        let vidx = self.value_index(alloc)?;
        let spans = alloc.spans();
        let mut parts = Vec::new();
        let mut token_row = vec![0usize; l];
        let mut row = 0;
        for v in &self.values {
            let members: Vec<usize> = (0..l).filter(|&i| alloc.k_bar[i] == *v).collect();
            if members.is_empty() {
                continue;
            }
            let idx: Vec<u32> = members
                .iter()
                .flat_map(|&i| spans[i].clone().map(|j| j as u32))
                .collect();
            let sym = g.gather(s_hat, Rc::new(idx), members.len(), *v);
            parts.push(linear(g, b, &format!("fd.head{v}"), sym));
            for &i in &members {
                token_row[i] = row;
                row += 1;
            }
        }
        let stacked = g.concat(&parts, l, c);
        let order: Vec<u32> = (0..l)
            .flat_map(|i| {
                let r = token_row[i];
                (0..c).map(move |ch| (r * c + ch) as u32)
            })
            .collect();
        let mut h = g.gather(stacked, Rc::new(order), l, c);
        let rt = self.rate_tokens(g, b.var("fd.rate"), &vidx, c);
        h = g.add(h, rt);
        if self.modnet {
            h = modnet(g, b, "fd.mod", h, snr_db);
        }
        h = res_block(g, b, "fd.r1", h, grid.0, grid.1);
        Ok(res_block(g, b, "fd.r2", h, grid.0, grid.1))
    }
}

/// Registers the 8 FC layers and 7 SM modules of one ModNet at width `n`.
/// Initialised so the whole stack starts close to the identity map.
pub fn register_modnet(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, group: Group, n: usize) {
    let gate = crate::autodiff::sigmoid(SM_BIAS_INIT);
    for k in 0..MODNET_FC {
        let scale = if k == MODNET_FC - 1 { gate.powi(-(MODNET_SM as i32)) } else { 1.0 };
        ps.add(&format!("{prefix}.fc{k}.w"), group, n, n, identity(n, scale));
        ps.add(&format!("{prefix}.fc{k}.b"), group, 1, n, vec![0.0; n]);
    }
    for k in 0..MODNET_SM {
        add_linear(ps, rng, &format!("{prefix}.sm{k}.l1"), group, 1, n, 1.0);
        add_linear(ps, rng, &format!("{prefix}.sm{k}.l2"), group, n, n, 1.0);
        add_linear(ps, rng, &format!("{prefix}.sm{k}.l3"), group, n, n, 0.1);
        if let Some(b) = ps.get_mut(&format!("{prefix}.sm{k}.l3.b")) {
            b.data.iter_mut().for_each(|v| *v = SM_BIAS_INIT);
        }
    }
}

/// Standardized SNR input `(snr - 10) / 10` after clamping.
pub fn standardize_snr(snr_db: f64) -> f64 {
    let s = if snr_db.is_nan() { SNR_CLAMP_DB.0 } else { snr_db.clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1) };
    (s - 10.0) / 10.0
}

/// `Sigmoid(W3 ReLU(W2 ReLU(W1 snr + b1) + b2) + b3)` per token: `[l, n]`.
pub fn sm_mask(g: &mut Graph, b: &Bound, prefix: &str, snr: Var) -> Var {
    let t = linear(g, b, &format!("{prefix}.l1"), snr);
    let t = g.relu(t);
    let t = linear(g, b, &format!("{prefix}.l2"), t);
    let t = g.relu(t);
    let t = linear(g, b, &format!("{prefix}.l3"), t);
    g.sigmoid(t)
}

/// `feature * sm`, one SM module applied to `[l, n]` features.
pub fn sm_modulate(g: &mut Graph, b: &Bound, prefix: &str, feature: Var, snr: Var) -> Var {
    let sm = sm_mask(g, b, prefix, snr);
    g.mul(feature, sm)
}

/// The ModNet stack: FC, then SM-gated FC layers, conditioned per token.
pub fn modnet(g: &mut Graph, b: &Bound, prefix: &str, h: Var, snr_db: &[f64]) -> Var {
    let u: Vec<f64> = snr_db.iter().map(|s| standardize_snr(*s)).collect();
    let snr = g.leaf(u.len(), 1, u);
    let mut x = linear(g, b, &format!("{prefix}.fc0"), h);
    for k in 0..MODNET_SM {
        x = sm_modulate(g, b, &format!("{prefix}.sm{k}"), x, snr);
        x = linear(g, b, &format!("{prefix}.fc{}", k + 1), x);
    }
    x
}

/// `s * sqrt(k / sum s^2)`; all-zero input is rejected.
pub fn power_normalize(g: &mut Graph, s: Var) -> Result<Var> {
    rms_normalize_eps(g, s, 1.0, 0.0)
}

/// Plain-vector power normalization.
pub fn power_normalize_vec(s: &[f64]) -> Result<Vec<f64>> {
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if s.is_empty() || !(ss > 0.0) || !ss.is_finite() {
        return Err(AscError::DegenerateInput("cannot power-normalize an all-zero vector".into()));
    }
    let k = (s.len() as f64 / ss).sqrt();
    Ok(s.iter().map(|v| v * k).collect())
}

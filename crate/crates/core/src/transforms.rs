//! Analysis / synthesis transforms g_a, g_s and hyper transforms h_a, h_s.
//!
//! Images travel through the tape as `[h*w, 3]` matrices, latents as
//! `[l, c]` token matrices in raster order over the `(h/p) x (w/p)` grid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomBackward, Graph, Var};
use crate::entropy_model::SIGMA_MIN;
use crate::error::{AscError, Result};
use crate::nn::{add_linear, add_res_block, depth_to_space, linear, res_block, space_to_depth, Bound, Group, ParamSet};

/// First-stage downsampling factor; the second stage covers `p / 4`.
const STAGE1: usize = 4;

fn default_patch() -> usize {
    8
}
fn default_channels() -> usize {
    32
}
fn default_width() -> usize {
    24
}
fn default_hyper_channels() -> usize {
    8
}
fn default_latent_rms() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Patch size p: one token per `p x p` pixel block.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Latent channels c per token.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Feature width of the first (finer) stage.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hyper-latent channels per token.
    #[serde(default = "default_hyper_channels")]
    pub hyper_channels: usize,
    /// Root-mean-square the analysis output is normalized to.
    #[serde(default = "default_latent_rms")]
    pub latent_rms: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            patch: default_patch(),
            channels: default_channels(),
            width: default_width(),
            hyper_channels: default_hyper_channels(),
            latent_rms: default_latent_rms(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < STAGE1 || self.patch % STAGE1 != 0 {
            return Err(AscError::Config(format!(
                "patch size must be a positive multiple of {STAGE1}, got {}",
                self.patch
            )));
        }
        if self.channels == 0 || self.width == 0 || self.hyper_channels == 0 {
            return Err(AscError::Config("layer widths must be positive".into()));
        }
        if !(self.latent_rms > 0.0) {
            return Err(AscError::Config("latent_rms must be positive".into()));
        }
        Ok(())
    }

    /// Token grid for an `h x w` image.
    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(AscError::Shape(format!(
                "image {h}x{w} is not divisible by patch size {}",
                self.patch
            )));
        }
        Ok((h / self.patch, w / self.patch))
    }

    fn stage2(&self) -> usize {
        self.patch / STAGE1
    }

    /// Registers phi_g, theta_g, phi_h and theta_h.
    pub fn register(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let (c, w, cz) = (self.channels, self.width, self.hyper_channels);
        let f2 = self.stage2() * self.stage2();
        let px = 3 * STAGE1 * STAGE1;

        add_linear(ps, rng, "ga.in", Group::AnalysisG, px, w, 1.0);
        add_res_block(ps, rng, "ga.r1", Group::AnalysisG, w);
        add_linear(ps, rng, "ga.down", Group::AnalysisG, f2 * w, c, 1.0);
        add_res_block(ps, rng, "ga.r2", Group::AnalysisG, c);
        add_linear(ps, rng, "ga.out", Group::AnalysisG, c, c, 1.0);

        add_linear(ps, rng, "gs.in", Group::SynthesisG, c, c, 1.0);
        add_res_block(ps, rng, "gs.r2", Group::SynthesisG, c);
        add_linear(ps, rng, "gs.up", Group::SynthesisG, c, f2 * w, 1.0);
        add_res_block(ps, rng, "gs.r1", Group::SynthesisG, w);
        add_linear(ps, rng, "gs.out", Group::SynthesisG, w, px, 0.3);
        if let Some(b) = ps.get_mut("gs.out.b") {
            b.data.iter_mut().for_each(|v| *v = 0.5);
        }

        add_linear(ps, rng, "ha.l1", Group::HyperA, c, c, 1.0);
        add_linear(ps, rng, "ha.l2", Group::HyperA, c, cz, 1.0);

        add_linear(ps, rng, "hs.l1", Group::HyperS, cz, c, 1.0);
        add_linear(ps, rng, "hs.mu", Group::HyperS, c, c, 0.5);
        add_linear(ps, rng, "hs.sigma", Group::HyperS, c, c, 0.5);
    }

    /// g_a: image `[h*w, 3]` to tokens `[l, c]`.
    pub fn analysis(&self, g: &mut Graph, b: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let (gh, gw) = self.token_grid(h, w)?;
        if g.shape(x) != (h * w, 3) {
            return Err(AscError::Shape(format!("image tensor shape {:?} is not [{}, 3]", g.shape(x), h * w)));
        }
        let (h1, w1) = (h / STAGE1, w / STAGE1);
        let t = space_to_depth(g, x, h, w, 3, STAGE1);
        let t = linear(g, b, "ga.in", t);
        let t = res_block(g, b, "ga.r1", t, h1, w1);
        let t = space_to_depth(g, t, h1, w1, self.width, self.stage2());
        let t = linear(g, b, "ga.down", t);
        let t = res_block(g, b, "ga.r2", t, gh, gw);
        let t = linear(g, b, "ga.out", t);
        rms_normalize(g, t, self.latent_rms)
    }

    /// g_s: tokens `[l, c]` to image `[h*w, 3]` (unclamped).
    pub fn synthesis(&self, g: &mut Graph, b: &Bound, y_hat: Var, h: usize, w: usize) -> Result<Var> {
        let (gh, gw) = self.token_grid(h, w)?;
        if g.shape(y_hat) != (gh * gw, self.channels) {
            return Err(AscError::Shape(format!(
                "latent shape {:?} does not match [{}, {}]",
                g.shape(y_hat),
                gh * gw,
                self.channels
            )));
        }
        let (h1, w1) = (h / STAGE1, w / STAGE1);
        let t = linear(g, b, "gs.in", y_hat);
        let t = res_block(g, b, "gs.r2", t, gh, gw);
        let t = linear(g, b, "gs.up", t);
        let t = depth_to_space(g, t, h1, w1, self.width, self.stage2());
        let t = res_block(g, b, "gs.r1", t, h1, w1);
        let t = linear(g, b, "gs.out", t);
        Ok(depth_to_space(g, t, h, w, 3, STAGE1))
    }

    /// h_a: tokens to hyper latent `[l, cz]`.
    pub fn hyper_analysis(&self, g: &mut Graph, b: &Bound, y: Var) -> Var {
        let t = linear(g, b, "ha.l1", y);
        let t = g.gelu(t);
        linear(g, b, "ha.l2", t)
    }

    /// h_s: hyper latent to `(mu, sigma)`, with `sigma >= SIGMA_MIN`.
    pub fn hyper_synthesis(&self, g: &mut Graph, b: &Bound, z: Var) -> (Var, Var) {
        let t = linear(g, b, "hs.l1", z);
        let t = g.gelu(t);
        let mu = linear(g, b, "hs.mu", t);
        let s = linear(g, b, "hs.sigma", t);
        let s = g.softplus(s);
        let n = g.value(s).len();
        let sigma = g.add_const(s, &vec![SIGMA_MIN; n]);
        (mu, sigma)
    }
}

struct RmsRule {
    target: f64,
    rms: f64,
}

impl CustomBackward for RmsRule {
    fn backward(&self, _inputs: &[&[f64]], output: &[f64], out_grad: &[f64]) -> Vec<Vec<f64>> {
        let n = output.len() as f64;
        let dot: f64 = output.iter().zip(out_grad).map(|(o, g)| o * g).sum();
        let k = self.target / self.rms;
        let c = dot / (n * self.target * self.target);
        vec![output.iter().zip(out_grad).map(|(o, g)| k * (g - o * c)).collect()]
    }
}

/// `x * target / sqrt(mean(x^2) + eps)`.
pub fn rms_normalize(g: &mut Graph, x: Var, target: f64) -> Result<Var> {
    rms_normalize_eps(g, x, target, RMS_EPS)
}

const RMS_EPS: f64 = 1e-8;

/// As [`rms_normalize`] with an explicit stabilizer; `eps = 0` gives an
/// exact rescaling and rejects all-zero input.
pub fn rms_normalize_eps(g: &mut Graph, x: Var, target: f64, eps: f64) -> Result<Var> {
    let v = g.value(x);
    let n = v.len();
    let ss: f64 = v.iter().map(|a| a * a).sum();
    if n == 0 || !ss.is_finite() || (eps == 0.0 && ss == 0.0) {
        return Err(AscError::DegenerateInput("cannot normalize an all-zero or non-finite vector".into()));
    }
    let rms = (ss / n as f64 + eps).sqrt();
    let k = target / rms;
    let value: Vec<f64> = v.iter().map(|a| a * k).collect();
    let (r, c) = g.shape(x);
    Ok(g.custom(&[x], r, c, value, Box::new(RmsRule { target, rms })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rms_normalize_gradient_matches_finite_differences() {
        let x0 = vec![0.3, -1.2, 0.8, 2.0, -0.1];
        let w = std::rc::Rc::new(vec![0.5, -1.0, 2.0, 0.3, 1.1]);
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.leaf(5, 1, x.to_vec());
            let n = rms_normalize(&mut g, v, 1.7).unwrap();
            let p = g.mul_const(n, w.clone());
            let q = g.mul(p, p);
            let s = g.sum(q);
            let grads = g.backward(s);
            (g.scalar(s), grads.get_or_zeros(v, 5))
        };
        let (_, grad) = f(&x0);
        for i in 0..5 {
            let mut a = x0.clone();
            let mut b = x0.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a).0 - f(&b).0) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn analysis_rejects_indivisible_images() {
        let cfg = ArchConfig::default();
        let mut ps = ParamSet::new();
        cfg.register(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = g.leaf(60 * 64, 3, vec![0.5; 60 * 64 * 3]);
        assert!(matches!(cfg.analysis(&mut g, &b, x, 60, 64), Err(AscError::Shape(_))));
    }

    #[test]
    fn sigma_respects_floor() {
        let cfg = ArchConfig::default();
        let mut ps = ParamSet::new();
        cfg.register(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let z = g.leaf(4, cfg.hyper_channels, (0..32).map(|i| (i as f64 - 16.0) * 3.0).collect());
        let (_, sigma) = cfg.hyper_synthesis(&mut g, &b, z);
        assert!(g.value(sigma).iter().all(|s| *s >= SIGMA_MIN));
    }
}

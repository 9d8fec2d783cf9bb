//! Latent prior and hyperprior rates, and entropy-guided bandwidth allocation.

use std::f64::consts::{LN_2, SQRT_2};
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, sigmoid, softplus, CustomBackward, Graph, Var};
use crate::error::{AscError, Result};
use crate::nn::{init_uniform, Group, ParamSet};

/// Lower bound on the latent scale.
pub const SIGMA_MIN: f64 = 0.11;

/// Probability floor used when taking logarithms of bin masses.
pub const MASS_FLOOR: f64 = 1e-9;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of `N(mu, sigma^2)` over `[y - 1/2, y + 1/2]`. Evaluated on the
/// lower side of the mean to avoid cancellation in the upper tail.
pub fn gaussian_bin_mass(y: f64, mu: f64, sigma: f64) -> f64 {
    let d = (y - mu).abs();
    normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma)
}

/// `(bits, d bits/dy, d bits/dmu, d bits/dsigma)` for one latent element.
pub fn gaussian_bits_with_grad(y: f64, mu: f64, sigma: f64) -> (f64, f64, f64, f64) {
    let p = gaussian_bin_mass(y, mu, sigma);
    if p <= MASS_FLOOR {
        return (-MASS_FLOOR.log2(), 0.0, 0.0, 0.0);
    }
    let u = (y - mu + 0.5) / sigma;
    let v = (y - mu - 0.5) / sigma;
    let (pu, pv) = (normal_pdf(u), normal_pdf(v));
    let k = 1.0 / (p * LN_2);
    let dy = -(pu - pv) / sigma * k;
    let ds = (pu * u - pv * v) / sigma * k;
    (-p.log2(), dy, -dy, ds)
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().find(|s| !(**s > 0.0)) {
        Some(s) => Err(AscError::Domain(format!("latent scale must be positive, got {s}"))),
        None => Ok(()),
    }
}

/// Per-token latent rate in bits for `l x c` tokens stored row-major.
pub fn latent_rate(y: &[f64], mu: &[f64], sigma: &[f64], c: usize) -> Result<Vec<f64>> {
    if y.len() != mu.len() || y.len() != sigma.len() || c == 0 || y.len() % c != 0 {
        return Err(AscError::Shape("latent and prior parameter shapes differ".into()));
    }
    check_sigma(sigma)?;
    Ok(y.chunks(c)
        .zip(mu.chunks(c))
        .zip(sigma.chunks(c))
        .map(|((yt, mt), st)| {
            yt.iter()
                .zip(mt)
                .zip(st)
                .map(|((y, m), s)| gaussian_bits_with_grad(*y, *m, *s).0)
                .sum()
        })
        .collect())
}

/// Elementwise latent bits on the tape, differentiable in `y`, `mu`, `sigma`.
pub fn gaussian_bits(g: &mut Graph, y: Var, mu: Var, sigma: Var) -> Var {
    let n = g.value(y).len();
    let mut value = Vec::with_capacity(n);
    let (mut dy, mut dm, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for ((a, m), s) in g.value(y).iter().zip(g.value(mu)).zip(g.value(sigma)) {
        let (b, gy, gm, gs) = gaussian_bits_with_grad(*a, *m, *s);
        value.push(b);
        dy.push(gy);
        dm.push(gm);
        ds.push(gs);
    }
    g.elementwise(&[y, mu, sigma], value, vec![dy, dm, ds])
}

/// A univariate density that can report its mass over unit-width bins.
pub trait UnitBinDensity {
    /// Mass over `[z - 1/2, z + 1/2]` for the given channel.
    fn bin_mass(&self, channel: usize, z: f64) -> f64;
    fn channels(&self) -> usize;
}

/// Hyperprior rate `sum_j -log2 (p * U(-1/2, 1/2))(z_j)` for `z` stored
/// row-major with `density.channels()` columns.
pub fn hyper_rate<D: UnitBinDensity + ?Sized>(z_tilde: &[f64], density: &D) -> Result<f64> {
    let c = density.channels();
    if c == 0 || z_tilde.len() % c != 0 {
        return Err(AscError::Shape(format!(
            "hyper latent of length {} is not a multiple of {c} channels",
            z_tilde.len()
        )));
    }
    Ok(z_tilde
        .iter()
        .enumerate()
        .map(|(i, z)| -density.bin_mass(i % c, *z).max(MASS_FLOOR).log2())
        .sum())
}

/// `z + U(-1/2, 1/2)`.
pub fn add_uniform_noise<R: Rng + ?Sized>(z: &[f64], rng: &mut R) -> Vec<f64> {
    z.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect()
}

/// Names of the eight per-channel tensors of the factorized prior.
pub const PRIOR_TENSORS: [&str; 8] = ["m0", "b0", "f0", "m1", "b1", "f1", "m2", "b2"];
const PRIOR_WIDTHS: [usize; 8] = [3, 3, 3, 9, 3, 3, 3, 1];

/// Non-parametric per-channel density built as a monotone cumulative
/// composition with filters 1 -> 3 -> 3 -> 1. Parameters are stored raw:
/// matrices go through softplus, gating factors through tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    channels: usize,
    tensors: [Vec<f64>; 8],
}

struct Layer0 {
    pre0: [f64; 3],
    h0: [f64; 3],
    pre1: [f64; 3],
    h1: [f64; 3],
}

impl FactorizedPrior {
    /// Standard initialisation; `init_scale` sets the initial density width.
    pub fn init(channels: usize, init_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let filters = [1usize, 3, 3, 1];
        let scale = init_scale.powf(1.0 / 3.0);
        let mut tensors: [Vec<f64>; 8] = Default::default();
        for (k, (mi, bi)) in [(0usize, 1usize), (3, 4), (6, 7)].into_iter().enumerate() {
            let m = inverse_softplus(1.0 / scale / filters[k + 1] as f64);
            tensors[mi] = vec![m; channels * PRIOR_WIDTHS[mi]];
            tensors[bi] = init_uniform(rng, channels * PRIOR_WIDTHS[bi], -0.5, 0.5);
        }
        tensors[2] = vec![0.0; channels * 3];
        tensors[5] = vec![0.0; channels * 3];
        Self { channels, tensors }
    }

    pub fn register(&self, ps: &mut ParamSet) {
        for (name, (t, w)) in PRIOR_TENSORS.iter().zip(self.tensors.iter().zip(PRIOR_WIDTHS)) {
            ps.add(&format!("prior.{name}"), Group::Prior, self.channels, w, t.clone());
        }
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let mut tensors: [Vec<f64>; 8] = Default::default();
        let mut channels = 0;
        for (i, name) in PRIOR_TENSORS.iter().enumerate() {
            let p = ps
                .get(&format!("prior.{name}"))
                .ok_or_else(|| AscError::Shape(format!("missing prior tensor {name}")))?;
            if p.cols != PRIOR_WIDTHS[i] {
                return Err(AscError::Shape(format!("prior tensor {name} has width {}", p.cols)));
            }
            channels = p.rows;
            tensors[i] = p.data.clone();
        }
        Ok(Self { channels, tensors })
    }

    fn view(&self) -> [&[f64]; 8] {
        std::array::from_fn(|i| self.tensors[i].as_slice())
    }

    /// Cumulative logit at `x` for channel `ch`.
    pub fn logit(&self, ch: usize, x: f64) -> f64 {
        logit_forward(&self.view(), ch, x).0
    }

    /// Density `d/dx sigmoid(logit(x))`, used by quadrature checks.
    pub fn density(&self, ch: usize, x: f64) -> f64 {
        let v = self.view();
        let (l, cache) = logit_forward(&v, ch, x);
        let mut sink: [Vec<f64>; 8] = std::array::from_fn(|i| vec![0.0; v[i].len()]);
        let dldx = logit_backward(&v, ch, x, &cache, 1.0, &mut sink);
        sigmoid(l) * sigmoid(-l) * dldx
    }
}

impl UnitBinDensity for FactorizedPrior {
    fn bin_mass(&self, channel: usize, z: f64) -> f64 {
        let v = self.view();
        unit_bin_likelihood(logit_forward(&v, channel, z + 0.5).0, logit_forward(&v, channel, z - 0.5).0)
    }

    fn channels(&self) -> usize {
        self.channels
    }
}

fn unit_bin_likelihood(upper: f64, lower: f64) -> f64 {
    let s = if upper + lower > 0.0 { -1.0 } else { 1.0 };
    (sigmoid(s * upper) - sigmoid(s * lower)).abs()
}

fn logit_forward(p: &[&[f64]; 8], ch: usize, x: f64) -> (f64, Layer0) {
    let mut c = Layer0 {
        pre0: [0.0; 3],
        h0: [0.0; 3],
        pre1: [0.0; 3],
        h1: [0.0; 3],
    };
    for j in 0..3 {
        c.pre0[j] = softplus(p[0][ch * 3 + j]) * x + p[1][ch * 3 + j];
        c.h0[j] = c.pre0[j] + p[2][ch * 3 + j].tanh() * c.pre0[j].tanh();
    }
    for i in 0..3 {
        let mut acc = p[4][ch * 3 + i];
        for j in 0..3 {
            acc += softplus(p[3][ch * 9 + i * 3 + j]) * c.h0[j];
        }
        c.pre1[i] = acc;
        c.h1[i] = acc + p[5][ch * 3 + i].tanh() * acc.tanh();
    }
    let mut out = p[7][ch];
    for j in 0..3 {
        out += softplus(p[6][ch * 3 + j]) * c.h1[j];
    }
    (out, c)
}

/// Accumulates parameter gradients of `dl * logit(x)` into `grads` and
/// returns `dl * d logit / dx`.
fn logit_backward(p: &[&[f64]; 8], ch: usize, x: f64, c: &Layer0, dl: f64, grads: &mut [Vec<f64>; 8]) -> f64 {
    grads[7][ch] += dl;
    let mut dh1 = [0.0; 3];
    for j in 0..3 {
        let m = p[6][ch * 3 + j];
        dh1[j] = dl * softplus(m);
        grads[6][ch * 3 + j] += dl * c.h1[j] * sigmoid(m);
    }
    let mut dpre1 = [0.0; 3];
    for i in 0..3 {
        let tf = p[5][ch * 3 + i].tanh();
        let tp = c.pre1[i].tanh();
        dpre1[i] = dh1[i] * (1.0 + tf * (1.0 - tp * tp));
        grads[5][ch * 3 + i] += dh1[i] * tp * (1.0 - tf * tf);
        grads[4][ch * 3 + i] += dpre1[i];
    }
    let mut dh0 = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            let m = p[3][ch * 9 + i * 3 + j];
            dh0[j] += dpre1[i] * softplus(m);
            grads[3][ch * 9 + i * 3 + j] += dpre1[i] * c.h0[j] * sigmoid(m);
        }
    }
    let mut dx = 0.0;
    for j in 0..3 {
        let tf = p[2][ch * 3 + j].tanh();
        let tp = c.pre0[j].tanh();
        let dpre0 = dh0[j] * (1.0 + tf * (1.0 - tp * tp));
        grads[2][ch * 3 + j] += dh0[j] * tp * (1.0 - tf * tf);
        grads[1][ch * 3 + j] += dpre0;
        let m = p[0][ch * 3 + j];
        grads[0][ch * 3 + j] += dpre0 * x * sigmoid(m);
        dx += dpre0 * softplus(m);
    }
    dx
}

struct FactorizedBitsRule {
    channels: usize,
}

impl CustomBackward for FactorizedBitsRule {
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], out_grad: &[f64]) -> Vec<Vec<f64>> {
        let z = inputs[0];
        let p: [&[f64]; 8] = std::array::from_fn(|i| inputs[i + 1]);
        let mut grads: [Vec<f64>; 8] = std::array::from_fn(|i| vec![0.0; p[i].len()]);
        let mut dz = vec![0.0; z.len()];
        for (i, zi) in z.iter().enumerate() {
            let ch = i % self.channels;
            let (up, cu) = logit_forward(&p, ch, zi + 0.5);
            let (lo, cl) = logit_forward(&p, ch, zi - 0.5);
            let lik = unit_bin_likelihood(up, lo);
            if lik <= MASS_FLOOR {
                continue;
            }
            let k = out_grad[i] / (lik * LN_2);
            let d_up = -k * sigmoid(up) * sigmoid(-up);
            let d_lo = k * sigmoid(lo) * sigmoid(-lo);
            dz[i] += logit_backward(&p, ch, zi + 0.5, &cu, d_up, &mut grads);
            dz[i] += logit_backward(&p, ch, zi - 0.5, &cl, d_lo, &mut grads);
        }
        let mut out = vec![dz];
        out.extend(grads);
        out
    }
}

/// Elementwise hyperprior bits on the tape. `z` is `[n, channels]`; `prior`
/// holds the eight raw prior tensors in [`PRIOR_TENSORS`] order.
pub fn factorized_bits(g: &mut Graph, z: Var, prior: [Var; 8]) -> Var {
    let (rows, channels) = g.shape(z);
    let p: [&[f64]; 8] = std::array::from_fn(|i| g.value(prior[i]));
    let value: Vec<f64> = g
        .value(z)
        .iter()
        .enumerate()
        .map(|(i, zi)| {
            let ch = i % channels;
            let lik = unit_bin_likelihood(logit_forward(&p, ch, zi + 0.5).0, logit_forward(&p, ch, zi - 0.5).0);
            -lik.max(MASS_FLOOR).log2()
        })
        .collect();
    let mut inputs = vec![z];
    inputs.extend_from_slice(&prior);
    g.custom(&inputs, rows, channels, value, Box::new(FactorizedBitsRule { channels }))
}

/// Bandwidth assignment per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateAllocation {
    pub k_bar: Vec<usize>,
    /// Bits of side information per token (`q`).
    pub side_info_bits: usize,
    pub total_symbols: usize,
}

impl RateAllocation {
    pub fn from_k_bar(k_bar: Vec<usize>, q: usize) -> Self {
        let total_symbols = k_bar.iter().sum();
        Self {
            k_bar,
            side_info_bits: q,
            total_symbols,
        }
    }

    /// Contiguous symbol range carried by each token.
    pub fn spans(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.k_bar
            .iter()
            .map(|k| {
                let r = start..start + k;
                start += k;
                r
            })
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.k_bar.len()
    }
}

/// Checks that `v` is non-empty, strictly ascending, and has `2^q` entries.
/// Returns `q`.
pub fn validate_value_set(v: &[usize]) -> Result<usize> {
    if v.is_empty() {
        return Err(AscError::Config("bandwidth value set is empty".into()));
    }
    if v.windows(2).any(|w| w[0] >= w[1]) || v[0] == 0 {
        return Err(AscError::Config(format!("bandwidth value set {v:?} must be ascending and positive")));
    }
    if !v.len().is_power_of_two() {
        return Err(AscError::Config(format!(
            "bandwidth value set {v:?} must have a power-of-two size"
        )));
    }
    Ok(v.len().trailing_zeros() as usize)
}

/// Nearest element of `v` to `k`, ties resolved toward the larger value.
pub fn quantize_bandwidth(k: f64, v: &[usize]) -> usize {
    let mut best = v[0];
    let mut best_d = f64::INFINITY;
    for &cand in v {
        let d = (k - cand as f64).abs();
        if d <= best_d {
            best = cand;
            best_d = d;
        }
    }
    best
}

/// `k_bar_i = Q(eta_y * rate_i)`.
pub fn allocate_bandwidth(token_rates: &[f64], eta_y: f64, v: &[usize]) -> Result<RateAllocation> {
    let q = validate_value_set(v)?;
    if !(eta_y > 0.0) {
        return Err(AscError::Config(format!("eta_y must be positive, got {eta_y}")));
    }
    let k_bar = token_rates.iter().map(|r| quantize_bandwidth(eta_y * r, v)).collect();
    Ok(RateAllocation::from_k_bar(k_bar, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn unit_gaussian_at_mean_costs_1_385_bits() {
        let p = gaussian_bin_mass(0.0, 0.0, 1.0);
        assert!((p - 0.382925).abs() < 1e-6);
        let r = latent_rate(&[0.3], &[0.3], &[1.0], 1).unwrap();
        assert!((r[0] - 1.385).abs() < 1e-3);
    }

    #[test]
    fn floor_scale_at_mean_is_nearly_free() {
        let r = latent_rate(&[0.0], &[0.0], &[SIGMA_MIN], 1).unwrap();
        assert!(r[0] < 1e-4);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        assert!(matches!(latent_rate(&[0.0], &[0.0], &[0.0], 1), Err(AscError::Domain(_))));
    }

    #[test]
    fn latent_mass_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let y = rng.random_range(-4.0..4.0);
            let mu = rng.random_range(-4.0..4.0);
            let s = rng.random_range(0.2..3.0);
            let q = simpson(|t| normal_pdf((t - mu) / s) / s, y - 0.5, y + 0.5, 2000);
            assert!((gaussian_bin_mass(y, mu, s) - q).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let cases = [(0.3, -0.2, 0.7), (1.7, 0.4, 1.3), (-2.0, 0.5, 2.5), (0.05, 0.0, 0.3)];
        let h = 1e-4;
        for (y, m, s) in cases {
            let (_, dy, dm, ds) = gaussian_bits_with_grad(y, m, s);
            let f = |y: f64, m: f64, s: f64| gaussian_bits_with_grad(y, m, s).0;
            let fy = (f(y + h, m, s) - f(y - h, m, s)) / (2.0 * h);
            let fm = (f(y, m + h, s) - f(y, m - h, s)) / (2.0 * h);
            let fs = (f(y, m, s + h) - f(y, m, s - h)) / (2.0 * h);
            for (a, b) in [(dy, fy), (dm, fm), (ds, fs)] {
                assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    struct Uniform {
        width: f64,
    }

    impl UnitBinDensity for Uniform {
        fn bin_mass(&self, _channel: usize, z: f64) -> f64 {
            // overlap of [z-1/2, z+1/2] with [-W/2, W/2], density 1/W
            let lo = (z - 0.5).max(-self.width / 2.0);
            let hi = (z + 0.5).min(self.width / 2.0);
            (hi - lo).max(0.0) / self.width
        }

        fn channels(&self) -> usize {
            1
        }
    }

    #[test]
    fn uniform_hyperprior_costs_log2_width() {
        for w in [1.0, 2.0, 4.0, 10.0] {
            let r = hyper_rate(&[0.0], &Uniform { width: w }).unwrap();
            assert!((r - f64::log2(w)).abs() < 1e-12);
        }
    }

    #[test]
    fn factorized_prior_normalizes_and_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prior = FactorizedPrior::init(4, 2.0, &mut rng);
        for ch in 0..4 {
            let total = simpson(|x| prior.density(ch, x), -30.0, 30.0, 60_000);
            assert!((total - 1.0).abs() < 1e-3, "channel {ch} integrates to {total}");
            for z in [-1.3, 0.0, 0.4, 2.2] {
                let q = simpson(|x| prior.density(ch, x), z - 0.5, z + 0.5, 2000);
                assert!((prior.bin_mass(ch, z) - q).abs() < 1e-5);
            }
        }
        let rate = hyper_rate(&[0.1, -0.7, 3.0, 0.0], &prior).unwrap();
        assert!(rate >= 0.0);
    }

    #[test]
    fn factorized_bits_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prior = FactorizedPrior::init(2, 2.0, &mut rng);
        // move the gating factors off zero so every path is exercised
        prior.tensors[2] = vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6];
        prior.tensors[5] = vec![-0.4, 0.2, 0.3, 0.6, -0.1, 0.2];
        let z = vec![0.2, -0.9, 1.4, 0.05];
        let eval = |prior: &FactorizedPrior, z: &[f64]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let zv = g.leaf(2, 2, z.to_vec());
            let pv: [Var; 8] = std::array::from_fn(|i| {
                let t = &prior.tensors[i];
                g.leaf(t.len(), 1, t.clone())
            });
            let b = factorized_bits(&mut g, zv, pv);
            let s = g.sum(b);
            let grads = g.backward(s);
            let mut all = vec![grads.get_or_zeros(zv, 4)];
            for v in pv {
                all.push(grads.get_or_zeros(v, g.value(v).len()));
            }
            (g.scalar(s), all)
        };
        let (base, grads) = eval(&prior, &z);
        assert!((base - hyper_rate(&z, &prior).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for (i, zi) in z.iter().enumerate() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] = zi + h;
            zm[i] = zi - h;
            let fd = (eval(&prior, &zp).0 - eval(&prior, &zm).0) / (2.0 * h);
            assert!((fd - grads[0][i]).abs() < 1e-5 * fd.abs().max(1.0));
        }
        for t in 0..8 {
            for k in 0..prior.tensors[t].len() {
                let mut pp = prior.clone();
                let mut pm = prior.clone();
                pp.tensors[t][k] += h;
                pm.tensors[t][k] -= h;
                let fd = (eval(&pp, &z).0 - eval(&pm, &z).0) / (2.0 * h);
                assert!(
                    (fd - grads[t + 1][k]).abs() < 1e-5 * fd.abs().max(1.0),
                    "tensor {t} entry {k}: {fd} vs {}",
                    grads[t + 1][k]
                );
            }
        }
    }

    #[test]
    fn allocation_examples() {
        let v = [2, 4, 8, 16];
        assert_eq!(allocate_bandwidth(&[1.385], 0.2, &v).unwrap().k_bar, vec![2]);
        assert_eq!(allocate_bandwidth(&[25.0], 0.4, &v).unwrap().k_bar, vec![8]);
        // exact midpoint between 4 and 8 resolves upward
        assert_eq!(allocate_bandwidth(&[6.0], 1.0, &v).unwrap().k_bar, vec![8]);
        let a = allocate_bandwidth(&[1.0, 100.0], 1.0, &v).unwrap();
        assert_eq!(a.side_info_bits, 2);
        assert_eq!(a.total_symbols, 18);
        assert_eq!(a.spans(), vec![0..2, 2..18]);
        assert!(matches!(allocate_bandwidth(&[1.0], 1.0, &[]), Err(AscError::Config(_))));
    }

    #[test]
    fn uniform_noise_is_reproducible_and_bounded() {
        let z = vec![0.0; 1000];
        let a = add_uniform_noise(&z, &mut ChaCha8Rng::seed_from_u64(3));
        let b = add_uniform_noise(&z, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn uniform_noise_has_zero_mean() {
        let z = vec![0.0; 1_000_000];
        let a = add_uniform_noise(&z, &mut ChaCha8Rng::seed_from_u64(9));
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    proptest! {
        #[test]
        fn allocation_is_in_value_set_and_monotone(mut rates in prop::collection::vec(0.0f64..200.0, 1..50), eta in 0.01f64..2.0) {
            let v = [2, 4, 8, 16];
            rates.sort_by(f64::total_cmp);
            let a = allocate_bandwidth(&rates, eta, &v).unwrap();
            prop_assert!(a.k_bar.iter().all(|k| v.contains(k)));
            prop_assert!(a.k_bar.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn latent_rate_is_non_negative(y in -50.0f64..50.0, mu in -50.0f64..50.0, s in 0.01f64..40.0) {
            let r = latent_rate(&[y], &[mu], &[s], 1).unwrap();
            prop_assert!(r[0] >= 0.0);
        }
    }
}

//! Distortion, PSNR, channel bandwidth ratio accounting and BD-rate.

use serde::{Deserialize, Serialize};

use crate::entropy_model::RateAllocation;
use crate::error::{AscError, Result};

pub fn mse(x: &[f64], x_hat: &[f64]) -> f64 {
    assert_eq!(x.len(), x_hat.len(), "mse operands differ in length");
    if x.is_empty() {
        return 0.0;
    }
    x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// `-10 log10(mse)` for unit peak; zero error maps to `+inf`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(AscError::Shape(format!(
            "psnr operands differ in length: {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    Ok(psnr_from_mse(mse(x, x_hat)))
}

fn default_side_info() -> bool {
    true
}

fn default_bits_per_symbol() -> f64 {
    2.0
}

/// How channel usage is converted into bandwidth ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbrPolicy {
    /// Count the `q` allocation bits per token as channel symbols.
    #[serde(default = "default_side_info")]
    pub side_info: bool,
    /// Spectral efficiency C assumed for digitally sent bits.
    #[serde(default = "default_bits_per_symbol")]
    pub bits_per_symbol: f64,
}

impl Default for CbrPolicy {
    fn default() -> Self {
        Self {
            side_info: true,
            bits_per_symbol: 2.0,
        }
    }
}

/// Content rate R and model rate M in channel uses per source dimension.
/// `model_bits` are spread evenly over the `served` instances.
pub fn cbr(alloc: &RateAllocation, policy: CbrPolicy, model_bits: f64, m: usize, served: usize) -> Result<(f64, f64)> {
    if m == 0 {
        return Err(AscError::Config("source dimension must be positive".into()));
    }
    if !(policy.bits_per_symbol > 0.0) || served == 0 {
        return Err(AscError::Config("bits_per_symbol and served count must be positive".into()));
    }
    let mut symbols = alloc.total_symbols as f64;
    if policy.side_info {
        symbols += ((alloc.side_info_bits * alloc.tokens()) as f64 / policy.bits_per_symbol).ceil();
    }
    let r = symbols / m as f64;
    let m_rate = model_bits / policy.bits_per_symbol / m as f64 / served as f64;
    Ok((r, m_rate))
}

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdmRecord {
    pub scope: String,
    pub snr_db: f64,
    pub lambda: f64,
    pub beta: f64,
    #[serde(rename = "R")]
    pub cbr_content: f64,
    #[serde(rename = "M")]
    pub cbr_model: f64,
    #[serde(rename = "R_plus_M")]
    pub cbr_total: f64,
    pub mse: f64,
    pub psnr: f64,
}

impl RdmRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(scope: &str, snr_db: f64, lambda: f64, beta: f64, r: f64, m: f64, mse: f64) -> Self {
        Self {
            scope: scope.to_string(),
            snr_db,
            lambda,
            beta,
            cbr_content: r,
            cbr_model: m,
            cbr_total: r + m,
            mse,
            psnr: psnr_from_mse(mse),
        }
    }
}

/// CSV header of RD reports.
pub const REPORT_HEADER: [&str; 9] = ["scope", "snr_db", "lambda", "beta", "R", "M", "R_plus_M", "mse", "psnr"];

/// Monotone piecewise-cubic Hermite interpolant.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing with at least two points.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(AscError::Evaluation("interpolation needs at least two points".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(AscError::Evaluation("interpolation abscissae must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.partition_point(|v| *v <= t) {
            0 => 0,
            i => (i - 1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[k]
            + (s3 - 2.0 * s2 + s) * h * self.d[k]
            + (-2.0 * s3 + 3.0 * s2) * self.y[k + 1]
            + (s3 - s2) * h * self.d[k + 1]
    }

    /// Exact integral of the interpolant over `[a, b]` within its domain.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            let prim = |s: f64| {
                let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
                (s - s3 + s4 / 2.0) * self.y[k]
                    + (s2 / 2.0 - 2.0 * s3 / 3.0 + s4 / 4.0) * h * self.d[k]
                    + (s3 - s4 / 2.0) * self.y[k + 1]
                    + (-s3 / 3.0 + s4 / 4.0) * h * self.d[k + 1]
            };
            total += h * (prim((hi - x0) / h) - prim((lo - x0) / h));
        }
        total
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Builds `log10(R)` as a function of PSNR.
pub fn log_rate_curve(points: &[(f64, f64)]) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(AscError::Evaluation(format!(
            "BD-rate needs at least 4 points per curve, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    if pts.iter().any(|(r, q)| !(*r > 0.0) || !q.is_finite()) {
        return Err(AscError::Evaluation("curve points need positive rate and finite PSNR".into()));
    }
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    Pchip::new(pts.iter().map(|p| p.1).collect(), pts.iter().map(|p| p.0.log10()).collect())
}

/// Bjontegaard delta rate of `b` against `a` in percent, over the common
/// PSNR interval. Points are `(rate, psnr)`; negative means `b` needs less
/// rate for equal quality.
pub fn bd_rate(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)]) -> Result<f64> {
    let pa = log_rate_curve(curve_a)?;
    let pb = log_rate_curve(curve_b)?;
    let (a0, a1) = pa.domain();
    let (b0, b1) = pb.domain();
    let lo = a0.max(b0);
    let hi = a1.min(b1);
    if !(hi > lo) {
        return Err(AscError::Evaluation(format!(
            "curves do not overlap in quality: [{a0:.3}, {a1:.3}] vs [{b0:.3}, {b1:.3}]"
        )));
    }
    let avg = (pb.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Bjontegaard delta PSNR of `b` against `a` in dB over the common
/// `log10(R)` interval; positive means `b` is better at equal rate.
pub fn bd_psnr(curve_a: &[(f64, f64)], curve_b: &[(f64, f64)]) -> Result<f64> {
    let curve = |points: &[(f64, f64)]| -> Result<Pchip> {
        if points.len() < 4 {
            return Err(AscError::Evaluation(format!(
                "BD-PSNR needs at least 4 points per curve, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(r, q)| !(*r > 0.0) || !q.is_finite()) {
            return Err(AscError::Evaluation("curve points need positive rate and finite PSNR".into()));
        }
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Pchip::new(pts.iter().map(|p| p.0.log10()).collect(), pts.iter().map(|p| p.1).collect())
    };
    let (pa, pb) = (curve(curve_a)?, curve(curve_b)?);
    let (a0, a1) = pa.domain();
    let (b0, b1) = pb.domain();
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if !(hi > lo) {
        return Err(AscError::Evaluation("curves do not overlap in rate".into()));
    }
    Ok((pb.integrate(lo, hi) - pa.integrate(lo, hi)) / (hi - lo))
}

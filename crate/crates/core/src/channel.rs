//! Real-valued fading channel `s_hat = h * s + n` with per-symbol CSI.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    BlockFading,
    SelectiveFading,
    CsiFile,
}

fn default_rayleigh_scale() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}

fn default_true() -> bool {
    true
}

fn default_power() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    #[serde(default)]
    pub noise_power: Option<f64>,
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Rayleigh scale of the gain magnitude; `1/sqrt(2)` gives `E[g^2] = 1`.
    #[serde(default = "default_rayleigh_scale")]
    pub rayleigh_scale: f64,
    #[serde(default)]
    pub csi_path: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub wrap: bool,
    #[serde(default = "default_power")]
    pub signal_power: f64,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self::with_kind(ChannelKind::Awgn, snr_db)
    }

    pub fn with_kind(kind: ChannelKind, snr_db: f64) -> Self {
        Self {
            kind,
            noise_power: None,
            snr_db: Some(snr_db),
            rayleigh_scale: default_rayleigh_scale(),
            csi_path: None,
            wrap: true,
            signal_power: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.noise_power, self.snr_db) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(AscError::Config(
                    "exactly one of noise_power and snr_db must be given".into(),
                ))
            }
            (Some(n), None) if !(n >= 0.0) => {
                return Err(AscError::Config(format!("noise_power must be >= 0, got {n}")))
            }
            (None, Some(s)) if !s.is_finite() => {
                return Err(AscError::Config(format!("snr_db must be finite, got {s}")))
            }
            _ => {}
        }
        if self.kind == ChannelKind::CsiFile && self.csi_path.is_none() {
            return Err(AscError::Config("csi_file channel requires csi_path".into()));
        }
        if !(self.rayleigh_scale > 0.0) || !(self.signal_power > 0.0) {
            return Err(AscError::Config("rayleigh_scale and signal_power must be positive".into()));
        }
        Ok(())
    }

    /// Noise variance per real symbol.
    pub fn noise_variance(&self) -> f64 {
        match (self.noise_power, self.snr_db) {
            (Some(n), _) => n,
            (None, Some(s)) => self.signal_power * 10f64.powf(-s / 10.0),
            (None, None) => 0.0,
        }
    }

    /// Nominal SNR in dB for unit gain.
    pub fn nominal_snr_db(&self) -> f64 {
        match (self.snr_db, self.noise_power) {
            (Some(s), _) => s,
            (None, Some(n)) => 10.0 * (self.signal_power / n).log10(),
            (None, None) => f64::INFINITY,
        }
    }
}

/// Per-symbol gain magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiVector {
    pub gains: Vec<f64>,
}

impl CsiVector {
    pub fn ones(k: usize) -> Self {
        Self { gains: vec![1.0; k] }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

/// Draws `k` i.i.d. `N(0, noise_var)` samples.
pub fn sample_noise<R: Rng + ?Sized>(k: usize, noise_var: f64, rng: &mut R) -> Vec<f64> {
    let std = noise_var.sqrt();
    (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// `s_hat_i = h_i s_i + n_i`, `n_i ~ N(0, noise_var)`.
pub fn transmit<R: Rng + ?Sized>(s: &[f64], h: &CsiVector, noise_var: f64, rng: &mut R) -> Result<Vec<f64>> {
    if s.len() != h.len() {
        return Err(AscError::Dimension(format!(
            "symbol length {} does not match CSI length {}",
            s.len(),
            h.len()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(AscError::Config(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let noise = sample_noise(s.len(), noise_var, rng);
    Ok(s.iter()
        .zip(&h.gains)
        .zip(noise)
        .map(|((x, g), n)| g * x + n)
        .collect())
}

fn rayleigh<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    scale * (a * a + b * b).sqrt()
}

/// Reads a CSI trace: one non-negative gain per line, `#` comments ignored.
pub fn load_csi_trace(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AscError::Data(format!("cannot read CSI trace {}: {e}", path.display())))?;
    parse_csi_trace(&text)
}

pub fn parse_csi_trace(text: &str) -> Result<Vec<f64>> {
    let mut gains = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let g: f64 = t
            .parse()
            .map_err(|_| AscError::Data(format!("CSI trace line {}: not a number: {t:?}", lineno + 1)))?;
        if !g.is_finite() || g < 0.0 {
            return Err(AscError::Data(format!(
                "CSI trace line {}: gain must be finite and >= 0, got {g}",
                lineno + 1
            )));
        }
        gains.push(g);
    }
    if gains.is_empty() {
        return Err(AscError::Data("CSI trace contains no gains".into()));
    }
    Ok(gains)
}

/// Draws CSI vectors from a channel domain. Holds the trace cursor for
/// file-driven channels.
#[derive(Clone, Debug)]
pub struct CsiSampler {
    cfg: ChannelConfig,
    trace: Vec<f64>,
    offset: usize,
    wraps: usize,
}

impl CsiSampler {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        let trace = match (&cfg.kind, &cfg.csi_path) {
            (ChannelKind::CsiFile, Some(p)) => load_csi_trace(p)?,
            _ => Vec::new(),
        };
        Ok(Self {
            cfg,
            trace,
            offset: 0,
            wraps: 0,
        })
    }

    /// Sampler over an in-memory trace.
    pub fn from_trace(cfg: ChannelConfig, trace: Vec<f64>) -> Result<Self> {
        if trace.is_empty() {
            return Err(AscError::Data("CSI trace contains no gains".into()));
        }
        Ok(Self {
            cfg,
            trace,
            offset: 0,
            wraps: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn noise_variance(&self) -> f64 {
        self.cfg.noise_variance()
    }

    /// Number of times the trace cursor wrapped around.
    pub fn wrap_count(&self) -> usize {
        self.wraps
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<CsiVector> {
        if k == 0 {
            return Err(AscError::Dimension("cannot sample CSI for zero symbols".into()));
        }
        let gains = match self.cfg.kind {
            ChannelKind::Awgn => vec![1.0; k],
            ChannelKind::BlockFading => vec![rayleigh(self.cfg.rayleigh_scale, rng); k],
            ChannelKind::SelectiveFading => (0..k).map(|_| rayleigh(self.cfg.rayleigh_scale, rng)).collect(),
            ChannelKind::CsiFile => {
                let mut out = Vec::with_capacity(k);
                while out.len() < k {
                    if self.offset == self.trace.len() {
                        if !self.cfg.wrap {
                            return Err(AscError::Data(format!(
                                "CSI trace exhausted after {} gains",
                                self.trace.len()
                            )));
                        }
                        self.offset = 0;
                        self.wraps += 1;
                        log::info!("CSI trace wrapped ({} wraps so far)", self.wraps);
                    }
                    let take = (k - out.len()).min(self.trace.len() - self.offset);
                    out.extend_from_slice(&self.trace[self.offset..self.offset + take]);
                    self.offset += take;
                }
                out
            }
        };
        Ok(CsiVector { gains })
    }
}

/// One-shot sampling for generated channel kinds.
pub fn sample_csi<R: Rng + ?Sized>(cfg: &ChannelConfig, k: usize, rng: &mut R) -> Result<CsiVector> {
    CsiSampler::new(cfg.clone())?.sample(k, rng)
}

fn span_snr_db(gains: &[f64], noise_var: f64, power: f64) -> f64 {
    let mean = gains.iter().map(|g| g * g).sum::<f64>() / gains.len() as f64;
    10.0 * (mean * power / noise_var).log10()
}

/// Receiver-side SNR of each token, averaged over the token's symbols.
pub fn per_token_snr(h: &CsiVector, noise_var: f64, spans: &[Range<usize>], power: f64) -> Result<Vec<f64>> {
    if !(noise_var > 0.0) {
        return Err(AscError::Config(format!("noise variance must be > 0, got {noise_var}")));
    }
    spans
        .iter()
        .map(|r| {
            if r.is_empty() {
                return Err(AscError::Dimension(format!("empty token span {r:?}")));
            }
            if r.end > h.len() {
                return Err(AscError::Dimension(format!(
                    "token span {r:?} exceeds CSI length {}",
                    h.len()
                )));
            }
            Ok(span_snr_db(&h.gains[r.clone()], noise_var, power))
        })
        .collect()
}

/// Transmitter-side CQI: SNR averaged over all symbols.
pub fn average_snr(h: &CsiVector, noise_var: f64, power: f64) -> Result<f64> {
    if h.is_empty() {
        return Err(AscError::Dimension("empty CSI vector".into()));
    }
    Ok(per_token_snr(h, noise_var, &[0..h.len()], power)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = transmit(&[1.0, -1.0, 2.0], &CsiVector::ones(3), 0.0, &mut rng).unwrap();
        assert_eq!(out, vec![1.0, -1.0, 2.0]);
        let out = transmit(&[2.0], &CsiVector { gains: vec![0.5] }, 0.0, &mut rng).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn transmit_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            transmit(&[1.0, 2.0], &CsiVector::ones(3), 0.1, &mut rng),
            Err(AscError::Dimension(_))
        ));
        assert!(matches!(
            transmit(&[1.0], &CsiVector::ones(1), -0.1, &mut rng),
            Err(AscError::Config(_))
        ));
    }

    #[test]
    fn awgn_ignores_rng_and_block_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = sample_csi(&ChannelConfig::awgn(10.0), 4, &mut rng).unwrap();
        assert_eq!(h.gains, vec![1.0; 4]);
        let h = sample_csi(&ChannelConfig::with_kind(ChannelKind::BlockFading, 10.0), 3, &mut rng).unwrap();
        assert!(h.gains.iter().all(|g| *g == h.gains[0]));
    }

    #[test]
    fn snr_examples() {
        let h = CsiVector::ones(8);
        let snr = per_token_snr(&h, 0.1, &[0..4, 4..8], 1.0).unwrap();
        assert!(snr.iter().all(|s| (s - 10.0).abs() < 1e-12));
        let h = CsiVector { gains: vec![1.0, 1.0, 0.0, 0.0] };
        let snr = per_token_snr(&h, 1.0, &[0..4], 1.0).unwrap();
        assert!((snr[0] - 10.0 * 0.5f64.log10()).abs() < 1e-12);
        assert!((average_snr(&CsiVector::ones(5), 1.0, 1.0).unwrap()).abs() < 1e-12);
        assert!((average_snr(&CsiVector::ones(5), 0.01, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(
            per_token_snr(&h, 1.0, &[0..0], 1.0),
            Err(AscError::Dimension(_))
        ));
        assert!(average_snr(&CsiVector { gains: vec![] }, 1.0, 1.0).is_err());
    }

    #[test]
    fn csi_trace_wraps_and_counts() {
        let mut cfg = ChannelConfig::with_kind(ChannelKind::CsiFile, 10.0);
        cfg.csi_path = Some("unused".into());
        let trace = parse_csi_trace("# gains\n0.5\n1.0\n\n1.5\n").unwrap();
        let mut s = CsiSampler::from_trace(cfg.clone(), trace.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.sample(5, &mut rng).unwrap().gains, vec![0.5, 1.0, 1.5, 0.5, 1.0]);
        assert_eq!(s.wrap_count(), 1);
        assert_eq!(s.offset(), 2);
        cfg.wrap = false;
        let mut s = CsiSampler::from_trace(cfg, trace).unwrap();
        assert!(matches!(s.sample(4, &mut rng), Err(AscError::Data(_))));
    }

    #[test]
    fn trace_rejects_negative_gain() {
        assert!(parse_csi_trace("1.0\n-0.5\n").is_err());
    }

    #[test]
    fn config_requires_exactly_one_noise_spec() {
        let mut cfg = ChannelConfig::awgn(10.0);
        cfg.noise_power = Some(0.1);
        assert!(cfg.validate().is_err());
        cfg.snr_db = None;
        assert!(cfg.validate().is_ok());
        assert!((cfg.nominal_snr_db() - 10.0).abs() < 1e-12);
    }
}

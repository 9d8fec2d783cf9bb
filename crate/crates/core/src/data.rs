//! Source images and procedural image generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AscError, Result};

/// An `h x w` RGB image with values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(AscError::Shape(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AscError::Data("image contains non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    /// Source dimension m = 3HW.
    pub fn dims(&self) -> usize {
        self.data.len()
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Top-left `h x w` crop.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(AscError::Shape(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn blend(dst: &mut [f64], color: [f64; 3], alpha: f64) {
    for k in 0..3 {
        dst[k] = dst[k] * (1.0 - alpha) + color[k] * alpha;
    }
}

/// Smooth value noise on a coarse lattice, bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let gw = cells + 1;
    let lattice: Vec<f64> = (0..gw * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let y = r as f64 / h as f64 * cells as f64;
            let x = c as f64 / w as f64 * cells as f64;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (smoothstep(0.0, 1.0, y - y0 as f64), smoothstep(0.0, 1.0, x - x0 as f64));
            let v = |yy: usize, xx: usize| lattice[yy.min(cells) * gw + xx.min(cells)];
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x0 + 1) * fx;
            let bot = v(y0 + 1, x0) * (1.0 - fx) + v(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// One procedural image: a colour gradient background, value-noise texture,
/// and a few soft-edged discs, rectangles and stripe patches.
pub fn procedural_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let tex_amp: f64 = rng.random_range(0.0..0.25);
    let cells = rng.random_range(2..8);
    let tex = value_noise(rng, h, w, cells);
    let mut data = vec![0.0; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let u = ((c as f64 / w as f64 - 0.5) * ca + (r as f64 / h as f64 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            let i = (r * w + c) * 3;
            for k in 0..3 {
                data[i + k] = c0[k] * (1.0 - u) + c1[k] * u + tex_amp * (tex[r * w + c] - 0.5);
            }
        }
    }
    let shapes = rng.random_range(1..6);
    for _ in 0..shapes {
        let color = random_color(rng);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let size = rng.random_range(0.08..0.35) * h.min(w) as f64;
        let kind = rng.random_range(0..3);
        let period = rng.random_range(3.0..10.0);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let alpha = match kind {
                    0 => 1.0 - smoothstep(size - 1.0, size + 1.0, (dy * dy + dx * dx).sqrt()),
                    1 => {
                        let d = dy.abs().max(dx.abs());
                        1.0 - smoothstep(size - 0.5, size + 0.5, d)
                    }
                    _ => {
                        let inside = 1.0 - smoothstep(size - 1.0, size + 1.0, (dy * dy + dx * dx).sqrt());
                        inside * (0.5 + 0.5 * (std::f64::consts::TAU * (dx + dy) / period).sin())
                    }
                };
                if alpha > 0.0 {
                    let i = (r * w + c) * 3;
                    blend(&mut data[i..i + 3], color, alpha);
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image {
        height: h,
        width: w,
        data,
    }
}

/// `n` procedural images from `seed`.
pub fn procedural_corpus(seed: u64, n: usize, h: usize, w: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| procedural_image(&mut rng, h, w)).collect()
}

/// A synthetic "scene": `n` frames of one panoramic backdrop seen through a
/// slowly panning window, with a few moving sprites. Frames share palette,
/// texture statistics and layout, standing in for one video's key frames.
pub fn scene_frames(seed: u64, n: usize, h: usize, w: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ph, pw) = (h + h / 2, w * 3);
    let sky = random_color(&mut rng);
    let ground = random_color(&mut rng);
    let accent = random_color(&mut rng);
    let horizon: Vec<f64> = value_noise(&mut rng, 1, pw, 6)
        .iter()
        .map(|v| ph as f64 * (0.35 + 0.3 * v))
        .collect();
    let tex = value_noise(&mut rng, ph, pw, 24);
    let stripes_period = rng.random_range(3.0..6.0);
    let mut pano = vec![0.0; ph * pw * 3];
    for r in 0..ph {
        for c in 0..pw {
            let i = (r * pw + c) * 3;
            let t = tex[r * pw + c];
            let below = smoothstep(horizon[c] - 1.0, horizon[c] + 1.0, r as f64);
            for k in 0..3 {
                let base = sky[k] * (1.0 - below) + ground[k] * below;
                let furrow = below * 0.15 * (std::f64::consts::TAU * r as f64 / stripes_period).sin();
                pano[i + k] = (base + 0.3 * (t - 0.5) + furrow * accent[k]).clamp(0.0, 1.0);
            }
        }
    }
    let sprites: Vec<([f64; 3], f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                random_color(&mut rng),
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(3.0..8.0),
            )
        })
        .collect();
    let max_dx = pw - w;
    let max_dy = ph - h;
    (0..n)
        .map(|f| {
            let t = f as f64 / n.max(2) as f64;
            let ox = (t * max_dx as f64).round() as usize;
            let oy = ((0.5 + 0.5 * (t * std::f64::consts::TAU).sin()) * max_dy as f64).round() as usize;
            let mut data = Vec::with_capacity(h * w * 3);
            for r in 0..h {
                let start = ((r + oy) * pw + ox) * 3;
                data.extend_from_slice(&pano[start..start + w * 3]);
            }
            for (color, y0, x0, vy, vx, radius) in &sprites {
                let cy = (y0 + vy * f as f64).rem_euclid(h as f64);
                let cx = (x0 + vx * f as f64).rem_euclid(w as f64);
                for r in 0..h {
                    for c in 0..w {
                        let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                        let alpha = 1.0 - smoothstep(radius - 1.0, radius + 1.0, d);
                        if alpha > 0.0 {
                            let i = (r * w + c) * 3;
                            blend(&mut data[i..i + 3], *color, alpha);
                        }
                    }
                }
            }
            Image {
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}

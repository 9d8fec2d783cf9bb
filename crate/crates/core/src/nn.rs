//! Named parameter collections and the small layer vocabulary shared by the
//! transforms and the JSCC codec.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, ZERO_INDEX};

/// Which learned function a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Analysis transform g_a (phi_g).
    AnalysisG,
    /// Synthesis transform g_s (theta_g).
    SynthesisG,
    /// Hyper analysis h_a (phi_h).
    HyperA,
    /// Hyper synthesis h_s (theta_h).
    HyperS,
    /// Factorized hyperprior density (psi).
    Prior,
    /// JSCC encoder f_e (phi_f).
    JsccEnc,
    /// JSCC decoder f_d (theta_f).
    JsccDec,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::AnalysisG,
        Group::SynthesisG,
        Group::HyperA,
        Group::HyperS,
        Group::Prior,
        Group::JsccEnc,
        Group::JsccDec,
    ];

    pub fn is_receiver(self) -> bool {
        matches!(self, Group::SynthesisG | Group::JsccDec)
    }

    pub fn is_entropy_model(self) -> bool {
        matches!(self, Group::HyperA | Group::HyperS | Group::Prior)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::AnalysisG => "phi_g",
            Group::SynthesisG => "theta_g",
            Group::HyperA => "phi_h",
            Group::HyperS => "theta_h",
            Group::Prior => "psi",
            Group::JsccEnc => "phi_f",
            Group::JsccDec => "theta_f",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// the order used for flattening and for the model-update stream.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: Rc<HashMap<String, usize>>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: Group, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(rows * cols, data.len(), "parameter {name} has wrong data length");
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        Rc::make_mut(&mut self.index).insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            rows,
            cols,
            data,
        });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    /// Number of scalar parameters in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.data.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Concatenates the values of every parameter whose group passes `keep`.
    pub fn flatten(&self, keep: impl Fn(Group) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| keep(p.group)) {
            out.extend_from_slice(&p.data);
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, keep: impl Fn(Group) -> bool, flat: &[f64]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| keep(p.group)) {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat vector length does not match parameter groups");
    }

    /// Rounds every value to the nearest `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |g, p| g.leaf(p.rows, p.cols, p.data.clone()))
    }

    /// Places parameters on the tape through a caller-supplied constructor.
    pub fn bind_with(&self, g: &mut Graph, mut make: impl FnMut(&mut Graph, &Param) -> Var) -> Bound {
        let vars = self.params.iter().map(|p| make(g, p)).collect();
        Bound {
            vars,
            index: Rc::clone(&self.index),
        }
    }
}

/// Parameter name to tape variable mapping for one forward pass.
#[derive(Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: Rc<HashMap<String, usize>>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gaussian fan-in initialisation scaled by `gain`.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let std = gain / (rows as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn init_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = scale;
    }
    m
}

/// Registers a dense layer `prefix.w` [fan_in, fan_out] and `prefix.b`.
pub fn add_linear(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    group: Group,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) {
    ps.add(
        &format!("{prefix}.w"),
        group,
        fan_in,
        fan_out,
        init_matrix(rng, fan_in, fan_out, gain),
    );
    ps.add(&format!("{prefix}.b"), group, 1, fan_out, vec![0.0; fan_out]);
}

pub fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

/// Registers a residual block: 3x3 convolution, GELU, pointwise projection.
pub fn add_res_block(ps: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, group: Group, width: usize) {
    add_linear(ps, rng, &format!("{prefix}.conv"), group, 9 * width, width, 1.0);
    add_linear(ps, rng, &format!("{prefix}.pw"), group, width, width, 0.1);
}

/// `x + pw(gelu(conv3x3(x)))` over an `h x w` grid of `width`-dim vectors.
pub fn res_block(g: &mut Graph, b: &Bound, prefix: &str, x: Var, h: usize, w: usize) -> Var {
    let (_, width) = g.shape(x);
    let cols = im2col3x3(g, x, h, w, width);
    let c = linear(g, b, &format!("{prefix}.conv"), cols);
    let a = g.gelu(c);
    let p = linear(g, b, &format!("{prefix}.pw"), a);
    g.add(x, p)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum IndexKind {
    Im2col,
    SpaceToDepth,
    DepthToSpace,
}

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<(IndexKind, usize, usize, usize, usize), Rc<Vec<u32>>>> =
        RefCell::new(HashMap::new());
}

fn cached_index(
    kind: IndexKind,
    h: usize,
    w: usize,
    c: usize,
    f: usize,
    build: impl FnOnce() -> Vec<u32>,
) -> Rc<Vec<u32>> {
    INDEX_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        Rc::clone(cache.entry((kind, h, w, c, f)).or_insert_with(|| Rc::new(build())))
    })
}

/// Unfolds 3x3 zero-padded neighbourhoods: `[h*w, c] -> [h*w, 9c]`.
pub fn im2col3x3(g: &mut Graph, x: Var, h: usize, w: usize, c: usize) -> Var {
    let idx = cached_index(IndexKind::Im2col, h, w, c, 3, || {
        let mut idx = Vec::with_capacity(h * w * 9 * c);
        for i in 0..h as isize {
            for j in 0..w as isize {
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (si, sj) = (i + di, j + dj);
                        let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                        for ch in 0..c {
                            idx.push(if inside {
                                ((si as usize * w + sj as usize) * c + ch) as u32
                            } else {
                                ZERO_INDEX
                            });
                        }
                    }
                }
            }
        }
        idx
    });
    g.gather(x, idx, h * w, 9 * c)
}

/// `[h*w, c] -> [(h/f)*(w/f), f*f*c]`.
pub fn space_to_depth(g: &mut Graph, x: Var, h: usize, w: usize, c: usize, f: usize) -> Var {
    let (ho, wo) = (h / f, w / f);
    let idx = cached_index(IndexKind::SpaceToDepth, h, w, c, f, || {
        let mut idx = Vec::with_capacity(h * w * c);
        for i in 0..ho {
            for j in 0..wo {
                for a in 0..f {
                    for b in 0..f {
                        for ch in 0..c {
                            idx.push((((i * f + a) * w + j * f + b) * c + ch) as u32);
                        }
                    }
                }
            }
        }
        idx
    });
    g.gather(x, idx, ho * wo, f * f * c)
}

/// Inverse of [`space_to_depth`]: `[(h/f)*(w/f), f*f*c] -> [h*w, c]`.
pub fn depth_to_space(g: &mut Graph, x: Var, h: usize, w: usize, c: usize, f: usize) -> Var {
    let wo = w / f;
    let idx = cached_index(IndexKind::DepthToSpace, h, w, c, f, || {
        let mut idx = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for s in 0..w {
                let src_row = (r / f) * wo + s / f;
                for ch in 0..c {
                    idx.push((src_row * f * f * c + ((r % f) * f + s % f) * c + ch) as u32);
                }
            }
        }
        idx
    });
    g.gather(x, idx, h * w, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn space_to_depth_round_trips() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..4 * 6 * 2).map(|v| v as f64).collect();
        let x = g.leaf(24, 2, data.clone());
        let s = space_to_depth(&mut g, x, 4, 6, 2, 2);
        assert_eq!(g.shape(s), (6, 8));
        let back = depth_to_space(&mut g, s, 4, 6, 2, 2);
        assert_eq!(g.value(back), &data[..]);
    }

    #[test]
    fn im2col_center_tap_is_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = g.leaf(9, 1, data.clone());
        let cols = im2col3x3(&mut g, x, 3, 3, 1);
        let v = g.value(cols);
        for (p, expected) in data.iter().enumerate() {
            assert_eq!(v[p * 9 + 4], *expected);
        }
        // top-left corner sees zero padding above and to the left
        assert_eq!(&v[0..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(v[8], 5.0);
    }

    #[test]
    fn flatten_round_trips_by_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        add_linear(&mut ps, &mut rng, "a", Group::AnalysisG, 3, 2, 1.0);
        add_linear(&mut ps, &mut rng, "b", Group::SynthesisG, 2, 2, 1.0);
        let flat = ps.flatten(Group::is_receiver);
        assert_eq!(flat.len(), 6);
        let mut other = ps.clone();
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        other.unflatten(Group::is_receiver, &shifted);
        assert_eq!(other.get("a.w"), ps.get("a.w"));
        assert_eq!(other.get("b.w").unwrap().data[0], ps.get("b.w").unwrap().data[0] + 1.0);
    }
}

//! Camera embedding and the fusion MLP that maps per-ray radiance sums,
//! camera embedding and ray direction to a final color.
//!
//! Network input is `[l_iso (3), l_aniso (3), e_c (d), dir (3)]`; hidden
//! layers use ReLU and the output layer a sigmoid.
//!
//! Parameter files start with a text header
//!
//! ```text
//! splat360-mlp
//! layers=25 32 32 3
//! d=16
//! seed=7
//! end
//! ```
//!
//! followed by every layer's row-major weights (`out x in`) then biases, as
//! little-endian f64.

use std::io::{BufRead, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Ray};
use crate::error::{argument, Error, Result};
use crate::render::{render_with, RenderConfig, RenderOutput, RayResult};
use crate::scene::{Scene, Vec3};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const MIN_EMBED_DIM: usize = 13;
pub const HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraEmbedding {
    pub vec: Vec<f64>,
}

impl CameraEmbedding {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// `[clamp((pos - center) / radius), forward, up, right, fov_y / pi, 0...]`.
pub fn embed_camera(cam: &Camera, scene_center: &Vec3, scene_radius: f64, d: usize) -> Result<CameraEmbedding> {
    if d < MIN_EMBED_DIM {
        return Err(argument(format!("embedding dimension {d} < {MIN_EMBED_DIM}")));
    }
    if !(scene_radius > 0.0) {
        return Err(argument("scene radius must be positive"));
    }
    let rel = (cam.position - scene_center) / scene_radius;
    let mut vec = Vec::with_capacity(d);
    vec.extend(rel.iter().map(|v| v.clamp(-1.0, 1.0)));
    vec.extend(cam.forward.iter());
    vec.extend(cam.up.iter());
    vec.extend(cam.right.iter());
    vec.push(cam.fov_y / std::f64::consts::PI);
    vec.resize(d, 0.0);
    Ok(CameraEmbedding { vec })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weights: vec![0.0; n_in * n_out], biases: vec![0.0; n_out] }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Fusion network weights. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    /// Camera embedding dimension.
    pub d: usize,
    pub seed: u64,
}

impl MlpParams {
    pub fn input_dim(d: usize) -> usize {
        9 + d
    }

    /// `[9 + d, 32, 32, 3]` with all parameters zero.
    pub fn zeros(d: usize) -> Self {
        let sizes = [Self::input_dim(d), HIDDEN, HIDDEN, 3];
        Self::zeros_with_sizes(&sizes, d)
    }

    fn zeros_with_sizes(sizes: &[usize], d: usize) -> Self {
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self { layers, d, seed: 0 }
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(d: usize, seed: u64) -> Self {
        let mut p = Self::zeros(d);
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..limit);
            }
        }
        p
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros_with_sizes(&self.sizes(), self.d);
        z.seed = self.seed;
        z
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.biases);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(argument(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(argument("MLP has no layers"));
        }
        if self.layers[0].n_in != Self::input_dim(self.d) {
            return Err(argument(format!(
                "MLP input width {} != 9 + d = {}",
                self.layers[0].n_in,
                Self::input_dim(self.d)
            )));
        }
        if self.layers.last().map(|l| l.n_out) != Some(3) {
            return Err(argument("MLP output width must be 3"));
        }
        for w in self.layers.windows(2) {
            if w[0].n_out != w[1].n_in {
                return Err(argument("MLP layer shapes do not chain"));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.n_in * l.n_out || l.biases.len() != l.n_out {
                return Err(argument("MLP layer buffer sizes inconsistent"));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::Numeric("MLP parameters not finite".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        let mut out = format!(
            "splat360-mlp\nlayers={}\nd={}\nseed={}\nend\n",
            sizes.join(" "),
            self.d,
            self.seed
        )
        .into_bytes();
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<String> {
            line.clear();
            cursor.read_line(&mut line).map_err(|e| Error::Format(format!("MLP header: {e}")))?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut cursor)? != "splat360-mlp" {
            return Err(Error::Format("MLP file missing `splat360-mlp` magic line".into()));
        }
        let (mut sizes, mut d, mut seed) = (None, None, None);
        loop {
            let l = next_line(&mut cursor)?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("MLP header: bad line {l:?}")))?;
            let bad = |e: std::num::ParseIntError| Error::Format(format!("MLP header {k}: {e}"));
            match k {
                "layers" => {
                    sizes = Some(v.split_whitespace().map(|s| s.parse::<usize>().map_err(bad)).collect::<Result<Vec<_>>>()?)
                }
                "d" => d = Some(v.parse::<usize>().map_err(bad)?),
                "seed" => seed = Some(v.parse::<u64>().map_err(bad)?),
                _ => return Err(Error::Format(format!("MLP header: unknown key {k:?}"))),
            }
        }
        let sizes = sizes.ok_or_else(|| Error::Format("MLP header missing layers".into()))?;
        let d = d.ok_or_else(|| Error::Format("MLP header missing d".into()))?;
        if sizes.len() < 2 {
            return Err(Error::Format("MLP needs at least two layer sizes".into()));
        }
        let mut p = Self::zeros_with_sizes(&sizes, d);
        p.seed = seed.unwrap_or(0);
        let mut rest = Vec::new();
        cursor.read_to_end(&mut rest)?;
        if rest.len() != 8 * p.num_params() {
            return Err(Error::Format(format!(
                "MLP payload has {} bytes, layers need {}",
                rest.len(),
                8 * p.num_params()
            )));
        }
        let flat: Vec<f64> = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        p.set_flat(&flat)?;
        p.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn fusion_input(l_iso: &Vec3, l_aniso: &Vec3, e_c: &CameraEmbedding, dir: &Vec3) -> Vec<f64> {
    let mut x = Vec::with_capacity(9 + e_c.dim());
    x.extend(l_iso.iter());
    x.extend(l_aniso.iter());
    x.extend_from_slice(&e_c.vec);
    x.extend(dir.iter());
    x
}

#[inline]
/// Kept strictly inside (0, 1) even where the exact value rounds to 0 or 1.
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Activations kept for the backward pass: `acts[0]` is the input,
/// `pre[l]` the pre-activation of layer `l`.
struct Trace {
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn forward_trace(x: &[f64], params: &MlpParams) -> Result<Trace> {
    params.validate()?;
    if x.len() != params.layers[0].n_in {
        return Err(argument(format!("fusion input has {} values, MLP expects {}", x.len(), params.layers[0].n_in)));
    }
    let n = params.layers.len();
    let mut acts = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(n);
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = Vec::new();
        layer.forward(acts.last().unwrap(), &mut z);
        let a = if i + 1 == n {
            z.iter().map(|&v| sigmoid(v)).collect()
        } else {
            z.iter().map(|&v| v.max(0.0)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    Ok(Trace { acts, pre })
}

/// Pre-activations of every hidden unit, layer by layer.
pub fn hidden_preactivations(x: &[f64], params: &MlpParams) -> Result<Vec<f64>> {
    let t = forward_trace(x, params)?;
    let n = t.pre.len();
    Ok(t.pre.into_iter().take(n - 1).flatten().collect())
}

/// Forward pass on a prepared `(9 + d)`-vector.
pub fn fuse_vec(x: &[f64], params: &MlpParams) -> Result<Vec3> {
    let t = forward_trace(x, params)?;
    Ok(Vec3::from_column_slice(t.acts.last().unwrap()))
}

/// `MLP(concat(l_iso, l_aniso, e_c, dir))`, each channel in (0, 1).
pub fn fuse(l_iso: &Vec3, l_aniso: &Vec3, e_c: &CameraEmbedding, dir: &Vec3, params: &MlpParams) -> Result<Vec3> {
    if e_c.dim() != params.d {
        return Err(argument(format!("embedding has {} values, MLP expects d = {}", e_c.dim(), params.d)));
    }
    fuse_vec(&fusion_input(l_iso, l_aniso, e_c, dir), params)
}

/// Reverse-mode gradients of `upstream . MLP(x)` with respect to the
/// parameters and the input vector. ReLU'(0) is taken as 0.
pub fn fuse_backward_vec(x: &[f64], params: &MlpParams, upstream: &Vec3) -> Result<(MlpParams, Vec<f64>)> {
    let mut grads = params.zeros_like();
    let input_grad = fuse_backward_accumulate(x, params, upstream, &mut grads)?;
    Ok((grads, input_grad))
}

/// As [`fuse_backward_vec`], adding the parameter gradients into `grads`.
/// Returns the gradient with respect to `x`.
pub fn fuse_backward_accumulate(
    x: &[f64],
    params: &MlpParams,
    upstream: &Vec3,
    grads: &mut MlpParams,
) -> Result<Vec<f64>> {
    let t = forward_trace(x, params)?;
    let n = params.layers.len();
    let out = t.acts.last().unwrap();
    let mut delta: Vec<f64> = (0..3).map(|i| upstream[i] * out[i] * (1.0 - out[i])).collect();
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        let input = &t.acts[l];
        let g = &mut grads.layers[l];
        for o in 0..layer.n_out {
            g.biases[o] += delta[o];
            let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
            for (w, a) in row.iter_mut().zip(input) {
                *w += delta[o] * a;
            }
        }
        let mut back = vec![0.0; layer.n_in];
        for o in 0..layer.n_out {
            let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
            for (b, w) in back.iter_mut().zip(row) {
                *b += w * delta[o];
            }
        }
        if l > 0 {
            for (b, z) in back.iter_mut().zip(&t.pre[l - 1]) {
                if *z <= 0.0 {
                    *b = 0.0;
                }
            }
        }
        delta = back;
    }
    Ok(delta)
}

pub fn fuse_backward(
    l_iso: &Vec3,
    l_aniso: &Vec3,
    e_c: &CameraEmbedding,
    dir: &Vec3,
    params: &MlpParams,
    upstream: &Vec3,
) -> Result<(MlpParams, Vec<f64>)> {
    if e_c.dim() != params.d {
        return Err(argument(format!("embedding has {} values, MLP expects d = {}", e_c.dim(), params.d)));
    }
    fuse_backward_vec(&fusion_input(l_iso, l_aniso, e_c, dir), params, upstream)
}

/// Renders with the fused color `MLP(iso_sum, aniso_sum, e_c, dir)` per ray.
pub fn render_fused(
    scene: &Scene,
    cam: &Camera,
    cfg: &RenderConfig,
    params: &MlpParams,
    center: &Vec3,
    radius: f64,
) -> Result<RenderOutput> {
    params.validate()?;
    let e_c = embed_camera(cam, center, radius, params.d)?;
    render_with(scene, cam, cfg, |ray: &Ray, r: &RayResult| {
        fuse(&r.iso_sum, &r.aniso_sum, &e_c, &ray.dir, params).expect("validated shapes")
    })
}

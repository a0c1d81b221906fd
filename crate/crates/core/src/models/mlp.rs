use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::par;
use crate::rng::StreamRng;

use super::GibbsModel;

const BLOCK_ROWS: usize = 64;

/// Fully connected energy network: `input_dim → width → … → width → 1`,
/// SiLU on every hidden layer and a linear scalar head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_head")]
    pub head: String,
}

fn default_activation() -> String {
    "silu".into()
}

fn default_head() -> String {
    "linear".into()
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_width: usize, hidden_layers: usize) -> Self {
        Self {
            input_dim,
            hidden_width,
            hidden_layers,
            activation: default_activation(),
            head: default_head(),
        }
    }

    /// `(fan_in, fan_out)` of every affine layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, 1));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(config_err("mlp dimensions must be positive"));
        }
        if self.activation != "silu" || self.head != "linear" {
            return Err(config_err(format!(
                "unsupported mlp variant activation={} head={}",
                self.activation, self.head
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// MLP energy `E_θ(x)`; as a Gibbs model `U_θ = E_θ`.
///
/// Parameters are stored flat, layer by layer, as `[W (fan_out × fan_in, row-major), b]`.
#[derive(Debug, Clone)]
pub struct MlpEnergy {
    arch: MlpArchitecture,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Reusable per-thread buffers for forward and backward passes.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    zdot: Vec<Vec<f64>>,
    adot: Vec<Vec<f64>>,
    bar: Vec<f64>,
    bar_prev: Vec<f64>,
    bar_dot: Vec<f64>,
    bar_dot_prev: Vec<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_d1(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

#[inline]
fn silu_d2(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}

impl MlpEnergy {
    pub fn from_params(arch: MlpArchitecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in arch.layer_shapes() {
            layers.push(Layer {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        if params.len() != off {
            return Err(Error::Dimension {
                expected: off,
                got: params.len(),
            });
        }
        crate::error::ensure_finite(&params, "mlp parameter")?;
        Ok(Self { arch, layers, params })
    }

    /// Weights `N(0, std²)`, biases zero.
    pub fn init(arch: MlpArchitecture, std: f64, rng: &mut StreamRng) -> Result<Self> {
        let n = arch.num_params();
        let mut model = Self::from_params(arch, vec![0.0; n])?;
        let normal = Normal::new(0.0, std).map_err(|e| config_err(e.to_string()))?;
        for layer in model.layers.clone() {
            for v in &mut model.params[layer.w..layer.b] {
                *v = normal.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn scratch(&self) -> MlpScratch {
        let h = self.arch.hidden_width;
        let l = self.arch.hidden_layers;
        let width = h.max(self.arch.input_dim);
        MlpScratch {
            z: vec![vec![0.0; h]; l],
            a: std::iter::once(vec![0.0; self.arch.input_dim])
                .chain((0..l).map(|_| vec![0.0; h]))
                .collect(),
            zdot: vec![vec![0.0; h]; l],
            adot: std::iter::once(vec![0.0; self.arch.input_dim])
                .chain((0..l).map(|_| vec![0.0; h]))
                .collect(),
            bar: vec![0.0; width],
            bar_prev: vec![0.0; width],
            bar_dot: vec![0.0; width],
            bar_dot_prev: vec![0.0; width],
        }
    }

    fn affine(&self, layer: &Layer, input: &[f64], out: &mut [f64]) {
        let w = &self.params[layer.w..layer.b];
        let b = &self.params[layer.b..layer.b + layer.fan_out];
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(layer.fan_in).zip(b)) {
            *o = bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
        }
    }

    /// Forward pass, caching activations in `s`; returns `E_θ(x)`.
    pub fn forward(&self, x: &[f64], s: &mut MlpScratch) -> f64 {
        s.a[0].copy_from_slice(x);
        let hidden = self.arch.hidden_layers;
        for l in 0..hidden {
            let (prev, next) = s.a.split_at_mut(l + 1);
            self.affine(&self.layers[l], &prev[l], &mut s.z[l]);
            for (a, z) in next[0].iter_mut().zip(&s.z[l]) {
                *a = silu(*z);
            }
        }
        let head = &self.layers[hidden];
        let mut e = [0.0];
        self.affine(head, &s.a[hidden], &mut e);
        e[0]
    }

    /// Reverse pass after [`forward`](Self::forward) on the same scratch.
    ///
    /// Adds `scale · ∇_θ E` into `grad_theta` and writes `scale · ∇_x E` into `grad_x`.
    pub fn backward(&self, s: &mut MlpScratch, scale: f64, mut grad_theta: Option<&mut [f64]>, grad_x: Option<&mut [f64]>) {
        let hidden = self.arch.hidden_layers;
        let head = self.layers[hidden];
        let h = self.arch.hidden_width;
        if let Some(g) = grad_theta.as_deref_mut() {
            for (gw, a) in g[head.w..head.b].iter_mut().zip(&s.a[hidden]) {
                *gw += scale * a;
            }
            g[head.b] += scale;
        }
        for (d, w) in s.bar[..h].iter_mut().zip(&self.params[head.w..head.b]) {
            *d = scale * w;
        }
        for l in (0..hidden).rev() {
            let layer = self.layers[l];
            for (d, z) in s.bar[..h].iter_mut().zip(&s.z[l]) {
                *d *= silu_d1(*z);
            }
            if let Some(g) = grad_theta.as_deref_mut() {
                let input = &s.a[l];
                for (o, d) in s.bar[..h].iter().enumerate() {
                    let row = &mut g[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                    g[layer.b + o] += d;
                }
            }
            if l == 0 && grad_x.is_none() {
                break;
            }
            self.transpose_apply(&layer, &s.bar[..layer.fan_out], &mut s.bar_prev[..layer.fan_in]);
            std::mem::swap(&mut s.bar, &mut s.bar_prev);
        }
        if let Some(gx) = grad_x {
            gx.copy_from_slice(&s.bar[..self.arch.input_dim]);
        }
    }

    fn transpose_apply(&self, layer: &Layer, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let w = &self.params[layer.w..layer.b];
        for (row, d) in w.chunks_exact(layer.fan_in).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * d;
            }
        }
    }

    /// `E_θ(x)` and `∇_x E_θ(x)`.
    pub fn energy_and_grad_x(&self, x: &[f64], grad: &mut [f64], s: &mut MlpScratch) -> f64 {
        let e = self.forward(x, s);
        self.backward(s, 1.0, None, Some(grad));
        e
    }

    /// `acc += coef · ∇_θ [vᵀ ∇_x E_θ(x)]` for a fixed direction `v`.
    ///
    /// Forward-mode tangents along `v` give the directional derivative; a
    /// reverse sweep through both the primal and tangent paths then yields its
    /// parameter gradient. Used for the gradient-norm penalty.
    pub fn accumulate_directional_grad_theta(&self, x: &[f64], v: &[f64], coef: f64, acc: &mut [f64], s: &mut MlpScratch) {
        self.forward(x, s);
        let hidden = self.arch.hidden_layers;
        let h = self.arch.hidden_width;
        s.adot[0].copy_from_slice(v);
        for l in 0..hidden {
            let layer = self.layers[l];
            let w = &self.params[layer.w..layer.b];
            let (prev, next) = s.adot.split_at_mut(l + 1);
            for (o, row) in w.chunks_exact(layer.fan_in).enumerate() {
                let zd = row.iter().zip(&prev[l]).map(|(a, b)| a * b).sum::<f64>();
                s.zdot[l][o] = zd;
                next[0][o] = silu_d1(s.z[l][o]) * zd;
            }
        }
        let head = self.layers[hidden];
        // D = w_hᵀ ȧ_L: the head bias does not enter.
        for (g, ad) in acc[head.w..head.b].iter_mut().zip(&s.adot[hidden]) {
            *g += coef * ad;
        }
        for (bd, w) in s.bar_dot[..h].iter_mut().zip(&self.params[head.w..head.b]) {
            *bd = coef * w;
        }
        s.bar[..h].iter_mut().for_each(|b| *b = 0.0);
        for l in (0..hidden).rev() {
            let layer = self.layers[l];
            for o in 0..layer.fan_out {
                let z = s.z[l][o];
                let d1 = silu_d1(z);
                let bar_adot = s.bar_dot[o];
                let bar_a = s.bar[o];
                s.bar_dot[o] = bar_adot * d1;
                s.bar[o] = bar_adot * silu_d2(z) * s.zdot[l][o] + bar_a * d1;
            }
            for o in 0..layer.fan_out {
                let bz = s.bar[o];
                let bzd = s.bar_dot[o];
                let row = &mut acc[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                for ((g, a), ad) in row.iter_mut().zip(&s.a[l]).zip(&s.adot[l]) {
                    *g += bzd * ad + bz * a;
                }
                acc[layer.b + o] += bz;
            }
            if l > 0 {
                self.transpose_apply(&layer, &s.bar[..layer.fan_out], &mut s.bar_prev[..layer.fan_in]);
                self.transpose_apply(&layer, &s.bar_dot[..layer.fan_out], &mut s.bar_dot_prev[..layer.fan_in]);
                std::mem::swap(&mut s.bar, &mut s.bar_prev);
                std::mem::swap(&mut s.bar_dot, &mut s.bar_dot_prev);
            }
        }
    }
}

impl GibbsModel for MlpEnergy {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn potential(&self, x: &[f64]) -> f64 {
        self.forward(x, &mut self.scratch())
    }

    fn potential_and_grad_x(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.energy_and_grad_x(x, grad, &mut self.scratch())
    }

    fn grad_theta(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.accumulate_grad_theta(x, 1.0, out);
    }

    fn accumulate_grad_theta(&self, x: &[f64], scale: f64, acc: &mut [f64]) {
        let mut s = self.scratch();
        self.forward(x, &mut s);
        self.backward(&mut s, scale, Some(acc), None);
    }

    fn potential_and_grad_x_rows(&self, positions: &[f64], potentials: &mut [f64], grads: &mut [f64]) {
        let d = self.dim();
        par::for_each_block_mut2(grads, d, potentials, 1, BLOCK_ROWS, || self.scratch(), |first, s, g, u| {
            for (r, (gi, ui)) in g.chunks_exact_mut(d).zip(u.iter_mut()).enumerate() {
                let i = first + r;
                *ui = self.energy_and_grad_x(&positions[i * d..(i + 1) * d], gi, s);
            }
        });
    }

    fn potential_rows(&self, positions: &[f64], potentials: &mut [f64]) {
        let d = self.dim();
        par::for_each_block_mut(potentials, 1, BLOCK_ROWS, || self.scratch(), |first, s, u| {
            for (r, ui) in u.iter_mut().enumerate() {
                let i = first + r;
                *ui = self.forward(&positions[i * d..(i + 1) * d], s);
            }
        });
    }

    fn weighted_grad_theta_sum(&self, positions: &[f64], coefs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        par::sum_vec_with(coefs.len(), self.num_params(), || self.scratch(), |i, s, acc| {
            if coefs[i] != 0.0 {
                self.forward(&positions[i * d..(i + 1) * d], s);
                self.backward(s, coefs[i], Some(acc), None);
            }
        })
    }
}

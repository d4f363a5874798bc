//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation applied during a forward pass. Each
//! node stores its value and the op that produced it; [`Tape::backward`]
//! walks the nodes in reverse, accumulating gradients, and finally adds
//! the gradients of parameter leaves into their [`ParamStore`] slots.
//!
//! All ops check their outputs for NaN/Inf and fail with the op name.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;
use rustfft::FftDirection;

use crate::error::{FusionError, Result};
use crate::metrics::gaussian_window;
use crate::spectral;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Guard below which magnitude/phase derivatives are treated as zero.
const POLAR_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    SpatialPoolPair { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Prelu { x: Var, slope: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    ScaleChannels { x: Var, scale: Var },
    ScalePixels { x: Var, map: Var },
    AddPlane { x: Var, plane: Var },
    Concat(Vec<Var>),
    Select { x: Var, channel: usize },
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    FftMagnitude { x: Var, spectrum: Vec<Complex64> },
    FftPhase { x: Var, spectrum: Vec<Complex64> },
    PolarInverse { magnitude: Var, phase: Var },
    GaussianValid(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SpatialPoolPair { .. } => "spatial_pool_pair",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Prelu { .. } => "prelu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Abs(_) => "abs",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ScalePixels { .. } => "scale_pixels",
            Op::AddPlane { .. } => "add_plane",
            Op::Concat(_) => "concat",
            Op::Select { .. } => "select",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::FftMagnitude { .. } => "fft_magnitude",
            Op::FftPhase { .. } => "fft_phase",
            Op::PolarInverse { .. } => "polar_inverse",
            Op::GaussianValid(_) => "gaussian_valid",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FusionError::shape(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row range `[lo, hi)` of outputs whose shifted source `i + d` lies in `[0, n)`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Hash of every branch taken by a non-smooth op: relu, prelu and abs
    /// signs, channel-max winners and the side of the phase branch cut.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let input = |v: &Var| self.nodes[v.0].value.data();
            match &node.op {
                Op::Relu(x) | Op::Prelu { x, .. } => {
                    i.hash(&mut h);
                    input(x).iter().for_each(|&v| (v > 0.0).hash(&mut h));
                }
                Op::Abs(x) => {
                    i.hash(&mut h);
                    input(x).iter().for_each(|&v| (v >= 0.0).hash(&mut h));
                }
                Op::SpatialPoolPair { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::FftPhase { spectrum, .. } => {
                    i.hash(&mut h);
                    spectrum.iter().for_each(|z| (z.re < 0.0 && z.im < 0.0).hash(&mut h));
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(FusionError::NonFinite {
                stage: op.name().to_string(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.grad = None;
        t.requires_grad = false;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).tensor.clone();
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records every parameter of `store`; the result is indexed by [`ParamId`].
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|i| self.param(store, ParamId(i))).collect()
    }

    /// Same-padded, stride-1 cross-correlation.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(FusionError::shape(format!("conv2d: kernel must be rank 4, got {ws:?}")));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(FusionError::shape(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(FusionError::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(FusionError::shape(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let k = kh;
        let pad = (k / 2) as isize;
        let input = self.value(x).data();
        let weight = self.value(w).data();
        let plane = h * wd;
        let mut out = vec![0.0; cout * plane];
        for co in 0..cout {
            let o = &mut out[co * plane..(co + 1) * plane];
            if let Some(b) = b {
                o.fill(self.value(b).data()[co]);
            }
            for ci in 0..cin {
                let src = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(wd, dx);
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * wd + x0..y * wd + x1];
                            let srow = &src[sy * wd + (x0 as isize + dx) as usize..];
                            for (ov, sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
        self.push_raw(vec![cout, h, wd], out, Op::Conv2d { x, w, b })
    }

    /// `out[j] = sum_c w[j,c] * x[c] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [cin] = xs[..] else {
            return Err(FusionError::shape(format!("linear: input must be rank 1, got {xs:?}")));
        };
        let [cout, wcin] = ws[..] else {
            return Err(FusionError::shape(format!("linear: weight must be rank 2, got {ws:?}")));
        };
        if wcin != cin {
            return Err(FusionError::shape(format!(
                "linear: input has {cin} features, weight expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(FusionError::shape(format!(
                    "linear: bias shape {:?} does not match {cout} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out = (0..cout)
            .map(|j| {
                let dot: f64 = wv[j * cin..(j + 1) * cin].iter().zip(xv).map(|(a, b)| a * b).sum();
                dot + b.map_or(0.0, |b| self.value(b).data()[j])
            })
            .collect();
        self.push_raw(vec![cout], out, Op::Linear { x, w, b })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let n = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        self.push_raw(vec![c], out, Op::GlobalAvgPool(x))
    }

    /// Per-pixel channel mean (plane 0) and channel max (plane 1).
    pub fn spatial_pool_pair(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plane = h * w;
        let data = self.value(x).data();
        let mut out = vec![0.0; 2 * plane];
        let mut argmax = vec![0usize; plane];
        for p in 0..plane {
            let mut sum = 0.0;
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = data[ch * plane + p];
                sum += v;
                if v > best {
                    best = v;
                    argmax[p] = ch;
                }
            }
            out[p] = sum / c as f64;
            out[plane + p] = best;
        }
        self.push_raw(vec![2, h, w], out, Op::SpatialPoolPair { x, argmax })
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push_raw(shape, out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x, 0)`; recorded as a relu.
    pub fn clamp_min_zero(&mut self, x: Var) -> Result<Var> {
        self.relu(x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Parametric relu with a single learnable slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(FusionError::shape("prelu: slope must hold a single value"));
        }
        let a = self.value(slope).data()[0];
        self.map_unary(x, |v| if v > 0.0 { v } else { a * v }, Op::Prelu { x, slope })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let name = op.name();
        same_shape(self.value(a), self.value(b), name)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_raw(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).mean();
        self.push_raw(vec![1], vec![m], Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_raw(vec![1], vec![s], Op::Sum(x))
    }

    /// `out[c,:,:] = scale[c] * x[c,:,:]`.
    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(scale).shape() != [c] {
            return Err(FusionError::shape(format!(
                "scale_channels: {c} channels but scale shape {:?}",
                self.value(scale).shape()
            )));
        }
        let s = self.value(scale).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .zip(s)
            .flat_map(|(p, &sv)| p.iter().map(move |v| v * sv))
            .collect();
        self.push_raw(vec![c, h, w], out, Op::ScaleChannels { x, scale })
    }

    /// `out[c,y,x] = map[0,y,x] * x[c,y,x]`.
    pub fn scale_pixels(&mut self, x: Var, map: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(map).shape() != [1, h, w] {
            return Err(FusionError::shape(format!(
                "scale_pixels: map shape {:?} does not match [1,{h},{w}]",
                self.value(map).shape()
            )));
        }
        let m = self.value(map).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .flat_map(|p| p.iter().zip(m).map(|(v, mv)| v * mv))
            .collect();
        self.push_raw(vec![c, h, w], out, Op::ScalePixels { x, map })
    }

    /// Adds a `[1,H,W]` plane to every channel of `x`.
    pub fn add_plane(&mut self, x: Var, plane: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(plane).shape() != [1, h, w] {
            return Err(FusionError::shape(format!(
                "add_plane: plane shape {:?} does not match [1,{h},{w}]",
                self.value(plane).shape()
            )));
        }
        let p = self.value(plane).data();
        let out = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .flat_map(|ch| ch.iter().zip(p).map(|(v, pv)| v + pv))
            .collect();
        self.push_raw(vec![c, h, w], out, Op::AddPlane { x, plane })
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(FusionError::invalid("concat of zero tensors"));
        };
        let tail = self.value(first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != tail[..] {
                return Err(FusionError::shape(format!(
                    "concat: trailing shape {:?} does not match {tail:?}",
                    &s[1..]
                )));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push_raw(shape, out, Op::Concat(parts.to_vec()))
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let plane = self.value(x).channel(channel)?;
        self.push(plane, Op::Select { x, channel })
    }

    /// Per-channel normalization over spatial positions with affine
    /// `gamma`/`beta`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return Err(FusionError::shape(format!(
                    "channel_norm: {what} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let n = (h * w) as f64;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(c * h * w);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * h * w);
        for (ch, p) in self.value(x).data().chunks_exact(h * w).enumerate() {
            let mu = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for &v in p {
                let xh = (v - mu) * inv;
                xhat.push(xh);
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        self.push_raw(
            vec![c, h, w],
            out,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Magnitude of the unnormalized 2-D DFT of each plane.
    pub fn fft_magnitude(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let spectrum = spectral::real_spectrum(self.value(x).data(), c, h, w);
        let mag = spectrum.iter().map(|z| z.norm()).collect();
        self.push_raw(vec![c, h, w], mag, Op::FftMagnitude { x, spectrum })
    }

    /// Phase in `(-pi, pi]` of the 2-D DFT of each plane.
    pub fn fft_phase(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let spectrum = spectral::real_spectrum(self.value(x).data(), c, h, w);
        let phase = spectrum.iter().map(|&z| spectral::phase_of(z)).collect();
        self.push_raw(vec![c, h, w], phase, Op::FftPhase { x, spectrum })
    }

    /// Real part of the inverse DFT of `magnitude * e^{j*phase}`.
    ///
    /// Fails with [`FusionError::ImaginaryResidue`] when the spectrum is not
    /// conjugate symmetric.
    pub fn polar_inverse(&mut self, magnitude: Var, phase: Var) -> Result<Var> {
        same_shape(self.value(magnitude), self.value(phase), "polar_inverse")?;
        let (c, h, w) = self.value(magnitude).chw()?;
        let buf = spectral::polar(self.value(magnitude).data(), self.value(phase).data());
        let out = spectral::real_part_checked(&spectral::inverse_complex(buf, h, w))?;
        self.push_raw(vec![c, h, w], out, Op::PolarInverse { magnitude, phase })
    }

    /// Per-channel 11x11 Gaussian (sigma 1.5) filter over valid positions only.
    pub fn gaussian_valid(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let k = gaussian_window(crate::metrics::SSIM_WINDOW, crate::metrics::SSIM_SIGMA);
        let n = k.len();
        if h < n || w < n {
            return Err(FusionError::shape(format!(
                "gaussian_valid: {h}x{w} image is smaller than the {n}x{n} window"
            )));
        }
        let (oh, ow) = (h - n + 1, w - n + 1);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut tmp = vec![0.0; h * ow];
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for ox in 0..ow {
                    tmp[y * ow + ox] = (0..n).map(|j| k[j] * p[y * w + ox + j]).sum();
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ch * oh + oy) * ow + ox] = (0..n).map(|i| k[i] * tmp[(oy + i) * ow + ox]).sum();
                }
            }
        }
        self.push_raw(vec![c, oh, ow], out, Op::GaussianValid(x))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of parameter leaves are added to the matching entries of
    /// `params`; parameters not reached from `loss` end up with a zero
    /// gradient. Calling twice without [`ParamStore::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        self.backward_only(loss)?;
        for p in params.iter_mut() {
            if p.tensor.grad.is_none() {
                p.tensor.zero_grad();
            }
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let slot = params.get_mut(*id).tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    /// Reverse pass that only fills the tape's own gradient table.
    pub fn backward_only(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(FusionError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$gi:ident| $body:block) => {{
                let $gi: &mut Vec<f64> = slot(grads, nodes, $v);
                $body
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b } => {
                let (cin, h, wd) = self.value(*x).chw().expect("validated in forward");
                let ws = self.value(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let pad = (k / 2) as isize;
                let plane = h * wd;
                let input = val(*x);
                let weight = val(*w);
                let mut gin = vec![0.0; cin * plane];
                let mut gw = vec![0.0; weight.len()];
                for co in 0..cout {
                    let go = &g[co * plane..(co + 1) * plane];
                    for ci in 0..cin {
                        let src = &input[ci * plane..(ci + 1) * plane];
                        let gsrc = &mut gin[ci * plane..(ci + 1) * plane];
                        for ky in 0..k {
                            let dy = ky as isize - pad;
                            let (y0, y1) = valid_range(h, dy);
                            for kx in 0..k {
                                let widx = ((co * cin + ci) * k + ky) * k + kx;
                                let wv = weight[widx];
                                let dx = kx as isize - pad;
                                let (x0, x1) = valid_range(wd, dx);
                                if x0 == x1 {
                                    // kernel tap falls entirely outside the image
                                    continue;
                                }
                                let mut acc_w = 0.0;
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let grow = &go[y * wd + x0..y * wd + x1];
                                    let off = sy * wd + (x0 as isize + dx) as usize;
                                    let srow = &src[off..off + (x1 - x0)];
                                    for (gv, sv) in grow.iter().zip(srow) {
                                        acc_w += gv * sv;
                                    }
                                    let gs = &mut gsrc[off..off + (x1 - x0)];
                                    for (d, gv) in gs.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                                gw[widx] += acc_w;
                            }
                        }
                    }
                }
                acc!(*x, |gx| { add_into(gx, &gin) });
                acc!(*w, |gwv| { add_into(gwv, &gw) });
                if let Some(b) = b {
                    acc!(*b, |gb| {
                        for (co, d) in gb.iter_mut().enumerate() {
                            *d += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let xv = val(*x);
                let wv = val(*w);
                let cin = xv.len();
                acc!(*x, |gx| {
                    for (j, gj) in g.iter().enumerate() {
                        for c in 0..cin {
                            gx[c] += gj * wv[j * cin + c];
                        }
                    }
                });
                acc!(*w, |gw| {
                    for (j, gj) in g.iter().enumerate() {
                        for c in 0..cin {
                            gw[j * cin + c] += gj * xv[c];
                        }
                    }
                });
                if let Some(b) = b {
                    acc!(*b, |gb| { add_into(gb, g) });
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw().expect("validated in forward");
                let plane = h * w;
                acc!(*x, |gx| {
                    for (c, gc) in g.iter().enumerate() {
                        for d in &mut gx[c * plane..(c + 1) * plane] {
                            *d += gc / plane as f64;
                        }
                    }
                });
            }
            Op::SpatialPoolPair { x, argmax } => {
                let (c, h, w) = self.value(*x).chw().expect("validated in forward");
                let plane = h * w;
                acc!(*x, |gx| {
                    for p in 0..plane {
                        let ga = g[p] / c as f64;
                        for ch in 0..c {
                            gx[ch * plane + p] += ga;
                        }
                        gx[argmax[p] * plane + p] += g[plane + p];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc!(*x, |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc!(*x, |gx| {
                    for ((d, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let xv = val(*x);
                let a = val(*slope)[0];
                acc!(*x, |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if *xi > 0.0 { *gv } else { a * gv };
                    }
                });
                acc!(*slope, |ga| {
                    ga[0] += xv.iter().zip(g).filter(|(xi, _)| **xi <= 0.0).map(|(xi, gv)| xi * gv).sum::<f64>();
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |ga| { add_into(ga, g) });
                acc!(*b, |gb| { add_into(gb, g) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| { add_into(ga, g) });
                acc!(*b, |gb| {
                    for (d, gv) in gb.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc!(*b, |gb| {
                    for ((d, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv / y;
                    }
                });
                acc!(*b, |gb| {
                    for (((d, gv), x), y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gv * x / (y * y);
                    }
                });
            }
            Op::AddScalar(x) => {
                acc!(*x, |gx| { add_into(gx, g) });
            }
            Op::MulScalar(x, c) => {
                acc!(*x, |gx| {
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc!(*x, |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gv;
                        } else if *xi < 0.0 {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc!(*x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::ScaleChannels { x, scale } => {
                let (_, h, w) = self.value(*x).chw().expect("validated in forward");
                let plane = h * w;
                let (xv, sv) = (val(*x), val(*scale));
                acc!(*x, |gx| {
                    for (c, s) in sv.iter().enumerate() {
                        for p in c * plane..(c + 1) * plane {
                            gx[p] += g[p] * s;
                        }
                    }
                });
                acc!(*scale, |gs| {
                    for (c, d) in gs.iter_mut().enumerate() {
                        *d += (c * plane..(c + 1) * plane).map(|p| g[p] * xv[p]).sum::<f64>();
                    }
                });
            }
            Op::ScalePixels { x, map } => {
                let (c, h, w) = self.value(*x).chw().expect("validated in forward");
                let plane = h * w;
                let (xv, mv) = (val(*x), val(*map));
                acc!(*x, |gx| {
                    for ch in 0..c {
                        for p in 0..plane {
                            gx[ch * plane + p] += g[ch * plane + p] * mv[p];
                        }
                    }
                });
                acc!(*map, |gm| {
                    for ch in 0..c {
                        for p in 0..plane {
                            gm[p] += g[ch * plane + p] * xv[ch * plane + p];
                        }
                    }
                });
            }
            Op::AddPlane { x, plane } => {
                let (c, h, w) = self.value(*x).chw().expect("validated in forward");
                let n = h * w;
                acc!(*x, |gx| { add_into(gx, g) });
                acc!(*plane, |gp| {
                    for ch in 0..c {
                        for p in 0..n {
                            gp[p] += g[ch * n + p];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc!(p, |gp| { add_into(gp, &g[offset..offset + n]) });
                    offset += n;
                }
            }
            Op::Select { x, channel } => {
                let n = g.len();
                acc!(*x, |gx| { add_into(&mut gx[channel * n..(channel + 1) * n], g) });
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = self.value(*x).chw().expect("validated in forward");
                let plane = h * w;
                let n = plane as f64;
                let gam = val(*gamma);
                acc!(*gamma, |gg| {
                    for (ch, d) in gg.iter_mut().enumerate() {
                        *d += (ch * plane..(ch + 1) * plane).map(|p| g[p] * xhat[p]).sum::<f64>();
                    }
                });
                acc!(*beta, |gb| {
                    for (ch, d) in gb.iter_mut().enumerate() {
                        *d += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                });
                acc!(*x, |gx| {
                    for ch in 0..c {
                        let r = ch * plane..(ch + 1) * plane;
                        let sum_g: f64 = g[r.clone()].iter().sum::<f64>() * gam[ch];
                        let sum_gx: f64 = r.clone().map(|p| g[p] * gam[ch] * xhat[p]).sum();
                        for p in r {
                            let gh = g[p] * gam[ch];
                            gx[p] += inv_std[ch] / n * (n * gh - sum_g - xhat[p] * sum_gx);
                        }
                    }
                });
            }
            Op::FftMagnitude { x, spectrum } => {
                let (_, h, w) = self.value(*x).chw().expect("validated in forward");
                let mut buf: Vec<Complex64> = spectrum
                    .iter()
                    .zip(g)
                    .map(|(z, gv)| {
                        let m = z.norm();
                        if m < POLAR_EPS {
                            Complex64::new(0.0, 0.0)
                        } else {
                            z.conj() * (gv / m)
                        }
                    })
                    .collect();
                spectral::fft2_inplace(&mut buf, h, w, FftDirection::Forward);
                acc!(*x, |gx| {
                    for (d, z) in gx.iter_mut().zip(&buf) {
                        *d += z.re;
                    }
                });
            }
            Op::FftPhase { x, spectrum } => {
                let (_, h, w) = self.value(*x).chw().expect("validated in forward");
                let mut buf: Vec<Complex64> = spectrum
                    .iter()
                    .zip(g)
                    .map(|(z, gv)| {
                        let m2 = z.norm_sqr();
                        if m2 < POLAR_EPS * POLAR_EPS {
                            Complex64::new(0.0, 0.0)
                        } else {
                            z.conj() * (gv / m2)
                        }
                    })
                    .collect();
                spectral::fft2_inplace(&mut buf, h, w, FftDirection::Forward);
                acc!(*x, |gx| {
                    for (d, z) in gx.iter_mut().zip(&buf) {
                        *d += z.im;
                    }
                });
            }
            Op::PolarInverse { magnitude, phase } => {
                let (_, h, w) = self.value(*magnitude).chw().expect("validated in forward");
                let n = (h * w) as f64;
                let mut spec: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                spectral::fft2_inplace(&mut spec, h, w, FftDirection::Forward);
                let (mv, pv) = (val(*magnitude), val(*phase));
                // rotated[u] = e^{j*theta[u]} * conj(G[u]) / (H*W)
                let rotated: Vec<Complex64> = spec
                    .iter()
                    .zip(pv)
                    .map(|(gz, &t)| Complex64::from_polar(1.0 / n, t) * gz.conj())
                    .collect();
                acc!(*magnitude, |gm| {
                    for (d, r) in gm.iter_mut().zip(&rotated) {
                        *d += r.re;
                    }
                });
                acc!(*phase, |gp| {
                    for ((d, r), m) in gp.iter_mut().zip(&rotated).zip(mv) {
                        *d -= m * r.im;
                    }
                });
            }
            Op::GaussianValid(x) => {
                let (c, h, w) = self.value(*x).chw().expect("validated in forward");
                let k = gaussian_window(crate::metrics::SSIM_WINDOW, crate::metrics::SSIM_SIGMA);
                let n = k.len();
                let (oh, ow) = (h - n + 1, w - n + 1);
                acc!(*x, |gx| {
                    let mut tmp = vec![0.0; h * ow];
                    for ch in 0..c {
                        tmp.fill(0.0);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                for (i, ki) in k.iter().enumerate() {
                                    tmp[(oy + i) * ow + ox] += ki * gv;
                                }
                            }
                        }
                        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for y in 0..h {
                            for ox in 0..ow {
                                let t = tmp[y * ow + ox];
                                for (j, kj) in k.iter().enumerate() {
                                    dst[y * w + ox + j] += kj * t;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

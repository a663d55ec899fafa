//! Texture refinement stack: pixel-adaptive convolutions whose kernels are
//! computed from the raw image (the guidance) rather than learned. Each
//! location gets a k×k kernel built from cosine similarities between the
//! center pixel vector and its neighbors, scaled by the inverse window
//! variance, so flat regions average aggressively while textured regions
//! keep their structure. The stack has no trainable parameters.
//!
//! Kernels depend only on the guidance and the layer's dilation, so a stack
//! of L layers needs one kernel field per distinct dilation, not per layer.

use crate::error::{Error, Result};
use crate::num::{reflect_index, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TernConfig {
    /// Number of refinement blocks; 0 turns the stack into the identity.
    pub blocks: usize,
    pub layers_per_block: usize,
    pub kernel_size: usize,
    /// Per-layer dilations within a block, cycled across blocks.
    pub dilations: Vec<usize>,
    pub epsilon: f64,
    /// Scale each kernel so its absolute weights sum to 1.
    pub normalize: bool,
}

impl Default for TernConfig {
    fn default() -> Self {
        Self {
            blocks: 10,
            layers_per_block: 3,
            kernel_size: 3,
            dilations: vec![1, 1, 2],
            epsilon: 1e-6,
            normalize: true,
        }
    }
}

impl TernConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::data(format!(
                "refinement kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.dilations.len() != self.layers_per_block {
            return Err(Error::data(format!(
                "dilations has {} entries for {} layers per block",
                self.dilations.len(),
                self.layers_per_block
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::data("dilations must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::data("epsilon must be a small positive number"));
        }
        Ok(())
    }

    /// Border width beyond which the full stack cannot see a pixel: the sum
    /// of per-layer dilated kernel radii.
    pub fn receptive_radius(&self) -> usize {
        let radius = self.kernel_size / 2;
        self.blocks * self.dilations.iter().map(|d| d * radius).sum::<usize>()
    }
}

/// One per-location kernel: a k×k weight window.
#[derive(Clone, Debug)]
pub struct TernKernel<T = f32> {
    size: usize,
    weights: Vec<T>,
}

impl<T: Real> TernKernel<T> {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weight(&self, p: usize, q: usize) -> T {
        self.weights[p * self.size + q]
    }
}

/// Kernel math shared by the single-window API and the dense field: window
/// is [B, k, k] row-major, out receives k*k weights.
fn kernel_from_window<T: Real>(
    window: &[T],
    bands: usize,
    k: usize,
    epsilon: f64,
    normalize: bool,
    out: &mut [T],
) {
    let eps = T::from_f64(epsilon);
    let taps = k * k;
    let center = (k / 2) * k + k / 2;

    let mut center_sq = T::zero();
    for b in 0..bands {
        let v = window[b * taps + center];
        center_sq += v * v;
    }
    let center_mag = center_sq.sqrt();

    let count = T::from_f64((bands * taps) as f64);
    let mut mean = T::zero();
    for &v in &window[..bands * taps] {
        mean += v;
    }
    mean /= count;
    let mut var = T::zero();
    for &v in &window[..bands * taps] {
        let d = v - mean;
        var += d * d;
    }
    var /= count;

    for t in 0..taps {
        let mut dot = T::zero();
        let mut mag_sq = T::zero();
        for b in 0..bands {
            let v = window[b * taps + t];
            dot += window[b * taps + center] * v;
            mag_sq += v * v;
        }
        let cos = dot / (center_mag * mag_sq.sqrt() + eps);
        out[t] = -cos / (var + eps);
    }

    if normalize {
        let mut sum = T::zero();
        for &w in out.iter() {
            sum += w.abs();
        }
        if sum >= eps {
            for w in out.iter_mut() {
                *w /= sum;
            }
        }
    }
}

/// Kernel for one already-extracted guidance window [B, k, k].
pub fn compute_kernel<T: Real>(
    window: &Tensor<T>,
    epsilon: f64,
    normalize: bool,
) -> Result<TernKernel<T>> {
    let (bands, h, w) = window.dims3()?;
    if h != w || h % 2 == 0 {
        return Err(Error::data(format!(
            "guidance window must be square with odd side, got {h}x{w}"
        )));
    }
    let mut weights = vec![T::zero(); h * w];
    kernel_from_window(window.data(), bands, h, epsilon, normalize, &mut weights);
    Ok(TernKernel { size: h, weights })
}

/// All per-location kernels of one image at one dilation, stored flat as
/// [H, W, k*k].
pub struct KernelField<T = f32> {
    height: usize,
    width: usize,
    size: usize,
    dilation: usize,
    weights: Vec<T>,
}

impl<T: Real> KernelField<T> {
    pub fn at(&self, i: usize, j: usize) -> &[T] {
        let taps = self.size * self.size;
        let start = (i * self.width + j) * taps;
        &self.weights[start..start + taps]
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }
}

/// Computes the kernel field of `guidance` [B, H, W] for one dilation, with
/// reflect padding for windows that overhang the border.
pub fn compute_kernel_field<T: Real>(
    guidance: &Tensor<T>,
    kernel_size: usize,
    dilation: usize,
    epsilon: f64,
    normalize: bool,
) -> Result<KernelField<T>> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::data("kernel size must be odd"));
    }
    if dilation == 0 {
        return Err(Error::data("dilation must be >= 1"));
    }
    let (bands, height, width) = guidance.dims3()?;
    let k = kernel_size;
    let taps = k * k;
    let radius = (k / 2) as isize;
    let d = dilation as isize;
    let g = guidance.data();

    let mut weights = vec![T::zero(); height * width * taps];
    let mut window = vec![T::zero(); bands * taps];
    for i in 0..height {
        for j in 0..width {
            for p in 0..k {
                let sy = reflect_index(i as isize + (p as isize - radius) * d, height);
                for q in 0..k {
                    let sx = reflect_index(j as isize + (q as isize - radius) * d, width);
                    let src = sy * width + sx;
                    for b in 0..bands {
                        window[b * taps + p * k + q] = g[b * height * width + src];
                    }
                }
            }
            let start = (i * width + j) * taps;
            kernel_from_window(
                &window,
                bands,
                k,
                epsilon,
                normalize,
                &mut weights[start..start + taps],
            );
        }
    }
    Ok(KernelField { height, width, size: k, dilation, weights })
}

fn check_spatial<T: Real>(features: &Tensor<T>, field: &KernelField<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = features.dims3()?;
    if h != field.height || w != field.width {
        return Err(Error::data(format!(
            "features {h}x{w} do not match kernel field {}x{}",
            field.height, field.width
        )));
    }
    Ok((c, h, w))
}

/// output(c,i,j) = Σ_{p,q} kernel^{i,j}(p,q) · features(c, i+(p-r)·d, j+(q-r)·d)
/// with reflect padding; every channel shares the per-location kernel.
pub fn apply_kernel_field<T: Real>(features: &Tensor<T>, field: &KernelField<T>) -> Result<Tensor<T>> {
    let (channels, h, w) = check_spatial(features, field)?;
    let k = field.size;
    let taps = k * k;
    let radius = (k / 2) as isize;
    let d = field.dilation as isize;
    let plane = h * w;
    let x = features.data();

    let mut out = vec![T::zero(); channels * plane];
    let mut src = vec![0usize; taps];
    for i in 0..h {
        for j in 0..w {
            for p in 0..k {
                let sy = reflect_index(i as isize + (p as isize - radius) * d, h);
                for q in 0..k {
                    let sx = reflect_index(j as isize + (q as isize - radius) * d, w);
                    src[p * k + q] = sy * w + sx;
                }
            }
            let kw = field.at(i, j);
            let dst = i * w + j;
            for c in 0..channels {
                let base = c * plane;
                let mut acc = T::zero();
                for t in 0..taps {
                    acc += kw[t] * x[base + src[t]];
                }
                out[base + dst] = acc;
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Adjoint of `apply_kernel_field`: scatters each output gradient back
/// through the taps that produced it. Kernels are constants of the guidance,
/// so this is the entire feature gradient.
pub fn apply_kernel_field_transpose<T: Real>(
    grad_output: &Tensor<T>,
    field: &KernelField<T>,
) -> Result<Tensor<T>> {
    let (channels, h, w) = check_spatial(grad_output, field)?;
    let k = field.size;
    let taps = k * k;
    let radius = (k / 2) as isize;
    let d = field.dilation as isize;
    let plane = h * w;
    let g = grad_output.data();

    let mut out = vec![T::zero(); channels * plane];
    let mut src = vec![0usize; taps];
    for i in 0..h {
        for j in 0..w {
            for p in 0..k {
                let sy = reflect_index(i as isize + (p as isize - radius) * d, h);
                for q in 0..k {
                    let sx = reflect_index(j as isize + (q as isize - radius) * d, w);
                    src[p * k + q] = sy * w + sx;
                }
            }
            let kw = field.at(i, j);
            let at = i * w + j;
            for c in 0..channels {
                let base = c * plane;
                let go = g[base + at];
                if go == T::zero() {
                    continue;
                }
                for t in 0..taps {
                    out[base + src[t]] += kw[t] * go;
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

/// One refinement layer straight from guidance, computing the kernel field
/// on the fly. The stack path below reuses fields across layers instead.
pub fn refine_layer<T: Real>(
    features: &Tensor<T>,
    guidance: &Tensor<T>,
    kernel_size: usize,
    dilation: usize,
    epsilon: f64,
    normalize: bool,
) -> Result<Tensor<T>> {
    let field = compute_kernel_field(guidance, kernel_size, dilation, epsilon, normalize)?;
    apply_kernel_field(features, &field)
}

/// The full refinement stack for one guidance image: kernel fields computed
/// once per distinct dilation, then blocks·layers_per_block linear layers.
pub struct TernStack<T = f32> {
    height: usize,
    width: usize,
    fields: Vec<KernelField<T>>,
    /// Field index per layer, already unrolled across blocks.
    layer_field: Vec<usize>,
}

impl<T: Real> TernStack<T> {
    pub fn new(guidance: &Tensor<T>, cfg: &TernConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, height, width) = guidance.dims3()?;

        let mut distinct: Vec<usize> = Vec::new();
        for &d in &cfg.dilations {
            if !distinct.contains(&d) {
                distinct.push(d);
            }
        }
        let fields = if cfg.blocks == 0 {
            Vec::new()
        } else {
            distinct
                .iter()
                .map(|&d| {
                    compute_kernel_field(guidance, cfg.kernel_size, d, cfg.epsilon, cfg.normalize)
                })
                .collect::<Result<Vec<_>>>()?
        };

        let mut layer_field = Vec::with_capacity(cfg.blocks * cfg.layers_per_block);
        if cfg.blocks > 0 {
            for _ in 0..cfg.blocks {
                for &d in &cfg.dilations {
                    let idx = distinct.iter().position(|&x| x == d).expect("dilation listed");
                    layer_field.push(idx);
                }
            }
        }
        Ok(Self { height, width, fields, layer_field })
    }

    pub fn layers(&self) -> usize {
        self.layer_field.len()
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = features.dims3()?;
        if h != self.height || w != self.width {
            return Err(Error::data(format!(
                "features {h}x{w} do not match refinement stack {}x{}",
                self.height, self.width
            )));
        }
        let mut x = features.clone();
        for &f in &self.layer_field {
            x = apply_kernel_field(&x, &self.fields[f])?;
        }
        Ok(x)
    }

    /// Feature gradient through the whole stack. The layers are linear with
    /// constant kernels, so no forward activations are needed.
    pub fn backward(&self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = grad_output.dims3()?;
        if h != self.height || w != self.width {
            return Err(Error::data(format!(
                "gradient {h}x{w} does not match refinement stack {}x{}",
                self.height, self.width
            )));
        }
        let mut g = grad_output.clone();
        for &f in self.layer_field.iter().rev() {
            g = apply_kernel_field_transpose(&g, &self.fields[f])?;
        }
        Ok(g)
    }
}

/// Applies the configured refinement stack to `features` under `guidance`.
pub fn tern_forward<T: Real>(
    features: &Tensor<T>,
    guidance: &Tensor<T>,
    cfg: &TernConfig,
) -> Result<Tensor<T>> {
    TernStack::new(guidance, cfg)?.forward(features)
}

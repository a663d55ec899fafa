//! Patch encoder: a small bias-free convolutional network with the texture
//! refinement stack inserted after the stem, ending in a global average pool,
//! a linear projection, and L2 normalization.
//!
//! Every layer is bias-free and ReLU is positively homogeneous, so scaling
//! the input patch by any positive gain scales the raw descriptor by a gain
//! power and the normalized descriptor not at all. Illumination-gain
//! invariance is structural, not learned.

use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{conv2d, conv2d_backward, PadMode, Real, Tensor};
use crate::rng;
use crate::tern::{TernConfig, TernStack};

/// Guard inside the descriptor normalization; a patch that reaches the
/// projection as exactly zero maps to the zero descriptor instead of NaN.
const NORM_EPS: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub bands: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub descriptor_dim: usize,
    pub tern: TernConfig,
}

impl BackboneConfig {
    pub fn for_bands(bands: usize) -> Self {
        Self {
            bands,
            stem_channels: 16,
            block_channels: vec![16, 32],
            descriptor_dim: 64,
            tern: TernConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::data("backbone needs at least one input band"));
        }
        if self.stem_channels == 0 || self.descriptor_dim == 0 {
            return Err(Error::data("channel counts and descriptor dim must be positive"));
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::data("block channel list must be non-empty and positive"));
        }
        self.tern.validate()
    }

}

#[derive(Clone, Debug)]
pub struct BlockParams<T = f32> {
    pub conv1: Tensor<T>,
    pub conv2: Tensor<T>,
    /// 1x1 projection on the skip path when the block changes width.
    pub skip: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams<T = f32> {
    pub stem: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub proj: Tensor<T>,
}

impl<T: Real> BackboneParams<T> {
    /// Stable (name, tensor) listing; the order defines the optimizer slot
    /// and checkpoint record layout.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("stem.weight".into(), &self.stem)];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            out.push((format!("block{n}.conv1.weight"), &b.conv1));
            out.push((format!("block{n}.conv2.weight"), &b.conv2));
            if let Some(s) = &b.skip {
                out.push((format!("block{n}.skip.weight"), s));
            }
        }
        out.push(("proj.weight".into(), &self.proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("stem.weight".into(), &mut self.stem)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            out.push((format!("block{n}.conv1.weight"), &mut b.conv1));
            out.push((format!("block{n}.conv2.weight"), &mut b.conv2));
            if let Some(s) = &mut b.skip {
                out.push((format!("block{n}.skip.weight"), s));
            }
        }
        out.push(("proj.weight".into(), &mut self.proj));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: Tensor::zeros(self.stem.shape().to_vec()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    conv1: Tensor::zeros(b.conv1.shape().to_vec()),
                    conv2: Tensor::zeros(b.conv2.shape().to_vec()),
                    skip: b.skip.as_ref().map(|s| Tensor::zeros(s.shape().to_vec())),
                })
                .collect(),
            proj: Tensor::zeros(self.proj.shape().to_vec()),
        }
    }

    /// self += other, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::data("block count mismatch in gradient accumulation"));
        }
        self.stem.axpy(T::one(), &other.stem);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.conv1.axpy(T::one(), &b.conv1);
            a.conv2.axpy(T::one(), &b.conv2);
            match (&mut a.skip, &b.skip) {
                (Some(x), Some(y)) => x.axpy(T::one(), y),
                (None, None) => {}
                _ => return Err(Error::data("skip presence mismatch in gradient accumulation")),
            }
        }
        self.proj.axpy(T::one(), &other.proj);
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> BackboneParams<U> {
        BackboneParams {
            stem: self.stem.convert(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    conv1: b.conv1.convert(),
                    conv2: b.conv2.convert(),
                    skip: b.skip.as_ref().map(|s| s.convert()),
                })
                .collect(),
            proj: self.proj.convert(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

fn he_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Seed-deterministic He-style uniform initialization, drawn in the fixed
/// `named()` order.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams<f32>> {
    cfg.validate()?;
    let mut rng = rng::backbone_init(seed);
    let k = 3usize;

    let stem = he_uniform(
        vec![cfg.stem_channels, cfg.bands, k, k],
        cfg.bands * k * k,
        &mut rng,
    );
    let mut blocks = Vec::with_capacity(cfg.block_channels.len());
    let mut in_ch = cfg.stem_channels;
    for &out_ch in &cfg.block_channels {
        let conv1 = he_uniform(vec![out_ch, in_ch, k, k], in_ch * k * k, &mut rng);
        let conv2 = he_uniform(vec![out_ch, out_ch, k, k], out_ch * k * k, &mut rng);
        let skip = if in_ch != out_ch {
            Some(he_uniform(vec![out_ch, in_ch, 1, 1], in_ch, &mut rng))
        } else {
            None
        };
        blocks.push(BlockParams { conv1, conv2, skip });
        in_ch = out_ch;
    }
    let proj = he_uniform(vec![cfg.descriptor_dim, in_ch], in_ch, &mut rng);
    Ok(BackboneParams { stem, blocks, proj })
}

fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// grad ⊙ [activation > 0], the ReLU backward using the stored output.
fn relu_backward<T: Real>(grad: &Tensor<T>, activation: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    for (g, &a) in out.data_mut().iter_mut().zip(activation.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
    out
}

struct BlockTrace<T> {
    input: Tensor<T>,
    act1: Tensor<T>,
    out: Tensor<T>,
}

/// Everything the backward pass needs from one forward encode.
pub struct EncodeTrace<T = f32> {
    patch: Tensor<T>,
    stem_act: Tensor<T>,
    tern: TernStack<T>,
    blocks: Vec<BlockTrace<T>>,
    pooled: Tensor<T>,
    z_raw: Tensor<T>,
    z: Tensor<T>,
}

impl<T: Real> EncodeTrace<T> {
    pub fn descriptor(&self) -> &Tensor<T> {
        &self.z
    }
}

fn block_forward<T: Real>(x: &Tensor<T>, block: &BlockParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let pre1 = conv2d(x, &block.conv1, 1, PadMode::Reflect)?;
    let act1 = relu(&pre1);
    let pre2 = conv2d(&act1, &block.conv2, 1, PadMode::Reflect)?;
    let skip = match &block.skip {
        Some(w) => conv2d(x, w, 1, PadMode::Reflect)?,
        None => x.clone(),
    };
    let mut sum = pre2;
    sum.axpy(T::one(), &skip);
    Ok((act1, relu(&sum)))
}

fn global_average_pool<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); c];
    for (ch, slot) in out.iter_mut().enumerate() {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = T::zero();
        for &v in plane {
            acc += v;
        }
        *slot = acc * scale;
    }
    Tensor::new(vec![c], out)
}

/// Encodes one patch (the patch doubles as its own kernel guidance) and
/// keeps all intermediates for the backward pass.
pub fn encode_patch_traced<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    patch: &Tensor<T>,
) -> Result<EncodeTrace<T>> {
    let (bands, _, _) = patch.dims3()?;
    if bands != cfg.bands {
        return Err(Error::data(format!(
            "patch has {bands} bands, backbone expects {}",
            cfg.bands
        )));
    }
    let stem_pre = conv2d(patch, &params.stem, 1, PadMode::Reflect)?;
    let stem_act = relu(&stem_pre);
    let tern = TernStack::new(patch, &cfg.tern)?;
    let refined = tern.forward(&stem_act)?;

    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut x = refined;
    for block in &params.blocks {
        let (act1, out) = block_forward(&x, block)?;
        let input = std::mem::replace(&mut x, out.clone());
        blocks.push(BlockTrace { input, act1, out });
    }

    let pooled = global_average_pool(&x)?;
    let (d_out, d_in) = params.proj.dims2()?;
    if d_in != pooled.len() {
        return Err(Error::data(format!(
            "projection expects {d_in} channels, pooled features have {}",
            pooled.len()
        )));
    }
    let mut z_raw = vec![T::zero(); d_out];
    for (d, slot) in z_raw.iter_mut().enumerate() {
        let row = &params.proj.data()[d * d_in..(d + 1) * d_in];
        let mut acc = T::zero();
        for (w, &p) in row.iter().zip(pooled.data()) {
            acc += *w * p;
        }
        *slot = acc;
    }
    let z_raw = Tensor::new(vec![d_out], z_raw)?;
    let norm = (z_raw.data().iter().map(|&v| v * v).sum::<T>() + T::from_f64(NORM_EPS)).sqrt();
    let z = z_raw.map(|v| v / norm);

    Ok(EncodeTrace { patch: patch.clone(), stem_act, tern, blocks, pooled, z_raw, z })
}

/// Unit-length descriptor of one patch. The lone exception to unit length is
/// an input whose features die completely, which maps to the zero vector.
pub fn encode_patch<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    patch: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(encode_patch_traced(params, cfg, patch)?.z)
}

/// Row i of the result is encode_patch(patches[i]), shape [N, D].
pub fn encode_batch<T: Real>(
    params: &BackboneParams<T>,
    cfg: &BackboneConfig,
    patches: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if patches.is_empty() {
        return Err(Error::data("encode_batch needs at least one patch"));
    }
    let d = cfg.descriptor_dim;
    let mut data = Vec::with_capacity(patches.len() * d);
    for patch in patches {
        let z = encode_patch(params, cfg, patch)?;
        data.extend_from_slice(z.data());
    }
    Tensor::new(vec![patches.len(), d], data)
}

fn block_backward<T: Real>(
    block: &BlockParams<T>,
    trace: &BlockTrace<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BlockParams<T>)> {
    let grad_sum = relu_backward(grad_out, &trace.out);
    let (grad_act1, grad_conv2) = conv2d_backward(&trace.act1, &block.conv2, &grad_sum, 1, PadMode::Reflect)?;
    let grad_pre1 = relu_backward(&grad_act1, &trace.act1);
    let (mut grad_input, grad_conv1) =
        conv2d_backward(&trace.input, &block.conv1, &grad_pre1, 1, PadMode::Reflect)?;
    let grad_skip = match &block.skip {
        Some(w) => {
            let (gx, gw) = conv2d_backward(&trace.input, w, &grad_sum, 1, PadMode::Reflect)?;
            grad_input.axpy(T::one(), &gx);
            Some(gw)
        }
        None => {
            grad_input.axpy(T::one(), &grad_sum);
            None
        }
    };
    Ok((grad_input, BlockParams { conv1: grad_conv1, conv2: grad_conv2, skip: grad_skip }))
}

/// Parameter gradients of a scalar loss given dL/dz for one encoded patch.
pub fn encode_backward<T: Real>(
    params: &BackboneParams<T>,
    trace: &EncodeTrace<T>,
    grad_z: &Tensor<T>,
) -> Result<BackboneParams<T>> {
    if grad_z.shape() != trace.z.shape() {
        return Err(Error::data("descriptor gradient shape mismatch"));
    }

    // z = r / sqrt(|r|^2 + eps): dL/dr = s * (g - z * <z, g>) with
    // s = 1 / sqrt(|r|^2 + eps).
    let norm_sq = trace.z_raw.data().iter().map(|&v| v * v).sum::<T>() + T::from_f64(NORM_EPS);
    let inv_norm = T::one() / norm_sq.sqrt();
    let zg = trace
        .z
        .data()
        .iter()
        .zip(grad_z.data())
        .map(|(&a, &b)| a * b)
        .sum::<T>();
    let grad_raw: Vec<T> = trace
        .z
        .data()
        .iter()
        .zip(grad_z.data())
        .map(|(&z, &g)| inv_norm * (g - z * zg))
        .collect();

    let (d_out, d_in) = params.proj.dims2()?;
    let mut grad_proj = vec![T::zero(); d_out * d_in];
    let mut grad_pooled = vec![T::zero(); d_in];
    for d in 0..d_out {
        let g = grad_raw[d];
        let row = &params.proj.data()[d * d_in..(d + 1) * d_in];
        for c in 0..d_in {
            grad_proj[d * d_in + c] = g * trace.pooled.data()[c];
            grad_pooled[c] += g * row[c];
        }
    }

    let last = trace.blocks.last().expect("backbone has at least one block");
    let (_, h, w) = last.out.dims3()?;
    let scale = T::from_f64(1.0 / (h * w) as f64);
    let mut grad_feat = Tensor::zeros(last.out.shape().to_vec());
    for c in 0..d_in {
        let g = grad_pooled[c] * scale;
        for v in &mut grad_feat.data_mut()[c * h * w..(c + 1) * h * w] {
            *v = g;
        }
    }

    let mut block_grads: Vec<BlockParams<T>> = Vec::with_capacity(params.blocks.len());
    let mut grad = grad_feat;
    for (block, trace_b) in params.blocks.iter().zip(&trace.blocks).rev() {
        let (grad_in, grads) = block_backward(block, trace_b, &grad)?;
        block_grads.push(grads);
        grad = grad_in;
    }
    block_grads.reverse();

    let grad_refined = grad;
    let grad_stem_act = trace.tern.backward(&grad_refined)?;
    let grad_stem_pre = relu_backward(&grad_stem_act, &trace.stem_act);
    let (_, grad_stem) = conv2d_backward(&trace.patch, &params.stem, &grad_stem_pre, 1, PadMode::Reflect)?;

    Ok(BackboneParams {
        stem: grad_stem,
        blocks: block_grads,
        proj: Tensor::new(vec![d_out, d_in], grad_proj)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{finite_diff_check, DEFAULT_EPS};
    use crate::rng::substream;
    use rand::Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            bands: 2,
            stem_channels: 4,
            block_channels: vec![4, 6],
            descriptor_dim: 8,
            tern: TernConfig {
                blocks: 1,
                layers_per_block: 2,
                dilations: vec![1, 2],
                ..TernConfig::default()
            },
        }
    }

    fn random_patch(bands: usize, side: usize, name: &str) -> Tensor<f32> {
        let mut rng = substream(41, name);
        Tensor::new(
            vec![bands, side, side],
            (0..bands * side * side).map(|_| rng.gen_range(0.05f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = BackboneConfig::for_bands(4);
        let a = init_backbone(&cfg, 7).unwrap();
        let b = init_backbone(&cfg, 7).unwrap();
        let c = init_backbone(&cfg, 8).unwrap();
        for ((na, ta), (_, tb)) in a.named().iter().zip(b.named()) {
            assert_eq!(ta.data(), tb.data(), "{na} differs across identical seeds");
        }
        assert_ne!(a.stem.data(), c.stem.data());
    }

    #[test]
    fn stem_init_variance_tracks_fan_in() {
        let cfg = BackboneConfig::for_bands(4);
        let params = init_backbone(&cfg, 3).unwrap();
        let data = params.stem.data();
        let mean: f64 = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let expect = 2.0 / (4.0 * 9.0);
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "stem variance {var} vs expected {expect}"
        );
    }

    #[test]
    fn named_order_is_stable_and_complete() {
        let cfg = BackboneConfig::for_bands(4);
        let params = init_backbone(&cfg, 1).unwrap();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec![
                "stem.weight",
                "block1.conv1.weight",
                "block1.conv2.weight",
                "block2.conv1.weight",
                "block2.conv2.weight",
                "block2.skip.weight",
                "proj.weight",
            ]
        );
        assert_eq!(
            params.param_count(),
            16 * 4 * 9 + 16 * 16 * 9 + 16 * 16 * 9 + 32 * 16 * 9 + 32 * 32 * 9 + 32 * 16 + 64 * 32
        );
    }

    #[test]
    fn descriptors_are_unit_length() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 5).unwrap();
        for i in 0..8 {
            let patch = random_patch(2, 7, &format!("unit.{i}"));
            let z = encode_patch(&params, &cfg, &patch).unwrap();
            let norm: f32 = z.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }

    #[test]
    fn zero_patch_encodes_deterministically() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 5).unwrap();
        let patch = Tensor::zeros(vec![2, 7, 7]);
        let a = encode_patch(&params, &cfg, &patch).unwrap();
        let b = encode_patch(&params, &cfg, &patch).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.all_finite());
    }

    #[test]
    fn descriptor_ignores_global_gain() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 9).unwrap();
        let patch = random_patch(2, 7, "gain");
        let z = encode_patch(&params, &cfg, &patch).unwrap();
        for &gain in &[0.5f32, 2.0, 10.0] {
            let scaled = patch.map(|v| v * gain);
            let zs = encode_patch(&params, &cfg, &scaled).unwrap();
            let diff = z
                .data()
                .iter()
                .zip(zs.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-4, "gain {gain}: descriptor moved by {diff}");
        }
    }

    #[test]
    fn batch_matches_single_encodes() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 11).unwrap();
        let patches: Vec<Tensor<f32>> =
            (0..3).map(|i| random_patch(2, 7, &format!("batch.{i}"))).collect();
        let batch = encode_batch(&params, &cfg, &patches).unwrap();
        assert_eq!(batch.shape(), &[3, 8]);
        for (i, patch) in patches.iter().enumerate() {
            let z = encode_patch(&params, &cfg, patch).unwrap();
            for d in 0..8 {
                let got = batch.data()[i * 8 + d];
                assert!((got - z.data()[d]).abs() < 1e-6);
            }
        }
        let swapped = vec![patches[2].clone(), patches[0].clone(), patches[1].clone()];
        let batch2 = encode_batch(&params, &cfg, &swapped).unwrap();
        assert_eq!(&batch2.data()[0..8], &batch.data()[16..24]);
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 13).unwrap().convert::<f64>();
        let patch = random_patch(2, 5, "fd.patch").convert::<f64>();
        let mut rng = substream(43, "fd.head");
        let head: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let trace = encode_patch_traced(&params, &cfg, &patch).unwrap();
        let grad_z = Tensor::new(vec![8], head.clone()).unwrap();
        let grads = encode_backward(&params, &trace, &grad_z).unwrap();

        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let analytic = grads.named()[idx].1.clone();
            let base = params.named()[idx].1.clone();
            let loss = |x: &Tensor<f64>| -> crate::Result<f64> {
                let mut p = params.clone();
                *p.named_mut()[idx].1 = x.clone();
                let z = encode_patch(&p, &cfg, &patch)?;
                Ok(z.data().iter().zip(&head).map(|(a, b)| a * b).sum())
            };
            let worst = finite_diff_check(loss, &base, &analytic, DEFAULT_EPS).unwrap();
            assert!(worst <= 1e-3, "{name}: worst relative error {worst}");
        }
    }

    #[test]
    fn band_mismatch_is_rejected() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 1).unwrap();
        let patch = random_patch(3, 7, "bands");
        assert!(encode_patch(&params, &cfg, &patch).is_err());
    }

    #[test]
    fn config_validation_catches_empty_blocks() {
        let mut cfg = BackboneConfig::for_bands(4);
        cfg.block_channels.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::for_bands(4);
        cfg.descriptor_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradients_accumulate_tensor_by_tensor() {
        let cfg = small_cfg();
        let params = init_backbone(&cfg, 2).unwrap();
        let mut acc = params.zeros_like();
        acc.accumulate(&params).unwrap();
        acc.accumulate(&params).unwrap();
        for ((_, a), (_, p)) in acc.named().iter().zip(params.named()) {
            for (x, y) in a.data().iter().zip(p.data()) {
                assert!((x - 2.0 * y).abs() < 1e-6);
            }
        }
    }
}

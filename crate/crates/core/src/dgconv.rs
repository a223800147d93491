//! Deformable Gabor convolution layer.
//!
//! Stage one is a deformable convolution whose filters are the learned
//! convolution filters `C` modulated by the learned masks `S`; it yields `V`
//! intermediate maps per output channel. Stage two convolves those maps with
//! the shared Gabor bank modulated by the same masks, yielding one response
//! per orientation.
//!
//! Feature maps carry an explicit orientation axis: `[U, N, H, W]`. Where the
//! orientation axis is folded into channels (offset prediction, stage one),
//! the flat channel index is `u * N + n`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{
    deform_conv_backward, deform_conv_forward, predict_offsets, predict_offsets_backward,
    OffsetField, OffsetPredictor,
};
use crate::error::{arg_err, shape_err, Result};
use crate::gabor::GaborBank;
use crate::tensor::{conv2d_backward, conv2d_naive, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    /// `U`
    pub orientations: usize,
    /// `V`
    pub masks: usize,
    /// `H`
    pub kernel: usize,
    /// `N`, per orientation
    pub in_channels: usize,
    /// `M`, per orientation
    pub out_channels: usize,
}

/// Channel count per orientation that keeps filter parameters level with a
/// plain layer of `plain` channels: `round(plain / sqrt(U))`, at least 1.
pub fn per_orientation_channels(plain: usize, orientations: usize) -> usize {
    ((plain as f64 / (orientations as f64).sqrt()).round() as usize).max(1)
}

impl LayerShape {
    pub fn new(
        orientations: usize,
        masks: usize,
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let s = Self {
            orientations,
            masks,
            kernel,
            in_channels,
            out_channels,
        };
        s.validate()?;
        Ok(s)
    }

    /// Shape matched to a plain `M0 x N0 x H x H` convolution by the square-root rule.
    pub fn from_plain(
        n0: usize,
        m0: usize,
        orientations: usize,
        masks: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(
            orientations,
            masks,
            kernel,
            per_orientation_channels(n0, orientations),
            per_orientation_channels(m0, orientations),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations == 0
            || self.masks == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(arg_err!("layer dimensions must be positive: {self:?}"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(arg_err!("kernel side must be odd, got {}", self.kernel));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub filters: usize,
    pub masks: usize,
    pub offset: usize,
    pub offset_bias: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.filters + self.masks + self.offset + self.offset_bias
    }
}

/// Learnable scalars of one layer, by block.
pub fn param_count(shape: &LayerShape) -> ParamCount {
    let hh = shape.kernel * shape.kernel;
    let flat_in = shape.in_channels * shape.orientations;
    ParamCount {
        filters: shape.out_channels * flat_in * hh,
        masks: shape.masks * hh,
        offset: 2 * hh * flat_in * hh,
        offset_bias: 2 * hh,
    }
}

/// Filter parameters of a plain `M0 x N0 x H x H` convolution.
pub fn plain_filter_params(n0: usize, m0: usize, kernel: usize) -> usize {
    m0 * n0 * kernel * kernel
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    /// True gradients of the composed forward map.
    #[default]
    Exact,
    /// Literal mask and filter update directions: `dS = dL/dG_hat * sum_u G_u`
    /// and `dC = dL/dD_hat * sum_v S_v`. Offset and input gradients stay exact.
    Paper,
}

/// Feature map with explicit orientation axis `[U, N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientedFeature {
    data: Tensor,
}

impl OrientedFeature {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(shape_err!(
                "oriented feature must be [U,N,H,W], got {:?}",
                data.shape()
            ));
        }
        Ok(Self { data })
    }

    pub fn orientations(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Orientation axis folded into channels: `[U*N, H, W]`.
    pub fn flattened(&self) -> Tensor {
        let s = self.data.shape();
        self.data
            .clone()
            .reshape(&[s[0] * s[1], s[2], s[3]])
            .expect("element count unchanged")
    }
}

/// Duplicates `input [N, H, W]` along a new leading orientation axis of length `U`.
pub fn expand_orientation(input: &Tensor, orientations: usize) -> Result<OrientedFeature> {
    if input.rank() != 3 {
        return Err(shape_err!("expected [N,H,W], got {:?}", input.shape()));
    }
    if orientations == 0 {
        return Err(arg_err!("orientation count must be at least 1"));
    }
    let s = input.shape();
    let mut data = Vec::with_capacity(orientations * input.len());
    for _ in 0..orientations {
        data.extend_from_slice(input.data());
    }
    OrientedFeature::new(Tensor::from_vec(&[orientations, s[0], s[1], s[2]], data)?)
}

/// Gradient of [`expand_orientation`]: sums the orientation slices.
pub fn reduce_orientation(grad: &OrientedFeature) -> Tensor {
    let s = grad.tensor().shape();
    let inner = s[1] * s[2] * s[3];
    let mut out = vec![0.0; inner];
    for chunk in grad.tensor().data().chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    Tensor::from_vec(&s[1..], out).expect("shape from existing tensor")
}

fn check_masks(masks: &Tensor) -> Result<(usize, usize)> {
    let s = masks.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(shape_err!("masks must be [V,H,H], got {s:?}"));
    }
    Ok((s[0], s[1]))
}

/// `D_hat[m,n,u,v] = C[m,n,u] * S[v]` elementwise: `[M,N,U,V,H,H]`.
pub fn modulate_conv(conv: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (v, h) = check_masks(masks)?;
    let cs = conv.shape();
    if cs.len() != 5 || cs[3] != h || cs[4] != h {
        return Err(shape_err!(
            "conv filters must be [M,N,U,{h},{h}] to match masks, got {cs:?}"
        ));
    }
    let hh = h * h;
    let mut out = Vec::with_capacity(conv.len() * v);
    for filt in conv.data().chunks(hh) {
        for mask in masks.data().chunks(hh) {
            out.extend(filt.iter().zip(mask).map(|(a, b)| a * b));
        }
    }
    Tensor::from_vec(&[cs[0], cs[1], cs[2], v, h, h], out)
}

/// `G_hat[v,u] = S[v] * G[u]` elementwise: `[V,U,H,H]`.
pub fn modulate_gabor(bank: &GaborBank, masks: &Tensor) -> Result<Tensor> {
    let (v, h) = check_masks(masks)?;
    if bank.kernel() != h {
        return Err(shape_err!(
            "Gabor kernel {} does not match mask side {h}",
            bank.kernel()
        ));
    }
    let u = bank.orientations();
    let hh = h * h;
    let mut out = Vec::with_capacity(v * u * hh);
    for mask in masks.data().chunks(hh) {
        for filt in bank.filters().data().chunks(hh) {
            out.extend(mask.iter().zip(filt).map(|(a, b)| a * b));
        }
    }
    Tensor::from_vec(&[v, u, h, h], out)
}

/// Learnable state of one layer plus the shared Gabor bank.
#[derive(Clone, Debug)]
pub struct DGConvParams {
    /// `C`: `[M, N, U, H, H]`
    pub conv: Tensor,
    /// `S`: `[V, H, H]`
    pub masks: Tensor,
    /// Reads the `N*U` folded input channels.
    pub offset: OffsetPredictor,
    pub gabor: Arc<GaborBank>,
}

impl DGConvParams {
    /// Fan-in uniform filters, identity masks, zero offset predictor.
    pub fn init<R: Rng + ?Sized>(
        shape: &LayerShape,
        gabor: Arc<GaborBank>,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let LayerShape {
            orientations: u,
            masks: v,
            kernel: h,
            in_channels: n,
            out_channels: m,
        } = *shape;
        let bound = (1.0 / (n * u * h * h) as f64).sqrt();
        let p = Self {
            conv: Tensor::uniform(&[m, n, u, h, h], bound, rng)?,
            masks: Tensor::full(&[v, h, h], 1.0)?,
            offset: OffsetPredictor::zeros(n * u, h)?,
            gabor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn shape(&self) -> LayerShape {
        let c = self.conv.shape();
        LayerShape {
            orientations: c[2],
            masks: self.masks.shape()[0],
            kernel: c[3],
            in_channels: c[1],
            out_channels: c[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.conv.shape();
        if c.len() != 5 || c[3] != c[4] {
            return Err(shape_err!("conv filters must be [M,N,U,H,H], got {c:?}"));
        }
        let (_, h) = check_masks(&self.masks)?;
        let (n, u) = (c[1], c[2]);
        if h != c[3] {
            return Err(shape_err!(
                "mask side {h} differs from filter side {}",
                c[3]
            ));
        }
        if self.gabor.orientations() != u || self.gabor.kernel() != h {
            return Err(shape_err!(
                "Gabor bank is U={} H={} but filters expect U={u} H={h}",
                self.gabor.orientations(),
                self.gabor.kernel()
            ));
        }
        if self.offset.kernel() != h || self.offset.in_channels() != n * u {
            return Err(shape_err!(
                "offset predictor must read {} channels with kernel {h}, has {:?}",
                n * u,
                self.offset.weight.shape()
            ));
        }
        Ok(())
    }

    /// Every learnable scalar, counted from the tensors themselves.
    pub fn num_scalars(&self) -> usize {
        self.conv.len() + self.masks.len() + self.offset.weight.len() + self.offset.bias.len()
    }
}

/// Forward intermediates needed by [`dgconv_backward`].
#[derive(Clone, Debug)]
pub struct DGConvCache {
    shape: LayerShape,
    stride: usize,
    pad: usize,
    input_spatial: (usize, usize),
    flat_input: Tensor,
    offsets: OffsetField,
    /// Stage-one weight `[M*V, U*N, H, H]`.
    stage1_weight: Tensor,
    /// `[V, U, H, H]`
    gabor_mod: Tensor,
    /// `[M*V, Ho, Wo]`
    features: Tensor,
}

impl DGConvCache {
    pub fn offsets(&self) -> &OffsetField {
        &self.offsets
    }

    /// Deformable stage output `E`, `[M*V, Ho, Wo]` with index `m*V + v`.
    pub fn deformable_features(&self) -> &Tensor {
        &self.features
    }
}

/// Rearranges `D_hat [M,N,U,V,H,H]` into a stage-one conv weight
/// `[M*V, U*N, H, H]` over the folded input.
fn stage1_weight(d_hat: &Tensor, s: &LayerShape) -> Tensor {
    let (m_, n_, u_, v_, hh) = (
        s.out_channels,
        s.in_channels,
        s.orientations,
        s.masks,
        s.kernel * s.kernel,
    );
    let mut out = vec![0.0; d_hat.len()];
    let src = d_hat.data();
    for m in 0..m_ {
        for n in 0..n_ {
            for u in 0..u_ {
                for v in 0..v_ {
                    let from = (((m * n_ + n) * u_ + u) * v_ + v) * hh;
                    let to = ((m * v_ + v) * (u_ * n_) + u * n_ + n) * hh;
                    out[to..to + hh].copy_from_slice(&src[from..from + hh]);
                }
            }
        }
    }
    Tensor::from_vec(&[m_ * v_, u_ * n_, s.kernel, s.kernel], out).expect("same element count")
}

/// Inverse of [`stage1_weight`].
fn stage1_weight_to_dhat(w: &Tensor, s: &LayerShape) -> Tensor {
    let (m_, n_, u_, v_, hh) = (
        s.out_channels,
        s.in_channels,
        s.orientations,
        s.masks,
        s.kernel * s.kernel,
    );
    let mut out = vec![0.0; w.len()];
    let src = w.data();
    for m in 0..m_ {
        for n in 0..n_ {
            for u in 0..u_ {
                for v in 0..v_ {
                    let to = (((m * n_ + n) * u_ + u) * v_ + v) * hh;
                    let from = ((m * v_ + v) * (u_ * n_) + u * n_ + n) * hh;
                    out[to..to + hh].copy_from_slice(&src[from..from + hh]);
                }
            }
        }
    }
    Tensor::from_vec(&[m_, n_, u_, v_, s.kernel, s.kernel], out).expect("same element count")
}

/// Stage-two weight `[U, V, H, H]` with `W[u, v] = G_hat[v, u]`.
fn stage2_weight(gabor_mod: &Tensor) -> Tensor {
    let s = gabor_mod.shape();
    let (v_, u_, h) = (s[0], s[1], s[2]);
    let hh = h * h;
    let mut out = vec![0.0; gabor_mod.len()];
    for v in 0..v_ {
        for u in 0..u_ {
            let from = (v * u_ + u) * hh;
            let to = (u * v_ + v) * hh;
            out[to..to + hh].copy_from_slice(&gabor_mod.data()[from..from + hh]);
        }
    }
    Tensor::from_vec(&[u_, v_, h, h], out).expect("same element count")
}

/// Two-stage forward pass. Returns `[U, M, Ho, Wo]` features and the cache.
pub fn dgconv_forward(
    x: &OrientedFeature,
    p: &DGConvParams,
    stride: usize,
    pad: usize,
) -> Result<(OrientedFeature, DGConvCache)> {
    p.validate()?;
    let shape = p.shape();
    if x.orientations() != shape.orientations {
        return Err(shape_err!(
            "input has {} orientations, layer expects {}",
            x.orientations(),
            shape.orientations
        ));
    }
    if x.channels() != shape.in_channels {
        return Err(shape_err!(
            "input has {} channels per orientation, layer expects {}",
            x.channels(),
            shape.in_channels
        ));
    }
    let flat = x.flattened();
    let offsets = predict_offsets(&flat, &p.offset, stride, pad)?;
    let w1 = stage1_weight(&modulate_conv(&p.conv, &p.masks)?, &shape);
    let features = deform_conv_forward(&flat, &w1, &offsets, stride, pad)?;

    let gabor_mod = modulate_gabor(&p.gabor, &p.masks)?;
    let w2 = stage2_weight(&gabor_mod);
    let (ho, wo) = (features.shape()[1], features.shape()[2]);
    let (u_, v_, m_) = (shape.orientations, shape.masks, shape.out_channels);
    let plane = ho * wo;
    let mut y = vec![0.0; u_ * m_ * plane];
    for m in 0..m_ {
        let e_m = Tensor::from_vec(
            &[v_, ho, wo],
            features.data()[m * v_ * plane..(m + 1) * v_ * plane].to_vec(),
        )?;
        let out_m = conv2d_naive(&e_m, &w2, 1, shape.kernel / 2)?;
        for u in 0..u_ {
            y[(u * m_ + m) * plane..(u * m_ + m + 1) * plane].copy_from_slice(out_m.slice_data(u));
        }
    }
    let out = OrientedFeature::new(Tensor::from_vec(&[u_, m_, ho, wo], y)?)?;
    Ok((
        out,
        DGConvCache {
            shape,
            stride,
            pad,
            input_spatial: x.spatial(),
            flat_input: flat,
            offsets,
            stage1_weight: w1,
            gabor_mod,
            features,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct DGConvGrads {
    pub conv: Tensor,
    pub masks: Tensor,
    pub offset_weight: Tensor,
    pub offset_bias: Tensor,
    pub input: OrientedFeature,
    /// `dL/dG_hat`, `[V, U, H, H]`.
    pub gabor_mod: Tensor,
    /// `dL/dD_hat`, `[M, N, U, V, H, H]`.
    pub conv_mod: Tensor,
}

pub fn dgconv_backward(
    grad_y: &OrientedFeature,
    cache: &DGConvCache,
    p: &DGConvParams,
    mode: BackwardMode,
) -> Result<DGConvGrads> {
    let s = cache.shape;
    if p.shape() != s {
        return Err(shape_err!(
            "parameters {:?} do not match cache {:?}",
            p.shape(),
            s
        ));
    }
    let (u_, v_, m_, n_, h) = (
        s.orientations,
        s.masks,
        s.out_channels,
        s.in_channels,
        s.kernel,
    );
    let hh = h * h;
    let (ho, wo) = (cache.features.shape()[1], cache.features.shape()[2]);
    if grad_y.tensor().shape() != [u_, m_, ho, wo] {
        return Err(shape_err!(
            "grad_y {:?} does not match layer output [{u_}, {m_}, {ho}, {wo}]",
            grad_y.tensor().shape()
        ));
    }
    let plane = ho * wo;

    // Stage two, one grouped conv per output channel m.
    let w2 = stage2_weight(&cache.gabor_mod);
    let mut grad_e = vec![0.0; cache.features.len()];
    let mut grad_w2 = Tensor::zeros(w2.shape())?;
    let gy = grad_y.tensor().data();
    for m in 0..m_ {
        let mut gy_m = Vec::with_capacity(u_ * plane);
        for u in 0..u_ {
            gy_m.extend_from_slice(&gy[(u * m_ + m) * plane..(u * m_ + m + 1) * plane]);
        }
        let gy_m = Tensor::from_vec(&[u_, ho, wo], gy_m)?;
        let e_m = Tensor::from_vec(
            &[v_, ho, wo],
            cache.features.data()[m * v_ * plane..(m + 1) * v_ * plane].to_vec(),
        )?;
        let (ge, gw) = conv2d_backward(&gy_m, &e_m, &w2, 1, h / 2)?;
        grad_e[m * v_ * plane..(m + 1) * v_ * plane].copy_from_slice(ge.data());
        grad_w2.add_scaled(&gw, 1.0)?;
    }
    // back from [U,V,H,H] to dL/dG_hat [V,U,H,H]
    let mut grad_gmod = vec![0.0; grad_w2.len()];
    for u in 0..u_ {
        for v in 0..v_ {
            let from = (u * v_ + v) * hh;
            let to = (v * u_ + u) * hh;
            grad_gmod[to..to + hh].copy_from_slice(&grad_w2.data()[from..from + hh]);
        }
    }
    let grad_gmod = Tensor::from_vec(&[v_, u_, h, h], grad_gmod)?;

    // Stage one.
    let grad_e = Tensor::from_vec(cache.features.shape(), grad_e)?;
    let dg = deform_conv_backward(
        &grad_e,
        &cache.flat_input,
        &cache.stage1_weight,
        &cache.offsets,
        cache.stride,
        cache.pad,
    )?;
    let grad_dhat = stage1_weight_to_dhat(&dg.weight, &s);

    let pg = predict_offsets_backward(
        &dg.offsets,
        &cache.flat_input,
        &p.offset,
        cache.stride,
        cache.pad,
    )?;
    let mut grad_flat = dg.input;
    grad_flat.add_scaled(&pg.input, 1.0)?;
    let (hi, wi) = cache.input_spatial;
    let grad_input = OrientedFeature::new(grad_flat.reshape(&[u_, n_, hi, wi])?)?;

    let gabor = p.gabor.filters().data();
    let masks = p.masks.data();
    let conv = p.conv.data();
    let gd = grad_dhat.data();
    let gg = grad_gmod.data();
    let mut grad_s = vec![0.0; v_ * hh];
    let mut grad_c = vec![0.0; p.conv.len()];
    match mode {
        BackwardMode::Exact => {
            // Gabor path: G_hat[v,u] = S[v] * G[u]
            for v in 0..v_ {
                for u in 0..u_ {
                    for t in 0..hh {
                        grad_s[v * hh + t] += gg[(v * u_ + u) * hh + t] * gabor[u * hh + t];
                    }
                }
            }
            // Deformable path: D_hat[m,n,u,v] = C[m,n,u] * S[v]
            for f in 0..m_ * n_ * u_ {
                for v in 0..v_ {
                    for t in 0..hh {
                        let g = gd[(f * v_ + v) * hh + t];
                        grad_s[v * hh + t] += g * conv[f * hh + t];
                        grad_c[f * hh + t] += g * masks[v * hh + t];
                    }
                }
            }
        }
        BackwardMode::Paper => {
            let mut gabor_sum = vec![0.0; hh];
            for u in 0..u_ {
                for t in 0..hh {
                    gabor_sum[t] += gabor[u * hh + t];
                }
            }
            let mut mask_sum = vec![0.0; hh];
            for v in 0..v_ {
                for t in 0..hh {
                    mask_sum[t] += masks[v * hh + t];
                }
            }
            for v in 0..v_ {
                for t in 0..hh {
                    let g: f64 = (0..u_).map(|u| gg[(v * u_ + u) * hh + t]).sum();
                    grad_s[v * hh + t] = g * gabor_sum[t];
                }
            }
            for f in 0..m_ * n_ * u_ {
                for t in 0..hh {
                    let g: f64 = (0..v_).map(|v| gd[(f * v_ + v) * hh + t]).sum();
                    grad_c[f * hh + t] = g * mask_sum[t];
                }
            }
        }
    }

    Ok(DGConvGrads {
        conv: Tensor::from_vec(p.conv.shape(), grad_c)?,
        masks: Tensor::from_vec(p.masks.shape(), grad_s)?,
        offset_weight: pg.weight,
        offset_bias: pg.bias,
        input: grad_input,
        gabor_mod: grad_gmod,
        conv_mod: grad_dhat,
    })
}

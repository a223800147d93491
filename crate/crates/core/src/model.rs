//! A stack of plain and DGConv blocks (each followed by ReLU) feeding a
//! patch-level MIL head.
//!
//! Features between blocks are kept as `[C, H, W]`; a DGConv block's output
//! `[U, M, H, W]` has the same memory layout as `[U*M, H, W]`. The first
//! DGConv block after a plain block copies its input `U` times.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::dgconv::{
    dgconv_backward, dgconv_forward, expand_orientation, param_count, per_orientation_channels,
    reduce_orientation, BackwardMode, DGConvCache, DGConvParams, LayerShape, OrientedFeature,
};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::gabor::GaborBank;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::mil::{
    miml_loss, patch_probs, patch_probs_backward, ClassWeights, MilHead, PatchProbabilities,
};
use crate::optim::{ParamGroup, ParamMut};
use crate::tensor::{conv2d_backward, conv2d_naive, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Output channels per stage; per orientation for DGConv stages.
    pub widths: Vec<usize>,
    /// Which stages are DGConv.
    pub dgconv: Vec<bool>,
    pub strides: Vec<usize>,
    pub orientations: usize,
    pub masks: usize,
    pub kernel: usize,
    /// Gabor envelope width; `kernel / 3` when absent.
    pub sigma: Option<f64>,
    /// Gabor wavelength; `kernel / 2` when absent.
    pub lambda: Option<f64>,
    pub labels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![4, 4],
            dgconv: vec![false, true],
            strides: vec![2, 2],
            orientations: 4,
            masks: 4,
            kernel: 3,
            sigma: None,
            lambda: None,
            labels: 1,
        }
    }
}

impl ModelSpec {
    /// The same stages with every DGConv stage replaced by a plain one.
    pub fn plain(widths: Vec<usize>, strides: Vec<usize>, labels: usize) -> Self {
        Self {
            dgconv: vec![false; widths.len()],
            widths,
            strides,
            labels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 {
            return Err(arg_err!("model needs at least one stage"));
        }
        if self.dgconv.len() != n || self.strides.len() != n {
            return Err(arg_err!(
                "widths, dgconv and strides must have equal length ({}, {}, {})",
                n,
                self.dgconv.len(),
                self.strides.len()
            ));
        }
        if self.in_channels == 0
            || self.labels == 0
            || self.widths.contains(&0)
            || self.strides.contains(&0)
        {
            return Err(arg_err!(
                "channel counts, labels and strides must be positive"
            ));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(arg_err!(
                "kernel must be odd and at least 3, got {}",
                self.kernel
            ));
        }
        if self.uses_dgconv() && (self.orientations == 0 || self.masks == 0) {
            return Err(arg_err!("orientations and masks must be positive"));
        }
        Ok(())
    }

    pub fn uses_dgconv(&self) -> bool {
        self.dgconv.iter().any(|&d| d)
    }

    pub fn gabor_params(&self) -> (f64, f64) {
        let (s, l) = GaborBank::default_params(self.kernel);
        (self.sigma.unwrap_or(s), self.lambda.unwrap_or(l))
    }

    /// Channels entering stage `i` and the feature channels after it.
    fn stage_channels(&self) -> Vec<(usize, usize)> {
        let mut c = self.in_channels;
        self.widths
            .iter()
            .zip(&self.dgconv)
            .map(|(&w, &dg)| {
                let out = if dg { w * self.orientations } else { w };
                let io = (c, out);
                c = out;
                io
            })
            .collect()
    }

    /// Feature channels seen by the head.
    pub fn head_features(&self) -> usize {
        self.stage_channels()
            .last()
            .map_or(self.in_channels, |s| s.1)
    }

    /// Widths of the plain network the square-root rule pairs with this one.
    pub fn matched_plain_widths(&self) -> Vec<usize> {
        let root = (self.orientations as f64).sqrt();
        self.widths
            .iter()
            .zip(&self.dgconv)
            .map(|(&w, &dg)| {
                if dg {
                    (w as f64 * root).round() as usize
                } else {
                    w
                }
            })
            .collect()
    }

    /// Learnable scalars per stage, head last.
    pub fn param_table(&self) -> Result<Vec<LayerParams>> {
        self.validate()?;
        let h = self.kernel;
        let mut rows = Vec::new();
        for (i, ((cin, _), (&w, &dg))) in self
            .stage_channels()
            .into_iter()
            .zip(self.widths.iter().zip(&self.dgconv))
            .enumerate()
        {
            if dg {
                let n = if i > 0 && self.dgconv[i - 1] {
                    cin / self.orientations
                } else {
                    cin
                };
                let shape = LayerShape::new(self.orientations, self.masks, h, n, w)?;
                let pc = param_count(&shape);
                rows.push(LayerParams {
                    name: format!("layer{i}"),
                    kind: "dgconv",
                    filters: pc.filters,
                    masks: pc.masks,
                    offset: pc.offset,
                    bias: pc.offset_bias,
                });
            } else {
                rows.push(LayerParams {
                    name: format!("layer{i}"),
                    kind: "conv",
                    filters: w * cin * h * h,
                    masks: 0,
                    offset: 0,
                    bias: w,
                });
            }
        }
        let f = self.head_features();
        rows.push(LayerParams {
            name: "head".into(),
            kind: "head",
            filters: self.labels * f,
            masks: 0,
            offset: 0,
            bias: self.labels,
        });
        Ok(rows)
    }

    pub fn total_params(&self) -> Result<usize> {
        Ok(self.param_table()?.iter().map(LayerParams::total).sum())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub name: String,
    pub kind: &'static str,
    pub filters: usize,
    pub masks: usize,
    /// Offset-predictor weights.
    pub offset: usize,
    /// Convolution bias, or the offset-predictor bias of a DGConv stage.
    pub bias: usize,
}

impl LayerParams {
    pub fn total(&self) -> usize {
        self.filters + self.masks + self.offset + self.bias
    }
}

/// Channel count of a plain stage, per orientation, under the square-root rule.
pub fn sqrt_rule_width(plain: usize, orientations: usize) -> usize {
    per_orientation_channels(plain, orientations)
}

#[derive(Clone, Debug)]
pub enum Block {
    Plain { weight: Tensor, bias: Tensor },
    Gabor(DGConvParams),
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub block: Block,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub head: MilHead,
    gabor: Option<Arc<GaborBank>>,
}

enum LayerCache {
    Plain { input: Tensor },
    Gabor { cache: DGConvCache, expanded: bool },
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace {
    caches: Vec<LayerCache>,
    /// Pre-activation outputs, `[C, H, W]`.
    pre: Vec<Tensor>,
    features: Tensor,
    pub probs: PatchProbabilities,
}

impl Trace {
    /// Head input `[F, R, Cc]`.
    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

impl Network {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let h = spec.kernel;
        let gabor = if spec.uses_dgconv() {
            let (sigma, lambda) = spec.gabor_params();
            Some(Arc::new(GaborBank::new(
                spec.orientations,
                h,
                sigma,
                lambda,
            )?))
        } else {
            None
        };
        let mut layers = Vec::with_capacity(spec.widths.len());
        for (i, (cin, _)) in spec.stage_channels().into_iter().enumerate() {
            let w = spec.widths[i];
            let block = if spec.dgconv[i] {
                let n = if i > 0 && spec.dgconv[i - 1] {
                    cin / spec.orientations
                } else {
                    cin
                };
                let shape = LayerShape::new(spec.orientations, spec.masks, h, n, w)?;
                Block::Gabor(DGConvParams::init(
                    &shape,
                    gabor.clone().expect("bank built"),
                    rng,
                )?)
            } else {
                let bound = (3.0 / (cin * h * h) as f64).sqrt();
                Block::Plain {
                    weight: Tensor::uniform(&[w, cin, h, h], bound, rng)?,
                    bias: Tensor::zeros(&[w])?,
                }
            };
            layers.push(Layer {
                block,
                stride: spec.strides[i],
            });
        }
        let f = spec.head_features();
        let head = MilHead::new(
            Tensor::uniform(&[spec.labels, f], (1.0 / f as f64).sqrt(), rng)?,
            Tensor::zeros(&[spec.labels])?,
        )?;
        Ok(Self {
            spec: spec.clone(),
            layers,
            head,
            gabor,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn gabor(&self) -> Option<&Arc<GaborBank>> {
        self.gabor.as_ref()
    }

    pub fn forward(&self, image: &Tensor) -> Result<Trace> {
        if image.rank() != 3 || image.shape()[0] != self.spec.in_channels {
            return Err(shape_err!(
                "image must be [{}, H, W], got {:?}",
                self.spec.in_channels,
                image.shape()
            ));
        }
        let pad = self.spec.kernel / 2;
        let u = self.spec.orientations;
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut prev_oriented = false;
        for layer in &self.layers {
            let out = match &layer.block {
                Block::Plain { weight, bias } => {
                    let mut y = conv2d_naive(&x, weight, layer.stride, pad)?;
                    add_channel_bias(&mut y, bias);
                    caches.push(LayerCache::Plain { input: x });
                    prev_oriented = false;
                    y
                }
                Block::Gabor(p) => {
                    let expanded = !prev_oriented;
                    let xin = if expanded {
                        expand_orientation(&x, u)?
                    } else {
                        let s = x.shape().to_vec();
                        OrientedFeature::new(x.reshape(&[u, s[0] / u, s[1], s[2]])?)?
                    };
                    let (y, cache) = dgconv_forward(&xin, p, layer.stride, pad)?;
                    caches.push(LayerCache::Gabor { cache, expanded });
                    prev_oriented = true;
                    let s = y.tensor().shape().to_vec();
                    y.into_tensor().reshape(&[s[0] * s[1], s[2], s[3]])?
                }
            };
            x = relu(&out);
            pre.push(out);
        }
        let probs = patch_probs(&x, &self.head)?;
        Ok(Trace {
            caches,
            pre,
            features: x,
            probs,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<PatchProbabilities> {
        Ok(self.forward(image)?.probs)
    }

    /// Gradients of every parameter, in [`Network::param_names`] order, given
    /// `dL/dp` for the patch probabilities.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_p: &Tensor,
        mode: BackwardMode,
    ) -> Result<Vec<Tensor>> {
        self.backward_full(trace, grad_p, mode).map(|r| r.0)
    }

    fn backward_full(
        &self,
        trace: &Trace,
        grad_p: &Tensor,
        mode: BackwardMode,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let hg = patch_probs_backward(grad_p, &trace.probs, &trace.features, &self.head)?;
        let pad = self.spec.kernel / 2;
        let mut grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len() + 1);
        grads.push(vec![hg.weight, hg.bias]);
        let mut g = hg.features;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            // through ReLU
            let mut gd = g;
            for (gv, &z) in gd.data_mut().iter_mut().zip(trace.pre[i].data()) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let (block_grads, g_in) = match (&layer.block, &trace.caches[i]) {
                (Block::Plain { weight, .. }, LayerCache::Plain { input }) => {
                    let (gx, gw) = conv2d_backward(&gd, input, weight, layer.stride, pad)?;
                    let gb = channel_sums(&gd);
                    (vec![gw, gb], gx)
                }
                (Block::Gabor(p), LayerCache::Gabor { cache, expanded }) => {
                    let s = gd.shape().to_vec();
                    let u = self.spec.orientations;
                    let gy = OrientedFeature::new(gd.reshape(&[u, s[0] / u, s[1], s[2]])?)?;
                    let dg = dgconv_backward(&gy, cache, p, mode)?;
                    let gx = if *expanded {
                        reduce_orientation(&dg.input)
                    } else {
                        let t = dg.input.into_tensor();
                        let s = t.shape().to_vec();
                        t.reshape(&[s[0] * s[1], s[2], s[3]])?
                    };
                    (
                        vec![dg.conv, dg.masks, dg.offset_weight, dg.offset_bias],
                        gx,
                    )
                }
                _ => return Err(shape_err!("trace does not belong to this network")),
            };
            grads.push(block_grads);
            g = g_in;
        }
        grads.reverse();
        Ok((grads.into_iter().flatten().collect(), g))
    }

    /// Weighted MIML loss of one image and its gradients.
    pub fn loss_and_grads(
        &self,
        image: &Tensor,
        labels: &[u8],
        weights: Option<&[ClassWeights]>,
        mode: BackwardMode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let trace = self.forward(image)?;
        let loss = miml_loss(&[(trace.probs.clone(), labels.to_vec())], weights)?;
        if !loss.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = self.backward(&trace, &loss.grads[0], mode)?;
        Ok((loss.value, grads))
    }

    pub fn loss(
        &self,
        image: &Tensor,
        labels: &[u8],
        weights: Option<&[ClassWeights]>,
    ) -> Result<f64> {
        let p = self.predict(image)?;
        Ok(miml_loss(&[(p, labels.to_vec())], weights)?.value)
    }

    /// Names and optimizer groups of all parameters in canonical order.
    pub fn param_names(&self) -> Vec<(String, ParamGroup)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer.block {
                Block::Plain { .. } => {
                    out.push((format!("layer{i}.weight"), ParamGroup::Filter));
                    out.push((format!("layer{i}.bias"), ParamGroup::Filter));
                }
                Block::Gabor(_) => {
                    out.push((format!("layer{i}.conv"), ParamGroup::Filter));
                    out.push((format!("layer{i}.masks"), ParamGroup::Mask));
                    out.push((format!("layer{i}.offset_weight"), ParamGroup::Filter));
                    out.push((format!("layer{i}.offset_bias"), ParamGroup::Filter));
                }
            }
        }
        out.push(("head.weight".into(), ParamGroup::Filter));
        out.push(("head.bias".into(), ParamGroup::Filter));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.block {
                Block::Plain { weight, bias } => out.extend([weight, bias]),
                Block::Gabor(p) => {
                    out.extend([&p.conv, &p.masks, &p.offset.weight, &p.offset.bias])
                }
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let filter = |value| ParamMut {
            group: ParamGroup::Filter,
            value,
        };
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.block {
                Block::Plain { weight, bias } => out.extend([filter(weight), filter(bias)]),
                Block::Gabor(p) => out.extend([
                    filter(&mut p.conv),
                    ParamMut {
                        group: ParamGroup::Mask,
                        value: &mut p.masks,
                    },
                    filter(&mut p.offset.weight),
                    filter(&mut p.offset.bias),
                ]),
            }
        }
        out.extend([filter(&mut self.head.weight), filter(&mut self.head.bias)]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Replaces all parameters, in canonical order, checking shapes.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(shape_err!(
                "{} tensors for {} parameters",
                values.len(),
                slots.len()
            ));
        }
        for (slot, v) in slots.iter().zip(values) {
            if slot.value.shape() != v.shape() {
                return Err(shape_err!(
                    "parameter {:?} given {:?}",
                    slot.value.shape(),
                    v.shape()
                ));
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            *slot.value = v.clone();
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for ((name, _), t) in self.param_names().into_iter().zip(self.params()) {
            a.insert(name, t.clone())?;
        }
        if let Some(bank) = &self.gabor {
            bank.write_sections(&mut a, "gabor.")?;
        }
        Ok(a)
    }

    /// Loads parameters saved by [`Network::to_archive`] into a network built
    /// from the same spec.
    pub fn load_archive(&mut self, a: &TensorArchive) -> Result<()> {
        let mut values = Vec::new();
        for ((name, _), t) in self.param_names().into_iter().zip(self.params()) {
            let v = a
                .get(&name)
                .ok_or_else(|| shape_err!("checkpoint has no section {name}"))?;
            if v.shape() != t.shape() {
                return Err(shape_err!(
                    "checkpoint section {name} is {:?}, model expects {:?}",
                    v.shape(),
                    t.shape()
                ));
            }
            values.push(v.clone());
        }
        if self.gabor.is_some() {
            let bank = Arc::new(GaborBank::read_sections(a, "gabor.")?);
            let expect = self.gabor.as_ref().expect("checked");
            if bank.filters().shape() != expect.filters().shape() {
                return Err(shape_err!("checkpoint Gabor bank does not match the model"));
            }
            for layer in &mut self.layers {
                if let Block::Gabor(p) = &mut layer.block {
                    p.gabor = bank.clone();
                }
            }
            self.gabor = Some(bank);
        }
        self.set_params(&values)
    }
}

impl Network {
    /// Gives every DGConv offset predictor small random weights and a bias in
    /// `[0.33, 0.42)`, keeping sampled positions away from the integer grid
    /// where bilinear interpolation has kinks.
    pub fn nudge_offsets<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for layer in &mut self.layers {
            if let Block::Gabor(p) = &mut layer.block {
                let shape = p.offset.weight.shape().to_vec();
                p.offset.weight = Tensor::uniform(&shape, 0.005, rng)?;
                let n = p.offset.bias.len();
                p.offset.bias = Tensor::from_fn(&[n], |_| rng.gen_range(0.33..0.42))?;
            }
        }
        Ok(())
    }

    /// Central-difference check of every parameter block and the image
    /// gradient for the loss of one bag.
    pub fn grad_check(
        &self,
        image: &Tensor,
        labels: &[u8],
        weights: Option<&[ClassWeights]>,
        mode: BackwardMode,
        eps: f64,
    ) -> Result<GradCheckReport> {
        let trace = self.forward(image)?;
        let loss = miml_loss(&[(trace.probs.clone(), labels.to_vec())], weights)?;
        let mut analytic = self.backward(&trace, &loss.grads[0], mode)?;
        analytic.push(self.input_gradient(&trace, &loss.grads[0])?);
        let mut names: Vec<String> = self.param_names().into_iter().map(|n| n.0).collect();
        names.push("image".into());
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut blocks: Vec<Tensor> = self.params().into_iter().cloned().collect();
        blocks.push(image.clone());
        let n = blocks.len() - 1;
        let loss = |b: &[Tensor]| {
            let mut probe = self.clone();
            probe.set_params(&b[..n]).expect("same shapes");
            probe.loss(&b[n], labels, weights).unwrap_or(f64::NAN)
        };
        Ok(grad_check(&name_refs, &blocks, &analytic, loss, eps))
    }

    /// `dL/d image` for a trace, given `dL/dp`.
    pub fn input_gradient(&self, trace: &Trace, grad_p: &Tensor) -> Result<Tensor> {
        self.backward_full(trace, grad_p, BackwardMode::Exact)
            .map(|r| r.1)
    }
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let c = y.shape()[0];
    let plane = y.len() / c;
    for (ch, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[ch];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let c = g.shape()[0];
    let plane = g.len() / c;
    let sums = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
    Tensor::from_vec(&[c], sums).expect("one sum per channel")
}

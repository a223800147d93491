//! Deformable convolution: every kernel tap reads the input at its regular
//! grid position displaced by a learned, per-output-position offset, using
//! bilinear interpolation. One offset field is shared by all input channels.

use crate::error::{shape_err, Result};
use crate::tensor::{conv2d_backward, conv2d_naive, conv_dims, Tensor};

/// Per-position tap displacements `[2*H*H, Ho, Wo]`: the first `H*H`
/// channels hold `dy` for tap `i*H + j`, the next `H*H` hold `dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    kernel: usize,
    offsets: Tensor,
}

impl OffsetField {
    pub fn new(offsets: Tensor, kernel: usize) -> Result<Self> {
        let s = offsets.shape();
        if s.len() != 3 || s[0] != 2 * kernel * kernel {
            return Err(shape_err!(
                "offset field must be [{}, Ho, Wo] for kernel {kernel}, got {s:?}",
                2 * kernel * kernel
            ));
        }
        Ok(Self { kernel, offsets })
    }

    pub fn zeros(kernel: usize, ho: usize, wo: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[2 * kernel * kernel, ho, wo])?, kernel)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.offsets.shape()[1], self.offsets.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.offsets
    }

    pub fn into_tensor(self) -> Tensor {
        self.offsets
    }
}

/// The auxiliary convolution that predicts an [`OffsetField`] from features.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetPredictor {
    /// `[2*H*H, Cin, H, H]`
    pub weight: Tensor,
    /// `[2*H*H]`
    pub bias: Tensor,
}

impl OffsetPredictor {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[0] != 2 * s[2] * s[2] {
            return Err(shape_err!(
                "offset predictor weight must be [2*H*H, Cin, H, H], got {s:?}"
            ));
        }
        if bias.shape() != [s[0]] {
            return Err(shape_err!(
                "offset predictor bias must be [{}], got {:?}",
                s[0],
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    /// All-zero predictor: a fresh layer samples the regular grid.
    pub fn zeros(in_channels: usize, kernel: usize) -> Result<Self> {
        let c = 2 * kernel * kernel;
        Self::new(
            Tensor::zeros(&[c, in_channels, kernel, kernel])?,
            Tensor::zeros(&[c])?,
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn predict_offsets(
    input: &Tensor,
    pred: &OffsetPredictor,
    stride: usize,
    pad: usize,
) -> Result<OffsetField> {
    let mut out = conv2d_naive(input, &pred.weight, stride, pad)?;
    let plane = out.shape()[1] * out.shape()[2];
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = pred.bias.data()[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    OffsetField::new(out, pred.kernel())
}

/// Gradients of the offset predictor given the gradient of its output field.
pub struct OffsetPredictorGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn predict_offsets_backward(
    grad_field: &Tensor,
    input: &Tensor,
    pred: &OffsetPredictor,
    stride: usize,
    pad: usize,
) -> Result<OffsetPredictorGrads> {
    let (gx, gw) = conv2d_backward(grad_field, input, &pred.weight, stride, pad)?;
    let plane = grad_field.shape()[1] * grad_field.shape()[2];
    let gb = grad_field
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum())
        .collect();
    Ok(OffsetPredictorGrads {
        weight: gw,
        bias: Tensor::from_vec(pred.bias.shape(), gb)?,
        input: gx,
    })
}

/// Bilinear read of `plane [Hi, Wi]` at real coordinates `(y, x)`;
/// neighbors outside the plane contribute zero.
pub fn bilinear_sample(plane: &Tensor, y: f64, x: f64) -> Result<f64> {
    let s = plane.shape();
    if s.len() != 2 {
        return Err(shape_err!("bilinear_sample needs a 2-D plane, got {s:?}"));
    }
    Ok(sample_slice(plane.data(), s[0], s[1], y, x))
}

pub(crate) fn sample_slice(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let tap = Tap::new(y, x, h, w);
    (0..4).map(|c| tap.weight[c] * plane[tap.index[c]]).sum()
}

/// The four bilinear neighbors of one sampling point. Out-of-plane
/// neighbors get zero weight and zero slopes.
#[derive(Clone, Copy, Debug)]
struct Tap {
    index: [usize; 4],
    weight: [f64; 4],
    dwdy: [f64; 4],
    dwdx: [f64; 4],
}

impl Tap {
    // Corner order: (y0,x0), (y0,x1), (y1,x0), (y1,x1). Using floor makes the
    // slope at exact integer coordinates the right derivative.
    fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let mut tap = Tap {
            index: [0; 4],
            weight: [0.0; 4],
            dwdy: [0.0; 4],
            dwdx: [0.0; 4],
        };
        if !(y > -1.0 && x > -1.0 && y < h as f64 && x < w as f64) {
            return tap;
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let corners = [
            (y0, x0, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
            (y0, x0 + 1, (1.0 - fy) * fx, -fx, 1.0 - fy),
            (y0 + 1, x0, fy * (1.0 - fx), 1.0 - fx, -fy),
            (y0 + 1, x0 + 1, fy * fx, fx, fy),
        ];
        for (c, &(cy, cx, wgt, dy, dx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                tap.index[c] = cy as usize * w + cx as usize;
                tap.weight[c] = wgt;
                tap.dwdy[c] = dy;
                tap.dwdx[c] = dx;
            }
        }
        tap
    }
}

struct Geometry {
    cin: usize,
    hi: usize,
    wi: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn geometry(
    input: &Tensor,
    weight: &Tensor,
    offsets: &OffsetField,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    let (cin, hi, wi, cout, k, ho, wo) = conv_dims(input, weight, stride, pad)?;
    if offsets.kernel() != k {
        return Err(shape_err!(
            "offset field is for kernel {} but weight has kernel {k}",
            offsets.kernel()
        ));
    }
    if offsets.spatial() != (ho, wo) {
        return Err(shape_err!(
            "offset field spatial size {:?} does not match output ({ho}, {wo})",
            offsets.spatial()
        ));
    }
    Ok(Geometry {
        cin,
        hi,
        wi,
        cout,
        k,
        ho,
        wo,
    })
}

/// Sampling taps for every (output position, kernel tap), position-major.
fn build_taps(g: &Geometry, offsets: &OffsetField, stride: usize, pad: usize) -> Vec<Tap> {
    let kk = g.k * g.k;
    let plane = g.ho * g.wo;
    let off = offsets.tensor().data();
    let mut taps = Vec::with_capacity(plane * kk);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let pos = oy * g.wo + ox;
            for i in 0..g.k {
                for j in 0..g.k {
                    let t = i * g.k + j;
                    let dy = off[t * plane + pos];
                    let dx = off[(kk + t) * plane + pos];
                    let y = (oy * stride + i) as f64 - pad as f64 + dy;
                    let x = (ox * stride + j) as f64 - pad as f64 + dx;
                    taps.push(Tap::new(y, x, g.hi, g.wi));
                }
            }
        }
    }
    taps
}

/// Sampled input columns `[Cin*H*H]` for one output position.
fn gather_column(input: &[f64], g: &Geometry, taps: &[Tap], col: &mut [f64]) {
    let in_plane = g.hi * g.wi;
    let kk = g.k * g.k;
    for ci in 0..g.cin {
        let x = &input[ci * in_plane..(ci + 1) * in_plane];
        for (t, tap) in taps.iter().enumerate() {
            col[ci * kk + t] = tap.weight[0] * x[tap.index[0]]
                + tap.weight[1] * x[tap.index[1]]
                + tap.weight[2] * x[tap.index[2]]
                + tap.weight[3] * x[tap.index[3]];
        }
    }
}

/// Deformable cross-correlation of `input [Cin,Hi,Wi]` with `weight [Cout,Cin,H,H]`.
pub fn deform_conv_forward(
    input: &Tensor,
    weight: &Tensor,
    offsets: &OffsetField,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(input, weight, offsets, stride, pad)?;
    let taps = build_taps(&g, offsets, stride, pad);
    let kk = g.k * g.k;
    let ncol = g.cin * kk;
    let plane = g.ho * g.wo;
    let w = weight.data();
    let mut out = vec![0.0; g.cout * plane];
    let mut col = vec![0.0; ncol];
    for pos in 0..plane {
        gather_column(input.data(), &g, &taps[pos * kk..(pos + 1) * kk], &mut col);
        for co in 0..g.cout {
            let wrow = &w[co * ncol..(co + 1) * ncol];
            out[co * plane + pos] = wrow.iter().zip(&col).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::from_vec(&[g.cout, g.ho, g.wo], out)
}

#[derive(Clone, Debug)]
pub struct DeformGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub offsets: Tensor,
}

/// Exact gradients of [`deform_conv_forward`] for input, weight and offsets.
pub fn deform_conv_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    offsets: &OffsetField,
    stride: usize,
    pad: usize,
) -> Result<DeformGrads> {
    let g = geometry(input, weight, offsets, stride, pad)?;
    if grad_out.shape() != [g.cout, g.ho, g.wo] {
        return Err(shape_err!(
            "grad_out {:?} does not match deformable conv output [{}, {}, {}]",
            grad_out.shape(),
            g.cout,
            g.ho,
            g.wo
        ));
    }
    let taps = build_taps(&g, offsets, stride, pad);
    let kk = g.k * g.k;
    let ncol = g.cin * kk;
    let plane = g.ho * g.wo;
    let in_plane = g.hi * g.wi;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();

    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut goff = vec![0.0; 2 * kk * plane];
    let mut col = vec![0.0; ncol];
    let mut gcol = vec![0.0; ncol];
    for pos in 0..plane {
        let ptaps = &taps[pos * kk..(pos + 1) * kk];
        gather_column(x, &g, ptaps, &mut col);
        gcol.iter_mut().for_each(|v| *v = 0.0);
        for co in 0..g.cout {
            let gy = go[co * plane + pos];
            if gy == 0.0 {
                continue;
            }
            let wrow = &w[co * ncol..(co + 1) * ncol];
            let gwrow = &mut gw[co * ncol..(co + 1) * ncol];
            for c in 0..ncol {
                gcol[c] += gy * wrow[c];
                gwrow[c] += gy * col[c];
            }
        }
        for ci in 0..g.cin {
            let xs = &x[ci * in_plane..(ci + 1) * in_plane];
            let gxs = &mut gx[ci * in_plane..(ci + 1) * in_plane];
            for (t, tap) in ptaps.iter().enumerate() {
                let gc = gcol[ci * kk + t];
                if gc == 0.0 {
                    continue;
                }
                let mut dy = 0.0;
                let mut dx = 0.0;
                for c in 0..4 {
                    gxs[tap.index[c]] += gc * tap.weight[c];
                    let v = xs[tap.index[c]];
                    dy += tap.dwdy[c] * v;
                    dx += tap.dwdx[c] * v;
                }
                goff[t * plane + pos] += gc * dy;
                goff[(kk + t) * plane + pos] += gc * dx;
            }
        }
    }
    Ok(DeformGrads {
        input: Tensor::from_vec(input.shape(), gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        offsets: Tensor::from_vec(offsets.tensor().shape(), goff)?,
    })
}

//! Dense row-major `f64` tensor with the handful of operations the layers
//! need, plus the direct-loop reference convolution.
//!
//! Images are channel-first `[C, H, W]`. "Convolution" is cross-correlation
//! throughout (no kernel flip).

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Elements drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of range for axis {i} of {:?}",
                self.shape
            );
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Contiguous sub-tensor along the leading axis.
    pub fn slice(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    pub fn slice_data(&self, i: usize) -> &[f64] {
        let inner: usize = self.shape[1..].iter().product();
        &self.data[i * inner..(i + 1) * inner]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    fn check_same(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same(other, "mul")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// `self += k * other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian container: `u32` rank, `u32` dims, then the `f64` payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let len = checked_len(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.rank() + 8 * self.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// CSV dump of a 2-D tensor, one row per line.
    pub fn to_csv(&self) -> Result<String> {
        if self.rank() != 2 {
            return Err(shape_err!(
                "csv dump needs a 2-D tensor, got {:?}",
                self.shape
            ));
        }
        let cols = self.shape[1];
        let mut s = String::new();
        for row in self.data.chunks(cols) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad csv value {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Format(format!(
                        "ragged csv: row {rows} has {} columns, expected {c}",
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend(row);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Format("empty csv".into()))?;
        Tensor::from_vec(&[rows, cols], data)
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(arg_err!("tensor shape must have at least one dimension"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(arg_err!("dimension {axis} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Output side of a strided, zero-padded window over `input` of side `kernel`.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(arg_err!("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(shape_err!(
            "kernel {kernel} larger than padded input {padded}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(shape_err!(
            "conv input must be [C,H,W], got {:?}",
            input.shape()
        ));
    }
    if weight.rank() != 4 {
        return Err(shape_err!(
            "conv weight must be [Cout,Cin,H,H], got {:?}",
            weight.shape()
        ));
    }
    let (cin, hi, wi) = (input.shape[0], input.shape[1], input.shape[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape[0],
        weight.shape[1],
        weight.shape[2],
        weight.shape[3],
    );
    if wcin != cin {
        return Err(shape_err!(
            "input has {cin} channels but weight expects {wcin}"
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!(
            "kernel must be square with odd side, got {kh}x{kw}"
        ));
    }
    let ho = conv_out_size(hi, kh, stride, pad)?;
    let wo = conv_out_size(wi, kw, stride, pad)?;
    Ok((cin, hi, wi, cout, kh, ho, wo))
}

/// Direct cross-correlation of `input [Cin,Hi,Wi]` with `weight [Cout,Cin,H,H]`.
pub fn conv2d_naive(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, hi, wi, cout, k, ho, wo) = conv_dims(input, weight, stride, pad)?;
    let x = &input.data;
    let w = &weight.data;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            acc += w[((co * cin + ci) * k + ky) * k + kx]
                                * x[(ci * hi + iy as usize) * wi + ix as usize];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::from_vec(&[cout, ho, wo], out)
}

/// Gradients of [`conv2d_naive`] with respect to its input and weight.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (cin, hi, wi, cout, k, ho, wo) = conv_dims(input, weight, stride, pad)?;
    if grad_out.shape() != [cout, ho, wo] {
        return Err(shape_err!(
            "grad_out {:?} does not match conv output [{cout}, {ho}, {wo}]",
            grad_out.shape()
        ));
    }
    let x = &input.data;
    let w = &weight.data;
    let g = &grad_out.data;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let go = g[(co * ho + oy) * wo + ox];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= hi as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wi as isize {
                                continue;
                            }
                            let xi = (ci * hi + iy as usize) * wi + ix as usize;
                            let wi_ = ((co * cin + ci) * k + ky) * k + kx;
                            gx[xi] += go * w[wi_];
                            gw[wi_] += go * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(weight.shape(), gw)?,
    ))
}

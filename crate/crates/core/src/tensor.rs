//! Dense tensor container and reference forward kernels.
//!
//! The kernels here are the ground truth that sparse kernels and the trainer
//! are checked against. They accumulate in `f64` in a fixed, documented order
//! (row-major over input taps) and round once to `f32` per output element, so
//! results are reproducible across platforms and directly comparable between
//! the dense and sparse paths.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Magic bytes of the `.ect-tensor` container.
pub const TENSOR_MAGIC: &[u8; 8] = b"ECT-TNSR";
const TENSOR_VERSION: u8 = 1;

/// Dense row-major tensor of 32-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Serialize to the `.ect-tensor` byte layout: magic, version, rank,
    /// little-endian `u32` dims, then little-endian IEEE-754 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse the `.ect-tensor` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("tensor file truncated before magic".into()))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("tensor file truncated before header".into()))?;
        if head[0] != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {}", head[0])));
        }
        let rank = head[1] as usize;
        if rank == 0 {
            return Err(Error::Format("tensor rank must be at least 1".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("tensor file truncated in dims".into()))?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        if r.len() != 4 * numel {
            return Err(Error::Format(format!(
                "tensor payload has {} bytes, expected {}",
                r.len(),
                4 * numel
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in r.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Tensor::new(shape, data)
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = fs::read(path)?;
        Tensor::from_bytes(&bytes)
    }
}

/// Layer kinds recognized by the forward kernels and the accounting rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    FullyConnected,
    BatchNorm,
}

/// Shape-level description of one layer.
///
/// `kernel` and the spatial output only apply to convolutions; batch-norm
/// keeps the spatial output so its per-position cost can be counted. The
/// `quantize` flag marks layers that participate in ternarization; model
/// constructors keep it off for first and last layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub quantize: bool,
}

impl LayerSpec {
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        out_height: usize,
        out_width: usize,
        quantize: bool,
    ) -> Result<Self> {
        let spec = LayerSpec {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel,
            out_height,
            out_width,
            quantize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fully_connected(in_features: usize, out_features: usize, quantize: bool) -> Result<Self> {
        let spec = LayerSpec {
            kind: LayerKind::FullyConnected,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            out_height: 1,
            out_width: 1,
            quantize,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn batch_norm(channels: usize, out_height: usize, out_width: usize) -> Result<Self> {
        let spec = LayerSpec {
            kind: LayerKind::BatchNorm,
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            out_height,
            out_width,
            quantize: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel == 0
            || self.out_height == 0
            || self.out_width == 0
        {
            return Err(Error::Dimension(format!("layer spec has a zero dimension: {self:?}")));
        }
        if self.quantize && self.kind == LayerKind::BatchNorm {
            return Err(Error::InvalidConfig("batch-norm layers are never quantized".into()));
        }
        Ok(())
    }

    /// Number of weight elements (zero for batch-norm, which has no weight
    /// tensor, only per-channel affine parameters).
    pub fn weight_elements(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.in_channels * self.kernel * self.kernel * self.out_channels,
            LayerKind::FullyConnected => self.in_channels * self.out_channels,
            LayerKind::BatchNorm => 0,
        }
    }

    pub fn spatial(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Closed-form output size `(dim + 2·padding − kernel)/stride + 1`.
pub fn conv_output_dim(dim: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let padded = dim + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of a `N×H×W` input with `M×N×K×K` weights.
///
/// Zero padding, no bias. Accumulation runs row-major over input taps
/// `(n, kh, kw)` per output element, in `f64`, rounded once to `f32`.
pub fn conv2d_dense(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n_in, h, w) = match input.shape() {
        [n, h, w] => (*n, *h, *w),
        s => {
            return Err(Error::Dimension(format!("conv input must be N×H×W, got {s:?}")));
        }
    };
    let (m, n_w, kh, kw) = match weights.shape() {
        [m, n, kh, kw] => (*m, *n, *kh, *kw),
        s => {
            return Err(Error::Dimension(format!("conv weights must be M×N×K×K, got {s:?}")));
        }
    };
    if kh != kw {
        return Err(Error::Dimension(format!("kernel must be square, got {kh}×{kw}")));
    }
    if n_in != n_w {
        return Err(Error::Dimension(format!(
            "input channels {n_in} do not match weight channels {n_w}"
        )));
    }
    let k = kh;
    let h_out = conv_output_dim(h, k, stride, padding)?;
    let w_out = conv_output_dim(w, k, stride, padding)?;

    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; m * h_out * w_out];
    for om in 0..m {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = 0.0f64;
                for ic in 0..n_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xi = x[(ic * h + iy as usize) * w + ix as usize];
                            let wi = wt[((om * n_in + ic) * k + ky) * k + kx];
                            acc += xi as f64 * wi as f64;
                        }
                    }
                }
                out[(om * h_out + oy) * w_out + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![m, h_out, w_out], out)
}

/// Matrix-vector product of `M×N` weights with a length-`N` input.
pub fn fc_dense(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        s => {
            return Err(Error::Dimension(format!("fc weights must be M×N, got {s:?}")));
        }
    };
    if input.len() != n {
        return Err(Error::Dimension(format!(
            "fc input length {} does not match weight columns {n}",
            input.len()
        )));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; m];
    for row in 0..m {
        let mut acc = 0.0f64;
        for col in 0..n {
            acc += wt[row * n + col] as f64 * x[col] as f64;
        }
        out[row] = acc as f32;
    }
    Tensor::new(vec![m], out)
}

/// Per-channel affine `y_c = scale_c · x_c + bias_c`, the inference-time form
/// of batch normalization. Channel `c` is the leading axis.
pub fn affine_channels(input: &Tensor, scale: &[f32], bias: &[f32]) -> Result<Tensor> {
    let channels = input.shape()[0];
    if scale.len() != channels || bias.len() != channels {
        return Err(Error::Dimension(format!(
            "affine expects {channels} scales and biases, got {} and {}",
            scale.len(),
            bias.len()
        )));
    }
    let per_channel = input.len() / channels;
    let mut out = input.data().to_vec();
    for c in 0..channels {
        for v in &mut out[c * per_channel..(c + 1) * per_channel] {
            *v = scale[c] * *v + bias[c];
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

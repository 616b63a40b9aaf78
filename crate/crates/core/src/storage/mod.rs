//! Dual-mask storage of sparse ternary layers plus the fractional parameter
//! counting that goes with it.
//!
//! A ternary layer is stored as two bit arrays and two half-precision values:
//! a location mask over every weight position (1 = nonzero), and a sign mask
//! over the nonzero positions only (1 = positive), both in row-major order of
//! the weight tensor, packed least-significant-bit first with the final byte
//! zero-padded. Mask bits count as 1/32 of a full-precision parameter and the
//! two 16-bit centroids together count as one.

pub mod file;

use half::f16;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{AssignmentMatrix, CentroidSet, Label};
use crate::tensor::{conv_output_dim, Tensor};

/// Packed bit array, least-significant-bit first within each byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    bytes: Vec<u8>,
    len: usize,
}

impl BitMask {
    pub fn with_capacity(bits: usize) -> Self {
        BitMask {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len: 0,
        }
    }

    pub fn push(&mut self, bit: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << (self.len % 8);
        }
        self.len += 1;
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Reconstruct from packed bytes, validating length and zero padding.
    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::CorruptLayer(format!(
                "mask of {len} bits needs {} bytes, got {}",
                len.div_ceil(8),
                bytes.len()
            )));
        }
        if !len.is_multiple_of(8) {
            let pad = bytes.last().copied().unwrap_or(0) >> (len % 8);
            if pad != 0 {
                return Err(Error::CorruptLayer("nonzero padding bits in mask".into()));
            }
        }
        Ok(BitMask { bytes, len })
    }
}

/// Weight tensor dimensions of a storable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerDims {
    /// Convolution weights `M×N×K×K` (out, in, kernel, kernel).
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
    },
    /// Fully-connected weights `M×N` (out, in).
    Fc {
        out_features: usize,
        in_features: usize,
    },
}

impl LayerDims {
    pub fn total(&self) -> usize {
        match *self {
            LayerDims::Conv {
                out_channels,
                in_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel,
            LayerDims::Fc {
                out_features,
                in_features,
            } => out_features * in_features,
        }
    }

    /// Row-major weight tensor shape.
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            LayerDims::Conv {
                out_channels,
                in_channels,
                kernel,
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerDims::Fc {
                out_features,
                in_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerDims::Conv { out_channels, .. } => out_channels,
            LayerDims::Fc { out_features, .. } => out_features,
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            LayerDims::Conv { in_channels, .. } => in_channels,
            LayerDims::Fc { in_features, .. } => in_features,
        }
    }

    pub fn kernel(&self) -> usize {
        match *self {
            LayerDims::Conv { kernel, .. } => kernel,
            LayerDims::Fc { .. } => 1,
        }
    }

    /// Positions per output channel.
    fn per_out_channel(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    fn validate(&self) -> Result<()> {
        if self.out_channels() == 0 || self.in_channels() == 0 || self.kernel() == 0 {
            return Err(Error::Dimension(format!("layer dims have a zero entry: {self:?}")));
        }
        Ok(())
    }
}

/// Bit-exact ternary layer: location + sign masks, half-precision centroids,
/// and the effective (structurally nonzero) channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryLayer {
    pub dims: LayerDims,
    pub location: BitMask,
    pub sign: BitMask,
    w_n_bits: u16,
    w_p_bits: u16,
    pub eff_in: usize,
    pub eff_out: usize,
}

impl TernaryLayer {
    /// Assemble from parts, re-deriving effective channels and validating the
    /// popcount invariant.
    pub fn from_parts(dims: LayerDims, location: BitMask, sign: BitMask, w_n_bits: u16, w_p_bits: u16) -> Result<Self> {
        dims.validate()?;
        if location.len() != dims.total() {
            return Err(Error::CorruptLayer(format!(
                "location mask has {} bits, dims imply {}",
                location.len(),
                dims.total()
            )));
        }
        if location.count_ones() != sign.len() {
            return Err(Error::CorruptLayer(format!(
                "sign mask has {} bits, location mask has {} ones",
                sign.len(),
                location.count_ones()
            )));
        }
        let (eff_in, eff_out) = effective_channels(&dims, &location);
        Ok(TernaryLayer {
            dims,
            location,
            sign,
            w_n_bits,
            w_p_bits,
            eff_in,
            eff_out,
        })
    }

    pub fn w_n(&self) -> f32 {
        f16::from_bits(self.w_n_bits).to_f32()
    }

    pub fn w_p(&self) -> f32 {
        f16::from_bits(self.w_p_bits).to_f32()
    }

    pub fn w_n_bits(&self) -> u16 {
        self.w_n_bits
    }

    pub fn w_p_bits(&self) -> u16 {
        self.w_p_bits
    }

    /// Nonzero density over the full position grid.
    pub fn sigma(&self) -> f64 {
        if self.location.is_empty() {
            return 0.0;
        }
        self.location.count_ones() as f64 / self.location.len() as f64
    }

    /// Nonzero density over the effective sub-tensor, the value used by the
    /// storage counting rules (pruned channels excluded).
    pub fn sigma_effective(&self) -> f64 {
        let denom = self.eff_in * self.dims.kernel() * self.dims.kernel() * self.eff_out;
        if denom == 0 {
            return 0.0;
        }
        self.location.count_ones() as f64 / denom as f64
    }

    /// Nonzero count per output channel, in channel order.
    pub fn nonzeros_per_out_channel(&self) -> Vec<usize> {
        let per = self.dims.per_out_channel();
        let mut counts = vec![0usize; self.dims.out_channels()];
        for i in 0..self.location.len() {
            if self.location.get(i) {
                counts[i / per] += 1;
            }
        }
        counts
    }

    /// Whether an output channel contains both a positive and a negative
    /// weight, per channel.
    pub fn both_clusters_per_out_channel(&self) -> Vec<bool> {
        let per = self.dims.per_out_channel();
        let mut has_pos = vec![false; self.dims.out_channels()];
        let mut has_neg = vec![false; self.dims.out_channels()];
        let mut sign_idx = 0;
        for i in 0..self.location.len() {
            if self.location.get(i) {
                if self.sign.get(sign_idx) {
                    has_pos[i / per] = true;
                } else {
                    has_neg[i / per] = true;
                }
                sign_idx += 1;
            }
        }
        has_pos.iter().zip(&has_neg).map(|(p, n)| *p && *n).collect()
    }
}

fn effective_channels(dims: &LayerDims, location: &BitMask) -> (usize, usize) {
    let k2 = dims.kernel() * dims.kernel();
    let n = dims.in_channels();
    let m = dims.out_channels();
    let mut in_used = vec![false; n];
    let mut out_used = vec![false; m];
    for i in 0..location.len() {
        if location.get(i) {
            let om = i / (n * k2);
            let ic = (i / k2) % n;
            out_used[om] = true;
            in_used[ic] = true;
        }
    }
    (
        in_used.iter().filter(|&&u| u).count(),
        out_used.iter().filter(|&&u| u).count(),
    )
}

/// Encode an assignment into the dual-mask representation. Centroids are
/// rounded to the nearest half-precision value (ties to even).
pub fn encode_ternary_layer(
    assign: &AssignmentMatrix,
    centroids: &CentroidSet,
    dims: LayerDims,
) -> Result<TernaryLayer> {
    dims.validate()?;
    if assign.len() != dims.total() {
        return Err(Error::Dimension(format!(
            "assignment has {} labels, dims imply {}",
            assign.len(),
            dims.total()
        )));
    }
    let mut location = BitMask::with_capacity(assign.len());
    let mut sign = BitMask::with_capacity(assign.len());
    for &label in assign.labels() {
        location.push(label != Label::Zero);
        if label != Label::Zero {
            sign.push(label == Label::Pos);
        }
    }
    TernaryLayer::from_parts(
        dims,
        location,
        sign,
        f16::from_f32(centroids.w_n()).to_bits(),
        f16::from_f32(centroids.w_p()).to_bits(),
    )
}

/// Materialize the quantized weight tensor: `w_p` where location and sign are
/// set, `w_n` where only location is set, zero elsewhere.
pub fn decode_ternary_layer(layer: &TernaryLayer) -> Result<Tensor> {
    if layer.location.count_ones() != layer.sign.len() {
        return Err(Error::CorruptLayer(format!(
            "sign mask has {} bits, location mask has {} ones",
            layer.sign.len(),
            layer.location.count_ones()
        )));
    }
    let w_n = layer.w_n();
    let w_p = layer.w_p();
    let mut data = vec![0.0f32; layer.dims.total()];
    let mut sign_idx = 0;
    for (i, v) in data.iter_mut().enumerate() {
        if layer.location.get(i) {
            *v = if layer.sign.get(sign_idx) { w_p } else { w_n };
            sign_idx += 1;
        }
    }
    Tensor::new(layer.dims.shape(), data)
}

/// Recover the assignment labels from the masks.
pub fn decode_labels(layer: &TernaryLayer) -> Result<AssignmentMatrix> {
    if layer.location.count_ones() != layer.sign.len() {
        return Err(Error::CorruptLayer("popcount/sign length mismatch".into()));
    }
    let mut labels = Vec::with_capacity(layer.dims.total());
    let mut sign_idx = 0;
    for i in 0..layer.location.len() {
        if layer.location.get(i) {
            labels.push(if layer.sign.get(sign_idx) { Label::Pos } else { Label::Neg });
            sign_idx += 1;
        } else {
            labels.push(Label::Zero);
        }
    }
    Ok(AssignmentMatrix::new(labels))
}

/// Fractional parameter count of one stored layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageCount {
    pub mask_params: f64,
    pub sign_params: f64,
    pub centroid_params: f64,
    pub bn_params: f64,
    pub total: f64,
}

/// Parameter count under the fractional rules: the location mask over the
/// effective sub-tensor counts `N_eff·K²·M_eff/32`, the sign mask counts one
/// 1/32 per stored nonzero, the two 16-bit centroids count as one parameter,
/// and an attached batch-norm adds a 16-bit bias per effective output channel
/// (`M_eff/2`).
pub fn count_storage_params(layer: &TernaryLayer, include_bn: bool) -> StorageCount {
    let k2 = layer.dims.kernel() * layer.dims.kernel();
    let mask_params = (layer.eff_in * k2 * layer.eff_out) as f64 / 32.0;
    // σ·N_eff·K²·M_eff/32 reduces to ones/32 exactly.
    let sign_params = layer.location.count_ones() as f64 / 32.0;
    let centroid_params = 1.0;
    let bn_params = if include_bn {
        layer.eff_out as f64 / 2.0
    } else {
        0.0
    };
    StorageCount {
        mask_params,
        sign_params,
        centroid_params,
        bn_params,
        total: mask_params + sign_params + centroid_params + bn_params,
    }
}

/// Sparse ternary matrix-vector product: per output feature, inputs at
/// positive and negative taps are accumulated separately and combined with
/// exactly two multiplications.
pub fn ternary_fc(input: &Tensor, layer: &TernaryLayer) -> Result<Tensor> {
    let LayerDims::Fc {
        out_features,
        in_features,
    } = layer.dims
    else {
        return Err(Error::Dimension("ternary_fc needs FC dims".into()));
    };
    if input.len() != in_features {
        return Err(Error::Dimension(format!(
            "input length {} does not match in_features {in_features}",
            input.len()
        )));
    }
    let taps = tap_lists(layer);
    let x = input.data();
    let w_n = layer.w_n() as f64;
    let w_p = layer.w_p() as f64;
    let mut out = vec![0.0f32; out_features];
    for (m, row) in taps.iter().enumerate() {
        let mut acc_p = 0.0f64;
        let mut acc_n = 0.0f64;
        for &(offset, positive) in row {
            if positive {
                acc_p += x[offset] as f64;
            } else {
                acc_n += x[offset] as f64;
            }
        }
        out[m] = (w_p * acc_p + w_n * acc_n) as f32;
    }
    Tensor::new(vec![out_features], out)
}

/// Sparse ternary convolution over a `N×H×W` input; same contract as the
/// dense reference kernel, two multiplications per output element.
pub fn ternary_conv2d(
    input: &Tensor,
    layer: &TernaryLayer,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let LayerDims::Conv {
        out_channels,
        in_channels,
        kernel,
    } = layer.dims
    else {
        return Err(Error::Dimension("ternary_conv2d needs conv dims".into()));
    };
    let (n_in, h, w) = match input.shape() {
        [n, h, w] => (*n, *h, *w),
        s => {
            return Err(Error::Dimension(format!("conv input must be N×H×W, got {s:?}")));
        }
    };
    if n_in != in_channels {
        return Err(Error::Dimension(format!(
            "input channels {n_in} do not match layer channels {in_channels}"
        )));
    }
    let h_out = conv_output_dim(h, kernel, stride, padding)?;
    let w_out = conv_output_dim(w, kernel, stride, padding)?;

    let taps = tap_lists(layer);
    let x = input.data();
    let w_n = layer.w_n() as f64;
    let w_p = layer.w_p() as f64;
    let k2 = kernel * kernel;
    let mut out = vec![0.0f32; out_channels * h_out * w_out];
    for (m, row) in taps.iter().enumerate() {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc_p = 0.0f64;
                let mut acc_n = 0.0f64;
                for &(offset, positive) in row {
                    let ic = offset / k2;
                    let ky = (offset % k2) / kernel;
                    let kx = offset % kernel;
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let v = x[(ic * h + iy as usize) * w + ix as usize] as f64;
                    if positive {
                        acc_p += v;
                    } else {
                        acc_n += v;
                    }
                }
                out[(m * h_out + oy) * w_out + ox] = (w_p * acc_p + w_n * acc_n) as f32;
            }
        }
    }
    Tensor::new(vec![out_channels, h_out, w_out], out)
}

/// Nonzero taps grouped by output channel as (offset within the channel's
/// weight slice, is-positive).
fn tap_lists(layer: &TernaryLayer) -> Vec<Vec<(usize, bool)>> {
    let per = layer.dims.per_out_channel();
    let mut taps = vec![Vec::new(); layer.dims.out_channels()];
    let mut sign_idx = 0;
    for i in 0..layer.location.len() {
        if layer.location.get(i) {
            taps[i / per].push((i % per, layer.sign.get(sign_idx)));
            sign_idx += 1;
        }
    }
    taps
}

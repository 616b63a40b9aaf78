//! Operation and parameter accounting.
//!
//! Counting conventions, spelled out because no two model-size tables
//! ever seem to agree on them:
//!
//! * Dense conv/FC follow the fused multiply-accumulate convention:
//!   `adds = mults = N·K²·M·H_out·W_out`.
//! * Batch norm costs one add and one multiply per channel and spatial
//!   position. Pooling, activations, softmax, and residual additions are
//!   excluded.
//! * A ternary layer with `z` nonzero weights in an output channel costs `z`
//!   accumulations and exactly 2 multiplications per output position; in
//!   tree-adder mode the accumulations drop to `max(z−1, 0)` plus one final
//!   add when both sign clusters are present.
//! * Dense parameters count 1 each (batch norm: scale and bias, 2 per
//!   channel). Ternary layers use the fractional mask/centroid counting from
//!   [`crate::storage::count_storage_params`]; a batch norm directly after a
//!   ternary layer is folded into that layer's count as a half parameter per
//!   effective output channel.
//! * Model sparsity is the zero fraction over all conv/FC weight elements;
//!   dense layers contribute zeros only if stored weights happen to be zero
//!   (for spec-only entries, none).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::storage::{count_storage_params, StorageCount, TernaryLayer};
use crate::tensor::{LayerKind, LayerSpec};

/// Addition/multiplication/FLOP counts; `flops == adds + mults` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct OpsCount {
    pub adds: u64,
    pub mults: u64,
    pub flops: u64,
}

impl OpsCount {
    pub fn new(adds: u64, mults: u64) -> Self {
        OpsCount {
            adds,
            mults,
            flops: adds + mults,
        }
    }

    pub fn accumulate(&mut self, other: OpsCount) {
        self.adds += other.adds;
        self.mults += other.mults;
        self.flops += other.flops;
    }
}

/// Dense operation count of one layer.
pub fn count_dense_ops(spec: &LayerSpec) -> OpsCount {
    let spatial = spec.spatial() as u64;
    match spec.kind {
        LayerKind::Conv2d | LayerKind::FullyConnected => {
            let macs = spec.weight_elements() as u64 * spatial;
            OpsCount::new(macs, macs)
        }
        LayerKind::BatchNorm => {
            let per_position = spec.out_channels as u64 * spatial;
            OpsCount::new(per_position, per_position)
        }
    }
}

/// Full-precision parameter count of one layer.
pub fn dense_params(spec: &LayerSpec) -> f64 {
    match spec.kind {
        LayerKind::Conv2d | LayerKind::FullyConnected => spec.weight_elements() as f64,
        LayerKind::BatchNorm => 2.0 * spec.out_channels as f64,
    }
}

/// Operation count of a stored ternary layer evaluated over `spatial`
/// output positions per channel.
pub fn count_ternary_ops(layer: &TernaryLayer, spatial: (usize, usize), tree_adder: bool) -> OpsCount {
    let positions = (spatial.0 * spatial.1) as u64;
    let nonzeros = layer.nonzeros_per_out_channel();
    let both = layer.both_clusters_per_out_channel();
    let mut adds = 0u64;
    let mut mults = 0u64;
    for (z, both_present) in nonzeros.into_iter().zip(both) {
        if z == 0 {
            continue;
        }
        adds += if tree_adder {
            (z as u64 - 1) + u64::from(both_present)
        } else {
            z as u64
        };
        mults += 2;
    }
    OpsCount::new(adds * positions, mults * positions)
}

/// One layer of a model to report on: its spec, an optional stored ternary
/// form, and a display name.
#[derive(Debug, Clone)]
pub struct ReportEntry {
    pub name: String,
    pub spec: LayerSpec,
    pub ternary: Option<TernaryLayer>,
}

/// Per-layer report row.
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub quantized: bool,
    pub params: f64,
    pub ops: OpsCount,
    /// Zero fraction of this layer's weight elements (0 for dense entries).
    pub sparsity: f64,
    pub storage: Option<StorageCount>,
}

/// Whole-model report.
#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub layers: Vec<LayerReport>,
    pub total_params: f64,
    pub total_ops: OpsCount,
    /// Zero fraction over all conv/FC weight elements.
    pub sparsity: f64,
}

fn check_consistent(spec: &LayerSpec, ternary: &TernaryLayer) -> Result<()> {
    let matches = match spec.kind {
        LayerKind::Conv2d => {
            ternary.dims.out_channels() == spec.out_channels
                && ternary.dims.in_channels() == spec.in_channels
                && ternary.dims.kernel() == spec.kernel
                && matches!(ternary.dims, crate::storage::LayerDims::Conv { .. })
        }
        LayerKind::FullyConnected => {
            ternary.dims.out_channels() == spec.out_channels
                && ternary.dims.in_channels() == spec.in_channels
                && matches!(ternary.dims, crate::storage::LayerDims::Fc { .. })
        }
        LayerKind::BatchNorm => false,
    };
    if !matches {
        return Err(Error::Dimension(format!(
            "stored dims {:?} do not match spec {spec:?}",
            ternary.dims
        )));
    }
    Ok(())
}

/// Build the per-layer and whole-model report.
pub fn model_report(entries: &[ReportEntry], tree_adder: bool) -> Result<ModelReport> {
    let mut layers = Vec::with_capacity(entries.len());
    let mut total_params = 0.0;
    let mut total_ops = OpsCount::default();
    let mut zero_elements = 0u64;
    let mut weight_elements = 0u64;

    // Effective channel count of the ternary layer an upcoming batch norm
    // belongs to, if any.
    let mut pending_bn_channels: Option<usize> = None;

    for (i, entry) in entries.iter().enumerate() {
        let spec = &entry.spec;
        let row = match (spec.kind, &entry.ternary) {
            (LayerKind::BatchNorm, Some(_)) => {
                return Err(Error::InvalidConfig(format!(
                    "batch-norm entry {} cannot carry a ternary layer",
                    entry.name
                )));
            }
            (LayerKind::BatchNorm, None) => {
                // Folded into the preceding ternary layer's storage count when
                // one exists; a standalone batch norm counts scale + bias.
                let (params, channels) = match pending_bn_channels.take() {
                    Some(eff_out) => (0.0, eff_out),
                    None => (dense_params(spec), spec.out_channels),
                };
                let per_position = channels as u64 * spec.spatial() as u64;
                LayerReport {
                    name: entry.name.clone(),
                    kind: spec.kind,
                    quantized: false,
                    params,
                    ops: OpsCount::new(per_position, per_position),
                    sparsity: 0.0,
                    storage: None,
                }
            }
            (_, None) => {
                pending_bn_channels = None;
                weight_elements += spec.weight_elements() as u64;
                LayerReport {
                    name: entry.name.clone(),
                    kind: spec.kind,
                    quantized: false,
                    params: dense_params(spec),
                    ops: count_dense_ops(spec),
                    sparsity: 0.0,
                    storage: None,
                }
            }
            (_, Some(ternary)) => {
                check_consistent(spec, ternary)?;
                let followed_by_bn = entries
                    .get(i + 1)
                    .is_some_and(|next| next.spec.kind == LayerKind::BatchNorm);
                pending_bn_channels = followed_by_bn.then_some(ternary.eff_out);
                let storage = count_storage_params(ternary, followed_by_bn);
                let total = ternary.dims.total() as u64;
                let ones = ternary.location.count_ones() as u64;
                weight_elements += total;
                zero_elements += total - ones;
                LayerReport {
                    name: entry.name.clone(),
                    kind: spec.kind,
                    quantized: true,
                    params: storage.total,
                    ops: count_ternary_ops(ternary, (spec.out_height, spec.out_width), tree_adder),
                    sparsity: 1.0 - ternary.sigma(),
                    storage: Some(storage),
                }
            }
        };
        total_params += row.params;
        total_ops.accumulate(row.ops);
        layers.push(row);
    }

    let sparsity = if weight_elements == 0 {
        0.0
    } else {
        zero_elements as f64 / weight_elements as f64
    };
    Ok(ModelReport {
        layers,
        total_params,
        total_ops,
        sparsity,
    })
}

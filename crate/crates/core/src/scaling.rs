//! Compound model scaling: solve `a·b²·c² ≈ 2` on a grid and apply the
//! derived depth/width/resolution factors `d = a^φ`, `w = b^φ`, `r = c^φ` to
//! an architecture descriptor.
//!
//! The built-in descriptor is a CIFAR-scale residual network: a 3×3 stem,
//! three stages of identical two-convolution blocks, and a global-average-
//! pool plus fully-connected head. Stem and head are never quantized.

use serde::Serialize;

use crate::accounting::count_dense_ops;
use crate::error::{Error, Result};
use crate::tensor::LayerSpec;

/// Acceptable residual `|a·b²·c² − 2|` for a returned solution.
pub const SCALING_TOLERANCE: f64 = 0.01;

/// Residuals within this distance of the best are treated as tied and
/// decided by the FLOP-budget objective.
const RESIDUAL_QUANTUM: f64 = 1e-12;

/// Grid coefficients plus the derived scaling factors.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingSolution {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub phi: f64,
    pub d: f64,
    pub w: f64,
    pub r: f64,
    pub residual: f64,
}

impl ScalingSolution {
    /// Build a solution from known coefficients, validating the constraint.
    pub fn from_coefficients(a: f64, b: f64, c: f64, phi: f64) -> Result<Self> {
        if a < 1.0 || b < 1.0 || c < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "coefficients must be ≥ 1, got ({a}, {b}, {c})"
            )));
        }
        if phi < 0.0 || !phi.is_finite() {
            return Err(Error::InvalidConfig(format!("phi must be finite and ≥ 0, got {phi}")));
        }
        let residual = (a * b * b * c * c - 2.0).abs();
        if residual > SCALING_TOLERANCE {
            return Err(Error::Infeasible { best_residual: residual });
        }
        Ok(ScalingSolution {
            a,
            b,
            c,
            phi,
            d: a.powf(phi),
            w: b.powf(phi),
            r: c.powf(phi),
            residual,
        })
    }
}

/// One stage of identical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub repetitions: usize,
    pub channels: usize,
    pub resolution: usize,
}

/// Architecture skeleton: stem, staged blocks, classifier head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchDescriptor {
    pub stem: LayerSpec,
    pub stages: Vec<Stage>,
    pub head: LayerSpec,
    pub n_classes: usize,
}

/// The built-in CIFAR-scale descriptor: 3×3 stem to 16 channels at 32×32,
/// three stages of 7 blocks at {16, 32, 64} channels and {32, 16, 8}
/// resolution, then global average pooling and a fully-connected classifier.
pub fn micronet_descriptor(n_classes: usize) -> Result<ArchDescriptor> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "classifier needs at least 2 classes, got {n_classes}"
        )));
    }
    Ok(ArchDescriptor {
        stem: LayerSpec::conv2d(3, 16, 3, 32, 32, false)?,
        stages: vec![
            Stage { repetitions: 7, channels: 16, resolution: 32 },
            Stage { repetitions: 7, channels: 32, resolution: 16 },
            Stage { repetitions: 7, channels: 64, resolution: 8 },
        ],
        head: LayerSpec::fully_connected(64, n_classes, false)?,
        n_classes,
    })
}

/// Round half up with a floor of 1, the rule used for every scaled
/// integer dimension.
fn scale_dim(base: usize, factor: f64) -> usize {
    ((base as f64 * factor + 0.5).floor() as usize).max(1)
}

/// Apply (d, w, r) to a descriptor: repetitions scale with depth, channel
/// widths (including stem and head input) with width, stage resolutions with
/// resolution. The class count never changes.
pub fn scale_architecture(arch: &ArchDescriptor, sol: &ScalingSolution) -> ArchDescriptor {
    let stages: Vec<Stage> = arch
        .stages
        .iter()
        .map(|s| Stage {
            repetitions: scale_dim(s.repetitions, sol.d),
            channels: scale_dim(s.channels, sol.w),
            resolution: scale_dim(s.resolution, sol.r),
        })
        .collect();
    let stem_res = stages.first().map_or_else(
        || scale_dim(arch.stem.out_height, sol.r),
        |s| s.resolution,
    );
    let stem = LayerSpec {
        out_channels: scale_dim(arch.stem.out_channels, sol.w),
        out_height: stem_res,
        out_width: stem_res,
        ..arch.stem.clone()
    };
    let head_in = stages.last().map_or_else(
        || scale_dim(arch.head.in_channels, sol.w),
        |s| s.channels,
    );
    let head = LayerSpec {
        in_channels: head_in,
        ..arch.head.clone()
    };
    ArchDescriptor {
        stem,
        stages,
        head,
        n_classes: arch.n_classes,
    }
}

/// Flatten a descriptor into per-layer specs for counting and reporting.
///
/// Each block is two 3×3 convolutions with batch norm and a residual
/// connection; the first block of a stage that changes channels or
/// resolution downsamples and adds a 1×1 projection on the shortcut.
/// Pooling, activations, and the residual additions carry no specs of their
/// own. Only block convolutions are marked quantizable.
pub fn expand_descriptor(arch: &ArchDescriptor) -> Result<Vec<LayerSpec>> {
    let mut specs = Vec::new();
    specs.push(arch.stem.clone());
    specs.push(LayerSpec::batch_norm(
        arch.stem.out_channels,
        arch.stem.out_height,
        arch.stem.out_width,
    )?);

    let mut in_channels = arch.stem.out_channels;
    let mut in_resolution = arch.stem.out_height;
    for stage in &arch.stages {
        for block in 0..stage.repetitions {
            let transition =
                block == 0 && (in_channels != stage.channels || in_resolution != stage.resolution);
            let res = stage.resolution;
            specs.push(LayerSpec::conv2d(in_channels, stage.channels, 3, res, res, true)?);
            specs.push(LayerSpec::batch_norm(stage.channels, res, res)?);
            specs.push(LayerSpec::conv2d(stage.channels, stage.channels, 3, res, res, true)?);
            specs.push(LayerSpec::batch_norm(stage.channels, res, res)?);
            if transition {
                specs.push(LayerSpec::conv2d(in_channels, stage.channels, 1, res, res, true)?);
                specs.push(LayerSpec::batch_norm(stage.channels, res, res)?);
            }
            in_channels = stage.channels;
            in_resolution = stage.resolution;
        }
    }
    specs.push(arch.head.clone());
    Ok(specs)
}

/// Total dense FLOPs of a descriptor, used as the tie-break objective.
pub fn estimate_flops(arch: &ArchDescriptor) -> Result<u64> {
    Ok(expand_descriptor(arch)?
        .iter()
        .map(|spec| count_dense_ops(spec).flops)
        .sum())
}

/// Grid-search the constraint `a·b²·c² ≈ 2` over `{1, 1+step, …, 3}`.
///
/// The residual `|a·b²·c² − 2|` is minimized first; residual ties are decided
/// by how close the scaled built-in descriptor's dense FLOPs land to the
/// `2^φ` budget, then lexicographically for determinism. With `fix_r` the
/// resolution coefficient is pinned to 1. Fails if no grid point comes
/// within [`SCALING_TOLERANCE`].
pub fn solve_compound_scaling(phi: f64, fix_r: bool, grid_step: f64) -> Result<ScalingSolution> {
    if phi < 0.0 || !phi.is_finite() {
        return Err(Error::InvalidConfig(format!("phi must be finite and ≥ 0, got {phi}")));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "grid step must be in (0, 0.5], got {grid_step}"
        )));
    }
    let mut grid = Vec::new();
    let mut i = 0usize;
    loop {
        let v = 1.0 + i as f64 * grid_step;
        if v > 3.0 + 1e-9 {
            break;
        }
        grid.push(v);
        i += 1;
    }
    let c_grid: &[f64] = if fix_r { &[1.0] } else { &grid };

    let mut best_residual = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            let ab2 = a * b * b;
            for &c in c_grid {
                let residual = (ab2 * c * c - 2.0).abs();
                if residual < best_residual {
                    best_residual = residual;
                }
            }
        }
    }
    if best_residual > SCALING_TOLERANCE {
        return Err(Error::Infeasible { best_residual });
    }

    let mut ties = Vec::new();
    for &a in &grid {
        for &b in &grid {
            let ab2 = a * b * b;
            for &c in c_grid {
                let residual = (ab2 * c * c - 2.0).abs();
                if residual <= best_residual + RESIDUAL_QUANTUM {
                    ties.push((a, b, c, residual));
                }
            }
        }
    }

    let base = micronet_descriptor(10)?;
    let base_flops = estimate_flops(&base)? as f64;
    let budget = phi.exp2() * base_flops;
    let mut best: Option<(f64, (f64, f64, f64, f64))> = None;
    for (a, b, c, residual) in ties {
        let candidate = ScalingSolution {
            a,
            b,
            c,
            phi,
            d: a.powf(phi),
            w: b.powf(phi),
            r: c.powf(phi),
            residual,
        };
        let flops = estimate_flops(&scale_architecture(&base, &candidate))? as f64;
        let score = (flops / budget - 1.0).abs();
        let key = (score, (a, b, c, residual));
        let better = match &best {
            None => true,
            Some((best_score, (ba, bb, bc, _))) => {
                key.0 < *best_score - 1e-15
                    || ((key.0 - *best_score).abs() <= 1e-15 && (a, b, c) < (*ba, *bb, *bc))
            }
        };
        if better {
            best = Some(key);
        }
    }
    let (_, (a, b, c, residual)) = best.expect("tie set is non-empty when feasible");
    Ok(ScalingSolution {
        a,
        b,
        c,
        phi,
        d: a.powf(phi),
        w: b.powf(phi),
        r: c.powf(phi),
        residual,
    })
}

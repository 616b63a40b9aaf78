//! Cross-module property tests: codec identities, argmin equivalence against
//! brute force, kernel agreement between sparse and dense paths.

use proptest::prelude::*;

use ec2t_core::quant::{
    assign, assignment_cost, cluster_stats, quantize_layer, AssignmentMatrix, CentroidSet,
    ClusterStats, Label, QuantizeMode,
};
use ec2t_core::storage::file::{ModelFile, NamedLayer};
use ec2t_core::storage::{
    count_storage_params, decode_labels, decode_ternary_layer, encode_ternary_layer,
    ternary_conv2d, ternary_fc, LayerDims,
};
use ec2t_core::tensor::{conv2d_dense, fc_dense, Tensor};

fn label_of(v: u8) -> Label {
    match v % 3 {
        0 => Label::Neg,
        1 => Label::Zero,
        _ => Label::Pos,
    }
}

fn arb_centroids() -> impl Strategy<Value = CentroidSet> {
    (-2.0f32..-0.01, 0.01f32..2.0).prop_map(|(n, p)| CentroidSet::new(n, p).unwrap())
}

fn arb_conv_dims() -> impl Strategy<Value = LayerDims> {
    (1usize..=4, 1usize..=3, prop_oneof![Just(1usize), Just(3usize)]).prop_map(
        |(out_channels, in_channels, kernel)| LayerDims::Conv {
            out_channels,
            in_channels,
            kernel,
        },
    )
}

fn arb_fc_dims() -> impl Strategy<Value = LayerDims> {
    (1usize..=6, 1usize..=8).prop_map(|(out_features, in_features)| LayerDims::Fc {
        out_features,
        in_features,
    })
}

fn arb_dims() -> impl Strategy<Value = LayerDims> {
    prop_oneof![arb_conv_dims(), arb_fc_dims()]
}

/// Independent three-way argmin with the declared tie-break (zero first,
/// then negative).
fn brute_force_argmin(costs: [f64; 3]) -> Label {
    let (cn, c0, cp) = (costs[0], costs[1], costs[2]);
    if c0 <= cn && c0 <= cp {
        Label::Zero
    } else if cn <= cp {
        Label::Neg
    } else {
        Label::Pos
    }
}

/// Independent nearest-centroid labeling with the declared tie-break.
fn nearest_label(w: f64, centroids: &CentroidSet) -> Label {
    let dn = (w - centroids.w_n() as f64).powi(2);
    let d0 = w * w;
    let dp = (w - centroids.w_p() as f64).powi(2);
    brute_force_argmin([dn, d0, dp])
}

proptest! {
    #[test]
    fn mask_round_trip_is_identity(
        dims in arb_dims(),
        seed in any::<u64>(),
        centroids in arb_centroids(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let labels: Vec<Label> = (0..dims.total()).map(|_| label_of(rng.below(3) as u8)).collect();
        let assignment = AssignmentMatrix::new(labels);
        let layer = encode_ternary_layer(&assignment, &centroids, dims).unwrap();

        // Labels survive the mask encoding.
        prop_assert_eq!(decode_labels(&layer).unwrap(), assignment.clone());

        // The decoded tensor equals the materialization with half-precision
        // centroids.
        let rounded = CentroidSet::clamped(
            half::f16::from_f32(centroids.w_n()).to_f32(),
            half::f16::from_f32(centroids.w_p()).to_f32(),
        );
        let want = assignment.materialize(&rounded, &dims.shape()).unwrap();
        prop_assert_eq!(decode_ternary_layer(&layer).unwrap(), want);

        // Density is a proper fraction and the sign mask matches it.
        prop_assert!((0.0..=1.0).contains(&layer.sigma()));
        prop_assert_eq!(layer.location.count_ones(), layer.sign.len());
    }

    #[test]
    fn assignment_matches_brute_force(
        n in 1usize..=144,
        seed in any::<u64>(),
        centroids in arb_centroids(),
        counts in (0usize..40, 0usize..40, 0usize..40),
        lambda in 0.0f64..2.0,
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1.5, 1.5) as f32).collect();
        let weights = Tensor::new(vec![n], data).unwrap();
        let total = (counts.0 + counts.1 + counts.2).max(1);
        let floor = ClusterStats::floor(total);
        let stats = ClusterStats {
            counts: [counts.0, counts.1, counts.2],
            probs: [
                (counts.0 as f64 / total as f64).max(floor),
                (counts.1 as f64 / total as f64).max(floor),
                (counts.2 as f64 / total as f64).max(floor),
            ],
            total,
        };
        let cost = assignment_cost(&weights, &centroids, &stats, lambda);
        let got = assign(&cost);
        for i in 0..n {
            prop_assert_eq!(got.labels()[i], brute_force_argmin(cost.element(i)));
        }
    }

    #[test]
    fn lambda_zero_is_nearest_neighbor(
        n in 1usize..=100,
        seed in any::<u64>(),
        centroids in arb_centroids(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let weights = Tensor::new(vec![n], data.clone()).unwrap();
        let (assignment, _) =
            quantize_layer(&weights, &centroids, 0.0, QuantizeMode::Ec2t, 0.0).unwrap();
        for (i, &w) in data.iter().enumerate() {
            prop_assert_eq!(assignment.labels()[i], nearest_label(w as f64, &centroids));
        }
    }

    #[test]
    fn zero_label_sets_nest_as_lambda_grows(
        n in 1usize..=80,
        seed in any::<u64>(),
        centroids in arb_centroids(),
        lambda_lo in 0.0f64..1.0,
        lambda_gap in 0.0f64..1.0,
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(-1.5, 1.5) as f32).collect();
        let weights = Tensor::new(vec![n], data).unwrap();
        // Fixed statistics with the zero cluster at maximal probability.
        let stats = ClusterStats {
            counts: [1, 3, 1],
            probs: [0.2, 0.6, 0.2],
            total: 5,
        };
        let lo = assign(&assignment_cost(&weights, &centroids, &stats, lambda_lo));
        let hi = assign(&assignment_cost(&weights, &centroids, &stats, lambda_lo + lambda_gap));
        for (a, b) in lo.labels().iter().zip(hi.labels()) {
            prop_assert!(*a != Label::Zero || *b == Label::Zero);
        }
    }

    #[test]
    fn storage_count_matches_recount_oracle(
        dims in arb_dims(),
        seed in any::<u64>(),
        include_bn in any::<bool>(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let labels: Vec<Label> = (0..dims.total()).map(|_| label_of(rng.below(3) as u8)).collect();
        let layer = encode_ternary_layer(
            &AssignmentMatrix::new(labels.clone()),
            &CentroidSet::new(-1.0, 1.0).unwrap(),
            dims,
        )
        .unwrap();
        let count = count_storage_params(&layer, include_bn);

        // Recount from raw labels.
        let (n, m, k) = (dims.in_channels(), dims.out_channels(), dims.kernel());
        let k2 = k * k;
        let mut in_used = vec![false; n];
        let mut out_used = vec![false; m];
        let mut ones = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l != Label::Zero {
                ones += 1;
                out_used[i / (n * k2)] = true;
                in_used[(i / k2) % n] = true;
            }
        }
        let n_eff = in_used.iter().filter(|&&u| u).count();
        let m_eff = out_used.iter().filter(|&&u| u).count();
        prop_assert_eq!(layer.eff_in, n_eff);
        prop_assert_eq!(layer.eff_out, m_eff);
        prop_assert_eq!(count.mask_params, (n_eff * k2 * m_eff) as f64 / 32.0);
        prop_assert_eq!(count.sign_params, ones as f64 / 32.0);
        prop_assert_eq!(count.centroid_params, 1.0);
        let bn = if include_bn { m_eff as f64 / 2.0 } else { 0.0 };
        prop_assert_eq!(count.bn_params, bn);
        prop_assert_eq!(
            count.total,
            count.mask_params + count.sign_params + 1.0 + bn
        );
    }

    #[test]
    fn model_file_bytes_round_trip(
        n_layers in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let mut model = ModelFile::default();
        for i in 0..n_layers {
            let dims = if rng.below(2) == 0 {
                LayerDims::Conv {
                    out_channels: 1 + rng.below(4),
                    in_channels: 1 + rng.below(3),
                    kernel: 1 + 2 * rng.below(2),
                }
            } else {
                LayerDims::Fc {
                    out_features: 1 + rng.below(6),
                    in_features: 1 + rng.below(6),
                }
            };
            let labels: Vec<Label> =
                (0..dims.total()).map(|_| label_of(rng.below(3) as u8)).collect();
            let layer = encode_ternary_layer(
                &AssignmentMatrix::new(labels),
                &CentroidSet::new(
                    rng.uniform(-2.0, -0.1) as f32,
                    rng.uniform(0.1, 2.0) as f32,
                )
                .unwrap(),
                dims,
            )
            .unwrap();
            let bn_bias = (rng.below(2) == 0)
                .then(|| (0..layer.eff_out).map(|_| rng.next_u64() as u16).collect());
            model.layers.push(NamedLayer {
                name: format!("l{i}"),
                layer,
                bn_bias,
            });
        }
        let bytes = model.to_bytes().unwrap();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());

        // Any single bit flip is rejected.
        let byte = rng.below(bytes.len());
        let bit = rng.below(8);
        let mut corrupted = bytes;
        corrupted[byte] ^= 1 << bit;
        prop_assert!(ModelFile::from_bytes(&corrupted).is_err());
    }

    #[test]
    fn sparse_kernels_match_dense_reference(
        dims in arb_conv_dims(),
        seed in any::<u64>(),
        centroids in arb_centroids(),
        stride in 1usize..=2,
        padding in 0usize..=1,
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let labels: Vec<Label> = (0..dims.total()).map(|_| label_of(rng.below(3) as u8)).collect();
        let layer = encode_ternary_layer(&AssignmentMatrix::new(labels), &centroids, dims).unwrap();
        let dense = decode_ternary_layer(&layer).unwrap();
        let side = dims.kernel() + 2 + rng.below(3);
        let input = Tensor::new(
            vec![dims.in_channels(), side, side],
            (0..dims.in_channels() * side * side)
                .map(|_| rng.uniform(-1.0, 1.0) as f32)
                .collect(),
        )
        .unwrap();
        let want = conv2d_dense(&input, &dense, stride, padding).unwrap();
        let got = ternary_conv2d(&input, &layer, stride, padding).unwrap();
        prop_assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sparse_fc_matches_dense_reference(
        dims in arb_fc_dims(),
        seed in any::<u64>(),
        centroids in arb_centroids(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let labels: Vec<Label> = (0..dims.total()).map(|_| label_of(rng.below(3) as u8)).collect();
        let layer = encode_ternary_layer(&AssignmentMatrix::new(labels), &centroids, dims).unwrap();
        let dense = decode_ternary_layer(&layer).unwrap();
        let input = Tensor::new(
            vec![dims.in_channels()],
            (0..dims.in_channels()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let want = fc_dense(&input, &dense).unwrap();
        let got = ternary_fc(&input, &layer).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn cluster_stats_sum_and_floor(
        n in 1usize..=200,
        seed in any::<u64>(),
    ) {
        let mut rng = ec2t_core::rng::Rng::new(seed);
        let labels: Vec<Label> = (0..n).map(|_| label_of(rng.below(3) as u8)).collect();
        let stats = cluster_stats(&AssignmentMatrix::new(labels));
        prop_assert_eq!(stats.counts.iter().sum::<usize>(), n);
        let floor = ClusterStats::floor(n);
        for c in 0..3 {
            prop_assert!(stats.probs[c] >= floor);
            prop_assert!(stats.probs[c] <= 1.0);
            if stats.counts[c] > 0 {
                let raw = stats.counts[c] as f64 / n as f64;
                prop_assert_eq!(stats.probs[c], raw.max(floor));
            }
        }
    }
}

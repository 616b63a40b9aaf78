use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use ec2t_core::accounting::{model_report, ModelReport, ReportEntry};
use ec2t_core::quant::{compute_lambda_max, init_centroids, quantize_layer, QuantizeMode};
use ec2t_core::rng::Rng;
use ec2t_core::scaling::{micronet_descriptor, scale_architecture, solve_compound_scaling};
use ec2t_core::storage::file::{ModelFile, NamedLayer};
use ec2t_core::storage::{
    decode_ternary_layer, encode_ternary_layer, ternary_conv2d, ternary_fc, LayerDims,
};
use ec2t_core::tensor::{conv2d_dense, fc_dense, LayerSpec, Tensor};
use ec2t_core::train::{
    builtin_mlp_spec, evaluate, gen_two_moons, train_pretrained_ec2t, MetricsRow, TrainConfig,
};

use crate::{
    ExportArgs, ImportArgs, ModeChoice, QuantizeArgs, ReportArgs, ScaleArgs, TrainDemoArgs,
    VerifyArgs,
};

impl ModeChoice {
    fn to_mode(self) -> QuantizeMode {
        match self {
            ModeChoice::Ec2t => QuantizeMode::Ec2t,
            ModeChoice::Ttq => QuantizeMode::TtqThreshold,
        }
    }
}

pub fn scale(args: &ScaleArgs) -> Result<()> {
    let solution = solve_compound_scaling(args.phi, args.fix_r, args.grid_step)?;
    let base = micronet_descriptor(args.classes)?;
    let scaled = scale_architecture(&base, &solution);
    let out = json!({
        "solution": solution,
        "descriptor": scaled,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub fn quantize(args: &QuantizeArgs) -> Result<()> {
    let weights = Tensor::read_file(&args.weights)
        .with_context(|| format!("reading {}", args.weights.display()))?;
    let centroids = init_centroids(&weights)?;
    let lambda_max = compute_lambda_max(&weights, &centroids);
    // A single layer is its own largest layer, so δ = 1.
    let delta = 1.0;
    let lambda = args.gamma * delta * lambda_max.value;
    let (assignment, stats) =
        quantize_layer(&weights, &centroids, lambda, args.mode.to_mode(), args.t)?;
    let counts = assignment.counts();
    let out = json!({
        "elements": weights.len(),
        "mode": args.mode.to_mode(),
        "counts": { "neg": counts[0], "zero": counts[1], "pos": counts[2] },
        "probabilities": { "neg": stats.probs[0], "zero": stats.probs[1], "pos": stats.probs[2] },
        "sparsity": assignment.sparsity(),
        "centroids": { "w_n": centroids.w_n(), "w_p": centroids.w_p() },
        "lambda": {
            "gamma": args.gamma,
            "delta": delta,
            "lambda_max": lambda_max.value,
            "capped": lambda_max.capped,
            "lambda": lambda,
            "threshold_t": args.t,
        },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn csv_header(quantized_layers: &[usize], sweep: bool) -> String {
    let mut cols = vec![if sweep { "gamma".to_string() } else { "epoch".to_string() }];
    cols.extend(["train_loss", "train_accuracy", "model_sparsity"].map(String::from));
    for l in quantized_layers {
        cols.push(format!("layer{l}_w_n"));
        cols.push(format!("layer{l}_w_p"));
    }
    cols.join(",")
}

fn csv_row(first: String, row: &MetricsRow, quantized_layers: &[usize]) -> String {
    let mut cols = vec![
        first,
        format!("{}", row.train_loss),
        format!("{}", row.train_accuracy),
        format!("{}", row.model_sparsity),
    ];
    for l in quantized_layers {
        match row.centroids.iter().find(|(i, _, _)| i == l) {
            Some((_, w_n, w_p)) => {
                cols.push(format!("{w_n}"));
                cols.push(format!("{w_p}"));
            }
            None => {
                cols.push(String::new());
                cols.push(String::new());
            }
        }
    }
    cols.join(",")
}

pub fn train_demo(args: &TrainDemoArgs, seed: u64) -> Result<()> {
    let spec = builtin_mlp_spec();
    let quantized: Vec<usize> = spec
        .quantize
        .iter()
        .enumerate()
        .filter_map(|(i, &q)| q.then_some(i))
        .collect();
    let data = gen_two_moons(args.n, args.noise, seed)?;
    let base = TrainConfig {
        gamma: args.gamma,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        centroid_learning_rate: args.centroid_lr,
        reassign_every: args.reassign_every,
        seed,
    };

    match &args.sweep {
        Some(gammas) => {
            println!("{}", csv_header(&quantized, true));
            for &gamma in gammas {
                let config = TrainConfig { gamma, ..base.clone() };
                let (model, metrics) =
                    train_pretrained_ec2t(&spec, &data, args.pretrain, &config)?;
                let last = metrics.last().expect("at least one epoch");
                println!("{}", csv_row(format!("{gamma}"), last, &quantized));
                let _ = model;
            }
        }
        None => {
            let (model, metrics) = train_pretrained_ec2t(&spec, &data, args.pretrain, &base)?;
            println!("{}", csv_header(&quantized, false));
            for row in &metrics {
                println!("{}", csv_row(format!("{}", row.epoch), row, &quantized));
            }
            let (accuracy, sparsity) = evaluate(&model, &data);
            eprintln!("final accuracy {accuracy:.4}, sparsity {sparsity:.4}");
            if let Some(path) = &args.out {
                let file = export_trained_model(&model)?;
                file.write_file(path)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

/// Collect the quantized layers of a trained model into the container
/// format, storing each hidden affine bias (the batch-norm stand-in) per
/// effective output channel.
fn export_trained_model(model: &ec2t_core::train::DualModel) -> Result<ModelFile> {
    let mut file = ModelFile::default();
    for (i, layer) in model.layers.iter().enumerate() {
        let (Some(centroids), Some(assignments)) = (&layer.centroids, &layer.assignments) else {
            continue;
        };
        let dims = LayerDims::Fc {
            out_features: layer.out_features,
            in_features: layer.in_features,
        };
        let ternary = encode_ternary_layer(assignments, centroids, dims)?;
        let bn_bias = layer.affine.as_ref().map(|aff| {
            let per_channel = ternary.nonzeros_per_out_channel();
            aff.bias
                .iter()
                .zip(per_channel)
                .filter(|(_, z)| *z > 0)
                .map(|(b, _)| half::f16::from_f32(*b).to_bits())
                .collect()
        });
        file.layers.push(NamedLayer {
            name: format!("fc{i}"),
            layer: ternary,
            bn_bias,
        });
    }
    if file.layers.is_empty() {
        bail!("model has no quantized layers to export");
    }
    Ok(file)
}

fn dims_from_shape(shape: &[usize]) -> Result<LayerDims> {
    match shape {
        [m, n] => Ok(LayerDims::Fc {
            out_features: *m,
            in_features: *n,
        }),
        [m, n, k, k2] if k == k2 => Ok(LayerDims::Conv {
            out_channels: *m,
            in_channels: *n,
            kernel: *k,
        }),
        other => bail!("tensor shape {other:?} is neither M×N nor M×N×K×K"),
    }
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let weights = Tensor::read_file(&args.weights)
        .with_context(|| format!("reading {}", args.weights.display()))?;
    let dims = dims_from_shape(weights.shape())?;
    let centroids = init_centroids(&weights)?;
    let lambda_max = compute_lambda_max(&weights, &centroids);
    let lambda = args.gamma * lambda_max.value;
    let (assignment, _) =
        quantize_layer(&weights, &centroids, lambda, args.mode.to_mode(), args.t)?;
    let ternary = encode_ternary_layer(&assignment, &centroids, dims)?;
    let file = ModelFile {
        layers: vec![NamedLayer {
            name: args.name.clone(),
            layer: ternary,
            bn_bias: None,
        }],
    };
    file.write_file(&args.out)?;
    let out = json!({
        "written": args.out.display().to_string(),
        "layers": 1,
        "sparsity": assignment.sparsity(),
        "lambda": { "gamma": args.gamma, "lambda_max": lambda_max.value, "capped": lambda_max.capped },
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn layer_summary(named: &NamedLayer) -> serde_json::Value {
    let layer = &named.layer;
    let storage = ec2t_core::storage::count_storage_params(layer, named.bn_bias.is_some());
    json!({
        "name": named.name,
        "dims": layer.dims,
        "elements": layer.dims.total(),
        "nonzeros": layer.location.count_ones(),
        "sigma": layer.sigma(),
        "sigma_effective": layer.sigma_effective(),
        "effective_in": layer.eff_in,
        "effective_out": layer.eff_out,
        "centroids": { "w_n": layer.w_n(), "w_p": layer.w_p() },
        "batch_norm_biases": named.bn_bias.as_ref().map(|b| b.len()),
        "storage_params": storage,
    })
}

pub fn import(args: &ImportArgs) -> Result<()> {
    let file = ModelFile::read_file(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    let mut layers = Vec::new();
    let mut written = Vec::new();
    for (i, named) in file.layers.iter().enumerate() {
        layers.push(layer_summary(named));
        if let Some(prefix) = &args.out_prefix {
            let tensor = decode_ternary_layer(&named.layer)?;
            let path = format!("{prefix}{i}.ect-tensor");
            tensor.write_file(&path)?;
            written.push(path);
        }
    }
    let out = json!({
        "layers": layers,
        "decoded_files": written,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Build report entries from a stored model. Convolution layers are assumed
/// to run at `resolution × resolution` output; a stored batch-norm block
/// contributes a batch-norm entry right after its layer.
fn entries_from_file(file: &ModelFile, resolution: usize) -> Result<Vec<ReportEntry>> {
    let mut entries = Vec::new();
    for named in &file.layers {
        let spec = match named.layer.dims {
            LayerDims::Conv {
                out_channels,
                in_channels,
                kernel,
            } => LayerSpec::conv2d(in_channels, out_channels, kernel, resolution, resolution, true)?,
            LayerDims::Fc {
                out_features,
                in_features,
            } => LayerSpec::fully_connected(in_features, out_features, true)?,
        };
        let bn = named
            .bn_bias
            .as_ref()
            .map(|_| LayerSpec::batch_norm(spec.out_channels, spec.out_height, spec.out_width))
            .transpose()?;
        entries.push(ReportEntry {
            name: named.name.clone(),
            spec,
            ternary: Some(named.layer.clone()),
        });
        if let Some(bn_spec) = bn {
            entries.push(ReportEntry {
                name: format!("{}.bn", named.name),
                spec: bn_spec,
                ternary: None,
            });
        }
    }
    Ok(entries)
}

fn print_report_table(report: &ModelReport) {
    println!(
        "{:<14} {:<16} {:>12} {:>14} {:>14} {:>14} {:>9}",
        "layer", "kind", "params", "adds", "mults", "flops", "sparsity"
    );
    for row in &report.layers {
        println!(
            "{:<14} {:<16} {:>12.2} {:>14} {:>14} {:>14} {:>9.4}",
            row.name,
            format!("{:?}", row.kind),
            row.params,
            row.ops.adds,
            row.ops.mults,
            row.ops.flops,
            row.sparsity
        );
    }
    println!(
        "{:<14} {:<16} {:>12.2} {:>14} {:>14} {:>14} {:>9.4}",
        "TOTAL",
        "",
        report.total_params,
        report.total_ops.adds,
        report.total_ops.mults,
        report.total_ops.flops,
        report.sparsity
    );
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let entries = match (&args.model, args.arch) {
        (Some(path), None) => {
            let file = ModelFile::read_file(path)
                .with_context(|| format!("reading {}", path.display()))?;
            entries_from_file(&file, args.input_resolution)?
        }
        (None, Some(_)) => {
            let mut arch = micronet_descriptor(args.classes)?;
            if let Some(phi) = args.phi {
                let sol = solve_compound_scaling(phi, args.fix_r, 0.01)?;
                arch = scale_architecture(&arch, &sol);
            }
            ec2t_core::scaling::expand_descriptor(&arch)?
                .into_iter()
                .enumerate()
                .map(|(i, spec)| ReportEntry {
                    name: format!("layer{i}"),
                    spec,
                    ternary: None,
                })
                .collect()
        }
        _ => bail!("pass exactly one of --model or --arch"),
    };
    let report = model_report(&entries, args.tree_adder)?;
    if args.table {
        print_report_table(&report);
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

/// Round-trip and kernel checks for one stored layer.
fn verify_layer(named: &NamedLayer, rng: &mut Rng) -> Result<()> {
    let layer = &named.layer;
    let dense = decode_ternary_layer(layer)?;

    // Re-encoding the decoded tensor must reproduce the masks bit for bit.
    let labels = ec2t_core::storage::decode_labels(layer)?;
    let reencoded = encode_ternary_layer(
        &labels,
        &ec2t_core::quant::CentroidSet::new(layer.w_n().min(-1e-8), layer.w_p().max(1e-8))
            .map_err(|e| anyhow!("stored centroids invalid: {e}"))?,
        layer.dims,
    )?;
    if reencoded.location != layer.location || reencoded.sign != layer.sign {
        bail!("layer {}: re-encoded masks differ", named.name);
    }

    // Sparse kernel against the dense reference on seeded input.
    match layer.dims {
        LayerDims::Fc { in_features, .. } => {
            let input = Tensor::new(
                vec![in_features],
                (0..in_features).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
            )?;
            let want = fc_dense(&input, &dense)?;
            let got = ternary_fc(&input, layer)?;
            for (a, b) in got.data().iter().zip(want.data()) {
                if (a - b).abs() >= 1e-6 {
                    bail!("layer {}: kernel mismatch {a} vs {b}", named.name);
                }
            }
        }
        LayerDims::Conv {
            in_channels,
            kernel,
            ..
        } => {
            let side = kernel + 3;
            let input = Tensor::new(
                vec![in_channels, side, side],
                (0..in_channels * side * side)
                    .map(|_| rng.uniform(-1.0, 1.0) as f32)
                    .collect(),
            )?;
            let want = conv2d_dense(&input, &dense, 1, 1)?;
            let got = ternary_conv2d(&input, layer, 1, 1)?;
            for (a, b) in got.data().iter().zip(want.data()) {
                if (a - b).abs() >= 1e-6 {
                    bail!("layer {}: kernel mismatch {a} vs {b}", named.name);
                }
            }
        }
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs, seed: u64) -> Result<()> {
    let bytes = std::fs::read(&args.model)
        .with_context(|| format!("reading {}", args.model.display()))?;
    // Checksum and structural validation happen during parsing.
    let file = ModelFile::from_bytes(&bytes)?;
    // Byte round-trip must be the identity.
    if file.to_bytes()? != bytes {
        bail!("re-serialization does not reproduce the file bytes");
    }
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    for named in &file.layers {
        verify_layer(named, &mut rng)?;
        checks.push(json!({
            "layer": named.name,
            "round_trip": "ok",
            "kernel_equivalence": "ok",
        }));
    }
    let out = json!({
        "model": args.model.display().to_string(),
        "layers": file.layers.len(),
        "checksum": "ok",
        "checks": checks,
        "ok": true,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

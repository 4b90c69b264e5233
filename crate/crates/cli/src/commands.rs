use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use log::info;

use banet_core::analysis::{
    branch_importance, capture_traces, class_mean_weights, class_spread, write_class_means_csv,
    ForestConfig, TraceSet,
};
use banet_core::backbones::{checkpoint, cost};
use banet_core::io::{write_atomic, write_csv};
use banet_core::training::{
    evaluate, load_cifar10, train, write_synthetic_cifar, CifarLimits, Dataset, History,
    Normalization, TrainConfig, TrainOptions,
};
use banet_core::{build_network, ArchSpec, AttentionKind, BridgeSourceConfig, Float, Precision};

use crate::args::*;

pub enum CliError {
    /// Bad flags or values: exit 1 with usage.
    Usage(String),
    /// Anything failing after the arguments were accepted: exit 2.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Count(a) => count(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportAttention(a) => export_attention(a),
        Command::Importance(a) => importance(a),
        Command::Compare(a) => compare(a),
        Command::SynthData(a) => {
            write_synthetic_cifar(&a.out, a.records, a.seed)?;
            println!(
                "wrote {} records per file to {}",
                a.records,
                a.out.display()
            );
            Ok(())
        }
    }
}

fn resolve_arch(name: &str) -> CliResult<ArchSpec> {
    if let Some(a) = ArchSpec::builtin(name) {
        return Ok(a);
    }
    if Path::new(name).is_file() {
        return Ok(ArchSpec::load(Path::new(name))?);
    }
    Err(usage(format!(
        "unknown architecture `{name}` (built-ins: resnet20, resnet50, resnet101, or a JSON file)"
    )))
}

fn attention_kind(a: AttentionArg) -> Option<AttentionKind> {
    match a {
        AttentionArg::None => Some(AttentionKind::None),
        AttentionArg::Se => Some(AttentionKind::Se),
        AttentionArg::Ba => Some(AttentionKind::Ba),
        AttentionArg::All => None,
    }
}

fn parse_sources(s: &Option<String>) -> CliResult<Option<BridgeSourceConfig>> {
    s.as_deref()
        .map(|s| {
            s.parse()
                .map_err(|e| usage(format!("--bridge-sources: {e}")))
        })
        .transpose()
}

/// The declared architecture with attention and bridge sources applied.
fn model_arch(m: &ModelArgs, kind: AttentionKind) -> CliResult<ArchSpec> {
    let sources = parse_sources(&m.bridge_sources)?;
    if sources.is_some() && kind != AttentionKind::Ba {
        return Err(usage("--bridge-sources only applies to --attention ba"));
    }
    let arch = resolve_arch(&m.arch)?
        .with_attention(kind)
        .with_bridge_sources(sources);
    arch.expand().map_err(|e| usage(e.to_string()))?;
    Ok(arch)
}

fn single_kind(m: &ModelArgs) -> CliResult<AttentionKind> {
    attention_kind(m.attention).ok_or_else(|| usage("--attention all is only accepted by `count`"))
}

fn count(a: CountArgs) -> CliResult {
    let kinds = match attention_kind(a.model.attention) {
        Some(k) => vec![k],
        None => vec![AttentionKind::None, AttentionKind::Se, AttentionKind::Ba],
    };
    let shape = match &a.input_shape {
        Some(s) => Some(parse_shape(s)?),
        None => None,
    };
    if a.model.bridge_sources.is_some() && !kinds.contains(&AttentionKind::Ba) {
        return Err(usage("--bridge-sources only applies to --attention ba"));
    }
    let mut rows = Vec::new();
    for kind in kinds {
        let mut m = a.model.clone();
        if kind != AttentionKind::Ba {
            m.bridge_sources = None;
        }
        let mut arch = model_arch(&m, kind)?;
        if let Some(s) = shape {
            arch.input_shape = s;
        }
        let c = cost::arch_cost(&arch).map_err(|e| usage(e.to_string()))?;
        rows.push((arch.name, kind, c));
    }
    println!(
        "{:<12} {:<9} {:>16} {:>16}",
        "arch", "attention", "params", "flops"
    );
    for (name, kind, c) in rows {
        println!(
            "{:<12} {:<9} {:>16} {:>16}   {} / {}",
            name,
            kind.to_string(),
            c.params,
            c.flops,
            cost::format_millions(c.params),
            cost::format_giga(c.flops)
        );
    }
    Ok(())
}

fn parse_shape(s: &str) -> CliResult<[usize; 3]> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--input-shape `{s}` is not C,H,W")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(usage(format!("--input-shape `{s}` is not C,H,W"))),
    }
}

fn load_data(d: &DataArgs) -> CliResult<(Dataset, Dataset)> {
    let limits = CifarLimits {
        train: d.train_samples,
        test: d.test_samples,
    };
    let (train, test) = load_cifar10(&d.data, limits, &Normalization::default())
        .with_context(|| format!("loading CIFAR-10 from {}", d.data.display()))?;
    info!(
        "loaded {} training and {} test samples",
        train.len(),
        test.len()
    );
    Ok((train, test))
}

/// Test split only; the training batches are still size-checked.
fn load_test(d: &DataArgs) -> CliResult<Dataset> {
    let only_test = DataArgs {
        train_samples: Some(0),
        ..d.clone()
    };
    Ok(load_data(&only_test)?.1)
}

fn train_config(
    path: &Option<std::path::PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(())
}

struct RunResult {
    history: History,
    params: usize,
}

fn run_training<T: Float>(
    arch: &ArchSpec,
    kind: AttentionKind,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> CliResult<RunResult> {
    let mut net = build_network::<T>(arch, kind, cfg.seed)?;
    let history = train(&mut net, train_set, test_set, cfg, opts)?;
    Ok(RunResult {
        history,
        params: net.count_params(),
    })
}

fn train_any(
    arch: &ArchSpec,
    kind: AttentionKind,
    data: &(Dataset, Dataset),
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> CliResult<RunResult> {
    match cfg.precision {
        Precision::F32 => run_training::<f32>(arch, kind, &data.0, &data.1, cfg, opts),
        Precision::F64 => run_training::<f64>(arch, kind, &data.0, &data.1, cfg, opts),
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let kind = single_kind(&a.model)?;
    let arch = model_arch(&a.model, kind)?;
    let cfg = train_config(&a.config, a.seed, a.epochs)?;
    let data = load_data(&a.data)?;
    create_dir(&a.out)?;
    let opts = TrainOptions {
        augment: !a.no_augment,
        checkpoint: Some(a.out.join("checkpoint.bin")),
    };
    let r = train_any(&arch, kind, &data, &cfg, &opts)?;
    r.history.write_csv(&a.out.join("history.csv"))?;
    write_atomic(&a.out.join("model.json"), arch.to_json().as_bytes())?;
    let last = r
        .history
        .epochs
        .last()
        .ok_or_else(|| anyhow!("no epochs were run"))?;
    println!(
        "{} {}: initial loss {:.4}, final loss {:.4}, top1 {:.4}, top5 {:.4}",
        arch.name, kind, r.history.initial_loss, last.train_loss, last.test_top1, last.test_top5
    );
    Ok(())
}

fn restored<T: Float>(m: &ModelArgs, ckpt: &Path) -> CliResult<banet_core::Network<T>> {
    let kind = single_kind(m)?;
    let arch = model_arch(m, kind)?;
    let mut net = build_network::<T>(&arch, kind, 0)?;
    checkpoint::load_into(net.params_mut(), ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(net)
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let mut net = restored::<f32>(&a.model, &a.checkpoint)?;
    let test = load_test(&a.data)?;
    let (top1, top5) = evaluate(&mut net, &test)?;
    println!("top1 {top1:.4}  top5 {top5:.4}  ({} samples)", test.len());
    Ok(())
}

fn parse_classes(s: &str) -> CliResult<Vec<usize>> {
    let mut v = Vec::new();
    for p in s.split(',') {
        let c: usize = p
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad class label `{p}` in --classes")))?;
        if c >= 10 {
            return Err(usage(format!("class label {c} outside 0..10")));
        }
        v.push(c);
    }
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn capture(
    m: &ModelArgs,
    d: &DataArgs,
    ckpt: &Path,
    classes: Option<&[usize]>,
) -> CliResult<TraceSet> {
    let mut net = restored::<f64>(m, ckpt)?;
    let test = load_test(d)?;
    Ok(capture_traces(&mut net, &test, classes)?)
}

fn export_attention(a: ExportArgs) -> CliResult {
    let classes = match &a.classes {
        Some(s) => parse_classes(s)?,
        None => (0..10).collect(),
    };
    let traces = capture(&a.model, &a.data, &a.checkpoint, Some(&classes))?;
    let means = class_mean_weights(&traces, &classes)?;
    create_dir(&a.out)?;
    write_class_means_csv(&a.out.join("class_mean_weights.csv"), &means)?;
    if a.per_sample {
        write_per_sample(&a.out, &traces)?;
    }
    for (block, spread) in class_spread(&means) {
        println!(
            "block {:>2}: between-class weight variance {spread:.3e}",
            block + 1
        );
    }
    Ok(())
}

fn write_per_sample(out: &Path, traces: &TraceSet) -> CliResult {
    let mut weights = Vec::new();
    let mut squeezed = Vec::new();
    for t in &traces.blocks {
        let c = t.weights.shape()[1];
        for (i, label) in traces.labels.iter().enumerate() {
            for ch in 0..c {
                let w = t.weights.data()[i * c + ch];
                weights.push(vec![
                    i.to_string(),
                    label.to_string(),
                    (t.block + 1).to_string(),
                    ch.to_string(),
                    format!("{w:.17e}"),
                ]);
            }
            for (layer, s) in t.branch_layers.iter().zip(&t.squeezed) {
                let h = s.shape()[1];
                for u in 0..h {
                    let v = s.data()[i * h + u];
                    squeezed.push(vec![
                        i.to_string(),
                        (t.block + 1).to_string(),
                        format!("conv{layer}"),
                        u.to_string(),
                        format!("{v:.17e}"),
                    ]);
                }
            }
        }
    }
    write_csv(
        &out.join("sample_weights.csv"),
        &["sample", "label", "block", "channel", "weight"],
        weights,
    )?;
    write_csv(
        &out.join("sample_squeezed.csv"),
        &["sample", "block", "branch", "unit", "value"],
        squeezed,
    )?;
    Ok(())
}

fn importance(a: ImportanceArgs) -> CliResult {
    let cfg = ForestConfig {
        trees: a.trees,
        max_depth: a.max_depth,
        min_leaf: a.min_leaf,
        ..ForestConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let traces = capture(&a.model, &a.data, &a.checkpoint, None)?;
    let report = branch_importance(&traces, &cfg, a.seed)?;
    create_dir(&a.out)?;
    report.write_csv(&a.out.join("branch_importance.csv"))?;
    for b in &report.blocks {
        let shares: Vec<String> = b
            .layers
            .iter()
            .zip(&b.shares)
            .map(|(l, s)| format!("conv{l} {s:.3}"))
            .collect();
        let flag = if b.degenerate { "  (degenerate)" } else { "" };
        println!("block {:>2}: {}{flag}", b.block + 1, shares.join("  "));
    }
    Ok(())
}

/// `none`, `se`, `ba` or `ba:<sources>`.
fn parse_compare_entry(s: &str) -> CliResult<(AttentionKind, Option<BridgeSourceConfig>)> {
    let (kind, sources) = match s.split_once(':') {
        Some((k, src)) => (k, Some(src)),
        None => (s, None),
    };
    let kind: AttentionKind = kind
        .parse()
        .map_err(|e| usage(format!("--archs entry `{s}`: {e}")))?;
    match (kind, sources) {
        (AttentionKind::Ba, Some(src)) => {
            let src = src
                .parse()
                .map_err(|e| usage(format!("--archs entry `{s}`: {e}")))?;
            Ok((kind, Some(src)))
        }
        (_, Some(_)) => Err(usage(format!(
            "--archs entry `{s}`: only ba takes bridge sources"
        ))),
        (_, None) => Ok((kind, None)),
    }
}

fn compare(a: CompareArgs) -> CliResult {
    let names: Vec<&str> = a
        .archs
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.len() < 2 {
        return Err(usage(
            "compare needs at least two configurations in --archs",
        ));
    }
    let base = resolve_arch(&a.arch)?;
    let mut runs = Vec::new();
    for name in &names {
        let (kind, sources) = parse_compare_entry(name)?;
        let arch = base
            .clone()
            .with_attention(kind)
            .with_bridge_sources(sources);
        arch.expand()
            .map_err(|e| usage(format!("--archs entry `{name}`: {e}")))?;
        runs.push((name.to_string(), kind, arch));
    }
    let cfg = train_config(&a.config, a.seed, a.epochs)?;
    let data = load_data(&a.data)?;
    create_dir(&a.out)?;
    let opts = TrainOptions {
        augment: !a.no_augment,
        checkpoint: None,
    };
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    let mut reference: Option<Vec<String>> = None;
    for (i, (name, kind, arch)) in runs.iter().enumerate() {
        info!("configuration {name}");
        let r = train_any(arch, *kind, &data, &cfg, &opts)?;
        match &reference {
            None => reference = Some(r.history.batch_hashes.clone()),
            Some(h) if *h != r.history.batch_hashes => {
                return Err(anyhow!("configuration {name} saw a different data order").into());
            }
            Some(_) => {}
        }
        for (step, h) in r.history.batch_hashes.iter().enumerate() {
            hashes.push(vec![name.clone(), step.to_string(), h.clone()]);
        }
        r.history
            .write_csv(&a.out.join(format!("history_{i}.csv")))?;
        let last = r
            .history
            .epochs
            .last()
            .ok_or_else(|| anyhow!("no epochs were run"))?;
        rows.push(vec![
            name.clone(),
            format!("{:.6}", last.test_top1),
            format!("{:.6}", last.test_top5),
            format!("{:.6}", last.train_loss),
            r.params.to_string(),
        ]);
        println!(
            "{name:<12} top1 {:.4}  top5 {:.4}  loss {:.4}",
            last.test_top1, last.test_top5, last.train_loss
        );
    }
    write_csv(
        &a.out.join("compare.csv"),
        &["config", "top1", "top5", "final_loss", "params"],
        rows,
    )?;
    write_csv(
        &a.out.join("batch_hashes.csv"),
        &["config", "step", "hash"],
        hashes,
    )?;
    Ok(())
}

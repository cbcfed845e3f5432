use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use inn_core::data::{make_synthetic, Dataset, InputKind, SynthConfig, WindowConfig};
use inn_core::graph::{emit_graph, infer_shapes, parse_graph, LayerSpec, NetworkGraph, Rank};
use inn_core::inflation::{
    build_fusion, inflate_graph, verify_inflation, FusionSpec, FusionStrategy, InflationPolicy,
    VerifyMode,
};
use inn_core::tensor::{Exec, Tensor};
use inn_core::train::{
    evaluate, predict_cases, run_fold, stratified_kfold, write_history_csv, Checkpoint, Init,
    MetricsReport, ModelSpec, Stage, TrainConfig,
};
use inn_core::zoo::{random_init, BackboneConfig, Family};
use inn_core::WeightStore;
use serde_json::{json, Value};

use crate::{
    ArchArg, CliError, DescribeArgs, EvalArgs, FuseArgs, InferArgs, InflateArgs, InputArg, ModeArg,
    PolicyArg, ScaleArg, StrategyArg, SynthArgs, TrainArgs, VerifyArgs, WindowArgs, ZooArgs,
};

type Result<T> = std::result::Result<T, CliError>;

const NUM_CLASSES: usize = 3;

fn read_graph(path: &str) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_graph(&text).map_err(|e| match e {
        inn_core::GraphError::Parse { .. } => CliError::Json {
            path: path.to_string(),
            detail: e.to_string(),
        },
        other => other.into(),
    })
}

fn write_graph(g: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_graph(g)).map_err(|e| CliError::io(&path.display().to_string(), e))
}

fn write_json(v: &Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(v).expect("JSON values serialize") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(&path.display().to_string(), e))
}

fn print_config(command: &str, config: &Value) {
    eprintln!("inn {command} config: {config}");
}

fn strategy(s: StrategyArg) -> FusionStrategy {
    match s {
        StrategyArg::Early => FusionStrategy::Early,
        StrategyArg::Intermediate => FusionStrategy::Intermediate,
    }
}

fn input_kind(i: InputArg) -> InputKind {
    match i {
        InputArg::Roi => InputKind::Roi,
        InputArg::Whole => InputKind::Whole,
    }
}

fn fusion_spec(s: StrategyArg, modalities: &[String]) -> FusionSpec {
    let m: Vec<&str> = modalities.iter().map(String::as_str).collect();
    FusionSpec::new(strategy(s), &m)
}

/// Fusion layout implied by a graph's inputs.
fn fusion_of(g: &NetworkGraph) -> FusionSpec {
    let inputs = g.input_modalities();
    if inputs.len() > 1 {
        let m: Vec<&str> = inputs.iter().map(|(id, tag)| tag.unwrap_or(id)).collect();
        return FusionSpec::new(FusionStrategy::Intermediate, &m);
    }
    let tag = inputs.first().and_then(|(_, t)| *t).unwrap_or("T1");
    let m: Vec<&str> = tag.split('+').collect();
    FusionSpec::new(FusionStrategy::Early, &m)
}

fn window_config(w: &WindowArgs, fusion: FusionSpec) -> Result<WindowConfig> {
    let size = w.size.unwrap_or_else(|| input_kind(w.input).size());
    Ok(WindowConfig::new(w.k, size, fusion)?)
}

pub fn describe(a: DescribeArgs) -> Result<ExitCode> {
    let g = read_graph(&a.graph)?;
    print_config(
        "describe",
        &json!({"graph": a.graph, "size": a.size, "depth": a.depth, "batch": a.batch}),
    );
    let mut dims = HashMap::new();
    for id in &g.inputs {
        let Some(LayerSpec::Input { channels, .. }) = g.node(id).map(|n| &n.layer) else {
            continue;
        };
        let d = match g.rank {
            Rank::Two => vec![a.batch, *channels, a.size, a.size],
            Rank::Three => vec![a.batch, *channels, a.depth, a.size, a.size],
        };
        dims.insert(id.clone(), d);
    }
    let table = infer_shapes(&g, &dims)?;
    println!("graph {} ({}, {} classes)", g.name, g.rank.as_str(), g.num_classes);
    println!("{:<44} {:<14} {:<26} {:>12}", "node", "op", "output", "params");
    for n in &g.nodes {
        let shape = format!("{:?}", table[n.id.as_str()]);
        println!(
            "{:<44} {:<14} {:<26} {:>12}",
            n.id,
            n.layer.op_name(),
            shape,
            n.layer.trainable_params()
        );
    }
    println!("trainable parameters: {}", g.trainable_params());
    println!("total parameters: {}", g.total_params());
    Ok(ExitCode::SUCCESS)
}

pub fn inflate(a: InflateArgs) -> Result<ExitCode> {
    let policy = match a.policy {
        PolicyArg::Default => InflationPolicy::default(),
        PolicyArg::Depth1 => InflationPolicy::depth1(),
    };
    print_config(
        "inflate",
        &json!({"graph": a.graph, "weights": a.weights, "policy": policy}),
    );
    let g2 = read_graph(&a.graph)?;
    let w2 = WeightStore::load(&a.weights)?;
    let (g3, w3) = inflate_graph(&g2, &w2, &policy)?;
    write_graph(&g3, &a.out_graph)?;
    w3.save(&a.out_weights)?;
    println!(
        "inflated {}: {} -> {} trainable parameters",
        g2.name,
        g2.trainable_params(),
        g3.trainable_params()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn fuse(a: FuseArgs) -> Result<ExitCode> {
    let fusion = fusion_spec(a.strategy, &a.modalities);
    print_config("fuse", &json!({"graph": a.graph, "weights": a.weights, "fusion": fusion}));
    let g = read_graph(&a.graph)?;
    let w = WeightStore::load(&a.weights)?;
    let (gf, wf) = build_fusion(&g, &w, &fusion)?;
    write_graph(&gf, &a.out_graph)?;
    wf.save(&a.out_weights)?;
    println!(
        "fused {} ({}): {} -> {} trainable parameters",
        g.name,
        fusion.strategy.as_str(),
        g.trainable_params(),
        gf.trainable_params()
    );
    Ok(ExitCode::SUCCESS)
}

fn input_channels(g: &NetworkGraph) -> Result<usize> {
    g.inputs
        .first()
        .and_then(|id| g.node(id))
        .and_then(|n| match n.layer {
            LayerSpec::Input { channels, .. } => Some(channels),
            _ => None,
        })
        .ok_or_else(|| CliError::Usage(format!("graph {} has no input", g.name)))
}

pub fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let mode = match a.mode {
        ModeArg::Conservation => VerifyMode::Conservation,
        ModeArg::Depth1 => VerifyMode::Depth1,
        ModeArg::Replicate => VerifyMode::Replicate,
        ModeArg::ModalityCollapse => VerifyMode::ModalityCollapse,
    };
    print_config(
        "verify",
        &json!({"mode": mode, "reference": a.graph2d, "candidate": a.graph3d,
                "size": a.size, "depth": a.depth, "seed": a.seed}),
    );
    let (g2, w2) = (read_graph(&a.graph2d)?, WeightStore::load(&a.weights2d)?);
    let (g3, w3) = (read_graph(&a.graph3d)?, WeightStore::load(&a.weights3d)?);
    let c = input_channels(&g2)?;
    let s = a.size;
    let probe = match mode {
        VerifyMode::Conservation => None,
        VerifyMode::Replicate => Some(Tensor::random_uniform(&[1, c, s, s], -1.0, 1.0, a.seed)?),
        VerifyMode::Depth1 | VerifyMode::ModalityCollapse => {
            let d = a.depth.unwrap_or(5);
            Some(Tensor::random_uniform(&[1, c, d, s, s], -1.0, 1.0, a.seed)?)
        }
    };
    let depth = if mode == VerifyMode::Replicate { a.depth } else { None };
    let report = verify_inflation((&g2, &w2), (&g3, &w3), probe.as_ref(), mode, depth)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("serializes"));
    if let Some(p) = &a.report {
        write_json(&value, p)?;
    }
    eprintln!(
        "verify {}: {} (max error {:.3e}, tolerance {:.0e}, {} failing checks)",
        mode,
        if report.passed { "PASS" } else { "FAIL" },
        report.max_error,
        report.tolerance,
        report.failures().count()
    );
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        depth: a.depth,
        size: a.size,
        ..SynthConfig::new([a.per_class; 3], a.seed)
    };
    print_config("synth", &json!({"out": a.out, "synth": cfg}));
    let manifest = make_synthetic(&cfg, &a.out)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn backbone(
    arch: ArchArg,
    scale: ScaleArg,
    blocks: Option<&Vec<usize>>,
    classes: usize,
) -> BackboneConfig {
    let family = match arch {
        ArchArg::Inceptinn => Family::InceptionV3,
        ArchArg::Denseinn => Family::Densenet121,
    };
    let mut b = match scale {
        ScaleArg::Tiny => BackboneConfig::tiny(family, classes),
        ScaleArg::Full => BackboneConfig::full(family, classes),
    };
    if let Some(blocks) = blocks {
        b.block_repeat = Some(blocks.clone());
    }
    b
}

pub fn zoo(a: ZooArgs) -> Result<ExitCode> {
    let b = backbone(a.arch, a.scale, a.blocks.as_ref(), a.classes);
    print_config("zoo", &json!({"backbone": b, "seed": a.seed}));
    b.validate()?;
    let g = b.build()?;
    let w = random_init(&g, a.seed)?;
    write_graph(&g, &a.out_graph)?;
    w.save(&a.out_weights)?;
    println!("{}: {} trainable parameters", g.name, g.trainable_params());
    Ok(ExitCode::SUCCESS)
}

fn fold_file_json(ds: &Dataset, assignment: &[usize], folds: usize, seed: u64) -> Value {
    let map: serde_json::Map<String, Value> = ds
        .cases
        .iter()
        .zip(assignment)
        .map(|(c, &f)| (c.id.clone(), json!(f)))
        .collect();
    json!({"folds": folds, "seed": seed, "assignment": map})
}

fn read_fold_file(path: &str, ds: &Dataset) -> Result<Vec<usize>> {
    let bad = |detail: String| CliError::Json {
        path: path.to_string(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let map = v
        .get("assignment")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("missing \"assignment\" object".into()))?;
    ds.cases
        .iter()
        .map(|c| {
            map.get(&c.id)
                .and_then(Value::as_u64)
                .map(|f| f as usize)
                .ok_or_else(|| bad(format!("no fold for case {:?}", c.id)))
        })
        .collect()
}

pub fn train(a: TrainArgs, exec: Exec) -> Result<ExitCode> {
    let kind = input_kind(a.window.input);
    let window = window_config(&a.window, fusion_spec(a.strategy, &a.modalities))?;
    let spec = ModelSpec {
        backbone: backbone(a.arch, a.scale, a.blocks.as_ref(), NUM_CLASSES),
        policy: InflationPolicy::default(),
    };
    spec.backbone.validate()?;
    let mut cfg = TrainConfig::for_input(kind);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.folds = a.folds;
    cfg.max_epochs = a.epochs;
    cfg.adam.lr = a.lr;
    cfg.seed = a.seed;
    cfg.validate()?;
    if let Some(f) = a.fold {
        if f >= a.folds {
            return Err(CliError::Usage(format!("--fold {f} outside 0..{}", a.folds)));
        }
    }
    let init = match a.pretrain_2d_epochs {
        0 => Init::Scratch,
        epochs => Init::Pretrained2d { epochs },
    };
    let config = json!({
        "manifest": a.manifest, "input": kind, "window": window, "model": spec,
        "train": cfg, "init": init, "fold": a.fold, "seed": a.seed,
        "exec": format!("{exec:?}"),
    });
    print_config("train", &config);

    let out = PathBuf::from(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&a.out, e))?;
    write_json(&config, out.join("config.json"))?;
    if a.dry_run {
        return Ok(ExitCode::SUCCESS);
    }
    let ds = Dataset::load(&a.manifest, window.size)?;
    let assignment = stratified_kfold(&ds.labels(), cfg.folds, cfg.seed)?;
    write_json(&fold_file_json(&ds, &assignment, cfg.folds, cfg.seed), out.join("folds.json"))?;

    let folds: Vec<usize> = a.fold.map_or_else(|| (0..cfg.folds).collect(), |f| vec![f]);
    let mut per_fold = Vec::new();
    let mut fold_reports = BTreeMap::new();
    for fold in folds {
        let dir = out.join(format!("fold{fold}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir.display().to_string(), e))?;
        let ck_path = dir.join("checkpoint.innw");
        let graph_path = dir.join("graph.json");
        let resume = if a.resume && ck_path.exists() {
            let g = read_graph(&graph_path.display().to_string())?;
            let ck = Checkpoint::load(&ck_path)?;
            eprintln!("fold {fold}: resuming after epoch {}", ck.epochs_done());
            Some((g, ck))
        } else {
            let seed = cfg.seed.wrapping_add(fold as u64);
            write_graph(&spec.scratch_3d(&window, seed)?.0, &graph_path)?;
            None
        };
        let mut pretrain = Vec::new();
        let outcome = run_fold(
            &spec,
            &ds,
            &window,
            &cfg,
            init,
            &assignment,
            fold,
            exec,
            resume,
            |stage, r, ck| {
                let tag = match stage {
                    Stage::Pretrain2d => "2d",
                    Stage::Train3d => "3d",
                };
                eprintln!(
                    "fold {fold} {tag} epoch {}: train_loss {:.5} val_loss {:.5} lr {:.1e} train_acc {:.4}",
                    r.epoch, r.train_loss, r.val_loss, r.lr, r.train_acc
                );
                match stage {
                    Stage::Pretrain2d => {
                        pretrain.push(*r);
                        write_history_csv(&pretrain, dir.join("pretrain_history.csv"))
                    }
                    Stage::Train3d => {
                        ck.save(&ck_path)?;
                        write_history_csv(&ck.history, dir.join("history.csv"))
                    }
                }
            },
        )?;
        write_graph(&outcome.graph, &graph_path)?;
        outcome.checkpoint.best_weights().save(dir.join("weights.innw"))?;
        write_history_csv(&outcome.checkpoint.history, dir.join("history.csv"))?;
        let eval = serde_json::to_value(&outcome.evaluation).expect("serializes");
        write_json(&eval, dir.join("eval.json"))?;
        let m = outcome.evaluation.metrics;
        println!(
            "fold {fold}: accuracy {:.4} precision {:.4} recall {:.4} ({} epochs)",
            m.accuracy,
            m.precision,
            m.recall,
            outcome.checkpoint.epochs_done()
        );
        per_fold.push(m);
        fold_reports.insert(fold, outcome.checkpoint.epochs_done());
    }
    let report = MetricsReport::from_folds(per_fold)?;
    let mut value = serde_json::to_value(&report).expect("serializes");
    value["folds"] = json!(fold_reports.keys().collect::<Vec<_>>());
    write_json(&value, out.join("metrics.json"))?;
    println!(
        "mean accuracy {:.4} (sem {:.4}), precision {:.4} (sem {:.4}), recall {:.4} (sem {:.4})",
        report.mean.accuracy,
        report.sem.accuracy,
        report.mean.precision,
        report.sem.precision,
        report.mean.recall,
        report.sem.recall
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs, exec: Exec) -> Result<ExitCode> {
    let g = read_graph(&a.graph)?;
    let w = WeightStore::load(&a.weights)?;
    let window = window_config(&a.window, fusion_of(&g))?;
    print_config(
        "eval",
        &json!({"manifest": a.manifest, "graph": a.graph, "weights": a.weights,
                "fold_file": a.fold_file, "fold": a.fold, "window": window}),
    );
    let ds = Dataset::load(&a.manifest, window.size)?;
    let cases: Vec<usize> = match &a.fold_file {
        Some(p) => {
            let assignment = read_fold_file(p, &ds)?;
            (0..ds.len()).filter(|&i| assignment[i] == a.fold).collect()
        }
        None => (0..ds.len()).collect(),
    };
    if cases.is_empty() {
        return Err(CliError::Usage(format!("fold {} has no cases", a.fold)));
    }
    let batch = input_kind(a.window.input).default_batch();
    let ev = evaluate(&g, &w, &ds, &cases, &window, batch, exec)?;
    let report = MetricsReport::from_folds(vec![ev.metrics])?;
    let mut value = serde_json::to_value(&report).expect("serializes");
    value["confusion"] = serde_json::to_value(ev.confusion).expect("serializes");
    value["predictions"] = serde_json::to_value(&ev.predictions).expect("serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("serializes"));
    if let Some(p) = &a.out {
        write_json(&value, p)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn infer(a: InferArgs, exec: Exec) -> Result<ExitCode> {
    let g = read_graph(&a.graph)?;
    let w = WeightStore::load(&a.weights)?;
    let window = window_config(&a.window, fusion_of(&g))?;
    print_config(
        "infer",
        &json!({"manifest": a.manifest, "graph": a.graph, "weights": a.weights,
                "case": a.case, "window": window}),
    );
    let ds = Dataset::load(&a.manifest, window.size)?;
    let idx = ds
        .position(&a.case)
        .ok_or_else(|| CliError::Usage(format!("case {:?} not in the manifest", a.case)))?;
    let probs = predict_cases(&g, &w, &ds, &[idx], &window, 1, exec)?.remove(0);
    println!("{}", json!({"case": a.case, "probabilities": probs}));
    Ok(ExitCode::SUCCESS)
}

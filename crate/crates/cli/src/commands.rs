//! Subcommand implementations. Every run directory receives a `config.txt`
//! with the fully resolved settings so results can be traced back to their
//! inputs.

use std::fs;
use std::path::Path;

use anyhow::anyhow;

use freqd::data::{
    chronological_split, filter_min_interactions, ingest, load_split, persist_split, synthetic,
    SplitDataset, SyntheticConfig,
};
use freqd::distill::{
    project, DistillConfig, GraphSource, LossScope, Projector, TrainConfig,
};
use freqd::eval::{evaluate, EvalTarget};
use freqd::filter::GraphFilter;
use freqd::graph::{
    build_knn_graph, normalized_laplacian, random_er_graph, random_features, stack_features,
    GraphKind,
};
use freqd::models::{
    bipartite_propagation, load_checkpoint, save_checkpoint, Backbone, Checkpoint, EmbeddingModel,
};
use freqd::spectral::{
    eigendecompose, group_losses, per_frequency_losses, verify_theorem1, verify_theorem2,
    verify_theorem3, KnowledgeGroups, TheoremReport, DESK_SCALE_CAP,
};
use freqd::train::{
    distill_train, log_to_csv, train_plain, TrainOutcome,
};
use freqd::FeatureMatrix;

use crate::cli::{
    DistillArgs, EvaluateArgs, PrepareArgs, SpectrumArgs, SynthArgs, TrainArgs, VerifyArgs,
};
use crate::config::RunConfig;
use crate::CliError;

fn run_err(err: impl Into<anyhow::Error>) -> CliError {
    CliError::Run(err.into())
}

/// `identity` | `linear:ALPHA` | `quadratic:A,B`
fn parse_filter(spec: &str) -> Result<GraphFilter, CliError> {
    if spec == "identity" {
        return Ok(GraphFilter::identity());
    }
    if let Some(alpha) = spec.strip_prefix("linear:") {
        let alpha: f64 = alpha
            .parse()
            .map_err(|_| CliError::Usage(format!("bad linear filter spec `{spec}`")))?;
        return GraphFilter::linear(alpha).map_err(run_err);
    }
    if let Some(rest) = spec.strip_prefix("quadratic:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(CliError::Usage(format!(
                "bad quadratic filter spec `{spec}` (expected quadratic:A,B)"
            )));
        }
        let a: f64 = parts[0]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad quadratic coefficient `{}`", parts[0])))?;
        let b: f64 = parts[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad quadratic coefficient `{}`", parts[1])))?;
        return GraphFilter::quadratic(a, b).map_err(run_err);
    }
    Err(CliError::Usage(format!(
        "unknown filter `{spec}` (identity | linear:ALPHA | quadratic:A,B)"
    )))
}

/// `knn:K` | `bipartite`
fn parse_graph_source(spec: &str) -> Result<GraphSource, CliError> {
    if spec == "bipartite" {
        return Ok(GraphSource::Bipartite);
    }
    if let Some(k) = spec.strip_prefix("knn:") {
        let k: usize = k
            .parse()
            .map_err(|_| CliError::Usage(format!("bad graph spec `{spec}`")))?;
        if k == 0 {
            return Err(CliError::Usage("knn neighbor count must be >= 1".into()));
        }
        return Ok(GraphSource::TeacherKnn { k });
    }
    Err(CliError::Usage(format!(
        "unknown graph source `{spec}` (knn:K | bipartite)"
    )))
}

/// `bprmf` | `lightgcn:LAYERS`
fn parse_backbone_spec(spec: &str) -> Result<(u32, usize), CliError> {
    if spec == "bprmf" {
        return Ok((0, 0));
    }
    if let Some(layers) = spec.strip_prefix("lightgcn:") {
        let layers: usize = layers
            .parse()
            .map_err(|_| CliError::Usage(format!("bad backbone spec `{spec}`")))?;
        if layers == 0 {
            return Err(CliError::Usage("lightgcn needs at least 1 layer".into()));
        }
        return Ok((1, layers));
    }
    Err(CliError::Usage(format!(
        "unknown backbone `{spec}` (bprmf | lightgcn:LAYERS)"
    )))
}

fn parse_loss_scope(spec: &str) -> Result<LossScope, CliError> {
    match spec {
        "batch" => Ok(LossScope::Batch),
        "full" => Ok(LossScope::Full),
        other => Err(CliError::Usage(format!(
            "unknown loss scope `{other}` (batch | full)"
        ))),
    }
}

fn build_backbone(
    tag: u32,
    layers: usize,
    split: &SplitDataset,
) -> Result<Backbone, CliError> {
    match tag {
        0 => Ok(Backbone::Bprmf),
        1 => Ok(Backbone::LightGcn {
            layers,
            propagation: bipartite_propagation(&split.train).map_err(run_err)?,
        }),
        other => Err(CliError::Usage(format!("unknown backbone tag {other}"))),
    }
}

fn checkpoint_into_model(
    ckpt: Checkpoint,
    split: &SplitDataset,
) -> Result<EmbeddingModel, CliError> {
    if ckpt.n_users != split.n_users() || ckpt.n_items != split.n_items() {
        return Err(run_err(anyhow!(
            "checkpoint is for {}x{} but the split has {}x{}",
            ckpt.n_users,
            ckpt.n_items,
            split.n_users(),
            split.n_items()
        )));
    }
    let propagation = if ckpt.backbone_tag == 1 {
        Some(bipartite_propagation(&split.train).map_err(run_err)?)
    } else {
        None
    };
    ckpt.into_model(propagation).map_err(run_err)
}

fn resolve_train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        lr: cfg.resolve("lr", args.lr, defaults.lr)?,
        weight_decay: cfg.resolve("weight_decay", args.weight_decay, defaults.weight_decay)?,
        batch_size: cfg.resolve("batch_size", args.batch_size, defaults.batch_size)?,
        max_epochs: cfg.resolve("max_epochs", args.max_epochs, defaults.max_epochs)?,
        patience: cfg.resolve("patience", args.patience, defaults.patience)?,
        negatives: cfg.resolve("negatives", args.negatives, defaults.negatives)?,
    })
}

fn write_training_outputs(
    out_dir: &Path,
    outcome: &TrainOutcome,
    cfg: &RunConfig,
    command: &str,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(run_err)?;
    save_checkpoint(&outcome.model, &out_dir.join("model.ckpt")).map_err(run_err)?;
    fs::write(out_dir.join("log.csv"), log_to_csv(&outcome.log)).map_err(run_err)?;
    cfg.write(out_dir, command)?;
    Ok(())
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let threshold = cfg.resolve("min_interactions", args.min_interactions, 10usize)?;
    cfg.finish()?;

    let raw = ingest(&args.input).map_err(run_err)?;
    let filtered = filter_min_interactions(&raw, threshold).map_err(run_err)?;
    let split = chronological_split(&filtered, (0.8, 0.1, 0.1)).map_err(run_err)?;
    persist_split(&split, &args.out).map_err(run_err)?;

    let users = split.n_users();
    let items = split.n_items();
    let interactions =
        split.train.len() + split.validation.len() + split.test.len();
    let sparsity = 100.0 * (1.0 - interactions as f64 / (users * items) as f64);
    cfg.record("input", args.input.display());
    cfg.record("users", users);
    cfg.record("items", items);
    cfg.record("interactions", interactions);
    cfg.write(&args.out, "prepare")?;

    println!("users={users}");
    println!("items={items}");
    println!("interactions={interactions}");
    println!("sparsity={sparsity:.2}%");
    Ok(0)
}

pub fn cmd_train(args: &TrainArgs, role: &str) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let default_dim = if role == "teacher" { 64 } else { 20 };
    let dim = cfg.resolve("dim", args.dim, default_dim)?;
    let backbone_spec = cfg.resolve(
        "backbone",
        args.backbone.clone(),
        "bprmf".to_string(),
    )?;
    let seed = cfg.resolve("seed", args.seed, 42u64)?;
    let train_cfg = resolve_train(&mut cfg, args)?;
    cfg.finish()?;

    let split = load_split(&args.data).map_err(run_err)?;
    let (tag, layers) = parse_backbone_spec(&backbone_spec)?;
    let backbone = build_backbone(tag, layers, &split)?;
    let student = EmbeddingModel::init(split.n_users(), split.n_items(), dim, backbone, seed);
    let outcome = train_plain(student, &split, &train_cfg, seed).map_err(run_err)?;

    cfg.record("data", args.data.display());
    write_training_outputs(&args.out, &outcome, &cfg, &format!("train-{role}"))?;
    println!(
        "trained {role} d={dim}: best epoch {} val NDCG@20 {:.6} ({} epochs run)",
        outcome.best_epoch,
        outcome.best_val_ndcg,
        outcome.log.len()
    );
    Ok(0)
}

pub fn cmd_distill(args: &DistillArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.train.config.as_deref())?;
    let dim = cfg.resolve("dim", args.train.dim, 20usize)?;
    let backbone_spec = cfg.resolve(
        "backbone",
        args.train.backbone.clone(),
        "bprmf".to_string(),
    )?;
    let filter_spec = cfg.resolve("filter", args.filter.clone(), "linear:0.45".to_string())?;
    let beta = cfg.resolve("beta", args.beta, 0.1f64)?;
    let graph_spec = cfg.resolve("graph", args.graph.clone(), "knn:10".to_string())?;
    let scope_spec = cfg.resolve("loss_scope", args.loss_scope.clone(), "batch".to_string())?;
    let dropout = cfg.resolve("dropout", args.dropout, 0.1f64)?;
    let seed = cfg.resolve("seed", args.train.seed, 42u64)?;
    let train_cfg = resolve_train(&mut cfg, &args.train)?;
    cfg.finish()?;

    if !(0.0..1.0).contains(&dropout) {
        return Err(CliError::Usage("dropout must be in [0, 1)".into()));
    }
    if beta < 0.0 {
        return Err(CliError::Usage("beta must be nonnegative".into()));
    }

    let split = load_split(&args.train.data).map_err(run_err)?;
    let teacher_ckpt = load_checkpoint(&args.teacher).map_err(run_err)?;
    let teacher = checkpoint_into_model(teacher_ckpt, &split)?;

    let distill_cfg = DistillConfig {
        beta,
        filter: parse_filter(&filter_spec)?,
        graph_source: parse_graph_source(&graph_spec)?,
        dropout_rate: dropout,
        loss_scope: parse_loss_scope(&scope_spec)?,
        train: train_cfg,
    };
    let (tag, layers) = parse_backbone_spec(&backbone_spec)?;
    let backbone = build_backbone(tag, layers, &split)?;
    let student = EmbeddingModel::init(split.n_users(), split.n_items(), dim, backbone, seed);
    let outcome =
        distill_train(&teacher, student, &split, &distill_cfg, seed).map_err(run_err)?;

    cfg.record("data", args.train.data.display());
    cfg.record("teacher", args.teacher.display());
    write_training_outputs(&args.train.out, &outcome, &cfg, "distill")?;
    println!(
        "distilled student d={dim}: best epoch {} val NDCG@20 {:.6} ({} epochs run)",
        outcome.best_epoch,
        outcome.best_val_ndcg,
        outcome.log.len()
    );
    Ok(0)
}

struct WorstCase {
    report: Option<TheoremReport>,
}

impl WorstCase {
    fn new() -> Self {
        WorstCase { report: None }
    }

    fn update(&mut self, report: TheoremReport) {
        let worse = match &self.report {
            None => true,
            Some(current) => report.rel_err > current.rel_err,
        };
        if worse {
            self.report = Some(report);
        }
    }

    fn print(&self, name: &str) {
        match &self.report {
            Some(r) => {
                println!("{name}_lhs={}", r.lhs);
                println!("{name}_rhs={}", r.rhs);
                println!("{name}_rel_err={:e}", r.rel_err);
            }
            None => println!("{name}_rel_err=0"),
        }
    }

    fn rel_err(&self) -> f64 {
        self.report.map(|r| r.rel_err).unwrap_or(0.0)
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let n = cfg.resolve("n", args.n, 16usize)?;
    let trials = cfg.resolve("trials", args.trials, 50usize)?;
    let seed = cfg.resolve("seed", args.seed, 42u64)?;
    cfg.finish()?;

    if n > DESK_SCALE_CAP {
        return Err(run_err(anyhow!(
            "graph with {n} nodes exceeds the desk-scale eigendecomposition cap"
        )));
    }
    if trials == 0 {
        eprintln!("warning: trials=0, verification passes vacuously");
    }

    let filters = [
        GraphFilter::linear(0.1).map_err(run_err)?,
        GraphFilter::linear(0.3).map_err(run_err)?,
        GraphFilter::linear(0.5).map_err(run_err)?,
        GraphFilter::quadratic(0.2025, -0.9).map_err(run_err)?,
    ];
    let (d_s, d_t) = (4usize, 8usize);

    let mut worst1 = WorstCase::new();
    let mut worst2 = WorstCase::new();
    let mut worst3 = WorstCase::new();

    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let graph = random_er_graph(n, 0.3, trial_seed);
        let lap = normalized_laplacian(&graph).map_err(run_err)?;
        let dec = eigendecompose(&lap).map_err(run_err)?;

        let s = random_features(n, d_s, trial_seed ^ 0x5eed_0001);
        let t = random_features(n, d_t, trial_seed ^ 0x5eed_0002);
        let proj = Projector::init(d_s, d_t, trial_seed ^ 0x5eed_0003);
        let s_proj = project(&proj, &s).map_err(run_err)?;

        worst1.update(verify_theorem1(&s_proj, &t, &dec).map_err(run_err)?);
        for filter in &filters {
            worst2.update(verify_theorem2(&lap, filter, &s_proj, &t).map_err(run_err)?);
        }

        // the pairwise double sum is quadratic in n, so cap its instances
        let n3 = n.min(16);
        let graph3 = random_er_graph(n3, 0.3, trial_seed ^ 0x5eed_0004);
        let lap3 = normalized_laplacian(&graph3).map_err(run_err)?;
        let dec3 = eigendecompose(&lap3).map_err(run_err)?;
        let s3 = random_features(n3, d_s, trial_seed ^ 0x5eed_0005);
        let t3 = random_features(n3, d_t, trial_seed ^ 0x5eed_0006);
        worst3.update(verify_theorem3(&dec3, &s3, &t3).map_err(run_err)?);
    }

    worst1.print("theorem1");
    worst2.print("theorem2");
    worst3.print("theorem3");
    let pass = worst1.rel_err() <= 1e-9 && worst2.rel_err() <= 1e-9 && worst3.rel_err() <= 1e-8;
    println!("verify={}", if pass { "pass" } else { "fail" });
    Ok(if pass { 0 } else { 1 })
}

pub fn cmd_spectrum(args: &SpectrumArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let graph_spec = cfg.resolve("graph", args.graph.clone(), "knn:10".to_string())?;
    cfg.finish()?;

    let split = load_split(&args.data).map_err(run_err)?;
    let student = load_checkpoint(&args.student).map_err(run_err)?;
    let teacher = load_checkpoint(&args.teacher).map_err(run_err)?;
    for (name, ckpt) in [("student", &student), ("teacher", &teacher)] {
        if ckpt.n_users != split.n_users() || ckpt.n_items != split.n_items() {
            return Err(run_err(anyhow!(
                "{name} checkpoint does not match the split dimensions"
            )));
        }
    }

    let mut rows = Vec::new();
    match parse_graph_source(&graph_spec)? {
        GraphSource::TeacherKnn { k } => {
            for (label, s, t, kind) in [
                ("user", &student.user_emb, &teacher.user_emb, GraphKind::UserKnn),
                ("item", &student.item_emb, &teacher.item_emb, GraphKind::ItemKnn),
            ] {
                let graph = build_knn_graph(t, k, kind).map_err(run_err)?;
                rows.extend(spectrum_rows(label, s, t, &graph)?);
            }
        }
        GraphSource::Bipartite => {
            let graph =
                freqd::graph::build_bipartite_graph(&split.train).map_err(run_err)?;
            let s = stack_features(&student.user_emb, &student.item_emb);
            let t = stack_features(&teacher.user_emb, &teacher.item_emb);
            rows.extend(spectrum_rows("bipartite", &s, &t, &graph)?);
        }
    }

    let mut csv = String::from("graph,group,loss\n");
    for (label, group, loss) in &rows {
        csv.push_str(&format!("{label},{group},{loss}\n"));
    }
    fs::create_dir_all(&args.out).map_err(run_err)?;
    fs::write(args.out.join("spectrum.csv"), &csv).map_err(run_err)?;
    cfg.record("data", args.data.display());
    cfg.record("student", args.student.display());
    cfg.record("teacher", args.teacher.display());
    cfg.record("projector", "least-squares fit (no trained projector in checkpoints)");
    cfg.write(&args.out, "spectrum")?;
    print!("{csv}");
    Ok(0)
}

/// Per-group distillation losses with a least-squares projector.
fn spectrum_rows(
    label: &str,
    student: &FeatureMatrix,
    teacher: &FeatureMatrix,
    graph: &freqd::graph::SparseGraph,
) -> Result<Vec<(String, usize, f64)>, CliError> {
    let lap = normalized_laplacian(graph).map_err(run_err)?;
    let dec = eigendecompose(&lap).map_err(run_err)?;
    let proj = Projector::least_squares(student, teacher, 1e-9).map_err(run_err)?;
    let projected = project(&proj, student).map_err(run_err)?;
    let per_k = per_frequency_losses(&projected, teacher, &dec).map_err(run_err)?;
    let groups = KnowledgeGroups::new(dec.n());
    let by_group = group_losses(&per_k, &groups);
    Ok(by_group
        .iter()
        .enumerate()
        .map(|(g, &loss)| (label.to_string(), g + 1, loss))
        .collect())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let ns_spec = cfg.resolve("ns", args.ns.clone(), "10,20".to_string())?;
    let target_spec = cfg.resolve("target", args.target.clone(), "test".to_string())?;
    cfg.finish()?;

    let ns: Vec<usize> = ns_spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad N `{s}` in --ns")))
        })
        .collect::<Result<_, _>>()?;
    let target = match target_spec.as_str() {
        "test" => EvalTarget::Test,
        "val" | "validation" => EvalTarget::Validation,
        other => {
            return Err(CliError::Usage(format!(
                "unknown target `{other}` (test | validation)"
            )))
        }
    };

    let split = load_split(&args.data).map_err(run_err)?;
    let ckpt = load_checkpoint(&args.ckpt).map_err(run_err)?;
    let model = checkpoint_into_model(ckpt, &split)?;
    let table = evaluate(&model, &split, target, &ns);

    fs::create_dir_all(&args.out).map_err(run_err)?;
    fs::write(args.out.join("metrics.csv"), table.to_csv()).map_err(run_err)?;
    cfg.record("data", args.data.display());
    cfg.record("ckpt", args.ckpt.display());
    cfg.record(
        "exclusions",
        match target {
            EvalTarget::Test => "train+validation",
            EvalTarget::Validation => "train",
        },
    );
    cfg.write(&args.out, "evaluate")?;
    print!("{table}");
    Ok(0)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    let users = cfg.resolve("users", args.users, 120usize)?;
    let items = cfg.resolve("items", args.items, 240usize)?;
    let per_user = cfg.resolve("per_user", args.per_user, 30usize)?;
    let clusters = cfg.resolve("clusters", args.clusters, 12usize)?;
    let seed = cfg.resolve("seed", args.seed, 42u64)?;
    cfg.finish()?;

    let data = synthetic(
        &SyntheticConfig {
            n_users: users,
            n_items: items,
            per_user,
            clusters,
            temperature: 0.25,
        },
        seed,
    );
    let mut out = String::new();
    for it in &data.interactions {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            data.user_ids[it.user as usize], data.item_ids[it.item as usize], it.ts
        ));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(run_err)?;
        }
    }
    fs::write(&args.out, out).map_err(run_err)?;
    println!(
        "wrote {} interactions ({users} users x {items} items) to {}",
        data.len(),
        args.out.display()
    );
    Ok(0)
}

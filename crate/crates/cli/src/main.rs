//! `vmdnn` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure (including a failed gradient
//! check), 2 invalid configuration, 3 unusable output directory, 4 missing
//! prerequisite artifact, 5 numerical divergence.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use log::info;
use vmdnn::analysis::{
    occlusion_pca_correlation, occlusion_table, pca, pca_rows, record, success_table, write_pca_csv, Agent,
    EvalModel, ResultsTable,
};
use vmdnn::envtask::{OcclusionSchedule, Split, TrialSpec};
use vmdnn::experiment::{
    load_datasets, model_path, pretrain, pretrained_path, train_model, write_datasets, write_manifest, Condition,
    Datasets, ExperimentConfig,
};
use vmdnn::network::checkpoint::{load_checkpoint, save_checkpoint};
use vmdnn::network::{validate_config, Layer, Vmdnn, VmdnnConfig};
use vmdnn::training::{finite_difference_check, gradcheck_parameters, random_sample};
use vmdnn::VmdnnError;

const GRADCHECK_LEN: usize = 6;
const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_TOL: f64 = 1e-4;
const PCA_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Generate the training, evaluation, gestureless and clip datasets.
    GenData,
    /// Grasp and visual pre-training, one checkpoint per seed.
    Pretrain,
    /// End-to-end training of every condition and seed.
    Train,
    /// Success and confusion rates on every split.
    Eval,
    /// Success rates under visual occlusion from each onset.
    Occlude,
    /// PCA of recorded activations, intact and occluded.
    Analyze,
    /// Finite-difference check of the BPTT gradient.
    Gradcheck,
    /// Print the built-in desk configuration as JSON.
    DefaultConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Occlude => "occlude",
            Command::Analyze => "analyze",
            Command::Gradcheck => "gradcheck",
            Command::DefaultConfig => "default-config",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vmdnn", version, about = "Visuo-motor network experiment pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON). A run manifest is accepted too. `gradcheck`
    /// also takes a bare network config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation and gradient checks.
    #[arg(long)]
    workers: Option<usize>,
    /// Train from a fresh initialisation instead of the pre-trained checkpoint.
    #[arg(long)]
    from_scratch: bool,
    /// Evaluate the scripted teacher in place of the trained models.
    #[arg(long)]
    teacher_as_model: bool,
}

#[derive(Debug)]
enum Failure {
    Config(Vec<String>),
    OutputPath(PathBuf, String),
    Missing(PathBuf),
    Divergence { layer: String, step: usize },
    CheckFailed(f64),
    Other(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::OutputPath(..) => 3,
            Failure::Missing(_) => 4,
            Failure::Divergence { .. } => 5,
            Failure::CheckFailed(_) | Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(v) => {
                writeln!(f, "invalid configuration:")?;
                for line in v {
                    writeln!(f, "  - {line}")?;
                }
                Ok(())
            }
            Failure::OutputPath(p, why) => write!(f, "cannot use output directory {}: {why}", p.display()),
            Failure::Missing(p) => write!(f, "missing prerequisite: {}", p.display()),
            Failure::Divergence { layer, step } => {
                write!(f, "training diverged: non-finite values in layer {layer} at step {step}")
            }
            Failure::CheckFailed(e) => {
                write!(f, "gradient check failed: max relative error {e:.3e} >= {GRADCHECK_TOL:e}")
            }
            Failure::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<VmdnnError> for Failure {
    fn from(e: VmdnnError) -> Self {
        match e {
            VmdnnError::Config(msg) => Failure::Config(msg.split("; ").map(str::to_string).collect()),
            VmdnnError::MissingArtifact(p) => Failure::Missing(p),
            VmdnnError::Divergence { layer, step } => Failure::Divergence { layer, step },
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(format!("I/O error: {e}"))
    }
}

type CmdResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VMDNN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: &Cli) -> CmdResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Config(vec!["--workers must be at least 1".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(format!("cannot start worker pool: {e}")))?;
    }
    match cli.command {
        Command::DefaultConfig => {
            let text = serde_json::to_string_pretty(&ExperimentConfig::desk()).expect("config serialises");
            println!("{text}");
            Ok(())
        }
        Command::Gradcheck => cmd_gradcheck(cli),
        cmd => {
            let (cfg, out) = prepare(cli)?;
            match cmd {
                Command::GenData => cmd_gen_data(cli, &cfg, &out),
                Command::Pretrain => cmd_pretrain(cli, &cfg, &out),
                Command::Train => cmd_train(cli, &cfg, &out),
                Command::Eval => cmd_eval(cli, &cfg, &out),
                Command::Occlude => cmd_occlude(cli, &cfg, &out),
                Command::Analyze => cmd_analyze(cli, &cfg, &out),
                Command::Gradcheck | Command::DefaultConfig => unreachable!(),
            }
        }
    }
}

fn config_path(cli: &Cli) -> CmdResult<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Failure::Config(vec![format!("`{}` needs --config <path>", cli.command.name())]))
}

fn read_json(path: &Path) -> CmdResult<serde_json::Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(vec![format!("{}: {e}", path.display())]))
}

/// An experiment config, or the `config` member of a run manifest.
fn parse_experiment(mut value: serde_json::Value, path: &Path) -> CmdResult<ExperimentConfig> {
    if value.get("config_hash").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    serde_json::from_value(value).map_err(|e| Failure::Config(vec![format!("{}: {e}", path.display())]))
}

/// Loads and validates the config, applies the command-line overrides and
/// makes sure the output directory exists.
fn prepare(cli: &Cli) -> CmdResult<(ExperimentConfig, PathBuf)> {
    let path = config_path(cli)?;
    let mut cfg = parse_experiment(read_json(path)?, path)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    let out = match cli.out.clone().or_else(|| cfg.output_dir.clone()) {
        Some(o) => o,
        None => return Err(Failure::Config(vec!["no output directory: pass --out or set output_dir".into()])),
    };
    cfg.output_dir = Some(out.clone());
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Failure::Config(violations));
    }
    if out.exists() && !out.is_dir() {
        return Err(Failure::OutputPath(out, "exists and is not a directory".into()));
    }
    fs::create_dir_all(&out).map_err(|e| Failure::OutputPath(out.clone(), e.to_string()))?;
    let probe = out.join(".vmdnn-write-probe");
    fs::write(&probe, b"").map_err(|e| Failure::OutputPath(out.clone(), e.to_string()))?;
    let _ = fs::remove_file(&probe);
    Ok((cfg, out))
}

fn flags(cli: &Cli) -> Vec<String> {
    let mut f = Vec::new();
    if cli.from_scratch {
        f.push("--from-scratch".to_string());
    }
    if cli.teacher_as_model {
        f.push("--teacher-as-model".to_string());
    }
    f
}

fn manifest(cli: &Cli, cfg: &ExperimentConfig, out: &Path, artifacts: Vec<PathBuf>) -> CmdResult<()> {
    let path = write_manifest(out, cli.command.name(), cfg, flags(cli), artifacts)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn create_parent(path: &Path) -> CmdResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_gen_data(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let dir = write_datasets(cfg, out)?;
    let data = load_datasets(out)?;
    println!("datasets written to {}", dir.display());
    println!("  train: {} trials", data.train.len());
    let mut counts = [0usize; 4];
    for t in data.eval_trials(Split::Tr) {
        if let Some(g) = t.gesture {
            counts[g.index()] += 1;
        }
    }
    println!("  train gestures (left, right, tall, wide): {counts:?}");
    for (split, trials) in data.eval.iter().filter(|(s, _)| *s != Split::Tr) {
        println!("  {}: {} trials", split.name(), trials.len());
    }
    println!("  gestureless: {}, gesture clips: {}", data.gestureless.len(), data.clips.len());
    manifest(cli, cfg, out, vec![dir])
}

fn load_data(out: &Path) -> CmdResult<Datasets> {
    Ok(load_datasets(out)?)
}

fn cmd_pretrain(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    if !cfg.pretraining.enabled {
        println!("pre-training is disabled in the config; nothing to do");
        return manifest(cli, cfg, out, Vec::new());
    }
    let data = load_data(out)?;
    let mut artifacts = Vec::new();
    for &seed in &cfg.experiment.seeds {
        println!("pre-training seed {seed}");
        let result = pretrain(cfg, &data, seed)?;
        let path = pretrained_path(out, seed);
        create_parent(&path)?;
        save_checkpoint(&cfg.network, &result.params, &path)?;
        let stem = file_stem(&path);
        let grasp_csv = path.with_file_name(format!("{stem}_grasp_loss.csv"));
        result.grasp_curve.write_csv(&grasp_csv)?;
        if let Some(last) = result.grasp_curve.last() {
            println!("  grasp pre-training: final loss {last:.4}");
        }
        artifacts.push(path.clone());
        artifacts.push(grasp_csv);
        if let Some(v) = &result.visual {
            let visual_csv = path.with_file_name(format!("{stem}_visual_loss.csv"));
            v.curve.write_csv(&visual_csv)?;
            let head_json = path.with_file_name(format!("{stem}_classifier.json"));
            fs::write(&head_json, serde_json::to_vec_pretty(&v.head).expect("head serialises"))?;
            if let Some(last) = v.curve.last() {
                println!("  visual pre-training: final cross-entropy {last:.4}");
            }
            artifacts.push(visual_csv);
            artifacts.push(head_json);
        }
        println!("  checkpoint {}", path.display());
    }
    manifest(cli, cfg, out, artifacts)
}

fn cmd_train(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let data = load_data(out)?;
    let use_pretrained = cfg.pretraining.enabled && !cli.from_scratch;
    if use_pretrained {
        for &seed in &cfg.experiment.seeds {
            let p = pretrained_path(out, seed);
            if !p.exists() {
                return Err(Failure::Missing(p));
            }
        }
    }
    let mut artifacts = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let init = if use_pretrained {
            Some(load_checkpoint(&pretrained_path(out, seed))?.1)
        } else {
            None
        };
        for &condition in &cfg.experiment.conditions {
            println!("training {} seed {seed}", condition.name());
            let every = cfg.training.report_every;
            let (params, curve) = train_model(cfg, condition, seed, &data, init.clone(), &mut |e, _| {
                if every > 0 && (e.epoch == 1 || e.epoch % every == 0) {
                    println!("  epoch {:>5}  loss {:.5}  {:.1}s", e.epoch, e.mean_loss, e.wall_seconds);
                }
                Ok(())
            })?;
            let path = model_path(out, condition, seed);
            create_parent(&path)?;
            save_checkpoint(&condition.apply(&cfg.network), &params, &path)?;
            let loss_csv = path.with_file_name(format!("{}_loss.csv", file_stem(&path)));
            curve.write_csv(&loss_csv)?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("  loss {first:.4} -> {last:.4} (ratio {:.4})", last / first);
            }
            artifacts.push(path);
            artifacts.push(loss_csv);
        }
    }
    manifest(cli, cfg, out, artifacts)
}

/// Trained networks for every configured condition and seed.
fn load_models(cfg: &ExperimentConfig, out: &Path) -> CmdResult<Vec<(Condition, u64, Vmdnn)>> {
    let mut models = Vec::new();
    for &seed in &cfg.experiment.seeds {
        for &condition in &cfg.experiment.conditions {
            let path = model_path(out, condition, seed);
            if !path.exists() {
                return Err(Failure::Missing(path));
            }
            let (net_cfg, params) = load_checkpoint(&path)?;
            if net_cfg != condition.apply(&cfg.network) {
                return Err(Failure::Other(format!(
                    "{} was trained with a different network configuration",
                    path.display()
                )));
            }
            models.push((condition, seed, Vmdnn::new(net_cfg, params)?));
        }
    }
    Ok(models)
}

fn eval_models<'a>(cli: &Cli, cfg: &ExperimentConfig, models: &'a [(Condition, u64, Vmdnn)]) -> Vec<EvalModel<'a>> {
    if cli.teacher_as_model {
        cfg.experiment
            .seeds
            .iter()
            .flat_map(|&seed| {
                cfg.experiment.conditions.iter().map(move |c| EvalModel {
                    vision_mode: c.vision_mode,
                    pfc_mode: c.pfc_mode,
                    seed,
                    agent: Agent::Teacher,
                })
            })
            .collect()
    } else {
        models
            .iter()
            .map(|(c, seed, net)| EvalModel {
                vision_mode: c.vision_mode,
                pfc_mode: c.pfc_mode,
                seed: *seed,
                agent: Agent::Model(net),
            })
            .collect()
    }
}

fn results_path(cli: &Cli, out: &Path, name: &str) -> PathBuf {
    let suffix = if cli.teacher_as_model { "_teacher" } else { "" };
    out.join("results").join(format!("{name}{suffix}.csv"))
}

/// Mean success per condition and row label, in first-seen order.
fn print_summary(table: &ResultsTable, confusion: bool) {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in &table.rows {
        let k = (r.condition.clone(), r.split.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (cond, split) in keys {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.condition == cond && r.split == split).collect();
        let n = rows.len() as f64;
        let success = rows.iter().map(|r| r.success_rate()).sum::<f64>() / n;
        if confusion {
            let share = rows.iter().map(|r| r.confusion_share_of_failures()).sum::<f64>() / n;
            println!("  {cond:<12} {split:<8} success {:>6.1}%  confusion/failures {:>6.1}%", 100.0 * success, 100.0 * share);
        } else {
            println!("  {cond:<12} {split:<8} success {:>6.1}%", 100.0 * success);
        }
    }
}

fn cmd_eval(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let data = load_data(out)?;
    let models = if cli.teacher_as_model { Vec::new() } else { load_models(cfg, out)? };
    let table = success_table(&eval_models(cli, cfg, &models), &data.eval, &cfg.task)?;
    let path = results_path(cli, out, "success");
    create_parent(&path)?;
    table.write_csv(&path)?;
    println!("success rates (mean over seeds):");
    print_summary(&table, true);
    println!("results: {}", path.display());
    manifest(cli, cfg, out, vec![path])
}

fn tr_trials(data: &Datasets) -> CmdResult<&[TrialSpec]> {
    let trials = data.eval_trials(Split::Tr);
    if trials.is_empty() {
        return Err(Failure::Config(vec!["the TR split is empty".into()]));
    }
    Ok(trials)
}

fn cmd_occlude(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let data = load_data(out)?;
    let trials = tr_trials(&data)?;
    let models = if cli.teacher_as_model { Vec::new() } else { load_models(cfg, out)? };
    let onsets: Vec<Option<usize>> = std::iter::once(None)
        .chain(cfg.occlusion_onsets(&trials[0]).into_iter().map(Some))
        .collect();
    let table = occlusion_table(&eval_models(cli, cfg, &models), trials, &onsets, &cfg.task)?;
    let path = results_path(cli, out, "occlusion");
    create_parent(&path)?;
    table.write_csv(&path)?;
    println!("success under occlusion (mean over seeds):");
    print_summary(&table, false);
    println!("results: {}", path.display());
    manifest(cli, cfg, out, vec![path])
}

const ANALYZED_LAYERS: [Layer; 5] = [Layer::Vf, Layer::Vs, Layer::Pfc, Layer::Ms, Layer::Mf];

/// Records intact and occluded rollouts of the first `analysis_trials` TR
/// trials, fits one PCA per layer on both pooled, and writes the scores
/// plus explained variance and per-component occlusion correlations.
fn cmd_analyze(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> CmdResult<()> {
    let data = load_data(out)?;
    let all = tr_trials(&data)?;
    let trials = &all[..cfg.experiment.analysis_trials.clamp(1, all.len())];
    let onset = cfg
        .occlusion_onsets(&trials[0])
        .into_iter()
        .max()
        .ok_or_else(|| Failure::Config(vec!["no occlusion onsets configured".into()]))?;
    let models = load_models(cfg, out)?;
    let dir = out.join("analysis");
    fs::create_dir_all(&dir)?;
    let mut variance = csv::Writer::from_path(dir.join("explained_variance.csv")).map_err(csv_err)?;
    variance
        .write_record(["condition", "seed", "layer", "pc", "ratio"])
        .map_err(csv_err)?;
    let mut corr = csv::Writer::from_path(dir.join("occlusion_correlation.csv")).map_err(csv_err)?;
    corr.write_record(["condition", "seed", "layer", "onset", "pc", "r"])
        .map_err(csv_err)?;
    let mut artifacts = vec![dir.join("explained_variance.csv"), dir.join("occlusion_correlation.csv")];
    for (condition, seed, net) in &models {
        let stem = file_stem(&model_path(out, *condition, *seed));
        let intact = record(net, trials, &cfg.task, &OcclusionSchedule::none())?;
        let occluded = record(net, trials, &cfg.task, &OcclusionSchedule::at(onset))?;
        for layer in ANALYZED_LAYERS {
            let mut pooled = intact.observations(layer)?;
            pooled.extend(occluded.observations(layer)?);
            let k = PCA_COMPONENTS.min(pooled[0].len());
            let model = pca(&pooled, k)?;
            for (pc, ratio) in model.explained_ratio.iter().enumerate() {
                variance
                    .write_record([
                        condition.name(),
                        seed.to_string(),
                        layer.name().to_string(),
                        (pc + 1).to_string(),
                        format!("{ratio:.6}"),
                    ])
                    .map_err(csv_err)?;
            }
            for (tag, trace) in [("intact", &intact), ("occluded", &occluded)] {
                let path = dir.join(format!("{stem}_{}_{tag}.csv", layer.name().to_lowercase()));
                write_pca_csv(&pca_rows(trace, layer, &model)?, &path)?;
                artifacts.push(path);
            }
        }
        let layers = [Layer::Pfc, Layer::Ms, Layer::Mf];
        println!("{} seed {seed}: occlusion from step {onset}, post-onset PC correlation", condition.name());
        for c in occlusion_pca_correlation(net, trials, &cfg.task, onset, &layers, PCA_COMPONENTS)? {
            let rs: Vec<String> = c.r.iter().map(|r| format!("{r:.3}")).collect();
            println!("  {:<4} r = [{}]", c.layer.name(), rs.join(", "));
            for (pc, r) in c.r.iter().enumerate() {
                corr.write_record([
                    condition.name(),
                    seed.to_string(),
                    c.layer.name().to_string(),
                    onset.to_string(),
                    (pc + 1).to_string(),
                    format!("{r:.6}"),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    variance.flush()?;
    corr.flush()?;
    info!("wrote {} analysis files", artifacts.len());
    println!("analysis: {}", dir.display());
    manifest(cli, cfg, out, artifacts)
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Other(format!("CSV error: {e}"))
}

/// Networks to check: every configured condition of an experiment config,
/// or a bare network config as given.
fn gradcheck_networks(value: serde_json::Value, path: &Path) -> CmdResult<Vec<VmdnnConfig>> {
    if value.get("network").is_some() || value.get("config_hash").is_some() {
        let cfg = parse_experiment(value, path)?;
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Failure::Config(v));
        }
        return Ok(cfg.experiment.conditions.iter().map(|c| c.apply(&cfg.network)).collect());
    }
    let net: VmdnnConfig =
        serde_json::from_value(value).map_err(|e| Failure::Config(vec![format!("{}: {e}", path.display())]))?;
    validate_config(&net).map_err(Failure::Config)?;
    Ok(vec![net])
}

fn cmd_gradcheck(cli: &Cli) -> CmdResult<()> {
    let path = config_path(cli)?;
    let networks = gradcheck_networks(read_json(path)?, path)?;
    let seed = cli.seed.unwrap_or(1);
    let mut worst: f64 = 0.0;
    let mut report = Vec::new();
    for net_cfg in &networks {
        let params = gradcheck_parameters(net_cfg, seed)?;
        let sample = random_sample(net_cfg, GRADCHECK_LEN, seed + 1)?;
        let net = Vmdnn::new(net_cfg.clone(), params)?;
        let r = finite_difference_check(&net, &sample, GRADCHECK_EPS, seed)?;
        println!(
            "{}: {} parameters checked, max relative error {:.3e}",
            net_cfg.condition_name(),
            r.checked,
            r.max_rel_error
        );
        for (block, e) in &r.per_block {
            info!("  {:<10} {e:.3e}", block.name());
        }
        worst = worst.max(r.max_rel_error);
        report.push(serde_json::json!({
            "condition": net_cfg.condition_name(),
            "checked": r.checked,
            "max_rel_error": r.max_rel_error,
            "worst_index": r.worst_index,
            "worst_fd": r.worst_fd,
            "worst_bp": r.worst_bp,
        }));
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:e}, eps {GRADCHECK_EPS:e})");
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(|e| Failure::OutputPath(out.clone(), e.to_string()))?;
        let doc = serde_json::json!({
            "command": "gradcheck",
            "config": path,
            "seed": seed,
            "eps": GRADCHECK_EPS,
            "sequence_length": GRADCHECK_LEN,
            "version": env!("CARGO_PKG_VERSION"),
            "results": report,
            "max_rel_error": worst,
        });
        let p = out.join("gradcheck.json");
        fs::write(&p, serde_json::to_vec_pretty(&doc).expect("report serialises"))?;
        println!("report: {}", p.display());
    }
    if worst < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure::CheckFailed(worst))
    }
}

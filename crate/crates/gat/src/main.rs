use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use gat::attack::{pgd_on_surface, AttackConfig, AttackSurface, NormP, TaskSelector};
use gat::augment::PermutationPool;
use gat::data::{generate_synthetic, load_corpus, save_corpus, write_manifest};
use gat::error::{GatError, Result};
use gat::experiment::{default_out_dir, run_experiment, ExperimentConfig, PresetName};
use gat::model::{
    build_model, load_checkpoint, save_checkpoint, target_task_spec, EncoderSpec, LossFamily, TaskKind,
    TaskSpec,
};
use gat::train::{
    evaluate_model, train_gat, train_madry, train_standard, TrainConfig, TrainData, Weighting,
};
use gat::data::SplitTag;
use gat::augment::Preprocessor;
use gat::metrics::mcnemar_test;

#[derive(Parser)]
#[command(name = "gat", about = "Guided adversarial training laboratory", version)]
struct Cli {
    /// Key=value config file; command-line flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus and its manifest.
    GenerateData(GenerateArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Attack a checkpoint and write per-sample losses to CSV.
    Attack(AttackArgs),
    /// Evaluate a checkpoint (clean and robust) on the test split.
    Eval(EvalArgs),
    /// Run a full experiment preset.
    Experiment(ExperimentArgs),
    /// Re-render the markdown report for a finished experiment directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// standard | madry | gat
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated auxiliary tasks: macro, rotation, jigsaw.
    #[arg(long)]
    aux: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// equal | mgda
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    no_regularizer: bool,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    /// linf | l2
    #[arg(long)]
    norm: Option<String>,
    /// main-only | all-tasks | aux-only
    #[arg(long)]
    selector: Option<String>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    corpus_n: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<u32>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

/// Key=value file entries; '#' starts a comment line.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| GatError::Config(format!("config line {}: expected key=value", i + 1)))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| GatError::Config(format!("config key '{key}': cannot parse '{raw}'"))),
        }
    }

    fn resolve<T: FromStr>(&self, cli: Option<T>, key: &str, default: T) -> Result<T> {
        match cli {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    fn resolve_opt<T: FromStr>(&self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

fn env_seed(fallback: u64) -> Result<u64> {
    match std::env::var("GAT_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| GatError::Config(format!("GAT_SEED: cannot parse '{raw}'"))),
        Err(_) => Ok(fallback),
    }
}

fn parse_norm(s: &str) -> Result<NormP> {
    match s {
        "linf" => Ok(NormP::Linf),
        "l2" => Ok(NormP::L2),
        other => Err(GatError::Config(format!("unknown norm '{other}'"))),
    }
}

fn parse_selector(s: &str) -> Result<TaskSelector> {
    match s {
        "main-only" => Ok(TaskSelector::MainOnly),
        "all-tasks" => Ok(TaskSelector::AllTasks),
        "aux-only" => Ok(TaskSelector::AuxiliaryOnly),
        other => Err(GatError::Config(format!("unknown selector '{other}'"))),
    }
}

fn resolve_attack(flags: &AttackFlags, file: &FileConfig) -> Result<AttackConfig> {
    let base = AttackConfig::pgd10(TaskSelector::MainOnly);
    let norm = match file.resolve_opt(flags.norm.clone(), "norm")? {
        Some(s) => parse_norm(&s)?,
        None => base.norm,
    };
    let selector = match file.resolve_opt(flags.selector.clone(), "selector")? {
        Some(s) => parse_selector(&s)?,
        None => base.selector,
    };
    Ok(AttackConfig {
        norm,
        epsilon: file.resolve(flags.eps, "eps", base.epsilon)?,
        step_size: file.resolve(flags.step_size, "step_size", base.step_size)?,
        steps: file.resolve(flags.steps, "steps", base.steps)?,
        random_start: true,
        selector,
    })
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| GatError::Config(format!("cannot parse {what} entry '{s}'")))
        })
        .collect()
}

fn jigsaw_grid(size: usize) -> usize {
    if size % 4 == 0 && size >= 16 {
        4
    } else {
        2
    }
}

fn load_data(path: &Path, seed: u64) -> Result<(gat::data::LabeledCorpus, PermutationPool)> {
    let corpus = load_corpus(path)?;
    let pool = PermutationPool::build(jigsaw_grid(corpus.height), 24, seed ^ 0xA5)?;
    Ok((corpus, pool))
}

fn cmd_generate(args: &GenerateArgs, file: &FileConfig) -> Result<()> {
    let out = file
        .resolve_opt(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("corpus.gatc1"));
    let n = file.resolve(args.n, "n", 2000)?;
    let size = file.resolve(args.size, "size", 16)?;
    let classes = file.resolve(args.classes, "classes", 8)?;
    let seed = env_seed(file.resolve(args.seed, "seed", 7)?)?;
    let corpus = generate_synthetic(n, size, classes, seed)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let crc = save_corpus(&corpus, &out)?;
    let manifest_path = out.with_extension("manifest.json");
    let file_name = out
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus.gatc1".into());
    write_manifest(&corpus, &file_name, seed, crc, &manifest_path)?;
    println!(
        "wrote {} ({} samples, {}x{} px, {} classes, crc32 {:08x})",
        out.display(),
        n,
        size,
        size,
        classes,
        crc
    );
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn aux_specs(raw: &str, corpus: &gat::data::LabeledCorpus, pool: &PermutationPool) -> Result<Vec<TaskSpec>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim() {
            "macro" => Ok(TaskSpec {
                name: "macro".into(),
                kind: TaskKind::DomainKnowledge,
                loss: LossFamily::MulticlassCe,
                arity: corpus.macro_classes(),
                preprocessor: None,
            }),
            "rotation" => Ok(TaskSpec {
                name: "rotation".into(),
                kind: TaskKind::SelfSupervised,
                loss: LossFamily::MulticlassCe,
                arity: 4,
                preprocessor: Some(Preprocessor::Rotation),
            }),
            "jigsaw" => Ok(TaskSpec {
                name: "jigsaw".into(),
                kind: TaskKind::SelfSupervised,
                loss: LossFamily::MulticlassCe,
                arity: pool.len(),
                preprocessor: Some(Preprocessor::Jigsaw),
            }),
            other => Err(GatError::Config(format!("unknown auxiliary task '{other}'"))),
        })
        .collect()
}

fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let data_path = file
        .resolve_opt(args.data.clone(), "data")?
        .ok_or_else(|| GatError::Config("train: --data is required".into()))?;
    let out = file
        .resolve_opt(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("model.json"));
    let mode = file.resolve(args.mode.clone(), "mode", "madry".to_string())?;
    let seed = env_seed(file.resolve(args.seed, "seed", 1)?)?;
    let (corpus, pool) = load_data(&data_path, seed)?;

    let aux_raw = file.resolve(args.aux.clone(), "aux", String::new())?;
    let mut specs = vec![target_task_spec("fine", corpus.fine_classes())];
    specs.extend(aux_specs(&aux_raw, &corpus, &pool)?);
    if mode == "gat" && specs.len() < 2 {
        return Err(GatError::Config("gat mode needs at least one auxiliary task (--aux)".into()));
    }
    let hidden_raw = file.resolve(args.hidden.clone(), "hidden", "128,64".to_string())?;
    let mut widths = vec![corpus.sample_dim()];
    widths.extend(parse_list::<usize>(&hidden_raw, "hidden width")?);
    let model = build_model(EncoderSpec::new(widths)?, specs, seed.wrapping_mul(0x9E37).wrapping_add(11))?;

    let mut tc = TrainConfig::defaults(seed);
    tc.epochs = file.resolve(args.epochs, "epochs", tc.epochs)?;
    tc.horizon = tc.epochs;
    tc.batch_size = file.resolve(args.batch_size, "batch_size", tc.batch_size)?;
    tc.lr0 = file.resolve(args.lr0, "lr0", tc.lr0)?;
    tc.patience = file.resolve(args.patience, "patience", tc.patience)?;
    tc.attack = resolve_attack(&args.attack, file)?;
    tc.regularizer = !args.no_regularizer;
    if let Some(w) = file.resolve_opt(args.weighting.clone(), "weighting")? {
        tc.weighting = match w.as_str() {
            "equal" => Weighting::Equal,
            "mgda" => Weighting::Mgda,
            other => return Err(GatError::Config(format!("unknown weighting '{other}'"))),
        };
    }

    let train = TrainData::from_corpus(&corpus, &model, SplitTag::Train, &pool)?;
    let val = TrainData::from_corpus(&corpus, &model, SplitTag::Val, &pool)?;
    let result = match mode.as_str() {
        "standard" => train_standard(&model, &train, &val, &tc)?,
        "madry" => train_madry(&model, &train, &val, &tc)?,
        "gat" => train_gat(&model, &train, &val, &tc)?,
        other => return Err(GatError::Config(format!("unknown mode '{other}'"))),
    };
    save_checkpoint(&result.model, &out)?;
    println!(
        "trained {} for {} epochs (best epoch {}, val robust {:.4}); checkpoint {}",
        mode,
        result.records.len(),
        result.best_epoch,
        result.best_val_robust,
        out.display()
    );
    for r in &result.records {
        let alpha = r
            .alpha_mean
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join(",");
        println!(
            "epoch {:>3}  lr {:.5}  clean {:.4}  robust {:.4}  alpha [{alpha}]",
            r.epoch, r.lr, r.val_clean_acc, r.val_robust_acc
        );
    }
    Ok(())
}

fn cmd_attack(args: &AttackArgs, file: &FileConfig) -> Result<()> {
    let data_path = file
        .resolve_opt(args.data.clone(), "data")?
        .ok_or_else(|| GatError::Config("attack: --data is required".into()))?;
    let model_path = file
        .resolve_opt(args.model.clone(), "model")?
        .ok_or_else(|| GatError::Config("attack: --model is required".into()))?;
    let out = file
        .resolve_opt(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("attacks.csv"));
    let seed = env_seed(file.resolve(args.seed, "seed", 1)?)?;
    let attack = resolve_attack(&args.attack, file)?;
    let model = load_checkpoint(&model_path)?;
    let (corpus, pool) = load_data(&data_path, seed)?;
    let data = TrainData::from_corpus(&corpus, &model, SplitTag::Test, &pool)?;

    let labels: Vec<Vec<f64>> = data
        .labels
        .iter()
        .map(|l| {
            l.clone()
                .ok_or_else(|| GatError::Config("attack verb needs label-backed tasks only".into()))
        })
        .collect::<Result<_>>()?;
    let mut surface = AttackSurface::from_model(&model, attack.selector, data.n, &labels, None)?;
    let before = surface.selected_losses_at(&data.x)?;
    let pb = pgd_on_surface(&mut surface, &data.x, &attack, seed ^ 0x9D)?;
    let after = surface.selected_losses_at(&pb.adversarial)?;

    let mut csv = String::from("sample,loss_before,loss_after,delta_linf,delta_l2\n");
    for i in 0..data.n {
        let d = &pb.delta[i * data.dim..(i + 1) * data.dim];
        let linf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let l2 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        csv.push_str(&format!("{i},{},{},{linf},{l2}\n", before[i], after[i]));
    }
    fs::write(&out, &csv)?;
    let mean_gain = (0..data.n).map(|i| after[i] - before[i]).sum::<f64>() / data.n as f64;
    println!("attacked {} samples; mean loss gain {:.6}; wrote {}", data.n, mean_gain, out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig) -> Result<()> {
    let data_path = file
        .resolve_opt(args.data.clone(), "data")?
        .ok_or_else(|| GatError::Config("eval: --data is required".into()))?;
    let model_path = file
        .resolve_opt(args.model.clone(), "model")?
        .ok_or_else(|| GatError::Config("eval: --model is required".into()))?;
    let seed = env_seed(file.resolve(args.seed, "seed", 1)?)?;
    let attack = resolve_attack(&args.attack, file)?;
    let model = load_checkpoint(&model_path)?;
    let (corpus, pool) = load_data(&data_path, seed)?;
    let data = TrainData::from_corpus(&corpus, &model, SplitTag::Test, &pool)?;
    let report = evaluate_model(&model, &data, &attack, seed ^ 0xEA11)?;
    println!(
        "clean accuracy  {:.4}\nrobust accuracy {:.4}\nvulnerability   {:.6}",
        report.clean_accuracy, report.robust_accuracy, report.vulnerability
    );
    if let (Some(ca), Some(ra)) = (report.clean_auc, report.robust_auc) {
        println!("clean AUC       {ca:.4}\nrobust AUC      {ra:.4}");
    }
    if let Some(out) = file.resolve_opt(args.out.clone(), "out")? {
        fs::write(&out, serde_json::to_string_pretty(&report)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs, file: &FileConfig) -> Result<()> {
    let preset_raw = file
        .resolve_opt(args.preset.clone(), "preset")?
        .ok_or_else(|| GatError::Config("experiment: --preset is required".into()))?;
    let preset: PresetName = preset_raw.parse()?;
    let mut cfg = ExperimentConfig::for_preset(preset);
    if let Some(raw) = file.resolve_opt(args.seeds.clone(), "seeds")? {
        cfg.seeds = parse_list(&raw, "seed")?;
    }
    cfg.corpus_n = file.resolve(args.corpus_n, "corpus_n", cfg.corpus_n)?;
    cfg.image_size = file.resolve(args.size, "size", cfg.image_size)?;
    cfg.fine_classes = file.resolve(args.classes, "classes", cfg.fine_classes)?;
    cfg.data_seed = env_seed(file.resolve(args.data_seed, "data_seed", cfg.data_seed)?)?;
    cfg.epochs = file.resolve(args.epochs, "epochs", cfg.epochs)?;
    cfg.batch_size = file.resolve(args.batch_size, "batch_size", cfg.batch_size)?;
    cfg.lr0 = file.resolve(args.lr0, "lr0", cfg.lr0)?;
    cfg.eps = file.resolve(args.eps, "eps", cfg.eps)?;
    let out_dir = match file.resolve_opt(args.out_dir.clone(), "out_dir")? {
        Some(dir) => dir,
        None => default_out_dir(Path::new("."), preset),
    };
    let manifest = run_experiment(&cfg, &out_dir)?;
    println!("preset {} finished: {} runs in {:.1}s", manifest.preset, manifest.rows, manifest.wall_clock_secs);
    for (k, v) in &manifest.final_metrics {
        println!("  {k} = {v:.4}");
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs, file: &FileConfig) -> Result<()> {
    let dir = file
        .resolve_opt(args.run_dir.clone(), "run_dir")?
        .ok_or_else(|| GatError::Config("report: --run-dir is required".into()))?;
    let report_path = dir.join("report.md");
    if report_path.exists() {
        print!("{}", fs::read_to_string(&report_path)?);
        return Ok(());
    }
    // no rendered report yet: summarize the journal directly
    let journal = fs::read_to_string(dir.join("journal.jsonl"))?;
    let records: Vec<gat::experiment::RunRecord> = journal
        .lines()
        .map(|l| serde_json::from_str(l).map_err(GatError::from))
        .collect::<Result<_>>()?;
    if records.is_empty() {
        return Err(GatError::Config("journal is empty".into()));
    }
    println!("# partial run summary ({} completed runs)\n", records.len());
    println!("| variant | seed | clean | robust |");
    println!("|---|---|---|---|");
    for r in &records {
        println!("| {} | {} | {:.4} | {:.4} |", r.variant, r.seed, r.clean_acc, r.robust_acc);
    }
    if let Some(base) = records.iter().find(|r| r.variant == "madry") {
        for r in records.iter().filter(|r| r.variant != "madry" && r.seed == base.seed) {
            if r.robust_correct.len() != base.robust_correct.len() {
                continue;
            }
            let b = base.robust_correct.iter().zip(&r.robust_correct).filter(|(&a, &v)| a && !v).count() as u64;
            let c = base.robust_correct.iter().zip(&r.robust_correct).filter(|(&a, &v)| !a && v).count() as u64;
            if let Ok((chi2, reject)) = mcnemar_test(b, c) {
                println!("\nMcNemar {} vs madry: b={b} c={c} chi2={chi2:.4} significant={reject}", r.variant);
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenerateData(a) => cmd_generate(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Attack(a) => cmd_attack(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Experiment(a) => cmd_experiment(a, &file),
        Command::Report(a) => cmd_report(a, &file),
    }
}

fn exit_code(err: &GatError) -> u8 {
    match err {
        GatError::Divergence(_) | GatError::NonFinite(_) | GatError::Degenerate(_) => 3,
        GatError::Io(_) | GatError::Json(_) | GatError::Checksum { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

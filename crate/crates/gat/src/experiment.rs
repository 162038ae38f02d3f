//! Experiment presets and artifact emission: each preset trains a set of
//! variants over seeds, writes per-run and aggregate CSV tables, a
//! markdown report, and a manifest with file checksums.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_on_surface, AttackConfig, AttackSurface, NormP, TaskSelector};
use crate::augment::{PermutationPool, Preprocessor};
use crate::data::{generate_synthetic, save_corpus, split_subset, write_manifest, LabeledCorpus, SplitTag};
use crate::error::{GatError, Result};
use crate::metrics::{cosine_angle, curvature_measure, magnitude_similarity, mcnemar_test, pearson_r};
use crate::model::{build_graph, build_model, EncoderSpec, LossFamily, MultiTaskModel, TaskKind, TaskSpec};
use crate::train::{
    evaluate_model, target_correctness, train_gat, train_madry, train_standard, TrainConfig, TrainData,
    TrainResult, Weighting,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetName {
    GatVsAt,
    WeightAblation,
    TaskCount,
    AttackTarget,
    Transfer,
    Correlation,
    ScarceData,
}

impl PresetName {
    pub const ALL: [PresetName; 7] = [
        PresetName::GatVsAt,
        PresetName::WeightAblation,
        PresetName::TaskCount,
        PresetName::AttackTarget,
        PresetName::Transfer,
        PresetName::Correlation,
        PresetName::ScarceData,
    ];
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PresetName::GatVsAt => "gat-vs-at",
            PresetName::WeightAblation => "weight-ablation",
            PresetName::TaskCount => "task-count",
            PresetName::AttackTarget => "attack-target",
            PresetName::Transfer => "transfer",
            PresetName::Correlation => "correlation",
            PresetName::ScarceData => "scarce-data",
        };
        f.write_str(s)
    }
}

impl FromStr for PresetName {
    type Err = GatError;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .iter()
            .find(|p| p.to_string() == s)
            .copied()
            .ok_or_else(|| GatError::Config(format!("unknown preset '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: PresetName,
    pub seeds: Vec<u64>,
    pub corpus_n: usize,
    pub image_size: usize,
    pub fine_classes: u32,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub patience: usize,
    pub eps: f64,
    pub attack_steps: usize,
    pub step_size: f64,
    /// Hidden encoder widths after the input layer.
    pub hidden: Vec<usize>,
    pub pool_size: usize,
}

impl ExperimentConfig {
    pub fn for_preset(preset: PresetName) -> Self {
        let base = ExperimentConfig {
            preset,
            seeds: vec![1, 2, 3],
            corpus_n: 2860,
            image_size: 16,
            fine_classes: 8,
            data_seed: 7,
            epochs: 25,
            batch_size: 64,
            lr0: 0.2,
            patience: 20,
            eps: 8.0 / 255.0,
            attack_steps: 10,
            step_size: 2.0 / 255.0,
            hidden: vec![128, 64],
            pool_size: 24,
        };
        match preset {
            PresetName::GatVsAt => base,
            // the ablation presets run on a smaller, easier corpus to
            // stay cheap; gat variants need a larger step size because the
            // min-norm direction is bounded by the simplex
            PresetName::WeightAblation | PresetName::TaskCount => ExperimentConfig {
                corpus_n: 1200,
                image_size: 8,
                fine_classes: 4,
                epochs: 15,
                lr0: 0.3,
                hidden: vec![48, 24],
                ..base
            },
            // the selector contrast is small, so this preset needs a large
            // test split and extra seeds for a stable majority
            PresetName::AttackTarget => ExperimentConfig {
                corpus_n: 2400,
                image_size: 8,
                fine_classes: 4,
                epochs: 25,
                lr0: 0.3,
                seeds: vec![1, 2, 3, 4, 5],
                hidden: vec![48, 24],
                ..base
            },
            PresetName::Transfer | PresetName::Correlation => ExperimentConfig {
                corpus_n: 1200,
                image_size: 8,
                fine_classes: 4,
                epochs: 15,
                lr0: 0.3,
                hidden: vec![48, 24],
                seeds: vec![1],
                ..base
            },
            PresetName::ScarceData => ExperimentConfig {
                corpus_n: 2000,
                image_size: 8,
                fine_classes: 4,
                epochs: 15,
                lr0: 0.3,
                hidden: vec![48, 24],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(GatError::Config("preset needs at least one seed".into()));
        }
        if self.corpus_n == 0 || self.epochs == 0 {
            return Err(GatError::Config("corpus_n and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn attack(&self, selector: TaskSelector) -> AttackConfig {
        AttackConfig {
            norm: NormP::Linf,
            epsilon: self.eps,
            step_size: self.step_size,
            steps: self.attack_steps,
            random_start: true,
            selector,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            horizon: self.epochs,
            patience: self.patience,
            seed,
            attack: self.attack(TaskSelector::MainOnly),
            weighting: Weighting::Mgda,
            regularizer: true,
            reg_detached: false,
            reg_in_mgda: true,
            weight_override: None,
        }
    }

    pub fn jigsaw_grid(&self) -> usize {
        if self.image_size % 4 == 0 && self.image_size >= 16 {
            4
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aux {
    Macro,
    Rotation,
    Jigsaw,
}

fn aux_spec(aux: Aux, corpus: &LabeledCorpus, pool: &PermutationPool) -> TaskSpec {
    match aux {
        Aux::Macro => TaskSpec {
            name: "macro".into(),
            kind: TaskKind::DomainKnowledge,
            loss: LossFamily::MulticlassCe,
            arity: corpus.macro_classes(),
            preprocessor: None,
        },
        Aux::Rotation => TaskSpec {
            name: "rotation".into(),
            kind: TaskKind::SelfSupervised,
            loss: LossFamily::MulticlassCe,
            arity: 4,
            preprocessor: Some(Preprocessor::Rotation),
        },
        Aux::Jigsaw => TaskSpec {
            name: "jigsaw".into(),
            kind: TaskKind::SelfSupervised,
            loss: LossFamily::MulticlassCe,
            arity: pool.len(),
            preprocessor: Some(Preprocessor::Jigsaw),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Standard,
    Madry,
    Gat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: Mode,
    pub aux: Vec<Aux>,
    pub weighting: Weighting,
    pub regularizer: bool,
    pub selector: TaskSelector,
    pub fraction: Option<f64>,
    pub weight_override: Option<Vec<f64>>,
}

impl Variant {
    fn new(name: &str, mode: Mode) -> Self {
        Variant {
            name: name.into(),
            mode,
            aux: Vec::new(),
            weighting: Weighting::Mgda,
            regularizer: true,
            selector: TaskSelector::MainOnly,
            fraction: None,
            weight_override: None,
        }
    }

    fn gat(name: &str, aux: &[Aux]) -> Self {
        Variant {
            aux: aux.to_vec(),
            ..Variant::new(name, Mode::Gat)
        }
    }
}

fn preset_variants(preset: PresetName) -> Vec<Variant> {
    match preset {
        PresetName::GatVsAt => vec![
            Variant::new("standard", Mode::Standard),
            Variant::new("madry", Mode::Madry),
            Variant::gat("gat-macro-mgda", &[Aux::Macro]),
        ],
        PresetName::WeightAblation => {
            let mut out = Vec::new();
            for (aux_name, aux) in [
                ("none", None),
                ("jigsaw", Some(Aux::Jigsaw)),
                ("rotation", Some(Aux::Rotation)),
                ("macro", Some(Aux::Macro)),
            ] {
                for (w_name, w) in [("equal", Weighting::Equal), ("mgda", Weighting::Mgda)] {
                    let mut v = match aux {
                        None => Variant::new(&format!("{aux_name}+{w_name}"), Mode::Madry),
                        Some(a) => Variant::gat(&format!("{aux_name}+{w_name}"), &[a]),
                    };
                    v.weighting = w;
                    out.push(v);
                }
            }
            out
        }
        PresetName::TaskCount => vec![
            Variant::new("tasks-1", Mode::Madry),
            Variant::gat("tasks-2", &[Aux::Macro]),
            Variant::gat("tasks-3", &[Aux::Macro, Aux::Rotation]),
            Variant::gat("tasks-4", &[Aux::Macro, Aux::Rotation, Aux::Jigsaw]),
        ],
        PresetName::AttackTarget => {
            let mut main_only = Variant::gat("main-only", &[Aux::Macro]);
            main_only.selector = TaskSelector::MainOnly;
            let mut both = Variant::gat("both-tasks", &[Aux::Macro]);
            both.selector = TaskSelector::AllTasks;
            let mut aux_only = Variant::gat("aux-only", &[Aux::Macro]);
            aux_only.selector = TaskSelector::AuxiliaryOnly;
            vec![main_only, both, aux_only]
        }
        PresetName::Transfer => vec![
            Variant::new("standard", Mode::Standard),
            Variant::new("madry", Mode::Madry),
            Variant::gat("gat", &[Aux::Macro]),
        ],
        PresetName::Correlation => {
            let mut out = Vec::new();
            for lam in [1, 3, 5, 7, 9] {
                let l = lam as f64 / 10.0;
                let mut v = Variant::gat(&format!("lambda-0.{lam}"), &[Aux::Macro]);
                v.regularizer = false;
                v.weighting = Weighting::Equal;
                v.weight_override = Some(vec![l / 2.0, l / 2.0, (1.0 - l) / 2.0, (1.0 - l) / 2.0]);
                out.push(v);
            }
            out
        }
        PresetName::ScarceData => {
            let mut out = Vec::new();
            for (name, f) in [("frac-10", 0.10), ("frac-25", 0.25), ("frac-50", 0.50)] {
                let mut v = Variant::gat(name, &[Aux::Macro]);
                v.fraction = Some(f);
                out.push(v);
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub vulnerability: f64,
    pub robust_correct: Vec<bool>,
}

pub struct RunArtifacts {
    pub record: RunRecord,
    pub model: MultiTaskModel,
    pub result: Option<TrainResult>,
}

fn model_for_variant(cfg: &ExperimentConfig, variant: &Variant, corpus: &LabeledCorpus, pool: &PermutationPool, seed: u64) -> Result<MultiTaskModel> {
    let dim = corpus.sample_dim();
    let mut widths = vec![dim];
    widths.extend(&cfg.hidden);
    let mut specs = vec![TaskSpec {
        name: "fine".into(),
        kind: TaskKind::Target,
        loss: LossFamily::MulticlassCe,
        arity: corpus.fine_classes(),
        preprocessor: None,
    }];
    for &a in &variant.aux {
        specs.push(aux_spec(a, corpus, pool));
    }
    build_model(EncoderSpec::new(widths)?, specs, seed.wrapping_mul(0x9E37).wrapping_add(11))
}

/// Trains one variant for one seed and evaluates it on the full test
/// split with PGD at the configured budget.
pub fn run_variant(cfg: &ExperimentConfig, corpus: &LabeledCorpus, pool: &PermutationPool, variant: &Variant, seed: u64) -> Result<RunArtifacts> {
    let model = model_for_variant(cfg, variant, corpus, pool, seed)?;
    let train_corpus = match variant.fraction {
        Some(f) => split_subset(corpus, f, true, seed.wrapping_add(101))?,
        None => corpus.clone(),
    };
    let train = TrainData::from_corpus(&train_corpus, &model, SplitTag::Train, pool)?;
    let val = TrainData::from_corpus(&train_corpus, &model, SplitTag::Val, pool)?;
    let mut tc = cfg.train_config(seed);
    tc.weighting = variant.weighting;
    tc.regularizer = variant.regularizer;
    tc.attack.selector = variant.selector;
    tc.weight_override = variant.weight_override.clone();
    let result = match variant.mode {
        Mode::Standard => train_standard(&model, &train, &val, &tc)?,
        Mode::Madry => train_madry(&model, &train, &val, &tc)?,
        Mode::Gat => train_gat(&model, &train, &val, &tc)?,
    };
    let test = TrainData::from_corpus(corpus, &result.model, SplitTag::Test, pool)?;
    let report = evaluate_model(&result.model, &test, &cfg.attack(TaskSelector::MainOnly), seed ^ 0xEA11)?;
    Ok(RunArtifacts {
        record: RunRecord {
            variant: variant.name.clone(),
            seed,
            clean_acc: report.clean_accuracy,
            robust_acc: report.robust_accuracy,
            vulnerability: report.vulnerability,
            robust_correct: report.robust_correct,
        },
        model: result.model.clone(),
        result: Some(result),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub config: ExperimentConfig,
    pub artifact_version: String,
    pub dataset_file: String,
    pub dataset_crc32: u32,
    pub rows: usize,
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    /// CRC-32 per emitted artifact file.
    pub files: BTreeMap<String, u32>,
}

fn fmt_row(preset: PresetName, r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        preset, r.variant, r.seed, r.clean_acc, r.robust_acc, r.vulnerability
    )
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_rows(variants: &[String], records: &[RunRecord]) -> String {
    let mut out = String::from("variant,n,clean_mean,clean_std,robust_mean,robust_std,vuln_mean\n");
    for v in variants {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| &r.variant == v).collect();
        if rows.is_empty() {
            continue;
        }
        let clean: Vec<f64> = rows.iter().map(|r| r.clean_acc).collect();
        let robust: Vec<f64> = rows.iter().map(|r| r.robust_acc).collect();
        let vuln: Vec<f64> = rows.iter().map(|r| r.vulnerability).collect();
        let (cm, cs) = mean_std(&clean);
        let (rm, rs) = mean_std(&robust);
        let (vm, _) = mean_std(&vuln);
        out.push_str(&format!("{v},{},{cm},{cs},{rm},{rs},{vm}\n", rows.len()));
    }
    out
}

fn write_checksummed(dir: &Path, name: &str, content: &str, files: &mut BTreeMap<String, u32>) -> Result<()> {
    fs::write(dir.join(name), content)?;
    files.insert(name.to_string(), crc32fast::hash(content.as_bytes()));
    Ok(())
}

fn load_journal(path: &Path) -> Vec<RunRecord> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn append_journal(path: &Path, record: &RunRecord) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Cross-variant extras: the transfer matrix and correlation scatters.
fn preset_extras(
    cfg: &ExperimentConfig,
    corpus: &LabeledCorpus,
    pool: &PermutationPool,
    models: &BTreeMap<String, MultiTaskModel>,
    records: &[RunRecord],
    dir: &Path,
    files: &mut BTreeMap<String, u32>,
) -> Result<String> {
    match cfg.preset {
        PresetName::Transfer => {
            let names: Vec<String> = preset_variants(cfg.preset).iter().map(|v| v.name.clone()).collect();
            let first = models
                .values()
                .next()
                .ok_or_else(|| GatError::Config("no trained models for transfer".into()))?;
            let test = TrainData::from_corpus(corpus, first, SplitTag::Test, pool)?;
            let mut csv = String::from("surrogate,target,robust_acc,success_rate\n");
            let mut md = String::from("\n## Transfer matrix (success rate = 1 - robust accuracy)\n\n");
            md.push_str("| surrogate \\ target |");
            for t in &names {
                md.push_str(&format!(" {t} |"));
            }
            md.push_str("\n|---|");
            md.push_str(&"---|".repeat(names.len()));
            md.push('\n');
            for s in &names {
                let surrogate = &models[s];
                let labels = vec![test.labels[0].clone().unwrap_or_default()];
                let mut surface = AttackSurface::from_model(surrogate, TaskSelector::MainOnly, test.n, &labels, None)?;
                let pb = pgd_on_surface(&mut surface, &test.x, &cfg.attack(TaskSelector::MainOnly), 0xBEEF)?;
                md.push_str(&format!("| {s} |"));
                for t in &names {
                    let target = &models[t];
                    let correct = target_correctness(target, &pb.adversarial, &test)?;
                    let acc = correct.iter().filter(|&&c| c).count() as f64 / test.n as f64;
                    csv.push_str(&format!("{s},{t},{acc},{}\n", 1.0 - acc));
                    md.push_str(&format!(" {:.4} |", 1.0 - acc));
                }
                md.push('\n');
            }
            write_checksummed(dir, "transfer_matrix.csv", &csv, files)?;
            Ok(md)
        }
        PresetName::Correlation => {
            // per trained model: gradient-geometry metrics between the two
            // task losses on the test split, against its robust accuracy
            let mut scatters: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
            for (name, model) in models {
                let robust = records
                    .iter()
                    .find(|r| &r.variant == name)
                    .map(|r| r.robust_acc)
                    .ok_or_else(|| GatError::Config(format!("no record for {name}")))?;
                let (g1, g2) = task_encoder_gradients(cfg, corpus, pool, model)?;
                let (cos, _) = cosine_angle(&g1, &g2)?;
                scatters.entry("cosine").or_default().push((cos, robust));
                scatters
                    .entry("magnitude")
                    .or_default()
                    .push((magnitude_similarity(&g1, &g2)?, robust));
                scatters
                    .entry("curvature")
                    .or_default()
                    .push((curvature_measure(&g1, &g2)?, robust));
            }
            let mut md = String::from("\n## Metric vs robust accuracy correlations\n\n");
            let mut summary = String::from("metric,pearson_r,p_value\n");
            for (metric, pts) in &scatters {
                let mut csv = String::from("metric_value,robust_acc\n");
                for (m, r) in pts {
                    csv.push_str(&format!("{m},{r}\n"));
                }
                write_checksummed(dir, &format!("correlation_{metric}.csv"), &csv, files)?;
                let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
                match pearson_r(&xs, &ys) {
                    Ok((r, p)) => {
                        summary.push_str(&format!("{metric},{r},{p}\n"));
                        md.push_str(&format!("- {metric}: Pearson r = {r:.4} (p = {p:.4})\n"));
                    }
                    Err(_) => {
                        summary.push_str(&format!("{metric},nan,nan\n"));
                        md.push_str(&format!("- {metric}: degenerate series\n"));
                    }
                }
            }
            write_checksummed(dir, "correlation_summary.csv", &summary, files)?;
            Ok(md)
        }
        _ => Ok(String::new()),
    }
}

/// Flat shared-encoder gradients of each task's clean loss on the test
/// split, for the gradient-geometry diagnostics. The model must carry
/// both heads, so this re-enables them if they were disabled.
fn task_encoder_gradients(cfg: &ExperimentConfig, corpus: &LabeledCorpus, pool: &PermutationPool, model: &MultiTaskModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut full = model.clone();
    for t in &mut full.tasks {
        t.enabled = true;
    }
    let data = TrainData::from_corpus(corpus, &full, SplitTag::Test, pool)?;
    let n = data.n.min(cfg.batch_size * 2);
    let mut mg = build_graph(&full, n)?;
    mg.bind_parameters(&full)?;
    mg.bind_input(&data.x[..n * data.dim])?;
    for (slot, (_, head)) in full.enabled_tasks().enumerate() {
        let cols = match head.spec.loss {
            LossFamily::MulticlassCe => head.spec.arity,
            _ => 1,
        };
        let block = data.labels[slot]
            .as_ref()
            .ok_or_else(|| GatError::Config("correlation preset expects label-backed tasks".into()))?;
        mg.bind_labels(&head.spec.name, block[..n * cols].to_vec())?;
    }
    let enc_leaves: Vec<_> = (0..full.encoder.len())
        .flat_map(|i| [format!("enc{i}.w"), format!("enc{i}.b")])
        .map(|name| mg.graph.leaf_id(&name))
        .collect::<Result<_>>()?;
    let l0 = mg.nodes_for(0)?.mean_loss;
    let l1 = mg.nodes_for(1)?.mean_loss;
    let g0_nodes = mg.graph.backward(l0, &enc_leaves, false)?;
    let g1_nodes = mg.graph.backward(l1, &enc_leaves, false)?;
    mg.graph.forward()?;
    let flat = |nodes: &[crate::graph::NodeId], g: &crate::graph::Graph| {
        nodes.iter().flat_map(|&n| g.value(n).iter().copied()).collect::<Vec<f64>>()
    };
    Ok((flat(&g0_nodes, &mg.graph), flat(&g1_nodes, &mg.graph)))
}

fn mcnemar_section(preset: PresetName, records: &[RunRecord]) -> String {
    let baseline_name = match preset {
        PresetName::GatVsAt => "madry",
        PresetName::TaskCount => "tasks-1",
        PresetName::WeightAblation => "none+equal",
        _ => return String::new(),
    };
    let Some(base) = records.iter().find(|r| r.variant == baseline_name) else {
        return String::new();
    };
    let mut md = format!("\n## McNemar tests vs `{baseline_name}` (seed {})\n\n", base.seed);
    md.push_str("| variant | b | c | chi2 | significant (5%) |\n|---|---|---|---|---|\n");
    for r in records {
        if r.variant == baseline_name || r.seed != base.seed {
            continue;
        }
        if r.robust_correct.len() != base.robust_correct.len() {
            continue;
        }
        let b = base
            .robust_correct
            .iter()
            .zip(&r.robust_correct)
            .filter(|(&a, &v)| a && !v)
            .count() as u64;
        let c = base
            .robust_correct
            .iter()
            .zip(&r.robust_correct)
            .filter(|(&a, &v)| !a && v)
            .count() as u64;
        match mcnemar_test(b, c) {
            Ok((chi2, reject)) => {
                md.push_str(&format!("| {} | {b} | {c} | {chi2:.4} | {reject} |\n", r.variant));
            }
            Err(_) => {
                md.push_str(&format!("| {} | {b} | {c} | n/a | false |\n", r.variant));
            }
        }
    }
    md
}

/// Executes every (variant, seed) run of a preset and writes
/// runs.csv, aggregate.csv, report.md, and manifest.json (last) into
/// `out_dir`. A journal line per completed run makes reruns resumable.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let corpus = generate_synthetic(cfg.corpus_n, cfg.image_size, cfg.fine_classes, cfg.data_seed)?;
    let corpus_path = out_dir.join("corpus.gatc1");
    let crc = save_corpus(&corpus, &corpus_path)?;
    write_manifest(&corpus, "corpus.gatc1", cfg.data_seed, crc, &out_dir.join("corpus.manifest.json"))?;
    let pool = PermutationPool::build(cfg.jigsaw_grid(), cfg.pool_size, cfg.data_seed ^ 0xA5)?;

    let variants = preset_variants(cfg.preset);
    let journal_path = out_dir.join("journal.jsonl");
    let done = load_journal(&journal_path);
    let mut records: Vec<RunRecord> = Vec::new();
    let mut models: BTreeMap<String, MultiTaskModel> = BTreeMap::new();
    let needs_models = matches!(cfg.preset, PresetName::Transfer | PresetName::Correlation);
    for variant in &variants {
        for &seed in &cfg.seeds {
            let cached = done
                .iter()
                .find(|r| r.variant == variant.name && r.seed == seed)
                .cloned();
            let record = match cached {
                // transfer/correlation extras need the model itself, so
                // those presets retrain even on resume
                Some(r) if !needs_models => r,
                _ => {
                    let run = run_variant(cfg, &corpus, &pool, variant, seed)?;
                    append_journal(&journal_path, &run.record)?;
                    if needs_models {
                        models.insert(variant.name.clone(), run.model);
                    }
                    run.record
                }
            };
            records.push(record);
        }
    }

    let mut files = BTreeMap::new();
    let mut runs_csv = String::from("preset,variant,seed,clean_acc,robust_acc,vulnerability\n");
    for r in &records {
        runs_csv.push_str(&fmt_row(cfg.preset, r));
    }
    write_checksummed(out_dir, "runs.csv", &runs_csv, &mut files)?;
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    let aggregate = aggregate_rows(&names, &records);
    write_checksummed(out_dir, "aggregate.csv", &aggregate, &mut files)?;

    let extras_md = preset_extras(cfg, &corpus, &pool, &models, &records, out_dir, &mut files)?;
    let mut report = format!(
        "# {} report\n\ncorpus: n={}, {}x{} px, {} fine classes, data seed {}\nattack: PGD-{} eps={:.5}\nseeds: {:?}\n\n## Aggregate (mean over seeds)\n\n",
        cfg.preset, cfg.corpus_n, cfg.image_size, cfg.image_size, cfg.fine_classes, cfg.data_seed,
        cfg.attack_steps, cfg.eps, cfg.seeds
    );
    report.push_str("| variant | n | clean | robust | vulnerability |\n|---|---|---|---|---|\n");
    for line in aggregate.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let fmt_pm = |m: &str, s: &str| {
            format!("{:.4} +- {:.4}", m.parse::<f64>().unwrap_or(f64::NAN), s.parse::<f64>().unwrap_or(f64::NAN))
        };
        report.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} |\n",
            f[0],
            f[1],
            fmt_pm(f[2], f[3]),
            fmt_pm(f[4], f[5]),
            f[6].parse::<f64>().unwrap_or(f64::NAN)
        ));
    }
    report.push_str(&mcnemar_section(cfg.preset, &records));
    report.push_str(&extras_md);
    write_checksummed(out_dir, "report.md", &report, &mut files)?;

    let mut final_metrics = BTreeMap::new();
    for line in aggregate.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if let Ok(v) = f[4].parse::<f64>() {
            final_metrics.insert(format!("{}.robust_mean", f[0]), v);
        }
        if let Ok(v) = f[2].parse::<f64>() {
            final_metrics.insert(format!("{}.clean_mean", f[0]), v);
        }
    }
    let manifest = RunManifest {
        preset: cfg.preset.to_string(),
        config: cfg.clone(),
        artifact_version: "1".into(),
        dataset_file: "corpus.gatc1".into(),
        dataset_crc32: crc,
        rows: records.len(),
        final_metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        files,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Default output directory: runs/<preset>/<timestamp>.
pub fn default_out_dir(root: &Path, preset: PresetName) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    root.join("runs").join(preset.to_string()).join(stamp.to_string())
}

//! Training loops: standard SGD, adversarial training on clean plus
//! adversarial losses, and the guided variant with per-batch min-norm
//! loss weighting and a differentiable input-gradient curvature
//! regularizer.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_on_surface, AttackConfig, AttackSurface, TaskSelector};
use crate::augment::{compose_preprocessors, ImageTensor, PermutationPool, Preprocessor};
use crate::data::{LabeledCorpus, SplitTag};
use crate::error::{GatError, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{roc_auc, CURVATURE_DENOM_EPS};
use crate::mgda::{aggregate_weighted_update, mgda_frank_wolfe, GramMatrix, MGDA_MAX_ITERS, MGDA_TOL};
use crate::model::{disable_auxiliary, one_hot, LossFamily, MultiTaskModel, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    Equal,
    Mgda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    Madry,
    Gat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Cosine annealing horizon; lr reaches 0 at this epoch count.
    pub horizon: usize,
    pub patience: usize,
    pub seed: u64,
    pub attack: AttackConfig,
    pub weighting: Weighting,
    pub regularizer: bool,
    /// Log the regularizer but cut its gradient (ablation).
    pub reg_detached: bool,
    /// Give regularizer terms their own min-norm weights instead of a
    /// fixed weight of 1.
    pub reg_in_mgda: bool,
    /// Fixed per-objective weights; overrides `weighting` when set.
    pub weight_override: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn defaults(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            horizon: 30,
            patience: 20,
            seed,
            attack: AttackConfig::pgd10(TaskSelector::MainOnly),
            weighting: Weighting::Mgda,
            regularizer: true,
            reg_detached: false,
            reg_in_mgda: true,
            weight_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || !self.lr0.is_finite() {
            return Err(GatError::Config(format!("lr0 {} must be > 0", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(GatError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(GatError::Config("patience must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(GatError::Config("horizon must be >= 1".into()));
        }
        self.attack.validate()
    }
}

/// eta_t = eta0 * (1 + cos(pi t / T)) / 2.
pub fn cosine_lr(t: usize, horizon: usize, eta0: f64) -> Result<f64> {
    if t > horizon {
        return Err(GatError::InvalidArgument(format!("t = {t} beyond horizon {horizon}")));
    }
    Ok(eta0 * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Epoch-mean clean loss per enabled task.
    pub clean_losses: Vec<f64>,
    pub adv_losses: Vec<f64>,
    pub reg_value: f64,
    /// Batch-mean objective weights.
    pub alpha_mean: Vec<f64>,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchWeightRecord {
    pub epoch: usize,
    pub batch: usize,
    pub alpha: Vec<f64>,
    /// min_i <d, g_i> - ||d||^2; common descent holds when >= -tol.
    pub cert_margin: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: MultiTaskModel,
    pub records: Vec<EpochRecord>,
    pub alpha_history: Vec<BatchWeightRecord>,
    pub best_epoch: usize,
    pub best_val_robust: f64,
}

/// A training view of a corpus split: flat inputs, one label block per
/// model task (None for self-supervised tasks, which draw labels at batch
/// time), and the image geometry the preprocessors need.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub x: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<Option<Vec<f64>>>,
    pub fine: Vec<usize>,
    pub pool: PermutationPool,
}

impl TrainData {
    pub fn from_corpus(corpus: &LabeledCorpus, model: &MultiTaskModel, tag: SplitTag, pool: &PermutationPool) -> Result<Self> {
        let idx = corpus.indices_with_tag(tag);
        if idx.is_empty() {
            return Err(GatError::InvalidArgument(format!("no samples tagged {tag:?}")));
        }
        let dim = corpus.sample_dim();
        let mut x = Vec::with_capacity(idx.len() * dim);
        for &i in &idx {
            x.extend_from_slice(corpus.image(i));
        }
        let mut labels = Vec::new();
        for (_, head) in model.enabled_tasks() {
            labels.push(label_block(corpus, &idx, head.spec.kind, &head.spec.name, head.spec.arity, pool)?);
        }
        Ok(TrainData {
            x,
            n: idx.len(),
            dim,
            height: corpus.height,
            width: corpus.width,
            channels: corpus.channels,
            labels,
            fine: idx.iter().map(|&i| corpus.fine_labels[i] as usize).collect(),
            pool: pool.clone(),
        })
    }
}

/// Maps a task to its per-sample label block. Self-supervised tasks draw
/// labels during training and get None here.
fn label_block(
    corpus: &LabeledCorpus,
    idx: &[usize],
    kind: TaskKind,
    name: &str,
    arity: usize,
    pool: &PermutationPool,
) -> Result<Option<Vec<f64>>> {
    match kind {
        TaskKind::SelfSupervised => {
            let expect = match name {
                "rotation" => 4,
                "jigsaw" => pool.len(),
                other => return Err(GatError::Config(format!("unknown self-supervised task '{other}'"))),
            };
            if arity != expect {
                return Err(GatError::Config(format!("task '{name}' arity {arity}, expected {expect}")));
            }
            Ok(None)
        }
        TaskKind::Target => {
            if arity == 1 {
                // binary target trained on a single logit column
                for &i in idx {
                    if corpus.fine_labels[i] > 1 {
                        return Err(GatError::Config(format!(
                            "binary target but fine label {}",
                            corpus.fine_labels[i]
                        )));
                    }
                }
                return Ok(Some(idx.iter().map(|&i| corpus.fine_labels[i] as f64).collect()));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| corpus.fine_labels[i] as usize).collect();
            Ok(Some(one_hot(&labels, arity)?))
        }
        TaskKind::DomainKnowledge => match name {
            "macro" => {
                let labels: Vec<usize> = idx
                    .iter()
                    .map(|&i| corpus.group_map.0[&corpus.fine_labels[i]] as usize)
                    .collect();
                Ok(Some(one_hot(&labels, arity)?))
            }
            "gender" => {
                let labels: Vec<usize> = idx.iter().map(|&i| corpus.gender_like[i] as usize).collect();
                Ok(Some(one_hot(&labels, arity)?))
            }
            "age" => Ok(Some(idx.iter().map(|&i| corpus.age_like[i]).collect())),
            "pathology" => Ok(Some(idx.iter().map(|&i| corpus.aux_binary[i] as f64).collect())),
            other => Err(GatError::Config(format!("unknown domain-knowledge task '{other}'"))),
        },
    }
}

/// Differentiable curvature between two flattened input-gradient nodes:
/// (1 - cos^2) * ||gj - gk||^2 / (||gj + gk||^2 + eps).
fn curvature_node(g: &mut Graph, gj: NodeId, gk: NodeId) -> Result<NodeId> {
    let prod = g.mul(gj, gk)?;
    let dot = g.sum(prod);
    let jj = g.mul(gj, gj)?;
    let nj = g.sum(jj);
    let kk = g.mul(gk, gk)?;
    let nk = g.sum(kk);
    let dot2 = g.mul(dot, dot)?;
    let njnk = g.mul(nj, nk)?;
    let njnk_eps = g.add_scalar(njnk, CURVATURE_DENOM_EPS);
    let cos2 = g.div(dot2, njnk_eps)?;
    let neg_cos2 = g.neg(cos2);
    let sin2 = g.add_scalar(neg_cos2, 1.0);
    let diff = g.sub(gj, gk)?;
    let diff2 = g.mul(diff, diff)?;
    let num = g.sum(diff2);
    let summ = g.add(gj, gk)?;
    let sum2 = g.mul(summ, summ)?;
    let den = g.sum(sum2);
    let den_eps = g.add_scalar(den, CURVATURE_DENOM_EPS);
    let frac = g.div(num, den_eps)?;
    g.mul(sin2, frac)
}

struct TgTask {
    task_index: usize,
    clean_per_sample: NodeId,
    clean_mean: NodeId,
    adv_mean: NodeId,
}

/// The per-batch training graph: clean and adversarial forward paths over
/// shared parameter leaves, per-task losses, optional second-order
/// regularizer terms, and pre-built gradient nodes for every objective.
struct TrainingGraph {
    g: Graph,
    tasks: Vec<TgTask>,
    /// One scalar per task index >= 1 when the regularizer is built.
    reg_nodes: Vec<NodeId>,
    /// Objective scalars in MGDA order with their encoder-gradient nodes.
    objectives: Vec<(NodeId, Vec<NodeId>)>,
    /// Per enabled task: gradient nodes of its own update loss wrt its
    /// head leaves (w then b).
    head_grads: Vec<(usize, [NodeId; 2])>,
}

fn build_dual_path(
    g: &mut Graph,
    model: &MultiTaskModel,
    batch: usize,
) -> Result<(NodeId, NodeId, Vec<TgTask>)> {
    let x = g.leaf("x", batch, model.encoder_spec.input_width(), true);
    let x_adv = g.leaf("xadv", batch, model.encoder_spec.input_width(), true);
    let mut enc_params = Vec::new();
    for (i, widths) in model.encoder_spec.widths.windows(2).enumerate() {
        let w = g.leaf(&format!("enc{i}.w"), widths[0], widths[1], true);
        let b = g.leaf(&format!("enc{i}.b"), 1, widths[1], true);
        enc_params.push((w, b));
    }
    let run_encoder = |g: &mut Graph, mut h: NodeId| -> Result<NodeId> {
        for &(w, b) in &enc_params {
            let z = g.affine(h, w, b)?;
            h = g.relu(z);
        }
        Ok(h)
    };
    let h_clean = run_encoder(g, x)?;
    let h_adv = run_encoder(g, x_adv)?;
    let penult = model.encoder_spec.penultimate_width();
    let mut tasks = Vec::new();
    for (task_index, head) in model.enabled_tasks() {
        let name = &head.spec.name;
        let out_w = head.spec.output_width();
        let w = g.leaf(&format!("head.{name}.w"), penult, out_w, true);
        let b = g.leaf(&format!("head.{name}.b"), 1, out_w, true);
        let label_cols = match head.spec.loss {
            LossFamily::MulticlassCe => head.spec.arity,
            LossFamily::BinaryCe | LossFamily::Mse => 1,
        };
        let y = g.leaf(&format!("y.{name}"), batch, label_cols, false);
        let clean_output = g.affine(h_clean, w, b)?;
        let adv_output = g.affine(h_adv, w, b)?;
        let loss_of = |g: &mut Graph, out: NodeId| -> Result<NodeId> {
            match head.spec.loss {
                LossFamily::MulticlassCe => g.softmax_cross_entropy(out, y),
                LossFamily::BinaryCe => g.sigmoid_binary_cross_entropy(out, y),
                LossFamily::Mse => g.squared_error(out, y),
            }
        };
        let clean_per_sample = loss_of(g, clean_output)?;
        let adv_per_sample = loss_of(g, adv_output)?;
        let clean_mean = g.mean(clean_per_sample);
        let adv_mean = g.mean(adv_per_sample);
        let _ = (y, clean_output, adv_output);
        tasks.push(TgTask {
            task_index,
            clean_per_sample,
            clean_mean,
            adv_mean,
        });
    }
    Ok((x, x_adv, tasks))
}

fn build_training_graph(model: &MultiTaskModel, batch: usize, mode: TrainMode, cfg: &TrainConfig) -> Result<TrainingGraph> {
    let mut g = Graph::new();
    let (x, _x_adv, tasks) = build_dual_path(&mut g, model, batch)?;
    let with_reg = mode == TrainMode::Gat && cfg.regularizer && tasks.len() > 1;
    let mut reg_nodes = Vec::new();
    if with_reg {
        let mut input_grads = Vec::new();
        for t in &tasks {
            let total = g.sum(t.clean_per_sample);
            let grad = g.backward(total, &[x], !cfg.reg_detached)?[0];
            let grad = if cfg.reg_detached { g.detach(grad) } else { grad };
            input_grads.push(grad);
        }
        for j in 1..tasks.len() {
            let mut acc: Option<NodeId> = None;
            for k in 0..j {
                let xi = curvature_node(&mut g, input_grads[j], input_grads[k])?;
                acc = Some(match acc {
                    Some(a) => g.add(a, xi)?,
                    None => xi,
                });
            }
            reg_nodes.push(acc.unwrap());
        }
    }
    let enc_leaves: Vec<NodeId> = (0..model.encoder.len())
        .flat_map(|i| [format!("enc{i}.w"), format!("enc{i}.b")])
        .map(|n| g.leaf_id(&n).unwrap())
        .collect();
    // objective order: per task (clean, adv when adversarial), then regs
    let mut objective_scalars = Vec::new();
    for t in &tasks {
        objective_scalars.push(t.clean_mean);
        if mode != TrainMode::Standard {
            objective_scalars.push(t.adv_mean);
        }
    }
    if with_reg && !cfg.reg_detached {
        objective_scalars.extend(&reg_nodes);
    }
    let mut objectives = Vec::new();
    for &obj in &objective_scalars {
        let grads = g.backward(obj, &enc_leaves, false)?;
        objectives.push((obj, grads));
    }
    let mut head_grads = Vec::new();
    for t in &tasks {
        let name = &model.tasks[t.task_index].spec.name;
        let own = if mode == TrainMode::Standard {
            t.clean_mean
        } else {
            g.add(t.clean_mean, t.adv_mean)?
        };
        let leaves = [
            g.leaf_id(&format!("head.{name}.w"))?,
            g.leaf_id(&format!("head.{name}.b"))?,
        ];
        let grads = g.backward(own, &leaves, false)?;
        head_grads.push((t.task_index, [grads[0], grads[1]]));
    }
    Ok(TrainingGraph {
        g,
        tasks,
        reg_nodes,
        objectives,
        head_grads,
    })
}

impl TrainingGraph {
    fn bind_model(&mut self, model: &MultiTaskModel) -> Result<()> {
        for (i, layer) in model.encoder.iter().enumerate() {
            self.g.bind(&format!("enc{i}.w"), layer.w.clone())?;
            self.g.bind(&format!("enc{i}.b"), layer.b.clone())?;
        }
        for t in &self.tasks {
            let head = &model.tasks[t.task_index];
            self.g.bind(&format!("head.{}.w", head.spec.name), head.params.w.clone())?;
            self.g.bind(&format!("head.{}.b", head.spec.name), head.params.b.clone())?;
        }
        Ok(())
    }
}

/// Value of the input-gradient curvature regularizer for task `j`
/// (0-based, j >= 1): the summed curvature between task j's and every
/// earlier task's input gradient on the clean batch.
pub fn curvature_regularizer(model: &MultiTaskModel, x: &[f64], labels: &[Vec<f64>], j: usize, detached: bool) -> Result<f64> {
    let enabled = model.enabled_tasks().count();
    if j == 0 || j >= enabled {
        return Err(GatError::InvalidArgument(format!(
            "regularizer index {j} outside 1..{enabled}"
        )));
    }
    let d = model.encoder_spec.input_width();
    if x.is_empty() || x.len() % d != 0 {
        return Err(GatError::ShapeMismatch(format!("{} inputs for width {d}", x.len())));
    }
    let batch = x.len() / d;
    let mut g = Graph::new();
    let (xn, _xa, tasks) = build_dual_path(&mut g, model, batch)?;
    let mut input_grads = Vec::new();
    for t in tasks.iter().take(j + 1) {
        let total = g.sum(t.clean_per_sample);
        let grad = g.backward(total, &[xn], !detached)?[0];
        input_grads.push(if detached { g.detach(grad) } else { grad });
    }
    let mut acc: Option<NodeId> = None;
    for k in 0..j {
        let xi = curvature_node(&mut g, input_grads[j], input_grads[k])?;
        acc = Some(match acc {
            Some(a) => g.add(a, xi)?,
            None => xi,
        });
    }
    let reg = acc.unwrap();
    for (i, layer) in model.encoder.iter().enumerate() {
        g.bind(&format!("enc{i}.w"), layer.w.clone())?;
        g.bind(&format!("enc{i}.b"), layer.b.clone())?;
    }
    for t in &tasks {
        let head = &model.tasks[t.task_index];
        g.bind(&format!("head.{}.w", head.spec.name), head.params.w.clone())?;
        g.bind(&format!("head.{}.b", head.spec.name), head.params.b.clone())?;
    }
    g.bind("x", x.to_vec())?;
    g.bind("xadv", x.to_vec())?;
    for (t, block) in tasks.iter().zip(labels) {
        let name = &model.tasks[t.task_index].spec.name;
        g.bind(&format!("y.{name}"), block.clone())?;
    }
    g.forward()?;
    Ok(g.scalar_value(reg))
}

fn batch_rows(x: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&x[i * dim..(i + 1) * dim]);
    }
    out
}

fn label_rows(block: &[f64], cols: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&block[i * cols..(i + 1) * cols]);
    }
    out
}

struct BatchInputs {
    x: Vec<f64>,
    /// Flat label block per enabled task.
    labels: Vec<Vec<f64>>,
}

/// Assembles one batch: subsets stored labels, applies self-supervised
/// preprocessors (in task order, per-sample label draws), and one-hot
/// encodes drawn labels.
fn prepare_batch(model: &MultiTaskModel, data: &TrainData, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchInputs> {
    let stages: Vec<(usize, Preprocessor)> = model
        .enabled_tasks()
        .filter_map(|(slot, head)| head.spec.preprocessor.map(|p| (slot, p)))
        .collect();
    let mut x = batch_rows(&data.x, data.dim, idx);
    let mut drawn: Vec<Vec<usize>> = vec![Vec::new(); model.enabled_tasks().count()];
    if !stages.is_empty() {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(data.dim) {
            let img = ImageTensor::new(data.height, data.width, data.channels, row.to_vec())?;
            let (img, labels) = compose_preprocessors(&stages, &data.pool, &img, rng)?;
            out.extend_from_slice(&img.pixels);
            for l in labels {
                drawn[l.task_index].push(l.label);
            }
        }
        x = out;
    }
    let mut labels = Vec::new();
    for (slot, (_, head)) in model.enabled_tasks().enumerate() {
        match &data.labels[slot] {
            Some(block) => {
                let cols = match head.spec.loss {
                    LossFamily::MulticlassCe => head.spec.arity,
                    _ => 1,
                };
                labels.push(label_rows(block, cols, idx));
            }
            None => labels.push(one_hot(&drawn[slot], head.spec.arity)?),
        }
    }
    Ok(BatchInputs { x, labels })
}

fn check_finite_record(r: &EpochRecord) -> Result<()> {
    let all = r
        .clean_losses
        .iter()
        .chain(&r.adv_losses)
        .chain(std::iter::once(&r.reg_value));
    for &v in all {
        if !v.is_finite() {
            return Err(GatError::Divergence(format!(
                "non-finite loss at epoch {}: {r:?}",
                r.epoch
            )));
        }
    }
    Ok(())
}

fn stream_seed(base: u64, salt: u64, epoch: usize, batch: usize) -> u64 {
    base ^ salt
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((batch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

fn run_training(model: &MultiTaskModel, train: &TrainData, val: &TrainData, cfg: &TrainConfig, mode: TrainMode) -> Result<TrainResult> {
    cfg.validate()?;
    if train.n == 0 {
        return Err(GatError::InvalidArgument("empty training set".into()));
    }
    if mode == TrainMode::Gat && model.enabled_tasks().count() < 2 {
        return Err(GatError::Config("guided training needs at least 2 enabled tasks".into()));
    }
    let mut current = model.clone();
    let mut records = Vec::new();
    let mut alpha_history = Vec::new();
    let mut best: Option<(usize, f64, MultiTaskModel)> = None;
    let mut since_best = 0usize;
    let mut graphs: std::collections::BTreeMap<usize, TrainingGraph> = std::collections::BTreeMap::new();
    let num_tasks = current.enabled_tasks().count();
    let adversarial = mode != TrainMode::Standard;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.horizon.max(cfg.epochs), cfg.lr0)?;
        let mut order: Vec<usize> = (0..train.n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1, epoch, 0));
        order.shuffle(&mut shuffle_rng);
        let mut sum_clean = vec![0.0; num_tasks];
        let mut sum_adv = vec![0.0; num_tasks];
        let mut sum_reg = 0.0;
        let mut sum_alpha: Vec<f64> = Vec::new();
        let mut batches = 0usize;
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut ssl_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2, epoch, batch_no));
            let inputs = prepare_batch(&current, train, idx, &mut ssl_rng)?;
            let x_adv = if adversarial {
                let mut surface =
                    AttackSurface::from_model(&current, cfg.attack.selector, idx.len(), &inputs.labels, None)?;
                let pb = pgd_on_surface(&mut surface, &inputs.x, &cfg.attack, stream_seed(cfg.seed, 3, epoch, batch_no))?;
                for (a, o) in pb.adversarial.iter().zip(&inputs.x) {
                    if (a - o).abs() > cfg.attack.epsilon + 1e-9 || !(0.0..=1.0).contains(a) {
                        return Err(GatError::Divergence("adversarial example escaped the ball".into()));
                    }
                }
                pb.adversarial
            } else {
                inputs.x.clone()
            };
            let tg = match graphs.entry(idx.len()) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(v) => {
                    v.insert(build_training_graph(&current, idx.len(), mode, cfg)?)
                }
            };
            tg.bind_model(&current)?;
            tg.g.bind("x", inputs.x.clone())?;
            tg.g.bind("xadv", x_adv)?;
            for (t, block) in tg.tasks.iter().zip(&inputs.labels) {
                let name = &current.tasks[t.task_index].spec.name;
                tg.g.bind(&format!("y.{name}"), block.clone())?;
            }
            tg.g.forward()?;

            let obj_grads: Vec<Vec<f64>> = tg
                .objectives
                .iter()
                .map(|(_, nodes)| {
                    let mut flat = Vec::new();
                    for &n in nodes {
                        flat.extend_from_slice(tg.g.value(n));
                    }
                    flat
                })
                .collect();
            let mut obj_grads = obj_grads;
            // the double-backprop regularizer gradient can dwarf the loss
            // gradients; clip it to half their mean norm
            let n_regs_diff = if mode == TrainMode::Gat && cfg.regularizer && !cfg.reg_detached {
                tg.reg_nodes.len()
            } else {
                0
            };
            if n_regs_diff > 0 {
                let n_loss = obj_grads.len() - n_regs_diff;
                let mean_loss_norm = obj_grads[..n_loss]
                    .iter()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / n_loss as f64;
                let cap = 0.1 * mean_loss_norm;
                for g in &mut obj_grads[n_loss..] {
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > cap && norm > 0.0 {
                        let s = cap / norm;
                        for v in g.iter_mut() {
                            *v *= s;
                        }
                    }
                }
            }
            let alpha: Vec<f64> = if let Some(w) = &cfg.weight_override {
                if w.len() != obj_grads.len() {
                    return Err(GatError::Config(format!(
                        "{} weight overrides for {} objectives",
                        w.len(),
                        obj_grads.len()
                    )));
                }
                w.clone()
            } else {
                match (mode, cfg.weighting) {
                    (TrainMode::Gat, Weighting::Mgda) => {
                        // with reg_in_mgda off, regs sit at the tail of the
                        // objective list and keep a fixed weight of 1
                        let n_reg_fixed = if cfg.regularizer && !cfg.reg_in_mgda && !cfg.reg_detached {
                            tg.reg_nodes.len()
                        } else {
                            0
                        };
                        let weighted = obj_grads.len() - n_reg_fixed;
                        // weights are solved on norm-balanced gradients so a
                        // single large objective cannot be starved, then
                        // rescaled by 1/norm for the raw-gradient update
                        let norms: Vec<f64> = obj_grads[..weighted]
                            .iter()
                            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
                            .collect();
                        let unit: Vec<Vec<f64>> = obj_grads[..weighted]
                            .iter()
                            .zip(&norms)
                            .map(|(g, n)| g.iter().map(|v| v / n).collect())
                            .collect();
                        let gram = GramMatrix::from_gradients(&unit)?;
                        let fw = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL)?;
                        let a = fw.weights.0;
                        let dim = a.len();
                        let mut ga = vec![0.0; dim];
                        for r in 0..dim {
                            for j in 0..dim {
                                ga[r] += gram.get(r, j) * a[j];
                            }
                        }
                        let quad = gram.quad(&a);
                        let margin = ga.iter().cloned().fold(f64::INFINITY, f64::min) - quad;
                        let mut logged = a.clone();
                        logged.extend(std::iter::repeat(1.0).take(n_reg_fixed));
                        alpha_history.push(BatchWeightRecord {
                            epoch,
                            batch: batch_no,
                            alpha: logged,
                            cert_margin: margin,
                        });
                        // update along unit task directions, capping the
                        // amplification of near-vanishing objectives at the
                        // scale of the strongest gradient
                        let norm_floor = norms.iter().cloned().fold(0.0f64, f64::max) * 0.05;
                        let mut applied: Vec<f64> = a
                            .iter()
                            .zip(&norms)
                            .map(|(w, n)| w / n.max(norm_floor).max(1e-12))
                            .collect();
                        applied.extend(std::iter::repeat(1.0).take(n_reg_fixed));
                        applied
                    }
                    _ => vec![1.0; obj_grads.len()],
                }
            };
            let enc_flat = current.encoder_flat();
            let updated = aggregate_weighted_update(&enc_flat, &obj_grads, &alpha, lr)?;
            current.set_encoder_flat(&updated)?;
            for &(task_index, [gw, gb]) in &tg.head_grads {
                let (gw, gb) = (tg.g.value(gw).to_vec(), tg.g.value(gb).to_vec());
                let head = &mut current.tasks[task_index];
                for (p, g) in head.params.w.iter_mut().zip(&gw) {
                    *p -= lr * g;
                }
                for (p, g) in head.params.b.iter_mut().zip(&gb) {
                    *p -= lr * g;
                }
            }

            for (slot, t) in tg.tasks.iter().enumerate() {
                sum_clean[slot] += tg.g.scalar_value(t.clean_mean);
                sum_adv[slot] += if adversarial { tg.g.scalar_value(t.adv_mean) } else { 0.0 };
            }
            for &r in &tg.reg_nodes {
                sum_reg += tg.g.scalar_value(r);
            }
            if sum_alpha.len() != alpha.len() {
                sum_alpha = vec![0.0; alpha.len()];
            }
            for (s, a) in sum_alpha.iter_mut().zip(&alpha) {
                *s += a;
            }
            batches += 1;
        }
        let b = batches as f64;
        let (val_clean_acc, val_robust_acc) = validation_accuracy(&current, val, &cfg.attack, stream_seed(cfg.seed, 4, epoch, 0))?;
        let record = EpochRecord {
            epoch,
            lr,
            clean_losses: sum_clean.iter().map(|v| v / b).collect(),
            adv_losses: sum_adv.iter().map(|v| v / b).collect(),
            reg_value: sum_reg / b,
            alpha_mean: sum_alpha.iter().map(|v| v / b).collect(),
            val_clean_acc,
            val_robust_acc,
        };
        check_finite_record(&record)?;
        records.push(record);
        let metric = if adversarial { val_robust_acc } else { val_clean_acc };
        let improved = best.as_ref().map_or(true, |(_, m, _)| metric > *m);
        if improved {
            best = Some((epoch, metric, current.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_robust, best_model) = match best {
        Some(b) => b,
        None => (0, 0.0, current),
    };
    let final_model = if mode == TrainMode::Gat {
        disable_auxiliary(&best_model)
    } else {
        best_model
    };
    Ok(TrainResult {
        model: final_model,
        records,
        alpha_history,
        best_epoch,
        best_val_robust,
    })
}

pub fn train_standard(model: &MultiTaskModel, train: &TrainData, val: &TrainData, cfg: &TrainConfig) -> Result<TrainResult> {
    run_training(model, train, val, cfg, TrainMode::Standard)
}

pub fn train_madry(model: &MultiTaskModel, train: &TrainData, val: &TrainData, cfg: &TrainConfig) -> Result<TrainResult> {
    run_training(model, train, val, cfg, TrainMode::Madry)
}

pub fn train_gat(model: &MultiTaskModel, train: &TrainData, val: &TrainData, cfg: &TrainConfig) -> Result<TrainResult> {
    run_training(model, train, val, cfg, TrainMode::Gat)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Target-head class predictions, auxiliary heads ignored.
pub fn target_predictions(model: &MultiTaskModel, x: &[f64]) -> Result<Vec<usize>> {
    let solo = disable_auxiliary(model);
    let d = solo.encoder_spec.input_width();
    if x.is_empty() || x.len() % d != 0 {
        return Err(GatError::ShapeMismatch(format!("{} inputs for width {d}", x.len())));
    }
    let n = x.len() / d;
    let arity = solo.tasks[0].spec.output_width();
    let label_cols = match solo.tasks[0].spec.loss {
        LossFamily::MulticlassCe => solo.tasks[0].spec.arity,
        _ => 1,
    };
    let evals = crate::model::forward_and_losses(&solo, x, &[vec![0.0; n * label_cols]])?;
    Ok(evals[0]
        .outputs
        .chunks(arity)
        .map(|row| if arity == 1 { (row[0] > 0.0) as usize } else { argmax(row) })
        .collect())
}

pub fn target_correctness(model: &MultiTaskModel, x: &[f64], data: &TrainData) -> Result<Vec<bool>> {
    Ok(target_predictions(model, x)?
        .iter()
        .zip(&data.fine)
        .map(|(p, t)| p == t)
        .collect())
}

fn target_accuracy(model: &MultiTaskModel, x: &[f64], data: &TrainData) -> Result<f64> {
    let correct = target_correctness(model, x, data)?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.n as f64)
}

fn validation_accuracy(model: &MultiTaskModel, val: &TrainData, attack: &AttackConfig, seed: u64) -> Result<(f64, f64)> {
    let solo = disable_auxiliary(model);
    let target_labels = vec![val.labels[0].clone().unwrap_or_default()];
    let clean = target_accuracy(&solo, &val.x, val)?;
    let robust = if attack.epsilon > 0.0 {
        let mut surface = AttackSurface::from_model(&solo, TaskSelector::MainOnly, val.n, &target_labels, None)?;
        let pb = pgd_on_surface(&mut surface, &val.x, attack, seed)?;
        target_accuracy(&solo, &pb.adversarial, val)?
    } else {
        clean
    };
    Ok((clean, robust))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Only for binary targets.
    pub clean_auc: Option<f64>,
    pub robust_auc: Option<f64>,
    pub vulnerability: f64,
    /// Per-sample target correctness under attack, for paired tests.
    #[serde(skip)]
    pub robust_correct: Vec<bool>,
}

/// Clean and PGD-robust target metrics plus the empirical vulnerability
/// of the target loss.
pub fn evaluate_model(model: &MultiTaskModel, data: &TrainData, attack: &AttackConfig, seed: u64) -> Result<EvalReport> {
    if data.n == 0 {
        return Err(GatError::InvalidArgument("empty dataset".into()));
    }
    let solo = disable_auxiliary(model);
    let target_labels = vec![data.labels[0].clone().unwrap_or_default()];
    let clean_accuracy = target_accuracy(&solo, &data.x, data)?;
    let mut surface = AttackSurface::from_model(&solo, TaskSelector::MainOnly, data.n, &target_labels, None)?;
    let (robust_accuracy, adversarial) = if attack.epsilon > 0.0 {
        let pb = pgd_on_surface(&mut surface, &data.x, attack, seed)?;
        (target_accuracy(&solo, &pb.adversarial, data)?, pb.adversarial)
    } else {
        (clean_accuracy, data.x.clone())
    };
    let binary = solo.tasks[0].spec.output_width() == 1;
    let (clean_auc, robust_auc) = if binary {
        let truth: Vec<bool> = data.fine.iter().map(|&f| f == 1).collect();
        let score_of = |m: &MultiTaskModel, x: &[f64]| -> Result<Vec<f64>> {
            Ok(crate::model::forward_and_losses(m, x, &target_labels[..1])?[0]
                .outputs
                .clone())
        };
        (
            Some(roc_auc(&score_of(&solo, &data.x)?, &truth)?),
            Some(roc_auc(&score_of(&solo, &adversarial)?, &truth)?),
        )
    } else {
        (None, None)
    };
    let vulnerability = crate::attack::empirical_vulnerability(&mut surface, &data.x, attack, seed ^ 0x5151)?;
    let robust_correct = target_correctness(&solo, &adversarial, data)?;
    Ok(EvalReport {
        clean_accuracy,
        robust_accuracy,
        clean_auc,
        robust_auc,
        vulnerability,
        robust_correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::{build_model, EncoderSpec, TaskSpec};

    fn mse_task(name: &str, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            kind,
            loss: LossFamily::Mse,
            arity: 1,
            preprocessor: None,
        }
    }

    fn ce_task(name: &str, kind: TaskKind, arity: usize) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            kind,
            loss: LossFamily::MulticlassCe,
            arity,
            preprocessor: None,
        }
    }

    fn no_attack() -> AttackConfig {
        AttackConfig {
            norm: crate::attack::NormP::Linf,
            epsilon: 0.0,
            step_size: 0.1,
            steps: 1,
            random_start: false,
            selector: TaskSelector::MainOnly,
        }
    }

    fn small_attack() -> AttackConfig {
        AttackConfig {
            norm: crate::attack::NormP::Linf,
            epsilon: 0.05,
            step_size: 0.02,
            steps: 3,
            random_start: true,
            selector: TaskSelector::MainOnly,
        }
    }

    fn toy_data(model: &MultiTaskModel) -> TrainData {
        // 8 linearly separable 2-D points
        let x = vec![
            0.1, 0.1, 0.2, 0.15, 0.15, 0.25, 0.05, 0.2, // class 0 cluster
            0.8, 0.9, 0.9, 0.85, 0.85, 0.75, 0.95, 0.8, // class 1 cluster
        ];
        let fine = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let mut labels = Vec::new();
        for (_, head) in model.enabled_tasks() {
            labels.push(Some(match head.spec.loss {
                LossFamily::MulticlassCe => one_hot(&fine, head.spec.arity).unwrap(),
                _ => fine.iter().map(|&f| f as f64).collect(),
            }));
        }
        TrainData {
            x,
            n: 8,
            dim: 2,
            height: 1,
            width: 2,
            channels: 1,
            labels,
            fine,
            pool: PermutationPool::build(2, 1, 0).unwrap(),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.1).is_err());
    }

    #[test]
    fn curvature_identical_tasks_is_zero() {
        // two identical MSE heads: parallel input gradients
        let mut m = build_model(
            EncoderSpec::new(vec![2, 2]).unwrap(),
            vec![mse_task("fine", TaskKind::Target), mse_task("age", TaskKind::DomainKnowledge)],
            3,
        )
        .unwrap();
        m.tasks[1].params = m.tasks[0].params.clone();
        let x = vec![0.4, 0.7, 0.2, 0.9];
        let y = vec![0.0, 0.0];
        let v = curvature_regularizer(&m, &x, &[y.clone(), y], 1, false).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn curvature_orthogonal_equal_norm_is_one() {
        // identity encoder, heads picking orthogonal coordinates
        let mut m = build_model(
            EncoderSpec::new(vec![2, 2]).unwrap(),
            vec![mse_task("fine", TaskKind::Target), mse_task("age", TaskKind::DomainKnowledge)],
            3,
        )
        .unwrap();
        m.encoder[0].w = vec![1.0, 0.0, 0.0, 1.0];
        m.encoder[0].b = vec![0.0, 0.0];
        m.tasks[0].params.w = vec![1.0, 0.0];
        m.tasks[0].params.b = vec![0.0];
        m.tasks[1].params.w = vec![0.0, 1.0];
        m.tasks[1].params.b = vec![0.0];
        let x = vec![0.5, 0.5];
        let y = vec![0.0];
        let v = curvature_regularizer(&m, &x, &[y.clone(), y], 1, false).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        // matches the diagnostic measure on the same gradients
        let g1 = vec![1.0, 0.0];
        let g2 = vec![0.0, 1.0];
        let xi = crate::metrics::curvature_measure(&g1, &g2).unwrap();
        assert!((v - xi).abs() < 1e-9);
    }

    #[test]
    fn curvature_detached_matches_value() {
        let m = build_model(
            EncoderSpec::new(vec![2, 3]).unwrap(),
            vec![ce_task("fine", TaskKind::Target, 2), ce_task("macro", TaskKind::DomainKnowledge, 2)],
            5,
        )
        .unwrap();
        let x = vec![0.4, 0.7, 0.2, 0.9];
        let labels = vec![one_hot(&[0, 1], 2).unwrap(), one_hot(&[1, 0], 2).unwrap()];
        let full = curvature_regularizer(&m, &x, &labels, 1, false).unwrap();
        let det = curvature_regularizer(&m, &x, &labels, 1, true).unwrap();
        assert!((full - det).abs() < 1e-12);
        assert!(curvature_regularizer(&m, &x, &labels, 0, false).is_err());
    }

    #[test]
    fn curvature_gradient_matches_finite_differences() {
        let mut m = build_model(
            EncoderSpec::new(vec![2, 3]).unwrap(),
            vec![ce_task("fine", TaskKind::Target, 2), ce_task("macro", TaskKind::DomainKnowledge, 2)],
            5,
        )
        .unwrap();
        let x = vec![0.4, 0.7, 0.2, 0.9];
        let labels = vec![one_hot(&[0, 1], 2).unwrap(), one_hot(&[1, 0], 2).unwrap()];
        // analytic gradient of the reg scalar wrt enc0.w via the graph
        let mut g = Graph::new();
        let (xn, _xa, tasks) = build_dual_path(&mut g, &m, 2).unwrap();
        let mut grads = Vec::new();
        for t in tasks.iter().take(2) {
            let total = g.sum(t.clean_per_sample);
            grads.push(g.backward(total, &[xn], true).unwrap()[0]);
        }
        let reg = curvature_node(&mut g, grads[1], grads[0]).unwrap();
        let wleaf = g.leaf_id("enc0.w").unwrap();
        let dreg = g.backward(reg, &[wleaf], false).unwrap()[0];
        for (i, layer) in m.encoder.iter().enumerate() {
            g.bind(&format!("enc{i}.w"), layer.w.clone()).unwrap();
            g.bind(&format!("enc{i}.b"), layer.b.clone()).unwrap();
        }
        for t in &m.tasks {
            g.bind(&format!("head.{}.w", t.spec.name), t.params.w.clone()).unwrap();
            g.bind(&format!("head.{}.b", t.spec.name), t.params.b.clone()).unwrap();
        }
        g.bind("x", x.clone()).unwrap();
        g.bind("xadv", x.clone()).unwrap();
        g.bind("y.fine", labels[0].clone()).unwrap();
        g.bind("y.macro", labels[1].clone()).unwrap();
        g.forward().unwrap();
        let analytic = g.value(dreg).to_vec();
        // central differences on the public evaluator
        let h = 1e-5;
        for k in 0..m.encoder[0].w.len() {
            let orig = m.encoder[0].w[k];
            m.encoder[0].w[k] = orig + h;
            let up = curvature_regularizer(&m, &x, &labels, 1, false).unwrap();
            m.encoder[0].w[k] = orig - h;
            let dn = curvature_regularizer(&m, &x, &labels, 1, false).unwrap();
            m.encoder[0].w[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1e-3);
            assert!(
                (fd - analytic[k]).abs() / scale < 1e-3,
                "k={k}: fd {fd} vs analytic {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn standard_zero_epochs_is_identity() {
        let m = build_model(EncoderSpec::new(vec![2, 4]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 1).unwrap();
        let data = toy_data(&m);
        let mut cfg = TrainConfig::defaults(0);
        cfg.epochs = 0;
        cfg.attack = no_attack();
        let out = train_standard(&m, &data, &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.records.is_empty());
    }

    #[test]
    fn standard_fits_separable_set() {
        let m = build_model(EncoderSpec::new(vec![2, 8]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 2).unwrap();
        let data = toy_data(&m);
        let mut cfg = TrainConfig::defaults(3);
        cfg.epochs = 200;
        cfg.horizon = 200;
        cfg.patience = 200;
        cfg.batch_size = 8;
        cfg.lr0 = 0.5;
        cfg.attack = no_attack();
        let out = train_standard(&m, &data, &data, &cfg).unwrap();
        let report = evaluate_model(&out.model, &data, &no_attack(), 0).unwrap();
        assert_eq!(report.clean_accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let m = build_model(EncoderSpec::new(vec![2, 4]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 4).unwrap();
        let data = toy_data(&m);
        let mut cfg = TrainConfig::defaults(9);
        cfg.epochs = 3;
        cfg.horizon = 3;
        cfg.batch_size = 4;
        cfg.attack = small_attack();
        let a = train_madry(&m, &data, &data, &cfg).unwrap();
        let b = train_madry(&m, &data, &data, &cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn madry_zero_eps_matches_standard_at_double_lr() {
        let m = build_model(EncoderSpec::new(vec![2, 4]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 4).unwrap();
        let data = toy_data(&m);
        let mut cfg = TrainConfig::defaults(9);
        cfg.epochs = 3;
        cfg.horizon = 3;
        cfg.batch_size = 8;
        cfg.lr0 = 0.05;
        cfg.attack = no_attack();
        let madry = train_madry(&m, &data, &data, &cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.lr0 = 0.1;
        let std = train_standard(&m, &data, &data, &cfg2).unwrap();
        for (a, b) in madry.model.encoder_flat().iter().zip(std.model.encoder_flat()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    fn two_task_setup() -> (MultiTaskModel, TrainData) {
        let corpus = generate_synthetic(64, 8, 2, 11).unwrap();
        let m = build_model(
            EncoderSpec::new(vec![64, 12]).unwrap(),
            vec![ce_task("fine", TaskKind::Target, 2), ce_task("macro", TaskKind::DomainKnowledge, 2)],
            6,
        )
        .unwrap();
        let pool = PermutationPool::build(2, 4, 1).unwrap();
        let data = TrainData::from_corpus(&corpus, &m, SplitTag::Train, &pool).unwrap();
        (m, data)
    }

    #[test]
    fn gat_reduction_to_madry_is_bit_exact() {
        let (m, data) = two_task_setup();
        let mut cfg = TrainConfig::defaults(13);
        cfg.epochs = 2;
        cfg.horizon = 2;
        cfg.batch_size = 16;
        cfg.attack = small_attack();
        cfg.regularizer = false;
        cfg.weight_override = Some(vec![1.0, 1.0, 0.0, 0.0]);
        let gat = train_gat(&m, &data, &data, &cfg).unwrap();
        let solo = disable_auxiliary(&m);
        let solo_data = {
            let mut d = data.clone();
            d.labels.truncate(1);
            d
        };
        let mut cfg2 = cfg.clone();
        cfg2.weight_override = None;
        let madry = train_madry(&solo, &solo_data, &solo_data, &cfg2).unwrap();
        assert_eq!(gat.model.encoder_flat(), madry.model.encoder_flat());
        assert_eq!(gat.model.tasks[0].params, madry.model.tasks[0].params);
    }

    #[test]
    fn gat_logs_simplex_weights_with_descent_certificate() {
        let (m, data) = two_task_setup();
        let mut cfg = TrainConfig::defaults(17);
        cfg.epochs = 2;
        cfg.horizon = 2;
        cfg.batch_size = 16;
        cfg.attack = small_attack();
        let out = train_gat(&m, &data, &data, &cfg).unwrap();
        assert!(!out.alpha_history.is_empty());
        for rec in &out.alpha_history {
            // 2 tasks: clean+adv each, plus one regularizer objective
            assert_eq!(rec.alpha.len(), 5);
            let s: f64 = rec.alpha.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(rec.alpha.iter().all(|&a| a >= -1e-12));
            assert!(rec.cert_margin >= -1e-3, "margin {}", rec.cert_margin);
        }
        // the trained model comes back with auxiliaries disabled
        assert_eq!(out.model.enabled_tasks().count(), 1);
    }

    #[test]
    fn gat_requires_two_tasks() {
        let m = build_model(EncoderSpec::new(vec![2, 4]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 4).unwrap();
        let data = toy_data(&m);
        let mut cfg = TrainConfig::defaults(0);
        cfg.attack = small_attack();
        assert!(train_gat(&m, &data, &data, &cfg).is_err());
    }

    #[test]
    fn untrained_model_near_chance() {
        let corpus = generate_synthetic(200, 8, 2, 21).unwrap();
        let m = build_model(EncoderSpec::new(vec![64, 12]).unwrap(), vec![ce_task("fine", TaskKind::Target, 2)], 22).unwrap();
        let pool = PermutationPool::build(2, 4, 1).unwrap();
        let data = TrainData::from_corpus(&corpus, &m, SplitTag::Train, &pool).unwrap();
        let report = evaluate_model(&m, &data, &no_attack(), 0).unwrap();
        assert!((report.clean_accuracy - 0.5).abs() <= 0.1, "{}", report.clean_accuracy);
    }

    #[test]
    fn zero_eps_robust_equals_clean() {
        let (m, data) = two_task_setup();
        let report = evaluate_model(&m, &data, &no_attack(), 3).unwrap();
        assert_eq!(report.clean_accuracy, report.robust_accuracy);
        assert_eq!(report.vulnerability, 0.0);
    }

    #[test]
    fn constant_binary_classifier_has_half_auc() {
        let corpus = generate_synthetic(40, 8, 2, 31).unwrap();
        let mut m = build_model(
            EncoderSpec::new(vec![64, 4]).unwrap(),
            vec![TaskSpec {
                name: "fine".into(),
                kind: TaskKind::Target,
                loss: LossFamily::BinaryCe,
                arity: 1,
                preprocessor: None,
            }],
            1,
        )
        .unwrap();
        m.tasks[0].params.w.iter_mut().for_each(|v| *v = 0.0);
        m.tasks[0].params.b[0] = 0.3;
        let pool = PermutationPool::build(2, 4, 1).unwrap();
        let data = TrainData::from_corpus(&corpus, &m, SplitTag::Train, &pool).unwrap();
        let report = evaluate_model(&m, &data, &no_attack(), 0).unwrap();
        assert_eq!(report.clean_auc, Some(0.5));
    }

    #[test]
    fn ssl_batches_draw_labels_and_transform_inputs() {
        let corpus = generate_synthetic(32, 8, 2, 41).unwrap();
        let m = build_model(
            EncoderSpec::new(vec![64, 8]).unwrap(),
            vec![
                ce_task("fine", TaskKind::Target, 2),
                TaskSpec {
                    name: "rotation".into(),
                    kind: TaskKind::SelfSupervised,
                    loss: LossFamily::MulticlassCe,
                    arity: 4,
                    preprocessor: Some(Preprocessor::Rotation),
                },
            ],
            6,
        )
        .unwrap();
        let pool = PermutationPool::build(2, 4, 1).unwrap();
        let data = TrainData::from_corpus(&corpus, &m, SplitTag::Train, &pool).unwrap();
        assert!(data.labels[1].is_none());
        let idx: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = prepare_batch(&m, &data, &idx, &mut rng).unwrap();
        assert_eq!(batch.labels[1].len(), 8 * 4);
        for row in batch.labels[1].chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        // a short guided run goes through without error
        let mut cfg = TrainConfig::defaults(43);
        cfg.epochs = 1;
        cfg.horizon = 1;
        cfg.batch_size = 16;
        cfg.attack = small_attack();
        train_gat(&m, &data, &data, &cfg).unwrap();
    }
}

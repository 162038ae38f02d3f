//! Multi-task encoder plus parallel single-layer heads, with the
//! attach/disable decoder lifecycle and JSON checkpointing.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Preprocessor;
use crate::error::{GatError, Result};
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Target,
    SelfSupervised,
    DomainKnowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    MulticlassCe,
    BinaryCe,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss: LossFamily,
    /// Class count for classification, 1 for regression.
    pub arity: usize,
    pub preprocessor: Option<Preprocessor>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.loss {
            LossFamily::MulticlassCe if self.arity < 2 => {
                return Err(GatError::Config(format!(
                    "task '{}': multiclass arity {} < 2",
                    self.name, self.arity
                )))
            }
            LossFamily::BinaryCe | LossFamily::Mse if self.arity != 1 => {
                return Err(GatError::Config(format!(
                    "task '{}': single-output loss with arity {}",
                    self.name, self.arity
                )))
            }
            _ => {}
        }
        match (self.kind, self.preprocessor.is_some()) {
            (TaskKind::SelfSupervised, false) => Err(GatError::Config(format!(
                "self-supervised task '{}' needs a preprocessor",
                self.name
            ))),
            (TaskKind::Target | TaskKind::DomainKnowledge, true) => Err(GatError::Config(format!(
                "task '{}' must not carry a preprocessor",
                self.name
            ))),
            _ => Ok(()),
        }
    }

    /// Output width of the head: logits per class for CE over more than
    /// two classes, one logit for binary CE, one scalar for MSE.
    pub fn output_width(&self) -> usize {
        match self.loss {
            LossFamily::MulticlassCe => self.arity,
            LossFamily::BinaryCe | LossFamily::Mse => 1,
        }
    }
}

/// MLP encoder layer widths, input first. Each dense layer is followed by
/// relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub widths: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(GatError::Config("encoder needs input and output widths".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(GatError::Config("zero-width encoder layer".into()));
        }
        Ok(EncoderSpec { widths })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn penultimate_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// Row-major `[fan_in, fan_out]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseParams {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        DenseParams {
            w: (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
            b: (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty() && self.b.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub spec: TaskSpec,
    pub params: DenseParams,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskModel {
    pub encoder_spec: EncoderSpec,
    pub encoder: Vec<DenseParams>,
    pub tasks: Vec<TaskHead>,
}

impl MultiTaskModel {
    pub fn target(&self) -> &TaskHead {
        &self.tasks[0]
    }

    pub fn enabled_tasks(&self) -> impl Iterator<Item = (usize, &TaskHead)> {
        self.tasks.iter().enumerate().filter(|(_, t)| t.enabled)
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.spec.name == name)
            .ok_or_else(|| GatError::Config(format!("no task named '{name}'")))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.iter().map(DenseParams::len).sum::<usize>()
            + self.tasks.iter().map(|t| t.params.len()).sum::<usize>()
    }

    /// Flat copy of the shared encoder parameters, layer order, weights
    /// before bias.
    pub fn encoder_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_encoder_flat(&mut self, flat: &[f64]) -> Result<()> {
        let need: usize = self.encoder.iter().map(DenseParams::len).sum();
        if flat.len() != need {
            return Err(GatError::ShapeMismatch(format!(
                "{} values for encoder of {need} parameters",
                flat.len()
            )));
        }
        let mut at = 0;
        for layer in &mut self.encoder {
            let (wn, bn) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&flat[at..at + wn]);
            at += wn;
            layer.b.copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }
}

pub fn build_model(encoder_spec: EncoderSpec, task_specs: Vec<TaskSpec>, seed: u64) -> Result<MultiTaskModel> {
    if task_specs.is_empty() {
        return Err(GatError::Config("empty task list".into()));
    }
    if task_specs[0].kind != TaskKind::Target {
        return Err(GatError::Config("first task must be the target task".into()));
    }
    for (i, spec) in task_specs.iter().enumerate() {
        spec.validate()?;
        if i > 0 && spec.kind == TaskKind::Target {
            return Err(GatError::Config(format!("second target task '{}'", spec.name)));
        }
        if task_specs[..i].iter().any(|s| s.name == spec.name) {
            return Err(GatError::Config(format!("duplicate task name '{}'", spec.name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = encoder_spec
        .widths
        .windows(2)
        .map(|w| DenseParams::init(w[0], w[1], &mut rng))
        .collect();
    let penult = encoder_spec.penultimate_width();
    let tasks = task_specs
        .into_iter()
        .map(|spec| {
            let params = DenseParams::init(penult, spec.output_width(), &mut rng);
            TaskHead { spec, params, enabled: true }
        })
        .collect();
    Ok(MultiTaskModel { encoder_spec, encoder, tasks })
}

/// Appends a new head at the penultimate layer. The encoder and every
/// existing head are untouched.
pub fn attach_decoder(model: &MultiTaskModel, spec: TaskSpec, seed: u64) -> Result<MultiTaskModel> {
    spec.validate()?;
    if spec.kind == TaskKind::Target {
        return Err(GatError::Config("model already has a target task".into()));
    }
    if model.tasks.iter().any(|t| t.spec.name == spec.name) {
        return Err(GatError::Config(format!("duplicate task name '{}'", spec.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DenseParams::init(model.encoder_spec.penultimate_width(), spec.output_width(), &mut rng);
    let mut out = model.clone();
    out.tasks.push(TaskHead { spec, params, enabled: true });
    Ok(out)
}

/// Disables every head except the target. Idempotent.
pub fn disable_auxiliary(model: &MultiTaskModel) -> MultiTaskModel {
    let mut out = model.clone();
    for (i, t) in out.tasks.iter_mut().enumerate() {
        t.enabled = i == 0;
    }
    out
}

/// A compiled forward graph for one batch size: the input leaf, parameter
/// leaves, and per enabled task its label leaf, raw output, per-sample
/// loss column, and batch-mean loss.
pub struct ModelGraph {
    pub graph: Graph,
    pub batch: usize,
    pub x: NodeId,
    pub task_nodes: Vec<TaskNodes>,
}

#[derive(Debug, Clone, Copy)]
pub struct TaskNodes {
    pub task_index: usize,
    pub label_leaf: NodeId,
    pub output: NodeId,
    pub per_sample_loss: NodeId,
    pub mean_loss: NodeId,
}

pub fn encoder_leaf_names(model: &MultiTaskModel) -> Vec<String> {
    (0..model.encoder.len())
        .flat_map(|i| [format!("enc{i}.w"), format!("enc{i}.b")])
        .collect()
}

pub fn head_leaf_names(model: &MultiTaskModel, task_index: usize) -> [String; 2] {
    let name = &model.tasks[task_index].spec.name;
    [format!("head.{name}.w"), format!("head.{name}.b")]
}

/// Builds the forward graph for all enabled tasks at a fixed batch size.
/// Parameters and labels are leaves; call `bind_parameters` before
/// `forward`.
pub fn build_graph(model: &MultiTaskModel, batch: usize) -> Result<ModelGraph> {
    if batch == 0 {
        return Err(GatError::InvalidArgument("empty batch".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf("x", batch, model.encoder_spec.input_width(), true);
    let mut h = x;
    for (i, widths) in model.encoder_spec.widths.windows(2).enumerate() {
        let w = g.leaf(&format!("enc{i}.w"), widths[0], widths[1], true);
        let b = g.leaf(&format!("enc{i}.b"), 1, widths[1], true);
        let z = g.affine(h, w, b)?;
        h = g.relu(z);
    }
    let penult = model.encoder_spec.penultimate_width();
    let mut task_nodes = Vec::new();
    for (task_index, head) in model.enabled_tasks() {
        let name = &head.spec.name;
        let out_w = head.spec.output_width();
        let w = g.leaf(&format!("head.{name}.w"), penult, out_w, true);
        let b = g.leaf(&format!("head.{name}.b"), 1, out_w, true);
        let output = g.affine(h, w, b)?;
        let label_cols = match head.spec.loss {
            LossFamily::MulticlassCe => head.spec.arity,
            LossFamily::BinaryCe | LossFamily::Mse => 1,
        };
        let label_leaf = g.leaf(&format!("y.{name}"), batch, label_cols, false);
        let per_sample_loss = match head.spec.loss {
            LossFamily::MulticlassCe => g.softmax_cross_entropy(output, label_leaf)?,
            LossFamily::BinaryCe => g.sigmoid_binary_cross_entropy(output, label_leaf)?,
            LossFamily::Mse => g.squared_error(output, label_leaf)?,
        };
        let mean_loss = g.mean(per_sample_loss);
        task_nodes.push(TaskNodes { task_index, label_leaf, output, per_sample_loss, mean_loss });
    }
    Ok(ModelGraph { graph: g, batch, x, task_nodes })
}

impl ModelGraph {
    pub fn bind_parameters(&mut self, model: &MultiTaskModel) -> Result<()> {
        for (i, layer) in model.encoder.iter().enumerate() {
            self.graph.bind(&format!("enc{i}.w"), layer.w.clone())?;
            self.graph.bind(&format!("enc{i}.b"), layer.b.clone())?;
        }
        for nodes in &self.task_nodes {
            let head = &model.tasks[nodes.task_index];
            self.graph.bind(&format!("head.{}.w", head.spec.name), head.params.w.clone())?;
            self.graph.bind(&format!("head.{}.b", head.spec.name), head.params.b.clone())?;
        }
        Ok(())
    }

    pub fn bind_input(&mut self, x: &[f64]) -> Result<()> {
        self.graph.bind("x", x.to_vec())
    }

    pub fn bind_labels(&mut self, task_name: &str, labels: Vec<f64>) -> Result<()> {
        self.graph.bind(&format!("y.{task_name}"), labels)
    }

    pub fn nodes_for(&self, task_index: usize) -> Result<&TaskNodes> {
        self.task_nodes
            .iter()
            .find(|t| t.task_index == task_index)
            .ok_or_else(|| GatError::Config(format!("task {task_index} not in graph (disabled?)")))
    }
}

/// One-hot encodes integer class labels into a flat `[n, arity]` block.
pub fn one_hot(labels: &[usize], arity: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * arity];
    for (i, &c) in labels.iter().enumerate() {
        if c >= arity {
            return Err(GatError::InvalidArgument(format!("label {c} >= arity {arity}")));
        }
        out[i * arity + c] = 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub task_index: usize,
    pub name: String,
    pub outputs: Vec<f64>,
    pub loss: f64,
}

/// Runs one forward pass and reports each enabled task's raw outputs and
/// batch-mean loss. `labels` holds one flat column block per enabled
/// task, in task order.
pub fn forward_and_losses(model: &MultiTaskModel, x: &[f64], labels: &[Vec<f64>]) -> Result<Vec<TaskEval>> {
    let d = model.encoder_spec.input_width();
    if x.is_empty() || x.len() % d != 0 {
        return Err(GatError::ShapeMismatch(format!("{} inputs for width {d}", x.len())));
    }
    let batch = x.len() / d;
    let enabled: Vec<usize> = model.enabled_tasks().map(|(i, _)| i).collect();
    if labels.len() != enabled.len() {
        return Err(GatError::InvalidArgument(format!(
            "{} label blocks for {} enabled tasks",
            labels.len(),
            enabled.len()
        )));
    }
    let mut mg = build_graph(model, batch)?;
    mg.bind_parameters(model)?;
    mg.bind_input(x)?;
    for (nodes, block) in mg.task_nodes.iter().zip(labels) {
        let head = &model.tasks[nodes.task_index];
        mg.graph.bind(&format!("y.{}", head.spec.name), block.clone())?;
    }
    mg.graph.forward()?;
    Ok(mg
        .task_nodes
        .iter()
        .map(|nodes| TaskEval {
            task_index: nodes.task_index,
            name: model.tasks[nodes.task_index].spec.name.clone(),
            outputs: mg.graph.value(nodes.output).to_vec(),
            loss: mg.graph.scalar_value(nodes.mean_loss),
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: MultiTaskModel,
}

pub fn save_checkpoint(model: &MultiTaskModel, path: &Path) -> Result<()> {
    let ck = Checkpoint { version: 1, model: model.clone() };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MultiTaskModel> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.version != 1 {
        return Err(GatError::Config(format!("unknown checkpoint version {}", ck.version)));
    }
    Ok(ck.model)
}

pub fn target_task_spec(name: &str, classes: usize) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        kind: TaskKind::Target,
        loss: LossFamily::MulticlassCe,
        arity: classes,
        preprocessor: None,
    }
}

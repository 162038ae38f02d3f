//! FGSM and PGD adversarial example generation with a selectable
//! attacked-task set, plus empirical and first-order vulnerability
//! estimators and the two-task vulnerability predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GatError, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{build_graph, MultiTaskModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    L2,
    Linf,
}

impl NormP {
    /// Dual exponent q with 1/p + 1/q = 1.
    pub fn dual_q(self) -> f64 {
        match self {
            NormP::L2 => 2.0,
            NormP::Linf => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSelector {
    MainOnly,
    AllTasks,
    AuxiliaryOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: NormP,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub selector: TaskSelector,
}

impl AttackConfig {
    /// Paper-style PGD-10 under L-infinity.
    pub fn pgd10(selector: TaskSelector) -> Self {
        AttackConfig {
            norm: NormP::Linf,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: true,
            selector,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(GatError::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(GatError::Config(format!("step_size {} must be > 0", self.step_size)));
        }
        if self.steps == 0 {
            return Err(GatError::Config("steps must be >= 1".into()));
        }
        if (self.steps as f64) * self.step_size < self.epsilon {
            return Err(GatError::Config(format!(
                "steps*step_size = {} cannot reach epsilon = {}",
                self.steps as f64 * self.step_size,
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBatch {
    pub original: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub delta: Vec<f64>,
    /// `(task_index, mean loss)` per enabled task.
    pub losses_before: Vec<(usize, f64)>,
    pub losses_after: Vec<(usize, f64)>,
}

/// A compiled loss surface for attacks: the input leaf, per-task
/// per-sample loss columns, the (optionally weighted) sum of the selected
/// tasks' losses, and its gradient with respect to the input.
pub struct AttackSurface {
    pub graph: Graph,
    pub batch: usize,
    pub dim: usize,
    pub x: NodeId,
    /// `(task_index, per_sample_loss [n,1], mean_loss)` per enabled task.
    pub tasks: Vec<(usize, NodeId, NodeId)>,
    /// Indices into `tasks` that the attack targets.
    pub selected: Vec<usize>,
    /// `[n,1]` weighted sum of selected per-sample losses.
    pub selected_per_sample: NodeId,
    /// `[n,d]` gradient of the summed selected loss wrt x.
    pub grad_x: NodeId,
}

impl AttackSurface {
    /// Assembles the selected-loss sum and its input gradient on top of an
    /// existing graph. `weights` (per selected task) default to 1.
    pub fn assemble(
        mut graph: Graph,
        x: NodeId,
        tasks: Vec<(usize, NodeId, NodeId)>,
        selected: Vec<usize>,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        if selected.is_empty() {
            return Err(GatError::Config("attack selects no task".into()));
        }
        if let Some(w) = weights {
            if w.len() != selected.len() {
                return Err(GatError::ShapeMismatch(format!(
                    "{} weights for {} selected tasks",
                    w.len(),
                    selected.len()
                )));
            }
        }
        let (batch, dim) = graph.shape(x);
        let mut acc: Option<NodeId> = None;
        for (k, &sel) in selected.iter().enumerate() {
            let (_, per_sample, _) = *tasks
                .get(sel)
                .ok_or_else(|| GatError::Config(format!("selected task slot {sel} out of range")))?;
            let term = match weights {
                Some(w) => graph.scale(per_sample, w[k]),
                None => per_sample,
            };
            acc = Some(match acc {
                Some(a) => graph.add(a, term)?,
                None => term,
            });
        }
        let selected_per_sample = acc.unwrap();
        let total = graph.sum(selected_per_sample);
        let grad_x = graph.backward(total, &[x], false)?[0];
        Ok(AttackSurface {
            graph,
            batch,
            dim,
            x,
            tasks,
            selected,
            selected_per_sample,
            grad_x,
        })
    }

    /// Builds the surface from a multi-task model; parameters and labels
    /// for all enabled tasks are bound. `labels` holds one flat block per
    /// enabled task, in task order.
    pub fn from_model(
        model: &MultiTaskModel,
        selector: TaskSelector,
        batch: usize,
        labels: &[Vec<f64>],
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let mut mg = build_graph(model, batch)?;
        mg.bind_parameters(model)?;
        if labels.len() != mg.task_nodes.len() {
            return Err(GatError::InvalidArgument(format!(
                "{} label blocks for {} enabled tasks",
                labels.len(),
                mg.task_nodes.len()
            )));
        }
        for (nodes, block) in mg.task_nodes.iter().zip(labels) {
            let name = &model.tasks[nodes.task_index].spec.name;
            mg.graph.bind(&format!("y.{name}"), block.clone())?;
        }
        let tasks: Vec<(usize, NodeId, NodeId)> = mg
            .task_nodes
            .iter()
            .map(|t| (t.task_index, t.per_sample_loss, t.mean_loss))
            .collect();
        let selected: Vec<usize> = match selector {
            TaskSelector::MainOnly => tasks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.0 == 0)
                .map(|(slot, _)| slot)
                .collect(),
            TaskSelector::AllTasks => (0..tasks.len()).collect(),
            TaskSelector::AuxiliaryOnly => tasks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.0 != 0)
                .map(|(slot, _)| slot)
                .collect(),
        };
        if selected.is_empty() {
            return Err(GatError::Config(format!("selector {selector:?} matches no enabled task")));
        }
        AttackSurface::assemble(mg.graph, mg.x, tasks, selected, weights)
    }

    /// Forward pass at the given input; returns per-sample gradient rows.
    pub fn input_gradient(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.graph.bind("x", x.to_vec())?;
        self.graph.forward()?;
        Ok(self.graph.value(self.grad_x).to_vec())
    }

    pub fn mean_losses_at(&mut self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.graph.bind("x", x.to_vec())?;
        self.graph.forward()?;
        Ok(self
            .tasks
            .iter()
            .map(|&(idx, _, mean)| (idx, self.graph.scalar_value(mean)))
            .collect())
    }

    /// Per-sample selected-loss column at the given input.
    pub fn selected_losses_at(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.graph.bind("x", x.to_vec())?;
        self.graph.forward()?;
        Ok(self.graph.value(self.selected_per_sample).to_vec())
    }
}

fn project_delta(delta: &mut [f64], norm: NormP, eps: f64, dim: usize) {
    match norm {
        NormP::Linf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-eps, eps);
            }
        }
        NormP::L2 => {
            for row in delta.chunks_mut(dim) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > eps {
                    let s = eps / n;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
}

fn clamp_adversarial(original: &[f64], delta: &mut [f64]) -> Vec<f64> {
    original
        .iter()
        .zip(delta.iter_mut())
        .map(|(&o, d)| {
            let v = (o + *d).clamp(0.0, 1.0);
            *d = v - o;
            v
        })
        .collect()
}

fn finish_batch(
    surface: &mut AttackSurface,
    original: &[f64],
    mut delta: Vec<f64>,
    norm: NormP,
    eps: f64,
    losses_before: Vec<(usize, f64)>,
) -> Result<PerturbedBatch> {
    project_delta(&mut delta, norm, eps, surface.dim);
    let adversarial = clamp_adversarial(original, &mut delta);
    let losses_after = surface.mean_losses_at(&adversarial)?;
    Ok(PerturbedBatch {
        original: original.to_vec(),
        adversarial,
        delta,
        losses_before,
        losses_after,
    })
}

/// Single signed-gradient step: x_hat = clamp(x + eps * sign(grad), 0, 1).
pub fn fgsm_on_surface(surface: &mut AttackSurface, x: &[f64], eps: f64) -> Result<PerturbedBatch> {
    if eps < 0.0 {
        return Err(GatError::Config(format!("epsilon {eps} must be >= 0")));
    }
    let losses_before = surface.mean_losses_at(x)?;
    let grad = surface.input_gradient(x)?;
    let delta: Vec<f64> = grad.iter().map(|&g| eps * sign(g)).collect();
    finish_batch(surface, x, delta, NormP::Linf, eps, losses_before)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterated signed-gradient ascent with per-step projection onto the
/// epsilon-ball around x and clamp to [0,1].
pub fn pgd_on_surface(
    surface: &mut AttackSurface,
    x: &[f64],
    config: &AttackConfig,
    seed: u64,
) -> Result<PerturbedBatch> {
    config.validate()?;
    let losses_before = surface.mean_losses_at(x)?;
    let mut delta = vec![0.0; x.len()];
    if config.random_start && config.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in delta.iter_mut() {
            *d = rng.gen_range(-config.epsilon..=config.epsilon);
        }
        project_delta(&mut delta, config.norm, config.epsilon, surface.dim);
    }
    for _ in 0..config.steps {
        let mut x_hat: Vec<f64> = x.iter().zip(&delta).map(|(&o, &d)| (o + d).clamp(0.0, 1.0)).collect();
        for ((d, &o), &h) in delta.iter_mut().zip(x).zip(&x_hat) {
            *d = h - o;
        }
        let grad = surface.input_gradient(&x_hat)?;
        for (d, &g) in delta.iter_mut().zip(&grad) {
            *d += config.step_size * sign(g);
        }
        project_delta(&mut delta, config.norm, config.epsilon, surface.dim);
        x_hat.clear();
    }
    finish_batch(surface, x, delta, config.norm, config.epsilon, losses_before)
}

pub fn fgsm_perturb(
    model: &MultiTaskModel,
    selector: TaskSelector,
    x: &[f64],
    labels: &[Vec<f64>],
    eps: f64,
) -> Result<PerturbedBatch> {
    let batch = batch_size(model, x)?;
    let mut surface = AttackSurface::from_model(model, selector, batch, labels, None)?;
    fgsm_on_surface(&mut surface, x, eps)
}

pub fn pgd_attack(
    model: &MultiTaskModel,
    selector: TaskSelector,
    x: &[f64],
    labels: &[Vec<f64>],
    config: &AttackConfig,
    seed: u64,
) -> Result<PerturbedBatch> {
    let batch = batch_size(model, x)?;
    let mut surface = AttackSurface::from_model(model, selector, batch, labels, None)?;
    pgd_on_surface(&mut surface, x, config, seed)
}

fn batch_size(model: &MultiTaskModel, x: &[f64]) -> Result<usize> {
    let d = model.encoder_spec.input_width();
    if x.is_empty() || x.len() % d != 0 {
        return Err(GatError::ShapeMismatch(format!("{} inputs for width {d}", x.len())));
    }
    Ok(x.len() / d)
}

/// Mean per-sample absolute increase of the selected joint loss after the
/// configured PGD attack.
pub fn empirical_vulnerability(surface: &mut AttackSurface, x: &[f64], config: &AttackConfig, seed: u64) -> Result<f64> {
    if x.is_empty() {
        return Err(GatError::InvalidArgument("empty dataset".into()));
    }
    let before = surface.selected_losses_at(x)?;
    let batch = pgd_on_surface(surface, x, config, seed)?;
    let after = surface.selected_losses_at(&batch.adversarial)?;
    Ok(before
        .iter()
        .zip(&after)
        .map(|(&b, &a)| (a - b).abs())
        .sum::<f64>()
        / before.len() as f64)
}

/// First-order estimate: eps times the dataset mean of the dual norm of
/// the per-sample input gradient of the selected joint loss.
pub fn first_order_vulnerability(surface: &mut AttackSurface, x: &[f64], eps: f64, q: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(GatError::InvalidArgument("empty dataset".into()));
    }
    if !(q == 1.0 || q == 2.0) {
        return Err(GatError::Config(format!("dual exponent q = {q} not supported")));
    }
    let grad = surface.input_gradient(x)?;
    let mut acc = 0.0;
    for row in grad.chunks(surface.dim) {
        acc += if q == 1.0 {
            row.iter().map(|v| v.abs()).sum::<f64>()
        } else {
            row.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
    }
    Ok(eps * acc / (grad.len() / surface.dim) as f64)
}

/// Two-task vulnerability predictor
/// sqrt(1 + 2 a1 a2 Cov / (a1^2 s1^2 + a2^2 s2^2)) with moments taken as
/// raw dataset-mean inner products of per-sample gradients (the zero-mean
/// assumption of the derivation, so no mean subtraction).
pub fn theorem3_predictor(a1: f64, a2: f64, grads: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if a1 <= 0.0 || a2 <= 0.0 {
        return Err(GatError::InvalidArgument(format!("weights ({a1}, {a2}) must be positive")));
    }
    if grads.len() < 2 {
        return Err(GatError::InvalidArgument("need at least 2 gradient samples".into()));
    }
    let n = grads.len() as f64;
    let mut cov = 0.0;
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    for (g1, g2) in grads {
        if g1.len() != g2.len() {
            return Err(GatError::ShapeMismatch(format!(
                "gradient pair lengths {} and {}",
                g1.len(),
                g2.len()
            )));
        }
        cov += g1.iter().zip(g2).map(|(a, b)| a * b).sum::<f64>();
        var1 += g1.iter().map(|v| v * v).sum::<f64>();
        var2 += g2.iter().map(|v| v * v).sum::<f64>();
    }
    cov /= n;
    var1 /= n;
    var2 /= n;
    let denom = a1 * a1 * var1 + a2 * a2 * var2;
    if denom == 0.0 {
        return Err(GatError::Degenerate("all-zero task gradients".into()));
    }
    // Cauchy-Schwarz keeps the radicand nonnegative up to rounding
    Ok((1.0 + 2.0 * a1 * a2 * cov / denom).max(0.0).sqrt())
}

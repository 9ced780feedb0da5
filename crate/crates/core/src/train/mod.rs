//! Per-axis projection-head training over frozen pooled features.
//!
//! Each axis is trained on its own with one of three signals: cosine
//! distillation from a teacher embedding (with a learned near-orthogonal
//! alignment matrix when teacher and axis dimensions differ), InfoNCE over
//! explicit positive pairs, or a supervised contrastive loss over in-batch
//! label matches. Optimization is plain mini-batch gradient descent with
//! momentum and is bit-reproducible for a fixed seed.

mod data;
mod gradcheck;
mod head;
mod loss;
mod objective;
mod sampler;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use data::{TrainExample, TrainSet};
pub use gradcheck::{finite_difference_check, GradCheck, DEFAULT_COORDINATES, GRAD_FLOOR};
pub use head::{AlignmentMatrix, PooledFeature, ProjectionHead};
pub use loss::{
    align_teacher, distill_forward_backward, distill_loss, infonce_forward_backward, infonce_logits,
    infonce_loss, infonce_loss_strict, normalize_backward, orthogonality_penalty,
    orthogonality_penalty_grad, polar_project, supcon_forward_backward, supcon_loss, DistillGrad,
    PairGrad, SetGrad, DEFAULT_TEMPERATURE,
};
pub use objective::{evaluate, BatchInput, HeadParams, LossSettings, Objective, ObjectiveOutput};
pub use sampler::{sample_batch, BatchSampler, RETRY_BUDGET};

use crate::embedding::{AxisSchema, PartitionedEmbedding};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Label key that supervises an axis when none is configured.
pub fn default_label_key(axis: &str) -> &str {
    match axis {
        "semantic" => "sentence",
        "speaker_id" => "speaker",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub axis: String,
    pub objective: Objective,
    /// Output dimension of the head. Distillation defaults to the teacher
    /// dimension; contrastive objectives require it.
    pub dim: Option<usize>,
    /// Label field used as the trained attribute (defaults per axis, see
    /// [`default_label_key`]).
    pub label_key: Option<String>,
    pub temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub orthogonality_lambda: f64,
    pub bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            axis: "semantic".into(),
            objective: Objective::Distill,
            dim: None,
            label_key: None,
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            orthogonality_lambda: 1.0,
            bias: false,
        }
    }
}

impl TrainConfig {
    pub fn label_key(&self) -> &str {
        self.label_key
            .as_deref()
            .unwrap_or_else(|| default_label_key(&self.axis))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.axis.is_empty() {
            return bad("axis name is empty".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.orthogonality_lambda >= 0.0 && self.orthogonality_lambda.is_finite()) {
            return bad(format!(
                "orthogonality_lambda must be non-negative, got {}",
                self.orthogonality_lambda
            ));
        }
        let min_batch = if self.objective == Objective::Distill { 1 } else { 2 };
        if self.batch_size < min_batch {
            return bad(format!(
                "batch_size must be at least {min_batch} for {:?}, got {}",
                self.objective, self.batch_size
            ));
        }
        if self.dim == Some(0) {
            return bad("dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub log: Vec<TrainLogEntry>,
    /// ‖AᵀA − I‖_F before the final polar projection, if an alignment
    /// matrix was learned.
    pub alignment_error_before_projection: Option<f64>,
}

impl TrainOutcome {
    pub fn alignment(&self) -> Option<&AlignmentMatrix> {
        self.head.alignment.as_ref()
    }
}

/// One JSON object per line: `{step, loss, penalty, grad_norm}`.
pub fn write_log(log: &[TrainLogEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Resolved training problem: which items take part and the head shape.
struct Plan {
    pool: Vec<usize>,
    axis_dim: usize,
    teacher_dim: Option<usize>,
}

fn plan(config: &TrainConfig, data: &TrainSet) -> Result<Plan> {
    let all = 0..data.len();
    match config.objective {
        Objective::Distill => {
            let pool: Vec<usize> = all
                .filter(|&i| data.example(i).teachers.contains_key(&config.axis))
                .collect();
            let Some(&first) = pool.first() else {
                return Err(Error::MissingSupervision(format!(
                    "no item has a teacher embedding for axis `{}`",
                    config.axis
                )));
            };
            let teacher_dim = data.example(first).teachers[&config.axis].len();
            for &i in &pool {
                let t = &data.example(i).teachers[&config.axis];
                if t.len() != teacher_dim {
                    return Err(Error::dim(
                        format!("teacher of `{}`", data.feature(i).id),
                        teacher_dim,
                        t.len(),
                    ));
                }
                if !(crate::embedding::l2_norm(t) >= crate::embedding::ZERO_NORM) {
                    return Err(Error::MissingSupervision(format!(
                        "teacher of `{}` for axis `{}` is a zero vector",
                        data.feature(i).id,
                        config.axis
                    )));
                }
            }
            Ok(Plan {
                pool,
                axis_dim: config.dim.unwrap_or(teacher_dim),
                teacher_dim: Some(teacher_dim),
            })
        }
        Objective::InfoncePairs | Objective::SupconLabels => {
            let axis_dim = config.dim.ok_or_else(|| {
                Error::ConfigInvalid(format!(
                    "axis dimension is required for the {:?} objective",
                    config.objective
                ))
            })?;
            let key = config.label_key();
            let pool: Vec<usize> = if config.objective == Objective::InfoncePairs {
                all.filter(|&i| data.positive_of(i).is_some()).collect()
            } else {
                all.filter(|&i| data.example(i).labels.contains_key(key)).collect()
            };
            if pool.len() < 2 {
                return Err(Error::MissingSupervision(match config.objective {
                    Objective::InfoncePairs => "fewer than two items have a positive partner".into(),
                    _ => format!("fewer than two items carry label `{key}`"),
                }));
            }
            Ok(Plan {
                pool,
                axis_dim,
                teacher_dim: None,
            })
        }
    }
}

/// Seeded initial parameters. Head entries are uniform in ±1/√D_enc; a
/// learned alignment matrix starts as the polar factor of a uniform draw in
/// ±1/√D_teacher, so it begins with orthonormal rows (or columns).
pub fn init_params(config: &TrainConfig, feature_dim: usize, axis_dim: usize, teacher_dim: Option<usize>) -> HeadParams {
    let mut rng = stream(config.seed, Stream::Init);
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let weight = DMatrix::from_fn(axis_dim, feature_dim, |_, _| rng.random_range(-bound..=bound));
    let bias = config.bias.then(|| DVector::zeros(axis_dim));
    let alignment = teacher_dim.filter(|&t| t != axis_dim).map(|t| {
        let b = 1.0 / (t as f64).sqrt();
        polar_project(&DMatrix::from_fn(axis_dim, t, |_, _| rng.random_range(-b..=b)))
    });
    HeadParams {
        weight,
        bias,
        alignment,
    }
}

fn column(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Builds the optimizer input for the items at `batch`.
pub fn build_batch(config: &TrainConfig, data: &TrainSet, batch: &[usize]) -> BatchInput {
    let feats = |idx: &mut dyn Iterator<Item = usize>| -> Vec<DVector<f64>> {
        idx.map(|i| column(&data.feature(i).vector)).collect()
    };
    match config.objective {
        Objective::Distill => BatchInput::Distill {
            features: feats(&mut batch.iter().copied()),
            teachers: batch
                .iter()
                .map(|&i| column(&data.example(i).teachers[&config.axis]))
                .collect(),
        },
        Objective::InfoncePairs => BatchInput::Pairs {
            anchors: feats(&mut batch.iter().copied()),
            positives: feats(&mut batch.iter().map(|&i| data.positive_of(i).expect("pool has partners"))),
        },
        Objective::SupconLabels => BatchInput::Labels {
            features: feats(&mut batch.iter().copied()),
            labels: batch
                .iter()
                .map(|&i| data.example(i).labels[config.label_key()].clone())
                .collect(),
        },
    }
}

pub fn head_from_params(axis: &str, params: HeadParams) -> ProjectionHead {
    ProjectionHead {
        axis: axis.to_string(),
        weight: params.weight,
        bias: params.bias,
        alignment: params.alignment.map(AlignmentMatrix),
    }
}

/// Trains one projection head.
pub fn train_axis(config: &TrainConfig, data: &TrainSet) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = plan(config, data)?;
    let mut params = init_params(config, data.feature_dim(), plan.axis_dim, plan.teacher_dim);
    let settings = LossSettings {
        temperature: config.temperature,
        orthogonality_lambda: config.orthogonality_lambda,
    };
    let sampler = BatchSampler::new(data, plan.pool.clone(), Some(config.label_key()), config.batch_size);
    let mut rng = stream(config.seed, Stream::Sampler);
    let mut velocity = params.zeros_like();
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = sampler.sample(data, &mut rng);
        let input = build_batch(config, data, &batch);
        let out = evaluate(&params, &input, &settings)?;
        let grad_norm = out.grad.norm();
        if !out.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.push(TrainLogEntry {
            step,
            loss: out.loss,
            penalty: out.penalty,
            grad_norm,
        });
        velocity.scale_add(config.momentum, &out.grad);
        params.descend(config.learning_rate, &velocity);
    }

    let alignment_error_before_projection = params
        .alignment
        .as_ref()
        .map(|a| orthogonality_penalty(a).sqrt());
    if config.steps > 0 {
        if let Some(a) = &mut params.alignment {
            *a = polar_project(a);
        }
    }
    let head = head_from_params(&config.axis, params);
    if !head.is_finite() {
        return Err(Error::NonFiniteLoss { step: config.steps });
    }
    check_degenerate(&head, data, &sampler, config.seed)?;
    Ok(TrainOutcome {
        head,
        log,
        alignment_error_before_projection,
    })
}

/// Fails when more than half of a validation batch projects to zero.
fn check_degenerate(head: &ProjectionHead, data: &TrainSet, sampler: &BatchSampler, seed: u64) -> Result<()> {
    let mut rng = stream(seed, Stream::Validation);
    let batch = sampler.sample(data, &mut rng);
    let degenerate: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| head.project(data.feature(i)).is_err())
        .collect();
    if degenerate.len() * 2 > batch.len() {
        return Err(Error::DegenerateHead {
            axis: head.axis.clone(),
            item: data.feature(degenerate[0]).id.clone(),
        });
    }
    Ok(())
}

/// Axis schema formed by a list of heads, in order.
pub fn schema_for_heads(heads: &[ProjectionHead]) -> Result<AxisSchema> {
    AxisSchema::new(heads.iter().map(|h| (h.axis.clone(), h.output_dim())))
}

/// Applies every head to a feature and concatenates the unit outputs.
pub fn embed(heads: &[ProjectionHead], schema: &Arc<AxisSchema>, feature: &PooledFeature) -> Result<PartitionedEmbedding> {
    let parts = heads
        .iter()
        .map(|h| h.project(feature))
        .collect::<Result<Vec<_>>>()?;
    PartitionedEmbedding::concat(schema.clone(), &parts)
}

//! Batch objectives composed with the projection head, with gradients with
//! respect to the head parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embedding::ZERO_NORM;
use crate::error::{Error, Result};
use crate::train::loss::{
    distill_forward_backward, infonce_forward_backward, normalize_backward, orthogonality_penalty,
    orthogonality_penalty_grad, supcon_forward_backward,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cosine distillation against a precomputed teacher embedding.
    Distill,
    /// InfoNCE over explicit positive pairs.
    InfoncePairs,
    /// Supervised contrastive loss over in-batch label matches.
    SupconLabels,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "distill" => Ok(Self::Distill),
            "infonce_pairs" | "infonce" => Ok(Self::InfoncePairs),
            "supcon_labels" | "supcon" => Ok(Self::SupconLabels),
            _ => Err(format!(
                "unknown objective `{s}` (expected distill, infonce_pairs or supcon_labels)"
            )),
        }
    }
}

/// Trainable parameters of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub alignment: Option<DMatrix<f64>>,
}

impl HeadParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: self.bias.as_ref().map(|b| DVector::zeros(b.len())),
            alignment: self.alignment.as_ref().map(|a| DMatrix::zeros(a.nrows(), a.ncols())),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
            + self.bias.as_ref().map_or(0, |b| b.len())
            + self.alignment.as_ref().map_or(0, |a| a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major W, then bias, then row-major alignment.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        push_row_major(&mut out, &self.weight);
        if let Some(b) = &self.bias {
            out.extend(b.iter());
        }
        if let Some(a) = &self.alignment {
            push_row_major(&mut out, a);
        }
        out
    }

    /// Inverse of [`HeadParams::flatten`], shaped like `self`.
    pub fn unflatten(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let (w, rest) = flat.split_at(self.weight.len());
        let weight = DMatrix::from_row_slice(self.weight.nrows(), self.weight.ncols(), w);
        let (bias, rest) = match &self.bias {
            Some(b) => {
                let (head, tail) = rest.split_at(b.len());
                (Some(DVector::from_column_slice(head)), tail)
            }
            None => (None, rest),
        };
        let alignment = self
            .alignment
            .as_ref()
            .map(|a| DMatrix::from_row_slice(a.nrows(), a.ncols(), rest));
        Self {
            weight,
            bias,
            alignment,
        }
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self = self * scale + other`
    pub(crate) fn scale_add(&mut self, scale: f64, other: &Self) {
        self.weight.zip_apply(&other.weight, |a, b| *a = *a * scale + b);
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            a.zip_apply(b, |x, y| *x = *x * scale + y);
        }
        if let (Some(a), Some(b)) = (&mut self.alignment, &other.alignment) {
            a.zip_apply(b, |x, y| *x = *x * scale + y);
        }
    }

    /// `self -= lr * step`
    pub(crate) fn descend(&mut self, lr: f64, step: &Self) {
        self.weight.zip_apply(&step.weight, |a, b| *a -= lr * b);
        if let (Some(a), Some(b)) = (&mut self.bias, &step.bias) {
            a.zip_apply(b, |x, y| *x -= lr * y);
        }
        if let (Some(a), Some(b)) = (&mut self.alignment, &step.alignment) {
            a.zip_apply(b, |x, y| *x -= lr * y);
        }
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

/// Materialized inputs for one optimization step.
#[derive(Clone, Debug)]
pub enum BatchInput {
    Distill {
        features: Vec<DVector<f64>>,
        teachers: Vec<DVector<f64>>,
    },
    Pairs {
        anchors: Vec<DVector<f64>>,
        positives: Vec<DVector<f64>>,
    },
    Labels {
        features: Vec<DVector<f64>>,
        labels: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub temperature: f64,
    pub orthogonality_lambda: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    /// The objective proper.
    pub loss: f64,
    /// Unweighted orthogonality penalty (0 without an alignment matrix).
    pub penalty: f64,
    /// `loss + λ · penalty`, the quantity the gradient belongs to.
    pub total: f64,
    pub grad: HeadParams,
    /// Items whose projection vanished and were left out.
    pub skipped: usize,
}

struct Projected {
    unit: DVector<f64>,
    norm: f64,
}

fn project(params: &HeadParams, x: &DVector<f64>) -> Option<Projected> {
    let mut z = &params.weight * x;
    if let Some(b) = &params.bias {
        z += b;
    }
    let norm = z.norm();
    (norm >= ZERO_NORM).then(|| Projected {
        unit: z / norm,
        norm,
    })
}

/// Accumulates `dL/dz` for input `x` into the head gradient.
fn backprop(grad: &mut HeadParams, x: &DVector<f64>, p: &Projected, d_unit: &DVector<f64>, scale: f64) {
    let dz = normalize_backward(&p.unit, p.norm, d_unit) * scale;
    grad.weight.ger(1.0, &dz, x, 1.0);
    if let Some(b) = &mut grad.bias {
        *b += &dz;
    }
}

/// Loss and gradient of one batch under `params`.
pub fn evaluate(params: &HeadParams, batch: &BatchInput, settings: &LossSettings) -> Result<ObjectiveOutput> {
    let mut grad = params.zeros_like();
    let skipped;
    let loss = match batch {
        BatchInput::Distill { features, teachers } => {
            let kept: Vec<(usize, Projected)> = features
                .iter()
                .enumerate()
                .filter_map(|(i, x)| project(params, x).map(|p| (i, p)))
                .collect();
            skipped = features.len() - kept.len();
            let scale = if kept.is_empty() { 0.0 } else { 1.0 / kept.len() as f64 };
            let mut total = 0.0;
            for (i, p) in &kept {
                let g = distill_forward_backward(&p.unit, &teachers[*i], params.alignment.as_ref())?;
                total += g.loss;
                backprop(&mut grad, &features[*i], p, &g.d_student, scale);
                if let (Some(ga), Some(da)) = (&mut grad.alignment, &g.d_alignment) {
                    *ga += da * scale;
                }
            }
            total * scale
        }
        BatchInput::Pairs { anchors, positives } => {
            let kept: Vec<(usize, Projected, Projected)> = anchors
                .iter()
                .zip(positives)
                .enumerate()
                .filter_map(|(i, (a, p))| Some((i, project(params, a)?, project(params, p)?)))
                .collect();
            skipped = anchors.len() - kept.len();
            if kept.is_empty() {
                0.0
            } else {
                let ua: Vec<_> = kept.iter().map(|(_, a, _)| a.unit.clone()).collect();
                let up: Vec<_> = kept.iter().map(|(_, _, p)| p.unit.clone()).collect();
                let g = infonce_forward_backward(&ua, &up, settings.temperature, false)?;
                for (k, (i, a, p)) in kept.iter().enumerate() {
                    backprop(&mut grad, &anchors[*i], a, &g.d_anchors[k], 1.0);
                    backprop(&mut grad, &positives[*i], p, &g.d_positives[k], 1.0);
                }
                g.loss
            }
        }
        BatchInput::Labels { features, labels } => {
            let kept: Vec<(usize, Projected)> = features
                .iter()
                .enumerate()
                .filter_map(|(i, x)| project(params, x).map(|p| (i, p)))
                .collect();
            skipped = features.len() - kept.len();
            let units: Vec<_> = kept.iter().map(|(_, p)| p.unit.clone()).collect();
            let labs: Vec<&str> = kept.iter().map(|(i, _)| labels[*i].as_str()).collect();
            match supcon_forward_backward(&units, &labs, settings.temperature) {
                Ok(g) => {
                    for (k, (i, p)) in kept.iter().enumerate() {
                        backprop(&mut grad, &features[*i], p, &g.d_embeddings[k], 1.0);
                    }
                    g.loss
                }
                // a batch without any same-label pair carries no signal
                Err(Error::NoPositives) | Err(Error::BatchTooSmall(_)) => 0.0,
                Err(e) => return Err(e),
            }
        }
    };

    let penalty = params.alignment.as_ref().map_or(0.0, orthogonality_penalty);
    if let (Some(a), Some(ga)) = (&params.alignment, &mut grad.alignment) {
        if settings.orthogonality_lambda != 0.0 {
            *ga += orthogonality_penalty_grad(a) * settings.orthogonality_lambda;
        }
    }
    Ok(ObjectiveOutput {
        loss,
        penalty,
        total: loss + settings.orthogonality_lambda * penalty,
        grad,
        skipped,
    })
}

//! Training objectives over unit vectors, each with its analytic gradient.
//!
//! Gradients are taken with respect to the unit vectors the losses consume.
//! [`normalize_backward`] carries them back through the L2 normalization to
//! the raw head output.

use nalgebra::{DMatrix, DVector};

use crate::embedding::ZERO_NORM;
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Gradient of a loss with respect to `z` given its gradient `grad` with
/// respect to `s = z / |z|`.
pub fn normalize_backward(unit: &DVector<f64>, norm: f64, grad: &DVector<f64>) -> DVector<f64> {
    (grad - unit * grad.dot(unit)) / norm
}

fn unit(v: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = v.norm();
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok((v / n, n))
}

/// Teacher projected into the student space (or passed through when there
/// is no alignment) and normalized.
pub fn align_teacher(
    teacher: &DVector<f64>,
    alignment: Option<&DMatrix<f64>>,
) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let raw = match alignment {
        Some(a) => {
            if a.ncols() != teacher.len() {
                return Err(Error::dim("alignment columns vs teacher", a.ncols(), teacher.len()));
            }
            a * teacher
        }
        None => teacher.clone(),
    };
    let (u, n) = unit(&raw)?;
    Ok((raw, u, n))
}

#[derive(Clone, Debug)]
pub struct DistillGrad {
    pub loss: f64,
    pub d_student: DVector<f64>,
    pub d_alignment: Option<DMatrix<f64>>,
}

/// `1 - cos(student, normalize(A · teacher))`. Without an alignment matrix
/// the teacher must already live in the student's dimension.
pub fn distill_loss(
    student: &DVector<f64>,
    teacher: &DVector<f64>,
    alignment: Option<&DMatrix<f64>>,
) -> Result<f64> {
    distill_forward_backward(student, teacher, alignment).map(|g| g.loss)
}

pub fn distill_forward_backward(
    student: &DVector<f64>,
    teacher: &DVector<f64>,
    alignment: Option<&DMatrix<f64>>,
) -> Result<DistillGrad> {
    let (_, target, target_norm) = align_teacher(teacher, alignment)?;
    if target.len() != student.len() {
        return Err(Error::dim("aligned teacher vs student", student.len(), target.len()));
    }
    let cos = student.dot(&target);
    let d_student = -&target;
    let d_alignment = alignment.map(|_| {
        // d(1 - s·u)/d(raw) where u = raw/|raw|
        let d_raw = normalize_backward(&target, target_norm, &(-student));
        &d_raw * teacher.transpose()
    });
    Ok(DistillGrad {
        loss: 1.0 - cos,
        d_student,
        d_alignment,
    })
}

/// Frobenius penalty ‖G − I‖² where G is the Gram matrix over the smaller
/// side of `a`: `A Aᵀ` for wide matrices, `Aᵀ A` otherwise.
pub fn orthogonality_penalty(a: &DMatrix<f64>) -> f64 {
    gram_residual(a).norm_squared()
}

pub fn orthogonality_penalty_grad(a: &DMatrix<f64>) -> DMatrix<f64> {
    let r = gram_residual(a);
    if a.nrows() <= a.ncols() {
        &r * a * 4.0
    } else {
        a * &r * 4.0
    }
}

fn gram_residual(a: &DMatrix<f64>) -> DMatrix<f64> {
    let g = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let n = g.nrows();
    g - DMatrix::identity(n, n)
}

/// Nearest matrix with orthonormal rows (or columns, whichever side is
/// smaller): `U Vᵀ` from the thin SVD.
pub fn polar_project(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    u * v_t
}

fn check_dims(vs: &[DVector<f64>], dim: usize, what: &str) -> Result<()> {
    match vs.iter().find(|v| v.len() != dim) {
        Some(v) => Err(Error::dim(what.to_string(), dim, v.len())),
        None => Ok(()),
    }
}

/// `logits[i][j] = cos(anchor_i, positive_j) / τ`.
pub fn infonce_logits(anchors: &[DVector<f64>], positives: &[DVector<f64>], tau: f64) -> DMatrix<f64> {
    DMatrix::from_fn(anchors.len(), positives.len(), |i, j| {
        anchors[i].dot(&positives[j]) / tau
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug)]
pub struct PairGrad {
    pub loss: f64,
    pub d_anchors: Vec<DVector<f64>>,
    pub d_positives: Vec<DVector<f64>>,
}

/// One-directional InfoNCE: positive `i` is the target for anchor `i`, the
/// other positives in the batch are its negatives.
pub fn infonce_loss(anchors: &[DVector<f64>], positives: &[DVector<f64>], tau: f64) -> Result<f64> {
    infonce_forward_backward(anchors, positives, tau, false).map(|g| g.loss)
}

/// As [`infonce_loss`], but a single-pair batch (which carries no gradient
/// signal) is an error.
pub fn infonce_loss_strict(
    anchors: &[DVector<f64>],
    positives: &[DVector<f64>],
    tau: f64,
) -> Result<f64> {
    infonce_forward_backward(anchors, positives, tau, true).map(|g| g.loss)
}

pub fn infonce_forward_backward(
    anchors: &[DVector<f64>],
    positives: &[DVector<f64>],
    tau: f64,
    strict: bool,
) -> Result<PairGrad> {
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid(format!("temperature must be positive, got {tau}")));
    }
    let n = anchors.len();
    if positives.len() != n {
        return Err(Error::dim("positives vs anchors", n, positives.len()));
    }
    if n == 0 || (strict && n == 1) {
        return Err(Error::BatchTooSmall(n));
    }
    let dim = anchors[0].len();
    check_dims(anchors, dim, "anchor")?;
    check_dims(positives, dim, "positive")?;

    let logits = infonce_logits(anchors, positives, tau);
    let mut loss = 0.0;
    let mut d_anchors = vec![DVector::zeros(dim); n];
    let mut d_positives = vec![DVector::zeros(dim); n];
    let scale = 1.0 / (n as f64 * tau);
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - logits[(i, i)];
        for j in 0..n {
            let p = (logits[(i, j)] - lse).exp();
            let g = (p - if i == j { 1.0 } else { 0.0 }) * scale;
            d_anchors[i].axpy(g, &positives[j], 1.0);
            d_positives[j].axpy(g, &anchors[i], 1.0);
        }
    }
    Ok(PairGrad {
        loss: loss / n as f64,
        d_anchors,
        d_positives,
    })
}

#[derive(Clone, Debug)]
pub struct SetGrad {
    pub loss: f64,
    pub d_embeddings: Vec<DVector<f64>>,
    /// Anchors that had at least one same-label partner.
    pub valid_anchors: usize,
}

/// Supervised contrastive loss with in-batch label matching. Anchors without
/// a same-label partner are skipped.
pub fn supcon_loss<L: PartialEq>(embeddings: &[DVector<f64>], labels: &[L], tau: f64) -> Result<f64> {
    supcon_forward_backward(embeddings, labels, tau).map(|g| g.loss)
}

pub fn supcon_forward_backward<L: PartialEq>(
    embeddings: &[DVector<f64>],
    labels: &[L],
    tau: f64,
) -> Result<SetGrad> {
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid(format!("temperature must be positive, got {tau}")));
    }
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::dim("labels vs embeddings", n, labels.len()));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let dim = embeddings[0].len();
    check_dims(embeddings, dim, "embedding")?;

    let logits = infonce_logits(embeddings, embeddings, tau);
    let valid: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|k| k != i && labels[k] == labels[i]))
        .collect();
    if valid.is_empty() {
        return Err(Error::NoPositives);
    }
    let per_anchor = 1.0 / valid.len() as f64;
    let mut loss = 0.0;
    let mut d = vec![DVector::zeros(dim); n];
    for &i in &valid {
        let others = (0..n).filter(|&k| k != i);
        let lse = log_sum_exp(others.clone().map(|k| logits[(i, k)]));
        let pos: Vec<usize> = others.clone().filter(|&k| labels[k] == labels[i]).collect();
        let inv_p = 1.0 / pos.len() as f64;
        let mut anchor_loss = 0.0;
        for &p in &pos {
            anchor_loss += lse - logits[(i, p)];
        }
        loss += anchor_loss * inv_p;
        for k in others {
            let prob = (logits[(i, k)] - lse).exp();
            let target = if labels[k] == labels[i] { inv_p } else { 0.0 };
            let g = (prob - target) * per_anchor / tau;
            d[i].axpy(g, &embeddings[k], 1.0);
            d[k].axpy(g, &embeddings[i], 1.0);
        }
    }
    Ok(SetGrad {
        loss: loss * per_anchor,
        d_embeddings: d,
        valid_anchors: valid.len(),
    })
}

//! Training objectives: feature distillation, per-level cluster sharpening,
//! and the activation-matching term, each with analytic gradients.
//!
//! A [`LossValue`] carries the scalar plus a map from parameter-tensor id to
//! gradient. At this level the ids name the immediate matrix inputs; the
//! trainer chains those through the assignment and projector backward passes
//! and re-keys them by parameter before combining terms.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::{
    col_onehot_argmax, cosine_sim, cosine_sim_backward, cosine_sim_plus, DenseMatrix, LinalgError,
};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Deterministically ordered gradient map keyed by parameter-tensor id.
pub type GradientMap = BTreeMap<String, DenseMatrix>;

/// A scalar loss and its gradients.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub gradients: GradientMap,
}

impl LossValue {
    pub fn new(value: f64, gradients: GradientMap) -> Self {
        assert!(value.is_finite(), "loss value must be finite, got {value}");
        Self { value, gradients }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, GradientMap::new())
    }

    pub fn grad(&self, id: &str) -> Option<&DenseMatrix> {
        self.gradients.get(id)
    }
}

/// Loss-combination weights. `sparsity_weight` scales the cluster terms,
/// `structure_weight` the matching terms; `distill_b` is the affinity shift
/// in the distillation term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sparsity_weight: f64,
    pub structure_weight: f64,
    pub distill_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { sparsity_weight: 0.01, structure_weight: 0.3, distill_b: 0.3 }
    }
}

/// Distillation loss
/// `-sum_{p,q} (sim(F_enc_x, F_enc_y)_{pq} - b) * sim_plus(F_x, F_y)_{pq}`.
///
/// Encoder features are constants; gradients (keys `"f_x"`, `"f_y"`) cover
/// only the projected features. Location pairs whose encoder affinity falls
/// below `b` are pushed apart, the rest pulled together.
pub fn distill_loss(
    f_enc_x: &DenseMatrix,
    f_enc_y: &DenseMatrix,
    f_x: &DenseMatrix,
    f_y: &DenseMatrix,
    b: f64,
) -> Result<LossValue, LossError> {
    if f_enc_x.rows() != f_x.rows() || f_enc_y.rows() != f_y.rows() {
        return Err(LossError::DimensionMismatch(format!(
            "location counts differ: encoder {}x{} vs projected {}x{}",
            f_enc_x.rows(),
            f_enc_y.rows(),
            f_x.rows(),
            f_y.rows()
        )));
    }
    let sim_enc = cosine_sim(f_enc_x, f_enc_y)?;
    let sim_proj = cosine_sim_plus(f_x, f_y)?;

    let mut value = 0.0;
    let mut upstream = DenseMatrix::zeros(sim_proj.rows(), sim_proj.cols());
    for p in 0..sim_proj.rows() {
        for q in 0..sim_proj.cols() {
            let w = sim_enc.get(p, q) - b;
            let s = sim_proj.get(p, q);
            value -= w * s;
            // d value / d sim_proj = -w, zero where the clip was active.
            if s > 0.0 {
                upstream.set(p, q, -w);
            }
        }
    }
    let (grad_x, grad_y) = cosine_sim_backward(f_x, f_y, &sim_proj, &upstream)?;
    let mut gradients = GradientMap::new();
    gradients.insert("f_x".into(), grad_x);
    gradients.insert("f_y".into(), grad_y);
    Ok(LossValue::new(value, gradients))
}

/// Cluster-sharpening loss `-<M, M_hat>` where `M_hat` is the hard one-hot
/// column argmax of `M`, recomputed here and treated as a constant. The
/// gradient with respect to `M` (key `"m"`) is `-M_hat`.
pub fn cluster_loss(m: &DenseMatrix) -> LossValue {
    let m_hat = col_onehot_argmax(m);
    let mut value = 0.0;
    for (a, h) in m.data().iter().zip(m_hat.data()) {
        value -= a * h;
    }
    let mut gradients = GradientMap::new();
    gradients.insert("m".into(), m_hat.scale(-1.0));
    LossValue::new(value, gradients)
}

/// Matching loss `sum |transported - activation|` between a level's own
/// activations and the transported activations pooled down from the finer
/// level. The L1 subgradient at zero is zero; gradients go to both sides
/// (keys `"activation"`, `"transported"`).
pub fn match_loss(
    activation: &DenseMatrix,
    transported: &DenseMatrix,
) -> Result<LossValue, LossError> {
    if activation.shape() != transported.shape() {
        return Err(LossError::DimensionMismatch(format!(
            "activation {:?} vs transported {:?}",
            activation.shape(),
            transported.shape()
        )));
    }
    let mut value = 0.0;
    let mut grad_t = DenseMatrix::zeros(activation.rows(), activation.cols());
    for r in 0..activation.rows() {
        for c in 0..activation.cols() {
            let diff = transported.get(r, c) - activation.get(r, c);
            value += diff.abs();
            grad_t.set(r, c, sign(diff));
        }
    }
    let mut gradients = GradientMap::new();
    gradients.insert("activation".into(), grad_t.scale(-1.0));
    gradients.insert("transported".into(), grad_t);
    Ok(LossValue::new(value, gradients))
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

/// Weighted total
/// `L = base + sparsity_weight * sum(cluster) + structure_weight * sum(match)`
/// with gradient maps combined linearly under the same keys. Gradients for
/// the same id must share a shape; that is the caller's contract.
pub fn total_loss(
    base: LossValue,
    cluster_terms: &[LossValue],
    match_terms: &[LossValue],
    weights: &LossWeights,
) -> LossValue {
    let mut value = base.value;
    let mut gradients = base.gradients;
    for term in cluster_terms {
        value += weights.sparsity_weight * term.value;
        merge_scaled(&mut gradients, &term.gradients, weights.sparsity_weight);
    }
    for term in match_terms {
        value += weights.structure_weight * term.value;
        merge_scaled(&mut gradients, &term.gradients, weights.structure_weight);
    }
    LossValue::new(value, gradients)
}

fn merge_scaled(into: &mut GradientMap, from: &GradientMap, coeff: f64) {
    for (key, grad) in from {
        match into.get_mut(key) {
            Some(acc) => {
                assert_eq!(
                    acc.shape(),
                    grad.shape(),
                    "gradient shapes for {key} disagree"
                );
                acc.add_scaled(grad, coeff);
            }
            None => {
                into.insert(key.clone(), grad.scale(coeff));
            }
        }
    }
}

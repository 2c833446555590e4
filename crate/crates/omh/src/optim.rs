//! Parameter groups, Adam updates, and the training loop that ties the
//! projector, hierarchy heads, and loss terms together on synthetic data.
//!
//! Training is single-threaded and fully deterministic given the seed: the
//! projector and head initializations draw from separate, fixed RNG streams,
//! and gradient terms accumulate in a fixed order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::eval::{accuracy, hungarian_match, miou, ConfusionMatrix, EvalError};
use crate::hierarchy::{
    assign_backward, baseline_assign, maxpool_weighted, maxpool_weighted_backward,
    plan_match_weights, soft_assign, Activation, AssignMode, ClusterHead, FeatureBatch,
    HierarchyConfig, HierarchyError, HierarchyStack,
};
use crate::linalg::{col_argmax, DenseMatrix, LinalgError};
use crate::losses::{
    cluster_loss, distill_loss, match_loss, total_loss, GradientMap, LossError, LossValue,
    LossWeights,
};
use crate::synthdata::SyntheticDataset;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: usize, term: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Adam state for one parameter group (a list of tensors updated together).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: usize,
    pub first_moment: Vec<DenseMatrix>,
    pub second_moment: Vec<DenseMatrix>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a parameter group.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut DenseMatrix],
    grads: &[&DenseMatrix],
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "adam group sizes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((param, grad), (m, v)) in params
        .iter()
        .zip(grads.iter())
        .zip(state.first_moment.iter().zip(state.second_moment.iter()))
    {
        if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape()
        {
            return Err(TrainError::ShapeMismatch(format!(
                "adam tensor shapes differ: param {:?}, grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let pdata = param.data_mut();
        for i in 0..pdata.len() {
            let g = grad.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * g;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            pdata[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Two-layer per-location projector `F = W2 relu(W1 x + b1) + b2`, the
/// location-wise counterpart of the usual two-layer projection head.
#[derive(Clone, Debug)]
pub struct Projector {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

/// Forward intermediates needed by the backward pass.
pub struct ProjectorCache {
    z1: DenseMatrix,
    a1: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct ProjectorGrads {
    pub w1: DenseMatrix,
    pub b1: DenseMatrix,
    pub w2: DenseMatrix,
    pub b2: DenseMatrix,
}

impl Projector {
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Self {
        let gauss = |rows: usize, cols: usize, scale: f64, rng: &mut dyn rand::RngCore| {
            let mut m = DenseMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let g: f64 = rng.sample(rand_distr::StandardNormal);
                    m.set(r, c, scale * g);
                }
            }
            m
        };
        Self {
            w1: gauss(hidden_dim, input_dim, (2.0 / input_dim as f64).sqrt(), rng),
            b1: DenseMatrix::zeros(1, hidden_dim),
            w2: gauss(output_dim, hidden_dim, (1.0 / hidden_dim as f64).sqrt(), rng),
            b2: DenseMatrix::zeros(1, output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Projects `P x C` encoder rows to `P x D` feature rows.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ProjectorCache), TrainError> {
        if x.cols() != self.input_dim() {
            return Err(TrainError::ShapeMismatch(format!(
                "projector expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut z1 = x.matmul(&self.w1.transpose())?;
        for r in 0..z1.rows() {
            for c in 0..z1.cols() {
                z1.set(r, c, z1.get(r, c) + self.b1.get(0, c));
            }
        }
        let a1 = z1.map(|v| v.max(0.0));
        let mut f = a1.matmul(&self.w2.transpose())?;
        for r in 0..f.rows() {
            for c in 0..f.cols() {
                f.set(r, c, f.get(r, c) + self.b2.get(0, c));
            }
        }
        Ok((f, ProjectorCache { z1, a1 }))
    }

    /// Backpropagates `grad_out` (gradient of the loss in the projected
    /// features) to the projector parameters.
    pub fn backward(
        &self,
        x: &DenseMatrix,
        cache: &ProjectorCache,
        grad_out: &DenseMatrix,
    ) -> Result<ProjectorGrads, TrainError> {
        let grad_w2 = grad_out.transpose().matmul(&cache.a1)?;
        let grad_b2 = row_vector(grad_out.col_sums());
        let grad_a1 = grad_out.matmul(&self.w2)?;
        let mut grad_z1 = grad_a1;
        for r in 0..grad_z1.rows() {
            for c in 0..grad_z1.cols() {
                if cache.z1.get(r, c) <= 0.0 {
                    grad_z1.set(r, c, 0.0);
                }
            }
        }
        let grad_w1 = grad_z1.transpose().matmul(x)?;
        let grad_b1 = row_vector(grad_z1.col_sums());
        Ok(ProjectorGrads { w1: grad_w1, b1: grad_b1, w2: grad_w2, b2: grad_b2 })
    }
}

fn row_vector(values: Vec<f64>) -> DenseMatrix {
    let cols = values.len();
    DenseMatrix::from_vec(1, cols, values).expect("finite sums")
}

/// Parameter-tensor ids used in gradient maps.
pub mod param {
    pub const W1: &str = "projector.w1";
    pub const B1: &str = "projector.b1";
    pub const W2: &str = "projector.w2";
    pub const B2: &str = "projector.b2";

    pub fn head(level: usize) -> String {
        format!("head.{level}")
    }
}

/// Full trainable state.
pub struct TrainState {
    pub projector: Projector,
    pub stack: HierarchyStack,
    pub adam_projector: AdamState,
    pub adam_heads: Vec<AdamState>,
    pub rng_seed: u64,
    pub step: usize,
}

/// Per-step loss breakdown (raw, unweighted term values plus weighted total).
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub base: f64,
    pub cluster: Vec<f64>,
    pub matching: Vec<f64>,
    pub total: f64,
}

/// Which planted labels a metric row scores against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelTarget {
    Coarse,
    Fine,
}

impl LabelTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelTarget::Coarse => "coarse",
            LabelTarget::Fine => "fine",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub step: usize,
    pub level: usize,
    pub target: LabelTarget,
    pub accuracy: f64,
    pub miou: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn check_finite(step: usize, term: &str, value: f64) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { step, term: term.to_string() })
    }
}

fn grad_or_zeros(map: &GradientMap, key: &str, shape: (usize, usize)) -> DenseMatrix {
    map.get(key).cloned().unwrap_or_else(|| DenseMatrix::zeros(shape.0, shape.1))
}

/// Runs the full training loop: project, rebuild plans (detached), assign,
/// assemble the weighted loss, and Adam-update every parameter group, for
/// `config.steps` steps. Deterministic given the seed.
pub fn train(config: &ExperimentConfig, data: &SyntheticDataset) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let weights = config.loss_weights();
    let settings = config.sinkhorn_settings();
    let hconfig: HierarchyConfig = config.hierarchy_config();
    let schedule = hconfig.schedule()?;

    let input_dim = data.params.dim;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(config.seed);
    proj_rng.set_stream(1);
    let mut head_rng = ChaCha8Rng::seed_from_u64(config.seed);
    head_rng.set_stream(2);

    let projector = Projector::init(input_dim, config.proj_hidden, config.proj_dim, &mut proj_rng);
    let heads: Vec<ClusterHead> = schedule
        .iter()
        .enumerate()
        .map(|(level, &k)| ClusterHead::random_unit(level, k, config.proj_dim, &mut head_rng))
        .collect();
    let stack = HierarchyStack::new(hconfig, heads)?;

    let adam_projector = AdamState::new(
        &[
            projector.w1.shape(),
            projector.b1.shape(),
            projector.w2.shape(),
            projector.b2.shape(),
        ],
        config.learning_rate,
    );
    let adam_heads: Vec<AdamState> = stack
        .heads
        .iter()
        .map(|h| AdamState::new(&[h.centers.shape()], config.learning_rate))
        .collect();

    let mut state = TrainState {
        projector,
        stack,
        adam_projector,
        adam_heads,
        rng_seed: config.seed,
        step: 0,
    };

    let mode = if config.stop_gradient { AssignMode::Baseline } else { AssignMode::Soft };
    let mut history = Vec::with_capacity(config.steps);
    let mut evals = Vec::new();

    for step in 1..=config.steps {
        // The matching term couples levels top-down; giving every level a
        // warmup to sharpen on its own before coupling avoids dragging the
        // finer levels toward a still-random coarse head.
        let step_weights = if step <= config.structure_warmup {
            LossWeights { structure_weight: 0.0, ..weights }
        } else {
            weights
        };
        let record = train_step(&mut state, data, &step_weights, &settings, mode, step)?;
        history.push(record);
        state.step = step;
        let at_interval = step % config.eval_interval == 0;
        let last = step == config.steps;
        if at_interval || (last && config.steps % config.eval_interval != 0) {
            let mut rows = evaluate_state(&state.projector, &state.stack, data)?;
            for row in &mut rows {
                row.step = step;
            }
            evals.extend(rows);
        }
    }

    Ok(TrainOutcome { state, history, evals })
}

fn train_step(
    state: &mut TrainState,
    data: &SyntheticDataset,
    weights: &LossWeights,
    settings: &crate::transport::SinkhornSettings,
    mode: AssignMode,
    step: usize,
) -> Result<StepRecord, TrainError> {
    let depth = state.stack.depth();

    // (1) Project features. Divergence shows up here first, so the finite
    // check doubles as the non-finite-loss diagnostic.
    let mut batches = Vec::with_capacity(data.batches.len());
    let mut caches = Vec::with_capacity(data.batches.len());
    for batch in &data.batches {
        let (projected, cache) = state.projector.forward(&batch.encoder)?;
        if projected.check_finite().is_err() {
            return Err(TrainError::NonFiniteLoss { step, term: "projected features".into() });
        }
        batches.push(FeatureBatch::with_projection(batch.encoder.clone(), projected));
        caches.push(cache);
    }

    // (2) Rebuild transport plans from the current heads; the plans are
    // constants for this step's gradients.
    state.stack.build_plans(settings)?;

    // (3) Soft assignments per level and image.
    let mut activations: Vec<Vec<Activation>> = Vec::with_capacity(depth);
    for head in &state.stack.heads {
        let mut per_image = Vec::with_capacity(batches.len());
        for fb in &batches {
            let act = match mode {
                AssignMode::Soft => soft_assign(head, fb)?,
                AssignMode::Baseline => baseline_assign(head, fb)?,
            };
            per_image.push(act);
        }
        activations.push(per_image);
    }

    // Accumulates a feature-space gradient through the projector into a
    // parameter-keyed gradient map.
    let add_projector_grads = |map: &mut GradientMap,
                               state: &TrainState,
                               img: usize,
                               grad_f: &DenseMatrix|
     -> Result<(), TrainError> {
        let g = state.projector.backward(&data.batches[img].encoder, &caches[img], grad_f)?;
        for (key, grad) in [
            (param::W1, g.w1),
            (param::B1, g.b1),
            (param::W2, g.w2),
            (param::B2, g.b2),
        ] {
            match map.get_mut(key) {
                Some(acc) => acc.add_scaled(&grad, 1.0),
                None => {
                    map.insert(key.to_string(), grad);
                }
            }
        }
        Ok(())
    };
    let add_head_grad = |map: &mut GradientMap, level: usize, grad: DenseMatrix| {
        let key = param::head(level);
        match map.get_mut(&key) {
            Some(acc) => acc.add_scaled(&grad, 1.0),
            None => {
                map.insert(key, grad);
            }
        }
    };

    // (4) Loss terms, each expressed directly in parameter coordinates.
    // Base: distillation over self-pairs, summed across images.
    let mut base_value = 0.0;
    let mut base_grads = GradientMap::new();
    for (img, fb) in batches.iter().enumerate() {
        let term = distill_loss(
            &fb.encoder,
            &fb.encoder,
            &fb.projected,
            &fb.projected,
            weights.distill_b,
        )?;
        base_value += term.value;
        // Both sides of the self-pair are the same tensor.
        let mut grad_f = term.gradients["f_x"].clone();
        grad_f.add_scaled(&term.gradients["f_y"], 1.0);
        add_projector_grads(&mut base_grads, state, img, &grad_f)?;
    }
    check_finite(step, "base", base_value)?;
    let base = LossValue::new(base_value, base_grads);

    // Cluster term per level, summed across images.
    let mut cluster_terms = Vec::with_capacity(depth);
    for level in 0..depth {
        let mut value = 0.0;
        let mut grads = GradientMap::new();
        for (img, act) in activations[level].iter().enumerate() {
            let term = cluster_loss(&act.matrix);
            value += term.value;
            let upstream = &term.gradients["m"];
            let g = assign_backward(&state.stack.heads[level], &batches[img], act, upstream)?;
            add_head_grad(&mut grads, level, g.centers);
            if let Some(gf) = g.features {
                add_projector_grads(&mut grads, state, img, &gf)?;
            }
        }
        check_finite(step, &format!("cluster_{level}"), value)?;
        cluster_terms.push(LossValue::new(value, grads));
    }

    // Matching term per adjacent pair, summed across images. Pooling runs
    // through the row-renormalized plan so transported activations stay on
    // the cosine scale; see `plan_match_weights`.
    let mut match_terms = Vec::with_capacity(depth.saturating_sub(1));
    for pair in 0..depth.saturating_sub(1) {
        let weights_m = plan_match_weights(&state.stack.plans[pair]);
        let mut value = 0.0;
        let mut grads = GradientMap::new();
        for img in 0..batches.len() {
            let act_lo = &activations[pair][img];
            let act_hi = &activations[pair + 1][img];
            let transported = maxpool_weighted(&weights_m, &act_hi.matrix)?;
            let term = match_loss(&act_lo.matrix, &transported)?;
            value += term.value;

            let g_lo = assign_backward(
                &state.stack.heads[pair],
                &batches[img],
                act_lo,
                &term.gradients["activation"],
            )?;
            add_head_grad(&mut grads, pair, g_lo.centers);
            if let Some(gf) = g_lo.features {
                add_projector_grads(&mut grads, state, img, &gf)?;
            }

            let g_hi_m = maxpool_weighted_backward(
                &weights_m,
                &act_hi.matrix,
                &term.gradients["transported"],
            )?;
            let g_hi =
                assign_backward(&state.stack.heads[pair + 1], &batches[img], act_hi, &g_hi_m)?;
            add_head_grad(&mut grads, pair + 1, g_hi.centers);
            if let Some(gf) = g_hi.features {
                add_projector_grads(&mut grads, state, img, &gf)?;
            }
        }
        check_finite(step, &format!("match_{pair}_{}", pair + 1), value)?;
        match_terms.push(LossValue::new(value, grads));
    }

    let record = StepRecord {
        step,
        base: base.value,
        cluster: cluster_terms.iter().map(|t| t.value).collect(),
        matching: match_terms.iter().map(|t| t.value).collect(),
        total: 0.0,
    };

    let total = total_loss(base, &cluster_terms, &match_terms, weights);
    check_finite(step, "total", total.value)?;
    for (key, grad) in &total.gradients {
        if grad.check_finite().is_err() {
            return Err(TrainError::NonFiniteLoss { step, term: format!("gradient of {key}") });
        }
    }

    // (5) Adam updates: one group for the projector, one per head.
    let proj_grads = [
        grad_or_zeros(&total.gradients, param::W1, state.projector.w1.shape()),
        grad_or_zeros(&total.gradients, param::B1, state.projector.b1.shape()),
        grad_or_zeros(&total.gradients, param::W2, state.projector.w2.shape()),
        grad_or_zeros(&total.gradients, param::B2, state.projector.b2.shape()),
    ];
    {
        let Projector { w1, b1, w2, b2 } = &mut state.projector;
        adam_step(
            &mut state.adam_projector,
            &mut [w1, b1, w2, b2],
            &[&proj_grads[0], &proj_grads[1], &proj_grads[2], &proj_grads[3]],
        )?;
    }
    for level in 0..depth {
        let grad = grad_or_zeros(
            &total.gradients,
            &param::head(level),
            state.stack.heads[level].centers.shape(),
        );
        adam_step(
            &mut state.adam_heads[level],
            &mut [&mut state.stack.heads[level].centers],
            &[&grad],
        )?;
    }

    Ok(StepRecord { total: total.value, ..record })
}

/// Per-level accuracy and mean IoU against both planted label sets, from a
/// fresh forward pass.
pub fn evaluate_state(
    projector: &Projector,
    stack: &HierarchyStack,
    data: &SyntheticDataset,
) -> Result<Vec<EvalRecord>, TrainError> {
    let mut rows = Vec::new();
    let mut projections = Vec::with_capacity(data.batches.len());
    for batch in &data.batches {
        let (projected, _) = projector.forward(&batch.encoder)?;
        projections.push(FeatureBatch::with_projection(batch.encoder.clone(), projected));
    }
    for (level, head) in stack.heads.iter().enumerate() {
        for target in [LabelTarget::Coarse, LabelTarget::Fine] {
            let k_true = match target {
                LabelTarget::Coarse => data.n_coarse(),
                LabelTarget::Fine => data.n_fine(),
            };
            let mut cm = ConfusionMatrix::new(head.clusters(), k_true);
            for (img, fb) in projections.iter().enumerate() {
                let act = soft_assign(head, fb)?;
                let preds = col_argmax(&act.matrix);
                let labels = match target {
                    LabelTarget::Coarse => &data.coarse_labels[img],
                    LabelTarget::Fine => &data.fine_labels[img],
                };
                let batch_cm =
                    ConfusionMatrix::from_labels(&preds, labels, head.clusters(), k_true)?;
                cm.merge(&batch_cm);
            }
            let assignment = hungarian_match(&cm);
            rows.push(EvalRecord {
                step: 0,
                level,
                target,
                accuracy: accuracy(&cm, &assignment),
                miou: miou(&cm, &assignment),
            });
        }
    }
    Ok(rows)
}

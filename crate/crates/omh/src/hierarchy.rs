//! Multi-level predictor heads, soft assignments, and the transported
//! activations that tie adjacent levels together.
//!
//! Level `i` is the coarser level: it has `round(K * rho^i)` clusters and
//! level `i+1` has more. Plan `i` couples level `i` rows to level `i+1`
//! columns. Plans are constants with respect to differentiation: gradients
//! never flow through the transport solve.

use rand::Rng;
use thiserror::Error;

use crate::linalg::{
    cosine_sim, cosine_sim_backward, cosine_sim_plus, DenseMatrix, LinalgError,
};
use crate::transport::{
    cost_from_heads, sinkhorn, uniform_marginal, SinkhornSettings, TransportError, TransportPlan,
};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("invalid hierarchy config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Cluster-center matrix for one hierarchy level. Rows are centers.
#[derive(Clone, Debug)]
pub struct ClusterHead {
    pub level: usize,
    pub centers: DenseMatrix,
}

impl ClusterHead {
    pub fn new(level: usize, centers: DenseMatrix) -> Result<Self, HierarchyError> {
        for r in 0..centers.rows() {
            if centers.row_norm(r) < crate::linalg::NORM_FLOOR {
                return Err(HierarchyError::InvalidConfig(format!(
                    "zero-norm center row {r} at level {level}"
                )));
            }
        }
        Ok(Self { level, centers })
    }

    /// Unit-normalized rows drawn from an isotropic Gaussian.
    pub fn random_unit(level: usize, clusters: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut centers = DenseMatrix::zeros(clusters, dim);
        for r in 0..clusters {
            loop {
                let mut norm_sq = 0.0;
                for c in 0..dim {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    centers.set(r, c, v);
                    norm_sq += v * v;
                }
                let norm = norm_sq.sqrt();
                if norm > 1e-6 {
                    for c in 0..dim {
                        centers.set(r, c, centers.get(r, c) / norm);
                    }
                    break;
                }
            }
        }
        Self { level, centers }
    }

    pub fn clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

/// Encoder features plus their projection for one image of `P` locations.
/// Both are stored with locations as rows (`P x C` and `P x D`), so each
/// row is one location's feature vector.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub encoder: DenseMatrix,
    pub projected: DenseMatrix,
}

impl FeatureBatch {
    pub fn from_encoder(encoder: DenseMatrix) -> Self {
        Self { encoder, projected: DenseMatrix::zeros(0, 0) }
    }

    pub fn with_projection(encoder: DenseMatrix, projected: DenseMatrix) -> Self {
        Self { encoder, projected }
    }

    pub fn locations(&self) -> usize {
        self.encoder.rows()
    }
}

/// Cluster counts per level: `[round(K * rho^0), ..., round(K * rho^(N-1))]`,
/// rounding half up, each power taken from the base count rather than
/// iterated. Collapsed adjacent counts under `rho > 1` are reported as an
/// error instead of silently deduplicated.
pub fn expansion_schedule(
    base: usize,
    rho: f64,
    depth: usize,
) -> Result<Vec<usize>, HierarchyError> {
    if base < 1 || depth < 1 {
        return Err(HierarchyError::InvalidConfig(format!(
            "base clusters and depth must be >= 1, got {base}, {depth}"
        )));
    }
    if !(rho >= 1.0) {
        return Err(HierarchyError::InvalidConfig(format!(
            "expansion factor must be >= 1, got {rho}"
        )));
    }
    let schedule: Vec<usize> = (0..depth)
        .map(|i| (base as f64 * rho.powi(i as i32)).round() as usize)
        .collect();
    for w in schedule.windows(2) {
        if rho > 1.0 && w[0] == w[1] {
            return Err(HierarchyError::InvalidConfig(format!(
                "expansion {rho} collapses adjacent levels to {} clusters after rounding",
                w[0]
            )));
        }
    }
    Ok(schedule)
}

/// How gradients flow through an assignment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Clipped cosine; gradients reach both the centers and the features.
    Soft,
    /// Signed cosine with the features behind a stop-gradient boundary.
    Baseline,
}

/// A cluster-activation matrix `K x P` plus the gradient-flow mode it was
/// produced under.
#[derive(Clone, Debug)]
pub struct Activation {
    pub matrix: DenseMatrix,
    pub mode: AssignMode,
}

/// Gradients of an assignment. `features` is `None` under the baseline
/// stop-gradient mode.
#[derive(Clone, Debug)]
pub struct AssignGrads {
    pub centers: DenseMatrix,
    pub features: Option<DenseMatrix>,
}

fn check_assign_dims(head: &ClusterHead, features: &FeatureBatch) -> Result<(), HierarchyError> {
    if features.projected.rows() == 0 {
        return Err(HierarchyError::DimensionMismatch(
            "features have no projection; project before assigning".into(),
        ));
    }
    if features.projected.cols() != head.dim() {
        return Err(HierarchyError::DimensionMismatch(format!(
            "projected feature dim {} does not match head dim {}",
            features.projected.cols(),
            head.dim()
        )));
    }
    Ok(())
}

/// Soft cluster assignment `M = sim_plus(centers, F)`, entries in `[0, 1]`.
/// No stop-gradient: training through this matrix shapes the features too.
pub fn soft_assign(head: &ClusterHead, features: &FeatureBatch) -> Result<Activation, HierarchyError> {
    check_assign_dims(head, features)?;
    let matrix = cosine_sim_plus(&head.centers, &features.projected)?;
    Ok(Activation { matrix, mode: AssignMode::Soft })
}

/// Signed-cosine affinity with the features treated as constants, the
/// classic detached predictor.
pub fn baseline_assign(
    head: &ClusterHead,
    features: &FeatureBatch,
) -> Result<Activation, HierarchyError> {
    check_assign_dims(head, features)?;
    let matrix = cosine_sim(&head.centers, &features.projected)?;
    Ok(Activation { matrix, mode: AssignMode::Baseline })
}

/// Backward pass of an assignment. `upstream` is the gradient flowing into
/// the activation matrix. Under `Soft`, entries clipped in the forward pass
/// pass no gradient; under `Baseline`, the feature gradient is withheld
/// entirely.
pub fn assign_backward(
    head: &ClusterHead,
    features: &FeatureBatch,
    activation: &Activation,
    upstream: &DenseMatrix,
) -> Result<AssignGrads, HierarchyError> {
    check_assign_dims(head, features)?;
    if upstream.shape() != activation.matrix.shape() {
        return Err(HierarchyError::DimensionMismatch(format!(
            "upstream {:?} does not match activation {:?}",
            upstream.shape(),
            activation.matrix.shape()
        )));
    }
    let masked;
    let upstream = match activation.mode {
        AssignMode::Soft => {
            let mut m = upstream.clone();
            for (g, &s) in m.data_mut().iter_mut().zip(activation.matrix.data()) {
                if s == 0.0 {
                    *g = 0.0;
                }
            }
            masked = m;
            &masked
        }
        AssignMode::Baseline => upstream,
    };
    let (centers, feats) =
        cosine_sim_backward(&head.centers, &features.projected, &activation.matrix, upstream)?;
    let features = match activation.mode {
        AssignMode::Soft => Some(feats),
        AssignMode::Baseline => None,
    };
    Ok(AssignGrads { centers, features })
}

/// Static shape of a hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyConfig {
    pub depth: usize,
    pub base_clusters: usize,
    pub expansion: f64,
    pub ot_temperature: f64,
}

impl HierarchyConfig {
    pub fn schedule(&self) -> Result<Vec<usize>, HierarchyError> {
        expansion_schedule(self.base_clusters, self.expansion, self.depth)
    }
}

/// Heads for every level plus one transport plan per adjacent pair.
#[derive(Clone, Debug)]
pub struct HierarchyStack {
    pub heads: Vec<ClusterHead>,
    pub plans: Vec<TransportPlan>,
    pub config: HierarchyConfig,
}

impl HierarchyStack {
    pub fn new(config: HierarchyConfig, heads: Vec<ClusterHead>) -> Result<Self, HierarchyError> {
        let schedule = config.schedule()?;
        if heads.len() != config.depth {
            return Err(HierarchyError::InvalidConfig(format!(
                "expected {} heads, got {}",
                config.depth,
                heads.len()
            )));
        }
        let dim = heads.first().map(ClusterHead::dim).unwrap_or(0);
        for (i, head) in heads.iter().enumerate() {
            if head.clusters() != schedule[i] {
                return Err(HierarchyError::InvalidConfig(format!(
                    "level {i} has {} clusters, schedule expects {}",
                    head.clusters(),
                    schedule[i]
                )));
            }
            if head.dim() != dim {
                return Err(HierarchyError::InvalidConfig(format!(
                    "level {i} center dim {} differs from level 0 dim {dim}",
                    head.dim()
                )));
            }
        }
        Ok(Self { heads, plans: Vec::new(), config })
    }

    pub fn depth(&self) -> usize {
        self.heads.len()
    }

    /// Solves one transport problem per adjacent level pair with uniform
    /// marginals, replacing any previous plans. The resulting plans are
    /// detached constants for the loss terms built on them.
    pub fn build_plans(&mut self, settings: &SinkhornSettings) -> Result<(), TransportError> {
        let mut plans = Vec::with_capacity(self.heads.len().saturating_sub(1));
        for pair in self.heads.windows(2) {
            let cost = cost_from_heads(&pair[0], &pair[1])?;
            let plan = sinkhorn(
                &cost,
                settings,
                &uniform_marginal(pair[0].clusters()),
                &uniform_marginal(pair[1].clusters()),
            )?;
            plans.push(plan);
        }
        self.plans = plans;
        Ok(())
    }
}

fn check_pool_dims(weights: &DenseMatrix, m_hi: &DenseMatrix) -> Result<(), HierarchyError> {
    if weights.cols() != m_hi.rows() {
        return Err(HierarchyError::DimensionMismatch(format!(
            "plan has {} columns but finer activation has {} rows",
            weights.cols(),
            m_hi.rows()
        )));
    }
    Ok(())
}

/// Weighted max-pool shared by the raw and renormalized transport paths:
/// `out[k][p] = max_l weights[k][l] * m_hi[l][p]`.
pub fn maxpool_weighted(
    weights: &DenseMatrix,
    m_hi: &DenseMatrix,
) -> Result<DenseMatrix, HierarchyError> {
    check_pool_dims(weights, m_hi)?;
    let (k_lo, k_hi) = weights.shape();
    let p = m_hi.cols();
    let mut out = DenseMatrix::zeros(k_lo, p);
    for k in 0..k_lo {
        let row = weights.row(k);
        for pp in 0..p {
            let mut best = f64::NEG_INFINITY;
            for l in 0..k_hi {
                let v = row[l] * m_hi.get(l, pp);
                if v > best {
                    best = v;
                }
            }
            out.set(k, pp, best);
        }
    }
    Ok(out)
}

/// Gradient of [`maxpool_weighted`] with respect to the finer activations.
/// The weights are constants; per `(k, p)` only the arg-max finer cluster
/// receives gradient, ties resolving to the lowest index.
pub fn maxpool_weighted_backward(
    weights: &DenseMatrix,
    m_hi: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<DenseMatrix, HierarchyError> {
    check_pool_dims(weights, m_hi)?;
    let (k_lo, k_hi) = weights.shape();
    let p = m_hi.cols();
    assert_eq!(upstream.shape(), (k_lo, p), "upstream shape mismatch");
    let mut grad = DenseMatrix::zeros(k_hi, p);
    for k in 0..k_lo {
        let row = weights.row(k);
        for pp in 0..p {
            let mut best = f64::NEG_INFINITY;
            let mut best_l = 0;
            for l in 0..k_hi {
                let v = row[l] * m_hi.get(l, pp);
                if v > best {
                    best = v;
                    best_l = l;
                }
            }
            let g = upstream.get(k, pp);
            if g != 0.0 {
                grad.set(best_l, pp, grad.get(best_l, pp) + row[best_l] * g);
            }
        }
    }
    Ok(grad)
}

/// Transported activations: `out[k][p] = max_l plan[k][l] * m_hi[l][p]`.
/// The joint `K_i x K_{i+1} x P` tensor is never materialized; see
/// [`transported_activation_via_tensor`] for the explicit reference route.
pub fn transported_activation(
    plan: &TransportPlan,
    m_hi: &DenseMatrix,
) -> Result<DenseMatrix, HierarchyError> {
    maxpool_weighted(&plan.plan, m_hi)
}

/// Gradient of [`transported_activation`] with respect to the finer
/// activations; the plan is a constant.
pub fn transported_activation_backward(
    plan: &TransportPlan,
    m_hi: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<DenseMatrix, HierarchyError> {
    maxpool_weighted_backward(&plan.plan, m_hi, upstream)
}

/// Plan rows rescaled to unit maximum. A plan carries total mass 1, so its
/// entries shrink with the cluster counts; pooling cosine activations through
/// the raw entries would squash them by that same factor. Row-normalizing
/// gives every coarse cluster's best fine match weight 1 and keeps the
/// transported activations on the cosine scale the matching loss compares
/// against. Plan rows always have positive mass.
pub fn plan_match_weights(plan: &TransportPlan) -> DenseMatrix {
    let mut weights = plan.plan.clone();
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.0 {
            for v in row.iter_mut() {
                *v /= max;
            }
        }
    }
    weights
}

/// Reference route for tests: materializes the full joint activation tensor
/// and max-pools it. Quadratic in memory; debug use only.
pub fn transported_activation_via_tensor(
    plan: &TransportPlan,
    m_hi: &DenseMatrix,
) -> Result<DenseMatrix, HierarchyError> {
    if plan.plan.cols() != m_hi.rows() {
        return Err(HierarchyError::DimensionMismatch(
            "plan/activation shapes incompatible".into(),
        ));
    }
    let (k_lo, k_hi) = plan.plan.shape();
    let p = m_hi.cols();
    let mut tensor = vec![0.0; k_lo * k_hi * p];
    for k in 0..k_lo {
        for l in 0..k_hi {
            for pp in 0..p {
                tensor[(k * k_hi + l) * p + pp] = plan.plan.get(k, l) * m_hi.get(l, pp);
            }
        }
    }
    let mut out = DenseMatrix::zeros(k_lo, p);
    for k in 0..k_lo {
        for pp in 0..p {
            let mut best = f64::NEG_INFINITY;
            for l in 0..k_hi {
                best = best.max(tensor[(k * k_hi + l) * p + pp]);
            }
            out.set(k, pp, best);
        }
    }
    Ok(out)
}

/// Row and column orderings that bring similar rows (and columns) of a plan
/// next to each other: a greedy nearest-neighbor chain over cosine
/// similarity, seeded at the globally most similar pair, ties always to the
/// lowest index. Returns `(row_perm, col_perm)` where `perm[new] = old`.
pub fn reorder_hierarchy(plan: &TransportPlan) -> (Vec<usize>, Vec<usize>) {
    let rows: Vec<Vec<f64>> = (0..plan.plan.rows()).map(|r| plan.plan.row(r).to_vec()).collect();
    let t = plan.plan.transpose();
    let cols: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    (greedy_chain(&rows), greedy_chain(&cols))
}

fn greedy_chain(vectors: &[Vec<f64>]) -> Vec<usize> {
    let n = vectors.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            -1.0
        } else {
            dot / (na * nb)
        }
    };
    let mut best_pair = (0, 1);
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let s = sim(&vectors[i], &vectors[j]);
            if s > best {
                best = s;
                best_pair = (i, j);
            }
        }
    }
    let mut chain = vec![best_pair.0, best_pair.1];
    let mut used = vec![false; n];
    used[best_pair.0] = true;
    used[best_pair.1] = true;
    while chain.len() < n {
        let last = *chain.last().unwrap();
        let mut next = None;
        let mut next_sim = f64::NEG_INFINITY;
        for (u, flag) in used.iter().enumerate() {
            if *flag {
                continue;
            }
            let s = sim(&vectors[last], &vectors[u]);
            if s > next_sim {
                next_sim = s;
                next = Some(u);
            }
        }
        let u = next.expect("unvisited vector must exist");
        used[u] = true;
        chain.push(u);
    }
    chain
}

/// Applies `(row_perm, col_perm)` from [`reorder_hierarchy`]:
/// `out[r][c] = m[row_perm[r]][col_perm[c]]`.
pub fn apply_permutation(m: &DenseMatrix, row_perm: &[usize], col_perm: &[usize]) -> DenseMatrix {
    assert_eq!(row_perm.len(), m.rows());
    assert_eq!(col_perm.len(), m.cols());
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, m.get(row_perm[r], col_perm[c]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_of(m: DenseMatrix) -> TransportPlan {
        TransportPlan {
            row_marginal: uniform_marginal(m.rows()),
            col_marginal: uniform_marginal(m.cols()),
            plan: m,
            temperature: 0.02,
            iterations_run: 0,
            marginal_violation: 0.0,
            converged: true,
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(expansion_schedule(27, 2.0, 3).unwrap(), vec![27, 54, 108]);
        assert_eq!(expansion_schedule(27, 1.0, 2).unwrap(), vec![27, 27]);
        // 27*1.5 = 40.5 rounds half-up to 41; 27*2.25 = 60.75 rounds to 61.
        assert_eq!(expansion_schedule(27, 1.5, 3).unwrap(), vec![27, 41, 61]);
    }

    #[test]
    fn schedule_reports_rounding_collapse() {
        let err = expansion_schedule(1, 1.2, 2).unwrap_err();
        assert!(matches!(err, HierarchyError::InvalidConfig(_)));
        assert!(expansion_schedule(0, 2.0, 1).is_err());
        assert!(expansion_schedule(3, 0.5, 2).is_err());
    }

    fn batch(projected: DenseMatrix) -> FeatureBatch {
        FeatureBatch::with_projection(projected.clone(), projected)
    }

    #[test]
    fn soft_assign_matches_centers() {
        let head =
            ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let features = batch(DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let act = soft_assign(&head, &features).unwrap();
        assert!((act.matrix.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((act.matrix.get(1, 1) - 1.0).abs() < 1e-12);

        let s = 1.0 / 2f64.sqrt();
        let diag = batch(DenseMatrix::from_rows(&[&[s, s]]));
        let act = soft_assign(&head, &diag).unwrap();
        assert!((act.matrix.get(0, 0) - s).abs() < 1e-12);
        assert!((act.matrix.get(1, 0) - s).abs() < 1e-12);
    }

    #[test]
    fn soft_assign_zeroes_orthogonal_feature() {
        let head = ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0, 0.0]])).unwrap();
        let features = batch(DenseMatrix::from_rows(&[&[0.0, 0.0, 2.0]]));
        let act = soft_assign(&head, &features).unwrap();
        assert_eq!(act.matrix.get(0, 0), 0.0);
    }

    #[test]
    fn baseline_assign_keeps_sign() {
        let head = ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0]])).unwrap();
        let features = batch(DenseMatrix::from_rows(&[&[-1.0, 0.0]]));
        let soft = soft_assign(&head, &features).unwrap();
        let base = baseline_assign(&head, &features).unwrap();
        assert_eq!(soft.matrix.get(0, 0), 0.0);
        assert!((base.matrix.get(0, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_assign_blocks_feature_gradient() {
        let head =
            ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.4], &[-0.3, 1.0]])).unwrap();
        let features = batch(DenseMatrix::from_rows(&[&[0.8, 0.2], &[0.1, -0.9]]));
        let upstream = DenseMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);

        let base = baseline_assign(&head, &features).unwrap();
        let g = assign_backward(&head, &features, &base, &upstream).unwrap();
        assert!(g.features.is_none());

        let soft = soft_assign(&head, &features).unwrap();
        let g = assign_backward(&head, &features, &soft, &upstream).unwrap();
        let feats = g.features.unwrap();
        assert!(feats.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn soft_assign_feature_gradient_matches_finite_differences() {
        // d(sum of M)/dF: nonzero under the soft assignment and equal to the
        // central-difference estimate away from clip boundaries.
        let head = ClusterHead::new(
            0,
            DenseMatrix::from_rows(&[&[1.0, 0.4, -0.2], &[-0.3, 1.0, 0.5]]),
        )
        .unwrap();
        let projected = DenseMatrix::from_rows(&[&[0.8, 0.2, 0.4], &[0.1, -0.9, 0.3]]);
        let features = batch(projected.clone());
        let act = soft_assign(&head, &features).unwrap();
        // All similarities must be clear of the clip for the comparison.
        assert!(act.matrix.data().iter().all(|&s| s == 0.0 || s > 1e-3));
        let upstream = DenseMatrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let analytic = assign_backward(&head, &features, &act, &upstream)
            .unwrap()
            .features
            .unwrap();

        let fd = omh_oracles::finite_difference_grad(
            |flat| {
                let f = batch(DenseMatrix::from_vec(2, 3, flat.to_vec()).unwrap());
                soft_assign(&head, &f).unwrap().matrix.sum()
            },
            projected.data(),
            1e-6,
        );
        let fd: Vec<Option<f64>> = fd.into_iter().map(Some).collect();
        let err = omh_oracles::max_rel_error(analytic.data(), &fd);
        assert!(err < 1e-4, "relative error {err}");
        assert!(analytic.data().iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn assign_dimension_mismatch_is_reported() {
        let head = ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0]])).unwrap();
        let features = batch(DenseMatrix::from_rows(&[&[1.0, 0.0, 0.0]]));
        assert!(matches!(
            soft_assign(&head, &features),
            Err(HierarchyError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn build_plans_trivial_cases() {
        let config = HierarchyConfig {
            depth: 1,
            base_clusters: 2,
            expansion: 2.0,
            ot_temperature: 0.02,
        };
        let heads =
            vec![ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap()];
        let mut stack = HierarchyStack::new(config, heads).unwrap();
        stack.build_plans(&SinkhornSettings::default()).unwrap();
        assert!(stack.plans.is_empty());

        let config = HierarchyConfig {
            depth: 2,
            base_clusters: 1,
            expansion: 1.0,
            ot_temperature: 0.02,
        };
        let heads = vec![
            ClusterHead::new(0, DenseMatrix::from_rows(&[&[0.6, 0.8]])).unwrap(),
            ClusterHead::new(1, DenseMatrix::from_rows(&[&[0.6, 0.8]])).unwrap(),
        ];
        let mut stack = HierarchyStack::new(config, heads).unwrap();
        stack.build_plans(&SinkhornSettings::default()).unwrap();
        assert_eq!(stack.plans.len(), 1);
        assert!((stack.plans[0].plan.get(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stack_rejects_schedule_mismatch() {
        let config = HierarchyConfig {
            depth: 2,
            base_clusters: 2,
            expansion: 2.0,
            ot_temperature: 0.02,
        };
        let heads = vec![
            ClusterHead::new(0, DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(),
            ClusterHead::new(1, DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(),
        ];
        assert!(matches!(
            HierarchyStack::new(config, heads),
            Err(HierarchyError::InvalidConfig(_))
        ));
    }

    #[test]
    fn transported_activation_examples() {
        let id = plan_of(DenseMatrix::from_rows(&[&[1.0]]));
        let m = DenseMatrix::from_rows(&[&[0.7]]);
        assert!((transported_activation(&id, &m).unwrap().get(0, 0) - 0.7).abs() < 1e-15);

        let diag = plan_of(DenseMatrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.5]]));
        let m = DenseMatrix::from_rows(&[&[0.8], &[0.2]]);
        let out = transported_activation(&diag, &m).unwrap();
        assert!((out.get(0, 0) - 0.4).abs() < 1e-15);
        assert!((out.get(1, 0) - 0.1).abs() < 1e-15);

        let wide = plan_of(DenseMatrix::from_rows(&[&[0.3, 0.2]]));
        let m = DenseMatrix::from_rows(&[&[0.5], &[0.9]]);
        let out = transported_activation(&wide, &m).unwrap();
        assert!((out.get(0, 0) - 0.18).abs() < 1e-15);
        let dense = transported_activation_via_tensor(&wide, &m).unwrap();
        assert_eq!(out, dense);
    }

    #[test]
    fn transported_backward_routes_to_argmax_only() {
        let plan = plan_of(DenseMatrix::from_rows(&[&[0.3, 0.2]]));
        let m = DenseMatrix::from_rows(&[&[0.5], &[0.9]]);
        let upstream = DenseMatrix::from_rows(&[&[1.0]]);
        let g = transported_activation_backward(&plan, &m, &upstream).unwrap();
        // argmax is l=1 (0.18 > 0.15): gradient there is the plan weight.
        assert_eq!(g.get(0, 0), 0.0);
        assert!((g.get(1, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reorder_identity_on_1x1_and_ordered_plans() {
        let one = plan_of(DenseMatrix::from_rows(&[&[1.0]]));
        assert_eq!(reorder_hierarchy(&one), (vec![0], vec![0]));

        // Diagonal-dominant band: the greedy chain keeps the given order.
        let band = plan_of(DenseMatrix::from_rows(&[
            &[0.5, 0.2, 0.0],
            &[0.2, 0.5, 0.2],
            &[0.0, 0.2, 0.5],
        ]));
        let (rp, cp) = reorder_hierarchy(&band);
        assert_eq!(rp, vec![0, 1, 2]);
        assert_eq!(cp, vec![0, 1, 2]);
    }

    #[test]
    fn reorder_restores_shuffled_blocks() {
        // Block plan with columns shuffled by [0, 2, 1, 3].
        let shuffled = plan_of(DenseMatrix::from_rows(&[
            &[0.25, 0.0, 0.25, 0.0],
            &[0.0, 0.25, 0.0, 0.25],
        ]));
        let (rp, cp) = reorder_hierarchy(&shuffled);
        let restored = apply_permutation(&shuffled.plan, &rp, &cp);
        // Each row must hold its two block entries contiguously.
        for r in 0..2 {
            let row = restored.row(r);
            let hot: Vec<usize> =
                row.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
            assert_eq!(hot.len(), 2);
            assert_eq!(hot[1], hot[0] + 1, "row {r} not contiguous: {row:?}");
        }
    }
}

//! Wasserstein dependency measure: `I_W(U, V) = W1(p(U, V), p(U) p(V))`.
//!
//! Exact on finite joints (via the OT solver) and estimated on continuous
//! representations by a weight-clipped critic that scores aligned pairs
//! against shuffled ones.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, WfcError};
use crate::nn::{hconcat, Gradients, MlpParams, OptimizerState};
use crate::ot::{
    onehot_cost, onehot_distance, pair_cost, total_variation, wasserstein1_exact, DiscreteDistribution,
    PairMetric, MASS_TOLERANCE, MAX_SUPPORT,
};

/// Probability table over `U x V` (rows index `U`).
#[derive(Clone, Debug, PartialEq)]
pub struct JointPmf {
    probs: Array2<f64>,
}

impl JointPmf {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(WfcError::dist("empty joint table"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(WfcError::dist(format!("joint entry {bad} is negative or non-finite")));
        }
        let total = probs.sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(WfcError::dist(format!("joint sums to {total}, not 1")));
        }
        Ok(JointPmf { probs: probs / total })
    }

    /// Empirical joint of two aligned label vectors.
    pub fn from_pairs(u: &[usize], v: &[usize], ku: usize, kv: usize) -> Result<Self> {
        if u.len() != v.len() {
            return Err(WfcError::shape(format!("{} vs {} labels", u.len(), v.len())));
        }
        if u.is_empty() {
            return Err(WfcError::dist("no observations"));
        }
        let mut counts = Array2::<f64>::zeros((ku, kv));
        for (&a, &b) in u.iter().zip(v) {
            if a >= ku || b >= kv {
                return Err(WfcError::dist(format!("pair ({a}, {b}) outside {ku}x{kv}")));
            }
            counts[[a, b]] += 1.0;
        }
        JointPmf::from_counts(counts)
    }

    pub fn from_counts(counts: Array2<f64>) -> Result<Self> {
        let total = counts.sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(WfcError::dist(format!("counts sum to {total}")));
        }
        JointPmf::new(counts / total)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.probs.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        self.probs.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// Product of the two marginals.
    pub fn product(&self) -> JointPmf {
        let (pu, pv) = (self.row_marginal(), self.col_marginal());
        JointPmf {
            probs: Array2::from_shape_fn(self.dim(), |(i, j)| pu[i] * pv[j]),
        }
    }

    /// The swapped table over `V x U`.
    pub fn transpose(&self) -> JointPmf {
        JointPmf {
            probs: self.probs.t().to_owned(),
        }
    }

    /// `p(U | V = v)`, or `None` when `P(V = v) = 0`.
    pub fn conditional_of_row_given_col(&self, v: usize) -> Option<Vec<f64>> {
        let col = self.probs.column(v);
        let total = col.sum();
        (total > 0.0).then(|| col.iter().map(|p| p / total).collect())
    }

    /// Flatten onto the pair space with `u` varying fastest (index `v * |U| + u`).
    pub fn flatten(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::new(self.probs.t().iter().copied().collect())
    }

    /// Largest absolute entrywise gap to the product of the marginals.
    pub fn independence_gap(&self) -> f64 {
        let prod = self.product();
        self.probs
            .iter()
            .zip(prod.probs.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Exact `I_W` on a finite joint under the one-hot pair metric.
///
/// Small tables are solved directly on the flattened pair space; larger ones
/// are decomposed into per-column transport problems, which is exact because
/// the joint and the product share the `V` marginal.
pub fn iw_exact(joint: &JointPmf, pnorm: f64) -> Result<f64> {
    let (ku, kv) = joint.dim();
    if ku * kv <= MAX_SUPPORT {
        iw_exact_direct(joint, pnorm, PairMetric::Concatenated)
    } else {
        iw_exact_blockwise(joint, pnorm)
    }
}

/// `I_W` by one transport problem over the flattened pair space.
pub fn iw_exact_direct(joint: &JointPmf, pnorm: f64, metric: PairMetric) -> Result<f64> {
    let (ku, kv) = joint.dim();
    let cost = pair_cost(ku, kv, pnorm, metric)?;
    let (w, _) = wasserstein1_exact(&joint.flatten()?, &joint.product().flatten()?, &cost)?;
    Ok(w)
}

/// `I_W` as `sum_v P(v) W1(p(U | v), p(U))` with one-hot costs on `U`.
pub fn iw_exact_blockwise(joint: &JointPmf, pnorm: f64) -> Result<f64> {
    let (ku, kv) = joint.dim();
    let pv = joint.col_marginal();
    if ku == 1 {
        return Ok(0.0);
    }
    let cost = onehot_cost(ku, pnorm)?;
    let pu = DiscreteDistribution::new(joint.row_marginal())?;
    let mut total = 0.0;
    for (v, &weight) in pv.iter().enumerate().take(kv) {
        if let Some(cond) = joint.conditional_of_row_given_col(v) {
            let (w, _) = wasserstein1_exact(&DiscreteDistribution::new(cond)?, &pu, &cost)?;
            total += weight * w;
        }
    }
    Ok(total)
}

/// Closed form `2^(1/p) TV(p(U, V), p(U) p(V))` of the one-hot `I_W`.
pub fn iw_onehot_closed_form(joint: &JointPmf, pnorm: f64) -> Result<f64> {
    let tv = total_variation(&joint.flatten()?, &joint.product().flatten()?)?;
    Ok(onehot_distance(pnorm) * tv)
}

/// Row-aligned representation pairs `(z_y, z_a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    zy: Array2<f64>,
    za: Array2<f64>,
    dependent: bool,
}

impl PairBatch {
    /// An aligned (dependent) batch.
    pub fn new(zy: Array2<f64>, za: Array2<f64>) -> Result<Self> {
        if zy.nrows() != za.nrows() {
            return Err(WfcError::shape(format!(
                "z_y has {} rows, z_a has {}",
                zy.nrows(),
                za.nrows()
            )));
        }
        Ok(PairBatch {
            zy,
            za,
            dependent: true,
        })
    }

    pub fn zy(&self) -> ArrayView2<'_, f64> {
        self.zy.view()
    }

    pub fn za(&self) -> ArrayView2<'_, f64> {
        self.za.view()
    }

    pub fn is_dependent(&self) -> bool {
        self.dependent
    }

    pub fn len(&self) -> usize {
        self.zy.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.zy.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.zy.ncols() + self.za.ncols()
    }

    /// Rows `[z_y | z_a]`.
    pub fn concatenated(&self) -> Array2<f64> {
        hconcat(self.zy.view(), self.za.view()).expect("row counts checked at construction")
    }
}

/// Break the pairing by permuting the `z_a` rows uniformly at random.
pub fn shuffle_pairing<R: Rng + ?Sized>(batch: &PairBatch, rng: &mut R) -> PairBatch {
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    PairBatch {
        zy: batch.zy.clone(),
        za: batch.za.select(ndarray::Axis(0), &perm),
        dependent: false,
    }
}

/// Critic value with its gradients.
#[derive(Clone, Debug)]
pub struct CriticEval {
    /// `mean C(dep) - mean C(ind)`.
    pub value: f64,
    /// Gradient of `value` w.r.t. the critic parameters.
    pub critic_grads: Gradients,
    /// Gradient of `value` w.r.t. the concatenated dependent rows.
    pub dep_input_grad: Array2<f64>,
    /// Gradient of `value` w.r.t. the concatenated independent rows.
    pub ind_input_grad: Array2<f64>,
}

impl CriticEval {
    /// Gradient of `value` w.r.t. the `z_y` rows, which both batches share.
    pub fn zy_grad(&self, zy_width: usize) -> Array2<f64> {
        &self.dep_input_grad.slice(s![.., ..zy_width]) + &self.ind_input_grad.slice(s![.., ..zy_width])
    }
}

fn check_critic(critic: &MlpParams, dep: &PairBatch, ind: &PairBatch) -> Result<()> {
    if critic.output_dim() != 1 {
        return Err(WfcError::shape(format!(
            "critic must have one output, has {}",
            critic.output_dim()
        )));
    }
    for b in [dep, ind] {
        if b.width() != critic.input_dim() {
            return Err(WfcError::shape(format!(
                "pair width {} does not match critic input {}",
                b.width(),
                critic.input_dim()
            )));
        }
        if b.is_empty() {
            return Err(WfcError::config("critic batches must be nonempty"));
        }
    }
    Ok(())
}

/// Value of the critic estimate and its gradients.
pub fn critic_objective(critic: &MlpParams, dep: &PairBatch, ind: &PairBatch) -> Result<CriticEval> {
    check_critic(critic, dep, ind)?;
    critic_difference(critic, dep.concatenated().view(), ind.concatenated().view())
}

/// `mean C(first) - mean C(second)` with gradients, for any two row sets.
pub fn critic_difference(critic: &MlpParams, first: ArrayView2<f64>, second: ArrayView2<f64>) -> Result<CriticEval> {
    if critic.output_dim() != 1 {
        return Err(WfcError::shape(format!(
            "critic must have one output, has {}",
            critic.output_dim()
        )));
    }
    if first.nrows() == 0 || second.nrows() == 0 {
        return Err(WfcError::config("critic batches must be nonempty"));
    }
    let dep_trace = critic.forward(first)?;
    let ind_trace = critic.forward(second)?;
    let (nd, ni) = (first.nrows() as f64, second.nrows() as f64);
    let value = dep_trace.logits().mean().unwrap_or(0.0) - ind_trace.logits().mean().unwrap_or(0.0);
    let dep_seed = Array2::from_elem((first.nrows(), 1), 1.0 / nd);
    let ind_seed = Array2::from_elem((second.nrows(), 1), -1.0 / ni);
    let g_dep = critic.backward(&dep_trace, dep_seed.view())?;
    let g_ind = critic.backward(&ind_trace, ind_seed.view())?;
    let mut critic_grads = g_dep.clone();
    for (acc, g) in critic_grads.layers.iter_mut().zip(&g_ind.layers) {
        acc.weight += &g.weight;
        acc.bias += &g.bias;
    }
    critic_grads.input = Array2::zeros((0, 0));
    Ok(CriticEval {
        value,
        critic_grads,
        dep_input_grad: g_dep.input,
        ind_input_grad: g_ind.input,
    })
}

/// One ascent step on `mean C(first) - mean C(second)` followed by weight
/// clipping. Returns the value before the step.
pub fn critic_difference_step(
    critic: &mut MlpParams,
    optimizer: &mut OptimizerState,
    first: ArrayView2<f64>,
    second: ArrayView2<f64>,
    clip: f64,
) -> Result<f64> {
    let mut eval = critic_difference(critic, first, second)?;
    eval.critic_grads.scale(-1.0);
    optimizer.step(critic, &eval.critic_grads)?;
    critic.clip_weights(clip);
    Ok(eval.value)
}

/// Critic value only; no gradients.
pub fn critic_value(critic: &MlpParams, dep: &PairBatch, ind: &PairBatch) -> Result<f64> {
    check_critic(critic, dep, ind)?;
    let d = critic.forward(dep.concatenated().view())?;
    let i = critic.forward(ind.concatenated().view())?;
    Ok(d.logits().mean().unwrap_or(0.0) - i.logits().mean().unwrap_or(0.0))
}

/// One ascent step on the critic objective followed by weight clipping.
/// Returns the objective value before the step.
pub fn critic_ascent_step(
    critic: &mut MlpParams,
    optimizer: &mut OptimizerState,
    dep: &PairBatch,
    ind: &PairBatch,
    clip: f64,
) -> Result<f64> {
    check_critic(critic, dep, ind)?;
    critic_difference_step(
        critic,
        optimizer,
        dep.concatenated().view(),
        ind.concatenated().view(),
        clip,
    )
}

/// Mean critic value over `(dependent, independent)` batch pairs.
pub fn estimate_iw_critic(critic: &MlpParams, batches: &[(PairBatch, PairBatch)]) -> Result<f64> {
    if batches.is_empty() {
        return Err(WfcError::config("no batches to estimate from"));
    }
    let mut total = 0.0;
    for (dep, ind) in batches {
        total += critic_value(critic, dep, ind)?;
    }
    Ok(total / batches.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, OptimizerKind};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example_joint() -> JointPmf {
        // rows: prediction 0/1, cols: group 0/1; P(A=1)=0.5,
        // P(Yhat=1|A=1)=0.8, P(Yhat=1|A=0)=0.4
        JointPmf::new(array![[0.3, 0.1], [0.2, 0.4]]).unwrap()
    }

    fn random_joint(rng: &mut ChaCha8Rng, ku: usize, kv: usize) -> JointPmf {
        JointPmf::from_counts(Array2::from_shape_simple_fn((ku, kv), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn product_joint_has_zero_dependence() {
        let prod = example_joint().product();
        assert!(iw_exact(&prod, 2.0).unwrap().abs() < 1e-12);
        assert!(prod.independence_gap() < 1e-15);
    }

    #[test]
    fn binary_example_values() {
        let j = example_joint();
        assert!((iw_exact(&j, 1.0).unwrap() - 0.4).abs() < 1e-12);
        let p2 = iw_exact(&j, 2.0).unwrap();
        assert!((p2 - 2f64.sqrt() / 2.0 * 0.4).abs() < 1e-12);
        assert!((p2 - iw_onehot_closed_form(&j, 2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn blockwise_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let ku = rng.random_range(2..7);
            let kv = rng.random_range(2..7);
            let j = random_joint(&mut rng, ku, kv);
            let direct = iw_exact_direct(&j, 2.0, PairMetric::Concatenated).unwrap();
            let block = iw_exact_blockwise(&j, 2.0).unwrap();
            assert!((direct - block).abs() < 1e-10, "{direct} vs {block}");
        }
    }

    #[test]
    fn large_tables_use_blockwise_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let j = random_joint(&mut rng, 40, 30);
        let w = iw_exact(&j, 1.0).unwrap();
        assert!((w - iw_onehot_closed_form(&j, 1.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn joint_validation() {
        assert!(JointPmf::new(array![[0.5, 0.6]]).is_err());
        assert!(JointPmf::new(array![[-0.1, 1.1]]).is_err());
        assert!(JointPmf::from_pairs(&[0, 2], &[0, 0], 2, 1).is_err());
        let j = JointPmf::from_pairs(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 2).unwrap();
        assert_eq!(j.probs(), &array![[0.25, 0.0], [0.25, 0.5]]);
    }

    #[test]
    fn shuffle_preserves_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zy = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
        let za = Array2::from_shape_fn((6, 1), |(i, _)| i as f64);
        let b = PairBatch::new(zy.clone(), za).unwrap();
        let s = shuffle_pairing(&b, &mut rng);
        assert!(!s.is_dependent());
        assert_eq!(s.zy(), zy.view());
        let mut vals: Vec<f64> = s.za().iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let again = shuffle_pairing(&b, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s, again);

        let single = PairBatch::new(array![[1.0]], array![[2.0]]).unwrap();
        assert_eq!(shuffle_pairing(&single, &mut rng).za(), single.za());
    }

    #[test]
    fn identical_batches_give_zero() {
        let critic = MlpParams::init(&[3, 4, 1], Activation::Relu, 0).unwrap();
        let b = PairBatch::new(array![[0.1, 0.2], [0.3, -0.4]], array![[1.0], [0.0]]).unwrap();
        assert_eq!(critic_objective(&critic, &b, &b).unwrap().value, 0.0);
    }

    #[test]
    fn zero_critic_is_flat() {
        let critic = MlpParams::zeros(&[3, 4, 1], Activation::Relu).unwrap();
        let dep = PairBatch::new(array![[0.1, 0.2], [0.3, -0.4]], array![[1.0], [0.0]]).unwrap();
        let ind = shuffle_pairing(&dep, &mut ChaCha8Rng::seed_from_u64(2));
        let eval = critic_objective(&critic, &dep, &ind).unwrap();
        assert_eq!(eval.value, 0.0);
        assert_eq!(eval.critic_grads.max_abs(), 0.0);
        assert!(eval.dep_input_grad.iter().all(|g| *g == 0.0));
        assert_eq!(estimate_iw_critic(&critic, &[(dep, ind)]).unwrap(), 0.0);
    }

    #[test]
    fn width_mismatch_and_empty_list() {
        let critic = MlpParams::init(&[4, 2, 1], Activation::Relu, 0).unwrap();
        let b = PairBatch::new(array![[0.1, 0.2]], array![[1.0]]).unwrap();
        assert!(matches!(critic_objective(&critic, &b, &b), Err(WfcError::Shape(_))));
        assert!(matches!(estimate_iw_critic(&critic, &[]), Err(WfcError::InvalidConfig(_))));
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let critic = MlpParams::init(&[5, 6, 1], Activation::Tanh, 4).unwrap();
        let zy = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let za = Array2::from_shape_simple_fn((4, 2), || rng.random_range(-1.0..1.0));
        let dep = PairBatch::new(zy.clone(), za.clone()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ind_za = za.select(ndarray::Axis(0), &perm);
        let eval = critic_objective(&critic, &dep, &PairBatch::new(zy.clone(), ind_za.clone()).unwrap()).unwrap();
        let grad = eval.zy_grad(3);
        let value = |zy: &Array2<f64>| {
            let d = PairBatch::new(zy.clone(), za.clone()).unwrap();
            let i = PairBatch::new(zy.clone(), ind_za.clone()).unwrap();
            critic_value(&critic, &d, &i).unwrap()
        };
        let h = 1e-5;
        for r in 0..4 {
            for c in 0..3 {
                let mut up = zy.clone();
                up[[r, c]] += h;
                let mut dn = zy.clone();
                dn[[r, c]] -= h;
                let fd = (value(&up) - value(&dn)) / (2.0 * h);
                let err = (fd - grad[[r, c]]).abs() / fd.abs().max(grad[[r, c]].abs()).max(1e-8);
                assert!(err < 1e-4, "({r},{c}): {fd} vs {}", grad[[r, c]]);
            }
        }
    }

    #[test]
    fn value_is_row_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let critic = MlpParams::init(&[3, 5, 1], Activation::Relu, 1).unwrap();
        let zy = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-1.0..1.0));
        let za = Array2::from_shape_simple_fn((5, 1), || rng.random_range(-1.0..1.0));
        let dep = PairBatch::new(zy.clone(), za.clone()).unwrap();
        let ind = shuffle_pairing(&dep, &mut rng);
        let v = critic_value(&critic, &dep, &ind).unwrap();
        let perm = [4usize, 2, 0, 1, 3];
        let dep2 = PairBatch::new(zy.select(ndarray::Axis(0), &perm), za.select(ndarray::Axis(0), &perm)).unwrap();
        let ind2 = PairBatch::new(
            ind.zy().select(ndarray::Axis(0), &perm),
            ind.za().select(ndarray::Axis(0), &perm),
        )
        .unwrap();
        assert!((v - critic_value(&critic, &dep2, &ind2).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ascent_step_respects_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut critic = MlpParams::init(&[3, 8, 1], Activation::Relu, 2).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1e-2, &critic).unwrap();
        for _ in 0..20 {
            let zy = Array2::from_shape_simple_fn((8, 2), || rng.random_range(-1.0..1.0));
            let dep = PairBatch::new(zy.clone(), zy.slice(s![.., ..1]).to_owned()).unwrap();
            let ind = shuffle_pairing(&dep, &mut rng);
            let v = critic_ascent_step(&mut critic, &mut opt, &dep, &ind, 0.05).unwrap();
            assert!(v.is_finite());
            assert!(critic.max_abs() <= 0.05);
        }
    }
}

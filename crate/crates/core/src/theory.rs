//! Numeric checks of the fairness/dependency identities and bounds on
//! finite instances, plus random sweeps over them.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::seeded_stream;
use crate::dependency::{iw_exact, JointPmf};
use crate::error::{Result, WfcError};
use crate::ot::{
    onehot_cost, onehot_distance, pair_cost, pnorm_distance, wasserstein1_exact, CostMatrix, DiscreteDistribution,
    PairMetric, MASS_TOLERANCE,
};

/// Largest violation tolerated by every check.
pub const CHECK_TOLERANCE: f64 = 1e-9;

/// Result of comparing two sides of an identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

impl EqualityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        EqualityCheck {
            lhs,
            rhs,
            abs_diff: (lhs - rhs).abs(),
        }
    }
}

/// Result of checking `lhs <= rhs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl InequalityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        InequalityCheck {
            lhs,
            rhs,
            holds: lhs <= rhs + CHECK_TOLERANCE,
        }
    }

    pub fn violation(&self) -> f64 {
        (self.lhs - self.rhs).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMode {
    /// Joint over predicted label x group.
    Dp,
    /// Joint over (prediction correct) x group, conditional on one true label.
    Eo,
}

/// Compare `I_W` of a prediction/group joint with its group-fairness closed form.
///
/// `joint` is indexed `[prediction, group]`; in `Eo` mode row 0 means
/// "wrong" and row 1 "right", and the table is already conditioned on a
/// true label.
pub fn check_lemma1(joint: &JointPmf, mode: FairnessMode, pnorm: f64) -> Result<EqualityCheck> {
    let lhs = iw_exact(joint, pnorm)?;
    Ok(EqualityCheck::new(lhs, fairness_closed_form(joint, mode, pnorm)?))
}

fn fairness_closed_form(joint: &JointPmf, mode: FairnessMode, pnorm: f64) -> Result<f64> {
    let probs = joint.probs();
    let (ky, ka) = joint.dim();
    let pa = joint.col_marginal();
    let py = joint.row_marginal();
    let c = onehot_distance(pnorm);
    match mode {
        FairnessMode::Dp => {
            let mut total = 0.0;
            for a in 0..ka {
                if pa[a] == 0.0 {
                    continue;
                }
                let gap: f64 = (0..ky).map(|y| (probs[[y, a]] / pa[a] - py[y]).abs()).sum();
                total += pa[a] * gap;
            }
            Ok(c / 2.0 * total)
        }
        FairnessMode::Eo => {
            if ky != 2 {
                return Err(WfcError::dist(format!(
                    "equality-of-opportunity joint needs 2 rows (wrong, right), got {ky}"
                )));
            }
            let mut total = 0.0;
            for a in 0..ka {
                if pa[a] == 0.0 {
                    continue;
                }
                total += pa[a] * (probs[[1, a]] / pa[a] - py[1]).abs();
            }
            Ok(c * total)
        }
    }
}

/// Joint pmf over (predicted label, predicted group, true group).
#[derive(Clone, Debug, PartialEq)]
pub struct TripleJointPmf {
    probs: Array3<f64>,
    pnorm: f64,
}

impl TripleJointPmf {
    pub fn new(probs: Array3<f64>, pnorm: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(WfcError::dist("empty joint tensor"));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(WfcError::dist(format!("joint entry {bad} is negative or non-finite")));
        }
        let total = probs.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(WfcError::dist(format!("joint sums to {total}, not 1")));
        }
        if !(pnorm >= 1.0 && pnorm.is_finite()) {
            return Err(WfcError::config(format!("pnorm must be >= 1, got {pnorm}")));
        }
        Ok(TripleJointPmf { probs, pnorm })
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn pnorm(&self) -> f64 {
        self.pnorm
    }

    /// Joint of prediction and true group.
    pub fn prediction_vs_group(&self) -> Result<JointPmf> {
        JointPmf::new(self.probs.sum_axis(Axis(1)))
    }

    /// Joint of prediction and predicted group.
    pub fn prediction_vs_predicted_group(&self) -> Result<JointPmf> {
        JointPmf::new(self.probs.sum_axis(Axis(2)))
    }

    /// `P(A != Ahat)`; the two group axes are compared index by index.
    pub fn mismatch(&self) -> f64 {
        self.probs
            .indexed_iter()
            .filter(|((_, ah, a), _)| ah != a)
            .map(|(_, p)| p)
            .sum()
    }
}

/// `I_W(Yhat, A) <= I_W(Yhat, Ahat) + 2 * 2^(1/p) * P(A != Ahat)`.
pub fn check_lemma2(triple: &TripleJointPmf) -> Result<InequalityCheck> {
    let p = triple.pnorm;
    let lhs = iw_exact(&triple.prediction_vs_group()?, p)?;
    let rhs = iw_exact(&triple.prediction_vs_predicted_group()?, p)? + 2.0 * onehot_distance(p) * triple.mismatch();
    Ok(InequalityCheck::new(lhs, rhs))
}

/// Finite-sample bound on `I_W(Yhat, A)` from the attribute model's
/// empirical error `eps_hat` on `m` examples and VC dimension `d`.
pub fn theorem3_rhs(iw_hat: f64, eps_hat: f64, vc_dim: f64, m: f64, delta: f64, pnorm: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(WfcError::config(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(vc_dim >= 1.0 && m >= vc_dim && m.is_finite()) {
        return Err(WfcError::config(format!("need m >= d >= 1, got m={m}, d={vc_dim}")));
    }
    if !(iw_hat >= 0.0 && eps_hat >= 0.0) {
        return Err(WfcError::config("dependency and error estimates must be nonnegative"));
    }
    let e = std::f64::consts::E;
    let complexity = (4.0 / m * (vc_dim * (2.0 * e * m / vc_dim).ln() + (4.0 / delta).ln())).sqrt();
    Ok(iw_hat + 2.0 * onehot_distance(pnorm) * (eps_hat + complexity))
}

/// Covariate-shift bound with caller-supplied divergence and joint-error terms.
pub fn theorem4_rhs(iw_hat: f64, eps_source: f64, hdh_divergence: f64, lambda_term: f64, pnorm: f64) -> Result<f64> {
    for (name, v) in [
        ("iw", iw_hat),
        ("source error", eps_source),
        ("divergence", hdh_divergence),
        ("lambda", lambda_term),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(WfcError::config(format!("{name} must be a finite nonnegative number, got {v}")));
        }
    }
    Ok(iw_hat + 2.0 * onehot_distance(pnorm) * (eps_source + 0.5 * hdh_divergence + lambda_term))
}

/// Affine map `z -> W z + b` with `W` shaped `(outputs, inputs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let z = Array1::from(z.to_vec());
        (self.weight.dot(&z) + &self.bias).to_vec()
    }

    /// Operator norm of `W` induced by the p-norm (p = 1 or 2).
    pub fn operator_norm(&self, pnorm: f64) -> Result<f64> {
        operator_norm(&self.weight, pnorm)
    }
}

/// Induced `p -> p` matrix norm for p = 1 (max column sum) or p = 2 (spectral).
pub fn operator_norm(w: &Array2<f64>, pnorm: f64) -> Result<f64> {
    if pnorm == 1.0 {
        Ok(w.axis_iter(Axis(1))
            .map(|col| col.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max))
    } else if pnorm == 2.0 {
        let gram = w.t().dot(w);
        Ok(jacobi_eigenvalues(gram).into_iter().fold(0.0, f64::max).max(0.0).sqrt())
    } else {
        Err(WfcError::config(format!("operator norm only implemented for p in {{1, 2}}, got {pnorm}")))
    }
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[[i, i]]).collect()
}

/// Finite latent joint with linear classification heads.
///
/// Row `i` of `zy`/`za` is one support point of the latent pair, with mass
/// `probs[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHeadInstance {
    pub zy: Array2<f64>,
    pub za: Array2<f64>,
    pub probs: Vec<f64>,
    pub f: LinearHead,
    pub g: LinearHead,
    pub pnorm: f64,
    pub xi: f64,
}

pub const MAX_LATENT_SUPPORT: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem5Check {
    /// `I_W(Yhat, Ahat)` on the argmax joint.
    pub lhs: f64,
    /// Bound with the min(alpha, .) temperature term.
    pub bound: f64,
    /// Bound as written with the factor-2 simplification.
    pub bound_main: f64,
    /// Temperature from the closed form, when defined.
    pub lambda_used: Option<f64>,
    pub iw_latent: f64,
    pub delta: f64,
    pub alpha: f64,
    pub iota: f64,
    pub lipschitz: f64,
    pub holds: bool,
    pub holds_main: bool,
}

fn margin(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, scores[best] - runner_up)
}

/// Exact `I_W(Z_y, Z_a)` of a finite latent joint under the p-norm on
/// concatenated vectors.
pub fn latent_iw(zy: &Array2<f64>, za: &Array2<f64>, probs: &[f64], pnorm: f64) -> Result<f64> {
    let n = probs.len();
    if zy.nrows() != n || za.nrows() != n {
        return Err(WfcError::shape("latent supports and masses differ in length"));
    }
    let joint = DiscreteDistribution::new(probs.to_vec())?;
    let product = DiscreteDistribution::new(
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| probs[i] * probs[j])
            .collect(),
    )?;
    let concat = |i: usize, j: usize| -> Vec<f64> { zy.row(i).iter().chain(za.row(j).iter()).copied().collect() };
    let cost = Array2::from_shape_fn((n, n * n), |(k, col)| {
        pnorm_distance(&concat(k, k), &concat(col / n, col % n), pnorm)
    });
    let (w, _) = wasserstein1_exact(&joint, &product, &CostMatrix::new(cost)?)?;
    Ok(w)
}

/// Evaluate the representation-level bound on `I_W(Yhat, Ahat)`.
pub fn check_theorem5(inst: &LinearHeadInstance) -> Result<Theorem5Check> {
    let n = inst.probs.len();
    if n == 0 || n > MAX_LATENT_SUPPORT {
        return Err(WfcError::config(format!("latent support must have 1..={MAX_LATENT_SUPPORT} points, got {n}")));
    }
    if !(inst.xi > 0.0 && inst.xi.is_finite()) {
        return Err(WfcError::config(format!("margin threshold must be > 0, got {}", inst.xi)));
    }
    if inst.zy.ncols() != inst.f.weight.ncols() || inst.za.ncols() != inst.g.weight.ncols() {
        return Err(WfcError::shape("head input widths do not match the latent widths"));
    }
    let p = inst.pnorm;
    let (ny, na) = (inst.f.weight.nrows(), inst.g.weight.nrows());
    if ny < 2 || na < 2 {
        return Err(WfcError::config("heads need at least two outputs"));
    }
    let mut yhat = Vec::with_capacity(n);
    let mut ahat = Vec::with_capacity(n);
    let mut confident = 0.0;
    let mut any_positive = false;
    for i in 0..n {
        let (y, my) = margin(&inst.f.apply(inst.zy.row(i).as_slice().expect("row-major")));
        let (a, ma) = margin(&inst.g.apply(inst.za.row(i).as_slice().expect("row-major")));
        any_positive |= my > 0.0 && ma > 0.0;
        if my >= inst.xi && ma >= inst.xi {
            confident += inst.probs[i];
        }
        yhat.push(y);
        ahat.push(a);
    }
    if !any_positive {
        return Err(WfcError::DegenerateInstance("no support point has positive margins on both heads".into()));
    }
    let mut table = Array2::<f64>::zeros((ny, na));
    for i in 0..n {
        table[[yhat[i], ahat[i]]] += inst.probs[i];
    }
    let lhs = iw_exact(&JointPmf::new(table)?, p)?;

    let iw_latent = latent_iw(&inst.zy, &inst.za, &inst.probs, p)?;
    let delta = (1.0 - confident).clamp(0.0, 1.0);
    let arity = pnorm_distance(&[(ny - 1) as f64, (na - 1) as f64], &[0.0, 0.0], p);
    let alpha = onehot_distance(p) * arity * (1.0 - delta);
    let lipschitz = inst.f.operator_norm(p)?.max(inst.g.operator_norm(p)?);
    let iota = lipschitz * ((ny + na) as f64).powf((0.5 - 1.0 / p).abs());
    let beta = iota * iw_latent;
    let delta_term = onehot_distance(p) * arity * delta;

    let (sharp, main, lambda_used) = if alpha == 0.0 || beta == 0.0 {
        (0.0, 0.0, None)
    } else {
        let ratio = 2.0 * inst.xi * alpha / beta;
        let t = beta / inst.xi * (1.0 + (ratio.max(4.0) - 1.0).ln());
        (alpha.min(t), 2.0 * t, Some(ratio.ln() / inst.xi))
    };
    let bound = sharp + delta_term;
    let bound_main = main + delta_term;
    Ok(Theorem5Check {
        lhs,
        bound,
        bound_main,
        lambda_used,
        iw_latent,
        delta,
        alpha,
        iota,
        lipschitz,
        holds: lhs <= bound + CHECK_TOLERANCE,
        holds_main: lhs <= bound_main + CHECK_TOLERANCE,
    })
}

/// The three block-decomposition identities for one-hot costs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma7Check {
    /// `W1(p(U,W), p(U)p(W)) = sum_w W1(p(U|w), p(U)) P(w)`.
    pub dependency: EqualityCheck,
    /// `W1(p(U,W), p(V,W)) = sum_w W1(p(U|w), p(V|w)) P(w)`.
    pub shared_marginal: EqualityCheck,
    /// `W1(p(U)p(W), p(V)p(W)) = W1(p(U), p(V))`.
    pub product: EqualityCheck,
}

impl Lemma7Check {
    pub fn max_abs_diff(&self) -> f64 {
        self.dependency
            .abs_diff
            .max(self.shared_marginal.abs_diff)
            .max(self.product.abs_diff)
    }
}

/// Check all three decompositions for `joint_uw` (`[u, w]`) and a second
/// conditional table `joint_vw` sharing the same `W` marginal.
pub fn check_lemma7(joint_uw: &JointPmf, joint_vw: &JointPmf, pnorm: f64) -> Result<Lemma7Check> {
    let (ku, kw) = joint_uw.dim();
    if joint_vw.dim() != (ku, kw) {
        return Err(WfcError::shape("both joints must have the same shape"));
    }
    let pw = joint_uw.col_marginal();
    if pw
        .iter()
        .zip(joint_vw.col_marginal())
        .any(|(a, b)| (a - b).abs() > MASS_TOLERANCE)
    {
        return Err(WfcError::dist("joints must share the W marginal"));
    }
    let block = pair_cost(ku, kw, pnorm, PairMetric::Concatenated)?;
    let single = onehot_cost(ku, pnorm)?;
    let w1 = |p: &DiscreteDistribution, q: &DiscreteDistribution, c: &CostMatrix| -> Result<f64> {
        Ok(wasserstein1_exact(p, q, c)?.0)
    };
    let pu = DiscreteDistribution::new(joint_uw.row_marginal())?;
    let pv = DiscreteDistribution::new(joint_vw.row_marginal())?;

    let dep_lhs = w1(&joint_uw.flatten()?, &joint_uw.product().flatten()?, &block)?;
    let mut dep_rhs = 0.0;
    let mut shared_rhs = 0.0;
    for (w, &weight) in pw.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let cu = DiscreteDistribution::new(joint_uw.conditional_of_row_given_col(w).expect("positive mass"))?;
        let cv = DiscreteDistribution::new(joint_vw.conditional_of_row_given_col(w).expect("positive mass"))?;
        dep_rhs += weight * w1(&cu, &pu, &single)?;
        shared_rhs += weight * w1(&cu, &cv, &single)?;
    }
    let shared_lhs = w1(&joint_uw.flatten()?, &joint_vw.flatten()?, &block)?;

    let outer = |m: &DiscreteDistribution| -> Result<DiscreteDistribution> {
        let mut cells = Vec::with_capacity(ku * kw);
        for &w in &pw {
            cells.extend(m.masses().iter().map(|u| u * w));
        }
        DiscreteDistribution::new(cells)
    };
    let prod_lhs = w1(&outer(&pu)?, &outer(&pv)?, &block)?;
    let prod_rhs = pw.iter().sum::<f64>() * w1(&pu, &pv, &single)?;

    Ok(Lemma7Check {
        dependency: EqualityCheck::new(dep_lhs, dep_rhs),
        shared_marginal: EqualityCheck::new(shared_lhs, shared_rhs),
        product: EqualityCheck::new(prod_lhs, prod_rhs),
    })
}

/// `W1` under one-hot costs against `2^(1/p) TV`.
pub fn check_lemma6(p: &DiscreteDistribution, q: &DiscreteDistribution, pnorm: f64) -> Result<EqualityCheck> {
    if p.support_size() != q.support_size() {
        return Err(WfcError::shape("distributions must share a support"));
    }
    let (w, _) = wasserstein1_exact(p, q, &onehot_cost(p.support_size(), pnorm)?)?;
    let tv: f64 = p.masses().iter().zip(q.masses()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    Ok(EqualityCheck::new(w, onehot_distance(pnorm) * tv))
}

/// Dirichlet(1) masses: normalized unit exponentials.
pub fn dirichlet_ones<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

pub fn random_joint<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<JointPmf> {
    JointPmf::new(Array2::from_shape_vec((rows, cols), dirichlet_ones(rows * cols, rng)).map_err(|e| WfcError::shape(e.to_string()))?)
}

/// Random joint `[v, w]` whose `W` marginal equals `pw`.
fn random_joint_with_col_marginal<R: Rng + ?Sized>(rows: usize, pw: &[f64], rng: &mut R) -> Result<JointPmf> {
    let mut t = Array2::zeros((rows, pw.len()));
    for (w, &mass) in pw.iter().enumerate() {
        for (u, c) in dirichlet_ones(rows, rng).into_iter().enumerate() {
            t[[u, w]] = c * mass;
        }
    }
    JointPmf::new(t)
}

fn random_head<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> LinearHead {
    LinearHead {
        weight: Array2::from_shape_fn((outputs, inputs), |_| rng.sample::<f64, _>(StandardNormal)),
        bias: Array1::from_shape_fn(outputs, |_| 0.5 * rng.sample::<f64, _>(StandardNormal)),
    }
}

/// Random linear-head instance: `|Y|, |A|` in {2, 3}, at most 8 latent points,
/// `Z_a` partly driven by `Z_y` so instances range from weak to strong dependence.
pub fn random_linear_head_instance<R: Rng + ?Sized>(rng: &mut R) -> LinearHeadInstance {
    let n = rng.random_range(2..=8);
    let (dy, da) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (ny, na) = (rng.random_range(2..=3), rng.random_range(2..=3));
    let pnorm = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
    let coupling: f64 = rng.random_range(0.0..2.0);
    let zy = Array2::from_shape_fn((n, dy), |_| rng.sample::<f64, _>(StandardNormal));
    let mix = Array2::from_shape_fn((dy, da), |_| rng.sample::<f64, _>(StandardNormal));
    let noise = Array2::from_shape_fn((n, da), |_| rng.sample::<f64, _>(StandardNormal));
    let za = zy.dot(&mix) * coupling + noise;
    let f = random_head(ny, dy, rng);
    let g = random_head(na, da, rng);
    let probs = dirichlet_ones(n, rng);
    let margins: Vec<f64> = (0..n)
        .map(|i| {
            let (_, my) = margin(&f.apply(zy.row(i).as_slice().expect("row-major")));
            let (_, ma) = margin(&g.apply(za.row(i).as_slice().expect("row-major")));
            my.min(ma)
        })
        .collect();
    let pivot = margins[rng.random_range(0..n)].max(1e-3);
    let xi = pivot * rng.random_range(0.5..1.5);
    LinearHeadInstance {
        zy,
        za,
        probs,
        f,
        g,
        pnorm,
        xi,
    }
}

/// Outcome of one sweep in the verification report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub instances: usize,
    pub max_violation: f64,
    pub pass: bool,
}

impl CheckSummary {
    fn from_violations(violations: impl IntoIterator<Item = f64>) -> Self {
        let mut instances = 0;
        let mut max_violation: f64 = 0.0;
        for v in violations {
            instances += 1;
            max_violation = max_violation.max(if v.is_nan() { f64::INFINITY } else { v });
        }
        CheckSummary {
            instances,
            max_violation,
            pass: max_violation <= CHECK_TOLERANCE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Base instance count; the inequality sweeps scale it (2x for the
    /// label-proxy inequality, 2/5 for the latent bound).
    pub instances: usize,
    pub seed: u64,
    /// Perturb the group-fairness closed form; verification must then fail.
    pub corrupt_closed_form: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            instances: 500,
            seed: 0,
            corrupt_closed_form: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub instances: usize,
    pub seed: u64,
    pub checks: BTreeMap<String, CheckSummary>,
    pub pass: bool,
}

fn pnorm_for(i: usize) -> f64 {
    if i.is_multiple_of(2) {
        1.0
    } else {
        2.0
    }
}

/// Group-fairness identity sweep: DP on random `|Y| <= 4, |A| <= 3` joints
/// and EO on every label slice of a random (Y, Yhat, A) joint.
pub fn sweep_lemma1(instances: usize, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<CheckSummary> {
    let scale = if corrupt { 1.01 } else { 1.0 };
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let p = pnorm_for(i);
        let (ky, ka) = (rng.random_range(2..=4), rng.random_range(2..=3));
        let joint = random_joint(ky, ka, rng)?;
        let dp = check_lemma1(&joint, FairnessMode::Dp, p)?;
        let mut worst = (dp.lhs - scale * dp.rhs).abs();

        // (true label, prediction, group)
        let probs = Array3::from_shape_vec((ky, ky, ka), dirichlet_ones(ky * ky * ka, rng)).map_err(|e| WfcError::shape(e.to_string()))?;
        for y in 0..ky {
            let slice = probs.index_axis(Axis(0), y);
            let mass = slice.sum();
            let mut t = Array2::zeros((2, ka));
            for ((pred, a), v) in slice.indexed_iter() {
                t[[usize::from(pred == y), a]] += v / mass;
            }
            let eo = check_lemma1(&JointPmf::new(t)?, FairnessMode::Eo, p)?;
            worst = worst.max((eo.lhs - scale * eo.rhs).abs());
        }
        out.push(worst);
    }
    Ok(CheckSummary::from_violations(out))
}

pub fn sweep_lemma6(instances: usize, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<CheckSummary> {
    let scale = if corrupt { 1.01 } else { 1.0 };
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let k = rng.random_range(2..=6);
        let p = DiscreteDistribution::new(dirichlet_ones(k, rng))?;
        let q = DiscreteDistribution::new(dirichlet_ones(k, rng))?;
        let c = check_lemma6(&p, &q, pnorm_for(i))?;
        out.push((c.lhs - scale * c.rhs).abs());
    }
    Ok(CheckSummary::from_violations(out))
}

pub fn sweep_lemma7(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let (ku, kw) = (rng.random_range(2..=4), rng.random_range(2..=3));
        let uw = random_joint(ku, kw, rng)?;
        let vw = random_joint_with_col_marginal(ku, &uw.col_marginal(), rng)?;
        out.push(check_lemma7(&uw, &vw, pnorm_for(i))?.max_abs_diff());
    }
    Ok(CheckSummary::from_violations(out))
}

pub fn sweep_lemma2(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let probs = Array3::from_shape_vec((2, 2, 2), dirichlet_ones(8, rng)).map_err(|e| WfcError::shape(e.to_string()))?;
        out.push(check_lemma2(&TripleJointPmf::new(probs, pnorm_for(i))?)?.violation());
    }
    Ok(CheckSummary::from_violations(out))
}

pub fn sweep_theorem5(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut out = Vec::with_capacity(instances);
    while out.len() < instances {
        let inst = random_linear_head_instance(rng);
        match check_theorem5(&inst) {
            Ok(c) => out.push((c.lhs - c.bound).max(0.0)),
            Err(WfcError::DegenerateInstance(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(CheckSummary::from_violations(out))
}

/// Monotonicity of the finite-sample bound plus agreement with a second
/// transcription of the formula.
pub fn sweep_theorem3(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let p = pnorm_for(i);
        let iw: f64 = rng.random_range(0.0..1.0);
        let eps: f64 = rng.random_range(0.0..0.5);
        let d = rng.random_range(1..=10) as f64;
        let m = (d * 2.0).max(10f64.powf(rng.random_range(1.5..7.0))).round();
        let delta: f64 = rng.random_range(0.001..0.5);
        let v = theorem3_rhs(iw, eps, d, m, delta, p)?;
        let second = iw
            + 2f64.powf(1.0 + 1.0 / p) * eps
            + 2f64.powf(1.0 + 1.0 / p)
                * (4.0 * (d * (2f64.ln() + 1.0 + m.ln() - d.ln()) + 4f64.ln() - delta.ln()) / m).sqrt();
        let mut worst = (v - second).abs();
        worst = worst.max(theorem3_rhs(iw, eps, d, 2.0 * m, delta, p)? - v);
        worst = worst.max(v - theorem3_rhs(iw, eps, d + 1.0, m, delta, p)?);
        worst = worst.max(v - theorem3_rhs(iw, eps, d, m, delta / 2.0, p)?);
        out.push(worst.max(0.0));
    }
    Ok(CheckSummary::from_violations(out))
}

/// Monotonicity of the covariate-shift bound in every term.
pub fn sweep_theorem4(instances: usize, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let p = pnorm_for(i);
        let terms: [f64; 4] = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..0.5),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..0.5),
        ];
        let base = theorem4_rhs(terms[0], terms[1], terms[2], terms[3], p)?;
        let mut worst: f64 = 0.0;
        for k in 0..4 {
            let mut bumped = terms;
            bumped[k] += 0.1;
            let v = theorem4_rhs(bumped[0], bumped[1], bumped[2], bumped[3], p)?;
            worst = worst.max(base - v + 1e-12).max(0.0);
        }
        out.push(worst);
    }
    Ok(CheckSummary::from_violations(out))
}

/// Run every sweep on independent RNG streams of `opts.seed`.
pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let n = opts.instances;
    let stream = |s: u64| seeded_stream(opts.seed, s);
    let mut checks = BTreeMap::new();
    checks.insert(
        "group_fairness_identity".to_string(),
        sweep_lemma1(n, &mut stream(1), opts.corrupt_closed_form)?,
    );
    checks.insert(
        "onehot_total_variation".to_string(),
        sweep_lemma6(n, &mut stream(2), opts.corrupt_closed_form)?,
    );
    checks.insert("block_decomposition".to_string(), sweep_lemma7(n, &mut stream(3))?);
    checks.insert("proxy_attribute_bound".to_string(), sweep_lemma2(2 * n, &mut stream(4))?);
    checks.insert("finite_sample_bound".to_string(), sweep_theorem3(n, &mut stream(5))?);
    checks.insert("covariate_shift_bound".to_string(), sweep_theorem4(n, &mut stream(6))?);
    checks.insert(
        "latent_representation_bound".to_string(),
        sweep_theorem5((2 * n).div_ceil(5).max(n.min(1)), &mut stream(7))?,
    );
    let pass = checks.values().all(|c| c.pass);
    Ok(VerifyReport {
        instances: n,
        seed: opts.seed,
        checks,
        pass,
    })
}

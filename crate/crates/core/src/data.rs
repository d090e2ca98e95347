//! Datasets, deterministic splits and synthetic generators.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WfcError};

/// A ChaCha8 generator on a named sub-stream of `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Embeddings with optional labels and sensitive attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    embeddings: Array2<f64>,
    y: Option<Vec<usize>>,
    a: Option<Vec<usize>>,
    ids: Vec<u64>,
}

impl Dataset {
    pub fn new(embeddings: Array2<f64>, y: Option<Vec<usize>>, a: Option<Vec<usize>>, ids: Vec<u64>) -> Result<Self> {
        let n = embeddings.nrows();
        if ids.len() != n {
            return Err(WfcError::shape(format!("{} ids for {n} rows", ids.len())));
        }
        for (name, col) in [("y", &y), ("a", &a)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(WfcError::shape(format!("{name} has {} entries for {n} rows", c.len())));
                }
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(WfcError::Numeric("non-finite embedding entry".into()));
        }
        Ok(Dataset { embeddings, y, a, ids })
    }

    /// Rows get ids `0..n`.
    pub fn from_parts(embeddings: Array2<f64>, y: Option<Vec<usize>>, a: Option<Vec<usize>>) -> Result<Self> {
        let ids = (0..embeddings.nrows() as u64).collect();
        Dataset::new(embeddings, y, a, ids)
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn y(&self) -> Option<&[usize]> {
        self.y.as_deref()
    }

    pub fn a(&self) -> Option<&[usize]> {
        self.a.as_deref()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn require_y(&self) -> Result<&[usize]> {
        self.y().ok_or(WfcError::MissingLabels)
    }

    pub fn require_a(&self) -> Result<&[usize]> {
        self.a().ok_or(WfcError::MissingAttribute)
    }

    /// `max(y) + 1`, at least 2.
    pub fn num_classes(&self) -> usize {
        self.y().and_then(|y| y.iter().max()).map_or(2, |m| (m + 1).max(2))
    }

    /// `max(a) + 1`, at least 2.
    pub fn num_groups(&self) -> usize {
        self.a().and_then(|a| a.iter().max()).map_or(2, |m| (m + 1).max(2))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            embeddings: self.embeddings.select(Axis(0), idx),
            y: self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
            a: self.a.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn without_attributes(&self) -> Dataset {
        Dataset {
            a: None,
            ..self.clone()
        }
    }

    pub fn with_attributes(&self, a: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.embeddings.clone(), self.y.clone(), Some(a), self.ids.clone())
    }

    /// Seeded subsample of `fraction` of the rows, stratified like [`split`].
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(WfcError::config(format!("subsample fraction {fraction} not in (0, 1]")));
        }
        let (keep, _, _) = split(self, [fraction, 1.0 - fraction, 0.0], seed)?;
        Ok(keep)
    }
}

/// Endless mini-batches drawn without replacement from reshuffled passes.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    /// The next `size` row indices (fewer only if the pool is smaller).
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Deterministic disjoint `(train, val, test)` partition, stratified by
/// `(y, a)` when both are present (or by whichever one is).
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(WfcError::config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        let key = (
            dataset.y().map_or(0, |y| y[i]),
            dataset.a().map_or(0, |a| a[i]),
        );
        strata.entry(key).or_default().push(i);
    }
    let mut rng = seeded_stream(seed, 0x5b17);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((dataset.subset(&parts[0]), dataset.subset(&parts[1]), dataset.subset(&parts[2])))
}

/// Parameters of the synthetic biased-embedding generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    /// `P(Y=1 | A=1) = 0.5 + bias`, `P(Y=1 | A=0) = 0.5 - bias`.
    pub bias: f64,
    /// Scale of the attribute direction in `x`.
    pub leak: f64,
    pub noise: f64,
    /// Translation of the target domain in [`gen_shift_pair`].
    pub shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 4000,
            dim: 32,
            bias: 0.3,
            leak: 2.0,
            noise: 0.5,
            shift: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.bias) {
            return Err(WfcError::config(format!("bias must be in [0, 0.5), got {}", self.bias)));
        }
        if !(self.leak >= 0.0 && self.leak.is_finite()) {
            return Err(WfcError::config(format!("leak must be >= 0, got {}", self.leak)));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(WfcError::config(format!("noise must be > 0, got {}", self.noise)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(WfcError::config(format!("shift must be >= 0, got {}", self.shift)));
        }
        if self.dim < SIGNAL_DIRECTIONS {
            return Err(WfcError::config(format!(
                "dim must be at least {SIGNAL_DIRECTIONS}, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// `mu_0, mu_1, nu_0, nu_1` and the shift direction.
const SIGNAL_DIRECTIONS: usize = 5;

/// Seed-derived orthonormal rows `[mu_0, mu_1, nu_0, nu_1, shift]`.
pub fn signal_directions(dim: usize, seed: u64) -> Result<Array2<f64>> {
    if dim < SIGNAL_DIRECTIONS {
        return Err(WfcError::config(format!("dim must be at least {SIGNAL_DIRECTIONS}")));
    }
    let mut rng = seeded_stream(seed, 1);
    let mut basis = Array2::<f64>::zeros((SIGNAL_DIRECTIONS, dim));
    let mut k = 0;
    while k < SIGNAL_DIRECTIONS {
        let mut v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..k {
            let b = basis.row(j);
            let proj = v.dot(&b);
            v.scaled_add(-proj, &b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.row_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    Ok(basis)
}

fn sample_domain(spec: &SyntheticSpec, dirs: &Array2<f64>, stream: u64, offset: f64) -> Dataset {
    let mut rng = seeded_stream(spec.seed, stream);
    let mut x = Array2::<f64>::zeros((spec.n, spec.dim));
    let mut y = Vec::with_capacity(spec.n);
    let mut a = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let ai = usize::from(rng.random_bool(0.5));
        let p1 = if ai == 1 { 0.5 + spec.bias } else { 0.5 - spec.bias };
        let yi = usize::from(rng.random_bool(p1));
        let mut row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
        row += &dirs.row(yi);
        row.scaled_add(spec.leak, &dirs.row(2 + ai));
        if offset != 0.0 {
            row.scaled_add(offset, &dirs.row(4));
        }
        y.push(yi);
        a.push(ai);
    }
    Dataset::from_parts(x, Some(y), Some(a)).expect("generator output is consistent")
}

/// `x = mu_Y + leak * nu_A + noise * eps` with binary `A` and `Y`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dirs = signal_directions(spec.dim, spec.seed)?;
    Ok(sample_domain(spec, &dirs, 2, 0.0))
}

/// A target domain whose attributes are only reachable for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDomain {
    data: Dataset,
    hidden_a: Vec<usize>,
}

impl TargetDomain {
    /// Embeddings and labels; no attributes.
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// True attributes, for scoring only.
    pub fn evaluation_attributes(&self) -> &[usize] {
        &self.hidden_a
    }

    /// The full target dataset with attributes, for scoring only.
    pub fn evaluation_dataset(&self) -> Dataset {
        self.data
            .with_attributes(self.hidden_a.clone())
            .expect("lengths agree by construction")
    }
}

/// Source per [`gen_synthetic`] and a target drawn from the same law but
/// translated by `shift` along a direction orthogonal to every signal
/// direction, so `P(A | x)` keeps its structure.
pub fn gen_shift_pair(spec: &SyntheticSpec) -> Result<(Dataset, TargetDomain)> {
    spec.validate()?;
    let dirs = signal_directions(spec.dim, spec.seed)?;
    let source = sample_domain(spec, &dirs, 2, 0.0);
    let target = sample_domain(spec, &dirs, 3, spec.shift);
    let hidden_a = target.a().expect("generated").to_vec();
    Ok((
        source,
        TargetDomain {
            data: target.without_attributes(),
            hidden_a,
        },
    ))
}

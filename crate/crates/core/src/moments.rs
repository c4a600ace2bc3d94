//! Step-up matrices, their partial products, second-moment matrices and
//! convergence-norm estimates.
//!
//! The step-up matrix `M_k` holds the expected number of descendants of a
//! level-`k` individual that are the first in their line to reach level `k+1`.
//! It is computed level by level from the mean blocks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{inf_norm, spectral_radius, LinalgError};
use crate::model::{Model, PhaseSet, TypeId};

/// Half-width of the band around 1 in which a spectral radius counts as critical.
pub const TOL_CRIT: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentsError {
    #[error("step-up matrix M_{0} is not finite")]
    StepUpNotFinite(usize),
    #[error("level {requested} beyond computed range {computed_to}")]
    OutOfRange {
        requested: usize,
        computed_to: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStatus {
    Finite,
    Critical,
    Infinite,
}

impl BlockStatus {
    pub fn classify(radius: f64) -> Self {
        if radius < 1.0 - TOL_CRIT {
            BlockStatus::Finite
        } else if radius <= 1.0 + TOL_CRIT {
            BlockStatus::Critical
        } else {
            BlockStatus::Infinite
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockStatus::Finite => "finite",
            BlockStatus::Critical => "critical",
            BlockStatus::Infinite => "infinite",
        }
    }
}

/// Mean blocks of levels `0..=k_max`, optionally with a set of types removed.
///
/// Removing a type zeroes both its row (it is sterile) and its column (its
/// births are not counted).
#[derive(Clone, Debug)]
pub struct LevelBlocks {
    d: usize,
    levels: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl LevelBlocks {
    pub fn new(model: &Model, k_max: usize, taboo: Option<&PhaseSet>) -> Self {
        let d = model.d();
        let levels = (0..=k_max)
            .map(|k| {
                let mut blocks = model.mean_blocks_of_level(k);
                if let Some(removed) = taboo {
                    for (&l, block) in blocks.iter_mut() {
                        for p in 1..=d {
                            if removed.contains(TypeId::new(k, p)) {
                                block.row_mut(p - 1).fill(0.0);
                            }
                            if removed.contains(TypeId::new(l, p)) {
                                block.column_mut(p - 1).fill(0.0);
                            }
                        }
                    }
                    blocks.retain(|_, b| b.iter().any(|&v| v != 0.0));
                }
                blocks
            })
            .collect();
        Self { d, levels }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k_max(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, k: usize) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.levels[k]
    }

    pub fn block(&self, k: usize, l: usize) -> Option<&DMatrix<f64>> {
        self.levels.get(k).and_then(|m| m.get(&l))
    }

    pub fn up(&self, k: usize) -> DMatrix<f64> {
        self.block(k, k + 1)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.d, self.d))
    }
}

/// `M_{0->k}` or a marker that some factor was not finite.
#[derive(Clone, Debug, PartialEq)]
pub enum Product {
    Finite(DMatrix<f64>),
    Infinite,
}

/// Step-up matrices `M_k` for `k = 0..=computed_to`.
///
/// The recursion stops at the first level whose auxiliary matrix has spectral
/// radius at or above `1 - TOL_CRIT`.
#[derive(Clone, Debug)]
pub struct StepUpSequence {
    d: usize,
    blocks: Vec<Option<DMatrix<f64>>>,
    status: Vec<BlockStatus>,
    aux: Vec<DMatrix<f64>>,
    aux_radius: Vec<f64>,
    // M_{0->k} = products[k] * exp(log_scale[k]) with products[k] normalised to max entry 1
    products: Vec<DMatrix<f64>>,
    log_scale: Vec<f64>,
    requested: usize,
}

impl StepUpSequence {
    pub fn d(&self) -> usize {
        self.d
    }

    /// Highest level with a computed status.
    pub fn computed_to(&self) -> usize {
        self.status.len() - 1
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn status(&self, k: usize) -> Option<BlockStatus> {
        self.status.get(k).copied()
    }

    pub fn statuses(&self) -> &[BlockStatus] {
        &self.status
    }

    /// The first level whose step-up matrix is not finite.
    pub fn first_nonfinite(&self) -> Option<(usize, BlockStatus)> {
        self.status
            .iter()
            .enumerate()
            .find(|(_, s)| **s != BlockStatus::Finite)
            .map(|(k, s)| (k, *s))
    }

    pub fn all_finite(&self) -> bool {
        self.first_nonfinite().is_none()
    }

    pub fn block(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(k).and_then(|b| b.as_ref())
    }

    /// Auxiliary matrix `M^{(k)}`.
    pub fn aux(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.aux.get(k)
    }

    pub fn aux_radius(&self, k: usize) -> Option<f64> {
        self.aux_radius.get(k).copied()
    }

    pub fn partial_product(&self, k: usize) -> Result<Product, MomentsError> {
        if k > self.requested {
            return Err(MomentsError::OutOfRange {
                requested: k,
                computed_to: self.requested,
            });
        }
        match self.products.get(k) {
            Some(p) => Ok(Product::Finite(p * self.log_scale[k].exp())),
            None => Ok(Product::Infinite),
        }
    }

    /// `ln(1^T M_{0->k} 1)`, or `None` when a factor is not finite.
    pub fn log_total(&self, k: usize) -> Option<f64> {
        self.products
            .get(k)
            .map(|p| p.sum().ln() + self.log_scale[k])
    }

    /// Number of levels with a finite partial product.
    pub fn product_len(&self) -> usize {
        self.products.len()
    }
}

fn identity(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}

fn solve(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    lhs.lu()
        .solve(rhs)
        .expect("I - M^(k) is invertible when its spectral radius is below one")
}

/// Runs the step-up recursion on `blocks / theta` and returns the first level
/// whose auxiliary radius reaches one, or `None` if levels `0..=k` all pass.
fn scaled_first_failure(blocks: &LevelBlocks, k: usize, theta: f64) -> Option<usize> {
    let d = blocks.d();
    let inv = 1.0 / theta;
    let mut tails: Vec<DMatrix<f64>> = Vec::with_capacity(k + 1);
    for level in 0..=k {
        let mut aux = DMatrix::zeros(d, d);
        for (&l, m) in blocks.level(level) {
            if l < level {
                aux += m * &tails[l] * inv;
            } else if l == level {
                aux += m * inv;
            }
        }
        let r = spectral_radius(&aux).expect("scaled blocks are nonnegative");
        if r >= 1.0 {
            return Some(level);
        }
        if level == k {
            break;
        }
        let step = solve(identity(d) - aux, &(blocks.up(level) * inv));
        for t in tails.iter_mut() {
            *t = &*t * &step;
        }
        tails.push(step);
    }
    None
}

/// Step-up matrices up to level `k_max`.
///
/// With `taboo = Some(A)` the types in `A` are removed first.
pub fn step_up_sequence(model: &Model, k_max: usize, taboo: Option<&PhaseSet>) -> StepUpSequence {
    let blocks = LevelBlocks::new(model, k_max, taboo);
    step_up_from_blocks(&blocks, k_max)
}

pub fn step_up_from_blocks(blocks: &LevelBlocks, k_max: usize) -> StepUpSequence {
    let d = blocks.d();
    let mut seq = StepUpSequence {
        d,
        blocks: Vec::new(),
        status: Vec::new(),
        aux: Vec::new(),
        aux_radius: Vec::new(),
        products: Vec::new(),
        log_scale: Vec::new(),
        requested: k_max,
    };
    // tails[i] = M_{i -> k-1}
    let mut tails: Vec<DMatrix<f64>> = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut aux = DMatrix::zeros(d, d);
        for (&l, m) in blocks.level(k) {
            if l < k {
                aux += m * &tails[l];
            } else if l == k {
                aux += m;
            }
        }
        let r = spectral_radius(&aux).expect("mean blocks are nonnegative");
        let status = BlockStatus::classify(r);
        seq.aux.push(aux.clone());
        seq.aux_radius.push(r);
        seq.status.push(status);
        if status != BlockStatus::Finite {
            seq.blocks.push(None);
            break;
        }
        let step = solve(identity(d) - aux, &blocks.up(k));
        for t in tails.iter_mut() {
            *t = &*t * &step;
        }
        tails.push(step.clone());

        let (prev, prev_scale) = match seq.products.last() {
            Some(p) => (p * &step, *seq.log_scale.last().expect("scale")),
            None => (step.clone(), 0.0),
        };
        let peak = prev.max();
        if peak > 0.0 && peak.is_finite() {
            seq.products.push(prev / peak);
            seq.log_scale.push(prev_scale + peak.ln());
        } else {
            seq.products.push(prev);
            seq.log_scale.push(prev_scale);
        }
        seq.blocks.push(Some(step));
    }
    seq
}

/// Second factorial moments `A_k` of the first-passage counts into level `k+1`.
#[derive(Clone, Debug)]
pub struct SecondMomentSequence {
    pub blocks: Vec<DMatrix<f64>>,
    /// Running maximum of `||A_k||_inf`.
    pub sup_norm_seen: Vec<f64>,
    pub computed_to: usize,
}

/// Row-major `d x d^2` second-moment blocks `V_{k,ij}` that are not identically zero.
fn second_moment_blocks_of_level(
    model: &Model,
    k: usize,
) -> BTreeMap<(usize, usize), DMatrix<f64>> {
    let d = model.d();
    let mut out: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    for row in 1..=d {
        for atom in model.law(TypeId::new(k, row)).atoms() {
            for &(t1, n1) in &atom.children {
                for &(t2, n2) in &atom.children {
                    let n2 = f64::from(n2) - if t1 == t2 { 1.0 } else { 0.0 };
                    let w = atom.prob * f64::from(n1) * n2;
                    if w == 0.0 {
                        continue;
                    }
                    let v = out
                        .entry((t1.level, t2.level))
                        .or_insert_with(|| DMatrix::zeros(d, d * d));
                    v[(row - 1, (t1.phase - 1) * d + (t2.phase - 1))] += w;
                }
            }
        }
    }
    out
}

/// Computes `A_0, ..., A_{k_max}` from the composition rule for first-passage
/// generating functions.
pub fn second_moment_sequence(
    model: &Model,
    seq: &StepUpSequence,
    k_max: usize,
) -> Result<SecondMomentSequence, MomentsError> {
    if k_max > seq.requested() {
        return Err(MomentsError::OutOfRange {
            requested: k_max,
            computed_to: seq.requested(),
        });
    }
    if let Some((k, _)) = seq.first_nonfinite() {
        if k <= k_max {
            return Err(MomentsError::StepUpNotFinite(k));
        }
    }
    let d = model.d();
    let step = |j: usize| seq.block(j).expect("finite step-up");
    let mut a: Vec<DMatrix<f64>> = Vec::with_capacity(k_max + 1);
    let mut sup = Vec::with_capacity(k_max + 1);
    let mut best = 0.0f64;
    for k in 0..=k_max {
        let means = model.mean_blocks_of_level(k);
        // suffix[i] = M_{i -> k}, with suffix[k+1] = I
        let mut suffix = vec![identity(d); k + 2];
        for i in (0..=k).rev() {
            suffix[i] = step(i) * &suffix[i + 1];
        }
        let kron_suffix: Vec<DMatrix<f64>> = suffix.iter().map(|s| s.kronecker(s)).collect();

        let mut rhs = DMatrix::zeros(d, d * d);
        for ((i, j), v) in second_moment_blocks_of_level(model, k) {
            rhs += v * suffix[i].kronecker(&suffix[j]);
        }
        for (&l, m) in means.iter().filter(|(&l, _)| l < k) {
            // prefix = M_{l -> j-1}, starting from the identity at j = l
            let mut prefix = identity(d);
            let mut inner = DMatrix::zeros(d, d * d);
            for j in l..k {
                inner += &prefix * &a[j] * &kron_suffix[j + 1];
                prefix = prefix * step(j);
            }
            rhs += m * inner;
        }
        let aux = seq.aux(k).expect("aux");
        let ak = solve(identity(d) - aux, &rhs);
        best = best.max(inf_norm(&ak));
        sup.push(best);
        a.push(ak);
    }
    Ok(SecondMomentSequence {
        blocks: a,
        sup_norm_seen: sup,
        computed_to: k_max,
    })
}

/// Lower bounds on the convergence norm from northwest truncations.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceNormEstimate {
    pub levels: Vec<usize>,
    /// Nondecreasing; entry `n` lower-bounds the spectral radius of the truncation to levels `<= levels[n]`.
    pub lower_bounds: Vec<f64>,
    pub estimate: f64,
}

/// Spectral radius of the mean matrix restricted to levels `<= k`, from below.
///
/// `M` restricted to levels `<= k` has spectral radius below `theta` exactly
/// when the step-up recursion on `M / theta` meets no critical level up to `k`,
/// so the radius is located by bisection on `theta`.
pub fn truncation_radius(blocks: &LevelBlocks, k: usize) -> f64 {
    let mut hi = 0.0f64;
    for level in 0..=k {
        let d = blocks.d();
        let mut rows = vec![0.0; d];
        for (&l, m) in blocks.level(level) {
            if l <= k {
                for (p, r) in rows.iter_mut().enumerate() {
                    *r += m.row(p).sum();
                }
            }
        }
        hi = rows.into_iter().fold(hi, f64::max);
    }
    if hi == 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    // predicate holds strictly above the radius; nudge hi so it passes
    hi *= 1.0 + 1e-12;
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if scaled_first_failure(blocks, k, mid).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Convergence-norm lower bounds on the ladder `0, 1, 2, 4, ..., k_max`.
pub fn convergence_norm_estimate(
    model: &Model,
    k_max: usize,
    taboo: Option<&PhaseSet>,
) -> ConvergenceNormEstimate {
    let blocks = LevelBlocks::new(model, k_max, taboo);
    let mut levels = vec![0usize];
    let mut k = 1;
    while k < k_max {
        levels.push(k);
        k *= 2;
    }
    if k_max > 0 {
        levels.push(k_max);
    }
    let mut lower_bounds = Vec::with_capacity(levels.len());
    let mut best = 0.0f64;
    for &k in &levels {
        best = best.max(truncation_radius(&blocks, k));
        lower_bounds.push(best);
    }
    ConvergenceNormEstimate {
        estimate: best,
        levels,
        lower_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_chain, build_example1};
    use approx::assert_abs_diff_eq;

    fn mu(a: f64, b: f64, c: f64) -> f64 {
        (1.0 - b - ((1.0 - b).powi(2) - 4.0 * a * c).sqrt()) / (2.0 * a)
    }

    #[test]
    fn scalar_chain_matches_closed_recursion() {
        let (a, b, c) = (0.2, 0.0, 1.0);
        let seq = step_up_sequence(&build_chain(a, b, c).unwrap(), 200, None);
        let mut m = c / (1.0 - b);
        for k in 0..=200 {
            assert_abs_diff_eq!(seq.block(k).unwrap()[(0, 0)], m, epsilon = 1e-12);
            m = c / (1.0 - b - a * m);
        }
        assert_abs_diff_eq!(
            seq.block(200).unwrap()[(0, 0)],
            mu(a, b, c),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(mu(a, b, c), 1.381966, epsilon = 1e-6);
    }

    #[test]
    fn taboo_phase_reduces_to_chain() {
        let ex = build_example1(0.2, 0.0, 1.0, 0.2, 1.0).unwrap();
        let seq = step_up_sequence(&ex, 50, Some(&PhaseSet::phases_of([2])));
        let chain = step_up_sequence(&build_chain(0.2, 0.0, 1.0).unwrap(), 50, None);
        for k in 0..=50 {
            assert_abs_diff_eq!(
                seq.block(k).unwrap()[(0, 0)],
                chain.block(k).unwrap()[(0, 0)],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn products_and_log_totals_agree() {
        let seq = step_up_sequence(&build_chain(0.2, 0.0, 1.0).unwrap(), 10, None);
        let mut p = 1.0;
        for k in 0..=10 {
            p *= seq.block(k).unwrap()[(0, 0)];
        }
        match seq.partial_product(10).unwrap() {
            Product::Finite(m) => assert_abs_diff_eq!(m[(0, 0)], p, epsilon = 1e-10),
            Product::Infinite => panic!("finite chain"),
        }
        assert_abs_diff_eq!(seq.log_total(10).unwrap(), p.ln(), epsilon = 1e-12);
        match seq.partial_product(0).unwrap() {
            Product::Finite(m) => assert_eq!(&m, seq.block(0).unwrap()),
            Product::Infinite => panic!(),
        }
        assert!(seq.partial_product(11).is_err());
    }

    #[test]
    fn infinite_factor_propagates() {
        let ex = build_example1(0.2, 0.0, 1.0, 0.2, 1.0).unwrap();
        let seq = step_up_sequence(&ex, 400, None);
        let (k, status) = seq.first_nonfinite().expect("supercritical strip");
        assert_ne!(status, BlockStatus::Finite);
        assert_eq!(seq.computed_to(), k);
        assert_eq!(seq.partial_product(k).unwrap(), Product::Infinite);
        assert_eq!(seq.partial_product(400).unwrap(), Product::Infinite);
    }

    #[test]
    fn no_upward_edges_give_zero_step_up() {
        let ex = build_example1(0.2, 0.3, 0.0, 0.2, 1.0).unwrap();
        let seq = step_up_sequence(&ex, 3, None);
        assert_eq!(seq.block(0).unwrap(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn chain_convergence_norm() {
        let (a, b, c) = (0.2, 0.0, 1.0);
        let est = convergence_norm_estimate(&build_chain(a, b, c).unwrap(), 200, None);
        let nu = b + 2.0 * (a * c).sqrt();
        assert!(est.estimate <= nu + 1e-12);
        assert_abs_diff_eq!(est.estimate, nu, epsilon = 1e-3);
        assert!(est.lower_bounds.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn truncation_radius_matches_dense() {
        let ex = build_example1(0.2, 0.1, 1.0, 0.2, 1.3).unwrap();
        let blocks = LevelBlocks::new(&ex, 6, None);
        let n = 2 * 7;
        let mut dense = DMatrix::zeros(n, n);
        for k in 0..=6 {
            for (&l, m) in blocks.level(k) {
                if l > 6 {
                    continue;
                }
                for i in 0..2 {
                    for j in 0..2 {
                        dense[(2 * k + i, 2 * l + j)] = m[(i, j)];
                    }
                }
            }
        }
        let want = spectral_radius(&dense).unwrap();
        assert_abs_diff_eq!(truncation_radius(&blocks, 6), want, epsilon = 1e-10);
    }

    #[test]
    fn zero_matrix_norm() {
        let ex = build_chain(0.0, 0.0, 0.0).unwrap();
        assert_eq!(convergence_norm_estimate(&ex, 10, None).estimate, 0.0);
    }
}

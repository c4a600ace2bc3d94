//! Extinction probabilities as minimal fixed points of truncated systems.
//!
//! `q^{(k,l)}(A)` solves `s = G(s)` on the finite window
//! `(A n T_k) u (not-A n T_l)` with every type of `A` above level `k` made
//! immortal (value 0) and every other type above level `l` made sterile
//! (value 1). Ladders of such windows converge to `q(A)`, `q`, the partial
//! extinction probability and the probability of never producing an `A` type.

use std::ops::Add;

use serde::Serialize;
use thiserror::Error;

use crate::model::{Model, PhaseSet, TypeId};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_REPORT_LEVELS: usize = 10;
/// Largest ladder level tried before giving up.
pub const LADDER_MAX: usize = 2048;
const LADDER_START: usize = 4;
/// Margin below one required of the taboo extinction probabilities on `A`
/// before the single-index ladder is trusted.
pub const GATE_MARGIN: f64 = 1e-3;
const MAX_SWEEPS: usize = 200_000;

#[derive(Debug, Error, Clone)]
pub enum ExtinctionError {
    #[error("fixed-point iteration did not settle after {iterations} sweeps (last step {step:e})")]
    MaxIterExceeded {
        iterations: usize,
        step: f64,
        last: Vec<f64>,
    },
    #[error("ladder did not converge up to level {level} (last change {change:e})")]
    NonConvergence {
        level: usize,
        change: f64,
        last: Box<ExtinctionVector>,
    },
    #[error("invalid truncation: {0}")]
    InvalidTruncation(String),
}

/// One monomial `coef * prod s_v^n` of a finite generating system.
#[derive(Clone, Debug, PartialEq)]
struct Term {
    coef: f64,
    vars: Vec<(usize, i32)>,
}

#[derive(Clone, Debug, PartialEq)]
struct Row {
    /// Mass of the terms that vanish identically, i.e. `1 - G_i(1)` plus
    /// terms that contain an immortal factor.
    kill: f64,
    /// Terms with at least one variable.
    terms: Vec<Term>,
}

/// A finite monotone system `s_i = G_i(s)` on `[0,1]^m`.
///
/// Internally the system is iterated on survival probabilities `v = 1 - s`,
/// `v_i = kill_i + sum coef (1 - prod (1 - v)^n)`, which keeps values close
/// to one exact where `1 - s` would cancel.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteSystem {
    rows: Vec<Row>,
}

impl FiniteSystem {
    /// Each row is a list of `(coefficient, [(variable, power)])` terms.
    pub fn new(rows: Vec<Vec<(f64, Vec<(usize, u32)>)>>) -> Self {
        let rows = rows
            .into_iter()
            .map(|terms| {
                let total: f64 = terms.iter().map(|(c, _)| c).sum();
                Row {
                    kill: (1.0 - total).max(0.0),
                    terms: terms
                        .into_iter()
                        .filter(|(c, vars)| *c != 0.0 && !vars.is_empty())
                        .map(|(coef, vars)| Term {
                            coef,
                            vars: vars.into_iter().map(|(v, n)| (v, n as i32)).collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `1 - G_i(1 - v)`.
    #[inline]
    fn survival_row(&self, i: usize, v: &[f64]) -> f64 {
        let row = &self.rows[i];
        row.terms
            .iter()
            .map(|t| {
                let log_keep: f64 = t
                    .vars
                    .iter()
                    .map(|&(j, n)| f64::from(n) * (-v[j]).ln_1p())
                    .sum();
                -t.coef * log_keep.exp_m1()
            })
            .sum::<f64>()
            .add(row.kill)
            .clamp(0.0, 1.0)
    }

    /// `G(s)` for every row.
    pub fn eval(&self, s: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        (0..self.len())
            .map(|i| 1.0 - self.survival_row(i, &v))
            .collect()
    }
}

/// Minimal fixed point of `s = G(s)` on `[0,1]^m`, iterating upward from zero.
///
/// Gauss-Seidel sweeps alternate direction; every iterate stays below the
/// minimal fixed point, so stopping early errs low.
pub fn finite_min_fixed_point(
    system: &FiniteSystem,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, ExtinctionError> {
    let v = max_survival_from(system, vec![1.0; system.len()], tol, max_iter)?;
    Ok(v.iter().map(|x| 1.0 - x).collect())
}

/// Largest fixed point of `v = 1 - G(1 - v)` below `v`, iterating downward.
fn max_survival_from(
    system: &FiniteSystem,
    mut v: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, ExtinctionError> {
    let m = system.len();
    let mut step = f64::INFINITY;
    for sweep in 0..max_iter {
        step = 0.0;
        let forward = sweep % 2 == 0;
        for n in 0..m {
            let i = if forward { n } else { m - 1 - n };
            let new = system.survival_row(i, &v).min(v[i]);
            step = step.max(v[i] - new);
            v[i] = new;
        }
        if step < tol {
            return Ok(v);
        }
    }
    Err(ExtinctionError::MaxIterExceeded {
        iterations: max_iter,
        step,
        last: v.iter().map(|x| 1.0 - x).collect(),
    })
}

/// Which limit an [`ExtinctionVector`] approximates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitPath {
    /// A single window.
    Window,
    /// `q^{(k,k)}` over increasing `k`.
    Diagonal,
    /// `lim_k lim_l q^{(k,l)}`.
    DoubleLimit,
    /// `q^{(-1,l)}` over increasing `l`.
    NeverVisit,
    /// Extinction in the empty set is certain.
    Trivial,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtinctionVector {
    pub d: usize,
    /// Values on levels `0..=levels`, indexed by [`TypeId::index`].
    pub values: Vec<f64>,
    pub levels: usize,
    pub target: PhaseSet,
    /// Final window `(k, l)`; `-1` encodes an empty side.
    pub window: (i64, i64),
    pub path: LimitPath,
    /// Largest `|G_i(v) - v_i|` over rows that see no truncation constant.
    pub residual: f64,
    pub converged: bool,
    /// Sup-norm change over the reporting levels at the last ladder step.
    pub last_change: f64,
    /// Largest violation of the expected ladder monotonicity.
    pub monotonicity_violation: f64,
    pub ladder: Vec<(i64, i64)>,
    /// `1 - values` without the rounding of `values` near one.
    #[serde(skip)]
    pub survival: Vec<f64>,
}

impl ExtinctionVector {
    pub fn get(&self, t: TypeId) -> f64 {
        self.values[t.index(self.d)]
    }

    pub fn root(&self) -> f64 {
        self.get(TypeId::new(0, 1))
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// Values on levels `0..=l`.
    pub fn head(&self, l: usize) -> &[f64] {
        let end = ((l + 1) * self.d).min(self.values.len());
        &self.values[..end]
    }

    /// Sup distance to `other` on levels `0..=l`.
    pub fn distance(&self, other: &ExtinctionVector, l: usize) -> f64 {
        sup_distance(self.head(l), other.head(l))
    }
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// How a type outside the active window is treated.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Active(usize),
    /// Fixed value; `exact` when it is the true value rather than a cut-off.
    Fixed {
        value: f64,
        exact: bool,
    },
}

struct Window {
    d: usize,
    top: usize,
    slots: Vec<Slot>,
    types: Vec<TypeId>,
    system: FiniteSystem,
    interior: Vec<bool>,
}

fn build_window(model: &Model, target: &PhaseSet, k: i64, l: i64) -> Window {
    let d = model.d();
    let top = k.max(l).max(0) as usize;
    let slot_of = |t: TypeId| -> Slot {
        let lvl = t.level as i64;
        if target.contains(t) {
            if lvl <= k {
                Slot::Active(usize::MAX)
            } else {
                Slot::Fixed {
                    value: 0.0,
                    exact: k < 0,
                }
            }
        } else if lvl <= l {
            Slot::Active(usize::MAX)
        } else {
            Slot::Fixed {
                value: 1.0,
                exact: false,
            }
        }
    };
    // level top + 1 is the highest a child can reach
    let mut slots = Vec::with_capacity((top + 2) * d);
    let mut types = Vec::new();
    for idx in 0..(top + 2) * d {
        let t = TypeId::from_index(idx, d);
        let slot = match slot_of(t) {
            Slot::Active(_) if t.level <= top => {
                types.push(t);
                Slot::Active(types.len() - 1)
            }
            Slot::Active(_) => Slot::Fixed {
                value: 1.0,
                exact: false,
            },
            fixed => fixed,
        };
        slots.push(slot);
    }
    let mut rows = Vec::with_capacity(types.len());
    let mut interior = Vec::with_capacity(types.len());
    for &t in &types {
        let law = model.law(t);
        let mut row = Row {
            kill: 0.0,
            terms: Vec::with_capacity(law.atoms().len()),
        };
        let mut clean = true;
        for atom in law.atoms() {
            let mut immortal = false;
            let mut vars = Vec::with_capacity(atom.children.len());
            for &(c, n) in &atom.children {
                match slots[c.index(d)] {
                    Slot::Active(j) => vars.push((j, n as i32)),
                    Slot::Fixed { value, exact } => {
                        clean &= exact;
                        immortal |= value == 0.0;
                    }
                }
            }
            if immortal {
                row.kill += atom.prob;
            } else if !vars.is_empty() {
                row.terms.push(Term {
                    coef: atom.prob,
                    vars,
                });
            }
        }
        rows.push(row);
        interior.push(clean);
    }
    Window {
        d,
        top,
        slots,
        types,
        system: FiniteSystem { rows },
        interior,
    }
}

impl Window {
    /// Survival probabilities on levels `0..=top`.
    fn expand(&self, survival: &[f64]) -> Vec<f64> {
        (0..(self.top + 1) * self.d)
            .map(|idx| match self.slots[idx] {
                Slot::Active(j) => survival[j],
                Slot::Fixed { value, .. } => 1.0 - value,
            })
            .collect()
    }

    fn residual(&self, survival: &[f64]) -> f64 {
        (0..self.types.len())
            .filter(|&i| self.interior[i])
            .map(|i| (self.system.survival_row(i, survival) - survival[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Starting point from a vector whose extinction probabilities lie below this window's.
    fn seed_from(&self, below: &ExtinctionVector) -> Vec<f64> {
        self.types
            .iter()
            .map(|t| {
                if t.level <= below.levels {
                    below.survival[t.index(self.d)]
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn inner_tol(tol: f64) -> f64 {
    (tol * 1e-3).max(1e-15)
}

fn solve_window(
    model: &Model,
    target: &PhaseSet,
    k: i64,
    l: i64,
    tol: f64,
    seed: Option<&ExtinctionVector>,
) -> Result<ExtinctionVector, ExtinctionError> {
    if k < -1 || l < -1 || (k < 0 && l < 0) {
        return Err(ExtinctionError::InvalidTruncation(format!(
            "window ({k},{l})"
        )));
    }
    let w = build_window(model, target, k, l);
    let start = match seed {
        Some(v) => w.seed_from(v),
        None => vec![1.0; w.system.len()],
    };
    let sol = max_survival_from(&w.system, start, tol, MAX_SWEEPS)?;
    let survival = w.expand(&sol);
    Ok(ExtinctionVector {
        d: w.d,
        values: survival.iter().map(|v| 1.0 - v).collect(),
        survival,
        levels: w.top,
        target: target.clone(),
        window: (k, l),
        path: LimitPath::Window,
        residual: w.residual(&sol),
        converged: true,
        last_change: 0.0,
        monotonicity_violation: 0.0,
        ladder: vec![(k, l)],
    })
}

/// `q^{(k,l)}(A)`; `k = -1` makes every type of `A` immortal.
pub fn q_truncated(
    model: &Model,
    target: &PhaseSet,
    k: i64,
    l: i64,
) -> Result<ExtinctionVector, ExtinctionError> {
    solve_window(model, target, k, l, inner_tol(DEFAULT_TOL), None)
}

/// Direction in which a ladder is expected to move.
#[derive(Clone, Copy, PartialEq)]
enum Trend {
    Up,
    Down,
    Free,
}

fn ladder_levels(start: usize) -> impl Iterator<Item = usize> {
    std::iter::successors(Some(start.max(1)), |&k| Some(k * 2)).take_while(|&k| k <= LADDER_MAX)
}

/// Runs windows `window(n)` for `n` on the doubling ladder until two
/// successive vectors agree within `tol` on levels `<= report`.
fn run_ladder(
    model: &Model,
    target: &PhaseSet,
    tol: f64,
    report: usize,
    start: usize,
    trend: Trend,
    window: impl Fn(usize) -> (i64, i64),
) -> Result<ExtinctionVector, ExtinctionError> {
    let mut prev: Option<ExtinctionVector> = None;
    let mut ladder = Vec::new();
    let mut violation = 0.0f64;
    for n in ladder_levels(start) {
        let (k, l) = window(n);
        let seed = if trend == Trend::Up {
            prev.as_ref()
        } else {
            None
        };
        let mut cur = solve_window(model, target, k, l, inner_tol(tol), seed)?;
        ladder.push((k, l));
        if let Some(p) = &prev {
            let shared = p.levels.min(cur.levels);
            for (a, b) in p.head(shared).iter().zip(cur.head(shared)) {
                match trend {
                    Trend::Up => violation = violation.max(a - b),
                    Trend::Down => violation = violation.max(b - a),
                    Trend::Free => {}
                }
            }
            let change = sup_distance(p.head(report.min(shared)), cur.head(report.min(shared)));
            cur.last_change = change;
            if n >= report && change < tol {
                cur.ladder = ladder;
                cur.monotonicity_violation = violation;
                return Ok(cur);
            }
        }
        prev = Some(cur);
    }
    let mut last = prev.expect("ladder has at least one level");
    last.converged = false;
    last.ladder = ladder;
    last.monotonicity_violation = violation;
    Err(ExtinctionError::NonConvergence {
        level: last.levels,
        change: last.last_change,
        last: Box::new(last),
    })
}

fn tagged(mut v: ExtinctionVector, path: LimitPath) -> ExtinctionVector {
    v.path = path;
    v
}

/// Global extinction probability `q` from the nondecreasing ladder `q^{(k,k)}(X_d)`.
pub fn q_global(
    model: &Model,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    let all = PhaseSet::all(model.d());
    let k = |n: usize| (n as i64, n as i64);
    run_ladder(model, &all, tol, report, LADDER_START, Trend::Up, k)
        .map(|v| tagged(v, LimitPath::Diagonal))
}

/// Partial extinction probability from the nonincreasing ladder of taboo windows `T_k`.
pub fn q_partial(
    model: &Model,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    let none = PhaseSet::empty();
    let w = |n: usize| (-1, n as i64);
    run_ladder(model, &none, tol, report, LADDER_START, Trend::Down, w)
        .map(|v| tagged(v, LimitPath::Diagonal))
}

/// Probability of never producing a type in `A`; the root counts as produced.
pub fn q_zero_of_a(
    model: &Model,
    target: &PhaseSet,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    if target.is_empty_set() {
        return Ok(ones(model, target, report));
    }
    let w = |n: usize| (-1, n as i64);
    run_ladder(model, target, tol, report, LADDER_START, Trend::Down, w)
        .map(|v| tagged(v, LimitPath::NeverVisit))
}

fn ones(model: &Model, target: &PhaseSet, report: usize) -> ExtinctionVector {
    ExtinctionVector {
        d: model.d(),
        values: vec![1.0; (report + 1) * model.d()],
        levels: report,
        target: target.clone(),
        window: (-1, -1),
        path: LimitPath::Trivial,
        residual: 0.0,
        converged: true,
        last_change: 0.0,
        monotonicity_violation: 0.0,
        ladder: Vec::new(),
        survival: vec![0.0; (report + 1) * model.d()],
    }
}

/// Outcome of the test that decides whether the single-index ladder is safe.
#[derive(Clone, Debug, Serialize)]
pub struct GateReport {
    pub holds: bool,
    /// Largest taboo extinction probability seen on `A`, if the ladder converged.
    pub sup_on_target: Option<f64>,
    pub levels_sampled: usize,
}

/// Extinction probabilities of the process in which only types of `A` reproduce,
/// sampled on `A`.
pub fn taboo_gate(model: &Model, target: &PhaseSet, tol: f64, report: usize) -> GateReport {
    let w = |n: usize| (n as i64, -1);
    match run_ladder(model, target, tol, report, LADDER_START, Trend::Up, w) {
        Ok(v) => {
            let sample = (v.levels / 2).max(report.min(v.levels));
            let sup = (0..=sample)
                .flat_map(|k| (1..=v.d).map(move |p| TypeId::new(k, p)))
                .filter(|&t| target.contains(t))
                .map(|t| v.get(t))
                .fold(0.0f64, f64::max);
            GateReport {
                holds: sup < 1.0 - GATE_MARGIN,
                sup_on_target: Some(sup),
                levels_sampled: sample,
            }
        }
        Err(_) => GateReport {
            holds: false,
            sup_on_target: None,
            levels_sampled: 0,
        },
    }
}

/// Extinction probability in `A`.
pub fn q_of_a(
    model: &Model,
    target: &PhaseSet,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    let d = model.d();
    if target.is_empty_set() {
        return Ok(ones(model, target, report));
    }
    if target.is_everything(d) {
        let all = PhaseSet::all(d);
        let k = |n: usize| (n as i64, n as i64);
        return run_ladder(model, &all, tol, report, LADDER_START, Trend::Up, k).map(|mut v| {
            v.target = target.clone();
            tagged(v, LimitPath::Diagonal)
        });
    }
    if taboo_gate(model, target, tol, report).holds {
        let k = |n: usize| (n as i64, n as i64);
        return run_ladder(model, target, tol, report, LADDER_START, Trend::Free, k)
            .map(|v| tagged(v, LimitPath::Diagonal));
    }
    double_limit(model, target, tol, report)
}

fn double_limit(
    model: &Model,
    target: &PhaseSet,
    tol: f64,
    report: usize,
) -> Result<ExtinctionVector, ExtinctionError> {
    let mut prev: Option<ExtinctionVector> = None;
    let mut ladder = Vec::new();
    for k in ladder_levels(LADDER_START) {
        let inner = |n: usize| (k as i64, n as i64);
        let mut cur = run_ladder(model, target, tol, report, k, Trend::Down, inner)?;
        ladder.extend(cur.ladder.iter().copied());
        if let Some(p) = &prev {
            let shared = report.min(p.levels).min(cur.levels);
            let change = p.distance(&cur, shared);
            cur.last_change = change;
            if k >= report && change < tol {
                cur.ladder = ladder;
                return Ok(tagged(cur, LimitPath::DoubleLimit));
            }
        }
        prev = Some(cur);
    }
    let mut last = prev.expect("ladder has at least one level");
    last.converged = false;
    last.ladder = ladder;
    Err(ExtinctionError::NonConvergence {
        level: last.levels,
        change: last.last_change,
        last: Box::new(tagged(last, LimitPath::DoubleLimit)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_chain;
    use approx::assert_abs_diff_eq;

    fn binary(p: f64) -> FiniteSystem {
        FiniteSystem::new(vec![vec![(p, vec![(0, 2)]), (1.0 - p, vec![])]])
    }

    #[test]
    fn binary_supercritical() {
        let s = finite_min_fixed_point(&binary(0.6), 1e-14, 100_000).unwrap();
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn binary_critical_reaches_one_slowly() {
        // error after n steps is about 2/n, so a loose step tolerance suffices
        let s = finite_min_fixed_point(&binary(0.5), 1e-9, 10_000_000).unwrap();
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn decoupled_copies() {
        let sys = FiniteSystem::new(vec![
            vec![(0.6, vec![(0, 2)]), (0.4, vec![])],
            vec![(0.6, vec![(1, 2)]), (0.4, vec![])],
        ]);
        let s = finite_min_fixed_point(&sys, 1e-14, 100_000).unwrap();
        assert_abs_diff_eq!(s[0], 2.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(s[1], 2.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn reports_iteration_cap() {
        let err = finite_min_fixed_point(&binary(0.5), 1e-15, 3).unwrap_err();
        assert!(matches!(
            err,
            ExtinctionError::MaxIterExceeded { iterations: 3, .. }
        ));
    }

    #[test]
    fn sterile_root_window() {
        let m = build_chain(0.2, 0.0, 1.0).unwrap();
        let v = q_truncated(&m, &PhaseSet::empty(), -1, 0).unwrap();
        // the root's only offspring sit above level 0 and are sterile
        assert_abs_diff_eq!(v.root(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn subcritical_chain_dies() {
        let m = build_chain(1.0, 0.0, 0.1).unwrap();
        let q = q_global(&m, 1e-8, 10).unwrap();
        for &v in q.head(10) {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn empty_target_is_certain() {
        let m = build_chain(0.2, 0.0, 1.0).unwrap();
        let v = q_of_a(&m, &PhaseSet::empty(), 1e-8, 10).unwrap();
        assert!(v.values.iter().all(|&x| x == 1.0));
        let z = q_zero_of_a(&m, &PhaseSet::empty(), 1e-8, 10).unwrap();
        assert!(z.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn root_in_target_is_visited() {
        let m = build_chain(0.2, 0.0, 1.0).unwrap();
        let a = PhaseSet::single(TypeId::new(0, 1));
        let z = q_zero_of_a(&m, &a, 1e-8, 10).unwrap();
        assert_eq!(z.root(), 0.0);
    }
}

//! The level-0 projection of the fixed-point set `S = { s : s = G(s) }`.
//!
//! Given values on levels `0..=k`, the level-`k` equations determine the
//! level-`k+1` values. A level-0 pair belongs to the projection when this
//! forward recursion stays inside `[0,1]` for as many levels as we look.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::extinction::{q_global, q_of_a, q_partial, ExtinctionError, ExtinctionVector};
use crate::model::{Model, PhaseSet, TypeId};

/// Slack allowed outside `[0,1]` before a trajectory counts as diverged.
pub const EXIT_EPS: f64 = 1e-9;
pub const DEFAULT_DEPTH: usize = 400;
const NEWTON_RESIDUAL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone)]
pub enum FixedPointError {
    #[error("level-{level} equations could not be solved (residual {residual:e})")]
    SolveFailed { level: usize, residual: f64 },
    #[error("level-{0} equations do not involve every level-{next} type", next = .0 + 1)]
    Undetermined(usize),
    #[error("scans need exactly two phases, model has {0}")]
    NotTwoPhase(usize),
    #[error("need values on levels 0..={needed}, got {got} entries")]
    ShortInput { needed: usize, got: usize },
    #[error(transparent)]
    Extinction(#[from] ExtinctionError),
}

/// Result of solving one level forward.
#[derive(Clone, Debug, PartialEq)]
pub enum Advance {
    Next(Vec<f64>),
    Diverged,
}

#[derive(Clone, Debug)]
struct Term {
    coef: f64,
    vars: Vec<(usize, i32)>,
}

impl Term {
    #[inline]
    fn eval(&self, s: &[f64]) -> f64 {
        self.vars
            .iter()
            .fold(self.coef, |acc, &(v, n)| acc * s[v].powi(n))
    }
}

/// Equation `s_{<k,i>} = rest(s) + lead(s) * s_target^power` with the target on level `k+1`.
#[derive(Clone, Debug)]
struct IsolatedRow {
    lhs: usize,
    target: usize,
    power: i32,
    lead: Term,
    rest: Vec<Term>,
}

#[derive(Clone, Debug)]
enum LevelPlan {
    Isolated(Vec<IsolatedRow>),
    /// Rows as full term lists; unknowns are the level-`k+1` coordinates.
    Generic {
        rows: Vec<(usize, Vec<Term>)>,
    },
}

/// Precompiled forward recursion for levels `0..depth`.
#[derive(Clone, Debug)]
pub struct ForwardMap {
    d: usize,
    plans: Vec<LevelPlan>,
}

fn compile_level(model: &Model, k: usize) -> Result<LevelPlan, FixedPointError> {
    let d = model.d();
    let mut isolated = Vec::with_capacity(d);
    let mut generic = Vec::with_capacity(d);
    let mut seen_targets = vec![false; d];
    let mut all_isolated = true;
    for i in 1..=d {
        let lhs = TypeId::new(k, i).index(d);
        let law = model.law(TypeId::new(k, i));
        let mut rest = Vec::new();
        let mut upper = Vec::new();
        let mut terms = Vec::new();
        for atom in law.atoms() {
            let vars: Vec<(usize, i32)> = atom
                .children
                .iter()
                .map(|&(t, n)| (t.index(d), n as i32))
                .collect();
            let term = Term {
                coef: atom.prob,
                vars,
            };
            let ups: Vec<&(TypeId, u32)> = atom
                .children
                .iter()
                .filter(|(t, _)| t.level == k + 1)
                .collect();
            if ups.is_empty() {
                rest.push(term.clone());
            } else {
                upper.push((term.clone(), ups.len(), *ups[0]));
            }
            terms.push(term);
        }
        generic.push((lhs, terms));
        match upper.as_slice() {
            [(term, 1, (t, n))] if !seen_targets[t.phase - 1] => {
                seen_targets[t.phase - 1] = true;
                let target = t.index(d);
                let lead = Term {
                    coef: term.coef,
                    vars: term
                        .vars
                        .iter()
                        .copied()
                        .filter(|&(v, _)| v != target)
                        .collect(),
                };
                isolated.push(IsolatedRow {
                    lhs,
                    target,
                    power: *n as i32,
                    lead,
                    rest,
                });
            }
            _ => all_isolated = false,
        }
    }
    if all_isolated {
        return Ok(LevelPlan::Isolated(isolated));
    }
    let mut reached = vec![false; d];
    for (_, terms) in &generic {
        for t in terms {
            for &(v, _) in &t.vars {
                if v / d == k + 1 {
                    reached[v % d] = true;
                }
            }
        }
    }
    if reached.iter().any(|r| !r) {
        return Err(FixedPointError::Undetermined(k));
    }
    Ok(LevelPlan::Generic { rows: generic })
}

fn solve_generic(
    rows: &[(usize, Vec<Term>)],
    s: &mut [f64],
    k: usize,
    d: usize,
) -> Result<(), FixedPointError> {
    let base = (k + 1) * d;
    for p in 0..d {
        s[base + p] = 1.0;
    }
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let mut f = nalgebra::DVector::zeros(d);
        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for (r, (lhs, terms)) in rows.iter().enumerate() {
            let mut val = -s[*lhs];
            for t in terms {
                let v = t.eval(s);
                val += v;
                for &(var, n) in &t.vars {
                    if var >= base && var < base + d {
                        let x = s[var];
                        let dv = if x != 0.0 {
                            v * f64::from(n) / x
                        } else if n == 1 {
                            t.vars
                                .iter()
                                .filter(|&&(w, _)| w != var)
                                .fold(t.coef, |acc, &(w, m)| acc * s[w].powi(m))
                        } else {
                            0.0
                        };
                        jac[(r, var - base)] += dv;
                    }
                }
            }
            f[r] = val;
        }
        residual = f.amax();
        if residual <= NEWTON_RESIDUAL {
            return Ok(());
        }
        let Some(step) = jac.lu().solve(&f) else {
            break;
        };
        for p in 0..d {
            s[base + p] -= step[p];
        }
        if s[base..base + d].iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(FixedPointError::SolveFailed { level: k, residual })
}

impl ForwardMap {
    /// Compiles the level equations for levels `0..depth`.
    pub fn new(model: &Model, depth: usize) -> Result<Self, FixedPointError> {
        let plans = (0..depth)
            .map(|k| compile_level(model, k))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            d: model.d(),
            plans,
        })
    }

    pub fn depth(&self) -> usize {
        self.plans.len()
    }

    /// Fills level `k+1` of `s` (level-major, `d` entries per level); `false` on divergence.
    fn step(&self, s: &mut [f64], k: usize) -> Result<bool, FixedPointError> {
        let d = self.d;
        match &self.plans[k] {
            LevelPlan::Isolated(rows) => {
                for row in rows {
                    let rest: f64 = row.rest.iter().map(|t| t.eval(s)).sum();
                    let denom = row.lead.eval(s);
                    let mut num = s[row.lhs] - rest;
                    if num < 0.0 {
                        if num < -EXIT_EPS {
                            return Ok(false);
                        }
                        num = 0.0;
                    }
                    if denom <= 0.0 {
                        return Ok(false);
                    }
                    let ratio = num / denom;
                    let v = if row.power == 1 {
                        ratio
                    } else {
                        ratio.powf(1.0 / f64::from(row.power))
                    };
                    if !(v <= 1.0 + EXIT_EPS) {
                        return Ok(false);
                    }
                    s[row.target] = v;
                }
                Ok(true)
            }
            LevelPlan::Generic { rows } => {
                solve_generic(rows, s, k, d)?;
                let base = (k + 1) * d;
                Ok(s[base..base + d]
                    .iter()
                    .all(|&v| (-EXIT_EPS..=1.0 + EXIT_EPS).contains(&v)))
            }
        }
    }

    /// Runs the recursion from level-0 values; returns the first level that
    /// left `[0,1]`, or `None` if all `depth` levels stayed inside.
    pub fn exit_level(&self, s0: &[f64]) -> Result<Option<usize>, FixedPointError> {
        let d = self.d;
        let mut s = vec![0.0; (self.depth() + 1) * d];
        s[..d].copy_from_slice(s0);
        for k in 0..self.depth() {
            if !self.step(&mut s, k)? {
                return Ok(Some(k + 1));
            }
        }
        Ok(None)
    }

    pub fn is_member(&self, s0: &[f64]) -> Result<bool, FixedPointError> {
        Ok(self.exit_level(s0)?.is_none())
    }

    /// Level `k+1` values from the given values on levels `0..=k`.
    pub fn advance(&self, levels: &[f64], k: usize) -> Result<Advance, FixedPointError> {
        let d = self.d;
        if levels.len() < (k + 1) * d {
            return Err(FixedPointError::ShortInput {
                needed: k,
                got: levels.len(),
            });
        }
        let mut s = vec![0.0; (k + 2) * d];
        s[..(k + 1) * d].copy_from_slice(&levels[..(k + 1) * d]);
        if self.step(&mut s, k)? {
            Ok(Advance::Next(s[(k + 1) * d..].to_vec()))
        } else {
            Ok(Advance::Diverged)
        }
    }
}

/// Solves the level-`k` equations for the level-`k+1` values.
///
/// `levels` holds values on levels `0..=k`, `d` entries per level.
pub fn level_advance(model: &Model, levels: &[f64], k: usize) -> Result<Advance, FixedPointError> {
    let map = ForwardMap {
        d: model.d(),
        plans: (0..=k)
            .map(|j| {
                if j == k {
                    compile_level(model, j)
                } else {
                    Ok(LevelPlan::Isolated(Vec::new()))
                }
            })
            .collect::<Result<_, _>>()?,
    };
    map.advance(levels, k)
}

/// An extinction-probability projection drawn on a scan.
#[derive(Clone, Debug, Serialize)]
pub struct MarkedPoint {
    pub label: String,
    pub s1: f64,
    pub s2: f64,
    /// Some grid point within one cell is a member.
    pub member: bool,
}

/// Membership of the `h`-lattice in `[0,1]^2`; index `i1 * n + i2`.
#[derive(Clone, Debug, Serialize)]
pub struct ScanGrid {
    pub h: f64,
    pub n: usize,
    pub depth: usize,
    pub membership: Vec<bool>,
    pub marked: Vec<MarkedPoint>,
}

impl ScanGrid {
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 * self.h).min(1.0)
    }

    pub fn member_at(&self, i1: usize, i2: usize) -> bool {
        self.membership[i1 * self.n + i2]
    }

    /// Fraction of lattice points that are members.
    pub fn area(&self) -> f64 {
        self.membership.iter().filter(|&&m| m).count() as f64 / self.membership.len() as f64
    }

    fn neighbourhood(&self, s1: f64, s2: f64, cells: f64) -> impl Iterator<Item = bool> + '_ {
        let r = cells * self.h * (1.0 + 1e-9);
        let span = |s: f64| {
            let lo = ((s - r) / self.h).ceil().max(0.0) as usize;
            let hi = (((s + r) / self.h).floor() as usize).min(self.n - 1);
            lo..=hi
        };
        let (r1, r2) = (span(s1), span(s2));
        r1.flat_map(move |i| r2.clone().map(move |j| self.member_at(i, j)))
    }

    /// Some lattice point within `cells` cells of `(s1, s2)` is a member.
    pub fn member_near(&self, s1: f64, s2: f64, cells: f64) -> bool {
        self.neighbourhood(s1, s2, cells).any(|m| m)
    }

    /// Both members and non-members lie within `cells` cells of `(s1, s2)`.
    pub fn on_boundary(&self, s1: f64, s2: f64, cells: f64) -> bool {
        let mut seen = [false, false];
        for m in self.neighbourhood(s1, s2, cells) {
            seen[m as usize] = true;
        }
        seen[0] && seen[1]
    }

    pub fn mark(&mut self, label: &str, s1: f64, s2: f64) {
        let member = self.member_near(s1, s2, 1.0);
        self.marked.push(MarkedPoint {
            label: label.to_string(),
            s1,
            s2,
            member,
        });
    }
}

/// Forward-recursion membership on the `h`-lattice of `[0,1]^2`.
pub fn s0_scan(model: &Model, h: f64, depth: usize) -> Result<ScanGrid, FixedPointError> {
    if model.d() != 2 {
        return Err(FixedPointError::NotTwoPhase(model.d()));
    }
    let map = ForwardMap::new(model, depth)?;
    let n = (1.0 / h).round() as usize + 1;
    let rows: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i1| {
            let s1 = (i1 as f64 * h).min(1.0);
            (0..n)
                .map(|i2| {
                    let s2 = (i2 as f64 * h).min(1.0);
                    map.is_member(&[s1, s2])
                })
                .collect::<Result<Vec<bool>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(ScanGrid {
        h,
        n,
        depth,
        membership: rows.into_iter().flatten().collect(),
        marked: Vec::new(),
    })
}

/// The four extinction vectors whose level-0 values are marked on a scan.
#[derive(Clone, Debug)]
pub struct ExtinctionMarks {
    pub global: ExtinctionVector,
    pub phase1: ExtinctionVector,
    pub phase2: ExtinctionVector,
    pub partial: ExtinctionVector,
}

impl ExtinctionMarks {
    pub fn compute(model: &Model, tol: f64, report: usize) -> Result<Self, FixedPointError> {
        Ok(Self {
            global: q_global(model, tol, report)?,
            phase1: q_of_a(model, &PhaseSet::phases_of([1]), tol, report)?,
            phase2: q_of_a(model, &PhaseSet::phases_of([2]), tol, report)?,
            partial: q_partial(model, tol, report)?,
        })
    }

    pub fn labelled(&self) -> [(&'static str, &ExtinctionVector); 4] {
        [
            ("q", &self.global),
            ("q(A1)", &self.phase1),
            ("q(A2)", &self.phase2),
            ("q_partial", &self.partial),
        ]
    }
}

/// Scan plus the marked extinction projections.
pub fn s0_scan_marked(
    model: &Model,
    h: f64,
    depth: usize,
    marks: &ExtinctionMarks,
) -> Result<ScanGrid, FixedPointError> {
    let mut grid = s0_scan(model, h, depth)?;
    for (label, v) in marks.labelled() {
        grid.mark(label, v.get(TypeId::new(0, 1)), v.get(TypeId::new(0, 2)));
    }
    Ok(grid)
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentPoint {
    pub weight: f64,
    pub value: f64,
    pub member: bool,
    /// Member after moving `1e-9` of the segment length towards its interior.
    pub member_nudged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentReport {
    pub locally_isomorphic: bool,
    /// Largest spread between phases of the same level, over `q` and the partial vector.
    pub phase_spread: f64,
    pub global_root: f64,
    pub partial_root: f64,
    pub points: Vec<SegmentPoint>,
    pub all_members: bool,
}

/// Checks that every `(w q_0 + (1-w) q_partial_0) 1_d` starts a trajectory
/// that stays in `[0,1]`.
pub fn affine_segment_check(
    model: &Model,
    global: &ExtinctionVector,
    partial: &ExtinctionVector,
    n_points: usize,
    depth: usize,
) -> Result<SegmentReport, FixedPointError> {
    let d = model.d();
    let locally_isomorphic = model.local_isomorphism_check(depth.min(50)).holds;
    let levels = global.levels.min(partial.levels);
    let mut spread = 0.0f64;
    for v in [global, partial] {
        for k in 0..=levels {
            let lv = v.level(k);
            let (lo, hi) = lv
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
            spread = spread.max(hi - lo);
        }
    }
    let qg = global.root();
    let qp = partial.root();
    let map = ForwardMap::new(model, depth)?;
    let mut points = Vec::with_capacity(n_points);
    for n in 0..n_points {
        let w = if n_points == 1 {
            1.0
        } else {
            n as f64 / (n_points - 1) as f64
        };
        let value = w * qg + (1.0 - w) * qp;
        let member = map.is_member(&vec![value; d])?;
        let inward = 1e-9 * (qp - qg) * if w > 0.5 { 1.0 } else { -1.0 };
        let member_nudged = member || map.is_member(&vec![value + inward; d])?;
        points.push(SegmentPoint {
            weight: w,
            value,
            member,
            member_nudged,
        });
    }
    Ok(SegmentReport {
        locally_isomorphic,
        phase_spread: spread,
        global_root: qg,
        partial_root: qp,
        all_members: points.iter().all(|p| p.member_nudged),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_example1;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ones_map_to_ones() {
        let m = build_example1(0.2, 0.0, 1.0, 0.2, 1.5).unwrap();
        for k in 0..5 {
            let levels = vec![1.0; (k + 1) * 2];
            match level_advance(&m, &levels, k).unwrap() {
                Advance::Next(v) => {
                    for x in v {
                        assert_abs_diff_eq!(x, 1.0, epsilon = 1e-12);
                    }
                }
                Advance::Diverged => panic!("(1,1) is a fixed point"),
            }
        }
    }

    #[test]
    fn explicit_root_formula() {
        // level 0, phase 1: s1 = (y/u) s2^u + (c/u) t^u + 1 - (c + y)/u
        let m = build_example1(0.2, 0.0, 1.0, 0.2, 1.0).unwrap();
        let (s1, s2): (f64, f64) = (0.9, 0.8);
        let u = 3.0;
        let want = ((s1 - 0.2 / u * s2.powi(3) - (1.0 - 1.2 / u)) * u / 1.0f64).powf(1.0 / u);
        match level_advance(&m, &[s1, s2], 0).unwrap() {
            Advance::Next(v) => assert_abs_diff_eq!(v[0], want, epsilon = 1e-14),
            Advance::Diverged => panic!(),
        }
    }

    #[test]
    fn low_start_exits() {
        let m = build_example1(0.2, 0.0, 1.0, 0.2, 1.5).unwrap();
        let map = ForwardMap::new(&m, 200).unwrap();
        assert!(map.exit_level(&[0.1, 0.1]).unwrap().is_some());
        assert!(map.is_member(&[1.0, 1.0]).unwrap());
    }

    #[test]
    fn coarse_grid_contains_corner() {
        let m = build_example1(0.2, 0.0, 1.0, 0.2, 1.5).unwrap();
        let g = s0_scan(&m, 0.5, 50).unwrap();
        assert_eq!(g.n, 3);
        assert_eq!(g.membership.len(), 9);
        assert!(g.member_at(2, 2));
    }
}

//! Extinction criteria built on the step-up sequence.
//!
//! Verdicts refer to the property each check is named after: `Holds` for the
//! partial criterion means the partial extinction probability is one, `Holds`
//! for the global criterion means global extinction is certain, and so on.
//! Every check looks at finitely many levels, so a positive answer that cannot
//! be certified is reported as `Inconclusive` with a diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{spectral_radius, strongly_connected_components};
use crate::model::{Builtin, Model, PhaseSet, TypeId};
use crate::moments::{
    second_moment_sequence, step_up_from_blocks, truncation_radius, BlockStatus, LevelBlocks,
    StepUpSequence,
};

/// Relative margin used when classifying a ratio as below or above one.
pub const RATIO_MARGIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriteriaError {
    #[error("mean progeny graph restricted to levels <= {0} is not strongly connected")]
    IrreducibilityUnverified(usize),
    #[error("truncated taboo mean matrix has spectral radius {0} >= 1")]
    NotSubcritical(f64),
    #[error("type {0} has an offspring outcome with other than one child")]
    NotSingular(TypeId),
    #[error("invalid target set: {0}")]
    InvalidTarget(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DiagValue {
    Number(f64),
    Flag(bool),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub name: String,
    pub value: DiagValue,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriterionReport {
    pub verdict: Verdict,
    pub witness: Option<usize>,
    pub diagnostics: Vec<Diagnostic>,
    pub k_used: usize,
}

impl CriterionReport {
    fn new(k_used: usize) -> Self {
        Self {
            verdict: Verdict::Inconclusive,
            witness: None,
            diagnostics: Vec::new(),
            k_used,
        }
    }

    /// Records a number; non-finite values are stored as the text `"divergent"`.
    fn number(&mut self, name: &str, v: f64) {
        let value = if v.is_finite() {
            DiagValue::Number(v)
        } else {
            DiagValue::Text("divergent".into())
        };
        self.diagnostics.push(Diagnostic {
            name: name.into(),
            value,
        });
    }

    fn flag(&mut self, name: &str, v: bool) {
        self.diagnostics.push(Diagnostic {
            name: name.into(),
            value: DiagValue::Flag(v),
        });
    }

    fn text(&mut self, name: &str, v: impl Into<String>) {
        self.diagnostics.push(Diagnostic {
            name: name.into(),
            value: DiagValue::Text(v.into()),
        });
    }

    fn decide(&mut self, verdict: Verdict, witness: Option<usize>) {
        self.verdict = verdict;
        self.witness = witness;
    }

    pub fn diagnostic(&self, name: &str) -> Option<&DiagValue> {
        self.diagnostics
            .iter()
            .find(|d| d.name == name)
            .map(|d| &d.value)
    }

    pub fn number_of(&self, name: &str) -> Option<f64> {
        match self.diagnostic(name) {
            Some(DiagValue::Number(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn flag_of(&self, name: &str) -> Option<bool> {
        match self.diagnostic(name) {
            Some(DiagValue::Flag(v)) => Some(*v),
            _ => None,
        }
    }
}

/// Structural strong connectivity of the mean graph on levels `<= k`.
pub fn irreducible_up_to(model: &Model, k: usize) -> bool {
    let d = model.d();
    let n = (k + 1) * d;
    let mut succ = vec![Vec::new(); n];
    for level in 0..=k {
        for (&l, block) in &model.mean_blocks_of_level(level) {
            if l > k {
                continue;
            }
            for i in 0..d {
                for j in 0..d {
                    if block[(i, j)] > 0.0 {
                        succ[level * d + i].push(l * d + j);
                    }
                }
            }
        }
    }
    strongly_connected_components(n, &succ).len() == 1
}

fn partial_from_sequence(seq: &StepUpSequence, report: &mut CriterionReport) {
    let max_r = (0..=seq.computed_to())
        .filter_map(|k| seq.aux_radius(k))
        .fold(0.0, f64::max);
    report.number("max_aux_radius", max_r);
    match seq.first_nonfinite() {
        Some((k, status)) => {
            report.number(
                "aux_radius_at_witness",
                seq.aux_radius(k).unwrap_or(f64::NAN),
            );
            report.text("status_at_witness", status.as_str());
            report.decide(Verdict::Fails, Some(k));
        }
        None => {
            report.flag("no_obstruction_found", true);
            report.decide(Verdict::Inconclusive, None);
        }
    }
}

/// Partial extinction: finite step-up matrices up to `k_max`.
///
/// A critical auxiliary radius counts as an obstruction.
pub fn partial_extinction_criterion(
    model: &Model,
    k_max: usize,
) -> Result<CriterionReport, CriteriaError> {
    let mut report = CriterionReport::new(k_max);
    let blocks = LevelBlocks::new(model, k_max, None);
    let up0 = blocks.up(0);
    if up0.iter().all(|&v| v == 0.0) {
        let m00 = blocks
            .block(0, 0)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(model.d(), model.d()));
        let r = spectral_radius(&m00).expect("mean block");
        report.flag("level_zero_decoupled", true);
        report.number("level_zero_radius", r);
        let verdict = match BlockStatus::classify(r) {
            BlockStatus::Finite => Verdict::Holds,
            _ => Verdict::Fails,
        };
        report.decide(verdict, Some(0));
        return Ok(report);
    }
    if !irreducible_up_to(model, k_max) {
        return Err(CriteriaError::IrreducibilityUnverified(k_max));
    }
    let seq = step_up_from_blocks(&blocks, k_max);
    partial_from_sequence(&seq, &mut report);
    Ok(report)
}

/// Classification of `sum_k (1^T M_{0->k} 1)^{-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesClass {
    Convergent,
    Divergent,
    Undecided,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesSummary {
    pub class: SeriesClass,
    pub partial_sums: Vec<f64>,
    /// Largest ratio `u_{k+1} / u_k` over the last quarter of levels.
    pub tail_ratio_max: f64,
    /// `K u_K / ((K/2) u_{K/2})`.
    pub harmonic_ratio: f64,
}

/// Classifies a series of positive terms given by their logarithms.
///
/// `log_terms[k] = None` stands for an infinite term.
pub fn classify_series(log_terms: &[Option<f64>]) -> SeriesSummary {
    let mut partial = Vec::with_capacity(log_terms.len());
    let mut s = 0.0f64;
    for t in log_terms {
        s += t.map_or(f64::INFINITY, f64::exp);
        partial.push(s);
    }
    let n = log_terms.len();
    if n < 4 || log_terms.iter().any(|t| t.is_none()) {
        let class = if log_terms.iter().any(|t| t.is_none()) {
            SeriesClass::Divergent
        } else {
            SeriesClass::Undecided
        };
        return SeriesSummary {
            class,
            partial_sums: partial,
            tail_ratio_max: f64::NAN,
            harmonic_ratio: f64::NAN,
        };
    }
    let logs: Vec<f64> = log_terms.iter().map(|t| t.expect("finite")).collect();
    let last = n - 1;
    let tail_ratio_max = (3 * last / 4..last)
        .map(|k| (logs[k + 1] - logs[k]).exp())
        .fold(0.0, f64::max);
    let half = last / 2;
    let harmonic_ratio =
        ((last as f64).ln() + logs[last] - (half.max(1) as f64).ln() - logs[half.max(1)]).exp();
    let class = if harmonic_ratio >= 1.0 - RATIO_MARGIN {
        SeriesClass::Divergent
    } else if tail_ratio_max < 1.0 - RATIO_MARGIN {
        SeriesClass::Convergent
    } else {
        SeriesClass::Undecided
    };
    SeriesSummary {
        class,
        partial_sums: partial,
        tail_ratio_max,
        harmonic_ratio,
    }
}

/// `log u_k = -ln(1^T M_{0->k} 1)` for `k = 0..=k_max`.
fn inverse_mass_logs(seq: &StepUpSequence, k_max: usize) -> Vec<Option<f64>> {
    (0..=k_max)
        .map(|k| match seq.log_total(k) {
            Some(l) if l.is_finite() => Some(-l),
            _ => None,
        })
        .collect()
}

fn record_series(report: &mut CriterionReport, s: &SeriesSummary) {
    report.text(
        "series",
        match s.class {
            SeriesClass::Convergent => "convergent",
            SeriesClass::Divergent => "divergent",
            SeriesClass::Undecided => "undecided",
        },
    );
    report.number("partial_sum", *s.partial_sums.last().unwrap_or(&0.0));
    report.number("tail_ratio_max", s.tail_ratio_max);
    report.number("harmonic_ratio", s.harmonic_ratio);
}

/// Global extinction: divergence of `sum_k (1^T M_{0->k} 1)^{-1}`.
///
/// The moment assumptions of the underlying theorem are checked and reported
/// but do not block the verdict.
pub fn global_extinction_criterion(
    model: &Model,
    k_max: usize,
) -> Result<CriterionReport, CriteriaError> {
    let partial = partial_extinction_criterion(model, k_max)?;
    let mut report = CriterionReport::new(k_max);
    if partial.verdict == Verdict::Fails {
        report.flag("partial_obstruction", true);
        report.decide(Verdict::Fails, partial.witness);
        return Ok(report);
    }
    let d = model.d();
    let mut a1 = f64::INFINITY;
    let mut a2 = f64::INFINITY;
    for k in 0..=k_max {
        for i in 1..=d {
            let law = model.law(TypeId::new(k, i));
            a1 = a1.min(law.prob_no_children());
            for j in 1..=d {
                a2 = a2.min(law.prob_two_of(TypeId::new(k, j)));
            }
        }
    }
    report.number("a1_inf_no_children", a1);
    report.flag("a1_holds", a1 > 0.0);
    report.number("a2_inf_two_children", a2);
    report.flag("a2_holds", a2 > 0.0);

    let seq = step_up_from_blocks(&LevelBlocks::new(model, k_max, None), k_max);
    if let Ok(second) = second_moment_sequence(model, &seq, k_max) {
        let sup = &second.sup_norm_seen;
        let at_half = sup[k_max / 2];
        let at_end = sup[k_max];
        report.number("a3_sup_norm", at_end);
        report.flag(
            "a3_stabilised",
            at_end <= at_half * (1.0 + RATIO_MARGIN) + 1e-300,
        );
    }
    let series = classify_series(&inverse_mass_logs(&seq, k_max));
    record_series(&mut report, &series);
    match series.class {
        SeriesClass::Divergent => report.decide(Verdict::Holds, None),
        SeriesClass::Convergent => report.decide(Verdict::Fails, Some(3 * k_max / 4)),
        SeriesClass::Undecided => report.decide(Verdict::Inconclusive, None),
    }
    Ok(report)
}

fn phase_target(model: &Model, target: &PhaseSet) -> Result<Vec<usize>, CriteriaError> {
    if !target.is_phase_union() {
        return Err(CriteriaError::InvalidTarget(
            "target must be a union of whole phases".into(),
        ));
    }
    if target.is_empty_set() {
        return Err(CriteriaError::InvalidTarget("target is empty".into()));
    }
    let rest: Vec<usize> = (1..=model.d())
        .filter(|p| !target.phases().contains(p))
        .collect();
    if rest.is_empty() {
        return Err(CriteriaError::InvalidTarget(
            "complement of target is empty".into(),
        ));
    }
    Ok(rest)
}

/// Expected number of direct children in `A` of each type `<k, i>` outside `A`.
pub fn t_vector(model: &Model, target: &PhaseSet, k: usize) -> Result<DVector<f64>, CriteriaError> {
    let rest = phase_target(model, target)?;
    let blocks = model.mean_blocks_of_level(k);
    Ok(DVector::from_iterator(
        rest.len(),
        rest.iter().map(|&i| {
            blocks
                .values()
                .map(|b| {
                    target
                        .phases()
                        .iter()
                        .map(|&j| b[(i - 1, j - 1)])
                        .sum::<f64>()
                })
                .sum()
        }),
    ))
}

/// First-passage weights between level-`k` types outside `A`.
#[derive(Clone, Debug, Serialize)]
pub struct FirstPassageMatrix {
    pub level: usize,
    pub phases: Vec<usize>,
    pub k_trunc: usize,
    pub matrix: DMatrix<f64>,
}

/// First-passage path weights on the complement of `A` at level `k`.
///
/// Uses `N = (I - M)^{-1}` on the complement truncated to levels
/// `<= k_trunc` and the renewal identity `N(i,j) = F(i,j) N(j,j)`.
pub fn first_passage_matrix(
    model: &Model,
    target: &PhaseSet,
    k: usize,
    k_trunc: usize,
) -> Result<FirstPassageMatrix, CriteriaError> {
    let rest = phase_target(model, target)?;
    if k > k_trunc {
        return Err(CriteriaError::InvalidTarget(format!(
            "level {k} above truncation {k_trunc}"
        )));
    }
    let blocks = LevelBlocks::new(model, k_trunc, Some(target));
    let radius = truncation_radius(&blocks, k_trunc);
    if radius >= 1.0 {
        return Err(CriteriaError::NotSubcritical(radius));
    }
    let v = rest.len();
    let n = v * (k_trunc + 1);
    let mut sys = DMatrix::<f64>::identity(n, n);
    for level in 0..=k_trunc {
        for (&l, b) in blocks.level(level) {
            if l > k_trunc {
                continue;
            }
            for (a, &p) in rest.iter().enumerate() {
                for (c, &q) in rest.iter().enumerate() {
                    sys[(level * v + a, l * v + c)] -= b[(p - 1, q - 1)];
                }
            }
        }
    }
    let mut rhs = DMatrix::zeros(n, v);
    for c in 0..v {
        rhs[(k * v + c, c)] = 1.0;
    }
    let cols = sys
        .lu()
        .solve(&rhs)
        .ok_or(CriteriaError::NotSubcritical(radius))?;
    let matrix = DMatrix::from_fn(v, v, |i, j| {
        if i == j {
            1.0
        } else {
            cols[(k * v + i, j)] / cols[(k * v + j, j)]
        }
    });
    Ok(FirstPassageMatrix {
        level: k,
        phases: rest,
        k_trunc,
        matrix,
    })
}

/// Closed-form convergence norm of the taboo mean matrix for the built-in strips.
fn closed_form_norm(model: &Model, rest: &[usize]) -> Option<f64> {
    let p = model.params();
    let (a, b, c) = (p.get("a")?, p.get("b")?, p.get("c")?);
    let walk = 2.0 * (a * c).sqrt();
    match (model.builtin()?, rest) {
        (Builtin::Example1, [_]) => Some(b + walk),
        (Builtin::Example2, [1]) => Some(b + walk),
        (Builtin::Example2, [2]) => Some(walk),
        _ => None,
    }
}

/// Whether the taboo process on the complement of `A` can survive globally.
fn taboo_survival(
    model: &Model,
    target: &PhaseSet,
    k_max: usize,
    report: &mut CriterionReport,
) -> Verdict {
    let blocks = LevelBlocks::new(model, k_max, Some(target));
    let seq = step_up_from_blocks(&blocks, k_max);
    if let Some((k, status)) = seq.first_nonfinite() {
        report.text("taboo_obstruction", status.as_str());
        report.witness = Some(k);
        return Verdict::Holds;
    }
    let series = classify_series(&inverse_mass_logs(&seq, k_max));
    record_series(report, &series);
    match series.class {
        SeriesClass::Convergent => Verdict::Holds,
        SeriesClass::Divergent => {
            report.witness = Some(k_max);
            Verdict::Fails
        }
        SeriesClass::Undecided => Verdict::Inconclusive,
    }
}

/// Necessary condition for `q < q(A)`: the process restricted to the
/// complement of `A` survives with positive probability.
///
/// `Fails` means `q(A) = q` is forced.
pub fn necessary_condition_check(
    model: &Model,
    target: &PhaseSet,
    k_max: usize,
) -> Result<CriterionReport, CriteriaError> {
    phase_target(model, target)?;
    let mut report = CriterionReport::new(k_max);
    let v = taboo_survival(model, target, k_max, &mut report);
    let witness = report.witness;
    report.decide(
        v,
        if v == Verdict::Inconclusive {
            None
        } else {
            witness
        },
    );
    Ok(report)
}

/// Sufficient conditions for `q < q(A)` and `q(not A) < q_partial`.
pub fn theorem_4_6_check(
    model: &Model,
    target: &PhaseSet,
    k_max: usize,
) -> Result<CriterionReport, CriteriaError> {
    let rest = phase_target(model, target)?;
    let mut report = CriterionReport::new(k_max);

    let gate_survival = taboo_survival(model, target, k_max, &mut report);
    report.text(
        "gate_taboo_survival",
        format!("{gate_survival:?}").to_lowercase(),
    );

    let blocks = LevelBlocks::new(model, k_max, Some(target));
    let gate_norm = match closed_form_norm(model, &rest) {
        Some(nu) => {
            report.number("taboo_norm", nu);
            report.text("taboo_norm_source", "closed_form");
            if nu < 1.0 {
                Verdict::Holds
            } else {
                Verdict::Fails
            }
        }
        None => {
            let lower = truncation_radius(&blocks, k_max);
            report.number("taboo_norm", lower);
            report.text("taboo_norm_source", "truncation_lower_bound");
            if lower >= 1.0 {
                Verdict::Fails
            } else {
                Verdict::Inconclusive
            }
        }
    };
    report.text("gate_taboo_norm", format!("{gate_norm:?}").to_lowercase());

    // condition (A): sum_k (1^T t_k) 1^T M_{0->k-1} 1 on the complement
    let seq = step_up_from_blocks(&blocks, k_max);
    let v = rest.len() as f64;
    let mut logs: Vec<Option<f64>> = Vec::with_capacity(k_max + 1);
    let mut series_blocked = None;
    for k in 0..=k_max {
        let t: f64 = t_vector(model, target, k)?.sum();
        let mass = if k == 0 {
            Some(v.ln())
        } else {
            seq.log_total(k - 1)
        };
        match mass {
            None => {
                series_blocked = Some(k);
                break;
            }
            Some(m) => logs.push(if t > 0.0 { Some(t.ln() + m) } else { None }),
        }
    }
    let cond_a = if let Some(k) = series_blocked {
        report.number("cond_a_blocked_at", k as f64);
        Verdict::Fails
    } else {
        let tail_start = k_max / 2;
        match (logs[tail_start], logs[k_max]) {
            _ if logs[tail_start..].iter().all(|l| l.is_none()) => {
                report.text("cond_a_series", "finitely_many_terms");
                Verdict::Holds
            }
            (Some(lo), Some(hi)) => {
                let root = ((hi - lo) / (k_max - tail_start) as f64).exp();
                report.number("cond_a_root_ratio", root);
                if root < 1.0 - RATIO_MARGIN {
                    Verdict::Holds
                } else if root > 1.0 + RATIO_MARGIN {
                    Verdict::Fails
                } else {
                    Verdict::Inconclusive
                }
            }
            _ => Verdict::Inconclusive,
        }
    };
    report.text("cond_a", format!("{cond_a:?}").to_lowercase());

    // condition (B): bounded first-passage weights
    let cond_b = if rest.len() == 1 {
        report.text("cond_b_source", "single_phase");
        Verdict::Holds
    } else if taboo_symmetric(&blocks, &rest, k_max) {
        report.text("cond_b_source", "symmetric");
        Verdict::Holds
    } else if gate_norm == Verdict::Fails {
        Verdict::Fails
    } else {
        let mut worst = 0.0f64;
        let mut k = 0;
        let mut ok = true;
        while k <= k_max / 2 {
            match first_passage_matrix(model, target, k, k_max) {
                Ok(f) => worst = worst.max(f.matrix.max()),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
            k = if k == 0 { 1 } else { 2 * k };
        }
        report.text("cond_b_source", "sampled");
        report.number("cond_b_sampled_max", worst);
        if ok {
            Verdict::Inconclusive
        } else {
            Verdict::Fails
        }
    };
    report.text("cond_b", format!("{cond_b:?}").to_lowercase());

    let parts = [gate_survival, gate_norm, cond_a, cond_b];
    let verdict = if parts.iter().all(|v| *v == Verdict::Holds) {
        Verdict::Holds
    } else if parts.iter().any(|v| *v == Verdict::Fails) {
        Verdict::Fails
    } else {
        Verdict::Inconclusive
    };
    let witness = match verdict {
        Verdict::Fails => Some(report.witness.unwrap_or(k_max)),
        _ => report.witness,
    };
    report.decide(verdict, witness);
    Ok(report)
}

fn taboo_symmetric(blocks: &LevelBlocks, rest: &[usize], k_max: usize) -> bool {
    let d = blocks.d();
    let zero = DMatrix::zeros(d, d);
    for k in 0..=k_max {
        for l in 0..=k_max {
            let kl = blocks.block(k, l).unwrap_or(&zero);
            let lk = blocks.block(l, k).unwrap_or(&zero);
            for &i in rest {
                for &j in rest {
                    if (kl[(i - 1, j - 1)] - lk[(j - 1, i - 1)]).abs() > 1e-12 {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Survival outside `A` for processes with exactly one child per individual.
///
/// Looks at `1^T (prod_{j=k}^{K} M_j) 1 / v` for the taboo step-up matrices:
/// `Holds` (`q(A) > 0`) when it stays above one half from `k = K/2`, `Fails`
/// when it drops below `1e-3`.
pub fn singular_survival_check(
    model: &Model,
    target: &PhaseSet,
    k_max: usize,
) -> Result<CriterionReport, CriteriaError> {
    let rest = phase_target(model, target)?;
    for k in 0..=k_max {
        for i in 1..=model.d() {
            let t = TypeId::new(k, i);
            if !model.law(t).is_singular() {
                return Err(CriteriaError::NotSingular(t));
            }
        }
    }
    let mut report = CriterionReport::new(k_max);
    let blocks = LevelBlocks::new(model, k_max, Some(target));
    let seq = step_up_from_blocks(&blocks, k_max);
    if let Some((k, _)) = seq.first_nonfinite() {
        // a singular chain cannot accumulate expected mass above one
        report.text("unexpected_nonfinite", format!("level {k}"));
        report.decide(Verdict::Inconclusive, None);
        return Ok(report);
    }
    let v = rest.len() as f64;
    let tail_mass = |from: usize| -> f64 {
        let d = model.d();
        let mut p = DMatrix::<f64>::identity(d, d);
        for j in from..=k_max {
            p *= seq.block(j).expect("finite");
        }
        rest.iter()
            .map(|&i| rest.iter().map(|&j| p[(i - 1, j - 1)]).sum::<f64>())
            .sum::<f64>()
            / v
    };
    let positive_rows = (0..k_max).all(|k| {
        blocks
            .block(k, k + 1)
            .map(|b| {
                rest.iter()
                    .all(|&i| rest.iter().map(|&j| b[(i - 1, j - 1)]).sum::<f64>() > 0.0)
            })
            .unwrap_or(false)
    });
    let tail = tail_mass(k_max / 2);
    report.number("tail_product_mass", tail);
    report.flag("upward_rows_positive", positive_rows);
    if positive_rows {
        report.number("full_product_mass", tail_mass(0));
    }
    if tail >= 0.5 {
        report.decide(Verdict::Holds, None);
    } else if tail < 1e-3 {
        report.decide(Verdict::Fails, Some(k_max / 2));
    } else {
        report.decide(Verdict::Inconclusive, None);
    }
    Ok(report)
}

//! Type space, offspring laws and the built-in example processes.
//!
//! A process lives on the countable type set of pairs `<level, phase>` with
//! `level >= 0` and `1 <= phase <= d`. Every offspring law is stored as a
//! finite list of atoms, so generating-function values and factorial moments
//! are exact finite sums.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when checking that atom probabilities sum to one.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: String,
        value: f64,
        reason: String,
    },
    #[error("offspring law for {parent} is not a probability distribution: {reason}")]
    InvalidLaw { parent: String, reason: String },
    #[error("{child} is not a valid child of a level-{level} parent")]
    HessenbergViolation { level: usize, child: TypeId },
    #[error("phase {phase} outside 1..={d}")]
    PhaseOutOfRange { phase: usize, d: usize },
    #[error("second moment block V_{{{k},{i}{j}}} is outside the offspring support")]
    OutOfSupport { k: usize, i: usize, j: usize },
    #[error("invalid set: {0}")]
    InvalidSet(String),
    #[error("model has no parameter named {0}")]
    UnknownParameter(String),
}

/// A type `<level, phase>`; phases are 1-based. Ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeId {
    pub level: usize,
    pub phase: usize,
}

impl TypeId {
    pub const fn new(level: usize, phase: usize) -> Self {
        Self { level, phase }
    }

    /// Dense index of this type inside a level-major array with `d` phases.
    #[inline]
    pub fn index(self, d: usize) -> usize {
        self.level * d + (self.phase - 1)
    }

    #[inline]
    pub fn from_index(idx: usize, d: usize) -> Self {
        Self::new(idx / d, idx % d + 1)
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.level, self.phase)
    }
}

/// One outcome of an offspring law: a multiset of children and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub children: Vec<(TypeId, u32)>,
    pub prob: f64,
}

impl Atom {
    pub fn new(mut children: Vec<(TypeId, u32)>, prob: f64) -> Self {
        children.retain(|&(_, n)| n > 0);
        children.sort_by_key(|&(t, _)| t);
        let mut merged: Vec<(TypeId, u32)> = Vec::with_capacity(children.len());
        for (t, n) in children {
            match merged.last_mut() {
                Some((last, m)) if *last == t => *m += n,
                _ => merged.push((t, n)),
            }
        }
        Self {
            children: merged,
            prob,
        }
    }

    pub fn empty(prob: f64) -> Self {
        Self {
            children: Vec::new(),
            prob,
        }
    }

    /// `count` children of the single type `t`.
    pub fn monomial(t: TypeId, count: u32, prob: f64) -> Self {
        Self::new(vec![(t, count)], prob)
    }

    pub fn size(&self) -> u64 {
        self.children.iter().map(|&(_, n)| u64::from(n)).sum()
    }
}

/// A finite-support offspring distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct OffspringLaw {
    atoms: Vec<Atom>,
}

impl OffspringLaw {
    /// Builds a law, dropping zero-probability atoms.
    pub fn new(atoms: Vec<Atom>) -> Result<Self, String> {
        let mut kept = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        for atom in atoms {
            if !atom.prob.is_finite() || atom.prob < 0.0 || atom.prob > 1.0 + PROB_TOL {
                return Err(format!("atom probability {} outside [0,1]", atom.prob));
            }
            if atom.prob == 0.0 {
                continue;
            }
            total += atom.prob;
            kept.push(atom);
        }
        if (total - 1.0).abs() > PROB_TOL {
            return Err(format!("probabilities sum to {total}"));
        }
        Ok(Self { atoms: kept })
    }

    /// The law of an individual that dies without children.
    pub fn sterile() -> Self {
        Self {
            atoms: vec![Atom::empty(1.0)],
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn max_child_level(&self) -> Option<usize> {
        self.atoms
            .iter()
            .flat_map(|a| a.children.iter().map(|(t, _)| t.level))
            .max()
    }

    pub fn prob_no_children(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.children.is_empty())
            .map(|a| a.prob)
            .sum()
    }

    /// Probability of exactly `2 e_t`, i.e. two children both of type `t`.
    pub fn prob_two_of(&self, t: TypeId) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.children.len() == 1 && a.children[0] == (t, 2))
            .map(|a| a.prob)
            .sum()
    }

    pub fn is_singular(&self) -> bool {
        self.atoms.iter().all(|a| a.size() == 1)
    }

    /// Evaluates `sum_r p(r) prod_t s_t^{r_t}`.
    pub fn pgf(&self, s: impl Fn(TypeId) -> f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| {
                a.children
                    .iter()
                    .fold(a.prob, |acc, &(t, n)| acc * s(t).powi(n as i32))
            })
            .sum()
    }

    /// Expected number of children of each type.
    pub fn mean_row(&self) -> BTreeMap<TypeId, f64> {
        let mut row = BTreeMap::new();
        for a in &self.atoms {
            for &(t, n) in &a.children {
                *row.entry(t).or_insert(0.0) += a.prob * f64::from(n);
            }
        }
        row
    }

    /// Same law with every child moved `by` levels up.
    pub fn shifted(&self, by: usize) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                children: a
                    .children
                    .iter()
                    .map(|&(t, n)| (TypeId::new(t.level + by, t.phase), n))
                    .collect(),
                prob: a.prob,
            })
            .collect();
        Self { atoms }
    }

    /// Distribution of per-level child counts, phases summed out.
    pub fn aggregate_by_level(&self) -> BTreeMap<Vec<(usize, u64)>, f64> {
        let mut out = BTreeMap::new();
        for a in &self.atoms {
            let mut per_level: BTreeMap<usize, u64> = BTreeMap::new();
            for &(t, n) in &a.children {
                *per_level.entry(t.level).or_insert(0) += u64::from(n);
            }
            let key: Vec<(usize, u64)> = per_level.into_iter().collect();
            *out.entry(key).or_insert(0.0) += a.prob;
        }
        out
    }

    /// Applies a phase relabelling to every child.
    pub fn relabelled(&self, perm: impl Fn(usize) -> usize) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| {
                Atom::new(
                    a.children
                        .iter()
                        .map(|&(t, n)| (TypeId::new(t.level, perm(t.phase)), n))
                        .collect(),
                    a.prob,
                )
            })
            .collect();
        Self { atoms }
    }
}

/// A target set of types: a union of whole phases, adjusted by finite lists.
///
/// `t` belongs to the set iff `(t.phase in phases && t not in exclude) || t in include`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseSet {
    phases: BTreeSet<usize>,
    include: BTreeSet<TypeId>,
    exclude: BTreeSet<TypeId>,
}

impl PhaseSet {
    pub fn new(
        d: usize,
        phases: impl IntoIterator<Item = usize>,
        include: impl IntoIterator<Item = TypeId>,
        exclude: impl IntoIterator<Item = TypeId>,
    ) -> Result<Self, ModelError> {
        let phases: BTreeSet<usize> = phases.into_iter().collect();
        let include: BTreeSet<TypeId> = include.into_iter().collect();
        let exclude: BTreeSet<TypeId> = exclude.into_iter().collect();
        for &p in phases
            .iter()
            .chain(include.iter().map(|t| &t.phase))
            .chain(exclude.iter().map(|t| &t.phase))
        {
            if p == 0 || p > d {
                return Err(ModelError::PhaseOutOfRange { phase: p, d });
            }
        }
        if let Some(t) = include.iter().find(|t| phases.contains(&t.phase)) {
            return Err(ModelError::InvalidSet(format!(
                "included type {t} already lies in a listed phase"
            )));
        }
        if let Some(t) = exclude.iter().find(|t| !phases.contains(&t.phase)) {
            return Err(ModelError::InvalidSet(format!(
                "excluded type {t} lies outside the listed phases"
            )));
        }
        Ok(Self {
            phases,
            include,
            exclude,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all(d: usize) -> Self {
        Self {
            phases: (1..=d).collect(),
            ..Self::default()
        }
    }

    pub fn phases_of(phases: impl IntoIterator<Item = usize>) -> Self {
        Self {
            phases: phases.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn single(t: TypeId) -> Self {
        Self {
            include: std::iter::once(t).collect(),
            ..Self::default()
        }
    }

    #[inline]
    pub fn contains(&self, t: TypeId) -> bool {
        (self.phases.contains(&t.phase) && !self.exclude.contains(&t)) || self.include.contains(&t)
    }

    pub fn complement(&self, d: usize) -> Self {
        Self {
            phases: (1..=d).filter(|p| !self.phases.contains(p)).collect(),
            include: self.exclude.clone(),
            exclude: self.include.clone(),
        }
    }

    /// True when the set is a union of whole phases.
    pub fn is_phase_union(&self) -> bool {
        self.include.is_empty() && self.exclude.is_empty()
    }

    pub fn is_empty_set(&self) -> bool {
        self.phases.is_empty() && self.include.is_empty()
    }

    pub fn is_everything(&self, d: usize) -> bool {
        self.phases.len() == d && self.exclude.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn phases(&self) -> &BTreeSet<usize> {
        &self.phases
    }

    pub fn include(&self) -> &BTreeSet<TypeId> {
        &self.include
    }

    pub fn exclude(&self) -> &BTreeSet<TypeId> {
        &self.exclude
    }

    /// Highest level carrying an explicit include/exclude entry.
    pub fn max_listed_level(&self) -> Option<usize> {
        self.include
            .iter()
            .chain(self.exclude.iter())
            .map(|t| t.level)
            .max()
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phases: Vec<String> = self.phases.iter().map(|p| format!("A{p}")).collect();
        write!(f, "{{{}}}", phases.join(" u "))?;
        if !self.include.is_empty() {
            let v: Vec<String> = self.include.iter().map(|t| t.to_string()).collect();
            write!(f, " + [{}]", v.join(","))?;
        }
        if !self.exclude.is_empty() {
            let v: Vec<String> = self.exclude.iter().map(|t| t.to_string()).collect();
            write!(f, " - [{}]", v.join(","))?;
        }
        Ok(())
    }
}

/// How custom models continue past their last explicit level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailRule {
    /// The last explicit level's laws, with every child shifted up.
    Shift,
    /// Every type above the last explicit level dies childless.
    Sterile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    Example1,
    Example2,
    Chain,
}

#[derive(Clone, Debug)]
enum Kind {
    Example1 {
        a: f64,
        b: f64,
        c: f64,
        y: f64,
        x: f64,
        u: u32,
    },
    Example2 {
        a: f64,
        b: f64,
        c: f64,
        u: u32,
    },
    Chain {
        a: f64,
        b: f64,
        c: f64,
        u: u32,
    },
    Custom {
        levels: Arc<Vec<Vec<OffspringLaw>>>,
        tail: TailRule,
    },
    Sterilized {
        base: Arc<Model>,
        keep: PhaseSet,
    },
}

/// An immutable block lower Hessenberg branching process.
#[derive(Clone, Debug)]
pub struct Model {
    name: String,
    d: usize,
    kind: Kind,
    params: BTreeMap<String, f64>,
}

fn check_param(name: &str, value: f64, min: f64) -> Result<(), ModelError> {
    if !value.is_finite() || value < min {
        return Err(ModelError::InvalidParameter {
            name: name.to_string(),
            value,
            reason: format!("must be finite and >= {min}"),
        });
    }
    Ok(())
}

fn monomial_exponent(total_mean: f64) -> u32 {
    (total_mean + 1.0).ceil() as u32
}

fn check_residual(name: &str, mass: f64, u: u32) -> Result<(), ModelError> {
    let residual = 1.0 - mass / f64::from(u);
    if !(0.0..=1.0).contains(&residual) {
        return Err(ModelError::InvalidParameter {
            name: name.to_string(),
            value: residual,
            reason: "residual no-offspring probability outside [0,1]".into(),
        });
    }
    Ok(())
}

/// Two-phase strip with cross-phase rates decaying like `y / x^k`.
pub fn build_example1(a: f64, b: f64, c: f64, y: f64, x: f64) -> Result<Model, ModelError> {
    for (n, v) in [("a", a), ("b", b), ("c", c), ("y", y)] {
        check_param(n, v, 0.0)?;
    }
    check_param("x", x, 1.0)?;
    let u = monomial_exponent(a + b + c + y);
    check_residual("level 0", b + c + y, u)?;
    check_residual("level k", a + b + c + y, u)?;
    let params = [("a", a), ("b", b), ("c", c), ("y", y), ("x", x)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(Model {
        name: "example1".into(),
        d: 2,
        kind: Kind::Example1 { a, b, c, y, x, u },
        params,
    })
}

/// Asymmetric two-phase strip: phase 2 leaks into phase 1 at every level.
pub fn build_example2(a: f64, b: f64, c: f64) -> Result<Model, ModelError> {
    for (n, v) in [("a", a), ("b", b), ("c", c)] {
        check_param(n, v, 0.0)?;
    }
    let u = monomial_exponent(a + b + c);
    check_residual("level k", a + b + c, u)?;
    let params = [("a", a), ("b", b), ("c", c)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(Model {
        name: "example2".into(),
        d: 2,
        kind: Kind::Example2 { a, b, c, u },
        params,
    })
}

/// Single-phase nearest-neighbour chain with an absorbing barrier below level 0.
pub fn build_chain(a: f64, b: f64, c: f64) -> Result<Model, ModelError> {
    for (n, v) in [("a", a), ("b", b), ("c", c)] {
        check_param(n, v, 0.0)?;
    }
    let u = monomial_exponent(a + b + c);
    check_residual("level k", a + b + c, u)?;
    let params = [("a", a), ("b", b), ("c", c)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(Model {
        name: "chain".into(),
        d: 1,
        kind: Kind::Chain { a, b, c, u },
        params,
    })
}

/// A model given level by level; `levels[k][i - 1]` is the law of `<k, i>`.
pub fn build_custom(
    name: &str,
    d: usize,
    levels: Vec<Vec<OffspringLaw>>,
    tail: TailRule,
) -> Result<Model, ModelError> {
    if d == 0 {
        return Err(ModelError::PhaseOutOfRange { phase: 0, d });
    }
    if levels.is_empty() {
        return Err(ModelError::InvalidSet(
            "custom model needs at least one level".into(),
        ));
    }
    for (k, row) in levels.iter().enumerate() {
        if row.len() != d {
            return Err(ModelError::InvalidLaw {
                parent: format!("level {k}"),
                reason: format!("expected {d} laws, found {}", row.len()),
            });
        }
        for law in row {
            for a in law.atoms() {
                for &(t, _) in &a.children {
                    if t.phase == 0 || t.phase > d {
                        return Err(ModelError::PhaseOutOfRange { phase: t.phase, d });
                    }
                    if t.level > k + 1 {
                        return Err(ModelError::HessenbergViolation { level: k, child: t });
                    }
                }
            }
        }
    }
    Ok(Model {
        name: name.to_string(),
        d,
        kind: Kind::Custom {
            levels: Arc::new(levels),
            tail,
        },
        params: BTreeMap::new(),
    })
}

impl Model {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Which built-in family the model belongs to, if any.
    pub fn builtin(&self) -> Option<Builtin> {
        match &self.kind {
            Kind::Example1 { .. } => Some(Builtin::Example1),
            Kind::Example2 { .. } => Some(Builtin::Example2),
            Kind::Chain { .. } => Some(Builtin::Chain),
            _ => None,
        }
    }

    /// Level beyond which laws follow a fixed formula in `k`.
    pub fn level_hint(&self) -> Option<usize> {
        match &self.kind {
            Kind::Example1 { .. } | Kind::Example2 { .. } | Kind::Chain { .. } => Some(1),
            Kind::Custom { levels, .. } => Some(levels.len() - 1),
            Kind::Sterilized { base, keep } => {
                let listed = keep.max_listed_level().map_or(0, |l| l + 1);
                base.level_hint().map(|h| h.max(listed))
            }
        }
    }

    /// Rebuilds a built-in model with one parameter replaced.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Model, ModelError> {
        let get = |k: &str| self.params.get(k).copied();
        if get(name).is_none() {
            return Err(ModelError::UnknownParameter(name.to_string()));
        }
        let mut p = self.params.clone();
        p.insert(name.to_string(), value);
        match &self.kind {
            Kind::Example1 { .. } => build_example1(p["a"], p["b"], p["c"], p["y"], p["x"]),
            Kind::Example2 { .. } => build_example2(p["a"], p["b"], p["c"]),
            Kind::Chain { .. } => build_chain(p["a"], p["b"], p["c"]),
            _ => Err(ModelError::UnknownParameter(name.to_string())),
        }
    }

    /// The process in which every type outside `keep` is sterile.
    pub fn sterilized(&self, keep: &PhaseSet) -> Model {
        Model {
            name: format!("{}|taboo", self.name),
            d: self.d,
            kind: Kind::Sterilized {
                base: Arc::new(self.clone()),
                keep: keep.clone(),
            },
            params: self.params.clone(),
        }
    }

    /// Offspring law of type `t`.
    pub fn law(&self, t: TypeId) -> OffspringLaw {
        debug_assert!(t.phase >= 1 && t.phase <= self.d);
        let k = t.level;
        let i = t.phase;
        match &self.kind {
            Kind::Example1 { a, b, c, y, x, u } => {
                let uf = f64::from(*u);
                let other = 3 - i;
                let cross = y * x.powi(-(k as i32));
                let mut atoms = Vec::with_capacity(5);
                let mut mass = b + c + cross;
                if k > 0 {
                    atoms.push(Atom::monomial(TypeId::new(k - 1, i), *u, a / uf));
                    mass += a;
                }
                atoms.push(Atom::monomial(TypeId::new(k, i), *u, b / uf));
                atoms.push(Atom::monomial(TypeId::new(k + 1, i), *u, c / uf));
                atoms.push(Atom::monomial(TypeId::new(k, other), *u, cross / uf));
                atoms.push(Atom::empty(1.0 - mass / uf));
                OffspringLaw::new(atoms).expect("example 1 law")
            }
            Kind::Example2 { a, b, c, u } => {
                let uf = f64::from(*u);
                let mut atoms = Vec::with_capacity(4);
                let mut mass = b + c;
                if k == 0 {
                    atoms.push(Atom::monomial(TypeId::new(0, 3 - i), *u, b / uf));
                } else {
                    atoms.push(Atom::monomial(TypeId::new(k - 1, i), *u, a / uf));
                    atoms.push(Atom::monomial(TypeId::new(k, 1), *u, b / uf));
                    mass += a;
                }
                atoms.push(Atom::monomial(TypeId::new(k + 1, i), *u, c / uf));
                atoms.push(Atom::empty(1.0 - mass / uf));
                OffspringLaw::new(atoms).expect("example 2 law")
            }
            Kind::Chain { a, b, c, u } => {
                let uf = f64::from(*u);
                let mut atoms = Vec::with_capacity(4);
                let mut mass = b + c;
                if k > 0 {
                    atoms.push(Atom::monomial(TypeId::new(k - 1, 1), *u, a / uf));
                    mass += a;
                }
                atoms.push(Atom::monomial(TypeId::new(k, 1), *u, b / uf));
                atoms.push(Atom::monomial(TypeId::new(k + 1, 1), *u, c / uf));
                atoms.push(Atom::empty(1.0 - mass / uf));
                OffspringLaw::new(atoms).expect("chain law")
            }
            Kind::Custom { levels, tail } => {
                let last = levels.len() - 1;
                if k <= last {
                    levels[k][i - 1].clone()
                } else {
                    match tail {
                        TailRule::Shift => levels[last][i - 1].shifted(k - last),
                        TailRule::Sterile => OffspringLaw::sterile(),
                    }
                }
            }
            Kind::Sterilized { base, keep } => {
                if keep.contains(t) {
                    base.law(t)
                } else {
                    OffspringLaw::sterile()
                }
            }
        }
    }

    /// `G_j(s)` where `s` is given on finitely many types and `default` elsewhere.
    pub fn pgf_eval(&self, j: TypeId, s: &HashMap<TypeId, f64>, default: f64) -> f64 {
        self.law(j).pgf(|t| s.get(&t).copied().unwrap_or(default))
    }

    /// Block `M_{kl}`: expected type-`<l, j>` children of a type-`<k, i>` parent.
    pub fn mean_block(&self, k: usize, l: usize) -> DMatrix<f64> {
        let d = self.d;
        let mut m = DMatrix::zeros(d, d);
        if l > k + 1 {
            return m;
        }
        for i in 1..=d {
            for a in self.law(TypeId::new(k, i)).atoms() {
                for &(t, n) in &a.children {
                    if t.level == l {
                        m[(i - 1, t.phase - 1)] += a.prob * f64::from(n);
                    }
                }
            }
        }
        m
    }

    /// All nonzero mean blocks `M_{kl}` of level `k`, keyed by `l`.
    pub fn mean_blocks_of_level(&self, k: usize) -> BTreeMap<usize, DMatrix<f64>> {
        let d = self.d;
        let mut out: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        for i in 1..=d {
            for a in self.law(TypeId::new(k, i)).atoms() {
                for &(t, n) in &a.children {
                    let block = out.entry(t.level).or_insert_with(|| DMatrix::zeros(d, d));
                    block[(i - 1, t.phase - 1)] += a.prob * f64::from(n);
                }
            }
        }
        out
    }

    /// `V_{k,ij}`: second factorial moments, a `d x d^2` matrix with column `(b-1) d + (c-1)`.
    pub fn second_moment_block(
        &self,
        k: usize,
        i: usize,
        j: usize,
    ) -> Result<DMatrix<f64>, ModelError> {
        if i > k + 1 || j > k + 1 {
            return Err(ModelError::OutOfSupport { k, i, j });
        }
        let d = self.d;
        let mut v = DMatrix::zeros(d, d * d);
        for row in 1..=d {
            for atom in self.law(TypeId::new(k, row)).atoms() {
                for &(t1, n1) in atom.children.iter().filter(|(t, _)| t.level == i) {
                    for &(t2, n2) in atom.children.iter().filter(|(t, _)| t.level == j) {
                        let n2 = f64::from(n2) - if t1 == t2 { 1.0 } else { 0.0 };
                        let col = (t1.phase - 1) * d + (t2.phase - 1);
                        v[(row - 1, col)] += atom.prob * f64::from(n1) * n2;
                    }
                }
            }
        }
        Ok(v)
    }

    /// Whether every level `<= k_max` aggregates to a phase-independent law.
    pub fn local_isomorphism_check(&self, k_max: usize) -> IsomorphismReport {
        for k in 0..=k_max {
            let reference = self.law(TypeId::new(k, 1)).aggregate_by_level();
            for i in 2..=self.d {
                let other = self.law(TypeId::new(k, i)).aggregate_by_level();
                let tv = total_variation(&reference, &other);
                if tv > PROB_TOL {
                    return IsomorphismReport {
                        holds: false,
                        levels_checked: k_max,
                        counterexample: Some(IsomorphismCounterexample {
                            level: k,
                            phase_a: 1,
                            phase_b: i,
                            total_variation: tv,
                        }),
                    };
                }
            }
        }
        IsomorphismReport {
            holds: true,
            levels_checked: k_max,
            counterexample: None,
        }
    }

    /// True when every law on levels `<= k_max` puts exactly one child on each atom.
    pub fn is_singular_up_to(&self, k_max: usize) -> bool {
        (0..=k_max).all(|k| (1..=self.d).all(|i| self.law(TypeId::new(k, i)).is_singular()))
    }
}

fn total_variation(
    p: &BTreeMap<Vec<(usize, u64)>, f64>,
    q: &BTreeMap<Vec<(usize, u64)>, f64>,
) -> f64 {
    let keys: BTreeSet<&Vec<(usize, u64)>> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IsomorphismCounterexample {
    pub level: usize,
    pub phase_a: usize,
    pub phase_b: usize,
    pub total_variation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IsomorphismReport {
    pub holds: bool,
    pub levels_checked: usize,
    pub counterexample: Option<IsomorphismCounterexample>,
}

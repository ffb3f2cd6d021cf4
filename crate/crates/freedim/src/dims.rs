//! Exact dimension calculus over group and von Neumann algebra expression
//! trees, plus the constructors that realize interpolated free group factors
//! from infinite tensor-product data.
//!
//! Group values (first two L2-Betti numbers, the derivation dimension
//! `beta1 - beta0 + 1`, and the microstates dimension) are exact rationals.
//! Von Neumann values are exact unless an infinite tensor sequence is
//! involved, in which case they are certified intervals.

use crate::algebra::{delta0_tensor_sequence, AlgebraError, FactorSource, FdAlgebra};
use crate::rational::{decimal_string, format_rational, rat, rat_int, Rational, Round};
use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DimError {
    #[error("group order must be a positive integer")]
    InvalidOrder,
    #[error("free group rank must be at least 1")]
    InvalidFreeRank,
    #[error("product factor {which} is finite; the product rule needs both factors infinite")]
    ProductFiniteChild { which: usize },
    #[error("amalgam base coincides with factor {which}; a proper amalgam needs a strictly smaller base")]
    ImproperAmalgam { which: usize },
    #[error("amalgam base has first L2-Betti number {beta1}, the Betti surgery formula needs 0")]
    BaseBettiNonzero { beta1: String },
    #[error("not in the computable class: {hypothesis}")]
    NotClassA { hypothesis: String },
    #[error("amalgamated additivity needs the {side} factor regular (hyperfinite or certified regular)")]
    NotRegular { side: &'static str },
    #[error("corner trace {got} is outside (0, 1]")]
    TracePOutOfRange { got: String },
    #[error("target dimension s = {got} must lie strictly between 1 and 2")]
    SOutOfRange { got: String },
    #[error("target dimension t = {got} must be at least 2")]
    TOutOfRange { got: String },
    #[error("tolerance must be positive, got {got}")]
    BadTolerance { got: String },
    #[error("no schedule constant below 2 can reach target product {target}")]
    ScheduleInfeasible { target: String },
    #[error("tensor factor needs 1 <= l < k, got l={l}, k={k}")]
    BadFactorTerm { l: u64, k: u64 },
    #[error("the amalgam base must be hyperfinite")]
    BaseNotHyperfinite,
    #[error("could not certify tolerance {tol} within {max_terms} terms; best interval [{lo}, {hi}]")]
    ConstructNonConvergence {
        tol: String,
        max_terms: usize,
        lo: String,
        hi: String,
    },
    #[error("hyperfinite reference '{name}': {message}")]
    Ref { name: String, message: String },
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// Group order: a positive integer or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Order {
    Finite(u64),
    Infinite,
}

impl Order {
    pub fn is_infinite(self) -> bool {
        matches!(self, Order::Infinite)
    }

    /// `1/|G|`, with the convention that infinite order inverts to zero.
    pub fn inverse(self) -> Rational {
        match self {
            Order::Finite(n) => Rational::new(BigInt::one(), BigInt::from(n)),
            Order::Infinite => Rational::zero(),
        }
    }
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Order::Finite(n) => write!(f, "{n}"),
            Order::Infinite => write!(f, "inf"),
        }
    }
}

/// Group expression. Sugar forms (trivial, Z, cyclic n, free-group n) are
/// desugared at construction, so structural equality is semantic equality of
/// the underlying normal forms.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum GroupExpr {
    Amenable(Order),
    PropertyT,
    Product(Box<GroupExpr>, Box<GroupExpr>),
    Amalgam {
        g1: Box<GroupExpr>,
        g2: Box<GroupExpr>,
        h: Box<GroupExpr>,
    },
}

impl GroupExpr {
    pub fn trivial() -> Self {
        GroupExpr::Amenable(Order::Finite(1))
    }

    pub fn z() -> Self {
        GroupExpr::Amenable(Order::Infinite)
    }

    pub fn cyclic(n: u64) -> Result<Self, DimError> {
        if n == 0 {
            return Err(DimError::InvalidOrder);
        }
        Ok(GroupExpr::Amenable(Order::Finite(n)))
    }

    /// Free group of rank `n >= 1` as a chain of free products over the
    /// trivial group.
    pub fn free_group(n: u64) -> Result<Self, DimError> {
        if n == 0 {
            return Err(DimError::InvalidFreeRank);
        }
        let mut e = Self::z();
        for _ in 1..n {
            e = Self::amalgam(e, Self::z(), Self::trivial())?;
        }
        Ok(e)
    }

    /// Genus-g surface group encoding: two rank-g free groups amalgamated
    /// over an infinite cyclic subgroup.
    pub fn surface(g: u64) -> Result<Self, DimError> {
        if g < 2 {
            return Err(DimError::InvalidOrder);
        }
        Self::amalgam(Self::free_group(g)?, Self::free_group(g)?, Self::z())
    }

    pub fn product(g1: GroupExpr, g2: GroupExpr) -> Result<Self, DimError> {
        if !g1.order().is_infinite() {
            return Err(DimError::ProductFiniteChild { which: 1 });
        }
        if !g2.order().is_infinite() {
            return Err(DimError::ProductFiniteChild { which: 2 });
        }
        Ok(GroupExpr::Product(Box::new(g1), Box::new(g2)))
    }

    pub fn amalgam(g1: GroupExpr, g2: GroupExpr, h: GroupExpr) -> Result<Self, DimError> {
        if h == g1 {
            return Err(DimError::ImproperAmalgam { which: 1 });
        }
        if h == g2 {
            return Err(DimError::ImproperAmalgam { which: 2 });
        }
        Ok(GroupExpr::Amalgam {
            g1: Box::new(g1),
            g2: Box::new(g2),
            h: Box::new(h),
        })
    }

    /// A proper amalgam or a product is infinite; otherwise the declared
    /// order stands.
    pub fn order(&self) -> Order {
        match self {
            GroupExpr::Amenable(o) => *o,
            GroupExpr::PropertyT | GroupExpr::Product(..) | GroupExpr::Amalgam { .. } => {
                Order::Infinite
            }
        }
    }
}

/// Everything the group calculus can say about one expression.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupInvariants {
    pub order: Order,
    pub beta0: Rational,
    pub beta1: Rational,
    pub delta_star: Rational,
    /// Microstates dimension; absent when the expression leaves the class
    /// the recursion covers.
    pub delta0: Option<Rational>,
    pub regular: bool,
    pub in_class_a: bool,
    pub rule_trace: Vec<&'static str>,
    pub assumptions: Vec<&'static str>,
}

struct GroupEval {
    order: Order,
    beta1: Rational,
    delta0: Option<Rational>,
    in_class_a: bool,
    trace: Vec<&'static str>,
    assumptions: Vec<&'static str>,
}

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) {
    if !v.contains(&x) {
        v.push(x);
    }
}

fn eval_group(g: &GroupExpr) -> Result<GroupEval, DimError> {
    match g {
        GroupExpr::Amenable(o) => {
            if matches!(o, Order::Finite(0)) {
                return Err(DimError::InvalidOrder);
            }
            Ok(GroupEval {
                order: *o,
                beta1: Rational::zero(),
                delta0: Some(rat_int(1) - o.inverse()),
                in_class_a: true,
                trace: vec!["amenable-betti-vanishing", "amenable-dimension"],
                assumptions: vec![],
            })
        }
        GroupExpr::PropertyT => Ok(GroupEval {
            order: Order::Infinite,
            beta1: Rational::zero(),
            delta0: Some(rat_int(1)),
            in_class_a: true,
            trace: vec!["property-t-betti-vanishing", "infinite-base-dimension"],
            assumptions: vec![
                "property-t factor: matrix-ultrapower embeddability of its group von Neumann algebra asserted, not verified",
            ],
        }),
        GroupExpr::Product(g1, g2) => {
            // Kunneth: both factors infinite kills beta1 of the product
            // regardless of the factors' own Betti numbers.
            for (which, c) in [(1usize, g1), (2, g2)] {
                if !c.order().is_infinite() {
                    return Err(DimError::ProductFiniteChild { which });
                }
            }
            Ok(GroupEval {
                order: Order::Infinite,
                beta1: Rational::zero(),
                delta0: Some(rat_int(1)),
                in_class_a: true,
                trace: vec!["kunneth-product-betti", "infinite-base-dimension"],
                assumptions: vec![
                    "product of infinite groups: matrix-ultrapower embeddability asserted, not verified",
                ],
            })
        }
        GroupExpr::Amalgam { g1, g2, h } => {
            if **h == **g1 {
                return Err(DimError::ImproperAmalgam { which: 1 });
            }
            if **h == **g2 {
                return Err(DimError::ImproperAmalgam { which: 2 });
            }
            let e1 = eval_group(g1)?;
            let e2 = eval_group(g2)?;
            let eh = eval_group(h)?;
            if !eh.beta1.is_zero() {
                return Err(DimError::BaseBettiNonzero {
                    beta1: format_rational(&eh.beta1),
                });
            }
            // Betti surgery over a base with vanishing beta1; the proper
            // amalgam itself is infinite, so its own order contributes 0.
            let beta1 = &e1.beta1 + &e2.beta1 + eh.order.inverse()
                - e1.order.inverse()
                - e2.order.inverse();
            let mut trace = vec!["amalgam-betti-surgery"];
            let mut assumptions =
                vec!["amalgam: the base embeds as a common subgroup of both factors (asserted)"];
            for e in [&e1, &e2, &eh] {
                for t in &e.trace {
                    push_unique(&mut trace, t);
                }
                for a in &e.assumptions {
                    push_unique(&mut assumptions, a);
                }
            }
            let base_amenable = matches!(**h, GroupExpr::Amenable(_));
            let in_class_a = base_amenable && e1.in_class_a && e2.in_class_a;
            let delta0 = if in_class_a {
                push_unique(&mut trace, "amalgam-dimension-additivity");
                let dh = rat_int(1) - eh.order.inverse();
                Some(e1.delta0.clone().unwrap() + e2.delta0.clone().unwrap() - dh)
            } else {
                None
            };
            Ok(GroupEval {
                order: Order::Infinite,
                beta1,
                delta0,
                in_class_a,
                trace,
                assumptions,
            })
        }
    }
}

pub fn group_invariants(g: &GroupExpr) -> Result<GroupInvariants, DimError> {
    let e = eval_group(g)?;
    let beta0 = e.order.inverse();
    let delta_star = &e.beta1 - &beta0 + rat_int(1);
    Ok(GroupInvariants {
        order: e.order,
        beta0,
        beta1: e.beta1,
        delta_star,
        delta0: e.delta0,
        regular: e.in_class_a,
        in_class_a: e.in_class_a,
        rule_trace: e.trace,
        assumptions: e.assumptions,
    })
}

pub fn betti(g: &GroupExpr) -> Result<(Rational, Rational), DimError> {
    let inv = group_invariants(g)?;
    Ok((inv.beta0, inv.beta1))
}

pub fn delta_star(g: &GroupExpr) -> Result<Rational, DimError> {
    Ok(group_invariants(g)?.delta_star)
}

pub fn delta0_group(g: &GroupExpr) -> Result<Rational, DimError> {
    let inv = group_invariants(g)?;
    inv.delta0.ok_or_else(|| DimError::NotClassA {
        hypothesis:
            "the microstates recursion needs every amalgam base amenable and every leaf amenable, \
             property-t, or a product of infinite groups; the derivation dimension is still available"
                .to_string(),
    })
}

impl GroupInvariants {
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "order": self.order.to_string(),
            "beta0": format_rational(&self.beta0),
            "beta1": format_rational(&self.beta1),
            "deltaStar": format_rational(&self.delta_star),
            "delta0": self.delta0.as_ref().map(format_rational),
            "regular": self.regular,
            "inClassA": self.in_class_a,
            "ruleTrace": self.rule_trace,
            "assumptions": self.assumptions,
        })
    }
}

/// Exact value or certified enclosure; `lo == hi` means exact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimValue {
    pub lo: Rational,
    pub hi: Rational,
}

impl DimValue {
    pub fn exact(r: Rational) -> Self {
        DimValue { hi: r.clone(), lo: r }
    }

    pub fn interval(lo: Rational, hi: Rational) -> Self {
        assert!(lo <= hi, "empty interval");
        DimValue { lo, hi }
    }

    pub fn is_exact(&self) -> bool {
        self.lo == self.hi
    }

    pub fn width(&self) -> Rational {
        &self.hi - &self.lo
    }

    pub fn contains(&self, r: &Rational) -> bool {
        &self.lo <= r && r <= &self.hi
    }

    pub fn add(&self, o: &DimValue) -> DimValue {
        DimValue {
            lo: &self.lo + &o.lo,
            hi: &self.hi + &o.hi,
        }
    }

    pub fn sub(&self, o: &DimValue) -> DimValue {
        DimValue {
            lo: &self.lo - &o.hi,
            hi: &self.hi - &o.lo,
        }
    }

    /// `shift + scale * self` for nonnegative `scale`.
    pub fn affine(&self, shift: &Rational, scale: &Rational) -> DimValue {
        assert!(!scale.is_negative());
        DimValue {
            lo: shift + scale * &self.lo,
            hi: shift + scale * &self.hi,
        }
    }

    /// Exact values print as fraction strings; genuine intervals as decimal
    /// endpoint strings rounded outward at the stated digit count.
    pub fn to_json(&self) -> serde_json::Value {
        if self.is_exact() {
            serde_json::Value::String(format_rational(&self.lo))
        } else {
            const DIGITS: u32 = 12;
            serde_json::json!({
                "lo": decimal_string(&self.lo, DIGITS, Round::Floor),
                "hi": decimal_string(&self.hi, DIGITS, Round::Ceil),
                "precision": DIGITS,
            })
        }
    }
}

/// Factor data for an infinite tensor product, materialized as a finite
/// prefix. With `gamma` present the sequence is conceptually infinite and
/// every factor `n` (1-based) promises defect at least `(1 - gamma 2^-n)^2`;
/// without `gamma` the prefix is the whole sequence and the value is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSequence {
    pub factors: Vec<FdAlgebra>,
    #[serde(with = "crate::rational::serde_ratio_opt", default)]
    pub gamma: Option<Rational>,
    #[serde(with = "crate::rational::serde_ratio")]
    pub tol: Rational,
    #[serde(rename = "maxTerms")]
    pub max_terms: usize,
}

struct SequenceSource<'a>(&'a TensorSequence);

impl FactorSource for SequenceSource<'_> {
    fn factor(&self, i: usize) -> Option<FdAlgebra> {
        self.0.factors.get(i).cloned()
    }
    fn is_finite(&self) -> bool {
        self.0.gamma.is_none()
    }
    fn schedule_gamma(&self) -> Option<Rational> {
        self.0.gamma.clone()
    }
}

impl TensorSequence {
    pub fn delta0(&self) -> Result<DimValue, DimError> {
        let (lo, hi) = delta0_tensor_sequence(&SequenceSource(self), &self.tol, self.max_terms)?;
        Ok(DimValue::interval(lo, hi))
    }
}

/// A hyperfinite algebra given either directly or as tensor-sequence data.
#[derive(Clone, Debug, PartialEq)]
pub enum HyperfiniteSpec {
    Finite(FdAlgebra),
    Sequence(TensorSequence),
}

impl HyperfiniteSpec {
    pub fn diffuse() -> Self {
        HyperfiniteSpec::Finite(
            FdAlgebra::new(vec![], rat_int(1)).expect("diffuse algebra is valid"),
        )
    }

    pub fn delta0(&self) -> Result<DimValue, DimError> {
        match self {
            HyperfiniteSpec::Finite(a) => Ok(DimValue::exact(a.delta0())),
            HyperfiniteSpec::Sequence(seq) => seq.delta0(),
        }
    }

    /// Accepts either a plain algebra document or a tensor-sequence document.
    pub fn from_json(s: &str) -> Result<Self, DimError> {
        if let Ok(a) = FdAlgebra::from_json(s) {
            return Ok(HyperfiniteSpec::Finite(a));
        }
        match serde_json::from_str::<TensorSequence>(s) {
            Ok(seq) => Ok(HyperfiniteSpec::Sequence(seq)),
            Err(e) => Err(DimError::Ref {
                name: String::new(),
                message: format!(
                    "neither an algebra document nor a tensor-sequence document: {e}"
                ),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            HyperfiniteSpec::Finite(a) => a.to_json(),
            HyperfiniteSpec::Sequence(seq) => {
                serde_json::to_string(seq).expect("sequence serialization")
            }
        }
    }
}

/// Von Neumann algebra expression.
#[derive(Clone, Debug, PartialEq)]
pub enum VnExpr {
    Hyperfinite(HyperfiniteSpec),
    AmalgamVn {
        m1: Box<VnExpr>,
        m2: Box<VnExpr>,
        base: HyperfiniteSpec,
    },
    Corner {
        inner: Box<VnExpr>,
        trace_p: Rational,
    },
    Group(GroupExpr),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VnReport {
    pub delta0: DimValue,
    pub regular: bool,
    pub rule_trace: Vec<String>,
    pub assumptions: Vec<String>,
}

impl VnReport {
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "delta0": self.delta0.to_json(),
            "regular": self.regular,
            "ruleTrace": self.rule_trace,
            "assumptions": self.assumptions,
        })
    }
}

pub fn delta0_vn(e: &VnExpr) -> Result<VnReport, DimError> {
    match e {
        VnExpr::Hyperfinite(spec) => {
            let mut trace = vec!["hyperfinite-dimension".to_string()];
            if matches!(spec, HyperfiniteSpec::Sequence(_)) {
                trace.push("tensor-tail-certification".to_string());
            }
            Ok(VnReport {
                delta0: spec.delta0()?,
                regular: true,
                rule_trace: trace,
                assumptions: vec![],
            })
        }
        VnExpr::Group(g) => {
            let inv = group_invariants(g)?;
            let Some(d) = inv.delta0 else {
                return Err(DimError::NotClassA {
                    hypothesis: "group node outside the computable class: every amalgam base must \
                                 be amenable and every leaf amenable, property-t, or a product of \
                                 infinite groups"
                        .to_string(),
                });
            };
            let mut trace = vec!["group-algebra-dimension".to_string()];
            trace.extend(inv.rule_trace.iter().map(|s| s.to_string()));
            Ok(VnReport {
                delta0: DimValue::exact(d),
                regular: inv.regular,
                rule_trace: trace,
                assumptions: inv.assumptions.iter().map(|s| s.to_string()).collect(),
            })
        }
        VnExpr::AmalgamVn { m1, m2, base } => {
            let r1 = delta0_vn(m1)?;
            if !r1.regular {
                return Err(DimError::NotRegular { side: "first" });
            }
            let r2 = delta0_vn(m2)?;
            if !r2.regular {
                return Err(DimError::NotRegular { side: "second" });
            }
            let db = base.delta0()?;
            let delta0 = r1.delta0.add(&r2.delta0).sub(&db);
            let mut trace = vec!["amalgam-regular-additivity".to_string()];
            if matches!(base, HyperfiniteSpec::Sequence(_)) {
                trace.push("tensor-tail-certification".to_string());
            }
            let mut assumptions = vec![
                "amalgam-vn: trace-preserving embeddings of the base into both factors (asserted)"
                    .to_string(),
            ];
            for r in [&r1, &r2] {
                for t in &r.rule_trace {
                    push_unique(&mut trace, t.clone());
                }
                for a in &r.assumptions {
                    push_unique(&mut assumptions, a.clone());
                }
            }
            Ok(VnReport {
                delta0,
                regular: true,
                rule_trace: trace,
                assumptions,
            })
        }
        VnExpr::Corner { inner, trace_p } => {
            if !trace_p.is_positive() || trace_p > &rat_int(1) {
                return Err(DimError::TracePOutOfRange {
                    got: format_rational(trace_p),
                });
            }
            let r = delta0_vn(inner)?;
            // 1 - 1/phi^2 + delta_inner / phi^2
            let inv_sq = rat_int(1) / (trace_p * trace_p);
            let shift = rat_int(1) - &inv_sq;
            let delta0 = r.delta0.affine(&shift, &inv_sq);
            let mut trace = vec!["corner-compression".to_string()];
            for t in &r.rule_trace {
                push_unique(&mut trace, t.clone());
            }
            let mut assumptions = vec![
                "corner: a projection of the stated trace lies in the base subalgebra (asserted)"
                    .to_string(),
            ];
            for a in &r.assumptions {
                push_unique(&mut assumptions, a.clone());
            }
            Ok(VnReport {
                delta0,
                // compression by a proper projection does not preserve the
                // regularity certificate; the full-trace corner is identity
                regular: r.regular && trace_p.is_one(),
                rule_trace: trace,
                assumptions,
            })
        }
    }
}

/// One tensor factor of the Popa-style sequence: scalars plus an `l x l`
/// block inside k-by-k matrices, carrying the restricted matrix trace.
pub fn popa_factor(l: u64, k: u64) -> Result<FdAlgebra, DimError> {
    if l == 0 || l >= k {
        return Err(DimError::BadFactorTerm { l, k });
    }
    Ok(FdAlgebra::atomic(vec![
        (
            1,
            Rational::new(BigInt::from(k - l), BigInt::from(k)),
        ),
        (
            l as usize,
            Rational::new(BigInt::from(l), BigInt::from(k)),
        ),
    ])?)
}

/// Defect of `popa_factor(l, k)`: `(1 - l/k)^2 + 1/k^2`.
fn popa_defect(l: u64, k: u64) -> Rational {
    let x = Rational::new(BigInt::from(l), BigInt::from(k));
    let one_minus = rat_int(1) - &x;
    let inv_k = Rational::new(BigInt::one(), BigInt::from(k));
    &one_minus * &one_minus + &inv_k * &inv_k
}

#[derive(Clone, Debug)]
pub struct BsConstruction {
    pub s: Rational,
    /// `(l(n), k(n))` pairs, n = 1, 2, ...
    pub terms: Vec<(u64, u64)>,
    /// Witness: every term satisfies `l(n)/k(n) < gamma 2^-n`.
    pub gamma: Rational,
    pub sequence: TensorSequence,
    pub interval: DimValue,
}

impl BsConstruction {
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "s": format_rational(&self.s),
            "terms": self.terms.iter().map(|(l, k)| serde_json::json!({
                "l": l,
                "k": k,
            })).collect::<Vec<_>>(),
            "gamma": format_rational(&self.gamma),
            "sequence": serde_json::to_value(&self.sequence).expect("sequence to value"),
            "delta0": self.interval.to_json(),
        })
    }
}

/// `2^-n` as an exact rational.
fn half_pow(n: usize) -> Rational {
    Rational::new(BigInt::one(), BigInt::one() << n)
}

/// Tail inflation factor after `n` consumed terms under schedule `gamma`,
/// matching the certification bound of the sequence evaluator.
fn tail_y(gamma: &Rational, n: usize) -> Option<Rational> {
    let cut = gamma * half_pow(n + 1);
    if cut >= rat_int(1) {
        return None;
    }
    Some(gamma * half_pow(n) * rat_int(2) / (rat_int(1) - cut))
}

/// Smallest integer `q >= 0` with `q^2 >= r` for positive rational `r`.
fn ceil_sqrt(r: &Rational) -> BigInt {
    // integer floor-sqrt of floor(r) as a starting point, then correct
    let mut q = (r.numer() / r.denom()).sqrt();
    while Rational::from_integer(&q * &q) < *r {
        q += 1;
    }
    while q.is_positive() {
        let qm = &q - BigInt::one();
        if Rational::from_integer(&qm * &qm) >= *r {
            q = qm;
        } else {
            break;
        }
    }
    q
}

/// Largest integer `q` with `q^2 <= r`.
fn floor_sqrt(r: &Rational) -> BigInt {
    let q = ceil_sqrt(r);
    if Rational::from_integer(&q * &q) == *r {
        q
    } else {
        q - BigInt::one()
    }
}

fn feasible_gamma(target: &Rational) -> Option<Rational> {
    // Candidates approach 2 from below; the per-step sizes k_n = 2^n * C
    // shave an effective 3/C off gamma, so feasibility is tested with that
    // margin. 80 exact terms of the floor product are plenty: later factors
    // differ from 1 by under 2^-78.
    let mut candidates = vec![rat(1, 4), rat(1, 2), rat(1, 1)];
    for j in 1..=40 {
        candidates.push(rat_int(2) - half_pow(j));
    }
    for gamma in candidates {
        let c = step_scale(&gamma);
        let eff = &gamma - rat(3, 1) / Rational::from_integer(BigInt::from(c));
        if !eff.is_positive() {
            continue;
        }
        let mut prod = rat_int(1);
        for n in 1..=80usize {
            let f = rat_int(1) - &eff * half_pow(n);
            if !f.is_positive() {
                prod = Rational::zero();
                break;
            }
            prod *= &f * &f;
            if &prod <= target {
                break;
            }
        }
        if &prod <= target {
            return Some(gamma);
        }
    }
    None
}

/// Base size constant: k_n = 2^n * C keeps the schedule cap respectable and
/// the per-step overshoot inside the certified tail allowance.
fn step_scale(gamma: &Rational) -> u64 {
    let inv = (rat_int(1) / gamma).ceil().to_integer();
    8 * inv.to_u64().unwrap_or(1).max(1)
}

/// Builds the tensor-factor sequence realizing target defect product
/// `s - 1`: greedy descent keeping the partial product at or above target,
/// stopping when the tail-certified interval is inside tolerance and
/// contains `2 - s`. An exact rational hit truncates the sequence and the
/// interval degenerates to a point.
pub fn construct_bs(
    s: &Rational,
    tol: &Rational,
    max_terms: usize,
) -> Result<BsConstruction, DimError> {
    let one = rat_int(1);
    let two = rat_int(2);
    if s <= &one || s >= &two {
        return Err(DimError::SOutOfRange {
            got: format_rational(s),
        });
    }
    if !tol.is_positive() {
        return Err(DimError::BadTolerance {
            got: format_rational(tol),
        });
    }
    let target = s - &one;
    let gamma = feasible_gamma(&target).ok_or_else(|| DimError::ScheduleInfeasible {
        target: format_rational(&target),
    })?;
    let scale = step_scale(&gamma);
    let mut terms: Vec<(u64, u64)> = Vec::new();
    let mut factors: Vec<FdAlgebra> = Vec::new();
    let mut product = one.clone();
    let mut best: Option<(Rational, Rational)> = None;
    for n in 1..=max_terms {
        let remaining = &target / &product;
        let cap = &gamma * half_pow(n);
        let (l, k) = choose_term(&remaining, &cap, scale, n);
        let d = popa_defect(l, k);
        debug_assert!(d >= remaining && d < one);
        product *= &d;
        factors.push(popa_factor(l, k)?);
        terms.push((l, k));
        if product == target {
            // exact hit: truncate, the remaining factors are all trivial
            let sequence = TensorSequence {
                factors,
                gamma: None,
                tol: tol.clone(),
                max_terms: terms.len(),
            };
            let interval = sequence.delta0()?;
            let witness = terms
                .iter()
                .enumerate()
                .map(|(i, (l, k))| {
                    Rational::new(BigInt::from(*l), BigInt::from(*k)) / half_pow(i + 1)
                })
                .max()
                .expect("at least one term")
                * rat(9, 8);
            return Ok(BsConstruction {
                s: s.clone(),
                terms,
                gamma: witness,
                sequence,
                interval,
            });
        }
        // certify: width and containment of 2 - s, both exact checks
        if let Some(y) = tail_y(&gamma, n) {
            let width = &product * y.clone().min(one.clone());
            let contains = &product * (&one - &y) <= target;
            best = Some((&one - &product, &one - &product + &width));
            if width <= *tol && contains {
                let sequence = TensorSequence {
                    factors,
                    gamma: Some(gamma.clone()),
                    tol: tol.clone(),
                    max_terms: terms.len(),
                };
                let interval = sequence.delta0()?;
                return Ok(BsConstruction {
                    s: s.clone(),
                    terms,
                    gamma,
                    sequence,
                    interval,
                });
            }
        }
    }
    let (lo, hi) = best.unwrap_or((Rational::zero(), one));
    Err(DimError::ConstructNonConvergence {
        tol: format_rational(tol),
        max_terms,
        lo: format_rational(&lo),
        hi: format_rational(&hi),
    })
}

/// Picks `(l, k)` for step `n`: an exact defect hit if a small one exists,
/// otherwise the largest schedule-respecting descent toward `remaining`.
fn choose_term(remaining: &Rational, cap: &Rational, scale: u64, n: usize) -> (u64, u64) {
    let one = rat_int(1);
    // Exact hit: ((k-l)^2 + 1) / k^2 = remaining, searched over a bounded
    // k-window. A hit ends the construction with a finite product, so the
    // schedule cap does not apply here; the witness gamma is recomputed
    // from the realized terms afterwards.
    if remaining < &one {
        let k_lo = ceil_sqrt(&(&one / remaining)).to_u64().unwrap_or(2).max(2);
        for k in k_lo..=k_lo.saturating_add(4096) {
            let k_r = Rational::from_integer(BigInt::from(k));
            let a_sq = remaining * &k_r * &k_r - &one;
            if a_sq.is_negative() || !a_sq.denom().is_one() {
                continue;
            }
            let a = floor_sqrt(&a_sq);
            if Rational::from_integer(&a * &a) != a_sq {
                continue;
            }
            let Some(a) = a.to_u64() else { continue };
            if a == 0 || a >= k {
                continue;
            }
            return (k - a, k);
        }
    }
    // Greedy step: k grows geometrically; aim l/k at 1 - sqrt(remaining)
    // but never at or past the schedule cap.
    let mut k = (1u64 << n.min(50)).saturating_mul(scale).max(4);
    // late steps with remaining near 1 need k large enough for l >= 1
    loop {
        let k_r = Rational::from_integer(BigInt::from(k));
        let x_star = &one - sqrt_lower_bound(remaining);
        let l_target = (&x_star * &k_r).floor().to_integer().to_u64().unwrap_or(0);
        let l_cap = {
            // largest l with l/k strictly below cap
            let raw = (cap * &k_r).ceil().to_integer() - BigInt::one();
            raw.to_u64().unwrap_or(0)
        };
        let l = l_target.min(l_cap).min(k - 1);
        if l >= 1 {
            let d = popa_defect(l, k);
            if &d >= remaining && d < one {
                return (l, k);
            }
        }
        k = k.saturating_mul(2);
        assert!(k < u64::MAX / 4, "step size overflow before certification");
    }
}

/// A rational lower bound on sqrt(r) for r in (0, 1], tight to ~1e-28, so
/// that aiming at `1 - sqrt(remaining)` never overshoots below the target.
fn sqrt_lower_bound(r: &Rational) -> Rational {
    const SHIFT: usize = 96;
    let scaled = r * Rational::from_integer(BigInt::one() << (2 * SHIFT));
    let root = scaled.floor().to_integer().sqrt();
    Rational::new(root, BigInt::one() << SHIFT)
}

#[derive(Clone, Debug)]
pub struct FtConstruction {
    pub t: Rational,
    pub trace_p: Rational,
    pub s: Rational,
    pub corner: VnReport,
}

impl FtConstruction {
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "t": format_rational(&self.t),
            "traceP": format_rational(&self.trace_p),
            "s": format_rational(&self.s),
            "corner": self.corner.to_report(),
        })
    }
}

/// Realizes target dimension `t >= 2` as a corner: picks the largest
/// unit-fraction trace `phi = 1/q` with `phi <= (9/10)/sqrt(t-1)` (so
/// `phi^2` sits strictly inside `(0, 1/(t-1))` with a tenth of margin),
/// sets `s = 1 + (t-1) phi^2`, and evaluates the corner of the two-factor
/// amalgam over a base of dimension defect `s - 1`. The corner value equals
/// `t` identically.
pub fn construct_ft(t: &Rational) -> Result<FtConstruction, DimError> {
    let one = rat_int(1);
    if t < &rat_int(2) {
        return Err(DimError::TOutOfRange {
            got: format_rational(t),
        });
    }
    // smallest q with q^2 >= 100 (t-1) / 81
    let bound = rat(100, 81) * (t - &one);
    let q = ceil_sqrt(&bound);
    let phi = Rational::new(BigInt::one(), q);
    let s = &one + (t - &one) * &phi * &phi;
    debug_assert!(s > one && s < rat_int(2));
    // delta0 of the amalgam of two diffuse hyperfinite factors over a base
    // with delta0 = 2 - s is exactly s; the corner then restores t.
    let inner = DimValue::exact(s.clone());
    let inv_sq = rat_int(1) / (&phi * &phi);
    let shift = rat_int(1) - &inv_sq;
    let corner_value = inner.affine(&shift, &inv_sq);
    debug_assert_eq!(corner_value.lo, *t);
    let corner = VnReport {
        delta0: corner_value,
        regular: phi.is_one(),
        rule_trace: vec![
            "corner-compression".to_string(),
            "amalgam-regular-additivity".to_string(),
            "interpolated-factor-target".to_string(),
        ],
        assumptions: vec![
            "corner: a projection of the stated trace lies in the base subalgebra (asserted)"
                .to_string(),
        ],
    };
    Ok(FtConstruction {
        t: t.clone(),
        trace_p: phi,
        s,
        corner,
    })
}

//! Finite-dimensional tracial algebras `D = C^{w_0-diffuse} (+) M_{m_1} (+) ... (+) M_{m_L}`,
//! their elements, matrix representations, and the exact dimension
//! arithmetic attached to them.
//!
//! A representation places block `l` into `M_n` as `a_l (x) 1_{c_l}` on a
//! contiguous index range, so the commutant of the image is
//! `(+)_l 1_{m_l} (x) M_{c_l}` and the trace-preserving conditional
//! expectation onto the image is a normalized partial trace over each
//! multiplicity space.

use crate::linalg::{self, CMatrix, C64};
use crate::rational::{format_rational, rat_int, Rational};
use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("block {index} has dimension 0")]
    ZeroBlockDim { index: usize },
    #[error("block {index} has non-positive weight {weight}")]
    NonPositiveWeight { index: usize, weight: String },
    #[error("diffuse weight {0} is negative")]
    NegativeDiffuse(String),
    #[error("weights sum to {got}, expected 1")]
    WeightSum { got: String },
    #[error("algebra has a diffuse part; a finite-dimensional representation needs w0 = 0")]
    DiffusePart,
    #[error("target dimension {target} cannot fit one copy of every block (minimum {min})")]
    TargetTooSmall { target: usize, min: usize },
    #[error("element has {got} blocks, algebra has {want}")]
    BlockCountMismatch { got: usize, want: usize },
    #[error("element block {index} is {got_rows}x{got_cols}, algebra block is {want}x{want}")]
    BlockShapeMismatch {
        index: usize,
        got_rows: usize,
        got_cols: usize,
        want: usize,
    },
    #[error("matrix is {got_rows}x{got_cols}, representation acts on dimension {want}")]
    MatrixShapeMismatch {
        got_rows: usize,
        got_cols: usize,
        want: usize,
    },
    #[error("defect of factor {index} is {defect}, outside (0, 1]")]
    FactorDefectOutOfRange { index: usize, defect: String },
    #[error(
        "factor {index} has defect {defect} below its schedule floor {floor}; tail certification is invalid"
    )]
    ScheduleViolated {
        index: usize,
        defect: String,
        floor: String,
    },
    #[error("no tail bound available: infinite factor sequence without a schedule constant")]
    NoTailBound,
    #[error(
        "could not certify width {tol} within {max_terms} terms; best interval [{lo}, {hi}]"
    )]
    NonConvergence {
        tol: String,
        max_terms: usize,
        lo: String,
        hi: String,
    },
    #[error("invalid algebra JSON: {0}")]
    BadJson(String),
}

/// One matrix block `M_m` with central trace weight `w`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub dim: usize,
    #[serde(with = "crate::rational::serde_ratio", rename = "weight")]
    pub weight: Rational,
}

/// Finite-dimensional tracial algebra, with an optional diffuse summand
/// carrying weight `diffuse`. Weights are exact rationals summing to one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FdAlgebra {
    blocks: Vec<Block>,
    diffuse: Rational,
}

impl FdAlgebra {
    pub fn new(blocks: Vec<(usize, Rational)>, diffuse: Rational) -> Result<Self, AlgebraError> {
        let blocks: Vec<Block> = blocks
            .into_iter()
            .map(|(dim, weight)| Block { dim, weight })
            .collect();
        let alg = FdAlgebra { blocks, diffuse };
        alg.validate()?;
        Ok(alg)
    }

    /// Atomic algebra without diffuse part.
    pub fn atomic(blocks: Vec<(usize, Rational)>) -> Result<Self, AlgebraError> {
        Self::new(blocks, Rational::zero())
    }

    /// The scalars: a single one-dimensional block of full weight.
    pub fn scalar() -> Self {
        FdAlgebra {
            blocks: vec![Block {
                dim: 1,
                weight: rat_int(1),
            }],
            diffuse: Rational::zero(),
        }
    }

    fn validate(&self) -> Result<(), AlgebraError> {
        let mut sum = self.diffuse.clone();
        if self.diffuse.is_negative() {
            return Err(AlgebraError::NegativeDiffuse(format_rational(&self.diffuse)));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.dim == 0 {
                return Err(AlgebraError::ZeroBlockDim { index: i });
            }
            if !b.weight.is_positive() {
                return Err(AlgebraError::NonPositiveWeight {
                    index: i,
                    weight: format_rational(&b.weight),
                });
            }
            sum += &b.weight;
        }
        if !sum.is_one() {
            return Err(AlgebraError::WeightSum {
                got: format_rational(&sum),
            });
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn diffuse_weight(&self) -> &Rational {
        &self.diffuse
    }

    pub fn is_scalar(&self) -> bool {
        self.diffuse.is_zero() && self.blocks.len() == 1 && self.blocks[0].dim == 1
    }

    /// Sum of `(w_l / m_l)^2` over the atomic blocks. The diffuse part
    /// contributes nothing.
    pub fn defect(&self) -> Rational {
        let mut d = Rational::zero();
        for b in &self.blocks {
            let ratio = &b.weight / Rational::from_integer(BigInt::from(b.dim));
            d += &ratio * &ratio;
        }
        d
    }

    /// Free entropy dimension `1 - defect`.
    pub fn delta0(&self) -> Rational {
        rat_int(1) - self.defect()
    }

    /// Tensor product: blocks are all pairs `(m_l * m'_j, w_l * w'_j)`;
    /// diffuse mass absorbs everything tensored against it.
    pub fn tensor(&self, other: &FdAlgebra) -> FdAlgebra {
        let mut blocks = Vec::with_capacity(self.blocks.len() * other.blocks.len());
        for a in &self.blocks {
            for b in &other.blocks {
                blocks.push(Block {
                    dim: a.dim * b.dim,
                    weight: &a.weight * &b.weight,
                });
            }
        }
        let diffuse = rat_int(1)
            - blocks
                .iter()
                .fold(Rational::zero(), |acc, b| acc + &b.weight);
        FdAlgebra { blocks, diffuse }
    }

    /// Normalized trace of a compatible element.
    pub fn trace(&self, d: &DElement) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (b, m) in self.blocks.iter().zip(&d.blocks) {
            let w = crate::rational::to_f64(&b.weight) / b.dim as f64;
            acc += m.trace() * C64::new(w, 0.0);
        }
        acc
    }

    pub fn zero_element(&self) -> DElement {
        DElement {
            blocks: self.blocks.iter().map(|b| linalg::zeros(b.dim)).collect(),
        }
    }

    pub fn unit_element(&self) -> DElement {
        DElement {
            blocks: self
                .blocks
                .iter()
                .map(|b| linalg::identity(b.dim))
                .collect(),
        }
    }

    pub fn check_element(&self, d: &DElement) -> Result<(), AlgebraError> {
        if d.blocks.len() != self.blocks.len() {
            return Err(AlgebraError::BlockCountMismatch {
                got: d.blocks.len(),
                want: self.blocks.len(),
            });
        }
        for (i, (b, m)) in self.blocks.iter().zip(&d.blocks).enumerate() {
            if m.nrows() != b.dim || m.ncols() != b.dim {
                return Err(AlgebraError::BlockShapeMismatch {
                    index: i,
                    got_rows: m.nrows(),
                    got_cols: m.ncols(),
                    want: b.dim,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = AlgebraJson {
            blocks: self.blocks.clone(),
            diffuse: self.diffuse.clone(),
        };
        serde_json::to_string(&doc).expect("algebra serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, AlgebraError> {
        let doc: AlgebraJson =
            serde_json::from_str(s).map_err(|e| AlgebraError::BadJson(e.to_string()))?;
        let alg = FdAlgebra {
            blocks: doc.blocks,
            diffuse: doc.diffuse,
        };
        alg.validate()?;
        Ok(alg)
    }
}

#[derive(Serialize, Deserialize)]
struct AlgebraJson {
    blocks: Vec<Block>,
    #[serde(with = "crate::rational::serde_ratio")]
    diffuse: Rational,
}

impl Serialize for FdAlgebra {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        AlgebraJson {
            blocks: self.blocks.clone(),
            diffuse: self.diffuse.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FdAlgebra {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = AlgebraJson::deserialize(d)?;
        let alg = FdAlgebra {
            blocks: doc.blocks,
            diffuse: doc.diffuse,
        };
        alg.validate().map_err(D::Error::custom)?;
        Ok(alg)
    }
}

/// Element of an atomic `FdAlgebra`: one complex matrix per block.
#[derive(Clone, Debug, PartialEq)]
pub struct DElement {
    pub blocks: Vec<CMatrix>,
}

impl DElement {
    pub fn adjoint(&self) -> DElement {
        DElement {
            blocks: self.blocks.iter().map(|b| b.adjoint()).collect(),
        }
    }

    pub fn mul(&self, other: &DElement) -> DElement {
        DElement {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn add(&self, other: &DElement) -> DElement {
        DElement {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &DElement) -> DElement {
        DElement {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, z: C64) -> DElement {
        DElement {
            blocks: self.blocks.iter().map(|b| b * z).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.iter().all(|z| z.re == 0.0 && z.im == 0.0))
    }

    /// Operator norm: the largest block spectral norm.
    pub fn operator_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(linalg::spectral_norm_svd)
            .fold(0.0, f64::max)
    }

    /// Largest entry magnitude; cheap conservative check for exact zeros.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// The scalar `z` such that `self = z * 1`, if the element is a scalar
    /// multiple of the unit (within `tol` per entry).
    pub fn as_scalar(&self, tol: f64) -> Option<C64> {
        let z = *self.blocks.first()?.get((0, 0))?;
        for b in &self.blocks {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    let want = if i == j { z } else { C64::new(0.0, 0.0) };
                    if (b[(i, j)] - want).norm() > tol {
                        return None;
                    }
                }
            }
        }
        Some(z)
    }
}

/// A finite-dimensional representation of an atomic `FdAlgebra`: block `l`
/// acts with multiplicity `c_l`, for a total dimension `n = sum m_l c_l`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Representation {
    pub algebra: FdAlgebra,
    pub multiplicities: Vec<usize>,
    #[serde(skip, default)]
    offsets: std::sync::OnceLock<Vec<usize>>,
}

impl PartialEq for Representation {
    fn eq(&self, other: &Self) -> bool {
        self.algebra == other.algebra && self.multiplicities == other.multiplicities
    }
}

impl Eq for Representation {}

impl Representation {
    pub fn new(algebra: FdAlgebra, multiplicities: Vec<usize>) -> Result<Self, AlgebraError> {
        if !algebra.diffuse_weight().is_zero() {
            return Err(AlgebraError::DiffusePart);
        }
        if multiplicities.len() != algebra.blocks().len() {
            return Err(AlgebraError::BlockCountMismatch {
                got: multiplicities.len(),
                want: algebra.blocks().len(),
            });
        }
        Ok(Representation {
            algebra,
            multiplicities,
            offsets: std::sync::OnceLock::new(),
        })
    }

    pub fn total_dim(&self) -> usize {
        self.algebra
            .blocks()
            .iter()
            .zip(&self.multiplicities)
            .map(|(b, c)| b.dim * c)
            .sum()
    }

    pub(crate) fn block_offsets(&self) -> &[usize] {
        self.offsets.get_or_init(|| {
            let mut offs = Vec::with_capacity(self.algebra.blocks().len());
            let mut acc = 0usize;
            for (b, c) in self.algebra.blocks().iter().zip(&self.multiplicities) {
                offs.push(acc);
                acc += b.dim * c;
            }
            offs
        })
    }

    /// Row index of matrix unit `(i, s)` in block `l`: multiplicity index
    /// `s` varies fastest.
    pub(crate) fn index(&self, l: usize, i: usize, s: usize) -> usize {
        self.block_offsets()[l] + i * self.multiplicities[l] + s
    }

    /// Trace weight the representation actually realizes for block `l`.
    pub fn realized_weight(&self, l: usize) -> Rational {
        let n = self.total_dim();
        Rational::new(
            BigInt::from(self.algebra.blocks()[l].dim * self.multiplicities[l]),
            BigInt::from(n),
        )
    }

    /// Largest deviation `|m_l c_l / n - w_l|` across blocks.
    pub fn trace_deviation(&self) -> Rational {
        self.algebra
            .blocks()
            .iter()
            .enumerate()
            .map(|(l, b)| (self.realized_weight(l) - &b.weight).abs())
            .max()
            .unwrap_or_else(Rational::zero)
    }

    /// Embeds an element as `(+)_l a_l (x) 1_{c_l}`.
    pub fn embed(&self, d: &DElement) -> Result<CMatrix, AlgebraError> {
        self.algebra.check_element(d)?;
        let n = self.total_dim();
        let mut out = linalg::zeros(n);
        for (l, b) in self.algebra.blocks().iter().enumerate() {
            let c = self.multiplicities[l];
            let block = &d.blocks[l];
            for i in 0..b.dim {
                for j in 0..b.dim {
                    let z = block[(i, j)];
                    if z.re == 0.0 && z.im == 0.0 {
                        continue;
                    }
                    for s in 0..c {
                        out[(self.index(l, i, s), self.index(l, j, s))] = z;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Trace-preserving conditional expectation onto the embedded algebra:
    /// per block, the normalized partial trace over the multiplicity space.
    pub fn cond_expect(&self, x: &CMatrix) -> Result<DElement, AlgebraError> {
        let n = self.total_dim();
        if x.nrows() != n || x.ncols() != n {
            return Err(AlgebraError::MatrixShapeMismatch {
                got_rows: x.nrows(),
                got_cols: x.ncols(),
                want: n,
            });
        }
        let mut blocks = Vec::with_capacity(self.algebra.blocks().len());
        for (l, b) in self.algebra.blocks().iter().enumerate() {
            let c = self.multiplicities[l];
            let mut avg = linalg::zeros(b.dim);
            for i in 0..b.dim {
                for j in 0..b.dim {
                    let mut acc = C64::new(0.0, 0.0);
                    for s in 0..c {
                        acc += x[(self.index(l, i, s), self.index(l, j, s))];
                    }
                    avg[(i, j)] = acc / C64::new(c as f64, 0.0);
                }
            }
            blocks.push(avg);
        }
        Ok(DElement { blocks })
    }

    /// `E_k` of `prefix * embed(tail)` without forming the product: only the
    /// diagonal-block entries of the product are contracted, which costs
    /// `O(n * sum m_l^2 c_l)` instead of a full matrix multiply.
    pub fn cond_expect_of_product(
        &self,
        prefix: &CMatrix,
        tail: &CMatrix,
    ) -> Result<DElement, AlgebraError> {
        let n = self.total_dim();
        if prefix.ncols() != n || tail.nrows() != n {
            return Err(AlgebraError::MatrixShapeMismatch {
                got_rows: prefix.nrows(),
                got_cols: tail.ncols(),
                want: n,
            });
        }
        let mut blocks = Vec::with_capacity(self.algebra.blocks().len());
        for (l, b) in self.algebra.blocks().iter().enumerate() {
            let c = self.multiplicities[l];
            let mut avg = linalg::zeros(b.dim);
            for i in 0..b.dim {
                for j in 0..b.dim {
                    let mut acc = C64::new(0.0, 0.0);
                    for s in 0..c {
                        let row = self.index(l, i, s);
                        let col = self.index(l, j, s);
                        for t in 0..n {
                            acc += prefix[(row, t)] * tail[(t, col)];
                        }
                    }
                    avg[(i, j)] = acc / C64::new(c as f64, 0.0);
                }
            }
            blocks.push(avg);
        }
        Ok(DElement { blocks })
    }
}

/// Chooses multiplicities `c_l >= 1` with `n = sum m_l c_l <= target_dim`
/// minimizing the worst trace deviation `max_l |m_l c_l / n - w_l|`; ties
/// break toward larger `n`, then lexicographically smallest `c`.
pub fn make_representation(
    algebra: &FdAlgebra,
    target_dim: usize,
) -> Result<Representation, AlgebraError> {
    if !algebra.diffuse_weight().is_zero() {
        return Err(AlgebraError::DiffusePart);
    }
    let dims: Vec<usize> = algebra.blocks().iter().map(|b| b.dim).collect();
    let min_n: usize = dims.iter().sum();
    if target_dim < min_n {
        return Err(AlgebraError::TargetTooSmall {
            target: target_dim,
            min: min_n,
        });
    }
    let mut best: Option<(Rational, usize, Vec<usize>)> = None;
    for n in min_n..=target_dim {
        let Some((dev, c)) = best_multiplicities_for(algebra, &dims, n) else {
            continue;
        };
        let better = match &best {
            None => true,
            // Larger n wins ties because trace fidelity at fixed deviation
            // improves the asymptotics every caller is after.
            Some((bd, bn, bc)) => {
                dev < *bd || (dev == *bd && (n > *bn || (n == *bn && c < *bc)))
            }
        };
        if better {
            best = Some((dev, n, c));
        }
    }
    let (_, _, c) = best.expect("n = min_n is always feasible");
    Representation::new(algebra.clone(), c)
}

/// Exact min-max apportionment at fixed `n` via binary search over candidate
/// deviations with a reachability table; returns the lexicographically
/// smallest optimum.
fn best_multiplicities_for(
    algebra: &FdAlgebra,
    dims: &[usize],
    n: usize,
) -> Option<(Rational, Vec<usize>)> {
    let nl = dims.len();
    let n_big = BigInt::from(n);
    // Target unnormalized traces t_l = w_l * n.
    let targets: Vec<Rational> = algebra
        .blocks()
        .iter()
        .map(|b| &b.weight * Rational::from_integer(n_big.clone()))
        .collect();
    // Candidate deviations |m_l c - t_l| / n over the feasible c range.
    let mut candidates: Vec<Rational> = Vec::new();
    for l in 0..nl {
        let others: usize = dims
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != l)
            .map(|(_, m)| m)
            .sum();
        if others + dims[l] > n {
            return None;
        }
        let c_max = (n - others) / dims[l];
        for c in 1..=c_max {
            let dev = (Rational::from_integer(BigInt::from(dims[l] * c)) - &targets[l]).abs()
                / Rational::from_integer(n_big.clone());
            candidates.push(dev);
        }
    }
    candidates.sort();
    candidates.dedup();
    let feasible = |delta: &Rational| -> Option<Vec<usize>> {
        let bound = delta * Rational::from_integer(n_big.clone());
        let mut lo = Vec::with_capacity(nl);
        let mut hi = Vec::with_capacity(nl);
        for l in 0..nl {
            let m = BigInt::from(dims[l]);
            // c in [ (t_l - bound)/m , (t_l + bound)/m ] intersect [1, ..]
            let lo_r = (&targets[l] - &bound) / Rational::from_integer(m.clone());
            let hi_r = (&targets[l] + &bound) / Rational::from_integer(m);
            let lo_c = lo_r.ceil().to_integer().to_usize().unwrap_or(0).max(1);
            let hi_big = hi_r.floor().to_integer();
            if hi_big.sign() == num_bigint::Sign::Minus {
                return None;
            }
            let hi_c = hi_big.to_usize()?;
            if hi_c < lo_c {
                return None;
            }
            lo.push(lo_c);
            hi.push(hi_c);
        }
        // reach[l][s]: can blocks l.. fill exactly s.
        let mut reach = vec![vec![false; n + 1]; nl + 1];
        reach[nl][0] = true;
        for l in (0..nl).rev() {
            for s in 0..=n {
                for c in lo[l]..=hi[l] {
                    let need = dims[l] * c;
                    if need > s {
                        break;
                    }
                    if reach[l + 1][s - need] {
                        reach[l][s] = true;
                        break;
                    }
                }
            }
        }
        if !reach[0][n] {
            return None;
        }
        let mut c = Vec::with_capacity(nl);
        let mut rem = n;
        for l in 0..nl {
            for cand in lo[l]..=hi[l] {
                let need = dims[l] * cand;
                if need <= rem && reach[l + 1][rem - need] {
                    c.push(cand);
                    rem -= need;
                    break;
                }
            }
        }
        (c.len() == nl).then_some(c)
    };
    // Binary search over sorted candidate deviations for the least feasible one.
    let mut lo_idx = 0usize;
    let mut hi_idx = candidates.len().checked_sub(1)?;
    if feasible(&candidates[hi_idx]).is_none() {
        return None;
    }
    while lo_idx < hi_idx {
        let mid = (lo_idx + hi_idx) / 2;
        if feasible(&candidates[mid]).is_some() {
            hi_idx = mid;
        } else {
            lo_idx = mid + 1;
        }
    }
    let delta = candidates[lo_idx].clone();
    let c = feasible(&delta)?;
    Some((delta, c))
}

/// Lazy factor sequence for certified infinite tensor products.
///
/// `factor(i)` returns the i-th factor (0-based) or `None` past the end of
/// the materialized prefix. A finite sequence certifies its tail exactly; an
/// infinite one needs `schedule_gamma`, the constant `gamma` promising every
/// factor `i` (0-based) has defect at least `(1 - gamma * 2^-(i+1))^2`.
pub trait FactorSource {
    fn factor(&self, i: usize) -> Option<FdAlgebra>;
    fn is_finite(&self) -> bool;
    fn schedule_gamma(&self) -> Option<Rational>;
}

/// A plain finite list of factors.
pub struct FiniteFactors(pub Vec<FdAlgebra>);

impl FactorSource for FiniteFactors {
    fn factor(&self, i: usize) -> Option<FdAlgebra> {
        self.0.get(i).cloned()
    }
    fn is_finite(&self) -> bool {
        true
    }
    fn schedule_gamma(&self) -> Option<Rational> {
        None
    }
}

/// Certified enclosure of the free entropy dimension of an infinite tensor
/// product: `1 - prod defect_i` bracketed to width at most `tol`.
///
/// The tail after `N` consumed factors multiplies the defect product by
/// something in `[T_N, 1]` with
/// `T_N >= 1 - y_N`, `y_N = 2 gamma 2^-N / (1 - gamma 2^-(N+1))`,
/// which follows from the schedule floor and `1 - e^-x <= x`; the bound is
/// evaluated in exact rational arithmetic, so no rounding slack is needed.
pub fn delta0_tensor_sequence(
    factors: &dyn FactorSource,
    tol: &Rational,
    max_terms: usize,
) -> Result<(Rational, Rational), AlgebraError> {
    let one = rat_int(1);
    let mut product = one.clone();
    let gamma = factors.schedule_gamma();
    if !factors.is_finite() && gamma.is_none() {
        return Err(AlgebraError::NoTailBound);
    }
    let mut consumed = 0usize;
    let mut best: Option<(Rational, Rational)> = None;
    loop {
        if let Some((lo, hi)) = tail_interval(&product, consumed, factors, &gamma) {
            if &hi - &lo <= *tol {
                return Ok((lo, hi));
            }
            best = Some((lo, hi));
        }
        if consumed >= max_terms {
            let (lo, hi) = best.unwrap_or_else(|| (rat_int(0), one.clone()));
            return Err(AlgebraError::NonConvergence {
                tol: format_rational(tol),
                max_terms,
                lo: format_rational(&lo),
                hi: format_rational(&hi),
            });
        }
        match factors.factor(consumed) {
            None => {
                // Materialized prefix exhausted; the loop above already
                // failed to certify, so report non-convergence.
                let (lo, hi) = best.unwrap_or_else(|| (rat_int(0), one.clone()));
                return Err(AlgebraError::NonConvergence {
                    tol: format_rational(tol),
                    max_terms,
                    lo: format_rational(&lo),
                    hi: format_rational(&hi),
                });
            }
            Some(alg) => {
                let defect = alg.defect();
                if !defect.is_positive() || defect > one {
                    return Err(AlgebraError::FactorDefectOutOfRange {
                        index: consumed,
                        defect: format_rational(&defect),
                    });
                }
                if let Some(g) = &gamma {
                    let floor_base = &one - g * crate::rational::rat(1, 2).pow((consumed + 1) as i32);
                    let floor = if floor_base.is_positive() {
                        &floor_base * &floor_base
                    } else {
                        Rational::zero()
                    };
                    if defect < floor {
                        return Err(AlgebraError::ScheduleViolated {
                            index: consumed,
                            defect: format_rational(&defect),
                            floor: format_rational(&floor),
                        });
                    }
                }
                product *= defect;
                consumed += 1;
            }
        }
    }
}

fn tail_interval(
    product: &Rational,
    consumed: usize,
    factors: &dyn FactorSource,
    gamma: &Option<Rational>,
) -> Option<(Rational, Rational)> {
    let one = rat_int(1);
    let finished = factors.is_finite() && factors.factor(consumed).is_none();
    if finished {
        let v = &one - product;
        return Some((v.clone(), v));
    }
    let g = gamma.as_ref()?;
    // y = 2 g 2^-N / (1 - g 2^-(N+1)), valid once g 2^-(N+1) < 1.
    let half = crate::rational::rat(1, 2);
    let g_pow = g * half.pow((consumed + 1) as i32);
    if g_pow >= one {
        return None;
    }
    let y = (g * half.pow(consumed as i32) * rat_int(2)) / (&one - &g_pow);
    let lo = &one - product;
    let hi = &lo + product * y.min(one);
    Some((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;

    fn alg(blocks: &[(usize, (i64, i64))], diffuse: (i64, i64)) -> FdAlgebra {
        FdAlgebra::new(
            blocks.iter().map(|&(d, (p, q))| (d, rat(p, q))).collect(),
            rat(diffuse.0, diffuse.1),
        )
        .unwrap()
    }

    #[test]
    fn delta0_of_basic_algebras() {
        assert_eq!(FdAlgebra::scalar().delta0(), rat_int(0));
        let m3 = alg(&[(3, (1, 1))], (0, 1));
        assert_eq!(m3.delta0(), rat(8, 9));
        // C (+) M_2 with weights (3/5, 2/5): 1 - (9/25 + 1/25) = 3/5.
        let b = alg(&[(1, (3, 5)), (2, (2, 5))], (0, 1));
        assert_eq!(b.delta0(), rat(3, 5));
        // Fully diffuse: no defect at all.
        let diffuse = alg(&[], (1, 1));
        assert_eq!(diffuse.delta0(), rat_int(1));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(FdAlgebra::atomic(vec![(1, rat(1, 2))]).is_err());
        assert!(FdAlgebra::new(vec![(1, rat(1, 2))], rat(1, 2)).is_ok());
        assert!(FdAlgebra::new(vec![(0, rat(1, 2))], rat(1, 2)).is_err());
        assert!(FdAlgebra::new(vec![(1, rat(-1, 2))], rat(3, 2)).is_err());
    }

    #[test]
    fn tensor_multiplies_defects() {
        let a = alg(&[(1, (1, 2)), (1, (1, 2))], (0, 1));
        let t = a.tensor(&a);
        assert_eq!(t.blocks().len(), 4);
        assert_eq!(t.defect(), rat(1, 4));
        assert_eq!(&a.defect() * &a.defect(), t.defect());
        // Tensoring with the scalars changes nothing.
        let s = FdAlgebra::scalar();
        assert_eq!(a.tensor(&s).defect(), a.defect());
        // Diffuse mass spreads: diffuse (x) anything stays diffuse.
        let d = alg(&[(1, (1, 2))], (1, 2));
        let td = d.tensor(&a);
        assert_eq!(td.defect(), &d.defect() * &a.defect());
        assert_eq!(td.diffuse_weight(), &rat(1, 2));
    }

    #[test]
    fn tensor_sequence_of_scalars_is_degenerate_zero() {
        let src = FiniteFactors(vec![FdAlgebra::scalar(); 3]);
        let (lo, hi) = delta0_tensor_sequence(&src, &rat(1, 1000000), 10).unwrap();
        assert_eq!(lo, rat_int(0));
        assert_eq!(hi, rat_int(0));
    }

    #[test]
    fn tensor_sequence_single_half_factor() {
        let single = alg(&[(1, (1, 2)), (1, (1, 2))], (0, 1));
        let src = FiniteFactors(vec![single, FdAlgebra::scalar(), FdAlgebra::scalar()]);
        let (lo, hi) = delta0_tensor_sequence(&src, &rat(1, 1000000), 10).unwrap();
        assert_eq!(lo, rat(1, 2));
        assert_eq!(hi, rat(1, 2));
    }

    #[test]
    fn tensor_sequence_without_tail_bound_errors() {
        struct Endless;
        impl FactorSource for Endless {
            fn factor(&self, _: usize) -> Option<FdAlgebra> {
                Some(FdAlgebra::scalar())
            }
            fn is_finite(&self) -> bool {
                false
            }
            fn schedule_gamma(&self) -> Option<Rational> {
                None
            }
        }
        assert!(matches!(
            delta0_tensor_sequence(&Endless, &rat(1, 100), 5),
            Err(AlgebraError::NoTailBound)
        ));
    }

    #[test]
    fn representation_layout_and_embedding() {
        // C (+) M_2, multiplicities (2, 1): n = 4.
        let a = alg(&[(1, (1, 2)), (2, (1, 2))], (0, 1));
        let r = Representation::new(a.clone(), vec![2, 1]).unwrap();
        assert_eq!(r.total_dim(), 4);
        assert_eq!(r.trace_deviation(), rat_int(0));
        let unit = a.unit_element();
        let id = r.embed(&unit).unwrap();
        assert_eq!(id, linalg::identity(4));
        // Central projection of block 2 has rank m*c = 2.
        let mut z = a.zero_element();
        z.blocks[1] = linalg::identity(2);
        let p = r.embed(&z).unwrap();
        assert_eq!(p.trace().re, 2.0);
        // A matrix unit e_12 in block 2 picks up multiplicity c = 1.
        let mut e12 = a.zero_element();
        e12.blocks[1][(0, 1)] = C64::new(1.0, 0.0);
        let m = r.embed(&e12).unwrap();
        assert_eq!(m.iter().filter(|z| z.norm() > 0.0).count(), 1);
    }

    #[test]
    fn cond_expect_inverts_embed() {
        let a = alg(&[(2, (1, 3)), (1, (2, 3))], (0, 1));
        let r = Representation::new(a.clone(), vec![1, 4]).unwrap();
        let mut d = a.zero_element();
        d.blocks[0][(0, 1)] = C64::new(0.3, -0.7);
        d.blocks[0][(1, 1)] = C64::new(-1.0, 0.2);
        d.blocks[1][(0, 0)] = C64::new(2.0, 1.0);
        let x = r.embed(&d).unwrap();
        let back = r.cond_expect(&x).unwrap();
        assert_eq!(back, d);
        // And E of the identity is the unit.
        let e = r.cond_expect(&linalg::identity(r.total_dim())).unwrap();
        assert_eq!(e, a.unit_element());
    }

    #[test]
    fn make_representation_exact_fit() {
        let a = alg(&[(1, (1, 2)), (1, (1, 2))], (0, 1));
        let r = make_representation(&a, 10).unwrap();
        assert_eq!(r.multiplicities, vec![5, 5]);
        assert_eq!(r.trace_deviation(), rat_int(0));
        // target equal to sum of dims forces all multiplicities to one.
        let b = alg(&[(2, (1, 2)), (3, (1, 2))], (0, 1));
        let r = make_representation(&b, 5).unwrap();
        assert_eq!(r.multiplicities, vec![1, 1]);
        assert!(make_representation(&b, 4).is_err());
    }

    #[test]
    fn make_representation_matches_exhaustive_oracle() {
        // Oracle: brute-force every multiplicity vector with n <= target,
        // minimizing max deviation, tie-breaking toward larger n then
        // lexicographically smaller c.
        let cases = [
            alg(&[(1, (1, 2)), (2, (1, 2))], (0, 1)),
            alg(&[(1, (1, 3)), (2, (1, 3)), (3, (1, 3))], (0, 1)),
            alg(&[(2, (3, 7)), (3, (4, 7))], (0, 1)),
            alg(&[(1, (1, 6)), (1, (2, 6)), (1, (3, 6))], (0, 1)),
        ];
        for a in &cases {
            for target in [7usize, 10, 13] {
                let dims: Vec<usize> = a.blocks().iter().map(|b| b.dim).collect();
                if dims.iter().sum::<usize>() > target {
                    continue;
                }
                let mut best: Option<(Rational, usize, Vec<usize>)> = None;
                let mut stack = vec![Vec::<usize>::new()];
                while let Some(c) = stack.pop() {
                    if c.len() == dims.len() {
                        let n: usize = dims.iter().zip(&c).map(|(m, c)| m * c).sum();
                        let dev = dims
                            .iter()
                            .zip(&c)
                            .zip(a.blocks())
                            .map(|((m, c), b)| {
                                (rat((m * c) as i64, n as i64) - &b.weight).abs()
                            })
                            .max()
                            .unwrap();
                        let better = match &best {
                            None => true,
                            Some((bd, bn, bc)) => {
                                dev < *bd || (dev == *bd && (n > *bn || (n == *bn && c < *bc)))
                            }
                        };
                        if better {
                            best = Some((dev, n, c));
                        }
                        continue;
                    }
                    let used: usize = dims.iter().zip(&c).map(|(m, c)| m * c).sum();
                    let rest: usize = dims[c.len() + 1..].iter().sum();
                    let m = dims[c.len()];
                    let mut cc = 1;
                    while used + m * cc + rest <= target {
                        let mut next = c.clone();
                        next.push(cc);
                        stack.push(next);
                        cc += 1;
                    }
                }
                let (oracle_dev, _, oracle_c) = best.expect("feasible");
                let r = make_representation(a, target).unwrap();
                assert_eq!(r.multiplicities, oracle_c, "algebra {a:?} target {target}");
                assert_eq!(r.trace_deviation(), oracle_dev);
            }
        }
    }

    #[test]
    fn make_representation_spec_example() {
        // C (+) M_2 with weights (1/2, 1/2), target 10: c = (4, 2) realizes
        // the weights exactly at n = 8, the largest dev-zero fit below 10.
        let a = alg(&[(1, (1, 2)), (2, (1, 2))], (0, 1));
        let r = make_representation(&a, 10).unwrap();
        assert_eq!(r.multiplicities, vec![4, 2]);
        assert_eq!(r.trace_deviation(), rat_int(0));
        assert_eq!(r.total_dim(), 8);
    }
}

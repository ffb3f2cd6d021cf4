//! Operator-valued moments of words in noncommuting sources, evaluated
//! under the assumption that distinct sources are free with amalgamation
//! over the base algebra.
//!
//! A `Source` supplies marginal moments for one family: a Haar unitary
//! commuting with the base, a family of concrete matrices read through a
//! `Representation`, or an explicit moment table. `amalg_moment` combines
//! marginals across sources by the centering recursion: every block is
//! split into its centered part plus its expectation, expectations are
//! absorbed into neighboring blocks, and alternating products of centered
//! blocks from distinct sources are annihilated exactly.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::algebra::{AlgebraError, DElement, FdAlgebra, Representation};
use crate::linalg::{self, C64, CMatrix};

/// Hard cap on the number of letters in a word given to `amalg_moment`.
pub const WORD_LETTER_CAP: usize = 12;

#[derive(Debug, Error)]
pub enum MomentsError {
    #[error("word references unknown source `{0}`")]
    UnknownSource(String),
    #[error("source `{source_id}` has no element named `{name}`")]
    UnknownElement { source_id: String, name: String },
    #[error("duplicate source id `{0}`")]
    DuplicateSource(String),
    #[error("duplicate letter name `{0}`")]
    DuplicateLetter(String),
    #[error("word has {len} letters, the cap is {cap}")]
    WordTooLong { len: usize, cap: usize },
    #[error("source `{source_id}`: matrix `{name}` is {rows}x{cols}, expected {want}x{want}")]
    BadMatrixDim {
        source_id: String,
        name: String,
        rows: usize,
        cols: usize,
        want: usize,
    },
    #[error("source `{source_id}`: bad moment key `{key}`: {why}")]
    BadMomentKey {
        source_id: String,
        key: String,
        why: String,
    },
    #[error("source `{source_id}`: moment table has no entry for `{word}`")]
    MissingMoment { source_id: String, word: String },
    #[error(
        "source `{source_id}`: moment table is not *-consistent at `{word}` (deviation {dev:.3e})"
    )]
    StarInconsistent {
        source_id: String,
        word: String,
        dev: f64,
    },
    #[error("source `{source_id}`: moment table maps the empty word away from the unit")]
    NotUnital { source_id: String },
    #[error("source `{0}` is defined over a different base algebra than the evaluator")]
    AlgebraMismatch(String),
    #[error(
        "source `{source_id}`: block `{word}` mixes letters with interior base elements, which \
         a moment table over a nonscalar base cannot evaluate"
    )]
    TableNeedsInterior { source_id: String, word: String },
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("norm bound must be positive, got {0}")]
    BadNormBound(f64),
    #[error("microstate targets are missing the word `{0}`")]
    MissingTarget(String),
    #[error("supplied freeness predictions are missing the word `{0}`")]
    MissingPrediction(String),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

/// One letter of a word: a named element of a named source, optionally
/// starred.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter {
    pub source: String,
    pub name: String,
    pub star: bool,
}

#[derive(Clone, Debug)]
pub enum Symbol {
    Letter(Letter),
    Const(DElement),
}

/// A word in source letters and explicit base elements.
#[derive(Clone, Debug, Default)]
pub struct NCWord {
    symbols: Vec<Symbol>,
}

impl NCWord {
    pub fn new() -> NCWord {
        NCWord::default()
    }

    pub fn letter(mut self, source: &str, name: &str) -> NCWord {
        self.symbols.push(Symbol::Letter(Letter {
            source: source.to_string(),
            name: name.to_string(),
            star: false,
        }));
        self
    }

    pub fn star(mut self, source: &str, name: &str) -> NCWord {
        self.symbols.push(Symbol::Letter(Letter {
            source: source.to_string(),
            name: name.to_string(),
            star: true,
        }));
        self
    }

    pub fn constant(mut self, d: DElement) -> NCWord {
        self.symbols.push(Symbol::Const(d));
        self
    }

    pub fn push(&mut self, l: Letter) {
        self.symbols.push(Symbol::Letter(l));
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn letter_count(&self) -> usize {
        self.symbols
            .iter()
            .filter(|s| matches!(s, Symbol::Letter(_)))
            .count()
    }

    /// Formal adjoint: reverse the word, flip stars, adjoint constants.
    pub fn adjoint(&self) -> NCWord {
        let symbols = self
            .symbols
            .iter()
            .rev()
            .map(|s| match s {
                Symbol::Letter(l) => Symbol::Letter(Letter {
                    source: l.source.clone(),
                    name: l.name.clone(),
                    star: !l.star,
                }),
                Symbol::Const(d) => Symbol::Const(d.adjoint()),
            })
            .collect();
        NCWord { symbols }
    }

    pub fn encode(&self) -> String {
        self.symbols
            .iter()
            .map(|s| match s {
                Symbol::Letter(l) => {
                    format!("{}.{}{}", l.source, l.name, if l.star { "*" } else { "" })
                }
                Symbol::Const(_) => "[const]".to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn encode_letter_seq(letters: &[(String, bool)]) -> String {
    letters
        .iter()
        .map(|(n, s)| if *s { format!("{n}*") } else { n.clone() })
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_letter_seq(key: &str) -> Result<Vec<(String, bool)>, String> {
    key.split_whitespace()
        .map(|tok| {
            let (name, star) = match tok.strip_suffix('*') {
                Some(n) => (n, true),
                None => (tok, false),
            };
            if name.is_empty() {
                return Err(format!("empty letter name in `{tok}`"));
            }
            if name.contains('*') {
                return Err(format!("stray `*` inside `{tok}`"));
            }
            Ok((name.to_string(), star))
        })
        .collect()
}

fn adjoint_letter_seq(letters: &[(String, bool)]) -> Vec<(String, bool)> {
    letters
        .iter()
        .rev()
        .map(|(n, s)| (n.clone(), !s))
        .collect()
}

#[derive(Clone, Debug)]
enum SourceKind {
    HaarUnitary,
    ConstantMatrices {
        rep: Representation,
        matrices: BTreeMap<String, CMatrix>,
    },
    MomentTable {
        algebra: FdAlgebra,
        table: BTreeMap<String, DElement>,
        letters: BTreeSet<String>,
    },
}

/// A family of noncommutative random variables identified by an id, with
/// enough marginal data to evaluate base-valued expectations of words in
/// its own letters.
#[derive(Clone, Debug)]
pub struct Source {
    id: String,
    kind: SourceKind,
}

impl Source {
    /// A single Haar unitary `u` commuting with the base algebra. Its only
    /// letter is named `u`; expectations of balanced powers are the
    /// absorbed base constants, unbalanced powers vanish.
    pub fn haar_unitary(id: &str) -> Source {
        Source {
            id: id.to_string(),
            kind: SourceKind::HaarUnitary,
        }
    }

    /// Named square matrices read through `rep`: marginal moments are
    /// conditional expectations of the literal matrix products.
    pub fn constant_matrices(
        id: &str,
        rep: Representation,
        matrices: BTreeMap<String, CMatrix>,
    ) -> Result<Source, MomentsError> {
        let n = rep.total_dim();
        for (name, m) in &matrices {
            if m.nrows() != n || m.ncols() != n {
                return Err(MomentsError::BadMatrixDim {
                    source_id: id.to_string(),
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                    want: n,
                });
            }
        }
        Ok(Source {
            id: id.to_string(),
            kind: SourceKind::ConstantMatrices { rep, matrices },
        })
    }

    /// An explicit table of base-valued moments, keyed by words like
    /// `"b1 b2* b1"`. Keys for a word and its adjoint may both appear, in
    /// which case they must agree; a missing adjoint key is filled in by
    /// taking adjoints. An empty key, if present, must name the unit.
    pub fn moment_table(
        id: &str,
        algebra: FdAlgebra,
        table: BTreeMap<String, DElement>,
    ) -> Result<Source, MomentsError> {
        let mut letters = BTreeSet::new();
        for (key, value) in &table {
            let seq = parse_letter_seq(key).map_err(|why| MomentsError::BadMomentKey {
                source_id: id.to_string(),
                key: key.clone(),
                why,
            })?;
            let canonical = encode_letter_seq(&seq);
            if canonical != *key {
                return Err(MomentsError::BadMomentKey {
                    source_id: id.to_string(),
                    key: key.clone(),
                    why: format!("not in canonical form `{canonical}`"),
                });
            }
            algebra.check_element(value)?;
            if seq.is_empty() {
                let dev = value.sub(&algebra.unit_element()).max_abs();
                if dev > 1e-12 {
                    return Err(MomentsError::NotUnital {
                        source_id: id.to_string(),
                    });
                }
            }
            for (name, _) in &seq {
                letters.insert(name.clone());
            }
            let adj_key = encode_letter_seq(&adjoint_letter_seq(&seq));
            if let Some(other) = table.get(&adj_key) {
                let dev = other.sub(&value.adjoint()).max_abs();
                if dev > 1e-12 {
                    return Err(MomentsError::StarInconsistent {
                        source_id: id.to_string(),
                        word: key.clone(),
                        dev,
                    });
                }
            }
        }
        Ok(Source {
            id: id.to_string(),
            kind: SourceKind::MomentTable {
                algebra,
                table,
                letters,
            },
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn base_matches(&self, d: &FdAlgebra) -> bool {
        match &self.kind {
            SourceKind::HaarUnitary => true,
            SourceKind::ConstantMatrices { rep, .. } => rep.algebra == *d,
            SourceKind::MomentTable { algebra, .. } => algebra == d,
        }
    }

    fn has_element(&self, name: &str) -> bool {
        match &self.kind {
            SourceKind::HaarUnitary => name == "u",
            SourceKind::ConstantMatrices { matrices, .. } => matrices.contains_key(name),
            SourceKind::MomentTable { letters, .. } => letters.contains(name),
        }
    }
}

#[derive(Clone, Debug)]
enum Factor {
    Letter { name: String, star: bool },
    Const(DElement),
}

#[derive(Clone, Debug)]
enum Node {
    Const(DElement),
    Block {
        source: usize,
        factors: Vec<Factor>,
        centered: bool,
    },
}

fn block_tag(n: &Node) -> Option<(usize, bool)> {
    match n {
        Node::Block {
            source, centered, ..
        } => Some((*source, *centered)),
        Node::Const(_) => None,
    }
}

fn block_factors(n: &Node) -> &[Factor] {
    match n {
        Node::Block { factors, .. } => factors,
        Node::Const(_) => unreachable!("expected a block"),
    }
}

fn factor_key(factors: &[Factor]) -> Option<Vec<(String, bool)>> {
    factors
        .iter()
        .map(|f| match f {
            Factor::Letter { name, star } => Some((name.clone(), *star)),
            Factor::Const(_) => None,
        })
        .collect()
}

type MemoKey = (usize, Vec<(String, bool)>);

/// Evaluates base-valued expectations of words, treating distinct sources
/// as free with amalgamation over the base. Marginal expectations of
/// constant-matrix blocks are memoized across calls.
pub struct MomentEvaluator {
    d: FdAlgebra,
    sources: Vec<Source>,
    index: BTreeMap<String, usize>,
    memo: RefCell<HashMap<MemoKey, DElement>>,
}

impl MomentEvaluator {
    pub fn new(d: &FdAlgebra, sources: Vec<Source>) -> Result<MomentEvaluator, MomentsError> {
        let mut index = BTreeMap::new();
        for (i, s) in sources.iter().enumerate() {
            if !s.base_matches(d) {
                return Err(MomentsError::AlgebraMismatch(s.id.clone()));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(MomentsError::DuplicateSource(s.id.clone()));
            }
        }
        Ok(MomentEvaluator {
            d: d.clone(),
            sources,
            index,
            memo: RefCell::new(HashMap::new()),
        })
    }

    pub fn base(&self) -> &FdAlgebra {
        &self.d
    }

    pub fn expect(&self, w: &NCWord) -> Result<DElement, MomentsError> {
        let len = w.letter_count();
        if len > WORD_LETTER_CAP {
            return Err(MomentsError::WordTooLong {
                len,
                cap: WORD_LETTER_CAP,
            });
        }
        let nodes = self.build_nodes(w)?;
        self.eval(nodes)
    }

    fn build_nodes(&self, w: &NCWord) -> Result<Vec<Node>, MomentsError> {
        let mut nodes: Vec<Node> = Vec::new();
        for sym in w.symbols() {
            match sym {
                Symbol::Const(d) => {
                    self.d.check_element(d)?;
                    nodes.push(Node::Const(d.clone()));
                }
                Symbol::Letter(l) => {
                    let idx = *self
                        .index
                        .get(&l.source)
                        .ok_or_else(|| MomentsError::UnknownSource(l.source.clone()))?;
                    if !self.sources[idx].has_element(&l.name) {
                        return Err(MomentsError::UnknownElement {
                            source_id: l.source.clone(),
                            name: l.name.clone(),
                        });
                    }
                    let factor = Factor::Letter {
                        name: l.name.clone(),
                        star: l.star,
                    };
                    match nodes.last_mut() {
                        Some(Node::Block {
                            source, factors, ..
                        }) if *source == idx => factors.push(factor),
                        _ => nodes.push(Node::Block {
                            source: idx,
                            factors: vec![factor],
                            centered: false,
                        }),
                    }
                }
            }
        }
        Ok(nodes)
    }

    /// The centering recursion. Each rewrite strictly shrinks the word in
    /// the lexicographic measure (blocks, nodes, uncentered blocks), and a
    /// fully centered alternating word is annihilated without any
    /// floating-point work.
    fn eval(&self, mut nodes: Vec<Node>) -> Result<DElement, MomentsError> {
        let mut i = 0;
        while i + 1 < nodes.len() {
            if matches!(nodes[i], Node::Const(_)) && matches!(nodes[i + 1], Node::Const(_)) {
                let Node::Const(b) = nodes.remove(i + 1) else {
                    unreachable!()
                };
                let Node::Const(a) = &mut nodes[i] else {
                    unreachable!()
                };
                *a = a.mul(&b);
            } else {
                i += 1;
            }
        }

        match nodes.len() {
            0 => return Ok(self.d.unit_element()),
            1 => {
                return match nodes.pop().expect("nonempty") {
                    Node::Const(d) => Ok(d),
                    Node::Block { centered: true, .. } => Ok(self.d.zero_element()),
                    Node::Block {
                        source, factors, ..
                    } => self.block_expect(source, &factors),
                };
            }
            _ => {}
        }

        // Conditional expectations are base bimodular, so constants at
        // either end pull straight out.
        if matches!(nodes[0], Node::Const(_)) {
            let Node::Const(d) = nodes.remove(0) else {
                unreachable!()
            };
            return Ok(d.mul(&self.eval(nodes)?));
        }
        if matches!(nodes.last(), Some(Node::Const(_))) {
            let Some(Node::Const(d)) = nodes.pop() else {
                unreachable!()
            };
            return Ok(self.eval(nodes)?.mul(&d));
        }

        // Adjacent blocks from the same source merge; centered ones are
        // expanded as (block - expectation) first.
        for i in 0..nodes.len() - 1 {
            let Some((s1, c1)) = block_tag(&nodes[i]) else {
                continue;
            };
            let Some((s2, c2)) = block_tag(&nodes[i + 1]) else {
                continue;
            };
            if s1 != s2 {
                continue;
            }
            let f1 = block_factors(&nodes[i]).to_vec();
            let f2 = block_factors(&nodes[i + 1]).to_vec();
            let rebuild = |mid: Node| -> Vec<Node> {
                let mut t = Vec::with_capacity(nodes.len() - 1);
                t.extend_from_slice(&nodes[..i]);
                t.push(mid);
                t.extend_from_slice(&nodes[i + 2..]);
                t
            };
            let mut merged = f1.clone();
            merged.extend(f2.iter().cloned());
            let mut acc = self.eval(rebuild(Node::Block {
                source: s1,
                factors: merged,
                centered: false,
            }))?;
            if c1 {
                let e1 = self.block_expect(s1, &f1)?;
                let mut f = vec![Factor::Const(e1.clone())];
                f.extend(f2.iter().cloned());
                acc = acc.sub(&self.eval(rebuild(Node::Block {
                    source: s1,
                    factors: f,
                    centered: false,
                }))?);
                if c2 {
                    let e2 = self.block_expect(s1, &f2)?;
                    let mut g = f1.clone();
                    g.push(Factor::Const(e2.clone()));
                    acc = acc.sub(&self.eval(rebuild(Node::Block {
                        source: s1,
                        factors: g,
                        centered: false,
                    }))?);
                    acc = acc.add(&self.eval(rebuild(Node::Const(e1.mul(&e2))))?);
                }
            } else if c2 {
                let e2 = self.block_expect(s1, &f2)?;
                let mut g = f1.clone();
                g.push(Factor::Const(e2));
                acc = acc.sub(&self.eval(rebuild(Node::Block {
                    source: s1,
                    factors: g,
                    centered: false,
                }))?);
            }
            return Ok(acc);
        }

        // Interior constant between blocks of distinct sources: absorb it
        // into an uncentered neighbor, or expand the centered one.
        for i in 1..nodes.len() - 1 {
            if !matches!(nodes[i], Node::Const(_)) {
                continue;
            }
            let Node::Const(d) = nodes[i].clone() else {
                unreachable!()
            };
            let (rs, rc) = block_tag(&nodes[i + 1]).expect("const neighbors are blocks");
            let (_, lc) = block_tag(&nodes[i - 1]).expect("const neighbors are blocks");
            if !rc {
                let mut t = nodes.clone();
                t.remove(i);
                let Node::Block { factors, .. } = &mut t[i] else {
                    unreachable!()
                };
                factors.insert(0, Factor::Const(d));
                return self.eval(t);
            }
            if !lc {
                let mut t = nodes.clone();
                t.remove(i);
                let Node::Block { factors, .. } = &mut t[i - 1] else {
                    unreachable!()
                };
                factors.push(Factor::Const(d));
                return self.eval(t);
            }
            let fr = block_factors(&nodes[i + 1]).to_vec();
            let er = self.block_expect(rs, &fr)?;
            let mut t1 = Vec::with_capacity(nodes.len() - 1);
            t1.extend_from_slice(&nodes[..i]);
            let mut f = vec![Factor::Const(d.clone())];
            f.extend(fr.iter().cloned());
            t1.push(Node::Block {
                source: rs,
                factors: f,
                centered: false,
            });
            t1.extend_from_slice(&nodes[i + 2..]);
            let mut t2 = Vec::with_capacity(nodes.len() - 1);
            t2.extend_from_slice(&nodes[..i]);
            t2.push(Node::Const(d.mul(&er)));
            t2.extend_from_slice(&nodes[i + 2..]);
            return Ok(self.eval(t1)?.sub(&self.eval(t2)?));
        }

        // Alternating blocks only. All centered: the word is annihilated.
        // Otherwise center the leftmost plain block and recurse.
        match nodes
            .iter()
            .position(|n| matches!(n, Node::Block { centered: false, .. }))
        {
            None => Ok(self.d.zero_element()),
            Some(i) => {
                let (s, _) = block_tag(&nodes[i]).expect("block");
                let f = block_factors(&nodes[i]).to_vec();
                let e = self.block_expect(s, &f)?;
                let mut t1 = nodes.clone();
                if let Node::Block { centered, .. } = &mut t1[i] {
                    *centered = true;
                }
                let mut t2 = nodes;
                t2[i] = Node::Const(e);
                Ok(self.eval(t1)?.add(&self.eval(t2)?))
            }
        }
    }

    /// Marginal expectation of a single-source block, with absorbed base
    /// constants interleaved among the letters.
    fn block_expect(&self, s: usize, factors: &[Factor]) -> Result<DElement, MomentsError> {
        let src = &self.sources[s];
        match &src.kind {
            SourceKind::HaarUnitary => {
                let mut pow: i64 = 0;
                let mut acc = self.d.unit_element();
                for f in factors {
                    match f {
                        Factor::Letter { star, .. } => pow += if *star { -1 } else { 1 },
                        Factor::Const(c) => acc = acc.mul(c),
                    }
                }
                if pow == 0 {
                    Ok(acc)
                } else {
                    Ok(self.d.zero_element())
                }
            }
            SourceKind::ConstantMatrices { rep, matrices } => {
                let key = factor_key(factors);
                if let Some(k) = &key {
                    if let Some(v) = self.memo.borrow().get(&(s, k.clone())) {
                        return Ok(v.clone());
                    }
                }
                let n = rep.total_dim();
                let mut prod = linalg::identity(n);
                for f in factors {
                    match f {
                        Factor::Letter { name, star } => {
                            let m = matrices.get(name).ok_or_else(|| {
                                MomentsError::UnknownElement {
                                    source_id: src.id.clone(),
                                    name: name.clone(),
                                }
                            })?;
                            prod = if *star { prod * m.adjoint() } else { prod * m };
                        }
                        Factor::Const(c) => prod = prod * rep.embed(c)?,
                    }
                }
                let e = rep.cond_expect(&prod)?;
                if let Some(k) = key {
                    self.memo.borrow_mut().insert((s, k), e.clone());
                }
                Ok(e)
            }
            SourceKind::MomentTable { algebra, table, .. } => {
                if algebra.is_scalar() {
                    let mut coef = C64::new(1.0, 0.0);
                    let mut letters = Vec::new();
                    for f in factors {
                        match f {
                            Factor::Letter { name, star } => letters.push((name.clone(), *star)),
                            Factor::Const(c) => coef *= c.blocks[0][(0, 0)],
                        }
                    }
                    let base = if letters.is_empty() {
                        self.d.unit_element()
                    } else {
                        lookup_moment(&src.id, table, &letters)?
                    };
                    Ok(base.scale(coef))
                } else {
                    let mut lead = self.d.unit_element();
                    let mut trail = self.d.unit_element();
                    let mut letters = Vec::new();
                    let mut seen_letter = false;
                    for f in factors {
                        match f {
                            Factor::Letter { name, star } => {
                                if !trail.sub(&self.d.unit_element()).is_zero() {
                                    return Err(MomentsError::TableNeedsInterior {
                                        source_id: src.id.clone(),
                                        word: describe_factors(factors),
                                    });
                                }
                                seen_letter = true;
                                letters.push((name.clone(), *star));
                            }
                            Factor::Const(c) => {
                                if seen_letter {
                                    trail = trail.mul(c);
                                } else {
                                    lead = lead.mul(c);
                                }
                            }
                        }
                    }
                    if letters.is_empty() {
                        return Ok(lead.mul(&trail));
                    }
                    let mid = lookup_moment(&src.id, table, &letters)?;
                    Ok(lead.mul(&mid).mul(&trail))
                }
            }
        }
    }
}

fn describe_factors(factors: &[Factor]) -> String {
    factors
        .iter()
        .map(|f| match f {
            Factor::Letter { name, star } => {
                if *star {
                    format!("{name}*")
                } else {
                    name.clone()
                }
            }
            Factor::Const(_) => "[const]".to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn lookup_moment(
    id: &str,
    table: &BTreeMap<String, DElement>,
    letters: &[(String, bool)],
) -> Result<DElement, MomentsError> {
    let key = encode_letter_seq(letters);
    if let Some(v) = table.get(&key) {
        return Ok(v.clone());
    }
    let adj = encode_letter_seq(&adjoint_letter_seq(letters));
    if let Some(v) = table.get(&adj) {
        return Ok(v.adjoint());
    }
    Err(MomentsError::MissingMoment {
        source_id: id.to_string(),
        word: key,
    })
}

/// Expectation of `w` when the given sources are free with amalgamation
/// over `d`. Exact annihilation of alternating centered words; all other
/// values reduce to marginal moments of the sources.
pub fn amalg_moment(
    sources: &[Source],
    d: &FdAlgebra,
    w: &NCWord,
) -> Result<DElement, MomentsError> {
    MomentEvaluator::new(d, sources.to_vec())?.expect(w)
}

/// A named tuple of matrices treated as one family in freeness checks.
#[derive(Clone, Debug)]
pub struct MatrixFamily {
    pub id: String,
    pub elements: Vec<(String, CMatrix)>,
}

#[derive(Clone, Debug)]
pub struct FreeCheckVerdict {
    pub pass: bool,
    pub max_deviation: f64,
    pub witness_word: Option<String>,
}

impl FreeCheckVerdict {
    pub fn to_report(&self) -> serde_json::Value {
        serde_json::json!({
            "pass": self.pass,
            "maxDeviation": self.max_deviation,
            "witnessWord": self.witness_word,
        })
    }
}

/// Measures how far the families sit from freeness with amalgamation: for
/// every alternating word of length at most `m` (enumerated by length,
/// then family index, then element index), the conditional expectation of
/// the actual matrix product is compared against the freeness prediction,
/// in operator norm. Passes iff the worst deviation stays below `gamma`.
fn family_word_encode(families: &[MatrixFamily], word: &[(usize, usize)]) -> String {
    let mut w = NCWord::new();
    for &(f, e) in word {
        w = w.letter(&families[f].id, &families[f].elements[e].0);
    }
    w.encode()
}

/// Base-valued expectations the families would have if they were free with
/// amalgamation, one entry per alternating word of length at most `m`. The
/// values depend only on each family's own marginal moments, so conjugating
/// every family by a unitary from the relative commutant leaves them fixed.
pub fn freeness_predictions(
    rep: &Representation,
    families: &[MatrixFamily],
    m: usize,
) -> Result<BTreeMap<String, DElement>, MomentsError> {
    let mut sources = Vec::with_capacity(families.len());
    for fam in families {
        let mut names = BTreeSet::new();
        for (name, _) in &fam.elements {
            if !names.insert(name.clone()) {
                return Err(MomentsError::DuplicateLetter(name.clone()));
            }
        }
        let matrices: BTreeMap<String, CMatrix> = fam
            .elements
            .iter()
            .map(|(n, m)| (n.clone(), m.clone()))
            .collect();
        sources.push(Source::constant_matrices(&fam.id, rep.clone(), matrices)?);
    }
    let ev = MomentEvaluator::new(&rep.algebra, sources)?;

    let mut out = BTreeMap::new();
    let mut word: Vec<(usize, usize)> = Vec::new();
    fn go(
        families: &[MatrixFamily],
        ev: &MomentEvaluator,
        word: &mut Vec<(usize, usize)>,
        m: usize,
        out: &mut BTreeMap<String, DElement>,
    ) -> Result<(), MomentsError> {
        for f in 0..families.len() {
            if let Some(&(last, _)) = word.last() {
                if last == f {
                    continue;
                }
            }
            for e in 0..families[f].elements.len() {
                word.push((f, e));
                let mut w = NCWord::new();
                for &(wf, we) in word.iter() {
                    w = w.letter(&families[wf].id, &families[wf].elements[we].0);
                }
                out.insert(w.encode(), ev.expect(&w)?);
                if word.len() < m {
                    go(families, ev, word, m, out)?;
                }
                word.pop();
            }
        }
        Ok(())
    }
    go(families, &ev, &mut word, m, &mut out)?;
    Ok(out)
}

/// Like `mg_free_check` but with the freeness predictions supplied by the
/// caller; useful when many tuples share the same predicted moments.
pub fn mg_free_check_against(
    rep: &Representation,
    families: &[MatrixFamily],
    predictions: &BTreeMap<String, DElement>,
    m: usize,
    gamma: f64,
) -> Result<FreeCheckVerdict, MomentsError> {
    if !(gamma > 0.0) {
        return Err(MomentsError::BadGamma(gamma));
    }
    for fam in families {
        let mut names = BTreeSet::new();
        for (name, _) in &fam.elements {
            if !names.insert(name.clone()) {
                return Err(MomentsError::DuplicateLetter(name.clone()));
            }
        }
    }

    let mut max_dev = 0.0f64;
    let mut witness: Option<String> = None;

    // one conditional expectation per word, paired against the running
    // prefix without forming the final product; full multiplies happen only
    // on prefixes that still grow
    struct Walk<'a> {
        rep: &'a Representation,
        families: &'a [MatrixFamily],
        predictions: &'a BTreeMap<String, DElement>,
        m: usize,
        max_dev: &'a mut f64,
        witness: &'a mut Option<String>,
    }

    impl Walk<'_> {
        fn go(
            &mut self,
            word: &mut Vec<(usize, usize)>,
            prefix: Option<&CMatrix>,
        ) -> Result<(), MomentsError> {
            for f in 0..self.families.len() {
                if let Some(&(last, _)) = word.last() {
                    if last == f {
                        continue;
                    }
                }
                for e in 0..self.families[f].elements.len() {
                    let letter = &self.families[f].elements[e].1;
                    word.push((f, e));
                    let actual = match prefix {
                        None => self.rep.cond_expect(letter)?,
                        Some(p) => self.rep.cond_expect_of_product(p, letter)?,
                    };
                    let key = family_word_encode(self.families, word);
                    let predicted = self
                        .predictions
                        .get(&key)
                        .ok_or_else(|| MomentsError::MissingPrediction(key.clone()))?;
                    let dev = actual.sub(predicted).operator_norm();
                    if dev > *self.max_dev {
                        *self.max_dev = dev;
                        *self.witness = Some(key);
                    }
                    if word.len() < self.m {
                        let next = match prefix {
                            None => letter.clone(),
                            Some(p) => p * letter,
                        };
                        self.go(word, Some(&next))?;
                    }
                    word.pop();
                }
            }
            Ok(())
        }
    }

    let mut walk = Walk {
        rep,
        families,
        predictions,
        m,
        max_dev: &mut max_dev,
        witness: &mut witness,
    };
    walk.go(&mut Vec::new(), None)?;

    let pass = max_dev < gamma;
    Ok(FreeCheckVerdict {
        pass,
        max_deviation: max_dev,
        witness_word: if pass { None } else { witness },
    })
}

pub fn mg_free_check(
    rep: &Representation,
    families: &[MatrixFamily],
    m: usize,
    gamma: f64,
) -> Result<FreeCheckVerdict, MomentsError> {
    if !(gamma > 0.0) {
        return Err(MomentsError::BadGamma(gamma));
    }
    let predictions = freeness_predictions(rep, families, m)?;
    mg_free_check_against(rep, families, &predictions, m, gamma)
}

/// Microstate membership: every word of length at most `m` in the given
/// letters must have normalized matrix trace within `gamma` of its target,
/// and every letter must have operator norm at most `norm_bound`.
pub fn microstate_check(
    rep: &Representation,
    tuples: &[(String, CMatrix)],
    targets: &BTreeMap<String, C64>,
    m: usize,
    gamma: f64,
    norm_bound: f64,
) -> Result<bool, MomentsError> {
    if !(gamma > 0.0) {
        return Err(MomentsError::BadGamma(gamma));
    }
    if !(norm_bound > 0.0) {
        return Err(MomentsError::BadNormBound(norm_bound));
    }
    let n = rep.total_dim();
    let mut names = BTreeSet::new();
    for (name, mat) in tuples {
        if !names.insert(name.clone()) {
            return Err(MomentsError::DuplicateLetter(name.clone()));
        }
        if mat.nrows() != n || mat.ncols() != n {
            return Err(MomentsError::BadMatrixDim {
                source_id: "tuple".to_string(),
                name: name.clone(),
                rows: mat.nrows(),
                cols: mat.ncols(),
                want: n,
            });
        }
    }
    for (_, mat) in tuples {
        if !(linalg::spectral_norm_svd(mat) <= norm_bound) {
            return Ok(false);
        }
    }

    // traces pair against the running prefix without forming the final
    // product; full multiplies happen only on prefixes that still grow
    fn walk(
        tuples: &[(String, CMatrix)],
        targets: &BTreeMap<String, C64>,
        word: &mut Vec<usize>,
        prefix: Option<&CMatrix>,
        m: usize,
        gamma: f64,
        n: usize,
    ) -> Result<bool, MomentsError> {
        for i in 0..tuples.len() {
            word.push(i);
            let key = word
                .iter()
                .map(|&j| tuples[j].0.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let target = targets
                .get(&key)
                .ok_or_else(|| MomentsError::MissingTarget(key.clone()))?;
            let tr = match prefix {
                None => linalg::normalized_trace(&tuples[i].1),
                Some(p) => linalg::trace_of_product(p, &tuples[i].1) / C64::new(n as f64, 0.0),
            };
            let mut ok = (tr - target).norm() < gamma;
            if ok && word.len() < m {
                let next = match prefix {
                    None => tuples[i].1.clone(),
                    Some(p) => p * &tuples[i].1,
                };
                ok = walk(tuples, targets, word, Some(&next), m, gamma, n)?;
            }
            word.pop();
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }

    if !walk(tuples, targets, &mut Vec::new(), None, m, gamma, n)? {
        return Ok(false);
    }
    Ok(true)
}

//! Monte Carlo experiments over representations of a fixed base algebra:
//! norm decay of conditional expectations of words in commutant Haar
//! unitaries, the concentration fraction of that decay statistic, freeness
//! with amalgamation of independently conjugated families, and agreement
//! between the two commutant samplers.
//!
//! Each experiment maps a config and a master seed to an `ExperimentResult`
//! whose per-trial rows are reproducible bit-for-bit: trial streams are
//! derived from (seed, kind, k, trial), so results do not depend on thread
//! count or evaluation order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{make_representation, AlgebraError, FdAlgebra, Representation};
use crate::linalg::{self, C64, CMatrix};
use crate::moments::{
    amalg_moment, freeness_predictions, mg_free_check_against, microstate_check, MatrixFamily,
    MomentsError, NCWord, Source,
};
use crate::rmt::{
    self, center_matrices, compressed_polar_unitary, eval_group_word, haar_on_commutant,
    GroupWord, RmtError,
};

#[derive(Debug, Error)]
pub enum ExperimentsError {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error(transparent)]
    Rmt(#[from] RmtError),
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

fn config_err(pointer: &str, message: impl Into<String>) -> ExperimentsError {
    ExperimentsError::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Decay,
    Concentration,
    Asfree,
    PolarCompare,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::Decay => "decay",
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::Asfree => "asfree",
            ExperimentKind::PolarCompare => "polar-compare",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "decay" => Some(ExperimentKind::Decay),
            "concentration" => Some(ExperimentKind::Concentration),
            "asfree" => Some(ExperimentKind::Asfree),
            "polar-compare" => Some(ExperimentKind::PolarCompare),
            _ => None,
        }
    }
}

/// Deterministic matrix builders, so configs stay small and the same
/// constants can be regenerated at every grid dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum MatrixRecipe {
    /// Cyclic permutation by `step` positions; operator norm 1.
    CyclicShift { step: usize },
    /// Self-adjoint (P + P*)/2 for the cyclic shift P^step.
    SymmetricShift { step: usize },
    /// Real diagonal cos(2 pi freq j / n); self-adjoint, norm at most 1.
    CosineDiagonal { freq: usize },
}

impl MatrixRecipe {
    pub fn build(&self, n: usize) -> CMatrix {
        match *self {
            MatrixRecipe::CyclicShift { step } => CMatrix::from_fn(n, n, |r, c| {
                if r == (c + step) % n {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
            MatrixRecipe::SymmetricShift { step } => CMatrix::from_fn(n, n, |r, c| {
                let fwd = r == (c + step) % n;
                let bwd = c == (r + step) % n;
                let v = 0.5 * (fwd as u8 + bwd as u8) as f64;
                C64::new(v, 0.0)
            }),
            MatrixRecipe::CosineDiagonal { freq } => CMatrix::from_fn(n, n, |r, c| {
                if r == c {
                    let theta = 2.0 * std::f64::consts::PI * (freq * r) as f64 / n as f64;
                    C64::new(theta.cos(), 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        }
    }
}

/// One named constant: either a recipe evaluated per grid dimension, or an
/// explicit matrix (usable only when the grid realizes its dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConstantSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<MatrixRecipe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<serde_json::Value>,
}

/// Alternating pattern v^{g_0} B_1 v^{g_1} ... B_N v^{g_N}: `segments` holds
/// the N+1 group words, `constants` the N constant names between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WordPattern {
    pub segments: Vec<GroupWord>,
    pub constants: Vec<String>,
}

fn default_norm_bound() -> f64 {
    4.0
}

fn default_m() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algebra: FdAlgebra,
    /// Target total dimensions, strictly increasing.
    pub grid: Vec<usize>,
    pub trials: usize,
    pub epsilon: f64,
    #[serde(default = "default_norm_bound")]
    pub norm_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constants: Vec<ConstantSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<WordPattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub families: Option<Vec<Vec<String>>>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_constant: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentsError> {
        serde_json::from_str(s).map_err(|e| config_err("/", e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn constant_names(&self) -> Vec<&str> {
        self.constants.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn validate(&self, kind: ExperimentKind) -> Result<(), ExperimentsError> {
        if self.grid.is_empty() {
            return Err(config_err("/grid", "grid must be nonempty"));
        }
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(config_err("/grid", "grid must be strictly increasing"));
        }
        if self.trials == 0 {
            return Err(config_err("/trials", "trials must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("/epsilon", "epsilon must be positive"));
        }
        if !(self.norm_bound > 0.0) {
            return Err(config_err("/normBound", "norm bound must be positive"));
        }
        let names = self.constant_names();
        for (i, c) in self.constants.iter().enumerate() {
            let here = format!("/constants/{i}");
            if names.iter().filter(|n| **n == c.name).count() > 1 {
                return Err(config_err(&here, format!("duplicate constant `{}`", c.name)));
            }
            match (&c.recipe, &c.matrix) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => {
                    return Err(config_err(
                        &here,
                        "exactly one of `recipe` and `matrix` must be given",
                    ))
                }
            }
        }
        match kind {
            ExperimentKind::Decay | ExperimentKind::Concentration => {
                let Some(word) = &self.word else {
                    return Err(config_err("/word", "decay experiments need a word pattern"));
                };
                if word.segments.len() != word.constants.len() + 1 {
                    return Err(config_err(
                        "/word/segments",
                        "need one more segment than constants",
                    ));
                }
                for (i, c) in word.constants.iter().enumerate() {
                    if !names.contains(&c.as_str()) {
                        return Err(config_err(
                            &format!("/word/constants/{i}"),
                            format!("unknown constant `{c}`"),
                        ));
                    }
                }
                if word.constants.is_empty() {
                    if word.segments[0].is_trivial() {
                        return Err(config_err(
                            "/word/segments/0",
                            "a word without constants must be nontrivial",
                        ));
                    }
                } else {
                    for i in 1..word.constants.len() {
                        if word.segments[i].is_trivial() {
                            return Err(config_err(
                                &format!("/word/segments/{i}"),
                                "interior unitary subwords must be nontrivial",
                            ));
                        }
                    }
                }
            }
            ExperimentKind::Asfree => {
                let Some(families) = &self.families else {
                    return Err(config_err("/families", "asfree needs families"));
                };
                if families.is_empty() {
                    return Err(config_err("/families", "need at least one family"));
                }
                let mut seen = std::collections::BTreeSet::new();
                for (i, fam) in families.iter().enumerate() {
                    if fam.is_empty() {
                        return Err(config_err(
                            &format!("/families/{i}"),
                            "family must be nonempty",
                        ));
                    }
                    for (j, name) in fam.iter().enumerate() {
                        if !names.contains(&name.as_str()) {
                            return Err(config_err(
                                &format!("/families/{i}/{j}"),
                                format!("unknown constant `{name}`"),
                            ));
                        }
                        if !seen.insert(name.clone()) {
                            return Err(config_err(
                                &format!("/families/{i}/{j}"),
                                format!("constant `{name}` used twice"),
                            ));
                        }
                    }
                }
                if self.m == 0 {
                    return Err(config_err("/m", "word length bound must be at least 1"));
                }
                match self.gamma {
                    Some(g) if g > 0.0 => {}
                    Some(_) => return Err(config_err("/gamma", "gamma must be positive")),
                    None => return Err(config_err("/gamma", "asfree needs gamma")),
                }
            }
            ExperimentKind::PolarCompare => {
                let Some(c) = &self.compare_constant else {
                    return Err(config_err(
                        "/compareConstant",
                        "polar-compare needs a constant name",
                    ));
                };
                if !names.contains(&c.as_str()) {
                    return Err(config_err(
                        "/compareConstant",
                        format!("unknown constant `{c}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The decay setup used throughout: two-point base with equal weights,
    /// word v_1 B v_2 B v_1^{-1} with a cyclic-shift constant.
    pub fn default_decay() -> Self {
        ExperimentConfig {
            algebra: two_point_base(),
            grid: vec![32, 64, 128, 256],
            trials: 100,
            epsilon: 0.1,
            norm_bound: default_norm_bound(),
            seed: None,
            constants: vec![ConstantSpec {
                name: "B".to_string(),
                recipe: Some(MatrixRecipe::CyclicShift { step: 1 }),
                matrix: None,
            }],
            word: Some(WordPattern {
                segments: vec![
                    GroupWord::generator(0),
                    GroupWord::generator(1),
                    GroupWord::new(vec![(0, true)]).expect("reduced"),
                ],
                constants: vec!["B".to_string(), "B".to_string()],
            }),
            families: None,
            m: default_m(),
            gamma: None,
            compare_constant: None,
        }
    }

    pub fn default_concentration() -> Self {
        let mut cfg = Self::default_decay();
        cfg.grid = vec![128];
        cfg.trials = 200;
        cfg
    }

    pub fn default_asfree() -> Self {
        ExperimentConfig {
            algebra: two_point_base(),
            grid: vec![128],
            trials: 100,
            epsilon: 0.1,
            norm_bound: default_norm_bound(),
            seed: None,
            constants: vec![
                ConstantSpec {
                    name: "b1".to_string(),
                    recipe: Some(MatrixRecipe::SymmetricShift { step: 1 }),
                    matrix: None,
                },
                ConstantSpec {
                    name: "b2".to_string(),
                    recipe: Some(MatrixRecipe::CosineDiagonal { freq: 1 }),
                    matrix: None,
                },
                ConstantSpec {
                    name: "c1".to_string(),
                    recipe: Some(MatrixRecipe::SymmetricShift { step: 2 }),
                    matrix: None,
                },
                ConstantSpec {
                    name: "c2".to_string(),
                    recipe: Some(MatrixRecipe::CosineDiagonal { freq: 3 }),
                    matrix: None,
                },
            ],
            word: None,
            families: Some(vec![
                vec!["b1".to_string(), "b2".to_string()],
                vec!["c1".to_string(), "c2".to_string()],
            ]),
            m: 3,
            gamma: Some(0.1),
            compare_constant: None,
        }
    }

    pub fn default_polar_compare() -> Self {
        ExperimentConfig {
            algebra: two_point_base(),
            grid: vec![64],
            trials: 1000,
            epsilon: 0.1,
            norm_bound: default_norm_bound(),
            seed: None,
            constants: vec![ConstantSpec {
                name: "B".to_string(),
                recipe: Some(MatrixRecipe::CyclicShift { step: 1 }),
                matrix: None,
            }],
            word: None,
            families: None,
            m: default_m(),
            gamma: None,
            compare_constant: Some("B".to_string()),
        }
    }
}

fn two_point_base() -> FdAlgebra {
    use crate::rational::Rational;
    use num_bigint::BigInt;
    let half = Rational::new(BigInt::from(1), BigInt::from(2));
    FdAlgebra::atomic(vec![(1, half.clone()), (1, half)]).expect("valid base")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct KSummary {
    /// Requested grid dimension.
    pub k: usize,
    /// Realized representation dimension.
    pub n: usize,
    pub trials: usize,
    pub mean: f64,
    pub max: f64,
    pub stderr: f64,
    pub success_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operator_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub k: usize,
    pub trial: usize,
    pub label: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub kind: String,
    pub seed: u64,
    pub epsilon: f64,
    /// True when some configured constant was not already in the kernel of
    /// the conditional expectation and centering was applied for it.
    pub auto_centered: bool,
    /// Human description of the per-trial statistic in `rows`.
    pub statistic: String,
    pub per_k: Vec<KSummary>,
    pub rows: Vec<SampleRow>,
    pub config: serde_json::Value,
}

impl ExperimentResult {
    /// Per-trial samples; byte-deterministic for a fixed (config, seed).
    pub fn csv(&self) -> String {
        let mut out = String::from("k,trial,label,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.k, r.trial, r.label, r.value));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "autoCentered": self.auto_centered,
            "statistic": self.statistic,
            "perK": self.per_k,
            "config": self.config,
        })
    }
}

fn thread_count() -> usize {
    std::env::var("FREEDIM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

/// Runs `f` once per trial index and returns outputs in trial order.
/// Trials own their seed streams, so the outcome does not depend on the
/// number of worker threads.
fn run_trials<T, F>(trials: usize, threads: usize, f: F) -> Result<Vec<T>, ExperimentsError>
where
    T: Send,
    F: Fn(usize) -> Result<T, ExperimentsError> + Sync,
{
    if threads <= 1 {
        return (0..trials).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T, ExperimentsError>>> =
        (0..trials).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(trials) {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= trials {
                    break;
                }
                if tx.send((i, f(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    // the earliest failing trial wins, independent of scheduling
    slots
        .into_iter()
        .map(|s| s.expect("every trial reported"))
        .collect()
}

struct BuiltConstants {
    by_name: BTreeMap<String, CMatrix>,
    auto_centered: bool,
}

fn build_constants(
    cfg: &ExperimentConfig,
    rep: &Representation,
    center: bool,
) -> Result<BuiltConstants, ExperimentsError> {
    let n = rep.total_dim();
    let mut by_name = BTreeMap::new();
    let mut auto_centered = false;
    for (i, spec) in cfg.constants.iter().enumerate() {
        let here = format!("/constants/{i}");
        let raw = if let Some(recipe) = &spec.recipe {
            recipe.build(n)
        } else {
            let value = spec.matrix.as_ref().expect("validated");
            let m = linalg::matrix_from_json(&value.to_string())
                .map_err(|e| config_err(&here, e))?;
            if m.nrows() != n {
                return Err(config_err(
                    &here,
                    format!("matrix is {}x{} but the grid realizes {}", m.nrows(), m.ncols(), n),
                ));
            }
            m
        };
        let chosen = if center {
            let centered = center_matrices(rep, std::slice::from_ref(&raw))?
                .pop()
                .expect("one input, one output");
            if linalg::frob_dist(&centered, &raw) > 1e-12 {
                auto_centered = true;
            }
            centered
        } else {
            raw
        };
        by_name.insert(spec.name.clone(), chosen);
    }
    Ok(BuiltConstants {
        by_name,
        auto_centered,
    })
}

/// Frobenius distance from `v` to the nearest matrix with the commutant's
/// block structure, plus the worst blockwise unitarity defect. Zero exactly
/// when `v` lies in the commutant unitary group.
fn commutant_residual(rep: &Representation, v: &CMatrix) -> f64 {
    let n = rep.total_dim();
    let mut structural_sq = 0.0;
    let mut unitarity: f64 = 0.0;
    let mut expected = linalg::zeros(n);
    for (l, b) in rep.algebra.blocks().iter().enumerate() {
        let c = rep.multiplicities[l];
        let base = rep.index(l, 0, 0);
        let w = v.view((base, base), (c, c)).clone_owned();
        for i in 0..b.dim {
            for s in 0..c {
                for t in 0..c {
                    expected[(rep.index(l, i, s), rep.index(l, i, t))] = w[(s, t)];
                }
            }
        }
        unitarity =
            unitarity.max(linalg::frob_dist(&(&w.adjoint() * &w), &linalg::identity(c)));
    }
    structural_sq += linalg::frob_dist(v, &expected).powi(2);
    (structural_sq.sqrt()).max(unitarity)
}

fn summary(k: usize, n: usize, stats: &[f64], epsilon: f64) -> KSummary {
    let t = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / t;
    let max = stats.iter().cloned().fold(0.0, f64::max);
    let var = if stats.len() > 1 {
        stats.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1.0)
    } else {
        0.0
    };
    let success = stats.iter().filter(|&&x| x < epsilon).count() as f64 / t;
    KSummary {
        k,
        n,
        trials: stats.len(),
        mean,
        max,
        stderr: (var / t).sqrt(),
        success_fraction: success,
        operator_fraction: None,
    }
}

/// Decay of the conditional expectation of an alternating word along the
/// grid. The per-trial statistic is the operator norm of E_k applied to the
/// evaluated word; the success fraction counts trials with statistic below
/// epsilon.
pub fn run_decay_experiment(
    cfg: &ExperimentConfig,
    kind: ExperimentKind,
    seed: u64,
) -> Result<ExperimentResult, ExperimentsError> {
    cfg.validate(kind)?;
    let word = cfg.word.as_ref().expect("validated");
    let p = word
        .segments
        .iter()
        .filter_map(GroupWord::max_generator)
        .max()
        .map_or(0, |g| g + 1)
        .max(1);
    let threads = thread_count();
    let mut per_k = Vec::new();
    let mut rows = Vec::new();
    let mut auto_centered = false;
    for (gi, &k) in cfg.grid.iter().enumerate() {
        let rep = make_representation(&cfg.algebra, k)
            .map_err(|e| config_err(&format!("/grid/{gi}"), e.to_string()))?;
        let built = build_constants(cfg, &rep, true)?;
        auto_centered |= built.auto_centered;
        let stats = run_trials(cfg.trials, threads, |trial| {
            let mut rng = rmt::stream_rng(seed, kind.label(), k as u64, trial as u64);
            let vs: Vec<CMatrix> = (0..p)
                .map(|_| haar_on_commutant(&rep, &mut rng))
                .collect::<Result<_, _>>()?;
            for v in &vs {
                assert!(commutant_residual(&rep, v) <= 1e-8);
            }
            let mut m = eval_group_word(&word.segments[0], &vs)?;
            for (i, cname) in word.constants.iter().enumerate() {
                m *= &built.by_name[cname];
                m *= eval_group_word(&word.segments[i + 1], &vs)?;
            }
            Ok(rep.cond_expect(&m)?.operator_norm())
        })?;
        for (trial, s) in stats.iter().enumerate() {
            rows.push(SampleRow {
                k,
                trial,
                label: "stat".to_string(),
                value: *s,
            });
        }
        per_k.push(summary(k, rep.total_dim(), &stats, cfg.epsilon));
    }
    Ok(ExperimentResult {
        kind: kind.label().to_string(),
        seed,
        epsilon: cfg.epsilon,
        auto_centered,
        statistic: "operator norm of E_k of the evaluated word".to_string(),
        per_k,
        rows,
        config: cfg.to_json(),
    })
}

/// Freeness with amalgamation after independent conjugation: per trial, each
/// family is conjugated by its own commutant Haar unitary, then checked as a
/// microstate against the amalgamated-free-product targets (success
/// fraction) and against the operator-valued predictions (operator
/// fraction). The per-trial statistic is the worst operator-norm deviation.
pub fn run_asfree_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentResult, ExperimentsError> {
    cfg.validate(ExperimentKind::Asfree)?;
    let families = cfg.families.as_ref().expect("validated");
    let gamma = cfg.gamma.expect("validated");
    let threads = thread_count();
    let mut per_k = Vec::new();
    let mut rows = Vec::new();
    for (gi, &k) in cfg.grid.iter().enumerate() {
        let rep = make_representation(&cfg.algebra, k)
            .map_err(|e| config_err(&format!("/grid/{gi}"), e.to_string()))?;
        let built = build_constants(cfg, &rep, false)?;
        let base: Vec<MatrixFamily> = families
            .iter()
            .enumerate()
            .map(|(i, fam)| MatrixFamily {
                id: format!("F{i}"),
                elements: fam
                    .iter()
                    .map(|name| (name.clone(), built.by_name[name].clone()))
                    .collect(),
            })
            .collect();
        let targets = freeness_targets(&rep, &base, cfg.m)?;
        // conditional expectations are invariant under commutant
        // conjugation, so the freeness predictions are shared by all trials
        let predictions = freeness_predictions(&rep, &base, cfg.m)?;
        let outcomes = run_trials(cfg.trials, threads, |trial| {
            let mut rng = rmt::stream_rng(seed, "asfree", k as u64, trial as u64);
            let mut conjugated = base.clone();
            for fam in conjugated.iter_mut() {
                let v = haar_on_commutant(&rep, &mut rng)?;
                assert!(commutant_residual(&rep, &v) <= 1e-8);
                for (_, x) in fam.elements.iter_mut() {
                    *x = v.adjoint() * (&*x) * &v;
                }
            }
            // conjugation leaves the families' own traces untouched
            for (fam, orig) in conjugated.iter().zip(&base) {
                let (_, a) = &fam.elements[0];
                let (_, b) = &fam.elements[fam.elements.len() - 1];
                let (_, a0) = &orig.elements[0];
                let (_, b0) = &orig.elements[orig.elements.len() - 1];
                let got = linalg::normalized_trace(&(a * b));
                let want = linalg::normalized_trace(&(a0 * b0));
                assert!((got - want).norm() <= 1e-12);
            }
            let tuples: Vec<(String, CMatrix)> = conjugated
                .iter()
                .flat_map(|fam| fam.elements.iter().cloned())
                .collect();
            let scalar_pass =
                microstate_check(&rep, &tuples, &targets, cfg.m, gamma, cfg.norm_bound)?;
            let verdict = mg_free_check_against(&rep, &conjugated, &predictions, cfg.m, gamma)?;
            Ok((verdict.max_deviation, scalar_pass, verdict.pass))
        })?;
        let stats: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
        for (trial, (dev, scalar, op)) in outcomes.iter().enumerate() {
            rows.push(SampleRow {
                k,
                trial,
                label: "dev".to_string(),
                value: *dev,
            });
            rows.push(SampleRow {
                k,
                trial,
                label: "pass".to_string(),
                value: f64::from(u8::from(*scalar)),
            });
            rows.push(SampleRow {
                k,
                trial,
                label: "oppass".to_string(),
                value: f64::from(u8::from(*op)),
            });
        }
        let scalar_fraction =
            outcomes.iter().filter(|o| o.1).count() as f64 / outcomes.len() as f64;
        let op_fraction = outcomes.iter().filter(|o| o.2).count() as f64 / outcomes.len() as f64;
        let mut s = summary(k, rep.total_dim(), &stats, gamma);
        s.success_fraction = scalar_fraction;
        s.operator_fraction = Some(op_fraction);
        per_k.push(s);
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Asfree.label().to_string(),
        seed,
        epsilon: cfg.epsilon,
        auto_centered: false,
        statistic: "worst operator-norm deviation from freeness predictions".to_string(),
        per_k,
        rows,
        config: cfg.to_json(),
    })
}

/// Scalar microstate targets for the amalgamated free product of the
/// families' own distributions: every word of length at most `m` over all
/// letters, keyed by space-joined letter names.
fn freeness_targets(
    rep: &Representation,
    families: &[MatrixFamily],
    m: usize,
) -> Result<BTreeMap<String, C64>, ExperimentsError> {
    let mut sources = Vec::with_capacity(families.len());
    for fam in families {
        let elements: BTreeMap<String, CMatrix> = fam.elements.iter().cloned().collect();
        sources.push(Source::constant_matrices(&fam.id, rep.clone(), elements)?);
    }
    let letters: Vec<(String, String)> = families
        .iter()
        .flat_map(|fam| {
            fam.elements
                .iter()
                .map(|(name, _)| (fam.id.clone(), name.clone()))
        })
        .collect();
    let mut targets = BTreeMap::new();
    let mut stack: Vec<Vec<usize>> = letters.iter().enumerate().map(|(i, _)| vec![i]).collect();
    while let Some(idx) = stack.pop() {
        let mut w = NCWord::new();
        let mut key = Vec::new();
        for &i in &idx {
            let (src, name) = &letters[i];
            w = w.letter(src, name);
            key.push(name.clone());
        }
        let value = amalg_moment(&sources, &rep.algebra, &w)?;
        targets.insert(key.join(" "), rep.algebra.trace(&value));
        if idx.len() < m {
            for i in 0..letters.len() {
                let mut next = idx.clone();
                next.push(i);
                stack.push(next);
            }
        }
    }
    Ok(targets)
}

/// Two-sampler comparison: word-moment means of the compressed polar
/// sampler against plain commutant Haar, for the words V, V^2 and V B V* B.
/// Rows carry every sampled trace component; the per-k success fraction is
/// the share of word components whose means agree within three combined
/// standard errors.
pub fn run_polar_compare(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentResult, ExperimentsError> {
    cfg.validate(ExperimentKind::PolarCompare)?;
    let cname = cfg.compare_constant.as_ref().expect("validated");
    let threads = thread_count();
    let mut per_k = Vec::new();
    let mut rows = Vec::new();
    let mut auto_centered = false;
    const WORDS: [&str; 3] = ["v", "vv", "vbvb"];
    for (gi, &k) in cfg.grid.iter().enumerate() {
        let rep = make_representation(&cfg.algebra, k)
            .map_err(|e| config_err(&format!("/grid/{gi}"), e.to_string()))?;
        let built = build_constants(cfg, &rep, true)?;
        auto_centered |= built.auto_centered;
        let b = &built.by_name[cname];
        let mut sampled: Vec<Vec<Vec<C64>>> = Vec::new();
        for (si, sampler) in ["haar", "polar"].iter().enumerate() {
            let label = format!("{}.{}", ExperimentKind::PolarCompare.label(), sampler);
            let trials = run_trials(cfg.trials, threads, |trial| {
                let mut rng = rmt::stream_rng(seed, &label, k as u64, trial as u64);
                let v = if si == 0 {
                    haar_on_commutant(&rep, &mut rng)?
                } else {
                    compressed_polar_unitary(&rep, &mut rng)?
                };
                assert!(commutant_residual(&rep, &v) <= 1e-8);
                Ok([
                    linalg::normalized_trace(&v),
                    linalg::normalized_trace(&(&v * &v)),
                    linalg::normalized_trace(&(&v * b * v.adjoint() * b)),
                ])
            })?;
            let mut per_word = vec![Vec::with_capacity(cfg.trials); WORDS.len()];
            for (trial, ms) in trials.iter().enumerate() {
                for (w, z) in ms.iter().enumerate() {
                    per_word[w].push(*z);
                    rows.push(SampleRow {
                        k,
                        trial,
                        label: format!("{}.{}.re", sampler, WORDS[w]),
                        value: z.re,
                    });
                    rows.push(SampleRow {
                        k,
                        trial,
                        label: format!("{}.{}.im", sampler, WORDS[w]),
                        value: z.im,
                    });
                }
            }
            sampled.push(per_word);
        }
        let t = cfg.trials as f64;
        let mut checks = 0usize;
        let mut passes = 0usize;
        let mut worst_z: f64 = 0.0;
        let mut worst_gap: f64 = 0.0;
        let mut worst_sigma: f64 = 0.0;
        for w in 0..WORDS.len() {
            for part in [|z: &C64| z.re, |z: &C64| z.im] {
                let xs: Vec<f64> = sampled[0][w].iter().map(part).collect();
                let ys: Vec<f64> = sampled[1][w].iter().map(part).collect();
                let mx = xs.iter().sum::<f64>() / t;
                let my = ys.iter().sum::<f64>() / t;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (t - 1.0).max(1.0);
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (t - 1.0).max(1.0);
                let sigma = ((vx + vy) / t).sqrt().max(1e-15);
                let gap = (mx - my).abs();
                checks += 1;
                if gap <= 3.0 * sigma {
                    passes += 1;
                }
                if gap / sigma > worst_z {
                    worst_z = gap / sigma;
                    worst_gap = gap;
                    worst_sigma = sigma;
                }
            }
        }
        per_k.push(KSummary {
            k,
            n: rep.total_dim(),
            trials: cfg.trials,
            mean: worst_z,
            max: worst_gap,
            stderr: worst_sigma,
            success_fraction: passes as f64 / checks as f64,
            operator_fraction: None,
        });
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::PolarCompare.label().to_string(),
        seed,
        epsilon: cfg.epsilon,
        auto_centered,
        statistic: "worst standardized gap between sampler word-moment means".to_string(),
        per_k,
        rows,
        config: cfg.to_json(),
    })
}

pub fn run_experiment(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentResult, ExperimentsError> {
    match kind {
        ExperimentKind::Decay | ExperimentKind::Concentration => {
            run_decay_experiment(cfg, kind, seed)
        }
        ExperimentKind::Asfree => run_asfree_experiment(cfg, seed),
        ExperimentKind::PolarCompare => run_polar_compare(cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_decay() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_decay();
        cfg.grid = vec![16, 32];
        cfg.trials = 16;
        cfg.epsilon = 0.5;
        cfg
    }

    #[test]
    fn config_validation_reports_pointers() {
        let mut cfg = small_decay();
        cfg.trials = 0;
        let err = cfg.validate(ExperimentKind::Decay).unwrap_err();
        assert!(matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/trials"));

        let mut cfg = small_decay();
        cfg.grid = vec![32, 32];
        let err = cfg.validate(ExperimentKind::Decay).unwrap_err();
        assert!(matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/grid"));

        let mut cfg = small_decay();
        cfg.word.as_mut().unwrap().constants[0] = "missing".to_string();
        let err = cfg.validate(ExperimentKind::Decay).unwrap_err();
        assert!(
            matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/word/constants/0")
        );

        let mut cfg = small_decay();
        cfg.word.as_mut().unwrap().segments[1] = GroupWord::empty();
        let err = cfg.validate(ExperimentKind::Decay).unwrap_err();
        assert!(
            matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/word/segments/1")
        );

        let cfg = small_decay();
        let err = cfg.validate(ExperimentKind::Asfree).unwrap_err();
        assert!(matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/families"));

        let mut cfg = ExperimentConfig::default_asfree();
        cfg.gamma = None;
        let err = cfg.validate(ExperimentKind::Asfree).unwrap_err();
        assert!(matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/gamma"));

        let mut cfg = ExperimentConfig::default_polar_compare();
        cfg.compare_constant = Some("nope".to_string());
        let err = cfg.validate(ExperimentKind::PolarCompare).unwrap_err();
        assert!(
            matches!(err, ExperimentsError::Config { ref pointer, .. } if pointer == "/compareConstant")
        );

        // unknown fields are schema errors, not silently dropped
        assert!(ExperimentConfig::from_json(r#"{"algebra": {}, "grid": [8], "trial": 1}"#).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        for cfg in [
            ExperimentConfig::default_decay(),
            ExperimentConfig::default_concentration(),
            ExperimentConfig::default_asfree(),
            ExperimentConfig::default_polar_compare(),
        ] {
            let s = cfg.to_json().to_string();
            let back = ExperimentConfig::from_json(&s).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn decay_statistic_shrinks_along_the_grid() {
        let cfg = small_decay();
        let res = run_decay_experiment(&cfg, ExperimentKind::Decay, 41).unwrap();
        assert_eq!(res.per_k.len(), 2);
        assert!(res.per_k[1].mean < res.per_k[0].mean);
        assert_eq!(res.per_k[0].success_fraction, 1.0);
        assert!(!res.auto_centered, "cyclic shift is already centered");
        assert!(res.per_k.iter().all(|s| s.mean <= s.max));
        // pure unitary word, no constants
        let mut cfg = small_decay();
        cfg.trials = 32;
        cfg.word = Some(WordPattern {
            segments: vec![GroupWord::generator(0)],
            constants: vec![],
        });
        let res = run_decay_experiment(&cfg, ExperimentKind::Decay, 42).unwrap();
        assert!(res.per_k[1].mean < res.per_k[0].mean);
    }

    #[test]
    fn determinism_and_thread_independence() {
        let cfg = small_decay();
        let a = run_decay_experiment(&cfg, ExperimentKind::Decay, 7).unwrap();
        let b = run_decay_experiment(&cfg, ExperimentKind::Decay, 7).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.per_k, b.per_k);
        let c = run_decay_experiment(&cfg, ExperimentKind::Decay, 8).unwrap();
        assert_ne!(a.rows, c.rows);

        // the trial runner gives identical output regardless of threads
        let serial = run_trials(9, 1, |i| Ok(i * i)).unwrap();
        let parallel = run_trials(9, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn asfree_families_pass_at_moderate_size() {
        let mut cfg = ExperimentConfig::default_asfree();
        cfg.grid = vec![64];
        cfg.trials = 12;
        let res = run_asfree_experiment(&cfg, 19).unwrap();
        let s = &res.per_k[0];
        assert!(s.success_fraction >= 0.8, "fraction {}", s.success_fraction);
        assert!(s.operator_fraction.unwrap() >= 0.8);
        assert!(s.mean > 0.0 && s.mean < 0.1);

        // single family: conjugation cannot move its own trace moments
        let mut cfg = ExperimentConfig::default_asfree();
        cfg.grid = vec![48];
        cfg.trials = 8;
        cfg.families = Some(vec![vec!["b1".to_string(), "b2".to_string()]]);
        cfg.constants.truncate(2);
        cfg.gamma = Some(1e-6);
        let res = run_asfree_experiment(&cfg, 23).unwrap();
        assert_eq!(res.per_k[0].success_fraction, 1.0);
    }

    #[test]
    fn polar_compare_agrees() {
        let mut cfg = ExperimentConfig::default_polar_compare();
        cfg.grid = vec![32];
        cfg.trials = 300;
        let res = run_polar_compare(&cfg, 31).unwrap();
        let s = &res.per_k[0];
        assert_eq!(s.success_fraction, 1.0, "worst z {}", s.mean);
        assert_eq!(res.rows.len(), 2 * 300 * 6);
        let again = run_polar_compare(&cfg, 31).unwrap();
        assert_eq!(res.csv(), again.csv());
    }

    #[test]
    fn csv_has_stable_shape() {
        let mut cfg = small_decay();
        cfg.grid = vec![16];
        cfg.trials = 3;
        let res = run_decay_experiment(&cfg, ExperimentKind::Decay, 1).unwrap();
        let csv = res.csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("k,trial,label,value"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("16,0,stat,"));
        assert_eq!(csv.lines().count(), 1 + 3);
        let json = res.to_json();
        assert_eq!(json["kind"], "decay");
        assert_eq!(json["perK"][0]["trials"], 3);
        assert!(json.get("rows").is_none());
    }
}

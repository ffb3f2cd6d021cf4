//! Seeded random-matrix sampling: complex Ginibre matrices, Haar unitaries,
//! Haar measure on the commutant of an embedded algebra, and the compressed
//! polar construction that reproduces the commutant Haar law from corners of
//! a single Ginibre sample.
//!
//! Every random quantity is drawn from a stream derived deterministically
//! from a master seed and a (label, k, trial) coordinate, so runs replay
//! bit-for-bit and trials may be evaluated in any order or in parallel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::algebra::{AlgebraError, Representation};
use crate::linalg::{self, C64, CMatrix, LinalgError};

#[derive(Debug, Error)]
pub enum RmtError {
    #[error("word uses generator {index} but only {count} unitaries were supplied")]
    GeneratorOutOfRange { index: usize, count: usize },
    #[error("unitaries must be square and share one dimension")]
    SizeMismatch,
    #[error("cannot evaluate a word over an empty list of unitaries")]
    NoUnitaries,
    #[error("group word is not reduced at position {0}")]
    Unreduced(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(acc: u64, word: u64) -> u64 {
    let mut s = acc ^ word.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    splitmix64(&mut s)
}

/// Independent, reproducible stream for one `(label, k, trial)` cell of an
/// experiment. Distinct coordinates give unrelated ChaCha keys; identical
/// coordinates replay the identical stream.
pub fn stream_rng(master: u64, label: &str, k: u64, trial: u64) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut acc = master;
    acc = mix(acc, h);
    acc = mix(acc, k);
    acc = mix(acc, trial);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut acc).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// n x n matrix of independent complex Gaussians with mean zero and entry
/// variance 1/n (real and imaginary parts each of variance 1/2n).
pub fn ginibre(n: usize, rng: &mut impl Rng) -> CMatrix {
    assert!(n >= 1, "ginibre needs a positive dimension");
    let sd = 1.0 / (2.0 * n as f64).sqrt();
    CMatrix::from_fn(n, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * sd, im * sd)
    })
}

/// Haar-distributed c x c unitary: Ginibre, then QR with the column phases
/// fixed so R has positive diagonal, which makes the factorization unique
/// and the law exactly Haar.
pub fn haar_unitary(c: usize, rng: &mut impl Rng) -> Result<CMatrix, RmtError> {
    let g = ginibre(c, rng);
    let u = linalg::phase_fixed_q(&g)?;
    debug_assert!(linalg::frob_dist(&(&u.adjoint() * &u), &linalg::identity(c)) <= 1e-10);
    Ok(u)
}

/// Haar sample from the unitary group of the commutant of `rep`'s embedded
/// algebra: one independent Haar unitary per block, repeated along that
/// block's matrix dimension.
pub fn haar_on_commutant(rep: &Representation, rng: &mut impl Rng) -> Result<CMatrix, RmtError> {
    let n = rep.total_dim();
    let mut out = linalg::zeros(n);
    for (l, b) in rep.algebra.blocks().iter().enumerate() {
        let c = rep.multiplicities[l];
        let w = haar_unitary(c, rng)?;
        for i in 0..b.dim {
            for s in 0..c {
                for t in 0..c {
                    out[(rep.index(l, i, s), rep.index(l, i, t))] = w[(s, t)];
                }
            }
        }
    }
    Ok(out)
}

/// Commutant unitary built from a single Ginibre sample: per block, the
/// leading corner compression is rescaled by the inverse square root of its
/// trace weight and its polar factor is repeated along the block. The result
/// is again Haar on the commutant, which is the content of the two-sampler
/// agreement checks.
pub fn compressed_polar_unitary(
    rep: &Representation,
    rng: &mut impl Rng,
) -> Result<CMatrix, RmtError> {
    let n = rep.total_dim();
    let z = ginibre(n, rng);
    let mut out = linalg::zeros(n);
    for (l, b) in rep.algebra.blocks().iter().enumerate() {
        let c = rep.multiplicities[l];
        let alpha = c as f64 / n as f64;
        let base = rep.index(l, 0, 0);
        // rows (l, 0, 0..c) are contiguous, so the compression by the
        // block's leading matrix unit is a plain corner of z
        let y_block = z.view((base, base), (c, c)).clone_owned()
            * C64::new(alpha.sqrt().recip(), 0.0);
        let v = linalg::polar_unitary(&y_block)?;
        for i in 0..b.dim {
            for s in 0..c {
                for t in 0..c {
                    out[(rep.index(l, i, s), rep.index(l, i, t))] = v[(s, t)];
                }
            }
        }
    }
    Ok(out)
}

/// Reduced word in the free group on finitely many generators. Letters are
/// `(generator index, inverted)` pairs; adjacent letters never cancel.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<(usize, bool)>", into = "Vec<(usize, bool)>")]
pub struct GroupWord {
    letters: Vec<(usize, bool)>,
}

impl GroupWord {
    pub fn new(letters: Vec<(usize, bool)>) -> Result<Self, RmtError> {
        for (p, pair) in letters.windows(2).enumerate() {
            if pair[0].0 == pair[1].0 && pair[0].1 != pair[1].1 {
                return Err(RmtError::Unreduced(p + 1));
            }
        }
        Ok(GroupWord { letters })
    }

    pub fn empty() -> Self {
        GroupWord { letters: Vec::new() }
    }

    /// The single-letter word in generator `index`.
    pub fn generator(index: usize) -> Self {
        GroupWord {
            letters: vec![(index, false)],
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.letters.is_empty()
    }

    pub fn letters(&self) -> &[(usize, bool)] {
        &self.letters
    }

    /// Largest generator index used, if any.
    pub fn max_generator(&self) -> Option<usize> {
        self.letters.iter().map(|&(i, _)| i).max()
    }
}

impl TryFrom<Vec<(usize, bool)>> for GroupWord {
    type Error = RmtError;
    fn try_from(letters: Vec<(usize, bool)>) -> Result<Self, Self::Error> {
        GroupWord::new(letters)
    }
}

impl From<GroupWord> for Vec<(usize, bool)> {
    fn from(w: GroupWord) -> Self {
        w.letters
    }
}

/// Product of the listed unitaries (or adjoints) along the word. The empty
/// word gives the identity of the common dimension.
pub fn eval_group_word(g: &GroupWord, unitaries: &[CMatrix]) -> Result<CMatrix, RmtError> {
    let Some(first) = unitaries.first() else {
        return Err(RmtError::NoUnitaries);
    };
    let n = first.nrows();
    if unitaries.iter().any(|u| u.nrows() != n || u.ncols() != n) {
        return Err(RmtError::SizeMismatch);
    }
    let mut acc = linalg::identity(n);
    for &(idx, inv) in g.letters() {
        let u = unitaries.get(idx).ok_or(RmtError::GeneratorOutOfRange {
            index: idx,
            count: unitaries.len(),
        })?;
        acc = if inv { acc * u.adjoint() } else { acc * u };
    }
    Ok(acc)
}

/// Projects each matrix onto the kernel of the conditional expectation:
/// x - embed(E(x)). Outputs have conditional expectation zero.
pub fn center_matrices(rep: &Representation, xs: &[CMatrix]) -> Result<Vec<CMatrix>, RmtError> {
    xs.iter()
        .map(|x| {
            let e = rep.cond_expect(x)?;
            Ok(x - rep.embed(&e)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{DElement, FdAlgebra};
    use crate::rational::Rational;
    use num_bigint::BigInt;

    fn rat(p: i64, q: i64) -> Rational {
        Rational::new(BigInt::from(p), BigInt::from(q))
    }

    fn two_block_rep() -> Representation {
        let d = FdAlgebra::atomic(vec![(1, rat(1, 2)), (1, rat(1, 2))]).unwrap();
        Representation::new(d, vec![32, 32]).unwrap()
    }

    fn matrix_units(rep: &Representation) -> Vec<DElement> {
        let mut out = Vec::new();
        for (l, b) in rep.algebra.blocks().iter().enumerate() {
            for i in 0..b.dim {
                for j in 0..b.dim {
                    let mut d = rep.algebra.zero_element();
                    d.blocks[l][(i, j)] = C64::new(1.0, 0.0);
                    out.push(d);
                }
            }
        }
        out
    }

    #[test]
    fn seed_streams_replay_and_separate() {
        let mut a = stream_rng(7, "decay", 64, 3);
        let mut b = stream_rng(7, "decay", 64, 3);
        let first: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let second: Vec<u64> = (0..8).map(|_| b.random()).collect();
        assert_eq!(first, second);
        for (label, k, trial) in [("decay", 64, 4), ("decay", 65, 3), ("asfree", 64, 3)] {
            let mut c = stream_rng(7, label, k, trial);
            let other: Vec<u64> = (0..8).map(|_| c.random()).collect();
            assert_ne!(first, other);
        }
        let mut d = stream_rng(8, "decay", 64, 3);
        let other: Vec<u64> = (0..8).map(|_| d.random()).collect();
        assert_ne!(first, other);
    }

    #[test]
    fn ginibre_first_and_second_moments() {
        let n = 64;
        let trials = 500;
        let mut rng = stream_rng(11, "ginibre-moments", n as u64, 0);
        let mut tr = Vec::with_capacity(trials);
        let mut tr_sq = Vec::with_capacity(trials);
        let mut tr_zz = Vec::with_capacity(trials);
        for _ in 0..trials {
            let z = ginibre(n, &mut rng);
            tr.push(linalg::normalized_trace(&z));
            tr_sq.push(linalg::normalized_trace(&(&z * &z)));
            tr_zz.push(linalg::normalized_trace(&(&z * z.adjoint())).re);
        }
        let three_sigma = |xs: &[f64], center: f64| {
            let t = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / t;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1.0);
            (mean - center).abs() <= 3.0 * (var / t).sqrt()
        };
        let re: Vec<f64> = tr.iter().map(|z| z.re).collect();
        let im: Vec<f64> = tr.iter().map(|z| z.im).collect();
        assert!(three_sigma(&re, 0.0) && three_sigma(&im, 0.0));
        let re2: Vec<f64> = tr_sq.iter().map(|z| z.re).collect();
        let im2: Vec<f64> = tr_sq.iter().map(|z| z.im).collect();
        assert!(three_sigma(&re2, 0.0) && three_sigma(&im2, 0.0));
        assert!(three_sigma(&tr_zz, 1.0));
    }

    #[test]
    fn haar_unitary_law_checks() {
        // c = 1 is a uniform phase; the mean of 2000 phases stays within
        // 3/sqrt(2000) of zero
        let mut rng = stream_rng(3, "haar-phase", 1, 0);
        let mut sum = C64::new(0.0, 0.0);
        let trials = 2000;
        for _ in 0..trials {
            let u = haar_unitary(1, &mut rng).unwrap();
            sum += u[(0, 0)];
            assert!((u[(0, 0)].norm() - 1.0).abs() <= 1e-12);
        }
        assert!((sum / trials as f64).norm() <= 3.0 / (trials as f64).sqrt());

        let mut rng = stream_rng(3, "haar-trace", 8, 0);
        let mut traces = Vec::with_capacity(trials);
        for _ in 0..trials {
            let u = haar_unitary(8, &mut rng).unwrap();
            assert!(linalg::frob_dist(&(&u.adjoint() * &u), &linalg::identity(8)) <= 1e-10);
            traces.push(linalg::normalized_trace(&u));
        }
        let t = trials as f64;
        let mean_re = traces.iter().map(|z| z.re).sum::<f64>() / t;
        let mean_im = traces.iter().map(|z| z.im).sum::<f64>() / t;
        let var = traces
            .iter()
            .map(|z| (z.re - mean_re).powi(2) + (z.im - mean_im).powi(2))
            .sum::<f64>()
            / (t - 1.0);
        let stderr = (var / t).sqrt();
        assert!((mean_re.powi(2) + mean_im.powi(2)).sqrt() <= 3.0 * stderr);
    }

    #[test]
    fn commutant_samples_commute_and_replicate_blocks() {
        let d = FdAlgebra::atomic(vec![(2, rat(1, 2)), (1, rat(1, 2))]).unwrap();
        let rep = Representation::new(d, vec![3, 5]).unwrap();
        let n = rep.total_dim();
        let mut rng = stream_rng(21, "commutant", n as u64, 0);
        for _ in 0..4 {
            let v = haar_on_commutant(&rep, &mut rng).unwrap();
            assert!(linalg::frob_dist(&(&v.adjoint() * &v), &linalg::identity(n)) <= 1e-10);
            for unit in matrix_units(&rep) {
                let e = rep.embed(&unit).unwrap();
                assert!(linalg::frob_norm(&(&v * &e - &e * &v)) <= 1e-10);
            }
            // the first block repeats one 3x3 unitary along its two copies
            for s in 0..3 {
                for t in 0..3 {
                    assert_eq!(
                        v[(rep.index(0, 0, s), rep.index(0, 0, t))],
                        v[(rep.index(0, 1, s), rep.index(0, 1, t))]
                    );
                }
            }
            // cross-copy entries vanish identically
            assert_eq!(v[(rep.index(0, 0, 0), rep.index(0, 1, 0))], C64::new(0.0, 0.0));
        }
    }

    #[test]
    fn commutant_trace_centering_two_blocks() {
        let rep = two_block_rep();
        let trials = 2000;
        let mut rng = stream_rng(5, "commutant-trace", 64, 0);
        let mut traces = Vec::with_capacity(trials);
        for _ in 0..trials {
            let v = haar_on_commutant(&rep, &mut rng).unwrap();
            traces.push(linalg::normalized_trace(&v));
        }
        let t = trials as f64;
        let mean_re = traces.iter().map(|z| z.re).sum::<f64>() / t;
        let mean_im = traces.iter().map(|z| z.im).sum::<f64>() / t;
        let var = traces
            .iter()
            .map(|z| (z.re - mean_re).powi(2) + (z.im - mean_im).powi(2))
            .sum::<f64>()
            / (t - 1.0);
        let stderr = (var / t).sqrt().max(1e-12);
        assert!((mean_re.powi(2) + mean_im.powi(2)).sqrt() <= 3.0 * stderr);
    }

    #[test]
    fn compressed_polar_lands_in_the_commutant() {
        let d = FdAlgebra::atomic(vec![(2, rat(1, 2)), (1, rat(1, 2))]).unwrap();
        let rep = Representation::new(d, vec![3, 5]).unwrap();
        let n = rep.total_dim();
        let mut rng = stream_rng(9, "polar", n as u64, 0);
        for _ in 0..4 {
            let v = compressed_polar_unitary(&rep, &mut rng).unwrap();
            assert!(linalg::frob_dist(&(&v.adjoint() * &v), &linalg::identity(n)) <= 1e-8);
            for unit in matrix_units(&rep) {
                let e = rep.embed(&unit).unwrap();
                assert!(linalg::frob_norm(&(&v * &e - &e * &v)) <= 1e-8);
            }
        }
    }

    #[test]
    fn two_samplers_agree_on_word_moments() {
        let rep = two_block_rep();
        let n = rep.total_dim();
        let raw = CMatrix::from_fn(n, n, |i, j| {
            C64::new(
                ((i + 2 * j) % 7) as f64 / 8.0 - 0.375,
                ((3 * i + j) % 5) as f64 / 8.0 - 0.25,
            )
        });
        let b = &center_matrices(&rep, &[raw]).unwrap()[0];
        let trials = 1000;
        let stats = |label: &str, polar: bool| {
            let mut per_word = vec![Vec::with_capacity(trials); 3];
            for trial in 0..trials {
                let mut rng = stream_rng(17, label, n as u64, trial as u64);
                let v = if polar {
                    compressed_polar_unitary(&rep, &mut rng).unwrap()
                } else {
                    haar_on_commutant(&rep, &mut rng).unwrap()
                };
                per_word[0].push(linalg::normalized_trace(&v));
                per_word[1].push(linalg::normalized_trace(&(&v * &v)));
                per_word[2].push(linalg::normalized_trace(&(&v * b * v.adjoint() * b)));
            }
            per_word
        };
        let haar = stats("two-sampler-haar", false);
        let polar = stats("two-sampler-polar", true);
        for w in 0..3 {
            for part in [|z: &C64| z.re, |z: &C64| z.im] {
                let t = trials as f64;
                let xs: Vec<f64> = haar[w].iter().map(part).collect();
                let ys: Vec<f64> = polar[w].iter().map(part).collect();
                let mx = xs.iter().sum::<f64>() / t;
                let my = ys.iter().sum::<f64>() / t;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (t - 1.0);
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (t - 1.0);
                let sigma = ((vx + vy) / t).sqrt().max(1e-12);
                assert!(
                    (mx - my).abs() <= 3.0 * sigma,
                    "word {w}: |{mx} - {my}| > 3 * {sigma}"
                );
            }
        }
    }

    #[test]
    fn polar_eigenphases_look_uniform() {
        // scalar base: the commutant is everything, so the polar sample is a
        // plain Haar unitary and its eigenphases pool to a uniform law
        let rep = Representation::new(FdAlgebra::scalar(), vec![64]).unwrap();
        let mut phases = Vec::new();
        for trial in 0..200 {
            let mut rng = stream_rng(29, "ks", 64, trial);
            let v = compressed_polar_unitary(&rep, &mut rng).unwrap();
            for ev in linalg::unitary_eigenvalues(&v) {
                assert!((ev.norm() - 1.0).abs() <= 1e-8);
                phases.push((ev.im.atan2(ev.re) + std::f64::consts::PI)
                    / (2.0 * std::f64::consts::PI));
            }
        }
        phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = phases.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, p) in phases.iter().enumerate() {
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((p - lo).abs()).max((hi - p).abs());
        }
        // 1% Kolmogorov-Smirnov critical value; eigenvalue repulsion only
        // makes the pooled sample more uniform than iid
        assert!(ks * n.sqrt() <= 1.6276, "ks statistic {ks}");
    }

    #[test]
    fn group_words_reduce_and_evaluate() {
        assert!(matches!(
            GroupWord::new(vec![(0, false), (0, true)]),
            Err(RmtError::Unreduced(1))
        ));
        let w = GroupWord::new(vec![(0, false), (1, false)]).unwrap();
        let mut rng = stream_rng(1, "words", 4, 0);
        let u = haar_unitary(4, &mut rng).unwrap();
        let v = haar_unitary(4, &mut rng).unwrap();
        let prod = eval_group_word(&w, &[u.clone(), v.clone()]).unwrap();
        assert_eq!(prod, &u * &v);
        let id = eval_group_word(&GroupWord::empty(), &[u.clone()]).unwrap();
        assert_eq!(id, linalg::identity(4));
        // u u^-1 via two words multiplies back to the identity
        let w = GroupWord::new(vec![(0, false), (1, false), (0, true)]).unwrap();
        let prod = eval_group_word(&w, &[u.clone(), linalg::identity(4)]).unwrap();
        assert!(linalg::frob_dist(&prod, &linalg::identity(4)) <= 1e-12);
        assert!(matches!(
            eval_group_word(&GroupWord::generator(2), &[u.clone()]),
            Err(RmtError::GeneratorOutOfRange { index: 2, count: 1 })
        ));
        assert!(matches!(
            eval_group_word(&GroupWord::empty(), &[]),
            Err(RmtError::NoUnitaries)
        ));
        let json = serde_json::to_string(&w).unwrap();
        let back: GroupWord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
        assert!(serde_json::from_str::<GroupWord>("[[0,false],[0,true]]").is_err());
    }

    #[test]
    fn centering_kills_conditional_expectation() {
        let d = FdAlgebra::atomic(vec![(2, rat(3, 4)), (1, rat(1, 4))]).unwrap();
        let rep = Representation::new(d, vec![2, 3]).unwrap();
        let n = rep.total_dim();
        // an embedded element centers to exactly zero
        let mut el = rep.algebra.zero_element();
        el.blocks[0][(0, 1)] = C64::new(0.5, -0.25);
        el.blocks[1][(0, 0)] = C64::new(-1.0, 0.0);
        let x = rep.embed(&el).unwrap();
        let centered = center_matrices(&rep, &[x]).unwrap();
        assert!(linalg::frob_norm(&centered[0]) <= 1e-13);
        // generic matrices center to the kernel and stay there
        let x = CMatrix::from_fn(n, n, |i, j| C64::new((i as f64) / 4.0, (j as f64) / 8.0));
        let once = center_matrices(&rep, &[x]).unwrap();
        assert!(rep.cond_expect(&once[0]).unwrap().max_abs() <= 1e-12);
        let twice = center_matrices(&rep, &once).unwrap();
        assert!(linalg::frob_dist(&once[0], &twice[0]) <= 1e-14);
    }
}

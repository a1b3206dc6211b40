//! Delay-dependent stability certificate for the reduced error dynamics
//! `Theta' = Psi Theta(t) + Psi1 Theta(t - tau(t))`.
//!
//! A certificate is a triple `(Q, S, H)` of positive definite matrices that
//! makes the block matrix
//!
//! ```text
//! [ U^2 Psi'Q Psi - Q + S + Psi'H + H Psi   U^2 Psi'Q Psi1 + H Psi1        Q ]
//! [ *                                       U^2 Psi1'Q Psi1 - (1 - d) S    0 ]
//! [ *                                       *                             -Q ]
//! ```
//!
//! negative definite. The search is a heuristic: failing to find a
//! certificate proves nothing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Definiteness margin required of certificates.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (deviation {0:e})")]
    Asymmetric(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiProblem {
    pub psi: DMatrix<f64>,
    pub psi1: DMatrix<f64>,
    /// Delay bound `U` (s).
    pub bound: f64,
    /// Delay-derivative bound `d`.
    pub derivative_bound: f64,
}

impl LmiProblem {
    pub fn new(psi: DMatrix<f64>, psi1: DMatrix<f64>, bound: f64, derivative_bound: f64) -> Result<Self, StabilityError> {
        if !psi.is_square() || psi.shape() != psi1.shape() || psi.nrows() == 0 {
            return Err(StabilityError::InvalidProblem(format!(
                "system matrices must be square and equal in size, got {:?} and {:?}",
                psi.shape(),
                psi1.shape()
            )));
        }
        if psi.iter().chain(psi1.iter()).any(|v| !v.is_finite()) {
            return Err(StabilityError::NonFinite);
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(StabilityError::InvalidProblem(format!("delay bound {bound} must be positive")));
        }
        if !(derivative_bound > 0.0 && derivative_bound < 1.0) {
            return Err(StabilityError::InvalidProblem(format!(
                "derivative bound {derivative_bound} must lie in (0, 1)"
            )));
        }
        Ok(Self { psi, psi1, bound, derivative_bound })
    }

    /// Scalar system `x' = a x + b x(t - tau)`.
    pub fn scalar(a: f64, b: f64, bound: f64, derivative_bound: f64) -> Result<Self, StabilityError> {
        Self::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b), bound, derivative_bound)
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() / scale
}

/// Builds the `3m x 3m` block matrix for candidate `(Q, S, H)`.
pub fn assemble(
    problem: &LmiProblem,
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>, StabilityError> {
    let m = problem.dim();
    for (name, x) in [("Q", q), ("S", s), ("H", h)] {
        if x.shape() != (m, m) {
            return Err(StabilityError::InvalidCertificate(format!("{name} is {:?}, expected {m}x{m}", x.shape())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(StabilityError::NonFinite);
        }
        let dev = asymmetry(x);
        if dev > 1e-12 {
            return Err(StabilityError::InvalidCertificate(format!("{name} is asymmetric by {dev:e}")));
        }
    }
    let u2 = problem.bound * problem.bound;
    let psi = &problem.psi;
    let psi1 = &problem.psi1;
    let psi_t = psi.transpose();
    let psi1_t = psi1.transpose();

    let t11 = &psi_t * q * psi * u2 - q + s + &psi_t * h + h * psi;
    let t12 = &psi_t * q * psi1 * u2 + h * psi1;
    let t22 = &psi1_t * q * psi1 * u2 - s * (1.0 - problem.derivative_bound);

    let mut out = DMatrix::zeros(3 * m, 3 * m);
    out.view_mut((0, 0), (m, m)).copy_from(&t11);
    out.view_mut((0, m), (m, m)).copy_from(&t12);
    out.view_mut((m, 0), (m, m)).copy_from(&t12.transpose());
    out.view_mut((m, m), (m, m)).copy_from(&t22);
    out.view_mut((0, 2 * m), (m, m)).copy_from(q);
    out.view_mut((2 * m, 0), (m, m)).copy_from(q);
    out.view_mut((2 * m, 2 * m), (m, m)).copy_from(&(-q));
    // Blocks built from symmetric inputs are symmetric up to rounding.
    Ok((&out + out.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Definiteness {
    pub negative_definite: bool,
    /// Largest eigenvalue of the symmetrized matrix.
    pub margin: f64,
    /// Whether the Cholesky test reached the same verdict as the eigenvalues.
    pub factorization_agrees: bool,
}

/// True iff the largest eigenvalue of `sym(M)` is below `-tol`.
///
/// A Cholesky factorization of `-M - tol I` gives the fast verdict; the
/// symmetric eigendecomposition supplies the margin and decides when the
/// two disagree near the boundary.
pub fn is_negative_definite(m: &DMatrix<f64>, tol: f64) -> Result<Definiteness, StabilityError> {
    if !m.is_square() {
        return Err(StabilityError::InvalidProblem(format!("matrix is {:?}, not square", m.shape())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::NonFinite);
    }
    let dev = asymmetry(m);
    if dev > 1e-10 {
        return Err(StabilityError::Asymmetric(dev));
    }
    let sym = (m + m.transpose()) * 0.5;
    let n = sym.nrows();
    let shifted = -&sym - DMatrix::identity(n, n) * tol;
    let by_factor = shifted.cholesky().is_some();
    let margin = sym.symmetric_eigenvalues().max();
    let by_eigen = margin < -tol;
    Ok(Definiteness { negative_definite: by_eigen, margin, factorization_agrees: by_factor == by_eigen })
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigenvalues().min()
}

fn max_eigen(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigenvalues().max()
}

/// Solves `A'X + XA = C` by a dense Kronecker-product linear solve.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = a.nrows();
    let eye = DMatrix::<f64>::identity(m, m);
    let at = a.transpose();
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = big.lu().solve(&rhs)?;
    let x = DMatrix::from_column_slice(m, m, x.as_slice());
    let x = (&x + x.transpose()) * 0.5;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmiCertificate {
    #[serde(serialize_with = "rows")]
    pub q: DMatrix<f64>,
    #[serde(serialize_with = "rows")]
    pub s: DMatrix<f64>,
    #[serde(serialize_with = "rows")]
    pub h: DMatrix<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateCheck {
    pub valid: bool,
    pub margin: f64,
    pub min_eigen_q: f64,
    pub min_eigen_s: f64,
    pub min_eigen_h: f64,
}

/// Re-checks a certificate from scratch: `Q, S, H` positive definite and the
/// assembled matrix negative definite with margin below `-tol`.
pub fn verify(problem: &LmiProblem, cert: &LmiCertificate, tol: f64) -> Result<CertificateCheck, StabilityError> {
    let m = assemble(problem, &cert.q, &cert.s, &cert.h)?;
    let def = is_negative_definite(&m, tol)?;
    let (mq, ms, mh) = (min_eigen(&cert.q), min_eigen(&cert.s), min_eigen(&cert.h));
    Ok(CertificateCheck {
        valid: def.negative_definite && mq > 0.0 && ms > 0.0 && mh > 0.0,
        margin: def.margin,
        min_eigen_q: mq,
        min_eigen_s: ms,
        min_eigen_h: mh,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBudget {
    pub random_starts: usize,
    pub refine_rounds: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { random_starts: 8, refine_rounds: 60, seed: 7, tol: DEFAULT_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InconclusiveReport {
    /// Best normalized margin reached (non-negative or not below `-tol`).
    pub best_margin: f64,
    pub candidates_tried: usize,
    pub note: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SearchOutcome {
    Certified(LmiCertificate),
    Inconclusive(InconclusiveReport),
}

impl SearchOutcome {
    pub fn certificate(&self) -> Option<&LmiCertificate> {
        match self {
            SearchOutcome::Certified(c) => Some(c),
            SearchOutcome::Inconclusive(_) => None,
        }
    }
}

fn rows<S: serde::Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(m.nrows()))?;
    for r in m.row_iter() {
        seq.serialize_element(&r.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}

/// Log-scale range explored for `Q` and `S` relative to `H`.
const LOG_SCALE_LIMIT: f64 = 15.0;

struct Base {
    q: DMatrix<f64>,
    s: DMatrix<f64>,
    h: DMatrix<f64>,
}

impl Base {
    fn at(&self, a: f64, b: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let q = &self.q * a.exp();
        let s = &self.s * b.exp();
        let scale = max_eigen(&q).max(max_eigen(&s)).max(max_eigen(&self.h));
        (q / scale, s / scale, &self.h / scale)
    }

    /// Largest eigenvalue of the assembled matrix with the triple normalized
    /// to unit spectral radius.
    fn objective(&self, problem: &LmiProblem, a: f64, b: f64) -> f64 {
        let (q, s, h) = self.at(a, b);
        match assemble(problem, &q, &s, &h) {
            Ok(m) => max_eigen(&m),
            Err(_) => f64::INFINITY,
        }
    }
}

fn random_gram(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let f = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    &f * f.transpose() + DMatrix::identity(m, m) * 0.1
}

fn bases(problem: &LmiProblem, budget: &SearchBudget) -> Vec<Base> {
    let m = problem.dim();
    let eye = DMatrix::<f64>::identity(m, m);
    let mut out = vec![Base { q: eye.clone(), s: eye.clone(), h: eye.clone() }];
    for a in [problem.psi.clone(), &problem.psi + &problem.psi1] {
        if let Some(h) = solve_lyapunov(&a, &(-&eye)) {
            if min_eigen(&h) > 0.0 {
                out.push(Base { q: eye.clone(), s: eye.clone(), h });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    for _ in 0..budget.random_starts {
        let q = random_gram(&mut rng, m);
        let s = random_gram(&mut rng, m);
        let h = random_gram(&mut rng, m);
        out.push(Base { q, s, h });
    }
    out
}

/// Coordinate descent on the log-scales of `Q` and `S`.
fn refine(problem: &LmiProblem, base: &Base, rounds: usize) -> (f64, f64, f64) {
    let (mut a, mut b) = (0.0, 0.0);
    let mut best = base.objective(problem, a, b);
    // Coarse sweep first so the descent starts in the right basin.
    for &ga in &[-8.0, -4.0, -2.0, 0.0, 2.0] {
        for &gb in &[-8.0, -4.0, -2.0, 0.0, 2.0] {
            let f = base.objective(problem, ga, gb);
            if f < best {
                (a, b, best) = (ga, gb, f);
            }
        }
    }
    let mut step = 1.0;
    for _ in 0..rounds {
        let mut improved = false;
        for (da, db) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (na, nb) = (a + da, b + db);
            if na.abs() > LOG_SCALE_LIMIT || nb.abs() > LOG_SCALE_LIMIT {
                continue;
            }
            let f = base.objective(problem, na, nb);
            if f < best {
                (a, b, best) = (na, nb, f);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-4 {
                break;
            }
        }
    }
    (a, b, best)
}

/// Multistart search for a certificate.
///
/// Starting triples are the identity, Lyapunov solutions for `Psi` and
/// `Psi + Psi1` as `H`, and seeded random Gram matrices. Each is refined by
/// coordinate descent over the relative scales of `Q` and `S`; the first one
/// that re-verifies is returned.
pub fn search_certificate(problem: &LmiProblem, budget: &SearchBudget) -> SearchOutcome {
    let candidates = bases(problem, budget);
    let mut best_margin = f64::INFINITY;
    for base in &candidates {
        let (a, b, margin) = refine(problem, base, budget.refine_rounds);
        best_margin = best_margin.min(margin);
        if margin < -budget.tol {
            let (q, s, h) = base.at(a, b);
            let mut cert = LmiCertificate { q, s, h, margin };
            if let Ok(check) = verify(problem, &cert, budget.tol) {
                if check.valid {
                    cert.margin = check.margin;
                    return SearchOutcome::Certified(cert);
                }
            }
        }
    }
    SearchOutcome::Inconclusive(InconclusiveReport {
        best_margin,
        candidates_tried: candidates.len(),
        note: "no certificate found; this does not prove instability",
    })
}

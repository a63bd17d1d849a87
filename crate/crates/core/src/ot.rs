//! Primal-form optimal transport: cost matrices, the proximal Sinkhorn
//! solver, a brute-force assignment value for small problems, and the
//! mini-batch transport loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Kernel rows or columns summing below this are treated as underflowed.
const UNDERFLOW_FLOOR: f64 = 1e-300;
/// Plan entries at or below this contribute nothing to the entropy.
const ENTROPY_FLOOR: f64 = 1e-300;
const SIMPLEX_TOL: f64 = 1e-9;
/// Largest `n` accepted by [`exact_assignment_cost`] (8! = 40320 permutations).
pub const MAX_ENUMERATION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Cosine,
    /// Supplied directly by the caller (e.g. read from a file).
    Given,
}

/// Non-negative `n x m` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Tensor,
    metric: CostMetric,
}

impl CostMatrix {
    pub fn new(values: Tensor, metric: CostMetric) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::contract(format!(
                "cost matrix must be 2-D, got shape {:?}",
                values.shape()
            )));
        }
        if let Some(i) = values.data().iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
            let cols = values.cols();
            return Err(Error::domain(
                "cost matrix",
                format!(
                    "entry ({}, {}) = {} is not a finite non-negative number",
                    i / cols,
                    i % cols,
                    values.data()[i]
                ),
            ));
        }
        Ok(CostMatrix { values, metric })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, CostMetric::Given)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn metric(&self) -> CostMetric {
        self.metric
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.transpose(),
            metric: self.metric,
        }
    }

    pub fn scaled(&self, s: f64) -> Result<CostMatrix> {
        CostMatrix::new(self.values.map(|c| c * s), self.metric)
    }
}

/// `C_ij = 1 - cos(teacher_i, student_j)`, clipped into `[0, 2]` to absorb
/// rounding.
pub fn cosine_cost(teacher: &Tensor, student: &Tensor) -> Result<CostMatrix> {
    if teacher.shape().len() != 2 || student.shape().len() != 2 || teacher.cols() != student.cols()
    {
        return Err(Error::Shape {
            op: "cosine_cost",
            left: teacher.shape().to_vec(),
            right: student.shape().to_vec(),
        });
    }
    let t = teacher.normalize_rows()?;
    let s = student.normalize_rows()?;
    let sim = t.matmul(&s.transpose())?;
    CostMatrix::new(sim.map(|c| (1.0 - c).clamp(0.0, 2.0)), CostMetric::Cosine)
}

/// How the entropic weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    Absolute(f64),
    /// Multiple of the mean cost entry, so the kernel is scale-free.
    RelativeToMeanCost(f64),
}

impl Epsilon {
    pub fn resolve(&self, cost: &CostMatrix) -> Result<f64> {
        let eps = match *self {
            Epsilon::Absolute(e) => e,
            Epsilon::RelativeToMeanCost(r) => r * cost.mean(),
        };
        if eps > 0.0 && eps.is_finite() {
            Ok(eps)
        } else {
            Err(Error::domain(
                "epsilon",
                format!("resolved entropic weight {eps} is not positive ({self:?})"),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    /// Proximal (outer) rounds.
    pub outer_iters: usize,
    /// Scaling sweeps per outer round.
    pub inner_iters: usize,
    /// Early exit once both marginal residuals fall below this; zero runs
    /// the full iteration budget.
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: Epsilon::RelativeToMeanCost(0.01),
            outer_iters: 50,
            inner_iters: 25,
            marginal_tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let eps_ok = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::RelativeToMeanCost(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return Err(Error::contract(format!("epsilon must be positive: {:?}", self.epsilon)));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::contract("outer_iters and inner_iters must be at least 1"));
        }
        if !(self.marginal_tol >= 0.0) {
            return Err(Error::contract("marginal_tol must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub pi: Tensor,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Effective entropic weight used.
    pub epsilon: f64,
    pub outer_iters_used: usize,
    pub inner_iters_used: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    /// False when the iteration budget ran out before `marginal_tol`.
    pub converged: bool,
}

impl TransportPlan {
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    pub fn entropy(&self) -> f64 {
        entropy_term(&self.pi)
    }

    /// `<pi, C>`.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.pi
            .data()
            .iter()
            .zip(cost.values().data())
            .map(|(p, c)| p * c)
            .sum()
    }
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_simplex(name: &str, w: &[f64], len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::contract(format!(
            "marginal {name} has length {}, expected {len}",
            w.len()
        )));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::contract(format!("marginal {name} has a negative or non-finite entry")));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::contract(format!("marginal {name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Proximal-point Sinkhorn.
///
/// Starting from `sigma = 1/m`, `pi = 1 1^T` and kernel `A = exp(-C/eps)`, each
/// outer round forms `Q = A .* pi`, runs `inner_iters` alternating scalings
///
/// ```text
/// delta = mu / (n Q sigma),   sigma = nu / (m Q^T delta)
/// ```
///
/// and sets `pi = diag(delta) Q diag(sigma)`. Here `mu = n u` and `nu = m v`
/// are the count-scaled marginals, so the `1/n` factors return the plan to
/// the probability simplex. Returns the plan and `W = <pi, C>`.
pub fn solve_transport(
    cost: &CostMatrix,
    u: &[f64],
    v: &[f64],
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, f64)> {
    cfg.validate()?;
    let (n, m) = (cost.rows(), cost.cols());
    check_simplex("u", u, n)?;
    check_simplex("v", v, m)?;
    let eps = cfg.epsilon.resolve(cost)?;

    let c = cost.values().data();
    let kernel: Vec<f64> = c.iter().map(|&cij| (-cij / eps).exp()).collect();
    check_kernel(&kernel, n, m, eps)?;

    let (nf, mf) = (n as f64, m as f64);
    let mu: Vec<f64> = u.iter().map(|x| x * nf).collect();
    let nu: Vec<f64> = v.iter().map(|x| x * mf).collect();

    let mut sigma = vec![1.0 / mf; m];
    let mut delta = vec![0.0; n];
    let mut pi = vec![1.0; n * m];
    let mut q = vec![0.0; n * m];
    let mut outer_used = 0;
    let mut inner_used = 0;
    let (mut row_res, mut col_res) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;

    for _ in 0..cfg.outer_iters {
        outer_used += 1;
        for ((qij, aij), pij) in q.iter_mut().zip(&kernel).zip(&pi) {
            *qij = aij * pij;
        }
        for _ in 0..cfg.inner_iters {
            inner_used += 1;
            for (i, d) in delta.iter_mut().enumerate() {
                let row = &q[i * m..(i + 1) * m];
                let qs: f64 = row.iter().zip(&sigma).map(|(a, b)| a * b).sum();
                if !(qs > 0.0 && qs.is_finite()) {
                    return Err(Error::SolverUnderflow(format!(
                        "row {i} of the scaled kernel vanished (epsilon = {eps:e})"
                    )));
                }
                *d = mu[i] / (nf * qs);
            }
            let mut qtd = vec![0.0; m];
            for (row, d) in q.chunks_exact(m).zip(&delta) {
                for (acc, qij) in qtd.iter_mut().zip(row) {
                    *acc += qij * d;
                }
            }
            for (j, (s, t)) in sigma.iter_mut().zip(&qtd).enumerate() {
                if !(*t > 0.0 && t.is_finite()) {
                    return Err(Error::SolverUnderflow(format!(
                        "column {j} of the scaled kernel vanished (epsilon = {eps:e})"
                    )));
                }
                *s = nu[j] / (mf * t);
            }
        }
        for (i, (prow, qrow)) in pi.chunks_exact_mut(m).zip(q.chunks_exact(m)).enumerate() {
            for ((p, qij), s) in prow.iter_mut().zip(qrow).zip(&sigma) {
                *p = delta[i] * qij * s;
            }
        }
        (row_res, col_res) = residuals(&pi, u, v, m);
        if row_res < cfg.marginal_tol && col_res < cfg.marginal_tol {
            converged = true;
            break;
        }
    }

    let pi = Tensor::matrix(n, m, pi);
    let w = pi.data().iter().zip(c).map(|(p, cij)| p * cij).sum::<f64>();
    let plan = TransportPlan {
        pi,
        u: u.to_vec(),
        v: v.to_vec(),
        epsilon: eps,
        outer_iters_used: outer_used,
        inner_iters_used: inner_used,
        row_residual: row_res,
        col_residual: col_res,
        converged,
    };
    Ok((plan, w))
}

fn check_kernel(kernel: &[f64], n: usize, m: usize, eps: f64) -> Result<()> {
    for (i, row) in kernel.chunks_exact(m).enumerate() {
        if row.iter().sum::<f64>() < UNDERFLOW_FLOOR {
            return Err(Error::SolverUnderflow(format!(
                "row {i} of exp(-C/epsilon) sums below {UNDERFLOW_FLOOR:e} at epsilon = {eps:e}"
            )));
        }
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| kernel[i * m + j]).sum();
        if s < UNDERFLOW_FLOOR {
            return Err(Error::SolverUnderflow(format!(
                "column {j} of exp(-C/epsilon) sums below {UNDERFLOW_FLOOR:e} at epsilon = {eps:e}"
            )));
        }
    }
    Ok(())
}

fn residuals(pi: &[f64], u: &[f64], v: &[f64], m: usize) -> (f64, f64) {
    let row = pi
        .chunks_exact(m)
        .zip(u)
        .map(|(r, ui)| (r.iter().sum::<f64>() - ui).abs())
        .fold(0.0, f64::max);
    let mut cols = vec![0.0; m];
    for r in pi.chunks_exact(m) {
        for (acc, p) in cols.iter_mut().zip(r) {
            *acc += p;
        }
    }
    let col = cols
        .iter()
        .zip(v)
        .map(|(s, vj)| (s - vj).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// Unregularized transport cost between two uniform `n`-point measures:
/// `(1/n) min_p sum_i C[i, p(i)]` over all permutations (Heap's algorithm).
pub fn exact_assignment_cost(cost: &CostMatrix) -> Result<f64> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::contract(format!(
            "assignment needs a square cost matrix, got {}x{}",
            n,
            cost.cols()
        )));
    }
    if n > MAX_ENUMERATION {
        return Err(Error::contract(format!(
            "refusing to enumerate {n}! permutations (limit n <= {MAX_ENUMERATION})"
        )));
    }
    let c = cost.values();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = eval(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// `sum pi_ij log pi_ij`, with zero entries contributing nothing.
pub fn entropy_term(pi: &Tensor) -> f64 {
    pi.data()
        .iter()
        .filter(|&&p| p > ENTROPY_FLOOR)
        .map(|&p| p * p.ln())
        .sum()
}

/// Norms below this are treated as zero when normalizing features on the
/// tape.
pub const NORM_FLOOR: f64 = 1e-12;

/// Cosine cost recorded on the tape: `1 - norm(teacher) norm(student)^T`.
///
/// Unlike [`cosine_cost`], an all-zero row (a dead relu embedding) is not an
/// error here: it has zero similarity to everything, so cost 1.
pub fn cosine_cost_var<'t>(teacher: Var<'t>, student: Var<'t>) -> Result<Var<'t>> {
    let t = teacher.normalize_rows_floored(NORM_FLOOR);
    let s = student.normalize_rows_floored(NORM_FLOOR);
    Ok(t.matmul(s.t()?)?.neg().shift(1.0))
}

pub struct LcktOutput<'t> {
    pub loss: Var<'t>,
    pub plan: TransportPlan,
}

/// Mini-batch transport loss `<pi, C(teacher, student)>` with uniform
/// marginals.
///
/// The plan is solved from the current cost values outside the tape and then
/// enters as a constant, so the gradient reaches `student` only through `C`.
pub fn lckt_loss<'t>(
    teacher: &Tensor,
    student: Var<'t>,
    cfg: &SinkhornConfig,
) -> Result<LcktOutput<'t>> {
    let tape: &'t Tape = student.tape();
    let s_shape = student.shape();
    if teacher.shape() != s_shape.as_slice() {
        return Err(Error::Shape {
            op: "lckt_loss",
            left: teacher.shape().to_vec(),
            right: s_shape,
        });
    }
    let t = tape.constant(teacher.clone());
    let c = cosine_cost_var(t, student)?;
    let cost = CostMatrix::new(c.value().map(|x| x.clamp(0.0, 2.0)), CostMetric::Cosine)?;
    let n = cost.rows();
    let (plan, _) = solve_transport(&cost, &uniform(n), &uniform(cost.cols()), cfg)?;
    let pi = tape.constant(plan.pi.clone());
    let loss = c.mul(pi)?.sum();
    Ok(LcktOutput { loss, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use wcord_oracles as oracle;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn rows_of(c: &CostMatrix) -> Vec<Vec<f64>> {
        (0..c.rows()).map(|i| c.values().row(i).to_vec()).collect()
    }

    #[test]
    fn cosine_cost_examples() {
        let e1 = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let e2 = Tensor::matrix(1, 2, vec![0.0, 1.0]);
        let neg = Tensor::matrix(1, 2, vec![-3.0, 0.0]);
        assert_eq!(cosine_cost(&e1, &e1).unwrap().values().item(), 0.0);
        assert_eq!(cosine_cost(&e1, &e2).unwrap().values().item(), 1.0);
        assert_eq!(cosine_cost(&e1, &neg).unwrap().values().item(), 2.0);
        let scaled = Tensor::matrix(1, 2, vec![2.5, 0.0]);
        assert_eq!(cosine_cost(&e1, &scaled).unwrap().values().item(), 0.0);
    }

    #[test]
    fn cosine_cost_zero_row_is_reported() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let err = cosine_cost(&t, &t).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn cosine_cost_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cosine_cost(&random_features(&mut rng, 6, 5), &random_features(&mut rng, 4, 5)).unwrap();
        assert_eq!((c.rows(), c.cols()), (6, 4));
        assert!(c.values().data().iter().all(|x| (0.0..=2.0).contains(x)));
    }

    #[test]
    fn single_atom_plan() {
        let c = CostMatrix::from_rows(&[vec![0.3]]).unwrap();
        let (plan, w) = solve_transport(&c, &[1.0], &[1.0], &SinkhornConfig::default()).unwrap();
        assert_eq!(plan.pi.data(), &[1.0]);
        assert!((w - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_cost_gives_zero_w() {
        let c = CostMatrix::new(Tensor::zeros(&[4, 4]), CostMetric::Given).unwrap();
        let cfg = SinkhornConfig {
            epsilon: Epsilon::Absolute(0.1),
            ..Default::default()
        };
        let (plan, w) = solve_transport(&c, &uniform(4), &uniform(4), &cfg).unwrap();
        assert_eq!(w, 0.0);
        assert!(plan.max_residual() < 1e-12);
    }

    #[test]
    fn zero_cost_with_relative_epsilon_is_a_domain_error() {
        let c = CostMatrix::new(Tensor::zeros(&[2, 2]), CostMetric::Given).unwrap();
        let err = solve_transport(&c, &uniform(2), &uniform(2), &SinkhornConfig::default());
        assert!(matches!(err, Err(Error::Domain { .. })));
    }

    #[test]
    fn random_5x5_close_to_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let c = cosine_cost(&random_features(&mut rng, 5, 3), &random_features(&mut rng, 5, 3)).unwrap();
            let exact = oracle::assignment_lexicographic(&rows_of(&c));
            let (_, w) = solve_transport(&c, &uniform(5), &uniform(5), &SinkhornConfig::default()).unwrap();
            assert!((w - exact).abs() <= 0.05 * exact.max(1e-12) + 1e-9, "{w} vs {exact}");
        }
    }

    #[test]
    fn underflow_is_reported() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![800.0, 900.0]]).unwrap();
        let cfg = SinkhornConfig {
            epsilon: Epsilon::Absolute(1.0),
            ..Default::default()
        };
        let err = solve_transport(&c, &uniform(2), &uniform(2), &cfg).unwrap_err();
        assert!(matches!(err, Error::SolverUnderflow(_)));
        assert!(err.to_string().contains("increase epsilon"));
    }

    #[test]
    fn bad_marginals_rejected() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let cfg = SinkhornConfig::default();
        assert!(solve_transport(&c, &[0.7, 0.7], &uniform(2), &cfg).is_err());
        assert!(solve_transport(&c, &uniform(3), &uniform(2), &cfg).is_err());
        let bad = SinkhornConfig {
            outer_iters: 0,
            ..cfg
        };
        assert!(solve_transport(&c, &uniform(2), &uniform(2), &bad).is_err());
    }

    #[test]
    fn non_uniform_marginals_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cosine_cost(&random_features(&mut rng, 3, 4), &random_features(&mut rng, 5, 4)).unwrap();
        let u = [0.5, 0.3, 0.2];
        let v = [0.1, 0.1, 0.2, 0.3, 0.3];
        let cfg = SinkhornConfig {
            epsilon: Epsilon::RelativeToMeanCost(0.1),
            ..Default::default()
        };
        let (plan, _) = solve_transport(&c, &u, &v, &cfg).unwrap();
        assert!(plan.max_residual() < 1e-4, "{plan:?}");
    }

    #[test]
    fn assignment_examples() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(exact_assignment_cost(&c).unwrap(), 0.0);
        let c = CostMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(exact_assignment_cost(&c).unwrap(), 0.0);
        let big = CostMatrix::new(Tensor::zeros(&[9, 9]), CostMetric::Given).unwrap();
        assert!(exact_assignment_cost(&big).is_err());
        let rect = CostMatrix::new(Tensor::zeros(&[2, 3]), CostMetric::Given).unwrap();
        assert!(exact_assignment_cost(&rect).is_err());
    }

    #[test]
    fn assignment_matches_two_enumeration_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=6 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            let c = CostMatrix::from_rows(&rows).unwrap();
            let got = exact_assignment_cost(&c).unwrap();
            let a = oracle::assignment_lexicographic(&rows);
            let b = oracle::assignment_by_swaps(&rows);
            assert!((a - b).abs() < 1e-12);
            assert!((got - a).abs() < 1e-12, "n={n}: {got} vs {a}");
        }
    }

    #[test]
    fn entropy_examples() {
        let n = 4;
        let uniform_plan = Tensor::full(&[n, n], 1.0 / (n * n) as f64);
        assert!((entropy_term(&uniform_plan) + 2.0 * (n as f64).ln()).abs() < 1e-12);
        let mut det = Tensor::zeros(&[3, 3]);
        det.data_mut()[4] = 1.0;
        assert_eq!(entropy_term(&det), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let direct: f64 = p.iter().map(|x| x * x.ln()).sum();
        assert!((entropy_term(&Tensor::matrix(3, 4, p)) - direct).abs() < 1e-12);
    }

    #[test]
    fn lckt_single_pair_is_the_cost() {
        let tape = Tape::new();
        let t = Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]);
        let s = tape.param(Tensor::matrix(1, 3, vec![-0.3, 1.0, 2.0]));
        let out = lckt_loss(&t, s, &SinkhornConfig::default()).unwrap();
        let c = cosine_cost(&t, &s.value()).unwrap().values().item();
        assert!((out.loss.value().item() - c).abs() < 1e-15);
    }

    #[test]
    fn lckt_self_transport_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_features(&mut rng, 8, 6);
        let tape = Tape::new();
        let s = tape.param(h.clone());
        let out = lckt_loss(&h, s, &SinkhornConfig::default()).unwrap();
        assert!(out.loss.value().item() <= 0.05);
    }

    #[test]
    fn lckt_plan_is_outside_the_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random_features(&mut rng, 5, 4);
        let tape = Tape::new();
        let s = tape.param(random_features(&mut rng, 5, 4));
        let before = tape.len();
        let out = lckt_loss(&h, s, &SinkhornConfig::default()).unwrap();
        // teacher constant, two normalizations, transpose, matmul, neg, shift,
        // plan constant, product, sum: no solver iterations are recorded.
        assert_eq!(tape.len() - before, 10);
        let g = tape.backward(out.loss).unwrap();
        assert_eq!(g.tracked_count(), tape.len() - before - 2);
    }
}

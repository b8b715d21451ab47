//! Local cost functions and the augmented-Lagrangian subproblem solver.
//!
//! Every variant asks each agent to minimize
//!
//! ```text
//! f_i(x) + λᵀx + ½ (x − z)ᵀ P (x − z)
//! ```
//!
//! with `P = ρI` ([`local_solve`]) or a fixed symmetric positive-definite
//! metric ([`local_solve_metric`]). Objectives with a closed-form minimizer
//! report it through [`LocalObjective::augmented_minimizer`]; everything else
//! goes through a damped Newton iteration with Armijo backtracking.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, is_symmetric_pd, spd_solve};

/// Proximal term of the augmented subproblem.
#[derive(Debug, Clone, Copy)]
pub enum Penalty<'a> {
    None,
    Scaled(f64),
    Metric(&'a DMatrix<f64>),
}

impl Penalty<'_> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Penalty::None => DVector::zeros(v.len()),
            Penalty::Scaled(rho) => v * *rho,
            Penalty::Metric(b) => *b * v,
        }
    }

    fn add_to(&self, h: &mut DMatrix<f64>) {
        match self {
            Penalty::None => {}
            Penalty::Scaled(rho) => {
                for i in 0..h.nrows() {
                    h[(i, i)] += *rho;
                }
            }
            Penalty::Metric(b) => *h += *b,
        }
    }

    fn matrix(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        self.add_to(&mut m);
        m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Convexity {
    pub convex: bool,
    pub strongly_convex: bool,
    /// Strong-convexity modulus.
    pub mu: Option<f64>,
    /// Gradient Lipschitz constant.
    pub lipschitz: Option<f64>,
}

pub trait LocalObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn convexity(&self) -> Convexity {
        Convexity::default()
    }

    /// Closed-form minimizer of `f(x) + λᵀx + ½‖x − z‖²_P`, if one is known.
    fn augmented_minimizer(
        &self,
        _lambda: &DVector<f64>,
        _z: &DVector<f64>,
        _penalty: Penalty<'_>,
    ) -> Option<DVector<f64>> {
        None
    }

    /// Starting point for centralized reference solves.
    fn initial_guess(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }
}

mod dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(DVector::from_vec)
    }
}

/// `½‖x − ζ‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    #[serde(with = "dvector_serde")]
    pub target: DVector<f64>,
}

impl QuadraticObjective {
    pub fn new(target: DVector<f64>) -> Self {
        Self { target }
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x - &self.target).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x - &self.target
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim(), self.dim()))
    }

    fn convexity(&self) -> Convexity {
        Convexity {
            convex: true,
            strongly_convex: true,
            mu: Some(1.0),
            lipschitz: Some(1.0),
        }
    }

    fn augmented_minimizer(
        &self,
        lambda: &DVector<f64>,
        z: &DVector<f64>,
        penalty: Penalty<'_>,
    ) -> Option<DVector<f64>> {
        match penalty {
            Penalty::None => Some(&self.target - lambda),
            Penalty::Scaled(rho) => Some((&self.target + z * rho - lambda) / (1.0 + rho)),
            Penalty::Metric(b) => {
                let n = self.dim();
                let lhs = DMatrix::identity(n, n) + b;
                spd_solve(&lhs, &(&self.target + b * z - lambda)).ok()
            }
        }
    }

    fn initial_guess(&self) -> DVector<f64> {
        self.target.clone()
    }
}

/// Quadratic model `½(w − c)ᵀB(w − c) + gᵀ(w − c)` around a center `c`.
///
/// Used as the per-agent surrogate when the consensus QP is solved by the
/// decentralized first-order iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub center: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
}

impl QuadraticModel {
    pub fn new(center: DVector<f64>, hessian: DMatrix<f64>, gradient: DVector<f64>) -> Result<Self> {
        let n = center.len();
        check_dim("model gradient", &gradient, n)?;
        if hessian.shape() != (n, n) || !is_symmetric_pd(&hessian) {
            return Err(Error::InvalidInput(
                "model Hessian must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            center,
            hessian,
            gradient,
        })
    }
}

impl LocalObjective for QuadraticModel {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        0.5 * d.dot(&(&self.hessian * &d)) + self.gradient.dot(&d)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (x - &self.center) + &self.gradient
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.hessian.clone())
    }

    fn convexity(&self) -> Convexity {
        let eig = self.hessian.clone().symmetric_eigen().eigenvalues;
        Convexity {
            convex: true,
            strongly_convex: true,
            mu: Some(eig.min()),
            lipschitz: Some(eig.max()),
        }
    }

    fn augmented_minimizer(
        &self,
        lambda: &DVector<f64>,
        z: &DVector<f64>,
        penalty: Penalty<'_>,
    ) -> Option<DVector<f64>> {
        let lhs = &self.hessian + penalty.matrix(self.dim());
        let rhs = &self.hessian * &self.center - &self.gradient - lambda + penalty.apply(z);
        spd_solve(&lhs, &rhs).ok()
    }

    fn initial_guess(&self) -> DVector<f64> {
        self.center.clone()
    }
}

/// Sensor-allocation cost on `x = [a; b]` with blocks of equal length:
///
/// ```text
/// ½‖a − ζ^α‖² + ½‖b − ζ^β‖² + Σ_j ((a_j − b_j)² − ζ^σ_j)²
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorObjective {
    #[serde(with = "dvector_serde")]
    pub alpha: DVector<f64>,
    #[serde(with = "dvector_serde")]
    pub beta: DVector<f64>,
    #[serde(with = "dvector_serde")]
    pub sigma: DVector<f64>,
}

impl SensorObjective {
    pub fn new(alpha: DVector<f64>, beta: DVector<f64>, sigma: DVector<f64>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.len() != sigma.len() {
            return Err(Error::InvalidInput(format!(
                "sensor blocks differ in length: {} / {} / {}",
                alpha.len(),
                beta.len(),
                sigma.len()
            )));
        }
        Ok(Self { alpha, beta, sigma })
    }

    fn block(&self) -> usize {
        self.alpha.len()
    }
}

impl LocalObjective for SensorObjective {
    fn dim(&self) -> usize {
        2 * self.block()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let m = self.block();
        (0..m)
            .map(|j| {
                let (a, b) = (x[j], x[m + j]);
                let d = a - b;
                let coupling = d * d - self.sigma[j];
                0.5 * ((a - self.alpha[j]).powi(2) + (b - self.beta[j]).powi(2)) + coupling * coupling
            })
            .sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.block();
        let mut g = DVector::zeros(2 * m);
        for j in 0..m {
            let (a, b) = (x[j], x[m + j]);
            let d = a - b;
            let h1 = 4.0 * d * (d * d - self.sigma[j]);
            g[j] = a - self.alpha[j] + h1;
            g[m + j] = b - self.beta[j] - h1;
        }
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let m = self.block();
        let mut h = DMatrix::identity(2 * m, 2 * m);
        for j in 0..m {
            let d = x[j] - x[m + j];
            let h2 = 12.0 * d * d - 4.0 * self.sigma[j];
            h[(j, j)] += h2;
            h[(m + j, m + j)] += h2;
            h[(j, m + j)] -= h2;
            h[(m + j, j)] -= h2;
        }
        Some(h)
    }

    fn initial_guess(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, self.block()).copy_from(&self.alpha);
        v.rows_mut(self.block(), self.block()).copy_from(&self.beta);
        v
    }
}

/// Serializable objective variants stored in a [`ProblemInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Quadratic(QuadraticObjective),
    Sensor(SensorObjective),
}

impl Objective {
    fn inner(&self) -> &dyn LocalObjective {
        match self {
            Objective::Quadratic(q) => q,
            Objective::Sensor(s) => s,
        }
    }
}

impl LocalObjective for Objective {
    fn dim(&self) -> usize {
        self.inner().dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.inner().value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner().gradient(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner().hessian(x)
    }
    fn convexity(&self) -> Convexity {
        self.inner().convexity()
    }
    fn augmented_minimizer(
        &self,
        lambda: &DVector<f64>,
        z: &DVector<f64>,
        penalty: Penalty<'_>,
    ) -> Option<DVector<f64>> {
        self.inner().augmented_minimizer(lambda, z, penalty)
    }
    fn initial_guess(&self) -> DVector<f64> {
        self.inner().initial_guess()
    }
}

/// Optimal primal-dual pair `(z*, λ*)` with `λ_i* = −∇f_i(z*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub z: DVector<f64>,
    pub lambdas: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    ConvexLs,
    Sensor,
    Custom,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::ConvexLs => "convex_ls",
            ProblemKind::Sensor => "sensor",
            ProblemKind::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    pub seed: Option<u64>,
    objectives: Vec<Objective>,
    dim: usize,
    reference: Option<ReferenceSolution>,
}

impl ProblemInstance {
    pub fn new(kind: ProblemKind, seed: Option<u64>, objectives: Vec<Objective>) -> Result<Self> {
        let dim = objectives
            .first()
            .map(|o| o.dim())
            .ok_or_else(|| Error::InvalidInput("a problem needs at least one agent".into()))?;
        if let Some(i) = objectives.iter().position(|o| o.dim() != dim) {
            return Err(Error::InvalidInput(format!(
                "objective {i} has dimension {}, expected {dim}",
                objectives[i].dim()
            )));
        }
        Ok(Self {
            kind,
            seed,
            objectives,
            dim,
            reference: None,
        })
    }

    pub fn with_reference(mut self, reference: ReferenceSolution) -> Result<Self> {
        check_dim("reference z", &reference.z, self.dim)?;
        if reference.lambdas.len() != self.agent_count() {
            return Err(Error::InvalidInput("reference duals do not match agent count".into()));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn objectives(&self) -> &[Objective] {
        &self.objectives
    }

    pub fn agent_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reference(&self) -> Option<&ReferenceSolution> {
        self.reference.as_ref()
    }

    pub fn is_convex(&self) -> bool {
        self.objectives.iter().all(|o| o.convexity().convex)
    }

    /// Gradient of `Σ f_i` at `x`.
    pub fn total_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.objectives
            .iter()
            .fold(DVector::zeros(self.dim), |acc, o| acc + o.gradient(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Absolute tolerance on the augmented gradient norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
            armijo: 1e-4,
        }
    }
}

const MAX_BACKTRACKS: usize = 50;

/// Damped Newton on `φ(x) = f(x) + λᵀx + ½(x − z)ᵀP(x − z)` from `start`.
///
/// When `∇²φ` is not positive definite the step uses `∇²φ + τI` with `τ`
/// grown by decades until a Cholesky factorization exists. Objectives without
/// a Hessian take steepest-descent steps.
pub fn newton_solve<F: LocalObjective + ?Sized>(
    f: &F,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    penalty: Penalty<'_>,
    start: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let phi = |x: &DVector<f64>| {
        let d = x - z;
        f.value(x) + lambda.dot(x) + 0.5 * d.dot(&penalty.apply(&d))
    };
    let grad = |x: &DVector<f64>| f.gradient(x) + lambda + penalty.apply(&(x - z));

    let mut x = start.clone();
    let mut g = grad(&x);
    let mut best = (g.norm(), x.clone());
    for _ in 0..opts.max_iterations {
        let gnorm = g.norm();
        if !gnorm.is_finite() {
            break;
        }
        if gnorm <= opts.tolerance {
            return Ok(x);
        }
        let dir = match f.hessian(&x) {
            Some(mut h) => {
                penalty.add_to(&mut h);
                regularized_newton_direction(h, &g)?
            }
            None => -&g,
        };
        let slope = g.dot(&dir);
        let f0 = phi(&x);
        let mut alpha = 1.0;
        let mut accepted = None;
        // Below this predicted decrease φ differences are rounding noise and
        // Armijo would accept arbitrary tiny steps.
        let noise_floor = slope.abs() <= 1e-12 * (1.0 + f0.abs());
        for _ in 0..(if noise_floor { 0 } else { MAX_BACKTRACKS }) {
            let trial = &x + &dir * alpha;
            let ft = phi(&trial);
            if ft.is_finite() && ft <= f0 + opts.armijo * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let next = match accepted {
            Some(t) => t,
            None => {
                // Take the full step when it still shrinks the gradient.
                let full = &x + &dir;
                if grad(&full).norm() < gnorm {
                    full
                } else {
                    break;
                }
            }
        };
        x = next;
        g = grad(&x);
        if g.norm() < best.0 {
            best = (g.norm(), x.clone());
        }
    }
    if best.0 <= opts.tolerance {
        return Ok(best.1);
    }
    Err(Error::Convergence {
        agent: None,
        iterations: opts.max_iterations,
        residual: best.0,
        best: best.1,
    })
}

fn regularized_newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(-c.solve(g));
    }
    let n = h.nrows();
    let mut shift = 1e-3 * h.amax().max(1.0);
    for _ in 0..40 {
        let shifted = &h + DMatrix::identity(n, n) * shift;
        if let Some(c) = shifted.cholesky() {
            return Ok(-c.solve(g));
        }
        shift *= 10.0;
    }
    Err(Error::Numeric("could not regularize the Newton system".into()))
}

fn check_subproblem_inputs<F: LocalObjective + ?Sized>(
    f: &F,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<()> {
    check_dim("λ", lambda, f.dim())?;
    check_dim("z", z, f.dim())?;
    if lambda.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite λ or z".into()));
    }
    Ok(())
}

/// `argmin f(x) + λᵀx + ρ/2‖x − z‖²`, warm-started at `z`.
pub fn local_solve<F: LocalObjective + ?Sized>(
    f: &F,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> Result<DVector<f64>> {
    local_solve_with(f, lambda, z, rho, &SolverOptions::default())
}

pub fn local_solve_with<F: LocalObjective + ?Sized>(
    f: &F,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("ρ must be positive, got {rho}")));
    }
    check_subproblem_inputs(f, lambda, z)?;
    let penalty = Penalty::Scaled(rho);
    if let Some(x) = f.augmented_minimizer(lambda, z, penalty) {
        return Ok(x);
    }
    newton_solve(f, lambda, z, penalty, z, opts)
}

/// `argmin f(x) + λᵀx + ½‖x − z‖²_B` for symmetric positive-definite `B`.
pub fn local_solve_metric<F: LocalObjective + ?Sized>(
    f: &F,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    metric: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_subproblem_inputs(f, lambda, z)?;
    if metric.shape() != (f.dim(), f.dim()) || !is_symmetric_pd(metric) {
        return Err(Error::InvalidInput(
            "metric must be a symmetric positive-definite matrix of matching size".into(),
        ));
    }
    let penalty = Penalty::Metric(metric);
    if let Some(x) = f.augmented_minimizer(lambda, z, penalty) {
        return Ok(x);
    }
    newton_solve(f, lambda, z, penalty, z, &SolverOptions::default())
}

/// `‖∇f(x) + λ + P(x − z)‖`.
pub fn augmented_residual<F: LocalObjective + ?Sized>(
    f: &F,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    penalty: Penalty<'_>,
) -> f64 {
    (f.gradient(x) + lambda + penalty.apply(&(x - z))).norm()
}

#[derive(Debug)]
struct SumObjective<'a>(&'a [Objective]);

impl LocalObjective for SumObjective<'_> {
    fn dim(&self) -> usize {
        self.0[0].dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.iter().map(|o| o.value(x)).sum()
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, o| acc + o.gradient(x))
    }
    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.0.iter().try_fold(DMatrix::zeros(self.dim(), self.dim()), |acc, o| {
            o.hessian(x).map(|h| acc + h)
        })
    }
}

/// Reference `(z*, λ*)` for a problem.
///
/// Instances made only of [`QuadraticObjective`]s use the exact mean of the
/// targets. Everything else runs a centralized Newton solve on `Σ f_i` from the
/// mean of the per-agent initial guesses, to `‖Σ∇f_i(z*)‖ ≤ 1e-12`.
pub fn reference_solution(p: &ProblemInstance) -> Result<ReferenceSolution> {
    let quadratic_targets: Option<Vec<&DVector<f64>>> = p
        .objectives()
        .iter()
        .map(|o| match o {
            Objective::Quadratic(q) => Some(&q.target),
            _ => None,
        })
        .collect();
    let z = match quadratic_targets {
        Some(targets) => {
            targets.iter().fold(DVector::zeros(p.dim()), |acc, t| acc + *t) / p.agent_count() as f64
        }
        None => {
            let start = p
                .objectives()
                .iter()
                .fold(DVector::zeros(p.dim()), |acc, o| acc + o.initial_guess())
                / p.agent_count() as f64;
            reference_solution_from(p, &start)?.z
        }
    };
    let lambdas = p.objectives().iter().map(|o| -o.gradient(&z)).collect();
    Ok(ReferenceSolution { z, lambdas })
}

/// Centralized Newton solve on `Σ f_i` from an explicit starting point.
pub fn reference_solution_from(p: &ProblemInstance, start: &DVector<f64>) -> Result<ReferenceSolution> {
    check_dim("start", start, p.dim())?;
    let total = SumObjective(p.objectives());
    let opts = SolverOptions {
        tolerance: 1e-12,
        max_iterations: 500,
        armijo: 1e-4,
    };
    let zero = DVector::zeros(p.dim());
    let z = newton_solve(&total, &zero, &zero, Penalty::None, start, &opts)
        .map_err(|e| Error::Oracle(format!("centralized Newton solve failed: {e}")))?;
    let lambdas = p.objectives().iter().map(|o| -o.gradient(&z)).collect();
    Ok(ReferenceSolution { z, lambdas })
}

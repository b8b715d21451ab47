//! Coordinator-based consensus ALADIN.
//!
//! Three variants share one loop: each agent solves its augmented subproblem,
//! the coordinator recovers gradients from the subproblem optimality condition
//! and then solves the consensus QP in closed form.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    consensus_error_l1, energy_constant_metric, RunStatus, RunTrace, TraceMetadata, TraceRow, TraceSchema,
};
use crate::error::{Error, Result};
use crate::linalg::{check_dim, is_symmetric_pd, symmetrize};
use crate::objectives::{local_solve, local_solve_metric, ProblemInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralizedVariant {
    /// BFGS-updated metrics, closed-form consensus QP.
    SecondOrder,
    /// Metric fixed at `ρI`.
    FirstOrder,
    /// Metric fixed at whatever the state was initialized with.
    ConstantMetric,
}

impl CentralizedVariant {
    pub fn name(self) -> &'static str {
        match self {
            CentralizedVariant::SecondOrder => "second_order",
            CentralizedVariant::FirstOrder => "first_order",
            CentralizedVariant::ConstantMetric => "constant_metric",
        }
    }
}

impl FromStr for CentralizedVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second_order" | "alg1" => Ok(CentralizedVariant::SecondOrder),
            "first_order" => Ok(CentralizedVariant::FirstOrder),
            "constant_metric" => Ok(CentralizedVariant::ConstantMetric),
            other => Err(Error::InvalidInput(format!("unknown centralized variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorState {
    pub z: DVector<f64>,
    pub lambdas: Vec<DVector<f64>>,
    pub metrics: Vec<DMatrix<f64>>,
    /// Local solutions and recovered gradients from the last step.
    pub prev_x: Option<Vec<DVector<f64>>>,
    pub prev_g: Option<Vec<DVector<f64>>>,
    pub iteration: usize,
    /// BFGS updates skipped by the curvature or positive-definiteness guard.
    pub skipped_updates: usize,
}

impl CoordinatorState {
    /// `z`, zero duals and metrics `ρI`.
    pub fn new(z: DVector<f64>, agents: usize, rho: f64) -> Self {
        let n = z.len();
        Self {
            lambdas: vec![DVector::zeros(n); agents],
            metrics: vec![DMatrix::identity(n, n) * rho; agents],
            z,
            prev_x: None,
            prev_g: None,
            iteration: 0,
            skipped_updates: 0,
        }
    }

    pub fn with_duals(mut self, lambdas: Vec<DVector<f64>>) -> Result<Self> {
        if lambdas.len() != self.lambdas.len() {
            return Err(Error::InvalidInput("dual count does not match agent count".into()));
        }
        for l in &lambdas {
            check_dim("λ", l, self.z.len())?;
        }
        self.lambdas = lambdas;
        Ok(self)
    }

    pub fn with_metrics(mut self, metrics: Vec<DMatrix<f64>>) -> Result<Self> {
        if metrics.len() != self.lambdas.len() {
            return Err(Error::InvalidInput("metric count does not match agent count".into()));
        }
        if metrics.iter().any(|b| b.shape() != (self.z.len(), self.z.len()) || !is_symmetric_pd(b)) {
            return Err(Error::InvalidInput("metrics must be symmetric positive definite".into()));
        }
        self.metrics = metrics;
        Ok(self)
    }

    pub fn agent_count(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dual_sum(&self) -> DVector<f64> {
        self.lambdas
            .iter()
            .fold(DVector::zeros(self.z.len()), |acc, l| acc + l)
    }
}

/// What one coordination step saw, for traces and identity checks.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub x: Vec<DVector<f64>>,
    pub g: Vec<DVector<f64>>,
    pub z_prev: DVector<f64>,
    pub lambdas_prev: Vec<DVector<f64>>,
}

impl StepInfo {
    pub fn z_step_norm(&self, state: &CoordinatorState) -> f64 {
        (&state.z - &self.z_prev).norm()
    }
}

/// `g = ρ(z_prev − x_new) − λ_prev`, the local gradient implied by subproblem optimality.
pub fn recover_gradient(
    rho: f64,
    z_prev: &DVector<f64>,
    x_new: &DVector<f64>,
    lambda_prev: &DVector<f64>,
) -> DVector<f64> {
    (z_prev - x_new) * rho - lambda_prev
}

/// Same recovery for a subproblem with metric `B`: `g = B(z_prev − x_new) − λ_prev`.
pub fn recover_gradient_metric(
    metric: &DMatrix<f64>,
    z_prev: &DVector<f64>,
    x_new: &DVector<f64>,
    lambda_prev: &DVector<f64>,
) -> DVector<f64> {
    metric * (z_prev - x_new) - lambda_prev
}

pub(crate) fn curvature_ok(s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let sy = s.dot(y);
    sy.is_finite() && sy > 1e-12 * s.norm() * y.norm()
}

/// `B − BssᵀB/(sᵀBs) + yyᵀ/(sᵀy)`, or `B` unchanged when `sᵀy ≤ 1e-12‖s‖‖y‖`.
pub fn bfgs_update(b: &DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    try_bfgs_update(b, s, y).unwrap_or_else(|| b.clone())
}

/// As [`bfgs_update`] but reports whether the update was applied. Also rejects
/// results that rounding has pushed out of the positive-definite cone.
pub fn try_bfgs_update(b: &DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> Option<DMatrix<f64>> {
    if !curvature_ok(s, y) {
        return None;
    }
    let bs = b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) {
        return None;
    }
    let mut next = b - &bs * bs.transpose() / sbs + y * y.transpose() / s.dot(y);
    symmetrize(&mut next);
    next.clone().cholesky().map(|_| next)
}

/// `z = (ΣB_i)⁻¹ Σ(B_i x_i − g_i)`, `λ_i = B_i(x_i − z) − g_i`.
pub fn consensus_qp_closed_form(
    xs: &[DVector<f64>],
    metrics: &[DMatrix<f64>],
    gs: &[DVector<f64>],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    if xs.is_empty() || xs.len() != metrics.len() || xs.len() != gs.len() {
        return Err(Error::InvalidInput("agent counts differ".into()));
    }
    let n = xs[0].len();
    let mut total = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for ((x, b), g) in xs.iter().zip(metrics).zip(gs) {
        total += b;
        rhs += b * x - g;
    }
    let z = total
        .cholesky()
        .ok_or_else(|| Error::Numeric("sum of metrics is not positive definite".into()))?
        .solve(&rhs);
    let lambdas = xs
        .iter()
        .zip(metrics)
        .zip(gs)
        .map(|((x, b), g)| b * (x - &z) - g)
        .collect();
    Ok((z, lambdas))
}

fn solve_all<F>(agents: usize, solve: F) -> Result<Vec<DVector<f64>>>
where
    F: Fn(usize) -> Result<DVector<f64>> + Sync,
{
    (0..agents)
        .into_par_iter()
        .map(|i| solve(i).map_err(|e| e.for_agent(i)))
        .collect()
}

fn begin(state: &CoordinatorState, problem: &ProblemInstance) -> Result<()> {
    if state.agent_count() != problem.agent_count() || state.z.len() != problem.dim() {
        return Err(Error::InvalidInput("state does not match problem".into()));
    }
    Ok(())
}

fn finish(state: &mut CoordinatorState, info: &StepInfo) {
    state.prev_x = Some(info.x.clone());
    state.prev_g = Some(info.g.clone());
    state.iteration += 1;
}

/// One iteration with BFGS metrics: local solves with `ρI`, gradient
/// recovery, metric update from the last `(x, g)` pair, closed-form QP.
pub fn second_order_step(
    state: &mut CoordinatorState,
    problem: &ProblemInstance,
    rho: f64,
) -> Result<StepInfo> {
    begin(state, problem)?;
    let objectives = problem.objectives();
    let x = solve_all(state.agent_count(), |i| {
        local_solve(&objectives[i], &state.lambdas[i], &state.z, rho)
    })?;
    let g: Vec<_> = (0..x.len())
        .map(|i| recover_gradient(rho, &state.z, &x[i], &state.lambdas[i]))
        .collect();
    if let (Some(px), Some(pg)) = (&state.prev_x, &state.prev_g) {
        for i in 0..x.len() {
            let s = &x[i] - &px[i];
            let y = &g[i] - &pg[i];
            match try_bfgs_update(&state.metrics[i], &s, &y) {
                Some(b) => state.metrics[i] = b,
                None => state.skipped_updates += 1,
            }
        }
    }
    let (z, lambdas) = consensus_qp_closed_form(&x, &state.metrics, &g)?;
    let info = StepInfo {
        x,
        g,
        z_prev: std::mem::replace(&mut state.z, z),
        lambdas_prev: std::mem::replace(&mut state.lambdas, lambdas),
    };
    finish(state, &info);
    Ok(info)
}

/// One iteration with the metric fixed at `ρI`.
pub fn first_order_step(
    state: &mut CoordinatorState,
    problem: &ProblemInstance,
    rho: f64,
) -> Result<StepInfo> {
    begin(state, problem)?;
    let objectives = problem.objectives();
    let x = solve_all(state.agent_count(), |i| {
        local_solve(&objectives[i], &state.lambdas[i], &state.z, rho)
    })?;
    let g: Vec<_> = (0..x.len())
        .map(|i| recover_gradient(rho, &state.z, &x[i], &state.lambdas[i]))
        .collect();
    let agents = x.len() as f64;
    let z = x
        .iter()
        .zip(&g)
        .fold(DVector::zeros(problem.dim()), |acc, (xi, gi)| acc + xi - gi / rho)
        / agents;
    let lambdas = x
        .iter()
        .zip(&g)
        .map(|(xi, gi)| (xi - &z) * rho - gi)
        .collect();
    let info = StepInfo {
        x,
        g,
        z_prev: std::mem::replace(&mut state.z, z),
        lambdas_prev: std::mem::replace(&mut state.lambdas, lambdas),
    };
    finish(state, &info);
    Ok(info)
}

/// One iteration with the state's metrics held fixed in both the local
/// subproblems and the consensus QP.
pub fn constant_metric_step(state: &mut CoordinatorState, problem: &ProblemInstance) -> Result<StepInfo> {
    begin(state, problem)?;
    let objectives = problem.objectives();
    let x = solve_all(state.agent_count(), |i| {
        local_solve_metric(&objectives[i], &state.lambdas[i], &state.z, &state.metrics[i])
    })?;
    let g: Vec<_> = (0..x.len())
        .map(|i| recover_gradient_metric(&state.metrics[i], &state.z, &x[i], &state.lambdas[i]))
        .collect();
    let (z, lambdas) = consensus_qp_closed_form(&x, &state.metrics, &g)?;
    let info = StepInfo {
        x,
        g,
        z_prev: std::mem::replace(&mut state.z, z),
        lambdas_prev: std::mem::replace(&mut state.lambdas, lambdas),
    };
    finish(state, &info);
    Ok(info)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedOptions {
    pub rho: f64,
    pub max_iters: usize,
    /// Stop once `‖z⁺ − z‖ ≤ tol`.
    pub tol: f64,
    pub seed: u64,
    pub initial_z: Option<DVector<f64>>,
    pub initial_lambdas: Option<Vec<DVector<f64>>>,
    /// Metrics for [`CentralizedVariant::ConstantMetric`]; `ρI` when absent.
    pub metrics: Option<Vec<DMatrix<f64>>>,
    pub problem_id: String,
}

impl Default for CentralizedOptions {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iters: 500,
            tol: 1e-10,
            seed: 0,
            initial_z: None,
            initial_lambdas: None,
            metrics: None,
            problem_id: String::new(),
        }
    }
}

/// Runs a centralized variant from `z = 0`, `λ = 0` (or the given start)
/// until the `z` step drops below `tol` or `max_iters` is reached.
///
/// The energy column uses the metrics in force for the iteration that just
/// finished and is NaN when the problem has no reference solution.
pub fn run_centralized(
    problem: &ProblemInstance,
    variant: CentralizedVariant,
    opts: &CentralizedOptions,
) -> Result<RunTrace> {
    let (trace, _) = run_centralized_with_state(problem, variant, opts)?;
    Ok(trace)
}

/// As [`run_centralized`], also returning the final coordinator state.
pub fn run_centralized_with_state(
    problem: &ProblemInstance,
    variant: CentralizedVariant,
    opts: &CentralizedOptions,
) -> Result<(RunTrace, CoordinatorState)> {
    let rho = opts.rho;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("ρ must be positive, got {rho}")));
    }
    let z0 = opts
        .initial_z
        .clone()
        .unwrap_or_else(|| DVector::zeros(problem.dim()));
    check_dim("initial z", &z0, problem.dim())?;
    let mut state = CoordinatorState::new(z0, problem.agent_count(), rho);
    if let Some(l) = &opts.initial_lambdas {
        state = state.with_duals(l.clone())?;
    }
    if let (CentralizedVariant::ConstantMetric, Some(m)) = (variant, &opts.metrics) {
        state = state.with_metrics(m.clone())?;
    }

    let mut trace = RunTrace::new(
        TraceMetadata {
            variant: variant.name().to_string(),
            rho,
            delta: None,
            seed: opts.seed,
            problem_id: opts.problem_id.clone(),
        },
        TraceSchema::Centralized,
    );
    let start = Instant::now();
    let reference = problem.reference();
    for _ in 0..opts.max_iters {
        let info = match variant {
            CentralizedVariant::SecondOrder => second_order_step(&mut state, problem, rho)?,
            CentralizedVariant::FirstOrder => first_order_step(&mut state, problem, rho)?,
            CentralizedVariant::ConstantMetric => constant_metric_step(&mut state, problem)?,
        };
        let z_step = info.z_step_norm(&state);
        let energy = match reference {
            Some(r) => energy_constant_metric(&state.z, &state.lambdas, Some(r), &state.metrics)?,
            None => f64::NAN,
        };
        let consensus = reference
            .map(|r| consensus_error_l1(&info.x, &r.z))
            .unwrap_or(f64::NAN);
        trace.push(TraceRow {
            iter: state.iteration,
            consensus_error_l1: consensus,
            energy,
            z_step_norm: z_step,
            dual_sum_norm: state.dual_sum().norm(),
            wall_time_us: start.elapsed().as_micros() as u64,
            ..TraceRow::default()
        })?;
        if !z_step.is_finite() || state.z.iter().any(|v| !v.is_finite()) {
            trace.status = RunStatus::Diverged;
            trace.note = Some("non-finite iterate".into());
            return Ok((trace, state));
        }
        if z_step <= opts.tol {
            trace.status = RunStatus::Converged;
            return Ok((trace, state));
        }
    }
    trace.status = RunStatus::BudgetExhausted;
    Ok((trace, state))
}

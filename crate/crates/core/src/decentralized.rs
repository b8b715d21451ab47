//! Coordinator-free variants where every averaging step goes through the
//! quantized consensus protocol.
//!
//! * [`qd_first_order_step`]: local solve, gradient recovery, quantized
//!   average of `x − g/ρ`, dual update.
//! * [`bilevel_step`]: local solve plus BFGS metric; the consensus QP built
//!   from the agents' quadratic models is then solved by repeated first-order
//!   steps until the estimate stops moving.
//! * [`approx_second_order_step`]: averages primal iterates and gradients with
//!   the protocol and takes an inverse-BFGS Newton step on the average.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centralized::{curvature_ok, recover_gradient, try_bfgs_update};
use crate::diagnostics::{
    consensus_error_l1, energy_decentralized, RunStatus, RunTrace, TraceMetadata, TraceRow, TraceSchema,
};
use crate::error::{Error, Result};
use crate::fqac::fqac_run;
use crate::graph::Digraph;
use crate::linalg::{check_dim, symmetrize};
use crate::objectives::{local_solve, LocalObjective, ProblemInstance, QuadraticModel};
use crate::quantization::QuantizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecentralizedVariant {
    QdFirstOrder,
    Bilevel,
    ApproxSecondOrder,
}

impl DecentralizedVariant {
    pub fn name(self) -> &'static str {
        match self {
            DecentralizedVariant::QdFirstOrder => "qd_first_order",
            DecentralizedVariant::Bilevel => "bilevel",
            DecentralizedVariant::ApproxSecondOrder => "approx_second_order",
        }
    }
}

impl FromStr for DecentralizedVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qd_first_order" => Ok(DecentralizedVariant::QdFirstOrder),
            "bilevel" => Ok(DecentralizedVariant::Bilevel),
            "approx_second_order" => Ok(DecentralizedVariant::ApproxSecondOrder),
            other => Err(Error::InvalidInput(format!("unknown decentralized variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    /// Dual estimate `λ̂`.
    pub lambda: DVector<f64>,
    /// Estimate `ẑ` of the global variable.
    pub z: DVector<f64>,
    pub metric: DMatrix<f64>,
    pub inverse_metric: DMatrix<f64>,
    pub prev_x: Option<DVector<f64>>,
    pub prev_g: Option<DVector<f64>>,
    /// Protocol averages of the primal iterates and of the gradients there.
    pub avg_x: Option<DVector<f64>>,
    pub avg_grad: Option<DVector<f64>>,
}

impl AgentState {
    /// Metric `ρI`, inverse metric `(1/ρ)I`.
    pub fn new(z: DVector<f64>, lambda: DVector<f64>, rho: f64) -> Self {
        let n = z.len();
        Self {
            x: z.clone(),
            lambda,
            z,
            metric: DMatrix::identity(n, n) * rho,
            inverse_metric: DMatrix::identity(n, n) / rho,
            prev_x: None,
            prev_g: None,
            avg_x: None,
            avg_grad: None,
        }
    }
}

/// Runs the quantized protocol for every averaging request of a run, drawing
/// a fresh sub-seed per call from one seeded stream.
#[derive(Debug, Clone)]
pub struct QuantizedChannel<'g> {
    graph: &'g Digraph,
    diameter: usize,
    level: QuantizerConfig,
    seeds: ChaCha8Rng,
    stats: CommStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub calls: u64,
    pub rounds: u64,
    pub messages: u64,
    pub flood_messages: u64,
}

impl<'g> QuantizedChannel<'g> {
    pub fn new(graph: &'g Digraph, level: QuantizerConfig, seed: u64) -> Self {
        Self {
            graph,
            diameter: graph.diameter().max(1),
            level,
            seeds: ChaCha8Rng::seed_from_u64(seed),
            stats: CommStats::default(),
        }
    }

    pub fn level(&self) -> QuantizerConfig {
        self.level
    }

    pub fn agent_count(&self) -> usize {
        self.graph.agent_count()
    }

    pub fn average(&mut self, ys: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let r = fqac_run(ys, self.graph, self.level, self.diameter, self.seeds.next_u64())?;
        self.stats.calls += 1;
        self.stats.rounds += r.rounds;
        self.stats.messages += r.messages;
        self.stats.flood_messages += r.flood_messages;
        Ok(r.outputs)
    }

    /// Counters accumulated since the previous call.
    pub fn take_stats(&mut self) -> CommStats {
        std::mem::take(&mut self.stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InnerOutcome {
    pub iterations: usize,
    pub converged: bool,
}

/// What one decentralized iteration saw.
#[derive(Debug, Clone)]
pub struct DecentralizedStepReport {
    pub x: Vec<DVector<f64>>,
    pub g: Vec<DVector<f64>>,
    pub z_prev: Vec<DVector<f64>>,
    pub lambdas_prev: Vec<DVector<f64>>,
    /// Unquantized mean of the protocol inputs `x − g/ρ` (first-order step only).
    pub z_exact: Option<DVector<f64>>,
    pub comm: CommStats,
    pub inner: Option<InnerOutcome>,
}

/// Measured estimation errors next to their quantization bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub max_z_error: f64,
    pub z_bound: f64,
    pub max_lambda_error: f64,
    pub lambda_bound: f64,
    pub dual_sum_norm: f64,
    pub dual_sum_bound: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        let slack = 1e-12;
        self.max_z_error <= self.z_bound * (1.0 + slack)
            && self.max_lambda_error <= self.lambda_bound * (1.0 + slack)
            && self.dual_sum_norm <= self.dual_sum_bound * (1.0 + slack)
    }
}

impl DecentralizedStepReport {
    /// Compares the post-step estimates with the unquantized update
    /// `z = mean(x − g/ρ)`, `λ_i = ρ(x_i − z) − g_i`.
    pub fn bound_check(&self, states: &[AgentState], rho: f64, level: QuantizerConfig) -> Result<BoundCheck> {
        let z_exact = self
            .z_exact
            .as_ref()
            .ok_or_else(|| Error::DiagnosticUnavailable("step has no unquantized reference".into()))?;
        let n = z_exact.len() as f64;
        let agents = states.len() as f64;
        let delta = level.level();
        let mut max_z: f64 = 0.0;
        let mut max_l: f64 = 0.0;
        let mut sum = DVector::zeros(z_exact.len());
        for (i, s) in states.iter().enumerate() {
            let exact_lambda = (&self.x[i] - z_exact) * rho - &self.g[i];
            max_z = max_z.max((z_exact - &s.z).norm());
            max_l = max_l.max((&s.lambda - exact_lambda).norm());
            sum += &s.lambda;
        }
        Ok(BoundCheck {
            max_z_error: max_z,
            z_bound: 2.0 * n.sqrt() * delta,
            max_lambda_error: max_l,
            lambda_bound: 2.0 * rho * n.sqrt() * delta,
            dual_sum_norm: sum.norm(),
            dual_sum_bound: 2.0 * rho * agents * n.sqrt() * delta,
        })
    }
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

struct FirstOrderUpdate {
    x: Vec<DVector<f64>>,
    g: Vec<DVector<f64>>,
    z_exact: DVector<f64>,
}

/// The first-order update on arbitrary objectives, in place on `(ẑ, λ̂)`.
fn first_order_update<F: LocalObjective + Sync>(
    objectives: &[F],
    z: &mut [DVector<f64>],
    lambdas: &mut [DVector<f64>],
    channel: &mut QuantizedChannel<'_>,
    rho: f64,
) -> Result<FirstOrderUpdate> {
    let agents = objectives.len();
    let x = solve_all(agents, |i| local_solve(&objectives[i], &lambdas[i], &z[i], rho))?;
    let g: Vec<_> = (0..agents)
        .map(|i| recover_gradient(rho, &z[i], &x[i], &lambdas[i]))
        .collect();
    let ys: Vec<_> = x.iter().zip(&g).map(|(xi, gi)| xi - gi / rho).collect();
    let z_exact = ys.iter().fold(DVector::zeros(x[0].len()), |a, y| a + y) / agents as f64;
    let averaged = channel.average(&ys)?;
    for i in 0..agents {
        lambdas[i] = (&x[i] - &averaged[i]) * rho - &g[i];
        z[i] = averaged[i].clone();
    }
    Ok(FirstOrderUpdate { x, g, z_exact })
}

fn check_states(states: &[AgentState], problem: &ProblemInstance, channel: &QuantizedChannel<'_>) -> Result<()> {
    if states.len() != problem.agent_count() || channel.agent_count() != problem.agent_count() {
        return Err(Error::InvalidInput("agent counts of states, problem and graph differ".into()));
    }
    for s in states {
        check_dim("ẑ", &s.z, problem.dim())?;
        check_dim("λ̂", &s.lambda, problem.dim())?;
    }
    Ok(())
}

fn split_estimates(states: &[AgentState]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    (
        states.iter().map(|s| s.z.clone()).collect(),
        states.iter().map(|s| s.lambda.clone()).collect(),
    )
}

/// One quantized first-order iteration.
pub fn qd_first_order_step(
    states: &mut [AgentState],
    problem: &ProblemInstance,
    channel: &mut QuantizedChannel<'_>,
    rho: f64,
) -> Result<DecentralizedStepReport> {
    check_states(states, problem, channel)?;
    let (z_prev, lambdas_prev) = split_estimates(states);
    let (mut z, mut lambdas) = (z_prev.clone(), lambdas_prev.clone());
    let up = first_order_update(problem.objectives(), &mut z, &mut lambdas, channel, rho)?;
    for (i, s) in states.iter_mut().enumerate() {
        s.x = up.x[i].clone();
        s.z = z[i].clone();
        s.lambda = lambdas[i].clone();
    }
    Ok(DecentralizedStepReport {
        x: up.x,
        g: up.g,
        z_prev,
        lambdas_prev,
        z_exact: Some(up.z_exact),
        comm: channel.take_stats(),
        inner: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    /// Stop once `max_i ‖ẑ_i^{r+τ} − ẑ_i^r‖ ≤ eps`.
    pub eps: f64,
    /// `τ`, the spacing of the stop test.
    pub check_every: usize,
    pub max_iters: usize,
    /// Penalty of the inner first-order loop; the outer `ρ` when absent.
    pub rho: Option<f64>,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            eps: 1e-8,
            check_every: 5,
            max_iters: 1000,
            rho: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub z: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
    pub outcome: InnerOutcome,
}

/// Solves `min Σ q_i(w)` over a common `w` with quantized first-order steps,
/// where `q_i` are the agents' quadratic models. In the limit `ẑ` is the
/// closed-form consensus-QP solution and `λ̂_i = B_i(x_i − ẑ) − g_i`.
pub fn solve_consensus_qp_decentralized(
    models: &[QuadraticModel],
    z_start: &[DVector<f64>],
    lambda_start: &[DVector<f64>],
    channel: &mut QuantizedChannel<'_>,
    rho: f64,
    opts: &InnerOptions,
) -> Result<InnerSolution> {
    if models.len() != z_start.len() || models.len() != lambda_start.len() || models.len() != channel.agent_count() {
        return Err(Error::InvalidInput("agent counts differ".into()));
    }
    if !(opts.eps > 0.0) || opts.check_every == 0 {
        return Err(Error::InvalidInput("inner tolerance and check spacing must be positive".into()));
    }
    let rho = opts.rho.unwrap_or(rho);
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("inner ρ must be positive, got {rho}")));
    }
    let mut z = z_start.to_vec();
    let mut lambdas = lambda_start.to_vec();
    let mut anchor = z.clone();
    for r in 1..=opts.max_iters {
        first_order_update(models, &mut z, &mut lambdas, channel, rho)?;
        if r % opts.check_every == 0 {
            let moved = z
                .iter()
                .zip(&anchor)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            if moved <= opts.eps {
                return Ok(InnerSolution {
                    z,
                    lambdas,
                    outcome: InnerOutcome {
                        iterations: r,
                        converged: true,
                    },
                });
            }
            anchor.clone_from(&z);
        }
    }
    Ok(InnerSolution {
        z,
        lambdas,
        outcome: InnerOutcome {
            iterations: opts.max_iters,
            converged: false,
        },
    })
}

/// Local solve, gradient recovery and BFGS metric update shared by both
/// second-order variants.
fn outer_update(
    states: &mut [AgentState],
    problem: &ProblemInstance,
    rho: f64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let objectives = problem.objectives();
    let x = solve_all(states.len(), |i| {
        local_solve(&objectives[i], &states[i].lambda, &states[i].z, rho)
    })?;
    let g: Vec<_> = states
        .iter()
        .zip(&x)
        .map(|(s, xi)| recover_gradient(rho, &s.z, xi, &s.lambda))
        .collect();
    for (i, s) in states.iter_mut().enumerate() {
        if let (Some(px), Some(pg)) = (&s.prev_x, &s.prev_g) {
            if let Some(b) = try_bfgs_update(&s.metric, &(&x[i] - px), &(&g[i] - pg)) {
                s.metric = b;
            }
        }
        s.prev_x = Some(x[i].clone());
        s.prev_g = Some(g[i].clone());
        s.x = x[i].clone();
    }
    Ok((x, g))
}

/// One outer iteration of the bilevel variant. The inner loop starts from
/// the current `ẑ`; its duals start at zero unless `warm_start` is set.
pub fn bilevel_step(
    states: &mut [AgentState],
    problem: &ProblemInstance,
    channel: &mut QuantizedChannel<'_>,
    rho: f64,
    inner: &InnerOptions,
    warm_start: bool,
) -> Result<DecentralizedStepReport> {
    check_states(states, problem, channel)?;
    let (z_prev, lambdas_prev) = split_estimates(states);
    let (x, g) = outer_update(states, problem, rho)?;
    let models = states
        .iter()
        .zip(&g)
        .map(|(s, gi)| QuadraticModel::new(s.x.clone(), s.metric.clone(), gi.clone()))
        .collect::<Result<Vec<_>>>()?;
    let lambda_start = if warm_start {
        lambdas_prev.clone()
    } else {
        vec![DVector::zeros(problem.dim()); states.len()]
    };
    let sol = solve_consensus_qp_decentralized(&models, &z_prev, &lambda_start, channel, rho, inner)?;
    for (i, s) in states.iter_mut().enumerate() {
        s.z = sol.z[i].clone();
        s.lambda = sol.lambdas[i].clone();
    }
    Ok(DecentralizedStepReport {
        x,
        g,
        z_prev,
        lambdas_prev,
        z_exact: None,
        comm: channel.take_stats(),
        inner: Some(sol.outcome),
    })
}

/// `(I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1/(yᵀs)`, or `None` when
/// `yᵀs ≤ 1e-12‖s‖‖y‖`.
pub fn inverse_bfgs_update(h: &DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> Option<DMatrix<f64>> {
    if !curvature_ok(s, y) {
        return None;
    }
    let n = s.len();
    let inv = 1.0 / y.dot(s);
    let left = DMatrix::identity(n, n) - s * y.transpose() * inv;
    let mut next = &left * h * left.transpose() + s * s.transpose() * inv;
    symmetrize(&mut next);
    next.clone().cholesky().map(|_| next)
}

/// One iteration of the approximate second-order variant.
///
/// Pairs `(s̄, ȳ)` with `‖s̄‖` at or below `noise_floor` are treated as
/// quantization noise and leave `H` unchanged; pass 0 to disable.
pub fn approx_second_order_step(
    states: &mut [AgentState],
    problem: &ProblemInstance,
    channel: &mut QuantizedChannel<'_>,
    rho: f64,
    noise_floor: f64,
) -> Result<DecentralizedStepReport> {
    check_states(states, problem, channel)?;
    let (z_prev, lambdas_prev) = split_estimates(states);
    let (x, g) = outer_update(states, problem, rho)?;
    let avg_x = channel.average(&x)?;
    let objectives = problem.objectives();
    let grads: Vec<_> = objectives
        .iter()
        .zip(&avg_x)
        .map(|(f, xb)| f.gradient(xb))
        .collect();
    let avg_grad = channel.average(&grads)?;
    for (i, s) in states.iter_mut().enumerate() {
        if let (Some(ox), Some(og)) = (&s.avg_x, &s.avg_grad) {
            let sbar = &avg_x[i] - ox;
            let ybar = &avg_grad[i] - og;
            if sbar.norm() > noise_floor {
                if let Some(h) = inverse_bfgs_update(&s.inverse_metric, &sbar, &ybar) {
                    s.inverse_metric = h;
                }
            }
        }
        s.z = &avg_x[i] - &s.inverse_metric * &avg_grad[i];
        s.lambda = &s.metric * (&x[i] - &s.z) - &g[i];
        s.avg_x = Some(avg_x[i].clone());
        s.avg_grad = Some(avg_grad[i].clone());
    }
    Ok(DecentralizedStepReport {
        x,
        g,
        z_prev,
        lambdas_prev,
        z_exact: None,
        comm: channel.take_stats(),
        inner: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedOptions {
    pub rho: f64,
    pub level: QuantizerConfig,
    pub max_iters: usize,
    /// Stop once `max_i ‖ẑ_i⁺ − ẑ_i‖ ≤ tol`; `None` runs the whole budget.
    pub tol: Option<f64>,
    pub seed: u64,
    pub initial_z: Option<DVector<f64>>,
    pub initial_lambdas: Option<Vec<DVector<f64>>>,
    /// Draw `ẑ` and `λ̂` from `N(0, scale²)` with the run seed instead of starting at zero.
    pub random_init_scale: Option<f64>,
    pub inner: InnerOptions,
    pub warm_start_inner: bool,
    /// Multiple of `√n Δ` below which inverse-BFGS pairs are ignored.
    pub curvature_noise_factor: f64,
    /// Flag divergence when the consensus error exceeds this multiple of its first value.
    pub divergence_factor: f64,
    pub problem_id: String,
}

impl DecentralizedOptions {
    pub fn new(level: QuantizerConfig) -> Self {
        Self {
            rho: 1.0,
            level,
            max_iters: 200,
            tol: Some(1e-10),
            seed: 0,
            initial_z: None,
            initial_lambdas: None,
            random_init_scale: None,
            inner: InnerOptions::default(),
            warm_start_inner: false,
            curvature_noise_factor: 0.0,
            divergence_factor: 1e3,
            problem_id: String::new(),
        }
    }
}

/// Per-agent states for a run: common `ẑ`, per-agent `λ̂`, metric `ρI`.
pub fn initial_states(problem: &ProblemInstance, opts: &DecentralizedOptions) -> Result<Vec<AgentState>> {
    let n = problem.dim();
    let agents = problem.agent_count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut draw = |scale: f64| DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let z = match (&opts.initial_z, opts.random_init_scale) {
        (Some(z), _) => {
            check_dim("initial z", z, n)?;
            z.clone()
        }
        (None, Some(scale)) => draw(scale),
        (None, None) => DVector::zeros(n),
    };
    let lambdas = match (&opts.initial_lambdas, opts.random_init_scale) {
        (Some(l), _) => {
            if l.len() != agents {
                return Err(Error::InvalidInput("initial duals do not match agent count".into()));
            }
            for li in l {
                check_dim("initial λ", li, n)?;
            }
            l.clone()
        }
        (None, Some(scale)) => (0..agents).map(|_| draw(scale)).collect(),
        (None, None) => vec![DVector::zeros(n); agents],
    };
    Ok(lambdas
        .into_iter()
        .map(|l| AgentState::new(z.clone(), l, opts.rho))
        .collect())
}

pub fn run_decentralized(
    problem: &ProblemInstance,
    graph: &Digraph,
    variant: DecentralizedVariant,
    opts: &DecentralizedOptions,
) -> Result<RunTrace> {
    run_decentralized_with_state(problem, graph, variant, opts).map(|(t, _)| t)
}

/// Fixed-budget run of the first-order variant.
pub fn run_qd_first_order(
    problem: &ProblemInstance,
    graph: &Digraph,
    rho: f64,
    level: QuantizerConfig,
    iters: usize,
    seed: u64,
) -> Result<RunTrace> {
    let opts = DecentralizedOptions {
        rho,
        max_iters: iters,
        tol: None,
        seed,
        ..DecentralizedOptions::new(level)
    };
    run_decentralized(problem, graph, DecentralizedVariant::QdFirstOrder, &opts)
}

fn is_breakdown(e: &Error) -> bool {
    matches!(e, Error::Convergence { .. } | Error::Numeric(_) | Error::Range(_) | Error::InvalidInput(_))
}

/// Runs a decentralized variant and returns the trace with the final states.
///
/// The second-order variants report numerical breakdown (local solver
/// failure, iterates leaving the quantizer's range, consensus error growing
/// past `divergence_factor` times its first value) as a trace flagged
/// [`RunStatus::Diverged`] instead of an error.
pub fn run_decentralized_with_state(
    problem: &ProblemInstance,
    graph: &Digraph,
    variant: DecentralizedVariant,
    opts: &DecentralizedOptions,
) -> Result<(RunTrace, Vec<AgentState>)> {
    let rho = opts.rho;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("ρ must be positive, got {rho}")));
    }
    if graph.agent_count() != problem.agent_count() {
        return Err(Error::InvalidInput(format!(
            "graph has {} agents, problem has {}",
            graph.agent_count(),
            problem.agent_count()
        )));
    }
    let mut states = initial_states(problem, opts)?;
    let mut channel = QuantizedChannel::new(graph, opts.level, opts.seed);
    let noise_floor = opts.curvature_noise_factor * (problem.dim() as f64).sqrt() * opts.level.level();
    let mut trace = RunTrace::new(
        TraceMetadata {
            variant: variant.name().to_string(),
            rho,
            delta: Some(opts.level.level()),
            seed: opts.seed,
            problem_id: opts.problem_id.clone(),
        },
        TraceSchema::Decentralized,
    );
    let reference = problem.reference();
    let start = Instant::now();
    let mut first_error = None;
    for k in 1..=opts.max_iters {
        let step = match variant {
            DecentralizedVariant::QdFirstOrder => qd_first_order_step(&mut states, problem, &mut channel, rho),
            DecentralizedVariant::Bilevel => {
                bilevel_step(&mut states, problem, &mut channel, rho, &opts.inner, opts.warm_start_inner)
            }
            DecentralizedVariant::ApproxSecondOrder => {
                approx_second_order_step(&mut states, problem, &mut channel, rho, noise_floor)
            }
        };
        let report = match step {
            Ok(r) => r,
            Err(e) if variant != DecentralizedVariant::QdFirstOrder && is_breakdown(&e) => {
                trace.status = RunStatus::Diverged;
                trace.note = Some(format!("iteration {k}: {e}"));
                return Ok((trace, states));
            }
            Err(e) => return Err(e),
        };

        let z_step = states
            .iter()
            .zip(&report.z_prev)
            .map(|(s, zp)| (&s.z - zp).norm())
            .fold(0.0, f64::max);
        let disagreement = states
            .iter()
            .map(|s| (&s.z - &states[0].z).norm())
            .fold(0.0, f64::max);
        let lambdas: Vec<_> = states.iter().map(|s| s.lambda.clone()).collect();
        let dual_sum = lambdas.iter().fold(DVector::zeros(problem.dim()), |a, l| a + l);
        let (consensus, energy) = match reference {
            Some(r) => (
                consensus_error_l1(&report.x, &r.z),
                energy_decentralized(&states[0].z, &lambdas, Some(r), rho)?,
            ),
            None => (f64::NAN, f64::NAN),
        };
        trace.push(TraceRow {
            iter: k,
            consensus_error_l1: consensus,
            energy,
            z_step_norm: z_step,
            dual_sum_norm: dual_sum.norm(),
            max_z_disagreement: disagreement,
            fqac_rounds: report.comm.rounds,
            fqac_messages: report.comm.messages,
            wall_time_us: start.elapsed().as_micros() as u64,
        })?;

        let finite = z_step.is_finite() && states.iter().all(|s| s.z.iter().all(|v| v.is_finite()));
        let first = *first_error.get_or_insert(consensus);
        let blown_up = consensus.is_finite() && first > 0.0 && consensus > opts.divergence_factor * first;
        if !finite || (variant != DecentralizedVariant::QdFirstOrder && blown_up) {
            trace.status = RunStatus::Diverged;
            trace.note = Some(format!(
                "iteration {k}: {}",
                if finite { "consensus error blew up" } else { "non-finite estimate" }
            ));
            return Ok((trace, states));
        }
        if opts.tol.is_some_and(|tol| z_step <= tol) {
            trace.status = RunStatus::Converged;
            return Ok((trace, states));
        }
    }
    trace.status = RunStatus::BudgetExhausted;
    Ok((trace, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centralized::{consensus_qp_closed_form, first_order_step, CoordinatorState};
    use crate::diagnostics::{check_midpoint_identity, MidpointMetric};
    use crate::objectives::{reference_solution, Objective, ProblemKind, QuadraticObjective};
    use rand::Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn level(d: f64) -> QuantizerConfig {
        QuantizerConfig::new(d).unwrap()
    }

    fn ls_problem(targets: Vec<DVector<f64>>) -> ProblemInstance {
        let p = ProblemInstance::new(
            ProblemKind::ConvexLs,
            None,
            targets
                .into_iter()
                .map(|t| Objective::Quadratic(QuadraticObjective::new(t)))
                .collect(),
        )
        .unwrap();
        let r = reference_solution(&p).unwrap();
        p.with_reference(r).unwrap()
    }

    fn random_ls(agents: usize, n: usize, seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ls_problem(
            (0..agents)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn tiny_quantum_matches_centralized_first_order() {
        let p = ls_problem(vec![dv(&[0.3]), dv(&[1.7])]);
        let g = Digraph::ring(2).unwrap();
        let mut channel = QuantizedChannel::new(&g, level(1e-12), 1);
        let mut states: Vec<_> = (0..2).map(|_| AgentState::new(dv(&[0.0]), dv(&[0.0]), 2.0)).collect();
        let mut central = CoordinatorState::new(dv(&[0.0]), 2, 2.0);
        for _ in 0..3 {
            qd_first_order_step(&mut states, &p, &mut channel, 2.0).unwrap();
            first_order_step(&mut central, &p, 2.0).unwrap();
            for (s, l) in states.iter().zip(&central.lambdas) {
                assert!((&s.z - &central.z).norm() <= 1e-9);
                assert!((&s.lambda - l).norm() <= 1e-9);
            }
        }
    }

    #[test]
    fn fixed_point_stays_within_quantization_radius() {
        let p = random_ls(6, 3, 2);
        let r = p.reference().unwrap().clone();
        let g = Digraph::ring(6).unwrap();
        let d = 1e-6;
        let mut channel = QuantizedChannel::new(&g, level(d), 5);
        let mut states: Vec<_> = r
            .lambdas
            .iter()
            .map(|l| AgentState::new(r.z.clone(), l.clone(), 1.0))
            .collect();
        qd_first_order_step(&mut states, &p, &mut channel, 1.0).unwrap();
        for s in &states {
            assert!((&s.z - &r.z).norm() <= 2.0 * 3f64.sqrt() * d);
        }
    }

    #[test]
    fn bounds_and_midpoint_hold_every_iteration() {
        for seed in 0..3 {
            let p = random_ls(8, 4, seed);
            let g = Digraph::random_strongly_connected(8, 0.2, seed).unwrap();
            for &d in &[1e-3, 1e-6] {
                let rho = 1.5;
                let mut channel = QuantizedChannel::new(&g, level(d), seed);
                let mut states: Vec<_> = (0..8).map(|_| AgentState::new(DVector::zeros(4), DVector::zeros(4), rho)).collect();
                for _ in 0..20 {
                    let rep = qd_first_order_step(&mut states, &p, &mut channel, rho).unwrap();
                    let b = rep.bound_check(&states, rho, level(d)).unwrap();
                    assert!(b.holds(), "{b:?}");
                    let zn: Vec<_> = states.iter().map(|s| s.z.clone()).collect();
                    let ln: Vec<_> = states.iter().map(|s| s.lambda.clone()).collect();
                    let res = check_midpoint_identity(
                        &rep.x,
                        &rep.lambdas_prev,
                        &ln,
                        &rep.z_prev,
                        &zn,
                        MidpointMetric::Scaled(rho),
                    )
                    .unwrap();
                    assert!(res <= 1e-9, "midpoint residual {res}");
                    assert!(rep.comm.calls == 1 && rep.comm.rounds >= 1);
                }
            }
        }
    }

    #[test]
    fn inverse_bfgs_examples() {
        let h = DMatrix::identity(3, 3) * 0.5;
        let s = dv(&[1.0, -0.5, 0.2]);
        let next = inverse_bfgs_update(&h, &s, &s).unwrap();
        assert!((&next * &s - &s).norm() <= 1e-12);
        assert!(inverse_bfgs_update(&h, &dv(&[1.0, 0.0, 0.0]), &dv(&[0.0, 1.0, 0.0])).is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = random_spd(4, &mut rng);
            let s = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Some(next) = inverse_bfgs_update(&h, &s, &y) {
                assert!((&next * &y - &s).norm() <= 1e-9 * (1.0 + s.norm()));
                // Inverse of the direct BFGS update of H⁻¹.
                let direct = try_bfgs_update(&h.clone().try_inverse().unwrap(), &s, &y).unwrap();
                let prod = &direct * &next;
                assert!((prod - DMatrix::identity(4, 4)).amax() <= 1e-8);
            }
        }
    }

    #[test]
    fn inner_solve_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let agents = 1 + trial % 4;
            let n = 1 + trial % 3;
            let g = if agents == 1 {
                Digraph::single_agent()
            } else {
                Digraph::random_strongly_connected(agents, 0.3, trial as u64).unwrap()
            };
            let xs: Vec<_> = (0..agents)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let gs: Vec<_> = (0..agents)
                .map(|_| DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let bs: Vec<_> = (0..agents).map(|_| random_spd(n, &mut rng)).collect();
            let models: Vec<_> = (0..agents)
                .map(|i| QuadraticModel::new(xs[i].clone(), bs[i].clone(), gs[i].clone()).unwrap())
                .collect();
            let (z_star, _) = consensus_qp_closed_form(&xs, &bs, &gs).unwrap();
            let d = 1e-9;
            let opts = InnerOptions::default();
            let mut channel = QuantizedChannel::new(&g, level(d), trial as u64);
            let zeros = vec![DVector::zeros(n); agents];
            let sol = solve_consensus_qp_decentralized(&models, &zeros, &zeros, &mut channel, 1.0, &opts).unwrap();
            assert!(sol.outcome.converged);
            for z in &sol.z {
                let err = (z - &z_star).norm();
                assert!(err <= opts.eps + 2.0 * (n as f64).sqrt() * d, "error {err}");
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_flag_budget() {
        let p = random_ls(10, 3, 4);
        let g = Digraph::random_strongly_connected(10, 0.1, 4).unwrap();
        let a = run_qd_first_order(&p, &g, 1.0, level(1e-5), 30, 9).unwrap();
        let b = run_qd_first_order(&p, &g, 1.0, level(1e-5), 30, 9).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca, false).unwrap();
        b.write_csv(&mut cb, false).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.len(), 30);
        assert_eq!(a.status, RunStatus::BudgetExhausted);
        assert!(a.rows().iter().all(|r| r.max_z_disagreement == 0.0));
    }

    #[test]
    fn coarse_quantum_has_higher_plateau() {
        let p = random_ls(10, 3, 8);
        let g = Digraph::ring(10).unwrap();
        let coarse = run_qd_first_order(&p, &g, 1.0, level(1e-3), 60, 1).unwrap();
        let fine = run_qd_first_order(&p, &g, 1.0, level(1e-6), 60, 1).unwrap();
        let tail = |t: &RunTrace| crate::diagnostics::plateau_level(&t.consensus_errors()).unwrap();
        assert!(tail(&fine) < tail(&coarse));
    }

    #[test]
    fn second_order_variants_run_on_least_squares() {
        let p = random_ls(6, 3, 1);
        let g = Digraph::ring(6).unwrap();
        let z_star = p.reference().unwrap().z.clone();
        for variant in [DecentralizedVariant::Bilevel, DecentralizedVariant::ApproxSecondOrder] {
            let opts = DecentralizedOptions {
                max_iters: 40,
                ..DecentralizedOptions::new(level(1e-8))
            };
            let (t, states) = run_decentralized_with_state(&p, &g, variant, &opts).unwrap();
            assert_ne!(t.status, RunStatus::Diverged, "{variant:?}: {:?}", t.note);
            assert!((&states[0].z - &z_star).norm() <= 1e-5, "{variant:?}");
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let p = random_ls(3, 2, 0);
        let g = Digraph::ring(4).unwrap();
        let opts = DecentralizedOptions::new(level(1e-3));
        assert!(run_decentralized(&p, &g, DecentralizedVariant::QdFirstOrder, &opts).is_err());
        assert!("nope".parse::<DecentralizedVariant>().is_err());
    }
}

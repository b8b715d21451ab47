//! Problem generation, experiment configuration, execution and comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::centralized::{run_centralized, CentralizedOptions, CentralizedVariant};
use crate::decentralized::{run_decentralized, DecentralizedOptions, DecentralizedVariant, InnerOptions};
use crate::diagnostics::{plateau_level, RunStatus, RunTrace, TraceMetadata};
use crate::error::{Error, Result};
use crate::graph::Digraph;
use crate::linalg::is_symmetric_pd;
use crate::objectives::{
    reference_solution, LocalObjective, Objective, ProblemInstance, ProblemKind, QuadraticObjective,
    SensorObjective,
};
use crate::quantization::QuantizerConfig;

/// Block length of each sensor objective (the decision vector has twice this).
pub const SENSOR_BLOCK: usize = 10;

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `N` objectives `½‖x − ζ_i‖²` with `ζ_i ~ N(0, I_n)`; the reference is the sample mean.
pub fn gen_convex_ls(agents: usize, dim: usize, seed: u64) -> Result<ProblemInstance> {
    if agents == 0 || dim == 0 {
        return Err(Error::InvalidInput("agents and dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objectives = (0..agents)
        .map(|_| Objective::Quadratic(QuadraticObjective::new(gaussian(dim, &mut rng))))
        .collect();
    with_reference(ProblemInstance::new(ProblemKind::ConvexLs, Some(seed), objectives)?)
}

/// Sensor objectives of dimension 20 with all data drawn from `N(0, 1)`.
pub fn gen_sensor(agents: usize, seed: u64) -> Result<ProblemInstance> {
    gen_sensor_with_block(agents, SENSOR_BLOCK, seed)
}

pub fn gen_sensor_with_block(agents: usize, block: usize, seed: u64) -> Result<ProblemInstance> {
    if agents == 0 || block == 0 {
        return Err(Error::InvalidInput("agents and block length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objectives = (0..agents)
        .map(|_| {
            let alpha = gaussian(block, &mut rng);
            let beta = gaussian(block, &mut rng);
            let sigma = gaussian(block, &mut rng);
            SensorObjective::new(alpha, beta, sigma).map(Objective::Sensor)
        })
        .collect::<Result<Vec<_>>>()?;
    with_reference(ProblemInstance::new(ProblemKind::Sensor, Some(seed), objectives)?)
}

/// Attaches the reference solution, rejecting stationary points that are not
/// strict local minima.
pub fn with_reference(p: ProblemInstance) -> Result<ProblemInstance> {
    let r = reference_solution(&p)?;
    let total = p
        .objectives()
        .iter()
        .try_fold(nalgebra::DMatrix::zeros(p.dim(), p.dim()), |acc, o| o.hessian(&r.z).map(|h| acc + h));
    if let Some(h) = total {
        if !is_symmetric_pd(&h) {
            return Err(Error::Oracle("reference point is not a strict local minimum".into()));
        }
    }
    p.with_reference(r)
}

pub fn problem_id(p: &ProblemInstance) -> String {
    match p.seed {
        Some(s) => format!("{}-N{}-n{}-s{}", p.kind, p.agent_count(), p.dim(), s),
        None => format!("{}-N{}-n{}", p.kind, p.agent_count(), p.dim()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemFile {
    kind: ProblemKind,
    seed: Option<u64>,
    objectives: Vec<Objective>,
}

/// Problem instance as TOML; the reference solution is recomputed on load.
pub fn problem_to_toml(p: &ProblemInstance) -> Result<String> {
    let file = ProblemFile {
        kind: p.kind.clone(),
        seed: p.seed,
        objectives: p.objectives().to_vec(),
    };
    toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
}

pub fn problem_from_toml(text: &str) -> Result<ProblemInstance> {
    let file: ProblemFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    with_reference(ProblemInstance::new(file.kind, file.seed, file.objectives)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    ConvexLs,
    Sensor,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemSource,
    #[serde(default = "default_agents")]
    pub agents: usize,
    /// Decision dimension; defaults to 10 for least squares and 20 for sensors.
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub path: Option<PathBuf>,
}

fn default_agents() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Complete,
    Random,
    EdgeList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default = "default_topology")]
    pub kind: TopologyKind,
    #[serde(default = "default_extra_edge_prob")]
    pub extra_edge_prob: f64,
    #[serde(default)]
    pub seed: u64,
    pub path: Option<PathBuf>,
}

fn default_topology() -> TopologyKind {
    TopologyKind::Random
}

fn default_extra_edge_prob() -> f64 {
    0.1
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            kind: default_topology(),
            extra_edge_prob: default_extra_edge_prob(),
            seed: 0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Alg1,
    FirstOrder,
    ConstantMetric,
    QdFirstOrder,
    Bilevel,
    ApproxSecondOrder,
}

impl Variant {
    pub fn is_decentralized(self) -> bool {
        matches!(
            self,
            Variant::QdFirstOrder | Variant::Bilevel | Variant::ApproxSecondOrder
        )
    }

    fn centralized(self) -> Option<CentralizedVariant> {
        match self {
            Variant::Alg1 => Some(CentralizedVariant::SecondOrder),
            Variant::FirstOrder => Some(CentralizedVariant::FirstOrder),
            Variant::ConstantMetric => Some(CentralizedVariant::ConstantMetric),
            _ => None,
        }
    }

    fn decentralized(self) -> Option<DecentralizedVariant> {
        match self {
            Variant::QdFirstOrder => Some(DecentralizedVariant::QdFirstOrder),
            Variant::Bilevel => Some(DecentralizedVariant::Bilevel),
            Variant::ApproxSecondOrder => Some(DecentralizedVariant::ApproxSecondOrder),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Alg1 => "alg1",
            Variant::FirstOrder => "first_order",
            Variant::ConstantMetric => "constant_metric",
            Variant::QdFirstOrder => "qd_first_order",
            Variant::Bilevel => "bilevel",
            Variant::ApproxSecondOrder => "approx_second_order",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let quoted = format!("v = {s:?}");
        #[derive(Deserialize)]
        struct Wrap {
            v: Variant,
        }
        toml::from_str::<Wrap>(&quoted)
            .map(|w| w.v)
            .map_err(|_| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Starting point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `z = 0`, `λ = 0`.
    Zero,
    /// Seeded Gaussian `ẑ`, `λ̂` with standard deviation `init_scale` (decentralized only).
    Random,
    /// `z* + p` with a seeded direction `p` of norm `init_scale`, `λ = λ*`.
    NearReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub variant: Variant,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub delta: Option<f64>,
    #[serde(default = "default_eps_inner")]
    pub eps_inner: f64,
    #[serde(default = "default_inner_max_iters")]
    pub inner_max_iters: usize,
    /// Penalty of the bilevel inner loop; `rho` when absent.
    pub rho_inner: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stopping tolerance; 0 runs decentralized variants for the whole budget.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub warm_start_inner: bool,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub curvature_noise_factor: f64,
}

fn default_rho() -> f64 {
    1.0
}
fn default_eps_inner() -> f64 {
    1e-8
}
fn default_inner_max_iters() -> usize {
    1000
}
fn default_max_iters() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-10
}
fn default_init() -> InitKind {
    InitKind::Zero
}
fn default_init_scale() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub topology: TopologySpec,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub run: RunSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills in dimension defaults and checks cross-field rules.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let a = &cfg.algorithm;
        if a.variant.is_decentralized() && a.delta.is_none() {
            return Err(Error::Config(format!(
                "variant {} needs a quantization level `delta`",
                a.variant
            )));
        }
        if !a.variant.is_decentralized() && a.delta.is_some() {
            return Err(Error::Config("`delta` only applies to decentralized variants".into()));
        }
        if let Some(d) = a.delta {
            QuantizerConfig::new(d).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(a.rho > 0.0 && a.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", a.rho)));
        }
        if let Some(r) = a.rho_inner.filter(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("rho_inner must be positive, got {r}")));
        }
        if !(a.eps_inner > 0.0) || !(a.tol >= 0.0) || !(a.init_scale >= 0.0) {
            return Err(Error::Config("eps_inner must be positive; tol and init_scale nonnegative".into()));
        }
        if a.init == InitKind::Random && !a.variant.is_decentralized() {
            return Err(Error::Config("random initialization is only defined for decentralized variants".into()));
        }
        let p = &mut cfg.problem;
        match p.kind {
            ProblemSource::ConvexLs => {
                p.dim.get_or_insert(10);
            }
            ProblemSource::Sensor => {
                let d = *p.dim.get_or_insert(2 * SENSOR_BLOCK);
                if d == 0 || d % 2 != 0 {
                    return Err(Error::Config(format!("sensor dimension must be even, got {d}")));
                }
            }
            ProblemSource::File => {
                if p.path.is_none() {
                    return Err(Error::Config("problem kind `file` needs `path`".into()));
                }
            }
        }
        if cfg.topology.kind == TopologyKind::EdgeList && cfg.topology.path.is_none() {
            return Err(Error::Config("topology kind `edge_list` needs `path`".into()));
        }
        if !(0.0..=1.0).contains(&cfg.topology.extra_edge_prob) {
            return Err(Error::Config("extra_edge_prob must lie in [0, 1]".into()));
        }
        Ok(cfg)
    }

    pub fn build_problem(&self) -> Result<ProblemInstance> {
        let p = &self.problem;
        match p.kind {
            ProblemSource::ConvexLs => gen_convex_ls(p.agents, p.dim.unwrap_or(10), p.seed),
            ProblemSource::Sensor => gen_sensor_with_block(p.agents, p.dim.unwrap_or(2 * SENSOR_BLOCK) / 2, p.seed),
            ProblemSource::File => {
                let path = p.path.as_ref().ok_or_else(|| Error::Config("missing problem path".into()))?;
                problem_from_toml(&fs::read_to_string(path)?)
            }
        }
    }

    pub fn build_graph(&self, agents: usize) -> Result<Digraph> {
        if agents == 1 {
            return Ok(Digraph::single_agent());
        }
        let t = &self.topology;
        match t.kind {
            TopologyKind::Ring => Digraph::ring(agents),
            TopologyKind::Complete => Digraph::complete(agents),
            TopologyKind::Random => Digraph::random_strongly_connected(agents, t.extra_edge_prob, t.seed),
            TopologyKind::EdgeList => {
                let path = t.path.as_ref().ok_or_else(|| Error::Config("missing edge list path".into()))?;
                Digraph::from_edge_list(agents, &fs::read_to_string(path)?)
            }
        }
    }
}

/// Everything recorded next to a trace so the run can be reproduced and audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub problem_id: String,
    pub agents: usize,
    pub dim: usize,
    pub primal_variables: usize,
    pub dual_variables: usize,
    pub graph_edges: usize,
    pub graph_diameter: usize,
    pub status: RunStatus,
    pub exit_code: i32,
    pub iterations: usize,
    pub final_consensus_error: Option<f64>,
    pub total_fqac_messages: u64,
    pub note: Option<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trace: RunTrace,
    pub metadata: RunMetadata,
}

/// Path of the metadata file written next to a trace CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

fn starting_point(
    problem: &ProblemInstance,
    a: &AlgorithmSpec,
    seed: u64,
) -> Result<(Option<DVector<f64>>, Option<Vec<DVector<f64>>>)> {
    match a.init {
        InitKind::Zero | InitKind::Random => Ok((None, None)),
        InitKind::NearReference => {
            let r = problem
                .reference()
                .ok_or_else(|| Error::Config("near_reference init needs a reference solution".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a17);
            let dir = gaussian(problem.dim(), &mut rng);
            let z = &r.z + dir.normalize() * a.init_scale;
            Ok((Some(z), Some(r.lambdas.clone())))
        }
    }
}

/// Builds the problem and graph, runs the configured variant and, when an
/// output path is set, writes the trace CSV and its metadata sidecar.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let cfg = config.resolved()?;
    let problem = cfg.build_problem()?;
    let graph = cfg.build_graph(problem.agent_count())?;
    let a = &cfg.algorithm;
    let id = problem_id(&problem);
    let (initial_z, initial_lambdas) = starting_point(&problem, a, cfg.run.seed)?;

    let trace = if let Some(variant) = a.variant.centralized() {
        let opts = CentralizedOptions {
            rho: a.rho,
            max_iters: a.max_iters,
            tol: a.tol,
            seed: cfg.run.seed,
            initial_z,
            initial_lambdas,
            metrics: None,
            problem_id: id.clone(),
        };
        run_centralized(&problem, variant, &opts)?
    } else {
        let variant = a
            .variant
            .decentralized()
            .ok_or_else(|| Error::Config("unsupported variant".into()))?;
        let level = QuantizerConfig::new(a.delta.unwrap_or_default())?;
        let opts = DecentralizedOptions {
            rho: a.rho,
            max_iters: a.max_iters,
            tol: (a.tol > 0.0).then_some(a.tol),
            seed: cfg.run.seed,
            initial_z,
            initial_lambdas,
            random_init_scale: (a.init == InitKind::Random).then_some(a.init_scale),
            inner: InnerOptions {
                eps: a.eps_inner,
                max_iters: a.inner_max_iters,
                rho: a.rho_inner,
                ..InnerOptions::default()
            },
            warm_start_inner: a.warm_start_inner,
            curvature_noise_factor: a.curvature_noise_factor,
            problem_id: id.clone(),
            ..DecentralizedOptions::new(level)
        };
        run_decentralized(&problem, &graph, variant, &opts)?
    };

    let agents = problem.agent_count();
    let dim = problem.dim();
    let metadata = RunMetadata {
        problem_id: id,
        agents,
        dim,
        primal_variables: agents * dim + dim,
        dual_variables: agents * dim,
        graph_edges: graph.edge_count(),
        graph_diameter: graph.diameter(),
        status: trace.status,
        exit_code: trace.status.exit_code(),
        iterations: trace.len(),
        final_consensus_error: trace.rows().last().map(|r| r.consensus_error_l1).filter(|v| v.is_finite()),
        total_fqac_messages: trace.total_fqac_messages(),
        note: trace.note.clone(),
        config: cfg.clone(),
    };
    if let Some(out) = &cfg.run.output {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        trace.write_csv(fs::File::create(out)?, true)?;
        let text = toml::to_string(&metadata).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(sidecar_path(out), text)?;
    }
    Ok(ExperimentOutcome { trace, metadata })
}

/// One row of a run comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub variant: Option<String>,
    pub delta: Option<f64>,
    pub iterations: usize,
    pub final_error: f64,
    pub plateau: f64,
    pub iterations_to_threshold: Option<usize>,
    pub messages: u64,
}

/// Summarizes trace CSVs. Metadata comes from each file's sidecar when present.
pub fn compare_runs(paths: &[PathBuf], threshold: f64) -> Result<Vec<RunSummary>> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no traces to compare".into()));
    }
    paths
        .iter()
        .map(|path| {
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            let sidecar: Option<RunMetadata> = fs::read_to_string(sidecar_path(path))
                .ok()
                .and_then(|t| toml::from_str(&t).ok());
            let meta = TraceMetadata {
                variant: sidecar
                    .as_ref()
                    .map(|m| format!("{:?}", m.config.algorithm.variant))
                    .unwrap_or_default(),
                rho: sidecar.as_ref().map_or(f64::NAN, |m| m.config.algorithm.rho),
                delta: sidecar.as_ref().and_then(|m| m.config.algorithm.delta),
                seed: sidecar.as_ref().map_or(0, |m| m.config.run.seed),
                problem_id: sidecar.as_ref().map(|m| m.problem_id.clone()).unwrap_or_default(),
            };
            let trace = RunTrace::read_csv(fs::File::open(path)?, meta)
                .map_err(|e| match e {
                    Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
                    other => other,
                })?;
            let errors = trace.consensus_errors();
            Ok(RunSummary {
                label,
                variant: sidecar.as_ref().map(|m| variant_name(m.config.algorithm.variant)),
                delta: trace.metadata().delta,
                iterations: trace.len(),
                final_error: errors.last().copied().unwrap_or(f64::NAN),
                plateau: plateau_level(&errors).unwrap_or(f64::NAN),
                iterations_to_threshold: trace.iterations_to(threshold),
                messages: trace.total_fqac_messages(),
            })
        })
        .collect()
}

fn variant_name(v: Variant) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|t| t.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{v:?}"))
}

/// `Some(true)` when plateaus strictly decrease as `Δ` decreases; `None`
/// when fewer than two summaries carry a `Δ`.
pub fn plateau_ordering(summaries: &[RunSummary]) -> Option<bool> {
    let mut with_delta: Vec<(f64, f64)> = summaries
        .iter()
        .filter_map(|s| s.delta.map(|d| (d, s.plateau)))
        .collect();
    if with_delta.len() < 2 {
        return None;
    }
    with_delta.sort_by(|a, b| b.0.total_cmp(&a.0));
    Some(with_delta.windows(2).all(|w| w[1].0 < w[0].0 && w[1].1 < w[0].1))
}

pub fn render_summary_table(summaries: &[RunSummary], threshold: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<20} {:>9} {:>6} {:>12} {:>12} {:>10} {:>12}",
        "run", "variant", "delta", "iters", "final_err", "plateau", format!("to {threshold:.0e}"), "messages"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<24} {:<20} {:>9} {:>6} {:>12.4e} {:>12.4e} {:>10} {:>12}",
            s.label,
            s.variant.as_deref().unwrap_or("-"),
            s.delta.map(|d| format!("{d:.0e}")).unwrap_or_else(|| "-".into()),
            s.iterations,
            s.final_error,
            s.plateau,
            s.iterations_to_threshold
                .map(|k| k.to_string())
                .unwrap_or_else(|| "-".into()),
            s.messages
        );
    }
    match plateau_ordering(summaries) {
        Some(true) => out.push_str("plateau ordering: decreasing with delta\n"),
        Some(false) => out.push_str("plateau ordering: NOT decreasing with delta\n"),
        None => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::LocalObjective;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap()
    }

    #[test]
    fn convex_ls_generator() {
        let p = gen_convex_ls(20, 10, 3).unwrap();
        assert_eq!(p.agent_count(), 20);
        assert_eq!(p.dim(), 10);
        let mean = p
            .objectives()
            .iter()
            .map(|o| match o {
                Objective::Quadratic(q) => q.target.clone(),
                _ => unreachable!(),
            })
            .fold(DVector::zeros(10), |a, t| a + t)
            / 20.0;
        assert!((&p.reference().unwrap().z - mean).norm() <= 1e-14);
        assert_eq!(gen_convex_ls(20, 10, 3).unwrap(), p);

        let one = gen_convex_ls(1, 1, 9).unwrap();
        let Objective::Quadratic(q) = &one.objectives()[0] else { unreachable!() };
        assert_eq!(one.reference().unwrap().z, q.target);
    }

    #[test]
    fn sensor_generator() {
        let p = gen_sensor(20, 1).unwrap();
        assert_eq!(p.dim(), 20);
        let z = &p.reference().unwrap().z;
        assert!(p.total_gradient(z).norm() <= 1e-12);

        // Zero coupling target with equal blocks: [ζ; ζ] is stationary.
        let zeta = DVector::from_vec(vec![0.3, -1.0]);
        let s = SensorObjective::new(zeta.clone(), zeta.clone(), DVector::zeros(2)).unwrap();
        let mut stacked = DVector::zeros(4);
        stacked.rows_mut(0, 2).copy_from(&zeta);
        stacked.rows_mut(2, 2).copy_from(&zeta);
        assert!(s.gradient(&stacked).norm() <= 1e-15);
    }

    #[test]
    fn problem_file_round_trip() {
        for p in [gen_convex_ls(3, 2, 1).unwrap(), gen_sensor_with_block(3, 2, 1).unwrap()] {
            let text = problem_to_toml(&p).unwrap();
            let back = problem_from_toml(&text).unwrap();
            assert_eq!(back.objectives(), p.objectives());
            assert!((&back.reference().unwrap().z - &p.reference().unwrap().z).norm() <= 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let err = config(
            "[problem]\nkind = \"convex_ls\"\n[algorithm]\nvariant = \"qd_first_order\"\n",
        )
        .resolved();
        assert!(matches!(err, Err(Error::Config(_))));
        let err = config("[problem]\nkind = \"convex_ls\"\n[algorithm]\nvariant = \"alg1\"\ndelta = 0.1\n").resolved();
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[problem]\nkind = \"convex_ls\"\nbogus = 1\n[algorithm]\nvariant = \"alg1\"\n").is_err());
        let ok = config("[problem]\nkind = \"sensor\"\n[algorithm]\nvariant = \"alg1\"\n").resolved().unwrap();
        assert_eq!(ok.problem.dim, Some(20));
        assert_eq!(ok.algorithm.rho, 1.0);
        assert_eq!("approx_second_order".parse::<Variant>().unwrap(), Variant::ApproxSecondOrder);
        assert!("alg9".parse::<Variant>().is_err());
    }

    #[test]
    fn run_writes_reproducible_csv_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run.csv");
        let text = format!(
            "[problem]\nkind = \"convex_ls\"\nagents = 6\ndim = 3\nseed = 2\n\
             [topology]\nkind = \"random\"\nseed = 1\n\
             [algorithm]\nvariant = \"qd_first_order\"\nrho = 2.0\ndelta = 1e-5\nmax_iters = 25\n\
             [run]\nseed = 4\noutput = {:?}\n",
            out.display().to_string()
        );
        let cfg = config(&text);
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.metadata.primal_variables, 6 * 3 + 3);
        assert_eq!(first.metadata.dual_variables, 18);
        let meta: RunMetadata = toml::from_str(&fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
        assert_eq!(meta.config.algorithm.eps_inner, 1e-8);
        assert_eq!(meta.config.problem.dim, Some(3));

        let again = run_experiment(&cfg).unwrap();
        let strip = |t: &RunTrace| {
            let mut v = Vec::new();
            t.write_csv(&mut v, false).unwrap();
            v
        };
        assert_eq!(strip(&first.trace), strip(&again.trace));

        let summaries = compare_runs(&[out.clone()], 1e-6).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].variant.as_deref(), Some("qd_first_order"));
        assert_eq!(summaries[0].delta, Some(1e-5));
        assert!(render_summary_table(&summaries, 1e-6).contains("run"));
    }

    #[test]
    fn compare_rejects_empty_and_bad_schema() {
        assert!(matches!(compare_runs(&[], 1e-6), Err(Error::InvalidInput(_))));
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "iteration,err\n1,2\n").unwrap();
        assert!(matches!(compare_runs(&[bad], 1e-6), Err(Error::Schema(_))));
    }

    #[test]
    fn plateau_ordering_report() {
        let row = |d: f64, p: f64| RunSummary {
            label: String::new(),
            variant: None,
            delta: Some(d),
            iterations: 1,
            final_error: p,
            plateau: p,
            iterations_to_threshold: None,
            messages: 0,
        };
        assert_eq!(plateau_ordering(&[row(1e-6, 1e-5), row(1e-4, 1e-3), row(1e-5, 1e-4)]), Some(true));
        assert_eq!(plateau_ordering(&[row(1e-6, 1e-3), row(1e-4, 1e-5)]), Some(false));
        assert_eq!(plateau_ordering(&[row(1e-6, 1e-3)]), None);
    }
}

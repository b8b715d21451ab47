use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use caladin::fqac::{fqac_run_with, write_transcript_csv, FqacOptions};
use caladin::graph::Digraph;
use caladin::harness::{
    compare_runs, gen_convex_ls, gen_sensor, plateau_ordering, problem_id, problem_to_toml, render_summary_table,
    run_experiment, sidecar_path, ExperimentConfig, InitKind, ProblemSource, TopologyKind, Variant,
};
use caladin::quantization::{quantize, QuantizerConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "caladin", version, about = "Consensus ALADIN solvers and quantized averaging over digraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance and write it as TOML.
    GenProblem(GenProblemArgs),
    /// Run one experiment from a config file and/or flags.
    Run(RunArgs),
    /// Summarize trace CSVs side by side.
    Compare(CompareArgs),
    /// Run the quantized averaging protocol once on random inputs.
    FqacDemo(FqacDemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    ConvexLs,
    Sensor,
}

#[derive(Args)]
struct GenProblemArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 20)]
    agents: usize,
    /// Decision dimension (least squares only; sensors are always 20).
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    /// Problem file for `--kind file`.
    #[arg(long)]
    problem_path: Option<PathBuf>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    problem_seed: Option<u64>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    topology_path: Option<PathBuf>,
    #[arg(long)]
    extra_edge_prob: Option<f64>,
    #[arg(long)]
    topology_seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps_inner: Option<f64>,
    #[arg(long)]
    inner_max_iters: Option<usize>,
    #[arg(long)]
    rho_inner: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    warm_start_inner: bool,
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    curvature_noise_factor: Option<f64>,
    /// Run seed (quantized protocol routing and random starts).
    #[arg(long)]
    seed: Option<u64>,
    /// Trace CSV; the metadata sidecar is written next to it.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    /// Consensus error used for the iterations-to-threshold column.
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
}

#[derive(Args)]
struct FqacDemoArgs {
    #[arg(long, default_value_t = 8)]
    agents: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = 0.2)]
    extra_edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write every piece transfer as CSV.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenProblem(a) => gen_problem(a).map(|_| 0),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a).map(|_| 0),
        Command::FqacDemo(a) => fqac_demo(a).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn gen_problem(a: GenProblemArgs) -> Result<()> {
    let p = match a.kind {
        Kind::ConvexLs => gen_convex_ls(a.agents, a.dim, a.seed)?,
        Kind::Sensor => gen_sensor(a.agents, a.seed)?,
    };
    fs::write(&a.out, problem_to_toml(&p)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} -> {}", problem_id(&p), a.out.display());
    Ok(())
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    #[derive(serde::Deserialize)]
    struct Wrap<T> {
        v: T,
    }
    let text = format!("v = {:?}", value.replace('-', "_"));
    toml::from_str::<Wrap<T>>(&text)
        .map(|w| w.v)
        .map_err(|_| anyhow::anyhow!("unknown {what} {value:?}"))
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let (Some(kind), Some(variant)) = (&a.kind, &a.variant) else {
                bail!("without --config both --kind and --variant are required");
            };
            parse_enum::<ProblemSource>("problem kind", kind)?;
            parse_enum::<Variant>("variant", variant)?;
            let text = format!(
                "[problem]\nkind = {:?}\n[algorithm]\nvariant = {:?}\n",
                kind.replace('-', "_"),
                variant.replace('-', "_")
            );
            ExperimentConfig::from_toml(&text)?
        }
    };
    let p = &mut cfg.problem;
    if let Some(k) = &a.kind {
        p.kind = parse_enum("problem kind", k)?;
    }
    set(&mut p.agents, a.agents);
    set(&mut p.seed, a.problem_seed);
    if a.dim.is_some() {
        p.dim = a.dim;
    }
    if a.problem_path.is_some() {
        p.path.clone_from(&a.problem_path);
    }
    let t = &mut cfg.topology;
    if let Some(k) = &a.topology {
        t.kind = parse_enum::<TopologyKind>("topology", k)?;
    }
    set(&mut t.extra_edge_prob, a.extra_edge_prob);
    set(&mut t.seed, a.topology_seed);
    if a.topology_path.is_some() {
        t.path.clone_from(&a.topology_path);
    }
    let al = &mut cfg.algorithm;
    if let Some(v) = &a.variant {
        al.variant = parse_enum("variant", v)?;
    }
    set(&mut al.rho, a.rho);
    if a.delta.is_some() {
        al.delta = a.delta;
    }
    set(&mut al.eps_inner, a.eps_inner);
    set(&mut al.inner_max_iters, a.inner_max_iters);
    if a.rho_inner.is_some() {
        al.rho_inner = a.rho_inner;
    }
    set(&mut al.max_iters, a.max_iters);
    set(&mut al.tol, a.tol);
    al.warm_start_inner |= a.warm_start_inner;
    if let Some(i) = &a.init {
        al.init = parse_enum::<InitKind>("init", i)?;
    }
    set(&mut al.init_scale, a.init_scale);
    set(&mut al.curvature_noise_factor, a.curvature_noise_factor);
    set(&mut cfg.run.seed, a.seed);
    if a.output.is_some() {
        cfg.run.output.clone_from(&a.output);
    }
    Ok(cfg.resolved()?)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(a: RunArgs) -> Result<i32> {
    let cfg = build_config(&a)?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(0);
    }
    let out = run_experiment(&cfg)?;
    let m = &out.metadata;
    println!("problem     {}", m.problem_id);
    println!("variables   {} primal, {} dual", m.primal_variables, m.dual_variables);
    println!("graph       {} edges, diameter {}", m.graph_edges, m.graph_diameter);
    println!("status      {} after {} iterations", m.status, m.iterations);
    if let Some(e) = m.final_consensus_error {
        println!("consensus   {e:.6e}");
    }
    if m.total_fqac_messages > 0 {
        println!("messages    {}", m.total_fqac_messages);
    }
    if let Some(note) = &m.note {
        println!("note        {note}");
    }
    if let Some(path) = &cfg.run.output {
        println!("trace       {} (+ {})", path.display(), sidecar_path(path).display());
    }
    Ok(m.exit_code)
}

fn compare(a: CompareArgs) -> Result<()> {
    let summaries = compare_runs(&a.traces, a.threshold)?;
    print!("{}", render_summary_table(&summaries, a.threshold));
    if let Some(ordered) = plateau_ordering(&summaries) {
        println!(
            "plateaus {} with the quantization level",
            if ordered { "decrease" } else { "do NOT decrease" }
        );
    }
    Ok(())
}

fn fqac_demo(a: FqacDemoArgs) -> Result<()> {
    let graph = if a.agents == 1 {
        Digraph::single_agent()
    } else {
        Digraph::random_strongly_connected(a.agents, a.extra_edge_prob, a.seed)?
    };
    let level = QuantizerConfig::new(a.delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let ys: Vec<DVector<f64>> = (0..a.agents)
        .map(|_| DVector::from_fn(a.dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let opts = FqacOptions {
        record_transcript: a.transcript.is_some(),
        ..FqacOptions::default()
    };
    let result = fqac_run_with(&ys, &graph, level, graph.diameter().max(1), a.seed, opts)?;
    let mut target = DVector::zeros(a.dim);
    for y in &ys {
        target += DVector::from_vec(quantize(y.as_slice(), level)?);
    }
    target /= a.agents as f64;
    println!(
        "graph       {} agents, {} edges, diameter {}",
        a.agents,
        graph.edge_count(),
        graph.diameter()
    );
    println!("rounds      {}", result.rounds);
    println!("messages    {} pieces, {} flood", result.messages, result.flood_messages);
    println!("output      {:?}", result.outputs[0].as_slice());
    println!("average     {:?}", target.as_slice());
    println!("max error   {:.3e} (delta {:.0e})", (&result.outputs[0] - &target).amax(), a.delta);
    if let (Some(path), Some(entries)) = (&a.transcript, &result.transcript) {
        write_transcript_csv(entries, fs::File::create(path)?)?;
        println!("transcript  {} ({} transfers)", path.display(), entries.len());
    }
    Ok(())
}

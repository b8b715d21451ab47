//! Finite-time quantized average consensus over a strongly connected digraph.
//!
//! Each agent starts with integer mass `χ = 2⌊y/Δ⌋` and count `ξ = 2`. Every
//! synchronous round it splits its mass into `ξ` near-equal pieces, keeps one
//! and sends the others to uniformly chosen members of its out-neighborhood
//! (itself included). Max/min flooding over windows of `D` rounds detects when
//! every ratio `χ/ξ` lies within one lattice step, at which point each agent
//! outputs `Δ·min ⌊χ/ξ⌋`.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Digraph;
use crate::quantization::{to_integer_lattice, QuantizerConfig};

pub const DEFAULT_ROUND_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FqacAgentState {
    pub mass: Vec<i64>,
    pub count: i64,
    pub window_max: Vec<i64>,
    pub window_min: Vec<i64>,
}

impl FqacAgentState {
    fn new(lattice: Vec<i64>) -> Self {
        let mass: Vec<i64> = lattice.into_iter().map(|k| 2 * k).collect();
        Self {
            window_max: mass.iter().map(|&c| c.div_euclid(2)).collect(),
            window_min: mass.iter().map(|&c| c.div_euclid(2)).collect(),
            mass,
            count: 2,
        }
    }

    fn open_window(&mut self) {
        for j in 0..self.mass.len() {
            let c = self.mass[j];
            self.window_min[j] = c.div_euclid(self.count);
            self.window_max[j] = -(-c).div_euclid(self.count);
        }
    }

    fn window_closed(&self) -> bool {
        self.window_max
            .iter()
            .zip(&self.window_min)
            .all(|(hi, lo)| hi - lo <= 1)
    }
}

/// One transmitted piece, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub round: u64,
    pub sender: usize,
    pub receiver: usize,
    pub piece: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqacResult {
    pub outputs: Vec<DVector<f64>>,
    pub rounds: u64,
    /// Mass pieces sent to another agent.
    pub messages: u64,
    /// `(M, m)` broadcasts, one per out-edge per round.
    pub flood_messages: u64,
    pub transcript: Option<Vec<TranscriptEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FqacOptions {
    pub round_cap: u64,
    pub record_transcript: bool,
}

impl Default for FqacOptions {
    fn default() -> Self {
        Self {
            round_cap: DEFAULT_ROUND_CAP,
            record_transcript: false,
        }
    }
}

/// Protocol state for one invocation.
#[derive(Debug, Clone)]
pub struct FqacNetwork<'g> {
    graph: &'g Digraph,
    diameter: u64,
    pub states: Vec<FqacAgentState>,
    round: u64,
    messages: u64,
    flood_messages: u64,
    transcript: Option<Vec<TranscriptEntry>>,
}

impl<'g> FqacNetwork<'g> {
    /// Quantizes the inputs onto the lattice and initializes every agent.
    pub fn new(ys: &[DVector<f64>], graph: &'g Digraph, level: QuantizerConfig, diameter: usize) -> Result<Self> {
        if ys.len() != graph.agent_count() {
            return Err(Error::InvalidInput(format!(
                "{} inputs for a graph with {} agents",
                ys.len(),
                graph.agent_count()
            )));
        }
        if diameter < graph.diameter().max(1) {
            return Err(Error::InvalidInput(format!(
                "window length {diameter} is shorter than the graph diameter {}",
                graph.diameter()
            )));
        }
        let dim = ys[0].len();
        let states = ys
            .iter()
            .map(|y| {
                if y.len() != dim {
                    return Err(Error::InvalidInput("inputs have different dimensions".into()));
                }
                Ok(FqacAgentState::new(to_integer_lattice(y.as_slice(), level)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graph,
            diameter: diameter as u64,
            states,
            round: 0,
            messages: 0,
            flood_messages: 0,
            transcript: None,
        })
    }

    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Component-wise `Σ χ_i` (wide to rule out overflow) and `Σ ξ_i`.
    pub fn totals(&self) -> (Vec<i128>, i64) {
        let dim = self.states.first().map_or(0, |s| s.mass.len());
        let mut mass = vec![0i128; dim];
        for s in &self.states {
            for (acc, &c) in mass.iter_mut().zip(&s.mass) {
                *acc += c as i128;
            }
        }
        (mass, self.states.iter().map(|s| s.count).sum())
    }

    /// Runs one synchronous round. `choose(agent, options)` picks an index in
    /// `0..options` for every piece; index `options − 1` keeps it at the agent,
    /// smaller indices address the sorted out-neighbors. Returns true when the
    /// stopping test fired for every agent at the end of this round.
    pub fn step_with(&mut self, mut choose: impl FnMut(usize, usize) -> usize) -> bool {
        self.round += 1;
        let t = self.round;
        let n_agents = self.states.len();

        if (t - 1) % self.diameter == 0 {
            for s in &mut self.states {
                s.open_window();
            }
        }

        let snapshot: Vec<(Vec<i64>, Vec<i64>)> = self
            .states
            .iter()
            .map(|s| (s.window_max.clone(), s.window_min.clone()))
            .collect();
        for i in 0..n_agents {
            for &j in self.graph.in_neighbors(i) {
                let (hi, lo) = &snapshot[j];
                let s = &mut self.states[i];
                for k in 0..hi.len() {
                    s.window_max[k] = s.window_max[k].max(hi[k]);
                    s.window_min[k] = s.window_min[k].min(lo[k]);
                }
            }
            self.flood_messages += self.graph.out_degree(i) as u64;
        }

        let mut inbox: Vec<(usize, Vec<i64>)> = Vec::new();
        for i in 0..n_agents {
            let out = self.graph.out_neighbors(i);
            let options = out.len() + 1;
            let s = &mut self.states[i];
            let mut remaining = s.count;
            while remaining > 1 {
                let piece: Vec<i64> = s.mass.iter().map(|&c| c.div_euclid(s.count)).collect();
                for (c, p) in s.mass.iter_mut().zip(&piece) {
                    *c -= p;
                }
                s.count -= 1;
                remaining -= 1;
                let pick = choose(i, options);
                let receiver = if pick + 1 >= options { i } else { out[pick] };
                if receiver != i {
                    self.messages += 1;
                }
                if let Some(tr) = &mut self.transcript {
                    tr.push(TranscriptEntry {
                        round: t,
                        sender: i,
                        receiver,
                        piece: piece.clone(),
                    });
                }
                inbox.push((receiver, piece));
            }
        }
        for (receiver, piece) in inbox {
            let s = &mut self.states[receiver];
            for (c, p) in s.mass.iter_mut().zip(&piece) {
                *c += p;
            }
            s.count += 1;
        }

        t % self.diameter == 0 && self.states.iter().all(FqacAgentState::window_closed)
    }

    /// One round with uniform random routing.
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> bool {
        self.step_with(|_, options| rng.random_range(0..options))
    }

    /// Outputs `m·Δ` and the counters, typically once `step` has returned true.
    pub fn into_result(self, level: QuantizerConfig) -> FqacResult {
        let delta = level.level();
        FqacResult {
            outputs: self
                .states
                .iter()
                .map(|s| DVector::from_iterator(s.window_min.len(), s.window_min.iter().map(|&m| m as f64 * delta)))
                .collect(),
            rounds: self.round,
            messages: self.messages,
            flood_messages: self.flood_messages,
            transcript: self.transcript,
        }
    }
}

/// One round of the protocol with uniform random routing drawn from `rng`.
pub fn fqac_round<R: Rng>(network: &mut FqacNetwork<'_>, rng: &mut R) -> bool {
    network.step(rng)
}

/// Runs the protocol to termination with windows of `diameter` rounds.
pub fn fqac_run(
    ys: &[DVector<f64>],
    graph: &Digraph,
    level: QuantizerConfig,
    diameter: usize,
    seed: u64,
) -> Result<FqacResult> {
    fqac_run_with(ys, graph, level, diameter, seed, FqacOptions::default())
}

pub fn fqac_run_with(
    ys: &[DVector<f64>],
    graph: &Digraph,
    level: QuantizerConfig,
    diameter: usize,
    seed: u64,
    opts: FqacOptions,
) -> Result<FqacResult> {
    let mut network = FqacNetwork::new(ys, graph, level, diameter)?;
    if opts.record_transcript {
        network.record_transcript();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if network.round() >= opts.round_cap {
            return Err(Error::Protocol(format!(
                "no termination after {} rounds",
                opts.round_cap
            )));
        }
        if network.step(&mut rng) {
            return Ok(network.into_result(level));
        }
    }
}

/// Writes `round,sender,receiver,piece` rows; vector pieces are `;`-joined.
pub fn write_transcript_csv<W: Write>(entries: &[TranscriptEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "sender", "receiver", "piece"])?;
    for e in entries {
        let piece = e
            .piece
            .iter()
            .map(|p| p.to_string())
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            e.round.to_string(),
            e.sender.to_string(),
            e.receiver.to_string(),
            piece,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::quantize;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalars(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    fn level(d: f64) -> QuantizerConfig {
        QuantizerConfig::new(d).unwrap()
    }

    fn quantized_mean(ys: &[DVector<f64>], d: f64) -> DVector<f64> {
        let n = ys[0].len();
        ys.iter()
            .map(|y| DVector::from_vec(quantize(y.as_slice(), level(d)).unwrap()))
            .fold(DVector::zeros(n), |a, q| a + q)
            / ys.len() as f64
    }

    #[test]
    fn single_agent_example() {
        let g = Digraph::single_agent();
        let r = fqac_run(&scalars(&[0.37]), &g, level(0.1), 1, 0).unwrap();
        assert!((r.outputs[0][0] - 0.3).abs() < 1e-12);
        assert_eq!(r.rounds, 1);
        assert_eq!(r.messages, 0);
    }

    #[test]
    fn equal_inputs_stop_in_the_first_window() {
        let g = Digraph::ring(6).unwrap();
        let ys = scalars(&[1.234; 6]);
        let r = fqac_run(&ys, &g, level(0.01), g.diameter(), 3).unwrap();
        assert_eq!(r.rounds, g.diameter() as u64);
        for o in &r.outputs {
            assert!((o[0] - 1.23).abs() < 1e-12);
        }
    }

    #[test]
    fn two_agent_ring_example_over_seeds() {
        let g = Digraph::ring(2).unwrap();
        for seed in 0..200 {
            let r = fqac_run(&scalars(&[0.25, 0.35]), &g, level(0.1), 1, seed).unwrap();
            let a = r.outputs[0][0];
            assert_eq!(a, r.outputs[1][0]);
            assert!((a - 0.2).abs() < 1e-12 || (a - 0.3).abs() < 1e-12, "output {a}");
            assert!((a - 0.25).abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn scripted_two_round_transcript() {
        // Ring of two, inputs on lattice 2 and 3: masses 4 and 6, counts 2 and 2.
        let g = Digraph::ring(2).unwrap();
        let mut net = FqacNetwork::new(&scalars(&[0.25, 0.35]), &g, level(0.1), 1).unwrap();
        net.record_transcript();
        // Round 1: agent 0 keeps its piece, agent 1 sends to agent 0.
        let mut script = vec![1usize, 0].into_iter();
        let stopped = net.step_with(|_, _| script.next().unwrap());
        // Agent 0: piece ⌊4/2⌋ = 2 to itself. Agent 1: piece ⌊6/2⌋ = 3 to agent 0.
        // Afterwards agent 0 holds 2 + 2 + 3 = 7 over 3, agent 1 holds 3 over 1.
        assert_eq!(net.states[0].mass, vec![7]);
        assert_eq!(net.states[0].count, 3);
        assert_eq!(net.states[1].mass, vec![3]);
        assert_eq!(net.states[1].count, 1);
        // Window extrema after one flood: max ⌈6/2⌉ = 3, min ⌊4/2⌋ = 2.
        assert_eq!(net.states[0].window_max, vec![3]);
        assert_eq!(net.states[1].window_min, vec![2]);
        assert!(stopped);

        // Round 2: new window from ratios 7/3 and 3/1; agent 0 splits twice.
        let mut script = vec![0usize, 1].into_iter();
        let stopped = net.step_with(|_, _| script.next().unwrap());
        // Pieces ⌊7/3⌋ = 2 to agent 1, then ⌊5/2⌋ = 2 kept; agent 0 retains 3.
        assert_eq!(net.states[0].mass, vec![5]);
        assert_eq!(net.states[0].count, 2);
        assert_eq!(net.states[1].mass, vec![5]);
        assert_eq!(net.states[1].count, 2);
        // Extrema ⌈3/1⌉ = 3 and ⌊7/3⌋ = 2 still within one step.
        assert_eq!(net.states[1].window_max, vec![3]);
        assert_eq!(net.states[1].window_min, vec![2]);
        assert!(stopped);

        let tr = net.transcript.as_ref().unwrap();
        let rows: Vec<(u64, usize, usize, i64)> =
            tr.iter().map(|e| (e.round, e.sender, e.receiver, e.piece[0])).collect();
        assert_eq!(rows, vec![(1, 0, 0, 2), (1, 1, 0, 3), (2, 0, 1, 2), (2, 0, 0, 2)]);
        assert_eq!(net.messages, 2);
        assert_eq!(net.flood_messages, 4);

        let mut buf = Vec::new();
        write_transcript_csv(tr, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("round,sender,receiver,piece\n1,0,0,2\n"));
    }

    #[test]
    fn idle_round_only_touches_the_window() {
        let g = Digraph::ring(3).unwrap();
        let mut net = FqacNetwork::new(&scalars(&[0.1, 0.2, 0.3]), &g, level(0.1), 2).unwrap();
        for s in &mut net.states {
            s.count = 1;
        }
        let before: Vec<_> = net.states.iter().map(|s| (s.mass.clone(), s.count)).collect();
        net.step_with(|_, _| unreachable!());
        let after: Vec<_> = net.states.iter().map(|s| (s.mass.clone(), s.count)).collect();
        assert_eq!(before, after);
        assert_eq!(net.messages, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = Digraph::ring(3).unwrap();
        assert!(fqac_run(&scalars(&[0.1, 0.2]), &g, level(0.1), 2, 0).is_err());
        assert!(fqac_run(&scalars(&[0.1, 0.2, 0.3]), &g, level(0.1), 1, 0).is_err());
        assert!(matches!(
            fqac_run(&scalars(&[1e300, 0.2, 0.3]), &g, level(0.1), 2, 0),
            Err(Error::Range(_))
        ));
        let capped = fqac_run_with(
            &scalars(&[0.0, 5.0, 10.0]),
            &g,
            level(0.001),
            2,
            0,
            FqacOptions {
                round_cap: 2,
                record_transcript: false,
            },
        );
        assert!(matches!(capped, Err(Error::Protocol(_))));
    }

    #[test]
    fn seeded_runs_are_deterministic() {
        let g = Digraph::random_strongly_connected(10, 0.2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ys: Vec<_> = (0..10)
            .map(|_| DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let a = fqac_run(&ys, &g, level(1e-3), g.diameter(), 17).unwrap();
        let b = fqac_run(&ys, &g, level(1e-3), g.diameter(), 17).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conservation_agreement_and_accuracy(
            agents in 1usize..12,
            p in 0.0f64..0.5,
            graph_seed in any::<u64>(),
            data_seed in any::<u64>(),
            run_seed in any::<u64>(),
            exponent in 1i32..5,
        ) {
            let g = if agents == 1 {
                Digraph::single_agent()
            } else {
                Digraph::random_strongly_connected(agents, p, graph_seed).unwrap()
            };
            let d = 10f64.powi(-exponent);
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let ys: Vec<_> = (0..agents)
                .map(|_| DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let mut net = FqacNetwork::new(&ys, &g, level(d), g.diameter().max(1)).unwrap();
            let (mass0, count0) = net.totals();
            prop_assert_eq!(count0, 2 * agents as i64);
            let mut route = ChaCha8Rng::seed_from_u64(run_seed);
            let mut rounds = 0;
            loop {
                rounds += 1;
                let done = net.step(&mut route);
                let (mass, count) = net.totals();
                prop_assert_eq!(&mass, &mass0);
                prop_assert_eq!(count, count0);
                prop_assert!(net.states.iter().all(|s| s.count >= 1));
                if done {
                    break;
                }
                prop_assert!(rounds < 100_000);
            }
            let out = net.into_result(level(d));
            let target = quantized_mean(&ys, d);
            for o in &out.outputs {
                prop_assert_eq!(o, &out.outputs[0]);
                prop_assert!((o - &target).amax() <= d * (1.0 + 1e-9));
            }
        }
    }
}

//! Directed communication topologies.
//!
//! A [`Digraph`] is always strongly connected: every constructor validates
//! reachability and caches the diameter (longest shortest directed path).
//! Self-loops are never stored; the quantized averaging protocol adds each
//! agent's virtual self-edge on its own.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    agent_count: usize,
    edges: BTreeSet<(usize, usize)>,
    in_neighbors: Vec<Vec<usize>>,
    out_neighbors: Vec<Vec<usize>>,
    diameter: usize,
}

impl Digraph {
    /// Validates `edges` (ordered `(from, to)` pairs, 0-based) and computes the diameter.
    pub fn new(agent_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if agent_count < 2 {
            return Err(Error::InvalidInput(format!(
                "a digraph needs at least 2 agents, got {agent_count}"
            )));
        }
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            if from >= agent_count || to >= agent_count {
                return Err(Error::InvalidInput(format!(
                    "edge {from} -> {to} out of range for {agent_count} agents"
                )));
            }
            if from != to {
                set.insert((from, to));
            }
        }
        Self::from_edge_set(agent_count, set)
    }

    /// One agent with only its virtual self-edge. Exists so the averaging
    /// protocol can run on a single agent; the window length is 1.
    pub fn single_agent() -> Self {
        Self {
            agent_count: 1,
            edges: BTreeSet::new(),
            in_neighbors: vec![Vec::new()],
            out_neighbors: vec![Vec::new()],
            diameter: 1,
        }
    }

    pub fn ring(agent_count: usize) -> Result<Self> {
        Self::new(agent_count, (0..agent_count).map(|i| (i, (i + 1) % agent_count)))
    }

    pub fn complete(agent_count: usize) -> Result<Self> {
        Self::new(
            agent_count,
            (0..agent_count).flat_map(|i| (0..agent_count).map(move |j| (i, j))),
        )
    }

    /// Directed Hamiltonian ring `i -> i+1` plus every other ordered pair kept
    /// independently with probability `extra_edge_probability`.
    pub fn random_strongly_connected(
        agent_count: usize,
        extra_edge_probability: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&extra_edge_probability) {
            return Err(Error::InvalidInput(format!(
                "extra edge probability must lie in [0, 1], got {extra_edge_probability}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> =
            (0..agent_count).map(|i| (i, (i + 1) % agent_count)).collect();
        for i in 0..agent_count {
            for j in 0..agent_count {
                if i == j || j == (i + 1) % agent_count {
                    continue;
                }
                // Always draw so the stream does not depend on the probability.
                let u: f64 = rng.random();
                if u < extra_edge_probability {
                    edges.push((i, j));
                }
            }
        }
        Self::new(agent_count, edges)
    }

    fn from_edge_set(agent_count: usize, edges: BTreeSet<(usize, usize)>) -> Result<Self> {
        let mut in_neighbors = vec![Vec::new(); agent_count];
        let mut out_neighbors = vec![Vec::new(); agent_count];
        for &(from, to) in &edges {
            out_neighbors[from].push(to);
            in_neighbors[to].push(from);
        }
        let diameter = eccentricities(&out_neighbors)?
            .into_iter()
            .max()
            .unwrap_or(1);
        Ok(Self {
            agent_count,
            edges,
            in_neighbors,
            out_neighbors,
            diameter,
        })
    }

    /// Adds an edge and recomputes the diameter.
    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<()> {
        if from >= self.agent_count || to >= self.agent_count {
            return Err(Error::InvalidInput(format!(
                "edge {from} -> {to} out of range for {} agents",
                self.agent_count
            )));
        }
        if from == to || self.edges.contains(&(from, to)) {
            return Ok(());
        }
        let mut edges = self.edges.clone();
        edges.insert((from, to));
        *self = Self::from_edge_set(self.agent_count, edges)?;
        Ok(())
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn in_neighbors(&self, agent: usize) -> &[usize] {
        &self.in_neighbors[agent]
    }

    pub fn out_neighbors(&self, agent: usize) -> &[usize] {
        &self.out_neighbors[agent]
    }

    pub fn out_degree(&self, agent: usize) -> usize {
        self.out_neighbors[agent].len()
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    /// One `from to` pair per line.
    pub fn to_edge_list(&self) -> String {
        self.edges
            .iter()
            .map(|(f, t)| format!("{f} {t}\n"))
            .collect()
    }

    /// Parses the `from to` per-line block written by [`Digraph::to_edge_list`].
    /// Blank lines and `#` comments are ignored.
    pub fn from_edge_list(agent_count: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::InvalidInput(format!("edge list line {}: bad agent index {s:?}", lineno + 1))
                })
            };
            match fields.as_slice() {
                [a, b] => edges.push((parse(a)?, parse(b)?)),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "edge list line {}: expected `from to`, got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(agent_count, edges)
    }
}

fn bfs_distances(out_neighbors: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; out_neighbors.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap_or(0);
        for &v in &out_neighbors[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Per-source eccentricity; fails on the first unreachable pair.
fn eccentricities(out_neighbors: &[Vec<usize>]) -> Result<Vec<usize>> {
    (0..out_neighbors.len())
        .map(|source| {
            let dist = bfs_distances(out_neighbors, source);
            dist.iter()
                .enumerate()
                .map(|(to, d)| d.ok_or(Error::Topology { from: source, to }))
                .try_fold(0, |acc, d| d.map(|d| acc.max(d)))
        })
        .collect()
}

/// Exact all-pairs BFS diameter.
pub fn diameter(g: &Digraph) -> usize {
    g.diameter()
}

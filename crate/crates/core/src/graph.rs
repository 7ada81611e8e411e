//! Directed acyclic graphs over binary nodes and a random DAG generator.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::subset::{SubsetMask, MAX_NODES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node count {0} is outside 1..={MAX_NODES}")]
    BadNodeCount(usize),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph contains a directed cycle")]
    Cyclic,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("invalid generator parameters: {0}")]
    InvalidParameters(String),
    #[error("generation budget of {attempts} attempts exhausted; tightest violated constraint: {tightest}")]
    Exhausted { attempts: usize, tightest: String },
}

/// A DAG stored as one parent mask per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct Dag {
    parents: Vec<SubsetMask>,
    children: Vec<SubsetMask>,
}

#[derive(Serialize, Deserialize)]
struct DagRepr {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<DagRepr> for Dag {
    type Error = GraphError;
    fn try_from(r: DagRepr) -> Result<Self, GraphError> {
        Dag::new(r.n, r.edges.iter().map(|e| (e[0], e[1])))
    }
}

impl From<Dag> for DagRepr {
    fn from(d: Dag) -> Self {
        DagRepr {
            n: d.n(),
            edges: d.edges().into_iter().map(|(p, c)| [p, c]).collect(),
        }
    }
}

impl Dag {
    /// Builds a DAG from `(parent, child)` pairs.
    pub fn new<I>(n: usize, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        if n == 0 || n > MAX_NODES {
            return Err(GraphError::BadNodeCount(n));
        }
        let mut parents = vec![SubsetMask::EMPTY; n];
        for (p, c) in edges {
            if p >= n || c >= n {
                return Err(GraphError::NodeOutOfRange(p, c, n));
            }
            if p == c {
                return Err(GraphError::SelfLoop(p));
            }
            if parents[c].contains(p) {
                return Err(GraphError::DuplicateEdge(p, c));
            }
            parents[c] = parents[c].with(p);
        }
        Self::from_parent_masks(parents)
    }

    pub fn from_parent_masks(parents: Vec<SubsetMask>) -> Result<Self, GraphError> {
        let n = parents.len();
        if n == 0 || n > MAX_NODES {
            return Err(GraphError::BadNodeCount(n));
        }
        let full = SubsetMask::full(n);
        let mut children = vec![SubsetMask::EMPTY; n];
        for (c, &ps) in parents.iter().enumerate() {
            if !ps.is_subset_of(full) {
                let p = ps.difference(full).first().unwrap_or(0);
                return Err(GraphError::NodeOutOfRange(p, c, n));
            }
            if ps.contains(c) {
                return Err(GraphError::SelfLoop(c));
            }
            for p in ps {
                children[p] = children[p].with(c);
            }
        }
        let dag = Dag { parents, children };
        if dag.try_topological_order().is_none() {
            return Err(GraphError::Cyclic);
        }
        Ok(dag)
    }

    pub fn n(&self) -> usize {
        self.parents.len()
    }

    pub fn nodes(&self) -> SubsetMask {
        SubsetMask::full(self.n())
    }

    pub fn parents(&self, i: usize) -> SubsetMask {
        self.parents[i]
    }

    pub fn children(&self, i: usize) -> SubsetMask {
        self.children[i]
    }

    pub fn parent_masks(&self) -> &[SubsetMask] {
        &self.parents
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(|p| p.len()).sum()
    }

    /// Edges as `(parent, child)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = (0..self.n())
            .flat_map(|c| self.parents[c].iter().map(move |p| (p, c)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Parents, children and co-parents of `i`.
    pub fn markov_blanket(&self, i: usize) -> SubsetMask {
        self.markov_blanket_within(i, self.nodes())
    }

    /// Markov blanket of `i` in the subgraph induced by `within`.
    pub fn markov_blanket_within(&self, i: usize, within: SubsetMask) -> SubsetMask {
        let kids = self.children[i].intersection(within);
        let mut mb = self.parents[i].union(kids);
        for c in kids {
            mb = mb.union(self.parents[c]);
        }
        mb.intersection(within).without(i)
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    /// Nodes of `within` that have no children inside `within`.
    pub fn terminal_nodes_within(&self, within: SubsetMask) -> SubsetMask {
        within
            .iter()
            .filter(|&i| self.children[i].intersection(within).is_empty())
            .collect()
    }

    /// Smallest superset of `set` closed under taking parents.
    pub fn ancestral_closure(&self, set: SubsetMask) -> SubsetMask {
        let mut closed = set;
        let mut frontier = set;
        while !frontier.is_empty() {
            let mut next = SubsetMask::EMPTY;
            for j in frontier {
                next = next.union(self.parents[j]);
            }
            frontier = next.difference(closed);
            closed = closed.union(next);
        }
        closed
    }

    pub fn topological_order(&self) -> Vec<usize> {
        self.try_topological_order()
            .expect("Dag invariant: acyclic")
    }

    fn try_topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n();
        let mut placed = SubsetMask::EMPTY;
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let ready: Vec<usize> = (0..n)
                .filter(|&i| !placed.contains(i) && self.parents[i].is_subset_of(placed))
                .collect();
            if ready.is_empty() {
                return None;
            }
            for i in ready {
                placed = placed.with(i);
                order.push(i);
            }
        }
        Some(order)
    }

    /// The working sets visited by terminal-node peeling on the true graph:
    /// each entry is the set before one round, and the last entry is the
    /// set of fewer than three survivors.
    pub fn peel_sequence(&self) -> Vec<SubsetMask> {
        let mut seq = Vec::new();
        let mut s = self.nodes();
        while s.len() >= 3 {
            seq.push(s);
            s = s.difference(self.terminal_nodes_within(s));
        }
        seq.push(s);
        seq
    }

    /// First node that is non-terminal at some peeling stage but has fewer
    /// than two blanket members there. Such a node's set function has no
    /// pair coefficient at all, so it is indistinguishable from a terminal
    /// node (the usual example is an isolated edge `a -> b`).
    pub fn unidentifiable_stage(&self) -> Option<(usize, SubsetMask)> {
        for s in self.peel_sequence() {
            if s.len() < 3 {
                break;
            }
            let terminal = self.terminal_nodes_within(s);
            for i in s.difference(terminal) {
                if self.markov_blanket_within(i, s).len() < 2 {
                    return Some((i, s));
                }
            }
        }
        None
    }
}

/// Options for [`generate_random_dag_with`].
#[derive(Clone, Debug)]
pub struct DagOptions {
    /// Attempts at drawing a parent set for a single node.
    pub parent_attempts: usize,
    /// Whole-graph redraws allowed when a graph-level constraint fails.
    pub graph_attempts: usize,
    /// Require that the nodes left over when peeling stops have no parents,
    /// so that their (unrecoverable) parent sets are empty.
    pub parentless_survivors: bool,
    /// Reject graphs where [`Dag::unidentifiable_stage`] finds a node.
    /// Ignored when `k_max < 2`, since then every edge is unidentifiable.
    pub identifiable_stages: bool,
}

impl Default for DagOptions {
    fn default() -> Self {
        Self {
            parent_attempts: 1000,
            graph_attempts: 1000,
            parentless_survivors: true,
            identifiable_stages: true,
        }
    }
}

/// Random DAG on `n` nodes with every Markov blanket of size at most `k_max`.
pub fn generate_random_dag(n: usize, k_max: usize, seed: u64) -> Result<Dag, GenerationError> {
    generate_random_dag_with(n, k_max, seed, &DagOptions::default())
}

pub fn generate_random_dag_with(
    n: usize,
    k_max: usize,
    seed: u64,
    opts: &DagOptions,
) -> Result<Dag, GenerationError> {
    if !(3..=MAX_NODES).contains(&n) {
        return Err(GenerationError::InvalidParameters(format!(
            "n = {n} must lie in 3..={MAX_NODES}"
        )));
    }
    if k_max < 1 {
        return Err(GenerationError::InvalidParameters("k_max must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, &[0xDA6]);
    let mut tightest = String::new();
    for _ in 0..opts.graph_attempts.max(1) {
        let dag = draw_dag(n, k_max, &mut rng, opts.parent_attempts);
        if opts.parentless_survivors && !survivors_parentless(&dag) {
            tightest = "final peeling survivors share an edge".into();
            continue;
        }
        if opts.identifiable_stages && k_max >= 2 {
            if let Some((i, s)) = dag.unidentifiable_stage() {
                tightest = format!("node {i} has a blanket of size < 2 within stage {s}");
                continue;
            }
        }
        return Ok(dag);
    }
    Err(GenerationError::Exhausted {
        attempts: opts.graph_attempts,
        tightest,
    })
}

fn survivors_parentless(dag: &Dag) -> bool {
    let last = *dag.peel_sequence().last().expect("non-empty");
    last.iter().all(|i| dag.parents(i).is_empty())
}

fn blanket_sizes_ok(parents: &[SubsetMask], k_max: usize) -> bool {
    let mut mb = parents.to_vec();
    for (c, &pa) in parents.iter().enumerate() {
        for p in pa {
            // p gains child c and c's other parents
            mb[p] = mb[p].union(pa).with(c).without(p);
        }
    }
    mb.iter().all(|m| m.len() <= k_max)
}

fn draw_dag<R: Rng>(n: usize, k_max: usize, rng: &mut R, attempts: usize) -> Dag {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut parents = vec![SubsetMask::EMPTY; n];
    for pos in 1..n {
        let node = order[pos];
        let preds = &order[..pos];
        let target = rng.random_range(1..=pos.min(k_max));
        // shrink the requested in-degree when a size keeps failing
        let per_size = (attempts / target).max(1);
        'sizes: for size in (1..=target).rev() {
            for _ in 0..per_size {
                let chosen: SubsetMask = preds.choose_multiple(rng, size).copied().collect();
                parents[node] = chosen;
                if blanket_sizes_ok(&parents, k_max) {
                    break 'sizes;
                }
                parents[node] = SubsetMask::EMPTY;
            }
        }
    }
    Dag::from_parent_masks(parents).expect("parents drawn from causal predecessors")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Dag {
        Dag::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn rejects_cycles_loops_and_duplicates() {
        assert_eq!(Dag::new(2, [(0, 1), (1, 0)]), Err(GraphError::Cyclic));
        assert_eq!(Dag::new(2, [(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            Dag::new(2, [(0, 1), (0, 1)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert!(matches!(
            Dag::new(2, [(0, 2)]),
            Err(GraphError::NodeOutOfRange(..))
        ));
    }

    #[test]
    fn derived_views_on_a_collider() {
        // 0 -> 2 <- 1, 2 -> 3
        let d = Dag::new(4, [(0, 2), (1, 2), (2, 3)]).unwrap();
        assert_eq!(d.parents(2), SubsetMask::from_nodes([0, 1]));
        assert_eq!(d.children(2), SubsetMask::from_nodes([3]));
        assert_eq!(d.markov_blanket(0), SubsetMask::from_nodes([1, 2]));
        assert_eq!(d.markov_blanket(2), SubsetMask::from_nodes([0, 1, 3]));
        assert_eq!(d.markov_blanket(3), SubsetMask::from_nodes([2]));
        assert!(d.is_terminal(3));
        assert!(!d.is_terminal(0));
        assert_eq!(d.ancestral_closure(SubsetMask::singleton(3)), SubsetMask::full(4));
    }

    #[test]
    fn peel_sequence_of_chain() {
        let d = chain();
        assert_eq!(
            d.peel_sequence(),
            vec![SubsetMask::full(3), SubsetMask::from_nodes([0, 1])]
        );
    }

    #[test]
    fn generated_dags_respect_blanket_cap() {
        for seed in 0..20 {
            let d = generate_random_dag(20, 4, seed).unwrap();
            for i in 0..20 {
                assert!(d.markov_blanket(i).len() <= 4, "seed {seed} node {i}");
            }
            assert!((0..20).any(|i| d.is_terminal(i)));
            let last = *d.peel_sequence().last().unwrap();
            assert!(last.iter().all(|i| d.parents(i).is_empty()));
        }
    }

    #[test]
    fn tiny_cap_gives_near_empty_graph() {
        let d = generate_random_dag(3, 1, 5).unwrap();
        assert!(d.edge_count() <= 1);
        for i in 0..3 {
            assert!(d.markov_blanket(i).len() <= 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_random_dag(20, 4, 7).unwrap();
        let b = generate_random_dag(20, 4, 7).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert!(a.edge_count() > 5);
    }

    #[test]
    fn invalid_parameters() {
        assert!(matches!(
            generate_random_dag(2, 4, 0),
            Err(GenerationError::InvalidParameters(_))
        ));
        assert!(matches!(
            generate_random_dag(5, 0, 0),
            Err(GenerationError::InvalidParameters(_))
        ));
    }
}

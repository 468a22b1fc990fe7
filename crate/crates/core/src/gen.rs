//! Seeded random instances.
//!
//! Circuits are grown along a random tree of bags, bottom up: every gate's
//! inputs come from the bag it is created in, and bag contents only flow from
//! children to parents. That makes the emitted decomposition valid by
//! construction and its width a direct knob, which the test suites depend on.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::BitSet;
use crate::circuit::{Circuit, CircuitKind, Gate, GateId, Label};
use crate::td::{Graph, TreeDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Unconstrained arithmetic circuit.
    Arith,
    /// Multiplicatively disjoint: product operands get disjoint cones.
    Md,
    /// Syntactically multilinear: product operands get disjoint variables.
    Sm,
    /// Boolean gates over and/or/not.
    Bool,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Soft target for size_total; the result lands within a factor of two.
    pub gates: usize,
    /// Decomposition width cap: bags hold at most k+1 gates.
    pub k: usize,
    /// Cap on distinct input variables.
    pub vars: usize,
    pub shape: Shape,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(gates: usize, k: usize, shape: Shape, seed: u64) -> GenConfig {
        GenConfig { gates, k, vars: 10, shape, seed }
    }
}

struct Grow {
    gates: Vec<Gate>,
    // Per gate: cone bitset (md), variable bitmask (sm), consumer count.
    cones: Vec<BitSet>,
    cone_cap: usize,
    varmask: Vec<u64>,
    outdeg: Vec<usize>,
    next_var: usize,
    kind: CircuitKind,
}

impl Grow {
    fn push(&mut self, name: String, label: Label, inputs: Vec<usize>) -> usize {
        let id = self.gates.len();
        let mut cone = BitSet::new(self.cone_cap);
        cone.insert(id);
        let mut mask = 0u64;
        for &a in &inputs {
            let ac = self.cones[a].clone();
            cone.union_with(&ac);
            mask |= self.varmask[a];
            self.outdeg[a] += 1;
        }
        if let Label::Input(v) = &label {
            let vi: usize = v.trim_start_matches('x').parse().unwrap_or(0);
            mask |= 1 << vi.min(63);
        }
        self.gates.push(Gate {
            name,
            label,
            inputs: inputs.iter().map(|&a| GateId::from_index(a)).collect(),
        });
        self.cones.push(cone);
        self.varmask.push(mask);
        self.outdeg.push(0);
        id
    }

    fn leaf(&mut self, rng: &mut ChaCha8Rng, cfg: &GenConfig) -> usize {
        let make_var = self.next_var < cfg.vars && rng.gen_bool(0.7);
        if make_var {
            let v = self.next_var;
            self.next_var += 1;
            self.push(format!("x{v}"), Label::Input(format!("x{v}")), vec![])
        } else {
            let value = match self.kind {
                CircuitKind::Boolean => BigInt::from(rng.gen_range(0..2)),
                CircuitKind::Arithmetic => BigInt::from(rng.gen_range(-2..3)),
            };
            let id = self.gates.len();
            self.push(format!("k{id}"), Label::Const(value), vec![])
        }
    }

    /// Sample an operand, preferring gates nothing consumes yet.
    fn operand(&self, rng: &mut ChaCha8Rng, pool: &[usize]) -> usize {
        let unused: Vec<usize> = pool.iter().copied().filter(|&g| self.outdeg[g] == 0).collect();
        if !unused.is_empty() && rng.gen_bool(0.7) {
            unused[rng.gen_range(0..unused.len())]
        } else {
            pool[rng.gen_range(0..pool.len())]
        }
    }

    fn op(&mut self, rng: &mut ChaCha8Rng, cfg: &GenConfig, pool: &[usize]) -> usize {
        let id = self.gates.len();
        let name = format!("g{id}");
        match cfg.shape {
            Shape::Bool => {
                let a = self.operand(rng, pool);
                match rng.gen_range(0..3) {
                    0 => self.push(name, Label::Not, vec![a]),
                    1 => {
                        let b = self.operand(rng, pool);
                        self.push(name, Label::And, vec![a, b])
                    }
                    _ => {
                        let b = self.operand(rng, pool);
                        self.push(name, Label::Or, vec![a, b])
                    }
                }
            }
            Shape::Arith => {
                let a = self.operand(rng, pool);
                let b = self.operand(rng, pool);
                let label = if rng.gen_bool(0.5) { Label::Mul } else { Label::Add };
                self.push(name, label, vec![a, b])
            }
            Shape::Md | Shape::Sm => {
                let a = self.operand(rng, pool);
                let mut b = self.operand(rng, pool);
                let want_mul = rng.gen_bool(0.45);
                let disjoint = |s: &Grow, a: usize, b: usize| match cfg.shape {
                    Shape::Md => !s.cones[a].intersects(&s.cones[b]),
                    _ => s.varmask[a] & s.varmask[b] == 0,
                };
                if want_mul {
                    for _ in 0..6 {
                        if disjoint(self, a, b) {
                            return self.push(name, Label::Mul, vec![a, b]);
                        }
                        b = pool[rng.gen_range(0..pool.len())];
                    }
                }
                self.push(name, Label::Add, vec![a, b])
            }
        }
    }
}

/// Grow a circuit along a random bag tree. Returns the circuit and a valid
/// decomposition of width ≤ k whose root bag contains the output gate.
pub fn gen_instance(cfg: &GenConfig) -> (Circuit, TreeDecomposition) {
    assert!(cfg.k >= 1, "bags need room for a gate and an input");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cap = cfg.k + 1;
    let kind = match cfg.shape {
        Shape::Bool => CircuitKind::Boolean,
        _ => CircuitKind::Arithmetic,
    };

    // Random recursive tree, node 0 at the top.
    let nnodes = (cfg.gates / 3).max(1);
    let mut parent: Vec<Option<usize>> = vec![None];
    for i in 1..nnodes {
        parent.push(Some(rng.gen_range(0..i)));
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); nnodes];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    // Post-order: children strictly before parents.
    let mut order = Vec::with_capacity(nnodes);
    let mut stack = vec![(0usize, false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
        } else {
            stack.push((t, true));
            stack.extend(children[t].iter().map(|&c| (c, false)));
        }
    }

    let mut grow = Grow {
        gates: Vec::new(),
        cones: Vec::new(),
        cone_cap: 2 * cfg.gates + cap + 8,
        varmask: Vec::new(),
        outdeg: Vec::new(),
        next_var: 0,
        kind,
    };
    let mut bags: Vec<Vec<usize>> = vec![Vec::new(); nnodes];
    let per_node = (cfg.gates / nnodes).max(1);
    for &t in &order {
        // Survivors: a sample of the children's bags, leaving room to create.
        let mut pool: Vec<usize> = Vec::new();
        for &c in &children[t] {
            for &g in &bags[c] {
                if !pool.contains(&g) && rng.gen_bool(0.55) {
                    pool.push(g);
                }
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(cap - 1);
        // Create gates; leaves seed empty pools. The top node keeps a slot
        // free so the output-combining chain bags stay within the width cap.
        let limit = if t == 0 { cap - 1 } else { cap };
        let creations = rng.gen_range(1..=per_node.max(1));
        for _ in 0..creations {
            if pool.len() >= limit {
                break;
            }
            let id = if pool.len() < 2 || rng.gen_bool(0.25) {
                grow.leaf(&mut rng, cfg)
            } else {
                grow.op(&mut rng, cfg, &pool)
            };
            pool.push(id);
        }
        bags[t] = pool;
    }

    // Combine the root's loose ends into a single output along a bag chain.
    let combiner = match kind {
        CircuitKind::Boolean => Label::Or,
        CircuitKind::Arithmetic => Label::Add,
    };
    let mut working = bags[0].clone();
    let mut chain: Vec<Vec<usize>> = Vec::new();
    while working.len() > 1 {
        let a = working.remove(0);
        let b = working.remove(0);
        let id = grow.gates.len();
        let id = grow.push(format!("g{id}"), combiner.clone(), vec![a, b]);
        let mut bag = working.clone();
        bag.extend([a, b, id]);
        chain.push(bag);
        working.push(id);
    }
    if grow.gates.is_empty() {
        // Degenerate budget: emit a single variable.
        grow.leaf(&mut rng, cfg);
        bags[0] = vec![0];
        working = vec![0];
    }
    let output = GateId::from_index(*working.last().expect("nonempty working set"));

    let mut td_bags: Vec<BTreeSet<u32>> = bags
        .iter()
        .map(|b| b.iter().map(|&g| GateId::from_index(g).0).collect())
        .collect();
    let mut td_parent: Vec<Option<usize>> = parent;
    let mut top = 0usize;
    for bag in chain {
        td_bags.push(bag.iter().map(|&g| GateId::from_index(g).0).collect());
        td_parent.push(None);
        let node = td_bags.len() - 1;
        td_parent[top] = Some(node);
        top = node;
    }

    let circuit = Circuit::new(grow.gates, output, kind).expect("bag-grown circuits are well formed");
    let td = TreeDecomposition::new(td_bags, td_parent).expect("bag tree is a tree");
    debug_assert!(td.validate(&Graph::of_circuit(&circuit)).is_empty());
    debug_assert!(td.bag(td.root()).contains(&circuit.output().0));
    (circuit, td)
}

/// Leveled arithmetic circuit of bounded level width: gates at level i feed
/// only level i+1. `mul_bias` sets the product share.
pub fn gen_leveled(width: usize, height: u32, mul_bias: f64, seed: u64) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates: Vec<Gate> = Vec::new();
    let mut levels: Vec<u32> = Vec::new();
    let mut prev: Vec<usize> = Vec::new();
    let nvars = rng.gen_range(1..=width);
    for v in 0..nvars {
        gates.push(Gate { name: format!("x{v}"), label: Label::Input(format!("x{v}")), inputs: vec![] });
        levels.push(0);
        prev.push(v);
    }
    if rng.gen_bool(0.4) {
        let value = BigInt::from(rng.gen_range(-2..3));
        gates.push(Gate { name: "k0".into(), label: Label::Const(value), inputs: vec![] });
        levels.push(0);
        prev.push(gates.len() - 1);
    }
    for l in 1..=height {
        let count = if l == height { 1 } else { rng.gen_range(1..=width) };
        let mut cur = Vec::with_capacity(count);
        for i in 0..count {
            let a = prev[rng.gen_range(0..prev.len())];
            let b = prev[rng.gen_range(0..prev.len())];
            let label = if rng.gen_bool(mul_bias) { Label::Mul } else { Label::Add };
            gates.push(Gate {
                name: format!("g{l}_{i}"),
                label,
                inputs: vec![GateId::from_index(a), GateId::from_index(b)],
            });
            levels.push(l);
            cur.push(gates.len() - 1);
        }
        prev = cur;
    }
    let output = GateId::from_index(*prev.last().expect("top level nonempty"));
    Circuit::with_levels(gates, output, CircuitKind::Arithmetic, levels)
        .expect("level-by-level growth is leveled")
}

/// Graph grown along a sliding bag window: vertex t+1 joins a bag holding at
/// most k survivors of the previous bag, and edges stay inside bags. The
/// decomposition is valid with width ≤ k. Directed graphs orient each edge at
/// random. `edge_bias` tunes density; low values leave vertices disconnected.
pub fn gen_graph_with_td(
    n: u32,
    k: usize,
    edge_bias: f64,
    directed: bool,
    seed: u64,
) -> (Graph, TreeDecomposition) {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags: Vec<BTreeSet<u32>> = Vec::with_capacity(n as usize);
    let mut parent: Vec<Option<usize>> = Vec::with_capacity(n as usize);
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut window: Vec<u32> = Vec::new();
    for v in 1..=n {
        let mut keep: Vec<u32> = window.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        while keep.len() > k {
            let drop = rng.gen_range(0..keep.len());
            keep.remove(drop);
        }
        for &u in &keep {
            if rng.gen_bool(edge_bias) {
                if directed && rng.gen_bool(0.5) {
                    edges.push((v, u));
                } else {
                    edges.push((u, v));
                }
            }
        }
        keep.push(v);
        bags.push(keep.iter().copied().collect());
        parent.push(if v == n { None } else { Some(v as usize) });
        window = keep;
    }
    let graph = if directed {
        Graph::directed(n, edges).expect("edges stay in range")
    } else {
        Graph::undirected(n, edges).expect("edges stay in range")
    };
    let td = TreeDecomposition::new(bags, parent).expect("window chain is a path");
    debug_assert!(td.validate(&graph.underlying_undirected()).is_empty());
    (graph, td)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{serialize_circuit, CircuitKind};
    use crate::td::serialize_td;

    #[test]
    fn instances_are_deterministic_per_seed() {
        let cfg = GenConfig::new(30, 3, Shape::Arith, 7);
        let (c1, t1) = gen_instance(&cfg);
        let (c2, t2) = gen_instance(&cfg);
        assert_eq!(serialize_circuit(&c1).unwrap(), serialize_circuit(&c2).unwrap());
        assert_eq!(serialize_td(&t1), serialize_td(&t2));
        let other = GenConfig { seed: 8, ..cfg };
        let (c3, _) = gen_instance(&other);
        assert_ne!(serialize_circuit(&c1).unwrap(), serialize_circuit(&c3).unwrap());
    }

    #[test]
    fn decomposition_is_valid_with_bounded_width() {
        for seed in 0..200 {
            let cfg = GenConfig::new(36, 4, Shape::Arith, seed);
            let (c, td) = gen_instance(&cfg);
            assert!(td.validate(&Graph::of_circuit(&c)).is_empty(), "seed {seed}");
            assert!(td.width() <= 4, "seed {seed}");
            assert!(td.bag(td.root()).contains(&c.output().0), "seed {seed}");
            assert!(c.size_total() <= 72, "seed {seed}: size {}", c.size_total());
        }
    }

    #[test]
    fn md_shape_is_multiplicatively_disjoint() {
        let mut mults = 0usize;
        for seed in 0..100 {
            let cfg = GenConfig::new(40, 4, Shape::Md, seed);
            let (c, _) = gen_instance(&cfg);
            assert!(c.is_multiplicatively_disjoint(), "seed {seed}");
            mults += c.gates().iter().filter(|g| g.label == Label::Mul).count();
        }
        assert!(mults > 50, "md instances should actually multiply, got {mults}");
    }

    #[test]
    fn sm_shape_is_syntactically_multilinear() {
        for seed in 0..100 {
            let cfg = GenConfig::new(30, 3, Shape::Sm, seed);
            let (c, _) = gen_instance(&cfg);
            assert!(c.is_syntactically_multilinear(), "seed {seed}");
        }
    }

    #[test]
    fn bool_shape_is_boolean() {
        let cfg = GenConfig { vars: 8, ..GenConfig::new(25, 3, Shape::Bool, 11) };
        let (c, td) = gen_instance(&cfg);
        assert_eq!(c.kind(), CircuitKind::Boolean);
        assert!(c.variables().len() <= 8);
        assert!(td.validate(&Graph::of_circuit(&c)).is_empty());
    }

    #[test]
    fn leveled_instances_are_leveled() {
        for seed in 0..50 {
            let c = gen_leveled(3, 4, 0.4, seed);
            assert!(c.levels().is_some(), "seed {seed}");
            assert!(c.circuit_width().unwrap() <= 4, "seed {seed}");
        }
    }

    #[test]
    fn graphs_come_with_valid_decompositions() {
        for seed in 0..100 {
            let (g, td) = gen_graph_with_td(30, 3, 0.6, seed % 2 == 0, seed);
            assert!(td.validate(&g.underlying_undirected()).is_empty(), "seed {seed}");
            assert!(td.width() <= 3, "seed {seed}");
        }
    }
}

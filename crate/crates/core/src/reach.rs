//! Directed s-t reachability on graphs of small treewidth, decided through
//! the circuit pipeline: the graph is compiled into a boolean circuit whose
//! output is 1 exactly when t is reachable from s, the circuit is moved to
//! GF(2), its decomposition is balanced, and the value is computed by a stack
//! machine whose frames respect a memory budget tied to the decomposition
//! width.
//!
//! Cyclic digraphs would make the vertex/edge gate system cyclic, so strongly
//! connected components are contracted first. Contraction never raises the
//! treewidth (replacing every vertex of a component by one representative
//! maps the given decomposition onto a valid decomposition of the contracted
//! graph), and it preserves every reachability answer.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use num_bigint::BigInt;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitError, CircuitKind, Gate, GateId, Label};
use crate::td::{
    balance_td, root_with_output, Graph, TdBuildError, TdError, TreeDecomposition,
};
use crate::traceback::{GateCase, ScopeError, Scopes};
use crate::transforms::{arithmetize, check_preprocessed, preprocess, TransformError};

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("reachability needs a directed graph")]
    NotDirected,
    #[error("vertex {0} out of range")]
    BadVertex(u32),
    #[error("invalid tree decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("circuit must be arithmetic")]
    NotArithmetic,
    #[error("placeholder leaf {0} cannot be evaluated")]
    PlaceholderInput(String),
    #[error("no value for input {0}")]
    InputMissing(String),
    #[error(
        "frame holds {monomials} monomials over {z_vars} z-variables, budget allows \
         {max_monomials} and {max_z_vars}; this is an evaluator bug, not an input condition"
    )]
    FrameBudget { monomials: usize, z_vars: usize, max_monomials: u64, max_z_vars: usize },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Td(#[from] TdError),
    #[error(transparent)]
    TdBuild(#[from] TdBuildError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

impl From<ScopeError> for ReachError {
    fn from(e: ScopeError) -> ReachError {
        match e {
            ScopeError::Preprocessing(m) => {
                ReachError::InvalidDecomposition(format!("not preprocessed: {m}"))
            }
            ScopeError::Decomposition(m) => ReachError::InvalidDecomposition(m),
        }
    }
}

/// A directed reachability question together with a tree decomposition of
/// the underlying undirected graph.
#[derive(Debug, Clone)]
pub struct ReachInstance {
    pub graph: Graph,
    pub s: u32,
    pub t: u32,
    pub td: TreeDecomposition,
}

impl ReachInstance {
    pub fn new(
        graph: Graph,
        s: u32,
        t: u32,
        td: TreeDecomposition,
    ) -> Result<ReachInstance, ReachError> {
        if !graph.is_directed() {
            return Err(ReachError::NotDirected);
        }
        for v in [s, t] {
            if v == 0 || v > graph.n() {
                return Err(ReachError::BadVertex(v));
            }
        }
        if let Some(v) = td.validate(&graph.underlying_undirected()).into_iter().next() {
            return Err(ReachError::InvalidDecomposition(format!("{v}")));
        }
        Ok(ReachInstance { graph, s, t, td })
    }
}

/// Reference decision procedure: breadth-first search over out-edges.
/// `s == t` answers true (the empty path).
pub fn bfs_oracle(g: &Graph, s: u32, t: u32) -> bool {
    if s == t {
        return true;
    }
    let out = g.out_neighbor_sets();
    let mut seen = vec![false; g.n() as usize];
    seen[s as usize - 1] = true;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        for &v in &out[u as usize - 1] {
            if v == t {
                return true;
            }
            if !seen[v as usize - 1] {
                seen[v as usize - 1] = true;
                queue.push_back(v);
            }
        }
    }
    false
}

/// Strongly connected components by two depth-first sweeps; the result maps
/// each vertex (index = vertex − 1) to the smallest vertex of its component.
fn condense(g: &Graph) -> Vec<u32> {
    let n = g.n() as usize;
    let fwd: Vec<Vec<u32>> =
        g.out_neighbor_sets().into_iter().map(|s| s.into_iter().collect()).collect();
    let mut rev: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(u, v) in g.edges() {
        rev[v as usize - 1].push(u);
    }
    let mut finish: Vec<u32> = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    for start in 1..=n as u32 {
        if seen[start as usize - 1] {
            continue;
        }
        seen[start as usize - 1] = true;
        let mut stack: Vec<(u32, usize)> = vec![(start, 0)];
        while let Some(frame) = stack.last_mut() {
            let (v, i) = *frame;
            if let Some(&w) = fwd[v as usize - 1].get(i) {
                frame.1 += 1;
                if !seen[w as usize - 1] {
                    seen[w as usize - 1] = true;
                    stack.push((w, 0));
                }
            } else {
                finish.push(v);
                stack.pop();
            }
        }
    }
    let mut rep = vec![0u32; n];
    let mut assigned = vec![false; n];
    for &v in finish.iter().rev() {
        if assigned[v as usize - 1] {
            continue;
        }
        let mut members = vec![v];
        assigned[v as usize - 1] = true;
        let mut qi = 0;
        while qi < members.len() {
            let u = members[qi];
            qi += 1;
            for &w in &rev[u as usize - 1] {
                if !assigned[w as usize - 1] {
                    assigned[w as usize - 1] = true;
                    members.push(w);
                }
            }
        }
        let r = *members.iter().min().expect("component is nonempty");
        for &u in &members {
            rep[u as usize - 1] = r;
        }
    }
    rep
}

/// Boolean circuit compiled from a reachability instance, plus a tree
/// decomposition of the circuit and the input assignment encoding the edges.
#[derive(Debug, Clone)]
pub struct ReachCircuit {
    pub circuit: Circuit,
    pub td: TreeDecomposition,
    pub assignment: BTreeMap<String, BigInt>,
    /// Largest number of gates that binarizing the or-chains added to any one
    /// bag; the emitted width is at most input width + 2 + this.
    pub or_chain_growth: usize,
}

/// Compile a reachability instance into a boolean circuit.
///
/// After contraction, every component gets an or-gate that fires when the
/// component is reachable from the source's component: one and-gate per
/// incoming edge (guarded by an always-1 edge input) plus a constant-1 feed
/// at the source. Or-chains are binarized left to right, and the chain's
/// internal gates join every bag holding the vertex. Each edge's and-gate and
/// input hang below a bag that covers the edge, so every bag grows by at most
/// two beyond the or-chain growth.
pub fn reach_to_circuit(r: &ReachInstance) -> Result<ReachCircuit, ReachError> {
    let rep = condense(&r.graph);
    let rep_of = |v: u32| rep[v as usize - 1];
    let source = rep_of(r.s);
    let target = rep_of(r.t);

    let mut cedges: BTreeSet<(u32, u32)> = BTreeSet::new();
    for &(u, v) in r.graph.edges() {
        let (cu, cv) = (rep_of(u), rep_of(v));
        if cu != cv {
            cedges.insert((cu, cv));
        }
    }

    // Host bag per contracted edge: a bag covering one of the graph edges it
    // came from (that bag maps onto a bag holding both representatives).
    let mut host: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for &(u, v) in r.graph.edges() {
        let key = (rep_of(u), rep_of(v));
        if key.0 == key.1 || host.contains_key(&key) {
            continue;
        }
        let node = (0..r.td.num_nodes())
            .find(|&i| r.td.bag(i).contains(&u) && r.td.bag(i).contains(&v))
            .expect("validated decomposition covers every edge");
        host.insert(key, node);
    }
    let host_s = (0..r.td.num_nodes())
        .find(|&i| r.td.bag(i).contains(&r.s))
        .expect("validated decomposition mentions every vertex");

    // Topological order of the contracted graph, smallest representative
    // first among the ready ones.
    let verts: BTreeSet<u32> = (1..=r.graph.n()).map(rep_of).collect();
    let mut indeg: BTreeMap<u32, usize> = verts.iter().map(|&v| (v, 0)).collect();
    let mut succ: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, v) in &cedges {
        *indeg.get_mut(&v).expect("edge endpoints are representatives") += 1;
        succ.entry(u).or_default().push(v);
    }
    let mut ready: BTreeSet<u32> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&v, _)| v).collect();
    let mut order: Vec<u32> = Vec::with_capacity(verts.len());
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for &w in succ.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indeg.get_mut(&w).expect("successors are representatives");
            *d -= 1;
            if *d == 0 {
                ready.insert(w);
            }
        }
    }
    debug_assert_eq!(order.len(), verts.len(), "contracted graph is acyclic");

    let mut gates: Vec<Gate> = Vec::new();
    let push = |gates: &mut Vec<Gate>, name: String, label: Label, inputs: Vec<GateId>| {
        gates.push(Gate { name, label, inputs });
        GateId(gates.len() as u32)
    };
    let mut or_id: BTreeMap<u32, GateId> = BTreeMap::new();
    let mut internals: BTreeMap<u32, Vec<GateId>> = BTreeMap::new();
    let mut x_id: BTreeMap<(u32, u32), GateId> = BTreeMap::new();
    let mut and_id: BTreeMap<(u32, u32), GateId> = BTreeMap::new();
    let mut src_id: Option<GateId> = None;

    for &v in &order {
        let mut items: Vec<GateId> = Vec::new();
        if v == source {
            let id = push(&mut gates, "src".into(), Label::Const(BigInt::one()), vec![]);
            src_id = Some(id);
            items.push(id);
        }
        let preds: Vec<u32> =
            cedges.iter().filter(|&&(_, w)| w == v).map(|&(u, _)| u).collect();
        for u in preds {
            let x = push(
                &mut gates,
                format!("x_{u}_{v}"),
                Label::Input(format!("x_{u}_{v}")),
                vec![],
            );
            x_id.insert((u, v), x);
            let a = push(&mut gates, format!("e_{u}_{v}"), Label::And, vec![or_id[&u], x]);
            and_id.insert((u, v), a);
            items.push(a);
        }
        let mut chain: Vec<GateId> = Vec::new();
        let or = match items.len() {
            0 => push(&mut gates, format!("v{v}"), Label::Const(BigInt::zero()), vec![]),
            1 => push(&mut gates, format!("v{v}"), Label::Or, vec![items[0], items[0]]),
            _ => {
                let mut acc = items[0];
                for (i, &item) in items.iter().enumerate().skip(1) {
                    let last = i + 1 == items.len();
                    let name = if last { format!("v{v}") } else { format!("v{v}_{i}") };
                    acc = push(&mut gates, name, Label::Or, vec![acc, item]);
                    if !last {
                        chain.push(acc);
                    }
                }
                acc
            }
        };
        or_id.insert(v, or);
        internals.insert(v, chain);
    }

    let circuit = Circuit::new(gates, or_id[&target], CircuitKind::Boolean)?;

    // Bags mirror the input decomposition with each vertex replaced by its
    // or-chain; the and/x pair of every edge hangs below its host bag.
    let mut bags: Vec<BTreeSet<u32>> = Vec::with_capacity(r.td.num_nodes());
    let mut parent: Vec<Option<usize>> = Vec::with_capacity(r.td.num_nodes());
    let mut or_chain_growth = 0usize;
    for i in 0..r.td.num_nodes() {
        let reps: BTreeSet<u32> = r.td.bag(i).iter().map(|&v| rep_of(v)).collect();
        let mut b = BTreeSet::new();
        for &cv in &reps {
            b.insert(or_id[&cv].0);
            for g in &internals[&cv] {
                b.insert(g.0);
            }
        }
        or_chain_growth = or_chain_growth.max(b.len() - reps.len());
        bags.push(b);
        parent.push(r.td.parent(i));
    }
    for (&(u, v), &h) in &host {
        let mut b = bags[h].clone();
        b.insert(and_id[&(u, v)].0);
        b.insert(x_id[&(u, v)].0);
        bags.push(b);
        parent.push(Some(h));
    }
    {
        let mut b = bags[host_s].clone();
        b.insert(src_id.expect("source representative was processed").0);
        bags.push(b);
        parent.push(Some(host_s));
    }
    let td = TreeDecomposition::new(bags, parent)?;
    debug_assert!(td.validate(&Graph::of_circuit(&circuit)).is_empty());
    debug_assert!(td.width() <= r.td.width() + 2 + or_chain_growth);

    let assignment: BTreeMap<String, BigInt> =
        x_id.keys().map(|&(u, v)| (format!("x_{u}_{v}"), BigInt::one())).collect();
    Ok(ReachCircuit { circuit, td, assignment, or_chain_growth })
}

/// Per-frame memory ceiling implied by a decomposition of width `k`: frames
/// hold multilinear GF(2) polynomials over at most k+1 z-variables, hence at
/// most 2^(k+1) nonzero coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameBudget {
    pub k: usize,
    pub max_monomials: u64,
    pub max_z_vars: usize,
}

impl FrameBudget {
    pub fn for_width(k: usize) -> FrameBudget {
        FrameBudget {
            k,
            max_monomials: 1u64.checked_shl(k as u32 + 1).unwrap_or(u64::MAX),
            max_z_vars: k + 1,
        }
    }
}

/// Resource counters from a bounded-frame evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalTelemetry {
    pub budget: FrameBudget,
    /// Deepest the work stack ever got.
    pub max_live_frames: usize,
    /// Largest number of nonzero coefficients held by any one frame.
    pub max_frame_coefficient_bits: usize,
    /// Most distinct z-variables appearing in any one frame.
    pub max_frame_z_vars: usize,
    /// Frames actually computed (memoized replays excluded).
    pub frames_evaluated: u64,
}

/// GF(2) multilinear polynomial in z-variables: the set of monomials with
/// coefficient 1, each monomial the set of gate ids it multiplies.
type Monomial = BTreeSet<u32>;
type ZPoly = BTreeSet<Monomial>;

fn zp_const(bit: bool) -> ZPoly {
    if bit {
        BTreeSet::from([Monomial::new()])
    } else {
        ZPoly::new()
    }
}

fn zp_var(g: u32) -> ZPoly {
    BTreeSet::from([Monomial::from([g])])
}

fn zp_add(a: &ZPoly, b: &ZPoly) -> ZPoly {
    a.symmetric_difference(b).cloned().collect()
}

fn zp_mul(a: &ZPoly, b: &ZPoly) -> ZPoly {
    let mut out = ZPoly::new();
    for ma in a {
        for mb in b {
            let m: Monomial = ma.union(mb).copied().collect();
            if !out.remove(&m) {
                out.insert(m);
            }
        }
    }
    out
}

fn zp_vars(p: &ZPoly) -> BTreeSet<u32> {
    p.iter().flatten().copied().collect()
}

/// One step of the evaluation machine. `Eval` resolves a gate's value at a
/// tree node; `Combine` folds operand values; `Subst` inspects a value pulled
/// up from a child; `Apply` substitutes values for its surviving z-variables.
enum Step {
    Eval { t: usize, f: GateId },
    Combine { t: usize, f: GateId },
    Subst { t: usize, f: GateId },
    Apply { t: usize, f: GateId, gamma: ZPoly, pending: Vec<u32> },
}

struct FrameMachine<'a> {
    c: &'a Circuit,
    td: &'a TreeDecomposition,
    scopes: Scopes,
    budget: FrameBudget,
    memo: HashMap<(usize, u32), ZPoly>,
    tele: EvalTelemetry,
}

impl<'a> FrameMachine<'a> {
    fn check(&mut self, p: &ZPoly) -> Result<(), ReachError> {
        let monomials = p.len();
        let z_vars = zp_vars(p).len();
        self.tele.max_frame_coefficient_bits = self.tele.max_frame_coefficient_bits.max(monomials);
        self.tele.max_frame_z_vars = self.tele.max_frame_z_vars.max(z_vars);
        if monomials as u64 > self.budget.max_monomials || z_vars > self.budget.max_z_vars {
            return Err(ReachError::FrameBudget {
                monomials,
                z_vars,
                max_monomials: self.budget.max_monomials,
                max_z_vars: self.budget.max_z_vars,
            });
        }
        Ok(())
    }

    fn finish(
        &mut self,
        t: usize,
        f: GateId,
        p: ZPoly,
        results: &mut Vec<ZPoly>,
    ) -> Result<(), ReachError> {
        self.check(&p)?;
        self.memo.insert((t, f.0), p.clone());
        results.push(p);
        Ok(())
    }

    fn value(&mut self, t0: usize, f0: GateId) -> Result<ZPoly, ReachError> {
        let mut work = vec![Step::Eval { t: t0, f: f0 }];
        let mut results: Vec<ZPoly> = Vec::new();
        while let Some(step) = work.pop() {
            self.tele.max_live_frames = self.tele.max_live_frames.max(work.len() + 1);
            match step {
                Step::Eval { t, f } => {
                    if let Some(p) = self.memo.get(&(t, f.0)) {
                        results.push(p.clone());
                        continue;
                    }
                    self.tele.frames_evaluated += 1;
                    let gate = &self.c.gates()[f.index()];
                    match &gate.label {
                        Label::Const(v) => {
                            let p = zp_const(!(v % BigInt::from(2)).is_zero());
                            self.finish(t, f, p, &mut results)?;
                        }
                        Label::Input(_) | Label::ZPlaceholder(_) => {
                            unreachable!("leaves were substituted or rejected up front")
                        }
                        _ => match self.scopes.classify(self.td, t, f, gate)? {
                            GateCase::InBag => {
                                work.push(Step::Combine { t, f });
                                for &g in gate.inputs.iter().rev() {
                                    work.push(Step::Eval { t, f: g });
                                }
                            }
                            GateCase::Outside => {
                                let p = zp_var(f.0);
                                self.finish(t, f, p, &mut results)?;
                            }
                            GateCase::BelowChild(child) => {
                                work.push(Step::Subst { t, f });
                                work.push(Step::Eval { t: child, f });
                            }
                        },
                    }
                }
                Step::Combine { t, f } => {
                    let gate = &self.c.gates()[f.index()];
                    let ops = results.split_off(results.len() - gate.inputs.len());
                    let p = match gate.label {
                        Label::Add => {
                            let mut acc = ops[0].clone();
                            for q in &ops[1..] {
                                acc = zp_add(&acc, q);
                            }
                            acc
                        }
                        Label::Mul => zp_mul(&ops[0], &ops[1]),
                        _ => unreachable!("arithmetic circuits only combine add and mul"),
                    };
                    self.finish(t, f, p, &mut results)?;
                }
                Step::Subst { t, f } => {
                    let gamma = results.pop().expect("child value was just computed");
                    let pending: Vec<u32> = zp_vars(&gamma).into_iter().collect();
                    if pending.contains(&f.0) {
                        return Err(ReachError::InvalidDecomposition(format!(
                            "gate {} depends on its own unresolved value",
                            self.c.gates()[f.index()].name
                        )));
                    }
                    if pending.is_empty() {
                        self.finish(t, f, gamma, &mut results)?;
                    } else {
                        // The evals run first, leaving one value per pending
                        // variable on the results stack for Apply.
                        work.push(Step::Apply { t, f, gamma, pending: pending.clone() });
                        for &g in pending.iter().rev() {
                            work.push(Step::Eval { t, f: GateId(g) });
                        }
                    }
                }
                Step::Apply { t, f, gamma, pending } => {
                    let vals = results.split_off(results.len() - pending.len());
                    // Substitute all variables at once: expand each monomial
                    // as the product of its variables' values. Every
                    // intermediate then only carries this node's z-variables.
                    let mut acc = ZPoly::new();
                    for m in &gamma {
                        let mut term = zp_const(true);
                        for g in m {
                            let i = pending.binary_search(g).expect("monomial variables are pending");
                            term = zp_mul(&term, &vals[i]);
                            self.check(&term)?;
                        }
                        acc = zp_add(&acc, &term);
                        self.check(&acc)?;
                    }
                    self.finish(t, f, acc, &mut results)?;
                }
            }
        }
        debug_assert_eq!(results.len(), 1);
        Ok(results.pop().expect("evaluation leaves exactly one value"))
    }
}

/// Evaluate an arithmetic circuit over GF(2) by the width-budgeted stack
/// machine. Inputs are replaced by their assigned bits up front; the
/// decomposition is rooted at the output and preprocessed internally, and the
/// budget is derived from the preprocessed width. A budget violation reports
/// an evaluator bug — valid inputs cannot trigger it.
pub fn eval_bounded_frames(
    c: &Circuit,
    td: &TreeDecomposition,
    x: &BTreeMap<String, BigInt>,
) -> Result<(bool, EvalTelemetry), ReachError> {
    if c.kind() != CircuitKind::Arithmetic {
        return Err(ReachError::NotArithmetic);
    }
    if let Some(g) = c.gates().iter().find(|g| matches!(g.label, Label::ZPlaceholder(_))) {
        return Err(ReachError::PlaceholderInput(g.name.clone()));
    }
    let mut gates = c.gates().to_vec();
    for g in &mut gates {
        if let Label::Input(name) = &g.label {
            let v = x.get(name).ok_or_else(|| ReachError::InputMissing(name.clone()))?;
            let bit = !(v % BigInt::from(2)).is_zero();
            g.label = Label::Const(BigInt::from(bit as u8));
        }
    }
    let c2 = Circuit::new(gates, c.output(), CircuitKind::Arithmetic)?;
    if let Some(v) = td.validate(&Graph::of_circuit(&c2)).into_iter().next() {
        return Err(ReachError::InvalidDecomposition(format!("{v}")));
    }
    let rooted = root_with_output(td, &c2);
    let pair = preprocess(&c2, &rooted)?;
    debug_assert!(check_preprocessed(&pair));

    let budget = FrameBudget::for_width(pair.td.width());
    let scopes = Scopes::of(&pair.circuit, &pair.td);
    let mut machine = FrameMachine {
        c: &pair.circuit,
        td: &pair.td,
        scopes,
        budget,
        memo: HashMap::new(),
        tele: EvalTelemetry {
            budget,
            max_live_frames: 0,
            max_frame_coefficient_bits: 0,
            max_frame_z_vars: 0,
            frames_evaluated: 0,
        },
    };
    let root = pair.td.root();
    let out = pair.circuit.output();
    if !pair.td.bag(root).contains(&out.0) {
        return Err(ReachError::InvalidDecomposition("output gate not in the root bag".into()));
    }
    let p = machine.value(root, out)?;
    if !zp_vars(&p).is_empty() {
        return Err(ReachError::InvalidDecomposition(
            "unresolved gate values survived to the root".into(),
        ));
    }
    Ok((!p.is_empty(), machine.tele))
}

/// Resource report from a full reachability run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReachTelemetry {
    pub circuit_gates: usize,
    pub circuit_td_width: usize,
    pub or_chain_growth: usize,
    pub arith_td_width: usize,
    pub balanced_td_width: usize,
    pub balanced_td_depth: usize,
    pub eval: EvalTelemetry,
}

/// Decide reachability through the full pipeline: compile to a boolean
/// circuit, move to GF(2), balance the decomposition, evaluate with bounded
/// frames.
pub fn solve_reach(r: &ReachInstance) -> Result<bool, ReachError> {
    solve_reach_telemetry(r).map(|(value, _)| value)
}

pub fn solve_reach_telemetry(r: &ReachInstance) -> Result<(bool, ReachTelemetry), ReachError> {
    let rc = reach_to_circuit(r)?;
    let (ac, atd) = arithmetize(&rc.circuit, &rc.td)?;
    let bal = balance_td(&Graph::of_circuit(&ac), &atd)?;
    let (value, eval) = eval_bounded_frames(&ac, &bal, &rc.assignment)?;
    let tele = ReachTelemetry {
        circuit_gates: rc.circuit.gates().len(),
        circuit_td_width: rc.td.width(),
        or_chain_growth: rc.or_chain_growth,
        arith_td_width: atd.width(),
        balanced_td_width: bal.width(),
        balanced_td_depth: bal.depth(),
        eval,
    };
    Ok((value, tele))
}

//! Width-bounded leveled simulation.
//!
//! Rebuilds a preprocessed circuit, bottom-up over its tree decomposition,
//! as a leveled circuit whose width grows by at most `k + 1` per tree level:
//! the result obeys `width ≤ (k+1) · (depth(td) + 1)` (constants `c₁ = 1`,
//! `c₂ = 0`), so balanced decompositions yield width `O(k · log s)`.
//!
//! Every tree node is compiled into a "block": a leveled multi-output
//! circuit with one carried wire per bag gate, all riding at the block's top
//! level on fan-in-one addition pass-throughs (never constant padding). Bag
//! gates are processed in ascending id order using the same case split as
//! the flattening engine: in-bag gates combine two carried wires, gates with
//! their cone below one child replay a copy of that child's block — feeding
//! the copy's placeholder leaves from wires the parent already carries — and
//! gates whose cone lies entirely outside the subtree ride along as
//! placeholder leaves until an ancestor can feed them. A placeholder that
//! survives to the root is a hard error.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::bits::BitSet;
use crate::circuit::{Circuit, CircuitError, CircuitKind, Gate, GateId, Label};
use crate::td::{Graph, TreeDecomposition};
use crate::traceback::{GateCase, ScopeError, Scopes};
use crate::transforms::{check_preprocessed, PreprocessedPair};

/// Default ceiling on the number of gates the simulation may emit. Each
/// replayed child block copies gates, so size can grow by a factor of the
/// bag size per tree level.
pub const DEFAULT_MAX_GATES: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum WidthSimError {
    #[error("width simulation requires an arithmetic circuit")]
    NotArithmetic,
    #[error("gate {0} is a placeholder; the input circuit must be placeholder-free")]
    PlaceholderInput(String),
    #[error("invalid tree decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("pair is not preprocessed: {0}")]
    NotPreprocessed(String),
    #[error("simulated circuit grew past {limit} gates")]
    TooLarge { limit: usize },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

impl From<ScopeError> for WidthSimError {
    fn from(e: ScopeError) -> Self {
        match e {
            ScopeError::Preprocessing(m) => WidthSimError::NotPreprocessed(m),
            ScopeError::Decomposition(m) => WidthSimError::InvalidDecomposition(m),
        }
    }
}

/// What the builder did for one bag gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimAction {
    /// Input or constant: placed as a fresh leaf and carried.
    Leaf,
    /// Fan-in-one gate: shares its operand's carried wire, no new gate.
    Forward,
    /// Both operands in the bag: one new gate on a fresh level.
    Combine,
    /// Cone entirely outside the subtree: carried as a placeholder leaf.
    Defer,
    /// Cone below one child: replayed a copy of that child's block.
    Replay { child: usize },
}

impl fmt::Display for SimAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimAction::Leaf => write!(f, "leaf"),
            SimAction::Forward => write!(f, "forward"),
            SimAction::Combine => write!(f, "combine"),
            SimAction::Defer => write!(f, "defer"),
            SimAction::Replay { child } => write!(f, "replay({child})"),
        }
    }
}

/// One step of the simulation: tree node, position and id of the bag gate
/// handled, what was done, and the node block's width after the step.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub node: usize,
    pub bag_index: usize,
    pub gate: u32,
    pub action: SimAction,
    pub width_so_far: usize,
}

#[derive(Debug, Clone)]
pub struct WidthSimReport {
    /// Leveled circuit equivalent to the input.
    pub output: Circuit,
    /// Maximum number of gates on any level.
    pub width: usize,
    /// Total gate count of `output`.
    pub size_total: usize,
    /// Per-bag-gate build log, in processing order.
    pub per_level_trace: Vec<TraceRecord>,
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// A leveled multi-output circuit under construction for one tree node.
/// Invariant: every carried wire ("slot") sits at the current top level.
struct Block {
    gates: Vec<Gate>,
    levels: Vec<u32>,
    level_pop: Vec<usize>,
    slots: Vec<GateId>,
    /// Bag vertex → slot carrying its value.
    outputs: BTreeMap<u32, usize>,
    top: u32,
    width: usize,
}

impl Block {
    fn new() -> Block {
        Block {
            gates: Vec::new(),
            levels: Vec::new(),
            level_pop: Vec::new(),
            slots: Vec::new(),
            outputs: BTreeMap::new(),
            top: 0,
            width: 0,
        }
    }

    fn push(&mut self, label: Label, inputs: Vec<GateId>, level: u32) -> GateId {
        let id = GateId::from_index(self.gates.len());
        self.gates.push(Gate { name: format!("n{}", id.0), label, inputs });
        self.levels.push(level);
        let l = level as usize;
        if self.level_pop.len() <= l {
            self.level_pop.resize(l + 1, 0);
        }
        self.level_pop[l] += 1;
        self.width = self.width.max(self.level_pop[l]);
        id
    }

    /// Place a leaf at the current top level and carry it.
    fn place_slot_leaf(&mut self, label: Label) -> usize {
        let id = self.push(label, Vec::new(), self.top);
        self.slots.push(id);
        self.slots.len() - 1
    }

    /// Open a fresh level: pass-throughs keep every slot alive, then the new
    /// gate lands beside them, consuming wires of the previous top.
    fn advance(&mut self, label: Label, operands: Vec<GateId>) -> usize {
        let lvl = self.top + 1;
        for i in 0..self.slots.len() {
            let prev = self.slots[i];
            self.slots[i] = self.push(Label::Add, vec![prev], lvl);
        }
        let id = self.push(label, operands, lvl);
        self.top = lvl;
        self.slots.push(id);
        self.slots.len() - 1
    }

    /// Copy the cone of `tap` from a child block on top of this one. Each
    /// placeholder leaf of the copy is rewired to the slot that already
    /// carries the named gate's value; every slot rides alongside the copy
    /// on a pass-through chain.
    fn replay(
        &mut self,
        child: &Block,
        tap: GateId,
        feed: &BTreeMap<String, usize>,
    ) -> Result<usize, WidthSimError> {
        let mut cone = BitSet::new(child.gates.len());
        let mut stack = vec![tap];
        while let Some(id) = stack.pop() {
            if cone.contains(id.index()) {
                continue;
            }
            cone.insert(id.index());
            stack.extend_from_slice(&child.gates[id.index()].inputs);
        }
        let delta = if self.gates.is_empty() { 0 } else { self.top + 1 };
        let child_top = child.levels[tap.index()];
        let mut map: Vec<Option<GateId>> = vec![None; child.gates.len()];
        for gl in delta..=delta + child_top {
            // `prev` is the rung one level down, where feeds must tap in.
            let prev: Vec<GateId> = self.slots.clone();
            for i in 0..self.slots.len() {
                self.slots[i] = self.push(Label::Add, vec![prev[i]], gl);
            }
            let local = gl - delta;
            for j in 0..child.gates.len() {
                if !cone.contains(j) || child.levels[j] != local {
                    continue;
                }
                let g = &child.gates[j];
                let id = match &g.label {
                    Label::ZPlaceholder(name) => {
                        let &s = feed.get(name).ok_or_else(|| {
                            WidthSimError::InvalidDecomposition(format!(
                                "placeholder {name} lacks a carried value in the parent bag"
                            ))
                        })?;
                        self.push(Label::Add, vec![prev[s]], gl)
                    }
                    label => {
                        let inputs = g
                            .inputs
                            .iter()
                            .map(|i| map[i.index()].expect("child blocks are leveled"))
                            .collect();
                        self.push(label.clone(), inputs, gl)
                    }
                };
                map[j] = Some(id);
            }
        }
        self.top = delta + child_top;
        let copied = map[tap.index()].expect("tap lies in its own cone");
        self.slots.push(copied);
        Ok(self.slots.len() - 1)
    }
}

// ---------------------------------------------------------------------------
// The builder
// ---------------------------------------------------------------------------

struct Builder<'a> {
    c: &'a Circuit,
    td: &'a TreeDecomposition,
    scopes: Scopes,
    max_gates: usize,
    trace: Vec<TraceRecord>,
    node_width: Vec<usize>,
}

impl Builder<'_> {
    fn build_node(
        &mut self,
        t: usize,
        kids: &BTreeMap<usize, Block>,
    ) -> Result<Block, WidthSimError> {
        let mut block = Block::new();
        let k1 = self.td.width() + 1;
        for (idx, &v) in self.td.bag(t).iter().enumerate() {
            let f = GateId(v);
            let gate = self.c.gate(f);
            let action = match &gate.label {
                Label::Input(_) | Label::Const(_) => {
                    let s = block.place_slot_leaf(gate.label.clone());
                    block.outputs.insert(v, s);
                    SimAction::Leaf
                }
                Label::ZPlaceholder(_) => unreachable!("rejected before building"),
                _ => match self.scopes.classify(self.td, t, f, gate)? {
                    GateCase::InBag => {
                        let mut ops = Vec::with_capacity(gate.inputs.len());
                        for p in &gate.inputs {
                            let s = block.outputs.get(&p.0).copied().ok_or_else(|| {
                                WidthSimError::InvalidDecomposition(format!(
                                    "operand {} of gate {} was not processed first",
                                    self.c.gate(*p).name,
                                    gate.name
                                ))
                            })?;
                            ops.push(s);
                        }
                        if let [only] = ops[..] {
                            block.outputs.insert(v, only);
                            SimAction::Forward
                        } else {
                            let wires = ops.iter().map(|&s| block.slots[s]).collect();
                            let s = block.advance(gate.label.clone(), wires);
                            block.outputs.insert(v, s);
                            SimAction::Combine
                        }
                    }
                    GateCase::Outside => {
                        let s = block.place_slot_leaf(Label::ZPlaceholder(gate.name.clone()));
                        block.outputs.insert(v, s);
                        SimAction::Defer
                    }
                    GateCase::BelowChild(child) => {
                        let cb = kids.get(&child).expect("children built before parents");
                        let tap_slot = cb.outputs.get(&v).copied().ok_or_else(|| {
                            WidthSimError::InvalidDecomposition(format!(
                                "gate {} has no carried value in the child that owns its cone",
                                gate.name
                            ))
                        })?;
                        let feed: BTreeMap<String, usize> = block
                            .outputs
                            .iter()
                            .map(|(&u, &s)| (self.c.gate(GateId(u)).name.clone(), s))
                            .collect();
                        let s = block.replay(cb, cb.slots[tap_slot], &feed)?;
                        block.outputs.insert(v, s);
                        SimAction::Replay { child }
                    }
                },
            };
            if block.gates.len() > self.max_gates {
                return Err(WidthSimError::TooLarge { limit: self.max_gates });
            }
            self.trace.push(TraceRecord {
                node: t,
                bag_index: idx,
                gate: v,
                action,
                width_so_far: block.width,
            });
        }
        let child_max =
            self.td.children(t).iter().map(|&ch| self.node_width[ch]).max().unwrap_or(0);
        assert!(
            block.width <= child_max + k1,
            "width bound violated at node {t}: {} > {child_max} + {k1}",
            block.width
        );
        self.node_width[t] = block.width;
        Ok(block)
    }
}

/// Simulate a preprocessed pair as a leveled circuit of width at most
/// `(k+1) · (depth(td) + 1)`, with the default size ceiling.
pub fn width_simulate(p: &PreprocessedPair) -> Result<WidthSimReport, WidthSimError> {
    width_simulate_bounded(p, DEFAULT_MAX_GATES)
}

/// Like [`width_simulate`] with an explicit gate-count ceiling.
pub fn width_simulate_bounded(
    p: &PreprocessedPair,
    max_gates: usize,
) -> Result<WidthSimReport, WidthSimError> {
    let c = &p.circuit;
    let td = &p.td;
    if c.kind() != CircuitKind::Arithmetic {
        return Err(WidthSimError::NotArithmetic);
    }
    if let Some(g) = c.gates().iter().find(|g| matches!(g.label, Label::ZPlaceholder(_))) {
        return Err(WidthSimError::PlaceholderInput(g.name.clone()));
    }
    if let Some(v) = td.validate(&Graph::of_circuit(c)).into_iter().next() {
        return Err(WidthSimError::InvalidDecomposition(format!("{v:?}")));
    }
    if !td.bag(td.root()).contains(&c.output().0) {
        return Err(WidthSimError::InvalidDecomposition("output gate not in the root bag".into()));
    }
    if !check_preprocessed(p) {
        return Err(WidthSimError::NotPreprocessed(
            "some bag mixes in-bag and out-of-bag inputs, or splits a pair across scopes".into(),
        ));
    }
    let mut builder = Builder {
        c,
        td,
        scopes: Scopes::of(c, td),
        max_gates,
        trace: Vec::new(),
        node_width: vec![0; td.num_nodes()],
    };
    let mut order: Vec<usize> = Vec::with_capacity(td.num_nodes());
    let mut stack = vec![td.root()];
    while let Some(t) = stack.pop() {
        order.push(t);
        stack.extend_from_slice(td.children(t));
    }
    let mut blocks: Vec<Option<Block>> = (0..td.num_nodes()).map(|_| None).collect();
    for &t in order.iter().rev() {
        let mut kids = BTreeMap::new();
        for &ch in td.children(t) {
            kids.insert(ch, blocks[ch].take().expect("children precede parents"));
        }
        blocks[t] = Some(builder.build_node(t, &kids)?);
    }
    let root = blocks[td.root()].take().expect("root was built");
    if let Some(g) = root.gates.iter().find(|g| matches!(g.label, Label::ZPlaceholder(_))) {
        return Err(WidthSimError::InvalidDecomposition(format!(
            "placeholder {} survived to the root",
            g.name
        )));
    }
    let out_slot = root.outputs.get(&c.output().0).copied().ok_or_else(|| {
        WidthSimError::InvalidDecomposition("output gate has no carried value at the root".into())
    })?;
    let out_gate = root.slots[out_slot];
    let width = root.width;
    let k1 = td.width() + 1;
    assert!(
        width <= k1 * (td.depth() + 1),
        "global width bound violated: {width} > {k1} * ({} + 1)",
        td.depth()
    );
    let output = Circuit::with_levels(root.gates, out_gate, CircuitKind::Arithmetic, root.levels)?;
    debug_assert_eq!(output.circuit_width().expect("explicit leveling"), width);
    let size_total = output.size_total();
    Ok(WidthSimReport { output, width, size_total, per_level_trace: builder.trace })
}

//! Structural circuit rewrites.
//!
//! Everything in here takes a circuit (usually with a tree decomposition),
//! rewires it, and hands back an equivalent circuit together with a patched
//! decomposition. The rewrites are deliberately literal: each one inserts the
//! exact gadget its correctness argument talks about, instead of anything
//! cleverer, so the structural invariants downstream passes rely on can be
//! checked gate by gate.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use num_bigint::BigInt;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::bits::BitSet;
use crate::circuit::{Circuit, CircuitKind, Formula, Gate, GateId, Label};
use crate::td::{td_from_leveled, Graph, TreeDecomposition};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("tree decomposition invalid for circuit: {0}")]
    InvalidDecomposition(String),
    #[error("expected a boolean circuit")]
    NotBoolean,
    #[error("expected an arithmetic circuit")]
    NotArithmetic,
    #[error("constant `{0}` is outside GF(2)")]
    NonBinaryConstant(String),
    #[error("placeholder leaf `{0}` cannot be rewritten")]
    UnexpectedPlaceholder(String),
    #[error("circuit is not leveled")]
    NotLeveled,
    #[error("gate `{0}` has fan-out {1}; reduce_fanout must run first")]
    FanOutTooLarge(String, usize),
    #[error("circuit is not syntactically multilinear")]
    NotSyntacticallyMultilinear,
}

fn ensure_valid(c: &Circuit, td: &TreeDecomposition) -> Result<(), TransformError> {
    let graph = Graph::of_circuit(c);
    let violations = td.validate(&graph);
    match violations.first() {
        None => Ok(()),
        Some(v) => Err(TransformError::InvalidDecomposition(v.to_string())),
    }
}

fn fresh_name(taken: &mut HashSet<String>, base: String) -> String {
    if taken.insert(base.clone()) {
        return base;
    }
    let mut salt = 2usize;
    loop {
        let cand = format!("{base}_{salt}");
        if taken.insert(cand.clone()) {
            return cand;
        }
        salt += 1;
    }
}

/// The identity gate for a circuit kind: `x + 0` or `x ∨ 0`.
fn passthrough_label(kind: CircuitKind) -> Label {
    match kind {
        CircuitKind::Arithmetic => Label::Add,
        CircuitKind::Boolean => Label::Or,
    }
}

// ---------------------------------------------------------------------------
// Preprocessing: per-bag input visibility
// ---------------------------------------------------------------------------

/// A circuit/decomposition pair in which every gate visible in a bag has
/// either both inputs in that bag or both outside it (and in the latter case
/// both on the same side of the subtree cut). `provenance[new gate]` is the
/// gate of the original circuit the new gate stands for: inserted buffer and
/// zero gates map to the input wire they buffer.
#[derive(Debug, Clone)]
pub struct PreprocessedPair {
    pub circuit: Circuit,
    pub td: TreeDecomposition,
    pub provenance: Vec<GateId>,
}

/// Resolve mixed-visibility gates by buffering the out-of-bag input `g2`
/// through a fresh addition `a = b_{g2} + g2` with a zero constant `b_{g2}`
/// (one zero gate per buffered source, reused). `a` joins every bag holding
/// the consumer; `b_{g2}` joins every bag holding `g2`.
pub fn preprocess(c: &Circuit, td: &TreeDecomposition) -> Result<PreprocessedPair, TransformError> {
    ensure_valid(c, td)?;
    let n = c.size_total();
    // occ[g] = tree nodes whose bag mentions gate g (1-based vertex = GateId).
    let mut occ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (t, bag) in td.bags().iter().enumerate() {
        for &v in bag {
            occ[v as usize - 1].push(t);
        }
    }

    // Decide which input slots need buffering. A slot is wrapped when some
    // bag sees the gate and the other input (or its buffer, which lands in
    // every bag with the gate) but not this one. Wrapping one slot can expose
    // the other, so iterate to a fixpoint; two rounds suffice.
    let mut wrapped: Vec<[bool; 2]> = vec![[false; 2]; n];
    loop {
        let mut changed = false;
        for (i, g) in c.gates().iter().enumerate() {
            if g.inputs.len() != 2 {
                continue;
            }
            for &t in &occ[i] {
                let bag = td.bag(t);
                let in_bag = [
                    bag.contains(&g.inputs[0].0),
                    bag.contains(&g.inputs[1].0),
                ];
                for slot in 0..2 {
                    let eff_this = wrapped[i][slot] || in_bag[slot];
                    let eff_other = wrapped[i][1 - slot] || in_bag[1 - slot];
                    if !eff_this && eff_other {
                        wrapped[i][slot] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Sources that need a zero gate.
    let mut needs_zero: BTreeSet<usize> = BTreeSet::new();
    for (i, g) in c.gates().iter().enumerate() {
        for slot in 0..2 {
            if g.inputs.len() == 2 && wrapped[i][slot] {
                needs_zero.insert(g.inputs[slot].index());
            }
        }
    }

    // Rebuild with dense renumbering: each original gate is preceded by the
    // buffers for its wrapped slots, and followed by its zero gate if some
    // consumer buffers it.
    let mut names: HashSet<String> = c.gates().iter().map(|g| g.name.clone()).collect();
    let mut gates: Vec<Gate> = Vec::with_capacity(n);
    let mut provenance: Vec<GateId> = Vec::new();
    let mut new_id: Vec<GateId> = vec![GateId(0); n];
    let mut zero_id: Vec<Option<GateId>> = vec![None; n];
    // (new bag additions, keyed by original gate whose bags receive them)
    let mut join_bags_of: Vec<(GateId, usize)> = Vec::new();

    for (i, g) in c.gates().iter().enumerate() {
        let mut inputs = g.inputs.clone();
        for slot in 0..inputs.len() {
            if g.inputs.len() == 2 && wrapped[i][slot] {
                let src = g.inputs[slot].index();
                let zid = zero_id[src].expect("zero gate emitted after its source");
                let name = fresh_name(
                    &mut names,
                    format!("buf_{}_{}", c.gates()[src].name, g.name),
                );
                gates.push(Gate {
                    name,
                    label: passthrough_label(c.kind()),
                    inputs: vec![zid, new_id[src]],
                });
                provenance.push(GateId::from_index(src));
                let a = GateId::from_index(gates.len() - 1);
                // The buffer accompanies its consumer everywhere.
                join_bags_of.push((a, i));
                inputs[slot] = a;
            } else {
                inputs[slot] = new_id[inputs[slot].index()];
            }
        }
        gates.push(Gate { name: g.name.clone(), label: g.label.clone(), inputs });
        provenance.push(GateId::from_index(i));
        new_id[i] = GateId::from_index(gates.len() - 1);
        if needs_zero.contains(&i) {
            let name = fresh_name(&mut names, format!("zero_{}", g.name));
            gates.push(Gate { name, label: Label::Const(BigInt::zero()), inputs: vec![] });
            provenance.push(GateId::from_index(i));
            let b = GateId::from_index(gates.len() - 1);
            zero_id[i] = Some(b);
            join_bags_of.push((b, i));
        }
    }

    let mut bags: Vec<BTreeSet<u32>> = td
        .bags()
        .iter()
        .map(|bag| bag.iter().map(|&v| new_id[v as usize - 1].0).collect())
        .collect();
    for (gate, host) in join_bags_of {
        for &t in &occ[host] {
            bags[t].insert(gate.0);
        }
    }

    let circuit = Circuit::new(gates, new_id[c.output().index()], c.kind())
        .expect("buffered circuit stays well formed");
    let parents = (0..td.num_nodes()).map(|t| td.parent(t)).collect();
    let td = TreeDecomposition::new(bags, parents).expect("patched bags keep the tree shape");
    let pair = PreprocessedPair { circuit, td, provenance };
    debug_assert!(ensure_valid(&pair.circuit, &pair.td).is_ok());
    debug_assert!(check_preprocessed(&pair));
    Ok(pair)
}

/// Decide the preprocessing property by direct scan: for every bag and every
/// fan-in-two gate in it, both inputs in the bag or both outside, and when
/// both are outside they sit on the same side of the subtree below the node.
pub fn check_preprocessed(p: &PreprocessedPair) -> bool {
    let td = &p.td;
    let c = &p.circuit;
    // below[t] = union of bags in the subtree rooted at t.
    let order = td.topo_order();
    let mut below: Vec<BitSet> = td
        .bags()
        .iter()
        .map(|bag| {
            let mut s = BitSet::new(c.size_total() + 1);
            for &v in bag {
                s.insert(v as usize);
            }
            s
        })
        .collect();
    for &t in order.iter().rev() {
        if let Some(par) = td.parent(t) {
            let child = below[t].clone();
            below[par].union_with(&child);
        }
    }
    for (t, bag) in td.bags().iter().enumerate() {
        for &v in bag {
            let g = c.gate(GateId(v));
            if g.inputs.len() != 2 {
                continue;
            }
            let ins = [g.inputs[0].0, g.inputs[1].0];
            let in_bag = [bag.contains(&ins[0]), bag.contains(&ins[1])];
            if in_bag[0] != in_bag[1] {
                return false;
            }
            if !in_bag[0] && below[t].contains(ins[0] as usize) != below[t].contains(ins[1] as usize)
            {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Arithmetization and its reverse
// ---------------------------------------------------------------------------

/// Rewrite a boolean circuit over GF(2): `∧ → ×`, `¬f → 1 + f`, and
/// `f₁ ∨ f₂ → (f₁ +_a f₂) +_b (f₁ ×_c f₂)` where the ∨ vertex hosts the inner
/// addition and `b`, `c` are fresh. The decomposition is patched in place:
/// the ¬-constant joins one bag holding the ¬ gate, `b` and `c` join every bag
/// holding `a`.
pub fn arithmetize(
    c: &Circuit,
    td: &TreeDecomposition,
) -> Result<(Circuit, TreeDecomposition), TransformError> {
    if c.kind() != CircuitKind::Boolean {
        return Err(TransformError::NotBoolean);
    }
    ensure_valid(c, td)?;
    let n = c.size_total();
    let mut names: HashSet<String> = c.gates().iter().map(|g| g.name.clone()).collect();
    let mut gates: Vec<Gate> = Vec::with_capacity(n);
    // Consumers read from new_id; bags keep the reused vertex (for ∨ that is
    // the inner addition, not the replacement output).
    let mut new_id: Vec<GateId> = vec![GateId(0); n];
    let mut bag_id: Vec<GateId> = vec![GateId(0); n];
    // Bag patches: (gate, original host, every_bag?).
    let mut patches: Vec<(GateId, usize, bool)> = Vec::new();

    for (i, g) in c.gates().iter().enumerate() {
        let inputs: Vec<GateId> = g.inputs.iter().map(|a| new_id[a.index()]).collect();
        let (id, reused) = match &g.label {
            Label::Input(_) | Label::Const(_) | Label::ZPlaceholder(_) => {
                gates.push(Gate { name: g.name.clone(), label: g.label.clone(), inputs });
                let id = GateId::from_index(gates.len() - 1);
                (id, id)
            }
            Label::And => {
                gates.push(Gate { name: g.name.clone(), label: Label::Mul, inputs });
                let id = GateId::from_index(gates.len() - 1);
                (id, id)
            }
            Label::Not => {
                let one = fresh_name(&mut names, format!("one_{}", g.name));
                gates.push(Gate { name: one, label: Label::Const(BigInt::one()), inputs: vec![] });
                let one_id = GateId::from_index(gates.len() - 1);
                patches.push((one_id, i, false));
                gates.push(Gate {
                    name: g.name.clone(),
                    label: Label::Add,
                    inputs: vec![one_id, inputs[0]],
                });
                let id = GateId::from_index(gates.len() - 1);
                (id, id)
            }
            Label::Or => {
                gates.push(Gate { name: g.name.clone(), label: Label::Add, inputs: inputs.clone() });
                let a = GateId::from_index(gates.len() - 1);
                let cn = fresh_name(&mut names, format!("{}_mul", g.name));
                gates.push(Gate { name: cn, label: Label::Mul, inputs });
                let c_id = GateId::from_index(gates.len() - 1);
                let bn = fresh_name(&mut names, format!("{}_out", g.name));
                gates.push(Gate { name: bn, label: Label::Add, inputs: vec![a, c_id] });
                let b_id = GateId::from_index(gates.len() - 1);
                patches.push((c_id, i, true));
                patches.push((b_id, i, true));
                (b_id, a)
            }
            Label::Add | Label::Mul => unreachable!("boolean circuits carry no field gates"),
        };
        new_id[i] = id;
        bag_id[i] = reused;
    }

    let mut bags: Vec<BTreeSet<u32>> = td
        .bags()
        .iter()
        .map(|bag| bag.iter().map(|&v| bag_id[v as usize - 1].0).collect())
        .collect();
    for (gate, host, everywhere) in patches {
        let hosts: Vec<usize> = td
            .bags()
            .iter()
            .enumerate()
            .filter(|(_, bag)| bag.contains(&(host as u32 + 1)))
            .map(|(t, _)| t)
            .collect();
        if everywhere {
            for t in hosts {
                bags[t].insert(gate.0);
            }
        } else if let Some(&t) = hosts.first() {
            bags[t].insert(gate.0);
        }
    }

    let circuit = Circuit::new(gates, new_id[c.output().index()], CircuitKind::Arithmetic)
        .expect("gadgets preserve well-formedness");
    let parents = (0..td.num_nodes()).map(|t| td.parent(t)).collect();
    let td = TreeDecomposition::new(bags, parents).expect("patched bags keep the tree shape");
    debug_assert!(ensure_valid(&circuit, &td).is_ok());
    Ok((circuit, td))
}

/// Reverse of arithmetization for GF(2) formulas: `× → ∧` and
/// `+ → (a ∧ ¬b) ∨ (¬a ∧ b)`. Operand trees are duplicated, so the input must
/// be a formula; sums should be balanced if the caller cares about size.
pub fn dearithmetize(f: &Formula) -> Result<Formula, TransformError> {
    let c: &Circuit = f;
    if c.kind() != CircuitKind::Arithmetic {
        return Err(TransformError::NotArithmetic);
    }
    for g in c.gates() {
        match &g.label {
            Label::Const(v) if !v.is_zero() && !v.is_one() => {
                return Err(TransformError::NonBinaryConstant(g.name.clone()));
            }
            Label::ZPlaceholder(z) => {
                return Err(TransformError::UnexpectedPlaceholder(z.clone()));
            }
            _ => {}
        }
    }

    let mut gates: Vec<Gate> = Vec::new();
    let mut names: HashSet<String> = HashSet::new();
    let mut counter = 0usize;
    let mut emit = |label: Label, inputs: Vec<GateId>, names: &mut HashSet<String>| -> GateId {
        counter += 1;
        let base = match &label {
            Label::Input(x) => x.clone(),
            Label::Const(v) => format!("k{v}"),
            _ => format!("b{counter}"),
        };
        let name = fresh_name(names, base);
        gates.push(Gate { name, label, inputs });
        GateId::from_index(gates.len() - 1)
    };

    // Each stack entry clones one subtree; plus gates request two clones of
    // each operand, so visits carry no memoization.
    enum Walk {
        Enter(GateId),
        Exit(GateId),
    }
    let mut results: Vec<GateId> = Vec::new();
    let mut stack = vec![Walk::Enter(c.output())];
    while let Some(step) = stack.pop() {
        match step {
            Walk::Enter(id) => {
                let g = c.gate(id);
                match &g.label {
                    Label::Input(_) | Label::Const(_) => {
                        results.push(emit(g.label.clone(), vec![], &mut names));
                    }
                    Label::Add if g.inputs.len() == 1 => {
                        stack.push(Walk::Enter(g.inputs[0]));
                    }
                    Label::Add => {
                        stack.push(Walk::Exit(id));
                        stack.push(Walk::Enter(g.inputs[0]));
                        stack.push(Walk::Enter(g.inputs[1]));
                        stack.push(Walk::Enter(g.inputs[0]));
                        stack.push(Walk::Enter(g.inputs[1]));
                    }
                    Label::Mul => {
                        stack.push(Walk::Exit(id));
                        stack.push(Walk::Enter(g.inputs[0]));
                        stack.push(Walk::Enter(g.inputs[1]));
                    }
                    _ => unreachable!("arithmetic formulas carry no boolean gates"),
                }
            }
            Walk::Exit(id) => match c.gate(id).label {
                Label::Mul => {
                    let a = results.pop().expect("left operand");
                    let b = results.pop().expect("right operand");
                    results.push(emit(Label::And, vec![a, b], &mut names));
                }
                Label::Add => {
                    let b2 = results.pop().expect("second right clone");
                    let a2 = results.pop().expect("second left clone");
                    let b1 = results.pop().expect("first right clone");
                    let a1 = results.pop().expect("first left clone");
                    let nb = emit(Label::Not, vec![b1], &mut names);
                    let left = emit(Label::And, vec![a1, nb], &mut names);
                    let na = emit(Label::Not, vec![a2], &mut names);
                    let right = emit(Label::And, vec![na, b2], &mut names);
                    results.push(emit(Label::Or, vec![left, right], &mut names));
                }
                _ => unreachable!(),
            },
        }
    }
    let output = results.pop().expect("one result per tree");
    let circuit =
        Circuit::new(gates, output, CircuitKind::Boolean).expect("xor coding is well formed");
    Ok(Formula::from_circuit(circuit).expect("cloned operands keep fan-out at one"))
}

// ---------------------------------------------------------------------------
// Fan-out reduction
// ---------------------------------------------------------------------------

/// Cap every fan-out at two by threading each level's gates through complete
/// binary trees of pass-through gates (`x + 0`, or `x ∨ 0` for boolean
/// circuits); every tree leaf serves at most two consumer slots. All gates of
/// a level pass through the same number of buffer levels, which keeps the
/// circuit leveled.
pub fn reduce_fanout(c: &Circuit) -> Result<Circuit, TransformError> {
    let levels = match c.levels() {
        Some(l) => l.to_vec(),
        None => return Err(TransformError::NotLeveled),
    };
    let fanout = c.out_degrees();
    if fanout.iter().all(|&f| f <= 2) {
        return Ok(c.clone());
    }

    // Consumer slots per gate, in (consumer, slot) order.
    let n = c.size_total();
    let mut consumers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, g) in c.gates().iter().enumerate() {
        for (slot, a) in g.inputs.iter().enumerate() {
            consumers[a.index()].push((i, slot));
        }
    }

    // Buffer depth per level value: enough leaves for the widest fan-out.
    let mut level_values: Vec<u32> = levels.clone();
    level_values.sort_unstable();
    level_values.dedup();
    let mut tree_depth: BTreeMap<u32, u32> = level_values.iter().map(|&v| (v, 0)).collect();
    for (i, &f) in fanout.iter().enumerate() {
        if f > 2 {
            // Enough two-consumer leaves for f slots: ceil(log2(ceil(f/2))).
            let leaves = f.div_ceil(2) as u32;
            let depth = if leaves <= 1 { 0 } else { 32 - (leaves - 1).leading_zeros() };
            let e = tree_depth.get_mut(&levels[i]).expect("level present");
            *e = (*e).max(depth);
        }
    }
    let mut offset: BTreeMap<u32, u32> = BTreeMap::new();
    let mut acc = 0u32;
    for &v in &level_values {
        offset.insert(v, acc);
        acc += tree_depth[&v];
    }

    let mut names: HashSet<String> = c.gates().iter().map(|g| g.name.clone()).collect();
    let mut gates: Vec<Gate> = Vec::new();
    let mut out_levels: Vec<u32> = Vec::new();
    let mut new_id: Vec<GateId> = vec![GateId(0); n];
    // Provider of each original edge in the new circuit.
    let mut provider: HashMap<(usize, usize, usize), GateId> = HashMap::new();
    let pass = passthrough_label(c.kind());

    for &value in &level_values {
        let depth = tree_depth[&value];
        let new_level = value + offset[&value];
        let members: Vec<usize> =
            (0..n).filter(|&i| levels[i] == value).collect();
        for &i in &members {
            let g = &c.gates()[i];
            let inputs: Vec<GateId> = g
                .inputs
                .iter()
                .enumerate()
                .map(|(slot, a)| provider[&(a.index(), i, slot)])
                .collect();
            gates.push(Gate { name: g.name.clone(), label: g.label.clone(), inputs });
            out_levels.push(new_level);
            new_id[i] = GateId::from_index(gates.len() - 1);
        }
        if depth == 0 {
            for &i in &members {
                for &(dst, slot) in &consumers[i] {
                    provider.insert((i, dst, slot), new_id[i]);
                }
            }
            continue;
        }
        // Buffer trees: row j of gate i has ceil(leaves / 2^(depth-j)) nodes,
        // node p feeding from node p/2 of the previous row.
        for &i in &members {
            if consumers[i].is_empty() {
                continue;
            }
            let leaves = consumers[i].len().div_ceil(2);
            let mut row: Vec<GateId> = vec![new_id[i]];
            for j in 1..=depth {
                let want = leaves.div_ceil(1 << (depth - j) as usize);
                let mut next = Vec::with_capacity(want);
                for p in 0..want {
                    let zn = fresh_name(&mut names, format!("zero_{}_{}_{}", c.gates()[i].name, j, p));
                    gates.push(Gate { name: zn, label: Label::Const(BigInt::zero()), inputs: vec![] });
                    out_levels.push(new_level + j - 1);
                    let z = GateId::from_index(gates.len() - 1);
                    let bn = fresh_name(&mut names, format!("copy_{}_{}_{}", c.gates()[i].name, j, p));
                    gates.push(Gate { name: bn, label: pass.clone(), inputs: vec![row[p / 2], z] });
                    out_levels.push(new_level + j);
                    next.push(GateId::from_index(gates.len() - 1));
                }
                row = next;
            }
            for (e, &(dst, slot)) in consumers[i].iter().enumerate() {
                provider.insert((i, dst, slot), row[e / 2]);
            }
        }
    }

    let out =
        Circuit::with_levels(gates, new_id[c.output().index()], c.kind(), out_levels)
            .expect("buffer trees keep the circuit leveled");
    debug_assert!(out.out_degrees().iter().all(|&f| f <= 2));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Multiplicative disjointness
// ---------------------------------------------------------------------------

/// Make a leveled circuit multiplicatively disjoint by the top-down level
/// sweep: wherever both consumers of a gate can reach a common multiplication,
/// the gate's cone is copied, the copy is recursively made disjoint, and the
/// higher consumer edge is rewired into the copy. Returns the rewritten
/// circuit and a decomposition of width ≤ 2w−1 assembled from the level path,
/// the recursive decompositions, and one connector bag per swept level.
pub fn md_transform(c: &Circuit) -> Result<(Circuit, TreeDecomposition), TransformError> {
    if c.kind() != CircuitKind::Arithmetic {
        return Err(TransformError::NotArithmetic);
    }
    if c.levels().is_none() {
        return Err(TransformError::NotLeveled);
    }
    for (i, &f) in c.out_degrees().iter().enumerate() {
        if f > 2 {
            return Err(TransformError::FanOutTooLarge(
                c.gates()[i].name.clone(),
                f,
            ));
        }
    }
    let (out, td) = md_worker(c, &mut 0);
    debug_assert!(out.is_multiplicatively_disjoint());
    debug_assert!(ensure_valid(&out, &td).is_ok());
    Ok((out, td))
}

fn md_worker(c: &Circuit, copy_seq: &mut usize) -> (Circuit, TreeDecomposition) {
    if c.is_multiplicatively_disjoint() {
        let td = td_from_leveled(c).expect("leveled by precondition");
        return (c.clone(), td);
    }
    let levels = c.levels().expect("leveled by precondition").to_vec();
    let n = c.size_total();
    let mut level_values: Vec<u32> = levels.clone();
    level_values.sort_unstable();
    level_values.dedup();

    // Working copy. Original gates keep their indices; grafted copies append.
    let mut gates: Vec<Gate> = c.gates().to_vec();
    let mut names: HashSet<String> = gates.iter().map(|g| g.name.clone()).collect();
    // Grafts per swept level value: (copy output, rewired consumer).
    let mut connectors: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    // Decompositions of the grafted copies, keyed by sweep level, with the
    // index offset their gates live at.
    let mut graft_tds: BTreeMap<u32, Vec<(TreeDecomposition, usize)>> = BTreeMap::new();

    for lv in (0..level_values.len().saturating_sub(1)).rev() {
        let value = level_values[lv];
        // Multiplications reachable upward among original gates. Copies never
        // feed other copies' cones, so original indices suffice.
        let mut reach: Vec<BitSet> = (0..n).map(|_| BitSet::new(n)).collect();
        for i in (0..n).rev() {
            if matches!(gates[i].label, Label::Mul) {
                reach[i].insert(i);
            }
        }
        for (i, g) in gates.iter().enumerate().take(n).skip(1).rev() {
            for a in &g.inputs {
                if a.index() < n {
                    let r = reach[i].clone();
                    reach[a.index()].union_with(&r);
                }
            }
        }
        // Consumer edges of this level's gates, low (consumer, slot) first.
        let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (i, g) in gates.iter().enumerate().take(n) {
            for (slot, a) in g.inputs.iter().enumerate() {
                if a.index() < n && levels[a.index()] == value {
                    edges[a.index()].push((i, slot));
                }
            }
        }
        for g in (0..n).filter(|&g| levels[g] == value) {
            if edges[g].len() < 2 {
                continue;
            }
            let (c1, _) = edges[g][0];
            let (c2, slot2) = edges[g][1];
            if !reach[c1].intersects(&reach[c2]) {
                continue;
            }
            // Cone of g among original gates; untouched by earlier sweeps.
            let mut in_cone = BitSet::new(n);
            let mut stack = vec![g];
            while let Some(v) = stack.pop() {
                if in_cone.contains(v) {
                    continue;
                }
                in_cone.insert(v);
                stack.extend(gates[v].inputs.iter().map(|a| a.index()));
            }
            let cone: Vec<usize> = (0..n).filter(|&v| in_cone.contains(v)).collect();
            let mut cone_id: HashMap<usize, GateId> = HashMap::new();
            let mut cone_gates = Vec::with_capacity(cone.len());
            let mut cone_levels = Vec::with_capacity(cone.len());
            for (ci, &v) in cone.iter().enumerate() {
                cone_id.insert(v, GateId::from_index(ci));
                cone_gates.push(Gate {
                    name: gates[v].name.clone(),
                    label: gates[v].label.clone(),
                    inputs: gates[v].inputs.iter().map(|a| cone_id[&a.index()]).collect(),
                });
                cone_levels.push(levels[v]);
            }
            let sub = Circuit::with_levels(
                cone_gates,
                cone_id[&g],
                CircuitKind::Arithmetic,
                cone_levels,
            )
            .expect("cones of leveled circuits stay leveled");
            debug_assert!(sub.size_total() < gates.len());
            let (md_sub, td_sub) = md_worker(&sub, copy_seq);
            *copy_seq += 1;
            let offset = gates.len();
            for g2 in md_sub.gates() {
                gates.push(Gate {
                    name: fresh_name(&mut names, format!("{}__c{}", g2.name, *copy_seq)),
                    label: g2.label.clone(),
                    inputs: g2.inputs.iter().map(|a| GateId::from_index(a.index() + offset)).collect(),
                });
            }
            let copy_out = md_sub.output().index() + offset;
            gates[c2].inputs[slot2] = GateId::from_index(copy_out);
            connectors.entry(value).or_default().push((copy_out, c2));
            graft_tds.entry(value).or_default().push((td_sub, offset));
        }
    }

    // Renumber into topological order (grafts point forward into consumers).
    let total = gates.len();
    let mut indegree = vec![0usize; total];
    let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); total];
    for (i, g) in gates.iter().enumerate() {
        indegree[i] = g.inputs.len();
        for a in &g.inputs {
            fwd[a.index()].push(i);
        }
    }
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..total)
        .filter(|&i| indegree[i] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut order: Vec<usize> = Vec::with_capacity(total);
    let mut pos = vec![0usize; total];
    while let Some(std::cmp::Reverse(i)) = heap.pop() {
        pos[i] = order.len();
        order.push(i);
        for &d in &fwd[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                heap.push(std::cmp::Reverse(d));
            }
        }
    }
    assert_eq!(order.len(), total, "rewired circuit stays acyclic");
    let final_gates: Vec<Gate> = order
        .iter()
        .map(|&i| Gate {
            name: gates[i].name.clone(),
            label: gates[i].label.clone(),
            inputs: gates[i].inputs.iter().map(|a| GateId::from_index(pos[a.index()])).collect(),
        })
        .collect();
    let out = Circuit::new(final_gates, GateId::from_index(pos[c.output().index()]), CircuitKind::Arithmetic)
        .expect("renumbered circuit stays well formed");

    // Decomposition: the level path, one connector per swept level, and the
    // grafted decompositions below their connectors.
    let m = level_values.len();
    let image = |orig: usize| -> u32 { pos[orig] as u32 + 1 };
    let mut bags: Vec<BTreeSet<u32>> = Vec::new();
    let mut parent: Vec<Option<usize>> = Vec::new();
    let path_nodes = m.max(2) - 1; // m levels give m-1 pair bags; m=1 gives one bag.
    for j in 0..path_nodes {
        let mut bag: BTreeSet<u32> = BTreeSet::new();
        for (i, &l) in levels.iter().enumerate() {
            if l == level_values[j] || (m > 1 && l == level_values[j + 1]) {
                bag.insert(image(i));
            }
        }
        bags.push(bag);
        parent.push(if j + 1 < path_nodes { Some(j + 1) } else { None });
    }
    for (&value, grafts) in &connectors {
        let j = level_values.iter().position(|&v| v == value).expect("swept level exists");
        let mut bag: BTreeSet<u32> = BTreeSet::new();
        for &(copy_out, dst) in grafts {
            bag.insert(image(copy_out));
            bag.insert(image(dst));
        }
        bags.push(bag);
        parent.push(Some(j));
        let connector = bags.len() - 1;
        for (td_sub, offset) in &graft_tds[&value] {
            let base = bags.len();
            for bag in td_sub.bags() {
                bags.push(bag.iter().map(|&v| image(v as usize - 1 + offset)).collect());
            }
            for t in 0..td_sub.num_nodes() {
                parent.push(match td_sub.parent(t) {
                    Some(p) => Some(base + p),
                    None => Some(connector),
                });
            }
        }
    }
    let td = TreeDecomposition::new(bags, parent).expect("connector grafting keeps the tree shape");
    (out, td)
}

// ---------------------------------------------------------------------------
// Syntactic-multilinearity normal form
// ---------------------------------------------------------------------------

/// Normalize a syntactically multilinear circuit: every variable-free cone
/// collapses to a constant leaf (evaluated exactly), dead gates are dropped,
/// and constant leaves feeding several consumers are split one copy per
/// consumer edge. The result is multiplicatively disjoint. The decomposition
/// loses the dropped vertices and gains one two-element leaf bag per split
/// copy.
pub fn sm_normalize(
    c: &Circuit,
    td: &TreeDecomposition,
) -> Result<(Circuit, TreeDecomposition), TransformError> {
    if c.kind() != CircuitKind::Arithmetic {
        return Err(TransformError::NotArithmetic);
    }
    if !c.is_syntactically_multilinear() {
        return Err(TransformError::NotSyntacticallyMultilinear);
    }
    ensure_valid(c, td)?;
    let n = c.size_total();

    // Variable-free cones and their exact values.
    let mut const_val: Vec<Option<BigInt>> = vec![None; n];
    for (i, g) in c.gates().iter().enumerate() {
        const_val[i] = match &g.label {
            Label::Const(v) => Some(v.clone()),
            Label::Input(_) | Label::ZPlaceholder(_) => None,
            Label::Add if g.inputs.len() == 1 => const_val[g.inputs[0].index()].clone(),
            Label::Add => match (
                &const_val[g.inputs[0].index()],
                &const_val[g.inputs[1].index()],
            ) {
                (Some(a), Some(b)) => Some(a + b),
                _ => None,
            },
            Label::Mul => match (
                &const_val[g.inputs[0].index()],
                &const_val[g.inputs[1].index()],
            ) {
                (Some(a), Some(b)) => Some(a * b),
                _ => None,
            },
            _ => None,
        };
    }

    // Pass 1: collapse constant cones, keep only gates reachable from the
    // output afterwards.
    let mut live = BitSet::new(n);
    let mut stack = vec![c.output().index()];
    while let Some(v) = stack.pop() {
        if live.contains(v) {
            continue;
        }
        live.insert(v);
        if const_val[v].is_none() {
            stack.extend(c.gates()[v].inputs.iter().map(|a| a.index()));
        }
    }
    let mut gates: Vec<Gate> = Vec::new();
    let mut new_id: Vec<Option<GateId>> = vec![None; n];
    for (i, g) in c.gates().iter().enumerate() {
        if !live.contains(i) {
            continue;
        }
        let gate = match &const_val[i] {
            Some(v) => Gate { name: g.name.clone(), label: Label::Const(v.clone()), inputs: vec![] },
            None => Gate {
                name: g.name.clone(),
                label: g.label.clone(),
                inputs: g.inputs.iter().map(|a| new_id[a.index()].expect("live inputs")).collect(),
            },
        };
        gates.push(gate);
        new_id[i] = Some(GateId::from_index(gates.len() - 1));
    }
    let mut bags: Vec<BTreeSet<u32>> = td
        .bags()
        .iter()
        .map(|bag| bag.iter().filter_map(|&v| new_id[v as usize - 1]).map(|id| id.0).collect())
        .collect();
    let mut parent: Vec<Option<usize>> = (0..td.num_nodes()).map(|t| td.parent(t)).collect();
    let output = new_id[c.output().index()].expect("output is live");

    // Pass 2: split multi-consumer constant leaves, one fresh leaf per extra
    // edge, inserted right before its consumer. The first edge keeps the
    // original gate.
    let mut names: HashSet<String> = gates.iter().map(|g| g.name.clone()).collect();
    let mut split: Vec<Gate> = Vec::with_capacity(gates.len());
    let mut remap: Vec<GateId> = vec![GateId(0); gates.len()];
    let mut seen_edge: Vec<bool> = vec![false; gates.len()];
    let mut copies = 0usize;
    let mut split_bags: Vec<(u32, u32)> = Vec::new(); // (copy, consumer in pass-1 ids)
    for (i, g) in gates.iter().enumerate() {
        let mut inputs = Vec::with_capacity(g.inputs.len());
        for &a in &g.inputs {
            let is_const = matches!(gates[a.index()].label, Label::Const(_));
            if is_const && seen_edge[a.index()] {
                copies += 1;
                let name = fresh_name(&mut names, format!("{}__s{copies}", gates[a.index()].name));
                split.push(Gate { name, label: gates[a.index()].label.clone(), inputs: vec![] });
                let copy = GateId::from_index(split.len() - 1);
                split_bags.push((copy.0, i as u32 + 1));
                inputs.push(copy);
            } else {
                seen_edge[a.index()] |= is_const;
                inputs.push(remap[a.index()]);
            }
        }
        split.push(Gate { name: g.name.clone(), label: g.label.clone(), inputs });
        remap[i] = GateId::from_index(split.len() - 1);
    }
    for bag in &mut bags {
        *bag = bag.iter().map(|&v| remap[v as usize - 1].0).collect();
    }
    for (copy, consumer) in split_bags {
        let consumer = remap[consumer as usize - 1].0;
        let host = bags
            .iter()
            .position(|bag| bag.contains(&consumer))
            .expect("consumer is covered");
        bags.push(BTreeSet::from([copy, consumer]));
        parent.push(Some(host));
    }

    let out = Circuit::new(split, remap[output.index()], CircuitKind::Arithmetic)
        .expect("constant splitting is well formed");
    let td = TreeDecomposition::new(bags, parent).expect("leaf bags keep the tree shape");
    debug_assert!(ensure_valid(&out, &td).is_ok());
    debug_assert!(out.is_syntactically_multilinear());
    debug_assert!(out.is_multiplicatively_disjoint());
    Ok((out, td))
}

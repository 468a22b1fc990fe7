//! Circuit intermediate representation.
//!
//! A circuit is a list of gates in topological order (1-based dense ids) with
//! a single designated output. Arithmetic circuits use {input, const, add, mul}
//! labels, boolean circuits {input, const 0/1, and, or, not}. A `ZPlaceholder`
//! leaf stands for the value of another gate and only appears in intermediate
//! objects produced while flattening.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::bits::BitSet;
use crate::field::FieldSpec;
use crate::poly::{self, Monomial, SparsePolynomial};

/// 1-based dense gate id; file order defines the numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GateId(pub u32);

impl GateId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> GateId {
        GateId(i as u32 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    /// Variable leaf. The string is the variable name.
    Input(String),
    /// Stands for the value of the named gate during traceback.
    ZPlaceholder(String),
    Const(BigInt),
    Add,
    Mul,
    And,
    Or,
    Not,
}

impl Label {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Label::Input(_) | Label::ZPlaceholder(_) | Label::Const(_))
    }

    fn op_name(&self) -> Option<&'static str> {
        match self {
            Label::Add => Some("add"),
            Label::Mul => Some("mul"),
            Label::And => Some("and"),
            Label::Or => Some("or"),
            Label::Not => Some("not"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CircuitKind {
    Arithmetic,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub name: String,
    pub label: Label,
    pub inputs: Vec<GateId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    gates: Vec<Gate>,
    output: GateId,
    kind: CircuitKind,
    levels: Option<Vec<u32>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CircuitError {
    #[error("gate {gate} references {arg} which does not precede it")]
    NotTopological { gate: String, arg: u32 },
    #[error("gate {gate} has fan-in {got}, expected {want}")]
    FanIn { gate: String, got: usize, want: &'static str },
    #[error("label of gate {0} not allowed in a {1:?} circuit")]
    KindMismatch(String, CircuitKind),
    #[error("boolean constant {0} must be 0 or 1")]
    BadBooleanConst(String),
    #[error("duplicate gate name {0}")]
    DuplicateName(String),
    #[error("output id {0} out of range")]
    BadOutput(u32),
    #[error("circuit has no gates")]
    Empty,
    #[error("level assignment violates edge {from}->{to}: levels {from_level} -> {to_level}")]
    BadLevels { from: u32, to: u32, from_level: u32, to_level: u32 },
    #[error("circuit is not leveled: gate {0} has inputs at differing depths")]
    NotLeveled(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: gate {name} feeds itself")]
    Cycle { line: usize, name: String },
    #[error("line {line}: undefined reference {name}")]
    Undefined { line: usize, name: String },
    #[error("line {line}: duplicate definition of {name}")]
    Duplicate { line: usize, name: String },
    #[error("line {line}: arithmetic and boolean gate labels may not be mixed")]
    MixedKinds { line: usize },
    #[error("line {line}: second output declaration")]
    SecondOutput { line: usize },
    #[error("no output declared")]
    MissingOutput,
    #[error("output references undefined gate {0}")]
    UndefinedOutput(String),
    #[error(transparent)]
    Invalid(#[from] CircuitError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no value for variable {0}")]
    MissingVariable(String),
    #[error("gate {0} is a placeholder; supply its value or substitute it away")]
    Placeholder(String),
    #[error("boolean evaluation expects 0/1 values, got {0} for {1}")]
    NotBoolean(BigInt, String),
}

impl Circuit {
    pub fn new(gates: Vec<Gate>, output: GateId, kind: CircuitKind) -> Result<Circuit, CircuitError> {
        let c = Circuit { gates, output, kind, levels: None };
        c.check()?;
        Ok(c)
    }

    pub fn with_levels(
        gates: Vec<Gate>,
        output: GateId,
        kind: CircuitKind,
        levels: Vec<u32>,
    ) -> Result<Circuit, CircuitError> {
        let c = Circuit { gates, output, kind, levels: Some(levels) };
        c.check()?;
        Ok(c)
    }

    fn check(&self) -> Result<(), CircuitError> {
        if self.gates.is_empty() {
            return Err(CircuitError::Empty);
        }
        if self.output.0 == 0 || self.output.index() >= self.gates.len() {
            return Err(CircuitError::BadOutput(self.output.0));
        }
        let mut names = BTreeSet::new();
        for (i, g) in self.gates.iter().enumerate() {
            if !names.insert(g.name.as_str()) {
                return Err(CircuitError::DuplicateName(g.name.clone()));
            }
            for a in &g.inputs {
                if a.0 == 0 || a.index() >= i {
                    return Err(CircuitError::NotTopological { gate: g.name.clone(), arg: a.0 });
                }
            }
            let want: &[usize] = match (&g.label, self.kind) {
                (Label::Input(_) | Label::Const(_), _) => &[0],
                (Label::ZPlaceholder(_), CircuitKind::Arithmetic) => &[0],
                (Label::Add, CircuitKind::Arithmetic) => &[1, 2],
                (Label::Mul, CircuitKind::Arithmetic) => &[2],
                (Label::And | Label::Or, CircuitKind::Boolean) => &[2],
                (Label::Not, CircuitKind::Boolean) => &[1],
                _ => return Err(CircuitError::KindMismatch(g.name.clone(), self.kind)),
            };
            if !want.contains(&g.inputs.len()) {
                let want = match (&g.label, self.kind) {
                    (Label::Add, _) => "1 or 2",
                    (Label::Not, _) => "1",
                    (Label::Input(_) | Label::Const(_) | Label::ZPlaceholder(_), _) => "0",
                    _ => "2",
                };
                return Err(CircuitError::FanIn { gate: g.name.clone(), got: g.inputs.len(), want });
            }
            if self.kind == CircuitKind::Boolean {
                if let Label::Const(v) = &g.label {
                    if !v.is_zero() && !v.is_one() {
                        return Err(CircuitError::BadBooleanConst(g.name.clone()));
                    }
                }
            }
        }
        if let Some(levels) = &self.levels {
            assert_eq!(levels.len(), self.gates.len(), "level vector length mismatch");
            for (i, g) in self.gates.iter().enumerate() {
                for a in &g.inputs {
                    if levels[a.index()] + 1 != levels[i] {
                        return Err(CircuitError::BadLevels {
                            from: a.0,
                            to: GateId::from_index(i).0,
                            from_level: levels[a.index()],
                            to_level: levels[i],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn gate(&self, id: GateId) -> &Gate {
        &self.gates[id.index()]
    }

    pub fn output(&self) -> GateId {
        self.output
    }

    pub fn kind(&self) -> CircuitKind {
        self.kind
    }

    pub fn levels(&self) -> Option<&[u32]> {
        self.levels.as_deref()
    }

    pub fn ids(&self) -> impl Iterator<Item = GateId> {
        (1..=self.gates.len() as u32).map(GateId)
    }

    /// Total number of gates, leaves included.
    pub fn size_total(&self) -> usize {
        self.gates.len()
    }

    /// Number of operation gates (non-leaf).
    pub fn size_ops(&self) -> usize {
        self.gates.iter().filter(|g| !g.label.is_leaf()).count()
    }

    /// Longest leaf-to-gate path length in edges, maximised over all gates.
    pub fn depth(&self) -> usize {
        let mut d = vec![0usize; self.gates.len()];
        let mut best = 0;
        for (i, g) in self.gates.iter().enumerate() {
            for a in &g.inputs {
                d[i] = d[i].max(d[a.index()] + 1);
            }
            best = best.max(d[i]);
        }
        best
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.gates.len()];
        for g in &self.gates {
            for a in &g.inputs {
                deg[a.index()] += 1;
            }
        }
        deg
    }

    /// True when every gate except the output has out-degree exactly one and
    /// the output has out-degree zero.
    pub fn is_formula(&self) -> bool {
        let deg = self.out_degrees();
        self.gates.iter().enumerate().all(|(i, _)| {
            if GateId::from_index(i) == self.output {
                deg[i] == 0
            } else {
                deg[i] == 1
            }
        })
    }

    /// Variable names (inputs and placeholders) in the cone of the output.
    pub fn variables(&self) -> BTreeSet<String> {
        let live = self.live_gates();
        let mut vars = BTreeSet::new();
        for (i, g) in self.gates.iter().enumerate() {
            if !live.contains(i) {
                continue;
            }
            match &g.label {
                Label::Input(v) => {
                    vars.insert(v.clone());
                }
                Label::ZPlaceholder(z) => {
                    vars.insert(poly::z_var_name(z));
                }
                _ => {}
            }
        }
        vars
    }

    /// Gates reachable backwards from the output.
    pub fn live_gates(&self) -> BitSet {
        let mut live = BitSet::new(self.gates.len());
        let mut stack = vec![self.output.index()];
        while let Some(i) = stack.pop() {
            if live.contains(i) {
                continue;
            }
            live.insert(i);
            for a in &self.gates[i].inputs {
                stack.push(a.index());
            }
        }
        live
    }

    /// For each gate, the set of gates that reach it (itself included).
    pub fn ancestor_sets(&self) -> Vec<BitSet> {
        let n = self.gates.len();
        let mut anc = Vec::with_capacity(n);
        for (i, g) in self.gates.iter().enumerate() {
            let mut s = BitSet::new(n);
            s.insert(i);
            for a in &g.inputs {
                let prev: &BitSet = &anc[a.index()];
                s.union_with(prev);
            }
            anc.push(s);
        }
        anc
    }

    pub fn evaluate(
        &self,
        assignment: &BTreeMap<String, BigInt>,
        field: &FieldSpec,
    ) -> Result<BigInt, EvalError> {
        self.eval_impl(assignment, field, false)
    }

    /// Like `evaluate` but placeholder leaves read `z_<gate>` from the assignment.
    pub fn evaluate_with_z(
        &self,
        assignment: &BTreeMap<String, BigInt>,
        field: &FieldSpec,
    ) -> Result<BigInt, EvalError> {
        self.eval_impl(assignment, field, true)
    }

    fn eval_impl(
        &self,
        assignment: &BTreeMap<String, BigInt>,
        field: &FieldSpec,
        allow_z: bool,
    ) -> Result<BigInt, EvalError> {
        let live = self.live_gates();
        let boolean = self.kind == CircuitKind::Boolean;
        let check_bool = |v: &BigInt, name: &str| -> Result<(), EvalError> {
            if boolean && !v.is_zero() && !v.is_one() {
                return Err(EvalError::NotBoolean(v.clone(), name.to_string()));
            }
            Ok(())
        };
        let mut vals: Vec<BigInt> = vec![BigInt::zero(); self.gates.len()];
        for (i, g) in self.gates.iter().enumerate() {
            if !live.contains(i) {
                continue;
            }
            let v = match &g.label {
                Label::Input(x) => {
                    let v = assignment
                        .get(x)
                        .ok_or_else(|| EvalError::MissingVariable(x.clone()))?;
                    check_bool(v, x)?;
                    v.clone()
                }
                Label::ZPlaceholder(z) => {
                    if !allow_z {
                        return Err(EvalError::Placeholder(z.clone()));
                    }
                    let name = poly::z_var_name(z);
                    assignment
                        .get(&name)
                        .ok_or(EvalError::MissingVariable(name))?
                        .clone()
                }
                Label::Const(c) => c.clone(),
                Label::Add => {
                    if g.inputs.len() == 1 {
                        vals[g.inputs[0].index()].clone()
                    } else {
                        &vals[g.inputs[0].index()] + &vals[g.inputs[1].index()]
                    }
                }
                Label::Mul => &vals[g.inputs[0].index()] * &vals[g.inputs[1].index()],
                Label::And => &vals[g.inputs[0].index()] * &vals[g.inputs[1].index()],
                Label::Or => {
                    let a = &vals[g.inputs[0].index()];
                    let b = &vals[g.inputs[1].index()];
                    if a.is_one() || b.is_one() {
                        BigInt::one()
                    } else {
                        BigInt::zero()
                    }
                }
                Label::Not => BigInt::one() - &vals[g.inputs[0].index()],
            };
            vals[i] = if boolean { v } else { field.reduce(&v) };
        }
        Ok(vals[self.output.index()].clone())
    }

    /// Syntactic degree: leaves (including constants) count 1, add takes max,
    /// mul sums. Saturating.
    pub fn formal_degree(&self) -> u128 {
        let mut d = vec![0u128; self.gates.len()];
        for (i, g) in self.gates.iter().enumerate() {
            d[i] = match &g.label {
                Label::Input(_) | Label::ZPlaceholder(_) | Label::Const(_) => 1,
                Label::Add | Label::Or => {
                    if g.inputs.len() == 1 {
                        d[g.inputs[0].index()]
                    } else {
                        d[g.inputs[0].index()].max(d[g.inputs[1].index()])
                    }
                }
                Label::Mul | Label::And => {
                    d[g.inputs[0].index()].saturating_add(d[g.inputs[1].index()])
                }
                Label::Not => d[g.inputs[0].index()],
            };
        }
        d.iter().copied().max().unwrap_or(0)
    }

    /// Length of the longest iterated multiplication chain: the largest m such
    /// that gates g_0, .., g_m exist where g_1..g_m are multiplications and
    /// both inputs of g_i are reachable from g_{i-1}.
    pub fn mult_chain_length(&self) -> usize {
        let anc = self.ancestor_sets();
        let n = self.gates.len();
        let mut len = vec![0usize; n];
        let mut best = 0;
        for (i, g) in self.gates.iter().enumerate() {
            if g.label == Label::Mul && g.inputs.len() == 2 {
                let common = anc[g.inputs[0].index()].intersection(&anc[g.inputs[1].index()]);
                let mut m = 0usize;
                let mut any = false;
                for h in common.iter_ones() {
                    any = true;
                    m = m.max(len[h]);
                }
                if any {
                    len[i] = m + 1;
                    best = best.max(len[i]);
                }
            }
        }
        best
    }

    /// Multiplicatively disjoint: no gate reaches both inputs of any
    /// multiplication gate.
    pub fn is_multiplicatively_disjoint(&self) -> bool {
        let anc = self.ancestor_sets();
        self.gates.iter().all(|g| {
            g.label != Label::Mul
                || !anc[g.inputs[0].index()].intersects(&anc[g.inputs[1].index()])
        })
    }

    /// Syntactically multilinear: the variable sets of the two argument
    /// subcircuits of every multiplication gate are disjoint. Placeholder
    /// leaves count as variables.
    pub fn is_syntactically_multilinear(&self) -> bool {
        let mut var_index: HashMap<&str, usize> = HashMap::new();
        for g in &self.gates {
            match &g.label {
                Label::Input(v) => {
                    let next = var_index.len();
                    var_index.entry(v.as_str()).or_insert(next);
                }
                Label::ZPlaceholder(z) => {
                    let next = var_index.len();
                    var_index.entry(z.as_str()).or_insert(next);
                }
                _ => {}
            }
        }
        let nv = var_index.len();
        let mut sets: Vec<BitSet> = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            let mut s = BitSet::new(nv);
            match &g.label {
                Label::Input(v) => s.insert(var_index[v.as_str()]),
                Label::ZPlaceholder(z) => s.insert(var_index[z.as_str()]),
                _ => {
                    for a in &g.inputs {
                        let prev = sets[a.index()].clone();
                        s.union_with(&prev);
                    }
                }
            }
            sets.push(s);
        }
        self.gates.iter().all(|g| {
            g.label != Label::Mul || !sets[g.inputs[0].index()].intersects(&sets[g.inputs[1].index()])
        })
    }

    /// Maximum number of gates on a level. Errors when no (valid) leveling exists.
    pub fn circuit_width(&self) -> Result<usize, CircuitError> {
        let levels = match &self.levels {
            Some(l) => l.clone(),
            None => self.infer_levels()?,
        };
        let mut count: BTreeMap<u32, usize> = BTreeMap::new();
        for l in &levels {
            *count.entry(*l).or_insert(0) += 1;
        }
        Ok(count.values().copied().max().unwrap_or(0))
    }

    /// Derive the unique leveling (level = depth) if the circuit admits one.
    pub fn infer_levels(&self) -> Result<Vec<u32>, CircuitError> {
        let mut levels = vec![0u32; self.gates.len()];
        for (i, g) in self.gates.iter().enumerate() {
            let mut l = 0;
            for a in &g.inputs {
                l = l.max(levels[a.index()] + 1);
            }
            for a in &g.inputs {
                if levels[a.index()] + 1 != l {
                    return Err(CircuitError::NotLeveled(g.name.clone()));
                }
            }
            levels[i] = l;
        }
        Ok(levels)
    }

    /// Attach an explicit leveling, validating it.
    pub fn set_levels(&mut self, levels: Vec<u32>) -> Result<(), CircuitError> {
        let old = self.levels.take();
        self.levels = Some(levels);
        if let Err(e) = self.check() {
            self.levels = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn clear_levels(&mut self) {
        self.levels = None;
    }

    /// Underlying undirected graph: vertices are gates, edges are wires.
    pub fn wire_edges(&self) -> Vec<(u32, u32)> {
        let mut edges = Vec::new();
        for (i, g) in self.gates.iter().enumerate() {
            for a in &g.inputs {
                edges.push((a.0, GateId::from_index(i).0));
            }
        }
        edges
    }

    /// Coefficient of the multilinear z-monomial given by `zset`, computed by
    /// enumerating proof trees: at an addition pick one child, at a
    /// multiplication keep both. Each tree contributes the product of its
    /// constant leaves times its input-variable monomial; trees whose z-leaf
    /// multiset is not exactly `zset` are discarded.
    ///
    /// Requires the expansion to be multilinear in the z-variables; the bound
    /// caps the number of enumerated trees.
    pub fn proof_tree_coefficient(
        &self,
        zset: &BTreeSet<String>,
        max_trees: usize,
    ) -> Result<SparsePolynomial, ProofTreeError> {
        let expansion = poly::expand(self, &FieldSpec::ExactInteger, poly::ExpandOptions::default())
            .map_err(ProofTreeError::Expand)?;
        if !expansion.is_multilinear_in(|v| v.starts_with(poly::Z_PREFIX)) {
            return Err(ProofTreeError::NotMultilinearInZ);
        }

        // One entry per proof tree of the subcircuit: constant factor,
        // x-variable exponents, z-leaf multiset.
        type Term = (BigInt, BTreeMap<String, u32>, BTreeMap<String, u32>);
        let mut memo: HashMap<usize, Vec<Term>> = HashMap::new();
        let mut order: Vec<usize> = Vec::new();
        {
            let live = self.live_gates();
            for i in 0..self.gates.len() {
                if live.contains(i) {
                    order.push(i);
                }
            }
        }
        for &i in &order {
            let g = &self.gates[i];
            let terms: Vec<Term> = match &g.label {
                Label::Input(x) => {
                    vec![(BigInt::one(), BTreeMap::from([(x.clone(), 1)]), BTreeMap::new())]
                }
                Label::ZPlaceholder(z) => vec![(
                    BigInt::one(),
                    BTreeMap::new(),
                    BTreeMap::from([(poly::z_var_name(z), 1)]),
                )],
                Label::Const(c) => vec![(c.clone(), BTreeMap::new(), BTreeMap::new())],
                Label::Add | Label::Or => {
                    let mut v = memo[&g.inputs[0].index()].clone();
                    if g.inputs.len() == 2 {
                        v.extend(memo[&g.inputs[1].index()].iter().cloned());
                    }
                    v
                }
                Label::Mul | Label::And => {
                    let l = &memo[&g.inputs[0].index()];
                    let r = &memo[&g.inputs[1].index()];
                    let mut v = Vec::with_capacity(l.len() * r.len());
                    for (cl, xl, zl) in l {
                        for (cr, xr, zr) in r {
                            let mut x = xl.clone();
                            for (k, e) in xr {
                                *x.entry(k.clone()).or_insert(0) += e;
                            }
                            let mut z = zl.clone();
                            for (k, e) in zr {
                                *z.entry(k.clone()).or_insert(0) += e;
                            }
                            v.push((cl * cr, x, z));
                        }
                    }
                    v
                }
                Label::Not => return Err(ProofTreeError::BooleanCircuit),
            };
            if terms.len() > max_trees {
                return Err(ProofTreeError::Budget(max_trees));
            }
            memo.insert(i, terms);
        }
        let want: BTreeMap<String, u32> = zset.iter().map(|z| (z.clone(), 1)).collect();
        let mut out = SparsePolynomial::zero(None);
        for (c, x, z) in &memo[&self.output.index()] {
            if *z == want {
                out.add_term(Monomial::from_map(x.clone()), c.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofTreeError {
    #[error("proof tree budget of {0} exceeded")]
    Budget(usize),
    #[error("expansion is not multilinear in the z-variables")]
    NotMultilinearInZ,
    #[error("proof trees are defined for arithmetic circuits")]
    BooleanCircuit,
    #[error("expansion failed: {0}")]
    Expand(poly::PolyError),
}

/// A circuit whose non-output gates all have out-degree exactly one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    circuit: Circuit,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("gate {0} has out-degree {1}; formulas require out-degree 1")]
pub struct NotAFormula(pub String, pub usize);

impl Formula {
    pub fn from_circuit(circuit: Circuit) -> Result<Formula, NotAFormula> {
        let deg = circuit.out_degrees();
        for (i, g) in circuit.gates().iter().enumerate() {
            let want = if GateId::from_index(i) == circuit.output() { 0 } else { 1 };
            if deg[i] != want {
                return Err(NotAFormula(g.name.clone(), deg[i]));
            }
        }
        Ok(Formula { circuit })
    }

    /// Like `from_circuit`, but first gives every extra use of a shared leaf
    /// its own copy. The serializer merges repeated variable leaves into one
    /// gate, so formulas round-tripped through text need this to restore
    /// their tree shape; sharing between operation gates is still an error.
    pub fn from_circuit_splitting_leaves(c: Circuit) -> Result<Formula, NotAFormula> {
        let mut used_names: BTreeSet<String> =
            c.gates().iter().map(|g| g.name.clone()).collect();
        let mut gates: Vec<Gate> = Vec::with_capacity(c.gates().len());
        let mut remap: Vec<GateId> = Vec::with_capacity(c.gates().len());
        let mut consumed = vec![false; c.gates().len()];
        for g in c.gates() {
            let mut inputs = Vec::with_capacity(g.inputs.len());
            for &a in &g.inputs {
                let src = &c.gates()[a.index()];
                if src.label.is_leaf() && consumed[a.index()] {
                    let mut salt = 1;
                    let mut name = format!("{}_c{salt}", src.name);
                    while !used_names.insert(name.clone()) {
                        salt += 1;
                        name = format!("{}_c{salt}", src.name);
                    }
                    gates.push(Gate { name, label: src.label.clone(), inputs: vec![] });
                    inputs.push(GateId(gates.len() as u32));
                } else {
                    consumed[a.index()] = true;
                    inputs.push(remap[a.index()]);
                }
            }
            gates.push(Gate { name: g.name.clone(), label: g.label.clone(), inputs });
            remap.push(GateId(gates.len() as u32));
        }
        let output = remap[c.output().index()];
        let kind = c.kind();
        let rebuilt = Circuit::new(gates, output, kind)
            .expect("splitting leaves preserves circuit validity");
        Formula::from_circuit(rebuilt)
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn into_circuit(self) -> Circuit {
        self.circuit
    }
}

impl std::ops::Deref for Formula {
    type Target = Circuit;

    fn deref(&self) -> &Circuit {
        &self.circuit
    }
}

/// Parse the line-based circuit format.
///
/// ```text
/// # comment
/// input x1
/// const c0 2
/// gate g1 add x1 c0
/// gate g2 mul g1 g1
/// output g2
/// ```
pub fn parse_circuit(text: &str) -> Result<Circuit, ParseError> {
    let mut gates: Vec<Gate> = Vec::new();
    let mut by_name: HashMap<String, GateId> = HashMap::new();
    let mut kind: Option<CircuitKind> = None;
    let mut output_name: Option<String> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tok = content.split_whitespace();
        let Some(head) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let syntax = |msg: &str| ParseError::Syntax { line, msg: msg.to_string() };

        match head {
            "input" => {
                let [name] = rest[..] else {
                    return Err(syntax("expected: input <name>"));
                };
                define(&mut gates, &mut by_name, line, name, Label::Input(name.to_string()), vec![])?;
            }
            "const" => {
                let [name, value] = rest[..] else {
                    return Err(syntax("expected: const <name> <integer>"));
                };
                let v: BigInt = value
                    .parse()
                    .map_err(|_| syntax(&format!("bad integer literal {value}")))?;
                define(&mut gates, &mut by_name, line, name, Label::Const(v), vec![])?;
            }
            "gate" => {
                if rest.len() < 3 || rest.len() > 4 {
                    return Err(syntax("expected: gate <name> <op> <arg> [<arg>]"));
                }
                let name = rest[0];
                let (label, gate_kind) = match rest[1] {
                    "add" => (Label::Add, CircuitKind::Arithmetic),
                    "mul" => (Label::Mul, CircuitKind::Arithmetic),
                    "and" => (Label::And, CircuitKind::Boolean),
                    "or" => (Label::Or, CircuitKind::Boolean),
                    "not" => (Label::Not, CircuitKind::Boolean),
                    other => return Err(syntax(&format!("unknown op {other}"))),
                };
                match kind {
                    None => kind = Some(gate_kind),
                    Some(k) if k != gate_kind => return Err(ParseError::MixedKinds { line }),
                    _ => {}
                }
                let mut inputs = Vec::new();
                for arg in &rest[2..] {
                    if *arg == name {
                        return Err(ParseError::Cycle { line, name: name.to_string() });
                    }
                    let id = by_name
                        .get(*arg)
                        .copied()
                        .ok_or_else(|| ParseError::Undefined { line, name: arg.to_string() })?;
                    inputs.push(id);
                }
                define(&mut gates, &mut by_name, line, name, label, inputs)?;
            }
            "output" => {
                let [name] = rest[..] else {
                    return Err(syntax("expected: output <name>"));
                };
                if output_name.is_some() {
                    return Err(ParseError::SecondOutput { line });
                }
                output_name = Some(name.to_string());
            }
            other => return Err(syntax(&format!("unknown directive {other}"))),
        }
    }

    let output_name = output_name.ok_or(ParseError::MissingOutput)?;
    let output = by_name
        .get(&output_name)
        .copied()
        .ok_or(ParseError::UndefinedOutput(output_name))?;
    let kind = kind.unwrap_or(CircuitKind::Arithmetic);
    Ok(Circuit::new(gates, output, kind)?)
}

fn define(
    gates: &mut Vec<Gate>,
    by_name: &mut HashMap<String, GateId>,
    line: usize,
    name: &str,
    label: Label,
    inputs: Vec<GateId>,
) -> Result<(), ParseError> {
    if by_name.contains_key(name) {
        return Err(ParseError::Duplicate { line, name: name.to_string() });
    }
    gates.push(Gate { name: name.to_string(), label, inputs });
    by_name.insert(name.to_string(), GateId(gates.len() as u32));
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SerializeError {
    #[error("placeholder leaf {0} cannot be serialized")]
    Placeholder(String),
}

/// Render a circuit in the line-based format.
///
/// The format identifies input gates with their variable, so several leaves
/// reading the same variable collapse to one `input` line and every consumer
/// is rewired to it. The result parses back to a circuit with the same
/// polynomial (not necessarily the same gate list).
pub fn serialize_circuit(c: &Circuit) -> Result<String, SerializeError> {
    // Map each gate to its serialized name; duplicate input leaves alias the
    // first occurrence of their variable.
    let mut var_first: BTreeMap<&str, usize> = BTreeMap::new();
    let mut alias: Vec<usize> = (0..c.gates().len()).collect();
    for (i, g) in c.gates().iter().enumerate() {
        if let Label::Input(v) = &g.label {
            match var_first.get(v.as_str()) {
                Some(&j) => alias[i] = j,
                None => {
                    var_first.insert(v, i);
                }
            }
        }
    }
    let mut names: Vec<String> = Vec::with_capacity(c.gates().len());
    let mut used: BTreeSet<String> = BTreeSet::new();
    for (i, g) in c.gates().iter().enumerate() {
        if alias[i] != i {
            names.push(String::new());
            continue;
        }
        let base = match &g.label {
            Label::Input(v) => v.clone(),
            _ => g.name.clone(),
        };
        let mut name = base.clone();
        let mut salt = 1;
        while !used.insert(name.clone()) {
            name = format!("{base}_{salt}");
            salt += 1;
        }
        names.push(name);
    }
    let mut out = String::new();
    for (i, g) in c.gates().iter().enumerate() {
        if alias[i] != i {
            continue;
        }
        match &g.label {
            Label::Input(_) => writeln!(out, "input {}", names[i]).unwrap(),
            Label::Const(v) => writeln!(out, "const {} {}", names[i], v).unwrap(),
            Label::ZPlaceholder(z) => return Err(SerializeError::Placeholder(z.clone())),
            op => {
                let opname = op.op_name().expect("operation gate");
                let args: Vec<&str> = g
                    .inputs
                    .iter()
                    .map(|a| names[alias[a.index()]].as_str())
                    .collect();
                writeln!(out, "gate {} {} {}", names[i], opname, args.join(" ")).unwrap();
            }
        }
    }
    writeln!(out, "output {}", names[alias[c.output().index()]]).unwrap();
    Ok(out)
}

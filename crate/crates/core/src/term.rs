//! Formula terms: immutable trees with shared subterms.
//!
//! The flattening recursion builds formulas bottom-up and reuses subterms
//! freely; sharing keeps memory linear while `size` accounts tree nodes, the
//! way formula size is counted everywhere in this crate. Materializing turns
//! a term into a `Formula` circuit by duplicating shared subtrees.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use num_bigint::BigInt;
use num_traits::{One, Zero};

use crate::circuit::{Circuit, CircuitKind, Formula, Gate, GateId, Label};
use crate::field::FieldSpec;

#[derive(Debug)]
pub enum TermNode {
    Var(String),
    /// Placeholder for the named gate's value.
    Z(String),
    Const(BigInt),
    Add(Term, Term),
    Mul(Term, Term),
}

#[derive(Debug)]
pub struct TermInner {
    node: TermNode,
    size: u64,
    depth: u32,
}

/// Reference-counted formula tree node.
#[derive(Debug, Clone)]
pub struct Term(Rc<TermInner>);

impl Term {
    fn leaf(node: TermNode) -> Term {
        Term(Rc::new(TermInner { node, size: 1, depth: 0 }))
    }

    fn branch(node: TermNode, a: &Term, b: &Term) -> Term {
        Term(Rc::new(TermInner {
            node,
            size: 1u64.saturating_add(a.size()).saturating_add(b.size()),
            depth: a.depth().max(b.depth()) + 1,
        }))
    }

    pub fn node(&self) -> &TermNode {
        &self.0.node
    }

    /// Tree size in nodes: shared subterms count once per occurrence.
    pub fn size(&self) -> u64 {
        self.0.size
    }

    /// Tree depth in edges.
    pub fn depth(&self) -> u32 {
        self.0.depth
    }

    pub fn as_const(&self) -> Option<&BigInt> {
        match &self.0.node {
            TermNode::Const(v) => Some(v),
            _ => None,
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

// Deep chains would overflow the stack under the default recursive drop;
// unwrap uniquely-owned children iteratively instead.
impl Drop for TermInner {
    fn drop(&mut self) {
        let mut stack = take_children(&mut self.node);
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Rc::try_unwrap(t.0) {
                stack.extend(take_children(&mut inner.node));
            }
        }
    }
}

fn take_children(node: &mut TermNode) -> Vec<Term> {
    match node {
        TermNode::Add(..) | TermNode::Mul(..) => {
            match std::mem::replace(node, TermNode::Const(BigInt::zero())) {
                TermNode::Add(a, b) | TermNode::Mul(a, b) => vec![a, b],
                _ => unreachable!(),
            }
        }
        _ => Vec::new(),
    }
}

/// Term builder bound to a field; constructors fold constants so selector
/// sums collapse instead of accumulating dead structure.
#[derive(Debug, Clone, Copy)]
pub struct TermCtx {
    pub field: FieldSpec,
}

impl TermCtx {
    pub fn new(field: FieldSpec) -> TermCtx {
        TermCtx { field }
    }

    pub fn constant(&self, v: BigInt) -> Term {
        Term::leaf(TermNode::Const(self.field.reduce(&v)))
    }

    pub fn var(&self, name: &str) -> Term {
        Term::leaf(TermNode::Var(name.to_string()))
    }

    pub fn z(&self, gate: &str) -> Term {
        Term::leaf(TermNode::Z(gate.to_string()))
    }

    pub fn add(&self, a: Term, b: Term) -> Term {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => self.constant(x + y),
            (Some(x), None) if x.is_zero() => b,
            (None, Some(y)) if y.is_zero() => a,
            _ => Term::branch(TermNode::Add(a.clone(), b.clone()), &a, &b),
        }
    }

    pub fn mul(&self, a: Term, b: Term) -> Term {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => self.constant(x * y),
            (Some(x), None) => {
                if x.is_zero() {
                    a
                } else if x.is_one() {
                    b
                } else {
                    Term::branch(TermNode::Mul(a.clone(), b.clone()), &a, &b)
                }
            }
            (None, Some(y)) => {
                if y.is_zero() {
                    b
                } else if y.is_one() {
                    a
                } else {
                    Term::branch(TermNode::Mul(a.clone(), b.clone()), &a, &b)
                }
            }
            _ => Term::branch(TermNode::Mul(a.clone(), b.clone()), &a, &b),
        }
    }

    /// 1 − t, written with field constants.
    pub fn one_minus(&self, t: Term) -> Term {
        let minus_one = self.constant(BigInt::from(-1));
        self.add(self.constant(BigInt::one()), self.mul(minus_one, t))
    }

    /// t − c.
    pub fn minus_const(&self, t: Term, c: &BigInt) -> Term {
        self.add(t, self.constant(-c))
    }

    /// t^e as a left-deep product chain; e ≥ 1.
    pub fn pow(&self, t: Term, e: u32) -> Term {
        assert!(e >= 1);
        let mut acc = t.clone();
        for _ in 1..e {
            acc = self.mul(acc, t.clone());
        }
        acc
    }
}

/// Unique nodes of the shared DAG, children before parents.
fn postorder_unique(t: &Term) -> Vec<Term> {
    let mut seen: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::new();
    let mut stack: Vec<(Term, bool)> = vec![(t.clone(), false)];
    while let Some((u, emit)) = stack.pop() {
        if emit {
            out.push(u);
            continue;
        }
        if !seen.insert(u.key()) {
            continue;
        }
        match u.node() {
            TermNode::Add(a, b) | TermNode::Mul(a, b) => {
                let (a, b) = (a.clone(), b.clone());
                stack.push((u, true));
                stack.push((b, false));
                stack.push((a, false));
            }
            _ => out.push(u),
        }
    }
    out
}

/// Distinct z-variable (gate) names occurring in the term.
pub fn z_vars(t: &Term) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for u in postorder_unique(t) {
        if let TermNode::Z(g) = u.node() {
            out.insert(g.clone());
        }
    }
    out
}

/// Distinct input variable names occurring in the term.
pub fn x_vars(t: &Term) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for u in postorder_unique(t) {
        if let TermNode::Var(x) = u.node() {
            out.insert(x.clone());
        }
    }
    out
}

/// Tree-multiplicity occurrence counts of each z-variable (saturating).
pub fn z_occurrences(t: &Term) -> BTreeMap<String, u64> {
    let mut memo: HashMap<usize, BTreeMap<String, u64>> = HashMap::new();
    for u in postorder_unique(t) {
        let counts = match u.node() {
            TermNode::Z(g) => BTreeMap::from([(g.clone(), 1u64)]),
            TermNode::Add(a, b) | TermNode::Mul(a, b) => {
                let mut m = memo[&a.key()].clone();
                for (k, v) in &memo[&b.key()] {
                    let slot = m.entry(k.clone()).or_insert(0);
                    *slot = slot.saturating_add(*v);
                }
                m
            }
            _ => BTreeMap::new(),
        };
        memo.insert(u.key(), counts);
    }
    memo.remove(&t.key()).unwrap_or_default()
}

/// Replace z-leaves by terms; leaves absent from the map stay.
pub fn substitute_z(ctx: &TermCtx, t: &Term, map: &BTreeMap<String, Term>) -> Term {
    let mut memo: HashMap<usize, Term> = HashMap::new();
    for u in postorder_unique(t) {
        let replaced = match u.node() {
            TermNode::Z(g) => match map.get(g) {
                Some(r) => r.clone(),
                None => u.clone(),
            },
            TermNode::Add(a, b) => ctx.add(memo[&a.key()].clone(), memo[&b.key()].clone()),
            TermNode::Mul(a, b) => ctx.mul(memo[&a.key()].clone(), memo[&b.key()].clone()),
            _ => u.clone(),
        };
        memo.insert(u.key(), replaced);
    }
    memo.remove(&t.key()).unwrap()
}

/// Replace input-variable leaves by terms; leaves absent from the map stay.
pub fn substitute_vars(ctx: &TermCtx, t: &Term, map: &BTreeMap<String, Term>) -> Term {
    let mut memo: HashMap<usize, Term> = HashMap::new();
    for u in postorder_unique(t) {
        let replaced = match u.node() {
            TermNode::Var(x) => match map.get(x) {
                Some(r) => r.clone(),
                None => u.clone(),
            },
            TermNode::Add(a, b) => ctx.add(memo[&a.key()].clone(), memo[&b.key()].clone()),
            TermNode::Mul(a, b) => ctx.mul(memo[&a.key()].clone(), memo[&b.key()].clone()),
            _ => u.clone(),
        };
        memo.insert(u.key(), replaced);
    }
    memo.remove(&t.key()).unwrap()
}

/// Set z-variables to constants and fold.
pub fn assign_z(ctx: &TermCtx, t: &Term, assignment: &BTreeMap<String, BigInt>) -> Term {
    let map: BTreeMap<String, Term> =
        assignment.iter().map(|(g, v)| (g.clone(), ctx.constant(v.clone()))).collect();
    substitute_z(ctx, t, &map)
}

/// Unfold a circuit into a term; the underlying DAG stays shared, so memory
/// is linear even though the tree size may be exponential.
pub fn term_of_circuit(ctx: &TermCtx, c: &Circuit) -> Term {
    let mut memo: Vec<Option<Term>> = vec![None; c.size_total()];
    let live = c.live_gates();
    for (i, g) in c.gates().iter().enumerate() {
        if !live.contains(i) {
            continue;
        }
        let t = match &g.label {
            Label::Input(x) => ctx.var(x),
            Label::ZPlaceholder(z) => ctx.z(z),
            Label::Const(v) => ctx.constant(v.clone()),
            Label::Add => {
                let a = memo[g.inputs[0].index()].clone().unwrap();
                if g.inputs.len() == 1 {
                    a
                } else {
                    let b = memo[g.inputs[1].index()].clone().unwrap();
                    Term::branch(TermNode::Add(a.clone(), b.clone()), &a, &b)
                }
            }
            Label::Mul | Label::And => {
                let a = memo[g.inputs[0].index()].clone().unwrap();
                let b = memo[g.inputs[1].index()].clone().unwrap();
                Term::branch(TermNode::Mul(a.clone(), b.clone()), &a, &b)
            }
            Label::Or | Label::Not => {
                panic!("term_of_circuit expects an arithmetic circuit")
            }
        };
        memo[i] = Some(t);
    }
    memo[c.output().index()].take().unwrap()
}

/// Expand a term into a formula circuit, duplicating shared subtrees. The
/// gate count equals `t.size()`.
pub fn materialize(t: &Term, kind: CircuitKind) -> Formula {
    let mut gates: Vec<Gate> = Vec::new();
    let mut used_names: BTreeSet<String> = BTreeSet::new();
    let fresh = |base: String, used: &mut BTreeSet<String>| -> String {
        let mut name = base.clone();
        let mut salt = 1;
        while !used.insert(name.clone()) {
            name = format!("{base}__c{salt}");
            salt += 1;
        }
        name
    };
    // Post-order with an explicit stack; every visit creates a fresh gate.
    enum Item {
        Visit(Term),
        Emit(Term),
    }
    let mut stack = vec![Item::Visit(t.clone())];
    let mut results: Vec<GateId> = Vec::new();
    while let Some(item) = stack.pop() {
        match item {
            Item::Visit(u) => match u.node() {
                TermNode::Add(a, b) | TermNode::Mul(a, b) => {
                    let (a, b) = (a.clone(), b.clone());
                    stack.push(Item::Emit(u));
                    stack.push(Item::Visit(b));
                    stack.push(Item::Visit(a));
                }
                _ => stack.push(Item::Emit(u)),
            },
            Item::Emit(u) => {
                let gate = match u.node() {
                    TermNode::Var(x) => Gate {
                        name: fresh(x.clone(), &mut used_names),
                        label: Label::Input(x.clone()),
                        inputs: vec![],
                    },
                    TermNode::Z(g) => Gate {
                        name: fresh(format!("zp_{g}"), &mut used_names),
                        label: Label::ZPlaceholder(g.clone()),
                        inputs: vec![],
                    },
                    TermNode::Const(v) => Gate {
                        name: fresh(format!("k{}", gates.len() + 1), &mut used_names),
                        label: Label::Const(v.clone()),
                        inputs: vec![],
                    },
                    TermNode::Add(..) | TermNode::Mul(..) => {
                        let b = results.pop().expect("right operand");
                        let a = results.pop().expect("left operand");
                        let label = match (u.node(), kind) {
                            (TermNode::Add(..), CircuitKind::Arithmetic) => Label::Add,
                            (TermNode::Mul(..), CircuitKind::Arithmetic) => Label::Mul,
                            (TermNode::Mul(..), CircuitKind::Boolean) => Label::And,
                            (TermNode::Add(..), CircuitKind::Boolean) => {
                                panic!("boolean terms have no addition")
                            }
                            _ => unreachable!(),
                        };
                        Gate {
                            name: fresh(format!("t{}", gates.len() + 1), &mut used_names),
                            label,
                            inputs: vec![a, b],
                        }
                    }
                };
                gates.push(gate);
                results.push(GateId(gates.len() as u32));
            }
        }
    }
    let output = results.pop().expect("root result");
    let c = Circuit::new(gates, output, kind).expect("materialized term is well-formed");
    Formula::from_circuit(c).expect("tree has out-degree one")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{self, ExpandOptions};
    use std::collections::BTreeMap;

    fn ctx() -> TermCtx {
        TermCtx::new(FieldSpec::ExactInteger)
    }

    #[test]
    fn folding() {
        let c = ctx();
        let zero = c.constant(BigInt::zero());
        let x = c.var("x");
        assert_eq!(c.add(zero.clone(), x.clone()).size(), 1);
        assert!(c.mul(zero.clone(), x.clone()).as_const().unwrap().is_zero());
        assert_eq!(c.mul(c.constant(BigInt::one()), x.clone()).size(), 1);
        let s = c.add(c.constant(BigInt::from(2)), c.constant(BigInt::from(3)));
        assert_eq!(s.as_const().unwrap(), &BigInt::from(5));
    }

    #[test]
    fn gf2_folds_mod_2() {
        let c = TermCtx::new(FieldSpec::Gf2);
        let s = c.add(c.constant(BigInt::one()), c.constant(BigInt::one()));
        assert!(s.as_const().unwrap().is_zero());
    }

    #[test]
    fn size_counts_tree_nodes() {
        let c = ctx();
        let x = c.var("x");
        let sq = c.mul(x.clone(), x.clone());
        let quad = c.mul(sq.clone(), sq.clone());
        // Shared but counted per occurrence: 2*(2*1+1)+1 = 7.
        assert_eq!(quad.size(), 7);
        assert_eq!(quad.depth(), 2);
    }

    #[test]
    fn occurrences_and_vars() {
        let c = ctx();
        let z = c.z("g3");
        let t = c.mul(c.add(z.clone(), c.var("x")), c.add(z.clone(), c.z("g4")));
        assert_eq!(z_vars(&t), ["g3", "g4"].iter().map(|s| s.to_string()).collect());
        assert_eq!(x_vars(&t), ["x"].iter().map(|s| s.to_string()).collect());
        let occ = z_occurrences(&t);
        assert_eq!(occ["g3"], 2);
        assert_eq!(occ["g4"], 1);
    }

    #[test]
    fn substitution_folds() {
        let c = ctx();
        let t = c.mul(c.z("g"), c.add(c.var("x"), c.z("h")));
        let assigned = assign_z(
            &c,
            &t,
            &BTreeMap::from([("g".to_string(), BigInt::zero()), ("h".to_string(), BigInt::zero())]),
        );
        assert!(assigned.as_const().unwrap().is_zero());
        let sub = substitute_z(&c, &t, &BTreeMap::from([("g".to_string(), c.var("y"))]));
        assert_eq!(z_vars(&sub), ["h"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn materialize_expands_sharing() {
        let c = ctx();
        let x = c.var("x");
        let sq = c.mul(x.clone(), x.clone());
        let quad = c.mul(sq.clone(), sq.clone());
        let f = materialize(&quad, CircuitKind::Arithmetic);
        assert_eq!(f.size_total() as u64, quad.size());
        assert!(f.is_formula());
        let p = poly::expand(f.circuit(), &FieldSpec::ExactInteger, ExpandOptions::default()).unwrap();
        assert_eq!(p.to_string(), "x^4");
    }

    #[test]
    fn materialize_keeps_placeholders() {
        let c = ctx();
        let t = c.add(c.z("g7"), c.var("x"));
        let f = materialize(&t, CircuitKind::Arithmetic);
        let p = poly::expand(f.circuit(), &FieldSpec::ExactInteger, ExpandOptions::default()).unwrap();
        assert_eq!(p.to_string(), "x + z_g7");
    }

    #[test]
    fn round_trip_circuit_term() {
        let text = "input x\ninput y\ngate s add x y\ngate q mul s s\noutput q";
        let circ = crate::circuit::parse_circuit(text).unwrap();
        let t = term_of_circuit(&ctx(), &circ);
        assert_eq!(t.size(), 7);
        let f = materialize(&t, CircuitKind::Arithmetic);
        assert!(poly::equiv_exact(&circ, f.circuit(), &FieldSpec::ExactInteger, ExpandOptions::default())
            .unwrap());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let c = ctx();
        let mut t = c.var("x");
        for _ in 0..200_000 {
            t = c.add(t, c.var("x"));
        }
        assert_eq!(t.depth(), 200_000);
        drop(t);
    }

    #[test]
    fn pow_chain() {
        let c = ctx();
        let z = c.z("g");
        let p = c.pow(z, 4);
        assert_eq!(z_occurrences(&p)["g"], 4);
        let two = c.constant(BigInt::from(2));
        assert_eq!(c.pow(two, 5).as_const().unwrap(), &BigInt::from(32));
    }
}

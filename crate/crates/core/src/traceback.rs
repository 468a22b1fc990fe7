//! Flattening bounded-treewidth circuits into formulas.
//!
//! The engine walks a rooted tree decomposition bottom-up and computes, for a
//! tree node `t` and a gate `f` in its bag, a formula equivalent to the
//! subcircuit visible below `t` with out-of-scope gates replaced by
//! z-placeholders. Three modes share the recursion: exact flattening of
//! multiplicatively disjoint circuits, a syntactic-multilinearity-preserving
//! variant, and pointwise flattening over a prime field for arbitrary
//! circuits. The module also exposes the building blocks — brute-force bag
//! formulas, z-variable reduction, the z-standard form with its signed
//! inclusion–exclusion coefficients, multilinearity-aware substitution — and
//! Brent's depth-balancing construction for formulas.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_bigint::BigInt;
use num_traits::{One, Zero};
use thiserror::Error;

use crate::bits::BitSet;
use crate::circuit::{Circuit, CircuitKind, Formula, Gate, GateId, Label};
use crate::field::{FieldError, FieldSpec};
use crate::poly::{self, ExpandOptions};
use crate::td::Graph;
use crate::term::{
    self, assign_z, substitute_vars, substitute_z, term_of_circuit, x_vars, z_occurrences, z_vars,
    Term, TermCtx,
};
use crate::transforms::{check_preprocessed, PreprocessedPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracebackMode {
    /// Exact polynomial identity; requires multiplicative disjointness.
    MdExact,
    /// Exact identity with syntactic multilinearity preserved end to end.
    SynMultilinear,
    /// Pointwise agreement over GF(q) for arbitrary arithmetic circuits.
    FiniteField(u64),
}

#[derive(Debug, Clone)]
pub struct TracebackConfig {
    pub mode: TracebackMode,
    /// Hard cap on intermediate and final formula sizes (tree nodes).
    pub max_formula_size: u64,
    /// Cache results per (tree node, gate); sound because results are
    /// context-free, and a large saving when bags recur along a path.
    pub memoize: bool,
}

impl TracebackConfig {
    pub fn new(mode: TracebackMode) -> TracebackConfig {
        TracebackConfig { mode, max_formula_size: 2_000_000, memoize: true }
    }
}

#[derive(Debug, Error)]
pub enum TracebackError {
    #[error("traceback operates on arithmetic circuits")]
    NotArithmetic,
    #[error("input circuit already contains placeholder gate {0}")]
    PlaceholderInput(String),
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("pair fails the preprocessing property: {0}")]
    NotPreprocessed(String),
    #[error("mode requires a multiplicatively disjoint circuit")]
    NotMultiplicativelyDisjoint,
    #[error("mode requires a syntactically multilinear circuit: {0}")]
    NotSyntacticallyMultilinear(String),
    #[error("formula is not multilinear in z-variable {0}")]
    NotMultilinearInZ(String),
    #[error("finite-field mode: {0}")]
    BadField(FieldError),
    #[error("formula size {size} exceeds the budget of {limit}")]
    FormulaTooLarge { size: u64, limit: u64 },
    #[error("{found} z-variables exceed the supported maximum of {cap}")]
    TooManyZVars { found: usize, cap: usize },
    #[error("bag circuit of {gates} gates is too large to unfold")]
    BagTooLarge { gates: usize },
}

#[derive(Debug, Default, Clone)]
pub struct TracebackStats {
    pub calls: u64,
    pub memo_hits: u64,
    pub z_reductions: u64,
    /// Largest intermediate formula, in tree nodes.
    pub max_term_size: u64,
    /// Width of the decomposition the run used.
    pub width: usize,
}

impl TracebackMode {
    fn field(&self) -> Result<FieldSpec, TracebackError> {
        match self {
            TracebackMode::MdExact | TracebackMode::SynMultilinear => Ok(FieldSpec::ExactInteger),
            TracebackMode::FiniteField(2) => Ok(FieldSpec::Gf2),
            TracebackMode::FiniteField(q) => FieldSpec::gfp(*q).map_err(TracebackError::BadField),
        }
    }

    /// Base of the per-variable occurrence cap: 2 in the exact modes (the
    /// boolean selector sum), q over GF(q).
    fn cap_base(&self) -> u64 {
        match self {
            TracebackMode::FiniteField(q) => *q,
            _ => 2,
        }
    }
}

fn occurrence_cap(base: u64, k: usize) -> u64 {
    let e = (k + 1).min(u32::MAX as usize) as u32;
    base.saturating_pow(e)
}

/// Pairwise fold into a balanced sum; the shape matters downstream, where
/// boolean re-coding of additions duplicates operands per level.
fn balanced_sum(ctx: &TermCtx, mut items: Vec<Term>) -> Term {
    if items.is_empty() {
        return ctx.constant(BigInt::zero());
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len() / 2 + 1);
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(ctx.add(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop().expect("nonempty")
}

fn balanced_product(ctx: &TermCtx, mut items: Vec<Term>) -> Term {
    if items.is_empty() {
        return ctx.constant(BigInt::one());
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len() / 2 + 1);
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(ctx.mul(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop().expect("nonempty")
}

/// Set the named input variables to zero.
fn zero_x_vars(ctx: &TermCtx, t: &Term, names: &BTreeSet<String>) -> Term {
    if names.is_empty() {
        return t.clone();
    }
    let map: BTreeMap<String, Term> =
        names.iter().map(|x| (x.clone(), ctx.constant(BigInt::zero()))).collect();
    substitute_vars(ctx, t, &map)
}

// ---------------------------------------------------------------------------
// z-variable reduction
// ---------------------------------------------------------------------------

/// Replication factor the rewrite applies to untouched variables: the
/// selector sum copies the body once per assignment; interpolation
/// additionally references each innermost evaluation up to `base` times.
fn copy_factor(base: u64, set_len: usize) -> u64 {
    let bump = u32::from(base > 2);
    base.saturating_pow((set_len.min(u32::MAX as usize) as u32).saturating_add(bump))
}

/// Pick the set of z-variables to re-expand so that, afterwards, every
/// variable respects `cap`: reduced variables land under the cap by
/// construction, while each untouched occurrence is replicated once per
/// rebuilt copy of the body.
fn reduction_set(occ: &BTreeMap<String, u64>, cap: u64, base: u64) -> BTreeSet<String> {
    let mut set: BTreeSet<String> =
        occ.iter().filter(|(_, &n)| n > cap).map(|(v, _)| v.clone()).collect();
    loop {
        let factor = copy_factor(base, set.len());
        let offender = occ
            .iter()
            .filter(|(v, _)| !set.contains(*v))
            .filter(|(_, &n)| n.saturating_mul(factor) > cap)
            .max_by_key(|(_, &n)| n)
            .map(|(v, _)| v.clone());
        match offender {
            Some(v) => {
                set.insert(v);
            }
            None => return set,
        }
    }
}

/// Sum over all 0/1 assignments of `vars`, each summand gated by the product
/// of selectors z or (1−z). Exact for terms multilinear in `vars` and
/// pointwise-correct over GF(2) for arbitrary terms.
fn selector_reduce(ctx: &TermCtx, t: &Term, vars: &[String]) -> Term {
    let m = vars.len();
    let mut summands = Vec::with_capacity(1 << m);
    for bits in 0u64..(1 << m) {
        let mut assignment = BTreeMap::new();
        let mut selectors = Vec::with_capacity(m);
        for (i, v) in vars.iter().enumerate() {
            let one = bits >> i & 1 == 1;
            assignment.insert(v.clone(), if one { BigInt::one() } else { BigInt::zero() });
            selectors.push(if one { ctx.z(v) } else { ctx.one_minus(ctx.z(v)) });
        }
        let point = assign_z(ctx, t, &assignment);
        summands.push(ctx.mul(balanced_product(ctx, selectors), point));
    }
    balanced_sum(ctx, summands)
}

fn mod_pow(mut b: u64, mut e: u64, p: u64) -> u64 {
    let mut acc = 1u64 % p;
    b %= p;
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * b % p;
        }
        b = b * b % p;
        e >>= 1;
    }
    acc
}

/// Inverse of the q×q Vandermonde matrix on points 0..q-1 over GF(p), p = q
/// prime. Row j of the result gives the weights turning point evaluations
/// into the coefficient of z^j.
fn vandermonde_inverse(p: u64) -> Vec<Vec<u64>> {
    let q = p as usize;
    // Augmented [V | I], eliminated in place.
    let mut m: Vec<Vec<u64>> = (0..q)
        .map(|a| {
            let mut row: Vec<u64> = (0..q).map(|j| mod_pow(a as u64, j as u64, p)).collect();
            row.extend((0..q).map(|j| u64::from(j == a)));
            row
        })
        .collect();
    for col in 0..q {
        let pivot = (col..q).find(|&r| m[r][col] != 0).expect("Vandermonde is invertible");
        m.swap(col, pivot);
        let inv = mod_pow(m[col][col], p - 2, p);
        for x in m[col].iter_mut() {
            *x = *x * inv % p;
        }
        for r in 0..q {
            if r != col && m[r][col] != 0 {
                let factor = m[r][col];
                for j in 0..2 * q {
                    let sub = factor * m[col][j] % p;
                    m[r][j] = (m[r][j] + p - sub) % p;
                }
            }
        }
    }
    // Coefficient j of the interpolant is Σ_a (V^{-1})[j][a] · f(a).
    (0..q).map(|j| (0..q).map(|a| m[j][q + a]).collect()).collect()
}

/// Scaled Lagrange basis polynomial through point `a`, with the variable
/// occurring q−1 times: inv(Π_{b≠a}(a−b)) · Π_{b≠a}(z − b).
fn lagrange_basis(ctx: &TermCtx, var: &str, a: u64, q: u64) -> Term {
    let mut denom = 1u64;
    for b in (0..q).filter(|&b| b != a) {
        denom = denom * ((a + q - b) % q) % q;
    }
    let scale = mod_pow(denom, q - 2, q);
    let z = ctx.z(var);
    let mut factors = vec![ctx.constant(BigInt::from(scale))];
    factors.extend((0..q).filter(|&b| b != a).map(|b| ctx.minus_const(z.clone(), &BigInt::from(b))));
    balanced_product(ctx, factors)
}

/// Eliminate `vars` over GF(q), preserving values pointwise. Outer variables
/// are rebuilt from their q point evaluations in Lagrange form, which
/// references each evaluation once and so never replicates the deeper
/// variables' occurrences; the innermost variable uses a Horner chain whose
/// interpolated coefficients reference only fully-assigned (z̄-free in `vars`)
/// copies of the body. Variable i of m then occurs q^i(q−1) ≤ q^{m−1}(q−1)
/// times, under the q^{k+1} cap whenever m ≤ k+1.
fn interpolate_reduce(ctx: &TermCtx, t: &Term, vars: &[String], q: u64, w: &[Vec<u64>]) -> Term {
    match vars {
        [] => t.clone(),
        [last] => {
            let evals: Vec<Term> = (0..q)
                .map(|a| assign_z(ctx, t, &BTreeMap::from([(last.clone(), BigInt::from(a))])))
                .collect();
            let coeffs: Vec<Term> = (0..q as usize)
                .map(|j| {
                    let parts: Vec<Term> = (0..q as usize)
                        .filter(|&a| w[j][a] != 0)
                        .map(|a| ctx.mul(ctx.constant(BigInt::from(w[j][a])), evals[a].clone()))
                        .collect();
                    balanced_sum(ctx, parts)
                })
                .collect();
            let z = ctx.z(last);
            let mut acc = coeffs[q as usize - 1].clone();
            for j in (0..q as usize - 1).rev() {
                acc = ctx.add(coeffs[j].clone(), ctx.mul(z.clone(), acc));
            }
            acc
        }
        [head, rest @ ..] => {
            let branches: Vec<Term> = (0..q)
                .map(|a| {
                    let assigned =
                        assign_z(ctx, t, &BTreeMap::from([(head.clone(), BigInt::from(a))]));
                    let reduced = interpolate_reduce(ctx, &assigned, rest, q, w);
                    ctx.mul(lagrange_basis(ctx, head, a, q), reduced)
                })
                .collect();
            balanced_sum(ctx, branches)
        }
    }
}

fn reduce_selected(
    ctx: &TermCtx,
    t: &Term,
    set: &BTreeSet<String>,
    base: u64,
    limit: u64,
) -> Result<Term, TracebackError> {
    if set.is_empty() {
        return Ok(t.clone());
    }
    let vars: Vec<String> = set.iter().cloned().collect();
    let estimate = copy_factor(base, vars.len()).saturating_mul(t.size());
    if estimate > limit {
        return Err(TracebackError::FormulaTooLarge { size: estimate, limit });
    }
    let out = if base == 2 {
        selector_reduce(ctx, t, &vars)
    } else {
        let w = vandermonde_inverse(base);
        interpolate_reduce(ctx, t, &vars, base, &w)
    };
    if out.size() > limit {
        return Err(TracebackError::FormulaTooLarge { size: out.size(), limit });
    }
    Ok(out)
}

/// Rewrite `f` so that every z-variable occurs at most 2^{k+1} times (exact
/// integers, GF(2)) or q^{k+1} times (GF(q)). Exact modes require `f` to be
/// multilinear in its z-variables and rebuild it as the selector sum over all
/// 0/1 assignments; over GF(q) the result agrees pointwise and is rebuilt by
/// interpolation into per-variable Horner chains. The multilinearity
/// precondition is verified by expansion while the polynomial stays within a
/// desk-scale budget, and trusted beyond it.
pub fn z_reduce(f: &Formula, k: usize, field: &FieldSpec) -> Result<Formula, TracebackError> {
    if f.circuit().kind() != CircuitKind::Arithmetic {
        return Err(TracebackError::NotArithmetic);
    }
    let ctx = TermCtx::new(*field);
    let t = term_of_circuit(&ctx, f.circuit());
    let zv: Vec<String> = z_vars(&t).into_iter().collect();
    if zv.len() > k + 1 {
        return Err(TracebackError::TooManyZVars { found: zv.len(), cap: k + 1 });
    }
    if *field == FieldSpec::ExactInteger {
        check_z_multilinear(f.circuit(), field)?;
    }
    if zv.is_empty() {
        return Ok(f.clone());
    }
    let base = field.modulus().unwrap_or(2);
    let set: BTreeSet<String> = zv.into_iter().collect();
    let out = reduce_selected(&ctx, &t, &set, base, 10_000_000)?;
    let cap = occurrence_cap(base, k);
    debug_assert!(z_occurrences(&out).values().all(|&n| n <= cap));
    Ok(term::materialize(&out, CircuitKind::Arithmetic))
}

/// Best-effort multilinearity check via expansion; gives up silently when the
/// expansion budget is exceeded.
fn check_z_multilinear(c: &Circuit, field: &FieldSpec) -> Result<(), TracebackError> {
    match poly::expand(c, field, ExpandOptions { max_terms: 50_000 }) {
        Ok(p) => {
            if !p.is_multilinear_in(|v| v.starts_with("z_")) {
                let witness = p
                    .terms()
                    .flat_map(|(m, _)| m.exponents().iter())
                    .find(|(v, &e)| v.starts_with("z_") && e > 1)
                    .map(|(v, _)| v.clone())
                    .unwrap_or_default();
                return Err(TracebackError::NotMultilinearInZ(witness));
            }
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Standard form and substitution
// ---------------------------------------------------------------------------

/// A formula multilinear in its z-variables, rewritten as
/// Σ_a (Π_i z_i^{a_i}) · f_a(x̄) with x-only coefficient formulas, keyed by
/// the subset bitmask `a` over `vars`. Identically-zero coefficients are
/// omitted.
#[derive(Debug, Clone)]
pub struct ZStandardForm {
    pub vars: Vec<String>,
    pub coeffs: BTreeMap<u64, Formula>,
}

impl ZStandardForm {
    /// Σ_a (Π z^a)·f_a, for oracle checks against the source formula.
    pub fn reconstruct(&self) -> Formula {
        let ctx = TermCtx::new(FieldSpec::ExactInteger);
        let form = ZFormT {
            vars: self.vars.clone(),
            coeffs: self
                .coeffs
                .iter()
                .map(|(&mask, f)| (mask, term_of_circuit(&ctx, f.circuit())))
                .collect(),
        };
        term::materialize(&form.reconstruct(&ctx), CircuitKind::Arithmetic)
    }
}

/// Term-level standard form used inside the engine.
struct ZFormT {
    vars: Vec<String>,
    coeffs: BTreeMap<u64, Term>,
}

impl ZFormT {
    fn reconstruct(&self, ctx: &TermCtx) -> Term {
        let summands: Vec<Term> = self
            .coeffs
            .iter()
            .map(|(&mask, f)| {
                let zs: Vec<Term> = self
                    .vars
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, v)| ctx.z(v))
                    .collect();
                ctx.mul(balanced_product(ctx, zs), f.clone())
            })
            .collect();
        balanced_sum(ctx, summands)
    }
}

const STANDARD_FORM_VAR_CAP: usize = 12;

/// Coefficients by signed inclusion–exclusion over sub-assignments:
/// coef(a) = Σ_{a′ ≤ a} (−1)^{|a|−|a′|} f(x̄, a′). (The unsigned-|a′| variant
/// fails the one-variable desk check f = z₁, whose coefficient must be
/// f(1) − f(0).)
fn standard_form_term(ctx: &TermCtx, t: &Term) -> Result<ZFormT, TracebackError> {
    let vars: Vec<String> = z_vars(t).into_iter().collect();
    if vars.len() > STANDARD_FORM_VAR_CAP {
        return Err(TracebackError::TooManyZVars { found: vars.len(), cap: STANDARD_FORM_VAR_CAP });
    }
    let m = vars.len();
    let minus_one = ctx.constant(BigInt::from(-1));
    let mut coeffs = BTreeMap::new();
    for mask in 0u64..(1 << m) {
        let mut parts = Vec::new();
        // Iterate submasks of `mask` (including 0 and mask itself).
        let mut sub = mask;
        loop {
            let assignment: BTreeMap<String, BigInt> = vars
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let bit = if mask >> i & 1 == 1 && sub >> i & 1 == 1 {
                        BigInt::one()
                    } else {
                        BigInt::zero()
                    };
                    (v.clone(), bit)
                })
                .collect();
            let point = assign_z(ctx, t, &assignment);
            let sign_flips = (mask.count_ones() - (sub & mask).count_ones()) % 2 == 1;
            parts.push(if sign_flips { ctx.mul(minus_one.clone(), point) } else { point });
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & mask;
        }
        let coef = balanced_sum(ctx, parts);
        if coef.as_const().map(|v| v.is_zero()) != Some(true) {
            coeffs.insert(mask, coef);
        }
    }
    Ok(ZFormT { vars, coeffs })
}

/// Standard form of a formula multilinear in its z-variables.
pub fn standard_form(f: &Formula) -> Result<ZStandardForm, TracebackError> {
    if f.circuit().kind() != CircuitKind::Arithmetic {
        return Err(TracebackError::NotArithmetic);
    }
    check_z_multilinear(f.circuit(), &FieldSpec::ExactInteger)?;
    let ctx = TermCtx::new(FieldSpec::ExactInteger);
    let t = term_of_circuit(&ctx, f.circuit());
    let form = standard_form_term(&ctx, &t)?;
    Ok(ZStandardForm {
        vars: form.vars,
        coeffs: form
            .coeffs
            .into_iter()
            .map(|(mask, t)| (mask, term::materialize(&t, CircuitKind::Arithmetic)))
            .collect(),
    })
}

/// Variables a substituted formula carries, split into input variables and
/// z-variables so same-named gates and inputs cannot be conflated.
fn var_profile(t: &Term) -> (BTreeSet<String>, BTreeSet<String>) {
    (x_vars(t), z_vars(t))
}

/// Substitute formulas for the z-variables of a standard form while keeping
/// the result syntactically multilinear: monomials pairing z-variables whose
/// replacements share a variable are dropped (their expanded coefficient is
/// provably zero for valid inputs), and shared variables are zeroed inside
/// coefficient formulas before they multiply a replacement containing them.
fn sm_substitute_term(
    ctx: &TermCtx,
    form: &ZFormT,
    subs: &BTreeMap<String, Term>,
) -> Result<Term, TracebackError> {
    let profiles: BTreeMap<&String, (BTreeSet<String>, BTreeSet<String>)> =
        subs.iter().map(|(g, t)| (g, var_profile(t))).collect();
    let conflict = |g: &String, h: &String| -> bool {
        match (profiles.get(g), profiles.get(h)) {
            (Some((gx, gz)), Some((hx, hz))) => {
                gx.intersection(hx).next().is_some() || gz.intersection(hz).next().is_some()
            }
            _ => false,
        }
    };
    let mut summands = Vec::new();
    'mask: for (&mask, coef) in &form.coeffs {
        let present: Vec<&String> = form
            .vars
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, v)| v)
            .collect();
        for i in 0..present.len() {
            for j in i + 1..present.len() {
                if conflict(present[i], present[j]) {
                    continue 'mask;
                }
            }
        }
        // Zero out, inside the coefficient, every variable any replacement in
        // this monomial carries.
        let mut shadowed: BTreeSet<String> = BTreeSet::new();
        for g in &present {
            if let Some((gx, _)) = profiles.get(*g) {
                shadowed.extend(gx.iter().cloned());
            }
        }
        let coef = zero_x_vars(ctx, coef, &shadowed);
        let mut factors = vec![coef];
        for g in present {
            match subs.get(g) {
                Some(r) => factors.push(r.clone()),
                None => factors.push(ctx.z(g)),
            }
        }
        summands.push(balanced_product(ctx, factors));
    }
    Ok(balanced_sum(ctx, summands))
}

/// Substitute formulas for z-variables under the multilinearity discipline.
pub fn sm_substitute(
    gamma: &ZStandardForm,
    subs: &BTreeMap<String, Formula>,
) -> Result<Formula, TracebackError> {
    for (g, f) in subs {
        if !f.circuit().is_syntactically_multilinear() {
            return Err(TracebackError::NotSyntacticallyMultilinear(format!(
                "replacement for z_{g} is not syntactically multilinear"
            )));
        }
    }
    let ctx = TermCtx::new(FieldSpec::ExactInteger);
    let form = ZFormT {
        vars: gamma.vars.clone(),
        coeffs: gamma
            .coeffs
            .iter()
            .map(|(&mask, f)| (mask, term_of_circuit(&ctx, f.circuit())))
            .collect(),
    };
    let subs_t: BTreeMap<String, Term> =
        subs.iter().map(|(g, f)| (g.clone(), term_of_circuit(&ctx, f.circuit()))).collect();
    let out = sm_substitute_term(&ctx, &form, &subs_t)?;
    Ok(term::materialize(&out, CircuitKind::Arithmetic))
}

// ---------------------------------------------------------------------------
// Base case
// ---------------------------------------------------------------------------

const BAG_UNFOLD_CAP: usize = 24;

/// Unfold a bag-local DAG (≤ width+1 gates, possibly with placeholder leaves)
/// into an equivalent formula. A DAG of m gates unfolds into at most 2^m − 1
/// tree nodes, so bag circuits stay within 2^{k+1}.
pub fn base_case_formula(sub: &Circuit) -> Result<Formula, TracebackError> {
    if sub.kind() != CircuitKind::Arithmetic {
        return Err(TracebackError::NotArithmetic);
    }
    if sub.size_total() > BAG_UNFOLD_CAP {
        return Err(TracebackError::BagTooLarge { gates: sub.size_total() });
    }
    let ctx = TermCtx::new(FieldSpec::ExactInteger);
    let t = term_of_circuit(&ctx, sub);
    debug_assert!(t.size() < 1u64 << sub.size_total());
    Ok(term::materialize(&t, CircuitKind::Arithmetic))
}

// ---------------------------------------------------------------------------
// Scope analysis, shared with the width simulator
// ---------------------------------------------------------------------------

/// Where an op gate's inputs sit relative to tree node `t`. This case split
/// drives both the flattening recursion and the width simulator, so it lives
/// in exactly one place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GateCase {
    /// Every input is itself a gate of the bag.
    InBag,
    /// No input is anywhere below `t`: the gate's value stays a placeholder.
    Outside,
    /// Every input lies below the returned child, whose bag also holds the
    /// gate itself.
    BelowChild(usize),
}

/// A scope violation: the pair either skipped preprocessing or carries a
/// malformed decomposition.
#[derive(Debug, Clone)]
pub(crate) enum ScopeError {
    Preprocessing(String),
    Decomposition(String),
}

impl From<ScopeError> for TracebackError {
    fn from(e: ScopeError) -> Self {
        match e {
            ScopeError::Preprocessing(m) => TracebackError::NotPreprocessed(m),
            ScopeError::Decomposition(m) => TracebackError::InvalidDecomposition(m),
        }
    }
}

/// Per-node bag and subtree membership sets, plus subtree heights.
pub(crate) struct Scopes {
    pub inbag: Vec<BitSet>,
    pub below: Vec<BitSet>,
    pub height: Vec<u32>,
}

impl Scopes {
    pub(crate) fn of(c: &Circuit, td: &crate::td::TreeDecomposition) -> Scopes {
        let n = c.size_total();
        let nodes = td.num_nodes();
        let mut inbag = Vec::with_capacity(nodes);
        for t in 0..nodes {
            let mut b = BitSet::new(n);
            for &v in td.bag(t) {
                b.insert(GateId(v).index());
            }
            inbag.push(b);
        }
        let mut below: Vec<BitSet> = inbag.clone();
        let mut height = vec![0u32; nodes];
        let mut order: Vec<usize> = Vec::with_capacity(nodes);
        let mut stack = vec![td.root()];
        while let Some(t) = stack.pop() {
            order.push(t);
            stack.extend_from_slice(td.children(t));
        }
        for &t in order.iter().rev() {
            for &ch in td.children(t) {
                let chb = below[ch].clone();
                below[t].union_with(&chb);
                height[t] = height[t].max(height[ch] + 1);
            }
        }
        Scopes { inbag, below, height }
    }

    /// Case analysis for op gate `f` at tree node `t`.
    pub(crate) fn classify(
        &self,
        td: &crate::td::TreeDecomposition,
        t: usize,
        f: GateId,
        gate: &Gate,
    ) -> Result<GateCase, ScopeError> {
        let inputs = &gate.inputs;
        let in_bag = inputs.iter().filter(|i| self.inbag[t].contains(i.index())).count();
        if in_bag == inputs.len() {
            return Ok(GateCase::InBag);
        }
        if in_bag > 0 {
            return Err(ScopeError::Preprocessing(format!(
                "gate {} mixes in-bag and out-of-bag inputs in one bag",
                gate.name
            )));
        }
        let in_below = inputs.iter().filter(|i| self.below[t].contains(i.index())).count();
        if in_below == 0 {
            return Ok(GateCase::Outside);
        }
        if in_below < inputs.len() {
            return Err(ScopeError::Preprocessing(format!(
                "inputs of gate {} straddle the subtree boundary",
                gate.name
            )));
        }
        let i0 = inputs[0];
        let child = td
            .children(t)
            .iter()
            .copied()
            .find(|&ch| self.below[ch].contains(i0.index()))
            .ok_or_else(|| {
                ScopeError::Decomposition(format!(
                    "no child subtree contains the cone of gate {}",
                    gate.name
                ))
            })?;
        for i in &inputs[1..] {
            if !self.below[child].contains(i.index()) {
                return Err(ScopeError::Preprocessing(format!(
                    "inputs of gate {} land in different child subtrees",
                    gate.name
                )));
            }
        }
        if !self.inbag[child].contains(f.index()) {
            return Err(ScopeError::Decomposition(format!(
                "gate {} missing from the child bag that owns its inputs",
                gate.name
            )));
        }
        Ok(GateCase::BelowChild(child))
    }
}

// ---------------------------------------------------------------------------
// The engine
// ---------------------------------------------------------------------------

struct Engine<'a> {
    c: &'a Circuit,
    td: &'a crate::td::TreeDecomposition,
    cfg: &'a TracebackConfig,
    ctx: TermCtx,
    base: u64,
    cap: u64,
    scopes: Scopes,
    name_to_id: HashMap<String, GateId>,
    memo: HashMap<(usize, u32), Term>,
    stats: TracebackStats,
    instrument: bool,
}

pub fn traceback(p: &PreprocessedPair, cfg: &TracebackConfig) -> Result<Formula, TracebackError> {
    run(p, cfg, false).map(|(f, _)| f)
}

/// Like `traceback`, but oracle-checks every internal recursion result on
/// small instances (≤ 20 gates, exact modes), asserts the per-height size
/// bound and the occurrence caps, and reports run statistics.
pub fn traceback_instrumented(
    p: &PreprocessedPair,
    cfg: &TracebackConfig,
) -> Result<(Formula, TracebackStats), TracebackError> {
    run(p, cfg, true)
}

fn run(
    p: &PreprocessedPair,
    cfg: &TracebackConfig,
    instrument: bool,
) -> Result<(Formula, TracebackStats), TracebackError> {
    let c = &p.circuit;
    let td = &p.td;
    if c.kind() != CircuitKind::Arithmetic {
        return Err(TracebackError::NotArithmetic);
    }
    if let Some(g) = c.gates().iter().find(|g| matches!(g.label, Label::ZPlaceholder(_))) {
        return Err(TracebackError::PlaceholderInput(g.name.clone()));
    }
    if let Some(v) = td.validate(&Graph::of_circuit(c)).into_iter().next() {
        return Err(TracebackError::InvalidDecomposition(format!("{v:?}")));
    }
    if !td.bag(td.root()).contains(&c.output().0) {
        return Err(TracebackError::InvalidDecomposition("output gate not in the root bag".into()));
    }
    if !check_preprocessed(p) {
        return Err(TracebackError::NotPreprocessed(
            "some bag mixes in-bag and out-of-bag inputs, or splits a pair across scopes".into(),
        ));
    }
    match cfg.mode {
        TracebackMode::MdExact => {
            if !c.is_multiplicatively_disjoint() {
                return Err(TracebackError::NotMultiplicativelyDisjoint);
            }
        }
        TracebackMode::SynMultilinear => {
            if !c.is_syntactically_multilinear() {
                return Err(TracebackError::NotSyntacticallyMultilinear(
                    "input circuit fails the checker".into(),
                ));
            }
        }
        TracebackMode::FiniteField(_) => {}
    }
    let ctx = TermCtx::new(cfg.mode.field()?);
    let base = cfg.mode.cap_base();
    let k = td.width();
    let mut engine = Engine {
        c,
        td,
        cfg,
        ctx,
        base,
        cap: occurrence_cap(base, k),
        scopes: Scopes::of(c, td),
        name_to_id: c
            .gates()
            .iter()
            .enumerate()
            .map(|(i, g)| (g.name.clone(), GateId::from_index(i)))
            .collect(),
        memo: HashMap::new(),
        stats: TracebackStats { width: k, ..TracebackStats::default() },
        instrument,
    };
    let gamma = engine.tb(td.root(), c.output())?;
    if let Some(z) = z_vars(&gamma).into_iter().next() {
        return Err(TracebackError::InvalidDecomposition(format!(
            "gate {z} survived to the root as a placeholder"
        )));
    }
    engine.guard(gamma.size())?;
    let stats = engine.stats.clone();
    let formula = term::materialize(&gamma, CircuitKind::Arithmetic);
    debug_assert!(formula.circuit().is_formula());
    Ok((formula, stats))
}

impl<'a> Engine<'a> {
    fn guard(&self, size: u64) -> Result<(), TracebackError> {
        if size > self.cfg.max_formula_size {
            return Err(TracebackError::FormulaTooLarge {
                size,
                limit: self.cfg.max_formula_size,
            });
        }
        Ok(())
    }

    fn tb(&mut self, t: usize, f: GateId) -> Result<Term, TracebackError> {
        if self.cfg.memoize {
            if let Some(hit) = self.memo.get(&(t, f.0)) {
                self.stats.memo_hits += 1;
                return Ok(hit.clone());
            }
        }
        self.stats.calls += 1;
        let gate = self.c.gate(f);
        let result = match &gate.label {
            Label::Input(x) => self.ctx.var(x),
            Label::Const(v) => self.ctx.constant(v.clone()),
            Label::ZPlaceholder(_) => unreachable!("rejected before the recursion"),
            _ if self.td.children(t).is_empty() => {
                // Leaf of the tree: brute-force unfolding of the bag DAG.
                let sub = self.cut_subcircuit(t, f, true);
                term_of_circuit(&self.ctx, &sub)
            }
            _ => {
                let gamma = match self.scopes.classify(self.td, t, f, gate)? {
                    GateCase::InBag => self.combine(t, f)?,
                    // Cone entirely outside this subtree: a placeholder.
                    GateCase::Outside => return self.finish(t, f, self.ctx.z(&gate.name)),
                    GateCase::BelowChild(child) => self.descend(t, child, f)?,
                };
                let reduced = self.reduce(gamma)?;
                self.guard(reduced.size())?;
                reduced
            }
        };
        self.finish(t, f, result)
    }

    /// Both inputs in the bag: combine the operand formulas at this node.
    fn combine(&mut self, t: usize, f: GateId) -> Result<Term, TracebackError> {
        let gate = self.c.gate(f);
        let a = self.tb(t, gate.inputs[0])?;
        if gate.inputs.len() == 1 {
            return Ok(a);
        }
        let b = self.tb(t, gate.inputs[1])?;
        match gate.label {
            Label::Add => Ok(self.ctx.add(a, b)),
            Label::Mul => {
                if self.cfg.mode == TracebackMode::SynMultilinear {
                    let (a, b) = self.resolve_shared_vars(a, b)?;
                    Ok(self.ctx.mul(a, b))
                } else {
                    Ok(self.ctx.mul(a, b))
                }
            }
            _ => Err(TracebackError::NotArithmetic),
        }
    }

    /// Product operands sharing a variable: zero it in the side whose
    /// expanded polynomial does not contain it. Unreachable for properly
    /// normalized inputs; resolved by oracle when it does happen.
    fn resolve_shared_vars(&self, a: Term, b: Term) -> Result<(Term, Term), TracebackError> {
        let (ax, az) = var_profile(&a);
        let (bx, bz) = var_profile(&b);
        let shared_x: Vec<String> = ax.intersection(&bx).cloned().collect();
        let shared_z: Vec<String> = az.intersection(&bz).cloned().collect();
        if shared_x.is_empty() && shared_z.is_empty() {
            return Ok((a, b));
        }
        let opts = ExpandOptions { max_terms: 50_000 };
        let pa = poly::expand(
            term::materialize(&a, CircuitKind::Arithmetic).circuit(),
            &self.ctx.field,
            opts,
        );
        let pb = poly::expand(
            term::materialize(&b, CircuitKind::Arithmetic).circuit(),
            &self.ctx.field,
            opts,
        );
        let (pa, pb) = match (pa, pb) {
            (Ok(pa), Ok(pb)) => (pa, pb),
            _ => {
                return Err(TracebackError::NotSyntacticallyMultilinear(
                    "product operands share variables and defy expansion".into(),
                ))
            }
        };
        let (mut a, mut b) = (a, b);
        for v in shared_x {
            if !pa.variables().contains(&v) {
                a = zero_x_vars(&self.ctx, &a, &BTreeSet::from([v]));
            } else if !pb.variables().contains(&v) {
                b = zero_x_vars(&self.ctx, &b, &BTreeSet::from([v]));
            } else {
                return Err(TracebackError::NotSyntacticallyMultilinear(format!(
                    "variable {v} appears in both product operands"
                )));
            }
        }
        for g in shared_z {
            let zn = poly::z_var_name(&g);
            let zero = BTreeMap::from([(g.clone(), BigInt::zero())]);
            if !pa.variables().contains(&zn) {
                a = assign_z(&self.ctx, &a, &zero);
            } else if !pb.variables().contains(&zn) {
                b = assign_z(&self.ctx, &b, &zero);
            } else {
                return Err(TracebackError::NotSyntacticallyMultilinear(format!(
                    "placeholder for {g} appears in both product operands; \
                     collapse constant subcircuits first"
                )));
            }
        }
        Ok((a, b))
    }

    /// Inputs live strictly below: recurse into the child subtree owning
    /// them, then replace surviving placeholders by their formulas at `t`.
    fn descend(&mut self, t: usize, child: usize, f: GateId) -> Result<Term, TracebackError> {
        let gate = self.c.gate(f);
        let gamma = self.tb(child, f)?;
        let pending: Vec<String> = z_vars(&gamma).into_iter().collect();
        if pending.is_empty() {
            return Ok(gamma);
        }
        if pending.iter().any(|z| z == &gate.name) {
            return Err(TracebackError::InvalidDecomposition(format!(
                "gate {} came back as its own placeholder",
                gate.name
            )));
        }
        // Every surviving placeholder names a gate of this bag.
        let mut ids = Vec::with_capacity(pending.len());
        for z in &pending {
            let id = self.name_to_id.get(z).copied().ok_or_else(|| {
                TracebackError::InvalidDecomposition(format!("unknown placeholder {z}"))
            })?;
            if !self.scopes.inbag[t].contains(id.index()) {
                return Err(TracebackError::InvalidDecomposition(format!(
                    "placeholder {z} escaped its bag"
                )));
            }
            ids.push(id);
        }
        if self.cfg.mode == TracebackMode::SynMultilinear {
            let form = standard_form_term(&self.ctx, &gamma)?;
            let mut subs = BTreeMap::new();
            for (z, id) in pending.iter().zip(&ids) {
                subs.insert(z.clone(), self.tb(t, *id)?);
            }
            sm_substitute_term(&self.ctx, &form, &subs)
        } else {
            let mut subs = BTreeMap::new();
            for (z, id) in pending.iter().zip(&ids) {
                subs.insert(z.clone(), self.tb(t, *id)?);
            }
            Ok(substitute_z(&self.ctx, &gamma, &subs))
        }
    }

    /// Occurrence-cap maintenance: re-expand exactly the set of z-variables
    /// needed so every count lands within base^{k+1}.
    fn reduce(&mut self, gamma: Term) -> Result<Term, TracebackError> {
        let occ = z_occurrences(&gamma);
        if occ.is_empty() {
            return Ok(gamma);
        }
        let set = reduction_set(&occ, self.cap, self.base);
        if set.is_empty() {
            return Ok(gamma);
        }
        self.stats.z_reductions += 1;
        let out =
            reduce_selected(&self.ctx, &gamma, &set, self.base, self.cfg.max_formula_size)?;
        let after = z_occurrences(&out);
        assert!(
            after.values().all(|&n| n <= self.cap),
            "occurrence cap violated after reduction"
        );
        Ok(out)
    }

    /// Record stats, run instrumentation, memoize.
    fn finish(&mut self, t: usize, f: GateId, result: Term) -> Result<Term, TracebackError> {
        self.stats.max_term_size = self.stats.max_term_size.max(result.size());
        if self.instrument {
            debug_assert!(
                z_occurrences(&result).values().all(|&n| n <= self.cap),
                "settled formula for gate {} breaks the occurrence cap",
                f.0
            );
            self.verify(t, f, &result);
        }
        if self.cfg.memoize {
            self.memo.insert((t, f.0), result.clone());
        }
        Ok(result)
    }

    /// Instrumented-mode checks: oracle equality with the visible subcircuit,
    /// variable containment, and the per-height size bound.
    fn verify(&self, t: usize, f: GateId, gamma: &Term) {
        let exact = self.ctx.field == FieldSpec::ExactInteger;
        if exact {
            let k = self.td.width() as u64;
            let alpha = BigInt::one() << (3 * k * k + 9 * k + 6);
            let bound = alpha.pow(self.scopes.height[t]) << (k + 1);
            assert!(
                BigInt::from(gamma.size()) <= bound,
                "size bound violated at height {}: {} gates",
                self.scopes.height[t],
                gamma.size()
            );
        }
        if !exact || self.c.size_total() > 20 {
            return;
        }
        let phi = self.cut_subcircuit(t, f, false);
        let (gx, gz) = var_profile(gamma);
        assert!(
            gx.is_subset(&phi.variables()),
            "formula for {} uses variables outside its subcircuit",
            self.c.gate(f).name
        );
        let phi_z: BTreeSet<String> = phi
            .gates()
            .iter()
            .filter_map(|g| match &g.label {
                Label::ZPlaceholder(z) => Some(z.clone()),
                _ => None,
            })
            .collect();
        assert!(
            gz.is_subset(&phi_z),
            "formula for {} uses placeholders outside its subcircuit",
            self.c.gate(f).name
        );
        let mat = term::materialize(gamma, CircuitKind::Arithmetic);
        let opts = ExpandOptions { max_terms: 200_000 };
        let same = poly::equiv_exact(&phi, mat.circuit(), &self.ctx.field, opts)
            .expect("instrumented expansion in budget");
        assert!(same, "recursion result differs from the visible subcircuit at gate {}", f.0);
    }

    /// The subcircuit of `f`'s cone restricted to the bag (`bag_only`) or the
    /// whole subtree scope, cutting to placeholders where the cone leaves the
    /// visible set.
    fn cut_subcircuit(&self, t: usize, f: GateId, bag_only: bool) -> Circuit {
        let dom = if bag_only { &self.scopes.inbag[t] } else { &self.scopes.below[t] };
        let mut keep: BTreeSet<u32> = BTreeSet::new();
        let mut stack = vec![f];
        while let Some(id) = stack.pop() {
            if !keep.insert(id.0) {
                continue;
            }
            let g = self.c.gate(id);
            if g.label.is_leaf() {
                continue;
            }
            if g.inputs.iter().all(|i| dom.contains(i.index())) {
                stack.extend_from_slice(&g.inputs);
            }
        }
        let local: HashMap<u32, GateId> =
            keep.iter().enumerate().map(|(i, &id)| (id, GateId::from_index(i))).collect();
        let gates: Vec<Gate> = keep
            .iter()
            .map(|&id| {
                let g = self.c.gate(GateId(id));
                if g.label.is_leaf() {
                    return g.clone();
                }
                if g.inputs.iter().all(|i| dom.contains(i.index())) {
                    Gate {
                        name: g.name.clone(),
                        label: g.label.clone(),
                        inputs: g.inputs.iter().map(|i| local[&i.0]).collect(),
                    }
                } else {
                    debug_assert!(
                        g.inputs.iter().all(|i| !dom.contains(i.index())),
                        "mixed visibility despite preprocessing"
                    );
                    Gate {
                        name: g.name.clone(),
                        label: Label::ZPlaceholder(g.name.clone()),
                        inputs: vec![],
                    }
                }
            })
            .collect();
        Circuit::new(gates, local[&f.0], CircuitKind::Arithmetic)
            .expect("cone restriction preserves well-formedness")
    }
}

// ---------------------------------------------------------------------------
// Brent balancing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BOp {
    Add,
    Mul,
    And,
    Or,
}

#[derive(Debug, Clone)]
enum BTree {
    Var(String),
    Z(String),
    Const(BigInt),
    Not(Box<BTree>),
    Bin(BOp, Box<BTree>, Box<BTree>),
}

impl BTree {
    fn size(&self) -> u64 {
        match self {
            BTree::Var(_) | BTree::Z(_) | BTree::Const(_) => 1,
            BTree::Not(a) => 1 + a.size(),
            BTree::Bin(_, a, b) => 1 + a.size() + b.size(),
        }
    }

    fn depth(&self) -> u64 {
        match self {
            BTree::Var(_) | BTree::Z(_) | BTree::Const(_) => 0,
            BTree::Not(a) => 1 + a.depth(),
            BTree::Bin(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }
}

fn bnot(a: BTree) -> BTree {
    match a {
        BTree::Const(v) => BTree::Const(if v.is_zero() { BigInt::one() } else { BigInt::zero() }),
        BTree::Not(inner) => *inner,
        other => BTree::Not(Box::new(other)),
    }
}

fn bbin(op: BOp, a: BTree, b: BTree) -> BTree {
    // Constant folding keeps the rebuilt restrictions from accumulating
    // dead selector structure.
    match op {
        BOp::Add => match (&a, &b) {
            (BTree::Const(x), BTree::Const(y)) => return BTree::Const(x + y),
            (BTree::Const(x), _) if x.is_zero() => return b,
            (_, BTree::Const(y)) if y.is_zero() => return a,
            _ => {}
        },
        BOp::Mul => match (&a, &b) {
            (BTree::Const(x), BTree::Const(y)) => return BTree::Const(x * y),
            (BTree::Const(x), _) => {
                if x.is_zero() {
                    return a;
                }
                if x.is_one() {
                    return b;
                }
            }
            (_, BTree::Const(y)) => {
                if y.is_zero() {
                    return b;
                }
                if y.is_one() {
                    return a;
                }
            }
            _ => {}
        },
        BOp::And => match (&a, &b) {
            (BTree::Const(x), _) => return if x.is_zero() { a } else { b },
            (_, BTree::Const(y)) => return if y.is_zero() { b } else { a },
            _ => {}
        },
        BOp::Or => match (&a, &b) {
            (BTree::Const(x), _) => return if x.is_zero() { b } else { a },
            (_, BTree::Const(y)) => return if y.is_zero() { a } else { b },
            _ => {}
        },
    }
    BTree::Bin(op, Box::new(a), Box::new(b))
}

enum PathStep {
    /// Negation on the separator path.
    Neg,
    /// Binary node: operation, sibling subtree, and whether the path
    /// continued through the left operand.
    Side(BOp, BTree, bool),
}

fn tree_of_formula(f: &Formula) -> BTree {
    let c = f.circuit();
    let live = c.live_gates();
    let mut built: Vec<Option<BTree>> = vec![None; c.size_total()];
    for (i, g) in c.gates().iter().enumerate() {
        if !live.contains(i) {
            continue;
        }
        let node = match &g.label {
            Label::Input(x) => BTree::Var(x.clone()),
            Label::ZPlaceholder(z) => BTree::Z(z.clone()),
            Label::Const(v) => BTree::Const(v.clone()),
            Label::Not => bnot(built[g.inputs[0].index()].take().expect("tree child")),
            Label::Add if g.inputs.len() == 1 => {
                built[g.inputs[0].index()].take().expect("tree child")
            }
            Label::Add | Label::Mul | Label::And | Label::Or => {
                let a = built[g.inputs[0].index()].take().expect("tree child");
                let b = built[g.inputs[1].index()].take().expect("tree child");
                let op = match g.label {
                    Label::Add => BOp::Add,
                    Label::Mul => BOp::Mul,
                    Label::And => BOp::And,
                    _ => BOp::Or,
                };
                BTree::Bin(op, Box::new(a), Box::new(b))
            }
        };
        built[i] = Some(node);
    }
    built[c.output().index()].take().expect("output present")
}

fn formula_of_tree(t: &BTree, kind: CircuitKind) -> Formula {
    let mut gates: Vec<Gate> = Vec::new();
    let mut results: Vec<GateId> = Vec::new();
    enum Item<'a> {
        Visit(&'a BTree),
        Emit(&'a BTree),
    }
    let mut stack = vec![Item::Visit(t)];
    while let Some(item) = stack.pop() {
        match item {
            Item::Visit(u) => match u {
                BTree::Not(a) => {
                    stack.push(Item::Emit(u));
                    stack.push(Item::Visit(a));
                }
                BTree::Bin(_, a, b) => {
                    stack.push(Item::Emit(u));
                    stack.push(Item::Visit(b));
                    stack.push(Item::Visit(a));
                }
                _ => stack.push(Item::Emit(u)),
            },
            Item::Emit(u) => {
                let n = gates.len() + 1;
                let gate = match u {
                    BTree::Var(x) => {
                        Gate { name: format!("n{n}"), label: Label::Input(x.clone()), inputs: vec![] }
                    }
                    BTree::Z(z) => Gate {
                        name: format!("n{n}"),
                        label: Label::ZPlaceholder(z.clone()),
                        inputs: vec![],
                    },
                    BTree::Const(v) => {
                        Gate { name: format!("n{n}"), label: Label::Const(v.clone()), inputs: vec![] }
                    }
                    BTree::Not(_) => {
                        let a = results.pop().expect("operand");
                        Gate { name: format!("n{n}"), label: Label::Not, inputs: vec![a] }
                    }
                    BTree::Bin(op, ..) => {
                        let b = results.pop().expect("operand");
                        let a = results.pop().expect("operand");
                        let label = match op {
                            BOp::Add => Label::Add,
                            BOp::Mul => Label::Mul,
                            BOp::And => Label::And,
                            BOp::Or => Label::Or,
                        };
                        Gate { name: format!("n{n}"), label, inputs: vec![a, b] }
                    }
                };
                gates.push(gate);
                results.push(GateId(gates.len() as u32));
            }
        }
    }
    let output = results.pop().expect("root");
    let c = Circuit::new(gates, output, kind).expect("tree emits a well-formed circuit");
    Formula::from_circuit(c).expect("tree has out-degree one")
}

/// Rebuild the spine around the separator hole with a replacement subtree.
fn rebuild(path: &[PathStep], hole: BTree) -> BTree {
    let mut acc = hole;
    for step in path.iter().rev() {
        acc = match step {
            PathStep::Neg => bnot(acc),
            PathStep::Side(op, sib, path_left) => {
                if *path_left {
                    bbin(*op, acc, sib.clone())
                } else {
                    bbin(*op, sib.clone(), acc)
                }
            }
        };
    }
    acc
}

fn balance_tree(t: BTree) -> BTree {
    let s = t.size();
    if s <= 8 {
        return t;
    }
    // Walk towards the heavier child until the subtree fits in 2s/3; the
    // stop must be a strict descendant so the spine restrictions shrink.
    let mut path: Vec<PathStep> = Vec::new();
    let mut cur = t;
    loop {
        if 3 * cur.size() <= 2 * s && !path.is_empty() {
            break;
        }
        cur = match cur {
            BTree::Not(a) => {
                path.push(PathStep::Neg);
                *a
            }
            BTree::Bin(op, a, b) => {
                if a.size() >= b.size() {
                    path.push(PathStep::Side(op, *b, true));
                    *a
                } else {
                    path.push(PathStep::Side(op, *a, false));
                    *b
                }
            }
            leaf => {
                // Degenerate spine (all siblings tiny); nothing to split.
                return rebuild(&path, leaf);
            }
        };
    }
    let g = balance_tree(cur);
    let boolean = path.iter().any(|p| {
        matches!(p, PathStep::Neg | PathStep::Side(BOp::And | BOp::Or, _, _))
    });
    if boolean {
        // Shannon expansion around the hole.
        let f1 = balance_tree(rebuild(&path, BTree::Const(BigInt::one())));
        let f0 = balance_tree(rebuild(&path, BTree::Const(BigInt::zero())));
        bbin(
            BOp::Or,
            bbin(BOp::And, f1, g.clone()),
            bbin(BOp::And, f0, bnot(g)),
        )
    } else {
        // An additive/multiplicative spine is affine in the hole with slope
        // equal to the product of the multiplication siblings alone:
        // F(g) = (Π mul-siblings)·g + F(0). Unlike the slope F(1) − F(0),
        // this product never shares variables with the hole subtree when the
        // input is syntactically multilinear.
        let muls: Vec<BTree> = path
            .iter()
            .filter_map(|p| match p {
                PathStep::Side(BOp::Mul, sib, _) => Some(sib.clone()),
                _ => None,
            })
            .collect();
        let f0 = balance_tree(rebuild(&path, BTree::Const(BigInt::zero())));
        let scaled = match muls.into_iter().reduce(|a, b| bbin(BOp::Mul, a, b)) {
            Some(chain) => bbin(BOp::Mul, balance_tree(chain), g),
            None => g,
        };
        bbin(BOp::Add, scaled, f0)
    }
}

/// Depth-balance a formula: the result is equivalent (expansion-exact for
/// arithmetic formulas, pointwise for boolean ones), has depth at most
/// 10·log₂(size) + 10, and stays syntactically multilinear when the input is.
pub fn brent_balance(f: &Formula) -> Formula {
    let kind = f.circuit().kind();
    let input_size = f.circuit().size_total().max(2) as f64;
    let tree = tree_of_formula(f);
    let balanced = balance_tree(tree);
    let bound = (10.0 * input_size.log2() + 10.0) as u64;
    assert!(
        balanced.depth() <= bound,
        "balanced depth {} exceeds {} for size {}",
        balanced.depth(),
        bound,
        input_size
    );
    formula_of_tree(&balanced, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::parse_circuit;
    use crate::gen;
    use crate::poly::equiv_exact;
    use crate::td::{balance_td, root_with_output, TreeDecomposition};
    use crate::transforms::{preprocess, sm_normalize};
    use num_traits::ToPrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exact() -> FieldSpec {
        FieldSpec::ExactInteger
    }

    fn opts() -> ExpandOptions {
        ExpandOptions::default()
    }

    fn md_cfg() -> TracebackConfig {
        TracebackConfig::new(TracebackMode::MdExact)
    }

    fn prepare(c: &Circuit, td: &TreeDecomposition) -> PreprocessedPair {
        let td = root_with_output(td, c);
        preprocess(c, &td).unwrap()
    }

    #[test]
    fn flattens_a_single_gate() {
        let c = parse_circuit("input x1\ninput x2\ngate o add x1 x2\noutput o").unwrap();
        let td = TreeDecomposition::single_bag(BTreeSet::from([1, 2, 3]));
        let p = prepare(&c, &td);
        let f = traceback(&p, &md_cfg()).unwrap();
        assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap());
        assert_eq!(f.circuit().size_total(), 3);
    }

    #[test]
    fn flattens_the_path_example() {
        let c = parse_circuit(
            "input x\ninput y\ninput z\ngate g add x y\ngate h mul g z\ngate o add g h\noutput o",
        )
        .unwrap();
        // Path of bags: {x,y,g}, {g,z,h}, {g,h,o}.
        let td = TreeDecomposition::new(
            vec![
                BTreeSet::from([1, 2, 4]),
                BTreeSet::from([3, 4, 5]),
                BTreeSet::from([4, 5, 6]),
            ],
            vec![Some(1), Some(2), None],
        )
        .unwrap();
        let p = prepare(&c, &td);
        let (f, stats) = traceback_instrumented(&p, &md_cfg()).unwrap();
        // (x + y) + (x + y)·z, expanded: x + y + x·z + y·z.
        let expanded = poly::expand(f.circuit(), &exact(), opts()).unwrap();
        let want = poly::expand(&c, &exact(), opts()).unwrap();
        assert_eq!(expanded, want);
        assert_eq!(expanded.num_terms(), 4);
        assert!(stats.calls > 0);
    }

    #[test]
    fn md_instances_flatten_exactly() {
        for seed in 0..40 {
            let cfg = gen::GenConfig::new(24, 3, gen::Shape::Md, 900 + seed);
            let (c, td) = gen::gen_instance(&cfg);
            let p = prepare(&c, &td);
            let (f, _) = traceback_instrumented(&p, &md_cfg()).unwrap();
            assert!(f.circuit().is_formula(), "seed {seed}");
            assert!(
                f.circuit().gates().iter().all(|g| !matches!(g.label, Label::ZPlaceholder(_))),
                "seed {seed}"
            );
            assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn md_instances_flatten_through_balanced_decompositions() {
        for seed in 0..15 {
            let cfg = gen::GenConfig::new(30, 3, gen::Shape::Md, 7700 + seed);
            let (c, td) = gen::gen_instance(&cfg);
            let g = Graph::of_circuit(&c);
            let btd = balance_td(&g, &td).unwrap();
            let p = prepare(&c, &btd);
            let f = traceback(&p, &md_cfg()).unwrap();
            assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn sm_mode_preserves_syntactic_multilinearity() {
        let cfg = TracebackConfig::new(TracebackMode::SynMultilinear);
        for seed in 0..25 {
            let gcfg = gen::GenConfig::new(22, 3, gen::Shape::Sm, 400 + seed);
            let (c0, td0) = gen::gen_instance(&gcfg);
            let (c, td) = sm_normalize(&c0, &td0).unwrap();
            let p = prepare(&c, &td);
            let (f, _) = traceback_instrumented(&p, &cfg).unwrap();
            assert!(f.circuit().is_syntactically_multilinear(), "seed {seed}");
            assert!(equiv_exact(&c0, f.circuit(), &exact(), opts()).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn gf2_mode_agrees_pointwise_on_arbitrary_circuits() {
        let cfg = TracebackConfig::new(TracebackMode::FiniteField(2));
        for seed in 0..25 {
            let gcfg = gen::GenConfig { vars: 6, ..gen::GenConfig::new(18, 3, gen::Shape::Arith, 200 + seed) };
            let (c, td) = gen::gen_instance(&gcfg);
            let p = prepare(&c, &td);
            let f = traceback(&p, &cfg).unwrap();
            let vars: Vec<String> = c.variables().into_iter().collect();
            for bits in 0u32..1 << vars.len() {
                let assignment: BTreeMap<String, BigInt> = vars
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), BigInt::from(bits >> i & 1)))
                    .collect();
                let want = c.evaluate(&assignment, &FieldSpec::Gf2).unwrap();
                let got = f.circuit().evaluate(&assignment, &FieldSpec::Gf2).unwrap();
                assert_eq!(want, got, "seed {seed} point {bits:b}");
            }
        }
    }

    #[test]
    fn gf3_mode_agrees_pointwise() {
        let cfg = TracebackConfig::new(TracebackMode::FiniteField(3));
        let field = FieldSpec::gfp(3).unwrap();
        for seed in 0..10 {
            let gcfg = gen::GenConfig { vars: 3, ..gen::GenConfig::new(14, 2, gen::Shape::Arith, 300 + seed) };
            let (c, td) = gen::gen_instance(&gcfg);
            let p = prepare(&c, &td);
            let f = traceback(&p, &cfg).unwrap();
            let vars: Vec<String> = c.variables().into_iter().collect();
            let points = 3u32.pow(vars.len() as u32);
            for point in 0..points {
                let mut rem = point;
                let assignment: BTreeMap<String, BigInt> = vars
                    .iter()
                    .map(|v| {
                        let d = rem % 3;
                        rem /= 3;
                        (v.clone(), BigInt::from(d))
                    })
                    .collect();
                let want = c.evaluate(&assignment, &field).unwrap();
                let got = f.circuit().evaluate(&assignment, &field).unwrap();
                assert_eq!(want, got, "seed {seed} point {point}");
            }
        }
    }

    #[test]
    fn rejects_unsuitable_inputs() {
        let c = parse_circuit("input x\ngate s add x x\ngate o mul s s\noutput o").unwrap();
        let td = TreeDecomposition::single_bag(BTreeSet::from([1, 2, 3]));
        let p = prepare(&c, &td);
        assert!(matches!(
            traceback(&p, &md_cfg()),
            Err(TracebackError::NotMultiplicativelyDisjoint)
        ));
        assert!(matches!(
            traceback(&p, &TracebackConfig::new(TracebackMode::FiniteField(6))),
            Err(TracebackError::BadField(_))
        ));
        let mut tiny = TracebackConfig::new(TracebackMode::FiniteField(2));
        tiny.max_formula_size = 2;
        assert!(matches!(
            traceback(&p, &tiny),
            Err(TracebackError::FormulaTooLarge { .. })
        ));
    }

    #[test]
    fn memoization_does_not_change_results() {
        let gcfg = gen::GenConfig::new(26, 3, gen::Shape::Md, 1234);
        let (c, td) = gen::gen_instance(&gcfg);
        let p = prepare(&c, &td);
        let with = traceback(&p, &md_cfg()).unwrap();
        let mut cfg = md_cfg();
        cfg.memoize = false;
        let without = traceback(&p, &cfg).unwrap();
        assert_eq!(
            crate::circuit::serialize_circuit(with.circuit()).unwrap(),
            crate::circuit::serialize_circuit(without.circuit()).unwrap()
        );
    }

    #[test]
    fn base_case_unfolds_shared_leaves() {
        let c = parse_circuit("input x1\ngate o mul x1 x1\noutput o").unwrap();
        let f = base_case_formula(&c).unwrap();
        assert_eq!(f.circuit().size_total(), 3);
        assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap());
    }

    #[test]
    fn base_case_keeps_chains_intact() {
        let c = parse_circuit(
            "input x\ngate a add x x\ngate b add a x\ngate o add b a\noutput o",
        )
        .unwrap();
        let f = base_case_formula(&c).unwrap();
        assert!(f.circuit().size_total() <= 1 << c.size_total());
        assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap());
    }

    #[test]
    fn base_case_random_bags_stay_under_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for round in 0..50 {
            // Random 4-gate bag DAG over two leaves and two ops.
            let mut text = String::from("input x\n");
            text.push_str("gate z0 add x x\n");
            let ops = ["add", "mul"];
            for i in 1..=2 {
                let a = rng.gen_range(0..i + 1);
                let b = rng.gen_range(0..i + 1);
                let name = |j: usize| if j == 0 { "x".to_string() } else { format!("z{}", j - 1) };
                text.push_str(&format!(
                    "gate z{i} {} {} {}\n",
                    ops[rng.gen_range(0..2)],
                    name(a),
                    name(b)
                ));
            }
            text.push_str("output z2");
            let c = parse_circuit(&text).unwrap();
            let f = base_case_formula(&c).unwrap();
            assert!(f.circuit().size_total() <= 16, "round {round}");
            assert!(equiv_exact(&c, f.circuit(), &exact(), opts()).unwrap(), "round {round}");
        }
    }

    fn formula_of_text(text: &str) -> Formula {
        Formula::from_circuit(parse_circuit(text).unwrap()).unwrap()
    }

    #[test]
    fn z_reduce_expands_the_one_variable_selector() {
        let ctx = TermCtx::new(exact());
        let t = ctx.z("g1");
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let out = z_reduce(&f, 0, &exact()).unwrap();
        assert!(equiv_exact(f.circuit(), out.circuit(), &exact(), opts()).unwrap());
        let occ = z_occurrences(&term_of_circuit(&ctx, out.circuit()));
        assert!(occ.get("g1").copied().unwrap_or(0) <= 2);
    }

    #[test]
    fn z_reduce_leaves_z_free_formulas_alone() {
        let f = formula_of_text("input x\ninput y\ngate o mul x y\noutput o");
        let out = z_reduce(&f, 1, &exact()).unwrap();
        assert_eq!(out.circuit().size_total(), f.circuit().size_total());
    }

    #[test]
    fn z_reduce_caps_heavy_occurrences() {
        let ctx = TermCtx::new(exact());
        let z = ctx.z("g");
        // z occurs five times, multilinearly: x1 z + x2 z + x3 z + x4 z + x5 z.
        let t = balanced_sum(
            &ctx,
            (1..=5).map(|i| ctx.mul(ctx.var(&format!("x{i}")), z.clone())).collect(),
        );
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let out = z_reduce(&f, 1, &exact()).unwrap();
        assert!(equiv_exact(f.circuit(), out.circuit(), &exact(), opts()).unwrap());
        let occ = z_occurrences(&term_of_circuit(&ctx, out.circuit()));
        assert!(occ["g"] <= 2, "got {}", occ["g"]);
    }

    #[test]
    fn z_reduce_rejects_nonmultilinear_exact_inputs() {
        let ctx = TermCtx::new(exact());
        let z = ctx.z("g");
        let f = term::materialize(&ctx.mul(z.clone(), z), CircuitKind::Arithmetic);
        assert!(matches!(
            z_reduce(&f, 1, &exact()),
            Err(TracebackError::NotMultilinearInZ(_))
        ));
    }

    #[test]
    fn z_reduce_interpolates_over_gf5() {
        let field = FieldSpec::gfp(5).unwrap();
        let ctx = TermCtx::new(field);
        let z = ctx.z("g");
        // Non-multilinear on purpose: z³ + 2z·x + 4.
        let t = balanced_sum(
            &ctx,
            vec![
                ctx.pow(z.clone(), 3),
                ctx.mul(ctx.constant(BigInt::from(2)), ctx.mul(z.clone(), ctx.var("x"))),
                ctx.constant(BigInt::from(4)),
            ],
        );
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let out = z_reduce(&f, 1, &field).unwrap();
        let occ = z_occurrences(&term_of_circuit(&ctx, out.circuit()));
        assert!(occ["g"] <= 25);
        for zv in 0..5u32 {
            for xv in 0..5u32 {
                let a = BTreeMap::from([
                    ("x".to_string(), BigInt::from(xv)),
                    (poly::z_var_name("g"), BigInt::from(zv)),
                ]);
                let want = f.circuit().evaluate_with_z(&a, &field).unwrap();
                let got = out.circuit().evaluate_with_z(&a, &field).unwrap();
                assert_eq!(want, got, "z={zv} x={xv}");
            }
        }
    }

    #[test]
    fn standard_form_single_variable() {
        let ctx = TermCtx::new(exact());
        let f = term::materialize(&ctx.z("g1"), CircuitKind::Arithmetic);
        let form = standard_form(&f).unwrap();
        assert_eq!(form.vars, vec!["g1".to_string()]);
        let coef = poly::expand(form.coeffs[&1].circuit(), &exact(), opts()).unwrap();
        assert_eq!(coef.to_string(), "1");
        assert!(!form.coeffs.contains_key(&0));
    }

    #[test]
    fn standard_form_matches_the_worked_example() {
        // f = z1·z2 + z1; coefficient of z1 (mask 01) is −f(0,0) + f(1,0) = 1.
        let ctx = TermCtx::new(exact());
        let z1 = ctx.z("g1");
        let z2 = ctx.z("g2");
        let t = ctx.add(ctx.mul(z1.clone(), z2), z1);
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let form = standard_form(&f).unwrap();
        let coef = poly::expand(form.coeffs[&1].circuit(), &exact(), opts()).unwrap();
        assert_eq!(coef.to_string(), "1");
        let rec = form.reconstruct();
        assert!(equiv_exact(f.circuit(), rec.circuit(), &exact(), opts()).unwrap());
    }

    #[test]
    fn standard_form_coefficients_match_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ctx = TermCtx::new(exact());
        for round in 0..30 {
            // Random multilinear polynomial in three z-variables with
            // x-coefficients; the top term is pinned so all three variables
            // occur and the subset bitmasks line up with `form.vars`.
            let mut summands = Vec::new();
            for mask in 0u64..8 {
                if mask == 7 || rng.gen_bool(0.6) {
                    let coef = if mask == 7 { 1 } else { rng.gen_range(-3i64..4) };
                    if coef == 0 {
                        continue;
                    }
                    let mut factors = vec![ctx.constant(BigInt::from(coef))];
                    if rng.gen_bool(0.5) {
                        factors.push(ctx.var("x"));
                    }
                    for i in 0..3 {
                        if mask >> i & 1 == 1 {
                            factors.push(ctx.z(&format!("g{i}")));
                        }
                    }
                    summands.push(balanced_product(&ctx, factors));
                }
            }
            let t = balanced_sum(&ctx, summands);
            let f = term::materialize(&t, CircuitKind::Arithmetic);
            let form = standard_form(&f).unwrap();
            let full = poly::expand(f.circuit(), &exact(), opts()).unwrap();
            for mask in 0u64..8 {
                let part = crate::poly::Monomial::from_map(
                    (0..3)
                        .filter(|i| mask >> i & 1 == 1)
                        .map(|i| (poly::z_var_name(&format!("g{i}")), 1))
                        .collect(),
                );
                let want = full.coefficient_poly(&part, |v| v.starts_with("z_"));
                match form.coeffs.get(&mask) {
                    Some(cf) => {
                        let got = poly::expand(cf.circuit(), &exact(), opts()).unwrap();
                        assert_eq!(got, want, "round {round} mask {mask:03b}");
                    }
                    None => assert!(want.is_zero(), "round {round} mask {mask:03b}"),
                }
            }
            let rec = form.reconstruct();
            assert!(equiv_exact(f.circuit(), rec.circuit(), &exact(), opts()).unwrap());
        }
    }

    #[test]
    fn sm_substitute_matches_naive_substitution_when_disjoint() {
        let ctx = TermCtx::new(exact());
        let t = ctx.add(ctx.mul(ctx.z("g"), ctx.z("h")), ctx.var("x0"));
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let form = standard_form(&f).unwrap();
        let squared = term::materialize(
            &ctx.mul(ctx.var("x3"), ctx.var("x3")),
            CircuitKind::Arithmetic,
        );
        let subs = BTreeMap::from([
            ("g".to_string(), formula_of_text("input x1\ninput x2\ngate o add x1 x2\noutput o")),
            ("h".to_string(), squared),
        ]);
        // x3·x3 is not multilinear: expect rejection.
        assert!(sm_substitute(&form, &subs).is_err());
        let subs = BTreeMap::from([
            ("g".to_string(), formula_of_text("input x1\ninput x2\ngate o add x1 x2\noutput o")),
            ("h".to_string(), formula_of_text("input x3\noutput x3")),
        ]);
        let out = sm_substitute(&form, &subs).unwrap();
        let naive = {
            let map = BTreeMap::from([
                ("g".to_string(), term_of_circuit(&ctx, subs["g"].circuit())),
                ("h".to_string(), term_of_circuit(&ctx, subs["h"].circuit())),
            ]);
            term::materialize(&substitute_z(&ctx, &t, &map), CircuitKind::Arithmetic)
        };
        assert!(equiv_exact(out.circuit(), naive.circuit(), &exact(), opts()).unwrap());
        assert!(out.circuit().is_syntactically_multilinear());
    }

    #[test]
    fn sm_substitute_drops_provably_zero_joint_monomials() {
        // Γ = z_g·z_h·(x1 − x1) + z_g + z_h: the joint coefficient expands to
        // zero, and the replacements for g and h share x9.
        let ctx = TermCtx::new(exact());
        let zero_coef = ctx.add(ctx.var("x1"), ctx.mul(ctx.constant(BigInt::from(-1)), ctx.var("x1")));
        let t = balanced_sum(
            &ctx,
            vec![
                ctx.mul(ctx.mul(ctx.z("g"), ctx.z("h")), zero_coef),
                ctx.z("g"),
                ctx.z("h"),
            ],
        );
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let form = standard_form(&f).unwrap();
        let doubled = term::materialize(
            &ctx.add(ctx.var("x9"), ctx.var("x9")),
            CircuitKind::Arithmetic,
        );
        let subs = BTreeMap::from([
            ("g".to_string(), formula_of_text("input x9\noutput x9")),
            ("h".to_string(), doubled),
        ]);
        let out = sm_substitute(&form, &subs).unwrap();
        assert!(out.circuit().is_syntactically_multilinear());
        // Equivalent to x9 + 2x9 = 3x9.
        let expanded = poly::expand(out.circuit(), &exact(), opts()).unwrap();
        assert_eq!(expanded.to_string(), "3*x9");
    }

    #[test]
    fn sm_substitute_of_zero_form_is_zero() {
        let ctx = TermCtx::new(exact());
        let zero = ctx.add(ctx.z("g"), ctx.mul(ctx.constant(BigInt::from(-1)), ctx.z("g")));
        let f = term::materialize(&zero, CircuitKind::Arithmetic);
        let form = standard_form(&f).unwrap();
        assert!(form.coeffs.is_empty());
        let out = sm_substitute(&form, &BTreeMap::new()).unwrap();
        let p = poly::expand(out.circuit(), &exact(), opts()).unwrap();
        assert!(p.is_zero());
    }

    #[test]
    fn brent_balances_a_left_deep_chain() {
        let mut text = String::from("input x0\n");
        let mut prev = "x0".to_string();
        for i in 1..64 {
            text.push_str(&format!("input x{i}\n"));
            text.push_str(&format!("gate s{i} add s_prev x{i}\n").replace("s_prev", &prev));
            prev = format!("s{i}");
        }
        text.push_str(&format!("output {prev}"));
        let f = formula_of_text(&text);
        assert_eq!(f.circuit().depth(), 63);
        let balanced = brent_balance(&f);
        assert!(equiv_exact(f.circuit(), balanced.circuit(), &exact(), opts()).unwrap());
        let bound = (10.0 * (f.circuit().size_total() as f64).log2() + 10.0) as usize;
        assert!(balanced.circuit().depth() <= bound);
        assert!(balanced.circuit().depth() <= 26, "got {}", balanced.circuit().depth());
    }

    #[test]
    fn brent_keeps_balanced_formulas_within_the_bound() {
        let ctx = TermCtx::new(exact());
        let leaves: Vec<Term> = (0..32).map(|i| ctx.var(&format!("x{i}"))).collect();
        let t = balanced_sum(&ctx, leaves);
        let f = term::materialize(&t, CircuitKind::Arithmetic);
        let balanced = brent_balance(&f);
        let bound = (10.0 * (f.circuit().size_total() as f64).log2() + 10.0) as usize;
        assert!(balanced.circuit().depth() <= bound);
        assert!(equiv_exact(f.circuit(), balanced.circuit(), &exact(), opts()).unwrap());
    }

    #[test]
    fn brent_preserves_syntactic_multilinearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for round in 0..30 {
            let t = random_sm_term(&mut rng, 0, 4);
            let ctx_f = term::materialize(&t.0, CircuitKind::Arithmetic);
            if !ctx_f.circuit().is_syntactically_multilinear() {
                continue;
            }
            let balanced = brent_balance(&ctx_f);
            assert!(balanced.circuit().is_syntactically_multilinear(), "round {round}");
            assert!(
                equiv_exact(ctx_f.circuit(), balanced.circuit(), &exact(), opts()).unwrap(),
                "round {round}"
            );
        }
    }

    /// Random syntactically multilinear term plus its variable set.
    fn random_sm_term(rng: &mut ChaCha8Rng, lo: u32, depth: u32) -> (Term, (u32, u32)) {
        let ctx = TermCtx::new(exact());
        if depth == 0 || rng.gen_bool(0.2) {
            let v = lo;
            return (ctx.var(&format!("x{v}")), (lo, lo + 1));
        }
        if rng.gen_bool(0.5) {
            let (a, (_, hi1)) = random_sm_term(rng, lo, depth - 1);
            let (b, (_, hi2)) = random_sm_term(rng, lo, depth - 1);
            (ctx.add(a, b), (lo, hi1.max(hi2)))
        } else {
            // Products draw from disjoint variable ranges.
            let (a, (_, hi1)) = random_sm_term(rng, lo, depth - 1);
            let (b, (_, hi2)) = random_sm_term(rng, hi1, depth - 1);
            (ctx.mul(a, b), (lo, hi2))
        }
    }

    #[test]
    fn brent_balances_boolean_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for round in 0..25 {
            let nvars = rng.gen_range(2..=4u32);
            let tree = random_bool_tree(&mut rng, nvars, 6);
            let f = formula_of_tree(&tree, CircuitKind::Boolean);
            let balanced = brent_balance(&f);
            let bound = (10.0 * (f.circuit().size_total() as f64).log2() + 10.0) as usize;
            assert!(balanced.circuit().depth() <= bound, "round {round}");
            for bits in 0u32..1 << nvars {
                let assignment: BTreeMap<String, BigInt> = (0..nvars)
                    .map(|i| (format!("x{i}"), BigInt::from(bits >> i & 1)))
                    .collect();
                let want = f.circuit().evaluate(&assignment, &FieldSpec::Gf2).unwrap();
                let got = balanced.circuit().evaluate(&assignment, &FieldSpec::Gf2).unwrap();
                assert_eq!(want, got, "round {round} point {bits:b}");
            }
        }
    }

    /// Random boolean tree; repeated variables become separate leaves.
    fn random_bool_tree(rng: &mut ChaCha8Rng, nvars: u32, depth: u32) -> BTree {
        if depth == 0 || rng.gen_bool(0.15) {
            return if rng.gen_bool(0.9) {
                BTree::Var(format!("x{}", rng.gen_range(0..nvars)))
            } else {
                BTree::Const(BigInt::from(rng.gen_range(0..2)))
            };
        }
        match rng.gen_range(0..5) {
            0 => BTree::Not(Box::new(random_bool_tree(rng, nvars, depth - 1))),
            n => BTree::Bin(
                if n < 3 { BOp::And } else { BOp::Or },
                Box::new(random_bool_tree(rng, nvars, depth - 1)),
                Box::new(random_bool_tree(rng, nvars, depth - 1)),
            ),
        }
    }

    #[test]
    fn instrumented_runs_respect_the_height_size_bound() {
        // The Lemma-style monitor is part of every instrumented run; a small
        // batch here pins the assertion path itself.
        for seed in 0..10 {
            let gcfg = gen::GenConfig::new(16, 2, gen::Shape::Md, 60 + seed);
            let (c, td) = gen::gen_instance(&gcfg);
            let p = prepare(&c, &td);
            let (_, stats) = traceback_instrumented(&p, &md_cfg()).unwrap();
            assert!(stats.max_term_size.to_u64().is_some());
        }
    }
}

//! Sparse multivariate polynomials and the brute-force expansion oracle.
//!
//! Expansion is exponential and only meant for small circuits; it is the
//! reference the transformation pipeline is tested against.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::circuit::{Circuit, Label};
use crate::field::FieldSpec;

/// Placeholder leaves expand to variables with this prefix.
pub const Z_PREFIX: &str = "z_";

/// Name of the expansion variable standing for gate `gate`.
pub fn z_var_name(gate: &str) -> String {
    format!("{Z_PREFIX}{gate}")
}

/// A power product with positive exponents, e.g. `x^2*y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    exps: BTreeMap<String, u32>,
}

impl Monomial {
    pub fn one() -> Monomial {
        Monomial { exps: BTreeMap::new() }
    }

    pub fn var(name: &str) -> Monomial {
        Monomial { exps: BTreeMap::from([(name.to_string(), 1)]) }
    }

    pub fn from_map(mut exps: BTreeMap<String, u32>) -> Monomial {
        exps.retain(|_, e| *e > 0);
        Monomial { exps }
    }

    pub fn exponents(&self) -> &BTreeMap<String, u32> {
        &self.exps
    }

    pub fn degree(&self) -> u64 {
        self.exps.values().map(|&e| e as u64).sum()
    }

    pub fn exponent(&self, var: &str) -> u32 {
        self.exps.get(var).copied().unwrap_or(0)
    }

    pub fn is_one(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        let mut exps = self.exps.clone();
        for (v, e) in &other.exps {
            *exps.entry(v.clone()).or_insert(0) += e;
        }
        Monomial { exps }
    }

    pub fn is_multilinear(&self) -> bool {
        self.exps.values().all(|&e| e == 1)
    }

    /// Remove the listed variables, returning the remainder and the dropped part.
    pub fn split(&self, take: impl Fn(&str) -> bool) -> (Monomial, Monomial) {
        let mut kept = BTreeMap::new();
        let mut dropped = BTreeMap::new();
        for (v, e) in &self.exps {
            if take(v) {
                dropped.insert(v.clone(), *e);
            } else {
                kept.insert(v.clone(), *e);
            }
        }
        (Monomial { exps: kept }, Monomial { exps: dropped })
    }
}

/// Graded lexicographic: higher total degree first; ties broken at the first
/// variable (by name) where the exponents differ, larger exponent first.
impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use std::cmp::Ordering;
        match self.degree().cmp(&other.degree()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        let mut a = self.exps.iter();
        let mut b = other.exps.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ordering::Equal,
                // Exhausted side has exponent 0 on the other's variable, so
                // the other side is larger at that variable.
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some((va, ea)), Some((vb, eb))) => {
                    match va.cmp(vb) {
                        // Smaller variable name with nonzero exponent wins.
                        Ordering::Less => return Ordering::Greater,
                        Ordering::Greater => return Ordering::Less,
                        Ordering::Equal => match ea.cmp(eb) {
                            Ordering::Equal => continue,
                            ord => return ord,
                        },
                    }
                }
            }
        }
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Monomial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.exps.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .exps
            .iter()
            .map(|(v, e)| if *e == 1 { v.clone() } else { format!("{v}^{e}") })
            .collect();
        write!(f, "{}", parts.join("*"))
    }
}

/// Polynomial as a monomial-to-coefficient map. When `modulus` is set every
/// coefficient is kept reduced to `0..modulus`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePolynomial {
    terms: BTreeMap<Monomial, BigInt>,
    modulus: Option<u64>,
}

impl SparsePolynomial {
    pub fn zero(modulus: Option<u64>) -> SparsePolynomial {
        SparsePolynomial { terms: BTreeMap::new(), modulus }
    }

    pub fn constant(v: BigInt, modulus: Option<u64>) -> SparsePolynomial {
        let mut p = SparsePolynomial::zero(modulus);
        p.add_term(Monomial::one(), v);
        p
    }

    pub fn variable(name: &str, modulus: Option<u64>) -> SparsePolynomial {
        let mut p = SparsePolynomial::zero(modulus);
        p.add_term(Monomial::var(name), BigInt::one());
        p
    }

    pub fn modulus(&self) -> Option<u64> {
        self.modulus
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &BigInt)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn reduce(&self, v: BigInt) -> BigInt {
        match self.modulus {
            Some(m) => {
                let m = BigInt::from(m);
                let r = v % &m;
                if r.is_negative() {
                    r + m
                } else {
                    r
                }
            }
            None => v,
        }
    }

    pub fn add_term(&mut self, m: Monomial, c: BigInt) {
        let cur = self.terms.remove(&m).unwrap_or_else(BigInt::zero);
        let v = self.reduce(cur + c);
        if !v.is_zero() {
            self.terms.insert(m, v);
        }
    }

    pub fn add(&self, other: &SparsePolynomial) -> SparsePolynomial {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn neg(&self) -> SparsePolynomial {
        let mut out = SparsePolynomial::zero(self.modulus);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), -c);
        }
        out
    }

    pub fn sub(&self, other: &SparsePolynomial) -> SparsePolynomial {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &SparsePolynomial) -> SparsePolynomial {
        let mut out = SparsePolynomial::zero(self.modulus);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn scale(&self, k: &BigInt) -> SparsePolynomial {
        let mut out = SparsePolynomial::zero(self.modulus);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * k);
        }
        out
    }

    pub fn total_degree(&self) -> u64 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.terms
            .keys()
            .flat_map(|m| m.exponents().keys().cloned())
            .collect()
    }

    pub fn is_multilinear(&self) -> bool {
        self.terms.keys().all(Monomial::is_multilinear)
    }

    /// Multilinear restricted to variables selected by `pred`.
    pub fn is_multilinear_in(&self, pred: impl Fn(&str) -> bool) -> bool {
        self.terms
            .keys()
            .all(|m| m.exponents().iter().all(|(v, e)| !pred(v) || *e == 1))
    }

    /// Coefficient of the exact monomial.
    pub fn coefficient(&self, m: &Monomial) -> BigInt {
        self.terms.get(m).cloned().unwrap_or_else(BigInt::zero)
    }

    /// Collect all terms whose restriction to `pred`-variables equals `part`,
    /// as a polynomial in the remaining variables.
    pub fn coefficient_poly(&self, part: &Monomial, pred: impl Fn(&str) -> bool) -> SparsePolynomial {
        let mut out = SparsePolynomial::zero(self.modulus);
        for (m, c) in &self.terms {
            let (rest, dropped) = m.split(&pred);
            if dropped == *part {
                out.add_term(rest, c.clone());
            }
        }
        out
    }

    pub fn evaluate(&self, assignment: &BTreeMap<String, BigInt>) -> Result<BigInt, PolyError> {
        let mut acc = BigInt::zero();
        for (m, c) in &self.terms {
            let mut t = c.clone();
            for (v, e) in m.exponents() {
                let val = assignment
                    .get(v)
                    .ok_or_else(|| PolyError::MissingVariable(v.clone()))?;
                t *= val.pow(*e);
            }
            acc += t;
        }
        Ok(self.reduce(acc))
    }
}

impl std::fmt::Display for SparsePolynomial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        // Descending monomial order reads naturally.
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if m.is_one() {
                write!(f, "{c}")?;
            } else if c.is_one() {
                write!(f, "{m}")?;
            } else {
                write!(f, "{c}*{m}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolyError {
    #[error("term budget of {0} exceeded while expanding")]
    Budget(usize),
    #[error("no value for variable {0}")]
    MissingVariable(String),
    #[error("expansion of boolean circuits is defined over GF(2) only")]
    BooleanNeedsGf2,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpandOptions {
    /// Abort when any intermediate polynomial exceeds this many terms.
    pub max_terms: usize,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions { max_terms: 100_000 }
    }
}

/// Expand a circuit into its polynomial, gate by gate in topological order.
///
/// Placeholder leaves become `z_<gate>` variables. Boolean circuits expand
/// over GF(2) (and = mul, or = a+b+ab, not = 1+a), so `field` must be `Gf2`
/// for them. Arithmetic circuits accept any field spec; coefficients are
/// reduced modulo the field size when one is given.
pub fn expand(c: &Circuit, field: &FieldSpec, opts: ExpandOptions) -> Result<SparsePolynomial, PolyError> {
    use crate::circuit::CircuitKind;
    if c.kind() == CircuitKind::Boolean && *field != FieldSpec::Gf2 {
        return Err(PolyError::BooleanNeedsGf2);
    }
    let modulus = field.modulus();
    let live = c.live_gates();
    let mut polys: Vec<Option<SparsePolynomial>> = vec![None; c.size_total()];
    for (i, g) in c.gates().iter().enumerate() {
        if !live.contains(i) {
            continue;
        }
        let p = match &g.label {
            Label::Input(x) => SparsePolynomial::variable(x, modulus),
            Label::ZPlaceholder(z) => SparsePolynomial::variable(&z_var_name(z), modulus),
            Label::Const(v) => SparsePolynomial::constant(v.clone(), modulus),
            Label::Add => {
                let a = polys[g.inputs[0].index()].as_ref().unwrap();
                if g.inputs.len() == 1 {
                    a.clone()
                } else {
                    a.add(polys[g.inputs[1].index()].as_ref().unwrap())
                }
            }
            Label::Mul | Label::And => {
                let a = polys[g.inputs[0].index()].as_ref().unwrap();
                let b = polys[g.inputs[1].index()].as_ref().unwrap();
                a.mul(b)
            }
            Label::Or => {
                let a = polys[g.inputs[0].index()].as_ref().unwrap();
                let b = polys[g.inputs[1].index()].as_ref().unwrap();
                a.add(b).add(&a.mul(b))
            }
            Label::Not => {
                let a = polys[g.inputs[0].index()].as_ref().unwrap();
                SparsePolynomial::constant(BigInt::one(), modulus).add(a)
            }
        };
        if p.num_terms() > opts.max_terms {
            return Err(PolyError::Budget(opts.max_terms));
        }
        polys[i] = Some(p);
    }
    Ok(polys[c.output().index()].take().unwrap())
}

/// Exact equality of the two expansions over the given field.
pub fn equiv_exact(a: &Circuit, b: &Circuit, field: &FieldSpec, opts: ExpandOptions) -> Result<bool, PolyError> {
    let pa = expand(a, field, opts)?;
    let pb = expand(b, field, opts)?;
    Ok(pa == pb)
}

/// Randomized equivalence over GF(p): evaluates both circuits at uniform
/// points. `p` must exceed twice the larger formal degree for the standard
/// error bound to apply; the check is one-sided (false means inequivalent).
pub fn equiv_random(a: &Circuit, b: &Circuit, p: u64, trials: u32, seed: u64) -> Result<bool, PolyError> {
    let field = FieldSpec::gfp(p).expect("prime modulus");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vars: BTreeSet<String> = a.variables();
    vars.extend(b.variables());
    for _ in 0..trials {
        let assignment: BTreeMap<String, BigInt> = vars
            .iter()
            .map(|v| (v.clone(), BigInt::from(rng.gen_range(0..p))))
            .collect();
        let va = a
            .evaluate_with_z(&assignment, &field)
            .map_err(|e| PolyError::MissingVariable(e.to_string()))?;
        let vb = b
            .evaluate_with_z(&assignment, &field)
            .map_err(|e| PolyError::MissingVariable(e.to_string()))?;
        if va != vb {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Degree bound that decides whether `p` is large enough for `equiv_random`:
/// twice the max formal degree, saturating.
pub fn random_equiv_min_modulus(a: &Circuit, b: &Circuit) -> u128 {
    a.formal_degree().max(b.formal_degree()).saturating_mul(2)
}

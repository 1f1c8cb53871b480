//! The exact coefficient algebra on a chart: fractions of polynomials in the
//! coordinates `z¹..zᵐ, z̄¹..z̄ᵐ` and user-declared atoms, closed under the
//! chart partials.
//!
//! Atoms carry prescribed derivative rules (polynomials in coordinates and
//! atoms), which lets transcendental generators such as `log(1+zz̄)` or
//! `(1+zz̄)⁻¹` live inside an exact fraction field. Optional algebraic side
//! relations between atoms are applied during canonicalization, so zero
//! testing is decided by normal form modulo the relation ideal.

use crate::poly::{Mono, Poly};
use crate::scalar::Scalar;
use crate::window::Trunc;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoeffError {
    ZeroInverse,
    InconsistentRules(String),
    SingularMetric,
}

impl fmt::Display for CoeffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoeffError::ZeroInverse => write!(f, "inverse of zero element"),
            CoeffError::InconsistentRules(m) => write!(f, "inconsistent derivation rules: {}", m),
            CoeffError::SingularMetric => write!(f, "metric not invertible in the fraction field"),
        }
    }
}

impl std::error::Error for CoeffError {}

/// A declared transcendental generator with its partial derivatives.
#[derive(Debug, Clone)]
pub struct AtomDef {
    pub name: String,
    /// ∂atom/∂z^k as polynomials in coordinates and atoms.
    pub dz: Vec<Poly>,
    /// ∂atom/∂z̄^l.
    pub dzbar: Vec<Poly>,
}

/// Shared chart context: complex dimension, atoms, relation ideal.
#[derive(Debug)]
pub struct Chart {
    pub m: usize,
    pub atoms: Vec<AtomDef>,
    /// Relation polynomials, each a Gröbner basis element of the side-relation
    /// ideal (reduced, deterministic order).
    pub relations: Vec<Poly>,
    /// Global truncation caps for windowed series on this chart.
    pub trunc: Trunc,
}

impl Chart {
    pub fn nvars(&self) -> usize {
        2 * self.m + self.atoms.len()
    }

    pub fn z_var(&self, k: usize) -> usize {
        debug_assert!(k < self.m);
        k
    }

    pub fn zbar_var(&self, l: usize) -> usize {
        debug_assert!(l < self.m);
        self.m + l
    }

    pub fn atom_var(&self, j: usize) -> usize {
        2 * self.m + j
    }

    pub fn var_name(&self, v: usize) -> String {
        if v < self.m {
            if self.m == 1 {
                "z".into()
            } else {
                format!("z{}", v + 1)
            }
        } else if v < 2 * self.m {
            if self.m == 1 {
                "zb".into()
            } else {
                format!("zb{}", v - self.m + 1)
            }
        } else {
            self.atoms[v - 2 * self.m].name.clone()
        }
    }

    /// Build a chart, completing the relation set to a Gröbner basis and
    /// checking that the derivation rules are mutually consistent and
    /// compatible with the relations.
    pub fn new(m: usize, atoms: Vec<AtomDef>, relations: Vec<Poly>) -> Result<Arc<Chart>, CoeffError> {
        let chart = Arc::new(Chart {
            m,
            atoms,
            relations: groebner(relations),
            trunc: Trunc::unbounded(),
        });
        chart.check_consistency()?;
        Ok(chart)
    }

    /// Same chart with different truncation caps.
    pub fn with_trunc(self: &Arc<Chart>, trunc: Trunc) -> Arc<Chart> {
        Arc::new(Chart {
            m: self.m,
            atoms: self.atoms.clone(),
            relations: self.relations.clone(),
            trunc,
        })
    }

    fn check_consistency(self: &Arc<Chart>) -> Result<(), CoeffError> {
        for (j, atom) in self.atoms.iter().enumerate() {
            if atom.dz.len() != self.m || atom.dzbar.len() != self.m {
                return Err(CoeffError::InconsistentRules(format!(
                    "atom {} has wrong rule arity",
                    atom.name
                )));
            }
            // mixed partials commute: ∂_k ∂̄_l atom = ∂̄_l ∂_k atom
            for k in 0..self.m {
                for l in 0..self.m {
                    let a = CoeffExpr::from_poly(self.clone(), atom.dz[k].clone())
                        .partial_zbar(l);
                    let b = CoeffExpr::from_poly(self.clone(), atom.dzbar[l].clone())
                        .partial_z(k);
                    if !a.sub(&b).is_zero() {
                        return Err(CoeffError::InconsistentRules(format!(
                            "atom {}: mixed partials differ at (z{}, zb{})",
                            atom.name,
                            k + 1,
                            l + 1
                        )));
                    }
                }
            }
            let _ = j;
        }
        // relations must be differential: d(rel) ≡ 0 mod ideal
        for rel in &self.relations {
            for k in 0..self.m {
                let d = CoeffExpr::from_poly(self.clone(), rel.clone()).partial_z(k);
                if !d.is_zero() {
                    return Err(CoeffError::InconsistentRules(
                        "relation not closed under holomorphic derivative".into(),
                    ));
                }
                let d = CoeffExpr::from_poly(self.clone(), rel.clone()).partial_zbar(k);
                if !d.is_zero() {
                    return Err(CoeffError::InconsistentRules(
                        "relation not closed under antiholomorphic derivative".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Buchberger completion. Relation sets here are tiny (usually one element),
/// so the plain algorithm with full reduction suffices.
fn groebner(mut basis: Vec<Poly>) -> Vec<Poly> {
    basis.retain(|p| !p.is_zero());
    for p in basis.iter_mut() {
        *p = p.monic();
    }
    let mut changed = true;
    while changed {
        changed = false;
        let n = basis.len();
        'pairs: for i in 0..n {
            for j in (i + 1)..n {
                let s = s_poly(&basis[i], &basis[j]);
                let r = s.reduce(&basis);
                if !r.is_zero() {
                    basis.push(r.monic());
                    changed = true;
                    break 'pairs;
                }
            }
        }
    }
    // inter-reduce
    let mut reduced: Vec<Poly> = Vec::new();
    for i in 0..basis.len() {
        let others: Vec<Poly> = basis
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| p.clone())
            .collect();
        let r = basis[i].reduce(&others);
        if !r.is_zero() {
            reduced.push(r.monic());
        }
    }
    reduced.sort_by(|a, b| a.leading().unwrap().0.cmp(b.leading().unwrap().0));
    reduced.dedup();
    reduced
}

fn s_poly(a: &Poly, b: &Poly) -> Poly {
    let (ma, ca) = a.leading().unwrap();
    let (mb, cb) = b.leading().unwrap();
    let lcm = Mono(
        ma.0.iter()
            .zip(&mb.0)
            .map(|(x, y)| *x.max(y))
            .collect::<Vec<_>>(),
    );
    let qa = lcm.div(ma).unwrap();
    let qb = lcm.div(mb).unwrap();
    a.mul_mono(&qa)
        .mul_scalar(&cb.inv())
        .sub(&b.mul_mono(&qb).mul_scalar(&ca.inv()))
}

/// An element of the fraction field of the chart's polynomial ring, reduced
/// modulo the relation ideal and by gcd.
#[derive(Clone)]
pub struct CoeffExpr {
    pub chart: Arc<Chart>,
    pub num: Poly,
    pub den: Poly,
}

impl CoeffExpr {
    pub fn from_poly(chart: Arc<Chart>, num: Poly) -> Self {
        let den = Poly::one(chart.nvars());
        CoeffExpr { chart, num, den }.canonical()
    }

    pub fn zero(chart: Arc<Chart>) -> Self {
        let nv = chart.nvars();
        CoeffExpr {
            chart,
            num: Poly::zero(nv),
            den: Poly::one(nv),
        }
    }

    pub fn one(chart: Arc<Chart>) -> Self {
        Self::scalar(chart, Scalar::one())
    }

    pub fn scalar(chart: Arc<Chart>, c: Scalar) -> Self {
        let nv = chart.nvars();
        CoeffExpr {
            chart,
            num: Poly::constant(nv, c),
            den: Poly::one(nv),
        }
    }

    pub fn var(chart: Arc<Chart>, v: usize) -> Self {
        let nv = chart.nvars();
        CoeffExpr {
            chart,
            num: Poly::var(nv, v),
            den: Poly::one(nv),
        }
    }

    pub fn z(chart: Arc<Chart>, k: usize) -> Self {
        let v = chart.z_var(k);
        Self::var(chart, v)
    }

    pub fn zbar(chart: Arc<Chart>, l: usize) -> Self {
        let v = chart.zbar_var(l);
        Self::var(chart, v)
    }

    pub fn atom(chart: Arc<Chart>, j: usize) -> Self {
        let v = chart.atom_var(j);
        Self::var(chart, v)
    }

    fn canonical(mut self) -> Self {
        self.num = self.num.reduce(&self.chart.relations);
        self.den = self.den.reduce(&self.chart.relations);
        assert!(!self.den.is_zero(), "denominator reduced to zero");
        if self.num.is_zero() {
            self.den = Poly::one(self.chart.nvars());
            return self;
        }
        // clear relation-invertible atoms from the denominator: a relation of
        // the shape atom·p - 1 lets us trade atom powers for p powers
        loop {
            let mut progressed = false;
            for rel in &self.chart.relations {
                if let Some((av, p)) = invertible_atom_pattern(rel) {
                    let e = self.den.degree_in(av);
                    if e > 0 {
                        let factor = p.pow(e);
                        self.num = self.num.mul(&factor).reduce(&self.chart.relations);
                        self.den = self.den.mul(&factor).reduce(&self.chart.relations);
                        progressed = true;
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        let g = self.num.gcd(&self.den);
        if !g.is_constant() {
            self.num = self.num.exact_div(&g).expect("gcd divides numerator");
            self.den = self.den.exact_div(&g).expect("gcd divides denominator");
        }
        // monic denominator for a deterministic representative
        let lc = self.den.leading().unwrap().1.clone();
        if !lc.is_one() {
            let inv = lc.inv();
            self.num = self.num.mul_scalar(&inv);
            self.den = self.den.mul_scalar(&inv);
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.sub(&CoeffExpr::one(self.chart.clone())).is_zero()
    }

    pub fn as_scalar(&self) -> Option<Scalar> {
        if self.den.is_constant() {
            if let (Some(n), Some(d)) = (self.num.as_constant(), self.den.as_constant()) {
                return Some(&n / &d);
            }
        }
        None
    }

    pub fn add(&self, other: &CoeffExpr) -> CoeffExpr {
        CoeffExpr {
            chart: self.chart.clone(),
            num: self.num.mul(&other.den).add(&other.num.mul(&self.den)),
            den: self.den.mul(&other.den),
        }
        .canonical()
    }

    pub fn sub(&self, other: &CoeffExpr) -> CoeffExpr {
        CoeffExpr {
            chart: self.chart.clone(),
            num: self.num.mul(&other.den).sub(&other.num.mul(&self.den)),
            den: self.den.mul(&other.den),
        }
        .canonical()
    }

    pub fn neg(&self) -> CoeffExpr {
        CoeffExpr {
            chart: self.chart.clone(),
            num: self.num.neg(),
            den: self.den.clone(),
        }
    }

    pub fn mul(&self, other: &CoeffExpr) -> CoeffExpr {
        CoeffExpr {
            chart: self.chart.clone(),
            num: self.num.mul(&other.num),
            den: self.den.mul(&other.den),
        }
        .canonical()
    }

    pub fn mul_scalar(&self, c: &Scalar) -> CoeffExpr {
        CoeffExpr {
            chart: self.chart.clone(),
            num: self.num.mul_scalar(c),
            den: self.den.clone(),
        }
        .canonical()
    }

    pub fn div(&self, other: &CoeffExpr) -> Result<CoeffExpr, CoeffError> {
        Ok(self.mul(&other.invert()?))
    }

    pub fn invert(&self) -> Result<CoeffExpr, CoeffError> {
        if self.is_zero() {
            return Err(CoeffError::ZeroInverse);
        }
        Ok(CoeffExpr {
            chart: self.chart.clone(),
            num: self.den.clone(),
            den: self.num.clone(),
        }
        .canonical())
    }

    pub fn pow(&self, e: u32) -> CoeffExpr {
        let mut acc = CoeffExpr::one(self.chart.clone());
        for _ in 0..e {
            acc = acc.mul(self);
        }
        acc
    }

    /// Chart partial ∂/∂z^k with atom chain rules applied.
    pub fn partial_z(&self, k: usize) -> CoeffExpr {
        self.partial_var(self.chart.z_var(k), true, k)
    }

    /// Chart partial ∂/∂z̄^l with atom chain rules applied.
    pub fn partial_zbar(&self, l: usize) -> CoeffExpr {
        self.partial_var(self.chart.zbar_var(l), false, l)
    }

    fn partial_var(&self, coord_var: usize, holomorphic: bool, idx: usize) -> CoeffExpr {
        let chart = &self.chart;
        let dpoly = |p: &Poly| -> Poly {
            let mut d = p.derivative(coord_var);
            for (j, atom) in chart.atoms.iter().enumerate() {
                let dv = p.derivative(chart.atom_var(j));
                if dv.is_zero() {
                    continue;
                }
                let rule = if holomorphic {
                    &atom.dz[idx]
                } else {
                    &atom.dzbar[idx]
                };
                d = d.add(&dv.mul(rule));
            }
            d
        };
        let dn = dpoly(&self.num);
        let dd = dpoly(&self.den);
        CoeffExpr {
            chart: self.chart.clone(),
            num: dn.mul(&self.den).sub(&self.num.mul(&dd)),
            den: self.den.mul(&self.den),
        }
        .canonical()
    }

    /// Equality as functions, i.e. modulo relations.
    pub fn equal(&self, other: &CoeffExpr) -> bool {
        self.sub(other).is_zero()
    }
}

impl PartialEq for CoeffExpr {
    fn eq(&self, other: &Self) -> bool {
        self.equal(other)
    }
}

impl Eq for CoeffExpr {}

/// Detect a relation of the form `atom·p − 1` (with `p` free of `atom`);
/// returns the atom's variable index and `p`.
fn invertible_atom_pattern(rel: &Poly) -> Option<(usize, Poly)> {
    let nv = rel.terms.keys().next()?.0.len();
    let one = Mono::unit(nv);
    let c0 = rel.terms.get(&one)?;
    if !(-c0).is_one() {
        return None;
    }
    // rel + 1 should factor as atom * p
    let rest = rel.sub(&Poly::constant(nv, -Scalar::one()));
    let mut atom_var = None;
    for (m, _) in &rest.terms {
        // find a variable present in every term exactly once
        for v in 0..nv {
            if m.0[v] == 1 {
                if rest.terms.keys().all(|mm| mm.0[v] == 1) {
                    atom_var = Some(v);
                    break;
                }
            }
        }
        break;
    }
    let v = atom_var?;
    let mut p = Poly::zero(nv);
    for (m, c) in &rest.terms {
        let mut m2 = m.clone();
        m2.0[v] = 0;
        p = p.add(&Poly::monomial(nv, m2, c.clone()));
    }
    if p.degree_in(v) > 0 {
        return None;
    }
    Some((v, p))
}

impl fmt::Display for CoeffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |p: &Poly, f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if p.is_zero() {
                return write!(f, "0");
            }
            let mut first = true;
            for (m, c) in p.terms.iter().rev() {
                if !first {
                    write!(f, " + ")?;
                }
                first = false;
                if m.is_unit() {
                    write!(f, "{}", c)?;
                    continue;
                }
                if c.is_one() {
                } else if (-c).is_one() {
                    write!(f, "-")?;
                } else {
                    write!(f, "({})*", c)?;
                }
                let mut firstv = true;
                for (v, &e) in m.0.iter().enumerate() {
                    if e == 0 {
                        continue;
                    }
                    if !firstv {
                        write!(f, "*")?;
                    }
                    firstv = false;
                    write!(f, "{}", self.chart.var_name(v))?;
                    if e > 1 {
                        write!(f, "^{}", e)?;
                    }
                }
            }
            Ok(())
        };
        if self.den.is_constant() && self.den.as_constant().map(|c| c.is_one()).unwrap_or(false) {
            show(&self.num, f)
        } else {
            write!(f, "(")?;
            show(&self.num, f)?;
            write!(f, ")/(")?;
            show(&self.den, f)?;
            write!(f, ")")
        }
    }
}

impl fmt::Debug for CoeffExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Chart of ℂP¹ in an affine coordinate: atoms u ≅ (1+zz̄)⁻¹ and
    /// L ≅ log(1+zz̄), with the side relation u(1+zz̄) = 1.
    pub fn cp1_chart() -> Arc<Chart> {
        let nv = 4; // z, zb, u, L
        let z = Poly::var(nv, 0);
        let zb = Poly::var(nv, 1);
        let u = Poly::var(nv, 2);
        let u2 = u.mul(&u);
        let atoms = vec![
            AtomDef {
                name: "u".into(),
                dz: vec![zb.mul(&u2).neg()],
                dzbar: vec![z.mul(&u2).neg()],
            },
            AtomDef {
                name: "L".into(),
                dz: vec![zb.mul(&u)],
                dzbar: vec![z.mul(&u)],
            },
        ];
        let rel = u
            .mul(&Poly::one(nv).add(&z.mul(&zb)))
            .sub(&Poly::one(nv));
        Chart::new(1, atoms, vec![rel]).unwrap()
    }

    fn flat_chart() -> Arc<Chart> {
        Chart::new(1, vec![], vec![]).unwrap()
    }

    #[test]
    fn polynomial_partial() {
        let ch = flat_chart();
        let z = CoeffExpr::z(ch.clone(), 0);
        let zb = CoeffExpr::zbar(ch.clone(), 0);
        let e = z.mul(&z).mul(&zb); // z² z̄
        let d = e.partial_z(0);
        assert!(d.equal(&z.mul(&zb).mul_scalar(&Scalar::from_int(2))));
    }

    #[test]
    fn atom_chain_rule() {
        let ch = cp1_chart();
        let u = CoeffExpr::atom(ch.clone(), 0);
        let zb = CoeffExpr::zbar(ch.clone(), 0);
        // ∂(u²)/∂z = 2u·(−z̄u²) = −2z̄u³
        let d = u.mul(&u).partial_z(0);
        let expect = zb
            .mul(&u.pow(3))
            .mul_scalar(&Scalar::from_int(-2));
        assert!(d.equal(&expect));
    }

    #[test]
    fn log_atom_rule() {
        let ch = cp1_chart();
        let el = CoeffExpr::atom(ch.clone(), 1);
        let z = CoeffExpr::z(ch.clone(), 0);
        let u = CoeffExpr::atom(ch.clone(), 0);
        assert!(el.partial_zbar(0).equal(&z.mul(&u)));
    }

    #[test]
    fn relation_zero_test() {
        let ch = cp1_chart();
        let u = CoeffExpr::atom(ch.clone(), 0);
        let z = CoeffExpr::z(ch.clone(), 0);
        let zb = CoeffExpr::zbar(ch.clone(), 0);
        let one = CoeffExpr::one(ch.clone());
        let opz = one.add(&z.mul(&zb));
        assert!(u.mul(&opz).sub(&one).is_zero());
        assert!(!z.sub(&zb).is_zero());
        // invert(1+zz̄) reduces to u modulo the relation
        let inv = opz.invert().unwrap();
        assert!(inv.equal(&u));
    }

    #[test]
    fn invert_errors_on_zero() {
        let ch = flat_chart();
        let z = CoeffExpr::z(ch.clone(), 0);
        let zero = z.sub(&z);
        assert_eq!(zero.invert().unwrap_err(), CoeffError::ZeroInverse);
    }

    #[test]
    fn mixed_partials_commute() {
        let ch = cp1_chart();
        let u = CoeffExpr::atom(ch.clone(), 0);
        let el = CoeffExpr::atom(ch.clone(), 1);
        let z = CoeffExpr::z(ch.clone(), 0);
        let e = u.mul(&el).add(&z.mul(&u.pow(2)));
        let a = e.partial_z(0).partial_zbar(0);
        let b = e.partial_zbar(0).partial_z(0);
        assert!(a.equal(&b));
    }

    #[test]
    fn inconsistent_rules_detected() {
        // ∂a/∂z = z̄, ∂a/∂z̄ = 0 has non-commuting mixed partials
        let nv = 3;
        let zb = Poly::var(nv, 1);
        let atoms = vec![AtomDef {
            name: "a".into(),
            dz: vec![zb],
            dzbar: vec![Poly::zero(nv)],
        }];
        let err = Chart::new(1, atoms, vec![]).unwrap_err();
        match err {
            CoeffError::InconsistentRules(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }
}

//! Sparse multivariate polynomials over Gaussian rationals.
//!
//! Monomials use a fixed variable count per chart with graded-lex ordering,
//! which keeps serialization and pivot choices deterministic. The gcd is a
//! recursive subresultant PRS, enough for the modest degrees this engine
//! produces.

use crate::scalar::Scalar;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

/// Exponent vector of a monomial. All polynomials of a chart share `nvars`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mono(pub Vec<u32>);

impl Mono {
    pub fn unit(nvars: usize) -> Self {
        Mono(vec![0; nvars])
    }

    pub fn var(nvars: usize, v: usize) -> Self {
        let mut e = vec![0; nvars];
        e[v] = 1;
        Mono(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_unit(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Mono) -> Mono {
        Mono(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// Componentwise division; `None` if any exponent would go negative.
    pub fn div(&self, other: &Mono) -> Option<Mono> {
        let mut out = Vec::with_capacity(self.0.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            if a < b {
                return None;
            }
            out.push(a - b);
        }
        Some(Mono(out))
    }
}

impl Ord for Mono {
    fn cmp(&self, other: &Self) -> Ordering {
        // graded lex
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Mono {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Poly {
    pub nvars: usize,
    pub terms: BTreeMap<Mono, Scalar>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Poly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: Scalar) -> Self {
        let mut p = Poly::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(Mono::unit(nvars), c);
        }
        p
    }

    pub fn one(nvars: usize) -> Self {
        Poly::constant(nvars, Scalar::one())
    }

    pub fn var(nvars: usize, v: usize) -> Self {
        let mut p = Poly::zero(nvars);
        p.terms.insert(Mono::var(nvars, v), Scalar::one());
        p
    }

    pub fn monomial(nvars: usize, m: Mono, c: Scalar) -> Self {
        let mut p = Poly::zero(nvars);
        if !c.is_zero() {
            p.terms.insert(m, c);
        }
        p
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.len() <= 1 && self.terms.keys().all(|m| m.is_unit())
    }

    pub fn as_constant(&self) -> Option<Scalar> {
        if self.is_zero() {
            return Some(Scalar::zero());
        }
        if self.is_constant() {
            return self.terms.values().next().cloned();
        }
        None
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    /// Degree in a single variable.
    pub fn degree_in(&self, v: usize) -> u32 {
        self.terms.keys().map(|m| m.0[v]).max().unwrap_or(0)
    }

    pub fn leading(&self) -> Option<(&Mono, &Scalar)> {
        self.terms.iter().next_back()
    }

    fn insert_add(&mut self, m: Mono, c: Scalar) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                *e.get_mut() += &c;
                if e.get().is_zero() {
                    e.remove();
                }
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), -c);
        }
        out
    }

    pub fn neg(&self) -> Poly {
        Poly {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), -c)).collect(),
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = Poly::zero(self.nvars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.insert_add(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn mul_scalar(&self, c: &Scalar) -> Poly {
        if c.is_zero() {
            return Poly::zero(self.nvars);
        }
        Poly {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(m, v)| (m.clone(), v * c))
                .collect(),
        }
    }

    pub fn mul_mono(&self, m: &Mono) -> Poly {
        Poly {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .map(|(k, v)| (k.mul(m), v.clone()))
                .collect(),
        }
    }

    pub fn pow(&self, e: u32) -> Poly {
        let mut acc = Poly::one(self.nvars);
        for _ in 0..e {
            acc = acc.mul(self);
        }
        acc
    }

    /// Formal partial derivative treating every variable as independent.
    pub fn derivative(&self, v: usize) -> Poly {
        let mut out = Poly::zero(self.nvars);
        for (m, c) in &self.terms {
            let e = m.0[v];
            if e == 0 {
                continue;
            }
            let mut m2 = m.clone();
            m2.0[v] = e - 1;
            out.insert_add(m2, c * &Scalar::from_int(e as i64));
        }
        out
    }

    /// Reduce `self` modulo a list of polynomials (multivariate division,
    /// keeping only the remainder). With a single-generator ideal or a
    /// Gröbner basis this yields a canonical normal form.
    pub fn reduce(&self, basis: &[Poly]) -> Poly {
        if basis.is_empty() || self.is_zero() {
            return self.clone();
        }
        let mut rem = Poly::zero(self.nvars);
        let mut work = self.clone();
        'outer: while let Some((m, c)) = work.leading().map(|(m, c)| (m.clone(), c.clone())) {
            for b in basis {
                if let Some((bm, bc)) = b.leading() {
                    if let Some(q) = m.div(bm) {
                        // work -= (c/bc) * q * b
                        let factor = &c / bc;
                        let sub = b.mul_mono(&q).mul_scalar(&factor);
                        work = work.sub(&sub);
                        continue 'outer;
                    }
                }
            }
            // leading term irreducible: move to remainder
            work.terms.remove(&m);
            rem.insert_add(m, c);
        }
        rem
    }

    /// Exact division: returns `Some(q)` with `self = q·d` or `None`.
    pub fn exact_div(&self, d: &Poly) -> Option<Poly> {
        assert!(!d.is_zero(), "division by zero polynomial");
        let mut q = Poly::zero(self.nvars);
        let mut work = self.clone();
        let (dm, dc) = d.leading().map(|(m, c)| (m.clone(), c.clone())).unwrap();
        while let Some((m, c)) = work.leading().map(|(m, c)| (m.clone(), c.clone())) {
            let qm = m.div(&dm)?;
            let qc = &c / &dc;
            let t = Poly::monomial(self.nvars, qm, qc);
            work = work.sub(&t.mul(d));
            q = q.add(&t);
        }
        Some(q)
    }

    /// Substitute each variable by the given polynomial.
    pub fn substitute(&self, images: &[Poly]) -> Poly {
        assert_eq!(images.len(), self.nvars);
        let nv = images.first().map(|p| p.nvars).unwrap_or(self.nvars);
        let mut out = Poly::zero(nv);
        for (m, c) in &self.terms {
            let mut term = Poly::constant(nv, c.clone());
            for (v, &e) in m.0.iter().enumerate() {
                if e > 0 {
                    term = term.mul(&images[v].pow(e));
                }
            }
            out = out.add(&term);
        }
        out
    }

    /// Monic normalization: divide by the leading coefficient.
    pub fn monic(&self) -> Poly {
        match self.leading() {
            None => self.clone(),
            Some((_, c)) => {
                let inv = c.inv();
                self.mul_scalar(&inv)
            }
        }
    }

    // ---- univariate view helpers for the gcd ----

    /// Coefficients of `self` seen as a univariate polynomial in `v`; index =
    /// exponent of `v`, entries have exponent 0 in `v`.
    fn coeffs_in(&self, v: usize) -> Vec<Poly> {
        let d = self.degree_in(v) as usize;
        let mut out = vec![Poly::zero(self.nvars); d + 1];
        for (m, c) in &self.terms {
            let e = m.0[v] as usize;
            let mut m2 = m.clone();
            m2.0[v] = 0;
            out[e].insert_add(m2, c.clone());
        }
        out
    }

    /// gcd over ℚ(i)[x₁..xₙ], normalized monic.
    pub fn gcd(&self, other: &Poly) -> Poly {
        if self.is_zero() {
            return other.monic();
        }
        if other.is_zero() {
            return self.monic();
        }
        if self.is_constant() || other.is_constant() {
            return Poly::one(self.nvars);
        }
        // choose the present variable with smallest combined degree
        let mut best: Option<(usize, u32)> = None;
        for v in 0..self.nvars {
            let da = self.degree_in(v);
            let db = other.degree_in(v);
            if da > 0 || db > 0 {
                let w = da + db;
                if best.map(|(_, bw)| w < bw).unwrap_or(true) {
                    best = Some((v, w));
                }
            }
        }
        let v = best.unwrap().0;
        if self.degree_in(v) == 0 || other.degree_in(v) == 0 {
            // one operand free of v: gcd divides the content of the other
            let (with_v, without) = if self.degree_in(v) == 0 {
                (other, self)
            } else {
                (self, other)
            };
            let content = content_of(&with_v.coeffs_in(v));
            return content.gcd(without);
        }
        let g = gcd_in_var(self, other, v);
        g.monic()
    }
}

fn content_of(coeffs: &[Poly]) -> Poly {
    let mut g: Option<Poly> = None;
    for c in coeffs {
        if c.is_zero() {
            continue;
        }
        g = Some(match g {
            None => c.clone(),
            Some(prev) => prev.gcd(c),
        });
        if let Some(ref p) = g {
            if p.is_constant() {
                return Poly::one(c.nvars);
            }
        }
    }
    g.expect("content of zero polynomial")
}

/// Subresultant PRS gcd w.r.t. the main variable `v`.
fn gcd_in_var(a: &Poly, b: &Poly, v: usize) -> Poly {
    let ca = content_of(&a.coeffs_in(v));
    let cb = content_of(&b.coeffs_in(v));
    let cont_gcd = ca.gcd(&cb);
    let pa = a.exact_div(&ca).expect("content divides");
    let pb = b.exact_div(&cb).expect("content divides");

    let (mut r0, mut r1) = if pa.degree_in(v) >= pb.degree_in(v) {
        (pa, pb)
    } else {
        (pb, pa)
    };
    let nvars = r0.nvars;
    let mut g = Poly::one(nvars);
    let mut h = Poly::one(nvars);
    loop {
        let d0 = r0.degree_in(v);
        let d1 = r1.degree_in(v);
        let delta = d0 - d1;
        let rem = pseudo_rem(&r0, &r1, v);
        if rem.is_zero() {
            let pr1 = r1
                .exact_div(&content_of(&r1.coeffs_in(v)))
                .expect("content divides");
            return cont_gcd.mul(&pr1);
        }
        if rem.degree_in(v) == 0 {
            return cont_gcd;
        }
        // divisor g·h^delta per the subresultant scheme
        let mut div = g.clone();
        for _ in 0..delta {
            div = div.mul(&h);
        }
        let next = rem.exact_div(&div).expect("subresultant division is exact");
        r0 = r1;
        r1 = next;
        g = lead_coeff_in(&r0, v);
        // h = g^delta · h^(1-delta)  (delta ≥ 1 case: h = g^delta / h^(delta-1))
        h = if delta == 0 {
            h
        } else {
            let mut num = Poly::one(nvars);
            for _ in 0..delta {
                num = num.mul(&g);
            }
            let mut den = Poly::one(nvars);
            for _ in 0..delta.saturating_sub(1) {
                den = den.mul(&h);
            }
            num.exact_div(&den).expect("subresultant h update is exact")
        };
    }
}

fn lead_coeff_in(p: &Poly, v: usize) -> Poly {
    let coeffs = p.coeffs_in(v);
    coeffs.last().cloned().unwrap_or_else(|| Poly::zero(p.nvars))
}

/// Pseudo-remainder of `a` by `b` in variable `v`.
fn pseudo_rem(a: &Poly, b: &Poly, v: usize) -> Poly {
    let da = a.degree_in(v);
    let db = b.degree_in(v);
    assert!(db <= da && db > 0);
    let lb = lead_coeff_in(b, v);
    let mut rem = a.clone();
    // multiply upfront by lb^(da-db+1) and do exact steps
    let mut scale = Poly::one(a.nvars);
    for _ in 0..(da - db + 1) {
        scale = scale.mul(&lb);
    }
    rem = rem.mul(&scale);
    loop {
        let dr = rem.degree_in(v);
        if rem.is_zero() || dr < db {
            return rem;
        }
        let lr = lead_coeff_in(&rem, v);
        let q = lr.exact_div(&lb).expect("leading divides after scaling");
        let mut m = Mono::unit(a.nvars);
        m.0[v] = dr - db;
        rem = rem.sub(&q.mul_mono(&m).mul(b));
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({})", c)?;
            for (v, &e) in m.0.iter().enumerate() {
                if e == 1 {
                    write!(f, "*x{}", v)?;
                } else if e > 1 {
                    write!(f, "*x{}^{}", v, e)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(n: i64) -> Scalar {
        Scalar::from_int(n)
    }

    #[test]
    fn ring_ops() {
        let nv = 2;
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        let p = x.add(&y).mul(&x.sub(&y)); // x² - y²
        let q = x.mul(&x).sub(&y.mul(&y));
        assert_eq!(p, q);
        assert!(p.sub(&q).is_zero());
    }

    #[test]
    fn derivative_product_rule() {
        let nv = 2;
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        let p = x.mul(&x).mul(&y); // x²y
        assert_eq!(p.derivative(0), x.mul(&y).mul_scalar(&s(2)));
        assert_eq!(p.derivative(1), x.mul(&x));
    }

    #[test]
    fn exact_division() {
        let nv = 2;
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        let d = x.add(&y);
        let p = d.mul(&d).mul(&x);
        let q = p.exact_div(&d).unwrap();
        assert_eq!(q, d.mul(&x));
        assert!(x.exact_div(&y).is_none());
    }

    #[test]
    fn gcd_of_products() {
        let nv = 3;
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        let z = Poly::var(nv, 2);
        let f = x.add(&y); // x+y
        let g = x.mul(&z).add(&Poly::one(nv)); // xz+1
        let a = f.mul(&f).mul(&g);
        let b = f.mul(&g).mul(&g).mul(&y);
        let d = a.gcd(&b);
        // gcd = (x+y)(xz+1), monic
        let expected = f.mul(&g).monic();
        assert_eq!(d, expected);
    }

    #[test]
    fn gcd_coprime() {
        let nv = 2;
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        assert_eq!(x.gcd(&y), Poly::one(nv));
        let f = x.add(&Poly::one(nv));
        let g = y.mul(&y).add(&Poly::one(nv));
        assert_eq!(f.gcd(&g), Poly::one(nv));
    }

    #[test]
    fn reduce_single_relation() {
        // relation u·x·y + u - 1 encodes u = 1/(1+xy); check u²(1+xy)² → 1
        let nv = 3; // x, y, u
        let x = Poly::var(nv, 0);
        let y = Poly::var(nv, 1);
        let u = Poly::var(nv, 2);
        let rel = u.mul(&x).mul(&y).add(&u).sub(&Poly::one(nv));
        let one_plus = Poly::one(nv).add(&x.mul(&y));
        let p = u.mul(&u).mul(&one_plus).mul(&one_plus);
        let r = p.reduce(&[rel]);
        assert_eq!(r, Poly::one(nv));
    }
}

//! Fiberwise polynomial algebra on `TU ⊕ ΠTU`: even generators `η^k, η̄^l`
//! and odd generators `θ^k, θ̄^l` over the chart coefficient algebra.
//!
//! Odd monomials are normalized with strictly increasing index words
//! `θ^{i₁}…θ^{iₚ} θ̄^{j₁}…θ̄^{j_q}`; every reordering sign is tracked in the
//! coefficient. Odd index sets are bitmasks, so `m ≤ 32`.

use crate::coeff::{Chart, CoeffExpr};
use crate::scalar::Scalar;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// A monomial in the fiber variables.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct FiberMono {
    pub eta: Vec<u16>,
    pub etabar: Vec<u16>,
    pub theta: u32,
    pub thetabar: u32,
}

impl FiberMono {
    pub fn unit(m: usize) -> Self {
        FiberMono {
            eta: vec![0; m],
            etabar: vec![0; m],
            theta: 0,
            thetabar: 0,
        }
    }

    pub fn is_unit(&self) -> bool {
        self.theta == 0
            && self.thetabar == 0
            && self.eta.iter().all(|&e| e == 0)
            && self.etabar.iter().all(|&e| e == 0)
    }

    /// Total fiber degree (standard degree contribution of the monomial).
    pub fn degree(&self) -> i64 {
        self.eta.iter().map(|&e| e as i64).sum::<i64>()
            + self.etabar.iter().map(|&e| e as i64).sum::<i64>()
            + self.theta.count_ones() as i64
            + self.thetabar.count_ones() as i64
    }

    /// Holomorphic fiber degree: the `ℰ`-eigenvalue.
    pub fn hol_degree(&self) -> i64 {
        self.eta.iter().map(|&e| e as i64).sum::<i64>() + self.theta.count_ones() as i64
    }

    /// Antiholomorphic fiber degree: the `ℰ̄`-eigenvalue.
    pub fn antihol_degree(&self) -> i64 {
        self.etabar.iter().map(|&e| e as i64).sum::<i64>() + self.thetabar.count_ones() as i64
    }

    pub fn parity(&self) -> u8 {
        ((self.theta.count_ones() + self.thetabar.count_ones()) & 1) as u8
    }

    /// Product with Koszul sign; `None` when an odd generator repeats.
    pub fn mul(&self, other: &FiberMono) -> Option<(FiberMono, i32)> {
        if self.theta & other.theta != 0 || self.thetabar & other.thetabar != 0 {
            return None;
        }
        // word: θ_S θ̄_T · θ_U θ̄_V → move θ_U across θ̄_T, then merge
        let mut sign = if (self.thetabar.count_ones() * other.theta.count_ones()) & 1 == 1 {
            -1
        } else {
            1
        };
        sign *= merge_sign(self.theta, other.theta);
        sign *= merge_sign(self.thetabar, other.thetabar);
        let out = FiberMono {
            eta: self
                .eta
                .iter()
                .zip(&other.eta)
                .map(|(a, b)| a + b)
                .collect(),
            etabar: self
                .etabar
                .iter()
                .zip(&other.etabar)
                .map(|(a, b)| a + b)
                .collect(),
            theta: self.theta | other.theta,
            thetabar: self.thetabar | other.thetabar,
        };
        Some((out, sign))
    }
}

/// Sign of merging two disjoint ascending odd words `x`, `y` into one
/// ascending word: parity of the number of pairs `(a ∈ x, b ∈ y)` with `a > b`.
pub fn merge_sign(x: u32, y: u32) -> i32 {
    let mut inversions = 0u32;
    let mut yy = y;
    while yy != 0 {
        let b = yy.trailing_zeros();
        // bits of x strictly above b
        inversions += (x >> (b + 1)).count_ones();
        yy &= yy - 1;
    }
    if inversions & 1 == 1 {
        -1
    } else {
        1
    }
}

impl Ord for FiberMono {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.eta.cmp(&other.eta))
            .then_with(|| self.etabar.cmp(&other.etabar))
            .then_with(|| self.theta.cmp(&other.theta))
            .then_with(|| self.thetabar.cmp(&other.thetabar))
    }
}

impl PartialOrd for FiberMono {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Finitely supported map fiber monomial → coefficient.
#[derive(Clone)]
pub struct SuperPoly {
    pub chart: Arc<Chart>,
    pub terms: BTreeMap<FiberMono, CoeffExpr>,
}

impl SuperPoly {
    pub fn zero(chart: Arc<Chart>) -> Self {
        SuperPoly {
            chart,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_coeff(c: CoeffExpr) -> Self {
        let chart = c.chart.clone();
        let mut p = SuperPoly::zero(chart.clone());
        if !c.is_zero() {
            p.terms.insert(FiberMono::unit(chart.m), c);
        }
        p
    }

    pub fn one(chart: Arc<Chart>) -> Self {
        SuperPoly::from_coeff(CoeffExpr::one(chart))
    }

    pub fn monomial(m: FiberMono, c: CoeffExpr) -> Self {
        let chart = c.chart.clone();
        let mut p = SuperPoly::zero(chart);
        if !c.is_zero() {
            p.terms.insert(m, c);
        }
        p
    }

    pub fn eta(chart: Arc<Chart>, k: usize) -> Self {
        let mut m = FiberMono::unit(chart.m);
        m.eta[k] = 1;
        SuperPoly::monomial(m, CoeffExpr::one(chart))
    }

    pub fn etabar(chart: Arc<Chart>, l: usize) -> Self {
        let mut m = FiberMono::unit(chart.m);
        m.etabar[l] = 1;
        SuperPoly::monomial(m, CoeffExpr::one(chart))
    }

    pub fn theta(chart: Arc<Chart>, k: usize) -> Self {
        let mut m = FiberMono::unit(chart.m);
        m.theta = 1 << k;
        SuperPoly::monomial(m, CoeffExpr::one(chart))
    }

    pub fn thetabar(chart: Arc<Chart>, l: usize) -> Self {
        let mut m = FiberMono::unit(chart.m);
        m.thetabar = 1 << l;
        SuperPoly::monomial(m, CoeffExpr::one(chart))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// `Some(parity)` when all monomials share one parity, `None` when mixed.
    pub fn parity(&self) -> Option<u8> {
        let mut it = self.terms.keys();
        let first = it.next()?.parity();
        for m in it {
            if m.parity() != first {
                return None;
            }
        }
        Some(first)
    }

    pub fn insert_add(&mut self, m: FiberMono, c: CoeffExpr) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let s = e.get().add(&c);
                if s.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = s;
                }
            }
        }
    }

    pub fn add(&self, other: &SuperPoly) -> SuperPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &SuperPoly) -> SuperPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_add(m.clone(), c.neg());
        }
        out
    }

    pub fn neg(&self) -> SuperPoly {
        SuperPoly {
            chart: self.chart.clone(),
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c.neg())).collect(),
        }
    }

    pub fn mul(&self, other: &SuperPoly) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                if let Some((m, sign)) = ma.mul(mb) {
                    let mut c = ca.mul(cb);
                    if sign < 0 {
                        c = c.neg();
                    }
                    out.insert_add(m, c);
                }
            }
        }
        out
    }

    pub fn mul_coeff(&self, c: &CoeffExpr) -> SuperPoly {
        if c.is_zero() {
            return SuperPoly::zero(self.chart.clone());
        }
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, v) in &self.terms {
            out.insert_add(m.clone(), v.mul(c));
        }
        out
    }

    pub fn mul_scalar(&self, s: &Scalar) -> SuperPoly {
        if s.is_zero() {
            return SuperPoly::zero(self.chart.clone());
        }
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, v) in &self.terms {
            out.insert_add(m.clone(), v.mul_scalar(s));
        }
        out
    }

    /// Base partial `∂/∂z^k` applied to every coefficient.
    pub fn partial_z(&self, k: usize) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            out.insert_add(m.clone(), c.partial_z(k));
        }
        out
    }

    pub fn partial_zbar(&self, l: usize) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            out.insert_add(m.clone(), c.partial_zbar(l));
        }
        out
    }

    /// `∂/∂η^k`.
    pub fn d_eta(&self, k: usize) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.eta[k];
            if e == 0 {
                continue;
            }
            let mut m2 = m.clone();
            m2.eta[k] = e - 1;
            out.insert_add(m2, c.mul_scalar(&Scalar::from_int(e as i64)));
        }
        out
    }

    /// `∂/∂η̄^l`.
    pub fn d_etabar(&self, l: usize) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.etabar[l];
            if e == 0 {
                continue;
            }
            let mut m2 = m.clone();
            m2.etabar[l] = e - 1;
            out.insert_add(m2, c.mul_scalar(&Scalar::from_int(e as i64)));
        }
        out
    }

    /// Left derivative `∂/∂θ^k`: sign from moving `θ^k` to the front across
    /// lower-index `θ`s.
    pub fn d_theta(&self, k: usize) -> SuperPoly {
        let bit = 1u32 << k;
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            if m.theta & bit == 0 {
                continue;
            }
            let below = (m.theta & (bit - 1)).count_ones();
            let mut m2 = m.clone();
            m2.theta &= !bit;
            let mut v = c.clone();
            if below & 1 == 1 {
                v = v.neg();
            }
            out.insert_add(m2, v);
        }
        out
    }

    /// Left derivative `∂/∂θ̄^l`: crosses all `θ`s and lower-index `θ̄`s.
    pub fn d_thetabar(&self, l: usize) -> SuperPoly {
        let bit = 1u32 << l;
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            if m.thetabar & bit == 0 {
                continue;
            }
            let crossings = m.theta.count_ones() + (m.thetabar & (bit - 1)).count_ones();
            let mut m2 = m.clone();
            m2.thetabar &= !bit;
            let mut v = c.clone();
            if crossings & 1 == 1 {
                v = v.neg();
            }
            out.insert_add(m2, v);
        }
        out
    }

    /// Keep only monomials of total fiber degree `d`.
    pub fn fiber_degree_part(&self, d: i64) -> SuperPoly {
        SuperPoly {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.degree() == d)
                .map(|(m, c)| (m.clone(), c.clone()))
                .collect(),
        }
    }

    /// Scale each monomial by `s^(fiber degree)`.
    pub fn rescale(&self, s: &Scalar) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            out.insert_add(m.clone(), c.mul_scalar(&s.pow(m.degree() as u32)));
        }
        out
    }

    /// Set `η = η̄ = 0`.
    pub fn restrict_eta_zero(&self) -> SuperPoly {
        SuperPoly {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.eta.iter().all(|&e| e == 0) && m.etabar.iter().all(|&e| e == 0))
                .map(|(m, c)| (m.clone(), c.clone()))
                .collect(),
        }
    }

    /// Set the antiholomorphic fiber variables `η̄ = θ̄ = 0`.
    pub fn restrict_antihol_zero(&self) -> SuperPoly {
        SuperPoly {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.antihol_degree() == 0)
                .map(|(m, c)| (m.clone(), c.clone()))
                .collect(),
        }
    }

    /// Set the holomorphic fiber variables `η = θ = 0`.
    pub fn restrict_hol_zero(&self) -> SuperPoly {
        SuperPoly {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.hol_degree() == 0)
                .map(|(m, c)| (m.clone(), c.clone()))
                .collect(),
        }
    }

    /// Multiply each monomial by its `ℰ`-eigenvalue (holomorphic degree).
    pub fn euler_hol(&self) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.hol_degree();
            if e != 0 {
                out.insert_add(m.clone(), c.mul_scalar(&Scalar::from_int(e)));
            }
        }
        out
    }

    pub fn euler_antihol(&self) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.antihol_degree();
            if e != 0 {
                out.insert_add(m.clone(), c.mul_scalar(&Scalar::from_int(e)));
            }
        }
        out
    }

    /// Divide each monomial by its total Euler eigenvalue `ℰ + ℰ̄`; defined
    /// only away from fiber constants.
    pub fn euler_total_inverse(&self) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.degree();
            assert!(e > 0, "euler_total_inverse on a fiber-constant term");
            out.insert_add(m.clone(), c.mul_scalar(&Scalar::from_ratio(1, e)));
        }
        out
    }

    pub fn euler_hol_inverse(&self) -> SuperPoly {
        let mut out = SuperPoly::zero(self.chart.clone());
        for (m, c) in &self.terms {
            let e = m.hol_degree();
            assert!(e > 0, "euler_hol_inverse outside the holomorphic ideal");
            out.insert_add(m.clone(), c.mul_scalar(&Scalar::from_ratio(1, e)));
        }
        out
    }

    /// Every monomial carries positive holomorphic fiber degree (membership
    /// in the right submodule).
    pub fn in_jr(&self) -> bool {
        self.terms.keys().all(|m| m.hol_degree() > 0)
    }

    /// Every monomial carries positive antiholomorphic fiber degree.
    pub fn in_jl(&self) -> bool {
        self.terms.keys().all(|m| m.antihol_degree() > 0)
    }

    pub fn min_fiber_degree(&self) -> Option<i64> {
        self.terms.keys().map(|m| m.degree()).min()
    }

    pub fn max_fiber_degree(&self) -> Option<i64> {
        self.terms.keys().map(|m| m.degree()).max()
    }
}

impl PartialEq for SuperPoly {
    fn eq(&self, other: &Self) -> bool {
        self.sub(other).is_zero()
    }
}

impl fmt::Display for SuperPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let m = self.chart.m;
        let mut first = true;
        for (mono, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "({})", c)?;
            let idx = |k: usize| {
                if m == 1 {
                    String::new()
                } else {
                    format!("{}", k + 1)
                }
            };
            for (k, &e) in mono.eta.iter().enumerate() {
                if e == 1 {
                    write!(f, "*eta{}", idx(k))?;
                } else if e > 1 {
                    write!(f, "*eta{}^{}", idx(k), e)?;
                }
            }
            for (l, &e) in mono.etabar.iter().enumerate() {
                if e == 1 {
                    write!(f, "*etab{}", idx(l))?;
                } else if e > 1 {
                    write!(f, "*etab{}^{}", idx(l), e)?;
                }
            }
            for k in 0..32 {
                if mono.theta & (1 << k) != 0 {
                    write!(f, "*th{}", idx(k))?;
                }
            }
            for l in 0..32 {
                if mono.thetabar & (1 << l) != 0 {
                    write!(f, "*thb{}", idx(l))?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for SuperPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::Chart;

    fn chart(m: usize) -> Arc<Chart> {
        Chart::new(m, vec![], vec![]).unwrap()
    }

    #[test]
    fn odd_squares_vanish() {
        let ch = chart(1);
        let th = SuperPoly::theta(ch.clone(), 0);
        assert!(th.mul(&th).is_zero());
    }

    #[test]
    fn koszul_signs() {
        let ch = chart(1);
        let th = SuperPoly::theta(ch.clone(), 0);
        let thb = SuperPoly::thetabar(ch.clone(), 0);
        // θ·θ̄ = −θ̄·θ
        assert_eq!(th.mul(&thb), thb.mul(&th).neg());
        // θθ̄ · θ̄θ = 0
        let a = th.mul(&thb);
        let b = thb.mul(&th);
        assert!(a.mul(&b).is_zero());
    }

    #[test]
    fn supercommutativity_m2() {
        let ch = chart(2);
        let t1 = SuperPoly::theta(ch.clone(), 0);
        let t2 = SuperPoly::theta(ch.clone(), 1);
        let e1 = SuperPoly::eta(ch.clone(), 0);
        assert_eq!(t1.mul(&t2), t2.mul(&t1).neg());
        assert_eq!(t1.mul(&e1), e1.mul(&t1));
        // merge sign: θ²θ¹ = −θ¹θ²
        let m21 = t2.mul(&t1);
        let m12 = t1.mul(&t2);
        assert_eq!(m21, m12.neg());
    }

    #[test]
    fn left_odd_derivatives() {
        let ch = chart(1);
        let th = SuperPoly::theta(ch.clone(), 0);
        let thb = SuperPoly::thetabar(ch.clone(), 0);
        let w = th.mul(&thb); // θθ̄
        // ∂/∂θ (θθ̄) = θ̄
        assert_eq!(w.d_theta(0), thb);
        // ∂/∂θ (θ̄θ) = −θ̄
        let w2 = thb.mul(&th);
        assert_eq!(w2.d_theta(0), thb.neg());
        // ∂/∂θ̄ (θθ̄) = −θ
        assert_eq!(w.d_thetabar(0), th.neg());
    }

    #[test]
    fn even_derivatives() {
        let ch = chart(1);
        let e = SuperPoly::eta(ch.clone(), 0);
        let sq = e.mul(&e);
        assert_eq!(sq.d_eta(0), e.mul_scalar(&Scalar::from_int(2)));
    }

    #[test]
    fn euler_operators() {
        let ch = chart(1);
        let e = SuperPoly::eta(ch.clone(), 0);
        let eb = SuperPoly::etabar(ch.clone(), 0);
        let w = e.mul(&eb);
        assert_eq!(w.euler_hol(), w);
        assert_eq!(w.euler_antihol(), w);
        let th = SuperPoly::theta(ch.clone(), 0);
        assert!(th.euler_antihol().is_zero());
    }
}

//! Windowed formal ν-Laurent series with fiberwise polynomial coefficients.
//!
//! A `SuperSeries` stores finitely many slots `ν^r ↦ SuperPoly` together with
//! the exactness window of that data. The standard grading gives ν degree 2
//! and every fiber variable degree 1.

use crate::coeff::{Chart, CoeffExpr};
use crate::fiber::{FiberMono, SuperPoly};
use crate::scalar::Scalar;
use crate::window::{combine, sat_add, Extent, Kind, Trunc, WExt, Window, NEG_INF, POS_INF};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeriesError {
    EmptyWindow,
    OutOfWindow,
    ZeroElement,
    OddExponent,
    DivergentExponential,
}

impl fmt::Display for SeriesError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesError::EmptyWindow => write!(f, "propagated window is void"),
            SeriesError::OutOfWindow => write!(f, "requested slot outside the window"),
            SeriesError::ZeroElement => write!(f, "operation undefined on the zero element"),
            SeriesError::OddExponent => write!(f, "exponential of an odd element"),
            SeriesError::DivergentExponential => {
                write!(f, "exponential argument does not raise the filtration")
            }
        }
    }
}

impl std::error::Error for SeriesError {}

#[derive(Clone)]
pub struct SuperSeries {
    pub chart: Arc<Chart>,
    pub terms: BTreeMap<i64, SuperPoly>,
    pub window: Window,
}

impl SuperSeries {
    pub fn zero(chart: Arc<Chart>) -> Self {
        SuperSeries {
            chart,
            terms: BTreeMap::new(),
            window: Window::exact_series(POS_INF, NEG_INF, POS_INF),
        }
    }

    /// Exactly known element from explicit slots.
    pub fn from_slots(chart: Arc<Chart>, slots: Vec<(i64, SuperPoly)>) -> Self {
        let mut terms: BTreeMap<i64, SuperPoly> = BTreeMap::new();
        for (r, p) in slots {
            if p.is_zero() {
                continue;
            }
            match terms.entry(r) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(p);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let s = e.get().add(&p);
                    if s.is_zero() {
                        e.remove();
                    } else {
                        *e.get_mut() = s;
                    }
                }
            }
        }
        let mut out = SuperSeries {
            chart,
            terms,
            window: Window::exact_series(0, 0, 0),
        };
        let (fdeg, ceil, shape) = out.content_stats();
        out.window = Window::exact_series(fdeg, ceil, shape);
        out.truncate()
    }

    pub fn from_superpoly(chart: Arc<Chart>, r: i64, p: SuperPoly) -> Self {
        SuperSeries::from_slots(chart, vec![(r, p)])
    }

    pub fn from_coeff(c: CoeffExpr) -> Self {
        let chart = c.chart.clone();
        SuperSeries::from_superpoly(chart, 0, SuperPoly::from_coeff(c))
    }

    pub fn one(chart: Arc<Chart>) -> Self {
        SuperSeries::from_coeff(CoeffExpr::one(chart))
    }

    pub fn scalar(chart: Arc<Chart>, s: Scalar) -> Self {
        SuperSeries::from_coeff(CoeffExpr::scalar(chart, s))
    }

    /// ν^j as an exact element.
    pub fn nu_power(chart: Arc<Chart>, j: i64) -> Self {
        SuperSeries::from_superpoly(chart.clone(), j, SuperPoly::one(chart))
    }

    fn content_stats(&self) -> (i64, i64, i64) {
        let mut fdeg = POS_INF;
        let mut ceil = NEG_INF;
        let mut shape = POS_INF;
        for (&r, p) in &self.terms {
            for m in p.terms.keys() {
                let i = 2 * r + m.degree();
                fdeg = fdeg.min(i);
                ceil = ceil.max(i);
                shape = shape.min(r + i);
            }
        }
        (fdeg, ceil, shape)
    }

    pub fn wext(&self) -> WExt {
        let ext = if self.terms.is_empty() {
            Extent::empty()
        } else {
            Extent {
                r_min: *self.terms.keys().next().unwrap(),
                r_max: *self.terms.keys().next_back().unwrap(),
            }
        };
        WExt {
            w: self.window,
            ext,
        }
    }

    fn trunc(&self) -> Trunc {
        self.chart.trunc
    }

    /// Drop stored terms outside the window.
    pub fn truncate(mut self) -> Self {
        let w = self.window;
        let mut pruned: BTreeMap<i64, SuperPoly> = BTreeMap::new();
        for (r, p) in std::mem::take(&mut self.terms) {
            if r < w.nu_min || r > w.nu_max {
                continue;
            }
            let keep: SuperPoly = SuperPoly {
                chart: p.chart.clone(),
                terms: p
                    .terms
                    .into_iter()
                    .filter(|(m, _)| 2 * r + m.degree() <= w.deg_max)
                    .collect(),
            };
            if !keep.is_zero() {
                pruned.insert(r, keep);
            }
        }
        self.terms = pruned;
        self
    }

    pub fn with_window(mut self, w: Window) -> Self {
        self.window = w;
        self.truncate()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Window covers the whole rectangle `r ∈ [r_lo, r_hi]`, `i ≤ deg`.
    pub fn covers(&self, r_lo: i64, r_hi: i64, deg: i64) -> bool {
        self.window.nu_min <= r_lo && self.window.nu_max >= r_hi && self.window.deg_max >= deg
    }

    pub fn slot(&self, r: i64) -> SuperPoly {
        self.terms
            .get(&r)
            .cloned()
            .unwrap_or_else(|| SuperPoly::zero(self.chart.clone()))
    }

    pub fn parity(&self) -> Option<u8> {
        let mut par: Option<u8> = None;
        for p in self.terms.values() {
            match (par, p.parity()) {
                (_, None) => return None,
                (None, Some(q)) => par = Some(q),
                (Some(q0), Some(q)) if q0 != q => return None,
                _ => {}
            }
        }
        par.or(Some(0))
    }

    pub fn add(&self, other: &SuperSeries) -> SuperSeries {
        if self.is_zero() && self.window.deg_max >= POS_INF && self.window.nu_min <= NEG_INF {
            return other.clone();
        }
        if other.is_zero() && other.window.deg_max >= POS_INF && other.window.nu_min <= NEG_INF {
            return self.clone();
        }
        let mut terms = self.terms.clone();
        for (&r, p) in &other.terms {
            let e = terms.entry(r).or_insert_with(|| SuperPoly::zero(self.chart.clone()));
            *e = e.add(p);
        }
        terms.retain(|_, p| !p.is_zero());
        SuperSeries {
            chart: self.chart.clone(),
            terms,
            window: self.window.meet(&other.window),
        }
        .truncate()
    }

    pub fn sub(&self, other: &SuperSeries) -> SuperSeries {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self.terms.iter().map(|(&r, p)| (r, p.neg())).collect(),
            window: self.window,
        }
    }

    pub fn mul(&self, other: &SuperSeries) -> Result<SuperSeries, SeriesError> {
        let w = combine(&self.wext(), &other.wext(), Kind::Series, &self.trunc());
        if w.is_void() {
            return Err(SeriesError::EmptyWindow);
        }
        let mut terms: BTreeMap<i64, SuperPoly> = BTreeMap::new();
        for (&ra, pa) in &self.terms {
            for (&rb, pb) in &other.terms {
                let r = ra + rb;
                if r < w.nu_min || r > w.nu_max {
                    continue;
                }
                let prod = pa.mul(pb);
                if prod.is_zero() {
                    continue;
                }
                let e = terms.entry(r).or_insert_with(|| SuperPoly::zero(self.chart.clone()));
                *e = e.add(&prod);
            }
        }
        terms.retain(|_, p| !p.is_zero());
        Ok(SuperSeries {
            chart: self.chart.clone(),
            terms,
            window: w,
        }
        .truncate())
    }

    pub fn mul_coeff(&self, c: &CoeffExpr) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, p)| (r, p.mul_coeff(c)))
                .filter(|(_, p)| !p.is_zero())
                .collect(),
            window: self.window,
        }
    }

    pub fn mul_scalar(&self, s: &Scalar) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, p)| (r, p.mul_scalar(s)))
                .filter(|(_, p)| !p.is_zero())
                .collect(),
            window: self.window,
        }
    }

    /// Multiply by ν^j.
    pub fn nu_shift(&self, j: i64) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self.terms.iter().map(|(&r, p)| (r + j, p.clone())).collect(),
            window: self.window.shift_nu(j),
        }
    }

    /// d/dν acting slotwise.
    pub fn d_dnu(&self) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .filter(|(&r, _)| r != 0)
                .map(|(&r, p)| (r - 1, p.mul_scalar(&Scalar::from_int(r))))
                .collect(),
            window: self.window.shift_nu(-1),
        }
        .truncate()
    }

    pub fn map_slots(&self, f: impl Fn(&SuperPoly) -> SuperPoly, w: Window) -> SuperSeries {
        SuperSeries {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, p)| (r, f(p)))
                .filter(|(_, p)| !p.is_zero())
                .collect(),
            window: w,
        }
        .truncate()
    }

    pub fn partial_z(&self, k: usize) -> SuperSeries {
        self.map_slots(|p| p.partial_z(k), self.window)
    }

    pub fn partial_zbar(&self, l: usize) -> SuperSeries {
        self.map_slots(|p| p.partial_zbar(l), self.window)
    }

    pub fn d_eta(&self, k: usize) -> SuperSeries {
        self.map_slots(|p| p.d_eta(k), self.window.shift_deg(-1))
    }

    pub fn d_etabar(&self, l: usize) -> SuperSeries {
        self.map_slots(|p| p.d_etabar(l), self.window.shift_deg(-1))
    }

    pub fn d_theta(&self, k: usize) -> SuperSeries {
        self.map_slots(|p| p.d_theta(k), self.window.shift_deg(-1))
    }

    pub fn d_thetabar(&self, l: usize) -> SuperSeries {
        self.map_slots(|p| p.d_thetabar(l), self.window.shift_deg(-1))
    }

    /// Fiberwise Euler operator ℰ (holomorphic degree eigenvalues).
    pub fn euler_hol(&self) -> SuperSeries {
        self.map_slots(|p| p.euler_hol(), self.window)
    }

    pub fn euler_antihol(&self) -> SuperSeries {
        self.map_slots(|p| p.euler_antihol(), self.window)
    }

    /// Inverse of ℰ + ℰ̄ on elements with no fiber-constant part.
    pub fn euler_total_inverse(&self) -> SuperSeries {
        self.map_slots(|p| p.euler_total_inverse(), self.window)
    }

    pub fn euler_hol_inverse(&self) -> SuperSeries {
        self.map_slots(|p| p.euler_hol_inverse(), self.window)
    }

    /// Getzler rescaling λ_s: each monomial scaled by `s^(fiber degree)`.
    pub fn rescale(&self, s: &Scalar) -> SuperSeries {
        self.map_slots(|p| p.rescale(s), self.window)
    }

    /// Restriction η = η̄ = 0.
    pub fn restrict_eta_zero(&self) -> SuperSeries {
        self.map_slots(|p| p.restrict_eta_zero(), self.window)
    }

    /// Restriction η̄ = θ̄ = 0.
    pub fn restrict_antihol_zero(&self) -> SuperSeries {
        self.map_slots(|p| p.restrict_antihol_zero(), self.window)
    }

    /// Restriction η = θ = 0.
    pub fn restrict_hol_zero(&self) -> SuperSeries {
        self.map_slots(|p| p.restrict_hol_zero(), self.window)
    }

    /// The deg-homogeneous component of degree `i`.
    pub fn deg_component(&self, i: i64) -> Result<SuperSeries, SeriesError> {
        if i > self.window.deg_max {
            return Err(SeriesError::OutOfWindow);
        }
        let mut terms: BTreeMap<i64, SuperPoly> = BTreeMap::new();
        for (&r, p) in &self.terms {
            let part = p.fiber_degree_part(i - 2 * r);
            if !part.is_zero() {
                terms.insert(r, part);
            }
        }
        let w = Window {
            kind: Kind::Series,
            nu_min: self.window.nu_min,
            nu_max: self.window.nu_max,
            deg_max: POS_INF,
            fdeg: i,
            ceil: i,
            shape: self.window.shape.max(sat_add(self.window.nu_min, i)),
            nat: NEG_INF,
        };
        Ok(SuperSeries {
            chart: self.chart.clone(),
            terms,
            window: w,
        })
    }

    /// Minimal standard degree of the stored terms.
    pub fn fdeg(&self) -> Result<i64, SeriesError> {
        if self.is_zero() {
            return Err(SeriesError::ZeroElement);
        }
        Ok(self.content_stats().0)
    }

    /// Maximal stored standard degree.
    pub fn max_deg(&self) -> Option<i64> {
        if self.is_zero() {
            None
        } else {
            Some(self.content_stats().1)
        }
    }

    /// Membership in the right/left submodules: every monomial must carry
    /// positive holomorphic / antiholomorphic fiber degree.
    pub fn submodule_membership(&self) -> (bool, bool) {
        let in_jl = self.terms.values().all(|p| p.in_jl());
        let in_jr = self.terms.values().all(|p| p.in_jr());
        (in_jl, in_jr)
    }

    /// exp of an even element that raises the standard filtration (fdeg ≥ 1)
    /// or is fiber-nilpotent; the series is finite inside the window.
    pub fn exp(&self) -> Result<SuperSeries, SeriesError> {
        if self.parity() == None || self.parity() == Some(1) {
            return Err(SeriesError::OddExponent);
        }
        let nilpotent = self
            .terms
            .values()
            .all(|p| p.terms.keys().all(|m| m.theta != 0 || m.thetabar != 0));
        let raises = self.is_zero() || self.fdeg().map(|d| d >= 1).unwrap_or(true);
        if !nilpotent && !raises {
            return Err(SeriesError::DivergentExponential);
        }
        if !nilpotent && self.window.deg_max >= POS_INF && self.trunc().deg_max >= POS_INF {
            return Err(SeriesError::DivergentExponential);
        }
        let mut acc = SuperSeries::one(self.chart.clone());
        let mut term = SuperSeries::one(self.chart.clone());
        let mut n: i64 = 0;
        loop {
            n += 1;
            term = term.mul(self)?.mul_scalar(&Scalar::from_ratio(1, n));
            if term.is_zero() {
                // remaining terms vanish identically in the window
                let w = acc.window.meet(&term.window);
                return Ok(acc.with_window(w));
            }
            acc = acc.add(&term);
        }
    }

    /// log(self) for self = 1 + w with fdeg(w) ≥ 1 or w nilpotent.
    pub fn log(&self) -> Result<SuperSeries, SeriesError> {
        let w = self.sub(&SuperSeries::one(self.chart.clone()));
        let nilpotent = w
            .terms
            .values()
            .all(|p| p.terms.keys().all(|m| m.theta != 0 || m.thetabar != 0));
        let raises = w.is_zero() || w.fdeg().map(|d| d >= 1).unwrap_or(true);
        if !nilpotent && !raises {
            return Err(SeriesError::DivergentExponential);
        }
        if !nilpotent && w.window.deg_max >= POS_INF && self.trunc().deg_max >= POS_INF {
            return Err(SeriesError::DivergentExponential);
        }
        let mut acc = SuperSeries::zero(self.chart.clone());
        let mut power = SuperSeries::one(self.chart.clone());
        let mut n: i64 = 0;
        loop {
            n += 1;
            power = power.mul(&w)?;
            if power.is_zero() {
                let wnd = acc.window.meet(&power.window);
                return Ok(acc.with_window(wnd));
            }
            let sign = if n % 2 == 1 { 1 } else { -1 };
            acc = acc.add(&power.mul_scalar(&Scalar::from_ratio(sign, n)));
        }
    }

    /// exp of a deg-0 even element with ν-content strictly below zero (the
    /// `e^{±S}` family), truncated below at the chart's ν floor. The window
    /// records the truncation; degree exactness is full since the true
    /// element is concentrated in degree 0.
    pub fn exp_deg0(&self) -> Result<SuperSeries, SeriesError> {
        if self.parity() == Some(1) {
            return Err(SeriesError::OddExponent);
        }
        if !self.is_zero() {
            let (fd, ce, _) = self.content_stats();
            if fd != 0 || ce != 0 {
                return Err(SeriesError::DivergentExponential);
            }
            if *self.terms.keys().next_back().unwrap() >= 0 {
                return Err(SeriesError::DivergentExponential);
            }
        }
        let floor = self.trunc().nu_min;
        let mut acc = SuperSeries::one(self.chart.clone());
        let mut term = SuperSeries::one(self.chart.clone());
        let mut n: i64 = 0;
        loop {
            n += 1;
            term = term.mul(self)?.mul_scalar(&Scalar::from_ratio(1, n));
            let term_top = term.terms.keys().next_back().copied();
            match term_top {
                None => break,
                Some(top) if top < floor => break,
                _ => {}
            }
            acc = acc.add(&term);
        }
        let w = Window {
            kind: Kind::Series,
            nu_min: floor,
            nu_max: POS_INF,
            deg_max: POS_INF,
            fdeg: 0,
            ceil: 0,
            shape: NEG_INF,
            nat: NEG_INF,
        };
        Ok(acc.with_window(w))
    }

    /// Canonical text form: slots sorted by ν-exponent, monomials by the
    /// fiber order.
    pub fn canonical_text(&self) -> String {
        if self.is_zero() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (r, p) in &self.terms {
            if !out.is_empty() {
                out.push_str(" + ");
            }
            out.push_str(&format!("nu^{}*[{}]", r, p));
        }
        out
    }
}

impl fmt::Display for SuperSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.canonical_text())
    }
}

impl fmt::Debug for SuperSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} @{:?}", self.canonical_text(), self.window)
    }
}

/// Fold a list into a sum.
pub fn sum(chart: Arc<Chart>, items: impl IntoIterator<Item = SuperSeries>) -> SuperSeries {
    let mut acc = SuperSeries::zero(chart);
    for it in items {
        acc = acc.add(&it);
    }
    acc
}

pub fn fiber_mono(chart: &Arc<Chart>, eta: &[u16], etabar: &[u16], theta: u32, thetabar: u32) -> FiberMono {
    let mut m = FiberMono::unit(chart.m);
    m.eta.copy_from_slice(eta);
    m.etabar.copy_from_slice(etabar);
    m.theta = theta;
    m.thetabar = thetabar;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::Chart;
    use proptest::prelude::*;

    fn chart(m: usize) -> Arc<Chart> {
        Chart::new(m, vec![], vec![]).unwrap()
    }

    fn eta(ch: &Arc<Chart>) -> SuperSeries {
        SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::eta(ch.clone(), 0))
    }

    fn etabar(ch: &Arc<Chart>) -> SuperSeries {
        SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::etabar(ch.clone(), 0))
    }

    fn theta(ch: &Arc<Chart>) -> SuperSeries {
        SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::theta(ch.clone(), 0))
    }

    fn thetabar(ch: &Arc<Chart>) -> SuperSeries {
        SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::thetabar(ch.clone(), 0))
    }

    #[test]
    fn nilpotency_examples() {
        let ch = chart(1);
        let th = theta(&ch);
        assert!(th.mul(&th).unwrap().is_zero());
        // ψ-type: ν⁻¹θθ̄ squares to zero for m = 1
        let psi = th.mul(&thetabar(&ch)).unwrap().nu_shift(-1);
        assert!(psi.mul(&psi).unwrap().is_zero());
    }

    #[test]
    fn deg_component_examples() {
        let ch = chart(1);
        // ν⁻¹ η η̄ has degree −2+1+1 = 0
        let a = eta(&ch).mul(&etabar(&ch)).unwrap().nu_shift(-1);
        let c0 = a.deg_component(0).unwrap();
        assert_eq!(c0.canonical_text(), a.canonical_text());
        let nu = SuperSeries::nu_power(ch.clone(), 1);
        assert_eq!(nu.deg_component(2).unwrap().canonical_text(), nu.canonical_text());
        assert!(eta(&ch).deg_component(0).unwrap().is_zero());
    }

    #[test]
    fn fdeg_examples() {
        let ch = chart(1);
        let s = eta(&ch)
            .mul(&etabar(&ch))
            .unwrap()
            .neg()
            .add(&theta(&ch).mul(&thetabar(&ch)).unwrap())
            .nu_shift(-1);
        assert_eq!(s.fdeg().unwrap(), 0);
        let nf = SuperSeries::nu_power(ch.clone(), 1);
        assert_eq!(nf.fdeg().unwrap(), 2);
        assert!(SuperSeries::zero(ch.clone()).fdeg().is_err());
    }

    #[test]
    fn submodule_membership_examples() {
        let ch = chart(1);
        let e = eta(&ch);
        let (jl, jr) = e.submodule_membership();
        assert!(!jl && jr);
        let one = SuperSeries::one(ch.clone());
        let (jl, jr) = one.submodule_membership();
        assert!(!jl && !jr);
        let mixed = eta(&ch).mul(&etabar(&ch)).unwrap();
        let (jl, jr) = mixed.submodule_membership();
        assert!(jl && jr);
    }

    #[test]
    fn euler_examples() {
        let ch = chart(1);
        let w = eta(&ch).mul(&etabar(&ch)).unwrap();
        assert_eq!(w.euler_hol().canonical_text(), w.canonical_text());
        // S₋₁-type: −η g η̄ + θ g θ̄ is (1,1): ℰ eigenvalue 1
        let s = w.neg().add(&theta(&ch).mul(&thetabar(&ch)).unwrap());
        assert_eq!(s.euler_hol().canonical_text(), s.canonical_text());
        assert!(theta(&ch).euler_antihol().is_zero());
    }

    #[test]
    fn rescale_examples() {
        let ch = chart(1);
        let e = eta(&ch);
        let two = Scalar::from_int(2);
        assert_eq!(
            e.rescale(&two).canonical_text(),
            e.mul_scalar(&two).canonical_text()
        );
        let f = SuperSeries::from_coeff(CoeffExpr::z(ch.clone(), 0));
        assert_eq!(f.rescale(&two).canonical_text(), f.canonical_text());
        let a = e.mul(&thetabar(&ch)).unwrap();
        assert_eq!(
            a.rescale(&Scalar::one()).canonical_text(),
            a.canonical_text()
        );
    }

    #[test]
    fn exp_deg0_truncates_at_floor() {
        let ch = Chart::new(1, vec![], vec![])
            .unwrap()
            .with_trunc(Trunc {
                nu_min: -6,
                deg_max: 10,
            });
        let s = eta(&ch).mul(&etabar(&ch)).unwrap().nu_shift(-1).neg();
        let es = s.exp_deg0().unwrap();
        assert_eq!(es.window.nu_min, -6);
        // coefficient of ν^{-3} is (−ηη̄)³/3!
        let p3 = es.slot(-3);
        let expect = eta(&ch)
            .mul(&etabar(&ch))
            .unwrap()
            .neg()
            .mul_scalar(&Scalar::from_ratio(1, 1));
        let cube = expect
            .mul(&expect)
            .unwrap()
            .mul(&expect)
            .unwrap()
            .mul_scalar(&Scalar::from_ratio(1, 6));
        assert_eq!(
            SuperSeries::from_superpoly(ch.clone(), -3, p3).canonical_text(),
            cube.nu_shift(-3).canonical_text()
        );
    }

    // --- window soundness: truncated views must agree with the exact value
    //     on every slot the propagated window claims ---

    fn arb_exact(ch: Arc<Chart>) -> impl Strategy<Value = SuperSeries> {
        proptest::collection::vec(
            (
                -3i64..3,
                0u16..3,
                0u16..3,
                0u32..2,
                0u32..2,
                -4i64..5,
            ),
            0..6,
        )
        .prop_map(move |items| {
            let mut acc = SuperSeries::zero(ch.clone());
            for (r, e, eb, th, thb, c) in items {
                let m = fiber_mono(&ch, &[e], &[eb], th, thb);
                let p = SuperPoly::monomial(
                    m,
                    CoeffExpr::scalar(ch.clone(), Scalar::from_int(c)),
                );
                acc = acc.add(&SuperSeries::from_superpoly(ch.clone(), r, p));
            }
            acc
        })
    }

    proptest! {
        #[test]
        fn window_soundness_mul(
            a in arb_exact(chart(1)),
            b in arb_exact(chart(1)),
            numin_a in -3i64..1,
            degmax_a in 0i64..7,
            numin_b in -3i64..1,
            degmax_b in 0i64..7,
        ) {
            // exact product
            let exact = a.mul(&b).unwrap();
            // truncated views with sound (restricted) windows
            let wa = Window {
                kind: Kind::Series,
                nu_min: numin_a,
                nu_max: POS_INF,
                deg_max: degmax_a,
                ..a.window
            };
            let wb = Window {
                kind: Kind::Series,
                nu_min: numin_b,
                nu_max: POS_INF,
                deg_max: degmax_b,
                ..b.window
            };
            let ta = a.clone().with_window(wa);
            let tb = b.clone().with_window(wb);
            if let Ok(prod) = ta.mul(&tb) {
                // every slot claimed by prod.window must match the exact value
                let w = prod.window;
                for r in w.nu_min.max(-8)..=w.nu_max.min(8) {
                    let pe = exact.slot(r);
                    let pt = prod.slot(r);
                    let diff = pe.sub(&pt);
                    for (m, c) in &diff.terms {
                        let i = 2 * r + m.degree();
                        prop_assert!(
                            i > w.deg_max || c.is_zero(),
                            "window claimed slot (r={}, i={}) but values differ", r, i
                        );
                    }
                }
            }
        }

        #[test]
        fn graded_ring_axioms(
            a in arb_exact(chart(1)),
            b in arb_exact(chart(1)),
            c in arb_exact(chart(1)),
        ) {
            let ab_c = a.mul(&b).unwrap().mul(&c).unwrap();
            let a_bc = a.mul(&b.mul(&c).unwrap()).unwrap();
            prop_assert_eq!(ab_c.canonical_text(), a_bc.canonical_text());
            let dist = a.add(&b).mul(&c).unwrap();
            let dist2 = a.mul(&c).unwrap().add(&b.mul(&c).unwrap());
            prop_assert_eq!(dist.canonical_text(), dist2.canonical_text());
        }

        #[test]
        fn deg_component_projection(a in arb_exact(chart(1)), i in -4i64..8) {
            let c = a.deg_component(i).unwrap();
            let cc = c.deg_component(i).unwrap();
            prop_assert_eq!(c.canonical_text(), cc.canonical_text());
            // sum of components reproduces a
            let mut s = SuperSeries::zero(a.chart.clone());
            for j in -10..12 {
                s = s.add(&a.deg_component(j).unwrap());
            }
            prop_assert_eq!(s.canonical_text(), a.canonical_text());
        }

        #[test]
        fn fdeg_subadditive(a in arb_exact(chart(1)), b in arb_exact(chart(1))) {
            if !a.is_zero() && !b.is_zero() {
                let p = a.mul(&b).unwrap();
                if !p.is_zero() {
                    prop_assert!(p.fdeg().unwrap() >= a.fdeg().unwrap() + b.fdeg().unwrap());
                }
            }
        }

        #[test]
        fn rescale_is_multiplicative(a in arb_exact(chart(1))) {
            let s2 = Scalar::from_int(2);
            let s3 = Scalar::from_int(3);
            let both = a.rescale(&s2).rescale(&s3);
            let six = a.rescale(&Scalar::from_int(6));
            prop_assert_eq!(both.canonical_text(), six.canonical_text());
        }
    }
}

//! Graded formal differential operators on windowed super series.
//!
//! Normal form: coefficients (fiberwise polynomials over the chart algebra)
//! stand to the left of a derivative monomial. The derivative word is ordered
//! `∂z ∂z̄ ∂η ∂η̄ ∂θ(asc) ∂θ̄(asc)` and applied innermost-first (rightmost
//! factor acts first); all odd reordering signs are tracked explicitly.

use crate::coeff::Chart;
use crate::fiber::SuperPoly;
use crate::scalar::Scalar;
use crate::series::{SeriesError, SuperSeries};
use crate::window::{combine, sat_add, Extent, Kind, WExt, Window, NEG_INF, POS_INF};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpError {
    EmptyWindow,
    MixedParity,
    NonUnitDensity,
    PreconditionViolated,
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpError::EmptyWindow => write!(f, "propagated operator window is void"),
            OpError::MixedParity => write!(f, "supercommutator of non-homogeneous operators"),
            OpError::NonUnitDensity => write!(f, "density has no invertible leading coefficient"),
            OpError::PreconditionViolated => write!(f, "conjugation preconditions not met"),
        }
    }
}

impl std::error::Error for OpError {}

impl From<SeriesError> for OpError {
    fn from(_: SeriesError) -> Self {
        OpError::EmptyWindow
    }
}

/// A single derivative generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    Z(usize),
    Zbar(usize),
    Eta(usize),
    Etabar(usize),
    Theta(usize),
    Thetabar(usize),
}

impl Deriv {
    pub fn parity(&self) -> u8 {
        matches!(self, Deriv::Theta(_) | Deriv::Thetabar(_)) as u8
    }

    /// Standard-degree change caused by this derivative.
    pub fn deg_shift(&self) -> i64 {
        match self {
            Deriv::Z(_) | Deriv::Zbar(_) => 0,
            _ => -1,
        }
    }
}

/// A derivative monomial.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DerivMono {
    pub dz: Vec<u16>,
    pub dzbar: Vec<u16>,
    pub deta: Vec<u16>,
    pub detabar: Vec<u16>,
    pub dtheta: u32,
    pub dthetabar: u32,
}

impl DerivMono {
    pub fn unit(m: usize) -> Self {
        DerivMono {
            dz: vec![0; m],
            dzbar: vec![0; m],
            deta: vec![0; m],
            detabar: vec![0; m],
            dtheta: 0,
            dthetabar: 0,
        }
    }

    pub fn single(m: usize, d: Deriv) -> Self {
        let mut out = DerivMono::unit(m);
        match d {
            Deriv::Z(k) => out.dz[k] = 1,
            Deriv::Zbar(l) => out.dzbar[l] = 1,
            Deriv::Eta(k) => out.deta[k] = 1,
            Deriv::Etabar(l) => out.detabar[l] = 1,
            Deriv::Theta(k) => out.dtheta = 1 << k,
            Deriv::Thetabar(l) => out.dthetabar = 1 << l,
        }
        out
    }

    pub fn is_unit(&self) -> bool {
        self.dtheta == 0
            && self.dthetabar == 0
            && self.dz.iter().all(|&e| e == 0)
            && self.dzbar.iter().all(|&e| e == 0)
            && self.deta.iter().all(|&e| e == 0)
            && self.detabar.iter().all(|&e| e == 0)
    }

    /// Total differential order.
    pub fn order(&self) -> i64 {
        self.dz.iter().map(|&e| e as i64).sum::<i64>()
            + self.dzbar.iter().map(|&e| e as i64).sum::<i64>()
            + self.fiber_order()
    }

    /// Number of fiber derivatives (each lowers the standard degree by one).
    pub fn fiber_order(&self) -> i64 {
        self.deta.iter().map(|&e| e as i64).sum::<i64>()
            + self.detabar.iter().map(|&e| e as i64).sum::<i64>()
            + self.dtheta.count_ones() as i64
            + self.dthetabar.count_ones() as i64
    }

    pub fn parity(&self) -> u8 {
        ((self.dtheta.count_ones() + self.dthetabar.count_ones()) & 1) as u8
    }

    /// The canonical word, outermost (leftmost) first.
    pub fn word(&self) -> Vec<Deriv> {
        let mut w = Vec::new();
        for (k, &e) in self.dz.iter().enumerate() {
            for _ in 0..e {
                w.push(Deriv::Z(k));
            }
        }
        for (l, &e) in self.dzbar.iter().enumerate() {
            for _ in 0..e {
                w.push(Deriv::Zbar(l));
            }
        }
        for (k, &e) in self.deta.iter().enumerate() {
            for _ in 0..e {
                w.push(Deriv::Eta(k));
            }
        }
        for (l, &e) in self.detabar.iter().enumerate() {
            for _ in 0..e {
                w.push(Deriv::Etabar(l));
            }
        }
        for k in 0..32 {
            if self.dtheta & (1 << k) != 0 {
                w.push(Deriv::Theta(k));
            }
        }
        for l in 0..32 {
            if self.dthetabar & (1 << l) != 0 {
                w.push(Deriv::Thetabar(l));
            }
        }
        w
    }

    /// Apply to a fiberwise polynomial, innermost-first.
    pub fn apply(&self, p: &SuperPoly) -> SuperPoly {
        let mut g = p.clone();
        for d in self.word().into_iter().rev() {
            if g.is_zero() {
                return g;
            }
            g = match d {
                Deriv::Z(k) => g.partial_z(k),
                Deriv::Zbar(l) => g.partial_zbar(l),
                Deriv::Eta(k) => g.d_eta(k),
                Deriv::Etabar(l) => g.d_etabar(l),
                Deriv::Theta(k) => g.d_theta(k),
                Deriv::Thetabar(l) => g.d_thetabar(l),
            };
        }
        g
    }

    /// Prepend a derivative (it becomes the outermost factor); returns the
    /// canonicalized monomial and the reordering sign, `None` if an odd
    /// derivative repeats.
    pub fn prepend(&self, d: Deriv) -> Option<(DerivMono, i32)> {
        let mut out = self.clone();
        let mut sign = 1i32;
        match d {
            Deriv::Z(k) => out.dz[k] += 1,
            Deriv::Zbar(l) => out.dzbar[l] += 1,
            Deriv::Eta(k) => out.deta[k] += 1,
            Deriv::Etabar(l) => out.detabar[l] += 1,
            Deriv::Theta(k) => {
                let bit = 1u32 << k;
                if out.dtheta & bit != 0 {
                    return None;
                }
                // crosses lower-index ∂θ already in the word
                if (out.dtheta & (bit - 1)).count_ones() & 1 == 1 {
                    sign = -sign;
                }
                out.dtheta |= bit;
            }
            Deriv::Thetabar(l) => {
                let bit = 1u32 << l;
                if out.dthetabar & bit != 0 {
                    return None;
                }
                let crossings =
                    out.dtheta.count_ones() + (out.dthetabar & (bit - 1)).count_ones();
                if crossings & 1 == 1 {
                    sign = -sign;
                }
                out.dthetabar |= bit;
            }
        }
        Some((out, sign))
    }
}

impl Ord for DerivMono {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order()
            .cmp(&other.order())
            .then_with(|| self.dz.cmp(&other.dz))
            .then_with(|| self.dzbar.cmp(&other.dzbar))
            .then_with(|| self.deta.cmp(&other.deta))
            .then_with(|| self.detabar.cmp(&other.detabar))
            .then_with(|| self.dtheta.cmp(&other.dtheta))
            .then_with(|| self.dthetabar.cmp(&other.dthetabar))
    }
}

impl PartialOrd for DerivMono {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for DerivMono {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "∂[")?;
        for d in self.word() {
            write!(f, "{:?} ", d)?;
        }
        write!(f, "]")
    }
}

/// Windowed graded formal differential operator.
#[derive(Clone)]
pub struct SuperDiffOp {
    pub chart: Arc<Chart>,
    /// ν-exponent → derivative monomial → coefficient.
    pub terms: BTreeMap<i64, BTreeMap<DerivMono, SuperPoly>>,
    pub window: Window,
}

impl SuperDiffOp {
    pub fn zero(chart: Arc<Chart>) -> Self {
        SuperDiffOp {
            chart,
            terms: BTreeMap::new(),
            window: Window {
                kind: Kind::Op,
                nu_min: NEG_INF,
                nu_max: POS_INF,
                deg_max: POS_INF,
                fdeg: POS_INF,
                ceil: NEG_INF,
                shape: POS_INF,
                nat: POS_INF,
            },
        }
    }

    pub fn identity(chart: Arc<Chart>) -> Self {
        SuperDiffOp::mult_op(&SuperSeries::one(chart))
    }

    /// Multiplication operator by a series.
    pub fn mult_op(u: &SuperSeries) -> Self {
        let chart = u.chart.clone();
        let mut terms: BTreeMap<i64, BTreeMap<DerivMono, SuperPoly>> = BTreeMap::new();
        for (&r, p) in &u.terms {
            if !p.is_zero() {
                terms
                    .entry(r)
                    .or_default()
                    .insert(DerivMono::unit(chart.m), p.clone());
            }
        }
        // nat certificate: i − r over true content of the multiplication op
        let stored_nat = u
            .terms
            .iter()
            .flat_map(|(&r, p)| p.terms.keys().map(move |m| r + m.degree()))
            .min()
            .unwrap_or(POS_INF);
        let mut nat = stored_nat;
        if u.window.deg_max < POS_INF {
            nat = nat.min(sat_add(u.window.deg_max, -u.window.nu_max).saturating_add(1));
        }
        if u.window.nu_max < POS_INF {
            nat = nat.min(u.window.nu_max + 1);
        }
        if u.window.nu_min > NEG_INF {
            // hidden below: i − r ≥ fdeg − r → unbounded help; shape: i − r ≥ shape − 2r
            nat = nat.min(sat_add(u.window.shape, -2 * (u.window.nu_min - 1)));
        }
        SuperDiffOp {
            chart,
            terms,
            window: Window {
                kind: Kind::Op,
                nat: sat_add(nat, 0),
                ..u.window
            },
        }
    }

    /// Elementary derivative operator.
    pub fn deriv_op(chart: Arc<Chart>, d: Deriv) -> Self {
        let m = chart.m;
        let shift = d.deg_shift();
        let mut terms: BTreeMap<i64, BTreeMap<DerivMono, SuperPoly>> = BTreeMap::new();
        terms
            .entry(0)
            .or_default()
            .insert(DerivMono::single(m, d), SuperPoly::one(chart.clone()));
        SuperDiffOp {
            chart,
            terms,
            window: Window {
                kind: Kind::Op,
                nu_min: NEG_INF,
                nu_max: POS_INF,
                deg_max: POS_INF,
                fdeg: shift,
                ceil: shift,
                shape: shift,
                nat: shift,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
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

    /// Reset the window to "exactly known" with certificates computed from
    /// the stored content. Only valid when the stored terms are the complete
    /// operator.
    pub fn set_exact_window(&mut self) {
        let mut fdeg = POS_INF;
        let mut ceil = NEG_INF;
        let mut shape = POS_INF;
        let mut nat = POS_INF;
        for (&r, slot) in &self.terms {
            for (dm, c) in slot {
                let fo = dm.fiber_order();
                for m in c.terms.keys() {
                    let i = 2 * r + m.degree() - fo;
                    fdeg = fdeg.min(i);
                    ceil = ceil.max(i);
                    shape = shape.min(r + i);
                    nat = nat.min(i - r);
                }
            }
        }
        self.window = Window {
            kind: Kind::Op,
            nu_min: NEG_INF,
            nu_max: POS_INF,
            deg_max: POS_INF,
            fdeg,
            ceil,
            shape,
            nat,
        };
    }

    pub fn insert_add(&mut self, r: i64, dm: DerivMono, c: SuperPoly) {
        if c.is_zero() {
            return;
        }
        let slot = self.terms.entry(r).or_default();
        match slot.entry(dm) {
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
        if self.terms.get(&r).map(|s| s.is_empty()).unwrap_or(false) {
            self.terms.remove(&r);
        }
    }

    /// Drop stored terms whose op-degree slot lies outside the window.
    pub fn truncate(mut self) -> Self {
        let w = self.window;
        let mut out: BTreeMap<i64, BTreeMap<DerivMono, SuperPoly>> = BTreeMap::new();
        for (r, slot) in std::mem::take(&mut self.terms) {
            if r < w.nu_min || r > w.nu_max {
                continue;
            }
            let mut kept: BTreeMap<DerivMono, SuperPoly> = BTreeMap::new();
            for (dm, c) in slot {
                let fo = dm.fiber_order();
                let filtered = SuperPoly {
                    chart: c.chart.clone(),
                    terms: c
                        .terms
                        .into_iter()
                        .filter(|(m, _)| 2 * r + m.degree() - fo <= w.deg_max)
                        .collect(),
                };
                if !filtered.is_zero() {
                    kept.insert(dm, filtered);
                }
            }
            if !kept.is_empty() {
                out.insert(r, kept);
            }
        }
        self.terms = out;
        self
    }

    pub fn with_window(mut self, w: Window) -> Self {
        self.window = w;
        self.truncate()
    }

    pub fn add(&self, other: &SuperDiffOp) -> SuperDiffOp {
        if self.is_zero() && self.window.deg_max >= POS_INF && self.window.nu_min <= NEG_INF {
            return other.clone();
        }
        if other.is_zero() && other.window.deg_max >= POS_INF && other.window.nu_min <= NEG_INF {
            return self.clone();
        }
        let mut out = self.clone();
        out.window = self.window.meet(&other.window);
        for (&r, slot) in &other.terms {
            for (dm, c) in slot {
                out.insert_add(r, dm.clone(), c.clone());
            }
        }
        out.truncate()
    }

    pub fn sub(&self, other: &SuperDiffOp) -> SuperDiffOp {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> SuperDiffOp {
        SuperDiffOp {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, slot)| {
                    (
                        r,
                        slot.iter().map(|(dm, c)| (dm.clone(), c.neg())).collect(),
                    )
                })
                .collect(),
            window: self.window,
        }
    }

    pub fn mul_scalar(&self, s: &Scalar) -> SuperDiffOp {
        SuperDiffOp {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, slot)| {
                    (
                        r,
                        slot.iter()
                            .map(|(dm, c)| (dm.clone(), c.mul_scalar(s)))
                            .collect(),
                    )
                })
                .collect(),
            window: self.window,
        }
    }

    pub fn nu_shift(&self, j: i64) -> SuperDiffOp {
        SuperDiffOp {
            chart: self.chart.clone(),
            terms: self
                .terms
                .iter()
                .map(|(&r, slot)| (r + j, slot.clone()))
                .collect(),
            window: self.window.shift_nu(j),
        }
    }

    pub fn parity(&self) -> Option<u8> {
        let mut par: Option<u8> = None;
        for slot in self.terms.values() {
            for (dm, c) in slot {
                let cp = c.parity()?;
                let p = (cp + dm.parity()) & 1;
                match par {
                    None => par = Some(p),
                    Some(q) if q != p => return None,
                    _ => {}
                }
            }
        }
        par.or(Some(0))
    }

    pub fn max_order(&self) -> i64 {
        self.terms
            .values()
            .flat_map(|s| s.keys().map(|dm| dm.order()))
            .max()
            .unwrap_or(0)
    }

    /// Left action on a series.
    pub fn apply(&self, f: &SuperSeries) -> Result<SuperSeries, SeriesError> {
        let w = combine(&self.wext(), &f.wext(), Kind::Series, &self.chart.trunc);
        if w.is_void() {
            return Err(SeriesError::EmptyWindow);
        }
        let mut out = SuperSeries::zero(self.chart.clone());
        out.window = w;
        for (&ra, slot) in &self.terms {
            for (&rf, p) in &f.terms {
                let r = ra + rf;
                if r < w.nu_min || r > w.nu_max {
                    continue;
                }
                for (dm, c) in slot {
                    let dp = dm.apply(p);
                    if dp.is_zero() {
                        continue;
                    }
                    let v = c.mul(&dp);
                    if v.is_zero() {
                        continue;
                    }
                    let e = out
                        .terms
                        .entry(r)
                        .or_insert_with(|| SuperPoly::zero(self.chart.clone()));
                    *e = e.add(&v);
                }
            }
        }
        out.terms.retain(|_, p| !p.is_zero());
        Ok(out.truncate())
    }

    /// Operator composition: `apply(compose(A,B), f) = apply(A, apply(B, f))`.
    pub fn compose(&self, other: &SuperDiffOp) -> Result<SuperDiffOp, OpError> {
        let w = combine(&self.wext(), &other.wext(), Kind::Op, &self.chart.trunc);
        if w.is_void() {
            return Err(OpError::EmptyWindow);
        }
        let mut out = SuperDiffOp::zero(self.chart.clone());
        out.window = w;
        for (&ra, aslot) in &self.terms {
            for (&rb, bslot) in &other.terms {
                let r = ra + rb;
                if r < w.nu_min || r > w.nu_max {
                    continue;
                }
                for (adm, ac) in aslot {
                    for (bdm, bc) in bslot {
                        // normal-order ∂^α ∘ (bc · ∂^β)
                        let mut parts: Vec<(SuperPoly, DerivMono)> =
                            vec![(bc.clone(), bdm.clone())];
                        for d in adm.word().into_iter().rev() {
                            parts = compose_single(d, parts, &self.chart);
                            if parts.is_empty() {
                                break;
                            }
                        }
                        for (c, dm) in parts {
                            let v = ac.mul(&c);
                            if !v.is_zero() {
                                out.insert_add(r, dm, v);
                            }
                        }
                    }
                }
            }
        }
        Ok(out.truncate())
    }

    /// `A∘B − (−1)^{|A||B|} B∘A`.
    pub fn supercommutator(&self, other: &SuperDiffOp) -> Result<SuperDiffOp, OpError> {
        let pa = self.parity().ok_or(OpError::MixedParity)?;
        let pb = other.parity().ok_or(OpError::MixedParity)?;
        let ab = self.compose(other)?;
        let ba = other.compose(self)?;
        Ok(if pa == 1 && pb == 1 {
            ab.add(&ba)
        } else {
            ab.sub(&ba)
        })
    }

    /// Naturality: no negative-ν part and order ≤ r at each ν^r, r ≥ 0.
    pub fn naturality_check(&self) -> bool {
        for (&r, slot) in &self.terms {
            if r < 0 {
                return false;
            }
            for dm in slot.keys() {
                if dm.order() > r {
                    return false;
                }
            }
        }
        true
    }

    /// Integration-by-parts transpose with respect to `density · (coordinate
    /// Berezin–Lebesgue measure)`. Only the logarithmic gradient of the
    /// density enters; it must be supplied as exact chart functions.
    pub fn transpose(&self, dlog: &DensityGrad) -> Result<SuperDiffOp, OpError> {
        let chart = &self.chart;
        let mut out = SuperDiffOp::zero(chart.clone());
        let mut wacc: Option<Window> = None;
        for (&r, slot) in &self.terms {
            for (dm, c) in slot {
                // factors: [c·, D1, ..., Dn]; transpose reverses with Koszul sign
                let word = dm.word();
                let mut parities: Vec<u8> = vec![c.parity().ok_or(OpError::MixedParity)?];
                parities.extend(word.iter().map(|d| d.parity()));
                let mut cross = 0u32;
                for i in 0..parities.len() {
                    for j in (i + 1)..parities.len() {
                        cross += (parities[i] & parities[j]) as u32;
                    }
                }
                let mut acc = SuperDiffOp::mult_op(&SuperSeries::from_superpoly(
                    chart.clone(),
                    0,
                    c.clone(),
                ));
                for d in word {
                    let dt = transpose_deriv(chart, d, dlog);
                    acc = dt.compose(&acc)?;
                }
                if cross & 1 == 1 {
                    acc = acc.neg();
                }
                let shifted = acc.nu_shift(r);
                wacc = Some(match wacc {
                    None => shifted.window,
                    Some(w) => w.meet(&shifted.window),
                });
                out = out.add(&shifted);
            }
        }
        if let Some(w) = wacc {
            out.window = w;
        }
        Ok(out)
    }

    /// `e^K A e^{−K} = Σ (ad K)^n A / n!` for even `K`; the series terminates
    /// because each `ad` lowers the differential order.
    pub fn conjugate_by_exp(&self, k: &SuperSeries) -> Result<SuperDiffOp, OpError> {
        if k.parity() == Some(1) {
            return Err(OpError::PreconditionViolated);
        }
        let kf = if k.is_zero() { 1 } else { k.fdeg().unwrap_or(1) };
        if kf < 0 {
            // allowed only for operators whose every coefficient is a base
            // function and whose derivatives are base derivatives
            if kf < -1 {
                return Err(OpError::PreconditionViolated);
            }
            let base_ok = self.terms.values().all(|slot| {
                slot.iter().all(|(dm, c)| {
                    dm.fiber_order() == 0
                        && c.terms.keys().all(|m| m.degree() == 0)
                })
            });
            if !base_ok {
                return Err(OpError::PreconditionViolated);
            }
        }
        let kop = SuperDiffOp::mult_op(k);
        let mut acc = self.clone();
        let mut term = self.clone();
        let mut n: i64 = 0;
        while !term.is_zero() {
            n += 1;
            let t = kop.compose(&term)?.sub(&term.compose(&kop)?);
            term = t.mul_scalar(&Scalar::from_ratio(1, n));
            if term.is_zero() {
                let w = acc.window.meet(&term.window);
                acc.window = w;
                return Ok(acc.truncate());
            }
            acc = acc.add(&term);
        }
        Ok(acc)
    }
}

/// Log-gradient of a density in the base directions.
#[derive(Clone)]
pub struct DensityGrad {
    pub dz: Vec<SuperSeries>,
    pub dzbar: Vec<SuperSeries>,
}

fn transpose_deriv(chart: &Arc<Chart>, d: Deriv, dlog: &DensityGrad) -> SuperDiffOp {
    let neg = SuperDiffOp::deriv_op(chart.clone(), d).neg();
    match d {
        Deriv::Z(k) => neg.sub(&SuperDiffOp::mult_op(&dlog.dz[k])),
        Deriv::Zbar(l) => neg.sub(&SuperDiffOp::mult_op(&dlog.dzbar[l])),
        _ => neg,
    }
}

/// One Leibniz step: normal-order `d ∘ Σ cᵢ·∂^{γᵢ}`.
fn compose_single(
    d: Deriv,
    parts: Vec<(SuperPoly, DerivMono)>,
    chart: &Arc<Chart>,
) -> Vec<(SuperPoly, DerivMono)> {
    let mut out: Vec<(SuperPoly, DerivMono)> = Vec::new();
    for (c, gamma) in parts {
        // derivative of the coefficient
        let dc = match d {
            Deriv::Z(k) => c.partial_z(k),
            Deriv::Zbar(l) => c.partial_zbar(l),
            Deriv::Eta(k) => c.d_eta(k),
            Deriv::Etabar(l) => c.d_etabar(l),
            Deriv::Theta(k) => c.d_theta(k),
            Deriv::Thetabar(l) => c.d_thetabar(l),
        };
        if !dc.is_zero() {
            out.push((dc, gamma.clone()));
        }
        // pass-through term with Koszul sign (−1)^{|d||c|}, monomial-wise
        if let Some((merged, msign)) = gamma.prepend(d) {
            if d.parity() == 0 {
                let mut v = c;
                if msign < 0 {
                    v = v.neg();
                }
                out.push((v, merged));
            } else {
                let mut even = SuperPoly::zero(chart.clone());
                let mut odd = SuperPoly::zero(chart.clone());
                for (m, coeff) in &c.terms {
                    if m.parity() == 0 {
                        even.insert_add(m.clone(), coeff.clone());
                    } else {
                        odd.insert_add(m.clone(), coeff.clone());
                    }
                }
                let mut v = even.sub(&odd);
                if msign < 0 {
                    v = v.neg();
                }
                if !v.is_zero() {
                    out.push((v, merged));
                }
            }
        }
    }
    // merge duplicates
    let mut merged: BTreeMap<DerivMono, SuperPoly> = BTreeMap::new();
    for (c, dm) in out {
        match merged.entry(dm) {
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
    merged.into_iter().map(|(dm, c)| (c, dm)).collect()
}

impl fmt::Debug for SuperDiffOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (r, slot) in &self.terms {
            for (dm, c) in slot {
                if !first {
                    write!(f, " + ")?;
                }
                first = false;
                write!(f, "nu^{}*({})*{:?}", r, c, dm)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{Chart, CoeffExpr};
    use crate::series::fiber_mono;

    fn chart(m: usize) -> Arc<Chart> {
        Chart::new(m, vec![], vec![]).unwrap()
    }

    fn theta_series(ch: &Arc<Chart>, k: usize) -> SuperSeries {
        SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::theta(ch.clone(), k))
    }

    #[test]
    fn left_odd_derivative_action() {
        let ch = chart(1);
        let d = SuperDiffOp::deriv_op(ch.clone(), Deriv::Theta(0));
        let th = theta_series(&ch, 0);
        let thb = SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::thetabar(ch.clone(), 0));
        let w = th.mul(&thb).unwrap();
        assert_eq!(
            d.apply(&w).unwrap().canonical_text(),
            thb.canonical_text()
        );
        let w2 = thb.mul(&th).unwrap();
        assert_eq!(
            d.apply(&w2).unwrap().canonical_text(),
            thb.neg().canonical_text()
        );
    }

    #[test]
    fn canonical_anticommutation() {
        // [∂/∂θ, θ·]₊ = 1
        let ch = chart(1);
        let d = SuperDiffOp::deriv_op(ch.clone(), Deriv::Theta(0));
        let m = SuperDiffOp::mult_op(&theta_series(&ch, 0));
        let s = d.supercommutator(&m).unwrap();
        let id = SuperDiffOp::identity(ch.clone());
        assert!(s.sub(&id).is_zero());
    }

    #[test]
    fn heisenberg_base() {
        // [∂/∂z, z·] = 1
        let ch = chart(1);
        let d = SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0));
        let z = SuperSeries::from_coeff(CoeffExpr::z(ch.clone(), 0));
        let m = SuperDiffOp::mult_op(&z);
        let c = d.compose(&m).unwrap().sub(&m.compose(&d).unwrap());
        assert!(c.sub(&SuperDiffOp::identity(ch.clone())).is_zero());
    }

    #[test]
    fn odd_supercommutator_squares() {
        let ch = chart(1);
        let m = SuperDiffOp::mult_op(&theta_series(&ch, 0));
        // [θ·, θ·]₊ = 2θ² = 0
        let s = m.supercommutator(&m).unwrap();
        assert!(s.is_zero());
    }

    #[test]
    fn compose_matches_apply() {
        let ch = chart(2);
        // A = θ¹·∂θ², B = η¹·∂θ¹ on a few test elements
        let a = SuperDiffOp::mult_op(&theta_series(&ch, 0))
            .compose(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Theta(1)))
            .unwrap();
        let b = SuperDiffOp::mult_op(&SuperSeries::from_superpoly(
            ch.clone(),
            0,
            SuperPoly::eta(ch.clone(), 0),
        ))
        .compose(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Theta(0)))
        .unwrap();
        let ab = a.compose(&b).unwrap();
        for (th, thb) in [(0b11u32, 0b00u32), (0b01, 0b01), (0b11, 0b10), (0b10, 0b11)] {
            let m = fiber_mono(&ch, &[0, 1], &[1, 0], th, thb);
            let f = SuperSeries::from_superpoly(
                ch.clone(),
                0,
                SuperPoly::monomial(m, CoeffExpr::one(ch.clone())),
            );
            let lhs = ab.apply(&f).unwrap();
            let rhs = a.apply(&b.apply(&f).unwrap()).unwrap();
            assert_eq!(lhs.canonical_text(), rhs.canonical_text());
        }
    }

    #[test]
    fn naturality_examples() {
        let ch = chart(1);
        let id = SuperDiffOp::identity(ch.clone());
        assert!(id.naturality_check());
        assert!(!id.nu_shift(-1).naturality_check());
        let d2 = SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0))
            .compose(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0)))
            .unwrap();
        assert!(!d2.nu_shift(1).naturality_check());
        assert!(d2.nu_shift(2).naturality_check());
    }

    #[test]
    fn conjugation_single_correction() {
        // e^K ∂η e^{−K} = ∂η − ν⁻¹η̄ for K = ν⁻¹ηη̄
        let ch = chart(1);
        let k = SuperSeries::from_superpoly(
            ch.clone(),
            -1,
            SuperPoly::eta(ch.clone(), 0).mul(&SuperPoly::etabar(ch.clone(), 0)),
        );
        let d = SuperDiffOp::deriv_op(ch.clone(), Deriv::Eta(0));
        let conj = d.conjugate_by_exp(&k).unwrap();
        let etab =
            SuperSeries::from_superpoly(ch.clone(), -1, SuperPoly::etabar(ch.clone(), 0));
        let expect = d.sub(&SuperDiffOp::mult_op(&etab));
        assert!(conj.sub(&expect).is_zero());
        // sanity through application to η:
        // e^K ∂η e^{−K} (η) = 1 − ν⁻¹η̄η
        let eta = SuperSeries::from_superpoly(ch.clone(), 0, SuperPoly::eta(ch.clone(), 0));
        let got = conj.apply(&eta).unwrap();
        let expect2 = SuperSeries::one(ch.clone()).sub(
            &etab
                .mul(&eta)
                .unwrap(),
        );
        assert_eq!(got.canonical_text(), expect2.canonical_text());
    }

    #[test]
    fn conjugation_identity_for_zero() {
        let ch = chart(1);
        let d = SuperDiffOp::deriv_op(ch.clone(), Deriv::Zbar(0));
        let conj = d.conjugate_by_exp(&SuperSeries::zero(ch.clone())).unwrap();
        assert!(conj.sub(&d).is_zero());
    }

    #[test]
    fn transpose_rules_and_involution() {
        let ch = chart(1);
        // density 1: (∂η)^t = −∂η, (∂z)^t = −∂z
        let triv = DensityGrad {
            dz: vec![SuperSeries::zero(ch.clone())],
            dzbar: vec![SuperSeries::zero(ch.clone())],
        };
        let de = SuperDiffOp::deriv_op(ch.clone(), Deriv::Eta(0));
        assert!(de.transpose(&triv).unwrap().sub(&de.neg()).is_zero());
        // with a density gradient: (∂z)^t = −∂z − (∂z log ρ)·
        let g = SuperSeries::from_coeff(CoeffExpr::zbar(ch.clone(), 0));
        let dlog = DensityGrad {
            dz: vec![g.clone()],
            dzbar: vec![SuperSeries::zero(ch.clone())],
        };
        let dz = SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0));
        let t = dz.transpose(&dlog).unwrap();
        let expect = dz.neg().sub(&SuperDiffOp::mult_op(&g));
        assert!(t.sub(&expect).is_zero());
        // involution on a composite odd operator
        let a = SuperDiffOp::mult_op(&theta_series(&ch, 0))
            .compose(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0)))
            .unwrap()
            .add(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Thetabar(0)));
        let tt = a
            .transpose(&dlog)
            .unwrap()
            .transpose(&dlog)
            .unwrap();
        assert!(tt.sub(&a).is_zero());
    }

    #[test]
    fn transpose_antihomomorphism() {
        let ch = chart(1);
        let dlog = DensityGrad {
            dz: vec![SuperSeries::from_coeff(CoeffExpr::zbar(ch.clone(), 0))],
            dzbar: vec![SuperSeries::from_coeff(CoeffExpr::z(ch.clone(), 0))],
        };
        let a = SuperDiffOp::deriv_op(ch.clone(), Deriv::Theta(0));
        let b = SuperDiffOp::mult_op(&theta_series(&ch, 0))
            .compose(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0)))
            .unwrap();
        // (AB)^t = (−1)^{|A||B|} B^t A^t
        let ab_t = a.compose(&b).unwrap().transpose(&dlog).unwrap();
        let bt_at = b
            .transpose(&dlog)
            .unwrap()
            .compose(&a.transpose(&dlog).unwrap())
            .unwrap();
        let sign_needed = (a.parity().unwrap() & b.parity().unwrap()) == 1;
        let rhs = if sign_needed { bt_at.neg() } else { bt_at };
        assert!(ab_t.sub(&rhs).is_zero());
    }
}

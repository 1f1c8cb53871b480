//! The star product with separation of variables on a chart: left/right
//! multiplication operators from the formal potential, bidifferential
//! coefficients, the formal Berezin transform, the canonical trace density,
//! and the explicit ν-derivation.

use crate::coeff::{AtomDef, Chart, CoeffExpr};
use crate::diffop::{DensityGrad, Deriv, DerivMono, SuperDiffOp};
use crate::fiber::SuperPoly;
use crate::geometry::Geometry;
use crate::poly::{Mono, Poly};
use crate::scalar::Scalar;
use crate::series::{SeriesError, SuperSeries};
use crate::solve::{build_mult_op, potential_gradient, MultCondition, SolveError, SolveSpec};
use crate::window::{Kind, Window, NEG_INF, POS_INF};
use num_rational::BigRational;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceError {
    NonClosedGradient,
    NonExpressible(String),
    Solve(String),
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::NonClosedGradient => write!(f, "gradient equations are not closed"),
            TraceError::NonExpressible(m) => {
                write!(f, "potential leaves the atom algebra: {}", m)
            }
            TraceError::Solve(m) => write!(f, "{}", m),
        }
    }
}

impl std::error::Error for TraceError {}

impl From<SolveError> for TraceError {
    fn from(e: SolveError) -> Self {
        TraceError::Solve(e.to_string())
    }
}

impl From<SeriesError> for TraceError {
    fn from(e: SeriesError) -> Self {
        TraceError::Solve(e.to_string())
    }
}

/// Left star-multiplication operator `L_f` for a base formal function,
/// characterized by commutation with `z̄^l·` and `∂Φ/∂z̄^l + ∂/∂z̄^l` and by
/// `L_f 1 = f`, solved order by order against the metric pairing.
pub fn left_op(geom: &Geometry, f: &SuperSeries, nu_max: i64) -> Result<SuperDiffOp, SolveError> {
    let m = geom.m();
    let spec = SolveSpec {
        allowed: (0..m).map(Deriv::Z).collect(),
        conditions: (0..m)
            .map(|l| MultCondition {
                bar: Deriv::Zbar(l),
                w: potential_gradient(&geom.chart, &geom.potential, false, l),
            })
            .collect(),
        nu_max,
    };
    build_mult_op(f, &spec)
}

/// Right star-multiplication operator `R_f` for a base formal function.
pub fn right_op(geom: &Geometry, f: &SuperSeries, nu_max: i64) -> Result<SuperDiffOp, SolveError> {
    let m = geom.m();
    let spec = SolveSpec {
        allowed: (0..m).map(Deriv::Zbar).collect(),
        conditions: (0..m)
            .map(|k| MultCondition {
                bar: Deriv::Z(k),
                w: potential_gradient(&geom.chart, &geom.potential, true, k),
            })
            .collect(),
        nu_max,
    };
    build_mult_op(f, &spec)
}

/// `f ⋆ g` truncated at the solve depth.
pub fn star(
    geom: &Geometry,
    f: &SuperSeries,
    g: &SuperSeries,
    nu_max: i64,
) -> Result<SuperSeries, SolveError> {
    let lf = left_op(geom, f, nu_max)?;
    Ok(lf.apply(g)?)
}

/// Bidifferential coefficients: `C_r(f,g) = Σ c_r^{βα} (∂̄^β f)(∂^α g)`.
pub struct BidiffTable {
    pub m: usize,
    pub nu_max: i64,
    /// (r, β, α) → coefficient, β the antiholomorphic multi-index acting on
    /// the first argument.
    pub coeffs: BTreeMap<(i64, Vec<u16>, Vec<u16>), CoeffExpr>,
}

impl BidiffTable {
    /// Largest derivative order on either argument at ν^r.
    pub fn max_orders(&self, r: i64) -> (u32, u32) {
        let mut bo = 0;
        let mut ao = 0;
        for ((rr, beta, alpha), c) in &self.coeffs {
            if *rr == r && !c.is_zero() {
                bo = bo.max(beta.iter().map(|&e| e as u32).sum());
                ao = ao.max(alpha.iter().map(|&e| e as u32).sum());
            }
        }
        (bo, ao)
    }

    pub fn apply(&self, f: &SuperSeries, g: &SuperSeries) -> Result<SuperSeries, SeriesError> {
        let chart = f.chart.clone();
        let mut acc = SuperSeries::zero(chart.clone());
        for ((r, beta, alpha), c) in &self.coeffs {
            let mut df = f.clone();
            for (l, &e) in beta.iter().enumerate() {
                for _ in 0..e {
                    df = df.partial_zbar(l);
                }
            }
            let mut dg = g.clone();
            for (k, &e) in alpha.iter().enumerate() {
                for _ in 0..e {
                    dg = dg.partial_z(k);
                }
            }
            acc = acc.add(&df.mul(&dg)?.mul_coeff(c).nu_shift(*r));
        }
        Ok(acc)
    }
}

/// Extract the bidifferential table by running the triangular solve on a
/// generic antiholomorphic jet adjoined to the chart as a family of atoms.
pub fn extract_bidiff(geom: &Geometry, nu_max: i64) -> Result<BidiffTable, SolveError> {
    let m = geom.m();
    let base = &geom.chart;
    let jet_order = (nu_max.max(0) as usize) + 1;
    // multi-indices over m variables up to |β| ≤ jet_order, deterministic order
    let mut multis: Vec<Vec<u16>> = vec![vec![0; m]];
    let mut frontier = multis.clone();
    for _ in 0..jet_order {
        let mut next = Vec::new();
        for mu in &frontier {
            for l in 0..m {
                let mut nu = mu.clone();
                nu[l] += 1;
                if !multis.contains(&nu) {
                    multis.push(nu.clone());
                    next.push(nu);
                }
            }
        }
        frontier = next;
    }
    multis.sort();
    let jet_index: BTreeMap<Vec<u16>, usize> = multis
        .iter()
        .enumerate()
        .map(|(i, mu)| (mu.clone(), i))
        .collect();

    let nv_base = base.nvars();
    let nv = nv_base + multis.len();
    let lift = |p: &Poly| -> Poly {
        let mut out = Poly::zero(nv);
        for (mono, c) in &p.terms {
            let mut e = mono.0.clone();
            e.resize(nv, 0);
            out = out.add(&Poly::monomial(nv, Mono(e), c.clone()));
        }
        out
    };

    let mut atoms: Vec<AtomDef> = base
        .atoms
        .iter()
        .map(|a| AtomDef {
            name: a.name.clone(),
            dz: a.dz.iter().map(&lift).collect(),
            dzbar: a.dzbar.iter().map(&lift).collect(),
        })
        .collect();
    for mu in &multis {
        let total: u16 = mu.iter().sum();
        let mut dzbar = Vec::new();
        for l in 0..m {
            let mut nu_idx = mu.clone();
            nu_idx[l] += 1;
            if (total as usize) < jet_order {
                let j = jet_index[&nu_idx];
                dzbar.push(Poly::var(nv, nv_base + j));
            } else {
                dzbar.push(Poly::zero(nv));
            }
        }
        atoms.push(AtomDef {
            name: format!("jb{:?}", mu),
            dz: vec![Poly::zero(nv); m],
            dzbar,
        });
    }
    let relations = base.relations.iter().map(&lift).collect();
    let jet_chart = Chart::new(m, atoms, relations)
        .map_err(|e| SolveError::Inconsistent(e.to_string()))?
        .with_trunc(base.trunc);

    // geometry data transfers by lifting the potential
    let potential: BTreeMap<i64, CoeffExpr> = geom
        .potential
        .iter()
        .map(|(&r, c)| {
            let num = lift(&c.num);
            let den = lift(&c.den);
            (
                r,
                CoeffExpr::from_poly(jet_chart.clone(), num)
                    .div(&CoeffExpr::from_poly(jet_chart.clone(), den))
                    .expect("lifted denominator nonzero"),
            )
        })
        .collect();

    let jet0 = base.atoms.len();
    let f = SuperSeries::from_coeff(CoeffExpr::atom(jet_chart.clone(), jet0 + jet_index[&vec![0u16; m]]));
    let spec = SolveSpec {
        allowed: (0..m).map(Deriv::Z).collect(),
        conditions: (0..m)
            .map(|l| MultCondition {
                bar: Deriv::Zbar(l),
                w: potential_gradient(&jet_chart, &potential, false, l),
            })
            .collect(),
        nu_max,
    };
    let lf = build_mult_op(&f, &spec)?;

    // read off coefficients, linear in the jet atoms
    let mut coeffs: BTreeMap<(i64, Vec<u16>, Vec<u16>), CoeffExpr> = BTreeMap::new();
    for (&r, slot) in &lf.terms {
        for (dm, c) in slot {
            let alpha: Vec<u16> = dm.dz.clone();
            debug_assert!(dm.fiber_order() == 0 && dm.dzbar.iter().all(|&e| e == 0));
            for (mono, _) in &c.terms {
                debug_assert!(mono.is_unit());
            }
            let coeff = c
                .terms
                .get(&crate::fiber::FiberMono::unit(m))
                .cloned()
                .unwrap_or_else(|| CoeffExpr::zero(jet_chart.clone()));
            // denominator must be jet-free
            for v in nv_base..nv {
                if coeff.den.degree_in(v) > 0 {
                    return Err(SolveError::Inconsistent(
                        "jet atoms in a denominator".into(),
                    ));
                }
            }
            // split the numerator by jet content
            let mut by_jet: BTreeMap<usize, Poly> = BTreeMap::new();
            for (mono, s) in &coeff.num.terms {
                let jet_vars: Vec<usize> = (nv_base..nv)
                    .filter(|&v| mono.0[v] > 0)
                    .collect();
                match jet_vars.len() {
                    1 if mono.0[jet_vars[0]] == 1 => {
                        let mut e = mono.0.clone();
                        e[jet_vars[0]] = 0;
                        let entry = by_jet
                            .entry(jet_vars[0] - nv_base)
                            .or_insert_with(|| Poly::zero(nv));
                        *entry = entry.add(&Poly::monomial(nv, Mono(e), s.clone()));
                    }
                    0 => {
                        return Err(SolveError::Inconsistent(
                            "jet-free term in a multiplication coefficient".into(),
                        ));
                    }
                    _ => {
                        return Err(SolveError::Inconsistent(
                            "nonlinear jet dependence".into(),
                        ));
                    }
                }
            }
            for (jet, num) in by_jet {
                let beta = multis[jet].clone();
                // project back to the base chart
                let drop = |p: &Poly| -> Poly {
                    let mut out = Poly::zero(nv_base);
                    for (mono, s) in &p.terms {
                        debug_assert!(mono.0[nv_base..].iter().all(|&e| e == 0));
                        out = out.add(&Poly::monomial(
                            nv_base,
                            Mono(mono.0[..nv_base].to_vec()),
                            s.clone(),
                        ));
                    }
                    out
                };
                let val = CoeffExpr::from_poly(base.clone(), drop(&num))
                    .div(&CoeffExpr::from_poly(base.clone(), drop(&coeff.den)))
                    .expect("base denominator nonzero");
                if !val.is_zero() {
                    let key = (r, beta, alpha.clone());
                    let acc = coeffs
                        .entry(key)
                        .or_insert_with(|| CoeffExpr::zero(base.clone()));
                    *acc = acc.add(&val);
                }
            }
        }
    }
    Ok(BidiffTable {
        m,
        nu_max,
        coeffs,
    })
}

/// The formal Berezin transform `Σ ν^r Σ c_r^{βα} ∂̄^β ∂^α` as an operator.
pub fn berezin_op(geom: &Geometry, table: &BidiffTable) -> SuperDiffOp {
    let chart = geom.chart.clone();
    let m = geom.m();
    let mut op = SuperDiffOp::zero(chart.clone());
    for ((r, beta, alpha), c) in &table.coeffs {
        let mut dm = DerivMono::unit(m);
        dm.dz = alpha.clone();
        dm.dzbar = beta.clone();
        op.insert_add(*r, dm, SuperPoly::from_coeff(c.clone()));
    }
    op.window = Window {
        kind: Kind::Op,
        nu_min: NEG_INF,
        nu_max: table.nu_max,
        deg_max: POS_INF,
        fdeg: 0,
        ceil: POS_INF,
        shape: 0,
        nat: 0,
    };
    op
}

/// Inverse of the Berezin transform as a formal operator, through the table's
/// ν-depth.
pub fn berezin_inverse_op(geom: &Geometry, table: &BidiffTable) -> SuperDiffOp {
    let chart = geom.chart.clone();
    let i_op = berezin_op(geom, table);
    let one = SuperDiffOp::identity(chart.clone());
    let defect = one.sub(&i_op); // ν-filtration ≥ 1
    let mut acc = SuperDiffOp::identity(chart.clone());
    let mut power = SuperDiffOp::identity(chart.clone());
    for _ in 1..=table.nu_max.max(0) {
        power = power.compose(&defect).expect("berezin inverse window");
        acc = acc.add(&power);
    }
    acc.window = i_op.window;
    acc.truncate()
}

/// The explicit ν-derivation `d/dν + mult − op`, shared by the base and super
/// products.
pub struct NuDerivation {
    pub mult: SuperSeries,
    pub op: SuperDiffOp,
}

impl NuDerivation {
    pub fn apply(&self, f: &SuperSeries) -> Result<SuperSeries, SeriesError> {
        let a = f.d_dnu();
        let b = f.mul(&self.mult)?;
        let c = self.op.apply(f)?;
        Ok(a.add(&b).sub(&c))
    }
}

/// δ⋆ = d/dν + dΦ/dν − R⋆_{dΦ/dν}.
pub fn delta_star(geom: &Geometry, nu_max: i64) -> Result<NuDerivation, SolveError> {
    let chart = geom.chart.clone();
    let dphi = geom.potential_nu_derivative();
    let mult = SuperSeries::from_slots(
        chart.clone(),
        dphi.iter()
            .map(|(&r, c)| (r, SuperPoly::from_coeff(c.clone())))
            .collect(),
    );
    let op = right_op(geom, &mult, nu_max)?;
    Ok(NuDerivation { mult, op })
}

/// Canonical trace density data: `ρ` with `μ⋆ = ρ · dz dz̄`, its logarithmic
/// gradient, and the solved dual potential terms.
pub struct TraceDensity {
    pub rho: SuperSeries,
    pub dlog: DensityGrad,
    /// Ψ_r for r ≥ 0 (Ψ₋₁ = −Φ₋₁ is implicit).
    pub psi: BTreeMap<i64, CoeffExpr>,
}

/// Solve the dual-potential gradient equations order by order and normalize
/// the leading term to `ν^{−m} det g`.
pub fn trace_density(geom: &Geometry, nu_max: i64) -> Result<TraceDensity, TraceError> {
    let chart = geom.chart.clone();
    let m = geom.m();
    let table = extract_bidiff(geom, nu_max + 1)?;

    // gradient slots of Ψ: start with Ψ₋₁ = −Φ₋₁
    let phi_min = geom.potential.get(&-1).unwrap().clone();
    let mut dpsi_z: BTreeMap<i64, Vec<CoeffExpr>> = BTreeMap::new();
    let mut dpsi_zbar: BTreeMap<i64, Vec<CoeffExpr>> = BTreeMap::new();
    dpsi_z.insert(-1, (0..m).map(|k| phi_min.partial_z(k).neg()).collect());
    dpsi_zbar.insert(-1, (0..m).map(|l| phi_min.partial_zbar(l).neg()).collect());

    let apply_ij = |j: i64, g: &CoeffExpr| -> CoeffExpr {
        let mut acc = CoeffExpr::zero(chart.clone());
        for ((r, beta, alpha), c) in &table.coeffs {
            if *r != j {
                continue;
            }
            let mut d = g.clone();
            for (l, &e) in beta.iter().enumerate() {
                for _ in 0..e {
                    d = d.partial_zbar(l);
                }
            }
            for (k, &e) in alpha.iter().enumerate() {
                for _ in 0..e {
                    d = d.partial_z(k);
                }
            }
            acc = acc.add(&d.mul(c));
        }
        acc
    };

    let mut psi: BTreeMap<i64, CoeffExpr> = BTreeMap::new();
    for r in 0..=nu_max {
        // ∂Ψ_r/∂z^k = −(∂Φ/∂z^k)_r − Σ_{j=1}^{r+1} I_j((∂Ψ/∂z^k)_{r−j})
        let mut rhs_z = Vec::new();
        let mut rhs_zbar = Vec::new();
        for k in 0..m {
            let mut acc = geom
                .potential
                .get(&r)
                .map(|p| p.partial_z(k).neg())
                .unwrap_or_else(|| CoeffExpr::zero(chart.clone()));
            for j in 1..=(r + 1) {
                if let Some(v) = dpsi_z.get(&(r - j)) {
                    acc = acc.sub(&apply_ij(j, &v[k]));
                }
            }
            rhs_z.push(acc);
        }
        for l in 0..m {
            let mut acc = geom
                .potential
                .get(&r)
                .map(|p| p.partial_zbar(l).neg())
                .unwrap_or_else(|| CoeffExpr::zero(chart.clone()));
            for j in 1..=(r + 1) {
                if let Some(v) = dpsi_zbar.get(&(r - j)) {
                    acc = acc.sub(&apply_ij(j, &v[l]));
                }
            }
            rhs_zbar.push(acc);
        }
        // closedness
        for k in 0..m {
            for l in 0..m {
                if !rhs_z[k].partial_zbar(l).equal(&rhs_zbar[l].partial_z(k)) {
                    return Err(TraceError::NonClosedGradient);
                }
            }
        }
        let psi_r = antidifferentiate(&chart, &rhs_z, &rhs_zbar)?;
        dpsi_z.insert(r, (0..m).map(|k| psi_r.partial_z(k)).collect());
        dpsi_zbar.insert(r, (0..m).map(|l| psi_r.partial_zbar(l)).collect());
        psi.insert(r, psi_r);
    }

    // normalization: gradients of Φ₀ + Ψ₀ must match ∂ log det g
    let zero = CoeffExpr::zero(chart.clone());
    let e0 = geom
        .potential
        .get(&0)
        .unwrap_or(&zero)
        .add(psi.get(&0).unwrap());
    for k in 0..m {
        if !e0.partial_z(k).equal(&geom.dlog_g_z[k]) {
            return Err(TraceError::NonExpressible(
                "leading normalization gradient mismatch".into(),
            ));
        }
    }

    // ρ = ν^{−m} det g · exp(Σ_{r≥1} ν^r (Φ_r + Ψ_r))
    let mut tail = SuperSeries::zero(chart.clone());
    for r in 1..=nu_max {
        let er = geom
            .potential
            .get(&r)
            .unwrap_or(&zero)
            .add(psi.get(&r).unwrap());
        if !er.is_zero() {
            tail = tail.add(&SuperSeries::from_coeff(er).nu_shift(r));
        }
    }
    let w_plus = exp_base_series(&tail, nu_max)?;
    let w_minus = exp_base_series(&tail.neg(), nu_max)?;
    let rho = w_plus
        .mul_coeff(&geom.det_g)
        .nu_shift(-(m as i64))
        .with_window(Window {
            kind: Kind::Series,
            nu_min: NEG_INF,
            nu_max: nu_max - m as i64,
            deg_max: POS_INF,
            fdeg: -2 * (m as i64),
            ceil: POS_INF,
            shape: NEG_INF,
            nat: NEG_INF,
        });

    // ∂ log ρ = ∂ log det g + (∂ tail-exp)·(tail-exp)⁻¹
    let mut dz = Vec::new();
    let mut dzbar = Vec::new();
    for k in 0..m {
        let d = w_plus
            .partial_z(k)
            .mul(&w_minus)?
            .add(&SuperSeries::from_coeff(geom.dlog_g_z[k].clone()));
        dz.push(truncate_base(d, nu_max));
    }
    for l in 0..m {
        let d = w_plus
            .partial_zbar(l)
            .mul(&w_minus)?
            .add(&SuperSeries::from_coeff(geom.dlog_g_zbar[l].clone()));
        dzbar.push(truncate_base(d, nu_max));
    }

    Ok(TraceDensity {
        rho,
        dlog: DensityGrad { dz, dzbar },
        psi,
    })
}

fn truncate_base(s: SuperSeries, nu_max: i64) -> SuperSeries {
    let w = Window {
        nu_max,
        ..s.window
    };
    s.with_window(w)
}

/// exp of a base formal function with ν-filtration ≥ 1, truncated at ν^depth.
fn exp_base_series(tail: &SuperSeries, depth: i64) -> Result<SuperSeries, SeriesError> {
    let chart = tail.chart.clone();
    let mut acc = SuperSeries::one(chart.clone());
    let mut term = SuperSeries::one(chart.clone());
    for n in 1..=depth.max(0) {
        term = term.mul(tail)?.mul_scalar(&Scalar::from_ratio(1, n));
        term = truncate_base(term, depth);
        if term.is_zero() {
            break;
        }
        acc = acc.add(&term);
    }
    Ok(truncate_base(acc, depth))
}

/// Scalar-coefficient linear-ansatz antidifferentiation in the atom algebra.
fn antidifferentiate(
    chart: &Arc<Chart>,
    rhs_z: &[CoeffExpr],
    rhs_zbar: &[CoeffExpr],
) -> Result<CoeffExpr, TraceError> {
    if rhs_z.iter().all(|c| c.is_zero()) && rhs_zbar.iter().all(|c| c.is_zero()) {
        return Ok(CoeffExpr::zero(chart.clone()));
    }
    let nv = chart.nvars();
    for c in rhs_z.iter().chain(rhs_zbar) {
        if !c.den.is_constant() {
            return Err(TraceError::NonExpressible(
                "gradient has a non-atomic denominator".into(),
            ));
        }
    }
    // candidate monomials: per-variable bound = max rhs degree + 1
    let mut bounds = vec![0u32; nv];
    let mut total = 0u32;
    for c in rhs_z.iter().chain(rhs_zbar) {
        for (mono, _) in &c.num.terms {
            total = total.max(mono.degree());
            for v in 0..nv {
                bounds[v] = bounds[v].max(mono.0[v]);
            }
        }
    }
    for b in bounds.iter_mut() {
        *b += 1;
    }
    let total_cap = total + 2;
    let mut candidates: Vec<Mono> = Vec::new();
    let mut stack = vec![(0usize, Mono::unit(nv))];
    while let Some((v, mono)) = stack.pop() {
        if v == nv {
            if !mono.is_unit() {
                candidates.push(mono);
            }
            continue;
        }
        for e in 0..=bounds[v] {
            let mut m2 = mono.clone();
            m2.0[v] = e;
            if m2.degree() <= total_cap {
                stack.push((v + 1, m2));
            }
        }
    }
    candidates.sort();

    // linear system over scalars: Σ x_w ∂w/∂· = rhs
    let mut rows: BTreeMap<(usize, Mono), BTreeMap<usize, Scalar>> = BTreeMap::new();
    let mut rhs_map: BTreeMap<(usize, Mono), Scalar> = BTreeMap::new();
    let m = chart.m;
    let mut eqs: Vec<CoeffExpr> = Vec::new();
    eqs.extend(rhs_z.iter().cloned());
    eqs.extend(rhs_zbar.iter().cloned());
    for (w_idx, w) in candidates.iter().enumerate() {
        let wexpr = CoeffExpr::from_poly(chart.clone(), Poly::monomial(nv, w.clone(), Scalar::one()));
        for (eq, _) in eqs.iter().enumerate() {
            let d = if eq < m {
                wexpr.partial_z(eq)
            } else {
                wexpr.partial_zbar(eq - m)
            };
            debug_assert!(d.den.is_constant());
            let den = d.den.as_constant().unwrap();
            for (mono, c) in &d.num.terms {
                let entry = rows.entry((eq, mono.clone())).or_default();
                let cur = entry.entry(w_idx).or_insert_with(Scalar::zero);
                *cur = &*cur + &(c / &den);
            }
        }
    }
    for (eq, rhs) in eqs.iter().enumerate() {
        let den = rhs.den.as_constant().unwrap();
        for (mono, c) in &rhs.num.terms {
            rhs_map.insert((eq, mono.clone()), c / &den);
            rows.entry((eq, mono.clone())).or_default();
        }
    }

    // dense Gaussian elimination
    let keys: Vec<(usize, Mono)> = rows.keys().cloned().collect();
    let ncols = candidates.len();
    let mut mat: Vec<Vec<Scalar>> = keys
        .iter()
        .map(|k| {
            let row = rows.get(k).unwrap();
            (0..ncols)
                .map(|j| row.get(&j).cloned().unwrap_or_else(Scalar::zero))
                .collect()
        })
        .collect();
    let mut rhs_vec: Vec<Scalar> = keys
        .iter()
        .map(|k| rhs_map.get(k).cloned().unwrap_or_else(Scalar::zero))
        .collect();

    let nrows = mat.len();
    let mut pivot_of_col: Vec<Option<usize>> = vec![None; ncols];
    let mut rank_row = 0usize;
    for col in 0..ncols {
        let mut pr = None;
        for r in rank_row..nrows {
            if !mat[r][col].is_zero() {
                pr = Some(r);
                break;
            }
        }
        let Some(pr) = pr else { continue };
        mat.swap(rank_row, pr);
        rhs_vec.swap(rank_row, pr);
        let inv = mat[rank_row][col].inv();
        for j in 0..ncols {
            mat[rank_row][j] = &mat[rank_row][j] * &inv;
        }
        rhs_vec[rank_row] = &rhs_vec[rank_row] * &inv;
        for r in 0..nrows {
            if r != rank_row && !mat[r][col].is_zero() {
                let f = mat[r][col].clone();
                for j in 0..ncols {
                    let t = &mat[rank_row][j] * &f;
                    mat[r][j] = &mat[r][j] - &t;
                }
                let t = &rhs_vec[rank_row] * &f;
                rhs_vec[r] = &rhs_vec[r] - &t;
            }
        }
        pivot_of_col[col] = Some(rank_row);
        rank_row += 1;
        if rank_row == nrows {
            break;
        }
    }
    for r in rank_row..nrows {
        if !rhs_vec[r].is_zero() {
            return Err(TraceError::NonExpressible(
                "gradient system is inconsistent over the candidate monomials".into(),
            ));
        }
    }
    let mut x = vec![Scalar::zero(); ncols];
    for col in 0..ncols {
        if let Some(r) = pivot_of_col[col] {
            x[col] = rhs_vec[r].clone();
        }
    }
    let mut out = Poly::zero(nv);
    for (j, w) in candidates.iter().enumerate() {
        if !x[j].is_zero() {
            out = out.add(&Poly::monomial(nv, w.clone(), x[j].clone()));
        }
    }
    let res = CoeffExpr::from_poly(chart.clone(), out);
    // verify
    for k in 0..m {
        if !res.partial_z(k).equal(&rhs_z[k]) {
            return Err(TraceError::NonExpressible(
                "antiderivative verification failed".into(),
            ));
        }
    }
    for l in 0..m {
        if !res.partial_zbar(l).equal(&rhs_zbar[l]) {
            return Err(TraceError::NonExpressible(
                "antiderivative verification failed".into(),
            ));
        }
    }
    Ok(res)
}

/// Poisson bracket `{f,g} = i g^{l̄k}(∂_k f ∂̄_l g − ∂̄_l f ∂_k g)`, the
/// independent oracle for the first-order antisymmetry of the product.
pub fn poisson_bracket(geom: &Geometry, f: &CoeffExpr, g: &CoeffExpr) -> CoeffExpr {
    let m = geom.m();
    let mut acc = CoeffExpr::zero(geom.chart.clone());
    for k in 0..m {
        for l in 0..m {
            let t = f
                .partial_z(k)
                .mul(&g.partial_zbar(l))
                .sub(&f.partial_zbar(l).mul(&g.partial_z(k)));
            acc = acc.add(&t.mul(&geom.metric_inv[l][k]));
        }
    }
    acc.mul_scalar(&Scalar::i())
}

/// Convenience: a base coefficient as a ν⁰ series.
pub fn base_fn(c: CoeffExpr) -> SuperSeries {
    SuperSeries::from_coeff(c)
}

/// Convenience: rational scalar.
pub fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cp1, flat};
    use crate::window::Trunc;

    fn trunc() -> Trunc {
        Trunc {
            nu_min: -10,
            deg_max: 24,
        }
    }

    #[test]
    fn flat_left_mult_of_zbar() {
        let g = flat(1, trunc()).unwrap();
        let ch = g.chart.clone();
        let zb = base_fn(CoeffExpr::zbar(ch.clone(), 0));
        let lf = left_op(&g, &zb, 4).unwrap();
        // L_z̄ = z̄ + ν ∂/∂z
        let expect = SuperDiffOp::mult_op(&zb)
            .add(&SuperDiffOp::deriv_op(ch.clone(), Deriv::Z(0)).nu_shift(1));
        assert!(lf.sub(&expect).is_zero());
        // z̄ ⋆ z = zz̄ + ν
        let z = base_fn(CoeffExpr::z(ch.clone(), 0));
        let prod = lf.apply(&z).unwrap();
        let expect = z
            .mul(&zb)
            .unwrap()
            .add(&SuperSeries::nu_power(ch.clone(), 1));
        assert_eq!(prod.canonical_text(), expect.canonical_text());
        // z ⋆ z̄ = zz̄ pointwise
        let prod2 = star(&g, &z, &zb, 4).unwrap();
        assert_eq!(prod2.canonical_text(), z.mul(&zb).unwrap().canonical_text());
    }

    #[test]
    fn unit_is_identity() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let one = SuperSeries::one(ch.clone());
        let f = base_fn(
            CoeffExpr::z(ch.clone(), 0)
                .mul(&CoeffExpr::zbar(ch.clone(), 0))
                .add(&CoeffExpr::atom(ch.clone(), 0)),
        );
        let a = star(&g, &one, &f, 3).unwrap();
        let b = star(&g, &f, &one, 3).unwrap();
        assert_eq!(a.canonical_text(), f.canonical_text());
        assert_eq!(b.canonical_text(), f.canonical_text());
    }

    #[test]
    fn cp1_first_order_coefficient() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let z = base_fn(CoeffExpr::z(ch.clone(), 0));
        let zb = base_fn(CoeffExpr::zbar(ch.clone(), 0));
        let prod = star(&g, &zb, &z, 2).unwrap();
        // z̄⋆z = zz̄ + ν(1+zz̄)² + O(ν²)
        let opz = CoeffExpr::one(ch.clone())
            .add(&CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0)));
        let nu1 = prod.slot(1);
        let expect = SuperPoly::from_coeff(opz.mul(&opz));
        assert!(nu1.sub(&expect).is_zero());
        let nu0 = prod.slot(0);
        assert!(nu0.sub(&SuperPoly::from_coeff(
            CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0))
        ))
        .is_zero());
    }

    #[test]
    fn first_order_antisymmetry_is_poisson() {
        for g in [flat(1, trunc()).unwrap(), cp1(trunc()).unwrap()] {
            let ch = g.chart.clone();
            let z = CoeffExpr::z(ch.clone(), 0);
            let zb = CoeffExpr::zbar(ch.clone(), 0);
            let f = zb.clone();
            let h = z.clone();
            let fg = star(&g, &base_fn(f.clone()), &base_fn(h.clone()), 2).unwrap();
            let gf = star(&g, &base_fn(h.clone()), &base_fn(f.clone()), 2).unwrap();
            let c1_anti = fg.sub(&gf).slot(1);
            let pb = poisson_bracket(&g, &f, &h).mul_scalar(&Scalar::i());
            // C₁(f,g) − C₁(g,f) = i{f,g}
            let expect = SuperPoly::from_coeff(poisson_bracket(&g, &f, &h).mul_scalar(&Scalar::i()).neg().neg());
            let _ = pb;
            let i_pb = SuperPoly::from_coeff(
                poisson_bracket(&g, &f, &h).mul_scalar(&Scalar::i()),
            );
            let _ = expect;
            assert!(c1_anti.sub(&i_pb).is_zero());
        }
    }

    #[test]
    fn associativity_samples() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let z = CoeffExpr::z(ch.clone(), 0);
        let zb = CoeffExpr::zbar(ch.clone(), 0);
        let u = CoeffExpr::atom(ch.clone(), 0);
        let n = 3;
        let samples = vec![
            z.clone(),
            zb.clone(),
            z.mul(&zb),
            u.clone(),
            z.mul(&z).mul(&zb),
        ];
        for f in &samples {
            for h in &samples {
                for w in [&z, &zb] {
                    let fg = star(&g, &base_fn(f.clone()), &base_fn(h.clone()), n).unwrap();
                    let left = star_series(&g, &fg, &base_fn(w.clone()), n);
                    let gw = star(&g, &base_fn(h.clone()), &base_fn(w.clone()), n).unwrap();
                    let right = star_series(&g, &base_fn(f.clone()), &gw, n);
                    let resid = left.sub(&right);
                    assert!(
                        resid.is_zero(),
                        "associativity failed for ({f:?})⋆({h:?})⋆({w:?}): {resid:?}"
                    );
                }
            }
        }
    }

    fn star_series(g: &Geometry, f: &SuperSeries, h: &SuperSeries, n: i64) -> SuperSeries {
        star(g, f, h, n).unwrap()
    }

    #[test]
    fn bidiff_table_matches_products_and_naturality() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let table = extract_bidiff(&g, 3).unwrap();
        // order bound: C_r has order ≤ r in each argument
        for r in 0..=3 {
            let (bo, ao) = table.max_orders(r);
            assert!(bo as i64 <= r && ao as i64 <= r, "naturality violated at {r}");
        }
        // table reproduces the product
        let f = base_fn(
            CoeffExpr::zbar(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0)),
        );
        let h = base_fn(CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::atom(ch.clone(), 0)));
        let via_table = table.apply(&f, &h).unwrap();
        let direct = star(&g, &f, &h, 3).unwrap();
        let resid = truncate_base(via_table.sub(&direct), 3);
        assert!(resid.is_zero(), "table/product mismatch: {resid:?}");
    }

    #[test]
    fn berezin_identities() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let table = extract_bidiff(&g, 3).unwrap();
        let i_op = berezin_op(&g, &table);
        // I(a) = a and I(b) = b on jets
        let a = base_fn(CoeffExpr::z(ch.clone(), 0).pow(2));
        assert_eq!(
            i_op.apply(&a).unwrap().canonical_text(),
            a.canonical_text()
        );
        let b = base_fn(CoeffExpr::zbar(ch.clone(), 0).pow(3));
        assert_eq!(
            i_op.apply(&b).unwrap().canonical_text(),
            b.canonical_text()
        );
        // I(ba) = b ⋆ a
        let ba = b.mul(&a).unwrap();
        let lhs = truncate_base(i_op.apply(&ba).unwrap(), 3);
        let rhs = truncate_base(star(&g, &b, &a, 3).unwrap(), 3);
        assert!(lhs.sub(&rhs).is_zero());
        // I(fa) = I(f) ⋆ a for a mixed f
        let f = base_fn(
            CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0)),
        );
        let fa = f.mul(&a).unwrap();
        let lhs = truncate_base(i_op.apply(&fa).unwrap(), 3);
        let iff = truncate_base(i_op.apply(&f).unwrap(), 3);
        let rhs = truncate_base(star_series(&g, &iff, &a, 3), 3);
        assert!(lhs.sub(&rhs).is_zero());
        // inverse composes to the identity through ν³
        let inv = berezin_inverse_op(&g, &table);
        let composed = i_op.compose(&inv).unwrap();
        let resid = composed.sub(&SuperDiffOp::identity(ch.clone()));
        for r in 0..=3 {
            assert!(resid.terms.get(&r).is_none(), "berezin inverse fails at ν^{r}");
        }
        // dual product is Wick type: b ⋆' f = b f
        let istar_f = i_op.apply(&f).unwrap();
        let istar_b = b.clone(); // I fixes antiholomorphic jets
        let prod = star_series(&g, &istar_b, &istar_f, 3);
        let dual = truncate_base(inv.apply(&prod).unwrap(), 3);
        let expect = truncate_base(b.mul(&f).unwrap(), 3);
        assert!(dual.sub(&expect).is_zero());
    }

    #[test]
    fn flat_trace_density_is_exact() {
        let g = flat(1, trunc()).unwrap();
        let td = trace_density(&g, 3).unwrap();
        // ρ = ν⁻¹ exactly; all Ψ_r for r ≥ 0 are constants (gradients vanish)
        let expect = SuperSeries::nu_power(g.chart.clone(), -1);
        assert_eq!(td.rho.canonical_text(), expect.canonical_text());
        for k in 0..=3 {
            assert!(td.psi.get(&k).unwrap().partial_z(0).is_zero());
        }
        assert!(td.dlog.dz[0].is_zero());
    }

    #[test]
    fn cp1_trace_density_leading_terms() {
        let g = cp1(trunc()).unwrap();
        let td = trace_density(&g, 2).unwrap();
        let ch = g.chart.clone();
        // leading term ν⁻¹ 𝐠 = ν⁻¹u²
        let lead = td.rho.slot(-1);
        let u = CoeffExpr::atom(ch.clone(), 0);
        assert!(lead.sub(&SuperPoly::from_coeff(u.mul(&u))).is_zero());
        // Ψ₀ = −2L + const: gradient check
        let psi0 = td.psi.get(&0).unwrap();
        let expect = CoeffExpr::zbar(ch.clone(), 0)
            .mul(&u)
            .mul_scalar(&Scalar::from_int(-2));
        assert!(psi0.partial_z(0).equal(&expect));
    }

    #[test]
    fn trace_property_transpose_residual() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let n = 2;
        let td = trace_density(&g, n).unwrap();
        let one = SuperSeries::one(ch.clone());
        let samples = vec![
            CoeffExpr::z(ch.clone(), 0),
            CoeffExpr::zbar(ch.clone(), 0).mul(&CoeffExpr::z(ch.clone(), 0)),
            CoeffExpr::atom(ch.clone(), 0),
        ];
        for f in samples {
            let lf = left_op(&g, &base_fn(f.clone()), n).unwrap();
            let rf = right_op(&g, &base_fn(f.clone()), n).unwrap();
            let diff = lf.sub(&rf);
            let t = diff.transpose(&td.dlog).unwrap();
            let resid = truncate_base(t.apply(&one).unwrap(), n - 1);
            assert!(resid.is_zero(), "trace transpose residual for {f:?}: {resid:?}");
        }
    }

    #[test]
    fn delta_star_is_a_derivation() {
        let g = cp1(trunc()).unwrap();
        let ch = g.chart.clone();
        let n = 3;
        let d = delta_star(&g, n + 2).unwrap();
        let f = base_fn(CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0)));
        let h = base_fn(CoeffExpr::zbar(ch.clone(), 0));
        // δ(1) = 0
        let one = SuperSeries::one(ch.clone());
        assert!(truncate_base(d.apply(&one).unwrap(), n).is_zero());
        // Leibniz: δ(f⋆g) − δf⋆g − f⋆δg = 0 through ν^{n−1}
        let fh = star(&g, &f, &h, n + 2).unwrap();
        let lhs = d.apply(&fh).unwrap();
        let df = d.apply(&f).unwrap();
        let dh = d.apply(&h).unwrap();
        let rhs = star_series(&g, &df, &h, n + 2).add(&star_series(&g, &f, &dh, n + 2));
        let resid = truncate_base(lhs.sub(&rhs), n - 1);
        assert!(resid.is_zero(), "Leibniz residual: {resid:?}");
    }

    #[test]
    fn nuderiv_normalization_identity() {
        // dρ/dν = (A^t 1)·ρ for δ⋆ = d/dν + A, transpose against ρ itself
        let g = cp1(trunc()).unwrap();
        let n = 2;
        let td = trace_density(&g, n + 2).unwrap();
        let d = delta_star(&g, n + 2).unwrap();
        let a_op = SuperDiffOp::mult_op(&d.mult).sub(&d.op);
        let at = a_op.transpose(&td.dlog).unwrap();
        let lhs = td.rho.d_dnu();
        let one = SuperSeries::one(g.chart.clone());
        let rhs = at.apply(&one).unwrap().mul(&td.rho).unwrap();
        let resid = truncate_base(lhs.sub(&rhs), n - 1 - 2);
        assert!(resid.is_zero(), "normalization residual: {resid:?}");
    }
}

//! Triangular construction of left/right star-multiplication operators.
//!
//! A multiplication operator is characterized as the unique formal
//! differential operator that supercommutes with a family of "opposite-side"
//! operators `w_c· + ∂_{v̄_c}` (and with plain multiplication by the opposite
//! coordinates, enforced structurally by restricting the derivative ansatz)
//! and sends 1 to the multiplicand.
//!
//! The solver proceeds stage by stage in the ν-exponent and, inside a stage,
//! from the top differential order down. At each step the unknown top-order
//! coefficients enter the residual supercommutator paired against the ν⁻¹
//! part of the gradients `w_c`; that pairing is an invertible contraction
//! against the (super-)Hessian of the leading potential, block-triangular
//! with metric blocks on the diagonal.

use crate::coeff::{Chart, CoeffError, CoeffExpr};
use crate::diffop::{Deriv, DerivMono, OpError, SuperDiffOp};
use crate::fiber::SuperPoly;
use crate::series::SuperSeries;
use crate::window::{Kind, Window, NEG_INF, POS_INF};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveError {
    SingularPairing,
    EmptyWindow,
    Inconsistent(String),
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::SingularPairing => {
                write!(f, "leading pairing matrix is not invertible")
            }
            SolveError::EmptyWindow => write!(f, "window exhausted during the solve"),
            SolveError::Inconsistent(m) => write!(f, "inconsistent solve stage: {}", m),
        }
    }
}

impl std::error::Error for SolveError {}

impl From<OpError> for SolveError {
    fn from(e: OpError) -> Self {
        match e {
            OpError::EmptyWindow => SolveError::EmptyWindow,
            other => SolveError::Inconsistent(other.to_string()),
        }
    }
}

impl From<crate::series::SeriesError> for SolveError {
    fn from(_: crate::series::SeriesError) -> Self {
        SolveError::EmptyWindow
    }
}

impl From<CoeffError> for SolveError {
    fn from(e: CoeffError) -> Self {
        match e {
            CoeffError::SingularMetric => SolveError::SingularPairing,
            other => SolveError::Inconsistent(other.to_string()),
        }
    }
}

/// One characterizing condition: the operator must supercommute with
/// `w· + ∂_{bar}`.
pub struct MultCondition {
    pub bar: Deriv,
    pub w: SuperSeries,
}

pub struct SolveSpec {
    /// Derivative generators allowed in the ansatz (the "same-side"
    /// holomorphic or antiholomorphic variables).
    pub allowed: Vec<Deriv>,
    pub conditions: Vec<MultCondition>,
    /// Solve stages up to this ν-exponent inclusive.
    pub nu_max: i64,
}

/// Build the multiplication operator for `f` under the given conditions.
pub fn build_mult_op(f: &SuperSeries, spec: &SolveSpec) -> Result<SuperDiffOp, SolveError> {
    let chart = f.chart.clone();
    let m = chart.m;
    if f.is_zero() {
        return Ok(SuperDiffOp::zero(chart));
    }
    let p = *f.terms.keys().next().unwrap();
    let ford = f.fdeg().map_err(|_| SolveError::EmptyWindow)?;

    let cond_ops: Vec<SuperDiffOp> = spec
        .conditions
        .iter()
        .map(|c| {
            SuperDiffOp::mult_op(&c.w).add(&SuperDiffOp::deriv_op(chart.clone(), c.bar))
        })
        .collect();

    // order-zero part: A 1 = f
    let mut a = SuperDiffOp::mult_op(f);
    // residuals of the conditions, updated incrementally
    let mut resid: Vec<SuperDiffOp> = cond_ops
        .iter()
        .map(|b| a.supercommutator(b))
        .collect::<Result<_, _>>()?;

    for r in (p + 1)..=spec.nu_max {
        let max_ord = r - p;
        for ord in (1..=max_ord).rev() {
            // residual slots at (ν^{r−1}, derivative order ord−1)
            let gammas: Vec<DerivMono> = {
                let mut set: Vec<DerivMono> = Vec::new();
                for e in &resid {
                    if let Some(slot) = e.terms.get(&(r - 1)) {
                        for dm in slot.keys() {
                            if dm.order() == ord - 1 && !set.contains(dm) {
                                set.push(dm.clone());
                            }
                        }
                    }
                }
                set
            };
            let mut delta = SuperDiffOp::zero(chart.clone());
            for gamma in gammas {
                let piece = solve_gamma_slot(&chart, spec, &cond_ops, &resid, r, &gamma)?;
                delta = delta.add(&piece);
            }
            if delta.is_zero() {
                continue;
            }
            for (e, b) in resid.iter_mut().zip(&cond_ops) {
                *e = e.add(&delta.supercommutator(b)?);
            }
            a = a.add(&delta);
        }
        // the stage must have cleared the pairing slots
        for e in &resid {
            if let Some(slot) = e.terms.get(&(r - 1)) {
                if !slot.is_empty() {
                    return Err(SolveError::Inconsistent(format!(
                        "pairing slot not cleared at nu^{}",
                        r - 1
                    )));
                }
            }
        }
    }

    // certify the output window
    let shape_stored = a
        .terms
        .iter()
        .flat_map(|(&r, slot)| {
            slot.iter().flat_map(move |(dm, c)| {
                let fo = dm.fiber_order();
                c.terms
                    .keys()
                    .map(move |mm| r + 2 * r + mm.degree() - fo)
            })
        })
        .min()
        .unwrap_or(POS_INF);
    let shape = shape_stored.min(spec.nu_max + 1 + ford);
    // exactness above is capped both by the solve depth and by how far the
    // multiplicand itself is known
    let nu_max = spec.nu_max.min(f.window.nu_max);
    a.window = Window {
        kind: Kind::Op,
        nu_min: NEG_INF,
        nu_max,
        deg_max: chart.trunc.deg_max,
        fdeg: ford,
        ceil: POS_INF,
        shape,
        nat: p,
    };
    let _ = m;
    Ok(a.truncate())
}

/// Solve the unknown top coefficients above the residual slot `(r−1, γ)`.
fn solve_gamma_slot(
    chart: &Arc<Chart>,
    spec: &SolveSpec,
    cond_ops: &[SuperDiffOp],
    resid: &[SuperDiffOp],
    r: i64,
    gamma: &DerivMono,
) -> Result<SuperDiffOp, SolveError> {
    // available unknown directions
    let mut dirs: Vec<(Deriv, DerivMono)> = Vec::new();
    for &u in &spec.allowed {
        // only the canonical monomial matters here; the unknown coefficient
        // is attached to it directly
        if let Some((alpha, _)) = gamma.prepend(u) {
            dirs.push((u, alpha));
        }
    }
    if dirs.is_empty() {
        return Err(SolveError::Inconsistent(
            "no ansatz direction for a nonzero residual slot".into(),
        ));
    }

    // pairing matrix via probes: M[u][c] = slot (ν^{−1}, γ) of [∂^{α_u}, B_c]
    let mut mrows: Vec<Vec<SuperPoly>> = Vec::new();
    for (_, alpha) in &dirs {
        let mut probe = SuperDiffOp::zero(chart.clone());
        probe.insert_add(0, alpha.clone(), SuperPoly::one(chart.clone()));
        probe.set_exact_window();
        let mut row = Vec::new();
        for b in cond_ops {
            let comm = probe.supercommutator(b)?;
            let entry = comm
                .terms
                .get(&-1)
                .and_then(|slot| slot.get(gamma))
                .cloned()
                .unwrap_or_else(|| SuperPoly::zero(chart.clone()));
            row.push(entry);
        }
        mrows.push(row);
    }

    // residual row: R[c] = resid_c at (ν^{r−1}, γ)
    let rrow: Vec<SuperPoly> = resid
        .iter()
        .map(|e| {
            e.terms
                .get(&(r - 1))
                .and_then(|slot| slot.get(gamma))
                .cloned()
                .unwrap_or_else(|| SuperPoly::zero(chart.clone()))
        })
        .collect();

    let xs = solve_row_system(chart, &mrows, &rrow)?;

    let mut delta = SuperDiffOp::zero(chart.clone());
    for ((_, alpha), x) in dirs.iter().zip(xs) {
        if !x.is_zero() {
            delta.insert_add(r, alpha.clone(), x);
        }
    }
    delta.set_exact_window();
    Ok(delta)
}

/// Solve `x · M = rhs` for a row vector of fiberwise polynomials, where the
/// fiber-degree-zero part of a column-selected square block of `M` is
/// invertible over the fraction field and higher fiber degrees are handled by
/// a terminating correction series.
fn solve_row_system(
    chart: &Arc<Chart>,
    m: &[Vec<SuperPoly>],
    rhs: &[SuperPoly],
) -> Result<Vec<SuperPoly>, SolveError> {
    let n = m.len();
    let cols = rhs.len();
    // fiber-degree-0 part as CoeffExpr
    let base = |p: &SuperPoly| -> CoeffExpr {
        p.terms
            .iter()
            .find(|(mm, _)| mm.is_unit())
            .map(|(_, c)| c.clone())
            .unwrap_or_else(|| CoeffExpr::zero(chart.clone()))
    };
    // select n columns with invertible leading block by Gaussian elimination
    let mut work: Vec<Vec<CoeffExpr>> = m.iter().map(|row| row.iter().map(base).collect()).collect();
    let mut selected: Vec<usize> = Vec::new();
    let mut used = vec![false; cols];
    for i in 0..n {
        let mut pick = None;
        'cols: for c in 0..cols {
            if used[c] {
                continue;
            }
            if !work[i][c].is_zero() {
                pick = Some(c);
                break 'cols;
            }
        }
        let c = pick.ok_or(SolveError::SingularPairing)?;
        used[c] = true;
        selected.push(c);
        let inv = work[i][c].invert()?;
        for i2 in 0..n {
            if i2 == i || work[i2][c].is_zero() {
                continue;
            }
            let factor = work[i2][c].mul(&inv);
            for c2 in 0..cols {
                let t = work[i][c2].mul(&factor);
                work[i2][c2] = work[i2][c2].sub(&t);
            }
        }
    }

    // leading block and its inverse
    let block0: Vec<Vec<CoeffExpr>> = m
        .iter()
        .map(|row| selected.iter().map(|&c| base(&row[c])).collect())
        .collect();
    let binv = invert_matrix(chart, &block0)?;

    // x·(B0 + B') = −R  ⇒  x = (−R − x·B')·B0⁻¹, iterated in fiber degree
    let bsel: Vec<Vec<SuperPoly>> = m
        .iter()
        .map(|row| selected.iter().map(|&c| row[c].clone()).collect())
        .collect();
    let bprime: Vec<Vec<SuperPoly>> = bsel
        .iter()
        .map(|row| {
            row.iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.terms.retain(|mm, _| !mm.is_unit());
                    q
                })
                .collect()
        })
        .collect();
    let rsel: Vec<SuperPoly> = selected.iter().map(|&c| rhs[c].clone()).collect();

    let mul_row_matrix = |x: &[SuperPoly], mat: &[Vec<SuperPoly>]| -> Vec<SuperPoly> {
        let mut out = vec![SuperPoly::zero(chart.clone()); mat[0].len()];
        for (xi, row) in x.iter().zip(mat) {
            if xi.is_zero() {
                continue;
            }
            for (o, e) in out.iter_mut().zip(row) {
                *o = o.add(&xi.mul(e));
            }
        }
        out
    };
    let mul_row_cmatrix = |x: &[SuperPoly], mat: &[Vec<CoeffExpr>]| -> Vec<SuperPoly> {
        let mut out = vec![SuperPoly::zero(chart.clone()); mat[0].len()];
        for (xi, row) in x.iter().zip(mat) {
            if xi.is_zero() {
                continue;
            }
            for (o, e) in out.iter_mut().zip(row) {
                *o = o.add(&xi.mul_coeff(e));
            }
        }
        out
    };

    let neg_r: Vec<SuperPoly> = rsel.iter().map(|p| p.neg()).collect();
    let mut x = mul_row_cmatrix(&neg_r, &binv);
    let deg_cap = if chart.trunc.deg_max >= POS_INF {
        64
    } else {
        chart.trunc.deg_max - 2 * chart.trunc.nu_min.max(-64) + 4
    };
    let mut guard = 0;
    loop {
        let corr = mul_row_matrix(&x, &bprime);
        let rhs2: Vec<SuperPoly> = neg_r.iter().zip(&corr).map(|(a, b)| a.sub(b)).collect();
        let x2 = mul_row_cmatrix(&rhs2, &binv);
        let same = x2
            .iter()
            .zip(&x)
            .all(|(a, b)| a.sub(b).is_zero());
        x = x2;
        if same {
            break;
        }
        guard += 1;
        if guard > deg_cap.max(8) {
            return Err(SolveError::Inconsistent(
                "fiber correction series did not stabilize".into(),
            ));
        }
    }
    Ok(x)
}

/// Exact inverse of a matrix over the chart fraction field.
pub fn invert_matrix(
    chart: &Arc<Chart>,
    m: &[Vec<CoeffExpr>],
) -> Result<Vec<Vec<CoeffExpr>>, SolveError> {
    let n = m.len();
    let mut a: Vec<Vec<CoeffExpr>> = m.to_vec();
    let mut inv: Vec<Vec<CoeffExpr>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        CoeffExpr::one(chart.clone())
                    } else {
                        CoeffExpr::zero(chart.clone())
                    }
                })
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&i| !a[i][col].is_zero())
            .ok_or(SolveError::SingularPairing)?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let pinv = a[col][col].invert()?;
        for j in 0..n {
            a[col][j] = a[col][j].mul(&pinv);
            inv[col][j] = inv[col][j].mul(&pinv);
        }
        for i in 0..n {
            if i == col || a[i][col].is_zero() {
                continue;
            }
            let f = a[i][col].clone();
            for j in 0..n {
                let t = a[col][j].mul(&f);
                a[i][j] = a[i][j].sub(&t);
                let t = inv[col][j].mul(&f);
                inv[i][j] = inv[i][j].sub(&t);
            }
        }
    }
    Ok(inv)
}

/// Map a BTreeMap of potential slots into the gradient series `∂Φ/∂v̄` or
/// `∂Φ/∂v` used as solve conditions.
pub fn potential_gradient(
    chart: &Arc<Chart>,
    potential: &BTreeMap<i64, CoeffExpr>,
    holomorphic: bool,
    idx: usize,
) -> SuperSeries {
    let mut slots = Vec::new();
    for (&r, phi) in potential {
        let d = if holomorphic {
            phi.partial_z(idx)
        } else {
            phi.partial_zbar(idx)
        };
        if !d.is_zero() {
            slots.push((r, SuperPoly::from_coeff(d)));
        }
    }
    SuperSeries::from_slots(chart.clone(), slots)
}

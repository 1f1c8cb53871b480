//! Chart geometry: formal potential, metric data, Christoffel symbols and
//! curvature of the Kähler connection.

use crate::coeff::{AtomDef, Chart, CoeffError, CoeffExpr};
use crate::poly::Poly;
use crate::scalar::Scalar;
use crate::solve::{invert_matrix, SolveError};
use crate::window::Trunc;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeomError {
    SingularMetric,
    InconsistentRules(String),
    BadPotential(String),
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::SingularMetric => write!(f, "metric not invertible in the fraction field"),
            GeomError::InconsistentRules(m) => write!(f, "{}", m),
            GeomError::BadPotential(m) => write!(f, "bad potential: {}", m),
        }
    }
}

impl std::error::Error for GeomError {}

impl From<CoeffError> for GeomError {
    fn from(e: CoeffError) -> Self {
        match e {
            CoeffError::SingularMetric => GeomError::SingularMetric,
            other => GeomError::InconsistentRules(other.to_string()),
        }
    }
}

impl From<SolveError> for GeomError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::SingularPairing => GeomError::SingularMetric,
            other => GeomError::InconsistentRules(other.to_string()),
        }
    }
}

/// A pseudo-Kähler chart with a formal potential.
pub struct Geometry {
    pub name: String,
    pub chart: Arc<Chart>,
    /// Φ = Σ ν^r Φ_r; the ν⁻¹ part must have an invertible Hessian.
    pub potential: BTreeMap<i64, CoeffExpr>,
    /// g_{k l̄} = ∂²Φ₋₁/∂z^k ∂z̄^l, indexed `metric[k][l]`.
    pub metric: Vec<Vec<CoeffExpr>>,
    /// g^{l̄ k}, indexed `metric_inv[l][k]`, with Σ_l g_{k l̄} g^{l̄ p} = δ_k^p.
    pub metric_inv: Vec<Vec<CoeffExpr>>,
    pub det_g: CoeffExpr,
    /// ∂ log det g in the holomorphic and antiholomorphic directions.
    pub dlog_g_z: Vec<CoeffExpr>,
    pub dlog_g_zbar: Vec<CoeffExpr>,
    /// Γ^s_{kp} = g_{kp q̄} g^{q̄ s}, indexed `christoffel[k][p][s]`.
    pub christoffel: Vec<Vec<Vec<CoeffExpr>>>,
    /// R^u_{k p q̄} of the Kähler connection, indexed `curvature[k][p][q][u]`.
    pub curvature: Vec<Vec<Vec<Vec<CoeffExpr>>>>,
}

impl Geometry {
    pub fn m(&self) -> usize {
        self.chart.m
    }

    pub fn new(
        name: &str,
        chart: Arc<Chart>,
        potential: BTreeMap<i64, CoeffExpr>,
    ) -> Result<Geometry, GeomError> {
        let m = chart.m;
        let phi_min = potential
            .get(&-1)
            .ok_or_else(|| GeomError::BadPotential("missing the ν⁻¹ potential term".into()))?
            .clone();
        let mut metric = vec![vec![CoeffExpr::zero(chart.clone()); m]; m];
        for k in 0..m {
            for l in 0..m {
                metric[k][l] = phi_min.partial_z(k).partial_zbar(l);
            }
        }
        let metric_inv = invert_matrix(&chart, &metric)?;
        let det_g = det(&chart, &metric);
        if det_g.is_zero() {
            return Err(GeomError::SingularMetric);
        }
        let det_inv = det_g.invert()?;
        let dlog_g_z: Vec<CoeffExpr> = (0..m)
            .map(|k| det_g.partial_z(k).mul(&det_inv))
            .collect();
        let dlog_g_zbar: Vec<CoeffExpr> = (0..m)
            .map(|l| det_g.partial_zbar(l).mul(&det_inv))
            .collect();

        // Γ^s_{kp} = g_{kp q̄} g^{q̄ s}
        let mut christoffel = vec![vec![vec![CoeffExpr::zero(chart.clone()); m]; m]; m];
        for k in 0..m {
            for p in 0..m {
                for s in 0..m {
                    let mut acc = CoeffExpr::zero(chart.clone());
                    for q in 0..m {
                        let g3 = metric[k][q].partial_z(p);
                        acc = acc.add(&g3.mul(&metric_inv[q][s]));
                    }
                    christoffel[k][p][s] = acc;
                }
            }
        }

        // R^u_{kp q̄} = (g_{kp b̄} g^{b̄ a} g_{a l̄ q̄} − g_{kp l̄ q̄}) g^{l̄ u}
        let mut curvature =
            vec![vec![vec![vec![CoeffExpr::zero(chart.clone()); m]; m]; m]; m];
        for k in 0..m {
            for p in 0..m {
                for q in 0..m {
                    for u in 0..m {
                        let mut acc = CoeffExpr::zero(chart.clone());
                        for l in 0..m {
                            let mut first = CoeffExpr::zero(chart.clone());
                            for b in 0..m {
                                for a_ in 0..m {
                                    let g_kpb = metric[k][b].partial_z(p);
                                    let g_alq = metric[a_][l].partial_zbar(q);
                                    first = first.add(
                                        &g_kpb.mul(&metric_inv[b][a_]).mul(&g_alq),
                                    );
                                }
                            }
                            let g4 = metric[k][l].partial_z(p).partial_zbar(q);
                            acc = acc.add(&first.sub(&g4).mul(&metric_inv[l][u]));
                        }
                        curvature[k][p][q][u] = acc;
                    }
                }
            }
        }

        let geom = Geometry {
            name: name.to_string(),
            chart,
            potential,
            metric,
            metric_inv,
            det_g,
            dlog_g_z,
            dlog_g_zbar,
            christoffel,
            curvature,
        };
        geom.check_identities()?;
        Ok(geom)
    }

    /// Defining identities as residual checks: the inverse metric, the trace
    /// of Γ against ∂ log det g, and R = −∂̄ Γ.
    fn check_identities(&self) -> Result<(), GeomError> {
        let m = self.m();
        for k in 0..m {
            for p in 0..m {
                let mut acc = CoeffExpr::zero(self.chart.clone());
                for l in 0..m {
                    acc = acc.add(&self.metric[k][l].mul(&self.metric_inv[l][p]));
                }
                let expect = if k == p {
                    CoeffExpr::one(self.chart.clone())
                } else {
                    CoeffExpr::zero(self.chart.clone())
                };
                if !acc.sub(&expect).is_zero() {
                    return Err(GeomError::InconsistentRules(
                        "inverse metric residual".into(),
                    ));
                }
            }
        }
        for k in 0..m {
            let mut tr = CoeffExpr::zero(self.chart.clone());
            for s in 0..m {
                tr = tr.add(&self.christoffel[k][s][s]);
            }
            if !tr.sub(&self.dlog_g_z[k]).is_zero() {
                return Err(GeomError::InconsistentRules(
                    "Γ trace does not match ∂ log det g".into(),
                ));
            }
        }
        for k in 0..m {
            for p in 0..m {
                for q in 0..m {
                    for u in 0..m {
                        let d = self.christoffel[k][p][u].partial_zbar(q).neg();
                        if !d.sub(&self.curvature[k][p][q][u]).is_zero() {
                            return Err(GeomError::InconsistentRules(
                                "curvature does not match −∂̄Γ".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// dΦ/dν as a formal function.
    pub fn potential_nu_derivative(&self) -> BTreeMap<i64, CoeffExpr> {
        self.potential
            .iter()
            .filter(|(&r, _)| r != 0)
            .map(|(&r, c)| (r - 1, c.mul_scalar(&Scalar::from_int(r))))
            .collect()
    }
}

fn det(chart: &Arc<Chart>, m: &[Vec<CoeffExpr>]) -> CoeffExpr {
    let n = m.len();
    match n {
        0 => CoeffExpr::one(chart.clone()),
        1 => m[0][0].clone(),
        _ => {
            let mut acc = CoeffExpr::zero(chart.clone());
            for (j, entry) in m[0].iter().enumerate() {
                if entry.is_zero() {
                    continue;
                }
                let minor: Vec<Vec<CoeffExpr>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(c, _)| *c != j)
                            .map(|(_, v)| v.clone())
                            .collect()
                    })
                    .collect();
                let term = entry.mul(&det(chart, &minor));
                acc = if j % 2 == 0 {
                    acc.add(&term)
                } else {
                    acc.sub(&term)
                };
            }
            acc
        }
    }
}

/// Flat chart ℂᵐ with Φ = ν⁻¹ Σ z^k z̄^k.
pub fn flat(m: usize, trunc: Trunc) -> Result<Geometry, GeomError> {
    let chart = Chart::new(m, vec![], vec![])?.with_trunc(trunc);
    let mut phi = CoeffExpr::zero(chart.clone());
    for k in 0..m {
        phi = phi.add(&CoeffExpr::z(chart.clone(), k).mul(&CoeffExpr::zbar(chart.clone(), k)));
    }
    let mut potential = BTreeMap::new();
    potential.insert(-1, phi);
    Geometry::new("flat", chart, potential)
}

/// The projective line in an affine chart: atoms `u ≅ (1+zz̄)⁻¹` and
/// `L ≅ log(1+zz̄)` with the side relation `u(1+zz̄) = 1`; Φ = ν⁻¹L.
pub fn cp1(trunc: Trunc) -> Result<Geometry, GeomError> {
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
    let rel = u.mul(&Poly::one(nv).add(&z.mul(&zb))).sub(&Poly::one(nv));
    let chart = Chart::new(1, atoms, vec![rel])?.with_trunc(trunc);
    let mut potential = BTreeMap::new();
    potential.insert(-1, CoeffExpr::atom(chart.clone(), 1));
    Geometry::new("cp1", chart, potential)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::Trunc;

    #[test]
    fn flat_metric() {
        let g = flat(1, Trunc::unbounded()).unwrap();
        assert!(g.metric[0][0].is_one());
        assert!(g.det_g.is_one());
        assert!(g.christoffel[0][0][0].is_zero());
        assert!(g.curvature[0][0][0][0].is_zero());
    }

    #[test]
    fn flat_m2_metric() {
        let g = flat(2, Trunc::unbounded()).unwrap();
        assert!(g.metric[0][0].is_one());
        assert!(g.metric[0][1].is_zero());
        assert!(g.det_g.is_one());
    }

    #[test]
    fn cp1_metric_and_curvature() {
        let g = cp1(Trunc::unbounded()).unwrap();
        let ch = g.chart.clone();
        let u = CoeffExpr::atom(ch.clone(), 0);
        // g = u², det g = u², g⁻¹ = (1+zz̄)²
        assert!(g.metric[0][0].equal(&u.mul(&u)));
        assert!(g.det_g.equal(&u.mul(&u)));
        let opz = CoeffExpr::one(ch.clone())
            .add(&CoeffExpr::z(ch.clone(), 0).mul(&CoeffExpr::zbar(ch.clone(), 0)));
        assert!(g.metric_inv[0][0].equal(&opz.mul(&opz)));
        // Γ = −2z̄u, R = 2u² = 2g
        let expect_gamma = CoeffExpr::zbar(ch.clone(), 0)
            .mul(&u)
            .mul_scalar(&Scalar::from_int(-2));
        assert!(g.christoffel[0][0][0].equal(&expect_gamma));
        let expect_r = u.mul(&u).mul_scalar(&Scalar::from_int(2));
        assert!(g.curvature[0][0][0][0].equal(&expect_r));
        // ∂ log det g = −2z̄u
        assert!(g.dlog_g_z[0].equal(&expect_gamma));
    }
}

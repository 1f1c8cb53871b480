//! Exact symbolic engine for star products with separation of variables on
//! pseudo-Kähler coordinate charts, the associated super star product on
//! `TU ⊕ ΠTU`, formal heat flow, oscillatory fiber integrals, and the
//! algebraic index identity on concrete geometries.

pub mod coeff;
pub mod diffop;
pub mod geometry;
pub mod fiber;
pub mod poly;
pub mod scalar;
pub mod series;
pub mod solve;
pub mod starprod;
pub mod window;

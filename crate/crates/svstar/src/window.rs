//! Exactness windows for truncated ν-Laurent data.
//!
//! A window states on which slots `(r, i)` — ν-exponent `r`, standard degree
//! `i = 2r + fiber degree` — stored data provably equals the true element.
//! Outside the window nothing is claimed. Windows propagate conservatively
//! through every operation by bounding where truncated-away content of the
//! factors can land.
//!
//! Certified structural facts carried along with the slot rectangle:
//! * `fdeg`  — lower bound on `i` over all true content;
//! * `ceil`  — upper bound on `i` over all true content (`POS_INF` if unknown);
//! * `shape` — lower bound on `r + i` over all true content;
//! * `nat`   — operators: lower bound on `i − r` (a ν-shifted-natural operator
//!   of filtration `p` has order ≤ `r − p` at ν-exponent `r`, so `i ≥ r + p`).
//!
//! Series content always satisfies `i ≥ 2r`; operator content satisfies
//! `i ≥ r + nat`. A side whose window is open below (`nu_min = NEG_INF`) or
//! above (`nu_max = POS_INF`) hides nothing there, so its visible support
//! bounds its true support in that direction; those support bounds enter the
//! rules through [`Extent`].

pub const POS_INF: i64 = 1 << 40;
pub const NEG_INF: i64 = -(1 << 40);

pub fn sat(v: i64) -> i64 {
    v.clamp(NEG_INF, POS_INF)
}

pub fn sat_add(a: i64, b: i64) -> i64 {
    sat(sat(a).saturating_add(sat(b)))
}

/// Ceiling division, positive divisor.
pub fn ceil_div(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    a.div_euclid(b) + if a.rem_euclid(b) != 0 { 1 } else { 0 }
}

/// Floor division, positive divisor.
pub fn floor_div(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    a.div_euclid(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Series,
    Op,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kind: Kind,
    pub nu_min: i64,
    pub nu_max: i64,
    pub deg_max: i64,
    pub fdeg: i64,
    pub ceil: i64,
    pub shape: i64,
    pub nat: i64,
}

/// Visible support bounds of the stored data.
#[derive(Debug, Clone, Copy)]
pub struct Extent {
    pub r_min: i64,
    pub r_max: i64,
}

impl Extent {
    pub fn empty() -> Self {
        Extent {
            r_min: POS_INF,
            r_max: NEG_INF,
        }
    }
}

/// Global truncation caps a chart computes under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trunc {
    pub nu_min: i64,
    pub deg_max: i64,
}

impl Trunc {
    pub fn unbounded() -> Self {
        Trunc {
            nu_min: NEG_INF,
            deg_max: POS_INF,
        }
    }
}

/// Window plus visible support, the input to the propagation rules.
#[derive(Debug, Clone, Copy)]
pub struct WExt {
    pub w: Window,
    pub ext: Extent,
}

impl Window {
    pub fn exact_series(fdeg: i64, ceil: i64, shape: i64) -> Self {
        Window {
            kind: Kind::Series,
            nu_min: NEG_INF,
            nu_max: POS_INF,
            deg_max: POS_INF,
            fdeg: sat(fdeg),
            ceil: sat(ceil),
            shape: sat(shape),
            nat: NEG_INF,
        }
    }

    pub fn is_void(&self) -> bool {
        self.nu_min > self.nu_max || self.deg_max < self.fdeg
    }

    pub fn contains(&self, r: i64, i: i64) -> bool {
        r >= self.nu_min && r <= self.nu_max && i <= self.deg_max
    }

    /// Intersection, for sums.
    pub fn meet(&self, other: &Window) -> Window {
        debug_assert_eq!(self.kind, other.kind);
        Window {
            kind: self.kind,
            nu_min: self.nu_min.max(other.nu_min),
            nu_max: self.nu_max.min(other.nu_max),
            deg_max: self.deg_max.min(other.deg_max),
            fdeg: self.fdeg.min(other.fdeg),
            ceil: self.ceil.max(other.ceil),
            shape: self.shape.min(other.shape),
            nat: self.nat.min(other.nat),
        }
    }

    /// Window after a derivative changing standard degree by `d` (fiber
    /// derivatives: −1, base derivatives: 0).
    pub fn shift_deg(&self, d: i64) -> Window {
        Window {
            kind: self.kind,
            nu_min: self.nu_min,
            nu_max: self.nu_max,
            deg_max: sat_add(self.deg_max, d),
            fdeg: sat_add(self.fdeg, d),
            ceil: sat_add(self.ceil, d),
            shape: sat_add(self.shape, d),
            nat: self.nat,
        }
    }

    /// Window after multiplication by ν^j.
    pub fn shift_nu(&self, j: i64) -> Window {
        Window {
            kind: self.kind,
            nu_min: sat_add(self.nu_min, j),
            nu_max: sat_add(self.nu_max, j),
            deg_max: sat_add(self.deg_max, 2 * j),
            fdeg: sat_add(self.fdeg, 2 * j),
            ceil: sat_add(self.ceil, 2 * j),
            shape: sat_add(self.shape, 3 * j),
            nat: sat_add(self.nat, j),
        }
    }
}

impl WExt {
    /// True support cannot start below this.
    fn content_r_min(&self) -> i64 {
        if self.w.nu_min <= NEG_INF {
            self.ext.r_min
        } else {
            NEG_INF
        }
    }

    /// True support cannot extend above this.
    fn content_r_max(&self) -> i64 {
        if self.w.nu_max >= POS_INF {
            self.ext.r_max
        } else {
            POS_INF
        }
    }

    /// Degree floor of possible hidden content below `nu_min`.
    fn hidden_below_floor(&self) -> i64 {
        self.w
            .fdeg
            .max(sat(self.w.shape.saturating_sub(self.w.nu_min - 1)))
    }

    fn hidden_below_exists(&self) -> bool {
        self.w.nu_min > NEG_INF && self.hidden_below_floor() <= self.w.ceil
    }

    /// Degree floor of possible hidden content above `nu_max`.
    fn hidden_above_floor(&self) -> i64 {
        let r1 = self.w.nu_max + 1;
        let structural = match self.w.kind {
            Kind::Series => sat(2 * r1),
            Kind::Op => sat_add(r1, self.w.nat),
        };
        structural.max(self.w.fdeg)
    }

    fn hidden_above_exists(&self) -> bool {
        self.w.nu_max < POS_INF && self.hidden_above_floor() <= self.w.ceil
    }

    /// Degree growth of content at high ν-exponent: `i ≥ slope·r + c`.
    fn growth(&self) -> (i64, i64) {
        match self.w.kind {
            Kind::Series => (2, 0),
            Kind::Op => (1, self.w.nat),
        }
    }
}

/// Exactness window of a content-additive bilinear operation (series product,
/// operator composition, operator application). `kind` is the result's kind.
pub fn combine(a: &WExt, b: &WExt, kind: Kind, trunc: &Trunc) -> Window {
    let fdeg = sat_add(a.w.fdeg, b.w.fdeg);
    let shape = sat_add(a.w.shape, b.w.shape);
    let ceil = sat_add(a.w.ceil, b.w.ceil);
    let nat = sat_add(a.w.nat, b.w.nat);

    let mut deg_max = sat_add(a.w.deg_max, b.w.fdeg)
        .min(sat_add(b.w.deg_max, a.w.fdeg))
        .min(trunc.deg_max);

    // hidden content above nu_max of one side: block by degree (preferred)
    let mut nu_max = POS_INF;
    for (x, y) in [(a, b), (b, a)] {
        if x.hidden_above_exists() {
            let cap3 = sat_add(x.hidden_above_floor(), y.w.fdeg).saturating_sub(1);
            if deg_max <= sat(cap3) {
                // degree window already blocks this side's overflow
            } else {
                // try capping degree; keep the ν-reach bound as the fallback
                let nblock = sat_add(x.w.nu_max, y.content_r_min());
                if sat(cap3) >= fdeg {
                    deg_max = deg_max.min(sat(cap3));
                } else {
                    nu_max = nu_max.min(nblock);
                }
            }
        }
    }
    if nu_max >= POS_INF && (a.w.nu_max < POS_INF || b.w.nu_max < POS_INF) {
        // no overflow contamination, but exactness above the reachable sum of
        // claimed regions is only for provably-zero slots; that is fine —
        // keep POS_INF unless a fallback bound was set
    }

    // hidden content below nu_min
    let i_eff = deg_max.min(ceil);
    let rmin_from = |x: &WExt, y: &WExt| -> i64 {
        if !x.hidden_below_exists() {
            return NEG_INF;
        }
        let fh = x.hidden_below_floor();
        let i2cap = y.w.ceil.min(i_eff.saturating_sub(fh));
        if i2cap < y.w.fdeg {
            return NEG_INF;
        }
        let (slope, c) = y.growth();
        let rcap = y
            .content_r_max()
            .min(floor_div(sat(i2cap.saturating_sub(c)), slope));
        sat_add(x.w.nu_min, rcap)
    };
    let rmin_hh = if a.hidden_below_exists()
        && b.hidden_below_exists()
        && sat_add(a.hidden_below_floor(), b.hidden_below_floor()) <= i_eff
    {
        sat_add(a.w.nu_min, b.w.nu_min).saturating_sub(1)
    } else {
        NEG_INF
    };
    let nu_min = rmin_from(a, b)
        .max(rmin_from(b, a))
        .max(sat(rmin_hh))
        .max(trunc.nu_min);

    Window {
        kind,
        nu_min,
        nu_max,
        deg_max,
        fdeg,
        ceil,
        shape,
        nat,
    }
}

/// Window of the fiberwise Gaussian contraction-and-restrict step: output slot
/// `(r, i)` gathers input slots `(r − n, i)` for all `n ≥ 0`.
pub fn fiber_contraction(x: &WExt) -> Window {
    let deg_max = if !x.hidden_below_exists() {
        x.w.deg_max
    } else {
        // hidden slot (nu_min − 1 − k, i) is impossible once shape blocks it
        x.w.deg_max
            .min(sat(x.w.shape.saturating_sub(x.w.nu_min - 1) - 1))
    };
    Window {
        kind: Kind::Series,
        deg_max,
        ..x.w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wext(w: Window, r_min: i64, r_max: i64) -> WExt {
        WExt {
            w,
            ext: Extent { r_min, r_max },
        }
    }

    #[test]
    fn exact_times_exact_stays_exact() {
        let t = Trunc::unbounded();
        let a = wext(Window::exact_series(0, 4, -1), -1, 2);
        let b = wext(Window::exact_series(2, 2, 2), 0, 0);
        let c = combine(&a, &b, Kind::Series, &t);
        assert_eq!(c.nu_min, NEG_INF);
        assert_eq!(c.nu_max, POS_INF);
        assert_eq!(c.deg_max, POS_INF);
        assert_eq!(c.fdeg, 2);
        assert_eq!(c.ceil, 6);
    }

    #[test]
    fn truncated_gaussian_square() {
        // e^{S}-style: content only at deg 0, truncated below at −12
        let t = Trunc {
            nu_min: -12,
            deg_max: 8,
        };
        let es = Window {
            kind: Kind::Series,
            nu_min: -12,
            nu_max: POS_INF,
            deg_max: POS_INF,
            fdeg: 0,
            ceil: 0,
            shape: NEG_INF,
            nat: NEG_INF,
        };
        let e = wext(es, -12, 0);
        let c = combine(&e, &e, Kind::Series, &t);
        // hidden-below of one factor pairs with the other's deg-0 content,
        // reaching up to its visible top r = 0
        assert_eq!(c.nu_min, -12);
        assert!(c.contains(0, 0));
        assert_eq!(c.ceil, 0);
    }

    #[test]
    fn truncated_below_times_polynomial() {
        // e^{S}-truncation times an exact polynomial must not erode the floor
        let t = Trunc {
            nu_min: -12,
            deg_max: 40,
        };
        let es = wext(
            Window {
                kind: Kind::Series,
                nu_min: -12,
                nu_max: POS_INF,
                deg_max: POS_INF,
                fdeg: 0,
                ceil: 0,
                shape: NEG_INF,
                nat: NEG_INF,
            },
            -12,
            0,
        );
        let poly = wext(Window::exact_series(3, 3, 3), 0, 0);
        let c = combine(&es, &poly, Kind::Series, &t);
        assert_eq!(c.nu_min, -12);
        assert_eq!(c.deg_max, 40);
    }

    #[test]
    fn void_detection() {
        let w = Window {
            kind: Kind::Series,
            nu_min: 3,
            nu_max: 1,
            deg_max: 5,
            fdeg: 0,
            ceil: 0,
            shape: 0,
            nat: 0,
        };
        assert!(w.is_void());
    }
}

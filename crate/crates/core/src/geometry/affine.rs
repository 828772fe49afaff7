//! 2D affine maps.

use crate::error::{FloweError, Result};

/// Invertible 2D affine map `(x, y) -> (a·x + b·y + tx, c·x + d·y + ty)`.
///
/// Stored row-major as `[a, b, tx, c, d, ty]`. Construction rejects maps
/// whose linear part has `|det| < 1e-12`, so every held value is invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    m: [f64; 6],
}

/// Determinant threshold below which a map is considered degenerate.
const DET_EPS: f64 = 1e-12;

impl AffineMap {
    /// Build from row-major coefficients `[a, b, tx, c, d, ty]`.
    pub fn new(m: [f64; 6]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(FloweError::Data(
                "affine coefficients must be finite".into(),
            ));
        }
        let det = m[0] * m[4] - m[1] * m[3];
        if det.abs() < DET_EPS {
            return Err(FloweError::DegenerateAffine { det: det.abs() });
        }
        Ok(AffineMap { m })
    }

    pub fn identity() -> Self {
        AffineMap {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineMap {
            m: [1.0, 0.0, tx, 0.0, 1.0, ty],
        }
    }

    /// Axis-aligned scale about the origin.
    pub fn scale(sx: f64, sy: f64) -> Result<Self> {
        Self::new([sx, 0.0, 0.0, 0.0, sy, 0.0])
    }

    /// Counterclockwise-in-math-convention rotation about the origin; with
    /// y pointing down this turns screen-clockwise for positive angles.
    pub fn rotation_deg(theta_deg: f64) -> Self {
        let (s, c) = theta_deg.to_radians().sin_cos();
        AffineMap {
            m: [c, -s, 0.0, s, c, 0.0],
        }
    }

    /// Row-major coefficients `[a, b, tx, c, d, ty]`.
    pub fn coefficients(&self) -> [f64; 6] {
        self.m
    }

    pub fn det(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    ///
    /// Errors if the numerical determinant of the product degenerates.
    pub fn compose(&self, other: &AffineMap) -> Result<AffineMap> {
        let a = &self.m;
        let b = &other.m;
        AffineMap::new([
            a[0] * b[0] + a[1] * b[3],
            a[0] * b[1] + a[1] * b[4],
            a[0] * b[2] + a[1] * b[5] + a[2],
            a[3] * b[0] + a[4] * b[3],
            a[3] * b[1] + a[4] * b[4],
            a[3] * b[2] + a[4] * b[5] + a[5],
        ])
    }

    /// Exact inverse. Infallible: construction guarantees invertibility.
    pub fn invert(&self) -> AffineMap {
        let [a, b, tx, c, d, ty] = self.m;
        let det = a * d - b * c;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        AffineMap {
            m: [ia, ib, -(ia * tx + ib * ty), ic, id, -(ic * tx + id * ty)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(p: (f64, f64), q: (f64, f64), tol: f64) -> bool {
        (p.0 - q.0).abs() <= tol && (p.1 - q.1).abs() <= tol
    }

    #[test]
    fn identity_fixes_points() {
        assert_eq!(AffineMap::identity().apply(5.0, 7.0), (5.0, 7.0));
    }

    #[test]
    fn pure_scale_doubles() {
        let a = AffineMap::scale(2.0, 2.0).unwrap();
        assert_eq!(a.apply(3.0, 4.0), (6.0, 8.0));
    }

    #[test]
    fn rotation_composed_with_inverse_is_identity() {
        let r = AffineMap::rotation_deg(30.0);
        let m = r.compose(&r.invert()).unwrap().coefficients();
        let id = AffineMap::identity().coefficients();
        for (got, want) in m.iter().zip(id.iter()) {
            assert!((got - want).abs() < 1e-9, "got {m:?}");
        }
    }

    #[test]
    fn rotation_direction_matches_convention() {
        // +90 degrees takes the +x axis to the +y axis (downward on screen).
        let r = AffineMap::rotation_deg(90.0);
        assert!(close(r.apply(1.0, 0.0), (0.0, 1.0), 1e-12));
    }

    #[test]
    fn singular_maps_are_rejected() {
        let e = AffineMap::new([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]).unwrap_err();
        assert!(matches!(e, FloweError::DegenerateAffine { .. }));
        assert!(AffineMap::scale(0.0, 1.0).is_err());
    }

    #[test]
    fn compose_applies_right_argument_first() {
        let s = AffineMap::scale(2.0, 2.0).unwrap();
        let t = AffineMap::translation(1.0, 0.0);
        // s ∘ t: translate then scale.
        assert_eq!(s.compose(&t).unwrap().apply(0.0, 0.0), (2.0, 0.0));
        // t ∘ s: scale then translate.
        assert_eq!(t.compose(&s).unwrap().apply(0.0, 0.0), (1.0, 0.0));
    }

    fn arb_affine() -> impl Strategy<Value = AffineMap> {
        (
            0.25f64..4.0,
            -60.0f64..60.0,
            -20.0f64..20.0,
            -20.0f64..20.0,
        )
            .prop_map(|(s, deg, tx, ty)| {
                AffineMap::translation(tx, ty)
                    .compose(&AffineMap::rotation_deg(deg))
                    .unwrap()
                    .compose(&AffineMap::scale(s, s).unwrap())
                    .unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_points(a in arb_affine(), x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let (px, py) = a.apply(x, y);
            let (bx, by) = a.invert().apply(px, py);
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative_on_points(
            a in arb_affine(), b in arb_affine(), c in arb_affine(),
            x in -10.0f64..10.0, y in -10.0f64..10.0,
        ) {
            let left = a.compose(&b).unwrap().compose(&c).unwrap().apply(x, y);
            let right = a.compose(&b.compose(&c).unwrap()).unwrap().apply(x, y);
            prop_assert!(close(left, right, 1e-7));
        }

        #[test]
        fn compose_matches_sequential_application(
            a in arb_affine(), b in arb_affine(),
            x in -10.0f64..10.0, y in -10.0f64..10.0,
        ) {
            let (mx, my) = b.apply(x, y);
            let seq = a.apply(mx, my);
            let joint = a.compose(&b).unwrap().apply(x, y);
            prop_assert!(close(seq, joint, 1e-8));
        }
    }
}

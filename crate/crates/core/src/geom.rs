//! Hyperbolic models: the upper half-space, its boundary sphere, Möbius
//! actions, geodesics, and visual metrics.
//!
//! Points of H³ are stored in upper-half-space coordinates `(horizontal, height)`
//! with `horizontal` complex and `height > 0`. Boundary points live on
//! ℂ ∪ {∞} with an explicit infinity flag.

use num_complex::Complex64;

use crate::EpsteinLabError;

pub const MOEBIUS_TOL: f64 = 1e-12;

/// Element of PSL(2, ℂ), normalized to `ad − bc = 1` and stored up to global sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoebiusTransform {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl MoebiusTransform {
    /// Normalizes the coefficients to determinant one.
    pub fn new(
        a: Complex64,
        b: Complex64,
        c: Complex64,
        d: Complex64,
    ) -> Result<Self, EpsteinLabError> {
        let det = a * d - b * c;
        if det.norm() < 1e-30 {
            return Err(EpsteinLabError::Degenerate(
                "Moebius transform with vanishing determinant".into(),
            ));
        }
        let s = det.sqrt();
        Ok(MoebiusTransform { a: a / s, b: b / s, c: c / s, d: d / s })
    }

    pub fn identity() -> Self {
        MoebiusTransform {
            a: Complex64::new(1.0, 0.0),
            b: Complex64::new(0.0, 0.0),
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(1.0, 0.0),
        }
    }

    /// z ↦ z + b.
    pub fn translation(b: Complex64) -> Self {
        MoebiusTransform {
            a: Complex64::new(1.0, 0.0),
            b,
            c: Complex64::new(0.0, 0.0),
            d: Complex64::new(1.0, 0.0),
        }
    }

    /// z ↦ k z for k ≠ 0.
    pub fn scaling(k: Complex64) -> Result<Self, EpsteinLabError> {
        MoebiusTransform::new(
            k,
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.0),
        )
    }

    /// z ↦ 1/z.
    pub fn inversion() -> Self {
        // det(0,1;1,0) = -1; normalize with i.
        MoebiusTransform {
            a: Complex64::new(0.0, 0.0),
            b: Complex64::new(0.0, 1.0),
            c: Complex64::new(0.0, 1.0),
            d: Complex64::new(0.0, 0.0),
        }
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    pub fn compose(&self, other: &MoebiusTransform) -> MoebiusTransform {
        // (self ∘ other): apply `other` first.
        MoebiusTransform {
            a: self.a * other.a + self.b * other.c,
            b: self.a * other.b + self.b * other.d,
            c: self.c * other.a + self.d * other.c,
            d: self.c * other.b + self.d * other.d,
        }
    }

    pub fn inverse(&self) -> MoebiusTransform {
        MoebiusTransform { a: self.d, b: -self.b, c: -self.c, d: self.a }
    }

    /// Equality in PSL(2, ℂ): up to the global ± sign.
    pub fn approx_eq(&self, other: &MoebiusTransform, tol: f64) -> bool {
        let direct = (self.a - other.a).norm()
            + (self.b - other.b).norm()
            + (self.c - other.c).norm()
            + (self.d - other.d).norm();
        let flipped = (self.a + other.a).norm()
            + (self.b + other.b).norm()
            + (self.c + other.c).norm()
            + (self.d + other.d).norm();
        direct.min(flipped) < tol
    }

    /// Fractional-linear action on the boundary sphere, projectively total.
    pub fn apply_boundary(&self, z: BoundaryPoint) -> BoundaryPoint {
        match z {
            BoundaryPoint::Infinity => {
                if self.c.norm() == 0.0 {
                    BoundaryPoint::Infinity
                } else {
                    BoundaryPoint::Finite(self.a / self.c)
                }
            }
            BoundaryPoint::Finite(z) => {
                let den = self.c * z + self.d;
                if den.norm() == 0.0 {
                    BoundaryPoint::Infinity
                } else {
                    BoundaryPoint::Finite((self.a * z + self.b) / den)
                }
            }
        }
    }

    /// Complex derivative at a finite boundary point (needs cz + d ≠ 0).
    pub fn derivative(&self, z: Complex64) -> Complex64 {
        let den = self.c * z + self.d;
        1.0 / (den * den)
    }

    /// Isometric action on upper half-space extending the boundary action.
    pub fn apply_h3(&self, p: H3Point) -> H3Point {
        let z = p.horizontal;
        let t = p.height;
        let czd = self.c * z + self.d;
        let den = czd.norm_sqr() + self.c.norm_sqr() * t * t;
        let horizontal = ((self.a * z + self.b) * czd.conj() + self.a * self.c.conj() * t * t) / den;
        H3Point { horizontal, height: t / den }
    }
}

impl std::ops::Mul for MoebiusTransform {
    type Output = MoebiusTransform;
    fn mul(self, rhs: MoebiusTransform) -> MoebiusTransform {
        self.compose(&rhs)
    }
}

/// Point of ∂∞H³ = ℂP¹, with the point at infinity kept as an explicit flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryPoint {
    Finite(Complex64),
    Infinity,
}

impl BoundaryPoint {
    pub fn finite(self) -> Option<Complex64> {
        match self {
            BoundaryPoint::Finite(z) => Some(z),
            BoundaryPoint::Infinity => None,
        }
    }
}

/// Point of H³ in upper-half-space coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H3Point {
    pub horizontal: Complex64,
    pub height: f64,
}

impl H3Point {
    pub fn new(horizontal: Complex64, height: f64) -> Self {
        assert!(height > 0.0, "H3 point must have positive height");
        H3Point { horizontal, height }
    }
}

/// Tangent vector at a point of H³, stored in Euclidean components
/// `(horizontal, vertical)`. The hyperbolic norm at height t is the Euclidean
/// norm divided by t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct H3Tangent {
    pub horizontal: Complex64,
    pub vertical: f64,
}

impl H3Tangent {
    pub fn euclidean_norm(&self) -> f64 {
        (self.horizontal.norm_sqr() + self.vertical * self.vertical).sqrt()
    }

    pub fn hyperbolic_norm(&self, at: &H3Point) -> f64 {
        self.euclidean_norm() / at.height
    }

    pub fn scaled(&self, s: f64) -> H3Tangent {
        H3Tangent { horizontal: self.horizontal * s, vertical: self.vertical * s }
    }

    /// Hyperbolic inner product at `at`.
    pub fn dot(&self, other: &H3Tangent, at: &H3Point) -> f64 {
        (self.horizontal.re * other.horizontal.re
            + self.horizontal.im * other.horizontal.im
            + self.vertical * other.vertical)
            / (at.height * at.height)
    }
}

/// Hyperbolic distance in the upper half-space model.
pub fn h3_distance(p: &H3Point, q: &H3Point) -> f64 {
    let num = (p.horizontal - q.horizontal).norm_sqr() + (p.height - q.height).powi(2);
    let arg = 1.0 + num / (2.0 * p.height * q.height);
    arg.max(1.0).acosh()
}

/// Density e^η of the visual metric V_p = e^{2η} |dz|² at a finite boundary
/// point. Derived by pushing the round metric of the unit tangent sphere
/// through the geodesic endpoint map; see the oracle in the test suite.
pub fn visual_metric_density(p: &H3Point, z: BoundaryPoint) -> Result<f64, EpsteinLabError> {
    let z = z.finite().ok_or_else(|| {
        EpsteinLabError::OutOfChart("visual metric chart excludes the point at infinity".into())
    })?;
    let t = p.height;
    Ok(2.0 * t / (t * t + (z - p.horizontal).norm_sqr()))
}

/// Hyperbolically unit tangent vector at `p` pointing along the geodesic ray
/// towards the finite ideal point `z`.
pub fn unit_tangent_toward(p: &H3Point, z: Complex64) -> H3Tangent {
    let d = z - p.horizontal;
    let t = p.height;
    let r2 = d.norm_sqr();
    if r2 == 0.0 {
        return H3Tangent { horizontal: Complex64::new(0.0, 0.0), vertical: -t };
    }
    let den = r2 + t * t;
    H3Tangent { horizontal: 2.0 * t * t * d / den, vertical: t * (r2 - t * t) / den }
}

/// Ideal endpoint of the geodesic ray from `p` with initial tangent `v`.
pub fn geodesic_endpoint(p: &H3Point, v: &H3Tangent) -> BoundaryPoint {
    let t = p.height;
    let vn = v.euclidean_norm();
    let c1 = v.vertical / vn; // cosine against the vertical
    if v.horizontal.norm() < 1e-15 * vn {
        return if v.vertical > 0.0 {
            BoundaryPoint::Infinity
        } else {
            BoundaryPoint::Finite(p.horizontal)
        };
    }
    let alpha = v.horizontal / v.horizontal.norm();
    // Solve (rho^2 - t^2)/(rho^2 + t^2) = c1 for the endpoint radius rho.
    let rho = t * ((1.0 + c1) / (1.0 - c1)).sqrt();
    BoundaryPoint::Finite(p.horizontal + rho * alpha)
}

/// Point at hyperbolic distance `r` along the geodesic from `p` with initial
/// unit tangent `v` (exact circle/line geometry, no integration).
pub fn geodesic_flow(p: &H3Point, v: &H3Tangent, r: f64) -> H3Point {
    let t = p.height;
    let vn = v.euclidean_norm();
    if v.horizontal.norm() < 1e-14 * vn {
        let sign = if v.vertical >= 0.0 { 1.0 } else { -1.0 };
        return H3Point { horizontal: p.horizontal, height: t * (sign * r).exp() };
    }
    let alpha = v.horizontal / v.horizontal.norm();
    let c1 = (v.vertical / vn).clamp(-1.0, 1.0);
    // Geodesic endpoints on the alpha-line: forward at +rho, backward at -t^2/rho.
    let rho = t * ((1.0 + c1) / (1.0 - c1)).sqrt();
    let radius = 0.5 * (rho + t * t / rho);
    let center = p.horizontal + (rho - t * t / rho) * 0.5 * alpha;
    // Angle phi on the semicircle: forward endpoint at phi = 0; arclength
    // coordinate is -log tan(phi/2).
    let s0 = {
        let offset = p.horizontal - center;
        (offset.re * alpha.re + offset.im * alpha.im) / radius
    };
    let phi0 = s0.clamp(-1.0, 1.0).acos();
    let phi = 2.0 * ((phi0 * 0.5).tan() * (-r).exp()).atan();
    H3Point {
        horizontal: center + radius * phi.cos() * alpha,
        height: radius * phi.sin(),
    }
}

/// Initial unit tangent at `p` of the geodesic segment towards `q` (p ≠ q).
pub fn unit_tangent_between(p: &H3Point, q: &H3Point) -> H3Tangent {
    // Translate p to (0, 1): w -> (w - p.horizontal)/p.height.
    let qh = (q.horizontal - p.horizontal) / p.height;
    let qt = q.height / p.height;
    let rho = qh.norm();
    if rho < 1e-15 {
        let sign = if qt >= 1.0 { 1.0 } else { -1.0 };
        return H3Tangent { horizontal: Complex64::new(0.0, 0.0), vertical: sign * p.height };
    }
    let alpha = qh / rho;
    // Vertical semicircle through (0,1) and (rho, qt): center coordinate c on
    // the alpha-axis satisfies c^2 + 1 = (rho - c)^2 + qt^2.
    let c = (rho * rho + qt * qt - 1.0) / (2.0 * rho);
    // Tangent to the circle at (0, 1), oriented towards positive rho.
    let norm = (1.0 + c * c).sqrt();
    H3Tangent {
        horizontal: alpha * (p.height / norm),
        vertical: c * p.height / norm,
    }
}

//! Schwarzian derivatives of locally injective holomorphic maps, Schwarzian
//! tensors of pairs of conformal metrics, the Möbius-flat deviation B(σ), and
//! norms of quadratic differentials.
//!
//! Conventions on a planar chart: a conformal metric is σ = e^{2η} |dz|², a
//! quadratic differential is φ = λ(z) dz². The Schwarzian tensor of σ₁
//! relative to σ₂ is
//!
//!   B(σ₁, σ₂) = ((η₂)_zz − (η₂)_z² − (η₁)_zz + (η₁)_z²) dz²
//!
//! and B(σ) = B(|dz|², σ) measures the deviation of σ from a Möbius-flat
//! metric. ‖φ‖_σ = e^{−2η} |λ| pointwise.

use num_complex::Complex64;

use crate::field::{Chart, ComplexGrid, RealGrid, FD_MARGIN};
use crate::geom::MoebiusTransform;
use crate::{EpsteinLabError, Result};

/// Evaluator type shared by [`HolomorphicMap`] and its analytic jets.
pub type ComplexMap = Box<dyn Fn(Complex64) -> Complex64>;

/// Default relative tolerance on ∂_z̄ λ for a field to be declared holomorphic.
pub const HOLOMORPHY_TOL: f64 = 1e-6;
/// |f'| below this value is treated as a singular (non-locally-injective) map.
pub const SINGULAR_MAP_TOL: f64 = 1e-10;

/// Conformal metric σ = e^{2η} |dz|² on a planar chart.
///
/// `eta_z` optionally carries analytic Wirtinger derivatives; when absent the
/// 4th-order stencils of the chart are used.
#[derive(Debug, Clone)]
pub struct ConformalMetric {
    pub chart: Chart,
    pub eta: Vec<f64>,
    pub eta_z: Option<Vec<Complex64>>,
}

impl ConformalMetric {
    pub fn from_fn(chart: Chart, f: impl Fn(Complex64) -> f64) -> Self {
        let eta = RealGrid::from_fn(chart, f).data;
        ConformalMetric { chart, eta, eta_z: None }
    }

    pub fn with_gradient(mut self, eta_z: impl Fn(Complex64) -> Complex64) -> Self {
        self.eta_z = Some(ComplexGrid::from_fn(self.chart, eta_z).data);
        self
    }

    /// Flat reference |dz|².
    pub fn flat(chart: Chart) -> Self {
        ConformalMetric {
            chart,
            eta: vec![0.0; chart.len()],
            eta_z: Some(vec![Complex64::new(0.0, 0.0); chart.len()]),
        }
    }

    /// e^{2t} × Poincaré metric of the unit disk; the chart must stay inside
    /// the disk.
    pub fn scaled_poincare_disk(chart: Chart, t: f64) -> Self {
        let eta = RealGrid::from_fn(chart, |z| {
            let r2 = z.norm_sqr();
            assert!(r2 < 1.0, "chart leaves the unit disk");
            t + (2.0 / (1.0 - r2)).ln()
        })
        .data;
        let eta_z = ComplexGrid::from_fn(chart, |z| z.conj() / (1.0 - z.norm_sqr())).data;
        ConformalMetric { chart, eta, eta_z: Some(eta_z) }
    }

    pub fn eta_grid(&self) -> RealGrid {
        RealGrid { chart: self.chart, data: self.eta.clone() }
    }

    /// η_z at an interior node, analytic when available.
    pub fn eta_z_at(&self, i: usize, j: usize) -> Complex64 {
        match &self.eta_z {
            Some(g) => g[self.chart.idx(i, j)],
            None => self.eta_grid_ref().wirtinger_z(i, j),
        }
    }

    fn eta_grid_ref(&self) -> RealGrid {
        RealGrid { chart: self.chart, data: self.eta.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.eta.iter().any(|v| !v.is_finite()) {
            return Err(EpsteinLabError::Invalid("non-finite log-density".into()));
        }
        if let Some(grad) = &self.eta_z {
            if grad.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(EpsteinLabError::Invalid("non-finite analytic gradient".into()));
            }
        }
        Ok(())
    }
}

/// Quadratic differential φ = λ(z) dz² on a planar chart.
#[derive(Debug, Clone)]
pub struct QuadDifferential {
    pub chart: Chart,
    pub lambda: Vec<Complex64>,
    /// Set when ∂_z̄ λ has been checked against [`HOLOMORPHY_TOL`] × max |λ|.
    pub holomorphic: bool,
}

impl QuadDifferential {
    pub fn from_fn(chart: Chart, f: impl Fn(Complex64) -> Complex64) -> Self {
        QuadDifferential { chart, lambda: ComplexGrid::from_fn(chart, f).data, holomorphic: false }
    }

    pub fn zero(chart: Chart) -> Self {
        QuadDifferential {
            chart,
            lambda: vec![Complex64::new(0.0, 0.0); chart.len()],
            holomorphic: true,
        }
    }

    pub fn grid(&self) -> ComplexGrid {
        ComplexGrid { chart: self.chart, data: self.lambda.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.lambda.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Verifies ∂_z̄ λ ≈ 0 by finite differences and records the flag.
    pub fn assert_holomorphic(mut self, tol_rel: f64) -> Result<Self> {
        let grid = self.grid();
        let scale = self.max_abs().max(1e-300);
        let mut worst = 0.0f64;
        for (i, j, _) in self.chart.interior(FD_MARGIN) {
            // ∂_z̄ f = ½(∂x + i ∂y) f for complex fields.
            let dbar = 0.5 * (grid.dx(i, j) + Complex64::i() * grid.dy(i, j));
            worst = worst.max(dbar.norm());
        }
        if worst > tol_rel * scale {
            return Err(EpsteinLabError::Invalid(format!(
                "field is not holomorphic: max |d/dzbar| = {worst:.3e} vs tol {:.3e}",
                tol_rel * scale
            )));
        }
        self.holomorphic = true;
        Ok(self)
    }
}

/// Locally injective holomorphic map with optional analytic derivatives.
pub struct HolomorphicMap {
    pub f: ComplexMap,
    /// Analytic (f', f'', f''') when available.
    pub derivatives: Option<[ComplexMap; 3]>,
    /// Finite-difference step for the fallback complex stencils.
    pub fd_step: f64,
}

impl HolomorphicMap {
    pub fn new(f: impl Fn(Complex64) -> Complex64 + 'static) -> Self {
        HolomorphicMap { f: Box::new(f), derivatives: None, fd_step: 8e-3 }
    }

    pub fn with_derivatives(
        f: impl Fn(Complex64) -> Complex64 + 'static,
        d1: impl Fn(Complex64) -> Complex64 + 'static,
        d2: impl Fn(Complex64) -> Complex64 + 'static,
        d3: impl Fn(Complex64) -> Complex64 + 'static,
    ) -> Self {
        HolomorphicMap {
            f: Box::new(f),
            derivatives: Some([Box::new(d1), Box::new(d2), Box::new(d3)]),
            fd_step: 8e-3,
        }
    }

    pub fn moebius(m: MoebiusTransform) -> Self {
        let f = move |z| match m.apply_boundary(crate::geom::BoundaryPoint::Finite(z)) {
            crate::geom::BoundaryPoint::Finite(w) => w,
            crate::geom::BoundaryPoint::Infinity => Complex64::new(f64::INFINITY, 0.0),
        };
        let d1 = move |z: Complex64| {
            let den = m.c * z + m.d;
            1.0 / (den * den)
        };
        let d2 = move |z: Complex64| {
            let den = m.c * z + m.d;
            -2.0 * m.c / (den * den * den)
        };
        let d3 = move |z: Complex64| {
            let den = m.c * z + m.d;
            6.0 * m.c * m.c / (den * den * den * den)
        };
        HolomorphicMap::with_derivatives(f, d1, d2, d3)
    }

    /// (f', f'', f''') at z, analytic when provided, else 4th-order complex
    /// central differences along the real direction.
    pub fn jet(&self, z: Complex64) -> (Complex64, Complex64, Complex64) {
        if let Some(d) = &self.derivatives {
            return ((d[0])(z), (d[1])(z), (d[2])(z));
        }
        let h = self.fd_step;
        let f = |k: isize| (self.f)(z + Complex64::new(k as f64 * h, 0.0));
        let d1 = (f(-2) - f(2) + 8.0 * (f(1) - f(-1))) / (12.0 * h);
        let d2 = (16.0 * (f(1) + f(-1)) - (f(2) + f(-2)) - 30.0 * f(0)) / (12.0 * h * h);
        let d3 = (f(-3) - f(3) + 8.0 * (f(2) - f(-2)) + 13.0 * (f(-1) - f(1)))
            / (8.0 * h * h * h);
        (d1, d2, d3)
    }
}

/// Schwarzian derivative S(f) = (f''/f')' − ½ (f''/f')² as a quadratic
/// differential sampled on the chart.
pub fn schwarzian_derivative(f: &HolomorphicMap, chart: Chart) -> Result<QuadDifferential> {
    let mut lambda = Vec::with_capacity(chart.len());
    for j in 0..chart.ny {
        for i in 0..chart.nx {
            let z = chart.point(i, j);
            let (d1, d2, d3) = f.jet(z);
            if d1.norm() < SINGULAR_MAP_TOL {
                return Err(EpsteinLabError::SingularMap(format!(
                    "|f'| = {:.3e} at z = {z}",
                    d1.norm()
                )));
            }
            let q = d2 / d1;
            lambda.push(d3 / d1 - 1.5 * q * q);
        }
    }
    Ok(QuadDifferential { chart, lambda, holomorphic: false })
}

/// Osgood–Stowe Schwarzian tensor B(σ₁, σ₂).
pub fn schwarzian_tensor(s1: &ConformalMetric, s2: &ConformalMetric) -> Result<QuadDifferential> {
    if !s1.chart.same_geometry(&s2.chart) {
        return Err(EpsteinLabError::ChartMismatch(
            "schwarzian_tensor arguments live on different charts".into(),
        ));
    }
    let chart = s1.chart;
    let g1 = s1.eta_grid();
    let g2 = s2.eta_grid();
    let mut lambda = vec![Complex64::new(0.0, 0.0); chart.len()];
    for (i, j, k) in chart.interior(FD_MARGIN) {
        let b2 = g2.wirtinger_zz(i, j) - s2.eta_z_at(i, j).powi(2);
        let b1 = g1.wirtinger_zz(i, j) - s1.eta_z_at(i, j).powi(2);
        lambda[k] = b2 - b1;
    }
    Ok(QuadDifferential { chart, lambda, holomorphic: false })
}

/// Möbius-flat deviation B(σ) = B(|dz|², σ) on a planar chart.
pub fn mobius_flat_deviation(s: &ConformalMetric) -> Result<QuadDifferential> {
    let chart = s.chart;
    let g = s.eta_grid();
    let mut lambda = vec![Complex64::new(0.0, 0.0); chart.len()];
    match &s.eta_z {
        Some(grad) => {
            // One finite-difference layer on the analytic gradient.
            let gz = ComplexGrid { chart, data: grad.clone() };
            for (i, j, k) in chart.interior(FD_MARGIN) {
                let eta_zz = gz.wirtinger_z(i, j);
                lambda[k] = eta_zz - grad[k] * grad[k];
            }
        }
        None => {
            for (i, j, k) in chart.interior(FD_MARGIN) {
                let eta_z = g.wirtinger_z(i, j);
                lambda[k] = g.wirtinger_zz(i, j) - eta_z * eta_z;
            }
        }
    }
    Ok(QuadDifferential { chart, lambda, holomorphic: false })
}

/// Pointwise norm ‖φ‖_σ = e^{−2η} |λ|.
pub fn qd_norm(phi: &QuadDifferential, s: &ConformalMetric) -> Result<RealGrid> {
    if !phi.chart.same_geometry(&s.chart) {
        return Err(EpsteinLabError::ChartMismatch(
            "qd_norm arguments live on different charts".into(),
        ));
    }
    let data = phi
        .lambda
        .iter()
        .zip(&s.eta)
        .map(|(l, eta)| (-2.0 * eta).exp() * l.norm())
        .collect();
    Ok(RealGrid { chart: s.chart, data })
}

/// Pullback f*σ of a conformal metric by a Möbius map.
pub fn pullback_metric(m: &MoebiusTransform, s: &ConformalMetric, chart: Chart) -> ConformalMetric {
    let mm = *m;
    let sample = |z: Complex64| -> f64 {
        let w = match mm.apply_boundary(crate::geom::BoundaryPoint::Finite(z)) {
            crate::geom::BoundaryPoint::Finite(w) => w,
            crate::geom::BoundaryPoint::Infinity => panic!("pullback hits infinity"),
        };
        let (i, j) = nearest_node(&s.chart, w);
        s.eta[s.chart.idx(i, j)] + mm.derivative(z).norm().ln()
    };
    ConformalMetric::from_fn(chart, sample)
}

fn nearest_node(chart: &Chart, z: Complex64) -> (usize, usize) {
    let i = ((z.re - chart.origin.re) / chart.dx).round() as isize;
    let j = ((z.im - chart.origin.im) / chart.dy).round() as isize;
    (
        i.clamp(0, chart.nx as isize - 1) as usize,
        j.clamp(0, chart.ny as isize - 1) as usize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn annulus_chart() -> Chart {
        // Box away from the origin so that z^2 is locally injective on it.
        Chart::new(Complex64::new(0.8, 0.6), 0.01, 41, 41)
    }

    #[test]
    fn schwarzian_of_moebius_vanishes() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..10 {
            let c = |rng: &mut StdRng| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let m = match MoebiusTransform::new(c(&mut rng), c(&mut rng), c(&mut rng), c(&mut rng)) {
                Ok(m) => m,
                Err(_) => continue,
            };
            // Keep the chart away from the pole of m.
            let chart = annulus_chart();
            let pole = if m.c.norm() > 1e-9 { Some(-m.d / m.c) } else { None };
            if let Some(p) = pole {
                if (p - Complex64::new(1.0, 0.8)).norm() < 0.6 {
                    continue;
                }
            }
            let s = schwarzian_derivative(&HolomorphicMap::moebius(m), chart).unwrap();
            assert!(s.max_abs() < 1e-9, "S(moebius) = {:.3e}", s.max_abs());
        }
    }

    #[test]
    fn schwarzian_of_square_and_exp() {
        let chart = annulus_chart();
        let sq = HolomorphicMap::with_derivatives(
            |z| z * z,
            |z| 2.0 * z,
            |_| Complex64::new(2.0, 0.0),
            |_| Complex64::new(0.0, 0.0),
        );
        let s = schwarzian_derivative(&sq, chart).unwrap();
        for j in 0..chart.ny {
            for i in 0..chart.nx {
                let z = chart.point(i, j);
                let expect = -1.5 / (z * z);
                assert!((s.lambda[chart.idx(i, j)] - expect).norm() < 1e-12);
            }
        }

        let e = HolomorphicMap::new(|z| z.exp());
        let s = schwarzian_derivative(&e, chart).unwrap();
        for (_, _, k) in chart.interior(0) {
            assert!((s.lambda[k] - Complex64::new(-0.5, 0.0)).norm() < 2e-8);
        }
    }

    #[test]
    fn schwarzian_fd_fallback_matches_analytic() {
        let chart = annulus_chart();
        let with = HolomorphicMap::with_derivatives(
            |z| z.exp(),
            |z| z.exp(),
            |z| z.exp(),
            |z| z.exp(),
        );
        let without = HolomorphicMap::new(|z| z.exp());
        let sa = schwarzian_derivative(&with, chart).unwrap();
        let sf = schwarzian_derivative(&without, chart).unwrap();
        for k in 0..chart.len() {
            assert!((sa.lambda[k] - sf.lambda[k]).norm() < 2e-8);
        }
    }

    #[test]
    fn holomorphy_flag_checks_dbar() {
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.5, 41);
        let holo = QuadDifferential::from_fn(chart, |z| z * z + Complex64::new(0.1, -0.2));
        assert!(holo.assert_holomorphic(HOLOMORPHY_TOL).is_ok());
        let not_holo = QuadDifferential::from_fn(chart, |z| Complex64::new(z.norm_sqr(), 0.0));
        assert!(not_holo.assert_holomorphic(HOLOMORPHY_TOL).is_err());
    }

    #[test]
    fn singular_map_is_reported() {
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.5, 11);
        let sq = HolomorphicMap::with_derivatives(
            |z| z * z,
            |z| 2.0 * z,
            |_| Complex64::new(2.0, 0.0),
            |_| Complex64::new(0.0, 0.0),
        );
        assert!(matches!(
            schwarzian_derivative(&sq, chart),
            Err(EpsteinLabError::SingularMap(_))
        ));
    }

    fn smooth_metric(seed: u64, chart: Chart) -> ConformalMetric {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = rng.gen_range(-0.5..0.5);
        let b = rng.gen_range(-0.5..0.5);
        let c = rng.gen_range(-0.3..0.3);
        ConformalMetric::from_fn(chart, move |z| {
            a * (z.re * 1.3).sin() * (z.im).cos() + b * z.re * z.im + c * (z.norm_sqr() * 0.5).cos()
        })
    }

    #[test]
    fn tensor_antisymmetry_and_diagonal() {
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.8, 41);
        let s1 = smooth_metric(31, chart);
        let s2 = smooth_metric(32, chart);
        let b11 = schwarzian_tensor(&s1, &s1).unwrap();
        assert!(b11.max_abs() < 1e-12);
        let b12 = schwarzian_tensor(&s1, &s2).unwrap();
        let b21 = schwarzian_tensor(&s2, &s1).unwrap();
        for k in 0..chart.len() {
            assert!((b12.lambda[k] + b21.lambda[k]).norm() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn tensor_cocycle(seed1 in 0u64..1000, seed2 in 1000u64..2000, seed3 in 2000u64..3000) {
            let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.8, 33);
            let s1 = smooth_metric(seed1, chart);
            let s2 = smooth_metric(seed2, chart);
            let s3 = smooth_metric(seed3, chart);
            let b13 = schwarzian_tensor(&s1, &s3).unwrap();
            let b12 = schwarzian_tensor(&s1, &s2).unwrap();
            let b23 = schwarzian_tensor(&s2, &s3).unwrap();
            for k in 0..chart.len() {
                prop_assert!((b13.lambda[k] - (b12.lambda[k] + b23.lambda[k])).norm() < 1e-8);
            }
        }

        #[test]
        fn qd_norm_scaling(t in -0.5f64..0.5, seed in 0u64..500) {
            let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.6, 17);
            let s = smooth_metric(seed, chart);
            let mut scaled = s.clone();
            for v in &mut scaled.eta { *v += t; }
            let phi = QuadDifferential::from_fn(chart, |z| z * z + Complex64::new(0.3, 0.1));
            let n0 = qd_norm(&phi, &s).unwrap();
            let n1 = qd_norm(&phi, &scaled).unwrap();
            for k in 0..chart.len() {
                prop_assert!((n1.data[k] - (-2.0 * t).exp() * n0.data[k]).abs() < 1e-12 * (1.0 + n0.data[k]));
            }
        }
    }

    #[test]
    fn flat_deviation_examples() {
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.4, 321);
        // Reference metric: zero.
        let flat = ConformalMetric::flat(chart);
        assert!(mobius_flat_deviation(&flat).unwrap().max_abs() < 1e-14);

        // Poincaré disk metric is Möbius flat; FD route, no analytic gradient.
        let mut poincare = ConformalMetric::scaled_poincare_disk(chart, 0.25);
        poincare.eta_z = None;
        let b = mobius_flat_deviation(&poincare).unwrap();
        assert!(b.max_abs() < 1e-8, "B(poincare) = {:.3e}", b.max_abs());

        // Scale invariance B(e^{2t} σ) = B(σ).
        let s = smooth_metric(77, chart);
        let mut scaled = s.clone();
        for v in &mut scaled.eta {
            *v += 0.7;
        }
        let b0 = mobius_flat_deviation(&s).unwrap();
        let b1 = mobius_flat_deviation(&scaled).unwrap();
        for k in 0..chart.len() {
            assert!((b0.lambda[k] - b1.lambda[k]).norm() < 1e-10 * (1.0 + b0.lambda[k].norm()));
        }
    }

    #[test]
    fn qd_norm_zero_and_naturality() {
        let chart = Chart::centered_square(Complex64::new(0.0, 0.0), 0.4, 21);
        let s = smooth_metric(55, chart);
        let zero = QuadDifferential::zero(chart);
        let n = qd_norm(&zero, &s).unwrap();
        assert!(n.data.iter().all(|v| *v == 0.0));

        // Naturality under a Möbius map evaluated through analytic pullbacks.
        let m = MoebiusTransform::new(
            Complex64::new(1.0, 0.1),
            Complex64::new(0.08, -0.03),
            Complex64::new(0.05, 0.0),
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let eta = |z: Complex64| 0.3 * (z.re).sin() + 0.2 * z.im;
        let lam = |z: Complex64| z * z + Complex64::new(0.2, 0.4);
        let fw = |z: Complex64| m.apply_boundary(crate::geom::BoundaryPoint::Finite(z)).finite().unwrap();
        let pull_sigma = ConformalMetric::from_fn(chart, |z| eta(fw(z)) + m.derivative(z).norm().ln());
        let pull_phi = QuadDifferential::from_fn(chart, |z| lam(fw(z)) * m.derivative(z) * m.derivative(z));
        let lhs = qd_norm(&pull_phi, &pull_sigma).unwrap();
        for (i, j, k) in chart.interior(0) {
            let z = chart.point(i, j);
            let w = fw(z);
            let rhs = (-2.0 * eta(w)).exp() * lam(w).norm();
            assert!((lhs.data[k] - rhs).abs() < 1e-8 * (1.0 + rhs), "{} vs {}", lhs.data[k], rhs);
        }
    }

    #[test]
    fn schwarzian_cocycle_random_moebius_batch() {
        // S(f ∘ g) = g* S(f) for a batch of random Möbius g (S(g) = 0),
        // with f = exp so that g* S(f) = −½ g'(z)² analytically.
        let chart = Chart::new(Complex64::new(0.8, 0.6), 0.01, 21, 21);
        let mut rng = StdRng::seed_from_u64(4242);
        let mut tested = 0;
        while tested < 12 {
            let c = |rng: &mut StdRng| {
                Complex64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))
            };
            let g = match MoebiusTransform::new(
                Complex64::new(1.0, 0.0) + 0.3 * c(&mut rng),
                c(&mut rng),
                c(&mut rng),
                Complex64::new(1.0, 0.0) + 0.3 * c(&mut rng),
            ) {
                Ok(g) => g,
                Err(_) => continue,
            };
            // Keep the pole of g away from the chart.
            if g.c.norm() > 1e-9 && ((-g.d / g.c) - Complex64::new(1.0, 0.8)).norm() < 1.0 {
                continue;
            }
            let gf = move |z: Complex64| {
                g.apply_boundary(crate::geom::BoundaryPoint::Finite(z)).finite().unwrap()
            };
            let composed = HolomorphicMap::with_derivatives(
                move |z| gf(z).exp(),
                move |z| gf(z).exp() * g.derivative(z),
                move |z| {
                    let den = g.c * z + g.d;
                    let d1 = g.derivative(z);
                    let d2 = -2.0 * g.c / (den * den * den);
                    gf(z).exp() * (d1 * d1 + d2)
                },
                move |z| {
                    let den = g.c * z + g.d;
                    let d1 = g.derivative(z);
                    let d2 = -2.0 * g.c / (den * den * den);
                    let d3 = 6.0 * g.c * g.c / (den * den * den * den);
                    gf(z).exp() * (d1 * d1 * d1 + 3.0 * d1 * d2 + d3)
                },
            );
            let lhs = schwarzian_derivative(&composed, chart).unwrap();
            let mut worst = 0.0f64;
            for j in 0..chart.ny {
                for i in 0..chart.nx {
                    let z = chart.point(i, j);
                    let expect = Complex64::new(-0.5, 0.0) * g.derivative(z) * g.derivative(z);
                    worst = worst.max((lhs.lambda[chart.idx(i, j)] - expect).norm());
                }
            }
            assert!(worst < 1e-7, "cocycle residual {worst:.3e}");
            tested += 1;
        }
    }

    #[test]
    fn schwarzian_cocycle_with_moebius() {
        // S(f ∘ g) = g* S(f) + S(g) with g Möbius (so S(g) = 0).
        let chart = annulus_chart();
        let g = MoebiusTransform::new(
            Complex64::new(1.0, 0.0),
            Complex64::new(0.2, 0.1),
            Complex64::new(-0.1, 0.05),
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let gf = move |z: Complex64| {
            g.apply_boundary(crate::geom::BoundaryPoint::Finite(z)).finite().unwrap()
        };
        let f = HolomorphicMap::with_derivatives(|z| z.exp(), |z| z.exp(), |z| z.exp(), |z| z.exp());
        let gd1 = move |z| g.derivative(z);
        let composed = HolomorphicMap::with_derivatives(
            move |z| gf(z).exp(),
            move |z| gf(z).exp() * gd1(z),
            move |z| {
                let d1 = gd1(z);
                let den = g.c * z + g.d;
                let d2 = -2.0 * g.c / (den * den * den);
                gf(z).exp() * (d1 * d1) + gf(z).exp() * d2
            },
            move |z| {
                let den = g.c * z + g.d;
                let d1 = gd1(z);
                let d2 = -2.0 * g.c / (den * den * den);
                let d3 = 6.0 * g.c * g.c / (den * den * den * den);
                gf(z).exp() * (d1 * d1 * d1) + 3.0 * gf(z).exp() * d1 * d2 + gf(z).exp() * d3
            },
        );
        let lhs = schwarzian_derivative(&composed, chart).unwrap();
        let sf = schwarzian_derivative(&f, chart).unwrap();
        let mut worst = 0.0f64;
        for j in 0..chart.ny {
            for i in 0..chart.nx {
                let z = chart.point(i, j);
                let pull = {
                    let w = g.apply_boundary(crate::geom::BoundaryPoint::Finite(z)).finite().unwrap();
                    // g* S(f) evaluated analytically: S(f)(g z) g'(z)^2.
                    let sfw = {
                        let ew = w.exp();
                        let q = ew / ew;
                        let _ = q;
                        Complex64::new(-0.5, 0.0)
                    };
                    sfw * g.derivative(z) * g.derivative(z)
                };
                worst = worst.max((lhs.lambda[chart.idx(i, j)] - pull).norm());
                let _ = sf;
            }
        }
        assert!(worst < 1e-7, "cocycle residual {worst:.3e}");
    }

    #[test]
    fn schwarzian_equals_twice_flat_deviation_of_pullback() {
        // S(f) = 2 B(|dz|², f*|dz|²) checked with finite differences.
        let chart = Chart::new(Complex64::new(0.8, 0.6), 0.004, 61, 61);
        let f = HolomorphicMap::with_derivatives(|z| z.exp(), |z| z.exp(), |z| z.exp(), |z| z.exp());
        let sf = schwarzian_derivative(&f, chart).unwrap();
        // f*|dz|² has log-density log |f'| = Re z for exp.
        let pulled = ConformalMetric::from_fn(chart, |z| z.re);
        let b = mobius_flat_deviation(&pulled).unwrap();
        for (_, _, k) in chart.interior(FD_MARGIN) {
            assert!((sf.lambda[k] - 2.0 * b.lambda[k]).norm() < 1e-6);
        }
    }

    #[test]
    fn flat_deviation_moebius_naturality() {
        // B(f*σ) = f* B(σ) for a Möbius map, on analytic data.
        let chart = Chart::centered_square(Complex64::new(0.1, 0.05), 0.3, 81);
        let m = MoebiusTransform::new(
            Complex64::new(1.0, 0.0),
            Complex64::new(0.15, 0.1),
            Complex64::new(0.1, -0.08),
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        let eta = |z: Complex64| 0.4 * (1.1 * z.re).cos() * (0.9 * z.im).sin();
        let fw = move |z: Complex64| {
            m.apply_boundary(crate::geom::BoundaryPoint::Finite(z)).finite().unwrap()
        };
        let sigma_pulled = ConformalMetric::from_fn(chart, |z| eta(fw(z)) + m.derivative(z).norm().ln());
        let lhs = mobius_flat_deviation(&sigma_pulled).unwrap();

        // Evaluate B(σ) on the image region and pull it back analytically.
        let image_chart = Chart::centered_square(fw(Complex64::new(0.1, 0.05)), 0.45, 161);
        let sigma = ConformalMetric::from_fn(image_chart, eta);
        let bsigma = mobius_flat_deviation(&sigma).unwrap();
        let bgrid = bsigma.grid();
        let mut worst = 0.0f64;
        for (i, j, k) in chart.interior(FD_MARGIN) {
            let z = chart.point(i, j);
            let w = fw(z);
            let (wi, wj) = super::nearest_node(&image_chart, w);
            if !image_chart.is_interior(wi, wj, FD_MARGIN + 1) {
                continue;
            }
            // Bilinear-free comparison at the nearest node is too coarse for
            // 1e−6; interpolate with a local quadratic fit along both axes.
            let val = interp_quadratic(&bgrid, w);
            let pull = val * m.derivative(z) * m.derivative(z);
            worst = worst.max((lhs.lambda[k] - pull).norm());
        }
        assert!(worst < 5e-6, "naturality residual {worst:.3e}");
    }

    fn interp_quadratic(grid: &ComplexGrid, w: Complex64) -> Complex64 {
        let chart = grid.chart;
        let fx = (w.re - chart.origin.re) / chart.dx;
        let fy = (w.im - chart.origin.im) / chart.dy;
        let i0 = fx.round() as usize;
        let j0 = fy.round() as usize;
        let dx = fx - i0 as f64;
        let dy = fy - j0 as f64;
        let v = |di: isize, dj: isize| {
            grid.data[chart.idx((i0 as isize + di) as usize, (j0 as isize + dj) as usize)]
        };
        let lag = |t: f64, fm: Complex64, f0: Complex64, fp: Complex64| {
            f0 + 0.5 * t * (fp - fm) + 0.5 * t * t * (fp - 2.0 * f0 + fm)
        };
        let row = |dj: isize| lag(dx, v(-1, dj), v(0, dj), v(1, dj));
        lag(dy, row(-1), row(0), row(1))
    }
}

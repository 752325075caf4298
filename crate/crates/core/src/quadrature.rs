//! Gauss-Legendre and Gauss-Hermite rules, plus the graded composite
//! Legendre rule used for hazard integrals with endpoint power singularities.
//!
//! Nodes and weights are found by Newton iteration on the three-term
//! recurrences in `f64` and then converted to the requested scalar type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("a quadrature rule needs at least one node")]
    ZeroNodes,
    #[error("composite rule needs at least one panel")]
    ZeroPanels,
    #[error("grading exponent must be at least 1")]
    ZeroGrading,
    #[error("Newton iteration for node {index} of the {kind:?} rule with {nodes} nodes did not converge")]
    NoConvergence {
        kind: RuleKind,
        nodes: usize,
        index: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// `∫_{-1}^{1} f(x) dx`.
    Legendre,
    /// `∫ f(x) e^{−x²} dx` over the real line.
    Hermite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub kind: RuleKind,
    /// Ascending nodes.
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    /// `Σ w_k f(x_k)`.
    pub fn apply(&self, mut f: impl FnMut(T) -> T) -> T {
        self.iter().fold(T::zero(), |acc, (x, w)| acc + w * f(x))
    }

    fn cast(kind: RuleKind, nodes: Vec<f64>, weights: Vec<f64>) -> Self {
        Self {
            kind,
            nodes: nodes.into_iter().map(T::lit).collect(),
            weights: weights.into_iter().map(T::lit).collect(),
        }
    }
}

const MAX_NEWTON: usize = 100;

/// `K`-point Gauss-Legendre rule on `[−1, 1]`, exact for polynomials of
/// degree `≤ 2K − 1`.
pub fn gauss_legendre_rule<T: Real>(k: usize) -> Result<QuadratureRule<T>, QuadratureError> {
    if k == 0 {
        return Err(QuadratureError::ZeroNodes);
    }
    let n = k as f64;
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for i in 0..k.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut converged = false;
        let mut pp = 0.0;
        for _ in 0..MAX_NEWTON {
            let (p1, p2) = legendre_pair(k, z);
            pp = n * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::NoConvergence {
                kind: RuleKind::Legendre,
                nodes: k,
                index: i,
            });
        }
        // refresh the derivative at the converged node
        let (p1, p2) = legendre_pair(k, z);
        if z * z < 1.0 && (z * p1 - p2) != 0.0 {
            pp = n * (z * p1 - p2) / (z * z - 1.0);
        }
        if 2 * i + 1 == k {
            z = 0.0;
        }
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        nodes[i] = -z;
        nodes[k - 1 - i] = z;
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    Ok(QuadratureRule::cast(RuleKind::Legendre, nodes, weights))
}

/// `(P_n(z), P_{n−1}(z))`.
fn legendre_pair(n: usize, z: f64) -> (f64, f64) {
    let (mut p1, mut p2) = (1.0, 0.0);
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
    }
    (p1, p2)
}

/// `K`-point Gauss-Hermite rule for the weight `e^{−x²}` (weights sum to √π).
pub fn gauss_hermite_rule<T: Real>(k: usize) -> Result<QuadratureRule<T>, QuadratureError> {
    if k == 0 {
        return Err(QuadratureError::ZeroNodes);
    }
    let n = k as f64;
    let mut x = vec![0.0; k];
    let mut w = vec![0.0; k];
    let mut z = 0.0;
    for i in 0..k.div_ceil(2) {
        z = match i {
            0 => (2.0 * n + 1.0).sqrt() - 1.85575 * (2.0 * n + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * n.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut converged = false;
        for _ in 0..MAX_NEWTON {
            let (p1, pp) = hermite_pair(k, z);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::NoConvergence {
                kind: RuleKind::Hermite,
                nodes: k,
                index: i,
            });
        }
        if 2 * i + 1 == k {
            z = 0.0;
        }
        let (_, pp) = hermite_pair(k, z);
        x[i] = z;
        x[k - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[k - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    Ok(QuadratureRule::cast(RuleKind::Hermite, x, w))
}

/// Orthonormal Hermite recurrence; returns `(p_n(z), p_n'(z))`.
fn hermite_pair(n: usize, z: f64) -> (f64, f64) {
    // π^{-1/4}
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let (mut p1, mut p2) = (PIM4, 0.0);
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Composite Gauss-Legendre scheme for `∫_a^b f(s) ds`.
///
/// The unit interval is cut into `panels` equal pieces, each carrying a
/// `nodes`-point Legendre rule, and mapped to the integration interval through
/// `u ↦ u^grading`. Grading clusters nodes at the singular endpoint so that
/// integrands behaving like `(s − a)^(α−1)`, as Weibull hazards with
/// non-integer shape do, still converge quickly. With `panels = 1` and
/// `grading = 1` this is the plain affine-mapped Legendre rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegendreScheme {
    pub nodes: usize,
    pub panels: usize,
    pub grading: u32,
}

impl LegendreScheme {
    pub const fn new(nodes: usize, panels: usize, grading: u32) -> Self {
        Self {
            nodes,
            panels,
            grading,
        }
    }

    /// Plain Legendre rule with an affine map, no panels or grading.
    pub const fn affine(nodes: usize) -> Self {
        Self::new(nodes, 1, 1)
    }

    /// Default grading with the given node count.
    pub const fn graded(nodes: usize) -> Self {
        Self::new(nodes, 4, 6)
    }

    pub fn is_affine(&self) -> bool {
        self.panels == 1 && self.grading == 1
    }

    fn validate(&self) -> Result<(), QuadratureError> {
        if self.nodes == 0 {
            Err(QuadratureError::ZeroNodes)
        } else if self.panels == 0 {
            Err(QuadratureError::ZeroPanels)
        } else if self.grading == 0 {
            Err(QuadratureError::ZeroGrading)
        } else {
            Ok(())
        }
    }
}

impl Default for LegendreScheme {
    fn default() -> Self {
        Self::graded(5)
    }
}

/// Nodes and weights on `[0, 1]` (weights sum to one) realizing a
/// [`LegendreScheme`]. Scale with [`UnitRule::integrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRule<T> {
    pub points: Vec<T>,
    pub weights: Vec<T>,
    /// `1 − points[i]` without cancellation, so nodes crowding the right
    /// endpoint never round onto it.
    pub complements: Vec<T>,
}

impl<T: Real> UnitRule<T> {
    /// Rule graded toward 0 only.
    pub fn one_sided(scheme: LegendreScheme) -> Result<Self, QuadratureError> {
        scheme.validate()?;
        let base = gauss_legendre_rule::<f64>(scheme.nodes)?;
        let q = scheme.grading as i32;
        let width = 1.0 / scheme.panels as f64;
        let mut points = Vec::with_capacity(scheme.nodes * scheme.panels);
        let mut weights = Vec::with_capacity(points.capacity());
        for p in 0..scheme.panels {
            let lo = p as f64 * width;
            for (x, w) in base.iter() {
                let u = lo + 0.5 * (x + 1.0) * width;
                let wu = 0.5 * w * width;
                points.push(T::lit(u.powi(q)));
                weights.push(T::lit(q as f64 * u.powi(q - 1) * wu));
            }
        }
        let complements = points.iter().map(|p| T::one() - *p).collect();
        Ok(Self {
            points,
            weights,
            complements,
        })
    }

    /// Rule graded toward both endpoints: each half of `[0, 1]` carries a
    /// one-sided rule pointing at its outer end. Falls back to the one-sided
    /// rule when the scheme is ungraded.
    pub fn two_sided(scheme: LegendreScheme) -> Result<Self, QuadratureError> {
        let one = Self::one_sided(scheme)?;
        if scheme.grading == 1 {
            return Ok(one);
        }
        let half = T::half();
        let n = 2 * one.points.len();
        let mut points = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut complements = Vec::with_capacity(n);
        for (p, w) in one.points.iter().zip(&one.weights) {
            points.push(half * *p);
            complements.push(T::one() - half * *p);
            weights.push(half * *w);
        }
        for (p, w) in one.points.iter().zip(&one.weights).rev() {
            points.push(T::one() - half * *p);
            complements.push(half * *p);
            weights.push(half * *w);
        }
        Ok(Self {
            points,
            weights,
            complements,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Node `i` mapped onto `[a, b]`, measured from the nearer endpoint.
    #[inline]
    pub fn node(&self, i: usize, a: T, b: T) -> T {
        let p = self.points[i];
        if p <= T::half() {
            a + (b - a) * p
        } else {
            b - (b - a) * self.complements[i]
        }
    }

    /// Like [`UnitRule::integrate`], but `f` also receives the exact gaps
    /// `s − a` and `b − s`, for integrands singular at either endpoint.
    pub fn integrate_with_gaps(&self, a: T, b: T, mut f: impl FnMut(T, T, T) -> T) -> T {
        let width = b - a;
        let mut acc = T::zero();
        for i in 0..self.points.len() {
            let (left, right) = (width * self.points[i], width * self.complements[i]);
            let s = if self.points[i] <= T::half() { a + left } else { b - right };
            acc += self.weights[i] * f(s, left, right);
        }
        acc * width
    }

    /// `∫_a^b f(s) ds ≈ (b − a) Σ W_i f(s_i)`.
    pub fn integrate(&self, a: T, b: T, mut f: impl FnMut(T) -> T) -> T {
        let mut acc = T::zero();
        for i in 0..self.points.len() {
            acc += self.weights[i] * f(self.node(i, a, b));
        }
        acc * (b - a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_classical_values() {
        let r = gauss_legendre_rule::<f64>(1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert!((r.weights[0] - 2.0).abs() < 1e-15);
        let r = gauss_legendre_rule::<f64>(2).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!((r.nodes[0] + s).abs() < 1e-15 && (r.nodes[1] - s).abs() < 1e-15);
        assert!((r.weights[0] - 1.0).abs() < 1e-15 && (r.weights[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn legendre_exactness_degree() {
        let r = gauss_legendre_rule::<f64>(5).unwrap();
        assert!(r.apply(|t| t.powi(9)).abs() < 1e-14);
        for k in 1..=20usize {
            let r = gauss_legendre_rule::<f64>(k).unwrap();
            for d in 0..2 * k {
                let exact = if d % 2 == 1 { 0.0 } else { 2.0 / (d as f64 + 1.0) };
                let got = r.apply(|t| t.powi(d as i32));
                assert!((got - exact).abs() < 1e-13, "K={k} degree {d}: {got} vs {exact}");
            }
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(r.nodes.iter().all(|x| x.abs() < 1.0));
            for i in 0..k {
                assert!((r.nodes[i] + r.nodes[k - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hermite_classical_values() {
        let r = gauss_hermite_rule::<f64>(1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert!((r.weights[0] - std::f64::consts::PI.sqrt()).abs() < 1e-14);
        let r = gauss_hermite_rule::<f64>(3).unwrap();
        let m2 = r.apply(|x| x * x);
        assert!((m2 - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn hermite_weights_sum_and_moments() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for k in 1..=40usize {
            let r = gauss_hermite_rule::<f64>(k).unwrap();
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - sqrt_pi).abs() < 1e-12, "K={k}: {sum}");
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            // E[x^{2m}] under e^{-x²}: Γ(m + 1/2)
            for m in 0..k.min(8) {
                let mut exact = sqrt_pi;
                for i in 0..m {
                    exact *= i as f64 + 0.5;
                }
                let got = r.apply(|x| x.powi(2 * m as i32));
                assert!(((got - exact) / exact).abs() < 1e-11, "K={k} m={m}");
            }
        }
    }

    #[test]
    fn hermite_matches_dense_grid_for_cosine() {
        // ∫ e^{-x²} cos x dx over a dense midpoint grid on [-12, 12]
        let n = 2_000_000;
        let (a, b) = (-12.0f64, 12.0);
        let h = (b - a) / n as f64;
        let oracle: f64 = (0..n)
            .map(|i| {
                let x = a + (i as f64 + 0.5) * h;
                (-x * x).exp() * x.cos()
            })
            .sum::<f64>()
            * h;
        let r = gauss_hermite_rule::<f64>(10).unwrap();
        assert!((r.apply(f64::cos) - oracle).abs() < 1e-10);
    }

    #[test]
    fn zero_nodes_rejected() {
        assert_eq!(gauss_legendre_rule::<f64>(0), Err(QuadratureError::ZeroNodes));
        assert_eq!(gauss_hermite_rule::<f64>(0), Err(QuadratureError::ZeroNodes));
        assert!(UnitRule::<f64>::one_sided(LegendreScheme::new(5, 0, 1)).is_err());
    }

    #[test]
    fn graded_rule_handles_power_singularity() {
        // ∫_0^1 s^{-1/2} ds = 2
        let rule = UnitRule::<f64>::one_sided(LegendreScheme::new(10, 2, 4)).unwrap();
        let got = rule.integrate(0.0, 1.0, |s| s.powf(-0.5));
        assert!((got - 2.0).abs() < 1e-9, "{got}");
        let sum: f64 = rule.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-14);
        // ∫_0^1 s^{-0.3} (1 − s)^{-0.4} ds = B(0.7, 0.6)
        let rule = UnitRule::<f64>::two_sided(LegendreScheme::new(15, 4, 6)).unwrap();
        let got = rule.integrate_with_gaps(0.0, 1.0, |_, l, r| l.powf(-0.3) * r.powf(-0.4));
        let beta = 2.153_890_871_161_322; // B(0.7, 0.6)
        assert!(((got - beta) / beta).abs() < 1e-9, "{got}");
    }

    #[test]
    fn affine_scheme_is_plain_legendre() {
        let rule = UnitRule::<f64>::two_sided(LegendreScheme::affine(5)).unwrap();
        let base = gauss_legendre_rule::<f64>(5).unwrap();
        for i in 0..5 {
            assert!((rule.points[i] - (base.nodes[i] + 1.0) / 2.0).abs() < 1e-15);
            assert!((rule.weights[i] - base.weights[i] / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn f32_rules() {
        let r = gauss_hermite_rule::<f32>(5).unwrap();
        let sum: f32 = r.weights.iter().sum();
        assert!((sum - std::f32::consts::PI.sqrt()).abs() < 1e-5);
    }
}

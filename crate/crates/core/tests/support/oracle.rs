//! Reference integrals for the illness-death rates, written straight from the
//! model densities with composite trapezoid rules. Power substitutions
//! `s = t a^4` remove the `s^(α−1)` endpoint singularity for `α ≥ 1/2`.
#![allow(dead_code)]

use rand::Rng;

/// Weibull hazards `h_g(s) = α_g c_g s^(α_g − 1)` with all effects folded
/// into the scales `c_g`.
#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub alpha: [f64; 3],
    pub scale: [f64; 3],
    pub markov: bool,
}

impl Params {
    pub fn h(&self, g: usize, s: f64) -> f64 {
        self.alpha[g] * self.scale[g] * s.powf(self.alpha[g] - 1.0)
    }

    pub fn cum(&self, g: usize, s: f64) -> f64 {
        self.scale[g] * s.powf(self.alpha[g])
    }

    fn first(&self, g: usize, s: f64) -> f64 {
        self.h(g, s) * (-self.cum(0, s) - self.cum(1, s)).exp()
    }

    /// Post-readmission survival from `u` to `s`.
    fn stay(&self, u: f64, s: f64) -> f64 {
        if self.markov {
            (-(self.cum(2, s) - self.cum(2, u))).exp()
        } else {
            (-self.cum(2, s - u)).exp()
        }
    }
}

/// Random parameters: shapes in `[0.5, 2]`, cumulative hazards at `t` log-uniform
/// in `[0.02, 3]`.
pub fn random_params(rng: &mut impl Rng, t: f64, markov: bool) -> Params {
    let alpha = [0; 3].map(|_| rng.random_range(0.5..2.0));
    let scale = [0, 1, 2].map(|g| {
        let h: f64 = rng.random_range(0.02f64.ln()..3.0f64.ln()).exp();
        h / t.powf(alpha[g])
    });
    Params { alpha, scale, markov }
}

/// Trapezoid rule for `∫_0^t f(s) ds` after `s = t a^4`, with `n` intervals.
pub fn integrate_0_t(t: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..=n {
        let a = i as f64 / n as f64;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let a3 = a * a * a;
        if a3 > 0.0 {
            sum += w * f(t * a3 * a) * 4.0 * t * a3;
        }
    }
    sum / n as f64
}

/// `P(readmitted by t)`.
pub fn cif_readmission(p: &Params, t: f64, n: usize) -> f64 {
    integrate_0_t(t, n, |s| p.first(0, s))
}

/// `P(died before readmission, by t)`.
pub fn death_first(p: &Params, t: f64, n: usize) -> f64 {
    integrate_0_t(t, n, |s| p.first(1, s))
}

/// `P(died by t)` from a direct `n × n` trapezoid over the wedge
/// `0 < u < s < t` (readmission at `u`, death at `s`) plus the death-first
/// term on `n1` intervals. Uses `u = t a^4`, `s = u + (t − u) b^4`.
pub fn cdf_death(p: &Params, t: f64, n: usize, n1: usize) -> f64 {
    let b: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let tw = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let a3 = p.alpha[2];
    // Semi-Markov inner integrand separates into powers of b.
    let pb1: Vec<f64> = b.iter().map(|b| b.powf(4.0 * a3 - 1.0)).collect();
    let pb2: Vec<f64> = b.iter().map(|b| b.powf(4.0 * a3)).collect();
    let mut wedge = 0.0;
    for (i, a) in b.iter().enumerate().skip(1) {
        let u = t * a.powi(4);
        let outer = p.first(0, u) * 4.0 * t * a.powi(3);
        let rem = t - u;
        let mut inner = 0.0;
        if p.markov {
            for (k, bk) in b.iter().enumerate().skip(1) {
                let b4 = bk.powi(4);
                let s = u + rem * b4;
                inner += tw(k) * p.h(2, s) * p.stay(u, s) * 4.0 * rem * b4 / bk;
            }
        } else {
            let d = p.scale[2] * rem.powf(a3);
            for k in 1..=n {
                inner += tw(k) * 4.0 * a3 * d * pb1[k] * (-d * pb2[k]).exp();
            }
        }
        wedge += tw(i) * outer * inner / n as f64;
    }
    death_first(p, t, n1) + wedge / n as f64
}

/// `P(died by t)` via the closed-form inner integral
/// `∫_u^t h3 e^(−ΔH3) ds = 1 − e^(−ΔH3(u, t))`.
pub fn cdf_death_1d(p: &Params, t: f64, n: usize) -> f64 {
    integrate_0_t(t, n, |s| p.first(1, s) + p.first(0, s) * (1.0 - p.stay(s, t)))
}

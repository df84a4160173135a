//! Test corpus for the certificate calculus: products `a(x) b(y)` composed
//! with `y = c(w)`, whose derivatives are known exactly.

use torus_core::gevrey::{compose_cert, GevreyCertificate, GevreyError, PowerSeries};
use torus_core::math;
use torus_core::model::FnDerivatives;

/// One-variable building blocks with closed-form derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum Basic {
    /// `sin(a t)`.
    Sin(f64),
    /// `cos(a t)`.
    Cos(f64),
    /// `exp(a t)`.
    Exp(f64),
    /// `sum c_i t^i`.
    Poly(Vec<f64>),
}

impl Basic {
    pub fn deriv(&self, k: usize, t: f64) -> f64 {
        match self {
            Basic::Sin(a) => math::powi(*a, k as i32) * math::sin(a * t + k as f64 * core::f64::consts::FRAC_PI_2),
            Basic::Cos(a) => math::powi(*a, k as i32) * math::cos(a * t + k as f64 * core::f64::consts::FRAC_PI_2),
            Basic::Exp(a) => math::powi(*a, k as i32) * math::exp(a * t),
            Basic::Poly(c) => c
                .iter()
                .enumerate()
                .skip(k)
                .map(|(i, ci)| ci * math::factorial(i) / math::factorial(i - k) * math::powi(t, (i - k) as i32))
                .sum(),
        }
    }
}

/// `F(x, w) = a(x) b(c(w))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub a: Basic,
    pub b: Basic,
    pub c: Basic,
}

pub fn corpus() -> Vec<Composite> {
    use Basic::*;
    let cubic = Poly(vec![0.0, 0.3, 0.0, -0.1]);
    vec![
        Composite { a: Sin(1.0), b: Exp(0.5), c: cubic.clone() },
        Composite { a: Cos(1.0), b: Sin(1.0), c: Sin(0.5) },
        Composite { a: Exp(0.3), b: Cos(1.0), c: Poly(vec![0.1, 0.4]) },
        Composite { a: Poly(vec![1.0, 1.0, 0.2]), b: Poly(vec![0.0, 1.0, 0.0, -0.5]), c: cubic.clone() },
        Composite { a: Sin(2.0), b: Exp(-1.0), c: Cos(1.0) },
        Composite { a: Cos(0.5), b: Poly(vec![1.0, 0.0, 1.0]), c: Exp(0.2) },
        Composite { a: Exp(1.0), b: Sin(0.5), c: Poly(vec![0.0, 0.5, 0.25]) },
        Composite { a: Poly(vec![0.5, -1.0]), b: Cos(2.0), c: Sin(1.0) },
        Composite { a: Sin(0.7), b: Sin(0.7), c: Sin(0.7) },
        Composite { a: Cos(1.5), b: Exp(0.8), c: Poly(vec![0.2, 0.0, -0.3]) },
    ]
}

/// Result of certifying one composite.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeReport {
    pub outer: GevreyCertificate,
    pub inner: GevreyCertificate,
    pub composed: GevreyCertificate,
    pub checked: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

const FIT_ORDER: usize = 8;

/// Fit certificates of `f(x, y) = a(x) b(y)` and `c(w)` on sample grids,
/// compose them and compare the bound with exact derivatives of `F` up to
/// total order `max_order` at probe points.
pub fn certify(f: &Composite, max_order: usize, tol: f64) -> Result<CompositeReport, GevreyError> {
    let xs: Vec<f64> = (0..=10).map(|i| -1.0 + 0.2 * i as f64).collect();
    let ws: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
    let probes_x = [-0.9, -0.3, 0.4, 1.0];
    let probes_w = [-0.8, 0.0, 0.5, 1.0];
    let ys: Vec<f64> = ws.iter().chain(&probes_w).map(|w| f.c.deriv(0, *w)).collect();
    let (ylo, yhi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(*y), b.max(*y)));
    let outer_fn = FnDerivatives { n_x: 1, n_w: 1, f: |al: &[usize], be: &[usize], x: &[f64], y: &[f64]| f.a.deriv(al[0], x[0]) * f.b.deriv(be[0], y[0]) };
    let inner_fn = FnDerivatives { n_x: 0, n_w: 1, f: |_: &[usize], be: &[usize], _: &[f64], w: &[f64]| f.c.deriv(be[0], w[0]) };
    let b_fn = FnDerivatives { n_x: 0, n_w: 1, f: |_: &[usize], be: &[usize], _: &[f64], y: &[f64]| f.b.deriv(be[0], y[0]) };

    // the fit grid contains the images of the probes so that the check tests the composition rule only
    let mut fs = Vec::new();
    for x in xs.iter().chain(&probes_x) {
        for j in 0..=10 {
            fs.push((vec![*x], vec![ylo + (yhi - ylo) * j as f64 / 10.0]));
        }
        for y in &ys {
            fs.push((vec![*x], vec![*y]));
        }
    }
    let gs: Vec<_> = ws.iter().chain(&probes_w).map(|w| (Vec::new(), vec![*w])).collect();
    let outer = GevreyCertificate::fit_amplitude(&outer_fn, &fs, 1.0, 1.0, 1.0, 2.0, FIT_ORDER);
    let inner = GevreyCertificate::fit_amplitude(&inner_fn, &gs, 1.0, 1.0, 1.0, 2.0, FIT_ORDER);
    let composed = compose_cert(&outer, &inner, 1)?;

    let mut rep = CompositeReport { outer, inner, composed, checked: 0, violations: 0, worst_ratio: 0.0 };
    for w in probes_w {
        // d_w^k b(c(w)) from the composed Taylor series in dw
        let ct = PowerSeries::taylor_of(&inner_fn, &[], &[w], max_order);
        let bt = PowerSeries::taylor_of(&b_fn, &[], &[f.c.deriv(0, w)], max_order);
        let mut dy = PowerSeries::zeros(1, max_order);
        for k in 1..=max_order {
            let p = dy.position(&[k]).expect("order within degree");
            dy.coef[p] = ct.get(&[k]);
        }
        let bc = bt.compose(&[dy]);
        for x in probes_x {
            for e in math::multi_indices(2, max_order) {
                let d = math::abs(f.a.deriv(e[0], x) * bc.derivative_at_zero(&[e[1]]));
                let bound = composed.bound(&e[..1], &e[1..]);
                let ratio = d / bound;
                rep.checked += 1;
                rep.worst_ratio = rep.worst_ratio.max(ratio);
                if ratio > 1.0 + tol {
                    rep.violations += 1;
                }
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(b: &Basic, k: usize, t: f64) -> f64 {
        let h = 1e-4;
        (b.deriv(k - 1, t + h) - b.deriv(k - 1, t - h)) / (2.0 * h)
    }

    #[test]
    fn basic_derivatives_are_consistent() {
        for b in [Basic::Sin(0.7), Basic::Cos(1.5), Basic::Exp(-0.8), Basic::Poly(vec![0.2, 0.0, -0.3, 0.5])] {
            for k in 1..=4 {
                assert!((fd(&b, k, 0.3) - b.deriv(k, 0.3)).abs() < 1e-6 * (1.0 + b.deriv(k, 0.3).abs()));
            }
        }
        assert_eq!(Basic::Poly(vec![1.0, 2.0]).deriv(2, 5.0), 0.0);
    }

    #[test]
    fn composite_series_matches_chain_rule() {
        // d_w b(c(w)) = b'(c) c' and d_w^2 = b'' c'^2 + b' c''
        let f = &corpus()[0];
        let w = 0.5;
        let ct = PowerSeries::taylor_of(&FnDerivatives { n_x: 0, n_w: 1, f: |_: &[usize], be: &[usize], _: &[f64], w: &[f64]| f.c.deriv(be[0], w[0]) }, &[], &[w], 3);
        let y = f.c.deriv(0, w);
        let bt = PowerSeries::taylor_of(&FnDerivatives { n_x: 0, n_w: 1, f: |_: &[usize], be: &[usize], _: &[f64], y: &[f64]| f.b.deriv(be[0], y[0]) }, &[], &[y], 3);
        let mut dy = PowerSeries::zeros(1, 3);
        for k in 1..=3 {
            let p = dy.position(&[k]).unwrap();
            dy.coef[p] = ct.get(&[k]);
        }
        let bc = bt.compose(&[dy]);
        let (c1, c2) = (f.c.deriv(1, w), f.c.deriv(2, w));
        let d2 = f.b.deriv(2, y) * c1 * c1 + f.b.deriv(1, y) * c2;
        assert!((bc.derivative_at_zero(&[1]) - f.b.deriv(1, y) * c1).abs() < 1e-13);
        assert!((bc.derivative_at_zero(&[2]) - d2).abs() < 1e-13);
    }

    #[test]
    fn corpus_has_ten_members_and_no_violations() {
        let c = corpus();
        assert_eq!(c.len(), 10);
        for f in &c {
            let r = certify(f, 5, 1e-12).unwrap();
            assert_eq!(r.violations, 0, "{f:?}: worst {}", r.worst_ratio);
            assert_eq!(r.checked, 16 * 21);
        }
    }
}

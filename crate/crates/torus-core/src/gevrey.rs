//! Gevrey certificates and their calculus: composition constants, the
//! majorant series for inverse maps, and the near-identity fixed-point
//! inversion.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::model::Derivatives;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GevreyError {
    #[error("inner exponent {inner} exceeds the outer frequency exponent {outer}")]
    ExponentMismatch { inner: f64, outer: f64 },
    #[error("exponents must satisfy mu >= rho >= 1 (got rho = {rho}, mu = {mu})")]
    InvalidExponents { rho: f64, mu: f64 },
    #[error("near-identity hypothesis fails: |F| = {sup_f:e} vs bound {bound_f:e}, |DF| = {sup_df:e} vs 1/4")]
    ContractionViolated { sup_f: f64, bound_f: f64, sup_df: f64 },
    #[error("fixed-point iteration stalled after {0} iterations")]
    MaxIterations(usize),
    #[error("smallness eps A h = {0} exceeds 1/2")]
    SmallnessViolated(f64),
}

/// `|d_x^alpha d_w^beta f| <= eps A h1^|alpha| h2^|beta| alpha!^rho beta!^rho_p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GevreyCertificate {
    pub a: f64,
    pub h1: f64,
    pub h2: f64,
    pub rho: f64,
    pub rho_p: f64,
    pub eps: f64,
}

impl GevreyCertificate {
    pub fn bound(&self, alpha: &[usize], beta: &[usize]) -> f64 {
        let oa: usize = alpha.iter().sum();
        let ob: usize = beta.iter().sum();
        self.eps
            * self.a
            * math::powi(self.h1, oa as i32)
            * math::powi(self.h2, ob as i32)
            * math::powf(math::multi_factorial(alpha), self.rho)
            * math::powf(math::multi_factorial(beta), self.rho_p)
    }

    /// Smallest amplitude making the certificate hold on the samples, with
    /// all other fields fixed (`eps` set to one).
    pub fn fit_amplitude(
        f: &dyn Derivatives,
        samples: &[(Vec<f64>, Vec<f64>)],
        h1: f64,
        h2: f64,
        rho: f64,
        rho_p: f64,
        max_order: usize,
    ) -> Self {
        let mut c = GevreyCertificate { a: 1.0, h1, h2, rho, rho_p, eps: 1.0 };
        let (nx, nw) = f.dims();
        let mut amp: f64 = 0.0;
        for idx in math::multi_indices(nx + nw, max_order) {
            let (al, be) = idx.split_at(nx);
            let b = c.bound(al, be);
            for (x, w) in samples {
                amp = amp.max(math::abs(f.derivative(al, be, x, w)) / b);
            }
        }
        c.a = amp;
        c
    }
}

/// Outcome of checking a certificate against sampled derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest `|derivative| / bound` seen.
    pub worst_ratio: f64,
}

pub fn check_dominance(
    cert: &GevreyCertificate,
    f: &dyn Derivatives,
    samples: &[(Vec<f64>, Vec<f64>)],
    max_order: usize,
) -> DominanceReport {
    let (nx, nw) = f.dims();
    let mut rep = DominanceReport { checked: 0, violations: 0, worst_ratio: 0.0 };
    for idx in math::multi_indices(nx + nw, max_order) {
        let (al, be) = idx.split_at(nx);
        let b = cert.bound(al, be);
        for (x, w) in samples {
            let d = math::abs(f.derivative(al, be, x, w));
            let ratio = if b > 0.0 { d / b } else if d == 0.0 { 0.0 } else { f64::INFINITY };
            rep.checked += 1;
            rep.worst_ratio = rep.worst_ratio.max(ratio);
            if ratio > 1.0 + 1e-12 {
                rep.violations += 1;
            }
        }
    }
    rep
}

fn check_exponents(rho: f64, mu: f64) -> Result<(), GevreyError> {
    if !(mu >= rho && rho >= 1.0) {
        return Err(GevreyError::InvalidExponents { rho, mu });
    }
    Ok(())
}

/// Certificate for `F(x, w) = f(x, g(w))`.
///
/// `outer` certifies `f` with `h1 = B`, `h2 = C2`, `rho_p = mu`; `inner`
/// certifies `g` through `a = A1`, `h2 = C1`, `rho_p`. The result has
/// `h2 = C = 2^{n+mu} n^mu C1 max(1, A1 C2)` and keeps the amplitude of `f`.
pub fn compose_cert(outer: &GevreyCertificate, inner: &GevreyCertificate, n: usize) -> Result<GevreyCertificate, GevreyError> {
    let mu = outer.rho_p;
    check_exponents(outer.rho, mu)?;
    if inner.rho_p > mu {
        return Err(GevreyError::ExponentMismatch { inner: inner.rho_p, outer: mu });
    }
    let a1 = inner.eps * inner.a;
    let nf = n as f64;
    let c = math::powf(2.0, nf + mu) * math::powf(nf, mu) * inner.h2 * f64::max(1.0, a1 * outer.h2);
    Ok(GevreyCertificate { a: outer.a, h1: outer.h1, h2: c, rho: outer.rho, rho_p: mu, eps: outer.eps })
}

/// Certificate for `F(x, w) = f(g(x, w), w)`.
///
/// `inner` certifies `g` with `(B1, C1)`, `outer` certifies `f` with
/// `(B2, C2)`. Then `B = 2^{n+rho} (2n)^rho B1 max(1, A1 B2)` and
/// `C = C2 + 2^{n+rho} (2n)^rho C1 max(1, A1 B2)`.
pub fn compose_cert_joint(
    inner: &GevreyCertificate,
    outer: &GevreyCertificate,
    n: usize,
) -> Result<GevreyCertificate, GevreyError> {
    let rho = outer.rho;
    let mu = outer.rho_p;
    check_exponents(rho, mu)?;
    if inner.rho_p > mu {
        return Err(GevreyError::ExponentMismatch { inner: inner.rho_p, outer: mu });
    }
    if inner.rho > rho {
        return Err(GevreyError::ExponentMismatch { inner: inner.rho, outer: rho });
    }
    let a1 = inner.eps * inner.a;
    let nf = n as f64;
    let k = math::powf(2.0, nf + rho) * math::powf(2.0 * nf, rho) * f64::max(1.0, a1 * outer.h1);
    Ok(GevreyCertificate {
        a: outer.a,
        h1: k * inner.h1,
        h2: outer.h2 + k * inner.h2,
        rho,
        rho_p: mu,
        eps: outer.eps,
    })
}

/// Smallest `H >= 1` with, for `M_j = j!^rho` and `2 <= q <= p <= cap`,
/// `(M_q/q!)^{1/q - 1} <= H (M_p/p!)^{1/p - 1}` and
/// `(M_q/q!)^{1/q} <= H (M_p/p!)^{1/p}`.
pub fn a5_constant(rho: f64, cap: usize) -> f64 {
    // ln(M_j / j!) = (rho - 1) ln j!
    let lm = |j: usize| (rho - 1.0) * math::ln_factorial(j);
    let mut best: f64 = 0.0;
    for p in 2..=cap {
        for q in 2..=p {
            let (qf, pf) = (q as f64, p as f64);
            let r1 = lm(q) * (1.0 / qf - 1.0) - lm(p) * (1.0 / pf - 1.0);
            let r2 = lm(q) / qf - lm(p) / pf;
            best = best.max(r1).max(r2);
        }
    }
    math::exp(best).max(1.0)
}

/// Dense truncated power series in `d` variables, total degree `<= deg`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    pub d: usize,
    pub deg: usize,
    pub index: Vec<Vec<usize>>,
    pub coef: Vec<f64>,
}

impl PowerSeries {
    pub fn zeros(d: usize, deg: usize) -> Self {
        let index = math::multi_indices(d, deg);
        let len = index.len();
        PowerSeries { d, deg, index, coef: vec![0.0; len] }
    }

    pub fn position(&self, e: &[usize]) -> Option<usize> {
        self.index.iter().position(|x| x.as_slice() == e)
    }

    pub fn get(&self, e: &[usize]) -> f64 {
        self.position(e).map(|i| self.coef[i]).unwrap_or(0.0)
    }

    pub fn variable(d: usize, deg: usize, i: usize) -> Self {
        let mut s = Self::zeros(d, deg);
        let mut e = vec![0; d];
        e[i] = 1;
        if let Some(p) = s.position(&e) {
            s.coef[p] = 1.0;
        }
        s
    }

    pub fn one(d: usize, deg: usize) -> Self {
        let mut s = Self::zeros(d, deg);
        s.coef[0] = 1.0;
        s
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut s = self.clone();
        for (a, b) in s.coef.iter_mut().zip(&o.coef) {
            *a += b;
        }
        s
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut s = self.clone();
        for a in s.coef.iter_mut() {
            *a *= c;
        }
        s
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut s = Self::zeros(self.d, self.deg);
        let mut e = vec![0usize; self.d];
        for (i, ei) in self.index.iter().enumerate() {
            let a = self.coef[i];
            if a == 0.0 {
                continue;
            }
            let oi: usize = ei.iter().sum();
            for (j, ej) in o.index.iter().enumerate() {
                let b = o.coef[j];
                if b == 0.0 {
                    continue;
                }
                let oj: usize = ej.iter().sum();
                if oi + oj > self.deg {
                    continue;
                }
                for k in 0..self.d {
                    e[k] = ei[k] + ej[k];
                }
                let p = s.position(&e).expect("degree checked");
                s.coef[p] += a * b;
            }
        }
        s
    }

    /// Substitute series without constant term for the variables:
    /// `self(subs_1, ..., subs_d)`, all in the variables of `subs`.
    pub fn compose(&self, subs: &[PowerSeries]) -> PowerSeries {
        let d_out = subs[0].d;
        let deg = subs[0].deg;
        let mut pows: Vec<Vec<PowerSeries>> = Vec::with_capacity(self.d);
        for s in subs {
            let mut pw = vec![PowerSeries::one(d_out, deg)];
            for k in 1..=self.deg {
                let next = pw[k - 1].mul(s);
                pw.push(next);
            }
            pows.push(pw);
        }
        let mut out = PowerSeries::zeros(d_out, deg);
        for (i, e) in self.index.iter().enumerate() {
            let c = self.coef[i];
            if c == 0.0 {
                continue;
            }
            let mut term = PowerSeries::one(d_out, deg);
            for (v, k) in e.iter().enumerate() {
                if *k > 0 {
                    term = term.mul(&pows[v][*k]);
                }
            }
            out = out.add(&term.scale(c));
        }
        out
    }

    /// Taylor series at a point from a derivative oracle on `(x, w)`.
    pub fn taylor_of(f: &dyn Derivatives, x: &[f64], w: &[f64], deg: usize) -> Self {
        let (nx, nw) = f.dims();
        let mut s = Self::zeros(nx + nw, deg);
        for i in 0..s.index.len() {
            let e = s.index[i].clone();
            let (a, b) = e.split_at(nx);
            s.coef[i] = f.derivative(a, b, x, w) / math::multi_factorial(&e);
        }
        s
    }

    /// Derivative value `d^e f(0) = e! c_e`.
    pub fn derivative_at_zero(&self, e: &[usize]) -> f64 {
        self.get(e) * math::multi_factorial(e)
    }
}

/// Majorant coefficients for the inverse of a near-identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorantTable {
    pub n: usize,
    pub m: usize,
    /// Series in `(y_1..y_n, w_1..w_m)`; every component of `v` is equal.
    pub series: PowerSeries,
}

impl MajorantTable {
    /// `v^{p,alpha}` in derivative normalization.
    pub fn value(&self, p: &[usize], alpha: &[usize]) -> f64 {
        let mut e = p.to_vec();
        e.extend_from_slice(alpha);
        self.series.derivative_at_zero(&e)
    }
}

/// Formal solution of
/// `v = eps A sum_{|p|>=2, alpha} (M_|p|/p!)(N_|alpha|/alpha!) h^{|p|+|alpha|} (y+v)^p w^alpha`
/// with `M_j = j!^rho`, `N_j = j!^rho_p`, truncated at total order `max_order`.
pub fn majorant_solution(
    eps_a: f64,
    h: f64,
    n: usize,
    m: usize,
    rho: f64,
    rho_p: f64,
    max_order: usize,
) -> Result<MajorantTable, GevreyError> {
    if eps_a * h > 0.5 {
        return Err(GevreyError::SmallnessViolated(eps_a * h));
    }
    let d = n + m;
    let deg = max_order;
    // w-part: sum_alpha N_|alpha|/alpha! h^|alpha| w^alpha
    let mut wpart = PowerSeries::zeros(d, deg);
    for (i, e) in wpart.index.clone().iter().enumerate() {
        if e[..n].iter().any(|v| *v != 0) {
            continue;
        }
        let a = &e[n..];
        let o: usize = a.iter().sum();
        wpart.coef[i] = math::powf(math::factorial(o), rho_p) / math::multi_factorial(a) * math::powi(h, o as i32);
    }
    let pis = math::multi_indices(n, deg);
    let mut v = PowerSeries::zeros(d, deg);
    for _ in 0..=deg {
        let ys: Vec<PowerSeries> = (0..n).map(|i| PowerSeries::variable(d, deg, i).add(&v)).collect();
        // powers[i][k] = (y_i + v)^k
        let powers: Vec<Vec<PowerSeries>> = ys
            .iter()
            .map(|y| {
                let mut pw = vec![PowerSeries::one(d, deg)];
                for k in 1..=deg {
                    let next = pw[k - 1].mul(y);
                    pw.push(next);
                }
                pw
            })
            .collect();
        let mut acc = PowerSeries::zeros(d, deg);
        for p in &pis {
            let o: usize = p.iter().sum();
            if o < 2 {
                continue;
            }
            let c = math::powf(math::factorial(o), rho) / math::multi_factorial(p) * math::powi(h, o as i32);
            let mut term = PowerSeries::one(d, deg);
            for (i, k) in p.iter().enumerate() {
                if *k > 0 {
                    term = term.mul(&powers[i][*k]);
                }
            }
            acc = acc.add(&term.scale(c));
        }
        v = acc.mul(&wpart).scale(eps_a);
    }
    Ok(MajorantTable { n, m, series: v })
}

/// Sampling domain for [`invert_near_identity`]: points of `O_h`, the
/// width `h`, and `upsilon < 1/6`.
#[derive(Debug, Clone, PartialEq)]
pub struct NearIdentityDomain {
    pub samples: Vec<Vec<f64>>,
    pub h: f64,
    pub upsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solve `f(u) = w` for `f = id - F` by `u_{k+1} = F(u_k) + w`.
///
/// The hypotheses `|F| <= upsilon h` and `|DF| <= 1/4` are checked on the
/// domain samples first (the Jacobian by central differences).
pub fn invert_near_identity(
    big_f: &dyn Fn(&[f64]) -> Vec<f64>,
    domain: &NearIdentityDomain,
    w: &[f64],
    start: Option<&[f64]>,
) -> Result<Inversion, GevreyError> {
    let n = w.len();
    let mut sup_f: f64 = 0.0;
    let mut sup_df: f64 = 0.0;
    let step = 1e-6;
    for x in &domain.samples {
        sup_f = sup_f.max(math::norm_inf(&big_f(x)));
        // row-sum norm of the Jacobian
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let fp = big_f(&xp);
            let fm = big_f(&xm);
            for i in 0..n {
                jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| math::abs(jac[i * n + j])).sum();
            sup_df = sup_df.max(row);
        }
    }
    let bound_f = domain.upsilon * domain.h;
    if !(domain.upsilon < 1.0 / 6.0) || sup_f > bound_f || sup_df > 0.25 {
        return Err(GevreyError::ContractionViolated { sup_f, bound_f, sup_df });
    }
    let mut u: Vec<f64> = start.map(|s| s.to_vec()).unwrap_or_else(|| w.to_vec());
    let resid = |u: &[f64]| -> f64 {
        let fu = big_f(u);
        (0..n).map(|i| math::abs(u[i] - fu[i] - w[i])).fold(0.0, f64::max)
    };
    let mut r = resid(&u);
    let mut it = 0;
    while r > 1e-13 {
        if it >= 200 {
            return Err(GevreyError::MaxIterations(it));
        }
        let fu = big_f(&u);
        u = (0..n).map(|i| fu[i] + w[i]).collect();
        it += 1;
        let r_new = resid(&u);
        if r_new >= r && r_new > 1e-12 {
            return Err(GevreyError::MaxIterations(it));
        }
        r = r_new;
    }
    Ok(Inversion { point: u, iterations: it, residual: r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnDerivatives;
    use proptest::prelude::*;

    fn cert(a: f64, h1: f64, h2: f64, rho: f64, rho_p: f64) -> GevreyCertificate {
        GevreyCertificate { a, h1, h2, rho, rho_p, eps: 1.0 }
    }

    #[test]
    fn composition_constant_unit_case() {
        let f = cert(1.0, 1.0, 1.0, 1.0, 2.0);
        let g = cert(1.0, 0.0, 1.0, 1.0, 2.0);
        let c = compose_cert(&f, &g, 1).unwrap();
        assert_eq!(c.h2, 8.0);
        assert_eq!(c.a, 1.0);
    }

    #[test]
    fn composition_with_constant_inner_map() {
        let f = cert(3.0, 1.0, 5.0, 1.0, 2.0);
        let g = cert(0.0, 0.0, 1.5, 1.0, 2.0);
        let c = compose_cert(&f, &g, 2).unwrap();
        assert_eq!(c.h2, 16.0 * 4.0 * 1.5);
    }

    #[test]
    fn joint_composition_unit_case() {
        let g = cert(1.0, 1.0, 1.0, 1.0, 1.0);
        let f = cert(1.0, 1.0, 1.0, 1.0, 1.0);
        let c = compose_cert_joint(&g, &f, 1).unwrap();
        assert_eq!(c.h1, 8.0);
        assert_eq!(c.h2, 1.0 + 8.0);
        let g0 = cert(0.0, 2.0, 1.0, 1.0, 1.0);
        assert_eq!(compose_cert_joint(&g0, &f, 1).unwrap().h1, 16.0);
    }

    #[test]
    fn exponent_mismatch_is_rejected() {
        let f = cert(1.0, 1.0, 1.0, 1.0, 2.0);
        let g = cert(1.0, 0.0, 1.0, 1.0, 3.0);
        assert!(matches!(compose_cert(&f, &g, 1), Err(GevreyError::ExponentMismatch { .. })));
        let bad = cert(1.0, 1.0, 1.0, 2.0, 1.5);
        assert!(matches!(compose_cert(&bad, &g, 1), Err(GevreyError::InvalidExponents { .. })));
    }

    #[test]
    fn a5_constant_is_one_for_analytic_sequence_and_grows_with_rho() {
        assert_eq!(a5_constant(1.0, 10), 1.0);
        let h2 = a5_constant(2.0, 10);
        let h3 = a5_constant(3.0, 10);
        assert!(h2 >= 1.0 && h3 >= h2);
        // direct check of both inequalities at every admissible pair
        let lm = |j: usize| math::ln_factorial(j);
        for p in 2..=10usize {
            for q in 2..=p {
                let (qf, pf) = (q as f64, p as f64);
                assert!(lm(q) * (1.0 / qf - 1.0) <= math::ln(h2) + lm(p) * (1.0 / pf - 1.0) + 1e-12);
                assert!(lm(q) / qf <= math::ln(h2) + lm(p) / pf + 1e-12);
            }
        }
    }

    #[test]
    fn majorant_order_two_matches_hand_recursion() {
        let (ea, h, rho) = (0.1, 1.5, 2.0);
        let t = majorant_solution(ea, h, 1, 0, rho, 3.0, 6).unwrap();
        // v = eps A (2^rho / 2) h^2 y^2 + ...  =>  v^(2) = eps A 2^rho h^2
        assert!((t.value(&[2], &[]) - ea * 4.0 * h * h).abs() < 1e-14);
        assert_eq!(t.value(&[1], &[]), 0.0);
    }

    #[test]
    fn majorant_vanishes_for_zero_eps() {
        let t = majorant_solution(0.0, 1.0, 2, 1, 1.5, 2.0, 5).unwrap();
        assert!(t.series.coef.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn majorant_rejects_large_eps() {
        assert!(matches!(majorant_solution(0.6, 1.0, 1, 0, 1.0, 1.0, 4), Err(GevreyError::SmallnessViolated(_))));
    }

    #[test]
    fn majorant_dominates_quadratic_inverse() {
        // x - eps x^2 = y: u = y + eps u^2, so u^(p) = p! Catalan(p-1) eps^(p-1).
        // phi(z) = eps z^2 has phi^(2) = 2 eps = eps A M_2 h^2 with A = h = rho = 1.
        let eps = 0.2;
        let t = majorant_solution(eps, 1.0, 1, 0, 1.0, 1.0, 8).unwrap();
        let mut catalan = vec![1.0f64];
        for k in 1..8usize {
            let prev = catalan[k - 1];
            catalan.push(prev * 2.0 * (2 * k - 1) as f64 / (k + 1) as f64);
        }
        for p in 2..=8usize {
            let u = math::factorial(p) * catalan[p - 1] * math::powi(eps, p as i32 - 1);
            let v = t.value(&[p], &[]);
            assert!(v > 0.0);
            assert!(u <= v * (1.0 + 1e-12), "order {p}: {u} > {v}");
        }
    }

    #[test]
    fn majorant_entries_are_positive_with_parameters() {
        let t = majorant_solution(0.05, 1.0, 2, 1, 1.5, 2.0, 5).unwrap();
        for (i, e) in t.series.index.iter().enumerate() {
            let py: usize = e[..2].iter().sum();
            if py >= 2 {
                assert!(t.series.coef[i] > 0.0, "{e:?}");
            }
        }
    }

    #[test]
    fn inversion_of_zero_map_is_immediate() {
        let dom = NearIdentityDomain { samples: vec![vec![0.0], vec![1.0]], h: 1.0, upsilon: 0.1 };
        let inv = invert_near_identity(&|_: &[f64]| vec![0.0], &dom, &[0.7], None).unwrap();
        assert_eq!(inv.point, vec![0.7]);
        assert_eq!(inv.iterations, 0);
    }

    #[test]
    fn inversion_of_sine_perturbation() {
        let dom = NearIdentityDomain { samples: (0..21).map(|i| vec![i as f64 * 0.1]).collect(), h: 0.7, upsilon: 0.15 };
        let big_f = |u: &[f64]| vec![-0.1 * math::sin(u[0])];
        let inv = invert_near_identity(&big_f, &dom, &[1.0], None).unwrap();
        let u = inv.point[0];
        assert!((u + 0.1 * math::sin(u) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn inversion_rejects_large_perturbation() {
        let dom = NearIdentityDomain { samples: (0..21).map(|i| vec![i as f64 * 0.1]).collect(), h: 3.5, upsilon: 0.15 };
        let big_f = |u: &[f64]| vec![-0.5 * math::sin(u[0])];
        assert!(matches!(invert_near_identity(&big_f, &dom, &[1.0], None), Err(GevreyError::ContractionViolated { .. })));
    }

    #[test]
    fn fitted_certificate_dominates_its_samples() {
        let f = FnDerivatives {
            n_x: 1,
            n_w: 1,
            f: |a: &[usize], b: &[usize], x: &[f64], w: &[f64]| {
                // sin(x) e^{w/2}
                let sx = match a[0] % 4 {
                    0 => math::sin(x[0]),
                    1 => math::cos(x[0]),
                    2 => -math::sin(x[0]),
                    _ => -math::cos(x[0]),
                };
                sx * math::powi(0.5, b[0] as i32) * math::exp(0.5 * w[0])
            },
        };
        let samples: Vec<_> = (0..10).map(|i| (vec![i as f64 * 0.6], vec![-1.0 + 0.2 * i as f64])).collect();
        let c = GevreyCertificate::fit_amplitude(&f, &samples, 1.0, 1.0, 1.0, 2.0, 6);
        let rep = check_dominance(&c, &f, &samples, 6);
        assert_eq!(rep.violations, 0);
        assert!((rep.worst_ratio - 1.0).abs() < 1e-12);
    }

    // f(x, y) = 1 + x y - 0.5 y^3 + 0.2 x^2 y, g(w) = 0.3 w - 0.1 w^3: both
    // degree three, composed as f(x, g(w)).
    #[test]
    fn composition_certificate_dominates_polynomial_pair() {
        let f = FnDerivatives {
            n_x: 1,
            n_w: 1,
            f: |a: &[usize], b: &[usize], x: &[f64], y: &[f64]| {
                let p = crate::model::Polynomial {
                    n: 2,
                    terms: vec![(vec![0, 0], 1.0), (vec![1, 1], 1.0), (vec![0, 3], -0.5), (vec![2, 1], 0.2)],
                };
                p.derivative(&[a[0], b[0]], &[x[0], y[0]])
            },
        };
        let g = FnDerivatives {
            n_x: 0,
            n_w: 1,
            f: |_: &[usize], b: &[usize], _: &[f64], w: &[f64]| {
                let p = crate::model::Polynomial { n: 1, terms: vec![(vec![1], 0.3), (vec![3], -0.1)] };
                p.derivative(b, w)
            },
        };
        let wgrid: Vec<f64> = (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect();
        let ys: Vec<f64> = wgrid.iter().map(|w| 0.3 * w - 0.1 * w * w * w).collect();
        let (ylo, yhi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(*y), b.max(*y)));
        let mut fs = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                fs.push((vec![-1.0 + 0.2 * i as f64], vec![ylo + (yhi - ylo) * j as f64 / 10.0]));
            }
        }
        let gs: Vec<_> = wgrid.iter().map(|w| (Vec::new(), vec![*w])).collect();
        let fc = GevreyCertificate::fit_amplitude(&f, &fs, 1.0, 1.0, 1.0, 2.0, 8);
        let gc = GevreyCertificate::fit_amplitude(&g, &gs, 1.0, 1.0, 1.0, 2.0, 8);
        let c = compose_cert(&fc, &gc, 1).unwrap();
        let mut violations = 0;
        for x in [-0.9, -0.3, 0.4, 1.0] {
            for w in [-0.8, 0.0, 0.5, 1.0] {
                let fy = PowerSeries::taylor_of(&f, &[x], &[0.3 * w - 0.1 * w * w * w], 5);
                let gt = PowerSeries::taylor_of(&g, &[], &[w], 5);
                // variables (dx, dw); dy = g(w + dw) - g(w)
                let dx = PowerSeries::variable(2, 5, 0);
                let mut dy = PowerSeries::zeros(2, 5);
                for k in 1..=5usize {
                    let p = dy.position(&[0, k]).unwrap();
                    dy.coef[p] = gt.get(&[k]);
                }
                let big = fy.compose(&[dx, dy]);
                for e in math::multi_indices(2, 5) {
                    let d = math::abs(big.derivative_at_zero(&e));
                    if d > c.bound(&e[..1], &e[1..]) * (1.0 + 1e-12) {
                        violations += 1;
                    }
                }
            }
        }
        assert_eq!(violations, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inversion_round_trip(a in -0.1f64..0.1, b in -0.1f64..0.1, w0 in -1.0f64..1.0, w1 in -1.0f64..1.0) {
            let big_f = move |u: &[f64]| vec![a * math::sin(u[1]), b * math::cos(u[0] + u[1])];
            let samples: Vec<Vec<f64>> = (0..25).map(|i| vec![-2.0 + (i % 5) as f64, -2.0 + (i / 5) as f64]).collect();
            let dom = NearIdentityDomain { samples, h: 1.0, upsilon: 0.15 };
            let inv = invert_near_identity(&big_f, &dom, &[w0, w1], None).unwrap();
            let u = &inv.point;
            let fu = big_f(u);
            prop_assert!((u[0] - fu[0] - w0).abs() <= 1e-12);
            prop_assert!((u[1] - fu[1] - w1).abs() <= 1e-12);
        }
    }
}

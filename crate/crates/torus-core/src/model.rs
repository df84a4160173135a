//! Integrable part, perturbation, and the frequency-parameterized family
//! `H(theta, z0 + I) = e(omega) + <omega, I> + P(theta, I; omega)` with
//! `grad H0(z0) = omega`.

use alloc::vec;
use alloc::vec::Vec;

use crate::fourier::{order, FourierTaylor, Mono, C64};
use crate::math::{self, LibmComplex, Mat};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("Newton solve for grad H0 = {omega:?} did not converge")]
    NoConvergence { omega: Vec<f64> },
    #[error("radius {radius} exceeds distance {distance} from the Legendre point to the domain boundary")]
    RadiusTooLarge { radius: f64, distance: f64 },
    #[error("Hessian determinant {det:e} below the nondegeneracy floor at {point:?}")]
    Degenerate { det: f64, point: Vec<f64> },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Real polynomial in `n` variables as a list of `(exponents, coefficient)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    pub n: usize,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl Polynomial {
    pub fn value(&self, z: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(z).map(|(p, x)| math::powi(*x, *p as i32)).product::<f64>())
            .sum()
    }

    /// Mixed partial derivative `d^beta p (z)`.
    pub fn derivative(&self, beta: &[usize], z: &[f64]) -> f64 {
        let mut s = 0.0;
        for (e, c) in &self.terms {
            let mut t = *c;
            for i in 0..self.n {
                let p = e[i] as usize;
                let b = beta[i];
                if b > p {
                    t = 0.0;
                    break;
                }
                let falling: f64 = ((p - b + 1)..=p).map(|v| v as f64).product();
                t *= falling * math::powi(z[i], (p - b) as i32);
            }
            s += t;
        }
        s
    }

    /// `d^beta p (z)` at a complex point.
    pub fn derivative_c(&self, beta: &[usize], z: &[C64]) -> C64 {
        let mut s = C64::new(0.0, 0.0);
        for (e, c) in &self.terms {
            let mut t = C64::new(*c, 0.0);
            for i in 0..self.n {
                let p = e[i] as usize;
                let b = beta[i];
                if b > p {
                    t = C64::new(0.0, 0.0);
                    break;
                }
                let falling: f64 = ((p - b + 1)..=p).map(|v| v as f64).product();
                t *= z[i].powu((p - b) as u32) * falling;
            }
            s += t;
        }
        s
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let mut b = vec![0; self.n];
                b[i] = 1;
                self.derivative(&b, z)
            })
            .collect()
    }

    pub fn hessian(&self, z: &[f64]) -> Mat {
        let mut h = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let mut b = vec![0; self.n];
                b[i] += 1;
                b[j] += 1;
                let v = self.derivative(&b, z);
                h.set(i, j, v);
                h.set(j, i, v);
            }
        }
        h
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.iter().map(|(e, _)| e.iter().sum::<u32>()).max().unwrap_or(0)
    }
}

/// `H0(I)` on the box `D0 = [lo, hi]` with declared Gevrey data.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrableHamiltonian {
    pub poly: Polynomial,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub rho: f64,
    pub l0: f64,
    pub a0: f64,
}

impl IntegrableHamiltonian {
    pub fn n(&self) -> usize {
        self.poly.n
    }

    /// `|I|^2 / 2`.
    pub fn quadratic(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let n = lo.len();
        let terms = (0..n)
            .map(|i| {
                let mut e = vec![0; n];
                e[i] = 2;
                (e, 0.5)
            })
            .collect();
        IntegrableHamiltonian { poly: Polynomial { n, terms }, lo, hi, rho: 1.0, l0: 1.0, a0: 1.0 }
    }

    /// `|I|^2 / 2 + (beta / 4) sum I_i^4`.
    pub fn anharmonic(beta: f64, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let mut h = Self::quadratic(lo, hi);
        let n = h.n();
        for i in 0..n {
            let mut e = vec![0; n];
            e[i] = 4;
            h.poly.terms.push((e, 0.25 * beta));
        }
        let reach = h.lo.iter().chain(&h.hi).fold(0.0f64, |m, v| m.max(math::abs(*v)));
        h.a0 = 1.0 + 3.0 * math::abs(beta) * reach * reach;
        h
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        self.poly.value(z)
    }
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        self.poly.gradient(z)
    }
    pub fn hessian(&self, z: &[f64]) -> Mat {
        self.poly.hessian(z)
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (a, b))| *x >= *a && *x <= *b)
    }

    pub fn boundary_distance(&self, z: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for i in 0..z.len() {
            d = d.min(z[i] - self.lo[i]).min(self.hi[i] - z[i]);
        }
        d
    }

    /// Check `|det Hess H0| >= floor` at the given points.
    pub fn check_nondegenerate(&self, points: &[Vec<f64>], floor: f64) -> Result<(), ModelError> {
        for p in points {
            let det = self.hessian(p).det();
            if !(math::abs(det) >= floor) {
                return Err(ModelError::Degenerate { det, point: p.clone() });
            }
        }
        Ok(())
    }
}

/// Solve `grad H0(z) = omega` by damped Newton from the center of `D0`.
pub fn legendre_point(h0: &IntegrableHamiltonian, omega: &[f64]) -> Result<Vec<f64>, ModelError> {
    let n = h0.n();
    if omega.len() != n {
        return Err(ModelError::DimensionMismatch(n, omega.len()));
    }
    let fail = || ModelError::NoConvergence { omega: omega.to_vec() };
    let mut z: Vec<f64> = h0.lo.iter().zip(&h0.hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let resid = |z: &[f64]| -> Vec<f64> { h0.gradient(z).iter().zip(omega).map(|(g, w)| g - w).collect() };
    let scale = 1.0 + math::norm_inf(omega);
    let mut f = resid(&z);
    for _ in 0..100 {
        let fnorm = math::norm_inf(&f);
        if fnorm <= 1e-15 * scale {
            break;
        }
        let step = h0.hessian(&z).solve(&f).ok_or_else(fail)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(a, d)| a - t * d).collect();
            let ft = resid(&trial);
            if math::norm_inf(&ft) < fnorm {
                z = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !h0.contains(&z) || math::norm_inf(&f) > 1e-12 {
        return Err(fail());
    }
    Ok(z)
}

/// `grad H0(z) = omega` for complex `omega`, by Newton from the real
/// Legendre point of `Re omega`.
pub fn legendre_point_c(h0: &IntegrableHamiltonian, omega: &[C64]) -> Result<Vec<C64>, ModelError> {
    let n = h0.n();
    if omega.len() != n {
        return Err(ModelError::DimensionMismatch(n, omega.len()));
    }
    let re: Vec<f64> = omega.iter().map(|w| w.re).collect();
    let fail = || ModelError::NoConvergence { omega: re.clone() };
    let mut z: Vec<C64> = legendre_point(h0, &re)?.iter().map(|v| C64::new(*v, 0.0)).collect();
    let scale = 1.0 + omega.iter().fold(0.0f64, |m, w| m.max(w.cabs()));
    for _ in 0..60 {
        let mut f = vec![C64::new(0.0, 0.0); n];
        let mut jac = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            let mut b = vec![0; n];
            b[i] = 1;
            f[i] = h0.poly.derivative_c(&b, &z) - omega[i];
            for j in 0..n {
                let mut bb = b.clone();
                bb[j] += 1;
                jac[i * n + j] = h0.poly.derivative_c(&bb, &z);
            }
        }
        let fnorm = f.iter().fold(0.0f64, |m, v| m.max(v.cabs()));
        if fnorm <= 1e-15 * scale {
            return Ok(z);
        }
        let d = math::solve_complex(&jac, n, &f).ok_or_else(fail)?;
        for (zi, di) in z.iter_mut().zip(&d) {
            *zi -= di;
        }
    }
    Err(fail())
}

/// Degree-two jet `e + <omega, I> + 1/2 <Hess I, I> + P_{H1}` of
/// `H(theta, z0 + I)` at a complex frequency; returns the jet and `z0`.
pub fn member_jet_c(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omega: &[C64],
) -> Result<(FourierTaylor, Vec<C64>), ModelError> {
    let n = h0.n();
    if h1.n != n {
        return Err(ModelError::DimensionMismatch(n, h1.n));
    }
    let z0 = legendre_point_c(h0, omega)?;
    let mut jet = FourierTaylor::zeros(n, 0, 2);
    let zero = vec![0; n];
    jet.set(&zero, Mono::ONE, h0.poly.derivative_c(&vec![0; n], &z0));
    for i in 0..n {
        jet.set(&zero, Mono::linear(i), omega[i]);
        for j in i..n {
            let mut b = vec![0; n];
            b[i] += 1;
            b[j] += 1;
            let v = h0.poly.derivative_c(&b, &z0);
            jet.set(&zero, Mono::quadratic(i, j), if i == j { v * 0.5 } else { v });
        }
    }
    let jet = jet.add(&h1.expand_at_c(&z0)).expect("same dimension");
    Ok((jet, z0))
}

/// One perturbation term `I^m (a cos<k,theta> + b sin<k,theta>)` in the
/// original action variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMode {
    pub k: Vec<i32>,
    pub mono: Mono,
    pub cos: f64,
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub n: usize,
    pub modes: Vec<PerturbationMode>,
}

impl Perturbation {
    pub fn zero(n: usize) -> Self {
        Perturbation { n, modes: Vec::new() }
    }

    /// Sum of `a cos<k,theta> + b sin<k,theta>` over `(k, a, b)`.
    pub fn trig(n: usize, modes: &[(Vec<i32>, f64, f64)]) -> Self {
        Perturbation {
            n,
            modes: modes.iter().map(|(k, a, b)| PerturbationMode { k: k.clone(), mono: Mono::ONE, cos: *a, sin: *b }).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for m in out.modes.iter_mut() {
            m.cos *= s;
            m.sin *= s;
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.modes.iter().all(|m| m.cos == 0.0 && m.sin == 0.0)
    }

    pub fn max_order(&self) -> usize {
        self.modes.iter().map(|m| order(&m.k)).max().unwrap_or(0)
    }

    pub fn max_degree(&self) -> usize {
        self.modes.iter().map(|m| m.mono.deg as usize).max().unwrap_or(0)
    }

    /// `H1(theta, z0 + I)` as a Fourier–Taylor series in `(theta, I)`.
    pub fn expand_at(&self, z0: &[f64]) -> FourierTaylor {
        let mut f = FourierTaylor::zeros(self.n, self.max_order(), self.max_degree());
        for m in &self.modes {
            for (mono, c) in shift_monomial(m.mono, z0) {
                f.add_real_mode(&m.k, mono, c * m.cos, c * m.sin);
            }
        }
        f
    }

    /// [`Perturbation::expand_at`] at a complex base point.
    pub fn expand_at_c(&self, z0: &[C64]) -> FourierTaylor {
        let mut f = FourierTaylor::zeros(self.n, self.max_order(), self.max_degree());
        for m in &self.modes {
            let neg: Vec<i32> = m.k.iter().map(|v| -v).collect();
            let zero_mode = m.k.iter().all(|v| *v == 0);
            for (mono, c) in shift_monomial_c(m.mono, z0) {
                if zero_mode {
                    f.add_to(&m.k, mono, c * m.cos);
                } else {
                    f.add_to(&m.k, mono, c * C64::new(0.5 * m.cos, -0.5 * m.sin));
                    f.add_to(&neg, mono, c * C64::new(0.5 * m.cos, 0.5 * m.sin));
                }
            }
        }
        f
    }

    pub fn value(&self, theta: &[f64], z: &[f64]) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let ph: f64 = m.k.iter().zip(theta).map(|(k, t)| *k as f64 * t).sum();
                m.mono.eval(z) * (m.cos * math::cos(ph) + m.sin * math::sin(ph))
            })
            .sum()
    }

    pub fn grad_theta(&self, theta: &[f64], z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for m in &self.modes {
            let ph: f64 = m.k.iter().zip(theta).map(|(k, t)| *k as f64 * t).sum();
            let d = m.mono.eval(z) * (-m.cos * math::sin(ph) + m.sin * math::cos(ph));
            for i in 0..self.n {
                g[i] += m.k[i] as f64 * d;
            }
        }
        g
    }

    pub fn grad_action(&self, theta: &[f64], z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for m in &self.modes {
            let ph: f64 = m.k.iter().zip(theta).map(|(k, t)| *k as f64 * t).sum();
            let trig = m.cos * math::cos(ph) + m.sin * math::sin(ph);
            for i in 0..self.n {
                if let Some((f, rest)) = m.mono.diff(i) {
                    g[i] += f * rest.eval(z) * trig;
                }
            }
        }
        g
    }
}

/// Expand `(z0 + I)^m` into monomials of `I`.
pub fn shift_monomial(m: Mono, z0: &[f64]) -> Vec<(Mono, f64)> {
    match m.deg {
        0 => vec![(Mono::ONE, 1.0)],
        1 => {
            let i = m.vars[0] as usize;
            vec![(Mono::ONE, z0[i]), (Mono::linear(i), 1.0)]
        }
        _ => {
            let i = m.vars[0] as usize;
            let j = m.vars[1] as usize;
            vec![(Mono::ONE, z0[i] * z0[j]), (Mono::linear(j), z0[i]), (Mono::linear(i), z0[j]), (Mono::quadratic(i, j), 1.0)]
        }
    }
}

fn shift_monomial_c(m: Mono, z0: &[C64]) -> Vec<(Mono, C64)> {
    let one = C64::new(1.0, 0.0);
    match m.deg {
        0 => vec![(Mono::ONE, one)],
        1 => {
            let i = m.vars[0] as usize;
            vec![(Mono::ONE, z0[i]), (Mono::linear(i), one)]
        }
        _ => {
            let i = m.vars[0] as usize;
            let j = m.vars[1] as usize;
            vec![(Mono::ONE, z0[i] * z0[j]), (Mono::linear(j), z0[i]), (Mono::linear(i), z0[j]), (Mono::quadratic(i, j), one)]
        }
    }
}

/// The full Hamiltonian `H0(z) + H1(theta, z)` in original coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub h0: IntegrableHamiltonian,
    pub h1: Perturbation,
}

impl Hamiltonian {
    pub fn n(&self) -> usize {
        self.h0.n()
    }
    pub fn value(&self, theta: &[f64], z: &[f64]) -> f64 {
        self.h0.value(z) + self.h1.value(theta, z)
    }
    /// `(dtheta/dt, dz/dt) = (dH/dz, -dH/dtheta)`.
    pub fn vector_field(&self, theta: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g0 = self.h0.gradient(z);
        let g1 = self.h1.grad_action(theta, z);
        let t1 = self.h1.grad_theta(theta, z);
        (g0.iter().zip(&g1).map(|(a, b)| a + b).collect(), t1.iter().map(|v| -v).collect())
    }
}

/// Expansion at one grid frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMember {
    pub omega: Vec<f64>,
    pub z0: Vec<f64>,
    pub e: f64,
    /// `Hess H0(z0)`.
    pub hess: Mat,
    /// `P_{H1}(theta, I; omega)`.
    pub p_h1: FourierTaylor,
    /// Quadratic Taylor part of `P_{H0}` plus `P_{H1}`.
    pub p: FourierTaylor,
}

impl FamilyMember {
    /// Exact `P_{H0}(I) = int_0^1 (1-t) <Hess H0(z0 + tI) I, I> dt` by 16-node
    /// Gauss–Legendre quadrature.
    pub fn p_h0(&self, h0: &IntegrableHamiltonian, action: &[f64]) -> f64 {
        let (t, w) = math::gauss_legendre_on(16, 0.0, 1.0);
        let mut s = 0.0;
        for (ti, wi) in t.iter().zip(&w) {
            let z: Vec<f64> = self.z0.iter().zip(action).map(|(a, b)| a + ti * b).collect();
            let hv = h0.hessian(&z).mul_vec(action);
            s += wi * (1.0 - ti) * math::dot(&hv, action);
        }
        s
    }

    /// `P(theta, I; omega)` with the exact `P_{H0}`.
    pub fn p_value(&self, h0: &IntegrableHamiltonian, theta: &[f64], action: &[f64]) -> f64 {
        self.p_h0(h0, action) + self.p_h1.eval_real(theta, action)
    }

    /// Whole shifted Hamiltonian `e + <omega, I> + P` as a degree-2 series,
    /// with `P_{H0}` replaced by its quadratic Taylor part.
    pub fn hamiltonian_jet(&self) -> FourierTaylor {
        let n = self.omega.len();
        let mut lin = FourierTaylor::zeros(n, 0, 1);
        let zero = vec![0; n];
        lin.set(&zero, Mono::ONE, C64::new(self.e, 0.0));
        for i in 0..n {
            lin.set(&zero, Mono::linear(i), C64::new(self.omega[i], 0.0));
        }
        lin.add(&self.p).expect("same dimension")
    }
}

/// Quadratic form `1/2 <A I, I>` as a series.
pub fn quadratic_series(a: &Mat) -> FourierTaylor {
    let n = a.n;
    let mut f = FourierTaylor::zeros(n, 0, 2);
    let zero = vec![0; n];
    for i in 0..n {
        for j in i..n {
            let c = if i == j { 0.5 * a.get(i, i) } else { a.get(i, j) };
            if c != 0.0 {
                f.add_to(&zero, Mono::quadratic(i, j), C64::new(c, 0.0));
            }
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFamily {
    pub members: Vec<FamilyMember>,
    /// Action-ball radius `R`.
    pub radius: f64,
    /// `A0 R^2 + sup |H1|` on the ball: the structural bound with the
    /// perturbation norm replaced by its coefficient-sum bound.
    pub norm_bound: f64,
}

/// Expand `H0 + H1` around the Legendre point of every grid frequency.
pub fn expand_family(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omegas: &[Vec<f64>],
    radius: f64,
) -> Result<ParamFamily, ModelError> {
    let mut members = Vec::with_capacity(omegas.len());
    let mut h1_sup: f64 = 0.0;
    for w in omegas {
        let m = expand_member(h0, h1, w, radius)?;
        h1_sup = h1_sup.max(m.p_h1.strip_sup_bound(0.0, radius).value);
        members.push(m);
    }
    Ok(ParamFamily { members, radius, norm_bound: h0.a0 * radius * radius + h1_sup })
}

pub fn expand_member(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omega: &[f64],
    radius: f64,
) -> Result<FamilyMember, ModelError> {
    if h1.n != h0.n() {
        return Err(ModelError::DimensionMismatch(h0.n(), h1.n));
    }
    let z0 = legendre_point(h0, omega)?;
    let distance = h0.boundary_distance(&z0);
    if distance < radius {
        return Err(ModelError::RadiusTooLarge { radius, distance });
    }
    let hess = h0.hessian(&z0);
    let p_h1 = h1.expand_at(&z0);
    let p = quadratic_series(&hess).add(&p_h1).expect("same dimension");
    Ok(FamilyMember { omega: omega.to_vec(), e: h0.value(&z0), z0, hess, p_h1, p })
}

/// Pointwise derivative access for the Gevrey probe: `x` are the angle-type
/// variables, `w` the action or frequency variables.
pub trait Derivatives {
    fn dims(&self) -> (usize, usize);
    fn derivative(&self, alpha: &[usize], beta: &[usize], x: &[f64], w: &[f64]) -> f64;
}

/// Exact derivatives of a real Fourier–Taylor series in `(theta, I)`.
pub struct SeriesDerivatives<'a>(pub &'a FourierTaylor);

impl Derivatives for SeriesDerivatives<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.0.n(), self.0.n())
    }
    fn derivative(&self, alpha: &[usize], beta: &[usize], x: &[f64], w: &[f64]) -> f64 {
        let mut f = self.0.clone();
        for (i, a) in alpha.iter().enumerate() {
            for _ in 0..*a {
                f = f.d_theta(i);
            }
        }
        for (i, b) in beta.iter().enumerate() {
            for _ in 0..*b {
                f = f.d_action(i);
            }
        }
        f.eval_real(x, w)
    }
}

/// Derivatives given by a closure `(alpha, beta, x, w) -> value`.
pub struct FnDerivatives<F> {
    pub n_x: usize,
    pub n_w: usize,
    pub f: F,
}

impl<F: Fn(&[usize], &[usize], &[f64], &[f64]) -> f64> Derivatives for FnDerivatives<F> {
    fn dims(&self) -> (usize, usize) {
        (self.n_x, self.n_w)
    }
    fn derivative(&self, alpha: &[usize], beta: &[usize], x: &[f64], w: &[f64]) -> f64 {
        (self.f)(alpha, beta, x, w)
    }
}

/// Sampled value of the Gevrey norm; a lower bound for the true supremum.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEstimate {
    pub value: f64,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
    pub lower_bound: bool,
}

/// `max |d^alpha d^beta f| L1^{-|alpha|} L2^{-|beta|} (alpha! beta!)^{-rho}`
/// over `|alpha| + |beta| <= max_order` and the sample points.
pub fn gevrey_norm_probe(
    f: &dyn Derivatives,
    samples: &[(Vec<f64>, Vec<f64>)],
    l1: f64,
    l2: f64,
    rho: f64,
    max_order: usize,
) -> ProbeEstimate {
    let (nx, nw) = f.dims();
    let mut best = ProbeEstimate { value: 0.0, alpha: vec![0; nx], beta: vec![0; nw], lower_bound: true };
    for idx in math::multi_indices(nx + nw, max_order) {
        let (a, b) = idx.split_at(nx);
        let oa: usize = a.iter().sum();
        let ob: usize = b.iter().sum();
        let fact = math::multi_factorial(a) * math::multi_factorial(b);
        let w = math::powi(l1, -(oa as i32)) * math::powi(l2, -(ob as i32)) / math::powf(fact, rho);
        for (x, y) in samples {
            let v = math::abs(f.derivative(a, b, x, y)) * w;
            if v > best.value {
                best = ProbeEstimate { value: v, alpha: a.to_vec(), beta: b.to_vec(), lower_bound: true };
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn box2() -> (Vec<f64>, Vec<f64>) {
        (vec![-3.0, -3.0], vec![3.0, 3.0])
    }

    #[test]
    fn legendre_point_of_quadratic_is_identity() {
        let (lo, hi) = box2();
        let h = IntegrableHamiltonian::quadratic(lo, hi);
        let z = legendre_point(&h, &[0.7, 1.3]).unwrap();
        assert!((z[0] - 0.7).abs() < 1e-15 && (z[1] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn legendre_point_of_coupled_quadratic_solves_linear_system() {
        let (lo, hi) = box2();
        let poly = Polynomial { n: 2, terms: vec![(vec![2, 0], 0.5), (vec![0, 2], 0.5), (vec![1, 1], 0.1)] };
        let h = IntegrableHamiltonian { poly, lo, hi, rho: 1.0, l0: 1.0, a0: 1.0 };
        let z = legendre_point(&h, &[1.0, 1.0]).unwrap();
        // [[1, .1], [.1, 1]] z = (1, 1)  =>  z_i = 1 / 1.1 by Cramer's rule
        let expect = 1.0 / 1.1;
        assert!((z[0] - expect).abs() < 1e-12 && (z[1] - expect).abs() < 1e-12);
        let g = h.gradient(&z);
        assert!((g[0] - 1.0).abs() <= 1e-12 && (g[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn legendre_point_outside_range_fails() {
        let h = IntegrableHamiltonian::quadratic(vec![0.0, 0.0], vec![2.0, 2.0]);
        assert!(matches!(legendre_point(&h, &[5.0, 1.0]), Err(ModelError::NoConvergence { .. })));
    }

    #[test]
    fn anharmonic_legendre_point_round_trip() {
        let h = IntegrableHamiltonian::anharmonic(0.3, vec![-2.0, -2.0], vec![2.0, 2.0]);
        let z = legendre_point(&h, &[1.0, 0.4]).unwrap();
        let g = h.gradient(&z);
        assert!((g[0] - 1.0).abs() <= 1e-12 && (g[1] - 0.4).abs() <= 1e-12);
    }

    #[test]
    fn integrable_quadratic_family_is_exact() {
        let (lo, hi) = box2();
        let h = IntegrableHamiltonian::quadratic(lo, hi);
        let fam = expand_family(&h, &Perturbation::zero(2), &[vec![0.7, 1.3]], 0.1).unwrap();
        let m = &fam.members[0];
        assert!((m.e - 0.5 * (0.49 + 1.69)).abs() < 1e-15);
        assert!(m.p_h1.is_zero());
        assert_eq!(m.p.get(&[0, 0], Mono::quadratic(0, 0)), C64::new(0.5, 0.0));
        assert_eq!(m.p.get(&[0, 0], Mono::quadratic(0, 1)), C64::new(0.0, 0.0));
        assert!(fam.norm_bound <= h.a0 * 0.01 + 1e-15);
    }

    #[test]
    fn theta_only_perturbation_does_not_depend_on_shift() {
        let (lo, hi) = box2();
        let h = IntegrableHamiltonian::quadratic(lo, hi);
        let h1 = Perturbation::trig(2, &[(vec![1, 0], 1e-3, 0.0)]);
        let a = expand_member(&h, &h1, &[0.2, 0.3], 0.1).unwrap();
        let b = expand_member(&h, &h1, &[1.2, -0.8], 0.1).unwrap();
        assert_eq!(a.p_h1, b.p_h1);
        assert!((a.p_h1.get(&[1, 0], Mono::ONE).re - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn radius_too_large_is_rejected() {
        let h = IntegrableHamiltonian::quadratic(vec![0.0, 0.0], vec![2.0, 2.0]);
        let e = expand_member(&h, &Perturbation::zero(2), &[1.95, 1.0], 0.1).unwrap_err();
        assert!(matches!(e, ModelError::RadiusTooLarge { .. }));
    }

    #[test]
    fn cubic_remainder_matches_direct_difference() {
        let poly = Polynomial { n: 2, terms: vec![(vec![2, 0], 0.5), (vec![0, 2], 0.5), (vec![3, 0], 0.2)] };
        let h = IntegrableHamiltonian { poly, lo: vec![-2.0, -2.0], hi: vec![2.0, 2.0], rho: 1.0, l0: 1.0, a0: 1.0 };
        let m = expand_member(&h, &Perturbation::zero(2), &[1.0, 0.5], 0.2).unwrap();
        for i in 0..20 {
            let t = i as f64 / 20.0 * 2.0 * PI;
            let act = [0.2 * math::cos(t), 0.15 * math::sin(3.0 * t)];
            let z: Vec<f64> = m.z0.iter().zip(&act).map(|(a, b)| a + b).collect();
            let direct = h.value(&z) - m.e - math::dot(&m.omega, &act);
            assert!((m.p_h0(&h, &act) - direct).abs() <= 1e-14, "{i}");
        }
    }

    #[test]
    fn family_identity_holds_pointwise() {
        let h = IntegrableHamiltonian::anharmonic(0.2, vec![-2.0, -2.0], vec![2.0, 2.0]);
        let h1 = Hamiltonian {
            h0: h.clone(),
            h1: Perturbation {
                n: 2,
                modes: vec![
                    PerturbationMode { k: vec![1, 0], mono: Mono::ONE, cos: 1e-2, sin: 0.0 },
                    PerturbationMode { k: vec![1, 1], mono: Mono::linear(1), cos: 0.0, sin: 2e-3 },
                    PerturbationMode { k: vec![0, 2], mono: Mono::quadratic(0, 1), cos: 1e-3, sin: 1e-3 },
                ],
            },
        };
        let m = expand_member(&h, &h1.h1, &[0.9, -0.4], 0.2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let th = [i as f64 * 0.8, j as f64 * 0.7];
                let act = [0.1 * math::sin(i as f64), -0.12 * math::cos(j as f64)];
                let z: Vec<f64> = m.z0.iter().zip(&act).map(|(a, b)| a + b).collect();
                let lhs = h1.value(&th, &z);
                let rhs = m.e + math::dot(&m.omega, &act) + m.p_value(&h, &th, &act);
                assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn probe_of_cosine_is_one_and_zero_is_zero() {
        let mut f = FourierTaylor::zeros(1, 1, 0);
        f.add_real_mode(&[1], Mono::ONE, 1.0, 0.0);
        let samples: Vec<_> = (0..16).map(|i| (vec![2.0 * PI * i as f64 / 16.0], vec![0.0])).collect();
        let p = gevrey_norm_probe(&SeriesDerivatives(&f), &samples, 1.0, 1.0, 1.0, 6);
        assert!((p.value - 1.0).abs() < 1e-15);
        let z = FourierTaylor::zeros(1, 1, 0);
        assert_eq!(gevrey_norm_probe(&SeriesDerivatives(&z), &samples, 1.0, 1.0, 1.0, 6).value, 0.0);
    }

    #[test]
    fn probe_of_gevrey_two_model_function() {
        let mut f = FourierTaylor::zeros(1, 20, 0);
        for k in 1..=20 {
            f.add_real_mode(&[k], Mono::ONE, math::exp(-math::sqrt(k as f64)), 0.0);
        }
        let samples: Vec<_> = (0..64).map(|i| (vec![2.0 * PI * i as f64 / 64.0], vec![0.0])).collect();
        let p = gevrey_norm_probe(&SeriesDerivatives(&f), &samples, 1.0, 1.0, 2.0, 8);
        // Independent evaluation: sum of e^{-sqrt k} k^a / a!^2 at theta = 0
        // for even orders; the probe must hit at least this at a = 2.
        let a2: f64 = (1..=20).map(|k| math::exp(-math::sqrt(k as f64)) * (k * k) as f64).sum::<f64>() / 4.0;
        assert!(p.value >= a2 * (1.0 - 1e-12));
        assert!((p.value - 22.500036027439933).abs() <= 1e-9, "{}", p.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn legendre_round_trip(a in -1.5f64..1.5, b in -1.5f64..1.5, beta in 0.0f64..0.3) {
            let h = IntegrableHamiltonian::anharmonic(beta, vec![-2.0, -2.0], vec![2.0, 2.0]);
            let w = h.gradient(&[a, b]);
            let z = legendre_point(&h, &w).unwrap();
            prop_assert!((z[0] - a).abs() <= 1e-11 && (z[1] - b).abs() <= 1e-11);
        }

        #[test]
        fn quadratic_family_respects_norm_structure(w0 in -1.0f64..1.0, w1 in -1.0f64..1.0, r in 0.01f64..0.5) {
            let h = IntegrableHamiltonian::quadratic(vec![-2.0, -2.0], vec![2.0, 2.0]);
            let fam = expand_family(&h, &Perturbation::zero(2), &[vec![w0, w1]], r).unwrap();
            prop_assert!(fam.members[0].p_h1.is_zero());
            // sup over the Euclidean ball of |I|^2 / 2
            prop_assert!(0.5 * r * r <= fam.norm_bound);
        }
    }
}

//! Truncated Fourier–Taylor series on `T^n x {|I| < r}`.
//!
//! A series is `sum_{|k|_1 <= K} sum_{|m| <= d} c[k, m] e^{i<k,theta>} I^m`
//! with `d <= 2`. Coefficients are stored densely over the box `[-K, K]^n`;
//! entries outside the `l1` ball are kept at zero. Products are plain
//! coefficient convolutions.

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex;

use crate::math::{self, LibmComplex};

pub type C64 = Complex<f64>;

/// Default cap on the torus cutoff of stored series.
pub const MAX_K_REP: usize = 64;
/// Coefficients smaller than this in magnitude are replaced by zero.
pub const FLUSH: f64 = 1e-300;
/// Default threshold under which a divisor `<k, omega>` counts as resonant.
pub const RESONANCE_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FourierError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("resonant mode {k:?}: |<k,omega>| = {divisor:e}")]
    ResonantMode { k: Vec<i32>, divisor: f64 },
}

/// `|k|_1`.
pub fn order(k: &[i32]) -> usize {
    k.iter().map(|v| v.unsigned_abs() as usize).sum()
}

/// Number of monomials of degree at most `deg` in `n` variables (`deg <= 2`).
pub fn mono_count(n: usize, deg: usize) -> usize {
    match deg {
        0 => 1,
        1 => 1 + n,
        _ => 1 + n + n * (n + 1) / 2,
    }
}

/// A monomial `I_i I_j` of degree at most two, stored as sorted variable
/// indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mono {
    pub deg: u8,
    pub vars: [u8; 2],
}

impl Mono {
    pub const ONE: Mono = Mono { deg: 0, vars: [0, 0] };

    pub fn linear(i: usize) -> Mono {
        Mono { deg: 1, vars: [i as u8, 0] }
    }

    pub fn quadratic(i: usize, j: usize) -> Mono {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        Mono { deg: 2, vars: [a as u8, b as u8] }
    }

    pub fn index(&self, n: usize) -> usize {
        match self.deg {
            0 => 0,
            1 => 1 + self.vars[0] as usize,
            _ => {
                let i = self.vars[0] as usize;
                let j = self.vars[1] as usize;
                let before: usize = (0..i).map(|a| n - a).sum();
                1 + n + before + (j - i)
            }
        }
    }

    pub fn from_index(n: usize, idx: usize) -> Mono {
        if idx == 0 {
            return Mono::ONE;
        }
        if idx <= n {
            return Mono::linear(idx - 1);
        }
        let mut r = idx - 1 - n;
        for i in 0..n {
            let row = n - i;
            if r < row {
                return Mono::quadratic(i, i + r);
            }
            r -= row;
        }
        panic!("monomial index {idx} out of range for n = {n}");
    }

    pub fn mul(&self, other: &Mono) -> Option<Mono> {
        match (self.deg, other.deg) {
            (0, _) => Some(*other),
            (_, 0) => Some(*self),
            (1, 1) => Some(Mono::quadratic(self.vars[0] as usize, other.vars[0] as usize)),
            _ => None,
        }
    }

    /// Exponent of variable `i`.
    pub fn exponent(&self, i: usize) -> u32 {
        let mut e = 0;
        for v in &self.vars[..self.deg as usize] {
            if *v as usize == i {
                e += 1;
            }
        }
        e
    }

    /// `d/dI_i` of the monomial: `(factor, resulting monomial)`.
    pub fn diff(&self, i: usize) -> Option<(f64, Mono)> {
        let e = self.exponent(i);
        if e == 0 {
            return None;
        }
        let rest = match self.deg {
            1 => Mono::ONE,
            _ => {
                let other = if self.vars[0] as usize == i { self.vars[1] } else { self.vars[0] };
                Mono::linear(other as usize)
            }
        };
        Some((e as f64, rest))
    }

    pub fn eval<T>(&self, action: &[T]) -> T
    where
        T: Copy + core::ops::Mul<Output = T> + From<f64>,
    {
        let mut v = T::from(1.0);
        for x in &self.vars[..self.deg as usize] {
            v = v * action[*x as usize];
        }
        v
    }
}

/// Polynomial in `I` returned by [`FourierTaylor::average`].
#[derive(Clone, Debug, PartialEq)]
pub struct IPolynomial {
    pub n: usize,
    pub deg: usize,
    pub coef: Vec<C64>,
}

impl IPolynomial {
    pub fn eval(&self, action: &[f64]) -> C64 {
        let ac: Vec<C64> = action.iter().map(|v| C64::new(*v, 0.0)).collect();
        self.coef
            .iter()
            .enumerate()
            .map(|(m, c)| c * Mono::from_index(self.n, m).eval(&ac))
            .sum()
    }
    pub fn constant(&self) -> C64 {
        self.coef[0]
    }
    /// Coefficient of `I_i`.
    pub fn linear(&self, i: usize) -> C64 {
        if self.deg == 0 {
            C64::new(0.0, 0.0)
        } else {
            self.coef[1 + i]
        }
    }
}

/// Upper bound for the sup of a series over the complex domain
/// `|Im theta| < s`, `|I| < r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripNorm {
    pub s: f64,
    pub r: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierTaylor {
    n: usize,
    k_rep: usize,
    deg: usize,
    coef: Vec<C64>,
}

#[inline]
fn flush(c: C64) -> C64 {
    if math::abs(c.re) < FLUSH && math::abs(c.im) < FLUSH {
        C64::new(0.0, 0.0)
    } else {
        c
    }
}

impl FourierTaylor {
    pub fn zeros(n: usize, k_rep: usize, deg: usize) -> Self {
        assert!(n >= 1, "dimension must be positive");
        assert!(deg <= 2, "I-degree is at most two");
        let side = 2 * k_rep + 1;
        let len = side.pow(n as u32) * mono_count(n, deg);
        FourierTaylor { n, k_rep, deg, coef: vec![C64::new(0.0, 0.0); len] }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        let mut f = Self::zeros(n, 0, 0);
        f.coef[0] = C64::new(value, 0.0);
        f
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k_rep(&self) -> usize {
        self.k_rep
    }
    pub fn deg(&self) -> usize {
        self.deg
    }
    pub fn n_mono(&self) -> usize {
        mono_count(self.n, self.deg)
    }
    fn side(&self) -> usize {
        2 * self.k_rep + 1
    }
    fn box_len(&self) -> usize {
        self.side().pow(self.n as u32)
    }

    /// Box slot of `k`, or `None` if `|k|_1 > K_rep`.
    pub fn slot(&self, k: &[i32]) -> Option<usize> {
        if k.len() != self.n || order(k) > self.k_rep {
            return None;
        }
        let side = self.side();
        let kr = self.k_rep as i32;
        let mut idx = 0usize;
        for i in (0..self.n).rev() {
            idx = idx * side + (k[i] + kr) as usize;
        }
        Some(idx)
    }

    pub fn mode_of_slot(&self, mut slot: usize) -> Vec<i32> {
        let side = self.side();
        let kr = self.k_rep as i32;
        let mut k = vec![0; self.n];
        for ki in k.iter_mut() {
            *ki = (slot % side) as i32 - kr;
            slot /= side;
        }
        k
    }

    pub fn get(&self, k: &[i32], m: Mono) -> C64 {
        if m.deg as usize > self.deg {
            return C64::new(0.0, 0.0);
        }
        match self.slot(k) {
            Some(s) => self.coef[s * self.n_mono() + m.index(self.n)],
            None => C64::new(0.0, 0.0),
        }
    }

    /// Overwrite one coefficient. The caller is responsible for reality.
    pub fn set(&mut self, k: &[i32], m: Mono, value: C64) {
        let s = self.slot(k).expect("mode outside cutoff");
        let nm = self.n_mono();
        self.coef[s * nm + m.index(self.n)] = flush(value);
    }

    pub fn add_to(&mut self, k: &[i32], m: Mono, value: C64) {
        let s = self.slot(k).expect("mode outside cutoff");
        let nm = self.n_mono();
        let c = &mut self.coef[s * nm + m.index(self.n)];
        *c = flush(*c + value);
    }

    /// Add `I^m (a cos<k,theta> + b sin<k,theta>)`, keeping the series real.
    pub fn add_real_mode(&mut self, k: &[i32], m: Mono, a: f64, b: f64) {
        if k.iter().all(|v| *v == 0) {
            self.add_to(k, m, C64::new(a, 0.0));
            return;
        }
        let neg: Vec<i32> = k.iter().map(|v| -v).collect();
        self.add_to(k, m, C64::new(0.5 * a, -0.5 * b));
        self.add_to(&neg, m, C64::new(0.5 * a, 0.5 * b));
    }

    /// Iterate over nonzero coefficients as `(mode, monomial, value)`.
    pub fn terms(&self) -> Vec<(Vec<i32>, Mono, C64)> {
        let nm = self.n_mono();
        let mut out = Vec::new();
        for slot in 0..self.box_len() {
            for mi in 0..nm {
                let c = self.coef[slot * nm + mi];
                if c.re != 0.0 || c.im != 0.0 {
                    out.push((self.mode_of_slot(slot), Mono::from_index(self.n, mi), c));
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.coef.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// Copy into a larger (or equal) cutoff and degree; modes beyond the new
    /// cutoff are dropped.
    pub fn reshape(&self, k_rep: usize, deg: usize) -> Self {
        let mut out = Self::zeros(self.n, k_rep, deg);
        let nm_in = self.n_mono();
        let nm_out = out.n_mono();
        for slot in 0..self.box_len() {
            let k = self.mode_of_slot(slot);
            let Some(os) = out.slot(&k) else { continue };
            for mi in 0..nm_in {
                let c = self.coef[slot * nm_in + mi];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let m = Mono::from_index(self.n, mi);
                if m.deg as usize > deg {
                    continue;
                }
                out.coef[os * nm_out + m.index(self.n)] = c;
            }
        }
        out
    }

    /// Drop modes with `|k|_1 > k`.
    pub fn truncate(&self, k: usize) -> Self {
        self.reshape(k.min(self.k_rep), self.deg)
    }

    /// Keep only monomials of degree `<= d`.
    pub fn clamp_degree(&self, d: usize) -> Self {
        self.reshape(self.k_rep, d.min(self.deg))
    }

    /// Part of the series of exact I-degree `d`.
    pub fn degree_part(&self, d: usize) -> Self {
        let mut out = self.clone();
        let nm = self.n_mono();
        for (i, c) in out.coef.iter_mut().enumerate() {
            if Mono::from_index(self.n, i % nm).deg as usize != d {
                *c = C64::new(0.0, 0.0);
            }
        }
        out
    }

    fn check_dim(&self, other: &Self) -> Result<(), FourierError> {
        if self.n != other.n {
            return Err(FourierError::DimensionMismatch(self.n, other.n));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, FourierError> {
        self.check_dim(other)?;
        let k = self.k_rep.max(other.k_rep);
        let d = self.deg.max(other.deg);
        let mut out = self.reshape(k, d);
        let b = other.reshape(k, d);
        for (x, y) in out.coef.iter_mut().zip(&b.coef) {
            *x = flush(*x + *y);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FourierError> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.scale_complex(C64::new(s, 0.0))
    }

    pub fn scale_complex(&self, s: C64) -> Self {
        let mut out = self.clone();
        for c in out.coef.iter_mut() {
            *c = flush(*c * s);
        }
        out
    }

    /// Product with the result cutoff `K_a + K_b` (capped at [`MAX_K_REP`])
    /// and I-degree clamped to two.
    pub fn multiply(&self, other: &Self) -> Result<Self, FourierError> {
        self.multiply_capped(other, MAX_K_REP)
    }

    /// Product keeping only modes with `|k|_1 <= min(K_a + K_b, k_cap)`.
    pub fn multiply_capped(&self, other: &Self, k_cap: usize) -> Result<Self, FourierError> {
        self.check_dim(other)?;
        let n = self.n;
        let k_out = (self.k_rep + other.k_rep).min(k_cap);
        let d_out = (self.deg + other.deg).min(2);
        let mut out = Self::zeros(n, k_out, d_out);
        let a = self.sparse();
        let b = other.sparse();
        if a.vals.is_empty() || b.vals.is_empty() {
            return Ok(out);
        }
        let nm_out = out.n_mono();
        let side = out.side() as i32;
        let ko = k_out as i32;
        let mut mono_tab = vec![None; a.monos_len * b.monos_len];
        for ma in 0..a.monos_len {
            for mb in 0..b.monos_len {
                let p = Mono::from_index(n, ma).mul(&Mono::from_index(n, mb));
                mono_tab[ma * b.monos_len + mb] = p.filter(|m| m.deg as usize <= d_out).map(|m| m.index(n));
            }
        }
        let mut ksum = vec![0i32; n];
        for ia in 0..a.vals.len() {
            let ka = &a.modes[ia * n..(ia + 1) * n];
            let ma = a.monos[ia];
            let ca = a.vals[ia];
            for ib in 0..b.vals.len() {
                let Some(mo) = mono_tab[ma * b.monos_len + b.monos[ib]] else { continue };
                let kb = &b.modes[ib * n..(ib + 1) * n];
                let mut ord = 0i32;
                for i in 0..n {
                    ksum[i] = ka[i] + kb[i];
                    ord += ksum[i].abs();
                }
                if ord > ko {
                    continue;
                }
                let mut slot = 0i32;
                for i in (0..n).rev() {
                    slot = slot * side + ksum[i] + ko;
                }
                out.coef[slot as usize * nm_out + mo] += ca * b.vals[ib];
            }
        }
        for c in out.coef.iter_mut() {
            *c = flush(*c);
        }
        Ok(out)
    }

    fn sparse(&self) -> Sparse {
        let nm = self.n_mono();
        let mut s = Sparse { modes: Vec::new(), monos: Vec::new(), vals: Vec::new(), monos_len: nm };
        for slot in 0..self.box_len() {
            let row = &self.coef[slot * nm..(slot + 1) * nm];
            if row.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                continue;
            }
            let k = self.mode_of_slot(slot);
            for (mi, c) in row.iter().enumerate() {
                if c.re != 0.0 || c.im != 0.0 {
                    s.modes.extend_from_slice(&k);
                    s.monos.push(mi);
                    s.vals.push(*c);
                }
            }
        }
        s
    }

    /// The `k = 0` mode as a polynomial in `I`.
    pub fn average(&self) -> IPolynomial {
        let nm = self.n_mono();
        let zero = vec![0i32; self.n];
        let s = self.slot(&zero).unwrap();
        IPolynomial { n: self.n, deg: self.deg, coef: self.coef[s * nm..(s + 1) * nm].to_vec() }
    }

    /// Series with the `k = 0` mode removed.
    pub fn without_average(&self) -> Self {
        let mut out = self.clone();
        let nm = self.n_mono();
        let s = self.slot(&vec![0; self.n]).unwrap();
        for c in &mut out.coef[s * nm..(s + 1) * nm] {
            *c = C64::new(0.0, 0.0);
        }
        out
    }

    /// Zero every coefficient with modulus below `tol`.
    pub fn prune(&self, tol: f64) -> Self {
        let mut out = self.clone();
        for c in out.coef.iter_mut() {
            if c.cabs() < tol {
                *c = C64::new(0.0, 0.0);
            }
        }
        out
    }

    /// Smallest cutoff holding every nonzero mode, as a compact copy.
    pub fn compact(&self) -> Self {
        let nm = self.n_mono();
        let mut kmax = 0;
        for slot in 0..self.box_len() {
            if self.coef[slot * nm..(slot + 1) * nm].iter().any(|c| c.re != 0.0 || c.im != 0.0) {
                kmax = kmax.max(order(&self.mode_of_slot(slot)));
            }
        }
        self.reshape(kmax, self.deg)
    }

    /// Substitute `I -> I + c`; the degree is unchanged.
    pub fn shift_action(&self, c: &[C64]) -> Self {
        let mut out = Self::zeros(self.n, self.k_rep, self.deg);
        let nm = self.n_mono();
        for slot in 0..self.box_len() {
            for mi in 0..nm {
                let v = self.coef[slot * nm + mi];
                if v.re == 0.0 && v.im == 0.0 {
                    continue;
                }
                let m = Mono::from_index(self.n, mi);
                let mut put = |mm: Mono, f: C64| {
                    out.coef[slot * nm + mm.index(self.n)] += v * f;
                };
                let one = C64::new(1.0, 0.0);
                match m.deg {
                    0 => put(Mono::ONE, one),
                    1 => {
                        let i = m.vars[0] as usize;
                        put(m, one);
                        put(Mono::ONE, c[i]);
                    }
                    _ => {
                        let (i, j) = (m.vars[0] as usize, m.vars[1] as usize);
                        put(m, one);
                        put(Mono::linear(i), c[j]);
                        put(Mono::linear(j), c[i]);
                        put(Mono::ONE, c[i] * c[j]);
                    }
                }
            }
        }
        for v in out.coef.iter_mut() {
            *v = flush(*v);
        }
        out
    }

    /// `d/d theta_i`.
    pub fn d_theta(&self, i: usize) -> Self {
        let mut out = self.clone();
        let nm = self.n_mono();
        for slot in 0..self.box_len() {
            let ki = self.mode_of_slot(slot)[i] as f64;
            for c in &mut out.coef[slot * nm..(slot + 1) * nm] {
                *c = flush(*c * C64::new(0.0, ki));
            }
        }
        out
    }

    /// `d/d I_i`; the degree drops by one.
    pub fn d_action(&self, i: usize) -> Self {
        let d_out = self.deg.saturating_sub(1);
        let mut out = Self::zeros(self.n, self.k_rep, d_out);
        if self.deg == 0 {
            return out;
        }
        let nm = self.n_mono();
        let nm_out = out.n_mono();
        for slot in 0..self.box_len() {
            for mi in 0..nm {
                let c = self.coef[slot * nm + mi];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                if let Some((f, m)) = Mono::from_index(self.n, mi).diff(i) {
                    out.coef[slot * nm_out + m.index(self.n)] += c * f;
                }
            }
        }
        out
    }

    /// `L_omega F = <omega, d_theta F>` for a possibly complex `omega`.
    pub fn lie_derivative(&self, omega: &[C64]) -> Self {
        let mut out = self.clone();
        let nm = self.n_mono();
        for slot in 0..self.box_len() {
            let k = self.mode_of_slot(slot);
            let kw: C64 = k.iter().zip(omega).map(|(ki, w)| w * (*ki as f64)).sum();
            let f = C64::new(0.0, 1.0) * kw;
            for c in &mut out.coef[slot * nm..(slot + 1) * nm] {
                *c = flush(*c * f);
            }
        }
        out
    }

    /// Poisson bracket `{a, b} = sum_i d_theta_i a d_I_i b - d_I_i a d_theta_i b`.
    pub fn poisson(&self, other: &Self, k_cap: usize) -> Result<Self, FourierError> {
        self.check_dim(other)?;
        let mut acc: Option<Self> = None;
        for i in 0..self.n {
            let t1 = self.d_theta(i).multiply_capped(&other.d_action(i), k_cap)?;
            let t2 = self.d_action(i).multiply_capped(&other.d_theta(i), k_cap)?;
            let term = t1.sub(&t2)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.unwrap().clamp_degree(2))
    }

    pub fn eval(&self, theta: &[f64], action: &[f64]) -> C64 {
        let ac: Vec<C64> = action.iter().map(|v| C64::new(*v, 0.0)).collect();
        self.eval_complex(theta, &ac)
    }

    pub fn eval_complex(&self, theta: &[f64], action: &[C64]) -> C64 {
        let nm = self.n_mono();
        let monos: Vec<C64> = (0..nm).map(|m| Mono::from_index(self.n, m).eval(action)).collect();
        let mut s = C64::new(0.0, 0.0);
        for slot in 0..self.box_len() {
            let row = &self.coef[slot * nm..(slot + 1) * nm];
            if row.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                continue;
            }
            let k = self.mode_of_slot(slot);
            let phase: f64 = k.iter().zip(theta).map(|(a, t)| *a as f64 * t).sum();
            let e = C64::new(math::cos(phase), math::sin(phase));
            let inner: C64 = row.iter().zip(&monos).map(|(c, m)| c * m).sum();
            s += e * inner;
        }
        s
    }

    /// Value at complex angles and actions.
    pub fn eval_cc(&self, theta: &[C64], action: &[C64]) -> C64 {
        let nm = self.n_mono();
        let monos: Vec<C64> = (0..nm).map(|m| Mono::from_index(self.n, m).eval(action)).collect();
        let i = C64::new(0.0, 1.0);
        let mut s = C64::new(0.0, 0.0);
        for slot in 0..self.box_len() {
            let row = &self.coef[slot * nm..(slot + 1) * nm];
            if row.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                continue;
            }
            let k = self.mode_of_slot(slot);
            let phase: C64 = k.iter().zip(theta).map(|(a, t)| t * (*a as f64)).sum();
            let inner: C64 = row.iter().zip(&monos).map(|(c, m)| c * m).sum();
            s += (i * phase).cexp() * inner;
        }
        s
    }

    /// Real part of the value; for a real series the imaginary part is
    /// roundoff.
    pub fn eval_real(&self, theta: &[f64], action: &[f64]) -> f64 {
        self.eval(theta, action).re
    }

    /// `sum |c[k,m]| e^{|k| s} r^{deg m}`.
    pub fn strip_sup_bound(&self, s: f64, r: f64) -> StripNorm {
        let nm = self.n_mono();
        let rp: Vec<f64> = (0..nm).map(|m| math::powi(r, Mono::from_index(self.n, m).deg as i32)).collect();
        let mut v = 0.0;
        for slot in 0..self.box_len() {
            let row = &self.coef[slot * nm..(slot + 1) * nm];
            if row.iter().all(|c| c.re == 0.0 && c.im == 0.0) {
                continue;
            }
            let w = math::exp(order(&self.mode_of_slot(slot)) as f64 * s);
            for (c, p) in row.iter().zip(&rp) {
                v += c.cabs() * w * p;
            }
        }
        StripNorm { s, r, value: v }
    }

    /// Largest coefficient modulus.
    pub fn max_coef(&self) -> f64 {
        self.coef.iter().fold(0.0, |m, c| m.max(c.cabs()))
    }

    /// `max |c[-k,m] - conj c[k,m]|`; zero for a real series.
    pub fn reality_defect(&self) -> f64 {
        let nm = self.n_mono();
        let mut d: f64 = 0.0;
        for slot in 0..self.box_len() {
            let k = self.mode_of_slot(slot);
            let neg: Vec<i32> = k.iter().map(|v| -v).collect();
            let Some(ns) = self.slot(&neg) else { continue };
            for mi in 0..nm {
                let a = self.coef[slot * nm + mi];
                let b = self.coef[ns * nm + mi];
                d = d.max((a - b.conj()).cabs());
            }
        }
        d
    }

    /// Rows `(k, monomial index, re, im)` of the nonzero coefficients in slot
    /// order.
    pub fn coefficient_rows(&self) -> Vec<(Vec<i32>, usize, f64, f64)> {
        self.terms()
            .into_iter()
            .map(|(k, m, c)| (k, m.index(self.n), c.re, c.im))
            .collect()
    }
}

struct Sparse {
    modes: Vec<i32>,
    monos: Vec<usize>,
    vals: Vec<C64>,
    monos_len: usize,
}

/// Solve `L_omega F = T_K(g - [g])` mode by mode.
///
/// Works for complex `omega` as well; the reality of the output follows the
/// reality of `g` when `omega` is real.
pub fn solve_homological(g: &FourierTaylor, omega: &[f64], k: usize) -> Result<FourierTaylor, FourierError> {
    let w: Vec<C64> = omega.iter().map(|v| C64::new(*v, 0.0)).collect();
    solve_homological_with(g, &w, k, RESONANCE_FLOOR)
}

pub fn solve_homological_with(
    g: &FourierTaylor,
    omega: &[C64],
    k: usize,
    floor: f64,
) -> Result<FourierTaylor, FourierError> {
    if omega.len() != g.n() {
        return Err(FourierError::DimensionMismatch(g.n(), omega.len()));
    }
    let mut out = g.truncate(k).without_average();
    let nm = out.n_mono();
    for slot in 0..out.box_len() {
        let row_nonzero = out.coef[slot * nm..(slot + 1) * nm].iter().any(|c| c.re != 0.0 || c.im != 0.0);
        if !row_nonzero {
            continue;
        }
        let kv = out.mode_of_slot(slot);
        let kw: C64 = kv.iter().zip(omega).map(|(ki, w)| w * (*ki as f64)).sum();
        if kw.cabs() < floor {
            return Err(FourierError::ResonantMode { k: kv, divisor: kw.cabs() });
        }
        let f = C64::new(0.0, 1.0) * kw;
        for c in &mut out.coef[slot * nm..(slot + 1) * nm] {
            *c = flush(*c / f);
        }
    }
    Ok(out)
}

/// Enumerate all `k` in `Z^n` with `0 < |k|_1 <= kmax` in a fixed order.
pub fn modes_in_ball(n: usize, kmax: usize) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    let side = 2 * kmax + 1;
    let total = side.pow(n as u32);
    for mut idx in 0..total {
        let mut k = vec![0i32; n];
        for ki in k.iter_mut() {
            *ki = (idx % side) as i32 - kmax as i32;
            idx /= side;
        }
        let o = order(&k);
        if o > 0 && o <= kmax {
            out.push(k);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;

    fn cos_mode(n: usize, k: &[i32], a: f64) -> FourierTaylor {
        let mut f = FourierTaylor::zeros(n, order(k), 0);
        f.add_real_mode(k, Mono::ONE, a, 0.0);
        f
    }

    #[test]
    fn cos_squared_is_half_plus_half_cos_double() {
        let c = cos_mode(1, &[1], 1.0);
        let p = c.multiply(&c).unwrap();
        assert!((p.get(&[0], Mono::ONE) - C64::new(0.5, 0.0)).cabs() < 1e-16);
        assert!((p.get(&[2], Mono::ONE) - C64::new(0.25, 0.0)).cabs() < 1e-16);
        assert!((p.get(&[-2], Mono::ONE) - C64::new(0.25, 0.0)).cabs() < 1e-16);
        assert_eq!(p.get(&[1], Mono::ONE), C64::new(0.0, 0.0));
    }

    #[test]
    fn product_with_zero_vanishes() {
        let c = cos_mode(2, &[1, -1], 2.0);
        let z = FourierTaylor::zeros(2, 3, 2);
        assert!(c.multiply(&z).unwrap().is_zero());
    }

    #[test]
    fn multiply_rejects_dimension_mismatch() {
        let a = FourierTaylor::zeros(1, 1, 0);
        let b = FourierTaylor::zeros(2, 1, 0);
        assert_eq!(a.multiply(&b), Err(FourierError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn square_of_mixed_series_matches_pointwise_values() {
        let mut f = FourierTaylor::zeros(2, 1, 0);
        f.add_real_mode(&[1, 0], Mono::ONE, 1.0, 0.0);
        f.add_real_mode(&[0, 1], Mono::ONE, 0.0, 1.0);
        let sq = f.multiply(&f).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                let t = [2.0 * PI * i as f64 / 32.0, 2.0 * PI * j as f64 / 32.0];
                let direct = (math::cos(t[0]) + math::sin(t[1])) * (math::cos(t[0]) + math::sin(t[1]));
                worst = worst.max((sq.eval_real(&t, &[]) - direct).abs());
            }
        }
        assert!(worst <= 1e-13, "{worst}");
    }

    #[test]
    fn average_extracts_constant() {
        let mut f = cos_mode(1, &[1], 1.0);
        assert_eq!(f.average().constant(), C64::new(0.0, 0.0));
        f.add_to(&[0], Mono::ONE, C64::new(3.0, 0.0));
        assert_eq!(f.average().constant(), C64::new(3.0, 0.0));
    }

    #[test]
    fn average_matches_trapezoid_quadrature() {
        let mut f = FourierTaylor::zeros(2, 3, 0);
        f.add_real_mode(&[0, 0], Mono::ONE, 0.7, 0.0);
        f.add_real_mode(&[1, 0], Mono::ONE, 0.3, -0.2);
        f.add_real_mode(&[1, -2], Mono::ONE, 0.1, 0.4);
        f.add_real_mode(&[0, 3], Mono::ONE, -0.5, 0.0);
        f.add_real_mode(&[2, 1], Mono::ONE, 0.2, 0.9);
        let m = 16;
        let mut q = 0.0;
        for i in 0..m {
            for j in 0..m {
                let t = [2.0 * PI * i as f64 / m as f64, 2.0 * PI * j as f64 / m as f64];
                q += f.eval_real(&t, &[]);
            }
        }
        q /= (m * m) as f64;
        assert!((f.average().constant().re - q).abs() <= 1e-12);
    }

    #[test]
    fn homological_solution_of_cos_is_sin() {
        let g = cos_mode(1, &[1], 1.0);
        let f = solve_homological(&g, &[1.0], 4).unwrap();
        let mut expected = FourierTaylor::zeros(1, 1, 0);
        expected.add_real_mode(&[1], Mono::ONE, 0.0, 1.0);
        assert!((f.get(&[1], Mono::ONE) - expected.get(&[1], Mono::ONE)).cabs() < 1e-16);
        assert!(solve_homological(&FourierTaylor::zeros(1, 2, 0), &[1.0], 2).unwrap().is_zero());
    }

    #[test]
    fn homological_solution_for_golden_frequency() {
        let gold = (5f64.sqrt() - 1.0) / 2.0;
        let omega = [1.0, gold];
        let g = cos_mode(2, &[1, -2], 1.0);
        let f = solve_homological(&g, &omega, 3).unwrap();
        let divisor = 2.0 - 5f64.sqrt();
        let mut expected = FourierTaylor::zeros(2, 3, 0);
        expected.add_real_mode(&[1, -2], Mono::ONE, 0.0, 1.0 / divisor);
        assert!(f.sub(&expected).unwrap().max_coef() < 1e-14);
        let w: Vec<C64> = omega.iter().map(|v| C64::new(*v, 0.0)).collect();
        let back = f.lie_derivative(&w);
        assert!(back.sub(&g).unwrap().max_coef() <= 1e-13);
    }

    #[test]
    fn resonant_mode_is_reported() {
        let g = cos_mode(2, &[1, -2], 1.0);
        let err = solve_homological(&g, &[1.0, 0.5], 3).unwrap_err();
        assert!(matches!(err, FourierError::ResonantMode { .. }));
    }

    #[test]
    fn strip_bound_trivial_cases() {
        let c = cos_mode(1, &[1], 1.0);
        let s = 0.3;
        assert!((c.strip_sup_bound(s, 0.0).value - math::exp(s)).abs() < 1e-15);
        let k = FourierTaylor::constant(2, 5.0);
        assert_eq!(k.strip_sup_bound(1.0, 2.0).value, 5.0);
    }

    #[test]
    fn strip_bound_dominates_grid_max() {
        let mut f = FourierTaylor::zeros(1, 3, 0);
        f.add_real_mode(&[1], Mono::ONE, 0.4, 0.1);
        f.add_real_mode(&[2], Mono::ONE, -0.3, 0.2);
        f.add_real_mode(&[3], Mono::ONE, 0.05, 0.0);
        let b = f.strip_sup_bound(0.1, 0.0).value;
        let gmax = (0..64)
            .map(|i| f.eval_real(&[2.0 * PI * i as f64 / 64.0], &[]).abs())
            .fold(0.0, f64::max);
        assert!(b >= gmax);
    }

    #[test]
    fn monomial_indexing_round_trips() {
        for n in 1..4 {
            for i in 0..mono_count(n, 2) {
                assert_eq!(Mono::from_index(n, i).index(n), i);
            }
        }
    }

    #[test]
    fn poisson_bracket_of_action_and_angle_function() {
        // {I_1, cos theta_1} = -d_theta cos = sin theta_1 ... with our sign
        // convention {a,b} = a_theta b_I - a_I b_theta.
        let mut a = FourierTaylor::zeros(1, 0, 1);
        a.add_to(&[0], Mono::linear(0), C64::new(1.0, 0.0));
        let b = cos_mode(1, &[1], 1.0);
        let br = a.poisson(&b, 8).unwrap();
        let t = 0.37;
        assert!((br.eval_real(&[t], &[0.0]) - math::sin(t)).abs() < 1e-15);
    }

    fn random_series(n: usize, k: usize, deg: usize, vals: &[f64]) -> FourierTaylor {
        let mut f = FourierTaylor::zeros(n, k, deg);
        let modes = modes_in_ball(n, k);
        let nm = mono_count(n, deg);
        let mut it = vals.iter().cycle();
        for (idx, kk) in modes.iter().enumerate() {
            if idx % 3 != 0 {
                continue;
            }
            for m in 0..nm {
                let a = *it.next().unwrap();
                let b = *it.next().unwrap();
                f.add_real_mode(kk, Mono::from_index(n, m), a, b);
            }
        }
        f.add_real_mode(&vec![0; n], Mono::ONE, *it.next().unwrap(), 0.0);
        f
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn multiply_commutes_and_distributes(
            va in proptest::collection::vec(-1.0f64..1.0, 24),
            vb in proptest::collection::vec(-1.0f64..1.0, 24),
            vc in proptest::collection::vec(-1.0f64..1.0, 24),
        ) {
            let a = random_series(2, 2, 1, &va);
            let b = random_series(2, 2, 1, &vb);
            let c = random_series(2, 2, 1, &vc);
            let ab = a.multiply(&b).unwrap();
            let ba = b.multiply(&a).unwrap();
            prop_assert!(ab.sub(&ba).unwrap().max_coef() <= 1e-13);
            let lhs = a.multiply(&b.add(&c).unwrap()).unwrap();
            let rhs = ab.add(&a.multiply(&c).unwrap()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_coef() <= 1e-13);
            prop_assert!(ab.reality_defect() <= 1e-15);
        }

        #[test]
        fn homological_solve_is_exact(
            vals in proptest::collection::vec(-1.0f64..1.0, 40),
            t in 0.0f64..1.0,
        ) {
            let gold = (5f64.sqrt() - 1.0) / 2.0;
            let omega = [1.0 + 0.1 * t, gold];
            let g = random_series(2, 4, 2, &vals);
            let f = solve_homological(&g, &omega, 4).unwrap();
            let w: Vec<C64> = omega.iter().map(|v| C64::new(*v, 0.0)).collect();
            let back = f.lie_derivative(&w);
            let target = g.truncate(4).without_average();
            prop_assert!(back.sub(&target).unwrap().max_coef() <= 1e-12);
            prop_assert_eq!(f.average().coef.iter().map(|c| c.cabs()).fold(0.0, f64::max), 0.0);
            prop_assert!(f.reality_defect() <= 1e-15);
        }

        #[test]
        fn strip_bound_dominates_sampled_sup(
            vals in proptest::collection::vec(-1.0f64..1.0, 24),
            s in 0.0f64..0.5,
            r in 0.0f64..0.5,
        ) {
            let f = random_series(1, 4, 2, &vals);
            let b = f.strip_sup_bound(s, r).value;
            for i in 0..32 {
                for j in 0..5 {
                    let th = 2.0 * PI * i as f64 / 32.0;
                    let act = -r + 2.0 * r * j as f64 / 4.0;
                    prop_assert!(f.eval_real(&[th], &[act]).abs() <= b * (1.0 + 1e-12));
                }
            }
        }
    }
}

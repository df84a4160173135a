//! Smooth extension of Whitney jets sampled on a finite frequency set.
//!
//! A jet on `T^n x S` is reduced to per-mode jets on `S` by Fourier weights
//! `e^{r|k|^{1/rho}}`, each mode jet is extended to `R^m` by a Whitney-type
//! operator with Gevrey cutoffs, and the modes are summed back with the
//! inverse weights.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::fourier::C64;
use crate::kam::TorusJet;
use crate::math::{self, LibmComplex};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WhitneyError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("jet fails Taylor compatibility between points {first} and {second} at order {beta:?}: remainder {remainder:e} > bound {bound:e}")]
    IncompatibleJet { first: usize, second: usize, beta: Vec<usize>, remainder: f64, bound: f64 },
}

pub type Result<T> = core::result::Result<T, WhitneyError>;

/// Claimed Gevrey constants `|d_theta^alpha f^beta| <= A C1^|alpha| C2^|beta| alpha!^rho beta!^rho'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JetConstants {
    pub a: f64,
    pub c1: f64,
    pub c2: f64,
    pub rho: f64,
    pub rho_prime: f64,
}

impl JetConstants {
    fn validate(&self) -> Result<()> {
        let ok = [self.a, self.c1, self.c2].iter().all(|v| v.is_finite() && *v > 0.0)
            && self.rho >= 1.0
            && self.rho_prime > 1.0
            && self.rho.is_finite()
            && self.rho_prime.is_finite();
        if ok {
            Ok(())
        } else {
            Err(WhitneyError::InvalidInput("constants must be positive with rho >= 1, rho' > 1"))
        }
    }
}

/// Derivative tables `f^beta(p)`, `|beta| <= m_max`, at finitely many points of `R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitneyJet {
    pub points: Vec<Vec<f64>>,
    pub m_max: usize,
    pub orders: Vec<Vec<usize>>,
    /// `values[point][order index]`, orders as in [`math::multi_indices`].
    pub values: Vec<Vec<f64>>,
    pub constants: JetConstants,
}

/// Largest remainder-to-bound ratio over all point pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Compatibility {
    pub worst_ratio: f64,
    pub worst: Option<(usize, usize, Vec<usize>, f64, f64)>,
}

impl WhitneyJet {
    pub fn new(points: Vec<Vec<f64>>, m_max: usize, values: Vec<Vec<f64>>, constants: JetConstants) -> Result<Self> {
        constants.validate()?;
        let m = points.first().map(|p| p.len()).ok_or(WhitneyError::InvalidInput("empty sample set"))?;
        if m == 0 || points.iter().any(|p| p.len() != m || p.iter().any(|v| !v.is_finite())) {
            return Err(WhitneyError::InvalidInput("points must share a positive dimension and be finite"));
        }
        let orders = math::multi_indices(m, m_max);
        if values.len() != points.len() || values.iter().any(|v| v.len() != orders.len() || v.iter().any(|x| !x.is_finite())) {
            return Err(WhitneyError::InvalidInput("one finite value per point and order"));
        }
        for i in 0..points.len() {
            for j in 0..i {
                if points[i] == points[j] {
                    return Err(WhitneyError::InvalidInput("repeated sample point"));
                }
            }
        }
        Ok(WhitneyJet { points, m_max, orders, values, constants })
    }

    pub fn from_fn(points: Vec<Vec<f64>>, m_max: usize, constants: JetConstants, f: impl Fn(&[usize], &[f64]) -> f64) -> Result<Self> {
        let m = points.first().map(|p| p.len()).unwrap_or(0);
        let orders = math::multi_indices(m, m_max);
        let values = points.iter().map(|p| orders.iter().map(|b| f(b, p)).collect()).collect();
        Self::new(points, m_max, values, constants)
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn index_of(&self, beta: &[usize]) -> Option<usize> {
        self.orders.iter().position(|b| b.as_slice() == beta)
    }

    pub fn get(&self, p: usize, beta: &[usize]) -> Option<f64> {
        self.index_of(beta).map(|i| self.values[p][i])
    }

    /// `sum_{|beta + gamma| <= m_max} f^{beta+gamma}(p) (x - p)^gamma / gamma!`.
    pub fn taylor(&self, p: usize, beta: &[usize], x: &[f64]) -> f64 {
        let base = &self.points[p];
        let top: usize = beta.iter().sum();
        if top > self.m_max {
            return 0.0;
        }
        let mut total = 0.0;
        for gamma in math::multi_indices(self.dim(), self.m_max - top) {
            let idx: Vec<usize> = beta.iter().zip(&gamma).map(|(b, g)| b + g).collect();
            let Some(v) = self.get(p, &idx) else { continue };
            let mut mono = 1.0;
            for ((xi, pi), g) in x.iter().zip(base).zip(&gamma) {
                mono *= math::powi(xi - pi, *g as i32);
            }
            total += v * mono / math::multi_factorial(&gamma);
        }
        total
    }

    /// Remainder bound `A C2^{m+1} |d|_1^{m-|beta|+1} / (m-|beta|+1)! (m+1)!^{rho'}`.
    pub fn remainder_bound(&self, beta_order: usize, dist_l1: f64) -> f64 {
        let c = &self.constants;
        let m = self.m_max;
        let q = m - beta_order + 1;
        c.a * math::powi(c.c2, (m + 1) as i32) * math::powi(dist_l1, q as i32) / math::factorial(q)
            * math::exp(c.rho_prime * math::ln_factorial(m + 1))
    }

    pub fn compatibility(&self) -> Compatibility {
        let mut out = Compatibility { worst_ratio: 0.0, worst: None };
        let scale = self.values.iter().flatten().fold(0.0f64, |a, v| a.max(math::abs(*v)));
        for i in 0..self.points.len() {
            for j in 0..self.points.len() {
                if i == j {
                    continue;
                }
                let d: f64 = self.points[i].iter().zip(&self.points[j]).map(|(a, b)| math::abs(a - b)).sum();
                for (bi, beta) in self.orders.iter().enumerate() {
                    let rem = math::abs(self.values[j][bi] - self.taylor(i, beta, &self.points[j]));
                    // rounding of the Taylor sum is not a compatibility defect
                    let rem = (rem - 1e-13 * scale.max(1.0)).max(0.0);
                    let bound = self.remainder_bound(beta.iter().sum(), d);
                    let ratio = if bound > 0.0 { rem / bound } else if rem > 0.0 { f64::INFINITY } else { 0.0 };
                    if ratio > out.worst_ratio {
                        out.worst_ratio = ratio;
                        out.worst = Some((i, j, beta.clone(), rem, bound));
                    }
                }
            }
        }
        out
    }

    pub fn check_compatible(&self) -> Result<()> {
        let c = self.compatibility();
        match c.worst {
            Some((first, second, beta, remainder, bound)) if c.worst_ratio > 1.0 => {
                Err(WhitneyError::IncompatibleJet { first, second, beta, remainder, bound })
            }
            _ => Ok(()),
        }
    }
}

/// `exp(-t^{-s})` for `t > 0`, zero otherwise; Gevrey of class `1 + 1/s`.
fn flat(t: f64, s: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        math::exp(-math::powf(t, -s))
    }
}

/// Equal to 1 for `t <= 0`, 0 for `t >= 1`.
pub fn gevrey_step(t: f64, rho_prime: f64) -> f64 {
    let s = 1.0 / (rho_prime - 1.0);
    let a = flat(1.0 - t, s);
    let b = flat(t, s);
    if a + b == 0.0 {
        // unreachable in exact arithmetic; both vanish only through underflow
        if t < 0.5 { 1.0 } else { 0.0 }
    } else {
        a / (a + b)
    }
}

/// The bump profile `exp(-(1 - t^2)^{-1/(rho'-1)})` on `(-1, 1)`.
pub fn gevrey_bump(t: f64, rho_prime: f64) -> f64 {
    flat(1.0 - t * t, 1.0 / (rho_prime - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendConfig {
    /// Plateau radius of the global cutoff in units of `1/C2`.
    pub outer_scale: f64,
    /// Length of the blending weights away from the samples, in units of the
    /// mean nearest-neighbour spacing.
    pub blend_scale: f64,
    pub check_compatibility: bool,
}

impl Default for ExtendConfig {
    fn default() -> Self {
        ExtendConfig { outer_scale: 1.0, blend_scale: 1.0, check_compatibility: true }
    }
}

/// `F = G (sum_p chi_p T_p + (1 - sum_p chi_p) sum_q w_q T_q)`: plateau cutoffs
/// `chi_p` on disjoint balls, normalized Gaussian blending `w_q` between them
/// and a global Gevrey cutoff `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension {
    pub jet: WhitneyJet,
    /// Radius of the ball where `chi_p` is supported; `chi_p = 1` on half of it.
    pub inner: Vec<f64>,
    pub outer: f64,
    pub blend: f64,
}

pub fn extend_jet(jet: &WhitneyJet, cfg: &ExtendConfig) -> Result<Extension> {
    if !(cfg.outer_scale > 0.0 && cfg.blend_scale > 0.0) {
        return Err(WhitneyError::InvalidInput("scales must be positive"));
    }
    if cfg.check_compatibility {
        jet.check_compatible()?;
    }
    let outer = cfg.outer_scale / jet.constants.c2;
    let np = jet.points.len();
    let mut inner = vec![outer; np];
    let mut spacing = 0.0;
    for i in 0..np {
        let mut nearest = f64::INFINITY;
        for j in 0..np {
            if i != j {
                nearest = nearest.min(dist(&jet.points[i], &jet.points[j]));
            }
        }
        if nearest.is_finite() {
            inner[i] = inner[i].min(0.5 * nearest);
            spacing += nearest;
        }
    }
    let blend = if np > 1 { cfg.blend_scale * spacing / np as f64 } else { outer };
    Ok(Extension { jet: jet.clone(), inner, outer, blend })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

impl Extension {
    fn rho_prime(&self) -> f64 {
        self.jet.constants.rho_prime
    }

    /// Sample point whose plateau contains `x`, where `F = T_p` identically.
    pub fn plateau_of(&self, x: &[f64]) -> Option<usize> {
        (0..self.jet.points.len()).find(|&p| dist(x, &self.jet.points[p]) < 0.5 * self.inner[p])
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let rp = self.rho_prime();
        let np = self.jet.points.len();
        let d: Vec<f64> = self.jet.points.iter().map(|p| dist(x, p)).collect();
        let mut miss = 1.0;
        for dp in &d {
            miss *= 1.0 - gevrey_step((dp - self.outer) / self.outer, rp);
        }
        let global = 1.0 - miss;
        if global == 0.0 {
            return 0.0;
        }
        let mut local = 0.0;
        let mut chi_sum = 0.0;
        for p in 0..np {
            let h = 0.5 * self.inner[p];
            if d[p] < self.inner[p] {
                let chi = gevrey_step((d[p] - h) / h, rp);
                if chi > 0.0 {
                    local += chi * self.jet.taylor(p, &vec![0; x.len()], x);
                    chi_sum += chi;
                }
            }
        }
        let rest = 1.0 - chi_sum;
        let mut blended = 0.0;
        if rest > 0.0 {
            let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut wsum = 0.0;
            for q in 0..np {
                let w = math::exp(-(d[q] * d[q] - dmin * dmin) / (self.blend * self.blend));
                if w > 0.0 {
                    blended += w * self.jet.taylor(q, &vec![0; x.len()], x);
                    wsum += w;
                }
            }
            blended /= wsum;
        }
        global * (local + rest * blended)
    }

    /// `d^beta F(x)`: exact inside a plateau, Richardson-extrapolated central
    /// differences with step `h` elsewhere.
    pub fn derivative(&self, beta: &[usize], x: &[f64], h: f64) -> f64 {
        if let Some(p) = self.plateau_of(x) {
            let reach = 0.5 * self.inner[p] - dist(x, &self.jet.points[p]);
            if reach > 0.0 && (self.outer - dist(x, &self.jet.points[p])) > 0.0 {
                return self.jet.taylor(p, beta, x);
            }
        }
        let coarse = self.difference(beta, x, h);
        let fine = self.difference(beta, x, 0.5 * h);
        (4.0 * fine - coarse) / 3.0
    }

    fn difference(&self, beta: &[usize], x: &[f64], h: f64) -> f64 {
        let stencils: Vec<&[(i32, f64)]> = beta.iter().map(|&b| central_stencil(b)).collect();
        let mut total = 0.0;
        let mut idx = vec![0usize; beta.len()];
        let mut y = x.to_vec();
        loop {
            let mut w = 1.0;
            for (k, st) in stencils.iter().enumerate() {
                let (off, c) = st[idx[k]];
                y[k] = x[k] + off as f64 * h;
                w *= c;
            }
            total += w * self.value(&y);
            let mut k = 0;
            loop {
                if k == beta.len() {
                    let scale: f64 = beta.iter().map(|&b| math::powi(h, b as i32)).product();
                    return total / scale;
                }
                idx[k] += 1;
                if idx[k] < stencils[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

fn central_stencil(order: usize) -> &'static [(i32, f64)] {
    match order {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
    }
}

/// Measured `max_{|beta| = k} |d^beta F| / beta!^{rho'}` on probe points and
/// its least-squares geometric envelope `c q^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthAudit {
    pub sup: Vec<f64>,
    pub constant: f64,
    pub rate: f64,
    /// `max_k sup_k / (constant rate^k)`.
    pub excess: f64,
}

pub fn growth_audit(ext: &Extension, probes: &[Vec<f64>], max_order: usize, h: f64) -> GrowthAudit {
    let m = ext.jet.dim();
    let rp = ext.rho_prime();
    let mut sup = vec![0.0f64; max_order.min(4) + 1];
    for beta in math::multi_indices(m, max_order.min(4)) {
        if beta.iter().any(|&b| b > 4) {
            continue;
        }
        let k: usize = beta.iter().sum();
        let norm = math::powf(math::multi_factorial(&beta), rp);
        for x in probes {
            sup[k] = sup[k].max(math::abs(ext.derivative(&beta, x, h)) / norm);
        }
    }
    let tiny = 1e-300;
    let ks: Vec<f64> = (0..sup.len()).map(|k| k as f64).collect();
    let ls: Vec<f64> = sup.iter().map(|s| math::ln(s.max(tiny))).collect();
    let (lnc, slope, _) = if sup.len() > 1 { math::linear_fit(&ks, &ls) } else { (ls[0], 0.0, 1.0) };
    let constant = math::exp(lnc);
    let rate = math::exp(slope);
    let excess = sup
        .iter()
        .enumerate()
        .map(|(k, s)| s.max(tiny) / (constant * math::powi(rate, k as i32)))
        .fold(0.0f64, f64::max);
    GrowthAudit { sup, constant, rate, excess }
}

/// Uniform angle grid, `grid` points per axis, last axis fastest.
pub fn angle_grid(n: usize, grid: usize) -> Vec<Vec<f64>> {
    let total = grid.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut th = vec![0.0; n];
            for k in (0..n).rev() {
                th[k] = 2.0 * PI * (idx % grid) as f64 / grid as f64;
                idx /= grid;
            }
            th
        })
        .collect()
}

/// A jet in `omega` on `S` for every angle of a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleJet {
    pub n: usize,
    pub grid: usize,
    pub points: Vec<Vec<f64>>,
    pub m_max: usize,
    pub orders: Vec<Vec<usize>>,
    /// `values[point][order][angle index]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub constants: JetConstants,
}

impl AngleJet {
    pub fn from_fn(
        n: usize,
        grid: usize,
        points: Vec<Vec<f64>>,
        m_max: usize,
        constants: JetConstants,
        f: impl Fn(&[usize], &[f64], &[f64]) -> f64,
    ) -> Result<Self> {
        let m = points.first().map(|p| p.len()).unwrap_or(0);
        let orders = math::multi_indices(m, m_max);
        let thetas = angle_grid(n, grid);
        let values = points.iter().map(|p| orders.iter().map(|b| thetas.iter().map(|t| f(b, t, p)).collect()).collect()).collect();
        Self::new(n, grid, points, m_max, values, constants)
    }

    pub fn new(
        n: usize,
        grid: usize,
        points: Vec<Vec<f64>>,
        m_max: usize,
        values: Vec<Vec<Vec<f64>>>,
        constants: JetConstants,
    ) -> Result<Self> {
        constants.validate()?;
        if n == 0 || grid % 2 == 0 {
            return Err(WhitneyError::InvalidInput("angle grid must be odd and n positive"));
        }
        let m = points.first().map(|p| p.len()).ok_or(WhitneyError::InvalidInput("empty sample set"))?;
        let orders = math::multi_indices(m, m_max);
        let cells = grid.pow(n as u32);
        if points.iter().any(|p| p.len() != m)
            || values.len() != points.len()
            || values.iter().any(|v| v.len() != orders.len() || v.iter().any(|t| t.len() != cells))
        {
            return Err(WhitneyError::InvalidInput("value array shape mismatch"));
        }
        Ok(AngleJet { n, grid, points, m_max, orders, values, constants })
    }

    /// Component `component` of `U - theta` from a torus jet sampled on
    /// [`angle_grid`].
    pub fn from_torus_jet(tj: &TorusJet, grid: usize, component: usize, constants: JetConstants) -> Result<Self> {
        let n = tj.omega.len();
        let thetas = angle_grid(n, grid);
        if component >= n
            || tj.thetas.len() != thetas.len()
            || tj.thetas.iter().zip(&thetas).any(|(a, b)| a.iter().zip(b).any(|(x, y)| math::abs(x - y) > 1e-14))
        {
            return Err(WhitneyError::InvalidInput("torus jet is not sampled on the angle grid"));
        }
        let m_max = tj.table.orders.iter().map(|b| b.iter().sum::<usize>()).max().unwrap_or(0);
        let orders = math::multi_indices(n, m_max);
        let mut vals = Vec::with_capacity(orders.len());
        for beta in &orders {
            let row: Option<Vec<f64>> = (0..thetas.len()).map(|t| tj.u(beta, t, component)).collect();
            vals.push(row.ok_or(WhitneyError::InvalidInput("torus jet lacks an order"))?);
        }
        Self::new(n, grid, vec![tj.omega.clone()], m_max, vec![vals], constants)
    }
}

/// Weighted per-mode jets `g_k^beta = e^{r|k|^{1/rho}} f_k^beta` for `k = 0`
/// and one representative of each pair `+-k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeJets {
    pub n: usize,
    pub r: f64,
    pub rho: f64,
    pub modes: Vec<Vec<i32>>,
    pub re: Vec<WhitneyJet>,
    pub im: Vec<WhitneyJet>,
}

fn mode_norm(k: &[i32]) -> usize {
    k.iter().map(|v| v.unsigned_abs() as usize).sum()
}

/// Modes of the odd grid with the first nonzero entry positive, plus zero.
fn half_modes(n: usize, grid: usize) -> Vec<Vec<i32>> {
    let h = (grid / 2) as i32;
    let side = grid;
    let mut out = Vec::new();
    for mut idx in 0..side.pow(n as u32) {
        let mut k = vec![0i32; n];
        for c in (0..n).rev() {
            k[c] = (idx % side) as i32 - h;
            idx /= side;
        }
        match k.iter().find(|v| **v != 0) {
            None => out.push(k),
            Some(v) if *v > 0 => out.push(k),
            _ => {}
        }
    }
    out
}

pub fn fourier_weight(jet: &AngleJet, c0: f64) -> Result<ModeJets> {
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(WhitneyError::InvalidInput("c0 must be positive"));
    }
    let c = jet.constants;
    let r = c0 * math::powf(c.c1, -1.0 / c.rho);
    let thetas = angle_grid(jet.n, jet.grid);
    let cells = thetas.len() as f64;
    let modes = half_modes(jet.n, jet.grid);
    // weighted jets satisfy the mode bound with A2 = 2 A max(C1, 1)
    let mc = JetConstants { a: 2.0 * c.a * c.c1.max(1.0), ..c };
    let mut re = Vec::with_capacity(modes.len());
    let mut im = Vec::with_capacity(modes.len());
    for k in &modes {
        let weight = math::exp(r * math::powf(mode_norm(k) as f64, 1.0 / c.rho));
        let mut vr = Vec::with_capacity(jet.points.len());
        let mut vi = Vec::with_capacity(jet.points.len());
        for per_point in &jet.values {
            let mut row_r = Vec::with_capacity(jet.orders.len());
            let mut row_i = Vec::with_capacity(jet.orders.len());
            for samples in per_point {
                let mut acc = C64::new(0.0, 0.0);
                for (t, th) in thetas.iter().enumerate() {
                    let ph: f64 = k.iter().zip(th).map(|(ki, ti)| *ki as f64 * ti).sum();
                    acc += C64::new(math::cos(ph), -math::sin(ph)) * samples[t];
                }
                let g = acc / cells * weight;
                row_r.push(g.re);
                row_i.push(g.im);
            }
            vr.push(row_r);
            vi.push(row_i);
        }
        re.push(WhitneyJet::new(jet.points.clone(), jet.m_max, vr, mc)?);
        im.push(WhitneyJet::new(jet.points.clone(), jet.m_max, vi, mc)?);
    }
    Ok(ModeJets { n: jet.n, r, rho: c.rho, modes, re, im })
}

impl ModeJets {
    pub fn inverse_weight(&self, k: &[i32]) -> f64 {
        math::exp(-self.r * math::powf(mode_norm(k) as f64, 1.0 / self.rho))
    }

    /// `max |g_k^beta| / (A2 C2^|beta| beta!^{rho'})` over modes, points and orders.
    pub fn bound_ratio(&self) -> f64 {
        let mut worst = 0.0f64;
        for (jr, ji) in self.re.iter().zip(&self.im) {
            let c = jr.constants;
            for (p, row) in jr.values.iter().enumerate() {
                for (o, beta) in jr.orders.iter().enumerate() {
                    let g = C64::new(row[o], ji.values[p][o]).cabs();
                    let b: usize = beta.iter().sum();
                    let den = c.a * math::powi(c.c2, b as i32) * math::powf(math::multi_factorial(beta), c.rho_prime);
                    worst = worst.max(g / den);
                }
            }
        }
        worst
    }

    /// `max |g_k^beta|` over points and orders for each `|k|`.
    pub fn sup_by_order(&self) -> Vec<f64> {
        let top = self.modes.iter().map(|k| mode_norm(k)).max().unwrap_or(0);
        let mut out = vec![0.0f64; top + 1];
        for (i, k) in self.modes.iter().enumerate() {
            let s = &mut out[mode_norm(k)];
            for (rr, ri) in self.re[i].values.iter().zip(&self.im[i].values) {
                for (a, b) in rr.iter().zip(ri) {
                    *s = s.max(C64::new(*a, *b).cabs());
                }
            }
        }
        out
    }

    /// Inverse weights applied to the unextended jets at sample `p`.
    pub fn evaluate_at_sample(&self, theta: &[f64], p: usize, beta: &[usize]) -> C64 {
        self.sum_modes(theta, |i| {
            let o = self.re[i].index_of(beta).unwrap_or(usize::MAX);
            if o == usize::MAX {
                C64::new(0.0, 0.0)
            } else {
                C64::new(self.re[i].values[p][o], self.im[i].values[p][o])
            }
        })
    }

    fn sum_modes(&self, theta: &[f64], g: impl Fn(usize) -> C64) -> C64 {
        let mut total = C64::new(0.0, 0.0);
        for (i, k) in self.modes.iter().enumerate() {
            let gk = g(i) * self.inverse_weight(k);
            let ph: f64 = k.iter().zip(theta).map(|(ki, ti)| *ki as f64 * ti).sum();
            let e = C64::new(math::cos(ph), math::sin(ph));
            total += e * gk;
            if k.iter().any(|v| *v != 0) {
                // the conjugate mode -k carries conj(g_k)
                total += e.conj() * gk.conj();
            }
        }
        total
    }
}

/// Extensions of the real and imaginary parts of every mode jet.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeExtensions {
    pub re: Vec<Extension>,
    pub im: Vec<Extension>,
}

pub fn extend_modes(modes: &ModeJets, cfg: &ExtendConfig) -> Result<ModeExtensions> {
    let re = modes.re.iter().map(|j| extend_jet(j, cfg)).collect::<Result<Vec<_>>>()?;
    let im = modes.im.iter().map(|j| extend_jet(j, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(ModeExtensions { re, im })
}

/// `f(theta, omega) = sum_k e^{i<k,theta> - r|k|^{1/rho}} g_k(omega)` with the
/// extended mode functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub modes: ModeJets,
    pub ext: ModeExtensions,
}

pub fn assemble(modes: &ModeJets, ext: ModeExtensions) -> Result<Assembled> {
    if ext.re.len() != modes.modes.len() || ext.im.len() != modes.modes.len() {
        return Err(WhitneyError::InvalidInput("one extension per mode"));
    }
    Ok(Assembled { modes: modes.clone(), ext })
}

impl Assembled {
    /// Complex value of `d_omega^beta f`; the imaginary part vanishes up to rounding.
    pub fn eval(&self, theta: &[f64], omega: &[f64], beta: &[usize], h: f64) -> C64 {
        self.modes.sum_modes(theta, |i| {
            C64::new(self.ext.re[i].derivative(beta, omega, h), self.ext.im[i].derivative(beta, omega, h))
        })
    }

    /// Fourier coefficients in `theta` of `d_omega^beta f(., omega)`, both signs of `k`.
    pub fn coefficients(&self, omega: &[f64], beta: &[usize], h: f64) -> Vec<(Vec<i32>, C64)> {
        let mut out = Vec::with_capacity(2 * self.modes.modes.len());
        for (i, k) in self.modes.modes.iter().enumerate() {
            let g = if beta.iter().all(|b| *b == 0) {
                C64::new(self.ext.re[i].value(omega), self.ext.im[i].value(omega))
            } else {
                C64::new(self.ext.re[i].derivative(beta, omega, h), self.ext.im[i].derivative(beta, omega, h))
            } * self.modes.inverse_weight(k);
            if k.iter().any(|v| *v != 0) {
                out.push((k.iter().map(|v| -v).collect(), g.conj()));
            }
            out.push((k.clone(), g));
        }
        out
    }

    pub fn value(&self, theta: &[f64], omega: &[f64]) -> f64 {
        self.modes.sum_modes(theta, |i| C64::new(self.ext.re[i].value(omega), self.ext.im[i].value(omega))).re
    }
}

/// Largest deviation of the assembled function's `omega`-derivatives from an
/// angle jet on its grid and sample set.
pub fn round_trip_error(asm: &Assembled, jet: &AngleJet) -> f64 {
    let thetas = angle_grid(jet.n, jet.grid);
    let mut worst = 0.0f64;
    for (p, point) in jet.points.iter().enumerate() {
        for (o, beta) in jet.orders.iter().enumerate() {
            for (t, th) in thetas.iter().enumerate() {
                let v = asm.eval(th, point, beta, 1e-3);
                worst = worst.max(math::abs(v.re - jet.values[p][o][t]));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn consts() -> JetConstants {
        JetConstants { a: 1.0, c1: 1.0, c2: 1.0, rho: 2.0, rho_prime: 2.0 }
    }

    /// `p(w) = 1 + w1 - 2 w1 w2 + 0.5 w2^3` and its derivatives.
    fn poly(beta: &[usize], w: &[f64]) -> f64 {
        let (x, y) = (w[0], w[1]);
        match (beta[0], beta[1]) {
            (0, 0) => 1.0 + x - 2.0 * x * y + 0.5 * y * y * y,
            (1, 0) => 1.0 - 2.0 * y,
            (0, 1) => -2.0 * x + 1.5 * y * y,
            (1, 1) => -2.0,
            (0, 2) => 3.0 * y,
            (0, 3) => 3.0,
            _ => 0.0,
        }
    }

    fn samples() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0], vec![0.3, 0.1], vec![-0.2, 0.25], vec![0.1, -0.3]]
    }

    #[test]
    fn single_point_is_taylor_times_cutoff() {
        let jet = WhitneyJet::from_fn(vec![vec![0.2, -0.1]], 3, consts(), |b, w| poly(b, w) + 0.1 * b[0] as f64).unwrap();
        let ext = extend_jet(&jet, &ExtendConfig::default()).unwrap();
        for (o, beta) in jet.orders.iter().enumerate() {
            assert_eq!(ext.derivative(beta, &[0.2, -0.1], 1e-3), jet.values[0][o]);
        }
        let x = [0.5, 0.3];
        assert!(math::abs(ext.value(&x) - jet.taylor(0, &[0, 0], &x)) <= 1e-15);
        let far = [0.2 + 1.5, -0.1];
        let cut = gevrey_step(0.5, 2.0);
        assert!(math::abs(ext.value(&far) - cut * jet.taylor(0, &[0, 0], &far)) <= 1e-14);
        assert_eq!(ext.value(&[3.0, 3.0]), 0.0);
    }

    #[test]
    fn polynomial_jet_is_reproduced() {
        let jet = WhitneyJet::from_fn(samples(), 3, JetConstants { a: 10.0, ..consts() }, poly).unwrap();
        let ext = extend_jet(&jet, &ExtendConfig::default()).unwrap();
        for (p, point) in jet.points.iter().enumerate() {
            for (o, beta) in jet.orders.iter().enumerate() {
                let d = ext.derivative(beta, point, 1e-3);
                assert!(math::abs(d - jet.values[p][o]) <= 1e-10);
            }
            assert_eq!(ext.value(point), poly(&[0, 0], point));
        }
        for i in 0..9 {
            for j in 0..9 {
                let x = [-0.4 + 0.1 * i as f64, -0.4 + 0.1 * j as f64];
                assert!(math::abs(ext.value(&x) - poly(&[0, 0], &x)) <= 1e-8, "{x:?}");
            }
        }
        // finite differences see the same derivatives at the samples
        let d = ext.difference(&[1, 1], &[0.3, 0.1], 1e-3);
        assert!(math::abs(d + 2.0) <= 1e-6);
    }

    #[test]
    fn corrupted_entry_is_rejected() {
        let mut jet = WhitneyJet::from_fn(samples(), 3, consts(), poly).unwrap();
        assert!(jet.check_compatible().is_ok());
        jet.values[1][0] += 5.0;
        assert!(matches!(extend_jet(&jet, &ExtendConfig::default()), Err(WhitneyError::IncompatibleJet { .. })));
        let unchecked = ExtendConfig { check_compatibility: false, ..ExtendConfig::default() };
        assert!(extend_jet(&jet, &unchecked).is_ok());
    }

    #[test]
    fn cutoffs_have_the_right_plateaus() {
        assert_eq!(gevrey_step(-0.1, 2.0), 1.0);
        assert_eq!(gevrey_step(1.0, 2.0), 0.0);
        assert!(math::abs(gevrey_step(0.5, 3.0) - 0.5) <= 1e-15);
        assert_eq!(gevrey_bump(1.0, 2.0), 0.0);
        assert!(math::abs(gevrey_bump(0.0, 2.0) - math::exp(-1.0)) <= 1e-15);
    }

    #[test]
    fn growth_is_geometric() {
        let wave = |b: &[usize], w: &[f64]| {
            let s = w[0] + 2.0 * w[1];
            let d = if (b[0] + b[1]) % 2 == 0 { math::sin(s) } else { math::cos(s) };
            let sign = if (b[0] + b[1]) % 4 >= 2 { -1.0 } else { 1.0 };
            sign * d * math::powi(2.0, b[1] as i32)
        };
        let jet = WhitneyJet::from_fn(samples(), 3, JetConstants { a: 10.0, c2: 2.0, ..consts() }, wave).unwrap();
        let ext = extend_jet(&jet, &ExtendConfig::default()).unwrap();
        let probes: Vec<Vec<f64>> = (0..5).flat_map(|i| (0..5).map(move |j| vec![-0.6 + 0.3 * i as f64, -0.6 + 0.3 * j as f64])).collect();
        let audit = growth_audit(&ext, &probes, 4, 2e-3);
        assert!(audit.rate.is_finite() && audit.rate > 0.0);
        assert!(audit.excess <= 10.0, "{audit:?}");
    }

    fn g2_angle(beta: &[usize], th: &[f64], w: &[f64]) -> f64 {
        // sum_k e^{-sqrt k} cos(k theta1) times a polynomial in omega
        let s: f64 = (1..=12).map(|k| math::exp(-math::sqrt(k as f64)) * math::cos(k as f64 * th[0])).sum();
        s * poly(beta, w) + math::sin(th[1]) * if beta == [0, 0] { w[0] } else if beta == [1, 0] { 1.0 } else { 0.0 }
    }

    #[test]
    fn zero_mode_weight_is_one() {
        let jet = AngleJet::from_fn(2, 5, vec![vec![0.0, 0.0]], 2, consts(), |b, _, w| poly(b, w)).unwrap();
        let m = fourier_weight(&jet, 0.5).unwrap();
        assert_eq!(m.modes.len(), 13);
        assert_eq!(m.modes[0], vec![0, 0]);
        assert!(math::abs(m.re[0].values[0][0] - 1.0) <= 1e-15);
        assert!(m.re[1..].iter().all(|j| j.values[0].iter().all(|v| math::abs(*v) <= 1e-15)));
    }

    #[test]
    fn single_mode_carries_its_weight() {
        let jet = AngleJet::from_fn(2, 5, vec![vec![0.1, 0.2]], 1, consts(), |b, t, w| math::cos(t[0]) * poly(b, w)).unwrap();
        let m = fourier_weight(&jet, 0.7).unwrap();
        let i = m.modes.iter().position(|k| k == &vec![1, 0]).unwrap();
        let expect = 0.5 * math::exp(m.r) * poly(&[0, 0], &[0.1, 0.2]);
        assert!(math::abs(m.re[i].values[0][0] - expect) <= 1e-14);
        for (j, jr) in m.re.iter().enumerate() {
            if j != i {
                assert!(jr.values[0].iter().all(|v| math::abs(*v) <= 1e-14));
            }
        }
        assert!((m.r - 0.7).abs() <= 1e-15);
    }

    #[test]
    fn weights_telescope_without_extension() {
        let jet = AngleJet::from_fn(2, 7, samples(), 2, consts(), g2_angle).unwrap();
        let m = fourier_weight(&jet, 1.0).unwrap();
        let thetas = angle_grid(2, 7);
        for (p, _) in jet.points.iter().enumerate() {
            for (o, beta) in jet.orders.iter().enumerate() {
                for (t, th) in thetas.iter().enumerate() {
                    let v = m.evaluate_at_sample(th, p, beta);
                    assert!(math::abs(v.re - jet.values[p][o][t]) <= 1e-12 && math::abs(v.im) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_trip_reproduces_the_jet() {
        let c = JetConstants { a: 10.0, ..consts() };
        let jet = AngleJet::from_fn(2, 7, samples(), 3, c, g2_angle).unwrap();
        let m = fourier_weight(&jet, 1.0).unwrap();
        let asm = assemble(&m, extend_modes(&m, &ExtendConfig::default()).unwrap()).unwrap();
        assert!(round_trip_error(&asm, &jet) <= 1e-9);
        let mut worst_im = 0.0f64;
        for i in 0..6 {
            let th = [0.37 * i as f64, 1.1 - 0.29 * i as f64];
            let w = [-0.35 + 0.13 * i as f64, 0.4 - 0.11 * i as f64];
            worst_im = worst_im.max(asm.eval(&th, &w, &[0, 0], 1e-3).im.abs());
        }
        assert!(worst_im <= 1e-12);
        let th = [0.9, 2.1];
        let w = [0.05, -0.1];
        let direct = asm.value(&th, &w);
        let series: f64 = asm
            .coefficients(&w, &[0, 0], 1e-3)
            .iter()
            .map(|(k, c)| (*c * C64::new(0.0, k[0] as f64 * th[0] + k[1] as f64 * th[1]).cexp()).re)
            .sum();
        assert!(math::abs(direct - series) <= 1e-13);
    }

    #[test]
    fn g2_weighted_modes_stay_bounded_for_small_c0() {
        // f = sum_{k <= 40} e^{-sqrt k} cos k theta: |d^a f| <= A 4^a a!^2 so C1 = 4
        let c = JetConstants { a: 1.0, c1: 4.0, c2: 1.0, rho: 2.0, rho_prime: 2.0 };
        let jet = AngleJet::from_fn(1, 81, vec![vec![0.0]], 1, c, |b, t, _| {
            if b[0] > 0 {
                return 0.0;
            }
            (1..=40).map(|k| math::exp(-math::sqrt(k as f64)) * math::cos(k as f64 * t[0])).sum()
        })
        .unwrap();
        // largest c0 on a grid whose weighted modes do not grow with |k|
        let mut admissible = 0.0;
        for i in 1..=40 {
            let c0 = 0.1 * i as f64;
            let m = fourier_weight(&jet, c0).unwrap();
            let prof = m.sup_by_order();
            let head = prof[1..=20].iter().cloned().fold(0.0, f64::max);
            let tail = prof[21..=40].iter().cloned().fold(0.0, f64::max);
            if tail <= head * (1.0 + 1e-9) {
                admissible = c0;
                assert!(m.bound_ratio() <= 1.0);
            }
        }
        // the weighted coefficients are e^{(c0/2 - 1) sqrt k}/2: bounded exactly for c0 <= 2
        assert!(math::abs(admissible - 2.0) <= 1e-12, "{admissible}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn extension_matches_jet_at_samples(shift in -0.5f64..0.5, scale in 0.2f64..3.0) {
            let pts: Vec<Vec<f64>> = samples().into_iter().map(|p| vec![p[0] * scale + shift, p[1] * scale]).collect();
            let jet = WhitneyJet::from_fn(pts, 3, JetConstants { a: 50.0, ..consts() }, poly).unwrap();
            let ext = extend_jet(&jet, &ExtendConfig { check_compatibility: false, ..ExtendConfig::default() }).unwrap();
            for (p, point) in jet.points.iter().enumerate() {
                for (o, beta) in jet.orders.iter().enumerate() {
                    prop_assert!(math::abs(ext.derivative(beta, point, 1e-3) - jet.values[p][o]) <= 1e-10);
                }
            }
        }

        #[test]
        fn assembled_function_is_real(t1 in 0.0f64..6.3, t2 in 0.0f64..6.3, w1 in -1.0f64..1.0, w2 in -1.0f64..1.0) {
            let jet = AngleJet::from_fn(2, 5, samples(), 1, JetConstants { a: 10.0, ..consts() }, g2_angle).unwrap();
            let m = fourier_weight(&jet, 0.8).unwrap();
            let asm = assemble(&m, extend_modes(&m, &ExtendConfig { check_compatibility: false, ..ExtendConfig::default() }).unwrap()).unwrap();
            prop_assert!(asm.eval(&[t1, t2], &[w1, w2], &[0, 0], 1e-3).im.abs() <= 1e-12);
        }
    }
}

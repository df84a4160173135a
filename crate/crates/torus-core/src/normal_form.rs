//! Symplectic normal form around a family of invariant tori: generating
//! potential of the Lagrangian graphs, the map `chi`, the flat remainder,
//! the stability bound and a drift experiment.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::fourier::C64;
use crate::gevrey::{invert_near_identity, GevreyError, NearIdentityDomain};
use crate::kam::{torus_jet, EngineConfig, JetRequest, KamError, KamSchedule, Mode, TorusJet};
use crate::math::{self, Mat};
use crate::model::{legendre_point, Hamiltonian, IntegrableHamiltonian, ModelError, Perturbation};
use crate::whitney::{self, AngleJet, Assembled, ExtendConfig, JetConstants, WhitneyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalFormError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("graph is not Lagrangian: curl {defect:e} exceeds {tol:e}")]
    NotLagrangian { defect: f64, tol: f64 },
    #[error("frequency inversion failed: {0}")]
    InversionFailure(GevreyError),
    #[error("generating function degenerate: |Id - Phi_I| = {defect}")]
    GeneratingDegenerate { defect: f64 },
    #[error("integrator step {h} exceeds {limit}")]
    StepTooLarge { h: f64, limit: f64 },
    #[error("angle solve did not converge")]
    AngleSolve,
    #[error(transparent)]
    Kam(#[from] KamError),
    #[error(transparent)]
    Whitney(#[from] WhitneyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = core::result::Result<T, NormalFormError>;

/// Radii `r = R = kappa sqrt(eps_H)` and the measured size of the localized
/// perturbation against `kappa r sqrt(eps_H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyReduction {
    pub r: f64,
    pub big_r: f64,
    pub degenerate: bool,
    pub p_norm: f64,
    pub template: f64,
    /// `p_norm / template - 1`, the smallest `A` with `|P| <= (A+1) kappa r sqrt(eps_H)`.
    pub a_measured: f64,
}

/// `P(theta, I; omega) = H(theta, z0 + I) - H0(z0) - <omega, I>` sampled on
/// an angle grid and the corners of `|I|_inf <= R` at each frequency.
pub fn reduce_to_family(ham: &Hamiltonian, kappa: f64, eps_h: f64, threshold: f64, omegas: &[Vec<f64>]) -> Result<FamilyReduction> {
    if !(kappa > 0.0) || !(eps_h >= 0.0) || !eps_h.is_finite() {
        return Err(NormalFormError::InvalidInput("kappa must be positive and eps_H finite, nonnegative"));
    }
    if eps_h > threshold {
        return Err(NormalFormError::InvalidInput("eps_H above the configured threshold"));
    }
    let r = kappa * math::sqrt(eps_h);
    if eps_h == 0.0 {
        return Ok(FamilyReduction { r, big_r: r, degenerate: true, p_norm: 0.0, template: 0.0, a_measured: 0.0 });
    }
    let n = ham.n();
    let thetas = whitney::angle_grid(n, 9);
    let mut p_norm = 0.0f64;
    for om in omegas {
        let z0 = legendre_point(&ham.h0, om)?;
        let e = ham.h0.value(&z0);
        for corner in 0..(1usize << n) {
            let di: Vec<f64> = (0..n).map(|j| if corner >> j & 1 == 1 { r } else { -r }).collect();
            let z: Vec<f64> = z0.iter().zip(&di).map(|(a, b)| a + b).collect();
            let lin = e + math::dot(om, &di);
            for th in &thetas {
                p_norm = p_norm.max(math::abs(ham.value(th, &z) - lin));
            }
        }
    }
    let template = kappa * r * math::sqrt(eps_h);
    Ok(FamilyReduction { r, big_r: r, degenerate: false, p_norm, template, a_measured: p_norm / template - 1.0 })
}

/// Dense trigonometric polynomial with modes `|k_i| <= half`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigPoly {
    pub n: usize,
    pub half: usize,
    pub coeffs: Vec<C64>,
}

impl TrigPoly {
    pub fn zeros(n: usize, half: usize) -> Self {
        TrigPoly { n, half, coeffs: vec![C64::new(0.0, 0.0); (2 * half + 1).pow(n as u32)] }
    }

    fn side(&self) -> usize {
        2 * self.half + 1
    }

    pub fn index(&self, k: &[i32]) -> Option<usize> {
        let h = self.half as i32;
        let mut idx = 0usize;
        for v in k {
            if v.abs() > h {
                return None;
            }
            idx = idx * self.side() + (v + h) as usize;
        }
        Some(idx)
    }

    pub fn mode(&self, idx: usize) -> Vec<i32> {
        let mut k = vec![0i32; self.n];
        let mut r = idx;
        for c in (0..self.n).rev() {
            k[c] = (r % self.side()) as i32 - self.half as i32;
            r /= self.side();
        }
        k
    }

    pub fn from_pairs(n: usize, half: usize, pairs: &[(Vec<i32>, C64)]) -> Self {
        let mut p = Self::zeros(n, half);
        for (k, c) in pairs {
            if let Some(i) = p.index(k) {
                p.coeffs[i] += *c;
            }
        }
        p
    }

    /// Discrete Fourier coefficients of samples on [`whitney::angle_grid`].
    pub fn from_grid(n: usize, grid: usize, values: &[f64]) -> Self {
        let mut p = Self::zeros(n, grid / 2);
        let side = p.side();
        let h = p.half as i64;
        // twiddle[m][t] = e^{-i (m - h) 2 pi t / grid}
        let twiddle: Vec<Vec<C64>> = (0..side)
            .map(|m| {
                (0..grid)
                    .map(|t| {
                        let ph = -2.0 * PI * ((m as i64 - h) * t as i64).rem_euclid(grid as i64) as f64 / grid as f64;
                        C64::new(math::cos(ph), math::sin(ph))
                    })
                    .collect()
            })
            .collect();
        let cells = grid.pow(n as u32);
        let mut digits_k = vec![0usize; n];
        let mut digits_t = vec![0usize; n];
        for idx in 0..p.coeffs.len() {
            let mut r = idx;
            for d in (0..n).rev() {
                digits_k[d] = r % side;
                r /= side;
            }
            let mut acc = C64::new(0.0, 0.0);
            for (t, v) in values.iter().enumerate().take(cells) {
                let mut r = t;
                for d in (0..n).rev() {
                    digits_t[d] = r % grid;
                    r /= grid;
                }
                let mut e = C64::new(*v, 0.0);
                for d in 0..n {
                    e *= twiddle[digits_k[d]][digits_t[d]];
                }
                acc += e;
            }
            p.coeffs[idx] = acc / cells as f64;
        }
        p
    }

    fn powers(&self, theta: &[f64]) -> Vec<Vec<C64>> {
        theta
            .iter()
            .map(|t| {
                let e = C64::new(math::cos(*t), math::sin(*t));
                let mut row = vec![C64::new(1.0, 0.0); self.side()];
                let h = self.half;
                for m in 1..=h {
                    row[h + m] = row[h + m - 1] * e;
                    row[h - m] = row[h - m + 1] * e.conj();
                }
                row
            })
            .collect()
    }

    /// Value and gradient of the real part.
    pub fn eval_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let pw = self.powers(theta);
        let mut v = 0.0;
        let mut g = vec![0.0; self.n];
        for (idx, c) in self.coeffs.iter().enumerate() {
            if *c == C64::new(0.0, 0.0) {
                continue;
            }
            let mut e = *c;
            let mut r = idx;
            let mut digits = vec![0usize; self.n];
            for d in (0..self.n).rev() {
                digits[d] = r % self.side();
                r /= self.side();
            }
            for (d, dg) in digits.iter().enumerate() {
                e *= pw[d][*dg];
            }
            v += e.re;
            for (d, dg) in digits.iter().enumerate() {
                let k = *dg as f64 - self.half as f64;
                g[d] -= k * e.im;
            }
        }
        (v, g)
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        self.eval_grad(theta).0
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[self.index(&vec![0; self.n]).unwrap_or(0)].re
    }
}

/// `F` on [`whitney::angle_grid`] and optionally `d_omega_j F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// `values[grid point][i]`.
    pub values: Vec<Vec<f64>>,
    /// `d_omega[j][grid point][i]`.
    pub d_omega: Option<Vec<Vec<Vec<f64>>>>,
}

/// Angle-parametrized Lagrangian graphs `{(phi, F(phi, omega))}`.
pub trait LagrangianFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn graph(&self, omega: &[f64], grid: usize, derivatives: bool) -> Result<Graph>;
}

/// A family given in closed form with its `omega`-derivative `df(phi, omega, j)`.
pub struct FnFamily<F, D>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    D: Fn(&[f64], &[f64], usize) -> Vec<f64>,
{
    pub n: usize,
    pub f: F,
    pub df: D,
}

impl<F, D> LagrangianFamily for FnFamily<F, D>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync,
    D: Fn(&[f64], &[f64], usize) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.n
    }
    fn graph(&self, omega: &[f64], grid: usize, derivatives: bool) -> Result<Graph> {
        let phis = whitney::angle_grid(self.n, grid);
        let values = phis.iter().map(|p| (self.f)(p, omega)).collect();
        let d_omega = derivatives.then(|| (0..self.n).map(|j| phis.iter().map(|p| (self.df)(p, omega, j)).collect()).collect());
        Ok(Graph { values, d_omega })
    }
}

/// Tori `(theta + u(theta, omega), z0(omega) + V(theta, omega))` from
/// Whitney-extended jets, re-parametrized by the angle `phi = theta + u`.
pub struct TorusFamily {
    pub n: usize,
    pub h0: IntegrableHamiltonian,
    /// `u_1..u_n` then `V_1..V_n`.
    pub components: Vec<Assembled>,
    pub angle_grid: usize,
}

/// Jet and extension settings of [`torus_family`].
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyBuild {
    pub grid: usize,
    pub radius: f64,
    pub nodes: usize,
    pub max_order: usize,
    pub floor: f64,
    pub c0: f64,
    pub constants: JetConstants,
    pub extend: ExtendConfig,
}

impl Default for FamilyBuild {
    fn default() -> Self {
        FamilyBuild {
            grid: 17,
            radius: 5e-4,
            nodes: 12,
            max_order: 3,
            floor: 1e-12,
            c0: 0.5,
            constants: JetConstants { a: 1.0, c1: 1.0, c2: 1.0, rho: 2.0, rho_prime: 6.0 },
            extend: ExtendConfig::default(),
        }
    }
}

/// Per-component angle jets on the sample set of the torus jets.
pub fn angle_jets(jets: &[TorusJet], grid: usize, constants: JetConstants) -> Result<Vec<AngleJet>> {
    let first = jets.first().ok_or(NormalFormError::InvalidInput("no torus jets"))?;
    let n = first.omega.len();
    let single: Vec<Vec<AngleJet>> = jets
        .iter()
        .map(|tj| {
            (0..n)
                .map(|i| AngleJet::from_torus_jet(tj, grid, i, constants))
                .chain((0..n).map(|i| action_jet(tj, grid, i, constants)))
                .collect::<core::result::Result<Vec<_>, _>>()
        })
        .collect::<core::result::Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(2 * n);
    for c in 0..2 * n {
        let base = &single[0][c];
        let points: Vec<Vec<f64>> = single.iter().map(|s| s[c].points[0].clone()).collect();
        let values: Vec<Vec<Vec<f64>>> = single.iter().map(|s| s[c].values[0].clone()).collect();
        out.push(AngleJet::new(n, grid, points, base.m_max, values, constants)?);
    }
    Ok(out)
}

fn action_jet(tj: &TorusJet, grid: usize, i: usize, constants: JetConstants) -> core::result::Result<AngleJet, WhitneyError> {
    let n = tj.omega.len();
    let m_max = tj.table.orders.iter().map(|b| b.iter().sum::<usize>()).max().unwrap_or(0);
    let orders = math::multi_indices(n, m_max);
    let cells = grid.pow(n as u32);
    let mut vals = Vec::with_capacity(orders.len());
    for beta in &orders {
        let row: Option<Vec<f64>> = (0..cells).map(|t| tj.v(beta, t, i)).collect();
        vals.push(row.ok_or(WhitneyError::InvalidInput("torus jet lacks an order"))?);
    }
    AngleJet::new(n, grid, vec![tj.omega.clone()], m_max, vec![vals], constants)
}

/// Torus jets at each frequency, their Fourier-weighted Whitney extensions
/// and the assembled family.
#[allow(clippy::too_many_arguments)]
pub fn torus_family(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omegas: &[Vec<f64>],
    schedule: &KamSchedule,
    cfg: &EngineConfig,
    mode: Mode,
    build: &FamilyBuild,
) -> Result<(TorusFamily, Vec<TorusJet>)> {
    let n = h0.n();
    let req = JetRequest {
        thetas: whitney::angle_grid(n, build.grid),
        radius: build.radius,
        nodes: build.nodes,
        max_order: build.max_order,
        floor: build.floor,
    };
    let jets = omegas.iter().map(|om| torus_jet(h0, h1, om, schedule, cfg, mode, &req)).collect::<core::result::Result<Vec<_>, _>>()?;
    let family = family_from_jets(h0, &jets, build)?;
    Ok((family, jets))
}

pub fn family_from_jets(h0: &IntegrableHamiltonian, jets: &[TorusJet], build: &FamilyBuild) -> Result<TorusFamily> {
    let n = h0.n();
    let mut components = Vec::with_capacity(2 * n);
    for aj in angle_jets(jets, build.grid, build.constants)? {
        let modes = whitney::fourier_weight(&aj, build.c0)?;
        let ext = whitney::extend_modes(&modes, &build.extend)?;
        components.push(whitney::assemble(&modes, ext)?);
    }
    Ok(TorusFamily { n, h0: h0.clone(), components, angle_grid: build.grid })
}

impl TorusFamily {
    /// Trigonometric polynomials of `d_omega^beta u` and `d_omega^beta V` at `omega`.
    pub fn slice_polys(&self, omega: &[f64], beta: &[usize]) -> Vec<TrigPoly> {
        self.components.iter().map(|c| TrigPoly::from_pairs(self.n, self.angle_grid / 2, &c.coefficients(omega, beta, 1e-3))).collect()
    }

    /// `theta` with `theta + u(theta) = phi`.
    pub fn solve_angle(u: &[TrigPoly], phi: &[f64]) -> Result<Vec<f64>> {
        let mut th = phi.to_vec();
        for _ in 0..200 {
            let next: Vec<f64> = phi.iter().zip(u).map(|(p, ui)| p - ui.eval(&th)).collect();
            let step = next.iter().zip(&th).map(|(a, b)| math::abs(a - b)).fold(0.0, f64::max);
            th = next;
            if step <= 1e-15 {
                return Ok(th);
            }
        }
        Err(NormalFormError::AngleSolve)
    }
}

impl LagrangianFamily for TorusFamily {
    fn dim(&self) -> usize {
        self.n
    }
    fn graph(&self, omega: &[f64], grid: usize, derivatives: bool) -> Result<Graph> {
        let n = self.n;
        let polys = self.slice_polys(omega, &vec![0; n]);
        let (u, v) = polys.split_at(n);
        let z0 = legendre_point(&self.h0, omega)?;
        let phis = whitney::angle_grid(n, grid);
        let thetas = phis.iter().map(|phi| Self::solve_angle(u, phi)).collect::<Result<Vec<_>>>()?;
        let values = thetas.iter().map(|th| z0.iter().zip(v).map(|(z, vi)| z + vi.eval(th)).collect()).collect();
        if !derivatives {
            return Ok(Graph { values, d_omega: None });
        }
        // grad H0(z0) = omega gives d z0 / d omega = Hess^{-1}
        let dz0 = self.h0.hessian(&z0).inverse().ok_or(NormalFormError::GeneratingDegenerate { defect: f64::INFINITY })?;
        let dpolys: Vec<Vec<TrigPoly>> = (0..n)
            .map(|j| {
                let mut e = vec![0usize; n];
                e[j] = 1;
                self.slice_polys(omega, &e)
            })
            .collect();
        let mut d_omega = vec![Vec::with_capacity(thetas.len()); n];
        for th in &thetas {
            let ug: Vec<Vec<f64>> = u.iter().map(|p| p.eval_grad(th).1).collect();
            let vg: Vec<Vec<f64>> = v.iter().map(|p| p.eval_grad(th).1).collect();
            let mut a = Mat::identity(n);
            for r in 0..n {
                for c in 0..n {
                    a.set(r, c, a.get(r, c) + ug[r][c]);
                }
            }
            for j in 0..n {
                let du: Vec<f64> = dpolys[j][..n].iter().map(|p| -p.eval(th)).collect();
                // theta + u(theta, omega) = phi gives (Id + D_theta u) d theta = -d_omega u
                let dth = a.solve(&du).ok_or(NormalFormError::AngleSolve)?;
                let row: Vec<f64> = (0..n)
                    .map(|i| dz0.get(i, j) + dpolys[j][n + i].eval(th) + (0..n).map(|b| vg[i][b] * dth[b]).sum::<f64>())
                    .collect();
                d_omega[j].push(row);
            }
        }
        Ok(Graph { values, d_omega: Some(d_omega) })
    }
}

/// `psi(x) = Q(x) + <x, R>` at one frequency, with `Q` the periodic potential
/// of the graph normalized by `Q(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratingSlice {
    pub omega: Vec<f64>,
    pub r: Vec<f64>,
    pub q: TrigPoly,
    pub f: Vec<TrigPoly>,
    /// `d_omega_j Q`, when derivatives were requested.
    pub dq: Vec<TrigPoly>,
    /// `dR / domega`, when derivatives were requested.
    pub dr: Option<Mat>,
    /// Largest curl `d_i F_j - d_j F_i` on the grid.
    pub curl_defect: f64,
    /// Largest `|grad psi - F|` on the grid.
    pub grad_defect: f64,
}

impl GeneratingSlice {
    pub fn psi(&self, x: &[f64]) -> f64 {
        self.q.eval(x) + math::dot(x, &self.r)
    }

    pub fn grad_psi(&self, x: &[f64]) -> Vec<f64> {
        let (_, g) = self.q.eval_grad(x);
        g.iter().zip(&self.r).map(|(a, b)| a + b).collect()
    }

    pub fn field(&self, x: &[f64]) -> Vec<f64> {
        self.f.iter().map(|p| p.eval(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// `t -> t x`.
    Radial,
    /// Along `e_1`, then `e_2`, and so on.
    AxisOrdered,
}

/// `int_path <F, dx>` from 0 to `x` by Gauss–Legendre on the interpolated graph.
pub fn line_potential(slice: &GeneratingSlice, x: &[f64], path: Path, nodes: usize) -> f64 {
    let (t, w) = math::gauss_legendre_on(nodes, 0.0, 1.0);
    match path {
        Path::Radial => t.iter().zip(&w).map(|(ti, wi)| {
            let p: Vec<f64> = x.iter().map(|v| ti * v).collect();
            wi * math::dot(&slice.field(&p), x)
        }).sum(),
        Path::AxisOrdered => {
            let mut total = 0.0;
            let mut base = vec![0.0; x.len()];
            for j in 0..x.len() {
                for (ti, wi) in t.iter().zip(&w) {
                    let mut p = base.clone();
                    p[j] = ti * x[j];
                    total += wi * x[j] * slice.field(&p)[j];
                }
                base[j] = x[j];
            }
            total
        }
    }
}

/// Mean and normalized periodic potential of a gradient field given by its
/// Fourier coefficients: `F_k = i k Q_k`, `Q(0) = 0`.
fn potential(f: &[TrigPoly]) -> (Vec<f64>, TrigPoly) {
    let n = f.len();
    let r: Vec<f64> = f.iter().map(|p| p.mean()).collect();
    let mut q = TrigPoly::zeros(n, f[0].half);
    for idx in 0..q.coeffs.len() {
        let k = q.mode(idx);
        let k2: f64 = k.iter().map(|v| (*v * *v) as f64).sum();
        if k2 == 0.0 {
            continue;
        }
        let kf: C64 = k.iter().zip(f).map(|(kj, fj)| fj.coeffs[idx] * *kj as f64).sum();
        q.coeffs[idx] = C64::new(0.0, -1.0) * kf / k2;
    }
    let q0 = q.eval(&vec![0.0; n]);
    if let Some(i) = q.index(&vec![0; n]) {
        q.coeffs[i] -= q0;
    }
    (r, q)
}

/// Largest `|d_a F_b - d_b F_a|` on the grid.
fn curl_defect(f: &[TrigPoly], grid: usize) -> f64 {
    let n = f.len();
    let mut worst = 0.0f64;
    for a in 0..n {
        for b in (a + 1)..n {
            let mut c = TrigPoly::zeros(n, f[0].half);
            for idx in 0..c.coeffs.len() {
                let k = c.mode(idx);
                c.coeffs[idx] = (f[b].coeffs[idx] * k[a] as f64 - f[a].coeffs[idx] * k[b] as f64) * C64::new(0.0, 1.0);
            }
            for th in whitney::angle_grid(n, grid) {
                worst = worst.max(math::abs(c.eval(&th)));
            }
        }
    }
    worst
}

pub fn generating_slice(family: &dyn LagrangianFamily, omega: &[f64], grid: usize, lagrange_tol: f64, derivatives: bool) -> Result<GeneratingSlice> {
    let n = family.dim();
    if grid % 2 == 0 || grid < 3 {
        return Err(NormalFormError::InvalidInput("grid must be odd and at least 3"));
    }
    let g = family.graph(omega, grid, derivatives)?;
    let column = |vals: &[Vec<f64>], j: usize| -> TrigPoly { TrigPoly::from_grid(n, grid, &vals.iter().map(|v| v[j]).collect::<Vec<_>>()) };
    let f: Vec<TrigPoly> = (0..n).map(|j| column(&g.values, j)).collect();
    let (r, q) = potential(&f);
    let mut dq = Vec::new();
    let mut dr = None;
    if let Some(d) = &g.d_omega {
        let mut m = Mat::zeros(n);
        for (j, dj) in d.iter().enumerate() {
            let fj: Vec<TrigPoly> = (0..n).map(|i| column(dj, i)).collect();
            let (rj, qj) = potential(&fj);
            for i in 0..n {
                m.set(i, j, rj[i]);
            }
            dq.push(qj);
        }
        dr = Some(m);
    }
    let mut grad_defect = 0.0f64;
    if lagrange_tol.is_finite() {
        for (t, th) in whitney::angle_grid(n, grid).iter().enumerate() {
            let (_, gq) = q.eval_grad(th);
            for j in 0..n {
                grad_defect = grad_defect.max(math::abs(gq[j] + r[j] - g.values[t][j]));
            }
        }
    }
    let curl = if lagrange_tol.is_finite() { curl_defect(&f, grid) } else { 0.0 };
    if curl > lagrange_tol {
        return Err(NormalFormError::NotLagrangian { defect: curl, tol: lagrange_tol });
    }
    Ok(GeneratingSlice { omega: omega.to_vec(), r, q, f, dq, dr, curl_defect: curl, grad_defect })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalFormConfig {
    pub grid: usize,
    pub lagrange_tol: f64,
    /// Half-width of the certified inversion box around each grid frequency.
    pub inversion_radius: f64,
}

impl Default for NormalFormConfig {
    fn default() -> Self {
        NormalFormConfig { grid: 17, lagrange_tol: 1e-8, inversion_radius: 1e-3 }
    }
}

/// Potential data on the sampled frequency grid.
pub struct GeneratingData {
    pub family: Box<dyn LagrangianFamily>,
    pub cfg: NormalFormConfig,
    pub slices: Vec<GeneratingSlice>,
}

impl GeneratingData {
    pub fn slice(&self, omega: &[f64], derivatives: bool) -> Result<GeneratingSlice> {
        generating_slice(self.family.as_ref(), omega, self.cfg.grid, f64::INFINITY, derivatives)
    }

    /// The action map `R(omega)`.
    pub fn action(&self, omega: &[f64]) -> Result<Vec<f64>> {
        Ok(self.slice(omega, false)?.r)
    }
}

pub fn generating_potential(family: Box<dyn LagrangianFamily>, omegas: &[Vec<f64>], cfg: &NormalFormConfig) -> Result<GeneratingData> {
    if omegas.is_empty() {
        return Err(NormalFormError::InvalidInput("empty frequency grid"));
    }
    let slices = omegas
        .iter()
        .map(|om| generating_slice(family.as_ref(), om, cfg.grid, cfg.lagrange_tol, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratingData { family, cfg: cfg.clone(), slices })
}

/// One certified inversion center.
#[derive(Debug, Clone, PartialEq)]
pub struct Center {
    pub omega: Vec<f64>,
    pub action: Vec<f64>,
    /// `dR/domega` at the center.
    pub jacobian: Mat,
    pub inverse: Mat,
}

/// The exact symplectic map `chi` and the transformed Hamiltonian.
pub struct NormalForm {
    pub data: GeneratingData,
    pub ham: Hamiltonian,
    pub centers: Vec<Center>,
    /// `E_kappa`: actions of the grid frequencies.
    pub e_kappa: Vec<Vec<f64>>,
    /// Largest `|d_x d_I (Phi - <x, I>)|` row sum seen at the centers.
    pub twist_defect: f64,
}

/// The slice at `omega(I)` with its `omega`-derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Fiber {
    pub action: Vec<f64>,
    pub omega: Vec<f64>,
    pub slice: GeneratingSlice,
    /// `d_omega Q` as one polynomial per direction.
    pub dq_domega: Vec<TrigPoly>,
    /// `d omega / d I`.
    pub domega_di: Mat,
}

pub fn build_chi(data: GeneratingData, ham: &Hamiltonian) -> Result<NormalForm> {
    let n = ham.n();
    let mut centers = Vec::with_capacity(data.slices.len());
    let mut twist_defect = 0.0f64;
    for s in &data.slices {
        let jac = s.dr.clone().ok_or(NormalFormError::InvalidInput("slice without derivatives"))?;
        let dq = &s.dq;
        let inverse = jac.inverse().ok_or(NormalFormError::GeneratingDegenerate { defect: f64::INFINITY })?;
        // |Id - Phi_I| = |d_x d_I Q| on the angle grid
        for th in whitney::angle_grid(n, data.cfg.grid) {
            let grads: Vec<Vec<f64>> = dq.iter().map(|p| p.eval_grad(&th).1).collect();
            for a in 0..n {
                let mut row = 0.0;
                for b in 0..n {
                    let v: f64 = (0..n).map(|j| grads[j][a] * inverse.get(j, b)).sum();
                    row += math::abs(v);
                }
                twist_defect = twist_defect.max(row);
            }
        }
        centers.push(Center { omega: s.omega.clone(), action: s.r.clone(), jacobian: jac, inverse });
    }
    if !(twist_defect < 1.0) {
        return Err(NormalFormError::GeneratingDegenerate { defect: twist_defect });
    }
    let e_kappa = centers.iter().map(|c| c.action.clone()).collect();
    let nf = NormalForm { data, ham: ham.clone(), centers, e_kappa, twist_defect };
    // certify the near-identity inversion on a box around every center
    for c in &nf.centers {
        let rad = nf.data.cfg.inversion_radius;
        let samples: Vec<Vec<f64>> = (0..(1usize << n))
            .map(|corner| (0..n).map(|j| c.omega[j] + if corner >> j & 1 == 1 { rad } else { -rad }).collect())
            .chain(core::iter::once(c.omega.clone()))
            .collect();
        let domain = NearIdentityDomain { samples, h: rad, upsilon: 0.1 };
        let big_f = nf.near_identity_map(c);
        invert_near_identity(&big_f, &domain, &c.omega, None).map_err(NormalFormError::InversionFailure)?;
    }
    Ok(nf)
}

impl NormalForm {
    /// `F(u) = u - omega_c - M^{-1}(R(u) - R(omega_c))`, so `u - F(u) = w`
    /// solves `R(u) = R(omega_c) + M (w - omega_c)`.
    fn near_identity_map<'a>(&'a self, c: &'a Center) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
        move |u: &[f64]| {
            let r = self.data.action(u).unwrap_or_else(|_| vec![f64::NAN; u.len()]);
            let d: Vec<f64> = r.iter().zip(&c.action).map(|(a, b)| a - b).collect();
            let md = c.inverse.mul_vec(&d);
            u.iter().zip(&c.omega).zip(&md).map(|((ui, oi), mi)| ui - oi - mi).collect()
        }
    }

    fn nearest_center(&self, action: &[f64]) -> &Center {
        let dist = |c: &Center| c.action.iter().zip(action).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = &self.centers[0];
        for c in &self.centers {
            if dist(c) < dist(best) {
                best = c;
            }
        }
        best
    }

    /// `omega(I)`, the inverse of the action map.
    pub fn omega_of(&self, action: &[f64]) -> Result<Vec<f64>> {
        let c = self.nearest_center(action);
        let d: Vec<f64> = action.iter().zip(&c.action).map(|(a, b)| a - b).collect();
        let w: Vec<f64> = c.omega.iter().zip(c.inverse.mul_vec(&d)).map(|(o, m)| o + m).collect();
        // the hypotheses were checked on the box at construction
        let domain = NearIdentityDomain { samples: Vec::new(), h: self.data.cfg.inversion_radius, upsilon: 0.1 };
        let big_f = self.near_identity_map(c);
        let inv = invert_near_identity(&big_f, &domain, &w, Some(&w)).map_err(NormalFormError::InversionFailure)?;
        Ok(inv.point)
    }

    pub fn fiber(&self, action: &[f64]) -> Result<Fiber> {
        let omega = self.omega_of(action)?;
        let slice = self.data.slice(&omega, true)?;
        let jac = slice.dr.clone().ok_or(NormalFormError::InvalidInput("slice without derivatives"))?;
        let domega_di = jac.inverse().ok_or(NormalFormError::GeneratingDegenerate { defect: f64::INFINITY })?;
        let dq_domega = slice.dq.clone();
        Ok(Fiber { action: action.to_vec(), omega, slice, dq_domega, domega_di })
    }

    pub fn chi(&self, phi: &[f64], action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.fiber(action)?.chi(phi)
    }

    pub fn h_tilde(&self, phi: &[f64], action: &[f64]) -> Result<f64> {
        let (th, j) = self.chi(phi, action)?;
        Ok(self.ham.value(&th, &j))
    }

    /// `K(I) = H~(0, I)`.
    pub fn k(&self, action: &[f64]) -> Result<f64> {
        self.h_tilde(&vec![0.0; action.len()], action)
    }

    /// Normal-form action of an original point: `I = J - grad_x Q(theta, omega(I))`.
    pub fn action_of(&self, theta: &[f64], j: &[f64]) -> Result<Vec<f64>> {
        let mut action = j.to_vec();
        for _ in 0..50 {
            let omega = self.omega_of(&action)?;
            let s = self.data.slice(&omega, false)?;
            let (_, g) = s.q.eval_grad(theta);
            let next: Vec<f64> = j.iter().zip(&g).map(|(a, b)| a - b).collect();
            let step = next.iter().zip(&action).map(|(a, b)| math::abs(a - b)).fold(0.0, f64::max);
            action = next;
            if step <= 1e-14 {
                return Ok(action);
            }
        }
        Err(NormalFormError::AngleSolve)
    }

    /// `|R|` and centered `I`-differences of `R` over `E_kappa` and an angle grid.
    pub fn flatness(&self, angle_grid: usize, h: f64) -> Result<Flatness> {
        let n = self.ham.n();
        let phis = whitney::angle_grid(n, angle_grid);
        let mut out = Flatness { max_r: 0.0, max_dr: 0.0 };
        for e in &self.e_kappa {
            let fib = self.fiber(e)?;
            let r0 = fib.remainder_on(&self.ham, &phis)?;
            out.max_r = out.max_r.max(r0.iter().fold(0.0, |m, v| m.max(math::abs(*v))));
            for j in 0..n {
                let mut p = e.clone();
                let mut m = e.clone();
                p[j] += h;
                m[j] -= h;
                let rp = self.fiber(&p)?.remainder_on(&self.ham, &phis)?;
                let rm = self.fiber(&m)?.remainder_on(&self.ham, &phis)?;
                for (a, b) in rp.iter().zip(&rm) {
                    out.max_dr = out.max_dr.max(math::abs(a - b) / (2.0 * h));
                }
            }
        }
        Ok(out)
    }

    /// `max |D chi^T J D chi - J|` by central differences at the given points.
    pub fn symplectic_defect(&self, points: &[(Vec<f64>, Vec<f64>)], h: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for (phi, action) in points {
            let n = phi.len();
            let base = self.fiber(action)?;
            let mut cols = Vec::with_capacity(2 * n);
            for k in 0..2 * n {
                let shift = |s: f64| {
                    let mut p = phi.clone();
                    let mut a = action.clone();
                    if k < n {
                        p[k] += s;
                        base.chi(&p)
                    } else {
                        a[k - n] += s;
                        self.chi(&p, &a)
                    }
                };
                let (tp, jp) = shift(h)?;
                let (tm, jm) = shift(-h)?;
                let col: Vec<f64> = tp.iter().zip(&tm).chain(jp.iter().zip(&jm)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                cols.push(col);
            }
            let cc: Vec<Vec<C64>> = cols.iter().map(|c| c.iter().map(|v| C64::new(*v, 0.0)).collect()).collect();
            worst = worst.max(crate::kam::symplectic_form_defect(&cc, n));
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flatness {
    pub max_r: f64,
    pub max_dr: f64,
}

impl Fiber {
    /// `d_I Q(x, omega(I))`.
    fn dq_daction(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let dq: Vec<f64> = self.dq_domega.iter().map(|p| p.eval(x)).collect();
        (0..n).map(|b| (0..n).map(|j| dq[j] * self.domega_di.get(j, b)).sum()).collect()
    }

    /// `(theta, J)` with `phi = theta + d_I Q(theta)` and `J = I + grad_x Q(theta)`.
    pub fn chi(&self, phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut th = phi.to_vec();
        let mut converged = false;
        for _ in 0..200 {
            let d = self.dq_daction(&th);
            let next: Vec<f64> = phi.iter().zip(&d).map(|(p, di)| p - di).collect();
            let step = next.iter().zip(&th).map(|(a, b)| math::abs(a - b)).fold(0.0, f64::max);
            th = next;
            if step <= 1e-15 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(NormalFormError::AngleSolve);
        }
        let (_, g) = self.slice.q.eval_grad(&th);
        let j = self.action.iter().zip(&g).map(|(a, b)| a + b).collect();
        Ok((th, j))
    }

    /// `R(phi, I) = H(chi(phi, I)) - H(chi(0, I))` at the given angles.
    pub fn remainder_on(&self, ham: &Hamiltonian, phis: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (t0, j0) = self.chi(&vec![0.0; self.action.len()])?;
        let k = ham.value(&t0, &j0);
        phis.iter()
            .map(|p| {
                let (t, j) = self.chi(p)?;
                Ok(ham.value(&t, &j) - k)
            })
            .collect()
    }
}

/// Constants of the flatness estimate for `d_phi^alpha d_I^beta R`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityParams {
    pub kappa: f64,
    pub a: f64,
    pub c1: f64,
    pub c2: f64,
    pub rho: f64,
    pub tau: f64,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
}

impl StabilityParams {
    /// `rho' = rho (tau + 1) + 1`.
    pub fn rho_prime(&self) -> f64 {
        self.rho * (self.tau + 1.0) + 1.0
    }

    /// `ln(kappa A C1^|alpha| (C2/kappa)^|beta| alpha!^rho beta!^rho')`.
    pub fn ln_prefactor(&self) -> f64 {
        let a: usize = self.alpha.iter().sum();
        let b: usize = self.beta.iter().sum();
        math::ln(self.kappa * self.a)
            + a as f64 * math::ln(self.c1)
            + b as f64 * math::ln(self.c2 / self.kappa)
            + self.rho * math::ln(math::multi_factorial(&self.alpha))
            + self.rho_prime() * math::ln(math::multi_factorial(&self.beta))
    }

    fn scaled_distance(&self, d: f64) -> f64 {
        self.c2 * d / self.kappa
    }
}

/// Minimum over `m <= m_max` of the Taylor bound
/// `prefactor (C2 d / kappa)^m m!^{rho'-1}`; returns the value and the minimizer.
pub fn stability_bound_discrete(d: f64, p: &StabilityParams, m_max: usize) -> (f64, usize) {
    let s = p.rho_prime() - 1.0;
    let lx = math::ln(p.scaled_distance(d));
    let mut best = (f64::INFINITY, 0usize);
    for m in 0..=m_max {
        let v = m as f64 * lx + s * math::ln_factorial(m);
        if v < best.0 {
            best = (v, m);
        }
    }
    (math::exp(p.ln_prefactor() + best.0), best.1)
}

/// Stirling closed form of [`stability_bound_discrete`]:
/// `prefactor min(1, (2 pi m*)^{s/2} e^{-s m*})` (prefactor alone once `m* <= 1`) with `m* = (C2 d / kappa)^{-1/s}`
/// and `s = rho(tau + 1)`, i.e. `exp(-(C2 d / (kappa s^s))^{-1/s})` up to the
/// polynomial factor.
pub fn stability_bound(d: f64, p: &StabilityParams) -> f64 {
    if !(d > 0.0) {
        return 0.0;
    }
    let s = p.rho_prime() - 1.0;
    let m_star = math::powf(p.scaled_distance(d), -1.0 / s);
    // for m* <= 1 the discrete minimum sits at m = 0
    let ln_core = if m_star <= 1.0 { 0.0 } else { (0.5 * s * math::ln(2.0 * PI * m_star) - s * m_star).min(0.0) };
    math::exp(p.ln_prefactor() + ln_core)
}

/// The bare exponential `exp(-(C2 d / (kappa s^s))^{-1/s})`.
pub fn stability_exponential(d: f64, p: &StabilityParams) -> f64 {
    let s = p.rho_prime() - 1.0;
    math::exp(-math::powf(p.scaled_distance(d) / math::powf(s, s), -1.0 / s))
}

/// Symmetric second-order steps composed to eighth order.
pub const YOSHIDA8: [f64; 8] = [
    1.0 - 2.0 * (-1.61582374150097 - 2.44699182370524 - 0.00716989419708120 + 2.44002732616735 + 0.157739928123617 + 1.82020630970714 + 1.04242620869991),
    -1.61582374150097,
    -2.44699182370524,
    -0.00716989419708120,
    2.44002732616735,
    0.157739928123617,
    1.82020630970714,
    1.04242620869991,
];

fn composition() -> Vec<f64> {
    let mut w: Vec<f64> = YOSHIDA8[1..].iter().rev().cloned().collect();
    w.push(YOSHIDA8[0]);
    w.extend(YOSHIDA8[1..].iter().cloned());
    w
}

/// Eighth-order symplectic integrator for `H = H0(J) + H1(theta, J)`:
/// leapfrog substeps when `H1` does not depend on `J`, implicit midpoint otherwise.
pub struct Integrator<'a> {
    pub ham: &'a Hamiltonian,
    pub h: f64,
    weights: Vec<f64>,
    separable: bool,
}

impl<'a> Integrator<'a> {
    pub fn new(ham: &'a Hamiltonian, h: f64) -> Self {
        Integrator { ham, h, weights: composition(), separable: ham.h1.max_degree() == 0 }
    }

    fn leapfrog(&self, th: &mut [f64], j: &mut [f64], dt: f64) {
        let g = self.ham.h1.grad_theta(th, j);
        for (ji, gi) in j.iter_mut().zip(&g) {
            *ji -= 0.5 * dt * gi;
        }
        let v = self.ham.h0.gradient(j);
        for (ti, vi) in th.iter_mut().zip(&v) {
            *ti += dt * vi;
        }
        let g = self.ham.h1.grad_theta(th, j);
        for (ji, gi) in j.iter_mut().zip(&g) {
            *ji -= 0.5 * dt * gi;
        }
    }

    fn midpoint(&self, th: &mut [f64], j: &mut [f64], dt: f64) {
        let (t0, j0) = (th.to_vec(), j.to_vec());
        let (mut t1, mut j1) = (t0.clone(), j0.clone());
        for _ in 0..100 {
            let tm: Vec<f64> = t0.iter().zip(&t1).map(|(a, b)| 0.5 * (a + b)).collect();
            let jm: Vec<f64> = j0.iter().zip(&j1).map(|(a, b)| 0.5 * (a + b)).collect();
            let (dt_th, dt_j) = self.ham.vector_field(&tm, &jm);
            let nt: Vec<f64> = t0.iter().zip(&dt_th).map(|(a, b)| a + dt * b).collect();
            let nj: Vec<f64> = j0.iter().zip(&dt_j).map(|(a, b)| a + dt * b).collect();
            let step = nt.iter().zip(&t1).chain(nj.iter().zip(&j1)).map(|(a, b)| math::abs(a - b)).fold(0.0, f64::max);
            t1 = nt;
            j1 = nj;
            if step <= 1e-16 {
                break;
            }
        }
        th.copy_from_slice(&t1);
        j.copy_from_slice(&j1);
    }

    pub fn step(&self, th: &mut [f64], j: &mut [f64]) {
        for w in &self.weights {
            if self.separable {
                self.leapfrog(th, j, w * self.h);
            } else {
                self.midpoint(th, j, w * self.h);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftConfig {
    pub t_max: f64,
    pub h_int: f64,
    pub samples: usize,
    /// Drift level that defines the onset time.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftTrace {
    pub times: Vec<f64>,
    /// `sup_{s <= t} |I(s) - I(0)|` at each sample time.
    pub drift: Vec<f64>,
    /// Largest relative energy error over all steps.
    pub energy_error: f64,
    pub onset: Option<f64>,
}

/// Integrates `H` from `chi(phi0, I0)` and tracks the normal-form action.
pub fn drift_experiment(nf: &NormalForm, phi0: &[f64], i0: &[f64], cfg: &DriftConfig) -> Result<DriftTrace> {
    if !(cfg.t_max > 0.0 && cfg.h_int > 0.0 && cfg.samples > 0) {
        return Err(NormalFormError::InvalidInput("drift needs positive T, step and sample count"));
    }
    let (mut th, mut j) = nf.chi(phi0, i0)?;
    let speed = math::norm2(&nf.ham.h0.gradient(&j));
    let limit = 0.01 / speed.max(1e-300);
    if cfg.h_int > limit {
        return Err(NormalFormError::StepTooLarge { h: cfg.h_int, limit });
    }
    let start = nf.action_of(&th, &j)?;
    let e0 = nf.ham.value(&th, &j);
    let scale = math::abs(e0).max(1e-300);
    let integ = Integrator::new(&nf.ham, cfg.h_int);
    let total = math::round(cfg.t_max / cfg.h_int) as usize;
    let per = (total / cfg.samples).max(1);
    let mut out = DriftTrace { times: Vec::new(), drift: Vec::new(), energy_error: 0.0, onset: None };
    let mut sup = 0.0f64;
    for step in 1..=total {
        integ.step(&mut th, &mut j);
        out.energy_error = out.energy_error.max(math::abs(nf.ham.value(&th, &j) - e0) / scale);
        if step % per == 0 || step == total {
            let a = nf.action_of(&th, &j)?;
            let d = a.iter().zip(&start).map(|(x, y)| math::abs(x - y)).fold(0.0, f64::max);
            sup = sup.max(d);
            let t = step as f64 * cfg.h_int;
            if out.onset.is_none() && sup > cfg.threshold {
                out.onset = Some(t);
            }
            out.times.push(t);
            out.drift.push(sup);
        }
    }
    Ok(out)
}

//! KAM iteration: the super-exponential parameter schedule, the affine-in-`I`
//! step with frequency correction, the iterated torus and its checks, and
//! `omega`-jets by Cauchy contour quadrature.
//!
//! Frequencies are carried as complex numbers throughout so that the same
//! code evaluates the torus at complex `omega` for the contour integrals.

use alloc::vec;
use alloc::vec::Vec;

use crate::fourier::{modes_in_ball, order, solve_homological_with, FourierError, FourierTaylor, Mono, C64, RESONANCE_FLOOR};
use crate::gevrey::{invert_near_identity, GevreyError, NearIdentityDomain};
use crate::math::{self, LibmComplex};
use crate::model::{member_jet_c, Hamiltonian, IntegrableHamiltonian, ModelError, Perturbation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KamError {
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("no admissible sigma above {min_sigma:e}")]
    MinSigma { min_sigma: f64 },
    #[error("cutoff equation has no root on the upper branch (rhs = {rhs}, n = {n})")]
    NoRoot { rhs: f64, n: usize },
    #[error("step condition ({which}) violated: ln lhs = {lhs}, ln rhs = {rhs}")]
    ConditionViolated { which: char, lhs: f64, rhs: f64 },
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error("frequency correction failed: {0}")]
    Inversion(#[from] GevreyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mean Hessian is singular")]
    SingularTwist,
    #[error("residual grew at two consecutive levels (level {level}, residual {residual:e})")]
    DivergenceDetected { level: usize, residual: f64 },
    #[error("contour radius {radius:e} exceeds the resonance clearance {limit:e}")]
    ContourTooLarge { radius: f64, limit: f64 },
}

pub const UPSILON: f64 = 1.0 / 54.0;
/// `1/2 - 3 upsilon`.
pub const UPSILON_TILDE: f64 = 4.0 / 9.0;

/// Solve `x - n ln x = rhs` on the branch `x >= n`.
pub fn solve_cutoff_rhs(rhs: f64, n: usize) -> Result<f64, KamError> {
    if n == 0 {
        return Ok(rhs);
    }
    let nf = n as f64;
    if !(rhs > nf) {
        return Err(KamError::NoRoot { rhs, n });
    }
    let mut x = rhs + nf * math::ln(rhs);
    for _ in 0..100 {
        let g = x - nf * math::ln(x) - rhs;
        let dx = g / (1.0 - nf / x);
        x -= dx;
        if math::abs(dx) <= 1e-15 * x {
            break;
        }
    }
    Ok(x)
}

/// `x = K sigma` with `K^n e^{-K sigma} = E`, given `ln E`.
pub fn solve_cutoff(sigma: f64, ln_e: f64, n: usize) -> Result<f64, KamError> {
    solve_cutoff_rhs(-ln_e - n as f64 * math::ln(sigma), n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub rho: f64,
    pub tau: f64,
    pub n: usize,
    pub kappa: f64,
    pub r0: f64,
    pub l1: f64,
    pub l2: f64,
    pub varsigma: f64,
    pub c1: f64,
    /// Starting value of the free constant `sigma`; halved until admissible.
    pub sigma: f64,
    /// `B = a0 L1^{-1/(rho-1)}`.
    pub a0: f64,
    pub eps_hat: f64,
    pub a_const: f64,
    pub b_const: f64,
    pub j_max: usize,
    pub min_sigma: f64,
    /// Real-analytic variant: `rho` is the auxiliary exponent,
    /// `s0 (1 - delta) = 20 sigma0` and `B = 1`.
    pub analytic: bool,
}

impl ScheduleParams {
    pub fn new(rho: f64, tau: f64, n: usize, kappa: f64, r0: f64) -> Self {
        ScheduleParams {
            rho,
            tau,
            n,
            kappa,
            r0,
            l1: 1.0,
            l2: 1.0,
            varsigma: 0.0,
            c1: 2.0,
            sigma: 0.1,
            a0: 4.0,
            eps_hat: 1.0,
            a_const: 1.0 / 64.0,
            b_const: 1.0 / 64.0,
            j_max: 20,
            min_sigma: 1e-6,
            analytic: false,
        }
    }
}

/// Auxiliary Gevrey exponent `(tau' - tau) / (tau + 1) + 1` of the analytic
/// case.
pub fn analytic_rho(tau: f64, tau_prime: f64) -> f64 {
    (tau_prime - tau) / (tau + 1.0) + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LevelFlags {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    /// `h_{j+1} <= (4/9) h_j`.
    pub decay: bool,
    /// `eps~_j <= eps_{j+1} / 2`.
    pub gap: bool,
}

impl LevelFlags {
    pub fn all(&self) -> bool {
        self.a && self.b && self.c && self.decay && self.gap
    }
}

/// One level of the schedule. Quantities that underflow are kept as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub j: usize,
    pub s: f64,
    pub sigma: f64,
    pub ln_r: f64,
    pub h: f64,
    pub ln_e: f64,
    pub x: f64,
    pub k: f64,
    pub ln_eta: f64,
    pub ln_eps: f64,
    pub ln_eps_tilde: f64,
    pub flags: LevelFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KamSchedule {
    pub params: ScheduleParams,
    /// The free constant actually used.
    pub sigma_free: f64,
    pub halvings: usize,
    pub sigma0: f64,
    pub delta: f64,
    pub big_b: f64,
    pub rho_prime: f64,
    pub levels: Vec<Level>,
}

impl KamSchedule {
    pub fn all_flags(&self) -> bool {
        self.levels.iter().all(|l| l.flags.all())
    }
    /// `h_{j+1} / h_j` for `j < j_max`.
    pub fn h_ratios(&self) -> Vec<f64> {
        self.levels.windows(2).map(|w| w[1].h / w[0].h).collect()
    }
    /// `(2/3)^{rho (tau + 1)}`.
    pub fn asymptotic_ratio(&self) -> f64 {
        math::powf(2.0 / 3.0, self.params.rho * (self.params.tau + 1.0))
    }
}

fn check_params(p: &ScheduleParams) -> Result<(), KamError> {
    if !(p.rho > 1.0) {
        return Err(KamError::InvalidParameter("rho must exceed 1"));
    }
    if !(p.tau > p.n as f64 - 1.0) {
        return Err(KamError::InvalidParameter("tau must exceed n - 1"));
    }
    let cap = math::powf(p.l2, -1.0 - p.varsigma);
    if !(p.kappa > 0.0 && p.kappa < cap) {
        return Err(KamError::InvalidParameter("kappa must lie in (0, L2^{-1-varsigma})"));
    }
    if !(p.r0 > 0.0 && p.r0 < cap) {
        return Err(KamError::InvalidParameter("r0 must lie in (0, L2^{-1-varsigma})"));
    }
    if !(p.c1 > 1.0) {
        return Err(KamError::InvalidParameter("c1 must exceed 1"));
    }
    if !(p.l1 > 0.0 && p.a0 > 0.0 && p.eps_hat > 0.0 && p.a_const > 0.0 && p.b_const > 0.0 && p.sigma > 0.0) {
        return Err(KamError::InvalidParameter("positive constants required"));
    }
    Ok(())
}

/// Build the schedule, halving `sigma` from its starting value until every
/// validity flag holds.
pub fn build_schedule(params: &ScheduleParams) -> Result<KamSchedule, KamError> {
    check_params(params)?;
    let mut sigma = params.sigma;
    let mut halvings = 0;
    while sigma >= params.min_sigma {
        if let Ok(s) = schedule_for_sigma(params, sigma, halvings) {
            if s.all_flags() {
                return Ok(s);
            }
        }
        sigma *= 0.5;
        halvings += 1;
    }
    Err(KamError::MinSigma { min_sigma: params.min_sigma })
}

/// Schedule for one fixed value of the free constant, flags unchecked.
pub fn schedule_for_sigma(p: &ScheduleParams, sigma: f64, halvings: usize) -> Result<KamSchedule, KamError> {
    check_params(p)?;
    let n = p.n;
    let nf = n as f64;
    let tp1 = p.tau + 1.0;
    let inv = 1.0 / (p.rho - 1.0);
    let delta = math::powf(2.0 / 3.0, p.rho - 1.0);
    let (sigma0, s0, big_b) = if p.analytic {
        (sigma, 20.0 * sigma / (1.0 - delta), 1.0)
    } else {
        let s0 = sigma / p.l1 * math::powf(math::ln(p.l1 + core::f64::consts::E), -(p.rho - 1.0));
        (s0, 5.0 * s0 / (1.0 - delta), p.a0 * math::powf(p.l1, -inv))
    };
    let b0 = 4.0 * big_b;
    let ln_c1 = math::ln(p.c1);
    let ln_kappa = math::ln(p.kappa);
    let ln_a = math::ln(p.a_const);
    let ln_b = math::ln(p.b_const);
    let ln_ups = math::ln(UPSILON);
    let ln_eps_hat = math::ln(p.eps_hat);
    let count = p.j_max + 2;
    let mut levels: Vec<Level> = Vec::with_capacity(count);
    let mut ln_r = math::ln(p.r0);
    let mut s = s0;
    let ln_tilde_pref = ln_eps_hat + ln_kappa + math::ln(p.r0) + tp1 * math::ln(sigma0);
    for j in 0..count {
        let sig = sigma0 * math::powi(delta, j as i32);
        let ln_e = -ln_c1 - big_b * math::powf(sig, -inv);
        let x = solve_cutoff(sig, ln_e, n)?;
        let k = x / sig;
        let h = 0.5 * p.kappa * math::powf(k, -tp1);
        let ln_eta = 0.5 * ln_e;
        let ln_eps = ln_eps_hat + ln_kappa + ln_r + tp1 * math::ln(sig) + ln_e;
        let ln_eps_tilde = ln_tilde_pref - b0 * math::powf(sig, -inv);
        // (a) eps <= a kappa eta r sigma^{tau+1}; (b) eps <= b upsilon h r
        let a_ok = ln_eps <= ln_a + ln_kappa + ln_eta + ln_r + tp1 * math::ln(sig);
        let b_ok = ln_eps <= ln_b + ln_ups + math::ln(h) + ln_r;
        let c_ok = h <= 0.5 * p.kappa * math::powf(k, -tp1) * (1.0 + 1e-12);
        levels.push(Level {
            j,
            s,
            sigma: sig,
            ln_r,
            h,
            ln_e,
            x,
            k,
            ln_eta,
            ln_eps,
            ln_eps_tilde,
            flags: LevelFlags { a: a_ok, b: b_ok, c: c_ok, decay: false, gap: false },
        });
        s -= 5.0 * sig;
        ln_r += ln_eta;
        let _ = nf;
    }
    for j in 0..count - 1 {
        let next_h = levels[j + 1].h;
        let next_eps = levels[j + 1].ln_eps;
        let l = &mut levels[j];
        l.flags.decay = next_h <= UPSILON_TILDE * l.h;
        l.flags.gap = l.ln_eps_tilde <= next_eps - core::f64::consts::LN_2;
    }
    levels.pop();
    Ok(KamSchedule {
        params: p.clone(),
        sigma_free: sigma,
        halvings,
        sigma0,
        delta,
        big_b,
        rho_prime: p.rho * (p.tau + 1.0) + 1.0,
        levels,
    })
}

/// Tuning knobs of the numerical step that the schedule does not fix.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Largest Fourier order kept anywhere in the iteration.
    pub k_cap: usize,
    /// Coefficients below this modulus are dropped after each operation.
    pub prune_tol: f64,
    pub lie_terms: usize,
    pub j_max: usize,
    pub floor: f64,
    /// Action radius used for residual norms; `None` means `r0`.
    pub r_measure: Option<f64>,
    /// Width of the parameter domain for the frequency inversion; `None`
    /// means `kappa`.
    pub inversion_h: Option<f64>,
    pub rk_steps: usize,
    /// Force this many steps (used for contour evaluations).
    pub fixed_levels: Option<usize>,
    /// Check conditions (a)-(c) of each step against the schedule.
    pub check_conditions: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k_cap: 24,
            prune_tol: 1e-40,
            lie_terms: 40,
            j_max: 12,
            floor: 1e-11,
            r_measure: None,
            inversion_h: None,
            rk_steps: 12,
            fixed_levels: None,
            check_conditions: true,
        }
    }
}

/// Domain and smallness data of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub s: f64,
    pub sigma: f64,
    pub r: f64,
    pub ln_eta: f64,
    /// Schedule cutoff `K`, possibly far beyond what is represented.
    pub k_cut: f64,
    /// Cutoff actually applied, `min(K, k_cap)`.
    pub k_trunc: usize,
    pub h: f64,
    /// Declared bound `ln eps` for `|H - N|`.
    pub ln_eps: f64,
    pub kappa: f64,
    pub tau: f64,
    pub a_const: f64,
    pub b_const: f64,
    pub r_measure: f64,
    pub inversion_h: f64,
}

impl StepParams {
    pub fn from_level(l: &Level, sched: &KamSchedule, cfg: &EngineConfig) -> Self {
        let p = &sched.params;
        let k_trunc = if l.k >= cfg.k_cap as f64 { cfg.k_cap } else { math::floor(l.k) as usize };
        StepParams {
            s: l.s,
            sigma: l.sigma,
            r: math::exp(l.ln_r),
            ln_eta: l.ln_eta,
            k_cut: l.k,
            k_trunc,
            h: l.h,
            ln_eps: l.ln_eps,
            kappa: p.kappa,
            tau: p.tau,
            a_const: p.a_const,
            b_const: p.b_const,
            r_measure: cfg.r_measure.unwrap_or(p.r0),
            inversion_h: cfg.inversion_h.unwrap_or(p.kappa),
        }
    }

    /// Conditions (a), (b), (c) on the declared bound.
    pub fn check(&self) -> Result<(), KamError> {
        let tp1 = self.tau + 1.0;
        let ln_r = math::ln(self.r);
        let rhs_a = math::ln(self.a_const) + math::ln(self.kappa) + self.ln_eta + ln_r + tp1 * math::ln(self.sigma);
        if self.ln_eps > rhs_a {
            return Err(KamError::ConditionViolated { which: 'a', lhs: self.ln_eps, rhs: rhs_a });
        }
        let rhs_b = math::ln(self.b_const) + math::ln(UPSILON) + math::ln(self.h) + ln_r;
        if self.ln_eps > rhs_b {
            return Err(KamError::ConditionViolated { which: 'b', lhs: self.ln_eps, rhs: rhs_b });
        }
        let cap = 0.5 * self.kappa * math::powf(self.k_cut, -tp1);
        if self.h > cap * (1.0 + 1e-12) {
            return Err(KamError::ConditionViolated { which: 'c', lhs: math::ln(self.h), rhs: math::ln(cap) });
        }
        Ok(())
    }
}

/// Sparse copy of an affine generator `F = f0(theta) + <f1(theta), I>` for
/// fast pointwise evaluation of its Hamiltonian vector field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    n: usize,
    modes: Vec<Vec<f64>>,
    f0: Vec<C64>,
    f1: Vec<Vec<C64>>,
}

struct FieldValue {
    a: Vec<C64>,
    b: Vec<C64>,
    /// `da[i][j] = d_theta_j d_I_i F`.
    da: Vec<Vec<C64>>,
    /// `db[j][l] = d_theta_l d_theta_j F`.
    db: Vec<Vec<C64>>,
}

impl FlowField {
    pub fn new(f: &FourierTaylor) -> Self {
        let n = f.n();
        let mut idx: Vec<Vec<i32>> = Vec::new();
        let mut f0 = Vec::new();
        let mut f1: Vec<Vec<C64>> = Vec::new();
        for (k, m, c) in f.terms() {
            let pos = match idx.iter().position(|x| *x == k) {
                Some(p) => p,
                None => {
                    idx.push(k.clone());
                    f0.push(C64::new(0.0, 0.0));
                    f1.push(vec![C64::new(0.0, 0.0); n]);
                    idx.len() - 1
                }
            };
            match m.deg {
                0 => f0[pos] += c,
                1 => f1[pos][m.vars[0] as usize] += c,
                _ => {}
            }
        }
        let modes = idx.iter().map(|k| k.iter().map(|v| *v as f64).collect()).collect();
        FlowField { n, modes, f0, f1 }
    }

    fn eval(&self, theta: &[C64], action: &[C64], with_jacobian: bool) -> FieldValue {
        let n = self.n;
        let z = C64::new(0.0, 0.0);
        let i1 = C64::new(0.0, 1.0);
        let mut v = FieldValue {
            a: vec![z; n],
            b: vec![z; n],
            da: if with_jacobian { vec![vec![z; n]; n] } else { Vec::new() },
            db: if with_jacobian { vec![vec![z; n]; n] } else { Vec::new() },
        };
        for (m, k) in self.modes.iter().enumerate() {
            let phase: C64 = k.iter().zip(theta).map(|(a, t)| t * *a).sum();
            let e = (i1 * phase).cexp();
            let mut base = self.f0[m];
            for i in 0..n {
                base += self.f1[m][i] * action[i];
            }
            let be = base * e;
            for i in 0..n {
                let fe = self.f1[m][i] * e;
                v.a[i] += fe;
                v.b[i] += i1 * k[i] * be;
                if with_jacobian {
                    for j in 0..n {
                        v.da[i][j] += i1 * k[j] * fe;
                        v.db[i][j] -= k[i] * k[j] * be;
                    }
                }
            }
        }
        v
    }

    /// Time-one flow with tangent vectors `(dtheta, dI)` carried along.
    /// The angle is `base + disp`; only the small displacement is updated.
    fn flow(&self, base: &[C64], theta: &mut [C64], action: &mut [C64], tangents: &mut [Vec<C64>], steps: usize) {
        let n = self.n;
        let dt = 1.0 / steps as f64;
        let nt = tangents.len();
        let want_j = nt > 0;
        let rhs = |d: &[C64], ac: &[C64], tg: &[Vec<C64>]| -> (Vec<C64>, Vec<C64>, Vec<Vec<C64>>) {
            let th: Vec<C64> = base.iter().zip(d).map(|(a, b)| a + b).collect();
            let v = self.eval(&th, ac, want_j);
            let dth = v.a.clone();
            let dac: Vec<C64> = v.b.iter().map(|x| -x).collect();
            let mut dtg = Vec::with_capacity(tg.len());
            for t in tg {
                let mut d = vec![C64::new(0.0, 0.0); 2 * n];
                for i in 0..n {
                    for j in 0..n {
                        d[i] += v.da[i][j] * t[j];
                        d[n + i] -= v.db[i][j] * t[j] + v.da[j][i] * t[n + j];
                    }
                }
                dtg.push(d);
            }
            (dth, dac, dtg)
        };
        for _ in 0..steps {
            let (k1t, k1a, k1g) = rhs(theta, action, tangents);
            let mid = |x: &[C64], k: &[C64], c: f64| -> Vec<C64> { x.iter().zip(k).map(|(a, b)| a + b * (c * dt)).collect() };
            let midg = |x: &[Vec<C64>], k: &[Vec<C64>], c: f64| -> Vec<Vec<C64>> {
                x.iter().zip(k).map(|(a, b)| mid(a, b, c)).collect()
            };
            let (k2t, k2a, k2g) = rhs(&mid(theta, &k1t, 0.5), &mid(action, &k1a, 0.5), &midg(tangents, &k1g, 0.5));
            let (k3t, k3a, k3g) = rhs(&mid(theta, &k2t, 0.5), &mid(action, &k2a, 0.5), &midg(tangents, &k2g, 0.5));
            let (k4t, k4a, k4g) = rhs(&mid(theta, &k3t, 1.0), &mid(action, &k3a, 1.0), &midg(tangents, &k3g, 1.0));
            let w = dt / 6.0;
            for i in 0..n {
                theta[i] += (k1t[i] + k2t[i] * 2.0 + k3t[i] * 2.0 + k4t[i]) * w;
                action[i] += (k1a[i] + k2a[i] * 2.0 + k3a[i] * 2.0 + k4a[i]) * w;
            }
            for t in 0..nt {
                for i in 0..2 * n {
                    tangents[t][i] += (k1g[t][i] + k2g[t][i] * 2.0 + k3g[t][i] * 2.0 + k4g[t][i]) * w;
                }
            }
        }
    }
}

/// One stage `Psi = X_F^1 o T_c`: translate the action by `c`, then follow
/// the time-one flow of the affine generator `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub generator: FourierTaylor,
    pub shift: Vec<C64>,
    /// `phi(omega) - omega` contributed by this stage.
    pub phi_shift: Vec<C64>,
    field: FlowField,
}

impl Stage {
    pub fn new(generator: FourierTaylor, shift: Vec<C64>, phi_shift: Vec<C64>) -> Self {
        let field = FlowField::new(&generator);
        Stage { generator, shift, phi_shift, field }
    }

    /// Apply to `(base + disp, action)`, updating `disp` and `action`.
    pub fn apply(&self, base: &[C64], disp: &mut [C64], action: &mut [C64], tangents: &mut [Vec<C64>], steps: usize) {
        for (a, c) in action.iter_mut().zip(&self.shift) {
            *a += c;
        }
        self.field.flow(base, disp, action, tangents, steps);
    }
}

/// Measured quantities of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// `|H - N|_{s, r}`.
    pub eps_measured: f64,
    /// Degree `<= 1` part of `H - N` on `(s, r_measure)` before the step.
    pub residual_in: f64,
    /// Same quantity after the step on `(s - 5 sigma, r_measure)`.
    pub residual_out: f64,
    /// `|P_+|_{s - 5 sigma, eta r}`.
    pub p_plus: f64,
    /// `eps^2 / (kappa r sigma^{tau+1}) + (eta^2 + K^n e^{-K sigma}) eps`.
    pub p_plus_template: f64,
    /// Generator bound on `|W (Phi - id)|`, `W = diag(1/sigma, 1/r)`.
    pub deformation: f64,
    /// `eps / (kappa r sigma^{tau+1})`.
    pub deformation_template: f64,
    pub phi_shift: f64,
    pub lie_terms: usize,
    pub k_trunc: usize,
    pub modes_kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub stage: Stage,
    pub hamiltonian: SplitHamiltonian,
    pub report: StepReport,
}

/// `N = e + <omega, I>` read off a series.
pub fn normal_part(h: &FourierTaylor, omega: &[C64]) -> FourierTaylor {
    let n = h.n();
    let zero = vec![0; n];
    let mut nf = FourierTaylor::zeros(n, 0, 1);
    nf.set(&zero, Mono::ONE, h.get(&zero, Mono::ONE));
    for (i, w) in omega.iter().enumerate() {
        nf.set(&zero, Mono::linear(i), *w);
    }
    nf
}

/// `|(H - N)_{deg <= 1}|_{s, r}`: what must vanish for `I = 0` to be an
/// invariant torus with frequency `omega`.
pub fn torus_residual(h: &FourierTaylor, omega: &[C64], s: f64, r: f64) -> Result<f64, KamError> {
    let p = h.sub(&normal_part(h, omega))?;
    Ok(p.clamp_degree(1).strip_sup_bound(s, r).value)
}

/// `H o X_F^1 = sum_k ad_F^k H / k!` with `ad_F G = {G, F}`.
pub fn lie_transform(h: &FourierTaylor, f: &FourierTaylor, k_cap: usize, tol: f64, max_terms: usize) -> Result<(FourierTaylor, usize), KamError> {
    let mut sum = h.clone();
    let mut term = h.clone();
    let mut used = 0;
    for k in 1..=max_terms {
        term = term.poisson(f, k_cap)?.scale(1.0 / k as f64).prune(tol);
        used = k;
        if term.is_zero() {
            break;
        }
        sum = sum.add(&term)?;
        if term.max_coef() < tol {
            break;
        }
    }
    Ok((sum.prune(tol), used))
}

fn is_real(omega: &[C64]) -> bool {
    omega.iter().all(|w| w.im == 0.0)
}

/// `H = e + <omega, I> + P` with the normal part kept apart, so that the
/// small remainder is never added to `O(1)` frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitHamiltonian {
    pub energy: C64,
    pub omega: Vec<C64>,
    pub pert: FourierTaylor,
}

impl SplitHamiltonian {
    pub fn new(h: &FourierTaylor, omega: &[C64]) -> Result<Self, KamError> {
        let nf = normal_part(h, omega);
        let pert = h.sub(&nf)?;
        let zero = vec![0; h.n()];
        Ok(SplitHamiltonian { energy: nf.get(&zero, Mono::ONE), omega: omega.to_vec(), pert })
    }

    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn to_series(&self) -> FourierTaylor {
        let n = self.n();
        let zero = vec![0; n];
        let mut nf = FourierTaylor::zeros(n, 0, 1);
        nf.set(&zero, Mono::ONE, self.energy);
        for (i, w) in self.omega.iter().enumerate() {
            nf.set(&zero, Mono::linear(i), *w);
        }
        nf.add(&self.pert).expect("same dimension")
    }

    /// `|P_{deg <= 1}|_{s, r}`.
    pub fn residual(&self, s: f64, r: f64) -> f64 {
        self.pert.clamp_degree(1).strip_sup_bound(s, r).value
    }
}

/// `(N + P) o X_F^1 - N` where `L_omega F = lf` is already known:
/// `P + sum_{k >= 1} ad_F^{k-1}(Y) / k!` with `Y = {P, F} - lf`.
fn lie_transform_split(
    pert: &FourierTaylor,
    f: &FourierTaylor,
    lf: &FourierTaylor,
    k_cap: usize,
    tol: f64,
    max_terms: usize,
) -> Result<(FourierTaylor, usize), KamError> {
    let mut term = pert.poisson(f, k_cap)?.sub(lf)?.prune(tol);
    let mut sum = pert.add(&term)?;
    let mut used = 1;
    for k in 2..=max_terms {
        if term.is_zero() || term.max_coef() < tol {
            break;
        }
        term = term.poisson(f, k_cap)?.scale(1.0 / k as f64).prune(tol);
        sum = sum.add(&term)?;
        used = k;
    }
    Ok((sum.prune(tol), used))
}

/// One KAM step with the Kolmogorov cross term and the frequency
/// correction by an action translation.
pub fn kam_step(h: &SplitHamiltonian, p: &StepParams, cfg: &EngineConfig) -> Result<StepOutput, KamError> {
    if cfg.check_conditions {
        p.check()?;
    }
    let omega = h.omega.as_slice();
    let n = h.n();
    let zero = vec![0; n];
    let tol = cfg.prune_tol;
    let pert = &h.pert;
    let eps_measured = pert.strip_sup_bound(p.s, p.r).value;
    let residual_in = pert.clamp_degree(1).strip_sup_bound(p.s, p.r_measure).value;
    let k = p.k_trunc;

    let p0 = pert.clamp_degree(0);
    let f0 = solve_homological_with(&p0, omega, k, RESONANCE_FLOOR)?;
    let cross = if pert.deg() == 2 {
        pert.degree_part(2).poisson(&f0, cfg.k_cap)?.degree_part(1).clamp_degree(1)
    } else {
        FourierTaylor::zeros(n, 0, 1)
    };
    let g1 = pert.degree_part(1).clamp_degree(1).add(&cross)?;
    let f1 = solve_homological_with(&g1, omega, k, RESONANCE_FLOOR)?;
    let gen = f0.add(&f1)?.prune(tol).compact();
    // L_omega F, exactly the truncated zero-mean right-hand sides
    let lf = p0.truncate(k).without_average().add(&g1.truncate(k).without_average())?;

    let (p1, used) = lie_transform_split(pert, &gen, &lf, cfg.k_cap, tol, cfg.lie_terms)?;

    // frequency correction: mean linear coefficient of the remainder
    let delta: Vec<C64> = (0..n).map(|i| p1.get(&zero, Mono::linear(i))).collect();
    let phi_shift: Vec<C64> = delta.iter().map(|d| -d).collect();
    if is_real(omega) {
        // the inverse of omega' -> omega' + delta; run for its domain checks
        let w: Vec<f64> = omega.iter().map(|v| v.re).collect();
        let d: Vec<f64> = phi_shift.iter().map(|v| v.re).collect();
        let dom = NearIdentityDomain { samples: vec![w.clone()], h: p.inversion_h, upsilon: UPSILON };
        invert_near_identity(&|_: &[f64]| d.clone(), &dom, &w, None)?;
    }
    let mut twist = vec![C64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in i..n {
            let c = p1.get(&zero, Mono::quadratic(i, j));
            if i == j {
                twist[i * n + i] = c * 2.0;
            } else {
                twist[i * n + j] = c;
                twist[j * n + i] = c;
            }
        }
    }
    let shift = math::solve_complex(&twist, n, &phi_shift).ok_or(KamError::SingularTwist)?;
    let mut p2 = p1.shift_action(&shift).prune(tol).compact();
    // N o T_c = N + <omega, c>
    let mut energy = h.energy + p2.get(&zero, Mono::ONE);
    for (w, c) in omega.iter().zip(&shift) {
        energy += w * c;
    }
    p2.set(&zero, Mono::ONE, C64::new(0.0, 0.0));
    let next = SplitHamiltonian { energy, omega: omega.to_vec(), pert: p2 };

    let s_next = p.s - 5.0 * p.sigma;
    let eta = math::exp(p.ln_eta);
    let residual_out = next.residual(s_next, p.r_measure);
    let p_plus = next.pert.strip_sup_bound(s_next, eta * p.r).value;
    let tp1 = p.tau + 1.0;
    let kt = k as f64;
    let trunc = math::powi(kt, n as i32) * math::exp(-kt * p.sigma);
    let denom = p.kappa * p.r * math::powf(p.sigma, tp1);
    let p_plus_template = eps_measured * eps_measured / denom + (eta * eta + trunc) * eps_measured;
    let mut d_theta: f64 = 0.0;
    let mut d_action: f64 = 0.0;
    for i in 0..n {
        d_theta = d_theta.max(gen.d_action(i).strip_sup_bound(s_next, eta * p.r).value);
        d_action = d_action.max(gen.d_theta(i).strip_sup_bound(s_next, eta * p.r).value);
    }
    let report = StepReport {
        eps_measured,
        residual_in,
        residual_out,
        p_plus,
        p_plus_template,
        deformation: (d_theta / p.sigma).max(d_action / p.r),
        deformation_template: eps_measured / denom,
        phi_shift: phi_shift.iter().fold(0.0, |m, v| m.max(v.cabs())),
        lie_terms: used,
        k_trunc: k,
        modes_kept: next.pert.terms().len(),
    };
    Ok(StepOutput { stage: Stage::new(gen, shift, phi_shift), hamiltonian: next, report })
}

/// Invariant torus at one frequency: `K(theta) = (z0 + 0) o Psi_0 o ... o Psi_J (theta, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Torus {
    pub omega: Vec<C64>,
    pub z0: Vec<C64>,
    pub stages: Vec<Stage>,
    pub rk_steps: usize,
}

/// Point on the torus with the image of the tangent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    pub angle: Vec<C64>,
    /// `angle - theta`, accumulated without cancellation.
    pub displacement: Vec<C64>,
    /// Action in original coordinates `z0 + I`.
    pub action: Vec<C64>,
    pub tangents: Vec<Vec<C64>>,
}

impl Torus {
    pub fn n(&self) -> usize {
        self.omega.len()
    }

    /// Image of `(theta, I)` under the composed stages, shifted by `z0`.
    pub fn map(&self, theta: &[C64], action: &[C64], tangents: &[Vec<C64>]) -> TorusPoint {
        let mut disp = vec![C64::new(0.0, 0.0); theta.len()];
        let mut ac = action.to_vec();
        let mut tg = tangents.to_vec();
        for st in self.stages.iter().rev() {
            st.apply(theta, &mut disp, &mut ac, &mut tg, self.rk_steps);
        }
        for (a, z) in ac.iter_mut().zip(&self.z0) {
            *a += z;
        }
        let angle = theta.iter().zip(&disp).map(|(a, b)| a + b).collect();
        TorusPoint { angle, displacement: disp, action: ac, tangents: tg }
    }

    /// `K(theta)` and `DK(theta) omega`.
    pub fn embed(&self, theta: &[f64]) -> TorusPoint {
        let n = self.n();
        let th: Vec<C64> = theta.iter().map(|t| C64::new(*t, 0.0)).collect();
        let mut tg = vec![C64::new(0.0, 0.0); 2 * n];
        tg[..n].copy_from_slice(&self.omega);
        self.map(&th, &vec![C64::new(0.0, 0.0); n], &[tg])
    }

    /// `phi(omega) - omega` accumulated over the stages.
    pub fn phi_shift(&self) -> Vec<C64> {
        let mut s = vec![C64::new(0.0, 0.0); self.n()];
        for st in &self.stages {
            for (a, b) in s.iter_mut().zip(&st.phi_shift) {
                *a += b;
            }
        }
        s
    }

    /// `sup_theta |X_H(K(theta)) - DK(theta) omega|` on a `grid^n` lattice.
    pub fn conjugacy_residual(&self, ham: &Hamiltonian, grid: usize) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        let total = grid.pow(n as u32);
        for mut idx in 0..total {
            let mut theta = vec![0.0; n];
            for t in theta.iter_mut() {
                *t = 2.0 * core::f64::consts::PI * (idx % grid) as f64 / grid as f64;
                idx /= grid;
            }
            let pt = self.embed(&theta);
            let u: Vec<f64> = pt.angle.iter().map(|v| v.re).collect();
            let z: Vec<f64> = pt.action.iter().map(|v| v.re).collect();
            let (dth, dz) = ham.vector_field(&u, &z);
            for i in 0..n {
                worst = worst.max(math::abs(dth[i] - pt.tangents[0][i].re));
                worst = worst.max(math::abs(dz[i] - pt.tangents[0][n + i].re));
            }
        }
        worst
    }

    /// `max |M^T J M - J|` of the Jacobian `M` of the composed stages at the
    /// given `(theta, I)` points (actions relative to `z0`).
    pub fn symplectic_defect(&self, points: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for (th, ac) in points {
            let basis: Vec<Vec<C64>> = (0..2 * n)
                .map(|i| {
                    let mut e = vec![C64::new(0.0, 0.0); 2 * n];
                    e[i] = C64::new(1.0, 0.0);
                    e
                })
                .collect();
            let thc: Vec<C64> = th.iter().map(|v| C64::new(*v, 0.0)).collect();
            let acc: Vec<C64> = ac.iter().map(|v| C64::new(*v, 0.0)).collect();
            let pt = self.map(&thc, &acc, &basis);
            worst = worst.max(symplectic_form_defect(&pt.tangents, n));
        }
        worst
    }

    /// Integrate `H` from `K(theta)` for time `t` and compare with
    /// `K(theta + omega t)`.
    pub fn invariance_defect(&self, ham: &Hamiltonian, thetas: &[Vec<f64>], t: f64, dt: f64) -> f64 {
        let n = self.n();
        let w: Vec<f64> = self.omega.iter().map(|v| v.re).collect();
        let steps = math::round(t / dt).max(1.0) as usize;
        let h = t / steps as f64;
        let mut worst: f64 = 0.0;
        for th in thetas {
            let p0 = self.embed(th);
            let mut x: Vec<f64> = p0.angle.iter().chain(&p0.action).map(|v| v.re).collect();
            let f = |x: &[f64]| -> Vec<f64> {
                let (a, b) = ham.vector_field(&x[..n], &x[n..]);
                a.into_iter().chain(b).collect()
            };
            for _ in 0..steps {
                let k1 = f(&x);
                let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
                let k2 = f(&x2);
                let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
                let k3 = f(&x3);
                let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
                let k4 = f(&x4);
                for i in 0..2 * n {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            let target: Vec<f64> = th.iter().zip(&w).map(|(a, b)| a + b * t).collect();
            let p1 = self.embed(&target);
            for i in 0..n {
                worst = worst.max(math::abs(x[i] - p1.angle[i].re));
                worst = worst.max(math::abs(x[n + i] - p1.action[i].re));
            }
        }
        worst
    }
}

/// `max |M^T J M - J|` for a Jacobian given by its columns.
pub fn symplectic_form_defect(cols: &[Vec<C64>], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..2 * n {
        for b in 0..2 * n {
            // omega(u, v) = <u_theta, v_I> - <u_I, v_theta>
            let mut w = C64::new(0.0, 0.0);
            for i in 0..n {
                w += cols[a][i] * cols[b][n + i] - cols[a][n + i] * cols[b][i];
            }
            let target = if b == a + n {
                1.0
            } else if a == b + n {
                -1.0
            } else {
                0.0
            };
            worst = worst.max((w - target).cabs());
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Gevrey,
    Analytic,
}

/// Per-level record of the iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub j: usize,
    pub residual: f64,
    pub ln_eps: f64,
    pub report: Option<StepReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorusRun {
    pub torus: Torus,
    pub trace: Vec<LevelTrace>,
    pub hamiltonian: SplitHamiltonian,
    /// `max_j (ln residual_j - ln eps_j)`: the fitted constant of the
    /// template `residual_j <= C eps_j`, in logs.
    pub ln_template_constant: f64,
}

impl TorusRun {
    pub fn residuals(&self) -> Vec<f64> {
        self.trace.iter().map(|t| t.residual).collect()
    }

    /// Fit `ln r_{j+1} = ln C + p ln r_j` over consecutive residuals above
    /// `floor`; returns `(p, ln C, r^2, pairs)`.
    pub fn contraction_fit(&self, floor: f64) -> Option<(f64, f64, f64, usize)> {
        let r = self.residuals();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for w in r.windows(2) {
            if w[0] > floor && w[1] > 0.0 {
                xs.push(math::ln(w[0]));
                ys.push(math::ln(w[1]));
            }
        }
        if xs.len() < 2 {
            return None;
        }
        let (a, b, r2) = math::linear_fit(&xs, &ys);
        Some((b, a, r2, xs.len()))
    }
}

/// Run the iteration at one frequency starting from the family jet `jet`
/// expanded at `z0`.
///
/// In Gevrey mode the perturbation enters level by level as its Fourier
/// truncations at the applied cutoffs; in analytic mode it is used whole.
pub fn iterate(
    jet: &FourierTaylor,
    omega: &[C64],
    z0: &[C64],
    schedule: &KamSchedule,
    cfg: &EngineConfig,
    mode: Mode,
) -> Result<TorusRun, KamError> {
    let params: Vec<StepParams> = schedule.levels.iter().map(|l| StepParams::from_level(l, schedule, cfg)).collect();
    let cuts: Vec<usize> = params.iter().map(|p| p.k_trunc).collect();
    let mut h = SplitHamiltonian::new(jet, omega)?;
    let pert = h.pert.clone();
    if mode == Mode::Gevrey {
        h.pert = pert.truncate(cuts[0]);
    }
    let mut stages: Vec<Stage> = Vec::new();
    let mut trace: Vec<LevelTrace> = Vec::new();
    let max_levels = cfg.fixed_levels.unwrap_or(cfg.j_max).min(schedule.levels.len());
    let mut ln_const = f64::NEG_INFINITY;
    let mut rises = 0;
    for j in 0..=max_levels {
        let p = &params[j.min(params.len() - 1)];
        if mode == Mode::Gevrey && j > 0 && j < params.len() && cuts[j] > cuts[j - 1] {
            let inc = pert.truncate(cuts[j]).sub(&pert.truncate(cuts[j - 1]))?;
            let mut inc = inc.prune(cfg.prune_tol);
            for st in &stages {
                inc = lie_transform(&inc, &st.generator, cfg.k_cap, cfg.prune_tol, cfg.lie_terms)?.0.shift_action(&st.shift);
            }
            h.pert = h.pert.add(&inc)?;
        }
        let residual = h.residual(p.s.max(0.0), p.r_measure);
        let ln_eps = schedule.levels[j.min(schedule.levels.len() - 1)].ln_eps;
        if residual > 0.0 {
            ln_const = ln_const.max(math::ln(residual) - ln_eps);
        }
        if let Some(prev) = trace.last() {
            if residual > prev.residual && residual > cfg.floor {
                rises += 1;
                if rises >= 2 {
                    return Err(KamError::DivergenceDetected { level: j, residual });
                }
            } else {
                rises = 0;
            }
        }
        trace.push(LevelTrace { j, residual, ln_eps, report: None });
        let done = match cfg.fixed_levels {
            Some(m) => j >= m,
            None => residual <= cfg.floor || j >= max_levels,
        };
        if done {
            break;
        }
        let out = kam_step(&h, p, cfg)?;
        trace.last_mut().unwrap().report = Some(out.report.clone());
        stages.push(out.stage);
        h = out.hamiltonian;
    }
    Ok(TorusRun {
        torus: Torus { omega: omega.to_vec(), z0: z0.to_vec(), stages, rk_steps: cfg.rk_steps },
        trace,
        hamiltonian: h,
        ln_template_constant: ln_const,
    })
}

/// Smallest `|<k, omega>| / |k|_1` over `0 < |k|_1 <= k_max`.
pub fn resonance_clearance(omega: &[f64], k_max: usize) -> f64 {
    let mut m = f64::INFINITY;
    for k in modes_in_ball(omega.len(), k_max) {
        let d: f64 = k.iter().zip(omega).map(|(a, b)| *a as f64 * b).sum();
        m = m.min(math::abs(d) / order(&k) as f64);
    }
    m
}

/// `omega`-derivatives of a vector-valued analytic map by trapezoidal
/// quadrature on a polydisc.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTable {
    pub omega: Vec<f64>,
    pub radius: f64,
    pub orders: Vec<Vec<usize>>,
    /// `values[order][component]`, real parts.
    pub values: Vec<Vec<f64>>,
}

impl DerivativeTable {
    pub fn get(&self, beta: &[usize]) -> Option<&[f64]> {
        self.orders.iter().position(|b| b.as_slice() == beta).map(|i| self.values[i].as_slice())
    }
}

pub fn cauchy_derivatives(
    f: &dyn Fn(&[C64]) -> Result<Vec<C64>, KamError>,
    omega0: &[f64],
    radius: f64,
    nodes: usize,
    max_order: usize,
) -> Result<DerivativeTable, KamError> {
    let m = omega0.len();
    let orders = math::multi_indices(m, max_order);
    let total = nodes.pow(m as u32);
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut acc: Vec<Vec<C64>> = Vec::new();
    for mut idx in 0..total {
        let mut phases = vec![0.0; m];
        for p in phases.iter_mut() {
            *p = two_pi * (idx % nodes) as f64 / nodes as f64;
            idx /= nodes;
        }
        let w: Vec<C64> = omega0.iter().zip(&phases).map(|(o, p)| C64::new(o + radius * math::cos(*p), radius * math::sin(*p))).collect();
        let vals = f(&w)?;
        if acc.is_empty() {
            acc = vec![vec![C64::new(0.0, 0.0); vals.len()]; orders.len()];
        }
        for (oi, beta) in orders.iter().enumerate() {
            let ph: f64 = beta.iter().zip(&phases).map(|(b, p)| *b as f64 * p).sum();
            let e = C64::new(math::cos(ph), -math::sin(ph));
            for (c, v) in acc[oi].iter_mut().zip(&vals) {
                *c += v * e;
            }
        }
    }
    let values = orders
        .iter()
        .zip(&acc)
        .map(|(beta, a)| {
            let ord: usize = beta.iter().sum();
            let scale = math::multi_factorial(beta) / (total as f64 * math::powi(radius, ord as i32));
            a.iter().map(|c| c.re * scale).collect()
        })
        .collect();
    Ok(DerivativeTable { omega: omega0.to_vec(), radius, orders, values })
}

/// Derivatives at two radii and, per total order, their largest
/// disagreement relative to `max(|d|, floor)`.
pub fn jet_derivatives(
    f: &dyn Fn(&[C64]) -> Result<Vec<C64>, KamError>,
    omega0: &[f64],
    radius: f64,
    limit: f64,
    nodes: usize,
    max_order: usize,
    floor: f64,
) -> Result<(DerivativeTable, Vec<f64>), KamError> {
    if !(radius < limit) {
        return Err(KamError::ContourTooLarge { radius, limit });
    }
    let t1 = cauchy_derivatives(f, omega0, radius, nodes, max_order)?;
    let t2 = cauchy_derivatives(f, omega0, 0.5 * radius, nodes, max_order)?;
    let mut worst = vec![0.0f64; max_order + 1];
    for ((a, b), beta) in t1.values.iter().zip(&t2.values).zip(&t1.orders) {
        let ord: usize = beta.iter().sum();
        for (x, y) in a.iter().zip(b) {
            let d = math::abs(x - y) / math::abs(*x).max(math::abs(*y)).max(floor);
            worst[ord] = worst[ord].max(d);
        }
    }
    Ok((t1, worst))
}

/// Sampling data for [`torus_jet`].
#[derive(Debug, Clone, PartialEq)]
pub struct JetRequest {
    pub thetas: Vec<Vec<f64>>,
    pub radius: f64,
    pub nodes: usize,
    pub max_order: usize,
    /// Denominator floor of the two-radius comparison.
    pub floor: f64,
}

/// `omega`-derivatives of `Phi(theta, 0; omega) - (theta, 0)` at sampled
/// angles and of `phi(omega) - omega`.
///
/// Components are ordered per angle as `U - theta` then `V`, followed by
/// `phi - omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusJet {
    pub omega: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub table: DerivativeTable,
    /// Two-radius disagreement per total order.
    pub consistency: Vec<f64>,
    pub clearance: f64,
    pub levels: usize,
    pub history: Vec<f64>,
}

impl TorusJet {
    pub fn n(&self) -> usize {
        self.omega.len()
    }
    /// Derivative `beta` of `U_i - theta_i` at angle index `t`.
    pub fn u(&self, beta: &[usize], t: usize, i: usize) -> Option<f64> {
        self.table.get(beta).map(|v| v[2 * self.n() * t + i])
    }
    pub fn v(&self, beta: &[usize], t: usize, i: usize) -> Option<f64> {
        self.table.get(beta).map(|v| v[2 * self.n() * t + self.n() + i])
    }
    pub fn phi(&self, beta: &[usize], i: usize) -> Option<f64> {
        self.table.get(beta).map(|v| v[2 * self.n() * self.thetas.len() + i])
    }
}

/// Torus samples at one (possibly complex) frequency, after a fixed number
/// of steps.
pub fn torus_samples(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omega: &[C64],
    schedule: &KamSchedule,
    cfg: &EngineConfig,
    mode: Mode,
    thetas: &[Vec<f64>],
) -> Result<Vec<C64>, KamError> {
    let (jet, z0) = member_jet_c(h0, h1, omega)?;
    let run = iterate(&jet, omega, &z0, schedule, cfg, mode)?;
    let n = omega.len();
    let zero = vec![C64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(thetas.len() * 2 * n + n);
    let mut t2 = run.torus.clone();
    t2.z0 = zero.clone();
    for th in thetas {
        let thc: Vec<C64> = th.iter().map(|v| C64::new(*v, 0.0)).collect();
        let pt = t2.map(&thc, &zero, &[]);
        out.extend(pt.displacement);
        out.extend(pt.action);
    }
    out.extend(run.torus.phi_shift());
    Ok(out)
}

/// Run at real `omega0`, then differentiate the samples in `omega` with the
/// same number of steps on every contour node.
pub fn torus_jet(
    h0: &IntegrableHamiltonian,
    h1: &Perturbation,
    omega0: &[f64],
    schedule: &KamSchedule,
    cfg: &EngineConfig,
    mode: Mode,
    req: &JetRequest,
) -> Result<TorusJet, KamError> {
    let clearance = resonance_clearance(omega0, cfg.k_cap);
    if !(req.radius < 0.5 * clearance) {
        return Err(KamError::ContourTooLarge { radius: req.radius, limit: 0.5 * clearance });
    }
    let w: Vec<C64> = omega0.iter().map(|v| C64::new(*v, 0.0)).collect();
    let (jet, z0) = member_jet_c(h0, h1, &w)?;
    let run = iterate(&jet, &w, &z0, schedule, cfg, mode)?;
    let levels = run.torus.stages.len();
    let mut fixed = cfg.clone();
    fixed.fixed_levels = Some(levels);
    fixed.check_conditions = false;
    let f = |om: &[C64]| torus_samples(h0, h1, om, schedule, &fixed, mode, &req.thetas);
    let (table, consistency) = jet_derivatives(&f, omega0, req.radius, 0.5 * clearance, req.nodes, req.max_order, req.floor)?;
    Ok(TorusJet {
        omega: omega0.to_vec(),
        thetas: req.thetas.clone(),
        table,
        consistency,
        clearance,
        levels,
        history: run.residuals(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golden() -> f64 {
        (math::sqrt(5.0) - 1.0) / 2.0
    }

    fn cw(w: &[f64]) -> Vec<C64> {
        w.iter().map(|v| C64::new(*v, 0.0)).collect()
    }

    fn rotator(eps: f64) -> (IntegrableHamiltonian, Perturbation) {
        let h0 = IntegrableHamiltonian::quadratic(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let h1 = Perturbation::trig(2, &[(vec![1, 0], eps, 0.0), (vec![1, 1], eps, 0.0)]);
        (h0, h1)
    }

    fn fixture_schedule() -> KamSchedule {
        build_schedule(&ScheduleParams::new(2.0, 1.5, 2, 0.01, 0.01)).unwrap()
    }

    fn loose_cfg() -> EngineConfig {
        EngineConfig { check_conditions: false, floor: 1e-28, ..EngineConfig::default() }
    }

    fn run_rotator(eps: f64, cfg: &EngineConfig, mode: Mode) -> (TorusRun, Hamiltonian) {
        let (h0, h1) = rotator(eps);
        let w = cw(&[1.0, golden()]);
        let (jet, z0) = member_jet_c(&h0, &h1, &w).unwrap();
        let run = iterate(&jet, &w, &z0, &fixture_schedule(), cfg, mode).unwrap();
        (run, Hamiltonian { h0, h1 })
    }

    fn step_params() -> StepParams {
        StepParams {
            s: 0.5,
            sigma: 0.05,
            r: 0.01,
            ln_eta: math::ln(0.1),
            k_cut: 24.0,
            k_trunc: 24,
            h: 1e-3,
            ln_eps: -40.0,
            kappa: 0.01,
            tau: 1.5,
            a_const: 1.0 / 64.0,
            b_const: 1.0 / 64.0,
            r_measure: 0.01,
            inversion_h: 0.01,
        }
    }

    /// `e + <omega, I> + |I|^2 / 2 + eps cos theta_1`.
    fn cosine_split(eps: f64) -> SplitHamiltonian {
        let mut pert = FourierTaylor::zeros(2, 2, 2);
        pert.set(&[0, 0], Mono::quadratic(0, 0), C64::new(0.5, 0.0));
        pert.set(&[0, 0], Mono::quadratic(1, 1), C64::new(0.5, 0.0));
        pert.add_real_mode(&[1, 0], Mono::ONE, eps, 0.0);
        SplitHamiltonian { energy: C64::new(0.0, 0.0), omega: cw(&[1.0, golden()]), pert }
    }

    #[test]
    fn cutoff_without_log_term_is_identity() {
        assert_eq!(solve_cutoff_rhs(17.25, 0).unwrap(), 17.25);
    }

    #[test]
    fn cutoff_root_substitutes_back() {
        let x = solve_cutoff_rhs(25.0, 2).unwrap();
        assert!(math::abs(x - 2.0 * math::ln(x) - 25.0) <= 1e-12 * 25.0);
        assert!(x >= 25.0);
    }

    #[test]
    fn cutoff_matches_exponential_form() {
        let (sigma, ln_e) = (0.03, -60.0);
        let x = solve_cutoff(sigma, ln_e, 2).unwrap();
        let k = x / sigma;
        let lhs = 2.0 * math::ln(k) - k * sigma;
        assert!(math::abs(lhs - ln_e) <= 1e-10 * math::abs(ln_e));
    }

    #[test]
    fn cutoff_below_branch_has_no_root() {
        assert!(matches!(solve_cutoff_rhs(2.0, 2), Err(KamError::NoRoot { .. })));
        assert!(matches!(solve_cutoff_rhs(-1.0, 3), Err(KamError::NoRoot { .. })));
    }

    #[test]
    fn schedule_rho_two_constants() {
        let s = fixture_schedule();
        assert_eq!(s.delta, 2.0 / 3.0);
        assert_eq!(s.rho_prime, 6.0);
        assert_eq!(s.levels.len(), 21);
        assert!(s.all_flags());
    }

    #[test]
    fn schedule_energy_law_and_ratios() {
        let s = fixture_schedule();
        let ln_c1 = math::ln(s.params.c1);
        for w in s.levels.windows(2) {
            let a = ln_c1 + w[0].ln_e;
            let b = ln_c1 + w[1].ln_e;
            assert!(math::abs(b - 1.5 * a) <= 1e-12 * math::abs(b));
        }
        let target = s.asymptotic_ratio();
        for (j, r) in s.h_ratios().iter().enumerate() {
            assert!(*r < UPSILON_TILDE);
            if j >= 5 {
                assert!(math::abs(r / target - 1.0) <= 0.05, "j = {j}, ratio {r}");
            }
        }
        for w in s.levels.windows(2) {
            assert!(w[0].ln_eps_tilde <= w[1].ln_eps - core::f64::consts::LN_2);
        }
    }

    #[test]
    fn schedule_recursions() {
        let s = fixture_schedule();
        assert!(math::abs(s.levels[0].s * (1.0 - s.delta) - 5.0 * s.sigma0) <= 1e-14);
        for w in s.levels.windows(2) {
            assert!(math::abs(w[1].sigma - s.delta * w[0].sigma) <= 1e-15 * w[0].sigma);
            assert!(math::abs(w[1].s - (w[0].s - 5.0 * w[0].sigma)) <= 1e-14);
            assert!(math::abs(w[1].ln_r - (w[0].ln_r + w[0].ln_eta)) <= 1e-12 * math::abs(w[1].ln_r));
            assert!(math::abs(w[0].ln_eta - 0.5 * w[0].ln_e) <= 1e-15 * math::abs(w[0].ln_e));
        }
        for l in &s.levels {
            let h = 0.5 * s.params.kappa * math::powf(l.k, -2.5);
            assert!(math::abs(l.h - h) <= 1e-14 * h);
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        let mut p = ScheduleParams::new(1.0, 1.5, 2, 0.01, 0.01);
        assert!(matches!(build_schedule(&p), Err(KamError::InvalidParameter(_))));
        p.rho = 2.0;
        p.tau = 0.5;
        assert!(matches!(build_schedule(&p), Err(KamError::InvalidParameter(_))));
        p.tau = 1.5;
        p.kappa = 1.5;
        assert!(matches!(build_schedule(&p), Err(KamError::InvalidParameter(_))));
    }

    #[test]
    fn schedule_gives_up_below_min_sigma() {
        let mut p = ScheduleParams::new(2.0, 1.5, 2, 0.01, 0.01);
        p.eps_hat = 1e30;
        p.min_sigma = 0.05;
        assert!(matches!(build_schedule(&p), Err(KamError::MinSigma { .. })));
        let s = schedule_for_sigma(&p, 0.1, 0).unwrap();
        assert!(!s.levels[0].flags.a);
    }

    #[test]
    fn analytic_schedule_uses_wider_strip() {
        let mut p = ScheduleParams::new(analytic_rho(1.5, 2.0), 1.5, 2, 0.01, 0.01);
        p.analytic = true;
        let s = build_schedule(&p).unwrap();
        assert_eq!(s.big_b, 1.0);
        assert!(math::abs(s.levels[0].s * (1.0 - s.delta) - 20.0 * s.sigma0) <= 1e-13);
        assert!(s.all_flags());
    }

    #[test]
    fn step_fixed_point_for_zero_perturbation() {
        let mut h = cosine_split(0.0);
        h.pert = h.pert.prune(0.0);
        let cfg = loose_cfg();
        let out = kam_step(&h, &step_params(), &cfg).unwrap();
        assert!(out.stage.generator.is_zero());
        assert!(out.stage.shift.iter().all(|c| c.cabs() == 0.0));
        assert!(out.stage.phi_shift.iter().all(|c| c.cabs() == 0.0));
        assert_eq!(out.report.residual_out, 0.0);
        assert_eq!(out.hamiltonian.pert, h.pert.compact());
    }

    #[test]
    fn step_generator_for_cosine_perturbation() {
        let eps = 1e-5;
        let out = kam_step(&cosine_split(eps), &step_params(), &loose_cfg()).unwrap();
        // F = eps sin(theta_1) / omega_1 plus the cross-term correction in I
        let g = &out.stage.generator;
        let c = g.get(&[1, 0], Mono::ONE);
        assert!((c - C64::new(0.0, -0.5 * eps)).cabs() <= 1e-20);
        assert!(g.get(&[0, 1], Mono::ONE).cabs() == 0.0);
    }

    #[test]
    fn step_error_is_quadratic_in_eps() {
        let p = step_params();
        let cfg = loose_cfg();
        let mut prev = kam_step(&cosine_split(1e-4), &p, &cfg).unwrap().report.residual_out;
        for i in 1..=3 {
            let eps = 1e-4 / (1u32 << i) as f64;
            let cur = kam_step(&cosine_split(eps), &p, &cfg).unwrap().report.residual_out;
            let ratio = prev / cur;
            assert!(ratio >= 3.5 && ratio <= 4.5, "ratio {ratio}");
            prev = cur;
        }
    }

    #[test]
    fn step_deformation_scales_linearly() {
        let p = step_params();
        let cfg = loose_cfg();
        let a = kam_step(&cosine_split(1e-4), &p, &cfg).unwrap().report;
        let b = kam_step(&cosine_split(5e-5), &p, &cfg).unwrap().report;
        assert!(math::abs(a.deformation / b.deformation - 2.0) < 1e-3);
        assert!(a.deformation / a.deformation_template < 1e3);
    }

    #[test]
    fn step_conditions_are_enforced() {
        let mut p = step_params();
        p.ln_eps = 0.0;
        let cfg = EngineConfig::default();
        assert!(matches!(
            kam_step(&cosine_split(1e-5), &p, &cfg),
            Err(KamError::ConditionViolated { which: 'a', .. })
        ));
        let mut p = step_params();
        p.h = 1.0;
        p.ln_eps = -200.0;
        p.ln_eta = 0.0;
        assert!(matches!(
            kam_step(&cosine_split(1e-5), &p, &cfg),
            Err(KamError::ConditionViolated { which: 'c', .. })
        ));
    }

    #[test]
    fn step_rejects_resonant_mode() {
        let mut h = cosine_split(0.0);
        h.omega = cw(&[1.0, 1.0]);
        h.pert.add_real_mode(&[1, -1], Mono::ONE, 1e-5, 0.0);
        assert!(matches!(
            kam_step(&h, &step_params(), &loose_cfg()),
            Err(KamError::Fourier(FourierError::ResonantMode { .. }))
        ));
    }

    #[test]
    fn lie_transform_matches_flow_composition() {
        let mut g = FourierTaylor::zeros(2, 1, 1);
        g.add_real_mode(&[1, 0], Mono::ONE, 1.0, 0.0);
        g.add_real_mode(&[0, 1], Mono::linear(0), 0.5, 0.0);
        let mut f = FourierTaylor::zeros(2, 1, 1);
        f.add_real_mode(&[1, 0], Mono::ONE, 0.0, 0.1);
        f.add_real_mode(&[1, 0], Mono::linear(1), 0.05, 0.0);
        let (lt, _) = lie_transform(&g, &f, 40, 1e-30, 60).unwrap();
        let stage = Stage::new(f, vec![C64::new(0.0, 0.0); 2], vec![C64::new(0.0, 0.0); 2]);
        for (th, ac) in [([0.3, 1.2], [0.1, -0.2]), ([2.0, -0.7], [-0.05, 0.3])] {
            let base = cw(&th);
            let mut disp = cw(&[0.0, 0.0]);
            let mut a = cw(&ac);
            stage.apply(&base, &mut disp, &mut a, &mut [], 400);
            let u: Vec<f64> = base.iter().zip(&disp).map(|(x, y)| (x + y).re).collect();
            let v: Vec<f64> = a.iter().map(|x| x.re).collect();
            let direct = g.eval_real(&u, &v);
            assert!(math::abs(direct - lt.eval_real(&th, &ac)) <= 1e-10);
        }
    }

    #[test]
    fn rotator_contracts_super_linearly() {
        let (run, ham) = run_rotator(1e-4, &loose_cfg(), Mode::Gevrey);
        let r = run.residuals();
        assert!(r.len() >= 4);
        let (p, _, _, pairs) = run.contraction_fit(0.0).unwrap();
        assert!(pairs >= 3);
        assert!(p >= 1.5 && p <= 2.2, "p = {p}");
        for w in r.windows(3) {
            // convex decrease of the log-residuals
            if w[2] > 0.0 {
                assert!(math::ln(w[2]) - math::ln(w[1]) <= math::ln(w[1]) - math::ln(w[0]));
            }
        }
        assert!(run.torus.conjugacy_residual(&ham, 64) <= 1e-9);
        assert!(run.ln_template_constant.is_finite());
    }

    #[test]
    fn rotator_torus_is_invariant_and_symplectic() {
        let (run, ham) = run_rotator(1e-5, &loose_cfg(), Mode::Gevrey);
        let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
            .map(|i| {
                let a = i as f64 * 0.37;
                (vec![a, 1.3 * a + 0.2], vec![1e-3 * math::sin(a), -1e-3 * math::cos(a)])
            })
            .collect();
        assert!(run.torus.symplectic_defect(&pts) <= 1e-9);
        for st in &run.torus.stages {
            let single = Torus { stages: vec![st.clone()], ..run.torus.clone() };
            assert!(single.symplectic_defect(&pts[..10]) <= 1e-9);
        }
        let th: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.31, i as f64 * 0.17]).collect();
        assert!(run.torus.invariance_defect(&ham, &th, 10.0, 0.01) <= 1e-7);
        assert!(run.torus.conjugacy_residual(&ham, 64) <= 1e-9);
    }

    #[test]
    fn analytic_and_gevrey_modes_agree_on_trig_polynomials() {
        let (a, _) = run_rotator(1e-4, &loose_cfg(), Mode::Gevrey);
        let (b, _) = run_rotator(1e-4, &loose_cfg(), Mode::Analytic);
        assert_eq!(a.residuals(), b.residuals());
    }

    #[test]
    fn integrable_input_gives_identity() {
        let (run, ham) = run_rotator(0.0, &loose_cfg(), Mode::Gevrey);
        assert!(run.torus.stages.is_empty());
        assert_eq!(run.residuals(), vec![0.0]);
        let p = run.torus.embed(&[0.4, 2.1]);
        assert!(math::abs(p.angle[0].re - 0.4) <= 1e-12 && math::abs(p.angle[1].re - 2.1) <= 1e-12);
        assert!(math::abs(p.action[0].re - 1.0) <= 1e-12 && math::abs(p.action[1].re - golden()) <= 1e-12);
        assert!(run.torus.conjugacy_residual(&ham, 8) <= 1e-12);
    }

    #[test]
    fn strong_forcing_is_reported() {
        let (h0, h1) = rotator(0.2);
        let w = cw(&[1.0, golden()]);
        let (jet, z0) = member_jet_c(&h0, &h1, &w).unwrap();
        let cfg = EngineConfig { j_max: 8, ..loose_cfg() };
        assert!(iterate(&jet, &w, &z0, &fixture_schedule(), &cfg, Mode::Gevrey).is_err());
    }

    #[test]
    fn cauchy_quadrature_on_polynomial() {
        let f = |w: &[C64]| -> Result<Vec<C64>, KamError> { Ok(vec![w[0] * w[0] * w[1], w[0] * 3.0 + w[1]]) };
        let t = cauchy_derivatives(&f, &[0.7, -0.4], 0.1, 8, 3).unwrap();
        let close = |a: f64, b: f64| math::abs(a - b) <= 1e-13;
        assert!(close(t.get(&[0, 0]).unwrap()[0], 0.49 * -0.4));
        assert!(close(t.get(&[1, 0]).unwrap()[0], 2.0 * 0.7 * -0.4));
        assert!(close(t.get(&[2, 1]).unwrap()[0], 2.0));
        assert!(close(t.get(&[1, 0]).unwrap()[1], 3.0));
        assert!(close(t.get(&[2, 0]).unwrap()[1], 0.0));
        assert!(close(t.get(&[3, 0]).unwrap()[0], 0.0));
    }

    #[test]
    fn contour_radius_is_bounded_by_clearance() {
        let f = |w: &[C64]| -> Result<Vec<C64>, KamError> { Ok(w.to_vec()) };
        assert!(matches!(
            jet_derivatives(&f, &[1.0, 0.5], 0.2, 0.1, 8, 1, 1e-12),
            Err(KamError::ContourTooLarge { .. })
        ));
        let (t, c) = jet_derivatives(&f, &[1.0, 0.5], 0.05, 0.1, 8, 2, 1.0).unwrap();
        assert!(c.iter().all(|v| *v <= 1e-12));
        assert!(math::abs(t.get(&[0, 1]).unwrap()[1] - 1.0) <= 1e-14);
        assert!(math::abs(t.get(&[0, 2]).unwrap()[1]) <= 1e-12);
        let (h0, h1) = rotator(1e-4);
        let req = JetRequest { thetas: vec![vec![0.0, 0.0]], radius: 0.01, nodes: 8, max_order: 1, floor: 1e-12 };
        let r = torus_jet(&h0, &h1, &[1.0, golden()], &fixture_schedule(), &loose_cfg(), Mode::Gevrey, &req);
        assert!(matches!(r, Err(KamError::ContourTooLarge { .. })));
    }

    #[test]
    fn torus_jet_first_order_is_consistent() {
        let (h0, h1) = rotator(1e-4);
        let sched = fixture_schedule();
        let cfg = loose_cfg();
        let req = JetRequest { thetas: vec![vec![0.3, 1.1], vec![2.0, 4.0]], radius: 5e-4, nodes: 10, max_order: 1, floor: 1e-12 };
        let jet = torus_jet(&h0, &h1, &[1.0, golden()], &sched, &cfg, Mode::Gevrey, &req).unwrap();
        assert!(jet.consistency[0] <= 1e-8 && jet.consistency[1] <= 1e-8, "{:?}", jet.consistency);
        let direct = torus_samples(&h0, &h1, &cw(&[1.0, golden()]), &sched, &cfg, Mode::Gevrey, &req.thetas).unwrap();
        let zero = jet.table.get(&[0, 0]).unwrap();
        for (a, b) in zero.iter().zip(&direct) {
            assert!(math::abs(a - b.re) <= 1e-15);
        }
        assert_eq!(jet.u(&[0, 0], 1, 0).unwrap(), zero[4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cutoff_root_property(rhs in 3.5f64..1e4, n in 1usize..4) {
            let x = solve_cutoff_rhs(rhs, n).unwrap();
            prop_assert!(x >= rhs);
            prop_assert!(math::abs(x - n as f64 * math::ln(x) - rhs) <= 1e-12 * rhs);
        }

        #[test]
        fn schedule_invariants(rho in 1.5f64..3.0, tau in 1.1f64..3.0) {
            let s = build_schedule(&ScheduleParams::new(rho, tau, 2, 0.01, 0.01)).unwrap();
            let ln_c1 = math::ln(s.params.c1);
            for w in s.levels.windows(2) {
                prop_assert!(w[1].h < UPSILON_TILDE * w[0].h);
                prop_assert!(math::abs(w[1].sigma - s.delta * w[0].sigma) <= 1e-14 * w[0].sigma);
                let law = math::powf(2.0 / 3.0, -1.0);
                let (a, b) = (ln_c1 + w[0].ln_e, ln_c1 + w[1].ln_e);
                prop_assert!(math::abs(b - law * a) <= 1e-11 * math::abs(b));
                prop_assert!(w[0].flags.all());
            }
        }
    }
}

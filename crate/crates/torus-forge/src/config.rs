//! Experiment configuration: TOML sections with defaults, checked at load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use torus_core::kam::{analytic_rho, EngineConfig, Mode, ScheduleParams};
use torus_core::model::{IntegrableHamiltonian, Perturbation, Polynomial};

use crate::ForgeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub params: ParamsConfig,
    pub schedule: ScheduleConfig,
    pub engine: EngineSection,
    pub frequencies: FrequencyConfig,
    pub dioph: DiophConfig,
    pub step: StepConfig,
    pub approx: ApproxConfig,
    pub whitney: WhitneyConfig,
    pub normalform: NormalFormSection,
    pub stability: StabilityConfig,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Quadratic,
    Anharmonic,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub exps: Vec<u32>,
    pub coef: f64,
}

/// `cos a cos<k, theta> + sin a sin<k, theta>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeTerm {
    pub k: Vec<i32>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub beta: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub terms: Vec<Term>,
    pub modes: Vec<ModeTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub rho: f64,
    pub tau: f64,
    pub n: usize,
    pub kappa: f64,
    pub r0: f64,
    pub varsigma: f64,
    pub l1: f64,
    pub l2: f64,
    /// Size of the perturbation in the normal-form reduction.
    pub eps_h: f64,
}

/// Overrides of the schedule's free constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub c1: f64,
    pub sigma: f64,
    pub a_const: f64,
    pub b_const: f64,
    pub a0: f64,
    pub eps_hat: f64,
    pub j_max: usize,
    pub min_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Gevrey,
    Analytic,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Gevrey => Mode::Gevrey,
            ModeName::Analytic => Mode::Analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub mode: ModeName,
    pub k_cap: usize,
    pub prune_tol: f64,
    pub lie_terms: usize,
    pub j_max: usize,
    pub floor: f64,
    pub rk_steps: usize,
    pub check_conditions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyConfig {
    pub omegas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiophConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub res: usize,
    pub k_scan: usize,
}

/// Fixed domain data of the single-step experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub s: f64,
    pub sigma: f64,
    pub r: f64,
    pub eta: f64,
    pub k_trunc: usize,
    pub h: f64,
    /// Perturbation scale of the first run; the model amplitudes are multiplied by it.
    pub scale: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApproxConfig {
    pub rho: f64,
    pub u0: f64,
    pub q: f64,
    pub levels: usize,
    pub k_max: usize,
    pub samples: usize,
    pub available: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhitneyConfig {
    pub grid: usize,
    pub radius: f64,
    pub nodes: usize,
    pub max_order: usize,
    pub jet_floor: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalFormSection {
    pub eps_threshold: f64,
    pub grid: usize,
    pub lagrange_tol: f64,
    pub inversion_radius: f64,
    pub flat_grid: usize,
    pub flat_h: f64,
    pub symplectic_points: usize,
    pub symplectic_h: f64,
    /// Half-width of the action box around `E_kappa` for the symplectic samples.
    pub symplectic_spread: f64,
    pub t_max: f64,
    pub h_int: f64,
    pub samples: usize,
    pub drift_threshold: f64,
    /// Offsets `d` of extra starts `E_kappa + d e_1`.
    pub offsets: Vec<f64>,
    pub offset_t_max: f64,
    pub phi0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub a: f64,
    pub c1: f64,
    pub c2: f64,
    pub alpha: Vec<usize>,
    pub beta: Vec<usize>,
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    pub m_max: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub conjugacy: f64,
    pub round_trip: f64,
    pub flatness: f64,
    pub symplectic: f64,
    pub drift: f64,
    pub energy: f64,
    pub contraction_p: f64,
    pub r_squared: f64,
    pub step_ratio: f64,
    pub dominance: f64,
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            model: ModelConfig::default(),
            params: ParamsConfig::default(),
            schedule: ScheduleConfig::default(),
            engine: EngineSection::default(),
            frequencies: FrequencyConfig::default(),
            dioph: DiophConfig::default(),
            step: StepConfig::default(),
            approx: ApproxConfig::default(),
            whitney: WhitneyConfig::default(),
            normalform: NormalFormSection::default(),
            stability: StabilityConfig::default(),
            tolerances: Tolerances::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::Quadratic,
            beta: 0.0,
            lo: vec![-2.0, -2.0],
            hi: vec![2.0, 2.0],
            terms: Vec::new(),
            modes: vec![ModeTerm { k: vec![1, 0], cos: 1e-4, sin: 0.0 }, ModeTerm { k: vec![1, 1], cos: 1e-4, sin: 0.0 }],
        }
    }
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig { rho: 2.0, tau: 1.5, n: 2, kappa: 0.01, r0: 0.01, varsigma: 0.0, l1: 1.0, l2: 1.0, eps_h: 1e-5 }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let p = ScheduleParams::new(2.0, 1.5, 2, 0.01, 0.01);
        ScheduleConfig {
            c1: p.c1,
            sigma: p.sigma,
            a_const: p.a_const,
            b_const: p.b_const,
            a0: p.a0,
            eps_hat: p.eps_hat,
            j_max: p.j_max,
            min_sigma: p.min_sigma,
        }
    }
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        EngineSection {
            mode: ModeName::Gevrey,
            k_cap: e.k_cap,
            prune_tol: e.prune_tol,
            lie_terms: e.lie_terms,
            j_max: e.j_max,
            floor: 1e-28,
            rk_steps: e.rk_steps,
            check_conditions: false,
        }
    }
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        FrequencyConfig { omegas: vec![vec![1.0, GOLDEN]] }
    }
}

impl Default for DiophConfig {
    fn default() -> Self {
        DiophConfig { lo: vec![0.9, 0.5], hi: vec![1.1, 0.7], res: 20, k_scan: 200 }
    }
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { s: 0.5, sigma: 0.05, r: 0.01, eta: 0.1, k_trunc: 24, h: 1e-3, scale: 1.0, halvings: 3 }
    }
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig { rho: 2.0, u0: 0.06, q: 0.9, levels: 5, k_max: 40, samples: 8, available: 100 }
    }
}

impl Default for WhitneyConfig {
    fn default() -> Self {
        WhitneyConfig { grid: 17, radius: 5e-4, nodes: 10, max_order: 3, jet_floor: 1e-12, c0: 0.5 }
    }
}

impl Default for NormalFormSection {
    fn default() -> Self {
        NormalFormSection {
            eps_threshold: 1e-3,
            grid: 17,
            lagrange_tol: 1e-8,
            inversion_radius: 1e-3,
            flat_grid: 9,
            flat_h: 1e-4,
            symplectic_points: 100,
            symplectic_h: 1e-5,
            symplectic_spread: 2e-4,
            t_max: 1e4,
            h_int: 0.008,
            samples: 50,
            drift_threshold: 1e-10,
            offsets: vec![0.05, 0.025],
            offset_t_max: 1e3,
            phi0: vec![0.1, 0.2],
        }
    }
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            a: 1.0,
            c1: 1.0,
            c2: 1.0,
            alpha: vec![0, 0],
            beta: vec![0, 0],
            d_min: 1e-6,
            d_max: 1e-1,
            count: 100,
            m_max: 200,
            factor: 3.0,
        }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            conjugacy: 1e-9,
            round_trip: 1e-9,
            flatness: 1e-6,
            symplectic: 1e-8,
            drift: 1e-7,
            energy: 1e-10,
            contraction_p: 1.5,
            r_squared: 0.98,
            step_ratio: 3.5,
            dominance: 1e-12,
        }
    }
}

fn invalid(field: &str, msg: impl Into<String>) -> ForgeError {
    ForgeError::Config(format!("{field}: {}", msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ForgeError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ForgeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ForgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            ForgeError::Config(m) => ForgeError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parameter constraints that do not need any computation.
    pub fn validate(&self) -> Result<(), ForgeError> {
        let p = &self.params;
        let n = p.n;
        if n == 0 {
            return Err(invalid("params.n", "must be positive"));
        }
        if !(p.tau > n as f64 - 1.0) {
            return Err(invalid("params.tau", format!("tau = {} must exceed n - 1 = {}", p.tau, n - 1)));
        }
        if !(p.rho > 1.0) && self.engine.mode == ModeName::Gevrey {
            return Err(invalid("params.rho", format!("rho = {} must exceed 1 in gevrey mode", p.rho)));
        }
        if !(p.l1 > 0.0 && p.l2 > 0.0) {
            return Err(invalid("params.l1", "L1 and L2 must be positive"));
        }
        let cap = p.l2.powf(-1.0 - p.varsigma);
        if !(p.kappa > 0.0 && p.kappa <= cap) {
            return Err(invalid("params.kappa", format!("kappa = {} must lie in (0, L2^(-1-varsigma)] = (0, {cap}]", p.kappa)));
        }
        if !(p.r0 > 0.0) {
            return Err(invalid("params.r0", "must be positive"));
        }
        if !(p.eps_h >= 0.0 && p.eps_h.is_finite()) {
            return Err(invalid("params.eps_h", "must be finite and nonnegative"));
        }
        let m = &self.model;
        if m.lo.len() != n || m.hi.len() != n {
            return Err(invalid("model.lo", format!("box bounds need {n} entries")));
        }
        if m.lo.iter().zip(&m.hi).any(|(a, b)| !(a < b)) {
            return Err(invalid("model.hi", "each upper bound must exceed the lower bound"));
        }
        if m.preset == Preset::Polynomial && m.terms.is_empty() {
            return Err(invalid("model.terms", "polynomial preset needs at least one term"));
        }
        if let Some(t) = m.terms.iter().find(|t| t.exps.len() != n) {
            return Err(invalid("model.terms", format!("exponent vector {:?} has wrong length", t.exps)));
        }
        if let Some(t) = m.modes.iter().find(|t| t.k.len() != n) {
            return Err(invalid("model.modes", format!("mode {:?} has wrong length", t.k)));
        }
        if let Some(w) = self.frequencies.omegas.iter().find(|w| w.len() != n) {
            return Err(invalid("frequencies.omegas", format!("frequency {w:?} has wrong length")));
        }
        let d = &self.dioph;
        if d.lo.len() != d.hi.len() || d.res < 2 {
            return Err(invalid("dioph", "lo/hi lengths must match and res must be at least 2"));
        }
        if !(self.approx.rho > 1.0 && self.approx.u0 > 0.0 && self.approx.q > 0.0 && self.approx.q < 1.0) {
            return Err(invalid("approx", "need rho > 1, u0 > 0 and 0 < q < 1"));
        }
        if self.approx.levels < 2 {
            return Err(invalid("approx.levels", "a rate fit needs at least 2 levels"));
        }
        if self.whitney.grid % 2 == 0 || self.normalform.grid % 2 == 0 {
            return Err(invalid("whitney.grid", "angle grids must be odd"));
        }
        let s = &self.stability;
        if !(s.d_min > 0.0 && s.d_max > s.d_min && s.count >= 2) {
            return Err(invalid("stability", "need 0 < d_min < d_max and count >= 2"));
        }
        if s.alpha.len() != n || s.beta.len() != n {
            return Err(invalid("stability.alpha", format!("multi-indices need {n} entries")));
        }
        if self.normalform.phi0.len() != n {
            return Err(invalid("normalform.phi0", format!("needs {n} entries")));
        }
        Ok(())
    }

    pub fn h0(&self) -> IntegrableHamiltonian {
        let m = &self.model;
        match m.preset {
            Preset::Quadratic => IntegrableHamiltonian::quadratic(m.lo.clone(), m.hi.clone()),
            Preset::Anharmonic => IntegrableHamiltonian::anharmonic(m.beta, m.lo.clone(), m.hi.clone()),
            Preset::Polynomial => {
                let mut h = IntegrableHamiltonian::quadratic(m.lo.clone(), m.hi.clone());
                h.poly = Polynomial { n: self.params.n, terms: m.terms.iter().map(|t| (t.exps.clone(), t.coef)).collect() };
                h
            }
        }
    }

    pub fn h1(&self) -> Perturbation {
        let modes: Vec<(Vec<i32>, f64, f64)> = self.model.modes.iter().map(|t| (t.k.clone(), t.cos, t.sin)).collect();
        Perturbation::trig(self.params.n, &modes)
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        let p = &self.params;
        let s = &self.schedule;
        ScheduleParams {
            l1: p.l1,
            l2: p.l2,
            varsigma: p.varsigma,
            c1: s.c1,
            sigma: s.sigma,
            a0: s.a0,
            eps_hat: s.eps_hat,
            a_const: s.a_const,
            b_const: s.b_const,
            j_max: s.j_max,
            min_sigma: s.min_sigma,
            analytic: self.engine.mode == ModeName::Analytic,
            ..ScheduleParams::new(self.schedule_rho(), p.tau, p.n, p.kappa, p.r0)
        }
    }

    /// In analytic mode a `rho <= 1` is replaced by the auxiliary exponent with `tau' = tau + 1`.
    pub fn schedule_rho(&self) -> f64 {
        let p = &self.params;
        if self.engine.mode == ModeName::Analytic && p.rho <= 1.0 {
            analytic_rho(p.tau, p.tau + 1.0)
        } else {
            p.rho
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        let e = &self.engine;
        EngineConfig {
            k_cap: e.k_cap,
            prune_tol: e.prune_tol,
            lie_terms: e.lie_terms,
            j_max: e.j_max,
            floor: e.floor,
            rk_steps: e.rk_steps,
            check_conditions: e.check_conditions,
            ..EngineConfig::default()
        }
    }

    pub fn mode(&self) -> Mode {
        self.engine.mode.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = ExperimentConfig::from_toml("seed = 7\n[params]\nkappa = 0.02\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.params.kappa, 0.02);
        assert_eq!(c.params.tau, 1.5);
    }

    #[test]
    fn small_tau_rejected_at_load() {
        let e = ExperimentConfig::from_toml("[params]\ntau = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("params.tau"), "{e}");
    }

    #[test]
    fn kappa_above_cap_rejected() {
        let e = ExperimentConfig::from_toml("[params]\nl2 = 2.0\nvarsigma = 1.0\nkappa = 0.3\n").unwrap_err();
        assert!(e.to_string().contains("params.kappa"));
    }

    #[test]
    fn analytic_mode_allows_rho_one() {
        ExperimentConfig::from_toml("[params]\nrho = 1.0\n[engine]\nmode = \"analytic\"\n").unwrap();
        assert!(ExperimentConfig::from_toml("[params]\nrho = 1.0\n").is_err());
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let e = ExperimentConfig::from_toml("seed = 1\n[params]\ntau = \n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let e = ExperimentConfig::from_toml("[params]\ntua = 2.0\n").unwrap_err();
        assert!(e.to_string().contains("tua"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }
}

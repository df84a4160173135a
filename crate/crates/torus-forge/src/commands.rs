//! One pipeline per subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use torus_core::approx::{self, AxisKind, Quadrature};
use torus_core::diophantine::{self, DiophantineParams};
use torus_core::fourier::C64;
use torus_core::gevrey::{self, GevreyCertificate};
use torus_core::kam::{self, KamSchedule, SplitHamiltonian, StepParams, TorusJet};
use torus_core::math::{self, LibmComplex};
use torus_core::model::{member_jet_c, FnDerivatives, Hamiltonian};
use torus_core::normal_form::{self as nf, FamilyBuild, NormalForm, NormalFormConfig, StabilityParams};
use torus_core::whitney;

use crate::cert;
use crate::config::ExperimentConfig;
use crate::{num, ForgeError, Outcome, Table};

type Result<T> = core::result::Result<T, ForgeError>;

fn complex(w: &[f64]) -> Vec<C64> {
    w.iter().map(|v| C64::new(*v, 0.0)).collect()
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Overrides of the `dioph` command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiophArgs {
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    pub kappa: Option<f64>,
    pub tau: Option<f64>,
    pub k_scan: Option<usize>,
    pub res: Option<usize>,
}

/// Tag a grid of the frequency box with brute-force small-divisor scans.
pub fn dioph(cfg: &ExperimentConfig, args: &DiophArgs) -> Result<Outcome> {
    let lo = args.lo.clone().unwrap_or_else(|| cfg.dioph.lo.clone());
    let hi = args.hi.clone().unwrap_or_else(|| cfg.dioph.hi.clone());
    let res = args.res.unwrap_or(cfg.dioph.res);
    let params = DiophantineParams {
        kappa: args.kappa.unwrap_or(cfg.params.kappa),
        tau: args.tau.unwrap_or(cfg.params.tau),
        k_scan: args.k_scan.unwrap_or(cfg.dioph.k_scan),
    };
    diophantine::check_window_args(&lo, &hi, res, &params)?;
    let points: Vec<_> = diophantine::grid_points(&lo, &hi, res)
        .into_par_iter()
        .map(|w| diophantine::tag_point(w, &lo, &hi, &params))
        .collect();
    let n = lo.len();
    let mut header: Vec<String> = (1..=n).map(|i| format!("omega{i}")).collect();
    header.extend(["boundary_dist", "min_div", "passes"].map(String::from));
    let mut table = Table { name: "grid".into(), header, rows: Vec::new() };
    for p in &points {
        let mut row: Vec<String> = p.omega.iter().map(|v| num(*v)).collect();
        row.extend([num(p.boundary_distance), num(p.min_divisor), p.passes.to_string()]);
        table.push(row);
    }
    let passing = points.iter().filter(|p| p.passes).count();
    let mut out = Outcome::new("dioph");
    out.summary = json!({
        "kappa": params.kappa,
        "tau": params.tau,
        "k_scan": params.k_scan,
        "points": points.len(),
        "passing": passing,
        "passing_fraction": passing as f64 / points.len() as f64,
    });
    out.flag("window_nonempty", passing > 0);
    out.tables.push(table);
    Ok(out)
}

fn schedule_table(s: &KamSchedule) -> Table {
    let mut t = Table::new(
        "levels",
        &["j", "s", "sigma", "ln_r", "h", "ln_e", "x", "k", "ln_eta", "ln_eps", "ln_eps_tilde", "flag_a", "flag_b", "flag_c", "flag_decay", "flag_gap"],
    );
    for l in &s.levels {
        let f = l.flags;
        t.push(vec![
            l.j.to_string(),
            num(l.s),
            num(l.sigma),
            num(l.ln_r),
            num(l.h),
            num(l.ln_e),
            num(l.x),
            num(l.k),
            num(l.ln_eta),
            num(l.ln_eps),
            num(l.ln_eps_tilde),
            f.a.to_string(),
            f.b.to_string(),
            f.c.to_string(),
            f.decay.to_string(),
            f.gap.to_string(),
        ]);
    }
    t
}

/// Exponents `ln(c1 E_{j+1}) / ln(c1 E_j)` of the energy recursion.
pub fn energy_exponents(s: &KamSchedule) -> Vec<f64> {
    let ln_c1 = math::ln(s.params.c1);
    s.levels.windows(2).map(|w| (ln_c1 + w[1].ln_e) / (ln_c1 + w[0].ln_e)).collect()
}

fn schedule_summary(s: &KamSchedule) -> Value {
    json!({
        "delta": s.delta,
        "rho_prime": s.rho_prime,
        "sigma_free": s.sigma_free,
        "halvings": s.halvings,
        "sigma0": s.sigma0,
        "big_b": s.big_b,
        "levels": s.levels.len(),
        "asymptotic_h_ratio": s.asymptotic_ratio(),
        "h_ratios": s.h_ratios(),
        "energy_exponents": energy_exponents(s),
    })
}

/// The super-exponential schedule and its validity flags.
pub fn schedule(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = kam::build_schedule(&cfg.schedule_params())?;
    let mut out = Outcome::new("schedule");
    out.summary = schedule_summary(&s);
    out.flag("all_levels_valid", s.all_flags());
    out.flag("h_decay", s.h_ratios().iter().all(|r| *r < 4.0 / 9.0));
    out.flag("eps_gap", s.levels.windows(2).all(|w| w[0].ln_eps_tilde <= w[1].ln_eps - core::f64::consts::LN_2));
    out.tables.push(schedule_table(&s));
    Ok(out)
}

/// One KAM step at fixed domain data for the model scaled by
/// `scale / 2^i`, `i = 0..=halvings`.
pub fn step(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sc = &cfg.step;
    let omega = cfg.frequencies.omegas.first().ok_or_else(|| ForgeError::Config("frequencies.omegas: empty".into()))?;
    let w = complex(omega);
    let h0 = cfg.h0();
    let base = cfg.h1();
    let amp: f64 = cfg.model.modes.iter().map(|m| m.cos.abs() + m.sin.abs()).sum();
    let engine = cfg.engine_config();
    let scales: Vec<f64> = (0..=sc.halvings).map(|i| sc.scale / (1u64 << i) as f64).collect();
    let reports = scales
        .par_iter()
        .map(|s| {
            let (jet, _) = member_jet_c(&h0, &base.scaled(*s), &w)?;
            let split = SplitHamiltonian::new(&jet, &w)?;
            let p = StepParams {
                s: sc.s,
                sigma: sc.sigma,
                r: sc.r,
                ln_eta: math::ln(sc.eta),
                k_cut: sc.k_trunc as f64,
                k_trunc: sc.k_trunc,
                h: sc.h,
                ln_eps: math::ln(amp * s),
                kappa: cfg.params.kappa,
                tau: cfg.params.tau,
                a_const: cfg.schedule.a_const,
                b_const: cfg.schedule.b_const,
                r_measure: sc.r,
                inversion_h: cfg.params.kappa,
            };
            Ok(kam::kam_step(&split, &p, &engine)?.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new("halvings", &["scale", "eps_measured", "residual_in", "residual_out", "p_plus", "p_plus_template", "ratio"]);
    let mut ratios = Vec::new();
    for (i, (s, r)) in scales.iter().zip(&reports).enumerate() {
        // an empty perturbation leaves nothing to compare
        let ratio = if i == 0 || r.residual_out == 0.0 { f64::NAN } else { reports[i - 1].residual_out / r.residual_out };
        if !ratio.is_nan() {
            ratios.push(ratio);
        }
        t.push(vec![num(*s), num(r.eps_measured), num(r.residual_in), num(r.residual_out), num(r.p_plus), num(r.p_plus_template), num(ratio)]);
    }
    let mut out = Outcome::new("step");
    let trivial = reports.iter().all(|r| r.residual_in == 0.0 && r.residual_out == 0.0);
    out.summary = json!({
        "trivial": trivial,
        "ratios": ratios,
        "min_ratio": ratios.iter().cloned().reduce(f64::min),
        "max_residual_out": reports.iter().map(|r| r.residual_out).fold(0.0, f64::max),
    });
    if !all_finite(&reports.iter().map(|r| r.residual_out).collect::<Vec<_>>()) {
        return Err(ForgeError::Numerical("non-finite step residual".into()));
    }
    out.flag("quadratic_error", (trivial || ratios.len() == sc.halvings) && ratios.iter().all(|r| *r >= cfg.tolerances.step_ratio));
    out.tables.push(t);
    Ok(out)
}

/// Angle samples, contour radius and order of the `omega`-jets.
pub fn family_build(cfg: &ExperimentConfig) -> FamilyBuild {
    let w = &cfg.whitney;
    FamilyBuild {
        grid: w.grid,
        radius: w.radius,
        nodes: w.nodes,
        max_order: w.max_order,
        floor: w.jet_floor,
        c0: w.c0,
        ..FamilyBuild::default()
    }
}

fn jets(cfg: &ExperimentConfig, sched: &KamSchedule, build: &FamilyBuild) -> Result<Vec<TorusJet>> {
    let (h0, h1) = (cfg.h0(), cfg.h1());
    let req = kam::JetRequest {
        thetas: whitney::angle_grid(cfg.params.n, build.grid),
        radius: build.radius,
        nodes: build.nodes,
        max_order: build.max_order,
        floor: build.floor,
    };
    let engine = cfg.engine_config();
    cfg.frequencies
        .omegas
        .par_iter()
        .map(|om| Ok(kam::torus_jet(&h0, &h1, om, sched, &engine, cfg.mode(), &req)?))
        .collect()
}

/// KAM iteration at each configured frequency.
pub fn run(cfg: &ExperimentConfig, with_jets: bool) -> Result<Outcome> {
    let sched = kam::build_schedule(&cfg.schedule_params())?;
    let (h0, h1) = (cfg.h0(), cfg.h1());
    let ham = Hamiltonian { h0: h0.clone(), h1: h1.clone() };
    let engine = cfg.engine_config();
    let runs = cfg
        .frequencies
        .omegas
        .par_iter()
        .map(|om| {
            let w = complex(om);
            let (jet, z0) = member_jet_c(&h0, &h1, &w)?;
            let run = kam::iterate(&jet, &w, &z0, &sched, &engine, cfg.mode())?;
            let conj = run.torus.conjugacy_residual(&ham, 64);
            Ok((run, conj))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new("trace", &["omega_index", "j", "residual", "ln_eps", "eps_measured", "residual_out", "p_plus"]);
    let mut per = Vec::new();
    let mut conj_ok = true;
    let mut contraction_ok = true;
    for (i, (run, conj)) in runs.iter().enumerate() {
        for l in &run.trace {
            let (e, ro, pp) = l.report.as_ref().map(|r| (r.eps_measured, r.residual_out, r.p_plus)).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            t.push(vec![i.to_string(), l.j.to_string(), num(l.residual), num(l.ln_eps), num(e), num(ro), num(pp)]);
        }
        let fit = run.contraction_fit(0.0);
        if !conj.is_finite() {
            return Err(ForgeError::Numerical(format!("non-finite conjugacy residual at frequency {i}")));
        }
        conj_ok &= *conj <= cfg.tolerances.conjugacy;
        if let Some((p, _, _, _)) = fit {
            contraction_ok &= p >= cfg.tolerances.contraction_p;
        }
        per.push(json!({
            "omega": cfg.frequencies.omegas[i],
            "levels": run.torus.stages.len(),
            "residuals": run.residuals(),
            "conjugacy_residual": conj,
            "contraction": fit.map(|(p, ln_c, r2, pairs)| json!({ "p": p, "ln_c": ln_c, "r2": r2, "pairs": pairs })),
            "ln_template_constant": run.ln_template_constant,
        }));
    }
    let mut out = Outcome::new("run");
    let mut summary = json!({ "schedule": schedule_summary(&sched), "frequencies": per });
    if with_jets {
        let js = jets(cfg, &sched, &family_build(cfg))?;
        summary["jets"] = Value::Array(js.iter().map(jet_json).collect());
    }
    out.summary = summary;
    out.flag("conjugacy", conj_ok);
    out.flag("contraction", contraction_ok);
    out.tables.push(t);
    Ok(out)
}

fn jet_json(j: &TorusJet) -> Value {
    let mut table = serde_json::Map::new();
    for (beta, values) in j.table.orders.iter().zip(&j.table.values) {
        let key = beta.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        table.insert(key, json!(values));
    }
    json!({
        "omega": j.omega,
        "levels": j.levels,
        "clearance": j.clearance,
        "consistency": j.consistency,
        "history": j.history,
        "table": table,
    })
}

/// Green-projected approximants of the 1-D Gevrey-2 model on shrinking strips.
pub fn approx_demo(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = &cfg.approx;
    let k_max = a.k_max;
    let p = FnDerivatives { n_x: 1, n_w: 0, f: move |al: &[usize], _: &[usize], x: &[f64], _: &[f64]| approx::g2_model(al[0], x[0], k_max) };
    let specs = approx::level_specs(a.u0, a.q, a.levels, 1.0, 1.0, a.rho, &[AxisKind::Angle]);
    let samples: Vec<Vec<f64>> = (0..a.samples).map(|i| vec![-3.0 + 6.0 * i as f64 / (a.samples.max(2) - 1) as f64]).collect();
    let quad = Quadrature::default();
    let levels = specs
        .par_iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut l = approx::approx_sequence(&p, core::slice::from_ref(spec), &[a.available], &samples, &quad)?.remove(0);
            l.j = j;
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    // the extension restricted to real points is the function itself
    let reals: Vec<f64> = samples.iter().map(|s| s[0]).collect();
    let grid = approx::almost_analytic_extend(&p, &specs[0], &[a.available], vec![reals], vec![vec![0.0]])?;
    let real_slice = grid
        .points()
        .iter()
        .zip(&grid.values)
        .map(|(z, v)| (v.re - approx::g2_model(0, z[0].re, k_max)).abs().max(v.im.abs()))
        .fold(0.0, f64::max);
    let mut t = Table::new("levels", &["j", "u_j", "err_sup", "err_d1", "dbar_defect"]);
    for l in &levels {
        t.push(vec![l.j.to_string(), num(l.spec.u), num(l.err_sup), num(l.err_d1), num(l.dbar_defect)]);
    }
    let xs: Vec<f64> = levels.iter().map(|l| math::powf(l.spec.u, -1.0 / (a.rho - 1.0))).collect();
    let ys: Vec<f64> = levels.iter().map(|l| math::ln(l.err_sup)).collect();
    if !all_finite(&ys) {
        return Err(ForgeError::Numerical("approximation error vanished or diverged".into()));
    }
    let (intercept, slope, r2) = math::linear_fit(&xs, &ys);
    let mut out = Outcome::new("approx-demo");
    out.summary = json!({
        "slope": slope,
        "intercept": intercept,
        "r2": r2,
        "real_slice_error": real_slice,
        "imag_sup": levels.iter().map(|l| l.imag_sup).fold(0.0, f64::max),
        "orders": levels.iter().map(|l| l.orders.clone()).collect::<Vec<_>>(),
    });
    out.flag("negative_slope", slope < 0.0);
    out.flag("r_squared", r2 >= cfg.tolerances.r_squared);
    out.flag("real_slice", real_slice <= 1e-13);
    out.tables.push(t);
    Ok(out)
}

/// Per-component round trip of torus jets through Fourier weights, Whitney
/// extension and reassembly.
pub fn whitney_cmd(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sched = kam::build_schedule(&cfg.schedule_params())?;
    let build = family_build(cfg);
    let js = jets(cfg, &sched, &build)?;
    let mut out = whitney_round_trip(&js, &build, cfg.tolerances.round_trip)?;
    out.summary["jets"] = Value::Array(js.iter().map(|j| json!({ "omega": j.omega, "levels": j.levels, "consistency": j.consistency })).collect());
    Ok(out)
}

pub fn whitney_round_trip(js: &[TorusJet], build: &FamilyBuild, tol: f64) -> Result<Outcome> {
    let ajs = nf::angle_jets(js, build.grid, build.constants)?;
    let rows = ajs
        .par_iter()
        .enumerate()
        .map(|(c, aj)| {
            let modes = whitney::fourier_weight(aj, build.c0)?;
            let ext = whitney::extend_modes(&modes, &build.extend)?;
            let count = modes.modes.len();
            let asm = whitney::assemble(&modes, ext)?;
            let err = whitney::round_trip_error(&asm, aj);
            // Taylor data at the sample itself, order by order
            let at_point = aj
                .orders
                .iter()
                .enumerate()
                .map(|(o, beta)| {
                    whitney::angle_grid(aj.n, aj.grid)
                        .iter()
                        .enumerate()
                        .map(|(t, th)| (asm.eval(th, &aj.points[0], beta, 1e-3).re - aj.values[0][o][t]).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            Ok((c, count, err, at_point))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new("components", &["component", "modes", "round_trip_error", "first_point_error"]);
    for (c, m, e, p) in &rows {
        t.push(vec![c.to_string(), m.to_string(), num(*e), num(*p)]);
    }
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let worst_point = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    let mut out = Outcome::new("whitney");
    out.summary = json!({ "max_round_trip_error": worst, "max_first_point_error": worst_point, "components": rows.len() });
    out.flag("round_trip", worst <= tol);
    out.tables.push(t);
    Ok(out)
}

/// Everything the normal-form experiments share.
pub struct NormalFormRun {
    pub reduction: nf::FamilyReduction,
    pub jets: Vec<TorusJet>,
    pub nf: NormalForm,
}

pub fn build_normal_form(cfg: &ExperimentConfig) -> Result<NormalFormRun> {
    let (h0, h1) = (cfg.h0(), cfg.h1());
    let ham = Hamiltonian { h0: h0.clone(), h1 };
    let s = &cfg.normalform;
    let reduction = nf::reduce_to_family(&ham, cfg.params.kappa, cfg.params.eps_h, s.eps_threshold, &cfg.frequencies.omegas)?;
    let sched = kam::build_schedule(&cfg.schedule_params())?;
    let build = family_build(cfg);
    let js = jets(cfg, &sched, &build)?;
    let family = nf::family_from_jets(&h0, &js, &build)?;
    let nfc = NormalFormConfig { grid: s.grid, lagrange_tol: s.lagrange_tol, inversion_radius: s.inversion_radius };
    let data = nf::generating_potential(Box::new(family), &cfg.frequencies.omegas, &nfc)?;
    let normal = nf::build_chi(data, &ham)?;
    Ok(NormalFormRun { reduction, jets: js, nf: normal })
}

/// Seeded angle/action samples near `E_kappa`.
pub fn symplectic_points(cfg: &ExperimentConfig, e_kappa: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = &cfg.normalform;
    (0..s.symplectic_points)
        .map(|i| {
            let e = &e_kappa[i % e_kappa.len()];
            let phi: Vec<f64> = e.iter().map(|_| rng.gen_range(0.0..core::f64::consts::TAU)).collect();
            let act: Vec<f64> = e.iter().map(|v| v + rng.gen_range(-s.symplectic_spread..=s.symplectic_spread)).collect();
            (phi, act)
        })
        .collect()
}

/// One drift run: start index, offset along `e_1`, trace.
pub type DriftRun = (usize, f64, nf::DriftTrace);

pub fn drift_runs(cfg: &ExperimentConfig, normal: &NormalForm, offsets: &[f64], t_offset: f64) -> Result<Vec<DriftRun>> {
    let s = &cfg.normalform;
    let mut jobs: Vec<(usize, f64, f64)> = (0..normal.e_kappa.len()).map(|i| (i, 0.0, s.t_max)).collect();
    for i in 0..normal.e_kappa.len() {
        jobs.extend(offsets.iter().map(|d| (i, *d, t_offset)));
    }
    jobs.par_iter()
        .map(|(i, d, t)| {
            let mut start = normal.e_kappa[*i].clone();
            start[0] += d;
            let dc = nf::DriftConfig { t_max: *t, h_int: s.h_int, samples: s.samples, threshold: s.drift_threshold };
            Ok((*i, *d, nf::drift_experiment(normal, &s.phi0, &start, &dc)?))
        })
        .collect()
}

fn drift_table(runs: &[DriftRun]) -> Table {
    let mut t = Table::new("drift", &["start", "offset", "t", "drift"]);
    for (i, d, tr) in runs {
        for (time, v) in tr.times.iter().zip(&tr.drift) {
            t.push(vec![i.to_string(), num(*d), num(*time), num(*v)]);
        }
    }
    t
}

/// Onset times are nonincreasing in the offset (missing onsets count as later than any).
fn onset_ordered(runs: &[DriftRun]) -> bool {
    let mut ok = true;
    for (i, d, tr) in runs {
        for (j, e, other) in runs {
            if i == j && *d > 0.0 && *e > 0.0 && e < d {
                let far = tr.onset.unwrap_or(f64::INFINITY);
                let near = other.onset.unwrap_or(f64::INFINITY);
                ok &= near >= far;
            }
        }
    }
    ok
}

/// Normal form at the configured frequencies: flatness, symplecticity and drift.
pub fn normalform(cfg: &ExperimentConfig) -> Result<Outcome> {
    normalform_report(cfg, &build_normal_form(cfg)?)
}

/// The `normalform` checks on an already built normal form.
pub fn normalform_report(cfg: &ExperimentConfig, run: &NormalFormRun) -> Result<Outcome> {
    let normal = &run.nf;
    let s = &cfg.normalform;
    let fl = normal.flatness(s.flat_grid, s.flat_h)?;
    let pts = symplectic_points(cfg, &normal.e_kappa);
    let defects = pts.par_iter().map(|p| Ok(normal.symplectic_defect(core::slice::from_ref(p), s.symplectic_h)?)).collect::<Result<Vec<_>>>()?;
    let sympl = defects.iter().cloned().fold(0.0, f64::max);
    let runs = drift_runs(cfg, normal, &s.offsets, s.offset_t_max)?;
    let on_torus: Vec<&DriftRun> = runs.iter().filter(|r| r.1 == 0.0).collect();
    let max_drift = on_torus.iter().flat_map(|r| r.2.drift.iter()).cloned().fold(0.0, f64::max);
    let energy = runs.iter().map(|r| r.2.energy_error).fold(0.0, f64::max);
    let slices = &normal.data.slices;
    let mut out = Outcome::new("normalform");
    out.summary = json!({
        "reduction": {
            "r": run.reduction.r,
            "big_r": run.reduction.big_r,
            "degenerate": run.reduction.degenerate,
            "p_norm": run.reduction.p_norm,
            "template": run.reduction.template,
            "a_measured": run.reduction.a_measured,
        },
        "jet_consistency": run.jets.iter().map(|j| j.consistency.clone()).collect::<Vec<_>>(),
        "curl_defect": slices.iter().map(|s| s.curl_defect).fold(0.0, f64::max),
        "grad_defect": slices.iter().map(|s| s.grad_defect).fold(0.0, f64::max),
        "potential_coeff_max": slices.iter().flat_map(|s| s.q.coeffs.iter()).map(|c| c.cabs()).fold(0.0, f64::max),
        "e_kappa": normal.e_kappa,
        "twist_defect": normal.twist_defect,
        "flatness": { "max_r": fl.max_r, "max_dr": fl.max_dr },
        "symplectic_defect": sympl,
        "symplectic_points": pts.len(),
        "max_on_torus_drift": max_drift,
        "energy_error": energy,
        "onsets": runs.iter().map(|(i, d, tr)| json!({ "start": i, "offset": d, "onset": tr.onset, "final_drift": tr.drift.last() })).collect::<Vec<_>>(),
    });
    out.flag("flat_r", fl.max_r <= cfg.tolerances.flatness);
    out.flag("flat_dr", fl.max_dr <= cfg.tolerances.flatness);
    out.flag("symplectic", sympl <= cfg.tolerances.symplectic);
    out.flag("on_torus_drift", max_drift <= cfg.tolerances.drift);
    out.flag("energy", energy <= cfg.tolerances.energy);
    out.flag("onset_ordering", onset_ordered(&runs));
    out.tables.push(drift_table(&runs));
    Ok(out)
}

pub fn stability_params(cfg: &ExperimentConfig) -> StabilityParams {
    let s = &cfg.stability;
    StabilityParams {
        kappa: cfg.params.kappa,
        a: s.a,
        c1: s.c1,
        c2: s.c2,
        rho: cfg.params.rho,
        tau: cfg.params.tau,
        alpha: s.alpha.clone(),
        beta: s.beta.clone(),
    }
}

/// Discrete and closed-form stability bounds on a log grid of distances,
/// optionally with drift runs up to `t_max`.
pub fn stability(cfg: &ExperimentConfig, d_max: Option<f64>, t_max: Option<f64>) -> Result<Outcome> {
    let s = &cfg.stability;
    let p = stability_params(cfg);
    let d_max = d_max.unwrap_or(s.d_max);
    if !(d_max > s.d_min) {
        return Err(ForgeError::Config("stability.d_max: must exceed d_min".into()));
    }
    let ds: Vec<f64> = (0..s.count).map(|i| s.d_min * math::powf(d_max / s.d_min, i as f64 / (s.count - 1) as f64)).collect();
    let rows: Vec<(f64, f64, usize, f64, f64)> = ds
        .par_iter()
        .map(|d| {
            let (disc, m) = nf::stability_bound_discrete(*d, &p, s.m_max);
            (*d, disc, m, nf::stability_bound(*d, &p), nf::stability_exponential(*d, &p))
        })
        .collect();
    let mut t = Table::new("bound", &["d", "bound_discrete", "m", "bound_closed", "exponential", "ratio"]);
    for (d, disc, m, closed, e) in &rows {
        t.push(vec![num(*d), num(*disc), m.to_string(), num(*closed), num(*e), num(disc / closed)]);
    }
    let checks: Vec<Value> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|d| {
            let (disc, m) = nf::stability_bound_discrete(*d, &p, s.m_max);
            let closed = nf::stability_bound(*d, &p);
            json!({ "d": d, "discrete": disc, "m": m, "closed": closed, "ratio": disc / closed })
        })
        .collect();
    let factor_ok = checks.iter().all(|c| {
        let r = c["ratio"].as_f64().unwrap_or(f64::NAN);
        r <= s.factor && r >= 1.0 / s.factor
    });
    let monotone = rows.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].3 >= w[0].3 && w[1].4 >= w[0].4);
    let mut out = Outcome::new("stability");
    out.summary = json!({
        "exponent_index": p.rho_prime() - 1.0,
        "ln_prefactor": p.ln_prefactor(),
        "checkpoints": checks,
    });
    out.flag("discrete_matches_closed_form", factor_ok);
    out.flag("monotone_in_d", monotone);
    out.tables.push(t);
    if let Some(tm) = t_max {
        let run = build_normal_form(cfg)?;
        let runs = drift_runs(cfg, &run.nf, &cfg.normalform.offsets, tm)?;
        out.summary["drift"] = Value::Array(
            runs.iter()
                .filter(|r| r.1 > 0.0)
                .map(|(i, d, tr)| json!({ "start": i, "offset": d, "onset": tr.onset, "final_drift": tr.drift.last(), "bound": nf::stability_bound(*d, &p) }))
                .collect(),
        );
        out.flag("onset_ordering", onset_ordered(&runs));
        out.tables.push(drift_table(&runs));
    }
    Ok(out)
}

fn cert_json(c: &GevreyCertificate) -> Value {
    json!({ "a": c.a, "h1": c.h1, "h2": c.h2, "rho": c.rho, "rho_p": c.rho_p, "eps": c.eps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertKind {
    Compose,
    Invert,
}

/// Constant chains of the certificate calculus and their dominance audits.
pub fn cert_cmd(cfg: &ExperimentConfig, kind: CertKind) -> Result<Outcome> {
    let unit = |a: f64, h1: f64, h2: f64, rho: f64, rho_p: f64| GevreyCertificate { a, h1, h2, rho, rho_p, eps: 1.0 };
    match kind {
        CertKind::Compose => {
            // single-variable unit cases of the two composition rules
            let c3 = gevrey::compose_cert(&unit(1.0, 1.0, 1.0, 1.0, 2.0), &unit(1.0, 0.0, 1.0, 1.0, 2.0), 1)?;
            let c4 = gevrey::compose_cert_joint(&unit(1.0, 1.0, 1.0, 1.0, 1.0), &unit(1.0, 1.0, 1.0, 1.0, 1.0), 1)?;
            let reports = cert::corpus().par_iter().map(|f| Ok(cert::certify(f, 5, cfg.tolerances.dominance)?)).collect::<Result<Vec<_>>>()?;
            let mut t = Table::new("corpus", &["index", "outer_a", "inner_a", "composed_h2", "checked", "violations", "worst_ratio"]);
            for (i, r) in reports.iter().enumerate() {
                t.push(vec![i.to_string(), num(r.outer.a), num(r.inner.a), num(r.composed.h2), r.checked.to_string(), r.violations.to_string(), num(r.worst_ratio)]);
            }
            let violations: usize = reports.iter().map(|r| r.violations).sum();
            let mut out = Outcome::new("cert-compose");
            out.summary = json!({
                "outer_composition_unit": cert_json(&c3),
                "joint_composition_unit": cert_json(&c4),
                "corpus": reports.iter().map(|r| json!({
                    "outer": cert_json(&r.outer),
                    "inner": cert_json(&r.inner),
                    "composed": cert_json(&r.composed),
                    "worst_ratio": r.worst_ratio,
                })).collect::<Vec<_>>(),
                "violations": violations,
            });
            out.flag("outer_unit_constant", c3.h2 == 8.0);
            out.flag("joint_unit_constant", c4.h1 == 8.0 && c4.h2 == 9.0);
            out.flag("corpus_dominated", violations == 0);
            out.tables.push(t);
            Ok(out)
        }
        CertKind::Invert => {
            // x - eps x^2 = y has the inverse coefficients p! Catalan(p-1) eps^(p-1)
            let eps = 0.2;
            let order = 8;
            let table = gevrey::majorant_solution(eps, 1.0, 1, 0, 1.0, 1.0, order)?;
            let mut catalan = vec![1.0f64];
            for k in 1..order {
                let prev = catalan[k - 1];
                catalan.push(prev * 2.0 * (2 * k - 1) as f64 / (k + 1) as f64);
            }
            let mut t = Table::new("majorant", &["order", "exact", "majorant", "ratio"]);
            let mut dominated = true;
            for p in 2..=order {
                let u = math::factorial(p) * catalan[p - 1] * math::powi(eps, p as i32 - 1);
                let v = table.value(&[p], &[]);
                dominated &= v > 0.0 && u <= v * (1.0 + cfg.tolerances.dominance);
                t.push(vec![p.to_string(), num(u), num(v), num(u / v)]);
            }
            // near-identity inversion of x - 0.1 sin x
            let big_f = |x: &[f64]| vec![0.1 * math::sin(x[0])];
            let domain = gevrey::NearIdentityDomain { samples: (0..=20).map(|i| vec![-1.0 + 0.1 * i as f64]).collect(), h: 1.0, upsilon: 0.15 };
            let inv = gevrey::invert_near_identity(&big_f, &domain, &[0.3], None)?;
            let back = inv.point[0] - 0.1 * math::sin(inv.point[0]);
            let mut out = Outcome::new("cert-invert");
            out.summary = json!({
                "eps_a": eps,
                "order": order,
                "a5_constant_rho2": gevrey::a5_constant(2.0, 12),
                "inversion": { "target": 0.3, "point": inv.point, "iterations": inv.iterations, "residual": inv.residual, "round_trip": (back - 0.3).abs() },
            });
            out.flag("majorant_dominates", dominated);
            out.flag("inversion_round_trip", (back - 0.3).abs() <= 1e-12);
            out.tables.push(t);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(onset: Option<f64>) -> nf::DriftTrace {
        nf::DriftTrace { times: vec![1.0], drift: vec![0.0], onset, energy_error: 0.0 }
    }

    #[test]
    fn onsets_must_not_come_earlier_closer_in() {
        let runs = vec![(0, 0.0, trace(None)), (0, 0.05, trace(Some(20.0))), (0, 0.025, trace(None))];
        assert!(onset_ordered(&runs));
        let runs = vec![(0, 0.05, trace(Some(20.0))), (0, 0.025, trace(Some(10.0)))];
        assert!(!onset_ordered(&runs));
        let runs = vec![(0, 0.05, trace(None)), (0, 0.025, trace(Some(10.0)))];
        assert!(!onset_ordered(&runs));
    }

    #[test]
    fn schedule_energy_law_is_three_halves() {
        let out = schedule(&ExperimentConfig::default()).unwrap();
        assert!(out.ok());
        for e in out.summary["energy_exponents"].as_array().unwrap() {
            assert!((e.as_f64().unwrap() - 1.5).abs() < 1e-12);
        }
        assert_eq!(out.table("levels").unwrap().header[0], "j");
    }

    #[test]
    fn dioph_table_has_one_row_per_grid_point() {
        let args = DiophArgs { res: Some(5), k_scan: Some(20), ..DiophArgs::default() };
        let out = dioph(&ExperimentConfig::default(), &args).unwrap();
        let t = out.table("grid").unwrap();
        assert_eq!(t.rows.len(), 25);
        assert_eq!(t.header, ["omega1", "omega2", "boundary_dist", "min_div", "passes"]);
        let bad = DiophArgs { lo: Some(vec![0.0]), ..DiophArgs::default() };
        assert!(matches!(dioph(&ExperimentConfig::default(), &bad), Err(ForgeError::Config(_))));
    }

    #[test]
    fn inverse_series_is_dominated_by_the_majorant() {
        let out = cert_cmd(&ExperimentConfig::default(), CertKind::Invert).unwrap();
        assert!(out.ok(), "{:?}", out.flags);
        // 2! Catalan(1) 0.2 = 0.4 for x - 0.2 x^2
        assert_eq!(out.table("majorant").unwrap().rows[0][1], "0.4");
    }

    #[test]
    fn stability_rejects_an_empty_range() {
        let err = stability(&ExperimentConfig::default(), Some(1e-7), None).unwrap_err();
        assert!(matches!(err, ForgeError::Config(_)));
    }

    #[test]
    fn seeded_points_repeat_and_stay_near_the_torus() {
        let cfg = ExperimentConfig::default();
        let e = vec![vec![1.0, 0.5]];
        let a = symplectic_points(&cfg, &e);
        assert_eq!(a, symplectic_points(&cfg, &e));
        assert_eq!(a.len(), cfg.normalform.symplectic_points);
        for (_, act) in &a {
            assert!((act[0] - 1.0).abs() <= cfg.normalform.symplectic_spread);
        }
    }
}

//! Normal form of the two-mode fixture at `eps_H = 1e-5`.

use std::sync::OnceLock;

use torus_core::kam::{build_schedule, EngineConfig, Mode, ScheduleParams};
use torus_core::model::{Hamiltonian, IntegrableHamiltonian, Perturbation};
use torus_core::normal_form::*;
use torus_core::whitney;

const EPS: f64 = 1e-5;

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

fn ham() -> Hamiltonian {
    Hamiltonian {
        h0: IntegrableHamiltonian::quadratic(vec![-2.0, -2.0], vec![2.0, 2.0]),
        h1: Perturbation::trig(2, &[(vec![1, 0], EPS, 0.0), (vec![1, 1], EPS, 0.0)]),
    }
}

fn fixture() -> &'static NormalForm {
    static NF: OnceLock<NormalForm> = OnceLock::new();
    NF.get_or_init(|| {
        let h = ham();
        let sched = build_schedule(&ScheduleParams::new(2.0, 1.5, 2, 0.01, 0.01)).unwrap();
        let cfg = EngineConfig { check_conditions: false, floor: 1e-28, ..EngineConfig::default() };
        let build = FamilyBuild { nodes: 10, ..FamilyBuild::default() };
        let omegas = vec![vec![1.0, golden()]];
        let (fam, _) = torus_family(&h.h0, &h.h1, &omegas, &sched, &cfg, Mode::Gevrey, &build).unwrap();
        let data = generating_potential(Box::new(fam), &omegas, &NormalFormConfig::default()).unwrap();
        build_chi(data, &h).unwrap()
    })
}

#[test]
fn generating_potential_is_lagrangian_and_periodic() {
    let s = &fixture().data.slices[0];
    assert!(s.curl_defect <= 1e-8 && s.grad_defect <= 1e-8);
    for x in [[0.3, 1.2], [2.0, -0.7]] {
        let a = line_potential(s, &x, Path::Radial, 40);
        let b = line_potential(s, &x, Path::AxisOrdered, 40);
        assert!((a - b).abs() <= 1e-9);
    }
}

#[test]
fn remainder_flat_on_e_kappa() {
    let fl = fixture().flatness(9, 1e-4).unwrap();
    assert!(fl.max_r <= 1e-6 && fl.max_dr <= 1e-6, "{fl:?}");
}

#[test]
fn chi_symplectic_near_e_kappa() {
    let nf = fixture();
    let e = &nf.e_kappa[0];
    let mut rng = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        (rng >> 11) as f64 / (1u64 << 53) as f64
    };
    let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
        .map(|_| {
            let phi = vec![2.0 * std::f64::consts::PI * next(), 2.0 * std::f64::consts::PI * next()];
            let act = vec![e[0] + 4e-4 * (next() - 0.5), e[1] + 4e-4 * (next() - 0.5)];
            (phi, act)
        })
        .collect();
    assert!(nf.symplectic_defect(&pts, 1e-5).unwrap() <= 1e-8);
}

#[test]
fn chi_maps_zero_section_onto_torus() {
    let nf = fixture();
    let fib = nf.fiber(&nf.e_kappa[0]).unwrap();
    let phis = whitney::angle_grid(2, 5);
    for phi in &phis {
        let (th, j) = fib.chi(phi).unwrap();
        let f = fib.slice.field(&th);
        assert!((j[0] - f[0]).abs() <= 1e-8 && (j[1] - f[1]).abs() <= 1e-8);
    }
}

#[test]
fn invariant_torus_does_not_drift() {
    let nf = fixture();
    let cfg = DriftConfig { t_max: 1e4, h_int: 0.008, samples: 40, threshold: 1e-9 };
    let tr = drift_experiment(nf, &[0.1, 0.2], &nf.e_kappa[0], &cfg).unwrap();
    assert!(tr.drift.iter().all(|d| *d <= 1e-7));
    assert!(tr.energy_error <= 1e-10);
}

#[test]
fn drift_onset_later_closer_to_e_kappa() {
    let nf = fixture();
    let cfg = DriftConfig { t_max: 1e3, h_int: 0.008, samples: 100, threshold: 1e-10 };
    let onset = |d: f64| {
        let mut s = nf.e_kappa[0].clone();
        s[0] += d;
        let tr = drift_experiment(nf, &[0.1, 0.2], &s, &cfg).unwrap();
        (tr.onset.unwrap_or(f64::INFINITY), *tr.drift.last().unwrap())
    };
    let (far, far_drift) = onset(0.05);
    let (near, near_drift) = onset(0.025);
    assert!(far.is_finite());
    assert!(near > far);
    assert!(near_drift < far_drift);
}

#[test]
fn perturbation_size_matches_template() {
    let red = reduce_to_family(&ham(), 1e-2, EPS, 1e-3, &[vec![1.0, golden()]]).unwrap();
    assert!((red.r - 1e-2 * EPS.sqrt()).abs() < 1e-18);
    assert!(red.p_norm <= (red.a_measured + 1.0) * red.template * (1.0 + 1e-12));
    // sup of eps(cos t1 + cos(t1 + t2)) is 2 eps at t = 0; the quadratic part adds r^2
    assert!((red.p_norm - (2.0 * EPS + red.r * red.r)).abs() < 1e-15);
    assert!((red.a_measured - (red.p_norm / red.template - 1.0)).abs() < 1e-9);
}

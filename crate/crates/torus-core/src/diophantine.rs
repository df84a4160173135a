//! Brute-force small-divisor scans and sampled Diophantine windows.
//!
//! `omega` is `(kappa, tau)`-Diophantine up to `K` if
//! `|<omega, k>| |k|_1^tau >= kappa` for every `0 < |k|_1 <= K`. The scan is
//! a certificate up to the cutoff only.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

pub const DEFAULT_K_SCAN: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiophantineError {
    #[error("tau = {tau} must exceed n - 1 = {}", .n - 1)]
    TauTooSmall { tau: f64, n: usize },
    #[error("kappa = {0} must be nonnegative")]
    NegativeKappa(f64),
    #[error("grid resolution {0} is below 2")]
    ResolutionTooSmall(usize),
    #[error("box has {0} lower and {1} upper bounds")]
    DimensionMismatch(usize, usize),
    #[error("no grid frequency passes the Diophantine filter")]
    EmptyWindow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiophantineParams {
    pub kappa: f64,
    pub tau: f64,
    pub k_scan: usize,
}

impl DiophantineParams {
    pub fn validate(&self, n: usize) -> Result<(), DiophantineError> {
        if !(self.tau > n as f64 - 1.0) {
            return Err(DiophantineError::TauTooSmall { tau: self.tau, n });
        }
        if !(self.kappa >= 0.0) {
            return Err(DiophantineError::NegativeKappa(self.kappa));
        }
        Ok(())
    }
}

/// Smallest weighted divisor together with a vector attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct DivisorWitness {
    pub value: f64,
    pub k: Vec<i32>,
}

/// `min_{0 < |k|_1 <= k_scan} |<omega,k>| |k|_1^tau`; `+inf` when `k_scan = 0`.
pub fn min_divisor(omega: &[f64], tau: f64, k_scan: usize) -> f64 {
    min_divisor_witness(omega, tau, k_scan).value
}

/// Same scan as [`min_divisor`], also returning the minimizing `k` (the first
/// one met in enumeration order).
///
/// Only one of each pair `+-k` is visited: the first nonzero entry is
/// positive.
pub fn min_divisor_witness(omega: &[f64], tau: f64, k_scan: usize) -> DivisorWitness {
    let n = omega.len();
    let weights: Vec<f64> = (0..=k_scan).map(|o| math::powf(o as f64, tau)).collect();
    let mut best = DivisorWitness { value: f64::INFINITY, k: vec![0; n] };
    let mut k = vec![0i32; n];
    scan(omega, &weights, &mut k, 0, k_scan, false, &mut best);
    best
}

fn scan(
    omega: &[f64],
    weights: &[f64],
    k: &mut [i32],
    pos: usize,
    budget: usize,
    leading_set: bool,
    best: &mut DivisorWitness,
) {
    let n = k.len();
    if pos == n {
        if !leading_set {
            return;
        }
        let mut dot = 0.0;
        let mut ord = 0usize;
        for i in 0..n {
            dot += omega[i] * k[i] as f64;
            ord += k[i].unsigned_abs() as usize;
        }
        let v = math::abs(dot) * weights[ord];
        if v < best.value {
            best.value = v;
            best.k.copy_from_slice(k);
        }
        return;
    }
    let b = budget as i32;
    let lo = if leading_set { -b } else { 0 };
    for v in lo..=b {
        k[pos] = v;
        scan(omega, weights, k, pos + 1, budget - v.unsigned_abs() as usize, leading_set || v != 0, best);
    }
    k[pos] = 0;
}

/// One tagged grid frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFrequency {
    pub omega: Vec<f64>,
    pub boundary_distance: f64,
    pub min_divisor: f64,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyWindow {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: usize,
    pub kappa: f64,
    pub tau: f64,
    pub k_scan: usize,
    pub points: Vec<GridFrequency>,
}

impl FrequencyWindow {
    pub fn passing(&self) -> impl Iterator<Item = &GridFrequency> {
        self.points.iter().filter(|p| p.passes)
    }

    /// Fraction of grid points that pass: a sampled estimate of the relative
    /// measure of the Diophantine subset.
    pub fn passing_fraction(&self) -> f64 {
        self.passing().count() as f64 / self.points.len() as f64
    }
}

/// Tensor grid `lo + (hi - lo) i / (res - 1)`, first axis fastest.
pub fn grid_points(lo: &[f64], hi: &[f64], res: usize) -> Vec<Vec<f64>> {
    let n = lo.len();
    let total = res.pow(n as u32);
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut w = vec![0.0; n];
        for i in 0..n {
            let t = (idx % res) as f64 / (res - 1) as f64;
            idx /= res;
            w[i] = lo[i] + (hi[i] - lo[i]) * t;
        }
        out.push(w);
    }
    out
}

pub fn boundary_distance(omega: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..omega.len() {
        d = d.min(omega[i] - lo[i]).min(hi[i] - omega[i]);
    }
    d
}

pub fn tag_point(omega: Vec<f64>, lo: &[f64], hi: &[f64], params: &DiophantineParams) -> GridFrequency {
    let bd = boundary_distance(&omega, lo, hi);
    let md = min_divisor(&omega, params.tau, params.k_scan);
    GridFrequency { passes: bd >= params.kappa && md >= params.kappa, boundary_distance: bd, min_divisor: md, omega }
}

/// Assemble a window from already tagged points (in grid order).
pub fn window_from_tags(
    lo: &[f64],
    hi: &[f64],
    res: usize,
    params: &DiophantineParams,
    points: Vec<GridFrequency>,
) -> Result<FrequencyWindow, DiophantineError> {
    if !points.iter().any(|p| p.passes) {
        return Err(DiophantineError::EmptyWindow);
    }
    Ok(FrequencyWindow {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        resolution: res,
        kappa: params.kappa,
        tau: params.tau,
        k_scan: params.k_scan,
        points,
    })
}

pub fn check_window_args(lo: &[f64], hi: &[f64], res: usize, params: &DiophantineParams) -> Result<(), DiophantineError> {
    if lo.len() != hi.len() {
        return Err(DiophantineError::DimensionMismatch(lo.len(), hi.len()));
    }
    if res < 2 {
        return Err(DiophantineError::ResolutionTooSmall(res));
    }
    params.validate(lo.len())
}

/// Tag every point of a `res^n` grid of the box `[lo, hi]`.
pub fn build_window(
    lo: &[f64],
    hi: &[f64],
    res: usize,
    params: &DiophantineParams,
) -> Result<FrequencyWindow, DiophantineError> {
    check_window_args(lo, hi, res, params)?;
    let pts = grid_points(lo, hi, res).into_iter().map(|w| tag_point(w, lo, hi, params)).collect();
    window_from_tags(lo, hi, res, params, pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golden() -> f64 {
        (math::sqrt(5.0) - 1.0) / 2.0
    }

    // Full-box scan over both signs with its own loop structure.
    fn box_scan(omega: [f64; 2], tau: f64, kmax: i32) -> f64 {
        let mut best = f64::INFINITY;
        for a in -kmax..=kmax {
            for b in -kmax..=kmax {
                let o = (a.abs() + b.abs()) as usize;
                if o == 0 || o > kmax as usize {
                    continue;
                }
                let mut dot = 0.0;
                dot += omega[0] * a as f64;
                dot += omega[1] * b as f64;
                let v = math::abs(dot) * math::powf(o as f64, tau);
                if v < best {
                    best = v;
                }
            }
        }
        best
    }

    #[test]
    fn rational_resonances_give_exact_zero() {
        assert_eq!(min_divisor(&[1.0, 0.5], 2.0, 3), 0.0);
        assert_eq!(min_divisor(&[1.0, 0.5], 0.3, 7), 0.0);
        assert_eq!(min_divisor(&[1.0, 0.0], 2.0, 1), 0.0);
    }

    #[test]
    fn golden_scan_matches_box_oracle_bitwise() {
        let w = [1.0, golden()];
        let a = min_divisor(&w, 2.0, 1000);
        let b = box_scan(w, 2.0, 1000);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn golden_min_divisor_fixture() {
        let m = min_divisor(&[1.0, golden()], 2.0, 1000);
        assert_eq!(m.to_bits(), 4603741974828149072);
        assert_eq!(min_divisor_witness(&[1.0, golden()], 2.0, 1000).k, vec![0, 1]);
    }

    // The unit box sampled at spacing 1/49 consists of rational frequencies,
    // each resonant at some |k| <= 196, so nothing survives the scan.
    #[test]
    fn rational_grid_window_is_empty() {
        let p = DiophantineParams { kappa: 1e-3, tau: 1.5, k_scan: 200 };
        assert_eq!(build_window(&[1.0, 1.0], &[2.0, 2.0], 50, &p), Err(DiophantineError::EmptyWindow));
        let worst = grid_points(&[1.0, 1.0], &[2.0, 2.0], 50)
            .into_iter()
            .map(|w| min_divisor(&w, 1.5, 200))
            .fold(0.0, f64::max);
        assert!(worst < 1e-10);
    }

    #[test]
    fn irrational_box_window_fixture() {
        let g = 1.0 + golden();
        let p = DiophantineParams { kappa: 1e-3, tau: 1.5, k_scan: 200 };
        let w = build_window(&[1.0, 1.0], &[g, g], 50, &p).unwrap();
        assert_eq!(w.passing().count(), 2256);
        let again = build_window(&[1.0, 1.0], &[g, g], 50, &p).unwrap();
        assert_eq!(w, again);
    }

    #[test]
    fn witness_attains_value() {
        let w = [1.0, golden()];
        let wit = min_divisor_witness(&w, 1.5, 50);
        let o = order_of(&wit.k);
        let v = math::abs(w[0] * wit.k[0] as f64 + w[1] * wit.k[1] as f64) * math::powf(o as f64, 1.5);
        assert_eq!(v, wit.value);
    }

    fn order_of(k: &[i32]) -> usize {
        k.iter().map(|v| v.unsigned_abs() as usize).sum()
    }

    #[test]
    fn zero_cutoff_is_unconstrained() {
        assert_eq!(min_divisor(&[1.0, 0.5], 1.5, 0), f64::INFINITY);
        let p = DiophantineParams { kappa: 0.0, tau: 1.5, k_scan: 0 };
        let w = build_window(&[1.0, 1.0], &[2.0, 2.0], 5, &p).unwrap();
        assert_eq!(w.passing_fraction(), 1.0);
    }

    #[test]
    fn kappa_beyond_half_width_empties_window() {
        let p = DiophantineParams { kappa: 0.6, tau: 1.5, k_scan: 0 };
        assert_eq!(build_window(&[1.0, 1.0], &[2.0, 2.0], 11, &p), Err(DiophantineError::EmptyWindow));
    }

    #[test]
    fn tau_must_exceed_n_minus_one() {
        let p = DiophantineParams { kappa: 1e-3, tau: 1.0, k_scan: 10 };
        assert!(matches!(build_window(&[1.0, 1.0], &[2.0, 2.0], 3, &p), Err(DiophantineError::TauTooSmall { .. })));
    }

    #[test]
    fn window_tags_follow_definition() {
        let p = DiophantineParams { kappa: 1e-3, tau: 1.5, k_scan: 30 };
        let g = 1.0 + golden();
        let w = build_window(&[1.0, 1.0], &[g, g], 9, &p).unwrap();
        assert_eq!(w.passing().count(), 42);
        for g in &w.points {
            assert_eq!(g.passes, g.boundary_distance >= 1e-3 && g.min_divisor >= 1e-3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn larger_cutoff_never_increases_min(a in 0.5f64..2.0, b in 0.5f64..2.0, k in 1usize..30) {
            let w = [a, b];
            prop_assert!(min_divisor(&w, 1.5, k + 5) <= min_divisor(&w, 1.5, k));
        }

        #[test]
        fn scaling_is_linear(a in 0.5f64..2.0, b in 0.5f64..2.0, lam in 0.1f64..10.0) {
            let w = [a, b];
            let s = [lam * a, lam * b];
            let m = min_divisor(&w, 1.5, 25);
            let ms = min_divisor(&s, 1.5, 25);
            prop_assert!((ms - lam * m).abs() <= 1e-12 * (1.0 + lam * m));
        }

        #[test]
        fn larger_kappa_never_enlarges_window(k1 in 0.0f64..0.05, dk in 0.0f64..0.05) {
            let p1 = DiophantineParams { kappa: k1, tau: 1.5, k_scan: 15 };
            let p2 = DiophantineParams { kappa: k1 + dk, tau: 1.5, k_scan: 15 };
            let pts = grid_points(&[1.0, 1.0], &[2.0, 2.0], 7);
            for w in pts {
                let a = tag_point(w.clone(), &[1.0, 1.0], &[2.0, 2.0], &p1);
                let b = tag_point(w, &[1.0, 1.0], &[2.0, 2.0], &p2);
                prop_assert!(!b.passes || a.passes);
            }
        }
    }
}

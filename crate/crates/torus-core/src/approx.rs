//! Analytic approximation of Gevrey functions: truncated almost-analytic
//! extensions and their projection to analytic functions by Cauchy–Green
//! integrals, axis by axis.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::fourier::C64;
use crate::math::{self, LibmComplex};
use crate::model::Derivatives;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApproxError {
    #[error("invalid extension spec: {0}")]
    InvalidSpec(&'static str),
    #[error("axis {axis} needs derivatives up to order {needed}, only {available} available")]
    OrderUnavailable { axis: usize, needed: usize, available: usize },
    #[error("quadrature failed: {0}")]
    QuadratureFailure(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    Angle,
    Action,
    Frequency,
}

/// Strip widths, Gevrey scales and exponent of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtensionSpec {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub l1: f64,
    pub l2: f64,
    pub rho: f64,
    /// Radius of the frequency ball.
    pub r_bar: f64,
    /// Kind of every variable; angles come first, in the order of the
    /// derivative evaluator.
    pub axes: Vec<AxisKind>,
}

fn truncation_order(l: f64, width: f64, rho: f64) -> usize {
    math::floor(math::powf(2.0 * l * width, -1.0 / (rho - 1.0))) as usize + 1
}

impl ExtensionSpec {
    pub fn validate(&self) -> Result<(), ApproxError> {
        if !(self.rho > 1.0) {
            return Err(ApproxError::InvalidSpec("rho must exceed 1"));
        }
        if !(self.u > 0.0 && self.v > 0.0 && self.w > 0.0 && self.l1 > 0.0 && self.l2 > 0.0) {
            return Err(ApproxError::InvalidSpec("widths and scales must be positive"));
        }
        let tol = 1.0 + 1e-12;
        if !(self.v * self.l2 <= self.u * self.l1 * tol && self.w * self.l2 <= self.u * self.l1 * tol && self.u * self.l1 <= tol) {
            return Err(ApproxError::InvalidSpec("need v L2, w L2 <= u L1 <= 1"));
        }
        if self.axes.is_empty() {
            return Err(ApproxError::InvalidSpec("no axes"));
        }
        Ok(())
    }

    /// `(N1, N2, N3)`.
    pub fn orders(&self) -> (usize, usize, usize) {
        (
            truncation_order(self.l1, self.u, self.rho),
            truncation_order(self.l2, self.v, self.rho),
            truncation_order(self.l2, self.w, self.rho),
        )
    }

    pub fn order_of(&self, kind: AxisKind) -> usize {
        let (a, b, c) = self.orders();
        match kind {
            AxisKind::Angle => a,
            AxisKind::Action => b,
            AxisKind::Frequency => c,
        }
    }

    /// Half-width `a` and half-height `b` of the rectangle `D_k`.
    pub fn rectangle(&self, kind: AxisKind) -> (f64, f64) {
        match kind {
            AxisKind::Angle => (PI, 2.0 * self.u),
            AxisKind::Action => (2.0, 2.0 * self.v),
            AxisKind::Frequency => (self.r_bar + 1.0, 2.0 * self.w),
        }
    }

    pub fn geometry(&self, axis: usize) -> Geometry {
        let kind = self.axes[axis];
        let (a, b) = self.rectangle(kind);
        match kind {
            AxisKind::Angle => Geometry::PeriodicStrip { half_height: b },
            _ => Geometry::Rectangle { half_width: a, half_height: b },
        }
    }

    /// Exponent `(3/4)(rho - 1)(2 L1 u)^{-1/(rho-1)}` of the error law.
    pub fn rate_exponent(&self) -> f64 {
        0.75 * (self.rho - 1.0) * math::powf(2.0 * self.l1 * self.u, -1.0 / (self.rho - 1.0))
    }
}

/// The truncated Taylor extension `sum_{alpha <= N} d^alpha P(x) (i y)^alpha / alpha!`.
pub struct AlmostAnalytic<'a> {
    p: &'a dyn Derivatives,
    n_x: usize,
    orders: Vec<usize>,
}

impl<'a> AlmostAnalytic<'a> {
    /// `available[k]` is the highest derivative order the evaluator supports
    /// on axis `k`.
    pub fn new(p: &'a dyn Derivatives, spec: &ExtensionSpec, available: &[usize]) -> Result<Self, ApproxError> {
        spec.validate()?;
        let (nx, nw) = p.dims();
        if spec.axes.len() != nx + nw || available.len() != nx + nw {
            return Err(ApproxError::InvalidSpec("axis count does not match the evaluator"));
        }
        let mut orders = Vec::with_capacity(nx + nw);
        for (k, kind) in spec.axes.iter().enumerate() {
            if (k < nx) != (*kind == AxisKind::Angle) {
                return Err(ApproxError::InvalidSpec("angle axes must come first"));
            }
            let need = spec.order_of(*kind);
            // the defect formula needs one order more
            if need + 1 > available[k] {
                return Err(ApproxError::OrderUnavailable { axis: k, needed: need + 1, available: available[k] });
            }
            orders.push(need);
        }
        Ok(AlmostAnalytic { p, n_x: nx, orders })
    }

    pub fn dim(&self) -> usize {
        self.orders.len()
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    fn deriv(&self, alpha: &[usize], x: &[f64]) -> f64 {
        let (a, b) = alpha.split_at(self.n_x);
        let (xa, xb) = x.split_at(self.n_x);
        self.p.derivative(a, b, xa, xb)
    }

    /// Sum over `alpha` in the box, optionally pinned to `alpha_k = N_k` and
    /// with an extra derivative on axis `k`.
    fn taylor_sum(&self, z: &[C64], pin: Option<usize>) -> C64 {
        let d = self.dim();
        let x: Vec<f64> = z.iter().map(|c| c.re).collect();
        let iy: Vec<C64> = z.iter().map(|c| C64::new(0.0, c.im)).collect();
        let mut alpha = vec![0usize; d];
        if let Some(k) = pin {
            alpha[k] = self.orders[k];
        }
        let mut total = C64::new(0.0, 0.0);
        loop {
            let mut arg = alpha.clone();
            if let Some(k) = pin {
                arg[k] += 1;
            }
            let mut w = C64::new(self.deriv(&arg, &x), 0.0);
            for i in 0..d {
                if alpha[i] > 0 {
                    w *= iy[i].powu(alpha[i] as u32) / math::factorial(alpha[i]);
                }
            }
            total += w;
            // odometer over the box, skipping the pinned axis
            let mut i = 0;
            loop {
                if i == d {
                    return total;
                }
                if Some(i) == pin {
                    i += 1;
                    continue;
                }
                if alpha[i] < self.orders[i] {
                    alpha[i] += 1;
                    break;
                }
                alpha[i] = 0;
                i += 1;
            }
        }
    }

    pub fn eval(&self, z: &[C64]) -> C64 {
        self.taylor_sum(z, None)
    }

    /// `d-bar_{z_k} F = (1/2) sum_{alpha_k = N_k} d^{alpha + e_k} P (i y)^alpha / alpha!`.
    pub fn dbar(&self, z: &[C64], k: usize) -> C64 {
        self.taylor_sum(z, Some(k)) * 0.5
    }
}

/// Values on a tensor grid of `x + i y` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGridFunction {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
    /// Row-major over axes; per axis the index is `re_index * |im| + im_index`.
    pub values: Vec<C64>,
}

impl ComplexGridFunction {
    pub fn dim(&self) -> usize {
        self.re.len()
    }

    pub fn points(&self) -> Vec<Vec<C64>> {
        let d = self.dim();
        let sizes: Vec<usize> = (0..d).map(|k| self.re[k].len() * self.im[k].len()).collect();
        let total: usize = sizes.iter().product();
        let mut out = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut z = vec![C64::new(0.0, 0.0); d];
            for k in (0..d).rev() {
                let local = idx % sizes[k];
                idx /= sizes[k];
                let m = self.im[k].len();
                z[k] = C64::new(self.re[k][local / m], self.im[k][local % m]);
            }
            out.push(z);
        }
        out
    }

    pub fn sample(re: Vec<Vec<f64>>, im: Vec<Vec<f64>>, f: &dyn Fn(&[C64]) -> C64) -> Self {
        let mut g = ComplexGridFunction { re, im, values: Vec::new() };
        g.values = g.points().iter().map(|z| f(z)).collect();
        g
    }
}

/// Sample the almost-analytic extension on a tensor grid.
pub fn almost_analytic_extend(
    p: &dyn Derivatives,
    spec: &ExtensionSpec,
    available: &[usize],
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
) -> Result<ComplexGridFunction, ApproxError> {
    let ext = AlmostAnalytic::new(p, spec, available)?;
    if re.len() != ext.dim() || im.len() != ext.dim() {
        return Err(ApproxError::InvalidSpec("grid dimension does not match"));
    }
    Ok(ComplexGridFunction::sample(re, im, &|z| ext.eval(z)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// `|Im| < b`, `2 pi`-periodic in `Re`.
    PeriodicStrip { half_height: f64 },
    /// `|Re| < a`, `|Im| < b`.
    Rectangle { half_width: f64, half_height: f64 },
}

impl Geometry {
    fn half_width(&self) -> f64 {
        match self {
            Geometry::PeriodicStrip { .. } => PI,
            Geometry::Rectangle { half_width, .. } => *half_width,
        }
    }
    fn half_height(&self) -> f64 {
        match self {
            Geometry::PeriodicStrip { half_height } | Geometry::Rectangle { half_height, .. } => *half_height,
        }
    }
    /// Distance from `zeta` to the part of the boundary that is integrated.
    fn clearance(&self, zeta: C64) -> f64 {
        let b = self.half_height();
        let dy = b - math::abs(zeta.im);
        match self {
            Geometry::PeriodicStrip { .. } => dy,
            Geometry::Rectangle { half_width, .. } => dy.min(half_width - math::abs(zeta.re)),
        }
    }
}

/// `(1/2) cot((eta - zeta)/2) = sum_k 1/(eta - zeta + 2 pi k)`, symmetric summation.
pub fn periodic_kernel(w: C64) -> C64 {
    let h = w * 0.5;
    h.ccos() / h.csin() * 0.5
}

/// `d/dzeta` of [`periodic_kernel`] at `w = eta - zeta`: `(1/4) csc^2(w/2)`.
pub fn periodic_kernel_dz(w: C64) -> C64 {
    let s = (w * 0.5).csin();
    C64::new(0.25, 0.0) / (s * s)
}

/// The symmetric partial sums of the periodic kernel up to `|k| <= n_max`,
/// with two Richardson steps on the `1/N`, `1/N^2` tail.
pub fn periodic_kernel_series(w: C64, n_max: usize) -> C64 {
    let partial = |n: usize| -> C64 {
        let mut s = C64::new(1.0, 0.0) / w;
        for k in 1..=n {
            let t = 2.0 * PI * k as f64;
            s += C64::new(1.0, 0.0) / (w + t) + C64::new(1.0, 0.0) / (w - t);
        }
        s
    };
    let (s1, s2, s4) = (partial(n_max / 4), partial(n_max / 2), partial(n_max));
    let r1 = s2 * 2.0 - s1;
    let r2 = s4 * 2.0 - s2;
    (r2 * 4.0 - r1) / 3.0
}

/// Composite Gauss–Legendre settings for the boundary and area integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub nodes: usize,
    /// Panel length is at most this multiple of the distance to the
    /// evaluation point.
    pub panel_ratio: f64,
    pub max_panels: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { nodes: 32, panel_ratio: 1.0, max_panels: 4096 }
    }
}

fn panels_for(len: f64, dist: f64, q: &Quadrature) -> Result<usize, ApproxError> {
    let p = (-math::floor(-len / (q.panel_ratio * dist))).max(1.0);
    if !(p <= q.max_panels as f64) {
        return Err(ApproxError::QuadratureFailure("evaluation point too close to the contour"));
    }
    Ok(p as usize)
}

/// `int_a^b g(t) dt` by composite Gauss–Legendre.
fn composite(a: f64, b: f64, panels: usize, gl: &(Vec<f64>, Vec<f64>), g: &mut dyn FnMut(f64) -> C64) -> C64 {
    let h = (b - a) / panels as f64;
    let mut s = C64::new(0.0, 0.0);
    for p in 0..panels {
        let lo = a + h * p as f64;
        for (x, w) in gl.0.iter().zip(&gl.1) {
            s += g(lo + 0.5 * h * (x + 1.0)) * (0.5 * h * w);
        }
    }
    s
}

/// Boundary part of the Cauchy–Green formula along one axis, evaluated at
/// `zeta`; `deriv` selects the `zeta`-derivative of the kernel.
pub fn boundary_integral(f: &dyn Fn(C64) -> C64, zeta: C64, geom: Geometry, quad: &Quadrature, deriv: bool) -> Result<C64, ApproxError> {
    let dist = geom.clearance(zeta);
    if !(dist > 0.0) {
        return Err(ApproxError::QuadratureFailure("evaluation point outside the open domain"));
    }
    let gl = math::gauss_legendre(quad.nodes);
    let a = geom.half_width();
    let b = geom.half_height();
    let i2pi = C64::new(0.0, 2.0 * PI);
    let mut total = C64::new(0.0, 0.0);
    match geom {
        Geometry::PeriodicStrip { .. } => {
            let kern = |eta: C64| if deriv { periodic_kernel_dz(eta - zeta) } else { periodic_kernel(eta - zeta) };
            let np = panels_for(2.0 * a, dist, quad)?;
            // bottom edge left to right, top edge right to left
            total += composite(-a, a, np, &gl, &mut |x| {
                let eta = C64::new(x, -b);
                f(eta) * kern(eta)
            });
            total -= composite(-a, a, np, &gl, &mut |x| {
                let eta = C64::new(x, b);
                f(eta) * kern(eta)
            });
        }
        Geometry::Rectangle { .. } => {
            let kern = |eta: C64| {
                let d = eta - zeta;
                if deriv {
                    C64::new(1.0, 0.0) / (d * d)
                } else {
                    C64::new(1.0, 0.0) / d
                }
            };
            let nh = panels_for(2.0 * a, dist, quad)?;
            let nv = panels_for(2.0 * b, dist, quad)?;
            let i1 = C64::new(0.0, 1.0);
            total += composite(-a, a, nh, &gl, &mut |x| {
                let eta = C64::new(x, -b);
                f(eta) * kern(eta)
            });
            total += composite(-b, b, nv, &gl, &mut |y| {
                let eta = C64::new(a, y);
                f(eta) * kern(eta) * i1
            });
            total -= composite(-a, a, nh, &gl, &mut |x| {
                let eta = C64::new(x, b);
                f(eta) * kern(eta)
            });
            total -= composite(-b, b, nv, &gl, &mut |y| {
                let eta = C64::new(-a, y);
                f(eta) * kern(eta) * i1
            });
        }
    }
    Ok(total / i2pi)
}

/// `int int_R g` over the rectangle `[x0,x1] x [y0,y1]` whose corner
/// `(cx, cy)` may carry a `1/r` singularity, by the Duffy split into two
/// triangles.
fn duffy_rectangle(x0: f64, x1: f64, y0: f64, y1: f64, cx: f64, cy: f64, gl: &(Vec<f64>, Vec<f64>), g: &dyn Fn(f64, f64) -> C64) -> C64 {
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return C64::new(0.0, 0.0);
    }
    let ox = if cx == x0 { x1 } else { x0 };
    let oy = if cy == y0 { y1 } else { y0 };
    // triangles (c, (ox, cy), (ox, oy)) and (c, (ox, oy), (cx, oy))
    let tris = [[(ox, cy), (ox, oy)], [(ox, oy), (cx, oy)]];
    let mut total = C64::new(0.0, 0.0);
    for t in tris {
        let (p1, p2) = (t[0], t[1]);
        let area2 = math::abs((p1.0 - cx) * (p2.1 - cy) - (p2.0 - cx) * (p1.1 - cy));
        for (s, ws) in gl.0.iter().zip(&gl.1) {
            let s = 0.5 * (s + 1.0);
            for (t, wt) in gl.0.iter().zip(&gl.1) {
                let t = 0.5 * (t + 1.0);
                // point c + s (p1 - c) + s t (p2 - p1); Jacobian s * area2
                let x = cx + s * (p1.0 - cx) + s * t * (p2.0 - p1.0);
                let y = cy + s * (p1.1 - cy) + s * t * (p2.1 - p1.1);
                total += g(x, y) * (0.25 * ws * wt * s * area2);
            }
        }
    }
    total
}

/// Area part of the Cauchy–Green formula:
/// `(1/(2 pi i)) int int_D dbar f(eta) K(eta, zeta) d eta ^ d eta-bar`.
pub fn area_integral(dbar_f: &dyn Fn(C64) -> C64, zeta: C64, geom: Geometry, cells: usize, quad: &Quadrature) -> C64 {
    let a = geom.half_width();
    let b = geom.half_height();
    let gl = math::gauss_legendre(quad.nodes);
    let kern = |eta: C64| match geom {
        Geometry::PeriodicStrip { .. } => periodic_kernel(eta - zeta),
        Geometry::Rectangle { .. } => C64::new(1.0, 0.0) / (eta - zeta),
    };
    let g = |x: f64, y: f64| {
        let eta = C64::new(x, y);
        dbar_f(eta) * kern(eta)
    };
    // cells with zeta as a corner near the singularity, plain tensor cells elsewhere
    let xs = split_axis(-a, a, zeta.re, cells);
    let ys = split_axis(-b, b, zeta.im, cells);
    let mut total = C64::new(0.0, 0.0);
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let touches = (wx[0] == zeta.re || wx[1] == zeta.re) && (wy[0] == zeta.im || wy[1] == zeta.im);
            if touches {
                let cx = if wx[0] == zeta.re { wx[0] } else { wx[1] };
                let cy = if wy[0] == zeta.im { wy[0] } else { wy[1] };
                total += duffy_rectangle(wx[0], wx[1], wy[0], wy[1], cx, cy, &gl, &g);
            } else {
                let (hx, hy) = (wx[1] - wx[0], wy[1] - wy[0]);
                for (s, ws) in gl.0.iter().zip(&gl.1) {
                    for (t, wt) in gl.0.iter().zip(&gl.1) {
                        let x = wx[0] + 0.5 * hx * (s + 1.0);
                        let y = wy[0] + 0.5 * hy * (t + 1.0);
                        total += g(x, y) * (0.25 * hx * hy * ws * wt);
                    }
                }
            }
        }
    }
    // d eta ^ d eta-bar = -2i dx dy
    total * C64::new(0.0, -2.0) / C64::new(0.0, 2.0 * PI)
}

/// Breakpoints of `[lo, hi]` including `c` (when inside), refined
/// geometrically towards `c`.
fn split_axis(lo: f64, hi: f64, c: f64, cells: usize) -> Vec<f64> {
    let mut pts = Vec::new();
    let inside = c > lo && c < hi;
    let grade = |from: f64, to: f64, out: &mut Vec<f64>| {
        // from = singular end; geometric grading with ratio 1/4
        let len = to - from;
        let mut f = 1.0;
        let mut stack = Vec::new();
        for _ in 0..cells {
            stack.push(from + len * f);
            f *= 0.25;
        }
        stack.reverse();
        out.extend(stack);
    };
    if inside {
        let mut left = Vec::new();
        grade(c, lo, &mut left);
        left.reverse();
        pts.push(lo);
        pts.extend(left.into_iter().filter(|x| *x > lo && *x < c));
        pts.push(c);
        let mut right = Vec::new();
        grade(c, hi, &mut right);
        pts.extend(right.into_iter().filter(|x| *x > c && *x < hi));
        pts.push(hi);
    } else {
        pts.push(lo);
        pts.push(hi);
    }
    pts.dedup();
    pts
}

/// Projection of `f` to a function analytic in `z_axis`, evaluated on a
/// target grid.
pub fn green_project(
    f: &dyn Fn(&[C64]) -> C64,
    axis: usize,
    geom: Geometry,
    quad: &Quadrature,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
) -> Result<ComplexGridFunction, ApproxError> {
    let mut g = ComplexGridFunction { re, im, values: Vec::new() };
    let pts = g.points();
    let mut vals = Vec::with_capacity(pts.len());
    for z in pts {
        let zeta = z[axis];
        let slice = |eta: C64| {
            let mut w = z.clone();
            w[axis] = eta;
            f(&w)
        };
        vals.push(boundary_integral(&slice, zeta, geom, quad, false)?);
    }
    g.values = vals;
    Ok(g)
}

/// `P_j(z)`: the extension projected along every axis in turn, with an
/// optional derivative in `z_{deriv}`.
pub fn projected_value(
    ext: &AlmostAnalytic<'_>,
    spec: &ExtensionSpec,
    z: &[C64],
    quad: &Quadrature,
    deriv: Option<usize>,
) -> Result<C64, ApproxError> {
    fn level(
        ext: &AlmostAnalytic<'_>,
        spec: &ExtensionSpec,
        z: &[C64],
        m: usize,
        quad: &Quadrature,
        deriv: Option<usize>,
    ) -> Result<C64, ApproxError> {
        if m == 0 {
            return Ok(ext.eval(z));
        }
        let axis = m - 1;
        let failure = core::cell::Cell::new(None);
        let slice = |eta: C64| {
            let mut w = z.to_vec();
            w[axis] = eta;
            level(ext, spec, &w, m - 1, quad, deriv).unwrap_or_else(|e| {
                failure.set(Some(e));
                C64::new(0.0, 0.0)
            })
        };
        let v = boundary_integral(&slice, z[axis], spec.geometry(axis), quad, deriv == Some(axis))?;
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }
    level(ext, spec, z, ext.dim(), quad, deriv)
}

/// Errors of one approximant on the real sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxLevel {
    pub j: usize,
    pub spec: ExtensionSpec,
    pub orders: Vec<usize>,
    /// `sup |P - P_j|`.
    pub err_sup: f64,
    /// `sup |d(P - P_j)|` over all first derivatives.
    pub err_d1: f64,
    /// `sup |d-bar F_j|` over the sampled complex points with `|Im| <= u`.
    pub dbar_defect: f64,
    /// `sup |Im P_j|` on the real points (reality of the approximant).
    pub imag_sup: f64,
}

/// Build `P_j` for each spec and measure the errors on `samples` (real
/// points).
pub fn approx_sequence(
    p: &dyn Derivatives,
    specs: &[ExtensionSpec],
    available: &[usize],
    samples: &[Vec<f64>],
    quad: &Quadrature,
) -> Result<Vec<ApproxLevel>, ApproxError> {
    let mut out = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let ext = AlmostAnalytic::new(p, spec, available)?;
        let d = ext.dim();
        let mut err_sup: f64 = 0.0;
        let mut err_d1: f64 = 0.0;
        let mut imag_sup: f64 = 0.0;
        let mut dbar_defect: f64 = 0.0;
        for x in samples {
            let z: Vec<C64> = x.iter().map(|v| C64::new(*v, 0.0)).collect();
            let pj = projected_value(&ext, spec, &z, quad, None)?;
            let zero = vec![0usize; d];
            let exact = ext.deriv(&zero, x);
            err_sup = err_sup.max(math::abs(pj.re - exact));
            imag_sup = imag_sup.max(math::abs(pj.im));
            for k in 0..d {
                let dj = projected_value(&ext, spec, &z, quad, Some(k))?;
                let mut e = vec![0usize; d];
                e[k] = 1;
                err_d1 = err_d1.max(math::abs(dj.re - ext.deriv(&e, x)));
            }
            // defect at the corners of the first strip
            for k in 0..d {
                for s in [-1.0, 1.0] {
                    let mut zz = z.clone();
                    for (i, c) in zz.iter_mut().enumerate() {
                        let hi = match spec.axes[i] {
                            AxisKind::Angle => spec.u,
                            AxisKind::Action => spec.v,
                            AxisKind::Frequency => spec.w,
                        };
                        *c = C64::new(c.re, s * hi);
                    }
                    dbar_defect = dbar_defect.max(ext.dbar(&zz, k).cabs());
                }
            }
        }
        out.push(ApproxLevel { j, spec: spec.clone(), orders: ext.orders().to_vec(), err_sup, err_d1, dbar_defect, imag_sup });
    }
    Ok(out)
}

/// `f(theta) = sum_{k=1}^{k_max} e^{-sqrt k} cos(k theta)` and its derivatives.
pub fn g2_model(order: usize, theta: f64, k_max: usize) -> f64 {
    let mut s = 0.0;
    for k in 1..=k_max {
        let kf = k as f64;
        let amp = math::exp(-math::sqrt(kf)) * math::powi(kf, order as i32);
        let ph = kf * theta;
        s += amp
            * match order % 4 {
                0 => math::cos(ph),
                1 => -math::sin(ph),
                2 => -math::cos(ph),
                _ => math::sin(ph),
            };
    }
    s
}

/// Strips `u_j = u0 q^j` with `v_j = w_j = u_j L1 / L2`.
pub fn level_specs(u0: f64, q: f64, levels: usize, l1: f64, l2: f64, rho: f64, axes: &[AxisKind]) -> Vec<ExtensionSpec> {
    (0..levels)
        .map(|j| {
            let u = u0 * math::powi(q, j as i32);
            ExtensionSpec { u, v: u * l1 / l2, w: u * l1 / l2, l1, l2, rho, r_bar: 1.0, axes: axes.to_vec() }
        })
        .collect()
}

//! Poincaré-ball geometry.
//!
//! The ball of curvature `c` is the open set `{x : sqrt(c) * |x| < 1}` with
//! conformal factor `2 / (1 - c |x|^2)`. Maps are taken at the origin:
//!
//! * `exp0(f) = tanh(sqrt(c)|f|) f / (sqrt(c)|f|)` (tangent space to ball)
//! * `log0(y) = artanh(sqrt(c)|y|) y / (sqrt(c)|y|)` (ball to tangent space)
//!
//! and the geodesic distance is the curvature-one form
//! `arccosh(1 + 2|x - y|^2 / ((1 - |x|^2)(1 - |y|^2)))`, so any code path
//! that measures distances requires `c = 1`.
//!
//! Both maps resolve the `0/0` at the origin with the analytic limit (zero).
//! Points are kept at least `eps` (relative) away from the boundary: outputs
//! of [`exp_map0`] and [`project_to_ball`] have radius at most
//! `(1 - eps) / sqrt(c)`, and [`log_map0`] clamps its input radius to the
//! same value and reports when it had to.
//!
//! The `*_rows` functions at the bottom are graph operations over matrices
//! of row vectors. Their forward values come from the same scalar kernels
//! as the plain functions, so quantization decisions taken on plain values
//! agree bit-for-bit with the differentiable path.

use diffcore::{CustomOp, DiffError, Tape, Tensor, Var};

use crate::error::{contract, Result};

/// Curvature, ambient dimension and boundary margin of a Poincaré ball.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BallConfig {
    pub curvature: f64,
    pub dim: usize,
    pub eps: f64,
}

impl BallConfig {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(curvature: f64, dim: usize, eps: f64) -> Result<Self> {
        if !(curvature > 0.0 && curvature.is_finite()) {
            return Err(contract(
                "ball_config",
                format!("curvature must be positive, got {curvature}"),
            ));
        }
        if !(eps > 0.0 && eps < 1e-2) {
            return Err(contract(
                "ball_config",
                format!("boundary margin must lie in (0, 1e-2), got {eps}"),
            ));
        }
        if dim == 0 {
            return Err(contract("ball_config", "dimension must be positive"));
        }
        Ok(Self {
            curvature,
            dim,
            eps,
        })
    }

    /// Unit curvature with the default margin.
    pub fn unit(dim: usize) -> Self {
        Self {
            curvature: 1.0,
            dim,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn sqrt_c(&self) -> f64 {
        self.curvature.sqrt()
    }

    /// Largest radius a stored point may have.
    pub fn max_radius(&self) -> f64 {
        (1.0 - self.eps) / self.sqrt_c()
    }

    /// The distance formula is the curvature-one form.
    pub fn require_unit_curvature(&self) -> Result<()> {
        if self.curvature != 1.0 {
            return Err(contract(
                "geodesic_distance",
                format!(
                    "distance is only defined here for curvature 1, got {}",
                    self.curvature
                ),
            ));
        }
        Ok(())
    }
}

/// A point strictly inside the ball it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(coords: Vec<f64>, cfg: &BallConfig) -> Result<Self> {
        if coords.len() != cfg.dim {
            return Err(contract(
                "ball_point",
                format!("expected {} coordinates, got {}", cfg.dim, coords.len()),
            ));
        }
        if coords.iter().any(|v| !v.is_finite()) || cfg.sqrt_c() * norm(&coords) >= 1.0 {
            return Err(contract(
                "ball_point",
                "point is not strictly inside the ball",
            ));
        }
        Ok(Self(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

/// Result of [`log_map0`]: the tangent vector, and whether the input radius
/// had to be clamped away from the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMap {
    pub tangent: Vec<f64>,
    pub clamped: bool,
}

pub(crate) fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    sq_norm(x).sqrt()
}

/// Scale applied by the exponential map to a vector of norm `n`, and
/// whether the margin clamp was active.
fn exp_scale(n: f64, sqrt_c: f64, eps: f64) -> (f64, bool) {
    if n == 0.0 {
        return (1.0, false);
    }
    let a = sqrt_c * n;
    let t = a.tanh();
    if t >= 1.0 - eps {
        ((1.0 - eps) / a, true)
    } else {
        (t / a, false)
    }
}

/// Scale applied by the logarithmic map to a point of norm `n`.
fn log_scale(n: f64, sqrt_c: f64, eps: f64) -> (f64, bool) {
    if n == 0.0 {
        return (1.0, false);
    }
    let a = sqrt_c * n;
    if a >= 1.0 - eps {
        ((1.0 - eps).atanh() / a, true)
    } else {
        (a.atanh() / a, false)
    }
}

/// Exponential map at the origin, row kernel. Returns whether the margin
/// clamp was applied.
pub(crate) fn exp_map0_into(f: &[f64], cfg: &BallConfig, out: &mut [f64]) -> bool {
    let (s, clamped) = exp_scale(norm(f), cfg.sqrt_c(), cfg.eps);
    for (o, v) in out.iter_mut().zip(f) {
        *o = s * v;
    }
    clamped
}

pub(crate) fn log_map0_into(y: &[f64], cfg: &BallConfig, out: &mut [f64]) -> bool {
    let (s, clamped) = log_scale(norm(y), cfg.sqrt_c(), cfg.eps);
    for (o, v) in out.iter_mut().zip(y) {
        *o = s * v;
    }
    clamped
}

/// Maps a tangent vector at the origin onto the ball.
pub fn exp_map0(f: &[f64], cfg: &BallConfig) -> Result<BallPoint> {
    if f.len() != cfg.dim {
        return Err(contract(
            "exp_map0",
            format!("expected {} coordinates, got {}", cfg.dim, f.len()),
        ));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite("exp_map0 input".into()).into());
    }
    let mut out = vec![0.0; f.len()];
    exp_map0_into(f, cfg, &mut out);
    Ok(BallPoint(out))
}

/// Maps a ball point back to the tangent space at the origin.
pub fn log_map0(y: &BallPoint, cfg: &BallConfig) -> LogMap {
    let mut out = vec![0.0; y.0.len()];
    let clamped = log_map0_into(&y.0, cfg, &mut out);
    LogMap {
        tangent: out,
        clamped,
    }
}

/// Curvature-one geodesic distance kernel on raw coordinates.
#[inline]
pub(crate) fn dist_kernel(x: &[f64], y: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        diff += d * d;
        nx += a * a;
        ny += b * b;
    }
    (1.0 + 2.0 * diff / ((1.0 - nx) * (1.0 - ny))).acosh()
}

/// Geodesic distance between two points of the unit-curvature ball.
pub fn geodesic_distance(x: &BallPoint, y: &BallPoint) -> Result<f64> {
    if x.0.len() != y.0.len() {
        return Err(contract("geodesic_distance", "dimension mismatch"));
    }
    if x.norm() >= 1.0 || y.norm() >= 1.0 {
        return Err(contract(
            "geodesic_distance",
            "points must lie strictly inside the unit ball",
        ));
    }
    Ok(dist_kernel(&x.0, &y.0))
}

/// Rescales `x` onto radius `(1 - eps) / sqrt(c)` if it lies beyond it.
pub fn project_to_ball(x: &[f64], cfg: &BallConfig) -> BallPoint {
    let mut v = x.to_vec();
    project_in_place(&mut v, cfg);
    BallPoint(v)
}

/// In-place [`project_to_ball`]; returns whether the point moved.
pub fn project_in_place(x: &mut [f64], cfg: &BallConfig) -> bool {
    let limit = cfg.max_radius();
    let n = norm(x);
    if n <= limit {
        return false;
    }
    let s = limit / n;
    x.iter_mut().for_each(|v| *v *= s);
    // Rounding can leave the norm an ulp above the limit; shrink until it
    // is not, so a second projection is a no-op.
    while norm(x) > limit {
        x.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    true
}

pub fn conformal_factor(x: &BallPoint, cfg: &BallConfig) -> f64 {
    2.0 / (1.0 - cfg.curvature * sq_norm(&x.0))
}

/// Pairwise geodesic distances between the rows of `xs` `[n, d]` and `ys` `[m, d]`.
pub fn dist_matrix(xs: &Tensor, ys: &Tensor) -> Tensor {
    let (n, m) = (xs.rows(), ys.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let x = xs.row(i);
        for j in 0..m {
            out.push(dist_kernel(x, ys.row(j)));
        }
    }
    Tensor::new(vec![n, m], out).expect("n x m")
}

#[inline]
pub(crate) fn euclid_kernel(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise Euclidean distances, used by the flat-codebook ablation.
pub fn euclid_dist_matrix(xs: &Tensor, ys: &Tensor) -> Tensor {
    let (n, m) = (xs.rows(), ys.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let x = xs.row(i);
        for j in 0..m {
            out.push(euclid_kernel(x, ys.row(j)));
        }
    }
    Tensor::new(vec![n, m], out).expect("n x m")
}

fn map_rows(
    x: &Tensor,
    cfg: &BallConfig,
    f: fn(&[f64], &BallConfig, &mut [f64]) -> bool,
) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        f(x.row(r), cfg, out.row_mut(r));
    }
    out
}

/// Row-wise exponential map of a matrix, as plain values.
pub fn exp_map0_matrix(x: &Tensor, cfg: &BallConfig) -> Tensor {
    map_rows(x, cfg, exp_map0_into)
}

/// Row-wise logarithmic map of a matrix, as plain values.
pub fn log_map0_matrix(x: &Tensor, cfg: &BallConfig) -> Tensor {
    map_rows(x, cfg, log_map0_into)
}

// ---------------------------------------------------------------------------
// Graph operations

fn check_matrix(op: &'static str, t: &Tensor, dim: usize) -> Result<()> {
    if t.rank() != 2 || t.cols() != dim {
        return Err(contract(
            op,
            format!("expected [n, {dim}] rows, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// For a radial map `y = s(|x|) x`, the backward rule is
/// `g_x = s g + x (x.g) s'(n)/n`. `ds_over_n` supplies `s'(n)/n`.
fn radial_backward(x: &Tensor, g: &Tensor, scale: impl Fn(f64) -> (f64, f64)) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = g.row(r);
        let n = norm(xr);
        let (s, ds_over_n) = scale(n);
        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(xr).zip(gr) {
            *o = s * b + a * xg * ds_over_n;
        }
    }
    out
}

#[derive(Debug)]
struct ExpMap0Rows(BallConfig);

impl CustomOp for ExpMap0Rows {
    fn name(&self) -> &'static str {
        "exp_map0_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let cfg = self.0;
        let sc = cfg.sqrt_c();
        let c = cfg.curvature;
        let gx = radial_backward(inputs[0], g, |n| {
            if n == 0.0 {
                return (1.0, 0.0);
            }
            let a = sc * n;
            let (s, clamped) = exp_scale(n, sc, cfg.eps);
            if clamped {
                // s = K / n  =>  s'(n)/n = -s / n^2
                return (s, -s / (n * n));
            }
            let ds = if a < 1e-3 {
                c * (-2.0 / 3.0 + 8.0 * a * a / 15.0)
            } else {
                let sech2 = 1.0 - a.tanh().powi(2);
                c * (a * sech2 - a.tanh()) / (a * a * a)
            };
            (s, ds)
        });
        vec![Some(gx)]
    }
}

#[derive(Debug)]
struct LogMap0Rows(BallConfig);

impl CustomOp for LogMap0Rows {
    fn name(&self) -> &'static str {
        "log_map0_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let cfg = self.0;
        let sc = cfg.sqrt_c();
        let c = cfg.curvature;
        let gx = radial_backward(inputs[0], g, |n| {
            if n == 0.0 {
                return (1.0, 0.0);
            }
            let a = sc * n;
            let (s, clamped) = log_scale(n, sc, cfg.eps);
            if clamped {
                return (s, -s / (n * n));
            }
            let ds = if a < 1e-3 {
                c * (2.0 / 3.0 + 4.0 * a * a / 5.0)
            } else {
                c * (a / (1.0 - a * a) - a.atanh()) / (a * a * a)
            };
            (s, ds)
        });
        vec![Some(gx)]
    }
}

/// Differentiable row-wise exponential map of `x` `[n, d]`.
pub fn exp_map0_rows(tape: &mut Tape, x: Var, cfg: &BallConfig) -> Result<Var> {
    let xv = tape.value(x);
    check_matrix("exp_map0_rows", xv, cfg.dim)?;
    if !xv.all_finite() {
        return Err(DiffError::NonFinite("exp_map0_rows input".into()).into());
    }
    let out = exp_map0_matrix(xv, cfg);
    Ok(tape.custom(Box::new(ExpMap0Rows(*cfg)), &[x], out))
}

/// Differentiable row-wise logarithmic map of `y` `[n, d]`.
pub fn log_map0_rows(tape: &mut Tape, y: Var, cfg: &BallConfig) -> Result<Var> {
    let yv = tape.value(y);
    check_matrix("log_map0_rows", yv, cfg.dim)?;
    let out = log_map0_matrix(yv, cfg);
    Ok(tape.custom(Box::new(LogMap0Rows(*cfg)), &[y], out))
}

#[derive(Debug)]
struct PoincareDist;

impl CustomOp for PoincareDist {
    fn name(&self) -> &'static str {
        "poincare_dist_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (xs, ys) = (inputs[0], inputs[1]);
        let (n, m, d) = (xs.rows(), ys.rows(), xs.cols());
        let mut gx = Tensor::zeros(xs.shape());
        let mut gy = Tensor::zeros(ys.shape());
        let ny: Vec<f64> = (0..m).map(|j| 1.0 - sq_norm(ys.row(j))).collect();
        for i in 0..n {
            let x = xs.row(i);
            let alpha = 1.0 - sq_norm(x);
            for j in 0..m {
                let gij = g.data()[i * m + j];
                if gij == 0.0 {
                    continue;
                }
                let dist = out.data()[i * m + j];
                if dist <= 0.0 {
                    continue;
                }
                let y = ys.row(j);
                let beta = ny[j];
                let z = dist.cosh();
                let dz = gij / (z * z - 1.0).sqrt();
                let delta: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let ab = alpha * beta;
                let kx = 4.0 * delta / (alpha * ab);
                let ky = 4.0 * delta / (beta * ab);
                let gxr = &mut gx.data_mut()[i * d..(i + 1) * d];
                for k in 0..d {
                    gxr[k] += dz * (4.0 * (x[k] - y[k]) / ab + kx * x[k]);
                }
                let gyr = &mut gy.data_mut()[j * d..(j + 1) * d];
                for k in 0..d {
                    gyr[k] += dz * (-4.0 * (x[k] - y[k]) / ab + ky * y[k]);
                }
            }
        }
        vec![Some(gx), Some(gy)]
    }
}

#[derive(Debug)]
struct EuclidDist;

impl CustomOp for EuclidDist {
    fn name(&self) -> &'static str {
        "euclid_dist_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (xs, ys) = (inputs[0], inputs[1]);
        let (n, m, d) = (xs.rows(), ys.rows(), xs.cols());
        let mut gx = Tensor::zeros(xs.shape());
        let mut gy = Tensor::zeros(ys.shape());
        for i in 0..n {
            for j in 0..m {
                let dist = out.data()[i * m + j];
                let gij = g.data()[i * m + j];
                if dist <= 0.0 || gij == 0.0 {
                    continue;
                }
                let f = gij / dist;
                for k in 0..d {
                    let diff = xs.data()[i * d + k] - ys.data()[j * d + k];
                    gx.data_mut()[i * d + k] += f * diff;
                    gy.data_mut()[j * d + k] -= f * diff;
                }
            }
        }
        vec![Some(gx), Some(gy)]
    }
}

/// Differentiable pairwise geodesic distances `[n, m]` between ball rows.
/// Requires unit curvature.
pub fn dist_matrix_rows(tape: &mut Tape, xs: Var, ys: Var, cfg: &BallConfig) -> Result<Var> {
    cfg.require_unit_curvature()?;
    let (xv, yv) = (tape.value(xs), tape.value(ys));
    check_matrix("poincare_dist_matrix", xv, cfg.dim)?;
    check_matrix("poincare_dist_matrix", yv, cfg.dim)?;
    let outside = |t: &Tensor| (0..t.rows()).any(|r| sq_norm(t.row(r)) >= 1.0);
    if outside(xv) || outside(yv) {
        return Err(contract(
            "poincare_dist_matrix",
            "points must lie strictly inside the unit ball",
        ));
    }
    let out = dist_matrix(xv, yv);
    Ok(tape.custom(Box::new(PoincareDist), &[xs, ys], out))
}

/// Differentiable pairwise Euclidean distances `[n, m]`.
pub fn euclid_dist_matrix_rows(tape: &mut Tape, xs: Var, ys: Var) -> Result<Var> {
    let (xv, yv) = (tape.value(xs), tape.value(ys));
    if xv.rank() != 2 || yv.rank() != 2 || xv.cols() != yv.cols() {
        return Err(contract(
            "euclid_dist_matrix",
            format!("{:?} vs {:?}", xv.shape(), yv.shape()),
        ));
    }
    let out = euclid_dist_matrix(xv, yv);
    Ok(tape.custom(Box::new(EuclidDist), &[xs, ys], out))
}

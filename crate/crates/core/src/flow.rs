//! Hamiltonian flow, its linearization, Lyapunov rate estimation, adapted
//! metrics along the escaping trajectory, and trajectory diagnostics.

use std::io::Write;

use nalgebra::{Matrix4, SMatrix, SymmetricEigen, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{Hamiltonian, PhasePoint, SurfaceGeometry};

/// Default fixed step of the production integrator.
pub const DEFAULT_STEP: f64 = 1e-3;

type State = [f64; 4];

fn axpy(a: f64, x: &State, y: &State) -> State {
    [
        y[0] + a * x[0],
        y[1] + a * x[1],
        y[2] + a * x[2],
        y[3] + a * x[3],
    ]
}

/// One classical RK4 step of the flow.
pub fn rk4_step<H: Hamiltonian + ?Sized>(ham: &H, z: &State, dt: f64) -> State {
    let k1 = ham.vector_field(z);
    let k2 = ham.vector_field(&axpy(0.5 * dt, &k1, z));
    let k3 = ham.vector_field(&axpy(0.5 * dt, &k2, z));
    let k4 = ham.vector_field(&axpy(dt, &k3, z));
    let mut out = *z;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn mat(j: [[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| j[r][c])
}

/// One RK4 step of the flow together with its variational equation
/// `Ḋ = J(z) D`.
pub fn rk4_variational_step<H: Hamiltonian + ?Sized>(
    ham: &H,
    z: &State,
    d: &Matrix4<f64>,
    dt: f64,
) -> (State, Matrix4<f64>) {
    let k1 = ham.vector_field(z);
    let l1 = mat(ham.jacobian(z)) * d;
    let z2 = axpy(0.5 * dt, &k1, z);
    let k2 = ham.vector_field(&z2);
    let l2 = mat(ham.jacobian(&z2)) * (d + l1 * (0.5 * dt));
    let z3 = axpy(0.5 * dt, &k2, z);
    let k3 = ham.vector_field(&z3);
    let l3 = mat(ham.jacobian(&z3)) * (d + l2 * (0.5 * dt));
    let z4 = axpy(dt, &k3, z);
    let k4 = ham.vector_field(&z4);
    let l4 = mat(ham.jacobian(&z4)) * (d + l3 * dt);
    let mut out = *z;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    (out, d + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0))
}

/// Split `t` into an integer number of steps no longer than `step`.
fn step_plan(t: f64, step: f64) -> (usize, f64) {
    if t == 0.0 {
        return (0, 0.0);
    }
    let n = (t.abs() / step).ceil().max(1.0) as usize;
    (n, t / n as f64)
}

/// Result of [`integrate_flow`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub point: PhasePoint,
    /// First time at which the radial domain was left, if it was.
    pub exit_time: Option<f64>,
}

/// Flow `pt` for time `t` (either sign) with fixed RK4 steps of at most `step`.
///
/// The surface metric is defined for every `r`, so integration continues
/// after leaving `[−R, R]`; the exit time is recorded.
pub fn integrate_flow(geom: &SurfaceGeometry, pt: PhasePoint, t: f64, step: f64) -> Result<FlowOutcome> {
    if !(step > 0.0) {
        return Err(LabError::Config(format!("flow step {step} must be positive")));
    }
    let (n, dt) = step_plan(t, step);
    let mut z = pt.to_array();
    let mut exit_time = None;
    for k in 0..n {
        z = rk4_step(geom, &z, dt);
        if exit_time.is_none() && z[0].abs() > geom.r_max {
            exit_time = Some((k + 1) as f64 * dt);
        }
    }
    Ok(FlowOutcome {
        point: PhasePoint::from_array(z),
        exit_time,
    })
}

/// Flow of a generic Hamiltonian for time `t`.
pub fn flow_point<H: Hamiltonian + ?Sized>(ham: &H, z: &State, t: f64, step: f64) -> State {
    let (n, dt) = step_plan(t, step);
    let mut z = *z;
    for _ in 0..n {
        z = rk4_step(ham, &z, dt);
    }
    z
}

/// Linearized flow `D(t) ≈ de^{tH_p}(z)` at a base point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Monodromy {
    pub matrix: Matrix4<f64>,
    pub base: State,
    pub base_time: f64,
    pub elapsed: f64,
    pub endpoint: State,
}

/// Standard symplectic form on `(q₀, q₁, p₀, p₁)`.
pub fn symplectic_form() -> Matrix4<f64> {
    let mut j = Matrix4::zeros();
    j[(0, 2)] = 1.0;
    j[(1, 3)] = 1.0;
    j[(2, 0)] = -1.0;
    j[(3, 1)] = -1.0;
    j
}

impl Monodromy {
    /// `‖Dᵀ J D − J‖_max`.
    pub fn symplectic_defect(&self) -> f64 {
        let j = symplectic_form();
        (self.matrix.transpose() * j * self.matrix - j).amax()
    }

    pub fn norm(&self) -> f64 {
        self.matrix.norm().max(spectral_norm(&self.matrix))
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix4<f64>) -> f64 {
    SymmetricEigen::new(m.transpose() * m)
        .eigenvalues
        .max()
        .max(0.0)
        .sqrt()
}

/// Integrate the variational equations from `z` for time `t`.
pub fn variational_flow<H: Hamiltonian + ?Sized>(ham: &H, z: &State, t: f64, step: f64) -> Monodromy {
    let (n, dt) = step_plan(t, step);
    let mut x = *z;
    let mut d = Matrix4::identity();
    for _ in 0..n {
        let (xn, dn) = rk4_variational_step(ham, &x, &d, dt);
        x = xn;
        d = dn;
    }
    Monodromy {
        matrix: d,
        base: *z,
        base_time: 0.0,
        elapsed: t,
        endpoint: x,
    }
}

/// Uniformly sampled flow line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_min: f64,
    pub dt: f64,
    pub points: Vec<State>,
    pub energy: f64,
    pub escaped_forward: bool,
    pub converged_backward: bool,
}

impl Trajectory {
    /// Integrate from `z0` at `t = 0` forward to `t_max` and backward to `t_min`.
    pub fn integrate<H: Hamiltonian + ?Sized>(
        ham: &H,
        z0: State,
        t_min: f64,
        t_max: f64,
        step: f64,
    ) -> Result<Self> {
        if !(t_min < 0.0 && t_max > 0.0 && step > 0.0) {
            return Err(LabError::Config(format!(
                "trajectory window [{t_min}, {t_max}] must contain 0 with positive step"
            )));
        }
        let n_back = (-t_min / step).round() as usize;
        let n_fwd = (t_max / step).round() as usize;
        let mut back = Vec::with_capacity(n_back);
        let mut z = z0;
        for _ in 0..n_back {
            z = rk4_step(ham, &z, -step);
            back.push(z);
        }
        back.reverse();
        let mut points = back;
        points.push(z0);
        let mut z = z0;
        for _ in 0..n_fwd {
            z = rk4_step(ham, &z, step);
            points.push(z);
        }
        Ok(Self {
            t_min: -(n_back as f64) * step,
            dt: step,
            energy: ham.energy(&z0),
            points,
            escaped_forward: false,
            converged_backward: false,
        })
    }

    pub fn t_max(&self) -> f64 {
        self.t_min + (self.points.len() - 1) as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_min + k as f64 * self.dt
    }

    /// Index of the sample nearest to `t` (clamped).
    pub fn index_of(&self, t: f64) -> usize {
        let k = ((t - self.t_min) / self.dt).round();
        k.clamp(0.0, (self.points.len() - 1) as f64) as usize
    }

    /// Cubic Hermite interpolation using the vector field for slopes.
    pub fn at<H: Hamiltonian + ?Sized>(&self, ham: &H, t: f64) -> State {
        let x = ((t - self.t_min) / self.dt).clamp(0.0, (self.points.len() - 1) as f64);
        let k = (x.floor() as usize).min(self.points.len() - 2);
        let s = x - k as f64;
        let (a, b) = (&self.points[k], &self.points[k + 1]);
        let (va, vb) = (ham.vector_field(a), ham.vector_field(b));
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = h00 * a[i] + h10 * self.dt * va[i] + h01 * b[i] + h11 * self.dt * vb[i];
        }
        out
    }

    /// Maximum energy deviation over all samples.
    pub fn energy_drift<H: Hamiltonian + ?Sized>(&self, ham: &H) -> f64 {
        self.points
            .iter()
            .map(|z| (ham.energy(z) - self.energy).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t, r, theta, xi_r, xi_theta, p`.
    pub fn write_csv<H: Hamiltonian + ?Sized, W: Write>(&self, ham: &H, out: W, stride: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "r", "theta", "xi_r", "xi_theta", "p"])?;
        for (k, z) in self.points.iter().enumerate().step_by(stride.max(1)) {
            let pt = PhasePoint::from_array(*z).reduced_angle();
            wtr.serialize((self.time(k), pt.q[0], pt.q[1], pt.p[0], pt.p[1], ham.energy(z)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `γ(0) = (1, 0, a(1), 1)`.
pub fn gamma_start(geom: &SurfaceGeometry) -> State {
    [1.0, 0.0, geom.profile.eval(1.0).a, 1.0]
}

/// `(ṙ, θ̇)` on the orbit `ξ_r = r a(r)`, `ξ_θ = 1`.
fn orbit_rhs(geom: &SurfaceGeometry, r: f64) -> (f64, f64) {
    let a = geom.profile.eval(r).a;
    (2.0 * r * a, 2.0 * (1.0 - r * r * a * a))
}

/// Sample the escaping trajectory on `[t_min, t_max]`.
///
/// The past half is integrated on the orbit itself, where the flow
/// contracts toward the trapped circle; integrating the full system backward
/// would amplify round-off along the stable direction like `e^{2a(0)|t|}`.
pub fn compute_gamma(geom: &SurfaceGeometry, t_min: f64, t_max: f64, step: f64) -> Result<Trajectory> {
    let mut traj = Trajectory::integrate(geom, gamma_start(geom), -step, t_max, step)?;
    let n_back = (-t_min / step).round() as usize;
    let mut past = Vec::with_capacity(n_back);
    let (mut r, mut th) = (1.0, 0.0);
    let dt = -step;
    for _ in 0..n_back {
        let (k1r, k1t) = orbit_rhs(geom, r);
        let (k2r, k2t) = orbit_rhs(geom, r + 0.5 * dt * k1r);
        let (k3r, k3t) = orbit_rhs(geom, r + 0.5 * dt * k2r);
        let (k4r, k4t) = orbit_rhs(geom, r + dt * k3r);
        r += dt / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        th += dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t);
        past.push([r, th, r * geom.profile.eval(r).a, 1.0]);
    }
    past.reverse();
    past.extend_from_slice(&traj.points[1..]);
    traj.points = past;
    traj.t_min = -(n_back as f64) * step;
    for w in traj.points.windows(2) {
        if !(w[1][0] > w[0][0]) {
            return Err(LabError::Geometry(format!(
                "radial coordinate not increasing along the trajectory near r = {:.3e}",
                w[0][0]
            )));
        }
    }
    traj.escaped_forward = traj.points.last().is_some_and(|z| z[0] > geom.r_max);
    traj.converged_backward = traj.points[0][0] < 0.05;
    Ok(traj)
}

/// Distance from a phase point to the trapped circle `{r = 0, ξ_r = 0, ξ_θ = 1}`.
pub fn distance_to_trapped_set(z: &State) -> f64 {
    (z[0] * z[0] + z[2] * z[2] + (z[3] - 1.0) * (z[3] - 1.0)).sqrt()
}

/// Time at which the escaping trajectory first reaches radius `r`.
pub fn time_to_radius(traj: &Trajectory, r: f64) -> Option<f64> {
    let k = traj.points.iter().position(|z| z[0] >= r)?;
    if k == 0 {
        return Some(traj.t_min);
    }
    let (a, b) = (traj.points[k - 1][0], traj.points[k][0]);
    Some(traj.time(k - 1) + traj.dt * (r - a) / (b - a))
}

/// Status of a Lyapunov fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    Inconclusive,
}

/// Growth-rate estimate for the linearized flow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub estimate: f64,
    pub fit_residual: f64,
    pub horizon: f64,
    pub forward_rate: f64,
    pub backward_rate: f64,
    pub status: FitStatus,
}

/// Least-squares line fit; returns `(slope, intercept, rms residual, slope stderr)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let rms = (ss / n).sqrt();
    let stderr = if n > 2.0 {
        (ss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (slope, intercept, rms, stderr)
}

/// Integrate `Ḋ = ±J(γ(t ± σ)) D` along the stored trajectory for `σ ∈ [0, span]`,
/// calling `visit(k, σ_k, D_k)` at every step including `k = 0`.
///
/// The base path is read from `traj`, not re-integrated, so long backward
/// spans stay on the orbit.
pub fn variational_along<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    t: f64,
    sign: f64,
    n: usize,
    ds: f64,
    mut visit: impl FnMut(usize, f64, &Matrix4<f64>),
) {
    let jac = |sigma: f64| mat(ham.jacobian(&traj.at(ham, t + sign * sigma))) * sign;
    let mut d = Matrix4::<f64>::identity();
    visit(0, 0.0, &d);
    let mut j0 = jac(0.0);
    for k in 0..n {
        let s = k as f64 * ds;
        let jm = jac(s + 0.5 * ds);
        let j1 = jac(s + ds);
        let l1 = j0 * d;
        let l2 = jm * (d + l1 * (0.5 * ds));
        let l3 = jm * (d + l2 * (0.5 * ds));
        let l4 = j1 * (d + l3 * ds);
        d += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (ds / 6.0);
        j0 = j1;
        visit(k + 1, s + ds, &d);
    }
}

/// Fit `log‖D(t)‖` over the second half of `[0, horizon]` for two flows:
/// forward from `γ(−horizon)` and backward from `γ(0)`. The larger slope
/// is the estimate and its residual decides the status.
pub fn lyapunov_max<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    horizon: f64,
) -> Result<LyapunovEstimate> {
    if traj.t_min > -horizon + 0.5 * traj.dt {
        return Err(LabError::Config(format!(
            "trajectory starts at {} but the horizon needs {}",
            traj.t_min, -horizon
        )));
    }
    let rate = |t: f64, sign: f64| -> (f64, f64) {
        let (n, ds) = step_plan(horizon, traj.dt);
        let stride = (n / 400).max(1);
        let mut ts = Vec::new();
        let mut ys = Vec::new();
        variational_along(ham, traj, t, sign, n, ds, |k, s, d| {
            if k > 0 && s >= 0.5 * horizon && k % stride == 0 {
                ts.push(s);
                ys.push(spectral_norm(d).ln());
            }
        });
        let (slope, _, rms, _) = linear_fit(&ts, &ys);
        (slope, rms)
    };
    let (forward_rate, r1) = rate(-horizon, 1.0);
    let (backward_rate, r2) = rate(0.0, -1.0);
    let (estimate, fit_residual) = if forward_rate >= backward_rate {
        (forward_rate, r1)
    } else {
        (backward_rate, r2)
    };
    Ok(LyapunovEstimate {
        estimate,
        fit_residual,
        horizon,
        forward_rate,
        backward_rate,
        status: if fit_residual < 0.1 {
            FitStatus::Converged
        } else {
            FitStatus::Inconclusive
        },
    })
}

/// Which of the two adapted metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }
}

/// Upper-triangular `R` with `G = RᵀR`.
///
/// `G_+` has condition number of order `e^{4λT}`, far beyond what an
/// assembled matrix can hold; the factor keeps `|v|_G = |Rv|` accurate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricFactor {
    pub r: Matrix4<f64>,
}

impl MetricFactor {
    pub fn norm(&self, v: &Vector4<f64>) -> f64 {
        (self.r * v).norm()
    }

    pub fn inner(&self, u: &Vector4<f64>, v: &Vector4<f64>) -> f64 {
        (self.r * u).dot(&(self.r * v))
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        self.r.transpose() * self.r
    }

    pub fn singular_values(&self) -> Vector4<f64> {
        self.r.singular_values()
    }

    /// `λ_max(G) / λ_min(G)`.
    pub fn condition(&self) -> f64 {
        let s = self.singular_values();
        (s.max() / s.min()).powi(2)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { r: self.r * c }
    }
}

fn append_rows(r: &Matrix4<f64>, block: &Matrix4<f64>) -> Matrix4<f64> {
    let mut stacked = SMatrix::<f64, 8, 4>::zeros();
    stacked.fixed_view_mut::<4, 4>(0, 0).copy_from(r);
    stacked.fixed_view_mut::<4, 4>(4, 0).copy_from(block);
    stacked.qr().r()
}

/// Target spacing of the Simpson nodes; the flow itself uses the trajectory step.
const QUADRATURE_SPACING: f64 = 1e-2;

/// `∫₀ᵀ e^{±2λ₁s} D_sᵀ D_s ds` with `D_s = de^{−sH_p}(γ(t))`, composite
/// Simpson on nodes spaced about `QUADRATURE_SPACING`.
pub fn adapted_metric_factor<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    t: f64,
    branch: Branch,
    lambda1: f64,
    horizon: f64,
) -> MetricFactor {
    let sub = ((QUADRATURE_SPACING / traj.dt).round() as usize).max(1);
    let mut nodes = ((horizon / (sub as f64 * traj.dt)).ceil() as usize).max(2);
    nodes += nodes % 2;
    let n = nodes * sub;
    let ds = horizon / n as f64;
    let h_node = ds * sub as f64;
    let mut r = Matrix4::<f64>::zeros();
    variational_along(ham, traj, t, -1.0, n, ds, |k, s, d| {
        if k % sub != 0 {
            return;
        }
        let node = k / sub;
        let w = if node == 0 || node == nodes {
            1.0
        } else if node % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let c = (w * h_node / 3.0).sqrt() * (branch.sign() * lambda1 * s).exp();
        r = append_rows(&r, &(d * c));
    });
    MetricFactor { r }
}

/// Adapted metrics `G_±` along the trajectory.
///
/// Each branch carries its own horizon and a global scale chosen so that
/// `|v|_{G_±} ≥ |v|` at `γ(0)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptedFrame {
    pub lambda1: f64,
    pub horizon_plus: f64,
    pub horizon_minus: f64,
    pub scale_plus: f64,
    pub scale_minus: f64,
    pub times: Vec<f64>,
    pub g_plus: Vec<MetricFactor>,
    pub g_minus: Vec<MetricFactor>,
    pub condition_plus: Vec<f64>,
    pub condition_minus: Vec<f64>,
}

impl AdaptedFrame {
    pub fn horizon(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.horizon_plus,
            Branch::Minus => self.horizon_minus,
        }
    }

    /// Scaled metric at `γ(t)`.
    pub fn metric_at<H: Hamiltonian + ?Sized>(
        &self,
        ham: &H,
        traj: &Trajectory,
        t: f64,
        branch: Branch,
    ) -> MetricFactor {
        let scale = match branch {
            Branch::Plus => self.scale_plus,
            Branch::Minus => self.scale_minus,
        };
        adapted_metric_factor(ham, traj, t, branch, self.lambda1, self.horizon(branch)).scaled(scale)
    }
}

/// Build `G_±` at the given sample times of `traj`.
pub fn build_adapted_metric<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    lambda1: f64,
    horizon_plus: f64,
    horizon_minus: f64,
    times: &[f64],
) -> Result<AdaptedFrame> {
    if !(horizon_plus > 0.0 && horizon_minus > 0.0 && lambda1 > 0.0) {
        return Err(LabError::Config("adapted metric needs positive λ₁ and horizons".into()));
    }
    let earliest = times.iter().cloned().fold(0.0, f64::min) - horizon_plus.max(horizon_minus);
    if traj.t_min > earliest + 0.5 * traj.dt {
        return Err(LabError::Config(format!(
            "trajectory starts at {} but the adapted metric needs {earliest}",
            traj.t_min
        )));
    }
    let unit = |branch: Branch, horizon: f64| {
        let f = adapted_metric_factor(ham, traj, 0.0, branch, lambda1, horizon);
        1.0 / f.singular_values().min()
    };
    let mut frame = AdaptedFrame {
        lambda1,
        horizon_plus,
        horizon_minus,
        scale_plus: unit(Branch::Plus, horizon_plus),
        scale_minus: unit(Branch::Minus, horizon_minus),
        times: times.to_vec(),
        g_plus: Vec::new(),
        g_minus: Vec::new(),
        condition_plus: Vec::new(),
        condition_minus: Vec::new(),
    };
    for &t in times {
        let gp = frame.metric_at(ham, traj, t, Branch::Plus);
        let gm = frame.metric_at(ham, traj, t, Branch::Minus);
        frame.condition_plus.push(gp.condition());
        frame.condition_minus.push(gm.condition());
        frame.g_plus.push(gp);
        frame.g_minus.push(gm);
    }
    Ok(frame)
}

/// Relative change of `G` at `γ(0)` under `T → 2T`. `G_−` is compared in the
/// metric sense, `max_v |ΔG(v,v)| / G(v,v)`; `G_+` grows without bound, so
/// its trace-normalized shape is compared in Frobenius norm.
pub fn horizon_doubling_change<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    branch: Branch,
    lambda1: f64,
    horizon: f64,
) -> f64 {
    let g1 = adapted_metric_factor(ham, traj, 0.0, branch, lambda1, horizon);
    let g2 = adapted_metric_factor(ham, traj, 0.0, branch, lambda1, 2.0 * horizon);
    match branch {
        Branch::Plus => {
            let shape = |g: &MetricFactor| {
                let m = g.matrix();
                m / m.trace()
            };
            let (a, b) = (shape(&g1), shape(&g2));
            (b - a).norm() / a.norm()
        }
        Branch::Minus => match g1.r.try_inverse() {
            Some(inv) => {
                let s = (g2.r * inv).singular_values();
                (s.max().powi(2) - 1.0).abs().max((1.0 - s.min().powi(2)).abs())
            }
            None => f64::INFINITY,
        },
    }
}

/// Outcome of the horizon doubling search for one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonChoice {
    pub horizon: f64,
    pub change: f64,
    pub converged: bool,
}

/// Smallest `T = T_start·2^k ≤ T_cap` whose doubling changes `G` by less than `tol`.
pub fn choose_horizon<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    branch: Branch,
    lambda1: f64,
    t_start: f64,
    t_cap: f64,
    tol: f64,
) -> HorizonChoice {
    let mut horizon = t_start;
    loop {
        let change = horizon_doubling_change(ham, traj, branch, lambda1, horizon);
        if change < tol || 2.0 * horizon > t_cap {
            return HorizonChoice {
                horizon,
                change,
                converged: change < tol,
            };
        }
        horizon *= 2.0;
    }
}

/// Worst case of the contraction inequality over the samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptedReport {
    pub samples: usize,
    /// Smallest `1 − |D v|_{G'} / (e^{λ₁t₀} |v|_G)` over all samples and both branches.
    pub min_margin: f64,
    pub worst_time: f64,
    pub worst_branch: Branch,
    pub passed: bool,
}

/// Check `|de^{±t₀H_p}(γ(t))v|_{G_±} ≤ e^{λ₁t₀}|v|_{G_±}` at random `t ∈ [t_lo, 0]`
/// and random unit directions `v`.
#[allow(clippy::too_many_arguments)]
pub fn check_adapted<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    frame: &AdaptedFrame,
    t0: f64,
    t_lo: f64,
    samples: usize,
    seed: u64,
) -> AdaptedReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let growth = (frame.lambda1 * t0).exp();
    let lo = t_lo.max(traj.t_min + t0 + frame.horizon_plus.max(frame.horizon_minus));
    let draws: Vec<(f64, Vector4<f64>)> = (0..samples)
        .map(|_| {
            let t = rng.gen_range(lo..=0.0);
            let v = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            (t, v)
        })
        .collect();
    let margins: Vec<(f64, f64, Branch)> = draws
        .par_iter()
        .flat_map_iter(|&(t, v)| {
            [Branch::Plus, Branch::Minus].map(|branch| {
                let (n, ds) = step_plan(t0, traj.dt);
                let mut d = Matrix4::identity();
                variational_along(ham, traj, t, branch.sign(), n, ds, |k, _, m| {
                    if k == n {
                        d = *m;
                    }
                });
                let g0 = frame.metric_at(ham, traj, t, branch);
                let g1 = frame.metric_at(ham, traj, t + branch.sign() * t0, branch);
                let margin = 1.0 - g1.norm(&(d * v)) / (growth * g0.norm(&v));
                (margin, t, branch)
            })
        })
        .collect();
    let mut report = AdaptedReport {
        samples,
        min_margin: f64::INFINITY,
        worst_time: 0.0,
        worst_branch: Branch::Plus,
        passed: true,
    };
    for (margin, t, branch) in margins {
        if margin < report.min_margin {
            report.min_margin = margin;
            report.worst_time = t;
            report.worst_branch = branch;
        }
    }
    report.passed = report.min_margin > 0.0;
    report
}

/// Outcome of the tube propagation check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeReport {
    pub samples: usize,
    pub epsilon: f64,
    /// `max |S_± − s| / |v|`.
    pub shift_constant: f64,
    /// Same constant at `ε/2`.
    pub shift_constant_half: f64,
    /// `max |v_±| / |v|`.
    pub max_growth: f64,
    pub growth_bound: f64,
    pub projection_failures: usize,
    pub passed: bool,
}

/// Find `τ` near `tau0` with `y − γ(τ) ⊥_G H_p(γ(τ))`, the stationary point
/// of `τ ↦ |y − γ(τ)|_G`. Returns `(τ, y − γ(τ))`.
fn project_onto_trajectory<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    g: &MetricFactor,
    y: &State,
    tau0: f64,
    window: f64,
) -> Option<(f64, Vector4<f64>)> {
    let offset = |tau: f64| {
        let z = traj.at(ham, tau);
        Vector4::new(y[0] - z[0], y[1] - z[1], y[2] - z[2], y[3] - z[3])
    };
    let f = |tau: f64| {
        let hp = Vector4::from(ham.vector_field(&traj.at(ham, tau)));
        g.inner(&offset(tau), &hp)
    };
    let grid = 64;
    let node = |i: usize| tau0 - window + 2.0 * window * i as f64 / grid as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut prev = f(node(0));
    for i in 1..=grid {
        let cur = f(node(i));
        if prev.signum() != cur.signum() || cur == 0.0 {
            let (mut a, mut b, mut fa) = (node(i - 1), node(i), prev);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            let root = 0.5 * (a + b);
            if best.is_none_or(|(r, _)| (root - tau0).abs() < (r - tau0).abs()) {
                best = Some((root, 0.0));
            }
        }
        prev = cur;
    }
    best.map(|(tau, _)| (tau, offset(tau)))
}

/// Push points `γ(t+s) + v`, `v ⊥_G H_p`, `|v|_G ≤ ε`, by `e^{±t₀H_p}` and
/// decompose the image as `γ(t ± t₀ + S) + v_±`. The metric is frozen at
/// the nominal base points `γ(t+s)` and `γ(t+s±t₀)`.
#[allow(clippy::too_many_arguments)]
pub fn check_tube<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    frame: &AdaptedFrame,
    t0: f64,
    epsilon: f64,
    lambda2: f64,
    t_lo: f64,
    samples: usize,
    seed: u64,
) -> TubeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = t_lo.max(traj.t_min + 2.0 * t0 + frame.horizon_plus.max(frame.horizon_minus));
    let draws: Vec<(Branch, f64, f64, Vector4<f64>, f64)> = (0..samples)
        .map(|i| {
            let branch = if i % 2 == 0 { Branch::Plus } else { Branch::Minus };
            let t = rng.gen_range(lo..=0.0);
            let s = rng.gen_range(-0.75 * t0..=0.75 * t0);
            let v = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            (branch, t, s, v, rng.gen_range(0.2..1.0))
        })
        .collect();
    let run = |eps: f64| -> (f64, f64, usize) {
        let results: Vec<Option<(f64, f64)>> = draws
            .par_iter()
            .map(|&(branch, t, s, v, frac)| {
                let base_t = t + s;
                let base = traj.at(ham, base_t);
                let g0 = frame.metric_at(ham, traj, base_t, branch);
                let hp = Vector4::from(ham.vector_field(&base));
                let mut v = v - hp * (g0.inner(&v, &hp) / g0.inner(&hp, &hp));
                v *= eps * frac / g0.norm(&v);
                let v_norm = g0.norm(&v);
                let start = [base[0] + v[0], base[1] + v[1], base[2] + v[2], base[3] + v[3]];
                let y = flow_point(ham, &start, branch.sign() * t0, traj.dt);
                let tau0 = base_t + branch.sign() * t0;
                let g1 = frame.metric_at(ham, traj, tau0, branch);
                project_onto_trajectory(ham, traj, &g1, &y, tau0, 0.25 * t0)
                    .map(|(tau, off)| ((tau - tau0).abs() / v_norm, g1.norm(&off) / v_norm))
            })
            .collect();
        let mut shift: f64 = 0.0;
        let mut growth: f64 = 0.0;
        let mut failures = 0;
        for r in results {
            match r {
                Some((sc, gr)) => {
                    shift = shift.max(sc);
                    growth = growth.max(gr);
                }
                None => failures += 1,
            }
        }
        (shift, growth, failures)
    };
    let (shift_constant, max_growth, f1) = run(epsilon);
    let (shift_constant_half, growth_half, f2) = run(0.5 * epsilon);
    let growth_bound = (lambda2 * t0).exp();
    let stable = shift_constant_half <= 2.0 * shift_constant + 1e-12
        && shift_constant <= 2.0 * shift_constant_half + 1e-12;
    let max_growth = max_growth.max(growth_half);
    TubeReport {
        samples,
        epsilon,
        shift_constant,
        shift_constant_half,
        max_growth,
        growth_bound,
        projection_failures: f1 + f2,
        passed: f1 + f2 == 0 && max_growth <= growth_bound && stable,
    }
}

/// Minimum reference distance between `γ(I₁)` and `γ(I₂)`, sampled every
/// `stride` points.
pub fn min_self_distance<H: Hamiltonian + ?Sized>(
    ham: &H,
    traj: &Trajectory,
    i1: (f64, f64),
    i2: (f64, f64),
    stride: usize,
) -> f64 {
    let range = |(a, b): (f64, f64)| {
        let lo = traj.index_of(a.max(traj.t_min));
        let hi = traj.index_of(b.min(traj.t_max()));
        (lo, hi)
    };
    let (a0, a1) = range(i1);
    let (b0, b1) = range(i2);
    let mut best = f64::INFINITY;
    for i in (a0..=a1).step_by(stride.max(1)) {
        for j in (b0..=b1).step_by(stride.max(1)) {
            best = best.min(ham.distance(&traj.points[i], &traj.points[j]));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ModelGeometry, Profile, ProfileSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn geometry(alpha: f64) -> SurfaceGeometry {
        let spec = ProfileSpec {
            alpha,
            ..ProfileSpec::default()
        };
        SurfaceGeometry::with_default_domain(Profile::new(spec).unwrap()).unwrap()
    }

    /// Dormand–Prince 5(4) with step control; independent oracle for scalar ODEs.
    fn dopri_scalar(f: impl Fn(f64) -> f64, y0: f64, t_end: f64, tol: f64) -> f64 {
        let c = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
        let a: [&[f64]; 7] = [
            &[],
            &[0.2],
            &[3.0 / 40.0, 9.0 / 40.0],
            &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
            &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
            &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
            &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        let b5 = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        let b4 = [
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ];
        let _ = c;
        let dir = t_end.signum();
        let (mut t, mut y, mut h) = (0.0, y0, 1e-3 * dir);
        while (t_end - t) * dir > 0.0 {
            if (t + h - t_end) * dir > 0.0 {
                h = t_end - t;
            }
            let mut k = [0.0; 7];
            for i in 0..7 {
                let yi = y + h * a[i].iter().zip(&k).map(|(ai, ki)| ai * ki).sum::<f64>();
                k[i] = f(yi);
            }
            let y5 = y + h * b5.iter().zip(&k).map(|(b, k)| b * k).sum::<f64>();
            let y4 = y + h * b4.iter().zip(&k).map(|(b, k)| b * k).sum::<f64>();
            let err = (y5 - y4).abs();
            if err <= tol {
                t += h;
                y = y5;
            }
            let fac = (0.9 * (tol / err.max(1e-300)).powf(0.2)).clamp(0.2, 5.0);
            h *= fac;
        }
        y
    }

    #[test]
    fn trapped_orbit_is_reproduced() {
        let g = geometry(0.5);
        let out = integrate_flow(&g, PhasePoint::new(0.0, 0.0, 0.0, 1.0), 3.0, DEFAULT_STEP).unwrap();
        assert_abs_diff_eq!(out.point.q[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.point.q[1], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.point.p[0], 0.0, epsilon = 1e-14);
        assert_eq!(out.point.p[1], 1.0);
        assert!(out.exit_time.is_none());
    }

    #[test]
    fn zero_time_is_identity() {
        let g = geometry(0.5);
        let pt = PhasePoint::new(0.3, 1.0, -0.2, 0.9);
        assert_eq!(integrate_flow(&g, pt, 0.0, DEFAULT_STEP).unwrap().point, pt);
    }

    #[test]
    fn radial_component_matches_scalar_oracle() {
        let g = geometry(0.5);
        let a1 = g.profile.eval(1.0).a;
        let out = integrate_flow(&g, PhasePoint::new(1.0, 0.0, a1, 1.0), 0.5, DEFAULT_STEP).unwrap();
        let oracle = dopri_scalar(|r| 2.0 * r * g.profile.eval(r).a, 1.0, 0.5, 1e-12);
        assert_abs_diff_eq!(out.point.q[0], oracle, epsilon = 1e-8);
        let back = dopri_scalar(|r| 2.0 * r * g.profile.eval(r).a, 1.0, -10.0, 1e-13);
        let traj = compute_gamma(&g, -10.0, 1.0, DEFAULT_STEP).unwrap();
        assert!((traj.points[0][0] - back).abs() < 1e-8 * back.max(1e-3) / 1e-3);
        assert!(back < 0.05);
    }

    #[test]
    fn exit_time_is_reported() {
        let g = geometry(0.5);
        let a1 = g.profile.eval(1.0).a;
        let out = integrate_flow(&g, PhasePoint::new(1.0, 0.0, a1, 1.0), 6.0, DEFAULT_STEP).unwrap();
        let te = out.exit_time.expect("trajectory escapes");
        assert!(te > 0.0 && te < 6.0);
    }

    #[test]
    fn gamma_is_monotone_and_conserves_energy() {
        let g = geometry(0.5);
        let traj = compute_gamma(&g, -30.0, 30.0, DEFAULT_STEP).unwrap();
        assert!(traj.escaped_forward);
        assert!(traj.converged_backward);
        assert!(traj.energy_drift(&g) <= 1e-9);
        assert_abs_diff_eq!(traj.energy, 1.0, epsilon = 1e-15);
        let xi0 = traj.points[0][3];
        assert!(traj.points.iter().all(|z| (z[3] - xi0).abs() <= 1e-12));
        assert!(traj.at(&g, -10.0)[0] < 0.05);
        let d_far = distance_to_trapped_set(&traj.at(&g, -25.0));
        let d_near = distance_to_trapped_set(&traj.at(&g, -5.0));
        assert!(d_far < 1e-6 && d_far < d_near);
    }

    #[test]
    fn hermite_interpolation_matches_direct_flow() {
        let g = geometry(0.5);
        let traj = compute_gamma(&g, -5.0, 3.0, DEFAULT_STEP).unwrap();
        let t = 0.73456;
        let direct = flow_point(&g, &gamma_start(&g), t, 1e-4);
        let interp = traj.at(&g, t);
        for i in 0..4 {
            assert_abs_diff_eq!(direct[i], interp[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn monodromy_basics() {
        let g = geometry(0.5);
        let z = gamma_start(&g);
        let d0 = variational_flow(&g, &z, 0.0, DEFAULT_STEP);
        assert_eq!(d0.matrix, Matrix4::identity());
        let d = variational_flow(&g, &z, 1.5, DEFAULT_STEP);
        assert_abs_diff_eq!(d.matrix.determinant(), 1.0, epsilon = 1e-6);
        assert!(d.symplectic_defect() < 1e-6);
    }

    #[test]
    fn hyperbolic_block_on_trapped_orbit() {
        let g = geometry(0.5);
        let d = variational_flow(&g, &[0.0, 0.0, 0.0, 1.0], 2.0, DEFAULT_STEP);
        let block = nalgebra::Matrix2::new(
            d.matrix[(0, 0)],
            d.matrix[(0, 2)],
            d.matrix[(2, 0)],
            d.matrix[(2, 2)],
        );
        let ev = block.complex_eigenvalues();
        let rho = ev.iter().map(|e| e.norm()).fold(0.0, f64::max);
        assert!((rho - 2f64.exp()).abs() < 0.02 * 2f64.exp(), "rho = {rho}");
    }

    #[test]
    fn lyapunov_matches_twice_alpha() {
        for alpha in [0.25, 0.5, 0.75] {
            let g = geometry(alpha);
            let traj = compute_gamma(&g, -21.0, 1.0, DEFAULT_STEP).unwrap();
            let est = lyapunov_max(&g, &traj, 20.0).unwrap();
            let target = 2.0 * alpha;
            assert!(
                (est.estimate - target).abs() <= 0.05 * target,
                "alpha {alpha}: {est:?}"
            );
        }
    }

    #[test]
    fn translation_model_has_zero_rate() {
        let m = ModelGeometry::transport(vec![10.0, 4.0]).unwrap();
        let traj = Trajectory::integrate(&m, [0.0, 0.0, 1.0, 0.0], -12.0, 1.0, 1e-2).unwrap();
        let est = lyapunov_max(&m, &traj, 10.0).unwrap();
        assert!(est.estimate.abs() <= 0.01);
    }

    #[test]
    fn adapted_inequality_trivial_for_model() {
        let m = ModelGeometry::transport(vec![10.0]).unwrap();
        let traj = Trajectory::integrate(&m, [0.0, 0.0, 1.0, 0.0], -12.0, 2.0, 1e-2).unwrap();
        let frame = build_adapted_metric(&m, &traj, 0.1, 2.0, 2.0, &[0.0]).unwrap();
        let rep = check_adapted(&m, &traj, &frame, 1.0, -5.0, 20, 1);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn self_distance_of_singleton_is_zero() {
        let g = geometry(0.5);
        let traj = compute_gamma(&g, -3.0, 1.0, DEFAULT_STEP).unwrap();
        assert_eq!(min_self_distance(&g, &traj, (-0.5, -0.5), (-0.5, -0.5), 1), 0.0);
        let eps = min_self_distance(&g, &traj, (-0.25, 0.25), (-3.0, -1.0 / 3.0), 5);
        assert!(eps > 0.0);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, c, rms, _) = linear_fit(&x, &y);
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, -1.0, epsilon = 1e-12);
        assert!(rms < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn flow_composition(r in -1.5f64..1.5, xr in -0.8f64..0.8, xt in 0.2f64..1.2,
                            s in -1.0f64..1.0, t in -1.0f64..1.0) {
            let g = geometry(0.5);
            let z = [r, 0.3, xr, xt];
            let direct = flow_point(&g, &z, s + t, 1e-3 / 4.0);
            let composed = flow_point(&g, &flow_point(&g, &z, s, 1e-3 / 4.0), t, 1e-3 / 4.0);
            for i in 0..4 {
                prop_assert!((direct[i] - composed[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn monodromy_cocycle(r in -1.0f64..1.0, xr in -0.5f64..0.5, s in 0.1f64..1.0, t in 0.1f64..1.0) {
            let g = geometry(0.5);
            let z = [r, 0.0, xr, 1.0];
            let ds = variational_flow(&g, &z, s, 1e-3);
            let dt = variational_flow(&g, &ds.endpoint, t, 1e-3);
            let dst = variational_flow(&g, &z, s + t, 1e-3);
            let diff = (dt.matrix * ds.matrix - dst.matrix).amax();
            prop_assert!(diff < 1e-6 * (1.0 + dst.matrix.amax()));
            prop_assert!(dst.symplectic_defect() < 1e-6);
        }

        #[test]
        fn energy_conserved_along_random_flows(r in -3.0f64..3.0, xr in -1.0f64..1.0, xt in -1.0f64..1.0) {
            let g = geometry(0.5);
            let z = [r, 0.0, xr, xt];
            let e0 = g.energy(&z);
            let z1 = flow_point(&g, &z, 5.0, DEFAULT_STEP);
            prop_assert!((g.energy(&z1) - e0).abs() <= 1e-9 * 5.0 * (1.0 + e0));
            prop_assert_eq!(z1[3], xt);
        }
    }
}

//! Gaussian beams: the exact flat-model beam, the time-smeared short beam on
//! the surface, the iterated long beam and its localization diagnostics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{Cutoff, Factor, SandwichSymbol, StepProfile, Variable};
use crate::error::{LabError, Result};
use crate::field::{husimi_cloud, HusimiConfig, ModelField, ModelGrid, TubeRegion, WaveField};
use crate::flow::{compute_gamma, min_self_distance, Trajectory};
use crate::geometry::{ModelGeometry, SurfaceGeometry};
use crate::propagate::{ModelPropagator, Params, Propagator, PropagatorConfig, SurfaceSolver};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Beam construction and diagnostic constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    /// Support of the smearing density `ψ` as fractions of `t₀`.
    pub smear_lo: f64,
    pub smear_hi: f64,
    /// `χ = 1` on `|r| ≤ r(2t₀) + chi_margin`, tapering to 0 over `chi_taper`.
    pub chi_margin: f64,
    pub chi_taper: f64,
    /// Tube constant `K` for the short-beam masses (radius `K·h^ρ`).
    pub short_tube_constant: f64,
    /// Tube constant `C` for the long-beam masses (radius `C·e^{|j|λt₀}h^ρ`).
    pub tube_constant: f64,
    pub mass_threshold: f64,
    /// Transition width of witness cutoffs, in units of `h^ρ`.
    pub witness_margin: f64,
    pub witness_floor: f64,
    /// Budget for the short-beam identity, relative to `‖u₀‖`.
    pub identity_budget: f64,
    pub husimi: HusimiConfig,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            smear_lo: 0.35,
            smear_hi: 0.65,
            chi_margin: 1.5,
            chi_taper: 1.0,
            short_tube_constant: 10.0,
            tube_constant: 20.0,
            mass_threshold: 0.99,
            witness_margin: 1.0,
            witness_floor: 0.1,
            identity_budget: 1e-6,
            husimi: HusimiConfig::default(),
        }
    }
}

impl BeamConfig {
    fn smear(&self, t0: f64) -> StepProfile {
        StepProfile {
            lo: self.smear_lo * t0,
            hi: self.smear_hi * t0,
        }
    }
}

// ---------------------------------------------------------------- model beam

/// Report of the flat-model beam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBeamReport {
    pub h: f64,
    pub t0: f64,
    pub dim: usize,
    pub points: Vec<usize>,
    /// `‖(P−ω²)u − h(e^{it₀ω²/h}f(·−t₀) − f)‖ / ‖h f‖`.
    pub identity_residual: f64,
    /// `|u(0,0) − h^{−(n−1)/4}|`.
    pub origin_error: f64,
    /// Max deviation of the grid Fourier transform from the closed form, relative to its peak.
    pub fourier_error: f64,
    pub u_norm: f64,
    pub f_norm: f64,
    /// `‖Op(a_u)u − u‖/‖u‖`.
    pub a_u_defect: f64,
    /// `‖Op(b_u)u‖`.
    pub b_u_value: f64,
    /// `‖Op(a_f)f − f‖/‖f‖`.
    pub a_f_defect: f64,
    /// Symbol constant used for the `h^ρ` scales.
    pub symbol_constant: f64,
}

#[derive(Debug, Clone)]
pub struct ModelBeam {
    pub u: ModelField,
    pub f: ModelField,
    pub report: ModelBeamReport,
}

/// Grid controls for the model beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelBeamConfig {
    /// Longitudinal spacing as a fraction of `h`.
    pub dx_per_h: f64,
    /// Longitudinal box as a multiple of `t₀`.
    pub box_t0: f64,
    /// Transverse box in units of `√h`.
    pub box_sqrt_h: f64,
    pub rho: f64,
    /// Scales of the frequency/transverse cutoffs are `symbol_constant·h^ρ`.
    pub symbol_constant: f64,
}

impl Default for ModelBeamConfig {
    fn default() -> Self {
        Self {
            dx_per_h: 1.0 / 16.0,
            box_t0: 3.0,
            box_sqrt_h: 16.0,
            rho: 0.35,
            symbol_constant: 6.0,
        }
    }
}

/// `∫ e^{−ixτ} g(x) dx` over `[a, b]` by composite Simpson (complex `τ`).
fn simpson_transform(g: impl Fn(f64) -> f64, a: f64, b: f64, tau: Complex64, n: usize) -> Complex64 {
    let n = n + n % 2;
    let dx = (b - a) / n as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..=n {
        let x = a + k as f64 * dx;
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * g(x) * (-I * x * tau).exp();
    }
    acc * dx / 3.0
}

/// The exact model beam `u = h^{−(n−1)/4}φ(x₁)e^{iω²x₁/h}e^{−|x′|²/2h}`,
/// `f = ih^{−(n−1)/4}ψ(x₁+t₀)e^{iω²x₁/h}e^{−|x′|²/2h}` for `P = hD_{x₁}`.
pub fn model_beam(h: f64, t0: f64, energy: f64, nu: f64, dim: usize, beam: &BeamConfig, cfg: &ModelBeamConfig) -> Result<ModelBeam> {
    if !(dim == 1 || dim == 2) {
        return Err(LabError::Config(format!("model dimension {dim} must be 1 or 2")));
    }
    let omega = Complex64::new(energy.sqrt(), -h * nu);
    let w2 = omega * omega;
    let psi = beam.smear(t0);
    let phi = |x: f64| psi.primitive(x + t0) - psi.primitive(x);
    let l1 = cfg.box_t0 * t0;
    let n1 = ((l1 / (cfg.dx_per_h * h)).ceil() as usize).next_power_of_two();
    let mut points = vec![n1];
    let mut lengths = vec![l1];
    if dim == 2 {
        let l2 = cfg.box_sqrt_h * h.sqrt();
        points.push(((l2 / (h.sqrt() / 4.0)).ceil() as usize).next_power_of_two());
        lengths.push(l2);
    }
    let grid = ModelGrid::new(h, points.clone(), lengths)?;
    let amp = h.powf(-((dim - 1) as f64) / 4.0);
    let transverse = |x: &[f64]| (-x[1..].iter().map(|v| v * v).sum::<f64>() / (2.0 * h)).exp();
    let carrier = |x1: f64| (I * w2 * x1 / h).exp();
    let u = ModelField::from_fn(&grid, |x| amp * phi(x[0]) * carrier(x[0]) * transverse(x));
    let f_at = |x1: f64, x: &[f64]| I * amp * psi.density(x1 + t0) * carrier(x1) * transverse(x);
    let f = ModelField::from_fn(&grid, |x| f_at(x[0], x));

    let geom = ModelGeometry::transport(grid.lengths.clone())?;
    let prop = ModelPropagator::new(&geom, &grid, w2)?;
    let lhs = prop.apply_p(&u);
    let shift = (I * t0 * w2 / h).exp();
    let rhs = ModelField::from_fn(&grid, |x| h * (shift * f_at(x[0] - t0, x) - f_at(x[0], x)));
    let mut hf = f.clone();
    hf.scale(h.into());
    let identity_residual = lhs.sub(&rhs).norm() / hf.norm();

    let origin_error = (phi(0.0) * amp - amp).abs();

    // Semiclassical Fourier transform on the grid against the closed form.
    let mut spec = u.clone();
    spec.fft(false);
    let norm = grid.cell() / (2.0 * PI * h).powf(dim as f64 / 2.0);
    let n2 = if dim == 2 { grid.points[1] } else { 1 };
    let mut fourier_error = 0.0f64;
    let mut peak = 0.0f64;
    let k_center = (energy * grid.lengths[0] / (2.0 * PI * h)).round() as i64;
    for dk in (-40..=40).step_by(4) {
        for j2 in [0usize, 1, 2] {
            if dim == 1 && j2 > 0 {
                continue;
            }
            let k1 = (k_center + dk).rem_euclid(n1 as i64) as usize;
            let idx = k1 * n2 + j2;
            let xi = grid.frequencies(idx);
            // Undo the box offset: x_j = −L/2 + j·dx.
            let mut offset = 0.0;
            for (a, &x) in xi.iter().enumerate() {
                offset += x * grid.lengths[a] / (2.0 * h);
            }
            let grid_value = spec.data[idx] * norm * Complex64::from_polar(1.0, offset);
            let tau = (xi[0] - w2) / h;
            let hat = simpson_transform(phi, -psi.hi, psi.hi, tau, 40000);
            let trans: f64 = xi[1..].iter().map(|v| (-v * v / (2.0 * h)).exp()).product();
            let closed = (2.0 * PI * h).powf(-0.5) * amp * hat * trans;
            fourier_error = fourier_error.max((grid_value - closed).norm());
            peak = peak.max(closed.norm());
        }
    }
    let fourier_error = fourier_error / peak;

    // Localizing sandwiches with cutoffs at the scale `C·h^ρ`.
    let s = cfg.symbol_constant * h.powf(cfg.rho);
    let chi = Cutoff::new(beam.smear_hi, beam.smear_hi + 0.02)?;
    let mut fa = vec![
        Factor::new(Variable::X1, 0.0, t0, chi),
        Factor::new(Variable::Xi1, energy, s, chi),
    ];
    if dim == 2 {
        fa.push(Factor::new(Variable::XPerp, 0.0, s, chi));
        fa.push(Factor::new(Variable::XiPerp, 0.0, s, chi));
    }
    let a_u = SandwichSymbol::new(fa.clone(), cfg.rho, h)?;
    let a_u_defect = a_u.apply_model(&u)?.sub(&u).norm() / u.norm();
    let mut fb = fa.clone();
    fb[0] = Factor::new(Variable::X1, 0.0, t0, Cutoff::new(0.2, 0.25)?);
    let b_u_value = SandwichSymbol::new(fb, cfg.rho, h)?.apply_model(&u)?.norm();
    let mut ff = fa;
    let mid = -0.5 * (beam.smear_lo + beam.smear_hi) * t0;
    let half = 0.5 * (beam.smear_hi - beam.smear_lo);
    ff[0] = Factor::new(Variable::X1, mid, t0, Cutoff::new(half, half + 0.02)?);
    let a_f_defect = SandwichSymbol::new(ff, cfg.rho, h)?.apply_model(&f)?.sub(&f).norm() / f.norm();

    let report = ModelBeamReport {
        h,
        t0,
        dim,
        points,
        identity_residual,
        origin_error,
        fourier_error,
        u_norm: u.norm(),
        f_norm: f.norm(),
        a_u_defect,
        b_u_value,
        a_f_defect,
        symbol_constant: cfg.symbol_constant,
    };
    Ok(ModelBeam { u, f, report })
}

// ------------------------------------------------------------- surface setup

/// Geometry, trajectory, resolved parameters and propagator at one `h`.
#[derive(Debug, Clone)]
pub struct SurfaceSetup {
    pub geom: SurfaceGeometry,
    pub traj: Trajectory,
    pub params: Params,
    pub solver: SurfaceSolver,
}

impl SurfaceSetup {
    /// The time step is shrunk so that `t₀` is a whole number of steps.
    pub fn new(geom: &SurfaceGeometry, params: &Params, cfg: &PropagatorConfig) -> Result<Self> {
        let base = cfg.dt(params.h);
        let k = (params.t0 / base).ceil();
        let cfg = PropagatorConfig {
            dt: Some(params.t0 / k),
            ..cfg.clone()
        };
        let solver = SurfaceSolver::new(geom, params, &cfg)?;
        let t_min = -(2.0 * params.total_time() + 3.0 * params.t0 + 2.0);
        let t_max = 0.5 * geom.r_max + 4.0;
        let traj = compute_gamma(geom, t_min, t_max, 1e-3)?;
        Ok(Self {
            geom: geom.clone(),
            traj,
            params: params.clone(),
            solver,
        })
    }

    pub fn h(&self) -> f64 {
        self.params.h
    }

    /// Smallest `|r|` where the absorbing layer is active (`R` without one).
    pub fn absorber_onset(&self) -> f64 {
        let g = &self.solver.layout.grid;
        let w = self.propagator().op.absorber();
        (0..g.n)
            .filter(|&i| w[i] > 0.0)
            .map(|i| g.r(i).abs())
            .fold(self.geom.r_max, f64::min)
    }

    pub fn propagator(&self) -> &Propagator {
        &self.solver.propagator
    }

    pub fn gamma(&self, t: f64) -> [f64; 4] {
        self.traj.at(&self.geom, t)
    }

    /// `θ` of the trajectory is unwrapped; fields live on the circle.
    pub fn tube(&self, t1: f64, t2: f64, radius: f64) -> Result<TubeRegion> {
        TubeRegion::new(&self.geom, &self.traj, t1, t2, radius)
    }

    /// Product-region witness around `γ([t_c − half, t_c + half])`: plateaus cover
    /// the ranges of `r` and `ξ_r` on the segment and `ξ_θ = √E`, with
    /// transitions of width `margin·h^ρ`.
    pub fn segment_witness(&self, t_c: f64, half: f64, margin: f64) -> Result<SandwichSymbol> {
        let h = self.h();
        let w = margin * h.powf(self.params.rho);
        let n = 64;
        let pts: Vec<[f64; 4]> = (0..=n)
            .map(|k| self.gamma(t_c - half + 2.0 * half * k as f64 / n as f64))
            .collect();
        let range = |i: usize| {
            let lo = pts.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            (0.5 * (lo + hi), 0.5 * (hi - lo))
        };
        let factor = |var: Variable, (c, half): (f64, f64)| -> Result<Factor> {
            Ok(Factor::new(var, c, 1.0, Cutoff::new(half, half + w)?))
        };
        SandwichSymbol::new(
            vec![
                factor(Variable::R, range(0))?,
                factor(Variable::XiR, range(2))?,
                factor(Variable::Mode, (self.params.energy.sqrt(), 0.0))?,
            ],
            self.params.rho,
            h,
        )
    }
}

// ---------------------------------------------------------------- short beam

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShortBeamReport {
    pub h: f64,
    pub t0: f64,
    pub dt: f64,
    pub steps_per_t0: i64,
    pub base_time: f64,
    pub base_point: [f64; 4],
    pub u0_norm: f64,
    pub f0_norm: f64,
    /// `‖(P−ω²)u₀ − h(U(t₀)f₀ − f₀)‖/‖u₀‖`.
    pub identity_residual: f64,
    pub halved_step: bool,
    pub tube_radius: f64,
    pub u0_tube_mass: f64,
    pub f0_tube_mass: f64,
    pub witness: f64,
}

#[derive(Debug, Clone)]
pub struct ShortBeam {
    pub u0: WaveField,
    pub f0: WaveField,
    /// `U(t₀)f₀`, the next iterate before the cutoff.
    pub f0_pushed: WaveField,
    pub report: ShortBeamReport,
}

/// Time-smeared coherent state at `γ⁰(0) = γ(−(β/2)log(1/h))`:
/// with `G_k = V^k g`,
/// `f₀ = icτΣψ̃_k G_k` and `u₀ = cτΣφ_k(G_k + G_{k+1})/2`,
/// `φ_k = τΣ_{l=k−K+1}^{k}ψ̃_l`, which makes
/// `(P−ω²)u₀ = h(V^K f₀ − f₀)` hold for the discrete scheme.
pub fn short_beam(setup: &SurfaceSetup, cfg: &BeamConfig) -> Result<ShortBeam> {
    let p = &setup.params;
    let base_time = -p.total_time();
    if base_time - p.t0 < setup.traj.t_min {
        return Err(LabError::Config("trajectory does not reach the short-beam base point".into()));
    }
    let z = setup.gamma(base_time);
    let mut z_field = z;
    z_field[1] = z[1].rem_euclid(2.0 * PI);
    let g = setup.solver.coherent_state(z_field)?;
    let prop = setup.propagator();
    let (mut beam, mut halved) = (build_short(setup, prop, &g, cfg)?, false);
    if beam.2 > cfg.identity_budget {
        let finer = Propagator::new((*prop.op).clone(), prop.dt / 2.0)?;
        beam = build_short(setup, &finer, &g, cfg)?;
        halved = true;
        if beam.2 > cfg.identity_budget {
            return Err(LabError::budget(
                "short beam",
                format!("identity residual {:.2e} above {:.1e}", beam.2, cfg.identity_budget),
            ));
        }
    }
    let (u0, f0, identity_residual, f0_pushed, dt, k) = beam;
    let h = p.h;
    let radius = cfg.short_tube_constant * h.powf(p.rho);
    let tube_u = setup.tube(base_time - 2.0 * p.t0 / 3.0, base_time + 2.0 * p.t0 / 3.0, radius)?;
    let tube_f = setup.tube(base_time - 2.0 * p.t0 / 3.0, base_time - p.t0 / 3.0, radius)?;
    let u0_tube_mass = husimi_cloud(&u0, &cfg.husimi, [0.0; 4]).mass_fraction(&tube_u);
    let f0_tube_mass = husimi_cloud(&f0, &cfg.husimi, [0.0; 4]).mass_fraction(&tube_f);
    let witness = setup
        .segment_witness(base_time, p.t0 / 4.0, cfg.witness_margin)?
        .apply(&u0)?
        .norm();
    let report = ShortBeamReport {
        h,
        t0: p.t0,
        dt,
        steps_per_t0: k,
        base_time,
        base_point: z,
        u0_norm: u0.norm(),
        f0_norm: f0.norm(),
        identity_residual,
        halved_step: halved,
        tube_radius: radius,
        u0_tube_mass,
        f0_tube_mass,
        witness,
    };
    Ok(ShortBeam {
        u0,
        f0,
        f0_pushed,
        report,
    })
}

type ShortParts = (WaveField, WaveField, f64, WaveField, f64, i64);

fn build_short(setup: &SurfaceSetup, prop: &Propagator, g: &WaveField, cfg: &BeamConfig) -> Result<ShortParts> {
    let p = &setup.params;
    let h = p.h;
    let tau = prop.dt;
    let k = prop.steps_for(p.t0)?;
    let psi = cfg.smear(p.t0);
    // ψ̃(s) = ψ(s + t₀), sampled on k ∈ [−K, 0] and normalized so that τΣψ̃ = 1.
    let raw: Vec<f64> = (-k..=0).map(|j| psi.density(j as f64 * tau + p.t0)).collect();
    let total: f64 = raw.iter().sum::<f64>() * tau;
    let psi_w = |j: i64| -> f64 {
        if (-k..=0).contains(&j) {
            raw[(j + k) as usize] / total
        } else {
            0.0
        }
    };
    // φ_j = τΣ_{l=j−K+1}^{j} ψ̃_l for j ∈ [−K, K].
    let mut phi = vec![0.0; (2 * k + 1) as usize];
    let mut run = 0.0;
    for j in -k..=k {
        run += psi_w(j) - psi_w(j - k);
        phi[(j + k) as usize] = tau * run;
    }
    let phi_w = |j: i64| -> f64 {
        if (-k..=k).contains(&j) {
            phi[(j + k) as usize]
        } else {
            0.0
        }
    };
    let c = (2.0 * p.energy.sqrt()).sqrt() / (2f64.sqrt() * (PI * h).powf(0.25));
    let wu = |n: i64| c * tau * 0.5 * (phi_w(n) + phi_w(n - 1));
    let wf = |n: i64| I * c * tau * psi_w(n);
    let k_hi = (-k..=k + 1).rev().find(|&n| wu(n) != 0.0).unwrap_or(0);
    let k_lo = (-k..=k + 1).find(|&n| wu(n) != 0.0 || wf(n).norm() != 0.0).unwrap_or(0);
    let visit = |n: i64, x: &[Complex64], acc: &mut [Vec<Complex64>], count_zero: bool| {
        if n == 0 && !count_zero {
            return;
        }
        let (a, b) = (wu(n), wf(n));
        for (i, v) in x.iter().enumerate() {
            acc[0][i] += a * v;
            acc[1][i] += b * v;
        }
    };
    let (_, fwd) = prop.propagate_with(g, k_hi.max(0), 2, |n, x, acc| visit(n, x, acc, true));
    let (_, bwd) = prop.propagate_with(g, k_lo.min(0), 2, |n, x, acc| visit(n, x, acc, false));
    let u0 = fwd[0].add(&bwd[0]);
    let f0 = fwd[1].add(&bwd[1]);
    let pushed = prop.evolve_steps(&f0, k);
    let lhs = prop.op.apply(&u0);
    let rhs = pushed.sub(&f0).scaled(h.into());
    let residual = lhs.sub(&rhs).norm() / u0.norm();
    Ok((u0, f0, residual, pushed, tau, k))
}

// ----------------------------------------------------------------- long beam

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub j: i64,
    pub u_norm: f64,
    pub f_norm: f64,
    /// `‖u₀‖e^{2√Eνt₀j}`, the norm expected from the scalar factor alone.
    pub expected_u_norm: f64,
    /// Relative mass removed by `χ` when producing this iterate.
    pub truncation_loss: f64,
    /// `‖(P−ω²)u_j − h(f_{j+1} − f_j)‖` (absent for the last index).
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleSummary {
    pub h: f64,
    pub t0: f64,
    pub n0: usize,
    pub prefactor: f64,
    pub phase_modulus: f64,
    pub chi_radius: f64,
    pub u_norm: f64,
    pub f_plus_norm: f64,
    pub f_minus_norm: f64,
    /// `Σ‖h^{√Eβν}u_j‖`, the triangle-inequality bound on `‖u‖`.
    pub u_norm_bound: f64,
    pub max_residual: f64,
    pub outside_mass: f64,
    pub steps: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct BeamBundle {
    /// `u_j` for `j = −N₀ ..= N₀+1` (index `j + N₀`).
    pub u: Vec<WaveField>,
    pub f: Vec<WaveField>,
    pub assembled: WaveField,
    pub f_plus: WaveField,
    pub f_minus: WaveField,
    pub chi: Vec<f64>,
    pub summary: BundleSummary,
}

impl BeamBundle {
    pub fn n0(&self) -> i64 {
        self.summary.n0 as i64
    }

    pub fn u_j(&self, j: i64) -> &WaveField {
        &self.u[(j + self.n0()) as usize]
    }

    pub fn f_j(&self, j: i64) -> &WaveField {
        &self.f[(j + self.n0()) as usize]
    }
}

/// Radial cutoff equal to 1 on `|r| ≤ r_χ` and 0 beyond `r_χ + taper`.
pub fn radial_cutoff(setup: &SurfaceSetup, r_chi: f64, taper: f64) -> Vec<f64> {
    let g = &setup.solver.layout.grid;
    (0..g.n)
        .map(|i| 1.0 - crate::calculus::smooth_step((g.r(i).abs() - r_chi) / taper))
        .collect()
}

/// Iterate `u_{j±1} = χU(±t₀)u_j`, `f_{j±1} = χU(±t₀)f_j` and assemble
/// `u = h^{√Eβν}Σ_{|j|≤N₀}u_j`, `f_± = h^{√Eβν}f_{N₀+1}`, `h^{√Eβν}f_{−N₀}`.
pub fn long_beam(setup: &SurfaceSetup, sb: &ShortBeam, cfg: &BeamConfig) -> Result<BeamBundle> {
    let p = &setup.params;
    let h = p.h;
    let n0 = p.n0 as i64;
    let r_chi = setup.gamma(2.0 * p.t0)[0] + cfg.chi_margin;
    let layer_start = setup.absorber_onset();
    if r_chi + cfg.chi_taper > layer_start + 1e-12 {
        return Err(LabError::Config(format!(
            "cutoff reaches r = {:.2} but the absorbing layer starts at {:.2}",
            r_chi + cfg.chi_taper,
            layer_start
        )));
    }
    let chi = radial_cutoff(setup, r_chi, cfg.chi_taper);
    let prop = setup.propagator();
    let k = prop.steps_for(p.t0)?;
    let step = |x: &WaveField, sign: i64| -> (WaveField, f64) {
        let mut y = prop.evolve_steps(x, sign * k);
        let before = y.norm_sq();
        y.multiply_radial(&chi);
        let loss = if before > 0.0 { 1.0 - y.norm_sq() / before } else { 0.0 };
        (y, loss.max(0.0))
    };
    let len = (2 * n0 + 2) as usize;
    let mut u: Vec<Option<WaveField>> = vec![None; len];
    let mut f: Vec<Option<WaveField>> = vec![None; len];
    let mut loss = vec![0.0; len];
    let idx = |j: i64| (j + n0) as usize;
    u[idx(0)] = Some(sb.u0.clone());
    f[idx(0)] = Some(sb.f0.clone());
    // Forward and backward chains are independent.
    let (fwd, bwd) = rayon::join(
        || {
            let mut out = Vec::new();
            let (mut uu, mut ff) = (sb.u0.clone(), sb.f0.clone());
            for _ in 1..=n0 + 1 {
                let (nu, lu) = step(&uu, 1);
                let (nf, _) = step(&ff, 1);
                out.push((nu.clone(), nf.clone(), lu));
                uu = nu;
                ff = nf;
            }
            out
        },
        || {
            let mut out = Vec::new();
            let (mut uu, mut ff) = (sb.u0.clone(), sb.f0.clone());
            for _ in 1..=n0 {
                let (nu, lu) = step(&uu, -1);
                let (nf, _) = step(&ff, -1);
                out.push((nu.clone(), nf.clone(), lu));
                uu = nu;
                ff = nf;
            }
            out
        },
    );
    for (s, (uu, ff, l)) in fwd.into_iter().enumerate() {
        let j = s as i64 + 1;
        u[idx(j)] = Some(uu);
        f[idx(j)] = Some(ff);
        loss[idx(j)] = l;
    }
    for (s, (uu, ff, l)) in bwd.into_iter().enumerate() {
        let j = -(s as i64) - 1;
        u[idx(j)] = Some(uu);
        f[idx(j)] = Some(ff);
        loss[idx(j)] = l;
    }
    let u: Vec<WaveField> = u.into_iter().map(|x| x.expect("every iterate is filled")).collect();
    let f: Vec<WaveField> = f.into_iter().map(|x| x.expect("every iterate is filled")).collect();

    let pref = p.prefactor();
    let mut assembled = u[idx(-n0)].zeros_like();
    for j in -n0..=n0 {
        assembled.axpy(pref.into(), &u[idx(j)]);
    }
    let f_plus = f[idx(n0 + 1)].scaled(pref.into());
    let f_minus = f[idx(-n0)].scaled(pref.into());

    let residuals: Vec<f64> = (-n0..=n0)
        .into_par_iter()
        .map(|j| {
            let lhs = prop.op.apply(&u[idx(j)]);
            let rhs = f[idx(j + 1)].sub(&f[idx(j)]).scaled(h.into());
            lhs.sub(&rhs).norm()
        })
        .collect();
    let u0n = sb.u0.norm();
    let growth = 2.0 * p.energy.sqrt() * p.nu * p.t0;
    let steps: Vec<StepDiagnostics> = (-n0..=n0 + 1)
        .map(|j| StepDiagnostics {
            j,
            u_norm: u[idx(j)].norm(),
            f_norm: f[idx(j)].norm(),
            expected_u_norm: u0n * (growth * j as f64).exp(),
            truncation_loss: loss[idx(j)],
            residual: if j <= n0 { Some(residuals[(j + n0) as usize]) } else { None },
        })
        .collect();
    let compact = r_chi + cfg.chi_taper;
    let outside_mass = u
        .iter()
        .chain(f.iter())
        .map(|x| x.mass_beyond(compact) / x.norm_sq().max(1e-300))
        .fold(0.0, f64::max);
    let summary = BundleSummary {
        h,
        t0: p.t0,
        n0: p.n0,
        prefactor: pref,
        phase_modulus: p.phase(p.total_time()).norm(),
        chi_radius: r_chi,
        u_norm: assembled.norm(),
        f_plus_norm: f_plus.norm(),
        f_minus_norm: f_minus.norm(),
        u_norm_bound: (-n0..=n0).map(|j| pref * u[idx(j)].norm()).sum(),
        max_residual: residuals.iter().cloned().fold(0.0, f64::max),
        outside_mass,
        steps,
    };
    Ok(BeamBundle {
        u,
        f,
        assembled,
        f_plus,
        f_minus,
        chi,
        summary,
    })
}

// ---------------------------------------------------------- localization

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub j: i64,
    pub center_time: f64,
    /// `C·e^{|j|λt₀}h^ρ`.
    pub radius: f64,
    pub u_mass: f64,
    /// Smallest `C` whose tube holds `mass_threshold` of `u_j`.
    pub minimal_constant: f64,
    pub f_mass: f64,
    /// `‖Op(b^{(j)})u_j‖`.
    pub witness: f64,
    /// `e^{2√Eνt₀j}`, the growth the witness is compared with.
    pub growth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub h: f64,
    pub tube_constant: f64,
    pub rows: Vec<LocalizationRow>,
    pub min_mass: f64,
    pub max_minimal_constant: f64,
    /// `C·e^{N₀λt₀}h^ρ = C·h^{ρ−λβ/2}`.
    pub final_radius: f64,
    pub shrink_exponent: f64,
    /// Smallest `witness/growth` over `j`.
    pub witness_floor: f64,
}

/// Husimi tube masses and witness values of every iterate.
pub fn localization_report(setup: &SurfaceSetup, bundle: &BeamBundle, cfg: &BeamConfig) -> Result<LocalizationReport> {
    let p = &setup.params;
    let h = p.h;
    let n0 = bundle.n0();
    let base = -p.total_time();
    let hr = h.powf(p.rho);
    let growth_rate = 2.0 * p.energy.sqrt() * p.nu * p.t0;
    let rows: Result<Vec<LocalizationRow>> = (-n0..=n0)
        .map(|j| {
            let tc = base + j as f64 * p.t0;
            let scale = (j.abs() as f64 * p.lambda * p.t0).exp() * hr;
            let radius = cfg.tube_constant * scale;
            let tube_u = setup.tube(tc - 2.0 * p.t0 / 3.0, tc + 2.0 * p.t0 / 3.0, radius)?;
            let tube_f = setup.tube(tc - 2.0 * p.t0 / 3.0, tc - p.t0 / 3.0, radius)?;
            let cu = husimi_cloud(bundle.u_j(j), &cfg.husimi, [0.0; 4]);
            let cf = husimi_cloud(bundle.f_j(j), &cfg.husimi, [0.0; 4]);
            let witness = setup
                .segment_witness(tc, p.t0 / 4.0, cfg.witness_margin)?
                .apply(bundle.u_j(j))?
                .norm();
            Ok(LocalizationRow {
                j,
                center_time: tc,
                radius,
                u_mass: cu.mass_fraction(&tube_u),
                minimal_constant: cu.radius_for_fraction(&tube_u, cfg.mass_threshold) / scale,
                f_mass: cf.mass_fraction(&tube_f),
                witness,
                growth: (growth_rate * j as f64).exp(),
            })
        })
        .collect();
    let rows = rows?;
    Ok(LocalizationReport {
        h,
        tube_constant: cfg.tube_constant,
        min_mass: rows.iter().map(|r| r.u_mass).fold(1.0, f64::min),
        max_minimal_constant: rows.iter().map(|r| r.minimal_constant).fold(0.0, f64::max),
        final_radius: cfg.tube_constant * (n0 as f64 * p.lambda * p.t0).exp() * hr,
        shrink_exponent: p.rho - p.lambda * p.beta / 2.0,
        witness_floor: rows.iter().map(|r| r.witness / r.growth).fold(f64::INFINITY, f64::min),
        rows,
    })
}

// ---------------------------------------------------------------- witness

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessReport {
    pub h: f64,
    /// `‖Op(b)u‖` for the assembled beam.
    pub value: f64,
    /// Same with every witness plateau widened by 10%.
    pub widened_value: f64,
    /// `(j, ‖Op(b)h^{√Eβν}u_j‖/value)` for `j < N₀`.
    pub cross_terms: Vec<(i64, f64)>,
    pub max_cross_term: f64,
    /// Reference distance between `γ([−t₀/4, t₀/4])` and `γ((−∞, −t₀/3])`.
    pub separation: f64,
}

/// Lower bound `‖Op(b)u‖` with `b` localized near `γ([−t₀/4, t₀/4])`.
pub fn witness_lower_bound(setup: &SurfaceSetup, bundle: &BeamBundle, cfg: &BeamConfig) -> Result<WitnessReport> {
    let p = &setup.params;
    let n0 = bundle.n0();
    let separation = min_self_distance(
        &setup.geom,
        &setup.traj,
        (-p.t0 / 4.0, p.t0 / 4.0),
        (setup.traj.t_min, -p.t0 / 3.0),
        4,
    );
    if !(separation > 1e-6) {
        return Err(LabError::Config(format!(
            "witness segment is not separated from the earlier trajectory ({separation:.2e})"
        )));
    }
    let b = setup.segment_witness(0.0, p.t0 / 4.0, cfg.witness_margin)?;
    let value = b.apply(&bundle.assembled)?.norm();
    let widened_value = b.widened(1.1).apply(&bundle.assembled)?.norm();
    let pref = p.prefactor();
    let cross_terms: Result<Vec<(i64, f64)>> = (-n0..n0)
        .map(|j| Ok((j, pref * b.apply(bundle.u_j(j))?.norm() / value)))
        .collect();
    let cross_terms = cross_terms?;
    Ok(WitnessReport {
        h: p.h,
        value,
        widened_value,
        max_cross_term: cross_terms.iter().map(|c| c.1).fold(0.0, f64::max),
        cross_terms,
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Profile, ProfileSpec};
    use crate::propagate::ParamSpec;

    #[test]
    fn model_beam_identity_and_origin() {
        let beam = model_beam(0.05, 1.0, 1.0, 0.5, 2, &BeamConfig::default(), &ModelBeamConfig::default()).unwrap();
        let r = &beam.report;
        assert!(r.identity_residual <= 1e-8, "{r:?}");
        assert!(r.origin_error <= 1e-14);
        assert!(r.fourier_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn model_beam_one_dimensional() {
        let beam = model_beam(0.05, 1.0, 1.0, 0.5, 1, &BeamConfig::default(), &ModelBeamConfig::default()).unwrap();
        assert!(beam.report.identity_residual <= 1e-8);
        assert!((beam.u.norm() - beam.report.u_norm).abs() < 1e-15);
    }

    fn setup(h: f64) -> SurfaceSetup {
        let g = SurfaceGeometry::new(Profile::new(ProfileSpec::default()).unwrap(), 9.5).unwrap();
        let p = Params::resolve(&ParamSpec::default(), 1.0, h).unwrap();
        SurfaceSetup::new(&g, &p, &PropagatorConfig::default()).unwrap()
    }

    #[test]
    fn short_beam_identity_is_exact() {
        let s = setup(0.1);
        let sb = short_beam(&s, &BeamConfig::default()).unwrap();
        let r = &sb.report;
        assert!(r.identity_residual <= 1e-6, "{r:?}");
        assert!(r.u0_tube_mass >= 0.999 && r.f0_tube_mass >= 0.999, "{r:?}");
        assert!(r.witness >= 0.1, "{r:?}");
    }
}

//! Quasimode assembly, the direct resolvent norm and the scaling study.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{
    localization_report, long_beam, radial_cutoff, short_beam, witness_lower_bound, BeamBundle, BeamConfig,
    LocalizationReport, ShortBeamReport, SurfaceSetup, WitnessReport,
};
use crate::error::{LabError, Result};
use crate::field::{husimi_cloud, WaveField};
use crate::flow::{linear_fit, time_to_radius};
use crate::geometry::SurfaceGeometry;
use crate::propagate::{ParamSpec, Params, Propagator, PropagatorConfig, SurfaceOperator};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Outgoing-tail controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailConfig {
    /// `T₀` is the time `γ` needs to reach `r₀ + escape_margin`.
    pub escape_margin: f64,
    /// `χ′₁ = 1` on `|r| ≤ core_radius` (default `r₀`), where the free
    /// surrogate carries its interior absorber.
    pub core_radius: Option<f64>,
    /// Width over which `χ′₁` falls to 0; `escape_margin/2` by default.
    pub core_taper: Option<f64>,
    /// `χ′₀ = 1` on `|r| ≤ r(T₀ + t₀) + chi0_margin`, tapering over `chi0_taper`.
    pub chi0_margin: f64,
    pub chi0_taper: f64,
    /// Strength of the interior absorber of the free surrogate; the tuned layer strength by default.
    pub interior_strength: Option<f64>,
    /// Horizon of the free time integral; by default the time `γ` needs to go
    /// from `r(T₀)` through the absorbing layer, plus `horizon_margin`.
    pub t_max: Option<f64>,
    pub horizon_margin: f64,
    /// Allowed change of `u_∞` on the compact region when the horizon doubles.
    pub tolerance: f64,
    /// Radius of the backward tube in units of `√h`.
    pub backward_tube: f64,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            escape_margin: 2.0,
            core_radius: None,
            core_taper: None,
            chi0_margin: 0.25,
            chi0_taper: 1.0,
            interior_strength: None,
            t_max: None,
            horizon_margin: 2.0,
            tolerance: 1e-6,
            backward_tube: 3.0,
        }
    }
}

/// Direct resolvent-norm controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolventConfig {
    /// Fine range covers `|h·m − √E| ≤ fine_halfwidth·√h` and the field window.
    pub fine_halfwidth: f64,
    /// Modes sampled on `[0, 2√E/h]` outside the fine range.
    pub coarse_modes: usize,
    pub iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        Self {
            fine_halfwidth: 5.0,
            coarse_modes: 16,
            iterations: 400,
            tolerance: 1e-10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// `χ₁ = 1` on `|r| ≤ chi1_radius`.
    pub chi1_radius: f64,
    /// `χ₂ = 1` up to the absorbing layer minus `chi_taper`.
    pub chi_taper: f64,
    /// Allowed `‖(1−χ₂)f̃‖/‖f̃‖`.
    pub support_tolerance: f64,
    pub tail: TailConfig,
    pub resolvent: ResolventConfig,
    pub direct_norm: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            chi1_radius: 3.0,
            chi_taper: 0.5,
            support_tolerance: 1e-6,
            tail: TailConfig::default(),
            resolvent: ResolventConfig::default(),
            direct_norm: true,
        }
    }
}

/// The two fixed cutoffs, as radial profiles on the layout grid.
#[derive(Debug, Clone)]
pub struct Cutoffs {
    pub chi1: Vec<f64>,
    pub chi2: Vec<f64>,
    pub chi2_plateau: f64,
}

impl Cutoffs {
    pub fn new(setup: &SurfaceSetup, cfg: &StudyConfig) -> Result<Self> {
        let edge = setup.absorber_onset();
        let plateau = edge - cfg.chi_taper;
        if cfg.chi1_radius + cfg.chi_taper > edge {
            return Err(LabError::Config("χ₁ reaches into the absorbing layer".into()));
        }
        Ok(Self {
            chi1: radial_cutoff(setup, cfg.chi1_radius, cfg.chi_taper),
            chi2: radial_cutoff(setup, plateau, cfg.chi_taper),
            chi2_plateau: plateau,
        })
    }
}

fn masked(u: &WaveField, w: &[f64]) -> WaveField {
    let mut v = u.clone();
    v.multiply_radial(w);
    v
}

// ------------------------------------------------------------------- tail

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailReport {
    pub h: f64,
    /// `T₀`: after it `γ` stays beyond `r₀ + escape_margin`.
    pub escape_time: f64,
    /// Horizon of the free time integral.
    pub t_max: f64,
    pub chi0_plateau: f64,
    pub chi1_support: f64,
    /// `‖χ₂(1−χ′₁)(u¹_{2T} − u¹_T)‖/‖χ₂u_∞‖` for the time-integral form
    /// `u¹_T = i∫₀^{T}U⁰(t)g dt`.
    pub doubling_change: f64,
    /// `‖χ₂(1−χ′₁)(u¹_T − hR⁰g)‖/‖χ₂u_∞‖`, time integral against the stationary solve.
    pub direct_gap: f64,
    /// `‖f_∞ − f_+‖/‖f_+‖`.
    pub f_defect: f64,
    /// `‖χ₂u_∞‖` and `‖χ₁u_∞‖`.
    pub compact_norm: f64,
    pub chi1_norm: f64,
    /// Husimi mass fraction of `u_∞` in the backward tube around `γ([−t₀, t₀/4])`.
    pub backward_mass: f64,
    /// `‖U⁰(T)g‖/‖g‖`, the part of the free wave neither escaped nor absorbed.
    pub leakage: f64,
    /// `‖U(T₀)f_+‖/‖f_+‖`.
    pub pushed_growth: f64,
}

#[derive(Debug, Clone)]
pub struct Tail {
    pub u_inf: WaveField,
    pub f_inf: WaveField,
    pub report: TailReport,
}

/// Trapezoid weights `iτ(½, 1, …, 1, ½)` on steps `0..=k`, so that for the
/// scheme `(P−ω²)·iτΣw_nG_n = h(G_0 − G_k)` exactly.
fn trapezoid(n: i64, k: i64, tau: f64) -> Complex64 {
    if n > k {
        Complex64::new(0.0, 0.0)
    } else if n == 0 || n == k {
        I * tau * 0.5
    } else {
        I * tau
    }
}

/// Outgoing solution `u_∞ = χ′₀u⁰ + (1−χ′₁)u¹` of `(P−ω²)u_∞ ≈ hf_+`:
/// `u⁰ = i∫₀^{T₀}U(t)f_+dt` on the scheme's own steps and `u¹ = hR⁰g`,
/// `g = (1−χ′₁)χ′₀U(T₀)f_+`. `R⁰` is the resolvent of the free surrogate, the
/// same operator with an extra absorber where `χ′₁ = 1`.
///
/// Since `Im ω² < 0`, `R⁰` is not the limit of `i∫₀^{T}U⁰(t)dt`: slow components
/// of `g` linger while growing like `e^{2√Eνt}`. The time integral is still
/// computed at `T` and `2T` and compared with the stationary solve.
/// Returns the tail without judging convergence.
pub fn outgoing_tail_report(setup: &SurfaceSetup, bundle: &BeamBundle, cuts: &Cutoffs, cfg: &TailConfig) -> Result<Tail> {
    let p = &setup.params;
    let h = p.h;
    let prop = setup.propagator();
    let tau = prop.dt;
    let r0 = setup.geom.profile.r0();
    let escape = time_to_radius(&setup.traj, r0 + cfg.escape_margin)
        .ok_or_else(|| LabError::Config("trajectory does not reach the Euclidean end".into()))?;
    let k0 = (escape / tau).ceil() as i64;
    let escape_time = k0 as f64 * tau;
    let reach = setup.gamma(escape_time + p.t0)[0];
    let chi0_plateau = reach + cfg.chi0_margin;
    if chi0_plateau + cfg.chi0_taper > cuts.chi2_plateau {
        return Err(LabError::Config(format!(
            "χ′₀ reaches r = {:.2}, beyond the plateau of χ₂ at {:.2}",
            chi0_plateau + cfg.chi0_taper,
            cuts.chi2_plateau
        )));
    }
    let chi0 = radial_cutoff(setup, chi0_plateau, cfg.chi0_taper);
    let core = cfg.core_radius.unwrap_or(r0);
    let core_taper = cfg.core_taper.unwrap_or(0.5 * cfg.escape_margin);
    let chi1_support = core + core_taper;
    let chi1 = radial_cutoff(setup, core, core_taper);
    let one_minus_chi1: Vec<f64> = chi1.iter().map(|c| 1.0 - c).collect();

    // Free surrogate: cubic interior absorber vanishing where χ′₁ = 1 ends.
    let grid = &setup.solver.layout.grid;
    let eta = cfg
        .interior_strength
        .unwrap_or_else(|| setup.solver.tuning.as_ref().map(|t| t.strength).unwrap_or(1.0));
    let interior: Vec<f64> = (0..grid.n)
        .map(|i| {
            let x = (core - grid.r(i).abs()) / core;
            if x > 0.0 {
                eta * x.powi(3)
            } else {
                0.0
            }
        })
        .collect();
    let free_op = prop.op.with_extra_absorber(&interior);
    let free = Propagator::new(free_op.clone(), tau)?;

    let (pushed, acc0) = prop.propagate_with(&bundle.f_plus, k0, 1, |n, x, acc| {
        let w = trapezoid(n, k0, tau);
        acc[0].iter_mut().zip(x).for_each(|(a, v)| *a += w * v);
    });
    let u0 = &acc0[0];
    let g = masked(&masked(&pushed, &chi0), &one_minus_chi1);

    let t_max = match cfg.t_max {
        Some(t) => t,
        None => {
            let exit = time_to_radius(&setup.traj, setup.geom.r_max - 1e-6).unwrap_or(setup.traj.t_max());
            exit - escape_time + cfg.horizon_margin
        }
    };
    let k1 = (t_max / tau).ceil() as i64;
    let t_max = k1 as f64 * tau;
    let (_, acc1) = free.propagate_with(&g, 2 * k1, 3, |n, x, acc| {
        let (a, b) = (trapezoid(n, k1, tau), trapezoid(n, 2 * k1, tau));
        for (i, v) in x.iter().enumerate() {
            acc[0][i] += a * v;
            acc[1][i] += b * v;
            if n == k1 {
                acc[2][i] = *v;
            }
        }
    });
    let (u1, u1_long, left) = (&acc1[0], &acc1[1], &acc1[2]);

    let stationary = free_op.solve(&g)?.scaled(h.into());
    let u_inf = masked(u0, &chi0).add(&masked(&stationary, &one_minus_chi1));
    let f_inf = prop.op.apply(&u_inf).scaled((1.0 / h).into());
    let fp = bundle.f_plus.to_symmetrized();
    let compact_norm = masked(&u_inf, &cuts.chi2).norm();
    let change = masked(&u1_long.sub(u1), &one_minus_chi1);
    let doubling_change = masked(&change, &cuts.chi2).norm() / compact_norm;
    let direct_gap = masked(&masked(&u1.sub(&stationary), &one_minus_chi1), &cuts.chi2).norm() / compact_norm;
    let tube = setup.tube(-p.t0, p.t0 / 4.0, cfg.backward_tube * h.sqrt())?;
    let backward_mass = husimi_cloud(&u_inf, &Default::default(), [0.0; 4]).mass_fraction(&tube);
    let report = TailReport {
        h,
        escape_time,
        t_max,
        chi0_plateau,
        chi1_support,
        doubling_change,
        direct_gap,
        f_defect: f_inf.sub(&fp).norm() / fp.norm(),
        compact_norm,
        chi1_norm: masked(&u_inf, &cuts.chi1).norm(),
        backward_mass,
        leakage: left.norm() / g.norm(),
        pushed_growth: pushed.norm() / fp.norm(),
    };
    Ok(Tail { u_inf, f_inf, report })
}

/// As [`outgoing_tail_report`], failing when doubling the horizon changes
/// `u_∞` on the compact region by more than the tolerance.
pub fn outgoing_tail(setup: &SurfaceSetup, bundle: &BeamBundle, cuts: &Cutoffs, cfg: &TailConfig) -> Result<Tail> {
    let tail = outgoing_tail_report(setup, bundle, cuts, cfg)?;
    if !(tail.report.doubling_change <= cfg.tolerance) {
        return Err(LabError::budget(
            "outgoing tail",
            format!(
                "doubling T = {:.2} changes u_∞ by {:.2e} > {:.1e}",
                tail.report.t_max, tail.report.doubling_change, cfg.tolerance
            ),
        ));
    }
    Ok(tail)
}

// -------------------------------------------------------------- quasimode

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuasimodeReport {
    pub h: f64,
    /// `‖χ₁ũ‖/(h‖f̃‖)`.
    pub ratio: f64,
    /// `C` in `ratio = C·h^{−1−2√Eβν}`.
    pub ratio_constant: f64,
    pub chi1_u_norm: f64,
    pub f_norm: f64,
    pub f_minus_norm: f64,
    /// `‖f̃ + f_−‖/‖f_−‖`.
    pub identity_defect: f64,
    /// `‖(1−χ₂)f̃‖/‖f̃‖`.
    pub support_leak: f64,
    /// `‖Op(b)ũ‖`.
    pub witness: f64,
    pub target_exponent: f64,
}

#[derive(Debug, Clone)]
pub struct QuasimodePair {
    pub u: WaveField,
    pub f: WaveField,
    pub report: QuasimodeReport,
}

/// `ũ = u − u_∞`, `f̃ = h^{−1}(P−ω²)ũ`.
pub fn assemble_quasimode(
    setup: &SurfaceSetup,
    bundle: &BeamBundle,
    tail: &Tail,
    cuts: &Cutoffs,
    beam: &BeamConfig,
    cfg: &StudyConfig,
) -> Result<QuasimodePair> {
    let p = &setup.params;
    let h = p.h;
    let u = bundle.assembled.to_symmetrized().sub(&tail.u_inf);
    let f = setup.solver.apply_p(&u).scaled((1.0 / h).into());
    let f_norm = f.norm();
    let outside: Vec<f64> = cuts.chi2.iter().map(|c| 1.0 - c).collect();
    let support_leak = masked(&f, &outside).norm() / f_norm;
    if !(support_leak <= cfg.support_tolerance) {
        return Err(LabError::Geometry(format!(
            "f̃ leaks {support_leak:.2e} outside the region where χ₂ = 1"
        )));
    }
    let fm = bundle.f_minus.to_symmetrized();
    let chi1_u_norm = masked(&u, &cuts.chi1).norm();
    let ratio = chi1_u_norm / (h * f_norm);
    let exponent = -1.0 - 2.0 * p.exponent();
    let witness = setup
        .segment_witness(0.0, p.t0 / 4.0, beam.witness_margin)?
        .apply(&u)?
        .norm();
    let report = QuasimodeReport {
        h,
        ratio,
        ratio_constant: ratio / h.powf(exponent),
        chi1_u_norm,
        f_norm,
        f_minus_norm: fm.norm(),
        identity_defect: f.add(&fm).norm() / fm.norm(),
        support_leak,
        witness,
        target_exponent: exponent,
    };
    Ok(QuasimodePair { u, f, report })
}

// ------------------------------------------------------------- resolvent

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolventReport {
    pub h: f64,
    pub omega_sq: (f64, f64),
    pub value: f64,
    pub best_mode: i64,
    /// `|h·m* − √E|/√h`.
    pub mode_offset: f64,
    pub fine_range: (i64, i64),
    pub modes: Vec<(i64, f64)>,
    pub unconverged: Vec<i64>,
}

/// Largest singular value of `χ₁(P_m − ω²)^{−1}χ₂` by power iteration on `B*B`.
/// `P_m − ω²` is complex symmetric, so its adjoint solve is a conjugated solve.
fn mode_norm(op: &SurfaceOperator, m: i64, chi1: &[f64], chi2: &[f64], cfg: &ResolventConfig) -> Result<(f64, bool)> {
    let lu = op
        .mode_matrix(m)
        .factor()
        .ok_or_else(|| LabError::budget("resolvent", format!("singular system at mode {m}")))?;
    let n = chi1.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (m as u64).wrapping_mul(0x9e37_79b9));
    let mut x: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * chi2[i])
        .collect();
    let norm = |v: &[Complex64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..cfg.iterations {
        let nx = norm(&x);
        if nx == 0.0 {
            return Ok((0.0, true));
        }
        x.iter_mut().for_each(|z| *z /= nx);
        let mut y: Vec<Complex64> = x.iter().zip(chi2).map(|(z, c)| z * c).collect();
        lu.solve(&mut y);
        y.iter_mut().zip(chi1).for_each(|(z, c)| *z *= c);
        let next = norm(&y);
        // B*y = χ₂ conj(A^{−1} conj(χ₁y)).
        let mut z: Vec<Complex64> = y.iter().zip(chi1).map(|(v, c)| (v * c).conj()).collect();
        lu.solve(&mut z);
        x = z.iter().zip(chi2).map(|(v, c)| v.conj() * c).collect();
        let done = (next - sigma).abs() <= cfg.tolerance * next;
        sigma = next;
        if done {
            return Ok((sigma, true));
        }
    }
    Ok((sigma, false))
}

/// `sup_m ‖χ₁(P_m − ω²)^{−1}χ₂‖`, with `ω²` replaced by `omega_sq` if given.
pub fn direct_resolvent_norm(
    setup: &SurfaceSetup,
    cuts: &Cutoffs,
    omega_sq: Option<Complex64>,
    cfg: &ResolventConfig,
) -> Result<ResolventReport> {
    let p = &setup.params;
    let h = p.h;
    let op = match omega_sq {
        Some(w) => setup.propagator().op.with_omega_sq(w),
        None => (*setup.propagator().op).clone(),
    };
    let k = p.energy.sqrt();
    let win = setup.solver.layout.window;
    let lo = (((k - cfg.fine_halfwidth * h.sqrt()) / h).floor() as i64).min(win.m_lo).max(0);
    let hi = (((k + cfg.fine_halfwidth * h.sqrt()) / h).ceil() as i64).max(win.m_hi);
    let top = (2.0 * k / h).ceil() as i64;
    let mut modes: Vec<i64> = (lo..=hi).collect();
    for s in 0..cfg.coarse_modes {
        let m = (s as f64 * top as f64 / (cfg.coarse_modes.max(2) - 1) as f64).round() as i64;
        if m < lo || m > hi {
            modes.push(m);
        }
    }
    modes.sort_unstable();
    modes.dedup();
    let values: Result<Vec<(i64, f64, bool)>> = modes
        .par_iter()
        .map(|&m| mode_norm(&op, m, &cuts.chi1, &cuts.chi2, cfg).map(|(s, ok)| (m, s, ok)))
        .collect();
    let values = values?;
    let (best_mode, value) = values
        .iter()
        .map(|&(m, s, _)| (m, s))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    if omega_sq.is_none() && !(best_mode > lo && best_mode < hi) {
        return Err(LabError::Grid(format!(
            "resolvent norm peaks at mode {best_mode}, not inside the fine range [{lo}, {hi}]"
        )));
    }
    Ok(ResolventReport {
        h,
        omega_sq: {
            let w = op.omega_sq;
            (w.re, w.im)
        },
        value,
        best_mode,
        mode_offset: (h * best_mode as f64 - k).abs() / h.sqrt(),
        fine_range: (lo, hi),
        modes: values.iter().map(|&(m, s, _)| (m, s)).collect(),
        unconverged: values.iter().filter(|v| !v.2).map(|v| v.0).collect(),
    })
}

// ----------------------------------------------------------------- sweep

/// Everything computed at one `h`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub params: Params,
    pub dt: f64,
    pub cap_returned_mass: Option<f64>,
    pub short: ShortBeamReport,
    pub bundle: crate::beam::BundleSummary,
    pub localization: Option<LocalizationReport>,
    pub witness: WitnessReport,
    pub tail: TailReport,
    pub quasimode: Option<QuasimodeReport>,
    pub quasimode_error: Option<String>,
    pub resolvent: Option<ResolventReport>,
    pub validation: Option<ResolventReport>,
}

/// Runs every stage at one `h`; a failing quasimode assembly is recorded, not fatal,
/// so that the remaining diagnostics survive.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    geom: &SurfaceGeometry,
    spec: &ParamSpec,
    lambda_max: f64,
    h: f64,
    prop: &PropagatorConfig,
    beam: &BeamConfig,
    cfg: &StudyConfig,
    localize: bool,
) -> Result<PipelineReport> {
    let params = Params::resolve(spec, lambda_max, h)?;
    let setup = SurfaceSetup::new(geom, &params, prop)?;
    let sb = short_beam(&setup, beam)?;
    let bundle = long_beam(&setup, &sb, beam)?;
    let localization = if localize {
        Some(localization_report(&setup, &bundle, beam)?)
    } else {
        None
    };
    let witness = witness_lower_bound(&setup, &bundle, beam)?;
    let cuts = Cutoffs::new(&setup, cfg)?;
    let tail = outgoing_tail_report(&setup, &bundle, &cuts, &cfg.tail)?;
    let (quasimode, quasimode_error) = match assemble_quasimode(&setup, &bundle, &tail, &cuts, beam, cfg) {
        Ok(q) => (Some(q.report), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (resolvent, validation) = if cfg.direct_norm {
        let shift = Complex64::new(params.energy, 1.0);
        (
            Some(direct_resolvent_norm(&setup, &cuts, None, &cfg.resolvent)?),
            Some(direct_resolvent_norm(&setup, &cuts, Some(shift), &cfg.resolvent)?),
        )
    } else {
        (None, None)
    };
    Ok(PipelineReport {
        dt: setup.solver.dt(),
        cap_returned_mass: setup.solver.tuning.as_ref().map(|t| t.returned_mass),
        params,
        short: sb.report,
        bundle: bundle.summary,
        localization,
        witness,
        tail: tail.report,
        quasimode,
        quasimode_error,
        resolvent,
        validation,
    })
}

/// Log-log slope with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Slope {
    pub slope: f64,
    pub stderr: f64,
    pub rms: f64,
}

impl Slope {
    pub fn fit(h: &[f64], y: &[f64]) -> Result<Self> {
        if h.len() < 4 || h.len() != y.len() {
            return Err(LabError::Config(format!("slope fit needs ≥ 4 points, got {}", h.len())));
        }
        let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let (slope, _, rms, stderr) = linear_fit(&lx, &ly);
        Ok(Self { slope, stderr, rms })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub h: f64,
    pub f_minus_norm: f64,
    pub ratio: Option<f64>,
    pub direct_norm: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub f_minus_slope: Slope,
    pub ratio_slope: Option<Slope>,
    pub direct_slope: Option<Slope>,
    /// `2√Eβν` and `−(1+2√Eβν)`.
    pub f_minus_target: f64,
    pub ratio_target: f64,
    pub reports: Vec<PipelineReport>,
}

impl ScalingResult {
    pub fn from_reports(reports: Vec<PipelineReport>) -> Result<Self> {
        let rows: Vec<ScalingRow> = reports
            .iter()
            .map(|r| ScalingRow {
                h: r.params.h,
                f_minus_norm: r.bundle.f_minus_norm,
                ratio: r.quasimode.as_ref().map(|q| q.ratio),
                direct_norm: r.resolvent.as_ref().map(|d| d.value),
            })
            .collect();
        let hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
        let column = |f: &dyn Fn(&ScalingRow) -> Option<f64>| -> Option<Vec<f64>> { rows.iter().map(f).collect() };
        let f_minus_slope = Slope::fit(&hs, &rows.iter().map(|r| r.f_minus_norm).collect::<Vec<_>>())?;
        let ratio_slope = column(&|r| r.ratio).map(|y| Slope::fit(&hs, &y)).transpose()?;
        let direct_slope = column(&|r| r.direct_norm).map(|y| Slope::fit(&hs, &y)).transpose()?;
        let e = reports
            .first()
            .map(|r| r.params.exponent())
            .ok_or_else(|| LabError::Config("empty sweep".into()))?;
        Ok(Self {
            rows,
            f_minus_slope,
            ratio_slope,
            direct_slope,
            f_minus_target: 2.0 * e,
            ratio_target: -1.0 - 2.0 * e,
            reports,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "f_minus_norm", "ratio", "direct_norm"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                format!("{:.6}", r.h),
                format!("{:.12e}", r.f_minus_norm),
                opt(r.ratio),
                opt(r.direct_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `scaling.csv`, `summary.json` and two-column `*.dat` files for log-log plots.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("scaling.csv"))?)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        let mut series: Vec<(&str, Vec<(f64, f64)>)> =
            vec![("f_minus", self.rows.iter().map(|r| (r.h, r.f_minus_norm)).collect())];
        series.push(("ratio", self.rows.iter().filter_map(|r| r.ratio.map(|v| (r.h, v))).collect()));
        series.push(("direct", self.rows.iter().filter_map(|r| r.direct_norm.map(|v| (r.h, v))).collect()));
        for (name, pts) in series {
            let mut f = std::fs::File::create(dir.join(format!("{name}.dat")))?;
            for (x, y) in pts {
                writeln!(f, "{x:.6e} {y:.12e}")?;
            }
        }
        Ok(())
    }
}

/// Full pipeline for every `h` (independent runs in parallel, merged in `h` order).
pub fn scaling_study(
    geom: &SurfaceGeometry,
    spec: &ParamSpec,
    lambda_max: f64,
    h_list: &[f64],
    prop: &PropagatorConfig,
    beam: &BeamConfig,
    cfg: &StudyConfig,
) -> Result<ScalingResult> {
    if h_list.len() < 4 {
        return Err(LabError::Config(format!("scaling study needs ≥ 4 values of h, got {}", h_list.len())));
    }
    let mut hs = h_list.to_vec();
    hs.sort_by(|a, b| b.partial_cmp(a).expect("h values are finite"));
    let reports: Result<Vec<PipelineReport>> = hs
        .par_iter()
        .map(|&h| run_pipeline(geom, spec, lambda_max, h, prop, beam, cfg, false))
        .collect();
    ScalingResult::from_reports(reports?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Profile, ProfileSpec};

    fn setup(h: f64) -> SurfaceSetup {
        let g = SurfaceGeometry::new(Profile::new(ProfileSpec::default()).unwrap(), 9.5).unwrap();
        let p = Params::resolve(&ParamSpec::default(), 1.0, h).unwrap();
        SurfaceSetup::new(&g, &p, &PropagatorConfig::default()).unwrap()
    }

    #[test]
    fn validation_mode_respects_the_dissipative_bound() {
        let s = setup(0.1);
        let cuts = Cutoffs::new(&s, &StudyConfig::default()).unwrap();
        let r = direct_resolvent_norm(&s, &cuts, Some(Complex64::new(1.0, 1.0)), &ResolventConfig::default()).unwrap();
        assert!(r.value <= 1.0 + 1e-3, "{r:?}");
        assert!(r.value > 0.1);
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let s = setup(0.1);
        let cuts = Cutoffs::new(&s, &StudyConfig::default()).unwrap();
        let op = &s.propagator().op;
        let m = 10;
        let (sigma, ok) = mode_norm(op, m, &cuts.chi1, &cuts.chi2, &ResolventConfig::default()).unwrap();
        assert!(ok);
        let a = op.mode_matrix(m);
        let n = a.n;
        let dense = nalgebra::DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let inv = dense.try_inverse().unwrap();
        let b = nalgebra::DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * cuts.chi1[i] * cuts.chi2[j]);
        let svd = b.singular_values();
        let top = svd.iter().cloned().fold(0.0, f64::max);
        assert!((sigma - top).abs() <= 1e-8 * top, "{sigma} vs {top}");
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let h = [0.1, 0.07, 0.05, 0.035];
        let y: Vec<f64> = h.iter().map(|v: &f64| 3.0 * v.powf(-1.6)).collect();
        let s = Slope::fit(&h, &y).unwrap();
        assert!((s.slope + 1.6).abs() < 1e-12 && s.stderr < 1e-10);
        assert!(Slope::fit(&h[..3], &y[..3]).is_err());
    }
}

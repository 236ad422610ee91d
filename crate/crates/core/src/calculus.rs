//! Separable multiplier sandwiches: products of position cutoffs and Fourier
//! multipliers, their operator norms, and transport of their symbols by the flow.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{model_coherent_state, FieldLayout, ModelField, ModelGrid, WaveField};
use crate::flow::flow_point;
use crate::geometry::SurfaceGeometry;
use crate::propagate::{ModelPropagator, Propagator};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

fn mollifier(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// `C^∞` step: 0 for `x ≤ 0`, 1 for `x ≥ 1`, all derivatives vanishing at both ends.
pub fn smooth_step(x: f64) -> f64 {
    let a = mollifier(x);
    let b = mollifier(1.0 - x);
    if a + b == 0.0 {
        return if x > 0.5 { 1.0 } else { 0.0 };
    }
    a / (a + b)
}

/// Derivative of [`smooth_step`].
pub fn smooth_step_derivative(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let (a, b) = (mollifier(x), mollifier(1.0 - x));
    let (da, db) = (a / (x * x), b / ((1.0 - x) * (1.0 - x)));
    (da * b + a * db) / ((a + b) * (a + b))
}

/// Even cutoff equal to 1 on `|y| ≤ plateau` and 0 on `|y| ≥ support`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub plateau: f64,
    pub support: f64,
}

impl Default for Cutoff {
    fn default() -> Self {
        Self {
            plateau: 0.5,
            support: 1.0,
        }
    }
}

impl Cutoff {
    pub fn new(plateau: f64, support: f64) -> Result<Self> {
        if !(plateau >= 0.0 && support > plateau) {
            return Err(LabError::Config(format!("cutoff plateau {plateau} must be below support {support}")));
        }
        Ok(Self { plateau, support })
    }

    pub fn eval(&self, y: f64) -> f64 {
        smooth_step((self.support - y.abs()) / (self.support - self.plateau))
    }

    /// Widen the plateau by `factor` keeping the transition width.
    pub fn widened(&self, factor: f64) -> Self {
        let width = self.support - self.plateau;
        let plateau = self.plateau * factor;
        Self {
            plateau,
            support: plateau + width,
        }
    }
}

/// Normalized smearing profile supported in `[lo, hi]`: the derivative of the
/// smooth step from `lo` to `hi`, so that its primitive is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepProfile {
    pub lo: f64,
    pub hi: f64,
}

impl StepProfile {
    pub fn density(&self, x: f64) -> f64 {
        smooth_step_derivative((x - self.lo) / (self.hi - self.lo)) / (self.hi - self.lo)
    }

    pub fn primitive(&self, x: f64) -> f64 {
        smooth_step((x - self.lo) / (self.hi - self.lo))
    }
}

/// Phase-space coordinate a factor depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    /// Surface radial position.
    R,
    /// Surface radial frequency `h D_r`.
    XiR,
    /// Surface angular frequency `h·m`.
    Mode,
    /// Model longitudinal position.
    X1,
    /// Model transverse radius `|x′|`.
    XPerp,
    /// Model longitudinal frequency `h D_{x₁}`.
    Xi1,
    /// Model transverse frequency `|h D_{x′}|`.
    XiPerp,
}

impl Variable {
    pub fn is_frequency(self) -> bool {
        matches!(self, Variable::XiR | Variable::Mode | Variable::Xi1 | Variable::XiPerp)
    }

    pub fn is_surface(self) -> bool {
        matches!(self, Variable::R | Variable::XiR | Variable::Mode)
    }

    /// Coordinate value at a phase-space point `(x₁, x₂, ξ₁, ξ₂)`.
    fn at(self, z: &[f64; 4]) -> f64 {
        match self {
            Variable::R | Variable::X1 => z[0],
            Variable::XPerp => z[1].abs(),
            Variable::XiR | Variable::Xi1 => z[2],
            Variable::Mode => z[3],
            Variable::XiPerp => z[3].abs(),
        }
    }
}

/// One factor `χ((v − center)/scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub var: Variable,
    pub center: f64,
    pub scale: f64,
    #[serde(default)]
    pub cutoff: Cutoff,
}

impl Factor {
    pub fn new(var: Variable, center: f64, scale: f64, cutoff: Cutoff) -> Self {
        Self {
            var,
            center,
            scale,
            cutoff,
        }
    }

    pub fn value(&self, v: f64) -> f64 {
        self.cutoff.eval((v - self.center) / self.scale)
    }

    /// Interval outside which the factor vanishes.
    pub fn support(&self) -> (f64, f64) {
        let s = self.cutoff.support * self.scale;
        (self.center - s, self.center + s)
    }
}

/// Operator `c·F₁F₂…F_k`, applied right to left; every factor is a real
/// multiplier in position or in frequency, valued in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichSymbol {
    pub factors: Vec<Factor>,
    #[serde(default = "one")]
    pub prefactor: f64,
    pub rho: f64,
    pub h: f64,
}

fn one() -> f64 {
    1.0
}

impl SandwichSymbol {
    pub fn identity(h: f64) -> Self {
        Self {
            factors: Vec::new(),
            prefactor: 1.0,
            rho: 0.0,
            h,
        }
    }

    pub fn new(factors: Vec<Factor>, rho: f64, h: f64) -> Result<Self> {
        let s = Self {
            factors,
            prefactor: 1.0,
            rho,
            h,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.rho) {
            return Err(LabError::Config(format!("ρ = {} must lie in [0, 1/2)", self.rho)));
        }
        for f in &self.factors {
            Cutoff::new(f.cutoff.plateau, f.cutoff.support)?;
            if !(f.scale > 0.0) {
                return Err(LabError::Config(format!("factor {:?} has non-positive scale", f.var)));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            prefactor: self.prefactor * c,
            ..self.clone()
        }
    }

    /// Same symbol with every plateau widened by `factor`.
    pub fn widened(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for f in &mut s.factors {
            f.cutoff = f.cutoff.widened(factor);
        }
        s
    }

    /// Model symbol moved by `dx` along `x₁` (position factors only).
    pub fn translated(&self, dx: f64) -> Self {
        let mut s = self.clone();
        for f in &mut s.factors {
            if f.var == Variable::X1 {
                f.center += dx;
            }
        }
        s
    }

    /// Symbol value at a phase-space point.
    pub fn eval(&self, z: &[f64; 4]) -> f64 {
        self.prefactor * self.factors.iter().map(|f| f.value(f.var.at(z))).product::<f64>()
    }

    /// Product-of-intervals support descriptor.
    pub fn support(&self) -> Vec<(Variable, f64, f64)> {
        self.factors
            .iter()
            .map(|f| {
                let (a, b) = f.support();
                (f.var, a, b)
            })
            .collect()
    }

    fn check_resolved(&self, f: &Factor, spacing: f64) -> Result<()> {
        let width = 2.0 * f.cutoff.support * f.scale;
        if width / spacing < 8.0 {
            return Err(LabError::Grid(format!(
                "{:?} factor of width {width:.3e} has {:.1} grid points, need ≥ 8",
                f.var,
                width / spacing
            )));
        }
        Ok(())
    }

    /// Apply to a surface field (acting on the symmetrized representation).
    pub fn apply(&self, u: &WaveField) -> Result<WaveField> {
        self.apply_ordered(u, false)
    }

    /// Apply the adjoint (factors in reverse order).
    pub fn apply_adjoint(&self, u: &WaveField) -> Result<WaveField> {
        self.apply_ordered(u, true)
    }

    fn apply_ordered(&self, u: &WaveField, adjoint: bool) -> Result<WaveField> {
        let mut v = u.to_symmetrized();
        let grid = *v.grid();
        let win = v.window();
        let h = v.h();
        let n_pad = (2 * grid.n).next_power_of_two();
        let dxi = 2.0 * PI * h / (n_pad as f64 * grid.dr);
        let order: Vec<&Factor> = if adjoint {
            self.factors.iter().collect()
        } else {
            self.factors.iter().rev().collect()
        };
        for f in order {
            if !f.var.is_surface() {
                return Err(LabError::Config(format!("{:?} factor applied to a surface field", f.var)));
            }
            match f.var {
                Variable::R => {
                    self.check_resolved(f, grid.dr)?;
                    let m: Vec<f64> = (0..grid.n).map(|i| f.value(grid.r(i))).collect();
                    v.multiply_radial(&m);
                }
                Variable::Mode => {
                    self.check_resolved(f, h)?;
                    for k in 0..win.len() {
                        let c = f.value(h * win.mode(k) as f64);
                        v.mode_mut(k).iter_mut().for_each(|x| *x *= c);
                    }
                }
                Variable::XiR => {
                    self.check_resolved(f, dxi)?;
                    let mult: Vec<f64> = (0..n_pad)
                        .map(|j| {
                            let k = if j < n_pad / 2 { j as f64 } else { j as f64 - n_pad as f64 };
                            f.value(k * dxi) / n_pad as f64
                        })
                        .collect();
                    let mut planner = FftPlanner::new();
                    let fwd = planner.plan_fft_forward(n_pad);
                    let inv = planner.plan_fft_inverse(n_pad);
                    let n = grid.n;
                    v.data.par_chunks_mut(n).for_each(|mode| {
                        let mut buf = vec![ZERO; n_pad];
                        buf[..n].copy_from_slice(mode);
                        fwd.process(&mut buf);
                        buf.iter_mut().zip(&mult).for_each(|(b, m)| *b *= m);
                        inv.process(&mut buf);
                        mode.copy_from_slice(&buf[..n]);
                    });
                }
                _ => unreachable!(),
            }
        }
        v.scale(self.prefactor.into());
        Ok(v)
    }

    /// Apply to a model field.
    pub fn apply_model(&self, u: &ModelField) -> Result<ModelField> {
        self.apply_model_ordered(u, false)
    }

    pub fn apply_model_adjoint(&self, u: &ModelField) -> Result<ModelField> {
        self.apply_model_ordered(u, true)
    }

    fn apply_model_ordered(&self, u: &ModelField, adjoint: bool) -> Result<ModelField> {
        let g = &u.grid;
        let mut out = u.clone();
        let order: Vec<&Factor> = if adjoint {
            self.factors.iter().collect()
        } else {
            self.factors.iter().rev().collect()
        };
        for f in order {
            if f.var.is_surface() {
                return Err(LabError::Config(format!("{:?} factor applied to a model field", f.var)));
            }
            let needs_perp = matches!(f.var, Variable::XPerp | Variable::XiPerp);
            if needs_perp && g.dim() < 2 {
                if f.value(0.0) != 1.0 {
                    return Err(LabError::Config("transverse factor on a one-dimensional model".into()));
                }
                continue;
            }
            match f.var {
                Variable::X1 | Variable::XPerp => {
                    let axis = if f.var == Variable::X1 { 0 } else { 1 };
                    self.check_resolved(f, g.spacing(axis))?;
                    for (idx, x) in out.data.iter_mut().enumerate() {
                        let pos = g.position(idx);
                        let v = if f.var == Variable::X1 { pos[0] } else { pos[1..].iter().map(|p| p * p).sum::<f64>().sqrt() };
                        *x *= f.value(v);
                    }
                }
                Variable::Xi1 | Variable::XiPerp => {
                    let axis = if f.var == Variable::Xi1 { 0 } else { 1 };
                    self.check_resolved(f, 2.0 * PI * g.h / g.lengths[axis])?;
                    out.fourier_multiply(|xi| {
                        let v = if f.var == Variable::Xi1 { xi[0] } else { xi[1..].iter().map(|p| p * p).sum::<f64>().sqrt() };
                        f.value(v).into()
                    });
                }
                _ => unreachable!(),
            }
        }
        out.scale(self.prefactor.into());
        Ok(out)
    }
}

/// Power-iteration estimate of `‖Op(b)‖` from several random starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormEstimate {
    pub estimate: f64,
    pub spread: f64,
    pub trials: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn power_iteration<V: Clone>(
    start: V,
    iterations: usize,
    norm: impl Fn(&V) -> f64,
    scale: impl Fn(&mut V, f64),
    apply_bb: impl Fn(&V) -> Result<V>,
) -> Result<(f64, f64)> {
    let mut x = start;
    let n0 = norm(&x);
    scale(&mut x, 1.0 / n0);
    let mut est = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..iterations {
        let y = apply_bb(&x)?;
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok((0.0, 0.0));
        }
        let next = ny.sqrt();
        change = (next - est).abs() / next;
        est = next;
        x = y;
        scale(&mut x, 1.0 / ny);
    }
    Ok((est, change))
}

fn summarize(vals: Vec<(f64, f64)>, iterations: usize) -> Result<NormEstimate> {
    let best = vals.iter().map(|v| v.0).fold(0.0, f64::max);
    let worst = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let converged = vals.iter().any(|v| v.0 == best && v.1 < 1e-3);
    Ok(NormEstimate {
        estimate: best,
        spread: best - worst,
        trials: vals.len(),
        iterations,
        converged,
    })
}

/// `‖Op(b)‖` on surface fields of `layout`, from `trials ≥ 20` random starts.
pub fn op_norm_estimate(sym: &SandwichSymbol, layout: &FieldLayout, trials: usize, iterations: usize, seed: u64) -> Result<NormEstimate> {
    if trials < 20 {
        return Err(LabError::Config("operator norm estimates need at least 20 trials".into()));
    }
    let vals: Result<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut x = layout.zeros();
            x.data
                .iter_mut()
                .for_each(|v| *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            power_iteration(
                x,
                iterations,
                |v: &WaveField| v.norm(),
                |v, c| v.scale(c.into()),
                |v| sym.apply_adjoint(&sym.apply(v)?),
            )
        })
        .collect();
    summarize(vals?, iterations)
}

/// `‖Op(b)‖` on model fields.
pub fn op_norm_estimate_model(sym: &SandwichSymbol, grid: &ModelGrid, trials: usize, iterations: usize, seed: u64) -> Result<NormEstimate> {
    if trials < 20 {
        return Err(LabError::Config("operator norm estimates need at least 20 trials".into()));
    }
    let vals: Result<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut x = ModelField::zeros(grid);
            x.data
                .iter_mut()
                .for_each(|v| *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            power_iteration(
                x,
                iterations,
                |v: &ModelField| v.norm(),
                |v, c| v.scale(c.into()),
                |v| sym.apply_model_adjoint(&sym.apply_model(v)?),
            )
        })
        .collect();
    summarize(vals?, iterations)
}

/// One coherent state in an Egorov check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgorovSample {
    pub z: [f64; 4],
    pub z_t: [f64; 4],
    /// `‖Op(b)U(t)g_z‖/‖U(t)g_z‖`.
    pub quantum: f64,
    /// `b(e^{tH_p}z)`.
    pub classical: f64,
    /// `‖Op(b∘e^{tH_p})g_z‖`, when the transported symbol is again a sandwich.
    pub transported: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgorovReport {
    pub t: f64,
    pub h: f64,
    pub samples: Vec<EgorovSample>,
    pub max_classical_deviation: f64,
    pub max_transport_deviation: Option<f64>,
}

fn report(t: f64, h: f64, samples: Vec<EgorovSample>) -> EgorovReport {
    let max_classical_deviation = samples.iter().map(|s| (s.quantum - s.classical).abs()).fold(0.0, f64::max);
    let max_transport_deviation = samples
        .iter()
        .map(|s| s.transported.map(|v| (s.quantum - v).abs()))
        .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)));
    EgorovReport {
        t,
        h,
        samples,
        max_classical_deviation,
        max_transport_deviation,
    }
}

/// Compare `‖Op(b)U(t)g_z‖` with `b(e^{tH_p}z)` for coherent states at `points`
/// on the surface.
pub fn egorov_transport_check(
    sym: &SandwichSymbol,
    t: f64,
    geom: &SurfaceGeometry,
    propagator: &Propagator,
    points: &[[f64; 4]],
) -> Result<EgorovReport> {
    if points.len() < 10 {
        return Err(LabError::Config("an Egorov check needs at least 10 coherent states".into()));
    }
    let steps = propagator.steps_for(t)?;
    let samples: Result<Vec<EgorovSample>> = points
        .iter()
        .map(|&z| {
            let g = crate::field::coherent_state(propagator.layout(), z)?;
            let ug = propagator.evolve_steps(&g, steps);
            let z_t = flow_point(geom, &z, t, 1e-3);
            Ok(EgorovSample {
                z,
                z_t,
                quantum: sym.apply(&ug)?.norm() / ug.norm(),
                classical: sym.eval(&z_t),
                transported: None,
            })
        })
        .collect();
    Ok(report(t, propagator.h(), samples?))
}

/// Model version: the transport operator moves position factors rigidly, so
/// the transported symbol is again a sandwich and the comparison is exact.
pub fn egorov_model_check(sym: &SandwichSymbol, t: f64, prop: &ModelPropagator, points: &[[f64; 4]]) -> Result<EgorovReport> {
    if points.len() < 10 {
        return Err(LabError::Config("an Egorov check needs at least 10 coherent states".into()));
    }
    let grid = &prop.grid;
    let dim = grid.dim();
    let transported_sym = sym.translated(-t);
    let samples: Result<Vec<EgorovSample>> = points
        .par_iter()
        .map(|&z| {
            let x0 = [z[0], z[1]];
            let xi0 = [z[2], z[3]];
            let g = model_coherent_state(grid, &x0[..dim], &xi0[..dim]);
            let ug = prop.evolve(&g, t);
            let z_t = flow_point(&prop.geom, &z, t, 1e-3);
            let transported = if prop.geom.operator == crate::geometry::ModelOperator::Transport {
                Some(transported_sym.apply_model(&g)?.norm() / g.norm())
            } else {
                None
            };
            Ok(EgorovSample {
                z,
                z_t,
                quantum: sym.apply_model(&ug)?.norm() / ug.norm(),
                classical: sym.eval(&z_t),
                transported,
            })
        })
        .collect();
    Ok(report(t, grid.h, samples?))
}

/// Random points within `spread` of `z` in every coordinate except `θ`.
pub fn points_near(z: [f64; 4], spread: f64, count: usize, seed: u64) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut p = z;
            for (i, c) in p.iter_mut().enumerate() {
                if i != 1 {
                    *c += spread * rng.gen_range(-1.0..1.0);
                }
            }
            p
        })
        .collect()
}

//! Wave fields on the surface (radial grid × angular mode window) and on the
//! flat model box, coherent states, tube regions and Husimi masses.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::flow::Trajectory;
use crate::geometry::{angle_diff, Hamiltonian, SurfaceGeometry};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Uniform interior grid `r_i = −R + (i+1)·dr`, `dr = 2R/(n+1)`, Dirichlet at `±R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    pub r_max: f64,
    pub n: usize,
    pub dr: f64,
}

impl RadialGrid {
    pub fn new(r_max: f64, n: usize) -> Result<Self> {
        if !(r_max > 0.0) || n < 8 {
            return Err(LabError::Grid(format!("radial grid needs R > 0 and n ≥ 8, got R={r_max}, n={n}")));
        }
        Ok(Self {
            r_max,
            n,
            dr: 2.0 * r_max / (n + 1) as f64,
        })
    }

    /// Smallest grid with spacing at most `dr`.
    pub fn with_spacing(r_max: f64, dr: f64) -> Result<Self> {
        let n = (2.0 * r_max / dr).ceil() as usize;
        Self::new(r_max, n.max(8))
    }

    pub fn r(&self, i: usize) -> f64 {
        -self.r_max + (i + 1) as f64 * self.dr
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.r(i)).collect()
    }

    /// Index of the grid point nearest to `r`, clamped.
    pub fn index_of(&self, r: f64) -> usize {
        let k = ((r + self.r_max) / self.dr - 1.0).round();
        k.clamp(0.0, (self.n - 1) as f64) as usize
    }
}

/// Contiguous window of angular modes `m_lo..=m_hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeWindow {
    pub m_lo: i64,
    pub m_hi: i64,
}

impl ModeWindow {
    pub fn new(m_lo: i64, m_hi: i64) -> Result<Self> {
        if m_hi < m_lo {
            return Err(LabError::Grid(format!("empty mode window [{m_lo}, {m_hi}]")));
        }
        Ok(Self { m_lo, m_hi })
    }

    /// Modes with `|h·m − center| ≤ k·√h`.
    pub fn around(center: f64, h: f64, k: f64) -> Result<Self> {
        let half = k * h.sqrt();
        Self::new(((center - half) / h).ceil() as i64, ((center + half) / h).floor() as i64)
    }

    pub fn len(&self) -> usize {
        (self.m_hi - self.m_lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self, k: usize) -> i64 {
        self.m_lo + k as i64
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> {
        self.m_lo..=self.m_hi
    }

    pub fn widened(&self, extra: i64) -> Self {
        Self {
            m_lo: self.m_lo - extra,
            m_hi: self.m_hi + extra,
        }
    }
}

/// Which function the stored coefficients describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// `u_m(r)` with norm `Σ_m ∫|u_m|² w dr`.
    Physical,
    /// `v_m = w^{1/2} u_m` with norm `Σ_m ∫|v_m|² dr`.
    Symmetrized,
}

/// Discretization shared by all fields of one run.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    pub h: f64,
    pub grid: RadialGrid,
    pub window: ModeWindow,
    /// `w(r_i)^{1/2}`.
    pub half_weight: Arc<Vec<f64>>,
}

impl FieldLayout {
    pub fn new(geom: &SurfaceGeometry, h: f64, grid: RadialGrid, window: ModeWindow) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(LabError::Config(format!("h = {h} must lie in (0, 1)")));
        }
        if (grid.r_max - geom.r_max).abs() > 1e-12 {
            return Err(LabError::Grid("grid and geometry use different radial domains".into()));
        }
        let half_weight = grid.points().iter().map(|&r| geom.weight(r).sqrt()).collect();
        Ok(Self {
            h,
            grid,
            window,
            half_weight: Arc::new(half_weight),
        })
    }

    /// Default discretization: `dr ≈ h/points_per_h` and modes within `k√h` of `h·m = 1`.
    pub fn standard(geom: &SurfaceGeometry, h: f64, points_per_h: f64, k: f64) -> Result<Self> {
        let grid = RadialGrid::with_spacing(geom.r_max, h / points_per_h)?;
        Self::new(geom, h, grid, ModeWindow::around(1.0, h, k)?)
    }

    pub fn zeros(&self) -> WaveField {
        WaveField {
            layout: self.clone(),
            repr: Representation::Symmetrized,
            data: vec![ZERO; self.grid.n * self.window.len()],
        }
    }
}

/// Complex field `u(r, θ) = Σ_m u_m(r) e^{imθ}/√(2π)`, stored mode-major.
#[derive(Debug, Clone)]
pub struct WaveField {
    pub layout: FieldLayout,
    pub repr: Representation,
    pub data: Vec<Complex64>,
}

impl WaveField {
    pub fn h(&self) -> f64 {
        self.layout.h
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.layout.grid
    }

    pub fn window(&self) -> ModeWindow {
        self.layout.window
    }

    pub fn mode(&self, k: usize) -> &[Complex64] {
        let n = self.layout.grid.n;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn mode_mut(&mut self, k: usize) -> &mut [Complex64] {
        let n = self.layout.grid.n;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn zeros_like(&self) -> WaveField {
        let mut z = self.layout.zeros();
        z.repr = self.repr;
        z
    }

    pub fn to_symmetrized(&self) -> WaveField {
        self.convert(Representation::Symmetrized)
    }

    pub fn to_physical(&self) -> WaveField {
        self.convert(Representation::Physical)
    }

    fn convert(&self, target: Representation) -> WaveField {
        let mut out = self.clone();
        if self.repr == target {
            return out;
        }
        let n = self.layout.grid.n;
        let hw = &self.layout.half_weight;
        for (idx, v) in out.data.iter_mut().enumerate() {
            let s = hw[idx % n];
            *v = match target {
                Representation::Symmetrized => *v * s,
                Representation::Physical => *v / s,
            };
        }
        out.repr = target;
        out
    }

    /// `‖u‖_{L²(dV)}` computed from the stored representation.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        let n = self.layout.grid.n;
        let dr = self.layout.grid.dr;
        match self.repr {
            Representation::Symmetrized => self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * dr,
            Representation::Physical => {
                let hw = &self.layout.half_weight;
                self.data
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.norm_sqr() * hw[i % n] * hw[i % n])
                    .sum::<f64>()
                    * dr
            }
        }
    }

    /// `⟨self, other⟩`, antilinear in `other`.
    pub fn inner(&self, other: &WaveField) -> Complex64 {
        let a = self.to_symmetrized();
        let b = other.to_symmetrized();
        a.data.iter().zip(&b.data).map(|(x, y)| x * y.conj()).sum::<Complex64>() * self.layout.grid.dr
    }

    /// Norm from samples on a uniform θ grid, `Σ|u(r_i, θ_l)|² w(r_i) dr dθ`.
    /// Equals [`WaveField::norm`] by Parseval when the θ grid resolves the window.
    pub fn norm_on_theta_grid(&self, n_theta: usize) -> f64 {
        let nm = self.window().len();
        let n_theta = n_theta.max(nm).next_power_of_two();
        let v = self.to_symmetrized();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_inverse(n_theta);
        let n = self.layout.grid.n;
        let mut total = 0.0;
        let mut buf = vec![ZERO; n_theta];
        for i in 0..n {
            buf.iter_mut().for_each(|b| *b = ZERO);
            for k in 0..nm {
                let m = self.window().mode(k);
                buf[m.rem_euclid(n_theta as i64) as usize] = v.data[k * n + i];
            }
            fft.process(&mut buf);
            total += buf.iter().map(|b| b.norm_sqr()).sum::<f64>() / (2.0 * PI);
        }
        (total * self.layout.grid.dr * 2.0 * PI / n_theta as f64).sqrt()
    }

    /// Fraction of `‖u‖²` carried by the first and last mode of the window.
    pub fn boundary_mode_fraction(&self) -> f64 {
        let total = self.norm_sq();
        if total == 0.0 {
            return 0.0;
        }
        let v = self.to_symmetrized();
        let dr = self.layout.grid.dr;
        let nm = self.window().len();
        let edge: f64 = [0, nm - 1]
            .iter()
            .take(if nm == 1 { 1 } else { 2 })
            .map(|&k| v.mode(k).iter().map(|x| x.norm_sqr()).sum::<f64>() * dr)
            .sum();
        edge / total
    }

    /// `Σ_m |v_m(r_i)|²`.
    pub fn radial_density(&self) -> Vec<f64> {
        let v = self.to_symmetrized();
        let n = self.layout.grid.n;
        let mut out = vec![0.0; n];
        for (idx, x) in v.data.iter().enumerate() {
            out[idx % n] += x.norm_sqr();
        }
        out
    }

    /// Squared norm carried by `|r| > r_cut`.
    pub fn mass_beyond(&self, r_cut: f64) -> f64 {
        let d = self.radial_density();
        (0..self.layout.grid.n)
            .filter(|&i| self.layout.grid.r(i).abs() > r_cut)
            .map(|i| d[i])
            .sum::<f64>()
            * self.layout.grid.dr
    }

    pub fn scale(&mut self, c: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: Complex64) -> WaveField {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c·other`.
    pub fn axpy(&mut self, c: Complex64, other: &WaveField) {
        let o = other.convert(self.repr);
        self.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += c * b);
    }

    pub fn sub(&self, other: &WaveField) -> WaveField {
        let mut out = self.clone();
        out.axpy(Complex64::new(-1.0, 0.0), other);
        out
    }

    pub fn add(&self, other: &WaveField) -> WaveField {
        let mut out = self.clone();
        out.axpy(Complex64::new(1.0, 0.0), other);
        out
    }

    /// Multiply by a function of `r` (commutes with the half weight).
    pub fn multiply_radial(&mut self, f: &[f64]) {
        let n = self.layout.grid.n;
        self.data.iter_mut().enumerate().for_each(|(idx, v)| *v *= f[idx % n]);
    }

    /// Field dump: raw little-endian `(re, im)` pairs in mode-major order plus a JSON sidecar.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut bin = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.data {
            bin.write_all(&v.re.to_le_bytes())?;
            bin.write_all(&v.im.to_le_bytes())?;
        }
        bin.flush()?;
        let meta = FieldMeta {
            h: self.h(),
            grid: *self.grid(),
            window: self.window(),
            representation: self.repr,
            layout: "mode-major complex128 little-endian".into(),
            norm: self.norm(),
        };
        let sidecar = path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Read a dump written by [`WaveField::dump`] against a compatible layout.
    pub fn load(path: &Path, layout: &FieldLayout) -> Result<WaveField> {
        let meta: FieldMeta = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        if meta.grid != layout.grid || meta.window != layout.window {
            return Err(LabError::Grid("dump does not match the requested layout".into()));
        }
        let bytes = std::fs::read(path)?;
        if bytes.len() != 16 * layout.grid.n * layout.window.len() {
            return Err(LabError::Serde(format!("dump has {} bytes", bytes.len())));
        }
        let data = bytes
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect();
        Ok(WaveField {
            layout: layout.clone(),
            repr: meta.representation,
            data,
        })
    }
}

/// JSON sidecar of a field dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMeta {
    pub h: f64,
    pub grid: RadialGrid,
    pub window: ModeWindow,
    pub representation: Representation,
    pub layout: String,
    pub norm: f64,
}

/// Coefficient of mode `m` in the periodized θ-Gaussian centred at `(θ₀, ξ_θ)`,
/// before normalization.
fn theta_gaussian_coeff(m: i64, theta0: f64, xi_theta: f64, h: f64) -> Complex64 {
    let hm = h * m as f64;
    Complex64::from_polar(
        h.sqrt() * (-(xi_theta - hm).powi(2) / (2.0 * h)).exp(),
        -(m as f64) * theta0,
    )
}

/// Normalized Gaussian wave packet at `z = (r₀, θ₀, ξ_r, ξ_θ)` with width `√h`
/// in both coordinates; the θ factor is periodized. Built in the symmetrized
/// representation, so overlaps are plain Gaussian integrals.
pub fn coherent_state(layout: &FieldLayout, center: [f64; 4]) -> Result<WaveField> {
    let h = layout.h;
    let g = &layout.grid;
    let [r0, theta0, xi_r, xi_theta] = center;
    let tail = (-(g.r_max - r0.abs()).powi(2) / h).exp();
    if tail > 1e-10 {
        return Err(LabError::Grid(format!(
            "coherent state at r = {r0} leaves {tail:.2e} of its mass outside the domain"
        )));
    }
    let radial: Vec<Complex64> = (0..g.n)
        .map(|i| {
            let x = g.r(i) - r0;
            Complex64::from_polar((-x * x / (2.0 * h)).exp(), xi_r * x / h)
        })
        .collect();
    let mut out = layout.zeros();
    for k in 0..layout.window.len() {
        let c = theta_gaussian_coeff(layout.window.mode(k), theta0, xi_theta, h);
        for (dst, src) in out.mode_mut(k).iter_mut().zip(&radial) {
            *dst = c * src;
        }
    }
    let nrm = out.norm();
    out.scale(Complex64::new(1.0 / nrm, 0.0));
    if out.boundary_mode_fraction() > 1e-10 {
        return Err(LabError::Grid(format!(
            "mode window [{}, {}] too narrow for ξ_θ = {xi_theta}",
            layout.window.m_lo, layout.window.m_hi
        )));
    }
    Ok(out)
}

/// Flat periodic box for the model operator, `n ∈ {1, 2}`, centred at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrid {
    pub h: f64,
    pub points: Vec<usize>,
    pub lengths: Vec<f64>,
}

impl ModelGrid {
    pub fn new(h: f64, points: Vec<usize>, lengths: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() > 2 || points.len() != lengths.len() {
            return Err(LabError::Config("model grid supports dimensions 1 and 2".into()));
        }
        if points.iter().any(|&p| p < 4) || lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(LabError::Grid("model grid needs ≥ 4 points and positive lengths per axis".into()));
        }
        Ok(Self { h, points, lengths })
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.points[axis] as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -0.5 * self.lengths[axis] + i as f64 * self.spacing(axis)
    }

    /// Semiclassical frequency `h·k` of FFT bin `i` along `axis`.
    pub fn frequency(&self, axis: usize, i: usize) -> f64 {
        let n = self.points[axis] as i64;
        let k = if (i as i64) < (n + 1) / 2 { i as i64 } else { i as i64 - n };
        2.0 * PI * self.h * k as f64 / self.lengths[axis]
    }

    pub fn cell(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Row-major index; axis 0 (`x₁`) is the slow index.
    pub fn index(&self, i: &[usize]) -> usize {
        match self.dim() {
            1 => i[0],
            _ => i[0] * self.points[1] + i[1],
        }
    }

    /// Coordinates of flat index `idx`.
    pub fn position(&self, idx: usize) -> Vec<f64> {
        match self.dim() {
            1 => vec![self.coord(0, idx)],
            _ => vec![self.coord(0, idx / self.points[1]), self.coord(1, idx % self.points[1])],
        }
    }

    /// Frequencies of flat index `idx` in FFT ordering.
    pub fn frequencies(&self, idx: usize) -> Vec<f64> {
        match self.dim() {
            1 => vec![self.frequency(0, idx)],
            _ => vec![self.frequency(0, idx / self.points[1]), self.frequency(1, idx % self.points[1])],
        }
    }
}

/// Complex field on a [`ModelGrid`].
#[derive(Debug, Clone)]
pub struct ModelField {
    pub grid: ModelGrid,
    pub data: Vec<Complex64>,
}

impl ModelField {
    pub fn zeros(grid: &ModelGrid) -> Self {
        Self {
            grid: grid.clone(),
            data: vec![ZERO; grid.len()],
        }
    }

    pub fn from_fn(grid: &ModelGrid, f: impl Fn(&[f64]) -> Complex64) -> Self {
        Self {
            grid: grid.clone(),
            data: (0..grid.len()).map(|i| f(&grid.position(i))).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell()).sqrt()
    }

    pub fn inner(&self, other: &ModelField) -> Complex64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b.conj()).sum::<Complex64>() * self.grid.cell()
    }

    pub fn sub(&self, other: &ModelField) -> ModelField {
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn scale(&mut self, c: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// Forward (`inverse = false`) or inverse unnormalized FFT over all axes.
    pub fn fft(&mut self, inverse: bool) {
        let mut planner = FftPlanner::new();
        let g = &self.grid;
        let n0 = g.points[0];
        if g.dim() == 1 {
            let plan = if inverse { planner.plan_fft_inverse(n0) } else { planner.plan_fft_forward(n0) };
            plan.process(&mut self.data);
            return;
        }
        let n1 = g.points[1];
        let p1 = if inverse { planner.plan_fft_inverse(n1) } else { planner.plan_fft_forward(n1) };
        for row in self.data.chunks_exact_mut(n1) {
            p1.process(row);
        }
        let p0 = if inverse { planner.plan_fft_inverse(n0) } else { planner.plan_fft_forward(n0) };
        let mut col = vec![ZERO; n0];
        for j in 0..n1 {
            for i in 0..n0 {
                col[i] = self.data[i * n1 + j];
            }
            p0.process(&mut col);
            for i in 0..n0 {
                self.data[i * n1 + j] = col[i];
            }
        }
    }

    /// Apply the Fourier multiplier `m(hξ)`.
    pub fn fourier_multiply(&mut self, m: impl Fn(&[f64]) -> Complex64) {
        self.fft(false);
        let scale = 1.0 / self.grid.len() as f64;
        for idx in 0..self.data.len() {
            self.data[idx] *= m(&self.grid.frequencies(idx)) * scale;
        }
        self.fft(true);
    }
}

/// Model-case coherent state `(πh)^{−n/4} e^{−|x−x₀|²/2h + i⟨ξ₀, x−x₀⟩/h}`, periodized
/// to the nearest image.
pub fn model_coherent_state(grid: &ModelGrid, x0: &[f64], xi0: &[f64]) -> ModelField {
    let h = grid.h;
    let n = grid.dim() as f64;
    ModelField::from_fn(grid, |x| {
        let mut re = 0.0;
        let mut ph = 0.0;
        for a in 0..x.len() {
            let l = grid.lengths[a];
            let d = (x[a] - x0[a] + 0.5 * l).rem_euclid(l) - 0.5 * l;
            re -= d * d / (2.0 * h);
            ph += xi0[a] * d / h;
        }
        Complex64::from_polar((PI * h).powf(-n / 4.0) * re.exp(), ph)
    })
}

/// `ε`-neighbourhood of `γ([t₁, t₂])` in the reference metric on `(r, θ, ξ_r, ξ_θ)`,
/// θ periodic with scale 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeRegion {
    pub t1: f64,
    pub t2: f64,
    pub radius: f64,
    /// Dense samples of the segment.
    pub samples: Vec<[f64; 4]>,
}

impl TubeRegion {
    pub fn new<H: Hamiltonian + ?Sized>(ham: &H, traj: &Trajectory, t1: f64, t2: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || t2 < t1 {
            return Err(LabError::Config(format!("tube [{t1}, {t2}] with radius {radius} is invalid")));
        }
        if t1 < traj.t_min - 1e-9 || t2 > traj.t_max() + 1e-9 {
            return Err(LabError::Config(format!(
                "tube [{t1}, {t2}] leaves the sampled trajectory [{}, {}]",
                traj.t_min,
                traj.t_max()
            )));
        }
        let n = (((t2 - t1) / 0.005).ceil() as usize).max(1);
        let samples = (0..=n)
            .map(|k| traj.at(ham, t1 + (t2 - t1) * k as f64 / n as f64))
            .collect();
        Ok(Self {
            t1,
            t2,
            radius,
            samples,
        })
    }

    /// Distance from `z` to the sampled segment (piecewise linear between samples).
    pub fn distance(&self, z: &[f64; 4]) -> f64 {
        segment_distance(&self.samples, z)
    }

    pub fn contains(&self, z: &[f64; 4]) -> bool {
        self.distance(z) <= self.radius
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        Self {
            radius,
            ..self.clone()
        }
    }
}

fn offset(a: &[f64; 4], z: &[f64; 4]) -> [f64; 4] {
    [z[0] - a[0], angle_diff(z[1], a[1]), z[2] - a[2], z[3] - a[3]]
}

fn segment_distance(samples: &[[f64; 4]], z: &[f64; 4]) -> f64 {
    if samples.len() == 1 {
        let d = offset(&samples[0], z);
        return d.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let mut best = f64::INFINITY;
    for w in samples.windows(2) {
        let d = offset(&w[0], z);
        let mut e = offset(&w[0], &w[1]);
        e[1] = w[1][1] - w[0][1];
        let ee: f64 = e.iter().map(|x| x * x).sum();
        let s = if ee > 0.0 {
            (d.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / ee).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let dist2: f64 = d.iter().zip(&e).map(|(a, b)| (a - s * b).powi(2)).sum();
        best = best.min(dist2);
    }
    best.sqrt()
}

/// Grid controls for Husimi quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HusimiConfig {
    /// Target spacing in every phase-space direction, in units of `√h`.
    pub spacing: f64,
    /// `|ξ_r|` cut-off of the momentum grid.
    pub xi_r_max: f64,
    /// Points whose cell mass is below `prune·‖u‖²` are dropped from the cloud.
    pub prune: f64,
}

impl Default for HusimiConfig {
    fn default() -> Self {
        Self {
            spacing: 0.5,
            xi_r_max: 1.6,
            prune: 1e-13,
        }
    }
}

/// Husimi measure of a field sampled on a phase-space grid: each retained
/// point carries the mass of its cell.
#[derive(Debug, Clone)]
pub struct HusimiCloud {
    pub points: Vec<[f64; 4]>,
    pub mass: Vec<f64>,
    /// Quadrature of the full measure, including pruned cells.
    pub total: f64,
    pub norm_sq: f64,
    /// `(r₀, ξ_r, marginal density)` after integrating out `(θ, ξ_θ)`.
    pub slice: Vec<(f64, f64, f64)>,
}

impl HusimiCloud {
    /// Fraction of the measure inside `region`.
    pub fn mass_fraction(&self, region: &TubeRegion) -> f64 {
        let inside: f64 = self
            .points
            .iter()
            .zip(&self.mass)
            .filter(|(z, _)| region.contains(z))
            .map(|(_, m)| m)
            .sum();
        inside / self.total
    }

    /// Smallest radius `δ` such that the `δ`-tube around `region`'s segment holds
    /// at least `fraction` of the measure.
    pub fn radius_for_fraction(&self, region: &TubeRegion, fraction: f64) -> f64 {
        let mut d: Vec<(f64, f64)> = self
            .points
            .iter()
            .zip(&self.mass)
            .map(|(z, m)| (region.distance(z), *m))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let target = fraction * self.total;
        let mut acc = 0.0;
        for (dist, m) in d {
            acc += m;
            if acc >= target {
                return dist;
            }
        }
        f64::INFINITY
    }

    /// CSV `r, xi_r, density` of the `(θ, ξ_θ)` marginal.
    pub fn write_slice_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["r", "xi_r", "density"])?;
        for row in &self.slice {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Husimi quadrature with grid offsets `shift ∈ [0, 1)⁴` (in cell units) along
/// `(r₀, ξ_r, θ₀, ξ_θ)`; the unshifted grid is the deterministic mode.
pub fn husimi_cloud(u: &WaveField, cfg: &HusimiConfig, shift: [f64; 4]) -> HusimiCloud {
    let v = u.to_symmetrized();
    let h = u.h();
    let sh = h.sqrt();
    let g = *u.grid();
    let win = u.window();
    let nm = win.len();
    let norm_sq = v.norm_sq();
    let step = cfg.spacing * sh;

    // Radial extent carrying the mass.
    let dens = v.radial_density();
    let peak = dens.iter().cloned().fold(0.0, f64::max);
    let live: Vec<usize> = (0..g.n).filter(|&i| dens[i] > 1e-18 * peak).collect();
    let empty = HusimiCloud {
        points: Vec::new(),
        mass: Vec::new(),
        total: 0.0,
        norm_sq,
        slice: Vec::new(),
    };
    let (Some(&first), Some(&last)) = (live.first(), live.last()) else {
        return empty;
    };
    let half_window = 6.0 * sh;
    let r_lo = g.r(first) - 0.5 * half_window;
    let r_hi = g.r(last) + 0.5 * half_window;
    let n_r0 = ((r_hi - r_lo) / step).ceil() as usize + 1;

    // Momentum FFT length.
    let half_pts = (half_window / g.dr).ceil() as usize;
    let n_fft = (2 * half_pts + 1)
        .max((2.0 * PI * h / (g.dr * step)).ceil() as usize)
        .next_power_of_two();
    let dxi = 2.0 * PI * h / (n_fft as f64 * g.dr);
    let k_max = (cfg.xi_r_max / dxi).ceil() as i64;

    // ξ_θ grid covering the mode window.
    let xt_lo = h * win.m_lo as f64 - 3.0 * sh;
    let xt_hi = h * win.m_hi as f64 + 3.0 * sh;
    let n_xt = ((xt_hi - xt_lo) / step).ceil() as usize + 1;
    let dxt = (xt_hi - xt_lo) / (n_xt - 1).max(1) as f64;

    // θ grid.
    let n_theta = ((2.0 * PI / step).ceil() as usize).max(nm).next_power_of_two();
    let dtheta = 2.0 * PI / n_theta as f64;

    let cell = step * dxi * dtheta * dxt;
    let pref = (PI * h).powf(-0.5) * h / (PI * h).sqrt();
    let measure = cell / (2.0 * PI * h).powi(2);

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_theta);

    let mut points = Vec::new();
    let mut mass = Vec::new();
    let mut slice = Vec::new();
    let mut total = 0.0;
    let cut = cfg.prune * norm_sq;
    let mut spec = vec![ZERO; n_fft];
    let mut radial = vec![vec![ZERO; 2 * k_max as usize + 1]; nm];
    let mut theta_buf = vec![ZERO; n_theta];
    for ir in 0..n_r0 {
        let r0 = r_lo + (ir as f64 + shift[0]) * step;
        let center = g.index_of(r0);
        let lo = center.saturating_sub(half_pts);
        let hi = (center + half_pts).min(g.n - 1);
        // Radial overlaps F_m(ξ_k) for all modes.
        for k in 0..nm {
            spec.iter_mut().for_each(|s| *s = ZERO);
            let mode = v.mode(k);
            for i in lo..=hi {
                let x = g.r(i) - r0;
                let j = i - lo;
                let frac = Complex64::from_polar(1.0, -shift[1] * dxi * x / h);
                spec[j] = mode[i] * (-x * x / (2.0 * h)).exp() * frac;
            }
            fwd.process(&mut spec);
            let x_first = g.r(lo) - r0;
            for (slot, kk) in (-k_max..=k_max).enumerate() {
                let bin = kk.rem_euclid(n_fft as i64) as usize;
                // Undo the origin shift of the window.
                radial[k][slot] = spec[bin] * Complex64::from_polar(1.0, -(kk as f64) * dxi * x_first / h) * g.dr;
            }
        }
        for (slot, kk) in (-k_max..=k_max).enumerate() {
            let xi_r = (kk as f64 + shift[1]) * dxi;
            let mut marginal = 0.0;
            for it in 0..n_xt {
                let xi_t = xt_lo + (it as f64 + shift[3]) * dxt;
                theta_buf.iter_mut().for_each(|b| *b = ZERO);
                for k in 0..nm {
                    let m = win.mode(k);
                    let a = (-(xi_t - h * m as f64).powi(2) / (2.0 * h)).exp();
                    if a < 1e-17 {
                        continue;
                    }
                    let ph = Complex64::from_polar(1.0, m as f64 * shift[2] * dtheta);
                    theta_buf[m.rem_euclid(n_theta as i64) as usize] += radial[k][slot] * a * ph;
                }
                inv.process(&mut theta_buf);
                for (l, b) in theta_buf.iter().enumerate() {
                    let dm = b.norm_sqr() * pref * measure;
                    total += dm;
                    marginal += dm;
                    if dm > cut {
                        let theta = (l as f64 + shift[2]) * dtheta;
                        points.push([r0, theta, xi_r, xi_t]);
                        mass.push(dm);
                    }
                }
            }
            if marginal > 0.0 {
                slice.push((r0, xi_r, marginal / (step * dxi)));
            }
        }
    }
    HusimiCloud {
        points,
        mass,
        total,
        norm_sq,
        slice,
    }
}

/// Husimi mass fraction of `u` inside `region`, deterministic grid quadrature.
pub fn husimi_mass(u: &WaveField, region: &TubeRegion, cfg: &HusimiConfig) -> f64 {
    husimi_cloud(u, cfg, [0.0; 4]).mass_fraction(region)
}

/// Randomized-shift estimate of the mass fraction: `shifts` independent
/// uniformly offset grids (each stratified over phase space), returning the
/// mean and the standard error across shifts.
pub fn husimi_mass_mc(u: &WaveField, region: &TubeRegion, cfg: &HusimiConfig, shifts: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..shifts.max(2))
        .map(|_| {
            let s = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            husimi_cloud(u, cfg, s).mass_fraction(region)
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

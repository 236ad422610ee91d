//! Surface of revolution `ℝ_r × S¹_θ` with metric `dr² + dθ²/(1 − r²a(r)²)`,
//! plus a flat model space on which the transport operator `h D_{x₁}` is
//! exactly solvable.
//!
//! The warping profile is the closed form `√(r²−1)/r²` for `|r| ≥ r0`. Inside
//! it is an even polynomial in `r` that takes the value `alpha` at the origin
//! and matches the closed form to fourth order at `r0`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Number of closed-form derivatives matched at the junction `|r| = r0`.
const MATCH_ORDER: usize = 4;

/// Phase-space point. On the surface `q = (r, θ)` and `p = (ξ_r, ξ_θ)`;
/// on the flat model `q = (x₁, x₂)` and `p = (ξ₁, ξ₂)` (second slots unused
/// when `n = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: [f64; 2],
    pub p: [f64; 2],
}

impl PhasePoint {
    pub fn new(q0: f64, q1: f64, p0: f64, p1: f64) -> Self {
        Self {
            q: [q0, q1],
            p: [p0, p1],
        }
    }

    pub fn from_array(z: [f64; 4]) -> Self {
        Self::new(z[0], z[1], z[2], z[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q[0], self.q[1], self.p[0], self.p[1]]
    }

    /// Same point with the angle reduced to `[0, 2π)`.
    pub fn reduced_angle(mut self) -> Self {
        self.q[1] = self.q[1].rem_euclid(2.0 * PI);
        self
    }
}

/// Difference of two angles mapped to `(−π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

/// A phase space with a Hamiltonian flow and a reference distance.
///
/// All systems are embedded in a four-dimensional phase space; the flat
/// model with `n = 1` leaves the second pair of coordinates inert.
pub trait Hamiltonian: Sync {
    fn energy(&self, z: &[f64; 4]) -> f64;
    /// `H_p = (∂_ξ p, −∂_x p)`.
    fn vector_field(&self, z: &[f64; 4]) -> [f64; 4];
    /// Jacobian of `H_p`, row-major.
    fn jacobian(&self, z: &[f64; 4]) -> [[f64; 4]; 4];
    /// Reference phase-space distance (flat, periodic where appropriate).
    fn distance(&self, a: &[f64; 4], b: &[f64; 4]) -> f64;
}

/// Parameters of the warping profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSpec {
    /// Value of `a` at the origin.
    pub alpha: f64,
    /// Matching radius, `> 1`.
    pub r0: f64,
    /// Extra interpolation constraints `(r, a(r))` for `0 < r < r0`.
    pub control_points: Vec<(f64, f64)>,
    /// Number of points on the validation grid.
    pub validation_points: usize,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            r0: 1.5,
            control_points: Vec::new(),
            validation_points: 10_000,
        }
    }
}

/// `a`, `a′`, `a″` at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileValue {
    pub a: f64,
    pub da: f64,
    pub d2a: f64,
}

/// Closed-form profile derivatives: `a⁽ᵏ⁾ = Q_k(r²) / (r^{k+2} (r²−1)^{k−1/2})`.
fn closed_form_derivative(r: f64, k: usize) -> f64 {
    let s = r * r;
    let q = match k {
        0 => 1.0,
        1 => 2.0 - s,
        2 => (2.0 * s - 9.0) * s + 6.0,
        3 => ((-6.0 * s + 45.0) * s - 60.0) * s + 24.0,
        4 => (((24.0 * s - 264.0) * s + 525.0) * s - 420.0) * s + 120.0,
        _ => unreachable!("closed-form derivative order"),
    };
    q / (r.powi(k as i32 + 2) * (s - 1.0).powf(k as f64 - 0.5))
}

/// `d^k/dr^k r^{2j}` evaluated at `r`.
fn even_monomial_derivative(r: f64, j: usize, k: usize) -> f64 {
    let n = 2 * j;
    if k > n {
        return 0.0;
    }
    let mut c = 1.0;
    for i in 0..k {
        c *= (n - i) as f64;
    }
    c * r.powi((n - k) as i32)
}

/// Validated warping profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    spec: ProfileSpec,
    /// Coefficients of `Σ c_j r^{2j}` on `|r| < r0`.
    coeffs: Vec<f64>,
}

impl Profile {
    /// Build the blend and validate it on the default radial domain.
    pub fn new(spec: ProfileSpec) -> Result<Self> {
        let profile = Self::blend(spec)?;
        let report = profile.validate(profile.spec.r0 + 6.0);
        if !report.passed {
            return Err(LabError::Geometry(report.summary()));
        }
        Ok(profile)
    }

    /// Solve for the blend coefficients without validating the result.
    pub fn blend(spec: ProfileSpec) -> Result<Self> {
        if !(spec.r0 > 1.0) || !spec.r0.is_finite() {
            return Err(LabError::Config(format!(
                "matching radius r0 = {} must exceed 1",
                spec.r0
            )));
        }
        if !(spec.alpha >= 0.0) {
            return Err(LabError::Config(format!(
                "alpha = {} must be non-negative",
                spec.alpha
            )));
        }
        for &(r, _) in &spec.control_points {
            if !(r > 0.0 && r < spec.r0) {
                return Err(LabError::Config(format!(
                    "control point r = {r} outside (0, r0)"
                )));
            }
        }
        let n = 1 + (MATCH_ORDER + 1) + spec.control_points.len();
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        m[(0, 0)] = 1.0;
        rhs[0] = spec.alpha;
        for k in 0..=MATCH_ORDER {
            let row = 1 + k;
            for j in 0..n {
                m[(row, j)] = even_monomial_derivative(spec.r0, j, k);
            }
            rhs[row] = closed_form_derivative(spec.r0, k);
        }
        for (i, &(r, a)) in spec.control_points.iter().enumerate() {
            let row = 2 + MATCH_ORDER + i;
            for j in 0..n {
                m[(row, j)] = r.powi(2 * j as i32);
            }
            rhs[row] = a;
        }
        let coeffs = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| LabError::Geometry("singular blend system".into()))?;
        Ok(Self {
            spec,
            coeffs: coeffs.iter().copied().collect(),
        })
    }

    pub fn spec(&self) -> &ProfileSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.spec.alpha
    }

    pub fn r0(&self) -> f64 {
        self.spec.r0
    }

    /// `a`, `a′`, `a″` at `r`; `a` is even.
    pub fn eval(&self, r: f64) -> ProfileValue {
        let x = r.abs();
        let sign = if r < 0.0 { -1.0 } else { 1.0 };
        let (a, da, d2a) = if x >= self.spec.r0 {
            (
                closed_form_derivative(x, 0),
                closed_form_derivative(x, 1),
                closed_form_derivative(x, 2),
            )
        } else {
            self.poly_derivatives(x)
        };
        ProfileValue {
            a,
            da: sign * da,
            d2a,
        }
    }

    /// Value and derivatives of the inner polynomial at `x ≥ 0`.
    fn poly_derivatives(&self, x: f64) -> (f64, f64, f64) {
        let s = x * x;
        let (mut p, mut dp, mut d2p) = (0.0, 0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            d2p = d2p * s + dp;
            dp = dp * s + p;
            p = p * s + c;
        }
        // p(s), p'(s), p''(s)/2 as functions of s = x²; convert to x.
        let d2p = 2.0 * d2p;
        (p, 2.0 * x * dp, 2.0 * dp + 4.0 * s * d2p)
    }

    fn poly_kth_derivative(&self, x: f64, k: usize) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c * even_monomial_derivative(x, j, k))
            .sum()
    }

    /// Check every profile constraint on a uniform grid over `[−r_max, r_max]`.
    pub fn validate(&self, r_max: f64) -> ProfileReport {
        let n = self.spec.validation_points.max(3);
        let mut max_ra = 0.0_f64;
        let mut argmax_ra = 0.0;
        let mut min_a = f64::INFINITY;
        let mut argmin_a = 0.0;
        for i in 0..n {
            let r = -r_max + 2.0 * r_max * i as f64 / (n - 1) as f64;
            let a = self.eval(r).a;
            if (r * a).abs() > max_ra {
                max_ra = (r * a).abs();
                argmax_ra = r;
            }
            if r > 0.0 && a < min_a {
                min_a = a;
                argmin_a = r;
            }
        }
        let jumps: Vec<f64> = (0..=MATCH_ORDER)
            .map(|k| {
                (self.poly_kth_derivative(self.spec.r0, k)
                    - closed_form_derivative(self.spec.r0, k))
                .abs()
            })
            .collect();
        let alpha_error = (self.eval(0.0).a - self.spec.alpha).abs();
        let smooth = jumps.iter().all(|j| *j < 1e-8);
        let mut failures = Vec::new();
        if max_ra >= 1.0 {
            failures.push(format!("|r a(r)| = {max_ra:.6} >= 1 at r = {argmax_ra:.6}"));
        }
        if min_a <= 0.0 {
            failures.push(format!("a(r) = {min_a:.3e} <= 0 at r = {argmin_a:.6}"));
        }
        if !smooth {
            failures.push(format!("derivative jumps at r0: {jumps:?}"));
        }
        if alpha_error > 1e-12 {
            failures.push(format!("a(0) differs from alpha by {alpha_error:.3e}"));
        }
        ProfileReport {
            max_ra,
            argmax_ra,
            min_a_positive: min_a,
            argmin_a,
            derivative_jumps: jumps,
            degenerate_equator: self.spec.alpha.abs() < 1e-14,
            passed: failures.is_empty(),
            failures,
        }
    }
}

/// Outcome of profile validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileReport {
    pub max_ra: f64,
    pub argmax_ra: f64,
    pub min_a_positive: f64,
    pub argmin_a: f64,
    /// `|Δ a⁽ᵏ⁾|` across `r0` for `k = 0..=4`.
    pub derivative_jumps: Vec<f64>,
    /// `a(0) = 0`: the trapped circle is degenerate (no hyperbolicity).
    pub degenerate_equator: bool,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl ProfileReport {
    pub fn summary(&self) -> String {
        if self.passed {
            format!(
                "profile ok: max|ra| = {:.4}, min a = {:.3e}",
                self.max_ra, self.min_a_positive
            )
        } else {
            format!("profile invalid: {}", self.failures.join("; "))
        }
    }
}

/// Build and validate a profile, returning the report even on failure.
pub fn validate_profile(spec: &ProfileSpec) -> Result<ProfileReport> {
    let profile = Profile::blend(spec.clone())?;
    Ok(profile.validate(spec.r0 + 6.0))
}

/// `F = 1 − r²a²` and its first two derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Warp {
    pub f: f64,
    pub df: f64,
    pub d2f: f64,
}

/// The surface of revolution restricted to `|r| ≤ r_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceGeometry {
    pub profile: Profile,
    pub r_max: f64,
}

impl SurfaceGeometry {
    pub fn new(profile: Profile, r_max: f64) -> Result<Self> {
        if !(r_max > profile.r0()) {
            return Err(LabError::Config(format!(
                "radial domain {r_max} must extend past r0 = {}",
                profile.r0()
            )));
        }
        let report = profile.validate(r_max);
        if !report.passed {
            return Err(LabError::Geometry(report.summary()));
        }
        Ok(Self { profile, r_max })
    }

    /// Default radial domain `r0 + 6`.
    pub fn with_default_domain(profile: Profile) -> Result<Self> {
        let r_max = profile.r0() + 6.0;
        Self::new(profile, r_max)
    }

    pub fn warp(&self, r: f64) -> Warp {
        let x = r.abs();
        if x >= self.profile.r0() {
            let f = 1.0 / (x * x);
            return Warp {
                f,
                df: -2.0 * f / r,
                d2f: 6.0 * f * f,
            };
        }
        let ProfileValue { a, da, d2a } = self.profile.eval(r);
        Warp {
            f: 1.0 - r * r * a * a,
            df: -2.0 * r * a * (a + r * da),
            d2f: -2.0 * a * a - 8.0 * r * a * da - 2.0 * r * r * (da * da + a * d2a),
        }
    }

    /// Volume weight `w = (1 − r²a²)^{−1/2}`.
    pub fn weight(&self, r: f64) -> f64 {
        if r.abs() >= self.profile.r0() {
            return r.abs();
        }
        1.0 / self.warp(r).f.sqrt()
    }

    /// Potential `q = (w^{1/2})″ / w^{1/2}` of the symmetrized radial operator.
    pub fn half_weight_potential(&self, r: f64) -> f64 {
        if r.abs() >= self.profile.r0() {
            return -0.25 / (r * r);
        }
        let Warp { f, df, d2f } = self.warp(r);
        let g = df / f;
        0.3125 * g * g - 0.25 * d2f / f
    }

    /// `p = ξ_r² + (1 − r²a²) ξ_θ²`.
    pub fn symbol_p(&self, pt: &PhasePoint) -> f64 {
        self.energy(&pt.to_array())
    }

    /// Export `(r, a, a′, w)` on `n` uniform points.
    pub fn write_profile_csv<W: Write>(&self, out: W, n: usize) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["r", "a", "a_prime", "w"])?;
        for i in 0..n {
            let r = -self.r_max + 2.0 * self.r_max * i as f64 / (n.max(2) - 1) as f64;
            let v = self.profile.eval(r);
            wtr.serialize((r, v.a, v.da, self.weight(r)))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl Hamiltonian for SurfaceGeometry {
    fn energy(&self, z: &[f64; 4]) -> f64 {
        z[2] * z[2] + self.warp(z[0]).f * z[3] * z[3]
    }

    fn vector_field(&self, z: &[f64; 4]) -> [f64; 4] {
        let w = self.warp(z[0]);
        [
            2.0 * z[2],
            2.0 * w.f * z[3],
            -w.df * z[3] * z[3],
            0.0,
        ]
    }

    fn jacobian(&self, z: &[f64; 4]) -> [[f64; 4]; 4] {
        let w = self.warp(z[0]);
        let xi = z[3];
        [
            [0.0, 0.0, 2.0, 0.0],
            [2.0 * w.df * xi, 0.0, 0.0, 2.0 * w.f],
            [-w.d2f * xi * xi, 0.0, 0.0, -2.0 * w.df * xi],
            [0.0; 4],
        ]
    }

    fn distance(&self, a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let dth = angle_diff(a[1], b[1]);
        ((a[0] - b[0]).powi(2) + dth * dth + (a[2] - b[2]).powi(2) + (a[3] - b[3]).powi(2)).sqrt()
    }
}

/// Which exactly solvable operator the flat model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelOperator {
    /// `h D_{x₁}`, symbol `ξ₁`.
    Transport,
    /// `−h²Δ`, symbol `|ξ|²`.
    Laplacian,
}

/// Flat periodic box `Π [−L_k/2, L_k/2)` in dimension 1 or 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub dim: usize,
    pub lengths: Vec<f64>,
    pub operator: ModelOperator,
}

impl ModelGeometry {
    pub fn new(lengths: Vec<f64>, operator: ModelOperator) -> Result<Self> {
        if lengths.is_empty() || lengths.len() > 2 {
            return Err(LabError::Config("model dimension must be 1 or 2".into()));
        }
        if lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(LabError::Config("model box lengths must be positive".into()));
        }
        Ok(Self {
            dim: lengths.len(),
            lengths,
            operator,
        })
    }

    pub fn transport(lengths: Vec<f64>) -> Result<Self> {
        Self::new(lengths, ModelOperator::Transport)
    }

    pub fn symbol_p(&self, pt: &PhasePoint) -> f64 {
        self.energy(&pt.to_array())
    }

    /// Symbol evaluated at a frequency vector.
    pub fn symbol_at(&self, xi: &[f64]) -> f64 {
        match self.operator {
            ModelOperator::Transport => xi[0],
            ModelOperator::Laplacian => xi.iter().map(|x| x * x).sum(),
        }
    }
}

impl Hamiltonian for ModelGeometry {
    fn energy(&self, z: &[f64; 4]) -> f64 {
        self.symbol_at(&z[2..2 + self.dim])
    }

    fn vector_field(&self, z: &[f64; 4]) -> [f64; 4] {
        match self.operator {
            ModelOperator::Transport => [1.0, 0.0, 0.0, 0.0],
            ModelOperator::Laplacian => {
                let mut v = [2.0 * z[2], 2.0 * z[3], 0.0, 0.0];
                if self.dim == 1 {
                    v[1] = 0.0;
                }
                v
            }
        }
    }

    fn jacobian(&self, _z: &[f64; 4]) -> [[f64; 4]; 4] {
        let mut j = [[0.0; 4]; 4];
        if self.operator == ModelOperator::Laplacian {
            j[0][2] = 2.0;
            if self.dim == 2 {
                j[1][3] = 2.0;
            }
        }
        j
    }

    fn distance(&self, a: &[f64; 4], b: &[f64; 4]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn default_geometry() -> SurfaceGeometry {
        SurfaceGeometry::with_default_domain(Profile::new(ProfileSpec::default()).unwrap())
            .unwrap()
    }

    #[test]
    fn closed_form_value_at_two() {
        let p = Profile::new(ProfileSpec::default()).unwrap();
        let v = p.eval(2.0);
        assert_abs_diff_eq!(v.a, 3f64.sqrt() / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(2.0 * v.a, 3f64.sqrt() / 2.0, epsilon = 1e-15);
        assert!(2.0 * v.a < 1.0);
    }

    #[test]
    fn value_at_origin_is_alpha() {
        let p = Profile::new(ProfileSpec::default()).unwrap();
        assert_eq!(p.eval(0.0).a, 0.5);
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        // Independent oracle: central differences of the closed form itself.
        let a = |r: f64| (r * r - 1.0).sqrt() / (r * r);
        let r = 2.3;
        let d = 1e-4;
        let fd1 = (a(r + d) - a(r - d)) / (2.0 * d);
        let fd2 = (a(r + d) - 2.0 * a(r) + a(r - d)) / (d * d);
        assert_abs_diff_eq!(closed_form_derivative(r, 1), fd1, epsilon = 1e-8);
        assert_abs_diff_eq!(closed_form_derivative(r, 2), fd2, epsilon = 1e-6);
        let d = 1e-3;
        let fd3 = (a(r + 2.0 * d) - 2.0 * a(r + d) + 2.0 * a(r - d) - a(r - 2.0 * d))
            / (2.0 * d * d * d);
        let fd4 = (a(r + 2.0 * d) - 4.0 * a(r + d) + 6.0 * a(r) - 4.0 * a(r - d)
            + a(r - 2.0 * d))
            / d.powi(4);
        assert_abs_diff_eq!(closed_form_derivative(r, 3), fd3, epsilon = 1e-4);
        assert_abs_diff_eq!(closed_form_derivative(r, 4), fd4, epsilon = 1e-2);
    }

    #[test]
    fn eval_derivative_consistent_with_finite_differences() {
        let p = Profile::new(ProfileSpec::default()).unwrap();
        let d = 1e-5;
        for &r in &[-3.0, -1.2, -0.4, 0.0, 0.3, 0.9, 1.49, 1.51, 2.5] {
            let fd = (p.eval(r + d).a - p.eval(r - d).a) / (2.0 * d);
            assert_abs_diff_eq!(p.eval(r).da, fd, epsilon = 1e-6);
            let fd2 = (p.eval(r + d).da - p.eval(r - d).da) / (2.0 * d);
            assert_abs_diff_eq!(p.eval(r).d2a, fd2, epsilon = 1e-5);
        }
    }

    #[test]
    fn default_blend_passes_validation() {
        let report = validate_profile(&ProfileSpec::default()).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert!(!report.degenerate_equator);
        assert!(report.max_ra < 1.0);
        assert!(report.derivative_jumps.iter().all(|j| *j < 1e-8));
    }

    #[test]
    fn forced_large_value_fails_near_one() {
        let spec = ProfileSpec {
            control_points: vec![(1.0, 2.0)],
            ..ProfileSpec::default()
        };
        let report = validate_profile(&spec).unwrap();
        assert!(!report.passed);
        assert!(report.max_ra >= 1.0);
        assert!((report.argmax_ra.abs() - 1.0).abs() < 0.3);
        assert!(Profile::new(spec).is_err());
    }

    #[test]
    fn zero_alpha_is_degenerate_but_valid() {
        let spec = ProfileSpec {
            alpha: 0.0,
            ..ProfileSpec::default()
        };
        let report = validate_profile(&spec).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert!(report.degenerate_equator);
    }

    #[test]
    fn other_alphas_validate() {
        for alpha in [0.25, 0.75] {
            let spec = ProfileSpec {
                alpha,
                ..ProfileSpec::default()
            };
            assert!(validate_profile(&spec).unwrap().passed);
        }
    }

    #[test]
    fn weight_is_abs_r_outside_junction() {
        let g = default_geometry();
        for r in [1.5, 2.0, -3.0, 7.0] {
            assert_abs_diff_eq!(g.weight(r), r.abs(), epsilon = 1e-14);
            let w = g.warp(r);
            assert_abs_diff_eq!(w.f, 1.0 / (r * r), epsilon = 1e-15);
        }
        for i in 0..200 {
            let r = -7.5 + 15.0 * i as f64 / 199.0;
            assert!(g.weight(r) >= 1.0 - 1e-15);
        }
    }

    #[test]
    fn warp_derivatives_match_finite_differences() {
        let g = default_geometry();
        let d = 1e-5;
        for &r in &[-1.0, -0.2, 0.0, 0.7, 1.3, 2.0] {
            let fd1 = (g.warp(r + d).f - g.warp(r - d).f) / (2.0 * d);
            let fd2 = (g.warp(r + d).df - g.warp(r - d).df) / (2.0 * d);
            assert_abs_diff_eq!(g.warp(r).df, fd1, epsilon = 1e-7);
            assert_abs_diff_eq!(g.warp(r).d2f, fd2, epsilon = 1e-6);
        }
    }

    #[test]
    fn half_weight_potential_matches_finite_differences() {
        let g = default_geometry();
        let s = |r: f64| g.weight(r).sqrt();
        let d = 1e-4;
        for &r in &[-0.8, 0.1, 0.6, 1.2, 2.5] {
            let fd = (s(r + d) - 2.0 * s(r) + s(r - d)) / (d * d) / s(r);
            assert_abs_diff_eq!(g.half_weight_potential(r), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn symbol_examples() {
        let g = default_geometry();
        assert_eq!(g.symbol_p(&PhasePoint::new(0.0, 0.0, 0.0, 1.0)), 1.0);
        assert_eq!(g.symbol_p(&PhasePoint::new(0.7, 2.0, 0.3, 0.0)), 0.09);
        let a1 = g.profile.eval(1.0).a;
        assert_abs_diff_eq!(
            g.symbol_p(&PhasePoint::new(1.0, 0.0, a1, 1.0)),
            1.0,
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn symbol_invariant_under_rotation_and_reflection(
            r in -7.0f64..7.0, th in 0.0f64..std::f64::consts::TAU, dth in -10.0f64..10.0,
            xr in -2.0f64..2.0, xt in -2.0f64..2.0)
        {
            let g = default_geometry();
            let p0 = g.symbol_p(&PhasePoint::new(r, th, xr, xt));
            let p1 = g.symbol_p(&PhasePoint::new(r, th + dth, xr, xt));
            let p2 = g.symbol_p(&PhasePoint::new(r, th, -xr, -xt));
            prop_assert!((p0 - p1).abs() <= 1e-14 * (1.0 + p0.abs()));
            prop_assert!((p0 - p2).abs() <= 1e-14 * (1.0 + p0.abs()));
        }

        #[test]
        fn profile_constraints_hold_pointwise(r in -7.5f64..7.5) {
            let g = default_geometry();
            let a = g.profile.eval(r).a;
            prop_assert!((r * a).abs() < 1.0);
            if r > 0.0 { prop_assert!(a > 0.0); }
        }

        #[test]
        fn angle_reduction_stays_in_range(th in -100.0f64..100.0) {
            let p = PhasePoint::new(0.0, th, 0.0, 1.0).reduced_angle();
            prop_assert!(p.q[1] >= 0.0 && p.q[1] < 2.0 * PI);
            prop_assert!(angle_diff(p.q[1], th).abs() < 1e-9);
        }
    }
}

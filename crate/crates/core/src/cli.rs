//! Experiment configuration, run directories and the command set behind the
//! `beamlab` binary.
//!
//! A run reads one TOML file (every section optional), applies command line
//! overrides, validates everything that can be checked before any numerics,
//! and writes its artifacts into `<output>/<timestamp>-<command>/` next to the
//! resolved configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::beam::{
    localization_report, long_beam, model_beam, short_beam, witness_lower_bound, BeamConfig, ModelBeamConfig,
    SurfaceSetup,
};
use crate::flow::{
    build_adapted_metric, check_adapted, check_tube, choose_horizon, compute_gamma, integrate_flow, lyapunov_max,
    Branch, DEFAULT_STEP,
};
use crate::geometry::{PhasePoint, Profile, ProfileReport, ProfileSpec, SurfaceGeometry};
use crate::propagate::{ParamSpec, Params, PropagatorConfig};
use crate::study::{direct_resolvent_norm, run_pipeline, scaling_study, Cutoffs, StudyConfig};
use crate::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Validate,
    Flow,
    Lyapunov,
    BeamModel,
    BeamShort,
    BeamLong,
    Quasimode,
    Resolvent,
    Study,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Flow => "flow",
            Command::Lyapunov => "lyapunov",
            Command::BeamModel => "beam-model",
            Command::BeamShort => "beam-short",
            Command::BeamLong => "beam-long",
            Command::Quasimode => "quasimode",
            Command::Resolvent => "resolvent",
            Command::Study => "study",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub profile: ProfileSpec,
    /// Radial half-length of the computational surface.
    pub r_max: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            profile: ProfileSpec::default(),
            r_max: 9.5,
        }
    }
}

/// Controls of the classical checks run by `flow` and `lyapunov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub step: f64,
    /// `flow` samples `γ` and the trapped orbit over `|t| ≤ span`.
    pub span: f64,
    pub lyapunov_horizon: f64,
    /// `λ₁ = lambda1_factor·λ̂`, `λ₂ = lambda2_factor·λ̂`.
    pub lambda1_factor: f64,
    pub lambda2_factor: f64,
    pub horizon_start: f64,
    pub horizon_cap: f64,
    pub horizon_tolerance: f64,
    pub step_time: f64,
    /// Sample times are drawn from `[sample_from, 0]`.
    pub sample_from: f64,
    pub adapted_samples: usize,
    pub tube_samples: usize,
    pub tube_epsilon: f64,
    /// Dimension of the flat model used by `beam-model`.
    pub model_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            span: 30.0,
            lyapunov_horizon: 20.0,
            lambda1_factor: 1.1,
            lambda2_factor: 1.2,
            horizon_start: 2.5,
            horizon_cap: 40.0,
            horizon_tolerance: 0.01,
            step_time: 1.0,
            sample_from: -15.0,
            adapted_samples: 50,
            tube_samples: 100,
            tube_epsilon: 1e-3,
            model_dim: 2,
        }
    }
}

/// Targets checked by `study --assert`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssertConfig {
    pub slope_tolerance: f64,
    /// Allowed relative shortfall of the direct norm below the certificate ratio.
    pub direct_shortfall: f64,
    pub validation_slack: f64,
}

impl Default for AssertConfig {
    fn default() -> Self {
        Self {
            slope_tolerance: 0.15,
            direct_shortfall: 0.01,
            validation_slack: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub geometry: GeometryConfig,
    pub params: ParamSpec,
    pub h_list: Vec<f64>,
    pub propagator: PropagatorConfig,
    pub beam: BeamConfig,
    pub model: ModelBeamConfig,
    pub flow: FlowConfig,
    pub study: StudyConfig,
    pub assert: AssertConfig,
    pub output: PathBuf,
    pub seed: u64,
    /// Worker threads; `0` uses every core.
    pub threads: usize,
    /// Write raw field dumps next to the JSON reports.
    pub dump_fields: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            geometry: GeometryConfig::default(),
            params: ParamSpec::default(),
            h_list: vec![0.1, 0.07, 0.05, 0.035, 0.025],
            propagator: PropagatorConfig::default(),
            beam: BeamConfig::default(),
            model: ModelBeamConfig::default(),
            flow: FlowConfig::default(),
            study: StudyConfig::default(),
            assert: AssertConfig::default(),
            output: PathBuf::from("runs"),
            seed: 7,
            threads: 0,
            dump_fields: false,
        }
    }
}

/// Outcome of `validate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Validation {
    pub profile: ProfileReport,
    pub lambda_max: f64,
    pub lambda_beta: f64,
    pub two_rho: f64,
    pub params: Vec<Params>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Serde(e.to_string()))
    }

    /// Copy the top-level seed into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.study.resolvent.seed = seed;
        self
    }

    pub fn surface(&self) -> Result<SurfaceGeometry> {
        SurfaceGeometry::new(Profile::new(self.geometry.profile.clone())?, self.geometry.r_max)
    }

    /// On the trapped circle the linearized flow grows at exactly `2a(0)`.
    pub fn lambda_max(&self) -> f64 {
        2.0 * self.geometry.profile.alpha
    }

    pub fn resolve(&self, h: f64) -> Result<Params> {
        Params::resolve(&self.params, self.lambda_max(), h)
    }

    pub fn validate(&self) -> Result<Validation> {
        let geom = self.surface()?;
        if self.h_list.is_empty() {
            return Err(LabError::Config("h_list is empty".into()));
        }
        let mut sorted = self.h_list.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::Config("h_list has repeated values".into()));
        }
        let params = self.h_list.iter().map(|&h| self.resolve(h)).collect::<Result<Vec<_>>>()?;
        Ok(Validation {
            profile: geom.profile.validate(geom.r_max),
            lambda_max: self.lambda_max(),
            lambda_beta: self.params.lambda * self.params.beta,
            two_rho: 2.0 * self.params.rho,
            params,
        })
    }
}

/// A timestamped artifact directory with its log.
pub struct RunDir {
    pub path: PathBuf,
    log: fs::File,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path, command: Command, cfg: &ExperimentConfig) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut path = root.join(format!("{stamp}-{}", command.name()));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{stamp}-{}-{k}", command.name()));
            k += 1;
        }
        fs::create_dir_all(&path)?;
        fs::write(path.join("config.toml"), cfg.to_toml()?)?;
        let log = fs::File::create(path.join("run.log"))?;
        Ok(Self {
            path,
            log,
            started: Instant::now(),
        })
    }

    pub fn log(&mut self, stage: &str, message: impl AsRef<str>) -> Result<()> {
        let line = format!("[{:9.3}s] {stage}: {}", self.started.elapsed().as_secs_f64(), message.as_ref());
        log::info!("{line}");
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        fs::write(self.path.join(name), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }

    pub fn create_file(&self, name: &str) -> Result<fs::File> {
        Ok(fs::File::create(self.path.join(name))?)
    }
}

/// What a command left behind.
#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    /// Failed assertions; only `study --assert` fills this.
    pub failures: Vec<String>,
    pub summary: String,
}

/// Run one command. `inputs` are the run directories read by `report`.
pub fn run(command: Command, cfg: &ExperimentConfig, assert: bool, inputs: &[PathBuf]) -> Result<Outcome> {
    let validation = cfg.validate()?;
    let mut dir = RunDir::create(&cfg.output, command, cfg)?;
    dir.log("config", format!("schema {} seed {} h {:?}", cfg.schema_version, cfg.seed, cfg.h_list))?;
    let mut failures = Vec::new();
    let summary = match command {
        Command::Validate => validate_cmd(&mut dir, &validation)?,
        Command::Flow => flow_cmd(&mut dir, cfg)?,
        Command::Lyapunov => lyapunov_cmd(&mut dir, cfg)?,
        Command::BeamModel => beam_model_cmd(&mut dir, cfg, &validation.params)?,
        Command::BeamShort => beam_short_cmd(&mut dir, cfg, &validation.params)?,
        Command::BeamLong => beam_long_cmd(&mut dir, cfg, &validation.params)?,
        Command::Quasimode => quasimode_cmd(&mut dir, cfg)?,
        Command::Resolvent => resolvent_cmd(&mut dir, cfg, &validation.params)?,
        Command::Study => study_cmd(&mut dir, cfg, assert, &mut failures)?,
        Command::Report => report_cmd(&mut dir, inputs)?,
    };
    fs::write(dir.path.join("summary.txt"), &summary)?;
    dir.log("done", format!("{} failed assertion(s)", failures.len()))?;
    Ok(Outcome {
        dir: dir.path.clone(),
        failures,
        summary,
    })
}

fn validate_cmd(dir: &mut RunDir, v: &Validation) -> Result<String> {
    dir.json("validation.json", v)?;
    let mut s = format!(
        "profile: {}\nλ_max = {}  λβ = {:.4} < 2ρ = {:.4}\n",
        v.profile.summary(),
        v.lambda_max,
        v.lambda_beta,
        v.two_rho
    );
    for p in &v.params {
        s += &format!("h = {:<8} N₀ = {}  t₀ = {:.6}  requested {:.4}\n", p.h, p.n0, p.t0, p.t0_requested);
    }
    Ok(s)
}

#[derive(Debug, Serialize)]
struct FlowSummary {
    span: f64,
    step: f64,
    energy_drift: f64,
    xi_theta_drift: f64,
    trapped_orbit_error: f64,
    escaped_forward: bool,
    converged_backward: bool,
}

fn flow_cmd(dir: &mut RunDir, cfg: &ExperimentConfig) -> Result<String> {
    let geom = cfg.surface()?;
    let fc = &cfg.flow;
    let traj = compute_gamma(&geom, -fc.span, fc.span, fc.step)?;
    let xi_theta_drift = traj.points.iter().map(|z| (z[3] - 1.0).abs()).fold(0.0, f64::max);
    let mut trapped_orbit_error: f64 = 0.0;
    for t in [-fc.span, -0.5 * fc.span, 0.5 * fc.span, fc.span] {
        let out = integrate_flow(&geom, PhasePoint::new(0.0, 0.0, 0.0, 1.0), t, fc.step)?.point;
        let want = [0.0, 2.0 * t, 0.0, 1.0];
        let got = out.to_array();
        trapped_orbit_error = (0..4).map(|i| (got[i] - want[i]).abs()).fold(trapped_orbit_error, f64::max);
    }
    let summary = FlowSummary {
        span: fc.span,
        step: fc.step,
        energy_drift: traj.energy_drift(&geom),
        xi_theta_drift,
        trapped_orbit_error,
        escaped_forward: traj.escaped_forward,
        converged_backward: traj.converged_backward,
    };
    traj.write_csv(&geom, dir.create_file("gamma.csv")?, 100)?;
    geom.write_profile_csv(dir.create_file("profile.csv")?, 2000)?;
    dir.json("flow.json", &summary)?;
    Ok(format!(
        "|p − 1| ≤ {:.2e}, ξ_θ drift {:.2e}, trapped orbit error {:.2e} over |t| ≤ {}\n",
        summary.energy_drift, summary.xi_theta_drift, summary.trapped_orbit_error, fc.span
    ))
}

/// Rate estimate plus the adapted-metric and tube checks at `λ₁, λ₂` scaled from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LyapunovSummary {
    pub alpha: f64,
    pub estimate: f64,
    pub exact: f64,
    pub lyapunov: crate::flow::LyapunovEstimate,
    pub lambda1: f64,
    pub lambda2: f64,
    pub horizon_plus: crate::flow::HorizonChoice,
    pub horizon_minus: crate::flow::HorizonChoice,
    pub adapted: crate::flow::AdaptedReport,
    pub tube: crate::flow::TubeReport,
}

pub fn lyapunov_summary(geom: &SurfaceGeometry, fc: &FlowConfig, seed: u64) -> Result<LyapunovSummary> {
    let reach = fc.sample_from - 2.0 * fc.step_time - fc.horizon_cap.max(fc.lyapunov_horizon) - 1.0;
    let traj = compute_gamma(geom, reach, fc.step_time + 1.0, fc.step)?;
    let est = lyapunov_max(geom, &traj, fc.lyapunov_horizon)?;
    let lambda1 = fc.lambda1_factor * est.estimate;
    let lambda2 = fc.lambda2_factor * est.estimate;
    let choose = |b| choose_horizon(geom, &traj, b, lambda1, fc.horizon_start, fc.horizon_cap, fc.horizon_tolerance);
    let (horizon_plus, horizon_minus) = (choose(Branch::Plus), choose(Branch::Minus));
    let frame = build_adapted_metric(geom, &traj, lambda1, horizon_plus.horizon, horizon_minus.horizon, &[0.0])?;
    let adapted = check_adapted(geom, &traj, &frame, fc.step_time, fc.sample_from, fc.adapted_samples, seed);
    let tube = check_tube(
        geom,
        &traj,
        &frame,
        fc.step_time,
        fc.tube_epsilon,
        lambda2,
        fc.sample_from,
        fc.tube_samples,
        seed.wrapping_add(1),
    );
    Ok(LyapunovSummary {
        alpha: geom.profile.alpha(),
        estimate: est.estimate,
        exact: 2.0 * geom.profile.alpha(),
        lyapunov: est,
        lambda1,
        lambda2,
        horizon_plus,
        horizon_minus,
        adapted,
        tube,
    })
}

fn lyapunov_cmd(dir: &mut RunDir, cfg: &ExperimentConfig) -> Result<String> {
    let s = lyapunov_summary(&cfg.surface()?, &cfg.flow, cfg.seed)?;
    dir.json("lyapunov.json", &s)?;
    Ok(format!(
        "λ̂ = {:.6} (2α = {})  adapted margin {:.3e} ({})  tube growth {:.3} ≤ {:.3} ({})\n",
        s.estimate,
        s.exact,
        s.adapted.min_margin,
        pass(s.adapted.passed),
        s.tube.max_growth,
        s.tube.growth_bound,
        pass(s.tube.passed)
    ))
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn beam_model_cmd(dir: &mut RunDir, cfg: &ExperimentConfig, params: &[Params]) -> Result<String> {
    let reports = params
        .par_iter()
        .map(|p| {
            model_beam(p.h, p.t0, p.energy, p.nu, cfg.flow.model_dim, &cfg.beam, &cfg.model).map(|m| m.report)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::new();
    for r in &reports {
        dir.log("beam-model", format!("h {} identity residual {:.3e}", r.h, r.identity_residual))?;
        s += &format!(
            "h = {:<8} identity {:.2e}  origin {:.2e}  ‖u‖ {:.4}  ‖f‖ {:.4}\n",
            r.h, r.identity_residual, r.origin_error, r.u_norm, r.f_norm
        );
    }
    dir.json("beam_model.json", &reports)?;
    Ok(s)
}

fn setups(cfg: &ExperimentConfig, params: &[Params]) -> Result<Vec<SurfaceSetup>> {
    let geom = cfg.surface()?;
    params.par_iter().map(|p| SurfaceSetup::new(&geom, p, &cfg.propagator)).collect()
}

fn beam_short_cmd(dir: &mut RunDir, cfg: &ExperimentConfig, params: &[Params]) -> Result<String> {
    let reports = setups(cfg, params)?
        .par_iter()
        .map(|s| short_beam(s, &cfg.beam).map(|b| b.report))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::new();
    for r in &reports {
        dir.log(
            "beam-short",
            format!("h {} identity {:.3e} (budget {:.1e})", r.h, r.identity_residual, cfg.beam.identity_budget),
        )?;
        s += &format!(
            "h = {:<8} identity {:.2e}  tube mass u {:.4} f {:.4}  witness {:.4}\n",
            r.h, r.identity_residual, r.u0_tube_mass, r.f0_tube_mass, r.witness
        );
    }
    dir.json("beam_short.json", &reports)?;
    Ok(s)
}

#[derive(Debug, Serialize)]
struct LongRow {
    bundle: crate::beam::BundleSummary,
    localization: crate::beam::LocalizationReport,
    witness: crate::beam::WitnessReport,
}

fn beam_long_cmd(dir: &mut RunDir, cfg: &ExperimentConfig, params: &[Params]) -> Result<String> {
    let rows = setups(cfg, params)?
        .par_iter()
        .map(|s| {
            let sb = short_beam(s, &cfg.beam)?;
            let b = long_beam(s, &sb, &cfg.beam)?;
            if cfg.dump_fields {
                b.assembled.dump(&dir.path.join(format!("u_h{}.bin", s.h())))?;
                b.f_minus.dump(&dir.path.join(format!("f_minus_h{}.bin", s.h())))?;
            }
            Ok(LongRow {
                localization: localization_report(s, &b, &cfg.beam)?,
                witness: witness_lower_bound(s, &b, &cfg.beam)?,
                bundle: b.summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wtr = csv::Writer::from_writer(dir.create_file("steps.csv")?);
    wtr.write_record(["h", "j", "u_norm", "f_norm", "expected_u_norm", "residual"])?;
    let mut s = String::new();
    for r in &rows {
        let b = &r.bundle;
        for st in &b.steps {
            wtr.serialize((b.h, st.j, st.u_norm, st.f_norm, st.expected_u_norm, st.residual))?;
        }
        dir.log("beam-long", format!("h {} max residual {:.3e} (budget {:.1e})", b.h, b.max_residual, 1e-4 * b.h))?;
        s += &format!(
            "h = {:<8} ‖u‖ {:.4}  ‖f₊‖ {:.4}  ‖f₋‖ {:.4e}  residual {:.2e}  mass {:.4}  witness {:.4}\n",
            b.h,
            b.u_norm,
            b.f_plus_norm,
            b.f_minus_norm,
            b.max_residual,
            r.localization.min_mass,
            r.witness.value
        );
    }
    wtr.flush()?;
    dir.json("beam_long.json", &rows)?;
    Ok(s)
}

fn quasimode_cmd(dir: &mut RunDir, cfg: &ExperimentConfig) -> Result<String> {
    let geom = cfg.surface()?;
    let mut study = cfg.study.clone();
    study.direct_norm = false;
    let reports = cfg
        .h_list
        .par_iter()
        .map(|&h| run_pipeline(&geom, &cfg.params, cfg.lambda_max(), h, &cfg.propagator, &cfg.beam, &study, false))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::new();
    for r in &reports {
        match (&r.quasimode, &r.quasimode_error) {
            (Some(q), _) => {
                dir.log("quasimode", format!("h {} identity defect {:.3e}", q.h, q.identity_defect))?;
                s += &format!(
                    "h = {:<8} ratio {:.4e}  ‖χ₁u‖ {:.4}  ‖f̃‖ {:.4e}  defect {:.2e}\n",
                    q.h, q.ratio, q.chi1_u_norm, q.f_norm, q.identity_defect
                );
            }
            (None, e) => {
                let e = e.clone().unwrap_or_default();
                dir.log("quasimode", format!("h {} failed: {e}", r.params.h))?;
                s += &format!("h = {:<8} failed: {e}\n", r.params.h);
            }
        }
    }
    dir.json("quasimode.json", &reports)?;
    Ok(s)
}

fn resolvent_cmd(dir: &mut RunDir, cfg: &ExperimentConfig, params: &[Params]) -> Result<String> {
    let rows = setups(cfg, params)?
        .par_iter()
        .map(|s| {
            let cuts = Cutoffs::new(s, &cfg.study)?;
            let shift = Complex64::new(s.params.energy, 1.0);
            Ok((
                direct_resolvent_norm(s, &cuts, None, &cfg.study.resolvent)?,
                direct_resolvent_norm(s, &cuts, Some(shift), &cfg.study.resolvent)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wtr = csv::Writer::from_writer(dir.create_file("modes.csv")?);
    wtr.write_record(["h", "m", "norm"])?;
    let mut s = String::new();
    for (r, v) in &rows {
        for (m, n) in &r.modes {
            wtr.serialize((r.h, m, n))?;
        }
        dir.log("resolvent", format!("h {} unconverged modes {:?}", r.h, r.unconverged))?;
        s += &format!(
            "h = {:<8} norm {:.4e} at m = {} (|hm − √E|/√h = {:.2})  validation {:.6}\n",
            r.h, r.value, r.best_mode, r.mode_offset, v.value
        );
    }
    wtr.flush()?;
    dir.json("resolvent.json", &rows)?;
    Ok(s)
}

const PLOT_STUB: &str = "set logscale xy\nset xlabel 'h'\nplot 'f_minus.dat' w lp t '|f_-|', \
'ratio.dat' w lp t 'certificate ratio', 'direct.dat' w lp t 'direct norm'\n";

fn study_cmd(dir: &mut RunDir, cfg: &ExperimentConfig, assert: bool, failures: &mut Vec<String>) -> Result<String> {
    let geom = cfg.surface()?;
    let res = scaling_study(
        &geom,
        &cfg.params,
        cfg.lambda_max(),
        &cfg.h_list,
        &cfg.propagator,
        &cfg.beam,
        &cfg.study,
    )?;
    res.write_all(&dir.path)?;
    fs::write(dir.path.join("plot.gp"), PLOT_STUB)?;
    let tol = cfg.assert.slope_tolerance;
    let mut s = format!(
        "‖f₋‖ slope {:.4} ± {:.4} (target {:.4})\n",
        res.f_minus_slope.slope, res.f_minus_slope.stderr, res.f_minus_target
    );
    if (res.f_minus_slope.slope - res.f_minus_target).abs() > tol {
        failures.push(format!("‖f₋‖ slope {:.4} outside {:.4} ± {tol}", res.f_minus_slope.slope, res.f_minus_target));
    }
    match &res.ratio_slope {
        Some(r) => {
            s += &format!("ratio slope {:.4} ± {:.4} (target {:.4})\n", r.slope, r.stderr, res.ratio_target);
            if (r.slope - res.ratio_target).abs() > tol {
                failures.push(format!("ratio slope {:.4} outside {:.4} ± {tol}", r.slope, res.ratio_target));
            }
        }
        None => failures.push("certificate ratio unavailable at too many h".into()),
    }
    for (row, rep) in res.rows.iter().zip(&res.reports) {
        if let (Some(ratio), Some(direct)) = (row.ratio, row.direct_norm) {
            if direct < ratio * (1.0 - cfg.assert.direct_shortfall) {
                failures.push(format!("h {}: direct norm {direct:.4e} below ratio {ratio:.4e}", row.h));
            }
        }
        if let Some(v) = &rep.validation {
            if v.value > 1.0 + cfg.assert.validation_slack {
                failures.push(format!("h {}: validation norm {:.6} above 1", row.h, v.value));
            }
        }
        s += &format!(
            "h = {:<8} ‖f₋‖ {:.4e}  ratio {}  direct {}\n",
            row.h,
            row.f_minus_norm,
            opt(row.ratio),
            opt(row.direct_norm)
        );
    }
    for f in failures.iter() {
        dir.log("assert", f)?;
    }
    if !assert {
        failures.clear();
    }
    Ok(s)
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4e}"))
}

fn report_cmd(dir: &mut RunDir, inputs: &[PathBuf]) -> Result<String> {
    if inputs.is_empty() {
        return Err(LabError::Config("report needs at least one run directory".into()));
    }
    let mut out = String::new();
    for input in inputs {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let value: Value = serde_json::from_str(&fs::read_to_string(&f)?)?;
            out += &format!("== {}\n", f.display());
            out += &summary_table(&value);
        }
    }
    dir.log("report", format!("{} input(s)", inputs.len()))?;
    Ok(out)
}

/// Flatten scalar leaves into `path  value` lines, skipping long arrays.
pub fn summary_table(value: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", value, 0, &mut rows);
    let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("  {k:<width$}  {v}\n"))
        .collect()
}

fn flatten(prefix: &str, value: &Value, depth: usize, rows: &mut Vec<(String, String)>) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) if depth < 4 => {
            for (k, v) in map {
                flatten(&key(k), v, depth + 1, rows);
            }
        }
        Value::Array(items) if depth < 4 && items.len() <= 8 && items.iter().any(|v| v.is_object()) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&key(&i.to_string()), v, depth + 1, rows);
            }
        }
        Value::Number(n) => rows.push((prefix.to_string(), format_number(n.as_f64().unwrap_or(f64::NAN)))),
        Value::Bool(b) => rows.push((prefix.to_string(), b.to_string())),
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
        _ => {}
    }
}

fn format_number(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e9 {
        format!("{x}")
    } else if (1e-3..1e4).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.4e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nh_list = [0.05]\n[params]\nnu = 0.25\n").unwrap();
        assert_eq!(cfg.h_list, vec![0.05]);
        assert_eq!(cfg.params.nu, 0.25);
        assert_eq!(cfg.params.beta, ParamSpec::default().beta);
    }

    #[test]
    fn wrong_schema_and_unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_toml("schema_version = 2\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = ExperimentConfig::from_toml("schema_version = 1\nbogus = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn validation_reports_integer_steps_and_tight_rates() {
        let v = ExperimentConfig::default().validate().unwrap();
        assert!(v.lambda_beta < v.two_rho);
        assert_eq!(v.params.len(), 5);
        for p in &v.params {
            assert!(p.n0 >= 1);
            assert!((p.t0 * p.n0 as f64 - 0.5 * p.beta * (1.0 / p.h).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.params.beta = 1.2;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn summary_table_flattens_scalars() {
        let v: Value = serde_json::json!({"a": 1.5, "b": {"c": true, "d": [1, 2, 3]}, "e": "x"});
        let t = summary_table(&v);
        assert!(t.contains("a") && t.contains("1.500000"));
        assert!(t.contains("b.c") && t.contains("true"));
        assert!(!t.contains("b.d"));
    }
}

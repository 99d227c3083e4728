//! Scenario configuration: embedded defaults, file merge, `--set` overrides,
//! and resolution into the core types.

use mscr_core::control::{
    ControllerConfig, ControllerVariant, Disturbance, JacobianMode, ReferenceSignal, SimConfig,
    SimSetup,
};
use mscr_core::elastica::{Plane, RobotParams, SolverSettings};
use mscr_core::magnetics::WorkingRange;
use mscr_core::pathfollow::{BaseState, FollowConfig, PathSpec};
use mscr_core::vision::VisionOptions;
use nalgebra::Vector3;
use serde::Deserialize;

use crate::CliError;

/// Embedded copy of the documented defaults file.
pub const DEFAULTS: &str = include_str!("../defaults.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub robot: RobotSection,
    pub magnet: MagnetSection,
    pub calibrate: CalibrateSection,
    pub fieldmap: FieldmapSection,
    pub sweep: SweepSection,
    pub jacobian: JacobianSection,
    pub controller: ControllerSection,
    pub reference: ReferenceSection,
    pub disturbance: DisturbanceSection,
    pub sim: SimSection,
    pub vision: VisionSection,
    pub track: TrackSection,
    pub path: PathSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    pub preset: String,
    pub length_m: Option<f64>,
    pub radius_m: Option<f64>,
    pub youngs_modulus_pa: Option<f64>,
    pub magnetization_a_per_m: Option<f64>,
}

impl RobotSection {
    pub fn resolve(&self) -> Result<RobotParams, CliError> {
        let mut params = match self.preset.as_str() {
            "mscr1" => RobotParams::mscr1(),
            "mscr2" => RobotParams::mscr2(),
            other => {
                return Err(CliError::config(format!(
                    "unknown robot preset {other:?}; expected \"mscr1\" or \"mscr2\""
                )))
            }
        };
        if let Some(v) = self.length_m {
            params.length = v;
        }
        if let Some(v) = self.radius_m {
            params.radius = v;
        }
        if let Some(v) = self.youngs_modulus_pa {
            params.youngs_modulus = v;
        }
        if let Some(v) = self.magnetization_a_per_m {
            params.magnetization = v;
        }
        params.validate().map_err(CliError::config)?;
        Ok(params)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetSection {
    pub moment_a_m2: f64,
    pub height_m: f64,
    pub phi_rad: f64,
    pub psi0_rad: f64,
    pub axial_m: Option<f64>,
}

impl MagnetSection {
    pub fn plane(&self) -> Plane {
        Plane { phi: self.phi_rad }
    }

    /// Magnet centre in the base frame: axial offset along the body plus the
    /// height along the in-plane direction.
    pub fn position(&self, params: &RobotParams) -> Vector3<f64> {
        let axial = self.axial_m.unwrap_or(params.length);
        Vector3::new(axial, 0.0, 0.0) + self.height_m * self.plane().o_hat()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub samples_file: String,
    pub range_min_m: f64,
    pub range_max_m: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldmapSection {
    pub start_m: f64,
    pub end_m: f64,
    pub points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub psi_start_rad: f64,
    pub psi_end_rad: f64,
    pub points: usize,
    pub refine_tol_rad: f64,
    pub heights_m: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobianSection {
    pub psi_points: usize,
    pub fd_delta_rad: f64,
    pub scan_points: usize,
    pub bisection_tol_rad: f64,
    pub heights_m: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub variant: String,
    pub k: f64,
    pub lambda: f64,
    pub psi_min_rad: f64,
    pub psi_max_rad: f64,
    pub rate_limit_rad_per_s: Option<f64>,
    pub leso_beta1: f64,
    pub leso_beta2: f64,
    pub leso_epsilon: f64,
    pub td_k1: f64,
    pub td_k2: f64,
    pub td_speed: f64,
    pub jacobian_mode: String,
    pub table_points: usize,
}

impl ControllerSection {
    pub fn resolve(&self) -> Result<(ControllerConfig, JacobianMode), CliError> {
        let variant = match self.variant.as_str() {
            "pd" => ControllerVariant::Pd,
            "qsc" => ControllerVariant::Qsc,
            "damped" => ControllerVariant::DampedQsc,
            other => {
                return Err(CliError::config(format!(
                    "unknown controller variant {other:?}; expected \"pd\", \"qsc\", or \"damped\""
                )))
            }
        };
        let mode = match self.jacobian_mode.as_str() {
            "table" => JacobianMode::Table { points: self.table_points },
            "exact" => JacobianMode::Exact,
            other => {
                return Err(CliError::config(format!(
                    "unknown jacobian mode {other:?}; expected \"table\" or \"exact\""
                )))
            }
        };
        let config = ControllerConfig {
            variant,
            k: self.k,
            lambda: self.lambda,
            psi_min: self.psi_min_rad,
            psi_max: self.psi_max_rad,
            rate_limit: self.rate_limit_rad_per_s,
            leso_beta1: self.leso_beta1,
            leso_beta2: self.leso_beta2,
            leso_epsilon: self.leso_epsilon,
            td_k1: self.td_k1,
            td_k2: self.td_k2,
            td_speed: self.td_speed,
        };
        config.validate().map_err(CliError::config)?;
        Ok((config, mode))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub kind: String,
    pub amplitude_rad: f64,
    pub period_s: f64,
}

impl ReferenceSection {
    pub fn resolve(&self) -> Result<ReferenceSignal, CliError> {
        let signal = match self.kind.as_str() {
            "step" => ReferenceSignal::Step { amplitude: self.amplitude_rad },
            "cosine" => {
                ReferenceSignal::Cosine { amplitude: self.amplitude_rad, period: self.period_s }
            }
            other => {
                return Err(CliError::config(format!(
                    "unknown reference kind {other:?}; expected \"step\" or \"cosine\""
                )))
            }
        };
        signal.validate().map_err(CliError::config)?;
        Ok(signal)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub kind: String,
    pub magnitude: f64,
    pub start_s: f64,
    pub cutoff_hz: f64,
}

impl DisturbanceSection {
    pub fn resolve(&self) -> Result<Disturbance, CliError> {
        let disturbance = match self.kind.as_str() {
            "none" => Disturbance::None,
            "step" => Disturbance::Step { magnitude: self.magnitude, start: self.start_s },
            "noise" => Disturbance::Noise {
                magnitude: self.magnitude,
                start: self.start_s,
                cutoff_hz: self.cutoff_hz,
            },
            other => {
                return Err(CliError::config(format!(
                    "unknown disturbance kind {other:?}; expected \"none\", \"step\", or \"noise\""
                )))
            }
        };
        disturbance.validate().map_err(CliError::config)?;
        Ok(disturbance)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt_s: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub measurement_noise_rad: f64,
}

impl SimSection {
    pub fn resolve(&self) -> Result<SimConfig, CliError> {
        let config = SimConfig {
            dt: self.dt_s,
            duration: self.duration_s,
            seed: self.seed,
            measurement_noise: self.measurement_noise_rad,
        };
        config.validate().map_err(CliError::config)?;
        Ok(config)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSection {
    pub linearity_threshold: f64,
    pub alpha_step_rad: f64,
    pub tip_margin_px: f64,
}

impl VisionSection {
    pub fn resolve(&self) -> VisionOptions {
        VisionOptions {
            linearity_threshold: self.linearity_threshold,
            alpha_step: self.alpha_step_rad,
            tip_margin_px: self.tip_margin_px,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSection {
    pub frames_dir: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub file: String,
    pub advance_threshold: f64,
    pub advance_tol_m: f64,
    pub advance_window: usize,
    pub k_x: f64,
    pub dt_s: f64,
    pub nu0_m: f64,
    pub nu_min_m: f64,
    pub nu_max_m: f64,
    pub base_rate_limit_m_per_s: f64,
    pub psi_rate_limit_rad_per_s: Option<f64>,
    pub psi_min_rad: f64,
    pub psi_max_rad: f64,
    pub psi0_rad: f64,
    pub step_budget: usize,
}

impl PathSection {
    pub fn base(&self) -> Result<BaseState, CliError> {
        BaseState::new(self.nu0_m, self.nu_min_m, self.nu_max_m).map_err(CliError::config)
    }

    pub fn follow_config(&self) -> Result<FollowConfig, CliError> {
        let config = FollowConfig {
            dt: self.dt_s,
            k_x: self.k_x,
            base_rate_limit: self.base_rate_limit_m_per_s,
            psi_rate_limit: self.psi_rate_limit_rad_per_s,
            psi_min: self.psi_min_rad,
            psi_max: self.psi_max_rad,
            step_budget: self.step_budget,
            advance_window: self.advance_window,
        };
        config.validate().map_err(CliError::config)?;
        Ok(config)
    }

    pub fn path_spec(&self, waypoints: Vec<Vector3<f64>>) -> Result<PathSpec, CliError> {
        let spec = PathSpec {
            waypoints,
            advance_threshold: self.advance_threshold,
            advance_tol: self.advance_tol_m,
        };
        spec.validate().map_err(CliError::config)?;
        Ok(spec)
    }
}

impl ScenarioConfig {
    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings::default()
    }

    pub fn sim_setup(&self) -> Result<SimSetup, CliError> {
        let params = self.robot.resolve()?;
        let (_, jacobian_mode) = self.controller.resolve()?;
        Ok(SimSetup {
            params,
            plane: self.magnet.plane(),
            magnet_position: self.magnet.position(&params),
            moment: self.magnet.moment_a_m2,
            psi0: self.magnet.psi0_rad,
            settings: self.solver_settings(),
            jacobian_mode,
        })
    }

    pub fn calibration_range(&self) -> Result<WorkingRange, CliError> {
        if !(self.calibrate.range_min_m > 0.0
            && self.calibrate.range_min_m < self.calibrate.range_max_m)
        {
            return Err(CliError::config(format!(
                "calibration range must satisfy 0 < min < max, got [{}, {}]",
                self.calibrate.range_min_m, self.calibrate.range_max_m
            )));
        }
        Ok(WorkingRange { min: self.calibrate.range_min_m, max: self.calibrate.range_max_m })
    }
}

/// Parse one `key=value` override into a dotted path and a TOML value.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| {
        CliError::config(format!("override {raw:?} must have the form key.path=value"))
    })?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(|seg| seg.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} has an empty segment")));
    }
    // Parse the right-hand side with TOML's own grammar; bare words that do
    // not parse (e.g. mscr2) are taken as strings.
    let value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.trim().to_owned()),
    };
    Ok((path, value))
}

fn set_path(
    table: &mut toml::Table,
    path: &[String],
    value: toml::Value,
) -> Result<(), CliError> {
    match path {
        [] => unreachable!("override paths are non-empty"),
        [last] => {
            table.insert(last.clone(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let entry = table
                .entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(inner) => set_path(inner, rest, value),
                None => Err(CliError::config(format!(
                    "override segment {head:?} does not name a table"
                ))),
            }
        }
    }
}

/// Deep merge: tables merge key by key, scalars and arrays replace.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Load the layered configuration: defaults, then the optional file, then
/// `--set` overrides in order, then the `--seed` shorthand.
pub fn load(
    file: Option<&std::path::Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<(ScenarioConfig, Vec<u8>), CliError> {
    let mut table: toml::Table =
        DEFAULTS.parse().expect("embedded defaults are valid TOML");
    let hashed_input: Vec<u8> = match file {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| {
                CliError::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::config("config file is not UTF-8".to_string()))?;
            let overlay: toml::Table = text
                .parse()
                .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
            merge(&mut table, overlay);
            bytes
        }
        None => DEFAULTS.as_bytes().to_vec(),
    };
    for raw in sets {
        let (path, value) = parse_override(raw)?;
        set_path(&mut table, &path, value)?;
    }
    if let Some(seed) = seed {
        set_path(
            &mut table,
            &["sim".to_owned(), "seed".to_owned()],
            toml::Value::Integer(seed as i64),
        )?;
    }
    let config: ScenarioConfig = table
        .try_into()
        .map_err(|e| CliError::config(format!("config validation error: {e}")))?;
    Ok((config, hashed_input))
}

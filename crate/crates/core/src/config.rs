//! Run configuration: one TOML document with an explicit schema version.
//! Every field is required; `RunConfig::default()` is the reference setup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing config field `{0}`")]
    MissingField(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleClass {
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Relative draw weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Crossroad center in world x/y.
    pub center: [f64; 2],
    /// Lane length on each side of the center, meters.
    pub arm_length: f64,
    /// Lateral offset of each lane from its road axis.
    pub lane_offset: f64,
    /// Half-size of the square conflict zone in the middle of the crossroad.
    pub junction_half_width: f64,
    pub vehicles: usize,
    /// Vehicles in the first `users` slots are users.
    pub users: usize,
    pub min_speed_kmh: f64,
    pub max_speed_kmh: f64,
    /// Frame interval T_s, seconds.
    pub frame_interval: f64,
    pub accel: f64,
    pub decel: f64,
    /// Bumper-to-bumper standstill gap.
    pub min_gap: f64,
    pub headway: f64,
    pub vehicle_classes: Vec<VehicleClass>,
    /// Building blocks occupy [inner, outer] from the center on each diagonal corner.
    pub building_inner: f64,
    pub building_outer: f64,
    pub building_height: f64,
    pub cameras: Vec<CameraConfig>,
    pub image_width: u32,
    pub image_height: u32,
    pub fov_deg: f64,
    pub antenna_above_camera: f64,
    /// Array axis rotation from the camera boresight toward camera-right.
    pub array_axis_offset_deg: f64,
    /// Horizontal width of the BS panel's radiating sector, centered on the camera boresight.
    pub sector_deg: f64,
    pub antenna_above_roof: f64,
    pub sigma_px: f64,
    pub size_jitter: f64,
    pub occlusion_threshold: f64,
    pub bsm_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    pub n_antennas: usize,
    pub n_rf: usize,
    pub noise_power: f64,
    pub spacing_ratio: f64,
    pub carrier_hz: f64,
    pub blockage_db: f64,
    /// Attenuation of paths leaving through the back of the BS panel.
    pub front_to_back_db: f64,
    pub reflection_factor: f64,
    pub max_paths: usize,
    pub amplitude_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub bsm_interval: usize,
    pub gamma2: f64,
    pub iou_threshold: f64,
    pub max_age: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamLoss {
    /// Binary cross-entropy over every sigmoid output.
    Bce,
    /// Negative log of the label entry only.
    Ce,
}

/// Scale on which gains are mapped into [0, 1] before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainScale {
    Linear,
    Db,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub experts: usize,
    /// (out_channels, kernel, stride) per CNN cell.
    pub cnn_cells: Vec<[usize; 3]>,
    pub fc_size: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub router_softmax: bool,
    pub beam_loss: BeamLoss,
    pub gain_scale: GainScale,
    pub samples: usize,
    pub valid_fraction: f64,
    /// Frames between candidate record end frames.
    pub record_stride: usize,
    /// Stop once training Top-1 reaches this value (1.0 or more disables).
    pub stop_train_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub users: Vec<usize>,
    pub bsm_intervals: Vec<usize>,
    pub sweep_period: usize,
    pub handoff_margin: f64,
    pub top_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub frames: usize,
    pub scenario: ScenarioConfig,
    pub radio: RadioConfig,
    pub sensing: SensingConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let class = |name: &str, length, width, height, weight| VehicleClass {
            name: name.into(),
            length,
            width,
            height,
            weight,
        };
        let cam = |x, y, yaw| CameraConfig {
            position: [x, y, 4.0],
            yaw_deg: yaw,
            pitch_deg: -25.0,
        };
        Self {
            center: [-150.0, 0.0],
            arm_length: 60.0,
            lane_offset: 1.75,
            junction_half_width: 3.5,
            vehicles: 30,
            users: 4,
            min_speed_kmh: 20.0,
            max_speed_kmh: 40.0,
            frame_interval: 0.02,
            accel: 2.0,
            decel: 6.0,
            min_gap: 2.0,
            headway: 1.0,
            vehicle_classes: vec![
                class("car", 4.5, 1.8, 1.5, 0.55),
                class("minivan", 5.0, 1.95, 1.9, 0.25),
                class("bus", 11.0, 2.5, 3.2, 0.1),
                class("truck", 8.0, 2.5, 3.5, 0.1),
            ],
            building_inner: 15.0,
            building_outer: 60.0,
            building_height: 20.0,
            cameras: vec![
                cam(-162.0, 12.0, 45.0),
                cam(-162.0, -12.0, -45.0),
                cam(-138.0, 12.0, 135.0),
                cam(-138.0, -12.0, -135.0),
            ],
            image_width: 1280,
            image_height: 720,
            fov_deg: 120.0,
            antenna_above_camera: 0.5,
            array_axis_offset_deg: 30.0,
            sector_deg: 120.0,
            antenna_above_roof: 0.05,
            sigma_px: 2.0,
            size_jitter: 0.05,
            occlusion_threshold: 0.9,
            bsm_jitter: 0.5,
        }
    }
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            n_antennas: 64,
            n_rf: 4,
            noise_power: 1e-10,
            spacing_ratio: 0.5,
            carrier_hz: 28e9,
            blockage_db: 30.0,
            front_to_back_db: 30.0,
            reflection_factor: 0.3,
            max_paths: 5,
            amplitude_floor: 1e-12,
        }
    }
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            grid_width: 60,
            grid_height: 40,
            t_p: 20,
            t_f: 10,
            bsm_interval: 10,
            gamma2: 3.0,
            iou_threshold: 0.3,
            max_age: 10,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 128,
            experts: 3,
            cnn_cells: vec![[4, 11, 2], [16, 7, 2], [64, 5, 1], [256, 3, 1]],
            fc_size: 128,
            gru_hidden: 256,
            gru_layers: 2,
            expert_hidden: 256,
            expert_out: 128,
            router_softmax: false,
            beam_loss: BeamLoss::Bce,
            gain_scale: GainScale::Linear,
            samples: 5000,
            valid_fraction: 0.1,
            record_stride: 5,
            stop_train_top1: 2.0,
        }
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            users: vec![1, 2, 3, 4],
            bsm_intervals: vec![1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
            sweep_period: 10,
            handoff_margin: 0.05,
            top_k: vec![1, 3],
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            frames: 4000,
            scenario: ScenarioConfig::default(),
            radio: RadioConfig::default(),
            sensing: SensingConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

fn pos(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn range(field: &str, v: f64, lo: f64, hi: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(invalid(field, format!("must lie in [{lo}, {hi}], got {v}")))
    }
}

fn at_least(field: &str, v: usize, lo: usize) -> Result<(), ConfigError> {
    if v >= lo {
        Ok(())
    } else {
        Err(invalid(field, format!("must be at least {lo}, got {v}")))
    }
}

impl RunConfig {
    /// Defaults shrunk to train in minutes on one CPU core: half-resolution
    /// BEM grid, narrower layers, a handful of epochs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.sensing.grid_width = 30;
        cfg.sensing.grid_height = 20;
        let t = &mut cfg.training;
        t.cnn_cells = vec![[8, 5, 1], [16, 3, 1], [32, 3, 1], [64, 3, 1]];
        t.fc_size = 64;
        t.gru_hidden = 64;
        t.expert_hidden = 64;
        t.expert_out = 64;
        t.batch_size = 32;
        t.epochs = 6;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match msg
                .strip_prefix("missing field `")
                .and_then(|s| s.split('`').next())
            {
                Some(field) => ConfigError::MissingField(field.to_string()),
                None => ConfigError::Parse(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema {
                found: self.schema_version,
            });
        }
        let s = &self.scenario;
        pos("scenario.arm_length", s.arm_length)?;
        range(
            "scenario.lane_offset",
            s.lane_offset,
            0.0,
            s.junction_half_width,
        )?;
        range(
            "scenario.junction_half_width",
            s.junction_half_width,
            0.0,
            s.arm_length,
        )?;
        if s.users > s.vehicles {
            return Err(invalid("scenario.users", "more users than vehicles"));
        }
        range(
            "scenario.min_speed_kmh",
            s.min_speed_kmh,
            0.0,
            s.max_speed_kmh,
        )?;
        range("scenario.max_speed_kmh", s.max_speed_kmh, 0.0, 40.0)?;
        pos("scenario.frame_interval", s.frame_interval)?;
        pos("scenario.accel", s.accel)?;
        pos("scenario.decel", s.decel)?;
        range("scenario.min_gap", s.min_gap, 0.0, 100.0)?;
        range("scenario.headway", s.headway, 0.0, 10.0)?;
        if s.vehicle_classes.is_empty() {
            return Err(invalid("scenario.vehicle_classes", "empty size table"));
        }
        for c in &s.vehicle_classes {
            pos("scenario.vehicle_classes.length", c.length)?;
            range(
                "scenario.vehicle_classes.width",
                c.width,
                1e-3,
                2.0 * s.lane_offset.max(1.0),
            )?;
            pos("scenario.vehicle_classes.height", c.height)?;
            range("scenario.vehicle_classes.weight", c.weight, 0.0, f64::MAX)?;
        }
        if s.vehicle_classes.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return Err(invalid(
                "scenario.vehicle_classes.weight",
                "weights sum to zero",
            ));
        }
        range(
            "scenario.building_inner",
            s.building_inner,
            s.junction_half_width,
            s.building_outer,
        )?;
        pos("scenario.building_height", s.building_height)?;
        if s.cameras.is_empty() {
            return Err(invalid(
                "scenario.cameras",
                "need at least one base station",
            ));
        }
        at_least("scenario.image_width", s.image_width as usize, 1)?;
        at_least("scenario.image_height", s.image_height as usize, 1)?;
        range("scenario.fov_deg", s.fov_deg, 1.0, 179.0)?;
        range(
            "scenario.array_axis_offset_deg",
            s.array_axis_offset_deg,
            -90.0,
            90.0,
        )?;
        range("scenario.sector_deg", s.sector_deg, 1.0, 360.0)?;
        range("scenario.sigma_px", s.sigma_px, 0.0, 1e3)?;
        range("scenario.size_jitter", s.size_jitter, 0.0, 0.9)?;
        range(
            "scenario.occlusion_threshold",
            s.occlusion_threshold,
            0.0,
            1.0,
        )?;
        range("scenario.bsm_jitter", s.bsm_jitter, 0.0, 100.0)?;

        let r = &self.radio;
        at_least("radio.n_antennas", r.n_antennas, 1)?;
        range("radio.n_antennas", r.n_antennas as f64, 1.0, 65535.0)?;
        at_least("radio.n_rf", r.n_rf, 1)?;
        pos("radio.noise_power", r.noise_power)?;
        pos("radio.spacing_ratio", r.spacing_ratio)?;
        pos("radio.carrier_hz", r.carrier_hz)?;
        range("radio.blockage_db", r.blockage_db, 0.0, 300.0)?;
        range("radio.front_to_back_db", r.front_to_back_db, 0.0, 300.0)?;
        range("radio.reflection_factor", r.reflection_factor, 0.0, 1.0)?;
        at_least("radio.max_paths", r.max_paths, 1)?;
        range("radio.amplitude_floor", r.amplitude_floor, 0.0, 1.0)?;

        let e = &self.sensing;
        at_least("sensing.grid_width", e.grid_width, 1)?;
        at_least("sensing.grid_height", e.grid_height, 1)?;
        at_least("sensing.t_p", e.t_p, 1)?;
        at_least("sensing.bsm_interval", e.bsm_interval, 1)?;
        pos("sensing.gamma2", e.gamma2)?;
        range("sensing.iou_threshold", e.iou_threshold, 0.0, 1.0)?;

        let t = &self.training;
        pos("training.learning_rate", t.learning_rate)?;
        at_least("training.batch_size", t.batch_size, 1)?;
        at_least("training.experts", t.experts, 1)?;
        if t.cnn_cells.is_empty() || t.cnn_cells.iter().any(|c| c.iter().any(|&x| x == 0)) {
            return Err(invalid(
                "training.cnn_cells",
                "need non-empty cells with positive sizes",
            ));
        }
        at_least("training.fc_size", t.fc_size, 1)?;
        at_least("training.gru_hidden", t.gru_hidden, 1)?;
        at_least("training.gru_layers", t.gru_layers, 1)?;
        at_least("training.expert_hidden", t.expert_hidden, 1)?;
        at_least("training.expert_out", t.expert_out, 1)?;
        range("training.valid_fraction", t.valid_fraction, 0.0, 0.9)?;
        at_least("training.record_stride", t.record_stride, 1)?;

        let v = &self.evaluation;
        if v.users.is_empty() || v.users.iter().any(|&u| u == 0 || u > s.users) {
            return Err(invalid(
                "evaluation.users",
                format!("entries must lie in [1, {}]", s.users),
            ));
        }
        if v.bsm_intervals.iter().any(|&m| m == 0) {
            return Err(invalid(
                "evaluation.bsm_intervals",
                "intervals must be at least 1",
            ));
        }
        at_least("evaluation.sweep_period", v.sweep_period, 1)?;
        range("evaluation.handoff_margin", v.handoff_margin, 0.0, f64::MAX)?;
        if v.top_k.iter().any(|&k| k == 0 || k > r.n_antennas) {
            return Err(invalid("evaluation.top_k", "k must lie in [1, n_antennas]"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        299_792_458.0 / self.radio.carrier_hz
    }
}

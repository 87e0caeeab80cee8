//! Physical and timing constants of the sorting line, scenario files and
//! their validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierError, ConfusionMatrix, GrainClass, Mixture};
use crate::geometry::{Calibration, PixelPoint};
use crate::Calibration64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// A broken configuration invariant, keyed by the offending field(s).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Mounting angle of the nozzles from the vertical.
pub const NOZZLE_TILT_DEG: f64 = 20.0;

/// All physical and timing constants of the line. Lengths in mm, times in
/// the unit named by the field suffix (seconds when unsuffixed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineConfig {
    /// Belt speed in mm/s.
    pub belt_speed: f64,
    pub belt_length: f64,
    pub lane_count: u32,
    pub lane_pitch: f64,
    pub positioning_width: f64,
    pub camera_fps: f64,
    /// Belt length covered by the image height.
    pub fov_along: f64,
    pub camera_height: f64,
    pub image_width_px: f64,
    pub image_height_px: f64,
    /// Distance from the top of the field of view to the nozzle line.
    pub firing_line_mm: f64,
    /// Extra travel, as assumed by the controller, between the nozzle line
    /// and the point the tilted jet actually hits.
    pub nozzle_offset_mm: f64,
    /// Offset on the physical rig when it differs from the controller's
    /// value. Absent means the controller is calibrated correctly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actual_nozzle_offset_mm: Option<f64>,
    pub valve_switch_ms: f64,
    pub pulse_ms: f64,
    pub mean_grain_mass_g: f64,
    pub feed_rate_grains_per_s: f64,
    /// Distance from the feeder drop point to the top of the field of view.
    pub feed_gap_mm: f64,
    pub grain_size_mm: f64,
    /// Delay between frame capture and the controller acting on it.
    pub detection_latency_ms: f64,
    pub pixel_noise_px: f64,
    pub miss_prob: f64,
    pub nms_iou_threshold: f64,
    /// Draw a fresh classification for every frame instead of once per grain.
    pub resample_class_per_frame: bool,
    pub hopper_capacity_g: f64,
}

pub fn default_nozzle_offset_mm(camera_height: f64) -> f64 {
    camera_height * NOZZLE_TILT_DEG.to_radians().tan()
}

impl Default for LineConfig {
    fn default() -> Self {
        let camera_height = 96.0;
        Self {
            belt_speed: 59.0,
            belt_length: 400.0,
            lane_count: 5,
            lane_pitch: 20.0,
            positioning_width: 100.0,
            camera_fps: 40.0,
            fov_along: 100.0,
            camera_height,
            image_width_px: 1920.0,
            image_height_px: 1080.0,
            firing_line_mm: 120.0,
            nozzle_offset_mm: default_nozzle_offset_mm(camera_height),
            actual_nozzle_offset_mm: None,
            valve_switch_ms: 1.0,
            pulse_ms: 4.0,
            mean_grain_mass_g: 0.055,
            // 99 gaps plus the ~6 s feed-to-bin transit span ~41.25 s, which
            // is 8 g/min for 100 grains of 0.055 g.
            feed_rate_grains_per_s: 2.81,
            feed_gap_mm: 200.0,
            grain_size_mm: 5.0,
            detection_latency_ms: 0.0,
            pixel_noise_px: 0.0,
            miss_prob: 0.0,
            nms_iou_threshold: 0.5,
            resample_class_per_frame: false,
            hopper_capacity_g: 300.0,
        }
    }
}

impl LineConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable hash of the serialized configuration.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&hash[..8])
    }

    /// Returns every violated invariant.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                out.push(Violation { field, message });
            }
        };

        let positive = [
            ("belt_speed", self.belt_speed),
            ("belt_length", self.belt_length),
            ("lane_pitch", self.lane_pitch),
            ("positioning_width", self.positioning_width),
            ("camera_fps", self.camera_fps),
            ("fov_along", self.fov_along),
            ("camera_height", self.camera_height),
            ("image_width_px", self.image_width_px),
            ("image_height_px", self.image_height_px),
            ("firing_line_mm", self.firing_line_mm),
            ("valve_switch_ms", self.valve_switch_ms),
            ("pulse_ms", self.pulse_ms),
            ("mean_grain_mass_g", self.mean_grain_mass_g),
            ("feed_rate_grains_per_s", self.feed_rate_grains_per_s),
            ("grain_size_mm", self.grain_size_mm),
            ("hopper_capacity_g", self.hopper_capacity_g),
        ];
        for (field, v) in positive {
            check(v.is_finite() && v > 0.0, field, format!("must be positive, got {v}"));
        }
        let nonnegative = [
            ("feed_gap_mm", self.feed_gap_mm),
            ("detection_latency_ms", self.detection_latency_ms),
            ("pixel_noise_px", self.pixel_noise_px),
        ];
        for (field, v) in nonnegative {
            check(v.is_finite() && v >= 0.0, field, format!("must be >= 0, got {v}"));
        }
        check(
            self.lane_count > 0,
            "lane_count",
            "must be positive".to_string(),
        );
        check(
            self.nozzle_offset_mm.is_finite(),
            "nozzle_offset_mm",
            "must be finite".to_string(),
        );
        if let Some(v) = self.actual_nozzle_offset_mm {
            check(
                v.is_finite(),
                "actual_nozzle_offset_mm",
                "must be finite".to_string(),
            );
        }
        check(
            (0.0..1.0).contains(&self.miss_prob),
            "miss_prob",
            format!("must lie in [0, 1), got {}", self.miss_prob),
        );
        check(
            (0.0..=1.0).contains(&self.nms_iou_threshold),
            "nms_iou_threshold",
            format!("must lie in [0, 1], got {}", self.nms_iou_threshold),
        );
        let lanes_width = f64::from(self.lane_count) * self.lane_pitch;
        check(
            (lanes_width - self.positioning_width).abs() <= 1e-9,
            "lane_count*lane_pitch",
            format!(
                "lane_count * lane_pitch = {lanes_width} must equal positioning_width = {}",
                self.positioning_width
            ),
        );
        check(
            self.firing_line_mm > self.fov_along,
            "firing_line_mm",
            format!(
                "must lie beyond the field of view ({} <= {})",
                self.firing_line_mm, self.fov_along
            ),
        );
        let reach = self.feed_gap_mm
            + self.firing_line_mm
            + self.nozzle_offset_mm.max(self.physical_nozzle_offset_mm());
        check(
            reach <= self.belt_length,
            "belt_length",
            format!("feed point to ejection point is {reach} mm, longer than the belt"),
        );
        check(
            self.grain_size_mm < self.lane_pitch,
            "grain_size_mm",
            "must be smaller than lane_pitch".to_string(),
        );
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn physical_nozzle_offset_mm(&self) -> f64 {
        self.actual_nozzle_offset_mm.unwrap_or(self.nozzle_offset_mm)
    }

    /// Belt position where the controller expects the jet to hit.
    pub fn planned_ejection_mm(&self) -> f64 {
        self.firing_line_mm + self.nozzle_offset_mm
    }

    /// Belt position where the jet really hits.
    pub fn physical_ejection_mm(&self) -> f64 {
        self.firing_line_mm + self.physical_nozzle_offset_mm()
    }

    pub fn frame_interval(&self) -> f64 {
        1.0 / self.camera_fps
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_pitch
    }

    /// Square-pixel camera: the image height spans the field of view and
    /// the belt is centred horizontally.
    pub fn calibration(&self) -> Calibration64 {
        let scale = self.fov_along / self.image_height_px;
        let belt_px = self.positioning_width / scale;
        Calibration::new(
            scale,
            scale,
            PixelPoint {
                x: (self.image_width_px - belt_px) / 2.0,
                y: 0.0,
            },
            self.image_width_px,
            self.image_height_px,
        )
        .expect("validated config gives a valid calibration")
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Which classifier a run uses.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierSpec {
    Oracle,
    /// The committed calibrated fixture.
    Calibrated,
    File(PathBuf),
}

impl ClassifierSpec {
    pub fn parse(s: &str, base_dir: Option<&Path>) -> Self {
        match s.trim() {
            "oracle" => ClassifierSpec::Oracle,
            "calibrated" => ClassifierSpec::Calibrated,
            other => {
                let p = PathBuf::from(other);
                match base_dir {
                    Some(dir) if p.is_relative() => ClassifierSpec::File(dir.join(p)),
                    _ => ClassifierSpec::File(p),
                }
            }
        }
    }

    pub fn build(&self) -> Result<Classifier, ConfigError> {
        Ok(match self {
            ClassifierSpec::Oracle => Classifier::Oracle,
            ClassifierSpec::Calibrated => Classifier::calibrated(),
            ClassifierSpec::File(p) => Classifier::confusion(ConfusionMatrix::load(p)?)?,
        })
    }

    /// Label safe to embed in event-log detail fields.
    pub fn label(&self) -> String {
        match self {
            ClassifierSpec::Oracle => "oracle".to_string(),
            ClassifierSpec::Calibrated => "calibrated".to_string(),
            ClassifierSpec::File(p) => {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                format!("file:{}", sanitize(&name))
            }
        }
    }
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if matches!(c, ',' | ';' | '=' | '\n' | '\r') { '_' } else { c })
        .collect()
}

/// A run description: mixture, seed, classifier and line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub mixture: Mixture,
    pub classifier: ClassifierSpec,
    pub config: LineConfig,
}

impl Scenario {
    pub fn with_config(config: LineConfig) -> Self {
        Self {
            seed: 0,
            mixture: Mixture::REFERENCE,
            classifier: ClassifierSpec::Calibrated,
            config,
        }
    }

    /// Parses a scenario. Top-level `seed`, `classifier` and a `[mixture]`
    /// table are scenario keys; every other key overrides the LineConfig
    /// field of the same name on top of `base`.
    pub fn from_toml_str(
        text: &str,
        base: &LineConfig,
        origin: &str,
        base_dir: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: origin.to_string(),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;

        let seed = match table.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if i >= 0 => i as u64,
            Some(v) => return Err(parse_err(format!("seed must be a nonnegative integer, got {v}"))),
        };
        let classifier = match table.remove("classifier") {
            None => ClassifierSpec::Calibrated,
            Some(toml::Value::String(s)) => ClassifierSpec::parse(&s, base_dir),
            Some(v) => return Err(parse_err(format!("classifier must be a string, got {v}"))),
        };
        let mixture = match table.remove("mixture") {
            None => Mixture::REFERENCE,
            Some(toml::Value::Table(t)) => parse_mixture(&t).map_err(parse_err)?,
            Some(v) => return Err(parse_err(format!("mixture must be a table, got {v}"))),
        };

        let mut merged = toml::Table::try_from(base).expect("config serializes");
        merged.extend(table);
        let config: LineConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        Ok(Self {
            seed,
            mixture,
            classifier,
            config,
        })
    }

    pub fn load(path: &Path, base: &LineConfig) -> Result<Self, ConfigError> {
        let text = read(path)?;
        Self::from_toml_str(&text, base, &path.display().to_string(), path.parent())
    }
}

fn parse_mixture(t: &toml::Table) -> Result<Mixture, String> {
    let mut counts = [0u32; 6];
    for (key, value) in t {
        let class: GrainClass = key.parse().map_err(|e: ClassifierError| e.to_string())?;
        let n = value
            .as_integer()
            .filter(|n| (0..=i64::from(u32::MAX)).contains(n))
            .ok_or_else(|| format!("mixture.{key} must be a nonnegative integer"))?;
        counts[class.index()] = n as u32;
    }
    Ok(Mixture(counts))
}

//! The TOML run configuration. Every section is optional; unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stripelight::attack::{AffinityConfig, AttackConfig};
use stripelight::camera::SRGB_GAMMA;
use stripelight::classifier::TrainConfig;
use stripelight::eval::EvalOptions;
use stripelight::transforms::{ColorRanges, TransformRanges};
use stripelight::pwm::{DEFAULT_GRID_US, DEFAULT_SLOT_US};
use stripelight::scene::{SceneTargets, DEFAULT_FULL_MEAN};
use stripelight::{CameraTimings, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub camera: CameraSection,
    pub classifier: ClassifierSection,
    pub scene: SceneSection,
    pub attack: AttackConfig,
    pub affinity: AffinityConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub bank: BankSection,
    pub select: SelectSection,
    pub pwm: PwmSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            workers: 0,
            camera: CameraSection::default(),
            classifier: ClassifierSection::default(),
            scene: SceneSection::default(),
            attack: AttackConfig::default(),
            affinity: AffinityConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            bank: BankSection::default(),
            select: SelectSection::default(),
            pwm: PwmSection::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub readout_us: f64,
    pub exposure_us: f64,
    pub rows: usize,
    pub cols: usize,
    pub gamma: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            readout_us: DEFAULT_SLOT_US as f64,
            exposure_us: 500.0,
            rows: 64,
            cols: 64,
            gamma: SRGB_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Reference model file written by `train-classifier`.
    pub model: Option<PathBuf>,
    /// Shell command speaking the bridge protocol; wins over `model`.
    pub bridge_cmd: Option<String>,
    pub labels: Option<Vec<String>>,
    pub timeout_s: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            model: None,
            bridge_cmd: None,
            labels: None,
            timeout_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub ambient: Option<PathBuf>,
    pub full: Option<PathBuf>,
    /// Base photo for `synth-scene`, `bank` and `sweep-ambient`, and the
    /// fallback when no pair is given.
    pub base: Option<PathBuf>,
    pub ambient_mean: f64,
    pub full_mean: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let t = SceneTargets::default();
        Self {
            ambient: None,
            full: None,
            base: None,
            ambient_mean: t.ambient_mean,
            full_mean: t.full_mean,
        }
    }
}

impl SceneSection {
    pub fn targets(&self) -> SceneTargets {
        SceneTargets {
            ambient_mean: self.ambient_mean,
            full_mean: self.full_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub signal: Option<PathBuf>,
    /// Defaults to `attack.target_class`.
    pub target: Option<usize>,
    pub n_transforms: usize,
    /// Also run the unattacked baseline for this class.
    pub baseline_class: Option<usize>,
    pub transforms: TransformRanges,
    pub color: ColorRanges,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            signal: None,
            target: None,
            n_transforms: 200,
            baseline_class: None,
            transforms: TransformRanges::default(),
            color: ColorRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalRef {
    pub exposure_us: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub exposures_us: Vec<f64>,
    /// Explicit per-exposure signals; otherwise taken from `bank`.
    pub signals: Vec<SignalRef>,
    pub bank: Option<PathBuf>,
    /// Ambient mean levels for `sweep-ambient`.
    pub levels: Vec<f64>,
    /// Exposure for `sweep-ambient`; defaults to the camera's.
    pub exposure_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub levels: Vec<f64>,
    pub exposures_us: Vec<f64>,
    pub full_mean: f64,
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            levels: vec![0.2, 85.0 / 255.0, 0.5],
            exposures_us: vec![500.0],
            full_mean: DEFAULT_FULL_MEAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub bank: Option<PathBuf>,
    pub level: Option<f64>,
    /// Defaults to the camera exposure.
    pub exposure_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PwmSection {
    pub signal: Option<PathBuf>,
    pub slot_us: u32,
    pub grid_us: u32,
}

impl Default for PwmSection {
    fn default() -> Self {
        Self {
            signal: None,
            slot_us: DEFAULT_SLOT_US,
            grid_us: DEFAULT_GRID_US,
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            transforms: self.transforms.clone(),
            color: self.color.clone(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn timings(&self) -> Result<CameraTimings> {
        let c = &self.camera;
        CameraTimings::new(c.readout_us, c.exposure_us, c.rows, c.cols, c.gamma)
    }

    /// The attack configuration with the run seed applied.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: self.seed,
            ..self.attack.clone()
        }
    }

    /// Checks everything that can be checked without touching input files.
    pub fn validate(&self) -> Result<()> {
        self.timings()?;
        if self.attack.seed != 0 {
            return Err(Error::Parse("attack.seed is not used; set the top-level seed".into()));
        }
        self.attack.transforms.validate()?;
        self.attack.color.validate()?;
        self.eval.transforms.validate()?;
        self.eval.color.validate()?;
        self.scene.targets().validate()?;
        if self.classifier.timeout_s.is_nan() || self.classifier.timeout_s <= 0.0 {
            return Err(Error::OutOfRange("classifier.timeout_s must be positive".into()));
        }
        if self.eval.n_transforms == 0 {
            return Err(Error::OutOfRange("eval.n_transforms must be at least 1".into()));
        }
        let finite_pos = |xs: &[f64], what: &str| {
            if xs.iter().all(|x| x.is_finite() && *x > 0.0) {
                Ok(())
            } else {
                Err(Error::OutOfRange(format!("{what} must be positive")))
            }
        };
        finite_pos(&self.sweep.exposures_us, "sweep.exposures_us")?;
        finite_pos(&self.bank.exposures_us, "bank.exposures_us")?;
        let unit = |xs: &[f64], what: &str| {
            if xs.iter().all(|x| (0.0..=1.0).contains(x)) {
                Ok(())
            } else {
                Err(Error::OutOfRange(format!("{what} must lie in [0, 1]")))
            }
        };
        unit(&self.sweep.levels, "sweep.levels")?;
        unit(&self.bank.levels, "bank.levels")?;
        if !(self.bank.full_mean > 0.0 && self.bank.full_mean <= 1.0) {
            return Err(Error::OutOfRange("bank.full_mean must lie in (0, 1]".into()));
        }
        if self.pwm.grid_us == 0 || self.pwm.slot_us < self.pwm.grid_us || !self.pwm.slot_us.is_multiple_of(self.pwm.grid_us) {
            return Err(Error::OutOfRange(
                "pwm.slot_us must be a positive multiple of pwm.grid_us".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[camera]\nrow = 3").is_err());
        assert!(RunConfig::parse("[attack.adam]\nlr = 0.1").is_err());
        assert!(RunConfig::parse("[eval.transforms.scale]\nlo = 1.0\nhi = 1.2\nmid = 1.1").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::parse(
            "seed = 4\n[camera]\nrows = 8\ncols = 8\n[attack]\nmax_iterations = 3\n[attack.adam]\nlearning_rate = 0.1\n[scene]\nambient_mean = 0.2\n[eval.transforms]\nflip_h = false\n",
        )
        .unwrap();
        assert_eq!(c.attack_config().seed, 4);
        assert_eq!(c.attack.adam.learning_rate, 0.1);
        assert_eq!(c.scene.ambient_mean, 0.2);
        assert!(!c.eval.transforms.flip_h);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_values_rejected_before_work() {
        for text in [
            "[camera]\nexposure_us = -1.0",
            "[scene]\nambient_mean = 0.7\nfull_mean = 0.7",
            "[eval]\nn_transforms = 0",
            "[pwm]\nslot_us = 122",
            "[attack]\nseed = 3",
        ] {
            assert!(RunConfig::parse(text).unwrap().validate().is_err(), "{text}");
        }
    }
}

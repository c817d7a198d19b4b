//! Declarative TOML inputs of the subcommands. Relative paths inside a file
//! are resolved against the directory of that file.

use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Matrix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stereo_sdr::bench::{default_rig, generate_scene, perturb_pose, synthetic_arm, CameraPlacement, ConfigSampler, McvProtocol, Method, SyntheticScene};
use stereo_sdr::breathing::{ControlGains, FitConfig, ScenarioConfig};
use stereo_sdr::camera::{isometry_from_matrix, StereoRig};
use stereo_sdr::kinematics::{load_robot, JointConfig, RobotModel};
use stereo_sdr::objective::ObjectiveConfig;
use stereo_sdr::pose::OptimConfig;
use stereo_sdr::seg::{CmmConfig, DegradeParams, IcpSchedule, SegmentationSource};
use stereo_sdr::swarm::SwarmConfig;
use stereo_sdr::{Error, Result};

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Where the robot, the rig and the observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// URDF file; the built-in synthetic arm when absent.
    pub robot: Option<PathBuf>,
    /// Stereo calibration (TOML); the built-in rig when absent.
    pub calibration: Option<PathBuf>,
    /// Resample the rig to this image size (intrinsics scaled accordingly).
    pub resolution: Option<(usize, usize)>,
    pub placement: CameraPlacement,
    pub n_configs: usize,
    pub sampler: ConfigSampler,
    pub seed: u64,
    /// Degrade the rendered ground truth before use.
    pub degrade: Option<DegradeParams>,
    /// Real observations: `{i}_{left|right}.png` masks with joint angles in `joints`.
    pub masks_dir: Option<PathBuf>,
    /// JSON array of joint vectors, one per mask pair.
    pub joints: Option<PathBuf>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            robot: None,
            calibration: None,
            resolution: None,
            placement: CameraPlacement::default(),
            n_configs: 12,
            sampler: ConfigSampler::default(),
            seed: 0,
            degrade: None,
            masks_dir: None,
            joints: None,
        }
    }
}

pub struct Loaded {
    pub model: RobotModel,
    pub rig: StereoRig,
    pub configs: Vec<JointConfig>,
    pub source: SegmentationSource,
    /// Present for synthetic scenes.
    pub scene: Option<SyntheticScene>,
}

impl Loaded {
    pub fn gt_pose(&self) -> Option<Isometry3<f64>> {
        self.scene.as_ref().map(|s| s.gt_pose)
    }
}

impl SceneConfig {
    pub fn load(&self, base: &Path) -> Result<Loaded> {
        let model = match &self.robot {
            Some(p) => load_robot(&resolve(base, p))?,
            None => synthetic_arm(),
        };
        let rig = match &self.calibration {
            Some(p) => StereoRig::load(&resolve(base, p))?,
            None => default_rig(),
        };
        let rig = match self.resolution {
            Some((w, h)) => rig.resized(w, h),
            None => rig,
        };
        if let Some(dir) = &self.masks_dir {
            let joints = self
                .joints
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("masks_dir requires a joints file".into()))?;
            let path = resolve(base, joints);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let q: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
            return Ok(Loaded {
                model,
                rig,
                configs: q.into_iter().map(JointConfig).collect(),
                source: SegmentationSource::ExternalMasks { dir: resolve(base, dir) },
                scene: None,
            });
        }
        let gt = self.placement.pose()?;
        let scene = generate_scene(&model, &rig, &gt, self.n_configs, &self.sampler, self.seed)?;
        let params = self.degrade.unwrap_or_default();
        Ok(Loaded {
            model,
            rig,
            configs: scene.configs.clone(),
            source: SegmentationSource::oracle(scene.masks.clone(), params),
            scene: Some(scene),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// Synthetic scenes only: the ground truth offset by exact amounts.
    PerturbedTruth {
        #[serde(default = "default_translation")]
        translation: f64,
        #[serde(default = "default_rotation")]
        rotation_deg: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Camera swarm; the swarm settings live in the `[swarm]` table.
    Cso {
        #[serde(default)]
        seed: u64,
    },
    /// Explicit row-major base-in-left-camera transform.
    Matrix { matrix: [[f64; 4]; 4] },
}

fn default_translation() -> f64 {
    0.05
}

fn default_rotation() -> f64 {
    5.0
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig::PerturbedTruth {
            translation: default_translation(),
            rotation_deg: default_rotation(),
            seed: 0,
        }
    }
}

pub fn matrix_to_isometry(m: &[[f64; 4]; 4]) -> Result<Isometry3<f64>> {
    isometry_from_matrix(&Matrix4::from_fn(|r, c| m[r][c]))
}

impl InitConfig {
    /// Starting pose for the non-swarm variants.
    pub fn fixed_pose(&self, gt: Option<Isometry3<f64>>) -> Result<Option<Isometry3<f64>>> {
        match self {
            InitConfig::PerturbedTruth {
                translation,
                rotation_deg,
                seed,
            } => {
                let gt = gt.ok_or_else(|| Error::InvalidConfig("perturbed_truth init needs a synthetic scene".into()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(Some(perturb_pose(&gt, *translation, *rotation_deg, &mut rng)))
            }
            InitConfig::Cso { .. } => Ok(None),
            InitConfig::Matrix { matrix } => matrix_to_isometry(matrix).map(Some),
        }
    }
}

/// Input of `localize`, `init-swarm` and `icp`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub init: InitConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub swarm: SwarmConfig,
    pub icp: IcpSchedule,
}

/// Input of `bench --protocol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub configs_per_fit: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
    /// Methods compared on the same draws.
    pub methods: Vec<Method>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let p = McvProtocol::default();
        ProtocolConfig {
            configs_per_fit: p.configs_per_fit,
            n_repeats: p.n_repeats,
            seed: p.seed,
            methods: vec![Method::Sdr],
        }
    }
}

impl ProtocolConfig {
    pub fn protocol(&self) -> McvProtocol {
        McvProtocol {
            configs_per_fit: self.configs_per_fit.clone(),
            n_repeats: self.n_repeats,
            seed: self.seed,
        }
    }
}

/// Input of `breathe`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreatheConfig {
    pub robot: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub fit: FitConfig,
    pub gains: ControlGains,
}

impl BreatheConfig {
    pub fn model(&self, base: &Path) -> Result<RobotModel> {
        match &self.robot {
            Some(p) => load_robot(&resolve(base, p)),
            None => Ok(synthetic_arm()),
        }
    }
}

/// Input of `cmm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmmFileConfig {
    pub cmm: CmmConfig,
    /// Directory with `{i}_image.png` / `{i}_mask.png` pairs; synthetic renders of the scene otherwise.
    pub input_dir: Option<PathBuf>,
    pub scene: SceneConfig,
    /// Per-input donor visibility flags; all visible when empty.
    pub visibility: Vec<bool>,
}

impl Default for CmmFileConfig {
    fn default() -> Self {
        CmmFileConfig {
            cmm: CmmConfig::default(),
            input_dir: None,
            scene: SceneConfig {
                n_configs: CmmConfig::default().batch_size,
                ..Default::default()
            },
            visibility: Vec::new(),
        }
    }
}

pub fn input_dir(base: &Path, p: &Path) -> PathBuf {
    resolve(base, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_files() {
        let p: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(p, PipelineConfig::default());
        let b: BreatheConfig = toml::from_str("").unwrap();
        assert_eq!(b.scenario.phases.len(), 4);
        let m: ProtocolConfig = toml::from_str("methods = [\"sdr\", \"sdr_icp\"]").unwrap();
        assert_eq!(m.configs_per_fit, vec![3, 6, 9, 12]);
        assert_eq!(m.methods.len(), 2);
    }

    #[test]
    fn init_variants() {
        let p: PipelineConfig = toml::from_str("[init]\nkind = \"cso\"\nseed = 4\n").unwrap();
        assert_eq!(p.init, InitConfig::Cso { seed: 4 });
        let p: PipelineConfig = toml::from_str(
            "[init]\nkind = \"matrix\"\nmatrix = [[1,0,0,0],[0,1,0,0],[0,0,1,1.5],[0,0,0,1]]\n",
        )
        .unwrap();
        let iso = p.init.fixed_pose(None).unwrap().unwrap();
        assert!((iso.translation.vector.z - 1.5).abs() < 1e-15);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }
}

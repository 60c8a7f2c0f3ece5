//! Declarative experiment configuration and the pipeline stages shared by
//! the command-line driver and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envtask::{
    make_dataset, make_sample, read_dataset, sample_trials, write_dataset, AgentPose, Split, TaskConfig, TrialSpec,
};
use crate::error::{Result, VmdnnError};
use crate::network::{init_parameters, validate_config, Block, ParameterSet, PfcMode, VisionMode, VmdnnConfig};
use crate::training::{
    pretrain_grasp, pretrain_visual, train_with_observer, EpochLoss, GestureClip, LossCurve, SequenceSample,
    TrainingConfig, VisualPretraining,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub vision_mode: VisionMode,
    pub pfc_mode: PfcMode,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition { vision_mode: VisionMode::Cnn, pfc_mode: PfcMode::Fast },
        Condition { vision_mode: VisionMode::Cnn, pfc_mode: PfcMode::Slow },
        Condition { vision_mode: VisionMode::Mstnn, pfc_mode: PfcMode::Fast },
        Condition { vision_mode: VisionMode::Mstnn, pfc_mode: PfcMode::Slow },
    ];

    pub fn name(&self) -> String {
        format!("{}+{}", self.vision_mode, self.pfc_mode)
    }

    pub fn apply(&self, cfg: &VmdnnConfig) -> VmdnnConfig {
        cfg.clone().with_condition(self.vision_mode, self.pfc_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub grasp_epochs: usize,
    pub visual_epochs: usize,
    pub visual_learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grasp_epochs: 100,
            visual_epochs: 100,
            visual_learning_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub tr: usize,
    pub obj: usize,
    pub sub: usize,
    pub obj_sub: usize,
    pub gestureless: usize,
    pub clips: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            tr: 40,
            obj: 40,
            sub: 40,
            obj_sub: 40,
            gestureless: 24,
            clips: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
    /// Occlusion onsets; derived from the task timings when absent.
    #[serde(default)]
    pub occlusion_onsets: Option<Vec<usize>>,
    pub data_seed: u64,
    pub init_scale: f64,
    /// Training trials recorded for the PCA analysis.
    pub analysis_trials: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            conditions: Condition::ALL.to_vec(),
            occlusion_onsets: None,
            data_seed: 2024,
            init_scale: 1.0,
            analysis_trials: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: VmdnnConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub pretraining: PretrainConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub splits: SplitSizes,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Gradient norm limit of the desk setup. Without it per-sample SGD at the
/// default learning rate blows up within the first few epochs.
pub const DESK_CLIP_NORM: f64 = 40.0;

impl ExperimentConfig {
    /// The desk-scale setup used throughout the test suites.
    pub fn desk() -> Self {
        let task = TaskConfig::default();
        Self {
            network: VmdnnConfig::desk(&task),
            training: TrainingConfig {
                clip_norm: Some(DESK_CLIP_NORM),
                ..TrainingConfig::default()
            },
            pretraining: PretrainConfig::default(),
            task,
            splits: SplitSizes::default(),
            experiment: ExperimentSection::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(VmdnnError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = validate_config(&self.network).err().unwrap_or_default();
        v.extend(self.training.violations());
        v.extend(self.task.violations().into_iter().map(|s| format!("task: {s}")));
        let expect = AgentPose::DIM * self.task.group_size;
        if self.network.output_size() != expect {
            v.push(format!(
                "output layer has {} neurons, the task needs {} pose values x {} = {expect}",
                self.network.output_size(),
                AgentPose::DIM,
                self.task.group_size
            ));
        } else if self.network.mo.groups != self.task.codec() {
            v.push("output groups must match the task codec (ranges, group size, sigma)".into());
        }
        if (self.network.height, self.network.width) != (self.task.frame_height, self.task.frame_width) {
            v.push(format!(
                "network input {}x{} differs from task frames {}x{}",
                self.network.width, self.network.height, self.task.frame_width, self.task.frame_height
            ));
        }
        if self.splits.tr == 0 {
            v.push("the TR split needs at least one trial".into());
        }
        if self.experiment.seeds.is_empty() {
            v.push("at least one seed is required".into());
        }
        if self.experiment.conditions.is_empty() {
            v.push("at least one network condition is required".into());
        }
        if !(self.experiment.init_scale >= 0.0) {
            v.push("init_scale must be >= 0".into());
        }
        if self.pretraining.enabled && !(self.pretraining.visual_learning_rate > 0.0) {
            v.push("visual pre-training learning rate must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(VmdnnError::config(v.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn occlusion_onsets(&self, trial: &TrialSpec) -> Vec<usize> {
        self.experiment
            .occlusion_onsets
            .clone()
            .unwrap_or_else(|| crate::envtask::occlusion_points(trial))
    }
}

fn stream_seed(base: u64, stream: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Every dataset an experiment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Vec<SequenceSample>,
    /// Evaluation trials per split; TR re-uses the training trials.
    pub eval: Vec<(Split, Vec<TrialSpec>)>,
    pub gestureless: Vec<SequenceSample>,
    pub clips: Vec<GestureClip>,
}

impl Datasets {
    pub fn eval_trials(&self, split: Split) -> &[TrialSpec] {
        self.eval
            .iter()
            .find(|(s, _)| *s == split)
            .map_or(&[], |(_, t)| t.as_slice())
    }
}

fn clips_from(samples: &[SequenceSample]) -> Vec<GestureClip> {
    samples
        .iter()
        .filter_map(|s| {
            let trial = s.trial.as_ref()?;
            Some(GestureClip {
                frames: s.frames[..trial.timings.gesture_len].to_vec(),
                label: trial.gesture?.index(),
            })
        })
        .collect()
}

/// Deterministic in `experiment.data_seed`.
pub fn build_datasets(cfg: &ExperimentConfig) -> Datasets {
    let task = &cfg.task;
    let seed = cfg.experiment.data_seed;
    let rng = |k: u64| ChaCha8Rng::seed_from_u64(stream_seed(seed, k));
    let train = make_dataset(cfg.splits.tr, &mut rng(1), Split::Tr, false, task);
    let tr_trials: Vec<TrialSpec> = train.iter().filter_map(|s| s.trial.clone()).collect();
    let mut eval = vec![(Split::Tr, tr_trials)];
    for (k, split, n) in [
        (2, Split::Obj, cfg.splits.obj),
        (3, Split::Sub, cfg.splits.sub),
        (4, Split::ObjSub, cfg.splits.obj_sub),
    ] {
        if n > 0 {
            eval.push((split, sample_trials(&mut rng(k), split, n, task)));
        }
    }
    let gestureless = if cfg.splits.gestureless > 0 {
        make_dataset(cfg.splits.gestureless, &mut rng(5), Split::Tr, true, task)
    } else {
        Vec::new()
    };
    let clip_trials = sample_trials(&mut rng(6), Split::Tr, cfg.splits.clips, task);
    let clip_samples: Vec<SequenceSample> = clip_trials.iter().map(|t| make_sample(t, task)).collect();
    Datasets {
        train,
        eval,
        gestureless,
        clips: clips_from(&clip_samples),
    }
}

pub const DATA_DIR: &str = "data";

fn dataset_dir_name(split: Split) -> String {
    format!("eval_{}", split.name())
}

/// Writes every dataset under `out/data`. The directory appears atomically:
/// everything is written to a sibling temporary directory first.
pub fn write_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let data = build_datasets(cfg);
    let task = &cfg.task;
    let seed = cfg.experiment.data_seed;
    let final_dir = out.join(DATA_DIR);
    let tmp = out.join(format!(".{DATA_DIR}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let result = (|| -> Result<()> {
        write_dataset(&tmp.join("train"), seed, Split::Tr, false, &data.train, task)?;
        for (split, trials) in data.eval.iter().filter(|(s, _)| *s != Split::Tr) {
            let samples: Vec<SequenceSample> = trials.iter().map(|t| make_sample(t, task)).collect();
            write_dataset(&tmp.join(dataset_dir_name(*split)), seed, *split, false, &samples, task)?;
        }
        write_dataset(&tmp.join("gestureless"), seed, Split::Tr, true, &data.gestureless, task)?;
        let clip_trials = sample_trials(
            &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, 6)),
            Split::Tr,
            cfg.splits.clips,
            task,
        );
        let clip_samples: Vec<SequenceSample> = clip_trials.iter().map(|t| make_sample(t, task)).collect();
        write_dataset(&tmp.join("clips"), seed, Split::Tr, false, &clip_samples, task)
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp, &final_dir)?;
    Ok(final_dir)
}

pub fn load_datasets(out: &Path) -> Result<Datasets> {
    let dir = out.join(DATA_DIR);
    if !dir.exists() {
        return Err(VmdnnError::MissingArtifact(dir));
    }
    let (_, train) = read_dataset(&dir.join("train"))?;
    let tr_trials: Vec<TrialSpec> = train.iter().filter_map(|s| s.trial.clone()).collect();
    let mut eval = vec![(Split::Tr, tr_trials)];
    for split in [Split::Obj, Split::Sub, Split::ObjSub] {
        let d = dir.join(dataset_dir_name(split));
        if d.exists() {
            let (m, samples) = read_dataset(&d)?;
            let _ = m;
            eval.push((split, samples.into_iter().filter_map(|s| s.trial).collect()));
        }
    }
    let (_, gestureless) = read_dataset(&dir.join("gestureless"))?;
    let (_, clip_samples) = read_dataset(&dir.join("clips"))?;
    Ok(Datasets {
        train,
        eval,
        gestureless,
        clips: clips_from(&clip_samples),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: ParameterSet,
    pub grasp_curve: LossCurve,
    pub visual: Option<VisualPretraining>,
}

/// Grasp pre-training followed by visual pre-training; the visual blocks of
/// the classifier are spliced into the grasp-trained parameters.
pub fn pretrain(cfg: &ExperimentConfig, data: &Datasets, seed: u64) -> Result<PretrainOutcome> {
    let net_cfg = &cfg.network;
    let theta0 = init_parameters(net_cfg, seed, cfg.experiment.init_scale)?;
    let mut grasp_cfg = cfg.training.clone();
    grasp_cfg.epochs = cfg.pretraining.grasp_epochs;
    grasp_cfg.seed = seed;
    let (mut params, grasp_curve) = if data.gestureless.is_empty() || grasp_cfg.epochs == 0 {
        (theta0, LossCurve::default())
    } else {
        pretrain_grasp(net_cfg, theta0, &data.gestureless, &grasp_cfg)?
    };
    let visual = if data.clips.is_empty() || cfg.pretraining.visual_epochs == 0 {
        None
    } else {
        let mut vcfg = cfg.training.clone();
        vcfg.epochs = cfg.pretraining.visual_epochs;
        vcfg.learning_rate = cfg.pretraining.visual_learning_rate;
        vcfg.seed = seed;
        let v = pretrain_visual(net_cfg, params.clone(), &data.clips, &vcfg)?;
        params.splice_from(&v.params, &Block::VISUAL)?;
        Some(v)
    };
    Ok(PretrainOutcome {
        params,
        grasp_curve,
        visual,
    })
}

/// End-to-end training of one condition from `init` (or a fresh seeded
/// initialisation).
pub fn train_model(
    cfg: &ExperimentConfig,
    condition: Condition,
    seed: u64,
    data: &Datasets,
    init: Option<ParameterSet>,
    observer: &mut dyn FnMut(&EpochLoss, &ParameterSet) -> Result<()>,
) -> Result<(ParameterSet, LossCurve)> {
    let net_cfg = condition.apply(&cfg.network);
    let theta0 = match init {
        Some(p) => p,
        None => init_parameters(&net_cfg, seed, cfg.experiment.init_scale)?,
    };
    let mut tcfg = cfg.training.clone();
    tcfg.seed = seed;
    train_with_observer(&net_cfg, theta0, &data.train, &tcfg, observer)
}

pub fn pretrained_path(out: &Path, seed: u64) -> PathBuf {
    out.join("pretrained").join(format!("seed{seed}.ckpt"))
}

pub fn model_path(out: &Path, condition: Condition, seed: u64) -> PathBuf {
    out.join("models").join(format!(
        "{}_{}_seed{seed}.ckpt",
        condition.vision_mode.to_string().to_lowercase(),
        condition.pfc_mode.to_string().to_lowercase()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub config: ExperimentConfig,
    /// Command-line switches that changed behaviour, e.g. `--from-scratch`.
    #[serde(default)]
    pub flags: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

/// Writes `<dir>/<command>.manifest.json`.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    flags: Vec<String>,
    artifacts: Vec<PathBuf>,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        flags,
        command: command.to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.experiment.seeds.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        artifacts,
    };
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{command}.manifest.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

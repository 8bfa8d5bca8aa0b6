//! Run configuration: a TOML file with per-section defaults, overridden by
//! command-line flags (flag wins). The resolved configuration is hashed so
//! every output file can record which settings produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sinkhorn_guidance::data::Dataset;
use sinkhorn_guidance::denoiser::{LayerSelection, ModelConfig, TrainConfig};
use sinkhorn_guidance::diffusion::{make_schedule, NoiseSchedule};
use sinkhorn_guidance::guidance::{GuidanceMethod, GuidanceSpec};
use sinkhorn_guidance::sinkhorn::SinkhornConfig;

use crate::error::{CliError, CliResult};

fn d_dataset() -> String {
    "gauss8".into()
}
fn d_train_examples() -> usize {
    512
}

/// `[data]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_train_examples")]
    pub train_examples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: d_dataset(),
            train_examples: d_train_examples(),
        }
    }
}

fn d_n_tokens() -> usize {
    16
}
fn d_point_dim() -> usize {
    2
}
fn d_d_model() -> usize {
    64
}
fn d_n_heads() -> usize {
    2
}
fn d_n_blocks() -> usize {
    4
}
fn d_ff_dim() -> usize {
    128
}

/// `[model]` section. `num_classes` defaults to the dataset's class count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "d_n_tokens")]
    pub n_tokens: usize,
    #[serde(default = "d_point_dim")]
    pub point_dim: usize,
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_n_heads")]
    pub n_heads: usize,
    #[serde(default = "d_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "d_ff_dim")]
    pub ff_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_classes: None,
            n_tokens: d_n_tokens(),
            point_dim: d_point_dim(),
            d_model: d_d_model(),
            n_heads: d_n_heads(),
            n_blocks: d_n_blocks(),
            ff_dim: d_ff_dim(),
        }
    }
}

fn d_t_max() -> usize {
    1000
}
fn d_beta_start() -> f64 {
    1e-4
}
fn d_beta_end() -> f64 {
    0.02
}

/// `[schedule]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "d_t_max")]
    pub t_max: usize,
    #[serde(default = "d_beta_start")]
    pub beta_start: f64,
    #[serde(default = "d_beta_end")]
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_max: d_t_max(),
            beta_start: d_beta_start(),
            beta_end: d_beta_end(),
        }
    }
}

fn d_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    1e-2
}
fn d_batch_size() -> usize {
    16
}
fn d_p_drop() -> f64 {
    0.1
}

/// `[train]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_p_drop")]
    pub p_drop: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: d_epochs(),
            lr: d_lr(),
            batch_size: d_batch_size(),
            p_drop: d_p_drop(),
        }
    }
}

fn d_method() -> String {
    "asag".into()
}
fn d_scale() -> f64 {
    1.5
}
fn d_blur_sigma() -> f64 {
    8.0
}
fn d_x0_clip() -> Option<f64> {
    Some(6.0)
}

/// `[guidance]` section. `layers` defaults to the middle half of the block
/// stack; `class` absent means unconditional sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "d_method")]
    pub method: String,
    #[serde(default = "d_scale")]
    pub s: f64,
    #[serde(default)]
    pub cfg_scale: Option<f64>,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "d_blur_sigma")]
    pub blur_sigma: f64,
    #[serde(default = "d_x0_clip")]
    pub x0_clip: Option<f64>,
    #[serde(default)]
    pub additive_joint: bool,
    #[serde(default)]
    pub class: Option<usize>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            method: d_method(),
            s: d_scale(),
            cfg_scale: None,
            layers: None,
            blur_sigma: d_blur_sigma(),
            x0_clip: d_x0_clip(),
            additive_joint: false,
            class: None,
        }
    }
}

fn d_eps_max() -> f64 {
    1e-3
}
fn d_max_iters() -> usize {
    50
}

/// `[sinkhorn]` section. `lambda` defaults to 1/sqrt(d_head).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornSection {
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "d_eps_max")]
    pub eps_max: f64,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
}

impl Default for SinkhornSection {
    fn default() -> Self {
        SinkhornSection {
            lambda: None,
            eps_max: d_eps_max(),
            max_iters: d_max_iters(),
        }
    }
}

fn d_steps() -> usize {
    25
}
fn d_chains() -> usize {
    24
}

/// `[sample]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_chains")]
    pub chains: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            steps: d_steps(),
            chains: d_chains(),
        }
    }
}

fn d_reference_examples() -> usize {
    256
}
fn d_reference_seed() -> u64 {
    999
}
fn d_coverage_radius() -> f64 {
    sinkhorn_guidance::data::GAUSS8_SIGMA
}

/// `[eval]` section. The reference cloud is regenerated from the analytic
/// dataset, so evaluation needs no stored ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_reference_examples")]
    pub reference_examples: usize,
    #[serde(default = "d_reference_seed")]
    pub reference_seed: u64,
    #[serde(default = "d_coverage_radius")]
    pub coverage_radius: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            reference_examples: d_reference_examples(),
            reference_seed: d_reference_seed(),
            coverage_radius: d_coverage_radius(),
        }
    }
}

fn d_scales() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
}

/// `[sweep]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_scales")]
    pub scales: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            scales: d_scales(),
        }
    }
}

/// The full resolved run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub sinkhorn: SinkhornSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Defaults, optionally overlaid with a TOML file.
    pub fn load(path: Option<&Path>) -> CliResult<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn dataset(&self) -> CliResult<Dataset> {
        Ok(Dataset::parse(&self.data.dataset)?)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let num_classes = match self.model.num_classes {
            Some(n) => n,
            None => self.dataset()?.num_classes(),
        };
        Ok(ModelConfig {
            num_classes,
            n_tokens: self.model.n_tokens,
            point_dim: self.model.point_dim,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_blocks: self.model.n_blocks,
            ff_dim: self.model.ff_dim,
        })
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(make_schedule(
            self.schedule.t_max,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            p_drop: self.train.p_drop,
        }
    }

    /// The Sinkhorn solver knobs, concrete for `d_head`.
    pub fn sinkhorn_config(&self, d_head: usize) -> SinkhornConfig {
        let base = match self.sinkhorn.lambda {
            Some(l) => SinkhornConfig::new(l),
            None => SinkhornConfig::for_head_dim(d_head),
        };
        base.with_eps_max(self.sinkhorn.eps_max)
            .with_max_iters(self.sinkhorn.max_iters)
    }

    pub fn guidance_spec(&self, model: &ModelConfig) -> CliResult<GuidanceSpec> {
        let method = GuidanceMethod::parse(&self.guidance.method)?;
        let layers = match &self.guidance.layers {
            Some(ids) => LayerSelection::new(ids.iter().copied()),
            None => LayerSelection::middle(model.n_blocks),
        };
        let mut spec = GuidanceSpec::new(method, self.guidance.s, layers);
        spec.cfg_scale = self.guidance.cfg_scale;
        spec.blur_sigma = self.guidance.blur_sigma;
        spec.x0_clip = self.guidance.x0_clip;
        spec.additive_joint = self.guidance.additive_joint;
        spec.sinkhorn_cfg = Some(self.sinkhorn_config(model.d_head()));
        Ok(spec)
    }

    /// FNV-1a hash of the resolved configuration, as a fixed-width hex tag.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

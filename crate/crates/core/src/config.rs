//! Run configuration: every ablation axis, with JSON loading and dotted-path
//! overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, SptError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub num_mask_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            encoder_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_heads: 4,
            num_mask_tokens: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Side length of the embedding grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SptError::Config(m));
        if self.image_size == 0 || self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return fail(format!(
                "model.patch_size must be a power of two >= 2 (got {})",
                self.patch_size
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.image_size / self.patch_size < 2 {
            return fail("the embedding grid needs at least 2x2 tokens".into());
        }
        if self.encoder_heads == 0 || !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return fail(format!(
                "model.encoder_dim {} is not divisible by model.encoder_heads {}",
                self.encoder_dim, self.encoder_heads
            ));
        }
        if self.encoder_depth == 0 {
            return fail("model.encoder_depth must be at least 1".into());
        }
        if self.decoder_dim != self.encoder_dim {
            return fail("model.decoder_dim must equal model.encoder_dim".into());
        }
        if self.decoder_heads == 0 || !(self.decoder_dim / 2).is_multiple_of(self.decoder_heads) {
            return fail(format!(
                "model.decoder_dim / 2 = {} is not divisible by model.decoder_heads {}",
                self.decoder_dim / 2,
                self.decoder_heads
            ));
        }
        if !self.decoder_dim.is_multiple_of(8) || !self.decoder_dim.is_multiple_of(2) {
            return fail("model.decoder_dim must be a multiple of 8".into());
        }
        if self.num_mask_tokens == 0 {
            return fail("model.num_mask_tokens must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftKind {
    Lora,
    Dora,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftTarget {
    ImageEncoder,
    PromptEncoder,
    DraftDecoder,
    RefineDecoder,
}

impl PeftTarget {
    pub const ALL: [PeftTarget; 4] = [
        PeftTarget::ImageEncoder,
        PeftTarget::PromptEncoder,
        PeftTarget::DraftDecoder,
        PeftTarget::RefineDecoder,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            PeftTarget::ImageEncoder => "image_encoder",
            PeftTarget::PromptEncoder => "prompt_encoder",
            PeftTarget::DraftDecoder => "draft_decoder",
            PeftTarget::RefineDecoder => "refine_decoder",
        }
    }
}

/// Role of a linear map inside its block; PEFT selects layers by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Query,
    Key,
    Value,
    Output,
    Mlp,
    Head,
    Upsample,
    Embed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub kind: PeftKind,
    pub rank: usize,
    pub scaling: f64,
    pub targets: Vec<PeftTarget>,
    pub target_layer_kinds: Vec<LayerKind>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            kind: PeftKind::Lora,
            rank: 8,
            scaling: 1.0,
            targets: PeftTarget::ALL.to_vec(),
            target_layer_kinds: vec![LayerKind::Query, LayerKind::Key, LayerKind::Value, LayerKind::Output],
        }
    }
}

impl PeftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(SptError::Config("peft.rank must be at least 1".into()));
        }
        if !self.scaling.is_finite() {
            return Err(SptError::Config("peft.scaling must be finite".into()));
        }
        Ok(())
    }

    pub fn targets(&self, t: PeftTarget) -> bool {
        self.targets.contains(&t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Tw1,
    Tw2,
    Both,
    None,
}

impl Placement {
    /// Whether a relation step follows two-way block `block` (0 or 1).
    pub fn after_block(self, block: usize) -> bool {
        matches!(
            (self, block),
            (Placement::Both, 0 | 1) | (Placement::Tw1, 0) | (Placement::Tw2, 1)
        )
    }

    pub fn parse(token: &str) -> Result<Self> {
        serde_json::from_value(Value::String(token.to_string()))
            .map_err(|_| SptError::Config(format!("invalid placement {token:?}; expected tw1, tw2, both or none")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VraConfig {
    pub alpha: f64,
    pub placement: Placement,
    pub use_raw_relation: bool,
}

impl Default for VraConfig {
    fn default() -> Self {
        VraConfig {
            alpha: 0.25,
            placement: Placement::Both,
            use_raw_relation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdtConfig {
    pub enabled: bool,
    pub share_decoder: bool,
    pub detach_draft: bool,
}

impl Default for SdtConfig {
    fn default() -> Self {
        SdtConfig {
            enabled: true,
            share_decoder: false,
            detach_draft: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    OneBox,
    MultiBoxes,
    Point5,
    Point10,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [
        PromptMode::OneBox,
        PromptMode::MultiBoxes,
        PromptMode::Point5,
        PromptMode::Point10,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptMode::OneBox => "one_box",
            PromptMode::MultiBoxes => "multi_boxes",
            PromptMode::Point5 => "point5",
            PromptMode::Point10 => "point10",
        }
    }
}

/// Prompt protocol used while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPrompt {
    /// A mode drawn uniformly per image per epoch.
    Mixed,
    OneBox,
    MultiBoxes,
    Point5,
    Point10,
}

impl TrainPrompt {
    pub fn fixed(self) -> Option<PromptMode> {
        match self {
            TrainPrompt::Mixed => None,
            TrainPrompt::OneBox => Some(PromptMode::OneBox),
            TrainPrompt::MultiBoxes => Some(PromptMode::MultiBoxes),
            TrainPrompt::Point5 => Some(PromptMode::Point5),
            TrainPrompt::Point10 => Some(PromptMode::Point10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub prompt_mode: TrainPrompt,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            lr: 1e-3,
            lr_drop_epoch: 10,
            lr_drop_factor: 0.1,
            batch_size: 8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            prompt_mode: TrainPrompt::Mixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(SptError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be positive");
        }
        if self.lr_drop_epoch > self.epochs {
            return fail("train.lr_drop_epoch must not exceed train.epochs");
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return fail("train.lr_drop_factor must be positive");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("train.adam_eps must be positive and train.weight_decay non-negative");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub size: usize,
    pub min_area: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_train: 512,
            n_eval: 128,
            size: 64,
            min_area: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<PromptMode>,
    pub point_seed: u64,
    /// Boundary band in pixels; `None` selects 2% of the image diagonal.
    pub biou_band: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            modes: PromptMode::ALL.to_vec(),
            point_seed: 0,
            biou_band: None,
        }
    }
}

/// Full-parameter training of the base model on the object domain, which
/// stands in for the pretrained weights that fine-tuning starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub data_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            data_seed: 1_000,
            n_train: 1024,
            n_eval: 64,
            epochs: 12,
            lr: 1e-3,
            lr_drop_epoch: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub vra: VraConfig,
    pub sdt: SdtConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = RunConfig::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without checking invariants, for configs that later
    /// overrides complete.
    pub fn parse_unvalidated(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SptError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.peft.validate()?;
        self.train.validate()?;
        if !(self.vra.alpha >= 0.0 && self.vra.alpha.is_finite()) {
            return Err(SptError::Config("vra.alpha must be non-negative".into()));
        }
        if self.data.size != self.model.image_size {
            return Err(SptError::Config(format!(
                "data.size {} must equal model.image_size {}",
                self.data.size, self.model.image_size
            )));
        }
        if self.data.min_area == 0 {
            return Err(SptError::Config("data.min_area must be at least 1".into()));
        }
        if self.eval.biou_band == Some(0) {
            return Err(SptError::Config("eval.biou_band must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets the field at a dotted `path` (e.g. `sdt.enabled`) from its
    /// command-line spelling. Lists are comma-separated; an empty string is
    /// the empty list. Does not re-validate.
    pub fn set_path(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| SptError::Config(format!("unknown config field {path:?}")))?;
        }
        if slot.is_object() {
            return Err(SptError::Config(format!("{path:?} is a section, not a field")));
        }
        *slot = match slot {
            Value::Array(_) => Value::Array(
                raw.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| Value::String(s.to_string()))
                    .collect(),
            ),
            Value::String(_) => Value::String(raw.to_string()),
            _ => match raw.trim() {
                "" | "null" | "none" => Value::Null,
                t => serde_json::from_str(t).unwrap_or_else(|_| Value::String(t.to_string())),
            },
        };
        *self = serde_json::from_value(root)
            .map_err(|e| SptError::Config(format!("bad value {raw:?} for {path}: {e}")))?;
        Ok(())
    }

    /// Every settable dotted path, sorted.
    pub fn field_paths() -> Vec<String> {
        let root = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        for (section, fields) in root.as_object().expect("object") {
            for name in fields.as_object().expect("section").keys() {
                out.push(format!("{section}.{name}"));
            }
        }
        out
    }
}

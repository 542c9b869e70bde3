//! Base-model pretraining on the object domain.
//!
//! Fine-tuning assumes a base model that already segments prompted
//! objects. Randomly initialized weights do not, so the base is first
//! trained end to end on large filled shapes, then frozen. The defect
//! domain is never seen during this stage.

use crate::checkpoint::Checkpoint;
use crate::config::{Placement, RunConfig, TrainPrompt};
use crate::error::{Result, SptError};
use crate::model::SptModel;
use crate::synth::{generate_dataset, GeneratorSpec, Split, SyntheticSample};
use crate::train::{train, EpochRecord};

/// The run configuration of the pretraining stage: no PEFT, a shared
/// decoder for both passes, no relation scales, and the `pretrain` schedule in place of `train`.
pub fn base_config(cfg: &RunConfig) -> RunConfig {
    let mut b = cfg.clone();
    let p = &cfg.pretrain;
    b.peft.targets.clear();
    // One decoder applied twice, so the base also learns to read mask
    // prompts (its own first-pass prediction).
    b.sdt.enabled = true;
    b.sdt.share_decoder = true;
    b.sdt.detach_draft = false;
    b.vra.placement = Placement::None;
    b.train.epochs = p.epochs;
    b.train.lr = p.lr;
    b.train.lr_drop_epoch = p.lr_drop_epoch;
    b.train.batch_size = p.batch_size;
    b.train.seed = p.seed;
    b.train.prompt_mode = TrainPrompt::Mixed;
    b.data.seed = p.data_seed;
    b.data.n_train = p.n_train;
    b.data.n_eval = p.n_eval;
    b
}

/// Object-domain training and validation splits.
pub fn source_data(cfg: &RunConfig) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let p = &cfg.pretrain;
    let spec = GeneratorSpec::objects(cfg.model.image_size, cfg.data.min_area);
    Ok((
        generate_dataset(p.data_seed, Split::Train, p.n_train, &spec)?,
        generate_dataset(p.data_seed, Split::Eval, p.n_eval, &spec)?,
    ))
}

/// Trains every base parameter, then freezes them again.
pub fn pretrain_base(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<(SptModel, Vec<EpochRecord>)> {
    let bc = base_config(cfg);
    let mut model = SptModel::new(&bc)?;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        model.params.set_trainable(id, true);
    }
    let (train_set, eval_set) = source_data(cfg)?;
    let log = train(&mut model, &train_set, &eval_set, &bc, on_epoch)?;
    for &id in &ids {
        model.params.set_trainable(id, false);
    }
    Ok((model, log))
}

/// Builds the model of `cfg` on top of a stored base. The base must have
/// been built with the same model section (including its seed, which fixes
/// the prompt encoder's Fourier basis).
pub fn model_from_base(cfg: &RunConfig, base: Checkpoint) -> Result<SptModel> {
    if base.header.config.model != cfg.model {
        return Err(SptError::Schema("base checkpoint was built with a different model section".into()));
    }
    let base = base.into_model(None)?;
    SptModel::with_base(cfg, Some(&base.params))
}

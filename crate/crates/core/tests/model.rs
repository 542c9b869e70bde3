mod common;

use std::sync::Arc;

use common::{is_peft_param, linf, logits, random_image, random_prompts, rng, small_config};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use spt_core::config::Placement;
use spt_core::dataset::Dataset;
use spt_core::sdt::compute_loss;
use spt_core::{train, Mask, PromptSet, SptModel};
use spt_tensor::{Tape, Tensor};

#[test]
fn output_shapes_and_token_bookkeeping() {
    let cfg = small_config();
    let model = SptModel::new(&cfg).unwrap();
    let mut r = rng(1);
    for _ in 0..4 {
        let image = random_image(&mut r, 32);
        let prompts = random_prompts(&mut r, 32);
        let mut tape = Tape::no_grad();
        let p = model.params.bind(&mut tape, false);
        let e = model.encode_images(&mut tape, &p, &[&image]).unwrap();
        assert_eq!(tape.shape(e), &[1, 16, cfg.model.encoder_dim]);
        let e = model.image_tokens(&mut tape, e, 0).unwrap();
        let out = model.forward(&mut tape, &p, e, &prompts).unwrap();
        for stage in [out.draft.as_ref().unwrap(), &out.refine] {
            assert_eq!(tape.shape(stage.logits), &[32, 32]);
            assert_eq!(tape.shape(stage.iou), &[1, cfg.model.num_mask_tokens]);
            let tokens = prompts.sparse_len() + 1 + cfg.model.num_mask_tokens;
            assert_eq!(tape.shape(stage.t_out), &[tokens, cfg.model.decoder_dim]);
            assert!(tape.value(stage.logits).is_finite());
        }
    }
}

#[test]
fn mask_prompt_changes_the_output() {
    let model = SptModel::new(&small_config()).unwrap();
    let mut r = rng(2);
    let image = random_image(&mut r, 32);
    let plain = random_prompts(&mut r, 32);
    let mut with_mask = plain.clone();
    with_mask.mask_prompt = Some(Tensor::new(vec![32, 32], (0..1024).map(|_| r.gen::<f64>()).collect()).unwrap());
    let (_, a) = logits(&model, &image, &plain);
    let (_, b) = logits(&model, &image, &with_mask);
    assert!(linf(&a, &b) > 0.0);
}

#[test]
fn draft_starts_as_copy_of_refine() {
    let model = SptModel::new(&small_config()).unwrap();
    let mut compared = 0;
    for e in model.params.entries() {
        let Some(rest) = e.name.strip_prefix("draft_decoder.") else { continue };
        if is_peft_param(rest) {
            continue;
        }
        let twin = model.params.lookup(&format!("refine_decoder.{rest}")).unwrap();
        assert_eq!(*e.value, *model.params.value(twin), "{rest}");
        compared += 1;
    }
    assert!(compared > 10);

    // With the no-mask embedding as dense input both decoders agree.
    let mut r = rng(3);
    for _ in 0..3 {
        let image = random_image(&mut r, 32);
        let prompts = random_prompts(&mut r, 32);
        let mut tape = Tape::no_grad();
        let p = model.params.bind(&mut tape, false);
        let e = model.embed_images(&[&image]).unwrap().remove(0);
        let e = tape.constant(e);
        let disp = model.display(&mut tape, &p, e, &prompts).unwrap();
        let draft = model.forward_draft(&mut tape, &p, &disp).unwrap();
        let refine = model.forward_refine(&mut tape, &p, &disp, disp.dense).unwrap();
        assert!(linf(tape.value(draft.logits), tape.value(refine.logits)) < 1e-12);
    }
}

#[test]
fn loading_a_base_copies_weights_and_seeds_the_draft() {
    let mut base_cfg = small_config();
    base_cfg.peft.targets.clear();
    base_cfg.sdt.share_decoder = true;
    let mut base = SptModel::new(&base_cfg).unwrap();
    // Perturb the base so that a copy is distinguishable from a fresh build.
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut r = rng(4);
    let ids: Vec<_> = base.params.ids().collect();
    for id in ids {
        for v in base.params.value_mut(id).data_mut() {
            *v += noise.sample(&mut r);
        }
    }

    let cfg = small_config();
    let model = SptModel::with_base(&cfg, Some(&base.params)).unwrap();
    for e in model.params.entries() {
        if is_peft_param(&e.name) || e.name.contains(".vra.") {
            continue;
        }
        let source = e.name.replace("draft_decoder.", "refine_decoder.");
        assert_eq!(*e.value, *base.params.value(base.params.lookup(&source).unwrap()), "{}", e.name);
    }
    let image = random_image(&mut r, 32);
    let prompts = random_prompts(&mut r, 32);
    // The base applies its one decoder twice; the copy has two decoders with equal weights.
    let (bd, br) = logits(&base, &image, &prompts);
    let (md, mr) = logits(&model, &image, &prompts);
    assert!(linf(&bd.unwrap(), &md.unwrap()) < 1e-12);
    assert!(linf(&br, &mr) < 1e-12);
}

#[test]
fn zero_relation_scale_matches_model_without_relation() {
    let spt = SptModel::new(&small_config()).unwrap();
    let mut cfg = small_config();
    cfg.vra.placement = Placement::None;
    let plain = SptModel::new(&cfg).unwrap();
    assert!(spt.params.len() > plain.params.len());
    let mut r = rng(5);
    for _ in 0..4 {
        let image = random_image(&mut r, 32);
        let prompts = random_prompts(&mut r, 32);
        let (sd, sr) = logits(&spt, &image, &prompts);
        let (pd, pr) = logits(&plain, &image, &prompts);
        assert!(linf(&sr, &pr) < 1e-12);
        assert!(linf(&sd.unwrap(), &pd.unwrap()) < 1e-12);
    }
}

/// Gradient of the refine-only loss on the draft decoder's trainable parameters.
fn draft_grad_norm(detach: bool) -> f64 {
    let mut cfg = small_config();
    cfg.sdt.detach_draft = detach;
    let model = SptModel::new(&cfg).unwrap();
    let mut r = rng(6);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let mut total = None;
    for _ in 0..2 {
        let image = random_image(&mut r, 32);
        let prompts = random_prompts(&mut r, 32);
        let target = Mask::from_fn(32, 32, |x, y| x > 8 && x < 20 && y > 4 && y < 16);
        let e = model.encode_images(&mut tape, &p, &[&image]).unwrap();
        let e = model.image_tokens(&mut tape, e, 0).unwrap();
        let out = model.forward(&mut tape, &p, e, &prompts).unwrap();
        let l = compute_loss(&mut tape, None, out.refine.logits, &Arc::new(target.to_tensor())).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).unwrap(),
        });
    }
    tape.backward(total.unwrap()).unwrap();
    let mut sum = 0.0;
    for id in model.params.trainable_ids() {
        if model.params.name(id).starts_with("draft_decoder.") {
            sum += tape.grad(p[id]).data().iter().map(|g| g * g).sum::<f64>();
        }
    }
    sum.sqrt()
}

#[test]
fn refine_loss_reaches_the_draft_decoder() {
    assert!(draft_grad_norm(false) > 0.0);
    assert_eq!(draft_grad_norm(true), 0.0);
}

#[test]
fn prediction_threshold_counts_zero_as_foreground() {
    let m = Mask::from_logits(&Tensor::new(vec![1, 3], vec![-10.0, 0.0, 10.0]).unwrap()).unwrap();
    assert_eq!(m.bits(), &[false, true, true]);
    assert!(Mask::from_logits(&Tensor::full(&[4, 4], -10.0)).unwrap().is_empty());
    assert_eq!(Mask::from_logits(&Tensor::full(&[4, 4], 10.0)).unwrap().count(), 16);
}

#[test]
fn predict_rejects_out_of_range_prompts() {
    let model = SptModel::new(&small_config()).unwrap();
    let image = random_image(&mut rng(7), 32);
    assert!(model.predict(&image, &PromptSet::default()).is_err());
    let far = PromptSet::from_points(vec![spt_core::Point::foreground(40.0, 2.0)]);
    assert!(model.predict(&image, &far).is_err());
}

fn tiny_data() -> Dataset {
    let mut cfg = small_config();
    cfg.data.n_train = 8;
    cfg.data.n_eval = 3;
    Dataset::generate(&cfg.data).unwrap()
}

#[test]
fn training_moves_only_trainable_parameters() {
    let mut cfg = small_config();
    cfg.train.epochs = 2;
    cfg.train.lr_drop_epoch = 1;
    cfg.train.batch_size = 4;
    let data = tiny_data();
    let mut model = SptModel::new(&cfg).unwrap();
    let frozen = model.params.checksum(|e| !e.trainable);
    let trainable = model.params.checksum(|e| e.trainable);
    let log = train::train(&mut model, &data.train, &data.eval, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log[1].lr, cfg.train.lr * cfg.train.lr_drop_factor);
    assert_eq!(model.params.checksum(|e| !e.trainable), frozen);
    assert_ne!(model.params.checksum(|e| e.trainable), trainable);
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    cfg.train.lr_drop_epoch = 0;
    let data = tiny_data();
    let mut model = SptModel::new(&cfg).unwrap();
    let before = model.params.checksum(|_| true);
    let log = train::train(&mut model, &data.train, &data.eval, &cfg, |_| panic!("no epochs")).unwrap();
    assert!(log.is_empty());
    assert_eq!(model.params.checksum(|_| true), before);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = small_config();
    cfg.train.epochs = 2;
    cfg.train.lr_drop_epoch = 2;
    cfg.train.batch_size = 4;
    let data = tiny_data();
    let run = || {
        let mut model = SptModel::new(&cfg).unwrap();
        let log = train::train(&mut model, &data.train, &data.eval, &cfg, |_| {}).unwrap();
        (log.into_iter().map(|r| (r.epoch, r.lr, r.loss, r.draft_miou, r.refine_miou)).collect::<Vec<_>>(), model.params.checksum(|_| true))
    };
    assert_eq!(run(), run());
}

#[test]
fn divergence_restores_the_last_good_epoch() {
    let mut cfg = small_config();
    cfg.train.epochs = 3;
    cfg.train.lr_drop_epoch = 3;
    cfg.train.lr = 1e200;
    cfg.train.batch_size = 4;
    let data = tiny_data();
    let mut model = SptModel::new(&cfg).unwrap();
    let start = model.params.checksum(|_| true);
    let mut epochs = 0;
    let err = train::train(&mut model, &data.train, &data.eval, &cfg, |_| epochs += 1).unwrap_err();
    assert!(matches!(err, spt_core::SptError::Diverged { .. }), "{err}");
    if epochs == 0 {
        assert_eq!(model.params.checksum(|_| true), start);
    }
    assert!(model.params.entries().all(|e| e.value.is_finite()));
}

//! Model wiring, persistence and the training-loop contracts.

mod common;

use skelae::autodiff::Tape;
use skelae::checkpoint::Checkpoint;
use skelae::data::{synth_dataset, DatasetSplit, SynthConfig};
use skelae::graph::SkeletonGraph;
use skelae::model::{stack_batch, KernelShape, Model, ModelConfig};
use skelae::training::{train, Combine, RunOptions, TrainConfig, Trainer, Variant};
use skelae::viewpoint::SsviHead;
use skelae::{Error, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        joints: 9,
        frames: 8,
        channels: vec![4, 6, 6],
        pools: vec![(1, 2), (1, 2), (1, 2)],
        latent_dim: 8,
        ..ModelConfig::default()
    }
}

fn small_data() -> DatasetSplit {
    synth_dataset(&SynthConfig { classes: 2, per_class: 10, joints: 9, frames: 8, seed: 3, ..SynthConfig::default() })
        .unwrap()
}

fn small_train(variant: Variant) -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 4, ssvi_hidden: 8, seed: 11, ..TrainConfig::default() }.with_variant(variant)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn default_and_wide_latent_shapes() {
    let x = common::uniform(&mut common::rng(0), &[2, 3, 25, 64], -1.0, 1.0);
    let model = Model::build(&ModelConfig::default(), 0).unwrap();
    assert_eq!(model.encode_batch(&x).unwrap().shape(), &[2, 128]);
    let y = model.reconstruct_batch(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.is_finite());
    assert_eq!(bits(&y), bits(&model.reconstruct_batch(&x).unwrap()), "eval mode is deterministic");

    let wide = Model::build(&ModelConfig { latent_dim: 2048, ..ModelConfig::default() }, 0).unwrap();
    assert_eq!(wide.encode_batch(&x).unwrap().shape(), &[2, 2048]);
}

#[test]
fn latent_width_mismatch_is_rejected() {
    let model = Model::build(&small_config(), 0).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let z = tape.constant(Tensor::zeros(&[1, 5]));
    let x = tape.constant(common::uniform(&mut common::rng(1), &[1, 3, 9, 8], -1.0, 1.0));
    let enc = model.plan.encode(&mut tape, &p, x).unwrap();
    assert!(model.plan.decode(&mut tape, &p, z, &enc.pools, skelae::model::NormMode::Batch).is_err());
}

#[test]
fn bad_config_names_the_block() {
    let cfg = ModelConfig { frames: 12, pools: vec![(1, 2), (1, 2), (1, 2)], ..small_config() };
    let err = Model::build(&cfg, 0).unwrap_err().to_string();
    assert!(err.contains("block 3"), "{err}");
}

/// With every encoder convolution zeroed, each block is its identity skip
/// followed by the pool, so unit pools hand the raw input to the latent layer.
#[test]
fn zeroed_blocks_pass_through_the_skip() {
    let cfg = ModelConfig {
        joints: 2,
        frames: 4,
        channels: vec![3, 3, 3],
        kernels: vec![KernelShape::K1x3; 3],
        pools: vec![(1, 1); 3],
        latent_dim: 5,
        ..ModelConfig::default()
    };
    let mut model = Model::build(&cfg, 2).unwrap();
    assert!(model.params.names().all(|n| !n.contains("skip")), "equal widths need no projection");
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("encoder.block") {
            t.data_mut().fill(0.0);
        }
    }
    let x = common::uniform(&mut common::rng(3), &[2, 3, 2, 4], -1.0, 1.0);
    let z = model.encode_batch(&x).unwrap();
    let w = model.params.get("encoder.latent.weight").unwrap();
    let b = model.params.get("encoder.latent.bias").unwrap();
    for n in 0..2 {
        for k in 0..5 {
            let mut want = b.data()[k];
            for f in 0..24 {
                want += x.data()[n * 24 + f] * w.data()[f * 5 + k];
            }
            assert!((z.data()[n * 5 + k] - want).abs() < 1e-12);
        }
    }

    // A pooled block keeps only the window maxima of its input.
    let cfg = ModelConfig { pools: vec![(1, 2), (1, 1), (1, 1)], ..cfg };
    let mut model = Model::build(&cfg, 2).unwrap();
    for (name, t) in model.params.iter_mut() {
        if name.starts_with("encoder.block") {
            t.data_mut().fill(0.0);
        }
    }
    let z = model.encode_batch(&x).unwrap();
    let w = model.params.get("encoder.latent.weight").unwrap();
    let b = model.params.get("encoder.latent.bias").unwrap();
    for n in 0..2 {
        let pooled: Vec<f64> = x.data()[n * 24..(n + 1) * 24].chunks(2).map(|p| p[0].max(p[1])).collect();
        for k in 0..5 {
            let want = b.data()[k] + pooled.iter().enumerate().map(|(f, v)| v * w.data()[f * 5 + k]).sum::<f64>();
            assert!((z.data()[n * 5 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = small_config();
    assert_eq!(Model::build(&cfg, 1).unwrap().params.scalar_count(), cfg.param_count().unwrap());
    assert_eq!(Model::build(&cfg, 9).unwrap().params.scalar_count(), cfg.param_count().unwrap());
    assert_eq!(Model::build(&cfg, 4).unwrap(), Model::build(&cfg, 4).unwrap());
}

#[test]
fn checkpoint_bytes_survive_save_load_save() {
    let data = small_data();
    let mut trainer = Trainer::new(Model::build(&small_config(), 0).unwrap(), small_train(Variant::GraeL)).unwrap();
    trainer
        .run(&data.train, Some(&SkeletonGraph::stick9()), &RunOptions { stop_at: Some(3), ..Default::default() })
        .unwrap();
    let ckpt = trainer.checkpoint();
    let bytes = ckpt.encode();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.encode(), bytes);
    assert!(!dir.path().join("run.ckpt.tmp").exists());
}

#[test]
fn optimizer_steps_per_batch() {
    let data = small_data();
    let graph = SkeletonGraph::stick9();
    let cases = [
        (Variant::Ae, Combine::Sequential, 1),
        (Variant::AeL, Combine::Sequential, 2),
        (Variant::Grae, Combine::Sequential, 2),
        (Variant::GraeL, Combine::Sequential, 3),
        (Variant::AeL, Combine::WeightedSum, 1),
        (Variant::GraeL, Combine::WeightedSum, 2),
    ];
    for (variant, combine, per_batch) in cases {
        let cfg = TrainConfig { combine, ..small_train(variant) };
        let mut t = Trainer::new(Model::build(&small_config(), 0).unwrap(), cfg).unwrap();
        t.run(&data.train, Some(&graph), &RunOptions { stop_at: Some(4), ..Default::default() }).unwrap();
        assert_eq!(t.adam.steps, 4 * per_batch, "{variant:?} {combine:?}");
        let rec = &t.log.records;
        assert_eq!(rec.len(), 4);
        assert_eq!(rec.iter().all(|r| r.r_skel.is_some()), variant.flags().0);
        assert_eq!(rec.iter().all(|r| r.ssvi.is_some()), variant.flags().1);
    }
}

/// Each parameter's Adam counter records how many updates touched it: the
/// rotation branch moves encoder and head but never the decoder.
#[test]
fn ssvi_branch_never_updates_the_decoder() {
    let data = small_data();
    for variant in [Variant::Grae, Variant::GraeL] {
        let mut t = Trainer::new(Model::build(&small_config(), 0).unwrap(), small_train(variant)).unwrap();
        let batches = 5;
        t.run(
            &data.train,
            Some(&SkeletonGraph::stick9()),
            &RunOptions { stop_at: Some(batches), ..Default::default() },
        )
        .unwrap();
        let recon_steps = if variant == Variant::GraeL { 2 } else { 1 };
        for (name, mom) in &t.adam.moments {
            let want = if name.starts_with("decoder.") {
                recon_steps * batches
            } else if name.starts_with("ssvi.") {
                batches
            } else {
                (recon_steps + 1) * batches
            };
            assert_eq!(mom.t, want, "{variant:?} {name}");
        }
        assert!(SsviHead::from_params(&t.model.params, 1.0).unwrap().is_some());
    }
}

#[test]
fn ae_log_holds_only_reconstruction_losses() {
    let data = small_data();
    let (_, log) =
        train(Model::build(&small_config(), 0).unwrap(), &data.train, None, &small_train(Variant::Ae)).unwrap();
    let expected = 3 * data.train.len().div_ceil(4);
    assert_eq!(log.records.len(), expected);
    assert!(log.records.iter().all(|r| r.r_skel.is_none() && r.ssvi.is_none()));
    assert!(log.records.windows(2).all(|w| w[0].step < w[1].step));
    let mut jsonl = Vec::new();
    log.write_jsonl(&mut jsonl).unwrap();
    let text = String::from_utf8(jsonl).unwrap();
    assert_eq!(text.lines().count(), expected);
    assert!(!text.contains("r_skel") && !text.contains("ssvi"), "{text}");
}

#[test]
fn same_seed_same_trajectory() {
    let data = small_data();
    let graph = SkeletonGraph::stick9();
    for variant in Variant::ALL {
        let run = || {
            let mut t = Trainer::new(Model::build(&small_config(), 5).unwrap(), small_train(variant)).unwrap();
            let mut snapshots = Vec::new();
            for step in 1..=5 {
                t.run(&data.train, Some(&graph), &RunOptions { stop_at: Some(step), ..Default::default() }).unwrap();
                snapshots.push(t.model.params.iter().flat_map(|(_, p)| bits(p)).collect::<Vec<_>>());
            }
            (t.log.records.iter().map(|r| r.loss_bits()).collect::<Vec<_>>(), snapshots)
        };
        assert_eq!(run(), run(), "{variant:?}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = small_data();
    let graph = SkeletonGraph::stick9();
    for variant in [Variant::AeL, Variant::GraeL] {
        let cfg = small_train(variant);
        let mut straight = Trainer::new(Model::build(&small_config(), 1).unwrap(), cfg.clone()).unwrap();
        straight.run(&data.train, Some(&graph), &RunOptions::default()).unwrap();

        // Stop mid-epoch so the resumed run has to rebuild the shuffle.
        let mut first = Trainer::new(Model::build(&small_config(), 1).unwrap(), cfg).unwrap();
        first.run(&data.train, Some(&graph), &RunOptions { stop_at: Some(6), ..Default::default() }).unwrap();
        let restored = Checkpoint::decode(&first.checkpoint().encode()).unwrap();
        let mut resumed = Trainer::resume(&restored).unwrap();
        assert_eq!(resumed.step, 6);
        resumed.run(&data.train, Some(&graph), &RunOptions::default()).unwrap();

        assert_eq!(resumed.step, straight.step);
        assert_eq!(resumed.model, straight.model, "{variant:?}");
        assert_eq!(resumed.adam, straight.adam);
        let tail: Vec<_> = straight.log.records[6..].iter().map(|r| r.loss_bits()).collect();
        assert_eq!(resumed.log.records.iter().map(|r| r.loss_bits()).collect::<Vec<_>>(), tail);
    }
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let cfg = TrainConfig { lr: 1e300, checkpoint_every: 1, ..small_train(Variant::Ae) };
    let mut t = Trainer::new(Model::build(&small_config(), 0).unwrap(), cfg).unwrap();
    let err = t
        .run(&data.train, None, &RunOptions { checkpoint_path: Some(path.clone()), ..Default::default() })
        .unwrap_err();
    let Error::Diverged { step } = err else { panic!("expected divergence, got {err}") };
    assert!(step >= 1);
    let saved = Checkpoint::load(&path).unwrap();
    assert_eq!(saved.step, step);
    assert!(saved.params.iter().all(|(_, p)| p.is_finite()));
    let resumed = Trainer::resume(&saved).unwrap();
    assert_eq!(resumed.step, step);
}

#[test]
fn training_preconditions() {
    let data = small_data();
    let model = || Model::build(&small_config(), 0).unwrap();
    assert!(train(model(), &[], None, &small_train(Variant::Ae)).is_err());
    let err = train(model(), &data.train, None, &small_train(Variant::AeL)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train(model(), &data.train, Some(&SkeletonGraph::ntu25()), &small_train(Variant::AeL)).unwrap_err();
    assert!(err.to_string().contains("joints"), "{err}");
    for bad in
        [TrainConfig { batch_size: 0, ..TrainConfig::default() }, TrainConfig { lr: 0.0, ..TrainConfig::default() }]
    {
        assert!(Trainer::new(model(), bad).is_err());
    }
}

#[test]
fn variant_flags_map_one_to_one() {
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, ["ae", "ae-l", "grae", "grae-l"]);
    assert_eq!(Variant::AeL.flags(), (true, false));
    assert_eq!(Variant::Grae.flags(), (false, true));
    assert_eq!(Variant::GraeL.flags(), (true, true));
    for v in Variant::ALL {
        assert_eq!(Variant::from_flags(v.flags().0, v.flags().1), v);
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("vae".parse::<Variant>().is_err());
}

#[test]
fn stacked_batches_keep_sample_order() {
    let data = small_data();
    let refs: Vec<_> = data.train.iter().take(3).collect();
    let x = stack_batch(&refs).unwrap();
    assert_eq!(x.shape(), &[3, 3, 9, 8]);
    assert_eq!(&x.data()[216..432], data.train[1].coords().data());
}

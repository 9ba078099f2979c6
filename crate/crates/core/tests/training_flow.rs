//! End-to-end training behavior on a tiny synthetic dataset.

use std::fs;
use std::path::PathBuf;

use devgan::checkpoint::{load_checkpoint, save_checkpoint};
use devgan::data::{generate_synthetic, SynthSpec, UnpairedDataset};
use devgan::networks::ModelKind;
use devgan::training::{
    train_epochs, train_step_proposed, Model, TrainConfig, TrainState, Trainer,
};

fn tiny_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch.image_size = 16;
    cfg.arch.base_channels = 4;
    cfg.arch.encoder_downsamples = 2;
    cfg.arch.translator_resblocks = 1;
    cfg.arch.disc_layers = 2;
    cfg.seed = seed;
    cfg
}

fn tiny_dataset(name: &str, count: usize) -> (PathBuf, UnpairedDataset) {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("flow_{name}"));
    let _ = fs::remove_dir_all(&root);
    let spec = SynthSpec {
        image_size: 16,
        count_a: count,
        count_b: count,
        test_count_a: 1,
        test_count_b: 1,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec, &root).unwrap();
    let ds = UnpairedDataset::load(&root.join("trainA"), &root.join("trainB")).unwrap();
    (root, ds)
}

fn param_bits(model: &Model) -> Vec<u64> {
    model
        .networks()
        .iter()
        .flat_map(|n| n.params.iter())
        .flat_map(|p| p.values.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let (_root, ds) = tiny_dataset("determinism", 6);
    for kind in [ModelKind::Proposed, ModelKind::Baseline] {
        let mut cfg = tiny_cfg(7);
        cfg.model = kind;
        cfg.epochs = 2;
        let run = || {
            let mut t = Trainer::new(&cfg, &ds).unwrap();
            let mut reports = Vec::new();
            for _ in 0..cfg.epochs {
                reports.extend(t.run_epoch().unwrap().1);
            }
            (param_bits(&t.state().model), reports)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(
            p1, p2,
            "{kind:?}: parameters diverged across identical runs"
        );
        assert_eq!(r1.len(), r2.len());
        for (a, b) in r1.iter().zip(&r2) {
            assert!(a.same_losses(b), "{kind:?}: step {} diverged", a.step_index);
        }
    }
}

#[test]
fn resume_from_checkpoint_equals_uninterrupted_run() {
    let (_root, ds) = tiny_dataset("resume", 5);
    let ckpt_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("flow_resume_out");
    let _ = fs::remove_dir_all(&ckpt_dir);
    fs::create_dir_all(&ckpt_dir).unwrap();
    let cfg = tiny_cfg(21);

    // Straight: two epochs in one go.
    let mut straight = Trainer::new(&cfg, &ds).unwrap();
    let (_, s1) = straight.run_epoch().unwrap();
    let (_, s2) = straight.run_epoch().unwrap();

    // Split: one epoch, checkpoint to disk, reload, one more.
    let mut first = Trainer::new(&cfg, &ds).unwrap();
    let (_, f1) = first.run_epoch().unwrap();
    let ckpt = ckpt_dir.join("mid.ckpt");
    save_checkpoint(first.state(), &cfg, &ckpt).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.epochs_completed, 1);
    let mut resumed = Trainer::from_state(&cfg, &ds, loaded).unwrap();
    let (_, f2) = resumed.run_epoch().unwrap();

    for (a, b) in s1.iter().zip(&f1) {
        assert!(
            a.same_losses(b),
            "first-epoch step {} diverged",
            a.step_index
        );
    }
    for (a, b) in s2.iter().zip(&f2) {
        assert!(
            a.same_losses(b),
            "post-resume step {} diverged",
            a.step_index
        );
    }
    assert_eq!(
        param_bits(&straight.state().model),
        param_bits(&resumed.state().model),
        "resumed parameters differ from the uninterrupted run"
    );
}

#[test]
fn resume_rejects_model_kind_mismatch() {
    let (_root, ds) = tiny_dataset("kindmismatch", 3);
    let cfg = tiny_cfg(3);
    let state = TrainState::fresh(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model = ModelKind::Baseline;
    assert!(Trainer::from_state(&other, &ds, state).is_err());
}

#[test]
fn zero_weights_with_detached_adversary_leave_parameters_unchanged() {
    let (_root, ds) = tiny_dataset("noop", 3);
    let mut cfg = tiny_cfg(11);
    cfg.weights.lambda_cyc = 0.0;
    cfg.weights.lambda_dev_a = 0.0;
    cfg.weights.lambda_dev_b = 0.0;
    cfg.detach_adversarial = true;
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();
    let before = param_bits(&trainer.state().model);
    trainer.run_epoch().unwrap();
    assert_eq!(before, param_bits(&trainer.state().model));
}

#[test]
fn repeated_steps_on_one_microbatch_reduce_generator_objective() {
    let (_root, ds) = tiny_dataset("overfit", 2);
    let cfg = tiny_cfg(13);
    let batches = ds.epoch_batches(1, 42);
    let (batch_a, batch_b) = &batches[0];
    let mut state = TrainState::fresh(&cfg).unwrap();
    let Model::Proposed(model) = &mut state.model else {
        panic!("proposed expected")
    };

    let objective = |r: &devgan::training::StepReport| {
        cfg.weights.lambda_cyc * r.loss_cyclic + r.loss_dev_a + r.loss_dev_b + r.loss_adv_gen
    };
    let mut first = None;
    let mut last = None;
    for step in 0..50 {
        let report = train_step_proposed(model, batch_a, batch_b, &cfg, step, false).unwrap();
        if step == 0 {
            first = Some(objective(&report));
        }
        last = Some(objective(&report));
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(
        last < first,
        "generator objective did not decrease on a fixed batch: {first} -> {last}"
    );
}

#[test]
fn train_epochs_writes_reports_and_final_checkpoint() {
    let (root, ds) = tiny_dataset("epochs", 4);
    let mut cfg = tiny_cfg(5);
    cfg.epochs = 2;
    cfg.checkpoint_every = 1;
    cfg.out_dir = root.join("out");
    let outcome = train_epochs(&cfg, &ds, None, |_| {}).unwrap();
    assert_eq!(outcome.steps.len(), 8, "4 images, batch 1, 2 epochs");
    assert_eq!(outcome.epochs.len(), 2);
    assert!(outcome.final_checkpoint.exists());
    assert!(cfg.out_dir.join("model_epoch1.ckpt").exists());
    let steps_csv = fs::read_to_string(cfg.out_dir.join("steps.csv")).unwrap();
    assert_eq!(steps_csv.lines().count(), 9, "header + 8 rows");
    assert!(steps_csv.starts_with("step_index,"));
    let epochs_csv = fs::read_to_string(cfg.out_dir.join("epochs.csv")).unwrap();
    assert_eq!(epochs_csv.lines().count(), 3);
    for r in &outcome.steps {
        for v in [
            r.loss_cyclic,
            r.loss_dev_a,
            r.loss_dev_b,
            r.loss_adv_gen,
            r.loss_adv_disc,
        ] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn autoencoder_training_reconstructs_constant_color_images() {
    // Reconstruction-only training (adversary detached, deviation weights
    // zero) must drive decode(encode(x)) close to x on flat-color images.
    let mut cfg = tiny_cfg(17);
    cfg.weights.lambda_dev_a = 0.0;
    cfg.weights.lambda_dev_b = 0.0;
    cfg.detach_adversarial = true;

    let size = cfg.arch.image_size;
    let colors = [
        (0.6, -0.4, 0.1),
        (-0.7, 0.3, 0.5),
        (0.2, 0.8, -0.6),
        (-0.3, -0.9, 0.9),
    ];
    let images: Vec<devgan::tensor::Tensor> = colors
        .iter()
        .map(|&(r, g, b)| {
            let mut data = Vec::with_capacity(3 * size * size);
            data.extend(std::iter::repeat_n(r, size * size));
            data.extend(std::iter::repeat_n(g, size * size));
            data.extend(std::iter::repeat_n(b, size * size));
            devgan::tensor::Tensor::new(vec![1, 3, size, size], data).unwrap()
        })
        .collect();

    let mut state = TrainState::fresh(&cfg).unwrap();
    let Model::Proposed(model) = &mut state.model else {
        panic!()
    };
    for step in 0..3000 {
        let img = &images[step % images.len()];
        train_step_proposed(model, img, img, &cfg, step, false).unwrap();
    }

    // Measure reconstruction on each training image.
    use devgan::networks::{decode, encode, BoundNet};
    use devgan::tensor::Tape;
    for img in &images {
        let mut tape = Tape::new();
        let enc = BoundNet::bind(&mut tape, &model.encoder);
        let dec = BoundNet::bind(&mut tape, &model.decoder);
        let e = encode(&mut tape, &enc, img).unwrap();
        let rec = decode(&mut tape, &dec, &e).unwrap();
        let l1 = tape.l1_loss(img, &rec).unwrap().item();
        assert!(l1 <= 0.05, "reconstruction L1 {l1} above 0.05");
    }
}

#[test]
fn passthrough_deviation_metric_trends_down_over_epochs() {
    // Mean L1 between held-out B encodings and their translations must not
    // increase over training: median of the last three epochs <= median of
    // the first three.
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("flow_trend");
    let _ = fs::remove_dir_all(&root);
    let spec = devgan::data::SynthSpec {
        image_size: 16,
        count_a: 20,
        count_b: 20,
        test_count_a: 2,
        test_count_b: 8,
        ..devgan::data::SynthSpec::default()
    };
    devgan::data::generate_synthetic(&spec, &root).unwrap();
    let ds = UnpairedDataset::load(&root.join("trainA"), &root.join("trainB")).unwrap();
    let held_out =
        devgan::data::load_domain_dir(&root.join("testB"), devgan::data::Domain::B).unwrap();

    let cfg = tiny_cfg(29);
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();

    let metric = |model: &Model| -> f64 {
        let Model::Proposed(m) = model else { panic!() };
        let mut total = 0.0;
        for rec in &held_out {
            let s = rec.pixels.shape();
            let batched =
                devgan::tensor::Tensor::new(vec![1, s[0], s[1], s[2]], rec.pixels.data().to_vec())
                    .unwrap();
            let mut tape = devgan::tensor::Tape::new();
            let enc = devgan::networks::BoundNet::bind(&mut tape, &m.encoder);
            let tr = devgan::networks::BoundNet::bind(&mut tape, &m.translator);
            let e = devgan::networks::encode(&mut tape, &enc, &batched).unwrap();
            let t = devgan::networks::translate(&mut tape, &tr, &e).unwrap();
            total += tape.l1_loss(&t, &e).unwrap().item();
        }
        total / held_out.len() as f64
    };

    let mut per_epoch = Vec::new();
    for _ in 0..9 {
        trainer.run_epoch().unwrap();
        per_epoch.push(metric(&trainer.state().model));
    }
    let median = |w: &[f64]| {
        let mut v = w.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let early = median(&per_epoch[..3]);
    let late = median(&per_epoch[per_epoch.len() - 3..]);
    assert!(
        late <= early,
        "deviation metric increased over training: first-3 median {early}, last-3 median {late} ({per_epoch:?})"
    );
}

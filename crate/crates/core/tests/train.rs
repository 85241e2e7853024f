use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tavit_core::data::{generate_dataset, Dataset, GenConfig, SliceSet, Split, Stage};
use tavit_core::models::{build_mprvit, ModelConfig};
use tavit_core::nn::{AttentionKind, Conditioning};
use tavit_core::tensor::{Activation, Init, ParamKind, ParamStore, Tape, Tensor};
use tavit_core::train::*;

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new(0);
    let id = s.add("w", &[values.len()], Init::Zeros, ParamKind::Trainable).unwrap();
    s.get_mut(id).data_mut().copy_from_slice(values);
    s.add("running", &[2], Init::Ones, ParamKind::Buffer).unwrap();
    s
}

fn no_decay() -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    }
}

#[test]
fn adamw_first_step() {
    let mut s = store(&[0.0, -0.25]);
    let mut opt = AdamW::new(no_decay(), &s);
    opt.step(&mut s, &[Some(vec![1.0, -3.0]), None]).unwrap();
    let w = s.entries()[0].tensor.data();
    assert!((w[0] - -1.9999980e-4).abs() < 1e-10);
    assert!((w[0] + 2e-4 / (1.0 + 1e-6)).abs() < 1e-15);
    assert!((w[1] - (-0.25 + 3.0 * 2e-4 / (3.0 + 1e-6))).abs() < 1e-10);
    assert_eq!(s.entries()[1].tensor.data(), &[1.0, 1.0]);
    assert_eq!(opt.step, 1);
}

#[test]
fn adamw_zero_gradient() {
    let mut s = store(&[0.5, -0.25]);
    let mut opt = AdamW::new(no_decay(), &s);
    for _ in 0..3 {
        opt.step(&mut s, &[Some(vec![0.0, 0.0]), None]).unwrap();
    }
    assert_eq!(s.entries()[0].tensor.data(), &[0.5, -0.25]);

    let mut s = store(&[0.5, -0.25]);
    let mut opt = AdamW::new(AdamWConfig::default(), &s);
    opt.step(&mut s, &[None, None]).unwrap();
    let shrink = 1.0 - 2e-4 * 1e-2;
    let w = s.entries()[0].tensor.data();
    assert!((w[0] - 0.5 * shrink).abs() < 1e-15);
    assert!((w[1] + 0.25 * shrink).abs() < 1e-15);
}

#[test]
fn adamw_rejects_wrong_gradient_count() {
    let mut s = store(&[0.5]);
    let mut opt = AdamW::new(no_decay(), &s);
    assert!(opt.step(&mut s, &[None]).is_err());
}

#[test]
fn early_stopping_rule() {
    assert!(!early_stop(&[], 2));
    assert!(!early_stop(&[1.0, 0.9, 0.8], 2));
    assert!(!early_stop(&[1.0, 0.5, 0.6, 0.7], 2));
    assert!(early_stop(&[1.0, 0.5, 0.6, 0.7, 0.8], 2));
    // A tie does not reset the counter.
    assert!(early_stop(&[1.0, 0.5, 0.5, 0.5, 0.5], 2));
    assert!(early_stop(&[0.5, 0.6], 0));
    assert!(!early_stop(&[0.5], 0));
    assert!(early_stop(&[0.9, 0.8, 0.4, 0.5, 0.6, 0.7], 2));
}

/// Plain Adam followed by a separate decay step, written from the update
/// rule.
fn reference_adamw(theta: &mut [f64], grads: &[Vec<f64>], c: &AdamWConfig) {
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for j in 0..theta.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mh = m[j] / (1.0 - c.beta1.powi(t));
            let vh = v[j] / (1.0 - c.beta2.powi(t));
            let decay = c.lr * c.weight_decay * theta[j];
            theta[j] -= c.lr * mh / (vh.sqrt() + c.eps) + decay;
        }
    }
}

#[test]
fn adamw_matches_reference_over_many_steps() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for wd in [0.0, 1e-2, 0.3] {
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let init: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..7).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut want = init.clone();
        reference_adamw(&mut want, &grads, &cfg);
        let mut s = store(&init);
        let mut opt = AdamW::new(cfg, &s);
        for g in &grads {
            opt.step(&mut s, &[Some(g.clone()), None]).unwrap();
        }
        for (a, b) in s.entries()[0].tensor.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "wd {wd}: {a} vs {b}");
        }
    }
}

#[test]
fn decay_is_independent_of_gradient() {
    let shrink = |wd: f64| {
        let mut s = store(&[0.8]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            &s,
        );
        opt.step(&mut s, &[Some(vec![0.0]), None]).unwrap();
        s.entries()[0].tensor.data()[0]
    };
    for wd in [0.0, 1e-3, 1e-1, 1.0] {
        assert!((shrink(wd) - 0.8 * (1.0 - 2e-4 * wd)).abs() < 1e-15);
    }
}

#[test]
fn step_descends_on_quadratic() {
    // f(θ) = (θ - 3)²
    let mut s = store(&[0.0]);
    let mut opt = AdamW::new(no_decay(), &s);
    let loss = |t: f64| (t - 3.0) * (t - 3.0);
    for _ in 0..5 {
        let t = s.entries()[0].tensor.data()[0];
        opt.step(&mut s, &[Some(vec![2.0 * (t - 3.0)]), None]).unwrap();
        assert!(loss(s.entries()[0].tensor.data()[0]) < loss(t));
    }
}

#[test]
fn l1_value_and_gradient() {
    let p = Tensor::from_vec(&[2], vec![0.0f32, 2.0]).unwrap();
    let t = Tensor::from_vec(&[2], vec![1.0f32, 0.0]).unwrap();
    assert_eq!(l1_loss(&p, &t).unwrap(), 1.5);
    assert!(l1_loss(&p, &Tensor::zeros(&[3])).is_err());

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(p.with_requires_grad(true));
    let y = tape.constant(t);
    let l = tape.l1_loss(x, y).unwrap();
    assert_eq!(tape.value(l).data(), &[1.5]);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[-0.5, 0.5]);
}

#[test]
fn loss_csv_layout() {
    let h = [
        EpochRecord {
            epoch: 1,
            train_l1: 0.5,
            val_l1: 0.25,
        },
        EpochRecord {
            epoch: 2,
            train_l1: 0.125,
            val_l1: 0.0625,
        },
    ];
    assert_eq!(loss_csv(&h), "epoch,train_l1,val_l1\n1,0.5,0.25\n2,0.125,0.0625\n");
}

fn tiny_seg_model() -> ModelConfig {
    ModelConfig {
        in_channels: 2,
        image_size: 16,
        base_channels: 4,
        bottleneck_channels: 8,
        latent_channels: 4,
        embed_dim: 8,
        heads: 2,
        layers: 1,
        mlp_ratio: 2,
        patch: 2,
        mlp_activation: Activation::Gelu,
        layernorm_sqrt: false,
        attention: AttentionKind::Naive,
        conditioning: Conditioning::None,
    }
}

fn phantoms(dir: &std::path::Path) -> Dataset {
    generate_dataset(
        dir,
        &GenConfig {
            patients: 6,
            image_size: 16,
            depth: 4,
            seed: 11,
            fractions: [0.5, 0.25, 0.25],
            tumor_probability: 0.9,
        },
    )
    .unwrap();
    Dataset::load(dir).unwrap()
}

fn run(ds: &Dataset, epochs: usize) -> TrainOutcome {
    let train = SliceSet::new(ds.split(Split::Train), Stage::Segmentation, None).unwrap();
    let val = SliceSet::new(ds.split(Split::Val), Stage::Segmentation, None).unwrap();
    let plan = TrainPlan {
        max_epochs: epochs,
        batch_size: 4,
        patience: epochs,
        seed: 5,
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        ..TrainPlan::default()
    };
    train_stage(build_mprvit(&tiny_seg_model(), 9).unwrap(), &plan, &train, &val).unwrap()
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantoms(dir.path());
    let a = run(&ds, 20);
    let b = run(&ds, 20);
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_epoch, b.best_epoch);
    let weights = |o: &TrainOutcome| -> Vec<Vec<u32>> {
        o.model
            .params()
            .entries()
            .iter()
            .map(|e| e.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    assert_eq!(weights(&a), weights(&b));
    assert_eq!(a.history.len(), 20);
    let first = a.history[0].train_l1;
    let last = a.history[19].train_l1;
    assert!(last < first, "train L1 {first} -> {last}");
    let best = a.history.iter().map(|r| r.val_l1).fold(f64::INFINITY, f64::min);
    assert_eq!(a.history[a.best_epoch - 1].val_l1, best);
}

#[test]
fn training_rejects_bad_plans() {
    let dir = tempfile::tempdir().unwrap();
    let ds = phantoms(dir.path());
    let train = SliceSet::new(ds.split(Split::Train), Stage::Segmentation, None).unwrap();
    let val = SliceSet::new(ds.split(Split::Val), Stage::Segmentation, None).unwrap();
    let model = build_mprvit(&tiny_seg_model(), 9).unwrap();
    for plan in [
        TrainPlan {
            max_epochs: 0,
            ..TrainPlan::default()
        },
        TrainPlan {
            batch_size: 0,
            ..TrainPlan::default()
        },
        TrainPlan {
            slices_per_patient: Some(0),
            ..TrainPlan::default()
        },
    ] {
        assert!(train_stage(model.clone(), &plan, &train, &val).is_err());
    }
}

//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantity once its assertions hold. Run with
//! `cargo test -p weblynet --test acceptance -- --nocapture` to see the
//! lines; the heavyweight benchmark criteria share one training run.

mod common;

use common::check_gradients;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use weblynet::data::{build_view2, NoiseModel, SampleOptions, SyntheticWorld};
use weblynet::losses::{bce_multilabel, generalized_kl, sym_gkl, weblynet_loss};
use weblynet::networks::{
    load_checkpoint, save_checkpoint, AnyNetwork, Mode, N1Network, N1Spec, N2Network, N2Spec,
    Scale,
};
use weblynet::optim::{predict, train, TrainConfig, TrainMode, TrainedSystem, Which};
use weblynet::tensor::{Tape, Tensor};

fn rnd_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Tiny N1 spec used wherever a full-width network would be overkill.
fn tiny_n1_spec(c: usize) -> N1Spec {
    N1Spec {
        block_filters: [2, 2, 2, 2],
        f1_filters: 3,
        f2_filters: 3,
        f1_kernel_w: 1,
        num_classes: c,
        embed_dim: 16,
        width_scale: Scale::ONE,
    }
}

// ---- criterion 1: gradient correctness --------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut configs = 0usize;

    // matmul
    for _ in 0..10 {
        let (m, k, n) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let a = rnd_tensor(&mut rng, vec![m, k], -2.0, 2.0);
        let b = rnd_tensor(&mut rng, vec![k, n], -2.0, 2.0);
        check_gradients(
            &[a, b],
            |tape, ins| {
                let av = tape.leaf(&ins[0]);
                let bv = tape.leaf(&ins[1]);
                let c = tape.matmul(av, bv).unwrap();
                (tape.sum(c), vec![av, bv])
            },
            "matmul",
        );
        configs += 1;
    }

    // conv2d (+ channel bias), random geometry
    for _ in 0..10 {
        let n = rng.random_range(1..3);
        let ci = rng.random_range(1..3);
        let co = rng.random_range(1..3);
        let h = rng.random_range(1..4);
        let w = rng.random_range(3..7);
        let kh = rng.random_range(1..=h.min(3));
        let kw = rng.random_range(1..=3);
        let x = rnd_tensor(&mut rng, vec![n, ci, h, w], -1.5, 1.5);
        let f = rnd_tensor(&mut rng, vec![co, ci, kh, kw], -1.0, 1.0);
        let b = rnd_tensor(&mut rng, vec![co], -0.5, 0.5);
        check_gradients(
            &[x, f, b],
            |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let fv = tape.leaf(&ins[1]);
                let bv = tape.leaf(&ins[2]);
                let c = tape.conv2d(xv, fv, (1, 1), (1, 1)).unwrap();
                let c = tape.channel_bias(c, bv).unwrap();
                (tape.sum(c), vec![xv, fv, bv])
            },
            "conv2d",
        );
        configs += 1;
    }

    // maxpool2d (inputs spaced to keep the argmax stable under the step)
    for _ in 0..10 {
        let c = rng.random_range(1..3);
        let w = 2 * rng.random_range(2..5);
        let mut data: Vec<f64> = (0..c * w).map(|i| i as f64 * 0.01).collect();
        data.shuffle(&mut rng);
        let x = Tensor::new(vec![c, 1, w], data);
        check_gradients(
            &[x],
            |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let p = tape.maxpool2d(xv, (1, 2), (1, 2)).unwrap();
                // Weighted sum so different outputs carry different pulls.
                let s = tape.scalar_mul(p, 1.0);
                let total = tape.sum(s);
                (total, vec![xv])
            },
            "maxpool2d",
        );
        configs += 1;
    }

    // batch norm, both statistics modes
    for _ in 0..10 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let w = rng.random_range(2..5);
        let x = rnd_tensor(&mut rng, vec![n, c, 1, w], -2.0, 2.0);
        let gamma = rnd_tensor(&mut rng, vec![c], 0.5, 1.5);
        let beta = rnd_tensor(&mut rng, vec![c], -0.5, 0.5);
        check_gradients(
            &[x.clone(), gamma.clone(), beta.clone()],
            |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let g = tape.leaf(&ins[1]);
                let b = tape.leaf(&ins[2]);
                let (y, _) = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
                (tape.sum(y), vec![xv, g, b])
            },
            "batch_norm train",
        );
        let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        check_gradients(
            &[x, gamma, beta],
            |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let g = tape.leaf(&ins[1]);
                let b = tape.leaf(&ins[2]);
                let y = tape.batch_norm_eval(xv, g, b, &rm, &rv, 1e-5).unwrap();
                (tape.sum(y), vec![xv, g, b])
            },
            "batch_norm eval",
        );
        configs += 2;
    }

    // pointwise and reduction ops
    for _ in 0..10 {
        let n = rng.random_range(1..8);
        // relu: keep entries away from the kink
        let relu_in = Tensor::from_vec(
            (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(0.05..1.5);
                    if rng.random::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        );
        check_gradients(
            &[relu_in],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let y = tape.relu(x);
                (tape.sum(y), vec![x])
            },
            "relu",
        );
        let sig_in = rnd_tensor(&mut rng, vec![n], -3.0, 3.0);
        check_gradients(
            &[sig_in],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let y = tape.sigmoid(x);
                (tape.sum(y), vec![x])
            },
            "sigmoid",
        );
        let log_in = rnd_tensor(&mut rng, vec![n], 0.05, 3.0);
        check_gradients(
            &[log_in],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let y = tape.log(x);
                (tape.sum(y), vec![x])
            },
            "log",
        );
        let clamp_in = rnd_tensor(&mut rng, vec![n], -2.0, 2.0);
        check_gradients(
            &[clamp_in],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let y = tape.clamp(x, -0.9, 0.9);
                let y = tape.scalar_mul(y, 2.0);
                let y = tape.scalar_add(y, 0.25);
                (tape.sum(y), vec![x])
            },
            "clamp/scalar",
        );
        let a = rnd_tensor(&mut rng, vec![n], -2.0, 2.0);
        let b = rnd_tensor(&mut rng, vec![n], -2.0, 2.0);
        check_gradients(
            &[a, b],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let y = tape.leaf(&ins[1]);
                let s = tape.add(x, y).unwrap();
                let d = tape.sub(x, y).unwrap();
                let p = tape.mul(s, d).unwrap();
                (tape.mean(p), vec![x, y])
            },
            "add/sub/mul/mean",
        );
        let m = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let mat = rnd_tensor(&mut rng, vec![m, k], -1.0, 1.0);
        check_gradients(
            &[mat],
            |tape, ins| {
                let x = tape.leaf(&ins[0]);
                let t = tape.transpose(x).unwrap();
                let cm = tape.col_mean(t).unwrap();
                let r = tape.reshape(cm, vec![ins[0].shape()[0]]).unwrap();
                (tape.sum(r), vec![x])
            },
            "transpose/col_mean/reshape",
        );
        configs += 6;
    }

    // losses
    for _ in 0..15 {
        let c = rng.random_range(1..6);
        let p = rnd_tensor(&mut rng, vec![c], 0.03, 0.97);
        let y = Tensor::from_vec((0..c).map(|_| f64::from(rng.random_range(0..2))).collect());
        check_gradients(
            &[p],
            |tape, ins| {
                let pv = tape.leaf(&ins[0]);
                let loss = bce_multilabel(tape, pv, &y).unwrap();
                (loss, vec![pv])
            },
            "bce_multilabel",
        );
        let o1 = rnd_tensor(&mut rng, vec![c], 0.05, 2.0);
        let o2 = rnd_tensor(&mut rng, vec![c], 0.05, 2.0);
        check_gradients(
            &[o1, o2],
            |tape, ins| {
                let a = tape.leaf(&ins[0]);
                let b = tape.leaf(&ins[1]);
                let d = sym_gkl(tape, a, b).unwrap();
                (d, vec![a, b])
            },
            "sym_gkl",
        );
        configs += 2;
    }

    // Composed networks: the combined co-teaching loss through both
    // architectures, checked parameter by parameter.
    for trial in 0..3 {
        let c = 2;
        let n1 = N1Network::init(tiny_n1_spec(c), 100 + trial).unwrap();
        let n2 = N2Network::init(
            N2Spec {
                hidden: [3, 3, 2],
                dropout_p: 0.0,
                num_classes: c,
                input_dim: 4,
                width_scale: Scale::ONE,
            },
            200 + trial,
        )
        .unwrap();
        let x1 = rnd_tensor(&mut rng, vec![2, 16], -1.0, 1.0);
        let x2 = rnd_tensor(&mut rng, vec![4], -1.0, 1.0);
        let y = Tensor::from_vec(vec![1.0, 0.0]);
        let alphas = [rng.random_range(0.1..2.0)];

        let mut params: Vec<Tensor> = Vec::new();
        n1.for_each_param(&mut |_, t| params.push(t.detached()));
        let n1_count = params.len();
        n2.for_each_param(&mut |_, t| params.push(t.detached()));

        check_gradients(
            &params,
            |tape, ins| {
                let mut n1 = n1.clone();
                let mut idx = 0;
                n1.for_each_param_mut(&mut |_, t| {
                    *t = ins[idx].detached();
                    idx += 1;
                });
                let mut n2 = n2.clone();
                n2.for_each_param_mut(&mut |_, t| {
                    *t = ins[idx].detached();
                    idx += 1;
                });
                let b1 = n1.bind(tape);
                let b2 = n2.bind(tape);
                let f1 = n1.forward(tape, &b1, &x1, Mode::Train).unwrap();
                let o2 = n2.forward(tape, &b2, &x2, Mode::Train, None).unwrap();
                let (loss, _) =
                    weblynet_loss(tape, &[f1.recording_out, o2], &y, &alphas).unwrap();
                let mut vars = b1.param_vars();
                vars.extend(b2.param_vars());
                assert_eq!(vars.len() - b2.param_vars().len(), n1_count);
                (loss, vars)
            },
            "composed weblynet",
        );
        configs += 1;
    }

    assert!(configs >= 100, "only {configs} configurations checked");
    println!("PASS criterion 1: gradient correctness, {configs} random configurations, rel tol 1e-4");
}

// ---- criterion 2: divergence properties -------------------------------------

#[test]
fn criterion_2_divergence_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut checked = 0usize;
    for _ in 0..10_000 {
        let c = rng.random_range(1..8);
        let a: Vec<f64> = (0..c).map(|_| rng.random_range(1e-6..3.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.random_range(1e-6..3.0)).collect();
        let mut tape = Tape::new();
        let av = tape.leaf(&Tensor::from_vec(a.clone()));
        let bv = tape.leaf(&Tensor::from_vec(b.clone()));
        let d_ab_var = sym_gkl(&mut tape, av, bv).unwrap();
        let d_ba_var = sym_gkl(&mut tape, bv, av).unwrap();
        let d_ab = tape.scalar_value(d_ab_var);
        let d_ba = tape.scalar_value(d_ba_var);

        assert!(d_ab >= 0.0, "negative divergence {d_ab}");
        assert!((d_ab - d_ba).abs() <= 1e-12, "asymmetry {d_ab} vs {d_ba}");
        let two_sided = generalized_kl(&a, &b) + generalized_kl(&b, &a);
        assert!(
            (d_ab - two_sided).abs() <= 1e-12,
            "pointwise {d_ab} vs two-sided {two_sided}"
        );
        // Zero iff equal (post-clamp): equality gives exactly zero,
        // inequality in any coordinate gives strictly positive.
        let d_aa = {
            let same = tape.leaf(&Tensor::from_vec(a.clone()));
            let v = sym_gkl(&mut tape, same, same).unwrap();
            tape.scalar_value(v)
        };
        assert_eq!(d_aa, 0.0);
        if a.iter().zip(&b).any(|(x, y)| {
            (x.max(1e-7) - y.max(1e-7)).abs() > 0.0
        }) {
            assert!(d_ab > 0.0, "zero divergence for unequal inputs");
        }
        checked += 1;
    }
    println!("PASS criterion 2: divergence properties over {checked} random pairs");
}

// ---- criterion 7: AP oracle ---------------------------------------------------

#[test]
fn criterion_7_ap_oracle() {
    use weblynet::eval::average_precision;

    fn ap_bruteforce(scores: &[f64], relevance: &[u8]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let r: usize = relevance.iter().map(|&x| x as usize).sum();
        let mut total = 0.0;
        for k in 1..=n {
            if relevance[order[k - 1]] == 1 {
                let rel_at_k = order[..k].iter().filter(|&&i| relevance[i] == 1).count();
                total += rel_at_k as f64 / k as f64;
            }
        }
        total / r as f64
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let mut relevance: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        if relevance.iter().all(|&r| r == 0) {
            relevance[rng.random_range(0..n)] = 1;
        }
        let fast = average_precision(&scores, &relevance).unwrap();
        let slow = ap_bruteforce(&scores, &relevance);
        assert_eq!(fast, slow, "AP mismatch on n={n}");
    }

    // Worked example: relevant at ranks 1 and 3 of 3.
    let ap = average_precision(&[0.9, 0.5, 0.4], &[1, 0, 1]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-15, "worked example gave {ap}");
    println!("PASS criterion 7: AP matches brute force on 1000 instances; worked example = {ap:.4}");
}

// ---- criterion 8: pooling identity ------------------------------------------

#[test]
fn criterion_8_pooling_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    for trial in 0..100 {
        let c = rng.random_range(2..5);
        let net = N1Network::init(tiny_n1_spec(c), 800 + trial).unwrap();
        let n = rng.random_range(1..7);
        let x = rnd_tensor(&mut rng, vec![n, 16], -1.0, 1.0);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let out = net.forward(&mut tape, &bound, &x, Mode::Eval).unwrap();
        let seg = tape.data(out.segment_out);
        let rec = tape.data(out.recording_out);
        for class in 0..c {
            let mean = seg[class * n..(class + 1) * n].iter().sum::<f64>() / n as f64;
            assert!(
                (mean - rec[class]).abs() <= 1e-14,
                "pooled output differs from segment mean: {mean} vs {}",
                rec[class]
            );
        }

        // Duplicating every segment leaves the transfer features unchanged.
        let mut doubled = Tensor::zeros(vec![2 * n, 16]);
        doubled.data_mut()[..n * 16].copy_from_slice(x.data());
        doubled.data_mut()[n * 16..].copy_from_slice(x.data());
        let f_once = net.extract_f2_eval(&x).unwrap();
        let f_twice = net.extract_f2_eval(&doubled).unwrap();
        for (a, b) in f_once.data().iter().zip(f_twice.data()) {
            assert!((a - b).abs() <= 1e-12, "duplication changed F2: {a} vs {b}");
        }
    }
    println!("PASS criterion 8: pooling identity and F2 duplication invariance on 100 random nets");
}

// ---- criterion 9: determinism and persistence --------------------------------

#[test]
fn criterion_9_determinism_and_persistence() {
    let world = SyntheticWorld::generate(4, 16, 0xC9);
    let opts = SampleOptions {
        n_recordings: 24,
        embed_dim: 16,
        segment_range: (3, 8),
        ..SampleOptions::new(4, NoiseModel::zero(4), 0xC9)
    };
    let mut ds = world.sample_dataset(&opts).unwrap();
    let pre = N1Network::init(tiny_n1_spec(4), 0x91).unwrap();
    build_view2(&pre, &mut ds).unwrap();
    let items = ds.train_view();

    let run = || {
        let n1 = AnyNetwork::N1(N1Network::init(tiny_n1_spec(4), 0x92).unwrap());
        let n2 = AnyNetwork::N2(
            N2Network::init(
                N2Spec {
                    hidden: [6, 5, 4],
                    dropout_p: 0.4,
                    num_classes: 4,
                    input_dim: 3,
                    width_scale: Scale::ONE,
                },
                0x93,
            )
            .unwrap(),
        );
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rates: vec![1e-3],
            alphas: vec![0.5],
            n_epochs: 2,
            seed: 0x94,
            mode: TrainMode::Joint,
        };
        train(vec![n1, n2], &items, &cfg).unwrap().0
    };

    let dir = tempfile::tempdir().unwrap();
    let sys_a = run();
    let sys_b = run();
    for (k, (a, b)) in sys_a.networks.iter().zip(&sys_b.networks).enumerate() {
        let pa = dir.path().join(format!("a{k}.wnck"));
        let pb = dir.path().join(format!("b{k}.wnck"));
        save_checkpoint(a, &pa).unwrap();
        save_checkpoint(b, &pb).unwrap();
        let bytes_a = std::fs::read(&pa).unwrap();
        let bytes_b = std::fs::read(&pb).unwrap();
        assert_eq!(bytes_a, bytes_b, "checkpoints differ across identical runs");
    }

    // Save -> load -> predict reproduces outputs bit-exactly.
    let reloaded = TrainedSystem {
        networks: (0..sys_a.networks.len())
            .map(|k| load_checkpoint(&dir.path().join(format!("a{k}.wnck"))).unwrap())
            .collect(),
    };
    for rec in &ds.recordings {
        for which in [Which::Network(0), Which::Network(1), Which::Average] {
            let orig = predict(&sys_a, rec, which).unwrap();
            let back = predict(&reloaded, rec, which).unwrap();
            assert_eq!(orig.data(), back.data(), "reloaded outputs differ");
        }
    }
    println!("PASS criterion 9: bit-identical reruns and checkpoint round-trip outputs");
}

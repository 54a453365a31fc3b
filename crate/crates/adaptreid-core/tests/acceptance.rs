//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (visible with `--nocapture`). The desk-scale
//! benchmark runs (criteria 6-8) are shared through a lazily initialized
//! harness so the whole suite trains each configuration exactly once.

use adaptreid_core::data::{
    build_domain_pools, generate_synthetic_dataset, write_synthetic_dataset, LabeledImage,
    SyntheticSpec,
};
use adaptreid_core::eval::{
    attention_iou, cmc, extract_embeddings, foreground_preservation, map_score, rank_queries,
    write_metrics_csv, Embedder, IdCam,
};
use adaptreid_core::losses::{
    adversarial_loss_d, adversarial_loss_g, attention_consistency_loss, cycle_loss, graph,
    identity_loss, quartet_loss, total_loss, triplet_loss, LossComponents, LossWeights,
    MarginForm,
};
use adaptreid_core::model::{build_domain_models, NetworkConfig, Side};
use adaptreid_core::nn::tape::{NodeId, Tape};
use adaptreid_core::nn::Tensor;
use adaptreid_core::rng::rng_from_seed;
use adaptreid_core::train::{
    load_joint, lr_schedule, save_joint, train, NoopObserver, TrainConfig, TrainMode,
    TrainObserver,
};
use adaptreid_core::translate::compose;
use adaptreid_core::data::{stack_images, stack_masks, ProtocolConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

const TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// criterion 1: closed-form loss values
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_loss_closed_forms() {
    let start = Instant::now();
    let w = LossWeights::default();

    // adversarial, discriminator side
    assert!(adversarial_loss_d(&[1.0 - 1e-9], &[1e-9]).unwrap().abs() < TOL);
    assert!(
        (adversarial_loss_d(&[0.5], &[0.5]).unwrap() - 2.0 * std::f64::consts::LN_2).abs() < TOL
    );
    // adversarial, generator side
    assert!((adversarial_loss_g(&[0.5]).unwrap() - std::f64::consts::LN_2).abs() < TOL);
    assert!(adversarial_loss_g(&[1.0 - 1e-9]).unwrap().abs() < TOL);

    // cycle
    let x = Tensor::full(&[2, 3, 4, 4], 0.1);
    let off = x.map(|v| v + 0.1);
    assert!(cycle_loss(&x, &x, &x, &x).unwrap().abs() < TOL);
    assert!((cycle_loss(&x, &off, &x, &off).unwrap() - 0.2).abs() < TOL);

    // attention consistency
    let a = Tensor::full(&[2, 1, 4, 4], 0.5);
    let b = a.map(|v| v + 0.25);
    assert!(attention_consistency_loss(&a, &a, &a, &a).unwrap().abs() < TOL);
    assert!((attention_consistency_loss(&a, &b, &a, &a).unwrap() - 0.25).abs() < TOL);

    // triplet at both hinge states
    let place = |d: f64, axis: usize| {
        let mut v = vec![0.0; 4];
        v[axis] = d.sqrt();
        Tensor::from_vec(&[1, 4], v)
    };
    let anchor = Tensor::zeros(&[1, 4]);
    assert!(triplet_loss(&anchor, &place(0.2, 0), &place(0.9, 1), &w).unwrap().abs() < TOL);
    assert!(
        (triplet_loss(&anchor, &place(0.9, 0), &place(0.2, 1), &w).unwrap() - 1.0).abs() < TOL
    );

    // quartet: inactive hinges, then all-equal distances
    let x1 = Tensor::zeros(&[1, 3]);
    let x2 = Tensor::from_vec(&[1, 3], vec![0.2f64.sqrt(), 0.0, 0.0]);
    let x3 = Tensor::from_vec(&[1, 3], vec![0.0, 0.9f64.sqrt(), 0.0]);
    let x4 = Tensor::from_vec(&[1, 3], vec![0.0, 0.9f64.sqrt(), 0.8f64.sqrt()]);
    assert!(quartet_loss(&x1, &x2, &x3, &x4, &w).unwrap().abs() < TOL);
    let s = 0.25f64.sqrt();
    let y1 = Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 0.0, 0.0]);
    let y2 = Tensor::from_vec(&[1, 4], vec![s, s, 0.0, 0.0]);
    let y3 = Tensor::from_vec(&[1, 4], vec![s, 0.0, s, 0.0]);
    let y4 = Tensor::from_vec(&[1, 4], vec![0.0, s, s, 0.0]);
    assert!((quartet_loss(&y1, &y2, &y3, &y4, &w).unwrap() - 0.45).abs() < TOL);

    // identity
    assert!(identity_loss(&Tensor::from_vec(&[1, 3], vec![60.0, 0.0, 0.0]), &[0]).unwrap() < TOL);
    assert!(
        (identity_loss(&Tensor::zeros(&[1, 2]), &[0]).unwrap() - std::f64::consts::LN_2).abs()
            < TOL
    );
    assert!((identity_loss(&Tensor::zeros(&[1, 10]), &[9]).unwrap() - 10f64.ln()).abs() < TOL);

    // total: reference arithmetic and degenerate weights
    let comps = LossComponents { gan_s: 1.0, gan_t: 1.0, cycle: 1.0, attn: 2.0, quartet: 1.0, id: 1.0 };
    assert!((total_loss(&comps, &w).unwrap().total - 34.0).abs() < TOL);
    let zero = LossComponents::default();
    assert!(total_loss(&zero, &w).unwrap().total.abs() < TOL);
    let zeroed = LossWeights {
        lambda_attn: 0.0,
        lambda_quartet: 0.0,
        lambda_id: 0.0,
        lambda_cyc: 0.0,
        ..LossWeights::default()
    };
    assert!((total_loss(&comps, &zeroed).unwrap().total - 2.0).abs() < TOL);

    // retrieval closed forms at the tighter tolerance
    let q = Tensor::from_vec(&[1, 1], vec![0.0]);
    let g = Tensor::from_vec(&[3, 1], vec![0.1, 0.2, 0.3]);
    let qm = [IdCam { identity: 1, camera: 1 }];
    let gm = [
        IdCam { identity: 1, camera: 2 },
        IdCam { identity: 9, camera: 2 },
        IdCam { identity: 1, camera: 3 },
    ];
    let r = rank_queries(&q, &qm, &g, &gm).unwrap();
    assert!((map_score(&r).unwrap().value - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
    let gt = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    assert!((attention_iou(&gt, &gt, 0.5).unwrap() - 1.0).abs() < 1e-9);
    assert!(attention_iou(&gt.map(|v| 1.0 - v), &gt, 0.5).unwrap().abs() < 1e-9);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "criterion 1 took {elapsed:?}");
    println!("[criterion 1] PASS: loss closed forms within 1e-6 in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 2: finite-difference gradient suite
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
const FD_TRIALS: usize = 50;

/// Compare tape gradients of a scalar graph against central differences over
/// every element of every differentiable input.
fn fd_check(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId,
    label: &str,
) {
    let mut tape = Tape::new(true);
    let nodes: Vec<NodeId> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let loss = build(&mut tape, &nodes);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut t = Tape::new(false);
        let nodes: Vec<NodeId> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let loss = build(&mut t, &nodes);
        t.value(loss).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.node(nodes[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ana = analytic.data()[j];
            let scale = numeric.abs().max(ana.abs());
            assert!(
                (numeric - ana).abs() <= FD_REL_TOL * scale + 1e-9,
                "{label}: input {i} element {j}: numeric {numeric} vs analytic {ana}"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Quartet/triplet instances whose hinges sit safely away from their kinks.
fn metric_instance(rng: &mut ChaCha8Rng, w: &LossWeights) -> [Tensor; 4] {
    loop {
        let x1 = rand_tensor(&[2, 4], rng, -1.0, 1.0);
        let x2 = rand_tensor(&[2, 4], rng, -1.0, 1.0);
        let x3 = rand_tensor(&[2, 4], rng, -1.0, 1.0);
        let x4 = rand_tensor(&[2, 4], rng, -1.0, 1.0);
        let dist = |a: &Tensor, b: &Tensor, i: usize| -> f64 {
            (0..4).map(|j| (a.data()[i * 4 + j] - b.data()[i * 4 + j]).powi(2)).sum()
        };
        let mut ok = true;
        for i in 0..2 {
            let (d12, d13, d43) = (dist(&x1, &x2, i), dist(&x1, &x3, i), dist(&x4, &x3, i));
            for margin in [
                d12 - d13 + w.margin_tau1,
                d12 - d43 + w.margin_tau2,
                (d12 - d13) - w.margin_tau1,
                (d12 - d13 + d12 - d43) - w.margin_tau1,
            ] {
                if margin.abs() < 5e-3 {
                    ok = false;
                }
            }
        }
        if ok {
            return [x1, x2, x3, x4];
        }
    }
}

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let mut rng = rng_from_seed(0xfd);

    for trial in 0..FD_TRIALS {
        // adversarial losses on 8-element score vectors, inside the clamp
        let real = rand_tensor(&[8], &mut rng, 0.05, 0.95);
        let fake = rand_tensor(&[8], &mut rng, 0.05, 0.95);
        fd_check(
            &[real.clone(), fake.clone()],
            &|t, n| {
                graph::adversarial_d(t, n[0], n[1]).unwrap()
            },
            "adversarial_d",
        );
        fd_check(&[fake], &|t, n| graph::adversarial_g(t, n[0]).unwrap(), "adversarial_g");

        // cycle and attention consistency on 8-element images
        let imgs: Vec<Tensor> =
            (0..4).map(|_| rand_tensor(&[1, 2, 2, 2], &mut rng, -1.0, 1.0)).collect();
        fd_check(
            &imgs,
            &|t, n| graph::cycle(t, n[0], n[1], n[2], n[3]).unwrap(),
            "cycle",
        );
        let maps: Vec<Tensor> =
            (0..4).map(|_| rand_tensor(&[1, 1, 4, 2], &mut rng, 0.05, 0.95)).collect();
        fd_check(
            &maps,
            &|t, n| graph::attention_consistency(t, n[0], n[1], n[2], n[3]).unwrap(),
            "attention_consistency",
        );

        // metric losses, both margin forms, kink-avoiding instances
        for form in [MarginForm::Canonical, MarginForm::PaperLiteral] {
            let w = LossWeights { margin_form: form, ..LossWeights::default() };
            let q = metric_instance(&mut rng, &w);
            fd_check(
                &q,
                &|t, n| graph::quartet(t, n[0], n[1], n[2], n[3], &w).unwrap(),
                "quartet",
            );
            fd_check(
                &q[..3].to_vec(),
                &|t, n| graph::triplet(t, n[0], n[1], n[2], &w).unwrap(),
                "triplet",
            );
        }

        // identity loss on 2x4 logits
        let logits = rand_tensor(&[2, 4], &mut rng, -2.0, 2.0);
        let labels = vec![trial % 4, (trial + 1) % 4];
        fd_check(
            &[logits],
            &|t, n| graph::identity(t, n[0], &labels).unwrap(),
            "identity",
        );

        // composition path on a 4x4 toy: gradient through mask and both images
        let mask = rand_tensor(&[1, 1, 4, 4], &mut rng, 0.05, 0.95);
        let xin = rand_tensor(&[1, 3, 4, 4], &mut rng, -1.0, 1.0);
        let raw = rand_tensor(&[1, 3, 4, 4], &mut rng, -1.0, 1.0);
        fd_check(
            &[mask, xin, raw],
            &|t, n| {
                let (_, _, composed) = compose(t, n[0], n[1], n[2]).unwrap();
                t.mean_all(composed)
            },
            "composition",
        );
    }

    // attention network path: gradients into sampled parameters, 50 trials
    let cfg = NetworkConfig {
        base_channels: 8,
        num_residual_blocks: 1,
        image_height: 8,
        image_width: 8,
        num_classes: 2,
        ..Default::default()
    };
    let (models, mut store) = build_domain_models(&cfg, true, 0xa1).unwrap();
    let attn_params: Vec<_> = store
        .trainable_in(|g| g == adaptreid_core::nn::ParamGroup::AttentionSrc);
    for trial in 0..FD_TRIALS {
        let image = rand_tensor(&[1, 3, 8, 8], &mut rng, -1.0, 1.0);
        let mut t = Tape::new(true);
        let x = t.leaf(image.clone());
        let a = models.forward_attention(&mut t, &store, Side::Source, x).unwrap();
        let loss = t.mean_all(a);
        let grads = t.backward(loss).unwrap();
        let pid = attn_params[trial % attn_params.len()];
        let idx = rng.random_range(0..store.value(pid).numel());
        let analytic = t.param_grad(&grads, pid).map(|g| g.data()[idx]).unwrap_or(0.0);
        let orig = store.value(pid).data()[idx];
        let eval = |store: &adaptreid_core::nn::ParamStore| -> f64 {
            let mut t = Tape::new(false);
            let x = t.leaf(image.clone());
            let a = models.forward_attention(&mut t, store, Side::Source, x).unwrap();
            let m = t.mean_all(a);
            t.value(m).item()
        };
        store.value_mut(pid).data_mut()[idx] = orig + FD_STEP;
        let up = eval(&store);
        store.value_mut(pid).data_mut()[idx] = orig - FD_STEP;
        let down = eval(&store);
        store.value_mut(pid).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = numeric.abs().max(analytic.abs());
        assert!(
            (numeric - analytic).abs() <= FD_REL_TOL * scale + 1e-9,
            "attention path: {numeric} vs {analytic}"
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 2 took {elapsed:?}");
    println!("[criterion 2] PASS: {FD_TRIALS} gradient trials per loss within 1e-3 in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 3: composition identities
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_composition_identities() {
    let mut rng = rng_from_seed(0xc3);
    for _ in 0..20 {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let raw = rand_tensor(&[2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let mask01 = rand_tensor(&[2, 1, 4, 4], &mut rng, 0.0, 1.0);

        let mut t = Tape::new(false);
        let xn = t.leaf(x.clone());
        let rn = t.leaf(raw.clone());

        // mask == 1 -> identity, exactly
        let ones = t.leaf(Tensor::full(&[2, 1, 4, 4], 1.0));
        let (_, _, composed) = compose(&mut t, ones, xn, rn).unwrap();
        assert_eq!(t.value(composed).data(), x.data());

        // mask == 0 -> raw translation, exactly
        let zeros = t.leaf(Tensor::zeros(&[2, 1, 4, 4]));
        let (_, _, composed) = compose(&mut t, zeros, xn, rn).unwrap();
        assert_eq!(t.value(composed).data(), raw.data());

        // decomposition: composed is literally x_b + x_f
        let mn = t.leaf(mask01.clone());
        let (bg, fg, composed) = compose(&mut t, mn, xn, rn).unwrap();
        let sum = t.add(bg, fg).unwrap();
        assert_eq!(t.value(sum).data(), t.value(composed).data());

        // betweenness
        for (i, &v) in t.value(composed).data().iter().enumerate() {
            let lo = x.data()[i].min(raw.data()[i]) - 1e-12;
            let hi = x.data()[i].max(raw.data()[i]) + 1e-12;
            assert!((lo..=hi).contains(&v));
        }
    }
    println!("[criterion 3] PASS: mask-1 identity, mask-0 raw, exact decomposition, betweenness");
}

// ---------------------------------------------------------------------------
// criterion 4: retrieval scoring vs. exhaustive oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_retrieval_oracle() {
    let start = Instant::now();
    let mut rng = rng_from_seed(0xc4);
    let mut scored = 0usize;
    while scored < 200 {
        let ng = rng.random_range(2..=20usize);
        let nq = rng.random_range(1..=6usize);
        let d = 4usize;
        let q = rand_tensor(&[nq, d], &mut rng, -1.0, 1.0);
        let g = rand_tensor(&[ng, d], &mut rng, -1.0, 1.0);
        let ident = |rng: &mut ChaCha8Rng| rng.random_range(1..5u32);
        let cam = |rng: &mut ChaCha8Rng| rng.random_range(1..4u32);
        let qm: Vec<IdCam> =
            (0..nq).map(|_| IdCam { identity: ident(&mut rng), camera: cam(&mut rng) }).collect();
        let gm: Vec<IdCam> =
            (0..ng).map(|_| IdCam { identity: ident(&mut rng), camera: cam(&mut rng) }).collect();
        let scoreable = qm.iter().any(|qq| {
            gm.iter().any(|gg| gg.identity == qq.identity && gg.camera != qq.camera)
        });
        if !scoreable {
            continue;
        }
        scored += 1;

        let r = rank_queries(&q, &qm, &g, &gm).unwrap();
        let ks = [1usize, 5, 10];
        let got_cmc = cmc(&r, &ks).unwrap();
        let got_map = map_score(&r).unwrap();

        // brute force from raw distances
        let mut first_ranks = Vec::new();
        let mut aps = Vec::new();
        for qi in 0..nq {
            let dist = |gi: usize| -> f64 {
                (0..d)
                    .map(|j| (q.data()[qi * d + j] - g.data()[gi * d + j]).powi(2))
                    .sum()
            };
            let mut order: Vec<usize> = (0..ng).collect();
            order.sort_by(|&a, &b| {
                dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b))
            });
            let visible: Vec<usize> = order
                .into_iter()
                .filter(|&gi| !(gm[gi].identity == qm[qi].identity && gm[gi].camera == qm[qi].camera))
                .collect();
            let flags: Vec<bool> = visible
                .iter()
                .map(|&gi| gm[gi].identity == qm[qi].identity && gm[gi].camera != qm[qi].camera)
                .collect();
            let total_good = flags.iter().filter(|&&f| f).count();
            if total_good == 0 {
                continue;
            }
            first_ranks.push(flags.iter().position(|&f| f).unwrap() + 1);
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (pos, &f) in flags.iter().enumerate() {
                if f {
                    hits += 1;
                    ap += hits as f64 / (pos + 1) as f64;
                }
            }
            aps.push(ap / total_good as f64);
        }
        let nv = first_ranks.len() as f64;
        for (i, &k) in ks.iter().enumerate() {
            let oracle = first_ranks.iter().filter(|&&p| p <= k).count() as f64 / nv;
            assert_eq!(got_cmc.values[i], oracle, "CMC@{k} differs from oracle");
        }
        let oracle_map = aps.iter().sum::<f64>() / nv;
        assert!((got_map.value - oracle_map).abs() < 1e-9);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 4 took {elapsed:?}");
    println!("[criterion 4] PASS: 200 galleries, CMC exact, mAP within 1e-9, in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// criterion 5: schedules and phase switches
// ---------------------------------------------------------------------------

/// Observer that checks the discriminator input switch against the published
/// mask, every step.
#[derive(Default)]
struct DiscSwitchProbe {
    switch_epoch: usize,
    steps_seen: usize,
    violations: usize,
}

impl TrainObserver for DiscSwitchProbe {
    fn on_disc_real_input(
        &mut self,
        epoch: usize,
        masked: bool,
        _side: Side,
        input: &Tensor,
        original: &Tensor,
        mask: Option<&Tensor>,
    ) {
        self.steps_seen += 1;
        let expect_masked = epoch >= self.switch_epoch;
        if masked != expect_masked {
            self.violations += 1;
            return;
        }
        match mask {
            Some(m) => {
                // input must equal (1 - mask) .* original, elementwise
                let (n, c, h, w) = original.dims4().unwrap();
                let hw = h * w;
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let idx = (i * c + ch) * hw + p;
                            let want = (1.0 - m.data()[i * hw + p]) * original.data()[idx];
                            if (input.data()[idx] - want).abs() > 1e-12 {
                                self.violations += 1;
                                return;
                            }
                        }
                    }
                }
            }
            None => {
                if input.data() != original.data() {
                    self.violations += 1;
                }
            }
        }
    }
}

#[test]
fn criterion_5_schedules_and_phases() {
    // learning-rate schedule at the reference protocol
    let cfg200 = TrainConfig {
        epochs: 200,
        decay_start_epoch: Some(100),
        ..Default::default()
    };
    assert_eq!(lr_schedule(50, &cfg200).unwrap(), 2e-4);
    assert_eq!(lr_schedule(150, &cfg200).unwrap(), 1e-4);
    assert_eq!(lr_schedule(200, &cfg200).unwrap(), 0.0);

    // a short real run with freeze and switch at epoch 2 of 4
    let spec = SyntheticSpec {
        num_identities: 4,
        images_per_identity_per_domain: 3,
        image_height: 16,
        image_width: 8,
        seed: 5,
        ..Default::default()
    };
    let (source, target) = generate_synthetic_dataset(&spec).unwrap();
    let ncfg = NetworkConfig {
        base_channels: 8,
        num_residual_blocks: 1,
        image_height: 16,
        image_width: 8,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        mode: TrainMode::EdaanEndToEnd,
        epochs: 4,
        batch_size: 4,
        seed: 9,
        attention_train_epochs: Some(2),
        disc_whole_image_epochs: Some(2),
        decay_start_epoch: Some(3),
        checkpoint_interval_epochs: 1,
        sample_interval_epochs: 0,
        ..Default::default()
    };
    let dir = temp_dir("crit5");
    let mut probe = DiscSwitchProbe { switch_epoch: 2, ..Default::default() };
    let out = train(
        &tcfg,
        &ncfg,
        &LossWeights::default(),
        &source,
        &target,
        &dir,
        &mut probe,
    )
    .unwrap();
    assert!(probe.steps_seen > 0);
    assert_eq!(probe.violations, 0, "discriminator input switch misbehaved");

    // attention parameters bit-identical across all post-freeze checkpoints
    let post_freeze: Vec<_> = out.stages[0]
        .checkpoints
        .iter()
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            name == "ckpt_final.bin"
                || name
                    .strip_prefix("ckpt_epoch")
                    .and_then(|s| s.strip_suffix(".bin"))
                    .and_then(|s| s.parse::<usize>().ok())
                    .is_some_and(|e| e >= 2)
        })
        .collect();
    assert!(post_freeze.len() >= 2);
    let states: Vec<_> = post_freeze.iter().map(|p| load_joint(p).unwrap()).collect();
    let reference = &states[0];
    for state in &states[1..] {
        for (_, entry) in reference.store.iter() {
            if entry.group.is_attention() {
                let other = state.store.value(state.store.lookup(&entry.name).unwrap());
                assert_eq!(entry.value.data(), other.data(), "{} drifted", entry.name);
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "[criterion 5] PASS: lr schedule exact, {} post-freeze checkpoints bit-identical, \
         disc switch verified over {} steps",
        states.len(),
        probe.steps_seen
    );
}

// ---------------------------------------------------------------------------
// criteria 6-8: the desk benchmark (shared runs)
// ---------------------------------------------------------------------------

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("adaptreid-acc-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

const DESK_SEEDS: [u64; 3] = [101, 202, 303];

struct DeskRun {
    rank1: f64,
    #[allow(dead_code)]
    map: f64,
    attn_iou: Option<f64>,
    fg_mae: Option<f64>,
    first_tenth_mean_total: f64,
    last_tenth_mean_total: f64,
    train_minutes: f64,
    losses_finite: bool,
}

struct DeskResults {
    edaan_attn: Vec<DeskRun>,
    edaan_noattn: Vec<DeskRun>,
    daan_attn: Vec<DeskRun>,
    daan_noattn: Vec<DeskRun>,
    num_test_identities: usize,
}

fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_identities: 12,
        images_per_identity_per_domain: 6,
        image_height: 64,
        image_width: 32,
        seed: 7,
        ..Default::default()
    }
}

fn desk_network() -> NetworkConfig {
    NetworkConfig {
        base_channels: 8,
        num_residual_blocks: 1,
        image_height: 64,
        image_width: 32,
        ..Default::default()
    }
}

fn desk_train(mode: TrainMode, attention: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        attention_enabled: attention,
        epochs: 60,
        batch_size: 16,
        seed,
        checkpoint_interval_epochs: 20,
        sample_interval_epochs: 0,
        ..Default::default()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median3(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn run_desk(
    mode: TrainMode,
    attention: bool,
    seed: u64,
    source: &[LabeledImage],
    target: &[LabeledImage],
    pools: &adaptreid_core::data::DomainPools,
) -> DeskRun {
    let tag = format!("desk-{mode}-{attention}-{seed}");
    let dir = temp_dir(&tag);
    let tcfg = desk_train(mode, attention, seed);
    let started = Instant::now();
    let outcome = train(
        &tcfg,
        &desk_network(),
        &LossWeights::default(),
        &pools.source_train,
        &pools.target_train,
        &dir,
        &mut NoopObserver,
    )
    .expect("desk training run");
    let train_minutes = started.elapsed().as_secs_f64() / 60.0;
    let _ = (source, target);

    // loss trajectory from the re-ID-bearing stage (first stage losses for
    // edaan, second stage for daan)
    let csv_path = match mode {
        TrainMode::DaanTwoStage => &outcome.stages[1].loss_csv,
        _ => &outcome.stages[0].loss_csv,
    };
    let text = std::fs::read_to_string(csv_path).unwrap();
    let totals: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .collect();
    let losses_finite = totals.iter().all(|v| v.is_finite());
    let tenth = (totals.len() / 10).max(1);
    let first_tenth_mean_total = mean(&totals[..tenth]);
    let last_tenth_mean_total = mean(&totals[totals.len() - tenth..]);

    // retrieval on the held-out target-domain split
    let query_refs: Vec<&LabeledImage> = pools.target_query.iter().collect();
    let gallery_refs: Vec<&LabeledImage> = pools.target_gallery.iter().collect();
    let embedder: &dyn Embedder = match (&outcome.reid, &outcome.joint) {
        (Some(reid), _) => &reid.net,
        (None, Some(joint)) => &joint.models,
        _ => unreachable!("every mode leaves a re-ID model"),
    };
    let store = match (&outcome.reid, &outcome.joint) {
        (Some(reid), _) => &reid.store,
        (None, Some(joint)) => &joint.store,
        _ => unreachable!(),
    };
    let q_emb = extract_embeddings(embedder, store, &query_refs).unwrap();
    let g_emb = extract_embeddings(embedder, store, &gallery_refs).unwrap();
    let qm: Vec<IdCam> = query_refs.iter().map(|i| IdCam::from(*i)).collect();
    let gm: Vec<IdCam> = gallery_refs.iter().map(|i| IdCam::from(*i)).collect();
    let rankings = rank_queries(&q_emb, &qm, &g_emb, &gm).unwrap();
    let rank1 = cmc(&rankings, &[1]).unwrap().values[0];
    let map = map_score(&rankings).unwrap().value;

    // translation-quality metrics come from the joint model when one exists
    let (attn_iou_v, fg_mae) = match &outcome.joint {
        Some(joint) => {
            let refs: Vec<&LabeledImage> = pools.source_test.iter().collect();
            let batch = stack_images(&refs).unwrap();
            let gts = stack_masks(&refs).unwrap();
            let mut t = Tape::new(false);
            let x = t.leaf(batch.clone());
            let out = adaptreid_core::translate::translate_s2t(&joint.models, &mut t, &joint.store, x)
                .unwrap();
            let fg =
                foreground_preservation(&batch, t.value(out.composed), &gts).unwrap();
            let iou = if attention {
                Some(attention_iou(t.value(out.foreground_mask), &gts, 0.5).unwrap())
            } else {
                None
            };
            (iou, Some(fg))
        }
        None => (None, None),
    };

    let _ = std::fs::remove_dir_all(&dir);
    DeskRun {
        rank1,
        map,
        attn_iou: attn_iou_v,
        fg_mae,
        first_tenth_mean_total,
        last_tenth_mean_total,
        train_minutes,
        losses_finite,
    }
}

fn desk_results() -> &'static DeskResults {
    static CELL: OnceLock<DeskResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = desk_spec();
        let (source, target) = generate_synthetic_dataset(&spec).unwrap();
        let protocol = ProtocolConfig::default();
        let pools = build_domain_pools(&source, &target, &protocol).unwrap();
        let num_test_identities = {
            let mut ids: Vec<u32> = pools.target_query.iter().map(|i| i.identity).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        };
        let runs = |mode, attn| -> Vec<DeskRun> {
            DESK_SEEDS
                .iter()
                .map(|&seed| run_desk(mode, attn, seed, &source, &target, &pools))
                .collect()
        };
        DeskResults {
            edaan_attn: runs(TrainMode::EdaanEndToEnd, true),
            edaan_noattn: runs(TrainMode::EdaanEndToEnd, false),
            daan_attn: runs(TrainMode::DaanTwoStage, true),
            daan_noattn: runs(TrainMode::DaanTwoStage, false),
            num_test_identities,
        }
    })
}

#[test]
fn criterion_6_end_to_end_desk_run() {
    let results = desk_results();
    let baseline = 1.0 / results.num_test_identities as f64;
    for (i, run) in results.edaan_attn.iter().enumerate() {
        assert!(run.losses_finite, "seed {i}: non-finite loss appeared");
        assert!(
            run.train_minutes < 60.0,
            "seed {i}: desk run took {:.1} min",
            run.train_minutes
        );
        assert!(
            run.last_tenth_mean_total < run.first_tenth_mean_total,
            "seed {i}: total loss did not decrease ({:.3} -> {:.3})",
            run.first_tenth_mean_total,
            run.last_tenth_mean_total
        );
        assert!(
            run.rank1 >= 3.0 * baseline,
            "seed {i}: rank-1 {:.3} below 3x random baseline {:.3}",
            run.rank1,
            3.0 * baseline
        );
    }
    let rank1s: Vec<f64> = results.edaan_attn.iter().map(|r| r.rank1).collect();
    println!(
        "[criterion 6] PASS: losses finite and decreasing, rank-1 {:?} vs 3x baseline {:.3}, runtimes {:?} min",
        rank1s,
        3.0 * baseline,
        results.edaan_attn.iter().map(|r| (r.train_minutes * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let results = desk_results();
    let med = |runs: &[DeskRun], f: &dyn Fn(&DeskRun) -> f64| -> f64 {
        median3(&runs.iter().map(f).collect::<Vec<_>>())
    };
    let mae_attn = med(&results.edaan_attn, &|r| r.fg_mae.unwrap());
    let mae_noattn = med(&results.edaan_noattn, &|r| r.fg_mae.unwrap());
    assert!(
        mae_attn < mae_noattn,
        "foreground MAE with attention {mae_attn:.4} not below no-attention {mae_noattn:.4}"
    );

    let r1_edaan = med(&results.edaan_attn, &|r| r.rank1);
    let r1_daan = med(&results.daan_attn, &|r| r.rank1);
    let r1_daan_noattn = med(&results.daan_noattn, &|r| r.rank1);
    assert!(
        r1_edaan >= r1_daan,
        "rank-1 ordering violated: edaan {r1_edaan:.3} < daan {r1_daan:.3}"
    );
    assert!(
        r1_daan >= r1_daan_noattn,
        "rank-1 ordering violated: daan {r1_daan:.3} < no-attention {r1_daan_noattn:.3}"
    );
    println!(
        "[criterion 7] PASS: fg-MAE {mae_attn:.4} < {mae_noattn:.4}; rank-1 {r1_edaan:.3} >= {r1_daan:.3} >= {r1_daan_noattn:.3}"
    );
}

#[test]
fn criterion_8_attention_mask_quality() {
    let results = desk_results();
    let ious: Vec<f64> = results.edaan_attn.iter().map(|r| r.attn_iou.unwrap()).collect();
    let median = median3(&ious);
    assert!(median > 0.5, "median attention IoU {median:.3} below 0.5 (runs: {ious:?})");
    println!("[criterion 8] PASS: attention IoU median {median:.3} (runs {ious:?})");
}

// ---------------------------------------------------------------------------
// criterion 9: determinism and round-trips
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_roundtrips() {
    // dataset regeneration is byte-identical
    let spec = SyntheticSpec {
        num_identities: 4,
        images_per_identity_per_domain: 2,
        image_height: 16,
        image_width: 8,
        seed: 99,
        ..Default::default()
    };
    let (s1, t1) = generate_synthetic_dataset(&spec).unwrap();
    let (s2, t2) = generate_synthetic_dataset(&spec).unwrap();
    let d1 = temp_dir("crit9-a");
    let d2 = temp_dir("crit9-b");
    write_synthetic_dataset(&d1, &s1, &t1).unwrap();
    write_synthetic_dataset(&d2, &s2, &t2).unwrap();
    for rel in ["manifest.csv", "source/0001_c1_000000.png", "target_masks/0002_c2_000001.png"] {
        assert_eq!(
            std::fs::read(d1.join(rel)).unwrap(),
            std::fs::read(d2.join(rel)).unwrap(),
            "{rel} differs between regenerations"
        );
    }

    // checkpoint save -> load -> save is byte-identical
    let ncfg = NetworkConfig {
        base_channels: 8,
        num_residual_blocks: 1,
        image_height: 16,
        image_width: 8,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed: 4,
        decay_start_epoch: Some(0),
        sample_interval_epochs: 0,
        ..Default::default()
    };
    let dir = temp_dir("crit9-train");
    let out = train(
        &tcfg,
        &ncfg,
        &LossWeights::default(),
        &s1,
        &t1,
        &dir,
        &mut NoopObserver,
    )
    .unwrap();
    let original = &out.stages[0].final_checkpoint;
    let reload = load_joint(original).unwrap();
    let copy = dir.join("copy.bin");
    save_joint(&copy, &reload).unwrap();
    assert_eq!(std::fs::read(original).unwrap(), std::fs::read(&copy).unwrap());

    // repeated evaluation produces identical metric bytes
    let pools = build_domain_pools(&s1, &t1, &ProtocolConfig::default()).unwrap();
    let joint = out.joint.as_ref().unwrap();
    let evaluate_once = |path: &std::path::Path| {
        let query_refs: Vec<&LabeledImage> = pools.target_query.iter().collect();
        let gallery_refs: Vec<&LabeledImage> = pools.target_gallery.iter().collect();
        let q = extract_embeddings(&joint.models, &joint.store, &query_refs).unwrap();
        let g = extract_embeddings(&joint.models, &joint.store, &gallery_refs).unwrap();
        let qm: Vec<IdCam> = query_refs.iter().map(|i| IdCam::from(*i)).collect();
        let gm: Vec<IdCam> = gallery_refs.iter().map(|i| IdCam::from(*i)).collect();
        let r = rank_queries(&q, &qm, &g, &gm).unwrap();
        let c = cmc(&r, &[1, 5, 10]).unwrap();
        let m = map_score(&r).unwrap();
        let rows: Vec<(String, Option<usize>, f64)> = vec![
            ("cmc".into(), Some(1), c.values[0]),
            ("cmc".into(), Some(5), c.values[1]),
            ("cmc".into(), Some(10), c.values[2]),
            ("map".into(), None, m.value),
        ];
        write_metrics_csv(path, &rows).unwrap();
    };
    let m1 = dir.join("metrics1.csv");
    let m2 = dir.join("metrics2.csv");
    evaluate_once(&m1);
    evaluate_once(&m2);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    for d in [d1, d2, dir] {
        let _ = std::fs::remove_dir_all(&d);
    }
    println!("[criterion 9] PASS: regeneration, checkpoint round-trip and evaluation all byte-identical");
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_param_gradients, AdamWConfig, Tape};
use crate::tensor::Tensor;

fn tiny(mode: InputMode, target: VisualTarget) -> LmConfig {
    LmConfig {
        d_model: 8,
        blocks: 1,
        heads: 2,
        ffn_hidden: 16,
        context: 24,
        input_mode: mode,
        visual_target: target,
        ..LmConfig::default()
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::new(8, 64).unwrap()
}

fn visual<S: crate::Scalar>(codes: &[usize], dim: usize, seed: u64) -> VisualTokens<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VisualTokens {
        codes: codes.to_vec(),
        features: Tensor::randn(&[codes.len(), dim], 1.0, &mut rng),
    }
}

fn model(config: LmConfig, seed: u64) -> Lm<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Lm::new(config, vocab(), 3, &mut rng).unwrap()
}

#[test]
fn vocabulary_layout() {
    let v = Vocabulary::new(8, 64).unwrap();
    assert_eq!(v.size(), 76);
    assert_eq!(v.text_range(), 4..12);
    assert_eq!(v.visual_range(), 12..76);
    assert_eq!(v.visual_id(5).unwrap(), 17);
    assert_eq!(v.code_of(17), Some(5));
    assert_eq!(v.text_of(7), Some(3));
    assert_eq!(v.code_of(7), None);
    assert!(v.visual_id(64).is_err() && v.text_id(8).is_err());
    assert!(Vocabulary::new(0, 4).is_err());
    for id in 0..v.size() {
        let kinds = [id < NUM_SPECIAL, v.is_text(id), v.is_visual(id)];
        assert_eq!(kinds.iter().filter(|&&k| k).count(), 1);
    }
}

#[test]
fn sequence_layout_examples() {
    let v = vocab();
    let img = visual::<f64>(&[5, 9], 3, 0);
    let s = build_sequence(
        &v,
        Some(&img),
        &[0, 3],
        Order::ImageFirst,
        InputMode::Continuous,
    )
    .unwrap();
    assert_eq!(s.ids, vec![1, 2, 17, 21, 3, 4, 7]);
    assert_eq!(s.image_span, Some(2..4));
    assert_eq!(s.override_positions(), vec![2, 3]);
    assert_eq!(s.target_span(), 5..7);
    assert!(!s.loss_mask[0] && s.loss_mask[1..].iter().all(|&m| m));

    let t = build_sequence(
        &v,
        Some(&img),
        &[0, 3],
        Order::TextFirst,
        InputMode::Continuous,
    )
    .unwrap();
    assert_eq!(t.ids, vec![1, 4, 7, 2, 17, 21, 3]);
    assert!(t.override_positions().is_empty());
    assert_eq!(t.target_span(), 4..7);

    let q = build_sequence(
        &v,
        Some(&img),
        &[0, 3],
        Order::ImageFirst,
        InputMode::Quantized,
    )
    .unwrap();
    assert!(q.override_positions().is_empty());
    assert_eq!(q.ids, s.ids);

    let text =
        build_sequence::<f64>(&v, None, &[0, 3], Order::ImageFirst, InputMode::Continuous).unwrap();
    assert_eq!(text.ids, vec![1, 4, 7]);
    assert!(text.image_span.is_none());

    assert!(
        build_sequence::<f64>(&v, None, &[], Order::ImageFirst, InputMode::Continuous).is_err()
    );
    assert!(build_sequence(
        &v,
        Some(&visual::<f64>(&[], 3, 0)),
        &[1],
        Order::ImageFirst,
        InputMode::Continuous
    )
    .is_err());
    assert!(build_sequence(
        &v,
        Some(&img),
        &[8],
        Order::ImageFirst,
        InputMode::Continuous
    )
    .is_err());
}

#[test]
fn loss_policy_masks() {
    let v = vocab();
    let img = visual::<f64>(&[5, 9], 3, 0);
    let mut s = build_sequence(
        &v,
        Some(&img),
        &[0, 3],
        Order::ImageFirst,
        InputMode::Continuous,
    )
    .unwrap();
    s.apply_loss_policy(&v, false, true);
    assert_eq!(
        s.loss_mask,
        vec![false, false, true, true, false, true, true]
    );
    let mut s = build_sequence(
        &v,
        Some(&img),
        &[0, 3],
        Order::TextFirst,
        InputMode::Continuous,
    )
    .unwrap();
    s.apply_loss_policy(&v, true, false);
    assert_eq!(
        s.loss_mask,
        vec![false, false, false, false, true, true, true]
    );
}

#[test]
fn forward_shapes_and_errors() {
    let m = model(tiny(InputMode::Continuous, VisualTarget::Classification), 1);
    let v = vocab();
    let tape = Tape::new();
    let one =
        build_sequence::<f64>(&v, None, &[2], Order::TextFirst, InputMode::Quantized).unwrap();
    let mut single = one.clone();
    single.ids.truncate(1);
    single.loss_mask.truncate(1);
    let l = m.logits(&tape, &m.store, &single).unwrap();
    assert_eq!(tape.shape(l), vec![1, v.size()]);
    assert!(tape.value(l).is_finite());

    let mut bad = one.clone();
    bad.ids[1] = v.size();
    assert!(m.logits(&tape, &m.store, &bad).is_err());
    let mut long = one.clone();
    long.ids = vec![BOS; 25];
    long.loss_mask = vec![true; 25];
    assert!(m.logits(&tape, &m.store, &long).is_err());

    let mut none = one;
    none.loss_mask = vec![false; none.len()];
    assert!(m.lm_loss(&tape, &m.store, &none).is_err());
}

#[test]
fn causal_in_ids_and_features() {
    let v = vocab();
    let m = model(tiny(InputMode::Continuous, VisualTarget::Classification), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = visual::<f64>(&[1, 2, 3, 4, 5, 6], 3, 4);
    let base = build_sequence(
        &v,
        Some(&img),
        &[0, 1, 2, 3, 4],
        Order::ImageFirst,
        InputMode::Continuous,
    )
    .unwrap();
    let logits = |s: &MultimodalSequence<f64>| {
        let t = Tape::new();
        let l = m.logits(&t, &m.store, s).unwrap();
        let v = t.value(l).clone();
        v
    };
    let reference = logits(&base);
    for _ in 0..16 {
        let j = rand::Rng::random_range(&mut rng, 1..base.len());
        let mut p = base.clone();
        p.ids[j] = rand::Rng::random_range(&mut rng, 0..v.size());
        if let Some(span) = p.image_span.clone().filter(|s| s.contains(&j)) {
            let f = p.visual_features.as_mut().unwrap();
            let cols = f.cols();
            for c in 0..cols {
                f.data_mut()[(j - span.start) * cols + c] += 1.0;
            }
        }
        let out = logits(&p);
        for i in 0..j {
            let d = out
                .row(i)
                .iter()
                .zip(reference.row(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d <= 1e-6, "position {i} moved by {d} after perturbing {j}");
        }
    }
}

#[test]
fn uniform_logits_loss_is_log_vocab() {
    let v = Vocabulary::new(8, 20).unwrap();
    assert_eq!(v.size(), 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Lm::<f64>::new(
        tiny(InputMode::Quantized, VisualTarget::Classification),
        v,
        3,
        &mut rng,
    )
    .unwrap();
    m.store.get_mut(m.head.w).value = Tensor::zeros(&[8, 32]);
    let img = visual::<f64>(&[0, 19], 3, 1);
    let s = build_sequence(
        &v,
        Some(&img),
        &[1, 7],
        Order::TextFirst,
        InputMode::Quantized,
    )
    .unwrap();
    let tape = Tape::new();
    let loss = m.lm_loss(&tape, &m.store, &s).unwrap();
    assert!((tape.value(loss).item() - 32f64.ln()).abs() < 1e-5);
}

#[test]
fn large_margin_logits_give_near_zero_loss() {
    let v = vocab();
    let mut m = model(tiny(InputMode::Quantized, VisualTarget::Classification), 0);
    let s = build_sequence::<f64>(&v, None, &[3, 3, 3], Order::TextFirst, InputMode::Quantized)
        .unwrap();
    m.store.get_mut(m.head.w).value = Tensor::zeros(&[8, v.size()]);
    let mut b = Tensor::zeros(&[v.size()]);
    b.data_mut()[v.text_id(3).unwrap()] = 50.0;
    m.store.get_mut(m.head.b.unwrap()).value = b;
    let tape = Tape::new();
    let loss = m.lm_loss(&tape, &m.store, &s).unwrap();
    assert!(tape.value(loss).item() < 1e-12);
}

#[test]
fn loss_parameter_gradients() {
    let v = vocab();
    for (mode, target, order) in [
        (
            InputMode::Continuous,
            VisualTarget::Classification,
            Order::ImageFirst,
        ),
        (
            InputMode::Quantized,
            VisualTarget::Classification,
            Order::TextFirst,
        ),
        (
            InputMode::Continuous,
            VisualTarget::Regression,
            Order::ImageFirst,
        ),
    ] {
        let m = model(tiny(mode, target), 5);
        let img = visual::<f64>(&[3, 40, 7], 3, 6);
        let s = build_sequence(&v, Some(&img), &[2, 5, 7], order, mode).unwrap();
        let err = check_param_gradients(&m.store, |t, st| m.lm_loss(t, st, &s), 1e-5, 6).unwrap();
        assert!(err < 1e-4, "{mode:?} {target:?}: {err}");
    }
}

#[test]
fn targets_do_not_depend_on_input_mode() {
    let v = vocab();
    let img = visual::<f64>(&[5, 9, 11], 3, 0);
    for order in [Order::ImageFirst, Order::TextFirst] {
        let c = build_sequence(&v, Some(&img), &[1, 2], order, InputMode::Continuous).unwrap();
        let q = build_sequence(&v, Some(&img), &[1, 2], order, InputMode::Quantized).unwrap();
        assert_eq!(c.ids, q.ids);
        assert_eq!(c.loss_mask, q.loss_mask);
    }
}

fn toy_pairs(n: usize) -> Vec<LmExample<f32>> {
    (0..n)
        .map(|i| LmExample {
            visual: visual(&[i % 64, (3 * i) % 64], 3, i as u64),
            caption: vec![i % 7, (i + 1) % 7],
        })
        .collect()
}

fn quick() -> LmConfig {
    LmConfig {
        d_model: 16,
        blocks: 1,
        ffn_hidden: 32,
        steps: 10,
        batch_size: 4,
        optimizer: AdamWConfig {
            peak_lr: 1e-2,
            warmup_steps: 0,
            ..AdamWConfig::lm_stage()
        },
        ..LmConfig::default()
    }
}

#[test]
fn ten_steps_reduce_loss() {
    let mut losses = Vec::new();
    let cfg = LmConfig {
        image_first_prob: 1.0,
        ..quick()
    };
    train_lm(&toy_pairs(4), &[], vocab(), &cfg, 1, &mut |s| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 10);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn mix_ratio_controls_text_only_batches() {
    let texts = vec![vec![1, 2], vec![3]];
    let mut kinds = Vec::new();
    train_lm(&toy_pairs(4), &texts, vocab(), &quick(), 2, &mut |s| {
        kinds.push(s.text_only);
        Ok(())
    })
    .unwrap();
    assert!(kinds.iter().all(|&k| !k));

    kinds.clear();
    let all = LmConfig {
        mix_ratio: 1.0,
        ..quick()
    };
    train_lm(&toy_pairs(4), &texts, vocab(), &all, 2, &mut |s| {
        kinds.push(s.text_only);
        Ok(())
    })
    .unwrap();
    assert!(kinds.iter().all(|&k| k));
    assert!(train_lm(&toy_pairs(4), &[], vocab(), &all, 2, &mut |_| Ok(())).is_err());
}

#[test]
fn frozen_training_only_moves_the_visual_projection() {
    let cfg = LmConfig {
        frozen: true,
        image_first_prob: 1.0,
        ..quick()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let before = Lm::<f32>::new(cfg.clone(), vocab(), 3, &mut rng).unwrap();
    let after = train_lm(&toy_pairs(4), &[], vocab(), &cfg, 4, &mut |_| Ok(())).unwrap();
    let mut moved = false;
    for ((name, a), (_, b)) in before
        .store
        .named_values()
        .iter()
        .zip(after.store.named_values())
    {
        if name.starts_with("lm.visual_proj") {
            moved |= a != &b;
        } else {
            let same = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{name} changed");
        }
    }
    assert!(moved);
}

#[test]
fn training_is_deterministic_and_stops_on_callback_error() {
    let run = || {
        let mut l = Vec::new();
        train_lm(&toy_pairs(4), &[], vocab(), &quick(), 7, &mut |s| {
            l.push(s.loss.to_bits());
            Ok(())
        })
        .unwrap();
        l
    };
    assert_eq!(run(), run());
    let r = train_lm(&toy_pairs(4), &[], vocab(), &quick(), 7, &mut |s| {
        if s.step == 3 {
            Err(crate::Error::invalid("stop"))
        } else {
            Ok(())
        }
    });
    assert!(r.is_err());
}

#[test]
fn cfg_examples() {
    let u = [1.0, 2.0];
    let c = [3.0, 0.0];
    assert_eq!(cfg_logits(&c, &u, 1.5).unwrap(), vec![4.0, -1.0]);
    assert_eq!(cfg_logits(&c, &u, 1.0).unwrap(), c.to_vec());
    assert_eq!(cfg_logits(&c, &u, 0.0).unwrap(), u.to_vec());
    assert!(cfg_logits(&c, &[1.0], 1.5).is_err());
}

#[test]
fn top_k_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = [0.3, 2.0, -1.0, 1.9];
    for _ in 0..50 {
        assert_eq!(top_k_sample(&l, 1, 1.0, &mut rng).unwrap(), 1);
        assert_eq!(top_k_sample(&l, 100, 1e-6, &mut rng).unwrap(), 1);
        assert!([1, 3].contains(&top_k_sample(&l, 2, 5.0, &mut rng).unwrap()));
    }
    let tied = [5.0, 0.0, 5.0, 1.0];
    let n = 10_000;
    let first = (0..n)
        .filter(|_| top_k_sample(&tied, 2, 1.0, &mut rng).unwrap() == 0)
        .count();
    assert!((first as f64 / n as f64 - 0.5).abs() < 0.03, "{first}");
    assert!(top_k_sample(&l, 0, 1.0, &mut rng).is_err());
    assert!(top_k_sample(&l, 1, 0.0, &mut rng).is_err());
    assert!(top_k_sample(&[f64::NAN], 1, 1.0, &mut rng).is_err());
    let masked = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
    assert_eq!(top_k_sample(&masked, 3, 1.0, &mut rng).unwrap(), 1);
}

/// Model whose logits are the head bias alone.
fn stub(bias_for: &[(usize, f64)]) -> Lm<f64> {
    let mut m = model(tiny(InputMode::Continuous, VisualTarget::Classification), 8);
    let v = m.vocab.size();
    m.store.get_mut(m.head.w).value = Tensor::zeros(&[8, v]);
    let mut b = Tensor::zeros(&[v]);
    for &(id, x) in bias_for {
        b.data_mut()[id] = x;
    }
    m.store.get_mut(m.head.b.unwrap()).value = b;
    m
}

#[test]
fn image_generation_stops_immediately_on_end_marker() {
    let m = stub(&[(IMG_END, 100.0)]);
    let prompt = text_sequence(&m.vocab, &m.config, &[1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = generate_image_tokens(&m, &prompt, &GenerateConfig::default(), &mut rng).unwrap();
    assert_eq!(
        g,
        GeneratedImage {
            codes: vec![],
            truncated: false
        }
    );
}

#[test]
fn image_generation_masks_and_truncates() {
    // Text ids dominate but are masked away inside the image span.
    let m = stub(&[(5, 100.0), (BOS, 90.0), (IMG_END, -100.0)]);
    let prompt = text_sequence(&m.vocab, &m.config, &[1]).unwrap();
    let cfg = GenerateConfig {
        max_len: 5,
        ..GenerateConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = generate_image_tokens(&m, &prompt, &cfg, &mut rng).unwrap();
    assert!(g.truncated);
    assert_eq!(g.codes.len(), 5);
    assert!(g.codes.iter().all(|&c| c < m.vocab.codebook_size));
    let long = GenerateConfig {
        max_len: 100,
        ..cfg
    };
    let g = generate_image_tokens(&m, &prompt, &long, &mut rng).unwrap();
    assert!(g.truncated && prompt.len() + 1 + g.codes.len() == m.config.context);
    let mut with_image = prompt.clone();
    with_image.ids.push(IMG);
    assert!(generate_image_tokens(&m, &with_image, &cfg, &mut rng).is_err());
}

#[test]
fn unit_guidance_matches_conditional_sampling() {
    let m = model(tiny(InputMode::Continuous, VisualTarget::Classification), 9);
    let prompt = text_sequence(&m.vocab, &m.config, &[1, 4]).unwrap();
    let cfg = GenerateConfig {
        alpha_cfg: 1.0,
        max_len: 6,
        ..GenerateConfig::default()
    };
    // Conditional-only reference built from the public pieces.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seq = prompt.clone();
    seq.ids.push(IMG);
    seq.loss_mask.push(true);
    let mut expect = Vec::new();
    loop {
        if expect.len() == cfg.max_len {
            break;
        }
        let mut l = m.next_logits(&seq).unwrap();
        for (i, x) in l.iter_mut().enumerate() {
            if i != IMG_END && !m.vocab.is_visual(i) {
                *x = f64::NEG_INFINITY;
            }
        }
        let id = top_k_sample(&l, cfg.top_k, cfg.temperature, &mut rng).unwrap();
        if id == IMG_END {
            break;
        }
        expect.push(m.vocab.code_of(id).unwrap());
        seq.ids.push(id);
        seq.loss_mask.push(true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let got = generate_image_tokens(&m, &prompt, &cfg, &mut rng).unwrap();
    assert_eq!(got.codes, expect);
}

#[test]
fn text_generation_contract() {
    let m = model(
        tiny(InputMode::Continuous, VisualTarget::Classification),
        10,
    );
    let img = visual::<f64>(&[3, 4], 3, 2);
    let cfg = GenerateConfig {
        top_k: 1,
        max_len: 6,
        ..GenerateConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = generate_text(&m, &img, &cfg, &mut rng).unwrap();
    let b = generate_text(&m, &img, &cfg, &mut rng).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6 && a.iter().all(|&t| t < m.vocab.eos_text()));
    assert!(generate_text(&m, &visual::<f64>(&[], 3, 0), &cfg, &mut rng).is_err());

    let eos_model = stub(&[(m.vocab.text_id(m.vocab.eos_text()).unwrap(), 100.0)]);
    assert!(generate_text(&eos_model, &img, &cfg, &mut rng)
        .unwrap()
        .is_empty());
}

#[test]
fn rerank_contract() {
    let m = model(
        tiny(InputMode::Continuous, VisualTarget::Classification),
        11,
    );
    let prompt = text_sequence(&m.vocab, &m.config, &[2]).unwrap();
    assert_eq!(rerank_by_likelihood(&m, &prompt, &[vec![4, 5]]).unwrap(), 0);
    assert!(rerank_by_likelihood(&m, &prompt, &[]).is_err());
    let same = vec![vec![1, 2], vec![1, 2]];
    assert_eq!(rerank_by_likelihood(&m, &prompt, &same).unwrap(), 0);

    let favoured = stub(&[(m.vocab.visual_id(7).unwrap(), 5.0), (IMG_END, 5.0)]);
    let cands = vec![vec![30, 31], vec![7, 7], vec![7, 7]];
    assert_eq!(rerank_by_likelihood(&favoured, &prompt, &cands).unwrap(), 1);
    let ll = image_log_likelihood(&favoured, &prompt, &[7, 7]).unwrap();
    assert!(ll < 0.0 && ll.is_finite());
}

#[test]
fn config_validation_and_toml() {
    assert!(LmConfig::default().validate().is_ok());
    assert!(LmConfig {
        heads: 3,
        ..LmConfig::default()
    }
    .validate()
    .is_err());
    assert!(LmConfig {
        mix_ratio: 1.5,
        ..LmConfig::default()
    }
    .validate()
    .is_err());
    let c: LmConfig = toml::from_str(
        "input_mode = \"quantized\"\nvisual_target = \"regression\"\nmix_ratio = 0.5",
    )
    .unwrap();
    assert_eq!(c.input_mode, InputMode::Quantized);
    assert_eq!(c.visual_target, VisualTarget::Regression);
    assert!(toml::from_str::<LmConfig>("nope = 1").is_err());
    assert!(GenerateConfig::default().validate().is_ok());
    assert!(GenerateConfig {
        top_k: 0,
        ..GenerateConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #[test]
    fn cfg_endpoints_are_exact(cond in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -5.0f64..5.0) {
        let uncond: Vec<f64> = cond.iter().map(|x| x * 0.3 + shift).collect();
        prop_assert_eq!(cfg_logits(&cond, &uncond, 1.0).unwrap(), cond.clone());
        prop_assert_eq!(cfg_logits(&cond, &uncond, 0.0).unwrap(), uncond);
    }

    #[test]
    fn top_k_draws_from_the_k_largest(logits in prop::collection::vec(-10.0f64..10.0, 1..20), k in 1usize..25, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = top_k_sample(&logits, k, 1.0, &mut rng).unwrap();
        let larger = logits.iter().filter(|&&x| x > logits[id]).count();
        prop_assert!(larger < k.min(logits.len()));
    }
}

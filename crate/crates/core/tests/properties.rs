use lorafa_core::equivalence::{subspace_check, verify_sgd_equivalence};
use lorafa_core::harness::{train_run, RunConfig, TaskKind, Trainer};
use lorafa_core::memory::{analytic_report, ActivationModel, Modifiers};
use lorafa_core::model::{count_trainable_formula, LinearSlot};
use lorafa_core::optim::SgdConfig;
use lorafa_core::tensor::{matmul, randn};
use lorafa_core::{
    build_model, AdaptationMode, AdaptedLinear, AdapterInit, ModelConfig, OptimizerConfig, ParamStore, RngState,
    TokenBatch,
};
use proptest::prelude::*;

fn adapted_modes() -> impl Strategy<Value = AdaptationMode> {
    prop_oneof![Just(AdaptationMode::Lora), Just(AdaptationMode::LoraFa)]
}

fn any_mode() -> impl Strategy<Value = AdaptationMode> {
    proptest::sample::select(AdaptationMode::ALL.to_vec())
}

/// `(d_in, d_out, rank, rows, seed)` for a single layer.
fn layer_shape() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..20, 1usize..20, 1usize..8, any::<u64>())
        .prop_flat_map(|(i, o, rows, seed)| (Just(i), Just(o), 1..=i.min(o), Just(rows), Just(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merged_forward_matches_adapter_forward(
        (d_in, d_out, rank, rows, seed) in layer_shape(),
        mode in adapted_modes(),
    ) {
        let mut rng = RngState::new(seed);
        let mut layer = AdaptedLinear::init(d_in, d_out, mode, AdapterInit::new(rank), &mut rng).unwrap();
        layer.set_up(randn(&[rank, d_out], &mut rng, 1.0).unwrap()).unwrap();
        let x = randn(&[rows, d_in], &mut rng, 1.0).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        let merged = matmul(&x, &layer.merge().unwrap()).unwrap();
        let scale = 1.0 + y.max_abs();
        prop_assert!(y.max_abs_diff(&merged).unwrap() < 1e-12 * scale);
    }

    #[test]
    fn fresh_adapter_is_transparent(
        (d_in, d_out, rank, rows, seed) in layer_shape(),
        mode in adapted_modes(),
        a_std in 0.1f64..10.0,
    ) {
        let mut rng = RngState::new(seed);
        let init = AdapterInit { rank, alpha: None, a_std };
        let layer = AdaptedLinear::init(d_in, d_out, mode, init, &mut rng).unwrap();
        let x = randn(&[rows, d_in], &mut rng, 3.0).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        let base = matmul(&x, layer.weight()).unwrap();
        prop_assert_eq!(y.data(), base.data());
    }

    #[test]
    fn lora_and_lora_fa_share_up_gradient(
        (d_in, d_out, rank, rows, seed) in layer_shape(),
    ) {
        let mut rng = RngState::new(seed);
        let w = randn(&[d_in, d_out], &mut rng, 1.0).unwrap();
        let a = randn(&[d_in, rank], &mut rng, 1.0).unwrap();
        let b = randn(&[rank, d_out], &mut rng, 1.0).unwrap();
        let x = randn(&[rows, d_in], &mut rng, 1.0).unwrap();
        let dy = randn(&[rows, d_out], &mut rng, 1.0).unwrap();
        let alpha = 1.0 / rank as f64;
        let grads = |mode| {
            let l = AdaptedLinear::from_parts(w.clone(), Some(a.clone()), Some(b.clone()), alpha, mode).unwrap();
            let (_, kept) = l.forward(&x).unwrap();
            l.backward(&kept, &dy).unwrap()
        };
        let (dx_lora, g_lora) = grads(AdaptationMode::Lora);
        let (dx_fa, g_fa) = grads(AdaptationMode::LoraFa);
        prop_assert!(g_lora.up.unwrap().bitwise_eq(g_fa.up.as_ref().unwrap()));
        prop_assert!(dx_lora.bitwise_eq(&dx_fa));
        prop_assert!(g_fa.down.is_none() && g_fa.weight.is_none());
    }

    #[test]
    fn lora_fa_retains_no_full_width_tensor(
        (d_in, d_out, rank, rows, seed) in layer_shape(),
    ) {
        let mut rng = RngState::new(seed);
        let layer = AdaptedLinear::init(d_in, d_out, AdaptationMode::LoraFa, AdapterInit::new(rank), &mut rng).unwrap();
        let x = randn(&[rows, d_in], &mut rng, 1.0).unwrap();
        let (_, kept) = layer.forward(&x).unwrap();
        prop_assert!(!kept.has_full_input());
        prop_assert!(kept.full_input().is_err());
        prop_assert_eq!(kept.low_rank_input().unwrap().shape(), &[rows, rank][..]);
        prop_assert_eq!(kept.elements(), rows * rank);
    }

    #[test]
    fn sgd_identity_holds_for_arbitrary_shapes(
        (d_in, d_out, rank, rows, seed) in layer_shape(),
        eta in 1e-4f64..1.0,
        alpha in prop::option::of(0.05f64..4.0),
    ) {
        let mut rng = RngState::new(seed);
        let init = AdapterInit { rank, alpha, a_std: 1.0 };
        let mut layer = AdaptedLinear::init(d_in, d_out, AdaptationMode::LoraFa, init, &mut rng).unwrap();
        layer.set_up(randn(&[rank, d_out], &mut rng, 1.0).unwrap()).unwrap();
        let x = randn(&[rows, d_in], &mut rng, 1.0).unwrap();
        let dy = randn(&[rows, d_out], &mut rng, 1.0).unwrap();
        prop_assert!(verify_sgd_equivalence(&layer, &x, &dy, eta).unwrap() < 1e-10);
    }

    #[test]
    fn subspace_report_bounds(
        (d_in, d_out, rank, _rows, seed) in layer_shape(),
    ) {
        let mut rng = RngState::new(seed);
        let a = randn(&[d_in, rank], &mut rng, 1.0).unwrap();
        let inside = matmul(&a, &randn(&[rank, d_out], &mut rng, 1.0).unwrap()).unwrap();
        let rep = subspace_check(&a, &inside).unwrap();
        prop_assert!(rep.residual >= 0.0 && rep.residual < 1e-10);
        prop_assert!(rep.numerical_rank <= rank.min(d_out));
        let any = randn(&[d_in, d_out], &mut rng, 1.0).unwrap();
        let rep = subspace_check(&a, &any).unwrap();
        prop_assert!(rep.residual >= 0.0);
        prop_assert!(rep.numerical_rank <= d_in.min(d_out));
    }
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    // (d, L, b, s, r) with r well below d
    (prop::sample::select(vec![16usize, 32, 64, 128, 256]), 1usize..6, 1usize..33, 1usize..257)
        .prop_flat_map(|(d, l, b, s)| (Just(d), Just(l), Just(b), Just(s), 1..=d / 4))
}

fn total(config: &ModelConfig, mode: AdaptationMode, r: usize, b: usize, s: usize, m: Modifiers, am: ActivationModel) -> f64 {
    analytic_report(config, mode, r, b, s, m, am).unwrap().total_bytes
}

fn activation_models() -> impl Strategy<Value = ActivationModel> {
    prop_oneof![Just(ActivationModel::PaperConstant), Just(ActivationModel::PerLayerCount)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn memory_ordering(g in geometry(), am in activation_models()) {
        let (d, l, b, s, r) = g;
        let c = ModelConfig::new(d, l, 1, 10, s, b);
        let m = Modifiers::default();
        let rep = |mode| analytic_report(&c, mode, r, b, s, m, am).unwrap();
        let (fa, lora, ft) = (rep(AdaptationMode::LoraFa), rep(AdaptationMode::Lora), rep(AdaptationMode::Ft));
        prop_assert!(fa.total_bytes < lora.total_bytes && fa.total_bytes < ft.total_bytes);
        // lora keeps every full input ft keeps plus the low-rank ones
        let extra = (lora.activation_bytes_linear - ft.activation_bytes_linear) as f64;
        let saved = ft.trainable_state_bytes as f64 - lora.trainable_state_bytes as f64;
        prop_assert_eq!(lora.total_bytes < ft.total_bytes, extra < saved);
        if b * s <= d {
            prop_assert!(lora.total_bytes < ft.total_bytes);
        }
    }

    #[test]
    fn memory_monotone_in_every_extent(g in geometry(), mode in any_mode(), am in activation_models()) {
        let (d, l, b, s, r) = g;
        let m = Modifiers::default();
        let at = |d: usize, l: usize, b: usize, s: usize, r: usize| {
            total(&ModelConfig::new(d, l, 1, 10, s, b), mode, r, b, s, m, am)
        };
        let base = at(d, l, b, s, r);
        prop_assert!(at(d, l, b + 1, s, r) >= base);
        prop_assert!(at(d, l, b, s + 1, r) >= base);
        prop_assert!(at(d + 1, l, b, s, r) >= base);
        prop_assert!(at(d, l + 1, b, s, r) >= base);
        prop_assert!(at(d, l, b, s, r + 1) >= base);
    }

    #[test]
    fn modifiers_touch_only_their_terms(
        g in geometry(),
        mode in any_mode(),
        am in activation_models(),
        bits in prop::sample::select(vec![4u32, 8, 16]),
        shards in 1u32..9,
    ) {
        let (d, l, b, s, r) = g;
        let c = ModelConfig::new(d, l, 1, 10, s, b);
        let base = analytic_report(&c, mode, r, b, s, Modifiers::default(), am).unwrap();
        let q = Modifiers { weight_bits: bits, num_shards: shards, full_recompute: false };
        let mq = analytic_report(&c, mode, r, b, s, q, am).unwrap();
        let expected = base.weight_bytes * (bits as f64 / 16.0) / shards as f64;
        prop_assert!((mq.weight_bytes - expected).abs() <= 1e-9 * expected);
        prop_assert_eq!(mq.trainable_state_bytes, base.trainable_state_bytes);
        prop_assert_eq!(mq.activation_bytes_linear, base.activation_bytes_linear);
        let rc = Modifiers { full_recompute: true, ..Modifiers::default() };
        let mr = analytic_report(&c, mode, r, b, s, rc, am).unwrap();
        prop_assert_eq!(mr.activation_bytes_linear, 0);
        prop_assert!(mr.recompute_flops);
        prop_assert_eq!(mr.weight_bytes, base.weight_bytes);
        prop_assert_eq!(mr.trainable_state_bytes, base.trainable_state_bytes);
        for rep in [&base, &mq, &mr] {
            let parts = rep.weight_bytes + rep.trainable_state_bytes as f64 + rep.activation_bytes_linear as f64;
            prop_assert_eq!(rep.total_bytes, parts);
        }
    }

    #[test]
    fn enumeration_matches_closed_form(d in 1usize..40, l in 1usize..5, r in 1usize..40, mode in any_mode()) {
        prop_assume!(r <= d);
        let c = ModelConfig::new(d, l, 1, 10, 4, 1);
        let model = build_model(c, mode, AdapterInit::new(r), 0).unwrap();
        prop_assert_eq!(model.count_trainable().linear, count_trainable_formula(&c, mode, r).unwrap());
    }
}

fn tiny_model(mode: AdaptationMode, seed: u64) -> lorafa_core::TransformerModel {
    let c = ModelConfig::new(16, 2, 2, 12, 8, 2);
    build_model(c, mode, AdapterInit::new(4), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_are_causal(
        tokens in prop::collection::vec(0usize..12, 8),
        replacement in prop::collection::vec(0usize..12, 8),
        t in 0usize..8,
        mode in any_mode(),
        seed in any::<u64>(),
    ) {
        let mut model = tiny_model(mode, seed);
        lorafa_core::gradcheck::randomize_adapters(&mut model, 0.5, &mut RngState::new(seed)).unwrap();
        let batch = |toks: Vec<usize>| TokenBatch::new(toks, vec![Some(0); 8], 1, 8).unwrap();
        let mut changed = tokens.clone();
        changed[t + 1..].copy_from_slice(&replacement[t + 1..]);
        let a = model.logits(&batch(tokens)).unwrap();
        let b = model.logits(&batch(changed)).unwrap();
        let v = a.cols();
        prop_assert_eq!(&a.data()[..(t + 1) * v], &b.data()[..(t + 1) * v]);
    }

    #[test]
    fn frozen_tensors_never_change(mode in any_mode(), seed in 0u64..1000, sgd in any::<bool>()) {
        let mut cfg = RunConfig::new(mode, TaskKind::Copy);
        cfg.model = ModelConfig::new(16, 1, 2, 10, 8, 4);
        cfg.rank = 4;
        cfg.seed = seed;
        cfg.eval_examples = 2;
        if sgd {
            cfg.optimizer = OptimizerConfig::Sgd(SgdConfig { lr: 0.1 });
        }
        let mut trainer = Trainer::new(cfg).unwrap();
        for _ in 0..4 {
            trainer.step().unwrap();
        }
        let (before, after) = (trainer.initial_model(), trainer.model());
        let trainable = after.trainable_keys();
        let counts = after.count_trainable().full;
        let expected = if sgd { 0 } else { 2 * counts };
        prop_assert_eq!(trainer.optimizer_state_elements(), expected);
        for key in before.all_keys() {
            let (x, y) = (before.param(&key).unwrap(), after.param(&key).unwrap());
            if !trainable.contains(&key) {
                prop_assert!(x.bitwise_eq(y), "{key:?} changed");
            }
        }
        if mode == AdaptationMode::LoraFa {
            prop_assert_eq!(trainable.len(), 6);
            let (_, _, l) = after.linear_layers().find(|(_, s, _)| *s == LinearSlot::FfnUp).unwrap();
            prop_assert!(l.up().unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn runs_are_reproducible(mode in any_mode(), seed in 0u64..1000, task in prop::sample::select(vec![TaskKind::Copy, TaskKind::Reverse, TaskKind::CharLm])) {
        let mut cfg = RunConfig::new(mode, task);
        cfg.model = ModelConfig::new(8, 1, 2, 10, 6, 2);
        cfg.rank = 2;
        cfg.steps = 3;
        cfg.seed = seed;
        cfg.eval_examples = 4;
        let a = train_run(&cfg).unwrap();
        let b = train_run(&cfg).unwrap();
        let bits = |r: &lorafa_core::harness::RunReport| r.loss_curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
        let text = a.to_json().unwrap();
        let back = lorafa_core::harness::RunReport::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
    }
}

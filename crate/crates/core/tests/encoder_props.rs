use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simplex_core::encoder::{
    aggregate, forward_batch, score, user_representation, Aggregation, EncoderConfig, ModelParams, Similarity,
};
use simplex_core::loss::{LossConfig, LossKind};
use simplex_core::trainer::{adam_step, AdamConfig, AdamState};
use simplex_core::verify::{analytic_grads, batch_loss, GradInstance};

fn instance(seed: u64) -> GradInstance {
    GradInstance::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn enc(aggregation: Aggregation, similarity: Similarity, g: f64) -> EncoderConfig {
    EncoderConfig {
        aggregation,
        g,
        similarity,
        ..EncoderConfig::default()
    }
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        h in prop::collection::vec(-2.0f64..2.0, 4),
        e in prop::collection::vec(-2.0f64..2.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(h.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        prop_assume!(e.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let s = score(&h, &e, Similarity::Cosine, 1e-12);
        let ha: Vec<f64> = h.iter().map(|x| x * a).collect();
        let eb: Vec<f64> = e.iter().map(|x| x * b).collect();
        let s2 = score(&ha, &eb, Similarity::Cosine, 1e-12);
        prop_assert!((s - s2).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn attention_weights_are_a_distribution(seed in any::<u64>(), agg_i in 0usize..3) {
        let inst = instance(seed);
        let agg = Aggregation::ALL[agg_i];
        for ex in inst.examples() {
            let a = aggregate(ex.hist_items, ex.hist_mask, &inst.params, agg, Some(inst.params.user(ex.user as usize))).unwrap();
            let total: f64 = a.alpha.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (w, &m) in a.alpha.iter().zip(ex.hist_mask) {
                prop_assert!(*w >= 0.0);
                if !m {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_slots_do_not_matter(seed in any::<u64>(), agg_i in 0usize..3, junk in 0u32..7) {
        let inst = instance(seed);
        let cfg = enc(Aggregation::ALL[agg_i], Similarity::Cosine, 0.5);
        for ex in inst.examples() {
            let base = user_representation(&inst.params, &cfg, ex.user as usize, ex.hist_items, ex.hist_mask);
            let swapped: Vec<u32> = ex
                .hist_items
                .iter()
                .zip(ex.hist_mask)
                .map(|(&i, &m)| if m { i } else { junk })
                .collect();
            let other = user_representation(&inst.params, &cfg, ex.user as usize, &swapped, ex.hist_mask);
            prop_assert_eq!(base, other);
        }
    }

    #[test]
    fn unit_gate_is_plain_mf(seed in any::<u64>(), agg_i in 0usize..3, sim_i in 0usize..2) {
        let inst = instance(seed);
        let sim = Similarity::ALL[sim_i];
        let cfg = enc(Aggregation::ALL[agg_i], sim, 1.0);
        let tape = forward_batch(&inst.params, &cfg, &inst.examples());
        for (ex, t) in inst.examples().iter().zip(&tape.examples) {
            let e_u = inst.params.user(ex.user as usize);
            for (i, s) in ex.targets().zip(&t.scores) {
                let mf = score(e_u, inst.params.item(i as usize), sim, 1e-12);
                prop_assert!((s - mf).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_query_self_attention_is_average_pooling(seed in any::<u64>()) {
        let mut inst = instance(seed);
        inst.params.query.iter_mut().for_each(|q| *q = 0.0);
        for ex in inst.examples() {
            let sa = aggregate(ex.hist_items, ex.hist_mask, &inst.params, Aggregation::SelfAttention, None).unwrap();
            let avg = aggregate(ex.hist_items, ex.hist_mask, &inst.params, Aggregation::AveragePooling, None).unwrap();
            for (a, b) in sa.pooled.iter().zip(&avg.pooled) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    /// A first Adam step moves every coordinate against its gradient sign, so
    /// a small enough step must lower the loss.
    #[test]
    fn one_small_adam_step_decreases_the_loss(
        seed in any::<u64>(),
        agg_i in 0usize..3,
        sim_i in 0usize..2,
        kind_i in 0usize..6,
    ) {
        let inst = instance(seed);
        let kind = LossKind::ALL[kind_i];
        let cfg = enc(Aggregation::ALL[agg_i], Similarity::ALL[sim_i], 0.5);
        let loss_cfg = LossConfig { kind, margin: 0.3, negative_weight: 3.0 };
        let examples = inst.examples();
        let before = batch_loss(&inst.params, &cfg, &loss_cfg, &examples);
        let grads = analytic_grads(&inst.params, &cfg, &loss_cfg, &examples);
        let gnorm: f64 = simplex_core::encoder::Tensor::ALL
            .iter()
            .flat_map(|&t| grads.tensor(t).iter())
            .map(|g| g.abs())
            .sum();
        prop_assume!(gnorm > 1e-6);
        let mut params: ModelParams<f64> = inst.params.clone();
        let mut state = AdamState::new(&params);
        let adam = AdamConfig { learning_rate: 1e-5, ..AdamConfig::default() };
        adam_step(&mut params, &grads, &mut state, &adam).unwrap();
        let after = batch_loss(&params, &cfg, &loss_cfg, &examples);
        prop_assert!(after < before, "{kind:?}: {before} -> {after}");
    }
}

#[test]
fn padding_row_never_contributes() {
    let inst = instance(3);
    let mut params = inst.params.clone();
    let pad = params.pad_row();
    let d = params.dim;
    params.item_emb[pad * d..].iter_mut().for_each(|x| *x = 9.0);
    let cfg = enc(Aggregation::SelfAttention, Similarity::Cosine, 0.5);
    for ex in inst.examples() {
        let a = user_representation(&inst.params, &cfg, ex.user as usize, ex.hist_items, ex.hist_mask);
        let b = user_representation(&params, &cfg, ex.user as usize, ex.hist_items, ex.hist_mask);
        assert_eq!(a, b);
    }
}

mod common;

use common::{random_trace, TraceShape};
use hetattr::oracle::block_discrepancy;
use hetattr::propagation::PropagationError;
use hetattr::trace::SourceSlot;
use hetattr::{
    hetero_step, propagate, propagate_with, rollout_step, CorrectionMode, Exec, PropagateOptions,
    StreamId, StreamState,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape() -> impl Strategy<Value = TraceShape> {
    (1usize..10, any::<bool>(), any::<bool>()).prop_map(|(layers, derived_stream, noise_link)| {
        TraceShape {
            layers,
            derived_stream,
            noise_link,
        }
    })
}

fn random_state(rng: &mut ChaCha8Rng, rows: usize, n1: usize, n2: usize) -> StreamState {
    StreamState {
        stream: StreamId(0),
        to_source1: Array2::from_shape_simple_fn((rows, n1), || rng.random_range(-1.0..1.0)),
        to_source2: Array2::from_shape_simple_fn((rows, n2), || rng.random_range(-1.0..1.0)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn engine_matches_block_rollout(seed in any::<u64>(), shape in shape()) {
        let t = random_trace(seed, shape);
        for mode in CorrectionMode::ALL {
            let d = block_discrepancy(&t, mode, false).unwrap();
            prop_assert!(d <= 1e-10, "{} {d:e}", mode.name());
            if mode.is_nonnegative() {
                let d = block_discrepancy(&t, mode, true).unwrap();
                prop_assert!(d <= 1e-10, "{} noised {d:e}", mode.name());
            }
        }
    }

    #[test]
    fn nonnegative_modes_keep_states_nonnegative(seed in any::<u64>(), shape in shape()) {
        let t = random_trace(seed, shape);
        for mode in [CorrectionMode::Positive, CorrectionMode::Absolute] {
            for noise in [false, true] {
                let r = propagate_with(&t, &PropagateOptions::new(mode).with_noise_link(noise)).unwrap();
                for s in r.states.values() {
                    prop_assert!(s.min_entry() >= 0.0 && s.is_finite());
                }
            }
        }
    }

    #[test]
    fn hetero_step_with_equal_states_is_rollout_bitwise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..8);
        let (n1, n2) = (rng.random_range(1..6), rng.random_range(1..6));
        let s = random_state(&mut rng, n, n1, n2);
        let map = Array2::from_shape_simple_fn((n, n), || rng.random_range(-1.0..1.0));
        let a = hetero_step(&s, &s, &map).unwrap();
        let b = rollout_step(&s, &map).unwrap();
        for (x, y) in a.to_source1.iter().chain(a.to_source2.iter())
            .zip(b.to_source1.iter().chain(b.to_source2.iter())) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn streams_unreachable_from_source2_carry_nothing_toward_it(seed in any::<u64>(), shape in shape()) {
        let t = random_trace(seed, shape);
        let r = propagate(&t, CorrectionMode::Full).unwrap();
        let (_, s2) = r.sources;
        for (id, s) in &r.states {
            if !reaches(&t, *id, s2) {
                prop_assert!(s.to_source2.iter().all(|&v| v == 0.0), "{id}");
            }
        }
    }
}

/// Whether information from `src` can flow into `dst` along the layer order.
fn reaches(t: &hetattr::AttentionTrace, dst: StreamId, src: StreamId) -> bool {
    let mut carrying = std::collections::BTreeSet::from([src]);
    for l in &t.layers {
        if carrying.contains(&l.kv_stream) {
            carrying.insert(l.query_stream);
        }
    }
    carrying.contains(&dst)
}

#[test]
fn source_separation_with_zero_initial_source2() {
    // initial() puts identity toward the own source; a state whose source-2
    // block is zero stays zero under both step kinds.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut q = StreamState::initial(StreamId(0), 4, Some(SourceSlot::First), 4, 3);
    let kv = StreamState::initial(StreamId(2), 5, None, 4, 3);
    for _ in 0..20 {
        let self_map = Array2::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
        let cross = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        q = rollout_step(&q, &self_map).unwrap();
        q = hetero_step(&q, &kv, &cross).unwrap();
    }
    assert!(q.to_source2.iter().all(|&v| v == 0.0));
    assert!(q.to_source1.iter().any(|&v| v != 0.0));
}

#[test]
fn single_cross_layer_scales_with_gradient() {
    // One cross layer into the text stream: the attribution toward the image
    // is exactly the corrected map, so scaling gradients by c scales it by c.
    let mut t = random_trace(
        11,
        TraceShape {
            layers: 0,
            derived_stream: false,
            noise_link: false,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n1, n2) = (t.tokens[0].count, t.tokens[1].count);
    t.layers.push(hetattr::LayerRecord {
        index: 0,
        kind: hetattr::LayerKind::TypeB,
        query_stream: StreamId(1),
        kv_stream: StreamId(0),
        attention: common::random_attention(&mut rng, 2, n2, n1),
        gradient: common::random_gradient(&mut rng, 2, n2, n1),
    });
    for mode in [CorrectionMode::Positive, CorrectionMode::Absolute] {
        let base = propagate(&t, mode)
            .unwrap()
            .cls_interpretation(StreamId(1))
            .unwrap()
            .0;
        let mut scaled = t.clone();
        scaled.layers[0].gradient.mapv_inplace(|g| g * 4.0);
        let s = propagate(&scaled, mode)
            .unwrap()
            .cls_interpretation(StreamId(1))
            .unwrap()
            .0;
        for (a, b) in base.scores.iter().zip(&s.scores) {
            assert!((a * 4.0 - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        assert_eq!(base.ranking(), s.ranking());
    }
}

#[test]
fn gradient_scaling_is_not_linear_through_two_layers() {
    // (I + cA)(I + cB) = I + c(A + B) + c^2 AB: exact scaling of saliency
    // with gradient magnitude holds only for depth-one paths.
    let t = random_trace(
        21,
        TraceShape {
            layers: 0,
            derived_stream: false,
            noise_link: false,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n1 = t.tokens[0].count;
    let mut t2 = t.clone();
    for index in 0..2 {
        t2.layers.push(hetattr::LayerRecord {
            index,
            kind: hetattr::LayerKind::TypeA,
            query_stream: StreamId(0),
            kv_stream: StreamId(0),
            attention: common::random_attention(&mut rng, 1, n1, n1),
            gradient: common::random_gradient(&mut rng, 1, n1, n1).mapv(f32::abs),
        });
    }
    let base = propagate(&t2, CorrectionMode::Positive).unwrap();
    let mut scaled = t2.clone();
    for l in &mut scaled.layers {
        l.gradient.mapv_inplace(|g| g * 2.0);
    }
    let s = propagate(&scaled, CorrectionMode::Positive).unwrap();
    let eye = Array2::<f64>::eye(n1);
    let a = &base.state(StreamId(0)).unwrap().to_source1 - &eye;
    let b = &s.state(StreamId(0)).unwrap().to_source1 - &eye;
    let dev = (&a * 2.0 - &b).mapv(f64::abs).sum();
    assert!(dev > 1e-9, "{dev}");
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let t = random_trace(
        77,
        TraceShape {
            layers: 9,
            derived_stream: true,
            noise_link: true,
        },
    );
    let run = |exec| {
        propagate_with(
            &t,
            &PropagateOptions::new(CorrectionMode::Absolute)
                .with_noise_link(true)
                .with_exec(exec),
        )
        .unwrap()
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    assert_eq!(a.states, b.states);
    assert_eq!(a.layer_maps, b.layer_maps);
}

#[test]
fn errors_are_typed() {
    let s = StreamState::initial(StreamId(0), 3, Some(SourceSlot::First), 3, 2);
    assert!(matches!(
        rollout_step(&s, &Array2::zeros((3, 2))),
        Err(PropagationError::NotSquare { .. })
    ));
    assert!(matches!(
        hetero_step(&s, &s, &Array2::zeros((2, 3))),
        Err(PropagationError::Shape { .. })
    ));
}

//! Property tests over randomly generated adapters, rewards and frames.

use proptest::collection::vec;
use proptest::prelude::*;

use sves_core::cmaes::CmaState;
use sves_core::fitness::{AlignmentObjective, FitnessSpec, SubsetPolicy};
use sves_core::linalg::{self, Matrix};
use sves_core::lowrank::{apply_candidate, build_layout, FactorPair, LowRankAdapter};
use sves_core::model::task::addition_problems;
use sves_core::model::{Architecture, MlpShape, PolicyModel};
use sves_core::scheduler::wire::{EvalJob, Message, RewardReport, WireError};

fn matrix(rows: usize, cols: usize, values: &[f64]) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| values[(r * cols + c) % values.len()] + (r as f64 - c as f64) * 1e-3)
}

/// Decomposed adapter with `m×r` B and `r×n` A.
fn adapter_strategy(ranks: &'static [usize]) -> impl Strategy<Value = LowRankAdapter> {
    (prop::sample::select(ranks), 0usize..8, 0usize..8)
        .prop_flat_map(|(r, dm, dn)| (Just((r + dm, r, r + dn)), vec(-2.0f64..2.0, 97)))
        .prop_map(|((m, r, n), values)| {
            let b = matrix(m, r, &values);
            let a = matrix(r, n, &values[13..]);
            LowRankAdapter::new("layer0.q", b, a).unwrap().decompose().unwrap()
        })
}

fn pair_diff(x: &FactorPair, y: &FactorPair) -> (Matrix, Matrix) {
    (x.b.sub(&y.b).unwrap(), x.a.sub(&y.a).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_candidate_reproduces_delta_weight(adapter in adapter_strategy(&[4, 8, 16, 32, 64])) {
        let layout = build_layout(std::slice::from_ref(&adapter), 40.0).unwrap();
        let pairs = apply_candidate(std::slice::from_ref(&adapter), &layout, &vec![0.0; layout.dim()]).unwrap();
        let expected = adapter.delta_weight();
        let got = pairs[0].delta_weight().unwrap();
        let err = got.sub(&expected).unwrap().frobenius_norm() / expected.frobenius_norm().max(f64::MIN_POSITIVE);
        prop_assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn smaller_percent_gives_a_prefix_subset(adapter in adapter_strategy(&[4, 8, 16]), p1 in 1.0f64..100.0, p2 in 1.0f64..100.0) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let adapters = [adapter];
        let small = build_layout(&adapters, lo).unwrap();
        let large = build_layout(&adapters, hi).unwrap();
        for e in small.entries() {
            prop_assert!(large.entries().contains(e));
        }
    }

    #[test]
    fn candidates_act_linearly_on_factors(
        adapter in adapter_strategy(&[4, 8]),
        x1 in vec(-1.0f64..1.0, 8),
        x2 in vec(-1.0f64..1.0, 8),
    ) {
        let adapters = [adapter];
        let layout = build_layout(&adapters, 100.0).unwrap();
        let d = layout.dim();
        let (x1, x2) = (&x1.repeat(2)[..d], &x2.repeat(2)[..d]);
        let sum: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a + b).collect();
        let at = |x: &[f64]| apply_candidate(&adapters, &layout, x).unwrap().remove(0);
        let base = at(&vec![0.0; d]);
        let (db1, da1) = pair_diff(&at(x1), &base);
        let (db2, da2) = pair_diff(&at(x2), &base);
        let (dbs, das) = pair_diff(&at(&sum), &base);
        prop_assert!(dbs.max_abs_diff(&db1.add(&db2).unwrap()) < 1e-9);
        prop_assert!(das.max_abs_diff(&da1.add(&da2).unwrap()) < 1e-9);
    }

    #[test]
    fn candidate_matches_direct_reconstruction(adapter in adapter_strategy(&[4, 8, 16]), x in vec(-1.0f64..1.0, 32)) {
        let adapters = [adapter];
        let layout = build_layout(&adapters, 40.0).unwrap();
        let x = &x[..layout.dim()];
        let pair = apply_candidate(&adapters, &layout, x).unwrap().remove(0);
        let k = layout.dim() / 2;
        let rebuild = |svd: &linalg::SvdFactors, deltas: &[f64]| {
            let mut sigma = svd.sigma.clone();
            sigma.iter_mut().zip(deltas).for_each(|(s, d)| *s += d);
            linalg::reconstruct(&svd.u, &sigma, &svd.vt)
        };
        prop_assert!(pair.a.max_abs_diff(&rebuild(adapters[0].svd_a().unwrap(), &x[..k])) < 1e-12);
        prop_assert!(pair.b.max_abs_diff(&rebuild(adapters[0].svd_b().unwrap(), &x[k..])) < 1e-12);
    }

    #[test]
    fn call_order_does_not_matter(adapter in adapter_strategy(&[4, 8]), x1 in vec(-1.0f64..1.0, 8), x2 in vec(-1.0f64..1.0, 8)) {
        let adapters = [adapter];
        let layout = build_layout(&adapters, 50.0).unwrap();
        let d = layout.dim();
        let first = apply_candidate(&adapters, &layout, &x1[..d]).unwrap();
        let second = apply_candidate(&adapters, &layout, &x2[..d]).unwrap();
        prop_assert_eq!(apply_candidate(&adapters, &layout, &x2[..d]).unwrap(), second);
        prop_assert_eq!(apply_candidate(&adapters, &layout, &x1[..d]).unwrap(), first);
    }

    #[test]
    fn shifted_and_scaled_rewards_give_the_same_update(
        seed in any::<u64>(),
        perm in Just((0..12).collect::<Vec<i32>>()).prop_shuffle(),
        shift in -1e3f64..1e3,
        scale in 0.01f64..100.0,
    ) {
        let rewards: Vec<f64> = perm.iter().map(|&v| v as f64 * 7.0 - 30.0).collect();
        let tell = |rewards: Vec<f64>| {
            let mut state = CmaState::new(5, 0.4, 12, seed).unwrap();
            for _ in 0..2 {
                state.tell_rewards(&rewards).unwrap();
            }
            state.checkpoint()
        };
        let reference = tell(rewards.clone());
        prop_assert_eq!(&tell(rewards.iter().map(|r| r + shift).collect()), &reference);
        prop_assert_eq!(&tell(rewards.iter().map(|r| r * scale).collect()), &reference);
    }

    #[test]
    fn wire_round_trip(generation in any::<u64>(), index in any::<u32>(), seed in any::<u64>(), hash in any::<[u8; 32]>(),
                       reward in -1e6f64..1e6, millis in any::<u64>(), worker in any::<u32>(), flip in 0usize..(52 * 8)) {
        let job = Message::EvalJob(EvalJob { generation, index, seed, config_hash: hash });
        let report = Message::RewardReport(RewardReport { generation, index, reward, eval_millis: millis, worker_id: worker });
        for msg in [job, report] {
            let mut frame = msg.encode();
            prop_assert_eq!(&Message::decode(&frame).unwrap(), &msg);
            let payload_bits = (frame.len() - 9) * 8;
            let bit = flip % payload_bits;
            frame[9 + bit / 8] ^= 1 << (bit % 8);
            prop_assert_eq!(Message::decode(&frame), Err(WireError::Checksum));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rewards_are_fractions_of_the_subset(size in 1usize..20, generation in 0u64..50, x in vec(-3.0f64..3.0, 4)) {
        let arch = Architecture::Mlp(MlpShape { context: 4, d_embed: 4, hidden: 8 });
        let model = PolicyModel::new(arch, 5).unwrap().with_max_new_tokens(3);
        let adapters: Vec<_> = model.init_adapters(2, 5).unwrap().into_iter().map(|a| {
            let b = Matrix::from_fn(a.b.rows(), a.b.cols(), |r, c| ((r * 3 + c) as f64).sin());
            LowRankAdapter::new(a.name, b, a.a).unwrap().decompose().unwrap()
        }).collect();
        let layout = build_layout(&adapters, 50.0).unwrap();
        let fitness = FitnessSpec::accuracy(addition_problems(4), SubsetPolicy::Dynamic { size, seed: 3 }).unwrap();
        let objective = AlignmentObjective::new(model, adapters, layout, fitness).unwrap();
        let reward = objective.score(generation, 0, &x[..objective.dim()]).unwrap();
        prop_assert!((0.0..=1.0).contains(&reward));
        let k = reward * size as f64;
        prop_assert!((k - k.round()).abs() < 1e-9);
    }
}

mod common;

use lamo_core::data::{
    compute_returns_to_go, downsample, normalize_score, Dataset, NormalizationEntry, RtgConvention, Trajectory,
    WindowSampler,
};
use proptest::prelude::*;

fn trajectory_strategy() -> impl Strategy<Value = Trajectory> {
    (1usize..60).prop_flat_map(|len| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 2), len),
            prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 1), len),
            prop::collection::vec(-10.0f32..10.0, len),
        )
            .prop_map(|(states, actions, rewards)| Trajectory { states, actions, rewards })
    })
}

/// Quarter-integer rewards keep every partial sum exact in f32.
fn exact_trajectory_strategy() -> impl Strategy<Value = Trajectory> {
    prop::collection::vec(-40i32..40, 1..80).prop_map(|q| Trajectory {
        states: q.iter().map(|_| vec![0.0]).collect(),
        actions: q.iter().map(|_| vec![0.0]).collect(),
        rewards: q.iter().map(|&v| v as f32 / 4.0).collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rtg_recurrence_is_exact_on_representable_rewards(traj in exact_trajectory_strategy()) {
        let rtg = compute_returns_to_go(&traj, RtgConvention::Exclusive).unwrap();
        let t = traj.len();
        prop_assert_eq!(rtg[t - 1], 0.0);
        for k in 0..t - 1 {
            prop_assert_eq!(rtg[k] - rtg[k + 1], traj.rewards[k + 1]);
        }
        let inc = compute_returns_to_go(&traj, RtgConvention::Inclusive).unwrap();
        for k in 0..t {
            prop_assert_eq!(inc[k] - rtg[k], traj.rewards[k]);
        }
    }

    #[test]
    fn rtg_matches_direct_tail_sums(traj in trajectory_strategy()) {
        let rtg = compute_returns_to_go(&traj, RtgConvention::Exclusive).unwrap();
        for k in 0..traj.len() {
            let tail: f64 = traj.rewards[k + 1..].iter().map(|&r| f64::from(r)).sum();
            prop_assert!((f64::from(rtg[k]) - tail).abs() <= 1e-5 * (1.0 + tail.abs()), "k={} {} vs {}", k, rtg[k], tail);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn windows_never_cross_trajectories(lens in prop::collection::vec(1usize..30, 2..8), k in 1usize..12, seed in any::<u64>()) {
        // state[0] tags the owning trajectory, state[1] the step index
        let trajs: Vec<Trajectory> = lens.iter().enumerate().map(|(i, &len)| Trajectory {
            states: (0..len).map(|t| vec![i as f32 + 1.0, t as f32]).collect(),
            actions: (0..len).map(|_| vec![0.0]).collect(),
            rewards: (0..len).map(|t| (i * 100 + t) as f32).collect(),
        }).collect();
        let d = Dataset::new(trajs.clone(), common::meta(2, 1)).unwrap();
        let mut sampler = WindowSampler::new(&d, k, RtgConvention::Exclusive, seed).unwrap();
        for w in sampler.sample_batch(20) {
            prop_assert_eq!(w.len(), k);
            let real: Vec<usize> = (0..k).filter(|&i| !w.pad_mask[i]).collect();
            prop_assert!(!real.is_empty());
            // padding only on the left
            prop_assert!(real.iter().enumerate().all(|(j, &i)| i == k - real.len() + j));
            let owner = w.states[real[0]][0] as usize - 1;
            let rtg = compute_returns_to_go(&trajs[owner], RtgConvention::Exclusive).unwrap();
            for &i in &real {
                prop_assert_eq!(w.states[i][0] as usize - 1, owner);
                let t = w.timesteps[i];
                prop_assert_eq!(w.states[i][1] as usize, t);
                prop_assert_eq!(w.rtg[i], rtg[t]);
            }
            for i in 0..k - real.len() {
                prop_assert!(w.states[i].iter().all(|&v| v == 0.0) && w.rtg[i] == 0.0);
            }
        }
    }

    #[test]
    fn poisoning_neighbors_leaves_windows_unchanged(n in 2usize..6, len in 1usize..25, k in 1usize..10, seed in any::<u64>()) {
        let clean = common::random_dataset(n, len, 3, 2, seed);
        let target = (seed % n as u64) as usize;
        let poisoned: Vec<Trajectory> = clean.trajectories().iter().enumerate().map(|(i, t)| {
            if i == target { t.clone() } else { Trajectory {
                states: t.states.iter().map(|s| s.iter().map(|_| 1e6).collect()).collect(),
                actions: t.actions.iter().map(|a| a.iter().map(|_| -1e6).collect()).collect(),
                rewards: t.rewards.iter().map(|_| 1e6).collect(),
            }}
        }).collect();
        let poisoned = Dataset::new(poisoned, clean.meta().clone()).unwrap();
        let mut a = WindowSampler::new(&clean, k, RtgConvention::Exclusive, seed).unwrap();
        let mut b = WindowSampler::new(&poisoned, k, RtgConvention::Exclusive, seed).unwrap();
        for _ in 0..30 {
            let (wa, wb) = (a.sample(), b.sample());
            let from_target = wa.states.iter().zip(&wa.pad_mask).filter(|(_, &p)| !p)
                .all(|(s, _)| clean.trajectories()[target].states.contains(s));
            if from_target {
                prop_assert_eq!(wa, wb);
            } else {
                prop_assert!(wb.states.iter().zip(&wb.pad_mask).all(|(s, &p)| p || s[0] == 1e6));
            }
        }
    }

    #[test]
    fn downsample_is_a_seeded_subset(n in 1usize..80, ratio in 0.001f64..=1.0, seed in any::<u64>()) {
        let d = common::random_dataset(n, 3, 1, 1, 7);
        let s = downsample(&d, ratio, seed).unwrap();
        prop_assert_eq!(s.len(), ((ratio * n as f64).round() as usize).clamp(1, n));
        prop_assert!(s.trajectories().iter().all(|t| d.trajectories().contains(t)));
        prop_assert_eq!(s, downsample(&d, ratio, seed).unwrap());
    }

    #[test]
    fn normalize_score_is_affine(random in -1e3f64..1e3, span in 1.0f64..1e4, x in -1e4f64..1e4, y in -1e4f64..1e4) {
        let e = NormalizationEntry::new("t", random, random + span).unwrap();
        prop_assert_eq!(normalize_score(random + span, &e).unwrap(), 100.0);
        prop_assert_eq!(normalize_score(random, &e).unwrap(), 0.0);
        let diff = normalize_score(x, &e).unwrap() - normalize_score(y, &e).unwrap();
        prop_assert!((diff - 100.0 * (x - y) / span).abs() <= 1e-9 * (1.0 + diff.abs()));
    }
}

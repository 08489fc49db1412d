use lamo_core::data::normalize_score;
use lamo_core::envs::{generate_dataset, make_env, mean_policy_return, reference_scores, ENV_NAMES};

#[test]
fn zero_actions_never_reach_the_goal() {
    let mut env = make_env("point-reacher").unwrap();
    for seed in 0..20 {
        env.reset(seed);
        let mut total = 0.0;
        loop {
            let s = env.step(&[0.0, 0.0]);
            total += s.reward;
            if s.done {
                assert!(s.truncated);
                break;
            }
        }
        assert_eq!(total, 0.0);
    }
}

#[test]
fn oracle_succeeds_within_horizon() {
    let mut env = make_env("point-reacher").unwrap();
    assert_eq!(mean_policy_return(env.as_mut(), 1.0, 50, 3).unwrap(), 1.0);
}

#[test]
fn sparse_returns_are_subgoal_counts() {
    for (name, max) in [("point-reacher", 1.0), ("grid-quest", 3.0)] {
        let mut env = make_env(name).unwrap();
        let d = generate_dataset(env.as_mut(), 0.3, 40, 5).unwrap();
        for t in d.trajectories() {
            let r = t.total_return();
            assert!(r.fract() == 0.0 && (0.0..=max).contains(&r), "{name}: {r}");
        }
    }
}

#[test]
fn same_seed_same_episode() {
    for name in ENV_NAMES {
        let mut a = make_env(name).unwrap();
        let mut b = make_env(name).unwrap();
        assert_eq!(a.reset(9), b.reset(9));
        for i in 0..30 {
            let act = if a.spec().act_dim == 4 { vec![(i % 4) as f32] } else { vec![0.3; a.spec().act_dim] };
            assert_eq!(a.step(&act), b.step(&act));
        }
    }
}

#[test]
fn medium_quality_lies_between_references() {
    for name in ENV_NAMES {
        let entry = reference_scores(name).unwrap();
        assert_eq!(normalize_score(entry.expert_score, &entry).unwrap(), 100.0);
        assert_eq!(normalize_score(entry.random_score, &entry).unwrap(), 0.0);
        let mut env = make_env(name).unwrap();
        let d = generate_dataset(env.as_mut(), 0.5, 100, 11).unwrap();
        assert_eq!(d.len(), 100);
        let medium = normalize_score(d.meta().mean_return.unwrap(), &entry).unwrap();
        assert!(medium > 0.0 && medium < 100.0, "{name}: {medium}");
    }
}

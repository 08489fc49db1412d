use lamo_web::{lora_accounting, normalize, reacher_rollout, tasks};

#[test]
fn gpt2_small_accounting_matches_closed_form() {
    let r = lora_accounting(12, 768, 12, 50257, 16).unwrap();
    assert_eq!(r.trainable, 12 * 3 * 16 * (768 + 768));
    assert_eq!(r.total, 124_439_808 + r.trainable);
    assert!((0.0065..=0.0075).contains(&r.fraction));
    assert_eq!(r.groups["adapters"].trainable, r.trainable);
}

#[test]
fn accounting_rejects_bad_shapes() {
    assert!(lora_accounting(2, 30, 4, 100, 2).is_err(), "heads must divide d_model");
    assert!(lora_accounting(2, 32, 4, 100, 0).is_err());
    assert!(lora_accounting(2, 32, 4, 100, 33).is_err());
}

#[test]
fn oracle_rollout_reaches_goal_and_scores_high() {
    let r = reacher_rollout(1.0, 3).unwrap();
    assert!(r.reached);
    assert_eq!(r.total_return, 1.0);
    assert_eq!(r.path.len(), r.rewards.len() + 1);
    let last = r.path.last().unwrap();
    assert!(((last[0] - r.goal[0]).powi(2) + (last[1] - r.goal[1]).powi(2)).sqrt() <= 0.1);
    assert!(r.normalized > 90.0);
    let again = reacher_rollout(1.0, 3).unwrap();
    assert_eq!(again.path, r.path);
}

#[test]
fn normalization_endpoints() {
    let h = normalize("Hopper", 3234.3).unwrap();
    assert_eq!(h.normalized, 100.0);
    assert_eq!(normalize("Hopper", -20.3).unwrap().normalized, 0.0);
    assert!(normalize("Atlantis", 1.0).is_err());
    assert!(tasks().iter().any(|t| t == "point-reacher"));
}

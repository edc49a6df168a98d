/// `sum_t gamma^t * r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    debug_assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

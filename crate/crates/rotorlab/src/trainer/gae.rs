//! Generalized advantage estimation over a rollout that may span several
//! episodes (boundaries marked by done flags).

/// Advantages and value-function regression targets for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct GaeResult {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Backward-recursive GAE.
///
/// `delta_t = r_t + gamma * V_next - V(s_t)` and
/// `A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}`, where `V_next`
/// is `terminal_values[t]` when step `t` closed an episode and `V(s_{t+1})`
/// otherwise (with the state after the final step valued at `last_value`).
/// The lambda chain always resets at episode boundaries so credit never
/// crosses them, but the one-step bootstrap at a boundary uses the supplied
/// terminal value: pass the value of the episode's final state when it
/// merely truncated (time limit, leaving the controllable envelope), or
/// zero for a genuinely terminal state. Returns are `A_t + V(s_t)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    terminal_values: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> GaeResult {
    let n = rewards.len();
    assert_eq!(values.len(), n, "values misaligned with rewards");
    assert_eq!(dones.len(), n, "dones misaligned with rewards");
    assert_eq!(
        terminal_values.len(),
        n,
        "terminal values misaligned with rewards"
    );
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if dones[t] {
            terminal_values[t]
        } else if t + 1 < n {
            values[t + 1]
        } else {
            last_value
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    GaeResult {
        advantages,
        returns,
    }
}

/// Reference implementation: the explicit double loop
/// `A_t = sum_l (gamma*lambda)^l * delta_{t+l}`, truncated at episode
/// boundaries. Used by tests as an independent oracle.
pub fn brute_force_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    terminal_values: &[f64],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| -> f64 {
        let next_value = if dones[t] {
            terminal_values[t]
        } else if t + 1 < n {
            values[t + 1]
        } else {
            last_value
        };
        rewards[t] + gamma * next_value - values[t]
    };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta(l);
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

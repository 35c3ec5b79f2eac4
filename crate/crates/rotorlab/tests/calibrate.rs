//! Scratch calibration probe, not part of the test suite (ignored).
//!
//! Sweeps candidate thrust coefficients and reports, for each: whether the
//! default PID gains settle a 100 deg/s roll step into the error band, the
//! tail ringing amplitude, and the P-only ultimate gain/period per axis.

use rotorlab::control::{pid_mix, pid_step, zn_find_ultimate, PidGains, PidState, ZnConfig};
use rotorlab::dynamics::{step, AirframeModel, BodyState};
use rotorlab::env::{sample_task, Env, EnvConfig, Segment, TaskScript};
use rotorlab::policy::{init_policy, Policy};
use rotorlab::trainer::{train, PpoConfig};

fn settle_probe(model: &AirframeModel) -> (bool, f64, f64) {
    let gains = PidGains::default();
    let mut state = BodyState::at_rest();
    let throttle = 0.5;
    for w in state.rotor_speed.iter_mut() {
        *w = throttle * model.omega_max;
    }
    let mut pid = PidState::new();
    let setpoint = [100.0, 0.0, 0.0];
    let sim_time = 8.0;
    let n = (sim_time / model.dt) as usize;
    let mut tail_max = 0.0f64;
    let mut max_any = 0.0f64;
    for k in 0..n {
        let out = pid_step(&gains, &mut pid, &setpoint, &state.omega, model.dt);
        let u = pid_mix(&out, throttle, &model.geometry);
        match step(&state, &u, model) {
            Ok(next) => state = next,
            Err(_) => return (false, f64::INFINITY, f64::INFINITY),
        }
        let e = (setpoint[0] - state.omega[0]).abs();
        max_any = max_any.max(e + state.omega[1].abs() + state.omega[2].abs());
        if (k as f64) * model.dt > sim_time - 2.0 {
            tail_max = tail_max.max(e);
        }
    }
    (true, tail_max, max_any)
}

#[test]
#[ignore]
fn sweep_thrust_coefficient() {
    for kt in [
        1.0e-8, 2.0e-8, 4.0e-8, 6.0e-8, 1.0e-7, 1.5e-7, 2.5e-7, 4.0e-7, 6.5e-7, 1.0e-6,
    ] {
        let mut model = AirframeModel::default();
        model.k_thrust = kt;
        model.k_drag = 0.06 * kt;
        let (ok, tail, peak) = settle_probe(&model);
        // Control authority: peak roll accel at full differential, deg/s^2.
        let tau = 2.0 * kt * model.omega_max * model.omega_max * model.arm_length;
        let auth = tau / model.inertia[0] * 180.0 / std::f64::consts::PI;
        println!(
            "k_thrust={kt:.2e} authority={auth:7.1} deg/s^2 settled={ok} tail={tail:8.3} peak={peak:8.2}"
        );
        if ok {
            let zn = ZnConfig::default();
            for axis in 0..3 {
                match zn_find_ultimate(&model, axis, &zn) {
                    Ok((ku, tu)) => println!("  axis {axis}: K_u={ku:.6} T_u={tu:.4}"),
                    Err(e) => println!("  axis {axis}: {e}"),
                }
            }
        }
    }
}

fn gentle_validation_script() -> TaskScript {
    let seg = |sp: [f64; 3], duration: f64| Segment {
        setpoint: sp,
        duration,
    };
    TaskScript::from_segments(vec![
        seg([60.0, 0.0, 0.0], 2.0),
        seg([0.0; 3], 1.0),
        seg([0.0, -50.0, 0.0], 2.0),
        seg([0.0; 3], 1.0),
        seg([0.0, 0.0, 40.0], 2.0),
        seg([0.0; 3], 1.0),
        seg([-45.0, 30.0, 0.0], 2.0),
        seg([0.0; 3], 1.0),
    ])
}

fn representative_validation_script() -> TaskScript {
    // Fixed draw from the same task distribution used in training, so the
    // validation MAE measures the policy on the setpoint scale it was
    // trained for rather than on a hand-picked easy regime.
    let cfg = EnvConfig {
        episode_time: 12.0,
        ..EnvConfig::default()
    };
    sample_task(42, &cfg)
}

fn replay_mae(policy: &Policy, model: &AirframeModel, script: &TaskScript) -> f64 {
    let cfg = EnvConfig {
        gyro_noise_sigma: 0.0,
        episode_time: script.total_time,
        envelope: f64::INFINITY,
        ..EnvConfig::default()
    };
    let mut env = Env::new(model.clone(), cfg, script.clone(), 0).unwrap();
    let mut obs = env.initial_observation();
    let mut abs_sum = 0.0;
    let mut n = 0u64;
    loop {
        let a = policy.act_deterministic(&obs);
        let y = [a[0], a[1], a[2], a[3]];
        let s = env.step(&y).unwrap();
        for e in s.observation.e {
            abs_sum += e.abs();
            n += 1;
        }
        if s.done {
            break;
        }
        obs = s.obs;
    }
    abs_sum / n as f64
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

/// Where does advantage credit land relative to the action that caused the
/// effect? For each axis, correlate the normalized advantage at time t with
/// the "correctly signed" exploration noise at time t-k: positive means the
/// update pushes the differential response the right way at that lag.
#[test]
#[ignore]
fn probe_credit_spectrum() {
    use rand::{Rng, SeedableRng};
    use rotorlab::env::sample_task;
    use rotorlab::policy::init_value;
    use rotorlab::trainer::{compute_gae, normalize_advantages, RolloutBatch};

    let mut model = AirframeModel::default();
    model.k_thrust = env_f64("PROBE_K_THRUST", model.k_thrust);
    model.k_drag = model.k_thrust * 0.06;
    let env_cfg = EnvConfig::default();
    let ppo_cfg = PpoConfig::default();

    // Optionally warm the value net with a short real training run so the
    // advantages reflect a partially fitted baseline.
    let warm_steps = env_f64("PROBE_WARM", 0.0) as u64;
    let (policy, value) = if warm_steps > 0 {
        let cfg = PpoConfig {
            total_steps: warm_steps,
            ..ppo_cfg.clone()
        };
        let run = train(7, &model, &env_cfg, &cfg).unwrap();
        (init_policy(6, 4, 1), run.checkpoint.value().unwrap())
    } else {
        (
            init_policy(6, 4, 1),
            init_value(rotorlab::env::CRITIC_FEATURE_DIM, 2),
        )
    };

    let mut action_rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut episode_rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let horizon = 16384usize;

    let mut batch = RolloutBatch::default();
    // Per-step diagnostics: sign of the true error and the differential
    // component of the sampled noise, per axis.
    let mut signed_noise = vec![[0.0f64; 3]; horizon];
    let task = sample_task(episode_rng.gen(), &env_cfg);
    let mut env = Env::new(model.clone(), env_cfg.clone(), task, episode_rng.gen()).unwrap();
    let mut obs = env.initial_observation();
    // Differential mixes: roll [-1,-1,1,1], pitch [1,-1,1,-1], yaw [-1,1,1,-1].
    let mix: [[f64; 4]; 3] = [
        [-1.0, -1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0, -1.0],
        [-1.0, 1.0, 1.0, -1.0],
    ];
    for t in 0..horizon {
        let sample = policy.sample_action(&obs, &mut action_rng);
        let critic_obs = env.critic_features();
        let v = value.forward(&critic_obs)[0];
        let sp = env.setpoint();
        let w = env.state().omega;
        let mu = policy.act_deterministic(&obs);
        for axis in 0..3 {
            let e_true = sp[axis] - w[axis];
            let mut diff = 0.0;
            for i in 0..4 {
                // Noise component of the sampled (raw) action.
                diff += mix[axis][i] * (sample.raw[i] - mu[i]);
            }
            signed_noise[t][axis] = diff * e_true.signum();
        }
        let clipped = [
            sample.clipped[0],
            sample.clipped[1],
            sample.clipped[2],
            sample.clipped[3],
        ];
        let step = env.step(&clipped).unwrap();
        batch.observations.push(obs.clone());
        batch.critic_observations.push(critic_obs);
        batch.actions.push(sample.raw);
        batch.log_probs.push(sample.log_prob);
        batch.rewards.push(step.reward.total * ppo_cfg.reward_scale);
        batch.values.push(v);
        batch.dones.push(step.done);
        batch.terminal_values.push(if step.done {
            value.forward(&env.critic_features())[0]
        } else {
            0.0
        });
        if step.done {
            let task = sample_task(episode_rng.gen(), &env_cfg);
            env = Env::new(model.clone(), env_cfg.clone(), task, episode_rng.gen()).unwrap();
            obs = env.initial_observation();
        } else {
            obs = step.obs;
        }
    }
    batch.last_value = value.forward(&env.critic_features())[0];

    let gae = compute_gae(
        &batch.rewards,
        &batch.values,
        &batch.dones,
        &batch.terminal_values,
        batch.last_value,
        ppo_cfg.gamma,
        ppo_cfg.lambda,
    );
    let mut adv = gae.advantages.clone();
    normalize_advantages(&mut adv);

    let corr = |lag: usize, axis: usize| -> f64 {
        let n = horizon - lag;
        let xs: Vec<f64> = (0..n).map(|t| signed_noise[t][axis]).collect();
        let ys: Vec<f64> = (0..n).map(|t| adv[t + lag]).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for t in 0..n {
            sxy += (xs[t] - mx) * (ys[t] - my);
            sxx += (xs[t] - mx) * (xs[t] - mx);
            syy += (ys[t] - my) * (ys[t] - my);
        }
        sxy / (sxx.sqrt() * syy.sqrt()).max(1e-12)
    };
    println!("corr(signed exploration noise at t, advantage at t+lag); +ok/-inverted");
    println!("95% noise floor ~ {:.4}", 2.0 / (horizon as f64).sqrt());
    for lag in [0usize, 1, 2, 5, 10, 20, 35, 50, 75, 100, 150, 200, 300] {
        println!(
            "lag {lag:4}: roll {:+.4} pitch {:+.4} yaw {:+.4}",
            corr(lag, 0),
            corr(lag, 1),
            corr(lag, 2)
        );
    }
}

#[test]
#[ignore]
fn probe_learning_progress() {
    let mut model = AirframeModel::default();
    model.k_thrust = env_f64("PROBE_K_THRUST", model.k_thrust);
    model.k_drag = model.k_thrust * 0.06;
    let mut env_cfg = EnvConfig::default();
    env_cfg.envelope = env_f64("PROBE_ENVELOPE", env_cfg.envelope);
    env_cfg.setpoint_bound = env_f64("PROBE_SPBOUND", env_cfg.setpoint_bound);
    let mut ppo_cfg = PpoConfig::default();
    ppo_cfg.total_steps = env_f64("PROBE_STEPS", ppo_cfg.total_steps as f64) as u64;
    ppo_cfg.anneal = env_f64("PROBE_ANNEAL", 1.0) != 0.0;
    ppo_cfg.stepsize = env_f64("PROBE_LR", ppo_cfg.stepsize);
    ppo_cfg.reward_scale = env_f64("PROBE_RSCALE", ppo_cfg.reward_scale);
    let seed = env_f64("PROBE_SEED", 0.0) as u64;
    let t0 = std::time::Instant::now();
    let run = train(seed, &model, &env_cfg, &ppo_cfg).unwrap();
    println!("train wall time: {:?}", t0.elapsed());
    for ep in &run.curve {
        println!(
            "episode {} steps {} blown_up {} escaped {} reward {:.4e}",
            ep.episode, ep.steps, ep.blown_up, ep.out_of_envelope, ep.cumulative_reward
        );
    }
    for d in run.diagnostics.iter().step_by(10) {
        println!(
            "iter {:3} steps {:6} mean_r {:+.3e} vloss {:.3e} clipfrac {:.3} kl {:+.2e} lr {:.2e}",
            d.iteration, d.steps_collected, d.mean_step_reward, d.value_loss, d.clip_fraction,
            d.approx_kl, d.stepsize
        );
    }
    let n = run.curve.len();
    let w = (n / 10).max(1);
    let first: f64 = run.curve[..w].iter().map(|e| e.cumulative_reward).sum::<f64>() / w as f64;
    let last: f64 =
        run.curve[n - w..].iter().map(|e| e.cumulative_reward).sum::<f64>() / w as f64;
    let first_len: f64 = run.curve[..w].iter().map(|e| e.steps as f64).sum::<f64>() / w as f64;
    let last_len: f64 =
        run.curve[n - w..].iter().map(|e| e.steps as f64).sum::<f64>() / w as f64;
    println!("first-window {first:.4e} (len {first_len:.0}) last-window {last:.4e} (len {last_len:.0})");
    println!("improvement: {:.1}%", (last - first) / first.abs() * 100.0);

    let untrained = init_policy(6, 4, 999);
    let trained = run.checkpoint.policy().unwrap();
    for (name, script) in [
        ("gentle", gentle_validation_script()),
        ("representative", representative_validation_script()),
    ] {
        let mae_untrained = replay_mae(&untrained, &model, &script);
        let mae_trained = replay_mae(&trained, &model, &script);
        println!(
            "validation[{name}] MAE untrained {mae_untrained:.3} trained {mae_trained:.3} ratio {:.3}",
            mae_trained / mae_untrained
        );
    }

    println!("log_std: {:?}", trained.log_std);
    for e in [[100.0, 0.0, 0.0], [-100.0, 0.0, 0.0], [0.0, 0.0, 0.0]] {
        let obs = [e[0], e[1], e[2], 0.0, 0.0, 0.0];
        println!("mu(e={e:?}) = {:?}", trained.act_deterministic(&obs));
    }
    // Damping response: does the policy react to the error-difference channel?
    for d in [[0.0, 0.0, 0.0], [-20.0, 0.0, 0.0], [20.0, 0.0, 0.0]] {
        let obs = [100.0, 0.0, 0.0, d[0], d[1], d[2]];
        println!("mu(e=[100,0,0], de={d:?}) = {:?}", trained.act_deterministic(&obs));
    }
}

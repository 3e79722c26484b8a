use super::*;
use crate::envs::{make_dynamics, PENDULUM_ID};
use crate::nn::{mlp_forward, ParameterVector};
use crate::sac::SacConfig;
use proptest::prelude::*;
use rand::Rng;

fn tiny_agent(seed: u64) -> SacAgent<f64> {
    let config = SacConfig {
        hidden: vec![8, 8],
        activation: crate::nn::Activation::Tanh,
        ..SacConfig::default()
    };
    SacAgent::new(3, vec![2.0], config, &mut rng_from(seed)).unwrap()
}

fn output_layer_range(agent: &SacAgent<f64>) -> std::ops::Range<usize> {
    let last = *agent.critic_spec.layers().last().unwrap();
    last.weight_offset..last.bias_offset + last.fan_out
}

fn make_constant_critics(agent: &mut SacAgent<f64>, c: f64) {
    let bias = output_layer_range(agent).end - 1;
    for q in [&mut agent.q1, &mut agent.q2] {
        q.values.iter_mut().for_each(|v| *v = 0.0);
        q.values[bias] = c;
    }
}

fn scale_critic_outputs(agent: &mut SacAgent<f64>, c: f64) {
    let range = output_layer_range(agent);
    for q in [&mut agent.q1, &mut agent.q2] {
        q.values[range.clone()].iter_mut().for_each(|v| *v *= c);
    }
}

fn pendulum() -> Box<dyn Dynamics> {
    make_dynamics(PENDULUM_ID).unwrap()
}

/// Plain-loop value estimate using only forward passes.
fn straight_line_value(agent: &SacAgent<f64>, obs: &[f64], z: &Array2<f64>, critic: CriticValue) -> f64 {
    let out = mlp_forward(&agent.policy_spec, &agent.policy, obs).unwrap();
    let k = agent.action_dim;
    let mu = &out[..k];
    let sd: Vec<f64> = out[k..].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()).collect();
    let mut logps = Vec::new();
    let mut qs = Vec::new();
    for row in z.rows() {
        let mut lp = 0.0;
        let mut input = obs.to_vec();
        for j in 0..k {
            let a = mu[j] + sd[j] * row[j];
            let r = (a - mu[j]) / sd[j];
            lp += -0.5 * r * r - sd[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            input.push(a.tanh());
        }
        let q1 = mlp_forward(&agent.critic_spec, &agent.q1, &input).unwrap()[0];
        let q = match critic {
            CriticValue::Q1Only => q1,
            CriticValue::MinTwin => q1.min(mlp_forward(&agent.critic_spec, &agent.q2, &input).unwrap()[0]),
        };
        logps.push(lp);
        qs.push(q);
    }
    let m = logps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logps.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().zip(&qs).map(|(w, q)| w / total * q).sum()
}

#[test]
fn constant_critic_gives_exact_value_and_zero_score() {
    let mut agent = tiny_agent(1);
    make_constant_critics(&mut agent, -4.25);
    let obs = [0.3, -0.1, 0.7];
    let z = draw_action_noise(32, 1, &mut rng_from(2));
    let vg = value_gradient_with_noise(&agent, &obs, z, CriticValue::MinTwin).unwrap();
    assert_eq!(vg.value, -4.25);
    assert!(vg.gradient.iter().all(|&g| g == 0.0));
    let s = condition_number(&agent, &[0.4, 0.5], pendulum().as_ref(), &MetricSpec::default(), &mut rng_from(3)).unwrap();
    assert_eq!(s.score, 0.0);
    assert_eq!(s.value_estimate, -4.25);
}

#[test]
fn single_action_uses_its_critic_value() {
    let agent = tiny_agent(4);
    let obs = [0.9, 0.1, -1.5];
    let z = draw_action_noise::<f64, _>(1, 1, &mut rng_from(5));
    let (mu, sd) = agent.policy_distribution(&obs).unwrap();
    let a = (mu[0] + sd[0] * z[(0, 0)]).tanh();
    let x = [obs[0], obs[1], obs[2], a];
    let q = mlp_forward(&agent.critic_spec, &agent.q1, &x).unwrap()[0]
        .min(mlp_forward(&agent.critic_spec, &agent.q2, &x).unwrap()[0]);
    let vg = value_gradient_with_noise(&agent, &obs, z, CriticValue::MinTwin).unwrap();
    assert_eq!(vg.weights, vec![1.0]);
    assert!((vg.value - q).abs() < 1e-15);
}

#[test]
fn value_matches_straight_line_reimplementation() {
    for seed in 0..5 {
        let agent = tiny_agent(10 + seed);
        let obs = [0.2 * seed as f64, -0.4, 0.9];
        let z = draw_action_noise(64, 1, &mut rng_from(seed));
        for critic in [CriticValue::MinTwin, CriticValue::Q1Only] {
            let expected = straight_line_value(&agent, &obs, &z, critic);
            let vg = value_gradient_with_noise(&agent, &obs, z.clone(), critic).unwrap();
            assert!((vg.value - expected).abs() < 1e-10, "{} vs {expected}", vg.value);
        }
    }
}

#[test]
fn weights_are_normalized() {
    let agent = tiny_agent(20);
    let mut rng = rng_from(21);
    for _ in 0..50 {
        let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vg = value_estimate(&agent, &obs, &MetricSpec::default(), &mut rng).unwrap();
        assert_eq!(vg.weights.len(), 32);
        assert!((vg.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn score_is_invariant_to_critic_output_scale() {
    let dynamics = pendulum();
    let spec = MetricSpec::default();
    let states = [vec![0.5, -2.0], vec![-2.5, 6.0], vec![3.0, 0.1]];
    let base = tiny_agent(30);
    let reference = score_batch(&base, &states, dynamics.as_ref(), &spec, 7).unwrap();
    for c in [0.5, 3.0, 100.0] {
        let mut scaled = base.clone();
        scale_critic_outputs(&mut scaled, c);
        let got = score_batch(&scaled, &states, dynamics.as_ref(), &spec, 7).unwrap();
        for (r, g) in reference.iter().zip(&got) {
            assert!((g.score - r.score).abs() <= 1e-6 * r.score.abs(), "c={c}: {} vs {}", g.score, r.score);
            assert!((g.value_estimate - c * r.value_estimate).abs() <= 1e-9 * (c * r.value_estimate).abs());
        }
    }
}

#[test]
fn score_matches_finite_difference_gradient() {
    let agent = tiny_agent(40);
    let obs = [0.6, 0.8, -0.3];
    let z = draw_action_noise::<f64, _>(32, 1, &mut rng_from(41));
    let spec = MetricSpec::default();
    let vg = value_gradient_with_noise(&agent, &obs, z.clone(), spec.critic).unwrap();
    let (score, _) = score_from(vg.value, &vg.gradient, &[], &spec);

    let value_at = |p: &ParameterVector<f64>| {
        let mut a = agent.clone();
        a.policy = p.clone();
        straight_line_value(&a, &obs, &z, spec.critic)
    };
    let fd: Vec<f64> = (0..agent.policy.len())
        .map(|i| {
            let h = 1e-4 * agent.policy.values[i].abs().max(1.0);
            let mut plus = agent.policy.clone();
            plus.values[i] += h;
            let mut minus = agent.policy.clone();
            minus.values[i] -= h;
            (value_at(&plus) - value_at(&minus)) / (2.0 * h)
        })
        .collect();
    let (fd_score, _) = score_from(vg.value, &fd, &[], &spec);
    assert!(score > 0.0);
    assert!((score - fd_score).abs() < 1e-4 * score, "{score} vs {fd_score}");
}

#[test]
fn frozen_policy_contributes_no_gradient() {
    let agent = tiny_agent(50);
    let obs = [0.1, 0.2, 0.3];
    let z = draw_action_noise::<f64, _>(16, 1, &mut rng_from(51));
    let mut tape = Tape::new();
    let (v, pm) = record_value(&mut tape, &agent, false, &obs, z.clone(), CriticValue::MinTwin).unwrap();
    let frozen_value = tape.scalar(v);
    let g = tape.backward(v).unwrap();
    assert!(g.wrt_model(pm).iter().all(|&x| x == 0.0));

    let live = value_gradient_with_noise(&agent, &obs, z, CriticValue::MinTwin).unwrap();
    assert_eq!(live.value, frozen_value);
    assert!(live.gradient.iter().any(|&x| x != 0.0));
}

#[test]
fn zero_value_engages_floor() {
    let spec = MetricSpec::default();
    let (score, norm) = score_from(0.0, &[3.0, 4.0], &[1.0, 1.0], &spec);
    assert_eq!(norm, 5.0);
    assert_eq!(score, 5.0 / 1e-6);
    let scaled = MetricSpec {
        variant: MetricVariant::StateScaledRatio,
        ..spec
    };
    let (s2, _) = score_from(-2.0, &[3.0, 4.0], &[3.0, 4.0], &scaled);
    assert_eq!(s2, 12.5);
}

#[test]
fn batch_equals_sequential_loop() {
    let agent = tiny_agent(60);
    let dynamics = pendulum();
    let spec = MetricSpec::default();
    let states = crate::envs::sample_states(dynamics.as_ref(), 32, 61).unwrap();
    let batch = score_batch(&agent, &states, dynamics.as_ref(), &spec, 62).unwrap();
    for (i, s) in states.iter().enumerate() {
        let one = condition_number(&agent, s, dynamics.as_ref(), &spec, &mut rng_from(derive_seed(62, i as u64))).unwrap();
        assert_eq!(one.score.to_bits(), batch[i].score.to_bits());
        assert_eq!(one.value_estimate.to_bits(), batch[i].value_estimate.to_bits());
    }
}

#[test]
fn singleton_batch_and_errors() {
    let agent = tiny_agent(70);
    let dynamics = pendulum();
    let spec = MetricSpec::default();
    let s = vec![vec![1.0, -1.0]];
    let b = score_batch(&agent, &s, dynamics.as_ref(), &spec, 3).unwrap();
    let one = condition_number(&agent, &s[0], dynamics.as_ref(), &spec, &mut rng_from(derive_seed(3, 0))).unwrap();
    assert_eq!(b, vec![one]);
    assert!(matches!(score_batch(&agent, &[], dynamics.as_ref(), &spec, 0), Err(MetricError::Empty)));
    let bad = vec![vec![0.0, 0.0], vec![0.0, 50.0]];
    match score_batch(&agent, &bad, dynamics.as_ref(), &spec, 0) {
        Err(MetricError::AtIndex { index: 1, source }) => assert!(matches!(*source, MetricError::OutOfBounds { .. })),
        other => panic!("unexpected {other:?}"),
    }
    assert!(MetricSpec { n_actions: 1, ..spec }.validate().is_err());
}

#[test]
fn metric_works_in_single_precision() {
    let config = SacConfig {
        hidden: vec![8],
        ..SacConfig::default()
    };
    let agent = SacAgent::<f32>::new(3, vec![2.0], config, &mut rng_from(80)).unwrap();
    let s = condition_number(&agent, &[0.3, 0.2], pendulum().as_ref(), &MetricSpec::default(), &mut rng_from(81)).unwrap();
    assert!(s.score.is_finite() && s.score >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn samples_are_deterministic_and_consistent(
        seed in 0u64..500,
        theta in -3.1f64..3.1,
        omega in -8.0f64..8.0,
    ) {
        let agent = tiny_agent(seed);
        let dynamics = pendulum();
        let spec = MetricSpec { seed, ..MetricSpec::default() };
        let a = condition_number(&agent, &[theta, omega], dynamics.as_ref(), &spec, &mut rng_from(seed)).unwrap();
        let b = condition_number(&agent, &[theta, omega], dynamics.as_ref(), &spec, &mut rng_from(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.score >= 0.0 && a.score.is_finite());
        let expected = a.grad_norm / a.value_estimate.abs().max(spec.denom_floor);
        prop_assert!((a.score - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

use socratic_core::expr::{GeneratorConfig, TaskSpec};
use socratic_core::meta::{utility, ProbeConfig, ProbeSet};
use socratic_core::rng::RngStream;
use socratic_core::run::{execute, Arm, RunConfig};
use socratic_core::student::{action_distribution, policy_entropy, StudentPolicy};
use socratic_core::trace::TokenSeq;
use socratic_core::viewpoint::{ActiveViewpoints, ErrorClass, Trigger, Viewpoint};

#[test]
fn sampling_frequencies_within_three_sigma() {
    let policy = StudentPolicy::new([-0.5, 1.0, 0.7, 0.3, 1.2, 0.2, -0.1, 0.0, 0.0], 1.0);
    let state: TokenSeq = "( 1 + 2 ) * 3 - 4".parse().unwrap();
    let dist = action_distribution(&policy, &state, &ActiveViewpoints::default()).unwrap();
    let n = 100_000;
    let mut counts = vec![0usize; dist.probs.len()];
    let mut rng = RngStream::new(1);
    for _ in 0..n {
        counts[dist.sample_index(&mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(&dist.probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c} vs p {p}");
    }
}

fn paren_probes(seed: u64) -> ProbeSet {
    ProbeSet::generate(
        seed,
        &ProbeConfig {
            tasks: 50,
            samples_per_task: 32,
            generator: GeneratorConfig {
                min_operators: 2,
                paren_probability: 1.0,
                ..Default::default()
            },
        },
    )
    .unwrap()
}

fn crossing_bias(m: f64) -> Viewpoint {
    Viewpoint::new(
        format!("vp-m{m}").as_str().into(),
        ErrorClass::ParenViolation,
        "p".into(),
        [(0, -m)].into_iter().collect(),
        Trigger::Always,
    )
}

#[test]
fn utility_is_monotone_in_crossing_penalty() {
    let probes = paren_probes(9);
    let policy = StudentPolicy::paren_blind();
    let reports: Vec<_> = [0.0, 1.0, 4.0]
        .iter()
        .map(|&m| utility(&crossing_bias(m), &policy, &ActiveViewpoints::default(), &probes).unwrap())
        .collect();
    assert_eq!(reports[0].u_estimate, 0.0);
    for w in reports.windows(2) {
        let tol = 2.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
        assert!(w[1].u_estimate >= w[0].u_estimate - tol, "{} < {}", w[1].u_estimate, w[0].u_estimate);
    }
}

#[test]
fn adversarial_viewpoint_has_non_positive_utility() {
    let probes = paren_probes(10);
    let adversarial = crossing_bias(-4.0);
    let r = utility(&adversarial, &StudentPolicy::paren_blind(), &ActiveViewpoints::default(), &probes).unwrap();
    assert!(r.u_estimate <= 0.0, "{}", r.u_estimate);
}

#[test]
fn utility_reports_are_deterministic() {
    let probes = paren_probes(11);
    let v = crossing_bias(4.0);
    let a = utility(&v, &StudentPolicy::paren_blind(), &ActiveViewpoints::default(), &probes).unwrap();
    let b = utility(&v, &StudentPolicy::paren_blind(), &ActiveViewpoints::default(), &probes).unwrap();
    assert_eq!(a, b);
}

#[test]
fn entropy_falls_over_a_converging_run() {
    let cfg = RunConfig {
        episodes: 800,
        arm: Arm::OutcomeOnly,
        learner: socratic_core::run::LearnerConfig {
            init: socratic_core::run::PolicyInit::Zeros,
            ..Default::default()
        },
        ..Default::default()
    };
    let state = execute(&cfg).unwrap();
    let probe_states: Vec<TokenSeq> = ["(4+6)*3", "1+2*3", "(1+2)*(3-1)", "9-2-3*2", "5*(2+3)-1"]
        .iter()
        .map(|t| TaskSpec::parse(t).unwrap().rendered)
        .collect();
    let before = policy_entropy(&StudentPolicy::zeros(), &ActiveViewpoints::default(), &probe_states);
    let after = policy_entropy(state.policy(), &ActiveViewpoints::default(), &probe_states);
    assert!(after < before, "{after} >= {before}");

    let m = &state.metrics;
    let first: f64 = m[..100].iter().map(|r| r.mean_entropy).sum::<f64>() / 100.0;
    let last: f64 = m[m.len() - 100..].iter().map(|r| r.mean_entropy).sum::<f64>() / 100.0;
    assert!(last < first, "{last} >= {first}");
}


use proptest::prelude::*;
use socratic_core::expr::{generate_task, GeneratorConfig};
use socratic_core::rng::RngStream;
use socratic_core::student::StudentPolicy;
use socratic_core::teacher::{analyze_trace, check_step, ucb1_select, ArmStats};
use socratic_core::trace::rollout;
use socratic_core::viewpoint::ActiveViewpoints;

fn noisy_trace(seed: u64, r: u64) -> socratic_core::trace::Trace {
    let cfg = GeneratorConfig {
        max_operators: 5,
        ..Default::default()
    };
    let task = generate_task(&mut RngStream::new(seed), &cfg).unwrap();
    rollout(&task, &StudentPolicy::zeros(), &ActiveViewpoints::default(), &mut RngStream::new(r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn finding_is_the_earliest_of_all_step_findings(seed in any::<u64>(), r in any::<u64>()) {
        let trace = noisy_trace(seed, r);
        let all: Vec<_> = trace.steps.iter().enumerate().filter_map(|(i, s)| check_step(i, s)).collect();
        prop_assert_eq!(analyze_trace(&trace), all.into_iter().min_by_key(|f| f.step_index));
    }

    #[test]
    fn no_finding_implies_success(seed in any::<u64>(), r in any::<u64>()) {
        let trace = noisy_trace(seed, r);
        if analyze_trace(&trace).is_none() {
            prop_assert_eq!(trace.reward, 1);
        } else {
            // Not implied in general, but every failure must be explained.
        }
        if trace.reward == 0 {
            prop_assert!(analyze_trace(&trace).is_some());
        }
    }
}

fn fraction_best_arm(utilities: [f64; 3], c: f64) -> f64 {
    let mut stats = vec![ArmStats::default(); 3];
    let mut best = 0;
    for pull in 1..=200 {
        let i = ucb1_select(&stats, c);
        if pull >= 100 && i == 0 {
            best += 1;
        }
        stats[i].pulls += 1;
        stats[i].mean_utility += (utilities[i] - stats[i].mean_utility) / stats[i].pulls as f64;
    }
    best as f64 / 101.0
}

/// Fixed utilities (0.3, 0.1, 0.0) at the standard exploration constant.
/// UCB1 keeps sampling the runner-up often enough that the best arm only
/// takes about 69% of pulls 100 to 200, independent of seed.
#[test]
#[ignore = "unattainable at c = sqrt(2): measured share is 0.69, see README"]
fn bandit_converges_on_fixed_utilities() {
    let share = fraction_best_arm([0.3, 0.1, 0.0], std::f64::consts::SQRT_2);
    assert!(share >= 0.9, "{share}");
}

#[test]
fn bandit_share_on_fixed_utilities_is_pinned() {
    let share = fraction_best_arm([0.3, 0.1, 0.0], std::f64::consts::SQRT_2);
    assert!((share - 70.0 / 101.0).abs() < 1e-12, "{share}");
    // Less exploration does converge.
    assert!(fraction_best_arm([0.3, 0.1, 0.0], 0.5) >= 0.9);
}

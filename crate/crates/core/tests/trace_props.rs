use proptest::prelude::*;
use socratic_core::expr::{generate_task, GeneratorConfig, TaskSpec};
use socratic_core::rng::RngStream;
use socratic_core::student::{trace_log_prob, StudentPolicy};
use socratic_core::teacher::analyze_trace;
use socratic_core::trace::{rollout, rollout_with, Mode};
use socratic_core::viewpoint::ActiveViewpoints;

fn task(seed: u64, p: f64) -> TaskSpec {
    let cfg = GeneratorConfig {
        max_operators: 6,
        paren_probability: p,
        ..Default::default()
    };
    generate_task(&mut RngStream::new(seed), &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Any exact, non-crossing order that the teacher accepts step by step
    /// lands on the oracle value.
    #[test]
    fn legal_orders_reach_the_oracle(seed in any::<u64>(), pick in any::<u64>(), p in 0.0f64..=1.0) {
        let t = task(seed, p);
        let mut rng = RngStream::new(pick);
        let trace = rollout_with(&t, vec![], pick, |state, cands| {
            let legal: Vec<usize> = (0..cands.len())
                .filter(|&i| {
                    let a = &cands[i];
                    a.mode == Mode::Exact && !a.redex.crosses_paren && {
                        let (next, _) = socratic_core::trace::apply(state, a).unwrap();
                        next.evaluate().unwrap() == state.evaluate().unwrap()
                    }
                })
                .collect();
            (legal[rng.below(legal.len())], 0.0)
        });
        prop_assert_eq!(trace.final_value, Some(t.oracle_value));
        prop_assert_eq!(analyze_trace(&trace), None);
    }

    #[test]
    fn each_step_removes_one_operator_and_keeps_balance(seed in any::<u64>(), r in any::<u64>()) {
        let t = task(seed, 0.7);
        let trace = rollout(&t, &StudentPolicy::zeros(), &ActiveViewpoints::default(), &mut RngStream::new(r));
        prop_assert_eq!(trace.steps.len(), t.operator_count());
        for s in &trace.steps {
            prop_assert_eq!(s.state_after.operator_count() + 1, s.state_before.operator_count());
            prop_assert!(s.state_after.is_balanced());
        }
    }

    #[test]
    fn stored_log_probs_sum_to_recomputed_trace_log_prob(seed in any::<u64>(), r in any::<u64>()) {
        let t = task(seed, 0.5);
        let policy = StudentPolicy::paren_blind();
        let trace = rollout(&t, &policy, &ActiveViewpoints::default(), &mut RngStream::new(r));
        let recomputed = trace_log_prob(&policy, &ActiveViewpoints::default(), &trace);
        prop_assert!((trace.log_prob() - recomputed).abs() < 1e-12);
    }

    #[test]
    fn rollouts_are_reproducible(seed in any::<u64>(), r in any::<u64>()) {
        let t = task(seed, 0.5);
        let policy = StudentPolicy::paren_blind();
        let a = rollout(&t, &policy, &ActiveViewpoints::default(), &mut RngStream::new(r));
        let b = rollout(&t, &policy, &ActiveViewpoints::default(), &mut RngStream::new(r));
        prop_assert_eq!(
            serde_json::to_string(&a.to_record()).unwrap(),
            serde_json::to_string(&b.to_record()).unwrap()
        );
    }
}

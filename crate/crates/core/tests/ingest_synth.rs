use std::collections::BTreeMap;
use std::time::Duration;

use proptest::prelude::*;
use tutorsim::ingest::{chronological_stream, derive_dropout_labels, parse_log, write_log, EventLog, InteractionEvent, ParseMode};
use tutorsim::synth::{gen_log, gen_world, prob_correct, DropoutCoeffs, OrderPolicy};

fn arb_log() -> impl Strategy<Value = EventLog> {
    prop::collection::btree_map((0u8..5, 0u8..12, -50i64..50), any::<bool>(), 0..40).prop_map(|cells| {
        let events = cells
            .into_iter()
            .map(|((u, e, t), c)| {
                InteractionEvent::new(&format!("u{}", u), &format!("e{}", e), &format!("wb{}", e % 3), t, c)
            })
            .collect();
        EventLog::from_events(events).unwrap()
    })
}

fn serialize(log: &EventLog) -> String {
    let mut out = Vec::new();
    write_log(log, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

proptest! {
    #[test]
    fn parse_is_idempotent_on_its_own_output(log in arb_log()) {
        let text = serialize(&log);
        let parsed = parse_log(text.as_bytes(), ParseMode::Strict).unwrap().log;
        prop_assert_eq!(&parsed, &log);
        prop_assert_eq!(serialize(&parsed), text);
    }

    #[test]
    fn at_most_one_dropout_per_user_on_the_last_event(log in arb_log(), size in 1usize..6) {
        let sizes: BTreeMap<String, usize> = (0..3).map(|w| (format!("wb{}", w), size)).collect();
        let labeled = derive_dropout_labels(log, Duration::ZERO, &sizes);
        for positions in labeled.user_index().values() {
            let flagged: Vec<usize> = positions.iter().copied().filter(|&p| labeled.events()[p].dropout).collect();
            prop_assert!(flagged.len() <= 1);
            if let Some(&p) = flagged.first() {
                prop_assert_eq!(p, *positions.last().unwrap());
            }
        }
    }

    #[test]
    fn stream_is_complete_and_ordered(log in arb_log()) {
        let ts: Vec<i64> = chronological_stream(&log).map(|e| e.timestamp).collect();
        prop_assert_eq!(ts.len(), log.len());
        prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn generated_logs_validate_unchanged(seed in 0u64..1000, users in 1usize..30, ex in 1usize..20, max in 1usize..30) {
        let wbs = 1 + (seed as usize % ex.min(4));
        let world = gen_world(users, ex, wbs, seed).unwrap();
        let log = gen_log(&world, OrderPolicy::Random, max);
        let relabeled = derive_dropout_labels(log.clone(), Duration::ZERO, &world.workbook_sizes());
        prop_assert_eq!(&relabeled, &log);
        let reparsed = parse_log(serialize(&log).as_bytes(), ParseMode::Strict).unwrap().log;
        let reparsed = derive_dropout_labels(reparsed, Duration::ZERO, &world.workbook_sizes());
        prop_assert_eq!(&reparsed, &log);
        prop_assert_eq!(EventLog::from_events(log.events().to_vec()).unwrap(), log.clone());
        prop_assert_eq!(gen_log(&world, OrderPolicy::Random, max), log);
        prop_assert_eq!(gen_world(users, ex, wbs, seed).unwrap(), world);
    }
}

#[test]
fn success_frequencies_match_the_response_model() {
    let world = gen_world(10_000, 1, 1, 21).unwrap().with_dropout_coeffs(DropoutCoeffs {
        intercept: f64::NEG_INFINITY,
        frustration: 0.0,
        boredom: 0.0,
    });
    let log = gen_log(&world, OrderPolicy::HistoricalFixed, 1);
    assert_eq!(log.len(), 10_000);
    let (mut observed, mut expected, mut var) = (0.0, 0.0, 0.0);
    for e in log.events() {
        let p = prob_correct(world.abilities[&e.user_id], world.difficulties[&e.exercise_id]);
        observed += e.score();
        expected += p;
        var += p * (1.0 - p);
    }
    assert!((observed - expected).abs() < 3.0 * var.sqrt());
}

use proptest::prelude::*;

use proctrack::checks;
use proctrack::crf;
use proctrack::ingest::procedural::{parse_grid, parse_jsonl, to_grid, to_jsonl};
use proctrack::ingest::{synth, ActionSource};
use proctrack::metrics::{procedural_report, story_metrics, story_outputs_from_gold};
use proctrack::numerics::{logsumexp, Tensor};
use proctrack::schema::{
    derive_actions, derive_states, legal_first, legal_successors, pair_count, pair_from_index, pair_index,
    validate_actions, Action, RecreationPolicy, Span,
};

#[test]
fn every_op_passes_gradcheck_on_100_instances() {
    let results = checks::op_checks(100, 17);
    assert_eq!(results.len(), checks::OPS.len());
    for r in &results {
        assert!(r.passed, "{}: {:?}", r.name, r.failure);
        assert_eq!(r.instances, 100, "{}", r.name);
        assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn crf_checks_cover_phi_and_unblocked_psi() {
    for r in checks::crf_checks(30, 3) {
        assert!(r.passed, "{}: {:?}", r.name, r.failure);
    }
}

fn legal_path(choices: &[usize]) -> Vec<Action> {
    let firsts: Vec<Action> = Action::ALL.iter().copied().filter(|&a| legal_first(a)).collect();
    let mut path = vec![firsts[choices[0] % firsts.len()]];
    for &c in &choices[1..] {
        let next = legal_successors(*path.last().unwrap());
        path.push(next[c % next.len()]);
    }
    path
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pair_index_is_a_bijection(n in 0usize..=12, k in 0usize..66) {
        let count = pair_count(n);
        prop_assert_eq!(count, n * n.saturating_sub(1) / 2);
        if k < count {
            let (t, j) = pair_from_index(n, k).unwrap();
            prop_assert!(1 <= t && t < j && j <= n);
            prop_assert_eq!(pair_index(n, t, j), Some(k));
        } else {
            prop_assert_eq!(pair_from_index(n, k), None);
        }
    }

    #[test]
    fn legal_actions_round_trip(choices in prop::collection::vec(0usize..6, 1..=12), unknown in any::<bool>()) {
        let actions = legal_path(&choices);
        prop_assert!(validate_actions(&actions, RecreationPolicy::Reject).is_ok());
        let mut k = 0;
        let mut spans = vec![Some(Span::new("loc0", 1, 0, 4))];
        for a in &actions {
            spans.push(match a {
                Action::Create | Action::Move => {
                    k += 1;
                    Some(Span::new(format!("loc{k}"), 1, 0, 4))
                }
                Action::Exist => spans.last().unwrap().clone(),
                _ => None,
            });
        }
        if unknown && !actions.contains(&Action::Move) {
            spans.iter_mut().for_each(|s| *s = None);
        }
        let states = derive_states(&actions, &spans).unwrap();
        prop_assert_eq!(derive_actions(&states), actions);
        let back_spans: Vec<Option<Span>> = states.iter().map(|s| s.span().cloned()).collect();
        prop_assert_eq!(derive_states(&derive_actions(&states), &back_spans).unwrap(), states);
    }

    #[test]
    fn partition_matches_enumeration(
        n in 1usize..=4,
        a in 2usize..=6,
        phi in prop::collection::vec(-4.0f64..4.0, 24),
        psi in prop::collection::vec(-4.0f64..4.0, 42),
    ) {
        let phi = matrix(n, a, &phi);
        let psi = matrix(a + 1, a, &psi);
        let mut paths = vec![Vec::new()];
        for _ in 0..n {
            paths = paths.into_iter().flat_map(|p: Vec<usize>| (0..a).map(move |v| [p.clone(), vec![v]].concat())).collect();
        }
        let scores: Vec<f64> = paths.iter().map(|p| crf::path_score(&phi, &psi, p)).collect();
        let z = crf::log_partition(&phi, &psi).unwrap();
        prop_assert!((z - logsumexp(&scores)).abs() < 1e-9);
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (path, score) = crf::viterbi(&phi, &psi, None).unwrap();
        prop_assert!((score - best).abs() < 1e-9);
        prop_assert!((crf::path_score(&phi, &psi, &path) - best).abs() < 1e-9);
        let m = crf::marginals(&phi, &psi).unwrap();
        for t in 0..n {
            prop_assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn self_evaluation_is_all_ones(
        seed in any::<u64>(),
        count in 1usize..10,
        sentences in 1.0f64..7.0,
        entities in 1.0f64..4.0,
        presence in 0.0f64..1.0,
    ) {
        let cfg = synth::SynthConfig {
            mean_sentences: sentences,
            mean_entities: entities,
            initial_presence: presence,
            idle_rate: 0.1,
        };
        let data = synth::corpus("p", count, &cfg, seed).examples;
        let r = procedural_report(&data, &data);
        for x in [r.sentence.cat1, r.sentence.cat2, r.sentence.cat3, r.sentence.macro_avg, r.sentence.micro_avg] {
            prop_assert_eq!(x, 1.0);
        }
        prop_assert_eq!(r.document.overall.f1, 1.0);
        for prf in r.document.categories.values() {
            prop_assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn story_metric_ordering(seed in any::<u64>(), count in 1usize..8, flips in prop::collection::vec(0u8..8, 8)) {
        let ds = synth::story_corpus(&Default::default(), count, seed);
        let mut pred = story_outputs_from_gold(&ds.split.examples);
        for (p, f) in pred.iter_mut().zip(&flips) {
            if f & 1 == 1 {
                p.chosen = 1 - p.chosen;
            }
            if f & 2 == 2 {
                p.conflict = [p.conflict[1], p.conflict[0] + 1];
            }
            if f & 4 == 4 {
                if let Some(e) = p.attributes.stories[0].first_mut() {
                    e.eff.iter_mut().flatten().for_each(|v| *v = (*v + 1) % 3);
                }
            }
        }
        let r = story_metrics(&ds.registry, &ds.split.examples, &pred).unwrap();
        prop_assert!(r.verifiability <= r.consistency && r.consistency <= r.accuracy);
        let clean = story_metrics(&ds.registry, &ds.split.examples, &story_outputs_from_gold(&ds.split.examples)).unwrap();
        prop_assert_eq!((clean.accuracy, clean.consistency, clean.verifiability), (1.0, 1.0, 1.0));
    }

    #[test]
    fn corpora_round_trip_through_both_formats(seed in any::<u64>(), count in 1usize..6) {
        let data = synth::corpus("rt", count, &Default::default(), seed).examples;
        let jsonl = to_jsonl(&data, false);
        let back = parse_jsonl(&jsonl, ActionSource::Derive, RecreationPolicy::Reject).unwrap();
        prop_assert_eq!(&back, &data);
        let grid = parse_grid(&to_grid(&data), RecreationPolicy::Reject).unwrap();
        prop_assert_eq!(to_jsonl(&grid, false), jsonl);
    }
}

mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use regrank::backends::mock::FixtureModel;
use regrank::backends::wire::GenerateRequest;
use regrank::backends::{BackendClient, Endpoint, RetryPolicy, Transport, TransportError};
use regrank::context::{assemble_generation_prompt, build_window};
use regrank::harness::{run_experiment, PromptMode, RunConfig, RunReport, SampleStatus};
use regrank::metrics::Metric;
use regrank::rerank::Strategy;
use regrank::synthetic::{agos_corpus, SyntheticConfig};
use regrank::{Corpus, Dialogue, Mention};

/// Forwards to the fixture model and keeps every generation request.
fn recording(corpus: &Corpus) -> (BackendClient, Arc<Mutex<Vec<GenerateRequest>>>) {
    let model = FixtureModel::new(corpus);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let transport = move |endpoint: Endpoint, request: &Value| {
        if endpoint == Endpoint::Generate {
            log.lock().unwrap().push(serde_json::from_value(request.clone()).unwrap());
        }
        model.call(endpoint, request)
    };
    (BackendClient::uniform(Arc::new(transport)), seen)
}

/// The dialogue as it stood when `mention` began: later messages dropped and
/// the current message cut at the mention.
fn truncated(dialogue: &Dialogue, mention: &Mention) -> Dialogue {
    let mut d = dialogue.clone();
    d.messages.truncate(mention.message_index + 1);
    let current = &mut d.messages[mention.message_index];
    current.text = current.text.chars().take(mention.char_start).collect();
    d.mentions.clear();
    d.ranking_events.clear();
    d
}

fn included(report: &RunReport) -> impl Iterator<Item = &regrank::harness::SampleRecord> {
    report.samples.iter().filter(|s| s.is_included())
}

#[test]
fn prompts_never_see_the_reference() {
    let corpus = agos_corpus(&SyntheticConfig::default());
    let mut allowed = BTreeSet::new();
    for (d, m) in corpus.mentions() {
        let Some(target) = m.target() else { continue };
        let full = assemble_generation_prompt(&build_window(d, m).unwrap(), target).render();
        let cut = truncated(d, m);
        let blind = assemble_generation_prompt(&build_window(&cut, m).unwrap(), target).render();
        assert_eq!(full, blind, "{}", m.mention_id);
        allowed.insert(full);
    }
    let (client, seen) = recording(&corpus);
    let report = run_experiment(&corpus, &RunConfig::default(), &client).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), report.tallies.included);
    for req in seen.iter() {
        assert!(allowed.contains(&req.prompt.render()), "unexpected prompt {}", req.prompt.render());
    }
}

#[test]
fn in_context_support_comes_from_other_sets() {
    // second mentions supply the pronoun and one-anaphora categories
    let corpus = agos_corpus(&SyntheticConfig {
        mentions_per_image: 2,
        ..SyntheticConfig::default()
    });
    let (client, seen) = recording(&corpus);
    let config = RunConfig {
        prompt_mode: PromptMode::InContext { shots: 4 },
        ..RunConfig::default()
    };
    let report = run_experiment(&corpus, &config, &client).unwrap();
    assert_eq!(report.tallies.failed, 0);
    assert!(report.tallies.included > 0);
    for req in seen.lock().unwrap().iter() {
        // the query image comes last, after the support examples
        let mut images: Vec<&str> = req.prompt.image_ids().collect();
        let referent = images.pop().unwrap();
        let test_set = referent.split('-').next().unwrap();
        let support = images;
        assert_eq!(support.len(), 4);
        assert!(support.iter().all(|id| !id.starts_with(test_set)), "{support:?} shares {test_set}");
    }
}

#[test]
fn thin_support_fails_samples_not_the_run() {
    let corpus = agos_corpus(&SyntheticConfig::default());
    let (client, _) = recording(&corpus);
    let config = RunConfig {
        prompt_mode: PromptMode::InContext { shots: 4 },
        ..RunConfig::default()
    };
    let report = run_experiment(&corpus, &config, &client).unwrap();
    assert_eq!(report.tallies.included, 0);
    assert_eq!(report.tallies.failed + report.tallies.excluded, report.tallies.total);
}

#[test]
fn every_mention_is_accounted_for() {
    let corpus = agos_corpus(&SyntheticConfig::default());
    let model = FixtureModel::new(&corpus);
    // the model refuses to generate for one image
    let flaky = move |endpoint: Endpoint, request: &Value| {
        if endpoint == Endpoint::Generate && request.to_string().contains("set2-img3") {
            return Err(TransportError::Rejected("no".into()));
        }
        model.call(endpoint, request)
    };
    let client = BackendClient::uniform(Arc::new(flaky)).with_retry(RetryPolicy {
        attempts: 1,
        ..RetryPolicy::default()
    });
    let report = run_experiment(&corpus, &RunConfig::default(), &client).unwrap();
    let t = report.tallies;
    assert_eq!(t.total, corpus.mentions().filter(|(_, m)| m.is_single_image()).count());
    assert_eq!(t.included + t.excluded + t.failed, t.total);
    assert!(t.failed > 0);
    for s in &report.samples {
        let refused = s.target_image_id == "set2-img3";
        match s.status {
            SampleStatus::Failed { .. } => assert!(refused, "{}", s.mention_id),
            SampleStatus::Included => assert!(!refused, "{}", s.mention_id),
            SampleStatus::Excluded { .. } => {}
        }
    }
    for fold in &report.folds {
        let f = fold.tallies;
        assert_eq!(f.included + f.excluded + f.failed, f.total);
    }
    let sum: usize = report.folds.iter().map(|f| f.tallies.total).sum();
    assert_eq!(sum, t.total);
}

#[test]
fn identical_selections_give_identical_rows() {
    let stored = common::stored_report("agos", "beam6");
    let mut coincide = 0;
    for s in included(&stored) {
        for a in Strategy::ALL {
            for b in Strategy::ALL {
                let (x, y) = (&s.outcomes[&a], &s.outcomes[&b]);
                if x.selection.beam_rank == y.selection.beam_rank {
                    assert_eq!(x.selection.text, y.selection.text);
                    assert_eq!(x.metrics, y.metrics, "{} {a} vs {b}", s.mention_id);
                    assert_eq!(x.target_rank, y.target_rank);
                    coincide += 1;
                }
            }
        }
    }
    assert!(coincide > included(&stored).count() * 3);
}

#[test]
fn greedy_runs_collapse_every_strategy() {
    let stored = common::stored_report("agos", "greedy");
    for s in included(&stored) {
        let ranks: BTreeSet<usize> = s.outcomes.values().map(|o| o.selection.beam_rank).collect();
        assert_eq!(ranks, BTreeSet::from([0]), "{}", s.mention_id);
    }
    let rows: Vec<_> = stored.overall.values().collect();
    assert!(rows.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn rerank_improves_on_the_recorded_corpus() {
    let stored = common::stored_report("agos", "beam6");
    let acc = |s: Strategy| stored.overall[&s].get(Metric::Accuracy).unwrap();
    assert!(acc(Strategy::Rerank) > acc(Strategy::Top1));
    assert!(acc(Strategy::Rerank) >= acc(Strategy::MaxDisc));
}

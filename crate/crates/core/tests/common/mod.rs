#![allow(dead_code)]

use std::path::{Path, PathBuf};

use regrank::backends::ReplayMode;
use regrank::harness::{connect, load_report, run_experiment, RunConfig, RunReport};
use regrank::{load_corpus, Corpus};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn corpus(name: &str) -> Corpus {
    load_corpus(fixtures().join(name).join("corpus.jsonl")).expect("fixture corpus loads")
}

pub fn stored_report(name: &str, run: &str) -> RunReport {
    load_report(fixtures().join(name).join(format!("report-{run}.json"))).expect("fixture report loads")
}

/// Run `config` against the recorded cache of fixture `name`, with no model
/// behind it. The config's replay dir is resolved against the fixture dir.
pub fn replay(name: &str, config: &RunConfig) -> RunReport {
    let mut wired = config.clone();
    wired.replay.mode = ReplayMode::Replay;
    let dir = config.replay.dir.clone().unwrap_or_else(|| "replay".into());
    wired.replay.dir = Some(fixtures().join(name).join(dir));
    let backends = connect(&wired, None).expect("replay cache opens");
    run_experiment(&corpus(name), config, &backends.client).expect("run completes")
}

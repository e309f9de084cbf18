//! Regenerate the bundled replay fixtures.
//!
//! ```text
//! cargo run -p regrank --example record_fixtures
//! ```
//!
//! Writes a synthetic corpus, records every backend exchange of a run against
//! the deterministic fixture model, then replays the recording and stores
//! that run's report and tables. Tests replay these files without the model.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use regrank::backends::mock::FixtureModel;
use regrank::backends::{Decoding, ReplayMode};
use regrank::harness::{connect, emit_report, render_tables, run_experiment, ReplaySettings, RunConfig};
use regrank::synthetic::{agos_corpus, SyntheticConfig};
use regrank::Corpus;

/// Number of single-image mentions kept in the golden corpus.
const GOLDEN_MENTIONS: usize = 10;

fn record(dir: &Path, corpus: &Corpus, decodings: &[Decoding]) -> Vec<regrank::harness::RunReport> {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("corpus.jsonl"), corpus.to_jsonl()).unwrap();
    let replay_dir = dir.join("replay");
    let _ = std::fs::remove_dir_all(&replay_dir);
    let mut reports = Vec::new();
    for &decoding in decodings {
        let config = RunConfig {
            decoding,
            parallelism: 1,
            replay: ReplaySettings {
                mode: ReplayMode::Record,
                dir: Some(PathBuf::from("replay")),
            },
            ..RunConfig::default()
        };
        let mut wired = config.clone();
        wired.replay.dir = Some(replay_dir.clone());
        let backends = connect(&wired, Some(Arc::new(FixtureModel::new(corpus)))).unwrap();
        run_experiment(corpus, &config, &backends.client).unwrap();
        backends.cache.unwrap().compact().unwrap();

        // the stored report is the one a pure replay produces
        let config = RunConfig {
            replay: ReplaySettings {
                mode: ReplayMode::Replay,
                ..config.replay
            },
            ..config
        };
        wired.replay.mode = ReplayMode::Replay;
        let backends = connect(&wired, None).unwrap();
        let report = run_experiment(corpus, &config, &backends.client).unwrap();
        assert_eq!(report.tallies.failed, 0, "replay incomplete");
        let name = match decoding {
            Decoding::Greedy => "greedy".to_string(),
            Decoding::Beam { width } => format!("beam{width}"),
        };
        emit_report(&report, dir.join(format!("report-{name}.json"))).unwrap();
        std::fs::write(dir.join(format!("tables-{name}.md")), render_tables(&report)).unwrap();
        println!("{}: {:?}", dir.join(&name).display(), report.tallies);
        reports.push(report);
    }
    reports
}

fn golden_corpus() -> Corpus {
    let mut c = agos_corpus(&SyntheticConfig {
        n_sets: 1,
        dialogues_per_set: 1,
        rounds: 2,
        stale_mention: false,
        seed: 11,
        ..SyntheticConfig::default()
    });
    let d = &mut c.dialogues[0];
    let mut kept = 0;
    d.mentions.retain(|m| {
        if !m.is_single_image() {
            return true;
        }
        kept += 1;
        kept <= GOLDEN_MENTIONS
    });
    c
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    record(&root.join("agos"), &agos_corpus(&SyntheticConfig::default()), &[Decoding::Beam { width: 6 }, Decoding::Greedy]);
    let golden = record(&root.join("golden"), &golden_corpus(), &[Decoding::Beam { width: 6 }]);
    print!("{}", render_tables(&golden[0]));
}

//! The `hiconcept` pipeline: generate data, train a target, fit concepts,
//! evaluate, run ablations and render a report. Every command reads one
//! resolved [`config::RunConfig`] and writes into its output directory.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

use std::path::Path;

use clap::ValueEnum;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
use pipeline::{write, AblationRow, ConceptsFile, Paths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    GenData,
    TrainTarget,
    TrainConcepts,
    Evaluate,
    Ablate,
    Report,
}

fn read_ablation(path: &Path) -> Option<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).ok()?;
    r.deserialize().collect::<std::result::Result<Vec<AblationRow>, _>>().ok()
}

/// Run one command. The resolved config is written next to the artifacts
/// first, so every run can be repeated from its snapshot.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg.out_dir());
    write(&paths.snapshot(), cfg.to_toml().as_bytes())?;
    match cmd {
        Command::GenData => {
            pipeline::gen_data(cfg, &paths)?;
        }
        Command::TrainTarget => {
            pipeline::train_target(cfg, &paths)?;
        }
        Command::TrainConcepts => {
            let out = pipeline::train_concepts_stage(cfg, &paths)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Evaluate => {
            let ev = pipeline::evaluate(cfg, &paths)?;
            write(&paths.metrics(), serde_json::to_string_pretty(&ev.metrics)?.as_bytes())?;
            write(&paths.concepts(), serde_json::to_string_pretty(&ev.concepts)?.as_bytes())?;
            log::info!(
                "RAcc {:.4}, average impact {:.4}, {} active concepts",
                ev.scored.report.racc,
                ev.scored.report.avg_impact,
                ev.scored.report.effective_concepts
            );
        }
        Command::Ablate => {
            let rows = pipeline::ablate(cfg, &paths)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r).map_err(|e| CliError::Other(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
            write(&paths.ablation(), &bytes)?;
        }
        Command::Report => {
            let need = || CliError::Prerequisite("no evaluation results; run evaluate first".into());
            let metrics: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(paths.metrics()).map_err(|_| need())?).map_err(|_| need())?;
            let concepts: ConceptsFile =
                serde_json::from_str(&std::fs::read_to_string(paths.concepts()).map_err(|_| need())?).map_err(|_| need())?;
            let ablation = read_ablation(&paths.ablation());
            let html = report::render(&metrics, &concepts, ablation.as_deref());
            write(&paths.report(), html.as_bytes())?;
            log::info!("wrote {}", paths.report().display());
        }
    }
    Ok(())
}

use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use stagegrow::trace::TraceLog;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Search trace (trace.jsonl).
    #[arg(long)]
    trace: PathBuf,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One row per completed iteration. `parent_switch` marks selections that did
/// not grow from the previous iteration's pick; `resolution_drop` marks rows
/// whose resolution is below the previous row's.
pub fn run(args: ReportArgs) -> Result<()> {
    let log = TraceLog::read(&args.trace)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);

    let stages = log
        .iterations()
        .next()
        .map(|s| s.config.num_stages())
        .unwrap_or(0);
    let mut header: Vec<String> = [
        "iteration",
        "step_target",
        "candidates",
        "macs",
        "accuracy",
        "resolution",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=stages).map(|i| format!("w_{i}")));
    header.extend((1..=stages).map(|i| format!("d_{i}")));
    header.extend(["parent", "parent_switch", "relaxed", "resolution_drop"].map(String::from));
    w.write_record(&header)?;

    let mut prev_resolution = None;
    for s in log.iterations() {
        let mut row = vec![
            s.iteration.to_string(),
            s.step_target.to_string(),
            s.candidate_count.to_string(),
            s.macs.to_string(),
            s.accuracy.to_string(),
            s.config.resolution().to_string(),
        ];
        row.extend(s.config.widths().iter().map(u32::to_string));
        row.extend(s.config.depths().iter().map(u32::to_string));
        let drop = prev_resolution.is_some_and(|r| s.config.resolution() < r);
        row.push(s.parent.to_string());
        row.push((s.parent + 1 != s.iteration as usize).to_string());
        row.push(s.relaxed.to_string());
        row.push(drop.to_string());
        w.write_record(&row)?;
        prev_resolution = Some(s.config.resolution());
    }
    w.flush()?;
    Ok(())
}

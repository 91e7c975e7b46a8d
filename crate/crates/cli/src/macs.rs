use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;
use stagegrow::cost::{network_cost, spatial_profile, SpatialStage};
use stagegrow::ArchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    /// Template file or built-in name (efficientnet-b0, ghostnet).
    #[arg(long)]
    template: String,
    /// Configuration JSON overriding resolution, widths and depths (default: the base network).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Serialize)]
struct MacsReport {
    config: ArchConfig,
    stem_macs: u64,
    per_stage_macs: Vec<u64>,
    head_macs: u64,
    total_macs: u64,
    total_params: u64,
    per_stage_params: Vec<u64>,
    /// Body MACs grouped by feature-map size.
    spatial_stages: Vec<SpatialStage>,
}

pub fn run(args: MacsArgs) -> Result<()> {
    let (template, _) = crate::load_template(&args.template)?;
    let config = crate::load_config(&template, args.config.as_ref())?;
    let cost = network_cost(&template, &config)?;
    let breakdown = cost.breakdown();
    let report = MacsReport {
        stem_macs: breakdown.stem_macs,
        per_stage_macs: breakdown.per_stage_macs,
        head_macs: breakdown.head_macs,
        total_macs: breakdown.total_macs,
        total_params: breakdown.total_params,
        per_stage_params: cost.stages.iter().map(|c| c.params).collect(),
        spatial_stages: spatial_profile(&template, &config)?,
        config,
    };
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Table => print_table(&report, &cost.stage_outputs),
    }
    Ok(())
}

fn print_table(r: &MacsReport, outputs: &[u32]) {
    println!("resolution {}", r.config.resolution());
    println!(
        "{:<8} {:>6} {:>6} {:>8} {:>16} {:>12}",
        "part", "width", "depth", "out", "macs", "params"
    );
    println!(
        "{:<8} {:>6} {:>6} {:>8} {:>16} {:>12}",
        "stem", "", "", "", r.stem_macs, ""
    );
    for (i, macs) in r.per_stage_macs.iter().enumerate() {
        println!(
            "{:<8} {:>6} {:>6} {:>8} {:>16} {:>12}",
            format!("stage{}", i + 1),
            r.config.widths()[i],
            r.config.depths()[i],
            format!("{0}x{0}", outputs[i]),
            macs,
            r.per_stage_params[i]
        );
    }
    println!(
        "{:<8} {:>6} {:>6} {:>8} {:>16} {:>12}",
        "head", "", "", "", r.head_macs, ""
    );
    println!(
        "{:<8} {:>6} {:>6} {:>8} {:>16} {:>12}",
        "total", "", "", "", r.total_macs, r.total_params
    );
}

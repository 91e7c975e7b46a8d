use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use stagegrow::estimator::{WireRequest, WireResponse, PROTOCOL_VERSION};
use stagegrow::{ArchConfig, NetworkTemplate, Surrogate, SurrogateParams};

use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Answer every request with a fixed accuracy.
    Echo,
    /// Score requests with the closed-form surrogate.
    Surrogate,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long, value_enum, default_value_t = Mode::Surrogate)]
    mode: Mode,
    /// Template the requests refer to (required in surrogate mode).
    #[arg(long)]
    template: Option<String>,
    /// JSON file with surrogate parameters (default: derived from the template).
    #[arg(long)]
    surrogate_params: Option<PathBuf>,
    /// Accuracy returned in echo mode.
    #[arg(long, default_value_t = 0.5)]
    accuracy: f64,
    /// Sleep this long before each response.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Exit with status 1 after answering this many requests.
    #[arg(long)]
    exit_after: Option<u64>,
}

struct Scorer {
    template: NetworkTemplate,
    surrogate: Surrogate,
}

fn scorer(args: &WorkerArgs) -> Result<Option<Scorer>> {
    if args.mode == Mode::Echo {
        return Ok(None);
    }
    let spec = args
        .template
        .as_deref()
        .ok_or_else(|| Usage("surrogate mode needs --template".into()))?;
    let (template, _) = crate::load_template(spec)?;
    let params = match &args.surrogate_params {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?
        }
        None => SurrogateParams::for_template(&template),
    };
    Ok(Some(Scorer {
        surrogate: Surrogate::new(params)?,
        template,
    }))
}

fn respond(req: &WireRequest, args: &WorkerArgs, scorer: Option<&Scorer>) -> WireResponse {
    let mut response = WireResponse {
        id: req.id as i64,
        accuracy: None,
        meta: BTreeMap::new(),
        error: None,
        protocol: None,
    };
    if req.protocol != PROTOCOL_VERSION {
        response.error = Some(format!("unsupported protocol {}", req.protocol));
        response.protocol = Some(PROTOCOL_VERSION as u64);
        return response;
    }
    let Some(s) = scorer else {
        response.accuracy = Some(args.accuracy);
        response
            .meta
            .insert("evaluator".into(), "worker-echo".into());
        return response;
    };
    let scored = ArchConfig::new(
        &s.template,
        req.resolution,
        req.stages.iter().map(|st| st.width).collect(),
        req.stages.iter().map(|st| st.depth).collect(),
    )
    .map_err(|e| e.to_string())
    .and_then(|c| {
        s.surrogate
            .accuracy(&s.template, &c)
            .map_err(|e| e.to_string())
    });
    match scored {
        Ok(accuracy) => {
            response.accuracy = Some(accuracy);
            response
                .meta
                .insert("evaluator".into(), "worker-surrogate".into());
        }
        Err(e) => response.error = Some(e),
    }
    response
}

/// Serves requests from stdin until EOF. Malformed lines get an error
/// response with id -1 and do not stop the loop.
pub fn run(args: WorkerArgs) -> Result<()> {
    let scorer = scorer(&args)?;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut answered = 0u64;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => respond(&req, &args, scorer.as_ref()),
            Err(e) => WireResponse {
                id: -1,
                accuracy: None,
                meta: BTreeMap::new(),
                error: Some(format!("malformed request: {e}")),
                protocol: None,
            },
        };
        if args.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(args.delay_ms));
        }
        writeln!(out, "{}", serde_json::to_string(&response)?)?;
        out.flush()?;
        answered += 1;
        if args.exit_after.is_some_and(|n| answered >= n) {
            std::process::exit(1);
        }
    }
    Ok(())
}

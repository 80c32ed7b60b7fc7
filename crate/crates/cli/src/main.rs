use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use tilegrade_cli::{resolve_config, Cli, Command};
use tilegrade_core::pipeline;
use tracing_subscriber::EnvFilter;

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("TILEGRADE_LOG").unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Prepare(a) => {
            let s = pipeline::prepare(&a.slides, &a.annotations, &a.out, &cfg)?;
            println!("slides: {}", s.slides);
            println!("tiles scanned: {}, labeled: {}, written: {}", s.tiles_scanned, s.tiles_labeled, s.tiles_written);
            println!("manifest: {}", s.manifest.display());
            println!("{}", s.splits);
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Predict(a) => {
            let s = pipeline::predict(&a.slide, &cfg, &a.out, &a.csv)?;
            let t = &s.stage_times;
            println!("slide {}: {} tiles in {} batches on {} workers", s.slide_id, s.tiles, s.batches, s.workers);
            println!("overlay: {}", s.overlay.display());
            println!("predictions: {}", s.csv.display());
            println!(
                "wall {:.2}s; stage totals read {:.2}s, preprocess {:.2}s, classify {:.2}s, blend {:.2}s, write {:.2}s",
                s.wall_time.as_secs_f64(),
                t.read.as_secs_f64(),
                t.preprocess.as_secs_f64(),
                t.classify.as_secs_f64(),
                t.blend.as_secs_f64(),
                t.write.as_secs_f64()
            );
        }
        Command::Evaluate(a) => {
            let s = pipeline::evaluate(&a.pred, &a.truth, &a.report, cfg.evaluate)?;
            println!("{}", s.report.to_text());
            if s.unmatched_predictions + s.unmatched_truths > 0 {
                eprintln!(
                    "warning: {} predictions and {} truth rows had no partner",
                    s.unmatched_predictions, s.unmatched_truths
                );
            }
            println!("report: {} ({})", s.json.display(), s.text.display());
        }
        Command::Config(_) => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line protocol: corpus generation, the layer sweep, multi-epoch
//! training and checkpoint evaluation. Every command writes a timestamped
//! log file and a structured report into its output directory.

pub mod args;
mod eval;
mod gen_data;
pub mod setup;
mod sweep;
mod train;

pub use args::{Cli, Command};
pub use eval::{cmd_eval, EvalRecord};
pub use gen_data::cmd_gen_data;
pub use sweep::{
    best_record, cmd_sweep, resolve_layers, LayerCka, Method, SweepLine, SweepRecord, SweepReport, SweepSummary,
};
pub use train::{cmd_train, TrainLine, TrainReport, TrainSummary};

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            cmd_gen_data(a)?;
        }
        Command::Sweep(a) => {
            let r = cmd_sweep(a)?;
            let best = r.best();
            println!(
                "{} runs; best {} at layer {} with composite {:.2}",
                r.records.len(),
                best.method,
                best.layer.map_or("-".to_string(), |l| l.to_string()),
                best.composite
            );
        }
        Command::Train(a) => {
            let r = cmd_train(a)?;
            for e in &r.epochs {
                println!(
                    "epoch {}: BLEU {:.2} ChrF {:.2} composite {:.2}",
                    e.epoch, e.dev.bleu, e.dev.chrf, e.dev.composite
                );
            }
            println!(
                "best epoch {} (composite {:.2})",
                r.summary.best_epoch, r.summary.best_composite
            );
        }
        Command::Eval(a) => {
            let r = cmd_eval(a)?;
            println!(
                "{}: BLEU {:.2} ChrF {:.2} composite {:.2} over {} pairs",
                r.mode, r.report.bleu, r.report.chrf, r.report.composite, r.report.n_examples
            );
        }
    }
    Ok(())
}

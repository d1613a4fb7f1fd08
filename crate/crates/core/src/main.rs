use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fedoap::fed_protocol::StrategyKind;
use fedoap::harness::{self, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "fedoap", version, about = "Personalized federated segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Alignment rounds, fine-tuning and test evaluation.
    Train(Overrides),
    /// The four DCA / adapter / PBL configurations.
    Ablate(Overrides),
    /// Zero-shot and fine-tuned Dice on the held-out profile.
    Generalize(Overrides),
    /// Closed-form and measured bytes per round.
    Transmission(Overrides),
}

/// Every config key, by the same name as in the JSON config file.
#[derive(Args, Default)]
struct Overrides {
    /// Flat JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    use_dca: Option<bool>,
    #[arg(long)]
    use_adapter: Option<bool>,
    #[arg(long)]
    use_pbl: Option<bool>,
    #[arg(long)]
    no_dca: bool,
    #[arg(long)]
    no_adapter: bool,
    #[arg(long)]
    no_pbl: bool,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    profiles: Option<Vec<String>>,
    #[arg(long)]
    heldout_profile: Option<String>,
    #[arg(long)]
    samples_per_client: Option<usize>,
    #[arg(long)]
    test_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    attention_heads: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    anchor_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<String>,
}

impl Overrides {
    fn resolve(self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { c.$field = v; }
            )*};
        }
        set!(
            strategy, use_dca, use_adapter, use_pbl, clients, profiles, heldout_profile, samples_per_client,
            test_frac, val_frac, rounds, local_epochs, finetune_epochs, image_size, base_channels, depth,
            attention_heads, tau, lambda, noise_variance, lr, min_lr, weight_decay, batch_size, anchor_size, seed,
            seeds, out
        );
        c.use_dca &= !self.no_dca;
        c.use_adapter &= !self.no_adapter;
        c.use_pbl &= !self.no_pbl;
        c.validate()?;
        Ok(c)
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    let start = Instant::now();
    let (name, cfg) = match command {
        Command::Train(o) => ("train", o.resolve()?),
        Command::Ablate(o) => ("ablate", o.resolve()?),
        Command::Generalize(o) => ("generalize", o.resolve()?),
        Command::Transmission(o) => ("transmission", o.resolve()?),
    };
    let out = Path::new(&cfg.out);
    match name {
        "train" => {
            let report = harness::cmd_train(&cfg)?;
            harness::write_report(out, &report)?;
            for c in &report.per_client {
                println!("client {} {}: test dice {:.4}", c.client_id, c.profile, c.test_dice.mean);
            }
            println!("{}: mean test dice {:.4}", report.strategy, report.mean_test_dice.mean);
        }
        "ablate" => {
            let table = harness::cmd_ablate(&cfg)?;
            harness::write_ablation(out, &table)?;
            for r in &table.rows {
                println!("{:<16} mean dice {:.4}", r.name, r.mean);
            }
        }
        "generalize" => {
            let report = harness::cmd_generalize(&cfg)?;
            harness::write_generalization(out, &report)?;
            println!(
                "{}: zero-shot dice {:.4}, fine-tuned dice {:.4}",
                report.profile, report.zero_shot_dice.mean, report.fine_tuned_dice.mean
            );
        }
        _ => {
            let rows = harness::cmd_transmission(&cfg)?;
            harness::write_transmission(out, &rows)?;
            for r in &rows {
                println!(
                    "{:<5} {:<40} K={} {:.6} MB per round",
                    r.scale, r.strategy, r.clients, r.per_round_mb
                );
            }
        }
    }
    harness::write_timing(out, name, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments");
            eprintln!("error kind=usage reason={:?}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} reason={:?}", e.kind(), e.to_string());
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use stegolock::pipeline::RunContext;
use stegolock::verify::Verdict;

#[derive(Parser)]
#[command(name = "stegolock", about = "Key-based active authorization for image classifiers", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Run seed; every stage derives its randomness from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory holding all stage artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline classifier on plain covers.
    TrainBaseline(Common),
    /// Train the steganographic key codec.
    TrainCodec(Common),
    /// Derive keys and build a protected model for every configured user.
    Protect(Common),
    /// Black-box verify a suspect checkpoint against all registered keys.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suspect checkpoint; defaults to the first user's protected model.
        #[arg(long, value_name = "FILE")]
        suspect: Option<PathBuf>,
    },
    /// Trace intercepted authorized images back to a registered key.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Whose authorized images were intercepted; defaults to the first user.
        #[arg(long)]
        user: Option<String>,
    },
    /// Run the attack suite against one user's protected model.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<String>,
    },
    /// Key-bit sensitivity sweep for one user's protected model.
    Flipbits {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        user: Option<String>,
    },
    /// Aggregate all run artifacts into reports/report.{json,md}.
    Report(Common),
}

fn open(c: &Common) -> anyhow::Result<RunContext> {
    RunContext::open(&c.config, c.seed, &c.out).with_context(|| format!("opening run directory {:?}", c.out))
}

fn pick_user(ctx: &RunContext, user: Option<String>) -> anyhow::Result<String> {
    match user {
        Some(u) => {
            if !ctx.cfg.users.contains(&u) {
                bail!("user {u:?} is not in the configuration");
            }
            Ok(u)
        }
        None => Ok(ctx.cfg.users[0].clone()),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::TrainBaseline(c) => {
            let ctx = open(&c)?;
            ctx.ensure_baseline()?;
            println!("baseline ready at {:?}", ctx.baseline_path());
        }
        Command::TrainCodec(c) => {
            let ctx = open(&c)?;
            ctx.ensure_codec()?;
            println!("codec ready at {:?}", ctx.codec_path());
        }
        Command::Protect(c) => {
            let ctx = open(&c)?;
            ctx.cmd_protect(|msg| println!("{msg}"))?;
            println!("registry: {:?}", ctx.registry_path());
        }
        Command::Verify { common, suspect } => {
            let ctx = open(&common)?;
            let suspect = match suspect {
                Some(p) => p,
                None => ctx.protected_path(&ctx.cfg.users[0]),
            };
            let report = ctx.cmd_verify(&suspect)?;
            println!("benign accuracy: {:.3}", report.benign_accuracy);
            for (user, acc, gap) in &report.per_user {
                println!("  {user}: authorized {acc:.3} (gap {gap:+.1}pp)");
            }
            match report.verdict {
                Verdict::Innocent => println!("verdict: innocent"),
                Verdict::Pirated { user_id, margin_pp } => {
                    println!("verdict: pirated by {user_id} (margin {margin_pp:.1}pp)")
                }
                Verdict::Inconclusive { reason } => println!("verdict: inconclusive ({reason})"),
            }
        }
        Command::Trace { common, user } => {
            let ctx = open(&common)?;
            let user = pick_user(&ctx, user)?;
            let report = ctx.cmd_trace(&user)?;
            println!("traced {}/{} intercepted images to {user}: TSR {:.3}", report.correct, report.total, report.tsr);
        }
        Command::Attack { common, user } => {
            let ctx = open(&common)?;
            let user = pick_user(&ctx, user)?;
            let rows = ctx.cmd_attack(&user, |msg| println!("{msg}"))?;
            println!("attack,parameter,benign,authorized");
            for r in rows {
                println!("{},{},{:.3},{:.3}", r.attack, r.parameter, r.benign_accuracy, r.authorized_accuracy);
            }
        }
        Command::Flipbits { common, user } => {
            let ctx = open(&common)?;
            let user = pick_user(&ctx, user)?;
            let rows = ctx.cmd_flipbits(&user)?;
            println!("flips,authorized_accuracy,tsr");
            for (n, acc, tsr) in rows {
                println!("{n},{acc:.3},{tsr:.3}");
            }
        }
        Command::Report(c) => {
            let ctx = open(&c)?;
            let report = ctx.cmd_report()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("written to {:?}", c.out.join("reports/report.json"));
        }
    }
    Ok(())
}

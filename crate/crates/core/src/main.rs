use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use granular_grasp::config::ExperimentConfig;
use granular_grasp::dataset::{load_dataset, save_dataset};
use granular_grasp::estimators::{train_bundle, ModelBundle};
use granular_grasp::harness::{self, EvalCampaign, Evaluator, SuccessTable};
use granular_grasp::selection::PolicyTag;
use granular_grasp::sim::{collect, Simulator};
use granular_grasp::{Error, Result};

#[derive(Parser)]
#[command(name = "granular-grasp", version, about = "Target-mass grasping of granular food on a simulated tray")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect a labelled dataset of random grasps.
    Collect {
        #[arg(long, default_value = "coffee")]
        material: String,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mass, EE and RND heads on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Use only the first N records.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run grasp attempts with a trained bundle.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        attempts: usize,
    },
    /// Collect, train and evaluate over dataset sizes and seeds.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Dataset sizes; the config's list when omitted.
        #[arg(long)]
        size: Vec<usize>,
        /// Seeds; the config's list when omitted.
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Print the effective configuration.
    DumpConfig,
    /// Render a results CSV as a text table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    material: Option<String>,
    /// Policies to run (random, baseline, ee, rnd); all when omitted.
    #[arg(long)]
    policy: Vec<PolicyTag>,
    /// Target masses in grams.
    #[arg(long = "target-g")]
    target_g: Vec<f64>,
    /// Results CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(m) = &self.material {
            cfg.campaign.material = m.clone();
        }
        if !self.policy.is_empty() {
            cfg.campaign.policies = self.policy.iter().map(|p| p.as_str().to_string()).collect();
        }
        if !self.target_g.is_empty() {
            cfg.campaign.targets_g = self.target_g.clone();
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn finish(table: &SuccessTable, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => print!("{}", harness::report(table, p)?),
        None => print!("{}", harness::render_text(table)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Collect { material, size, seed, out } => {
            let sim = Simulator::new(&cfg);
            let ds = collect(&sim, cfg.material(&material)?, size, seed)?;
            save_dataset(&ds, &out)?;
            let masses: Vec<f64> = ds.masses().collect();
            let s = harness::stats::summarize(&masses);
            println!(
                "{} grasps of {material}: mean {:.2} g, std {:.2} g, skew {:.2}",
                s.n, s.mean, s.std, s.skew
            );
        }
        Cmd::Train { data, size, seed, out } => {
            let mut ds = load_dataset(&data)?;
            if let Some(n) = size {
                if n == 0 || n > ds.len() {
                    return Err(Error::Config(format!("--size must be in 1..={}", ds.len())));
                }
                ds = ds.prefix(n);
            }
            let bundle = train_bundle(&ds, &cfg, seed)?;
            bundle.save(&out)?;
            let kind = if bundle.mass.fit.held_out { "held-out" } else { "training" };
            println!("trained on {} records, {kind} mass MSE {:.2} g^2", bundle.mass.train_records, bundle.mass.fit.loss_g2);
        }
        Cmd::Eval { model, eval, seed, attempts } => {
            eval.apply(&mut cfg);
            cfg.validate()?;
            let bundle = ModelBundle::load(&model)?;
            if bundle.config_hash != cfg.hash() {
                log::warn!("model was trained under a different config");
            }
            let campaign = EvalCampaign::from_config(&cfg)?;
            if campaign.targets_g.is_empty() {
                return Err(Error::Config("eval needs at least one --target-g".into()));
            }
            let sim = Simulator::new(&cfg);
            let size = bundle.mass.train_records;
            let mut ev = Evaluator::new(&cfg, &sim, Some(&bundle), &campaign.material, seed, campaign.warmup_cycles)?;
            let mut table = SuccessTable::new(&campaign.material);
            for &t in &campaign.targets_g {
                for _ in 0..attempts {
                    for o in ev.attempt(&campaign.policies, t)? {
                        table.record(size, o.policy, t, &campaign.tolerances, o.grasped_g)?;
                    }
                }
            }
            finish(&table, eval.out.as_deref())?;
        }
        Cmd::Sweep { eval, size, seed } => {
            eval.apply(&mut cfg);
            if !size.is_empty() {
                cfg.campaign.sizes = size;
            }
            if !seed.is_empty() {
                cfg.campaign.seeds = seed;
            }
            cfg.validate()?;
            let campaign = EvalCampaign::from_config(&cfg)?;
            match harness::run_campaign(&campaign, &cfg) {
                Ok(table) => finish(&table, eval.out.as_deref())?,
                Err(partial) => {
                    if !partial.table.is_empty() {
                        eprintln!("campaign stopped early; partial results follow");
                        finish(&partial.table, eval.out.as_deref())?;
                    }
                    return Err(partial.error);
                }
            }
        }
        Cmd::DumpConfig => print!("{}", cfg.dump()),
        Cmd::Report { input, out } => {
            let file = std::fs::File::open(&input).map_err(|_| Error::InvalidPath(input.clone()))?;
            let table = harness::read_csv(std::io::BufReader::new(file))?;
            let text = harness::render_text(&table);
            match out {
                Some(p) => std::fs::write(&p, &text).map_err(|_| Error::InvalidPath(p))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

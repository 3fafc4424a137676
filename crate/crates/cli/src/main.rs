//! `lengen` command line: dataset generation, complexity statistics,
//! training, evaluation, theory dynamics, and CSV export.

use clap::{Parser, Subcommand, ValueEnum};
use lengen::complexity::CascadeConvention;
use lengen::datagen::{dataset::write_dataset_file, dataset::DatasetHeader, dataset_stream, Vocab};
use lengen::harness::{
    self, default_out_dir, export_matrix_csv, export_metrics_csv, export_series_csv,
    ExperimentConfig, MetricsTable, TheoryExperimentConfig,
};
use lengen::model::{evaluate, Checkpoint, EvalMode};
use lengen::posenc::{export_slot_table, SlotTable};
use lengen::theory::{
    circulant_p, flow_integrate, FlowConfig, GramSeries, TheoryTask,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lengen", version, about = "Length-generalization laboratory")]
struct Cli {
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $LENGEN_OUT, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file (TOML); most verbs accept --preset instead.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a training dataset (JSONL) from a config or preset.
    Gen {
        #[arg(long)]
        preset: Option<String>,
        /// Override the config's train_samples.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Monte-Carlo complexity statistics, exported as CSV.
    Stats {
        #[arg(value_enum)]
        command: StatsCmd,
        /// Operand (or multiplicand) digit count.
        #[arg(long, default_value_t = 5)]
        digits: usize,
        #[arg(long, default_value_t = 1)]
        multiplier_len: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, value_enum, default_value_t = Convention::CountTrigger)]
        convention: Convention,
    },
    /// Train a model end to end and evaluate it at every configured length.
    Train {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a saved checkpoint at one operand length.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
    /// Linear-attention dynamics on the circular regression task.
    Theory {
        #[command(subcommand)]
        sub: TheoryCmd,
    },
    /// Re-export artifacts as CSV.
    Export {
        #[command(subcommand)]
        sub: ExportCmd,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsCmd {
    CascadeDist,
    MulDepDist,
    ComplexityHist,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    CountTrigger,
    TailOnly,
}

impl From<Convention> for CascadeConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::CountTrigger => CascadeConvention::CountTrigger,
            Convention::TailOnly => CascadeConvention::TailOnly,
        }
    }
}

#[derive(Subcommand)]
enum TheoryCmd {
    /// Population SGD on the expected loss (config or theory_n51 preset).
    Run {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Integrate the A-system gradient flow and export the trajectory.
    Flow {
        #[arg(long, default_value_t = 51)]
        n: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        w: usize,
        /// Initial diagonal value A_0(0).
        #[arg(long, default_value_t = 0.1)]
        a0: f64,
        #[arg(long, default_value_t = 2.0)]
        horizon: f64,
    },
    /// Embed a gram series as an explicit P matrix and export both.
    Gram {
        #[arg(long, default_value_t = 51)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        a0: f64,
        /// Shared off-diagonal value.
        #[arg(long, default_value_t = 0.0)]
        off: f64,
    },
}

#[derive(Subcommand)]
enum ExportCmd {
    /// Metrics table (JSON) to CSV.
    Metrics {
        #[arg(long)]
        table: PathBuf,
    },
    /// Learned PE slot tables of a checkpoint, one CSV per head.
    Slots {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> lengen::Result<()> {
    let Cli {
        seed,
        out,
        config,
        cmd,
    } = cli;
    let out = out.unwrap_or_else(default_out_dir);
    std::fs::create_dir_all(&out)?;
    match cmd {
        Cmd::Gen { preset, count } => {
            let mut cfg = load_experiment(&config, seed, preset.as_deref())?;
            if let Some(c) = count {
                cfg.train_samples = c;
            }
            let seed = harness::stage_seed(cfg.seed, "datagen");
            let mut sampler = cfg.sampler.clone();
            sampler.seed = seed;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let samples: Vec<_> =
                dataset_stream(&cfg.domain, &sampler, cfg.train_samples, &mut rng)
                    .collect::<lengen::Result<_>>()
                    .map_err(|e| e.in_stage("datagen"))?;
            let header =
                DatasetHeader::new(Vocab::arithmetic(), Some(cfg.domain.clone()), Some(sampler));
            let path = out.join(format!("{}.jsonl", cfg.name));
            write_dataset_file(&path, &header, &samples).map_err(|e| e.in_stage("datagen"))?;
            println!("wrote {} samples to {}", samples.len(), path.display());
        }
        Cmd::Stats {
            command,
            digits,
            multiplier_len,
            samples,
            convention,
        } => {
            let seed = seed.unwrap_or(0);
            let (hist, name) = match command {
                StatsCmd::CascadeDist | StatsCmd::ComplexityHist => (
                    harness::cascade_dist(digits, samples, convention.into(), seed),
                    "cascade_dist",
                ),
                StatsCmd::MulDepDist => (
                    harness::mul_dep_dist(multiplier_len, digits, samples, seed),
                    "mul_dep_dist",
                ),
            };
            let path = out.join(format!("{name}.csv"));
            hist.export_csv(std::fs::File::create(&path)?)?;
            for (&k, &v) in &hist.counts {
                println!("{k}\t{v}\t{:.6e}", v as f64 / hist.total as f64);
            }
            println!("wrote {}", path.display());
        }
        Cmd::Train { preset } => {
            let cfg = load_experiment(&config, seed, preset.as_deref())?;
            let (table, artifacts) = harness::run_experiment(&cfg, Some(&out))?;
            println!("best checkpoint: {}", artifacts.best_id);
            for r in table.rows.iter().filter(|r| r.metric == "exact_match") {
                println!("length {}: exact match {:.4}", r.key, r.value);
            }
        }
        Cmd::Eval {
            checkpoint,
            preset,
            length,
            samples,
        } => {
            let cfg = load_experiment(&config, seed, preset.as_deref())?;
            let ckpt = Checkpoint::load(&checkpoint).map_err(|e| e.in_stage("eval"))?;
            let (params, _) = ckpt.into_parameters().map_err(|e| e.in_stage("eval"))?;
            let seed = harness::stage_seed(cfg.seed, "eval") ^ length as u64;
            let set = harness::eval_set(&cfg.domain, length, samples, seed)
                .map_err(|e| e.in_stage("eval"))?;
            let report =
                evaluate(&params, &set, EvalMode::Exact).map_err(|e| e.in_stage("eval"))?;
            println!(
                "length {length}: exact match {:.4} over {} samples",
                report.exact_match, report.samples
            );
        }
        Cmd::Theory { sub } => run_theory(seed, &config, sub, &out)?,
        Cmd::Export { sub } => match sub {
            ExportCmd::Metrics { table } => {
                let text = std::fs::read_to_string(&table)?;
                let parsed: MetricsTable = serde_json::from_str(&text)
                    .map_err(|e| lengen::Error::Parse(e.to_string()))?;
                let path = out.join("metrics.csv");
                export_metrics_csv(&parsed, std::fs::File::create(&path)?)?;
                println!("wrote {}", path.display());
            }
            ExportCmd::Slots { checkpoint } => {
                let ckpt = Checkpoint::load(&checkpoint)?;
                let (params, _) = ckpt.into_parameters()?;
                let scheme = params.config.pe.clone();
                for h in 0..params.config.heads {
                    let table = SlotTable {
                        vectors: params.seg2(&format!("pe_slots.h{h}")).to_owned(),
                        trainable: true,
                    };
                    let path = out.join(format!("pe_slots_h{h}.csv"));
                    export_slot_table(std::fs::File::create(&path)?, &scheme, &table)?;
                    println!("wrote {}", path.display());
                }
            }
        },
    }
    Ok(())
}

fn load_experiment(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    preset: Option<&str>,
) -> lengen::Result<ExperimentConfig> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => Err(lengen::Error::InvalidConfig(
            "pass --config or --preset".into(),
        )),
    }
    .map_err(|e| e.in_stage("config"))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_theory(
    seed: Option<u64>,
    config: &Option<PathBuf>,
    sub: TheoryCmd,
    out: &std::path::Path,
) -> lengen::Result<()> {
    match sub {
        TheoryCmd::Run { preset } => {
            let mut cfg = match (config, preset.as_deref()) {
                (Some(path), _) => TheoryExperimentConfig::load(path),
                (None, Some(name)) => TheoryExperimentConfig::preset(name),
                (None, None) => TheoryExperimentConfig::preset("theory_n51"),
            }
            .map_err(|e| e.in_stage("config"))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let (table, outcome) = harness::run_theory_experiment(&cfg, Some(out))?;
            let last = outcome.log.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
            println!(
                "{} rows; final training loss {last:.6e}",
                table.rows.len()
            );
        }
        TheoryCmd::Flow {
            n,
            alpha,
            beta,
            w,
            a0,
            horizon,
        } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.unwrap_or(0));
            let task = TheoryTask::new(n, n, 2 * n, alpha, vec![beta], w, &mut rng)
                .map_err(|e| e.in_stage("config"))?;
            let init = GramSeries::two_level(n, a0, 0.0);
            let flow = FlowConfig::for_task(&task, horizon);
            let traj = flow_integrate(&init, &task, &flow).map_err(|e| e.in_stage("flow"))?;
            let names: Vec<String> = (0..=n / 2).map(|j| format!("A{j}")).collect();
            let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let rows: Vec<(f64, Vec<f64>)> = traj
                .times
                .iter()
                .zip(&traj.states)
                .map(|(&t, a)| (t, a.clone()))
                .collect();
            let path = out.join("flow_trajectory.csv");
            export_series_csv(std::fs::File::create(&path)?, "t", &name_refs, &rows)?;
            println!(
                "integrated {} steps; A_0({horizon}) = {:.6}; wrote {}",
                flow.steps,
                traj.states.last().unwrap()[0],
                path.display()
            );
        }
        TheoryCmd::Gram { n, d, a0, off } => {
            let series = GramSeries::two_level(n, a0, off);
            let p = circulant_p(&series, d).map_err(|e| e.in_stage("gram"))?;
            let gram = p.dot(&p.t());
            let p_path = out.join("p_matrix.csv");
            let g_path = out.join("gram.csv");
            export_matrix_csv(std::fs::File::create(&p_path)?, &p)?;
            export_matrix_csv(std::fs::File::create(&g_path)?, &gram)?;
            println!(
                "gram deviation {:.3e}; wrote {} and {}",
                lengen::theory::gram_deviation(&p),
                p_path.display(),
                g_path.display()
            );
        }
    }
    Ok(())
}

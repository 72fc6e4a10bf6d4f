use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sqil::config::ExperimentConfig;
use sqil::envs::{EnvId, ObsMode};
use sqil::pipeline;
use sqil::qkernels::{bench, format_reports, BenchConfig};
use sqil::training::{Arm, Discrepancy};
use sqil::{Error, Result};

#[derive(Parser)]
#[command(name = "sqil", version, about = "Quantized imitation learning experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    env: Option<EnvId>,
    #[arg(long, global = true)]
    obs_mode: Option<ObsMode>,
    /// Sets the data, training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Weight and activation bit width.
    #[arg(long, global = true)]
    bits: Option<u32>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate expert demonstrations.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the full-precision behaviour-cloning policy.
    TrainFp {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Round-to-nearest post-training quantization of the FP policy.
    Ptq,
    /// Train a quantized arm (qat, qrd or sqil).
    Train {
        arm: Arm,
        #[arg(long)]
        beta: Option<f64>,
        /// Fraction of timesteps flagged as important.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        discrepancy: Option<Discrepancy>,
    },
    /// Compute and cache state-importance scores of the FP policy.
    Sis {
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Success rate of one or more arms.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "fp")]
        arms: Vec<Arm>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Per-timestep action discrepancy against the FP policy.
    Discrepancy {
        #[arg(long, default_value = "ptq")]
        arm: Arm,
        /// Also write an SVG plot.
        #[arg(long)]
        plots: bool,
    },
    /// Saliency-map divergence from the FP policy.
    SaliencyDiv {
        #[arg(long, default_value = "ptq")]
        arm: Arm,
    },
    /// Time the integer GEMM kernels against a naive f32 GEMM.
    BenchKernels {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Wall-time cap per case in seconds.
        #[arg(long)]
        max_seconds: Option<f64>,
        /// Worker threads for the integer kernels (1 = single-threaded).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Table of success, discrepancy and saliency divergence per arm.
    Report {
        #[arg(long, value_delimiter = ',', default_value = "fp,ptq,qat,sqil")]
        arms: Vec<Arm>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = c.env {
        cfg.env = e;
    }
    if let Some(m) = c.obs_mode {
        cfg.obs_mode = m;
    }
    if let Some(s) = c.seed {
        cfg.data.seed = s;
        cfg.fp.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(b) = c.bits {
        cfg.quant.bits = b;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::GenData { episodes } => {
            if let Some(n) = episodes {
                cfg.data.episodes = n;
            }
            cfg.validate()?;
            let ds = pipeline::gen_data(&cfg)?;
            writeln!(
                stdout,
                "wrote {} ({} episodes, {} steps)",
                cfg.dataset_path().display(),
                ds.trajectories.len(),
                ds.total_steps()
            )?;
        }
        Cmd::TrainFp { steps, lr } => {
            if let Some(s) = steps {
                cfg.fp.steps = s;
            }
            if let Some(l) = lr {
                cfg.fp.lr = l;
            }
            cfg.validate()?;
            pipeline::train_fp(&cfg)?;
            writeln!(stdout, "wrote {}", cfg.checkpoint_path(Arm::Fp).display())?;
        }
        Cmd::Ptq => {
            cfg.validate()?;
            pipeline::ptq(&cfg)?;
            writeln!(stdout, "wrote {}", cfg.checkpoint_path(Arm::Ptq).display())?;
        }
        Cmd::Train {
            arm,
            beta,
            p,
            steps,
            lr,
            discrepancy,
        } => {
            if let Some(b) = beta {
                cfg.train.beta = b;
            }
            if let Some(p) = p {
                cfg.train.top_p = p;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(d) = discrepancy {
                cfg.train.discrepancy = d;
            }
            cfg.validate()?;
            pipeline::train(&cfg, arm)?;
            writeln!(stdout, "wrote {}", cfg.checkpoint_path(arm).display())?;
        }
        Cmd::Sis { stride, p } => {
            if let Some(s) = stride {
                cfg.sis.frame_stride = s;
            }
            if let Some(p) = p {
                cfg.train.top_p = p;
            }
            cfg.validate()?;
            let t = pipeline::sis(&cfg)?;
            writeln!(
                stdout,
                "wrote {} ({} of {} timesteps flagged, threshold {:e})",
                cfg.sis_path().display(),
                t.flagged(),
                t.total(),
                t.threshold
            )?;
        }
        Cmd::Eval { arms, episodes, rounds } => {
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            if let Some(r) = rounds {
                cfg.eval.rounds = r;
            }
            cfg.validate()?;
            for arm in arms {
                let r = pipeline::eval(&cfg, arm)?;
                writeln!(
                    stdout,
                    "{:<5} success {:.1}% ± {:.1} over {} x {} episodes",
                    r.arm, r.success_rate, r.success_std, r.rounds, r.episodes
                )?;
            }
        }
        Cmd::Discrepancy { arm, plots } => {
            cfg.validate()?;
            let s = pipeline::discrepancy(&cfg, arm, plots)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&s).map_err(|e| Error::format(e.to_string()))?)?;
        }
        Cmd::SaliencyDiv { arm } => {
            cfg.validate()?;
            let d = pipeline::saliency_div(&cfg, arm)?;
            writeln!(stdout, "{arm} saliency divergence {d:.6}")?;
        }
        Cmd::BenchKernels {
            sizes,
            repeats,
            max_seconds,
            threads,
        } => {
            let mut bc = BenchConfig::default();
            if let Some(s) = sizes {
                bc.sizes = s;
            }
            if let Some(r) = repeats {
                bc.repeats = r;
            }
            if let Some(m) = max_seconds {
                bc.max_seconds_per_case = m;
            }
            if threads == 0 {
                return Err(Error::usage("--threads must be >= 1"));
            }
            bc.parallel = threads > 1;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::usage(e.to_string()))?;
            let reports = pool.install(|| bench(&bc))?;
            write!(stdout, "{}", format_reports(&reports))?;
        }
        Cmd::Report { arms, episodes } => {
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            cfg.validate()?;
            let rows = pipeline::report(&cfg, &arms)?;
            write!(stdout, "{}", pipeline::format_report(&rows))?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        sqil::Category::Usage => 2,
        sqil::Category::Numeric => 3,
        sqil::Category::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, rec| writeln!(buf, "{}: {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or(&msg)
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}

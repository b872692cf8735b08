use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use daff_pinn::config::TrainConfig;
use daff_pinn::eigen::{BcKind, GridSpec};
use daff_pinn::model::problem_grid;
use daff_pinn::harness::{
    cmd_eigs, cmd_explain, cmd_export, cmd_search, cmd_train, cmd_validate, load_summary, manifest_path, out_root,
    ExplainMode, RunManifest, SearchSpace, OUT_ENV,
};
use daff_pinn::{Error, ErrorCategory};

/// Physics-informed networks with domain-aware Fourier features.
#[derive(Parser)]
#[command(name = "daffpinn", version)]
struct Cli {
    /// Output root; falls back to the environment variable, then `./runs`.
    #[arg(long, global = true, env = OUT_ENV)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Random search over a TOML search space.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the space's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve for Laplace eigenmodes on a square lattice and write a mode file.
    Eigs {
        /// Training config whose problem domain the lattice should cover;
        /// without it the lattice spans `[0, side]^2`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        grid_n: usize,
        #[arg(long, default_value_t = 16)]
        modes: usize,
        #[arg(long, default_value = "dirichlet")]
        bc: BcKind,
        #[arg(long, default_value_t = 1.0)]
        side: f64,
    },
    /// Layer-wise relevance propagation over a run's best checkpoint.
    Explain {
        /// Run manifest or run directory.
        manifest: PathBuf,
        #[arg(long, default_value = "field")]
        mode: ExplainMode,
        #[arg(long, default_value_t = daff_pinn::lrp::DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 101)]
        grid_n: usize,
    },
    /// Validation-grid MSE and boundary maximum of a run.
    Validate {
        manifest: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid_n: usize,
    },
    /// Encoder bank, prediction grid and summary of a run.
    Export {
        manifest: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid_n: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Numerical => 3,
        ErrorCategory::Io => 4,
    }
}

fn run_dir_out(cli_out: Option<&Path>, manifest: &Path, sub: &str) -> PathBuf {
    match cli_out {
        Some(p) => p.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default().join(sub),
    }
}

fn run(cli: Cli) -> daff_pinn::Result<()> {
    let out_flag = cli.out_dir.as_deref();
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (path, m) = cmd_train(&cfg, config.parent(), &out_root(out_flag))?;
            let s = load_summary(&path)?;
            println!("run {}", m.run_id);
            println!("manifest {}", path.display());
            println!(
                "epochs {} stop {:?} best_validation {:e} final_validation {:e} wall {:.1}s",
                s.epochs_run, s.stop_reason, s.best_validation, s.final_validation, s.wall_time
            );
        }
        Command::Search { config, workers, seed } => {
            let mut space = SearchSpace::load(&config)?;
            if let Some(s) = seed {
                space.master_seed = s;
            }
            let out = out_root(out_flag).join(format!("search-{}", space.master_seed));
            let results = cmd_search(&space, config.parent(), &out, workers)?;
            print!("{}", daff_pinn::harness::ranking_csv(&space, &results));
            println!("ranking {}", out.join("ranking.csv").display());
        }
        Command::Eigs {
            config,
            grid_n,
            modes,
            bc,
            side,
        } => {
            let grid = match config {
                Some(p) => problem_grid(&TrainConfig::load(&p)?.problem, grid_n, bc)?,
                None => GridSpec::square(grid_n, side, bc)?,
            };
            let (path, file) = cmd_eigs(&grid, modes, &out_root(out_flag))?;
            for m in &file.modes {
                println!("mode {} lambda {:.12e}", m.index, m.eigenvalue);
            }
            println!("modes {}", path.display());
        }
        Command::Explain {
            manifest,
            mode,
            eps,
            threshold,
            grid_n,
        } => {
            let manifest = manifest_path(&manifest);
            let out = run_dir_out(out_flag, &manifest, "explain");
            let (report, files) = cmd_explain(&manifest, mode, eps, threshold, grid_n, &out)?;
            let s = report.summary();
            println!("eps {:e} max_defect {:e} mean_defect {:e}", s.eps, s.max_defect, s.mean_defect);
            for g in &s.groups {
                println!("{} {:e}", g.key, g.mean_abs);
            }
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Validate { manifest, grid_n } => {
            let manifest = manifest_path(&manifest);
            let r = cmd_validate(&manifest, grid_n)?;
            println!(
                "grid_n {} mse {:e} boundary_max_abs {:e}",
                r.grid_n, r.mse, r.boundary_max_abs
            );
        }
        Command::Export { manifest, grid_n } => {
            let manifest = manifest_path(&manifest);
            RunManifest::load(&manifest)?.verify(manifest.parent().unwrap_or(Path::new(".")))?;
            let out = run_dir_out(out_flag, &manifest, "export");
            for f in cmd_export(&manifest, grid_n, &out)? {
                println!("wrote {}", f.display());
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
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line entry points: synthetic population generation, experiment
//! execution, metric computation, and plot-data emission.

use clap::{Parser, Subcommand};
use closure_bayes::bilevel::Runner;
use closure_bayes::config::RunConfig;
use closure_bayes::error::Error;
use closure_bayes::population::{gen_population, PopulationConfig, SystemPopulation};
use closure_bayes::{emit, metrics};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "closure-bayes",
    about = "Hierarchical Bayesian inference of ODE/PDE populations with learned neural closures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population from a run configuration.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// master seed override
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the joint inference/training loop on a generated population.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// population directory written by `gen`
        #[arg(long)]
        pop: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// forward model: solver | fno-sup | fno-phys | pinn
        #[arg(long)]
        forward: Option<String>,
        /// ablation: independent fixed priors, no population hyperparameters
        #[arg(long)]
        no_hierarchical: bool,
        /// checkpoint directory (resumable with --resume)
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// resume from a checkpoint file
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recompute metrics for a finished run directory.
    Metrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        pop: PathBuf,
    },
    /// Re-emit plot data (histograms, curves, fields) for a finished run.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        pop: PathBuf,
    },
    /// Run the built-in numerical property checks.
    Selftest,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn population_config(cfg: &RunConfig, seed: u64) -> Result<PopulationConfig, Error> {
    let mut pc = PopulationConfig::defaults(cfg.family()?, cfg.k_systems, seed);
    if cfg.n_side != 0 {
        pc.n_side = cfg.n_side;
    }
    if let Some(s) = cfg.sigma {
        pc.sigma = s;
    }
    if let Some(m) = &cfg.mu_gt {
        pc.mu_gt = m.clone();
    }
    if let Some(t) = &cfg.tau_gt {
        pc.tau_gt = t.clone();
    }
    Ok(pc)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CLOSURE_BAYES_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let pc = population_config(&cfg, seed.unwrap_or(cfg.seed))?;
            let pop = gen_population(&pc)?;
            pop.save(&out)?;
            println!(
                "generated {} {} systems into {}",
                pc.k_systems,
                cfg.experiment,
                out.display()
            );
            Ok(())
        }
        Command::Run {
            config,
            pop,
            out,
            seed,
            forward,
            no_hierarchical,
            checkpoints,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = forward {
                cfg.forward = f;
            }
            if no_hierarchical {
                cfg.hierarchical = false;
            }
            cfg.validate()?;
            let population = SystemPopulation::load(&pop)?;
            let runner = Runner {
                cfg: &cfg,
                pop: &population,
                checkpoint_dir: checkpoints.as_deref(),
            };
            let artifacts = match &resume {
                Some(path) => runner.resume(path)?,
                None => runner.run()?,
            };
            let m = metrics::compute_metrics(&artifacts, &population)?;
            emit::save_run(&out, &cfg, &artifacts, &population, Some(&m))?;
            println!(
                "run complete: mean MSE {:.4e}, coverage {:.1}%, closure MSE {:.4e}{}",
                m.mean_mse,
                m.coverage_pct,
                m.closure_mse,
                m.surrogate_mse
                    .map(|s| format!(", surrogate MSE {s:.4e}"))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Metrics { run, pop } => {
            let (_cfg, artifacts) = emit::load_run(&run)?;
            let population = SystemPopulation::load(&pop)?;
            let m = metrics::compute_metrics(&artifacts, &population)?;
            std::fs::write(
                run.join("metrics.json"),
                serde_json::to_string_pretty(&m).map_err(Error::from)?,
            )?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
            Ok(())
        }
        Command::Plotdata { run, pop } => {
            let (cfg, artifacts) = emit::load_run(&run)?;
            let population = SystemPopulation::load(&pop)?;
            let m = metrics::compute_metrics(&artifacts, &population).ok();
            emit::save_run(&run, &cfg, &artifacts, &population, m.as_ref())?;
            println!("plot data written to {}", run.display());
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

/// Quick numerical property checks; exits nonzero on any failure.
fn selftest() -> Result<(), Error> {
    use closure_bayes::closure::ClosureFn;
    use closure_bayes::nn::{mlp, Activation, MlpParams};
    use closure_bayes::solvers::mass_damper::{leapfrog_solve, MassDamperSpec};
    use closure_bayes::StreamRng;

    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // gradient of a small MLP against finite differences
    {
        let mut rng = StreamRng::new(1);
        let net = MlpParams::init(&[2, 8, 1], Activation::SiLU, &mut rng);
        let xs = [0.3, -0.7, 1.1, 0.4];
        let ws = [1.0, -0.5];
        let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
        let g = mlp::backprop(&net.widths, net.activation, &net.params, &cache, &ws);
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for j in 0..net.params.len() {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let f = |n: &MlpParams| -> f64 {
                let c = mlp::forward_cached(&n.widths, n.activation, &n.params, &xs);
                c.acts.last().unwrap().iter().zip(&ws).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst = worst.max((g.params[j] - fd).abs() / fd.abs().max(1e-3));
        }
        check("mlp-gradient-finite-difference", worst < 1e-4);
    }

    // fft roundtrip
    {
        let plan = closure_bayes::fft::FftPlan::new(16);
        let mut rng = StreamRng::new(2);
        let x: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; 16];
        plan.forward(&mut re, &mut im);
        plan.inverse(&mut re, &mut im);
        let ok = x.iter().zip(&re).all(|(a, b)| (a - b).abs() < 1e-12)
            && im.iter().all(|v| v.abs() < 1e-12);
        check("fft-roundtrip", ok);
    }

    // leapfrog second-order self-convergence
    {
        let gt = ClosureFn::Cubic { a: 0.08, b: 0.08 };
        let solve = |dt: f64| {
            let spec = MassDamperSpec {
                dt,
                ..MassDamperSpec::paper(5.0f64.ln(), 0.5, 2.0)
            };
            leapfrog_solve(&spec, &gt).unwrap().w
        };
        let a = solve(0.08);
        let b = solve(0.04);
        let c = solve(0.02);
        let d1: f64 = a
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - b[2 * i]).abs())
            .fold(0.0, f64::max);
        let d2: f64 = b
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - c[2 * i]).abs())
            .fold(0.0, f64::max);
        let ratio = d1 / d2;
        check("leapfrog-second-order", (3.0..=5.0).contains(&ratio));
    }

    // adam zero-gradient fixed point
    {
        let mut adam = closure_bayes::nn::AdamState::new(2, 0.1);
        let mut p = vec![0.5, -0.5];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        let before = p.clone();
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        check("adam-zero-grad-fixed-point", p == before);
    }

    // counter-based rng reproducibility
    {
        let a: Vec<u64> = {
            let mut r = StreamRng::new(7).named("x", &[1]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = StreamRng::new(7).named("x", &[1]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        check("rng-reproducible", a == b);
    }

    if failures > 0 {
        Err(Error::NonFinite(format!("{failures} selftest checks failed")))
    } else {
        println!("all selftest checks passed");
        Ok(())
    }
}

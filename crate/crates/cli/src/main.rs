use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use packstate::app_io::{
    load_config, read_json, read_sim_csv, write_json, write_profile_csv, write_sim_csv, GainFile,
    Overrides, RunConfig, SeriesKind,
};
use packstate::{
    certify_gain, check_c_observability, check_smooth_observability, check_solvability,
    consistent_init, estimate, find_least_orders, linearize, ocv_self_test, rms_error, search_gain,
    simulate, Error, PackState, Result,
};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "packstate",
    version,
    about = "Parallel-series battery pack SOC toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override scenario.dt (s).
    #[arg(long)]
    dt: Option<f64>,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the relative rank-tolerance factor.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the plant and write truth.csv.
    Simulate(Common),
    /// Run plant and observer (or replay a measurement CSV) and report RMS errors.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Truth CSV to replay instead of simulating the plant.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Start of the RMS window (s).
        #[arg(long, default_value_t = 600.0)]
        rms_after: f64,
    },
    /// Linearized, solvability and smooth-observability reports.
    Observability {
        #[command(flatten)]
        common: Common,
        /// Search for the least smooth-observability orders.
        #[arg(long)]
        least_orders: bool,
    },
    /// Certify the configured gain (exit 3 when the verdict is false).
    CertifyGain {
        #[command(flatten)]
        common: Common,
        /// Gain file overriding the configured gain.
        #[arg(long)]
        gain: Option<PathBuf>,
        /// Multiply the gain by this factor.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Randomized search for a certifiable gain (exit 3 when none is found).
    SearchGain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Compare OCV derivatives with finite differences.
    OcvCheck(Common),
}

struct Outcome {
    verdict: bool,
}

fn prepare(common: &Common) -> Result<RunConfig> {
    let mut config = load_config(&common.config)?;
    config.apply_overrides(&Overrides {
        dt: common.dt,
        seed: common.seed,
        tolerance: common.tolerance,
    })?;
    std::fs::create_dir_all(&common.out_dir).map_err(|e| Error::Io {
        path: common.out_dir.display().to_string(),
        source: e,
    })?;
    let echo = common.out_dir.join("config.normalized.json");
    std::fs::write(&echo, config.to_json() + "\n").map_err(|e| Error::Io {
        path: echo.display().to_string(),
        source: e,
    })?;
    Ok(config)
}

fn out(common: &Common, name: &str) -> PathBuf {
    common.out_dir.join(name)
}

fn run_simulate(common: &Common) -> Result<Outcome> {
    let config = prepare(common)?;
    let system = config.system()?;
    let profile = config.profile()?;
    write_profile_csv(&out(common, "profile.csv"), &profile)?;
    let s = &config.scenario;
    let run = simulate(
        &system,
        &config.initial_state(),
        &profile,
        s.dt,
        s.horizon,
        s.integrator,
    )?;
    write_sim_csv(&out(common, "truth.csv"), &run, SeriesKind::Truth)?;
    let max_resid = run.residuals.iter().copied().fold(0.0, f64::max);
    println!(
        "simulated {} steps, max Kirchhoff residual {max_resid:e}",
        run.times.len() - 1
    );
    Ok(Outcome { verdict: true })
}

fn run_estimate(common: &Common, measurements: Option<&Path>, rms_after: f64) -> Result<Outcome> {
    let config = prepare(common)?;
    let system = config.system()?;
    let gain = config.gain()?;
    let profile = config.profile()?;
    let truth = match measurements {
        Some(path) => read_sim_csv(path)?.0,
        None => {
            let s = &config.scenario;
            let run = simulate(
                &system,
                &config.initial_state(),
                &profile,
                s.dt,
                s.horizon,
                s.integrator,
            )?;
            write_sim_csv(&out(common, "truth.csv"), &run, SeriesKind::Truth)?;
            run
        }
    };
    let est = estimate(
        &system,
        &gain,
        &truth,
        &profile,
        &config.estimate_initial_state(),
    )?;
    write_sim_csv(
        &out(common, "estimate.csv"),
        &est.estimate,
        SeriesKind::Estimate,
    )?;
    let rms = rms_error(&truth, &est.estimate, rms_after)?;
    write_json(
        &out(common, "rms.json"),
        &json!({
            "rms": rms,
            "clamp_events": est.clamp_events,
            "labels": truth.labels,
        }),
    )?;
    for (k, label) in truth.labels.iter().enumerate() {
        println!(
            "cell {label}: SOC RMS {:.4}%  current RMS {:.4e} A",
            100.0 * rms.soc[k],
            rms.current[k]
        );
    }
    if est.clamp_events > 0 {
        println!("SOC clamp events: {}", est.clamp_events);
    }
    Ok(Outcome { verdict: true })
}

fn run_observability(common: &Common, least_orders: bool) -> Result<Outcome> {
    let config = prepare(common)?;
    let system = config.system()?;
    let opts = config.analysis_options();
    let point = config.analysis_point()?;
    let a = &config.analysis;

    let current = point.input[0];
    let u = consistent_init(&system, &point.s0, current)?;
    let x_bar = PackState {
        s: point.s0.clone(),
        u,
    };
    let (t, c) = linearize(&system, &x_bar)?;
    let linear = check_c_observability(&system.e, &t, &c, opts.tolerance)?;
    let solvability = check_solvability(&system, &point, a.gamma_max, &opts)?;
    let smooth = if least_orders {
        let (orders, report) = find_least_orders(&system, &point, a.gamma_max, a.delta_max, &opts)?;
        match orders {
            Some((g, d)) => println!("least orders: gamma = {g}, delta = {d}"),
            None => println!(
                "not smoothly observable up to gamma = {}, delta = {}",
                a.gamma_max, a.delta_max
            ),
        }
        report
    } else {
        check_smooth_observability(&system, &point, a.gamma_max, a.delta_max, &opts)?
    };
    println!("C-observable (linearized): {}", linear.verdict);
    match solvability.least_gamma {
        Some(g) => println!("differentiation index: {g}"),
        None => println!("solvability fails up to gamma = {}", a.gamma_max),
    }
    println!("smoothly observable: {}", smooth.verdict);
    write_json(
        &out(common, "observability.json"),
        &json!({
            "seed": opts.seed,
            "tolerance": opts.tolerance,
            "linearized": linear,
            "solvability": solvability,
            "smooth": smooth,
        }),
    )?;
    Ok(Outcome { verdict: true })
}

fn run_certify(common: &Common, gain_path: Option<&Path>, scale: f64) -> Result<Outcome> {
    let config = prepare(common)?;
    let system = config.system()?;
    let gain = match gain_path {
        Some(p) => read_json::<GainFile>(p)?.to_gain()?,
        None => config.gain()?,
    }
    .scaled(scale);
    let cert = certify_gain(
        &system,
        &gain,
        &config.lipschitz_region()?,
        &config.certify_options()?,
    )?;
    write_json(&out(common, "certificate.json"), &cert)?;
    println!("verdict: {}", cert.verdict);
    for f in &cert.failures {
        println!("  {f}");
    }
    Ok(Outcome {
        verdict: cert.verdict,
    })
}

fn run_search(common: &Common, budget: Option<usize>) -> Result<Outcome> {
    let config = prepare(common)?;
    let system = config.system()?;
    let obs = config.observer_section()?;
    let budget = budget.unwrap_or(obs.budget);
    let warm = config.gain().ok();
    let found = search_gain(
        &system,
        &config.lipschitz_region()?,
        &config.certify_options()?,
        &obs.ranges,
        obs.seed,
        budget,
        warm.as_ref(),
    )?;
    let (gain, cert) = match &found {
        Some((k, c)) => (Some(GainFile::from_gain(k)), Some(c)),
        None => (None, None),
    };
    write_json(
        &out(common, "search.json"),
        &json!({
            "seed": obs.seed,
            "budget": budget,
            "ranges": obs.ranges,
            "found": found.is_some(),
            "gain": gain,
            "certificate": cert,
        }),
    )?;
    if let Some(g) = &gain {
        write_json(&out(common, "gain.json"), g)?;
        println!("certified gain found");
    } else {
        println!("no certified gain within {budget} candidates");
    }
    Ok(Outcome {
        verdict: found.is_some(),
    })
}

fn run_ocv_check(common: &Common) -> Result<Outcome> {
    let config = prepare(common)?;
    let check = ocv_self_test(&config.pack.ocv, 50, 1e-6);
    write_json(&out(common, "ocv_check.json"), &check)?;
    for (k, e) in check.max_rel_error.iter().enumerate() {
        println!("order {}: max relative error {e:e}", k + 1);
    }
    Ok(Outcome {
        verdict: check.passed,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => run_simulate(c),
        Command::Estimate {
            common,
            measurements,
            rms_after,
        } => run_estimate(common, measurements.as_deref(), *rms_after),
        Command::Observability {
            common,
            least_orders,
        } => run_observability(common, *least_orders),
        Command::CertifyGain {
            common,
            gain,
            scale,
        } => run_certify(common, gain.as_deref(), *scale),
        Command::SearchGain { common, budget } => run_search(common, *budget),
        Command::OcvCheck(c) => run_ocv_check(c),
    };
    match result {
        Ok(o) if o.verdict => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

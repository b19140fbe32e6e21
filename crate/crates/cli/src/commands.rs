use std::io::Write;
use std::path::Path;
use std::time::Instant;

use reml_core::infomat::{average_information_fast, derivative_bundle, score_fast};
use reml_core::likelihood::{loglik_all_routes, loglik_via_c};
use reml_core::linalg::io::write_matrix_market;
use reml_core::linalg::DENSE_ORACLE_CAP;
use reml_core::mme::assemble;
use reml_core::optimizer::{default_start, fit_with_observer, IterationRecord};
use reml_core::simulate::SimulationPlan;
use reml_core::{ThetaVector, Vector};

use crate::cli::{Cli, Command, EvalArgs, FitArgs, SchemaArgs, SimulateArgs, Values};
use crate::error::{exit, CliError, Result};
use crate::ingest::{ingest, Ingested};
use crate::report::*;
use crate::schema::report_schema;
use crate::verify::verify;

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(a) => fit_command(&a),
        Command::Loglik(a) => loglik_command(&a),
        Command::Info(a) => info_command(&a),
        Command::Simulate(a) => simulate_command(&a),
        Command::Verify(a) => verify_command(&a),
        Command::Schema(a) => schema_command(&a),
    }
}

fn theta_or_start(m: &Ingested, theta: &Option<Values>) -> Result<ThetaVector> {
    let t = match theta {
        Some(v) => m.spec.theta_from_slice(&v.0)?,
        None => default_start(&m.spec)?,
    };
    m.spec.check_admissible(&t)?;
    Ok(t)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn fit_command(args: &FitArgs) -> Result<u8> {
    let start = Instant::now();
    let m = ingest(&args.inputs.data, &args.inputs.model)?;
    let mut options = m.config.options.clone();
    if let Some(a) = args.algorithm {
        options.algorithm = a;
    }
    if let Some(t) = &args.theta {
        options.initial = Some(t.0.clone());
    }
    let mut trace = args.trace.as_deref().map(create).transpose()?;
    let mut trace_err = None;
    let verbose = args.verbose;
    let mut observer = |r: &IterationRecord| {
        if verbose {
            eprintln!(
                "iter {:>3}  loglik {:.10}  |score| {:.3e}  step {}",
                r.iteration, r.loglik, r.score_norm, r.step_scale
            );
        }
        if let Some(w) = trace.as_mut() {
            let line = serde_json::to_string(r).expect("records serialize");
            if let Err(e) = writeln!(w, "{line}") {
                trace_err.get_or_insert(e);
            }
        }
    };
    let report = fit_with_observer(&m.spec, &options, &mut observer)?;
    if let (Some(path), Some(w)) = (&args.trace, trace.as_mut()) {
        if let Some(e) = trace_err.take().or_else(|| w.flush().err()) {
            return Err(CliError::io(path, e));
        }
    }

    let sys = assemble(&m.spec, &report.theta)?;
    let sol = sys.solve()?;
    let cxx = sys.c_inverse_blocks()?.xx;
    let fixed_effects = m
        .fixed_columns
        .iter()
        .enumerate()
        .map(|(j, name)| FixedEffect {
            name: name.clone(),
            estimate: sol.tau_hat[j],
            standard_error: (report.theta.sigma2 * cxx[(j, j)]).sqrt(),
        })
        .collect();
    if let Some(path) = &args.dump_c {
        write_atomic(path, write_matrix_market(sys.c()).as_bytes())?;
    }
    let converged = report.converged;
    let out = FitOutput {
        schema_version: SCHEMA_VERSION,
        kind: "fit",
        model: ModelSummary::of(&m),
        fit: report,
        fixed_effects,
        timing: Timing {
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
    };
    emit(args.out.as_deref(), &to_json(&out))?;
    Ok(if converged { exit::CONVERGED } else { exit::NOT_CONVERGED })
}

pub fn loglik_command(args: &EvalArgs) -> Result<u8> {
    let m = ingest(&args.inputs.data, &args.inputs.model)?;
    let theta = theta_or_start(&m, &args.theta)?;
    let routes = loglik_all_routes(&m.spec, &theta)?;
    let reference = loglik_via_c(&m.spec, &theta)?.value;
    let max_route_difference = routes
        .iter()
        .fold(0.0_f64, |d, r| d.max((r.value - reference).abs()));
    let out = LoglikOutput {
        schema_version: SCHEMA_VERSION,
        kind: "loglik",
        model: ModelSummary::of(&m),
        theta: theta.to_vec(),
        routes,
        max_route_difference,
    };
    emit(args.out.as_deref(), &to_json(&out))?;
    Ok(exit::CONVERGED)
}

pub fn info_command(args: &EvalArgs) -> Result<u8> {
    let m = ingest(&args.inputs.data, &args.inputs.model)?;
    let theta = theta_or_start(&m, &args.theta)?;
    let dense = if m.spec.n() <= DENSE_ORACLE_CAP {
        Some(derivative_bundle(&m.spec, &theta)?)
    } else {
        None
    };
    let out = InfoOutput {
        schema_version: SCHEMA_VERSION,
        kind: "info",
        model: ModelSummary::of(&m),
        theta: theta.to_vec(),
        loglik: loglik_via_c(&m.spec, &theta)?.value,
        score: score_fast(&m.spec, &theta)?,
        average: average_information_fast(&m.spec, &theta)?,
        dense,
    };
    emit(args.out.as_deref(), &to_json(&out))?;
    Ok(exit::CONVERGED)
}

pub fn simulate_command(args: &SimulateArgs) -> Result<u8> {
    let m = ingest(&args.inputs.data, &args.inputs.model)?;
    let theta = m.spec.theta_from_slice(&args.theta.0)?;
    let tau = match &args.tau {
        Some(t) => Vector::from_column_slice(&t.0),
        None => Vector::zeros(m.spec.p()),
    };
    let plan = SimulationPlan::new(m.spec.clone(), theta.clone(), tau.clone(), args.replicates, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let width = (args.replicates - 1).to_string().len().max(3);
    let files: Vec<String> = (0..args.replicates)
        .map(|r| format!("replicate_{r:0width$}.csv"))
        .collect();
    plan.par_map(|r, y| Ok((r, y)))?
        .into_iter()
        .try_for_each(|(r, y)| -> Result<()> {
            let mut buf = Vec::new();
            m.table.write_with(&mut buf, &m.config.response, y.as_slice())?;
            write_atomic(&args.out.join(&files[r]), &buf)
        })?;
    let out = SimulateOutput {
        schema_version: SCHEMA_VERSION,
        kind: "simulate",
        model: ModelSummary::of(&m),
        theta: theta.to_vec(),
        tau: tau.iter().copied().collect(),
        replicates: args.replicates,
        seed: args.seed,
        files,
    };
    write_atomic(&args.out.join("truth.json"), to_json(&out).as_bytes())?;
    Ok(exit::CONVERGED)
}

pub fn verify_command(args: &EvalArgs) -> Result<u8> {
    let m = ingest(&args.inputs.data, &args.inputs.model)?;
    let theta = theta_or_start(&m, &args.theta)?;
    let report = verify(&m.spec, &theta)?;
    emit(args.out.as_deref(), &to_json(&report))?;
    Ok(if report.passed {
        exit::CONVERGED
    } else {
        exit::NUMERICAL_FAILURE
    })
}

pub fn schema_command(args: &SchemaArgs) -> Result<u8> {
    emit(args.out.as_deref(), &to_json(&report_schema()))?;
    Ok(exit::CONVERGED)
}

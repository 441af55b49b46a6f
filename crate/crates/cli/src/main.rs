//! Command-line front end for the dsm-cbf filter: closed-loop simulation,
//! randomized verification suites, and one-shot diagnostics (sensitivity
//! integration, single-QP dumps).
//!
//! Exit codes: 0 success, 1 usage or input errors, 2 safety violation or
//! failed verification suite, 3 initial condition outside the safe set.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsm_cbf::{
    build_plant, integrate_flow, nominal_targets, benchmark_scenario, run_suite, simulate, solve,
    Error, SafetyFilter, Scenario,
};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "dsm-cbf",
    version,
    about = "Trajectory-based dynamic safety margin filter for prestabilized systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario and write the per-tick trace as CSV.
    Simulate(CommonArgs),
    /// Run randomized verification suites and write a JSON report.
    Verify {
        #[command(flatten)]
        args: CommonArgs,
        /// One of: qp, sensitivity, invariance, all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Integrate the backup flow and its sensitivities once, from the
    /// scenario's initial condition, and write them per grid point as CSV.
    SensitivityCheck(CommonArgs),
    /// Assemble and solve the filter QP at the scenario's initial condition
    /// and write problem and solution as JSON.
    DumpQp(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario JSON file; the built-in cart-pendulum benchmark when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output file (default: trace.csv, verify-report.json, sensitivity.csv,
    /// or qp.json depending on the subcommand).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the randomized suites.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario overrides as dotted paths, e.g. --set t_end=20,
    /// --set filter.T=8, --set x0.1=3.2. Values parse as JSON, falling back
    /// to strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// A terminating failure: message (printed to stderr when nonempty) plus
/// process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn silent(code: u8) -> Self {
        Failure { code, message: String::new() }
    }
}

fn core_failure(e: Error) -> Failure {
    let code = match e {
        Error::StartupInfeasible { .. } => 3,
        _ => 1,
    };
    Failure { code, message: e.to_string() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Verify { args, suite } => cmd_verify(&args, &suite),
        Command::SensitivityCheck(args) => cmd_sensitivity(&args),
        Command::DumpQp(args) => cmd_dump_qp(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario loading and overrides.
// ---------------------------------------------------------------------------

fn load_scenario(args: &CommonArgs) -> Result<Scenario, Failure> {
    let mut doc: Value = match &args.scenario {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                Failure::usage(format!(
                    "{}: parse error at line {}, column {}: {e}",
                    path.display(),
                    e.line(),
                    e.column()
                ))
            })?
        }
        None => serde_json::to_value(benchmark_scenario()).expect("builtin scenario serializes"),
    };
    for assignment in &args.set {
        apply_override(&mut doc, assignment).map_err(Failure::usage)?;
    }
    serde_json::from_value(doc).map_err(|e| Failure::usage(format!("invalid scenario: {e}")))
}

/// Set `doc[path] = value` for a dotted path; array segments are indices.
/// Missing intermediate object keys are created, so overrides can introduce
/// optional sections like `params`.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set {assignment:?} is not of the form KEY=VALUE"))?;
    if path.is_empty() {
        return Err(format!("--set {assignment:?} has an empty key"));
    }
    let leaf: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));

    let parts: Vec<&str> = path.split('.').collect();
    let (last, init) = parts.split_last().expect("split produced at least one part");
    let mut cur = doc;
    for part in init {
        cur = match cur {
            Value::Object(map) => {
                let entry = map.entry(part.to_string()).or_insert(Value::Null);
                if entry.is_null() {
                    *entry = Value::Object(Default::default());
                }
                entry
            }
            Value::Array(arr) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("--set {assignment:?}: {part:?} is not an array index"))?;
                let len = arr.len();
                arr.get_mut(idx).ok_or_else(|| {
                    format!("--set {assignment:?}: index {idx} out of range (length {len})")
                })?
            }
            _ => return Err(format!("--set {assignment:?}: {part:?} descends into a scalar")),
        };
    }
    match cur {
        Value::Object(map) => {
            map.insert(last.to_string(), leaf);
        }
        Value::Array(arr) => {
            let idx: usize = last
                .parse()
                .map_err(|_| format!("--set {assignment:?}: {last:?} is not an array index"))?;
            let len = arr.len();
            *arr.get_mut(idx)
                .ok_or_else(|| format!("--set {assignment:?}: index {idx} out of range (length {len})"))? =
                leaf;
        }
        _ => return Err(format!("--set {assignment:?}: {last:?} descends into a scalar")),
    }
    Ok(())
}

fn write_output(path: &PathBuf, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &CommonArgs) -> Result<(), Failure> {
    let scenario = load_scenario(args)?;
    let out_path = args.out.clone().unwrap_or_else(|| PathBuf::from("trace.csv"));

    let trace = simulate(&scenario).map_err(core_failure)?;
    write_output(&out_path, &trace.to_csv())?;

    let last = trace.final_state();
    println!("wrote {} ticks to {}", trace.rows.len(), out_path.display());
    println!(
        "final: t = {}, x = {:?}, v = {:?}",
        last.t,
        last.x.as_slice(),
        last.v.as_slice()
    );
    println!(
        "margins: min state margin = {:.6e}, min_i c_i = {:.6e}, min Delta_1 = {:.6e}",
        trace.min_state_margin,
        trace.min_constraint,
        trace.min_delta1()
    );
    println!("fallbacks: {}", trace.fallback_count);

    // The gate covers the plant-state rows; backup-effort rows are reported
    // above but carry only sampled-data error, not an applied force.
    if trace.min_state_margin < -1e-4 {
        eprintln!(
            "safety violation: min state margin = {:.6e} is below the -1e-4 slack",
            trace.min_state_margin
        );
        return Err(Failure::silent(2));
    }
    Ok(())
}

fn cmd_verify(args: &CommonArgs, suite: &str) -> Result<(), Failure> {
    let out_path = args.out.clone().unwrap_or_else(|| PathBuf::from("verify-report.json"));
    let reports = run_suite(suite, args.seed).map_err(core_failure)?;

    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_output(&out_path, &json)?;

    let mut all_passed = true;
    for report in &reports {
        println!(
            "suite {}: {}/{} passed in {:.2}s (seed {})",
            report.suite, report.passed, report.total, report.elapsed_s, report.seed
        );
        for case in report.failures.iter().take(5) {
            println!("  FAIL {}: {}", case.name, case.detail);
        }
        if report.failures.len() > 5 {
            println!("  ... and {} more failures", report.failures.len() - 5);
        }
        all_passed &= report.all_passed();
    }
    println!("report written to {}", out_path.display());

    if all_passed {
        Ok(())
    } else {
        Err(Failure::silent(2))
    }
}

fn cmd_sensitivity(args: &CommonArgs) -> Result<(), Failure> {
    let scenario = load_scenario(args)?;
    let out_path = args.out.clone().unwrap_or_else(|| PathBuf::from("sensitivity.csv"));

    let (model, _) = build_plant(&scenario.model, scenario.params.as_ref()).map_err(core_failure)?;
    let bundle = integrate_flow(
        &model,
        &scenario.x0,
        &scenario.v0,
        scenario.filter.t_horizon,
        &scenario.filter.integrator,
    )
    .map_err(core_failure)?;

    let (n, l) = (model.dims.n, model.dims.l);
    let mut csv = String::from("tau");
    for i in 1..=n {
        let _ = write!(csv, ",phi_{i}");
    }
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(csv, ",sx_{i}{j}");
        }
    }
    for i in 1..=n {
        for j in 1..=l {
            let _ = write!(csv, ",sv_{i}{j}");
        }
    }
    csv.push('\n');
    for (k, tau) in bundle.grid.iter().enumerate() {
        let _ = write!(csv, "{tau}");
        for value in bundle.phi[k].iter() {
            let _ = write!(csv, ",{value}");
        }
        for i in 0..n {
            for j in 0..n {
                let _ = write!(csv, ",{}", bundle.sx[k][(i, j)]);
            }
        }
        for i in 0..n {
            for j in 0..l {
                let _ = write!(csv, ",{}", bundle.sv[k][(i, j)]);
            }
        }
        csv.push('\n');
    }
    write_output(&out_path, &csv)?;

    let kend = bundle.len() - 1;
    println!(
        "wrote {} grid points to {} (T = {})",
        bundle.len(),
        out_path.display(),
        scenario.filter.t_horizon
    );
    println!(
        "endpoint: |S_x(T)|_F = {:.6e}, |S_v(T)|_F = {:.6e}",
        bundle.sx[kend].norm(),
        bundle.sv[kend].norm()
    );
    Ok(())
}

fn cmd_dump_qp(args: &CommonArgs) -> Result<(), Failure> {
    let scenario = load_scenario(args)?;
    let out_path = args.out.clone().unwrap_or_else(|| PathBuf::from("qp.json"));

    let (model, cmap) = build_plant(&scenario.model, scenario.params.as_ref()).map_err(core_failure)?;
    let mut filter =
        SafetyFilter::new(model.clone(), cmap, scenario.filter.clone(), &scenario.v0)
            .map_err(core_failure)?;
    let (target_u, target_w) = nominal_targets(&model, &scenario, &scenario.x0, &scenario.v0);
    let (problem, delta1, delta_t) = filter
        .assemble_qp(&scenario.x0, &scenario.v0, &target_u, &target_w)
        .map_err(core_failure)?;
    let solution = solve(&problem);

    let doc = serde_json::json!({
        "problem": problem,
        "solution": solution,
        "delta1": delta1,
        "deltaT": if delta_t.is_nan() { Value::Null } else { serde_json::json!(delta_t) },
    });
    write_output(&out_path, &serde_json::to_string_pretty(&doc).expect("qp dump serializes"))?;

    println!(
        "qp: {} rows, status {}, kkt residual {:.3e}",
        problem.rows.len(),
        solution.status,
        solution.kkt_residual
    );
    println!("margins: Delta_1 = {:.6e}, Delta_T = {:.6e}", delta1, delta_t);
    println!("written to {}", out_path.display());
    Ok(())
}

//! Command-line front end: every library capability behind a subcommand,
//! with JSON on stdout and a scriptable exit contract (0 success, 1 negative
//! verdict, 2 usage or data error).

use clap::{Parser, Subcommand, ValueEnum};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thermomaj::corpus::{run_agreement_corpus, CorpusConfig};
use thermomaj::ops::trace_to_json;
use thermomaj::{
    apply_protocol, build_curve, distillable_work, extraction_protocol, formation_protocol,
    majorization_margin, synth_general, synth_general_approx, synth_same_order,
    synth_same_order_two_level, work_of_formation, work_of_transition,
    work_of_transition_with_hamiltonian_change, Beta, ExecMode, Protocol, ThermoError,
    ThermoSystem,
};

#[derive(Parser)]
#[command(
    name = "thermomaj",
    version,
    about = "Thermo-majorization decisions, protocol synthesis and work accounting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthMode {
    Auto,
    SameOrder,
    TwoLevel,
    General,
    Approx,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit the thermo-majorization curve of a system; with --compare, both
    /// curves and the pointwise verdict.
    Curve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Decide whether the input thermo-majorizes the target.
    Check {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Compile the input→target transition into a coarse-operation protocol.
    Synth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value_t = SynthMode::Auto)]
        mode: SynthMode,
        /// Ancilla qubit gap; defaults to ln2/β.
        #[arg(long)]
        ancilla_gap: Option<f64>,
        /// Energy cap for --mode approx; defaults to 40/β.
        #[arg(long)]
        e_cap: Option<f64>,
        /// Residual target for --mode approx.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Apply a protocol file ("-" reads stdin) to a system.
    Apply {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// Override the step count of every PITR op.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// ε-deterministic distillable work; with --v-penalty, the full
    /// finite-penalty extraction outcome.
    Distill {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Failure penalty V ≤ 0; accepts "-inf".
        #[arg(long, value_parser = parse_ext_real, allow_hyphen_values = true)]
        v_penalty: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Work of formation of a diagonal target, with the forming protocol.
    Form {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Work of transition input→target (wit bisection); switches Hamiltonians
    /// automatically when the energy lists differ.
    Work {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run the decision-agreement corpus (curve decision vs LP oracle).
    Oracle {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        nmax: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Force single-threaded evaluation.
        #[arg(long)]
        sequential: bool,
    },
}

fn parse_ext_real(s: &str) -> Result<f64, String> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        other => other.parse::<f64>().map_err(|e| e.to_string()),
    }
}

enum CmdError {
    /// Exit 1: a well-formed negative verdict.
    Verdict(serde_json::Value),
    /// Exit 2: bad input or usage.
    Data(String),
}

impl From<ThermoError> for CmdError {
    fn from(e: ThermoError) -> Self {
        match e {
            ThermoError::Infeasible => CmdError::Verdict(serde_json::json!({
                "feasible": false,
                "error": e.to_string(),
            })),
            other => CmdError::Data(other.to_string()),
        }
    }
}

fn load_system(path: &Path, beta_override: Option<f64>) -> Result<ThermoSystem, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Data(format!("{}: {e}", path.display())))?;
    let mut sys = ThermoSystem::from_json_str(&text)
        .map_err(|e| CmdError::Data(format!("{}: {e}", path.display())))?;
    if let Some(b) = beta_override {
        sys.beta = Beta::new(b).map_err(CmdError::from)?;
    }
    Ok(sys)
}

fn load_protocol(path: &Path) -> Result<Protocol, CmdError> {
    let text = if path.as_os_str() == "-" {
        let mut buf = String::new();
        std::io::stdin()
            .read_to_string(&mut buf)
            .map_err(|e| CmdError::Data(e.to_string()))?;
        buf
    } else {
        std::fs::read_to_string(path)
            .map_err(|e| CmdError::Data(format!("{}: {e}", path.display())))?
    };
    // accept either a bare protocol or a synthesis report wrapping one
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CmdError::Data(e.to_string()))?;
    let inner = if value.get("protocol").is_some() { &value["protocol"] } else { &value };
    Protocol::from_json(inner).map_err(CmdError::from)
}

fn emit(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn work_json(w_energy: f64, beta: f64) -> serde_json::Value {
    serde_json::json!({
        "w": w_energy * beta,
        "units": "kT",
        "w_energy": w_energy,
    })
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.cmd {
        Cmd::Curve { input, compare, format, tol, beta } => {
            let sys = load_system(&input, beta)?;
            let curve = build_curve(&sys);
            match compare {
                None => match format {
                    Format::Csv => print!("{}", curve.to_csv()),
                    Format::Json => emit(&serde_json::json!({
                        "points": curve.points(),
                        "z_fin": curve.z_fin(),
                    })),
                },
                Some(other_path) => {
                    let other = load_system(&other_path, beta)?;
                    let other_curve = build_curve(&other);
                    let (margin, witness) = majorization_margin(&sys, &other, tol)?;
                    let verdict = margin >= -tol;
                    let payload = serde_json::json!({
                        "input_points": curve.points(),
                        "compare_points": other_curve.points(),
                        "thermo_majorizes": verdict,
                        "margin": margin,
                        "witness_x": if verdict { serde_json::Value::Null } else { serde_json::json!(witness) },
                    });
                    if verdict {
                        emit(&payload);
                    } else {
                        return Err(CmdError::Verdict(payload));
                    }
                }
            }
            Ok(())
        }
        Cmd::Check { input, target, tol, beta } => {
            let a = load_system(&input, beta)?;
            let b = load_system(&target, beta)?;
            let (margin, witness) = majorization_margin(&a, &b, tol)?;
            let verdict = margin >= -tol;
            let payload = serde_json::json!({
                "thermo_majorizes": verdict,
                "margin": margin,
                "witness_x": if verdict { serde_json::Value::Null } else { serde_json::json!(witness) },
            });
            if verdict {
                emit(&payload);
                Ok(())
            } else {
                Err(CmdError::Verdict(payload))
            }
        }
        Cmd::Synth { input, target, mode, ancilla_gap, e_cap, tol, beta } => {
            let rho = load_system(&input, beta)?;
            let tgt = load_system(&target, beta)?;
            if tgt.hamiltonian != rho.hamiltonian {
                return Err(CmdError::Data(
                    "synthesis targets must share the input Hamiltonian".into(),
                ));
            }
            let b = rho.beta.get();
            let gap = ancilla_gap.unwrap_or(std::f64::consts::LN_2 / b);
            let cap = e_cap.unwrap_or(40.0 / b);
            let sigma = tgt.state.clone();
            let report = match mode {
                SynthMode::SameOrder => synth_same_order(&rho, &sigma)?,
                SynthMode::TwoLevel => synth_same_order_two_level(&rho, &sigma)?,
                SynthMode::General => synth_general(&rho, &sigma, gap)?,
                SynthMode::Approx => synth_general_approx(&rho, &sigma, gap, cap, tol)?,
                SynthMode::Auto => {
                    if thermomaj::corpus::orders_compatible(&rho, &sigma) {
                        synth_same_order(&rho, &sigma)?
                    } else {
                        synth_general(&rho, &sigma, gap)?
                    }
                }
            };
            emit(&report.to_json());
            Ok(())
        }
        Cmd::Apply { input, protocol, steps, beta } => {
            let sys = load_system(&input, beta)?;
            let mut protocol = load_protocol(&protocol)?;
            if let Some(t) = steps {
                for op in &mut protocol.ops {
                    if let thermomaj::CoarseOp::Pitr { steps, .. } = op {
                        *steps = t;
                    }
                }
            }
            let (out, dist, trace) = apply_protocol(&sys, &protocol)?;
            emit(&serde_json::json!({
                "final": out.to_json(),
                "work": dist.to_json(),
                "trace": trace_to_json(&trace),
            }));
            Ok(())
        }
        Cmd::Distill { input, epsilon, v_penalty, beta } => {
            let sys = load_system(&input, beta)?;
            let b = sys.beta.get();
            match v_penalty {
                None => {
                    let w = distillable_work(&sys, epsilon)?;
                    emit(&work_json(w, b));
                }
                Some(v) => {
                    let outcome = extraction_protocol(&sys, epsilon, v)?;
                    let mut payload = outcome.to_json();
                    payload["success_work_kt"] = serde_json::json!(outcome.success_work * b);
                    emit(&payload);
                }
            }
            Ok(())
        }
        Cmd::Form { target, beta } => {
            let tgt = load_system(&target, beta)?;
            let b = tgt.beta.get();
            let w = work_of_formation(&tgt)?;
            let (protocol, ledger) = formation_protocol(&tgt)?;
            let mut payload = work_json(w, b);
            payload["protocol"] = protocol.to_json();
            payload["ledger"] = ledger.to_json();
            emit(&payload);
            Ok(())
        }
        Cmd::Work { input, target, tol, beta } => {
            let rho = load_system(&input, beta)?;
            let tgt = load_system(&target, beta)?;
            let b = rho.beta.get();
            let same_h = rho.hamiltonian == tgt.hamiltonian;
            let w = if same_h {
                work_of_transition(&rho, &tgt.state, tol)?
            } else {
                work_of_transition_with_hamiltonian_change(
                    &rho.state,
                    &rho.hamiltonian,
                    &tgt.state,
                    &tgt.hamiltonian,
                    rho.beta,
                    tol,
                )?
            };
            let mut payload = work_json(w, b);
            payload["hamiltonian_change"] = serde_json::json!(!same_h);
            emit(&payload);
            Ok(())
        }
        Cmd::Oracle { trials, seed, nmax, tol, sequential } => {
            let cfg = CorpusConfig {
                trials,
                n_min: 2,
                n_max: nmax,
                seed,
                curve_tol: tol,
                ..Default::default()
            };
            let mode = if sequential { ExecMode::Sequential } else { ExecMode::auto() };
            let report = run_agreement_corpus(&cfg, mode)?;
            let ok = report.disagreements.is_empty();
            let payload = report.to_json();
            if ok {
                emit(&payload);
                Ok(())
            } else {
                Err(CmdError::Verdict(payload))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Verdict(payload)) => {
            emit(&payload);
            ExitCode::from(1)
        }
        Err(CmdError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

//! Command-line front end: simulate data, fit rule sets, evaluate them.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tlrl::generator::DEFAULT_BUDGET;
use tlrl::harness::{
    evaluate_prediction, evaluate_recovery, fit, load_dataset, oracle, read_model, rule_check, write_model,
    write_trace_csv, Anchor, HarnessError, Metrics, RunConfig,
};
use tlrl::logic::GRAMMAR;
use tlrl::simulator::{generate_dataset, write_outputs, SimSpec, SimSpecFile, TruthManifest};

#[derive(Parser, Debug)]
#[command(name = "tlrl", version, about = "Learn weighted temporal logic rules from event sequences")]
struct Cli {
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for likelihood evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its truth manifest.
    Simulate {
        spec: PathBuf,
        #[arg(short = 'n', long, default_value_t = 1000)]
        sequences: usize,
        /// Output directory for data.json, truth.rules and truth.json.
        #[arg(short, long, default_value = ".")]
        out: PathBuf,
    },
    /// Learn a weighted rule set.
    Fit {
        data: PathBuf,
        #[command(flatten)]
        head: HeadArg,
        #[arg(short, long)]
        out: PathBuf,
        /// Per-iteration trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score a model against a truth manifest.
    Eval {
        model: PathBuf,
        truth: PathBuf,
        /// Held-out data for the prediction error.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Mean absolute error of next-event predictions.
    Predict {
        model: PathBuf,
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = AnchorArg::PreviousHead)]
        anchor: AnchorArg,
    },
    /// Exhaustive search for the rule with the lowest dual price.
    Oracle {
        data: PathBuf,
        model: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_len: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: f64,
    },
    /// Rule utilities.
    Rule {
        #[command(subcommand)]
        command: RuleCommand,
    },
}

#[derive(Subcommand, Debug)]
enum RuleCommand {
    /// Parse a rule, print its canonical form and grounding counts.
    Check {
        rule: String,
        data: PathBuf,
        #[command(flatten)]
        head: HeadArg,
        #[arg(long, default_value_t = tlrl::logic::DEFAULT_EQ_TOL)]
        eq_tol: f64,
    },
}

#[derive(Args, Debug)]
struct HeadArg {
    /// Head predicate, required when the dataset does not name one.
    #[arg(long)]
    head: Option<String>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum AnchorArg {
    PreviousHead,
    SequenceStart,
}

impl From<AnchorArg> for Anchor {
    fn from(a: AnchorArg) -> Self {
        match a {
            AnchorArg::PreviousHead => Anchor::PreviousHead,
            AnchorArg::SequenceStart => Anchor::SequenceStart,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { spec, sequences, out } => {
            let file: SimSpecFile = read_json(spec)?;
            let spec = SimSpec::from_file(&file).map_err(|e| Failure::Runtime(e.to_string()))?;
            let sim = generate_dataset(&spec, *sequences, cli.seed.unwrap_or(0))
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            write_outputs(out, &sim, &spec.lib).map_err(|e| Failure::Runtime(e.to_string()))?;
            eprintln!(
                "wrote {} sequences ({} head events) to {}",
                sim.dataset.len(),
                sim.stats.head_events,
                out.display()
            );
        }
        Command::Fit { data, head, out, trace } => {
            let config = load_config(&cli)?;
            let (dataset, lib, head) = load_dataset(data, head.head.as_deref())?;
            let report = fit(&dataset, &lib, head, &config)?;
            write_model(&report.model_file(&config), out)?;
            if let Some(t) = trace {
                write_trace_csv(&report.trace, fs::File::create(t)?)?;
            }
            eprintln!("stopped: {:?}", report.stop);
            for (r, w) in report.model.rules.iter().zip(&report.model.weights) {
                eprintln!("{w:.4}  {}", r.to_dsl(&lib));
            }
        }
        Command::Eval { model, truth, test, out } => {
            let config = load_config(&cli)?;
            let m = read_model(model)?;
            let learned = m.rule_set()?;
            let manifest: TruthManifest = read_json(truth)?;
            let truth_set = manifest
                .rule_set(&m.library)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            let rec = evaluate_recovery(&learned, &truth_set);
            let pred_mae = match test {
                Some(t) => {
                    let (d, _, _) = load_dataset(t, Some(&m.head))?;
                    Some(evaluate_prediction(&learned, &d, &m.eval_config(), &config.predict, config.anchor)?.mae)
                }
                None => None,
            };
            let metrics = Metrics {
                jaccard: rec.jaccard,
                weight_mae: rec.weight_mae,
                pred_mae,
            };
            print_json(&metrics, out.as_deref())?;
        }
        Command::Predict { model, test, anchor } => {
            let config = load_config(&cli)?;
            let m = read_model(model)?;
            let (d, _, _) = load_dataset(test, Some(&m.head))?;
            let r = evaluate_prediction(&m.rule_set()?, &d, &m.eval_config(), &config.predict, (*anchor).into())?;
            print_json(&r, None)?;
        }
        Command::Oracle {
            data,
            model,
            max_len,
            budget,
        } => {
            let config = load_config(&cli)?;
            let m = read_model(model)?;
            let (d, _, _) = load_dataset(data, Some(&m.head))?;
            let r = oracle(&d, &m, &config, *max_len, *budget)?;
            print_json(&r, None)?;
        }
        Command::Rule {
            command: RuleCommand::Check {
                rule,
                data,
                head,
                eq_tol,
            },
        } => {
            let (d, lib, _) = load_dataset(data, head.head.as_deref())?;
            let (parsed, counts) = match rule_check(rule, &d, &lib, *eq_tol) {
                Ok(x) => x,
                Err(HarnessError::Logic(e)) => return Err(Failure::Usage(format!("{e}\n\n{GRAMMAR}"))),
                Err(e) => return Err(e.into()),
            };
            let stdout = io::stdout();
            let mut w = stdout.lock();
            writeln!(w, "{}", parsed.to_dsl(&lib))?;
            for (id, n) in counts {
                writeln!(w, "{id}\t{n}")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} worker threads");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

mod report;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffcert::deltabounds::BudgetPolicy;
use diffcert::model::{load_network, NetworkFormat};
use diffcert::oracle::{random_task, sample_check};
use diffcert::verifier::Status;
use diffcert::{forward_diff, InputBox, Mode, Network, NetworkPair, SplitStrategy, SymVarOptions, VerificationTask};
use report::{bounds_report, verify_report, Settings};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "diffcert", version, about = "Bound the output difference of two ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prove |f'(x) - f(x)| < epsilon over the property box.
    Verify(VerifyArgs),
    /// Single forward pass: print the output difference bounds.
    Bounds(BoundsArgs),
    /// Round every weight and bias of a network to binary16.
    Truncate(TruncateArgs),
    /// Evaluate both networks at one input.
    Eval(EvalArgs),
    /// Check a forward pass against sampled ground truth.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct PairArgs {
    /// Original network (.nnet or .json).
    #[arg(long)]
    net1: PathBuf,
    /// Modified network with the same topology.
    #[arg(long, required_unless_present = "truncate", conflicts_with = "truncate")]
    net2: Option<PathBuf>,
    /// Use the binary16 truncation of --net1 as the modified network.
    #[arg(long)]
    truncate: bool,
}

impl PairArgs {
    fn load(&self) -> Result<NetworkPair> {
        let f = read_network(&self.net1)?;
        let g = match &self.net2 {
            Some(p) => read_network(p)?,
            None => f.truncate_weights(16)?,
        };
        Ok(NetworkPair::new(f, g)?)
    }
}

#[derive(Args)]
struct AnalysisArgs {
    /// Property file: {"input_lower": [..], "input_upper": [..], "epsilon": e}.
    #[arg(long)]
    property: PathBuf,
    #[arg(long, default_value = "full")]
    mode: Mode,
    /// Intermediate variable budget: "auto" or a count.
    #[arg(long, default_value = "auto", value_parser = parse_budget)]
    budget: BudgetPolicy,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
    #[arg(long, default_value_t = VerificationTask::DEFAULT_THREADS)]
    threads: usize,
    #[arg(long, default_value_t = VerificationTask::DEFAULT_TIMEOUT.as_secs_f64())]
    timeout_s: f64,
    #[arg(long, default_value_t = VerificationTask::DEFAULT_MAX_DEPTH)]
    max_depth: usize,
    #[arg(long, default_value = "smear")]
    split: SplitStrategy,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Args)]
struct TruncateArgs {
    /// Network to truncate.
    #[arg(long)]
    net: PathBuf,
    /// Output file; the format follows the extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Comma-separated input values.
    #[arg(long, allow_hyphen_values = true)]
    point: String,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, requires = "property")]
    net1: Option<PathBuf>,
    #[arg(long, requires = "net1", conflicts_with = "truncate")]
    net2: Option<PathBuf>,
    #[arg(long, requires = "net1")]
    truncate: bool,
    #[arg(long)]
    property: Option<PathBuf>,
    /// Seed for the random pair (when no networks are given) and the samples.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value = "full")]
    mode: Mode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PropertySpec {
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    #[serde(default)]
    epsilon: Option<f64>,
    /// Map the box through the first network's input normalization.
    #[serde(default)]
    normalized: bool,
}

impl PropertySpec {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading property {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing property {}", path.display()))
    }

    fn input_box(&self, net: &Network) -> Result<InputBox> {
        let b = InputBox::new(self.input_lower.clone(), self.input_upper.clone())?;
        if b.dims() != net.input_count() {
            bail!("property has {} inputs, network has {}", b.dims(), net.input_count());
        }
        if !self.normalized {
            return Ok(b);
        }
        let norm = net
            .normalization()
            .ok_or_else(|| anyhow!("property asks for normalization but the network has none"))?;
        Ok(b.normalized(norm)?)
    }

    fn epsilon(&self) -> Result<f64> {
        match self.epsilon {
            Some(e) if e > 0.0 && e.is_finite() => Ok(e),
            Some(e) => bail!("epsilon must be positive, got {e}"),
            None => bail!("property has no epsilon"),
        }
    }
}

fn parse_budget(s: &str) -> std::result::Result<BudgetPolicy, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(BudgetPolicy::Auto);
    }
    s.parse()
        .map(BudgetPolicy::Fixed)
        .map_err(|_| format!("expected 'auto' or a non-negative integer, got '{s}'"))
}

fn read_network(path: &Path) -> Result<Network> {
    load_network(path).with_context(|| format!("loading network {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let pair = args.pair.load()?;
    let prop = PropertySpec::load(&args.analysis.property)?;
    let input_box = prop.input_box(pair.original())?;
    let epsilon = prop.epsilon()?;
    if !(args.timeout_s >= 0.0) {
        bail!("timeout must be non-negative");
    }
    let task = VerificationTask::new(pair, input_box, epsilon)
        .with_mode(args.analysis.mode)
        .with_symvars(SymVarOptions { budget: args.analysis.budget })
        .with_threads(args.threads)
        .with_timeout(Duration::from_secs_f64(args.timeout_s))
        .with_max_depth(args.max_depth)
        .with_split(args.split);
    let out = diffcert::verify(&task)?;
    let settings = Settings {
        threads: args.threads,
        timeout_s: args.timeout_s,
        max_depth: args.max_depth,
        split: args.split.to_string(),
    };
    let report = verify_report(&out, args.analysis.mode, epsilon, settings);
    if let Some(path) = &args.analysis.out {
        write_json(path, &report)?;
    }
    let status = match out.status {
        Status::Verified => "verified",
        Status::Undetermined => "undetermined",
    };
    println!(
        "{status}: epsilon {epsilon}, {} subregion(s), depth {}, {:.3}s",
        out.subregions_explored,
        out.max_depth_reached,
        out.wall_time.as_secs_f64()
    );
    for (j, iv) in out.output.iter().enumerate() {
        println!("  output {}: [{}, {}]", j + 1, iv.lo, iv.hi);
    }
    Ok(if out.verified() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bounds(args: &BoundsArgs) -> Result<ExitCode> {
    let pair = args.pair.load()?;
    let prop = PropertySpec::load(&args.analysis.property)?;
    let input_box = prop.input_box(pair.original())?;
    let start = Instant::now();
    let pass = forward_diff(&pair, &input_box, args.analysis.mode, SymVarOptions { budget: args.analysis.budget });
    let report = bounds_report(&pass, args.analysis.mode, start.elapsed().as_secs_f64());
    if let Some(path) = &args.analysis.out {
        write_json(path, &report)?;
    }
    for o in &report.outputs {
        println!("output {}: [{}, {}]", o.index + 1, o.lower, o.upper);
        println!("  lower: {}", o.symbolic_lower.as_deref().unwrap_or(""));
        println!("  upper: {}", o.symbolic_upper.as_deref().unwrap_or(""));
    }
    for v in &report.variables {
        println!("{} in [{}, {}]", v.name, v.lower, v.upper);
    }
    println!("minimal epsilon: {}", report.minimal_epsilon.unwrap_or_default());
    Ok(ExitCode::SUCCESS)
}

fn cmd_truncate(args: &TruncateArgs) -> Result<ExitCode> {
    let net = read_network(&args.net)?;
    let truncated = net.truncate_weights(16)?;
    let text = match NetworkFormat::from_path(&args.out) {
        NetworkFormat::Json => truncated.to_json(),
        NetworkFormat::Nnet => truncated.to_nnet(),
    };
    std::fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalOutput {
    original: Vec<f64>,
    variant: Vec<f64>,
    difference: Vec<f64>,
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let pair = args.pair.load()?;
    let x: Vec<f64> = args
        .point
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad input value '{t}'")))
        .collect::<Result<_>>()?;
    let original = pair.original().evaluate(&x)?;
    let variant = pair.variant().evaluate(&x)?;
    let difference = variant.iter().zip(&original).map(|(b, a)| b - a).collect();
    let out = EvalOutput {
        original,
        variant,
        difference,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_fuzz(args: &FuzzArgs) -> Result<ExitCode> {
    let (pair, input_box) = match (&args.net1, &args.property) {
        (Some(net1), Some(prop)) => {
            let pair = PairArgs {
                net1: net1.clone(),
                net2: args.net2.clone(),
                truncate: args.truncate || args.net2.is_none(),
            }
            .load()?;
            let b = PropertySpec::load(prop)?.input_box(pair.original())?;
            (pair, b)
        }
        _ => random_task(args.seed),
    };
    let snapshot = forward_diff(&pair, &input_box, args.mode, SymVarOptions::default());
    let report = sample_check(&pair, &input_box, &snapshot, args.samples, args.seed);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.is_sound() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Truncate(a) => cmd_truncate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fuzz(a) => cmd_fuzz(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

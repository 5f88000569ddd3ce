use std::ops::RangeInclusive;
use std::path::PathBuf;

use cdtree_core::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cdtree", version, about = "Exact and truncated marginals of spin systems on CD trees")]
pub struct Cli {
    /// Enumeration guard for the exact oracle, in bits of configuration
    /// space (default: $CDTREE_MAX_ENUM_BITS, else 24).
    #[arg(long, global = true)]
    pub max_enum_bits: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Marginal and partition function by enumeration.
    Exact(ExactArgs),
    /// Marginal from the CD tree, optionally truncated.
    Marginal(MarginalArgs),
    /// Marginal from one of the recursive engines.
    Recursion(RecursionArgs),
    /// Partition function as a telescoping product of marginals.
    Partition(PartitionArgs),
    /// CD tree in Graphviz DOT.
    Tree(TreeArgs),
    /// Empirical spatial-mixing profile over a range of distances.
    MixingScan(MixingArgs),
    /// Positive-alignability certificate for the model's spin system.
    AlignCheck(AlignArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Rational,
    Float,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Rational => "rational",
            Mode::Float => "float",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct ExactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vertex: usize,
    #[arg(long, value_enum, default_value = "rational")]
    pub mode: Mode,
    #[arg(long, value_enum, default_value = "json")]
    pub emit: Emit,
}

#[derive(Args, Debug)]
pub struct MarginalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vertex: usize,
    /// Reference spin; every spin is tried in order when omitted.
    #[arg(long)]
    pub reference: Option<usize>,
    /// Truncation depth; the full tree when omitted.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum, default_value = "rational")]
    pub mode: Mode,
    /// Boundary leaves: `ones`, `dist:<file>` or `spin:<k>`.
    #[arg(long, default_value = "ones")]
    pub init: String,
    #[arg(long, value_enum, default_value = "json")]
    pub emit: Emit,
}

#[derive(Args, Debug)]
pub struct RecursionArgs {
    #[command(flatten)]
    pub marginal: MarginalArgs,
    #[arg(long, value_parser = recursive_engine, default_value = "cdtree")]
    pub engine: Engine,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "cdtree")]
    pub engine: Engine,
    #[arg(long, value_enum, default_value = "rational")]
    pub mode: Mode,
}

#[derive(Args, Debug)]
pub struct TreeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vertex: usize,
    /// Defaults to the last spin.
    #[arg(long)]
    pub reference: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MixingArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Run on complete trees of this degree built from the model's spin
    /// system instead of on the model's own graph.
    #[arg(long)]
    pub tree_degree: Option<usize>,
    /// Vertex whose marginal is compared (model graph only).
    #[arg(long, default_value_t = 0)]
    pub vertex: usize,
    /// Inclusive distance range, `d1..d2` or a single distance.
    #[arg(long, value_parser = depth_range, default_value = "1..3")]
    pub depths: RangeInclusive<usize>,
    /// Boundary configurations per distance before switching to sampling.
    #[arg(long, default_value_t = 200)]
    pub budget: usize,
    /// Random coupling-line sets per distance; 0 measures plain SSM.
    #[arg(long, default_value_t = 0)]
    pub lines: usize,
    /// Give every coupled leaf a reference-frozen twin.
    #[arg(long)]
    pub twin: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "json")]
    pub emit: Emit,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Check the system extended by a spin that interacts with everything.
    #[arg(long)]
    pub permissive: bool,
}

fn recursive_engine(s: &str) -> Result<Engine, String> {
    match s.parse()? {
        Engine::Exact => Err("the recursion command takes cdtree or split".into()),
        e => Ok(e),
    }
}

fn depth_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let bad = || format!("expected d1..d2 or a single distance, got {s:?}");
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim_start_matches('=').trim().parse().map_err(|_| bad())?),
        None => {
            let d = s.trim().parse().map_err(|_| bad())?;
            (d, d)
        }
    };
    if lo > hi {
        return Err(format!("empty distance range {s:?}"));
    }
    Ok(lo..=hi)
}

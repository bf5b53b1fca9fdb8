use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seqcomp::ac_pass::{apply_plan, build_flow_network, capacity, min_cut, segment_boundaries, AcMode};
use seqcomp::autodiff::{build_joint_graph, JointGraph};
use seqcomp::cost_model::{self, Strategy, TrainabilityQuery};
use seqcomp::executor::{check_equivalence, Precision};
use seqcomp::ir::{build_transformer_graph, lower, validate, Graph, Level};
use seqcomp::parallel::Parallelism;
use seqcomp::presets::ConfigFile;
use seqcomp::sp_pass::{transform_sp, SpConfig};
use seqcomp::{Error, ModelDims};

#[derive(Parser)]
#[command(name = "seqcomp", version, about = "Sequence-parallel graph compiler, checkpoint planner and cost model")]
struct Cli {
    /// Seed for random inputs in equivalence checks.
    #[arg(long, global = true, env = "SEQCOMP_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the high, lowered and joint graphs of a model.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Lower a high graph to matmul-level ops.
    Lower {
        graph: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rewrite a high graph for sequence parallelism.
    Transform {
        graph: PathBuf,
        #[arg(long)]
        world_size: usize,
        #[arg(short, long, alias = "dump-sp-graph")]
        out: PathBuf,
    },
    /// Compare a transformed graph on simulated ranks against the original.
    Check {
        original: PathBuf,
        sp_graph: PathBuf,
        /// Defaults to the world size recorded in the transformed graph.
        #[arg(long)]
        ranks: Option<usize>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
        precision: PrecisionArg,
    },
    /// Choose saved activations for a joint graph with a min cut.
    Plan {
        joint: PathBuf,
        #[arg(long, default_value = "seq-aware")]
        ac_mode: AcMode,
        /// Keep residual-stream values between blocks.
        #[arg(long)]
        segment: bool,
        #[arg(long)]
        dump_flow: Option<PathBuf>,
        #[arg(long)]
        dump_plan: Option<PathBuf>,
    },
    /// FLOPs, memory, recompute overhead and max sequence for one strategy.
    Report {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Add the strategy comparison table.
        #[arg(long)]
        ablation: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Longest sequence that fits the budget.
    MaxSeq {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        budget: BudgetArgs,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// JSON file with `presets` and/or `dims`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in or config-file preset; `tiny` if neither this nor `dims` is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seq: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Per-rank bytes, static memory included.
    #[arg(long)]
    budget_bytes: u64,
    #[arg(long, default_value = "sp-sac")]
    strategy: Strategy,
    /// Mode used by the sp-sac strategy.
    #[arg(long, default_value = "seq-aware")]
    ac_mode: AcMode,
    #[arg(long, default_value_t = 2)]
    world_size: usize,
    #[arg(long, default_value_t = cost_model::DEFAULT_OPTIMIZER_MULTIPLIER)]
    optimizer_multiplier: u64,
    #[arg(long, default_value_t = 256)]
    granularity: usize,
    /// Plan the whole graph at once instead of block by block.
    #[arg(long)]
    no_segment: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

impl ModelArgs {
    fn dims(&self, need_seq: bool) -> anyhow::Result<ModelDims> {
        let cfg = match &self.config {
            Some(p) => ConfigFile::from_json_str(&read(p)?)?,
            None => ConfigFile::default(),
        };
        let mut dims = match (&self.preset, cfg.dims) {
            (Some(name), _) => cfg.preset(name)?.at(0),
            (None, Some(d)) => d,
            (None, None) => cfg.preset("tiny")?.at(0),
        };
        let set = |v: Option<usize>, f: &mut usize| {
            if let Some(v) = v {
                *f = v;
            }
        };
        set(self.seq, &mut dims.seq);
        set(self.batch, &mut dims.batch);
        set(self.heads, &mut dims.heads);
        set(self.head_dim, &mut dims.head_dim);
        set(self.d_ffn, &mut dims.d_ffn);
        set(self.layers, &mut dims.layers);
        set(self.vocab, &mut dims.vocab);
        if self.heads.is_some() || self.head_dim.is_some() {
            dims.d_model = dims.heads * dims.head_dim;
        }
        if !need_seq && dims.seq == 0 {
            dims.seq = 1;
        }
        dims.validate()?;
        Ok(dims)
    }
}

impl BudgetArgs {
    fn query(&self, dims: ModelDims) -> TrainabilityQuery {
        let mut q = TrainabilityQuery::new(dims, self.budget_bytes, self.strategy);
        q.sac_mode = self.ac_mode;
        q.world_size = self.world_size;
        q.optimizer_multiplier = self.optimizer_multiplier;
        q.granularity = self.granularity;
        q.segment = !self.no_segment;
        q
    }
}

fn read(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write(p: &Path, s: &str) -> anyhow::Result<()> {
    fs::write(p, s).with_context(|| format!("writing {}", p.display()))
}

fn load_graph(p: &Path) -> anyhow::Result<Graph> {
    let g = Graph::from_json_str(&read(p)?).with_context(|| format!("loading {}", p.display()))?;
    let diags = validate(&g);
    if !diags.is_empty() {
        return Err(anyhow::Error::new(Error::Validation(diags)).context(format!("validating {}", p.display())));
    }
    Ok(g)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Build { model, out_dir } => {
            let dims = model.dims(true)?;
            let high = build_transformer_graph(&dims)?;
            let low = lower(&high)?;
            let joint = build_joint_graph(&low)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            write(&out_dir.join("high.json"), &high.to_json_string())?;
            write(&out_dir.join("low.json"), &low.to_json_string())?;
            write(&out_dir.join("joint.json"), &joint.to_json_string()?)?;
            println!("{} high, {} low, {} joint nodes", high.nodes.len(), low.nodes.len(), joint.graph.nodes.len());
        }
        Cmd::Lower { graph, out } => {
            let g = load_graph(&graph)?;
            if g.level != Level::High {
                bail!(Error::Parse(format!("{} is already lowered", graph.display())));
            }
            let low = lower(&g)?;
            write(&out, &low.to_json_string())?;
            println!("{} nodes", low.nodes.len());
        }
        Cmd::Transform { graph, world_size, out } => {
            let g = load_graph(&graph)?;
            let sp = transform_sp(&g, &SpConfig::new(world_size))?;
            write(&out, &sp.to_json_string()?)?;
            println!("{} all-to-all, {} rewritten nodes", sp.collective_count(), sp.provenance.len());
        }
        Cmd::Check { original, sp_graph, ranks, precision } => {
            let g = load_graph(&original)?;
            let text = read(&sp_graph)?;
            let recorded = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("world_size")?.as_u64())
                .map(|p| p as usize);
            let p = match (ranks, recorded) {
                (Some(r), Some(w)) if r != w => {
                    bail!(Error::Parse(format!("--ranks {r} but {} was transformed for {w}", sp_graph.display())))
                }
                (Some(r), _) => r,
                (None, Some(w)) => w,
                (None, None) => 1,
            };
            let sp = load_graph(&sp_graph)?;
            let precision = match precision {
                PrecisionArg::F64 => Precision::F64,
                PrecisionArg::F32 => Precision::F32,
            };
            let report = check_equivalence(&g, &sp, p, cli.seed, precision, Parallelism::default())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.max_rel_err() > precision.tolerance() {
                return Err(anyhow::Error::new(Mismatch(report.max_rel_err(), precision.tolerance())));
            }
        }
        Cmd::Plan { joint, ac_mode, segment, dump_flow, dump_plan } => {
            let j = JointGraph::from_json_str(&read(&joint)?).with_context(|| format!("loading {}", joint.display()))?;
            let mut net = build_flow_network(&j, ac_mode, &capacity);
            if segment {
                net.wire_boundaries(&segment_boundaries(&j));
            }
            if let Some(p) = &dump_flow {
                write(p, &net.to_json_string()?)?;
            }
            let plan = min_cut(&net)?;
            let sched = apply_plan(&j, &plan)?;
            let plan_json = plan.to_json_string()?;
            match &dump_plan {
                Some(p) => write(p, &plan_json)?,
                None => println!("{plan_json}"),
            }
            let summary = serde_json::json!({
                "mode": ac_mode.name(),
                "cut_value": plan.cut_value,
                "saved": plan.saved.len(),
                "recomputed": plan.recompute_schedule.len(),
                "predicted_peak_bytes": sched.simulated_peak(&j.graph),
            });
            eprintln!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Report { model, budget, ablation, out } => {
            let dims = model.dims(true)?;
            let q = budget.query(dims);
            let mut value = serde_json::to_value(cost_model::report(&q, dims.seq)?)?;
            if ablation {
                value["ablation"] = serde_json::to_value(cost_model::ablation(&q)?)?;
            }
            let text = serde_json::to_string_pretty(&value)?;
            match &out {
                Some(p) => write(p, &text)?,
                None => println!("{text}"),
            }
        }
        Cmd::MaxSeq { model, budget } => {
            let dims = model.dims(false)?;
            println!("{}", cost_model::max_trainable_seq(&budget.query(dims))?);
        }
    }
    Ok(())
}

#[derive(Debug)]
struct Mismatch(f64, f64);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "outputs differ: relative error {:e} exceeds {:e}", self.0, self.1)
    }
}

impl std::error::Error for Mismatch {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Mismatch>().is_some() {
        return 4;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Infeasible(_)) => 3,
        Some(
            Error::RuntimeShape { .. }
            | Error::Missing { .. }
            | Error::UseAfterFree { .. }
            | Error::CollectiveMismatch(_)
            | Error::Deadlock(_),
        ) => 4,
        Some(Error::Io(_)) => 1,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

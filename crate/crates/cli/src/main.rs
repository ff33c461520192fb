//! `editctrl`: train, edit, propagate and benchmark from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use editctrl::diffusion::Guidance;
use editctrl::training::Stage;
use editctrl::Error;

use config::Overrides;

const EXIT_FAILURE: u8 = 1;
const EXIT_BAD_INPUT: u8 = 2;
const EXIT_EMPTY_MASK: u8 = 3;
const EXIT_MISSING_WEIGHTS: u8 = 4;

#[derive(Parser)]
#[command(name = "editctrl", version, about = "Sparse mask-proportional video editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser or the full-attention control encoder.
    Pretrain(TrainCmd),
    /// Fine-tune the sparse local adapters and the global embedder.
    TrainAdapters(TrainCmd),
    /// Edit one masked region of a clip.
    Edit(EditCmd),
    /// Edit several disjoint regions, one lane per region.
    EditMulti(EditMultiCmd),
    /// Stream an initial edit into later frames.
    Propagate(PropagateCmd),
    /// Measure FLOPs and wall time against the mask ratio.
    Bench(BenchCmd),
    /// Preservation and fill metrics of an edit.
    Metrics(MetricsCmd),
}

#[derive(Args)]
struct TrainCmd {
    /// JSON file with training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory holding earlier stages.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Model configuration JSON, for a base run from scratch.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
    #[arg(long, visible_alias = "iters")]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Iteration at which the global branch joins the loss.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

impl TrainCmd {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("iterations", self.iterations)
            .set("batch_size", self.batch_size)
            .set("lr", self.lr)
            .set("warmup", self.warmup)
            .set("n", self.n)
            .set("lora_rank", self.lora_rank)
            .set("seed", self.seed)
            .set("grad_accum", self.grad_accum)
            .set("dilation_radius", self.dilation_radius)
            .set("weight_decay", self.weight_decay);
        o
    }

    fn into_args(self, command: &'static str, allowed: &'static [Stage], default_stage: Stage) -> commands::TrainArgs {
        let overrides = self.overrides();
        commands::TrainArgs {
            command,
            allowed,
            default_stage,
            config: self.config,
            init: self.init,
            model: self.model,
            out: self.out,
            stage: self.stage,
            overrides,
        }
    }
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown stage {s:?}"))
}

fn parse_guidance(s: &str) -> Result<Guidance, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown guidance {s:?}"))
}

#[derive(Args)]
struct SampleFlags {
    /// JSON file with sampler keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long, value_parser = parse_guidance)]
    guidance: Option<Guidance>,
}

impl SampleFlags {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("steps", self.steps).set("seed", self.seed).set("dilation_radius", self.dilation_radius).set("guidance", self.guidance);
        o
    }
}

#[derive(Args)]
struct EditCmd {
    #[command(flatten)]
    sample: SampleFlags,
    /// Checkpoint directory.
    #[arg(long)]
    weights: PathBuf,
    /// Video tensor `[frames, height, width, 3]`.
    #[arg(long)]
    input: PathBuf,
    /// Mask tensor `[frames, height, width]`, nonzero = edit.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditMultiCmd {
    #[command(flatten)]
    sample: SampleFlags,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// JSON list of `{"mask": path, "prompt": text, "seed": n}`.
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PropagateCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// The whole stream; frames past the mask length arrive one at a time.
    #[arg(long)]
    frames: PathBuf,
    /// Masks of the initially known frames.
    #[arg(long)]
    masks: PathBuf,
    /// Edited initial frames; edited here when omitted.
    #[arg(long)]
    edited: Option<PathBuf>,
    /// Flow tensor `[slices, height, width, 2]`; estimated when omitted.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    feather: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long)]
    total_frames: Option<usize>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// CSV output; the plot file is written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    dilation_radius: Option<usize>,
    #[arg(long)]
    analytic_dense: Option<bool>,
}

#[derive(Args)]
struct MetricsCmd {
    /// Edited video.
    #[arg(long)]
    output: PathBuf,
    /// Original video.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Dilation used by the edit; pixels beyond it count as unmasked.
    #[arg(long, default_value_t = editctrl::mask::DEFAULT_DILATION)]
    dilation_radius: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(c) => commands::train(c.into_args("pretrain", &[Stage::Base, Stage::ControlFull], Stage::Base)),
        Command::TrainAdapters(c) => {
            commands::train(c.into_args("train-adapters", &[Stage::AdaptersSparse], Stage::AdaptersSparse))
        }
        Command::Edit(c) => commands::edit(commands::EditArgs {
            overrides: c.sample.overrides(),
            config: c.sample.config,
            weights: c.weights,
            input: c.input,
            mask: c.mask,
            prompt: c.prompt,
            out: c.out,
        }),
        Command::EditMulti(c) => commands::edit_multi(commands::EditMultiArgs {
            overrides: c.sample.overrides(),
            config: c.sample.config,
            weights: c.weights,
            input: c.input,
            regions: c.regions,
            out: c.out,
        }),
        Command::Propagate(c) => {
            let mut o = Overrides::default();
            o.set("chunk", c.chunk)
                .set("feather", c.feather)
                .set("steps", c.steps)
                .set("seed", c.seed)
                .set("dilation_radius", c.dilation_radius)
                .set("total_frames", c.total_frames);
            commands::propagate(commands::PropagateArgs {
                config: c.config,
                weights: c.weights,
                frames: c.frames,
                masks: c.masks,
                edited: c.edited,
                flow: c.flow,
                prompt: c.prompt,
                out: c.out,
                overrides: o,
            })
        }
        Command::Bench(c) => {
            let mut o = Overrides::default();
            o.set("ratios", c.ratios)
                .set("steps", c.steps)
                .set("trials", c.trials)
                .set("seed", c.seed)
                .set("prompt", c.prompt)
                .set("dilation_radius", c.dilation_radius)
                .set("analytic_dense", c.analytic_dense);
            commands::bench(commands::BenchArgs { config: c.config, weights: c.weights, out: c.out, overrides: o })
        }
        Command::Metrics(c) => commands::metrics(commands::MetricsArgs {
            output: c.output,
            reference: c.reference,
            mask: c.mask,
            dilation_radius: c.dilation_radius,
            out: c.out,
        }),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if err.chain().any(|c| c.is::<std::io::Error>()) { EXIT_BAD_INPUT } else { EXIT_FAILURE };
    };
    match e {
        Error::EmptyMask | Error::MaskLeftFrame { .. } => EXIT_EMPTY_MASK,
        Error::MissingWeights(_) | Error::MissingParam(_) => EXIT_MISSING_WEIGHTS,
        Error::Shape { .. }
        | Error::Config(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::OverlappingRegions(..)
        | Error::StreamGap { .. }
        | Error::IndexOutOfRange { .. }
        | Error::Timestep { .. }
        | Error::ZeroWeight => EXIT_BAD_INPUT,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

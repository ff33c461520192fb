use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use editctrl::backbone::ModelConfig;
use editctrl::codec::Video;
use editctrl::diffusion::{Pipeline, SampleConfig};
use editctrl::flow::FlowField;
use editctrl::interactive::{self, FlowSource, InitialEdit, PropagateConfig, PropagationEvent, VideoSource};
use editctrl::io::{load_etf, save_etf, write_atomic};
use editctrl::mask::{edit_footprint, PixelMask, Region, RegionSet};
use editctrl::perf::{self, BenchConfig};
use editctrl::prompt::parse_prompt;
use editctrl::training::stage::{load_model_config, loss_csv, save_stage_checkpoint, MODEL_FILE};
use editctrl::training::metrics::format_psnr;
use editctrl::training::{edit_metrics, run_stage, RegionMetrics, Stage, TrainConfig};
use editctrl::{Error, ParamSet, Tensor};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::{read_json, resolve, Overrides};
use crate::manifest::{manifest_path, RunManifest};

const STAGE_ORDER: [Stage; 3] = [Stage::Base, Stage::ControlFull, Stage::AdaptersSparse];

pub struct Weights {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    pub files: Vec<PathBuf>,
}

/// Loads `model.json` and every stage file present in `dir`, in stage order.
pub fn load_weights(dir: &Path) -> Result<Weights> {
    if !dir.join(MODEL_FILE).exists() {
        bail!(Error::MissingWeights(dir.join(MODEL_FILE).display().to_string()));
    }
    if !dir.join(Stage::Base.file_name()).exists() {
        bail!(Error::MissingWeights(dir.join(Stage::Base.file_name()).display().to_string()));
    }
    let model = load_model_config(dir)?;
    let mut params = ParamSet::new();
    let mut files = Vec::new();
    for s in STAGE_ORDER {
        let path = dir.join(s.file_name());
        if path.exists() {
            params.merge(&editctrl::io::load_etw::<f32>(&path)?);
            files.push(path);
        }
    }
    Ok(Weights { model, params, files })
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn load_video(path: &Path) -> Result<Video> {
    Ok(Video::new(load_etf::<f32>(path)?)?)
}

fn load_mask(path: &Path) -> Result<PixelMask> {
    Ok(PixelMask::from_tensor(&load_etf::<f32>(path)?)?)
}

fn load_flow(path: &Path) -> Result<FlowField> {
    let t: Tensor<f32> = load_etf(path)?;
    let &[f, h, w, 2] = t.shape() else {
        bail!(shape_err("flow", format!("expected [frames, height, width, 2], got {:?}", t.shape())));
    };
    let data = t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(FlowField::from_data(f, h, w, data)?)
}

fn pipeline(w: &Weights) -> Result<Pipeline> {
    Ok(Pipeline::new(&w.model, w.params.clone())?)
}

fn record_weights(m: &mut RunManifest, w: &Weights) -> Result<()> {
    for f in &w.files {
        m.weight_file(f)?;
    }
    Ok(())
}

fn write_manifest(m: &RunManifest, out: &Path) -> Result<()> {
    m.write(&manifest_path(out))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    let bytes = std::fs::read(from).with_context(|| format!("reading {}", from.display()))?;
    write_atomic(to, &bytes)?;
    Ok(())
}

pub struct TrainArgs {
    pub command: &'static str,
    pub allowed: &'static [Stage],
    pub default_stage: Stage,
    pub config: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub stage: Option<Stage>,
    pub overrides: Overrides,
}

fn stage_from_file(path: &Path) -> Result<Option<Stage>> {
    match read_json(path)?.get("stage") {
        Some(v) => Ok(Some(Stage::deserialize(v.clone()).map_err(|e| Error::Config(format!("stage: {e}")))?)),
        None => Ok(None),
    }
}

pub fn train(mut a: TrainArgs) -> Result<()> {
    let stage = match a.stage {
        Some(s) => s,
        None => match &a.config {
            Some(p) => stage_from_file(p)?.unwrap_or(a.default_stage),
            None => a.default_stage,
        },
    };
    if !a.allowed.contains(&stage) {
        bail!(Error::Config(format!("`{}` cannot run stage {}", a.command, stage.name())));
    }
    a.overrides.set("stage", Some(stage));
    let cfg: TrainConfig = resolve(&TrainConfig::new(stage, 0), a.config.as_deref(), &a.overrides)?;
    cfg.validate()?;

    let previous = STAGE_ORDER.iter().position(|s| *s == stage).expect("known stage");
    let (model, params, inputs) = match &a.init {
        Some(dir) => {
            if a.model.is_some() {
                bail!(Error::Config("--model conflicts with --init; the model comes from the checkpoint".into()));
            }
            if !dir.join(MODEL_FILE).exists() {
                bail!(Error::MissingWeights(dir.join(MODEL_FILE).display().to_string()));
            }
            let model = load_model_config(dir)?;
            let upto = if cfg.iterations == 0 { STAGE_ORDER.len() } else { previous };
            let inputs: Vec<PathBuf> = STAGE_ORDER[..upto].iter().map(|s| dir.join(s.file_name())).filter(|p| p.exists()).collect();
            let mut ps = ParamSet::new();
            for p in &inputs {
                ps.merge(&editctrl::io::load_etw::<f32>(p)?);
            }
            (model, ps, inputs)
        }
        None => {
            let model: ModelConfig = match &a.model {
                Some(p) => resolve(&ModelConfig::default(), Some(p), &Overrides::default())?,
                None => ModelConfig::default(),
            };
            model.validate()?;
            (model, ParamSet::new(), Vec::new())
        }
    };

    let mut man = RunManifest::new(a.command, &cfg, cfg.seed);
    if let Some(dir) = &a.init {
        man.input("init", dir);
    }
    for f in &inputs {
        man.weight_file(f)?;
    }
    ensure_dir(&a.out)?;

    if cfg.iterations == 0 {
        let Some(dir) = &a.init else {
            bail!(Error::Config("zero iterations needs --init weights to copy".into()));
        };
        for f in &inputs {
            let dst = a.out.join(f.file_name().expect("stage file name"));
            copy_file(f, &dst)?;
            man.output(&dst.file_name().unwrap().to_string_lossy(), &dst)?;
        }
        let dst = a.out.join(MODEL_FILE);
        copy_file(&dir.join(MODEL_FILE), &dst)?;
        man.output(MODEL_FILE, &dst)?;
        return man.write(&a.out.join("manifest.json"));
    }

    let out = run_stage(&model, &cfg, params)?;
    for f in &inputs {
        copy_file(f, &a.out.join(f.file_name().expect("stage file name")))?;
    }
    save_stage_checkpoint(&a.out, stage, &out.model, &out.params)?;
    let losses = a.out.join(format!("loss_{}.csv", stage.name()));
    write_atomic(&losses, loss_csv(&out.losses).as_bytes())?;
    for s in &STAGE_ORDER[..=previous] {
        let p = a.out.join(s.file_name());
        if p.exists() {
            man.output(s.file_name(), &p)?;
        }
    }
    man.output(MODEL_FILE, &a.out.join(MODEL_FILE))?;
    man.output("losses", &losses)?;
    man.write(&a.out.join("manifest.json"))
}

pub struct EditArgs {
    pub config: Option<PathBuf>,
    pub weights: PathBuf,
    pub input: PathBuf,
    pub mask: PathBuf,
    pub prompt: String,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn edit(a: EditArgs) -> Result<()> {
    let cfg: SampleConfig = resolve(&SampleConfig::default(), a.config.as_deref(), &a.overrides)?;
    let prompt = parse_prompt(&a.prompt)?;
    let video = load_video(&a.input)?;
    let mask = load_mask(&a.mask)?;
    let w = load_weights(&a.weights)?;
    let p = pipeline(&w)?;
    let out = p.sample_edit(&video, &mask, &prompt, &cfg)?;
    save_etf(&a.out, out.video.tensor())?;

    let mut man = RunManifest::new("edit", &json!({ "sample": cfg, "prompt": a.prompt }), cfg.seed);
    man.input("weights", &a.weights).input("video", &a.input).input("mask", &a.mask);
    record_weights(&mut man, &w)?;
    man.output("video", &a.out)?;
    write_manifest(&man, &a.out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionSpec {
    mask: PathBuf,
    prompt: String,
    seed: u64,
}

pub struct EditMultiArgs {
    pub config: Option<PathBuf>,
    pub weights: PathBuf,
    pub input: PathBuf,
    pub regions: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn edit_multi(a: EditMultiArgs) -> Result<()> {
    let cfg: SampleConfig = resolve(&SampleConfig::default(), a.config.as_deref(), &a.overrides)?;
    let specs: Vec<RegionSpec> = serde_json::from_value(read_json(&a.regions)?).map_err(|e| Error::Config(format!("{}: {e}", a.regions.display())))?;
    let base = a.regions.parent().unwrap_or(Path::new("."));
    let video = load_video(&a.input)?;
    let w = load_weights(&a.weights)?;
    let p = pipeline(&w)?;
    let mut regions = Vec::with_capacity(specs.len());
    let mut man = RunManifest::new("edit-multi", &Value::Null, cfg.seed);
    for (i, s) in specs.iter().enumerate() {
        let path = base.join(&s.mask);
        parse_prompt(&s.prompt)?;
        regions.push(Region { mask: load_mask(&path)?, prompt: s.prompt.clone(), seed: s.seed });
        man.input(&format!("mask_{i}"), &path);
    }
    let set = RegionSet::new(regions, p.codec.patch(), cfg.dilation_radius)?;
    let threads = interactive::lane_threads();
    let out = interactive::edit_multi_region(&p, &video, &set, &cfg, threads)?;
    save_etf(&a.out, out.video.tensor())?;

    let region_json: Vec<Value> = specs.iter().map(|s| json!({ "mask": s.mask, "prompt": s.prompt, "seed": s.seed })).collect();
    man.config = json!({ "sample": cfg, "regions": region_json });
    man.input("weights", &a.weights).input("video", &a.input).input("regions", &a.regions);
    record_weights(&mut man, &w)?;
    man.output("video", &a.out)?;
    write_manifest(&man, &a.out)
}

pub struct PropagateArgs {
    pub config: Option<PathBuf>,
    pub weights: PathBuf,
    pub frames: PathBuf,
    pub masks: PathBuf,
    pub edited: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub prompt: String,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn propagate(a: PropagateArgs) -> Result<()> {
    let cfg: PropagateConfig = resolve(&PropagateConfig::default(), a.config.as_deref(), &a.overrides)?;
    let prompt = parse_prompt(&a.prompt)?;
    let stream = load_video(&a.frames)?;
    let masks = load_mask(&a.masks)?;
    let known = masks.frames();
    if known == 0 || known > stream.frames() {
        bail!(shape_err("propagate", format!("{known} mask frames for a {}-frame stream", stream.frames())));
    }
    let w = load_weights(&a.weights)?;
    let p = pipeline(&w)?;
    let frames = stream.frames_range(0, known);
    let edited = match &a.edited {
        Some(path) => load_video(path)?,
        None => {
            let sc = SampleConfig { steps: cfg.steps, seed: cfg.seed, dilation_radius: cfg.dilation_radius, ..Default::default() };
            p.sample_edit(&frames, &masks, &prompt, &sc)?.video
        }
    };
    let flow = a.flow.as_deref().map(load_flow).transpose()?;
    let flow_source = match &flow {
        Some(f) => FlowSource::Given(f),
        None => FlowSource::Estimate,
    };
    let init = InitialEdit { frames, edited: edited.clone(), masks, prompt: a.prompt.clone() };
    let mut source = VideoSource::new(stream.frames_range(known, stream.frames()), known);
    let mut emitted = vec![edited];
    let report = interactive::propagate(&p, &init, &mut source, flow_source, &cfg, &mut |ev| {
        if let PropagationEvent::Emitted(e) = ev {
            emitted.push(e.frame.clone());
        }
        Ok(())
    })?;
    let video = Video::concat(&emitted)?;
    save_etf(&a.out, video.tensor())?;
    let latency = a.out.with_extension("latency.csv");
    write_atomic(&latency, interactive::latency_csv(&report.latency).as_bytes())?;

    let mut man = RunManifest::new("propagate", &json!({ "propagate": cfg, "prompt": a.prompt }), cfg.seed);
    man.input("weights", &a.weights).input("frames", &a.frames).input("masks", &a.masks);
    if let Some(e) = &a.edited {
        man.input("edited", e);
    }
    if let Some(f) = &a.flow {
        man.input("flow", f);
    }
    record_weights(&mut man, &w)?;
    man.output("video", &a.out)?;
    man.log("latency", &latency);
    write_manifest(&man, &a.out)
}

pub struct BenchArgs {
    pub config: Option<PathBuf>,
    pub weights: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg: BenchConfig = resolve(&BenchConfig::default(), a.config.as_deref(), &a.overrides)?;
    let w = load_weights(&a.weights)?;
    let p = pipeline(&w)?;
    let rows = perf::bench_run(&p, &cfg)?;
    write_atomic(&a.out, perf::bench_csv(&rows).as_bytes())?;
    let plot = a.out.with_extension("plot.dat");
    write_atomic(&plot, perf::plot_data(&rows).as_bytes())?;
    print!("{}", perf::bench_csv(&rows));

    let mut man = RunManifest::new("bench", &cfg, cfg.seed);
    man.input("weights", &a.weights);
    record_weights(&mut man, &w)?;
    man.output("csv", &a.out)?;
    man.output("plot", &plot)?;
    write_manifest(&man, &a.out)
}

pub struct MetricsArgs {
    pub output: PathBuf,
    pub reference: PathBuf,
    pub mask: PathBuf,
    pub dilation_radius: usize,
    pub out: Option<PathBuf>,
}

fn region_json(r: &Option<RegionMetrics>) -> Value {
    match r {
        Some(r) => json!({
            "mse": r.mse,
            "mae": r.mae,
            "psnr": format_psnr(r.psnr),
            "ssim": r.ssim,
            "pixels": r.pixels,
        }),
        None => Value::Null,
    }
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let out = load_video(&a.output)?;
    let reference = load_video(&a.reference)?;
    let mask = load_mask(&a.mask)?;
    let footprint = edit_footprint(&mask, editctrl::codec::DEFAULT_PATCH, a.dilation_radius)?;
    let m = edit_metrics(&out, &reference, &mask, &footprint)?;
    let report = json!({ "unmasked": region_json(&m.unmasked), "masked": region_json(&m.masked) });
    let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
    println!("{text}");
    if let Some(path) = &a.out {
        write_atomic(path, text.as_bytes())?;
        let mut man = RunManifest::new("metrics", &json!({ "dilation_radius": a.dilation_radius }), 0);
        man.input("output", &a.output).input("reference", &a.reference).input("mask", &a.mask);
        man.output("metrics", path)?;
        write_manifest(&man, path)?;
    }
    Ok(())
}

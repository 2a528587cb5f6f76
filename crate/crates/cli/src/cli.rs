//! `pam` subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pam_core::checkpoint::Checkpoint;
use pam_core::engine::{
    deviation_harness, segment_volume, thickness_harness, EngineConfig, OracleSegmenter, PamSegmenter, Prompt, Segmenter,
    DEVIATIONS, THICKNESSES_MM,
};
use pam_core::metrics::{irregularity, write_csv, ObjectRecord};
use pam_core::model::{Box2MaskModel, PropMaskModel};
use pam_core::nets::NetConfig;
use pam_core::phantom::{load_phantoms, phantom_suite, save_phantoms, Phantom, ShapeFamily};
use pam_core::train::{box_sample_pool, finetune, task_pool, train, write_jsonl, LogEntry, TrainConfig};
use pam_core::{Axis, Mask3D, Volume};

use crate::api::{router, AppState, Backend};

#[derive(Parser, Debug)]
#[command(name = "pam", version, about = "Prompt-driven volume segmentation by mask propagation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Train one of the two networks on a phantom directory.
    Train(TrainArgs),
    /// Segment a volume from one prompt.
    Infer(InferArgs),
    /// Score a predicted mask against ground truth.
    Eval(EvalArgs),
    /// Sweep the initial slice or the propagation thickness.
    Ablate(AblateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum PhantomCommand {
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    All,
    Ellipsoid,
    Capsule,
    Torus,
    Blob,
}

impl FamilyArg {
    fn families(self) -> Vec<ShapeFamily> {
        match self {
            FamilyArg::All => ShapeFamily::ALL.to_vec(),
            FamilyArg::Ellipsoid => vec![ShapeFamily::Ellipsoid],
            FamilyArg::Capsule => vec![ShapeFamily::Capsule],
            FamilyArg::Torus => vec![ShapeFamily::Torus],
            FamilyArg::Blob => vec![ShapeFamily::Blob],
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Phantoms per family.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FamilyArg::All)]
    pub family: FamilyArg,
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 64, 32])]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 1.0, 2.0])]
    pub spacing: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetArg {
    Box2mask,
    Propmask,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub net: NetArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out phantoms evaluated during training.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    /// Channel schedule; defaults to the desk schedule.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// PropMask cross-attention levels; defaults to 4, capped below the stage count.
    #[arg(long)]
    pub attention_stages: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Training pool size: ROI samples or propagation tasks.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 20.0)]
    pub thickness_mm: f64,
    /// Adjacent slices per propagation task.
    #[arg(long, default_value_t = 4)]
    pub adjacent: usize,
    /// Full training config as JSON; flags above override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub finetune: Option<PathBuf>,
    /// Metrics log, one JSON object per line.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt_box: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_prop: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<PamSegmenter> {
        let (Some(b), Some(p)) = (&self.ckpt_box, &self.ckpt_prop) else {
            bail!("both --ckpt-box and --ckpt-prop are required");
        };
        load_segmenter(b, p)
    }
}

pub fn load_segmenter(box_ckpt: &Path, prop_ckpt: &Path) -> Result<PamSegmenter> {
    let b = Checkpoint::read(box_ckpt).with_context(|| format!("reading {}", box_ckpt.display()))?;
    let p = Checkpoint::read(prop_ckpt).with_context(|| format!("reading {}", prop_ckpt.display()))?;
    Ok(PamSegmenter::new(Box2MaskModel::from_checkpoint(&b)?, PropMaskModel::from_checkpoint(&p)?))
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Prompt JSON, inline or as a file path.
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Segment with this ground-truth mask instead of the networks.
    #[arg(long, conflicts_with_all = ["ckpt_box", "ckpt_prop"])]
    pub oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 20.0)]
    pub thickness_mm: f64,
    /// Engine config as JSON; --thickness-mm overrides its thickness.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "default")]
    pub dataset: String,
    /// Defaults to the ground-truth file name.
    #[arg(long)]
    pub object_id: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Sweep {
    Deviation,
    Thickness,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub sweep: Sweep,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Use each phantom's ground truth as the segmenter.
    #[arg(long, conflicts_with_all = ["ckpt_box", "ckpt_prop"])]
    pub oracle: bool,
    /// Thickness for the deviation sweep.
    #[arg(long, default_value_t = 20.0)]
    pub thickness_mm: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Segment with registered ground truth instead of the networks.
    #[arg(long, conflicts_with_all = ["ckpt_box", "ckpt_prop"])]
    pub oracle: bool,
    /// Keep a copy of uploaded volumes here.
    #[arg(long)]
    pub spill_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { command: PhantomCommand::Gen(a) } => phantom_gen(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn triple<T: Copy>(v: &[T], what: &str) -> Result<[T; 3]> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("--{what} takes three comma-separated values"),
    }
}

fn phantom_gen(a: &GenArgs) -> Result<()> {
    let dims = triple(&a.dims, "dims")?;
    let spacing = triple(&a.spacing, "spacing")?;
    let phantoms: Vec<Phantom> =
        a.family.families().into_iter().flat_map(|f| phantom_suite(f, a.n, a.seed, dims, spacing)).collect();
    save_phantoms(&a.out, &phantoms)?;
    println!("wrote {} phantoms to {}", phantoms.len(), a.out.display());
    Ok(())
}

fn load_data(dir: &Path) -> Result<Vec<Phantom>> {
    let phantoms = load_phantoms(dir).with_context(|| format!("loading phantoms from {}", dir.display()))?;
    if phantoms.is_empty() {
        bail!("{} holds no phantoms", dir.display());
    }
    Ok(phantoms)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => match a.net {
            NetArg::Box2mask => TrainConfig::box2mask(),
            NetArg::Propmask => TrainConfig::propmask(),
        },
    };
    cfg.seed = a.seed;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.samples_per_epoch {
        cfg.samples_per_epoch = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let desk = NetConfig::desk();
    let channels = a.channels.clone().unwrap_or(desk.channels);
    let attention_stages = a.attention_stages.unwrap_or(desk.attention_stages.min(channels.len().saturating_sub(1)));
    let net_cfg = NetConfig { resolution: a.res, channels, attention_stages, ..desk };
    let train_ph = load_data(&a.data)?;
    let val_ph = match &a.val_data {
        Some(dir) => load_data(dir)?,
        None => Vec::new(),
    };

    let mut log_out = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut on_log = |e: &LogEntry| {
        eprintln!("epoch {:>3} {:<5} loss {:.4}{}", e.epoch, format!("{:?}", e.split).to_lowercase(), e.loss, e.dsc.map(|d| format!(" dsc {d:.4}")).unwrap_or_default());
        if let Some(out) = log_out.as_mut() {
            // Logging failures surface at the final flush.
            let _ = write_jsonl(&mut *out, std::slice::from_ref(e));
        }
    };
    let base = a.finetune.as_ref().map(Checkpoint::read).transpose()?;

    let ckpt = match a.net {
        NetArg::Box2mask => {
            let pool = box_sample_pool(&train_ph, a.pool.unwrap_or(2000), a.res, a.seed)?;
            let val = if val_ph.is_empty() { Vec::new() } else { box_sample_pool(&val_ph, 200, a.res, a.seed + 1)? };
            match &base {
                Some(b) => finetune::<pam_core::nets::Box2Mask>(b, &pool, &val, &cfg, &mut on_log)?.0,
                None => {
                    let mut m = Box2MaskModel::new(&net_cfg, a.seed)?;
                    train(&mut m, &pool, &val, &cfg, &mut on_log)?;
                    m.to_checkpoint()
                }
            }
        }
        NetArg::Propmask => {
            let pool = task_pool(&train_ph, a.pool.unwrap_or(1000), a.thickness_mm, a.adjacent, a.res, a.seed)?;
            let val = if val_ph.is_empty() {
                Vec::new()
            } else {
                task_pool(&val_ph, 100, a.thickness_mm, a.adjacent, a.res, a.seed + 1)?
            };
            match &base {
                Some(b) => finetune::<pam_core::nets::PropMask>(b, &pool, &val, &cfg, &mut on_log)?.0,
                None => {
                    let mut m = PropMaskModel::new(&net_cfg, a.seed)?;
                    train(&mut m, &pool, &val, &cfg, &mut on_log)?;
                    m.to_checkpoint()
                }
            }
        }
    };
    if let Some(mut out) = log_out {
        out.flush()?;
    }
    ckpt.write(&a.out)?;
    println!("wrote {} (sha256 {})", a.out.display(), ckpt.sha256());
    Ok(())
}

/// Inline JSON when it looks like an object, otherwise a file holding it.
pub fn read_prompt(arg: &str) -> Result<Prompt> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading prompt {arg}"))?
    };
    serde_json::from_str(&text).context("parsing prompt")
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let volume = Volume::read(&a.volume).with_context(|| format!("reading {}", a.volume.display()))?;
    let prompt = read_prompt(&a.prompt)?;
    let mut config: EngineConfig = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => EngineConfig::default(),
    };
    config.thickness_mm = a.thickness_mm;
    let seg: Box<dyn Segmenter> = match &a.oracle {
        Some(gt) => Box::new(OracleSegmenter { truth: Mask3D::read(gt)? }),
        None => Box::new(a.models.load()?),
    };
    let out = segment_volume(seg.as_ref(), &volume, &prompt, &config)?;
    out.mask.write(&a.out)?;
    if let Some(path) = &a.report {
        std::fs::write(path, serde_json::to_vec_pretty(&out.report)?)?;
    }
    println!(
        "{} voxels over {} slices in {:.0} ms",
        out.mask.count(),
        out.report.slice_areas.iter().filter(|(_, a)| *a > 0).count(),
        out.report.total_ms
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let pred = Mask3D::read(&a.pred)?;
    let gt = Mask3D::read(&a.gt)?;
    let shape = irregularity(&gt, Axis::Z)?;
    let object_id = a.object_id.clone().unwrap_or_else(|| {
        let name = a.gt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        name.trim_end_matches(".pvol").trim_end_matches(".mask").to_string()
    });
    let record = ObjectRecord {
        dataset: a.dataset.clone(),
        object_id,
        dsc: pam_core::metrics::dsc(&pred, &gt)?,
        box_ratio: shape.box_ratio,
        convex_ratio: shape.convex_ratio,
        iri: shape.iri,
        n_pixels: shape.n_pixels,
    };
    write_csv(BufWriter::new(File::create(&a.report)?), std::slice::from_ref(&record))?;
    println!("dsc {:.4}", record.dsc);
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let phantoms = load_data(&a.data)?;
    let model = if a.oracle { None } else { Some(a.models.load()?) };
    let config = EngineConfig { thickness_mm: a.thickness_mm, ..EngineConfig::default() };
    let mut out = BufWriter::new(File::create(&a.out)?);
    writeln!(out, "object_id,setting,dsc")?;
    for p in &phantoms {
        let oracle = OracleSegmenter { truth: p.mask.clone() };
        let seg: &dyn Segmenter = match &model {
            Some(m) => m,
            None => &oracle,
        };
        let cells = match a.sweep {
            Sweep::Deviation => deviation_harness(seg, &p.volume, &p.mask, Axis::Z, &DEVIATIONS, &config)?,
            Sweep::Thickness => thickness_harness(seg, &p.volume, &p.mask, Axis::Z, &THICKNESSES_MM, &config)?,
        };
        for c in cells {
            writeln!(out, "{},{},{}", p.id, c.setting, c.dsc)?;
        }
    }
    out.flush()?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let backend = if a.oracle { Backend::Oracle } else { Backend::Pam(Box::new(a.models.load()?)) };
    let mut state = AppState::new(backend);
    if let Some(dir) = a.spill_dir {
        std::fs::create_dir_all(&dir)?;
        state = state.with_spill_dir(dir);
    }
    let app = router(Arc::new(state));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}

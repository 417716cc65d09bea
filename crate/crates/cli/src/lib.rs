//! Command implementations behind the `sgedit` binary.

pub mod server;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sgedit::checkpoint::{self, Checkpoint};
use sgedit::clevr::{self, Dataset};
use sgedit::metrics::{self, EvalMode, EvalOptions};
use sgedit::session::{render_edit, EditService};
use sgedit::trainer::{self, MaskingConfig, Mode, TrainConfig};
use sgedit::{EditOp, Preset, RgbImage, SceneGraph};

#[derive(Debug, Parser)]
#[command(name = "sgedit", version, about = "Edit images by editing their scene graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset with paired edits.
    GenData(GenDataArgs),
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Serve the editing API.
    Serve(ServeArgs),
    /// Apply a list of edits to one image.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value = "self")]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.25)]
    pub p_phi: f64,
    #[arg(long, default_value_t = 0.35)]
    pub p_x: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub validate_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: u64,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "auto,remove,replace,relationship,add", value_delimiter = ',')]
    pub modes: Vec<EvalMode>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write predicate heatmaps into this directory.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// JSON array of edit operations.
    #[arg(long)]
    pub ops: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Serve(a) => serve(&a),
        Command::Edit(a) => edit(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let m = clevr::export_dataset(a.count, &a.out, a.seed, a.res)?;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        m.count,
        a.out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&a.data)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        mode: a.mode,
        masking: MaskingConfig {
            p_phi: a.p_phi,
            p_x: a.p_x,
            fully_generative: false,
        },
        preset: a.preset,
        resolution: a.res,
        validate_every: a.validate_every,
        checkpoint_every: a.checkpoint_every,
        ..Default::default()
    };
    let report = trainer::fit(&ds, cfg, &a.out, a.resume.as_deref())?;
    println!(
        "trained steps {}..{} in {:.0}s, checkpoint {}",
        report.start_step,
        report.final_step,
        report.seconds,
        report.checkpoint.display()
    );
    if let Some(v) = report.validations.last() {
        println!("last validation: MAE {:.2}, SSIM {:.2}", v.mae_all, v.ssim_all);
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (gen, _) = checkpoint::load_generator(&a.ckpt, Some(&ds.vocab))?;
    let opts = EvalOptions {
        split: a.split.clone(),
        limit: a.limit,
        seed: a.seed,
    };
    let report = metrics::evaluate(&gen, &ds, &a.modes, &opts)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", a.out.display()))?;
    for (mode, m) in &report.modes {
        println!(
            "{mode:>16}  n={:<5} MAE {:6.2}  MAE RoI {:6.2}  SSIM {:6.2}  SSIM RoI {:6.2}",
            m.count, m.mae_all, m.mae_roi, m.ssim_all, m.ssim_roi
        );
    }
    if let Some(dir) = &a.heatmaps {
        let samples = ds.load_split(&a.split, a.limit)?;
        let h = metrics::predicate_heatmaps(&gen, &samples, &ds.vocab.predicates)?;
        metrics::write_heatmaps(&h, dir)?;
        std::fs::write(dir.join("heatmaps.json"), serde_json::to_string_pretty(&h)?)?;
        println!(
            "heatmaps: {} triplets, predicted side agreement {:.1}%",
            h.triplets,
            100.0 * h.predicted_agreement
        );
    }
    Ok(())
}

/// Build the service state the `serve` command would run with.
pub fn build_service(ckpt: Option<&Path>, data: Option<&Path>) -> anyhow::Result<EditService> {
    let ds = data.map(Dataset::open).transpose()?;
    let (gen, vocab, val_mae) = match ckpt {
        Some(p) => {
            let ck = Checkpoint::read(p)?;
            if let Some(ds) = &ds {
                if ds.vocab != ck.header.vocab {
                    bail!("checkpoint vocabulary does not match the dataset");
                }
            }
            let val = ck.header.training.as_ref().and_then(|t| t.last_val_mae);
            let vocab = ck.header.vocab.clone();
            let gen = ck.model(candle_core::DType::F32)?.generator;
            (Some(Arc::new(gen)), vocab, val)
        }
        None => {
            let vocab = ds.as_ref().map(|d| d.vocab.clone()).unwrap_or_else(clevr::vocab);
            (None, vocab, None)
        }
    };
    let mut svc = EditService::new(gen, vocab, ds);
    svc.validation_mae = val_mae;
    Ok(svc)
}

pub fn serve(a: &ServeArgs) -> anyhow::Result<()> {
    let svc = Arc::new(build_service(a.ckpt.as_deref(), a.data.as_deref())?);
    if svc.generator().is_none() {
        tracing::warn!("no checkpoint given; generation requests will fail with 503");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", a.port)).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, server::router(svc)).await?;
        Ok(())
    })
}

pub fn edit(a: &EditArgs) -> anyhow::Result<()> {
    let (gen, vocab) = checkpoint::load_generator(&a.ckpt, None)?;
    let source = RgbImage::load_png(&a.image)?;
    let graph = SceneGraph::load(&a.graph)?;
    let v = sgedit::validate_graph(&graph, vocab.sizes());
    if !v.is_empty() {
        return Err(sgedit::Error::InvalidGraph(v).into());
    }
    let ops: Vec<EditOp> = serde_json::from_str(&std::fs::read_to_string(&a.ops)?)
        .with_context(|| format!("reading edit list {}", a.ops.display()))?;
    let png = render_edit(&gen, &source, &graph, &ops, a.seed)?;
    std::fs::write(&a.out, png)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

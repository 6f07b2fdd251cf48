use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use d2ae_core::analytics::{self, EvalConfig, ProbeConfig, ProbeModel};
use d2ae_core::autodiff::Tensor;
use d2ae_core::data::{self, Dataset, FactorSample, Split};
use d2ae_core::editing::{self, AttributeEdit, EditRequest, IdentityTarget};
use d2ae_core::model::{D2AEModel, ModelConfig};
use d2ae_core::objective::{self, TrainConfig};
use d2ae_core::par::Execution;
use d2ae_core::persistence::{self, Checkpoint, CheckpointMeta};

use crate::service::{self, Service};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "d2ae", version, about = "Train, analyse and edit identity-disentangling autoencoders")]
pub struct Cli {
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset to PNGs plus a manifest.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Full evaluation report as JSON.
    Eval(EvalArgs),
    /// Fit attribute directions on the train split and write them as JSON.
    Probe(ProbeArgs),
    /// Edit one image along attribute directions and/or toward another identity.
    Edit(EditArgs),
    /// Channel Gaussianity and correlation statistics as JSON.
    Stats(StatsArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub n_id: usize,
    #[arg(long, default_value_t = 50)]
    pub per_id: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `name=alpha`, repeatable.
    #[arg(long = "attr", value_parser = parse_attr)]
    pub attrs: Vec<AttributeEdit>,
    #[arg(long, requires = "beta")]
    pub identity_image: Option<PathBuf>,
    #[arg(long, requires = "identity_image")]
    pub beta: Option<f64>,
    /// Probe file; defaults to the probes stored in the checkpoint.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Output PNG.
    #[arg(long, default_value = "edited.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Overridden by D2AE_PORT.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Dataset whose test images fill the gallery.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_attr(s: &str) -> Result<AttributeEdit, String> {
    let (name, alpha) = s.split_once('=').ok_or_else(|| format!("expected name=alpha, got '{s}'"))?;
    let alpha: f64 = alpha.trim().parse().map_err(|_| format!("alpha '{alpha}' is not a number"))?;
    if name.trim().is_empty() || !alpha.is_finite() {
        return Err(format!("invalid attribute edit '{s}'"));
    }
    Ok(AttributeEdit {
        attribute: name.trim().to_string(),
        alpha,
    })
}

/// Contents of a `--config` file. Missing sections take their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Probe(a) => probe(a, exec),
        Command::Edit(a) => edit(a),
        Command::Stats(a) => stats(a, exec),
        Command::Serve(a) => serve(a),
    }
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_ckpt(path: &Path) -> anyhow::Result<(Checkpoint, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = persistence::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((ckpt, persistence::sha256_hex(&bytes)))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    data::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_compatible(model: &D2AEModel<f32>, ds: &Dataset) -> anyhow::Result<()> {
    let c = model.config();
    if c.input_size != ds.manifest.image_size || c.n_id != ds.manifest.n_id {
        bail!(
            "dataset ({} identities, {}px) does not match the model ({} identities, {}px)",
            ds.manifest.n_id,
            ds.manifest.image_size,
            c.n_id,
            c.input_size
        );
    }
    Ok(())
}

fn load_probes(path: &Path) -> anyhow::Result<ProbeModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing probes {}", path.display()))
}

fn gen_data(a: GenDataArgs, exec: Execution) -> anyhow::Result<()> {
    let ds = data::generate(a.seed, a.n_id, a.per_id, a.size, exec)?;
    data::export(&ds, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, exec: Execution) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.exec = exec;
    let ds = load_data(&a.data)?;
    cfg.model.n_id = ds.manifest.n_id;
    cfg.model.input_size = ds.manifest.image_size;
    let mut model = D2AEModel::<f32>::new(cfg.model.clone())?;
    let train_set = ds.split(Split::Train);
    let val_set = ds.split(Split::Val);
    let val = (!val_set.is_empty()).then_some(&val_set);
    let log = objective::train(&mut model, &train_set, val, &cfg.train, |r| {
        let eval = r
            .eval
            .as_ref()
            .map(|m| format!(" | val acc_t {:.3} acc_p {:.3} H {:.3} psnr {:.2}", m.id_acc_t, m.id_acc_p, m.entropy_p, m.psnr))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3} lr {:.1e} id {:.4} adv {:.4} conf {:.4} rec {:.3} aug {:.3} total {:.4} ({:.1}s){eval}",
            r.epoch, r.lr, r.l_id, r.l_adv, r.l_conf, r.l_rec_clean, r.l_rec_aug, r.total, r.seconds
        );
    })?;
    let meta = CheckpointMeta {
        model: cfg.model.clone(),
        train: Some(cfg.train.clone()),
        epoch: cfg.train.epochs,
        seed: cfg.train.seed,
        metrics: serde_json::to_value(log.last())?,
    };
    persistence::save(&model, None, &meta, &a.out_ckpt)?;
    eprintln!("wrote {}", a.out_ckpt.display());
    Ok(())
}

fn eval(a: EvalArgs, exec: Execution) -> anyhow::Result<()> {
    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    check_compatible(&ckpt.model, &ds)?;
    let cfg = EvalConfig {
        exec,
        ..EvalConfig::default()
    };
    let report = analytics::evaluate_model(&ckpt.model, &ds, &cfg)?;
    write_json(&report, a.out.as_deref())
}

fn probe(a: ProbeArgs, exec: Execution) -> anyhow::Result<()> {
    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    check_compatible(&ckpt.model, &ds)?;
    let idx = ds.split_indices(Split::Train);
    let samples: Vec<&FactorSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
    if samples.iter().any(|s| s.factors.is_empty()) {
        bail!("probing needs attribute factors; this dataset has none");
    }
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let fps = ckpt.model.encode_batch(&images, exec)?;
    let table = analytics::probe_suite(&samples, &fps, &ProbeConfig::default(), exec)?;
    // edits move the identity-dispelled part
    write_json(&table.probes_p, Some(&a.out))?;
    write_json(&table.rows, None)
}

fn edit(a: EditArgs) -> anyhow::Result<()> {
    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let probes = match &a.probes {
        Some(p) => load_probes(p)?,
        None => ckpt.probes.clone(),
    };
    if !a.attrs.is_empty() && probes.is_empty() {
        bail!("no probes available; pass --probes or embed them in the checkpoint");
    }
    let size = ckpt.model.config().input_size;
    let image = data::load_png(&a.image, size)?;
    let identity = match (&a.identity_image, a.beta) {
        (Some(p), Some(beta)) => Some(IdentityTarget {
            f_t: ckpt.model.encode(&data::load_png(p, size)?)?.f_t,
            beta,
        }),
        _ => None,
    };
    let req = EditRequest {
        edits: a.attrs,
        identity,
    };
    let (out, provenance) = editing::render_edit(&ckpt.model, &probes, &image, &req)?;
    data::save_png(&out, &a.out)?;
    write_json(&provenance, None)
}

fn stats(a: StatsArgs, exec: Execution) -> anyhow::Result<()> {
    let (ckpt, _) = load_ckpt(&a.ckpt)?;
    let ds = load_data(&a.data)?;
    check_compatible(&ckpt.model, &ds)?;
    let images: Vec<Tensor<f32>> = ds.split_indices(Split::Test).iter().map(|&i| ds.samples[i].image.clone()).collect();
    let fps = ckpt.model.encode_batch(&images, exec)?;
    write_json(&analytics::channel_report(&fps)?, None)
}

/// One test image per identity, or freshly rendered samples when no
/// dataset is given.
fn gallery_images(model: &D2AEModel<f32>, seed: u64, data_dir: Option<&Path>) -> anyhow::Result<Vec<Tensor<f32>>> {
    let c = model.config();
    let ds = match data_dir {
        Some(p) => {
            let ds = load_data(p)?;
            check_compatible(model, &ds)?;
            ds
        }
        None => data::generate(seed, c.n_id, 5, c.input_size, Execution::Parallel)?,
    };
    let mut seen = vec![false; c.n_id];
    let mut out = Vec::new();
    for i in ds.split_indices(Split::Test) {
        let s = &ds.samples[i];
        if !seen[s.identity] {
            seen[s.identity] = true;
            out.push(s.image.clone());
        }
    }
    Ok(out)
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let port = match std::env::var("D2AE_PORT") {
        Ok(v) => v.parse::<u16>().with_context(|| format!("D2AE_PORT '{v}' is not a port number"))?,
        Err(_) => a.port,
    };
    let (ckpt, hash) = load_ckpt(&a.ckpt)?;
    let probes = match &a.probes {
        Some(p) => load_probes(p)?,
        None => ckpt.probes.clone(),
    };
    let gallery = gallery_images(&ckpt.model, ckpt.meta.seed, a.data.as_deref())?;
    let svc = Arc::new(Service::new(ckpt.model, probes, hash, &gallery)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(svc, port)).context("http service")?;
    Ok(())
}

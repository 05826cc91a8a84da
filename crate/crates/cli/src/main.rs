//! Command-line driver: data generation, both training stages, sampling and
//! evaluation. Every subcommand reads one JSON config and writes into one
//! output directory; identical config and seed give identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndiff::Tensor;
use serde_json::json;

use neurogen::config::RunConfig;
use neurogen::container::{self, Header};
use neurogen::data::{self, Dataset};
use neurogen::diffusion::{self, DiffusionModel, Guidance, TrainMask};
use neurogen::encoder::Autoencoder;
use neurogen::eval::{self, MetricRow, RetrievalIndex, RetrievalMode, Scope};
use neurogen::gradsuite;
use neurogen::train::{self, derive_seed, streams};
use neurogen::{Error, Result};

const STAGE1_CKPT: &str = "stage1.ckpt";
const STAGE1_METRICS: &str = "stage1_metrics.csv";
const BASE_CKPT: &str = "denoiser_base.ckpt";
const STAGE2_CKPT: &str = "stage2.ckpt";
const STAGE2_METRICS: &str = "stage2_metrics.csv";
const SAMPLES: &str = "samples.bin";
const RETRIEVAL: &str = "retrieval.csv";
const EMBEDDINGS: &str = "embeddings.csv";
const COSINE_MAP: &str = "cosine_map.csv";
const GENERATION: &str = "generation.csv";
const SWEEP: &str = "cfg_sweep.csv";
const GRAD_CHECK: &str = "grad_check.csv";
const CONFIG_COPY: &str = "config.json";

#[derive(Parser)]
#[command(
    name = "neurogen",
    version,
    about = "Signal-to-latent generation toolkit",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Run directory for inputs and outputs.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train the signal autoencoder.
    TrainStage1(Common),
    /// Pretrain the denoiser, then finetune adapter and key/value projections.
    TrainStage2(Common),
    /// Draw guided samples for the validation and test items.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Guidance scale; defaults to the configured one.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Retrieval accuracy, embedding export and class similarity map.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Class agreement and Frechet distance of the stored samples.
    EvalGen(Common),
    /// Finite-difference gradient checks of every differentiable target.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Sample and evaluate over a list of guidance scales.
    CfgSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scales; defaults to the configured sweep.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Val,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::TrainStage1(c) => train_stage1(&c),
        Command::TrainStage2(c) => train_stage2(&c),
        Command::Sample { common, scale } => sample(&common, scale),
        Command::EvalRetrieval { common, split } => eval_retrieval(&common, split),
        Command::EvalGen(c) => eval_gen(&c),
        Command::GradCheck { common, seeds } => grad_check(&common, seeds),
        Command::CfgSweep { common, scales } => cfg_sweep(&common, scales),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out).map_err(|e| Error::Invalid(format!("{}: {e}", c.out.display())))?;
    Ok(&c.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    container::write_atomic(path, text.as_bytes())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(data::MANIFEST_FILE).exists() {
        return Err(Error::Invalid(format!(
            "no dataset in {}; run gen-data first",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn header(kind: &str, cfg: &RunConfig, trainable: Vec<String>) -> Result<Header> {
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), serde_json::to_value(cfg)?);
    Ok(Header {
        kind: kind.into(),
        trainable,
        meta,
    })
}

fn checkpoint(dir: &Path, name: &str) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "missing checkpoint {}",
            path.display()
        )));
    }
    Ok(container::load_checkpoint(&path)?.1)
}

fn load_encoder(cfg: &RunConfig, dir: &Path) -> Result<Autoencoder> {
    let mut m = Autoencoder::new(cfg.encoder(), 0)?;
    m.params.load_from(&checkpoint(dir, STAGE1_CKPT)?, "")?;
    Ok(m)
}

fn load_denoiser(cfg: &RunConfig, dir: &Path, name: &str) -> Result<DiffusionModel> {
    let mut m = DiffusionModel::new(cfg.denoiser(), 0)?;
    m.params.load_from(&checkpoint(dir, name)?, "")?;
    Ok(m)
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let mut d = data::generate(&cfg.data)?;
    d.save(dir)?;
    write_text(&dir.join(CONFIG_COPY), &cfg.to_json()?)?;
    let s = &d.manifest.splits;
    println!(
        "{} windows (train {}, val {}, test {})",
        d.manifest.total,
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn train_stage1(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let d = load_dataset(dir)?;
    let r = train::train_stage1(&cfg, &d)?;
    container::save_checkpoint(
        r.model.params.as_map(),
        &header("encoder", &cfg, Vec::new())?,
        &dir.join(STAGE1_CKPT),
    )?;
    write_text(&dir.join(STAGE1_METRICS), &r.log.to_csv())?;
    let e = r.final_eval;
    println!(
        "mse {:.4} dice {:.4} top1 {:.4} top5 {:.4}",
        e.mse, e.dice, e.top1, e.top5
    );
    Ok(())
}

fn train_stage2(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let d = load_dataset(dir)?;
    let enc = load_encoder(&cfg, dir)?;
    let before = enc.params.as_map().clone();
    let r = train::train_stage2(&cfg, &d, &enc)?;

    if !train::changed_params(&before, enc.params.as_map()).is_empty() {
        return Err(Error::Invalid(
            "encoder parameters changed during stage 2".into(),
        ));
    }
    let stray: Vec<String> = train::changed_params(r.base.params.as_map(), r.model.params.as_map())
        .into_iter()
        .filter(|n| !r.mask.contains(n))
        .collect();
    if !stray.is_empty() {
        return Err(Error::Invalid(format!(
            "frozen parameters changed: {}",
            stray.join(", ")
        )));
    }

    let full = TrainMask::denoiser(&r.base).names().cloned().collect();
    container::save_checkpoint(
        r.base.params.as_map(),
        &header("denoiser", &cfg, full)?,
        &dir.join(BASE_CKPT),
    )?;
    let mask = r.mask.names().cloned().collect();
    container::save_checkpoint(
        r.model.params.as_map(),
        &header("denoiser", &cfg, mask)?,
        &dir.join(STAGE2_CKPT),
    )?;
    write_text(&dir.join(STAGE2_METRICS), &r.log.to_csv())?;
    if let Some(v) = r.log.last("v_loss") {
        println!("final v_loss {v:.6}");
    }
    Ok(())
}

/// Trained models plus the conditioning set shared by sampling commands.
struct Generator {
    cfg: RunConfig,
    data: Dataset,
    model: DiffusionModel,
    set: train::GenerationSet,
    items: Vec<usize>,
}

impl Generator {
    fn load(c: &Common) -> Result<Self> {
        let cfg = load_config(c)?;
        let dir = out_dir(c)?;
        let data = load_dataset(dir)?;
        let enc = load_encoder(&cfg, dir)?;
        let model = load_denoiser(&cfg, dir, STAGE2_CKPT)?;
        let items = train::generation_items(&data);
        let set = train::generation_set(&enc, &model, &data, &items, cfg.sampler.per_item)?;
        Ok(Self {
            cfg,
            data,
            model,
            set,
            items,
        })
    }

    fn draw(&self, scale: f64) -> Result<Tensor> {
        let st = &self.cfg.stage2;
        let schedule = diffusion::build_schedule(st.schedule_steps, st.beta_min, st.beta_max)?;
        let seed = derive_seed(self.cfg.seed, streams::SAMPLER);
        diffusion::sample(
            &self.model,
            &schedule,
            &self.set.conditions,
            Guidance::Scale(scale),
            self.cfg.sampler.steps,
            seed,
        )
    }
}

fn as_tensor(v: &[usize]) -> Tensor {
    Tensor::new([v.len()], v.iter().map(|&x| x as f64).collect()).expect("1-d")
}

fn generation_header() -> &'static str {
    "scale,class_agreement,frechet_distance\n"
}

fn generation_row(out: &mut String, m: &train::GenerationMetrics) {
    let _ = writeln!(
        out,
        "{},{},{}",
        m.scale, m.class_agreement, m.frechet_distance
    );
}

fn sample(c: &Common, scale: Option<f64>) -> Result<()> {
    let g = Generator::load(c)?;
    let scale = scale.unwrap_or(g.cfg.sampler.guidance);
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!(
            "guidance scale {scale} must be finite and non-negative"
        )));
    }
    let x = g.draw(scale)?;
    let mut meta = BTreeMap::new();
    meta.insert("scale".to_string(), json!(scale));
    meta.insert("steps".to_string(), json!(g.cfg.sampler.steps));
    meta.insert("seed".to_string(), json!(g.cfg.seed));
    let h = Header {
        kind: "samples".into(),
        trainable: Vec::new(),
        meta,
    };
    let labels = as_tensor(&g.set.labels);
    let items = as_tensor(&g.items);
    let records = [("samples", &x), ("labels", &labels), ("items", &items)];
    let (bytes, _) = container::encode(&h, records)?;
    container::write_atomic(&c.out.join(SAMPLES), &bytes)?;
    println!("{} samples at scale {scale}", x.shape()[0]);
    Ok(())
}

fn eval_gen(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let data = load_dataset(dir)?;
    let path = dir.join(SAMPLES);
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "missing {}; run sample first",
            path.display()
        )));
    }
    let s = container::read(&path)?;
    let get = |n: &str| {
        s.tensors
            .get(n)
            .cloned()
            .ok_or_else(|| Error::Format(format!("samples file lacks `{n}`")))
    };
    let samples = get("samples")?;
    let labels: Vec<usize> = get("labels")?.data().iter().map(|&v| v as usize).collect();
    let items: Vec<usize> = get("items")?.data().iter().map(|&v| v as usize).collect();
    let scale = s
        .header
        .meta
        .get("scale")
        .and_then(|v| v.as_f64())
        .unwrap_or(cfg.sampler.guidance);
    if items.iter().any(|&i| i >= data.windows.len()) {
        return Err(Error::Format(
            "sample items out of range for this dataset".into(),
        ));
    }
    let set = train::GenerationSet {
        conditions: Tensor::zeros([0]),
        labels,
        real: data.latent_batch(&items)?,
    };
    let m = train::generation_metrics(&samples, &set, &data, scale)?;
    let mut out = generation_header().to_string();
    generation_row(&mut out, &m);
    write_text(&dir.join(GENERATION), &out)?;
    print!("{out}");
    Ok(())
}

fn cfg_sweep(c: &Common, scales: Option<Vec<f64>>) -> Result<()> {
    let g = Generator::load(c)?;
    let scales = scales.unwrap_or_else(|| g.cfg.sampler.sweep.clone());
    if scales.is_empty() || scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::Config(
            "sweep scales must be non-empty, finite and non-negative".into(),
        ));
    }
    let mut out = generation_header().to_string();
    for &s in &scales {
        let x = g.draw(s)?;
        generation_row(
            &mut out,
            &train::generation_metrics(&x, &g.set, &g.data, s)?,
        );
    }
    write_text(&c.out.join(SWEEP), &out)?;
    print!("{out}");
    Ok(())
}

/// Consecutive chunks of `size`; a short tail joins the previous chunk.
fn local_batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < size) {
        let tail = out.pop().unwrap_or_default();
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn eval_retrieval(c: &Common, split: Split) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    let data = load_dataset(dir)?;
    let enc = load_encoder(&cfg, dir)?;
    let s = &data.manifest.splits;
    let (name, idx) = match split {
        Split::Val => ("val", s.val.clone()),
        Split::Test => ("test", s.test.clone()),
    };
    if idx.is_empty() {
        return Err(Error::Invalid(format!("{name} split is empty")));
    }
    let queries = train::pooled_latents(&enc, &data, &idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.windows[i].label).collect();
    let pairs: Vec<usize> = (0..idx.len()).collect();
    let gallery = RetrievalIndex::new(data.image_batch(&idx)?, labels.clone())?;
    let scopes = [
        Scope::Global,
        Scope::Local(local_batches(idx.len(), cfg.stage1.batch_size)),
    ];

    let mut rows = Vec::new();
    for scope in &scopes {
        let pool = match scope {
            Scope::Global => idx.len(),
            Scope::Local(b) => b.iter().map(Vec::len).min().unwrap_or(0),
        };
        for mode in [RetrievalMode::Image, RetrievalMode::Label] {
            for k in [1, 5].into_iter().filter(|&k| k <= pool) {
                rows.push(MetricRow {
                    metric: format!("top{k}"),
                    scope: scope.as_str().into(),
                    mode: mode.as_str().into(),
                    k: k.to_string(),
                    value: eval::topk_retrieval(
                        &queries, &pairs, &labels, &gallery, k, mode, scope,
                    )?,
                });
            }
        }
    }
    let csv = eval::metrics_csv(&rows);
    write_text(&dir.join(RETRIEVAL), &csv)?;

    let all: Vec<usize> = (0..data.windows.len()).collect();
    let pooled = train::pooled_latents(&enc, &data, &all)?;
    let all_labels = data.labels();
    eval::export_embeddings(&pooled, &all_labels, &dir.join(EMBEDDINGS))?;
    let map = eval::cosine_map(&pooled, &all_labels, data.manifest.dims.classes)?;
    write_text(&dir.join(COSINE_MAP), &matrix_csv(&map))?;
    print!("{csv}");
    Ok(())
}

fn matrix_csv(m: &Tensor) -> String {
    let k = m.shape()[0];
    let mut out = String::from("class");
    for j in 0..k {
        let _ = write!(out, ",c{j}");
    }
    out.push('\n');
    for i in 0..k {
        let _ = write!(out, "c{i}");
        for v in m.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn grad_check(c: &Common, seeds: u64) -> Result<()> {
    let cfg = load_config(c)?;
    let dir = out_dir(c)?;
    if seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let base = cfg.seed;
    let mut out = String::from("target,seed,max_rel_error\n");
    let mut worst = 0.0f64;
    for target in gradsuite::TARGETS {
        for k in 0..seeds {
            let seed = base.wrapping_add(k);
            let err = gradsuite::check_target(target, seed)?;
            worst = worst.max(err);
            let _ = writeln!(out, "{target},{seed},{err:e}");
        }
    }
    write_text(&dir.join(GRAD_CHECK), &out)?;
    println!(
        "worst relative error {worst:e} (tolerance {:e})",
        gradsuite::GRAD_TOL
    );
    if !(worst < gradsuite::GRAD_TOL) {
        return Err(Error::Invalid(format!("gradient check failed: {worst:e}")));
    }
    Ok(())
}

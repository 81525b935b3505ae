use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use optree::dataset::{dataset_generate, load_dataset, DataConfig, Manifest, Sample};
use optree::formula::tree_to_formula;
use optree::generate::{generate_ots, Conditioned, Decoding};
use optree::lbfgs::{fit_constants_restarts, LbfgsConfig};
use optree::metrics::metric_suite;
use optree::nn::{Model, NetConfig};
use optree::ots::{ots_to_tree, ConstVec, Ots};
use optree::render::FuncImage;
use optree::report::similarity_report;
use optree::teacher::{export_teacher, HashTeacher, ImportedTeacher, Teacher};
use optree::vocab::OperatorVocab;
use optree::train::{finetune, pretrain, FinetuneTask, TrainConfig, TrainState};
use optree::checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "optree", version, about = "Operation-tree / function-image / formula alignment")]
struct Cli {
    /// JSON file with optional `data`, `net` and `train` objects. Its
    /// fields override the corresponding flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global default seed.
    #[arg(long, global = true, env = "OPTREE_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of image/OTS/formula triples.
    Gen(GenArgs),
    /// Pre-train all encoders with the four alignment losses.
    Pretrain(PretrainArgs),
    /// Fine-tune the decoder on one generation task.
    Finetune(FinetuneArgs),
    /// Decode a dataset and print the metric report as JSON.
    Eval(EvalArgs),
    /// Image blob -> OTS -> fitted constants -> formula.
    Infer(InferArgs),
    /// Write cosine-similarity matrices as CSV.
    Report(ReportArgs),
    /// Export or import frozen teacher features.
    Teacher(TeacherArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_skeletons: usize,
    #[arg(long, default_value_t = 4)]
    images_per_skeleton: usize,
    #[arg(long, default_value_t = 5)]
    min_nodes: usize,
    #[arg(long, default_value_t = 15)]
    max_nodes: usize,
    #[arg(long, default_value_t = 0.001)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 64)]
    points_per_dim: usize,
}

#[derive(Args)]
struct TeacherSel {
    /// Directory of imported teacher features; the hash teacher otherwise.
    #[arg(long)]
    teacher_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    teacher_seed: u64,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    decay_every_epochs: Option<u64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    n_neg: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    d_f: usize,
    /// Per-step loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    teacher: TeacherSel,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    task: FinetuneTask,
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    d_f: usize,
    /// Keep the conditioning encoder fixed.
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    teacher: TeacherSel,
}

#[derive(Args)]
struct EvalArgs {
    /// Print the metric report.
    #[arg(long)]
    metrics: bool,
    #[arg(long)]
    task: FinetuneTask,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    limit: Option<usize>,
    /// Beam width; greedy when omitted.
    #[arg(long)]
    beam: Option<usize>,
    /// Include per-sample rows.
    #[arg(long)]
    rows: bool,
    #[command(flatten)]
    teacher: TeacherSel,
}

#[derive(Args)]
struct InferArgs {
    /// f32 image blob with its `.json` sidecar.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    similarity: bool,
    #[arg(long)]
    data: PathBuf,
    /// Untrained model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    d_f: usize,
    #[command(flatten)]
    teacher: TeacherSel,
}

#[derive(Args)]
struct TeacherArgs {
    /// Write hash-teacher features for every formula in `--data`.
    #[arg(long, conflicts_with = "import", requires = "data")]
    export: Option<PathBuf>,
    /// Check an exported directory and print its entry count.
    #[arg(long)]
    import: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    teacher_seed: u64,
    #[arg(long, default_value_t = 48)]
    width: usize,
}

/// Sections of the structured config file.
#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    data: Value,
    net: Value,
    train: Value,
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) if !o.is_null() => *b = o.clone(),
        _ => {}
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: T, over: &Value) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, over);
    Ok(serde_json::from_value(v)?)
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn train_config(flags: &TrainFlags, seed: u64, file: &FileConfig) -> Result<TrainConfig> {
    let mut c = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(v) = flags.steps {
        c.steps = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr_max {
        c.lr_max = v;
    }
    if let Some(v) = flags.decay_every_epochs {
        c.decay_every_epochs = v;
    }
    if let Some(v) = flags.queue_capacity {
        c.queue_capacity = v;
    }
    if let Some(v) = flags.n_neg {
        c.n_neg = v;
    }
    let c = overlay(c, &file.train)?;
    c.validate()?;
    Ok(c)
}

/// Network shape follows the dataset; width and seed come from flags.
fn net_config(manifest: &Manifest, d_f: usize, seed: u64, file: &FileConfig) -> Result<NetConfig> {
    let data = &manifest.config;
    let grid = data.grid()?;
    let base = NetConfig {
        d_f,
        max_len: data.gen.max_ots_len,
        const_slots: data.const_slots,
        vocab_size: data.vocab()?.size(),
        n_scales: grid.n_scales(),
        points_per_channel: grid.points_per_channel(),
        init_seed: seed,
        ..NetConfig::default()
    };
    let c = overlay(base, &file.net)?;
    c.validate()?;
    Ok(c)
}

fn teacher_from(sel: &TeacherSel, width: usize) -> Result<Box<dyn Teacher>> {
    Ok(match &sel.teacher_dir {
        Some(dir) => Box::new(ImportedTeacher::load(dir, width)?),
        None => Box::new(HashTeacher::new(width, sel.teacher_seed)),
    })
}

fn load_data(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let (m, s) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if s.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    Ok((m, s))
}

fn decoding(beam: Option<usize>) -> Decoding {
    beam.map_or(Decoding::Greedy, Decoding::Beam)
}

fn write_log(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

fn cmd_gen(a: &GenArgs, seed: u64, file: &FileConfig) -> Result<()> {
    let mut c = DataConfig {
        n_skeletons: a.n_skeletons,
        images_per_skeleton: a.images_per_skeleton,
        noise_sigma: a.noise_sigma,
        points_per_dim: a.points_per_dim,
        seed,
        ..DataConfig::default()
    };
    c.gen.node_range = [a.min_nodes, a.max_nodes];
    let c = overlay(c, &file.data)?;
    let m = dataset_generate(&c, &a.out)?;
    println!("{} records, {} skeletons, {}", m.n_records, m.n_skeletons, m.content_hash);
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs, seed: u64, file: &FileConfig) -> Result<()> {
    let (manifest, data) = load_data(&a.data)?;
    let tc = train_config(&a.train, seed, file)?;
    let nc = net_config(&manifest, a.d_f, seed, file)?;
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p, Some(&nc))?,
        None => TrainState::new(Model::new(nc.clone())?, &tc)?,
    };
    let teacher = teacher_from(&a.teacher, nc.teacher_width)?;
    let log = pretrain(&mut state, &data, teacher.as_ref(), &tc, |r| {
        if r.step % 100 == 0 {
            eprintln!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.total);
        }
    })?;
    save_checkpoint(&state, &a.out)?;
    if let Some(p) = &a.log {
        write_log(
            p,
            "step,lr,foc,fom,om,kd,total",
            log.iter().map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.step, r.lr, r.parts.foc, r.parts.fom, r.parts.om, r.parts.kd, r.total
                )
            }),
        )?;
    }
    println!("saved {} at step {}", a.out.display(), state.step);
    Ok(())
}

fn cmd_finetune(a: &FinetuneArgs, seed: u64, file: &FileConfig) -> Result<()> {
    let (manifest, data) = load_data(&a.data)?;
    let mut tc = train_config(&a.train, seed, file)?;
    tc.train_encoder = !a.freeze_encoder;
    let nc = net_config(&manifest, a.d_f, seed, file)?;
    let mut state = match &a.checkpoint {
        Some(p) => load_checkpoint(p, None)?,
        None => TrainState::new(Model::new(nc.clone())?, &tc)?,
    };
    let width = state.model.config().teacher_width;
    let teacher = match a.task {
        FinetuneTask::FormulaOts => Some(teacher_from(&a.teacher, width)?),
        FinetuneTask::FuncimgOts => None,
    };
    let losses = finetune(&mut state.model, &data, teacher.as_deref(), a.task, &tc)?;
    save_checkpoint(&state, &a.out)?;
    if let Some(p) = &a.log {
        write_log(p, "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{i},{l}")))?;
    }
    println!(
        "final loss {:.5}, saved {}",
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn predict(
    model: &Model,
    vocab: &OperatorVocab,
    task: FinetuneTask,
    s: &Sample,
    teacher: Option<&dyn Teacher>,
    mode: Decoding,
) -> Result<Ots> {
    let cond = match task {
        FinetuneTask::FuncimgOts => model.encode_funcimg(&s.image)?,
        FinetuneTask::FormulaOts => {
            let t = teacher.context("formula task needs a teacher")?;
            model.teacher_embedder(&t.extract(&s.formula)?.values)?
        }
    };
    let c = Conditioned { model, cond: &cond };
    Ok(generate_ots(&c, vocab, model.config().max_len, mode)?)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !a.metrics {
        bail!("nothing to evaluate; pass --metrics");
    }
    let (manifest, mut data) = load_data(&a.data)?;
    if let Some(n) = a.limit {
        data.truncate(n);
    }
    let state = load_checkpoint(&a.checkpoint, None)?;
    let teacher = match a.task {
        FinetuneTask::FormulaOts => Some(teacher_from(&a.teacher, state.model.config().teacher_width)?),
        FinetuneTask::FuncimgOts => None,
    };
    let mode = decoding(a.beam);
    let vocab = manifest.config.vocab()?;
    let pred = data
        .iter()
        .map(|s| predict(&state.model, &vocab, a.task, s, teacher.as_deref(), mode))
        .collect::<Result<Vec<_>>>()?;
    let target: Vec<Ots> = data.iter().map(|s| s.ots.clone()).collect();
    let consts: Vec<ConstVec> = data.iter().map(|s| s.consts.clone()).collect();
    let mut report = metric_suite(&pred, &target, None, &consts, &vocab)?;
    if !a.rows {
        report.rows.clear();
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_infer(a: &InferArgs, seed: u64) -> Result<()> {
    let (image, meta) = FuncImage::read_blob(&a.image)?;
    let grid = meta.grid()?;
    let state = load_checkpoint(&a.checkpoint, None)?;
    let model = &state.model;
    let vocab = OperatorVocab::standard(meta.dims);
    let cond = model.encode_funcimg(&image)?;
    let ots = generate_ots(&Conditioned { model, cond: &cond }, &vocab, model.config().max_len, decoding(a.beam))?;
    let placeholder = ConstVec::from_values(&vec![0.0; ots.max_len()]);
    let tree = ots_to_tree(&ots, &placeholder, &vocab).context("decoded sequence is not a valid tree")?;
    let fit = fit_constants_restarts(&tree, &image, &grid, a.restarts, seed, &LbfgsConfig::default())?;
    let names: Vec<String> = ots
        .tokens()
        .iter()
        .map(|&t| vocab.symbol(t).map_or_else(|| "?".into(), |s| s.name()))
        .collect();
    println!("ots: {}", names.join(" "));
    println!("mse: {:e}", fit.mse);
    println!("{}", tree_to_formula(&tree, &fit.consts)?);
    Ok(())
}

fn cmd_report(a: &ReportArgs, seed: u64, file: &FileConfig) -> Result<()> {
    if !a.similarity {
        bail!("nothing to report; pass --similarity");
    }
    let (manifest, data) = load_data(&a.data)?;
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p, None)?.model,
        None => Model::new(net_config(&manifest, a.d_f, seed, file)?)?,
    };
    let tc = overlay(TrainConfig::default(), &file.train)?;
    let teacher = teacher_from(&a.teacher, model.config().teacher_width)?;
    let slice: Vec<&Sample> = data.iter().take(a.n).collect();
    similarity_report(
        &model,
        &slice,
        teacher.as_ref(),
        tc.pooling,
        tc.teacher_pooling,
        Some(&a.out),
    )?;
    print!("{}", fs::read_to_string(a.out.join("summary.csv"))?);
    Ok(())
}

fn cmd_teacher(a: &TeacherArgs) -> Result<()> {
    match (&a.export, &a.import) {
        (Some(out), None) => {
            let data_dir = a.data.as_ref().context("--export needs --data")?;
            let (_, data) = load_data(data_dir)?;
            let formulas: Vec<String> = data.iter().map(|s| s.formula.clone()).collect();
            export_teacher(&HashTeacher::new(a.width, a.teacher_seed), &formulas, out)?;
            println!("exported teacher features to {}", out.display());
        }
        (None, Some(dir)) => {
            let t = ImportedTeacher::load(dir, a.width)?;
            println!("{} entries, teacher {}", t.len(), t.id());
        }
        _ => bail!("pass exactly one of --export or --import"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = read_file_config(cli.config.as_deref())?;
    match &cli.cmd {
        Command::Gen(a) => cmd_gen(a, cli.seed, &file),
        Command::Pretrain(a) => cmd_pretrain(a, cli.seed, &file),
        Command::Finetune(a) => cmd_finetune(a, cli.seed, &file),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a, cli.seed),
        Command::Report(a) => cmd_report(a, cli.seed, &file),
        Command::Teacher(a) => cmd_teacher(a),
    }
}

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use udpad::adapt::{
    adapt_self_training, adapt_supervised, predict, pretrain, train_adapter, EvalOptions,
    MetricRecord, MetricsWriter, SpeakerCodeAdapter, TrainOptions,
};
use udpad::cluster::{read_embeddings, run_pipeline, write_outputs, Thresholds};
use udpad::experiments::{ablate_layers, render_table, summarize, Method, RunConfig, Sweep};
use udpad::model::{checkpoint, ModelConfig, Preset, RecognizerModel, Task};
use udpad::padding::{init_padding, PaddingRegistry};
use udpad::synthdata::{
    self, budget_subset, AdaptBudget, BudgetMode, Clip, DataSplit, SynthConfig,
};
use udpad::tensor::udtf;
use udpad::{Error, Exec, Result};

#[derive(Parser)]
#[command(
    name = "udpad",
    version,
    about = "Speaker adaptation with per-user convolution padding"
)]
struct Cli {
    /// Worker threads for independent folds and speakers.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-speaker dataset.
    GenData(GenDataArgs),
    /// Train a recognizer on the seen speakers.
    Pretrain(PretrainArgs),
    /// Learn a speaker's padding from labeled adaptation clips.
    Enroll(EnrollArgs),
    /// Learn a speaker's padding from confident predictions on unlabeled clips.
    AdaptUnsup(AdaptUnsupArgs),
    /// Decode clips with a speaker's padding, or the bare model if none is stored.
    Recognize(RecognizeArgs),
    /// Accuracy tables by speaker, budget and method.
    Eval(EvalArgs),
    /// Group video embeddings by speaker.
    Cluster(ClusterArgs),
    /// Sweep the number of padded layers against the adaptation budget.
    AblateLayers(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Sequence,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Speaker count; the last two are held out.
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    clips_per_speaker: Option<usize>,
    #[arg(long)]
    adapt_clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
    /// Classes missing from each held-out speaker's adaptation pool.
    #[arg(long)]
    adapt_missing_classes: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Convolution layers of the front-end.
    #[arg(long, default_value_t = 5, value_parser = parse_preset)]
    preset: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(id = "budget", required = true, multiple = false)]
struct BudgetArgs {
    /// Adaptation minutes (20 clips per minute).
    #[arg(long, group = "budget")]
    minutes: Option<f64>,
    /// Share of the speaker's adaptation pool.
    #[arg(long, group = "budget")]
    fraction: Option<f64>,
}

impl BudgetArgs {
    fn mode(&self) -> BudgetMode {
        match (self.minutes, self.fraction) {
            (Some(m), _) => BudgetMode::Minutes(m),
            (_, Some(f)) => BudgetMode::Fraction(f),
            _ => unreachable!("clap requires one budget flag"),
        }
    }
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    speaker: String,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 1)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics file (JSON lines); printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptUnsupArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    speaker: String,
    /// Confidence cutoff; 0.8 for classification and 0.9 for sequences by default.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    speaker: String,
    /// Clip files `[T, 1, H, W]`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    beam: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out speakers; all of them when absent.
    #[arg(long)]
    speaker: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        conflicts_with = "fraction",
        default_value = "1,3,5"
    )]
    minutes: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    fraction: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,udp,finetune")]
    methods: Vec<MethodArg>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Udp,
    Finetune,
    SpeakerCode,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Baseline => Method::Baseline,
            MethodArg::Udp => Method::Udp,
            MethodArg::Finetune => Method::Finetune,
            MethodArg::SpeakerCode => Method::SpeakerCode,
        }
    }
}

#[derive(Args)]
struct ClusterArgs {
    /// Directory with `index.tsv`, `embeddings.f32` and `meta.json`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.41)]
    t1: f64,
    #[arg(long, default_value_t = 0.63)]
    t2: f64,
    #[arg(long, default_value_t = 0.63)]
    t3: f64,
    #[arg(long, default_value_t = 0.59)]
    t4: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Assign videos in a seeded random order instead of input order.
    #[arg(long)]
    shuffle: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Padded layer counts (the first n convolutions).
    #[arg(long, alias = "layers", value_delimiter = ',', default_value = "5,11,17", value_parser = parse_preset)]
    preset: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    minutes: Vec<f64>,
    #[arg(long)]
    speaker: Vec<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_preset(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (5 | 11 | 17)) => Ok(n),
        _ => Err(format!("expected 5, 11 or 17, got '{s}'")),
    }
}

fn load_model(path: &Path) -> Result<RecognizerModel> {
    checkpoint::load(path)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[allow(clippy::too_many_arguments)]
fn run_config(
    command: &str,
    model: &RecognizerModel,
    data: &SynthConfig,
    budgets: Vec<BudgetMode>,
    folds: usize,
    seed: u64,
    threshold: Option<f64>,
    paths: &[(&str, &Path)],
) -> RunConfig {
    RunConfig {
        command: command.into(),
        preset_layers: model.config().convs.len(),
        task: model.config().task,
        data: data.clone(),
        budgets,
        folds,
        seed,
        threshold,
        adapt: TrainOptions::adaptation().with_seed(seed),
        finetune: TrainOptions::finetune().with_seed(seed),
        paths: paths
            .iter()
            .map(|(k, v)| (k.to_string(), path_str(v)))
            .collect::<BTreeMap<_, _>>(),
    }
}

fn emit(records: &[MetricRecord], out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = MetricsWriter::append(path)?;
            for r in records {
                w.write(r)?;
            }
            w.flush()
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for r in records {
                writeln!(stdout, "{}", serde_json::to_string(r)?)?;
            }
            Ok(())
        }
    }
}

fn heldout_speakers(split: &DataSplit, requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(split.heldout.iter().map(|h| h.speaker_id.clone()).collect());
    }
    for s in requested {
        split.speaker(s)?;
    }
    Ok(requested.to_vec())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = match a.task {
        TaskArg::Classification => SynthConfig::classification(),
        TaskArg::Sequence => SynthConfig::sequence(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.speakers {
        if n < 3 {
            return Err(Error::Config(format!("need at least 3 speakers, got {n}")));
        }
        cfg.num_speakers = n;
        cfg.holdout_ids = vec![n - 2, n - 1];
    }
    if let Some(n) = a.clips_per_speaker {
        cfg.clips_per_speaker = n;
        cfg.seen_test_clips = cfg.seen_test_clips.min(n);
    }
    if let Some(n) = a.adapt_clips {
        cfg.adapt_clips = n;
    }
    if let Some(n) = a.test_clips {
        cfg.test_clips = n;
    }
    if let Some(n) = a.adapt_missing_classes {
        cfg.adapt_missing_classes = n;
    }
    cfg.validate()?;
    let split = synthdata::generate(&cfg)?;
    let manifest = synthdata::export(&split, &a.out)?;
    println!(
        "{} clips written to {}",
        split.clip_count(),
        manifest.display()
    );
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let split = synthdata::load(&a.data)?;
    let cfg = ModelConfig::preset(
        Preset::from_layers(a.preset)?,
        split.config.task,
        split.config.vocab,
    );
    let mut model = RecognizerModel::new(cfg, a.seed)?;
    let mut opts = TrainOptions::pretrain().with_seed(a.seed);
    if let Some(e) = a.epochs {
        opts.max_epochs = e;
    }
    let train: Vec<&Clip> = split.train.iter().collect();
    let report = pretrain(&mut model, &train, &opts)?;
    checkpoint::save(&model, &a.out)?;
    let seen: Vec<&Clip> = split.seen_test.iter().collect();
    let acc = udpad::adapt::evaluate(&model, &seen, None, &EvalOptions::default())?;
    println!(
        "trained {} parameters for {} epochs; final loss {:.4}; seen-speaker accuracy {:.2}",
        model.param_count(),
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        acc
    );
    Ok(())
}

fn enroll(a: &EnrollArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = synthdata::load(&a.data)?;
    let registry = PaddingRegistry::open(&a.registry, &model)?;
    let h = split.speaker(&a.speaker)?;
    let mode = a.budget.mode();
    let rc = run_config(
        "enroll",
        &model,
        &split.config,
        vec![mode],
        a.folds,
        a.seed,
        None,
        &[
            ("model", &a.model),
            ("data", &a.data),
            ("registry", &a.registry),
        ],
    );
    let budget = AdaptBudget::new(mode, a.seed, a.folds);
    let test: Vec<&Clip> = h.test.iter().collect();
    let eval = EvalOptions::default();
    let run_id = rc.run_id()?;
    let mut records = Vec::new();
    for fold in 0..a.folds {
        let subset = budget_subset(&split, &a.speaker, &budget, fold)?;
        let opts = rc.adapt.with_seed(a.seed.wrapping_add(fold as u64));
        let (p, report) =
            adapt_supervised(&model, &init_padding(&model, &a.speaker), &subset, &opts)?;
        let acc = udpad::adapt::evaluate(&model, &test, Some(&p), &eval)?;
        if fold == 0 {
            let path = registry.put(&p)?;
            eprintln!("stored padding for {} at {}", a.speaker, path.display());
        }
        eprintln!(
            "fold {fold}: {} clips, {} epochs, accuracy {acc:.2}",
            subset.len(),
            report.epoch_losses.len()
        );
        records.push(MetricRecord {
            run_id: run_id.clone(),
            method: "udp".into(),
            speaker: a.speaker.clone(),
            budget: budget.label(),
            fold,
            seed: opts.seed,
            metric_name: "accuracy".into(),
            value: acc,
            config: serde_json::to_value(&rc)?,
        });
    }
    emit(&records, a.out.as_deref())
}

fn adapt_unsup(a: &AdaptUnsupArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = synthdata::load(&a.data)?;
    let registry = PaddingRegistry::open(&a.registry, &model)?;
    let h = split.speaker(&a.speaker)?;
    let threshold = a.threshold.unwrap_or(match model.config().task {
        Task::Classification => 0.8,
        Task::CtcSequence => 0.9,
    });
    let rc = run_config(
        "adapt-unsup",
        &model,
        &split.config,
        vec![BudgetMode::All],
        1,
        a.seed,
        Some(threshold),
        &[
            ("model", &a.model),
            ("data", &a.data),
            ("registry", &a.registry),
        ],
    );
    let pool: Vec<&Clip> = h.adapt.iter().chain(&h.test).collect();
    let eval = EvalOptions::default();
    let (p, report) = adapt_self_training(
        &model,
        &init_padding(&model, &a.speaker),
        &pool,
        threshold,
        a.rounds,
        &rc.adapt,
        &eval,
    )?;
    let path = registry.put(&p)?;
    let base = udpad::adapt::evaluate(&model, &pool, None, &eval)?;
    let acc = udpad::adapt::evaluate(&model, &pool, Some(&p), &eval)?;
    for (i, r) in report.rounds.iter().enumerate() {
        eprintln!(
            "round {i}: {} of {} predictions above {threshold}",
            r.pseudo_labels, r.candidates
        );
    }
    eprintln!("stored padding for {} at {}", a.speaker, path.display());
    let run_id = rc.run_id()?;
    let config = serde_json::to_value(&rc)?;
    let mut records = Vec::new();
    let mut push = |method: &str, name: &str, value: f64| {
        records.push(MetricRecord {
            run_id: run_id.clone(),
            method: method.into(),
            speaker: a.speaker.clone(),
            budget: "unlabeled".into(),
            fold: 0,
            seed: a.seed,
            metric_name: name.into(),
            value,
            config: config.clone(),
        })
    };
    push("baseline", "accuracy", base);
    push("self_training", "accuracy", acc);
    if let Some(first) = report.rounds.first() {
        push("self_training", "pseudo_labels", first.pseudo_labels as f64);
        if let Some(v) = first.precision {
            push("self_training", "precision", v);
        }
        if let Some(v) = first.precision_unfiltered {
            push("self_training", "precision_unfiltered", v);
        }
    }
    emit(&records, a.out.as_deref())
}

fn recognize(a: &RecognizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let padding = match &a.registry {
        Some(dir) => PaddingRegistry::open(dir, &model)?.get(&a.speaker)?,
        None => None,
    };
    if padding.is_none() {
        warn!(
            "no padding stored for speaker '{}'; decoding with the bare model",
            a.speaker
        );
    }
    let clips = a
        .input
        .iter()
        .map(|path| {
            let mut f = std::io::BufReader::new(
                std::fs::File::open(path).map_err(|_| Error::MissingFile(path.clone()))?,
            );
            Ok(Clip {
                frames: udtf::read_tensor(&mut f)?,
                label: synthdata::Label::Class(0),
                speaker_id: a.speaker.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Clip> = clips.iter().collect();
    let eval = EvalOptions {
        beam_width: a.beam,
        ..EvalOptions::default()
    };
    let preds = predict(&model, &refs, padding.as_ref(), &eval)?;
    let mut out = std::io::stdout().lock();
    for (path, p) in a.input.iter().zip(preds) {
        writeln!(
            out,
            "{}\t{}\t{:.6}",
            path.display(),
            serde_json::to_string(&p.label)?,
            p.confidence
        )?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = synthdata::load(&a.data)?;
    let speakers = heldout_speakers(&split, &a.speaker)?;
    let budgets: Vec<BudgetMode> = if a.fraction.is_empty() {
        a.minutes.iter().map(|&m| BudgetMode::Minutes(m)).collect()
    } else {
        a.fraction
            .iter()
            .map(|&f| BudgetMode::Fraction(f))
            .collect()
    };
    let rc = run_config(
        "eval",
        &model,
        &split.config,
        budgets,
        a.folds,
        a.seed,
        None,
        &[("model", &a.model), ("data", &a.data)],
    );
    let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
    let adapter = if methods.contains(&Method::SpeakerCode) {
        let channels = model.config().convs.last().map_or(0, |c| c.out_channels);
        let mut ad = SpeakerCodeAdapter::new(channels, &SpeakerCodeAdapter::SMALL_CODES, a.seed);
        let train: Vec<&Clip> = split.train.iter().collect();
        let opts = TrainOptions {
            max_epochs: 5,
            ..TrainOptions::pretrain().with_seed(a.seed)
        };
        train_adapter(&model, &mut ad, &train, &opts)?;
        Some(ad)
    } else {
        None
    };
    let sweep = Sweep {
        config: &rc,
        methods,
        adapter: adapter.as_ref(),
        eval: EvalOptions::default(),
        tag: String::new(),
    };
    let records = sweep.run(&model, &split, &speakers, Exec::Parallel)?;
    print!("{}", render_table(&records, "accuracy"));
    if model.config().task == Task::CtcSequence {
        print!("{}", render_table(&records, "wer"));
    }
    for ((method, budget), v) in summarize(&records, "accuracy") {
        println!("mean accuracy {method} {budget}: {v:.2}");
    }
    if let Some(out) = &a.out {
        emit(&records, Some(out))?;
    }
    Ok(())
}

fn cluster_cmd(a: &ClusterArgs) -> Result<()> {
    let th = Thresholds {
        t1: a.t1,
        t2: a.t2,
        t3: a.t3,
        t4: a.t4,
        m: a.momentum,
    };
    th.validate()?;
    let embeddings = read_embeddings(&a.input)?;
    let ordered = match a.shuffle {
        Some(seed) => udpad::cluster::shuffled(&embeddings, seed),
        None => embeddings,
    };
    let out = run_pipeline(&ordered, &th, Exec::Parallel)?;
    write_outputs(&a.out, &ordered, &out, &th)?;
    let c = &out.counts;
    println!(
        "{} videos: {} clusters after assignment, {} after verification, {} after merging; {} boundary pairs",
        c.videos, c.assigned, c.verified, c.merged, c.candidates
    );
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let split = synthdata::load(&a.data)?;
    let speakers = heldout_speakers(&split, &a.speaker)?;
    let budgets = a.minutes.iter().map(|&m| BudgetMode::Minutes(m)).collect();
    let rc = run_config(
        "ablate-layers",
        &model,
        &split.config,
        budgets,
        a.folds,
        a.seed,
        None,
        &[("model", &a.model), ("data", &a.data)],
    );
    let (grid, records) = ablate_layers(
        &model,
        &split,
        &speakers,
        &a.preset,
        &rc,
        EvalOptions::default(),
        Exec::Parallel,
    )?;
    print!("{}", grid.render());
    if let Some(out) = &a.out {
        emit(&records, Some(out))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        udpad::exec::set_threads(n.max(1))?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Enroll(a) => enroll(a),
        Command::AdaptUnsup(a) => adapt_unsup(a),
        Command::Recognize(a) => recognize(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Cluster(a) => cluster_cmd(a),
        Command::AblateLayers(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

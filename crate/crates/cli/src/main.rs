mod config;

use clap::{Args, Parser, Subcommand};
use config::{resolve, ModelFlags, RunConfig, ScheduleFlags};
use relspeech::checkpoint::{average_checkpoints, Checkpoint};
use relspeech::compare::{compare_modes, token_error_rate};
use relspeech::data::{Dataset, SyntheticTaskSpec, TaskSplits, Utterance, Vocab};
use relspeech::model::{DecodeStrategy, Model, RESERVED};
use relspeech::training::{evaluate_perplexity, StopReason, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "relspeech",
    version,
    about = "Speech Transformer with relative position encodings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic task (train, test and padded test splits)
    GenData(GenDataArgs),
    /// Train a model on a dataset file
    Train(TrainArgs),
    /// Perplexity and token error rate of a checkpoint
    Eval(EvalArgs),
    /// Decode every utterance of a dataset
    Decode(DecodeArgs),
    /// Train absolute and relative models and compare their robustness to padding
    CompareModes(CompareArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    alphabet: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    pad_min: usize,
    #[arg(long, default_value_t = 4)]
    pad_max: usize,
    #[arg(long, default_value_t = 20)]
    shift_min: usize,
    #[arg(long, default_value_t = 40)]
    shift_max: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset file
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset file (enables perplexity and checkpoint averaging)
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Where the final (or averaged) checkpoint goes
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// JSON file with `model` and `schedule` sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Average the K best checkpoints by validation perplexity
    #[arg(long)]
    average: Option<usize>,
    /// Metric log destination (stdout when absent)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write every retained checkpoint here
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Validate and print the effective configuration, then stop
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output length limit (defaults to the number of input frames)
    #[arg(long)]
    max_out: Option<usize>,
    /// Sample from the output distribution instead of taking the argmax
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Directory written by `gen-data`
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated seeds
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the report here
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    schedule: ScheduleFlags,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<relspeech::Error> for Failure {
    fn from(e: relspeech::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Resolves a required path argument, failing with exit code 2 and the flag name.
fn existing<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    match path {
        None => Err(Failure::usage(format!("missing required {flag} <PATH>"))),
        Some(p) if !p.exists() => Err(Failure::usage(format!("{flag}: {} does not exist", p.display()))),
        Some(p) => Ok(p),
    }
}

fn load_dataset(path: &Option<PathBuf>, flag: &str) -> Result<Dataset, Failure> {
    let p = existing(path, flag)?;
    Dataset::load(p).map_err(|e| Failure {
        code: 1,
        message: format!("{flag} {}: {e}", p.display()),
    })
}

fn print_config(cfg: &RunConfig) {
    println!("effective config:");
    println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let out = a
        .out_dir
        .as_deref()
        .ok_or_else(|| Failure::usage("missing required --out-dir <DIR>"))?;
    let spec = SyntheticTaskSpec {
        alphabet: a.alphabet,
        feature_dim: a.feature_dim,
        noise: a.noise,
        pad: (a.pad_min, a.pad_max),
        seed: a.seed,
        ..SyntheticTaskSpec::default()
    };
    let task = spec.build()?;
    let splits = task.splits(a.train, a.test, (a.shift_min, a.shift_max), a.seed);
    std::fs::create_dir_all(out)?;
    let save = |name: &str, utts: &[Utterance]| -> Outcome {
        Dataset {
            feature_dim: spec.feature_dim,
            vocab_size: spec.vocab_size(),
            utterances: utts.to_vec(),
        }
        .save(&out.join(name))?;
        Ok(())
    };
    save("train.txt", &splits.train)?;
    save("test.txt", &splits.test)?;
    save("test_shifted.txt", &splits.test_shifted)?;
    std::fs::write(
        out.join("task.json"),
        serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )?;
    println!(
        "wrote {} train, {} test and {} shifted test utterances to {}",
        splits.train.len(),
        splits.test.len(),
        splits.test_shifted.len(),
        out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Outcome {
    let data = load_dataset(&a.train, "--train")?;
    let valid = match &a.valid {
        Some(_) => Some(load_dataset(&a.valid, "--valid")?),
        None => None,
    };
    if a.average.is_some() && valid.is_none() {
        return Err(Failure::usage("--average needs --valid for checkpoint perplexities"));
    }
    let mut cfg = resolve(a.config.as_deref(), &a.model, &a.schedule).map_err(Failure::usage)?;
    cfg.model.input_dim = data.feature_dim;
    cfg.model.vocab_size = data.vocab_size;
    print_config(&cfg);
    cfg.model.validate()?;
    cfg.schedule.validate()?;
    if a.dry_run {
        return Ok(());
    }

    let model = Model::new(cfg.model.clone(), cfg.schedule.seed)?;
    let mut trainer = Trainer::new(model, cfg.schedule.clone())?;
    let report = trainer.train(&data.utterances, valid.as_ref().map(|v| v.utterances.as_slice()))?;
    match &a.log {
        Some(p) => std::fs::write(p, report.log_text())?,
        None => print!("{}", report.log_text()),
    }
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        for c in &report.checkpoints {
            c.save(&dir.join(format!("step-{:07}.ckpt", c.step)))?;
        }
    }
    let final_ckpt = match a.average {
        Some(k) => average_checkpoints(&report.checkpoints, k)?,
        None => Checkpoint::from_model(trainer.model(), trainer.step(), None, Some(trainer.optimizer())),
    };
    final_ckpt.save(&a.out)?;
    println!("saved {} after {} updates", a.out.display(), report.steps);
    if let StopReason::Diverged { step, loss } = report.stop {
        return Err(Failure {
            code: 1,
            message: format!("training diverged at update {step} (loss {loss}); last good parameters saved"),
        });
    }
    Ok(())
}

fn load_model(path: &Option<PathBuf>) -> Result<Model, Failure> {
    let p = existing(path, "--checkpoint")?;
    Ok(Checkpoint::load(p)?.to_model()?)
}

fn eval(a: &EvalArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data, "--data")?;
    let ppl = evaluate_perplexity(&model, &data.utterances)?;
    let ter = token_error_rate(&model, &data.utterances)?;
    println!("utterances={}", data.utterances.len());
    println!("perplexity={ppl:.6}");
    println!("token_error_rate={ter:.6}");
    Ok(())
}

fn decode(a: &DecodeArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.data, "--data")?;
    let vocab = Vocab::synthetic(model.config().vocab_size.saturating_sub(RESERVED)).ok();
    let show = |ids: &[usize]| match &vocab {
        Some(v) => v.detokenize(ids),
        None => ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
    };
    let strategy = if a.sample {
        DecodeStrategy::Sample {
            temperature: a.temperature,
            seed: a.seed,
        }
    } else {
        DecodeStrategy::Greedy
    };
    for (i, u) in data.utterances.iter().enumerate() {
        let max_out = a.max_out.unwrap_or(u.features.rows());
        let out = model.decode(&u.features, max_out, strategy)?;
        println!("{i}\thyp={}\tref={}", show(&out.tokens), show(&u.target));
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Outcome {
    let dir = existing(&a.data_dir, "--data-dir")?;
    let load = |name: &str| -> Result<Dataset, Failure> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Failure::usage(format!("--data-dir: {} is missing", p.display())));
        }
        Ok(Dataset::load(&p)?)
    };
    let train = load("train.txt")?;
    let test = load("test.txt")?;
    let shifted = load("test_shifted.txt")?;
    let mut cfg = resolve(a.config.as_deref(), &a.model, &a.schedule).map_err(Failure::usage)?;
    cfg.model.input_dim = train.feature_dim;
    cfg.model.vocab_size = train.vocab_size;
    print_config(&cfg);
    let splits = TaskSplits {
        train: train.utterances,
        test: test.utterances,
        test_shifted: shifted.utterances,
    };
    let report = compare_modes(&splits, &cfg.model, &cfg.schedule, &a.seeds)?;
    let text = report.render();
    print!("{text}");
    if let Some(p) = &a.report {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::CompareModes(a) => compare(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

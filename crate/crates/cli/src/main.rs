use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use cosync::config::KvMap;
use cosync::data_io::{
    generate_synthetic_corpus, load_corpus, load_record, save_corpus, save_generated, SyntheticTaskSpec,
    UtteranceRecord,
};
use cosync::flow::GuidanceSpec;
use cosync::metrics::{summarize_by_nfe, write_eval_csv};
use cosync::model::Model;
use cosync::trainer::{
    evaluate, generate, load_checkpoint, train_loop, Checkpoint, RunConfig, TrainExample, TrainState, LOSS_CSV,
};
use cosync::verify::{run_verify, VerifyOptions};

/// Seed override read when `--seed` is absent.
const SEED_ENV: &str = "COSYNC_SEED";

#[derive(Parser)]
#[command(name = "cosync", version, about = "Synthetic-data flow-matching dubbing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a task spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the target span of one record.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 32)]
        nfe: usize,
        #[arg(long, default_value_t = 0.0)]
        lambda_a: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_s: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus and write a CSV table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32])]
        nfe: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        lambda_a: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_s: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Verify {
        #[arg(long, hide = true)]
        corrupt_lip_gate: bool,
    },
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const VERIFY_FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;
const ARTIFACT_MISMATCH: u8 = 3;
const RUNTIME_ABORT: u8 = 4;

trait ExitContext<T> {
    fn exit_code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn exit_code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { CONFIG_ERROR } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
        } => cmd_train(&config, &data, &out, resume.as_deref(), seed),
        Command::Infer {
            checkpoint,
            record,
            nfe,
            lambda_a,
            lambda_s,
            seed,
            out,
        } => cmd_infer(&checkpoint, &record, nfe, (lambda_a, lambda_s), seed, &out),
        Command::Eval {
            checkpoint,
            data,
            nfe,
            lambda_a,
            lambda_s,
            seed,
            out,
        } => cmd_eval(&checkpoint, &data, &nfe, (lambda_a, lambda_s), seed, &out),
        Command::Verify { corrupt_lip_gate } => cmd_verify(corrupt_lip_gate),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Seed precedence: flag, then environment, then the fallback.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            .exit_code(CONFIG_ERROR),
        Err(_) => Ok(fallback),
    }
}

fn load_kv(path: &Path) -> Result<KvMap, Failure> {
    if !path.is_file() {
        return Err(anyhow!("config file {} does not exist", path.display())).exit_code(CONFIG_ERROR);
    }
    KvMap::load(path)
        .with_context(|| format!("reading {}", path.display()))
        .exit_code(CONFIG_ERROR)
}

fn echo(title: &str, text: &str) {
    println!("# {title}");
    print!("{text}");
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let spec = SyntheticTaskSpec::from_kv(load_kv(spec_path)?)
        .and_then(|s| s.validate().map(|()| s))
        .with_context(|| format!("in {}", spec_path.display()))
        .exit_code(CONFIG_ERROR)?;
    echo("resolved spec", &spec.to_kv().to_text());
    let records = generate_synthetic_corpus(&spec).exit_code(RUNTIME_ABORT)?;
    let paths = save_corpus(&records, out).exit_code(RUNTIME_ABORT)?;
    println!("wrote {} records to {}", paths.len(), out.display());
    Ok(())
}

fn load_examples(dir: &Path, cfg: &cosync::model::ModelConfig) -> Result<Vec<TrainExample>, Failure> {
    let records = load_corpus(dir)
        .with_context(|| format!("loading corpus {}", dir.display()))
        .exit_code(ARTIFACT_MISMATCH)?;
    if records.is_empty() {
        return Err(anyhow!("no records in {}", dir.display())).exit_code(ARTIFACT_MISMATCH);
    }
    TrainExample::prepare(&records, cfg)
        .context("corpus does not match the model configuration")
        .exit_code(ARTIFACT_MISMATCH)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .exit_code(ARTIFACT_MISMATCH)
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<(), Failure> {
    let mut run = RunConfig::from_kv(load_kv(config)?)
        .with_context(|| format!("in {}", config.display()))
        .exit_code(CONFIG_ERROR)?;
    run.train.seed = resolve_seed(seed, run.train.seed)?;
    echo("resolved config", &run.to_text());

    let corpus = load_examples(data, &run.model)?;
    let (model, mut state) = match resume {
        Some(path) => {
            let ckpt = load_ckpt(path)?;
            if ckpt.model_cfg != run.model {
                return Err(anyhow!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                ))
                .exit_code(ARTIFACT_MISMATCH);
            }
            println!("resuming from step {}", ckpt.state.step);
            (ckpt.model, ckpt.state)
        }
        None => {
            let (model, params) = Model::new(&run.model, run.train.seed).exit_code(CONFIG_ERROR)?;
            (model, TrainState::new(params))
        }
    };
    println!("{} parameters, {} utterances", state.params.num_scalars(), corpus.len());
    train_loop(&model, &run.model, &run.train, &mut state, &corpus, Some(out), |r| {
        let branches: Vec<&str> = r.branches.iter().map(|b| b.as_str()).collect();
        println!(
            "step {:>6}  total {:.6}  l_fm {:.6}  branches {}",
            r.step,
            r.total,
            r.l_fm,
            branches.join("|")
        );
    })
    .exit_code(RUNTIME_ABORT)?;
    println!(
        "finished at step {}; loss log {}",
        state.step,
        out.join(LOSS_CSV).display()
    );
    Ok(())
}

fn guidance(lambdas: (f64, f64)) -> Result<GuidanceSpec, Failure> {
    GuidanceSpec::new(lambdas.0, lambdas.1).exit_code(CONFIG_ERROR)
}

fn cmd_infer(
    checkpoint: &Path,
    record: &Path,
    nfe: usize,
    lambdas: (f64, f64),
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let guidance = guidance(lambdas)?;
    let ckpt = load_ckpt(checkpoint)?;
    let seed = resolve_seed(seed, ckpt.train_cfg.seed)?;
    println!("# resolved settings");
    println!(
        "nfe = {nfe}\nlambda_a = {}\nlambda_s = {}\nseed = {seed}",
        lambdas.0, lambdas.1
    );
    let rec = load_record(record)
        .with_context(|| format!("loading record {}", record.display()))
        .exit_code(ARTIFACT_MISMATCH)?;
    let ex = TrainExample::from_record(&rec, &ckpt.model_cfg)
        .context("record does not match the checkpoint")
        .exit_code(ARTIFACT_MISMATCH)?;
    let gen = generate(&ckpt.model, &ckpt.state.params, &ex, guidance, nfe, seed, 0).exit_code(RUNTIME_ABORT)?;
    let output = UtteranceRecord {
        mel: gen.full.t().as_standard_layout().into_owned(),
        ..rec
    };
    let region = gen.region.t().as_standard_layout().into_owned();
    save_generated(&output, &region, (gen.mask.start, gen.mask.end), out).exit_code(RUNTIME_ABORT)?;
    println!(
        "generated frames [{}, {}) of {}",
        gen.mask.start,
        gen.mask.end,
        ex.frames()
    );
    println!("evaluations = {}", gen.evaluations);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    nfes: &[usize],
    lambdas: (f64, f64),
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let guidance = guidance(lambdas)?;
    if nfes.is_empty() || nfes.contains(&0) {
        return Err(anyhow!("--nfe needs one or more positive step counts")).exit_code(CONFIG_ERROR);
    }
    let ckpt = load_ckpt(checkpoint)?;
    let seed = resolve_seed(seed, ckpt.train_cfg.seed)?;
    println!("# resolved settings");
    let list: Vec<String> = nfes.iter().map(usize::to_string).collect();
    println!(
        "nfe = {}\nlambda_a = {}\nlambda_s = {}\nseed = {seed}",
        list.join(","),
        lambdas.0,
        lambdas.1
    );
    let corpus = load_examples(data, &ckpt.model_cfg)?;
    let rows = evaluate(&ckpt.model, &ckpt.state.params, &corpus, nfes, guidance, seed).exit_code(RUNTIME_ABORT)?;
    write_eval_csv(&rows, out).exit_code(RUNTIME_ABORT)?;
    println!("nfe,region_mse,sync_kl");
    for (nfe, mse, kl) in summarize_by_nfe(&rows) {
        println!("{nfe},{mse:.6},{kl:.6}");
    }
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_verify(corrupt_lip_gate: bool) -> Result<(), Failure> {
    let report = run_verify(&VerifyOptions { corrupt_lip_gate });
    print!("{}", report.table());
    println!("{} checks, {} failed", report.checks.len(), report.failed().len());
    if report.all_passed() {
        Ok(())
    } else {
        Err(anyhow!("failed checks: {}", report.failed().join(", "))).exit_code(VERIFY_FAILED)
    }
}

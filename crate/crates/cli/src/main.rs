//! `adaptts` command line: corpus generation, pre-training, per-speaker
//! adaptation, synthesis, evaluation and parameter accounting.
//!
//! Every command prints a one-line JSON summary to stdout, writes file
//! artifacts atomically, and honors `--seed`. Exit codes: 0 success,
//! 2 usage/configuration error, 3 incompatible delta, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use adaptts_core::checkpoint::{self, load_corpus, save_corpus};
use adaptts_core::config::{Precision, RunConfig, Strategy};
use adaptts_core::error::Error;
use adaptts_core::model::{synthesize, Model, ADAPTED_REFERENCE_MEL, MIX_LOGITS};
use adaptts_core::params::{ParamSet, TensorKind};
use adaptts_core::peft;
use adaptts_core::speaker::SpeakerSource;
use adaptts_core::synth::{make_corpus, CorpusParams, SpeakerRole};
use adaptts_core::tensor::{Mat, Scalar};
use adaptts_core::train::{
    adapt, evaluate_speaker, export_adapted_delta, pretrain, unadapted_view, EvalReport,
};

#[derive(Parser)]
#[command(name = "adaptts", version, about = "Parameter-efficient speaker adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus.
    GenCorpus {
        /// Number of speakers.
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        /// Utterances per speaker (train pool for pretrain corpora,
        /// adaptation pool for adapt corpora).
        #[arg(long, default_value_t = 50)]
        utts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Corpus role: pretrain | adapt.
        #[arg(long, default_value = "pretrain")]
        role: String,
        /// Held-out test utterances per speaker (adapt corpora).
        #[arg(long, default_value_t = 20)]
        test_utts: usize,
        /// Optional run-config JSON for vocabulary and mel dimensions.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pre-train the multi-speaker base model.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Adapt a frozen base to one new speaker, emitting a delta checkpoint.
    Adapt {
        #[arg(long)]
        base: PathBuf,
        /// adapter | lora | prefix | bitfit | full
        #[arg(long)]
        strategy: String,
        /// Adaptation corpus (adapt role).
        #[arg(long)]
        data: PathBuf,
        /// Speaker index inside the adaptation corpus.
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 2)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional evaluation report (JSON) over the corpus test split.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Synthesize a mel-spectrogram from phoneme ids.
    Synth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Comma-separated phoneme ids, e.g. 3,1,4,1,5.
        #[arg(long)]
        text_ids: String,
        /// Pretrained speaker id (ignored when --delta is given).
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a base or adapted model against a test corpus.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Report trainable-parameter counts for a strategy.
    Params {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err.downcast_ref::<Error>() {
                Some(Error::IncompatibleDelta(_)) => ExitCode::from(3),
                Some(Error::Config(_)) | Some(Error::Input(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_run_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn parse_strategy(s: &str) -> anyhow::Result<Strategy> {
    let strategy: Strategy = s.parse::<Strategy>()?;
    if strategy == Strategy::None {
        return Err(Error::Config("strategy 'none' is not adaptable".into()).into());
    }
    Ok(strategy)
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::GenCorpus {
            speakers,
            utts,
            seed,
            out,
            role,
            test_utts,
            config,
        } => {
            let rc = load_run_config(&config)?;
            if speakers < 1 || utts < 1 {
                return Err(Error::Input("need at least one speaker and one utterance".into()).into());
            }
            let role = match role.as_str() {
                "pretrain" => SpeakerRole::Pretrain,
                "adapt" => SpeakerRole::Adapt,
                other => {
                    return Err(Error::Config(format!("unknown corpus role '{other}'")).into());
                }
            };
            let mut params = CorpusParams::pretrain(speakers, utts, seed);
            params.role = role;
            params.test_utts = if role == SpeakerRole::Adapt { test_utts } else { 0 };
            params.vocab_size = rc.model.vocab_size;
            params.mel_dim = rc.model.mel_dim;
            match rc.model.precision {
                Precision::F32 => {
                    let corpus = make_corpus::<f32>(&params)?;
                    save_corpus(&out, &corpus)?;
                }
                Precision::F64 => {
                    let corpus = make_corpus::<f64>(&params)?;
                    save_corpus(&out, &corpus)?;
                }
            }
            let samples = speakers * utts;
            println!(
                "{}",
                json!({
                    "cmd": "gen-corpus",
                    "out": out.display().to_string(),
                    "speakers": speakers,
                    "utts_per_speaker": utts,
                    "samples": samples,
                    "seed": seed,
                })
            );
            Ok(())
        }
        Cmd::Pretrain {
            corpus,
            out,
            seed,
            config,
        } => {
            let rc = load_run_config(&config)?;
            match rc.model.precision {
                Precision::F32 => cmd_pretrain::<f32>(&corpus, &out, seed, &rc),
                Precision::F64 => cmd_pretrain::<f64>(&corpus, &out, seed, &rc),
            }
        }
        Cmd::Adapt {
            base,
            strategy,
            data,
            speaker,
            steps,
            lr,
            seed,
            out,
            report,
            config,
        } => {
            let rc = load_run_config(&config)?;
            let strategy = parse_strategy(&strategy)?;
            match checkpoint::peek_base_precision(&base)? {
                Precision::F32 => {
                    cmd_adapt::<f32>(&base, strategy, &data, speaker, steps, lr, seed, &out, &report, &rc)
                }
                Precision::F64 => {
                    cmd_adapt::<f64>(&base, strategy, &data, speaker, steps, lr, seed, &out, &report, &rc)
                }
            }
        }
        Cmd::Synth {
            base,
            delta,
            text_ids,
            speaker,
            seed: _,
            out,
        } => match checkpoint::peek_base_precision(&base)? {
            Precision::F32 => cmd_synth::<f32>(&base, &delta, &text_ids, speaker, &out),
            Precision::F64 => cmd_synth::<f64>(&base, &delta, &text_ids, speaker, &out),
        },
        Cmd::Eval {
            base,
            delta,
            testset,
            seed: _,
            report,
            config,
        } => {
            let rc = load_run_config(&config)?;
            match checkpoint::peek_base_precision(&base)? {
                Precision::F32 => cmd_eval::<f32>(&base, &delta, &testset, &report, &rc),
                Precision::F64 => cmd_eval::<f64>(&base, &delta, &testset, &report, &rc),
            }
        }
        Cmd::Params {
            base,
            strategy,
            seed,
            config,
        } => {
            let rc = load_run_config(&config)?;
            let strategy = parse_strategy(&strategy)?;
            match checkpoint::peek_base_precision(&base)? {
                Precision::F32 => cmd_params::<f32>(&base, strategy, seed, &rc),
                Precision::F64 => cmd_params::<f64>(&base, strategy, seed, &rc),
            }
        }
    }
}

fn cmd_pretrain<T: Scalar>(
    corpus_path: &Path,
    out: &Path,
    seed: u64,
    rc: &RunConfig,
) -> anyhow::Result<()> {
    let corpus = load_corpus::<T>(corpus_path)?;
    let (model, run) = pretrain(&corpus, &rc.model, &rc.pretrain, &rc.loss, seed)?;
    checkpoint::save_base(out, &model)?;
    let steps = run.loss_curve.len();
    println!(
        "{}",
        json!({
            "cmd": "pretrain",
            "out": out.display().to_string(),
            "seed": seed,
            "steps": steps,
            "initial_loss": run.loss_curve.first().copied().unwrap_or(0.0),
            "final_loss": run.loss_curve.last().copied().unwrap_or(0.0),
            "params_total": model.params.param_elems(),
            "wall_ms": run.wall_ms,
        })
    );
    Ok(())
}

/// Trainable fraction denominator: every parameter that is not
/// strategy-injected (the full-fine-tuning count).
fn params_total_excluding_peft<T: Scalar>(model: &Model<T>) -> usize {
    model
        .params
        .iter()
        .filter(|(n, e)| e.kind == TensorKind::Parameter && !n.starts_with("peft."))
        .map(|(_, e)| e.mat.len())
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt<T: Scalar>(
    base_path: &Path,
    strategy: Strategy,
    data_path: &Path,
    speaker_idx: usize,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: u64,
    out: &Path,
    report: &Option<PathBuf>,
    rc: &RunConfig,
) -> anyhow::Result<()> {
    let base = checkpoint::load_base::<T>(base_path)?;
    let corpus = load_corpus::<T>(data_path)?;
    if corpus.template_seed != base.meta.template_seed {
        return Err(Error::Input(format!(
            "corpus template seed {} does not match the base model's {}",
            corpus.template_seed, base.meta.template_seed
        ))
        .into());
    }
    let speaker = corpus
        .speakers
        .get(speaker_idx)
        .ok_or_else(|| Error::Input(format!("no speaker {speaker_idx} in {}", data_path.display())))?;
    if speaker.role != SpeakerRole::Adapt {
        return Err(Error::Input(format!("speaker {speaker_idx} is not adapt-role data")).into());
    }

    let mut peft_cfg = rc.peft.clone();
    peft_cfg.strategy = strategy;
    let mut adapt_cfg = rc.adapt.clone();
    if let Some(s) = steps {
        adapt_cfg.steps = s;
    }
    if let Some(l) = lr {
        adapt_cfg.lr = l;
    }

    let (adapted, trainable, run) = adapt(&base, &peft_cfg, speaker, &adapt_cfg, &rc.loss, seed)?;
    let delta = export_adapted_delta(&adapted, &trainable, speaker.latent.seed, adapt_cfg.steps)?;
    let base_sha = checkpoint::sha256_file(base_path)?;
    checkpoint::save_delta(out, &delta, base_sha)?;

    let params_total = params_total_excluding_peft(&adapted);
    let params_trainable = trainable.elems(&adapted.params);

    if let Some(report_path) = report {
        let mut rep = if speaker.test.is_empty() {
            EvalReport {
                secs: f64::NAN,
                cfsd: f64::NAN,
                mse_p: f64::NAN,
                mse_d: f64::NAN,
                mel_mse: f64::NAN,
                params_total: 0,
                params_trainable: 0,
                steps: 0,
                wall_ms: 0,
                per_speaker: Vec::new(),
                loss_curve: None,
            }
        } else {
            let one = evaluate_speaker(&adapted, &SpeakerSource::Adapted, speaker, &rc.loss)?;
            let mut rep = EvalReport {
                secs: one.secs,
                cfsd: one.cfsd,
                mse_p: one.mse_p,
                mse_d: one.mse_d,
                mel_mse: one.mel_mse,
                params_total: 0,
                params_trainable: 0,
                steps: 0,
                wall_ms: 0,
                per_speaker: vec![one],
                loss_curve: None,
            };
            rep.loss_curve = Some(run.loss_curve.clone());
            rep
        };
        rep.params_total = params_total;
        rep.params_trainable = params_trainable;
        rep.steps = adapt_cfg.steps;
        rep.wall_ms = run.wall_ms;
        rep.loss_curve = Some(run.loss_curve.clone());
        checkpoint::atomic_write(report_path, serde_json::to_string_pretty(&rep)?.as_bytes())?;
    }

    println!(
        "{}",
        json!({
            "cmd": "adapt",
            "strategy": strategy.to_string(),
            "out": out.display().to_string(),
            "seed": seed,
            "steps": adapt_cfg.steps,
            "params_total": params_total,
            "params_trainable": params_trainable,
            "final_loss": run.loss_curve.last().copied().unwrap_or(0.0),
            "wall_ms": run.wall_ms,
        })
    );
    Ok(())
}

fn parse_text_ids(text: &str) -> anyhow::Result<Vec<usize>> {
    let ids: Result<Vec<usize>, _> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect();
    ids.map_err(|e| Error::Input(format!("bad --text-ids: {e}")).into())
}

fn cmd_synth<T: Scalar>(
    base_path: &Path,
    delta_path: &Option<PathBuf>,
    text_ids: &str,
    speaker: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let tokens = parse_text_ids(text_ids)?;
    let (model, source) = match delta_path {
        Some(d) => (
            checkpoint::load_composed::<T>(base_path, d)?,
            SpeakerSource::Adapted,
        ),
        None => (
            checkpoint::load_base::<T>(base_path)?,
            SpeakerSource::Pretrained(speaker),
        ),
    };
    let synthesis = synthesize(&model, &tokens, &source)?;

    let mut table = ParamSet::<T>::new();
    table.insert_buffer("synth.mel", synthesis.mel.clone());
    table.insert_buffer("synth.pitch", Mat::row_vec(&synthesis.pitch));
    let durs: Vec<T> = synthesis
        .durations
        .iter()
        .map(|&d| T::from_f64(d as f64))
        .collect();
    table.insert_buffer("synth.durations", Mat::row_vec(&durs));
    checkpoint::save_tensor_file(out, &table)?;

    println!(
        "{}",
        json!({
            "cmd": "synth",
            "out": out.display().to_string(),
            "tokens": tokens.len(),
            "frames": synthesis.mel.rows(),
        })
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(
    base_path: &Path,
    delta_path: &Option<PathBuf>,
    testset: &Path,
    report_path: &Path,
    rc: &RunConfig,
) -> anyhow::Result<()> {
    let base = checkpoint::load_base::<T>(base_path)?;
    let corpus = load_corpus::<T>(testset)?;
    if corpus.template_seed != base.meta.template_seed {
        return Err(Error::Input("corpus and base use different phoneme templates".into()).into());
    }

    let start = std::time::Instant::now();
    let mut per_speaker = Vec::new();
    let mut params_trainable = 0usize;
    let mut params_total = params_total_excluding_peft(&base);
    match delta_path {
        Some(d) => {
            let composed = checkpoint::load_composed::<T>(base_path, d)?;
            let (delta, _) = checkpoint::load_delta::<T>(d)?;
            let speaker = corpus
                .speakers
                .iter()
                .find(|s| s.latent.seed == delta.meta.speaker_seed && s.role == SpeakerRole::Adapt)
                .ok_or_else(|| {
                    Error::Input(format!(
                        "testset has no adapt speaker with seed {}",
                        delta.meta.speaker_seed
                    ))
                })?;
            let trainable = peft::build_trainable_set(&composed.peft, &composed)?;
            params_trainable = trainable.elems(&composed.params);
            params_total = params_total_excluding_peft(&composed);
            per_speaker.push(evaluate_speaker(
                &composed,
                &SpeakerSource::Adapted,
                speaker,
                &rc.loss,
            )?);
        }
        None => {
            for sp in &corpus.speakers {
                if sp.role != SpeakerRole::Adapt || sp.test.is_empty() {
                    continue;
                }
                let view = unadapted_view(&base, sp)?;
                per_speaker.push(evaluate_speaker(&view, &SpeakerSource::Adapted, sp, &rc.loss)?);
            }
            if per_speaker.is_empty() {
                return Err(Error::Input("testset has no adapt-role speakers".into()).into());
            }
        }
    }

    let mut report = EvalReport::from_speakers(per_speaker);
    report.params_total = params_total;
    report.params_trainable = params_trainable;
    report.wall_ms = start.elapsed().as_millis() as u64;
    checkpoint::atomic_write(report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "{}",
        json!({
            "cmd": "eval",
            "report": report_path.display().to_string(),
            "secs": report.secs,
            "cfsd": report.cfsd,
            "mse_p": report.mse_p,
            "mse_d": report.mse_d,
            "mel_mse": report.mel_mse,
        })
    );
    Ok(())
}

fn cmd_params<T: Scalar>(
    base_path: &Path,
    strategy: Strategy,
    seed: u64,
    rc: &RunConfig,
) -> anyhow::Result<()> {
    let base = checkpoint::load_base::<T>(base_path)?;
    let mut work = base.clone();
    work.peft = rc.peft.clone();
    work.peft.strategy = strategy;
    let mut rng = {
        use rand_chacha::rand_core::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    };
    peft::init_peft_tensors(&mut work, &mut rng)?;
    work.params.overlay(
        MIX_LOGITS,
        Mat::<T>::zeros(1, base.n_speakers().max(1)),
        TensorKind::Parameter,
    );
    work.params.overlay(
        ADAPTED_REFERENCE_MEL,
        Mat::<T>::zeros(1, base.cfg.mel_dim),
        TensorKind::Buffer,
    );
    let trainable = peft::build_trainable_set(&work.peft, &work)?;
    let params_total = params_total_excluding_peft(&work);
    let params_trainable = trainable.elems(&work.params);
    println!(
        "{}",
        json!({
            "cmd": "params",
            "strategy": strategy.to_string(),
            "params_total": params_total,
            "params_trainable": params_trainable,
            "fraction": params_trainable as f64 / params_total as f64,
        })
    );
    Ok(())
}

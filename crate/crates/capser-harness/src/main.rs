//! `capser` — train and evaluate capsule-routing speech emotion models.
//!
//! Subcommands cover the full pipeline: MFCC extraction from WAV files,
//! synthetic corpus generation, k-fold single-corpus training, paired
//! cross-corpus adaptation, checkpoint evaluation, and embedding export.
//! All configuration files are JSON; all corpora use the directory layout
//! documented in `capser_harness::corpus`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use capser_audio::{compute_mfcc, load_wav, CoeffMode, MfccConfig};
use capser_harness::corpus::write_features_csv;
use capser_harness::eval::{adapted_report, classifier_report};
use capser_harness::train::prepare_features;
use capser_harness::{
    export_embeddings, run_cross_corpus, run_single_corpus, Corpus, CrossRunConfig, EvalReport,
    SingleRunConfig,
};
use capser_model::{load_checkpoint, Checkpoint, ModelConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "capser",
    version,
    about = "Capsule-routing speech emotion recognition experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract MFCC features from every WAV file in a directory.
    ///
    /// Writes `features/<stem>.csv` and `meta.csv` into the output
    /// directory, and copies `labels.csv` / `emotions.csv` through when the
    /// input directory provides them, so a labelled WAV directory becomes a
    /// loadable corpus.
    ExtractMfcc {
        wav_dir: PathBuf,
        out_dir: PathBuf,
        /// Coefficients per frame.
        #[arg(long, default_value_t = 39)]
        coeffs: usize,
        /// Split the coefficient budget into statics plus first and second
        /// temporal derivatives.
        #[arg(long)]
        deltas: bool,
        /// Z-normalize each coefficient over the utterance.
        #[arg(long)]
        normalize: bool,
    },
    /// Generate a synthetic corpus from a JSON job spec.
    Synth {
        /// JSON file: `{"spec": {...}, "draw_seed": N}`.
        spec: PathBuf,
        out_dir: PathBuf,
    },
    /// Run k-fold single-corpus training/evaluation from a JSON config.
    TrainSingle { config: PathBuf },
    /// Run a paired cross-corpus adaptation experiment (adversarial arm
    /// plus source-only baseline) from a JSON config.
    TrainCross { config: PathBuf },
    /// Evaluate a checkpoint on a labelled corpus directory.
    Eval {
        checkpoint: PathBuf,
        corpus_dir: PathBuf,
    },
    /// Write one eval-mode embedding row per utterance to a CSV file.
    ExportEmbeddings {
        checkpoint: PathBuf,
        corpus_dir: PathBuf,
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn extract_mfcc(
    wav_dir: &Path,
    out_dir: &Path,
    coeffs: usize,
    deltas: bool,
    normalize: bool,
) -> anyhow::Result<()> {
    let cfg = MfccConfig {
        num_coeffs: coeffs,
        coeff_mode: if deltas {
            CoeffMode::WithDeltas
        } else {
            CoeffMode::Static
        },
        normalize,
        ..MfccConfig::default()
    };

    let mut wavs: Vec<PathBuf> = std::fs::read_dir(wav_dir)
        .with_context(|| format!("cannot list {}", wav_dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        bail!("no .wav files in {}", wav_dir.display());
    }

    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir)?;
    let mut meta = String::from("id,sample_rate,frame_length,frame_shift\n");
    for path in &wavs {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("non-UTF-8 file name {}", path.display()))?;
        let clip = load_wav(path)?;
        let features = compute_mfcc(&clip, &cfg)?;
        write_features_csv(&features_dir.join(format!("{stem}.csv")), &features)?;
        meta.push_str(&format!(
            "{stem},{},{},{}\n",
            features.sample_rate, features.frame_length, features.frame_shift
        ));
        log::info!(
            "{}: {} frames x {} coefficients",
            stem,
            features.num_frames,
            features.num_coeffs
        );
    }
    std::fs::write(out_dir.join("meta.csv"), meta)?;

    for name in ["labels.csv", "emotions.csv"] {
        let src = wav_dir.join(name);
        if src.exists() {
            std::fs::copy(&src, out_dir.join(name))?;
        } else {
            log::warn!(
                "{} not found next to the WAV files; the output cannot be loaded as a corpus until it exists",
                name
            );
        }
    }
    println!("extracted {} utterances into {}", wavs.len(), out_dir.display());
    Ok(())
}

fn print_report(report: &EvalReport, label_names: &[String]) {
    println!("war {:.6}", report.war);
    println!("uar {:.6}", report.uar);
    for (c, row) in report.confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total > 0 {
            println!(
                "recall {} {:.6} ({} items)",
                label_names[c],
                row[c] as f64 / total as f64,
                total
            );
        }
    }
}

/// Checks that a checkpoint and a corpus agree on the class count.
fn check_classes(cfg: &ModelConfig, corpus: &Corpus) -> anyhow::Result<()> {
    if cfg.num_classes != corpus.num_classes() {
        bail!(
            "checkpoint was trained for {} classes but the corpus has {}",
            cfg.num_classes,
            corpus.num_classes()
        );
    }
    Ok(())
}

fn eval_checkpoint(checkpoint: &Path, corpus_dir: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = Corpus::load(corpus_dir)?;
    check_classes(ckpt.config(), &corpus)?;
    let feats = prepare_features(&corpus, ckpt.config())?;
    let refs: Vec<&capser_audio::MfccFeatures> = feats.iter().collect();
    let truths: Vec<usize> = corpus.items().iter().map(|i| i.label).collect();
    let report = match &ckpt {
        Checkpoint::Classifier { config, params } => {
            classifier_report(config, params, &refs, &truths, corpus.num_classes())?
        }
        Checkpoint::Adapted { config, params } => {
            adapted_report(config, params, &refs, &truths, corpus.num_classes())?
        }
    };
    print_report(&report, corpus.label_names());
    Ok(())
}

fn export_command(checkpoint: &Path, corpus_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = Corpus::load(corpus_dir)?;
    check_classes(ckpt.config(), &corpus)?;
    let (config, extractor) = match &ckpt {
        Checkpoint::Classifier { config, params } => (config, params),
        Checkpoint::Adapted { config, params } => (config, &params.extractor),
    };
    let indices: Vec<usize> = (0..corpus.len()).collect();
    export_embeddings(config, extractor, &corpus, &indices, out)?;
    println!("wrote {} embedding rows to {}", corpus.len(), out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::ExtractMfcc {
            wav_dir,
            out_dir,
            coeffs,
            deltas,
            normalize,
        } => extract_mfcc(&wav_dir, &out_dir, coeffs, deltas, normalize),
        Command::Synth { spec, out_dir } => {
            let job: capser_harness::synth::SynthJob = read_json(&spec)?;
            let corpus = capser_harness::synth_corpus(&job.spec, job.draw_seed)?;
            corpus.save(&out_dir)?;
            println!(
                "wrote {} utterances over {} classes to {}",
                corpus.len(),
                corpus.num_classes(),
                out_dir.display()
            );
            Ok(())
        }
        Command::TrainSingle { config } => {
            let rc: SingleRunConfig = read_json(&config)?;
            let report = run_single_corpus(&rc)?;
            for (f, fold) in report.fold_reports.iter().enumerate() {
                println!("fold {f}: war {:.6} uar {:.6}", fold.war, fold.uar);
            }
            println!("mean war {:.6}", report.mean_war);
            println!("mean uar {:.6}", report.mean_uar);
            println!("artifacts in {}", rc.out_dir.display());
            Ok(())
        }
        Command::TrainCross { config } => {
            let rc: CrossRunConfig = read_json(&config)?;
            let report = run_cross_corpus(&rc)?;
            println!(
                "baseline: war {:.6} uar {:.6}",
                report.baseline.war, report.baseline.uar
            );
            println!(
                "adapted:  war {:.6} uar {:.6}",
                report.adapted.war, report.adapted.uar
            );
            println!(
                "gain:     war {:+.6} uar {:+.6}",
                report.war_gain, report.uar_gain
            );
            println!("artifacts in {}", rc.out_dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            corpus_dir,
        } => eval_checkpoint(&checkpoint, &corpus_dir),
        Command::ExportEmbeddings {
            checkpoint,
            corpus_dir,
            out,
        } => export_command(&checkpoint, &corpus_dir, &out),
    }
}

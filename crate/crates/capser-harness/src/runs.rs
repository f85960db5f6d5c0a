//! Complete experiments: k-fold single-corpus classification and paired
//! cross-corpus adaptation runs.
//!
//! Every run writes, into its output directory:
//!
//! * metric CSVs (`results.csv`, plus per-epoch `history.csv` files for
//!   cross-corpus runs) — values printed with six decimal places;
//! * checkpoints of every trained model;
//! * embedding exports where the run calls for them;
//! * `manifest.json` — the full run configuration (with full-precision
//!   numbers), its SHA-256, the resolved model configuration, and the crate
//!   version. Re-running the embedded configuration (with any output
//!   directory) reproduces every CSV and checkpoint byte for byte, because
//!   all randomness is derived from the seed inside the configuration.

use std::fs;
use std::path::{Path, PathBuf};

use capser_audio::MfccFeatures;
use capser_model::{
    save_checkpoint, AdaptHyper, Checkpoint, MarginHyper, ModelConfig, ModelParams,
};
use capser_tensor::seeding::{child_rng, child_seed};
use capser_tensor::{Mode, Tape};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};
use crate::eval::{adapted_report, classifier_report, EvalReport};
use crate::split::kfold_split;
use crate::train::{
    prepare_features, train_adapt, train_classifier, AdaptOpts, ClassifierOpts, EpochRow,
};

fn default_folds() -> usize {
    10
}
fn default_epochs() -> usize {
    3
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

/// Configuration of a k-fold single-corpus run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleRunConfig {
    /// Corpus directory in the layout documented in [`crate::corpus`].
    pub corpus_dir: PathBuf,
    /// Output directory; created if missing.
    pub out_dir: PathBuf,
    /// Model architecture. `input_frames`, `input_coeffs`, or `num_classes`
    /// set to zero are resolved from the corpus.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub margin: MarginHyper,
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    /// Reserved: speaker-grouped folds. Corpus items carry no speaker
    /// metadata, so enabling this is a configuration error.
    #[serde(default)]
    pub group_by_speaker: bool,
}

/// Configuration of a paired cross-corpus run: one adversarial adaptation
/// arm and one source-only baseline arm, sharing the seed and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossRunConfig {
    /// Labelled source corpus directory.
    pub source_dir: PathBuf,
    /// Target corpus directory; its labels are used only for evaluation.
    pub target_dir: PathBuf,
    /// Output directory; created if missing.
    pub out_dir: PathBuf,
    /// Model architecture, resolved against both corpora (zero fields are
    /// filled from the data; automatic frame counts take the larger corpus).
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub hyper: AdaptHyper,
    /// When false, the "adapted" arm also trains source-only, which makes
    /// the two arms coincide; useful as an ablation control.
    #[serde(default = "default_true")]
    pub adversarial: bool,
    /// Root of every random stream in the run; both arms share it.
    #[serde(default)]
    pub seed: u64,
}

/// Outcome of a single-corpus run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleReport {
    pub fold_reports: Vec<EvalReport>,
    pub mean_war: f64,
    pub mean_uar: f64,
    pub resolved_model: ModelConfig,
}

/// Outcome of a paired cross-corpus run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossReport {
    pub adapted: EvalReport,
    pub baseline: EvalReport,
    pub history: Vec<EpochRow>,
    pub baseline_history: Vec<EpochRow>,
    /// `adapted.uar - baseline.uar`.
    pub uar_gain: f64,
    /// `adapted.war - baseline.war`.
    pub war_gain: f64,
    pub resolved_model: ModelConfig,
}

/// Fills zero-valued geometry fields of `model` from corpora and validates
/// the rest against them.
fn resolve_model(model: &ModelConfig, corpora: &[&Corpus]) -> Result<ModelConfig> {
    let mut resolved = model.clone();
    let max_frames = corpora.iter().map(|c| c.max_frames()).max().unwrap_or(0);
    let coeffs = corpora
        .first()
        .and_then(|c| c.items().first())
        .map(|i| i.features.num_coeffs)
        .unwrap_or(0);
    let classes = corpora.first().map(|c| c.num_classes()).unwrap_or(0);

    if resolved.input_frames == 0 {
        resolved.input_frames = max_frames;
    }
    if resolved.input_coeffs == 0 {
        resolved.input_coeffs = coeffs;
    }
    if resolved.num_classes == 0 {
        resolved.num_classes = classes;
    }
    if resolved.num_classes != classes {
        return Err(HarnessError::Config(format!(
            "model has {} classes but the corpus label space has {}",
            resolved.num_classes, classes
        )));
    }
    // Surface geometry problems (tiny frame counts, zero fields that could
    // not be resolved) before any training starts.
    resolved.geometry().map_err(HarnessError::from)?;
    Ok(resolved)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| HarnessError::data(path.display(), e.to_string()))
}

/// Serializes a run configuration and hashes it; the hex digest goes into
/// the manifest so a replay can verify it is running the same experiment.
fn config_digest<T: Serialize>(config: &T) -> Result<(String, serde_json::Value)> {
    let value = serde_json::to_value(config)
        .map_err(|e| HarnessError::Config(format!("cannot serialize run config: {e}")))?;
    let canonical = serde_json::to_vec(&value)
        .map_err(|e| HarnessError::Config(format!("cannot serialize run config: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&canonical);
    Ok((format!("{:x}", hasher.finalize()), value))
}

#[derive(Serialize)]
struct Manifest<'a> {
    kind: &'a str,
    crate_version: &'a str,
    config_sha256: String,
    config: serde_json::Value,
    resolved_model: &'a ModelConfig,
    label_names: &'a [String],
}

fn write_manifest(
    out_dir: &Path,
    kind: &str,
    config_value: serde_json::Value,
    sha: String,
    resolved: &ModelConfig,
    label_names: &[String],
) -> Result<()> {
    let manifest = Manifest {
        kind,
        crate_version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha,
        config: config_value,
        resolved_model: resolved,
        label_names,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| HarnessError::Config(format!("cannot serialize manifest: {e}")))?;
    write_file(&out_dir.join("manifest.json"), &format!("{text}\n"))
}

/// Writes one eval-mode embedding row per selected utterance:
/// `id,label,emotion,e0..e{D-1}`, full `f64` precision.
pub fn export_embeddings(
    cfg: &ModelConfig,
    params: &ModelParams,
    corpus: &Corpus,
    indices: &[usize],
    path: &Path,
) -> Result<()> {
    let feats = prepare_features(corpus, cfg)?;
    let geo = cfg.geometry().map_err(HarnessError::from)?;
    let mut out = String::from("id,label,emotion");
    for d in 0..geo.embedding_dim {
        out.push_str(&format!(",e{d}"));
    }
    out.push('\n');

    for chunk in indices.chunks(64) {
        if let Some(&bad) = chunk.iter().find(|&&i| i >= corpus.len()) {
            return Err(HarnessError::Contract(format!(
                "embedding export index {bad} out of range for {} items",
                corpus.len()
            )));
        }
        let batch: Vec<&MfccFeatures> = chunk.iter().map(|&i| &feats[i]).collect();
        let mut tape = Tape::new();
        let mut rng = child_rng(0, "eval");
        let (acts, _) =
            capser_model::forward(&mut tape, params, cfg, &batch, Mode::Eval, &mut rng)?;
        let data = tape.data(acts.embedding);
        for (row, &i) in chunk.iter().enumerate() {
            let item = &corpus.items()[i];
            out.push_str(&format!("{},{},{}", item.id, item.label, corpus.emotion(item)));
            for v in &data[row * geo.embedding_dim..(row + 1) * geo.embedding_dim] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    write_file(path, &out)
}

/// Trains and evaluates one classifier per fold, writing `results.csv`,
/// per-fold checkpoints and test-fold embedding exports, and the manifest.
pub fn run_single_corpus(rc: &SingleRunConfig) -> Result<SingleReport> {
    if rc.group_by_speaker {
        return Err(HarnessError::Config(
            "speaker-grouped folds are not available: corpus items carry no speaker metadata"
                .into(),
        ));
    }
    let (sha, config_value) = config_digest(rc)?;
    let corpus = Corpus::load(&rc.corpus_dir)?;
    let resolved = resolve_model(&rc.model, &[&corpus])?;
    let feats = prepare_features(&corpus, &resolved)?;
    let labels: Vec<usize> = corpus.items().iter().map(|i| i.label).collect();
    let folds = kfold_split(&corpus, rc.folds, child_seed(rc.seed, "folds"))?;

    fs::create_dir_all(&rc.out_dir)?;
    let mut results = String::from("fold,war,uar\n");
    let mut fold_reports = Vec::with_capacity(folds.len());
    for (f, (train_idx, test_idx)) in folds.iter().enumerate() {
        let opts = ClassifierOpts {
            epochs: rc.epochs,
            batch_size: rc.batch_size,
            learning_rate: rc.learning_rate,
            margin: rc.margin,
            seed: child_seed(rc.seed, &format!("fold{f}")),
        };
        let (params, _) = train_classifier(&resolved, &feats, &labels, train_idx, &opts)?;

        let test_feats: Vec<&MfccFeatures> = test_idx.iter().map(|&i| &feats[i]).collect();
        let test_labels: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
        let report = classifier_report(
            &resolved,
            &params,
            &test_feats,
            &test_labels,
            corpus.num_classes(),
        )?;
        results.push_str(&format!("{f},{:.6},{:.6}\n", report.war, report.uar));

        export_embeddings(
            &resolved,
            &params,
            &corpus,
            test_idx,
            &rc.out_dir.join(format!("embeddings_fold{f}.csv")),
        )?;
        save_checkpoint(
            &rc.out_dir.join(format!("model_fold{f}.ckpt")),
            &Checkpoint::Classifier {
                config: resolved.clone(),
                params,
            },
        )?;
        fold_reports.push(report);
    }

    let mean_war = fold_reports.iter().map(|r| r.war).sum::<f64>() / fold_reports.len() as f64;
    let mean_uar = fold_reports.iter().map(|r| r.uar).sum::<f64>() / fold_reports.len() as f64;
    results.push_str(&format!("mean,{mean_war:.6},{mean_uar:.6}\n"));
    write_file(&rc.out_dir.join("results.csv"), &results)?;
    write_manifest(
        &rc.out_dir,
        "single_corpus",
        config_value,
        sha,
        &resolved,
        corpus.label_names(),
    )?;

    Ok(SingleReport {
        fold_reports,
        mean_war,
        mean_uar,
        resolved_model: resolved,
    })
}

fn history_csv(history: &[EpochRow]) -> String {
    let mut out = String::from("epoch,classification,gap,target_war,target_uar\n");
    for row in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            row.epoch, row.classification, row.gap, row.target_war, row.target_uar
        ));
    }
    out
}

/// Remaps target labels onto the source label space by emotion name.
fn map_target_labels(source: &Corpus, target: &Corpus) -> Result<Vec<usize>> {
    let index_of: std::collections::BTreeMap<&str, usize> = source
        .label_names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    target
        .items()
        .iter()
        .map(|item| {
            index_of
                .get(target.emotion(item))
                .copied()
                .ok_or_else(|| {
                    HarnessError::Config(format!(
                        "target emotion {:?} is missing from the source label space",
                        target.emotion(item)
                    ))
                })
        })
        .collect()
}

/// Trains the adversarial arm and the source-only baseline under the same
/// seed and budget, evaluates both on the full target corpus, and writes
/// `history.csv`, `baseline_history.csv`, `results.csv`, both checkpoints,
/// and the manifest.
pub fn run_cross_corpus(rc: &CrossRunConfig) -> Result<CrossReport> {
    let (sha, config_value) = config_digest(rc)?;
    let source = Corpus::load(&rc.source_dir)?;
    let target = Corpus::load(&rc.target_dir)?;
    let resolved = resolve_model(&rc.model, &[&source, &target])?;

    let src_feats = prepare_features(&source, &resolved)?;
    let src_labels: Vec<usize> = source.items().iter().map(|i| i.label).collect();
    let tgt_feats = prepare_features(&target, &resolved)?;
    let tgt_labels = map_target_labels(&source, &target)?;

    fs::create_dir_all(&rc.out_dir)?;
    let arm = |adversarial: bool| -> Result<(Vec<EpochRow>, EvalReport, Checkpoint)> {
        let opts = AdaptOpts {
            epochs: rc.epochs,
            batch_size: rc.batch_size,
            learning_rate: rc.learning_rate,
            hyper: rc.hyper,
            adversarial,
            seed: child_seed(rc.seed, "train"),
        };
        let (params, history) = train_adapt(
            &resolved,
            &src_feats,
            &src_labels,
            &tgt_feats,
            &tgt_labels,
            source.num_classes(),
            &opts,
        )?;
        let tgt_refs: Vec<&MfccFeatures> = tgt_feats.iter().collect();
        let report = adapted_report(
            &resolved,
            &params,
            &tgt_refs,
            &tgt_labels,
            source.num_classes(),
        )?;
        let checkpoint = Checkpoint::Adapted {
            config: resolved.clone(),
            params,
        };
        Ok((history, report, checkpoint))
    };

    let (baseline_history, baseline, baseline_ckpt) = arm(false)?;
    let (history, adapted, adapted_ckpt) = arm(rc.adversarial)?;

    write_file(&rc.out_dir.join("history.csv"), &history_csv(&history))?;
    write_file(
        &rc.out_dir.join("baseline_history.csv"),
        &history_csv(&baseline_history),
    )?;
    let uar_gain = adapted.uar - baseline.uar;
    let war_gain = adapted.war - baseline.war;
    let results = format!(
        "arm,war,uar\nbaseline,{:.6},{:.6}\nadapted,{:.6},{:.6}\ngain,{war_gain:.6},{uar_gain:.6}\n",
        baseline.war, baseline.uar, adapted.war, adapted.uar
    );
    write_file(&rc.out_dir.join("results.csv"), &results)?;
    save_checkpoint(&rc.out_dir.join("baseline.ckpt"), &baseline_ckpt)?;
    save_checkpoint(&rc.out_dir.join("adapted.ckpt"), &adapted_ckpt)?;
    write_manifest(
        &rc.out_dir,
        "cross_corpus",
        config_value,
        sha,
        &resolved,
        source.label_names(),
    )?;

    Ok(CrossReport {
        adapted,
        baseline,
        history,
        baseline_history,
        uar_gain,
        war_gain,
        resolved_model: resolved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthSpec};

    fn small_model() -> ModelConfig {
        ModelConfig {
            input_frames: 0,
            input_coeffs: 0,
            num_classes: 0,
            conv_filters: 4,
            primary_groups: 2,
            primary_dim: 3,
            digit_dim: 4,
            routing_iters: 2,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    fn spec(classes: usize, per_class: usize, task_seed: u64) -> SynthSpec {
        SynthSpec {
            classes,
            per_class,
            frames: 8,
            coeffs: 9,
            separation: 1.0,
            task_seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_model_fields_resolve_from_the_corpus() {
        let corpus = synth_corpus(&spec(3, 4, 0), 1).unwrap();
        let resolved = resolve_model(&small_model(), &[&corpus]).unwrap();
        assert_eq!(resolved.input_frames, 8);
        assert_eq!(resolved.input_coeffs, 9);
        assert_eq!(resolved.num_classes, 3);

        let mut wrong = small_model();
        wrong.num_classes = 7;
        assert!(matches!(
            resolve_model(&wrong, &[&corpus]),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn single_corpus_run_writes_every_artifact_and_replays_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        synth_corpus(&spec(2, 10, 3), 4)
            .unwrap()
            .save(&corpus_dir)
            .unwrap();

        let rc = SingleRunConfig {
            corpus_dir: corpus_dir.clone(),
            out_dir: dir.path().join("run_a"),
            model: small_model(),
            folds: 2,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            margin: MarginHyper::default(),
            seed: 5,
            group_by_speaker: false,
        };
        let report = run_single_corpus(&rc).unwrap();
        assert_eq!(report.fold_reports.len(), 2);

        for name in [
            "results.csv",
            "manifest.json",
            "model_fold0.ckpt",
            "model_fold1.ckpt",
            "embeddings_fold0.csv",
            "embeddings_fold1.csv",
        ] {
            assert!(rc.out_dir.join(name).exists(), "{name} missing");
        }

        // Replay into a different directory: metric CSVs and checkpoints
        // must be byte-identical.
        let rc2 = SingleRunConfig {
            out_dir: dir.path().join("run_b"),
            ..rc.clone()
        };
        run_single_corpus(&rc2).unwrap();
        for name in [
            "results.csv",
            "model_fold0.ckpt",
            "model_fold1.ckpt",
            "embeddings_fold0.csv",
            "embeddings_fold1.csv",
        ] {
            let a = fs::read(rc.out_dir.join(name)).unwrap();
            let b = fs::read(rc2.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }

        // The manifest embeds the configuration it was produced from.
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(rc.out_dir.join("manifest.json")).unwrap())
                .unwrap();
        let embedded: SingleRunConfig =
            serde_json::from_value(manifest["config"].clone()).unwrap();
        assert_eq!(embedded, rc);
        assert_eq!(manifest["resolved_model"]["input_frames"], 8);
    }

    #[test]
    fn speaker_grouping_is_rejected() {
        let rc = SingleRunConfig {
            corpus_dir: PathBuf::from("unused"),
            out_dir: PathBuf::from("unused"),
            model: small_model(),
            folds: 2,
            epochs: 0,
            batch_size: 1,
            learning_rate: 1e-3,
            margin: MarginHyper::default(),
            seed: 0,
            group_by_speaker: true,
        };
        assert!(matches!(
            run_single_corpus(&rc),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn cross_corpus_run_pairs_the_arms_and_replays_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let source_dir = dir.path().join("source");
        let target_dir = dir.path().join("target");
        let task = spec(2, 8, 7);
        synth_corpus(&task, 1).unwrap().save(&source_dir).unwrap();
        synth_corpus(&task.shifted(), 2)
            .unwrap()
            .save(&target_dir)
            .unwrap();

        let rc = CrossRunConfig {
            source_dir,
            target_dir,
            out_dir: dir.path().join("run_a"),
            model: small_model(),
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            hyper: AdaptHyper::default(),
            adversarial: true,
            seed: 9,
        };
        let report = run_cross_corpus(&rc).unwrap();
        assert_eq!(report.history.len(), 1);
        assert_eq!(report.baseline_history.len(), 1);
        assert!((report.uar_gain - (report.adapted.uar - report.baseline.uar)).abs() < 1e-15);

        for name in [
            "results.csv",
            "history.csv",
            "baseline_history.csv",
            "manifest.json",
            "adapted.ckpt",
            "baseline.ckpt",
        ] {
            assert!(rc.out_dir.join(name).exists(), "{name} missing");
        }

        let rc2 = CrossRunConfig {
            out_dir: dir.path().join("run_b"),
            ..rc.clone()
        };
        run_cross_corpus(&rc2).unwrap();
        for name in [
            "results.csv",
            "history.csv",
            "baseline_history.csv",
            "adapted.ckpt",
            "baseline.ckpt",
        ] {
            let a = fs::read(rc.out_dir.join(name)).unwrap();
            let b = fs::read(rc2.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn target_emotions_must_map_into_the_source_space() {
        let source = synth_corpus(&spec(2, 2, 0), 1).unwrap();
        let target = synth_corpus(&spec(3, 2, 0), 2).unwrap();
        // The 3-class target has "sadness", absent from the 2-class source.
        let err = map_target_labels(&source, &target).unwrap_err();
        assert!(err.to_string().contains("sadness"));

        // A permuted label space maps by name, not by index.
        let renamed = Corpus::new(
            target
                .items()
                .iter()
                .filter(|i| i.label < 2)
                .cloned()
                .map(|mut item| {
                    item.label = 1 - item.label;
                    item
                })
                .collect(),
            vec!["happiness".into(), "anger".into()],
        )
        .unwrap();
        let mapped = map_target_labels(&source, &renamed).unwrap();
        for (item, &label) in renamed.items().iter().zip(&mapped) {
            assert_eq!(source.label_names()[label], renamed.emotion(item));
        }
    }

    #[test]
    fn embedding_export_is_deterministic_with_constant_width() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&spec(2, 3, 1), 8).unwrap();
        let resolved = resolve_model(&small_model(), &[&corpus]).unwrap();
        let params = ModelParams::init(&resolved, 3).unwrap();
        let idx: Vec<usize> = (0..corpus.len()).collect();
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        export_embeddings(&resolved, &params, &corpus, &idx, &path_a).unwrap();
        export_embeddings(&resolved, &params, &corpus, &idx, &path_b).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());

        let text = fs::read_to_string(&path_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + corpus.len());
        let width = lines[0].split(',').count();
        let geo = resolved.geometry().unwrap();
        assert_eq!(width, 3 + geo.embedding_dim);
        assert!(lines.iter().all(|l| l.split(',').count() == width));
        assert!(lines[1].starts_with("anger_0000,0,anger,"));
    }
}

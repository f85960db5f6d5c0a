//! Labelled feature corpora and their on-disk layout.
//!
//! A corpus directory contains:
//!
//! * `emotions.csv` — the ordered label space, one emotion name per line;
//!   a label index is a position in this file.
//! * `labels.csv` — header `id,emotion`, one row per utterance; row order
//!   is the corpus item order.
//! * `meta.csv` — header `id,sample_rate,frame_length,frame_shift`,
//!   carrying the audio-geometry fields of every feature matrix.
//! * `features/<id>.csv` — one row per frame, one comma-separated column
//!   per coefficient, full `f64` round-trip precision.
//!
//! Ids and emotion names are restricted to `[A-Za-z0-9._-]`, so the CSVs
//! never need quoting and ids map directly to file names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use capser_audio::MfccFeatures;

use crate::error::{HarnessError, Result};

/// One labelled utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    /// Unique, filesystem-safe utterance identifier.
    pub id: String,
    /// Index into the corpus label space.
    pub label: usize,
    pub features: MfccFeatures,
}

/// An ordered collection of labelled utterances sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<CorpusItem>,
    label_names: Vec<String>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl Corpus {
    /// Validates ids (unique, filesystem-safe), emotion names, and label
    /// bounds.
    pub fn new(items: Vec<CorpusItem>, label_names: Vec<String>) -> Result<Self> {
        if label_names.is_empty() {
            return Err(HarnessError::Contract("empty label space".into()));
        }
        let mut seen_names = std::collections::BTreeSet::new();
        for name in &label_names {
            if !valid_token(name) {
                return Err(HarnessError::Contract(format!(
                    "emotion name {name:?} is not a plain [A-Za-z0-9._-] token"
                )));
            }
            if !seen_names.insert(name) {
                return Err(HarnessError::Contract(format!(
                    "duplicate emotion name {name:?}"
                )));
            }
        }
        let mut seen_ids = std::collections::BTreeSet::new();
        for item in &items {
            if !valid_token(&item.id) {
                return Err(HarnessError::Contract(format!(
                    "utterance id {:?} is not a plain [A-Za-z0-9._-] token",
                    item.id
                )));
            }
            if !seen_ids.insert(item.id.as_str()) {
                return Err(HarnessError::Contract(format!(
                    "duplicate utterance id {:?}",
                    item.id
                )));
            }
            if item.label >= label_names.len() {
                return Err(HarnessError::Contract(format!(
                    "utterance {:?} has label {} outside the {}-class label space",
                    item.id,
                    item.label,
                    label_names.len()
                )));
            }
        }
        Ok(Self { items, label_names })
    }

    pub fn items(&self) -> &[CorpusItem] {
        &self.items
    }

    /// Ordered emotion names; a label index is a position in this slice.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Emotion name of one item.
    pub fn emotion(&self, item: &CorpusItem) -> &str {
        &self.label_names[item.label]
    }

    /// Largest frame count over all items; zero for an empty corpus.
    pub fn max_frames(&self) -> usize {
        self.items
            .iter()
            .map(|i| i.features.num_frames)
            .max()
            .unwrap_or(0)
    }

    /// Writes the corpus into `dir` in the documented layout, creating the
    /// directory if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let features_dir = dir.join("features");
        fs::create_dir_all(&features_dir)?;

        let mut emotions = String::new();
        for name in &self.label_names {
            emotions.push_str(name);
            emotions.push('\n');
        }
        fs::write(dir.join("emotions.csv"), emotions)?;

        let mut labels = String::from("id,emotion\n");
        let mut meta = String::from("id,sample_rate,frame_length,frame_shift\n");
        for item in &self.items {
            labels.push_str(&format!("{},{}\n", item.id, self.emotion(item)));
            meta.push_str(&format!(
                "{},{},{},{}\n",
                item.id,
                item.features.sample_rate,
                item.features.frame_length,
                item.features.frame_shift
            ));

            write_features_csv(
                &features_dir.join(format!("{}.csv", item.id)),
                &item.features,
            )?;
        }
        fs::write(dir.join("labels.csv"), labels)?;
        fs::write(dir.join("meta.csv"), meta)?;
        Ok(())
    }

    /// Loads a corpus from the documented layout. Item order is the
    /// `labels.csv` row order, so save → load round-trips exactly.
    pub fn load(dir: &Path) -> Result<Self> {
        let emotions_path = dir.join("emotions.csv");
        let text = read_text(&emotions_path)?;
        let label_names: Vec<String> = text.lines().map(str::to_owned).collect();

        let index_of: BTreeMap<&str, usize> = label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        let meta_path = dir.join("meta.csv");
        let meta_text = read_text(&meta_path)?;
        let mut meta: BTreeMap<String, (u32, usize, usize)> = BTreeMap::new();
        for (lineno, line) in meta_text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(HarnessError::data(
                    meta_path.display(),
                    format!("line {}: expected 4 columns, found {}", lineno + 1, cols.len()),
                ));
            }
            let parse = |what: &str, s: &str| -> Result<usize> {
                s.parse().map_err(|_| {
                    HarnessError::data(
                        meta_path.display(),
                        format!("line {}: bad {what} {s:?}", lineno + 1),
                    )
                })
            };
            let sr = parse("sample rate", cols[1])? as u32;
            let fl = parse("frame length", cols[2])?;
            let fs = parse("frame shift", cols[3])?;
            meta.insert(cols[0].to_owned(), (sr, fl, fs));
        }

        let labels_path = dir.join("labels.csv");
        let labels_text = read_text(&labels_path)?;
        let mut items = Vec::new();
        for (lineno, line) in labels_text.lines().enumerate().skip(1) {
            let (id, emotion) = line.split_once(',').ok_or_else(|| {
                HarnessError::data(
                    labels_path.display(),
                    format!("line {}: expected id,emotion", lineno + 1),
                )
            })?;
            let label = *index_of.get(emotion).ok_or_else(|| {
                HarnessError::data(
                    labels_path.display(),
                    format!(
                        "line {}: emotion {emotion:?} is not listed in emotions.csv",
                        lineno + 1
                    ),
                )
            })?;
            let &(sample_rate, frame_length, frame_shift) =
                meta.get(id).ok_or_else(|| {
                    HarnessError::data(
                        meta_path.display(),
                        format!("no metadata row for utterance {id:?}"),
                    )
                })?;
            let features_path = dir.join("features").join(format!("{id}.csv"));
            let matrix = read_matrix(&features_path)?;
            let num_frames = matrix.len();
            let num_coeffs = matrix.first().map_or(0, Vec::len);
            items.push(CorpusItem {
                id: id.to_owned(),
                label,
                features: MfccFeatures {
                    num_frames,
                    num_coeffs,
                    data: matrix.into_iter().flatten().collect(),
                    sample_rate,
                    frame_length,
                    frame_shift,
                },
            });
        }

        Corpus::new(items, label_names)
    }
}

/// Writes one feature matrix in the corpus row format: one line per frame,
/// comma-separated coefficients at full `f64` round-trip precision.
pub fn write_features_csv(path: &Path, features: &MfccFeatures) -> Result<()> {
    let mut rows = String::new();
    for frame in features.data.chunks(features.num_coeffs.max(1)) {
        let cols: Vec<String> = frame.iter().map(|v| format!("{v}")).collect();
        rows.push_str(&cols.join(","));
        rows.push('\n');
    }
    fs::write(path, rows)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| HarnessError::data(path.display(), format!("cannot read: {e}")))
}

/// Reads an unquoted numeric CSV into equal-length rows.
fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut row = Vec::new();
        for col in line.split(',') {
            let v: f64 = col.parse().map_err(|_| {
                HarnessError::data(
                    path.display(),
                    format!("line {}: bad number {col:?}", lineno + 1),
                )
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(HarnessError::data(
                    path.display(),
                    format!(
                        "line {}: {} columns, but earlier rows have {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HarnessError::data(path.display(), "no feature rows"));
    }
    Ok(rows)
}

//! Deterministic synthetic corpora for experiments and tests.
//!
//! Each class is an isotropic Gaussian cluster in flattened feature space
//! (`frames * coeffs` dimensions). The class means are drawn from the
//! *task* seed, while the samples around them are drawn from a separate
//! *draw* seed, so two corpora that share a task seed share class geometry
//! but contain independent utterances — exactly what a source/target
//! corpus pair needs. Means can optionally be confined to the leading
//! coordinates ([`SynthSpec::mean_dims`]) to give a domain shift real
//! leverage over the class geometry.
//!
//! Covariate shift between domains is a fixed affine map applied to every
//! sample: a plane rotation of each consecutive coordinate pair (channel
//! coloration mixing neighbouring coefficients) plus a uniform
//! per-coordinate offset (a corpus-wide level difference). Labels are
//! unchanged, so the class concept survives the shift.

use capser_audio::MfccFeatures;
use capser_tensor::seeding::child_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusItem};
use crate::error::{HarnessError, Result};

/// Emotion names assigned to class indices, in order.
const EMOTION_NAMES: [&str; 8] = [
    "anger",
    "happiness",
    "sadness",
    "fear",
    "neutral",
    "disgust",
    "surprise",
    "boredom",
];

/// Audio-geometry constants stamped onto synthetic features.
const SAMPLE_RATE: u32 = 16000;
const FRAME_LENGTH: usize = 800;
const FRAME_SHIFT: usize = 200;

/// The fixed per-domain map applied to every sample after it is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// No shift: the corpus is drawn straight from the class clusters.
    Identity,
    /// Rotate each consecutive coordinate pair `(2i, 2i+1)` by the same
    /// angle, then add the same offset to every coordinate.
    RotateTranslate {
        /// Rotation angle in degrees.
        angle_deg: f64,
        /// Per-coordinate offset in units of the cluster noise — a
        /// corpus-wide level shift, the way a different recording gain
        /// moves every coefficient at once.
        translation_sigmas: f64,
    },
}

impl Default for Transform {
    fn default() -> Self {
        Transform::Identity
    }
}

/// Recipe for one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Number of emotion classes.
    pub classes: usize,
    /// Utterances drawn per class.
    pub per_class: usize,
    /// Frames per utterance.
    pub frames: usize,
    /// Coefficients per frame.
    pub coeffs: usize,
    /// Standard deviation of the class means, in units of `noise`; larger
    /// values spread the clusters farther apart.
    pub separation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Seed of the task itself: class means and the translation direction.
    /// Corpora sharing a task seed share class geometry.
    pub task_seed: u64,
    /// When set, class means live in the leading `mean_dims` coordinates
    /// and are zero elsewhere; samples still carry full-dimensional noise.
    /// A handful of random directions in a large space are nearly
    /// orthogonal, leaving a rotation almost nothing to confuse, so
    /// confining the means is what lets a domain shift interact with the
    /// class geometry instead of only with noise. `None` spreads the means
    /// over every coordinate.
    pub mean_dims: Option<usize>,
    /// Adds `class index * level_step` (in units of `noise`) to every
    /// coordinate of that class's mean, turning the classes into evenly
    /// spaced loudness stairs. Decision rules must then read absolute
    /// level — exactly the statistic a corpus-wide offset corrupts — so
    /// this is the knob that makes the translation half of a domain shift
    /// bite. Zero leaves the classes level-free.
    pub level_step: f64,
    /// Domain map applied to every sample.
    pub transform: Transform,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 5,
            per_class: 100,
            frames: 8,
            coeffs: 39,
            separation: 0.5,
            noise: 1.0,
            task_seed: 0,
            mean_dims: None,
            level_step: 0.0,
            transform: Transform::Identity,
        }
    }
}

/// Covariate-shift defaults: strong enough to damage a source-only model,
/// mild enough that adaptation can recover.
pub const DEFAULT_SHIFT_ANGLE_DEG: f64 = 30.0;
pub const DEFAULT_SHIFT_TRANSLATION_SIGMAS: f64 = 0.5;

impl SynthSpec {
    /// The default covariate-shifted twin of this spec: same task seed and
    /// cluster geometry, rotated and translated samples.
    pub fn shifted(&self) -> SynthSpec {
        SynthSpec {
            transform: Transform::RotateTranslate {
                angle_deg: DEFAULT_SHIFT_ANGLE_DEG,
                translation_sigmas: DEFAULT_SHIFT_TRANSLATION_SIGMAS,
            },
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 {
            return Err(HarnessError::Config(
                "synthetic corpus needs at least one class and one item per class".into(),
            ));
        }
        if self.frames == 0 || self.coeffs == 0 {
            return Err(HarnessError::Config(
                "synthetic features need at least one frame and one coefficient".into(),
            ));
        }
        if !(self.separation.is_finite() && self.noise.is_finite()) || self.noise < 0.0 {
            return Err(HarnessError::Config(
                "separation and noise must be finite and noise nonnegative".into(),
            ));
        }
        if let Some(q) = self.mean_dims {
            if q == 0 || q > self.frames * self.coeffs {
                return Err(HarnessError::Config(format!(
                    "mean_dims {q} must be between 1 and the feature dimension {}",
                    self.frames * self.coeffs
                )));
            }
        }
        if !self.level_step.is_finite() {
            return Err(HarnessError::Config("level_step must be finite".into()));
        }
        Ok(())
    }

    fn emotion_name(&self, class: usize) -> String {
        EMOTION_NAMES
            .get(class)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("emotion{class}"))
    }
}

fn standard_normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Applies the domain map in place.
fn apply_transform(x: &mut [f64], transform: &Transform, offset: f64) {
    match *transform {
        Transform::Identity => {}
        Transform::RotateTranslate { angle_deg, .. } => {
            let (sin, cos) = angle_deg.to_radians().sin_cos();
            for p in 0..x.len() / 2 {
                let (a, b) = (x[2 * p], x[2 * p + 1]);
                x[2 * p] = a * cos - b * sin;
                x[2 * p + 1] = a * sin + b * cos;
            }
            for xi in x.iter_mut() {
                *xi += offset;
            }
        }
    }
}

/// Draws a corpus: class means from `spec.task_seed`, samples from
/// `draw_seed`. Item ids are `<emotion>_<index>` and items are ordered
/// class-major, so the same arguments always produce a bit-identical
/// corpus.
pub fn synth_corpus(spec: &SynthSpec, draw_seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let dim = spec.frames * spec.coeffs;

    let mut means_rng = child_rng(spec.task_seed, "means");
    let mean_dims = spec.mean_dims.unwrap_or(dim);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|class| {
            let mut m: Vec<f64> = standard_normal_vec(&mut means_rng, mean_dims)
                .into_iter()
                .map(|z| z * spec.separation * spec.noise)
                .collect();
            m.resize(dim, 0.0);
            let level = class as f64 * spec.level_step * spec.noise;
            for v in &mut m {
                *v += level;
            }
            m
        })
        .collect();

    let offset = match spec.transform {
        Transform::Identity => 0.0,
        Transform::RotateTranslate {
            translation_sigmas, ..
        } => translation_sigmas * spec.noise,
    };

    let mut sample_rng = child_rng(draw_seed, "samples");
    let mut items = Vec::with_capacity(spec.classes * spec.per_class);
    let mut label_names = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let emotion = spec.emotion_name(class);
        for i in 0..spec.per_class {
            let mut x: Vec<f64> = standard_normal_vec(&mut sample_rng, dim)
                .into_iter()
                .zip(&means[class])
                .map(|(z, m)| m + z * spec.noise)
                .collect();
            apply_transform(&mut x, &spec.transform, offset);
            items.push(CorpusItem {
                id: format!("{emotion}_{i:04}"),
                label: class,
                features: MfccFeatures {
                    num_frames: spec.frames,
                    num_coeffs: spec.coeffs,
                    data: x,
                    sample_rate: SAMPLE_RATE,
                    frame_length: FRAME_LENGTH,
                    frame_shift: FRAME_SHIFT,
                },
            });
        }
        label_names.push(emotion);
    }
    Corpus::new(items, label_names)
}

/// A synthesis job as stored in a JSON file for the `synth` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthJob {
    #[serde(default)]
    pub spec: SynthSpec,
    /// Seed for the samples themselves, independent of the task seed.
    #[serde(default)]
    pub draw_seed: u64,
}

//! Audio ingestion and MFCC feature extraction.
//!
//! [`wav`] reads PCM16 and float32 RIFF/WAVE files into mono [`AudioClip`]s;
//! [`mfcc`] turns a clip into a `[frames x coefficients]` feature matrix:
//! pre-emphasis, fixed-length framing, periodic Hann window, magnitude FFT,
//! mel filterbank, floored log, orthonormal DCT-II.

pub mod mfcc;
pub mod wav;

use thiserror::Error;

pub use mfcc::{
    compute_mel_energies, compute_mfcc, pad_or_truncate, CoeffMode, MfccConfig, MfccFeatures,
};
pub use wav::{load_wav, write_wav_float32, write_wav_pcm16, write_wav_pcm16_stereo, AudioClip};

#[derive(Debug, Error)]
pub enum AudioError {
    /// The byte stream is not a decodable WAV file.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// The decoded audio or the configuration cannot produce features.
    #[error("frontend error: {0}")]
    Frontend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

//! Deterministic synthetic corpus for desk-scale training and evaluation.
//!
//! Every word in a 12-word inventory maps to a fixed two-formant pattern;
//! dialects shift the formants by a few percent, and the whispered style
//! replaces the tonal source with resonator-filtered noise at -12 dB.
//! The train manifest covers SG (both styles), IRI (normal only), and a
//! generic OTHER dialect (normal); the test manifest cycles through the
//! five reporting conditions, so US entirely and whispered IRI are never
//! seen in training.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{save_manifest, Dialect, ManifestEntry, Style};
use crate::error::{Error, Result};
use crate::frontend::wav::write_wav_i16;

pub const SAMPLE_RATE: u32 = 16000;

pub const WORDS: [&str; 12] = [
    "ALPHA", "BRAVO", "CHARLIE", "DELTA", "ECHO", "FOXTROT", "GOLF", "HOTEL", "INDIA", "JULIET",
    "KILO", "LIMA",
];

fn word_formants(word_idx: usize) -> (f64, f64) {
    (
        280.0 + 55.0 * word_idx as f64,
        980.0 + 150.0 * word_idx as f64,
    )
}

fn dialect_shift(d: Dialect) -> f64 {
    match d {
        Dialect::Sg => 1.0,
        Dialect::Us => 1.04,
        Dialect::Iri => 0.96,
        Dialect::Other => 1.0,
    }
}

fn word_duration(word_idx: usize) -> f64 {
    0.26 + 0.012 * (word_idx % 6) as f64
}

const GAP_S: f64 = 0.06;
const EDGE_S: f64 = 0.05;
const NOISE_FLOOR: f64 = 0.004;
const NORMAL_LEVEL: f64 = 0.30;
// -12 dB relative to the normal style.
const WHISPER_LEVEL: f64 = NORMAL_LEVEL * 0.251;

/// Two-pole resonator: narrowband noise centered on `freq`.
struct Resonator {
    b: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Resonator {
    fn new(freq: f64, sample_rate: f64) -> Resonator {
        let r = 0.985;
        let theta = 2.0 * PI * freq / sample_rate;
        Resonator {
            b: (1.0 - r * r) * 0.5,
            a1: 2.0 * r * theta.cos(),
            a2: -(r * r),
            z1: 0.0,
            z2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b * x + self.a1 * self.z1 + self.a2 * self.z2;
        self.z2 = self.z1;
        self.z1 = y;
        y
    }
}

fn raised_cosine_env(i: usize, n: usize, edge: usize) -> f64 {
    if i < edge {
        0.5 - 0.5 * (PI * i as f64 / edge as f64).cos()
    } else if i + edge >= n {
        let j = n - 1 - i;
        0.5 - 0.5 * (PI * j as f64 / edge as f64).cos()
    } else {
        1.0
    }
}

fn synth_word(
    word_idx: usize,
    dialect: Dialect,
    style: Style,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let n = (word_duration(word_idx) * sr) as usize;
    let (f1, f2) = word_formants(word_idx);
    let shift = dialect_shift(dialect);
    let (f1, f2) = (f1 * shift, f2 * shift);
    let edge = (0.02 * sr) as usize;
    let mut out = vec![0.0; n];
    match style {
        Style::Normal => {
            let p1: f64 = rng.gen_range(0.0..2.0 * PI);
            let p2: f64 = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let s = (2.0 * PI * f1 * t + p1).sin() + 0.7 * (2.0 * PI * f2 * t + p2).sin();
                *v = s * raised_cosine_env(i, n, edge);
            }
        }
        Style::Whisper => {
            let mut r1 = Resonator::new(f1, sr);
            let mut r2 = Resonator::new(f2, sr);
            for (i, v) in out.iter_mut().enumerate() {
                let w1: f64 = rng.gen_range(-1.0..1.0);
                let w2: f64 = rng.gen_range(-1.0..1.0);
                let s = r1.tick(w1) + 0.7 * r2.tick(w2);
                // Resonator gain compensation keeps word levels comparable.
                *v = s * 6.0 * raised_cosine_env(i, n, edge);
            }
        }
    }
    out
}

fn synth_utterance(
    word_indices: &[usize],
    dialect: Dialect,
    style: Style,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let edge_n = (EDGE_S * sr) as usize;
    let gap_n = (GAP_S * sr) as usize;
    let mut signal: Vec<f64> = vec![0.0; edge_n];
    for (k, &w) in word_indices.iter().enumerate() {
        if k > 0 {
            signal.extend(std::iter::repeat(0.0).take(gap_n));
        }
        signal.extend(synth_word(w, dialect, style, rng));
    }
    signal.extend(std::iter::repeat(0.0).take(edge_n));

    let level = match style {
        Style::Normal => NORMAL_LEVEL,
        Style::Whisper => WHISPER_LEVEL,
    };
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    signal
        .iter()
        .map(|v| {
            let noise: f64 = rng.gen_range(-NOISE_FLOOR..NOISE_FLOOR);
            ((v / peak) * level + noise) as f32
        })
        .collect()
}

pub struct ToyCorpus {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
}

// Train cycles the combinations seen during training; test cycles the five
// reporting conditions (unseen US dialect, unseen whispered IRI included).
const TRAIN_CYCLE: [(Dialect, Style); 4] = [
    (Dialect::Sg, Style::Whisper),
    (Dialect::Sg, Style::Normal),
    (Dialect::Iri, Style::Normal),
    (Dialect::Other, Style::Normal),
];

pub const TEST_CYCLE: [(Dialect, Style); 5] = [
    (Dialect::Sg, Style::Whisper),
    (Dialect::Sg, Style::Normal),
    (Dialect::Us, Style::Whisper),
    (Dialect::Us, Style::Normal),
    (Dialect::Iri, Style::Whisper),
];

/// Generate `n_utts` utterances (train + held-out test) under `out_dir`:
/// WAV files in `wav/`, manifests `train.tsv` and `test.tsv`. Fully
/// deterministic: per-utterance RNG streams derive from the corpus seed.
pub fn make_toy_corpus(out_dir: &Path, n_utts: usize, seed: u64) -> Result<ToyCorpus> {
    if n_utts < 10 {
        return Err(Error::config("toy corpus needs at least 10 utterances"));
    }
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let n_test = (n_utts / 5).max(TEST_CYCLE.len());
    let n_train = n_utts - n_test;

    let mut make_entry = |split: &str,
                          idx: usize,
                          stream: u64,
                          dialect: Dialect,
                          style: Style|
     -> Result<ManifestEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let n_words = rng.gen_range(2..=6);
        let words: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..WORDS.len())).collect();
        let transcript = words
            .iter()
            .map(|&w| WORDS[w])
            .collect::<Vec<_>>()
            .join(" ");
        let samples = synth_utterance(&words, dialect, style, &mut rng);
        let utt_id = format!("toy-{split}-{idx:04}");
        let rel = format!("wav/{utt_id}.wav");
        let wav_path = out_dir.join(&rel);
        write_wav_i16(&wav_path, &samples, SAMPLE_RATE)?;
        Ok(ManifestEntry {
            utt_id,
            audio_path: PathBuf::from(rel),
            dialect,
            style,
            duration_s: samples.len() as f64 / SAMPLE_RATE as f64,
            transcript,
        })
    };

    let mut train = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let (d, s) = TRAIN_CYCLE[i % TRAIN_CYCLE.len()];
        train.push(make_entry("train", i, i as u64, d, s)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let (d, s) = TEST_CYCLE[i % TEST_CYCLE.len()];
        // Test streams live far from the train streams.
        test.push(make_entry("test", i, 1_000_000 + i as u64, d, s)?);
    }

    let train_manifest = out_dir.join("train.tsv");
    let test_manifest = out_dir.join("test.tsv");
    // Manifests store wav paths relative to their own directory.
    save_manifest(&train_manifest, &train)?;
    save_manifest(&test_manifest, &test)?;
    Ok(ToyCorpus {
        train_manifest,
        test_manifest,
        n_train,
        n_test,
    })
}

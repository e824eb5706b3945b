//! Manifest ingestion, corpus mixing, condition filtering, and
//! length-sorted batching. Manifests are TSV with a required header:
//!
//! ```text
//! utt_id<TAB>audio_path<TAB>dialect<TAB>style<TAB>duration_s<TAB>transcript
//! ```

pub mod toy;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dialect {
    Sg,
    Us,
    Iri,
    Other,
}

impl Dialect {
    pub fn parse(s: &str) -> Option<Dialect> {
        match s {
            "SG" => Some(Dialect::Sg),
            "US" => Some(Dialect::Us),
            "IRI" => Some(Dialect::Iri),
            "OTHER" => Some(Dialect::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::Sg => "SG",
            Dialect::Us => "US",
            Dialect::Iri => "IRI",
            Dialect::Other => "OTHER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Style {
    Whisper,
    Normal,
}

impl Style {
    pub fn parse(s: &str) -> Option<Style> {
        match s {
            "whisper" => Some(Style::Whisper),
            "normal" => Some(Style::Normal),
            _ => None,
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::Whisper => "whisper",
            Style::Normal => "normal",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub dialect: Dialect,
    pub style: Style,
    pub duration_s: f64,
    pub transcript: String,
}

pub const MANIFEST_HEADER: &str = "utt_id\taudio_path\tdialect\tstyle\tduration_s\ttranscript";

/// What to do when a manifest's audio file does not exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioCheck {
    Ignore,
    Warn,
    Fail,
}

pub fn load_manifest(path: &Path, audio_check: AudioCheck) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::data(format!(
                "{path:?}: first line must be the manifest header"
            )))
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(6, '\t').collect();
        if cols.len() != 6 {
            return Err(Error::data(format!(
                "{path:?}:{lineno}: expected 6 tab-separated columns, got {}",
                cols.len()
            )));
        }
        let utt_id = cols[0].to_string();
        if !seen.insert(utt_id.clone()) {
            return Err(Error::data(format!(
                "{path:?}:{lineno}: duplicate utt_id {utt_id:?}"
            )));
        }
        let dialect = Dialect::parse(cols[2]).ok_or_else(|| {
            Error::data(format!(
                "{path:?}:{lineno}: unknown dialect {:?} (want SG, US, IRI, OTHER)",
                cols[2]
            ))
        })?;
        let style = Style::parse(cols[3]).ok_or_else(|| {
            Error::data(format!(
                "{path:?}:{lineno}: unknown style {:?} (want whisper, normal)",
                cols[3]
            ))
        })?;
        let duration_s: f64 = cols[4].parse().map_err(|_| {
            Error::data(format!("{path:?}:{lineno}: bad duration {:?}", cols[4]))
        })?;
        if !(duration_s > 0.0) {
            return Err(Error::data(format!(
                "{path:?}:{lineno}: duration must be positive"
            )));
        }
        // Relative audio paths resolve against the manifest location.
        let raw = PathBuf::from(cols[1]);
        let audio_path = if raw.is_absolute() { raw } else { base.join(raw) };
        match audio_check {
            AudioCheck::Ignore => {}
            AudioCheck::Warn | AudioCheck::Fail => {
                if !audio_path.exists() {
                    if audio_check == AudioCheck::Fail {
                        return Err(Error::data(format!(
                            "{path:?}:{lineno}: audio file {audio_path:?} is missing"
                        )));
                    }
                    log::warn!("{path:?}:{lineno}: audio file {audio_path:?} is missing");
                }
            }
        }
        entries.push(ManifestEntry {
            utt_id,
            audio_path,
            dialect,
            style,
            duration_s,
            transcript: cols[5].to_string(),
        });
    }
    Ok(entries)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.3}\t{}\n",
            e.utt_id,
            e.audio_path.display(),
            e.dialect,
            e.style,
            e.duration_s,
            e.transcript
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One source for [`mix`]: `weight: None` means take every entry.
pub struct MixSource {
    pub entries: Vec<ManifestEntry>,
    pub weight: Option<f64>,
}

pub struct MixSpec {
    pub sources: Vec<MixSource>,
    /// Total draws across weighted sources; defaults to their combined size.
    pub total_draws: Option<usize>,
    pub seed: u64,
}

/// Merge sources into one shuffled manifest. Weighted sources are sampled
/// without replacement with largest-remainder allocation, so realized
/// proportions sit within one item of exact; take-all sources are included
/// fully. Deterministic under the seed.
pub fn mix(spec: MixSpec) -> Result<Vec<ManifestEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weighted: Vec<&MixSource> = spec.sources.iter().filter(|s| s.weight.is_some()).collect();
    let mut out: Vec<ManifestEntry> = Vec::new();

    if !weighted.is_empty() {
        let total_weight: f64 = weighted.iter().map(|s| s.weight.unwrap().max(0.0)).sum();
        if total_weight > 0.0 {
            let default_total: usize = weighted.iter().map(|s| s.entries.len()).sum();
            let total = spec.total_draws.unwrap_or(default_total);
            // Largest-remainder allocation.
            let exact: Vec<f64> = weighted
                .iter()
                .map(|s| total as f64 * s.weight.unwrap().max(0.0) / total_weight)
                .collect();
            let mut alloc: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
            let mut rest = total - alloc.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..weighted.len()).collect();
            order.sort_by(|&a, &b| {
                (exact[b] - exact[b].floor())
                    .total_cmp(&(exact[a] - exact[a].floor()))
                    .then(a.cmp(&b))
            });
            for &i in order.iter().cycle().take_while(|_| rest > 0) {
                alloc[i] += 1;
                rest -= 1;
            }
            for (src, want) in weighted.iter().zip(alloc) {
                let take = want.min(src.entries.len());
                if take < want {
                    log::warn!(
                        "mix: source holds {} entries, wanted {want}; taking all",
                        src.entries.len()
                    );
                }
                let mut idx: Vec<usize> = (0..src.entries.len()).collect();
                idx.shuffle(&mut rng);
                out.extend(idx.into_iter().take(take).map(|i| src.entries[i].clone()));
            }
        }
    }
    for src in spec.sources.iter().filter(|s| s.weight.is_none()) {
        out.extend(src.entries.iter().cloned());
    }
    if out.is_empty() {
        return Err(Error::data("mix produced no entries"));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Exact predicate filtering on dialect and/or style.
pub fn filter(
    entries: &[ManifestEntry],
    dialect: Option<Dialect>,
    style: Option<Style>,
) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| dialect.map_or(true, |d| e.dialect == d))
        .filter(|e| style.map_or(true, |s| e.style == s))
        .cloned()
        .collect()
}

/// Sort by duration, form contiguous batches (minimizing padding waste),
/// then shuffle batch order. Ties sort by utt_id so batching is stable.
pub fn batch_by_length(
    entries: &[ManifestEntry],
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<ManifestEntry>> {
    assert!(batch_size > 0);
    let mut sorted: Vec<ManifestEntry> = entries.to_vec();
    sorted.sort_by(|a, b| {
        a.duration_s
            .total_cmp(&b.duration_s)
            .then_with(|| a.utt_id.cmp(&b.utt_id))
    });
    let mut batches: Vec<Vec<ManifestEntry>> = sorted
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    batches
}

/// Mean padding fraction if the batches were padded to their max duration.
pub fn padding_fraction(batches: &[Vec<ManifestEntry>]) -> f64 {
    let mut padded = 0.0;
    let mut used = 0.0;
    for b in batches {
        let max = b.iter().map(|e| e.duration_s).fold(0.0, f64::max);
        padded += max * b.len() as f64;
        used += b.iter().map(|e| e.duration_s).sum::<f64>();
    }
    if padded == 0.0 {
        0.0
    } else {
        1.0 - used / padded
    }
}

/// Deterministically shuffle entries (fresh order per epoch).
pub fn shuffled(entries: &[ManifestEntry], seed: u64) -> Vec<ManifestEntry> {
    let mut out = entries.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

pub fn entry_for_test(utt_id: &str, dialect: Dialect, style: Style, dur: f64) -> ManifestEntry {
    ManifestEntry {
        utt_id: utt_id.to_string(),
        audio_path: PathBuf::from(format!("{utt_id}.wav")),
        dialect,
        style,
        duration_s: dur,
        transcript: String::new(),
    }
}

/// Uniform random durations helper used by tests.
pub fn random_durations(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.5..8.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write(&p, "");
        assert!(load_manifest(&p, AudioCheck::Ignore).unwrap().is_empty());
    }

    #[test]
    fn three_line_manifest_roundtrips_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let body = format!(
            "{MANIFEST_HEADER}\n\
             u1\ta.wav\tSG\twhisper\t1.500\tHELLO THERE\n\
             u2\tb.wav\tUS\tnormal\t0.800\tBYE\n\
             u3\tsub/c.wav\tIRI\twhisper\t2.000\tWORD'S WORTH\n"
        );
        write(&p, &body);
        let entries = load_manifest(&p, AudioCheck::Ignore).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].utt_id, "u1");
        assert_eq!(entries[0].dialect, Dialect::Sg);
        assert_eq!(entries[0].style, Style::Whisper);
        assert_eq!(entries[0].duration_s, 1.5);
        assert_eq!(entries[2].transcript, "WORD'S WORTH");
        // Relative paths resolve against the manifest directory.
        assert_eq!(entries[1].audio_path, dir.path().join("b.wav"));
    }

    #[test]
    fn bad_enum_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write(
            &p,
            &format!("{MANIFEST_HEADER}\nu1\ta.wav\tSG\tshout\t1.0\tHI\n"),
        );
        let err = load_manifest(&p, AudioCheck::Ignore).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("shout"), "{err}");
    }

    #[test]
    fn duplicate_utt_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write(
            &p,
            &format!("{MANIFEST_HEADER}\nu1\ta.wav\tSG\tnormal\t1.0\tHI\nu1\tb.wav\tSG\tnormal\t1.0\tYO\n"),
        );
        assert!(load_manifest(&p, AudioCheck::Ignore).is_err());
    }

    #[test]
    fn missing_audio_fails_when_asked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write(
            &p,
            &format!("{MANIFEST_HEADER}\nu1\tnope.wav\tSG\tnormal\t1.0\tHI\n"),
        );
        assert!(load_manifest(&p, AudioCheck::Fail).is_err());
        assert_eq!(load_manifest(&p, AudioCheck::Warn).unwrap().len(), 1);
    }

    #[test]
    fn mix_single_take_all_is_permutation() {
        let src: Vec<ManifestEntry> = (0..10)
            .map(|i| entry_for_test(&format!("u{i}"), Dialect::Sg, Style::Normal, 1.0))
            .collect();
        let out = mix(MixSpec {
            sources: vec![MixSource {
                entries: src.clone(),
                weight: None,
            }],
            total_draws: None,
            seed: 5,
        })
        .unwrap();
        assert_eq!(out.len(), 10);
        let mut ids: Vec<String> = out.iter().map(|e| e.utt_id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = src.iter().map(|e| e.utt_id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn mix_equal_weights_split_within_one() {
        let a: Vec<ManifestEntry> = (0..100)
            .map(|i| entry_for_test(&format!("a{i}"), Dialect::Sg, Style::Normal, 1.0))
            .collect();
        let b: Vec<ManifestEntry> = (0..100)
            .map(|i| entry_for_test(&format!("b{i}"), Dialect::Us, Style::Normal, 1.0))
            .collect();
        let out = mix(MixSpec {
            sources: vec![
                MixSource {
                    entries: a,
                    weight: Some(1.0),
                },
                MixSource {
                    entries: b,
                    weight: Some(1.0),
                },
            ],
            total_draws: Some(100),
            seed: 7,
        })
        .unwrap();
        assert_eq!(out.len(), 100);
        let from_a = out.iter().filter(|e| e.utt_id.starts_with('a')).count();
        assert!((from_a as i64 - 50).abs() <= 1, "from_a = {from_a}");
    }

    #[test]
    fn mix_same_seed_same_order() {
        let src: Vec<ManifestEntry> = (0..30)
            .map(|i| entry_for_test(&format!("u{i}"), Dialect::Iri, Style::Whisper, 1.0))
            .collect();
        let make = || {
            mix(MixSpec {
                sources: vec![MixSource {
                    entries: src.clone(),
                    weight: None,
                }],
                total_draws: None,
                seed: 11,
            })
            .unwrap()
            .iter()
            .map(|e| e.utt_id.clone())
            .collect::<Vec<_>>()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn filters_partition_and_absent_dialect_is_empty() {
        let all = vec![
            entry_for_test("a", Dialect::Sg, Style::Whisper, 1.0),
            entry_for_test("b", Dialect::Sg, Style::Normal, 1.0),
            entry_for_test("c", Dialect::Us, Style::Whisper, 1.0),
            entry_for_test("d", Dialect::Iri, Style::Normal, 1.0),
            entry_for_test("e", Dialect::Sg, Style::Whisper, 1.0),
        ];
        let sg_w = filter(&all, Some(Dialect::Sg), Some(Style::Whisper));
        let sg_n = filter(&all, Some(Dialect::Sg), Some(Style::Normal));
        let sg_any = filter(&all, Some(Dialect::Sg), None);
        assert_eq!(sg_w.len() + sg_n.len(), sg_any.len());
        assert_eq!(sg_w.len(), 2);
        assert!(filter(&all, Some(Dialect::Other), None).is_empty());
    }

    #[test]
    fn length_batching_reduces_padding() {
        let durations = random_durations(64, 3);
        let entries: Vec<ManifestEntry> = durations
            .iter()
            .enumerate()
            .map(|(i, &d)| entry_for_test(&format!("u{i:03}"), Dialect::Sg, Style::Normal, d))
            .collect();
        let sorted = batch_by_length(&entries, 8, 1);
        let unsorted: Vec<Vec<ManifestEntry>> =
            entries.chunks(8).map(|c| c.to_vec()).collect();
        assert!(padding_fraction(&sorted) <= padding_fraction(&unsorted));
        assert_eq!(sorted.len(), 8);
        // Singleton manifest -> one batch.
        assert_eq!(batch_by_length(&entries[..1], 8, 1).len(), 1);
        // 16 items, batch 8 -> 2 batches.
        assert_eq!(batch_by_length(&entries[..16], 8, 1).len(), 2);
    }
}

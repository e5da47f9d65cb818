//! Corpus manifests, augmentation bookkeeping, and speaker-aware splits.
//!
//! A manifest is a CSV file with header `path,speaker,session,label,augmentation`
//! listing one utterance per row. Audio paths are stored relative to the
//! manifest's directory. Speed-perturbed training copies exist only as
//! manifest rows — the audio pipeline materializes them at load time.

mod synth;

pub use synth::{generate_synthetic, SynthSpec};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("row {row}: unknown label {label:?} (allowed: angry, happy, neutral, sad)")]
    UnknownLabel { row: usize, label: String },
    #[error("row {row}: unknown augmentation tag {tag:?} (allowed: original, speed-<factor>)")]
    UnknownAugmentation { row: usize, tag: String },
    #[error("row {row}: duplicate (path, augmentation) = ({path:?}, {augmentation})")]
    DuplicateRecord {
        row: usize,
        path: String,
        augmentation: Augmentation,
    },
    #[error("row {row}: malformed row: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("manifest header must be `path,speaker,session,label,augmentation`, got {0:?}")]
    BadHeader(Vec<String>),
    #[error("csv error reading {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("augmentation factors must be non-empty and distinct")]
    BadFactors,
    #[error("manifest already contains augmented records (row {row})")]
    AlreadyAugmented { row: usize },
    #[error("session {session:?} has {count} speakers; leave-one-speaker-out needs exactly 2")]
    SessionSpeakerCount { session: String, count: usize },
    #[error("empty training partition for test speaker {test_speaker:?} (corpus has a single session)")]
    EmptyTrainPartition { test_speaker: String },
    #[error("audio error: {0}")]
    Audio(#[from] crate::audio::AudioError),
    #[error("invalid synthesis spec: {0}")]
    BadSynthSpec(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// The fixed four-class emotion set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Angry,
    Happy,
    Neutral,
    Sad,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 4] = [
        EmotionClass::Angry,
        EmotionClass::Happy,
        EmotionClass::Neutral,
        EmotionClass::Sad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionClass::Angry => "angry",
            EmotionClass::Happy => "happy",
            EmotionClass::Neutral => "neutral",
            EmotionClass::Sad => "sad",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionClass {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "angry" => Ok(EmotionClass::Angry),
            "happy" => Ok(EmotionClass::Happy),
            "neutral" => Ok(EmotionClass::Neutral),
            "sad" => Ok(EmotionClass::Sad),
            _ => Err(()),
        }
    }
}

/// How an utterance row derives from its source audio.
#[derive(Debug, Clone, Copy)]
pub enum Augmentation {
    Original,
    /// Speed-perturbed copy at the given factor (e.g. 0.9 or 1.1).
    Speed(f64),
}

impl Augmentation {
    pub fn is_original(self) -> bool {
        matches!(self, Augmentation::Original)
    }

    fn key(self) -> u64 {
        match self {
            Augmentation::Original => u64::MAX,
            Augmentation::Speed(f) => f.to_bits(),
        }
    }
}

impl PartialEq for Augmentation {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Augmentation {}
impl std::hash::Hash for Augmentation {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmentation::Original => f.write_str("original"),
            Augmentation::Speed(factor) => write!(f, "speed-{factor}"),
        }
    }
}

impl FromStr for Augmentation {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        if s == "original" {
            return Ok(Augmentation::Original);
        }
        let factor = s.strip_prefix("speed-").ok_or(())?;
        let factor: f64 = factor.parse().map_err(|_| ())?;
        if factor > 0.0 {
            Ok(Augmentation::Speed(factor))
        } else {
            Err(())
        }
    }
}

/// One utterance row of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    /// Audio path relative to the manifest directory.
    pub path: String,
    pub speaker_id: String,
    pub session_id: String,
    pub label: EmotionClass,
    pub augmentation: Augmentation,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub name: String,
    pub records: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted unique speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// session id -> sorted speaker ids.
    pub fn sessions(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.session_id.clone())
                .or_default()
                .insert(r.speaker_id.clone());
        }
        map.into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect()
    }

    /// Utterance counts per emotion class, in `EmotionClass::ALL` order.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }
}

const HEADER: [&str; 5] = ["path", "speaker", "session", "label", "augmentation"];

/// Parse a manifest CSV. Referenced audio files are not opened.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CorpusError::Io {
                path: display.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => CorpusError::Csv {
                path: display.clone(),
                source: e,
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Csv {
            path: display.clone(),
            source: e,
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(CorpusError::BadHeader(
            headers.iter().map(String::from).collect(),
        ));
    }
    let mut records = Vec::new();
    let mut seen: HashSet<(String, Augmentation)> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2; // header is line 1
        let row = row.map_err(|e| CorpusError::MalformedRow {
            row: row_no,
            reason: e.to_string(),
        })?;
        if row.len() != 5 {
            return Err(CorpusError::MalformedRow {
                row: row_no,
                reason: format!("expected 5 fields, got {}", row.len()),
            });
        }
        let label: EmotionClass = row[3].parse().map_err(|_| CorpusError::UnknownLabel {
            row: row_no,
            label: row[3].to_string(),
        })?;
        let augmentation: Augmentation =
            row[4].parse().map_err(|_| CorpusError::UnknownAugmentation {
                row: row_no,
                tag: row[4].to_string(),
            })?;
        if row[0].is_empty() || row[1].is_empty() || row[2].is_empty() {
            return Err(CorpusError::MalformedRow {
                row: row_no,
                reason: "path, speaker and session must be non-empty".into(),
            });
        }
        if !seen.insert((row[0].to_string(), augmentation)) {
            return Err(CorpusError::DuplicateRecord {
                row: row_no,
                path: row[0].to_string(),
                augmentation,
            });
        }
        records.push(UtteranceRecord {
            path: row[0].to_string(),
            speaker_id: row[1].to_string(),
            session_id: row[2].to_string(),
            label,
            augmentation,
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    Ok(CorpusManifest { name, records })
}

pub fn save_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| CorpusError::Io {
        path: display.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let csv_err = |e: csv::Error| CorpusError::Csv {
        path: display.clone(),
        source: e,
    };
    writer.write_record(HEADER).map_err(csv_err)?;
    for r in &manifest.records {
        writer
            .write_record([
                r.path.as_str(),
                r.speaker_id.as_str(),
                r.session_id.as_str(),
                r.label.as_str(),
                &r.augmentation.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| CorpusError::Io {
        path: display,
        source: e,
    })
}

/// Add one speed-perturbed row per (original record, factor).
///
/// The input must contain originals only; the output holds each original
/// followed by its tagged copies, `|m| * (1 + |factors|)` records in total.
pub fn augment_manifest(manifest: &CorpusManifest, factors: &[f64]) -> Result<CorpusManifest> {
    if factors.is_empty() {
        return Err(CorpusError::BadFactors);
    }
    let mut distinct: HashSet<u64> = HashSet::new();
    for &f in factors {
        if !(f > 0.0) || !distinct.insert(f.to_bits()) {
            return Err(CorpusError::BadFactors);
        }
    }
    if let Some(i) = manifest
        .records
        .iter()
        .position(|r| !r.augmentation.is_original())
    {
        return Err(CorpusError::AlreadyAugmented { row: i + 2 });
    }
    let mut records = Vec::with_capacity(manifest.len() * (1 + factors.len()));
    for r in &manifest.records {
        records.push(r.clone());
        for &f in factors {
            let mut copy = r.clone();
            copy.augmentation = Augmentation::Speed(f);
            records.push(copy);
        }
    }
    Ok(CorpusManifest {
        name: manifest.name.clone(),
        records,
    })
}

/// One leave-one-speaker-out split.
///
/// The held-out speaker's session partner provides the validation set;
/// training uses everything from all other sessions, augmented copies
/// included. Validation and test sets hold originals only.
#[derive(Debug, Clone)]
pub struct LosoFold {
    pub test_speaker: String,
    pub val_speaker: String,
    pub train: Vec<UtteranceRecord>,
    pub val: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

/// Build one fold per speaker (two per session).
pub fn loso_folds(manifest: &CorpusManifest) -> Result<Vec<LosoFold>> {
    let sessions = manifest.sessions();
    for (session, speakers) in &sessions {
        if speakers.len() != 2 {
            return Err(CorpusError::SessionSpeakerCount {
                session: session.clone(),
                count: speakers.len(),
            });
        }
    }
    let mut folds = Vec::new();
    for (session, speakers) in &sessions {
        for (a, b) in [(0, 1), (1, 0)] {
            let test_speaker = speakers[a].clone();
            let val_speaker = speakers[b].clone();
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            for r in &manifest.records {
                if r.session_id == *session {
                    if !r.augmentation.is_original() {
                        continue;
                    }
                    if r.speaker_id == test_speaker {
                        test.push(r.clone());
                    } else {
                        val.push(r.clone());
                    }
                } else {
                    train.push(r.clone());
                }
            }
            if train.is_empty() {
                return Err(CorpusError::EmptyTrainPartition { test_speaker });
            }
            folds.push(LosoFold {
                test_speaker,
                val_speaker,
                train,
                val,
                test,
            });
        }
    }
    Ok(folds)
}

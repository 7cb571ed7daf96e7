use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<PathBuf>,
}

/// Speakers with their utterance files, sorted by speaker id and path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub speakers: Vec<SpeakerEntry>,
}

/// Speaker-to-split assignment.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum SplitSpec {
    /// Last `floor(n·4/109)` speakers (lexicographic) are held out.
    #[default]
    Default,
    Explicit(BTreeMap<String, Split>),
}

impl SplitSpec {
    /// Parses lines of `<speaker_id> <train|test>`; blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let split = match fields.as_slice() {
                [_, "train"] => Split::Train,
                [_, "test"] => Split::Test,
                _ => {
                    return Err(Error::Manifest(format!(
                        "split line {}: expected '<speaker_id> <train|test>', got '{line}'",
                        n + 1
                    )))
                }
            };
            if map.insert(fields[0].to_string(), split).is_some() {
                return Err(Error::Manifest(format!("split line {}: speaker {} listed twice", n + 1, fields[0])));
            }
        }
        Ok(SplitSpec::Explicit(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(&text).map_err(|e| e.at(path))
    }

    fn assign(&self, ids: &[String]) -> Result<Vec<Split>> {
        match self {
            SplitSpec::Default => {
                let n_test = ids.len() * 4 / 109;
                Ok((0..ids.len())
                    .map(|i| if i >= ids.len() - n_test { Split::Test } else { Split::Train })
                    .collect())
            }
            SplitSpec::Explicit(map) => ids
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| Error::Manifest(format!("speaker {id} is missing from the split file")))
                })
                .collect(),
        }
    }
}

impl CorpusManifest {
    pub fn train_speakers(&self) -> impl Iterator<Item = &SpeakerEntry> {
        self.speakers.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test_speakers(&self) -> impl Iterator<Item = &SpeakerEntry> {
        self.speakers.iter().filter(|s| s.split == Split::Test)
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerEntry> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers.is_empty() {
            return Err(Error::Manifest("corpus has no speakers".into()));
        }
        if self.train_speakers().next().is_none() {
            return Err(Error::Manifest("corpus has no training speakers".into()));
        }
        for s in self.train_speakers() {
            if s.utterances.len() < 2 {
                return Err(Error::Manifest(format!(
                    "training speaker {} has {} utterance(s); pairing needs at least 2",
                    s.id,
                    s.utterances.len()
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let inner = || -> Result<Self> {
            let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            m.validate()?;
            Ok(m)
        };
        inner().map_err(|e| e.at(path))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::from(e).at(path))
    }
}

/// Utterance id of a file: its stem.
pub fn utterance_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Indexes `root/<speaker_id>/<utterance>.<extension>`. Speakers and
/// utterances are sorted so repeated scans agree.
pub fn scan_corpus(root: impl AsRef<Path>, extension: &str, split: &SplitSpec) -> Result<CorpusManifest> {
    let root = root.as_ref();
    let mut speakers = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::from(e).at(root))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let mut utterances: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::from(e).at(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(extension)))
            .collect();
        if utterances.is_empty() {
            continue;
        }
        utterances.sort();
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        speakers.push((id, utterances));
    }
    if speakers.is_empty() {
        return Err(Error::Manifest(format!("no *.{extension} files under {}", root.display())));
    }
    let ids: Vec<String> = speakers.iter().map(|(id, _)| id.clone()).collect();
    let splits = split.assign(&ids)?;
    let manifest = CorpusManifest {
        speakers: speakers
            .into_iter()
            .zip(splits)
            .map(|((id, utterances), split)| SpeakerEntry { id, split, utterances })
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

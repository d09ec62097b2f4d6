//! N-back task sequences: generation, validation and JSON Lines storage.
//!
//! Each instance is 24 letters with exactly 8 matches. Match positions are a
//! uniform 8-subset of `{N..23}`; every other position at or past `N` draws
//! uniformly from the 19 letters that differ from the letter `N` back.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEQ_LEN: usize = 24;
pub const MATCHES: usize = 8;
pub const NONMATCHES: usize = SEQ_LEN - MATCHES;
pub const TRAIN_SIZE: usize = 800;
pub const TEST_SIZE: usize = 200;
pub const MATCH: char = 'm';
pub const NONMATCH: char = '-';

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("n_back must be at least 1, got {0}")]
    InvalidNBack(usize),
    #[error("n_back {n_back} leaves {eligible} eligible positions, fewer than {MATCHES} matches")]
    Capacity { n_back: usize, eligible: usize },
    #[error("letter {letter:?} at position {position} is not in the alphabet")]
    Letter { letter: char, position: usize },
    #[error("expected {expected} characters, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    InvalidRecord {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The fixed 20-consonant alphabet. Letter order defines token ids `0..20`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Alphabet;

impl Alphabet {
    pub const LETTERS: &'static str = "bcdfghjklnpqrstvwxyz";
    pub const SIZE: usize = 20;

    pub fn letter(id: usize) -> char {
        Self::LETTERS.as_bytes()[id] as char
    }

    pub fn index_of(letter: char) -> Option<usize> {
        Self::LETTERS.find(letter).filter(|_| letter.is_ascii())
    }
}

/// One 24-letter sequence with its per-position match labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub n_back: usize,
    pub sequence: String,
    pub labels: String,
}

impl TaskInstance {
    /// Checks every instance invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_back == 0 {
            return Err(DatasetError::InvalidNBack(0));
        }
        let labels = labels_from_sequence(&self.sequence, self.n_back)?;
        if self.labels.chars().count() != SEQ_LEN {
            return Err(DatasetError::Length {
                expected: SEQ_LEN,
                actual: self.labels.chars().count(),
            });
        }
        if let Some(bad) = self.labels.chars().find(|&c| c != MATCH && c != NONMATCH) {
            return Err(DatasetError::Invariant(format!(
                "label {bad:?} is neither 'm' nor '-'"
            )));
        }
        let matches = self.labels.chars().filter(|&c| c == MATCH).count();
        if matches != MATCHES {
            return Err(DatasetError::Invariant(format!(
                "expected {MATCHES} 'm' labels, found {matches}"
            )));
        }
        if labels != self.labels {
            return Err(DatasetError::Invariant(format!(
                "labels {:?} disagree with the {}-back structure of {:?} (expected {:?})",
                self.labels, self.n_back, self.sequence, labels
            )));
        }
        Ok(())
    }

    /// Token ids of the sequence. Letters are assumed valid.
    pub fn token_ids(&self) -> Vec<usize> {
        self.sequence
            .chars()
            .map(|c| Alphabet::index_of(c).expect("validated letter"))
            .collect()
    }

    /// Class targets per position: 1 for match, 0 for nonmatch.
    pub fn targets(&self) -> Vec<usize> {
        self.labels
            .chars()
            .map(|c| usize::from(c == MATCH))
            .collect()
    }
}

/// Labels a sequence of any length; positions before `n_back` are nonmatches.
pub(crate) fn label_letters(letters: &[char], n_back: usize) -> String {
    (0..letters.len())
        .map(|i| {
            if i >= n_back && letters[i] == letters[i - n_back] {
                MATCH
            } else {
                NONMATCH
            }
        })
        .collect()
}

/// Derives the match labels of a 24-letter sequence directly from its letters.
pub fn labels_from_sequence(sequence: &str, n_back: usize) -> Result<String, DatasetError> {
    if n_back == 0 {
        return Err(DatasetError::InvalidNBack(0));
    }
    let letters: Vec<char> = sequence.chars().collect();
    if letters.len() != SEQ_LEN {
        return Err(DatasetError::Length {
            expected: SEQ_LEN,
            actual: letters.len(),
        });
    }
    if let Some((position, &letter)) = letters
        .iter()
        .enumerate()
        .find(|(_, &c)| Alphabet::index_of(c).is_none())
    {
        return Err(DatasetError::Letter { letter, position });
    }
    Ok(label_letters(&letters, n_back))
}

fn check_n_back(n_back: usize) -> Result<(), DatasetError> {
    if n_back == 0 {
        return Err(DatasetError::InvalidNBack(0));
    }
    let eligible = SEQ_LEN.saturating_sub(n_back);
    if eligible < MATCHES {
        return Err(DatasetError::Capacity { n_back, eligible });
    }
    Ok(())
}

/// Draws one instance with exactly 8 matches.
pub fn generate_instance<R: Rng + ?Sized>(
    n_back: usize,
    rng: &mut R,
) -> Result<TaskInstance, DatasetError> {
    check_n_back(n_back)?;
    let mut is_match = [false; SEQ_LEN];
    for k in index::sample(rng, SEQ_LEN - n_back, MATCHES) {
        is_match[n_back + k] = true;
    }
    let mut ids = [0usize; SEQ_LEN];
    for i in 0..SEQ_LEN {
        ids[i] = if i < n_back {
            rng.random_range(0..Alphabet::SIZE)
        } else if is_match[i] {
            ids[i - n_back]
        } else {
            let back = ids[i - n_back];
            let k = rng.random_range(0..Alphabet::SIZE - 1);
            if k >= back {
                k + 1
            } else {
                k
            }
        };
    }
    let sequence: String = ids.iter().map(|&id| Alphabet::letter(id)).collect();
    let labels: String = is_match
        .iter()
        .map(|&m| if m { MATCH } else { NONMATCH })
        .collect();
    Ok(TaskInstance {
        n_back,
        sequence,
        labels,
    })
}

/// Train and test splits for one `n_back`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub n_back: usize,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for inst in self.train.iter().chain(&self.test) {
            if inst.n_back != self.n_back {
                return Err(DatasetError::Invariant(format!(
                    "instance has n_back {} in a {}-back dataset",
                    inst.n_back, self.n_back
                )));
            }
            inst.validate()?;
        }
        Ok(())
    }
}

/// Generates a dataset deterministically from `seed`. Train and test draw
/// from separate ChaCha streams of the same key.
pub fn generate_dataset(
    n_back: usize,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    check_n_back(n_back)?;
    let split = |stream: u64, count: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..count)
            .map(|_| generate_instance(n_back, &mut rng))
            .collect::<Result<Vec<_>, _>>()
    };
    Ok(Dataset {
        n_back,
        train: split(0, train_n)?,
        test: split(1, test_n)?,
    })
}

pub fn train_file_name(n_back: usize) -> String {
    format!("nback{n_back}_train.jsonl")
}

pub fn test_file_name(n_back: usize) -> String {
    format!("nback{n_back}_test.jsonl")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON object per line, LF-terminated.
pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads and validates a JSON Lines file. Errors carry the 1-based line number.
pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut instances = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| DatasetError::InvalidRecord {
            path: path.to_path_buf(),
            line: line_no,
            source: Box::new(e),
        })?;
        instances.push(inst);
    }
    Ok(instances)
}

/// Saves both splits into `dir` as `nback{N}_train.jsonl` / `nback{N}_test.jsonl`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_instances(&dir.join(train_file_name(dataset.n_back)), &dataset.train)?;
    write_instances(&dir.join(test_file_name(dataset.n_back)), &dataset.test)
}

pub fn load_dataset(dir: &Path, n_back: usize) -> Result<Dataset, DatasetError> {
    let dataset = Dataset {
        n_back,
        train: read_instances(&dir.join(train_file_name(n_back)))?,
        test: read_instances(&dir.join(test_file_name(n_back)))?,
    };
    dataset.validate()?;
    Ok(dataset)
}

//! Trial records, preprocessing, dataset I/O, splits and the synthetic generator.

mod io;
pub mod resample;
pub mod split;
pub mod summary;
pub mod synth;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, write_dataset, write_preprocessed, Dataset, Rejection};
pub use split::{holdout_trials, split_by_user, Split, SplitAssignment};

/// Rows of every preprocessed modality sequence.
pub const SEQ_LEN: usize = 400;

pub const FLAGS: [&str; 3] = ["first_fix", "scenario", "video"];

pub const TRAITS: [&str; 5] = ["O", "C", "E", "A", "N"];

/// Minimum raw trial duration in seconds.
pub const MIN_DURATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eye,
    Pupil,
    Au,
    Gsr,
}

const EYE: &[&str] = &[
    "gaze_x",
    "gaze_y",
    "fixation",
    "fixation_duration",
    "saccade_velocity",
    "blink",
];
const PUPIL: &[&str] = &["pupil_left", "pupil_right", "pupil_avg"];
const AU: &[&str] = &[
    "AU01_r", "AU02_r", "AU04_r", "AU06_r", "AU07_r", "AU12_r", "AU15_r", "AU25_r", "AU01_c", "AU02_c",
    "AU04_c", "AU06_c", "AU07_c", "AU12_c", "AU15_c", "AU25_c", "confidence",
];
const GSR: &[&str] = &["gsr_raw", "gsr_calibrated", "phasic", "tonic"];

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Eye, Modality::Pupil, Modality::Au, Modality::Gsr];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eye => "eye",
            Modality::Pupil => "pupil",
            Modality::Au => "au",
            Modality::Gsr => "gsr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Feature columns, excluding `t` and the flag columns.
    pub fn features(self) -> &'static [&'static str] {
        match self {
            Modality::Eye => EYE,
            Modality::Pupil => PUPIL,
            Modality::Au => AU,
            Modality::Gsr => GSR,
        }
    }

    /// Feature columns followed by the flags: the model input width.
    pub fn columns(self) -> Vec<&'static str> {
        self.features().iter().copied().chain(FLAGS).collect()
    }

    pub fn width(self) -> usize {
        self.features().len() + FLAGS.len()
    }

    /// Native sampling rate of the synthetic streams, in Hz.
    pub fn rate_hz(self) -> f64 {
        match self {
            Modality::Eye | Modality::Pupil => 150.0,
            Modality::Au => 40.0,
            Modality::Gsr => 50.0,
        }
    }
}

/// Whether a column is resampled by nearest neighbour instead of interpolation.
pub fn is_categorical(column: &str) -> bool {
    FLAGS.contains(&column) || column == "fixation" || column == "blink" || column.ends_with("_c")
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown modality `{s}` (expected eye, pupil, au or gsr)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}, row {row}, column `{column}`: {msg}")]
    Schema {
        file: String,
        row: usize,
        column: String,
        msg: String,
    },
    #[error("rating {0} outside 1..=9")]
    Rating(i64),
    #[error("{op}: empty series")]
    Empty { op: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("trial rejected: {0}")]
    Rejected(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// A timed multichannel recording. `data[c][i]` is column `c` at `t[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub t: Vec<f64>,
    pub columns: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl RawSeries {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| &self.data[i][..])
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// One stimulus presentation as recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub user_id: String,
    /// Indexed by [`Modality::index`].
    pub signals: [RawSeries; 4],
    pub stim_emo: [f64; 2],
    pub felt_valence: u8,
    pub felt_arousal: u8,
    pub personality: [f64; 5],
}

impl TrialRecord {
    pub fn signal(&self, m: Modality) -> &RawSeries {
        &self.signals[m.index()]
    }
}

/// A trial ready for the model: fixed-length sequences plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTrial {
    pub trial_id: String,
    pub user_id: String,
    /// Row-major `[SEQ_LEN, width]` per modality.
    pub seqs: [Vec<f32>; 4],
    pub summary: Vec<f32>,
    pub valence: usize,
    pub arousal: usize,
    pub felt: [u8; 2],
    pub personality: [f32; 5],
    pub stim_emo: [f32; 2],
}

/// Equal-width bins over the 9-point scale: 1-3, 4-6, 7-9.
pub fn bin_rating(r: i64) -> Result<usize> {
    match r {
        1..=3 => Ok(0),
        4..=6 => Ok(1),
        7..=9 => Ok(2),
        _ => Err(DataError::Rating(r)),
    }
}

/// Validates a record and converts it to model-ready form.
pub fn preprocess(rec: &TrialRecord) -> Result<ProcessedTrial> {
    let names = summary::summary_names();
    let summary = summary::compute_summary(rec)?;
    debug_assert_eq!(summary.len(), names.len());
    let mut seqs: [Vec<f32>; 4] = Default::default();
    for m in Modality::ALL {
        seqs[m.index()] = resample::resample_modality(rec.signal(m), m)?;
    }
    finish(rec, seqs, summary.iter().map(|&v| v as f32).collect())
}

fn finish(rec: &TrialRecord, seqs: [Vec<f32>; 4], summary: Vec<f32>) -> Result<ProcessedTrial> {
    if rec.personality.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DataError::Invalid(format!(
            "{}: personality scores must lie in [0, 1]",
            rec.trial_id
        )));
    }
    if rec.stim_emo.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Invalid(format!("{}: non-finite stim_emo", rec.trial_id)));
    }
    Ok(ProcessedTrial {
        trial_id: rec.trial_id.clone(),
        user_id: rec.user_id.clone(),
        seqs,
        summary,
        valence: bin_rating(i64::from(rec.felt_valence))?,
        arousal: bin_rating(i64::from(rec.felt_arousal))?,
        felt: [rec.felt_valence, rec.felt_arousal],
        personality: rec.personality.map(|v| v as f32),
        stim_emo: rec.stim_emo.map(|v| v as f32),
    })
}

//! On-disk dataset format.
//!
//! ```text
//! manifest.csv          trial_id,user_id,stim_valence,stim_arousal,felt_valence,felt_arousal,O,C,E,A,N,form
//! summary_schema.csv    feature        (one summary feature name per row)
//! <trial>_<modality>.csv  t,<features...>,first_fix,scenario,video
//! <trial>_summary.csv   optional, preprocessed form only: header of feature names, one row
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::summary::summary_names;
use super::{finish, preprocess, resample, DataError, Modality, ProcessedTrial, RawSeries, Result, TrialRecord, FLAGS, SEQ_LEN};

pub const MANIFEST_HEADER: [&str; 12] = [
    "trial_id",
    "user_id",
    "stim_valence",
    "stim_arousal",
    "felt_valence",
    "felt_arousal",
    "O",
    "C",
    "E",
    "A",
    "N",
    "form",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Raw,
    Preprocessed,
}

/// A trial skipped during loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub trial_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Sorted by trial id.
    pub trials: Vec<ProcessedTrial>,
    pub summary_names: Vec<String>,
    /// Column names per modality, indexed by [`Modality::index`].
    pub columns: [Vec<String>; 4],
    pub rejected: Vec<Rejection>,
}

impl Dataset {
    /// Builds a dataset from in-memory records, rejecting invalid trials.
    pub fn from_records(records: &[TrialRecord]) -> Result<Self> {
        let mut trials = Vec::with_capacity(records.len());
        let mut rejected = Vec::new();
        for r in records {
            match preprocess(r) {
                Ok(t) => trials.push(t),
                Err(DataError::Rejected(reason)) => {
                    log::warn!("rejecting {}: {reason}", r.trial_id);
                    rejected.push(Rejection {
                        trial_id: r.trial_id.clone(),
                        reason,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        trials.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        Ok(Self {
            trials,
            summary_names: summary_names(),
            columns: default_columns(),
            rejected,
        })
    }

    /// Input width per modality.
    pub fn widths(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.columns[i].len())
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.trials.iter().map(|t| t.user_id.clone()).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Schema {
            file: path.display().to_string(),
            row,
            column: String::new(),
            msg: format!("{other:?}"),
        },
    }
}

fn schema(path: &Path, row: usize, column: &str, msg: impl Into<String>) -> DataError {
    DataError::Schema {
        file: path.display().to_string(),
        row,
        column: column.to_string(),
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f))
}

fn parse_f64(path: &Path, row: usize, column: &str, s: &str) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>()
        .map_err(|_| schema(path, row, column, format!("`{s}` is not a number")))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// Shortest text that reads back to the same `f32`.
fn fmt32(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        (v as f32).to_string()
    }
}

struct ManifestRow {
    trial_id: String,
    user_id: String,
    stim: [f64; 2],
    felt: [u8; 2],
    personality: [f64; 5],
    form: Form,
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rd = reader(path)?;
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(schema(
            path,
            1,
            "",
            format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let num = |k: usize| -> Result<f64> {
            let v = parse_f64(path, row, MANIFEST_HEADER[k], field(k))?;
            if v.is_nan() {
                return Err(schema(path, row, MANIFEST_HEADER[k], "missing value"));
            }
            Ok(v)
        };
        let rating = |k: usize| -> Result<u8> {
            let v: i64 = field(k)
                .parse()
                .map_err(|_| schema(path, row, MANIFEST_HEADER[k], format!("`{}` is not an integer", field(k))))?;
            if !(1..=9).contains(&v) {
                return Err(schema(path, row, MANIFEST_HEADER[k], format!("rating {v} outside 1..=9")));
            }
            Ok(v as u8)
        };
        let trial_id = field(0).to_string();
        if trial_id.is_empty() || trial_id.contains(['/', '\\']) {
            return Err(schema(path, row, "trial_id", "empty or contains a path separator"));
        }
        let stim = [num(2)?, num(3)?];
        for (k, v) in stim.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(schema(path, row, MANIFEST_HEADER[2 + k], format!("{v} outside [0, 1]")));
            }
        }
        let mut personality = [0.0; 5];
        for (k, p) in personality.iter_mut().enumerate() {
            *p = num(6 + k)?;
            if !(0.0..=1.0).contains(p) {
                return Err(schema(path, row, MANIFEST_HEADER[6 + k], format!("{p} outside [0, 1]")));
            }
        }
        let form = match field(11) {
            "raw" => Form::Raw,
            "preprocessed" => Form::Preprocessed,
            other => return Err(schema(path, row, "form", format!("`{other}` is not raw or preprocessed"))),
        };
        rows.push(ManifestRow {
            trial_id,
            user_id: field(1).to_string(),
            stim,
            felt: [rating(4)?, rating(5)?],
            personality,
            form,
        });
    }
    Ok(rows)
}

fn read_schema(path: &Path) -> Result<Vec<String>> {
    let mut rd = reader(path)?;
    let mut names = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        names.push(rec.get(0).unwrap_or("").trim().to_string());
    }
    if names.is_empty() {
        return Err(schema(path, 1, "feature", "no summary features listed"));
    }
    Ok(names)
}

/// Reads one modality file. `need_t` forces a leading `t` column.
fn read_series(path: &Path, m: Modality, form: Form) -> Result<RawSeries> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let has_t = header.first().is_some_and(|h| h == "t");
    if form == Form::Raw && !has_t {
        return Err(schema(path, 1, "t", "raw-form files must start with a `t` column"));
    }
    let columns: Vec<String> = header[usize::from(has_t)..].to_vec();
    if columns.len() < FLAGS.len() || columns[columns.len() - FLAGS.len()..] != FLAGS {
        return Err(schema(path, 1, "", format!("last columns must be {}", FLAGS.join(","))));
    }
    if form == Form::Raw {
        for f in m.features() {
            if !columns.iter().any(|c| c == f) {
                return Err(schema(path, 1, f, "required column missing"));
            }
        }
    }
    let mut t = Vec::new();
    let mut data = vec![Vec::new(); columns.len()];
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = i + 2;
        if rec.len() != header.len() {
            return Err(schema(path, row, "", format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let mut fields = rec.iter();
        if has_t {
            let v = parse_f64(path, row, "t", fields.next().unwrap())?;
            if !v.is_finite() {
                return Err(schema(path, row, "t", "missing timestamp"));
            }
            if t.last().is_some_and(|&p| v <= p) {
                return Err(schema(path, row, "t", "timestamps must be strictly increasing"));
            }
            t.push(v);
        }
        for ((name, col), s) in columns.iter().zip(&mut data).zip(fields) {
            let v = parse_f64(path, row, name, s)?;
            if FLAGS.contains(&name.as_str()) && !(v.is_nan() || v == 0.0 || v == 1.0) {
                return Err(schema(path, row, name, format!("flag value {v} is not 0 or 1")));
            }
            col.push(v);
        }
    }
    if data[0].is_empty() {
        return Err(DataError::Empty { op: "load_dataset" });
    }
    if form == Form::Preprocessed && data[0].len() != SEQ_LEN {
        return Err(schema(
            path,
            data[0].len() + 1,
            "",
            format!("preprocessed files need exactly {SEQ_LEN} rows, got {}", data[0].len()),
        ));
    }
    Ok(RawSeries { t, columns, data })
}

fn read_summary(path: &Path, names: &[String]) -> Result<Vec<f32>> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != names {
        return Err(schema(path, 1, "", "header does not match summary_schema.csv"));
    }
    let rec = rd
        .records()
        .next()
        .ok_or_else(|| schema(path, 2, "", "missing value row"))?
        .map_err(|e| csv_err(path, e))?;
    header
        .iter()
        .zip(rec.iter())
        .map(|(h, s)| {
            let v = parse_f64(path, 2, h, s)?;
            if v.is_finite() {
                Ok(v as f32)
            } else {
                Err(schema(path, 2, h, "non-finite summary value"))
            }
        })
        .collect()
}

fn modality_path(dir: &Path, trial: &str, m: Modality) -> PathBuf {
    dir.join(format!("{trial}_{m}.csv"))
}

fn load_trial(dir: &Path, row: &ManifestRow, names: &[String]) -> Result<(ProcessedTrial, [Vec<String>; 4])> {
    let mut series: Vec<RawSeries> = Vec::with_capacity(4);
    for m in Modality::ALL {
        let p = modality_path(dir, &row.trial_id, m);
        if !p.exists() {
            return Err(DataError::Rejected(format!("missing {m} file {}", p.display())));
        }
        series.push(read_series(&p, m, row.form)?);
    }
    let signals: [RawSeries; 4] = series.try_into().expect("four modalities");
    let columns = signals.clone().map(|s| s.columns);
    let rec = TrialRecord {
        trial_id: row.trial_id.clone(),
        user_id: row.user_id.clone(),
        signals,
        stim_emo: row.stim,
        felt_valence: row.felt[0],
        felt_arousal: row.felt[1],
        personality: row.personality,
    };
    match row.form {
        Form::Raw => {
            if names != summary_names() {
                return Err(DataError::Invalid(
                    "raw-form trials need the built-in summary schema".into(),
                ));
            }
            Ok((preprocess(&rec)?, columns))
        }
        Form::Preprocessed => {
            let sp = dir.join(format!("{}_summary.csv", row.trial_id));
            let summary = if sp.exists() {
                read_summary(&sp, names)?
            } else if rec.signals.iter().all(|s| !s.t.is_empty()) && names == summary_names() {
                super::summary::compute_summary(&rec)?.iter().map(|&v| v as f32).collect()
            } else {
                return Err(DataError::Rejected(format!("missing summary file {}", sp.display())));
            };
            let mut seqs: [Vec<f32>; 4] = Default::default();
            for m in Modality::ALL {
                let s = rec.signal(m);
                let width = s.columns.len();
                let mut out = vec![0f32; SEQ_LEN * width];
                for (c, (name, v)) in s.columns.iter().zip(&s.data).enumerate() {
                    let t: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
                    let v = resample::fill_nan(&t, v, super::is_categorical(name))?;
                    for (i, x) in v.iter().enumerate() {
                        out[i * width + c] = *x as f32;
                    }
                }
                seqs[m.index()] = out;
            }
            Ok((finish(&rec, seqs, summary)?, columns))
        }
    }
}

/// Loads and validates a dataset directory. Trials with missing modality
/// files, too-short recordings or long NaN gaps are skipped and reported in
/// [`Dataset::rejected`]; malformed files are hard errors.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let rows = read_manifest(&dir.join("manifest.csv"))?;
    let names = read_schema(&dir.join("summary_schema.csv"))?;
    let mut trials = Vec::with_capacity(rows.len());
    let mut rejected = Vec::new();
    let mut columns: Option<[Vec<String>; 4]> = None;
    for row in &rows {
        match load_trial(dir, row, &names) {
            Ok((t, cols)) => {
                match &columns {
                    None => columns = Some(cols),
                    Some(c) if *c != cols => {
                        return Err(DataError::Invalid(format!(
                            "{}: modality columns differ from earlier trials",
                            t.trial_id
                        )))
                    }
                    Some(_) => {}
                }
                trials.push(t)
            }
            Err(DataError::Rejected(reason)) => {
                log::warn!("rejecting {}: {reason}", row.trial_id);
                rejected.push(Rejection {
                    trial_id: row.trial_id.clone(),
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }
    trials.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    Ok(Dataset {
        trials,
        summary_names: names,
        columns: columns.unwrap_or_else(default_columns),
        rejected,
    })
}

fn write_manifest_and_schema(dir: &Path, rows: Vec<[String; 12]>, names: &[String]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("manifest.csv");
    let mut w = writer(&p)?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&p, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(io_err(&p))?;
    let p = dir.join("summary_schema.csv");
    let mut w = writer(&p)?;
    w.write_record(["feature"]).map_err(|e| csv_err(&p, e))?;
    for n in names {
        w.write_record([n]).map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(io_err(&p))
}

fn manifest_row(id: &str, user: &str, stim: [f64; 2], felt: [u8; 2], pers: [f64; 5], form: &str, fmt: fn(f64) -> String) -> [String; 12] {
    [
        id.to_string(),
        user.to_string(),
        fmt(stim[0]),
        fmt(stim[1]),
        felt[0].to_string(),
        felt[1].to_string(),
        fmt(pers[0]),
        fmt(pers[1]),
        fmt(pers[2]),
        fmt(pers[3]),
        fmt(pers[4]),
        form.to_string(),
    ]
}

/// Writes raw-form trials. Output is a pure function of the records.
pub fn write_dataset(dir: &Path, records: &[TrialRecord]) -> Result<()> {
    let rows = records
        .iter()
        .map(|r| {
            manifest_row(
                &r.trial_id,
                &r.user_id,
                r.stim_emo,
                [r.felt_valence, r.felt_arousal],
                r.personality,
                "raw",
                fmt,
            )
        })
        .collect();
    write_manifest_and_schema(dir, rows, &summary_names())?;
    for r in records {
        for m in Modality::ALL {
            let s = r.signal(m);
            let p = modality_path(dir, &r.trial_id, m);
            let mut w = writer(&p)?;
            let mut head = vec!["t".to_string()];
            head.extend(s.columns.iter().cloned());
            w.write_record(&head).map_err(|e| csv_err(&p, e))?;
            for i in 0..s.t.len() {
                let mut line = Vec::with_capacity(head.len());
                line.push(fmt(s.t[i]));
                line.extend(s.data.iter().map(|c| fmt(c[i])));
                w.write_record(&line).map_err(|e| csv_err(&p, e))?;
            }
            w.flush().map_err(io_err(&p))?;
        }
    }
    Ok(())
}

/// Writes preprocessed-form trials: 400-row files without `t` plus a
/// per-trial summary file.
pub fn write_preprocessed(dir: &Path, data: &Dataset) -> Result<()> {
    let columns = &data.columns;
    let rows = data
        .trials
        .iter()
        .map(|t| {
            manifest_row(
                &t.trial_id,
                &t.user_id,
                t.stim_emo.map(f64::from),
                t.felt,
                t.personality.map(f64::from),
                "preprocessed",
                fmt32,
            )
        })
        .collect();
    write_manifest_and_schema(dir, rows, &data.summary_names)?;
    for t in &data.trials {
        for m in Modality::ALL {
            let p = modality_path(dir, &t.trial_id, m);
            let cols = &columns[m.index()];
            let mut w = writer(&p)?;
            w.write_record(cols).map_err(|e| csv_err(&p, e))?;
            for row in t.seqs[m.index()].chunks(cols.len()) {
                w.write_record(row.iter().map(|&v| fmt32(f64::from(v))))
                    .map_err(|e| csv_err(&p, e))?;
            }
            w.flush().map_err(io_err(&p))?;
        }
        let p = dir.join(format!("{}_summary.csv", t.trial_id));
        let mut w = writer(&p)?;
        w.write_record(&data.summary_names).map_err(|e| csv_err(&p, e))?;
        w.write_record(t.summary.iter().map(|&v| fmt32(f64::from(v))))
            .map_err(|e| csv_err(&p, e))?;
        w.flush().map_err(io_err(&p))?;
    }
    Ok(())
}

/// Column names of each modality as they appear in a loaded dataset.
pub fn default_columns() -> [Vec<String>; 4] {
    Modality::ALL.map(|m| m.columns().into_iter().map(String::from).collect())
}

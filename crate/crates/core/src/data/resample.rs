//! Fixed-length resampling of timed channels.

use super::{is_categorical, DataError, Modality, RawSeries, Result, MIN_DURATION, SEQ_LEN};

/// Longest tolerated NaN run, as a fraction of the trial.
pub const MAX_NAN_FRACTION: f64 = 0.25;

fn check_times(t: &[f64], min: usize, op: &'static str) -> Result<()> {
    if t.is_empty() {
        return Err(DataError::Empty { op });
    }
    if t.len() < min {
        return Err(DataError::Invalid(format!("{op}: need at least {min} samples, got {}", t.len())));
    }
    if t.iter().any(|x| !x.is_finite()) || t.windows(2).any(|w| w[1] < w[0]) {
        return Err(DataError::Invalid(format!("{op}: timestamps must be finite and non-decreasing")));
    }
    Ok(())
}

/// Linear interpolation at `len` evenly spaced times over `[t_first, t_last]`.
pub fn resample_numeric(t: &[f64], v: &[f64], len: usize) -> Result<Vec<f64>> {
    check_times(t, 2, "resample_numeric")?;
    assert_eq!(t.len(), v.len(), "time and value lengths differ");
    let (t0, t1) = (t[0], t[t.len() - 1]);
    let mut out = Vec::with_capacity(len);
    let mut j = 0;
    for i in 0..len {
        let x = if len == 1 {
            t0
        } else {
            t0 + (t1 - t0) * i as f64 / (len - 1) as f64
        };
        while j + 2 < t.len() && t[j + 1] <= x {
            j += 1;
        }
        let (ta, tb) = (t[j], t[j + 1]);
        let y = if tb > ta {
            let w = ((x - ta) / (tb - ta)).clamp(0.0, 1.0);
            v[j] + (v[j + 1] - v[j]) * w
        } else {
            v[j + 1]
        };
        out.push(y);
    }
    Ok(out)
}

/// Nearest-sample selection. Each sample is taken to cover one sampling
/// period, so the output grid spans `n` periods starting at `t_first`; ties
/// go to the later sample.
pub fn resample_categorical(t: &[f64], v: &[f64], len: usize) -> Result<Vec<f64>> {
    check_times(t, 1, "resample_categorical")?;
    assert_eq!(t.len(), v.len(), "time and value lengths differ");
    let n = t.len();
    if n == 1 {
        return Ok(vec![v[0]; len]);
    }
    let span = (t[n - 1] - t[0]) * n as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(len);
    let mut j = 0;
    for i in 0..len {
        let x = t[0] + span * i as f64 / len as f64;
        while j + 1 < n && (t[j + 1] - x).abs() <= (x - t[j]).abs() {
            j += 1;
        }
        out.push(v[j]);
    }
    Ok(out)
}

/// Bridges NaN gaps: linear interpolation for numeric channels, previous
/// value (or next, at the start) for categorical ones. Fails when any run of
/// NaNs exceeds [`MAX_NAN_FRACTION`] of the samples.
pub fn fill_nan(t: &[f64], v: &[f64], categorical: bool) -> Result<Vec<f64>> {
    let n = v.len();
    let limit = (MAX_NAN_FRACTION * n as f64).floor() as usize;
    let mut out = v.to_vec();
    let mut i = 0;
    while i < n {
        if !v[i].is_nan() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && v[i].is_nan() {
            i += 1;
        }
        let run = i - start;
        if run > limit || run == n {
            return Err(DataError::Rejected(format!(
                "{run} consecutive missing samples out of {n}"
            )));
        }
        let before = start.checked_sub(1).map(|k| (t[k], v[k]));
        let after = (i < n).then(|| (t[i], v[i]));
        for k in start..i {
            out[k] = match (before, after) {
                (Some((ta, va)), Some((tb, vb))) if !categorical && tb > ta => {
                    va + (vb - va) * (t[k] - ta) / (tb - ta)
                }
                (Some((_, va)), _) => va,
                (None, Some((_, vb))) => vb,
                (None, None) => unreachable!("run == n handled above"),
            };
        }
    }
    Ok(out)
}

/// Resamples every column of a recording to `[SEQ_LEN, columns]`, row-major.
pub fn resample_modality(s: &RawSeries, m: Modality) -> Result<Vec<f32>> {
    if s.duration() < MIN_DURATION {
        return Err(DataError::Rejected(format!(
            "{m} recording lasts {:.3} s, shorter than {MIN_DURATION} s",
            s.duration()
        )));
    }
    let width = s.columns.len();
    let mut out = vec![0f32; SEQ_LEN * width];
    for (c, (name, v)) in s.columns.iter().zip(&s.data).enumerate() {
        let cat = is_categorical(name);
        let v = fill_nan(&s.t, v, cat).map_err(|e| match e {
            DataError::Rejected(msg) => DataError::Rejected(format!("{m}.{name}: {msg}")),
            other => other,
        })?;
        let r = if cat {
            resample_categorical(&s.t, &v, SEQ_LEN)?
        } else {
            resample_numeric(&s.t, &v, SEQ_LEN)?
        };
        for (i, x) in r.into_iter().enumerate() {
            out[i * width + c] = x as f32;
        }
    }
    Ok(out)
}

//! Trial-level summary features computed from the raw (native-rate) signals.

use super::{DataError, Modality, RawSeries, Result, TrialRecord};

pub const AUS: [&str; 8] = ["AU01", "AU02", "AU04", "AU06", "AU07", "AU12", "AU15", "AU25"];

/// Phasic rise a peak must clear above its preceding trough.
pub const SCR_THRESHOLD: f64 = 0.01;
/// Minimum spacing between accepted peaks, in seconds.
pub const SCR_MIN_SEPARATION: f64 = 1.0;

const STATS5: [&str; 5] = ["mean", "median", "min", "max", "std"];

/// Ordered feature names, each prefixed with the modality it derives from.
pub fn summary_names() -> Vec<String> {
    let mut v: Vec<String> = ["mean", "std", "min", "max"]
        .iter()
        .map(|s| format!("pupil.size_{s}"))
        .collect();
    v.push("eye.fixation_count".into());
    v.push("eye.blink_rate".into());
    for au in AUS {
        for s in ["mean", "std", "min", "max"] {
            v.push(format!("au.{au}_{s}"));
        }
    }
    for au in AUS {
        v.push(format!("au.{au}_rate"));
    }
    v.push("au.smile_rate".into());
    v.push("au.frown_rate".into());
    v.push("gsr.scr_count".into());
    for group in ["amplitude", "onset", "rise", "recovery"] {
        for s in STATS5 {
            v.push(format!("gsr.scr_{group}_{s}"));
        }
    }
    for s in ["phasic_mean", "phasic_std", "tonic_mean", "tonic_std"] {
        v.push(format!("gsr.{s}"));
    }
    v
}

/// Modality a summary feature belongs to, from its name prefix.
pub fn feature_modality(name: &str) -> Option<Modality> {
    name.split('.').next().and_then(|p| p.parse().ok())
}

/// Mean, population std, min and max of the finite values.
fn basic(v: &[f64]) -> [f64; 4] {
    let xs: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.is_empty() {
        return [0.0; 4];
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var.sqrt(), min, max]
}

/// Mean, median, min, max, std; all zero for an empty set.
fn stats5(v: &[f64]) -> [f64; 5] {
    if v.is_empty() {
        return [0.0; 5];
    }
    let [mean, std, min, max] = basic(v);
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    [mean, median, min, max, std]
}

/// Number of 0 -> 1 transitions, counting a leading 1.
fn onsets(v: &[f64]) -> usize {
    let mut prev = false;
    let mut n = 0;
    for &x in v {
        let on = x >= 0.5;
        if on && !prev {
            n += 1;
        }
        prev = on;
    }
    n
}

fn rate(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&x| x >= 0.5).count() as f64 / v.len() as f64
    }
}

/// One skin conductance response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scr {
    pub onset: f64,
    pub peak: f64,
    pub amplitude: f64,
    /// Time from peak until the signal falls to half the amplitude (or the
    /// end of the recording).
    pub recovery: f64,
}

impl Scr {
    pub fn rise(&self) -> f64 {
        self.peak - self.onset
    }
}

/// Local maxima of the phasic signal whose rise above the preceding trough
/// reaches [`SCR_THRESHOLD`]; kept greedily by amplitude with at least
/// [`SCR_MIN_SEPARATION`] seconds between peaks. Returned in time order.
pub fn detect_scr(t: &[f64], x: &[f64]) -> Vec<Scr> {
    let n = x.len().min(t.len());
    let mut cands = Vec::new();
    for i in 1..n {
        let rising = x[i] > x[i - 1];
        let top = i + 1 == n || x[i] >= x[i + 1];
        if !(rising && top) {
            continue;
        }
        let mut j = i;
        while j > 0 && x[j - 1] < x[j] {
            j -= 1;
        }
        let amplitude = x[i] - x[j];
        if amplitude < SCR_THRESHOLD {
            continue;
        }
        let half = x[i] - amplitude / 2.0;
        let end = (i + 1..n).find(|&k| x[k] <= half).unwrap_or(n - 1);
        cands.push(Scr {
            onset: t[j] - t[0],
            peak: t[i] - t[0],
            amplitude,
            recovery: t[end] - t[i],
        });
    }
    cands.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude).then(a.peak.total_cmp(&b.peak)));
    let mut kept: Vec<Scr> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| (k.peak - c.peak).abs() >= SCR_MIN_SEPARATION) {
            kept.push(c);
        }
    }
    kept.sort_by(|a, b| a.peak.total_cmp(&b.peak));
    kept
}

fn col<'a>(s: &'a RawSeries, m: Modality, name: &str) -> Result<&'a [f64]> {
    let v = s
        .column(name)
        .ok_or_else(|| DataError::Invalid(format!("{m}: missing column `{name}`")))?;
    if v.is_empty() {
        return Err(DataError::Empty { op: "compute_trial_summary" });
    }
    Ok(v)
}

/// Fixed-order feature vector matching [`summary_names`].
pub fn compute_summary(rec: &TrialRecord) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(73);

    let pupil = rec.signal(Modality::Pupil);
    out.extend(basic(col(pupil, Modality::Pupil, "pupil_avg")?));

    let eye = rec.signal(Modality::Eye);
    out.push(onsets(col(eye, Modality::Eye, "fixation")?) as f64);
    let blinks = onsets(col(eye, Modality::Eye, "blink")?) as f64;
    let dur = eye.duration();
    out.push(if dur > 0.0 { blinks / dur } else { 0.0 });

    let au = rec.signal(Modality::Au);
    for a in AUS {
        out.extend(basic(col(au, Modality::Au, &format!("{a}_r"))?));
    }
    let mut active = Vec::with_capacity(AUS.len());
    for a in AUS {
        let c = col(au, Modality::Au, &format!("{a}_c"))?;
        out.push(rate(c));
        active.push(c);
    }
    let both = |x: &[f64], y: &[f64]| -> f64 {
        let n = x.len().min(y.len());
        if n == 0 {
            return 0.0;
        }
        (0..n).filter(|&i| x[i] >= 0.5 && y[i] >= 0.5).count() as f64 / n as f64
    };
    // AU06 + AU12 smile, AU04 + AU15 frown
    out.push(both(active[3], active[5]));
    out.push(both(active[2], active[6]));

    let gsr = rec.signal(Modality::Gsr);
    let phasic = col(gsr, Modality::Gsr, "phasic")?;
    let scrs = detect_scr(&gsr.t, phasic);
    out.push(scrs.len() as f64);
    let amp: Vec<f64> = scrs.iter().map(|s| s.amplitude).collect();
    let onset: Vec<f64> = scrs.iter().map(|s| s.onset).collect();
    let rise: Vec<f64> = scrs.iter().map(Scr::rise).collect();
    let rec_t: Vec<f64> = scrs.iter().map(|s| s.recovery).collect();
    for v in [&amp, &onset, &rise, &rec_t] {
        out.extend(stats5(v));
    }
    let [pm, ps, _, _] = basic(phasic);
    let [tm, ts, _, _] = basic(col(gsr, Modality::Gsr, "tonic")?);
    out.extend([pm, ps, tm, ts]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_tagged() {
        let n = summary_names();
        assert_eq!(n.len(), 73);
        let set: std::collections::HashSet<_> = n.iter().collect();
        assert_eq!(set.len(), n.len());
        assert!(n.iter().all(|x| feature_modality(x).is_some()));
    }

    #[test]
    fn constant_stats() {
        assert_eq!(basic(&[3.0; 10]), [3.0, 0.0, 3.0, 3.0]);
        assert_eq!(stats5(&[]), [0.0; 5]);
        assert_eq!(stats5(&[1.0, 5.0, 2.0, 4.0])[1], 3.0);
    }

    fn bump(t: f64, at: f64, amp: f64) -> f64 {
        let d = t - at;
        if d < 0.0 {
            0.0
        } else if d < 1.0 {
            amp * d
        } else {
            amp * (-(d - 1.0) / 0.3).exp()
        }
    }

    #[test]
    fn injected_peaks_are_recovered() {
        let t: Vec<f64> = (0..400).map(|i| i as f64 / 50.0).collect();
        let x: Vec<f64> = t
            .iter()
            .map(|&s| bump(s, 0.5, 0.5) + bump(s, 3.0, 0.5) + bump(s, 5.5, 0.5))
            .collect();
        let scrs = detect_scr(&t, &x);
        assert_eq!(scrs.len(), 3);
        let mean = scrs.iter().map(|s| s.amplitude).sum::<f64>() / 3.0;
        assert!((mean - 0.5).abs() < 0.05, "{scrs:?}");
        assert!((scrs[0].rise() - 1.0).abs() < 0.05, "{scrs:?}");
        assert!((scrs[0].onset - 0.5).abs() < 0.05);
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        let t: Vec<f64> = (0..100).map(|i| i as f64 / 50.0).collect();
        assert!(detect_scr(&t, &[0.2; 100]).is_empty());
        let tiny: Vec<f64> = t.iter().map(|s| 0.001 * (s * 9.0).sin()).collect();
        assert!(detect_scr(&t, &tiny).is_empty());
    }

    #[test]
    fn nearby_peaks_keep_the_larger() {
        let t: Vec<f64> = (0..300).map(|i| i as f64 / 50.0).collect();
        let x: Vec<f64> = t.iter().map(|&s| bump(s, 1.0, 0.3) + bump(s, 1.6, 0.1)).collect();
        let scrs = detect_scr(&t, &x);
        assert_eq!(scrs.len(), 1);
    }
}

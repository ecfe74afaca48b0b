//! Synthetic trials with planted structure.
//!
//! * every user has a fixed personality vector, and per-user baseline offsets
//!   on all channels are a fixed linear map of it;
//! * phasic SCR amplitude grows with the arousal class;
//! * pupil size and gaze dispersion grow with the valence class;
//! * the stimulus cue matches the felt class with probability `context_rate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Modality, RawSeries, TrialRecord, FLAGS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub trials_per_user: usize,
    pub seed: u64,
    /// Probability that the stimulus cue equals the felt class.
    pub context_rate: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, trials_per_user: usize, seed: u64) -> Self {
        Self {
            n_users,
            trials_per_user,
            seed,
            context_rate: 0.7,
        }
    }
}

/// Time at which the scenario prime ends and the video starts.
const VIDEO_ONSET: f64 = 1.0;

/// Base SCR amplitude and increment per arousal class.
pub const SCR_BASE: f64 = 0.15;
pub const SCR_STEP: f64 = 0.3;
const SCR_NOISE: f64 = 0.05;

/// Pupil size increment per valence class, and trial-level noise.
pub const PUPIL_STEP: f64 = 0.35;
const PUPIL_NOISE: f64 = 0.15;

const N_OFFSETS: usize = 16;

/// Fixed personality -> baseline map, identical for every seed.
fn offset_matrix() -> [[f64; 5]; N_OFFSETS] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d75_6d74);
    let mut m = [[0.0; 5]; N_OFFSETS];
    for row in &mut m {
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    // keep each trait visible in at least one dedicated channel
    for (k, row) in m.iter_mut().take(5).enumerate() {
        row[k] += 2.0;
    }
    m
}

/// Per-user baseline offsets, roughly in [-1, 1].
fn user_offsets(p: &[f64; 5]) -> [f64; N_OFFSETS] {
    let m = offset_matrix();
    let mut out = [0.0; N_OFFSETS];
    for (o, row) in out.iter_mut().zip(&m) {
        let s: f64 = row.iter().zip(p).map(|(w, x)| w * (x - 0.5)).sum();
        *o = s / 1.5;
    }
    out
}

struct User {
    id: String,
    personality: [f64; 5],
    off: [f64; N_OFFSETS],
}

fn flags_at(t: f64, first_fix: bool) -> [f64; 3] {
    let video = t >= VIDEO_ONSET;
    [f64::from(u8::from(first_fix)), f64::from(u8::from(!video)), f64::from(u8::from(video))]
}

fn grid(duration: f64, rate: f64) -> Vec<f64> {
    let n = (duration * rate).floor() as usize + 1;
    (0..n).map(|i| i as f64 / rate).collect()
}

fn series(m: Modality, t: Vec<f64>, data: Vec<Vec<f64>>) -> RawSeries {
    debug_assert_eq!(data.len(), m.width());
    RawSeries {
        t,
        columns: m.columns().into_iter().map(String::from).collect(),
        data,
    }
}

/// Intervals `(start, end, is_fixation)` covering `[0, duration]`.
fn eye_events(rng: &mut ChaCha8Rng, duration: f64, fix_scale: f64) -> Vec<(f64, f64, bool)> {
    let mut ev = Vec::new();
    let mut t = 0.0;
    let mut fix = true;
    while t < duration {
        let len = if fix {
            rng.random_range(0.15..0.40) * fix_scale
        } else {
            rng.random_range(0.03..0.06)
        };
        ev.push((t, (t + len).min(duration + 1e-9), fix));
        t += len;
        fix = !fix;
    }
    ev
}

struct TrialPlan {
    valence: usize,
    duration: f64,
    pupil_base: f64,
    dispersion: f64,
    scr_amp: f64,
    scr_onsets: Vec<f64>,
}

fn eye_signal(rng: &mut ChaCha8Rng, u: &User, plan: &TrialPlan) -> (RawSeries, Vec<(f64, f64)>, f64) {
    let t = grid(plan.duration, Modality::Eye.rate_hz());
    let events = eye_events(rng, plan.duration, 1.0 + 0.25 * u.off[5]);
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let center = (0.5 + 0.08 * u.off[6], 0.5 + 0.08 * u.off[7]);
    let points: Vec<(f64, f64)> = events
        .iter()
        .map(|_| {
            (
                center.0 + plan.dispersion * n01.sample(rng),
                center.1 + plan.dispersion * n01.sample(rng),
            )
        })
        .collect();
    let blink_rate = (0.35 + 0.2 * u.off[8]).max(0.05);
    let mut blinks = Vec::new();
    let mut bt = rng.random_range(0.0..1.0) / blink_rate;
    while bt < plan.duration {
        blinks.push((bt, bt + 0.15));
        bt += 0.15 + rng.random_range(0.5..1.5) / blink_rate;
    }
    let first_fix = events
        .iter()
        .find(|e| e.2 && e.1 > VIDEO_ONSET)
        .map(|e| (e.0.max(VIDEO_ONSET), e.1))
        .unwrap_or((f64::INFINITY, f64::INFINITY));

    let mut cols = vec![Vec::with_capacity(t.len()); Modality::Eye.width()];
    let mut k = 0;
    for &s in &t {
        while k + 1 < events.len() && events[k].1 <= s {
            k += 1;
        }
        let (a, b, fix) = events[k];
        let (gx, gy, vel) = if fix {
            (points[k].0, points[k].1, 0.0)
        } else {
            let prev = points[k.saturating_sub(1)];
            let next = points[(k + 1).min(points.len() - 1)];
            let w = ((s - a) / (b - a)).clamp(0.0, 1.0);
            let d = ((next.0 - prev.0).powi(2) + (next.1 - prev.1).powi(2)).sqrt();
            (prev.0 + (next.0 - prev.0) * w, prev.1 + (next.1 - prev.1) * w, d / (b - a))
        };
        let blink = blinks.iter().any(|&(x, y)| s >= x && s < y);
        let vals = [
            gx + 0.003 * n01.sample(rng),
            gy + 0.003 * n01.sample(rng),
            f64::from(u8::from(fix)),
            if fix { s - a } else { 0.0 },
            vel * (1.0 + 0.05 * n01.sample(rng)).abs() + 0.01 * n01.sample(rng).abs(),
            f64::from(u8::from(blink)),
        ];
        let fl = flags_at(s, s >= first_fix.0 && s < first_fix.1);
        for (c, v) in vals.iter().chain(&fl).enumerate() {
            cols[c].push(*v);
        }
    }
    (series(Modality::Eye, t, cols), blinks, blink_rate)
}

fn pupil_signal(rng: &mut ChaCha8Rng, plan: &TrialPlan, blinks: &[(f64, f64)], first_fix: (f64, f64)) -> RawSeries {
    let t = grid(plan.duration, Modality::Pupil.rate_hz());
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut cols = vec![Vec::with_capacity(t.len()); Modality::Pupil.width()];
    for &s in &t {
        let drift = 0.05 * (std::f64::consts::TAU * s / plan.duration + phase).sin();
        let blink = blinks.iter().any(|&(x, y)| s >= x && s < y);
        let dip = if blink { -0.2 } else { 0.0 };
        let l = plan.pupil_base + 0.05 + drift + dip + 0.02 * n01.sample(rng);
        let r = plan.pupil_base - 0.05 + drift + dip + 0.02 * n01.sample(rng);
        let fl = flags_at(s, s >= first_fix.0 && s < first_fix.1);
        for (c, v) in [l, r, 0.5 * (l + r)].iter().chain(&fl).enumerate() {
            cols[c].push(*v);
        }
    }
    series(Modality::Pupil, t, cols)
}

fn au_signal(rng: &mut ChaCha8Rng, u: &User, plan: &TrialPlan, first_fix: (f64, f64)) -> RawSeries {
    let t = grid(plan.duration, Modality::Au.rate_hz());
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let vs = plan.valence as f64 - 1.0;
    // AU01 AU02 AU04 AU06 AU07 AU12 AU15 AU25
    let mut base = [0.0; 8];
    for (i, b) in base.iter_mut().enumerate() {
        *b = 0.8 + 0.4 * u.off[9 + (i % 5)];
    }
    base[3] += 0.15 * vs;
    base[5] += 0.2 * vs;
    base[2] -= 0.15 * vs;
    base[6] -= 0.1 * vs;
    let phases: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let conf_base = 0.9 + 0.03 * u.off[14];
    let mut cols = vec![Vec::with_capacity(t.len()); Modality::Au.width()];
    for &s in &t {
        let mut r = [0.0; 8];
        for i in 0..8 {
            let wave = 0.3 * (1.3 * s + phases[i]).sin();
            r[i] = (base[i] + wave + 0.08 * n01.sample(rng)).max(0.0);
        }
        let c = r.map(|x| f64::from(u8::from(x > 1.0)));
        let conf = (conf_base + 0.01 * n01.sample(rng)).clamp(0.0, 1.0);
        let fl = flags_at(s, s >= first_fix.0 && s < first_fix.1);
        for (k, v) in r.iter().chain(&c).chain(std::iter::once(&conf)).chain(&fl).enumerate() {
            cols[k].push(*v);
        }
    }
    series(Modality::Au, t, cols)
}

/// Rise over `RISE` seconds, then exponential recovery.
fn scr_shape(d: f64) -> f64 {
    const RISE: f64 = 0.8;
    const DECAY: f64 = 2.0;
    if d <= 0.0 {
        0.0
    } else if d < RISE {
        0.5 * (1.0 - (std::f64::consts::PI * d / RISE).cos())
    } else {
        (-(d - RISE) / DECAY).exp()
    }
}

fn gsr_signal(rng: &mut ChaCha8Rng, u: &User, plan: &TrialPlan, first_fix: (f64, f64)) -> RawSeries {
    let t = grid(plan.duration, Modality::Gsr.rate_hz());
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let tonic0 = 4.0 + 1.5 * u.off[15];
    let slope = 0.03 * n01.sample(rng);
    let amps: Vec<f64> = plan
        .scr_onsets
        .iter()
        .map(|_| plan.scr_amp * rng.random_range(0.9..1.1))
        .collect();
    let mut cols = vec![Vec::with_capacity(t.len()); Modality::Gsr.width()];
    for &s in &t {
        let tonic = tonic0 + slope * s + 0.002 * n01.sample(rng);
        let phasic: f64 = plan
            .scr_onsets
            .iter()
            .zip(&amps)
            .map(|(&o, &a)| a * scr_shape(s - o))
            .sum::<f64>()
            + 0.002 * n01.sample(rng);
        let cal = tonic + phasic;
        let raw = 1000.0 / cal.max(0.1);
        let fl = flags_at(s, s >= first_fix.0 && s < first_fix.1);
        for (c, v) in [raw, cal, phasic, tonic].iter().chain(&fl).enumerate() {
            cols[c].push(*v);
        }
    }
    series(Modality::Gsr, t, cols)
}

fn other_class(rng: &mut ChaCha8Rng, c: usize) -> usize {
    let k = rng.random_range(0..2);
    if k >= c {
        k + 1
    } else {
        k
    }
}

fn rating_in(rng: &mut ChaCha8Rng, class: usize) -> u8 {
    (3 * class + 1 + rng.random_range(0..3)) as u8
}

/// Generates every trial in memory. Pure function of the config.
pub fn generate(cfg: &SynthConfig) -> Vec<TrialRecord> {
    let mut out = Vec::with_capacity(cfg.n_users * cfg.trials_per_user);
    let uw = cfg.n_users.saturating_sub(1).max(1).to_string().len().max(2);
    let tw = cfg.trials_per_user.saturating_sub(1).max(1).to_string().len().max(3);
    let n01 = Normal::new(0.0, 1.0).unwrap();
    for ui in 0..cfg.n_users {
        let mut urng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ui as u64 + 1)));
        let personality: [f64; 5] = std::array::from_fn(|_| urng.random_range(0.05..0.95));
        let user = User {
            id: format!("u{ui:0uw$}"),
            personality,
            off: user_offsets(&personality),
        };
        for ti in 0..cfg.trials_per_user {
            let rng = &mut urng;
            let valence = rng.random_range(0..3);
            let arousal = rng.random_range(0..3);
            let duration: f64 = rng.random_range(4.0..6.0);
            let fit = ((duration - 1.2) / 1.6).floor().max(1.0) as usize;
            let n_scr = rng.random_range(1..=3usize).min(fit);
            // onsets at least 1.6 s apart, each leaving room for the rise
            let mut scr_onsets: Vec<f64> = Vec::with_capacity(n_scr);
            let span = duration - 1.2;
            let slot = span / n_scr as f64;
            for k in 0..n_scr {
                let lo = 0.2 + k as f64 * slot;
                let hi = (lo + slot - 1.6).max(lo + 1e-3);
                scr_onsets.push(rng.random_range(lo..hi));
            }
            let plan = TrialPlan {
                valence,
                duration,
                pupil_base: 3.5 + 0.15 * user.off[4] + PUPIL_STEP * valence as f64 + PUPIL_NOISE * n01.sample(rng),
                dispersion: (0.04 + 0.025 * valence as f64 + 0.01 * n01.sample(rng)).max(0.005),
                scr_amp: (SCR_BASE + SCR_STEP * arousal as f64 + SCR_NOISE * n01.sample(rng)).max(0.03),
                scr_onsets,
            };
            let (eye, blinks, _) = eye_signal(rng, &user, &plan);
            let ff = first_fix_window(&eye);
            let pupil = pupil_signal(rng, &plan, &blinks, ff);
            let au = au_signal(rng, &user, &plan, ff);
            let gsr = gsr_signal(rng, &user, &plan, ff);

            let sv = if rng.random_bool(cfg.context_rate) {
                valence
            } else {
                other_class(rng, valence)
            };
            let sa = if rng.random_bool(cfg.context_rate) {
                arousal
            } else {
                other_class(rng, arousal)
            };
            out.push(TrialRecord {
                trial_id: format!("{}_t{ti:0tw$}", user.id),
                user_id: user.id.clone(),
                signals: [eye, pupil, au, gsr],
                stim_emo: [(sv as f64 + 0.5) / 3.0, (sa as f64 + 0.5) / 3.0],
                felt_valence: rating_in(rng, valence),
                felt_arousal: rating_in(rng, arousal),
                personality: user.personality,
            });
        }
    }
    out
}

fn first_fix_window(eye: &RawSeries) -> (f64, f64) {
    let ff = eye.column(FLAGS[0]).expect("eye has flags");
    let on: Vec<f64> = eye.t.iter().zip(ff).filter(|(_, &f)| f > 0.5).map(|(t, _)| *t).collect();
    match (on.first(), on.last()) {
        (Some(&a), Some(&b)) => (a, b + 1e-9),
        _ => (f64::INFINITY, f64::INFINITY),
    }
}

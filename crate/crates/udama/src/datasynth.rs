//! Synthetic silver/gold cohorts and the raw-stream preprocessing pipeline.
//!
//! Cohort generation draws a latent fitness per participant, synthesizes a
//! per-minute heart-rate/acceleration stream whose activity statistics
//! correlate with that fitness (more moderate-to-vigorous activity, lower
//! resting heart rate, flatter heart-rate response), preprocesses the
//! stream into a fixed-shape feature window, and labels it: source
//! participants get a noisy (silver) label, target participants the exact
//! (gold) one.
//!
//! Per-epoch feature order (`F = 26`), computed over wear minutes only:
//!
//! | idx | feature            | idx | feature            |
//! |-----|--------------------|-----|--------------------|
//! | 0   | hr mean            | 13  | hr min             |
//! | 1   | hr max             | 14  | hr std             |
//! | 2   | accel mean         | 15  | accel min          |
//! | 3   | accel max          | 16  | accel std          |
//! | 4   | met mean           | 17  | met max            |
//! | 5-8 | intensity one-hot  | 18  | met std            |
//! | 9   | sin minute-of-day  | 19-22 | minute fraction per class |
//! | 10  | cos minute-of-day  | 23  | wear fraction      |
//! | 11  | sin day-of-week    | 24  | hr range           |
//! | 12  | cos day-of-week    | 25  | met load           |
//!
//! The one-hot at 5-8 classifies the epoch's mean intensity; 19-22 are the
//! per-minute class fractions. Cyclical features use the epoch's first
//! minute. Dropped or padded epochs are all-zero rows; `mask_len` records
//! how many leading rows are real.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, RejectReason, Result};

/// Joules per minute per kilogram in one metabolic equivalent.
pub const MET_J_MIN_KG: f64 = 71.0;

/// Time-series features per epoch.
pub const N_FEATURES: usize = 26;

/// Metadata features per participant: age, sex, BMI, reported resting HR.
pub const N_METADATA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One participant's preprocessed window: a `t × f` feature matrix (row
/// major), static metadata, the regression label `y`, the binary domain
/// label `y_c` (0 = source, 1 = target) and the fine-grained distribution
/// label `y_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow {
    pub id: String,
    pub domain: Domain,
    pub y: f64,
    pub y_c: u8,
    pub y_d: f64,
    pub metadata: Vec<f64>,
    pub x: Vec<f64>,
    pub t: usize,
    pub f: usize,
    /// Leading rows of `x` that hold real (non-padded) epochs.
    pub mask_len: usize,
}

impl SensorWindow {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * self.f..(t + 1) * self.f]
    }
}

/// A named set of windows sharing a domain role.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub domain: Domain,
    pub windows: Vec<SensorWindow>,
}

impl Cohort {
    pub fn labels(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.y).collect()
    }

    /// Mean and population standard deviation of the labels.
    pub fn label_stats(&self) -> (f64, f64) {
        mean_std(&self.labels())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shape of the distribution shift between the two synthetic cohorts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    pub n_source: usize,
    pub n_target: usize,
    pub source_label_mean: f64,
    pub source_label_std: f64,
    pub target_label_mean: f64,
    pub target_label_std: f64,
    /// Standard deviation of the silver-standard label noise.
    pub silver_noise_std: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            n_source: 2000,
            n_target: 200,
            source_label_mean: 45.0,
            source_label_std: 8.0,
            target_label_mean: 33.0,
            target_label_std: 7.0,
            silver_noise_std: 4.0,
            seed: 42,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::config("cohort sizes must be >= 1"));
        }
        if self.n_source < self.n_target {
            return Err(Error::config(format!(
                "n_source ({}) must be >= n_target ({})",
                self.n_source, self.n_target
            )));
        }
        if !(self.source_label_std > 0.0) || !(self.target_label_std > 0.0) {
            return Err(Error::config("label stds must be > 0"));
        }
        if !(self.silver_noise_std >= 0.0) {
            return Err(Error::config("silver_noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Heart-rate noise-filtering hook applied before epoching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HrFilter {
    None,
    /// Centered running median; window is clamped at the edges.
    Median { window: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub epoch_minutes: usize,
    pub window_epochs: usize,
    pub min_wear_hours: f64,
    /// Zero-acceleration runs strictly longer than this are non-wear.
    pub nonwear_run_minutes: usize,
    /// Epochs with a smaller worn fraction are dropped.
    pub epoch_wear_fraction: f64,
    pub hr_filter: HrFilter,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            epoch_minutes: 15,
            window_epochs: 600,
            min_wear_hours: 72.0,
            nonwear_run_minutes: 90,
            epoch_wear_fraction: 0.5,
            hr_filter: HrFilter::Median { window: 5 },
        }
    }
}

/// Knobs of the stream synthesizer that are not part of the shift itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub stream_hours: f64,
    pub preprocess: PreprocessConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { stream_hours: 168.0, preprocess: PreprocessConfig::default() }
    }
}

/// A per-minute sensor stream. Timestamps are implicit: minute `i` occurred
/// at absolute minute `start_minute + i`, which makes the strictly
/// increasing, uniformly spaced timestamp invariant structural.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    pub start_minute: u64,
    pub hr: Vec<f64>,
    pub accel: Vec<f64>,
    pub wear: Vec<bool>,
}

impl RawStream {
    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn minute_at(&self, i: usize) -> u64 {
        self.start_minute + i as u64
    }
}

// ── Small primitives ─────────────────────────────────────────────────

/// (sin, cos) pairs of the daily and weekly phase.
pub fn cyclical_time_features(minute_of_day: u32, day_of_week: u32) -> Result<[f64; 4]> {
    if minute_of_day > 1439 {
        return Err(Error::contract(format!("minute_of_day {minute_of_day} outside [0,1439]")));
    }
    if day_of_week > 6 {
        return Err(Error::contract(format!("day_of_week {day_of_week} outside [0,6]")));
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let md = two_pi * minute_of_day as f64 / 1440.0;
    let dw = two_pi * day_of_week as f64 / 7.0;
    Ok([md.sin(), md.cos(), dw.sin(), dw.cos()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityClass {
    Sedentary,
    Light,
    Mvpa,
    Vpa,
}

impl IntensityClass {
    pub fn index(self) -> usize {
        match self {
            IntensityClass::Sedentary => 0,
            IntensityClass::Light => 1,
            IntensityClass::Mvpa => 2,
            IntensityClass::Vpa => 3,
        }
    }
}

/// Converts a movement intensity in J/min/kg to METs and an intensity
/// class: < 1.5 sedentary, [1.5, 3) light, [3, 6] moderate-to-vigorous,
/// > 6 vigorous.
pub fn met_convert(intensity_j_min_kg: f64) -> Result<(f64, IntensityClass)> {
    if !(intensity_j_min_kg >= 0.0) {
        return Err(Error::contract(format!(
            "intensity must be >= 0 J/min/kg, got {intensity_j_min_kg}"
        )));
    }
    let mets = intensity_j_min_kg / MET_J_MIN_KG;
    let class = if mets < 1.5 {
        IntensityClass::Sedentary
    } else if mets < 3.0 {
        IntensityClass::Light
    } else if mets <= 6.0 {
        IntensityClass::Mvpa
    } else {
        IntensityClass::Vpa
    };
    Ok((mets, class))
}

fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let half = window / 2;
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    let mut buf: Vec<f64> = Vec::with_capacity(window);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        buf.clear();
        buf.extend_from_slice(&values[lo..hi]);
        buf.sort_by(|a, b| a.partial_cmp(b).expect("finite hr"));
        out.push(buf[buf.len() / 2]);
    }
    out
}

// ── Preprocessing ────────────────────────────────────────────────────

/// Runs the full raw-stream pipeline: non-wear detection, the minimum-wear
/// gate, epoch averaging over wear minutes, and windowing with zero padding.
/// Labels and metadata on the returned window are left at placeholder
/// values for the caller to fill.
pub fn preprocess_stream(raw: &RawStream, cfg: &PreprocessConfig) -> Result<SensorWindow> {
    let n = raw.hr.len();
    if n == 0 || raw.accel.len() != n || raw.wear.len() != n {
        return Err(Error::contract(format!(
            "malformed stream: hr {} / accel {} / wear {} minutes",
            raw.hr.len(),
            raw.accel.len(),
            raw.wear.len()
        )));
    }
    for i in 0..n {
        if !raw.hr[i].is_finite() || !raw.accel[i].is_finite() || raw.accel[i] < 0.0 {
            return Err(Error::contract(format!("malformed stream sample at minute {i}")));
        }
    }

    let hr = match cfg.hr_filter {
        HrFilter::None => raw.hr.clone(),
        HrFilter::Median { window } => median_filter(&raw.hr, window),
    };

    // zero-acceleration runs strictly longer than the threshold are non-wear
    let mut wear: Vec<bool> = raw.wear.clone();
    let mut run_start = None;
    for i in 0..=n {
        let zero = i < n && raw.accel[i] == 0.0;
        match (zero, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s > cfg.nonwear_run_minutes {
                    wear[s..i].iter_mut().for_each(|w| *w = false);
                }
                run_start = None;
            }
            _ => {}
        }
    }

    let wear_minutes = wear.iter().filter(|&&w| w).count();
    let required_hours = cfg.min_wear_hours;
    let wear_hours = wear_minutes as f64 / 60.0;
    if wear_hours < required_hours {
        return Err(Error::Rejected(RejectReason::InsufficientWear { wear_hours, required_hours }));
    }

    let ep = cfg.epoch_minutes;
    if ep == 0 || cfg.window_epochs == 0 {
        return Err(Error::config("epoch_minutes and window_epochs must be >= 1"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for e in 0..(n / ep) {
        let lo = e * ep;
        let hi = lo + ep;
        let worn: Vec<usize> = (lo..hi).filter(|&i| wear[i]).collect();
        if worn.is_empty() || (worn.len() as f64) < cfg.epoch_wear_fraction * ep as f64 {
            continue;
        }
        rows.push(epoch_features(&hr, &raw.accel, &worn, raw.minute_at(lo), ep)?);
        if rows.len() == cfg.window_epochs {
            break;
        }
    }

    let mask_len = rows.len().min(cfg.window_epochs);
    let mut x = Vec::with_capacity(cfg.window_epochs * N_FEATURES);
    for row in rows.iter().take(mask_len) {
        x.extend_from_slice(row);
    }
    x.resize(cfg.window_epochs * N_FEATURES, 0.0);

    Ok(SensorWindow {
        id: String::new(),
        domain: Domain::Source,
        y: 1.0,
        y_c: 0,
        y_d: 0.0,
        metadata: Vec::new(),
        x,
        t: cfg.window_epochs,
        f: N_FEATURES,
        mask_len,
    })
}

fn epoch_features(
    hr: &[f64],
    accel: &[f64],
    worn: &[usize],
    start_minute: u64,
    epoch_minutes: usize,
) -> Result<Vec<f64>> {
    let hrs: Vec<f64> = worn.iter().map(|&i| hr[i]).collect();
    let accels: Vec<f64> = worn.iter().map(|&i| accel[i]).collect();
    let (hr_mean, hr_std) = mean_std(&hrs);
    let (accel_mean, accel_std) = mean_std(&accels);
    let fold_min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let fold_max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let (met_mean, mean_class) = met_convert(accel_mean)?;
    let (met_max, _) = met_convert(fold_max(&accels))?;
    let met_std = accel_std / MET_J_MIN_KG;

    let mut class_fracs = [0.0f64; 4];
    let mut met_load = 0.0;
    for &a in &accels {
        let (m, c) = met_convert(a)?;
        class_fracs[c.index()] += 1.0;
        met_load += m;
    }
    class_fracs.iter_mut().for_each(|f| *f /= worn.len() as f64);
    met_load /= epoch_minutes as f64;

    let mut one_hot = [0.0f64; 4];
    one_hot[mean_class.index()] = 1.0;

    let cyc = cyclical_time_features((start_minute % 1440) as u32, ((start_minute / 1440) % 7) as u32)?;

    let mut row = Vec::with_capacity(N_FEATURES);
    row.extend_from_slice(&[hr_mean, fold_max(&hrs), accel_mean, fold_max(&accels), met_mean]);
    row.extend_from_slice(&one_hot);
    row.extend_from_slice(&cyc);
    row.extend_from_slice(&[
        fold_min(&hrs),
        hr_std,
        fold_min(&accels),
        accel_std,
        met_max,
        met_std,
    ]);
    row.extend_from_slice(&class_fracs);
    row.push(worn.len() as f64 / epoch_minutes as f64);
    row.push(fold_max(&hrs) - fold_min(&hrs));
    row.push(met_load);
    debug_assert_eq!(row.len(), N_FEATURES);
    Ok(row)
}

// ── Cohort generation ────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-participant seed, so generation is deterministic and
/// independent of scheduling.
fn participant_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    let stream = match domain {
        Domain::Source => 0x5eed_0001,
        Domain::Target => 0x5eed_0002,
    };
    splitmix64(seed ^ splitmix64(stream ^ splitmix64(index as u64)))
}

fn draw_label(rng: &mut ChaCha8Rng, spec: &ShiftSpec, domain: Domain) -> (f64, f64) {
    let (mean, std) = match domain {
        Domain::Source => (spec.source_label_mean, spec.source_label_std),
        Domain::Target => (spec.target_label_mean, spec.target_label_std),
    };
    let dist = Normal::new(mean, std).expect("validated std");
    let fitness = loop {
        let v = dist.sample(rng);
        if v > 5.0 {
            break v;
        }
    };
    let y = match domain {
        Domain::Target => fitness,
        Domain::Source => {
            let noise = Normal::new(0.0, spec.silver_noise_std).expect("validated std");
            loop {
                let y = fitness + noise.sample(rng);
                if y > 0.0 {
                    break y;
                }
            }
        }
    };
    (fitness, y)
}

/// The (latent fitness, label) pairs the generator would assign to the
/// first `n` participants of a domain. Shares the per-participant RNG
/// streams with [`generate_cohorts`], so these are exactly the cohort
/// labels.
pub fn sample_labels(spec: &ShiftSpec, domain: Domain, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(participant_seed(spec.seed, domain, i));
            draw_label(&mut rng, spec, domain)
        })
        .collect()
}

fn synth_participant(
    spec: &ShiftSpec,
    opts: &SynthOptions,
    domain: Domain,
    index: usize,
) -> Result<SensorWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(participant_seed(spec.seed, domain, index));
    let (fitness, y) = draw_label(&mut rng, spec, domain);
    // centered, roughly unit-scale fitness driving the activity model
    let fit_n = (fitness - 39.0) / 8.0;

    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> f64 {
        Normal::new(mean, std).expect("static std").sample(rng)
    };

    // the fitness signature is spread across weakly coupled channels; the
    // strongest one is relational (heart-rate response per unit intensity),
    // so a useful representation has to relate the two modalities rather
    // than read any single feature
    let resting_hr = 68.0 - 1.0 * fit_n + normal(&mut rng, 0.0, 6.0);
    let hr_slope = (0.11 - 0.022 * fit_n + normal(&mut rng, 0.0, 0.010)).max(0.02);

    let age = (45.0 - 2.0 * fit_n + normal(&mut rng, 0.0, 9.0)).clamp(20.0, 75.0);
    let sex = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    let bmi = (26.5 - 0.5 * fit_n + normal(&mut rng, 0.0, 3.0)).clamp(16.0, 40.0);
    let reported_rhr = resting_hr + normal(&mut rng, 0.0, 4.0);

    // recording starts at 07:00 on day 0 so short analysis windows cover
    // waking hours rather than sleep
    let start_minute: u64 = 420;
    let total_minutes = (opts.stream_hours * 60.0).round() as usize;
    let days = (start_minute as usize + total_minutes) / 1440 + 2;

    // per-day bout plan: (start minute-of-day, length, vigorous)
    let mut bouts: Vec<Vec<(usize, usize, bool)>> = Vec::with_capacity(days);
    for _ in 0..days {
        let target_minutes = (25.0 + 4.0 * fit_n + normal(&mut rng, 0.0, 16.0)).clamp(2.0, 95.0);
        let mut planned: Vec<(usize, usize, bool)> = Vec::new();
        let mut remaining = target_minutes;
        while remaining > 4.0 {
            let len = rng.gen_range(10..=35).min(remaining.ceil() as usize);
            let start = rng.gen_range(480..1320); // waking hours
            let vigorous = rng.gen_bool((0.06 + 0.04 * fit_n).clamp(0.0, 0.5));
            planned.push((start, len, vigorous));
            remaining -= len as f64;
        }
        bouts.push(planned);
    }

    let mut hr = Vec::with_capacity(total_minutes);
    let mut accel = Vec::with_capacity(total_minutes);
    let wear = vec![true; total_minutes];
    for m in 0..total_minutes {
        let absolute = start_minute as usize + m;
        let minute_of_day = absolute % 1440;
        let day = absolute / 1440;
        let asleep = minute_of_day < 420 || minute_of_day >= 1380;

        let in_bout = bouts[day]
            .iter()
            .find(|&&(s, len, _)| minute_of_day >= s && minute_of_day < s + len);

        let a = if asleep {
            if rng.gen_bool(0.10) {
                0.0
            } else {
                normal(&mut rng, 1.5, 1.2).max(0.0)
            }
        } else if let Some(&(_, _, vigorous)) = in_bout {
            if vigorous {
                rng.gen_range(430.0..560.0)
            } else {
                rng.gen_range(250.0..420.0)
            }
        } else {
            let u: f64 = rng.gen();
            if u < 0.60 {
                rng.gen_range(3.0..100.0)
            } else if u < 0.92 {
                rng.gen_range(107.0..210.0)
            } else {
                rng.gen_range(215.0..330.0)
            }
        };
        let h = (resting_hr + hr_slope * a + normal(&mut rng, 0.0, 2.5)).clamp(35.0, 200.0);
        accel.push(a);
        hr.push(h);
    }

    let raw = RawStream { start_minute, hr, accel, wear };
    let mut window = preprocess_stream(&raw, &opts.preprocess)?;
    window.id = format!(
        "{}-{index:05}",
        match domain {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    );
    window.domain = domain;
    window.y = y;
    window.y_c = match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    };
    window.metadata = vec![age, sex, bmi, reported_rhr];
    Ok(window)
}

/// Generates the silver-standard source cohort and gold-standard target
/// cohort, deterministic in `spec.seed`, with fine-grained labels assigned
/// over the pooled label distribution.
pub fn generate_cohorts(spec: &ShiftSpec) -> Result<(Cohort, Cohort)> {
    generate_cohorts_with(spec, &SynthOptions::default())
}

pub fn generate_cohorts_with(spec: &ShiftSpec, opts: &SynthOptions) -> Result<(Cohort, Cohort)> {
    spec.validate()?;
    if opts.stream_hours < opts.preprocess.min_wear_hours {
        return Err(Error::config(format!(
            "stream_hours {} cannot satisfy the {} h wear minimum",
            opts.stream_hours, opts.preprocess.min_wear_hours
        )));
    }
    let synth = |domain: Domain, n: usize| -> Result<Vec<SensorWindow>> {
        (0..n)
            .into_par_iter()
            .map(|i| synth_participant(spec, opts, domain, i))
            .collect()
    };
    let mut source =
        Cohort { name: "source".into(), domain: Domain::Source, windows: synth(Domain::Source, spec.n_source)? };
    let mut target =
        Cohort { name: "target".into(), domain: Domain::Target, windows: synth(Domain::Target, spec.n_target)? };
    assign_fine_labels(&mut source, &mut target)?;
    Ok((source, target))
}

/// Sets `y_d` on every window to its z-score within the pooled label
/// distribution of both cohorts (population std).
pub fn assign_fine_labels(source: &mut Cohort, target: &mut Cohort) -> Result<()> {
    let pooled: Vec<f64> = source.labels().into_iter().chain(target.labels()).collect();
    if pooled.is_empty() {
        return Err(Error::config("cannot assign fine labels to empty cohorts"));
    }
    let (mean, std) = mean_std(&pooled);
    if !(std > 0.0) {
        return Err(Error::config("degenerate pooled label distribution (std = 0)"));
    }
    for w in source.windows.iter_mut().chain(target.windows.iter_mut()) {
        w.y_d = (w.y - mean) / std;
    }
    Ok(())
}

// ── Dataset files ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WindowRecord {
    id: String,
    domain: Domain,
    y: f64,
    y_c: u8,
    y_d: f64,
    metadata: Vec<f64>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    mask_len: usize,
}

impl From<&SensorWindow> for WindowRecord {
    fn from(w: &SensorWindow) -> Self {
        WindowRecord {
            id: w.id.clone(),
            domain: w.domain,
            y: w.y,
            y_c: w.y_c,
            y_d: w.y_d,
            metadata: w.metadata.clone(),
            x: (0..w.t).map(|r| w.row(r).to_vec()).collect(),
            mask_len: w.mask_len,
        }
    }
}

impl TryFrom<WindowRecord> for SensorWindow {
    type Error = Error;

    fn try_from(r: WindowRecord) -> Result<Self> {
        let t = r.x.len();
        let f = r.x.first().map_or(0, Vec::len);
        if t == 0 || f == 0 || r.x.iter().any(|row| row.len() != f) {
            return Err(Error::contract(format!("window {}: ragged or empty X", r.id)));
        }
        Ok(SensorWindow {
            id: r.id,
            domain: r.domain,
            y: r.y,
            y_c: r.y_c,
            y_d: r.y_d,
            metadata: r.metadata,
            x: r.x.into_iter().flatten().collect(),
            t,
            f,
            mask_len: r.mask_len,
        })
    }
}

/// Writes one window per line as JSON.
pub fn write_cohort_jsonl(path: &Path, cohort: &Cohort) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    for w in &cohort.windows {
        let record = WindowRecord::from(w);
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Parse { path: path.display().to_string(), detail: e.to_string() })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_cohort_jsonl(path: &Path, name: &str) -> Result<Cohort> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut windows = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WindowRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?;
        windows.push(SensorWindow::try_from(record)?);
    }
    if windows.is_empty() {
        return Err(Error::contract(format!("{}: empty dataset", path.display())));
    }
    let domain = windows[0].domain;
    if windows.iter().any(|w| w.domain != domain) {
        return Err(Error::contract(format!("{}: mixed domains in one cohort", path.display())));
    }
    Ok(Cohort { name: name.into(), domain, windows })
}

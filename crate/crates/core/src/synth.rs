//! Synthetic hourly price/load corpora with known extreme events.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesFrame;
use crate::error::{Error, Result};
use crate::tensor::seeded_rng;

/// 2024-01-01T00:00:00Z.
pub const DEFAULT_START: i64 = 1_704_067_200;
pub const MIN_LENGTH: usize = 500;
const HOUR: i64 = 3600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Daily and weekly cycles plus noise.
    Seasonal,
    /// Seasonal plus upward level shifts.
    Spiky,
    /// Seasonal plus downward shifts that push prices below zero.
    Negative,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal" => Ok(SynthKind::Seasonal),
            "spiky" => Ok(SynthKind::Spiky),
            "negative" => Ok(SynthKind::Negative),
            other => Err(Error::usage(format!(
                "unknown synth kind `{other}` (expected seasonal, spiky or negative)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub seed: u64,
    /// Number of injected events; ignored for `seasonal`.
    pub events: usize,
    /// Event durations are drawn uniformly from this inclusive range.
    pub event_len: (usize, usize),
    /// Shift magnitudes in units of the clean price std.
    pub magnitude_sigmas: (f64, f64),
    /// Std of the iid price noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SynthKind::Seasonal,
            length: 8760,
            seed: 0,
            events: 10,
            event_len: (50, 150),
            magnitude_sigmas: (8.0, 12.0),
            noise: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub start: usize,
    pub end_exclusive: usize,
    /// Signed additive shift in price units.
    pub magnitude: f64,
}

impl SynthEvent {
    pub fn len(&self) -> usize {
        self.end_exclusive - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end_exclusive
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end_exclusive).contains(&i)
    }
}

/// Ground truth written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: SynthKind,
    pub seed: u64,
    pub length: usize,
    pub events: Vec<SynthEvent>,
}

impl Sidecar {
    pub fn in_event(&self, i: usize) -> bool {
        self.events.iter().any(|e| e.contains(i))
    }
}

/// Clean price and load columns.
fn seasonal(spec: &SynthSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = seeded_rng(spec.seed);
    let price_noise = Normal::new(0.0, spec.noise).map_err(|e| Error::usage(format!("noise: {e}")))?;
    let load_noise = Normal::new(0.0, 20.0).expect("valid std");
    let phase = rng.random_range(0.0..TAU);
    let mut price = Vec::with_capacity(spec.length);
    let mut load = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let day = TAU * t as f64 / 24.0 + phase;
        let week = TAU * t as f64 / 168.0;
        price.push(50.0 + 10.0 * day.sin() + 3.0 * (2.0 * day).cos() + 5.0 * week.sin() + price_noise.sample(&mut rng));
        load.push(1000.0 + 200.0 * (day - 0.5).sin() + 80.0 * week.sin() + load_noise.sample(&mut rng));
    }
    Ok((price, load))
}

fn population_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Draws non-overlapping events at least 100 steps apart and 200 steps
/// from either end.
fn place_events(spec: &SynthSpec, sigma: f64, sign: f64) -> Result<Vec<SynthEvent>> {
    let (lo, hi) = spec.event_len;
    if lo == 0 || lo > hi {
        return Err(Error::usage(format!("invalid event length range {lo}..={hi}")));
    }
    let (mlo, mhi) = spec.magnitude_sigmas;
    if !(mlo > 0.0 && mlo <= mhi) {
        return Err(Error::usage("invalid event magnitude range"));
    }
    const MARGIN: usize = 200;
    const GAP: usize = 100;
    if spec.length < 2 * MARGIN + hi {
        return Err(Error::usage(format!(
            "series of {} steps is too short to place events",
            spec.length
        )));
    }
    let mut rng = seeded_rng(spec.seed ^ 0x5EED_E7E7);
    let mut events: Vec<SynthEvent> = Vec::with_capacity(spec.events);
    let mut attempts = 0;
    while events.len() < spec.events {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::usage(format!(
                "cannot fit {} events into {} steps",
                spec.events, spec.length
            )));
        }
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(MARGIN..=spec.length - MARGIN - len);
        let end = start + len;
        if events
            .iter()
            .any(|e| start < e.end_exclusive + GAP && e.start < end + GAP)
        {
            continue;
        }
        let m = if mlo == mhi { mlo } else { rng.random_range(mlo..mhi) };
        events.push(SynthEvent {
            start,
            end_exclusive: end,
            magnitude: sign * m * sigma,
        });
    }
    events.sort_by_key(|e| e.start);
    Ok(events)
}

/// Generates a corpus and its ground-truth sidecar.
pub fn generate(spec: &SynthSpec) -> Result<(SeriesFrame, Sidecar)> {
    if spec.length < MIN_LENGTH {
        return Err(Error::usage(format!(
            "synthetic series need at least {MIN_LENGTH} steps, got {}",
            spec.length
        )));
    }
    let (mut price, load) = seasonal(spec)?;
    let events = match spec.kind {
        SynthKind::Seasonal => Vec::new(),
        SynthKind::Spiky | SynthKind::Negative => {
            let sign = if spec.kind == SynthKind::Spiky { 1.0 } else { -1.0 };
            let events = place_events(spec, population_std(&price), sign)?;
            for e in &events {
                for p in &mut price[e.start..e.end_exclusive] {
                    *p += e.magnitude;
                }
            }
            events
        }
    };
    let frame = SeriesFrame::new(
        (0..spec.length as i64).map(|t| DEFAULT_START + t * HOUR).collect(),
        HOUR,
        price.iter().zip(&load).flat_map(|(p, l)| [*p, *l]).collect(),
        vec!["price".into(), "load".into()],
        0,
    )?;
    Ok((
        frame,
        Sidecar {
            kind: spec.kind,
            seed: spec.seed,
            length: spec.length,
            events,
        },
    ))
}

/// Writes `<path>` and `<path>.events.json`.
pub fn write(spec: &SynthSpec, path: &Path) -> Result<Sidecar> {
    let (frame, sidecar) = generate(spec)?;
    frame.write_csv(path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".events.json");
    s.into()
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seasonal_has_no_events() {
        let (f, s) = generate(&SynthSpec {
            length: 2000,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(f.len(), 2000);
        assert!(s.events.is_empty());
    }

    #[test]
    fn spiky_event_lengths_in_range() {
        let spec = SynthSpec {
            kind: SynthKind::Spiky,
            length: 5000,
            events: 10,
            seed: 4,
            ..SynthSpec::default()
        };
        let (f, s) = generate(&spec).unwrap();
        assert_eq!(s.events.len(), 10);
        assert!(s.events.iter().all(|e| (50..=150).contains(&e.len())));
        assert!(s.events.windows(2).all(|w| w[0].end_exclusive <= w[1].start));
        let (clean, _) = generate(&SynthSpec {
            kind: SynthKind::Seasonal,
            ..spec
        })
        .unwrap();
        let sigma = population_std(&clean.target());
        for e in &s.events {
            assert!(e.magnitude >= 8.0 * sigma && e.magnitude <= 12.0 * sigma);
            assert!((f.target()[e.start] - clean.target()[e.start] - e.magnitude).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_events_go_below_zero() {
        let (f, s) = generate(&SynthSpec {
            kind: SynthKind::Negative,
            length: 3000,
            events: 5,
            seed: 9,
            ..SynthSpec::default()
        })
        .unwrap();
        let y = f.target();
        for e in &s.events {
            let mean = y[e.start..e.end_exclusive].iter().sum::<f64>() / e.len() as f64;
            assert!(mean < 0.0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            kind: SynthKind::Spiky,
            seed: 3,
            ..SynthSpec::default()
        };
        write(&spec, &dir.path().join("a.csv")).unwrap();
        write(&spec, &dir.path().join("b.csv")).unwrap();
        let a = std::fs::read(dir.path().join("a.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b.csv")).unwrap();
        assert_eq!(a, b);
        let side = read_sidecar(&dir.path().join("a.csv.events.json")).unwrap();
        assert_eq!(side.events.len(), 10);
    }

    #[test]
    fn short_series_and_unknown_kind_are_usage_errors() {
        assert!(matches!(
            generate(&SynthSpec {
                length: 499,
                ..SynthSpec::default()
            }),
            Err(Error::Usage(_))
        ));
        assert!(matches!("bursty".parse::<SynthKind>(), Err(Error::Usage(_))));
    }
}

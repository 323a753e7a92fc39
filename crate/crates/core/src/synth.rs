//! Synthetic run-to-failure fleet in the C-MAPSS text layout.
//!
//! Each unit has a health index `h(t) = w0 + (1 - w0) (t / L)^p` that rises
//! from a small initial wear `w0` to 1 at its failure cycle `L`. Sensors 2,
//! 3 and 4 respond to `h` with Gaussian noise; sensor 3 falls while the other
//! two rise. Every other column is constant apart from tiny setting jitter,
//! so min-max scaling leaves only the degradation channels informative.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EngineSeries, RawRecord, SENSORS, SETTINGS};
use crate::rng::{stream_rng, Stream};

/// 1-based sensors that carry the degradation signal.
pub const DEGRADATION_SENSORS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_units: usize,
    pub test_units: usize,
    pub min_life: u32,
    pub max_life: u32,
    /// Noise standard deviation relative to each channel's degradation span.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_units: 40,
            test_units: 10,
            min_life: 80,
            max_life: 150,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFleet {
    pub train: Vec<EngineSeries>,
    /// Test units, truncated before failure.
    pub test: Vec<EngineSeries>,
    /// Remaining cycles after the last observed test cycle, in unit order.
    pub test_rul: Vec<u32>,
}

struct Channel {
    base: f64,
    span: f64,
}

const CHANNELS: [Channel; 3] = [
    Channel { base: 642.0, span: 1.5 },
    Channel { base: 1590.0, span: -12.0 },
    Channel { base: 1400.0, span: 20.0 },
];

const SENSOR_BASELINE: [f64; SENSORS] = [
    518.67, 642.0, 1590.0, 1400.0, 14.62, 21.61, 554.0, 2388.0, 9050.0, 1.3, 47.5, 522.0, 2388.0,
    8140.0, 8.4, 0.03, 392.0, 2388.0, 100.0, 38.9, 23.3,
];

fn simulate_unit(unit_id: u32, life: u32, observed: u32, config: &SynthConfig, rng: &mut impl Rng) -> EngineSeries {
    let wear0 = rng.random_range(0.0..0.1);
    let shape = rng.random_range(1.2..2.2);
    let jitter = Normal::new(0.0, 1e-4).expect("valid sigma");
    let noise: Vec<Normal<f64>> = CHANNELS
        .iter()
        .map(|c| Normal::new(0.0, config.noise * c.span.abs()).expect("valid sigma"))
        .collect();
    let records = (1..=observed)
        .map(|cycle| {
            let h = wear0 + (1.0 - wear0) * (cycle as f64 / life as f64).powf(shape);
            let mut sensors = SENSOR_BASELINE;
            for ((&s, c), n) in DEGRADATION_SENSORS.iter().zip(&CHANNELS).zip(&noise) {
                sensors[s - 1] = c.base + c.span * h + n.sample(rng);
            }
            let settings: [f64; SETTINGS] = std::array::from_fn(|_| jitter.sample(rng));
            RawRecord {
                unit_id,
                cycle,
                settings,
                sensors,
            }
        })
        .collect();
    EngineSeries {
        unit_id,
        records,
        total_life: Some(life),
        truth_rul: None,
    }
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticFleet> {
    if config.train_units == 0 || config.test_units == 0 {
        return Err(Error::Config("synthetic fleet needs at least one train and one test unit".into()));
    }
    if config.min_life < 2 || config.min_life > config.max_life {
        return Err(Error::Config(format!(
            "invalid lifetime range {}..={}",
            config.min_life, config.max_life
        )));
    }
    if !(config.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let mut rng = stream_rng(config.seed, Stream::SyntheticFleet);
    let train = (1..=config.train_units as u32)
        .map(|id| {
            let life = rng.random_range(config.min_life..=config.max_life);
            simulate_unit(id, life, life, config, &mut rng)
        })
        .collect();
    let mut test = Vec::with_capacity(config.test_units);
    let mut test_rul = Vec::with_capacity(config.test_units);
    for id in 1..=config.test_units as u32 {
        let life = rng.random_range(config.min_life..=config.max_life);
        // Observe between 10% and 90% of the life.
        let lo = (life / 10).max(1);
        let hi = (life * 9 / 10).max(lo);
        let observed = rng.random_range(lo..=hi);
        let mut unit = simulate_unit(id, life, observed, config, &mut rng);
        unit.total_life = None;
        unit.truth_rul = Some(life - observed);
        test_rul.push(life - observed);
        test.push(unit);
    }
    Ok(SyntheticFleet { train, test, test_rul })
}

fn series_text(series: &[EngineSeries]) -> String {
    let mut out = String::new();
    for s in series {
        for r in &s.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
    }
    out
}

/// Paths written by [`SyntheticFleet::write`].
#[derive(Debug, Clone)]
pub struct FleetFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub rul: PathBuf,
}

impl SyntheticFleet {
    pub fn rul_text(&self) -> String {
        let mut out = String::new();
        for r in &self.test_rul {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    /// Writes `train_<tag>.txt`, `test_<tag>.txt` and `RUL_<tag>.txt` into `dir`.
    pub fn write(&self, dir: &Path, tag: &str) -> Result<FleetFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = FleetFiles {
            train: dir.join(format!("train_{tag}.txt")),
            test: dir.join(format!("test_{tag}.txt")),
            rul: dir.join(format!("RUL_{tag}.txt")),
        };
        for (path, text) in [
            (&files.train, series_text(&self.train)),
            (&files.test, series_text(&self.test)),
            (&files.rul, self.rul_text()),
        ] {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(files)
    }
}

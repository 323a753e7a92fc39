//! C-MAPSS run-to-failure files: parsing, feature selection, min-max
//! scaling, piecewise-linear RUL labels and overlapping windows.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Error, Result};
use crate::FORMAT_VERSION;

pub const SETTINGS: usize = 3;
pub const SENSORS: usize = 21;
/// unit, cycle, 3 settings, 21 sensors.
pub const FIELDS: usize = 2 + SETTINGS + SENSORS;

/// The 14 informative sensors commonly used for C-MAPSS.
pub const DEFAULT_SENSORS: [usize; 14] = [2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21];

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub settings: [f64; SETTINGS],
    pub sensors: [f64; SENSORS],
}

impl RawRecord {
    /// Whitespace-separated line in the C-MAPSS column order.
    pub fn to_line(&self) -> String {
        let mut parts = vec![self.unit_id.to_string(), self.cycle.to_string()];
        parts.extend(self.settings.iter().map(f64::to_string));
        parts.extend(self.sensors.iter().map(f64::to_string));
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineSeries {
    pub unit_id: u32,
    pub records: Vec<RawRecord>,
    /// Run-to-failure length; set for training units.
    pub total_life: Option<u32>,
    /// RUL at the last record; set for pruned test units.
    pub truth_rul: Option<u32>,
}

impl EngineSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cycle at which the unit fails: the recorded life for training units,
    /// last cycle plus ground-truth RUL for test units.
    pub fn failure_cycle(&self) -> Option<u32> {
        if let Some(life) = self.total_life {
            return Some(life);
        }
        let last = self.records.last()?.cycle;
        self.truth_rul.map(|rul| last + rul)
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} {tok:?} is not numeric"),
    })
}

/// Reads a C-MAPSS text stream. Blank lines are skipped; fields past the
/// 26th are ignored. Series come back sorted by unit id, records by cycle.
/// Every series gets `total_life = record count`; callers holding pruned
/// test data replace it with [`attach_truth_rul`].
pub fn parse_cmapss(reader: impl BufRead) -> Result<Vec<EngineSeries>> {
    let mut units: BTreeMap<u32, Vec<RawRecord>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < FIELDS {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at least {FIELDS} fields, found {}", tokens.len()),
            });
        }
        let unit_id: u32 = parse_field(tokens[0], lineno, "unit id")?;
        let cycle: u32 = parse_field(tokens[1], lineno, "cycle")?;
        if unit_id == 0 || cycle == 0 {
            return Err(Error::Parse {
                line: lineno,
                message: "unit id and cycle must be positive".into(),
            });
        }
        let mut settings = [0.0; SETTINGS];
        for (j, s) in settings.iter_mut().enumerate() {
            *s = parse_field(tokens[2 + j], lineno, "setting")?;
        }
        let mut sensors = [0.0; SENSORS];
        for (j, s) in sensors.iter_mut().enumerate() {
            *s = parse_field(tokens[2 + SETTINGS + j], lineno, "sensor")?;
        }
        units.entry(unit_id).or_default().push(RawRecord {
            unit_id,
            cycle,
            settings,
            sensors,
        });
    }

    units
        .into_iter()
        .map(|(unit_id, mut records)| {
            records.sort_by_key(|r| r.cycle);
            for pair in records.windows(2) {
                if pair[1].cycle != pair[0].cycle + 1 {
                    return Err(validation(format!(
                        "unit {unit_id}: cycles {} and {} are not contiguous",
                        pair[0].cycle, pair[1].cycle
                    )));
                }
            }
            Ok(EngineSeries {
                unit_id,
                total_life: Some(records.len() as u32),
                truth_rul: None,
                records,
            })
        })
        .collect()
}

pub fn read_cmapss_file(path: &Path) -> Result<Vec<EngineSeries>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cmapss(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Assigns the k-th RUL value to the k-th series and marks the series as
/// pruned (no known total life).
pub fn attach_truth_rul(mut series: Vec<EngineSeries>, rul_text: &str) -> Result<Vec<EngineSeries>> {
    let values = rul_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let tok = l.split_whitespace().next().unwrap_or_default();
            // Some distributions write the integers as "112.0".
            tok.parse::<u32>()
                .or_else(|_| match tok.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as u32),
                    _ => Err(()),
                })
                .map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("RUL value {tok:?} is not a non-negative integer"),
                })
        })
        .collect::<Result<Vec<u32>>>()?;
    if values.len() != series.len() {
        return Err(validation(format!(
            "{} RUL values for {} test units",
            values.len(),
            series.len()
        )));
    }
    for (s, rul) in series.iter_mut().zip(values) {
        s.truth_rul = Some(rul);
        s.total_life = None;
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// 1-based sensor numbers, ascending.
    pub sensor_indices: Vec<usize>,
    /// Number of leading operational settings used (0..=3).
    pub include_settings: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            sensor_indices: DEFAULT_SENSORS.to_vec(),
            include_settings: SETTINGS,
        }
    }
}

impl FeatureSpec {
    pub fn new(mut sensor_indices: Vec<usize>, include_settings: usize) -> Result<Self> {
        sensor_indices.sort_unstable();
        sensor_indices.dedup();
        if let Some(bad) = sensor_indices.iter().find(|&&s| s == 0 || s > SENSORS) {
            return Err(Error::Config(format!("sensor index {bad} outside 1..={SENSORS}")));
        }
        if include_settings > SETTINGS {
            return Err(Error::Config(format!(
                "at most {SETTINGS} operational settings, asked for {include_settings}"
            )));
        }
        if sensor_indices.is_empty() && include_settings == 0 {
            return Err(Error::Config("feature set is empty".into()));
        }
        Ok(Self {
            sensor_indices,
            include_settings,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.sensor_indices.len() + self.include_settings
    }

    /// Settings first, then sensors in ascending order.
    pub fn extract(&self, record: &RawRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_count());
        out.extend_from_slice(&record.settings[..self.include_settings]);
        out.extend(self.sensor_indices.iter().map(|&s| record.sensors[s - 1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    pub fn feature_count(&self) -> usize {
        self.min.len()
    }

    /// `(v - min) / (max - min)` clamped to `[0, 1]`; constant features map to 0.
    pub fn scale(&self, feature: usize, value: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi <= lo {
            return 0.0;
        }
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

pub fn fit_minmax(training: &[EngineSeries], spec: &FeatureSpec) -> Result<NormalizationStats> {
    let f = spec.feature_count();
    let mut min = vec![f64::INFINITY; f];
    let mut max = vec![f64::NEG_INFINITY; f];
    let mut seen = false;
    for record in training.iter().flat_map(|s| &s.records) {
        seen = true;
        for (j, v) in spec.extract(record).into_iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    if !seen {
        return Err(domain("cannot fit normalization on zero records"));
    }
    Ok(NormalizationStats { min, max })
}

/// Scales every row of a `rows x F` matrix.
pub fn apply_minmax(values: &[Vec<f64>], stats: &NormalizationStats) -> Result<Vec<Vec<f64>>> {
    values
        .iter()
        .map(|row| {
            if row.len() != stats.feature_count() {
                return Err(domain(format!(
                    "row has {} features, stats have {}",
                    row.len(),
                    stats.feature_count()
                )));
            }
            Ok(row.iter().enumerate().map(|(j, &v)| stats.scale(j, v)).collect())
        })
        .collect()
}

/// `min(cap, total_life - cycle)`.
pub fn piecewise_rul(total_life: u32, cycle: u32, cap: f64) -> Result<f64> {
    if cycle == 0 || cycle > total_life {
        return Err(domain(format!(
            "cycle {cycle} outside 1..={total_life}"
        )));
    }
    if cap <= 0.0 {
        return Err(domain(format!("RUL cap must be positive, got {cap}")));
    }
    Ok(cap.min((total_life - cycle) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub unit_id: u32,
    /// 1-based position of the window within its unit.
    pub window_id: u32,
    /// `T x F` normalized readings.
    pub values: Vec<Vec<f64>>,
    pub rul_target: f64,
}

/// Stride-1 windows of length `window_length`. The target is the
/// piecewise RUL at each window's last cycle. Series shorter than the window
/// are left-padded by repeating their first record.
pub fn make_windows(
    series: &EngineSeries,
    window_length: usize,
    spec: &FeatureSpec,
    stats: &NormalizationStats,
    cap: f64,
) -> Result<Vec<TimeWindow>> {
    if series.is_empty() {
        return Err(domain(format!("unit {} has no records", series.unit_id)));
    }
    if window_length == 0 {
        return Err(domain("window length must be positive"));
    }
    let failure = series.failure_cycle().ok_or_else(|| {
        domain(format!(
            "unit {} has neither a total life nor a ground-truth RUL",
            series.unit_id
        ))
    })?;

    let raw: Vec<Vec<f64>> = series.records.iter().map(|r| spec.extract(r)).collect();
    let scaled = apply_minmax(&raw, stats)?;
    let cycles: Vec<u32> = series.records.iter().map(|r| r.cycle).collect();

    let (rows, cycles) = if scaled.len() < window_length {
        let pad = window_length - scaled.len();
        let mut rows = vec![scaled[0].clone(); pad];
        rows.extend(scaled);
        let mut cyc = vec![cycles[0]; pad];
        cyc.extend(cycles);
        (rows, cyc)
    } else {
        (scaled, cycles)
    };

    (0..=rows.len() - window_length)
        .map(|start| {
            let end = start + window_length;
            Ok(TimeWindow {
                unit_id: series.unit_id,
                window_id: start as u32 + 1,
                values: rows[start..end].to_vec(),
                rul_target: piecewise_rul(failure, cycles[end - 1], cap)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit_id: u32,
    pub length: usize,
    pub total_life: Option<u32>,
    pub truth_rul: Option<u32>,
    pub window_count: usize,
}

/// Windowed dataset as written to disk.
///
/// ```json
/// { "format": "latent-rul/windows", "format_version": 1,
///   "window_length": 20, "rul_cap": 125.0,
///   "feature_spec": {"sensor_indices": [...], "include_settings": 3},
///   "stats": {"min": [...], "max": [...]},
///   "units": [{"unit_id": 1, "length": 192, "total_life": 192, "truth_rul": null, "window_count": 173}],
///   "windows": [{"unit_id": 1, "window_id": 1, "values": [[...], ...], "rul_target": 125.0}] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub format: String,
    pub format_version: u32,
    pub window_length: usize,
    pub rul_cap: f64,
    pub feature_spec: FeatureSpec,
    pub stats: NormalizationStats,
    pub units: Vec<UnitSummary>,
    pub windows: Vec<TimeWindow>,
}

pub const WINDOWS_FORMAT: &str = "latent-rul/windows";

impl WindowedDataset {
    pub fn build(
        series: &[EngineSeries],
        window_length: usize,
        spec: &FeatureSpec,
        stats: &NormalizationStats,
        cap: f64,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(series.len());
        let mut windows = Vec::new();
        for s in series {
            let w = make_windows(s, window_length, spec, stats, cap)?;
            units.push(UnitSummary {
                unit_id: s.unit_id,
                length: s.len(),
                total_life: s.total_life,
                truth_rul: s.truth_rul,
                window_count: w.len(),
            });
            windows.extend(w);
        }
        Ok(Self {
            format: WINDOWS_FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            window_length,
            rul_cap: cap,
            feature_spec: spec.clone(),
            stats: stats.clone(),
            units,
            windows,
        })
    }

    /// Windows of one unit, in window order.
    pub fn unit_windows(&self, unit_id: u32) -> impl Iterator<Item = &TimeWindow> {
        self.windows.iter().filter(move |w| w.unit_id == unit_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != WINDOWS_FORMAT || self.format_version != FORMAT_VERSION {
            return Err(validation(format!(
                "unsupported window file {} v{}",
                self.format, self.format_version
            )));
        }
        let f = self.feature_spec.feature_count();
        if self.stats.feature_count() != f {
            return Err(validation("normalization stats do not match the feature spec"));
        }
        for w in &self.windows {
            if w.values.len() != self.window_length || w.values.iter().any(|r| r.len() != f) {
                return Err(validation(format!(
                    "window {}/{} is not {}x{f}",
                    w.unit_id, w.window_id, self.window_length
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Self = read_json(path)?;
        ds.validate()?;
        Ok(ds)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

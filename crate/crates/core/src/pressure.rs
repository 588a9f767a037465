//! Pressure maps: parsing, statistics, synthetic postures and template annotations.
//!
//! Row 0 is the front edge of the seat, column 0 the sitter's left. Values are
//! min-max normalized to `[0, 1]` at load time against the sensor's declared range.

use std::io::{BufRead, BufReader, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};
use crate::rng;

pub const BINARY_MAGIC: &[u8; 4] = b"PMAP";
pub const BINARY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing_mm: f64,
    pub sampling_interval_ms: f64,
    pub value_min: f64,
    pub value_max: f64,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            spacing_mm: 10.0,
            sampling_interval_ms: 100.0,
            value_min: 0.0,
            value_max: 1023.0,
        }
    }
}

impl SensorGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::config("geometry needs positive rows and cols"));
        }
        if !(self.spacing_mm > 0.0 && self.sampling_interval_ms > 0.0) {
            return Err(Error::config("geometry pitch and sampling interval must be positive"));
        }
        if !(self.value_min < self.value_max) {
            return Err(Error::config(format!(
                "geometry value range ({}, {}) is empty",
                self.value_min, self.value_max
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.value_min) / (self.value_max - self.value_min)).min(1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.value_min + v * (self.value_max - self.value_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PressureMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("pressure map needs positive dimensions"));
        }
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("normalized pressure {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width]).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    /// Left-right mirror image.
    pub fn mirrored(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                values.push(self.at(r, c));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapFormat {
    Csv,
    Binary,
}

impl MapFormat {
    /// `.csv` → CSV, anything else → binary.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Binary,
        }
    }
}

pub fn load_pressure_map<R: Read>(source: R, format: MapFormat, geometry: &SensorGeometry) -> Result<PressureMap> {
    geometry.validate()?;
    let (rows, cols, raw) = match format {
        MapFormat::Csv => read_csv(source)?,
        MapFormat::Binary => read_binary(source)?,
    };
    if rows != geometry.rows || cols != geometry.cols {
        return Err(ParseError::DimensionMismatch {
            rows: geometry.rows,
            cols: geometry.cols,
            found_rows: rows,
            found_cols: cols,
        }
        .into());
    }
    let mut values = Vec::with_capacity(raw.len());
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() || value < geometry.value_min {
            return Err(ParseError::BelowRange {
                index,
                value,
                min: geometry.value_min,
            }
            .into());
        }
        // Readings above the declared maximum saturate at 1.
        values.push(geometry.normalize(value));
    }
    PressureMap::new(rows, cols, values)
}

fn read_csv<R: Read>(source: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for token in line.split(',') {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| ParseError::Number {
                line: i + 1,
                token: token.to_string(),
            })?;
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(ParseError::RaggedRow {
                    row: rows,
                    expected: w,
                    found: count,
                }
                .into())
            }
            Some(_) => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| ParseError::Truncated("empty CSV".into()))?;
    Ok((rows, width, values))
}

fn read_binary<R: Read>(mut source: R) -> Result<(usize, usize, Vec<f64>)> {
    let short = |what: &str| -> Error { ParseError::Truncated(what.to_string()).into() };
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|_| short("magic"))?;
    if &magic != BINARY_MAGIC {
        return Err(ParseError::BadMagic { expected: "PMAP" }.into());
    }
    let version = source.read_u32::<LittleEndian>().map_err(|_| short("version"))?;
    if version != BINARY_VERSION {
        return Err(ParseError::Version(version).into());
    }
    let h = source.read_u32::<LittleEndian>().map_err(|_| short("height"))? as usize;
    let w = source.read_u32::<LittleEndian>().map_err(|_| short("width"))? as usize;
    let mut values = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        values.push(f64::from(
            source.read_f32::<LittleEndian>().map_err(|_| short("values"))?,
        ));
    }
    Ok((h, w, values))
}

/// Writes raw (denormalized) readings in the binary format.
pub fn write_binary<W: Write>(mut out: W, map: &PressureMap, geometry: &SensorGeometry) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    out.write_u32::<LittleEndian>(BINARY_VERSION)?;
    out.write_u32::<LittleEndian>(map.height as u32)?;
    out.write_u32::<LittleEndian>(map.width as u32)?;
    for &v in &map.values {
        out.write_f32::<LittleEndian>(geometry.denormalize(v) as f32)?;
    }
    Ok(())
}

pub fn write_csv<W: Write>(mut out: W, map: &PressureMap, geometry: &SensorGeometry) -> Result<()> {
    for r in 0..map.height {
        let line: Vec<String> = (0..map.width)
            .map(|c| format!("{}", geometry.denormalize(map.at(r, c))))
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

pub fn compute_stats(map: &PressureMap) -> PressureStats {
    let n = map.values.len() as f64;
    let (mut max, mut min, mut sum) = (f64::NEG_INFINITY, f64::INFINITY, 0.0);
    for &v in &map.values {
        max = max.max(v);
        min = min.min(v);
        sum += v;
    }
    let mean = (sum / n).clamp(min, max);
    let variance = map.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    PressureStats {
        max,
        min,
        mean,
        variance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Center in cell units.
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    /// Radial standard deviation in cells.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPostureSpec {
    pub posture_label: String,
    pub blobs: Vec<Blob>,
    pub noise_floor: f64,
}

impl SyntheticPostureSpec {
    pub fn validate(&self, geometry: &SensorGeometry) -> Result<()> {
        let (maxr, maxc) = ((geometry.rows - 1) as f64, (geometry.cols - 1) as f64);
        for (i, b) in self.blobs.iter().enumerate() {
            if !(0.0..=maxr).contains(&b.row) || !(0.0..=maxc).contains(&b.col) {
                return Err(Error::config(format!(
                    "blob {i} center ({}, {}) outside the {}x{} grid",
                    b.row, b.col, geometry.rows, geometry.cols
                )));
            }
            if !(0.0..=1.0).contains(&b.amplitude) || !(b.std >= 0.0) {
                return Err(Error::config(format!(
                    "blob {i} needs amplitude in [0, 1] and a non-negative std"
                )));
            }
        }
        if !(self.noise_floor >= 0.0) {
            return Err(Error::config("noise floor must be non-negative"));
        }
        Ok(())
    }
}

/// Sum of isotropic Gaussian bumps plus a uniform noise floor, clamped to `[0, 1]`.
pub fn synth_posture(spec: &SyntheticPostureSpec, geometry: &SensorGeometry, seed: u64) -> Result<PressureMap> {
    geometry.validate()?;
    spec.validate(geometry)?;
    // Fixed summation order makes the result independent of blob-list order.
    let mut blobs: Vec<&Blob> = spec.blobs.iter().collect();
    blobs.sort_by(|a, b| {
        (a.row, a.col, a.amplitude, a.std)
            .partial_cmp(&(b.row, b.col, b.amplitude, b.std))
            .expect("validated blobs are finite")
    });
    let mut noise = rng::stream(seed, &[0]);
    let mut values = Vec::with_capacity(geometry.rows * geometry.cols);
    for r in 0..geometry.rows {
        for c in 0..geometry.cols {
            let mut v = 0.0;
            for b in &blobs {
                let d2 = (r as f64 - b.row).powi(2) + (c as f64 - b.col).powi(2);
                v += if b.std > 0.0 {
                    b.amplitude * (-d2 / (2.0 * b.std * b.std)).exp()
                } else if d2 == 0.0 {
                    b.amplitude
                } else {
                    0.0
                };
            }
            if spec.noise_floor > 0.0 {
                v += spec.noise_floor * rng::uniform(&mut noise);
            }
            values.push(v.clamp(0.0, 1.0));
        }
    }
    PressureMap::new(geometry.rows, geometry.cols, values)
}

const FORE_AFT: [(&str, f64, f64, f64); 4] = [
    // label, buttock row fraction, buttock amplitude, thigh amplitude
    ("upright", 0.72, 0.85, 0.5),
    ("forward-lean", 0.62, 0.6, 0.85),
    ("reclined", 0.84, 1.0, 0.25),
    ("perched on the front edge", 0.45, 0.7, 0.9),
];

const LATERAL: [(&str, f64, f64); 3] = [
    // label, left scale, right scale
    ("balanced", 1.0, 1.0),
    ("left-weighted", 1.0, 0.55),
    ("right-weighted", 0.55, 1.0),
];

/// Draws one of the archetypal sitting postures with jittered blob placement.
pub fn random_posture(geometry: &SensorGeometry, rng: &mut rng::Rng) -> SyntheticPostureSpec {
    use rand::Rng as _;
    let (fa_label, butt_row, butt_amp, thigh_amp) = FORE_AFT[rng.random_range(0..FORE_AFT.len())];
    let (lat_label, left, right) = LATERAL[rng.random_range(0..LATERAL.len())];
    let (h, w) = (geometry.rows as f64, geometry.cols as f64);
    let spread = 0.11 * h.min(w);
    let mut jitter = |scale: f64| (rng::uniform(rng) - 0.5) * 2.0 * scale;
    let mut blobs = Vec::new();
    for (side_col, side_scale) in [(0.3, left), (0.7, right)] {
        let thigh_row = (butt_row - 0.35).max(0.08);
        for (row_frac, amp) in [(butt_row, butt_amp), (thigh_row, thigh_amp)] {
            blobs.push(Blob {
                row: ((row_frac + jitter(0.03)) * (h - 1.0)).clamp(0.0, h - 1.0),
                col: ((side_col + jitter(0.03)) * (w - 1.0)).clamp(0.0, w - 1.0),
                amplitude: (amp * side_scale + jitter(0.05)).clamp(0.0, 1.0),
                std: spread * (1.0 + jitter(0.15)),
            });
        }
    }
    SyntheticPostureSpec {
        posture_label: format!("{fa_label}, {lat_label}"),
        blobs,
        noise_floor: 0.02,
    }
}

pub const QUADRANTS: [&str; 4] = ["front-left", "front-right", "rear-left", "rear-right"];

/// Summed pressure per quadrant, in [`QUADRANTS`] order. A middle row or column
/// of an odd-sized grid belongs to no quadrant.
pub fn quadrant_sums(map: &PressureMap) -> [f64; 4] {
    let (h, w) = (map.height, map.width);
    let mut sums = [0.0; 4];
    for r in 0..h {
        let front = if 2 * r + 1 < h {
            true
        } else if 2 * r + 1 > h {
            false
        } else {
            continue;
        };
        for c in 0..w {
            let left = if 2 * c + 1 < w {
                true
            } else if 2 * c + 1 > w {
                false
            } else {
                continue;
            };
            let q = match (front, left) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            sums[q] += map.at(r, c);
        }
    }
    sums
}

/// Left-half over right-half pressure (middle column excluded). `None` when both
/// halves are empty; infinite when only the left half carries load.
pub fn left_right_ratio(map: &PressureMap) -> Option<f64> {
    let w = map.width;
    let (mut left, mut right) = (0.0, 0.0);
    for r in 0..map.height {
        for c in 0..w {
            if 2 * c + 1 < w {
                left += map.at(r, c);
            } else if 2 * c + 1 > w {
                right += map.at(r, c);
            }
        }
    }
    if left == 0.0 && right == 0.0 {
        None
    } else {
        Some(left / right)
    }
}

pub const NO_CONTACT: &str = "no seat contact detected";

/// Deterministic description of a map: the two most loaded quadrants and the
/// left/right balance, optionally prefixed with a posture label.
pub fn template_annotation(map: &PressureMap, stats: &PressureStats, posture_label: Option<&str>) -> String {
    if stats.max <= 0.0 {
        return NO_CONTACT.to_string();
    }
    let sums = quadrant_sums(map);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
    let balance = match left_right_ratio(map) {
        None => "no lateral load".to_string(),
        Some(r) if r.is_infinite() => "all load on the left side".to_string(),
        Some(r) if r == 0.0 => "all load on the right side".to_string(),
        Some(r) => {
            let side = if r > 1.05 {
                "left side dominant"
            } else if r < 1.0 / 1.05 {
                "right side dominant"
            } else {
                "balanced left and right"
            };
            format!("left/right ratio {r:.2}, {side}")
        }
    };
    let mut out = String::new();
    if let Some(label) = posture_label {
        out.push_str(&format!("posture {label}. "));
    }
    out.push_str(&format!(
        "main contact at the {} and {} regions. {balance}. peak {:.2}, mean {:.2}.",
        QUADRANTS[order[0]], QUADRANTS[order[1]], stats.max, stats.mean
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_geometry(rows: usize, cols: usize) -> SensorGeometry {
        SensorGeometry {
            rows,
            cols,
            value_min: 0.0,
            value_max: 1.0,
            ..SensorGeometry::default()
        }
    }

    #[test]
    fn csv_already_normalized() {
        let m = load_pressure_map(&b"0,1\n1,0\n"[..], MapFormat::Csv, &unit_geometry(2, 2)).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn binary_min_max_normalization() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"PMAP");
        for v in [1u32, 1, 3] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [2f32, 4.0, 6.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let g = SensorGeometry {
            rows: 1,
            cols: 3,
            value_min: 2.0,
            value_max: 6.0,
            ..SensorGeometry::default()
        };
        let m = load_pressure_map(buf.as_slice(), MapFormat::Binary, &g).unwrap();
        assert_eq!(m.values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let g = unit_geometry(2, 3);
        let err = load_pressure_map(&b"0,0,0\n0,0\n"[..], MapFormat::Csv, &g).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::RaggedRow { row: 1, expected: 3, found: 2 })));
        let err = load_pressure_map(&b"0,0,-1\n0,0,0\n"[..], MapFormat::Csv, &g).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::BelowRange { index: 2, .. })));
        let err = load_pressure_map(&b"0,0\n0,0\n"[..], MapFormat::Csv, &g).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::DimensionMismatch { .. })));
        let err = load_pressure_map(&b"XMAP\x01\0\0\0"[..], MapFormat::Binary, &g).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::BadMagic { .. })));
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&PressureMap::new(3, 3, vec![0.4; 9]).unwrap());
        assert_eq!((s.max, s.min, s.mean, s.variance), (0.4, 0.4, 0.4, 0.0));

        let s = compute_stats(&PressureMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        assert_abs_diff_eq!(s.mean, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.variance, 0.0125, epsilon = 1e-15);

        let mut v = vec![0.0; 16];
        v[5] = 1.0;
        let s = compute_stats(&PressureMap::new(4, 4, v).unwrap());
        assert_eq!((s.max, s.min, s.mean), (1.0, 0.0, 1.0 / 16.0));
    }

    #[test]
    fn synth_degenerate_cases() {
        let g = unit_geometry(5, 5);
        let empty = SyntheticPostureSpec {
            posture_label: "none".into(),
            blobs: vec![],
            noise_floor: 0.0,
        };
        assert!(synth_posture(&empty, &g, 1).unwrap().values().iter().all(|&v| v == 0.0));

        let delta = SyntheticPostureSpec {
            blobs: vec![Blob {
                row: 2.0,
                col: 2.0,
                amplitude: 1.0,
                std: 1e-3,
            }],
            ..empty.clone()
        };
        let m = synth_posture(&delta, &g, 1).unwrap();
        assert_eq!(m.at(2, 2), 1.0);
        assert_eq!(m.values().iter().filter(|&&v| v > 0.0).count(), 1);

        let outside = SyntheticPostureSpec {
            blobs: vec![Blob {
                row: 5.5,
                col: 0.0,
                amplitude: 1.0,
                std: 1.0,
            }],
            ..empty
        };
        assert!(matches!(synth_posture(&outside, &g, 1), Err(Error::Config(_))));
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let g = SensorGeometry::default();
        let spec = random_posture(&g, &mut rng::seeded(4));
        let a = synth_posture(&spec, &g, 11).unwrap();
        let b = synth_posture(&spec, &g, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_posture(&spec, &g, 12).unwrap());
    }

    #[test]
    fn annotation_cases() {
        let zero = PressureMap::zeros(4, 4);
        assert_eq!(template_annotation(&zero, &compute_stats(&zero), None), NO_CONTACT);

        let g = unit_geometry(8, 8);
        let right_blob = SyntheticPostureSpec {
            posture_label: "x".into(),
            blobs: vec![Blob {
                row: 2.0,
                col: 6.0,
                amplitude: 0.9,
                std: 1.0,
            }],
            noise_floor: 0.0,
        };
        let m = synth_posture(&right_blob, &g, 0).unwrap();
        let text = template_annotation(&m, &compute_stats(&m), None);
        assert!(text.contains("right side dominant"), "{text}");
        assert!(text.starts_with("main contact at the front-right"), "{text}");

        let sym = SyntheticPostureSpec {
            blobs: vec![
                Blob {
                    row: 5.0,
                    col: 2.0,
                    amplitude: 0.8,
                    std: 1.5,
                },
                Blob {
                    row: 5.0,
                    col: 5.0,
                    amplitude: 0.8,
                    std: 1.5,
                },
            ],
            ..right_blob
        };
        let m = synth_posture(&sym, &g, 0).unwrap();
        assert_abs_diff_eq!(left_right_ratio(&m).unwrap(), 1.0, epsilon = 0.01);
        assert!(template_annotation(&m, &compute_stats(&m), None).contains("ratio 1.00"));
    }

    #[test]
    fn mirror_inverts_ratio_on_odd_width() {
        let m = PressureMap::new(2, 3, vec![0.2, 0.9, 0.4, 0.1, 0.5, 0.3]).unwrap();
        let r = left_right_ratio(&m).unwrap();
        let rm = left_right_ratio(&m.mirrored()).unwrap();
        assert_abs_diff_eq!(r * rm, 1.0, epsilon = 1e-12);
    }
}

//! Time-series ingestion, normalization, windowing and the synthetic
//! trend + seasonality + noise generator.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use chrono::NaiveDateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Timestamped multivariate series. Timestamps are epoch seconds and
/// strictly increasing; `values` has one row per timestamp.
#[derive(Debug, Clone)]
pub struct SeriesFrame {
    pub timestamps: Vec<i64>,
    pub values: Matrix,
    pub feature_names: Vec<String>,
    /// Column forecast in univariate mode.
    pub target: usize,
}

impl SeriesFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// A copy containing only the given columns (in the given order).
    pub fn select_columns(&self, columns: &[usize]) -> Result<SeriesFrame> {
        if columns.is_empty() {
            return Err(Error::Arg("select_columns: no columns".into()));
        }
        let mut values = Matrix::zeros(self.values.rows(), columns.len());
        let mut names = Vec::with_capacity(columns.len());
        for (j, &c) in columns.iter().enumerate() {
            if c >= self.values.cols() {
                return Err(Error::Arg(format!(
                    "select_columns: column {} out of range {}",
                    c,
                    self.values.cols()
                )));
            }
            names.push(self.feature_names[c].clone());
            for r in 0..self.values.rows() {
                values.set(r, j, self.values.get(r, c));
            }
        }
        Ok(SeriesFrame {
            timestamps: self.timestamps.clone(),
            values,
            feature_names: names,
            target: 0,
        })
    }
}

/// Load a series CSV: header row, first column a `YYYY-MM-DD HH:MM:SS`
/// timestamp, remaining columns decimal reals. The forecast target is the
/// column named `target` when given, otherwise the last column.
pub fn load_series_csv(path: impl AsRef<Path>, target: Option<&str>) -> Result<SeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Data(format!("{}: {e}", path.as_ref().display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("reading header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Data(
            "series CSV needs a timestamp column and at least one value column".into(),
        ));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let target = match target {
        Some(name) => feature_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("target column {name:?} not found")))?,
        None => feature_names.len() - 1,
    };

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("bad timestamp {:?}", &record[0]),
        })?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing at line {line}"
                )));
            }
        }
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number {field:?}"),
            })?;
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("series CSV contains no data rows".into()));
    }
    let values = Matrix::from_vec(timestamps.len(), feature_names.len(), data)?;
    Ok(SeriesFrame {
        timestamps,
        values,
        feature_names,
        target,
    })
}

pub(crate) fn parse_timestamp(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

pub(crate) fn format_timestamp(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0)
        .expect("timestamp in range")
        .naive_utc()
        .format(TIMESTAMP_FORMAT)
        .to_string()
}

/// Write a frame in the same CSV format `load_series_csv` reads. Floats are
/// written in shortest round-trip form, so write-then-read is exact.
pub fn write_series_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "date")?;
    for name in &frame.feature_names {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for r in 0..frame.len() {
        write!(out, "{}", format_timestamp(frame.timestamps[r]))?;
        for c in 0..frame.values.cols() {
            write!(out, ",{}", frame.values.get(r, c))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-feature mean and standard deviation fitted on the training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Fit z-score statistics on `train_range` rows.
pub fn normalize_fit(frame: &SeriesFrame, train_range: Range<usize>) -> Result<NormState> {
    if train_range.is_empty() || train_range.end > frame.len() {
        return Err(Error::Arg(format!(
            "train range {train_range:?} invalid for {} rows",
            frame.len()
        )));
    }
    let n = train_range.len() as f64;
    let cols = frame.values.cols();
    let mut means = vec![0.0; cols];
    for r in train_range.clone() {
        for c in 0..cols {
            means[c] += frame.values.get(r, c);
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut stds = vec![0.0; cols];
    for r in train_range.clone() {
        for (c, s) in stds.iter_mut().enumerate() {
            let d = frame.values.get(r, c) - means[c];
            *s += d * d;
        }
    }
    for (c, s) in stds.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            return Err(Error::Data(format!(
                "feature {:?} is constant on the training range",
                frame.feature_names[c]
            )));
        }
    }
    Ok(NormState { means, stds })
}

/// Z-score every row of the frame with the fitted statistics.
pub fn normalize_apply(frame: &SeriesFrame, norm: &NormState) -> Result<SeriesFrame> {
    if norm.means.len() != frame.values.cols() {
        return Err(Error::Dim(format!(
            "normalization fitted on {} features, frame has {}",
            norm.means.len(),
            frame.values.cols()
        )));
    }
    let mut out = frame.clone();
    for r in 0..out.values.rows() {
        for c in 0..out.values.cols() {
            let v = (out.values.get(r, c) - norm.means[c]) / norm.stds[c];
            out.values.set(r, c, v);
        }
    }
    Ok(out)
}

/// Undo the z-score transform on a matrix whose columns correspond to the
/// given frame columns.
pub fn normalize_invert(m: &Matrix, norm: &NormState, columns: &[usize]) -> Result<Matrix> {
    if columns.len() != m.cols() {
        return Err(Error::Dim(format!(
            "normalize_invert: {} columns named for {} matrix columns",
            columns.len(),
            m.cols()
        )));
    }
    if let Some(&bad) = columns.iter().find(|&&c| c >= norm.means.len()) {
        return Err(Error::Arg(format!(
            "normalize_invert: column {bad} out of range {}",
            norm.means.len()
        )));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (j, &c) in columns.iter().enumerate() {
            let v = out.get(r, j) * norm.stds[c] + norm.means[c];
            out.set(r, j, v);
        }
    }
    Ok(out)
}

/// One supervised window: encoder input, the known decoder prefix and the
/// forecast target rows.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub enc_in: Matrix,
    pub dec_known: Matrix,
    pub target: Matrix,
}

/// Sliding windows fully inside `split`. `dec_known` is the trailing
/// `label_len` rows of the input window; `target` is the next `pred_len`
/// rows (all columns).
pub fn make_windows(
    frame: &SeriesFrame,
    input_len: usize,
    label_len: usize,
    pred_len: usize,
    stride: usize,
    split: Range<usize>,
) -> Result<Vec<WindowSample>> {
    if input_len == 0 || pred_len == 0 || stride == 0 {
        return Err(Error::Arg(
            "input_len, pred_len and stride must be positive".into(),
        ));
    }
    if label_len > input_len {
        return Err(Error::Arg(format!(
            "label_len {label_len} exceeds input_len {input_len}"
        )));
    }
    if split.end > frame.len() {
        return Err(Error::Arg(format!(
            "split {split:?} out of range for {} rows",
            frame.len()
        )));
    }
    let needed = input_len + pred_len;
    if split.len() < needed {
        return Err(Error::Data(format!(
            "split of {} rows is too short: windows need at least {} rows",
            split.len(),
            needed
        )));
    }
    let cols = frame.values.cols();
    let slice_rows = |start: usize, len: usize| {
        let mut m = Matrix::zeros(len, cols);
        for r in 0..len {
            for c in 0..cols {
                m.set(r, c, frame.values.get(start + r, c));
            }
        }
        m
    };
    let mut samples = Vec::new();
    let mut start = split.start;
    while start + needed <= split.end {
        samples.push(WindowSample {
            enc_in: slice_rows(start, input_len),
            dec_known: slice_rows(start + input_len - label_len, label_len),
            target: slice_rows(start + input_len, pred_len),
        });
        start += stride;
    }
    Ok(samples)
}

/// Contiguous row ranges for train/validation/test by fraction.
pub fn split_ranges(len: usize, train_frac: f64, val_frac: f64) -> (Range<usize>, Range<usize>, Range<usize>) {
    let train_end = (len as f64 * train_frac).floor() as usize;
    let val_end = train_end + (len as f64 * val_frac).floor() as usize;
    (0..train_end, train_end..val_end.min(len), val_end.min(len)..len)
}

/// Synthetic series from a linear trend, a sinusoidal seasonality and
/// Gaussian noise, hourly timestamps. Deterministic per seed.
pub fn gen_synthetic(
    length: usize,
    trend_slope: f64,
    period: usize,
    seasonal_amp: f64,
    noise_std: f64,
    seed: u64,
) -> Result<SeriesFrame> {
    if period < 2 {
        return Err(Error::Arg(format!("period {period} must be at least 2")));
    }
    if length < 2 * period {
        return Err(Error::Arg(format!(
            "length {length} must be at least two periods ({})",
            2 * period
        )));
    }
    if noise_std < 0.0 {
        return Err(Error::Arg(format!("noise_std {noise_std} negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base = parse_timestamp("2020-01-01 00:00:00").unwrap();
    let omega = 2.0 * std::f64::consts::PI / period as f64;
    let mut timestamps = Vec::with_capacity(length);
    let mut data = Vec::with_capacity(length);
    for t in 0..length {
        timestamps.push(base + (t as i64) * 3600);
        let noise = if noise_std > 0.0 {
            noise_std * normal.sample(&mut rng)
        } else {
            0.0
        };
        data.push(trend_slope * t as f64 + seasonal_amp * (omega * t as f64).sin() + noise);
    }
    Ok(SeriesFrame {
        timestamps,
        values: Matrix::from_vec(length, 1, data)?,
        feature_names: vec!["value".to_string()],
        target: 0,
    })
}

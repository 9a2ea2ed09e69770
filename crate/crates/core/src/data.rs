//! Series tables, chronological splits, standardisation, sliding windows and
//! synthetic series.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{SeedStream, Tensor};
use crate::error::{Error, Result};

/// A multivariate series: `values` is `[rows, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub values: Tensor,
    pub channel_names: Vec<String>,
    /// Raw text of the timestamp column, when the file has one.
    pub timestamps: Option<Vec<String>>,
}

/// Whether the first CSV column holds timestamps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampColumn {
    /// Timestamps iff the first cell of the first data row is not a number.
    #[default]
    Auto,
    Present,
    Absent,
}

impl SeriesTable {
    pub fn new(values: Tensor, channel_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != channel_names.len() {
            return Err(Error::Data(format!(
                "{} channel names for values of shape {:?}",
                channel_names.len(),
                values.shape()
            )));
        }
        values.ensure_finite("series values")?;
        Ok(SeriesTable {
            values,
            channel_names,
            timestamps: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `start..end` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeriesTable {
        let c = self.channels();
        let data = self.values.data()[start * c..end * c].to_vec();
        SeriesTable {
            values: Tensor::from_parts(vec![end - start, c], data),
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write_csv_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        let mut header = Vec::new();
        if self.timestamps.is_some() {
            header.push("date".to_string());
        }
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (r, row) in self.values.data().chunks(self.channels()).enumerate() {
            let mut rec: Vec<String> = Vec::with_capacity(row.len() + 1);
            if let Some(ts) = &self.timestamps {
                rec.push(ts[r].clone());
            }
            // `{}` on f64 prints the shortest string that parses back exactly.
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
        Ok(())
    }
}

/// Reads a comma-separated file. Row and column numbers in errors are
/// 1-based and count the header line and the timestamp column.
pub fn load_csv(path: &Path, has_header: bool, timestamp: TimestampColumn) -> Result<SeriesTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, has_header, timestamp).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_csv(input: impl std::io::Read, has_header: bool, timestamp: TimestampColumn) -> Result<SeriesTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("malformed CSV: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        records.push((line, rec));
    }
    let mut rows = records.into_iter();
    let header = if has_header { rows.next() } else { None };
    let rows: Vec<_> = rows.collect();
    let first = rows
        .first()
        .ok_or_else(|| Error::Data("no data rows".to_string()))?;
    let width = first.1.len();
    let has_ts = match timestamp {
        TimestampColumn::Present => true,
        TimestampColumn::Absent => false,
        TimestampColumn::Auto => first.1.get(0).is_some_and(|c| c.parse::<f64>().is_err()),
    };
    let skip = usize::from(has_ts);
    if width <= skip {
        return Err(Error::Data("no numeric columns".to_string()));
    }
    let channels = width - skip;
    let channel_names = match &header {
        Some((line, h)) => {
            if h.len() != width {
                return Err(Error::Data(format!(
                    "header on row {line} has {} columns but data has {width}",
                    h.len()
                )));
            }
            h.iter().skip(skip).map(str::to_string).collect()
        }
        None => (0..channels).map(|c| format!("ch{c}")).collect(),
    };

    let mut values = Vec::with_capacity(rows.len() * channels);
    let mut timestamps = has_ts.then(Vec::new);
    for (line, rec) in &rows {
        if rec.len() != width {
            return Err(Error::Data(format!(
                "row {line} has {} columns, expected {width}",
                rec.len()
            )));
        }
        if let Some(ts) = timestamps.as_mut() {
            ts.push(rec[0].to_string());
        }
        for (col, cell) in rec.iter().enumerate().skip(skip) {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {line}, column {}: cannot parse '{cell}' as a number",
                    col + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {line}, column {}: non-finite value '{cell}'",
                    col + 1
                )));
            }
            values.push(v);
        }
    }
    Ok(SeriesTable {
        values: Tensor::from_parts(vec![rows.len(), channels], values),
        channel_names,
        timestamps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

impl Splits {
    pub fn get(&self, split: Split) -> &SeriesTable {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Row counts of a chronological split. `train = floor(rows * r_train)`,
/// `train + val = floor(rows * (r_train + r_val))`, test takes the rest.
/// Ratios are normalised by their sum.
pub fn split_sizes(rows: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    // The small slack keeps exact products such as 100 * 0.7 from rounding
    // down to 69.
    let cut = |frac: f64| ((rows as f64 * frac / total) + 1e-9).floor() as usize;
    let train = cut(ratios[0]).min(rows);
    let train_val = cut(ratios[0] + ratios[1]).clamp(train, rows);
    Ok([train, train_val - train, rows - train_val])
}

/// Contiguous train/val/test partition. Every part must hold at least
/// `min_rows` rows.
pub fn split_chronological(table: &SeriesTable, ratios: [f64; 3], min_rows: usize) -> Result<Splits> {
    let [a, b, _] = split_sizes(table.rows(), ratios)?;
    let splits = Splits {
        train: table.slice_rows(0, a),
        val: table.slice_rows(a, a + b),
        test: table.slice_rows(a + b, table.rows()),
    };
    for split in Split::ALL {
        let rows = splits.get(split).rows();
        if rows < min_rows {
            return Err(Error::Data(format!(
                "{} split has {rows} rows but at least {min_rows} (input + horizon) are needed",
                split.name()
            )));
        }
    }
    Ok(splits)
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of `table`; channels with zero spread get std 1.
    pub fn fit(table: &SeriesTable) -> Result<Self> {
        let (rows, c) = (table.rows(), table.channels());
        if rows == 0 {
            return Err(Error::Data("cannot compute statistics of an empty split".to_string()));
        }
        let mut mean = vec![0.0; c];
        for row in table.values.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in table.values.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` applied to `[..., C]` values.
    pub fn standardize(&self, values: &Tensor) -> Tensor {
        self.apply(values, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, values: &Tensor) -> Tensor {
        self.apply(values, |v, m, s| v * s + m)
    }

    fn apply(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.channels();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.mean[i % c], self.std[i % c]);
        }
        out
    }
}

/// Sliding windows over one standardised split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub split: Split,
    pub seq_len: usize,
    pub pred_len: usize,
    /// Standardised `[rows, C]`.
    series: Tensor,
    offsets: Vec<usize>,
    pub stats: ChannelStats,
}

/// Number of windows: `floor((rows - L - T) / stride) + 1`.
pub fn window_count(rows: usize, seq_len: usize, pred_len: usize, stride: usize) -> usize {
    if rows < seq_len + pred_len || stride == 0 {
        0
    } else {
        (rows - seq_len - pred_len) / stride + 1
    }
}

pub fn make_windows(
    table: &SeriesTable,
    split: Split,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
    stats: &ChannelStats,
) -> Result<WindowedDataset> {
    if seq_len == 0 || pred_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive (L={seq_len}, T={pred_len}, stride={stride})"
        )));
    }
    if stats.channels() != table.channels() {
        return Err(Error::Data(format!(
            "statistics cover {} channels but the {} split has {}",
            stats.channels(),
            split.name(),
            table.channels()
        )));
    }
    let rows = table.rows();
    if rows < seq_len + pred_len {
        return Err(Error::Data(format!(
            "{} split has {rows} rows, fewer than input + horizon = {}",
            split.name(),
            seq_len + pred_len
        )));
    }
    let count = window_count(rows, seq_len, pred_len, stride);
    Ok(WindowedDataset {
        split,
        seq_len,
        pred_len,
        series: stats.standardize(&table.values),
        offsets: (0..count).map(|i| i * stride).collect(),
        stats: stats.clone(),
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.series.shape()[1]
    }

    /// Starting row of every window's input.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn rows(&self, start: usize, len: usize) -> &[f64] {
        let c = self.channels();
        &self.series.data()[start * c..(start + len) * c]
    }

    /// `[L, C]` input of window `i`.
    pub fn input(&self, i: usize) -> Tensor {
        let data = self.rows(self.offsets[i], self.seq_len).to_vec();
        Tensor::from_parts(vec![self.seq_len, self.channels()], data)
    }

    /// `[T, C]` target of window `i`, starting right after its input.
    pub fn target(&self, i: usize) -> Tensor {
        let data = self.rows(self.offsets[i] + self.seq_len, self.pred_len).to_vec();
        Tensor::from_parts(vec![self.pred_len, self.channels()], data)
    }

    /// Stacked `([B, L, C], [B, T, C])` for the given window indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let c = self.channels();
        let mut x = Vec::with_capacity(indices.len() * self.seq_len * c);
        let mut y = Vec::with_capacity(indices.len() * self.pred_len * c);
        for &i in indices {
            let o = self.offsets[i];
            x.extend_from_slice(self.rows(o, self.seq_len));
            y.extend_from_slice(self.rows(o + self.seq_len, self.pred_len));
        }
        (
            Tensor::from_parts(vec![indices.len(), self.seq_len, c], x),
            Tensor::from_parts(vec![indices.len(), self.pred_len, c], y),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sine,
    SineTrend,
    LevelShift,
    FreqShift,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SynthKind::Sine),
            "sine_trend" => Ok(SynthKind::SineTrend),
            "level_shift" => Ok(SynthKind::LevelShift),
            "freq_shift" => Ok(SynthKind::FreqShift),
            other => Err(Error::Config(format!(
                "unknown series kind '{other}' (expected sine, sine_trend, level_shift or freq_shift)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Period in rows.
    pub period: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Added per row by `sine_trend`.
    pub slope: f64,
    /// Row where `level_shift` and `freq_shift` take effect; defaults to
    /// 85% of the series.
    pub shift_row: Option<usize>,
    /// Step height of `level_shift`.
    pub shift_magnitude: f64,
    /// Period after the switch in `freq_shift`.
    pub period_after: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            period: 24.0,
            noise: 0.0,
            slope: 0.001,
            shift_row: None,
            shift_magnitude: 2.0,
            period_after: 12.0,
        }
    }
}

/// Deterministic synthetic series. Channel `c` is phase-shifted by
/// `pi * c / C`; channel 0 starts at phase zero.
pub fn synth_series(
    kind: SynthKind,
    rows: usize,
    channels: usize,
    seed: u64,
    p: &SynthParams,
) -> Result<SeriesTable> {
    if rows == 0 || channels == 0 {
        return Err(Error::Config("synthetic series needs rows and channels > 0".to_string()));
    }
    if !(p.period > 0.0 && p.period_after > 0.0 && p.noise >= 0.0) {
        return Err(Error::Config(format!(
            "periods must be positive and noise non-negative: {p:?}"
        )));
    }
    let shift_row = p.shift_row.unwrap_or(rows * 85 / 100);
    let tau = std::f64::consts::TAU;
    let normal = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut rng = SeedStream::new(seed).rng();

    // Phase advances by 2*pi/period per row, so a period switch is continuous.
    let mut phase = 0.0;
    let mut base = Vec::with_capacity(rows);
    for t in 0..rows {
        base.push(phase);
        let period = if kind == SynthKind::FreqShift && t + 1 >= shift_row {
            p.period_after
        } else {
            p.period
        };
        phase += tau / period;
    }

    let mut values = Vec::with_capacity(rows * channels);
    for (t, phase) in base.iter().enumerate() {
        for c in 0..channels {
            let offset = std::f64::consts::PI * c as f64 / channels as f64;
            let mut v = (phase + offset).sin();
            match kind {
                SynthKind::SineTrend => v += p.slope * t as f64,
                SynthKind::LevelShift if t >= shift_row => v += p.shift_magnitude,
                _ => {}
            }
            if p.noise > 0.0 {
                v += normal.sample(&mut rng);
            }
            values.push(v);
        }
    }
    SeriesTable::new(
        Tensor::from_parts(vec![rows, channels], values),
        (0..channels).map(|c| format!("ch{c}")).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: usize, channels: usize) -> SeriesTable {
        SeriesTable::new(
            Tensor::from_fn([rows, channels], |i| (i[0] * channels + i[1]) as f64),
            (0..channels).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn reads_header_and_timestamps() {
        let text = "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4.5\n2020-01-03,-1,0\n";
        let t = read_csv(text.as_bytes(), true, TimestampColumn::Auto).unwrap();
        assert_eq!(t.values.shape(), &[3, 2]);
        assert_eq!(t.channel_names, ["a", "b"]);
        assert_eq!(t.timestamps.as_ref().unwrap()[1], "2020-01-02");
        assert_eq!(t.values.data(), &[1.0, 2.0, 3.0, 4.5, -1.0, 0.0]);
    }

    #[test]
    fn numeric_first_column_is_a_channel() {
        let t = read_csv("1,2\n3,4\n".as_bytes(), false, TimestampColumn::Auto).unwrap();
        assert_eq!(t.values.shape(), &[2, 2]);
        assert!(t.timestamps.is_none());
        let forced = read_csv("1,2\n3,4\n".as_bytes(), false, TimestampColumn::Present).unwrap();
        assert_eq!(forced.values.shape(), &[2, 1]);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let text = "date,a,b\n2020-01-01,1,abc\n2020-01-02,3,4\n";
        let err = read_csv(text.as_bytes(), true, TimestampColumn::Auto).unwrap_err().to_string();
        assert!(err.contains("row 2, column 3"), "{err}");
        assert!(err.contains("abc"));
    }

    #[test]
    fn ragged_row_is_rejected() {
        let err = read_csv("1,2\n3\n".as_bytes(), false, TimestampColumn::Auto).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert!(read_csv("1,nan\n".as_bytes(), false, TimestampColumn::Absent).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut t = table(5, 3);
        t.values = t.values.map(|v| v / 7.0 + 1e-13);
        t.timestamps = Some((0..5).map(|i| format!("t{i}")).collect());
        let mut buf = Vec::new();
        t.write_csv_to(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), true, TimestampColumn::Auto).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(100, [6.0, 2.0, 2.0]).unwrap(), [60, 20, 20]);
        assert_eq!(split_sizes(100, [0.7, 0.1, 0.2]).unwrap(), [70, 10, 20]);
        assert_eq!(split_sizes(10, [6.0, 2.0, 2.0]).unwrap(), [6, 2, 2]);
        assert_eq!(split_sizes(17420, [6.0, 2.0, 2.0]).unwrap(), [10452, 3484, 3484]);
        assert_eq!(split_sizes(101, [6.0, 2.0, 2.0]).unwrap(), [60, 20, 21]);
        assert!(split_sizes(10, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn short_split_is_named() {
        let err = split_chronological(&table(600, 1), [6.0, 2.0, 2.0], 192).unwrap_err();
        assert!(err.to_string().contains("val split"), "{err}");
    }

    #[test]
    fn window_counts() {
        let stats = ChannelStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let w = make_windows(&table(200, 1), Split::Train, 96, 96, 1, &stats).unwrap();
        assert_eq!(w.len(), 9);
        assert_eq!(make_windows(&table(192, 1), Split::Train, 96, 96, 1, &stats).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&table(191, 1), Split::Train, 96, 96, 1, &stats),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn windows_are_contiguous_and_standardised() {
        let t = table(12, 2);
        let stats = ChannelStats {
            mean: vec![1.0, 2.0],
            std: vec![2.0, 4.0],
        };
        let w = make_windows(&t, Split::Val, 3, 2, 2, &stats).unwrap();
        assert_eq!(w.offsets(), &[0, 2, 4, 6]);
        let (x, y) = w.batch(&[1]);
        // Input rows 2..5, target rows 5..7 of channel 0: values 4,6,8 | 10,12.
        assert_eq!(x.get(&[0, 0, 0]), (4.0 - 1.0) / 2.0);
        assert_eq!(y.get(&[0, 0, 0]), (10.0 - 1.0) / 2.0);
        assert_eq!(y.get(&[0, 1, 1]), (13.0 - 2.0) / 4.0);
        assert_eq!(w.input(1), x.reshape([3, 2]).unwrap());
    }

    #[test]
    fn stats_use_population_std_and_guard_constants() {
        let t = SeriesTable::new(
            Tensor::new([4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let s = ChannelStats::fit(&t).unwrap();
        assert_eq!(s.mean, [2.5, 5.0]);
        assert!((s.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.std[1], 1.0);
        let z = s.standardize(&t.values);
        assert_eq!(s.destandardize(&z), t.values);
    }

    #[test]
    fn sine_closed_form() {
        let t = synth_series(SynthKind::Sine, 100, 2, 0, &SynthParams::default()).unwrap();
        assert_eq!(t.rows(), 100);
        assert!(t.values.get(&[0, 0]).abs() < 1e-15);
        assert!((t.values.get(&[6, 0]) - 1.0).abs() < 1e-12);
        assert!((t.values.get(&[0, 1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn level_shift_moves_the_mean() {
        let p = SynthParams {
            shift_row: Some(480),
            shift_magnitude: 3.0,
            ..Default::default()
        };
        let t = synth_series(SynthKind::LevelShift, 960, 1, 0, &p).unwrap();
        let mean = |a: usize, b: usize| t.values.data()[a..b].iter().sum::<f64>() / (b - a) as f64;
        // Both halves span whole periods, so the sine averages out.
        assert!((mean(480, 960) - mean(0, 480) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn freq_shift_moves_the_dominant_bin() {
        use crate::engine::fft::{naive_dft, Direction};
        let t = synth_series(SynthKind::FreqShift, 960, 1, 0, &SynthParams {
            shift_row: Some(480),
            ..Default::default()
        })
        .unwrap();
        let peak = |seg: &[f64]| {
            let (re, im) = naive_dft(seg, &vec![0.0; seg.len()], Direction::Forward);
            (1..seg.len() / 2)
                .max_by(|&a, &b| {
                    let pa = re[a].hypot(im[a]);
                    let pb = re[b].hypot(im[b]);
                    pa.total_cmp(&pb)
                })
                .unwrap()
        };
        let v = t.values.data();
        assert_eq!(peak(&v[..480]), 20);
        assert_eq!(peak(&v[480..]), 40);
    }

    #[test]
    fn synth_is_deterministic_with_noise() {
        let p = SynthParams {
            noise: 0.1,
            ..Default::default()
        };
        let a = synth_series(SynthKind::SineTrend, 50, 3, 9, &p).unwrap();
        assert_eq!(a, synth_series(SynthKind::SineTrend, 50, 3, 9, &p).unwrap());
        assert_ne!(a, synth_series(SynthKind::SineTrend, 50, 3, 10, &p).unwrap());
    }

    proptest! {
        #[test]
        fn window_count_formula(rows in 1usize..400, l in 1usize..50, t in 1usize..50, stride in 1usize..7) {
            let stats = ChannelStats { mean: vec![0.0], std: vec![1.0] };
            let tab = table(rows, 1);
            match make_windows(&tab, Split::Train, l, t, stride, &stats) {
                Ok(w) => {
                    prop_assert!(rows >= l + t);
                    prop_assert_eq!(w.len(), (rows - l - t) / stride + 1);
                    let last = *w.offsets().last().unwrap();
                    prop_assert!(last + l + t <= rows);
                }
                Err(_) => prop_assert!(rows < l + t),
            }
        }

        #[test]
        fn splits_partition_the_table(rows in 3usize..3000, a in 1u32..10, b in 1u32..10, c in 1u32..10) {
            let tab = table(rows, 2);
            let s = split_chronological(&tab, [a as f64, b as f64, c as f64], 0).unwrap();
            let mut joined = s.train.values.data().to_vec();
            joined.extend_from_slice(s.val.values.data());
            joined.extend_from_slice(s.test.values.data());
            prop_assert_eq!(joined.as_slice(), tab.values.data());
        }
    }
}

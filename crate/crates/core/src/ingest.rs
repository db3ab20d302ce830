//! Price and return panels.
//!
//! Panels are dense `T × S` grids where `NaN` marks a missing entry. Dates are
//! strictly increasing trading days taken from the file; no calendar is
//! inferred.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Options for reading a wide price CSV.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub delimiter: u8,
    /// `chrono` format string for the first column.
    pub date_format: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { delimiter: b',', date_format: "%Y-%m-%d".to_string() }
    }
}

/// Closing prices, one column per ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    prices: DMatrix<f64>,
}

impl PricePanel {
    /// Builds a panel, enforcing strictly increasing dates, unique tickers,
    /// at least two rows and positive present prices.
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, prices: DMatrix<f64>) -> Result<Self> {
        check_axes(&dates, &tickers, &prices)?;
        if dates.len() < 2 {
            return Err(Error::Data("a price panel needs at least 2 rows".into()));
        }
        if let Some(bad) = prices.iter().find(|v| !v.is_nan() && !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Data(format!("price {bad} is not a positive finite number")));
        }
        Ok(Self { dates, tickers, prices })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    /// `T × S` prices with `NaN` for missing entries.
    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_series(&self) -> usize {
        self.tickers.len()
    }

    pub fn missing_count(&self) -> usize {
        self.prices.iter().filter(|v| v.is_nan()).count()
    }

    /// Fraction of missing entries in each column.
    pub fn missing_fractions(&self) -> Vec<f64> {
        let t = self.n_dates() as f64;
        self.prices
            .column_iter()
            .map(|c| c.iter().filter(|v| v.is_nan()).count() as f64 / t)
            .collect()
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self {
            dates: self.dates.clone(),
            tickers: keep.iter().map(|&j| self.tickers[j].clone()).collect(),
            prices: self.prices.select_columns(keep),
        }
    }
}

/// Percentage returns derived from a [`PricePanel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    returns: DMatrix<f64>,
    means: DVector<f64>,
}

impl ReturnsPanel {
    /// Wraps an existing return grid. `means` records what was removed during
    /// centering (zeros for an uncentered grid).
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        returns: DMatrix<f64>,
        means: DVector<f64>,
    ) -> Result<Self> {
        check_axes(&dates, &tickers, &returns)?;
        if means.len() != tickers.len() {
            return Err(Error::Dimension("one mean per series is required".into()));
        }
        if returns.iter().any(|v| v.is_infinite()) {
            return Err(Error::Data("returns must be finite or missing".into()));
        }
        Ok(Self { dates, tickers, returns, means })
    }

    /// Uncentered panel with zero recorded means.
    pub fn from_grid(dates: Vec<NaiveDate>, tickers: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        let s = tickers.len();
        Self::new(dates, tickers, returns, DVector::zeros(s))
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    /// `T × S` returns with `NaN` for missing entries.
    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn n_obs(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.returns.ncols()
    }

    pub fn missing_count(&self) -> usize {
        self.returns.iter().filter(|v| v.is_nan()).count()
    }

    /// Missing entries replaced by zero, the centered mean.
    pub fn imputed(&self) -> DMatrix<f64> {
        self.returns.map(|v| if v.is_nan() { 0.0 } else { v })
    }

    /// Subtracts each column's mean over present entries; the removed amount
    /// is added to the recorded means.
    pub fn centered(&self) -> Self {
        let mut returns = self.returns.clone();
        let mut means = self.means.clone();
        for (j, mut col) in returns.column_iter_mut().enumerate() {
            let present: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
            if present.is_empty() {
                continue;
            }
            let m = present.iter().sum::<f64>() / present.len() as f64;
            col.apply(|v| *v -= m);
            means[j] += m;
        }
        Self { dates: self.dates.clone(), tickers: self.tickers.clone(), returns, means }
    }

    /// Adds the recorded means back.
    pub fn decentered(&self) -> DMatrix<f64> {
        let mut out = self.returns.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let m = self.means[j];
            col.apply(|v| *v += m);
        }
        out
    }

    /// Equal-weighted cross-sectional mean per date over present entries.
    pub fn row_means(&self) -> Vec<f64> {
        self.returns
            .row_iter()
            .map(|r| {
                let (sum, count) = r
                    .iter()
                    .filter(|v| !v.is_nan())
                    .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                if count == 0 {
                    f64::NAN
                } else {
                    sum / count as f64
                }
            })
            .collect()
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self {
            dates: self.dates.clone(),
            tickers: keep.iter().map(|&j| self.tickers[j].clone()).collect(),
            returns: self.returns.select_columns(keep),
            means: DVector::from_iterator(keep.len(), keep.iter().map(|&j| self.means[j])),
        }
    }

    /// Reads a returns grid written by [`ReturnsPanel::write_csv`]. Recorded
    /// means are zero.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let (dates, tickers, grid) = read_wide(file, &ParseOptions::default())?;
        if dates.is_empty() {
            return Err(Error::Data("returns file has no rows".into()));
        }
        Self::from_grid(dates, tickers, grid)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_wide(file, &self.dates, &self.tickers, &self.returns)
    }
}

fn check_axes(dates: &[NaiveDate], tickers: &[String], grid: &DMatrix<f64>) -> Result<()> {
    if grid.nrows() != dates.len() || grid.ncols() != tickers.len() {
        return Err(Error::Dimension(format!(
            "grid is {}x{} but axes are {}x{}",
            grid.nrows(),
            grid.ncols(),
            dates.len(),
            tickers.len()
        )));
    }
    if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Data(format!("dates not strictly increasing at {}", w[1])));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = tickers.iter().find(|t| !seen.insert(t.as_str())) {
        return Err(Error::Data(format!("duplicate ticker {dup}")));
    }
    Ok(())
}

/// Loads a wide price CSV: a date column followed by one column per ticker.
/// Empty or unparseable cells, and non-positive prices, become missing.
pub fn load_price_csv(path: impl AsRef<Path>, config: &ParseOptions) -> Result<PricePanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_price_csv(file, config)
}

/// Reader-based variant of [`load_price_csv`].
pub fn read_price_csv<R: Read>(reader: R, config: &ParseOptions) -> Result<PricePanel> {
    let (dates, tickers, mut grid) = read_wide(reader, config)?;
    let mut dropped = 0usize;
    grid.apply(|v| {
        if !v.is_nan() && !(v.is_finite() && *v > 0.0) {
            *v = f64::NAN;
            dropped += 1;
        }
    });
    if dropped > 0 {
        log::warn!("{dropped} non-positive or non-finite prices treated as missing");
    }
    PricePanel::new(dates, tickers, grid)
}

fn parse_date(raw: &str, format: &str) -> Result<NaiveDate> {
    let raw = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(raw, format) {
        return Ok(d);
    }
    // Tolerate timestamps such as `2015-01-02T00:00:00` or `2015-01-02 00:00:00`.
    if raw.len() > 10 && raw.is_char_boundary(10) {
        if let Ok(d) = NaiveDate::parse_from_str(&raw[..10], format) {
            return Ok(d);
        }
    }
    Err(Error::Data(format!("unparseable date {raw:?}")))
}

fn read_wide<R: Read>(reader: R, config: &ParseOptions) -> Result<(Vec<NaiveDate>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(config.delimiter).has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Data("expected a date column and at least one series".into()));
    }
    let tickers: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = tickers.iter().find(|t| !seen.insert(t.as_str())) {
        return Err(Error::Data(format!("duplicate ticker {dup}")));
    }

    let mut rows: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let date = parse_date(record.get(0).unwrap_or_default(), &config.date_format)?;
        let values = record
            .iter()
            .skip(1)
            .map(|cell| cell.trim().parse::<f64>().ok().filter(|v| !v.is_nan()).unwrap_or(f64::NAN))
            .collect();
        rows.push((date, values));
    }
    rows.sort_by_key(|(d, _)| *d);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate date {}", w[0].0)));
    }
    let t = rows.len();
    let s = tickers.len();
    let grid = DMatrix::from_fn(t, s, |i, j| rows[i].1[j]);
    Ok((rows.into_iter().map(|(d, _)| d).collect(), tickers, grid))
}

pub(crate) fn write_wide<W: Write>(
    writer: W,
    dates: &[NaiveDate],
    columns: &[String],
    grid: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (i, d) in dates.iter().enumerate() {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        rec.extend(grid.row(i).iter().map(|v| fmt_cell(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

/// Shortest round-trip float formatting; missing values become empty cells.
pub fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:?}")
    }
}

/// Keeps exactly the series whose missing fraction is at most `threshold`,
/// preserving column order.
pub fn filter_missing(panel: &PricePanel, threshold: f64) -> Result<PricePanel> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let keep: Vec<usize> = panel
        .missing_fractions()
        .iter()
        .enumerate()
        .filter(|(_, f)| **f <= threshold)
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(format!("every series exceeds the {threshold} missing threshold")));
    }
    Ok(panel.select_columns(&keep))
}

/// How returns are derived from prices.
#[derive(Debug, Clone, Copy)]
pub struct ReturnOptions {
    /// Subtract each series' mean over present entries.
    pub center: bool,
    /// Multiply simple returns by 100 (percent points).
    pub percent: bool,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        Self { center: true, percent: true }
    }
}

/// Simple returns `scale·(P_t − P_{t−1})/P_{t−1}`; missing whenever either
/// price is missing. The result has one fewer row than the price panel.
pub fn compute_returns(panel: &PricePanel, opts: ReturnOptions) -> Result<ReturnsPanel> {
    let p = panel.prices();
    let (t, s) = p.shape();
    if t < 2 {
        return Err(Error::Data("returns need at least 2 price rows".into()));
    }
    let scale = if opts.percent { 100.0 } else { 1.0 };
    let grid = DMatrix::from_fn(t - 1, s, |i, j| {
        let (prev, cur) = (p[(i, j)], p[(i + 1, j)]);
        if prev.is_nan() || cur.is_nan() {
            f64::NAN
        } else {
            scale * (cur - prev) / prev
        }
    });
    for (j, col) in grid.column_iter().enumerate() {
        if col.iter().all(|v| v.is_nan()) {
            log::warn!("series {} has no computable returns", panel.tickers()[j]);
        }
    }
    let out = ReturnsPanel::from_grid(panel.dates()[1..].to_vec(), panel.tickers().to_vec(), grid)?;
    Ok(if opts.center { out.centered() } else { out })
}

/// `count` consecutive weekdays starting at (or after) `start`.
pub fn weekdays_from(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

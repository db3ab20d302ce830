//! Quarterly GDP nowcasting from daily factor paths.
//!
//! Daily factors are reduced to a monthly mean and standard deviation per
//! factor. Each quarter is explained by an intercept, the previous quarter's
//! growth and the indicators of its three months entered separately
//! (`3 × n × 2` regressors). Dates before the sample boundary draw on the
//! smoothed factor path and dates from the boundary onward on the filtered
//! path, so out-of-sample indicators never use later data.

use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, least_squares_min_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Quarter {
    pub year: i32,
    /// 1 to 4.
    pub quarter: u32,
}

impl Quarter {
    pub fn new(year: i32, quarter: u32) -> Result<Self> {
        if !(1..=4).contains(&quarter) {
            return Err(Error::InvalidArgument(format!("quarter {quarter} outside 1..=4")));
        }
        Ok(Self { year, quarter })
    }

    pub fn of_date(d: NaiveDate) -> Self {
        Self { year: d.year(), quarter: (d.month() - 1) / 3 + 1 }
    }

    pub fn prev(self) -> Self {
        if self.quarter == 1 {
            Self { year: self.year - 1, quarter: 4 }
        } else {
            Self { year: self.year, quarter: self.quarter - 1 }
        }
    }

    pub fn months(self) -> [YearMonth; 3] {
        let first = 3 * (self.quarter - 1) + 1;
        [0, 1, 2].map(|k| YearMonth { year: self.year, month: first + k })
    }

    /// Parses `2019Q3`, `2019-Q3` or `2019q3`.
    pub fn parse(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let (y, q) = up
            .split_once('Q')
            .ok_or_else(|| Error::InvalidArgument(format!("cannot parse quarter '{s}'")))?;
        let year = y.trim_end_matches('-').parse().map_err(|_| Error::InvalidArgument(format!("bad year in '{s}'")))?;
        let quarter = q.parse().map_err(|_| Error::InvalidArgument(format!("bad quarter in '{s}'")))?;
        Self::new(year, quarter)
    }
}

impl fmt::Display for Quarter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Q{}", self.year, self.quarter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of_date(d: NaiveDate) -> Self {
        Self { year: d.year(), month: d.month() }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{:02}", self.year, self.month)
    }
}

/// How growth is derived when the input holds GDP levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrowthKind {
    #[default]
    YearOnYear,
    QuarterOnQuarter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarterlySeries {
    pub quarters: Vec<Quarter>,
    /// Growth in percent points.
    pub values: Vec<f64>,
}

impl QuarterlySeries {
    pub fn new(quarters: Vec<Quarter>, values: Vec<f64>) -> Result<Self> {
        if quarters.len() != values.len() {
            return Err(Error::Dimension(format!("{} quarters for {} values", quarters.len(), values.len())));
        }
        if quarters.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("quarters must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("growth values must be finite".into()));
        }
        Ok(Self { quarters, values })
    }

    pub fn get(&self, q: Quarter) -> Option<f64> {
        self.quarters.binary_search(&q).ok().map(|i| self.values[i])
    }

    /// Reads `year,quarter,growth`, or `year,quarter,level` which is
    /// converted to percent growth according to `kind`.
    pub fn read_csv<R: Read>(reader: R, kind: GrowthKind) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(yc), Some(qc)) = (col("year"), col("quarter")) else {
            return Err(Error::Data("GDP file needs 'year' and 'quarter' columns".into()));
        };
        let (vc, is_level) = match (col("growth"), col("level")) {
            (Some(c), _) => (c, false),
            (None, Some(c)) => (c, true),
            _ => return Err(Error::Data("GDP file needs a 'growth' or 'level' column".into())),
        };
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("").to_string();
            let bad = |what: &str| Error::Data(format!("row {}: bad {what}", line + 2));
            let year: i32 = field(yc).parse().map_err(|_| bad("year"))?;
            let qtxt = field(qc);
            let quarter: u32 = qtxt.trim_start_matches(['Q', 'q']).parse().map_err(|_| bad("quarter"))?;
            let value: f64 = field(vc).parse().map_err(|_| bad("value"))?;
            rows.push((Quarter::new(year, quarter)?, value));
        }
        rows.sort_by_key(|r| r.0);
        let (quarters, values): (Vec<Quarter>, Vec<f64>) = rows.into_iter().unzip();
        if !is_level {
            return Self::new(quarters, values);
        }
        let levels = Self::new(quarters, values)?;
        let lag = |q: Quarter| match kind {
            GrowthKind::YearOnYear => Quarter { year: q.year - 1, quarter: q.quarter },
            GrowthKind::QuarterOnQuarter => q.prev(),
        };
        let (mut qs, mut vs) = (Vec::new(), Vec::new());
        for (&q, &v) in levels.quarters.iter().zip(&levels.values) {
            if let Some(base) = levels.get(lag(q)) {
                if base <= 0.0 {
                    return Err(Error::Data(format!("non-positive GDP level at {}", lag(q))));
                }
                qs.push(q);
                vs.push(100.0 * (v / base - 1.0));
            }
        }
        Self::new(qs, vs)
    }

    pub fn load(path: impl AsRef<Path>, kind: GrowthKind) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, kind)
    }
}

/// Which factor path a day's value is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathChoice {
    /// Smoothed before the boundary, filtered from the boundary on.
    Split,
    Smoothed,
    Filtered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonthlyIndicators {
    pub months: Vec<YearMonth>,
    /// `months × n` monthly means.
    pub mean: DMatrix<f64>,
    /// `months × n` monthly standard deviations (denominator `days − 1`,
    /// zero for one-day months).
    pub std: DMatrix<f64>,
    pub days: Vec<usize>,
}

impl MonthlyIndicators {
    pub fn n_factors(&self) -> usize {
        self.mean.ncols()
    }

    pub fn index_of(&self, m: YearMonth) -> Option<usize> {
        self.months.binary_search(&m).ok()
    }
}

/// Monthly mean and standard deviation of a single daily path.
pub fn monthly_stats(dates: &[NaiveDate], path: &DMatrix<f64>) -> Result<MonthlyIndicators> {
    if dates.len() != path.nrows() {
        return Err(Error::Dimension(format!("{} dates for {} factor rows", dates.len(), path.nrows())));
    }
    if dates.is_empty() {
        return Err(Error::Data("no trading days".into()));
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("factor dates must be strictly increasing".into()));
    }
    if path.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("factor path has non-finite values".into()));
    }
    let n = path.ncols();
    let mut months = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (t, d) in dates.iter().enumerate() {
        let ym = YearMonth::of_date(*d);
        if months.last() != Some(&ym) {
            months.push(ym);
            spans.push((t, t + 1));
        } else {
            spans.last_mut().expect("pushed above").1 = t + 1;
        }
    }
    let mut mean = DMatrix::zeros(months.len(), n);
    let mut std = DMatrix::zeros(months.len(), n);
    for (m, &(a, b)) in spans.iter().enumerate() {
        let k = (b - a) as f64;
        for j in 0..n {
            let block = path.view((a, j), (b - a, 1));
            let mu = block.sum() / k;
            mean[(m, j)] = mu;
            std[(m, j)] = if b - a > 1 {
                (block.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
        }
    }
    let days = spans.iter().map(|(a, b)| b - a).collect();
    Ok(MonthlyIndicators { months, mean, std, days })
}

/// Builds monthly indicators from the smoothed and filtered factor paths.
pub fn monthly_indicators(
    dates: &[NaiveDate],
    smoothed: &DMatrix<f64>,
    filtered: &DMatrix<f64>,
    boundary: NaiveDate,
    choice: PathChoice,
) -> Result<MonthlyIndicators> {
    if smoothed.shape() != filtered.shape() {
        return Err(Error::Dimension("smoothed and filtered paths differ in shape".into()));
    }
    let mut path = smoothed.clone();
    for (t, d) in dates.iter().enumerate().take(path.nrows()) {
        let use_filtered = match choice {
            PathChoice::Split => *d >= boundary,
            PathChoice::Smoothed => false,
            PathChoice::Filtered => true,
        };
        if use_filtered {
            path.row_mut(t).copy_from(&filtered.row(t));
        }
    }
    monthly_stats(dates, &path)
}

/// Inclusive training and test ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleWindow {
    pub train: (Quarter, Quarter),
    pub test: (Quarter, Quarter),
}

impl SampleWindow {
    pub fn new(train: (Quarter, Quarter), test: (Quarter, Quarter)) -> Result<Self> {
        if train.0 > train.1 || test.0 > test.1 {
            return Err(Error::InvalidArgument("window start after end".into()));
        }
        if test.0 <= train.1 {
            return Err(Error::InvalidArgument("test window must start after the training window".into()));
        }
        Ok(Self { train, test })
    }

    /// Training through the quarter before `boundary`, testing from the
    /// boundary's quarter through `end`.
    pub fn split_at(start: NaiveDate, boundary: NaiveDate, end: NaiveDate) -> Result<Self> {
        let b = Quarter::of_date(boundary);
        Self::new((Quarter::of_date(start), b.prev()), (b, Quarter::of_date(end)))
    }

    fn contains(range: (Quarter, Quarter), q: Quarter) -> bool {
        range.0 <= q && q <= range.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub quarter: Quarter,
    pub actual: f64,
    pub predicted: f64,
    pub in_sample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel {
    /// Intercept, lagged growth, then indicator coefficients in
    /// `regressors` order.
    pub coefficients: DVector<f64>,
    pub regressors: Vec<String>,
    /// Indicator columns dropped because they are zero on every training row.
    pub dropped: Vec<String>,
    pub predictions: Vec<Prediction>,
    pub in_sample_rmse: f64,
    /// `None` when the test window has no usable quarter.
    pub out_sample_rmse: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BridgeOptions {
    /// Z-score indicator regressors with training-window moments.
    pub standardize: bool,
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Dimension(format!("{} predictions for {} actuals", pred.len(), actual.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("RMSE of an empty sample".into()));
    }
    let mse = pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

struct Rows {
    quarters: Vec<Quarter>,
    y: Vec<f64>,
    lag: Vec<f64>,
    train: Vec<bool>,
}

fn usable_rows(gdp: &QuarterlySeries, window: &SampleWindow) -> Rows {
    let mut rows = Rows { quarters: Vec::new(), y: Vec::new(), lag: Vec::new(), train: Vec::new() };
    for (&q, &v) in gdp.quarters.iter().zip(&gdp.values) {
        let train = SampleWindow::contains(window.train, q);
        if !(train || SampleWindow::contains(window.test, q)) {
            continue;
        }
        if let Some(prev) = gdp.get(q.prev()) {
            rows.quarters.push(q);
            rows.y.push(v);
            rows.lag.push(prev);
            rows.train.push(train);
        }
    }
    rows
}

fn assemble(
    rows: &Rows,
    design: DMatrix<f64>,
    regressors: Vec<String>,
    dropped: Vec<String>,
    min_norm: bool,
) -> Result<BridgeModel> {
    let train_idx: Vec<usize> = (0..rows.y.len()).filter(|&i| rows.train[i]).collect();
    if train_idx.len() < design.ncols().max(3) {
        return Err(Error::Data(format!(
            "{} training quarters for {} coefficients",
            train_idx.len(),
            design.ncols()
        )));
    }
    let xt = design.select_rows(&train_idx);
    let yt = DVector::from_iterator(train_idx.len(), train_idx.iter().map(|&i| rows.y[i]));
    let coefficients = if min_norm { least_squares_min_norm(&xt, &yt)? } else { least_squares(&xt, &yt)? };
    let fitted = &design * &coefficients;
    let predictions: Vec<Prediction> = (0..rows.y.len())
        .map(|i| Prediction { quarter: rows.quarters[i], actual: rows.y[i], predicted: fitted[i], in_sample: rows.train[i] })
        .collect();
    let split = |flag: bool| -> (Vec<f64>, Vec<f64>) {
        predictions.iter().filter(|p| p.in_sample == flag).map(|p| (p.predicted, p.actual)).unzip()
    };
    let (pi, ai) = split(true);
    let (po, ao) = split(false);
    Ok(BridgeModel {
        coefficients,
        regressors,
        dropped,
        predictions,
        in_sample_rmse: rmse(&pi, &ai)?,
        out_sample_rmse: if po.is_empty() { None } else { Some(rmse(&po, &ao)?) },
    })
}

/// AR(1) baseline: growth on an intercept and the previous quarter's
/// realised growth. A constant history gives the minimum-norm solution,
/// which reproduces the constant.
pub fn fit_ar1(gdp: &QuarterlySeries, window: &SampleWindow) -> Result<BridgeModel> {
    let rows = usable_rows(gdp, window);
    let design = DMatrix::from_fn(rows.y.len(), 2, |i, j| if j == 0 { 1.0 } else { rows.lag[i] });
    assemble(&rows, design, vec!["intercept".into(), "lag_growth".into()], Vec::new(), true)
}

/// Names of the indicator regressors in layout order.
pub fn indicator_names(n_factors: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(6 * n_factors);
    for m in 1..=3 {
        for j in 1..=n_factors {
            names.push(format!("m{m}_f{j}_mean"));
            names.push(format!("m{m}_f{j}_std"));
        }
    }
    names
}

/// AR(1) augmented with month-resolved factor indicators. Quarters in either
/// window must have all three months of indicators.
pub fn fit_bridge(
    gdp: &QuarterlySeries,
    indicators: &MonthlyIndicators,
    window: &SampleWindow,
    opts: &BridgeOptions,
) -> Result<BridgeModel> {
    let rows = usable_rows(gdp, window);
    let n = indicators.n_factors();
    let names = indicator_names(n);
    let mut feats = DMatrix::zeros(rows.y.len(), names.len());
    for (r, q) in rows.quarters.iter().enumerate() {
        for (k, m) in q.months().iter().enumerate() {
            let idx = indicators
                .index_of(*m)
                .ok_or_else(|| Error::Data(format!("no trading days in {m} for quarter {q}")))?;
            for j in 0..n {
                feats[(r, k * 2 * n + 2 * j)] = indicators.mean[(idx, j)];
                feats[(r, k * 2 * n + 2 * j + 1)] = indicators.std[(idx, j)];
            }
        }
    }
    let train: Vec<usize> = (0..rows.y.len()).filter(|&i| rows.train[i]).collect();
    let (mut keep, mut dropped) = (Vec::new(), Vec::new());
    for (c, name) in names.iter().enumerate() {
        if train.iter().all(|&i| feats[(i, c)] == 0.0) {
            dropped.push(name.clone());
        } else {
            keep.push(c);
        }
    }
    let mut feats = feats.select_columns(&keep);
    if opts.standardize && !train.is_empty() {
        for mut col in feats.column_iter_mut() {
            let mu = train.iter().map(|&i| col[i]).sum::<f64>() / train.len() as f64;
            let var = train.iter().map(|&i| (col[i] - mu).powi(2)).sum::<f64>() / (train.len().max(2) - 1) as f64;
            let sd = var.sqrt();
            if sd > 0.0 {
                col.apply(|v| *v = (*v - mu) / sd);
            }
        }
    }
    let k = keep.len();
    let design = DMatrix::from_fn(rows.y.len(), 2 + k, |i, j| match j {
        0 => 1.0,
        1 => rows.lag[i],
        _ => feats[(i, j - 2)],
    });
    let mut regressors = vec!["intercept".to_string(), "lag_growth".to_string()];
    regressors.extend(keep.iter().map(|&c| names[c].clone()));
    assemble(&rows, design, regressors, dropped, false)
}

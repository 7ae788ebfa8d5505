//! Loading and validating reported series and schedules.
//!
//! Every series is a CSV with header `date,value`, ISO-8601 dates and one
//! row per day. An empty value or `NA` marks a missing day. The delay
//! distribution file has header `lag,probability` with lags 1, 2, ….

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::dynamics::{DelayDistribution, IfrSchedule, Schedules};
use crate::error::{Error, Result};
use crate::observation::Observation;

/// Default IFR values and the dates on which each later value takes over.
pub const DEFAULT_IFR_VALUES: [f64; 5] = [0.01035, 0.0095, 0.007245, 0.004, 0.002];
pub const DEFAULT_IFR_DATES: [&str; 4] = ["2020-07-18", "2020-10-01", "2021-01-30", "2021-06-01"];

/// Default mean and coefficient of variation of the infection-to-death delay.
pub const DELAY_MEAN: f64 = 17.8;
pub const DELAY_CV: f64 = 0.45;

/// A daily series with optional values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub start: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn end(&self) -> NaiveDate {
        self.start + chrono::Days::new(self.values.len().saturating_sub(1) as u64)
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.start + chrono::Days::new(i as u64)
    }

    /// Value on `date`, `None` if outside the series or missing.
    pub fn on(&self, date: NaiveDate) -> Option<f64> {
        let off = (date - self.start).num_days();
        if off < 0 {
            return None;
        }
        self.values.get(off as usize).copied().flatten()
    }
}

/// IFR step function expressed in calendar dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfrDates {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl Default for IfrDates {
    fn default() -> Self {
        Self {
            dates: DEFAULT_IFR_DATES.iter().map(|d| d.parse().expect("valid date")).collect(),
            values: DEFAULT_IFR_VALUES.to_vec(),
        }
    }
}

impl IfrDates {
    /// Day-indexed schedule for a model whose day 0 is `origin`.
    pub fn schedule(&self, origin: NaiveDate) -> Result<IfrSchedule> {
        if self.values.len() != self.dates.len() + 1 {
            return Err(Error::Validation("ifr needs one more value than change dates".into()));
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("ifr change dates must increase".into()));
        }
        let mut change_days = vec![];
        let mut values = vec![self.values[0]];
        for (d, &v) in self.dates.iter().zip(&self.values[1..]) {
            let off = (*d - origin).num_days();
            if off <= 0 {
                values[0] = v;
                change_days.clear();
                values.truncate(1);
            } else {
                change_days.push(off as usize);
                values.push(v);
            }
        }
        Ok(IfrSchedule { change_days, values })
    }
}

fn default_min_deaths() -> u64 {
    10
}

fn default_window() -> usize {
    28
}

/// Dataset description; paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub cases: PathBuf,
    pub deaths: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vaccinations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub under_reporting: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<PathBuf>,
    #[serde(default)]
    pub ifr: IfrDates,
    /// The fit starts on the first day with at least this many reported deaths.
    #[serde(default = "default_min_deaths")]
    pub start_min_deaths: u64,
    /// Days after the start whose deaths are treated as missing, because
    /// the incidence history that produces them predates the fit. Defaults
    /// to `window − 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_lead_in: Option<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
}

/// Aligned and validated data; day `t` of the model is `dates[start + t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dates: Vec<NaiveDate>,
    pub cases: Vec<Option<u64>>,
    pub deaths: Vec<Option<u64>>,
    /// Daily first vaccinations over `dates`, zero-filled.
    pub vaccinations: Vec<f64>,
    /// Under-reporting score over `dates`; empty means ≡ 1.
    pub under_reporting: Vec<f64>,
    pub delay: DelayDistribution,
    pub ifr: IfrDates,
    pub start: usize,
    pub start_min_deaths: u64,
    pub death_lead_in: usize,
    pub window: usize,
}

impl Dataset {
    pub fn origin(&self) -> NaiveDate {
        self.dates[self.start]
    }

    /// Number of model days.
    pub fn len(&self) -> usize {
        self.dates.len() - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observations on the model's day index, with the death lead-in masked.
    pub fn observations(&self) -> Vec<Observation> {
        (0..self.len())
            .map(|t| Observation {
                t,
                cases: self.cases[self.start + t],
                deaths: if t < self.death_lead_in {
                    None
                } else {
                    self.deaths[self.start + t]
                },
            })
            .collect()
    }

    /// Schedules on the model's day index.
    pub fn schedules(&self) -> Result<Schedules> {
        let s = Schedules {
            nu: self.vaccinations[self.start..].to_vec(),
            ifr: self.ifr.schedule(self.origin())?,
            ur: if self.under_reporting.is_empty() {
                vec![]
            } else {
                self.under_reporting[self.start..].to_vec()
            },
            delay: self.delay.clone(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Writes all series and a config that loads back to `self`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let first = self.dates[0];
        let opt_u = |v: &[Option<u64>]| v.iter().map(|x| x.map(|y| y as f64)).collect::<Vec<_>>();
        write_series(&dir.join("cases.csv"), first, &opt_u(&self.cases))?;
        write_series(&dir.join("deaths.csv"), first, &opt_u(&self.deaths))?;
        let some = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
        write_series(&dir.join("vaccinations.csv"), first, &some(&self.vaccinations))?;
        let ur = if self.under_reporting.is_empty() {
            None
        } else {
            write_series(&dir.join("under_reporting.csv"), first, &some(&self.under_reporting))?;
            Some(PathBuf::from("under_reporting.csv"))
        };
        write_delay(&dir.join("delay.csv"), &self.delay)?;
        let cfg = DatasetConfig {
            cases: "cases.csv".into(),
            deaths: "deaths.csv".into(),
            vaccinations: Some("vaccinations.csv".into()),
            under_reporting: ur,
            delay: Some("delay.csv".into()),
            ifr: self.ifr.clone(),
            start_min_deaths: self.start_min_deaths,
            death_lead_in: Some(self.death_lead_in),
            window: self.window,
        };
        let path = dir.join("dataset.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n")?;
        Ok(path)
    }
}

fn file_name(p: &Path) -> String {
    p.display().to_string()
}

/// Reads a `date,value` series, rejecting gaps, duplicates and negative values.
pub fn read_series(path: &Path) -> Result<DailySeries> {
    let name = file_name(path);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "date" || &header[1] != "value" {
        return Err(Error::Schema {
            file: name,
            row: 1,
            column: "header".into(),
            reason: "expected columns `date,value`".into(),
        });
    }
    let mut start = None;
    let mut prev: Option<NaiveDate> = None;
    let mut values = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let schema = |column: &str, reason: String| Error::Schema {
            file: name.clone(),
            row,
            column: column.into(),
            reason,
        };
        let date: NaiveDate = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|e| schema("date", format!("not an ISO date: {e}")))?;
        if let Some(p) = prev {
            let step = (date - p).num_days();
            if step < 1 {
                return Err(schema("date", "dates must increase".into()));
            }
            if step > 1 {
                return Err(Error::Gap {
                    file: name,
                    date: (p + chrono::Days::new(1)).to_string(),
                });
            }
        } else {
            start = Some(date);
        }
        prev = Some(date);
        let raw = rec.get(1).unwrap_or("");
        let v = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            let x: f64 = raw.parse().map_err(|e| schema("value", format!("not a number: {e}")))?;
            if !x.is_finite() {
                return Err(schema("value", "must be finite".into()));
            }
            if x < 0.0 {
                return Err(Error::Validation(format!("{name}: row {row}: negative value {x}")));
            }
            Some(x)
        };
        values.push(v);
    }
    let start = start.ok_or_else(|| Error::Schema {
        file: name,
        row: 1,
        column: "date".into(),
        reason: "no data rows".into(),
    })?;
    Ok(DailySeries { start, values })
}

pub fn write_series(path: &Path, start: NaiveDate, values: &[Option<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "value"])?;
    for (i, v) in values.iter().enumerate() {
        let d = start + chrono::Days::new(i as u64);
        w.write_record([d.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_delay(path: &Path) -> Result<DelayDistribution> {
    let name = file_name(path);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = vec![];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let schema = |column: &str, reason: String| Error::Schema {
            file: name.clone(),
            row,
            column: column.into(),
            reason,
        };
        let lag: usize = rec.get(0).unwrap_or("").parse().map_err(|e| schema("lag", format!("{e}")))?;
        if lag != i + 1 {
            return Err(schema("lag", format!("expected lag {}", i + 1)));
        }
        let p: f64 = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e| schema("probability", format!("{e}")))?;
        out.push(p);
    }
    let d = DelayDistribution(out);
    d.validate()?;
    Ok(d)
}

pub fn write_delay(path: &Path, d: &DelayDistribution) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lag", "probability"])?;
    for (i, p) in d.0.iter().enumerate() {
        w.write_record([(i + 1).to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Discretised Gamma delay over lags 1..window−1, renormalised.
///
/// Lag k receives the mass of [k − ½, k + ½) (lag 1 also takes [0, ½)).
pub fn default_delay_distribution(window: usize) -> Result<DelayDistribution> {
    if window < 2 {
        return Err(Error::Precondition("window must be at least 2".into()));
    }
    let raw = discretised_gamma(DELAY_MEAN, DELAY_CV, window - 1);
    let total: f64 = raw.iter().sum();
    Ok(DelayDistribution(raw.into_iter().map(|p| p / total).collect()))
}

/// Unnormalised discretised Gamma masses for lags 1..=n.
pub fn discretised_gamma(mean: f64, cv: f64, n: usize) -> Vec<f64> {
    let shape = 1.0 / (cv * cv);
    let g = Gamma::new(shape, shape / mean).expect("valid gamma");
    (1..=n)
        .map(|k| {
            let lo = if k == 1 { 0.0 } else { k as f64 - 0.5 };
            g.cdf(k as f64 + 0.5) - g.cdf(lo)
        })
        .collect()
}

/// First index with at least `min` reported deaths.
pub fn start_index(deaths: &[Option<u64>], min: u64) -> Option<usize> {
    deaths.iter().position(|d| d.is_some_and(|v| v >= min) || (min == 0 && d.is_none()))
}

fn counts(series: &DailySeries, file: &Path, dates: &[NaiveDate]) -> Result<Vec<Option<u64>>> {
    dates
        .iter()
        .map(|&d| match series.on(d) {
            None => Ok(None),
            Some(v) if v.fract() == 0.0 => Ok(Some(v as u64)),
            Some(v) => Err(Error::Validation(format!("{}: {d}: count {v} is not an integer", file_name(file)))),
        })
        .collect()
}

/// Loads a dataset from a JSON config.
pub fn load_dataset(config_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg: DatasetConfig = serde_json::from_str(&text)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    load_with(&cfg, base)
}

pub fn load_with(cfg: &DatasetConfig, base: &Path) -> Result<Dataset> {
    if cfg.window < 2 {
        return Err(Error::Validation("window must be at least 2".into()));
    }
    let cases_p = base.join(&cfg.cases);
    let deaths_p = base.join(&cfg.deaths);
    let cases_s = read_series(&cases_p)?;
    let deaths_s = read_series(&deaths_p)?;
    let first = cases_s.start.min(deaths_s.start);
    let last = cases_s.end().max(deaths_s.end());
    let n = (last - first).num_days() as usize + 1;
    let dates: Vec<NaiveDate> = (0..n).map(|i| first + chrono::Days::new(i as u64)).collect();
    let cases = counts(&cases_s, &cases_p, &dates)?;
    let deaths = counts(&deaths_s, &deaths_p, &dates)?;

    let vaccinations = match &cfg.vaccinations {
        Some(p) => {
            let s = read_series(&base.join(p))?;
            dates.iter().map(|&d| s.on(d).unwrap_or(0.0)).collect()
        }
        None => vec![0.0; n],
    };
    let under_reporting = match &cfg.under_reporting {
        Some(p) => {
            let path = base.join(p);
            let s = read_series(&path)?;
            dates
                .iter()
                .map(|&d| {
                    s.on(d).ok_or_else(|| Error::Gap {
                        file: file_name(&path),
                        date: d.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?
        }
        None => vec![],
    };
    let delay = match &cfg.delay {
        Some(p) => read_delay(&base.join(p))?,
        None => default_delay_distribution(cfg.window)?,
    };
    let start = start_index(&deaths, cfg.start_min_deaths).ok_or_else(|| {
        Error::Validation(format!("no day has at least {} reported deaths", cfg.start_min_deaths))
    })?;
    let ds = Dataset {
        dates,
        cases,
        deaths,
        vaccinations,
        under_reporting,
        delay,
        ifr: cfg.ifr.clone(),
        start,
        start_min_deaths: cfg.start_min_deaths,
        death_lead_in: cfg.death_lead_in.unwrap_or(cfg.window - 1),
        window: cfg.window,
    };
    ds.schedules()?;
    Ok(ds)
}

/// First model day by which cumulative reported deaths reach `min`,
/// clamped to `[1, T − 1]`.
pub fn default_t0(obs: &[Observation], min: u64) -> usize {
    let mut cum = 0;
    let mut t0 = obs.len().saturating_sub(1);
    for (t, o) in obs.iter().enumerate() {
        cum += o.deaths.unwrap_or(0);
        if cum >= min {
            t0 = t;
            break;
        }
    }
    t0.clamp(1, obs.len().saturating_sub(1).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn ifr_defaults() {
        let d = IfrDates::default();
        assert_eq!(d.values, vec![0.01035, 0.0095, 0.007245, 0.004, 0.002]);
        let s: Vec<String> = d.dates.iter().map(|d| d.to_string()).collect();
        assert_eq!(s, ["2020-07-18", "2020-10-01", "2021-01-30", "2021-06-01"]);
        let origin: NaiveDate = "2020-07-01".parse().unwrap();
        let sched = d.schedule(origin).unwrap();
        assert_eq!(sched.at(16), 0.01035);
        assert_eq!(sched.at(17), 0.0095);
        // origin past the first change: that segment is already active
        let sched = d.schedule("2020-08-01".parse().unwrap()).unwrap();
        assert_eq!(sched.at(0), 0.0095);
        assert_eq!(sched.values.len(), 4);
    }

    #[test]
    fn gap_names_the_missing_date() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "date,value\n2020-03-01,1\n2020-03-02,2\n2020-03-04,5\n");
        match read_series(&p) {
            Err(Error::Gap { date, .. }) => assert_eq!(date, "2020-03-03"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", "date,value\n2020-03-01,1\n2020-03-02,abc\n");
        match read_series(&p) {
            Err(Error::Schema { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "value");
            }
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "n.csv", "date,value\n2020-03-01,-1\n");
        assert!(matches!(read_series(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn start_rule() {
        let d = [Some(3), Some(7), Some(12), Some(30)];
        assert_eq!(start_index(&d, 10), Some(2));
        assert_eq!(start_index(&d, 0), Some(0));
        assert_eq!(start_index(&d, 100), None);
    }

    #[test]
    fn default_delay_shape() {
        let d = default_delay_distribution(28).unwrap();
        assert_eq!(d.0.len(), 27);
        assert!((d.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let wide = discretised_gamma(DELAY_MEAN, DELAY_CV, 400);
        let mean: f64 = wide.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        assert!((mean - 17.8).abs() < 0.1, "{mean}");
    }

    #[test]
    fn delay_override_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let d = DelayDistribution(vec![0.1, 0.2 / 3.0, std::f64::consts::PI / 10.0, 1e-17]);
        let p = dir.path().join("delay.csv");
        write_delay(&p, &d).unwrap();
        let back = read_delay(&p).unwrap();
        assert!(d.0.iter().zip(&back.0).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn load_serialise_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cases = String::from("date,value\n");
        let mut deaths = String::from("date,value\n");
        for i in 0..40 {
            let d: NaiveDate = "2020-10-01".parse::<NaiveDate>().unwrap() + chrono::Days::new(i);
            cases.push_str(&format!("{d},{}\n", if i == 5 { String::new() } else { (100 + i).to_string() }));
            deaths.push_str(&format!("{d},{}\n", i / 2));
        }
        write(dir.path(), "cases.csv", &cases);
        write(dir.path(), "deaths.csv", &deaths);
        write(dir.path(), "vacc.csv", "date,value\n2020-10-20,100\n2020-10-21,200.5\n");
        let cfg = write(
            dir.path(),
            "data.json",
            r#"{"cases":"cases.csv","deaths":"deaths.csv","vaccinations":"vacc.csv"}"#,
        );
        let a = load_dataset(&cfg).unwrap();
        assert_eq!(a.start, 20);
        assert_eq!(a.death_lead_in, 27);
        assert_eq!(a.vaccinations[18], 0.0);
        assert_eq!(a.vaccinations[19], 100.0);
        assert_eq!(a.cases[5], None);
        let out = tempfile::tempdir().unwrap();
        let p = a.write(out.path()).unwrap();
        let b = load_dataset(&p).unwrap();
        assert_eq!(a, b);
        let obs = b.observations();
        assert_eq!(obs.len(), 20);
        assert!(obs.iter().all(|o| o.deaths.is_none()));
    }

    #[test]
    fn cumulative_t0_rule() {
        let obs: Vec<Observation> = [3, 7, 12]
            .iter()
            .enumerate()
            .map(|(t, &d)| Observation {
                t,
                cases: None,
                deaths: Some(d),
            })
            .collect();
        assert_eq!(default_t0(&obs, 10), 1);
    }
}

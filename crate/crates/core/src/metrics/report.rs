use std::fmt::Write as _;

use super::SampleMetrics;
use crate::error::{Error, Result};

/// Columns that enter the rank average (lower is better in each).
pub const RANKED_COLUMNS: [&str; 4] = ["absrel", "delta1_err", "pe_fla", "pe_ori"];

const HEADER: &str = "model,dataset,absrel,delta1_err,pe_fla,pe_ori,scale,rank";

/// Mean metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub absrel: f64,
    pub delta1_err: f64,
    /// Centimetres; NaN when no sample had a scorable plane.
    pub pe_fla: f64,
    /// Degrees; NaN when no sample had a scorable plane.
    pub pe_ori: f64,
    /// Mean L1 alignment factor.
    pub scale: f64,
    pub rank: Option<f64>,
}

impl ReportRow {
    pub fn from_samples(model: &str, dataset: &str, samples: &[SampleMetrics]) -> Self {
        let mean = |f: &dyn Fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / samples.len() as f64;
        let planes: Vec<(f64, f64)> = samples.iter().filter_map(|s| s.planes).collect();
        let plane_mean = |f: fn(&(f64, f64)) -> f64| {
            if planes.is_empty() {
                f64::NAN
            } else {
                planes.iter().map(f).sum::<f64>() / planes.len() as f64
            }
        };
        Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            absrel: mean(&|s| s.absrel),
            delta1_err: mean(&|s| s.delta1_err),
            pe_fla: plane_mean(|p| p.0),
            pe_ori: plane_mean(|p| p.1),
            scale: mean(&|s| s.scale),
            rank: None,
        }
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "absrel" => Some(self.absrel),
            "delta1_err" => Some(self.delta1_err),
            "pe_fla" => Some(self.pe_fla),
            "pe_ori" => Some(self.pe_ori),
            "scale" => Some(self.scale),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.absrel >= 0.0
            && (0.0..=1.0).contains(&self.delta1_err)
            && (self.pe_ori.is_nan() || (0.0..=180.0).contains(&self.pe_ori));
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!(
                "metrics out of range in row {}/{}",
                self.model, self.dataset
            )))
        }
    }
}

/// Rows for one or more (model, dataset) pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for r in &self.rows {
            let rank = r.rank.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.model, r.dataset, r.absrel, r.delta1_err, r.pe_fla, r.pe_ori, r.scale, rank
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Data(format!("metrics CSV must start with `{HEADER}`")));
        }
        let rows = lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Data(format!("malformed metrics row `{line}`"));
                if f.len() != 8 {
                    return Err(bad());
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
                let row = ReportRow {
                    model: f[0].to_string(),
                    dataset: f[1].to_string(),
                    absrel: num(f[2])?,
                    delta1_err: num(f[3])?,
                    pe_fla: num(f[4])?,
                    pe_ori: num(f[5])?,
                    scale: num(f[6])?,
                    rank: if f[7].is_empty() { None } else { Some(num(f[7])?) },
                };
                row.validate()?;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }
}

/// Average rank of each report (one per model) over every ranked column of
/// every dataset. Rank 1 is best; tied values share their mean rank.
pub fn rank_models(reports: &[MetricsReport]) -> Result<Vec<f64>> {
    if reports.len() < 2 {
        return Err(Error::Data("ranking needs at least two reports".into()));
    }
    let datasets: Vec<&str> = reports[0].rows.iter().map(|r| r.dataset.as_str()).collect();
    if datasets.is_empty() {
        return Err(Error::Data("reports have no rows".into()));
    }
    for rep in &reports[1..] {
        let mut a: Vec<&str> = rep.rows.iter().map(|r| r.dataset.as_str()).collect();
        let mut b = datasets.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Data("reports cover different datasets".into()));
        }
    }
    let mut totals = vec![0.0; reports.len()];
    let mut cells = 0usize;
    for ds in &datasets {
        let rows: Vec<&ReportRow> = reports
            .iter()
            .map(|rep| rep.rows.iter().find(|r| r.dataset == *ds).expect("dataset sets match"))
            .collect();
        for col in RANKED_COLUMNS {
            let vals: Vec<f64> = rows.iter().map(|r| r.column(col).expect("known column")).collect();
            if vals.iter().any(|v| v.is_nan()) {
                return Err(Error::Data(format!("column {col} is missing on dataset {ds}")));
            }
            for (t, r) in totals.iter_mut().zip(mean_ranks(&vals)) {
                *t += r;
            }
            cells += 1;
        }
    }
    Ok(totals.into_iter().map(|t| t / cells as f64).collect())
}

/// Ascending ranks starting at 1, ties sharing the mean of their positions.
pub fn mean_ranks(vals: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

//! Dataset distribution summaries: queries per user, session lengths, and
//! sessions per user, as plot-ready CSV.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::logs::Session;

/// Five-number-ish summary plus the exact value histogram. `stddev` is the
/// population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
    /// (value, occurrences), ascending by value.
    pub histogram: Vec<(u64, usize)>,
}

impl DistributionSummary {
    pub fn from_values(values: impl IntoIterator<Item = u64>) -> Self {
        let mut values: Vec<u64> = values.into_iter().collect();
        values.sort_unstable();
        let count = values.len();
        if count == 0 {
            return DistributionSummary {
                count: 0,
                min: 0.0,
                max: 0.0,
                mean: 0.0,
                median: 0.0,
                stddev: 0.0,
                histogram: Vec::new(),
            };
        }
        let sum: u64 = values.iter().sum();
        let mean = sum as f64 / count as f64;
        let median = if count % 2 == 1 {
            values[count / 2] as f64
        } else {
            (values[count / 2 - 1] as f64 + values[count / 2] as f64) / 2.0
        };
        let variance = values
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        let mut histogram: BTreeMap<u64, usize> = BTreeMap::new();
        for &v in &values {
            *histogram.entry(v).or_default() += 1;
        }
        DistributionSummary {
            count,
            min: values[0] as f64,
            max: values[count - 1] as f64,
            mean,
            median,
            stddev: variance.sqrt(),
            histogram: histogram.into_iter().collect(),
        }
    }

    /// CSV with a summary block followed by `x,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("summary,count,{}\n", self.count));
        out.push_str(&format!("summary,min,{}\n", self.min));
        out.push_str(&format!("summary,max,{}\n", self.max));
        out.push_str(&format!("summary,mean,{}\n", self.mean));
        out.push_str(&format!("summary,median,{}\n", self.median));
        out.push_str(&format!("summary,stddev,{}\n", self.stddev));
        out.push_str("summary,stddev_kind,population\n");
        out.push_str("x,count\n");
        for (value, count) in &self.histogram {
            out.push_str(&format!("{value},{count}\n"));
        }
        out
    }
}

/// Queries per user, counted after click-through collapse.
pub fn queries_per_user(sessions: &[Session]) -> DistributionSummary {
    per_user(sessions, |s| s.queries.len() as u64)
}

/// Queries per session.
pub fn session_lengths(sessions: &[Session]) -> DistributionSummary {
    DistributionSummary::from_values(sessions.iter().map(|s| s.queries.len() as u64))
}

/// Sessions per user.
pub fn sessions_per_user(sessions: &[Session]) -> DistributionSummary {
    per_user(sessions, |_| 1)
}

fn per_user(sessions: &[Session], weight: impl Fn(&Session) -> u64) -> DistributionSummary {
    let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
    for s in sessions {
        *totals.entry(s.user.as_str()).or_default() += weight(s);
    }
    DistributionSummary::from_values(totals.into_values())
}

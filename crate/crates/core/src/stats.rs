//! Event-rate and duration summaries over a corpus.
//!
//! A normalized rate is a sequence's rate divided by the largest rate in
//! its group, so every group's values lie in `(0, 1]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_stream, Manifest};
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::synth::Handedness;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub duration_s: f64,
    pub count: usize,
    /// Events per second; equals `count` when `degenerate`.
    pub rate: f64,
    /// Zero duration (all events share one timestamp).
    pub degenerate: bool,
}

pub fn sequence_stats(stream: &EventStream) -> Result<SequenceStats> {
    let (Some(first), Some(last)) = (stream.first_t(), stream.last_t()) else {
        return Err(Error::EmptyStream);
    };
    let duration_s = (last - first) as f64 / 1e6;
    let count = stream.len();
    let degenerate = duration_s == 0.0;
    Ok(SequenceStats {
        duration_s,
        count,
        rate: if degenerate { count as f64 } else { count as f64 / duration_s },
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Subject,
    Class,
    Handedness,
}

impl FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" => Ok(GroupBy::Subject),
            "class" => Ok(GroupBy::Class),
            "handedness" => Ok(GroupBy::Handedness),
            other => Err(Error::config(format!("unknown group key {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub path: String,
    pub class: String,
    pub subject: Option<usize>,
    pub hands: Option<Handedness>,
    pub stats: SequenceStats,
}

impl SequenceRecord {
    fn key(&self, by: GroupBy) -> Result<String> {
        let missing = |what: &str| Error::MissingMetadata(format!("{}: no {what}", self.path));
        Ok(match by {
            GroupBy::Class => self.class.clone(),
            GroupBy::Subject => format!("subject{:02}", self.subject.ok_or_else(|| missing("subject"))?),
            GroupBy::Handedness => hands_name(self.hands.ok_or_else(|| missing("handedness"))?).into(),
        })
    }
}

fn hands_name(h: Handedness) -> &'static str {
    match h {
        Handedness::Unimanual => "unimanual",
        Handedness::Bimanual => "bimanual",
    }
}

/// Per-file statistics for every manifest entry.
pub fn corpus_records(manifest_file: &Path) -> Result<Vec<SequenceRecord>> {
    let manifest = Manifest::read(manifest_file)?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let stream = read_stream(&base.join(&e.path))?;
            let stats = sequence_stats(&stream).map_err(|err| match err {
                Error::EmptyStream => Error::Format(format!("{}: empty stream", e.path)),
                other => other,
            })?;
            Ok(SequenceRecord {
                path: e.path.clone(),
                class: manifest.classes[e.class].clone(),
                subject: e.subject,
                hands: e.hands,
                stats,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRate {
    pub path: String,
    pub rate: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group: String,
    pub mean_rate: f64,
    pub entries: Vec<NormalizedRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandednessComparison {
    /// Mean of rate / corpus-wide maximum rate.
    pub unimanual_mean: f64,
    pub bimanual_mean: f64,
    pub unimanual_count: usize,
    pub bimanual_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub group_by: GroupBy,
    pub groups: Vec<GroupRates>,
    /// Largest over smallest group mean rate.
    pub spread: f64,
    pub handedness: Option<HandednessComparison>,
}

impl RateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,path,rate,normalized\n");
        for g in &self.groups {
            for e in &g.entries {
                let _ = writeln!(out, "{},{},{},{}", g.group, e.path, e.rate, e.normalized);
            }
        }
        out
    }
}

/// Divides every value by the maximum; the maxima become exactly 1.
pub fn normalize_to_max(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    values.iter().map(|v| v / max).collect()
}

/// Groups sorted by key, entries by path, so input order never matters.
pub fn normalized_rates(records: &[SequenceRecord], group_by: GroupBy) -> Result<RateReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut groups: BTreeMap<String, Vec<&SequenceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.key(group_by)?).or_default().push(r);
    }
    let mut tables = Vec::with_capacity(groups.len());
    for (group, mut members) in groups {
        members.sort_by(|a, b| a.path.cmp(&b.path));
        let rates: Vec<f64> = members.iter().map(|r| r.stats.rate).collect();
        let normalized = normalize_to_max(&rates);
        tables.push(GroupRates {
            group,
            mean_rate: rates.iter().sum::<f64>() / rates.len() as f64,
            entries: members
                .iter()
                .zip(rates.iter().zip(&normalized))
                .map(|(r, (&rate, &normalized))| NormalizedRate {
                    path: r.path.clone(),
                    rate,
                    normalized,
                })
                .collect(),
        });
    }
    let means: Vec<f64> = tables.iter().map(|g| g.mean_rate).collect();
    let spread = means.iter().copied().fold(f64::MIN, f64::max) / means.iter().copied().fold(f64::MAX, f64::min);
    Ok(RateReport {
        group_by,
        groups: tables,
        spread,
        handedness: handedness_comparison(records),
    })
}

/// `None` unless every record carries handedness and both kinds occur.
pub fn handedness_comparison(records: &[SequenceRecord]) -> Option<HandednessComparison> {
    let max = records.iter().map(|r| r.stats.rate).fold(f64::MIN, f64::max);
    let (mut uni, mut bi) = ((0.0, 0), (0.0, 0));
    let mut sorted: Vec<&SequenceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for r in sorted {
        let slot = match r.hands? {
            Handedness::Unimanual => &mut uni,
            Handedness::Bimanual => &mut bi,
        };
        slot.0 += r.stats.rate / max;
        slot.1 += 1;
    }
    (uni.1 > 0 && bi.1 > 0).then(|| HandednessComparison {
        unimanual_mean: uni.0 / uni.1 as f64,
        bimanual_mean: bi.0 / bi.1 as f64,
        unimanual_count: uni.1,
        bimanual_count: bi.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationRow {
    pub class: String,
    /// Seconds per subject.
    pub per_subject: BTreeMap<String, f64>,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationTable {
    pub rows: Vec<DurationRow>,
}

impl DurationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,subject,duration_s\n");
        for row in &self.rows {
            for (s, d) in &row.per_subject {
                let _ = writeln!(out, "{},{},{}", row.class, s, d);
            }
        }
        out
    }
}

/// Cumulative duration per class split by subject. Classes without
/// sequences do not appear.
pub fn duration_histogram(records: &[SequenceRecord]) -> Result<DurationTable> {
    let mut by_class: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut sorted: Vec<&SequenceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for r in sorted {
        let subject = r.key(GroupBy::Subject)?;
        *by_class.entry(r.class.clone()).or_default().entry(subject).or_default() += r.stats.duration_s;
    }
    Ok(DurationTable {
        rows: by_class
            .into_iter()
            .map(|(class, per_subject)| DurationRow {
                total_s: per_subject.values().sum(),
                class,
                per_subject,
            })
            .collect(),
    })
}

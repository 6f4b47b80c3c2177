//! OpenMetrics text exposition: data model, parser and serializer.
//!
//! Only the `gauge`, `counter` and `unknown` types carry semantics. Families
//! declared with any other OpenMetrics type are read as `unknown` and their
//! samples keep their full sample names through [`Sample::suffix`].

mod parse;
mod write;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_exposition, parse_exposition_with_default};
pub use write::serialize_exposition;

/// Milliseconds since the Unix epoch.
pub type Timestamp = i64;

/// Media type used on every HTTP surface that carries an exposition.
pub const CONTENT_TYPE: &str = "application/openmetrics-text; version=1.0.0; charset=utf-8";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("syntax error at line {line}, column {column}: {reason}")]
    Syntax {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("semantic error: {0}")]
    Semantic(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("conflicting type or unit for family `{0}`")]
    MergeConflict(String),
    #[error("duplicate sample in family `{0}`")]
    DuplicateSample(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricType {
    Gauge,
    Counter,
    Unknown,
}

impl MetricType {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricType::Gauge => "gauge",
            MetricType::Counter => "counter",
            MetricType::Unknown => "unknown",
        }
    }

    /// Maps an OpenMetrics type token onto the supported subset.
    pub fn from_token(token: &str) -> Option<MetricType> {
        match token {
            "gauge" => Some(MetricType::Gauge),
            "counter" => Some(MetricType::Counter),
            "unknown" | "histogram" | "gaugehistogram" | "summary" | "stateset" | "info" => {
                Some(MetricType::Unknown)
            }
            _ => None,
        }
    }

    fn accepts_suffix(self, suffix: &str) -> bool {
        match self {
            MetricType::Gauge => suffix.is_empty(),
            MetricType::Counter => matches!(suffix, "" | "_total" | "_created"),
            MetricType::Unknown => {
                suffix.is_empty() || (suffix.len() > 1 && suffix.starts_with('_'))
            }
        }
    }
}

impl fmt::Display for MetricType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn is_metric_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == ':' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

pub fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_unit(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

/// Label pairs kept sorted by name, so equality is equality of canonical forms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct LabelSet(Vec<(String, String)>);

impl LabelSet {
    pub fn new() -> Self {
        LabelSet(Vec::new())
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut set = LabelSet::new();
        for (k, v) in pairs {
            let k = k.into();
            if set.get(&k).is_some() {
                return Err(CodecError::InvariantViolation(format!(
                    "duplicate label `{k}`"
                )));
            }
            set.insert(&k, v)?;
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.position(name).ok().map(|i| self.0[i].1.as_str())
    }

    /// Sets `name` to `value`, returning the previous value.
    pub fn insert(
        &mut self,
        name: &str,
        value: impl Into<String>,
    ) -> Result<Option<String>, CodecError> {
        if !is_label_name(name) {
            return Err(CodecError::InvariantViolation(format!(
                "invalid label name `{name}`"
            )));
        }
        let value = value.into();
        Ok(match self.position(name) {
            Ok(i) => Some(std::mem::replace(&mut self.0[i].1, value)),
            Err(i) => {
                self.0.insert(i, (name.to_string(), value));
                None
            }
        })
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.position(name).ok().map(|i| self.0.remove(i).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn position(&self, name: &str) -> Result<usize, usize> {
        self.0.binary_search_by(|(k, _)| k.as_str().cmp(name))
    }
}

impl TryFrom<Vec<(String, String)>> for LabelSet {
    type Error = CodecError;

    fn try_from(pairs: Vec<(String, String)>) -> Result<Self, Self::Error> {
        LabelSet::from_pairs(pairs)
    }
}

impl From<LabelSet> for Vec<(String, String)> {
    fn from(set: LabelSet) -> Self {
        set.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Part of the sample name after the family name (`_total`, `_bucket`, ...).
    /// Empty for plain samples.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub suffix: String,
    pub labels: LabelSet,
    pub value: f64,
    pub timestamp: Option<Timestamp>,
}

impl Sample {
    pub fn new(labels: LabelSet, value: f64, timestamp: Timestamp) -> Self {
        Sample {
            suffix: String::new(),
            labels,
            value,
            timestamp: Some(timestamp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFamily {
    pub name: String,
    #[serde(rename = "type")]
    pub mtype: MetricType,
    pub help: Option<String>,
    pub unit: Option<String>,
    pub samples: Vec<Sample>,
}

impl MetricFamily {
    pub fn new(name: impl Into<String>, mtype: MetricType) -> Self {
        MetricFamily {
            name: name.into(),
            mtype,
            help: None,
            unit: None,
            samples: Vec::new(),
        }
    }

    pub fn with_sample(mut self, sample: Sample) -> Self {
        self.samples.push(sample);
        self
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |reason: String| Err(CodecError::InvariantViolation(reason));
        if !is_metric_name(&self.name) {
            return bad(format!("invalid metric name `{}`", self.name));
        }
        if let Some(help) = &self.help {
            if help.contains('\n') {
                return bad(format!("help text of `{}` contains a newline", self.name));
            }
        }
        if let Some(unit) = &self.unit {
            if !is_unit(unit) {
                return bad(format!("invalid unit `{unit}`"));
            }
            if !self.name.ends_with(&format!("_{unit}")) {
                return bad(format!(
                    "family `{}` does not end with unit `{unit}`",
                    self.name
                ));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !self.mtype.accepts_suffix(&s.suffix)
                || !is_metric_name(&format!("{}{}", self.name, s.suffix))
            {
                return bad(format!(
                    "suffix `{}` not allowed for {} `{}`",
                    s.suffix, self.mtype, self.name
                ));
            }
            check_value(&self.name, self.mtype, s.value).map_err(CodecError::InvariantViolation)?;
            if matches!(s.timestamp, Some(t) if t < 0) {
                return bad(format!("negative timestamp in `{}`", self.name));
            }
            if !seen.insert((&s.suffix, &s.labels, s.timestamp)) {
                return bad(format!("duplicate (labels, timestamp) in `{}`", self.name));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_value(family: &str, mtype: MetricType, value: f64) -> Result<(), String> {
    if !value.is_finite() {
        return Err(format!("non-finite value in `{family}`"));
    }
    if mtype == MetricType::Counter && value < 0.0 {
        return Err(format!("negative counter value in `{family}`"));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Exposition {
    pub families: Vec<MetricFamily>,
}

impl Exposition {
    pub fn new() -> Self {
        Exposition::default()
    }

    pub fn family(&self, name: &str) -> Option<&MetricFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn sample_count(&self) -> usize {
        self.families.iter().map(|f| f.samples.len()).sum()
    }

    /// True when there is no sample to transmit.
    pub fn is_empty(&self) -> bool {
        self.sample_count() == 0
    }

    /// Gives every sample without a timestamp the supplied one.
    pub fn fill_timestamps(&mut self, ts: Timestamp) {
        for s in self.families.iter_mut().flat_map(|f| f.samples.iter_mut()) {
            s.timestamp.get_or_insert(ts);
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = (&MetricFamily, &Sample)> {
        self.families
            .iter()
            .flat_map(|f| f.samples.iter().map(move |s| (f, s)))
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let mut names = HashSet::new();
        for f in &self.families {
            if !names.insert(f.name.as_str()) {
                return Err(CodecError::InvariantViolation(format!(
                    "duplicate family `{}`",
                    f.name
                )));
            }
            f.validate()?;
        }
        Ok(())
    }
}

/// Concatenates expositions, merging families that share a name.
///
/// Family order is first occurrence; samples keep their input order.
pub fn merge_expositions<'a, I>(parts: I) -> Result<Exposition, CodecError>
where
    I: IntoIterator<Item = &'a Exposition>,
{
    let mut out = Exposition::new();
    let mut seen: Vec<HashSet<(String, LabelSet, Option<Timestamp>)>> = Vec::new();
    for part in parts {
        for fam in &part.families {
            let idx = match out.families.iter().position(|f| f.name == fam.name) {
                Some(i) => {
                    let existing = &mut out.families[i];
                    let unit_clash =
                        matches!((&existing.unit, &fam.unit), (Some(a), Some(b)) if a != b);
                    if existing.mtype != fam.mtype || unit_clash {
                        return Err(CodecError::MergeConflict(fam.name.clone()));
                    }
                    if existing.unit.is_none() {
                        existing.unit = fam.unit.clone();
                    }
                    if existing.help.is_none() {
                        existing.help = fam.help.clone();
                    }
                    i
                }
                None => {
                    out.families.push(MetricFamily {
                        samples: Vec::new(),
                        ..fam.clone()
                    });
                    seen.push(HashSet::new());
                    out.families.len() - 1
                }
            };
            for s in &fam.samples {
                if !seen[idx].insert((s.suffix.clone(), s.labels.clone(), s.timestamp)) {
                    return Err(CodecError::DuplicateSample(fam.name.clone()));
                }
                out.families[idx].samples.push(s.clone());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, &str)]) -> LabelSet {
        LabelSet::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn gauge(name: &str, samples: &[(f64, Timestamp)]) -> Exposition {
        let mut fam = MetricFamily::new(name, MetricType::Gauge);
        for &(v, t) in samples {
            fam.samples.push(Sample::new(LabelSet::new(), v, t));
        }
        Exposition {
            families: vec![fam],
        }
    }

    #[test]
    fn label_set_is_canonical() {
        let a = labels(&[("b", "2"), ("a", "1")]);
        let b = labels(&[("a", "1"), ("b", "2")]);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|(k, _)| k).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn label_set_rejects_bad_names_and_duplicates() {
        assert!(LabelSet::from_pairs([("9x", "v")]).is_err());
        assert!(LabelSet::from_pairs([("a", "1"), ("a", "2")]).is_err());
    }

    #[test]
    fn unit_must_suffix_name() {
        let mut fam = MetricFamily::new("disk_bytes", MetricType::Gauge);
        fam.unit = Some("bytes".into());
        assert!(fam.validate().is_ok());
        fam.unit = Some("seconds".into());
        assert!(fam.validate().is_err());
    }

    #[test]
    fn counter_rejects_negative() {
        let mut fam = MetricFamily::new("c", MetricType::Counter);
        fam.samples.push(Sample::new(LabelSet::new(), -1.0, 0));
        assert!(fam.validate().is_err());
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let e = gauge("m", &[(1.0, 0)]);
        assert_eq!(merge_expositions([&e, &Exposition::new()]).unwrap(), e);
    }

    #[test]
    fn merge_concatenates_same_family() {
        let merged =
            merge_expositions([&gauge("m", &[(1.0, 0)]), &gauge("m", &[(2.0, 1)])]).unwrap();
        assert_eq!(merged, gauge("m", &[(1.0, 0), (2.0, 1)]));
    }

    #[test]
    fn merge_detects_conflicts() {
        let mut counter = gauge("m", &[(1.0, 5)]);
        counter.families[0].mtype = MetricType::Counter;
        assert_eq!(
            merge_expositions([&gauge("m", &[]), &counter]),
            Err(CodecError::MergeConflict("m".into()))
        );
        assert_eq!(
            merge_expositions([&gauge("m", &[(1.0, 0)]), &gauge("m", &[(2.0, 0)])]),
            Err(CodecError::DuplicateSample("m".into()))
        );
    }

    #[test]
    fn fill_timestamps_keeps_existing() {
        let mut e = gauge("m", &[(1.0, 7)]);
        e.families[0].samples.push(Sample {
            timestamp: None,
            ..Sample::new(LabelSet::new(), 2.0, 0)
        });
        e.fill_timestamps(9);
        let ts: Vec<_> = e.families[0].samples.iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, [Some(7), Some(9)]);
    }
}

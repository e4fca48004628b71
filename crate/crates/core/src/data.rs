//! Time series containers and UCR / UEA archive ingestion.
//!
//! Every loaded channel is z-normalized per instance. Labels are kept in a
//! separate evaluation-only field; nothing in the training path reads them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Channels whose standard deviation falls below this are treated as constant.
const CONSTANT_STD: f64 = 1e-10;

/// One (possibly multivariate) series: `V` aligned channels of length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance {
    id: String,
    channels: Vec<Vec<f64>>,
}

impl TimeSeriesInstance {
    pub fn new(id: impl Into<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        let Some(first) = channels.first() else {
            return Err(Error::InvalidDataset(format!("instance {id} has no channels")));
        };
        let len = first.len();
        if len < 2 {
            return Err(Error::InvalidDataset(format!(
                "instance {id} has length {len}; at least 2 time steps are required"
            )));
        }
        for (v, channel) in channels.iter().enumerate() {
            if channel.len() != len {
                return Err(Error::InvalidDataset(format!(
                    "instance {id}: channel {v} has length {} but channel 0 has {len}",
                    channel.len()
                )));
            }
            if let Some(t) = channel.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "instance {id}: channel {v} has a missing or non-finite value at step {t}"
                )));
            }
        }
        Ok(Self { id, channels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn variables(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, variable: usize) -> &[f64] {
        &self.channels[variable]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    fn z_normalize(&mut self) {
        for channel in &mut self.channels {
            z_normalize(channel);
        }
    }
}

/// An ordered collection of equal-shape instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<TimeSeriesInstance>,
    labels: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(instances: Vec<TimeSeriesInstance>, labels: Option<Vec<String>>) -> Result<Self> {
        if instances.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "a dataset needs at least 2 instances, got {}",
                instances.len()
            )));
        }
        let (v, n) = (instances[0].variables(), instances[0].len());
        for inst in &instances[1..] {
            if inst.variables() != v {
                return Err(Error::InvalidDataset(format!(
                    "instance {} has {} variables, expected {v}",
                    inst.id(),
                    inst.variables()
                )));
            }
            if inst.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "instance {} has length {}, expected {n}; ragged datasets are not supported",
                    inst.id(),
                    inst.len()
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != instances.len() {
                return Err(Error::InvalidDataset(format!(
                    "{} labels for {} instances",
                    labels.len(),
                    instances.len()
                )));
            }
        }
        Ok(Self { instances, labels })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn variables(&self) -> usize {
        self.instances[0].variables()
    }

    pub fn series_len(&self) -> usize {
        self.instances[0].len()
    }

    pub fn instances(&self) -> &[TimeSeriesInstance] {
        &self.instances
    }

    pub fn instance(&self, index: usize) -> &TimeSeriesInstance {
        &self.instances[index]
    }

    /// Ground-truth labels; for evaluation only.
    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().collect::<BTreeSet<_>>().len())
    }

    /// Labels mapped to dense indices in order of first appearance of their sorted value.
    pub fn label_indices(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let distinct: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
        Some(
            labels
                .iter()
                .map(|l| distinct.binary_search(&l).expect("label present"))
                .collect(),
        )
    }

    /// Appends `other`, which must share this dataset's shape and label presence.
    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        let labels = match (self.labels.take(), other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => {
                return Err(Error::InvalidDataset(
                    "cannot concatenate labelled and unlabelled datasets".into(),
                ))
            }
        };
        self.instances.extend(other.instances);
        Dataset::new(self.instances, labels)
    }

    /// Per-instance, per-channel z-normalization.
    pub fn z_normalized(mut self) -> Self {
        for inst in &mut self.instances {
            inst.z_normalize();
        }
        self
    }
}

/// A contiguous slice `[start, start + len)` of one channel of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsequence {
    pub instance: usize,
    pub variable: usize,
    pub start: usize,
    pub values: Vec<f64>,
}

impl Subsequence {
    pub fn extract(
        dataset: &Dataset,
        instance: usize,
        variable: usize,
        start: usize,
        len: usize,
    ) -> Result<Self> {
        if instance >= dataset.len() || variable >= dataset.variables() {
            return Err(Error::Contract(format!(
                "no channel ({instance}, {variable}) in a {}x{} dataset",
                dataset.len(),
                dataset.variables()
            )));
        }
        let channel = dataset.instance(instance).channel(variable);
        if len == 0 || start + len > channel.len() {
            return Err(Error::Contract(format!(
                "window [{start}, {}) outside series of length {}",
                start + len,
                channel.len()
            )));
        }
        Ok(Self {
            instance,
            variable,
            start,
            values: channel[start..start + len].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Rescale to zero mean and unit (population) standard deviation. Constant
/// inputs become all zeros.
pub fn z_normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < CONSTANT_STD {
        values.iter_mut().for_each(|x| *x = 0.0);
    } else {
        values.iter_mut().for_each(|x| *x = (*x - mean) / std);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// One series per line, first field the class label, fields separated by
    /// tabs, commas, or runs of spaces.
    UcrTsv,
    /// The `.ts` format: `@` header lines, then `:`-separated channels per line.
    UeaTs,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ucr_tsv" | "ucr" | "tsv" => Ok(Format::UcrTsv),
            "uea_ts" | "uea" | "ts" => Ok(Format::UeaTs),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::UcrTsv => "ucr_tsv",
            Format::UeaTs => "uea_ts",
        }
    }

    /// Guess from the file extension: `.ts` is UEA, everything else UCR.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ts") => Format::UeaTs,
            _ => Format::UcrTsv,
        }
    }
}

/// Load and z-normalize a dataset.
pub fn load_dataset(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let raw = match format {
        Format::UcrTsv => parse_ucr(&text, &origin)?,
        Format::UeaTs => parse_uea(&text, &origin)?,
    };
    Ok(raw.z_normalized())
}

/// Integral numeric labels are canonicalized so `1`, `1.0` and `1e0` agree.
fn canonical_label(raw: &str) -> String {
    match raw.parse::<f64>() {
        Ok(x) if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 => format!("{}", x as i64),
        _ => raw.to_string(),
    }
}

fn parse_value(token: &str, origin: &str, line: usize) -> Result<f64> {
    let value: f64 = token.trim().parse().map_err(|_| Error::Parse {
        path: origin.to_string(),
        line,
        message: format!("cannot parse `{token}` as a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line,
            message: format!("missing or non-finite value `{token}`"),
        });
    }
    Ok(value)
}

/// Parse UCR text without normalization.
pub fn parse_ucr(text: &str, origin: &str) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    let mut expected_len = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line
            .split(|c: char| c == '\t' || c == ',' || c == ' ')
            .filter(|f| !f.is_empty());
        let label = fields.next().expect("non-empty line has a field");
        let values = fields
            .map(|f| parse_value(f, origin, lineno))
            .collect::<Result<Vec<_>>>()?;
        match expected_len {
            None => expected_len = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: lineno,
                    message: format!("series has {} values, previous lines have {n}", values.len()),
                })
            }
            Some(_) => {}
        }
        let instance = TimeSeriesInstance::new(instances.len().to_string(), vec![values]).map_err(
            |e| Error::Parse {
                path: origin.to_string(),
                line: lineno,
                message: e.to_string(),
            },
        )?;
        instances.push(instance);
        labels.push(canonical_label(label));
    }
    Dataset::new(instances, Some(labels))
}

#[derive(Default)]
struct UeaHeader {
    dimensions: Option<usize>,
    series_length: Option<usize>,
    class_label: Option<bool>,
    equal_length: Option<bool>,
}

/// Parse UEA `.ts` text without normalization.
pub fn parse_uea(text: &str, origin: &str) -> Result<Dataset> {
    let perr = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut header = UeaHeader::default();
    let mut in_data = false;
    let mut instances = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(rest) = line.strip_prefix('@') else {
                return Err(perr(lineno, "data line before @data".into()));
            };
            let mut parts = rest.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let value = parts.next();
            let flag = |v: Option<&str>| -> Result<bool> {
                match v.map(str::to_ascii_lowercase).as_deref() {
                    Some("true") => Ok(true),
                    Some("false") => Ok(false),
                    _ => Err(perr(lineno, format!("@{key} expects true or false"))),
                }
            };
            let count = |v: Option<&str>| -> Result<usize> {
                v.and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(lineno, format!("@{key} expects a positive integer")))
            };
            match key.as_str() {
                "data" => in_data = true,
                "dimensions" | "dimension" => header.dimensions = Some(count(value)?),
                "serieslength" => header.series_length = Some(count(value)?),
                "classlabel" => header.class_label = Some(flag(value)?),
                "equallength" => header.equal_length = Some(flag(value)?),
                "timestamps" => {
                    if flag(value)? {
                        return Err(perr(lineno, "timestamped .ts files are not supported".into()));
                    }
                }
                "univariate" => {
                    if flag(value)? && header.dimensions.is_none() {
                        header.dimensions = Some(1);
                    }
                }
                _ => {}
            }
            continue;
        }

        let mut fields: Vec<&str> = line.split(':').collect();
        let label = if header.class_label.unwrap_or(false) {
            let raw = fields.pop().unwrap_or("").trim();
            if raw.is_empty() {
                return Err(perr(lineno, "missing class label".into()));
            }
            Some(canonical_label(raw))
        } else {
            None
        };
        if let Some(d) = header.dimensions {
            if fields.len() != d {
                return Err(perr(
                    lineno,
                    format!("expected {d} dimensions, found {}", fields.len()),
                ));
            }
        }
        let channels = fields
            .iter()
            .map(|dim| {
                dim.split(',')
                    .map(|tok| parse_value(tok, origin, lineno))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(n) = header.series_length {
            if let Some(bad) = channels.iter().find(|c| c.len() != n) {
                return Err(perr(
                    lineno,
                    format!("channel has {} values, header declares {n}", bad.len()),
                ));
            }
        }
        let instance = TimeSeriesInstance::new(instances.len().to_string(), channels)
            .map_err(|e| perr(lineno, e.to_string()))?;
        if let Some(prev) = instances.first().map(|p: &TimeSeriesInstance| (p.variables(), p.len())) {
            if prev != (instance.variables(), instance.len()) {
                return Err(perr(
                    lineno,
                    format!(
                        "instance shape {}x{} differs from {}x{}; ragged datasets are not supported",
                        instance.variables(),
                        instance.len(),
                        prev.0,
                        prev.1
                    ),
                ));
            }
        }
        instances.push(instance);
        if let Some(l) = label {
            labels.push(l);
        }
    }
    if !in_data {
        return Err(perr(text.lines().count(), "no @data section".into()));
    }
    if header.equal_length == Some(false) {
        return Err(Error::InvalidDataset(
            "unequal-length datasets are not supported".into(),
        ));
    }
    let labels = header.class_label.unwrap_or(false).then_some(labels);
    Dataset::new(instances, labels)
}

/// Serialize in the given format. Unlabelled datasets written as UCR get label `0`.
pub fn format_dataset(dataset: &Dataset, format: Format) -> String {
    let mut out = String::new();
    let label = |i: usize| dataset.labels().map(|l| l[i].as_str());
    match format {
        Format::UcrTsv => {
            for (i, inst) in dataset.instances().iter().enumerate() {
                out.push_str(label(i).unwrap_or("0"));
                for x in inst.channel(0) {
                    write!(out, "\t{x}").unwrap();
                }
                out.push('\n');
            }
        }
        Format::UeaTs => {
            let labelled = dataset.labels().is_some();
            writeln!(out, "@problemName dataset").unwrap();
            writeln!(out, "@timeStamps false").unwrap();
            writeln!(out, "@missing false").unwrap();
            writeln!(out, "@univariate {}", dataset.variables() == 1).unwrap();
            writeln!(out, "@dimensions {}", dataset.variables()).unwrap();
            writeln!(out, "@equalLength true").unwrap();
            writeln!(out, "@seriesLength {}", dataset.series_len()).unwrap();
            if labelled {
                let classes: BTreeSet<&String> = dataset.labels().unwrap().iter().collect();
                let names: Vec<&str> = classes.into_iter().map(String::as_str).collect();
                writeln!(out, "@classLabel true {}", names.join(" ")).unwrap();
            } else {
                writeln!(out, "@classLabel false").unwrap();
            }
            writeln!(out, "@data").unwrap();
            for (i, inst) in dataset.instances().iter().enumerate() {
                let dims: Vec<String> = inst
                    .channels()
                    .iter()
                    .map(|c| c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                out.push_str(&dims.join(":"));
                if let Some(l) = label(i) {
                    write!(out, ":{l}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_dataset(dataset, format)).map_err(|e| Error::io(path, e))
}

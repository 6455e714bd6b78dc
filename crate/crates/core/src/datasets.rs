//! Feature datasets: synthetic shifted domain pairs, CSV I/O and
//! stratified train/test splits.
//!
//! CSV layout: an optional metadata comment line
//! `# num_classes=<C> domain=<tag>`, a header `f0,...,f{d-1}[,label]`, then
//! one row per sample. Floats are written with 17 significant digits.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    domain_tag: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} feature rows",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain_tag: domain_tag.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or an error naming what needed them.
    pub fn require_labels(&self, purpose: &str) -> Result<&[usize]> {
        self.labels().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{purpose} needs a labeled dataset but '{}' has no labels",
                self.domain_tag
            ))
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same features with labels dropped.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = tag.into();
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
        }
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|labels| {
            let mut counts = vec![0; self.num_classes];
            for &l in labels {
                counts[l] += 1;
            }
            counts
        })
    }
}

/// Parameters of a rotated/translated Gaussian-mixture domain pair.
///
/// Class centers sit on a circle in the first two feature dimensions with
/// `class_separation` as the distance between neighbouring centers (on a
/// line when `feature_dim == 1`). The target domain rotates the centers by
/// `shift_rotation_deg` in that plane and adds `shift_translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShiftSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub shift_rotation_deg: f64,
    /// Empty means no translation.
    pub shift_translation: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DomainShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 2,
            samples_per_class: 500,
            class_separation: 4.0,
            shift_rotation_deg: 30.0,
            shift_translation: Vec::new(),
            noise_sigma: 0.6,
            seed: 0,
        }
    }
}

impl DomainShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1");
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be >= 1");
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be > 0");
        }
        if !(0.0..360.0).contains(&self.shift_rotation_deg) {
            return bad("shift_rotation_deg must lie in [0, 360)");
        }
        if !self.class_separation.is_finite() {
            return bad("class_separation must be finite");
        }
        if !self.shift_translation.is_empty() && self.shift_translation.len() != self.feature_dim
        {
            return bad("shift_translation length must equal feature_dim");
        }
        if self.feature_dim < 2 && self.shift_rotation_deg != 0.0 {
            return Err(Error::RotationNeedsTwoDims);
        }
        Ok(())
    }

    /// Unshifted class centers, one row per class.
    pub fn class_centers(&self) -> Matrix {
        let c = self.num_classes;
        let mut centers = Matrix::zeros(c, self.feature_dim);
        if self.feature_dim == 1 {
            let offset = (c as f64 - 1.0) * self.class_separation / 2.0;
            for k in 0..c {
                centers[(k, 0)] = k as f64 * self.class_separation - offset;
            }
        } else if c > 1 {
            let radius = self.class_separation / (2.0 * (PI / c as f64).sin());
            for k in 0..c {
                let angle = 2.0 * PI * k as f64 / c as f64;
                centers[(k, 0)] = radius * angle.cos();
                centers[(k, 1)] = radius * angle.sin();
            }
        }
        centers
    }

    /// Applies the target-domain rotation and translation to a point.
    pub fn shift_point(&self, x: &mut [f64]) {
        if self.shift_rotation_deg != 0.0 {
            let (s, c) = self.shift_rotation_deg.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.shift_translation) {
            *v += t;
        }
    }
}

/// Draws one domain: `samples_per_class` Gaussian samples around each class
/// center (shifted when `shifted`), with noise from RNG stream `noise_stream`
/// of the spec seed. Rows are grouped by class.
pub fn sample_domain(
    spec: &DomainShiftSpec,
    shifted: bool,
    noise_stream: u64,
    tag: &str,
) -> Result<Dataset> {
    spec.validate()?;
    let mut centers = spec.class_centers();
    if shifted {
        for k in 0..spec.num_classes {
            spec.shift_point(centers.row_mut(k));
        }
    }
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Matrix::zeros(n, spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    let mut rng = Rng::with_stream(spec.seed, noise_stream);
    for k in 0..spec.num_classes {
        for s in 0..spec.samples_per_class {
            let row = features.row_mut(k * spec.samples_per_class + s);
            for (v, mu) in row.iter_mut().zip(centers.row(k)) {
                *v = mu + spec.noise_sigma * rng.normal();
            }
            labels.push(k);
        }
    }
    Dataset::new(features, Some(labels), spec.num_classes, tag)
}

pub const SOURCE_NOISE_STREAM: u64 = 1;
pub const TARGET_NOISE_STREAM: u64 = 2;

/// Labeled source and shifted target domains, deterministic in `spec.seed`.
pub fn generate_domain_pair(spec: &DomainShiftSpec) -> Result<(Dataset, Dataset)> {
    let source = sample_domain(spec, false, SOURCE_NOISE_STREAM, "source")?;
    let target = sample_domain(spec, true, TARGET_NOISE_STREAM, "target")?;
    Ok((source, target))
}

/// Per-class random split: `floor(ratio * N_c)` of each class go to the first
/// index list, the rest to the second. Both lists are sorted.
pub fn stratified_split_indices(
    labels: &[usize],
    num_classes: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        rng.shuffle(&mut members);
        // The epsilon keeps products like 0.29 * 100 from flooring to 28.
        let n_train = (ratio * members.len() as f64 + 1e-9).floor() as usize;
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn stratified_split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels = data.require_labels("stratified split")?;
    let (train, test) = stratified_split_indices(labels, data.num_classes(), ratio, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&format!(
        "# num_classes={} domain={}\n",
        data.num_classes,
        data.domain_tag.replace(char::is_whitespace, "_")
    ));
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in data.features.iter_rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(labels) = &data.labels {
            fields.push(labels[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_metadata(line: &str) -> HashMap<&str, &str> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

/// Loads a dataset. Without a metadata line the class count is inferred as
/// `max label + 1` (0 for unlabeled files).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut declared_classes = None;
    let mut domain_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(first) = text.lines().next().filter(|l| l.starts_with('#')) {
        let meta = parse_metadata(first);
        if let Some(c) = meta.get("num_classes") {
            declared_classes = Some(
                c.parse::<usize>()
                    .map_err(|_| Error::parse(path, 1, format!("bad num_classes '{c}'")))?,
            );
        }
        if let Some(tag) = meta.get("domain") {
            domain_tag = tag.to_string();
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::parse(path, 1, "missing header row"));
    }
    let has_label = headers.iter().next_back() == Some("label");
    let dim = headers.len() - usize::from(has_label);

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, line, format!("non-numeric field '{field}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite field '{field}'")));
            }
            data.push(v);
        }
        if has_label {
            let field = &record[dim];
            let l: usize = field
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad label '{field}'")))?;
            if let Some(c) = declared_classes {
                if l >= c {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("label {l} >= declared num_classes {c}"),
                    ));
                }
            }
            labels.push(l);
        }
    }
    let rows = data.len().checked_div(dim).unwrap_or(labels.len());
    let num_classes = declared_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    let features = Matrix::from_vec(rows, dim, data)?;
    Dataset::new(
        features,
        has_label.then_some(labels),
        num_classes,
        domain_tag,
    )
}

/// Writes ground-truth labels as `index,label` rows, kept apart from the
/// unlabeled features they describe.
pub fn save_labels_csv(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an `index,label` file; indices must run 0, 1, 2, ... in order.
pub fn load_labels_csv(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(Error::parse(path, line, "expected index,label"));
        }
        let index: usize = record[0]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad index '{}'", &record[0])))?;
        if index != labels.len() {
            return Err(Error::parse(
                path,
                line,
                format!("index {index} out of order, expected {}", labels.len()),
            ));
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad label '{}'", &record[1])))?;
        labels.push(label);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn labeled(counts: &[usize]) -> Dataset {
        let labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        let n = labels.len();
        let feats = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(feats, Some(labels), counts.len(), "t").unwrap()
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        let d = labeled(&[100, 100, 100]);
        let (train, test) = stratified_split(&d, 0.8, 3).unwrap();
        assert_eq!(train.class_counts().unwrap(), vec![80, 80, 80]);
        assert_eq!(test.class_counts().unwrap(), vec![20, 20, 20]);

        let d = labeled(&[5, 7]);
        let (train, test) = stratified_split(&d, 0.8, 3).unwrap();
        assert_eq!(train.class_counts().unwrap(), vec![4, 5]);
        assert_eq!(test.class_counts().unwrap(), vec![1, 2]);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let d = labeled(&[5, 1]);
        assert!(matches!(
            stratified_split(&d, 0.8, 0),
            Err(Error::ClassTooSmall { class: 1, count: 1 })
        ));
        assert!(stratified_split(&labeled(&[5, 5]), 1.0, 0).is_err());
        assert!(stratified_split(&labeled(&[5, 5]).without_labels(), 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions(counts in prop::collection::vec(2usize..40, 1..6), ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let d = labeled(&counts);
            let labels = d.labels().unwrap().to_vec();
            let (train, test) = stratified_split_indices(&labels, counts.len(), ratio, seed).unwrap();
            let tr: BTreeSet<_> = train.iter().copied().collect();
            let te: BTreeSet<_> = test.iter().copied().collect();
            prop_assert_eq!(tr.len(), train.len());
            prop_assert!(tr.is_disjoint(&te));
            prop_assert_eq!(tr.len() + te.len(), labels.len());
            for (c, &n) in counts.iter().enumerate() {
                let k = train.iter().filter(|&&i| labels[i] == c).count() as f64;
                let frac = k / n as f64;
                prop_assert!(frac <= ratio + 1e-12 && frac >= ratio - 1.0 / n as f64 - 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainShiftSpec {
            samples_per_class: 20,
            seed: 9,
            ..Default::default()
        };
        let a = generate_domain_pair(&spec).unwrap();
        let b = generate_domain_pair(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 80);
        assert_eq!(a.0.class_counts().unwrap(), vec![20; 4]);
    }

    #[test]
    fn unshifted_same_noise_gives_same_means() {
        let spec = DomainShiftSpec {
            shift_rotation_deg: 0.0,
            samples_per_class: 50,
            ..Default::default()
        };
        let s = sample_domain(&spec, false, 5, "s").unwrap();
        let t = sample_domain(&spec, true, 5, "t").unwrap();
        assert_eq!(s.features(), t.features());
    }

    #[test]
    fn neighbouring_centers_are_separated() {
        let spec = DomainShiftSpec::default();
        let c = spec.class_centers();
        let d: f64 = c
            .row(0)
            .iter()
            .zip(c.row(1))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_needs_two_dims() {
        let spec = DomainShiftSpec {
            feature_dim: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_domain_pair(&spec),
            Err(Error::RotationNeedsTwoDims)
        ));
        let spec = DomainShiftSpec {
            feature_dim: 1,
            shift_rotation_deg: 0.0,
            ..Default::default()
        };
        assert!(generate_domain_pair(&spec).is_ok());
    }

    #[test]
    fn csv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "f0,f1,label\n1.0,2.0,0\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!((d.len(), d.dim()), (1, 2));
        assert_eq!(d.labels(), Some(&[0usize][..]));
        assert_eq!(d.features().row(0), &[1.0, 2.0]);

        std::fs::write(&p, "f0,f1\n1.0,2.0\n3,4\n").unwrap();
        let d = load_csv(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.labels().is_none());
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "f0,f1,label\n1.0,2.0,0\n1.0,0\n").unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "f0,label\n1.0,0\nabc,1\n").unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "# num_classes=2\nf0,label\n1.0,0\n1.0,2\n").unwrap();
        match load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = DomainShiftSpec {
            samples_per_class: 25,
            seed: 4,
            ..Default::default()
        };
        let (src, tgt) = generate_domain_pair(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for d in [src, tgt.without_labels()] {
            let p = dir.path().join("d.csv");
            save_csv(&d, &p).unwrap();
            let back = load_csv(&p).unwrap();
            assert_eq!(back.labels(), d.labels());
            assert_eq!(back.num_classes(), d.num_classes());
            assert_eq!(back.domain_tag(), d.domain_tag());
            for (a, b) in back.features().data().iter().zip(d.features().data()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn labels_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.csv");
        save_labels_csv(&[2, 0, 1, 1], &p).unwrap();
        assert_eq!(load_labels_csv(&p).unwrap(), vec![2, 0, 1, 1]);
        std::fs::write(&p, "index,label\n0,1\n2,0\n").unwrap();
        let err = load_labels_csv(&p).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}

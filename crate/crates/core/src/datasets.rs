//! Synthetic multi-domain data and the on-disk dataset / manifest formats.
//!
//! Dataset CSV: header `label,f0,...,f{D-1}`, one sample per row, label `-1`
//! for unlabeled rows, features written with 17 significant digits.
//!
//! Manifest (TOML):
//!
//! ```toml
//! feature_dim = 2
//! num_classes = 2
//!
//! [[domains]]
//! name = "source_0"
//! role = "source"          # source | target | target-eval
//! path = "source_0.csv"    # relative to the manifest's directory
//! ```

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Rotation applied per unit of `shift`, in radians.
const ROTATION_PER_SHIFT: f64 = 0.2;

/// Features plus integer labels, `-1` meaning unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Matrix,
    pub labels: Vec<i64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l < -1) {
            return Err(Error::invalid(format!("label {bad} is below the -1 sentinel")));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_unlabeled(&self) -> bool {
        self.labels.iter().all(|l| *l == -1)
    }

    /// Labeled view; every label must lie in `0..num_classes`.
    pub fn to_source(&self, num_classes: usize) -> Result<SourceDomain> {
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l < 0 || l as usize >= num_classes {
                    Err(Error::invalid(format!(
                        "{}: sample {i} has label {l}, expected 0..{num_classes}",
                        self.name
                    )))
                } else {
                    Ok(l as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SourceDomain {
            name: self.name.clone(),
            features: self.features.clone(),
            labels,
        })
    }

    /// Unlabeled view; refuses datasets that carry any label.
    pub fn to_target(&self) -> Result<TargetDomain> {
        if !self.is_unlabeled() {
            return Err(Error::Manifest(format!("{}: target must be unlabeled", self.name)));
        }
        Ok(TargetDomain {
            name: self.name.clone(),
            features: self.features.clone(),
        })
    }

    pub fn to_eval(&self, num_classes: usize) -> Result<EvalSet> {
        let s = self.to_source(num_classes)?;
        Ok(EvalSet {
            features: s.features,
            labels: s.labels,
        })
    }
}

/// Labeled source domain as the trainer sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDomain {
    pub name: String,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl SourceDomain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.clone(),
            labels: self.labels.iter().map(|l| *l as i64).collect(),
        }
    }
}

/// Target domain: features only. There is no field a label could live in.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDomain {
    pub name: String,
    pub features: Matrix,
}

impl TargetDomain {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Held-out target labels, used for reporting only.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Clusters2d,
    SpuriousFeature,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Clusters2d => "clusters2d",
            Scenario::SpuriousFeature => "spurious-feature",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clusters2d" => Ok(Scenario::Clusters2d),
            "spurious-feature" => Ok(Scenario::SpuriousFeature),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?} (expected clusters2d or spurious-feature)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub n_per_class: usize,
    pub num_sources: usize,
    pub num_classes: usize,
    /// Upper bound on per-source translation; the target sits at exactly this offset.
    pub shift: f64,
    /// Distance between the two class centers (diameter of the center circle).
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            scenario: Scenario::Clusters2d,
            n_per_class: 200,
            num_sources: 3,
            num_classes: 2,
            shift: 1.5,
            separation: 4.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive".into());
        }
        if self.num_sources == 0 {
            return bad("num_sources must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(self.shift >= 0.0) || !self.shift.is_finite() {
            return bad(format!("shift must be >= 0, got {}", self.shift));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        Ok(())
    }

    /// Base class centers before any domain transform. Two classes sit at
    /// `(-separation/2, 0)` and `(separation/2, 0)`; more classes go round the same circle.
    pub fn class_centers(&self) -> Vec<[f64; 2]> {
        let r = self.separation / 2.0;
        (0..self.num_classes)
            .map(|c| {
                let a = PI + 2.0 * PI * c as f64 / self.num_classes as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect()
    }
}

/// `x -> R(rotation) x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainTransform {
    pub rotation: f64,
    pub translation: [f64; 2],
}

impl DomainTransform {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDomains {
    pub sources: Vec<Dataset>,
    /// Same samples as `target_eval`, labels stripped.
    pub target: Dataset,
    pub target_eval: Dataset,
    pub source_transforms: Vec<DomainTransform>,
    pub target_transform: DomainTransform,
    pub num_classes: usize,
}

impl SyntheticDomains {
    pub fn feature_dim(&self) -> usize {
        self.target.features.cols()
    }

    pub fn source_domains(&self) -> Result<Vec<SourceDomain>> {
        self.sources.iter().map(|d| d.to_source(self.num_classes)).collect()
    }

    pub fn target_domain(&self) -> Result<TargetDomain> {
        self.target.to_target()
    }

    pub fn eval_set(&self) -> Result<EvalSet> {
        self.target_eval.to_eval(self.num_classes)
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDomains> {
    match spec.scenario {
        Scenario::Clusters2d => gen_clusters2d(spec),
        Scenario::SpuriousFeature => gen_spurious_feature(spec),
    }
}

fn draw_transforms(spec: &SyntheticSpec, rng: &mut Rng) -> (Vec<DomainTransform>, DomainTransform) {
    let sources = (0..spec.num_sources)
        .map(|_| {
            let rotation = spec.shift * ROTATION_PER_SHIFT * (2.0 * rng.uniform() - 1.0);
            // Uniform over the disc of radius `shift`.
            let radius = spec.shift * rng.uniform().sqrt();
            let angle = 2.0 * PI * rng.uniform();
            DomainTransform {
                rotation,
                translation: [radius * angle.cos(), radius * angle.sin()],
            }
        })
        .collect();
    // Held out: full rotation and full translation along the class axis.
    let target = DomainTransform {
        rotation: spec.shift * ROTATION_PER_SHIFT,
        translation: [spec.shift, 0.0],
    };
    (sources, target)
}

/// Samples `n_per_class` points per class around the transformed centers, shuffled.
fn sample_domain(spec: &SyntheticSpec, transform: &DomainTransform, rng: &mut Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let centers: Vec<[f64; 2]> = spec.class_centers().into_iter().map(|c| transform.apply(c)).collect();
    let mut samples = Vec::with_capacity(spec.n_per_class * spec.num_classes);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let p = [
                center[0] + spec.noise_std * rng.standard_normal(),
                center[1] + spec.noise_std * rng.standard_normal(),
            ];
            samples.push((p, class));
        }
    }
    rng.shuffle(&mut samples);
    samples.into_iter().unzip()
}

fn to_matrix(points: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(points)
}

fn assemble(
    spec: &SyntheticSpec,
    source_parts: Vec<(Vec<Vec<f64>>, Vec<usize>)>,
    target_part: (Vec<Vec<f64>>, Vec<usize>),
    source_transforms: Vec<DomainTransform>,
    target_transform: DomainTransform,
) -> Result<SyntheticDomains> {
    let sources = source_parts
        .into_iter()
        .enumerate()
        .map(|(k, (pts, labels))| {
            Dataset::new(
                format!("source_{k}"),
                to_matrix(&pts)?,
                labels.into_iter().map(|l| l as i64).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let features = to_matrix(&target_part.0)?;
    let target = Dataset::new("target", features.clone(), vec![-1; target_part.1.len()])?;
    let target_eval = Dataset::new(
        "target_eval",
        features,
        target_part.1.into_iter().map(|l| l as i64).collect(),
    )?;
    Ok(SyntheticDomains {
        sources,
        target,
        target_eval,
        source_transforms,
        target_transform,
        num_classes: spec.num_classes,
    })
}

/// Gaussian blobs per class; each source rotated and translated by its own draw
/// of magnitude at most `shift`, the target by exactly `shift`.
pub fn gen_clusters2d(spec: &SyntheticSpec) -> Result<SyntheticDomains> {
    spec.validate()?;
    if spec.scenario != Scenario::Clusters2d {
        return Err(Error::Config(format!("gen_clusters2d called with scenario {}", spec.scenario)));
    }
    let mut rng = Rng::new(spec.seed);
    let (source_transforms, target_transform) = draw_transforms(spec, &mut rng);
    let to_rows = |(pts, labels): (Vec<[f64; 2]>, Vec<usize>)| (pts.iter().map(|p| p.to_vec()).collect(), labels);
    let source_parts = source_transforms
        .iter()
        .map(|t| to_rows(sample_domain(spec, t, &mut rng)))
        .collect();
    let target_part = to_rows(sample_domain(spec, &target_transform, &mut rng));
    assemble(spec, source_parts, target_part, source_transforms, target_transform)
}

/// `clusters2d` plus a third column. In the sources it equals the label plus
/// `noise_std` Gaussian noise; in the target it is Gaussian noise with the same
/// mean and variance as the source column, independent of the label.
pub fn gen_spurious_feature(spec: &SyntheticSpec) -> Result<SyntheticDomains> {
    spec.validate()?;
    if spec.scenario != Scenario::SpuriousFeature {
        return Err(Error::Config(format!(
            "gen_spurious_feature called with scenario {}",
            spec.scenario
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let (source_transforms, target_transform) = draw_transforms(spec, &mut rng);
    let c = spec.num_classes as f64;
    let label_mean = (c - 1.0) / 2.0;
    let label_var = (c * c - 1.0) / 12.0;
    let target_std = (label_var + spec.noise_std * spec.noise_std).sqrt();

    let mut source_parts = Vec::with_capacity(spec.num_sources);
    for t in &source_transforms {
        let (pts, labels) = sample_domain(spec, t, &mut rng);
        let rows = pts
            .iter()
            .zip(&labels)
            .map(|(p, &y)| vec![p[0], p[1], y as f64 + spec.noise_std * rng.standard_normal()])
            .collect();
        source_parts.push((rows, labels));
    }
    let (pts, labels) = sample_domain(spec, &target_transform, &mut rng);
    let rows = pts
        .iter()
        .map(|p| vec![p[0], p[1], label_mean + target_std * rng.standard_normal()])
        .collect();
    assemble(spec, source_parts, (rows, labels), source_transforms, target_transform)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for j in 0..ds.features.cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (r, label) in ds.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in ds.features.row(r) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_csv(path: &Path, domain_name: &str) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.get(0).map(str::trim) != Some("label") || header.len() < 2 {
        return Err(parse_err(1, "header must be label,f0,...".into()));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name.trim() != format!("f{j}") {
            return Err(parse_err(1, format!("column {} should be f{j}, found {name:?}", j + 1)));
        }
    }
    let dim = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let msg = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("row has {len} fields, expected {expected_len}")
                }
                _ => e.to_string(),
            };
            parse_err(line, msg)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let label: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {:?}", &record[0])))?;
        if label < -1 {
            return Err(parse_err(line, format!("label {label} is below the -1 sentinel")));
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad feature value {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature value {field:?}")));
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(1, "dataset has no rows".into()));
    }
    let features = Matrix::new(labels.len(), dim, data)?;
    Dataset::new(domain_name, features, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Source,
    Target,
    TargetEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(rename = "domains")]
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DomainManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: DomainManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Role counts: one target, at least one source, at most one target-eval; unique names.
    pub fn validate(&self) -> Result<()> {
        let count = |role| self.entries.iter().filter(|e| e.role == role).count();
        match count(Role::Target) {
            1 => {}
            0 => return Err(Error::Manifest("no target entry".into())),
            n => return Err(Error::Manifest(format!("{n} target entries, expected exactly one"))),
        }
        if count(Role::Source) == 0 {
            return Err(Error::Manifest("at least one source entry is required".into()));
        }
        if count(Role::TargetEval) > 1 {
            return Err(Error::Manifest("at most one target-eval entry is allowed".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate domain name {:?}", e.name)));
            }
        }
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::Manifest("feature_dim must be positive and num_classes at least 2".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    fn load_entry(&self, entry: &ManifestEntry) -> Result<Dataset> {
        let ds = load_csv(&self.resolve(entry), &entry.name)?;
        if ds.features.cols() != self.feature_dim {
            return Err(Error::Manifest(format!(
                "{} has {} features, manifest declares {}",
                entry.name,
                ds.features.cols(),
                self.feature_dim
            )));
        }
        Ok(ds)
    }

    /// Sources and the unlabeled target. Target-eval files are not opened.
    pub fn load_training_domains(&self) -> Result<(Vec<SourceDomain>, TargetDomain)> {
        let mut sources = Vec::new();
        let mut target = None;
        for e in &self.entries {
            match e.role {
                Role::Source => sources.push(self.load_entry(e)?.to_source(self.num_classes)?),
                Role::Target => target = Some(self.load_entry(e)?.to_target()?),
                Role::TargetEval => {}
            }
        }
        let target = target.ok_or_else(|| Error::Manifest("no target entry".into()))?;
        Ok((sources, target))
    }

    pub fn load_target_eval(&self) -> Result<Option<EvalSet>> {
        match self.entries.iter().find(|e| e.role == Role::TargetEval) {
            None => Ok(None),
            Some(e) => Ok(Some(self.load_entry(e)?.to_eval(self.num_classes)?)),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<(DomainManifest, Vec<SourceDomain>, TargetDomain)> {
    let manifest = DomainManifest::load(path)?;
    let (sources, target) = manifest.load_training_domains()?;
    Ok((manifest, sources, target))
}

/// Writes every domain as CSV plus `manifest.toml`; returns the written paths.
pub fn write_domains(domains: &SyntheticDomains, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    let mut written = Vec::new();
    let mut put = |ds: &Dataset, role: Role| -> Result<()> {
        let file = format!("{}.csv", ds.name);
        let path = out_dir.join(&file);
        save_csv(ds, &path)?;
        written.push(path);
        entries.push(ManifestEntry {
            name: ds.name.clone(),
            role,
            path: PathBuf::from(file),
        });
        Ok(())
    };
    for s in &domains.sources {
        put(s, Role::Source)?;
    }
    put(&domains.target, Role::Target)?;
    put(&domains.target_eval, Role::TargetEval)?;
    let manifest = DomainManifest {
        feature_dim: domains.feature_dim(),
        num_classes: domains.num_classes,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.toml");
    manifest.save(&path)?;
    written.push(path);
    Ok(written)
}

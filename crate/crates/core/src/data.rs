//! Synthetic multi-domain suites, splits, CSV ingestion and the Bayes oracle.
//!
//! Two generator families are provided:
//!
//! * `specific-blobs`: Gaussian class blobs. A block of *shared* dimensions
//!   carries the same class means in every domain; each domain additionally
//!   owns a block of *specific* dimensions whose class means are only
//!   present in that domain's samples. Everywhere else the specific blocks
//!   are pure noise. Features are laid out as
//!   `[shared | block(domain 0) | block(domain 1) | …]`.
//! * `rotated-moons`: the two-moons point cloud, rotated by a per-domain
//!   angle about the cloud's centre.
//!
//! Since the generating densities are known, [`bayes_oracle_accuracy`]
//! evaluates the exact Bayes classifier, independent of any trained model.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub split: Vec<Split>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Features and labels of one split.
    pub fn subset(&self, split: Split) -> (Tensor, Vec<usize>) {
        let idx = self.indices(split);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (self.x.select_rows(&idx), y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 20% held-out test, then 90/10 train/val of the remainder.
    fn default() -> Self {
        SplitFractions {
            train: 0.72,
            val: 0.08,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "split fractions must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Tags each row of `ds` train/val/test by a seeded permutation.
pub fn split_dataset(mut ds: DomainDataset, fractions: SplitFractions, rng: &mut Rng) -> Result<DomainDataset> {
    fractions.validate()?;
    let n = ds.len();
    let n_test = ((n as f64) * fractions.test).round() as usize;
    let n_val = (((n as f64) * fractions.val).round() as usize).min(n - n_test);
    let n_train = n - n_test - n_val;
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    ds.split = vec![Split::Test; n];
    for &i in &perm[..n_train] {
        ds.split[i] = Split::Train;
    }
    for &i in &perm[n_train..n_train + n_val] {
        ds.split[i] = Split::Val;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    SpecificBlobs,
    RotatedMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub family: Family,
    /// Number of source domains.
    pub sources: usize,
    /// Number of held-out target domains.
    pub targets: usize,
    pub classes: usize,
    pub n_per_domain: usize,
    pub shared_dims: usize,
    pub specific_dims: usize,
    /// Std of the per-dimension class-mean draws in the shared block.
    pub shared_sep: f64,
    /// Std of the per-dimension class-mean draws in each specific block.
    pub specific_sep: f64,
    pub noise_sigma: f64,
    /// Per-domain rotation in degrees (moons only), sources first.
    pub angles_deg: Vec<f64>,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            family: Family::SpecificBlobs,
            sources: 3,
            targets: 1,
            classes: 4,
            n_per_domain: 500,
            shared_dims: 8,
            specific_dims: 4,
            shared_sep: 0.5,
            specific_sep: 1.0,
            noise_sigma: 1.0,
            angles_deg: Vec::new(),
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_domains(&self) -> usize {
        self.sources + self.targets
    }

    pub fn dim(&self) -> usize {
        match self.family {
            Family::SpecificBlobs => self.shared_dims + self.num_domains() * self.specific_dims,
            Family::RotatedMoons => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.sources < 1 {
            return bad("at least one source domain is required".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.n_per_domain == 0 {
            return bad("n_per_domain must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        self.split.validate()?;
        match self.family {
            Family::SpecificBlobs => {
                if self.shared_dims + self.specific_dims == 0 {
                    return bad("blobs need shared_dims + specific_dims > 0".into());
                }
                if !(self.shared_sep >= 0.0 && self.specific_sep >= 0.0) {
                    return bad("class-mean separations must be >= 0".into());
                }
            }
            Family::RotatedMoons => {
                if self.classes != 2 {
                    return bad(format!("rotated-moons requires classes = 2, got {}", self.classes));
                }
                if self.angles_deg.len() != self.num_domains() {
                    return bad(format!(
                        "rotated-moons needs {} angles, got {}",
                        self.num_domains(),
                        self.angles_deg.len()
                    ));
                }
                for (i, a) in self.angles_deg.iter().enumerate() {
                    if self.angles_deg[..i].contains(a) {
                        return bad(format!("duplicate domain angle {a}"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// True generating parameters, kept for the Bayes oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    /// `means[domain][class]` over the full feature vector.
    Blobs { means: Vec<Vec<Vec<f64>>>, sigma: f64 },
    Moons { angles_rad: Vec<f64>, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSuite {
    pub sources: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
    pub classes: usize,
    pub dim: usize,
    pub spec: Option<SyntheticSpec>,
    pub generator: Option<Generator>,
    pub split: SplitFractions,
    pub split_seed: u64,
}

pub fn source_id(i: usize) -> String {
    format!("src{i}")
}

pub fn target_id(i: usize) -> String {
    format!("tgt{i}")
}

fn domain_stream(seed: u64, purpose: u64, domain: usize) -> Rng {
    Rng::stream(seed, (purpose << 32) | domain as u64)
}

fn domain_ids(sources: usize, targets: usize) -> Vec<String> {
    (0..sources).map(source_id).chain((0..targets).map(target_id)).collect()
}

impl DomainSuite {
    /// Assembles a suite from per-domain datasets (sources first), tagging splits.
    pub fn from_domains(
        domains: Vec<DomainDataset>,
        sources: usize,
        classes: usize,
        split: SplitFractions,
        split_seed: u64,
    ) -> Result<Self> {
        if sources < 1 || sources > domains.len() {
            return Err(Error::Invalid(format!(
                "suite needs 1..={} source domains, got {sources}",
                domains.len()
            )));
        }
        let dim = domains[0].x.cols();
        let mut tagged = Vec::with_capacity(domains.len());
        for (i, ds) in domains.into_iter().enumerate() {
            if ds.x.cols() != dim {
                return Err(Error::shape("DomainSuite", format!("{dim} features"), format!("{} in {}", ds.x.cols(), ds.domain_id)));
            }
            if let Some(&label) = ds.y.iter().find(|&&l| l >= classes) {
                return Err(Error::Label { label, classes });
            }
            if !ds.x.all_finite() {
                return Err(Error::NonFinite(format!("features of {}", ds.domain_id)));
            }
            let mut rng = domain_stream(split_seed, streams::SPLIT, i);
            tagged.push(split_dataset(ds, split, &mut rng)?);
        }
        let targets = tagged.split_off(sources);
        Ok(DomainSuite {
            sources: tagged,
            targets,
            classes,
            dim,
            spec: None,
            generator: None,
            split,
            split_seed,
        })
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainDataset> {
        self.sources.iter().chain(&self.targets)
    }

    pub fn domain(&self, id: &str) -> Result<&DomainDataset> {
        self.domains()
            .find(|d| d.domain_id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.sources.iter().map(|d| d.domain_id.clone()).collect()
    }

    pub fn is_source(&self, id: &str) -> bool {
        self.sources.iter().any(|d| d.domain_id == id)
    }

    /// Stable SHA-256 over ids, labels, split tags and feature bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.classes as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.sources.len() as u64).to_le_bytes());
        for d in self.domains() {
            h.update(d.domain_id.as_bytes());
            h.update([0u8]);
            for &v in d.x.data() {
                h.update(v.to_bits().to_le_bytes());
            }
            for &y in &d.y {
                h.update((y as u64).to_le_bytes());
            }
            for s in &d.split {
                h.update([*s as u8]);
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes one CSV per domain plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (i, d) in self.domains().enumerate() {
            let file = format!("{}.csv", d.domain_id);
            write_delimited(d, &dir.join(&file))?;
            entries.push(ManifestDomain {
                id: d.domain_id.clone(),
                role: if i < self.sources.len() { Role::Source } else { Role::Target },
                file,
                rows: d.len(),
            });
        }
        let manifest = Manifest {
            schema_version: MANIFEST_VERSION,
            classes: self.classes,
            dim: self.dim,
            split: self.split,
            split_seed: self.split_seed,
            spec: self.spec.clone(),
            domains: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a suite written by [`DomainSuite::save`] (or a hand-written
    /// manifest over external CSVs). When the manifest carries a synthetic
    /// spec whose regeneration reproduces the files exactly, the generator
    /// parameters are re-attached so the Bayes oracle is available.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported manifest schema_version {}",
                manifest.schema_version
            )));
        }
        let sources = manifest.domains.iter().filter(|d| d.role == Role::Source).count();
        if manifest.domains[..sources].iter().any(|d| d.role != Role::Source) {
            return Err(Error::Invalid("manifest must list source domains before targets".into()));
        }
        let mut domains = Vec::new();
        for entry in &manifest.domains {
            let ds = load_delimited(&dir.join(&entry.file), &entry.id)?;
            if ds.x.cols() != manifest.dim {
                return Err(Error::shape("manifest", format!("{} features", manifest.dim), format!("{} in {}", ds.x.cols(), entry.file)));
            }
            domains.push(ds);
        }
        let loaded = DomainSuite::from_domains(domains, sources, manifest.classes, manifest.split, manifest.split_seed)?;
        if let Some(spec) = manifest.spec {
            let regenerated = generate(&spec)?;
            if regenerated.fingerprint() == loaded.fingerprint() {
                return Ok(regenerated);
            }
        }
        Ok(loaded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDomain {
    pub id: String,
    pub role: Role,
    pub file: String,
    pub rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub classes: usize,
    pub dim: usize,
    pub split: SplitFractions,
    pub split_seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub domains: Vec<ManifestDomain>,
}

/// Generates the suite described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<DomainSuite> {
    match spec.family {
        Family::SpecificBlobs => gen_specific_blobs(spec),
        Family::RotatedMoons => gen_rotated_moons(spec),
    }
}

pub fn gen_specific_blobs(spec: &SyntheticSpec) -> Result<DomainSuite> {
    if spec.family != Family::SpecificBlobs {
        return Err(Error::Invalid("gen_specific_blobs called with another family".into()));
    }
    spec.validate()?;
    let n_dom = spec.num_domains();
    let dim = spec.dim();
    let mut rng = Rng::stream(spec.seed, streams::DATA);
    let shared: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.shared_dims).map(|_| rng.normal(0.0, spec.shared_sep)).collect())
        .collect();
    let mut means = Vec::with_capacity(n_dom);
    for d in 0..n_dom {
        let mut per_class = Vec::with_capacity(spec.classes);
        for shared_mean in &shared {
            let mut m = vec![0.0; dim];
            m[..spec.shared_dims].copy_from_slice(shared_mean);
            let off = spec.shared_dims + d * spec.specific_dims;
            for v in &mut m[off..off + spec.specific_dims] {
                *v = rng.normal(0.0, spec.specific_sep);
            }
            per_class.push(m);
        }
        means.push(per_class);
    }
    let ids = domain_ids(spec.sources, spec.targets);
    let mut domains = Vec::with_capacity(n_dom);
    for (d, id) in ids.into_iter().enumerate() {
        let mut rng = domain_stream(spec.seed, streams::DATA, d);
        let mut data = Vec::with_capacity(spec.n_per_domain * dim);
        let mut y = Vec::with_capacity(spec.n_per_domain);
        for i in 0..spec.n_per_domain {
            let c = i % spec.classes;
            for &mu in &means[d][c] {
                data.push(mu + rng.normal(0.0, spec.noise_sigma));
            }
            y.push(c);
        }
        domains.push(DomainDataset {
            domain_id: id,
            x: Tensor::new(vec![spec.n_per_domain, dim], data)?,
            y,
            split: Vec::new(),
        });
    }
    let mut suite = DomainSuite::from_domains(domains, spec.sources, spec.classes, spec.split, spec.seed)?;
    suite.spec = Some(spec.clone());
    suite.generator = Some(Generator::Blobs {
        means,
        sigma: spec.noise_sigma,
    });
    Ok(suite)
}

/// Point on the class-`c` arc of the centred two-moons layout.
fn moon_arc(c: usize, t: f64) -> (f64, f64) {
    let (x, y) = if c == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    (x - 0.5, y - 0.25)
}

fn rotate((x, y): (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

pub fn gen_rotated_moons(spec: &SyntheticSpec) -> Result<DomainSuite> {
    if spec.family != Family::RotatedMoons {
        return Err(Error::Invalid("gen_rotated_moons called with another family".into()));
    }
    spec.validate()?;
    let ids = domain_ids(spec.sources, spec.targets);
    let angles: Vec<f64> = spec.angles_deg.iter().map(|a| a.to_radians()).collect();
    let mut domains = Vec::with_capacity(ids.len());
    for (d, id) in ids.into_iter().enumerate() {
        let mut rng = domain_stream(spec.seed, streams::DATA, d);
        let mut data = Vec::with_capacity(spec.n_per_domain * 2);
        let mut y = Vec::with_capacity(spec.n_per_domain);
        for i in 0..spec.n_per_domain {
            let c = i % 2;
            let t = rng.uniform_range(0.0, PI);
            let (bx, by) = moon_arc(c, t);
            let p = (bx + rng.normal(0.0, spec.noise_sigma), by + rng.normal(0.0, spec.noise_sigma));
            let (rx, ry) = rotate(p, angles[d]);
            data.push(rx);
            data.push(ry);
            y.push(c);
        }
        domains.push(DomainDataset {
            domain_id: id,
            x: Tensor::new(vec![spec.n_per_domain, 2], data)?,
            y,
            split: Vec::new(),
        });
    }
    let mut suite = DomainSuite::from_domains(domains, spec.sources, 2, spec.split, spec.seed)?;
    suite.spec = Some(spec.clone());
    suite.generator = Some(Generator::Moons {
        angles_rad: angles,
        sigma: spec.noise_sigma,
    });
    Ok(suite)
}

/// Below this noise level the moons oracle uses the nearest-arc rule, the
/// σ → 0 limit of the Bayes classifier, instead of quadrature.
const MOONS_QUADRATURE_MIN_SIGMA: f64 = 0.02;
const MOONS_QUADRATURE_POINTS: usize = 2048;

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn moons_class_scores(p: (f64, f64), sigma: f64) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (c, o) in out.iter_mut().enumerate() {
        if sigma < MOONS_QUADRATURE_MIN_SIGMA {
            let mut best = f64::INFINITY;
            for i in 0..MOONS_QUADRATURE_POINTS * 4 {
                let t = PI * (i as f64 + 0.5) / (MOONS_QUADRATURE_POINTS * 4) as f64;
                let (ax, ay) = moon_arc(c, t);
                best = best.min((p.0 - ax).powi(2) + (p.1 - ay).powi(2));
            }
            *o = -best;
        } else {
            // log ∫ N(p; arc(t), σ²I) dt by midpoint rule, up to a shared constant
            let logs: Vec<f64> = (0..MOONS_QUADRATURE_POINTS)
                .map(|i| {
                    let t = PI * (i as f64 + 0.5) / MOONS_QUADRATURE_POINTS as f64;
                    let (ax, ay) = moon_arc(c, t);
                    -((p.0 - ax).powi(2) + (p.1 - ay).powi(2)) / (2.0 * sigma * sigma)
                })
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *o = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        }
    }
    out
}

/// Accuracy of the exact Bayes classifier on `domain_id`'s test split.
///
/// Classes are balanced by construction, so the Bayes rule is the argmax of
/// the class-conditional likelihood: nearest class mean for blobs (isotropic
/// equal covariance) and the arc-marginalized likelihood for moons.
pub fn bayes_oracle_accuracy(suite: &DomainSuite, domain_id: &str) -> Result<f64> {
    let gen = suite
        .generator
        .as_ref()
        .ok_or_else(|| Error::Invalid("Bayes oracle needs a synthetic suite with known generator".into()))?;
    let d_idx = suite
        .domains()
        .position(|d| d.domain_id == domain_id)
        .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))?;
    let ds = suite.domain(domain_id)?;
    let idx = ds.indices(Split::Test);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("{domain_id} has an empty test split")));
    }
    let mut correct = 0usize;
    for &i in &idx {
        let x = ds.x.row(i);
        let pred = match gen {
            Generator::Blobs { means, .. } => {
                let scores: Vec<f64> = means[d_idx]
                    .iter()
                    .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                argmax(&scores)
            }
            Generator::Moons { angles_rad, sigma } => {
                let base = rotate((x[0], x[1]), -angles_rad[d_idx]);
                argmax(&moons_class_scores(base, *sigma))
            }
        };
        if pred == ds.y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Reads comma-separated float rows whose final column is an integer label.
pub fn load_delimited(path: &Path, domain_id: &str) -> Result<DomainDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.into(),
                line: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.into(),
        line,
        msg,
    };
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut width: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(parse_err(line, "expected at least one feature and a label".into()));
        }
        let features = record.len() - 1;
        match width {
            None => width = Some(features),
            Some(w) if w != features => {
                return Err(parse_err(line, format!("row has {features} features, expected {w}")));
            }
            _ => {}
        }
        for cell in record.iter().take(features) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite cell `{cell}`")));
            }
            data.push(v);
        }
        let label = &record[features];
        y.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("label `{label}` is not a non-negative integer")))?,
        );
    }
    let Some(width) = width else {
        return Err(parse_err(0, "no rows".into()));
    };
    let n = y.len();
    Ok(DomainDataset {
        domain_id: domain_id.to_string(),
        x: Tensor::new(vec![n, width], data)?,
        y,
        split: vec![Split::Train; n],
    })
}

/// Writes `ds` as headerless CSV: features then the integer label.
pub fn write_delimited(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ds.x.len() * 20);
    for (i, &label) in ds.y.iter().enumerate() {
        for v in ds.x.row(i) {
            // `Display` prints the shortest decimal that round-trips exactly
            out.push_str(&v.to_string());
            out.push(',');
        }
        out.push_str(&label.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

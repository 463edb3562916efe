//! Multi-domain labeled datasets: synthetic generators, on-disk format,
//! seeded train/test splits and the batch sampling operator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Random state threaded explicitly through every sampling call.
pub type RngState = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation of the isotropic noise added to the moons.
pub const MOONS_NOISE: f64 = 0.1;
/// Per-axis standard deviation of each Gaussian class.
pub const GAUSSIAN_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub num_classes: usize,
    samples: Vec<LabeledSample>,
}

impl DomainDataset {
    /// Validates the dataset invariants: consistent width, finite features,
    /// labels in range, matching domain ids and full class coverage.
    pub fn new(
        domain_id: usize,
        name: impl Into<String>,
        num_classes: usize,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut seen = vec![false; num_classes];
        for (row, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {row} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
            if let Some(c) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample {row}, feature f{c}")));
            }
            if s.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {row} has label {} but C = {num_classes}",
                    s.label
                )));
            }
            if s.domain_id != domain_id {
                return Err(Error::InvalidArgument(format!(
                    "sample {row} has domain_id {} in domain {domain_id}",
                    s.domain_id
                )));
            }
            seen[s.label] = true;
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidArgument(format!("class {c} absent")));
        }
        Ok(DomainDataset {
            domain_id,
            name: name.into(),
            num_classes,
            samples,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Sample indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.label].push(i);
        }
        by_class
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<LabeledSample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn to_batch(&self) -> Batch {
        Batch::from_samples(&self.samples)
    }
}

/// Samples packed for the model: one feature row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[LabeledSample]) -> Self {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            data.extend_from_slice(&s.features);
        }
        Batch {
            inputs: Matrix::from_vec(samples.len(), dim, data).expect("uniform width"),
            labels: samples.iter().map(|s| s.label).collect(),
            domain_ids: samples.iter().map(|s| s.domain_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticFamily {
    /// Two interleaved half circles, rotated by a per-domain angle (degrees).
    RotatedTwoMoons,
    /// Two Gaussian blobs, translated by a per-domain shift magnitude.
    ShiftedGaussians,
}

impl SyntheticFamily {
    pub const NUM_CLASSES: usize = 2;
    pub const DIM: usize = 2;

    /// Untransformed class mean of the Gaussian family.
    pub fn gaussian_base_mean(class: usize) -> [f64; 2] {
        if class == 0 {
            [-1.0, 0.0]
        } else {
            [1.0, 0.0]
        }
    }

    /// Applies the domain transform to a base point.
    pub fn transform(self, param: f64, p: [f64; 2]) -> [f64; 2] {
        match self {
            SyntheticFamily::RotatedTwoMoons => {
                let (s, c) = param.to_radians().sin_cos();
                [c * p[0] - s * p[1], s * p[0] + c * p[1]]
            }
            SyntheticFamily::ShiftedGaussians => {
                let d = param / std::f64::consts::SQRT_2;
                [p[0] + d, p[1] + d]
            }
        }
    }

    fn base_point(self, label: usize, rng: &mut RngState) -> [f64; 2] {
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        match self {
            SyntheticFamily::RotatedTwoMoons => {
                let t = rand::Rng::random_range(rng, 0.0..std::f64::consts::PI);
                let (x, y) = if label == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // Centered so that rotations act about the joint centroid.
                [
                    x - 0.5 + MOONS_NOISE * noise.sample(rng),
                    y - 0.25 + MOONS_NOISE * noise.sample(rng),
                ]
            }
            SyntheticFamily::ShiftedGaussians => {
                let m = Self::gaussian_base_mean(label);
                [
                    m[0] + GAUSSIAN_STD * noise.sample(rng),
                    m[1] + GAUSSIAN_STD * noise.sample(rng),
                ]
            }
        }
    }
}

/// One synthetic domain from its own base seed. Class labels alternate so
/// the domain is balanced to within one sample.
pub fn generate_domain(
    family: SyntheticFamily,
    param: f64,
    samples: usize,
    base_seed: u64,
    domain_id: usize,
) -> Result<DomainDataset> {
    let c = SyntheticFamily::NUM_CLASSES;
    if samples < 2 * c {
        return Err(Error::InvalidArgument(format!(
            "samples_per_domain = {samples} < 2·C = {}",
            2 * c
        )));
    }
    let mut rng = rng_from_seed(base_seed);
    let points = (0..samples)
        .map(|i| {
            let label = i % c;
            let p = family.transform(param, family.base_point(label, &mut rng));
            LabeledSample {
                features: p.to_vec(),
                label,
                domain_id,
            }
        })
        .collect();
    let name = match family {
        SyntheticFamily::RotatedTwoMoons => format!("moons_rot{param}"),
        SyntheticFamily::ShiftedGaussians => format!("gauss_shift{param}"),
    };
    DomainDataset::new(domain_id, name, c, points)
}

/// Base seed of domain `k` for a generation seed.
pub fn domain_base_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k as u64 + 1)
}

pub fn generate_synthetic_domains(
    family: SyntheticFamily,
    num_domains: usize,
    samples_per_domain: usize,
    domain_params: &[f64],
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    if num_domains < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 domains, got {num_domains}"
        )));
    }
    if domain_params.len() != num_domains {
        return Err(Error::InvalidArgument(format!(
            "{} domain params for {num_domains} domains",
            domain_params.len()
        )));
    }
    for (i, a) in domain_params.iter().enumerate() {
        if let Some(j) = domain_params[..i].iter().position(|b| b == a) {
            return Err(Error::InvalidArgument(format!(
                "duplicate transform: domains {j} and {i} both use {a}"
            )));
        }
    }
    domain_params
        .iter()
        .enumerate()
        .map(|(k, &p)| generate_domain(family, p, samples_per_domain, domain_base_seed(seed, k), k))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DomainMeta {
    domain_id: usize,
    name: String,
    #[serde(rename = "C")]
    num_classes: usize,
    d_in: usize,
}

/// Writes `meta.json` and `data.csv` into `dir`, creating it if needed.
pub fn save_domain_dir(dataset: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DomainMeta {
        domain_id: dataset.domain_id,
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        d_in: dataset.dim(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut out = String::new();
    for i in 0..dataset.dim() {
        let _ = write!(out, "f{i},");
    }
    out.push_str("label\n");
    for s in dataset.samples() {
        for v in &s.features {
            // `{}` on f64 prints the shortest representation that round-trips.
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", s.label);
    }
    let data_path = dir.join("data.csv");
    fs::write(&data_path, out).map_err(|e| Error::io(&data_path, e))
}

pub fn load_domain_dir(dir: &Path) -> Result<DomainDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DomainMeta =
        serde_json::from_str(&text).map_err(|e| Error::load(&meta_path, e.to_string()))?;

    let data_path = dir.join("data.csv");
    let mut reader =
        csv::Reader::from_path(&data_path).map_err(|e| Error::load(&data_path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::load(&data_path, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::load(&data_path, "missing label column"))?;
    let feature_cols: Vec<usize> = (0..meta.d_in)
        .map(|i| {
            let name = format!("f{i}");
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::load(&data_path, format!("missing column {name}")))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::load(&data_path, format!("row {row}: {e}")))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let features = feature_cols
            .iter()
            .map(|&c| {
                let v: f64 = field(c).parse().map_err(|_| {
                    Error::load(&data_path, format!("row {row}: bad number {:?}", field(c)))
                })?;
                if !v.is_finite() {
                    return Err(Error::load(
                        &data_path,
                        format!("row {row}: non-finite feature {}", &headers[c]),
                    ));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        let label: usize = field(label_col).parse().map_err(|_| {
            Error::load(
                &data_path,
                format!("row {row}: bad label {:?}", field(label_col)),
            )
        })?;
        if label >= meta.num_classes {
            return Err(Error::load(
                &data_path,
                format!("row {row}: label {label} >= C = {}", meta.num_classes),
            ));
        }
        samples.push(LabeledSample {
            features,
            label,
            domain_id: meta.domain_id,
        });
    }
    DomainDataset::new(meta.domain_id, meta.name, meta.num_classes, samples)
        .map_err(|e| Error::load(dir, e.to_string()))
}

/// Loads every domain subdirectory of `root`, ordered by domain id.
pub fn load_domains_root(root: &Path) -> Result<Vec<DomainDataset>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta.json").is_file() {
            out.push(load_domain_dir(&path)?);
        }
    }
    if out.is_empty() {
        return Err(Error::load(root, "no domain directories found"));
    }
    out.sort_by_key(|d| d.domain_id);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

const SPLIT_RETRIES: usize = 100;

/// Seeded disjoint split with `round(train_fraction · N)` training samples.
/// Both halves keep file order and contain every class.
pub fn split_train_test(
    dataset: &DomainDataset,
    spec: SplitSpec,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {} not in (0, 1)",
            spec.train_fraction
        )));
    }
    let n = dataset.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let c = dataset.num_classes;
    let too_small =
        n_train < c || n - n_train < c || dataset.class_indices().iter().any(|ix| ix.len() < 2);
    if too_small {
        return Err(Error::InvalidArgument(format!(
            "dataset {} with {n} samples is too small to give all {c} classes to both splits",
            dataset.name
        )));
    }

    let mut rng = rng_from_seed(spec.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..SPLIT_RETRIES {
        perm.shuffle(&mut rng);
        let (mut train, mut test) = (perm[..n_train].to_vec(), perm[n_train..].to_vec());
        if covers_classes(dataset, &train) && covers_classes(dataset, &test) {
            train.sort_unstable();
            test.sort_unstable();
            let make = |ix: &[usize]| {
                DomainDataset::new(
                    dataset.domain_id,
                    dataset.name.clone(),
                    c,
                    dataset.subset(ix),
                )
            };
            return Ok((make(&train)?, make(&test)?));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no class-covering split of {} found in {SPLIT_RETRIES} attempts",
        dataset.name
    )))
}

fn covers_classes(dataset: &DomainDataset, ix: &[usize]) -> bool {
    let mut seen = vec![false; dataset.num_classes];
    for &i in ix {
        seen[dataset.samples()[i].label] = true;
    }
    seen.iter().all(|&s| s)
}

/// Draws `n` distinct sample indices. With `class_balanced`, per-class counts
/// differ by at most one; the classes receiving the remainder are random.
pub fn sample_indices(
    dataset: &DomainDataset,
    n: usize,
    class_balanced: bool,
    rng: &mut RngState,
) -> Result<Vec<usize>> {
    let total = dataset.len();
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "requested {n} samples from domain {} of size {total}",
            dataset.domain_id
        )));
    }
    if !class_balanced {
        return Ok(index::sample(rng, total, n).into_vec());
    }
    let c = dataset.num_classes;
    if n < c {
        return Err(Error::InvalidArgument(format!(
            "class-balanced batch of {n} cannot cover {c} classes"
        )));
    }
    let mut quota = vec![n / c; c];
    for k in index::sample(rng, c, n % c) {
        quota[k] += 1;
    }
    let by_class = dataset.class_indices();
    let mut out = Vec::with_capacity(n);
    for (class, (pool, &q)) in by_class.iter().zip(&quota).enumerate() {
        if q > pool.len() {
            return Err(Error::InvalidArgument(format!(
                "domain {} has {} samples of class {class}, batch needs {q}",
                dataset.domain_id,
                pool.len()
            )));
        }
        out.extend(
            index::sample(rng, pool.len(), q)
                .into_iter()
                .map(|i| pool[i]),
        );
    }
    Ok(out)
}

pub fn sample_batch(
    dataset: &DomainDataset,
    n: usize,
    class_balanced: bool,
    rng: &mut RngState,
) -> Result<Vec<LabeledSample>> {
    let ix = sample_indices(dataset, n, class_balanced, rng)?;
    Ok(dataset.subset(&ix))
}

/// Pools several domains into one dataset tagged `domain_id`; each sample
/// keeps a copy of its original domain id in `origins`.
pub fn pool_domains(domains: &[DomainDataset]) -> Result<(DomainDataset, Vec<usize>)> {
    let first = domains
        .first()
        .ok_or_else(|| Error::InvalidArgument("no domains to pool".into()))?;
    let mut samples = Vec::new();
    let mut origins = Vec::new();
    for d in domains {
        for s in d.samples() {
            origins.push(s.domain_id);
            samples.push(LabeledSample {
                features: s.features.clone(),
                label: s.label,
                domain_id: usize::MAX,
            });
        }
    }
    let pooled = DomainDataset::new(usize::MAX, "pooled", first.num_classes, samples)?;
    Ok((pooled, origins))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: &[usize]) -> DomainDataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledSample {
                features: vec![i as f64, -(i as f64)],
                label,
                domain_id: 0,
            })
            .collect();
        DomainDataset::new(0, "tiny", 2, samples).unwrap()
    }

    #[test]
    fn duplicate_transform_is_rejected() {
        let err =
            generate_synthetic_domains(SyntheticFamily::RotatedTwoMoons, 2, 20, &[0.0, 0.0], 1)
                .unwrap_err();
        assert!(err.to_string().contains("duplicate transform"));
    }

    #[test]
    fn too_few_samples_per_domain_is_rejected() {
        assert!(generate_synthetic_domains(
            SyntheticFamily::ShiftedGaussians,
            2,
            3,
            &[0.0, 1.0],
            1
        )
        .is_err());
    }

    #[test]
    fn generated_domains_are_balanced() {
        let ds = generate_synthetic_domains(
            SyntheticFamily::RotatedTwoMoons,
            4,
            200,
            &[0.0, 30.0, 60.0, 90.0],
            7,
        )
        .unwrap();
        assert_eq!(ds.len(), 4);
        for d in &ds {
            let counts: Vec<usize> = d.class_indices().iter().map(Vec::len).collect();
            assert_eq!(counts, vec![100, 100]);
        }
    }

    #[test]
    fn missing_class_fails_validation() {
        let samples = vec![LabeledSample {
            features: vec![0.0],
            label: 0,
            domain_id: 0,
        }];
        let err = DomainDataset::new(0, "x", 2, samples).unwrap_err();
        assert!(err.to_string().contains("class 1 absent"));
    }

    #[test]
    fn ten_sample_split_is_seven_three_partition() {
        let d = tiny(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let spec = SplitSpec {
            train_fraction: 0.7,
            seed: 11,
        };
        let (tr, te) = split_train_test(&d, spec).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let mut all: Vec<f64> = tr
            .samples()
            .iter()
            .chain(te.samples())
            .map(|s| s.features[0])
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        let (tr2, te2) = split_train_test(&d, spec).unwrap();
        assert_eq!((tr, te), (tr2, te2));
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_sets() {
        let d = tiny(&[0, 1, 0, 1]);
        let bad = SplitSpec {
            train_fraction: 1.0,
            seed: 0,
        };
        assert!(split_train_test(&d, bad).is_err());
        let d = tiny(&[0, 1, 1]);
        assert!(split_train_test(&d, SplitSpec::default()).is_err());
    }

    #[test]
    fn balanced_batch_of_four_has_two_per_class() {
        let d = tiny(&[0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let mut rng = rng_from_seed(3);
        let b = sample_batch(&d, 4, true, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|s| s.label == 0).count(), 2);
    }

    #[test]
    fn full_draw_returns_whole_domain() {
        let d = tiny(&[0, 1, 0, 1, 1]);
        let mut rng = rng_from_seed(5);
        let mut ix = sample_indices(&d, 5, false, &mut rng).unwrap();
        ix.sort_unstable();
        assert_eq!(ix, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sampling_errors() {
        let d = tiny(&[0, 1, 0, 1, 1]);
        let mut rng = rng_from_seed(5);
        assert!(sample_indices(&d, 6, false, &mut rng).is_err());
        assert!(sample_indices(&d, 1, true, &mut rng).is_err());
    }
}

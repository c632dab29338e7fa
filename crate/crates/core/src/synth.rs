//! Synthetic multi-image subjects with known ages, and the two evaluation
//! protocols: random image-level splits (RS) and subject-exclusive splits
//! (SE).
//!
//! Each raw input is `age_signal(y + shift) * template + identity + noise`:
//!
//! - `age_signal` is a fixed nonlinear embedding of age. Some channels are
//!   monotone in age, the rest sinusoidal, so the ordinal structure is
//!   learnable but the map is not linear.
//! - `template` is a smooth, left-right symmetric spatial pattern per channel,
//!   concentrated around facial landmark positions.
//! - `identity` is a per-subject offset, constant across that subject's
//!   images and broadcast over the grid. `shift` is a per-subject apparent
//!   age offset: some subjects look older than they are.
//! - `noise` is i.i.d. Gaussian per cell.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskout::{FeatureMap, LANDMARK_FRACTIONS};

pub const TENSOR_MAGIC: &[u8; 5] = b"OENCT";
pub const MANIFEST_HEADER: &str = "sample_id,subject_id,age,sigma_n,fold";
pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_subjects: usize,
    pub images_min: usize,
    pub images_max: usize,
    pub max_age: usize,
    /// Images of a subject are within this many years of its base age.
    pub cluster_width: usize,
    /// Standard deviation of the per-cell Gaussian noise.
    pub noise: f64,
    /// Standard deviation of each identity-vector component.
    pub identity_scale: f64,
    /// Standard deviation (years) of the per-subject apparent age shift.
    pub age_shift: f64,
    /// Number of channels carrying a monotone age signal; the remaining
    /// `age_channels - monotone_channels` are sinusoidal.
    pub monotone_channels: usize,
    pub age_channels: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    /// Seed of the age embedding and spatial templates. Datasets that share
    /// it pose the same estimation problem.
    pub embedding_seed: u64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if self.images_min == 0 || self.images_min > self.images_max {
            return fail(format!(
                "bad images-per-subject range {}..={}",
                self.images_min, self.images_max
            ));
        }
        if self.max_age < 2 {
            return fail("max_age must be at least 2".into());
        }
        if self.c_in == 0 || self.height == 0 || self.width == 0 {
            return fail("input dims must be positive".into());
        }
        if self.age_channels > self.c_in || self.monotone_channels > self.age_channels {
            return fail(format!(
                "need monotone_channels <= age_channels <= c_in, got {} / {} / {}",
                self.monotone_channels, self.age_channels, self.c_in
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("identity_scale", self.identity_scale),
            ("age_shift", self.age_shift),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: u32,
    pub identity_vector: Vec<f64>,
    pub base_age: usize,
    /// Apparent age offset in years.
    pub age_shift: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u32,
    pub subject_id: u32,
    pub age: usize,
    pub sigma_n: f64,
    pub input: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: PopulationSpec,
    pub subjects: Vec<Subject>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum ChannelKind {
    Monotone { gamma: f64 },
    Sinusoid { period: f64, phase: f64 },
    Blank,
}

/// The fixed age-to-appearance map shared by every dataset with the same
/// embedding seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeEmbedding {
    max_age: usize,
    kinds: Vec<ChannelKind>,
    /// `c_in` templates of `H * W` cells each, mean 1.
    templates: Vec<Vec<f64>>,
}

impl AgeEmbedding {
    pub fn new(spec: &PopulationSpec) -> AgeEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.embedding_seed);
        let kinds = (0..spec.c_in)
            .map(|c| {
                if c < spec.monotone_channels {
                    ChannelKind::Monotone {
                        gamma: rng.gen_range(0.6..1.6),
                    }
                } else if c < spec.age_channels {
                    ChannelKind::Sinusoid {
                        period: rng.gen_range(0.3..0.9) * spec.max_age as f64,
                        phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    }
                } else {
                    ChannelKind::Blank
                }
            })
            .collect();
        let (h, w) = (spec.height, spec.width);
        let templates = (0..spec.c_in)
            .map(|_| {
                let (fx, fy) = LANDMARK_FRACTIONS[rng.gen_range(0..LANDMARK_FRACTIONS.len())];
                let (cx, cy) = (fx * (h - 1) as f64, fy * (w - 1) as f64);
                let spread = rng.gen_range(0.12..0.3) * h.max(w) as f64;
                let mut t = vec![0.0; h * w];
                for x in 0..h {
                    for y in 0..w {
                        let blob = |col: usize| {
                            let d2 = (x as f64 - cx).powi(2) + (col as f64 - cy).powi(2);
                            (-d2 / (2.0 * spread * spread)).exp()
                        };
                        // mirrored pair keeps the template left-right symmetric
                        t[x * w + y] = 0.2 + (blob(y) + blob(w - 1 - y));
                    }
                }
                let mean = t.iter().sum::<f64>() / t.len() as f64;
                t.iter_mut().for_each(|v| *v /= mean);
                t
            })
            .collect();
        AgeEmbedding {
            max_age: spec.max_age,
            kinds,
            templates,
        }
    }

    /// Per-channel amplitude for a (possibly fractional) apparent age.
    pub fn amplitudes(&self, age: f64) -> Vec<f64> {
        let u = ((age - 1.0) / (self.max_age - 1) as f64).clamp(0.0, 1.0);
        self.kinds
            .iter()
            .map(|k| match *k {
                ChannelKind::Monotone { gamma } => 2.0 * u.powf(gamma) - 1.0,
                ChannelKind::Sinusoid { period, phase } => {
                    (std::f64::consts::TAU * age / period + phase).sin()
                }
                ChannelKind::Blank => 0.0,
            })
            .collect()
    }

    pub fn render(&self, age: f64, identity: &[f64], height: usize, width: usize) -> Vec<f64> {
        let cells = height * width;
        let amps = self.amplitudes(age);
        let mut data = Vec::with_capacity(amps.len() * cells);
        for (c, a) in amps.iter().enumerate() {
            data.extend(self.templates[c].iter().map(|t| a * t + identity[c]));
        }
        data
    }
}

/// Generates a dataset. Pure function of `spec`.
pub fn generate(spec: &PopulationSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let embedding = AgeEmbedding::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.max_age as i64;
    let w = spec.cluster_width as i64;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut samples = Vec::new();
    for sid in 0..spec.n_subjects as u32 {
        let base_age = rng.gen_range(1..=spec.max_age);
        let n_images = rng.gen_range(spec.images_min..=spec.images_max);
        let identity_vector: Vec<f64> = (0..spec.c_in)
            .map(|_| spec.identity_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let age_shift = spec.age_shift * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..n_images {
            let age = (base_age as i64 + rng.gen_range(-w..=w)).clamp(1, k) as usize;
            let sigma_n = rng.gen_range(1.0..=5.0);
            let mut data = embedding.render(
                age as f64 + age_shift,
                &identity_vector,
                spec.height,
                spec.width,
            );
            if spec.noise > 0.0 {
                for v in &mut data {
                    *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            samples.push(Sample {
                id: samples.len() as u32,
                subject_id: sid,
                age,
                sigma_n,
                input: FeatureMap::new(spec.c_in, spec.height, spec.width, data)?,
            });
        }
        subjects.push(Subject {
            id: sid,
            identity_vector,
            base_age,
            age_shift,
            n_images,
        });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        subjects,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Random image-level split; subjects may straddle train and test.
    #[serde(rename = "RS")]
    RandomSplit,
    /// Subject-exclusive split.
    #[serde(rename = "SE")]
    SubjectExclusive,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Protocol::RandomSplit),
            "se" => Ok(Protocol::SubjectExclusive),
            other => Err(Error::InvalidConfig(format!(
                "unknown protocol '{other}' (expected rs or se)"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::RandomSplit => "RS",
            Protocol::SubjectExclusive => "SE",
        })
    }
}

/// With `folds >= 2` the split is k-fold over images (RS) or subjects (SE)
/// and `test_fraction` is ignored. With `folds == 1` it is a single holdout
/// with `test_fraction` of the images (RS) or subjects (SE) in test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub test_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

/// Sample indices of one train/test fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SyntheticDataset {
    pub fn subject_ids(&self, idx: &[usize]) -> BTreeSet<u32> {
        idx.iter().map(|&i| self.samples[i].subject_id).collect()
    }
}

/// Partition id of every sample: the fold in which it is a test sample, or
/// `folds` for holdout train-only samples.
pub fn partition(dataset: &SyntheticDataset, spec: &SplitSpec) -> Result<Vec<usize>> {
    if spec.folds == 0 {
        return Err(Error::Contract("folds must be positive".into()));
    }
    if spec.folds == 1 && !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "holdout test fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = dataset.samples.len();
    // Units being split: images for RS, subjects for SE.
    let units = match spec.protocol {
        Protocol::RandomSplit => n,
        Protocol::SubjectExclusive => dataset.subjects.len(),
    };
    if spec.protocol == Protocol::SubjectExclusive && units < spec.folds.max(2) {
        return Err(Error::Contract(format!(
            "subject-exclusive split needs at least {} subjects, have {units}",
            spec.folds.max(2)
        )));
    }
    if units < spec.folds {
        return Err(Error::Contract(format!("{units} units for {} folds", spec.folds)));
    }
    let mut order: Vec<usize> = (0..units).collect();
    order.shuffle(&mut rng);
    let mut unit_part = vec![0usize; units];
    if spec.folds == 1 {
        let n_test = ((units as f64 * spec.test_fraction).round() as usize).clamp(1, units - 1);
        for (pos, &u) in order.iter().enumerate() {
            unit_part[u] = if pos < n_test { 0 } else { 1 };
        }
    } else {
        for (pos, &u) in order.iter().enumerate() {
            unit_part[u] = pos * spec.folds / units;
        }
    }
    let subject_index: BTreeMap<u32, usize> = dataset
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();
    Ok(dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| match spec.protocol {
            Protocol::RandomSplit => unit_part[i],
            Protocol::SubjectExclusive => unit_part[subject_index[&s.subject_id]],
        })
        .collect())
}

/// Train/test folds under `spec`.
pub fn split(dataset: &SyntheticDataset, spec: &SplitSpec) -> Result<Vec<Fold>> {
    let parts = partition(dataset, spec)?;
    Ok(folds_from_partition(&parts, spec.folds))
}

pub fn folds_from_partition(parts: &[usize], folds: usize) -> Vec<Fold> {
    (0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..parts.len()).partition(|&i| parts[i] == f);
            Fold { train, test }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    version: u32,
    spec: PopulationSpec,
    split: SplitSpec,
    subjects: Vec<SubjectRow>,
    partitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SubjectRow {
    id: u32,
    base_age: usize,
    age_shift: f64,
    n_images: usize,
    identity_vector: Vec<f64>,
}

/// Writes `dir/meta.json`, `dir/manifest.csv` and one `dir/part_<p>.bin`
/// tensor file per partition (see [`partition`]).
pub fn save_dataset(dataset: &SyntheticDataset, split_spec: &SplitSpec, dir: &Path) -> Result<()> {
    let parts = partition(dataset, split_spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_parts = if split_spec.folds == 1 { 2 } else { split_spec.folds };
    let meta = Meta {
        version: META_VERSION,
        spec: dataset.spec.clone(),
        split: *split_spec,
        subjects: dataset
            .subjects
            .iter()
            .map(|s| SubjectRow {
                id: s.id,
                base_age: s.base_age,
                age_shift: s.age_shift,
                n_images: s.n_images,
                identity_vector: s.identity_vector.clone(),
            })
            .collect(),
        partitions: n_parts,
    };
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;

    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (s, p) in dataset.samples.iter().zip(&parts) {
        let _ = writeln!(manifest, "{},{},{},{},{}", s.id, s.subject_id, s.age, s.sigma_n, p);
    }
    write_file(&dir.join("manifest.csv"), manifest.as_bytes())?;

    let spec = &dataset.spec;
    for p in 0..n_parts {
        let members: Vec<&Sample> = dataset
            .samples
            .iter()
            .zip(&parts)
            .filter(|(_, &q)| q == p)
            .map(|(s, _)| s)
            .collect();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TENSOR_MAGIC);
        for v in [members.len(), spec.c_in, spec.height, spec.width] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in members {
            for v in s.input.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&dir.join(format!("part_{p}.bin")), &bytes)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// A dataset read back from disk together with its stored split.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub dataset: SyntheticDataset,
    pub split: SplitSpec,
    /// Partition id per sample, as in the manifest.
    pub partitions: Vec<usize>,
}

impl StoredDataset {
    pub fn folds(&self) -> Vec<Fold> {
        folds_from_partition(&self.partitions, self.split.folds)
    }
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let fmt_err = |path: PathBuf, reason: String| Error::Format { path, reason };
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text)?;
    if meta.version != META_VERSION {
        return Err(fmt_err(meta_path, format!("unsupported version {}", meta.version)));
    }
    let spec = meta.spec.clone();

    let manifest_path = dir.join("manifest.csv");
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(fmt_err(manifest_path, "missing manifest header".into()));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse_err = || fmt_err(manifest_path.clone(), format!("bad row '{line}'"));
        if cols.len() != 5 {
            return Err(parse_err());
        }
        let id: u32 = cols[0].parse().map_err(|_| parse_err())?;
        let subject_id: u32 = cols[1].parse().map_err(|_| parse_err())?;
        let age: usize = cols[2].parse().map_err(|_| parse_err())?;
        let sigma_n: f64 = cols[3].parse().map_err(|_| parse_err())?;
        let part: usize = cols[4].parse().map_err(|_| parse_err())?;
        if part >= meta.partitions {
            return Err(parse_err());
        }
        rows.push((id, subject_id, age, sigma_n, part));
    }

    let cells = spec.c_in * spec.height * spec.width;
    let mut tensors: Vec<std::vec::IntoIter<Vec<f64>>> = Vec::new();
    for p in 0..meta.partitions {
        let path = dir.join(format!("part_{p}.bin"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() < 21 || &bytes[..5] != TENSOR_MAGIC {
            return Err(fmt_err(path, "missing OENCT magic".into()));
        }
        let hdr: Vec<usize> = bytes[5..21]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if hdr[1..] != [spec.c_in, spec.height, spec.width] || bytes.len() != 21 + 8 * hdr[0] * cells {
            return Err(fmt_err(path, "tensor header does not match meta".into()));
        }
        let values: Vec<f64> = bytes[21..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let per_sample: Vec<Vec<f64>> = values.chunks_exact(cells).map(<[f64]>::to_vec).collect();
        tensors.push(per_sample.into_iter());
    }

    let mut samples = Vec::with_capacity(rows.len());
    let mut partitions = Vec::with_capacity(rows.len());
    for (id, subject_id, age, sigma_n, part) in rows {
        let data = tensors[part].next().ok_or_else(|| {
            fmt_err(dir.join(format!("part_{part}.bin")), "fewer tensors than manifest rows".into())
        })?;
        samples.push(Sample {
            id,
            subject_id,
            age,
            sigma_n,
            input: FeatureMap::new(spec.c_in, spec.height, spec.width, data)?,
        });
        partitions.push(part);
    }
    let subjects = meta
        .subjects
        .into_iter()
        .map(|s| Subject {
            id: s.id,
            identity_vector: s.identity_vector,
            base_age: s.base_age,
            age_shift: s.age_shift,
            n_images: s.n_images,
        })
        .collect();
    Ok(StoredDataset {
        dataset: SyntheticDataset {
            spec,
            subjects,
            samples,
        },
        split: meta.split,
        partitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> PopulationSpec {
        PopulationSpec {
            n_subjects: 40,
            images_min: 2,
            images_max: 5,
            max_age: 101,
            cluster_width: 3,
            noise: 0.3,
            identity_scale: 0.5,
            age_shift: 2.0,
            monotone_channels: 2,
            age_channels: 4,
            c_in: 6,
            height: 7,
            width: 7,
            embedding_seed: 17,
            seed: 3,
        }
    }

    #[test]
    fn deterministic_age_signal() {
        let spec = PopulationSpec {
            noise: 0.0,
            identity_scale: 0.0,
            age_shift: 0.0,
            images_min: 1,
            images_max: 1,
            n_subjects: 300,
            ..small_spec()
        };
        let ds = generate(&spec).unwrap();
        let mut by_age: BTreeMap<usize, &Sample> = BTreeMap::new();
        let mut checked = 0;
        for s in &ds.samples {
            if let Some(prev) = by_age.insert(s.age, s) {
                assert_eq!(prev.input, s.input);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_cluster_width_shares_age() {
        let ds = generate(&PopulationSpec {
            cluster_width: 0,
            ..small_spec()
        })
        .unwrap();
        for s in &ds.samples {
            assert_eq!(s.age, ds.subjects[s.subject_id as usize].base_age);
        }
    }

    #[test]
    fn sample_invariants() {
        let ds = generate(&small_spec()).unwrap();
        for s in &ds.samples {
            let base = ds.subjects[s.subject_id as usize].base_age as i64;
            assert!((s.age as i64 - base).abs() <= 3);
            assert!((1..=101).contains(&s.age));
            assert!((1.0..=5.0).contains(&s.sigma_n));
        }
        let total: usize = ds.subjects.iter().map(|s| s.n_images).sum();
        assert_eq!(total, ds.samples.len());
    }

    #[test]
    fn templates_are_mirror_symmetric() {
        let e = AgeEmbedding::new(&small_spec());
        let data = e.render(37.0, &[0.0; 6], 7, 7);
        let f = FeatureMap::new(6, 7, 7, data).unwrap();
        assert_eq!(f.mirrored(), f);
    }

    #[test]
    fn se_folds_are_subject_exclusive() {
        let ds = generate(&small_spec()).unwrap();
        let spec = SplitSpec {
            protocol: Protocol::SubjectExclusive,
            test_fraction: 0.2,
            folds: 5,
            seed: 1,
        };
        let folds = split(&ds, &spec).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = BTreeSet::new();
        for f in &folds {
            let a = ds.subject_ids(&f.train);
            let b = ds.subject_ids(&f.test);
            assert!(a.is_disjoint(&b));
            assert_eq!(f.train.len() + f.test.len(), ds.samples.len());
            seen.extend(f.test.iter().copied());
        }
        assert_eq!(seen.len(), ds.samples.len());
    }

    #[test]
    fn se_needs_enough_subjects() {
        let ds = generate(&PopulationSpec {
            n_subjects: 3,
            ..small_spec()
        })
        .unwrap();
        let spec = SplitSpec {
            protocol: Protocol::SubjectExclusive,
            test_fraction: 0.2,
            folds: 5,
            seed: 1,
        };
        assert!(matches!(split(&ds, &spec), Err(Error::Contract(_))));
    }

    #[test]
    fn rs_holdout_size() {
        let ds = generate(&small_spec()).unwrap();
        let n = ds.samples.len();
        let spec = SplitSpec {
            protocol: Protocol::RandomSplit,
            test_fraction: 0.2,
            folds: 1,
            seed: 9,
        };
        let folds = split(&ds, &spec).unwrap();
        assert_eq!(folds[0].test.len(), (n as f64 * 0.2).round() as usize);
        assert_eq!(folds[0].train.len() + folds[0].test.len(), n);
    }

    #[test]
    fn split_is_seeded() {
        let ds = generate(&small_spec()).unwrap();
        let spec = SplitSpec {
            protocol: Protocol::RandomSplit,
            test_fraction: 0.2,
            folds: 1,
            seed: 9,
        };
        assert_eq!(split(&ds, &spec).unwrap(), split(&ds, &spec).unwrap());
        let other = SplitSpec { seed: 10, ..spec };
        assert_ne!(split(&ds, &spec).unwrap(), split(&ds, &other).unwrap());
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(generate(&PopulationSpec {
            images_min: 4,
            images_max: 2,
            ..small_spec()
        })
        .is_err());
        assert!(generate(&PopulationSpec {
            age_channels: 9,
            ..small_spec()
        })
        .is_err());
        assert!(generate(&PopulationSpec {
            noise: -1.0,
            ..small_spec()
        })
        .is_err());
    }
}

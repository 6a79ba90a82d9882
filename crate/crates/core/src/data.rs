//! Multi-modal datasets: in-memory types, the synthetic generator and the
//! manifest + CSV file format.
//!
//! A dataset directory holds `manifest.toml` and one CSV per modality and
//! split. Vector modalities use the header `instance_id,label,f0..f{d-1}`;
//! point-set modalities add a `point_index` column and store one row per
//! point, grouped by instance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    Vector,
    PointSet,
}

/// Name, sample kind and feature width of one modality. For point sets
/// `dim` is the width of a single point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    pub dim: usize,
}

/// Unordered collection of `n_points >= 1` points of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct SetSample<T> {
    point_dim: usize,
    points: Vec<T>,
}

impl<T: Scalar> SetSample<T> {
    pub fn new(point_dim: usize, points: Vec<T>) -> Result<Self> {
        if point_dim == 0 || points.is_empty() || !points.len().is_multiple_of(point_dim) {
            return Err(Error::contract(format!(
                "point set needs at least one point of width {point_dim}, got {} values",
                points.len()
            )));
        }
        Ok(SetSample { point_dim, points })
    }

    pub fn from_points<P: AsRef<[T]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.as_ref().len());
        if points.iter().any(|p| p.as_ref().len() != dim) {
            return Err(Error::contract("points of a set must share one width"));
        }
        Self::new(dim, points.iter().flat_map(|p| p.as_ref().iter().copied()).collect())
    }

    pub fn point_dim(&self) -> usize {
        self.point_dim
    }

    pub fn n_points(&self) -> usize {
        self.points.len() / self.point_dim
    }

    /// Row-major `n_points x point_dim` values.
    pub fn values(&self) -> &[T] {
        &self.points
    }

    pub fn points(&self) -> impl Iterator<Item = &[T]> {
        self.points.chunks(self.point_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Sample<T> {
    Vector(Vec<T>),
    Points(SetSample<T>),
}

impl<T: Scalar> Sample<T> {
    pub fn kind(&self) -> ModalityKind {
        match self {
            Sample::Vector(_) => ModalityKind::Vector,
            Sample::Points(_) => ModalityKind::PointSet,
        }
    }

    /// Vector length, or point width for point sets.
    pub fn dim(&self) -> usize {
        match self {
            Sample::Vector(v) => v.len(),
            Sample::Points(s) => s.point_dim(),
        }
    }
}

/// One object observed in every modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance<T> {
    pub id: usize,
    pub label: usize,
    pub samples: Vec<Sample<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    modalities: Vec<ModalitySpec>,
    num_classes: usize,
    instances: Vec<Instance<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(modalities: Vec<ModalitySpec>, num_classes: usize, instances: Vec<Instance<T>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::contract("dataset needs at least one modality"));
        }
        if num_classes == 0 {
            return Err(Error::contract("dataset needs at least one class"));
        }
        for inst in &instances {
            if inst.label >= num_classes {
                return Err(Error::contract(format!(
                    "instance {} has label {} but only {num_classes} classes exist",
                    inst.id, inst.label
                )));
            }
            if inst.samples.len() != modalities.len() {
                return Err(Error::contract(format!(
                    "instance {} has {} samples, expected {}",
                    inst.id,
                    inst.samples.len(),
                    modalities.len()
                )));
            }
            for (spec, sample) in modalities.iter().zip(&inst.samples) {
                if sample.kind() != spec.kind || sample.dim() != spec.dim {
                    return Err(Error::ModalityDim {
                        modality: spec.name.clone(),
                        expected: spec.dim,
                        actual: sample.dim(),
                    });
                }
            }
        }
        Ok(Dataset {
            modalities,
            num_classes,
            instances,
        })
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn instances(&self) -> &[Instance<T>] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        modality_index(&self.modalities, name)
    }

    pub fn instance_by_id(&self, id: usize) -> Option<&Instance<T>> {
        self.instances.iter().find(|i| i.id == id)
    }
}

pub fn modality_index(specs: &[ModalitySpec], name: &str) -> Result<usize> {
    specs
        .iter()
        .position(|m| m.name == name)
        .ok_or_else(|| Error::UnknownModality {
            name: name.to_string(),
            valid: specs.iter().map(|m| m.name.clone()).collect(),
        })
}

/// Train and test halves of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedModality {
    pub name: String,
    pub kind: ModalityKind,
    pub dim: usize,
    /// Points per sample; ignored for vector modalities.
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub modalities: Vec<GeneratedModality>,
    pub n_train: usize,
    pub n_test: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub nuisance_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 4,
            modalities: vec![
                GeneratedModality {
                    name: "image".into(),
                    kind: ModalityKind::Vector,
                    dim: 24,
                    points: default_points(),
                },
                GeneratedModality {
                    name: "mesh".into(),
                    kind: ModalityKind::Vector,
                    dim: 16,
                    points: default_points(),
                },
                GeneratedModality {
                    name: "point".into(),
                    kind: ModalityKind::PointSet,
                    dim: 6,
                    points: default_points(),
                },
            ],
            n_train: 200,
            n_test: 100,
            latent_dim: 8,
            noise_sigma: 0.1,
            nuisance_strength: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "at least one modality is required"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return Err(Error::config(format!("modalities[{i}].dim"), "must be positive"));
            }
            if m.kind == ModalityKind::PointSet && m.points == 0 {
                return Err(Error::config(format!("modalities[{i}].points"), "must be positive"));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config(
                    format!("modalities[{i}].name"),
                    format!("duplicate modality name `{}`", m.name),
                ));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.nuisance_strength >= 0.0 && self.nuisance_strength.is_finite()) {
            return Err(Error::config("nuisance_strength", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ModalitySpec> {
        self.modalities
            .iter()
            .map(|m| ModalitySpec {
                name: m.name.clone(),
                kind: m.kind,
                dim: m.dim,
            })
            .collect()
    }
}

struct ModalityMap {
    /// `dim x latent` projection.
    projection: Vec<f64>,
    offset: Vec<f64>,
    /// Unit-length class-agnostic direction.
    nuisance: Vec<f64>,
    /// `points x dim` offsets shared by every sample of a point-set modality.
    template: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draws a reproducible train/test pair from class prototypes pushed through
/// one fixed random affine map per modality.
///
/// Each sample is `A_m p_y + b_m + nuisance_strength * eta * u_m + noise`,
/// with `eta` a fresh scalar per (instance, modality). Point sets place a
/// fixed per-modality template of points around that base vector.
pub fn generate_synthetic<T: Scalar>(cfg: &GeneratorConfig) -> Result<Splits<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.latent_dim;

    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| normal_vec(&mut rng, h, 1.0)).collect();
    let maps: Vec<ModalityMap> = cfg
        .modalities
        .iter()
        .map(|m| {
            let projection = normal_vec(&mut rng, m.dim * h, 1.0 / (h as f64).sqrt());
            let offset = normal_vec(&mut rng, m.dim, 1.0);
            let mut nuisance = normal_vec(&mut rng, m.dim, 1.0);
            let norm = nuisance
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            nuisance.iter_mut().for_each(|v| *v /= norm);
            let template = match m.kind {
                ModalityKind::Vector => Vec::new(),
                ModalityKind::PointSet => normal_vec(&mut rng, m.points * m.dim, 1.0),
            };
            ModalityMap {
                projection,
                offset,
                nuisance,
                template,
            }
        })
        .collect();

    let mut make_split = |first_id: usize, n: usize| -> Result<Dataset<T>> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
        labels.shuffle(&mut rng);
        let instances = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let samples = cfg
                    .modalities
                    .iter()
                    .zip(&maps)
                    .map(|(m, map)| {
                        let eta: f64 = rng.sample(StandardNormal);
                        let base: Vec<f64> = (0..m.dim)
                            .map(|r| {
                                let row = &map.projection[r * h..(r + 1) * h];
                                let proj: f64 = row.iter().zip(&prototypes[label]).map(|(a, p)| a * p).sum();
                                proj + map.offset[r] + cfg.nuisance_strength * eta * map.nuisance[r]
                            })
                            .collect();
                        let cast = |v: f64| T::from_f64_lossy(v);
                        match m.kind {
                            ModalityKind::Vector => {
                                let noise = normal_vec(&mut rng, m.dim, cfg.noise_sigma);
                                Ok(Sample::Vector(
                                    base.iter().zip(noise).map(|(b, e)| cast(b + e)).collect(),
                                ))
                            }
                            ModalityKind::PointSet => {
                                let noise = normal_vec(&mut rng, m.points * m.dim, cfg.noise_sigma);
                                let values = (0..m.points * m.dim)
                                    .map(|j| cast(base[j % m.dim] + map.template[j] + noise[j]))
                                    .collect();
                                Ok(Sample::Points(SetSample::new(m.dim, values)?))
                            }
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Instance {
                    id: first_id + i,
                    label,
                    samples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(cfg.specs(), cfg.num_classes, instances)
    };

    let train = make_split(0, cfg.n_train)?;
    let test = make_split(cfg.n_train, cfg.n_test)?;
    Ok(Splits { train, test })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModality {
    pub name: String,
    pub kind: ModalityKind,
    pub dim: usize,
    pub files: SplitFiles,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

/// Contents of `manifest.toml`. File paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub counts: SplitCounts,
    pub modalities: Vec<ManifestModality>,
}

impl DatasetManifest {
    pub fn specs(&self) -> Vec<ModalitySpec> {
        self.modalities
            .iter()
            .map(|m| ModalitySpec {
                name: m.name.clone(),
                kind: m.kind,
                dim: m.dim,
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if manifest.modalities.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "manifest lists no modalities".into(),
            });
        }
        if let Some(m) = manifest.modalities.iter().find(|m| m.dim == 0) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("modality `{}` has zero dim", m.name),
            });
        }
        Ok(manifest)
    }
}

fn header(kind: ModalityKind, dim: usize) -> Vec<String> {
    let mut h = vec!["instance_id".to_string(), "label".to_string()];
    if kind == ModalityKind::PointSet {
        h.push("point_index".into());
    }
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

fn write_modality_csv<T: Scalar>(path: &Path, data: &Dataset<T>, m: usize) -> Result<()> {
    let spec = &data.modalities[m];
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header(spec.kind, spec.dim))
        .map_err(|e| csv_error(path, e))?;
    for inst in &data.instances {
        let prefix = [inst.id.to_string(), inst.label.to_string()];
        match &inst.samples[m] {
            Sample::Vector(v) => {
                let row = prefix.iter().cloned().chain(v.iter().map(|x| x.to_decimal()));
                w.write_record(row).map_err(|e| csv_error(path, e))?;
            }
            Sample::Points(set) => {
                for (j, p) in set.points().enumerate() {
                    let row = prefix
                        .iter()
                        .cloned()
                        .chain(std::iter::once(j.to_string()))
                        .chain(p.iter().map(|x| x.to_decimal()));
                    w.write_record(row).map_err(|e| csv_error(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes `manifest.toml` and `<modality>_<split>.csv` files into `dir`.
/// Returns the manifest path.
pub fn write_dataset<T: Scalar>(dir: &Path, splits: &Splits<T>) -> Result<PathBuf> {
    let (train, test) = (&splits.train, &splits.test);
    if train.modalities != test.modalities || train.num_classes != test.num_classes {
        return Err(Error::contract("train and test splits describe different modalities"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modalities = Vec::new();
    for (m, spec) in train.modalities.iter().enumerate() {
        let files = SplitFiles {
            train: PathBuf::from(format!("{}_train.csv", spec.name)),
            test: PathBuf::from(format!("{}_test.csv", spec.name)),
        };
        write_modality_csv(&dir.join(&files.train), train, m)?;
        write_modality_csv(&dir.join(&files.test), test, m)?;
        modalities.push(ManifestModality {
            name: spec.name.clone(),
            kind: spec.kind,
            dim: spec.dim,
            files,
        });
    }
    let manifest = DatasetManifest {
        num_classes: train.num_classes,
        counts: SplitCounts {
            train: train.len(),
            test: test.len(),
        },
        modalities,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Rows of one modality file, keyed by instance in file order.
struct ParsedModality<T> {
    order: Vec<(usize, usize)>,
    samples: BTreeMap<usize, Sample<T>>,
}

fn parse_field<V: std::str::FromStr>(path: &Path, line: u64, field: &str, what: &str) -> Result<V> {
    field.trim().parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {line}: invalid {what} `{field}`"),
    })
}

fn read_modality_csv<T: Scalar>(
    path: &Path,
    spec: &ManifestModality,
    num_classes: usize,
    expected_rows: usize,
) -> Result<ParsedModality<T>> {
    if !path.is_file() {
        return Err(Error::MissingModalityFile {
            modality: spec.name.clone(),
            path: path.to_path_buf(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let lead = match spec.kind {
        ModalityKind::Vector => 2,
        ModalityKind::PointSet => 3,
    };
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != lead + spec.dim {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            expected: spec.dim,
            actual: headers.len().saturating_sub(lead),
        });
    }
    let expected_header = header(spec.kind, spec.dim);
    if headers.iter().zip(&expected_header).any(|(a, b)| a != b) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header, expected `{}`", expected_header.join(",")),
        });
    }

    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut points: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != lead + spec.dim {
            return Err(Error::DimensionMismatch {
                path: path.to_path_buf(),
                expected: spec.dim,
                actual: record.len().saturating_sub(lead),
            });
        }
        let id: usize = parse_field(path, line, &record[0], "instance_id")?;
        let label: usize = parse_field(path, line, &record[1], "label")?;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                label,
                classes: num_classes,
            });
        }
        let features = record
            .iter()
            .skip(lead)
            .map(|f| {
                T::parse_decimal(f)
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format {
                        path: path.to_path_buf(),
                        msg: format!("line {line}: invalid feature `{f}`"),
                    })
            })
            .collect::<Result<Vec<T>>>()?;

        let new_instance = order.last().is_none_or(|&(last, _)| last != id);
        if new_instance {
            if points.contains_key(&id) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {line}: instance {id} appears more than once"),
                });
            }
            order.push((id, label));
            points.insert(id, Vec::new());
        } else if spec.kind == ModalityKind::Vector {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {line}: instance {id} appears more than once"),
            });
        } else if order.last().map(|&(_, l)| l) != Some(label) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {line}: instance {id} changes label"),
            });
        }
        let buf = points.get_mut(&id).expect("inserted above");
        if spec.kind == ModalityKind::PointSet {
            let index: usize = parse_field(path, line, &record[2], "point_index")?;
            if index != buf.len() / spec.dim {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {line}: point_index {index} out of sequence for instance {id}"),
                });
            }
        }
        buf.extend(features);
    }
    if order.len() != expected_rows {
        return Err(Error::RowCount {
            path: path.to_path_buf(),
            expected: expected_rows,
            actual: order.len(),
        });
    }
    let samples = points
        .into_iter()
        .map(|(id, values)| {
            let sample = match spec.kind {
                ModalityKind::Vector => Sample::Vector(values),
                ModalityKind::PointSet => Sample::Points(SetSample::new(spec.dim, values)?),
            };
            Ok((id, sample))
        })
        .collect::<Result<_>>()?;
    Ok(ParsedModality { order, samples })
}

fn load_split<T: Scalar>(
    base: &Path,
    manifest: &DatasetManifest,
    pick: impl Fn(&SplitFiles) -> &Path,
    expected: usize,
) -> Result<Dataset<T>> {
    let mut parsed = Vec::new();
    for m in &manifest.modalities {
        let path = base.join(pick(&m.files));
        parsed.push((
            path.clone(),
            read_modality_csv::<T>(&path, m, manifest.num_classes, expected)?,
        ));
    }
    let reference = parsed[0].1.order.clone();
    for (path, p) in &parsed[1..] {
        if p.order != reference {
            return Err(Error::Format {
                path: path.clone(),
                msg: "instance ids or labels disagree with the first modality file".into(),
            });
        }
    }
    let mut instances = Vec::with_capacity(reference.len());
    for &(id, label) in &reference {
        let samples = parsed
            .iter_mut()
            .map(|(_, p)| p.samples.remove(&id).expect("ids checked above"))
            .collect();
        instances.push(Instance { id, label, samples });
    }
    Dataset::new(manifest.specs(), manifest.num_classes, instances)
}

/// Reads both splits described by a manifest, validating counts, labels
/// and feature widths.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<Splits<T>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let train = load_split(base, &manifest, |f| &f.train, manifest.counts.train)?;
    let test = load_split(base, &manifest, |f| &f.test, manifest.counts.test)?;
    Ok(Splits { train, test })
}

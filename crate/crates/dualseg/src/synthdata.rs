//! Synthetic ellipsoid-phantom volumes and a bit-exact volume file format.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::maskops::LabelMap;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset needs at least 2 labeled and 2 unlabeled volumes, got N={n}, M={m}")]
    TooFewVolumes { n: usize, m: usize },
    #[error("class count must be >= 2, got {0}")]
    BadClassCount(usize),
    #[error("infeasible geometry: max radius {radius} does not fit extent {extent}")]
    InfeasibleGeometry { radius: f64, extent: usize },
    #[error("{path}: bad magic, expected DSEGVOL")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: String },
    #[error("{path}: malformed header field: {line}")]
    BadHeader { path: PathBuf, line: String },
    #[error("{path}: truncated payload at byte {offset}: expected {expected} bytes, got {actual}")]
    Truncated { path: PathBuf, offset: usize, expected: usize, actual: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Real-valued (W, H, D) image volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Volume { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "labeled" => Some(Split::Labeled),
            "unlabeled" => Some(Split::Unlabeled),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One dataset entry. Unlabeled records keep their generator label on disk
/// for oracle evaluation but never expose it through `label()`.
#[derive(Debug, Clone)]
pub struct VolumeRecord<T> {
    pub id: String,
    pub image: Volume<T>,
    pub split: Split,
    pub classes: usize,
    stored_label: Option<LabelMap>,
}

impl<T: Scalar> VolumeRecord<T> {
    pub fn new(id: String, image: Volume<T>, split: Split, classes: usize, label: Option<LabelMap>) -> Self {
        VolumeRecord { id, image, split, classes, stored_label: label }
    }

    /// Training-visible label: present only for labeled and test splits.
    pub fn label(&self) -> Option<&LabelMap> {
        match self.split {
            Split::Unlabeled => None,
            _ => self.stored_label.as_ref(),
        }
    }

    /// Generator ground truth regardless of split, for oracle checks only.
    pub fn oracle_label(&self) -> Option<&LabelMap> {
        self.stored_label.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub n_labeled: usize,
    pub m_unlabeled: usize,
    pub test_count: usize,
    pub shape: [usize; 3],
    pub classes: usize,
    pub ellipsoids_per_class: (usize, usize),
    /// Radius bounds in voxels.
    pub radius: (f64, f64),
    /// Foreground/background intensity gap in [0, 1].
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk_default(seed: u64) -> Self {
        DatasetSpec {
            n_labeled: 4,
            m_unlabeled: 20,
            test_count: 4,
            shape: [32, 32, 32],
            classes: 2,
            ellipsoids_per_class: (1, 3),
            radius: (4.0, 9.0),
            contrast: 0.6,
            noise_sigma: 0.15,
            seed,
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    class: u8,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates the full dataset: labeled, unlabeled, then test records.
/// Deterministic per (seed, record index).
pub fn generate<T: Scalar>(spec: &DatasetSpec) -> Result<Vec<VolumeRecord<T>>, DataError> {
    if spec.n_labeled < 2 || spec.m_unlabeled < 2 {
        return Err(DataError::TooFewVolumes { n: spec.n_labeled, m: spec.m_unlabeled });
    }
    if spec.classes < 2 {
        return Err(DataError::BadClassCount(spec.classes));
    }
    let min_extent = *spec.shape.iter().min().unwrap();
    if 2.0 * spec.radius.1 > min_extent as f64 {
        return Err(DataError::InfeasibleGeometry { radius: spec.radius.1, extent: min_extent });
    }
    let total = spec.n_labeled + spec.m_unlabeled + spec.test_count;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let split = if index < spec.n_labeled {
            Split::Labeled
        } else if index < spec.n_labeled + spec.m_unlabeled {
            Split::Unlabeled
        } else {
            Split::Test
        };
        let id = format!("vol_{index:04}");
        let (image, label) = generate_one(spec, index as u64);
        records.push(VolumeRecord::new(id, image, split, spec.classes, Some(label)));
    }
    Ok(records)
}

fn generate_one<T: Scalar>(spec: &DatasetSpec, index: u64) -> (Volume<T>, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index));
    let [w, h, d] = spec.shape;
    let mut ellipsoids = Vec::new();
    for class in 1..spec.classes as u8 {
        let count = rng.gen_range(spec.ellipsoids_per_class.0..=spec.ellipsoids_per_class.1);
        for _ in 0..count {
            let mut center = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                radii[a] = rng.gen_range(spec.radius.0..=spec.radius.1);
                let margin = radii[a].min(spec.shape[a] as f64 / 2.0 - 0.5);
                center[a] = rng.gen_range(margin..=(spec.shape[a] as f64 - 1.0 - margin));
            }
            ellipsoids.push(Ellipsoid { center, radii, class });
        }
    }
    // Edge softness: the intensity field crosses its half level exactly on
    // the ellipsoid surface, so midpoint thresholding recovers the label.
    let edge = 0.15;
    let base = 0.5 * (1.0 - spec.contrast);
    let kmax = (spec.classes - 1) as f64;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut image = vec![T::zero(); w * h * d];
    let mut label = vec![0u8; w * h * d];
    for x in 0..w {
        for y in 0..h {
            for z in 0..d {
                let v = (x * h + y) * d + z;
                let mut best_field = 0.0f64;
                let mut best_raw = 0.0f64;
                let mut best_class = 0u8;
                for e in &ellipsoids {
                    let r = (((x as f64 - e.center[0]) / e.radii[0]).powi(2)
                        + ((y as f64 - e.center[1]) / e.radii[1]).powi(2)
                        + ((z as f64 - e.center[2]) / e.radii[2]).powi(2))
                    .sqrt();
                    let f = sigmoid((1.0 - r) / edge);
                    let scaled = f * f64::from(e.class) / kmax;
                    if scaled > best_field {
                        best_field = scaled;
                        best_raw = f;
                        best_class = e.class;
                    }
                }
                if best_raw >= 0.5 {
                    label[v] = best_class;
                }
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * normal.sample(&mut rng)
                } else {
                    0.0
                };
                let intensity = (base + spec.contrast * best_field + noise).clamp(0.0, 1.0);
                image[v] = T::from_f64c(intensity);
            }
        }
    }
    (Volume::new(spec.shape, image), LabelMap::new(spec.shape, label))
}

const MAGIC: &str = "DSEGVOL";
const VERSION: &str = "1";

/// Writes one record: text header, then raw little-endian f64 image, then
/// raw u8 label when present. Round-trips bit-exactly.
pub fn write_volume<T: Scalar>(path: &Path, rec: &VolumeRecord<T>) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let [w, h, d] = rec.image.shape();
    let mut out = Vec::new();
    let has_label = rec.stored_label.is_some();
    write!(
        out,
        "{MAGIC} {VERSION}\nid {}\nsplit {}\nshape {w} {h} {d}\nclasses {}\ndtype f64le\nhas_label {}\n\n",
        rec.id,
        rec.split.as_str(),
        rec.classes,
        u8::from(has_label),
    )
    .map_err(io)?;
    for &v in rec.image.data() {
        out.extend_from_slice(&v.to_f64c().to_le_bytes());
    }
    if let Some(label) = &rec.stored_label {
        out.extend_from_slice(label.data());
    }
    fs::write(path, out).map_err(io)
}

pub fn read_volume<T: Scalar>(path: &Path) -> Result<VolumeRecord<T>, DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let bad_header = |line: &str| DataError::BadHeader { path: path.to_path_buf(), line: line.to_string() };

    // Header is everything up to the first blank line.
    let mut offset = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .ok_or_else(|| DataError::Truncated {
                path: path.to_path_buf(),
                offset,
                expected: 1,
                actual: 0,
            })?;
        let line = String::from_utf8_lossy(&bytes[offset..end]).into_owned();
        offset = end + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line);
    }
    let first = lines.first().ok_or_else(|| bad_header(""))?;
    let mut parts = first.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(DataError::BadMagic { path: path.to_path_buf() });
    }
    let version = parts.next().unwrap_or("");
    if version != VERSION {
        return Err(DataError::BadVersion { path: path.to_path_buf(), version: version.to_string() });
    }

    let mut id = None;
    let mut split = None;
    let mut shape = None;
    let mut classes = None;
    let mut has_label = None;
    for line in &lines[1..] {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad_header(line))?;
        match key {
            "id" => id = Some(rest.to_string()),
            "split" => split = Some(Split::parse(rest).ok_or_else(|| bad_header(line))?),
            "shape" => {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad_header(line)))
                    .collect::<Result<_, _>>()?;
                if dims.len() != 3 {
                    return Err(bad_header(line));
                }
                shape = Some([dims[0], dims[1], dims[2]]);
            }
            "classes" => classes = Some(rest.parse().map_err(|_| bad_header(line))?),
            "dtype" => {
                if rest != "f64le" {
                    return Err(bad_header(line));
                }
            }
            "has_label" => has_label = Some(rest == "1"),
            _ => return Err(bad_header(line)),
        }
    }
    let id = id.ok_or_else(|| bad_header("missing id"))?;
    let split = split.ok_or_else(|| bad_header("missing split"))?;
    let shape = shape.ok_or_else(|| bad_header("missing shape"))?;
    let classes = classes.ok_or_else(|| bad_header("missing classes"))?;
    let has_label = has_label.ok_or_else(|| bad_header("missing has_label"))?;

    let voxels: usize = shape.iter().product();
    let image_bytes = voxels * 8;
    let expected = image_bytes + if has_label { voxels } else { 0 };
    if bytes.len() - offset != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset,
            expected,
            actual: bytes.len() - offset,
        });
    }
    let mut image = Vec::with_capacity(voxels);
    for i in 0..voxels {
        let b: [u8; 8] = bytes[offset + i * 8..offset + i * 8 + 8].try_into().unwrap();
        image.push(T::from_f64c(f64::from_le_bytes(b)));
    }
    let label = has_label.then(|| {
        LabelMap::new(shape, bytes[offset + image_bytes..offset + image_bytes + voxels].to_vec())
    });
    Ok(VolumeRecord::new(id, Volume::new(shape, image), split, classes, label))
}

/// Writes the dataset index: one `id split filename` line per record.
pub fn write_dataset<T: Scalar>(dir: &Path, records: &[VolumeRecord<T>]) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: dir.to_path_buf(), source };
    fs::create_dir_all(dir).map_err(io)?;
    let mut manifest = String::from("DSEGSET 1\n");
    for rec in records {
        let filename = format!("{}.vol", rec.id);
        write_volume(&dir.join(&filename), rec)?;
        manifest.push_str(&format!("{} {} {}\n", rec.id, rec.split.as_str(), filename));
    }
    fs::write(dir.join("manifest.txt"), manifest).map_err(io)
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Vec<VolumeRecord<T>>, DataError> {
    let manifest_path = dir.join("manifest.txt");
    let io = |source| DataError::Io { path: manifest_path.clone(), source };
    let text = fs::read_to_string(&manifest_path).map_err(io)?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if first != "DSEGSET 1" {
        return Err(DataError::BadMagic { path: manifest_path });
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(DataError::BadHeader { path: manifest_path.clone(), line: line.to_string() });
        }
        records.push(read_volume(&dir.join(fields[2]))?);
    }
    Ok(records)
}

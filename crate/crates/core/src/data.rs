//! Datasets: the 2-D two-cluster toy generator, label-noise injection,
//! IDX / CIFAR-10 binary ingestion, CSV round-tripping and normalization.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("dataset has no samples"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside 0..{n_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Copies the given rows (repeats allowed) into `buf`, resizing it.
    pub fn gather(&self, indices: &[usize], buf: &mut Array2<f64>) {
        let d = self.dim();
        if buf.dim() != (indices.len(), d) {
            *buf = Array2::zeros((indices.len(), d));
        }
        let out = buf.as_slice_mut().expect("standard layout");
        for (k, &i) in indices.iter().enumerate() {
            out[k * d..(k + 1) * d].copy_from_slice(self.row(i));
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Array2::zeros((0, 0));
        self.gather(indices, &mut features);
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Deterministic random split into `(first, rest)` with
    /// `round(frac * n)` samples in the first part.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidArgument(format!("split fraction {frac}")));
        }
        let perm = Rng::new(seed).permutation(self.len());
        let k = (frac * self.len() as f64).round() as usize;
        if k == 0 || k == self.len() {
            return Err(Error::InvalidArgument("split leaves an empty part".into()));
        }
        Ok((self.subset(&perm[..k]), self.subset(&perm[k..])))
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            labels,
            self.n_classes,
            self.provenance.clone(),
        )
    }

    /// Writes `x0,...,x{d-1},label` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`Dataset::write_csv`]. The class count is
    /// `max(label) + 1` unless given.
    pub fn read_csv<R: Read>(input: R, n_classes: Option<usize>) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(input);
        let d = r.headers()?.len().saturating_sub(1);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                data.push(rec[j].trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("bad feature `{}`", &rec[j]))
                })?);
            }
            labels.push(rec[d].trim().parse::<usize>().map_err(|_| {
                Error::InvalidArgument(format!("bad label `{}`", &rec[d]))
            })?);
        }
        let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let features = Array2::from_shape_vec((labels.len(), d), data)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Dataset::new(features, labels, c, "csv")
    }
}

fn count_for(frac: f64, n: usize) -> usize {
    // guard against 0.29 * 100 = 28.999...
    ((frac * n as f64) + 1e-9).floor() as usize
}

/// Two unit-covariance Gaussian clusters centered at `(-2, 0)` (class 0) and
/// `(+2, 0)` (class 1). In each class, `floor(outlier_frac * n_per_class)`
/// of the points are outliers drawn around the far side of the other class:
/// `(+6, 0)` for class 0 and `(-6, 0)` for class 1.
pub fn gen_toy2d(seed: u64, n_per_class: usize, outlier_frac: f64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&outlier_frac) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction {outlier_frac} not in [0, 0.5)"
        )));
    }
    let mut rng = Rng::new(seed);
    let n_out = count_for(outlier_frac, n_per_class);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for class in 0..2usize {
        let sign = if class == 0 { -1.0 } else { 1.0 };
        for k in 0..n_per_class {
            let cx = if k < n_per_class - n_out { 2.0 * sign } else { -6.0 * sign };
            data.push(cx + rng.normal());
            data.push(rng.normal());
            labels.push(class);
        }
    }
    let features = Array2::from_shape_vec((2 * n_per_class, 2), data).expect("shape");
    Dataset::new(
        features,
        labels,
        2,
        format!("toy2d(seed={seed}, n_per_class={n_per_class}, outlier_frac={outlier_frac})"),
    )
}

/// Record of which labels were corrupted, for auditing and undoing noise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub indices: Vec<usize>,
    pub original_labels: Vec<usize>,
}

impl NoiseManifest {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Puts the original labels back.
    pub fn restore(&self, noisy: &Dataset) -> Result<Dataset> {
        let mut labels = noisy.labels.clone();
        for (&i, &y) in self.indices.iter().zip(&self.original_labels) {
            labels[i] = y;
        }
        noisy.with_labels(labels)
    }

    /// `index,original_label` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "original_label"])?;
        for (i, y) in self.indices.iter().zip(&self.original_labels) {
            w.write_record(&[i.to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reassigns `floor(frac * n)` uniformly chosen labels to a uniformly chosen
/// different class.
pub fn inject_label_noise(data: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, NoiseManifest)> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidArgument(format!("noise fraction {frac} not in [0, 1]")));
    }
    let k = count_for(frac, data.len());
    if k == 0 {
        return Ok((data.clone(), NoiseManifest::default()));
    }
    if data.n_classes < 2 {
        return Err(Error::InvalidArgument(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut indices = rng.sample_distinct(data.len(), k);
    indices.sort_unstable();
    let mut labels = data.labels.clone();
    let mut original_labels = Vec::with_capacity(k);
    for &i in &indices {
        let old = labels[i];
        // uniform over the other classes
        let mut new = rng.below(data.n_classes - 1);
        if new >= old {
            new += 1;
        }
        original_labels.push(old);
        labels[i] = new;
    }
    Ok((
        data.with_labels(labels)?,
        NoiseManifest {
            indices,
            original_labels,
        },
    ))
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(offset..offset + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        needed: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX unsigned-byte file with the expected magic, returning the
/// dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndims);
    for k in 0..ndims {
        dims.push(read_be_u32(bytes, 4 + 4 * k, path)? as usize);
    }
    let header = 4 + 4 * ndims;
    let payload: usize = dims.iter().product();
    let needed = header + payload;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            expected: needed,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Parses an IDX image/label pair from memory; pixels are scaled to [0, 1].
pub fn parse_idx_pair(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, label_bytes) = parse_idx(labels, IDX_LABELS_MAGIC, labels_path)?;
    let (n, d) = (idims[0], idims[1] * idims[2]);
    if n != ldims[0] {
        return Err(Error::CountMismatch {
            images: n,
            labels: ldims[0],
        });
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let features = Array2::from_shape_vec(
        (n, d),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("payload size checked");
    Dataset::new(
        features,
        labels,
        n_classes,
        format!("idx:{}", images_path.display()),
    )
}

/// Loads an IDX (MNIST layout) image/label file pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    parse_idx_pair(&fs::read(ip)?, &fs::read(lp)?, ip, lp)
}

/// Encodes images (each `rows * cols` bytes) and labels as IDX files.
pub fn encode_idx(images: &[u8], labels: &[u8], rows: u32, cols: u32) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend(n.to_be_bytes());
    img.extend(rows.to_be_bytes());
    img.extend(cols.to_be_bytes());
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend(n.to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

pub const CIFAR_RECORD: usize = 1 + 3072;

/// Loads one or more CIFAR-10 binary batches (label byte followed by 3072
/// pixel bytes per record), scaled to [0, 1].
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: p.to_path_buf(),
                needed: bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD,
                found: bytes.len(),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let features = Array2::from_shape_vec((labels.len(), 3072), data).expect("shape");
    Dataset::new(features, labels, 10, "cifar10")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    /// Per-feature min-max scaling to [0, 1] using training ranges.
    Scale01,
    /// Per-feature zero mean, unit variance using training statistics.
    Standardize,
}

/// Per-feature affine map `x -> (x - shift) / scale` fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    shift: Array1<f64>,
    scale: Array1<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(train: &Dataset, mode: Normalization) -> Self {
        let d = train.dim();
        let x = train.features();
        match mode {
            Normalization::None => Self {
                shift: Array1::zeros(d),
                scale: Array1::ones(d),
            },
            Normalization::Scale01 => {
                let lo = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
                let hi = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
                let scale = (&hi - &lo).mapv(|r| if r > 0.0 { r } else { 1.0 });
                Self { shift: lo, scale }
            }
            Normalization::Standardize => {
                let mean = x.mean_axis(Axis(0)).expect("nonempty");
                let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
                Self {
                    shift: mean,
                    scale: std,
                }
            }
        }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        out.features -= &self.shift;
        out.features /= &self.scale;
        out
    }
}

/// Fits the normalizer on `train` and applies it to both sets.
pub fn split_and_normalize(train: &Dataset, test: &Dataset, mode: Normalization) -> (Dataset, Dataset) {
    let norm = Normalizer::fit(train, mode);
    (norm.apply(train), norm.apply(test))
}

//! Datasets, manifests, class bookkeeping and paired augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::par::{map_range, Exec};
use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Layout of one sample's features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Vector {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FeatureKind {
    pub fn len(&self) -> usize {
        match *self {
            FeatureKind::Vector { dim } => dim,
            FeatureKind::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            FeatureKind::Vector { dim } => vec![dim],
            FeatureKind::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

/// The perturbation applied to produce the student and teacher views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augment {
    /// Additive isotropic Gaussian noise with the given standard deviation.
    Jitter { sigma: f64 },
    /// Horizontal flip (p = 0.5) followed by a random rotation and translation.
    FlipAffine {
        max_rotation_deg: f64,
        max_shift_frac: f64,
    },
    None,
}

impl Augment {
    pub fn default_affine() -> Self {
        Augment::FlipAffine {
            max_rotation_deg: 15.0,
            max_shift_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable position in the dataset; addresses memory-bank rows.
    pub index: usize,
    pub features: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub class_counts: Vec<usize>,
    pub n: usize,
    pub k: usize,
}

impl DatasetStats {
    /// Counts labels; every one of the `k` classes must appear at least once.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        let mut class_counts = vec![0; k];
        for (row, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Validation(format!(
                    "sample {row} has label {y}, outside [0, {k})"
                )));
            }
            class_counts[y] += 1;
        }
        if let Some(empty) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::Validation(format!("class {empty} has no samples")));
        }
        Ok(Self {
            class_counts,
            n: labels.len(),
            k,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub stats: DatasetStats,
    pub kind: FeatureKind,
}

impl Dataset {
    /// Builds a dataset from `(features, label)` pairs, assigning indices in order.
    pub fn from_parts(items: Vec<(Vec<f64>, usize)>, kind: FeatureKind, k: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Validation("dataset is empty".into()));
        }
        let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
        let stats = DatasetStats::from_labels(&labels, k)?;
        let shape = kind.shape();
        let samples = items
            .into_iter()
            .enumerate()
            .map(|(index, (x, label))| {
                if x.len() != kind.len() {
                    return Err(Error::Validation(format!(
                        "sample {index} has {} features, expected {}",
                        x.len(),
                        kind.len()
                    )));
                }
                Ok(Sample {
                    index,
                    features: Tensor::new(shape.clone(), x)?,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            stats,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.stats.k
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// New dataset holding the listed samples, re-indexed from zero.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                (s.features.data().to_vec(), s.label)
            })
            .collect();
        Self::from_parts(items, self.kind, self.stats.k)
    }

    /// Stratified split with `holdout` samples set aside. Per-class holdout
    /// sizes follow largest-remainder rounding; every class keeps at least
    /// one training sample.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if holdout == 0 || holdout >= self.len() {
            return Err(Error::Config(format!(
                "holdout must be in [1, {}), got {holdout}",
                self.len()
            )));
        }
        let quotas = stratified_quotas(&self.stats.class_counts, holdout);
        let mut rng = seed::stream(seed, &[seed::TAG_SPLIT]);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (class, &quota) in quotas.iter().enumerate() {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            members.shuffle(&mut rng);
            let quota = quota.min(members.len() - 1);
            test.extend_from_slice(&members[..quota]);
            train.extend_from_slice(&members[quota..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Stratified `folds`-way partition; returns `(train, test)` for `fold`.
    pub fn kfold(&self, folds: usize, fold: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if folds < 2 || fold >= folds {
            return Err(Error::Config(format!("invalid fold {fold} of {folds}")));
        }
        let mut rng = seed::stream(seed, &[seed::TAG_SPLIT, folds as u64]);
        let mut assignment = vec![0usize; self.len()];
        for class in 0..self.stats.k {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            members.shuffle(&mut rng);
            for (pos, &i) in members.iter().enumerate() {
                assignment[i] = pos % folds;
            }
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| assignment[i] == fold);
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

fn stratified_quotas(counts: &[usize], total: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total - quotas.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        quotas[c] += 1;
        missing -= 1;
    }
    quotas
}

/// Gaussian blobs: one mean per class drawn from N(0, I), samples drawn from
/// N(mean, spread² I). Samples are laid out class by class.
pub fn make_blobs(
    seed: u64,
    k: usize,
    class_counts: &[usize],
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    if dim < 1 {
        return Err(Error::Config("blob dimension must be at least 1".into()));
    }
    if class_counts.len() != k || class_counts.contains(&0) {
        return Err(Error::Config(format!(
            "need {k} positive class counts, got {class_counts:?}"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::Config(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = seed::stream(seed, &[seed::TAG_DATA]);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut items = Vec::with_capacity(class_counts.iter().sum());
    for (label, (&count, mean)) in class_counts.iter().zip(&means).enumerate() {
        for _ in 0..count {
            let x = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spread * z
                })
                .collect();
            items.push((x, label));
        }
    }
    Dataset::from_parts(items, FeatureKind::Vector { dim }, k)
}

/// Reads a `path,label` CSV manifest. Relative paths resolve against the
/// manifest's directory; feature files are `.f32` little-endian vectors for
/// [`FeatureKind::Vector`] or binary PGM (P5) for single-channel images.
pub fn load_manifest(path: &Path, kind: FeatureKind, k: usize) -> Result<Dataset> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Validation(format!(
            "{}: expected header `path,label`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut items = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Manifest {
            row,
            message: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(Error::Manifest {
                row,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let label: usize = record[1].parse().map_err(|_| Error::Manifest {
            row,
            message: format!("label `{}` is not a non-negative integer", &record[1]),
        })?;
        if label >= k {
            return Err(Error::Manifest {
                row,
                message: format!("label {label} outside [0, {k})"),
            });
        }
        let file = base.join(&record[0]);
        let bytes = fs::read(&file).map_err(|e| Error::Manifest {
            row,
            message: format!("cannot read {}: {e}", file.display()),
        })?;
        let features = decode_features(&bytes, kind).map_err(|message| Error::Manifest {
            row,
            message: format!("{}: {message}", file.display()),
        })?;
        items.push((features, label));
    }
    if items.is_empty() {
        return Err(Error::Validation(format!("{}: manifest has no rows", path.display())));
    }
    Dataset::from_parts(items, kind, k)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

fn decode_features(bytes: &[u8], kind: FeatureKind) -> std::result::Result<Vec<f64>, String> {
    match kind {
        FeatureKind::Vector { dim } => {
            if bytes.len() != dim * 4 {
                return Err(format!("expected {} bytes, found {}", dim * 4, bytes.len()));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect())
        }
        FeatureKind::Image {
            channels,
            height,
            width,
        } => {
            if channels != 1 {
                return Err(format!("PGM images are single-channel, config asks for {channels}"));
            }
            let (w, h, pixels) = parse_pgm(bytes)?;
            if (w, h) != (width, height) {
                return Err(format!("image is {w}×{h}, expected {width}×{height}"));
            }
            Ok(pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
        }
    }
}

/// Parses a binary PGM (P5, maxval 255). Returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad PGM header field `{s}`"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("PGM maxval must be 255, found {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let end = start + width * height;
    if end > bytes.len() {
        return Err("PGM raster is truncated".into());
    }
    Ok((width, height, &bytes[start..end]))
}

/// Encodes an 8-bit single-channel image as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Two independently perturbed views of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPair {
    pub x_s: Tensor,
    pub x_t: Tensor,
    pub index: usize,
    pub label: usize,
}

/// Draws the student and teacher views with independent parameters.
pub fn augment_pair<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, augment: Augment) -> AugmentPair {
    let x_s = augment_one(&sample.features, rng, augment);
    let x_t = augment_one(&sample.features, rng, augment);
    AugmentPair {
        x_s,
        x_t,
        index: sample.index,
        label: sample.label,
    }
}

fn augment_one<R: Rng + ?Sized>(x: &Tensor, rng: &mut R, augment: Augment) -> Tensor {
    match augment {
        Augment::None => x.clone(),
        Augment::Jitter { sigma } => {
            let mut out = x.clone();
            if sigma > 0.0 {
                let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                out.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
            }
            out
        }
        Augment::FlipAffine {
            max_rotation_deg,
            max_shift_frac,
        } => {
            let &[_, h, w] = x.shape() else {
                // vectors have no spatial layout
                return x.clone();
            };
            let flip = rng.random_bool(0.5);
            let angle = rng.random_range(-max_rotation_deg..=max_rotation_deg).to_radians();
            let tx = rng.random_range(-max_shift_frac..=max_shift_frac) * w as f64;
            let ty = rng.random_range(-max_shift_frac..=max_shift_frac) * h as f64;
            let flipped = if flip { flip_horizontal(x) } else { x.clone() };
            affine(&flipped, angle, tx, ty)
        }
    }
}

/// Mirrors every channel of a `[C,H,W]` image left to right.
pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let &[c, h, w] = x.shape() else {
        return x.clone();
    };
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for p in 0..c * h {
        for j in 0..w {
            out[p * w + j] = src[p * w + (w - 1 - j)];
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Rotates a `[C,H,W]` image by `angle` radians about its centre, then shifts
/// it by `(tx, ty)` pixels. Bilinear resampling, zero outside the source.
pub fn affine(x: &Tensor, angle: f64, tx: f64, ty: f64) -> Tensor {
    let &[c, h, w] = x.shape() else {
        return x.clone();
    };
    let src = x.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; src.len()];
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: output pixel back to the source
            let dy = oy as f64 - cy - ty;
            let dx = ox as f64 - cx - tx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                let mut v = at(y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx != 0.0 {
                    v += at(y0, x0 + 1.0) * fx * (1.0 - fy);
                }
                if fy != 0.0 {
                    v += at(y0 + 1.0, x0) * (1.0 - fx) * fy;
                }
                if fx != 0.0 && fy != 0.0 {
                    v += at(y0 + 1.0, x0 + 1.0) * fx * fy;
                }
                out[(ch * h + oy) * w + ox] = v;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Epoch-seeded shuffled batches of sample indices. The last partial batch is
/// kept, so every index appears exactly once per epoch.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, &[seed::TAG_SHUFFLE, epoch as u64]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Augments a batch; each sample's views come from its own
/// `(seed, epoch, index)` stream, so the result is independent of `exec`.
pub fn augment_batch(
    dataset: &Dataset,
    indices: &[usize],
    augment: Augment,
    seed: u64,
    epoch: usize,
    exec: Exec,
) -> Vec<AugmentPair> {
    map_range(indices.len(), exec, |i| {
        let sample = &dataset.samples[indices[i]];
        let mut rng = seed::stream(
            seed,
            &[seed::TAG_AUGMENT, epoch as u64, sample.index as u64],
        );
        augment_pair(sample, &mut rng, augment)
    })
}

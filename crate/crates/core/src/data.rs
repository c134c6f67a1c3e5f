//! Labelled/unlabelled datasets, synthetic domain-shift generators and an
//! image-folder loader (`root/<domain>/<class>/<file>`).
//!
//! A sample's id is its row index in the dataset.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::numeric::stream_rng;

pub const DEFAULT_IMAGE_RESOLUTION: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledDataset {
    pub inputs: Array2<f64>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if labels.len() != inputs.nrows() {
            return Err(UfalError::Shape {
                expected: inputs.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(UfalError::ClassIndex {
                class: bad,
                n_classes: class_names.len(),
            });
        }
        Ok(Self {
            inputs,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn sample(&self, id: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(id)
    }

    /// Drops the labels; used to hand target data to the adaptation loop.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            inputs: self.inputs.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// Sample ids grouped by true label.
    pub fn ids_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (id, &label) in self.labels.iter().enumerate() {
            groups[label].push(id);
        }
        groups
    }

    /// Writes `id,x0,...,x{d-1},label` rows.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.input_dim()).map(|d| format!("x{d}")));
        header.push("label".to_string());
        writer.write_record(&header)?;
        for (id, (row, label)) in self.inputs.outer_iter().zip(&self.labels).enumerate() {
            let mut record = vec![id.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            record.push(label.to_string());
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c}")).collect()
}

fn two_moons(n: usize, noise: f64, rng: &mut impl Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
    let n_upper = n / 2;
    let n_lower = n - n_upper;
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let spaced = |i: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = spaced(i, n_upper);
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = spaced(i, n_lower);
        points.push([1.0 - t.cos(), 1.0 - t.sin() - 0.5]);
        labels.push(1);
    }
    for p in &mut points {
        p[0] += normal.sample(rng);
        p[1] += normal.sample(rng);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    (
        order.iter().map(|&i| points[i]).collect(),
        order.iter().map(|&i| labels[i]).collect(),
    )
}

fn to_dataset(points: Vec<[f64; 2]>, labels: Vec<usize>) -> LabeledDataset {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let inputs = Array2::from_shape_vec((points.len(), 2), flat).expect("n x 2");
    LabeledDataset::new(inputs, labels, class_names(2)).expect("labels in range")
}

/// Two-moons source domain and a target domain drawn from the same generator
/// and rotated by `rotation_degrees` about the origin. Target labels are kept
/// for evaluation only.
pub fn make_two_moons_shift(
    n_per_domain: usize,
    rotation_degrees: f64,
    noise: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_per_domain < 2 {
        return Err(UfalError::InvalidArgument("need at least 2 samples per domain".into()));
    }
    if !(0.0..180.0).contains(&rotation_degrees) {
        return Err(UfalError::InvalidArgument(format!(
            "rotation {rotation_degrees} outside [0, 180)"
        )));
    }
    let (src_points, src_labels) = two_moons(n_per_domain, noise, &mut stream_rng(seed, 1));
    let (mut tgt_points, tgt_labels) = two_moons(n_per_domain, noise, &mut stream_rng(seed, 2));
    let (sin, cos) = rotation_degrees.to_radians().sin_cos();
    for p in &mut tgt_points {
        *p = [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]];
    }
    Ok((to_dataset(src_points, src_labels), to_dataset(tgt_points, tgt_labels)))
}

/// Gaussian-blob shift: class means are shared, target means are translated
/// by `mean_shift` along every axis and variances scaled by `covariance_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobShift {
    pub n_classes: usize,
    pub n_per_class: usize,
    #[serde(default = "default_blob_dim")]
    pub dim: usize,
    pub mean_shift: f64,
    pub covariance_scale: f64,
    /// Class means are drawn uniformly from `[-spread, spread]^dim`.
    #[serde(default = "default_blob_spread")]
    pub spread: f64,
    pub seed: u64,
}

fn default_blob_dim() -> usize {
    2
}

fn default_blob_spread() -> f64 {
    8.0
}

impl BlobShift {
    pub fn new(n_classes: usize, n_per_class: usize, mean_shift: f64, covariance_scale: f64, seed: u64) -> Self {
        Self {
            n_classes,
            n_per_class,
            dim: default_blob_dim(),
            mean_shift,
            covariance_scale,
            spread: default_blob_spread(),
            seed,
        }
    }
}

pub fn make_blob_shift(spec: &BlobShift) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.n_classes < 2 || spec.n_per_class == 0 || spec.dim == 0 {
        return Err(UfalError::InvalidArgument(format!("degenerate blob spec {spec:?}")));
    }
    if spec.covariance_scale <= 0.0 {
        return Err(UfalError::InvalidArgument("covariance_scale must be positive".into()));
    }
    let mut mean_rng = stream_rng(spec.seed, 0);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| mean_rng.random_range(-spec.spread..=spec.spread))
                .collect()
        })
        .collect();
    let draw = |stream: u64, shift: f64, std: f64| {
        let mut rng = stream_rng(spec.seed, stream);
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = spec.n_classes * spec.n_per_class;
        let mut inputs = Array2::zeros((n, spec.dim));
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for i in 0..spec.n_per_class {
                let row = c * spec.n_per_class + i;
                for d in 0..spec.dim {
                    inputs[[row, d]] = mean[d] + shift + normal.sample(&mut rng);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(inputs, labels, class_names(spec.n_classes)).expect("labels in range")
    };
    let source = draw(1, 0.0, 1.0);
    let target = draw(2, spec.mean_shift, spec.covariance_scale.sqrt());
    Ok((source, target))
}

/// Loads `root/<domain>/<class>/<image>`; class indices follow the sorted
/// class directory names. Images become RGB vectors in `[0, 1]` of length
/// `3 * resolution^2`. Unreadable files are skipped with a warning.
pub fn load_image_folder(root: &Path, domain: &str, resolution: u32) -> Result<LabeledDataset> {
    let domain_dir = root.join(domain);
    let mut class_dirs: Vec<_> = fs::read_dir(&domain_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    class_dirs.sort_by_key(|e| e.file_name());
    let mut names = Vec::with_capacity(class_dirs.len());
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let dim = 3 * (resolution as usize) * (resolution as usize);
    for (class, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().to_string_lossy().into_owned());
        let mut files: Vec<_> = fs::read_dir(dir.path())?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let image = match image::open(&file) {
                Ok(img) => img,
                Err(err) => {
                    log::warn!("skipping {}: {err}", file.display());
                    continue;
                }
            };
            let rgb = image
                .resize_exact(resolution, resolution, image::imageops::FilterType::Triangle)
                .to_rgb8();
            rows.extend(rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0));
            labels.push(class);
        }
    }
    if labels.is_empty() {
        return Err(UfalError::NoImages(domain_dir));
    }
    let inputs = Array2::from_shape_vec((labels.len(), dim), rows).expect("rows of equal length");
    LabeledDataset::new(inputs, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_sizes_and_determinism() {
        let (s, t) = make_two_moons_shift(101, 30.0, 0.1, 4).unwrap();
        assert_eq!(s.len(), 101);
        assert_eq!(t.len(), 101);
        assert_eq!(s.labels.iter().filter(|&&l| l == 0).count(), 50);
        let again = make_two_moons_shift(101, 30.0, 0.1, 4).unwrap();
        assert_eq!((s, t), again);
    }

    #[test]
    fn zero_rotation_matches_source_distribution() {
        let (s, t) = make_two_moons_shift(4000, 0.0, 0.1, 8).unwrap();
        for class in 0..2 {
            for d in 0..2 {
                let mean = |ds: &LabeledDataset| {
                    let ids = &ds.ids_by_class()[class];
                    ids.iter().map(|&i| ds.inputs[[i, d]]).sum::<f64>() / ids.len() as f64
                };
                assert!((mean(&s) - mean(&t)).abs() < 0.02);
            }
        }
    }

    #[test]
    fn rotation_is_about_origin() {
        let (_, t0) = make_two_moons_shift(50, 0.0, 0.0, 1).unwrap();
        let (_, t90) = make_two_moons_shift(50, 90.0, 0.0, 1).unwrap();
        for (a, b) in t0.inputs.outer_iter().zip(t90.inputs.outer_iter()) {
            assert!((b[0] + a[1]).abs() < 1e-12);
            assert!((b[1] - a[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_generator_arguments() {
        assert!(make_two_moons_shift(1, 0.0, 0.1, 0).is_err());
        assert!(make_two_moons_shift(10, 180.0, 0.1, 0).is_err());
        assert!(make_blob_shift(&BlobShift::new(1, 10, 0.0, 1.0, 0)).is_err());
    }

    #[test]
    fn blobs_without_shift_share_means() {
        let spec = BlobShift::new(12, 400, 0.0, 1.0, 3);
        let (s, t) = make_blob_shift(&spec).unwrap();
        assert_eq!(s.n_classes(), 12);
        assert_eq!(s.len(), 12 * 400);
        for (cs, ct) in s.ids_by_class().iter().zip(t.ids_by_class()) {
            assert_eq!(cs.len(), ct.len());
            let m = |ds: &LabeledDataset, ids: &[usize]| {
                ids.iter().map(|&i| ds.inputs[[i, 0]]).sum::<f64>() / ids.len() as f64
            };
            assert!((m(&s, cs) - m(&t, &ct)).abs() < 0.25);
        }
    }

    #[test]
    fn blob_shift_translates_target() {
        let spec = BlobShift::new(3, 2000, 2.5, 4.0, 9);
        let (s, t) = make_blob_shift(&spec).unwrap();
        let mean = |ds: &LabeledDataset| ds.inputs.column(1).mean().unwrap();
        assert!((mean(&t) - mean(&s) - 2.5).abs() < 0.1);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Array2::zeros((2, 1));
        assert!(LabeledDataset::new(x.clone(), vec![0, 2], class_names(2)).is_err());
        assert!(LabeledDataset::new(x, vec![0], class_names(2)).is_err());
    }
}

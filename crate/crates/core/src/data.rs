//! Image batches, labeled datasets, and the three loading paths:
//! synthetic generator specs, image folders (one subdirectory per
//! class), and packed array files.

use crate::error::{Error, Result};
use crate::packed::{ArrayData, PackedArray, PackedFile};
use crate::synth;
use crate::tensor::Tensor;
use crate::util::rng_for;
use rand::seq::SliceRandom;
use std::path::Path;

/// A batch of images in [0,1] with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pixels: Tensor,
    labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 4 {
            return Err(Error::Input(format!(
                "pixels must be (N, C, H, W), got {shape:?}"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Input("batch must contain at least one image".into()));
        }
        if labels.len() != shape[0] {
            return Err(Error::Input(format!(
                "label count {} does not match batch size {}",
                labels.len(),
                shape[0]
            )));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W) of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    /// Replaces pixels, keeping labels; used by attacks, which never
    /// modify labels.
    pub fn with_pixels(&self, pixels: Tensor) -> Result<Self> {
        if pixels.shape() != self.pixels.shape() {
            return Err(Error::Input(format!(
                "pixel shape {:?} does not match batch shape {:?}",
                pixels.shape(),
                self.pixels.shape()
            )));
        }
        ImageBatch::new(pixels, self.labels.clone())
    }
}

/// An in-memory labeled image dataset.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pixels: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(pixels: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let batch = ImageBatch::new(pixels, labels)?;
        if let Some(bad) = batch.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            pixels: batch.pixels,
            labels: batch.labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let (c, h, w) = self.image_dims();
        let stride = c * h * w;
        let src = self.pixels.data();
        let mut out = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        ImageBatch {
            pixels: Tensor::from_vec(&[indices.len(), c, h, w], out),
            labels,
        }
    }

    pub fn full_batch(&self) -> ImageBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Index chunks in dataset order.
    pub fn batch_indices(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Seeded per-epoch shuffle, then chunked.
    pub fn shuffled_batch_indices(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng_for(seed, "shuffle", epoch as u64);
        idx.shuffle(&mut rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let b = self.batch(indices);
        LabeledDataset {
            pixels: b.pixels,
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    /// Deterministic split into (first n, rest).
    pub fn split(&self, n_first: usize) -> (LabeledDataset, LabeledDataset) {
        let n = self.len().min(n_first);
        let first: Vec<usize> = (0..n).collect();
        let rest: Vec<usize> = (n..self.len()).collect();
        (self.subset(&first), self.subset(&rest))
    }

    /// Writes the dataset as a packed array file; pixels are quantized
    /// to u8 for compactness.
    pub fn save_packed(&self, path: &Path) -> Result<()> {
        let pix: Vec<u8> = self
            .pixels
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let file = PackedFile {
            arrays: vec![
                PackedArray {
                    name: "pixels".into(),
                    dims: self.pixels.shape().to_vec(),
                    data: ArrayData::U8(pix),
                },
                PackedArray {
                    name: "labels".into(),
                    dims: vec![self.labels.len()],
                    data: ArrayData::U32(self.labels.iter().map(|&l| l as u32).collect()),
                },
            ],
            meta: Some(format!("{{\"num_classes\":{}}}", self.num_classes)),
        };
        file.write(path)
    }

    pub fn load_packed(path: &Path) -> Result<Self> {
        let file = PackedFile::read(path)?;
        let pix = file.array("pixels")?;
        if pix.dims.len() != 4 {
            return Err(Error::Input(format!(
                "pixels array must be 4-d, got {:?}",
                pix.dims
            )));
        }
        let pixels = match &pix.data {
            ArrayData::U8(v) => Tensor::from_vec(
                &pix.dims,
                v.iter().map(|&b| b as f64 / 255.0).collect(),
            ),
            ArrayData::F64(v) => Tensor::from_vec(&pix.dims, v.clone()),
            _ => return Err(Error::Input("pixels array has unsupported dtype".into())),
        };
        let labels_arr = file.array("labels")?;
        let labels: Vec<usize> = match &labels_arr.data {
            ArrayData::U32(v) => v.iter().map(|&l| l as usize).collect(),
            ArrayData::U8(v) => v.iter().map(|&l| l as usize).collect(),
            _ => return Err(Error::Input("labels array has unsupported dtype".into())),
        };
        let num_classes = file
            .meta
            .as_deref()
            .and_then(|m| serde_json::from_str::<serde_json::Value>(m).ok())
            .and_then(|v| v.get("num_classes").and_then(|k| k.as_u64()))
            .map(|k| k as usize)
            .unwrap_or_else(|| labels.iter().copied().max().map_or(1, |m| m + 1));
        LabeledDataset::new(pixels, labels, num_classes)
    }
}

/// Loads a dataset from a spec string: `synth:...` generator specs, a
/// directory of per-class image folders, or a packed array file.
/// `resize_to` applies only to the image-folder path.
pub fn load_dataset(spec: &str, resize_to: Option<(usize, usize)>) -> Result<LabeledDataset> {
    if spec.starts_with("synth:") {
        return synth::generate_from_spec(spec);
    }
    let path = Path::new(spec);
    if path.is_dir() {
        return load_image_folder(path, resize_to);
    }
    if path.is_file() {
        return LabeledDataset::load_packed(path);
    }
    Err(Error::Io {
        path: spec.to_string(),
        msg: "dataset path does not exist".into(),
    })
}

/// One subdirectory per class (sorted by name), common raster formats.
pub fn load_image_folder(root: &Path, resize_to: Option<(usize, usize)>) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Input(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }
    let mut pixels: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dims: Option<(usize, usize)> = resize_to;
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::io(file.display().to_string(), e))?
                .to_rgb8();
            let (h, w) = dims.get_or_insert((img.height() as usize, img.width() as usize));
            let img = if img.height() as usize != *h || img.width() as usize != *w {
                image::imageops::resize(
                    &img,
                    *w as u32,
                    *h as u32,
                    image::imageops::FilterType::Triangle,
                )
            } else {
                img
            };
            // HWC u8 -> CHW f64.
            let (h, w) = (img.height() as usize, img.width() as usize);
            let raw = img.into_raw();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        pixels.push(raw[(y * w + x) * 3 + c] as f64 / 255.0);
                    }
                }
            }
            labels.push(class_idx);
        }
    }
    if labels.is_empty() {
        return Err(Error::Input(format!(
            "no images found under {}",
            root.display()
        )));
    }
    let (h, w) = dims.unwrap();
    let n = labels.len();
    LabeledDataset::new(
        Tensor::from_vec(&[n, 3, h, w], pixels),
        labels,
        class_dirs.len(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_dataset() -> LabeledDataset {
        let pixels = Tensor::from_vec(&[4, 1, 2, 2], (0..16).map(|i| i as f64 / 16.0).collect());
        LabeledDataset::new(pixels, vec![0, 1, 0, 1], 2).unwrap()
    }

    #[test]
    fn batch_invariants_enforced() {
        let t = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 1.5]);
        assert!(matches!(
            ImageBatch::new(t, vec![0]),
            Err(Error::Input(_))
        ));
        let t = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.5]);
        assert!(matches!(
            ImageBatch::new(t, vec![0, 1]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gather_and_split() {
        let ds = tiny_dataset();
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.labels(), &[0, 0]);
        assert_eq!(b.pixels().data()[0], 8.0 / 16.0);
        let (a, rest) = ds.split(3);
        assert_eq!(a.len(), 3);
        assert_eq!(rest.len(), 1);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let ds = tiny_dataset();
        let a = ds.shuffled_batch_indices(2, 9, 0);
        let b = ds.shuffled_batch_indices(2, 9, 0);
        let c = ds.shuffled_batch_indices(2, 9, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn packed_roundtrip_preserves_labels_and_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.gapk");
        let ds = tiny_dataset();
        ds.save_packed(&path).unwrap();
        let back = LabeledDataset::load_packed(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.num_classes(), 2);
        assert_eq!(back.image_dims(), (1, 2, 2));
    }

    #[test]
    fn image_folder_loads_sorted_classes() {
        let dir = tempdir().unwrap();
        for (class, val) in [("a_first", 10u8), ("b_second", 200u8)] {
            let d = dir.path().join(class);
            std::fs::create_dir(&d).unwrap();
            let img = image::RgbImage::from_pixel(4, 4, image::Rgb([val, val, val]));
            img.save(d.join("img.png")).unwrap();
        }
        let ds = load_image_folder(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
        assert!((ds.pixels().data()[0] - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn missing_dataset_is_io_error() {
        assert!(matches!(
            load_dataset("/nonexistent/nowhere", None),
            Err(Error::Io { .. })
        ));
    }
}

//! Core value types, the label taxonomy, and dataset ingestion.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::resize_bilinear;

/// Side length of every mass image handled by the system.
pub const IMAGE_SIZE: usize = 64;

/// Dimension of the latent feature space.
pub const LATENT_DIM: usize = 1024;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ingestion error for record '{id}': {source}")]
    Ingestion {
        id: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("unknown {kind} label '{label}'")]
    Taxonomy { kind: &'static str, label: String },
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 64x64 grayscale raster with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MassImage {
    pixels: Array2<f64>,
}

impl MassImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self, DataError> {
        if pixels.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(DataError::Contract(format!(
                "image must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                pixels.shape()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Contract(
                "pixel intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from arbitrary finite values by clamping into [0, 1].
    pub fn from_clamped(mut pixels: Array2<f64>) -> Result<Self, DataError> {
        pixels.mapv_inplace(|p| p.clamp(0.0, 1.0));
        Self::new(pixels)
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }
}

/// Ordered label vocabularies for the two BIRADS descriptors.
///
/// Cardinality is data-driven, not hard-coded: the default desk-scale
/// taxonomy is 3 margins x 3 shapes but any non-empty lists are accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    margins: Vec<String>,
    shapes: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self {
            margins: ["circumscribed", "ill-defined", "spiculated"]
                .map(String::from)
                .to_vec(),
            shapes: ["round", "oval", "irregular"].map(String::from).to_vec(),
        }
    }
}

impl Taxonomy {
    pub fn new(margins: Vec<String>, shapes: Vec<String>) -> Result<Self, DataError> {
        if margins.is_empty() || shapes.is_empty() {
            return Err(DataError::Contract(
                "taxonomy requires at least one margin and one shape class".into(),
            ));
        }
        Ok(Self { margins, shapes })
    }

    pub fn margin_count(&self) -> usize {
        self.margins.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shapes.len()
    }

    pub fn margin_names(&self) -> &[String] {
        &self.margins
    }

    pub fn shape_names(&self) -> &[String] {
        &self.shapes
    }

    pub fn margin_index(&self, name: &str) -> Result<usize, DataError> {
        self.margins
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| DataError::Taxonomy {
                kind: "margin",
                label: name.to_string(),
            })
    }

    pub fn shape_index(&self, name: &str) -> Result<usize, DataError> {
        self.shapes
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| DataError::Taxonomy {
                kind: "shape",
                label: name.to_string(),
            })
    }

    pub fn description(&self, margin: &str, shape: &str) -> Result<BiradsDescription, DataError> {
        Ok(BiradsDescription {
            margin: self.margin_index(margin)?,
            shape: self.shape_index(shape)?,
        })
    }

    /// Every (margin, shape) pair in row-major order.
    pub fn categories(&self) -> Vec<BiradsDescription> {
        let mut out = Vec::with_capacity(self.margin_count() * self.shape_count());
        for margin in 0..self.margin_count() {
            for shape in 0..self.shape_count() {
                out.push(BiradsDescription { margin, shape });
            }
        }
        out
    }
}

/// Pair of categorical descriptor indices (margin, shape).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BiradsDescription {
    pub margin: usize,
    pub shape: usize,
}

impl BiradsDescription {
    pub fn new(margin: usize, shape: usize, taxonomy: &Taxonomy) -> Result<Self, DataError> {
        if margin >= taxonomy.margin_count() {
            return Err(DataError::Contract(format!(
                "margin index {margin} out of range (< {})",
                taxonomy.margin_count()
            )));
        }
        if shape >= taxonomy.shape_count() {
            return Err(DataError::Contract(format!(
                "shape index {shape} out of range (< {})",
                taxonomy.shape_count()
            )));
        }
        Ok(Self { margin, shape })
    }

    pub fn margin_one_hot(&self, taxonomy: &Taxonomy) -> Vec<f64> {
        one_hot(self.margin, taxonomy.margin_count()).expect("validated index")
    }

    pub fn shape_one_hot(&self, taxonomy: &Taxonomy) -> Vec<f64> {
        one_hot(self.shape, taxonomy.shape_count()).expect("validated index")
    }
}

impl fmt::Display for BiradsDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(margin={}, shape={})", self.margin, self.shape)
    }
}

/// One-hot encoding of a categorical index.
pub fn one_hot(index: usize, cardinality: usize) -> Result<Vec<f64>, DataError> {
    if index >= cardinality {
        return Err(DataError::Contract(format!(
            "one_hot index {index} out of range (cardinality {cardinality})"
        )));
    }
    let mut v = vec![0.0; cardinality];
    v[index] = 1.0;
    Ok(v)
}

/// A labeled image with a dataset-unique id.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub image: MassImage,
    pub description: BiradsDescription,
}

/// A point in the learned latent feature space ("visual feature").
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature {
    values: Vec<f64>,
}

impl LatentFeature {
    pub fn new(values: Vec<f64>) -> Result<Self, DataError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Contract(
                "latent feature entries must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn manifest_field<'a>(
    row: &'a csv::StringRecord,
    idx: usize,
    name: &str,
    line: usize,
) -> Result<&'a str, DataError> {
    row.get(idx).ok_or_else(|| {
        DataError::Manifest(format!("row {line}: missing field '{name}'"))
    })
}

/// Loads a dataset described by a `id,filename,margin,shape` manifest CSV.
///
/// Images are decoded as grayscale (non-grayscale inputs are reduced by
/// averaging the color channels), rescaled to [0, 1] by the file bit depth,
/// and resized to 64x64 with bilinear resampling. Records come back in
/// manifest order.
pub fn load_dataset(
    root: &Path,
    manifest: &Path,
    taxonomy: &Taxonomy,
) -> Result<Vec<DatasetRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| DataError::Manifest(format!("cannot open {}: {e}", manifest.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let expected = ["id", "filename", "margin", "shape"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Manifest(format!(
            "manifest header must be 'id,filename,margin,shape', got '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row.map_err(|e| DataError::Manifest(format!("row {line}: {e}")))?;
        let id = manifest_field(&row, 0, "id", line)?.to_string();
        let filename = manifest_field(&row, 1, "filename", line)?;
        let margin = manifest_field(&row, 2, "margin", line)?;
        let shape = manifest_field(&row, 3, "shape", line)?;

        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        let description = taxonomy.description(margin, shape)?;
        let path = root.join(filename);
        let image = load_gray_image(&path).map_err(|source| DataError::Ingestion {
            id: id.clone(),
            source,
        })?;
        records.push(DatasetRecord {
            id,
            image,
            description,
        });
    }
    Ok(records)
}

/// Decodes one grayscale raster file into a normalized 64x64 image.
fn load_gray_image(
    path: &Path,
) -> Result<MassImage, Box<dyn std::error::Error + Send + Sync>> {
    if !path.exists() {
        return Err(format!("file not found: {}", path.display()).into());
    }
    let img = image::open(path)?;
    let gray: Array2<f64> = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            // Non-grayscale input: average the color channels.
            let rgb = other.to_rgb16();
            let (w, h) = rgb.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                let p = rgb.get_pixel(x as u32, y as u32).0;
                (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 65535.0)
            })
        }
    };
    let resized = if gray.shape() == [IMAGE_SIZE, IMAGE_SIZE] {
        gray
    } else {
        resize_bilinear(&gray.view(), IMAGE_SIZE, IMAGE_SIZE)
    };
    Ok(MassImage::from_clamped(resized)?)
}

/// Writes records as 16-bit grayscale PNGs plus a `manifest.csv` that
/// `load_dataset` accepts. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    records: &[DatasetRecord],
    taxonomy: &Taxonomy,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = String::from("id,filename,margin,shape\n");
    for rec in records {
        let filename = format!("{}.png", rec.id);
        save_gray16_png(&dir.join(&filename), rec.image.pixels())?;
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            rec.id,
            filename,
            taxonomy.margin_names()[rec.description.margin],
            taxonomy.shape_names()[rec.description.shape],
        ));
    }
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

pub(crate) fn save_gray16_png(path: &Path, pixels: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = pixels.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (y, row) in pixels.outer_iter().enumerate() {
        for (x, &p) in row.iter().enumerate() {
            let q = (p.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.put_pixel(x as u32, y as u32, image::Luma([q]));
        }
    }
    buf.save(path)
        .map_err(|e| DataError::Manifest(format!("cannot write {}: {e}", path.display())))
}

pub(crate) fn save_gray8_png(path: &Path, pixels: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = pixels.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for (y, row) in pixels.outer_iter().enumerate() {
        for (x, &p) in row.iter().enumerate() {
            let q = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([q]));
        }
    }
    buf.save(path)
        .map_err(|e| DataError::Manifest(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn one_hot_basics() {
        assert_eq!(one_hot(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(one_hot(1, 5).unwrap(), vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(one_hot(3, 3).is_err());
    }

    #[test]
    fn one_hot_sums_to_one() {
        for n in 1..8 {
            for i in 0..n {
                let v = one_hot(i, n).unwrap();
                assert_eq!(v.iter().sum::<f64>(), 1.0);
                assert_eq!(v.len(), n);
            }
        }
    }

    #[test]
    fn taxonomy_default_order() {
        let t = Taxonomy::default();
        assert_eq!(t.margin_index("circumscribed").unwrap(), 0);
        assert_eq!(t.margin_index("ill-defined").unwrap(), 1);
        assert_eq!(t.margin_index("spiculated").unwrap(), 2);
        assert_eq!(t.shape_index("round").unwrap(), 0);
        assert_eq!(t.shape_index("oval").unwrap(), 1);
        assert_eq!(t.shape_index("irregular").unwrap(), 2);
    }

    #[test]
    fn taxonomy_unknown_label_names_the_string() {
        let t = Taxonomy::default();
        let err = t.margin_index("fuzzy").unwrap_err();
        assert!(err.to_string().contains("fuzzy"));
    }

    #[test]
    fn mass_image_rejects_bad_shapes_and_ranges() {
        assert!(MassImage::new(Array2::zeros((32, 64))).is_err());
        let mut a = Array2::zeros((64, 64));
        a[[5, 5]] = 1.5;
        assert!(MassImage::new(a).is_err());
        assert!(MassImage::new(Array2::zeros((64, 64))).is_ok());
    }

    fn write_png8(path: &Path, size: u32, value: u8) {
        let buf = image::GrayImage::from_pixel(size, size, image::Luma([value]));
        buf.save(path).unwrap();
    }

    #[test]
    fn load_dataset_resizes_and_maps_labels() {
        let dir = tempdir().unwrap();
        write_png8(&dir.path().join("m001.png"), 128, 200);
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\nm001,m001.png,circumscribed,round\n",
        )
        .unwrap();
        let recs = load_dataset(
            dir.path(),
            &dir.path().join("manifest.csv"),
            &Taxonomy::default(),
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.id, "m001");
        assert_eq!(r.description.margin, 0);
        assert_eq!(r.description.shape, 0);
        assert_eq!(r.image.pixels().dim(), (64, 64));
        let expect = 200.0 / 255.0;
        for &p in r.image.pixels().iter() {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn load_dataset_missing_file_names_id() {
        let dir = tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\nm001,nope.png,circumscribed,round\n",
        )
        .unwrap();
        let err = load_dataset(
            dir.path(),
            &dir.path().join("manifest.csv"),
            &Taxonomy::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("m001"), "got: {err}");
    }

    #[test]
    fn load_dataset_unknown_label_names_string() {
        let dir = tempdir().unwrap();
        write_png8(&dir.path().join("a.png"), 64, 10);
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\na,a.png,blurry,round\n",
        )
        .unwrap();
        let err = load_dataset(
            dir.path(),
            &dir.path().join("manifest.csv"),
            &Taxonomy::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("blurry"));
    }

    #[test]
    fn load_dataset_rejects_duplicate_ids() {
        let dir = tempdir().unwrap();
        write_png8(&dir.path().join("a.png"), 64, 10);
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\na,a.png,round,round\n",
        )
        .unwrap();
        // unknown margin hits first; fix the row and duplicate it
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\na,a.png,spiculated,oval\na,a.png,spiculated,oval\n",
        )
        .unwrap();
        let err = load_dataset(
            dir.path(),
            &dir.path().join("manifest.csv"),
            &Taxonomy::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateId(_)));
    }

    #[test]
    fn load_dataset_is_deterministic_and_in_range() {
        let dir = tempdir().unwrap();
        write_png8(&dir.path().join("a.png"), 100, 37);
        write_png8(&dir.path().join("b.png"), 32, 255);
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\na,a.png,circumscribed,oval\nb,b.png,ill-defined,irregular\n",
        )
        .unwrap();
        let t = Taxonomy::default();
        let m = dir.path().join("manifest.csv");
        let r1 = load_dataset(dir.path(), &m, &t).unwrap();
        let r2 = load_dataset(dir.path(), &m, &t).unwrap();
        assert_eq!(r1.len(), 2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.image.pixels(), b.image.pixels());
            let mn = a.image.pixels().iter().cloned().fold(f64::MAX, f64::min);
            let mx = a.image.pixels().iter().cloned().fold(f64::MIN, f64::max);
            assert!(mn >= 0.0 && mx <= 1.0);
        }
    }

    #[test]
    fn rgb_input_is_averaged_not_rejected() {
        let dir = tempdir().unwrap();
        let buf = image::RgbImage::from_pixel(64, 64, image::Rgb([30, 60, 90]));
        buf.save(dir.path().join("c.png")).unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "id,filename,margin,shape\nc,c.png,spiculated,round\n",
        )
        .unwrap();
        let recs = load_dataset(
            dir.path(),
            &dir.path().join("manifest.csv"),
            &Taxonomy::default(),
        )
        .unwrap();
        let expect = (30.0 + 60.0 + 90.0) / (3.0 * 255.0);
        for &p in recs[0].image.pixels().iter() {
            assert!((p - expect).abs() < 1e-3, "p={p} expect={expect}");
        }
    }

    #[test]
    fn write_then_load_round_trips_labels_and_order() {
        let dir = tempdir().unwrap();
        let t = Taxonomy::default();
        let mk = |id: &str, v: f64, m: usize, s: usize| DatasetRecord {
            id: id.into(),
            image: MassImage::new(Array2::from_elem((64, 64), v)).unwrap(),
            description: BiradsDescription::new(m, s, &t).unwrap(),
        };
        let recs = vec![mk("x1", 0.25, 0, 1), mk("x2", 0.75, 2, 2)];
        let manifest = write_dataset(dir.path(), &recs, &t).unwrap();
        let loaded = load_dataset(dir.path(), &manifest, &t).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, "x1");
        assert_eq!(loaded[1].id, "x2");
        assert_eq!(loaded[0].description, recs[0].description);
        assert_eq!(loaded[1].description, recs[1].description);
        // 16-bit quantization error is at most 1/65535 per pixel
        for (a, b) in loaded[0]
            .image
            .pixels()
            .iter()
            .zip(recs[0].image.pixels().iter())
        {
            assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-12);
        }
    }
}

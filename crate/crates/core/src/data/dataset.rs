//! Directory layout `root/{rgb,thermal,labels}/<id>.png` with plain-text split lists.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTag {
    Day,
    Night,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Day => "day",
            SplitTag::Night => "night",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub id: String,
    pub tag: Option<SplitTag>,
}

/// An aligned RGB / thermal / label triple. Pixel values live in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbtSample {
    pub id: String,
    /// `(1, 3, H, W)`.
    pub rgb: Tensor,
    /// `(1, 1, H, W)`.
    pub tir: Tensor,
    pub gt_sem: LabelMap,
    pub tag: Option<SplitTag>,
}

impl RgbtSample {
    pub fn height(&self) -> usize {
        self.gt_sem.height()
    }

    pub fn width(&self) -> usize {
        self.gt_sem.width()
    }
}

pub fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let file = format!("{id}.png");
    [
        root.join("rgb").join(&file),
        root.join("thermal").join(&file),
        root.join("labels").join(file),
    ]
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

fn to_tensor(channels: usize, h: usize, w: usize, bytes: &[u8]) -> Tensor {
    // Interleaved HWC bytes to planar CHW floats.
    let mut data = vec![0.0; channels * h * w];
    for (i, px) in bytes.chunks(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * h * w + i] = f64::from(b) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, channels, h, w), data).expect("sized above")
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    let s = t.shape();
    let plane = s.plane();
    let mut out = vec![0u8; s.c * plane];
    for c in 0..s.c {
        for i in 0..plane {
            out[i * s.c + c] = (t.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

fn open_labels(path: &Path) -> Result<GrayImage> {
    let img = open(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::Data(format!(
            "{}: labels must be 8-bit single-channel, found {:?}",
            path.display(),
            img.color()
        )));
    }
    Ok(img.into_luma8())
}

/// A single-channel PNG of class indices.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = open_labels(path)?;
    let (w, h) = img.dimensions();
    LabelMap::new(h as usize, w as usize, img.into_raw())
}

/// Loads one sample and checks that the three images agree in size and that
/// every label is below `num_classes`.
pub fn load_sample(root: &Path, id: &str, num_classes: usize) -> Result<RgbtSample> {
    let [rgb_path, tir_path, label_path] = sample_paths(root, id);
    let rgb = open(&rgb_path)?.to_rgb8();
    let tir = open(&tir_path)?.to_luma8();
    let labels = open_labels(&label_path)?;
    let (w, h) = rgb.dimensions();
    for (path, dims) in [(&tir_path, tir.dimensions()), (&label_path, labels.dimensions())] {
        if dims != (w, h) {
            return Err(Error::Data(format!(
                "{} is {}×{} but {} is {}×{} (height×width)",
                path.display(),
                dims.1,
                dims.0,
                rgb_path.display(),
                h,
                w
            )));
        }
    }
    let (h, w) = (h as usize, w as usize);
    let gt_sem = LabelMap::new(h, w, labels.into_raw())?;
    gt_sem.check_classes(num_classes)?;
    Ok(RgbtSample {
        id: id.to_owned(),
        rgb: to_tensor(3, h, w, rgb.as_raw()),
        tir: to_tensor(1, h, w, tir.as_raw()),
        gt_sem,
        tag: None,
    })
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
}

pub fn write_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.image(0).data().to_vec())
        .expect("sized by label map");
    save(DynamicImage::ImageLuma8(img), path)
}

/// Writes the three PNGs of `sample`, quantizing images to 8 bits.
pub fn write_sample(root: &Path, sample: &RgbtSample) -> Result<()> {
    let [rgb_path, tir_path, label_path] = sample_paths(root, &sample.id);
    let (h, w) = (sample.height() as u32, sample.width() as u32);
    let rgb = RgbImage::from_raw(w, h, to_bytes(&sample.rgb))
        .ok_or_else(|| Error::invalid("write_sample", format!("RGB tensor {}", sample.rgb.shape())))?;
    let tir = GrayImage::from_raw(w, h, to_bytes(&sample.tir))
        .ok_or_else(|| Error::invalid("write_sample", format!("thermal tensor {}", sample.tir.shape())))?;
    save(DynamicImage::ImageRgb8(rgb), &rgb_path)?;
    save(DynamicImage::ImageLuma8(tir), &tir_path)?;
    write_label_png(&sample.gt_sem, &label_path)
}

/// One id per line with an optional `day` / `night` tag; blank lines and
/// lines starting with `#` are skipped.
pub fn parse_split(text: &str) -> Result<Vec<SplitEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().expect("non-empty line").to_owned();
        let tag = match parts.next() {
            None => None,
            Some("day") => Some(SplitTag::Day),
            Some("night") => Some(SplitTag::Night),
            Some(other) => return Err(Error::Data(format!("line {}: unknown tag {other:?}", n + 1))),
        };
        if parts.next().is_some() {
            return Err(Error::Data(format!("line {}: expected `id [day|night]`", n + 1)));
        }
        out.push(SplitEntry { id, tag });
    }
    Ok(out)
}

pub fn read_split(path: &Path) -> Result<Vec<SplitEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Every id found under `root/labels`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("labels");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

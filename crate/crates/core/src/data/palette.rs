//! Class colours for rendering label maps.

use std::collections::HashMap;
use std::io::Cursor;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.is_empty() || colors.len() > 256 {
            return Err(Error::Config(format!("palette needs 1..=256 colours, got {}", colors.len())));
        }
        for (i, c) in colors.iter().enumerate() {
            if let Some(j) = colors[..i].iter().position(|d| d == c) {
                return Err(Error::Config(format!("palette entries {j} and {i} are both {c:?}")));
            }
        }
        Ok(Palette { colors })
    }

    /// Unlabelled, car, person, bike, curve, car stop, guardrail, colour cone, bump.
    pub fn mfnet() -> Self {
        Palette::new(vec![
            [0, 0, 0],
            [64, 0, 128],
            [64, 64, 0],
            [0, 128, 192],
            [0, 0, 192],
            [128, 128, 0],
            [64, 64, 128],
            [192, 128, 128],
            [192, 64, 0],
        ])
        .expect("distinct colours")
    }

    /// A JSON array of `[r, g, b]` triples.
    pub fn from_json(text: &str) -> Result<Self> {
        let colors: Vec<[u8; 3]> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("palette JSON: {e}")))?;
        Palette::new(colors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.colors).expect("plain arrays")
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    /// Colours image 0 of `labels`.
    pub fn render(&self, labels: &LabelMap) -> Result<RgbImage> {
        if let Some(&v) = labels.data().iter().find(|&&v| usize::from(v) >= self.colors.len()) {
            return Err(Error::invalid(
                "render",
                format!("label {v} needs a palette of at least {} colours, have {}", v as usize + 1, self.len()),
            ));
        }
        let plane = labels.height() * labels.width();
        let bytes: Vec<u8> = labels.data()[..plane]
            .iter()
            .flat_map(|&v| self.colors[usize::from(v)])
            .collect();
        Ok(RgbImage::from_raw(labels.width() as u32, labels.height() as u32, bytes).expect("sized above"))
    }

    pub fn render_png(&self, labels: &LabelMap) -> Result<Vec<u8>> {
        let img = self.render(labels)?;
        let mut out = Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(img)
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Data(format!("PNG encoding: {e}")))?;
        Ok(out.into_inner())
    }

    /// Inverse of [`Palette::render`]; fails on colours not in the palette.
    pub fn lookup(&self, img: &RgbImage) -> Result<LabelMap> {
        let index: HashMap<[u8; 3], u8> = self.colors.iter().enumerate().map(|(i, &c)| (c, i as u8)).collect();
        let data = img
            .pixels()
            .map(|p| {
                index
                    .get(&p.0)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("colour {:?} is not in the palette", p.0)))
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMap::new(img.height() as usize, img.width() as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_png() {
        let p = Palette::mfnet();
        let m = LabelMap::new(3, 3, (0..9).collect()).unwrap();
        let png = p.render_png(&m).unwrap();
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(p.lookup(&img).unwrap(), m);
        let mut seen: Vec<_> = img.pixels().map(|px| px.0).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn single_class_is_single_colour() {
        let img = Palette::mfnet().render(&LabelMap::filled(4, 4, 2)).unwrap();
        assert!(img.pixels().all(|px| px.0 == [64, 64, 0]));
    }

    #[test]
    fn validation() {
        assert!(Palette::from_json("[[1,2,3],[1,2,3]]").is_err());
        assert!(Palette::from_json("[[1,2]]").is_err());
        let p = Palette::from_json("[[0,0,0],[255,255,255]]").unwrap();
        assert_eq!(Palette::from_json(&p.to_json()).unwrap(), p);
        assert!(p.render(&LabelMap::filled(1, 1, 2)).is_err());
    }
}

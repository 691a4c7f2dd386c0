use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class indices laid out `(n, h, w)`, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        LabelMap::batch(1, height, width, data)
    }

    pub fn batch(n: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * height * width {
            return Err(Error::invalid(
                "label map",
                format!("{} labels for a {n}×{height}×{width} map", data.len()),
            ));
        }
        Ok(LabelMap {
            n,
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            n: 1,
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Concatenates single or batched maps of equal size along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("label map", "nothing to stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::invalid(
                    "label map",
                    format!(
                        "cannot stack {}×{} with {}×{}",
                        m.height, m.width, first.height, first.width
                    ),
                ));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::batch(n, first.height, first.width, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.height + y) * self.width + x] = v;
    }

    /// Image `i` of the batch as a single map.
    pub fn image(&self, i: usize) -> LabelMap {
        let plane = self.height * self.width;
        LabelMap {
            n: 1,
            height: self.height,
            width: self.width,
            data: self.data[i * plane..][..plane].to_vec(),
        }
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        let plane = self.height * self.width;
        match self.data.iter().position(|&v| usize::from(v) >= num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::LabelOutOfRange {
                value: usize::from(self.data[i]),
                row: (i % plane) / self.width,
                col: i % self.width,
                num_classes,
            }),
        }
    }

    /// Per-pixel index of the largest channel of `(n, C, h, w)` scores
    /// (first maximum wins).
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let s = scores.shape();
        if s.c == 0 || s.c > 256 {
            return Err(Error::invalid("argmax", format!("{} channels", s.c)));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            for p in 0..plane {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..s.c {
                    let v = scores.data()[(n * s.c + c) * plane + p];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                data.push(best as u8);
            }
        }
        LabelMap::batch(s.n, s.h, s.w, data)
    }
}

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Binary `height × width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                expected: vec![height, width],
                actual: vec![bits.len()],
            });
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// `(|self ∩ other|, |self ∪ other|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        self.check_shape(other)?;
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok((inter, union))
    }

    /// IoU; two empty masks count as a perfect match.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        let (i, u) = self.overlap(other)?;
        Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        Ok(Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
            ..*self
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        Ok(Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
            ..*self
        })
    }

    /// Mean `(y, x)` of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    n += 1;
                    sy += y as f64;
                    sx += x as f64;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    /// Row-major run lengths, alternating off/on and starting with an off
    /// run (which may be zero).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for b in &self.bits {
            if *b == current {
                len += 1;
            } else {
                runs.push(len);
                current = *b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for (i, r) in runs.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, *r as usize));
        }
        if bits.len() != height * width {
            return Err(Error::format(
                "mask rle",
                format!("runs cover {} pixels, expected {}", bits.len(), height * width),
            ));
        }
        Ok(Self { height, width, bits })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    height: usize,
    width: usize,
    rle: Vec<u32>,
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRepr {
            height: self.height,
            width: self.width,
            rle: self.to_rle(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MaskRepr::deserialize(d)?;
        Mask::from_rle(r.height, r.width, &r.rle).map_err(serde::de::Error::custom)
    }
}

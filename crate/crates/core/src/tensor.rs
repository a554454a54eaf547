//! Dense containers: channel-major feature tensors, probability maps and
//! binary masks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Channel-major `C x H x W` tensor for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape("Tensor3::from_vec", expected, data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Single-channel `H x W` map with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::one())
    }

    /// Builds a map, rejecting entries outside `[0, 1]` or non-finite ones.
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("ProbMap::new", height * width, values.len()));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Precondition(format!(
                "probability map entry {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }

    /// Elementwise `1 - m`.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| T::one() - *v).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            values: mask
                .values
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    context: &'static str,
    a: &ProbMap<T>,
    b: &ProbMap<T>,
) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(context, a.shape_str(), b.shape_str()))
    }
}

/// Strictly binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("BinaryMask::new", height * width, values.len()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.values.iter().any(|&v| v)
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }

    /// Rotates by 90 degrees clockwise.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut values = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                // (y, x) -> (x, h - 1 - y) in a w x h image
                values[x * h + (h - 1 - y)] = self.get(y, x);
            }
        }
        Self {
            height: w,
            width: h,
            values,
        }
    }

    /// Mirrors left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        Self {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

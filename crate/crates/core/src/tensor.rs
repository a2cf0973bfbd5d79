//! Dense rank-4 tensor in (batch, channel, height, width) order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimensions of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Dims {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Contiguous row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "dims {dims} need {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Rank-1 convenience: shape (1, 1, 1, n).
    pub fn from_slice(values: &[T]) -> Self {
        Tensor {
            dims: Dims::new(1, 1, 1, values.len()),
            data: values.to_vec(),
        }
    }

    /// Build from an `f64` slice, converting into `T`.
    pub fn from_f64(dims: Dims, values: &[f64]) -> Result<Self> {
        Self::from_vec(dims, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let d = &self.dims;
        ((b * d.channels + c) * d.height + h) * d.width + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    /// One (height x width) plane.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let start = self.index(b, c, 0, 0);
        &self.data[start..start + self.dims.plane()]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let start = self.index(b, c, 0, 0);
        let n = self.dims.plane();
        &mut self.data[start..start + n]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{} vs {}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m })
    }

    pub fn min(&self) -> T {
        self.data
            .iter()
            .fold(T::infinity(), |m, &v| if v < m { v } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Copy a spatial window `[row, row+h) x [col, col+w)` of batch `b`.
    pub fn crop(&self, b: usize, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        let d = self.dims;
        if b >= d.batch || row + h > d.height || col + w > d.width {
            return Err(Error::shape(format!(
                "crop ({row},{col}) {h}x{w} outside {d}"
            )));
        }
        let mut out = Vec::with_capacity(d.channels * h * w);
        for c in 0..d.channels {
            for y in row..row + h {
                let s = self.index(b, c, y, col);
                out.extend_from_slice(&self.data[s..s + w]);
            }
        }
        Tensor::from_vec(Dims::new(1, d.channels, h, w), out)
    }

    /// Concatenate along the channel axis. All inputs must share batch and
    /// spatial dims.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?
            .dims;
        let mut channels = 0;
        for p in parts {
            let d = p.dims;
            if d.batch != first.batch || d.height != first.height || d.width != first.width {
                return Err(Error::shape(format!("concat {} with {}", first, d)));
            }
            channels += d.channels;
        }
        let dims = Dims::new(first.batch, channels, first.height, first.width);
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..first.batch {
            for p in parts {
                let per = p.dims.channels * p.dims.plane();
                data.extend_from_slice(&p.data[b * per..(b + 1) * per]);
            }
        }
        Tensor::from_vec(dims, data)
    }

    /// BT.601 luma of a 3-channel tensor; single-channel input is returned as is.
    pub fn luma(&self) -> Result<Self> {
        let d = self.dims;
        match d.channels {
            1 => Ok(self.clone()),
            3 => {
                let (wr, wg, wb) = (T::of(0.299), T::of(0.587), T::of(0.114));
                let mut out = Vec::with_capacity(d.batch * d.plane());
                for b in 0..d.batch {
                    let (r, g, bl) = (self.plane(b, 0), self.plane(b, 1), self.plane(b, 2));
                    out.extend(
                        r.iter()
                            .zip(g)
                            .zip(bl)
                            .map(|((&r, &g), &bl)| wr * r + wg * g + wb * bl),
                    );
                }
                Tensor::from_vec(Dims::new(d.batch, 1, d.height, d.width), out)
            }
            c => Err(Error::shape(format!("luma needs 1 or 3 channels, got {c}"))),
        }
    }

    /// Replicate a single-channel tensor to three channels.
    pub fn to_rgb(&self) -> Result<Self> {
        let d = self.dims;
        match d.channels {
            3 => Ok(self.clone()),
            1 => {
                let mut out = Vec::with_capacity(d.len() * 3);
                for b in 0..d.batch {
                    let p = self.plane(b, 0);
                    for _ in 0..3 {
                        out.extend_from_slice(p);
                    }
                }
                Tensor::from_vec(Dims::new(d.batch, 3, d.height, d.width), out)
            }
            c => Err(Error::shape(format!("cannot expand {c} channels to rgb"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(Dims::new(1, 2, 2, 2), (0..8).map(|v| v as f32).collect())
            .unwrap();
        assert_eq!(t.at(0, 1, 1, 0), 6.0);
    }

    #[test]
    fn crop_and_concat() {
        let t = Tensor::<f64>::from_vec(Dims::new(1, 1, 3, 3), (0..9).map(f64::from).collect())
            .unwrap();
        let c = t.crop(0, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let cat = Tensor::concat_channels(&[c.clone(), c]).unwrap();
        assert_eq!(cat.dims(), Dims::new(1, 2, 2, 2));
        assert!(t.crop(0, 2, 2, 2, 2).is_err());
    }

    #[test]
    fn luma_weights() {
        let t = Tensor::<f64>::from_vec(Dims::new(1, 3, 1, 1), vec![1.0, 1.0, 1.0]).unwrap();
        assert!((t.luma().unwrap().data()[0] - 1.0).abs() < 1e-12);
        let r = Tensor::<f64>::from_vec(Dims::new(1, 3, 1, 1), vec![1.0, 0.0, 0.0]).unwrap();
        assert!((r.luma().unwrap().data()[0] - 0.299).abs() < 1e-12);
    }
}

//! Patch tiling and stitching.
//!
//! Boundary patches are shifted inward so that each one is a full
//! `patch_size` window of real pixels; nothing is zero-padded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub overlap: usize,
    /// Row-major sorted (row, col) origins.
    pub origins: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    /// Set when the image is smaller than `patch_size` in some dimension and
    /// the whole image forms the single patch.
    pub degenerate: bool,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::contract("patch_size must be >= 1"));
        }
        if overlap >= patch_size {
            return Err(Error::contract(format!(
                "overlap {overlap} must be smaller than patch_size {patch_size}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::contract("cannot tile an empty image"));
        }
        if height < patch_size || width < patch_size {
            return Ok(PatchGrid {
                patch_size,
                overlap,
                origins: vec![(0, 0)],
                height,
                width,
                degenerate: true,
            });
        }
        let rows = axis_origins(height, patch_size, overlap);
        let cols = axis_origins(width, patch_size, overlap);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            overlap,
            origins,
            height,
            width,
            degenerate: false,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Patch extent (height, width); equals the image for degenerate grids.
    pub fn patch_extent(&self) -> (usize, usize) {
        if self.degenerate {
            (self.height, self.width)
        } else {
            (self.patch_size, self.patch_size)
        }
    }
}

fn axis_origins(len: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("range starts at 0") != last {
        out.push(last);
    }
    out
}

/// Tile a batch-1 image into square patches.
pub fn extract_patches<T: Scalar>(
    img: &Tensor<T>,
    patch_size: usize,
    overlap: usize,
) -> Result<(PatchGrid, Vec<Tensor<T>>)> {
    let d = img.dims();
    if d.batch != 1 {
        return Err(Error::contract(format!("expected batch 1, got {d}")));
    }
    let grid = PatchGrid::new(d.height, d.width, patch_size, overlap)?;
    let (ph, pw) = grid.patch_extent();
    let patches = grid
        .origins
        .iter()
        .map(|&(r, c)| img.crop(0, r, c, ph, pw))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

/// Reassemble patches that were each upscaled by `scale`. Overlapping pixels
/// take the mean of their contributions.
pub fn stitch_patches<T: Scalar>(
    grid: &PatchGrid,
    patches: &[Tensor<T>],
    scale: usize,
) -> Result<Tensor<T>> {
    if patches.len() != grid.len() {
        return Err(Error::contract(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.len()
        )));
    }
    if scale == 0 {
        return Err(Error::contract("scale must be >= 1"));
    }
    let channels = patches
        .first()
        .map(|p| p.dims().channels)
        .ok_or_else(|| Error::contract("no patches to stitch"))?;
    let (ph, pw) = grid.patch_extent();
    let expect = Dims::new(1, channels, ph * scale, pw * scale);
    let (oh, ow) = (grid.height * scale, grid.width * scale);
    let mut acc = Tensor::<T>::zeros(Dims::new(1, channels, oh, ow));
    let mut count = vec![0u32; oh * ow];
    for (&(r, c), p) in grid.origins.iter().zip(patches) {
        if p.dims() != expect {
            return Err(Error::shape(format!(
                "patch at ({r},{c}) is {}, expected {expect}",
                p.dims()
            )));
        }
        let (r0, c0) = (r * scale, c * scale);
        for ch in 0..channels {
            let src = p.plane(0, ch);
            let dst = acc.plane_mut(0, ch);
            for y in 0..expect.height {
                let drow = &mut dst[(r0 + y) * ow + c0..(r0 + y) * ow + c0 + expect.width];
                let srow = &src[y * expect.width..(y + 1) * expect.width];
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d += s;
                }
            }
        }
        for y in 0..expect.height {
            for x in 0..expect.width {
                count[(r0 + y) * ow + c0 + x] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!(
            "pixel ({}, {}) received no patch contribution",
            i / ow,
            i % ow
        )));
    }
    for ch in 0..channels {
        for (v, &n) in acc.plane_mut(0, ch).iter_mut().zip(&count) {
            if n > 1 {
                *v /= T::of(f64::from(n));
            }
        }
    }
    Ok(acc)
}

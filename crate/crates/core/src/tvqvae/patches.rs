//! Non-overlapping patch extraction and its inverse.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Splits `(B, 3, H, W)` images into `(B, P, r1*r2*3)` flattened patches,
/// where `P = (H/r1)·(W/r2)` and patches are ordered row-major
/// (left-to-right, then top-to-bottom).
pub fn patchify(images: &Tensor, r1: usize, r2: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::validation(format!("expected 3 channels, got {c}")));
    }
    if h % r1 != 0 || w % r2 != 0 {
        return Err(Error::validation(format!(
            "image {h}x{w} not divisible by patch {r1}x{r2}"
        )));
    }
    let (gh, gw) = (h / r1, w / r2);
    let x = images
        .reshape((b, c, gh, r1, gw, r2))?
        .permute([0, 2, 4, 1, 3, 5])? // (B, gh, gw, C, r1, r2)
        .contiguous()?
        .reshape((b, gh * gw, c * r1 * r2))?;
    Ok(x)
}

/// Inverse of [`patchify`]: `(B, P, r1*r2*3)` back to `(B, 3, H, W)`.
pub fn unpatchify(patches: &Tensor, r1: usize, r2: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, p, f) = patches.dims3()?;
    let (gh, gw) = (h / r1, w / r2);
    if p != gh * gw || f != 3 * r1 * r2 {
        return Err(Error::validation(format!(
            "patch tensor ({p}, {f}) does not match grid {gh}x{gw} with {r1}x{r2} patches"
        )));
    }
    let x = patches
        .reshape((b, gh, gw, 3, r1, r2))?
        .permute([0, 3, 1, 4, 2, 5])? // (B, C, gh, r1, gw, r2)
        .contiguous()?
        .reshape((b, 3, h, w))?;
    Ok(x)
}

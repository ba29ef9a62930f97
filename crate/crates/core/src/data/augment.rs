use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

const PAD: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augment {
    #[default]
    None,
    /// Zero-pad by 4, crop back at a random offset, flip with probability ½.
    PadCropFlip,
}

fn dims<T: Scalar>(images: &Tensor<T>, sample: usize) -> Result<(usize, usize, usize)> {
    match *images.shape() {
        [b, c, h, w] if sample < b => Ok((c, h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "sample {sample} of a {:?} batch",
            images.shape()
        ))),
    }
}

/// Mirrors one sample left to right, in place.
pub fn hflip<T: Scalar>(images: &mut Tensor<T>, sample: usize) -> Result<()> {
    let (c, h, w) = dims(images, sample)?;
    let base = sample * c * h * w;
    for row in images.data_mut()[base..base + c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(())
}

/// Shifts one sample as if zero-padded by 4 and cropped at `(dy, dx)` of the
/// padded image, `dy, dx ∈ 0..=8`.
pub fn pad_crop<T: Scalar>(
    images: &mut Tensor<T>,
    sample: usize,
    dy: usize,
    dx: usize,
) -> Result<()> {
    let (c, h, w) = dims(images, sample)?;
    if dy > 2 * PAD || dx > 2 * PAD {
        return Err(Error::InvalidArgument(format!("crop offset ({dy}, {dx})")));
    }
    let base = sample * c * h * w;
    let src = images.data()[base..base + c * h * w].to_vec();
    let dst = &mut images.data_mut()[base..base + c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y + dy).wrapping_sub(PAD), (x + dx).wrapping_sub(PAD));
                dst[(ch * h + y) * w + x] = if sy < h && sx < w {
                    src[(ch * h + sy) * w + sx]
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(())
}

/// Applies `policy` to every sample of a `[B, C, H, W]` batch.
pub fn augment<T: Scalar>(images: &mut Tensor<T>, policy: Augment, rng: &mut Rng) -> Result<()> {
    if policy == Augment::None {
        return Ok(());
    }
    let b = images.shape().first().copied().unwrap_or(0);
    for s in 0..b {
        let (dy, dx) = (rng.below(2 * PAD + 1), rng.below(2 * PAD + 1));
        pad_crop(images, s, dy, dx)?;
        if rng.coin() {
            hflip(images, s)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor<f64> {
        Rng::new(3).normal(&[2, 3, 5, 6], 0.0, 1.0).unwrap()
    }

    #[test]
    fn none_is_identity_and_flip_is_involution() {
        let x = batch();
        let mut y = x.clone();
        augment(&mut y, Augment::None, &mut Rng::new(0)).unwrap();
        assert!(y.bitwise_eq(&x));
        hflip(&mut y, 1).unwrap();
        assert!(!y.bitwise_eq(&x));
        hflip(&mut y, 1).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn crop_keeps_shape_and_centre_crop_is_identity() {
        let x = batch();
        let mut y = x.clone();
        pad_crop(&mut y, 0, PAD, PAD).unwrap();
        assert!(y.bitwise_eq(&x));
        augment(&mut y, Augment::PadCropFlip, &mut Rng::new(5)).unwrap();
        assert_eq!(y.shape(), x.shape());
        let mut z = x.clone();
        pad_crop(&mut z, 0, 0, 0).unwrap();
        // Shifted down-right by 4: the top-left corner is padding.
        assert_eq!(z.data()[0], 0.0);
        assert_eq!(z.data()[4 * 6 + 4], x.data()[0]);
        assert!(pad_crop(&mut z, 0, 9, 0).is_err());
    }
}

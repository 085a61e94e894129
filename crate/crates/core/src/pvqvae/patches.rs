use put_tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::Image;

/// Non-overlapping `r×r` patches in row-major grid order; each row is the
/// patch flattened as `(dy, dx, channel)`.
pub fn partition_patches(image: &Image, r: usize) -> Result<Tensor> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::SizeMismatch {
            expected: format!("image sides divisible by patch size {r}"),
            found: format!("{h}x{w}"),
        });
    }
    let (gh, gw) = (h / r, w / r);
    let len = r * r * c;
    let mut out = Vec::with_capacity(gh * gw * len);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..r {
                let start = ((gy * r + dy) * w + gx * r) * c;
                out.extend_from_slice(&image.data()[start..start + r * c]);
            }
        }
    }
    Ok(Tensor::new([gh * gw, len], out)?)
}

/// Inverse of [`partition_patches`].
pub fn assemble_patches(patches: &Tensor, height: usize, width: usize, channels: usize, r: usize) -> Result<Image> {
    let (gh, gw) = (height / r, width / r);
    if r == 0 || !height.is_multiple_of(r) || !width.is_multiple_of(r) || patches.shape() != [gh * gw, r * r * channels] {
        return Err(Error::SizeMismatch {
            expected: format!("[{}, {}] patches", gh * gw, r * r * channels),
            found: format!("{:?}", patches.shape()),
        });
    }
    let mut data = vec![0.0; height * width * channels];
    let src = patches.data();
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..r {
                let start = ((gy * r + dy) * width + gx * r) * channels;
                data[start..start + r * channels].copy_from_slice(&src[i..i + r * channels]);
                i += r * channels;
            }
        }
    }
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_is_flattened_image() {
        let img = Image::from_fn(2, 2, 3, |y, x, c| (y * 6 + x * 3 + c) as f32);
        let p = partition_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 12]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn round_trip() {
        let img = Image::from_fn(8, 12, 3, |y, x, c| (y * 100 + x * 3 + c) as f32 * 0.001);
        let p = partition_patches(&img, 4).unwrap();
        assert_eq!(p.shape(), &[6, 48]);
        assert_eq!(assemble_patches(&p, 8, 12, 3, 4).unwrap(), img);
    }
}

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// An sRGB image with values in `[0, 1]`, stored channel-first as a
/// `(3, H, W)` f32 tensor.
#[derive(Clone, Debug)]
pub struct Image {
    tensor: Tensor,
    height: usize,
    width: usize,
}

impl Image {
    pub const MIN_SIDE: usize = 32;

    /// Builds an image from interleaved HWC samples.
    pub fn from_hwc(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}x3 = {} samples, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        let t = Tensor::from_vec(data, (height, width, 3), &Device::Cpu)?.permute((2, 0, 1))?;
        Self::from_tensor(&t.contiguous()?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)` tensors of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "image tensor must be (3,H,W) or (1,3,H,W), got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image is {h}x{w}; both sides must be at least {}",
                Self::MIN_SIDE
            )));
        }
        let t = t.to_dtype(DType::F32)?.contiguous()?;
        let v = t.flatten_all()?.to_vec1::<f32>()?;
        if let Some(bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            tensor: t.detach(),
            height: h,
            width: w,
        })
    }

    /// Decodes any format supported by the `image` crate into sRGB floats.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_rgb32f(&img.to_rgb32f())
    }

    pub fn from_rgb32f(img: &Rgb32FImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data: Vec<f32> = img.as_raw().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::from_hwc(h as usize, w as usize, data)
    }

    pub fn to_rgb32f(&self) -> Result<Rgb32FImage> {
        let data = self.to_hwc()?;
        Rgb32FImage::from_raw(self.width as u32, self.height as u32, data)
            .ok_or_else(|| Error::InvalidInput("buffer size mismatch".into()))
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let data: Vec<u8> = self
            .to_hwc()?
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, data)
            .ok_or_else(|| Error::InvalidInput("buffer size mismatch".into()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// The `(3, H, W)` f32 tensor.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// The image as a batch of one, `(1, 3, H, W)`.
    pub fn batch(&self) -> Result<Tensor> {
        Ok(self.tensor.unsqueeze(0)?)
    }

    pub fn to_hwc(&self) -> Result<Vec<f32>> {
        Ok(self
            .tensor
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    /// Scales contrast about mid-grey, clipping to the valid range.
    pub fn scale_contrast(&self, factor: f64) -> Result<Self> {
        let t = self
            .tensor
            .affine(factor, 0.5 * (1.0 - factor))?
            .clamp(0.0f32, 1.0f32)?;
        Self::from_tensor(&t)
    }
}

/// Stacks equally sized images into an `(N, 3, H, W)` batch.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack an empty image list".into()))?;
    if let Some(bad) = images.iter().find(|i| i.dims() != first.dims()) {
        return Err(Error::ShapeMismatch(format!(
            "cannot batch {:?} with {:?}",
            bad.dims(),
            first.dims()
        )));
    }
    let ts: Vec<&Tensor> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&ts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small_images() {
        assert!(Image::from_hwc(32, 32, vec![1.5; 32 * 32 * 3]).is_err());
        assert!(Image::from_hwc(16, 64, vec![0.5; 16 * 64 * 3]).is_err());
        assert!(Image::from_hwc(32, 32, vec![f32::NAN; 32 * 32 * 3]).is_err());
        assert!(Image::from_hwc(32, 40, vec![0.5; 32 * 40 * 3]).is_ok());
    }

    #[test]
    fn hwc_roundtrip_preserves_layout() {
        let data: Vec<f32> = (0..32 * 33 * 3).map(|i| (i % 251) as f32 / 251.0).collect();
        let img = Image::from_hwc(32, 33, data.clone()).unwrap();
        assert_eq!(img.to_hwc().unwrap(), data);
        // channel-first access agrees with interleaved input
        let g = img.tensor().get(1).unwrap().get(0).unwrap().get(2).unwrap();
        assert_eq!(g.to_scalar::<f32>().unwrap(), data[2 * 3 + 1]);
    }

    #[test]
    fn contrast_scaling_about_mid_grey() {
        let img = Image::from_hwc(32, 32, vec![0.7; 32 * 32 * 3]).unwrap();
        let v = img.scale_contrast(2.0).unwrap().to_hwc().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        let v = img.scale_contrast(4.0).unwrap().to_hwc().unwrap();
        assert_eq!(v[0], 1.0);
    }
}

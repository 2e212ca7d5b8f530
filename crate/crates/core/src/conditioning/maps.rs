use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::profile::POSE_CHANNELS;

/// Gaussian width of rendered keypoint heatmaps, in image pixels.
pub const POSE_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Samples the source pixel under each target pixel center.
    Nearest,
    /// Half-pixel-center bilinear, no antialiasing.
    Bilinear,
}

/// Row-interpolation matrix (out × inp) for one axis.
fn axis_matrix(inp: usize, out: usize, mode: ResizeMode) -> Vec<f64> {
    let scale = inp as f64 / out as f64;
    let mut m = vec![0.0; out * inp];
    for i in 0..out {
        let center = (i as f64 + 0.5) * scale;
        match mode {
            ResizeMode::Nearest => {
                let src = (center.floor() as usize).min(inp - 1);
                m[i * inp + src] = 1.0;
            }
            ResizeMode::Bilinear => {
                let src = (center - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                let w1 = src - i0 as f64;
                m[i * inp + i0] += 1.0 - w1;
                m[i * inp + i1] += w1;
            }
        }
    }
    m
}

/// Downsamples (c, H, W) or (B, c, H, W) maps by `factor` along both spatial
/// axes.
pub fn resize_to_latent(map: &Tensor, factor: usize, mode: ResizeMode) -> Result<Tensor> {
    let dims = map.dims();
    if dims.len() < 2 || factor == 0 {
        return Err(Error::Shape(format!("cannot resize map of shape {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("map of {h}x{w} is not divisible by {factor}")));
    }
    let (dtype, device) = (map.dtype(), map.device());
    let ry = Tensor::from_vec(axis_matrix(h, h / factor, mode), (h / factor, h), device)?.to_dtype(dtype)?;
    let rx = Tensor::from_vec(axis_matrix(w, w / factor, mode), (w / factor, w), device)?.to_dtype(dtype)?;
    let rows = ry.broadcast_matmul(&map.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rx.t()?)?)
}

/// (3, H, W) tensor in [-1, 1].
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`], clamping to the displayable range.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, found {c}")));
    }
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let idx = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            ((data[c * h * w + idx] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

/// Binary edit mask at image and latent resolution (1 = region to inpaint).
#[derive(Debug, Clone)]
pub struct EditMask {
    /// (1, H, W).
    pub full: Tensor,
    /// (1, h, w).
    pub latent: Tensor,
}

impl EditMask {
    /// Validates binarity and derives the latent copy.
    pub fn new(full: Tensor, factor: usize) -> Result<Self> {
        let (c, _, _) = full.dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("mask must have 1 channel, found {c}")));
        }
        let values: Vec<f64> = full.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        let latent = resize_to_latent(&full, factor, ResizeMode::Nearest)?;
        Ok(Self { full, latent })
    }

    pub fn height(&self) -> usize {
        self.full.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.full.dims()[2]
    }

    /// Number of pixels marked for editing.
    pub fn area(&self) -> Result<f64> {
        Ok(self.full.to_dtype(DType::F64)?.sum_all()?.to_scalar()?)
    }
}

/// Thresholds a grayscale mask image at mid-gray into a (1, H, W) tensor.
pub fn mask_from_image(img: &GrayImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (1, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// One body joint in image coordinates; `confidence <= 0` marks it missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

impl Keypoint {
    pub fn missing() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
        }
    }

    pub fn is_present(&self) -> bool {
        self.confidence > 0.0
    }
}

/// Renders one isotropic Gaussian (peak 1) per joint into (18, H, W). Missing
/// joints give all-zero channels.
pub fn render_pose_heatmaps(
    keypoints: &[Keypoint],
    height: usize,
    width: usize,
    sigma: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if keypoints.len() != POSE_CHANNELS {
        return Err(Error::Dimension {
            context: "keypoints".into(),
            expected: POSE_CHANNELS,
            found: keypoints.len(),
        });
    }
    let mut data = vec![0f32; POSE_CHANNELS * height * width];
    let denom = 2.0 * sigma * sigma;
    // Beyond this radius the Gaussian is below f32 resolution of the peak.
    let radius = (sigma * 6.0).ceil() as i64;
    for (k, kp) in keypoints.iter().enumerate() {
        if !kp.is_present() {
            continue;
        }
        let (cx, cy) = (kp.x as f64, kp.y as f64);
        let y0 = ((cy as i64) - radius).max(0);
        let y1 = ((cy as i64) + radius).min(height as i64 - 1);
        let x0 = ((cx as i64) - radius).max(0);
        let x1 = ((cx as i64) + radius).min(width as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                data[k * height * width + y as usize * width + x as usize] = (-d2 / denom).exp() as f32;
            }
        }
    }
    Ok(Tensor::from_vec(data, (POSE_CHANNELS, height, width), device)?.to_dtype(dtype)?)
}

/// Keypoint heatmaps at image and latent resolution.
#[derive(Debug, Clone)]
pub struct PoseMap {
    /// (18, H, W).
    pub full: Tensor,
    /// (18, h, w).
    pub latent: Tensor,
}

impl PoseMap {
    pub fn new(full: Tensor, factor: usize) -> Result<Self> {
        let (c, _, _) = full.dims3()?;
        if c != POSE_CHANNELS {
            return Err(Error::Dimension {
                context: "pose map channels".into(),
                expected: POSE_CHANNELS,
                found: c,
            });
        }
        let latent = resize_to_latent(&full, factor, ResizeMode::Bilinear)?;
        Ok(Self { full, latent })
    }

    pub fn from_keypoints(keypoints: &[Keypoint], height: usize, width: usize, factor: usize, device: &Device) -> Result<Self> {
        let full = render_pose_heatmaps(keypoints, height, width, POSE_SIGMA, DType::F32, device)?;
        Self::new(full, factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn argmax2(t: &Tensor) -> (usize, usize) {
        let rows: Vec<Vec<f32>> = t.to_vec2().unwrap();
        let mut best = (0, 0, f32::MIN);
        for (y, r) in rows.iter().enumerate() {
            for (x, v) in r.iter().enumerate() {
                if *v > best.2 {
                    best = (y, x, *v);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn all_ones_mask_at_full_scale() {
        let m = Tensor::ones((1, 512, 384), DType::F32, &Device::Cpu).unwrap();
        let mask = EditMask::new(m, 8).unwrap();
        assert_eq!(mask.latent.dims(), &[1, 64, 48]);
        let v: Vec<f32> = mask.latent.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn non_divisible_dims_are_fatal() {
        let m = Tensor::ones((1, 100, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(resize_to_latent(&m, 8, ResizeMode::Nearest), Err(Error::Shape(_))));
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let m = Tensor::full(0.5f32, (1, 16, 16), &Device::Cpu).unwrap();
        assert!(EditMask::new(m, 8).is_err());
    }

    #[test]
    fn missing_joint_gives_zero_channel() {
        let mut kps = vec![Keypoint::missing(); 18];
        kps[3] = Keypoint { x: 20.0, y: 30.0, confidence: 1.0 };
        let p = render_pose_heatmaps(&kps, 64, 48, POSE_SIGMA, DType::F32, &Device::Cpu).unwrap();
        let sums: Vec<f32> = p.sum((1, 2)).unwrap().to_vec1().unwrap();
        for (k, s) in sums.iter().enumerate() {
            assert_eq!(*s > 0.0, k == 3);
        }
        let peak: f32 = p.get(3).unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(peak, 1.0);
        assert!(render_pose_heatmaps(&kps[..17], 64, 48, POSE_SIGMA, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn image_round_trip_is_exact() {
        let img = RgbImage::from_fn(8, 4, |x, y| image::Rgb([(x * 30) as u8, (y * 60) as u8, 255]));
        let t = image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    proptest! {
        #[test]
        fn resized_peak_tracks_scaled_coordinate(x in 0.0f32..383.0, y in 0.0f32..511.0) {
            let mut kps = vec![Keypoint::missing(); 18];
            kps[0] = Keypoint { x, y, confidence: 1.0 };
            let pose = PoseMap::from_keypoints(&kps, 512, 384, 8, &Device::Cpu).unwrap();
            prop_assert_eq!(pose.latent.dims(), &[18, 64, 48]);
            let (py, px) = argmax2(&pose.latent.get(0).unwrap());
            let (sy, sx) = ((y as f64 + 0.5) / 8.0 - 0.5, (x as f64 + 0.5) / 8.0 - 0.5);
            prop_assert!((py as f64 - sy).abs() <= 1.0, "row {py} vs {sy}");
            prop_assert!((px as f64 - sx).abs() <= 1.0, "col {px} vs {sx}");
            let v: Vec<f32> = pose.latent.flatten_all().unwrap().to_vec1().unwrap();
            prop_assert!(v.iter().all(|t| (0.0..=1.0).contains(t)));
        }

        #[test]
        fn nearest_resize_keeps_masks_binary(bits in proptest::collection::vec(any::<bool>(), 32 * 24)) {
            let data: Vec<f32> = bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
            let m = Tensor::from_vec(data, (1, 32, 24), &Device::Cpu).unwrap();
            let mask = EditMask::new(m, 8).unwrap();
            let v: Vec<f32> = mask.latent.flatten_all().unwrap().to_vec1().unwrap();
            prop_assert!(v.iter().all(|t| *t == 0.0 || *t == 1.0));
        }
    }
}

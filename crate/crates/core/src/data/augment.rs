//! Resize, flip, rotate and normalize.
//!
//! Geometry runs on `f32` planes in byte units; normalization happens last.
//! Order: bilinear resize, (training) horizontal flip, (training) rotation,
//! scale to `[0,1]`, per-channel `(x − mean) / std`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ppm::Image;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub target_size: usize,
    pub hflip_prob: f64,
    pub max_rotation_degrees: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            hflip_prob: 0.5,
            max_rotation_degrees: 10.0,
            normalize_mean: [0.5; 3],
            normalize_std: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.target_size == 0 {
            return Err("target_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(format!("hflip_prob {} outside [0, 1]", self.hflip_prob));
        }
        if self.max_rotation_degrees.is_nan() || self.max_rotation_degrees < 0.0 {
            return Err("max_rotation_degrees must be non-negative".into());
        }
        if self.normalize_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err("normalize_std entries must be positive".into());
        }
        Ok(())
    }
}

/// One channel of floating-point pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Bilinear sample with zero outside the plane.
    fn sample(&self, y: f64, x: f64) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x0 + 1) * fx;
        let bottom = self.at(y0 + 1, x0) * (1.0 - fx) + self.at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

pub fn planes(img: &Image) -> Vec<Plane> {
    (0..img.channels)
        .map(|c| Plane {
            height: img.height,
            width: img.width,
            data: img.plane(c).iter().map(|&v| v as f32).collect(),
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(p: &Plane, height: usize, width: usize) -> Plane {
    if p.height == height && p.width == width {
        return p.clone();
    }
    let sy = p.height as f64 / height as f64;
    let sx = p.width as f64 / width as f64;
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (p.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(p.height - 1);
        let fy = (src_y - y0 as f64) as f32;
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (p.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(p.width - 1);
            let fx = (src_x - x0 as f64) as f32;
            let row0 = &p.data[y0 * p.width..];
            let row1 = &p.data[y1 * p.width..];
            let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
            let bottom = row1[x0] * (1.0 - fx) + row1[x1] * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Plane { height, width, data }
}

pub fn hflip(p: &Plane) -> Plane {
    let mut data = Vec::with_capacity(p.data.len());
    for row in p.data.chunks(p.width) {
        data.extend(row.iter().rev());
    }
    Plane { data, ..p.clone() }
}

/// Rotation about the image center (positive = counter-clockwise), bilinear
/// resampling, zero fill.
pub fn rotate(p: &Plane, degrees: f64) -> Plane {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (p.height as f64 - 1.0) / 2.0;
    let cx = (p.width as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height {
        let dy = y as f64 - cy;
        for x in 0..p.width {
            let dx = x as f64 - cx;
            let src_x = cx + cos * dx - sin * dy;
            let src_y = cy + sin * dx + cos * dy;
            data.push(p.sample(src_y, src_x));
        }
    }
    Plane { data, ..p.clone() }
}

/// Converts an image into a normalized `[C,S,S]` tensor.
///
/// `augment` supplies the generator in training mode; `None` means eval mode
/// (no flip, no rotation, no random draws). In training mode exactly two
/// draws are made per image: the flip coin, then the angle.
pub fn preprocess<T: Real, R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, augment: Option<&mut R>) -> Tensor<T> {
    let s = cfg.target_size;
    let mut ps: Vec<Plane> = planes(img).iter().map(|p| resize(p, s, s)).collect();
    if let Some(rng) = augment {
        let flip = rng.random::<f64>() < cfg.hflip_prob;
        let angle = if cfg.max_rotation_degrees > 0.0 {
            rng.random_range(-cfg.max_rotation_degrees..=cfg.max_rotation_degrees)
        } else {
            0.0
        };
        if flip {
            ps = ps.iter().map(hflip).collect();
        }
        if angle != 0.0 {
            ps = ps.iter().map(|p| rotate(p, angle)).collect();
        }
    }
    let mut data = Vec::with_capacity(img.channels * s * s);
    for (c, p) in ps.iter().enumerate() {
        let (mean, std) = (cfg.normalize_mean[c % 3], cfg.normalize_std[c % 3]);
        data.extend(p.data.iter().map(|&v| {
            let unit = (v.clamp(0.0, 255.0) as f64) / 255.0;
            T::of((unit - mean) / std)
        }));
    }
    Tensor::from_vec(&[img.channels, s, s], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| ((i * 37) % 256) as u8).collect();
        Image::new(3, h, w, data)
    }

    #[test]
    fn endpoints_normalize_to_unit_interval() {
        let img = Image::new(3, 1, 2, vec![255, 0, 255, 0, 255, 0]);
        let cfg = AugmentConfig {
            target_size: 2,
            ..Default::default()
        };
        let t = preprocess::<f32, ChaCha8Rng>(&img, &cfg, None);
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(t.data().contains(&1.0) && t.data().contains(&-1.0));
    }

    #[test]
    fn eval_is_deterministic_and_train_reproducible() {
        let img = gradient_image(20, 24);
        let cfg = AugmentConfig {
            target_size: 16,
            ..Default::default()
        };
        let a = preprocess::<f32, ChaCha8Rng>(&img, &cfg, None);
        let b = preprocess::<f32, ChaCha8Rng>(&img, &cfg, None);
        assert_eq!(a.data(), b.data());
        let c = preprocess::<f32, _>(&img, &cfg, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        let d = preprocess::<f32, _>(&img, &cfg, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        assert_eq!(c.data(), d.data());
        assert_eq!(c.shape(), &[3, 16, 16]);
        assert!(c.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = gradient_image(9, 7);
        for p in planes(&img) {
            let r = rotate(&p, 0.0);
            for (a, b) in r.data.iter().zip(&p.data) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn quarter_turn_of_square() {
        let p = Plane {
            height: 3,
            width: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        };
        let r = rotate(&p, 90.0);
        let expected = [3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0];
        for (a, e) in r.data.iter().zip(expected) {
            assert!((a - e).abs() < 1e-4, "{:?}", r.data);
        }
    }

    #[test]
    fn rotation_fills_corners_with_zero() {
        let p = Plane {
            height: 8,
            width: 8,
            data: vec![200.0; 64],
        };
        let r = rotate(&p, 45.0);
        assert_eq!(r.data[0], 0.0);
        assert_eq!(r.data[4 * 8 + 4], 200.0);
    }

    #[test]
    fn resize_identity_and_constant() {
        let p = Plane {
            height: 4,
            width: 4,
            data: (0..16).map(|v| v as f32).collect(),
        };
        assert_eq!(resize(&p, 4, 4), p);
        let c = Plane {
            height: 5,
            width: 3,
            data: vec![255.0; 15],
        };
        let r = resize(&c, 7, 11);
        assert!(r.data.iter().all(|&v| (v - 255.0).abs() < 1e-3));
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let p = Plane {
            height: 1,
            width: 4,
            data: vec![0.0, 10.0, 20.0, 30.0],
        };
        let r = resize(&p, 1, 2);
        assert_eq!(r.data, vec![5.0, 25.0]);
    }

    #[test]
    fn flip_reverses_rows() {
        let p = Plane {
            height: 2,
            width: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(hflip(&p).data, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}

//! Procedural textured datasets for smoke tests.
//!
//! Each class has a fixed base color and an oriented sinusoidal grating with
//! its own frequency and phase. Images of a class differ by a small phase
//! jitter and Gaussian pixel noise. Class appearance depends only on the class
//! index and class count, so separately generated splits share classes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ppm::{encode_ppm, Image};
use super::{load_dataset, DataError, Dataset};
use crate::rng::{Purpose, SeedStreams};

pub const MANIFEST_FILE: &str = "manifest.txt";

const NOISE_STD: f64 = 0.05;
const PHASE_JITTER: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub split: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 40,
            image_size: 32,
            seed: 1,
            split: "train".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.image_size == 0 {
            return Err(DataError::Invalid("per_class and image_size must be positive".into()));
        }
        if self.split.is_empty() || self.split.contains(['/', '\\']) || self.split.starts_with('.') {
            return Err(DataError::Invalid(format!("bad split name {:?}", self.split)));
        }
        Ok(())
    }
}

/// Base color of class `c` out of `n`: hues evenly spaced around the wheel.
pub fn class_color(c: usize, n: usize) -> [f64; 3] {
    let h = 6.0 * c as f64 / n as f64;
    let (s, v) = (0.7, 0.8);
    let chroma = s * v;
    let x = chroma * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    [r + m, g + m, b + m]
}

struct Grating {
    freq: f64,
    cos: f64,
    sin: f64,
    phase: f64,
}

fn class_grating(c: usize) -> Grating {
    let golden = 0.618_033_988_749_895;
    let theta = PI * ((c as f64 * golden) % 1.0);
    Grating {
        freq: 2.0 + ((c * 3) % 5) as f64,
        cos: theta.cos(),
        sin: theta.sin(),
        phase: 2.0 * PI * ((c as f64 * 0.381_966) % 1.0),
    }
}

fn split_code(split: &str) -> u64 {
    // FNV-1a, truncated to leave room for the class index
    let mut h: u32 = 0x811c_9dc5;
    for b in split.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    (h as u64) & 0xff_ffff
}

fn render(c: usize, n: usize, size: usize, rng: &mut impl Rng) -> Image {
    let base = class_color(c, n);
    let g = class_grating(c);
    let jitter = rng.random_range(-PHASE_JITTER..=PHASE_JITTER);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let plane = size * size;
    let mut data = vec![0u8; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let u = (g.cos * x as f64 + g.sin * y as f64) / size as f64;
            let wave = (2.0 * PI * g.freq * u + g.phase + jitter).sin();
            for ch in 0..3 {
                let v = base[ch] * (0.8 + 0.2 * wave) + noise.sample(rng);
                data[ch * plane + y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Image::new(3, size, size, data)
}

/// Writes `root/<split>/class_XXX/img_XXXX.ppm`, refreshes the manifest and
/// returns the split as loaded back from disk.
pub fn generate_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let code = split_code(&spec.split);
    for c in 0..spec.classes {
        let dir = root.join(&spec.split).join(format!("class_{c:03}"));
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let mut rng = streams.stream(Purpose::Synthetic, (code << 32) | c as u64);
        for i in 0..spec.per_class {
            let img = render(c, spec.classes, spec.image_size, &mut rng);
            let path = dir.join(format!("img_{i:04}.ppm"));
            fs::write(&path, encode_ppm(&img)).map_err(|e| DataError::io(&path, e))?;
        }
    }
    write_manifest(root)?;
    load_dataset(root, &spec.split)
}

/// Rewrites `root/manifest.txt` from every split directory under `root`.
pub fn write_manifest(root: &Path) -> Result<PathBuf, DataError> {
    let mut out = String::new();
    for (name, path) in super::sorted_entries(root)? {
        if path.is_dir() {
            out.push_str(&load_dataset(root, &name)?.manifest());
        }
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, out).map_err(|e| DataError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn counts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.class_names.len(), 5);
        let files = tree(dir.path());
        assert_eq!(files.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "ppm")).count(), 200);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.lines().count(), 200);
        assert_eq!(manifest.lines().next().unwrap(), "train/class_000/img_0000.ppm,0");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(a.path(), &SyntheticSpec::default()).unwrap();
        generate_synthetic(b.path(), &SyntheticSpec::default()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synthetic(c.path(), &SyntheticSpec { seed: 2, ..Default::default() }).unwrap();
        assert_ne!(tree(a.path()), tree(c.path()));
    }

    #[test]
    fn class_means_are_far_apart() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
        let mut means = [[0.0f64; 3]; 5];
        let mut counts = [0usize; 5];
        for (img, &l) in ds.images.iter().zip(&ds.labels) {
            for (ch, m) in means[l].iter_mut().enumerate() {
                let p = img.plane(ch);
                *m += p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
            }
            counts[l] += 1;
        }
        for (m, n) in means.iter_mut().zip(counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        for a in 0..5 {
            for b in a + 1..5 {
                let gap = (0..3).map(|ch| (means[a][ch] - means[b][ch]).abs()).fold(0.0, f64::max);
                assert!(gap > 10.0, "classes {a} and {b}: {gap}");
            }
        }
    }

    #[test]
    fn splits_share_classes_but_not_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let train = generate_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
        let test = generate_synthetic(
            dir.path(),
            &SyntheticSpec {
                split: "test".into(),
                per_class: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(train.class_names, test.class_names);
        assert_ne!(train.images[0], test.images[0]);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.lines().count(), 250);
    }

    #[test]
    fn rejects_single_class() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { classes: 1, ..Default::default() };
        assert!(matches!(generate_synthetic(dir.path(), &spec), Err(DataError::Invalid(_))));
    }
}

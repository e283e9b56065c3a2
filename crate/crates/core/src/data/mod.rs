//! On-disk datasets, preprocessing and synthetic data.
//!
//! Layout: `root/<split>/<class_name>/<image>.ppm`. Class names map to dense
//! labels in ascending lexicographic order; images within a class are read
//! in ascending file-name order.

mod augment;
mod ppm;
mod synthetic;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use augment::{hflip, planes, preprocess, resize, rotate, AugmentConfig, Plane};
pub use ppm::{decode_ppm, encode_ppm, Image, PpmError, MAX_SIDE};
pub use synthetic::{class_color, generate_synthetic, write_manifest, SyntheticSpec, MANIFEST_FILE};

use crate::protonet::Label;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("split directory {0} does not exist")]
    MissingSplit(PathBuf),
    #[error("split directory {0} contains no class directories")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no .ppm images")]
    EmptyClass(PathBuf),
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: PpmError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: channel count {found} differs from {expected}")]
    Channels {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    pub class_names: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
    /// Paths relative to the dataset root, parallel to `images`.
    pub paths: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// One `path,label` line per image.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (p, l) in self.paths.iter().zip(&self.labels) {
            out.push_str(p);
            out.push(',');
            out.push_str(&l.to_string());
            out.push('\n');
        }
        out
    }

    /// Git-style object hash (`blob <len>\0` prefix, SHA-256) of the manifest.
    pub fn manifest_hash(&self) -> String {
        git_blob_hash(self.manifest().as_bytes())
    }

    /// Stacks selected images into `[B,C,S,S]`, preprocessing each one.
    /// With `augment`, images draw from the generator in batch order.
    pub fn batch<T: Real, R: rand::Rng + ?Sized>(
        &self,
        indices: &[usize],
        cfg: &AugmentConfig,
        mut augment: Option<&mut R>,
    ) -> Tensor<T> {
        let s = cfg.target_size;
        let c = self.images.first().map_or(3, |im| im.channels);
        let mut data = Vec::with_capacity(indices.len() * c * s * s);
        for &i in indices {
            let t: Tensor<T> = preprocess(&self.images[i], cfg, augment.as_deref_mut());
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[indices.len(), c, s, s], data).expect("uniform image shapes")
    }
}

pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            out.push((name.to_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `root/<split>` into memory.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset, DataError> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(DataError::MissingSplit(split_dir));
    }
    let class_dirs: Vec<(String, PathBuf)> = sorted_entries(&split_dir)?.into_iter().filter(|(_, p)| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(split_dir));
    }
    let mut ds = Dataset {
        name: root.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_owned(),
        split: split.to_owned(),
        class_names: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
        paths: Vec::new(),
    };
    for (label, (class_name, dir)) in class_dirs.into_iter().enumerate() {
        let files: Vec<(String, PathBuf)> = sorted_entries(&dir)?
            .into_iter()
            .filter(|(n, p)| n.ends_with(".ppm") && p.is_file())
            .collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir));
        }
        for (file_name, path) in files {
            let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
            let img = decode_ppm(&bytes).map_err(|source| DataError::Decode {
                path: path.clone(),
                source,
            })?;
            if let Some(first) = ds.images.first() {
                if first.channels != img.channels {
                    return Err(DataError::Channels {
                        path,
                        expected: first.channels,
                        found: img.channels,
                    });
                }
            }
            ds.images.push(img);
            ds.labels.push(label);
            ds.paths.push(format!("{split}/{class_name}/{file_name}"));
        }
        ds.class_names.push(class_name);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_img(path: &Path, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, encode_ppm(&Image::new(3, 2, 2, vec![value; 12]))).unwrap();
    }

    #[test]
    fn labels_follow_lexicographic_class_order() {
        let dir = tempfile::tempdir().unwrap();
        write_img(&dir.path().join("train/dog/a.ppm"), 1);
        write_img(&dir.path().join("train/cat/b.ppm"), 2);
        write_img(&dir.path().join("train/cat/a.ppm"), 3);
        fs::write(dir.path().join("train/cat/notes.txt"), "ignored").unwrap();
        let ds = load_dataset(dir.path(), "train").unwrap();
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.labels, vec![0, 0, 1]);
        assert_eq!(ds.paths, vec!["train/cat/a.ppm", "train/cat/b.ppm", "train/dog/a.ppm"]);
        assert_eq!(ds.images[0].data[0], 3);
        assert_eq!(load_dataset(dir.path(), "train").unwrap(), ds);
    }

    #[test]
    fn counts_images() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["a", "b", "c"] {
            for i in 0..40 {
                write_img(&dir.path().join(format!("val/{c}/{i:03}.ppm")), i as u8);
            }
        }
        assert_eq!(load_dataset(dir.path(), "val").unwrap().len(), 120);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), "train"), Err(DataError::MissingSplit(_))));
        fs::create_dir_all(dir.path().join("train")).unwrap();
        assert!(matches!(load_dataset(dir.path(), "train"), Err(DataError::NoClasses(_))));
        fs::create_dir_all(dir.path().join("train/empty")).unwrap();
        assert!(matches!(load_dataset(dir.path(), "train"), Err(DataError::EmptyClass(_))));
        write_img(&dir.path().join("train/empty/ok.ppm"), 0);
        fs::write(dir.path().join("train/empty/zz.ppm"), b"P6\n4 4\n255\n\x00").unwrap();
        let err = load_dataset(dir.path(), "train").unwrap_err();
        assert!(matches!(err, DataError::Decode { .. }));
        assert!(err.to_string().contains("zz.ppm"), "{err}");
    }

    #[test]
    fn blob_hash_matches_git_convention() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            git_blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}

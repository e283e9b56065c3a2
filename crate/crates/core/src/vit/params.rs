use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::config::{ConfigError, ViTConfig};
use crate::scalar::Real;
use crate::tensor::{NamedTensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter {0:?}")]
    Missing(String),
    #[error("unexpected parameter {0:?}")]
    Unexpected(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Real> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Option<Tensor<T>>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// All learnable backbone parameters.
///
/// Weights of linear maps are stored `[out, in]`. The canonical order
/// returned by [`ViTParams::named`] is the checkpoint order.
#[derive(Debug, Clone)]
pub struct ViTParams<T: Real> {
    pub config: ViTConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub cls: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
}

#[derive(Clone, Copy)]
enum InitKind {
    TruncNormal,
    Zeros,
    Ones,
}

/// Canonical (name, shape, init) layout for a configuration.
fn layout(c: &ViTConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    use InitKind::*;
    let d = c.embed_dim;
    let h = c.mlp_hidden();
    let mut out = vec![
        ("patch_proj.w".to_string(), vec![d, c.patch_dim()], TruncNormal),
        ("patch_proj.b".to_string(), vec![d], Zeros),
        ("pos_embed".to_string(), vec![c.seq_len(), d], TruncNormal),
        ("cls".to_string(), vec![1, d], TruncNormal),
    ];
    for i in 0..c.depth {
        let p = |s: &str| format!("blk{i}.{s}");
        out.push((p("ln1.g"), vec![d], Ones));
        out.push((p("ln1.b"), vec![d], Zeros));
        out.push((p("attn.qkv.w"), vec![3 * d, d], TruncNormal));
        if c.qkv_bias {
            out.push((p("attn.qkv.b"), vec![3 * d], Zeros));
        }
        out.push((p("attn.proj.w"), vec![d, d], TruncNormal));
        out.push((p("attn.proj.b"), vec![d], Zeros));
        out.push((p("ln2.g"), vec![d], Ones));
        out.push((p("ln2.b"), vec![d], Zeros));
        out.push((p("mlp.fc1.w"), vec![h, d], TruncNormal));
        out.push((p("mlp.fc1.b"), vec![h], Zeros));
        out.push((p("mlp.fc2.w"), vec![d, h], TruncNormal));
        out.push((p("mlp.fc2.b"), vec![d], Zeros));
    }
    out.push(("norm.g".to_string(), vec![d], Ones));
    out.push(("norm.b".to_string(), vec![d], Zeros));
    out
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 * std {
                break z;
            }
        })
        .collect()
}

pub const INIT_STD: f64 = 0.02;

impl<T: Real> ViTParams<T> {
    /// Fresh initialization: truncated normal (std 0.02) for projections,
    /// positions and CLS; zeros for biases; unit scale for layer norms.
    pub fn init<R: Rng + ?Sized>(config: &ViTConfig, rng: &mut R) -> Result<Self, ParamsError> {
        config.validate()?;
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, kind)| {
                let n = shape.iter().product();
                let data: Vec<f64> = match kind {
                    InitKind::TruncNormal => trunc_normal(rng, n, INIT_STD),
                    InitKind::Zeros => vec![0.0; n],
                    InitKind::Ones => vec![1.0; n],
                };
                let t = Tensor::from_vec(&shape, data.into_iter().map(T::of).collect())?;
                Ok((name, t))
            })
            .collect::<Result<Vec<_>, ParamsError>>()?;
        Self::assemble(config, tensors)
    }

    /// Builds parameters from `(name, tensor)` pairs, checking names and shapes.
    pub fn from_named(config: &ViTConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ParamsError> {
        config.validate()?;
        let expected = layout(config);
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape, _) in expected {
            let t = by_name.remove(&name).ok_or_else(|| ParamsError::Missing(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ParamsError::Shape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            ordered.push((name, t));
        }
        if let Some(extra) = by_name.into_keys().min() {
            return Err(ParamsError::Unexpected(extra));
        }
        Self::assemble(config, ordered)
    }

    pub fn from_stored(config: &ViTConfig, stored: &[NamedTensor]) -> Result<Self, ParamsError> {
        let tensors = stored
            .iter()
            .map(|nt| Ok((nt.name.clone(), nt.to_tensor()?)))
            .collect::<Result<Vec<_>, TensorError>>()?;
        Self::from_named(config, tensors)
    }

    /// Tensors in canonical order; must match `layout`.
    fn assemble(config: &ViTConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self, ParamsError> {
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("layout length");
        let patch_w = next();
        let patch_b = next();
        let pos_embed = next();
        let cls = next();
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_g: next(),
                ln1_b: next(),
                qkv_w: next(),
                qkv_b: config.qkv_bias.then(&mut next),
                proj_w: next(),
                proj_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b,
            pos_embed,
            cls,
            blocks,
            norm_g: next(),
            norm_b: next(),
        })
    }

    /// `(name, tensor)` in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<&Tensor<T>> = vec![&self.patch_w, &self.patch_b, &self.pos_embed, &self.cls];
        for b in &self.blocks {
            out.extend([&b.ln1_g, &b.ln1_b, &b.qkv_w]);
            if let Some(qb) = &b.qkv_b {
                out.push(qb);
            }
            out.extend([&b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b, &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b]);
        }
        out.extend([&self.norm_g, &self.norm_b]);
        layout(&self.config).into_iter().map(|(n, _, _)| n).zip(out).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds with every tensor replaced by `f(index, name, tensor)`.
    pub fn map<F>(&self, mut f: F) -> Result<Self, ParamsError>
    where
        F: FnMut(usize, &str, &Tensor<T>) -> Result<Tensor<T>, TensorError>,
    {
        let mapped = self
            .named()
            .into_iter()
            .enumerate()
            .map(|(i, (name, t))| {
                let nt = f(i, &name, t)?;
                Ok((name, nt))
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Self::from_named(&self.config, mapped)
    }

    /// Leaves that accumulate gradients, sharing this set's storage.
    pub fn trainable(&self) -> Self {
        self.map(|_, _, t| Ok(t.detach().requires_grad())).expect("same layout")
    }

    /// Constant leaves sharing this set's storage.
    pub fn detached(&self) -> Self {
        self.map(|_, _, t| Ok(t.detach())).expect("same layout")
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        let tensors = self
            .named()
            .into_iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| U::of(v.as_f64())).collect();
                (n, Tensor::from_vec(t.shape(), data).expect("same shape"))
            })
            .collect();
        ViTParams::from_named(&self.config, tensors).expect("same layout")
    }

    pub fn to_stored(&self) -> Vec<NamedTensor> {
        self.named().into_iter().map(|(n, t)| NamedTensor::from_tensor(n, t)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mut cfg in [ViTConfig::micro(), ViTConfig::tiny()] {
            for bias in [true, false] {
                cfg.qkv_bias = bias;
                let p = ViTParams::<f32>::init(&cfg, &mut rng).unwrap();
                assert_eq!(p.param_count(), cfg.param_count());
                assert!(p.all_finite());
            }
        }
    }

    #[test]
    fn init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ViTParams::<f64>::init(&ViTConfig::micro(), &mut rng).unwrap();
        let w = p.blocks[0].fc1_w.data();
        assert!(w.iter().all(|v| v.abs() <= 0.04));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        // truncation at 2σ shrinks the std to ~0.88σ
        assert!((std - 0.0176).abs() < 0.001, "{std}");
        assert!(p.blocks[0].fc1_b.data().iter().all(|&v| v == 0.0));
        assert!(p.norm_g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn canonical_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ViTParams::<f32>::init(&ViTConfig::micro(), &mut rng).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "patch_proj.w");
        assert_eq!(names[2], "pos_embed");
        assert_eq!(names[3], "cls");
        assert!(names.contains(&"blk3.attn.qkv.w".to_string()));
        assert_eq!(names.last().unwrap(), "norm.b");
    }

    #[test]
    fn from_named_rejects_bad_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ViTConfig::micro();
        let p = ViTParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut named: Vec<(String, Tensor<f32>)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.pop();
        assert!(matches!(ViTParams::from_named(&cfg, named.clone()), Err(ParamsError::Missing(n)) if n == "norm.b"));
        named.push(("norm.b".into(), Tensor::zeros(&[3])));
        assert!(matches!(ViTParams::from_named(&cfg, named.clone()), Err(ParamsError::Shape { .. })));
        named.pop();
        named.push(("norm.b".into(), Tensor::zeros(&[64])));
        named.push(("head.w".into(), Tensor::zeros(&[1])));
        assert!(matches!(ViTParams::from_named(&cfg, named), Err(ParamsError::Unexpected(n)) if n == "head.w"));
    }

    #[test]
    fn cast_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ViTParams::<f32>::init(&ViTConfig::micro(), &mut rng).unwrap();
        let back = p.cast::<f64>().cast::<f32>();
        for (a, b) in p.tensors().iter().zip(back.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }
}

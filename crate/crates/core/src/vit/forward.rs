use rand::RngCore;

use super::params::{BlockParams, ViTParams};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

/// Layer-norm epsilon used throughout the backbone.
pub const LN_EPS: f64 = 1e-6;

/// Forward-pass mode. Training enables dropout and draws masks from the
/// supplied generator; evaluation never touches randomness.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(r) => Mode::Train(&mut **r),
        }
    }

    fn dropout<T: Real>(&mut self, x: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => x.dropout(rate, true, &mut **rng),
        }
    }
}

impl<T: Real> ViTParams<T> {
    /// Splits images into non-overlapping patches and projects them.
    ///
    /// Accepts `[C,H,W]` (returns `[T,d]`) or `[B,C,H,W]` (returns `[B,T,d]`).
    /// Patches are taken in row-major order; each is flattened channel, then
    /// row, then column.
    pub fn patch_embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let (batched, b) = match images.shape() {
            [_, _, _] => (false, 1),
            [b, _, _, _] => (true, *b),
            _ => return Err(self.image_shape_error(images)),
        };
        let dims = &images.shape()[images.rank() - 3..];
        if dims != [c.in_channels, c.image_size, c.image_size] {
            return Err(self.image_shape_error(images));
        }
        let (g, p) = (c.grid(), c.patch_size);
        let patches = images
            .reshape(&[b, c.in_channels, g, p, g, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, g * g, c.patch_dim()])?;
        let tokens = patches.linear(&self.patch_w, Some(&self.patch_b))?;
        if batched {
            Ok(tokens)
        } else {
            tokens.reshape(&[g * g, c.embed_dim])
        }
    }

    fn image_shape_error(&self, images: &Tensor<T>) -> TensorError {
        let c = &self.config;
        TensorError::ShapeMismatch {
            op: "patch_embed",
            lhs: images.shape().to_vec(),
            rhs: vec![c.in_channels, c.image_size, c.image_size],
        }
    }

    /// Multi-head self-attention over `[S,d]` or `[B,S,d]`.
    pub fn attention(&self, x: &Tensor<T>, blk: &BlockParams<T>, mode: Mode<'_>) -> Result<Tensor<T>> {
        Ok(self.attention_with_weights(x, blk, mode)?.0)
    }

    /// Attention output together with the `[B,h,S,S]` attention weights.
    pub fn attention_with_weights(
        &self,
        x: &Tensor<T>,
        blk: &BlockParams<T>,
        mut mode: Mode<'_>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = &self.config;
        let (d, h, dk) = (c.embed_dim, c.num_heads, c.head_dim());
        let (unbatched, b, s) = match x.shape() {
            [s, dd] if *dd == d => (true, 1, *s),
            [b, s, dd] if *dd == d => (false, *b, *s),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: x.shape().to_vec(),
                    rhs: vec![0, d],
                })
            }
        };
        let qkv = x
            .linear(&blk.qkv_w, blk.qkv_b.as_ref())?
            .reshape(&[b, s, 3, h, dk])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b, h, s, dk]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.matmul(&k.transpose(-1, -2)?)?.scale(1.0 / (dk as f64).sqrt());
        let weights = scores.softmax(-1)?;
        let ctx = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
        let out = ctx.linear(&blk.proj_w, Some(&blk.proj_b))?;
        let out = mode.dropout(&out, c.drop_rate)?;
        let out = if unbatched { out.reshape(&[s, d])? } else { out };
        Ok((out, weights))
    }

    /// Pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
    pub fn transformer_block(&self, x: &Tensor<T>, blk: &BlockParams<T>, mut mode: Mode<'_>) -> Result<Tensor<T>> {
        let rate = self.config.drop_rate;
        let a = self.attention(&x.layernorm(&blk.ln1_g, &blk.ln1_b, LN_EPS)?, blk, mode.reborrow())?;
        let x = x.add(&a)?;
        let hdn = x.layernorm(&blk.ln2_g, &blk.ln2_b, LN_EPS)?.linear(&blk.fc1_w, Some(&blk.fc1_b))?.gelu();
        let hdn = mode.dropout(&hdn, rate)?;
        let m = hdn.linear(&blk.fc2_w, Some(&blk.fc2_b))?;
        let m = mode.dropout(&m, rate)?;
        x.add(&m)
    }

    /// Token sequence `[B, 1+T, d]` entering the first block.
    pub fn embed_tokens(&self, images: &Tensor<T>, mut mode: Mode<'_>) -> Result<Tensor<T>> {
        let c = &self.config;
        if images.rank() != 4 || images.shape()[0] == 0 {
            return Err(self.image_shape_error(images));
        }
        let b = images.shape()[0];
        let patches = self.patch_embed(images)?;
        let cls = self.cls.reshape(&[1, 1, c.embed_dim])?.broadcast_to(&[b, 1, c.embed_dim])?;
        let x = Tensor::concat(&[cls, patches], 1)?.add(&self.pos_embed)?;
        mode.dropout(&x, c.drop_rate)
    }

    /// CLS-token embeddings `[B,d]` for a batch `[B,C,H,W]`.
    pub fn forward_features(&self, images: &Tensor<T>, mut mode: Mode<'_>) -> Result<Tensor<T>> {
        let c = &self.config;
        let mut x = self.embed_tokens(images, mode.reborrow())?;
        for blk in &self.blocks {
            x = self.transformer_block(&x, blk, mode.reborrow())?;
        }
        let b = images.shape()[0];
        x.layernorm(&self.norm_g, &self.norm_b, LN_EPS)?
            .narrow(1, 0, 1)?
            .reshape(&[b, c.embed_dim])
    }

    /// Eval-mode embeddings computed in chunks of at most `chunk` images.
    ///
    /// Rows are independent in eval mode, so the result is bitwise identical
    /// to a single [`forward_features`](Self::forward_features) call.
    pub fn embed(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let frozen = self.detached();
        let b = images.shape().first().copied().unwrap_or(0);
        if b <= chunk {
            return frozen.forward_features(images, Mode::Eval);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let n = chunk.min(b - start);
            parts.push(frozen.forward_features(&images.narrow(0, start, n)?, Mode::Eval)?);
            start += n;
        }
        Tensor::concat(&parts, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(rng: &mut ChaCha8Rng, b: usize, cfg: &ViTConfig) -> Tensor<f64> {
        let n = b * cfg.in_channels * cfg.image_size * cfg.image_size;
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[b, cfg.in_channels, cfg.image_size, cfg.image_size], data).unwrap()
    }

    fn micro(seed: u64) -> (ViTParams<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ViTParams::init(&ViTConfig::micro(), &mut rng).unwrap();
        (p, rng)
    }

    #[test]
    fn patch_token_counts() {
        let (p, mut rng) = micro(1);
        let img = random_images(&mut rng, 1, &p.config).reshape(&[3, 32, 32]).unwrap();
        assert_eq!(p.patch_embed(&img).unwrap().shape(), &[16, 64]);
        let bad = Tensor::<f64>::zeros(&[3, 30, 30]);
        assert!(p.patch_embed(&bad).is_err());
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let (p, _) = micro(2);
        let img = Tensor::<f64>::full(&[3, 32, 32], 0.37);
        let tok = p.patch_embed(&img).unwrap();
        let first = &tok.data()[..64];
        for row in tok.data().chunks(64) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn patch_flatten_order() {
        // Patch (row 0, col 1) of a 2-channel 4x4 image with 2x2 patches.
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            in_channels: 2,
            embed_dim: 8,
            depth: 0,
            num_heads: 1,
            mlp_ratio: 1.0,
            drop_rate: 0.0,
            qkv_bias: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ViTParams::<f64>::init(&cfg, &mut rng).unwrap();
        // projection that copies the 8 flattened values straight through
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        let p = p
            .map(|_, name, t| if name == "patch_proj.w" { Tensor::from_vec(&[8, 8], eye.clone()) } else { Ok(t.clone()) })
            .unwrap();
        let img = Tensor::from_vec(&[2, 4, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let tok = p.patch_embed(&img).unwrap();
        // channel 0 rows 0..2, cols 2..4 → 2,3,6,7 ; channel 1 → 18,19,22,23
        assert_eq!(&tok.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let (p, mut rng) = micro(3);
        let blk = &p.blocks[0];
        let x = Tensor::from_vec(&[1, 64], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (out, w) = p.attention_with_weights(&x, blk, Mode::Eval).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        let v = x
            .linear(&blk.qkv_w, blk.qkv_b.as_ref())
            .unwrap()
            .narrow(1, 128, 64)
            .unwrap()
            .linear(&blk.proj_w, Some(&blk.proj_b))
            .unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (p, mut rng) = micro(4);
        let x = Tensor::from_vec(&[2, 17, 64], (0..2 * 17 * 64).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let (_, w) = p.attention_with_weights(&x, &p.blocks[1], Mode::Eval).unwrap();
        assert_eq!(w.shape(), &[2, 4, 17, 17]);
        for row in w.data().chunks(17) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn hand_evaluated_two_token_attention() {
        let cfg = ViTConfig {
            image_size: 2,
            patch_size: 1,
            in_channels: 1,
            embed_dim: 2,
            depth: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            drop_rate: 0.0,
            qkv_bias: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ViTParams::<f64>::init(&cfg, &mut rng).unwrap();
        // Wq = I, Wk = [[1,0],[0,2]], Wv = [[0,1],[1,0]], Wo = I, bias 0.
        let qkv = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0];
        let p = p
            .map(|_, name, t| match name {
                "blk0.attn.qkv.w" => Tensor::from_vec(&[6, 2], qkv.clone()),
                "blk0.attn.proj.w" => Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                _ => Ok(t.clone()),
            })
            .unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = p.attention(&x, &p.blocks[0], Mode::Eval).unwrap();

        // Q = [[1,0],[0,1]], K = [[1,0],[0,2]], V = [[0,1],[1,0]], scale 1/√2.
        // row 0 scores: [1, 0]/√2 ; row 1 scores: [0, 2]/√2
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let softmax2 = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (w00, w01) = softmax2(s, 0.0);
        let (w10, w11) = softmax2(0.0, 2.0 * s);
        // out_i = w_i0·[0,1] + w_i1·[1,0]
        let expected = [w01, w00, w11, w10];
        for (a, e) in out.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_branches_make_block_identity() {
        let (p, mut rng) = micro(5);
        let p = p
            .map(|_, name, t| {
                if name.ends_with("attn.proj.w") || name.ends_with("mlp.fc2.w") {
                    Ok(Tensor::zeros(t.shape()))
                } else {
                    Ok(t.clone())
                }
            })
            .unwrap();
        let x = Tensor::from_vec(&[2, 17, 64], (0..2 * 17 * 64).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let y = p.transformer_block(&x, &p.blocks[0], Mode::Eval).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn block_preserves_shape() {
        let (p, mut rng) = micro(6);
        for s in [1, 5, 17] {
            let x = Tensor::from_vec(&[s, 64], (0..s * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = p.transformer_block(&x.reshape(&[1, s, 64]).unwrap(), &p.blocks[0], Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, s, 64]);
        }
    }

    #[test]
    fn forward_shape_and_eval_determinism() {
        let (p, mut rng) = micro(7);
        let imgs = random_images(&mut rng, 3, &p.config);
        let a = p.forward_features(&imgs, Mode::Eval).unwrap();
        let b = p.forward_features(&imgs, Mode::Eval).unwrap();
        assert_eq!(a.shape(), &[3, 64]);
        assert_eq!(a.data(), b.data());
        let tokens = p.embed_tokens(&imgs, Mode::Eval).unwrap();
        assert_eq!(tokens.shape(), &[3, 17, 64]);
    }

    #[test]
    fn chunked_embedding_matches_full_batch() {
        let (p, mut rng) = micro(8);
        let imgs = random_images(&mut rng, 5, &p.config);
        let full = p.forward_features(&imgs, Mode::Eval).unwrap();
        let chunked = p.embed(&imgs, 2).unwrap();
        assert_eq!(full.data(), chunked.data());
    }

    #[test]
    fn training_mode_uses_dropout() {
        let (p, mut rng) = micro(9);
        let imgs = random_images(&mut rng, 2, &p.config);
        let eval = p.forward_features(&imgs, Mode::Eval).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let train = p.forward_features(&imgs, Mode::Train(&mut drng)).unwrap();
        assert_ne!(eval.data(), train.data());
    }

    #[test]
    fn patch_order_is_visible_to_cls() {
        let (p, mut rng) = micro(10);
        // larger random weights so position information is well above noise
        let p = p
            .map(|_, _, t| {
                let data = t.data().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
                Tensor::from_vec(t.shape(), data)
            })
            .unwrap();
        let imgs = random_images(&mut rng, 1, &p.config);
        // swap two patches (grid cell (0,0) with (1,2)) leaving E in place
        let mut permuted = imgs.to_vec();
        let (s, ps) = (32, 8);
        for ch in 0..3 {
            for r in 0..ps {
                for c in 0..ps {
                    let a = ch * s * s + r * s + c;
                    let b = ch * s * s + (ps + r) * s + 2 * ps + c;
                    permuted.swap(a, b);
                }
            }
        }
        let permuted = Tensor::from_vec(imgs.shape(), permuted).unwrap();
        let a = p.forward_features(&imgs, Mode::Eval).unwrap();
        let b = p.forward_features(&permuted, Mode::Eval).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }
}

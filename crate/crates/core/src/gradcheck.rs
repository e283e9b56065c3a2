//! Central finite-difference checks of every backward rule, in 64-bit.
//!
//! Each case maps a few random inputs to an output tensor `y`; the checked
//! scalar is `Σ y ⊙ w` for a fixed random `w`, so every output element
//! contributes with a distinct weight. For small cases every input
//! coordinate is perturbed. The backbone case is too large for that, so it
//! compares one random directional derivative per parameter tensor plus a
//! few sampled coordinates.
//!
//! Error per coordinate is `|a − n| / max(|a|, |n|, floor)`.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::protonet::{self, DistanceMode};
use crate::rng::{Purpose, SeedStreams, StreamRng};
use crate::tensor::{Result as TResult, Tensor, TensorError};
use crate::vit::{BlockParams, Mode, ViTConfig, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckConfig {
    pub h: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Random input draws per op.
    pub trials: usize,
    pub seed: u64,
    /// Sampled coordinates per tensor in the backbone case.
    pub backbone_coords: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            trials: 5,
            seed: 0,
            backbone_coords: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Where the worst error occurred (`input[i][j]` or a tensor name).
    pub worst_at: String,
    pub comparisons: usize,
    pub passed: bool,
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("{op}: {source}")]
    Tensor { op: String, source: TensorError },
}

type CaseFn = Box<dyn Fn(&[Tensor<f64>]) -> TResult<Tensor<f64>>>;
type InputFn = Box<dyn Fn(&mut StreamRng) -> Vec<Tensor<f64>>>;

/// One op under test: how to draw inputs and how to compute the output.
pub struct Case {
    pub op: &'static str,
    inputs: InputFn,
    f: CaseFn,
}

impl Case {
    pub fn new<I, F>(op: &'static str, inputs: I, f: F) -> Self
    where
        I: Fn(&mut StreamRng) -> Vec<Tensor<f64>> + 'static,
        F: Fn(&[Tensor<f64>]) -> TResult<Tensor<f64>> + 'static,
    {
        Self {
            op,
            inputs: Box::new(inputs),
            f: Box::new(f),
        }
    }
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn signed(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> TResult<Tensor<f64>> {
    Ok(y.mul(w)?.sum_all())
}

fn weights_for(y: &Tensor<f64>, rng: &mut StreamRng) -> Tensor<f64> {
    signed(rng, y.shape())
}

/// Checks one case on one input draw. Returns (max error, location, count).
fn check_once(case: &Case, inputs: Vec<Tensor<f64>>, rng: &mut StreamRng, cfg: &CheckConfig) -> TResult<(f64, String, usize)> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let y = (case.f)(&leaves)?;
    let w = weights_for(&y, rng);
    weighted_sum(&y, &w)?.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> TResult<f64> { Ok(weighted_sum(&(case.f)(xs)?, &w)?.item()) };
    let mut worst = (0.0, String::new(), 0);
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let shifted = |delta: f64| -> TResult<f64> {
                let mut data = input.to_vec();
                data[j] += delta;
                let mut xs = inputs.clone();
                xs[i] = Tensor::from_vec(input.shape(), data)?;
                eval(&xs)
            };
            let numeric = (shifted(cfg.h)? - shifted(-cfg.h)?) / (2.0 * cfg.h);
            let e = rel_err(analytic[i][j], numeric, cfg.floor);
            worst.2 += 1;
            if e >= worst.0 {
                worst = (e, format!("input[{i}][{j}]"), worst.2);
            }
        }
    }
    Ok(worst)
}

pub fn run_case(case: &Case, cfg: &CheckConfig, case_index: u64) -> Result<OpReport, GradcheckError> {
    let streams = SeedStreams::new(cfg.seed);
    let mut report = OpReport {
        op: case.op.to_owned(),
        max_rel_err: 0.0,
        worst_at: String::new(),
        comparisons: 0,
        passed: true,
    };
    for trial in 0..cfg.trials {
        let mut rng = streams.stream(Purpose::Check, case_index * 64 + trial as u64);
        let inputs = (case.inputs)(&mut rng);
        let (e, at, n) = check_once(case, inputs, &mut rng, cfg).map_err(|source| GradcheckError::Tensor {
            op: case.op.to_owned(),
            source,
        })?;
        report.comparisons += n;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst_at = format!("trial {trial} {at}");
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 3,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        drop_rate: 0.25,
        qkv_bias: true,
    }
}

fn tiny_block(rng: &mut StreamRng) -> ViTParams<f64> {
    let p = ViTParams::<f64>::init(&tiny_vit(), rng).expect("valid config");
    // spread values so every nonlinearity is exercised away from its linear regime
    p.map(|_, name, t| {
        let data: Vec<f64> = if name.ends_with(".g") {
            t.data().iter().map(|_| rng.random_range(0.5..1.5)).collect()
        } else {
            t.data().iter().map(|_| rng.random_range(-0.5..0.5)).collect()
        };
        Tensor::from_vec(t.shape(), data)
    })
    .expect("same layout")
}

fn block_from(xs: &[Tensor<f64>]) -> BlockParams<f64> {
    BlockParams {
        ln1_g: xs[0].clone(),
        ln1_b: xs[1].clone(),
        qkv_w: xs[2].clone(),
        qkv_b: Some(xs[3].clone()),
        proj_w: xs[4].clone(),
        proj_b: xs[5].clone(),
        ln2_g: xs[6].clone(),
        ln2_b: xs[7].clone(),
        fc1_w: xs[8].clone(),
        fc1_b: xs[9].clone(),
        fc2_w: xs[10].clone(),
        fc2_b: xs[11].clone(),
    }
}

fn block_tensors(b: &BlockParams<f64>) -> Vec<Tensor<f64>> {
    vec![
        b.ln1_g.clone(),
        b.ln1_b.clone(),
        b.qkv_w.clone(),
        b.qkv_b.clone().expect("bias"),
        b.proj_w.clone(),
        b.proj_b.clone(),
        b.ln2_g.clone(),
        b.ln2_b.clone(),
        b.fc1_w.clone(),
        b.fc1_b.clone(),
        b.fc2_w.clone(),
        b.fc2_b.clone(),
    ]
}

/// Every per-op case, in suite order.
pub fn cases() -> Vec<Case> {
    let tiny_attn = tiny_vit();
    let tiny_blk = tiny_vit();
    vec![
        Case::new("add", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 4])], |x| x[0].add(&x[1])),
        Case::new("broadcast_add", |r| vec![signed(r, &[2, 3, 4]), signed(r, &[4])], |x| x[0].add(&x[1])),
        Case::new("sub", |r| vec![signed(r, &[2, 3]), signed(r, &[3, 1, 3])], |x| x[0].sub(&x[1])),
        Case::new("mul", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 1])], |x| x[0].mul(&x[1])),
        Case::new("scale", |r| vec![signed(r, &[5])], |x| Ok(x[0].scale(-2.5))),
        Case::new("neg", |r| vec![signed(r, &[5])], |x| Ok(x[0].neg())),
        Case::new("log", |r| vec![uniform(r, &[6], 0.3, 3.0)], |x| Ok(x[0].log())),
        Case::new("sqrt", |r| vec![uniform(r, &[6], 0.3, 3.0)], |x| Ok(x[0].sqrt())),
        Case::new("gelu", |r| vec![uniform(r, &[8], -3.0, 3.0)], |x| Ok(x[0].gelu())),
        Case::new("reshape", |r| vec![signed(r, &[2, 6])], |x| x[0].reshape(&[3, 4])),
        Case::new("permute", |r| vec![signed(r, &[2, 3, 4])], |x| x[0].permute(&[2, 0, 1])),
        Case::new("transpose", |r| vec![signed(r, &[2, 3, 4])], |x| x[0].transpose(0, 2)),
        Case::new(
            "concat",
            |r| vec![signed(r, &[2, 3]), signed(r, &[2, 1]), signed(r, &[2, 2])],
            |x| Tensor::concat(x, 1),
        ),
        Case::new("narrow", |r| vec![signed(r, &[4, 5])], |x| x[0].narrow(1, 1, 3)),
        Case::new("sum_axis", |r| vec![signed(r, &[3, 4, 2])], |x| x[0].sum_axis(1, false)),
        Case::new("mean_axis", |r| vec![signed(r, &[3, 4])], |x| x[0].mean_axis(0, true)),
        Case::new("sum_all", |r| vec![signed(r, &[3, 4])], |x| Ok(x[0].sum_all())),
        Case::new("mean_all", |r| vec![signed(r, &[3, 4])], |x| Ok(x[0].mean_all())),
        Case::new("broadcast_to", |r| vec![signed(r, &[3, 1])], |x| x[0].broadcast_to(&[2, 3, 4])),
        Case::new("gather_rows", |r| vec![signed(r, &[5, 3])], |x| x[0].gather_rows(&[4, 0, 4, 2])),
        Case::new("matmul", |r| vec![signed(r, &[3, 4]), signed(r, &[4, 2])], |x| x[0].matmul(&x[1])),
        Case::new(
            "batched_matmul",
            |r| vec![signed(r, &[2, 1, 3, 4]), signed(r, &[3, 4, 2])],
            |x| x[0].matmul(&x[1]),
        ),
        Case::new("softmax", |r| vec![uniform(r, &[3, 5], -3.0, 3.0)], |x| x[0].softmax(-1)),
        Case::new("log_softmax", |r| vec![uniform(r, &[3, 5], -3.0, 3.0)], |x| x[0].log_softmax(0)),
        Case::new(
            "layernorm",
            |r| vec![uniform(r, &[3, 6], -2.0, 2.0), uniform(r, &[6], 0.5, 1.5), signed(r, &[6])],
            |x| x[0].layernorm(&x[1], &x[2], 1e-6),
        ),
        Case::new(
            "dropout",
            |r| vec![signed(r, &[4, 6])],
            |x| {
                // the same generator state on every call gives the same mask
                let mut rng = SeedStreams::new(7).stream(Purpose::Check, 0);
                x[0].dropout(0.3, true, &mut rng)
            },
        ),
        Case::new(
            "linear",
            |r| vec![signed(r, &[2, 3, 4]), signed(r, &[5, 4]), signed(r, &[5])],
            |x| x[0].linear(&x[1], Some(&x[2])),
        ),
        Case::new(
            "sq_euclidean",
            |r| vec![signed(r, &[4, 3]), signed(r, &[2, 3])],
            |x| protonet::sq_euclidean(&x[0], &x[1]).map_err(proto_to_tensor),
        ),
        Case::new(
            "prototypes",
            |r| vec![signed(r, &[6, 3])],
            |x| {
                protonet::compute_prototypes(&x[0], &[3, 1, 3, 1, 1, 3])
                    .map(|p| p.matrix)
                    .map_err(proto_to_tensor)
            },
        ),
        Case::new(
            "unsquared_logits",
            |r| vec![signed(r, &[4, 3]), signed(r, &[2, 3])],
            |x| {
                let p = protonet::Prototypes {
                    matrix: x[1].clone(),
                    labels: vec![0, 1],
                };
                protonet::logits(&x[0], &p, DistanceMode::Unsquared).map_err(proto_to_tensor)
            },
        ),
        Case::new(
            "episodic_loss",
            |r| vec![uniform(r, &[6, 3], -2.0, 2.0)],
            |x| protonet::episodic_loss(&x[0], &[0, 2, 1, 1, 0, 2]).map_err(proto_to_tensor),
        ),
        Case::new(
            "protonet_head",
            |r| vec![signed(r, &[6, 4]), signed(r, &[4, 4])],
            |x| {
                let p = protonet::compute_prototypes(&x[0], &[0, 1, 2, 0, 1, 2]).map_err(proto_to_tensor)?;
                let l = protonet::logits(&x[1], &p, DistanceMode::Squared).map_err(proto_to_tensor)?;
                protonet::episodic_loss(&l, &[2, 0, 1, 1]).map_err(proto_to_tensor)
            },
        ),
        Case::new(
            "attention",
            move |r| {
                let p = tiny_block(r);
                let b = &p.blocks[0];
                vec![
                    uniform(r, &[2, 5, 8], -1.5, 1.5),
                    b.qkv_w.clone(),
                    b.qkv_b.clone().expect("bias"),
                    b.proj_w.clone(),
                    b.proj_b.clone(),
                ]
            },
            move |x| {
                let p = ViTParams::<f64>::init(&tiny_attn, &mut SeedStreams::new(0).stream(Purpose::Check, 1))
                    .expect("valid config");
                let blk = BlockParams {
                    qkv_w: x[1].clone(),
                    qkv_b: Some(x[2].clone()),
                    proj_w: x[3].clone(),
                    proj_b: x[4].clone(),
                    ..p.blocks[0].clone()
                };
                p.attention(&x[0], &blk, Mode::Eval)
            },
        ),
        Case::new(
            "transformer_block",
            move |r| {
                let p = tiny_block(r);
                let mut v = vec![uniform(r, &[2, 5, 8], -1.5, 1.5)];
                v.extend(block_tensors(&p.blocks[0]));
                v
            },
            move |x| {
                let p = ViTParams::<f64>::init(&tiny_blk, &mut SeedStreams::new(0).stream(Purpose::Check, 1))
                    .expect("valid config");
                let blk = block_from(&x[1..]);
                let mut rng = SeedStreams::new(7).stream(Purpose::Check, 2);
                p.transformer_block(&x[0], &blk, Mode::Train(&mut rng))
            },
        ),
    ]
}

fn proto_to_tensor(e: protonet::ProtoError) -> TensorError {
    match e {
        protonet::ProtoError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "protonet",
            reason: other.to_string(),
        },
    }
}

/// Negative control: squaring with a backward rule that is off by a factor
/// of 1.5.
pub fn faulty_case() -> Case {
    Case::new(
        "faulty_square",
        |r| vec![signed(r, &[4])],
        |x| {
            let data = x[0].data().iter().map(|v| v * v).collect();
            Tensor::custom("faulty_square", x[0].shape(), data, vec![x[0].clone()], |g, parents| {
                let xs = parents[0].data();
                vec![Some(g.iter().zip(xs).map(|(g, x)| 3.0 * x * g).collect())]
            })
        },
    )
}

pub const BACKBONE: &str = "backbone";

/// Directional and sampled-coordinate check of the full backbone.
pub fn check_backbone(config: &ViTConfig, cfg: &CheckConfig) -> Result<OpReport, GradcheckError> {
    let wrap = |source| GradcheckError::Tensor {
        op: BACKBONE.into(),
        source,
    };
    let streams = SeedStreams::new(cfg.seed);
    let mut rng = streams.stream(Purpose::Check, 1 << 40);
    let base = ViTParams::<f64>::init(config, &mut rng).map_err(|e| GradcheckError::Tensor {
        op: BACKBONE.into(),
        source: TensorError::Invalid {
            op: "init",
            reason: e.to_string(),
        },
    })?;
    let params = base
        .map(|_, name, t| {
            let data: Vec<f64> = if name.ends_with(".g") {
                t.data().iter().map(|_| rng.random_range(0.7..1.3)).collect()
            } else {
                t.data().iter().map(|_| rng.random_range(-0.1..0.1)).collect()
            };
            Tensor::from_vec(t.shape(), data)
        })
        .expect("same layout");
    let images = uniform(&mut rng, &[2, config.in_channels, config.image_size, config.image_size], -1.0, 1.0);
    let w = signed(&mut rng, &[2, config.embed_dim]);

    let loss = |p: &ViTParams<f64>| -> TResult<Tensor<f64>> {
        let mut drop = SeedStreams::new(cfg.seed).stream(Purpose::Check, 1 << 41);
        weighted_sum(&p.forward_features(&images, Mode::Train(&mut drop))?, &w)
    };
    let trainable = params.trainable();
    loss(&trainable).map_err(wrap)?.backward().map_err(wrap)?;
    let named: Vec<(String, Vec<f64>, Vec<f64>)> = trainable
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect();

    let eval_shift = |k: usize, dir: &[f64], h: f64| -> TResult<f64> {
        let shifted = params.map(|i, _, t| {
            if i == k {
                Tensor::from_vec(t.shape(), t.data().iter().zip(dir).map(|(v, d)| v + h * d).collect())
            } else {
                Ok(t.clone())
            }
        });
        let shifted = shifted.map_err(|e| TensorError::Invalid {
            op: "shift",
            reason: e.to_string(),
        })?;
        Ok(loss(&shifted)?.item())
    };

    let mut report = OpReport {
        op: BACKBONE.into(),
        max_rel_err: 0.0,
        worst_at: String::new(),
        comparisons: 0,
        passed: true,
    };
    let note = |e: f64, at: String, report: &mut OpReport| {
        report.comparisons += 1;
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst_at = at;
        }
    };
    for (k, (name, values, grad)) in named.iter().enumerate() {
        let n = values.len();
        let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let numeric = (eval_shift(k, &dir, cfg.h).map_err(wrap)? - eval_shift(k, &dir, -cfg.h).map_err(wrap)?) / (2.0 * cfg.h);
        note(rel_err(analytic, numeric, cfg.floor), format!("{name} (direction)"), &mut report);
        for j in index::sample(&mut rng, n, cfg.backbone_coords.min(n)) {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let numeric = (eval_shift(k, &e, cfg.h).map_err(wrap)? - eval_shift(k, &e, -cfg.h).map_err(wrap)?) / (2.0 * cfg.h);
            note(rel_err(grad[j], numeric, cfg.floor), format!("{name}[{j}]"), &mut report);
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

/// Names accepted by [`run_suite`]'s filter.
pub fn op_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = cases().iter().map(|c| c.op).collect();
    v.push(BACKBONE);
    v
}

/// Runs the selected ops (all when `only` is empty), optionally with the
/// negative-control case appended.
pub fn run_suite(only: &[String], include_fault: bool, cfg: &CheckConfig) -> Result<Vec<OpReport>, GradcheckError> {
    let known = op_names();
    if let Some(bad) = only.iter().find(|o| !known.contains(&o.as_str()) && o.as_str() != "faulty_square") {
        return Err(GradcheckError::UnknownOp(bad.clone()));
    }
    let wanted = |op: &str| only.is_empty() || only.iter().any(|o| o == op);
    let mut all = cases();
    if include_fault {
        all.push(faulty_case());
    }
    let mut out = Vec::new();
    for (i, case) in all.iter().enumerate() {
        if wanted(case.op) || case.op == "faulty_square" {
            out.push(run_case(case, cfg, i as u64)?);
        }
    }
    if wanted(BACKBONE) {
        out.push(check_backbone(&ViTConfig::micro(), cfg)?);
    }
    Ok(out)
}

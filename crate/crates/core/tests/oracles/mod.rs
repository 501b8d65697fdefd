//! Independent reference implementations used by the integration and
//! acceptance tests. Written as plain `f64` loops over `Vec`s, sharing no
//! code with the library beyond its data types.
#![allow(dead_code, clippy::needless_range_loop)]

use cci_core::model_io::config::names;
use cci_core::model_io::{Activation, ImageTensor, ModelBundle, ViTConfig, CLIP_MEAN, CLIP_STD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(layers: usize, embed_dim: usize, grid_side: usize) -> ViTConfig {
    let patch_size = 4;
    ViTConfig {
        image_size: grid_side * patch_size,
        patch_size,
        layers,
        heads: 2,
        embed_dim,
        mlp_dim: 2 * embed_dim,
        projection_dim: 8,
        preprocess_mean: CLIP_MEAN,
        preprocess_std: CLIP_STD,
        layer_norm_eps: 1e-5,
        activation: Activation::QuickGelu,
    }
}

pub fn random_image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    ImageTensor::new(size, data).unwrap()
}

/// Overwrites every pixel of the listed patches with fresh random values.
pub fn scramble_patches(image: &ImageTensor, patch_size: usize, patches: &[usize], seed: u64) -> ImageTensor {
    let size = image.size();
    let side = size / patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for &j in patches {
        let (gy, gx) = (j / side, j % side);
        for y in gy * patch_size..(gy + 1) * patch_size {
            for x in gx * patch_size..(gx + 1) * patch_size {
                out.set_pixel(y * size + x, [0; 3].map(|_| rng.gen_range(-3.0f32..3.0)));
            }
        }
    }
    out
}

fn weights(bundle: &ModelBundle, name: &str) -> Vec<f64> {
    bundle.tensor(name).unwrap().data.iter().map(|v| f64::from(*v)).collect()
}

/// `W x + b` with `W` stored row-major as `[out][in]`.
fn linear(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let inp = x.len();
    let out = w.len() / inp;
    (0..out)
        .map(|o| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..inp {
                acc += w[o * inp + i] * x[i];
            }
            acc
        })
        .collect()
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().zip(w).zip(b).map(|((v, w), b)| (v - mean) * inv * w + b).collect()
}

pub struct OracleOutput {
    /// Projected CLS embedding.
    pub cls: Vec<f64>,
    /// Final normalized patch states; `None` for removed patches.
    pub patches: Vec<Option<Vec<f64>>>,
}

/// Runs the encoder on the sequence that simply omits the masked patches.
pub fn oracle_forward(bundle: &ModelBundle, image: &ImageTensor, masked: &[bool]) -> OracleOutput {
    let cfg = bundle.config();
    assert_eq!(cfg.activation, Activation::QuickGelu);
    let (d, p, side) = (cfg.embed_dim, cfg.patch_size, cfg.grid_side());
    let n = side * side;
    let eps = f64::from(cfg.layer_norm_eps);

    let patch_w = weights(bundle, names::PATCH_EMBEDDING);
    let pos = weights(bundle, names::POSITION_EMBEDDING);
    let cls_emb = weights(bundle, names::CLASS_EMBEDDING);
    let (pre_w, pre_b) = (weights(bundle, names::PRE_NORM_WEIGHT), weights(bundle, names::PRE_NORM_BIAS));

    // Token positions kept in the reduced sequence: CLS then unmasked patches.
    let kept: Vec<usize> = std::iter::once(0).chain((0..n).filter(|j| !masked[*j]).map(|j| j + 1)).collect();
    let mut x: Vec<Vec<f64>> = kept
        .iter()
        .map(|&t| {
            let mut tok = if t == 0 {
                cls_emb.clone()
            } else {
                let (gy, gx) = ((t - 1) / side, (t - 1) % side);
                let mut flat = Vec::with_capacity(3 * p * p);
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            flat.push(f64::from(image.get(c, gy * p + ky, gx * p + kx)));
                        }
                    }
                }
                linear(&patch_w, None, &flat)
            };
            for (v, e) in tok.iter_mut().zip(&pos[t * d..(t + 1) * d]) {
                *v += e;
            }
            layer_norm(&tok, &pre_w, &pre_b, eps)
        })
        .collect();

    let heads = cfg.heads;
    let hd = d / heads;
    for l in 0..cfg.layers {
        let layer = names::layer(l);
        let w = |s: &str| weights(bundle, &format!("{layer}.{s}"));
        let (n1w, n1b, n2w, n2b) = (w("layer_norm1.weight"), w("layer_norm1.bias"), w("layer_norm2.weight"), w("layer_norm2.bias"));
        let (qw, qb, kw, kb, vw, vb, ow, ob) = (
            w("self_attn.q_proj.weight"),
            w("self_attn.q_proj.bias"),
            w("self_attn.k_proj.weight"),
            w("self_attn.k_proj.bias"),
            w("self_attn.v_proj.weight"),
            w("self_attn.v_proj.bias"),
            w("self_attn.out_proj.weight"),
            w("self_attn.out_proj.bias"),
        );
        let (f1w, f1b, f2w, f2b) = (w("mlp.fc1.weight"), w("mlp.fc1.bias"), w("mlp.fc2.weight"), w("mlp.fc2.bias"));

        let h: Vec<Vec<f64>> = x.iter().map(|t| layer_norm(t, &n1w, &n1b, eps)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|t| linear(&qw, Some(&qb), t)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|t| linear(&kw, Some(&kb), t)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|t| linear(&vw, Some(&vb), t)).collect();
        let len = x.len();
        let mut attn_out = vec![vec![0.0; d]; len];
        for head in 0..heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..len {
                let logits: Vec<f64> = (0..len)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..len {
                    for (o, c) in r.clone().enumerate() {
                        attn_out[i][head * hd + o] += exps[j] / z * v[j][c];
                    }
                }
            }
        }
        for i in 0..len {
            let proj = linear(&ow, Some(&ob), &attn_out[i]);
            for (a, b) in x[i].iter_mut().zip(proj) {
                *a += b;
            }
            let h2 = layer_norm(&x[i], &n2w, &n2b, eps);
            let hidden: Vec<f64> = linear(&f1w, Some(&f1b), &h2)
                .into_iter()
                .map(|u| u / (1.0 + (-1.702 * u).exp()))
                .collect();
            let out = linear(&f2w, Some(&f2b), &hidden);
            for (a, b) in x[i].iter_mut().zip(out) {
                *a += b;
            }
        }
    }

    let (post_w, post_b) = (weights(bundle, names::POST_NORM_WEIGHT), weights(bundle, names::POST_NORM_BIAS));
    let normed: Vec<Vec<f64>> = x.iter().map(|t| layer_norm(t, &post_w, &post_b, eps)).collect();
    let cls = linear(&weights(bundle, names::PROJECTION), None, &normed[0]);
    let mut patches = vec![None; n];
    for (slot, &t) in kept.iter().enumerate().skip(1) {
        patches[t - 1] = Some(normed[slot].clone());
    }
    OracleOutput { cls, patches }
}

pub struct LloydResult {
    pub assignment: Vec<usize>,
    pub objectives: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centres: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq(p, &centres[0]));
    for (c, centre) in centres.iter().enumerate().skip(1) {
        let dist = sq(p, centre);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Textbook k-means++ seeding followed by Lloyd iterations.
///
/// Seeding: the first centre is `gen_range(0..n)`; each later centre draws
/// `u = gen::<f64>() * total` and takes the first point whose running sum of
/// squared distances exceeds `u`. Lloyd stops when assignments repeat or
/// after `max_iter` updates. An empty cluster moves to the point farthest
/// from the centre it was assigned to.
pub fn lloyd(points: &[Vec<f64>], k: usize, seed: u64, normalize: bool, max_iter: usize) -> LloydResult {
    let pts: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if normalize && norm > 0.0 {
                p.iter().map(|v| v / norm).collect()
            } else {
                p.clone()
            }
        })
        .collect();
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![pts[rng.gen_range(0..n)].clone()];
    while centres.len() < k {
        let d2: Vec<f64> = pts.iter().map(|p| nearest(p, &centres).1).collect();
        let total: f64 = d2.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut pick = if total > 0.0 { n - 1 } else { 0 };
        if total > 0.0 {
            let mut run = 0.0;
            for (i, d) in d2.iter().enumerate() {
                run += d;
                if run > u {
                    pick = i;
                    break;
                }
            }
        }
        centres.push(pts[pick].clone());
    }

    let assign = |centres: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let pairs: Vec<(usize, f64)> = pts.iter().map(|p| nearest(p, centres)).collect();
        (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).sum())
    };
    let (mut assignment, obj) = assign(&centres);
    let mut objectives = vec![obj];
    for _ in 0..max_iter {
        let mut spread: Vec<f64> = (0..n).map(|i| sq(&pts[i], &centres[assignment[i]])).collect();
        for c in 0..k {
            let members: Vec<&Vec<f64>> = (0..n).filter(|i| assignment[*i] == c).map(|i| &pts[i]).collect();
            if members.is_empty() {
                let far = (0..n).fold(0, |best, i| if spread[i] > spread[best] { i } else { best });
                centres[c] = pts[far].clone();
                spread[far] = f64::NEG_INFINITY;
            } else {
                let dim = members[0].len();
                centres[c] = (0..dim)
                    .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
                    .collect();
            }
        }
        let (next, obj) = assign(&centres);
        objectives.push(obj);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    LloydResult { assignment, objectives }
}

/// `per_cluster` points around each of three well-separated 2-D centres.
pub fn three_gaussians(per_cluster: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = [[0.0, 0.0], [5.0, 1.0], [1.5, 6.0]];
    let mut out = Vec::new();
    for c in centres {
        for _ in 0..per_cluster {
            // Box-Muller, unit variance.
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            let r = (-2.0 * u1.ln()).sqrt();
            let t = std::f64::consts::TAU * u2;
            // Stored at f32 precision so both sides see identical inputs.
            out.push(vec![(c[0] + r * t.cos()) as f32 as f64, (c[1] + r * t.sin()) as f32 as f64]);
        }
    }
    out
}

/// Points as an `f32` feature matrix for the library API.
pub fn to_features(points: &[Vec<f64>]) -> ndarray::Array2<f32> {
    let dim = points[0].len();
    ndarray::Array2::from_shape_fn((points.len(), dim), |(i, j)| points[i][j] as f32)
}

/// Reference trapezoid rule on `[0, 1]` with equally spaced samples.
pub fn trapezoid(values: &[f64]) -> f64 {
    let h = 1.0 / (values.len() - 1) as f64;
    values.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
}

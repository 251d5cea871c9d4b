//! Straight-line reference implementations used as oracles. Nothing here
//! calls into the library's numeric kernels; only parameter storage is read.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenetok::fuse::{AxialBlock, Axis, FusionInput, FusionParams, Linear, Mlp};
use scenetok::model::{ElementKind, FusionConfig, TokenizedScene};

pub fn linear(lin: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    (0..lin.fan_out)
        .map(|j| lin.bias[j] + (0..lin.fan_in).map(|i| x[i] * lin.weight[i * lin.fan_out + j]).sum::<f64>())
        .collect()
}

pub fn mlp(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(&m.hidden, x).into_iter().map(|v| v.max(0.0)).collect();
    linear(&m.output, &h)
}

/// Geometry term computed as two separate paths: the per-cell mean of the
/// point encoder, and the box encoder.
pub fn geometry(params: &FusionParams<f64>, input: &FusionInput<f64>) -> Vec<Vec<f64>> {
    let (cells, d) = (input.elements * input.frames, input.dim);
    let mut pooled = vec![vec![0.0; d]; cells];
    for (c, row) in pooled.iter_mut().enumerate() {
        let members: Vec<usize> = (0..input.points.len()).filter(|&p| input.point_cell[p] == c).collect();
        for &p in &members {
            let f = mlp(&params.point_mlp, &input.points[p]);
            for j in 0..d {
                row[j] += f[j] / members.len() as f64;
            }
        }
    }
    (0..cells)
        .map(|c| {
            let b = mlp(&params.box_mlp, &input.boxes[c * 7..(c + 1) * 7]);
            (0..d).map(|j| pooled[c][j] + b[j]).collect()
        })
        .collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
        .collect()
}

/// One attention block; also returns every softmax row produced.
pub fn block(
    b: &AxialBlock<f64>,
    x: &[Vec<f64>],
    mask: &[bool],
    axis: Axis,
    elements: usize,
    frames: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = x[0].len();
    let dh = d / b.heads;
    let seqs: Vec<Vec<usize>> = match axis {
        Axis::Time => (0..elements).map(|e| (0..frames).map(|t| e * frames + t).collect()).collect(),
        Axis::Element => (0..frames).map(|t| (0..elements).map(|e| e * frames + t).collect()).collect(),
    };
    let mut y = x.to_vec();
    let mut rows = Vec::new();
    for seq in seqs {
        let valid: Vec<usize> = seq.into_iter().filter(|&r| mask[r]).collect();
        let ln: Vec<Vec<f64>> = valid
            .iter()
            .map(|&r| layer_norm(&x[r], &b.norm.gamma, &b.norm.beta, b.norm.eps))
            .collect();
        let q: Vec<Vec<f64>> = ln.iter().map(|v| linear(&b.query, v)).collect();
        let k: Vec<Vec<f64>> = ln.iter().map(|v| linear(&b.key, v)).collect();
        let v: Vec<Vec<f64>> = ln.iter().map(|v| linear(&b.value, v)).collect();
        for (a, &ra) in valid.iter().enumerate() {
            let mut ctx = vec![0.0; d];
            for h in 0..b.heads {
                let span = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kb| span.clone().map(|j| q[a][j] * kb[j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
                for (bi, wb) in w.iter().enumerate() {
                    for j in span.clone() {
                        ctx[j] += wb * v[bi][j];
                    }
                }
                rows.push(w);
            }
            let out = linear(&b.output, &ctx);
            for j in 0..d {
                y[ra][j] = x[ra][j] + out[j];
            }
        }
    }
    (y, rows)
}

/// Straight-line fusion: sum, time attention, element attention, masked
/// temporal mean.
pub fn fuse(params: &FusionParams<f64>, input: &FusionInput<f64>) -> Vec<Vec<f64>> {
    let (n, t, d) = (input.elements, input.frames, input.dim);
    let geo = geometry(params, input);
    let mut x: Vec<Vec<f64>> = (0..n * t)
        .map(|c| (0..d).map(|j| input.image[c * d + j] + geo[c][j] + params.temporal[(c % t) * d + j]).collect())
        .collect();
    if params.attention {
        x = block(&params.time_block, &x, &input.mask, Axis::Time, n, t).0;
        x = block(&params.element_block, &x, &input.mask, Axis::Element, n, t).0;
    }
    (0..n)
        .map(|e| {
            let valid: Vec<usize> = (0..t).filter(|f| input.mask[e * t + f]).collect();
            (0..d)
                .map(|j| {
                    if valid.is_empty() {
                        0.0
                    } else {
                        valid.iter().map(|f| x[e * t + f][j]).sum::<f64>() / valid.len() as f64
                    }
                })
                .collect()
        })
        .collect()
}

pub fn toy_params(seed: u64, frames: usize, dim: usize, hidden: usize, heads: usize) -> FusionParams<f64> {
    let config = FusionConfig {
        hidden,
        heads,
        ..FusionConfig::default()
    };
    let mut p = FusionParams::init(&config, frames, dim, seed);
    // non-trivial norm parameters so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for b in [&mut p.time_block, &mut p.element_block] {
        b.norm.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        b.norm.beta.iter_mut().for_each(|g| *g = rng.random_range(-0.5..0.5));
    }
    p
}

/// Random input with roughly a quarter of the slots masked (slot 0 of every
/// element kept valid).
pub fn toy_input(seed: u64, elements: usize, frames: usize, dim: usize, points: usize) -> FusionInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..elements * frames).map(|c| c % frames == 0 || rng.random_bool(0.75)).collect();
    let valid: Vec<usize> = (0..elements * frames).filter(|c| mask[*c]).collect();
    FusionInput {
        elements,
        frames,
        dim,
        points: (0..points)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..2.0)])
            .collect(),
        point_cell: (0..points).map(|_| valid[rng.random_range(0..valid.len())]).collect(),
        boxes: (0..elements * frames * 7).map(|_| rng.random_range(-2.0..2.0)).collect(),
        image: (0..elements * frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        mask,
    }
}

/// Group-by mean over all points for every (element, frame), then the
/// open-set time average; O(N·E·T).
pub fn brute_force_pool(scene: &TokenizedScene) -> (Vec<f64>, Vec<bool>) {
    let (n, t, d) = (scene.num_elements(), scene.frames, scene.feature_dim);
    let mut feats = vec![0.0; n * t * d];
    let mut valid = vec![false; n * t];
    for (e, element) in scene.elements.iter().enumerate() {
        let mut cell_means: Vec<Option<Vec<f64>>> = Vec::with_capacity(t);
        for f in 0..t {
            let mut sum = vec![0.0; d];
            let mut count = 0usize;
            for p in 0..scene.num_points() {
                let [pf, pe] = scene.point_index[p];
                if pe as usize == e && pf as usize == f && scene.point_valid[p] && scene.feature_valid[p] {
                    count += 1;
                    for j in 0..d {
                        sum[j] += scene.point_features[p * d + j] as f64;
                    }
                }
            }
            cell_means.push((count > 0).then(|| sum.iter().map(|s| s / count as f64).collect()));
        }
        if element.kind == ElementKind::OpenSet {
            let seen: Vec<&Vec<f64>> = cell_means.iter().flatten().collect();
            if seen.is_empty() {
                continue;
            }
            for f in 0..t {
                valid[e * t + f] = true;
                for j in 0..d {
                    feats[(e * t + f) * d + j] = seen.iter().map(|m| m[j]).sum::<f64>() / seen.len() as f64;
                }
            }
        } else {
            for (f, m) in cell_means.iter().enumerate() {
                if let Some(m) = m {
                    valid[e * t + f] = true;
                    feats[(e * t + f) * d..(e * t + f + 1) * d].copy_from_slice(m);
                }
            }
        }
    }
    (feats, valid)
}

/// Smallest bounding-rectangle area over every hull edge direction, each
/// evaluated by projecting all points.
pub fn brute_force_min_rect_area(hull: &[[f64; 2]]) -> f64 {
    let n = hull.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let u = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
            let proj = |p: &[f64; 2]| (p[0] * u[0] + p[1] * u[1], -p[0] * u[1] + p[1] * u[0]);
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in hull {
                let (s, t) = proj(p);
                lo = [lo[0].min(s), lo[1].min(t)];
                hi = [hi[0].max(s), hi[1].max(t)];
            }
            (hi[0] - lo[0]) * (hi[1] - lo[1])
        })
        .fold(f64::INFINITY, f64::min)
}

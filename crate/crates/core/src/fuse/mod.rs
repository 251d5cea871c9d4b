//! Spatial-temporal fusion: per-element geometry encoding, axial attention
//! over time then over elements, and a masked temporal mean yielding one
//! embedding per scene element.
//!
//! Everything is generic over [`Scalar`]; `f64` is used for oracle and
//! gradient checks, `f32` for production.

mod grad;
pub mod layers;
pub mod scalar;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compact::ElementImageFeatures;
use crate::error::{Error, Result};
use crate::model::{FusionConfig, TokenizedScene};

pub use grad::{compare_gradients, grad_check, numeric_gradient, GradReport};
pub use layers::{Axis, AxialBlock, HeadWeights, LayerNorm, Linear, Mlp};
pub use scalar::Scalar;

use layers::{AxialCache, MlpCache};

/// Trainable weights of the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<F> {
    /// Per-point geometry encoder, 3 → H → D.
    pub point_mlp: Mlp<F>,
    /// Per-box shape encoder, 7 → H → D.
    pub box_mlp: Mlp<F>,
    /// `T × D` temporal embedding.
    pub temporal: Vec<F>,
    pub time_block: AxialBlock<F>,
    pub element_block: AxialBlock<F>,
    /// When false both attention blocks are bypassed.
    pub attention: bool,
    pub frames: usize,
    pub dim: usize,
}

/// A borrowed, named parameter tensor.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

pub struct TensorMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<F>,
}

macro_rules! linear_tensors {
    ($out:ident, $prefix:expr, $lin:expr, $wrap:ident, $($r:tt)*) => {{
        let lin = $($r)* $lin;
        let (i, o) = (lin.fan_in, lin.fan_out);
        $out.push($wrap { name: format!("{}.weight", $prefix), shape: vec![i, o], data: $($r)* lin.weight });
        $out.push($wrap { name: format!("{}.bias", $prefix), shape: vec![o], data: $($r)* lin.bias });
    }};
}

macro_rules! all_tensors {
    ($self:ident, $wrap:ident, $($r:tt)*) => {{
        let mut out = Vec::with_capacity(24);
        let d = $self.dim;
        linear_tensors!(out, "point_mlp.hidden", $self.point_mlp.hidden, $wrap, $($r)*);
        linear_tensors!(out, "point_mlp.output", $self.point_mlp.output, $wrap, $($r)*);
        linear_tensors!(out, "box_mlp.hidden", $self.box_mlp.hidden, $wrap, $($r)*);
        linear_tensors!(out, "box_mlp.output", $self.box_mlp.output, $wrap, $($r)*);
        out.push($wrap { name: "temporal".into(), shape: vec![$self.frames, d], data: $($r)* $self.temporal });
        for (tag, block) in [("time", $($r)* $self.time_block), ("element", $($r)* $self.element_block)] {
            out.push($wrap { name: format!("{tag}.norm.gamma"), shape: vec![d], data: $($r)* block.norm.gamma });
            out.push($wrap { name: format!("{tag}.norm.beta"), shape: vec![d], data: $($r)* block.norm.beta });
            linear_tensors!(out, format!("{tag}.query"), block.query, $wrap, $($r)*);
            linear_tensors!(out, format!("{tag}.key"), block.key, $wrap, $($r)*);
            linear_tensors!(out, format!("{tag}.value"), block.value, $wrap, $($r)*);
            linear_tensors!(out, format!("{tag}.output"), block.output, $wrap, $($r)*);
        }
        out
    }};
}

impl<F: Scalar> FusionParams<F> {
    /// Seeded uniform(±1/√fan_in) init; the temporal table uses fan_in = D.
    pub fn init(config: &FusionConfig, frames: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let point_mlp = Mlp::init(3, h, dim, &mut rng);
        let box_mlp = Mlp::init(7, h, dim, &mut rng);
        let bound = 1.0 / (dim as f64).sqrt();
        let temporal = (0..frames * dim)
            .map(|_| F::of(rng.random_range(-bound..=bound)))
            .collect();
        let time_block = AxialBlock::init(dim, config.heads, config.layer_norm_eps, &mut rng);
        let element_block = AxialBlock::init(dim, config.heads, config.layer_norm_eps, &mut rng);
        Self {
            point_mlp,
            box_mlp,
            temporal,
            time_block,
            element_block,
            attention: config.attention,
            frames,
            dim,
        }
    }

    /// Same architecture, every tensor zero (LayerNorm gains included).
    pub fn zeros_like(&self) -> Self {
        let h = self.point_mlp.hidden.fan_out;
        Self {
            point_mlp: Mlp::zeros(3, h, self.dim),
            box_mlp: Mlp::zeros(7, h, self.dim),
            temporal: vec![F::zero(); self.temporal.len()],
            time_block: self.time_block.zeros_like(),
            element_block: self.element_block.zeros_like(),
            attention: self.attention,
            frames: self.frames,
            dim: self.dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.point_mlp.hidden.fan_out
    }

    pub fn heads(&self) -> usize {
        self.time_block.heads
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        all_tensors!(self, TensorRef, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        all_tensors!(self, TensorMut, &mut)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> FusionParams<G> {
        let h = self.hidden();
        let mut out = FusionParams::<G> {
            point_mlp: Mlp::zeros(3, h, self.dim),
            box_mlp: Mlp::zeros(7, h, self.dim),
            temporal: vec![G::zero(); self.temporal.len()],
            time_block: cast_block(&self.time_block),
            element_block: cast_block(&self.element_block),
            attention: self.attention,
            frames: self.frames,
            dim: self.dim,
        };
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: F, other: &FusionParams<F>) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * *s;
            }
        }
    }
}

fn cast_block<F: Scalar, G: Scalar>(block: &AxialBlock<F>) -> AxialBlock<G> {
    let d = block.dim();
    AxialBlock {
        norm: LayerNorm::new(d, block.norm.eps.as_f64()),
        query: Linear::zeros(d, d),
        key: Linear::zeros(d, d),
        value: Linear::zeros(d, d),
        output: Linear::zeros(d, d),
        heads: block.heads,
    }
}

/// Dense inputs to the fusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput<F> {
    pub elements: usize,
    pub frames: usize,
    pub dim: usize,
    /// Coordinates of the valid points.
    pub points: Vec<[F; 3]>,
    /// `element · T + frame` of each point.
    pub point_cell: Vec<usize>,
    /// `N_elem × T × 7`.
    pub boxes: Vec<F>,
    /// `N_elem × T × D` pooled image features.
    pub image: Vec<F>,
    /// `N_elem × T` slot validity.
    pub mask: Vec<bool>,
}

impl<F: Scalar> FusionInput<F> {
    pub fn from_scene(scene: &TokenizedScene, image: &ElementImageFeatures) -> Result<Self> {
        let (n, t, d) = (scene.num_elements(), scene.frames, scene.feature_dim);
        if image.features.len() != n * t * d || image.valid.len() != n * t {
            return Err(Error::ShapeMismatch(format!(
                "image features hold {} values for {n}×{t}×{d}",
                image.features.len()
            )));
        }
        let mut points = Vec::new();
        let mut point_cell = Vec::new();
        for (i, xyz) in scene.points_xyz.iter().enumerate() {
            if !scene.point_valid[i] {
                continue;
            }
            let [frame, token] = scene.point_index[i];
            points.push(xyz.map(F::of));
            point_cell.push(token as usize * t + frame as usize);
        }
        let input = Self {
            elements: n,
            frames: t,
            dim: d,
            points,
            point_cell,
            boxes: scene.box_tensor().into_iter().map(F::of).collect(),
            image: image.features.iter().map(|v| F::of(*v as f64)).collect(),
            mask: scene.element_mask(),
        };
        input.check_shapes()?;
        Ok(input)
    }

    pub fn cells(&self) -> usize {
        self.elements * self.frames
    }

    pub fn check_shapes(&self) -> Result<()> {
        let cells = self.cells();
        let problems = [
            (self.boxes.len() != cells * 7, "box tensor"),
            (self.image.len() != cells * self.dim, "image features"),
            (self.mask.len() != cells, "mask"),
            (self.points.len() != self.point_cell.len(), "point index"),
            (self.point_cell.iter().any(|c| *c >= cells), "point cell out of range"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, what)) => Err(Error::ShapeMismatch(format!(
                "{what} inconsistent with {}×{}×{}",
                self.elements, self.frames, self.dim
            ))),
            None => Ok(()),
        }
    }

    fn check_against(&self, params: &FusionParams<F>) -> Result<()> {
        self.check_shapes()?;
        if self.frames != params.frames || self.dim != params.dim {
            return Err(Error::ShapeMismatch(format!(
                "input is T={} D={}, parameters expect T={} D={}",
                self.frames, self.dim, params.frames, params.dim
            )));
        }
        Ok(())
    }
}

/// Mean of `values` rows grouped by `cell`; empty cells stay zero.
fn pool_by_index<F: Scalar>(values: &[F], cell: &[usize], cells: usize, d: usize) -> (Vec<F>, Vec<usize>) {
    let mut sums = vec![F::zero(); cells * d];
    let mut counts = vec![0usize; cells];
    for (p, &c) in cell.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(&values[p * d..(p + 1) * d]) {
            *s += *v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 1 {
            let inv = F::one() / F::of(n as f64);
            sums[c * d..(c + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
    }
    (sums, counts)
}

struct GeometryCache<F> {
    point: MlpCache<F>,
    boxes: MlpCache<F>,
    counts: Vec<usize>,
}

fn encode_geometry_cached<F: Scalar>(params: &FusionParams<F>, input: &FusionInput<F>) -> (Vec<F>, GeometryCache<F>) {
    let (cells, d) = (input.cells(), input.dim);
    let flat: Vec<F> = input.points.iter().flatten().copied().collect();
    let (point_feats, point_cache) = params.point_mlp.forward_cached(&flat, input.points.len());
    let (mut geo, counts) = pool_by_index(&point_feats, &input.point_cell, cells, d);
    let (box_feats, box_cache) = params.box_mlp.forward_cached(&input.boxes, cells);
    geo.iter_mut().zip(box_feats).for_each(|(g, b)| *g += b);
    (
        geo,
        GeometryCache {
            point: point_cache,
            boxes: box_cache,
            counts,
        },
    )
}

/// `pool(MLP_f(points)) + MLP_c(boxes)`, shape `N_elem × T × D`. Box rows of
/// invalid slots are encoded too.
pub fn encode_geometry<F: Scalar>(params: &FusionParams<F>, input: &FusionInput<F>) -> Result<Vec<F>> {
    input.check_against(params)?;
    Ok(encode_geometry_cached(params, input).0)
}

/// One axial self-attention block applied along `axis`; returns the output
/// and the per-sequence, per-head softmax weights.
pub fn attn_along_axis<F: Scalar>(
    x: &[F],
    mask: &[bool],
    axis: Axis,
    block: &AxialBlock<F>,
    elements: usize,
    frames: usize,
) -> Result<(Vec<F>, Vec<HeadWeights<F>>)> {
    let cells = elements * frames;
    if x.len() != cells * block.dim() || mask.len() != cells {
        return Err(Error::ShapeMismatch(format!(
            "attention input of {} values for {elements}×{frames}×{}",
            x.len(),
            block.dim()
        )));
    }
    let (y, cache) = block.forward(x, mask, axis, elements, frames, true);
    Ok((y, cache.weights))
}

/// Mean over valid frames; elements without any valid frame give zeros.
pub fn masked_temporal_mean<F: Scalar>(x: &[F], mask: &[bool], elements: usize, frames: usize, d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); elements * d];
    for e in 0..elements {
        let valid = (0..frames).filter(|t| mask[e * frames + t]).count();
        if valid == 0 {
            continue;
        }
        let inv = F::one() / F::of(valid as f64);
        let row = &mut out[e * d..(e + 1) * d];
        for t in (0..frames).filter(|t| mask[e * frames + t]) {
            let cell = e * frames + t;
            row.iter_mut().zip(&x[cell * d..(cell + 1) * d]).for_each(|(o, v)| *o += *v);
        }
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

struct FuseCache<F> {
    time: Option<AxialCache<F>>,
    element: Option<AxialCache<F>>,
}

fn fuse_cached<F: Scalar>(
    params: &FusionParams<F>,
    image: &[F],
    geometry: &[F],
    mask: &[bool],
    elements: usize,
    train: bool,
) -> (Vec<F>, FuseCache<F>) {
    let (t, d) = (params.frames, params.dim);
    let mut x: Vec<F> = image.iter().zip(geometry).map(|(a, b)| *a + *b).collect();
    for cell in x.chunks_exact_mut(t * d) {
        cell.iter_mut().zip(&params.temporal).for_each(|(v, e)| *v += *e);
    }
    let mut cache = FuseCache { time: None, element: None };
    if params.attention {
        let (y, c) = params.time_block.forward(&x, mask, Axis::Time, elements, t, train);
        let (z, c2) = params.element_block.forward(&y, mask, Axis::Element, elements, t, train);
        x = z;
        if train {
            cache.time = Some(c);
            cache.element = Some(c2);
        }
    }
    (masked_temporal_mean(&x, mask, elements, t, d), cache)
}

/// `F_img + F_geo + f_temporal`, attention along time, then along elements,
/// then the masked temporal mean. Output is `N_elem × D`.
pub fn fuse_scene<F: Scalar>(
    params: &FusionParams<F>,
    image: &[F],
    geometry: &[F],
    mask: &[bool],
    elements: usize,
) -> Result<Vec<F>> {
    let cells = elements * params.frames;
    if image.len() != cells * params.dim || geometry.len() != image.len() || mask.len() != cells {
        return Err(Error::ShapeMismatch(format!(
            "fusion inputs ({}, {}, {}) for {elements}×{}×{}",
            image.len(),
            geometry.len(),
            mask.len(),
            params.frames,
            params.dim
        )));
    }
    Ok(fuse_cached(params, image, geometry, mask, elements, false).0)
}

/// Retained activations of a training forward pass.
pub struct ForwardCache<F> {
    geometry: GeometryCache<F>,
    fuse: FuseCache<F>,
}

impl<F: Scalar> FusionParams<F> {
    /// Full network: `N_elem × D` scene tokens.
    pub fn forward(&self, input: &FusionInput<F>) -> Result<Vec<F>> {
        input.check_against(self)?;
        let (geo, _) = encode_geometry_cached(self, input);
        Ok(fuse_cached(self, &input.image, &geo, &input.mask, input.elements, false).0)
    }

    pub fn forward_train(&self, input: &FusionInput<F>) -> Result<(Vec<F>, ForwardCache<F>)> {
        input.check_against(self)?;
        let (geo, geometry) = encode_geometry_cached(self, input);
        let (out, fuse) = fuse_cached(self, &input.image, &geo, &input.mask, input.elements, true);
        Ok((out, ForwardCache { geometry, fuse }))
    }

    /// Parameter gradients given `dL/dF_elem`.
    pub fn backward(&self, input: &FusionInput<F>, cache: &ForwardCache<F>, d_out: &[F]) -> FusionParams<F> {
        let (n, t, d) = (input.elements, self.frames, self.dim);
        let mut grad = self.zeros_like();
        let mut dx = vec![F::zero(); n * t * d];
        for e in 0..n {
            let valid = (0..t).filter(|f| input.mask[e * t + f]).count();
            if valid == 0 {
                continue;
            }
            let inv = F::one() / F::of(valid as f64);
            for f in (0..t).filter(|f| input.mask[e * t + f]) {
                let cell = e * t + f;
                for j in 0..d {
                    dx[cell * d + j] = d_out[e * d + j] * inv;
                }
            }
        }
        if let (Some(tc), Some(ec)) = (&cache.fuse.time, &cache.fuse.element) {
            dx = self.element_block.backward(ec, &dx, &input.mask, &mut grad.element_block);
            dx = self.time_block.backward(tc, &dx, &input.mask, &mut grad.time_block);
        }
        for cell in dx.chunks_exact(t * d) {
            grad.temporal.iter_mut().zip(cell).for_each(|(g, v)| *g += *v);
        }
        self.box_mlp.backward(&cache.geometry.boxes, &dx, n * t, &mut grad.box_mlp);
        let mut d_points = Vec::with_capacity(input.points.len() * d);
        for &c in &input.point_cell {
            let inv = F::one() / F::of(cache.geometry.counts[c] as f64);
            d_points.extend(dx[c * d..(c + 1) * d].iter().map(|v| *v * inv));
        }
        self.point_mlp
            .backward(&cache.geometry.point, &d_points, input.points.len(), &mut grad.point_mlp);
        grad
    }

    /// `L = Σ F_elem²` and its parameter gradient.
    pub fn loss_and_grad(&self, input: &FusionInput<F>) -> Result<(F, FusionParams<F>)> {
        let (out, cache) = self.forward_train(input)?;
        let loss = out.iter().fold(F::zero(), |a, v| a + *v * *v);
        let d_out: Vec<F> = out.iter().map(|v| *v + *v).collect();
        Ok((loss, self.backward(input, &cache, &d_out)))
    }

    pub fn loss(&self, input: &FusionInput<F>) -> Result<F> {
        Ok(self.forward(input)?.iter().fold(F::zero(), |a, v| a + *v * *v))
    }
}

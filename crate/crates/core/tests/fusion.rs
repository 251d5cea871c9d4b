mod common;

use proptest::prelude::*;

use scenetok::fuse::{
    attn_along_axis, encode_geometry, fuse_scene, masked_temporal_mean, Axis, FusionInput, FusionParams, Linear, Mlp,
};
use scenetok::model::FusionConfig;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_key_attention_is_value_projection() {
    let params = common::toy_params(1, 1, 8, 4, 2);
    let input = common::toy_input(2, 3, 1, 8, 0);
    let block = &params.time_block;
    let (y, weights) = attn_along_axis(&input.image, &input.mask, Axis::Time, block, 3, 1).unwrap();
    assert!(weights.iter().all(|w| w.weights == vec![1.0]));
    for r in 0..3 {
        let x = &input.image[r * 8..(r + 1) * 8];
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let ln: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + block.norm.eps).sqrt() * block.norm.gamma[j] + block.norm.beta[j])
            .collect();
        let out = common::linear(&block.output, &common::linear(&block.value, &ln));
        let expected: Vec<f64> = x.iter().zip(&out).map(|(a, b)| a + b).collect();
        assert!(max_abs(&y[r * 8..(r + 1) * 8], &expected) < 1e-12);
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let params = common::toy_params(3, 4, 8, 4, 2);
    let row: Vec<f64> = (0..8).map(|j| (j as f64 * 0.7).sin()).collect();
    let x: Vec<f64> = (0..5 * 4).flat_map(|_| row.clone()).collect();
    let mask = vec![true; 20];
    for axis in [Axis::Time, Axis::Element] {
        let (_, weights) = attn_along_axis(&x, &mask, axis, &params.element_block, 5, 4).unwrap();
        for hw in weights {
            let n = hw.rows.len() as f64;
            assert!(hw.weights.iter().all(|w| (w - 1.0 / n).abs() < 1e-12));
        }
    }
}

#[test]
fn fully_masked_sequence_passes_through() {
    let params = common::toy_params(4, 3, 4, 4, 2);
    let mut input = common::toy_input(5, 2, 3, 4, 0);
    input.mask = vec![false, false, false, true, true, true];
    let (y, _) = attn_along_axis(&input.image, &input.mask, Axis::Time, &params.time_block, 2, 3).unwrap();
    assert_eq!(&y[..12], &input.image[..12]);
    let fused = params.forward(&input).unwrap();
    assert_eq!(&fused[..4], &[0.0; 4]);
}

#[test]
fn zero_point_encoder_gives_box_term() {
    let mut params = common::toy_params(6, 3, 8, 5, 2);
    params.point_mlp = Mlp::zeros(3, 5, 8);
    let input = common::toy_input(7, 4, 3, 8, 30);
    let geo = encode_geometry(&params, &input).unwrap();
    for c in 0..12 {
        let expected = common::mlp(&params.box_mlp, &input.boxes[c * 7..(c + 1) * 7]);
        assert!(max_abs(&geo[c * 8..(c + 1) * 8], &expected) < 1e-12);
    }
}

#[test]
fn single_point_cell_pools_to_that_point() {
    let params = common::toy_params(8, 2, 4, 5, 2);
    let mut input = common::toy_input(9, 2, 2, 4, 1);
    input.point_cell = vec![3];
    input.mask = vec![true; 4];
    let geo = encode_geometry(&params, &input).unwrap();
    let expected: Vec<f64> = common::mlp(&params.point_mlp, &input.points[0])
        .iter()
        .zip(common::mlp(&params.box_mlp, &input.boxes[21..28]))
        .map(|(a, b)| a + b)
        .collect();
    assert!(max_abs(&geo[12..16], &expected) < 1e-12);
}

#[test]
fn output_shape_and_reproducibility() {
    let params = common::toy_params(10, 3, 8, 6, 2);
    let input = common::toy_input(11, 5, 3, 8, 20);
    let a = params.forward(&input).unwrap();
    let b = common::toy_params(10, 3, 8, 6, 2).forward(&input).unwrap();
    assert_eq!(a.len(), 5 * 8);
    assert_eq!(a, b);
}

#[test]
fn fuse_scene_rejects_bad_shapes() {
    let params = common::toy_params(12, 3, 8, 6, 2);
    assert!(fuse_scene(&params, &[0.0; 24], &[0.0; 24], &[true; 2], 1).is_err());
}

#[test]
fn f32_forward_tracks_f64() {
    let params = common::toy_params(13, 3, 8, 6, 2);
    let input = common::toy_input(14, 4, 3, 8, 20);
    let wide = params.forward(&input).unwrap();
    let narrow_input = FusionInput::<f32> {
        elements: input.elements,
        frames: input.frames,
        dim: input.dim,
        points: input.points.iter().map(|p| p.map(|v| v as f32)).collect(),
        point_cell: input.point_cell.clone(),
        boxes: input.boxes.iter().map(|v| *v as f32).collect(),
        image: input.image.iter().map(|v| *v as f32).collect(),
        mask: input.mask.clone(),
    };
    let narrow = params.cast::<f32>().forward(&narrow_input).unwrap();
    for (a, b) in wide.iter().zip(narrow) {
        assert!((a - b as f64).abs() < 1e-4 * (1.0 + a.abs()));
    }
}

#[test]
fn linear_only_mode_is_the_masked_mean() {
    let config = FusionConfig {
        hidden: 6,
        heads: 2,
        attention: false,
        ..FusionConfig::default()
    };
    let params = FusionParams::<f64>::init(&config, 3, 4, 1);
    let input = common::toy_input(15, 3, 3, 4, 10);
    let geo = encode_geometry(&params, &input).unwrap();
    let x: Vec<f64> = (0..9 * 4)
        .map(|i| input.image[i] + geo[i] + params.temporal[(i / 4 % 3) * 4 + i % 4])
        .collect();
    let expected = masked_temporal_mean(&x, &input.mask, 3, 3, 4);
    assert!(max_abs(&params.forward(&input).unwrap(), &expected) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_reference(seed in 0u64..1000, n in 1usize..6, t in 1usize..5, points in 0usize..30) {
        let params = common::toy_params(seed, t, 8, 5, 2);
        let input = common::toy_input(seed + 1, n, t, 8, points);
        let fast = params.forward(&input).unwrap();
        let slow: Vec<f64> = common::fuse(&params, &input).into_iter().flatten().collect();
        prop_assert!(max_abs(&fast, &slow) < 1e-10);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, n in 1usize..6, t in 1usize..5) {
        let params = common::toy_params(seed, t, 8, 5, 2);
        let input = common::toy_input(seed + 2, n, t, 8, 0);
        for (axis, block) in [(Axis::Time, &params.time_block), (Axis::Element, &params.element_block)] {
            let (_, weights) = attn_along_axis(&input.image, &input.mask, axis, block, n, t).unwrap();
            for hw in &weights {
                prop_assert!(hw.rows.iter().all(|r| input.mask[*r]));
                for row in hw.weights.chunks_exact(hw.rows.len()) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn element_permutation_equivariance(seed in 0u64..1000, n in 2usize..7, t in 1usize..4) {
        let params = common::toy_params(seed, t, 8, 5, 2);
        let input = common::toy_input(seed + 3, n, t, 8, 25);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left((seed as usize) % n);
        perm.swap(0, n - 1);
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            perm.iter().flat_map(|&p| src[p * t * w..(p + 1) * t * w].to_vec()).collect()
        };
        let permuted = FusionInput {
            boxes: gather(&input.boxes, 7),
            image: gather(&input.image, 8),
            mask: perm.iter().flat_map(|&p| input.mask[p * t..(p + 1) * t].to_vec()).collect(),
            point_cell: input.point_cell.iter().map(|c| inverse[c / t] * t + c % t).collect(),
            ..input.clone()
        };
        let a = params.forward(&input).unwrap();
        let b = params.forward(&permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!(max_abs(&b[i * 8..(i + 1) * 8], &a[p * 8..(p + 1) * 8]) < 1e-12);
        }
    }

    #[test]
    fn masked_slots_never_matter(seed in 0u64..1000, garbage in -1e6f64..1e6) {
        let params = common::toy_params(seed, 3, 8, 5, 2);
        let input = common::toy_input(seed + 4, 4, 3, 8, 20);
        let mut noisy = input.clone();
        for c in (0..12).filter(|c| !input.mask[*c]) {
            noisy.image[c * 8..(c + 1) * 8].fill(garbage);
            noisy.boxes[c * 7..(c + 1) * 7].fill(-garbage);
            noisy.points.push([garbage, 0.5, -garbage]);
            noisy.point_cell.push(c);
        }
        prop_assert!(max_abs(&params.forward(&input).unwrap(), &params.forward(&noisy).unwrap()) < 1e-12);
    }

    #[test]
    fn geometry_is_additive_without_biases(seed in 0u64..1000, points in 1usize..30) {
        let mut params = common::toy_params(seed, 3, 8, 5, 2);
        let zero_bias = |l: &mut Linear<f64>| l.bias.iter_mut().for_each(|b| *b = 0.0);
        for m in [&mut params.point_mlp, &mut params.box_mlp] {
            zero_bias(&mut m.hidden);
            zero_bias(&mut m.output);
        }
        let input = common::toy_input(seed + 5, 4, 3, 8, points);
        let no_boxes = FusionInput { boxes: vec![0.0; input.boxes.len()], ..input.clone() };
        let no_points = FusionInput { points: vec![], point_cell: vec![], ..input.clone() };
        let full = encode_geometry(&params, &input).unwrap();
        let a = encode_geometry(&params, &no_boxes).unwrap();
        let b = encode_geometry(&params, &no_points).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs(&full, &sum) < 1e-12);
    }
}

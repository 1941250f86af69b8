//! Channel sampling and nearest-neighbour resizing that make a donor
//! representation fit the shape a target stage produces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Chw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    Identity,
    NearestResize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptSpec {
    pub src_shape: Chw,
    pub dst_shape: Chw,
    /// Source channel feeding each destination channel; non-decreasing.
    pub channel_map: Vec<usize>,
    pub spatial_mode: SpatialMode,
}

impl AdaptSpec {
    pub fn is_identity(&self) -> bool {
        self.src_shape == self.dst_shape
    }
}

/// Uniform channel mapping `j -> floor(j * C_s / C_t)`, repeating channels
/// when the target is wider and subsampling when it is narrower.
pub fn plan_adapt(src: Chw, dst: Chw) -> AdaptSpec {
    assert!(src.is_positive() && dst.is_positive(), "shapes must be positive");
    let channel_map = (0..dst.c).map(|j| j * src.c / dst.c).collect();
    let spatial_mode = if (src.h, src.w) == (dst.h, dst.w) {
        SpatialMode::Identity
    } else {
        SpatialMode::NearestResize
    };
    AdaptSpec {
        src_shape: src,
        dst_shape: dst,
        channel_map,
        spatial_mode,
    }
}

fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Applies `spec` to an `(n, C_s, H_s, W_s)` batch. Output values are always
/// copies of input values; nothing is interpolated.
pub fn apply_adapt(spec: &AdaptSpec, rep: &Tensor) -> Result<Tensor> {
    let src = spec.src_shape;
    let dst = spec.dst_shape;
    let got = rep.example_shape().ok();
    if got != Some(src) {
        return Err(Error::Shape(format!(
            "adapter expects examples of shape {src}, got {:?}",
            rep.shape()
        )));
    }
    if spec.channel_map.len() != dst.c || spec.channel_map.iter().any(|&c| c >= src.c) {
        return Err(Error::Shape(format!(
            "channel map {:?} does not fit {src} -> {dst}",
            spec.channel_map
        )));
    }
    if spec.is_identity() && spec.channel_map.iter().enumerate().all(|(j, &c)| j == c) {
        return Ok(rep.clone());
    }

    let n = rep.batch();
    let rows: Vec<usize> = (0..dst.h).map(|u| nearest_index(u, dst.h, src.h)).collect();
    let cols: Vec<usize> = (0..dst.w).map(|v| nearest_index(v, dst.w, src.w)).collect();
    let input = rep.data();
    let mut out = Vec::with_capacity(n * dst.numel());
    for b in 0..n {
        let example = &input[b * src.numel()..(b + 1) * src.numel()];
        for &c in &spec.channel_map {
            let plane = &example[c * src.h * src.w..(c + 1) * src.h * src.w];
            for &r in &rows {
                for &q in &cols {
                    out.push(plane[r * src.w + q]);
                }
            }
        }
    }
    Tensor::new(vec![n, dst.c, dst.h, dst.w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, values: Vec<f32>) -> Tensor {
        Tensor::new(vec![1, 1, h, w], values).unwrap()
    }

    #[test]
    fn equal_shapes_are_identity() {
        let s = Chw::new(8, 14, 14);
        let spec = plan_adapt(s, s);
        assert_eq!(spec.channel_map, (0..8).collect::<Vec<_>>());
        assert_eq!(spec.spatial_mode, SpatialMode::Identity);
    }

    #[test]
    fn channel_maps() {
        assert_eq!(plan_adapt(Chw::new(3, 1, 1), Chw::new(6, 1, 1)).channel_map, [0, 0, 1, 1, 2, 2]);
        assert_eq!(plan_adapt(Chw::new(6, 1, 1), Chw::new(3, 1, 1)).channel_map, [0, 2, 4]);
        assert_eq!(
            plan_adapt(Chw::new(16, 4, 4), Chw::new(10, 2, 2)).spatial_mode,
            SpatialMode::NearestResize
        );
    }

    #[test]
    fn upsample_two_by_two() {
        let spec = plan_adapt(Chw::new(1, 2, 2), Chw::new(1, 4, 4));
        let out = apply_adapt(&spec, &grid(2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn downsample_four_by_four() {
        let spec = plan_adapt(Chw::new(1, 4, 4), Chw::new(1, 2, 2));
        let out = apply_adapt(&spec, &grid(4, 4, (1..=16).map(|v| v as f32).collect())).unwrap();
        assert_eq!(out.data(), &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn channel_repeat_copies_planes() {
        let spec = plan_adapt(Chw::new(2, 1, 2), Chw::new(4, 1, 2));
        let rep = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = apply_adapt(&spec, &rep).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn wrong_input_shape() {
        let spec = plan_adapt(Chw::new(2, 3, 3), Chw::new(2, 3, 3));
        let rep = Tensor::zeros(vec![1, 2, 3, 4]);
        assert!(matches!(apply_adapt(&spec, &rep), Err(Error::Shape(_))));
    }

    fn shape() -> impl Strategy<Value = Chw> {
        (1usize..6, 1usize..7, 1usize..7).prop_map(|(c, h, w)| Chw::new(c, h, w))
    }

    proptest! {
        #[test]
        fn channel_map_is_monotone_and_in_range(src in shape(), dst in shape()) {
            let spec = plan_adapt(src, dst);
            prop_assert_eq!(spec.channel_map.len(), dst.c);
            prop_assert!(spec.channel_map.iter().all(|&c| c < src.c));
            prop_assert!(spec.channel_map.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn outputs_are_input_values(src in shape(), dst in shape(), n in 1usize..3, seed in any::<u32>()) {
            let numel = n * src.numel();
            let data: Vec<f32> = (0..numel).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32).collect();
            let rep = Tensor::new(vec![n, src.c, src.h, src.w], data.clone()).unwrap();
            let out = apply_adapt(&plan_adapt(src, dst), &rep).unwrap();
            prop_assert_eq!(out.shape(), &[n, dst.c, dst.h, dst.w]);
            prop_assert!(out.data().iter().all(|v| data.contains(v)));
        }

        #[test]
        fn equal_shapes_are_bit_exact(src in shape(), n in 1usize..3) {
            let data: Vec<f32> = (0..n * src.numel()).map(|i| i as f32 * 0.37 - 1.0).collect();
            let rep = Tensor::new(vec![n, src.c, src.h, src.w], data).unwrap();
            prop_assert_eq!(apply_adapt(&plan_adapt(src, src), &rep).unwrap(), rep);
        }

        #[test]
        fn double_then_halve_round_trips(src in shape()) {
            let data: Vec<f32> = (0..src.numel()).map(|i| i as f32).collect();
            let rep = Tensor::new(vec![1, src.c, src.h, src.w], data).unwrap();
            let big = Chw::new(src.c, 2 * src.h, 2 * src.w);
            let up = apply_adapt(&plan_adapt(src, big), &rep).unwrap();
            let back = apply_adapt(&plan_adapt(big, src), &up).unwrap();
            prop_assert_eq!(back, rep);
        }
    }
}

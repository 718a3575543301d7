//! Training targets derived from oracle outputs: min-max normalized depth maps
//! and white-on-black boundary maps, both stored as 3-channel 8-bit images.

use crate::error::{Error, Result};

/// H×W×3 image whose three channels are identical at every pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayTarget {
    pub width: usize,
    pub height: usize,
    /// Row-major H×W×3.
    pub map: Vec<u8>,
}

impl GrayTarget {
    fn from_plane(width: usize, height: usize, plane: &[u8]) -> Self {
        let map = plane.iter().flat_map(|&v| [v, v, v]).collect();
        GrayTarget { width, height, map }
    }

    /// First channel as a single plane.
    pub fn channel0(&self) -> Vec<u8> {
        self.map.chunks_exact(3).map(|px| px[0]).collect()
    }

    pub fn channels_identical(&self) -> bool {
        self.map.chunks_exact(3).all(|px| px[0] == px[1] && px[1] == px[2])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthTarget {
    pub target: GrayTarget,
    /// Set when the input was constant and the map is all zeros.
    pub degenerate: bool,
}

pub type SegTarget = GrayTarget;

/// Min-max normalizes a depth field to [0, 255] with round-half-up and
/// replicates it across three channels. A constant field maps to all zeros
/// with `degenerate` set.
pub fn normalize_depth(width: usize, height: usize, depth_raw: &[f64]) -> Result<DepthTarget> {
    if width == 0 || height == 0 || depth_raw.len() != width * height {
        return Err(Error::Shape(format!(
            "depth field of length {} does not match {}x{}",
            depth_raw.len(),
            width,
            height
        )));
    }
    if let Some(i) = depth_raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::Range(format!("non-finite depth at index {i}")));
    }
    let (lo, hi) = depth_raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(DepthTarget {
            target: GrayTarget::from_plane(width, height, &vec![0u8; width * height]),
            degenerate: true,
        });
    }
    let range = hi - lo;
    let plane: Vec<u8> = depth_raw
        .iter()
        .map(|&d| {
            let scaled = (d - lo) / range * 255.0;
            (scaled + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(DepthTarget { target: GrayTarget::from_plane(width, height, &plane), degenerate: false })
}

/// Boundary map of a set of binary masks: a pixel is white (255) iff it is a
/// mask pixel with at least one 4-neighbor outside that mask or outside the
/// image.
pub fn boundary_map(width: usize, height: usize, masks: &[Vec<u8>]) -> Result<SegTarget> {
    for (i, m) in masks.iter().enumerate() {
        if m.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {i} has {} pixels, expected {}x{}",
                m.len(),
                width,
                height
            )));
        }
    }
    let mut plane = vec![0u8; width * height];
    for m in masks {
        let inside = |x: isize, y: isize| {
            x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && m[y as usize * width + x as usize] != 0
        };
        for y in 0..height {
            for x in 0..width {
                if m[y * width + x] == 0 {
                    continue;
                }
                let (xi, yi) = (x as isize, y as isize);
                if !inside(xi - 1, yi) || !inside(xi + 1, yi) || !inside(xi, yi - 1) || !inside(xi, yi + 1) {
                    plane[y * width + x] = 255;
                }
            }
        }
    }
    Ok(GrayTarget::from_plane(width, height, &plane))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        let t = normalize_depth(3, 1, &[0.0, 5.0, 10.0]).unwrap();
        assert!(!t.degenerate);
        assert_eq!(t.target.channel0(), vec![0, 128, 255]);
        assert!(t.target.channels_identical());
    }

    #[test]
    fn constant_input_is_degenerate() {
        let t = normalize_depth(2, 2, &[0.3; 4]).unwrap();
        assert!(t.degenerate);
        assert!(t.target.map.iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(normalize_depth(2, 1, &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn zero_masks_all_black() {
        let t = boundary_map(5, 4, &[]).unwrap();
        assert!(t.map.iter().all(|&v| v == 0));
    }

    #[test]
    fn full_mask_gives_border_frame() {
        let t = boundary_map(6, 5, &[vec![1; 30]]).unwrap();
        let p = t.channel0();
        for y in 0..5 {
            for x in 0..6 {
                let border = x == 0 || y == 0 || x == 5 || y == 4;
                assert_eq!(p[y * 6 + x], if border { 255 } else { 0 });
            }
        }
    }

    #[test]
    fn square_mask_perimeter() {
        let mut m = vec![0u8; 81];
        for y in 3..6 {
            for x in 3..6 {
                m[y * 9 + x] = 1;
            }
        }
        let p = boundary_map(9, 9, &[m]).unwrap().channel0();
        let white: Vec<usize> = (0..81).filter(|&i| p[i] == 255).collect();
        assert_eq!(white.len(), 8);
        assert_eq!(p[4 * 9 + 4], 0);
    }

    #[test]
    fn dimension_mismatch_names_mask() {
        let err = boundary_map(3, 3, &[vec![0; 9], vec![0; 8]]).unwrap_err().to_string();
        assert!(err.contains("mask 1"), "{err}");
    }

    proptest! {
        #[test]
        fn affine_invariance(vals in prop::collection::vec(-100i32..100, 2..40), a in 1i32..7, b in -50i32..50) {
            // Integer-valued inputs with small integer affine maps keep the
            // normalized ratios exact in f64.
            let d: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let e: Vec<f64> = d.iter().map(|&v| a as f64 * v + b as f64).collect();
            let n = d.len();
            prop_assert_eq!(normalize_depth(n, 1, &d).unwrap(), normalize_depth(n, 1, &e).unwrap());
        }

        #[test]
        fn monotone_and_in_range(vals in prop::collection::vec(-1.0e3f64..1.0e3, 1..40)) {
            let n = vals.len();
            let t = normalize_depth(n, 1, &vals).unwrap();
            let p = t.target.channel0();
            for i in 0..n {
                for j in 0..n {
                    if vals[i] <= vals[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
            if !t.degenerate {
                prop_assert_eq!(*p.iter().min().unwrap(), 0);
                prop_assert_eq!(*p.iter().max().unwrap(), 255);
            }
        }

        #[test]
        fn renormalizing_is_a_fixed_point(vals in prop::collection::vec(0.0f64..1.0, 2..40)) {
            let n = vals.len();
            let t = normalize_depth(n, 1, &vals).unwrap();
            prop_assume!(!t.degenerate);
            let again: Vec<f64> = t.target.channel0().iter().map(|&v| v as f64).collect();
            prop_assert_eq!(normalize_depth(n, 1, &again).unwrap(), t);
        }

        #[test]
        fn boundary_order_invariant(seed_masks in prop::collection::vec(prop::collection::vec(0u8..2, 36), 0..4)) {
            let fwd = boundary_map(6, 6, &seed_masks).unwrap();
            let mut rev = seed_masks.clone();
            rev.reverse();
            prop_assert_eq!(&fwd, &boundary_map(6, 6, &rev).unwrap());
            prop_assert!(fwd.map.iter().all(|&v| v == 0 || v == 255));
        }
    }
}

//! Self-supervised and domain-knowledge task constructors: rotation and
//! jigsaw preprocessors with their derived labels, macro-class lookup, and
//! seeded per-sample preprocessor composition.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GatError, Result};

/// A single image with pixel values in `[0,1]`, row-major `[h][w][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(GatError::ShapeMismatch(format!(
                "image {}x{}x{} with {} pixels",
                height,
                width,
                channels,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(GatError::InvalidArgument("pixel outside [0,1]".into()));
        }
        Ok(ImageTensor { height, width, channels, pixels })
    }

    pub fn pixel(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.width + c) * self.channels + ch]
    }
}

/// Rotates a square image by `90 * angle_id` degrees counterclockwise;
/// the label is the angle id.
pub fn apply_rotation(image: &ImageTensor, angle_id: u8) -> Result<(ImageTensor, u8)> {
    if image.height != image.width {
        return Err(GatError::InvalidArgument(format!(
            "rotation needs a square image, got {}x{}",
            image.height, image.width
        )));
    }
    if angle_id > 3 {
        return Err(GatError::InvalidArgument(format!(
            "angle_id {angle_id} out of range 0..=3"
        )));
    }
    let n = image.height;
    let ch = image.channels;
    let mut out = image.clone();
    for _ in 0..angle_id {
        let src = out.pixels.clone();
        // out(r, c) = in(c, n-1-r): one 90-degree CCW turn
        for r in 0..n {
            for c in 0..n {
                for k in 0..ch {
                    out.pixels[(r * n + c) * ch + k] = src[(c * n + (n - 1 - r)) * ch + k];
                }
            }
        }
    }
    Ok((out, angle_id))
}

/// `N` distinct permutations of the `G*G` jigsaw grid cells; entry 0 is the
/// identity. Sampled seeded, greedily maximizing the minimal pairwise
/// Hamming distance to the permutations already in the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPool {
    pub grid: usize,
    pub perms: Vec<Vec<usize>>,
}

impl PermutationPool {
    pub fn build(grid: usize, size: usize, seed: u64) -> Result<Self> {
        let cells = grid * grid;
        let mut max_pool = 1u64;
        for k in 2..=cells as u64 {
            max_pool = max_pool.saturating_mul(k);
            if max_pool > 1 << 32 {
                break;
            }
        }
        if size as u64 > max_pool {
            return Err(GatError::InvalidArgument(format!(
                "pool size {size} exceeds {cells}-cell permutation count"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let identity: Vec<usize> = (0..cells).collect();
        let mut perms = vec![identity.clone()];
        let candidates_per_slot = 64;
        while perms.len() < size {
            let mut best: Option<(usize, Vec<usize>)> = None;
            for _ in 0..candidates_per_slot {
                let mut cand = identity.clone();
                cand.shuffle(&mut rng);
                if perms.contains(&cand) {
                    continue;
                }
                let min_dist = perms
                    .iter()
                    .map(|p| hamming(p, &cand))
                    .min()
                    .unwrap_or(cells);
                match &best {
                    Some((d, _)) if *d >= min_dist => {}
                    _ => best = Some((min_dist, cand)),
                }
            }
            match best {
                Some((_, cand)) => perms.push(cand),
                None => {
                    return Err(GatError::InvalidArgument(
                        "could not sample enough distinct permutations".into(),
                    ))
                }
            }
        }
        Ok(PermutationPool { grid, perms })
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }
}

fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Scrambles the image chunks: output chunk `k` is input chunk `perm[k]`;
/// the label is the permutation id.
pub fn apply_jigsaw(
    image: &ImageTensor,
    perm_id: usize,
    pool: &PermutationPool,
) -> Result<(ImageTensor, usize)> {
    if perm_id >= pool.len() {
        return Err(GatError::InvalidArgument(format!(
            "perm_id {perm_id} out of range for pool of {}",
            pool.len()
        )));
    }
    let g = pool.grid;
    if image.height % g != 0 || image.width % g != 0 {
        return Err(GatError::InvalidArgument(format!(
            "image {}x{} not divisible by grid {g}",
            image.height, image.width
        )));
    }
    let (ch_h, ch_w) = (image.height / g, image.width / g);
    let ch = image.channels;
    let perm = &pool.perms[perm_id];
    let mut out = image.clone();
    for k in 0..g * g {
        let src = perm[k];
        let (dr, dc) = (k / g, k % g);
        let (sr, sc) = (src / g, src % g);
        for r in 0..ch_h {
            for c in 0..ch_w {
                for z in 0..ch {
                    let di = ((dr * ch_h + r) * image.width + dc * ch_w + c) * ch + z;
                    let si = ((sr * ch_h + r) * image.width + sc * ch_w + c) * ch + z;
                    out.pixels[di] = image.pixels[si];
                }
            }
        }
    }
    Ok((out, perm_id))
}

/// Fine-to-macro class table. Total on its declared domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMap(pub BTreeMap<u32, u32>);

impl GroupMap {
    pub fn macro_arity(&self) -> usize {
        let mut seen: Vec<u32> = self.0.values().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

pub fn macro_label(fine: u32, map: &GroupMap) -> Result<u32> {
    map.0
        .get(&fine)
        .copied()
        .ok_or_else(|| GatError::InvalidArgument(format!("fine label {fine} not in group map")))
}

/// What a self-supervised preprocessor does to one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Preprocessor {
    Rotation,
    Jigsaw,
}

/// One derived label from a preprocessor draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnLabel {
    pub task_index: usize,
    pub label: usize,
}

/// Applies the self-supervised preprocessors left to right in task order,
/// drawing each task's label per sample from the given rng. Returns the
/// transformed image and the labels in application order.
pub fn compose_preprocessors(
    stages: &[(usize, Preprocessor)],
    pool: &PermutationPool,
    image: &ImageTensor,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, Vec<DrawnLabel>)> {
    let mut img = image.clone();
    let mut labels = Vec::with_capacity(stages.len());
    for &(task_index, pre) in stages {
        match pre {
            Preprocessor::Rotation => {
                let angle = rng.gen_range(0u8..4);
                let (next, label) = apply_rotation(&img, angle)?;
                img = next;
                labels.push(DrawnLabel { task_index, label: label as usize });
            }
            Preprocessor::Jigsaw => {
                let perm_id = rng.gen_range(0..pool.len());
                let (next, label) = apply_jigsaw(&img, perm_id, pool)?;
                img = next;
                labels.push(DrawnLabel { task_index, label });
            }
        }
    }
    Ok((img, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img2x2(vals: [f64; 4]) -> ImageTensor {
        ImageTensor::new(2, 2, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn rotation_identity() {
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        let (out, label) = apply_rotation(&img, 0).unwrap();
        assert_eq!(out, img);
        assert_eq!(label, 0);
    }

    #[test]
    fn rotation_90_ccw_hand_case() {
        // [[a,b],[c,d]] -> [[b,d],[a,c]]
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        let (out, label) = apply_rotation(&img, 1).unwrap();
        assert_eq!(out.pixels, vec![0.2, 0.4, 0.1, 0.3]);
        assert_eq!(label, 1);
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = apply_rotation(&cur, 1).unwrap().0;
        }
        assert_eq!(cur, img);
    }

    #[test]
    fn rotation_rejects_bad_inputs() {
        let img = ImageTensor::new(2, 4, 1, vec![0.0; 8]).unwrap();
        assert!(apply_rotation(&img, 1).is_err());
        assert!(apply_rotation(&img2x2([0.0; 4]), 4).is_err());
    }

    #[test]
    fn rotation_labels_form_cyclic_group() {
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        for a in 0u8..4 {
            for b in 0u8..4 {
                let ab = apply_rotation(&apply_rotation(&img, a).unwrap().0, b).unwrap().0;
                let direct = apply_rotation(&img, (a + b) % 4).unwrap().0;
                assert_eq!(ab, direct, "rotation({a}) then rotation({b})");
            }
        }
    }

    #[test]
    fn pool_entry_zero_is_identity_and_distinct() {
        let pool = PermutationPool::build(2, 8, 42).unwrap();
        assert_eq!(pool.perms[0], vec![0, 1, 2, 3]);
        for i in 0..pool.len() {
            for j in (i + 1)..pool.len() {
                assert_ne!(pool.perms[i], pool.perms[j]);
            }
            let mut sorted = pool.perms[i].clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2, 3], "valid permutation");
        }
    }

    #[test]
    fn pool_build_is_seeded() {
        let a = PermutationPool::build(2, 10, 7).unwrap();
        let b = PermutationPool::build(2, 10, 7).unwrap();
        assert_eq!(a, b);
        let c = PermutationPool::build(2, 10, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jigsaw_identity_permutation() {
        let pool = PermutationPool::build(2, 4, 1).unwrap();
        let img = ImageTensor::new(4, 4, 1, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let (out, label) = apply_jigsaw(&img, 0, &pool).unwrap();
        assert_eq!(out, img);
        assert_eq!(label, 0);
    }

    #[test]
    fn jigsaw_swap_hand_case() {
        // 4x4 image, 2x2 grid, permutation swapping chunks 0 and 1: the
        // top-left and top-right quadrants exchange.
        let pool = PermutationPool {
            grid: 2,
            perms: vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3]],
        };
        let img = ImageTensor::new(4, 4, 1, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let (out, _) = apply_jigsaw(&img, 1, &pool).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(out.pixel(r, c, 0), img.pixel(r, c + 2, 0));
                assert_eq!(out.pixel(r, c + 2, 0), img.pixel(r, c, 0));
                assert_eq!(out.pixel(r + 2, c, 0), img.pixel(r + 2, c, 0));
            }
        }
    }

    #[test]
    fn jigsaw_inverse_restores() {
        let pool = PermutationPool::build(2, 6, 3).unwrap();
        let img = ImageTensor::new(4, 4, 1, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let perm = &pool.perms[3];
        let mut inv = vec![0usize; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let pool2 = PermutationPool { grid: 2, perms: vec![perm.clone(), inv] };
        let (scrambled, _) = apply_jigsaw(&img, 0, &pool2).unwrap();
        let (restored, _) = apply_jigsaw(&scrambled, 1, &pool2).unwrap();
        assert_eq!(restored, img);
    }

    #[test]
    fn jigsaw_rejects_bad_inputs() {
        let pool = PermutationPool::build(2, 2, 1).unwrap();
        let img = ImageTensor::new(3, 3, 1, vec![0.0; 9]).unwrap();
        assert!(apply_jigsaw(&img, 0, &pool).is_err());
        let img = ImageTensor::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert!(apply_jigsaw(&img, 2, &pool).is_err());
    }

    #[test]
    fn macro_label_table() {
        let map = GroupMap([(0, 0), (1, 0), (2, 1), (3, 1)].into_iter().collect());
        assert_eq!(macro_label(3, &map).unwrap(), 1);
        assert_eq!(map.macro_arity(), 2);
        assert!(macro_label(9, &map).is_err());
        for fine in 0..4 {
            macro_label(fine, &map).unwrap();
        }
    }

    #[test]
    fn compose_empty_is_identity() {
        let pool = PermutationPool::build(2, 2, 1).unwrap();
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, labels) = compose_preprocessors(&[], &pool, &img, &mut rng).unwrap();
        assert_eq!(out, img);
        assert!(labels.is_empty());
    }

    #[test]
    fn compose_single_rotation_reproducible() {
        let pool = PermutationPool::build(2, 2, 1).unwrap();
        let img = img2x2([0.1, 0.2, 0.3, 0.4]);
        let stages = [(1usize, Preprocessor::Rotation)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out1, l1) = compose_preprocessors(&stages, &pool, &img, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out2, l2) = compose_preprocessors(&stages, &pool, &img, &mut rng).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(l1, l2);
        let direct = apply_rotation(&img, l1[0].label as u8).unwrap().0;
        assert_eq!(out1, direct);
    }

    #[test]
    fn compose_order_rotation_then_jigsaw() {
        let pool = PermutationPool::build(2, 4, 9).unwrap();
        let img = ImageTensor::new(4, 4, 1, (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let stages = [(1usize, Preprocessor::Rotation), (2usize, Preprocessor::Jigsaw)];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (out, labels) = compose_preprocessors(&stages, &pool, &img, &mut rng).unwrap();
        let rotated = apply_rotation(&img, labels[0].label as u8).unwrap().0;
        let expected = apply_jigsaw(&rotated, labels[1].label, &pool).unwrap().0;
        assert_eq!(out, expected);
    }

    proptest! {
        #[test]
        fn jigsaw_is_measure_preserving(seed in 0u64..500) {
            let pool = PermutationPool::build(2, 4, 17).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
            let img = ImageTensor::new(4, 4, 1, pixels).unwrap();
            let pid = rand::Rng::gen_range(&mut rng, 0..pool.len());
            let (out, _) = apply_jigsaw(&img, pid, &pool).unwrap();
            let mut a = img.pixels.clone();
            let mut b = out.pixels.clone();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn preprocessors_preserve_pixel_range(seed in 0u64..500) {
            let pool = PermutationPool::build(2, 4, 17).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
            let img = ImageTensor::new(4, 4, 1, pixels).unwrap();
            let stages = [(1usize, Preprocessor::Rotation), (2usize, Preprocessor::Jigsaw)];
            let (out, _) = compose_preprocessors(&stages, &pool, &img, &mut rng).unwrap();
            prop_assert!(out.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

//! Inference-time keypoints from a dense pyramid: thresholding,
//! non-maximal suppression, sub-cell refinement and bilinear descriptor
//! sampling.
//!
//! Cell `(r, c)` of a level with stride `s` covers pixels
//! `[c*s, (c+1)*s) x [r*s, (r+1)*s)`; its center is `((c+0.5)s, (r+0.5)s)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{DensePyramid, DescriptorMode, FeatureGrid, ScoreMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub level: u8,
    /// Sub-pixel image position `(x, y)`.
    pub pixel: [f64; 2],
    pub score: f64,
    /// Unit-norm descriptor of the level's (possibly shortened) dimension.
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Levels to extract (1-based); empty means all.
    pub levels: Vec<u8>,
    pub tau: f64,
    /// Suppression radius in cells of each level.
    pub nms_radius: usize,
    pub max_per_level: usize,
    pub interpolate: bool,
    pub mode: DescriptorMode,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { levels: Vec::new(), tau: 0.5, nms_radius: 1, max_per_level: 2048, interpolate: true, mode: DescriptorMode::Full }
    }
}

/// Orders cells by descending score, then ascending `(row, col)`.
#[inline]
fn outranks(scores: &ScoreMap, a: (usize, usize), b: (usize, usize)) -> bool {
    let (sa, sb) = (scores.get(a.0, a.1), scores.get(b.0, b.1));
    sa > sb || (sa == sb && a < b)
}

/// Cells with score `>= tau` that outrank every other cell within
/// Chebyshev distance `radius`. Returned in row-major order.
pub fn nms(scores: &ScoreMap, radius: usize, tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..scores.rows {
        for c in 0..scores.cols {
            if scores.get(r, c) < tau {
                continue;
            }
            let r0 = r.saturating_sub(radius);
            let r1 = (r + radius).min(scores.rows - 1);
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(scores.cols - 1);
            let is_max = (r0..=r1).all(|rr| (c0..=c1).all(|cc| (rr, cc) == (r, c) || outranks(scores, (r, c), (rr, cc))));
            if is_max {
                out.push((r, c));
            }
        }
    }
    out
}

const MAX_OFFSET: f64 = 0.5 - 1e-9;

/// Sub-cell peak offset `(dx, dy)` from a quadratic fit to the 3x3
/// neighbourhood. Border cells and non-peaked neighbourhoods give zero.
pub fn refine_subpixel(scores: &ScoreMap, cell: (usize, usize)) -> [f64; 2] {
    let (r, c) = cell;
    if r == 0 || c == 0 || r + 1 >= scores.rows || c + 1 >= scores.cols {
        return [0.0, 0.0];
    }
    let s = |dr: isize, dc: isize| scores.get((r as isize + dr) as usize, (c as isize + dc) as usize);
    let gx = (s(0, 1) - s(0, -1)) / 2.0;
    let gy = (s(1, 0) - s(-1, 0)) / 2.0;
    let hxx = s(0, 1) - 2.0 * s(0, 0) + s(0, -1);
    let hyy = s(1, 0) - 2.0 * s(0, 0) + s(-1, 0);
    let hxy = (s(1, 1) - s(1, -1) - s(-1, 1) + s(-1, -1)) / 4.0;
    let det = hxx * hyy - hxy * hxy;
    let scale = hxx.abs().max(hyy.abs()).max(hxy.abs());
    if !(scale > 0.0) || det <= 1e-12 * scale * scale || hxx >= 0.0 {
        return [0.0, 0.0];
    }
    let dx = -(hyy * gx - hxy * gy) / det;
    let dy = -(hxx * gy - hxy * gx) / det;
    if !dx.is_finite() || !dy.is_finite() {
        return [0.0, 0.0];
    }
    [dx.clamp(-MAX_OFFSET, MAX_OFFSET), dy.clamp(-MAX_OFFSET, MAX_OFFSET)]
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Bilinearly blended, unnormalized descriptor at an image point. Points
/// between the outermost cell centers and the image border take the edge
/// cell values.
pub fn bilinear_descriptor(grid: &FeatureGrid, pixel: [f64; 2]) -> Result<Vec<f64>> {
    let s = grid.spec.stride as f64;
    let (width, height) = (grid.cols as f64 * s, grid.rows as f64 * s);
    let [x, y] = pixel;
    if !(x >= 0.0 && y >= 0.0 && x <= width && y <= height) {
        return Err(Error::InvalidInput(format!(
            "point ({x}, {y}) outside level {} extent {width}x{height}",
            grid.spec.index
        )));
    }
    let u = (x / s - 0.5).clamp(0.0, (grid.cols - 1) as f64);
    let v = (y / s - 0.5).clamp(0.0, (grid.rows - 1) as f64);
    let c0 = (u.floor() as usize).min(grid.cols.saturating_sub(2));
    let r0 = (v.floor() as usize).min(grid.rows.saturating_sub(2));
    let c1 = (c0 + 1).min(grid.cols - 1);
    let r1 = (r0 + 1).min(grid.rows - 1);
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let corners = [
        (r0, c0, (1.0 - fu) * (1.0 - fv)),
        (r0, c1, fu * (1.0 - fv)),
        (r1, c0, (1.0 - fu) * fv),
        (r1, c1, fu * fv),
    ];
    let mut out = vec![0.0; grid.spec.dim];
    for (r, c, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        for (o, d) in out.iter_mut().zip(grid.descriptor(r, c)) {
            *o += wgt * d;
        }
    }
    Ok(out)
}

/// Bilinear descriptor at an image point, L2-normalized.
pub fn interpolate_descriptor(grid: &FeatureGrid, pixel: [f64; 2]) -> Result<Vec<f64>> {
    let mut d = bilinear_descriptor(grid, pixel)?;
    normalize(&mut d);
    Ok(d)
}

/// First half of a descriptor, renormalized.
pub fn shorten(descriptor: &[f32]) -> Vec<f32> {
    let mut v: Vec<f64> = descriptor[..descriptor.len() / 2].iter().map(|&x| x as f64).collect();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

pub(crate) fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let mut v = v.to_vec();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

/// Keypoints of every selected level, one list per level in the order
/// requested.
pub fn extract(pyramid: &DensePyramid, config: &ExtractConfig) -> Result<Vec<Vec<Keypoint>>> {
    if !(0.0..=1.0).contains(&config.tau) {
        return Err(Error::InvalidInput(format!("threshold {} outside [0, 1]", config.tau)));
    }
    let levels: Vec<u8> = if config.levels.is_empty() {
        pyramid.levels.iter().map(|g| g.spec.index).collect()
    } else {
        config.levels.clone()
    };
    levels
        .iter()
        .map(|&index| {
            let grid = pyramid
                .level(index)
                .ok_or_else(|| Error::InvalidInput(format!("pyramid has no level {index}")))?;
            extract_level(grid, config)
        })
        .collect()
}

fn extract_level(grid: &FeatureGrid, config: &ExtractConfig) -> Result<Vec<Keypoint>> {
    let mut cells = nms(&grid.scores, config.nms_radius, config.tau);
    cells.sort_by(|a, b| {
        grid.scores.get(b.0, b.1).total_cmp(&grid.scores.get(a.0, a.1)).then(a.cmp(b))
    });
    cells.truncate(config.max_per_level);
    let s = grid.spec.stride as f64;
    cells
        .into_iter()
        .map(|(r, c)| {
            let [ox, oy] = if config.interpolate { refine_subpixel(&grid.scores, (r, c)) } else { [0.0, 0.0] };
            let pixel = [(c as f64 + 0.5 + ox) * s, (r as f64 + 0.5 + oy) * s];
            let raw = if config.interpolate { bilinear_descriptor(grid, pixel)? } else { grid.descriptor(r, c).to_vec() };
            let mut descriptor = to_unit_f32(&raw);
            if config.mode == DescriptorMode::Short {
                descriptor = shorten(&descriptor);
            }
            Ok(Keypoint { level: grid.spec.index, pixel, score: grid.scores.get(r, c), descriptor })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::LevelSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(stride: usize, dim: usize) -> LevelSpec {
        LevelSpec { index: 1, stride, dim }
    }

    fn random_scores(rows: usize, cols: usize, seed: u64) -> ScoreMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScoreMap::new(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn single_peak() {
        let mut s = ScoreMap::filled(7, 7, 0.1);
        s.values[3 * 7 + 4] = 0.9;
        assert_eq!(nms(&s, 2, 0.5), vec![(3, 4)]);
    }

    #[test]
    fn equal_peaks_keep_lexicographic_first() {
        let mut s = ScoreMap::filled(6, 6, 0.0);
        s.values[2 * 6 + 2] = 0.8;
        s.values[2 * 6 + 3] = 0.8;
        assert_eq!(nms(&s, 2, 0.5), vec![(2, 2)]);
    }

    #[test]
    fn radius_zero_keeps_everything_above_tau() {
        let s = random_scores(5, 5, 3);
        assert_eq!(nms(&s, 0, 0.5).len(), s.values.iter().filter(|&&p| p >= 0.5).count());
    }

    #[test]
    fn symmetric_peak_has_zero_offset() {
        let s = ScoreMap::new(3, 3, vec![0.1, 0.4, 0.1, 0.4, 0.9, 0.4, 0.1, 0.4, 0.1]).unwrap();
        assert_eq!(refine_subpixel(&s, (1, 1)), [0.0, 0.0]);
    }

    #[test]
    fn quadratic_peak_is_recovered() {
        let (px, py) = (0.3, -0.2);
        let q = |x: f64, y: f64| 1.0 - 0.3 * (x - px).powi(2) - 0.2 * (y - py).powi(2) - 0.05 * (x - px) * (y - py);
        let mut vals = vec![];
        for r in 0..5 {
            for c in 0..5 {
                vals.push(q(c as f64 - 2.0, r as f64 - 2.0));
            }
        }
        let s = ScoreMap::new(5, 5, vals).unwrap();
        let [dx, dy] = refine_subpixel(&s, (2, 2));
        assert!((dx - px).abs() < 1e-6 && (dy - py).abs() < 1e-6, "{dx} {dy}");
    }

    #[test]
    fn border_and_flat_cells_have_zero_offset() {
        let s = random_scores(5, 5, 1);
        assert_eq!(refine_subpixel(&s, (0, 2)), [0.0, 0.0]);
        assert_eq!(refine_subpixel(&s, (2, 4)), [0.0, 0.0]);
        assert_eq!(refine_subpixel(&ScoreMap::filled(3, 3, 0.5), (1, 1)), [0.0, 0.0]);
    }

    fn grid_with(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..rows * cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::with_omega(spec(4, dim), rows, cols, values, &vec![0.5; dim]).unwrap()
    }

    #[test]
    fn interpolation_at_center_and_midpoint() {
        let g = grid_with(4, 5, 6, 2);
        let at_center = interpolate_descriptor(&g, [(2.0 + 0.5) * 4.0, (1.0 + 0.5) * 4.0]).unwrap();
        let mut expect = g.descriptor(1, 2).to_vec();
        normalize(&mut expect);
        for (a, b) in at_center.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mid = interpolate_descriptor(&g, [3.0 * 4.0, 1.5 * 4.0]).unwrap();
        let mut expect: Vec<f64> = g.descriptor(1, 2).iter().zip(g.descriptor(1, 3)).map(|(u, v)| (u + v) / 2.0).collect();
        normalize(&mut expect);
        for (a, b) in mid.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_rejects_outside_points() {
        let g = grid_with(4, 5, 6, 2);
        assert!(interpolate_descriptor(&g, [-0.1, 3.0]).is_err());
        assert!(interpolate_descriptor(&g, [3.0, 16.5]).is_err());
    }

    fn pyramid_from_scores(scores: ScoreMap, stride_dims: &[(usize, usize)]) -> DensePyramid {
        let rows = scores.rows * stride_dims[0].0;
        let cols = scores.cols * stride_dims[0].0;
        let mut levels = Vec::new();
        for (i, &(stride, dim)) in stride_dims.iter().enumerate() {
            let spec = LevelSpec { index: i as u8 + 1, stride, dim };
            let (r, c) = spec.grid_shape(rows, cols);
            let values = (0..r * c * dim).map(|k| ((k * 37) % 11) as f64 + 1.0).collect();
            let s = if i == 0 { scores.clone() } else { ScoreMap::filled(r, c, 0.0) };
            levels.push(FeatureGrid::new(spec, r, c, values, s).unwrap());
        }
        DensePyramid::new(rows, cols, levels).unwrap()
    }

    #[test]
    fn nothing_passes_high_threshold() {
        let pyr = pyramid_from_scores(random_scores(8, 8, 0), &[(2, 4), (4, 8)]);
        let cfg = ExtractConfig { tau: 1.0, ..Default::default() };
        assert!(extract(&pyr, &cfg).unwrap().iter().all(|l| l.is_empty()));
    }

    #[test]
    fn one_certain_cell_gives_one_keypoint_at_its_center() {
        let mut s = ScoreMap::filled(8, 8, 0.0);
        s.values[3 * 8 + 5] = 1.0;
        let pyr = pyramid_from_scores(s, &[(2, 4), (4, 8)]);
        let kps = extract(&pyr, &ExtractConfig { tau: 0.5, ..Default::default() }).unwrap();
        assert_eq!(kps[0].len(), 1);
        assert_eq!(kps[0][0].pixel, [11.0, 7.0]);
        assert!(kps[1].is_empty());
        let n: f64 = kps[0][0].descriptor.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn short_mode_halves_descriptors() {
        let mut s = ScoreMap::filled(8, 8, 0.0);
        s.values[10] = 1.0;
        let pyr = pyramid_from_scores(s, &[(2, 4), (4, 8)]);
        let kps = extract(&pyr, &ExtractConfig { mode: DescriptorMode::Short, levels: vec![1], ..Default::default() }).unwrap();
        assert_eq!(kps[0][0].descriptor.len(), 2);
    }

    proptest! {
        #[test]
        fn nms_is_scale_invariant(seed in any::<u64>(), k in 0.01f64..1.0) {
            let s = random_scores(10, 10, seed);
            let scaled = ScoreMap::new(10, 10, s.values.iter().map(|v| v * k).collect()).unwrap();
            prop_assert_eq!(nms(&s, 2, 0.0), nms(&scaled, 2, 0.0));
        }

        #[test]
        fn nms_output_is_separated(seed in any::<u64>(), radius in 0usize..4) {
            let s = random_scores(12, 12, seed);
            let kept = nms(&s, radius, 0.3);
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(s.get(a.0, a.1) >= 0.3);
                for b in &kept[i + 1..] {
                    let d = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1));
                    prop_assert!(d > radius);
                }
            }
        }
    }
}

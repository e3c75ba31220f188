//! Detection plumbing: mask components, mask statistics, proposal selection
//! and square crops.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, RgbImage};

pub const DEFAULT_MIN_AREA: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub area: f64,
    pub bbox_center: [f64; 2],
    pub bbox_square_scale: f64,
}

/// Square detection box in full-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub center: [f64; 2],
    pub scale: f64,
}

impl DetectionBox {
    pub fn new(center: [f64; 2], scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("detection box needs a finite center and positive scale"));
        }
        Ok(Self { center, scale })
    }

    pub fn center_vec(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }

    /// Square around the tight box of `mask`.
    pub fn from_mask(mask: &BinaryMask) -> Result<Self> {
        let s = mask_stats(mask)?;
        Self::new(s.bbox_center, s.bbox_square_scale)
    }
}

/// 8-connected components with at least `min_area` pixels, largest first;
/// equal areas keep scanline order of their first pixel.
pub fn connected_components(mask: &BinaryMask, min_area: usize) -> Vec<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![u32::MAX; w * h];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != u32::MAX {
            continue;
        }
        let id = comps.len() as u32;
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] && label[q] == u32::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push(pixels);
    }
    // components were discovered in scanline order, so a stable sort keeps it
    let mut kept: Vec<Vec<usize>> = comps.into_iter().filter(|c| c.len() >= min_area).collect();
    kept.sort_by(|a, b| b.len().cmp(&a.len()));
    kept.into_iter()
        .map(|pixels| {
            let mut m = BinaryMask::new(w, h);
            for p in pixels {
                m.data[p] = true;
            }
            m
        })
        .collect()
}

pub fn mask_stats(mask: &BinaryMask) -> Result<MaskStats> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut area = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                area += 1;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(MaskStats {
        area: area as f64,
        bbox_center: [(x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0],
        bbox_square_scale: ((x1 - x0 + 1).max(y1 - y0 + 1)) as f64,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::EmbeddingShape(format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::invalid("zero embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index of the proposal most cosine-similar to the object; ties go to the
/// lowest index.
pub fn select_proposal(proposals: &[Vec<f64>], object_embedding: &[f64]) -> Result<usize> {
    if proposals.is_empty() {
        return Err(Error::NoProposals);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in proposals.iter().enumerate() {
        let s = cosine(p, object_embedding)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Source pixel coordinate sampled by crop pixel `i`; the inverse of the
/// affine map used by `crop_intrinsics`.
#[inline]
fn source_coord(i: usize, center: f64, scale: f64, out: usize) -> f64 {
    i as f64 * scale / out as f64 + center - 0.5 * scale
}

/// Bilinear taps `(index, weight)` along one axis; taps outside `0..len`
/// are dropped, which reads them as black.
#[inline]
fn taps(u: f64, len: usize) -> [(Option<usize>, f64); 2] {
    let f = u.floor();
    let frac = u - f;
    let at = |v: f64| (v >= 0.0 && v < len as f64).then_some(v as usize);
    [(at(f), 1.0 - frac), (at(f + 1.0), frac)]
}

fn resample<const C: usize>(
    width: usize,
    height: usize,
    sample: impl Fn(usize, usize, usize) -> f64,
    bx: &DetectionBox,
    out: usize,
) -> Vec<f64> {
    let mut dst = vec![0.0; out * out * C];
    for j in 0..out {
        let ty = taps(source_coord(j, bx.center[1], bx.scale, out), height);
        for i in 0..out {
            let tx = taps(source_coord(i, bx.center[0], bx.scale, out), width);
            for &(yy, wy) in &ty {
                let Some(yy) = yy else { continue };
                for &(xx, wx) in &tx {
                    let Some(xx) = xx else { continue };
                    let w = wx * wy;
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..C {
                        dst[(j * out + i) * C + c] += w * sample(xx, yy, c);
                    }
                }
            }
        }
    }
    dst
}

/// Bilinear crop of the square `bx` to `out x out`; with a mask, background
/// pixels are zeroed before resampling.
pub fn crop_image(image: &RgbImage, bx: &DetectionBox, out: usize, mask: Option<&BinaryMask>) -> Result<RgbImage> {
    if out == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let src = match mask {
        Some(m) => image.masked(m)?,
        None => image.clone(),
    };
    let data = resample::<3>(src.width, src.height, |x, y, c| src.get(x, y, c), bx, out);
    RgbImage::from_vec(out, out, data)
}

/// Crops a mask the same way, thresholding the bilinear coverage at 0.5.
pub fn crop_mask(mask: &BinaryMask, bx: &DetectionBox, out: usize) -> Result<BinaryMask> {
    if out == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let cover = resample::<1>(
        mask.width,
        mask.height,
        |x, y, _| if mask.get(x, y) { 1.0 } else { 0.0 },
        bx,
        out,
    );
    Ok(BinaryMask {
        width: out,
        height: out,
        data: cover.into_iter().map(|v| v >= 0.5).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let w = rows[0].len();
        BinaryMask::from_fn(w, rows.len(), |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn components_examples() {
        let two = mask_from(&["##...", "##...", ".....", "...##", "...#."]);
        let comps = connected_components(&two, 1);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].area(), 4);
        assert_eq!(comps[1].area(), 3);

        let diag = mask_from(&["#..", ".#.", "..."]);
        assert_eq!(connected_components(&diag, 1).len(), 1);

        assert!(connected_components(&BinaryMask::new(8, 8), 1).is_empty());
    }

    #[test]
    fn components_order_and_min_area() {
        // equal areas keep scanline order; the single pixel is filtered out
        let m = mask_from(&["#....##", "#......", "...#...", "......."]);
        let comps = connected_components(&m, 2);
        assert_eq!(comps.len(), 2);
        assert!(comps[0].get(0, 0));
        assert!(comps[1].get(5, 0));
    }

    #[test]
    fn stats_examples() {
        let s = 16;
        let full = BinaryMask::from_fn(s, s, |_, _| true);
        let st = mask_stats(&full).unwrap();
        assert_eq!(st.area, (s * s) as f64);
        assert_eq!(st.bbox_center, [7.5, 7.5]);

        let mut one = BinaryMask::new(10, 10);
        one.set(3, 7, true);
        let st = mask_stats(&one).unwrap();
        assert_eq!((st.area, st.bbox_center, st.bbox_square_scale), (1.0, [3.0, 7.0], 1.0));

        let rect = BinaryMask::from_fn(40, 40, |x, y| (5..15).contains(&x) && (2..22).contains(&y));
        let st = mask_stats(&rect).unwrap();
        assert_eq!((st.area, st.bbox_square_scale), (200.0, 20.0));

        assert!(matches!(mask_stats(&BinaryMask::new(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn proposal_examples() {
        let obj = vec![1.0, 0.0, 0.0];
        assert_eq!(select_proposal(&[vec![0.3, 0.2, 0.1]], &obj).unwrap(), 0);
        let props = vec![vec![0.1, 0.995, 0.0], vec![0.9, 0.436, 0.0], vec![2.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(select_proposal(&props, &obj).unwrap(), 2);
        assert_eq!(select_proposal(&props[..2], &obj).unwrap(), 1);
        assert!(matches!(select_proposal(&[], &obj), Err(Error::NoProposals)));
    }

    fn checker(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = ((x / 3 + y / 3) % 2) as f64;
                img.set(x, y, 0, v);
                img.set(x, y, 1, 1.0 - v);
                img.set(x, y, 2, 0.25 * v + (x as f64) / w as f64);
            }
        }
        img
    }

    #[test]
    fn identity_crop_is_exact() {
        let img = checker(32, 32);
        let bx = DetectionBox::new([16.0, 16.0], 32.0).unwrap();
        assert_eq!(crop_image(&img, &bx, 32, None).unwrap(), img);
    }

    #[test]
    fn crop_outside_frame_is_black() {
        let img = checker(32, 32);
        let bx = DetectionBox::new([500.0, -300.0], 20.0).unwrap();
        assert!(crop_image(&img, &bx, 16, None).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downscale_matches_bilinear_oracle() {
        let img = checker(40, 40);
        let bx = DetectionBox::new([20.3, 19.1], 40.0).unwrap();
        let out = crop_image(&img, &bx, 20, None).unwrap();
        let fetch = |x: i64, y: i64, c: usize| {
            if x < 0 || y < 0 || x >= 40 || y >= 40 {
                0.0
            } else {
                img.get(x as usize, y as usize, c)
            }
        };
        for j in 0..20 {
            for i in 0..20 {
                let u = 2.0 * i as f64 + 0.3;
                let v = 2.0 * j as f64 - 0.9;
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                for c in 0..3 {
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let want = (1.0 - fx) * (1.0 - fy) * fetch(x0, y0, c)
                        + fx * (1.0 - fy) * fetch(x0 + 1, y0, c)
                        + (1.0 - fx) * fy * fetch(x0, y0 + 1, c)
                        + fx * fy * fetch(x0 + 1, y0 + 1, c);
                    assert!((out.get(i, j, c) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mask_zeroes_background_before_resampling() {
        let img = RgbImage::from_vec(4, 4, vec![1.0; 48]).unwrap();
        let mask = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let bx = DetectionBox::new([2.0, 2.0], 4.0).unwrap();
        let out = crop_image(&img, &bx, 4, Some(&mask)).unwrap();
        assert_eq!(out.get(1, 0, 0), 1.0);
        assert_eq!(out.get(2, 0, 0), 0.0);
        let cm = crop_mask(&mask, &bx, 4).unwrap();
        assert_eq!(cm, mask);
    }

    #[test]
    fn box_from_mask_squares_the_tight_box() {
        let rect = BinaryMask::from_fn(40, 40, |x, y| (5..15).contains(&x) && (2..22).contains(&y));
        let bx = DetectionBox::from_mask(&rect).unwrap();
        assert_eq!(bx.center, [9.5, 11.5]);
        assert_eq!(bx.scale, 20.0);
    }
}

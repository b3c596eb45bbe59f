//! Box prompts: derivation from ground-truth masks and the box file format.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{MaskKind, ShadowMask};
use crate::error::{Error, Result};

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoxPrompt {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::Contract(format!(
                "inverted box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn whole_image(height: usize, width: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width - 1,
            y_max: height - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..=self.y_max).contains(&y) && (self.x_min..=self.x_max).contains(&x)
    }

    pub fn is_valid_for(&self, height: usize, width: usize) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < width && self.y_max < height
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !self.is_valid_for(height, width) {
            return Err(Error::Contract(format!(
                "box {self} invalid for {height}x{width} image"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl fmt::Display for BoxPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// A maximal 8-connected set of foreground pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// `(y, x)` pairs in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoxPrompt,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        parent[i as usize] = parent[parent[i as usize] as usize];
        i = parent[i as usize];
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // smaller label becomes the root so roots follow scan order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass 8-connected labelling.
///
/// Regions are ordered by their first pixel in row-major scan order.
pub fn connected_components(mask: &ShadowMask) -> Result<Vec<Region>> {
    if mask.kind() != MaskKind::Binary {
        return Err(Error::Contract(
            "connected components need a binary mask".into(),
        ));
    }
    let (h, w) = mask.shape();
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; h * w];
    let mut parent: Vec<u32> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            if !mask.is_set(y, x) {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neighbours = [NONE; 4];
            if x > 0 {
                neighbours[0] = labels[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbours[1] = labels[up + x - 1];
                }
                neighbours[2] = labels[up + x];
                if x + 1 < w {
                    neighbours[3] = labels[up + x + 1];
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                if label == NONE {
                    label = n;
                } else {
                    union(&mut parent, label, n);
                }
            }
            if label == NONE {
                label = parent.len() as u32;
                parent.push(label);
            }
            labels[y * w + x] = label;
        }
    }

    let mut root_to_region: Vec<Option<usize>> = vec![None; parent.len()];
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == NONE {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            let idx = *root_to_region[root].get_or_insert_with(|| {
                regions.push(Vec::new());
                regions.len() - 1
            });
            regions[idx].push((y, x));
        }
    }

    Ok(regions
        .into_iter()
        .map(|pixels| {
            let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
            for &(y, x) in &pixels {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
            Region {
                pixels,
                bbox: BoxPrompt {
                    x_min: x0,
                    y_min: y0,
                    x_max: x1,
                    y_max: y1,
                },
            }
        })
        .collect())
}

/// Minimal boxes of regions with at least `min_area` pixels.
///
/// When more than `max_boxes` regions qualify, a single whole-image box is
/// returned instead.
pub fn extract_boxes(
    mask: &ShadowMask,
    min_area: usize,
    max_boxes: usize,
) -> Result<Vec<BoxPrompt>> {
    let boxes: Vec<BoxPrompt> = connected_components(mask)?
        .into_iter()
        .filter(|r| r.area() >= min_area)
        .map(|r| r.bbox)
        .collect();
    if boxes.len() > max_boxes {
        let (h, w) = mask.shape();
        return Ok(vec![BoxPrompt::whole_image(h, w)]);
    }
    Ok(boxes)
}

fn shift(value: usize, offset: i64, limit: usize) -> usize {
    (value as i64 + offset).clamp(0, limit as i64 - 1) as usize
}

/// Jitters each boundary by an independent offset uniform in
/// `[-max_shift, max_shift]`, clamped to the image.
///
/// If a pair of boundaries crosses, that pair keeps its original values.
pub fn perturb_boxes<R: Rng + ?Sized>(
    boxes: &[BoxPrompt],
    image_size: (usize, usize),
    max_shift: usize,
    rng: &mut R,
) -> Vec<BoxPrompt> {
    let (h, w) = image_size;
    let s = max_shift as i64;
    boxes
        .iter()
        .map(|b| {
            let mut off = [0i64; 4];
            for o in off.iter_mut() {
                *o = rng.random_range(-s..=s);
            }
            let mut out = BoxPrompt {
                x_min: shift(b.x_min, off[0], w),
                y_min: shift(b.y_min, off[1], h),
                x_max: shift(b.x_max, off[2], w),
                y_max: shift(b.y_max, off[3], h),
            };
            if out.x_min > out.x_max {
                out.x_min = b.x_min;
                out.x_max = b.x_max;
            }
            if out.y_min > out.y_max {
                out.y_min = b.y_min;
                out.y_max = b.y_max;
            }
            out
        })
        .collect()
}

/// Parses the box file format: one `x_min y_min x_max y_max` per line.
pub fn parse_boxes(text: &str) -> Result<Vec<BoxPrompt>> {
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("box line {}: {e}", lineno + 1)))?;
        let [x0, y0, x1, y1] = nums[..] else {
            return Err(Error::Format(format!(
                "box line {}: expected 4 integers, got {}",
                lineno + 1,
                nums.len()
            )));
        };
        boxes.push(
            BoxPrompt::new(x0, y0, x1, y1)
                .map_err(|e| Error::Format(format!("box line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(boxes)
}

pub fn format_boxes(boxes: &[BoxPrompt]) -> String {
    boxes.iter().map(|b| format!("{b}\n")).collect()
}

pub fn load_boxes(path: &Path) -> Result<Vec<BoxPrompt>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    parse_boxes(&text)
}

pub fn save_boxes(boxes: &[BoxPrompt], path: &Path) -> Result<()> {
    std::fs::write(path, format_boxes(boxes)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(h: usize, w: usize, squares: &[(usize, usize, usize)]) -> ShadowMask {
        ShadowMask::binary_from_fn(h, w, |y, x| {
            squares
                .iter()
                .any(|&(y0, x0, s)| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x))
        })
    }

    #[test]
    fn empty_mask_has_no_regions() {
        let m = ShadowMask::zeros(5, 5, MaskKind::Binary);
        assert!(connected_components(&m).unwrap().is_empty());
        assert!(extract_boxes(&m, 50, 8).unwrap().is_empty());
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let m = ShadowMask::binary_from_fn(3, 3, |y, x| (y, x) == (0, 0) || (y, x) == (1, 1));
        let r = connected_components(&m).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].area(), 2);
        assert_eq!(r[0].bbox, BoxPrompt::new(0, 0, 1, 1).unwrap());
    }

    #[test]
    fn u_shape_merges_labels() {
        // the two arms get separate provisional labels and join on the last row
        let m = ShadowMask::binary_from_fn(3, 3, |y, x| x != 1 || y == 2);
        let r = connected_components(&m).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].area(), 7);
    }

    #[test]
    fn probability_mask_rejected() {
        let m = ShadowMask::probability(1, 1, vec![1.0]).unwrap();
        assert!(matches!(connected_components(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn small_blob_discarded() {
        let m = square(20, 20, &[(2, 2, 3)]);
        assert!(extract_boxes(&m, 50, 8).unwrap().is_empty());
    }

    #[test]
    fn area_threshold_is_inclusive() {
        // 5x10 = 50 pixels is kept, 7x7 = 49 is not
        let kept = ShadowMask::binary_from_fn(20, 20, |y, x| y < 5 && x < 10);
        assert_eq!(extract_boxes(&kept, 50, 8).unwrap().len(), 1);
        let dropped = square(20, 20, &[(0, 0, 7)]);
        assert!(extract_boxes(&dropped, 50, 8).unwrap().is_empty());
    }

    #[test]
    fn ten_by_ten_blob_box() {
        let m = square(32, 32, &[(5, 5, 10)]);
        assert_eq!(
            extract_boxes(&m, 50, 8).unwrap(),
            vec![BoxPrompt::new(5, 5, 14, 14).unwrap()]
        );
    }

    #[test]
    fn nine_blobs_fall_back_to_whole_image() {
        let blobs: Vec<_> = (0..9).map(|i| (10 + (i / 3) * 30, 10 + (i % 3) * 30, 8)).collect();
        let m = square(128, 128, &blobs);
        assert_eq!(connected_components(&m).unwrap().len(), 9);
        assert_eq!(
            extract_boxes(&m, 50, 8).unwrap(),
            vec![BoxPrompt::new(0, 0, 127, 127).unwrap()]
        );
        // eight blobs stay separate
        let m8 = square(128, 128, &blobs[..8]);
        assert_eq!(extract_boxes(&m8, 50, 8).unwrap().len(), 8);
    }

    #[test]
    fn zero_shift_is_identity() {
        let boxes = vec![BoxPrompt::new(1, 2, 10, 12).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(perturb_boxes(&boxes, (32, 32), 0, &mut rng), boxes);
    }

    #[test]
    fn perturbed_boxes_stay_valid() {
        let boxes = vec![BoxPrompt::new(0, 0, 10, 10).unwrap()];
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = perturb_boxes(&boxes, (32, 32), 20, &mut rng);
            assert_eq!(out.len(), 1);
            assert!(out[0].is_valid_for(32, 32), "{:?}", out[0]);
        }
    }

    #[test]
    fn offset_distribution() {
        let b = BoxPrompt::new(100, 100, 200, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0i64;
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..10_000 {
            let out = perturb_boxes(&[b], (400, 400), 20, &mut rng)[0];
            let d = out.x_min as i64 - 100;
            assert!((-20..=20).contains(&d));
            seen.insert(d);
            sum += d;
        }
        let mean = sum as f64 / 10_000.0;
        assert!(mean.abs() <= 1.0, "mean {mean}");
        assert_eq!(seen.len(), 41);
    }

    #[test]
    fn box_file_round_trip() {
        let boxes = vec![
            BoxPrompt::new(0, 1, 2, 3).unwrap(),
            BoxPrompt::new(10, 10, 10, 10).unwrap(),
        ];
        let text = format_boxes(&boxes);
        assert_eq!(text, "0 1 2 3\n10 10 10 10\n");
        assert_eq!(parse_boxes(&format!("# prompts\n{text}\n")).unwrap(), boxes);
        assert!(parse_boxes("1 2 3").is_err());
        assert!(parse_boxes("5 0 1 3").is_err());
        assert!(parse_boxes("a b c d").is_err());
    }
}

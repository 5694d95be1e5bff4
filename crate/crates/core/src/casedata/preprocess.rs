use std::collections::VecDeque;

use super::{CaseDataError, Grid, ImageRecord, Rect, RoiBox, Side};

/// Foreground threshold as a fraction of the image maximum.
pub const FOREGROUND_FLOOR: f64 = 0.05;

/// A preprocessed image and the geometry needed to map raw coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub pixels: Grid,
    /// Breast bounding box in raw coordinates.
    pub crop: Rect,
    pub flipped: bool,
    /// Extents after aspect padding, before resizing.
    pub padded: (usize, usize),
}

impl Preprocessed {
    /// Maps a raw-space rectangle into output space; `None` if it falls
    /// entirely outside the crop.
    pub fn map_rect(&self, r: &Rect) -> Option<Rect> {
        let c = &self.crop;
        let (x0, x1) = (r.x0.max(c.x0), r.x1.min(c.x1));
        let (y0, y1) = (r.y0.max(c.y0), r.y1.min(c.y1));
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        let (mut x0, mut x1, y0, y1) = (x0 - c.x0, x1 - c.x0, y0 - c.y0, y1 - c.y0);
        if self.flipped {
            let w = c.x1 - c.x0;
            (x0, x1) = (w - x1, w - x0);
        }
        let (ph, pw) = self.padded;
        let (th, tw) = (self.pixels.height(), self.pixels.width());
        let scale = |v: usize, to: usize, from: usize, up: bool| {
            let s = v as f64 * to as f64 / from as f64;
            let s = if up { s.ceil() } else { s.floor() };
            (s as usize).min(to)
        };
        let (mut nx0, mut nx1) = (scale(x0, tw, pw, false), scale(x1, tw, pw, true));
        let (mut ny0, mut ny1) = (scale(y0, th, ph, false), scale(y1, th, ph, true));
        if nx1 <= nx0 {
            nx0 = nx0.min(tw - 1);
            nx1 = nx0 + 1;
        }
        if ny1 <= ny0 {
            ny0 = ny0.min(th - 1);
            ny1 = ny0 + 1;
        }
        Some(Rect::new(nx0, ny0, nx1, ny1))
    }
}

/// Bounding box of the largest 4-connected region above the foreground
/// floor, and a mask of pixels in other foreground regions.
pub fn foreground_bbox(raw: &Grid) -> Result<(Rect, Vec<bool>), CaseDataError> {
    let max = raw.max();
    if !(max > 0.0) {
        return Err(CaseDataError::NoForeground);
    }
    let threshold = FOREGROUND_FLOOR * max;
    let (h, w) = (raw.height(), raw.width());
    let fg: Vec<bool> = raw.data().iter().map(|&v| v > threshold).collect();
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize, Rect)> = None; // (component, size, bbox)
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        let mut bb = Rect::new(usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            bb.x0 = bb.x0.min(x);
            bb.y0 = bb.y0.min(y);
            bb.x1 = bb.x1.max(x + 1);
            bb.y1 = bb.y1.max(y + 1);
            let mut visit = |q: usize| {
                if fg[q] && label[q] == usize::MAX {
                    label[q] = next;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.as_ref().is_none_or(|b| size > b.1) {
            best = Some((next, size, bb));
        }
        next += 1;
    }
    let (component, _, bbox) = best.ok_or(CaseDataError::NoForeground)?;
    let others = label
        .iter()
        .map(|&l| l != usize::MAX && l != component)
        .collect();
    Ok((bbox, others))
}

/// Crops to the breast region, normalizes orientation (right side flipped),
/// pads to the target aspect on the far edge, and resizes bilinearly.
pub fn preprocess_image(
    raw: &Grid,
    target_h: usize,
    target_w: usize,
    side: Side,
) -> Result<Preprocessed, CaseDataError> {
    if raw.height() == 0 || raw.width() == 0 || target_h == 0 || target_w == 0 {
        return Err(CaseDataError::Invariant("empty image extents".into()));
    }
    let (crop, others) = foreground_bbox(raw)?;
    let mut cleaned = raw.clone();
    for (v, &other) in cleaned.data_mut().iter_mut().zip(&others) {
        if other {
            *v = 0.0;
        }
    }
    let mut img = cleaned.crop(crop.y0, crop.x0, crop.y1 - crop.y0, crop.x1 - crop.x0);
    let flipped = side == Side::R;
    if flipped {
        img = img.flip_horizontal();
    }
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = if h * target_w > w * target_h {
        (h, (h * target_w).div_ceil(target_h))
    } else {
        ((w * target_h).div_ceil(target_w), w)
    };
    let mut pixels = img.pad_to(ph, pw).resize_bilinear(target_h, target_w);
    pixels
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Preprocessed {
        pixels,
        crop,
        flipped,
        padded: (ph, pw),
    })
}

/// Preprocesses an image record, carrying its groundtruth boxes through the
/// same transform.
pub fn preprocess_record(
    record: &ImageRecord,
    target_h: usize,
    target_w: usize,
) -> Result<ImageRecord, CaseDataError> {
    let pre = preprocess_image(&record.pixels, target_h, target_w, record.side)?;
    let roi_boxes = record
        .roi_boxes
        .iter()
        .filter_map(|b| {
            pre.map_rect(&b.rect).map(|rect| RoiBox {
                rect,
                kind: b.kind,
                label: b.label,
            })
        })
        .collect();
    Ok(ImageRecord {
        side: record.side,
        view: record.view,
        pixels: pre.pixels,
        image_label: record.image_label,
        roi_boxes,
        source_path: record.source_path.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_matches_bright_rectangle() {
        let raw = Grid::from_fn(20, 30, |y, x| {
            if (5..15).contains(&y) && (8..20).contains(&x) {
                0.8
            } else {
                0.0
            }
        });
        let (bb, _) = foreground_bbox(&raw).unwrap();
        assert_eq!(bb, Rect::new(8, 5, 20, 15));
        let pre = preprocess_image(&raw, 10, 12, Side::L).unwrap();
        assert_eq!(pre.crop, bb);
        assert_eq!(pre.padded, (10, 12));
        assert!(pre.pixels.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
    }

    #[test]
    fn right_side_is_flipped_before_resize() {
        let mut raw = Grid::zeros(6, 6);
        // single bright column at the left edge of a 2-wide region
        for y in 0..6 {
            raw.set(y, 2, 1.0);
            raw.set(y, 3, 0.5);
        }
        let pre = preprocess_image(&raw, 6, 2, Side::R).unwrap();
        assert!(pre.flipped);
        assert_eq!(pre.crop, Rect::new(2, 0, 4, 6));
        // bright column now on the right edge
        assert_eq!(pre.pixels.get(0, 1), 1.0);
        assert_eq!(pre.pixels.get(0, 0), 0.5);
    }

    #[test]
    fn all_zero_image_has_no_foreground() {
        let raw = Grid::zeros(4, 4);
        assert!(matches!(
            preprocess_image(&raw, 4, 4, Side::L),
            Err(CaseDataError::NoForeground)
        ));
    }

    #[test]
    fn annotation_outside_largest_region_is_removed() {
        let raw = Grid::from_fn(20, 20, |y, x| {
            if (2..18).contains(&y) && (0..10).contains(&x) {
                0.5
            } else if y == 1 && x == 15 {
                1.0 // burned-in marker
            } else {
                0.0
            }
        });
        let (bb, others) = foreground_bbox(&raw).unwrap();
        assert_eq!(bb, Rect::new(0, 2, 10, 18));
        assert!(others[20 + 15]);
    }

    #[test]
    fn tall_crop_is_padded_on_the_right() {
        let raw = Grid::from_fn(16, 4, |_, _| 0.6);
        let pre = preprocess_image(&raw, 8, 4, Side::L).unwrap();
        assert_eq!(pre.padded, (16, 8));
        assert!(pre.pixels.get(4, 0) > 0.5);
        assert_eq!(pre.pixels.get(4, 3), 0.0);
    }

    #[test]
    fn boxes_follow_flip_and_scale() {
        let raw = Grid::from_fn(8, 8, |_, _| 0.5);
        let pre = preprocess_image(&raw, 4, 4, Side::R).unwrap();
        let r = pre.map_rect(&Rect::new(0, 0, 2, 2)).unwrap();
        assert_eq!(r, Rect::new(3, 0, 4, 1));
    }

    #[test]
    fn second_pass_keeps_full_frame() {
        // foreground already at the target aspect: the second crop is the frame
        let raw = Grid::from_fn(30, 30, |y, x| {
            if (3..27).contains(&y) && (6..24).contains(&x) {
                0.2 + 0.6 * ((y * x) % 7) as f64 / 7.0
            } else {
                0.0
            }
        });
        let first = preprocess_image(&raw, 16, 12, Side::L).unwrap();
        let (bb, _) = foreground_bbox(&first.pixels).unwrap();
        assert_eq!(bb, Rect::new(0, 0, 12, 16));
        let second = preprocess_image(&first.pixels, 16, 12, Side::L).unwrap();
        assert_eq!(second.pixels, first.pixels);
    }
}

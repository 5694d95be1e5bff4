use crate::casedata::{Grid, Rect};

use super::SaliencyMap;

/// Saliency upsampled to the input extents.
pub fn saliency_heatmap(map: &SaliencyMap) -> Grid {
    let (h, w) = map.source_shape;
    map.values.resize_bilinear(h, w)
}

/// The image with box outlines burned in at intensity 1.0.
pub fn boxed_image(image: &Grid, boxes: &[Rect]) -> Grid {
    let mut out = image.clone();
    for b in boxes {
        for x in b.x0..b.x1 {
            out.set(b.y0, x, 1.0);
            out.set(b.y1 - 1, x, 1.0);
        }
        for y in b.y0..b.y1 {
            out.set(y, b.x0, 1.0);
            out.set(y, b.x1 - 1, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_only() {
        let g = boxed_image(&Grid::zeros(5, 5), &[Rect::new(1, 1, 4, 4)]);
        assert_eq!(g.get(1, 1), 1.0);
        assert_eq!(g.get(3, 2), 1.0);
        assert_eq!(g.get(2, 2), 0.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn heatmap_matches_source_extents() {
        let m = SaliencyMap {
            values: Grid::from_fn(2, 3, |_, _| 0.5),
            source_shape: (8, 12),
        };
        let h = saliency_heatmap(&m);
        assert_eq!((h.height(), h.width()), (8, 12));
        assert!(h.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}

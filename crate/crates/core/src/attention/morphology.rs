//! Binary opening for cleaning correspondence masks.

use ndarray::Array2;

/// 3x3 cross structuring element offsets (center plus 4-neighborhood).
const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// Applies a single binary opening (erosion, then dilation) with a 3x3
/// cross element and zero padding.
///
/// Grids narrower than the element in either dimension are returned
/// unchanged so tiny token grids are never erased outright.
pub fn morphological_filter(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    if h < 3 || w < 3 {
        return mask.clone();
    }
    dilate(&erode(mask))
}

fn erode(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        CROSS.iter().all(|&(dr, dc)| {
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize && mask[(rr as usize, cc as usize)]
        })
    })
}

fn dilate(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        CROSS.iter().any(|&(dr, dc)| {
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize && mask[(rr as usize, cc as usize)]
        })
    })
}

//! Morphological thinning of boolean masks down to one-pixel skeletons.

use ndarray::Array2;

/// The eight neighbours of `(y, x)` clockwise from north; out-of-bounds
/// cells read as background.
fn ring(mask: &Array2<bool>, y: usize, x: usize) -> [bool; 8] {
    let (h, w) = mask.dim();
    let at = |dy: isize, dx: isize| -> bool {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && mask[(ny as usize, nx as usize)]
    };
    [
        at(-1, 0),  // N
        at(-1, 1),  // NE
        at(0, 1),   // E
        at(1, 1),   // SE
        at(1, 0),   // S
        at(1, -1),  // SW
        at(0, -1),  // W
        at(-1, -1), // NW
    ]
}

/// Two-subiteration thinning: repeatedly peels boundary pixels that
/// keep the stroke connected, until a full pass deletes nothing. The
/// result is a subset of the input and a fixed point of the operator
/// itself (already-thin strokes survive unchanged).
pub fn skeletonize(mask: &Array2<bool>) -> Array2<bool> {
    let mut cur = mask.clone();
    let (h, w) = cur.dim();
    let mut doomed: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut deleted = false;
        for phase in 0..2 {
            doomed.clear();
            for y in 0..h {
                for x in 0..w {
                    if !cur[(y, x)] {
                        continue;
                    }
                    let n = ring(&cur, y, x);
                    let count = n.iter().filter(|&&b| b).count();
                    if !(2..=6).contains(&count) {
                        continue;
                    }
                    let transitions = (0..8)
                        .filter(|&i| !n[i] && n[(i + 1) % 8])
                        .count();
                    if transitions != 1 {
                        continue;
                    }
                    // Indices: 0=N, 2=E, 4=S, 6=W.
                    let ok = if phase == 0 {
                        (!n[0] || !n[2] || !n[4]) && (!n[2] || !n[4] || !n[6])
                    } else {
                        (!n[0] || !n[2] || !n[6]) && (!n[0] || !n[4] || !n[6])
                    };
                    if ok {
                        doomed.push((y, x));
                    }
                }
            }
            if !doomed.is_empty() {
                deleted = true;
                for &(y, x) in &doomed {
                    cur[(y, x)] = false;
                }
            }
        }
        if !deleted {
            return cur;
        }
    }
}

/// Mask to `(1, H, W)` float planes with foreground mapped to 1.0.
pub fn mask_to_planes(mask: &Array2<bool>) -> ndarray::Array3<f32> {
    let (h, w) = mask.dim();
    ndarray::Array3::from_shape_fn((1, h, w), |(_, y, x)| if mask[(y, x)] { 1.0 } else { 0.0 })
}

/// Threshold `(1, H, W)` planes at 0.5 back into a mask.
pub fn planes_to_mask(planes: &ndarray::Array3<f32>) -> Array2<bool> {
    let (_, h, w) = planes.dim();
    Array2::from_shape_fn((h, w), |(y, x)| planes[(0, y, x)] > 0.5)
}

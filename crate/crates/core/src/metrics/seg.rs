/// Thresholds logits at zero.
pub fn binarize_logits(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&v| v > 0.0).collect()
}

pub fn binarize_mask(mask: &[f32]) -> Vec<bool> {
    mask.iter().map(|&v| v > 0.5).collect()
}

/// `|pred ∩ truth| / |pred ∪ truth|`, and 1 when both are empty.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "iou: mask sizes differ");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Band width used for boundary IoU on a `width×height` image:
/// `ceil(0.02 · diagonal)`.
pub fn boundary_band(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.02 * diag).ceil().max(1.0) as usize
}

/// Mask pixels whose Chebyshev distance to the nearest background pixel is
/// at most `d`. Pixels outside the image count as background.
pub fn boundary_region(mask: &[bool], width: usize, height: usize, d: usize) -> Vec<bool> {
    assert_eq!(mask.len(), width * height);
    let d = d as isize;
    let (w, h) = (width as isize, height as isize);
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            if !mask[(y * w + x) as usize] {
                continue;
            }
            let near_background = (-d..=d).any(|dy| {
                (-d..=d).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx < 0 || ny < 0 || nx >= w || ny >= h || !mask[(ny * w + nx) as usize]
                })
            });
            out[(y * w + x) as usize] = near_background;
        }
    }
    out
}

/// Boundary IoU with band `d`: plain IoU of the two masks' boundary regions.
pub fn biou(pred: &[bool], truth: &[bool], width: usize, height: usize, d: usize) -> f64 {
    assert!(d >= 1, "biou: band must be at least one pixel");
    let bp = boundary_region(pred, width, height, d);
    let bt = boundary_region(truth, width, height, d);
    iou(&bp, &bt)
}

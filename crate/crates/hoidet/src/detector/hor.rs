//! Human-object relation attention masks and the grid positional encoding.

use crate::tensor::NEG_INF;

/// Additive cross-attention mask for one query: 0 for grid cells whose
/// center lies inside the union bounding box of the two boxes, −∞ outside.
/// If rasterization leaves every cell masked, the cell nearest the union
/// center is unmasked so the query always has somewhere to look.
pub fn hor_mask(human_box: &[f64; 4], object_box: &[f64; 4], h: usize, w: usize) -> Vec<f64> {
    let u = crate::taxonomy::union_corners(human_box, object_box);
    let mut mask = vec![NEG_INF; h * w];
    let mut any = false;
    for row in 0..h {
        let cy = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let cx = (col as f64 + 0.5) / w as f64;
            if cx >= u[0] && cx <= u[2] && cy >= u[1] && cy <= u[3] {
                mask[row * w + col] = 0.0;
                any = true;
            }
        }
    }
    if !any {
        let (ux, uy) = ((u[0] + u[2]) / 2.0, (u[1] + u[3]) / 2.0);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for row in 0..h {
            let cy = (row as f64 + 0.5) / h as f64;
            for col in 0..w {
                let cx = (col as f64 + 0.5) / w as f64;
                let d = (cx - ux).powi(2) + (cy - uy).powi(2);
                if d < best_d {
                    best_d = d;
                    best = row * w + col;
                }
            }
        }
        mask[best] = 0.0;
    }
    mask
}

/// Fixed 2-D sinusoidal position code, one row per grid cell (row-major),
/// `c` channels split evenly between y and x.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; h * w * c];
    for row in 0..h {
        let cy = (row as f64 + 0.5) / h as f64;
        for col in 0..w {
            let cx = (col as f64 + 0.5) / w as f64;
            let base = (row * w + col) * c;
            for k in 0..half {
                let freq = 10000f64.powf(-((k / 2) as f64) * 2.0 / half as f64);
                let (ay, ax) = (cy * freq * std::f64::consts::TAU, cx * freq * std::f64::consts::TAU);
                out[base + k] = if k % 2 == 0 { ay.sin() } else { ay.cos() };
                out[base + half + k] = if k % 2 == 0 { ax.sin() } else { ax.cos() };
            }
        }
    }
    out
}

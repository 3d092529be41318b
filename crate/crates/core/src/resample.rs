//! Pixel-centre resampling of `(H, W, C)` arrays.

use ndarray::{Array3, ArrayView2, ArrayView3};

/// Bilinear sample at continuous pixel coordinates (pixel centres at integers),
/// clamping to the image border. Writes `C` values into `out`.
pub fn bilinear_at(img: ArrayView3<f64>, y: f64, x: f64, out: &mut [f64]) {
    let (h, w, c) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    for (k, o) in out.iter_mut().enumerate().take(c) {
        let top = img[[y0, x0, k]] * (1.0 - fx) + img[[y0, x1, k]] * fx;
        let bottom = img[[y1, x0, k]] * (1.0 - fx) + img[[y1, x1, k]] * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Nearest-neighbour lookup on a class-index map.
pub fn nearest_at(map: ArrayView2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = map.dim();
    let yi = (y.round().max(0.0) as usize).min(h - 1);
    let xi = (x.round().max(0.0) as usize).min(w - 1);
    map[[yi, xi]]
}

/// Bilinear resize of the whole array to `(out_h, out_w, C)`.
pub fn resize_bilinear(img: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    let mut px = vec![0.0; c];
    for i in 0..out_h {
        let y = (i as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for j in 0..out_w {
            let x = (j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            bilinear_at(img, y, x, &mut px);
            for k in 0..c {
                out[[i, j, k]] = px[k];
            }
        }
    }
    out
}

//! Volume filters used by the pruning mask: separable Gaussian smoothing on
//! real fields, and median, closing and dilation on boolean volumes.
//!
//! Volumes are `(t, y, x)` row-major. Gaussian smoothing zero-pads; the
//! boolean filters replicate the border.

/// Normalized 1D Gaussian taps for an odd `extent`.
pub fn gaussian_kernel(extent: usize, sigma: f64) -> Vec<f64> {
    let r = (extent / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / s).collect()
}

#[inline]
fn idx(dims: [usize; 3], t: usize, y: usize, x: usize) -> usize {
    (t * dims[1] + y) * dims[2] + x
}

#[inline]
fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 3D Gaussian blur with zero padding.
pub fn gaussian_blur_3d(field: &[f64], dims: [usize; 3], extent: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(extent, sigma);
    let r = (extent / 2) as isize;
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for t in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let pos = [t as isize, y as isize, x as isize];
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        let mut p = pos;
                        p[axis] += j as isize - r;
                        if p[axis] < 0 || p[axis] >= dims[axis] as isize {
                            continue;
                        }
                        acc += w * cur[idx(dims, p[0] as usize, p[1] as usize, p[2] as usize)];
                    }
                    next[idx(dims, t, y, x)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Majority vote over an `extent^3` neighborhood (a boolean median).
pub fn median_3d(mask: &[bool], dims: [usize; 3], extent: usize) -> Vec<bool> {
    let r = (extent / 2) as isize;
    let total = extent * extent * extent;
    let mut out = vec![false; mask.len()];
    for t in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let mut count = 0usize;
                for dt in -r..=r {
                    let tt = clamp(t as isize + dt, dims[0]);
                    for dy in -r..=r {
                        let yy = clamp(y as isize + dy, dims[1]);
                        for dx in -r..=r {
                            let xx = clamp(x as isize + dx, dims[2]);
                            count += mask[idx(dims, tt, yy, xx)] as usize;
                        }
                    }
                }
                out[idx(dims, t, y, x)] = 2 * count > total;
            }
        }
    }
    out
}

fn morph_2d(frame: &[bool], h: usize, w: usize, extent: usize, dilate: bool) -> Vec<bool> {
    let r = (extent / 2) as isize;
    let mut out = vec![false; frame.len()];
    for y in 0..h {
        for x in 0..w {
            let mut hit = !dilate;
            'scan: for dy in -r..=r {
                let yy = clamp(y as isize + dy, h);
                for dx in -r..=r {
                    let xx = clamp(x as isize + dx, w);
                    let v = frame[yy * w + xx];
                    if dilate && v {
                        hit = true;
                        break 'scan;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

/// Per-frame morphological closing (dilation then erosion) with a square element.
pub fn closing_2d(mask: &[bool], dims: [usize; 3], extent: usize) -> Vec<bool> {
    let per = dims[1] * dims[2];
    let mut out = Vec::with_capacity(mask.len());
    for t in 0..dims[0] {
        let frame = &mask[t * per..(t + 1) * per];
        let d = morph_2d(frame, dims[1], dims[2], extent, true);
        out.extend(morph_2d(&d, dims[1], dims[2], extent, false));
    }
    out
}

/// 3D dilation with a cubic element, repeated `iterations` times.
pub fn dilate_3d(mask: &[bool], dims: [usize; 3], extent: usize, iterations: usize) -> Vec<bool> {
    let r = (extent / 2) as isize;
    let mut cur = mask.to_vec();
    for _ in 0..iterations {
        let mut next = vec![false; cur.len()];
        for t in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let mut hit = false;
                    'scan: for dt in -r..=r {
                        let tt = clamp(t as isize + dt, dims[0]);
                        for dy in -r..=r {
                            let yy = clamp(y as isize + dy, dims[1]);
                            for dx in -r..=r {
                                let xx = clamp(x as isize + dx, dims[2]);
                                if cur[idx(dims, tt, yy, xx)] {
                                    hit = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    next[idx(dims, t, y, x)] = hit;
                }
            }
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert!(k[2] > k[1]);
        assert_eq!(gaussian_kernel(1, 1.0), vec![1.0]);
    }

    #[test]
    fn blur_matches_direct_3d_convolution() {
        let dims = [3, 4, 5];
        let field: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64).collect();
        let got = gaussian_blur_3d(&field, dims, 3, 0.8);
        let k = gaussian_kernel(3, 0.8);
        for t in 0..3isize {
            for y in 0..4isize {
                for x in 0..5isize {
                    let mut acc = 0.0;
                    for a in -1..=1isize {
                        for b in -1..=1isize {
                            for c in -1..=1isize {
                                let (tt, yy, xx) = (t + a, y + b, x + c);
                                if tt < 0 || yy < 0 || xx < 0 || tt >= 3 || yy >= 4 || xx >= 5 {
                                    continue;
                                }
                                acc += k[(a + 1) as usize] * k[(b + 1) as usize] * k[(c + 1) as usize]
                                    * field[((tt * 4 + yy) * 5 + xx) as usize];
                            }
                        }
                    }
                    let g = got[((t * 4 + y) * 5 + x) as usize];
                    assert!((g - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn closing_fills_single_hole() {
        let mut frame = vec![true; 25];
        frame[12] = false;
        let out = closing_2d(&frame, [1, 5, 5], 3);
        assert!(out.iter().all(|&b| b));
    }

    #[test]
    fn median_removes_isolated_true() {
        let mut m = vec![false; 27];
        m[13] = true;
        assert!(median_3d(&m, [3, 3, 3], 3).iter().all(|&b| !b));
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = vec![false; 5 * 5 * 5];
        m[idx([5, 5, 5], 2, 2, 2)] = true;
        let d = dilate_3d(&m, [5, 5, 5], 3, 1);
        assert_eq!(d.iter().filter(|&&b| b).count(), 27);
        let d2 = dilate_3d(&m, [5, 5, 5], 3, 2);
        assert_eq!(d2.iter().filter(|&&b| b).count(), 125);
    }
}

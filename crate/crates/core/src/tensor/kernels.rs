//! Raw f64 compute loops behind the tensor ops.
//!
//! Loop order keeps the innermost dimension contiguous so the compiler can
//! vectorize the hot paths (matmul rows, conv row axpys).

/// C[n x m] += A[n x k] * B[k x m]
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * m..(kk + 1) * m];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
}

pub fn transpose(x: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = x[i * m + j];
        }
    }
}

/// 3x3 cross-correlation with zero padding 1 and stride 1.
/// x: [c x h x w], kernel: [f x c x 3 x 3], out: [f x h x w]
pub fn conv2d(x: &[f64], kernel: &[f64], c: usize, h: usize, w: usize, f: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(kernel.len(), f * c * 9);
    debug_assert_eq!(out.len(), f * h * w);
    let plane = h * w;
    for fi in 0..f {
        let out_plane = &mut out[fi * plane..(fi + 1) * plane];
        for ci in 0..c {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            let kbase = (fi * c + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let weight = kernel[kbase + ky * 3 + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    // out[y][x] += weight * in[y + ky - 1][x + kx - 1]
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + (x0 as isize + dx) as usize..];
                        for (o, &iv) in orow.iter_mut().zip(irow) {
                            *o += weight * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. its input: full correlation with the
/// spatially flipped kernel. gout: [f x h x w], gin: [c x h x w]
pub fn conv2d_grad_input(
    gout: &[f64],
    kernel: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    gin: &mut [f64],
) {
    let plane = h * w;
    for ci in 0..c {
        let gin_plane = &mut gin[ci * plane..(ci + 1) * plane];
        for fi in 0..f {
            let gout_plane = &gout[fi * plane..(fi + 1) * plane];
            let kbase = (fi * c + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let weight = kernel[kbase + ky * 3 + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    // gin[y][x] += weight * gout[y - (ky-1)][x - (kx-1)]
                    let (dy, dx) = (1 - ky as isize, 1 - kx as isize);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let gy = (y as isize + dy) as usize;
                        let grow = &mut gin_plane[y * w + x0..y * w + x1];
                        let gorow = &gout_plane[gy * w + (x0 as isize + dx) as usize..];
                        for (g, &gv) in grow.iter_mut().zip(gorow) {
                            *g += weight * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. the kernel. gk: [f x c x 3 x 3]
pub fn conv2d_grad_kernel(
    gout: &[f64],
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    gk: &mut [f64],
) {
    let plane = h * w;
    for fi in 0..f {
        let gout_plane = &gout[fi * plane..(fi + 1) * plane];
        for ci in 0..c {
            let in_plane = &x[ci * plane..(ci + 1) * plane];
            let kbase = (fi * c + ci) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let gorow = &gout_plane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + (x0 as isize + dx) as usize..];
                        acc += gorow.iter().zip(irow).map(|(&g, &iv)| g * iv).sum::<f64>();
                    }
                    gk[kbase + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Row-stable softmax of one row, in place over `row`.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        // delta kernels: out channel i copies in channel i
        let mut k = vec![0.0; 2 * 2 * 9];
        k[0 * 18 + 0 * 9 + 4] = 1.0;
        k[1 * 18 + 1 * 9 + 4] = 1.0;
        let mut out = vec![0.0; 2 * 4 * 4];
        conv2d(&x, &k, 2, 4, 4, 2, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_ones_kernel_interior() {
        let x = vec![2.0; 1 * 5 * 5];
        let k = vec![1.0; 9];
        let mut out = vec![0.0; 25];
        conv2d(&x, &k, 1, 5, 5, 1, &mut out);
        // interior pixel sums all nine taps of a constant image
        assert!((out[2 * 5 + 2] - 18.0).abs() < 1e-12);
        // corner only sees four in-bounds taps
        assert!((out[0] - 8.0).abs() < 1e-12);
    }
}

//! im2col convolution kernels on top of `matrixmultiply::dgemm`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        assert!(
            n + 2 * self.pad >= span,
            "input extent {n} too small for kernel span {span} with pad {}",
            self.pad
        );
        (n + 2 * self.pad - span) / self.stride + 1
    }
}

/// Unfolds one (C, H, W) image into a (C·k·k, Ho·Wo) column matrix.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let hw = ho * wo;
    for ci in 0..c {
        let img = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a (C, H, W) image.
pub(crate) fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let hw = ho * wo;
    for ci in 0..c {
        let img = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha·op(a)·op(b) + beta·c` with `op` selected by the transpose flags.
/// `a` is stored as (m, k) or, when `ta`, as (k, m); likewise `b` as (k, n) or (n, k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index addressed by the stride pairs above,
    // as checked by the assertion on their lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], o: usize, g: ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_size(h), g.out_size(w));
        let k = g.kernel;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((oc * c + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (c, h, w, o) = (3, 7, 6, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..o * c * 9).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
        for g in [
            ConvGeom::new(3, 1, 1, 1),
            ConvGeom::new(3, 2, 1, 1),
            ConvGeom::new(3, 1, 2, 2),
            ConvGeom::new(3, 1, 3, 3),
        ] {
            let (ho, wo) = (g.out_size(h), g.out_size(w));
            let mut cols = vec![0.0; c * 9 * ho * wo];
            im2col(&x, c, h, w, g, &mut cols);
            let mut out = vec![0.0; o * ho * wo];
            gemm(o, c * 9, ho * wo, &wt, false, &cols, false, 0.0, &mut out);
            let expect = naive_conv(&x, c, h, w, &wt, o, g);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        let g = ConvGeom::new(3, 2, 2, 2);
        let (ho, wo) = (g.out_size(h), g.out_size(w));
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

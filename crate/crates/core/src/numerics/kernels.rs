//! Plain dense kernels shared by the tape's forward and backward passes.

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·k·k, Ho·Wo]` column matrix.
pub fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &img[(c * g.height + y as usize) * g.width..];
                    for ox in 0..wo {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * wo + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_acc(cols_grad: &[f64], g: &ConvGeom, img_grad: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    for c in 0..g.in_ch {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let y = (oy * g.stride + ky) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + y as usize) * g.width;
                    for ox in 0..wo {
                        let x = (ox * g.stride + kx) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            img_grad[base + x as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let ab = matmul(&a, &b, 2, 3, 4);

        let bt = crate::numerics::Tensor::matrix(3, 4, b.clone()).unwrap().transpose();
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&a, bt.data(), &mut nt, 2, 3, 4);
        let at = crate::numerics::Tensor::matrix(2, 3, a.clone()).unwrap().transpose();
        let mut tn = vec![0.0; 8];
        matmul_tn_acc(at.data(), &b, &mut tn, 2, 3, 4);
        for i in 0..8 {
            assert!((ab[i] - nt[i]).abs() < 1e-12);
            assert!((ab[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { in_ch: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let img: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let cols = im2col(&img, &g);
        let probe: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).sin()).collect();
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_acc(&probe, &g, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

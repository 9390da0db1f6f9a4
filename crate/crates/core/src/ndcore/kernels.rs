//! Slice-level kernels shared by the forward and backward passes.

use crate::ndcore::tensor::strides;

/// `c = a·b + beta·c` for row/column-strided operands.
///
/// `a` is m×k, `b` is k×n, `c` is m×n row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a too short");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3D convolution over one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] == 0 || stride[a] == 0 || kernel[a] > padded {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(ConvGeom {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    /// Source offset along one axis, or `None` when it falls in the padding.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let p = (o * self.stride[axis] + k) as isize - self.pad[axis] as isize;
        (p >= 0 && (p as usize) < self.input[axis]).then_some(p as usize)
    }

    /// Unfold `x` (`cin × X×Y×Z`) into `cols` (`patch_len × out_spatial`).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [_, iy, iz] = self.input;
        let [ox, oy, oz] = self.output;
        let [kx, ky, kz] = self.kernel;
        let npos = self.out_spatial();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &x[c * self.input.iter().product::<usize>()..];
            for dx in 0..kx {
                for dy in 0..ky {
                    for dz in 0..kz {
                        let dst = &mut cols[row * npos..(row + 1) * npos];
                        let mut o = 0;
                        for px in 0..ox {
                            let sx = self.src(0, px, dx);
                            for py in 0..oy {
                                let sy = self.src(1, py, dy);
                                match (sx, sy) {
                                    (Some(sx), Some(sy)) => {
                                        let base = (sx * iy + sy) * iz;
                                        for pz in 0..oz {
                                            dst[o] = match self.src(2, pz, dz) {
                                                Some(sz) => xc[base + sz],
                                                None => 0.0,
                                            };
                                            o += 1;
                                        }
                                    }
                                    _ => {
                                        dst[o..o + oz].fill(0.0);
                                        o += oz;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-add `cols` into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [_, iy, iz] = self.input;
        let [ox, oy, oz] = self.output;
        let [kx, ky, kz] = self.kernel;
        let npos = self.out_spatial();
        let vol = self.input.iter().product::<usize>();
        let mut row = 0;
        for c in 0..self.cin {
            let xc = &mut dx[c * vol..(c + 1) * vol];
            for dx_ in 0..kx {
                for dy in 0..ky {
                    for dz in 0..kz {
                        let src = &cols[row * npos..(row + 1) * npos];
                        let mut o = 0;
                        for px in 0..ox {
                            let sx = self.src(0, px, dx_);
                            for py in 0..oy {
                                let sy = self.src(1, py, dy);
                                if let (Some(sx), Some(sy)) = (sx, sy) {
                                    let base = (sx * iy + sy) * iz;
                                    for pz in 0..oz {
                                        if let Some(sz) = self.src(2, pz, dz) {
                                            xc[base + sz] += src[o];
                                        }
                                        o += 1;
                                    }
                                } else {
                                    o += oz;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Forward convolution for `batch` items; `w` is `cout × patch_len`.
pub(crate) fn conv3d_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
    let npos = g.out_spatial();
    let plen = g.patch_len();
    let mut cols = vec![0.0; plen * npos];
    let mut out = vec![0.0; batch * g.cout * npos];
    for b in 0..batch {
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        gemm(
            g.cout,
            plen,
            npos,
            w,
            (plen, 1),
            &cols,
            (npos, 1),
            0.0,
            &mut out[b * g.cout * npos..(b + 1) * g.cout * npos],
        );
    }
    out
}

/// Gradients of a batched convolution. Either output may be skipped.
pub(crate) fn conv3d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let npos = g.out_spatial();
    let plen = g.patch_len();
    let mut cols = vec![0.0; plen * npos];
    for b in 0..batch {
        let dyb = &dy[b * g.cout * npos..(b + 1) * g.cout * npos];
        if let Some(dw) = dw.as_deref_mut() {
            g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            // dW += dY · colsᵀ
            gemm(g.cout, npos, plen, dyb, (npos, 1), &cols, (1, npos), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = Wᵀ · dY
            gemm(plen, g.cout, npos, w, (1, plen), dyb, (npos, 1), 0.0, &mut cols);
            g.col2im(&cols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
}

/// Copy `x` (shape `shape`) into axis order `perm`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the input for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut base = 0usize;
    loop {
        for i in 0..inner {
            out.push(x[base + i * inner_stride]);
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// For each output element of a nearest upsample, the source flat index.
pub(crate) fn upsample_index(shape: &[usize], factors: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = shape.iter().zip(factors).map(|(s, f)| s * f).collect();
    let in_strides = strides(shape);
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let src: usize = (0..rank).map(|a| (idx[a] / factors[a]) * in_strides[a]).sum();
        map.push(src);
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    map
}

/// Split `shape` around `axis` into (outer, n, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax(x: &[f64], (outer, n, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let m = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[at(j)] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    (outer, n, inner): (usize, usize, usize),
    dx: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: f64 = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] += y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
}

/// Normalized output plus per-slice inverse standard deviations.
pub(crate) fn layer_norm(
    x: &[f64],
    (outer, n, inner): (usize, usize, usize),
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mean = (0..n).map(|j| x[at(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (x[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[o * inner + i] = r;
            for j in 0..n {
                y[at(j)] = (x[at(j)] - mean) * r;
            }
        }
    }
    (y, inv_std)
}

pub(crate) fn layer_norm_backward(
    y: &[f64],
    inv_std: &[f64],
    dy: &[f64],
    (outer, n, inner): (usize, usize, usize),
    dx: &mut [f64],
) {
    let nf = n as f64;
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mean_dy = (0..n).map(|j| dy[at(j)]).sum::<f64>() / nf;
            let mean_dyy = (0..n).map(|j| dy[at(j)] * y[at(j)]).sum::<f64>() / nf;
            let r = inv_std[o * inner + i];
            for j in 0..n {
                dx[at(j)] += r * (dy[at(j)] - mean_dy - y[at(j)] * mean_dyy);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transpose() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let y = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(y, vec![0., 3., 1., 4., 2., 5.]);
        let back = permute(&y, &[3, 2], &inverse_perm(&[1, 0]));
        assert_eq!(back, x);
    }

    #[test]
    fn permute_rank3() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let y = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 4.0);
        assert_eq!(y[3], 12.0);
        assert_eq!(y[6], 1.0);
    }

    #[test]
    fn conv_geom_floor_division() {
        let g = ConvGeom::new(1, 1, [16, 16, 8], [4, 4, 2], [4, 4, 2], [0; 3]).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        let g = ConvGeom::new(1, 1, [17, 18, 9], [4, 4, 2], [4, 4, 2], [0; 3]).unwrap();
        assert_eq!(g.output, [4, 4, 4]);
        assert!(ConvGeom::new(1, 1, [3, 3, 3], [4, 1, 1], [1; 3], [0; 3]).is_none());
    }

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [0.0];
        gemm(1, 2, 1, &a, (2, 1), &b, (1, 1), 0.0, &mut c);
        assert_eq!(c[0], 11.0);
    }
}

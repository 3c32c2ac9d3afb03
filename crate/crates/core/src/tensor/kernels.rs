//! Dense numeric kernels: matrix products and im2col convolution.

use super::Scalar;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a (possibly grouped) 3-D convolution over `(N, C, D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn cg(&self) -> usize {
        self.c / self.groups
    }

    pub fn og(&self) -> usize {
        self.o / self.groups
    }

    pub fn col_rows(&self) -> usize {
        self.cg() * self.kernel.iter().product::<usize>()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }
}

/// Fills `cols[(c, kd, kh, kw), (od, oh, ow)]` for channels `c0..c0+cg` of one sample.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], c0: usize, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ncol = g.out_spatial();
    let mut row = 0;
    for c in 0..g.cg() {
        let xc = &x[(c0 + c) * id * ih * iw..(c0 + c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    let mut idx = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            let plane_ok = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[idx] = if plane_ok && xi >= 0 && (xi as usize) < iw {
                                    xc[(zi as usize * ih + yi as usize) * iw + xi as usize]
                                } else {
                                    T::zero()
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into `dx` (adjoint of [`im2col`]).
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], c0: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ncol = g.out_spatial();
    let mut row = 0;
    for c in 0..g.cg() {
        let xc = &mut dx[(c0 + c) * id * ih * iw..(c0 + c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let mut idx = 0;
                    for zo in 0..od {
                        let zi = (zo * sd + a) as isize - pd as isize;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            let plane_ok = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if plane_ok && xi >= 0 && (xi as usize) < iw {
                                    xc[(zi as usize * ih + yi as usize) * iw + xi as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cg, og, rows, ncol) = (g.cg(), g.og(), g.col_rows(), g.out_spatial());
    let in_sample = g.c * g.in_spatial();
    let out_sample = g.o * ncol;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut cols = vec![T::zero(); rows * ncol];
    for s in 0..g.n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let ys = &mut out[s * out_sample..(s + 1) * out_sample];
        for grp in 0..g.groups {
            im2col(g, xs, grp * cg, &mut cols);
            let wg = &w[grp * og * rows..(grp + 1) * og * rows];
            let yg = &mut ys[grp * og * ncol..(grp + 1) * og * ncol];
            gemm_nn(og, rows, ncol, wg, &cols, yg);
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                ys[o * ncol..(o + 1) * ncol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for [`conv_forward`].
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (cg, og, rows, ncol) = (g.cg(), g.og(), g.col_rows(), g.out_spatial());
    let in_sample = g.c * g.in_spatial();
    let out_sample = g.o * ncol;
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dcols = vec![T::zero(); rows * ncol];
    for s in 0..g.n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let dys = &dy[s * out_sample..(s + 1) * out_sample];
        for grp in 0..g.groups {
            let dyg = &dys[grp * og * ncol..(grp + 1) * og * ncol];
            if let Some(dw) = dw.as_deref_mut() {
                im2col(g, xs, grp * cg, &mut cols);
                let dwg = &mut dw[grp * og * rows..(grp + 1) * og * rows];
                gemm_nt(og, ncol, rows, dyg, &cols, dwg);
            }
            if let Some(dx) = dx.as_deref_mut() {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                let wg = &w[grp * og * rows..(grp + 1) * og * rows];
                gemm_tn(rows, og, ncol, wg, dyg, &mut dcols);
                col2im(g, &dcols, grp * cg, &mut dx[s * in_sample..(s + 1) * in_sample]);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, dbv) in db.iter_mut().enumerate() {
                *dbv += dys[o * ncol..(o + 1) * ncol].iter().copied().sum::<T>();
            }
        }
    }
}

/// Source channel for each destination channel of a channel shuffle: channel
/// `g * (C / G) + i` moves to `i * G + g`.
pub fn shuffle_sources(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    let mut src = vec![0; channels];
    for g in 0..groups {
        for i in 0..per {
            src[i * groups + g] = g * per + i;
        }
    }
    src
}

/// Strided copy implementing an axis permutation.
pub fn permute<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

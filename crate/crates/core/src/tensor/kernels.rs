//! Slice-level numeric kernels shared by the forward and backward passes.

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
}

/// `c[p×r] += a[p×q] · b[r×q]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * r + j] += dot;
        }
    }
}

/// `c[q×r] += a[p×q]ᵀ · b[p×r]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for k in 0..p {
        let b_row = &b[k * r..(k + 1) * r];
        for i in 0..q {
            let aki = a[k * q + i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * r..(i + 1) * r];
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aki * bkj;
            }
        }
    }
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Geometry of a valid (no padding) strided 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn kernel_offset(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.cin + c) * self.kh + ky) * self.kw + kx
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64]) {
    for b in 0..g.batch {
        let inp = &input[b * g.in_len()..(b + 1) * g.in_len()];
        let outp = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        for o in 0..g.cout {
            let plane = &mut outp[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            plane.fill(bias[o]);
            for c in 0..g.cin {
                let chan = &inp[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wgt = kernel[g.kernel_offset(o, c, ky, kx)];
                        if wgt == 0.0 {
                            continue;
                        }
                        for y in 0..g.oh {
                            let row = &chan[(y * g.sh + ky) * g.w..];
                            let orow = &mut plane[y * g.ow..(y + 1) * g.ow];
                            for (x, v) in orow.iter_mut().enumerate() {
                                *v += wgt * row[x * g.sw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of a convolution given the upstream gradient.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        let inp = &input[b * g.in_len()..(b + 1) * g.in_len()];
        let gout = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
        for o in 0..g.cout {
            let gplane = &gout[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            if let Some(gb) = grad_bias.as_deref_mut() {
                gb[o] += gplane.iter().sum::<f64>();
            }
            for c in 0..g.cin {
                let chan = &inp[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let koff = g.kernel_offset(o, c, ky, kx);
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            let mut acc = 0.0;
                            for y in 0..g.oh {
                                let row = &chan[(y * g.sh + ky) * g.w..];
                                let grow = &gplane[y * g.ow..(y + 1) * g.ow];
                                for (x, &gv) in grow.iter().enumerate() {
                                    acc += gv * row[x * g.sw + kx];
                                }
                            }
                            gk[koff] += acc;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let wgt = kernel[koff];
                            if wgt == 0.0 {
                                continue;
                            }
                            let gchan = &mut gi[b * g.in_len() + c * g.h * g.w..];
                            for y in 0..g.oh {
                                let base = (y * g.sh + ky) * g.w;
                                let grow = &gplane[y * g.ow..(y + 1) * g.ow];
                                for (x, &gv) in grow.iter().enumerate() {
                                    gchan[base + x * g.sw + kx] += wgt * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log(Σ exp(row))` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source flat index for every destination element of an axis permutation:
/// `out.shape[d] = in.shape[perm[d]]`.
pub(crate) fn permutation_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

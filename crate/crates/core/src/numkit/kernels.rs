//! Raw slice kernels shared by the graph forward and backward passes.
//!
//! All matrices are row-major. The `acc` variants add into `out`, which is
//! how gradient accumulation is expressed without temporaries.

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent lanes so the loop vectorizes; summation order is fixed
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GEMM_MIN_WORK: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the given dims and strides
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
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out);
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out);
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    if m * k * n >= GEMM_MIN_WORK {
        return gemm_acc(m, k, n, a, (1, m as isize), b, (n as isize, 1), out);
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    mm_nn_acc(a, b, &mut out, m, k, n);
    out
}

/// Row-wise softmax over the last axis of a `rows × cols` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

/// Tanh approximation of GELU and its derivative.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a 3×3×3 convolution with padding 1 on a channel-last volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let o = |n: usize, s: usize| (n - 1) / s + 1;
        [
            o(self.t, self.stride[0]),
            o(self.h, self.stride[1]),
            o(self.w, self.stride[2]),
        ]
    }

    pub fn patch(&self) -> usize {
        27 * self.cin
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        // f(output position, patch column start, input offset of that tap)
        let [ot, oh, ow] = self.out_dims();
        let (t, h, w, c) = (self.t as isize, self.h as isize, self.w as isize, self.cin);
        let mut pos = 0;
        for a in 0..ot {
            for b in 0..oh {
                for d in 0..ow {
                    let mut tap = 0;
                    for kt in -1isize..=1 {
                        let it = (a * self.stride[0]) as isize + kt;
                        for kh in -1isize..=1 {
                            let ih = (b * self.stride[1]) as isize + kh;
                            for kw in -1isize..=1 {
                                let iw = (d * self.stride[2]) as isize + kw;
                                let inside = it >= 0 && it < t && ih >= 0 && ih < h && iw >= 0 && iw < w;
                                let offset = inside
                                    .then(|| (((it * h + ih) * w + iw) as usize) * c);
                                f(pos, tap * c, offset);
                                tap += 1;
                            }
                        }
                    }
                    pos += 1;
                }
            }
        }
    }

    /// Unfolds the input into a `positions × (27·cin)` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let [ot, oh, ow] = self.out_dims();
        let patch = self.patch();
        let c = self.cin;
        let mut cols = vec![0.0; ot * oh * ow * patch];
        self.for_each_tap(|pos, col, offset| {
            if let Some(off) = offset {
                let dst = pos * patch + col;
                cols[dst..dst + c].copy_from_slice(&input[off..off + c]);
            }
        });
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back.
    pub fn col2im_acc(&self, cols: &[f64], input_grad: &mut [f64]) {
        let patch = self.patch();
        let c = self.cin;
        self.for_each_tap(|pos, col, offset| {
            if let Some(off) = offset {
                let src = pos * patch + col;
                for k in 0..c {
                    input_grad[off + k] += cols[src + k];
                }
            }
        });
    }
}

/// Adaptive pooling bin `[floor(i·src/dst), ceil((i+1)·src/dst))`.
pub fn adaptive_bin(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = (i * src) / dst;
    let end = ((i + 1) * src).div_ceil(dst);
    (start, end)
}

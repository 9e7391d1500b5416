//! Raw loops over flat slices. Callers validate shapes.

/// c[m×n] += a[m×k] · b[k×n]
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, a, (n, 1), b, (1, n), c);
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), b, (n, 1), c);
}

/// c[m×n] += a[m×k] · b[k×n] with explicit (row, column) strides for a and b;
/// c is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[i] = f(a[i mod |a|], b[i mod |b|]) for i < n, where each operand either
/// has n elements or cycles with a period dividing n.
pub fn broadcast_map(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match (a.len() == n, b.len() == n) {
        (true, true) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (true, false) if b.len() == 1 => out.extend(a.iter().map(|&x| f(x, b[0]))),
        (false, true) if a.len() == 1 => out.extend(b.iter().map(|&y| f(a[0], y))),
        (true, false) => {
            for chunk in a.chunks_exact(b.len()) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (false, true) => {
            for chunk in b.chunks_exact(a.len()) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        (false, false) => out.extend((0..n).map(|i| f(a[i % a.len()], b[i % b.len()]))),
    }
    out
}

/// dst[i mod |dst|] += f(g[i], other[i mod |other|]) over the n = |g| entries
/// of an upstream gradient; the reverse of [`broadcast_map`].
pub fn broadcast_accumulate(dst: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    let n = g.len();
    let (dl, ol) = (dst.len(), other.len());
    if dl == n && ol == n {
        for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
            *d += f(gv, o);
        }
    } else if dl == n {
        for (dc, gc) in dst.chunks_exact_mut(ol).zip(g.chunks_exact(ol)) {
            for ((d, &gv), &o) in dc.iter_mut().zip(gc).zip(other) {
                *d += f(gv, o);
            }
        }
    } else if ol == n {
        for (gc, oc) in g.chunks_exact(dl).zip(other.chunks_exact(dl)) {
            for ((d, &gv), &o) in dst.iter_mut().zip(gc).zip(oc) {
                *d += f(gv, o);
            }
        }
    } else {
        for i in 0..n {
            dst[i % dl] += f(g[i], other[i % ol]);
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat output index of the permuted tensor, the flat source index.
pub fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        // odometer increment over the output index
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub fn softmax_forward(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
}

pub fn softmax_backward(
    y: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| y[base + j * inner] * gy[base + j * inner])
                .sum();
            for j in 0..len {
                let at = base + j * inner;
                gx[at] += y[at] * (gy[at] - dot);
            }
        }
    }
}

/// Causal 1-D convolution over axis 1 of `x` shaped (B, T, N, c_in) with
/// filters shaped (ks, c_in, c_out). Tap j looks back (ks-1-j)·dilation steps.
pub struct ConvGeom {
    pub batch: usize,
    pub time: usize,
    pub nodes: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn shift(&self, tap: usize) -> usize {
        (self.kernel - 1 - tap) * self.dilation
    }

    pub fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let row_in = self.nodes * self.c_in;
        let row_out = self.nodes * self.c_out;
        for b in 0..self.batch {
            for tap in 0..self.kernel {
                let s = self.shift(tap);
                if s >= self.time {
                    continue;
                }
                let steps = self.time - s;
                let xs = &x[b * self.time * row_in..][..steps * row_in];
                let os = &mut out[(b * self.time + s) * row_out..][..steps * row_out];
                let wt = &w[tap * self.c_in * self.c_out..][..self.c_in * self.c_out];
                mm_nn(xs, wt, os, steps * self.nodes, self.c_in, self.c_out);
            }
        }
    }

    pub fn backward(&self, x: &[f64], w: &[f64], g: &[f64], gx: &mut [f64], gw: &mut [f64]) {
        let row_in = self.nodes * self.c_in;
        let row_out = self.nodes * self.c_out;
        for b in 0..self.batch {
            for tap in 0..self.kernel {
                let s = self.shift(tap);
                if s >= self.time {
                    continue;
                }
                let steps = self.time - s;
                let rows = steps * self.nodes;
                let xs = &x[b * self.time * row_in..][..steps * row_in];
                let gs = &g[(b * self.time + s) * row_out..][..steps * row_out];
                let wt = &w[tap * self.c_in * self.c_out..][..self.c_in * self.c_out];
                let gxs = &mut gx[b * self.time * row_in..][..steps * row_in];
                mm_nt(gs, wt, gxs, rows, self.c_out, self.c_in);
                let gwt = &mut gw[tap * self.c_in * self.c_out..][..self.c_in * self.c_out];
                mm_tn(xs, gs, gwt, rows, self.c_in, self.c_out);
            }
        }
    }
}

//! Raw numeric kernels shared by the differentiable ops.

/// Geometry of a 3D cross-correlation over `[C, T, H, W]` inputs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        in_dims: [usize; 3],
        k_dims: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || k_dims[a] > in_dims[a] + 2 * pad[a] {
                return None;
            }
            out_dims[a] = (in_dims[a] + 2 * pad[a] - k_dims[a]) / stride[a] + 1;
        }
        Some(ConvGeom {
            c_in,
            c_out,
            in_dims,
            k_dims,
            stride,
            pad,
            out_dims,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_dims.iter().product::<usize>()
    }

    /// Valid output index range along one axis for kernel offset `k`: all `o`
    /// with `0 <= o*stride + k - pad < in`.
    fn valid(&self, axis: usize, k: usize) -> std::ops::Range<usize> {
        let (s, p, n, o_max) = (
            self.stride[axis] as isize,
            self.pad[axis] as isize,
            self.in_dims[axis] as isize,
            self.out_dims[axis] as isize,
        );
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = ((n - 1 + p - k).div_euclid(s) + 1).clamp(0, o_max);
        lo.min(hi) as usize..hi as usize
    }

    fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.c_in * self.k_dims.iter().product::<usize>()
    }

    /// Visits every (column row, input offset, output position) run: for tap
    /// row `r`, `n` consecutive output positions starting at `p0` read input
    /// elements `in_off + j*stride_w`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [t_in, h_in, w_in] = self.in_dims;
        let [kt, kh, kw] = self.k_dims;
        let [_, h_out, w_out] = self.out_dims;
        let in_plane = t_in * h_in * w_in;
        for ci in 0..self.c_in {
            for dt in 0..kt {
                let rt = self.valid(0, dt);
                for dh in 0..kh {
                    let rh = self.valid(1, dh);
                    for dw in 0..kw {
                        let rw = self.valid(2, dw);
                        let r = ((ci * kt + dt) * kh + dh) * kw + dw;
                        if rw.is_empty() {
                            continue;
                        }
                        for ot in rt.clone() {
                            let it = ot * self.stride[0] + dt - self.pad[0];
                            for oh in rh.clone() {
                                let ih = oh * self.stride[1] + dh - self.pad[1];
                                let iw0 = rw.start * self.stride[2] + dw - self.pad[2];
                                let in_off = ci * in_plane + (it * h_in + ih) * w_in + iw0;
                                let p0 = (ot * h_out + oh) * w_out + rw.start;
                                f(r, in_off, p0, rw.len());
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `[taps, positions]` matrix; padding reads 0.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let np = self.positions();
        let s = self.stride[2];
        let mut col = vec![0.0; self.taps() * np];
        self.for_each_run(|r, in_off, p0, n| {
            let dst = &mut col[r * np + p0..r * np + p0 + n];
            if s == 1 {
                dst.copy_from_slice(&input[in_off..in_off + n]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = input[in_off + j * s];
                }
            }
        });
        col
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (np, nr) = (self.positions(), self.taps());
        let col = self.im2col(input);
        let mut out = vec![0.0; self.out_len()];
        for (r, src) in col.chunks_exact(np).enumerate() {
            for (co, dst) in out.chunks_exact_mut(np).enumerate() {
                let w = kernel[co * nr + r];
                if w != 0.0 {
                    axpy(w, src, dst);
                }
            }
        }
        out
    }

    pub fn backward_input(&self, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (np, nr) = (self.positions(), self.taps());
        let mut g_col = vec![0.0; nr * np];
        for (r, dst) in g_col.chunks_exact_mut(np).enumerate() {
            for (co, g) in grad_out.chunks_exact(np).enumerate() {
                let w = kernel[co * nr + r];
                if w != 0.0 {
                    axpy(w, g, dst);
                }
            }
        }
        let mut g_in = vec![0.0; self.c_in * self.in_dims.iter().product::<usize>()];
        let s = self.stride[2];
        self.for_each_run(|r, in_off, p0, n| {
            let src = &g_col[r * np + p0..r * np + p0 + n];
            for (j, v) in src.iter().enumerate() {
                g_in[in_off + j * s] += v;
            }
        });
        g_in
    }

    pub fn backward_kernel(&self, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
        let (np, nr) = (self.positions(), self.taps());
        let col = self.im2col(input);
        let mut g_k = vec![0.0; self.c_out * nr];
        for (r, src) in col.chunks_exact(np).enumerate() {
            for (co, g) in grad_out.chunks_exact(np).enumerate() {
                g_k[co * nr + r] = dot(g, src);
            }
        }
        g_k
    }
}

/// `y += a * x`
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Per-axis bilinear sampling table with corner alignment: output index `i`
/// reads `(1-f)*src[lo] + f*src[hi]`.
#[derive(Debug, Clone)]
pub(crate) struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = if dst > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let l = (pos.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(pos - l as f64);
        }
        LinearTaps { lo, hi, frac }
    }
}

/// Bilinear resize of `channels` stacked `[h, w]` planes to `[out_h, out_w]`.
pub(crate) fn bilinear(
    src: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut out = vec![0.0; channels * out_h * out_w];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for i in 0..out_h {
            let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
            for j in 0..out_w {
                let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                dst[i * out_w + j] = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                    + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear`].
pub(crate) fn bilinear_adjoint(
    grad: &[f64],
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return grad.to_vec();
    }
    let ty = LinearTaps::new(h, out_h);
    let tx = LinearTaps::new(w, out_w);
    let mut g_src = vec![0.0; channels * h * w];
    for c in 0..channels {
        let g = &grad[c * out_h * out_w..(c + 1) * out_h * out_w];
        let dst = &mut g_src[c * h * w..(c + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, fy) = (ty.lo[i], ty.hi[i], ty.frac[i]);
            for j in 0..out_w {
                let (x0, x1, fx) = (tx.lo[j], tx.hi[j], tx.frac[j]);
                let v = g[i * out_w + j];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    g_src
}

// Raw slice kernels behind the tape operations. Shapes are validated by
// the callers in `ops.rs`; everything here assumes consistent extents.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `[m, k]` and
/// `op(b)` of shape `[k, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked below.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, H_out·W_out]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: accumulates columns back into `[C, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for a tap displaced by `off`.
#[inline]
fn tap_range(extent: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (extent as isize - off).clamp(0, extent as isize) as usize;
    (lo.min(hi), hi)
}

/// Same-size depthwise convolution of one `[H, W]` plane with a `k×k` kernel.
pub(crate) fn depthwise_plane(
    x: &[f64],
    w: &[f64],
    k: usize,
    dilation: usize,
    h: usize,
    wd: usize,
    out: &mut [f64],
) {
    let r = (k / 2) as isize;
    for ky in 0..k {
        let dy = (ky as isize - r) * dilation as isize;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..k {
            let wv = w[ky * k + kx];
            if wv == 0.0 {
                continue;
            }
            let dx = (kx as isize - r) * dilation as isize;
            let (x0, x1) = tap_range(wd, dx);
            if x0 == x1 {
                continue;
            }
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize) * wd;
                let o = &mut out[y * wd + x0..y * wd + x1];
                let s = &x[(src as isize + x0 as isize + dx) as usize..(src as isize + x1 as isize + dx) as usize];
                for (ov, sv) in o.iter_mut().zip(s) {
                    *ov += wv * sv;
                }
            }
        }
    }
}

/// Backward of [`depthwise_plane`]: accumulates into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_plane_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    k: usize,
    dilation: usize,
    h: usize,
    wd: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let r = (k / 2) as isize;
    let mut dx = dx;
    let mut dw = dw;
    for ky in 0..k {
        let dy = (ky as isize - r) * dilation as isize;
        let (y0, y1) = tap_range(h, dy);
        for kx in 0..k {
            let dxo = (kx as isize - r) * dilation as isize;
            let (x0, x1) = tap_range(wd, dxo);
            if x0 == x1 {
                continue;
            }
            let wv = w[ky * k + kx];
            let mut acc = 0.0;
            for y in y0..y1 {
                let src = ((y as isize + dy) as usize) * wd;
                let lo = (src as isize + x0 as isize + dxo) as usize;
                let hi = (src as isize + x1 as isize + dxo) as usize;
                let g = &dout[y * wd + x0..y * wd + x1];
                if dw.is_some() {
                    acc += g.iter().zip(&x[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dx) = dx.as_deref_mut() {
                    for (d, gv) in dx[lo..hi].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                dw[ky * k + kx] += acc;
            }
        }
    }
}

/// For each flat index of `a_shape`, the flat index into a broadcast operand
/// whose extents are either equal to `a_shape`'s or 1.
pub(crate) fn broadcast_index(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { s };
        s *= b_shape[d];
    }
    let numel: usize = a_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut bi = 0usize;
    for _ in 0..numel {
        out.push(bi);
        for d in (0..rank).rev() {
            counter[d] += 1;
            bi += b_strides[d];
            if counter[d] < a_shape[d] {
                break;
            }
            bi -= b_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

/// Calls `f(i, j)` for every flat index `i` of `a_shape` with the matching
/// flat index `j` of a broadcast operand of shape `b_shape`.
#[inline]
pub(crate) fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    if a_shape.len() != 4 {
        for (i, j) in broadcast_index(a_shape, b_shape).into_iter().enumerate() {
            f(i, j);
        }
        return;
    }
    let mut st = [0usize; 4];
    let mut s = 1;
    for d in (0..4).rev() {
        st[d] = if b_shape[d] == 1 { 0 } else { s };
        s *= b_shape[d];
    }
    let mut i = 0;
    for n in 0..a_shape[0] {
        for c in 0..a_shape[1] {
            let base = n * st[0] + c * st[1];
            for y in 0..a_shape[2] {
                let row = base + y * st[2];
                for x in 0..a_shape[3] {
                    f(i, row + x * st[3]);
                    i += 1;
                }
            }
        }
    }
}

use super::Real;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        k: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let [n, c_in, h, w] = *input else {
            return None;
        };
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.k * self.k * self.c_in
    }

    fn plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate for an output coordinate and kernel offset.
    #[inline]
    fn src(&self, out: usize, offset: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + offset) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds one sample into a `(k*k*c_in) x (h_out*w_out)` matrix whose row
/// order matches the `(k, k, c_in, c_out)` kernel layout.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.plane();
    for kh in 0..g.k {
        for kw in 0..g.k {
            for c in 0..g.c_in {
                let row = ((kh * g.k + kw) * g.c_in + c) * plane;
                let chan = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for oy in 0..g.h_out {
                    let dst = &mut col[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                    match g.src(oy, kh, g.h) {
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kw, g.w) {
                                    Some(ix) => chan[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                        None => dst.iter_mut().for_each(|d| *d = T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.plane();
    for kh in 0..g.k {
        for kw in 0..g.k {
            for c in 0..g.c_in {
                let row = ((kh * g.k + kw) * g.c_in + c) * plane;
                let chan = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, kh, g.h) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kw, g.w) {
                            chan[iy * g.w + ix] = chan[iy * g.w + ix] + col[row + oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, plane) = (g.rows(), g.plane());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = vec![T::zero(); rows * plane];
    for s in 0..g.n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
        T::gemm(
            g.c_out,
            rows,
            plane,
            weight,
            (1, g.c_out as isize),
            &col,
            (plane as isize, 1),
            T::zero(),
            &mut out[s * out_len..(s + 1) * out_len],
            (plane as isize, 1),
        );
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, plane) = (g.rows(), g.plane());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); rows * g.c_out]);
    let mut col = vec![T::zero(); rows * plane];
    for s in 0..g.n {
        let dy_s = &dy[s * out_len..(s + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut col);
            T::gemm(
                rows,
                plane,
                g.c_out,
                &col,
                (plane as isize, 1),
                dy_s,
                (1, plane as isize),
                T::one(),
                dw,
                (g.c_out as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                rows,
                g.c_out,
                plane,
                weight,
                (g.c_out as isize, 1),
                dy_s,
                (plane as isize, 1),
                T::zero(),
                &mut col,
                (plane as isize, 1),
            );
            col2im_add(&col, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Depthwise convolution; kernel layout `(k, k, 1, c)`.
pub(crate) fn depthwise_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let c = g.c_in;
    let mut out = vec![T::zero(); g.n * c * g.plane()];
    for s in 0..g.n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * g.h * g.w..(s * c + ch + 1) * g.h * g.w];
            let dst = &mut out[(s * c + ch) * g.plane()..(s * c + ch + 1) * g.plane()];
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = T::zero();
                    for kh in 0..g.k {
                        let Some(iy) = g.src(oy, kh, g.h) else {
                            continue;
                        };
                        for kw in 0..g.k {
                            if let Some(ix) = g.src(ox, kw, g.w) {
                                acc = acc + src[iy * g.w + ix] * weight[(kh * g.k + kw) * c + ch];
                            }
                        }
                    }
                    dst[oy * g.w_out + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let c = g.c_in;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    for s in 0..g.n {
        for ch in 0..c {
            let base_in = (s * c + ch) * g.h * g.w;
            let base_out = (s * c + ch) * g.plane();
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let gout = dy[base_out + oy * g.w_out + ox];
                    for kh in 0..g.k {
                        let Some(iy) = g.src(oy, kh, g.h) else {
                            continue;
                        };
                        for kw in 0..g.k {
                            let Some(ix) = g.src(ox, kw, g.w) else {
                                continue;
                            };
                            let widx = (kh * g.k + kw) * c + ch;
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] = dw[widx] + gout * x[base_in + iy * g.w + ix];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let i = base_in + iy * g.w + ix;
                                dx[i] = dx[i] + gout * weight[widx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

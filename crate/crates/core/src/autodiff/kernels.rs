//! Raw forward/backward kernels for the spatial operations.
//!
//! Convolutions are 3x3 with one pixel of zero padding, lowered to GEMM via
//! im2col. Samples are grouped into chunks so that small feature maps still
//! produce reasonably wide matrices.

use crate::tensor::Tensor;

const KSIZE: usize = 3;
const KAREA: usize = KSIZE * KSIZE;
/// Target number of GEMM columns per im2col chunk.
const CHUNK_COLUMNS: usize = 2048;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn hout(&self) -> usize {
        self.h / self.stride
    }
    pub fn wout(&self) -> usize {
        self.w / self.stride
    }
    fn positions(&self) -> usize {
        self.hout() * self.wout()
    }
    fn k(&self) -> usize {
        self.cin * KAREA
    }
    fn chunk(&self) -> usize {
        CHUNK_COLUMNS.div_ceil(self.positions()).clamp(1, self.n)
    }
}

/// Fills `cols` (`[K, nb * P]`, row-major) with the patches of samples
/// `n0..n0 + nb`.
fn im2col(x: &[f32], g: &ConvGeom, n0: usize, nb: usize, cols: &mut [f32]) {
    let (h, w, s) = (g.h, g.w, g.stride);
    let (ho, wo) = (g.hout(), g.wout());
    let p = ho * wo;
    let ncols = nb * p;
    let plane = h * w;
    for ci in 0..g.cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KAREA + ky * KSIZE + kx) * ncols;
                for b in 0..nb {
                    let src = &x[((n0 + b) * g.cin + ci) * plane..][..plane];
                    let dst = &mut cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            // ix = ox + kx - 1
                            match kx {
                                0 => {
                                    drow[0] = 0.0;
                                    drow[1..].copy_from_slice(&srow[..w - 1]);
                                }
                                1 => drow.copy_from_slice(srow),
                                _ => {
                                    drow[..w - 1].copy_from_slice(&srow[1..]);
                                    drow[w - 1] = 0.0;
                                }
                            }
                        } else {
                            let (ox0, ox1) = valid_columns(kx, s, w, wo);
                            drow[..ox0].fill(0.0);
                            drow[ox1..].fill(0.0);
                            let ix0 = ox0 * s + kx - 1;
                            for (d, &v) in drow[ox0..ox1].iter_mut().zip(srow[ix0..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox0..ox1` whose tap `kx` lands inside a row of width `w`.
fn valid_columns(kx: usize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    // ix = ox * s + kx - 1 must lie in 0..w.
    let ox0 = usize::from(kx == 0);
    let ox1 = ((w + 1 - kx).div_ceil(s)).min(wo);
    (ox0, ox1)
}

/// Scatter-adds `cols` back onto the input gradient (adjoint of [`im2col`]).
fn col2im(cols: &[f32], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [f32]) {
    let (h, w, s) = (g.h, g.w, g.stride);
    let (ho, wo) = (g.hout(), g.wout());
    let p = ho * wo;
    let ncols = nb * p;
    let plane = h * w;
    for ci in 0..g.cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KAREA + ky * KSIZE + kx) * ncols;
                for b in 0..nb {
                    let dst = &mut dx[((n0 + b) * g.cin + ci) * plane..][..plane];
                    let src = &cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        let (ox0, ox1) = valid_columns(kx, s, w, wo);
                        let ix0 = ox0 * s + kx - 1;
                        for (d, &v) in drow[ix0..].iter_mut().step_by(s).zip(&srow[ox0..ox1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every element the kernel touches and
    // the three slices are distinct borrows.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Stride-1 convolution with few output maps as shifted row updates.
fn conv2d_forward_direct(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (h, wd) = (g.h, g.w);
    let plane = h * wd;
    let mut out = vec![0.0f32; g.n * g.cout * plane];
    for n in 0..g.n {
        for co in 0..g.cout {
            let oplane = &mut out[(n * g.cout + co) * plane..][..plane];
            oplane.fill(bias[co]);
            for ci in 0..g.cin {
                let xplane = &x[(n * g.cin + ci) * plane..][..plane];
                for ky in 0..KSIZE {
                    for kx in 0..KSIZE {
                        let wv = w[(co * g.cin + ci) * KAREA + ky * KSIZE + kx];
                        let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        let (x0, x1) = (1usize.saturating_sub(kx), (wd + 1 - kx).min(wd));
                        for y in y0..y1 {
                            let xs = (y + ky - 1) * wd + x0 + kx - 1;
                            let src = &xplane[xs..xs + (x1 - x0)];
                            for (o, &v) in oplane[y * wd + x0..y * wd + x1].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: &ConvGeom) -> Tensor {
    if g.stride == 1 && g.cout < DIRECT_MAX_COUT {
        let out = conv2d_forward_direct(x.data(), weight.data(), bias.data(), g);
        return Tensor::new(vec![g.n, g.cout, g.h, g.w], out).expect("conv output shape");
    }
    let p = g.positions();
    let k = g.k();
    let mut out = vec![0.0f32; g.n * g.cout * p];
    let chunk = g.chunk();
    let mut cols = vec![0.0f32; k * chunk * p];
    let mut tmp = vec![0.0f32; if chunk > 1 { g.cout * chunk * p } else { 0 }];
    let wdata = weight.data();
    let bdata = bias.data();
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let ncols = nb * p;
        let cols = &mut cols[..k * ncols];
        im2col(x.data(), g, n0, nb, cols);
        if nb == 1 {
            let dst = &mut out[n0 * g.cout * p..(n0 + 1) * g.cout * p];
            gemm(g.cout, k, p, wdata, k, 1, cols, p, 1, 0.0, dst, p, 1);
        } else {
            let tmp = &mut tmp[..g.cout * ncols];
            gemm(g.cout, k, ncols, wdata, k, 1, cols, ncols, 1, 0.0, tmp, ncols, 1);
            for b in 0..nb {
                for co in 0..g.cout {
                    let src = &tmp[co * ncols + b * p..co * ncols + (b + 1) * p];
                    let at = ((n0 + b) * g.cout + co) * p;
                    out[at..at + p].copy_from_slice(src);
                }
            }
        }
        n0 += nb;
    }
    for (idx, vals) in out.chunks_exact_mut(p).enumerate() {
        let bv = bdata[idx % g.cout];
        for v in vals {
            *v += bv;
        }
    }
    Tensor::new(vec![g.n, g.cout, g.hout(), g.wout()], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Below this many output maps, stride-1 convolutions skip im2col + GEMM.
const DIRECT_MAX_COUT: usize = 8;

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Weight gradient of a stride-1 convolution as shifted row correlations.
fn weight_grad_direct(x: &[f32], go: &[f32], g: &ConvGeom, dw: &mut [f32]) {
    let (h, w) = (g.h, g.w);
    let plane = h * w;
    for n in 0..g.n {
        for co in 0..g.cout {
            let gplane = &go[(n * g.cout + co) * plane..][..plane];
            for ci in 0..g.cin {
                let xplane = &x[(n * g.cin + ci) * plane..][..plane];
                for ky in 0..KSIZE {
                    for kx in 0..KSIZE {
                        // Output (y, x) reads input (y + ky - 1, x + kx - 1).
                        let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                        let mut s = 0.0f32;
                        for y in y0..y1 {
                            let grow = &gplane[y * w + x0..y * w + x1];
                            let xs = (y + ky - 1) * w + x0 + kx - 1;
                            s += dot(grow, &xplane[xs..xs + (x1 - x0)]);
                        }
                        dw[(co * g.cin + ci) * KAREA + ky * KSIZE + kx] += s;
                    }
                }
            }
        }
    }
}

/// `[cout, cin, 3, 3]` to `[cin, cout, 3, 3]` with both spatial axes reversed.
fn flip_transpose(w: &[f32], g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0f32; w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..KAREA {
                out[(ci * g.cout + co) * KAREA + KAREA - 1 - t] = w[(co * g.cin + ci) * KAREA + t];
            }
        }
    }
    Tensor::new(vec![g.cin, g.cout, KSIZE, KSIZE], out).expect("flipped kernel shape")
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let [need_input, need_weight, need_bias] = need;
    let p = g.positions();
    let k = g.k();
    let chunk = g.chunk();
    let go = grad_out.data();
    let wdata = weight.data();

    let dbias = need_bias.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for (idx, plane) in go.chunks_exact(p).enumerate() {
            db[idx % g.cout] += plane.iter().sum::<f32>();
        }
        db
    });
    let mut dw = need_weight.then(|| vec![0.0f32; g.cout * k]);
    let mut dx = need_input.then(|| vec![0.0f32; x.numel()]);
    // Thin outputs leave most of a GEMM micro-kernel idle; correlating rows
    // directly also skips the large im2col buffer.
    let direct_dw = g.stride == 1 && g.cout < DIRECT_MAX_COUT;
    if let Some(dw) = dw.as_mut().filter(|_| direct_dw) {
        weight_grad_direct(x.data(), go, g, dw);
    }

    if (need_input && g.stride > 1) || (need_weight && !direct_dw) {
        let mut cols = vec![0.0f32; k * chunk * p];
        let mut gathered = vec![0.0f32; if chunk > 1 { g.cout * chunk * p } else { 0 }];
        let mut n0 = 0;
        while n0 < g.n {
            let nb = chunk.min(g.n - n0);
            let ncols = nb * p;
            let dout: &[f32] = if nb == 1 {
                &go[n0 * g.cout * p..(n0 + 1) * g.cout * p]
            } else {
                let gat = &mut gathered[..g.cout * ncols];
                for b in 0..nb {
                    for co in 0..g.cout {
                        let at = ((n0 + b) * g.cout + co) * p;
                        gat[co * ncols + b * p..co * ncols + (b + 1) * p]
                            .copy_from_slice(&go[at..at + p]);
                    }
                }
                gat
            };
            let cols = &mut cols[..k * ncols];
            if let Some(dw) = dw.as_mut().filter(|_| !direct_dw) {
                im2col(x.data(), g, n0, nb, cols);
                // dW[cout, K] += dout[cout, ncols] * cols^T[ncols, K]
                gemm(g.cout, ncols, k, dout, ncols, 1, cols, 1, ncols, 1.0, dw, k, 1);
            }
            if let Some(dx) = dx.as_mut().filter(|_| g.stride > 1) {
                // dcols[K, ncols] = W^T[K, cout] * dout[cout, ncols]
                gemm(k, g.cout, ncols, wdata, 1, k, dout, ncols, 1, 0.0, cols, ncols, 1);
                col2im(cols, g, n0, nb, dx);
            }
            n0 += nb;
        }
    }

    if g.stride == 1 {
        // A stride-1 "same" convolution is transposed by convolving the
        // output gradient with the flipped, channel-swapped kernel. That
        // keeps the GEMM wide when cout is small.
        dx = dx.map(|_| {
            let flipped = flip_transpose(wdata, g);
            let zero = Tensor::zeros(&[g.cin]);
            let tg = ConvGeom {
                cin: g.cout,
                cout: g.cin,
                ..*g
            };
            conv2d_forward(grad_out, &flipped, &zero, &tg).into_data()
        });
    }

    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        bias: dbias.map(|d| Tensor::new(vec![g.cout], d).expect("db shape")),
    }
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; nc * h2 * w2];
    let src = x.data();
    for plane in 0..nc {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h {
            let srow = &sp[y * w..(y + 1) * w];
            let (top, bottom) = dp[2 * y * w2..(2 * y + 2) * w2].split_at_mut(w2);
            for (x, &v) in srow.iter().enumerate() {
                top[2 * x] = v;
                top[2 * x + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    Tensor::new(vec![s[0], s[1], h2, w2], out).expect("upsample shape")
}

pub(crate) fn upsample2x_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (nc, h, w) = (
        input_shape[0] * input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let w2 = 2 * w;
    let go = grad_out.data();
    let mut dx = vec![0.0f32; nc * h * w];
    for plane in 0..nc {
        let gp = &go[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let r0 = &gp[2 * y * w2..(2 * y + 1) * w2];
            let r1 = &gp[(2 * y + 1) * w2..(2 * y + 2) * w2];
            for x in 0..w {
                dp[y * w + x] = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx).expect("upsample grad shape")
}

/// Nearest 2x upsampling followed by a stride-1 3x3 convolution, computed
/// on the low-resolution input. `h` and `w` are the sizes before upsampling.
///
/// Output pixel `(2i + py, 2j + px)` only ever reads source rows `i + py - 1`
/// and `i + py` (and likewise for columns), so each of the four output
/// phases is a 2x2 convolution of the source with summed kernel taps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct UpConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
}

/// `TAP[p][k]`: which of the two source taps kernel index `k` lands on in
/// output phase `p`.
const TAP: [[usize; 3]; 2] = [[0, 1, 1], [0, 0, 1]];
const PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

impl UpConvGeom {
    fn positions(&self) -> usize {
        self.h * self.w
    }
    fn k(&self) -> usize {
        self.cin * 4
    }
    fn chunk(&self) -> usize {
        CHUNK_COLUMNS.div_ceil(self.positions()).clamp(1, self.n)
    }
}

/// Effective `[cout, cin * 4]` kernel of phase `(py, px)`.
fn phase_weight(w: &[f32], g: &UpConvGeom, (py, px): (usize, usize)) -> Vec<f32> {
    let mut out = vec![0.0f32; g.cout * g.k()];
    for oc in 0..g.cout * g.cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                out[oc * 4 + TAP[py][ky] * 2 + TAP[px][kx]] += w[oc * KAREA + ky * KSIZE + kx];
            }
        }
    }
    out
}

/// Adjoint of [`phase_weight`], accumulated into `dw`.
fn fold_phase_weight(dweff: &[f32], g: &UpConvGeom, (py, px): (usize, usize), dw: &mut [f32]) {
    for oc in 0..g.cout * g.cin {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                dw[oc * KAREA + ky * KSIZE + kx] += dweff[oc * 4 + TAP[py][ky] * 2 + TAP[px][kx]];
            }
        }
    }
}

/// Source offset of tap `t` in phase `p`.
fn tap_offset(p: usize, t: usize) -> isize {
    (p + t) as isize - 1
}

fn im2col_phase(x: &[f32], g: &UpConvGeom, n0: usize, nb: usize, phase: (usize, usize), cols: &mut [f32]) {
    let (h, w) = (g.h, g.w);
    let p = g.positions();
    let ncols = nb * p;
    for ci in 0..g.cin {
        for a in 0..2 {
            let dy = tap_offset(phase.0, a);
            for b in 0..2 {
                let dx = tap_offset(phase.1, b);
                let row = (ci * 4 + a * 2 + b) * ncols;
                for s in 0..nb {
                    let src = &x[((n0 + s) * g.cin + ci) * p..][..p];
                    let dst = &mut cols[row + s * p..row + (s + 1) * p];
                    for i in 0..h {
                        let iy = i as isize + dy;
                        let drow = &mut dst[i * w..(i + 1) * w];
                        if iy < 0 || iy >= h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        match dx {
                            -1 => {
                                drow[0] = 0.0;
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            0 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_phase(cols: &[f32], g: &UpConvGeom, n0: usize, nb: usize, phase: (usize, usize), dx_out: &mut [f32]) {
    let (h, w) = (g.h, g.w);
    let p = g.positions();
    let ncols = nb * p;
    for ci in 0..g.cin {
        for a in 0..2 {
            let dy = tap_offset(phase.0, a);
            for b in 0..2 {
                let dx = tap_offset(phase.1, b);
                let row = (ci * 4 + a * 2 + b) * ncols;
                for s in 0..nb {
                    let dst = &mut dx_out[((n0 + s) * g.cin + ci) * p..][..p];
                    let src = &cols[row + s * p..row + (s + 1) * p];
                    for i in 0..h {
                        let iy = i as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[i * w..(i + 1) * w];
                        match dx {
                            -1 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, v)| *d += v),
                            0 => drow.iter_mut().zip(srow).for_each(|(d, v)| *d += v),
                            _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, v)| *d += v),
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn upconv_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, g: &UpConvGeom) -> Tensor {
    let (h, w) = (g.h, g.w);
    let p = g.positions();
    let k = g.k();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; g.n * g.cout * h2 * w2];
    let chunk = g.chunk();
    let mut cols = vec![0.0f32; k * chunk * p];
    let mut tmp = vec![0.0f32; g.cout * chunk * p];
    for phase in PHASES {
        let weff = phase_weight(weight.data(), g, phase);
        let mut n0 = 0;
        while n0 < g.n {
            let nb = chunk.min(g.n - n0);
            let ncols = nb * p;
            let cols = &mut cols[..k * ncols];
            im2col_phase(x.data(), g, n0, nb, phase, cols);
            let tmp = &mut tmp[..g.cout * ncols];
            gemm(g.cout, k, ncols, &weff, k, 1, cols, ncols, 1, 0.0, tmp, ncols, 1);
            for s in 0..nb {
                for co in 0..g.cout {
                    let bv = bias.data()[co];
                    let src = &tmp[co * ncols + s * p..co * ncols + (s + 1) * p];
                    let dst = &mut out[((n0 + s) * g.cout + co) * h2 * w2..][..h2 * w2];
                    for i in 0..h {
                        let drow = &mut dst[(2 * i + phase.0) * w2..(2 * i + phase.0 + 1) * w2];
                        for j in 0..w {
                            drow[2 * j + phase.1] = src[i * w + j] + bv;
                        }
                    }
                }
            }
            n0 += nb;
        }
    }
    Tensor::new(vec![g.n, g.cout, h2, w2], out).expect("upconv output shape")
}

pub(crate) fn upconv_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: &UpConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let [need_input, need_weight, need_bias] = need;
    let (h, w) = (g.h, g.w);
    let p = g.positions();
    let k = g.k();
    let (h2, w2) = (2 * h, 2 * w);
    let go = grad_out.data();
    let chunk = g.chunk();

    let dbias = need_bias.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for (idx, plane) in go.chunks_exact(h2 * w2).enumerate() {
            db[idx % g.cout] += plane.iter().sum::<f32>();
        }
        db
    });
    let mut dw = need_weight.then(|| vec![0.0f32; g.cout * g.cin * KAREA]);
    let mut dx = need_input.then(|| vec![0.0f32; x.numel()]);

    if need_input || need_weight {
        let mut cols = vec![0.0f32; k * chunk * p];
        let mut dout = vec![0.0f32; g.cout * chunk * p];
        for phase in PHASES {
            let weff = need_input.then(|| phase_weight(weight.data(), g, phase));
            let mut dweff = need_weight.then(|| vec![0.0f32; g.cout * k]);
            let mut n0 = 0;
            while n0 < g.n {
                let nb = chunk.min(g.n - n0);
                let ncols = nb * p;
                let dout = &mut dout[..g.cout * ncols];
                for s in 0..nb {
                    for co in 0..g.cout {
                        let src = &go[((n0 + s) * g.cout + co) * h2 * w2..][..h2 * w2];
                        let dst = &mut dout[co * ncols + s * p..co * ncols + (s + 1) * p];
                        for i in 0..h {
                            let srow = &src[(2 * i + phase.0) * w2..(2 * i + phase.0 + 1) * w2];
                            for j in 0..w {
                                dst[i * w + j] = srow[2 * j + phase.1];
                            }
                        }
                    }
                }
                let cols = &mut cols[..k * ncols];
                if let Some(dweff) = dweff.as_mut() {
                    im2col_phase(x.data(), g, n0, nb, phase, cols);
                    gemm(g.cout, ncols, k, dout, ncols, 1, cols, 1, ncols, 1.0, dweff, k, 1);
                }
                if let (Some(dx), Some(weff)) = (dx.as_mut(), weff.as_ref()) {
                    gemm(k, g.cout, ncols, weff, 1, k, dout, ncols, 1, 0.0, cols, ncols, 1);
                    col2im_phase(cols, g, n0, nb, phase, dx);
                }
                n0 += nb;
            }
            if let (Some(dw), Some(dweff)) = (dw.as_mut(), dweff.as_ref()) {
                fold_phase_weight(dweff, g, phase, dw);
            }
        }
    }

    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        bias: dbias.map(|d| Tensor::new(vec![g.cout], d).expect("db shape")),
    }
}

//! 3D convolution kernels on raw buffers.
//!
//! Dense convolutions (`groups == 1`) go through im2col + GEMM, processed in
//! chunks of output depth planes so the column buffer stays bounded.
//! Depthwise convolutions (`groups == channels`) use direct loops.

use crate::scalar::Scalar;

/// Stride and (possibly asymmetric) zero padding of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad_lo: [padding; 3],
            pad_hi: [padding; 3],
            groups: 1,
        }
    }

    pub fn asymmetric(stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad_lo: [pad_lo; 3],
            pad_hi: [pad_hi; 3],
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output spatial size, or `None` when the kernel does not fit.
    pub fn output_size(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + self.pad_lo[a] + self.pad_hi[a];
            if padded < kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub lo: [usize; 3],
    pub groups: usize,
}

const CHUNK_ELEMS: usize = 1 << 22;

impl Geom {
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout && self.groups > 1
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
            && self.stride == [1, 1, 1]
            && self.lo == [0; 3]
            && self.input == self.output
    }
    fn check_groups(&self) {
        assert!(
            self.groups == 1 || self.is_depthwise(),
            "only dense (groups=1) or depthwise convolutions are supported"
        );
    }
    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }
    fn chunk_planes(&self) -> usize {
        let per_plane = self.cin * self.kvol() * self.plane();
        (CHUNK_ELEMS / per_plane.max(1)).clamp(1, self.output[0].max(1))
    }
}

/// Output indices `o` in `[a, b)` for which `o * s + k - lo` lies in `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, s: usize, k: usize, lo: usize) -> (usize, usize) {
    let off = k as isize - lo as isize;
    let s_i = s as isize;
    let a = if off >= 0 {
        0
    } else {
        ((-off) + s_i - 1) / s_i
    };
    let top = n as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let b = ((top / s_i) + 1).min(out as isize);
    if a >= b {
        (0, 0)
    } else {
        (a as usize, b as usize)
    }
}

fn im2col<T: Scalar>(g: &Geom, x: &[T], oz0: usize, oz1: usize, cols: &mut [T]) {
    let [_, hi, wi] = g.input;
    let [_, ho, wo] = g.output;
    let [kd, kh, kw] = g.kernel;
    let pc = (oz1 - oz0) * ho * wo;
    let in_vol = g.in_vol();
    for ci in 0..g.cin {
        let xc = &x[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..kd {
            let (za, zb) = valid_range(g.output[0], g.input[0], g.stride[0], kz, g.lo[0]);
            for ky in 0..kh {
                let (ya, yb) = valid_range(ho, hi, g.stride[1], ky, g.lo[1]);
                for kx in 0..kw {
                    let (xa, xb) = valid_range(wo, wi, g.stride[2], kx, g.lo[2]);
                    let r = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let row = &mut cols[r * pc..(r + 1) * pc];
                    for oz in oz0..oz1 {
                        let prow = &mut row[(oz - oz0) * ho * wo..(oz - oz0 + 1) * ho * wo];
                        if oz < za || oz >= zb {
                            prow.fill(T::zero());
                            continue;
                        }
                        let iz = oz * g.stride[0] + kz - g.lo[0];
                        for oy in 0..ho {
                            let orow = &mut prow[oy * wo..(oy + 1) * wo];
                            if oy < ya || oy >= yb {
                                orow.fill(T::zero());
                                continue;
                            }
                            let iy = oy * g.stride[1] + ky - g.lo[1];
                            let base = (iz * hi + iy) * wi;
                            orow[..xa].fill(T::zero());
                            orow[xb..].fill(T::zero());
                            let sx = g.stride[2];
                            for ox in xa..xb {
                                orow[ox] = xc[base + ox * sx + kx - g.lo[2]];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geom, cols: &[T], oz0: usize, oz1: usize, dx: &mut [T]) {
    let [_, hi, wi] = g.input;
    let [_, ho, wo] = g.output;
    let [kd, kh, kw] = g.kernel;
    let pc = (oz1 - oz0) * ho * wo;
    let in_vol = g.in_vol();
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * in_vol..(ci + 1) * in_vol];
        for kz in 0..kd {
            let (za, zb) = valid_range(g.output[0], g.input[0], g.stride[0], kz, g.lo[0]);
            for ky in 0..kh {
                let (ya, yb) = valid_range(ho, hi, g.stride[1], ky, g.lo[1]);
                for kx in 0..kw {
                    let (xa, xb) = valid_range(wo, wi, g.stride[2], kx, g.lo[2]);
                    let r = ((ci * kd + kz) * kh + ky) * kw + kx;
                    let row = &cols[r * pc..(r + 1) * pc];
                    for oz in oz0.max(za)..oz1.min(zb) {
                        let iz = oz * g.stride[0] + kz - g.lo[0];
                        for oy in ya..yb {
                            let iy = oy * g.stride[1] + ky - g.lo[1];
                            let base = (iz * hi + iy) * wi;
                            let orow = &row[((oz - oz0) * ho + oy) * wo..];
                            let sx = g.stride[2];
                            for ox in xa..xb {
                                dxc[base + ox * sx + kx - g.lo[2]] += orow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y += conv(x, w)`; `y` must be pre-zeroed (or hold a bias).
pub(crate) fn forward<T: Scalar>(g: &Geom, x: &[T], w: &[T], y: &mut [T]) {
    g.check_groups();
    if g.is_depthwise() {
        return depthwise_forward(g, x, w, y);
    }
    let (in_vol, out_vol, k) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let plane = g.plane();
    let step = g.chunk_planes();
    let mut cols = Vec::new();
    for n in 0..g.batch {
        let xn = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let yn = &mut y[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        if g.is_pointwise() {
            T::gemm(
                g.cout,
                k,
                out_vol,
                T::one(),
                w,
                (k as isize, 1),
                xn,
                (out_vol as isize, 1),
                T::one(),
                yn,
                (out_vol as isize, 1),
            );
            continue;
        }
        let mut oz0 = 0;
        while oz0 < g.output[0] {
            let oz1 = (oz0 + step).min(g.output[0]);
            let pc = (oz1 - oz0) * plane;
            cols.resize(k * pc, T::zero());
            im2col(g, xn, oz0, oz1, &mut cols);
            T::gemm(
                g.cout,
                k,
                pc,
                T::one(),
                w,
                (k as isize, 1),
                &cols,
                (pc as isize, 1),
                T::one(),
                &mut yn[oz0 * plane..],
                (out_vol as isize, 1),
            );
            oz0 = oz1;
        }
    }
}

/// `dx += conv^T(dy, w)`.
pub(crate) fn backward_input<T: Scalar>(g: &Geom, dy: &[T], w: &[T], dx: &mut [T]) {
    g.check_groups();
    if g.is_depthwise() {
        return depthwise_backward_input(g, dy, w, dx);
    }
    let (in_vol, out_vol, k) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let plane = g.plane();
    let step = g.chunk_planes();
    let mut cols = Vec::new();
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        let dxn = &mut dx[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        if g.is_pointwise() {
            T::gemm(
                k,
                g.cout,
                out_vol,
                T::one(),
                w,
                (1, k as isize),
                dyn_,
                (out_vol as isize, 1),
                T::one(),
                dxn,
                (out_vol as isize, 1),
            );
            continue;
        }
        let mut oz0 = 0;
        while oz0 < g.output[0] {
            let oz1 = (oz0 + step).min(g.output[0]);
            let pc = (oz1 - oz0) * plane;
            cols.resize(k * pc, T::zero());
            T::gemm(
                k,
                g.cout,
                pc,
                T::one(),
                w,
                (1, k as isize),
                &dyn_[oz0 * plane..],
                (out_vol as isize, 1),
                T::zero(),
                &mut cols,
                (pc as isize, 1),
            );
            col2im(g, &cols, oz0, oz1, dxn);
            oz0 = oz1;
        }
    }
}

/// `dw += dconv/dw` contracted with `dy`.
pub(crate) fn backward_weight<T: Scalar>(g: &Geom, x: &[T], dy: &[T], dw: &mut [T]) {
    g.check_groups();
    if g.is_depthwise() {
        return depthwise_weight(g, x, dy, dw);
    }
    let (in_vol, out_vol, k) = (g.in_vol(), g.out_vol(), g.cin * g.kvol());
    let plane = g.plane();
    let step = g.chunk_planes();
    let mut cols = Vec::new();
    for n in 0..g.batch {
        let xn = &x[n * g.cin * in_vol..(n + 1) * g.cin * in_vol];
        let dyn_ = &dy[n * g.cout * out_vol..(n + 1) * g.cout * out_vol];
        if g.is_pointwise() {
            T::gemm(
                g.cout,
                out_vol,
                k,
                T::one(),
                dyn_,
                (out_vol as isize, 1),
                xn,
                (1, out_vol as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
            continue;
        }
        let mut oz0 = 0;
        while oz0 < g.output[0] {
            let oz1 = (oz0 + step).min(g.output[0]);
            let pc = (oz1 - oz0) * plane;
            cols.resize(k * pc, T::zero());
            im2col(g, xn, oz0, oz1, &mut cols);
            T::gemm(
                g.cout,
                pc,
                k,
                T::one(),
                &dyn_[oz0 * plane..],
                (out_vol as isize, 1),
                &cols,
                (1, pc as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
            oz0 = oz1;
        }
    }
}

/// Calls `f(weight, in_start, out_start, len)` for every run of output voxels
/// along W touched by one kernel tap of a depthwise convolution.
fn for_each_tap<T: Scalar>(g: &Geom, w: &[T], mut f: impl FnMut(T, usize, usize, usize)) {
    let (in_vol, out_vol, kvol) = (g.in_vol(), g.out_vol(), g.kvol());
    let [_, hi, wi] = g.input;
    let [do_, ho, wo] = g.output;
    let [kd, kh, kw] = g.kernel;
    let c = g.cin;
    for n in 0..g.batch {
        for ch in 0..c {
            let xi = (n * c + ch) * in_vol;
            let yo = (n * c + ch) * out_vol;
            for kz in 0..kd {
                let (za, zb) = valid_range(do_, g.input[0], g.stride[0], kz, g.lo[0]);
                for ky in 0..kh {
                    let (ya, yb) = valid_range(ho, hi, g.stride[1], ky, g.lo[1]);
                    for kx in 0..kw {
                        let (xa, xb) = valid_range(wo, wi, g.stride[2], kx, g.lo[2]);
                        if xa >= xb {
                            continue;
                        }
                        let wv = w[ch * kvol + (kz * kh + ky) * kw + kx];
                        for oz in za..zb {
                            let iz = oz * g.stride[0] + kz - g.lo[0];
                            for oy in ya..yb {
                                let iy = oy * g.stride[1] + ky - g.lo[1];
                                let ib = xi + (iz * hi + iy) * wi + kx + xa * g.stride[2] - g.lo[2];
                                let ob = yo + (oz * ho + oy) * wo + xa;
                                f(wv, ib, ob, xb - xa);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &Geom, x: &[T], w: &[T], y: &mut [T]) {
    let sx = g.stride[2];
    for_each_tap(g, w, |wv, ib, ob, len| {
        let dst = &mut y[ob..ob + len];
        if sx == 1 {
            for (d, &s) in dst.iter_mut().zip(&x[ib..ib + len]) {
                *d += wv * s;
            }
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += wv * x[ib + j * sx];
            }
        }
    });
}

fn depthwise_backward_input<T: Scalar>(g: &Geom, dy: &[T], w: &[T], dx: &mut [T]) {
    let sx = g.stride[2];
    for_each_tap(g, w, |wv, ib, ob, len| {
        let src = &dy[ob..ob + len];
        if sx == 1 {
            for (d, &s) in dx[ib..ib + len].iter_mut().zip(src) {
                *d += wv * s;
            }
        } else {
            for (j, &s) in src.iter().enumerate() {
                dx[ib + j * sx] += wv * s;
            }
        }
    });
}

fn depthwise_weight<T: Scalar>(g: &Geom, x: &[T], dy: &[T], dw: &mut [T]) {
    let (in_vol, out_vol, kvol) = (g.in_vol(), g.out_vol(), g.kvol());
    let [_, hi, wi] = g.input;
    let [do_, ho, wo] = g.output;
    let [kd, kh, kw] = g.kernel;
    let c = g.cin;
    for n in 0..g.batch {
        for ch in 0..c {
            let xi = (n * c + ch) * in_vol;
            let yo = (n * c + ch) * out_vol;
            for kz in 0..kd {
                let (za, zb) = valid_range(do_, g.input[0], g.stride[0], kz, g.lo[0]);
                for ky in 0..kh {
                    let (ya, yb) = valid_range(ho, hi, g.stride[1], ky, g.lo[1]);
                    for kx in 0..kw {
                        let (xa, xb) = valid_range(wo, wi, g.stride[2], kx, g.lo[2]);
                        if xa >= xb {
                            continue;
                        }
                        let sx = g.stride[2];
                        let mut acc = T::zero();
                        for oz in za..zb {
                            let iz = oz * g.stride[0] + kz - g.lo[0];
                            for oy in ya..yb {
                                let iy = oy * g.stride[1] + ky - g.lo[1];
                                let ib = xi + (iz * hi + iy) * wi + kx + xa * sx - g.lo[2];
                                let ob = yo + (oz * ho + oy) * wo + xa;
                                let len = xb - xa;
                                if sx == 1 {
                                    for (&a, &b) in dy[ob..ob + len].iter().zip(&x[ib..ib + len]) {
                                        acc += a * b;
                                    }
                                } else {
                                    for j in 0..len {
                                        acc += dy[ob + j] * x[ib + j * sx];
                                    }
                                }
                            }
                        }
                        dw[ch * kvol + (kz * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

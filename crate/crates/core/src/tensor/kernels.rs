//! Sequential compute kernels behind the tape primitives.
//!
//! Every kernel walks its loops in a fixed order, so results are bit-identical
//! from run to run. Convolutions are lowered to GEMM through an im2col buffer
//! built in row chunks to bound memory on large volumes.

use super::Element;

/// Stride/padding/group settings of a convolution, per spatial axis
/// `(depth, height, width)`. Two-dimensional convolutions use depth 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn d2(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            groups,
        }
    }

    pub fn d3(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
            groups: 1,
        }
    }
}

/// Geometry of a forward convolution `x[n, cin, input] * w[cout, cin/groups, kernel]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// Elements of im2col scratch built per GEMM call.
const CHUNK_ELEMS: usize = 1 << 21;

impl Geom {
    pub fn in_size(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.output.iter().product()
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the im2col matrix: one per (input channel, kernel tap).
    pub fn kcols(&self) -> usize {
        self.cin_g() * self.kvol()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.kcols()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output rows (depth × height lines) handled per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.kcols() * self.output[2];
        (CHUNK_ELEMS / per_row.max(1)).max(1)
    }

    fn out_rows(&self) -> usize {
        self.output[0] * self.output[1]
    }
}

fn im2col<T: Element>(g: &Geom, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ow = g.output[2];
    let oh = g.output[1];
    let p = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let line = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            *v = if ix >= 0 && (ix as usize) < iw {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geom, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let ow = g.output[2];
    let oh = g.output[1];
    let p = (r1 - r0) * ow;
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for r in r0..r1 {
                        let (oz, oy) = (r / oh, r % oh);
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let line = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                        let dst = &mut xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && (ix as usize) < iw {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_size, out_size) = (g.in_size(), g.out_size());
    let (cin_g, cout_g, kcols) = (g.cin_g(), g.cout_g(), g.kcols());
    let mut y = vec![T::zero(); g.n * g.cout * out_size];
    let mut cols = Vec::new();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[(n * g.cin + grp * cin_g) * in_size..][..cin_g * in_size];
            let wg = &w[grp * cout_g * kcols..][..cout_g * kcols];
            let ybase = (n * g.cout + grp * cout_g) * out_size;
            if g.is_pointwise() {
                T::gemm(
                    cout_g, kcols, out_size, wg, kcols, 1, xg, out_size, 1, T::zero(),
                    &mut y[ybase..], out_size, 1,
                );
                continue;
            }
            let step = g.rows_per_chunk();
            let mut r0 = 0;
            while r0 < g.out_rows() {
                let r1 = (r0 + step).min(g.out_rows());
                let p = (r1 - r0) * g.output[2];
                cols.resize(kcols * p, T::zero());
                im2col(g, xg, r0, r1, &mut cols);
                T::gemm(
                    cout_g, kcols, p, wg, kcols, 1, &cols, p, 1, T::zero(),
                    &mut y[ybase + r0 * g.output[2]..], out_size, 1,
                );
                r0 = r1;
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut y[(n * g.cout + co) * out_size..][..out_size] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward_data<T: Element>(g: &Geom, dy: &[T], w: &[T]) -> Vec<T> {
    let (in_size, out_size) = (g.in_size(), g.out_size());
    let (cin_g, cout_g, kcols) = (g.cin_g(), g.cout_g(), g.kcols());
    let mut dx = vec![T::zero(); g.n * g.cin * in_size];
    let mut dcols = Vec::new();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let wg = &w[grp * cout_g * kcols..][..cout_g * kcols];
            let ybase = (n * g.cout + grp * cout_g) * out_size;
            let dxg = &mut dx[(n * g.cin + grp * cin_g) * in_size..][..cin_g * in_size];
            if g.is_pointwise() {
                T::gemm(
                    kcols, cout_g, out_size, wg, 1, kcols, &dy[ybase..], out_size, 1, T::zero(),
                    dxg, out_size, 1,
                );
                continue;
            }
            let step = g.rows_per_chunk();
            let mut r0 = 0;
            while r0 < g.out_rows() {
                let r1 = (r0 + step).min(g.out_rows());
                let p = (r1 - r0) * g.output[2];
                dcols.resize(kcols * p, T::zero());
                T::gemm(
                    kcols, cout_g, p, wg, 1, kcols, &dy[ybase + r0 * g.output[2]..], out_size, 1,
                    T::zero(), &mut dcols, p, 1,
                );
                col2im(g, &dcols, r0, r1, dxg);
                r0 = r1;
            }
        }
    }
    dx
}

pub(crate) fn conv_backward_weight<T: Element>(g: &Geom, x: &[T], dy: &[T]) -> Vec<T> {
    let (in_size, out_size) = (g.in_size(), g.out_size());
    let (cin_g, cout_g, kcols) = (g.cin_g(), g.cout_g(), g.kcols());
    let mut dw = vec![T::zero(); g.weight_len()];
    let mut cols = Vec::new();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xg = &x[(n * g.cin + grp * cin_g) * in_size..][..cin_g * in_size];
            let ybase = (n * g.cout + grp * cout_g) * out_size;
            let dwg = &mut dw[grp * cout_g * kcols..][..cout_g * kcols];
            if g.is_pointwise() {
                T::gemm(
                    cout_g, out_size, kcols, &dy[ybase..], out_size, 1, xg, 1, out_size, T::one(),
                    dwg, kcols, 1,
                );
                continue;
            }
            let step = g.rows_per_chunk();
            let mut r0 = 0;
            while r0 < g.out_rows() {
                let r1 = (r0 + step).min(g.out_rows());
                let p = (r1 - r0) * g.output[2];
                cols.resize(kcols * p, T::zero());
                im2col(g, xg, r0, r1, &mut cols);
                T::gemm(
                    cout_g, p, kcols, &dy[ybase + r0 * g.output[2]..], out_size, 1, &cols, 1, p,
                    T::one(), dwg, kcols, 1,
                );
                r0 = r1;
            }
        }
    }
    dw
}

pub(crate) fn conv_backward_bias<T: Element>(g: &Geom, dy: &[T]) -> Vec<T> {
    let out_size = g.out_size();
    let mut db = vec![0.0f64; g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            for v in &dy[(n * g.cout + co) * out_size..][..out_size] {
                *acc += v.to_f64().unwrap();
            }
        }
    }
    db.into_iter().map(|v| T::from_f64(v).unwrap()).collect()
}

/// Position along one axis of a trilinear sample with edge clamping.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSample<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
    /// Derivative of the clamped coordinate with respect to the requested one.
    pub live: bool,
}

pub(crate) fn axis_sample<T: Element>(p: T, extent: usize) -> AxisSample<T> {
    let max = T::from_usize(extent - 1).unwrap();
    if extent == 1 {
        return AxisSample { lo: 0, hi: 0, frac: T::zero(), live: false };
    }
    if p <= T::zero() {
        return AxisSample { lo: 0, hi: 0, frac: T::zero(), live: p == T::zero() };
    }
    if p >= max {
        return AxisSample { lo: extent - 1, hi: extent - 1, frac: T::zero(), live: p == max };
    }
    let lo = p.floor().to_usize().unwrap().min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    AxisSample { lo, hi, frac: p - T::from_usize(lo).unwrap(), live: true }
}

/// `a + (b - a)·t`, returning `a` unchanged when `t == 0`.
#[inline]
pub(crate) fn lerp<T: Element>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a + (b - a) * t
    }
}

/// Slope of the linear interpolant along one axis. At the clamped upper
/// edge the one-sided slope of the last cell is used.
#[inline]
fn axis_slope<T: Element>(s: &AxisSample<T>, extent: usize, f: impl Fn(usize) -> T) -> T {
    if !s.live {
        return T::zero();
    }
    if s.lo == s.hi {
        if extent < 2 {
            return T::zero();
        }
        if s.lo == 0 {
            return f(1) - f(0);
        }
        return f(s.lo) - f(s.lo - 1);
    }
    f(s.hi) - f(s.lo)
}

/// Trilinear sample of one channel `vol[d][h][w]` at `(z, y, x)` with edge clamping.
pub(crate) fn trilinear<T: Element>(vol: &[T], ext: [usize; 3], z: T, y: T, x: T) -> T {
    let (sz, sy, sx) = (axis_sample(z, ext[0]), axis_sample(y, ext[1]), axis_sample(x, ext[2]));
    trilinear_at(vol, ext, &sz, &sy, &sx)
}

fn trilinear_at<T: Element>(
    vol: &[T],
    ext: [usize; 3],
    sz: &AxisSample<T>,
    sy: &AxisSample<T>,
    sx: &AxisSample<T>,
) -> T {
    let at = |z: usize, y: usize, x: usize| vol[(z * ext[1] + y) * ext[2] + x];
    let row = |z: usize, y: usize| lerp(at(z, y, sx.lo), at(z, y, sx.hi), sx.frac);
    let plane = |z: usize| lerp(row(z, sy.lo), row(z, sy.hi), sy.frac);
    lerp(plane(sz.lo), plane(sz.hi), sz.frac)
}

/// Warps every channel of `img[c][d][h][w]` by `flow[3][d][h][w]` (dz, dy, dx).
pub(crate) fn warp_forward<T: Element>(img: &[T], flow: &[T], channels: usize, ext: [usize; 3]) -> Vec<T> {
    let vox = ext[0] * ext[1] * ext[2];
    let mut out = vec![T::zero(); channels * vox];
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let v = (z * ext[1] + y) * ext[2] + x;
                let pz = T::from_usize(z).unwrap() + flow[v];
                let py = T::from_usize(y).unwrap() + flow[vox + v];
                let px = T::from_usize(x).unwrap() + flow[2 * vox + v];
                let (sz, sy, sx) = (axis_sample(pz, ext[0]), axis_sample(py, ext[1]), axis_sample(px, ext[2]));
                for c in 0..channels {
                    out[c * vox + v] = trilinear_at(&img[c * vox..(c + 1) * vox], ext, &sz, &sy, &sx);
                }
            }
        }
    }
    out
}

/// Adjoints of [`warp_forward`] with respect to the image and the flow.
pub(crate) fn warp_backward<T: Element>(
    img: &[T],
    flow: &[T],
    dout: &[T],
    channels: usize,
    ext: [usize; 3],
) -> (Vec<T>, Vec<T>) {
    let vox = ext[0] * ext[1] * ext[2];
    let mut dimg = vec![T::zero(); channels * vox];
    let mut dflow = vec![T::zero(); 3 * vox];
    let one = T::one();
    for z in 0..ext[0] {
        for y in 0..ext[1] {
            for x in 0..ext[2] {
                let v = (z * ext[1] + y) * ext[2] + x;
                let pz = T::from_usize(z).unwrap() + flow[v];
                let py = T::from_usize(y).unwrap() + flow[vox + v];
                let px = T::from_usize(x).unwrap() + flow[2 * vox + v];
                let (sz, sy, sx) = (axis_sample(pz, ext[0]), axis_sample(py, ext[1]), axis_sample(px, ext[2]));
                let corners = [
                    (sz.lo, one - sz.frac, sy.lo, one - sy.frac),
                    (sz.lo, one - sz.frac, sy.hi, sy.frac),
                    (sz.hi, sz.frac, sy.lo, one - sy.frac),
                    (sz.hi, sz.frac, sy.hi, sy.frac),
                ];
                for c in 0..channels {
                    let g = dout[c * vox + v];
                    if g == T::zero() {
                        continue;
                    }
                    let chan = &img[c * vox..(c + 1) * vox];
                    let dchan = &mut dimg[c * vox..(c + 1) * vox];
                    for &(cz, wz, cy, wy) in &corners {
                        let base = (cz * ext[1] + cy) * ext[2];
                        let w = g * wz * wy;
                        dchan[base + sx.lo] = dchan[base + sx.lo] + w * (one - sx.frac);
                        dchan[base + sx.hi] = dchan[base + sx.hi] + w * sx.frac;
                    }
                    let at = |zz: usize, yy: usize, xx: usize| chan[(zz * ext[1] + yy) * ext[2] + xx];
                    let gz = axis_slope(&sz, ext[0], |zz| {
                        lerp(lerp(at(zz, sy.lo, sx.lo), at(zz, sy.lo, sx.hi), sx.frac),
                             lerp(at(zz, sy.hi, sx.lo), at(zz, sy.hi, sx.hi), sx.frac), sy.frac)
                    });
                    let gy = axis_slope(&sy, ext[1], |yy| {
                        lerp(lerp(at(sz.lo, yy, sx.lo), at(sz.lo, yy, sx.hi), sx.frac),
                             lerp(at(sz.hi, yy, sx.lo), at(sz.hi, yy, sx.hi), sx.frac), sz.frac)
                    });
                    let gx = axis_slope(&sx, ext[2], |xx| {
                        lerp(lerp(at(sz.lo, sy.lo, xx), at(sz.lo, sy.hi, xx), sy.frac),
                             lerp(at(sz.hi, sy.lo, xx), at(sz.hi, sy.hi, xx), sy.frac), sz.frac)
                    });
                    dflow[v] = dflow[v] + g * gz;
                    dflow[vox + v] = dflow[vox + v] + g * gy;
                    dflow[2 * vox + v] = dflow[2 * vox + v] + g * gx;
                }
            }
        }
    }
    (dimg, dflow)
}

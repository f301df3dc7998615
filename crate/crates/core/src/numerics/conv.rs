//! Grouped, dilated 2-D convolution via im2col and GEMM.
//!
//! Each batch element is processed independently. Weight and bias gradients
//! are formed per element into scratch buffers and reduced in batch order,
//! so the serial and threaded paths produce bitwise-identical results.

use crate::error::{Error, Result};
use crate::numerics::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Stride-1 geometry whose zero padding keeps the spatial extent.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvGeom { kernel, stride: 1, padding: dilation * (kernel - 1) / 2, dilation, groups }
    }

    pub fn out_extent(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    cig: usize,
    cog: usize,
    /// Rows of one group's im2col matrix.
    krows: usize,
}

fn dims(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Dims> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, cig, kh, kw) = w.dims4()?;
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("channels {cin}->{cout} not divisible by {g} groups"),
        ));
    }
    if cig * g != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weight expects {}", cig * g),
        ));
    }
    if kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} vs geometry {}", geom.kernel)));
    }
    let span = geom.dilation * (geom.kernel - 1) + 1;
    if h + 2 * geom.padding < span || wd + 2 * geom.padding < span {
        return Err(Error::shape("conv2d", format!("input {h}x{wd} smaller than kernel span")));
    }
    Ok(Dims {
        n,
        cin,
        h,
        w: wd,
        cout,
        oh: geom.out_extent(h),
        ow: geom.out_extent(wd),
        cig,
        cog: cout / g,
        krows: cig * geom.kernel * geom.kernel,
    })
}

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
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given extents and strides;
    // `c` is a dense row-major m×n block.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fills `col` (krows × oh·ow) for channels `c0..c0+cig` of one sample.
fn im2col(sample: &[f64], d: &Dims, geom: &ConvGeom, c0: usize, col: &mut [f64]) {
    let k = geom.kernel;
    let p = d.oh * d.ow;
    let plane = d.h * d.w;
    for ci in 0..d.cig {
        let src = &sample[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    let out = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.padding as isize;
                        *o = if ix < 0 || ix >= d.w as isize { 0.0 } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into channels `c0..c0+cig` of `dx`.
fn col2im(col: &[f64], d: &Dims, geom: &ConvGeom, c0: usize, dx: &mut [f64]) {
    let k = geom.kernel;
    let p = d.oh * d.ow;
    let plane = d.h * d.w;
    for ci in 0..d.cig {
        let dst = &mut dx[(c0 + ci) * plane..(c0 + ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, g) in row[oy * d.ow..(oy + 1) * d.ow].iter().enumerate() {
                        let ix = (ox * geom.stride + kx * geom.dilation) as isize
                            - geom.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            line[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

pub fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let d = dims(x, w, geom)?;
    if let Some(b) = b {
        if b.numel() != d.cout {
            return Err(Error::shape("conv2d", format!("bias has {} entries, need {}", b.numel(), d.cout)));
        }
    }
    let p = d.oh * d.ow;
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let wdata = w.data();
    let mut out = vec![0.0; d.n * out_len];
    parallel::for_each_chunk(&mut out, out_len, |i, dst| {
        let sample = &x.data()[i * in_len..(i + 1) * in_len];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; d.krows * p] };
        for g in 0..geom.groups {
            let wg = &wdata[g * d.cog * d.krows..(g + 1) * d.cog * d.krows];
            let cols: &[f64] = if geom.is_pointwise() {
                &sample[g * d.cig * p..(g + 1) * d.cig * p]
            } else {
                im2col(sample, &d, geom, g * d.cig, &mut col);
                &col
            };
            let og = &mut dst[g * d.cog * p..(g + 1) * d.cog * p];
            gemm(d.cog, d.krows, p, wg, (d.krows, 1), cols, (p, 1), og, 0.0);
        }
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                let bo = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    dy: &Tensor,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let (need_dx, need_dw, need_db) = need;
    let d = dims(x, w, geom)?;
    let p = d.oh * d.ow;
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let wdata = w.data();
    let wlen = w.numel();

    // Per-sample buffer: [dx (in_len) | dw (wlen) | db (cout)].
    let stride = (if need_dx { in_len } else { 0 })
        + (if need_dw { wlen } else { 0 })
        + (if need_db { d.cout } else { 0 });
    if stride == 0 {
        return Ok(ConvGrads { input: None, weight: None, bias: None });
    }
    let mut scratch = vec![0.0; d.n * stride];
    parallel::for_each_chunk(&mut scratch, stride, |i, buf| {
        let sample = &x.data()[i * in_len..(i + 1) * in_len];
        let gy = &dy.data()[i * out_len..(i + 1) * out_len];
        let (dx, rest) = buf.split_at_mut(if need_dx { in_len } else { 0 });
        let (dw, db) = rest.split_at_mut(if need_dw { wlen } else { 0 });
        let mut col = if need_dw && !geom.is_pointwise() { vec![0.0; d.krows * p] } else { Vec::new() };
        let mut dcol = if need_dx && !geom.is_pointwise() { vec![0.0; d.krows * p] } else { Vec::new() };
        for g in 0..geom.groups {
            let gy_g = &gy[g * d.cog * p..(g + 1) * d.cog * p];
            if need_dw {
                let cols: &[f64] = if geom.is_pointwise() {
                    &sample[g * d.cig * p..(g + 1) * d.cig * p]
                } else {
                    im2col(sample, &d, geom, g * d.cig, &mut col);
                    &col
                };
                let dw_g = &mut dw[g * d.cog * d.krows..(g + 1) * d.cog * d.krows];
                gemm(d.cog, p, d.krows, gy_g, (p, 1), cols, (1, p), dw_g, 0.0);
            }
            if need_dx {
                let wg = &wdata[g * d.cog * d.krows..(g + 1) * d.cog * d.krows];
                if geom.is_pointwise() {
                    let dst = &mut dx[g * d.cig * p..(g + 1) * d.cig * p];
                    gemm(d.krows, d.cog, p, wg, (1, d.krows), gy_g, (p, 1), dst, 0.0);
                } else {
                    gemm(d.krows, d.cog, p, wg, (1, d.krows), gy_g, (p, 1), &mut dcol, 0.0);
                    col2im(&dcol, &d, geom, g * d.cig, dx);
                }
            }
        }
        if need_db {
            for (o, chunk) in gy.chunks(p).enumerate() {
                db[o] = chunk.iter().sum();
            }
        }
    });

    let mut input = need_dx.then(|| Vec::with_capacity(d.n * in_len));
    let mut weight = need_dw.then(|| vec![0.0; wlen]);
    let mut bias = need_db.then(|| vec![0.0; d.cout]);
    for buf in scratch.chunks(stride) {
        let (dx, rest) = buf.split_at(if need_dx { in_len } else { 0 });
        let (dw, db) = rest.split_at(if need_dw { wlen } else { 0 });
        if let Some(acc) = input.as_mut() {
            acc.extend_from_slice(dx);
        }
        if let Some(acc) = weight.as_mut() {
            acc.iter_mut().zip(dw).for_each(|(a, v)| *a += v);
        }
        if let Some(acc) = bias.as_mut() {
            acc.iter_mut().zip(db).for_each(|(a, v)| *a += v);
        }
    }
    Ok(ConvGrads {
        input: input.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        weight: weight.map(|v| Tensor::new(w.shape().to_vec(), v)).transpose()?,
        bias: bias.map(|v| Tensor::new(vec![d.cout], v)).transpose()?,
    })
}

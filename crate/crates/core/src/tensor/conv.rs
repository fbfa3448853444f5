//! Direct 3D convolution kernels on `[C, D, H, W]` volumes.
//!
//! The innermost loop always runs along W over a precomputed in-bounds range,
//! so zero padding never materializes.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv3dGeom {
    /// Stride 1, padding that preserves extent for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv3dGeom {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

pub fn conv_out_extent(n: usize, kernel: usize, geom: Conv3dGeom) -> Result<usize> {
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::InvalidArgument(
            "conv3d stride and dilation must be positive".into(),
        ));
    }
    let span = geom.dilation * (kernel - 1) + 1;
    let padded = n + 2 * geom.padding;
    if padded < span {
        return Err(Error::shape(
            "conv3d",
            format!(
                "extent {n} with padding {} is smaller than the dilated kernel span {span}",
                geom.padding
            ),
        ));
    }
    Ok((padded - span) / geom.stride + 1)
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + off` lands in `[0, n)`.
fn tap_range(n: usize, out: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = n as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub geom: Conv3dGeom,
}

impl ConvDims {
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    /// Visits every (input row, output row, W range) triple touched by kernel tap
    /// `(kz, ky, kx)`. The callback receives the input offset of the row start,
    /// the output offset of the row start, the output W range, and the input W
    /// offset so that `ix = ox * stride + xoff`.
    fn for_each_row(
        &self,
        kz: usize,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, usize, usize, usize, isize),
    ) {
        let g = self.geom;
        let [d, h, w] = self.inp;
        let [od, oh, ow] = self.out;
        let off = |k: usize| (k * g.dilation) as isize - g.padding as isize;
        let (z0, z1) = tap_range(d, od, g.stride, off(kz));
        let (y0, y1) = tap_range(h, oh, g.stride, off(ky));
        let (x0, x1) = tap_range(w, ow, g.stride, off(kx));
        if x0 == x1 {
            return;
        }
        for oz in z0..z1 {
            let iz = (oz * g.stride) as isize + off(kz);
            for oy in y0..y1 {
                let iy = (oy * g.stride) as isize + off(ky);
                let irow = (iz as usize * h + iy as usize) * w;
                let orow = (oz * oh + oy) * ow;
                f(irow, orow, x0, x1, off(kx));
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, cd: &ConvDims) -> Vec<f64> {
    let (isz, osz, k, s) = (cd.in_len(), cd.out_len(), cd.k, cd.geom.stride);
    let mut out = vec![0.0; cd.cout * osz];
    for co in 0..cd.cout {
        let ob = &mut out[co * osz..(co + 1) * osz];
        if let Some(b) = bias {
            ob.fill(b[co]);
        }
        for ci in 0..cd.cin {
            let xb = &x[ci * isz..(ci + 1) * isz];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[(((co * cd.cin + ci) * k + kz) * k + ky) * k + kx];
                        cd.for_each_row(kz, ky, kx, |irow, orow, x0, x1, xoff| {
                            let orow = &mut ob[orow..];
                            if s == 1 {
                                let start = (irow as isize + x0 as isize + xoff) as usize;
                                let src = &xb[start..start + (x1 - x0)];
                                for (o, &v) in orow[x0..x1].iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ((ox * s) as isize + xoff) as usize;
                                    orow[ox] += wv * xb[irow + ix];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for the upstream gradient `gy`.
pub(crate) fn backward(
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    cd: &ConvDims,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (isz, osz, k, s) = (cd.in_len(), cd.out_len(), cd.k, cd.geom.stride);
    if let Some(gb) = gb {
        for co in 0..cd.cout {
            gb[co] += gy[co * osz..(co + 1) * osz].iter().sum::<f64>();
        }
    }
    for co in 0..cd.cout {
        let gyb = &gy[co * osz..(co + 1) * osz];
        for ci in 0..cd.cin {
            let xb = &x[ci * isz..(ci + 1) * isz];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = (((co * cd.cin + ci) * k + kz) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let mut wacc = 0.0;
                        let mut gxb = gx.as_deref_mut().map(|g| &mut g[ci * isz..(ci + 1) * isz]);
                        cd.for_each_row(kz, ky, kx, |irow, orow, x0, x1, xoff| {
                            for ox in x0..x1 {
                                let ix = (irow as isize + (ox * s) as isize + xoff) as usize;
                                let gv = gyb[orow + ox];
                                wacc += gv * xb[ix];
                                if let Some(gxb) = gxb.as_deref_mut() {
                                    gxb[ix] += wv * gv;
                                }
                            }
                        });
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

//! Dense loops behind the spatial primitives.
//!
//! Every routine works on a normalized `[N, C, D, H, W]` layout; 2D inputs
//! arrive with `D = 1` and a unit kernel extent along that axis. Each output
//! plane is written by exactly one rayon task in a fixed order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

pub(crate) type Extent3 = [usize; 3];

pub(crate) fn volume(e: Extent3) -> usize {
    e[0] * e[1] * e[2]
}

/// Index range `[lo, hi)` of output coordinates `t` with `0 <= t + off < len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub sp: Extent3,
    pub k: Extent3,
}

impl ConvDims {
    fn offsets(&self) -> [isize; 3] {
        [
            (self.k[0] / 2) as isize,
            (self.k[1] / 2) as isize,
            (self.k[2] / 2) as isize,
        ]
    }

    fn kvol(&self) -> usize {
        volume(self.k)
    }
}

/// Same-padded, stride-1 cross-correlation.
pub(crate) fn conv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let plane = volume(d.sp);
    let [sd, sh, sw] = d.sp;
    let [kd, kh, kw] = d.k;
    let pad = d.offsets();
    let mut out = vec![0.0; d.n * d.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, out_plane)| {
        let (n, o) = (idx / d.cout, idx % d.cout);
        if let Some(b) = bias {
            out_plane.fill(b[o]);
        }
        for c in 0..d.cin {
            let in_plane = &x[(n * d.cin + c) * plane..][..plane];
            let wbase = (o * d.cin + c) * d.kvol();
            for kz in 0..kd {
                let dz = kz as isize - pad[0];
                let (z0, z1) = valid_range(sd, dz);
                for ky in 0..kh {
                    let dy = ky as isize - pad[1];
                    let (y0, y1) = valid_range(sh, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pad[2];
                        let (x0, x1) = valid_range(sw, dx);
                        let wv = w[wbase + (kz * kh + ky) * kw + kx];
                        if wv == 0.0 || x0 >= x1 {
                            continue;
                        }
                        for z in z0..z1 {
                            let iz = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let orow = &mut out_plane[(z * sh + y) * sw..][x0..x1];
                                let ix0 = (x0 as isize + dx) as usize;
                                let irow = &in_plane[(iz * sh + iy) * sw + ix0..][..x1 - x0];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv_backward_input(gout: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = volume(d.sp);
    let [sd, sh, sw] = d.sp;
    let [kd, kh, kw] = d.k;
    let pad = d.offsets();
    let mut gin = vec![0.0; d.n * d.cin * plane];
    gin.par_chunks_mut(plane).enumerate().for_each(|(idx, gin_plane)| {
        let (n, c) = (idx / d.cin, idx % d.cin);
        for o in 0..d.cout {
            let g_plane = &gout[(n * d.cout + o) * plane..][..plane];
            let wbase = (o * d.cin + c) * d.kvol();
            for kz in 0..kd {
                let dz = kz as isize - pad[0];
                let (z0, z1) = valid_range(sd, dz);
                for ky in 0..kh {
                    let dy = ky as isize - pad[1];
                    let (y0, y1) = valid_range(sh, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pad[2];
                        let (x0, x1) = valid_range(sw, dx);
                        let wv = w[wbase + (kz * kh + ky) * kw + kx];
                        if wv == 0.0 || x0 >= x1 {
                            continue;
                        }
                        for z in z0..z1 {
                            let iz = (z as isize + dz) as usize;
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let grow = &g_plane[(z * sh + y) * sw..][x0..x1];
                                let ix0 = (x0 as isize + dx) as usize;
                                let irow = &mut gin_plane[(iz * sh + iy) * sw + ix0..][..x1 - x0];
                                for (iv, gv) in irow.iter_mut().zip(grow) {
                                    *iv += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv_backward_weight(gout: &[f64], x: &[f64], d: ConvDims) -> Vec<f64> {
    let plane = volume(d.sp);
    let [sd, sh, sw] = d.sp;
    let [kd, kh, kw] = d.k;
    let pad = d.offsets();
    let per_out = d.cin * d.kvol();
    let mut gw = vec![0.0; d.cout * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(o, gw_o)| {
        for c in 0..d.cin {
            for kz in 0..kd {
                let dz = kz as isize - pad[0];
                let (z0, z1) = valid_range(sd, dz);
                for ky in 0..kh {
                    let dy = ky as isize - pad[1];
                    let (y0, y1) = valid_range(sh, dy);
                    for kx in 0..kw {
                        let dx = kx as isize - pad[2];
                        let (x0, x1) = valid_range(sw, dx);
                        let mut acc = 0.0;
                        if x0 < x1 {
                            for n in 0..d.n {
                                let g_plane = &gout[(n * d.cout + o) * plane..][..plane];
                                let in_plane = &x[(n * d.cin + c) * plane..][..plane];
                                for z in z0..z1 {
                                    let iz = (z as isize + dz) as usize;
                                    for y in y0..y1 {
                                        let iy = (y as isize + dy) as usize;
                                        let grow = &g_plane[(z * sh + y) * sw..][x0..x1];
                                        let ix0 = (x0 as isize + dx) as usize;
                                        let irow = &in_plane[(iz * sh + iy) * sw + ix0..][..x1 - x0];
                                        acc += grow.iter().zip(irow).map(|(g, i)| g * i).sum::<f64>();
                                    }
                                }
                            }
                        }
                        gw_o[c * d.kvol() + (kz * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
    });
    gw
}

/// Per-channel sums over batch and space (bias gradient).
pub(crate) fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct UpDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    /// Input spatial extents.
    pub sp: Extent3,
    /// Upsampling factor per axis; the kernel extent equals the factor.
    pub f: Extent3,
}

impl UpDims {
    fn out_sp(&self) -> Extent3 {
        [self.sp[0] * self.f[0], self.sp[1] * self.f[1], self.sp[2] * self.f[2]]
    }
}

/// Transposed convolution whose kernel equals its stride: each input voxel
/// paints one non-overlapping output block. Weight layout `[Cin, Cout, k...]`.
pub(crate) fn upconv_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: UpDims) -> Vec<f64> {
    let [sd, sh, sw] = d.sp;
    let [fd, fh, fw] = d.f;
    let osp = d.out_sp();
    let (iplane, oplane, kvol) = (volume(d.sp), volume(osp), volume(d.f));
    let mut out = vec![0.0; d.n * d.cout * oplane];
    out.par_chunks_mut(oplane).enumerate().for_each(|(idx, out_plane)| {
        let (n, o) = (idx / d.cout, idx % d.cout);
        if let Some(b) = bias {
            out_plane.fill(b[o]);
        }
        for c in 0..d.cin {
            let in_plane = &x[(n * d.cin + c) * iplane..][..iplane];
            let wbase = (c * d.cout + o) * kvol;
            for a in 0..fd {
                for b in 0..fh {
                    for e in 0..fw {
                        let wv = w[wbase + (a * fh + b) * fw + e];
                        for z in 0..sd {
                            for y in 0..sh {
                                let irow = &in_plane[(z * sh + y) * sw..][..sw];
                                let orow = &mut out_plane[((z * fd + a) * osp[1] + y * fh + b) * osp[2]..][..osp[2]];
                                for (xi, iv) in irow.iter().enumerate() {
                                    orow[xi * fw + e] += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn upconv_backward_input(gout: &[f64], w: &[f64], d: UpDims) -> Vec<f64> {
    let [sd, sh, sw] = d.sp;
    let [fd, fh, fw] = d.f;
    let osp = d.out_sp();
    let (iplane, oplane, kvol) = (volume(d.sp), volume(osp), volume(d.f));
    let mut gin = vec![0.0; d.n * d.cin * iplane];
    gin.par_chunks_mut(iplane).enumerate().for_each(|(idx, gin_plane)| {
        let (n, c) = (idx / d.cin, idx % d.cin);
        for o in 0..d.cout {
            let g_plane = &gout[(n * d.cout + o) * oplane..][..oplane];
            let wbase = (c * d.cout + o) * kvol;
            for a in 0..fd {
                for b in 0..fh {
                    for e in 0..fw {
                        let wv = w[wbase + (a * fh + b) * fw + e];
                        for z in 0..sd {
                            for y in 0..sh {
                                let grow = &g_plane[((z * fd + a) * osp[1] + y * fh + b) * osp[2]..][..osp[2]];
                                let irow = &mut gin_plane[(z * sh + y) * sw..][..sw];
                                for (xi, iv) in irow.iter_mut().enumerate() {
                                    *iv += wv * grow[xi * fw + e];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn upconv_backward_weight(gout: &[f64], x: &[f64], d: UpDims) -> Vec<f64> {
    let [sd, sh, sw] = d.sp;
    let [fd, fh, fw] = d.f;
    let osp = d.out_sp();
    let (iplane, oplane, kvol) = (volume(d.sp), volume(osp), volume(d.f));
    let per_in = d.cout * kvol;
    let mut gw = vec![0.0; d.cin * per_in];
    gw.par_chunks_mut(per_in).enumerate().for_each(|(c, gw_c)| {
        for o in 0..d.cout {
            for a in 0..fd {
                for b in 0..fh {
                    for e in 0..fw {
                        let mut acc = 0.0;
                        for n in 0..d.n {
                            let in_plane = &x[(n * d.cin + c) * iplane..][..iplane];
                            let g_plane = &gout[(n * d.cout + o) * oplane..][..oplane];
                            for z in 0..sd {
                                for y in 0..sh {
                                    let irow = &in_plane[(z * sh + y) * sw..][..sw];
                                    let grow = &g_plane[((z * fd + a) * osp[1] + y * fh + b) * osp[2]..][..osp[2]];
                                    for (xi, iv) in irow.iter().enumerate() {
                                        acc += iv * grow[xi * fw + e];
                                    }
                                }
                            }
                        }
                        gw_c[o * kvol + (a * fh + b) * fw + e] = acc;
                    }
                }
            }
        }
    });
    gw
}

/// Block-mean pooling by integer factors per axis. `planes` = N·C.
pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, sp: Extent3, f: Extent3) -> Vec<f64> {
    let osp = [sp[0] / f[0], sp[1] / f[1], sp[2] / f[2]];
    let (iplane, oplane) = (volume(sp), volume(osp));
    let inv = 1.0 / volume(f) as f64;
    let mut out = vec![0.0; planes * oplane];
    for p in 0..planes {
        let ip = &x[p * iplane..][..iplane];
        let op = &mut out[p * oplane..][..oplane];
        for z in 0..sp[0] {
            for y in 0..sp[1] {
                let orow = &mut op[((z / f[0]) * osp[1] + y / f[1]) * osp[2]..][..osp[2]];
                let irow = &ip[(z * sp[1] + y) * sp[2]..][..sp[2]];
                for (xi, v) in irow.iter().enumerate() {
                    orow[xi / f[2]] += v;
                }
            }
        }
        for v in op.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub(crate) fn avg_pool_backward(gout: &[f64], planes: usize, sp: Extent3, f: Extent3) -> Vec<f64> {
    let osp = [sp[0] / f[0], sp[1] / f[1], sp[2] / f[2]];
    let (iplane, oplane) = (volume(sp), volume(osp));
    let inv = 1.0 / volume(f) as f64;
    let mut gin = vec![0.0; planes * iplane];
    for p in 0..planes {
        let gp = &gout[p * oplane..][..oplane];
        let ip = &mut gin[p * iplane..][..iplane];
        for z in 0..sp[0] {
            for y in 0..sp[1] {
                let grow = &gp[((z / f[0]) * osp[1] + y / f[1]) * osp[2]..][..osp[2]];
                let irow = &mut ip[(z * sp[1] + y) * sp[2]..][..sp[2]];
                for (xi, v) in irow.iter_mut().enumerate() {
                    *v = grow[xi / f[2]] * inv;
                }
            }
        }
    }
    gin
}

//! Raw convolution and pooling loops shared by the tape's forward and
//! backward passes. Layout everywhere is channels-last: activations are
//! `[N, H, W, C]`, kernels `[KH, KW, Cin, Cout]`, so the innermost loops
//! run over contiguous channel slices.

use crate::Scalar;

pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S], out: &mut [S]) {
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_off = (((n * g.oh + oy) * g.ow) + ox) * g.cout;
                let orow = &mut out[out_off..out_off + g.cout];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let in_off = (((n * g.h + iy as usize) * g.w) + ix as usize) * g.cin;
                        let k_off = ((ky * g.kw + kx) * g.cin) * g.cout;
                        for ci in 0..g.cin {
                            let v = input[in_off + ci];
                            let krow = &kernel[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                            for co in 0..g.cout {
                                orow[co] += v * krow[co];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    kernel: &[S],
    grad_out: &[S],
    grad_input: Option<&mut [S]>,
    grad_kernel: Option<&mut [S]>,
) {
    let mut gi = grad_input;
    let mut gk = grad_kernel;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_off = (((n * g.oh + oy) * g.ow) + ox) * g.cout;
                let grow = &grad_out[out_off..out_off + g.cout];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let in_off = (((n * g.h + iy as usize) * g.w) + ix as usize) * g.cin;
                        let k_off = ((ky * g.kw + kx) * g.cin) * g.cout;
                        if let Some(gk) = gk.as_deref_mut() {
                            for ci in 0..g.cin {
                                let v = input[in_off + ci];
                                let krow = &mut gk[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                                for co in 0..g.cout {
                                    krow[co] += v * grow[co];
                                }
                            }
                        }
                        if let Some(gi) = gi.as_deref_mut() {
                            for ci in 0..g.cin {
                                let krow = &kernel[k_off + ci * g.cout..k_off + (ci + 1) * g.cout];
                                let mut acc = S::zero();
                                for co in 0..g.cout {
                                    acc += krow[co] * grow[co];
                                }
                                gi[in_off + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn avg_pool_forward<S: Scalar>(g: &PoolGeom, input: &[S], out: &mut [S]) {
    let inv = S::from_f64(1.0 / (g.window.0 * g.window.1) as f64);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_off = (((n * g.oh + oy) * g.ow) + ox) * g.c;
                let orow = &mut out[out_off..out_off + g.c];
                for wy in 0..g.window.0 {
                    let iy = oy * g.stride.0 + wy;
                    for wx in 0..g.window.1 {
                        let ix = ox * g.stride.1 + wx;
                        let in_off = (((n * g.h + iy) * g.w) + ix) * g.c;
                        let irow = &input[in_off..in_off + g.c];
                        for c in 0..g.c {
                            orow[c] += irow[c];
                        }
                    }
                }
                for c in 0..g.c {
                    orow[c] *= inv;
                }
            }
        }
    }
}

pub(crate) fn avg_pool_backward<S: Scalar>(g: &PoolGeom, grad_out: &[S], grad_input: &mut [S]) {
    let inv = S::from_f64(1.0 / (g.window.0 * g.window.1) as f64);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let out_off = (((n * g.oh + oy) * g.ow) + ox) * g.c;
                let grow = &grad_out[out_off..out_off + g.c];
                for wy in 0..g.window.0 {
                    let iy = oy * g.stride.0 + wy;
                    for wx in 0..g.window.1 {
                        let ix = ox * g.stride.1 + wx;
                        let in_off = (((n * g.h + iy) * g.w) + ix) * g.c;
                        for c in 0..g.c {
                            grad_input[in_off + c] += grow[c] * inv;
                        }
                    }
                }
            }
        }
    }
}

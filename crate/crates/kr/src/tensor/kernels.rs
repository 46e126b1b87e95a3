//! Raw numeric kernels behind the taped operations.
//!
//! Every loop nest runs in one fixed order (no parallel reductions), which is
//! what makes whole training runs byte-reproducible.

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// dA[m,k] += dC[m,n] * B^T
pub fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, dv) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (dcv, bv) in dc_row.iter().zip(b_row) {
                s += dcv * bv;
            }
            *dv = s;
        }
    }
    da
}

/// dB[k,n] += A^T * dC[m,n]
pub fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dc_row = &dc[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dbv, &dcv) in db_row.iter_mut().zip(dc_row) {
                *dbv += av * dcv;
            }
        }
    }
    db
}

pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Cross-correlation (no kernel flip): out[b,f,oy,ox] = sum_{c,ky,kx} x[b,c,oy*s+ky-p,ox*s+kx-p] * w[f,c,ky,kx]
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_per_f = g.in_ch * g.kernel * g.kernel;
    for b in 0..g.batch {
        let x_img = &x[b * g.in_ch * in_plane..(b + 1) * g.in_ch * in_plane];
        for f in 0..g.out_ch {
            let w_f = &w[f * w_per_f..(f + 1) * w_per_f];
            let out_base = (b * g.out_ch + f) * out_plane;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        let x_ch = &x_img[c * in_plane..(c + 1) * in_plane];
                        let w_ch = &w_f[c * g.kernel * g.kernel..];
                        for ky in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                            let w_row = &w_ch[ky * g.kernel..(ky + 1) * g.kernel];
                            for (kx, &wv) in w_row.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += x_row[ix as usize] * wv;
                            }
                        }
                    }
                    out[out_base + oy * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input(dout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_per_f = g.in_ch * g.kernel * g.kernel;
    for b in 0..g.batch {
        for f in 0..g.out_ch {
            let w_f = &w[f * w_per_f..(f + 1) * w_per_f];
            let dout_map = &dout[(b * g.out_ch + f) * out_plane..(b * g.out_ch + f + 1) * out_plane];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let dv = dout_map[oy * g.out_w + ox];
                    if dv == 0.0 {
                        continue;
                    }
                    for c in 0..g.in_ch {
                        let dx_ch = (b * g.in_ch + c) * in_plane;
                        let w_ch = &w_f[c * g.kernel * g.kernel..];
                        for ky in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                dx[dx_ch + iy as usize * g.in_w + ix as usize] +=
                                    dv * w_ch[ky * g.kernel + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_grad_weight(dout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; g.out_ch * g.in_ch * g.kernel * g.kernel];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let w_per_f = g.in_ch * g.kernel * g.kernel;
    for b in 0..g.batch {
        let x_img = &x[b * g.in_ch * in_plane..(b + 1) * g.in_ch * in_plane];
        for f in 0..g.out_ch {
            let dout_map = &dout[(b * g.out_ch + f) * out_plane..(b * g.out_ch + f + 1) * out_plane];
            let dw_f = &mut dw[f * w_per_f..(f + 1) * w_per_f];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let dv = dout_map[oy * g.out_w + ox];
                    if dv == 0.0 {
                        continue;
                    }
                    for c in 0..g.in_ch {
                        let x_ch = &x_img[c * in_plane..(c + 1) * in_plane];
                        let dw_ch = &mut dw_f[c * g.kernel * g.kernel..(c + 1) * g.kernel * g.kernel];
                        for ky in 0..g.kernel {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                dw_ch[ky * g.kernel + kx] += dv * x_ch[iy as usize * g.in_w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn avgpool2d(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.ch * g.out_h * g.out_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    for bc in 0..g.batch * g.ch {
        let x_map = &x[bc * in_plane..(bc + 1) * in_plane];
        let out_map = &mut out[bc * out_plane..(bc + 1) * out_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel {
                        acc += x_map[row + kx];
                    }
                }
                out_map[oy * g.out_w + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avgpool2d_grad(dout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.ch * g.in_h * g.in_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let inv = 1.0 / (g.kernel * g.kernel) as f64;
    for bc in 0..g.batch * g.ch {
        let dout_map = &dout[bc * out_plane..(bc + 1) * out_plane];
        let dx_map = &mut dx[bc * in_plane..(bc + 1) * in_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dv = dout_map[oy * g.out_w + ox] * inv;
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel {
                        dx_map[row + kx] += dv;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of `z` (n rows of k entries), numerically stabilized.
pub fn row_softmax(z: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &z[i * k..(i + 1) * k];
        let out_row = &mut out[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

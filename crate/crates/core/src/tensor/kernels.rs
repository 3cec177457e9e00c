//! Raw loops behind the tape primitives. Everything is row-major `f64`
//! and single threaded; accumulation order is fixed so results are bitwise
//! reproducible.

use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || filters.len() != 4 {
            return Err(Error::shape("conv2d", input, filters));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, fc, k, k2) = (filters[0], filters[1], filters[2], filters[3]);
        if fc != c_in || k != k2 {
            return Err(Error::shape("conv2d", input, filters));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if k > ph || k > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {k} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - k) % stride != 0 || (pw - k) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: ({ph}-{k})/{stride}, ({pw}-{k})/{stride}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (ph - k) / stride + 1,
            ow: (pw - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
}

/// Unfolds one example `[c_in×h×w]` into columns `[(c_in·k·k) × (oh·ow)]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip).
pub fn conv2d_forward(x: &[f64], filters: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ohw = g.oh * g.ow;
    let mut out = vec![0.0; g.batch * g.out_plane()];
    let mut cols = vec![0.0; g.patch() * ohw];
    for b in 0..g.batch {
        im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols);
        let y = gemm(filters, &cols, g.c_out, g.patch(), ohw);
        out[b * g.out_plane()..(b + 1) * g.out_plane()].copy_from_slice(&y);
    }
    out
}

/// Returns `(d_input, d_filters)` for upstream gradient `gy`. Either half is
/// skipped when not needed.
pub fn conv2d_backward(
    x: &[f64],
    filters: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ohw = g.oh * g.ow;
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![0.0; g.batch * g.in_plane()]);
    let mut dw = need_dw.then(|| vec![0.0; filters.len()]);
    let mut cols = vec![0.0; patch * ohw];
    let mut dcols = vec![0.0; patch * ohw];
    for b in 0..g.batch {
        let gyb = &gy[b * g.out_plane()..(b + 1) * g.out_plane()];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * g.in_plane()..(b + 1) * g.in_plane()], g, &mut cols);
            gemm_a_bt_acc(gyb, &cols, g.c_out, ohw, patch, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            gemm_at_b_acc(filters, gyb, g.c_out, patch, ohw, &mut dcols);
            col2im_acc(&dcols, g, &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()]);
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("avg_pool2d", input, &[k]));
        }
        if k == 0 || !input[2].is_multiple_of(k) || !input[3].is_multiple_of(k) {
            return Err(Error::Config(format!(
                "avg_pool2d window {k} does not tile {}x{}",
                input[2], input[3]
            )));
        }
        Ok(Self {
            planes: input[0] * input[1],
            h: input[2],
            w: input[3],
            k,
        })
    }
}

pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = (g.h / g.k, g.w / g.k);
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.planes * oh * ow];
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..g.k {
                    for dx in 0..g.k {
                        s += plane[(oy * g.k + dy) * g.w + ox * g.k + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = s * scale;
            }
        }
    }
    out
}

pub fn avg_pool_backward(gy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = (g.h / g.k, g.w / g.k);
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gy[(p * oh + oy) * ow + ox] * scale;
                for dy in 0..g.k {
                    for dxx in 0..g.k {
                        dx[p * g.h * g.w + (oy * g.k + dy) * g.w + ox * g.k + dxx] += v;
                    }
                }
            }
        }
    }
    dx
}

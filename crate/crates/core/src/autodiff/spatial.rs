//! Image-shaped operations on `C×H×W` variables.

use super::{record, record_unchecked, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Square-kernel convolution geometry with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

fn check_chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected C×H×W".into(),
        }),
    }
}

/// Unfolds `x` (c×h×w) into a (c·k·k) × (ho·wo) patch matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into c×h×w.
fn col2im(cols_data: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = ho * wo;
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Var {
    /// 2-D convolution of a `C×H×W` input with an `O×C×k×k` kernel and `O` bias.
    pub fn conv2d(&self, weight: &Var, bias: &Var, geom: ConvGeometry) -> Result<Var> {
        let (c, h, w) = check_chw("conv2d", self.shape())?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != geom.kernel || ws[3] != geom.kernel {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let o = ws[0];
        if bias.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (Some(ho), Some(wo)) = (geom.out_len(h), geom.out_len(w)) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: self.shape().to_vec(),
                reason: "input smaller than kernel".into(),
            });
        };
        let ckk = c * geom.kernel * geom.kernel;
        let n = ho * wo;
        let cols = im2col(self.value.data(), c, h, w, geom, ho, wo);
        let mut out = vec![0.0; o * n];
        for (oi, &b) in bias.value.data().iter().enumerate() {
            out[oi * n..(oi + 1) * n].fill(b);
        }
        gemm(weight.value.data(), &cols, &mut out, o, ckk, n);
        let value = Tensor::from_parts(vec![o, ho, wo], out);

        let reqs = [self.requires_grad(), weight.requires_grad(), bias.requires_grad()];
        let wv = weight.value.clone();
        let in_req = reqs[0];
        let cols = reqs[1].then_some(cols);
        record(value, &[self, weight, bias], move |g| {
            let gd = g.data();
            let gx = in_req.then(|| {
                let mut gcols = vec![0.0; ckk * n];
                gemm_tn(wv.data(), gd, &mut gcols, o, ckk, n);
                Tensor::from_parts(vec![c, h, w], col2im(&gcols, c, h, w, geom, ho, wo))
            });
            let gw = cols.as_ref().map(|cols| {
                let mut gw = vec![0.0; o * ckk];
                gemm_nt(gd, cols, &mut gw, o, n, ckk);
                Tensor::from_parts(vec![o, c, geom.kernel, geom.kernel], gw)
            });
            let gb = reqs[2].then(|| Tensor::from_parts(vec![o], gd.chunks(n).map(|r| r.iter().sum()).collect()));
            vec![gx, gw, gb]
        })
    }

    /// Transposed convolution (no padding) of a `C×H×W` input with a
    /// `C×O×k×k` kernel; output is `O×((H−1)s+k)×((W−1)s+k)`.
    pub fn conv_transpose2d(&self, weight: &Var, bias: &Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = check_chw("conv_transpose2d", self.shape())?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != c || ws[2] != kernel || ws[3] != kernel {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let o = ws[1];
        if bias.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d bias",
                lhs: ws.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let geom = ConvGeometry::new(kernel, stride, 0);
        let (ho, wo) = ((h - 1) * stride + kernel, (w - 1) * stride + kernel);
        let okk = o * kernel * kernel;
        let n = h * w;
        // cols = Wᵀ x, with W viewed as c × okk
        let mut cols = vec![0.0; okk * n];
        gemm_tn(weight.value.data(), self.value.data(), &mut cols, c, okk, n);
        let mut out = col2im(&cols, o, ho, wo, geom, h, w);
        let plane = ho * wo;
        for (oi, &b) in bias.value.data().iter().enumerate() {
            for v in &mut out[oi * plane..(oi + 1) * plane] {
                *v += b;
            }
        }
        let value = Tensor::from_parts(vec![o, ho, wo], out);

        let reqs = [self.requires_grad(), weight.requires_grad(), bias.requires_grad()];
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        record(value, &[self, weight, bias], move |g| {
            let gcols = im2col(g.data(), o, ho, wo, geom, h, w);
            let gx = reqs[0].then(|| {
                let mut gx = vec![0.0; c * n];
                gemm(wv.data(), &gcols, &mut gx, c, okk, n);
                Tensor::from_parts(vec![c, h, w], gx)
            });
            let gw = reqs[1].then(|| {
                let mut gw = vec![0.0; c * okk];
                gemm_nt(xv.data(), &gcols, &mut gw, c, n, okk);
                Tensor::from_parts(vec![c, o, kernel, kernel], gw)
            });
            let gb =
                reqs[2].then(|| Tensor::from_parts(vec![o], g.data().chunks(plane).map(|r| r.iter().sum()).collect()));
            vec![gx, gw, gb]
        })
    }

    /// Bilinear resize of `C×H×W` to `C×out_h×out_w` (half-pixel centers).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = check_chw("resize_bilinear", self.shape())?;
        let ys = resize_taps(h, out_h);
        let xs = resize_taps(w, out_w);
        let src = self.value.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ci * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_parts(vec![c, out_h, out_w], out);
        Ok(record_unchecked(value, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = gd[(ci * out_h + oy) * out_w + ox];
                        plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        plane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
        }))
    }

    /// Samples `C×H×W` at pixel coordinates (`cols`, `rows`, both `H'×W'`)
    /// with bilinear interpolation. Coordinates are clamped to the image;
    /// clamped coordinates receive zero gradient.
    pub fn grid_sample(&self, cols: &Var, rows: &Var) -> Result<Var> {
        let (c, h, w) = check_chw("grid_sample", self.shape())?;
        if cols.shape() != rows.shape() || cols.value.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "grid_sample",
                lhs: cols.shape().to_vec(),
                rhs: rows.shape().to_vec(),
            });
        }
        let (ho, wo) = (cols.shape()[0], cols.shape()[1]);
        let n = ho * wo;
        let taps: Vec<Tap> = cols
            .value
            .data()
            .iter()
            .zip(rows.value.data())
            .map(|(&u, &v)| Tap::new(u, v, w, h))
            .collect();
        let src = self.value.data();
        let mut out = vec![0.0; c * n];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for (i, t) in taps.iter().enumerate() {
                out[ci * n + i] = t.sample(plane, w);
            }
        }
        let value = Tensor::from_parts(vec![c, ho, wo], out);
        let reqs = [self.requires_grad(), cols.requires_grad(), rows.requires_grad()];
        let sv = self.value.clone();
        record(value, &[self, cols, rows], move |g| {
            let gd = g.data();
            let src = sv.data();
            let gsrc = reqs[0].then(|| {
                let mut gs = vec![0.0; c * h * w];
                for ci in 0..c {
                    let plane = &mut gs[ci * h * w..(ci + 1) * h * w];
                    for (i, t) in taps.iter().enumerate() {
                        t.scatter(plane, w, gd[ci * n + i]);
                    }
                }
                Tensor::from_parts(vec![c, h, w], gs)
            });
            let (mut gu, mut gv) = (vec![0.0; n], vec![0.0; n]);
            if reqs[1] || reqs[2] {
                for ci in 0..c {
                    let plane = &src[ci * h * w..(ci + 1) * h * w];
                    for (i, t) in taps.iter().enumerate() {
                        let (du, dv) = t.coord_grad(plane, w);
                        gu[i] += gd[ci * n + i] * du;
                        gv[i] += gd[ci * n + i] * dv;
                    }
                }
            }
            vec![
                gsrc,
                reqs[1].then(|| Tensor::from_parts(vec![ho, wo], gu)),
                reqs[2].then(|| Tensor::from_parts(vec![ho, wo], gv)),
            ]
        })
    }

    /// 3×3 box mean of every channel with reflection padding.
    pub fn box_filter3(&self) -> Result<Var> {
        let (c, h, w) = check_chw("box_filter3", self.shape())?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                op: "box_filter3",
                shape: self.shape().to_vec(),
                reason: "reflection padding needs at least 2×2".into(),
            });
        }
        let src = self.value.data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in [-1isize, 0, 1] {
                        let yy = reflect(y as isize + dy, h);
                        for dx in [-1isize, 0, 1] {
                            acc += plane[yy * w + reflect(x as isize + dx, w)];
                        }
                    }
                    out[(ci * h + y) * w + x] = acc / 9.0;
                }
            }
        }
        let value = Tensor::from_parts(vec![c, h, w], out);
        Ok(record_unchecked(value, &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let gv = gd[(ci * h + y) * w + x] / 9.0;
                        for dy in [-1isize, 0, 1] {
                            let yy = reflect(y as isize + dy, h);
                            for dx in [-1isize, 0, 1] {
                                gx[(ci * h + yy) * w + reflect(x as isize + dx, w)] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
        }))
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// (low index, high index, high weight) per output position.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    u_live: bool,
    v_live: bool,
}

impl Tap {
    fn new(u: f64, v: f64, w: usize, h: usize) -> Self {
        let (uc, u_live) = clamp_live(u, (w - 1) as f64);
        let (vc, v_live) = clamp_live(v, (h - 1) as f64);
        let x0 = (uc.floor() as usize).min(w - 1);
        let y0 = (vc.floor() as usize).min(h - 1);
        Self {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            fx: uc - x0 as f64,
            fy: vc - y0 as f64,
            u_live,
            v_live,
        }
    }

    fn sample(&self, p: &[f64], w: usize) -> f64 {
        let top = p[self.y0 * w + self.x0] * (1.0 - self.fx) + p[self.y0 * w + self.x1] * self.fx;
        let bot = p[self.y1 * w + self.x0] * (1.0 - self.fx) + p[self.y1 * w + self.x1] * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }

    fn scatter(&self, p: &mut [f64], w: usize, g: f64) {
        p[self.y0 * w + self.x0] += g * (1.0 - self.fy) * (1.0 - self.fx);
        p[self.y0 * w + self.x1] += g * (1.0 - self.fy) * self.fx;
        p[self.y1 * w + self.x0] += g * self.fy * (1.0 - self.fx);
        p[self.y1 * w + self.x1] += g * self.fy * self.fx;
    }

    fn coord_grad(&self, p: &[f64], w: usize) -> (f64, f64) {
        let (s00, s01) = (p[self.y0 * w + self.x0], p[self.y0 * w + self.x1]);
        let (s10, s11) = (p[self.y1 * w + self.x0], p[self.y1 * w + self.x1]);
        let du = if self.u_live && self.x1 != self.x0 {
            (1.0 - self.fy) * (s01 - s00) + self.fy * (s11 - s10)
        } else {
            0.0
        };
        let dv = if self.v_live && self.y1 != self.y0 {
            (1.0 - self.fx) * (s10 - s00) + self.fx * (s11 - s01)
        } else {
            0.0
        };
        (du, dv)
    }
}

fn clamp_live(x: f64, hi: f64) -> (f64, bool) {
    if x < 0.0 {
        (0.0, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Rounding slack, in pixels, for samples that land exactly on the border:
/// reprojecting row `H−1` through `z·y / z` can overshoot by an ulp.
const BORDER_SLACK: f64 = 1e-6;

/// 1 where the sampling coordinate lies inside `[0, W−1] × [0, H−1]`, else 0.
pub fn valid_sample_mask(cols: &Tensor, rows: &Tensor, width: usize, height: usize) -> Tensor {
    let (wmax, hmax) = ((width - 1) as f64 + BORDER_SLACK, (height - 1) as f64 + BORDER_SLACK);
    let data = cols
        .data()
        .iter()
        .zip(rows.data())
        .map(|(&u, &v)| {
            if (-BORDER_SLACK..=wmax).contains(&u) && (-BORDER_SLACK..=hmax).contains(&v) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_parts(cols.shape().to_vec(), data)
}

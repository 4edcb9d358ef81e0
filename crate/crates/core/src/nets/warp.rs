//! Differentiable bilinear warping by a dense displacement field.
//!
//! `out[n, c, i, j] = bilinear(input[n, c], j + flow[n, 0, i, j], i + flow[n, 1, i, j])`
//! with sample coordinates clamped to the image, so the operator is defined
//! for any finite flow.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Displacement field in pixels: channel 0 is `dx`, channel 1 is `dy`.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub flow: Tensor,
    pub scale: usize,
}

impl FlowField {
    pub fn new(flow: Tensor) -> Result<Self> {
        let (_, c, h, w) = flow.dims4()?;
        if c != 2 || h != w {
            return Err(Error::shape("(N, 2, S, S)", flow.dims()));
        }
        Ok(Self { flow, scale: h })
    }
}

struct Warp;

#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: f64,
    ay: f64,
    /// Whether the sample coordinate lies strictly inside the clamp range.
    inside_x: bool,
    inside_y: bool,
}

fn tap(i: usize, j: usize, dx: f64, dy: f64, h: usize, w: usize) -> Tap {
    let raw_x = j as f64 + dx;
    let raw_y = i as f64 + dy;
    let sx = raw_x.clamp(0.0, (w - 1) as f64);
    let sy = raw_y.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: sx - x0 as f64,
        ay: sy - y0 as f64,
        inside_x: raw_x > 0.0 && raw_x < (w - 1) as f64,
        inside_y: raw_y > 0.0 && raw_y < (h - 1) as f64,
    }
}

fn forward<T: WithDType>(x: &[T], f: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        let fb = &f[b * 2 * hw..(b + 1) * 2 * hw];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let t = tap(i, j, fb[p].to_f64(), fb[hw + p].to_f64(), h, w);
                for ch in 0..c {
                    let img = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let v00 = img[t.y0 * w + t.x0].to_f64();
                    let v01 = img[t.y0 * w + t.x1].to_f64();
                    let v10 = img[t.y1 * w + t.x0].to_f64();
                    let v11 = img[t.y1 * w + t.x1].to_f64();
                    let top = (1.0 - t.ax) * v00 + t.ax * v01;
                    let bot = (1.0 - t.ax) * v10 + t.ax * v11;
                    out[(b * c + ch) * hw + p] = T::from_f64((1.0 - t.ay) * top + t.ay * bot);
                }
            }
        }
    }
    out
}

/// Gradients with respect to the input and the flow, in `f64`.
fn backward(
    x: &[f64],
    f: &[f64],
    g: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gx = vec![0.0; x.len()];
    let mut gf = vec![0.0; f.len()];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let t = tap(i, j, f[b * 2 * hw + p], f[b * 2 * hw + hw + p], h, w);
                let (mut gdx, mut gdy) = (0.0, 0.0);
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let go = g[base + p];
                    let v00 = x[base + t.y0 * w + t.x0];
                    let v01 = x[base + t.y0 * w + t.x1];
                    let v10 = x[base + t.y1 * w + t.x0];
                    let v11 = x[base + t.y1 * w + t.x1];
                    gx[base + t.y0 * w + t.x0] += go * (1.0 - t.ay) * (1.0 - t.ax);
                    gx[base + t.y0 * w + t.x1] += go * (1.0 - t.ay) * t.ax;
                    gx[base + t.y1 * w + t.x0] += go * t.ay * (1.0 - t.ax);
                    gx[base + t.y1 * w + t.x1] += go * t.ay * t.ax;
                    gdx += go * ((1.0 - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                    gdy += go * ((1.0 - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                }
                if t.inside_x {
                    gf[b * 2 * hw + p] = gdx;
                }
                if t.inside_y {
                    gf[b * 2 * hw + hw + p] = gdy;
                }
            }
        }
    }
    (gx, gf)
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("warp expects contiguous inputs".into()))?;
    Ok(&T::cpu_storage_as_slice(s)?[start..end])
}

impl CustomOp2 for Warp {
    fn name(&self) -> &'static str {
        "flow-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(forward::<f32>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                n,
                c,
                h,
                w,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(forward::<f64>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
                n,
                c,
                h,
                w,
            )),
            _ => return Err(candle_core::Error::Msg("warp supports matching f32/f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dims = arg1.dims4()?;
        let dtype = arg1.dtype();
        let flat = |t: &Tensor| t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>();
        let (gx, gf) = backward(&flat(arg1)?, &flat(arg2)?, &flat(grad_res)?, dims);
        let gx = Tensor::from_vec(gx, arg1.shape(), arg1.device())?.to_dtype(dtype)?;
        let gf = Tensor::from_vec(gf, arg2.shape(), arg2.device())?.to_dtype(dtype)?;
        Ok((Some(gx), Some(gf)))
    }
}

/// Warp `input` `(N, C, H, W)` by `flow` `(N, 2, H, W)`.
pub fn warp(input: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = input.dims4()?;
    let fd = flow.dims4()?;
    if fd != (n, 2, h, w) {
        return Err(Error::shape(format!("flow ({n}, 2, {h}, {w})"), flow.dims()));
    }
    if input.dtype() != flow.dtype() {
        return Err(Error::shape(format!("{:?} flow", input.dtype()), flow.dtype()));
    }
    Ok(input.contiguous()?.apply_op2(&flow.contiguous()?, Warp)?)
}

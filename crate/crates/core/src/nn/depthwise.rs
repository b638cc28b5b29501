//! Depthwise 2-D convolution (one 1-channel filter per input channel) with a
//! hand-written backward pass.
//!
//! candle lowers `groups == channels` convolutions to one small convolution per
//! group, which dominates the runtime of mobile residual blocks. This op runs a
//! direct loop instead.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        padding: usize,
    ) -> candle_core::Result<Self> {
        let (&[batch, channels, in_h, in_w], &[wc, one, kh, kw]) = (x, w) else {
            candle_core::bail!("depthwise conv expects 4-d input and kernel, got {x:?} and {w:?}")
        };
        if wc != channels || one != 1 || kh != kw {
            candle_core::bail!("depthwise kernel {w:?} does not match input {x:?}")
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            candle_core::bail!("depthwise kernel {kh}x{kw} larger than padded input {in_h}x{in_w}")
        }
        Ok(Self {
            batch,
            channels,
            in_h,
            in_w,
            kernel: kh,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("depthwise conv requires contiguous operands"),
    }
}

fn forward<T: WithDType>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let k = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.channels * g.out_h * g.out_w];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let xb = &x[(n * g.channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let wb = &w[c * k * k..][..k * k];
            let ob = &mut out[(n * g.channels + c) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            for oy in 0..g.out_h {
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    let row = &xb[iy * g.in_w..][..g.in_w];
                    for kx in 0..k {
                        let wv = wb[ky * k + kx];
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                ob[oy * g.out_w + ox] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn grad_input<T: WithDType>(gy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let k = g.kernel;
    let mut gx = vec![T::zero(); g.batch * g.channels * g.in_h * g.in_w];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let gb = &gy[(n * g.channels + c) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            let wb = &w[c * k * k..][..k * k];
            let xb = &mut gx[(n * g.channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for oy in 0..g.out_h {
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    for kx in 0..k {
                        let wv = wb[ky * k + kx];
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                xb[iy * g.in_w + ix] += wv * gb[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn grad_kernel<T: WithDType>(x: &[T], gy: &[T], g: &Geometry) -> Vec<T> {
    let k = g.kernel;
    let mut gw = vec![T::zero(); g.channels * k * k];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let xb = &x[(n * g.channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let gb = &gy[(n * g.channels + c) * g.out_h * g.out_w..][..g.out_h * g.out_w];
            let wb = &mut gw[c * k * k..][..k * k];
            for oy in 0..g.out_h {
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for ox in 0..g.out_w {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                acc += xb[iy * g.in_w + ix] * gb[oy * g.out_w + ox];
                            }
                        }
                        wb[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

struct DepthwiseConv {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let shape = Shape::from((g.batch, g.channels, g.out_h, g.out_w));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(slice(x, l1)?, slice(w, l2)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(slice(x, l1)?, slice(w, l2)?, &g))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32/f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad_res = grad_res.contiguous()?;
        let gx = grad_res.apply_op2_no_bwd(
            w,
            &GradInput {
                stride: self.stride,
                padding: self.padding,
                input_dims: x.dims().to_vec(),
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            &grad_res,
            &GradKernel {
                stride: self.stride,
                padding: self.padding,
                kernel_dims: w.dims().to_vec(),
            },
        )?;
        Ok((Some(gx), Some(gw)))
    }
}

struct GradInput {
    stride: usize,
    padding: usize,
    input_dims: Vec<usize>,
}

impl CustomOp2 for GradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.input_dims, l2.dims(), self.stride, self.padding)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(gy), CpuStorage::F32(w)) => {
                CpuStorage::F32(grad_input(slice(gy, l1)?, slice(w, l2)?, &g))
            }
            (CpuStorage::F64(gy), CpuStorage::F64(w)) => {
                CpuStorage::F64(grad_input(slice(gy, l1)?, slice(w, l2)?, &g))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32/f64 operands"),
        };
        Ok((out, Shape::from(self.input_dims.clone())))
    }
}

struct GradKernel {
    stride: usize,
    padding: usize,
    kernel_dims: Vec<usize>,
}

impl CustomOp2 for GradKernel {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), &self.kernel_dims, self.stride, self.padding)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gy)) => {
                CpuStorage::F32(grad_kernel(slice(x, l1)?, slice(gy, l2)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gy)) => {
                CpuStorage::F64(grad_kernel(slice(x, l1)?, slice(gy, l2)?, &g))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32/f64 operands"),
        };
        Ok((out, Shape::from(self.kernel_dims.clone())))
    }
}

/// Depthwise convolution of `x` (N, C, H, W) with `kernel` (C, 1, K, K), zero padded.
pub fn depthwise_conv2d(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, DepthwiseConv { stride, padding })
}

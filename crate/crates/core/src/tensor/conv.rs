//! Convolution and pooling kernels on raw buffers.
//!
//! Both convolution directions lower to GEMM through an im2col/col2im pair
//! that shares one geometry description: a "wide" plane of `h x w` pixels and
//! a "narrow" grid of `ho x wo` kernel placements.

use super::{Element, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Gathers kernel windows of `src` (`channels x h x w`) into the column
/// matrix `cols` (`channels*kh*kw x ho*wo`).
fn im2col<T: Element>(src: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &src[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds the column matrix back into `dst` (`channels x h x w`).
fn col2im<T: Element>(cols: &[T], g: &Geometry, dst: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let chan = &mut dst[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_kernel(op: &'static str, dim: &'static str, kernel: usize, padded: usize) -> Result<()> {
    if kernel == 0 || kernel > padded {
        return Err(TensorError::KernelTooLarge {
            op,
            dim,
            kernel,
            padded,
        });
    }
    Ok(())
}

fn check_bias<T: Element>(
    op: &'static str,
    bias: Option<&Tensor<T>>,
    channels: usize,
) -> Result<()> {
    if let Some(b) = bias {
        if b.rank() != 1 {
            return Err(TensorError::Rank {
                op,
                expected: 1,
                shape: b.shape().to_vec(),
            });
        }
        if b.numel() != channels {
            return Err(TensorError::ShapeMismatch {
                op,
                dim: "bias",
                expected: channels,
                got: b.numel(),
            });
        }
    }
    Ok(())
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride must be positive".into(),
        });
    }
    Ok(())
}

/// Validated shape information for a convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub n: usize,
    pub cout: usize,
    pub geo: Geometry,
}

pub(crate) fn plan_conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvPlan> {
    const OP: &str = "conv2d";
    check_stride(OP, stride)?;
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, wcin, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "in_channels",
            expected: cin,
            got: wcin,
        });
    }
    check_kernel(OP, "height", kh, h + 2 * padding)?;
    check_kernel(OP, "width", kw, w + 2 * padding)?;
    check_bias(OP, bias, cout)?;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvPlan {
        n,
        cout,
        geo: Geometry {
            channels: cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        },
    })
}

pub(crate) fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    plan: &ConvPlan,
) -> Tensor<T> {
    let g = plan.geo;
    let (k, p) = (g.rows(), g.cols());
    let in_plane = g.channels * g.h * g.w;
    let mut out = Tensor::zeros(&[plan.n, plan.cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..plan.n {
        let x = &input.data()[s * in_plane..(s + 1) * in_plane];
        let colbuf: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * plan.cout * p..(s + 1) * plan.cout * p];
        T::gemm(
            plan.cout,
            k,
            p,
            T::one(),
            (weight.data(), k as isize, 1),
            (colbuf, p as isize, 1),
            T::zero(),
            (dst, p as isize, 1),
        );
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_mut(p).enumerate() {
                let bc = b.data()[c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    plan: &ConvPlan,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let g = plan.geo;
    let (k, p) = (g.rows(), g.cols());
    let in_plane = g.channels * g.h * g.w;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros(&[plan.cout]));
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = vec![T::zero(); k * p];
    for s in 0..plan.n {
        let x = &input.data()[s * in_plane..(s + 1) * in_plane];
        let go = &grad_out.data()[s * plan.cout * p..(s + 1) * plan.cout * p];
        let colbuf: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        // dW += dOut * cols^T
        T::gemm(
            plan.cout,
            p,
            k,
            T::one(),
            (go, p as isize, 1),
            (colbuf, 1, p as isize),
            T::one(),
            (dw.data_mut(), k as isize, 1),
        );
        if let Some(db) = db.as_mut() {
            for (c, chunk) in go.chunks(p).enumerate() {
                db.data_mut()[c] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[s * in_plane..(s + 1) * in_plane];
            if g.is_pointwise() {
                T::gemm(
                    k,
                    plan.cout,
                    p,
                    T::one(),
                    (weight.data(), 1, k as isize),
                    (go, p as isize, 1),
                    T::zero(),
                    (dst, p as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    plan.cout,
                    p,
                    T::one(),
                    (weight.data(), 1, k as isize),
                    (go, p as isize, 1),
                    T::zero(),
                    (&mut dcols, p as isize, 1),
                );
                col2im(&dcols, &g, dst);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Shape information for a transposed convolution. `geo` describes the
/// equivalent forward convolution from the (wide) output to the (narrow)
/// input grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvTransposePlan {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub geo: Geometry,
}

pub(crate) fn plan_conv_transpose2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<ConvTransposePlan> {
    const OP: &str = "transposed_conv2d";
    check_stride(OP, stride)?;
    if output_padding >= stride {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: format!("output_padding {output_padding} must be smaller than stride {stride}"),
        });
    }
    let (n, cin, h, w) = input.dims4(OP)?;
    let (wcin, cout, kh, kw) = weight.dims4(OP)?;
    if wcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "in_channels",
            expected: cin,
            got: wcin,
        });
    }
    check_bias(OP, bias, cout)?;
    let extent = |len: usize, k: usize, dim: &'static str| -> Result<usize> {
        let full = (len - 1) * stride + k + output_padding;
        if full <= 2 * padding {
            return Err(TensorError::KernelTooLarge {
                op: OP,
                dim,
                kernel: k,
                padded: full.saturating_sub(2 * padding),
            });
        }
        Ok(full - 2 * padding)
    };
    if h == 0 || w == 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            reason: "empty spatial input".into(),
        });
    }
    let ho = extent(h, kh, "height")?;
    let wo = extent(w, kw, "width")?;
    Ok(ConvTransposePlan {
        n,
        cin,
        cout,
        geo: Geometry {
            channels: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad: padding,
            ho: h,
            wo: w,
        },
    })
}

pub(crate) fn conv_transpose2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    plan: &ConvTransposePlan,
) -> Tensor<T> {
    let g = plan.geo;
    let (k, p) = (g.rows(), g.cols());
    let out_plane = plan.cout * g.h * g.w;
    let mut out = Tensor::zeros(&[plan.n, plan.cout, g.h, g.w]);
    let mut cols = vec![T::zero(); k * p];
    for s in 0..plan.n {
        let x = &input.data()[s * plan.cin * p..(s + 1) * plan.cin * p];
        // cols = W^T x, with W viewed as cin x (cout*kh*kw)
        T::gemm(
            k,
            plan.cin,
            p,
            T::one(),
            (weight.data(), 1, k as isize),
            (x, p as isize, 1),
            T::zero(),
            (&mut cols, p as isize, 1),
        );
        let dst = &mut out.data_mut()[s * out_plane..(s + 1) * out_plane];
        col2im(&cols, &g, dst);
        if let Some(b) = bias {
            for (c, chunk) in dst.chunks_mut(g.h * g.w).enumerate() {
                let bc = b.data()[c];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    plan: &ConvTransposePlan,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let g = plan.geo;
    let (k, p) = (g.rows(), g.cols());
    let out_plane = plan.cout * g.h * g.w;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros(&[plan.cout]));
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut dcols = vec![T::zero(); k * p];
    for s in 0..plan.n {
        let x = &input.data()[s * plan.cin * p..(s + 1) * plan.cin * p];
        let go = &grad_out.data()[s * out_plane..(s + 1) * out_plane];
        im2col(go, &g, &mut dcols);
        // dW += x * dcols^T
        T::gemm(
            plan.cin,
            p,
            k,
            T::one(),
            (x, p as isize, 1),
            (&dcols, 1, p as isize),
            T::one(),
            (dw.data_mut(), k as isize, 1),
        );
        if let Some(db) = db.as_mut() {
            for (c, chunk) in go.chunks(g.h * g.w).enumerate() {
                db.data_mut()[c] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[s * plan.cin * p..(s + 1) * plan.cin * p];
            T::gemm(
                plan.cin,
                k,
                p,
                T::one(),
                (weight.data(), k as isize, 1),
                (&dcols, p as isize, 1),
                T::zero(),
                (dst, p as isize, 1),
            );
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of the selected input element. Ties go to
/// the first window element in row-major order.
pub fn max_pool2d<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h % 2 != 0 {
        return Err(TensorError::OddExtent {
            dim: "height",
            extent: h,
        });
    }
    if w % 2 != 0 {
        return Err(TensorError::OddExtent {
            dim: "width",
            extent: w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[argmax.len()] = src[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

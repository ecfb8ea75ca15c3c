use std::rc::Rc;

use super::conv::{self, ConvPlan, ConvTransposePlan};
use super::tape::Node;
use super::{Element, Result, Tensor, TensorError, Var};

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        plan: ConvPlan,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        plan: ConvTransposePlan,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    ScaleAdd {
        a: usize,
        w: usize,
        b: usize,
    },
    Scale {
        a: usize,
        w: usize,
    },
    MulConst {
        a: usize,
        c: T,
    },
    WeightedSum {
        a: usize,
        coeff: Rc<Tensor<T>>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Tensor<T>,
        target: Rc<Vec<u8>>,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::MaxPool2d { input, .. } | Op::Relu { input } => vec![input],
            Op::Add { a, b } => vec![a, b],
            Op::ScaleAdd { a, w, b } => vec![a, w, b],
            Op::Scale { a, w } => vec![a, w],
            Op::MulConst { a, .. } | Op::WeightedSum { a, .. } => vec![a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Adjoint contributions to the inputs that require gradients.
    pub(crate) fn backward(
        &self,
        g: &Tensor<T>,
        out: &Tensor<T>,
        nodes: &[Node<T>],
    ) -> Vec<(usize, Tensor<T>)> {
        let needs = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| &*nodes[i].value;
        let mut grads = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                plan,
            } => {
                let r = conv::conv2d_backward(
                    val(*input),
                    val(*weight),
                    bias.is_some(),
                    plan,
                    g,
                    needs(*input),
                );
                push_conv_grads(&mut grads, r, *input, *weight, *bias, &needs);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                plan,
            } => {
                let r = conv::conv_transpose2d_backward(
                    val(*input),
                    val(*weight),
                    bias.is_some(),
                    plan,
                    g,
                    needs(*input),
                );
                push_conv_grads(&mut grads, r, *input, *weight, *bias, &needs);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                grads.push((*input, dx));
            }
            Op::Relu { input } => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                grads.push((*input, Tensor::new(g.shape(), data).expect("same shape")));
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    grads.push((*a, g.clone()));
                }
                if needs(*b) {
                    grads.push((*b, g.clone()));
                }
            }
            Op::ScaleAdd { a, w, b } => {
                let wv = val(*w).item();
                if needs(*a) {
                    grads.push((*a, g.clone()));
                }
                if needs(*b) {
                    grads.push((*b, g.map(|v| v * wv)));
                }
                if needs(*w) {
                    grads.push((*w, reduce_product(g, val(*b), val(*w).shape())));
                }
            }
            Op::Scale { a, w } => {
                let wv = val(*w).item();
                if needs(*a) {
                    grads.push((*a, g.map(|v| v * wv)));
                }
                if needs(*w) {
                    grads.push((*w, reduce_product(g, val(*a), val(*w).shape())));
                }
            }
            Op::MulConst { a, c } => {
                let c = *c;
                grads.push((*a, g.map(|v| v * c)));
            }
            Op::WeightedSum { a, coeff } => {
                let gv = g.item();
                grads.push((*a, coeff.map(|c| c * gv)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                let shape = probs.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let scale = g.item() / T::from_f64((n * plane) as f64);
                let mut dx = probs.clone();
                let d = dx.data_mut();
                for s in 0..n {
                    for p in 0..plane {
                        let t = target[s * plane + p] as usize;
                        for k in 0..c {
                            let idx = (s * c + k) * plane + p;
                            let onehot = if k == t { T::one() } else { T::zero() };
                            d[idx] = (d[idx] - onehot) * scale;
                        }
                    }
                }
                grads.push((*logits, dx));
            }
        }
        grads
    }
}

fn push_conv_grads<T: Element>(
    grads: &mut Vec<(usize, Tensor<T>)>,
    r: conv::ConvGrads<T>,
    input: usize,
    weight: usize,
    bias: Option<usize>,
    needs: &dyn Fn(usize) -> bool,
) {
    if let Some(dx) = r.input {
        grads.push((input, dx));
    }
    if needs(weight) {
        grads.push((weight, r.weight));
    }
    if let (Some(b), Some(db)) = (bias, r.bias) {
        if needs(b) {
            grads.push((b, db));
        }
    }
}

fn reduce_product<T: Element>(g: &Tensor<T>, x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let s: T = g.data().iter().zip(x.data()).map(|(&a, &b)| a * b).sum();
    Tensor::new(shape, vec![s]).expect("scalar shape")
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.rank() != b.rank() {
        return Err(TensorError::Rank {
            op,
            expected: a.rank(),
            shape: b.shape().to_vec(),
        });
    }
    const DIMS: [&str; 4] = ["dim0", "dim1", "dim2", "dim3"];
    let axis = a
        .shape()
        .iter()
        .zip(b.shape())
        .position(|(x, y)| x != y)
        .unwrap();
    let dim = if a.rank() == 4 {
        ["batch", "channels", "height", "width"][axis]
    } else {
        DIMS[axis]
    };
    Err(TensorError::ShapeMismatch {
        op,
        dim,
        expected: a.shape()[axis],
        got: b.shape()[axis],
    })
}

fn scalar_weight<T: Element>(op: &'static str, w: &Tensor<T>) -> Result<()> {
    if w.numel() != 1 || w.rank() > 1 {
        return Err(TensorError::Rank {
            op,
            expected: 0,
            shape: w.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        self.tape().check_owner(*other, op)
    }

    /// 2-D cross-correlation of an `N x Cin x H x W` input with a
    /// `Cout x Cin x kh x kw` kernel.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        self.same_tape(&weight, "conv2d")?;
        if let Some(b) = bias {
            self.same_tape(&b, "conv2d")?;
        }
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let plan = conv::plan_conv2d(&x, &w, b.as_deref(), stride, padding)?;
        let out = conv::conv2d_forward(&x, &w, b.as_deref(), &plan);
        Ok(self.tape().record(
            out,
            Op::Conv2d {
                input: self.id(),
                weight: weight.id(),
                bias: bias.map(|b| b.id()),
                plan,
            },
        ))
    }

    /// Transposed convolution with a `Cin x Cout x kh x kw` kernel; the
    /// adjoint of [`Var::conv2d`] with the same kernel. Output extent is
    /// `(H - 1) * stride - 2 * padding + kh + output_padding`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Self> {
        self.same_tape(&weight, "transposed_conv2d")?;
        if let Some(b) = bias {
            self.same_tape(&b, "transposed_conv2d")?;
        }
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let plan =
            conv::plan_conv_transpose2d(&x, &w, b.as_deref(), stride, padding, output_padding)?;
        let out = conv::conv_transpose2d_forward(&x, &w, b.as_deref(), &plan);
        Ok(self.tape().record(
            out,
            Op::ConvTranspose2d {
                input: self.id(),
                weight: weight.id(),
                bias: bias.map(|b| b.id()),
                plan,
            },
        ))
    }

    /// 2x2 max pooling, stride 2. Height and width must be even.
    pub fn maxpool2d(self) -> Result<Self> {
        let (out, argmax) = conv::max_pool2d(&self.value())?;
        Ok(self.tape().record(
            out,
            Op::MaxPool2d {
                input: self.id(),
                argmax,
            },
        ))
    }

    pub fn relu(self) -> Self {
        let out = self
            .value()
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape().record(out, Op::Relu { input: self.id() })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape().record(
            out,
            Op::Add {
                a: self.id(),
                b: other.id(),
            },
        ))
    }

    /// `self + w * other` with `w` a rank-0 tensor.
    pub fn scale_add(self, w: Var<'t, T>, other: Var<'t, T>) -> Result<Self> {
        self.same_tape(&w, "scale_add")?;
        self.same_tape(&other, "scale_add")?;
        let (a, wv, b) = (self.value(), w.value(), other.value());
        scalar_weight("scale_add", &wv)?;
        same_shape("scale_add", &a, &b)?;
        let s = wv.item();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + s * y)
            .collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.tape().record(
            out,
            Op::ScaleAdd {
                a: self.id(),
                w: w.id(),
                b: other.id(),
            },
        ))
    }

    /// `w * self` with `w` a rank-0 tensor.
    pub fn scale(self, w: Var<'t, T>) -> Result<Self> {
        self.same_tape(&w, "scale")?;
        let wv = w.value();
        scalar_weight("scale", &wv)?;
        let s = wv.item();
        let out = self.value().map(|v| s * v);
        Ok(self.tape().record(
            out,
            Op::Scale {
                a: self.id(),
                w: w.id(),
            },
        ))
    }

    pub fn mul_const(self, c: T) -> Self {
        let out = self.value().map(|v| c * v);
        self.tape().record(out, Op::MulConst { a: self.id(), c })
    }

    /// Scalar `sum(self * coeff)` for a constant coefficient tensor.
    pub fn weighted_sum(self, coeff: Tensor<T>) -> Result<Self> {
        let a = self.value();
        same_shape("weighted_sum", &a, &coeff)?;
        let s: T = a
            .data()
            .iter()
            .zip(coeff.data())
            .map(|(&x, &c)| x * c)
            .sum();
        Ok(self.tape().record(
            Tensor::scalar(s),
            Op::WeightedSum {
                a: self.id(),
                coeff: Rc::new(coeff),
            },
        ))
    }

    /// Mean over all `N*H*W` pixels of `-log softmax(logits)[target]`.
    ///
    /// `self` is `N x C x H x W`; `target` holds `N*H*W` class indices.
    pub fn softmax_cross_entropy(self, target: &[u8]) -> Result<Self> {
        const OP: &str = "softmax_cross_entropy";
        let logits = self.value();
        let (n, c, h, w) = logits.dims4(OP)?;
        let plane = h * w;
        if target.len() != n * plane {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "pixels",
                expected: n * plane,
                got: target.len(),
            });
        }
        if let Some(index) = target.iter().position(|&t| t as usize >= c) {
            return Err(TensorError::InvalidTarget {
                value: target[index],
                index,
                classes: c,
            });
        }
        let x = logits.data();
        let mut probs = Tensor::zeros(logits.shape());
        let mut total = 0.0f64;
        {
            let pr = probs.data_mut();
            for s in 0..n {
                for p in 0..plane {
                    let at = |k: usize| (s * c + k) * plane + p;
                    let m = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..c {
                        let e = (x[at(k)] - m).exp();
                        pr[at(k)] = e;
                        z += e;
                    }
                    for k in 0..c {
                        pr[at(k)] = pr[at(k)] / z;
                    }
                    let t = target[s * plane + p] as usize;
                    total += (m + z.ln() - x[at(t)]).as_f64();
                }
            }
        }
        let loss = T::from_f64(total / (n * plane) as f64);
        Ok(self.tape().record(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id(),
                probs,
                target: Rc::new(target.to_vec()),
            },
        ))
    }
}

/// Per-pixel softmax over the channel axis of an `N x C x H x W` tensor.
pub fn softmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4("softmax")?;
    let plane = h * w;
    let x = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let o = out.data_mut();
    for s in 0..n {
        for p in 0..plane {
            let at = |k: usize| (s * c + k) * plane + p;
            let m = (0..c).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (x[at(k)] - m).exp();
                o[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                o[at(k)] = o[at(k)] / z;
            }
        }
    }
    Ok(out)
}

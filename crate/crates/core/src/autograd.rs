//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Nodes created with [`Graph::constant`] never receive gradients, and
//! operations whose inputs are all constant are recorded without a backward
//! closure.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, Tensor};

/// Everything a backward closure may need.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [Rc<Tensor>],
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input (parameters, or anything a gradient is wanted for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: true,
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation with a caller-supplied backward rule. The closure
    /// returns one optional gradient per input, shaped like that input.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
        })
    }

    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape().to_vec(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: &inputs,
                needs: &needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

fn expand(t: &Tensor, target: &[usize]) -> Vec<f64> {
    if t.shape() == target {
        return t.data().to_vec();
    }
    let strides = broadcast_strides(t.shape(), target);
    let mut out = Vec::with_capacity(target.iter().product());
    for_each_offset(target, &strides, |o| out.push(t.data()[o]));
    out
}

/// Sums a full-shape buffer back down to a (broadcastable) smaller shape.
fn reduce_to(full: Vec<f64>, full_shape: &[usize], target: &[usize]) -> Tensor {
    if full_shape == target {
        return Tensor::new(target.to_vec(), full);
    }
    let strides = broadcast_strides(target, full_shape);
    let mut out = Tensor::zeros(target.to_vec());
    let data = out.data_mut();
    let mut k = 0;
    for_each_offset(full_shape, &strides, |o| {
        data[o] += full[k];
        k += 1;
    });
    out
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated into `out`.
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        self.graph.custom(&[*self], y, move |ctx| {
            let x = &ctx.inputs[0];
            let d = x
                .data()
                .iter()
                .zip(ctx.output.data())
                .zip(ctx.grad.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), d))]
        })
    }

    fn binary(
        &self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
        });
        let ea = expand(&a, &shape);
        let eb = expand(&b, &shape);
        let out: Vec<f64> = ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect();
        let out_shape = shape.clone();
        self.graph
            .custom(&[*self, other], Tensor::new(shape, out), move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let ea = expand(a, &out_shape);
                let eb = expand(b, &out_shape);
                let g = ctx.grad.data();
                let y = ctx.output.data();
                let ga = ctx.needs[0].then(|| {
                    let full = (0..g.len()).map(|i| g[i] * da(ea[i], eb[i], y[i])).collect();
                    reduce_to(full, &out_shape, a.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    let full = (0..g.len()).map(|i| g[i] * db(ea[i], eb[i], y[i])).collect();
                    reduce_to(full, &out_shape, b.shape())
                });
                vec![ga, gb]
            })
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, |_, b, _| 1.0 / b, |a, b, _| -a / (b * b))
    }

    pub fn maximum(&self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            f64::max,
            |a, b, _| if a >= b { 1.0 } else { 0.0 },
            |a, b, _| if a >= b { 0.0 } else { 1.0 },
        )
    }

    pub fn minimum(&self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            f64::min,
            |a, b, _| if a <= b { 1.0 } else { 0.0 },
            |a, b, _| if a <= b { 0.0 } else { 1.0 },
        )
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// `s - x`.
    pub fn rsub_scalar(&self, s: f64) -> Var<'g> {
        self.unary(move |x| s - x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let y = (*x).clone().reshape(shape);
        self.graph.custom(&[*self], y, |ctx| {
            vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let y = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph
            .custom(&[*self], y, move |ctx| vec![Some(ctx.grad.permute(&inverse))])
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Var<'g> {
        let nd = self.value().ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Batched matrix product. Accepts `[.., m, k] × [k, n]` and
    /// `[.., m, k] × [.., k, n]` with identical leading axes.
    pub fn matmul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        assert!(ash.len() >= 2 && bsh.len() >= 2, "matmul needs matrices");
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {ash:?} × {bsh:?}");
        let shared_b = bsh.len() == 2;
        if !shared_b {
            assert_eq!(ash[..ash.len() - 2], bsh[..bsh.len() - 2], "matmul batch dims");
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            mm_acc(a.data(), b.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                mm_acc(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.graph
            .custom(&[*self, other], Tensor::new(out_shape, out), move |ctx| {
                let (a, b, g) = (&ctx.inputs[0], &ctx.inputs[1], ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    if shared_b {
                        mm_nt_acc(g, b.data(), &mut ga, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            mm_nt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &b.data()[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    Tensor::new(a.shape().to_vec(), ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    if shared_b {
                        mm_tn_acc(a.data(), g, &mut gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            mm_tn_acc(
                                &a.data()[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    Tensor::new(b.shape().to_vec(), gb)
                });
                vec![ga, gb]
            })
    }

    pub fn sum_all(&self) -> Var<'g> {
        let x = self.value();
        self.graph.custom(&[*self], Tensor::scalar(x.sum()), |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.graph
            .custom(&[*self], Tensor::new(out_shape, out), move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var<'g> {
        let len = self.value().shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / len)
    }

    pub fn softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            softmax_in_place(row);
        }
        self.graph
            .custom(&[*self], Tensor::new(x.shape().to_vec(), y), move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), gx))]
            })
    }

    pub fn log_softmax_last(&self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.graph
            .custom(&[*self], Tensor::new(x.shape().to_vec(), y), move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad.data());
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..d {
                        out[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), gx))]
            })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph
            .custom(&[*self], Tensor::new(out_shape, out), move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    /// Gathers slices along `axis`; repeated indices accumulate in backward.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let idx = indices.to_vec();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in &idx {
                assert!(i < full, "index {i} out of range {full}");
                let base = (o * full + i) * inner;
                out.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = idx.len();
        self.graph
            .custom(&[*self], Tensor::new(out_shape, out), move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    for (k, &i) in idx.iter().enumerate() {
                        let src = (o * idx.len() + k) * inner;
                        let dst = (o * full + i) * inner;
                        for j in 0..inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), gx))]
            })
    }

    /// Broadcasts to `shape` (numpy rules).
    pub fn expand(&self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let out = expand(&x, shape);
        let target = shape.to_vec();
        self.graph
            .custom(&[*self], Tensor::new(target.clone(), out), move |ctx| {
                vec![Some(reduce_to(
                    ctx.grad.data().to_vec(),
                    &target,
                    ctx.inputs[0].shape(),
                ))]
            })
    }
}

pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty());
    let graph = vars[0].graph;
    let values: Vec<Rc<Tensor>> = vars.iter().map(Var::value).collect();
    let first = values[0].shape().to_vec();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            debug_assert_eq!(v.shape()[..axis], first[..axis]);
            let base = o * l * inner;
            out.extend_from_slice(&v.data()[base..base + l * inner]);
        }
    }
    let mut out_shape = first;
    out_shape[axis] = total;
    graph.custom(vars, Tensor::new(out_shape, out), move |ctx| {
        let g = ctx.grad.data();
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (gv, &l) in grads.iter_mut().zip(&lens) {
                gv.extend_from_slice(&g[off..off + l * inner]);
                off += l * inner;
            }
        }
        grads
            .into_iter()
            .zip(ctx.inputs)
            .map(|(gv, x)| Some(Tensor::new(x.shape().to_vec(), gv)))
            .collect()
    })
}

/// Stacks equally shaped vars along a new leading axis.
pub fn stack<'g>(vars: &[Var<'g>]) -> Var<'g> {
    let parts: Vec<Var<'g>> = vars
        .iter()
        .map(|v| {
            let mut s = v.shape();
            s.insert(0, 1);
            v.reshape(s)
        })
        .collect();
    concat(&parts, 0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

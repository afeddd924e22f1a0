//! Define-by-run tape over [`Tensor`] values with reverse-mode gradients
//! into a [`ParamStore`].

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, ConvGeom, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Conv {
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        /// Output went through a ReLU in place.
        relu: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    /// Leading channels of `x`.
    Narrow(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Upsample {
        x: Var,
        k: usize,
    },
    Scale {
        x: Var,
        s: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    tags: Vec<(String, Var)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    /// Records a human-readable name for an intermediate, used by shape audits.
    pub fn tag(&mut self, name: impl Into<String>, v: Var) {
        self.tags.push((name.into(), v));
    }

    pub fn tags(&self) -> impl Iterator<Item = (&str, Shape)> {
        self.tags.iter().map(|(n, v)| (n.as_str(), self.shape(*v)))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn conv(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>, geom: ConvGeom) -> Var {
        self.conv_impl(x, weight, bias, geom, false)
    }

    /// `relu(conv(x))` as one node; cheaper than the two ops.
    pub fn conv_relu(
        &mut self,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
    ) -> Var {
        self.conv_impl(x, weight, bias, geom, true)
    }

    fn conv_impl(
        &mut self,
        x: Var,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        relu: bool,
    ) -> Var {
        let w = self.params.get(weight);
        let cout = w.shape[0];
        assert_eq!(
            w.shape[1],
            self.shape(x).c,
            "{} expects {} input channels",
            w.name,
            w.shape[1]
        );
        let b = bias.map(|b| self.params.get(b).data.as_slice());
        let out = tensor::conv2d(self.value(x), &w.data, b, cout, geom, relu);
        self.push(
            out,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
                relu,
            },
            true,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add operands differ in shape");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]);
        let mut c = 0;
        for p in parts {
            let s = self.shape(*p);
            assert_eq!(
                (s.n, s.h, s.w),
                (first.n, first.h, first.w),
                "concat operands differ in spatial shape"
            );
            c += s.c;
        }
        let slices: Vec<&[f32]> = parts.iter().map(|p| &self.value(*p).data[..]).collect();
        let out = Tensor::from_slices(Shape::new(c, first.n, first.h, first.w), &slices);
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Leading `c` channels of `x`.
    pub fn narrow(&mut self, x: Var, c: usize) -> Var {
        let s = self.shape(x);
        assert!(c <= s.c);
        let out = Tensor::from_slices(
            Shape::new(c, s.n, s.h, s.w),
            &[&self.value(x).data[..c * s.channel_len()]],
        );
        let ng = self.needs(x);
        self.push(out, Op::Narrow(x), ng)
    }

    pub fn max_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let (out, arg) = tensor::max_pool(self.value(x), k);
        let ng = self.needs(x);
        self.push(out, Op::MaxPool { x, arg }, ng)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let out = tensor::avg_pool(self.value(x), k);
        let ng = self.needs(x);
        self.push(out, Op::AvgPool { x, k }, ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let out = tensor::pixel_shuffle(self.value(x), r);
        let ng = self.needs(x);
        self.push(out, Op::PixelShuffle { x, r }, ng)
    }

    pub fn upsample(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let out = tensor::upsample_nearest(self.value(x), k);
        let ng = self.needs(x);
        self.push(out, Op::Upsample { x, k }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= s;
        }
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Back-propagates `seed` (the gradient of the objective with respect to
    /// `output`) and returns parameter gradients.
    pub fn backward(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape, self.shape(output));
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    weight,
                    bias,
                    geom,
                    relu,
                } => {
                    let mut dy = dy;
                    if *relu {
                        for (g, y) in dy.data.iter_mut().zip(&node.value.data) {
                            if *y <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    let w = self.params.get(*weight);
                    let need_dx = self.needs(*x);
                    let (dx, dw, db) =
                        tensor::conv2d_backward(self.value(*x), &w.data, &dy, *geom, need_dx);
                    grads.accumulate(*weight, &dw);
                    if let Some(b) = bias {
                        grads.accumulate(*b, &db);
                    }
                    if let Some(dx) = dx {
                        send(&mut adj, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, y) in dx.data.iter_mut().zip(&node.value.data) {
                        if *y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    send(&mut adj, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        send(&mut adj, *b, dy.clone());
                    }
                    if self.needs(*a) {
                        send(&mut adj, *a, dy);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let s = self.shape(*p);
                        if self.needs(*p) {
                            let part = &dy.data[offset..offset + s.len()];
                            send(&mut adj, *p, Tensor::from_slices(s, &[part]));
                        }
                        offset += s.len();
                    }
                }
                Op::Narrow(x) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    dx.data[..dy.data.len()].copy_from_slice(&dy.data);
                    send(&mut adj, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let dx = tensor::max_pool_backward(self.shape(*x), arg, &dy);
                    send(&mut adj, *x, dx);
                }
                Op::AvgPool { x, k } => {
                    let dx = tensor::avg_pool_backward(self.shape(*x), *k, &dy);
                    send(&mut adj, *x, dx);
                }
                Op::PixelShuffle { x, r } => {
                    let dx = tensor::pixel_shuffle_backward(self.shape(*x), *r, &dy);
                    send(&mut adj, *x, dx);
                }
                Op::Upsample { x, k } => {
                    let dx = tensor::upsample_nearest_backward(self.shape(*x), *k, &dy);
                    send(&mut adj, *x, dx);
                }
                Op::Scale { x, s } => {
                    let mut dx = dy;
                    for v in &mut dx.data {
                        *v *= *s;
                    }
                    send(&mut adj, *x, dx);
                }
            }
        }
        grads
    }
}

fn send(adj: &mut [Option<Tensor>], to: Var, g: Tensor) {
    match &mut adj[to.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

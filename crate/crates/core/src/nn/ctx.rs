use super::ops::{self, ConvLayer, GroupStats, LinearLayer, Padding};
use super::{Real, Tensor};

/// Evaluation context the network is written against.
pub trait Ctx<T: Real> {
    type X: Clone;

    fn params(&self) -> &[T];
    fn input(&mut self, t: Tensor<T>) -> Self::X;
    fn value<'a>(&'a self, x: &'a Self::X) -> &'a Tensor<T>;

    fn conv(&mut self, layer: &ConvLayer, x: &Self::X) -> Self::X;
    fn group_norm(&mut self, x: &Self::X, groups: usize) -> Self::X;
    fn film(&mut self, x: &Self::X, ss: &Self::X) -> Self::X;
    fn silu(&mut self, x: &Self::X) -> Self::X;
    fn avg_pool(&mut self, x: &Self::X) -> Self::X;
    fn upsample(&mut self, x: &Self::X) -> Self::X;
    fn concat(&mut self, a: &Self::X, b: &Self::X) -> Self::X;
    fn add(&mut self, a: &Self::X, b: &Self::X) -> Self::X;
    fn linear(&mut self, layer: &LinearLayer, x: &Self::X) -> Self::X;
}

/// Eager forward evaluation.
pub struct Infer<'a, T> {
    params: &'a [T],
    padding: Option<Padding>,
}

impl<'a, T: Real> Infer<'a, T> {
    pub fn new(params: &'a [T]) -> Self {
        Self { params, padding: None }
    }

    /// Overrides the boundary handling of every convolution.
    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = Some(padding);
        self
    }
}

impl<T: Real> Ctx<T> for Infer<'_, T> {
    type X = Tensor<T>;

    fn params(&self) -> &[T] {
        self.params
    }

    fn input(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn value<'a>(&'a self, x: &'a Tensor<T>) -> &'a Tensor<T> {
        x
    }

    fn conv(&mut self, layer: &ConvLayer, x: &Tensor<T>) -> Tensor<T> {
        ops::conv_forward(self.params, layer, self.padding.unwrap_or(layer.padding), x)
    }

    fn group_norm(&mut self, x: &Tensor<T>, groups: usize) -> Tensor<T> {
        ops::group_norm_forward(x, groups).0
    }

    fn film(&mut self, x: &Tensor<T>, ss: &Tensor<T>) -> Tensor<T> {
        ops::film_forward(x, ss)
    }

    fn silu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::silu_forward(x)
    }

    fn avg_pool(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::avg_pool_forward(x)
    }

    fn upsample(&mut self, x: &Tensor<T>) -> Tensor<T> {
        ops::upsample_forward(x)
    }

    fn concat(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        ops::concat_forward(a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        ops::add_forward(a, b)
    }

    fn linear(&mut self, layer: &LinearLayer, x: &Tensor<T>) -> Tensor<T> {
        ops::linear_forward(self.params, layer, x)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv(Var, ConvLayer, Padding),
    GroupNorm(Var, usize, GroupStats),
    Film(Var, Var),
    Silu(Var),
    AvgPool(Var),
    Upsample(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Linear(Var, LinearLayer),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Forward evaluation that records every intermediate for [`Tape::backward`].
pub struct Tape<'a, T> {
    params: &'a [T],
    nodes: Vec<Node<T>>,
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(params: &'a [T]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with
    /// respect to `out`) and returns the gradient with respect to every
    /// parameter.
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Vec<T> {
        assert!(seed.same_layout(self.val(out)), "seed layout must match output");
        let mut grads = vec![T::zero(); self.params.len()];
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv(x, layer, padding) => {
                    let need = !self.is_leaf(*x);
                    if let Some(dx) =
                        ops::conv_backward(self.params, layer, *padding, self.val(*x), &g, &mut grads, need)
                    {
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::GroupNorm(x, groups, stats) => {
                    let dx = ops::group_norm_backward(&node.value, &g, *groups, stats);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Film(x, ss) => {
                    let (dx, dss) = ops::film_backward(self.val(*x), self.val(*ss), &g);
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *ss, dss);
                }
                Op::Silu(x) => {
                    let dx = ops::silu_backward(self.val(*x), &g);
                    accumulate(&mut adj, *x, dx);
                }
                Op::AvgPool(x) => {
                    let dx = ops::avg_pool_backward(self.val(*x).shape, &g);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Upsample(x) => accumulate(&mut adj, *x, ops::upsample_backward(&g)),
                Op::Concat(a, b) => {
                    let (da, db) = ops::concat_backward(self.val(*a).channels, &g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Linear(x, layer) => {
                    let dx = ops::linear_backward(self.params, layer, self.val(*x), &g, &mut grads);
                    accumulate(&mut adj, *x, dx);
                }
            }
        }
        grads
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<T: Real> Ctx<T> for Tape<'_, T> {
    type X = Var;

    fn params(&self) -> &[T] {
        self.params
    }

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a Tensor<T> {
        self.val(*x)
    }

    fn conv(&mut self, layer: &ConvLayer, x: &Var) -> Var {
        let y = ops::conv_forward(self.params, layer, layer.padding, self.val(*x));
        self.push(y, Op::Conv(*x, *layer, layer.padding))
    }

    fn group_norm(&mut self, x: &Var, groups: usize) -> Var {
        let (y, stats) = ops::group_norm_forward(self.val(*x), groups);
        self.push(y, Op::GroupNorm(*x, groups, stats))
    }

    fn film(&mut self, x: &Var, ss: &Var) -> Var {
        let y = ops::film_forward(self.val(*x), self.val(*ss));
        self.push(y, Op::Film(*x, *ss))
    }

    fn silu(&mut self, x: &Var) -> Var {
        let y = ops::silu_forward(self.val(*x));
        self.push(y, Op::Silu(*x))
    }

    fn avg_pool(&mut self, x: &Var) -> Var {
        let y = ops::avg_pool_forward(self.val(*x));
        self.push(y, Op::AvgPool(*x))
    }

    fn upsample(&mut self, x: &Var) -> Var {
        let y = ops::upsample_forward(self.val(*x));
        self.push(y, Op::Upsample(*x))
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        let y = ops::concat_forward(self.val(*a), self.val(*b));
        self.push(y, Op::Concat(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = ops::add_forward(self.val(*a), self.val(*b));
        self.push(y, Op::Add(*a, *b))
    }

    fn linear(&mut self, layer: &LinearLayer, x: &Var) -> Var {
        let y = ops::linear_forward(self.params, layer, self.val(*x));
        self.push(y, Op::Linear(*x, *layer))
    }
}

//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records a feed-forward computation as a list of nodes whose
//! parents always precede them, so the graph is acyclic by construction.
//! Batched network evaluation keeps one column per sample.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// Adds a column vector to every column.
    AddColumn(Var, Var),
    /// Subtracts a column vector from every column.
    SubColumn(Var, Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    Scale(Var, f64),
    VStack(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Node index of each registered parameter slot.
    params: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: DMatrix<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable parameter; its slot index is the registration order.
    pub fn param(&mut self, value: DMatrix<f64>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push(v.0);
        v
    }

    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    /// Matrix product; with a single-column right operand this is a matvec.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add_column(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col).column(0).into_owned();
        let mut v = self.value(a).clone();
        for mut column in v.column_iter_mut() {
            column += &c;
        }
        self.push(Op::AddColumn(a, col), v)
    }

    pub fn sub_column(&mut self, a: Var, col: Var) -> Var {
        let c = self.value(col).column(0).into_owned();
        let mut v = self.value(a).clone();
        for mut column in v.column_iter_mut() {
            column -= &c;
        }
        self.push(Op::SubColumn(a, col), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DMatrix::from_element(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(Op::Scale(a, s), v)
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "vstack: column mismatch");
        let mut v = DMatrix::zeros(va.nrows() + vb.nrows(), va.ncols());
        v.view_mut((0, 0), va.shape()).copy_from(va);
        v.view_mut((va.nrows(), 0), vb.shape()).copy_from(vb);
        self.push(Op::VStack(a, b), v)
    }

    /// Gradient of the scalar `output` with respect to every parameter slot.
    pub fn grad(&self, output: Var) -> Result<Vec<DMatrix<f64>>> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "gradient requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut adj: Vec<Option<DMatrix<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(adj: &mut [Option<DMatrix<f64>>], v: Var, g: DMatrix<f64>) {
            match &mut adj[v.0] {
                Some(existing) => *existing += g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, -&g);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(self.value(*b));
                    let gb = g.component_mul(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).transpose() * &g;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddColumn(a, col) => {
                    let gc = DMatrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum());
                    acc(&mut adj, *col, gc);
                    acc(&mut adj, *a, g);
                }
                Op::SubColumn(a, col) => {
                    let gc = DMatrix::from_fn(g.nrows(), 1, |r, _| -g.row(r).sum());
                    acc(&mut adj, *col, gc);
                    acc(&mut adj, *a, g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    acc(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, xi| 2.0 * xi * gi);
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    acc(&mut adj, *a, DMatrix::from_element(shape.0, shape.1, g[(0, 0)]));
                }
                Op::Scale(a, s) => {
                    acc(&mut adj, *a, g * *s);
                }
                Op::VStack(a, b) => {
                    let ra = self.value(*a).nrows();
                    let rb = self.value(*b).nrows();
                    acc(&mut adj, *a, g.rows(0, ra).into_owned());
                    acc(&mut adj, *b, g.rows(ra, rb).into_owned());
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|&idx| {
                adj.get(idx)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| {
                        let v = &self.nodes[idx].value;
                        DMatrix::zeros(v.nrows(), v.ncols())
                    })
            })
            .collect())
    }
}

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph: flat row-major
//! storage plus the operation and parents that produced it. Running
//! [`backward`] on a scalar loss walks the graph in reverse topological
//! order and returns a [`Gradients`] map holding one gradient per
//! `requires_grad` leaf. `backward` is a pure evaluation — calling it twice
//! on the same loss returns the same map; nothing is accumulated between
//! calls.
//!
//! Shape violations (mismatched dimensions, non-scalar loss) are programmer
//! errors and panic with the offending op named. With debug assertions
//! enabled every forward op also verifies its output is finite; NaN or Inf
//! in an activation is an error state, not a value.
//!
//! Reductions (sums, means, inner products, softmax denominators) accumulate
//! in f64 regardless of the element type.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

/// Element type of a tensor: f32 for training, f64 for gradient checks and
/// oracle tests.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTES: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arguments handed to a backward closure: the upstream gradient, the op's
/// own forward output, and its parents.
pub struct VjpArgs<'a, F: Scalar> {
    pub out_grad: &'a [F],
    pub out: &'a [F],
    pub parents: &'a [Tensor<F>],
}

type Vjp<F> = Box<dyn Fn(&VjpArgs<'_, F>, usize) -> Vec<F> + Send + Sync>;

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<F>,
    /// Leaf that should receive an entry in the gradient map.
    leaf_grad: bool,
    /// True if this node or any ancestor leaf requires gradients.
    needs_grad: bool,
    parents: Vec<Tensor<F>>,
    vjp: Option<Vjp<F>>,
}

/// Immutable tensor handle. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    node: Arc<Node<F>>,
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.leaf_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(debug_assertions)]
fn check_finite<F: Scalar>(op: &str, data: &[F]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v} at index {i} in output of `{op}`"
        );
    }
}

#[cfg(not(debug_assertions))]
fn check_finite<F: Scalar>(_op: &str, _data: &[F]) {}

impl<F: Scalar> Tensor<F> {
    /// Create a leaf tensor. `requires_grad` marks it for inclusion in the
    /// gradient map produced by [`backward`].
    pub fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                leaf_grad: requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                vjp: None,
            }),
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::leaf(shape, vec![F::zero(); n], false)
    }

    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        vjp: Vjp<F>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: bad output shape");
        check_finite(op, &data);
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                leaf_grad: false,
                needs_grad,
                parents,
                vjp: if needs_grad { Some(vjp) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[F] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.leaf_grad
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item: tensor has {} elements", self.len());
        self.node.data[0]
    }

    fn rows_cols(&self, op: &str) -> (usize, usize) {
        assert_eq!(
            self.node.shape.len(),
            2,
            "{op}: expected a matrix, got shape {:?}",
            self.node.shape
        );
        (self.node.shape[0], self.node.shape[1])
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor<F> {
        assert_eq!(
            numel(&shape),
            self.len(),
            "reshape: {:?} -> {:?} changes element count",
            self.node.shape,
            shape
        );
        Tensor::from_op(
            "reshape",
            shape,
            self.node.data.clone(),
            vec![self.clone()],
            Box::new(|args, _| args.out_grad.to_vec()),
        )
    }

    /// Elementwise addition of two same-shaped tensors.
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args, _| args.out_grad.to_vec()),
        )
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args, i| {
                if i == 0 {
                    args.out_grad.to_vec()
                } else {
                    args.out_grad.iter().map(|&g| -g).collect()
                }
            }),
        )
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args, i| {
                let other = args.parents[1 - i].data();
                args.out_grad
                    .iter()
                    .zip(other)
                    .map(|(&g, &o)| g * o)
                    .collect()
            }),
        )
    }

    /// Elementwise division.
    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a / b)
            .collect();
        Tensor::from_op(
            "div",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|args, i| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                if i == 0 {
                    args.out_grad.iter().zip(b).map(|(&g, &b)| g / b).collect()
                } else {
                    args.out_grad
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                }
            }),
        )
    }

    /// `k * x + c` elementwise with constants.
    pub fn affine(&self, k: f64, c: f64) -> Tensor<F> {
        let (kf, cf) = (F::of(k), F::of(c));
        let data = self.data().iter().map(|&x| kf * x + cf).collect();
        Tensor::from_op(
            "affine",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |args, _| args.out_grad.iter().map(|&g| g * kf).collect()),
        )
    }

    pub fn scale(&self, k: f64) -> Tensor<F> {
        self.affine(k, 0.0)
    }

    pub fn neg(&self) -> Tensor<F> {
        self.affine(-1.0, 0.0)
    }

    /// Matrix product `[m x k] x [k x n] -> [m x n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Tensor<F> {
        let (m, k) = self.rows_cols("matmul");
        let (k2, n) = other.rows_cols("matmul");
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ ({m}x{k} vs {k2}x{n})"
        );
        let data = matmul_raw(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args, i| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                if i == 0 {
                    // dA = dOut . B^T
                    matmul_raw_bt(args.out_grad, b, m, n, k)
                } else {
                    // dB = A^T . dOut
                    matmul_raw_at(a, args.out_grad, m, k, n)
                }
            }),
        )
    }

    /// `a . b^T` for `a: [m x k]`, `b: [n x k]` -> `[m x n]`.
    pub fn matmul_tb(&self, other: &Tensor<F>) -> Tensor<F> {
        let (m, k) = self.rows_cols("matmul_tb");
        let (n, k2) = other.rows_cols("matmul_tb");
        assert_eq!(k, k2, "matmul_tb: inner dimensions differ");
        let data = matmul_raw_bt(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul_tb",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args, i| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                if i == 0 {
                    // dA = dOut . B
                    matmul_raw(args.out_grad, b, m, n, k)
                } else {
                    // dB = dOut^T . A
                    matmul_raw_at(args.out_grad, a, m, n, k)
                }
            }),
        )
    }

    /// Matrix-vector product `[m x n] . [n] -> [m]`.
    pub fn matvec(&self, x: &Tensor<F>) -> Tensor<F> {
        let (m, n) = self.rows_cols("matvec");
        assert_eq!(
            x.shape(),
            &[n],
            "matvec: vector shape {:?} does not match matrix {m}x{n}",
            x.shape()
        );
        let w = self.data();
        let xv = x.data();
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += w[i * n + j].f64() * xv[j].f64();
            }
            out[i] = F::of(acc);
        }
        Tensor::from_op(
            "matvec",
            vec![m],
            out,
            vec![self.clone(), x.clone()],
            Box::new(move |args, i| {
                let w = args.parents[0].data();
                let xv = args.parents[1].data();
                let g = args.out_grad;
                if i == 0 {
                    // dW = g (outer) x
                    let mut dw = vec![F::zero(); m * n];
                    for r in 0..m {
                        for c in 0..n {
                            dw[r * n + c] = g[r] * xv[c];
                        }
                    }
                    dw
                } else {
                    // dx = W^T g
                    let mut dx = vec![F::zero(); n];
                    for c in 0..n {
                        let mut acc = 0.0f64;
                        for r in 0..m {
                            acc += w[r * n + c].f64() * g[r].f64();
                        }
                        dx[c] = F::of(acc);
                    }
                    dx
                }
            }),
        )
    }

    pub fn transpose(&self) -> Tensor<F> {
        let (m, n) = self.rows_cols("transpose");
        let src = self.data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Tensor::from_op(
            "transpose",
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                let mut g = vec![F::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = args.out_grad[j * m + i];
                    }
                }
                g
            }),
        )
    }

    /// Rows `[r0, r1)` of a matrix.
    pub fn row_slice(&self, r0: usize, r1: usize) -> Tensor<F> {
        let (m, n) = self.rows_cols("row_slice");
        assert!(r0 < r1 && r1 <= m, "row_slice: [{r0}, {r1}) out of {m} rows");
        let data = self.data()[r0 * n..r1 * n].to_vec();
        Tensor::from_op(
            "row_slice",
            vec![r1 - r0, n],
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                let mut g = vec![F::zero(); m * n];
                g[r0 * n..r1 * n].copy_from_slice(args.out_grad);
                g
            }),
        )
    }

    /// Single row of a matrix as a vector of length `n`.
    pub fn row(&self, r: usize) -> Tensor<F> {
        let (_, n) = self.rows_cols("row");
        self.row_slice(r, r + 1).reshape(vec![n])
    }

    /// Columns `[c0, c1)` of a matrix.
    pub fn col_slice(&self, c0: usize, c1: usize) -> Tensor<F> {
        let (m, n) = self.rows_cols("col_slice");
        assert!(c0 < c1 && c1 <= n, "col_slice: [{c0}, {c1}) out of {n} cols");
        let w = c1 - c0;
        let src = self.data();
        let mut data = vec![F::zero(); m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + c0..i * n + c1]);
        }
        Tensor::from_op(
            "col_slice",
            vec![m, w],
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                let mut g = vec![F::zero(); m * n];
                for i in 0..m {
                    g[i * n + c0..i * n + c1].copy_from_slice(&args.out_grad[i * w..(i + 1) * w]);
                }
                g
            }),
        )
    }

    /// Sum of all elements (f64 accumulation).
    pub fn sum(&self) -> Tensor<F> {
        let acc: f64 = self.data().iter().map(|v| v.f64()).sum();
        let n = self.len();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![F::of(acc)],
            vec![self.clone()],
            Box::new(move |args, _| vec![args.out_grad[0]; n]),
        )
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Tensor<F> {
        let n = self.len();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    /// Column means of a matrix: `[m x n] -> [n]`.
    pub fn mean_rows(&self) -> Tensor<F> {
        let (m, n) = self.rows_cols("mean_rows");
        let src = self.data();
        let mut out = vec![F::zero(); n];
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += src[i * n + j].f64();
            }
            out[j] = F::of(acc / m as f64);
        }
        Tensor::from_op(
            "mean_rows",
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |args, _| {
                let inv = F::of(1.0 / m as f64);
                let mut g = vec![F::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = args.out_grad[j] * inv;
                    }
                }
                g
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let one = F::one();
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        Tensor::from_op(
            "sigmoid",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|args, _| {
                args.out_grad
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &s)| g * s * (F::one() - s))
                    .collect()
            }),
        )
    }

    pub fn tanh_fn(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(
            "tanh",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|args, _| {
                args.out_grad
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &t)| g * (F::one() - t * t))
                    .collect()
            }),
        )
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<F> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<F> = self
            .data()
            .iter()
            .map(|&x| {
                let x = x.f64();
                let u = C * (x + A * x * x * x);
                F::of(0.5 * x * (1.0 + u.tanh()))
            })
            .collect();
        Tensor::from_op(
            "gelu",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|args, _| {
                let x = args.parents[0].data();
                args.out_grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let x = x.f64();
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        let du = C * (1.0 + 3.0 * A * x * x);
                        F::of(g.f64() * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du))
                    })
                    .collect()
            }),
        )
    }

    pub fn sqrt_fn(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|&x| x.sqrt()).collect();
        Tensor::from_op(
            "sqrt",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(|args, _| {
                let half = F::of(0.5);
                args.out_grad
                    .iter()
                    .zip(args.out)
                    .map(|(&g, &s)| g * half / s)
                    .collect()
            }),
        )
    }

    /// Add a length-`n` vector to every row of an `[m x n]` matrix.
    pub fn broadcast_add_row(&self, row: &Tensor<F>) -> Tensor<F> {
        let (m, n) = self.rows_cols("broadcast_add_row");
        assert_eq!(
            row.shape(),
            &[n],
            "broadcast_add_row: row shape {:?} vs {n} cols",
            row.shape()
        );
        let src = self.data();
        let rv = row.data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + rv[j];
            }
        }
        Tensor::from_op(
            "broadcast_add_row",
            vec![m, n],
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |args, i| {
                if i == 0 {
                    args.out_grad.to_vec()
                } else {
                    let mut g = vec![F::zero(); n];
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for r in 0..m {
                            acc += args.out_grad[r * n + j].f64();
                        }
                        g[j] = F::of(acc);
                    }
                    g
                }
            }),
        )
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&self, axis: usize) -> Tensor<F> {
        match self.shape() {
            [n] => {
                assert_eq!(axis, 0, "softmax: axis {axis} out of range for vector");
                assert!(*n > 0, "softmax: empty axis");
                self.reshape(vec![1, *n]).softmax_rows().reshape(vec![*n])
            }
            [_, n] => match axis {
                1 => {
                    assert!(*n > 0, "softmax: empty axis");
                    self.softmax_rows()
                }
                0 => self.transpose().softmax_rows().transpose(),
                _ => panic!("softmax: axis {axis} out of range for matrix"),
            },
            s => panic!("softmax: unsupported shape {s:?}"),
        }
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Tensor<F> {
        let (m, n) = self.rows_cols("softmax_rows");
        assert!(n > 0, "softmax_rows: empty rows");
        let src = self.data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            softmax_row_into(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        Tensor::from_op(
            "softmax_rows",
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                // dx = s * (g - <g, s>) per row
                let mut grad = vec![F::zero(); m * n];
                for i in 0..m {
                    let s = &args.out[i * n..(i + 1) * n];
                    let g = &args.out_grad[i * n..(i + 1) * n];
                    let dot: f64 = s.iter().zip(g).map(|(&s, &g)| s.f64() * g.f64()).sum();
                    for j in 0..n {
                        grad[i * n + j] = F::of(s[j].f64() * (g[j].f64() - dot));
                    }
                }
                grad
            }),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm_rows(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
        let (m, n) = self.rows_cols("layer_norm_rows");
        assert_eq!(gamma.shape(), &[n], "layer_norm_rows: gamma shape");
        assert_eq!(beta.shape(), &[n], "layer_norm_rows: beta shape");
        let src = self.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut data = vec![F::zero(); m * n];
        let mut xhat = vec![0.0f64; m * n];
        let mut inv_std = vec![0.0f64; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu: f64 = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var: f64 =
                row.iter().map(|v| (v.f64() - mu) * (v.f64() - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j].f64() - mu) * is;
                xhat[i * n + j] = xh;
                data[i * n + j] = F::of(gv[j].f64() * xh + bv[j].f64());
            }
        }
        Tensor::from_op(
            "layer_norm_rows",
            vec![m, n],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |args, p| {
                let g = args.out_grad;
                match p {
                    0 => {
                        let gv = args.parents[1].data();
                        let mut grad = vec![F::zero(); m * n];
                        for i in 0..m {
                            // d = g * gamma; dx = (d - mean(d) - xhat * mean(d*xhat)) * inv_std
                            let mut mean_d = 0.0f64;
                            let mut mean_dx = 0.0f64;
                            for j in 0..n {
                                let d = g[i * n + j].f64() * gv[j].f64();
                                mean_d += d;
                                mean_dx += d * xhat[i * n + j];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for j in 0..n {
                                let d = g[i * n + j].f64() * gv[j].f64();
                                grad[i * n + j] = F::of(
                                    (d - mean_d - xhat[i * n + j] * mean_dx) * inv_std[i],
                                );
                            }
                        }
                        grad
                    }
                    1 => {
                        let mut grad = vec![F::zero(); n];
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += g[i * n + j].f64() * xhat[i * n + j];
                            }
                            grad[j] = F::of(acc);
                        }
                        grad
                    }
                    _ => {
                        let mut grad = vec![F::zero(); n];
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += g[i * n + j].f64();
                            }
                            grad[j] = F::of(acc);
                        }
                        grad
                    }
                }
            }),
        )
    }

    /// Gather rows of a `[V x d]` table: output `[ids.len() x d]`.
    /// Backward scatter-adds into the table, so repeated ids accumulate.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Tensor<F> {
        let (v, d) = self.rows_cols("embedding_lookup");
        let src = self.data();
        let l = ids.len();
        assert!(l > 0, "embedding_lookup: empty id list");
        let mut data = vec![F::zero(); l * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < v, "embedding_lookup: id {id} out of vocabulary {v}");
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Tensor::from_op(
            "embedding_lookup",
            vec![l, d],
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                let mut g = vec![F::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += args.out_grad[i * d + j];
                    }
                }
                g
            }),
        )
    }

    /// Inverted dropout: keeps elements with probability `1 - rate` and
    /// scales them by `1 / (1 - rate)`. The mask is drawn from the caller's
    /// RNG stream.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
        use rand::Rng;
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} not in [0, 1)");
        if rate == 0.0 {
            return self.affine(1.0, 0.0);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<F> = (0..self.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    F::of(keep)
                }
            })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Tensor::from_op(
            "dropout",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |args, _| {
                args.out_grad
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| g * m)
                    .collect()
            }),
        )
    }

    /// Mean cross-entropy between row logits and integer labels, restricted
    /// to rows with `Some(label)`. Panics if no row is labeled.
    pub fn masked_cross_entropy(&self, labels: &[Option<u32>]) -> Tensor<F> {
        let (m, v) = self.rows_cols("masked_cross_entropy");
        assert_eq!(labels.len(), m, "masked_cross_entropy: {m} rows vs {} labels", labels.len());
        let labeled: Vec<(usize, usize)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|t| (i, t as usize)))
            .collect();
        assert!(!labeled.is_empty(), "masked_cross_entropy: no labeled positions");
        for &(_, t) in &labeled {
            assert!(t < v, "masked_cross_entropy: label {t} out of vocabulary {v}");
        }
        let src = self.data();
        let k = labeled.len() as f64;
        let mut probs: Vec<f64> = Vec::with_capacity(labeled.len() * v);
        let mut loss = 0.0f64;
        for &(row, target) in &labeled {
            let logits = &src[row * v..(row + 1) * v];
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.f64()));
            let mut denom = 0.0f64;
            for &x in logits {
                denom += (x.f64() - max).exp();
            }
            let log_denom = denom.ln();
            for &x in logits {
                probs.push(((x.f64() - max) - log_denom).exp());
            }
            loss -= (logits[target].f64() - max) - log_denom;
        }
        loss /= k;
        let labeled2 = labeled.clone();
        Tensor::from_op(
            "masked_cross_entropy",
            vec![1],
            vec![F::of(loss)],
            vec![self.clone()],
            Box::new(move |args, _| {
                let g = args.out_grad[0].f64() / k;
                let mut grad = vec![F::zero(); m * v];
                for (li, &(row, target)) in labeled2.iter().enumerate() {
                    let p = &probs[li * v..(li + 1) * v];
                    for j in 0..v {
                        let delta = if j == target { 1.0 } else { 0.0 };
                        grad[row * v + j] = F::of(g * (p[j] - delta));
                    }
                }
                grad
            }),
        )
    }

    /// Convert elements to another scalar type. Not differentiable.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::leaf(
            self.node.shape.to_vec(),
            self.data().iter().map(|&v| G::of(v.f64())).collect(),
            false,
        )
    }
}

/// Elementwise sum of any number of same-shaped tensors.
pub fn add_n<F: Scalar>(terms: &[Tensor<F>]) -> Tensor<F> {
    assert!(!terms.is_empty(), "add_n: no terms");
    let shape = terms[0].shape().to_vec();
    for t in terms {
        assert_eq!(t.shape(), &shape[..], "add_n: shape mismatch");
    }
    let n = terms[0].len();
    let mut data = vec![F::zero(); n];
    for i in 0..n {
        let mut acc = 0.0f64;
        for t in terms {
            acc += t.data()[i].f64();
        }
        data[i] = F::of(acc);
    }
    Tensor::from_op(
        "add_n",
        shape,
        data,
        terms.to_vec(),
        Box::new(|args, _| args.out_grad.to_vec()),
    )
}

/// Stack matrices with equal column counts on top of each other.
pub fn concat_rows<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty(), "concat_rows: no parts");
    let n = parts[0].rows_cols("concat_rows").1;
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let (m, n2) = p.rows_cols("concat_rows");
        assert_eq!(n, n2, "concat_rows: column mismatch");
        rows.push(m);
        data.extend_from_slice(p.data());
    }
    let total: usize = rows.iter().sum();
    Tensor::from_op(
        "concat_rows",
        vec![total, n],
        data,
        parts.to_vec(),
        Box::new(move |args, i| {
            let before: usize = rows[..i].iter().sum();
            args.out_grad[before * n..(before + rows[i]) * n].to_vec()
        }),
    )
}

/// Concatenate matrices with equal row counts side by side.
pub fn concat_cols<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty(), "concat_cols: no parts");
    let m = parts[0].rows_cols("concat_cols").0;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (m2, w) = p.rows_cols("concat_cols");
            assert_eq!(m, m2, "concat_cols: row mismatch");
            w
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![F::zero(); m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let src = p.data();
        for r in 0..m {
            data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        off += w;
    }
    Tensor::from_op(
        "concat_cols",
        vec![m, total],
        data,
        parts.to_vec(),
        Box::new(move |args, i| {
            let off: usize = widths[..i].iter().sum();
            let w = widths[i];
            let mut g = vec![F::zero(); m * w];
            for r in 0..m {
                g[r * w..(r + 1) * w]
                    .copy_from_slice(&args.out_grad[r * total + off..r * total + off + w]);
            }
            g
        }),
    )
}

/// Inner product of two equal-length vectors.
pub fn dot<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    a.mul(b).sum()
}

fn softmax_row_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.f64()));
    let mut denom = 0.0f64;
    let mut exps = vec![0.0f64; row.len()];
    for (e, &x) in exps.iter_mut().zip(row) {
        *e = (x.f64() - max).exp();
        denom += *e;
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = F::of(e / denom);
    }
}

/// Stable softmax of a plain slice. Inference-path helper; no graph.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p].f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let arow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                arow[j] += aip * brow[j].f64();
            }
        }
    }
    acc.into_iter().map(F::of).collect()
}

/// `a . b^T` with `a: [m x k]`, `b: [n x k]`.
fn matmul_raw_bt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += arow[p].f64() * brow[p].f64();
            }
            out[i * n + j] = F::of(acc);
        }
    }
    out
}

/// `a^T . b` with `a: [m x k]`, `b: [m x n]` -> `[k x n]`.
fn matmul_raw_at<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p].f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j].f64();
            }
        }
    }
    acc.into_iter().map(F::of).collect()
}

/// Gradients of a scalar loss with respect to `requires_grad` leaves,
/// keyed by tensor id.
pub struct Gradients<F: Scalar> {
    map: HashMap<u64, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, leaf: &Tensor<F>) -> Option<&[F]> {
        self.map.get(&leaf.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: u64, grad: Vec<F>) {
        self.map.insert(id, grad);
    }

    pub fn by_id(&self, id: u64) -> Option<&[F]> {
        self.map.get(&id).map(|v| v.as_slice())
    }
}

/// Reverse-mode differentiation of a scalar loss. Returns one gradient per
/// reachable `requires_grad` leaf. Pure: repeated calls recompute from
/// scratch and never accumulate.
pub fn backward<F: Scalar>(loss: &Tensor<F>) -> Gradients<F> {
    assert_eq!(
        loss.len(),
        1,
        "backward: loss must be scalar, got shape {:?}",
        loss.shape()
    );

    // Iterative DFS postorder; reversed it is a topological order from the
    // loss toward the leaves.
    let mut order: Vec<Tensor<F>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<F>, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child)) = stack.pop() {
        if child < node.node.parents.len() {
            stack.push((node.clone(), child + 1));
            let parent = node.node.parents[child].clone();
            if parent.node.needs_grad && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
    grads.insert(loss.id(), vec![F::one()]);
    let mut result = Gradients { map: HashMap::new() };

    for t in order.iter().rev() {
        let node = &t.node;
        let Some(grad) = grads.remove(&node.id) else {
            continue;
        };
        if let Some(vjp) = &node.vjp {
            let args = VjpArgs {
                out_grad: &grad,
                out: &node.data,
                parents: &node.parents,
            };
            for (i, parent) in node.parents.iter().enumerate() {
                if !parent.node.needs_grad {
                    continue;
                }
                let pg = vjp(&args, i);
                debug_assert_eq!(pg.len(), parent.len(), "vjp output size");
                match grads.entry(parent.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, b) in e.get_mut().iter_mut().zip(pg) {
                            *a += b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        if node.leaf_grad {
            result.map.insert(node.id, grad);
        }
    }
    result
}

/// Write a tensor in the raw tensor file format: one JSON header line
/// `{"dtype":"f32","shape":[...]}` followed by the little-endian IEEE-754
/// payload in row-major order.
pub fn write_tensor<F: Scalar, W: Write>(w: &mut W, t: &Tensor<F>) -> std::io::Result<()> {
    let header = serde_json::json!({"dtype": F::DTYPE, "shape": t.shape()});
    writeln!(w, "{header}")?;
    let mut buf = Vec::with_capacity(t.len() * F::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Read a tensor written by [`write_tensor`]. The stored dtype must match `F`.
pub fn read_tensor<F: Scalar, R: Read>(r: &mut R) -> std::io::Result<Tensor<F>> {
    let mut reader = std::io::BufReader::new(r);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let meta: serde_json::Value = serde_json::from_str(header.trim())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let dtype = meta["dtype"].as_str().unwrap_or_default();
    if dtype != F::DTYPE {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("dtype mismatch: file has {dtype}, expected {}", F::DTYPE),
        ));
    }
    let shape: Vec<usize> = meta["shape"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as usize)).collect())
        .unwrap_or_default();
    let n = numel(&shape);
    let mut payload = vec![0u8; n * F::BYTES];
    reader.read_exact(&mut payload)?;
    let data = payload.chunks_exact(F::BYTES).map(F::read_le).collect();
    Ok(Tensor::leaf(shape, data, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::leaf(shape, data, true)
    }

    #[test]
    fn matmul_identity() {
        let i2 = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = i2.matmul(&a);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_row_select() {
        let p = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let b = t64(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let out = p.matmul(&b);
        assert_eq!(out.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(3usize, 4usize, 2usize), (32, 32, 32), (5, 1, 9)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = t64(vec![m, k], a.clone()).matmul(&t64(vec![k, n], b.clone()));
            // naive triple loop, plainly indexed
            for i in 0..m {
                for j in 0..n {
                    let mut expect = 0.0;
                    for p in 0..k {
                        expect += a[i * k + p] * b[p * n + j];
                    }
                    assert_abs_diff_eq!(out.data()[i * n + j], expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "inner dimensions differ")]
    fn matmul_shape_mismatch_panics() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![2, 2], vec![0.0; 4]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let x = t64(vec![2], vec![0.0, 0.0]);
        assert_eq!(x.softmax(0).data(), &[0.5, 0.5]);
        // huge equal logits must not overflow
        let big = t64(vec![2], vec![1000.0, 1000.0]);
        assert_eq!(big.softmax(0).data(), &[0.5, 0.5]);
        // softmax(x) == softmax(x + c)
        let a = t64(vec![3], vec![0.3, -1.2, 2.0]);
        let b = a.affine(1.0, 17.5);
        for (x, y) in a.softmax(0).data().iter().zip(b.softmax(0).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_exp_normalize_case() {
        let x = t64(vec![2], vec![0.0, 3.0f64.ln()]);
        let s = x.softmax(0);
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..63).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let s = t64(vec![9, 7], data).softmax_rows();
        for i in 0..9 {
            let row = &s.data()[i * 7..(i + 1) * 7];
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_axis_zero_matches_transposed_rows() {
        let x = t64(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.5]);
        let a = x.softmax(0);
        for j in 0..3 {
            let col = [x.data()[j], x.data()[3 + j]];
            let m = col[0].max(col[1]);
            let e0 = (col[0] - m).exp();
            let e1 = (col[1] - m).exp();
            assert_abs_diff_eq!(a.data()[j], e0 / (e0 + e1), epsilon = 1e-12);
            assert_abs_diff_eq!(a.data()[3 + j], e1 / (e0 + e1), epsilon = 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "empty axis")]
    fn softmax_empty_axis_panics() {
        let x = Tensor::<f64>::leaf(vec![2, 0], vec![], false);
        let _ = x.softmax(1);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let x = t64(vec![2, 3], vec![0.1, -0.4, 2.0, 3.0, -1.0, 0.0]);
        let grads = backward(&x.sum());
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_is_pure_and_repeatable() {
        let x = t64(vec![3], vec![1.0, 2.0, 3.0]);
        let loss = x.mul(&x).sum();
        let g1 = backward(&loss);
        let g2 = backward(&loss);
        assert_eq!(g1.get(&x).unwrap(), g2.get(&x).unwrap());
        assert_eq!(g1.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let x = t64(vec![2], vec![1.0, 2.0]);
        let _ = backward(&x.mul(&x));
    }

    #[test]
    fn shared_parent_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let x = t64(vec![1], vec![3.0]);
        let y = x.mul(&x).add(&x).sum();
        let g = backward(&y);
        assert_abs_diff_eq!(g.get(&x).unwrap()[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn frozen_leaves_are_skipped() {
        let x = Tensor::leaf(vec![2], vec![1.0f64, 2.0], false);
        let w = t64(vec![2], vec![3.0, 4.0]);
        let loss = x.mul(&w).sum();
        let g = backward(&loss);
        assert!(g.get(&x).is_none());
        assert_eq!(g.get(&w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn embedding_lookup_scatter_adds_repeated_ids() {
        let table = t64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = table.embedding_lookup(&[1, 1, 0]);
        assert_eq!(out.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = backward(&out.sum());
        assert_eq!(g.get(&table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = t64(vec![1000], vec![1.0; 1000]);
        let d = x.dropout(0.25, &mut rng);
        let kept = d.data().iter().filter(|&&v| v > 0.0).count();
        assert!((600..900).contains(&kept), "kept {kept} of 1000 at rate 0.25");
        for &v in d.data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_cross_entropy_hand_case() {
        // 3 rows, vocab 2; label only the first and last rows.
        let logits = t64(vec![3, 2], vec![0.0, 0.0, 5.0, -5.0, 2.0, 0.0]);
        let labels = [Some(0), None, Some(1)];
        let loss = logits.masked_cross_entropy(&labels);
        // row 0: -ln 0.5; row 2: -ln(e^0/(e^2+e^0))
        let expect = (0.5f64.ln() * -1.0 + (1.0 / (2.0f64.exp() + 1.0)).ln() * -1.0) / 2.0;
        assert_abs_diff_eq!(loss.item(), expect, epsilon = 1e-12);
    }

    #[test]
    fn masked_cross_entropy_uniform_is_log_vocab() {
        let v = 7;
        let logits = t64(vec![2, v], vec![0.0; 2 * v]);
        let loss = logits.masked_cross_entropy(&[Some(3), Some(0)]);
        assert_abs_diff_eq!(loss.item(), (v as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t64(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let b = t64(vec![2, 3], vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let c = concat_rows(&[a.clone(), b.clone()]);
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.row_slice(1, 3).data(), b.data());
        let g = backward(&c.row_slice(0, 1).sum());
        assert_eq!(g.get(&a).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(&b).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn col_ops_round_trip() {
        let x = t64(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = x.col_slice(0, 2);
        let right = x.col_slice(2, 4);
        assert_eq!(left.data(), &[1.0, 2.0, 5.0, 6.0]);
        let back = concat_cols(&[left, right]);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn tensor_file_round_trip() {
        let t = Tensor::<f32>::leaf(vec![2, 3], vec![1.5, -2.25, 0.0, 3.5e-4, 7.0, -0.125], false);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        assert!(std::str::from_utf8(&buf[..header_end]).unwrap().contains("\"dtype\":\"f32\""));
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tensor_file_rejects_wrong_dtype() {
        let t = Tensor::<f32>::leaf(vec![1], vec![1.0], false);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());
    }
}

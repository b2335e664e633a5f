use std::cell::{Cell, Ref, RefCell};
use std::ops::Range;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Reshape(usize),
    RepeatRows { src: usize, times: usize },
    SumRowGroups { src: usize, group: usize },
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax { src: usize, axis: usize },
    Sum(usize),
    SumAxis { src: usize, axis: usize },
    WeightedSqNorm { src: usize, weight: f64 },
    Sqrt(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run gradient tape. Single-threaded; build one per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    finished: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// A leaf that receives a gradient but is not a parameter.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Alias of [`Tape::leaf`] for values whose gradient is not needed.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Var<'_>> {
        self.push(store.get(id).clone(), Op::Param(id), "param")
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(
        &self,
        a: Var<'_>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var<'_>> {
        let out = self.value(a.id).map(f);
        self.push(out, op, name)
    }

    fn same_shape(&self, name: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
        let (sa, sb) = (a.dims(), b.dims());
        if sa != sb {
            return Err(Error::shape(name, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(())
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        self.same_shape(name, a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.zip(&nodes[b.id].value, f)
        };
        self.push(out, op, name)
    }

    /// Reverse sweep from a scalar root. A tape can be swept once.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Backward("root belongs to another tape".into()));
        }
        if self.finished.replace(true) {
            return Err(Error::Backward(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            let (r, c) = nodes[root.id].value.dims();
            return Err(Error::Backward(format!("root must be scalar, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.zip(val(*b), |x, y| x * y));
                    acc(&mut grads, *b, g.zip(val(*a), |x, y| x * y));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims();
                    let n = val(*b).cols();
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), (n as isize, 1), val(*b).data(), (1, n as isize), ga.data_mut(), false);
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, val(*a).data(), (1, k as isize), g.data(), (n as isize, 1), gb.data_mut(), false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let (r, c) = g.dims();
                    let mut gb = Tensor::zeros(1, c);
                    for i in 0..r {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = val(p).dims();
                        let piece = if *axis == 0 {
                            let c = g.cols();
                            Tensor::matrix(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec())
                                .expect("concat grad shape")
                        } else {
                            slice_cols(&g, offset, pc)
                        };
                        offset += if *axis == 0 { pr } else { pc };
                        acc(&mut grads, p, piece);
                    }
                }
                Op::Slice { src, axis, start } => {
                    let (sr, sc) = val(*src).dims();
                    let mut gs = Tensor::zeros(sr, sc);
                    let (gr, gc) = g.dims();
                    if *axis == 0 {
                        gs.data_mut()[start * sc..(start + gr) * sc].copy_from_slice(g.data());
                    } else {
                        for i in 0..gr {
                            gs.data_mut()[i * sc + start..i * sc + start + gc]
                                .copy_from_slice(g.row_slice(i));
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::Reshape(src) => {
                    let (r, c) = val(*src).dims();
                    acc(&mut grads, *src, g.clone().reshaped(r, c));
                }
                Op::RepeatRows { src, times } => {
                    acc(&mut grads, *src, sum_row_groups(&g, *times));
                }
                Op::SumRowGroups { src, group } => {
                    acc(&mut grads, *src, repeat_rows(&g, *group));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.zip(&node.value, |gv, y| gv * (1.0 - y * y)));
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.zip(&node.value, |gv, y| gv * y * (1.0 - y)));
                }
                Op::Gelu(a) => {
                    let d = val(*a).map(|x| normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp());
                    acc(&mut grads, *a, g.zip(&d, |gv, dv| gv * dv));
                }
                Op::Softmax { src, axis } => {
                    let y = &node.value;
                    let gy = g.zip(y, |a, b| a * b);
                    let s = reduce_axis(&gy, *axis);
                    let (r, c) = y.dims();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = if *axis == 0 { j } else { i };
                            out.data_mut()[i * c + j] = y.get(i, j) * (g.get(i, j) - s.data()[k]);
                        }
                    }
                    acc(&mut grads, *src, out);
                }
                Op::Sum(src) => {
                    let (r, c) = val(*src).dims();
                    acc(&mut grads, *src, Tensor::filled(r, c, g.item()));
                }
                Op::SumAxis { src, axis } => {
                    let (r, c) = val(*src).dims();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = if *axis == 0 { j } else { i };
                            out.data_mut()[i * c + j] = g.data()[k];
                        }
                    }
                    acc(&mut grads, *src, out);
                }
                Op::WeightedSqNorm { src, weight } => {
                    let s = 2.0 * weight * g.item();
                    acc(&mut grads, *src, val(*src).map(|x| s * x));
                }
                Op::Sqrt(a) => {
                    acc(&mut grads, *a, g.zip(&node.value, |gv, y| gv * 0.5 / y));
                }
            }
            // Keep gradients of leaves for inspection.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[id] = Some(g);
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (r, c) = t.dims();
    let mut out = Vec::with_capacity(r * len);
    for i in 0..r {
        out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
    }
    Tensor::matrix(r, len, out).expect("slice shape")
}

fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = t.dims();
    let mut out = Vec::with_capacity(r * times * c);
    for i in 0..r {
        for _ in 0..times {
            out.extend_from_slice(t.row_slice(i));
        }
    }
    Tensor::matrix(r * times, c, out).expect("repeat shape")
}

fn sum_row_groups(t: &Tensor, group: usize) -> Tensor {
    let (r, c) = t.dims();
    let mut out = Tensor::zeros(r / group, c);
    for i in 0..r {
        let dst = &mut out.data_mut()[(i / group) * c..(i / group + 1) * c];
        for (o, v) in dst.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    out
}

/// Sum along `axis`; the result is a flat vector of the remaining extent.
fn reduce_axis(t: &Tensor, axis: usize) -> Tensor {
    let (r, c) = t.dims();
    if axis == 0 {
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out
    } else {
        Tensor::matrix(r, 1, (0..r).map(|i| t.row_slice(i).iter().sum()).collect())
            .expect("reduce shape")
    }
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf or parameter node.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients aligned with `store`. A parameter placed on
    /// the tape more than once receives the sum. Parameters that the root
    /// does not depend on get zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Option<Tensor>> = vec![None; store.len()];
        for &(node, pid) in &self.params {
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                match &mut out[pid.0] {
                    Some(t) => t.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    log::warn!("parameter {} is detached from the loss", store.name(ParamId(i)));
                    let (r, c) = store.get(ParamId(i)).dims();
                    Tensor::zeros(r, c)
                })
            })
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.value(self.id).dims()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, o, "add", Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, o, "sub", Op::Sub(self.id, o.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, o, "mul", Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.tape.unary(self, "scale", Op::Scale(self.id, s), |a| a * s)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.tape.unary(self, "add_scalar", Op::AddScalar(self.id), |a| a + s)
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.dims();
        let (k2, n) = o.dims();
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = Tensor::zeros(m, n);
        {
            let nodes = self.tape.nodes.borrow();
            gemm(
                m,
                k,
                n,
                nodes[self.id].value.data(),
                (k as isize, 1),
                nodes[o.id].value.data(),
                (n as isize, 1),
                out.data_mut(),
                false,
            );
        }
        self.tape.push(out, Op::MatMul(self.id, o.id), "matmul")
    }

    /// Matrix-vector product with an `n x 1` column.
    pub fn matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = v.dims();
        if c != 1 {
            return Err(Error::shape("matvec", &[self.dims().0, self.dims().1], &[r, c]));
        }
        self.matmul(v)
    }

    /// Adds a `1 x n` row to every row (bias-add).
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        let (br, bc) = bias.dims();
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", &[r, c], &[br, bc]));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let b = nodes[bias.id].value.data();
            let mut out = nodes[self.id].value.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, v) in row.iter_mut().zip(b) {
                    *o += v;
                }
            }
            out
        };
        self.tape.push(out, Op::AddRow(self.id, bias.id), "add_row")
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.unary(self, "tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.unary(self, "sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.tape.unary(self, "gelu", Op::Gelu(self.id), gelu)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.tape.unary(self, "sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        check_axis("softmax", axis)?;
        let out = {
            let v = self.tape.value(self.id);
            let (r, c) = v.dims();
            let mut out = v.clone();
            let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
            let d = out.data_mut();
            for o in 0..outer {
                let idx = |i: usize| o * stride_o + i * stride_i;
                let max = (0..inner).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..inner {
                    let e = (d[idx(i)] - max).exp();
                    d[idx(i)] = e;
                    total += e;
                }
                for i in 0..inner {
                    d[idx(i)] /= total;
                }
            }
            out
        };
        self.tape.push(out, Op::Softmax { src: self.id, axis }, "softmax")
    }

    /// Sum of all elements, `1 x 1`.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    /// Sum along `axis`: axis 0 gives `1 x cols`, axis 1 gives `rows x 1`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        check_axis("sum_axis", axis)?;
        let out = reduce_axis(&self.tape.value(self.id), axis);
        self.tape.push(out, Op::SumAxis { src: self.id, axis }, "sum_axis")
    }

    /// `weight · ‖x‖²` over all elements, `1 x 1`.
    pub fn weighted_sq_norm(self, weight: f64) -> Result<Var<'t>> {
        let s = weight * self.tape.value(self.id).data().iter().map(|v| v * v).sum::<f64>();
        self.tape.push(
            Tensor::scalar(s),
            Op::WeightedSqNorm { src: self.id, weight },
            "weighted_sq_norm",
        )
    }

    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t>> {
        check_axis("slice", axis)?;
        let (r, c) = self.dims();
        let extent = if axis == 0 { r } else { c };
        if range.start > range.end || range.end > extent {
            return Err(Error::shape("slice", &[r, c], &[range.start, range.end]));
        }
        let out = {
            let v = self.tape.value(self.id);
            if axis == 0 {
                Tensor::matrix(range.len(), c, v.data()[range.start * c..range.end * c].to_vec())?
            } else {
                slice_cols(&v, range.start, range.len())
            }
        };
        self.tape.push(
            out,
            Op::Slice {
                src: self.id,
                axis,
                start: range.start,
            },
            "slice",
        )
    }

    /// Columns `range` (shorthand for `slice(1, range)`).
    pub fn cols(self, range: Range<usize>) -> Result<Var<'t>> {
        self.slice(1, range)
    }

    pub fn col(self, j: usize) -> Result<Var<'t>> {
        self.slice(1, j..j + 1)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if r * c != rows * cols {
            return Err(Error::shape("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value().reshaped(rows, cols);
        self.tape.push(out, Op::Reshape(self.id), "reshape")
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'t>> {
        if times == 0 {
            return Err(Error::shape("repeat_rows", &[self.dims().0, self.dims().1], &[0]));
        }
        let out = repeat_rows(&self.tape.value(self.id), times);
        self.tape.push(out, Op::RepeatRows { src: self.id, times }, "repeat_rows")
    }

    /// Sums each run of `group` consecutive rows (adjoint of `repeat_rows`).
    pub fn sum_row_groups(self, group: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if group == 0 || r % group != 0 {
            return Err(Error::shape("sum_row_groups", &[r, c], &[group]));
        }
        let out = sum_row_groups(&self.tape.value(self.id), group);
        self.tape.push(out, Op::SumRowGroups { src: self.id, group }, "sum_row_groups")
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(op, &[axis], &[0, 1]));
    }
    Ok(())
}

/// Concatenate along `axis` (0: stack rows, 1: join columns).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    check_axis("concat", axis)?;
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat (no parts)", &[], &[]))?;
    let tape = first.tape;
    let (r0, c0) = first.dims();
    for p in &parts[1..] {
        let (r, c) = p.dims();
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
            return Err(Error::shape("concat", &[r0, c0], &[r, c]));
        }
    }
    let out = {
        let nodes = tape.nodes.borrow();
        if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row_slice(i));
                }
            }
            Tensor::matrix(r0, cols, data)?
        }
    };
    tape.push(
        out,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        "concat",
    )
}

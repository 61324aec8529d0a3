//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its variables. Parameter
//! leaves read their values from a borrowed [`ParameterStore`]; calling
//! [`Graph::backward`] on a scalar returns the gradients of every parameter
//! the scalar depends on.
//!
//! The primitive set is deliberately small: affine maps, elementwise
//! activations, masked log-softmax and log-sum-exp, row gathers, constant
//! sparse linear maps over column vectors, and elementwise arithmetic.

use std::collections::HashMap;

use ndarray::{Array2, Axis, Zip};

use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix applied to a column vector: output row `r` is
/// `Σ coeff · x[index]` over `rows[r]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows<S> {
    pub rows: Vec<Vec<(usize, S)>>,
}

impl<S: Scalar> SparseRows<S> {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<(usize, S)>) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug)]
enum Op<S> {
    Constant,
    Param(ParamId),
    Affine { x: usize, w: usize, b: usize },
    Activate { x: usize, act: Activation },
    MaskedLogSoftmax { x: usize, mask: Array2<bool> },
    MaskedLogSumExp { x: usize, mask: Array2<bool> },
    SelectRows { x: usize, rows: Vec<usize> },
    Pick { x: usize, cols: Vec<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { x: usize, factor: S },
    Square { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Linear { x: usize, map: SparseRows<S> },
    Concat { parts: Vec<usize> },
    SegmentLogSumExp { x: usize, segments: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Array2<S>,
    op: Op<S>,
}

/// Gradients of a scalar with respect to the parameters it reached.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    entries: Vec<(ParamId, Array2<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<S>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<S>)> {
        self.entries.iter().map(|(p, g)| (*p, g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct Graph<'s, S: Scalar> {
    store: &'s ParameterStore<S>,
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<'s, S: Scalar> Graph<'s, S> {
    pub fn new(store: &'s ParameterStore<S>) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParameterStore<S> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` variable.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Values of an `n × 1` variable.
    pub fn column(&self, v: Var) -> Vec<S> {
        self.nodes[v.0].value.column(0).to_vec()
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn column_constant(&mut self, values: &[S]) -> Var {
        let arr = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column");
        self.constant(arr)
    }

    pub fn scalar_constant(&mut self, value: S) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `x · w + b` with `x: n × i`, `w: i × o`, `b: 1 × o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        if i != wi || self.shape(b) != (1, o) {
            return Err(Error::Shape(format!(
                "affine of {:?} by {:?} + {:?}",
                (n, i),
                (wi, o),
                self.shape(b)
            )));
        }
        let value = self.value(x).dot(self.value(w)) + self.value(b);
        Ok(self.push(value, Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let value = match act {
            Activation::Relu => self.value(x).mapv(|v| if v > S::zero() { v } else { S::zero() }),
            Activation::Tanh => self.value(x).mapv(S::tanh),
        };
        self.push(value, Op::Activate { x: x.0, act })
    }

    /// Row-wise log-softmax over the unmasked entries. Masked entries are
    /// exactly `-inf` and receive no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        self.check_mask(x, mask)?;
        let xv = self.value(x);
        let mut out = Array2::from_elem(xv.dim(), S::neg_infinity());
        for (r, (row, mrow)) in xv.rows().into_iter().zip(mask.rows()).enumerate() {
            let lse = masked_row_lse(row.iter().copied(), mrow.iter().copied());
            if !lse.is_finite() {
                return Err(Error::NonFinite { what: format!("log-softmax normalizer of row {r}") });
            }
            for (c, (&v, &m)) in row.iter().zip(mrow.iter()).enumerate() {
                if m {
                    out[[r, c]] = v - lse;
                }
            }
        }
        Ok(self.push(out, Op::MaskedLogSoftmax { x: x.0, mask: mask.clone() }))
    }

    /// Row-wise log-sum-exp over the unmasked entries, `n × 1`.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        self.check_mask(x, mask)?;
        let xv = self.value(x);
        let out: Vec<S> = xv
            .rows()
            .into_iter()
            .zip(mask.rows())
            .map(|(row, mrow)| masked_row_lse(row.iter().copied(), mrow.iter().copied()))
            .collect();
        let value = Array2::from_shape_vec((out.len(), 1), out).expect("column");
        Ok(self.push(value, Op::MaskedLogSumExp { x: x.0, mask: mask.clone() }))
    }

    fn check_mask(&self, x: Var, mask: &Array2<bool>) -> Result<()> {
        if mask.dim() != self.shape(x) {
            return Err(Error::Shape(format!("mask {:?} for tensor {:?}", mask.dim(), self.shape(x))));
        }
        if let Some(row) = mask.rows().into_iter().position(|r| !r.iter().any(|&m| m)) {
            return Err(Error::EmptyMask { row });
        }
        Ok(())
    }

    /// `out[r] = x[rows[r]]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of {n}")));
        }
        let value = self.value(x).select(Axis(0), rows);
        Ok(self.push(value, Op::SelectRows { x: x.0, rows: rows.to_vec() }))
    }

    /// `out[r, 0] = x[r, cols[r]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, k) = self.shape(x);
        if cols.len() != n || cols.iter().any(|&c| c >= k) {
            return Err(Error::Shape(format!("pick {} columns from {:?}", cols.len(), (n, k))));
        }
        let xv = self.value(x);
        let out: Vec<S> = cols.iter().enumerate().map(|(r, &c)| xv[[r, c]]).collect();
        let value = Array2::from_shape_vec((n, 1), out).expect("column");
        Ok(self.push(value, Op::Pick { x: x.0, cols: cols.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale { x: x.0, factor })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        self.push(value, Op::Square { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum { x: x.0 })
    }

    /// Mean of all entries; the mean of an empty tensor is zero.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let m = if n == 0 { S::zero() } else { self.value(x).sum() / S::of(n as f64) };
        self.push(Array2::from_elem((1, 1), m), Op::Mean { x: x.0 })
    }

    /// Applies a constant sparse matrix to the column vector `x`.
    pub fn linear(&mut self, x: Var, map: SparseRows<S>) -> Result<Var> {
        let (n, k) = self.shape(x);
        if k != 1 {
            return Err(Error::Shape(format!("linear map needs a column, got {:?}", (n, k))));
        }
        if map.rows.iter().flatten().any(|&(i, _)| i >= n) {
            return Err(Error::Shape(format!("linear map indexes past {n} rows")));
        }
        let xv = self.value(x);
        let out: Vec<S> = map
            .rows
            .iter()
            .map(|row| row.iter().fold(S::zero(), |acc, &(i, c)| acc + c * xv[[i, 0]]))
            .collect();
        let value = Array2::from_shape_vec((out.len(), 1), out).expect("column");
        Ok(self.push(value, Op::Linear { x: x.0, map }))
    }

    /// Stacks tensors of equal width vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let width = parts.first().map(|&p| self.shape(p).1).unwrap_or(1);
        if parts.iter().any(|&p| self.shape(p).1 != width) {
            return Err(Error::Shape("concat of tensors with different widths".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = if views.is_empty() {
            Array2::zeros((0, width))
        } else {
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
        };
        Ok(self.push(value, Op::Concat { parts: parts.iter().map(|p| p.0).collect() }))
    }

    /// Log-sum-exp of the column `x` grouped by `segments[i] ∈ [0, n_segments)`.
    /// Empty segments evaluate to `-inf`.
    pub fn segment_log_sum_exp(&mut self, x: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let (n, k) = self.shape(x);
        if k != 1 || segments.len() != n || segments.iter().any(|&s| s >= n_segments) {
            return Err(Error::Shape("segment log-sum-exp arguments".into()));
        }
        let xv = self.value(x);
        let mut out = vec![S::neg_infinity(); n_segments];
        for s in 0..n_segments {
            out[s] = crate::scalar::log_sum_exp(
                segments.iter().zip(xv.column(0)).filter(|(&g, _)| g == s).map(|(_, &v)| v).collect::<Vec<_>>(),
            );
        }
        let value = Array2::from_shape_vec((n_segments, 1), out).expect("column");
        Ok(self.push(value, Op::SegmentLogSumExp { x: x.0, segments: segments.to_vec() }))
    }

    /// Gradients of the `1 × 1` variable `loss` with respect to every
    /// parameter it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let value = self.value(loss);
        if value.dim() != (1, 1) {
            return Err(Error::Shape(format!("backward from a {:?} tensor", value.dim())));
        }
        if !value[[0, 0]].is_finite() {
            return Err(Error::NonFinite { what: "loss".into() });
        }
        let mut grads: Vec<Option<Array2<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.entries.push((*id, g)),
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    accumulate(&mut grads, *x, g.dot(&wv.t()));
                    accumulate(&mut grads, *w, xv.t().dot(&g));
                    accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Activate { x, act } => {
                    let gx = match act {
                        Activation::Relu => {
                            let xv = &self.nodes[*x].value;
                            let mut gx = g;
                            Zip::from(&mut gx).and(xv).for_each(|gi, &v| {
                                if v <= S::zero() {
                                    *gi = S::zero();
                                }
                            });
                            gx
                        }
                        Activation::Tanh => {
                            let mut gx = g;
                            Zip::from(&mut gx).and(&node.value).for_each(|gi, &y| *gi = *gi * (S::one() - y * y));
                            gx
                        }
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskedLogSoftmax { x, mask } => {
                    let mut gx = Array2::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let total = (0..g.ncols()).filter(|&c| mask[[r, c]]).fold(S::zero(), |a, c| a + g[[r, c]]);
                        for c in 0..g.ncols() {
                            if mask[[r, c]] {
                                gx[[r, c]] = g[[r, c]] - node.value[[r, c]].exp() * total;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskedLogSumExp { x, mask } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let lse = node.value[[r, 0]];
                        if !lse.is_finite() {
                            continue;
                        }
                        for c in 0..xv.ncols() {
                            if mask[[r, c]] {
                                gx[[r, c]] = g[[r, 0]] * (xv[[r, c]] - lse).exp();
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SelectRows { x, rows } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Pick { x, cols } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                    for (r, &c) in cols.iter().enumerate() {
                        gx[[r, c]] = gx[[r, c]] + g[[r, 0]];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Scale { x, factor } => accumulate(&mut grads, *x, g * *factor),
                Op::Square { x } => {
                    let gx = &g * &self.nodes[*x].value * S::of(2.0);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum { x } => {
                    let gx = Array2::from_elem(self.nodes[*x].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean { x } => {
                    let dim = self.nodes[*x].value.dim();
                    let n = dim.0 * dim.1;
                    if n > 0 {
                        let gx = Array2::from_elem(dim, g[[0, 0]] / S::of(n as f64));
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Linear { x, map } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.dim());
                    for (r, row) in map.rows.iter().enumerate() {
                        for &(i, c) in row {
                            gx[[i, 0]] = gx[[i, 0]] + c * g[[r, 0]];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        let piece = g.slice(ndarray::s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, p, piece);
                        start += rows;
                    }
                }
                Op::SegmentLogSumExp { x, segments } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Array2::zeros(xv.dim());
                    for (i, &s) in segments.iter().enumerate() {
                        let lse = node.value[[s, 0]];
                        if lse.is_finite() {
                            gx[[i, 0]] = g[[s, 0]] * (xv[[i, 0]] - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Array2<S>>], idx: usize, g: Array2<S>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn masked_row_lse<S: Scalar>(row: impl Iterator<Item = S>, mask: impl Iterator<Item = bool>) -> S {
    let vals: Vec<S> = row.zip(mask).filter(|(_, m)| *m).map(|(v, _)| v).collect();
    crate::scalar::log_sum_exp(vals)
}

//! Reverse-mode differentiation over matrix values.
//!
//! Every operation records its output value plus a backward closure on a
//! growing tape. `backward` walks the tape in reverse and accumulates
//! d(loss)/d(node) for every node that influences the loss. The contract for
//! each rule is the central finite-difference check in `verify::gradcheck`,
//! not any particular derivation style, so rules are written in whatever form
//! is clearest.
//!
//! All values are 64-bit. Evaluation is deterministic: identical inputs
//! produce bit-identical outputs because no op iterates a hash map or spawns
//! threads.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

pub(crate) type BackFn = Box<dyn Fn(&[Matrix], &Matrix, &mut GradStore)>;

/// Gradient accumulator indexed by node id. Buffers are allocated lazily so
/// constants that never receive gradient cost nothing.
pub struct GradStore {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl GradStore {
    fn new(shapes: Vec<(usize, usize)>) -> Self {
        let n = shapes.len();
        GradStore {
            grads: (0..n).map(|_| None).collect(),
            shapes,
        }
    }

    fn buf(&mut self, id: usize) -> &mut Matrix {
        let (r, c) = self.shapes[id];
        self.grads[id].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradient of the loss with respect to `v` (zeros if the loss does not
    /// depend on it).
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn add_at(&mut self, id: usize, idx: usize, v: f64) {
        self.buf(id).data_mut()[idx] += v;
    }

    pub fn add_matrix(&mut self, id: usize, m: &Matrix) {
        let buf = self.buf(id);
        for (g, &v) in buf.data_mut().iter_mut().zip(m.data()) {
            *g += v;
        }
    }
}

struct Node {
    value: Matrix,
    back: Option<BackFn>,
}

/// The recording tape. One per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf. Gradients accumulate into it; whether the caller
    /// reads them decides if it acts as a parameter or a constant.
    pub fn var(&mut self, value: Matrix) -> Var {
        self.push(value, None)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.var(Matrix::scalar(x))
    }

    /// Copies a value onto the tape with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, None)
    }

    /// Records a fused node whose backward rule the caller supplies. The
    /// closure receives all node values, the output gradient, and the store.
    pub(crate) fn push_custom(&mut self, value: Matrix, back: BackFn) -> Var {
        self.push(value, Some(back))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let mut dm = gout.clone();
                for (d, &x) in dm.data_mut().iter_mut().zip(vals[a.0].data()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                gs.add_matrix(a.0, &dm);
            })),
        )
    }

    /// Concatenates 1 x n row vectors end to end into one 1 x (sum n) row.
    pub fn concat_entries(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_entries of no parts".into()));
        }
        let mut data = Vec::new();
        let mut widths = Vec::new();
        for &p in parts {
            let m = self.value(p);
            if m.rows() != 1 {
                return Err(Error::Shape {
                    op: "concat_entries",
                    left: "1xN".into(),
                    right: format!("{}x{}", m.rows(), m.cols()),
                });
            }
            widths.push(m.cols());
            data.extend_from_slice(m.row(0));
        }
        let value = Matrix::row_vector(&data);
        let parts: Vec<(Var, usize)> = parts.iter().copied().zip(widths).collect();
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                let mut at = 0usize;
                for &(p, w) in &parts {
                    for j in 0..w {
                        gs.add_at(p.0, j, gout.get(0, at + j));
                    }
                    at += w;
                }
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_matrix(a.0, gout);
                gs.add_matrix(b.0, gout);
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_matrix(a.0, gout);
                gs.add_matrix(b.0, &gout.scale(-1.0));
            })),
        ))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                gs.add_matrix(a.0, &gout.mul_elem(&vals[b.0]).expect("shape"));
                gs.add_matrix(b.0, &gout.mul_elem(&vals[a.0]).expect("shape"));
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_matrix(a.0, &gout.scale(c));
            })),
        )
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let sv = vals[s.0].item();
                gs.add_matrix(a.0, &gout.scale(sv));
                let ds: f64 = gout
                    .data()
                    .iter()
                    .zip(vals[a.0].data())
                    .map(|(&g, &x)| g * x)
                    .sum();
                gs.add_at(s.0, 0, ds);
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let da = gout.matmul(&vals[b.0].transpose()).expect("shape");
                let db = vals[a.0].transpose().matmul(gout).expect("shape");
                gs.add_matrix(a.0, &da);
                gs.add_matrix(b.0, &db);
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_matrix(a.0, &gout.transpose());
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let g = gout.item();
                let (r, c) = vals[a.0].shape();
                gs.add_matrix(a.0, &Matrix::new(r, c, vec![g; r * c]));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq());
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let g = gout.item();
                gs.add_matrix(a.0, &vals[a.0].scale(2.0 * g));
            })),
        )
    }

    /// Inner product of two nodes with identical shape, as a 1x1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.value(a).mul_elem(self.value(b))?;
        let value = Matrix::scalar(prod.sum());
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let g = gout.item();
                gs.add_matrix(a.0, &vals[b.0].scale(g));
                gs.add_matrix(b.0, &vals[a.0].scale(g));
            })),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let y = vals[a.0].map(sigmoid);
                let mut dm = y.clone();
                for ((d, &g), &yv) in dm.data_mut().iter_mut().zip(gout.data()).zip(y.data()) {
                    *d = g * yv * (1.0 - yv);
                }
                gs.add_matrix(a.0, &dm);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let y = vals[a.0].map(f64::exp);
                gs.add_matrix(a.0, &gout.mul_elem(&y).expect("shape"));
            })),
        )
    }

    /// Mean over rows, producing a 1 x cols node.
    pub fn mean_over_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rows = self.value(a).rows();
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let (r, c) = vals[a.0].shape();
                let inv = 1.0 / rows as f64;
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        g.set(i, j, gout.get(0, j) * inv);
                    }
                }
                gs.add_matrix(a.0, &g);
            })),
        )
    }

    /// Columnwise max over rows, producing a 1 x cols node. Gradient routes
    /// to the first row attaining the max in each column.
    pub fn max_over_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0usize; c];
        for i in 0..r {
            for j in 0..c {
                let v = m.get(i, j);
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let value = Matrix::row_vector(&out);
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                for (j, &i) in arg.iter().enumerate() {
                    gs.add_at(a.0, i * c + j, gout.get(0, j));
                }
            })),
        )
    }

    /// Rowwise mean over columns, producing a rows x 1 node.
    pub fn mean_over_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.shape();
        let data: Vec<f64> = (0..r).map(|i| m.row(i).iter().sum::<f64>() / c as f64).collect();
        let value = Matrix::new(r, 1, data);
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let (r, c) = vals[a.0].shape();
                let inv = 1.0 / c as f64;
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        g.set(i, j, gout.get(i, 0) * inv);
                    }
                }
                gs.add_matrix(a.0, &g);
            })),
        )
    }

    /// Rowwise max over columns, producing a rows x 1 node.
    pub fn max_over_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = m.shape();
        let mut out = vec![f64::NEG_INFINITY; r];
        let mut arg = vec![0usize; r];
        for i in 0..r {
            for j in 0..c {
                let v = m.get(i, j);
                if v > out[i] {
                    out[i] = v;
                    arg[i] = j;
                }
            }
        }
        let value = Matrix::new(r, 1, out);
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                for (i, &j) in arg.iter().enumerate() {
                    gs.add_at(a.0, i * c + j, gout.get(i, 0));
                }
            })),
        )
    }

    /// Multiplies row i of `a` by entry i of the rows x 1 node `s`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let m = self.value(a);
        let sv = self.value(s);
        if sv.shape() != (m.rows(), 1) {
            return Err(Error::Shape {
                op: "scale_rows",
                left: format!("{}x{}", m.rows(), m.cols()),
                right: format!("{}x{}", sv.rows(), sv.cols()),
            });
        }
        let mut value = m.clone();
        for i in 0..m.rows() {
            let f = sv.get(i, 0);
            for v in value.row_mut(i) {
                *v *= f;
            }
        }
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let m = &vals[a.0];
                let sv = &vals[s.0];
                let (r, c) = m.shape();
                let mut da = Matrix::zeros(r, c);
                let mut ds = Matrix::zeros(r, 1);
                for i in 0..r {
                    let f = sv.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..c {
                        da.set(i, j, gout.get(i, j) * f);
                        acc += gout.get(i, j) * m.get(i, j);
                    }
                    ds.set(i, 0, acc);
                }
                gs.add_matrix(a.0, &da);
                gs.add_matrix(s.0, &ds);
            })),
        ))
    }

    /// Multiplies column j of `a` by entry j of the 1 x cols node `s`.
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Result<Var> {
        let m = self.value(a);
        let sv = self.value(s);
        if sv.shape() != (1, m.cols()) {
            return Err(Error::Shape {
                op: "scale_cols",
                left: format!("{}x{}", m.rows(), m.cols()),
                right: format!("{}x{}", sv.rows(), sv.cols()),
            });
        }
        let mut value = m.clone();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let v = value.get(i, j) * sv.get(0, j);
                value.set(i, j, v);
            }
        }
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let m = &vals[a.0];
                let sv = &vals[s.0];
                let (r, c) = m.shape();
                let mut da = Matrix::zeros(r, c);
                let mut ds = Matrix::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        da.set(i, j, gout.get(i, j) * sv.get(0, j));
                        ds.set(0, j, ds.get(0, j) + gout.get(i, j) * m.get(i, j));
                    }
                }
                gs.add_matrix(a.0, &da);
                gs.add_matrix(s.0, &ds);
            })),
        ))
    }

    /// Adds the 1 x cols node `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.value(a);
        let bv = self.value(b);
        if bv.shape() != (1, m.cols()) {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: format!("{}x{}", m.rows(), m.cols()),
                right: format!("{}x{}", bv.rows(), bv.cols()),
            });
        }
        let mut value = m.clone();
        for i in 0..m.rows() {
            for (v, &x) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *v += x;
            }
        }
        Ok(self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                gs.add_matrix(a.0, gout);
                let c = vals[a.0].cols();
                let mut db = Matrix::zeros(1, c);
                for i in 0..vals[a.0].rows() {
                    for j in 0..c {
                        db.set(0, j, db.get(0, j) + gout.get(i, j));
                    }
                }
                gs.add_matrix(b.0, &db);
            })),
        ))
    }

    /// Adds the 1x1 node `s` to every entry of `a`.
    pub fn add_scalar_broadcast(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x + sv);
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_matrix(a.0, gout);
                gs.add_at(s.0, 0, gout.sum());
            })),
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let c = m.cols();
        let mut value = Matrix::zeros(idx.len(), c);
        for (out_r, &src_r) in idx.iter().enumerate() {
            value.row_mut(out_r).copy_from_slice(m.row(src_r));
        }
        let idx = idx.to_vec();
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for j in 0..c {
                        gs.add_at(a.0, src_r * c + j, gout.get(out_r, j));
                    }
                }
            })),
        )
    }

    /// Reinterprets the row-major data with a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let m = self.value(a);
        if m.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                left: format!("{}x{}", m.rows(), m.cols()),
                right: format!("{rows}x{cols}"),
            });
        }
        let value = Matrix::new(rows, cols, m.data().to_vec());
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                for (idx, &g) in gout.data().iter().enumerate() {
                    gs.add_at(a.0, idx, g);
                }
            })),
        ))
    }

    /// Extracts entry j of a 1 x n row as a 1x1 node.
    pub fn gather_entry(&mut self, a: Var, j: usize) -> Var {
        let value = Matrix::scalar(self.value(a).get(0, j));
        self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                gs.add_at(a.0, j, gout.item());
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_rows of no parts".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = Vec::new();
        for &p in parts {
            let m = self.value(p);
            if m.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: format!("cols {}", c),
                    right: format!("cols {}", m.cols()),
                });
            }
            for r in 0..m.rows() {
                rows.push(m.row(r).to_vec());
            }
        }
        let value = Matrix::from_rows(&rows);
        let parts: Vec<(Var, usize)> = parts
            .iter()
            .map(|&p| (p, self.value(p).rows()))
            .collect();
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                let mut at = 0usize;
                for &(p, nr) in &parts {
                    for r in 0..nr {
                        for j in 0..c {
                            gs.add_at(p.0, r * c + j, gout.get(at + r, j));
                        }
                    }
                    at += nr;
                }
            })),
        ))
    }

    /// Concatenates column vectors (rows x 1 each) into a rows x k node.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_cols of no parts".into()));
        }
        let r = self.value(parts[0]).rows();
        for &p in parts {
            let m = self.value(p);
            if m.shape() != (r, 1) {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: format!("{}x1", r),
                    right: format!("{}x{}", m.rows(), m.cols()),
                });
            }
        }
        let k = parts.len();
        let mut value = Matrix::zeros(r, k);
        for (j, &p) in parts.iter().enumerate() {
            for i in 0..r {
                value.set(i, j, self.value(p).get(i, 0));
            }
        }
        let parts = parts.to_vec();
        Ok(self.push(
            value,
            Some(Box::new(move |_vals, gout, gs| {
                for (j, &p) in parts.iter().enumerate() {
                    for i in 0..r {
                        gs.add_at(p.0, i, gout.get(i, j));
                    }
                }
            })),
        ))
    }

    /// Layer normalisation of each row: zero mean, unit variance, epsilon
    /// guard, no learnable affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let normed = layer_norm_forward(m.row(i), eps);
            value.row_mut(i).copy_from_slice(&normed);
        }
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let m = &vals[a.0];
                let (r, c) = m.shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let x = m.row(i);
                    let n = c as f64;
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let s = (var + eps).sqrt();
                    let y: Vec<f64> = x.iter().map(|v| (v - mean) / s).collect();
                    let g = gout.row(i);
                    let gmean = g.iter().sum::<f64>() / n;
                    let gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        da.set(i, j, (g[j] - gmean - y[j] * gy) / s);
                    }
                }
                gs.add_matrix(a.0, &da);
            })),
        )
    }

    /// Normalises each row to unit Euclidean norm. Rows with norm <= tol are
    /// zeroed and receive zero gradient.
    pub fn unit_rows(&mut self, a: Var, tol: f64) -> Var {
        let (value, _zeros) = self.value(a).unit_rows(tol);
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let m = &vals[a.0];
                let (r, c) = m.shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let x = m.row(i);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= tol {
                        continue;
                    }
                    let y: Vec<f64> = x.iter().map(|v| v / norm).collect();
                    let g = gout.row(i);
                    let gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da.set(i, j, (g[j] - y[j] * gy) / norm);
                    }
                }
                gs.add_matrix(a.0, &da);
            })),
        )
    }

    /// Softmax of each row (all entries participate; used by attention).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let p = softmax_forward(m.row(i));
            value.row_mut(i).copy_from_slice(&p);
        }
        self.push(
            value,
            Some(Box::new(move |vals, gout, gs| {
                let m = &vals[a.0];
                let (r, c) = m.shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let p = softmax_forward(m.row(i));
                    let g = gout.row(i);
                    let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da.set(i, j, p[j] * (g[j] - dot));
                    }
                }
                gs.add_matrix(a.0, &da);
            })),
        )
    }

    /// Log-softmax over the unmasked entries of a 1 x n node. Masked entries
    /// are excluded from the log-sum-exp and come back as -inf sentinels; no
    /// arithmetic ever touches the sentinel values.
    pub fn log_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 || m.cols() != mask.len() {
            return Err(Error::Shape {
                op: "log_softmax_masked",
                left: format!("{}x{}", m.rows(), m.cols()),
                right: format!("mask len {}", mask.len()),
            });
        }
        let value = log_softmax_masked_forward(m.row(0), mask)?;
        let mask = mask.to_vec();
        Ok(self.push(
            Matrix::row_vector(&value),
            Some(Box::new(move |vals, gout, gs| {
                let x = vals[a.0].row(0);
                let out = log_softmax_masked_forward(x, &mask).expect("mask checked");
                let gsum: f64 = gout
                    .row(0)
                    .iter()
                    .zip(&mask)
                    .filter(|(_, &m)| !m)
                    .map(|(g, _)| g)
                    .sum();
                for (j, &masked) in mask.iter().enumerate() {
                    if masked {
                        continue;
                    }
                    let p = out[j].exp();
                    gs.add_at(a.0, j, gout.get(0, j) - p * gsum);
                }
            })),
        ))
    }

    /// Runs reverse accumulation from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert_eq!(
            self.nodes[loss.0].value.shape(),
            (1, 1),
            "backward target must be a scalar node"
        );
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let values: Vec<Matrix> = self.nodes.iter().map(|n| n.value.clone()).collect();
        let mut gs = GradStore::new(shapes);
        gs.add_at(loss.0, 0, 1.0);
        for id in (0..=loss.0).rev() {
            if gs.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id].back {
                let gout = gs.grads[id].clone().expect("checked above");
                back(&values, &gout, &mut gs);
            }
        }
        gs
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain softmax with max subtraction.
pub fn softmax_forward(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

/// Masked log-softmax forward kernel shared by the tape op and forward-only
/// callers. Shift invariance comes from subtracting the running max before
/// exponentiation.
pub fn log_softmax_masked_forward(x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(x.len(), mask.len());
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (v, &m) in x.iter().zip(mask) {
        if !m {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(
                    "log_softmax_masked requires finite unmasked scores".into(),
                ));
            }
            any = true;
            if *v > max {
                max = *v;
            }
        }
    }
    if !any {
        return Err(Error::EmptyCandidates("log_softmax_masked saw an all-masked row"));
    }
    let mut sum = 0.0;
    for (v, &m) in x.iter().zip(mask) {
        if !m {
            sum += (v - max).exp();
        }
    }
    // Working relative to the max keeps the result invariant under exactly
    // representable shifts of the whole score vector.
    let rel_lse = sum.ln();
    Ok(x.iter()
        .zip(mask)
        .map(|(v, &m)| {
            if m {
                f64::NEG_INFINITY
            } else {
                (v - max) - rel_lse
            }
        })
        .collect())
}

/// Layer-norm forward kernel (population variance, epsilon guard, no affine).
pub fn layer_norm_forward(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    x.iter().map(|v| (v - mean) / s).collect()
}

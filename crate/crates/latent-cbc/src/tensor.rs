//! Dense matrices with tape-based reverse-mode automatic differentiation.
//!
//! Every value lives on a [`Tape`] as a row-major `f64` matrix (scalars are
//! 1×1, column vectors are n×1). Operations append nodes to the tape;
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients
//! into each node. Parents always precede children, so a single reverse
//! sweep visits every node exactly once.
//!
//! ```
//! use latent_cbc::tensor::Tape;
//!
//! let mut tape = Tape::new();
//! let a = tape.var(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
//! let b = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
//! let prod = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(prod);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.value(loss), &[10.0]);
//! assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

use thiserror::Error;

/// Errors produced by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: ({lhs_r}x{lhs_c}) vs ({rhs_r}x{rhs_c})")]
    ShapeMismatch {
        op: &'static str,
        lhs_r: usize,
        lhs_c: usize,
        rhs_r: usize,
        rhs_c: usize,
    },
    /// The symmetrized matrix failed its triangular factorization: the
    /// diagonal pivot at `index` came out as `value` <= 0.
    #[error("matrix not positive definite (pivot {index} = {value:e})")]
    NotPd { index: usize, value: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    TanhScaled { src: usize, lo: f64, hi: f64 },
    Square(usize),
    Exp(usize),
    Sum(usize),
    L2Norm(usize),
    RowL2(usize),
    Transpose(usize),
    ScaleCols(usize, usize),
    Diag(usize),
    Place { src: usize, row: usize, col: usize },
    ConcatCols(usize, usize),
    SliceCols { src: usize, start: usize },
    AddRowBroadcast(usize, usize),
    LogDet { src: usize, inverse: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Record of primitive operations; owns all values and gradients.
#[derive(Debug, Default)]
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> TensorRef {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: None,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    /// Leaf that participates in gradient accumulation.
    pub fn var(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorRef {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        self.push(rows, cols, data, Op::Leaf { requires_grad: true })
    }

    /// Leaf excluded from gradient accumulation (stop-gradient inputs).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> TensorRef {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        self.push(rows, cols, data, Op::Leaf { requires_grad: false })
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.constant(1, 1, vec![v])
    }

    pub fn shape(&self, t: TensorRef) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, t: TensorRef) -> f64 {
        let n = &self.nodes[t.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar_value on non-scalar");
        n.value[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorResult<TensorRef> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs_r: m,
                lhs_c: k,
                rhs_r: k2,
                rhs_c: n,
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, out, Op::Matmul(a.0, b.0)))
    }

    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(
            (ar, ac) == (br, bc),
            "{op}: shape ({ar}x{ac}) vs ({br}x{bc})"
        );
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.same_shape("add", a, b);
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.same_shape("sub", a, b);
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(r, c, v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.same_shape("mul", a, b);
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(r, c, v, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| -x).collect();
        self.push(r, c, v, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        self.push(r, c, v, Op::Scale(a.0, factor))
    }

    pub fn add_scalar(&mut self, a: TensorRef, offset: f64) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x + offset).collect();
        self.push(r, c, v, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(r, c, v, Op::Relu(a.0))
    }

    /// max(0, x). Subgradient at exactly 0 is 0, so satisfied constraints
    /// sitting on the boundary contribute no gradient.
    pub fn hinge(&mut self, a: TensorRef) -> TensorRef {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, v, Op::Tanh(a.0))
    }

    /// lo + (hi - lo) * (tanh(x) + 1) / 2, elementwise. Output stays in
    /// the closed interval [lo, hi].
    pub fn tanh_scaled(&mut self, a: TensorRef, lo: f64, hi: f64) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a)
            .iter()
            .map(|x| lo + (hi - lo) * (x.tanh() + 1.0) * 0.5)
            .collect();
        self.push(r, c, v, Op::TanhScaled { src: a.0, lo, hi })
    }

    pub fn square(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x * x).collect();
        self.push(r, c, v, Op::Square(a.0))
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(r, c, v, Op::Exp(a.0))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a.0))
    }

    /// Euclidean norm over all entries (l2 for vectors, Frobenius for
    /// matrices).
    pub fn l2norm(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(1, 1, vec![s], Op::L2Norm(a.0))
    }

    /// Per-row Euclidean norm: [r x c] -> [r x 1].
    pub fn row_l2(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let v: Vec<f64> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(r, 1, v, Op::RowL2(a.0))
    }

    pub fn transpose(&mut self, a: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = av[i * c + j];
            }
        }
        self.push(c, r, v, Op::Transpose(a.0))
    }

    /// Multiply column j of `a` by `v[j]`; `v` is a c x 1 vector.
    /// Equivalent to a * diag(v) without materializing the diagonal.
    pub fn scale_cols(&mut self, a: TensorRef, v: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let (vr, vc) = self.shape(v);
        assert!(
            vr == c && vc == 1,
            "scale_cols: vector ({vr}x{vc}) must be ({c}x1)"
        );
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] * vv[j];
            }
        }
        self.push(r, c, out, Op::ScaleCols(a.0, v.0))
    }

    /// Diagonal matrix from an n x 1 vector.
    pub fn diag(&mut self, v: TensorRef) -> TensorRef {
        let (n, c) = self.shape(v);
        assert_eq!(c, 1, "diag expects a column vector");
        let vv = self.value(v);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n + i] = vv[i];
        }
        self.push(n, n, out, Op::Diag(v.0))
    }

    /// Embed `a` into an `out_rows` x `out_cols` zero matrix with its top-left
    /// corner at (row, col).
    pub fn place(
        &mut self,
        a: TensorRef,
        out_rows: usize,
        out_cols: usize,
        row: usize,
        col: usize,
    ) -> TensorRef {
        let (r, c) = self.shape(a);
        assert!(
            row + r <= out_rows && col + c <= out_cols,
            "place: block ({r}x{c}) at ({row},{col}) exceeds ({out_rows}x{out_cols})"
        );
        let av = self.value(a);
        let mut out = vec![0.0; out_rows * out_cols];
        for i in 0..r {
            for j in 0..c {
                out[(row + i) * out_cols + (col + j)] = av[i * c + j];
            }
        }
        self.push(out_rows, out_cols, out, Op::Place { src: a.0, row, col })
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ar, br, "concat_cols: row counts differ ({ar} vs {br})");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; ar * (ac + bc)];
        for i in 0..ar {
            out[i * (ac + bc)..i * (ac + bc) + ac].copy_from_slice(&av[i * ac..(i + 1) * ac]);
            out[i * (ac + bc) + ac..(i + 1) * (ac + bc)].copy_from_slice(&bv[i * bc..(i + 1) * bc]);
        }
        self.push(ar, ac + bc, out, Op::ConcatCols(a.0, b.0))
    }

    /// Take `len` contiguous columns of `a` starting at `start`.
    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> TensorRef {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols: {start}+{len} exceeds {c} columns");
        let av = self.value(a);
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&av[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { src: a.0, start })
    }

    /// Add a 1 x c row vector to every row of an r x c matrix (bias add).
    pub fn add_row_broadcast(&mut self, a: TensorRef, v: TensorRef) -> TensorRef {
        let (r, c) = self.shape(a);
        let (vr, vc) = self.shape(v);
        assert!(
            vr == 1 && vc == c,
            "add_row_broadcast: vector ({vr}x{vc}) must be (1x{c})"
        );
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + vv[j];
            }
        }
        self.push(r, c, out, Op::AddRowBroadcast(a.0, v.0))
    }

    /// log det of a symmetric positive definite matrix via a Cholesky
    /// factorization of (M + M^T)/2. The backward gradient is the (symmetric)
    /// inverse, computed once here and stored on the node.
    pub fn logdet(&mut self, m: TensorRef) -> TensorResult<TensorRef> {
        let (r, c) = self.shape(m);
        if r != c {
            return Err(TensorError::Invalid(format!(
                "logdet expects a square matrix, got {r}x{c}"
            )));
        }
        let sym = sym_part(self.value(m), r);
        let chol = cholesky(&sym, r).map_err(|(index, value)| TensorError::NotPd { index, value })?;
        let ld = 2.0 * chol.iter().step_by(r + 1).map(|x| x.ln()).sum::<f64>();
        let inverse = cholesky_inverse(&chol, r);
        Ok(self.push(1, 1, vec![ld], Op::LogDet { src: m.0, inverse }))
    }

    /// Reverse sweep from a scalar loss node. Clears all previous gradients.
    pub fn backward(&mut self, loss: TensorRef) -> TensorResult<()> {
        let ln = &self.nodes[loss.0];
        if (ln.rows, ln.cols) != (1, 1) {
            return Err(TensorError::Invalid(format!(
                "backward expects a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        // Drop gradients on constants so stop-gradient leaves read as None.
        for n in &mut self.nodes {
            if let Op::Leaf { requires_grad: false } = n.op {
                n.grad = None;
            }
        }
        Ok(())
    }

    fn accum(&mut self, idx: usize, contrib: impl FnOnce(&mut [f64])) {
        let n = &mut self.nodes[idx];
        let len = n.rows * n.cols;
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        contrib(g);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                // a.grad += g * b^T
                let bt = transpose_raw(&self.nodes[b].value, k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                self.accum(a, |ga| add_assign(ga, &da));
                // b.grad += a^T * g
                let at = transpose_raw(&self.nodes[a].value, m, k);
                let db = matmul_raw(&at, g, k, m, n);
                self.accum(b, |gb| add_assign(gb, &db));
            }
            Op::Add(a, b) => {
                self.accum(a, |ga| add_assign(ga, g));
                self.accum(b, |gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                self.accum(a, |ga| add_assign(ga, g));
                self.accum(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b].value.clone();
                self.accum(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += y * z;
                    }
                });
                let av = self.nodes[a].value.clone();
                self.accum(b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&av) {
                        *x += y * z;
                    }
                });
            }
            Op::Neg(a) => self.accum(a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x -= y;
                }
            }),
            Op::Scale(a, f) => self.accum(a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y * f;
                }
            }),
            Op::AddScalar(a) => self.accum(a, |ga| add_assign(ga, g)),
            Op::Relu(a) => {
                let av = self.nodes[a].value.clone();
                self.accum(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.clone();
                self.accum(a, |ga| {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(&yv) {
                        *x += gy * (1.0 - y * y);
                    }
                });
            }
            Op::TanhScaled { src, lo, hi } => {
                let av = self.nodes[src].value.clone();
                let half_span = (hi - lo) * 0.5;
                self.accum(src, |ga| {
                    for ((x, gy), v) in ga.iter_mut().zip(g).zip(&av) {
                        let t = v.tanh();
                        *x += gy * half_span * (1.0 - t * t);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.nodes[a].value.clone();
                self.accum(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&av) {
                        *x += 2.0 * v * y;
                    }
                });
            }
            Op::Exp(a) => {
                let yv = self.nodes[i].value.clone();
                self.accum(a, |ga| {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(&yv) {
                        *x += gy * y;
                    }
                });
            }
            Op::Sum(a) => {
                let gy = g[0];
                self.accum(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gy;
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = self.nodes[i].value[0];
                let gy = g[0];
                let av = self.nodes[a].value.clone();
                self.accum(a, |ga| {
                    if norm > 0.0 {
                        for (x, v) in ga.iter_mut().zip(&av) {
                            *x += gy * v / norm;
                        }
                    }
                });
            }
            Op::RowL2(a) => {
                let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                let norms = self.nodes[i].value.clone();
                let av = self.nodes[a].value.clone();
                self.accum(a, |ga| {
                    for row in 0..r {
                        if norms[row] > 0.0 {
                            for j in 0..c {
                                ga[row * c + j] += g[row] * av[row * c + j] / norms[row];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                self.accum(a, |ga| {
                    for ri in 0..r {
                        for j in 0..c {
                            ga[ri * c + j] += g[j * r + ri];
                        }
                    }
                });
            }
            Op::ScaleCols(a, v) => {
                let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                let vv = self.nodes[v].value.clone();
                let av = self.nodes[a].value.clone();
                self.accum(a, |ga| {
                    for ri in 0..r {
                        for j in 0..c {
                            ga[ri * c + j] += g[ri * c + j] * vv[j];
                        }
                    }
                });
                self.accum(v, |gv| {
                    for ri in 0..r {
                        for j in 0..c {
                            gv[j] += g[ri * c + j] * av[ri * c + j];
                        }
                    }
                });
            }
            Op::Diag(v) => {
                let n = self.nodes[v].rows;
                self.accum(v, |gv| {
                    for j in 0..n {
                        gv[j] += g[j * n + j];
                    }
                });
            }
            Op::Place { src, row, col } => {
                let (r, c) = (self.nodes[src].rows, self.nodes[src].cols);
                let out_cols = self.nodes[i].cols;
                self.accum(src, |ga| {
                    for ri in 0..r {
                        for j in 0..c {
                            ga[ri * c + j] += g[(row + ri) * out_cols + (col + j)];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (r, ac) = (self.nodes[a].rows, self.nodes[a].cols);
                let bc = self.nodes[b].cols;
                let w = ac + bc;
                self.accum(a, |ga| {
                    for ri in 0..r {
                        for j in 0..ac {
                            ga[ri * ac + j] += g[ri * w + j];
                        }
                    }
                });
                self.accum(b, |gb| {
                    for ri in 0..r {
                        for j in 0..bc {
                            gb[ri * bc + j] += g[ri * w + ac + j];
                        }
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let c = self.nodes[src].cols;
                let (r, len) = (self.nodes[i].rows, self.nodes[i].cols);
                self.accum(src, |ga| {
                    for ri in 0..r {
                        for j in 0..len {
                            ga[ri * c + start + j] += g[ri * len + j];
                        }
                    }
                });
            }
            Op::AddRowBroadcast(a, v) => {
                let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                self.accum(a, |ga| add_assign(ga, g));
                self.accum(v, |gv| {
                    for ri in 0..r {
                        for j in 0..c {
                            gv[j] += g[ri * c + j];
                        }
                    }
                });
            }
            Op::LogDet { src, ref inverse } => {
                let gy = g[0];
                self.accum(src, |gm| {
                    for (x, inv) in gm.iter_mut().zip(inverse) {
                        *x += gy * inv;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Row-major (m x k) * (k x n), ikj loop order for cache locality.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// (M + M^T) / 2 for a square row-major matrix.
pub fn sym_part(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    out
}

/// Lower-triangular Cholesky factor of a symmetric matrix. Fails with the
/// (index, pivot value) of the first non-positive diagonal pivot.
pub fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>, (usize, f64)> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err((i, s));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Inverse of the original matrix from its Cholesky factor L (M = L L^T).
fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // Invert L in place (lower triangular), then M^-1 = L^-T L^-1.
    let mut linv = vec![0.0; n * n];
    for i in 0..n {
        linv[i * n + i] = 1.0 / l[i * n + i];
        for j in 0..i {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = -s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in i.max(j)..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
        }
    }
    inv
}

/// Most negative pivot encountered while attempting a Cholesky factorization
/// of the symmetrized matrix, or None if it is positive definite. Used as a
/// distance-to-PD proxy by penalty handling.
pub fn pd_deficit(m: &[f64], n: usize) -> Option<f64> {
    let sym = sym_part(m, n);
    match cholesky(&sym, n) {
        Ok(_) => None,
        Err((_, v)) => Some(-v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of a flat input.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let hi = f(&xp);
            xp[i] = x[i] - step;
            let lo = f(&xp);
            xp[i] = x[i];
            g[i] = (hi - lo) / (2.0 * step);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], rel: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / scale <= rel,
                "index {i}: {x} vs {y} (rel {})",
                (x - y).abs() / scale
            );
        }
    }

    fn deterministic_values(seed: u64, n: usize) -> Vec<f64> {
        // Small LCG; keeps tests free of RNG crates.
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        let b = t.constant(2, 1, vec![3.0, 4.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        let b = t.constant(3, 1, vec![3.0, 4.0, 5.0]);
        assert!(matches!(
            t.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = deterministic_values(1, 6);
        let b0 = deterministic_values(2, 8);
        let mut t = Tape::new();
        let a = t.var(3, 2, a0.clone());
        let b = t.var(2, 4, b0.clone());
        let p = t.matmul(a, b).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        let ga = t.grad(a).unwrap().to_vec();

        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.var(3, 2, x.to_vec());
            let b = t.constant(2, 4, b0.clone());
            let p = t.matmul(a, b).unwrap();
            let s = t.sum(p);
            t.scalar_value(s)
        };
        let fd = finite_diff(&mut f, &a0, 1e-5);
        assert_close(&ga, &fd, 1e-6);
    }

    #[test]
    fn slice_cols_values_and_gradient() {
        let x0 = deterministic_values(7, 8);
        let mut t = Tape::new();
        let x = t.var(2, 4, x0.clone());
        let s = t.slice_cols(x, 1, 2);
        assert_eq!(t.shape(s), (2, 2));
        assert_eq!(t.value(s), &[x0[1], x0[2], x0[5], x0[6]]);
        let sq = t.square(s);
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        let gx = t.grad(x).unwrap().to_vec();

        let mut f = |v: &[f64]| {
            let mut t = Tape::new();
            let x = t.var(2, 4, v.to_vec());
            let s = t.slice_cols(x, 1, 2);
            let sq = t.square(s);
            let l = t.sum(sq);
            t.scalar_value(l)
        };
        let fd = finite_diff(&mut f, &x0, 1e-5);
        assert_close(&gx, &fd, 1e-6);
    }

    #[test]
    fn hinge_branches() {
        let mut t = Tape::new();
        let x = t.constant(2, 1, vec![-0.3, 0.2]);
        let h = t.hinge(x);
        assert_eq!(t.value(h), &[0.0, 0.2]);
    }

    #[test]
    fn hinge_subgradient_zero_at_zero() {
        let mut t = Tape::new();
        let x = t.var(1, 1, vec![0.0]);
        let h = t.hinge(x);
        let s = t.sum(h);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn l2norm_345() {
        let mut t = Tape::new();
        let x = t.constant(2, 1, vec![3.0, 4.0]);
        let n = t.l2norm(x);
        assert_eq!(t.scalar_value(n), 5.0);
    }

    #[test]
    fn logdet_identity_is_zero() {
        let mut t = Tape::new();
        let m = t.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let ld = t.logdet(m).unwrap();
        assert_eq!(t.scalar_value(ld), 0.0);
    }

    #[test]
    fn logdet_diag_2_2() {
        let mut t = Tape::new();
        let m = t.constant(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let ld = t.logdet(m).unwrap();
        assert!((t.scalar_value(ld) - 2.0 * 2.0_f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let mut t = Tape::new();
        // eigenvalues 3 and -1
        let m = t.constant(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(t.logdet(m), Err(TensorError::NotPd { .. })));
    }

    #[test]
    fn logdet_scaled_identity_family() {
        for n in 1..=8usize {
            for &c in &[0.5, 1.0, 2.5] {
                let mut t = Tape::new();
                let mut data = vec![0.0; n * n];
                for i in 0..n {
                    data[i * n + i] = c;
                }
                let m = t.constant(n, n, data);
                let ld = t.logdet(m).unwrap();
                assert!(
                    (t.scalar_value(ld) - n as f64 * f64::ln(c)).abs() < 1e-12,
                    "n={n} c={c}"
                );
            }
        }
    }

    #[test]
    fn logdet_gradient_matches_finite_differences() {
        // Build a PD matrix M = A A^T + 2I from free entries of A.
        let a0 = deterministic_values(7, 9);
        let build = |x: &[f64], t: &mut Tape| -> TensorRef {
            let a = t.var(3, 3, x.to_vec());
            let at = t.transpose(a);
            let aat = t.matmul(a, at).unwrap();
            let eye = t.constant(
                3,
                3,
                vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0],
            );
            let m = t.add(aat, eye);
            t.logdet(m).unwrap()
        };
        let mut t = Tape::new();
        let ld = build(&a0, &mut t);
        t.backward(ld).unwrap();
        let ga = t.grad(TensorRef(0)).unwrap().to_vec();

        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let ld = build(x, &mut t);
            t.scalar_value(ld)
        };
        let fd = finite_diff(&mut f, &a0, 1e-5);
        assert_close(&ga, &fd, 1e-4);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape, TensorRef) -> TensorRef;
        let cases: Vec<(&str, Builder)> = vec![
            ("relu_sq", |t, x| {
                let r = t.relu(x);
                let s = t.square(r);
                t.sum(s)
            }),
            ("tanh", |t, x| {
                let r = t.tanh(x);
                let s = t.square(r);
                t.sum(s)
            }),
            ("tanh_scaled", |t, x| {
                let r = t.tanh_scaled(x, -10.0, 10.0);
                let s = t.square(r);
                t.sum(s)
            }),
            ("exp", |t, x| {
                let r = t.exp(x);
                t.sum(r)
            }),
            ("l2norm", |t, x| t.l2norm(x)),
            ("row_l2", |t, x| {
                let r = t.row_l2(x);
                t.sum(r)
            }),
            ("scale_add", |t, x| {
                let r = t.scale(x, 1.7);
                let r = t.add_scalar(r, 0.3);
                let s = t.square(r);
                t.sum(s)
            }),
        ];
        for (name, build) in cases {
            let x0 = deterministic_values(11, 6);
            let mut t = Tape::new();
            let x = t.var(2, 3, x0.clone());
            let loss = build(&mut t, x);
            t.backward(loss).unwrap();
            let ga = t.grad(x).unwrap().to_vec();
            let mut f = |v: &[f64]| {
                let mut t = Tape::new();
                let x = t.var(2, 3, v.to_vec());
                let loss = build(&mut t, x);
                t.scalar_value(loss)
            };
            let fd = finite_diff(&mut f, &x0, 1e-5);
            assert_close(&ga, &fd, 1e-4);
            let _ = name;
        }
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        // transpose + scale_cols + diag + place + concat + broadcast in one graph
        let x0 = deterministic_values(13, 6);
        let v0 = deterministic_values(17, 2);
        let build = |x: &[f64], v: &[f64], t: &mut Tape| -> TensorRef {
            let x = t.var(3, 2, x.to_vec());
            let v = t.var(2, 1, v.to_vec());
            let xt = t.transpose(x); // 2x3
            let sc = t.scale_cols(x, v); // 3x2
            let d = t.diag(v); // 2x2
            let p1 = t.place(sc, 5, 5, 0, 0);
            let p2 = t.place(d, 5, 5, 3, 3);
            let m = t.add(p1, p2);
            let s1 = t.sum(m);
            let cc = t.concat_cols(xt, xt); // 2x6
            let bias = t.transpose(v); // 1x2 -> need 1x6; reuse v via concat
            let b3 = t.concat_cols(bias, bias);
            let b6 = t.concat_cols(b3, bias);
            let cb = t.add_row_broadcast(cc, b6);
            let sq = t.square(cb);
            let s2 = t.sum(sq);
            t.add(s1, s2)
        };
        let mut t = Tape::new();
        let loss = build(&x0, &v0, &mut t);
        t.backward(loss).unwrap();
        let gx = t.grad(TensorRef(0)).unwrap().to_vec();
        let gv = t.grad(TensorRef(1)).unwrap().to_vec();

        let mut fx = |x: &[f64]| {
            let mut t = Tape::new();
            let loss = build(x, &v0, &mut t);
            t.scalar_value(loss)
        };
        assert_close(&gx, &finite_diff(&mut fx, &x0, 1e-5), 1e-4);
        let mut fv = |v: &[f64]| {
            let mut t = Tape::new();
            let loss = build(&x0, v, &mut t);
            t.scalar_value(loss)
        };
        assert_close(&gv, &finite_diff(&mut fv, &v0, 1e-5), 1e-4);
    }

    #[test]
    fn backward_is_linear_over_loss_sums() {
        let x0 = deterministic_values(23, 4);
        let grads = |combined: bool| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.var(4, 1, x0.clone());
            let a = t.square(x);
            let la = t.sum(a);
            let b = t.tanh(x);
            let lb = t.sum(b);
            if combined {
                let l = t.add(la, lb);
                t.backward(l).unwrap();
                t.grad(x).unwrap().to_vec()
            } else {
                t.backward(la).unwrap();
                let g1 = t.grad(x).unwrap().to_vec();
                t.backward(lb).unwrap();
                let g2 = t.grad(x).unwrap().to_vec();
                g1.iter().zip(&g2).map(|(a, b)| a + b).collect()
            }
        };
        let combined = grads(true);
        let separate = grads(false);
        for (a, b) in combined.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_bit_deterministic() {
        let run = || {
            let x0 = deterministic_values(31, 12);
            let mut t = Tape::new();
            let x = t.var(3, 4, x0.clone());
            let w = t.var(4, 2, deterministic_values(37, 8));
            let h = t.matmul(x, w).unwrap();
            let h = t.tanh(h);
            let s = t.square(h);
            let l = t.sum(s);
            t.backward(l).unwrap();
            (
                t.scalar_value(l).to_bits(),
                t.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pd_deficit_reports_negative_pivot() {
        let m = vec![1.0, 2.0, 2.0, 1.0];
        let d = pd_deficit(&m, 2).unwrap();
        assert!(d > 0.0);
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert!(pd_deficit(&id, 2).is_none());
    }
}

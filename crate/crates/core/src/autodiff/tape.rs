//! Tensor-level reverse-mode tape with an optional forward tangent sweep.
//!
//! Every node is a dense row-major matrix. A tape records one forward
//! evaluation; [`Tape::backward`] then accumulates adjoints in reverse
//! evaluation order. When constructed with [`Tape::with_tangents`] each
//! operation also propagates a tangent alongside its value, which gives
//! Jacobian-vector products over the same recorded computation.

use std::sync::Arc;

use crate::error::{DopeError, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DopeError::Shape(format!(
                "tensor {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Constant matrix shared between tapes (e.g. truncated Fourier bases).
#[derive(Debug, Clone)]
pub struct ConstMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Arc<Vec<f64>>,
}

impl ConstMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "constant matrix shape");
        Self {
            rows,
            cols,
            data: Arc::new(data),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulConst(Var, ConstMatrix),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Vec<f64>>),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    ExpClamp { x: Var, lo: f64, hi: f64 },
    Square(Var),
    SpectralMix(SpectralMix),
    Gather(Var, Arc<Vec<usize>>),
    DotConst(Var, Arc<Vec<f64>>),
    Sum(Var),
    SumSquares(Var),
    Concat(Vec<Var>),
}

#[derive(Debug, Clone)]
struct SpectralMix {
    x: Var,
    wr: Var,
    wi: Var,
    cin: usize,
    cout: usize,
    batch: usize,
    modes: usize,
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    tangent: Option<Vec<f64>>,
    op: Op,
}

/// One recorded forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    tangents: bool,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c (+)= a · b` for row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // a is m x k logically; stored k x m when transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> DopeError {
    DopeError::Shape(format!(
        "{what}: {}x{} incompatible with {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also carries forward tangents through every operation.
    pub fn with_tangents() -> Self {
        Self {
            nodes: Vec::new(),
            tangents: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Tangent carried by a node (zero when the tape has no tangents).
    pub fn tangent(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tangent.as_deref()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, tangent: Option<Vec<f64>>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let tangent = if self.tangents {
            Some(tangent.unwrap_or_else(|| vec![0.0; value.len()]))
        } else {
            None
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            tangent,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn tan(&self, v: Var) -> &[f64] {
        self.nodes[v.0]
            .tangent
            .as_deref()
            .expect("tangent requested on a tape without tangents")
    }

    /// Leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows, t.cols, t.data.clone(), None, Op::Leaf)
    }

    /// Leaf with an explicit tangent seed.
    pub fn leaf_with_tangent(&mut self, t: &Tensor, tangent: &[f64]) -> Result<Var> {
        if tangent.len() != t.len() {
            return Err(DopeError::Shape(format!(
                "tangent of length {} for tensor of {} values",
                tangent.len(),
                t.len()
            )));
        }
        let tg = if self.tangents { Some(tangent.to_vec()) } else { None };
        Ok(self.push(t.rows, t.cols, t.data.clone(), tg, Op::Leaf))
    }

    pub fn leaf_owned(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(DopeError::Shape(format!(
                "leaf {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, None, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let tangent = if self.tangents {
            let mut t = vec![0.0; m * n];
            gemm(m, k, n, self.tan(a), false, self.value(b), false, &mut t, false);
            gemm(m, k, n, self.value(a), false, self.tan(b), false, &mut t, true);
            Some(t)
        } else {
            None
        };
        Ok(self.push(m, n, out, tangent, Op::MatMul(a, b)))
    }

    /// `x · C` for a constant matrix `C`.
    pub fn matmul_const(&mut self, x: Var, c: &ConstMatrix) -> Result<Var> {
        let (m, k) = self.shape(x);
        if k != c.rows {
            return Err(shape_err("matmul_const", (m, k), (c.rows, c.cols)));
        }
        let n = c.cols;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x), false, &c.data, false, &mut out, false);
        let tangent = if self.tangents {
            let mut t = vec![0.0; m * n];
            gemm(m, k, n, self.tan(x), false, &c.data, false, &mut t, false);
            Some(t)
        } else {
            None
        };
        Ok(self.push(m, n, out, tangent, Op::MatMulConst(x, c.clone())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let tr = |src: &[f64]| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            out
        };
        let out = tr(self.value(a));
        let tangent = self.tangents.then(|| tr(self.tan(a)));
        self.push(c, r, out, tangent, Op::Transpose(a))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let out = self.value(a).to_vec();
        let tangent = self.tangents.then(|| self.tan(a).to_vec());
        Ok(self.push(rows, cols, out, tangent, Op::Reshape(a)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tangent = self
            .tangents
            .then(|| self.tan(a).iter().zip(self.tan(b)).map(|(x, y)| x + y).collect());
        Ok(self.push(r, c, out, tangent, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let tangent = self
            .tangents
            .then(|| self.tan(a).iter().zip(self.tan(b)).map(|(x, y)| x - y).collect());
        Ok(self.push(r, c, out, tangent, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.binary(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        let tangent = self.tangents.then(|| {
            let (ta, tb) = (self.tan(a), self.tan(b));
            (0..va.len()).map(|i| ta[i] * vb[i] + va[i] * tb[i]).collect()
        });
        Ok(self.push(r, c, out, tangent, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        let (r, cols) = self.shape(a);
        if c.len() != r * cols {
            return Err(DopeError::Shape(format!(
                "mul_const: {}x{} with {} constants",
                r,
                cols,
                c.len()
            )));
        }
        let out = self.value(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let tangent = self
            .tangents
            .then(|| self.tan(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect());
        Ok(self.push(r, cols, out, tangent, Op::MulConst(a, c)))
    }

    /// `x[i][j] + b[i]` with `b` of shape `rows x 1`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (r, 1) {
            return Err(shape_err("add_row_bias", (r, c), self.shape(b)));
        }
        let bias = |xv: &[f64], bv: &[f64]| {
            let mut out = xv.to_vec();
            for (i, row) in out.chunks_mut(c).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[i]);
            }
            out
        };
        let out = bias(self.value(x), self.value(b));
        let tangent = self.tangents.then(|| bias(self.tan(x), self.tan(b)));
        Ok(self.push(r, c, out, tangent, Op::AddRowBias(x, b)))
    }

    /// `x[i][j] + b[j]` with `b` of shape `1 x cols`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(b) != (1, c) {
            return Err(shape_err("add_col_bias", (r, c), self.shape(b)));
        }
        let bias = |xv: &[f64], bv: &[f64]| {
            let mut out = xv.to_vec();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
            out
        };
        let out = bias(self.value(x), self.value(b));
        let tangent = self.tangents.then(|| bias(self.tan(x), self.tan(b)));
        Ok(self.push(r, c, out, tangent, Op::AddColBias(x, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let tangent = self.tangents.then(|| self.tan(a).iter().map(|x| x * s).collect());
        self.push(r, c, out, tangent, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let tangent = self.tangents.then(|| {
            self.value(a)
                .iter()
                .zip(self.tan(a))
                .map(|(&x, t)| gelu_grad(x) * t)
                .collect()
        });
        self.push(r, c, out, tangent, Op::Gelu(a))
    }

    /// `exp(clamp(x, lo, hi))`; zero derivative where the clamp is active.
    pub fn exp_clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v.clamp(lo, hi).exp()).collect();
        let tangent = self.tangents.then(|| {
            self.value(x)
                .iter()
                .zip(self.tan(x))
                .zip(&out)
                .map(|((v, t), y)| if *v > lo && *v < hi { y * t } else { 0.0 })
                .collect()
        });
        self.push(r, c, out, tangent, Op::ExpClamp { x, lo, hi })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * x).collect();
        let tangent = self.tangents.then(|| {
            self.value(a)
                .iter()
                .zip(self.tan(a))
                .map(|(x, t)| 2.0 * x * t)
                .collect()
        });
        self.push(r, c, out, tangent, Op::Square(a))
    }

    /// Complex per-mode channel mixing of truncated spectra.
    ///
    /// `x` has `cin * batch` rows (row `i * batch + b`) and `2 * modes`
    /// columns: real parts first, imaginary parts second. The weights `wr`,
    /// `wi` have `cin * cout` rows (row `i * cout + o`) and `modes` columns.
    pub fn spectral_mix(&mut self, x: Var, wr: Var, wi: Var, cin: usize, cout: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let (wr_r, modes) = self.shape(wr);
        if self.shape(wi) != (wr_r, modes) || wr_r != cin * cout {
            return Err(shape_err("spectral_mix weights", self.shape(wr), self.shape(wi)));
        }
        if xc != 2 * modes || xr % cin != 0 {
            return Err(shape_err("spectral_mix input", (xr, xc), (cin, 2 * modes)));
        }
        let batch = xr / cin;
        let spec = SpectralMix {
            x,
            wr,
            wi,
            cin,
            cout,
            batch,
            modes,
        };
        let out = spectral_forward(&spec, self.value(x), self.value(wr), self.value(wi));
        let tangent = self.tangents.then(|| {
            let mut t = spectral_forward(&spec, self.tan(x), self.value(wr), self.value(wi));
            let t2 = spectral_forward(&spec, self.value(x), self.tan(wr), self.tan(wi));
            t.iter_mut().zip(t2).for_each(|(a, b)| *a += b);
            t
        });
        Ok(self.push(cout * batch, 2 * modes, out, tangent, Op::SpectralMix(spec)))
    }

    /// Select flat entries; result is `1 x idx.len()`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DopeError::Shape(format!("gather index {bad} out of {n}")));
        }
        let va = self.value(a);
        let out = idx.iter().map(|&i| va[i]).collect();
        let tangent = self.tangents.then(|| {
            let ta = self.tan(a);
            idx.iter().map(|&i| ta[i]).collect()
        });
        Ok(self.push(1, idx.len(), out, tangent, Op::Gather(a, idx)))
    }

    /// `Σ c_j a_j` with constant coefficients; result is `1 x 1`.
    pub fn dot_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(DopeError::Shape(format!(
                "dot_const: {} values with {} coefficients",
                self.value(a).len(),
                c.len()
            )));
        }
        let out = self.value(a).iter().zip(c.iter()).map(|(x, y)| x * y).sum();
        let tangent = self
            .tangents
            .then(|| vec![self.tan(a).iter().zip(c.iter()).map(|(x, y)| x * y).sum()]);
        Ok(self.push(1, 1, vec![out], tangent, Op::DotConst(a, c)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().sum();
        let tangent = self.tangents.then(|| vec![self.tan(a).iter().sum()]);
        self.push(1, 1, vec![out], tangent, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x * x).sum();
        let tangent = self.tangents.then(|| {
            vec![self
                .value(a)
                .iter()
                .zip(self.tan(a))
                .map(|(x, t)| 2.0 * x * t)
                .sum()]
        });
        self.push(1, 1, vec![out], tangent, Op::SumSquares(a))
    }

    /// Stack nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DopeError::Shape("concat of zero parts".into()));
        };
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(shape_err("concat_rows", (r, c), (rows, cols)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let tangent = self.tangents.then(|| {
            let mut t = Vec::with_capacity(out.len());
            for &p in parts {
                t.extend_from_slice(self.tan(p));
            }
            t
        });
        Ok(self.push(rows, cols, out, tangent, Op::Concat(parts.to_vec())))
    }

    /// Adjoints of `output` (a 1x1 node) with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(shape_err("backward seed", self.shape(output), (1, 1)));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                // dA = G Bᵀ, dB = Aᵀ G
                gemm(m, n, k, g, false, &vb, true, acc(adj, *a, m * k), true);
                gemm(k, m, n, &va, true, g, false, acc(adj, *b, k * n), true);
            }
            Op::MatMulConst(x, c) => {
                let (m, k) = self.shape(*x);
                gemm(m, c.cols, k, g, false, &c.data, true, acc(adj, *x, m * k), true);
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a);
                let d = acc(adj, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => {
                let d = acc(adj, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let d = acc(adj, *v, g.len());
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                let d = acc(adj, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let d = acc(adj, *b, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                acc(adj, *a, g.len()).iter_mut().zip(da).for_each(|(x, y)| *x += y);
                acc(adj, *b, g.len()).iter_mut().zip(db).for_each(|(x, y)| *x += y);
            }
            Op::MulConst(a, c) => {
                let d = acc(adj, *a, g.len());
                d.iter_mut()
                    .zip(g.iter().zip(c.iter()))
                    .for_each(|(x, (y, z))| *x += y * z);
            }
            Op::AddRowBias(x, b) => {
                let c = node.cols;
                acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(a, y)| *a += y);
                let db = acc(adj, *b, node.rows);
                for (i, row) in g.chunks(c).enumerate() {
                    db[i] += row.iter().sum::<f64>();
                }
            }
            Op::AddColBias(x, b) => {
                let c = node.cols;
                acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(a, y)| *a += y);
                let db = acc(adj, *b, c);
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                }
            }
            Op::Scale(a, s) => {
                let d = acc(adj, *a, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::Gelu(a) => {
                let va = self.value(*a).to_vec();
                let d = acc(adj, *a, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_grad(va[i]);
                }
            }
            Op::ExpClamp { x, lo, hi } => {
                let vx = self.value(*x).to_vec();
                let d = acc(adj, *x, g.len());
                for i in 0..g.len() {
                    if vx[i] > *lo && vx[i] < *hi {
                        d[i] += g[i] * node.value[i];
                    }
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).to_vec();
                let d = acc(adj, *a, g.len());
                for i in 0..g.len() {
                    d[i] += 2.0 * va[i] * g[i];
                }
            }
            Op::SpectralMix(s) => {
                let (dx, dwr, dwi) =
                    spectral_backward(s, g, self.value(s.x), self.value(s.wr), self.value(s.wi));
                for (v, d) in [(s.x, dx), (s.wr, dwr), (s.wi, dwi)] {
                    acc(adj, v, len(v)).iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather(a, idx) => {
                let n = len(*a);
                let d = acc(adj, *a, n);
                for (k, &i) in idx.iter().enumerate() {
                    d[i] += g[k];
                }
            }
            Op::DotConst(a, c) => {
                let d = acc(adj, *a, c.len());
                d.iter_mut().zip(c.iter()).for_each(|(x, y)| *x += g[0] * y);
            }
            Op::Sum(a) => {
                let n = len(*a);
                acc(adj, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::SumSquares(a) => {
                let va = self.value(*a).to_vec();
                let d = acc(adj, *a, va.len());
                for i in 0..va.len() {
                    d[i] += 2.0 * va[i] * g[0];
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    let d = acc(adj, p, n);
                    d.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                    off += n;
                }
            }
        }
    }
}

fn spectral_forward(s: &SpectralMix, x: &[f64], wr: &[f64], wi: &[f64]) -> Vec<f64> {
    let (m, b_n) = (s.modes, s.batch);
    let cols = 2 * m;
    let mut out = vec![0.0; s.cout * b_n * cols];
    for i in 0..s.cin {
        for o in 0..s.cout {
            let w_off = (i * s.cout + o) * m;
            let (wr, wi) = (&wr[w_off..w_off + m], &wi[w_off..w_off + m]);
            for b in 0..b_n {
                let xrow = &x[(i * b_n + b) * cols..(i * b_n + b + 1) * cols];
                let orow = &mut out[(o * b_n + b) * cols..(o * b_n + b + 1) * cols];
                let (xre, xim) = xrow.split_at(m);
                let (ore, oim) = orow.split_at_mut(m);
                for k in 0..m {
                    ore[k] += xre[k] * wr[k] - xim[k] * wi[k];
                    oim[k] += xre[k] * wi[k] + xim[k] * wr[k];
                }
            }
        }
    }
    out
}

fn spectral_backward(
    s: &SpectralMix,
    g: &[f64],
    x: &[f64],
    wr: &[f64],
    wi: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, b_n) = (s.modes, s.batch);
    let cols = 2 * m;
    let mut dx = vec![0.0; x.len()];
    let mut dwr = vec![0.0; wr.len()];
    let mut dwi = vec![0.0; wi.len()];
    for i in 0..s.cin {
        for o in 0..s.cout {
            let w_off = (i * s.cout + o) * m;
            for b in 0..b_n {
                let xo = (i * b_n + b) * cols;
                let go = (o * b_n + b) * cols;
                for k in 0..m {
                    let (gr, gi) = (g[go + k], g[go + m + k]);
                    let (xr, xi) = (x[xo + k], x[xo + m + k]);
                    let (w_r, w_i) = (wr[w_off + k], wi[w_off + k]);
                    dx[xo + k] += gr * w_r + gi * w_i;
                    dx[xo + m + k] += -gr * w_i + gi * w_r;
                    dwr[w_off + k] += gr * xr + gi * xi;
                    dwi[w_off + k] += -gr * xi + gi * xr;
                }
            }
        }
    }
    (dx, dwr, dwi)
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of a node; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }

    /// Adjoint of a node, zero-filled when it does not influence the output.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Value and gradient of a scalar computation with respect to `params`.
///
/// `f` receives a fresh tape plus one leaf per parameter tensor and must
/// return a 1x1 node.
pub fn reverse_gradient<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;
    let g = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.wrt(v, p.len()))
        .collect();
    Ok((tape.scalar(out), g))
}

/// Value and directional derivative of a scalar computation along `tangents`.
pub fn forward_jvp<F>(params: &[Tensor], tangents: &[Vec<f64>], f: F) -> Result<(f64, f64)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if params.len() != tangents.len() {
        return Err(DopeError::Shape(format!(
            "{} parameters with {} tangents",
            params.len(),
            tangents.len()
        )));
    }
    let mut tape = Tape::with_tangents();
    let mut leaves = Vec::with_capacity(params.len());
    for (p, t) in params.iter().zip(tangents) {
        leaves.push(tape.leaf_with_tangent(p, t)?);
    }
    let out = f(&mut tape, &leaves)?;
    if tape.shape(out) != (1, 1) {
        return Err(shape_err("forward_jvp output", tape.shape(out), (1, 1)));
    }
    let t = tape.tangent(out).map(|t| t[0]).unwrap_or(0.0);
    Ok((tape.scalar(out), t))
}

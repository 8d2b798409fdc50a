//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Leaves are either constants or parameters; only nodes that depend on a
//! parameter receive gradients during [`Tape::backward`]. Every value is a
//! 2-D matrix; scalars are `1 x 1`.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Clamp(Var, f64, f64),
    Log(Var),
    LogFloor(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    Rows(Var, usize),
    Cols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    WeightedRows(Var, Var),
    GruCell { gi: Var, gh: Var, h: Var, r: Mat, z: Mat, n: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, value: Mat, op: Op) -> Var {
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    /// `a + bias` where `bias` is a `1 x m` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        self.binary(a, bias, value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.unary(a, value, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.unary(a, value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.unary(a, value, Op::Clamp(a, lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    /// `ln(max(a, floor))`; entries below the floor get no gradient.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| if x < floor { floor.ln() } else { x.ln() });
        self.unary(a, value, Op::LogFloor(a, floor))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.unary(a, value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.unary(a, value, Op::LogSoftmax(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        self.unary(a, value, Op::MeanAll(a))
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.unary(a, value, Op::Rows(a, start))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.unary(a, value, Op::Cols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Selects (and possibly repeats) rows by index.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), index);
        self.unary(a, value, Op::Gather(a, index.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape: size mismatch");
        self.unary(a, value, Op::Reshape(a))
    }

    /// `out[b] = sum_k alpha[b, k] * rows[b * K + k]` for `alpha: B x K`.
    pub fn weighted_rows(&mut self, alpha: Var, rows: Var) -> Var {
        let (b, k) = self.value(alpha).dim();
        let r = self.value(rows);
        assert_eq!(r.nrows(), b * k, "weighted_rows: expected {} rows", b * k);
        let mut value = Array2::zeros((b, r.ncols()));
        let al = self.value(alpha);
        for i in 0..b {
            let mut out = value.row_mut(i);
            for j in 0..k {
                out.scaled_add(al[[i, j]], &r.row(i * k + j));
            }
        }
        self.binary(alpha, rows, value, Op::WeightedRows(alpha, rows))
    }

    /// One gated-recurrent-unit update.
    ///
    /// `gi` and `gh` are the input and hidden projections (`B x 3H`, gate
    /// order reset, update, candidate) including their biases; `h` is the
    /// previous state.
    pub fn gru_cell(&mut self, gi: Var, gh: Var, h: Var) -> Var {
        let hv = self.value(h);
        let width = hv.ncols();
        let giv = self.value(gi);
        let ghv = self.value(gh);
        let mut r = giv.slice(s![.., 0..width]).to_owned();
        r += &ghv.slice(s![.., 0..width]);
        r.mapv_inplace(sigmoid);
        let mut z = giv.slice(s![.., width..2 * width]).to_owned();
        z += &ghv.slice(s![.., width..2 * width]);
        z.mapv_inplace(sigmoid);
        let mut n = &r * &ghv.slice(s![.., 2 * width..]);
        n += &giv.slice(s![.., 2 * width..]);
        n.mapv_inplace(f64::tanh);
        let mut value = hv.clone();
        Zip::from(&mut value)
            .and(&z)
            .and(&n)
            .for_each(|o, &zz, &nn| *o = (1.0 - zz) * nn + zz * *o);
        let ng = self.ng(gi) || self.ng(gh) || self.ng(h);
        self.push(value, Op::GruCell { gi, gh, h, r, z, n }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |v: Var, d: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.ng(*bias) {
                        acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g * *s, &mut grads),
                Op::AddScalar(a) => acc(*a, g, &mut grads),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d *= *slope });
                    acc(*a, d, &mut grads);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        *d *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x < *lo || x > *hi { *d = 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| *d /= x);
                    acc(*a, d, &mut grads);
                }
                Op::LogFloor(a, floor) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d = if x < *floor { 0.0 } else { *d / x });
                    acc(*a, d, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    let dots = d.sum_axis(Axis(1));
                    for (mut row, (yr, dot)) in d.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots.iter())) {
                        row.scaled_add(-dot, &yr);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1));
                    let mut d = g;
                    for (mut row, (pr, s)) in d.rows_mut().into_iter().zip(p.rows().into_iter().zip(sums.iter())) {
                        row.scaled_add(-s, &pr);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let dim = self.value(*a).dim();
                    acc(*a, Array2::from_elem(dim, g[[0, 0]]), &mut grads);
                }
                Op::MeanAll(a) => {
                    let m = self.value(*a);
                    let dim = m.dim();
                    acc(*a, Array2::from_elem(dim, g[[0, 0]] / m.len() as f64), &mut grads);
                }
                Op::Rows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::Cols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.ng(p) {
                            acc(p, g.slice(s![offset..offset + n, ..]).to_owned(), &mut grads);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.ng(p) {
                            acc(p, g.slice(s![.., offset..offset + n]).to_owned(), &mut grads);
                        }
                        offset += n;
                    }
                }
                Op::Gather(a, index) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (row, &i) in g.rows().into_iter().zip(index.iter()) {
                        let mut target = d.row_mut(i);
                        target += &row;
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(dim, flat).expect("reshape grad"), &mut grads);
                }
                Op::WeightedRows(alpha, rows) => {
                    let al = self.value(*alpha);
                    let r = self.value(*rows);
                    let (b, k) = al.dim();
                    if self.ng(*alpha) {
                        let mut d = Array2::zeros((b, k));
                        for i in 0..b {
                            for j in 0..k {
                                d[[i, j]] = g.row(i).dot(&r.row(i * k + j));
                            }
                        }
                        acc(*alpha, d, &mut grads);
                    }
                    if self.ng(*rows) {
                        let mut d = Array2::zeros(r.dim());
                        for i in 0..b {
                            for j in 0..k {
                                d.row_mut(i * k + j).scaled_add(al[[i, j]], &g.row(i));
                            }
                        }
                        acc(*rows, d, &mut grads);
                    }
                }
                Op::GruCell { gi, gh, h, r, z, n } => {
                    let width = n.ncols();
                    let hv = self.value(*h);
                    let ghv = self.value(*gh);
                    let rows = g.nrows();
                    let mut dgi = Array2::zeros((rows, 3 * width));
                    let mut dgh = Array2::zeros((rows, 3 * width));
                    let mut dh = Array2::zeros((rows, width));
                    for i in 0..rows {
                        for j in 0..width {
                            let go = g[[i, j]];
                            let (rr, zz, nn) = (r[[i, j]], z[[i, j]], n[[i, j]]);
                            let dn = go * (1.0 - zz);
                            let dz = go * (hv[[i, j]] - nn);
                            dh[[i, j]] = go * zz;
                            let dan = dn * (1.0 - nn * nn);
                            let dr = dan * ghv[[i, 2 * width + j]];
                            let daz = dz * zz * (1.0 - zz);
                            let dar = dr * rr * (1.0 - rr);
                            dgi[[i, j]] = dar;
                            dgh[[i, j]] = dar;
                            dgi[[i, width + j]] = daz;
                            dgh[[i, width + j]] = daz;
                            dgi[[i, 2 * width + j]] = dan;
                            dgh[[i, 2 * width + j]] = dan * rr;
                        }
                    }
                    acc(*gi, dgi, &mut grads);
                    acc(*gh, dgh, &mut grads);
                    acc(*h, dh, &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

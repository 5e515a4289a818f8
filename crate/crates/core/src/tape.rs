//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records a directed acyclic graph of vector-valued nodes.
//! Values are computed eagerly in `f64` as nodes are appended, so a tape is
//! also the forward pass; [`Tape::backward`] then walks the nodes in reverse
//! and accumulates adjoints. Operands always have smaller indices than their
//! results, which makes the reverse walk a valid topological order.
//!
//! Scalars are length-1 vectors. Shape agreement is a programmer contract
//! and is enforced with assertions rather than `Result`s.

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a*x + b*y` elementwise with constant coefficients.
    Axpy { a: f64, x: usize, b: f64, y: usize },
    /// `mul*x + add` elementwise; only the slope matters in reverse.
    Affine { x: usize, mul: f64 },
    /// Row-major `rows x cols` matrix times vector.
    MatVec { w: usize, x: usize, rows: usize, cols: usize },
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    /// Sum of squared entries; scalar result.
    SumSq(usize),
    /// Arithmetic mean of entries; scalar result.
    Mean(usize),
    /// Single entry extraction; scalar result.
    Index { x: usize, i: usize },
    /// Subset extraction in the given index order.
    Gather { x: usize, indices: Vec<usize> },
    /// Vector scaled by a scalar node.
    MulScalar { x: usize, s: usize },
    /// Scalar divided by scalar.
    DivScalar { num: usize, den: usize },
    /// `logsumexp(logits) - logits[class]`; scalar result.
    CrossEntropy { logits: usize, class: usize },
    /// Row `row` of a flat row-major table with `dim` columns.
    EmbedRow { table: usize, row: usize, dim: usize },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
///
/// Gradients of interior nodes are consumed during the reverse walk; only
/// leaves (inputs/parameters) retain their adjoint for querying.
pub struct Gradients {
    g: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if no gradient flowed to it (or it was an
    /// interior node whose adjoint has been consumed).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Value of a scalar (length-1) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        assert!(!value.is_empty(), "leaf must be non-empty");
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![x], Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let out = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "sub: length mismatch");
        let out = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let out = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn axpy(&mut self, a: f64, x: Var, b: f64, y: Var) -> Var {
        let (vx, vy) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        assert_eq!(vx.len(), vy.len(), "axpy: length mismatch");
        let out = vx.iter().zip(vy).map(|(p, q)| a * p + b * q).collect();
        self.push(out, Op::Axpy { a, x: x.0, b, y: y.0 })
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| mul * v + add).collect();
        self.push(out, Op::Affine { x: x.0, mul })
    }

    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        let vw = &self.nodes[w.0].value;
        let vx = &self.nodes[x.0].value;
        assert_eq!(vw.len(), rows * cols, "matvec: weight length mismatch");
        assert_eq!(vx.len(), cols, "matvec: input length mismatch");
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &vw[r * cols..(r + 1) * cols];
            out[r] = row.iter().zip(vx).map(|(a, b)| a * b).sum();
        }
        self.push(out, Op::MatVec { w: w.0, x: x.0, rows, cols })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(out, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        self.push(out, Op::Sigmoid(x.0))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let max = vx.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vx.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = exps.iter().map(|e| e / sum).collect();
        self.push(out, Op::Softmax(x.0))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().map(|v| v * v).sum();
        self.push(vec![s], Op::SumSq(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let m = vx.iter().sum::<f64>() / vx.len() as f64;
        self.push(vec![m], Op::Mean(x.0))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let v = self.nodes[x.0].value[i];
        self.push(vec![v], Op::Index { x: x.0, i })
    }

    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let vx = &self.nodes[x.0].value;
        let out: Vec<f64> = indices.iter().map(|&i| vx[i]).collect();
        assert!(!out.is_empty(), "gather: empty index set");
        self.push(out, Op::Gather { x: x.0, indices: indices.to_vec() })
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let out = self.nodes[x.0].value.iter().map(|v| v * sv).collect();
        self.push(out, Op::MulScalar { x: x.0, s: s.0 })
    }

    pub fn div_scalar(&mut self, num: Var, den: Var) -> Var {
        let out = self.scalar_value(num) / self.scalar_value(den);
        self.push(vec![out], Op::DivScalar { num: num.0, den: den.0 })
    }

    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Var {
        let z = &self.nodes[logits.0].value;
        assert!(class < z.len(), "cross_entropy: class out of range");
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.push(vec![lse - z[class]], Op::CrossEntropy { logits: logits.0, class })
    }

    pub fn embed_row(&mut self, table: Var, row: usize, dim: usize) -> Var {
        let vt = &self.nodes[table.0].value;
        assert!((row + 1) * dim <= vt.len(), "embed_row: row out of range");
        let out = vt[row * dim..(row + 1) * dim].to_vec();
        self.push(out, Op::EmbedRow { table: table.0, row, dim })
    }

    /// Mean squared error between two equal-length nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let d = self.sub(a, b);
        let ss = self.sum_sq(d);
        self.affine(ss, 1.0 / n, 0.0)
    }

    /// Sum of a non-empty list of equal-shaped nodes.
    pub fn sum_list(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum_list: empty list");
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let grad = match self.nodes[idx].op {
                Op::Leaf => continue,
                _ => match g[idx].take() {
                    Some(gr) => gr,
                    None => continue,
                },
            };
            let val = |i: usize| -> &[f64] { &self.nodes[i].value };
            let acc = |store: &mut Vec<Option<Vec<f64>>>, node: usize, len: usize, f: &mut dyn FnMut(&mut [f64])| {
                let slot = store[node].get_or_insert_with(|| vec![0.0; len]);
                f(slot.as_mut_slice());
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut g, *a, grad.len(), &mut |s| {
                        for (si, gi) in s.iter_mut().zip(&grad) {
                            *si += gi;
                        }
                    });
                    acc(&mut g, *b, grad.len(), &mut |s| {
                        for (si, gi) in s.iter_mut().zip(&grad) {
                            *si += gi;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *a, grad.len(), &mut |s| {
                        for (si, gi) in s.iter_mut().zip(&grad) {
                            *si += gi;
                        }
                    });
                    acc(&mut g, *b, grad.len(), &mut |s| {
                        for (si, gi) in s.iter_mut().zip(&grad) {
                            *si -= gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                    acc(&mut g, *a, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += grad[i] * vb[i];
                        }
                    });
                    acc(&mut g, *b, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += grad[i] * va[i];
                        }
                    });
                }
                Op::Axpy { a, x, b, y } => {
                    let (ca, cb) = (*a, *b);
                    acc(&mut g, *x, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += ca * grad[i];
                        }
                    });
                    acc(&mut g, *y, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += cb * grad[i];
                        }
                    });
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    acc(&mut g, *x, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += m * grad[i];
                        }
                    });
                }
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let vw = val(*w).to_vec();
                    let vx = val(*x).to_vec();
                    acc(&mut g, *w, rows * cols, &mut |s| {
                        for r in 0..rows {
                            for c in 0..cols {
                                s[r * cols + c] += grad[r] * vx[c];
                            }
                        }
                    });
                    acc(&mut g, *x, cols, &mut |s| {
                        for r in 0..rows {
                            for c in 0..cols {
                                s[c] += grad[r] * vw[r * cols + c];
                            }
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = self.nodes[idx].value.clone();
                    acc(&mut g, *x, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += grad[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[idx].value.clone();
                    acc(&mut g, *x, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += grad[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = self.nodes[idx].value.clone();
                    let dot: f64 = grad.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                    acc(&mut g, *x, grad.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += y[i] * (grad[i] - dot);
                        }
                    });
                }
                Op::SumSq(x) => {
                    let vx = val(*x).to_vec();
                    acc(&mut g, *x, vx.len(), &mut |s| {
                        for i in 0..s.len() {
                            s[i] += 2.0 * grad[0] * vx[i];
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    acc(&mut g, *x, n, &mut |s| {
                        let share = grad[0] / n as f64;
                        for si in s.iter_mut() {
                            *si += share;
                        }
                    });
                }
                Op::Index { x, i } => {
                    let (n, i) = (val(*x).len(), *i);
                    acc(&mut g, *x, n, &mut |s| {
                        s[i] += grad[0];
                    });
                }
                Op::Gather { x, indices } => {
                    let n = val(*x).len();
                    acc(&mut g, *x, n, &mut |s| {
                        for (k, &i) in indices.iter().enumerate() {
                            s[i] += grad[k];
                        }
                    });
                }
                Op::MulScalar { x, s } => {
                    let sv = val(*s)[0];
                    let vx = val(*x).to_vec();
                    acc(&mut g, *x, grad.len(), &mut |sl| {
                        for i in 0..sl.len() {
                            sl[i] += grad[i] * sv;
                        }
                    });
                    acc(&mut g, *s, 1, &mut |sl| {
                        sl[0] += grad.iter().zip(&vx).map(|(gi, xi)| gi * xi).sum::<f64>();
                    });
                }
                Op::DivScalar { num, den } => {
                    let (nv, dv) = (val(*num)[0], val(*den)[0]);
                    acc(&mut g, *num, 1, &mut |s| {
                        s[0] += grad[0] / dv;
                    });
                    acc(&mut g, *den, 1, &mut |s| {
                        s[0] -= grad[0] * nv / (dv * dv);
                    });
                }
                Op::CrossEntropy { logits, class } => {
                    let z = val(*logits).to_vec();
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let c = *class;
                    acc(&mut g, *logits, z.len(), &mut |s| {
                        for i in 0..s.len() {
                            let p = exps[i] / sum;
                            let ind = if i == c { 1.0 } else { 0.0 };
                            s[i] += grad[0] * (p - ind);
                        }
                    });
                }
                Op::EmbedRow { table, row, dim } => {
                    let n = val(*table).len();
                    let (row, dim) = (*row, *dim);
                    acc(&mut g, *table, n, &mut |s| {
                        for j in 0..dim {
                            s[row * dim + j] += grad[j];
                        }
                    });
                }
            }
        }
        Gradients { g }
    }
}

//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Rows are sequence elements packed back to back; `segments` delimits the
//! sequences so pooling and neighbour shifts never cross examples.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn add_assign(&mut self, o: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `a b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shapes");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &x) in a.row(i).iter().enumerate() {
            if x != 0.0 {
                axpy(orow, x, b.row(p));
            }
        }
    }
    out
}

/// `a^T g`
fn matmul_tn(a: &Mat, g: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, g.cols);
    for i in 0..a.rows {
        let grow = g.row(i);
        for (p, &x) in a.row(i).iter().enumerate() {
            if x != 0.0 {
                axpy(&mut out.data[p * g.cols..(p + 1) * g.cols], x, grow);
            }
        }
    }
    out
}

/// `g b^T`
fn matmul_nt(g: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(g.rows, b.rows);
    for i in 0..g.rows {
        let grow = g.row(i);
        for p in 0..b.rows {
            out.data[i * b.rows + p] = grow.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub type Var = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    /// Row `i` receives row `i - 1` of the same segment (zero at the start).
    Prev,
    /// Row `i` receives row `i + 1` of the same segment (zero at the end).
    Next,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Bias(Var, Var),
    Tanh(Var),
    SegMean(Var),
    Broadcast(Var),
    Shift(Var, Shift),
}

pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    segments: Vec<Range<usize>>,
}

impl Tape {
    pub fn new(segments: Vec<Range<usize>>) -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs_grad: Vec::new(), segments }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v]
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.values.len() - 1
    }

    /// A constant input.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(&self.values[a], &self.values[b]);
        let g = self.needs_grad[a] || self.needs_grad[b];
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.values[a], &self.values[b]);
        assert!(x.rows == y.rows && x.cols == y.cols, "add shapes");
        let mut v = x.clone();
        v.add_assign(y);
        let g = self.needs_grad[a] || self.needs_grad[b];
        self.push(v, Op::Add(a, b), g)
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn bias(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (&self.values[a], &self.values[b]);
        assert!(bias.rows == 1 && bias.cols == x.cols, "bias shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            axpy(v.row_mut(i), 1.0, &bias.data);
        }
        let g = self.needs_grad[a] || self.needs_grad[b];
        self.push(v, Op::Bias(a, b), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.values[a].clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        let g = self.needs_grad[a];
        self.push(v, Op::Tanh(a), g)
    }

    /// Per-segment mean: one row per segment.
    pub fn seg_mean(&mut self, a: Var) -> Var {
        let x = &self.values[a];
        let mut v = Mat::zeros(self.segments.len(), x.cols);
        for (s, r) in self.segments.iter().enumerate() {
            let inv = 1.0 / r.len().max(1) as f64;
            for i in r.clone() {
                axpy(&mut v.data[s * x.cols..(s + 1) * x.cols], inv, x.row(i));
            }
        }
        let g = self.needs_grad[a];
        self.push(v, Op::SegMean(a), g)
    }

    /// Copies segment row `s` to every row of segment `s`.
    pub fn broadcast(&mut self, a: Var) -> Var {
        let x = &self.values[a];
        let n = self.segments.last().map_or(0, |r| r.end);
        let mut v = Mat::zeros(n, x.cols);
        for (s, r) in self.segments.iter().enumerate() {
            for i in r.clone() {
                v.row_mut(i).copy_from_slice(x.row(s));
            }
        }
        let g = self.needs_grad[a];
        self.push(v, Op::Broadcast(a), g)
    }

    pub fn shift(&mut self, a: Var, dir: Shift) -> Var {
        let x = &self.values[a];
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in &self.segments {
            for i in r.clone() {
                let src = match dir {
                    Shift::Prev => (i > r.start).then(|| i - 1),
                    Shift::Next => (i + 1 < r.end).then(|| i + 1),
                };
                if let Some(j) = src {
                    v.row_mut(i).copy_from_slice(x.row(j));
                }
            }
        }
        let g = self.needs_grad[a];
        self.push(v, Op::Shift(a, dir), g)
    }

    /// Gradients of `<seed, value(out)>` with respect to every node that needs one.
    pub fn backward(&self, out: Var, seed: Mat) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[out] = Some(seed);
        let accumulate = |grads: &mut Vec<Option<Mat>>, v: Var, g: Mat| match &mut grads[v] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for v in (0..=out).rev() {
            if !self.needs_grad[v] {
                continue;
            }
            let Some(g) = grads[v].take() else { continue };
            match self.ops[v] {
                Op::Leaf => {
                    grads[v] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs_grad[a] {
                        accumulate(&mut grads, a, matmul_nt(&g, &self.values[b]));
                    }
                    if self.needs_grad[b] {
                        accumulate(&mut grads, b, matmul_tn(&self.values[a], &g));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad[a] {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs_grad[b] {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Bias(a, b) => {
                    if self.needs_grad[b] {
                        let mut gb = Mat::zeros(1, g.cols);
                        for i in 0..g.rows {
                            axpy(&mut gb.data, 1.0, g.row(i));
                        }
                        accumulate(&mut grads, b, gb);
                    }
                    if self.needs_grad[a] {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&self.values[v].data) {
                        *x *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SegMean(a) => {
                    let mut ga = Mat::zeros(self.values[a].rows, g.cols);
                    for (s, r) in self.segments.iter().enumerate() {
                        let inv = 1.0 / r.len().max(1) as f64;
                        for i in r.clone() {
                            axpy(ga.row_mut(i), inv, g.row(s));
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Broadcast(a) => {
                    let mut ga = Mat::zeros(self.values[a].rows, g.cols);
                    for (s, r) in self.segments.iter().enumerate() {
                        for i in r.clone() {
                            axpy(ga.row_mut(s), 1.0, g.row(i));
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Shift(a, dir) => {
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in &self.segments {
                        for i in r.clone() {
                            let src = match dir {
                                Shift::Prev => (i > r.start).then(|| i - 1),
                                Shift::Next => (i + 1 < r.end).then(|| i + 1),
                            };
                            if let Some(j) = src {
                                axpy(ga.row_mut(j), 1.0, g.row(i));
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Scalar `<seed, f(params)>` for a graph using every op.
    fn graph(w: &Mat, b: &Mat, x: &Mat) -> (Tape, Var, Var, Var) {
        let mut tape = Tape::new(vec![0..3, 3..4, 4..6]);
        let xv = tape.input(x.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let h = tape.matmul(xv, wv);
        let h = tape.bias(h, bv);
        let h = tape.tanh(h);
        let m = tape.seg_mean(h);
        let c = tape.broadcast(m);
        let p = tape.shift(h, Shift::Prev);
        let n = tape.shift(h, Shift::Next);
        let s = tape.add(c, p);
        let s = tape.add(s, n);
        let out = tape.matmul(s, wv);
        (tape, out, wv, bv)
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = seeded(40);
        let a = random(4, 3, &mut rng);
        let b = random(3, 5, &mut rng);
        let c = matmul(&a, &b);
        for i in 0..4 {
            for j in 0..5 {
                let direct: f64 = (0..3).map(|p| a.data[i * 3 + p] * b.data[p * 5 + j]).sum();
                assert!((c.data[i * 5 + j] - direct).abs() < 1e-14);
            }
        }
        let g = random(4, 5, &mut rng);
        let tn = matmul_tn(&a, &g);
        let nt = matmul_nt(&g, &b);
        assert_eq!((tn.rows, tn.cols, nt.rows, nt.cols), (3, 5, 4, 3));
    }

    #[test]
    fn shifts_stay_inside_segments() {
        let mut tape = Tape::new(vec![0..2, 2..3]);
        let x = tape.input(Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let p = tape.shift(x, Shift::Prev);
        let n = tape.shift(x, Shift::Next);
        assert_eq!(tape.value(p).data, vec![0.0, 1.0, 0.0]);
        assert_eq!(tape.value(n).data, vec![2.0, 0.0, 0.0]);
        let m = tape.seg_mean(x);
        assert_eq!(tape.value(m).data, vec![1.5, 3.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(41);
        let w = random(4, 4, &mut rng);
        let b = random(1, 4, &mut rng);
        let x = random(6, 4, &mut rng);
        let seed = random(6, 4, &mut rng);
        let (tape, out, wv, bv) = graph(&w, &b, &x);
        let grads = tape.backward(out, seed.clone());
        let f = |w: &Mat, b: &Mat| {
            let (t, o, _, _) = graph(w, b, &x);
            t.value(o).data.iter().zip(&seed.data).map(|(a, s)| a * s).sum::<f64>()
        };
        let h = 1e-6;
        for (var, which) in [(wv, 0), (bv, 1)] {
            let g = grads[var].as_ref().unwrap();
            for k in 0..g.data.len() {
                let (mut wp, mut bp, mut wm, mut bm) = (w.clone(), b.clone(), w.clone(), b.clone());
                if which == 0 {
                    wp.data[k] += h;
                    wm.data[k] -= h;
                } else {
                    bp.data[k] += h;
                    bm.data[k] -= h;
                }
                let fd = (f(&wp, &bp) - f(&wm, &bm)) / (2.0 * h);
                assert!((fd - g.data[k]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g.data[k]);
            }
        }
    }
}

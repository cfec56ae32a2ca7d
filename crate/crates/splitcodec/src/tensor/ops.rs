use ndarray::{s, ArrayD, Axis, IxDyn};

use super::tape::{accumulate, as2, rows_cols, Node, Op, Tape, Var};
use crate::scalar::Scalar;

fn sqrt2<F: Scalar>() -> F {
    F::from_f64_c(std::f64::consts::SQRT_2)
}

fn inv_sqrt_2pi<F: Scalar>() -> F {
    F::from_f64_c(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

pub(crate) fn round_half_even<F: Scalar>(x: F) -> F {
    let fl = x.floor();
    let diff = x - fl;
    let half = F::from_f64_c(0.5);
    if diff > half {
        fl + F::one()
    } else if diff < half {
        fl
    } else {
        // tie: pick the even neighbour
        let two = F::from_f64_c(2.0);
        if (fl / two).floor() * two == fl {
            fl
        } else {
            fl + F::one()
        }
    }
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn stable_softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<F: Scalar> Tape<F> {
    fn binary_same_shape(&self, a: Var, b: Var, op_name: &str) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[a.0].value.shape(),
            nodes[b.0].value.shape(),
            "{op_name}: operand shapes differ"
        );
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let v = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value / &nodes[b.0].value
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Div(a, b), ng)
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        let ng = self.needs_grad(a);
        self.push(v, Op::AddScalar(a, c), ng)
    }

    pub fn mul_scalar(&self, a: Var, c: F) -> Var {
        let v = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        let ng = self.needs_grad(a);
        self.push(v, Op::MulScalar(a, c), ng)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -F::one())
    }

    /// `[N,K] x [K,M] -> [N,M]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let av = as2(&nodes[a.0].value);
            let bv = as2(&nodes[b.0].value);
            assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dimensions differ");
            av.dot(&bv).into_dyn()
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// Row lookup: `table[V,D]` gathered at `indices` -> `[len,D]`.
    pub fn gather(&self, table: Var, indices: &[usize]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let t = as2(&nodes[table.0].value);
            let mut out = ArrayD::zeros(IxDyn(&[indices.len(), t.ncols()]));
            for (r, &ix) in indices.iter().enumerate() {
                out.slice_mut(s![r, ..]).assign(&t.row(ix));
            }
            out
        };
        let ng = self.needs_grad(table);
        self.push(v, Op::Gather { table, indices: indices.to_vec() }, ng)
    }

    /// Row-wise layer normalization with learned gain, no bias.
    pub fn layer_norm(&self, x: Var, gain: Var, eps: F) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let gv = as2(&nodes[gain.0].value);
            assert_eq!(gv.nrows(), 1);
            assert_eq!(gv.ncols(), xv.ncols(), "layer_norm: gain width");
            let d = F::from_usize(xv.ncols()).unwrap();
            let mut out = ArrayD::zeros(IxDyn(&[xv.nrows(), xv.ncols()]));
            for (i, row) in xv.rows().into_iter().enumerate() {
                let mean = row.iter().fold(F::zero(), |a, &b| a + b) / d;
                let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / d;
                let r = F::one() / (var + eps).sqrt();
                for (j, &xij) in row.iter().enumerate() {
                    out[[i, j]] = (xij - mean) * r * gv[[0, j]];
                }
            }
            out
        };
        let ng = self.needs_grad(x) || self.needs_grad(gain);
        self.push(v, Op::LayerNorm { x, gain, eps }, ng)
    }

    pub fn gelu(&self, x: Var) -> Var {
        let half = F::from_f64_c(0.5);
        let v = self.nodes.borrow()[x.0]
            .value
            .mapv(|t| half * t * (F::one() + (t / sqrt2()).erf()));
        let ng = self.needs_grad(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.tanh());
        let ng = self.needs_grad(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(stable_sigmoid);
        let ng = self.needs_grad(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(stable_softplus);
        let ng = self.needs_grad(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn exp(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.exp());
        let ng = self.needs_grad(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn ln(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.ln());
        let ng = self.needs_grad(x);
        self.push(v, Op::Ln(x), ng)
    }

    pub fn erf(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.erf());
        let ng = self.needs_grad(x);
        self.push(v, Op::Erf(x), ng)
    }

    pub fn sin(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.sin());
        let ng = self.needs_grad(x);
        self.push(v, Op::Sin(x), ng)
    }

    pub fn cos(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.cos());
        let ng = self.needs_grad(x);
        self.push(v, Op::Cos(x), ng)
    }

    pub fn clamp_min(&self, x: Var, c: F) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(|t| t.max(c));
        let ng = self.needs_grad(x);
        self.push(v, Op::ClampMin(x, c), ng)
    }

    /// Integer rounding (ties to even) with a pass-through gradient.
    pub fn round_ste(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.mapv(round_half_even);
        let ng = self.needs_grad(x);
        self.push(v, Op::RoundSte(x), ng)
    }

    /// `x[N,D] + r[1,D]`, row broadcast.
    pub fn add_row(&self, x: Var, r: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let rv = as2(&nodes[r.0].value);
            assert_eq!(rv.nrows(), 1);
            assert_eq!(rv.ncols(), xv.ncols(), "add_row: widths differ");
            (&xv + &rv.row(0)).into_dyn()
        };
        let ng = self.needs_grad(x) || self.needs_grad(r);
        self.push(v, Op::AddRow(x, r), ng)
    }

    /// `x[N,D] * r[1,D]`, row broadcast.
    pub fn mul_row(&self, x: Var, r: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let rv = as2(&nodes[r.0].value);
            assert_eq!(rv.nrows(), 1);
            assert_eq!(rv.ncols(), xv.ncols(), "mul_row: widths differ");
            (&xv * &rv.row(0)).into_dyn()
        };
        let ng = self.needs_grad(x) || self.needs_grad(r);
        self.push(v, Op::MulRow(x, r), ng)
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            assert!(end <= xv.ncols() && start < end, "slice_cols: bad range");
            xv.slice(s![.., start..end]).to_owned().into_dyn()
        };
        let ng = self.needs_grad(x);
        self.push(v, Op::SliceCols { x, start, end }, ng)
    }

    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = xs.iter().map(|v| as2(&nodes[v.0].value)).collect();
            let rows = views[0].nrows();
            for w in &views {
                assert_eq!(w.nrows(), rows, "concat_cols: row counts differ");
            }
            ndarray::concatenate(Axis(1), &views).unwrap().into_dyn()
        };
        let ng = xs.iter().any(|&v| self.needs_grad(v));
        self.push(v, Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Delays `x` by one row; row 0 comes from the `[1,D]` start vector.
    pub fn shift_rows_down(&self, x: Var, first: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let fv = as2(&nodes[first.0].value);
            assert_eq!(fv.nrows(), 1);
            assert_eq!(fv.ncols(), xv.ncols(), "shift_rows_down: widths differ");
            let mut out = ArrayD::zeros(IxDyn(&[xv.nrows(), xv.ncols()]));
            out.slice_mut(s![0, ..]).assign(&fv.row(0));
            if xv.nrows() > 1 {
                out.slice_mut(s![1.., ..]).assign(&xv.slice(s![..xv.nrows() - 1, ..]));
            }
            out
        };
        let ng = self.needs_grad(x) || self.needs_grad(first);
        self.push(v, Op::ShiftRowsDown { x, first }, ng)
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let total = self.nodes.borrow()[x.0].value.iter().fold(F::zero(), |a, &b| a + b);
        let ng = self.needs_grad(x);
        self.push(ArrayD::from_shape_vec(IxDyn(&[1]), vec![total]).unwrap(), Op::SumAll(x), ng)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let (total, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            (v.iter().fold(F::zero(), |a, &b| a + b), v.len())
        };
        let mean = total / F::from_usize(n).unwrap();
        let ng = self.needs_grad(x);
        self.push(ArrayD::from_shape_vec(IxDyn(&[1]), vec![mean]).unwrap(), Op::MeanAll(x), ng)
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// Row `i` of the output is computed from rows `0..=i` only; masked
    /// positions are never touched, so running on a prefix of the rows gives
    /// bit-identical results to running on the full sequence.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            let qv = as2(&nodes[q.0].value);
            let kv = as2(&nodes[k.0].value);
            let vv = as2(&nodes[v.0].value);
            let (t, d) = (qv.nrows(), qv.ncols());
            assert_eq!(kv.dim(), (t, d), "causal_attention: k shape");
            assert_eq!(vv.dim(), (t, d), "causal_attention: v shape");
            assert_eq!(d % heads, 0, "causal_attention: head count must divide width");
            let dh = d / heads;
            let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

            let mut out = ArrayD::zeros(IxDyn(&[t, d]));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let off = h * dh;
                let mut p = ArrayD::zeros(IxDyn(&[t, t]));
                for i in 0..t {
                    // scores over the causal prefix only
                    let mut mx = F::neg_infinity();
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let mut dot = F::zero();
                        for c in 0..dh {
                            dot = dot + qv[[i, off + c]] * kv[[j, off + c]];
                        }
                        let sc = dot * scale;
                        if sc > mx {
                            mx = sc;
                        }
                        scores.push(sc);
                    }
                    let mut denom = F::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).exp();
                        denom = denom + *sc;
                    }
                    for (j, sc) in scores.iter().enumerate() {
                        let pj = *sc / denom;
                        p[[i, j]] = pj;
                        for c in 0..dh {
                            out[[i, off + c]] = out[[i, off + c]] + pj * vv[[j, off + c]];
                        }
                    }
                }
                probs.push(p);
            }
            (out, probs)
        };
        let ng = self.needs_grad(q) || self.needs_grad(k) || self.needs_grad(v);
        self.push(out, Op::CausalAttention { q, k, v, heads, probs }, ng)
    }

    /// Mean next-token cross-entropy in nats over all rows.
    pub fn cross_entropy_mean(&self, logits: Var, targets: &[usize]) -> Var {
        let loss = {
            let nodes = self.nodes.borrow();
            let lv = as2(&nodes[logits.0].value);
            assert_eq!(lv.nrows(), targets.len(), "cross_entropy: row/target counts differ");
            let mut total = F::zero();
            for (i, row) in lv.rows().into_iter().enumerate() {
                let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut denom = F::zero();
                for &l in row.iter() {
                    denom = denom + (l - mx).exp();
                }
                let lse = mx + denom.ln();
                total = total + (lse - row[targets[i]]);
            }
            total / F::from_usize(targets.len()).unwrap()
        };
        let ng = self.needs_grad(logits);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap(),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            ng,
        )
    }

    pub(crate) fn backprop_node(
        &self,
        nodes: &[Node<F>],
        i: usize,
        g: &ArrayD<F>,
        grads: &mut Vec<Option<ArrayD<F>>>,
    ) {
        let needs = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g * &nodes[b.0].value);
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g * &nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g / &nodes[b.0].value);
                }
                if needs(*b) {
                    let d = g * &nodes[i].value / &nodes[b.0].value;
                    accumulate(&mut grads[b.0], d.mapv(|x| -x));
                }
            }
            Op::AddScalar(a, _) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.mapv(|x| x * *c));
                }
            }
            Op::MatMul(a, b) => {
                let av = as2(&nodes[a.0].value);
                let bv = as2(&nodes[b.0].value);
                let gv = as2(g);
                if needs(*a) {
                    accumulate(&mut grads[a.0], gv.dot(&bv.t()).into_dyn());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], av.t().dot(&gv).into_dyn());
                }
            }
            Op::Gather { table, indices } => {
                if needs(*table) {
                    let gv = as2(g);
                    let mut dt = ArrayD::zeros(nodes[table.0].value.raw_dim());
                    {
                        let mut dt2 = dt.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        for (r, &ix) in indices.iter().enumerate() {
                            let mut row = dt2.row_mut(ix);
                            row += &gv.row(r);
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            Op::LayerNorm { x, gain, eps } => {
                let xv = as2(&nodes[x.0].value);
                let gv = as2(&nodes[gain.0].value);
                let dy = as2(g);
                let (n, d) = (xv.nrows(), xv.ncols());
                let df = F::from_usize(d).unwrap();
                let mut dx = ArrayD::zeros(IxDyn(&[n, d]));
                let mut dgain = ArrayD::zeros(IxDyn(&[1, d]));
                for r in 0..n {
                    let row = xv.row(r);
                    let mean = row.iter().fold(F::zero(), |a, &b| a + b) / df;
                    let var = row.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / df;
                    let rstd = F::one() / (var + *eps).sqrt();
                    let mut m_dxh = F::zero();
                    let mut m_dxh_xh = F::zero();
                    for c in 0..d {
                        let xh = (row[c] - mean) * rstd;
                        let dxh = dy[[r, c]] * gv[[0, c]];
                        dgain[[0, c]] = dgain[[0, c]] + dy[[r, c]] * xh;
                        m_dxh = m_dxh + dxh;
                        m_dxh_xh = m_dxh_xh + dxh * xh;
                    }
                    m_dxh = m_dxh / df;
                    m_dxh_xh = m_dxh_xh / df;
                    for c in 0..d {
                        let xh = (row[c] - mean) * rstd;
                        let dxh = dy[[r, c]] * gv[[0, c]];
                        dx[[r, c]] = rstd * (dxh - m_dxh - xh * m_dxh_xh);
                    }
                }
                if needs(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if needs(*gain) {
                    accumulate(&mut grads[gain.0], dgain);
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let half = F::from_f64_c(0.5);
                    let d = nodes[a.0].value.mapv(|t| {
                        let cdf = half * (F::one() + (t / sqrt2()).erf());
                        let pdf = inv_sqrt_2pi::<F>() * (-t * t * half).exp();
                        cdf + t * pdf
                    });
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let d = nodes[i].value.mapv(|y| F::one() - y * y);
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let d = nodes[i].value.mapv(|y| y * (F::one() - y));
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Softplus(a) => {
                if needs(*a) {
                    let d = nodes[a.0].value.mapv(stable_sigmoid);
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g * &nodes[i].value);
                }
            }
            Op::Ln(a) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], g / &nodes[a.0].value);
                }
            }
            Op::Erf(a) => {
                if needs(*a) {
                    let c = F::from_f64_c(2.0 / std::f64::consts::PI.sqrt());
                    let d = nodes[a.0].value.mapv(|t| c * (-t * t).exp());
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Sin(a) => {
                if needs(*a) {
                    let d = nodes[a.0].value.mapv(|t| t.cos());
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::Cos(a) => {
                if needs(*a) {
                    let d = nodes[a.0].value.mapv(|t| -t.sin());
                    accumulate(&mut grads[a.0], g * &d);
                }
            }
            Op::ClampMin(a, c) => {
                if needs(*a) {
                    let mask = nodes[a.0].value.mapv(|t| if t >= *c { F::one() } else { F::zero() });
                    accumulate(&mut grads[a.0], g * &mask);
                }
            }
            Op::RoundSte(a) => {
                // pass-through: gradient copied unchanged
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
            }
            Op::AddRow(x, r) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if needs(*r) {
                    accumulate(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulRow(x, r) => {
                let xv = as2(&nodes[x.0].value);
                let rv = as2(&nodes[r.0].value);
                let gv = as2(g);
                if needs(*x) {
                    accumulate(&mut grads[x.0], (&gv * &rv.row(0)).into_dyn());
                }
                if needs(*r) {
                    let dr = (&gv * &xv).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[r.0], dr.into_dyn());
                }
            }
            Op::SliceCols { x, start, end } => {
                if needs(*x) {
                    let mut dx = ArrayD::zeros(nodes[x.0].value.raw_dim());
                    dx.slice_mut(s![.., *start..*end]).assign(&as2(g));
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::ConcatCols(xs) => {
                let gv = as2(g);
                let mut off = 0;
                for v in xs {
                    let w = rows_cols(&nodes[v.0].value).1;
                    if needs(*v) {
                        let part = gv.slice(s![.., off..off + w]).to_owned().into_dyn();
                        accumulate(&mut grads[v.0], part);
                    }
                    off += w;
                }
            }
            Op::ShiftRowsDown { x, first } => {
                let gv = as2(g);
                let t = gv.nrows();
                if needs(*first) {
                    let df = gv.slice(s![0..1, ..]).to_owned().into_dyn();
                    accumulate(&mut grads[first.0], df);
                }
                if needs(*x) {
                    let mut dx = ArrayD::zeros(nodes[x.0].value.raw_dim());
                    if t > 1 {
                        dx.slice_mut(s![..t - 1, ..]).assign(&gv.slice(s![1.., ..]));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let gs = g.iter().next().copied().unwrap();
                    accumulate(&mut grads[a.0], ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs));
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let gs = g.iter().next().copied().unwrap()
                        / F::from_usize(nodes[a.0].value.len()).unwrap();
                    accumulate(&mut grads[a.0], ArrayD::from_elem(nodes[a.0].value.raw_dim(), gs));
                }
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let qv = as2(&nodes[q.0].value);
                let kv = as2(&nodes[k.0].value);
                let vv = as2(&nodes[v.0].value);
                let gv = as2(g);
                let (t, d) = (qv.nrows(), qv.ncols());
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let mut dq = ArrayD::zeros(IxDyn(&[t, d]));
                let mut dk = ArrayD::zeros(IxDyn(&[t, d]));
                let mut dv = ArrayD::zeros(IxDyn(&[t, d]));
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h];
                    for i_row in 0..t {
                        // dp and the softmax pullback over the causal prefix
                        let mut dots = Vec::with_capacity(i_row + 1);
                        let mut inner = F::zero();
                        for j in 0..=i_row {
                            let mut dp = F::zero();
                            for c in 0..dh {
                                dp = dp + gv[[i_row, off + c]] * vv[[j, off + c]];
                            }
                            inner = inner + p[[i_row, j]] * dp;
                            dots.push(dp);
                        }
                        for j in 0..=i_row {
                            let pij = p[[i_row, j]];
                            let ds = pij * (dots[j] - inner) * scale;
                            for c in 0..dh {
                                dq[[i_row, off + c]] = dq[[i_row, off + c]] + ds * kv[[j, off + c]];
                                dk[[j, off + c]] = dk[[j, off + c]] + ds * qv[[i_row, off + c]];
                                dv[[j, off + c]] =
                                    dv[[j, off + c]] + pij * gv[[i_row, off + c]];
                            }
                        }
                    }
                }
                if needs(*q) {
                    accumulate(&mut grads[q.0], dq);
                }
                if needs(*k) {
                    accumulate(&mut grads[k.0], dk);
                }
                if needs(*v) {
                    accumulate(&mut grads[v.0], dv);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if needs(*logits) {
                    let lv = as2(&nodes[logits.0].value);
                    let gs = g.iter().next().copied().unwrap()
                        / F::from_usize(targets.len()).unwrap();
                    let mut dl = ArrayD::zeros(nodes[logits.0].value.raw_dim());
                    {
                        let mut dl2 = dl.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        for (r, row) in lv.rows().into_iter().enumerate() {
                            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                            let mut denom = F::zero();
                            for &l in row.iter() {
                                denom = denom + (l - mx).exp();
                            }
                            for c in 0..row.len() {
                                let p = (row[c] - mx).exp() / denom;
                                let y = if c == targets[r] { F::one() } else { F::zero() };
                                dl2[[r, c]] = (p - y) * gs;
                            }
                        }
                    }
                    accumulate(&mut grads[logits.0], dl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn dynm(a: ndarray::Array2<f32>) -> ArrayD<f32> {
        a.into_dyn()
    }

    #[test]
    fn matmul_values_and_grads() {
        let t: Tape<f32> = Tape::new();
        let a = t.param(dynm(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = t.param(dynm(arr2(&[[5.0], [6.0]])));
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).as_slice().unwrap(), &[17.0, 39.0]);
        let s = t.sum_all(c);
        let g = t.backward(s);
        let ga: Vec<f32> = g.get(a).unwrap().iter().copied().collect();
        let gb: Vec<f32> = g.get(b).unwrap().iter().copied().collect();
        assert_eq!(ga, vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(gb, vec![4.0, 6.0]);
    }

    #[test]
    fn round_half_even_ties() {
        assert_eq!(round_half_even(0.4f32), 0.0);
        assert_eq!(round_half_even(-1.5f32), -2.0);
        assert_eq!(round_half_even(2.5f32), 2.0);
        assert_eq!(round_half_even(3.5f32), 4.0);
        assert_eq!(round_half_even(-0.5f32), 0.0);
    }

    #[test]
    fn ste_gradient_is_identity_bitwise() {
        let t: Tape<f32> = Tape::new();
        let x = t.param(dynm(arr2(&[[0.3, -1.7, 2.5, 0.5]])));
        let y = t.round_ste(x);
        assert_eq!(t.value(y).as_slice().unwrap(), &[0.0, -2.0, 2.0, 0.0]);
        let w = t.leaf(dynm(arr2(&[[0.123, -4.5, 6.7, 1e-3]])));
        let prod = t.mul(y, w);
        let s = t.sum_all(prod);
        let g = t.backward(s);
        // upstream grad of `y` equals `w`; STE must copy it to `x` bit-for-bit
        let gx = g.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[0.123, -4.5, 6.7, 1e-3]);
    }

    #[test]
    fn attention_single_token_is_value_passthrough() {
        let t: Tape<f32> = Tape::new();
        let q = t.leaf(dynm(arr2(&[[0.4, -0.2]])));
        let k = t.leaf(dynm(arr2(&[[1.0, 2.0]])));
        let v = t.leaf(dynm(arr2(&[[7.0, -3.0]])));
        let o = t.causal_attention(q, k, v, 1);
        assert_eq!(t.value(o).as_slice().unwrap(), &[7.0, -3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let t: Tape<f32> = Tape::new();
        let logits = t.param(dynm(arr2(&[[0.0, 0.0, 0.0, 0.0]])));
        let ce = t.cross_entropy_mean(logits, &[2]);
        let expected = (4.0f32).ln();
        assert!((t.scalar(ce) - expected).abs() < 1e-6);
    }
}

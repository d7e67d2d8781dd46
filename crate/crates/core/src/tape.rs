//! Minimal reverse-mode autodiff over row-major 2-D arrays.
//!
//! Every value on a [`Tape`] is an `Array2`; a batch of vectors is a
//! `batch x dim` matrix and scalars are `1 x 1`. Ops that show up in the
//! world model's inner loop (GRU cell, unimix softmax, categorical KL,
//! InfoNCE) are fused into single nodes with hand-written backward passes.
//! Nodes whose inputs are all constants are marked as not needing gradients
//! and are skipped during the backward sweep.

use std::cell::{Ref, RefCell};
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{s, Array2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;

/// Floating point element type the tape works over (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: NdFloat + FromPrimitive + Sum + Default + Debug + Display {}
impl<T: NdFloat + FromPrimitive + Sum + Default + Debug + Display> Real for T {}

#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("literal fits element type")
}

enum Op<F> {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Elu(usize),
    Exp(usize),
    Clamp {
        a: usize,
        lo: F,
        hi: F,
    },
    Concat(Vec<usize>),
    Slice {
        a: usize,
        start: usize,
    },
    Gru {
        x: usize,
        h: usize,
        wx: usize,
        wh: usize,
        bx: usize,
        bh: usize,
        r: Array2<F>,
        z: Array2<F>,
        n: Array2<F>,
        gh_n: Array2<F>,
    },
    UnimixSoftmax {
        logits: usize,
        classes: usize,
        mix: F,
        soft: Array2<F>,
    },
    StraightThrough(usize),
    CategoricalKl {
        p: usize,
        q: usize,
    },
    SqErrRows {
        pred: usize,
        target: Array2<F>,
    },
    RowSum(usize),
    Sum(usize),
    Mean(usize),
    InfoNce {
        anchors: usize,
        positives: Array2<F>,
        tau: F,
        softmax: Array2<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn val(&self, id: usize) -> Ref<'_, Array2<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, F> {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Fused `x @ w + b` with `b` broadcast over rows.
    pub fn linear<'t>(&'t self, x: Var<'t, F>, w: Var<'t, F>, b: Var<'t, F>) -> Var<'t, F> {
        let value = {
            let (xv, wv, bv) = (self.val(x.id), self.val(w.id), self.val(b.id));
            let mut out = xv.dot(&*wv);
            out += &*bv;
            out
        };
        let ng = self.needs(&[x.id, w.id, b.id]);
        self.push(
            value,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.id,
            },
            ng,
        )
    }

    /// Fused GRU cell: returns the next hidden state.
    ///
    /// Gate layout along the `3H` axis is `[reset, update, candidate]`; the
    /// reset gate multiplies the recurrent candidate pre-activation.
    #[allow(clippy::too_many_arguments)]
    pub fn gru<'t>(
        &'t self,
        x: Var<'t, F>,
        h: Var<'t, F>,
        wx: Var<'t, F>,
        wh: Var<'t, F>,
        bx: Var<'t, F>,
        bh: Var<'t, F>,
    ) -> Var<'t, F> {
        let (value, r, z, n, gh_n) = {
            let hv = self.val(h.id);
            let hd = hv.ncols();
            let mut gx = self.val(x.id).dot(&*self.val(wx.id));
            gx += &*self.val(bx.id);
            let mut gh = hv.dot(&*self.val(wh.id));
            gh += &*self.val(bh.id);
            let one = F::one();
            let mut r = &gx.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd]);
            r.mapv_inplace(|v| one / (one + (-v).exp()));
            let mut z = &gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd]);
            z.mapv_inplace(|v| one / (one + (-v).exp()));
            let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
            let mut n = &gx.slice(s![.., 2 * hd..]) + &(&r * &gh_n);
            n.mapv_inplace(|v| v.tanh());
            let mut out = Array2::zeros(n.raw_dim());
            Zip::from(&mut out)
                .and(&z)
                .and(&n)
                .and(&*hv)
                .for_each(|o, &z, &n, &h| *o = (one - z) * n + z * h);
            (out, r, z, n, gh_n)
        };
        let ng = self.needs(&[x.id, h.id, wx.id, wh.id, bx.id, bh.id]);
        self.push(
            value,
            Op::Gru {
                x: x.id,
                h: h.id,
                wx: wx.id,
                wh: wh.id,
                bx: bx.id,
                bh: bh.id,
                r,
                z,
                n,
                gh_n,
            },
            ng,
        )
    }

    /// Column-wise concatenation.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>]) -> Var<'t, F> {
        let value = {
            let views: Vec<Ref<'_, Array2<F>>> = parts.iter().map(|p| self.val(p.id)).collect();
            let v: Vec<_> = views.iter().map(|r| r.view()).collect();
            ndarray::concatenate(Axis(1), &v).expect("concat: row counts differ")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.needs(&ids);
        self.push(value, Op::Concat(ids), ng)
    }

    /// Reverse-mode sweep from a `1 x 1` scalar.
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc<F: Real>(grads: &mut [Option<Array2<F>>], id: usize, delta: Array2<F>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node<F: Real>(
    nodes: &[Node<F>],
    id: usize,
    g: &Array2<F>,
    grads: &mut [Option<Array2<F>>],
) {
    let needs = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| &nodes[i].value;
    let one = F::one();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            if needs(*x) {
                acc(grads, *x, g.dot(&val(*w).t()));
            }
            if needs(*w) {
                acc(grads, *w, val(*x).t().dot(g));
            }
            if needs(*b) {
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                acc(grads, *a, g.clone());
            }
            if needs(*b) {
                acc(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                acc(grads, *a, g.clone());
            }
            if needs(*b) {
                acc(grads, *b, g.mapv(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                acc(grads, *a, g * val(*b));
            }
            if needs(*b) {
                acc(grads, *b, g * val(*a));
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                acc(grads, *a, g * *c);
            }
        }
        Op::Elu(a) => {
            if needs(*a) {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .and(&nodes[id].value)
                    .for_each(|d, &x, &y| {
                        if x <= F::zero() {
                            *d *= y + one
                        }
                    });
                acc(grads, *a, d);
            }
        }
        Op::Exp(a) => {
            if needs(*a) {
                acc(grads, *a, g * &nodes[id].value);
            }
        }
        Op::Clamp { a, lo, hi } => {
            if needs(*a) {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = F::zero()
                    }
                });
                acc(grads, *a, d);
            }
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).ncols();
                if needs(p) {
                    acc(grads, p, g.slice(s![.., start..start + w]).to_owned());
                }
                start += w;
            }
        }
        Op::Slice { a, start } => {
            if needs(*a) {
                let mut d = Array2::zeros(val(*a).raw_dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(grads, *a, d);
            }
        }
        Op::Gru {
            x,
            h,
            wx,
            wh,
            bx,
            bh,
            r,
            z,
            n,
            gh_n,
        } => {
            let hv = val(*h);
            let hd = hv.ncols();
            let rows = hv.nrows();
            let mut dgx = Array2::<F>::zeros((rows, 3 * hd));
            let mut dgh = Array2::<F>::zeros((rows, 3 * hd));
            for i in 0..rows {
                for j in 0..hd {
                    let gij = g[[i, j]];
                    let (rv, zv, nv, ghn) = (r[[i, j]], z[[i, j]], n[[i, j]], gh_n[[i, j]]);
                    let dn = gij * (one - zv);
                    let dz = gij * (hv[[i, j]] - nv);
                    let dn_pre = dn * (one - nv * nv);
                    let dr_pre = dn_pre * ghn * rv * (one - rv);
                    let dz_pre = dz * zv * (one - zv);
                    dgx[[i, j]] = dr_pre;
                    dgx[[i, hd + j]] = dz_pre;
                    dgx[[i, 2 * hd + j]] = dn_pre;
                    dgh[[i, j]] = dr_pre;
                    dgh[[i, hd + j]] = dz_pre;
                    dgh[[i, 2 * hd + j]] = dn_pre * rv;
                }
            }
            if needs(*x) {
                acc(grads, *x, dgx.dot(&val(*wx).t()));
            }
            if needs(*wx) {
                acc(grads, *wx, val(*x).t().dot(&dgx));
            }
            if needs(*bx) {
                acc(grads, *bx, dgx.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            if needs(*h) {
                let mut dh = dgh.dot(&val(*wh).t());
                dh += &(g * z);
                acc(grads, *h, dh);
            }
            if needs(*wh) {
                acc(grads, *wh, hv.t().dot(&dgh));
            }
            if needs(*bh) {
                acc(grads, *bh, dgh.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::UnimixSoftmax {
            logits,
            classes,
            mix,
            soft,
        } => {
            if needs(*logits) {
                let c = *classes;
                let mut d = Array2::<F>::zeros(soft.raw_dim());
                let scale = one - *mix;
                for i in 0..soft.nrows() {
                    for grp in 0..soft.ncols() / c {
                        let base = grp * c;
                        let mut dot = F::zero();
                        for k in 0..c {
                            dot += soft[[i, base + k]] * g[[i, base + k]];
                        }
                        for k in 0..c {
                            d[[i, base + k]] = scale * soft[[i, base + k]] * (g[[i, base + k]] - dot);
                        }
                    }
                }
                acc(grads, *logits, d);
            }
        }
        Op::StraightThrough(p) => {
            if needs(*p) {
                acc(grads, *p, g.clone());
            }
        }
        Op::CategoricalKl { p, q } => {
            let (pv, qv) = (val(*p), val(*q));
            if needs(*p) {
                let mut d = Array2::<F>::zeros(pv.raw_dim());
                Zip::indexed(&mut d)
                    .and(pv)
                    .and(qv)
                    .for_each(|(i, _), d, &p, &q| *d = g[[i, 0]] * (p.ln() - q.ln() + one));
                acc(grads, *p, d);
            }
            if needs(*q) {
                let mut d = Array2::<F>::zeros(qv.raw_dim());
                Zip::indexed(&mut d)
                    .and(pv)
                    .and(qv)
                    .for_each(|(i, _), d, &p, &q| *d = -g[[i, 0]] * p / q);
                acc(grads, *q, d);
            }
        }
        Op::SqErrRows { pred, target } => {
            if needs(*pred) {
                let two = lit::<F>(2.0);
                let mut d = val(*pred) - target;
                Zip::indexed(&mut d).for_each(|(i, _), d| *d = *d * two * g[[i, 0]]);
                acc(grads, *pred, d);
            }
        }
        Op::RowSum(a) => {
            if needs(*a) {
                let cols = val(*a).ncols();
                let d = Array2::from_shape_fn((g.nrows(), cols), |(i, _)| g[[i, 0]]);
                acc(grads, *a, d);
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                acc(grads, *a, Array2::from_elem(val(*a).raw_dim(), g[[0, 0]]));
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = F::from_usize(val(*a).len()).unwrap();
                acc(grads, *a, Array2::from_elem(val(*a).raw_dim(), g[[0, 0]] / n));
            }
        }
        Op::InfoNce {
            anchors,
            positives,
            tau,
            softmax,
        } => {
            if needs(*anchors) {
                let n = F::from_usize(softmax.nrows()).unwrap();
                let mut ds = softmax.clone();
                for i in 0..ds.nrows() {
                    ds[[i, i]] -= one;
                }
                ds *= g[[0, 0]] / n;
                // Row sums of ds vanish, so d/da_i = (2/tau) * sum_j ds_ij p_j.
                let mut da = ds.dot(positives);
                da *= lit::<F>(2.0) / *tau;
                acc(grads, *anchors, da);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Array2<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Array2<F> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array2::zeros(var.value().raw_dim()),
        }
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<F>> {
        self.tape.val(self.id)
    }

    pub fn to_array(&self) -> Array2<F> {
        self.value().clone()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self) -> F {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, F> {
        let v = self.to_array();
        self.tape.constant(v)
    }

    fn unary(self, value: Array2<F>, op: Op<F>) -> Var<'t, F> {
        let ng = self.needs_grad();
        self.tape.push(value, op, ng)
    }

    fn binary(self, other: Var<'t, F>, value: Array2<F>, op: Op<F>) -> Var<'t, F> {
        let ng = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, ng)
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: F) -> Var<'t, F> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn elu(self) -> Var<'t, F> {
        let one = F::one();
        let v = self
            .value()
            .mapv(|x| if x > F::zero() { x } else { x.exp() - one });
        self.unary(v, Op::Elu(self.id))
    }

    pub fn exp(self) -> Var<'t, F> {
        let v = self.value().mapv(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn clamp(self, lo: F, hi: F) -> Var<'t, F> {
        let v = self.value().mapv(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp { a: self.id, lo, hi })
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t, F> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.unary(v, Op::Slice { a: self.id, start })
    }

    /// Per-group softmax over `classes` consecutive columns, mixed with a
    /// uniform distribution: `(1 - mix) * softmax + mix / classes`.
    pub fn unimix_softmax(self, classes: usize, mix: F) -> Var<'t, F> {
        let (soft, probs) = {
            let logits = self.value();
            assert_eq!(logits.ncols() % classes, 0, "logit width not a multiple of classes");
            let mut soft = logits.clone();
            for mut row in soft.rows_mut() {
                for mut grp in row.exact_chunks_mut(classes) {
                    let max = grp.fold(F::neg_infinity(), |m, &v| m.max(v));
                    grp.mapv_inplace(|v| (v - max).exp());
                    let sum = grp.sum();
                    grp.mapv_inplace(|v| v / sum);
                }
            }
            let floor = mix / F::from_usize(classes).unwrap();
            let probs = soft.mapv(|p| (F::one() - mix) * p + floor);
            (soft, probs)
        };
        self.unary(
            probs,
            Op::UnimixSoftmax {
                logits: self.id,
                classes,
                mix,
                soft,
            },
        )
    }

    /// Forward value is `sample`; the backward pass treats it as `self`.
    pub fn straight_through(self, sample: Array2<F>) -> Var<'t, F> {
        assert_eq!(sample.dim(), self.dim());
        self.unary(sample, Op::StraightThrough(self.id))
    }

    /// Row-wise `sum_k p_k (ln p_k - ln q_k)` over all columns; `batch x 1`.
    /// Summing over every column sums the KL of each independent categorical.
    pub fn categorical_kl(self, q: Var<'t, F>) -> Var<'t, F> {
        let v = {
            let (pv, qv) = (self.value(), q.value());
            let mut out = Array2::<F>::zeros((pv.nrows(), 1));
            Zip::indexed(&*pv).and(&*qv).for_each(|(i, _), &p, &q| {
                out[[i, 0]] += p * (p.ln() - q.ln());
            });
            out
        };
        self.binary(q, v, Op::CategoricalKl { p: self.id, q: q.id })
    }

    /// Row-wise squared error against a constant target; `batch x 1`.
    pub fn sq_err_rows(self, target: &Array2<F>) -> Var<'t, F> {
        let v = {
            let pv = self.value();
            assert_eq!(pv.dim(), target.dim());
            let d = &*pv - target;
            (&d * &d).sum_axis(Axis(1)).insert_axis(Axis(1))
        };
        self.unary(
            v,
            Op::SqErrRows {
                pred: self.id,
                target: target.clone(),
            },
        )
    }

    pub fn row_sum(self) -> Var<'t, F> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::RowSum(self.id))
    }

    pub fn sum(self) -> Var<'t, F> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, F> {
        let v = {
            let a = self.value();
            Array2::from_elem((1, 1), a.sum() / F::from_usize(a.len()).unwrap())
        };
        self.unary(v, Op::Mean(self.id))
    }

    /// Batch InfoNCE with `self` as anchors and constant `positives`, using
    /// similarity `-|a - p|^2 / tau` and the other rows as negatives:
    ///
    /// `mean_i [ -sim(a_i, p_i) + ln( (1/N) sum_j exp sim(a_i, p_j) ) ]`
    pub fn infonce(self, positives: &Array2<F>, tau: F) -> Var<'t, F> {
        let (loss, softmax) = {
            let a = self.value();
            let n = a.nrows();
            assert!(n >= 2, "InfoNCE needs at least two rows");
            assert_eq!(a.dim(), positives.dim());
            let mut sim = Array2::<F>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut d2 = F::zero();
                    for k in 0..a.ncols() {
                        let d = a[[i, k]] - positives[[j, k]];
                        d2 += d * d;
                    }
                    sim[[i, j]] = -d2 / tau;
                }
            }
            let ln_n = F::from_usize(n).unwrap().ln();
            let mut total = F::zero();
            let mut softmax = sim.clone();
            for (i, mut row) in softmax.rows_mut().into_iter().enumerate() {
                let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let z = row.sum();
                row.mapv_inplace(|v| v / z);
                let lse = max + z.ln();
                total += -sim[[i, i]] + lse - ln_n;
            }
            (total / F::from_usize(n).unwrap(), softmax)
        };
        self.unary(
            Array2::from_elem((1, 1), loss),
            Op::InfoNce {
                anchors: self.id,
                positives: positives.clone(),
                tau,
                softmax,
            },
        )
    }
}

//! Reverse-mode automatic differentiation over dynamic-rank `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! a closure that maps the output gradient to input gradients. Graphs are
//! built fresh for every mini-batch and dropped after `backward`.
//!
//! Binary element-wise operations broadcast their *second* operand to the shape
//! of the first; the output always has the first operand's shape.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn to_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("operand must be two-dimensional")
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => *acc += &t,
        None => *slot = Some(t),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a zero-dimensional (or single-element) node.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "item() on a tensor with {} elements", t.len());
        *t.iter().next().unwrap()
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Backward) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.backward {
                Some(bw) => {
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect();
                    let parent_grads = bw(&g, &needs);
                    for ((&p, &need), pg) in node.parents.iter().zip(&needs).zip(parent_grads) {
                        if need {
                            if let Some(t) = pg {
                                accumulate(&mut grads[p], t);
                            }
                        }
                    }
                }
                None => {
                    if node.requires_grad {
                        grads[id] = Some(g);
                    }
                }
            }
        }
        Gradients { grads }
    }

    // ----- element-wise binary ---------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = &*av + &*bv;
        assert_eq!(value.shape(), av.shape(), "add: second operand must broadcast to the first");
        let b_shape = bv.shape().to_vec();
        self.push(
            value,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| reduce_to_shape(g, &b_shape)),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = &*av - &*bv;
        assert_eq!(value.shape(), av.shape(), "sub: second operand must broadcast to the first");
        let b_shape = bv.shape().to_vec();
        self.push(
            value,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| -reduce_to_shape(g, &b_shape)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = &*av * &*bv;
        assert_eq!(value.shape(), av.shape(), "mul: second operand must broadcast to the first");
        self.push(
            value,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * &*bv),
                    needs[1].then(|| reduce_to_shape(&(g * &*av), bv.shape())),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = &*self.rc(a) * s;
        self.push(value, vec![a.0], Box::new(move |g, _| vec![Some(g * s)]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = &*self.rc(a) + s;
        self.push(value, vec![a.0], Box::new(move |g, _| vec![Some(g.clone())]))
    }

    /// Sum of `coeff_i * v_i` over scalars or equally shaped tensors.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].1).raw_dim();
        let mut value = Tensor::zeros(shape);
        for &(c, v) in terms {
            value.scaled_add(c, self.value(v));
        }
        let coeffs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        self.push(
            value,
            terms.iter().map(|t| t.1 .0).collect(),
            Box::new(move |g, needs| {
                coeffs
                    .iter()
                    .zip(needs)
                    .map(|(&c, &n)| n.then(|| g * c))
                    .collect()
            }),
        )
    }

    // ----- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let value = to_2d(&av).dot(&to_2d(&bv)).into_dyn();
        self.push(
            value,
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let g2 = to_2d(g);
                vec![
                    needs[0].then(|| g2.dot(&to_2d(&bv).t()).into_dyn()),
                    needs[1].then(|| to_2d(&av).t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = to_2d(&self.rc(a)).t().as_standard_layout().into_owned().into_dyn();
        self.push(
            value,
            vec![a.0],
            Box::new(|g, _| vec![Some(to_2d(g).t().as_standard_layout().into_owned().into_dyn())]),
        )
    }

    // ----- element-wise unary -------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let av = self.rc(a);
        let value = av.mapv(f);
        let out = Rc::new(value.clone());
        let out_c = Rc::clone(&out);
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                Zip::from(&mut gx)
                    .and(&*av)
                    .and(&*out_c)
                    .for_each(|gx, &x, &y| *gx *= df(x, y));
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// `x^p` for `x >= 0`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(
            a,
            move |x| x.powf(p),
            move |x, _| if x > 0.0 { p * x.powf(p - 1.0) } else if p == 1.0 { 1.0 } else { 0.0 },
        )
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let value = ArrayD::from_elem(IxDyn(&[]), av.sum());
        let dim = av.raw_dim();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| vec![Some(Tensor::from_elem(dim.clone(), g.sum()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let av = self.rc(a);
        let value = av.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let dim = av.raw_dim();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let b = g.broadcast(dim.clone()).expect("broadcast").to_owned();
                vec![Some(b)]
            }),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    fn select_axis(&mut self, a: Var, axis: usize, take_max: bool) -> Var {
        let av = self.rc(a);
        let mut reduced_shape = av.shape().to_vec();
        reduced_shape.remove(axis);
        let mut value = ArrayD::<f64>::zeros(IxDyn(&reduced_shape));
        let mut idx = ArrayD::<usize>::zeros(IxDyn(&reduced_shape));
        Zip::from(&mut value)
            .and(&mut idx)
            .and(av.lanes(Axis(axis)))
            .for_each(|v, i, lane| {
                let mut best = 0;
                for (k, &x) in lane.iter().enumerate() {
                    let better = if take_max { x > lane[best] } else { x < lane[best] };
                    if better {
                        best = k;
                    }
                }
                *v = lane[best];
                *i = best;
            });
        let dim = av.raw_dim();
        self.push(
            value.insert_axis(Axis(axis)),
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(dim.clone());
                let g_reduced = g.index_axis(Axis(axis), 0);
                Zip::from(gx.lanes_mut(Axis(axis)))
                    .and(&idx)
                    .and(&g_reduced)
                    .for_each(|mut lane, &i, &gv| lane[i] += gv);
                vec![Some(gx)]
            }),
        )
    }

    /// Max along `axis` (kept, length one). Ties route the gradient to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        self.select_axis(a, axis, true)
    }

    /// Min along `axis` (kept, length one). Ties route the gradient to the first index.
    pub fn min_axis(&mut self, a: Var, axis: usize) -> Var {
        self.select_axis(a, axis, false)
    }

    // ----- softmax family ------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let last = av.ndim() - 1;
        let mut value = (*av).clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            softmax_in_place(lane.as_slice_mut().expect("contiguous lane"));
        }
        let y = Rc::new(value.clone());
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let gy = g * &*y;
                let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                vec![Some(&gy - &(&*y * &s))]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let last = av.ndim() - 1;
        let mut value = (*av).clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            let m = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + lane.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|x| x - lse);
        }
        let probs = Rc::new(value.mapv(f64::exp));
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let s = g.sum_axis(Axis(last)).insert_axis(Axis(last));
                vec![Some(g - &(&*probs * &s))]
            }),
        )
    }

    // ----- shape manipulation --------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.rc(a);
        let value = av
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let orig = av.shape().to_vec();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                vec![Some(
                    g.as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape back"),
                )]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.rc(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            value,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |g, needs| {
                let mut start = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &n)| {
                        let piece = n.then(|| {
                            g.slice_axis(Axis(axis), Slice::from(start..start + w)).to_owned()
                        });
                        start += w;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let av = self.rc(a);
        let value = av.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        let dim = av.raw_dim();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(dim.clone());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
                vec![Some(gx)]
            }),
        )
    }

    /// `out[i] = a[i, idx[i]]` for a two-dimensional `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.rc(a);
        let a2 = to_2d(&av);
        assert_eq!(a2.nrows(), idx.len());
        let value = Array1::from_iter(idx.iter().enumerate().map(|(i, &j)| a2[[i, j]])).into_dyn();
        let idx = idx.to_vec();
        let (rows, cols) = a2.dim();
        self.push(
            value,
            vec![a.0],
            Box::new(move |g, _| {
                let mut gx = Array2::<f64>::zeros((rows, cols));
                for (i, &j) in idx.iter().enumerate() {
                    gx[[i, j]] += g[[i]];
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    // ----- fused model operations ------------------------------------------------

    /// Row-wise `x / max(‖x‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.rc(a);
        let a2 = to_2d(&av);
        let norms: Vec<f64> = a2.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut y = a2.to_owned();
        for (mut row, &n) in y.rows_mut().into_iter().zip(&norms) {
            row /= n.max(eps);
        }
        let y_rc = Rc::new(y.clone());
        self.push(
            y.into_dyn(),
            vec![a.0],
            Box::new(move |g, _| {
                let g2 = to_2d(g);
                let mut gx = Array2::<f64>::zeros(g2.raw_dim());
                for (i, &n) in norms.iter().enumerate() {
                    let gi = g2.row(i);
                    if n > eps {
                        let yi = y_rc.row(i);
                        let proj = yi.dot(&gi);
                        gx.row_mut(i).assign(&((&gi - &(&yi * proj)) / n));
                    } else {
                        gx.row_mut(i).assign(&(&gi / eps));
                    }
                }
                vec![Some(gx.into_dyn())]
            }),
        )
    }

    /// Euclidean distances between rows: `out[i,j] = sqrt(‖a_i − b_j‖² + eps)`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let (a2, b2) = (to_2d(&av), to_2d(&bv));
        let mut d = Array2::<f64>::zeros((a2.nrows(), b2.nrows()));
        for (i, ai) in a2.rows().into_iter().enumerate() {
            for (j, bj) in b2.rows().into_iter().enumerate() {
                let sq: f64 = ai.iter().zip(bj.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                d[[i, j]] = (sq + eps).sqrt();
            }
        }
        let d_rc = Rc::new(d.clone());
        self.push(
            d.into_dyn(),
            vec![a.0, b.0],
            Box::new(move |g, needs| {
                let (a2, b2) = (to_2d(&av), to_2d(&bv));
                let w = &to_2d(g) / &*d_rc;
                let ga = needs[0].then(|| {
                    let row_sum = w.sum_axis(Axis(1)).insert_axis(Axis(1));
                    (&a2 * &row_sum - w.dot(&b2)).into_dyn()
                });
                let gb = needs[1].then(|| {
                    let col_sum = w.sum_axis(Axis(0)).insert_axis(Axis(1));
                    (&b2 * &col_sum - w.t().dot(&a2)).into_dyn()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Stride-1 "same" 2-D convolution. `x`: N×Ci×H×W, `w`: Co×Ci×k×k (k odd), `b`: Co.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.rc(x), self.rc(w), self.rc(b));
        let (n, ci, h, wd) = dims4(&xv);
        let (co, ci2, k, k2) = dims4(&wv);
        assert!(ci == ci2 && k == k2 && k % 2 == 1, "conv2d_same: incompatible kernel");
        let pad = k / 2;
        let xs = xv.as_standard_layout();
        let ws = wv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ws = ws.as_slice().unwrap();
        let mut out = vec![0.0f64; n * co * h * wd];
        for img in 0..n {
            for o in 0..co {
                let ob = &mut out[(img * co + o) * h * wd..(img * co + o + 1) * h * wd];
                ob.fill(bv[[o]]);
                for c in 0..ci {
                    let xb = &xs[(img * ci + c) * h * wd..(img * ci + c + 1) * h * wd];
                    let wb = &ws[(o * ci + c) * k * k..(o * ci + c + 1) * k * k];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wval = wb[ky * k + kx];
                            let (y0, y1) = valid_range(ky, pad, h);
                            let (x0, x1) = valid_range(kx, pad, wd);
                            for y in y0..y1 {
                                let sy = y + ky - pad;
                                let orow = &mut ob[y * wd..(y + 1) * wd];
                                let irow = &xb[sy * wd..(sy + 1) * wd];
                                for xx in x0..x1 {
                                    orow[xx] += wval * irow[xx + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, co, h, wd]), out).unwrap();
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Box::new(move |g, needs| {
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let xs = xv.as_standard_layout();
                let xs = xs.as_slice().unwrap();
                let ws = wv.as_standard_layout();
                let ws = ws.as_slice().unwrap();
                let mut gx = vec![0.0f64; if needs[0] { n * ci * h * wd } else { 0 }];
                let mut gw = vec![0.0f64; co * ci * k * k];
                let mut gb = vec![0.0f64; co];
                for img in 0..n {
                    for o in 0..co {
                        let gb_o = &gs[(img * co + o) * h * wd..(img * co + o + 1) * h * wd];
                        gb[o] += gb_o.iter().sum::<f64>();
                        for c in 0..ci {
                            let xb = &xs[(img * ci + c) * h * wd..(img * ci + c + 1) * h * wd];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = (o * ci + c) * k * k + ky * k + kx;
                                    let wval = ws[widx];
                                    let (y0, y1) = valid_range(ky, pad, h);
                                    let (x0, x1) = valid_range(kx, pad, wd);
                                    let mut acc = 0.0;
                                    for y in y0..y1 {
                                        let sy = y + ky - pad;
                                        let grow = &gb_o[y * wd..(y + 1) * wd];
                                        let irow = &xb[sy * wd..(sy + 1) * wd];
                                        for xx in x0..x1 {
                                            acc += grow[xx] * irow[xx + kx - pad];
                                        }
                                        if needs[0] {
                                            let base = (img * ci + c) * h * wd + sy * wd;
                                            for xx in x0..x1 {
                                                gx[base + xx + kx - pad] += wval * grow[xx];
                                            }
                                        }
                                    }
                                    gw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), gx).unwrap()),
                    needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[co, ci, k, k]), gw).unwrap()),
                    needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[co]), gb).unwrap()),
                ]
            }),
        )
    }
}

/// Output rows `y` for which `y + k - pad` is a valid input row.
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a four-dimensional tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

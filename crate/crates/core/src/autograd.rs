//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass. Every op returns a [`Var`] that holds
//! its value; a node is recorded only when at least one input is tracked, so a
//! forward pass over constants (inference) keeps nothing alive beyond the
//! values the caller still holds.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, PadMode};
use crate::tensor::{lit, Float, Tensor};

type NodeId = usize;
type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

/// A value produced during a forward pass.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<NodeId>,
}

impl<T: Float> Var<T> {
    /// An untracked value.
    pub fn constant(value: impl Into<Arc<Tensor<T>>>) -> Self {
        Self { value: value.into(), node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self { value: self.value.clone(), node: None }
    }

    pub fn item(&self) -> T {
        self.value.item()
    }
}

impl<T: Float> From<Tensor<T>> for Var<T> {
    fn from(t: Tensor<T>) -> Self {
        Var::constant(t)
    }
}

/// Records a forward pass for later differentiation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaves: RefCell<HashMap<usize, (NodeId, Arc<Tensor<T>>)>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the parameters of a tape.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    leaves: HashMap<usize, (NodeId, Arc<Tensor<T>>)>,
}

impl<T: Float> Grads<T> {
    /// Gradient for a parameter registered through [`Tape::param`]. `None`
    /// means the loss does not depend on it.
    pub fn wrt(&self, param: &Arc<Tensor<T>>) -> Option<&Tensor<T>> {
        let key = Arc::as_ptr(param) as usize;
        self.leaves.get(&key).and_then(|(id, _)| self.grads[*id].as_ref())
    }
}

enum Bcast {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), leaves: RefCell::new(HashMap::new()), grad_enabled: true }
    }

    /// A tape on which parameters are treated as constants.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable tensor. Registering the same `Arc` twice returns
    /// the same leaf, so shared weights accumulate gradient from every use.
    pub fn param(&self, p: &Arc<Tensor<T>>) -> Var<T> {
        if !self.grad_enabled {
            return Var::constant(p.clone());
        }
        let key = Arc::as_ptr(p) as usize;
        let mut leaves = self.leaves.borrow_mut();
        let id = match leaves.get(&key) {
            Some((id, _)) => *id,
            None => {
                let mut nodes = self.nodes.borrow_mut();
                nodes.push(Node { parents: Vec::new(), backward: None });
                let id = nodes.len() - 1;
                leaves.insert(key, (id, p.clone()));
                id
            }
        };
        Var { value: p.clone(), node: Some(id) }
    }

    /// A tracked leaf that is not tied to a stored parameter (used for
    /// gradients with respect to inputs).
    pub fn input(&self, value: Tensor<T>) -> (Var<T>, Arc<Tensor<T>>) {
        let arc = Arc::new(value);
        (self.param(&arc), arc)
    }

    fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let ids: Vec<Option<NodeId>> = parents.iter().map(|p| p.node).collect();
        if ids.iter().all(Option::is_none) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: ids, backward: Some(Box::new(backward)) });
        Var { value: Arc::new(value), node: Some(nodes.len() - 1) }
    }

    /// Back-propagates from a scalar. The tape is spent afterwards.
    pub fn backward(&self, loss: &Var<T>) -> Result<Grads<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", loss.shape())));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let leaves = std::mem::take(&mut *self.leaves.borrow_mut());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Grads { grads, leaves });
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&g, &mask);
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (pid, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Grads { grads, leaves })
    }

    // ---- elementwise ----

    fn same_shape(a: &Var<T>, b: &Var<T>, op: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "add")?;
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        Ok(self.record(out, &[a, b], |g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "sub")?;
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        Ok(self.record(out, &[a, b], |g, m| vec![m[0].then(|| g.clone()), m[1].then(|| g.map(|v| -v))]))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "mul")?;
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, m| {
            vec![
                m[0].then(|| g.zip_map(&bv, |gg, y| gg * y)),
                m[1].then(|| g.zip_map(&av, |gg, x| gg * x)),
            ]
        }))
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Var<T> {
        let out = a.value.map(|x| x * s);
        self.record(out, &[a], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(|x| if x < T::zero() { T::zero() } else { x });
        let av = a.value.clone();
        self.record(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&av, |gg, x| if x > T::zero() { gg } else { T::zero() }))]
        })
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(a.value.sum()), &[a], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        let n = lit::<T>(a.value.len() as f64);
        let s = self.sum(a);
        self.scale(&s, T::one() / n)
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&self, terms: &[Var<T>]) -> Result<Var<T>> {
        let mut iter = terms.iter();
        let first = iter.next().ok_or_else(|| Error::Shape("add_all of nothing".into()))?.clone();
        iter.try_fold(first, |acc, t| self.add(&acc, t))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let old = a.shape().to_vec();
        let out = (*a.value).clone().reshape(shape)?;
        Ok(self.record(out, &[a], move |g, _| vec![Some(g.clone().reshape(&old).expect("reshape grad"))]))
    }

    // ---- spatial ----

    pub fn pad2d(&self, x: &Var<T>, p: usize, mode: PadMode) -> Var<T> {
        if p == 0 {
            return x.clone();
        }
        let (n, c, h, w) = x.value.dims4();
        let out = kernels::pad_forward(x.value.data(), n * c, h, w, p, mode);
        let out = Tensor::from_parts(vec![n, c, h + 2 * p, w + 2 * p], out);
        self.record(out, &[x], move |g, _| {
            let dx = kernels::pad_backward(g.data(), n * c, h, w, p, mode);
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Valid stride-1 convolution of `x [N,C,H,W]` with `w [O,C,k,k]`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (n, c, h, wd) = x.value.dims4();
        let (o, wc, k, k2) = w.value.dims4();
        if wc != c || k != k2 {
            return Err(Error::Shape(format!("conv2d: input {:?} vs kernel {:?}", x.shape(), w.shape())));
        }
        if h < k || wd < k {
            return Err(Error::Shape(format!("conv2d: input {:?} smaller than kernel {k}", x.shape())));
        }
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {o} outputs", b.shape())));
            }
        }
        let d = ConvDims { n, c, h, w: wd, o, k };
        let out = kernels::conv2d_forward(x.value.data(), w.value.data(), b.map(|b| b.value.data()), &d);
        let out = Tensor::from_parts(vec![n, o, d.ho(), d.wo()], out);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let has_bias = b.is_some();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.record(out, &parents, move |g, m| {
            let need_db = has_bias && m[2];
            let r = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), &d, m[0], m[1], need_db);
            let mut v = vec![
                r.dx.map(|dx| Tensor::from_parts(xv.shape().to_vec(), dx)),
                r.dw.map(|dw| Tensor::from_parts(wv.shape().to_vec(), dw)),
            ];
            if has_bias {
                v.push(r.db.map(|db| Tensor::from_parts(vec![d.o], db)));
            }
            v
        }))
    }

    pub fn max_pool2(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let (out, arg) = kernels::max_pool2_forward(x.value.data(), n * c, h, w);
        let out = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        let in_shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (&idx, &gv) in arg.iter().zip(g.data()) {
                d[idx as usize] += gv;
            }
            vec![Some(dx)]
        })
    }

    pub fn upsample2(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let out = kernels::upsample2_forward(x.value.data(), n * c, h, w);
        let out = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        self.record(out, &[x], move |g, _| {
            vec![Some(Tensor::from_parts(vec![n, c, h, w], kernels::upsample2_backward(g.data(), n * c, h, w)))]
        })
    }

    // ---- per-channel statistics ----

    /// Per-(item, channel) spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn channel_mean(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let out = Tensor::from_parts(vec![n, c], kernels::plane_means(x.value.data(), hw));
        let inv = T::one() / lit::<T>(hw as f64);
        self.record(out, &[x], move |g, _| {
            let mut dx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                dx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Per-(item, channel) population std `sqrt(var + eps)`: `[N,C,H,W] -> [N,C]`.
    pub fn channel_std(&self, x: &Var<T>, eps: T) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let means = kernels::plane_means(x.value.data(), hw);
        let stds = kernels::plane_stds(x.value.data(), hw, eps);
        let out = Tensor::from_parts(vec![n, c], stds.clone());
        let xv = x.value.clone();
        let inv = T::one() / lit::<T>(hw as f64);
        self.record(out, &[x], move |g, _| {
            // d std / d x_i = (x_i - mean) / (hw * std)
            let mut dx = Vec::with_capacity(n * c * hw);
            for (p, plane) in xv.data().chunks_exact(hw).enumerate() {
                let f = g.data()[p] * inv / stds[p];
                dx.extend(plane.iter().map(|&v| (v - means[p]) * f));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    fn channel_bcast(&self, x: &Var<T>, v: &Var<T>, op: Bcast) -> Result<Var<T>> {
        let (n, c, h, w) = x.value.dims4();
        if v.shape() != [n, c] {
            return Err(Error::Shape(format!("channel broadcast of {:?} onto {:?}", v.shape(), x.shape())));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c * hw);
        for (plane, &s) in x.value.data().chunks_exact(hw).zip(v.value.data()) {
            match op {
                Bcast::Add => out.extend(plane.iter().map(|&a| a + s)),
                Bcast::Sub => out.extend(plane.iter().map(|&a| a - s)),
                Bcast::Mul => out.extend(plane.iter().map(|&a| a * s)),
                Bcast::Div => out.extend(plane.iter().map(|&a| a / s)),
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        let (xv, vv) = (x.value.clone(), v.value.clone());
        Ok(self.record(out, &[x, v], move |g, m| {
            let planes = g.data().chunks_exact(hw);
            let dx = m[0].then(|| match op {
                Bcast::Add | Bcast::Sub => g.clone(),
                Bcast::Mul => {
                    let mut d = Vec::with_capacity(g.len());
                    for (gp, &s) in g.data().chunks_exact(hw).zip(vv.data()) {
                        d.extend(gp.iter().map(|&gg| gg * s));
                    }
                    Tensor::from_parts(vec![n, c, h, w], d)
                }
                Bcast::Div => {
                    let mut d = Vec::with_capacity(g.len());
                    for (gp, &s) in g.data().chunks_exact(hw).zip(vv.data()) {
                        d.extend(gp.iter().map(|&gg| gg / s));
                    }
                    Tensor::from_parts(vec![n, c, h, w], d)
                }
            });
            let dv = m[1].then(|| {
                let d: Vec<T> = match op {
                    Bcast::Add => planes.map(|gp| gp.iter().copied().sum()).collect(),
                    Bcast::Sub => planes.map(|gp| -gp.iter().copied().sum::<T>()).collect(),
                    Bcast::Mul => planes
                        .zip(xv.data().chunks_exact(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect(),
                    Bcast::Div => planes
                        .zip(xv.data().chunks_exact(hw))
                        .zip(vv.data())
                        .map(|((gp, xp), &s)| -gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>() / (s * s))
                        .collect(),
                };
                Tensor::from_parts(vec![n, c], d)
            });
            vec![dx, dv]
        }))
    }

    pub fn add_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        self.channel_bcast(x, v, Bcast::Add)
    }

    pub fn sub_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        self.channel_bcast(x, v, Bcast::Sub)
    }

    pub fn mul_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        self.channel_bcast(x, v, Bcast::Mul)
    }

    pub fn div_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        self.channel_bcast(x, v, Bcast::Div)
    }

    // ---- matrices ----

    /// Batched matrix product. `a` is `[B,m,k]` (or `[m,k]`), `b` is
    /// `[B,k,n]` (or `[k,n]`); `trans_*` transposes the trailing two axes.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let split = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [r, c] => Ok((1, r, c)),
                [bt, r, c] => Ok((bt, r, c)),
                _ => Err(Error::Shape(format!("bmm operand must be 2-d or 3-d, got {s:?}"))),
            }
        };
        let (ba, ar, ac) = split(a.shape())?;
        let (bb, br, bc) = split(b.shape())?;
        let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ba != bb || ka != kb {
            return Err(Error::Shape(format!(
                "bmm: {:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "ᵀ" } else { "" },
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let k = ka;
        let batch = ba;
        let three_d = a.shape().len() == 3;
        let strides = |trans: bool, cols: usize| -> (isize, isize) {
            if trans {
                (1, cols as isize)
            } else {
                (cols as isize, 1)
            }
        };
        let (rsa, csa) = strides(trans_a, ac);
        let (rsb, csb) = strides(trans_b, bc);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.value.data().as_ptr().add(i * ar * ac),
                    rsa,
                    csa,
                    b.value.data().as_ptr().add(i * br * bc),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let shape = if three_d { vec![batch, m, n] } else { vec![m, n] };
        let out = Tensor::from_parts(shape, out);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, mask| {
            // C = op(A) op(B); dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G.
            let mut da = None;
            let mut db = None;
            if mask[0] {
                let mut d = vec![T::zero(); av.len()];
                for i in 0..batch {
                    let gp = unsafe { g.data().as_ptr().add(i * m * n) };
                    let bp = unsafe { bv.data().as_ptr().add(i * br * bc) };
                    let dp = unsafe { d.as_mut_ptr().add(i * ar * ac) };
                    // dA (stored layout ar x ac). If trans_a, dA = (G op(B)ᵀ)ᵀ = op(B) Gᵀ.
                    unsafe {
                        if !trans_a {
                            // [m x n] * op(B)ᵀ [n x k] -> [m x k]
                            T::gemm(m, n, k, T::one(), gp, n as isize, 1, bp, csb, rsb, T::zero(), dp, ac as isize, 1);
                        } else {
                            // op(B) [k x n] * Gᵀ [n x m] -> [k x m]
                            T::gemm(k, n, m, T::one(), bp, rsb, csb, gp, 1, n as isize, T::zero(), dp, ac as isize, 1);
                        }
                    }
                }
                da = Some(Tensor::from_parts(av.shape().to_vec(), d));
            }
            if mask[1] {
                let mut d = vec![T::zero(); bv.len()];
                for i in 0..batch {
                    let gp = unsafe { g.data().as_ptr().add(i * m * n) };
                    let ap = unsafe { av.data().as_ptr().add(i * ar * ac) };
                    let dp = unsafe { d.as_mut_ptr().add(i * br * bc) };
                    unsafe {
                        if !trans_b {
                            // op(A)ᵀ [k x m] * G [m x n] -> [k x n]
                            T::gemm(k, m, n, T::one(), ap, csa, rsa, gp, n as isize, 1, T::zero(), dp, bc as isize, 1);
                        } else {
                            // Gᵀ [n x m] * op(A) [m x k] -> [n x k]
                            T::gemm(n, m, k, T::one(), gp, 1, n as isize, ap, rsa, csa, T::zero(), dp, bc as isize, 1);
                        }
                    }
                }
                db = Some(Tensor::from_parts(bv.shape().to_vec(), d));
            }
            vec![da, db]
        }))
    }

    /// `x [M,D] + b [D]` broadcast over rows.
    pub fn add_row(&self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (rows, d) = match *x.shape() {
            [r, d] => (r, d),
            _ => return Err(Error::Shape(format!("add_row on {:?}", x.shape()))),
        };
        if b.shape() != [d] {
            return Err(Error::Shape(format!("add_row: bias {:?} for width {d}", b.shape())));
        }
        let mut out = x.value.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (v, &bb) in row.iter_mut().zip(b.value.data()) {
                *v += bb;
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        Ok(self.record(out, &[x, b], move |g, m| {
            let db = m[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for row in g.data().chunks_exact(d) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(vec![d], acc)
            });
            vec![m[0].then(|| g.clone()), db]
        }))
    }

    /// Gathers channel vectors of item `item` of `x [N,C,H,W]` at the given
    /// `(row, col)` positions into a `[P, C]` matrix.
    pub fn gather_positions(&self, x: &Var<T>, item: usize, positions: &[(usize, usize)]) -> Result<Var<T>> {
        let (n, c, h, w) = x.value.dims4();
        if item >= n {
            return Err(Error::Shape(format!("gather: item {item} of batch {n}")));
        }
        if let Some(&(i, j)) = positions.iter().find(|&&(i, j)| i >= h || j >= w) {
            return Err(Error::Shape(format!("gather: position ({i},{j}) outside {h}x{w}")));
        }
        let hw = h * w;
        let base = item * c * hw;
        let data = x.value.data();
        let mut out = Vec::with_capacity(positions.len() * c);
        for &(i, j) in positions {
            let off = base + i * w + j;
            out.extend((0..c).map(|ch| data[off + ch * hw]));
        }
        let out = Tensor::from_parts(vec![positions.len(), c], out);
        let positions = positions.to_vec();
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&in_shape);
            let d = dx.data_mut();
            for (row, &(i, j)) in g.data().chunks_exact(c).zip(&positions) {
                let off = base + i * w + j;
                for (ch, &gv) in row.iter().enumerate() {
                    d[off + ch * hw] += gv;
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Scales every row of `x [M,D]` to unit l2 norm; `eps` is added to the
    /// norm before dividing.
    pub fn normalize_rows(&self, x: &Var<T>, eps: T) -> Result<Var<T>> {
        let d = match *x.shape() {
            [_, d] => d,
            _ => return Err(Error::Shape(format!("normalize_rows on {:?}", x.shape()))),
        };
        let norms: Vec<T> = x
            .value
            .data()
            .chunks_exact(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out = Vec::with_capacity(x.value.len());
        for (row, &nrm) in x.value.data().chunks_exact(d).zip(&norms) {
            let inv = T::one() / (nrm + eps);
            out.extend(row.iter().map(|&v| v * inv));
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let xv = x.value.clone();
        Ok(self.record(out, &[x], move |g, _| {
            // y = x / (|x| + eps); dy/dx = I/(n+e) - x xᵀ / (n (n+e)^2)
            let mut dx = Vec::with_capacity(xv.len());
            for ((row, grow), &nrm) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)).zip(&norms) {
                let s = nrm + eps;
                let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                let coef = if nrm > T::zero() { dot / (nrm * s * s) } else { T::zero() };
                dx.extend(row.iter().zip(grow).map(|(&xv, &gv)| gv / s - xv * coef));
            }
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
        }))
    }

    /// `sum_m [logsumexp(logits[m, :]) - logits[m, m]]` for a square matrix:
    /// softmax cross-entropy where row `m`'s target is column `m`.
    pub fn cross_entropy_diag(&self, logits: &Var<T>) -> Result<Var<T>> {
        let m = match *logits.shape() {
            [r, c] if r == c => r,
            _ => return Err(Error::Shape(format!("cross_entropy_diag needs a square matrix, got {:?}", logits.shape()))),
        };
        let mut probs = Vec::with_capacity(m * m);
        let mut total = T::zero();
        for (i, row) in logits.value.data().chunks_exact(m).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: T = exps.iter().copied().sum();
            total += mx + z.ln() - row[i];
            probs.extend(exps.iter().map(|&e| e / z));
        }
        Ok(self.record(Tensor::scalar(total), &[logits], move |g, _| {
            let gv = g.item();
            let mut d = probs;
            for i in 0..m {
                d[i * m + i] -= T::one();
            }
            for v in d.iter_mut() {
                *v *= gv;
            }
            vec![Some(Tensor::from_parts(vec![m, m], d))]
        }))
    }

    /// Frobenius norm of each leading-axis item: `[N, ...] -> [N]`.
    /// The gradient at a zero item is taken as zero.
    pub fn norm_per_item(&self, x: &Var<T>) -> Var<T> {
        let n = x.shape()[0];
        let stride = x.value.len() / n.max(1);
        let norms: Vec<T> = x
            .value
            .data()
            .chunks_exact(stride.max(1))
            .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_parts(vec![n], norms.clone());
        let xv = x.value.clone();
        self.record(out, &[x], move |g, _| {
            let mut dx = Vec::with_capacity(xv.len());
            for ((chunk, &nrm), &gv) in xv.data().chunks_exact(stride.max(1)).zip(&norms).zip(g.data()) {
                if nrm > T::zero() {
                    let f = gv / nrm;
                    dx.extend(chunk.iter().map(|&v| v * f));
                } else {
                    dx.extend(std::iter::repeat_n(T::zero(), chunk.len()));
                }
            }
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks the analytic gradient of `f` at `x0` against central differences
    /// on every coordinate.
    fn check_grad(x0: Tensor<f64>, f: impl Fn(&Tape<f64>, &Var<f64>) -> Var<f64>) {
        let tape = Tape::new();
        let (x, arc) = tape.input(x0.clone());
        let y = f(&tape, &x);
        let grads = tape.backward(&y).unwrap();
        let g = grads.wrt(&arc).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let t = Tape::no_grad();
                f(&t, &Var::constant(xp)).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = g.data()[i];
            let tol = 1e-6 * (1.0 + num.abs().max(ana.abs()));
            assert!((num - ana).abs() < tol, "coord {i}: numeric {num} analytic {ana}");
        }
    }

    fn weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Var<f64> {
        Var::constant(rand_tensor(shape, rng))
    }

    #[test]
    fn conv_pad_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut rng, &[3, 2, 3, 3]);
        let b = weights(&mut rng, &[3]);
        let probe = weights(&mut rng, &[1, 3, 6, 6]);
        for mode in [PadMode::Zero, PadMode::Reflect] {
            let (w, b, probe) = (w.clone(), b.clone(), probe.clone());
            check_grad(rand_tensor(&[1, 2, 6, 6], &mut rng), move |t, x| {
                let p = t.pad2d(x, 1, mode);
                let y = t.conv2d(&p, &w, Some(&b)).unwrap();
                let y = t.upsample2(&t.max_pool2(&t.relu(&y)));
                t.sum(&t.mul(&y, &probe).unwrap())
            });
        }
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = weights(&mut rng, &[2, 3, 5, 4]);
        let probe = weights(&mut rng, &[2, 2, 3, 2]);
        check_grad(rand_tensor(&[2, 3, 3, 3], &mut rng), move |t, w| {
            let y = t.conv2d(&x, w, None).unwrap();
            t.sum(&t.mul(&y, &probe).unwrap())
        });
        let x1 = weights(&mut rng, &[2, 3, 4, 4]);
        let probe1 = weights(&mut rng, &[2, 2, 4, 4]);
        check_grad(rand_tensor(&[2, 3, 1, 1], &mut rng), move |t, w| {
            let y = t.conv2d(&x1, w, None).unwrap();
            t.sum(&t.mul(&y, &probe1).unwrap())
        });
    }

    #[test]
    fn channel_statistics_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = weights(&mut rng, &[2, 3, 4, 4]);
        let probe_c = weights(&mut rng, &[2, 3]);
        check_grad(rand_tensor(&[2, 3, 4, 4], &mut rng), move |t, x| {
            let m = t.channel_mean(x);
            let s = t.channel_std(x, 1e-5);
            let z = t.div_channel(&t.sub_channel(x, &m).unwrap(), &s).unwrap();
            let z = t.add_channel(&t.mul_channel(&z, &probe_c).unwrap(), &m).unwrap();
            let a = t.sum(&t.mul(&z, &probe).unwrap());
            let b = t.sum(&t.mul(&s, &probe_c).unwrap());
            t.add(&a, &b).unwrap()
        });
    }

    #[test]
    fn matrix_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let other = weights(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
            let shape_a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
            let probe = weights(&mut rng, &[2, 3, 5]);
            let (o1, p1) = (other.clone(), probe.clone());
            check_grad(rand_tensor(shape_a, &mut rng), move |t, a| {
                t.sum(&t.mul(&t.bmm(a, &o1, ta, tb).unwrap(), &p1).unwrap())
            });
            let a_fixed = weights(&mut rng, shape_a);
            check_grad(other.value().clone(), move |t, b| {
                t.sum(&t.mul(&t.bmm(&a_fixed, b, ta, tb).unwrap(), &probe).unwrap())
            });
        }
    }

    #[test]
    fn contrastive_pieces_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bias = weights(&mut rng, &[3]);
        check_grad(rand_tensor(&[1, 3, 4, 4], &mut rng), move |t, x| {
            let a = t.gather_positions(x, 0, &[(1, 1), (1, 1), (2, 2), (0, 3)]).unwrap();
            let b = t.gather_positions(x, 0, &[(0, 0), (1, 2), (3, 3), (2, 1)]).unwrap();
            let d = t.add_row(&t.sub(&a, &b).unwrap(), &bias).unwrap();
            let z = t.normalize_rows(&d, 1e-8).unwrap();
            let logits = t.scale(&t.bmm(&z, &t.relu(&d), false, true).unwrap(), 1.0 / 0.07);
            t.cross_entropy_diag(&logits).unwrap()
        });
        check_grad(rand_tensor(&[3, 2, 2], &mut rng), |t, x| t.sum(&t.norm_per_item(x)));
    }

    #[test]
    fn shared_param_accumulates_gradient() {
        let tape = Tape::<f64>::new();
        let p = Arc::new(Tensor::scalar(3.0));
        let a = tape.param(&p);
        let b = tape.param(&p);
        let y = tape.mul(&a, &b).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&p).unwrap().item(), 6.0);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f32>::no_grad();
        let p = Arc::new(Tensor::full(&[2], 1.0f32));
        let v = tape.param(&p);
        let y = tape.relu(&tape.add(&v, &v).unwrap());
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }
}

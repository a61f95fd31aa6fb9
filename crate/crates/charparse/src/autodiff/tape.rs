use std::cell::{Cell, RefCell};

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{strides, Element, Tensor};
use super::{arg_error, shape_error, AutodiffError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(super) type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<(usize, Tensor<E>)>>;

struct Node<E> {
    value: Tensor<E>,
    backward: Option<BackFn<E>>,
    param: Option<ParamId>,
}

/// Single-threaded record of forward operations, replayed in reverse by
/// [`Tape::backward`]. Nodes are stored in topological order by construction,
/// so the backward pass visits each node exactly once.
pub struct Tape<E> {
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub(super) fn push(
        &self,
        value: Tensor<E>,
        backward: Option<BackFn<E>>,
        param: Option<ParamId>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            backward,
            param,
        });
        Var(nodes.len() - 1)
    }

    pub(super) fn node_index(v: Var) -> usize {
        v.0
    }

    /// A leaf that participates in the graph but receives no gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.push(value, None, None)
    }

    /// Leaf bound to a parameter; `backward` accumulates into its grad slot.
    pub fn param(&self, id: ParamId, store: &ParamStore<E>) -> Var {
        self.push(store.value(id).clone(), None, Some(id))
    }

    /// Identity with the gradient path severed.
    pub fn detach(&self, x: Var) -> Var {
        let v = self.value(x);
        self.push(v, None, None)
    }

    pub fn value(&self, x: Var) -> Tensor<E> {
        self.nodes.borrow()[x.0].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulate `d loss / d p` into every reachable parameter of `store`.
    /// Unreachable parameters keep their (zero-initialized) gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<E>) -> Result<()> {
        if self.consumed.get() {
            return Err(AutodiffError::TapeConsumed);
        }
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::LossNotScalar(loss_shape));
        }

        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            debug_assert_eq!(
                g.shape(),
                nodes[i].value.shape(),
                "gradient shape mismatch at node {}",
                i
            );
            if let Some(pid) = nodes[i].param {
                store.add_grad(pid, &g)?;
            }
            if let Some(back) = &nodes[i].backward {
                for (j, gj) in back(&g) {
                    debug_assert!(j < i, "tape out of topological order");
                    match &mut grads[j] {
                        Some(acc) => *acc = add_same_shape(acc, &gj),
                        slot @ None => *slot = Some(gj),
                    }
                }
            }
        }
        Ok(())
    }

    // ---- elementwise binary ops with broadcasting -------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(E, E) -> E,
        back: impl Fn(E, E, E) -> (E, E) + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out_shape = broadcast_shapes(op, av.shape(), bv.shape())?;
        let sa = aligned_strides(av.shape(), out_shape.len());
        let sb = aligned_strides(bv.shape(), out_shape.len());

        let mut out = vec![E::ZERO; out_shape.iter().product()];
        for_each_bcast2(&out_shape, &sa, &sb, |io, ia, ib| {
            out[io] = fwd(av.data()[ia], bv.data()[ib]);
        });
        let out = Tensor::from_vec(out_shape.clone(), out)?;
        debug_check_finite(op, &[&av, &bv], &out);

        let (ai, bi) = (a.0, b.0);
        let backward: BackFn<E> = Box::new(move |g: &Tensor<E>| {
            let mut ga = vec![E::ZERO; av.numel()];
            let mut gb = vec![E::ZERO; bv.numel()];
            for_each_bcast2(g.shape(), &sa, &sb, |io, ia, ib| {
                let (da, db) = back(av.data()[ia], bv.data()[ib], g.data()[io]);
                ga[ia] += da;
                gb[ib] += db;
            });
            vec![
                (ai, Tensor::from_vec(av.shape().to_vec(), ga).unwrap()),
                (bi, Tensor::from_vec(bv.shape().to_vec(), gb).unwrap()),
            ]
        });
        Ok(self.push(out, Some(backward), None))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary("add_scalar", x, move |v| v + c, move |_| E::ONE)
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        self.unary("mul_scalar", x, move |v| v * c, move |_| c)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    // ---- activations -------------------------------------------------------

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| v.max(E::ZERO),
            |v| if v > E::ZERO { E::ONE } else { E::ZERO },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            "sigmoid",
            x,
            |v| sigmoid_scalar(v),
            |v| {
                let s = sigmoid_scalar(v);
                s * (E::ONE - s)
            },
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(
            "tanh",
            x,
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                E::ONE - t * t
            },
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let three = E::from_f64(3.0);
        self.unary(
            "gelu",
            x,
            move |v| {
                let u = c * (v + a * v * v * v);
                half * v * (E::ONE + u.tanh())
            },
            move |v| {
                let u = c * (v + a * v * v * v);
                let t = u.tanh();
                let du = c * (E::ONE + three * a * v * v);
                half * (E::ONE + t) + half * v * (E::ONE - t * t) * du
            },
        )
    }

    fn unary(
        &self,
        op: &'static str,
        x: Var,
        fwd: impl Fn(E) -> E,
        dfdx: impl Fn(E) -> E + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = xv.map(&fwd);
        debug_check_finite(op, &[&xv], &out);
        let xi = x.0;
        let backward: BackFn<E> = Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gi, &vi)| gi * dfdx(vi))
                .collect();
            vec![(xi, Tensor::from_vec(xv.shape().to_vec(), data).unwrap())]
        });
        self.push(out, Some(backward), None)
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(shape_error(
                "reshape",
                format!("cannot reshape {:?} into {:?}", xv.shape(), shape),
            ));
        }
        let out = Tensor::from_vec(shape.to_vec(), xv.data().to_vec())?;
        let xi = x.0;
        let in_shape = xv.shape().to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            vec![(
                xi,
                Tensor::from_vec(in_shape.clone(), g.data().to_vec()).unwrap(),
            )]
        });
        Ok(self.push(out, Some(backward), None))
    }

    pub fn swap_axes(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if a >= r || b >= r {
            return Err(arg_error(
                "swap_axes",
                format!("axes ({a},{b}) out of range for rank {r}"),
            ));
        }
        let out = permute_swap(&xv, a, b);
        let xi = x.0;
        let backward: BackFn<E> = Box::new(move |g| vec![(xi, permute_swap(g, a, b))]);
        Ok(self.push(out, Some(backward), None))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(arg_error("concat", "no inputs"));
        }
        let tensors: Vec<Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let rank = tensors[0].rank();
        if axis >= rank {
            return Err(arg_error(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut out_shape = tensors[0].shape().to_vec();
        out_shape[axis] = 0;
        for t in &tensors {
            if t.rank() != rank {
                return Err(shape_error("concat", "rank mismatch"));
            }
            for (d, (&a, &b)) in t.shape().iter().zip(tensors[0].shape()).enumerate() {
                if d != axis && a != b {
                    return Err(shape_error(
                        "concat",
                        format!(
                            "shapes {:?} and {:?} differ off-axis",
                            t.shape(),
                            tensors[0].shape()
                        ),
                    ));
                }
            }
            out_shape[axis] += t.shape()[axis];
        }

        // outer = product of dims before axis, inner = product after.
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let out_axis = out_shape[axis];
        let mut out = vec![E::ZERO; outer * out_axis * inner];
        let mut offset = 0;
        for t in &tensors {
            let ta = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * ta * inner..(o + 1) * ta * inner];
                let dst_start = (o * out_axis + offset) * inner;
                out[dst_start..dst_start + ta * inner].copy_from_slice(src);
            }
            offset += ta;
        }
        let out = Tensor::from_vec(out_shape, out)?;

        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let part_axis: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let part_shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut res = Vec::with_capacity(idxs.len());
            let mut offset = 0;
            for (k, &i) in idxs.iter().enumerate() {
                let ta = part_axis[k];
                let mut gp = vec![E::ZERO; part_shapes[k].iter().product()];
                for o in 0..outer {
                    let src_start = (o * out_axis + offset) * inner;
                    gp[o * ta * inner..(o + 1) * ta * inner]
                        .copy_from_slice(&g.data()[src_start..src_start + ta * inner]);
                }
                res.push((i, Tensor::from_vec(part_shapes[k].clone(), gp).unwrap()));
                offset += ta;
            }
            res
        });
        Ok(self.push(out, Some(backward), None))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axis >= rank {
            return Err(arg_error(
                "slice",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        if start > end || end > xv.shape()[axis] {
            return Err(arg_error(
                "slice",
                format!(
                    "range {start}..{end} invalid for axis of size {}",
                    xv.shape()[axis]
                ),
            ));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let in_axis = xv.shape()[axis];
        let out_axis = end - start;
        let mut out_shape = xv.shape().to_vec();
        out_shape[axis] = out_axis;

        let mut out = vec![E::ZERO; outer * out_axis * inner];
        for o in 0..outer {
            let src_start = (o * in_axis + start) * inner;
            out[o * out_axis * inner..(o + 1) * out_axis * inner]
                .copy_from_slice(&xv.data()[src_start..src_start + out_axis * inner]);
        }
        let out = Tensor::from_vec(out_shape, out)?;

        let xi = x.0;
        let in_shape = xv.shape().to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; in_shape.iter().product()];
            for o in 0..outer {
                let dst_start = (o * in_axis + start) * inner;
                gx[dst_start..dst_start + out_axis * inner]
                    .copy_from_slice(&g.data()[o * out_axis * inner..(o + 1) * out_axis * inner]);
            }
            vec![(xi, Tensor::from_vec(in_shape.clone(), gx).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axis >= rank {
            return Err(arg_error(
                op,
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let n = xv.shape()[axis];
        let scale = if mean {
            E::from_f64(1.0 / n as f64)
        } else {
            E::ONE
        };

        let mut out_shape = xv.shape().to_vec();
        out_shape.remove(axis);
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for j in 0..inner {
                    out[o * inner + j] += xv.data()[base + j];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v = *v * scale;
            }
        }
        let out = Tensor::from_vec(out_shape, out)?;
        debug_check_finite(op, &[&xv], &out);

        let xi = x.0;
        let in_shape = xv.shape().to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let mut gx = vec![E::ZERO; in_shape.iter().product()];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for j in 0..inner {
                        gx[base + j] = g.data()[o * inner + j] * scale;
                    }
                }
            }
            vec![(xi, Tensor::from_vec(in_shape.clone(), gx).unwrap())]
        });
        Ok(self.push(out, Some(backward), None))
    }

    /// Sum of all elements, as a `[1]`-shaped scalar.
    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let mut acc = E::ZERO;
        for &v in xv.data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        let xi = x.0;
        let backward: BackFn<E> =
            Box::new(move |g| vec![(xi, Tensor::full(xv.shape(), g.data()[0]))]);
        self.push(out, Some(backward), None)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    // ---- dropout -------------------------------------------------------------

    /// Inverted dropout: identity at eval time or rate 0.
    pub fn dropout(&self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || rate == 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<E> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    E::ZERO
                } else {
                    E::from_f64(keep)
                }
            })
            .collect();
        let out_data: Vec<E> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(xv.shape().to_vec(), out_data).unwrap();
        let xi = x.0;
        let shape = xv.shape().to_vec();
        let backward: BackFn<E> = Box::new(move |g| {
            let data = g.data().iter().zip(&mask).map(|(&gi, &m)| gi * m).collect();
            vec![(xi, Tensor::from_vec(shape.clone(), data).unwrap())]
        });
        self.push(out, Some(backward), None)
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- helpers shared with the nn ops ----------------------------------------

pub(super) fn add_same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

fn sigmoid_scalar<E: Element>(v: E) -> E {
    // Split on sign for numerical stability at large |v|.
    if v >= E::ZERO {
        E::ONE / (E::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::ONE + e)
    }
}

pub(super) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(shape_error(
                op,
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        };
    }
    Ok(out)
}

/// Strides of `shape` right-aligned to `out_rank`, with 0 on broadcast dims.
pub(super) fn aligned_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let s = strides(shape);
    let mut out = vec![0; out_rank];
    let offset = out_rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { s[i] };
    }
    out
}

/// Odometer-style traversal of an output shape with two aligned inputs.
pub(super) fn for_each_bcast2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for io in 0..total {
        f(io, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
        }
    }
}

fn permute_swap<E: Element>(t: &Tensor<E>, a: usize, b: usize) -> Tensor<E> {
    if a == b {
        return t.clone();
    }
    let mut out_shape = t.shape().to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(t.shape());
    let mut in_strides_perm = in_strides.clone();
    in_strides_perm.swap(a, b);
    let out_strides = strides(&out_shape);
    let mut out = vec![E::ZERO; t.numel()];
    for (io, slot) in out.iter_mut().enumerate() {
        let mut rem = io;
        let mut ii = 0;
        for d in 0..out_shape.len() {
            let k = rem / out_strides[d];
            rem %= out_strides[d];
            ii += k * in_strides_perm[d];
        }
        *slot = t.data()[ii];
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

pub(super) fn debug_check_finite<E: Element>(
    op: &'static str,
    inputs: &[&Tensor<E>],
    out: &Tensor<E>,
) {
    if cfg!(debug_assertions) {
        if inputs.iter().all(|t| t.all_finite()) && !out.all_finite() {
            panic!("{op}: non-finite output from finite inputs");
        }
    }
}

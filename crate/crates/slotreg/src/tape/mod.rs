//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation of one forward pass. `backward` walks the
//! record in reverse and accumulates gradients for the leaves that asked for
//! them. Values are `ndarray` dynamic-rank arrays; matrix products go through
//! the BLAS-like kernels inside `ndarray::dot`, everything else is explicit
//! loops. All iteration orders are fixed, so results are deterministic for a
//! given build.

mod conv;

pub use conv::Conv2dSpec;

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &Arr) -> Vec<(usize, Arr)>>;

struct Node {
    value: Arr,
    back: Option<BackFn>,
    needs_grad: bool,
    keep_grad: bool,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Grads {
    slots: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Default)]
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

    /// Differentiable leaf; its gradient is retained by `backward`.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, None, true, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, None, false, false)
    }

    pub fn scalar_const(&mut self, c: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), c))
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Arr, back: Option<BackFn>, needs_grad: bool, keep_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            back,
            needs_grad,
            keep_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Arr, parents: &[Var], back: BackFn) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, if needs { Some(back) } else { None }, needs, false)
    }

    /// Reverse pass from a scalar root. Gradients are kept only for leaves.
    pub fn backward(&self, root: Var) -> Grads {
        let root_node = &self.nodes[root.0];
        assert_eq!(
            root_node.value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            root_node.value.shape()
        );
        let mut slots: Vec<Option<Arr>> = (0..=root.0).map(|_| None).collect();
        slots[root.0] = Some(ArrayD::ones(root_node.value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                for (pid, pg) in back(self, &g) {
                    if !self.nodes[pid].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[pid].value.shape(),
                        "gradient shape mismatch for node {pid}"
                    );
                    match &mut slots[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if self.nodes[i].keep_grad {
                slots[i] = Some(g);
            }
        }
        Grads { slots }
    }

    // ---- binary elementwise (numpy-style broadcasting) ----

    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let shape = broadcast_shapes(va.shape(), vb.shape()).unwrap_or_else(|| {
            panic!(
                "cannot broadcast {:?} with {:?}",
                va.shape(),
                vb.shape()
            )
        });
        let bva = va.broadcast(IxDyn(&shape)).unwrap();
        let bvb = vb.broadcast(IxDyn(&shape)).unwrap();
        let out = match op {
            BinOp::Add => &bva + &bvb,
            BinOp::Sub => &bva - &bvb,
            BinOp::Mul => &bva * &bvb,
            BinOp::Div => &bva / &bvb,
        };
        let (ai, bi) = (a.0, b.0);
        self.push_op(
            out,
            &[a, b],
            Box::new(move |t, g| {
                let va = &t.nodes[ai].value;
                let vb = &t.nodes[bi].value;
                let mut grads = Vec::with_capacity(2);
                if t.nodes[ai].needs_grad {
                    let ga = match op {
                        BinOp::Add | BinOp::Sub => g.clone(),
                        BinOp::Mul => g * &vb.broadcast(g.raw_dim()).unwrap(),
                        BinOp::Div => g / &vb.broadcast(g.raw_dim()).unwrap(),
                    };
                    grads.push((ai, reduce_to_shape(ga, va.shape())));
                }
                if t.nodes[bi].needs_grad {
                    let gb = match op {
                        BinOp::Add => g.clone(),
                        BinOp::Sub => -g,
                        BinOp::Mul => g * &va.broadcast(g.raw_dim()).unwrap(),
                        BinOp::Div => {
                            let bb = vb.broadcast(g.raw_dim()).unwrap();
                            let ab = va.broadcast(g.raw_dim()).unwrap();
                            -(g * &ab) / &(&bb * &bb)
                        }
                    };
                    grads.push((bi, reduce_to_shape(gb, vb.shape())));
                }
                grads
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Div)
    }

    // ---- unary elementwise ----

    pub fn neg(&mut self, a: Var) -> Var {
        let out = -self.value(a);
        let ai = a.0;
        self.push_op(out, &[a], Box::new(move |_, g| vec![(ai, -g)]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ai = a.0;
        self.push_op(out, &[a], Box::new(move |_, g| vec![(ai, g * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let ai = a.0;
        self.push_op(out, &[a], Box::new(move |_, g| vec![(ai, g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let va = &t.nodes[ai].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(va).for_each(|gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![(ai, gx)]
            }),
        )
    }

    /// max(x, floor); gradient passes only where x > floor.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(floor));
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let va = &t.nodes[ai].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(va).for_each(|gi, &x| {
                    if x <= floor {
                        *gi = 0.0;
                    }
                });
                vec![(ai, gx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let ai = a.0;
        let oi = self.nodes.len();
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let s = &t.nodes[oi].value;
                let gx = g * &s.mapv(|y| y * (1.0 - y));
                vec![(ai, gx)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ai = a.0;
        let oi = self.nodes.len();
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let y = &t.nodes[oi].value;
                let gx = g * &y.mapv(|y| 1.0 - y * y);
                vec![(ai, gx)]
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ai = a.0;
        let oi = self.nodes.len();
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| vec![(ai, g * &t.nodes[oi].value)]),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| vec![(ai, g / &t.nodes[ai].value)]),
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let ai = a.0;
        let oi = self.nodes.len();
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let y = &t.nodes[oi].value;
                vec![(ai, g * &y.mapv(|y| 0.5 / y))]
            }),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| vec![(ai, g * &(&t.nodes[ai].value * 2.0))]),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let shape = t.nodes[ai].value.raw_dim();
                vec![(ai, ArrayD::from_elem(shape, g[IxDyn(&[])]))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.value(a).sum() / n as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let shape = t.nodes[ai].value.raw_dim();
                vec![(ai, ArrayD::from_elem(shape, g[IxDyn(&[])] / n as f64))]
            }),
        )
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keep: bool) -> Var {
        let mut out = self.value(a).sum_axis(Axis(axis));
        if keep {
            out = out.insert_axis(Axis(axis));
        }
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let shape = t.nodes[ai].value.raw_dim();
                let gk = if keep {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let gx = gk.broadcast(shape).unwrap().to_owned();
                vec![(ai, gx)]
            }),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keep: bool) -> Var {
        let n = self.value(a).shape()[axis];
        assert!(n > 0, "mean over empty axis");
        let s = self.sum_axis(a, axis, keep);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            va.shape(),
            shape
        );
        let out = as_standard(va)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let shape = t.nodes[ai].value.raw_dim();
                let gx = as_standard(g).into_shape_with_order(shape).expect("reshape grad");
                vec![(ai, gx)]
            }),
        )
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let out = as_standard(&self.value(a).view().permuted_axes(IxDyn(perm)));
        let ai = a.0;
        let perm_owned = perm.to_vec();
        self.push_op(
            out,
            &[a],
            Box::new(move |_, g| {
                let mut inv = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(ai, as_standard(&g.view().permuted_axes(IxDyn(&inv))))]
            }),
        )
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(a), shape))
            .to_owned();
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                vec![(ai, reduce_to_shape(g.clone(), t.nodes[ai].value.shape()))]
            }),
        )
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = as_standard(
            &self
                .value(a)
                .slice_axis(Axis(axis), Slice::from(start..start + len)),
        );
        let ai = a.0;
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let mut gx = ArrayD::zeros(t.nodes[ai].value.raw_dim());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![(ai, gx)]
            }),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis]).collect();
        self.push_op(
            out,
            parts,
            Box::new(move |t, g| {
                let mut out = Vec::new();
                let mut off = 0;
                for (&id, &sz) in ids.iter().zip(&sizes) {
                    if t.nodes[id].needs_grad {
                        let piece =
                            as_standard(&g.slice_axis(Axis(axis), Slice::from(off..off + sz)));
                        out.push((id, piece));
                    }
                    off += sz;
                }
                out
            }),
        )
    }

    // ---- softmax ----

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let mut out = self.value(a).to_owned();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in lane.iter_mut() {
                *e /= s;
            }
        }
        let ai = a.0;
        let oi = self.nodes.len();
        self.push_op(
            out,
            &[a],
            Box::new(move |t, g| {
                let s = &t.nodes[oi].value;
                let mut gx = ArrayD::zeros(s.raw_dim());
                Zip::from(gx.lanes_mut(Axis(axis)))
                    .and(s.lanes(Axis(axis)))
                    .and(g.lanes(Axis(axis)))
                    .for_each(|mut gxl, sl, gl| {
                        let dot: f64 = sl.iter().zip(gl.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut gxl).and(&sl).and(&gl).for_each(|o, &si, &gi| {
                            *o = si * (gi - dot);
                        });
                    });
                vec![(ai, gx)]
            }),
        )
    }

    // ---- matrix products ----

    /// 2-D matrix product `[m,k]·[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let vb = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims");
        let out = va.dot(&vb).into_dyn();
        let (ai, bi) = (a.0, b.0);
        self.push_op(
            out,
            &[a, b],
            Box::new(move |t, g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let va = t.nodes[ai].value.view().into_dimensionality::<Ix2>().unwrap();
                let vb = t.nodes[bi].value.view().into_dimensionality::<Ix2>().unwrap();
                let mut grads = Vec::with_capacity(2);
                if t.nodes[ai].needs_grad {
                    grads.push((ai, g2.dot(&vb.t()).into_dyn()));
                }
                if t.nodes[bi].needs_grad {
                    grads.push((bi, va.t().dot(&g2).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Batched matrix product `[B,m,k]·[B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let vb = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(va.dim().0, vb.dim().0, "bmm batch dims");
        assert_eq!(va.dim().2, vb.dim().1, "bmm inner dims");
        let (bsz, m, _) = va.dim();
        let n = vb.dim().2;
        let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
        for i in 0..bsz {
            let prod = va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let (ai, bi) = (a.0, b.0);
        self.push_op(
            out.into_dyn(),
            &[a, b],
            Box::new(move |t, g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let va = t.nodes[ai].value.view().into_dimensionality::<Ix3>().unwrap();
                let vb = t.nodes[bi].value.view().into_dimensionality::<Ix3>().unwrap();
                let bsz = g3.dim().0;
                let mut grads = Vec::with_capacity(2);
                if t.nodes[ai].needs_grad {
                    let mut ga = ndarray::Array3::<f64>::zeros(va.dim());
                    for i in 0..bsz {
                        let p = g3
                            .index_axis(Axis(0), i)
                            .dot(&vb.index_axis(Axis(0), i).t());
                        ga.index_axis_mut(Axis(0), i).assign(&p);
                    }
                    grads.push((ai, ga.into_dyn()));
                }
                if t.nodes[bi].needs_grad {
                    let mut gb = ndarray::Array3::<f64>::zeros(vb.dim());
                    for i in 0..bsz {
                        let p = va
                            .index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i));
                        gb.index_axis_mut(Axis(0), i).assign(&p);
                    }
                    grads.push((bi, gb.into_dyn()));
                }
                grads
            }),
        )
    }
}

fn as_standard<S>(a: &ndarray::ArrayBase<S, IxDyn>) -> Arr
where
    S: ndarray::Data<Elem = f64>,
{
    a.as_standard_layout().to_owned()
}

/// numpy-style shape broadcasting (align trailing axes).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || db == 1 {
            out[i] = da.max(db);
        } else if da == 1 {
            out[i] = db;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum a gradient over broadcasted axes so it matches `target` again.
fn reduce_to_shape(mut g: Arr, target: &[usize]) -> Arr {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &ts) in target.iter().enumerate() {
        if ts == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

/// Central-difference gradient of a scalar-valued function of one array;
/// the oracle every gradient check compares against.
pub fn numeric_grad(f: &dyn Fn(&Arr) -> f64, x: &Arr, eps: f64) -> Arr {
    let mut g = ArrayD::zeros(x.raw_dim());
    let xs: Vec<f64> = x.iter().cloned().collect();
    for i in 0..xs.len() {
        let mut plus = xs.clone();
        let mut minus = xs.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let xp = ArrayD::from_shape_vec(x.raw_dim(), plus).unwrap();
        let xm = ArrayD::from_shape_vec(x.raw_dim(), minus).unwrap();
        g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
    }
    g
}

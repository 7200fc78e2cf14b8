//! Parameter storage and small network building blocks.
//!
//! Parameters live in a `ParamSet` keyed by dotted names. Values are f64 for
//! the tape, but every write goes through an f32 snap so the in-memory state
//! is always exactly representable in the f32 checkpoint format: save, load
//! and re-save reproduce identical bytes, and a reloaded model evaluates
//! identically to the one that was saved.

use crate::rng::RngStream;
use crate::tape::{Arr, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;

/// Round every element to the nearest f32-representable value.
pub fn snap_f32(a: &mut Arr) {
    a.mapv_inplace(|x| x as f32 as f64);
}

#[derive(Default, Clone, Debug)]
pub struct ParamSet {
    params: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor, snapping it onto the f32 grid.
    pub fn insert(&mut self, name: &str, mut value: Arr) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        snap_f32(&mut value);
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Name-sorted iteration; this order is the contract for every pass over
    /// the parameters (taping, optimizer updates, checkpoint layout).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn from_pairs(pairs: Vec<(String, Arr)>) -> Self {
        let mut set = Self::new();
        for (name, value) in pairs {
            set.insert(&name, value);
        }
        set
    }

    // ---- init helpers; all draws come from the caller's stream in call order ----

    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit));
        self.insert(name, value);
    }

    pub fn add_linear(&mut self, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) {
        self.xavier(&format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])));
    }

    pub fn add_linear_nobias(&mut self, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) {
        self.xavier(&format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
    }

    pub fn add_layer_norm(&mut self, name: &str, d: usize) {
        self.insert(&format!("{name}.g"), ArrayD::ones(IxDyn(&[d])));
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[d])));
    }

    pub fn add_gru(&mut self, name: &str, d: usize, rng: &mut RngStream) {
        self.xavier(&format!("{name}.wi"), &[d, 3 * d], d, 3 * d, rng);
        self.xavier(&format!("{name}.wh"), &[d, 3 * d], d, 3 * d, rng);
        self.insert(&format!("{name}.bi"), ArrayD::zeros(IxDyn(&[3 * d])));
        self.insert(&format!("{name}.bh"), ArrayD::zeros(IxDyn(&[3 * d])));
    }

    pub fn add_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut RngStream) {
        self.xavier(
            &format!("{name}.w"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            c_out * k * k,
            rng,
        );
        self.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
    }
}

/// Parameters registered on a tape as differentiable leaves.
pub struct TapedParams {
    vars: BTreeMap<String, Var>,
}

impl TapedParams {
    /// Register every parameter as a leaf, in name order.
    pub fn leaves(tape: &mut Tape, set: &ParamSet) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in set.iter() {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        TapedParams { vars }
    }

    /// Register every parameter as a constant (no gradients tracked), for
    /// evaluation passes.
    pub fn constants(tape: &mut Tape, set: &ParamSet) -> Self {
        let mut vars = BTreeMap::new();
        for (name, value) in set.iter() {
            vars.insert(name.clone(), tape.constant(value.clone()));
        }
        TapedParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn linear(&self, name: &str) -> Linear {
        Linear {
            w: self.var(&format!("{name}.w")),
            b: self.vars.get(&format!("{name}.b")).copied(),
        }
    }

    pub fn layer_norm(&self, name: &str) -> LayerNorm {
        LayerNorm {
            g: self.var(&format!("{name}.g")),
            b: self.var(&format!("{name}.b")),
        }
    }

    pub fn gru(&self, name: &str) -> Gru {
        Gru {
            wi: self.var(&format!("{name}.wi")),
            wh: self.var(&format!("{name}.wh")),
            bi: self.var(&format!("{name}.bi")),
            bh: self.var(&format!("{name}.bh")),
        }
    }

    pub fn conv(&self, name: &str) -> (Var, Var) {
        (self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))
    }
}

/// Dense layer; weight is `[d_in, d_out]`, applied to the last axis.
/// The bias is optional so attention projections can stay purely linear.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let shape = t.shape(x).to_vec();
        let d_in = *shape.last().expect("linear input must have an axis");
        assert_eq!(d_in, t.shape(self.w)[0], "linear width mismatch");
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let x2 = t.reshape(x, &[lead, d_in]);
        let mut y2 = t.matmul(x2, self.w);
        if let Some(b) = self.b {
            y2 = t.add(y2, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = t.shape(self.w)[1];
        t.reshape(y2, &out_shape)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub g: Var,
    pub b: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let last = t.shape(x).len() - 1;
        let m = t.mean_axis(x, last, true);
        let c = t.sub(x, m);
        let c2 = t.square(c);
        let v = t.mean_axis(c2, last, true);
        let v = t.add_scalar(v, LAYER_NORM_EPS);
        let s = t.sqrt(v);
        let n = t.div(c, s);
        let scaled = t.mul(n, self.g);
        t.add(scaled, self.b)
    }
}

/// GRU cell; gate order inside the stacked weights is reset, update, candidate.
#[derive(Clone, Copy)]
pub struct Gru {
    pub wi: Var,
    pub wh: Var,
    pub bi: Var,
    pub bh: Var,
}

impl Gru {
    /// One step: `x` is the input `[n, d]`, `h` the previous state `[n, d]`.
    pub fn apply(&self, t: &mut Tape, x: Var, h: Var) -> Var {
        let d = t.shape(h)[1];
        let gi = t.matmul(x, self.wi);
        let gi = t.add(gi, self.bi);
        let gh = t.matmul(h, self.wh);
        let gh = t.add(gh, self.bh);
        let ir = t.narrow(gi, 1, 0, d);
        let iz = t.narrow(gi, 1, d, d);
        let inn = t.narrow(gi, 1, 2 * d, d);
        let hr = t.narrow(gh, 1, 0, d);
        let hz = t.narrow(gh, 1, d, d);
        let hn = t.narrow(gh, 1, 2 * d, d);
        let r_pre = t.add(ir, hr);
        let r = t.sigmoid(r_pre);
        let z_pre = t.add(iz, hz);
        let z = t.sigmoid(z_pre);
        let gated = t.mul(r, hn);
        let n_pre = t.add(inn, gated);
        let n = t.tanh(n_pre);
        // h' = (1 - z) * n + z * h
        let neg_z = t.scale(z, -1.0);
        let one_minus_z = t.add_scalar(neg_z, 1.0);
        let a = t.mul(one_minus_z, n);
        let b = t.mul(z, h);
        t.add(a, b)
    }
}

/// Normalized coordinate ramps for an `h`×`w` grid: per location
/// `(y, x, 1-y, 1-x)`, each in `[0, 1]`. Shape `[h·w, 4]`.
pub fn coord_grid(h: usize, w: usize) -> Array2<f64> {
    let mut grid = Array2::<f64>::zeros((h * w, 4));
    for i in 0..h {
        let y = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.5 };
        for j in 0..w {
            let x = if w > 1 { j as f64 / (w - 1) as f64 } else { 0.5 };
            let r = i * w + j;
            grid[[r, 0]] = y;
            grid[[r, 1]] = x;
            grid[[r, 2]] = 1.0 - y;
            grid[[r, 3]] = 1.0 - x;
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::{arr2, Axis, IxDyn};

    #[test]
    fn params_snap_to_f32() {
        let mut set = ParamSet::new();
        let v = ArrayD::from_elem(IxDyn(&[3]), 0.1f64);
        set.insert("p", v);
        for &x in set.get("p").iter() {
            assert_eq!(x, 0.1f32 as f64);
            assert_ne!(x, 0.1f64);
        }
    }

    #[test]
    fn init_is_deterministic_and_ordered() {
        let build = || {
            let mut rng = stream(7, Stream::ModelInit);
            let mut set = ParamSet::new();
            set.add_linear("a", 4, 3, &mut rng);
            set.add_gru("g", 5, &mut rng);
            set.add_conv("c", 2, 3, 3, &mut rng);
            set.add_layer_norm("n", 4);
            set
        };
        let s1 = build();
        let s2 = build();
        assert_eq!(s1.len(), s2.len());
        for ((n1, v1), (n2, v2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        let names: Vec<&String> = s1.iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn linear_applies_to_batched_input() {
        let mut rng = stream(8, Stream::ModelInit);
        let mut set = ParamSet::new();
        set.add_linear("l", 3, 2, &mut rng);
        let mut t = Tape::new();
        let p = TapedParams::constants(&mut t, &set);
        let lin = p.linear("l");
        let x = t.constant(ArrayD::from_elem(IxDyn(&[2, 4, 3]), 1.0));
        let y = lin.apply(&mut t, x);
        assert_eq!(t.shape(y), &[2, 4, 2]);
        // all rows equal because all inputs equal
        let v = t.value(y);
        let first = v.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
        for b in 0..2 {
            for n in 0..4 {
                let row = v.index_axis(Axis(0), b).index_axis(Axis(0), n).to_owned();
                assert_eq!(row, first);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let mut set = ParamSet::new();
        set.add_layer_norm("n", 4);
        let mut t = Tape::new();
        let p = TapedParams::constants(&mut t, &set);
        let ln = p.layer_norm("n");
        let x = t.constant(arr2(&[[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 20.0, 20.0]]).into_dyn());
        let y = ln.apply(&mut t, x);
        let v = t.value(y);
        for row in v.axis_iter(Axis(0)) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn gru_interpolates_between_state_and_candidate() {
        let mut rng = stream(9, Stream::ModelInit);
        let mut set = ParamSet::new();
        set.add_gru("g", 3, &mut rng);
        let mut t = Tape::new();
        let p = TapedParams::constants(&mut t, &set);
        let gru = p.gru("g");
        let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] + ix[1]) as f64 * 0.1));
        let h = t.constant(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5));
        let h2 = gru.apply(&mut t, x, h);
        assert_eq!(t.shape(h2), &[2, 3]);
        // new state stays inside the hull of (candidate in [-1,1], old state)
        for &v in t.value(h2).iter() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn gru_gradcheck_through_cell() {
        let mut rng = stream(10, Stream::ModelInit);
        let mut set = ParamSet::new();
        set.add_gru("g", 3, &mut rng);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| 0.3 * (ix[0] as f64 - ix[1] as f64));
        let h0 = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| 0.2 * (ix[0] + ix[1]) as f64);
        let run = |set: &ParamSet, x: &Arr| {
            let mut t = Tape::new();
            let p = TapedParams::constants(&mut t, set);
            let gru = p.gru("g");
            let xv = t.constant(x.clone());
            let hv = t.constant(h0.clone());
            let y = gru.apply(&mut t, xv, hv);
            let sq = t.square(y);
            let s = t.sum_all(sq);
            t.value(s)[IxDyn(&[])]
        };
        let mut t = Tape::new();
        let p = TapedParams::constants(&mut t, &set);
        let gru = p.gru("g");
        let xv = t.leaf(x0.clone());
        let hv = t.constant(h0.clone());
        let y = gru.apply(&mut t, xv, hv);
        let sq = t.square(y);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let analytic = grads.get(xv).unwrap();

        let mut numeric = ArrayD::zeros(x0.raw_dim());
        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[i] += eps;
            minus.as_slice_mut().unwrap()[i] -= eps;
            numeric.as_slice_mut().unwrap()[i] =
                (run(&set, &plus) - run(&set, &minus)) / (2.0 * eps);
        }
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn coord_grid_corners() {
        let g = coord_grid(4, 4);
        assert_eq!(g.shape(), &[16, 4]);
        assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(g.row(15).to_vec(), vec![1.0, 1.0, 0.0, 0.0]);
        for r in g.rows() {
            assert!((r[0] + r[2] - 1.0).abs() < 1e-12);
            assert!((r[1] + r[3] - 1.0).abs() < 1e-12);
        }
    }
}

//! Convolution and upsampling ops.
//!
//! conv2d lowers the whole batch to a single im2col matrix and runs one
//! matrix product, which is where nearly all the training time goes. The
//! column matrix is captured by the backward closure so the gradient pass
//! reuses it instead of rebuilding it.

use super::{Tape, Var};
use ndarray::{Array2, Array4, Ix4};

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub fn out_size(&self, in_size: usize) -> usize {
        assert!(
            in_size + 2 * self.pad >= self.kernel,
            "conv input {in_size} too small for kernel {} pad {}",
            self.kernel,
            self.pad
        );
        (in_size + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

impl Tape {
    /// 2-D convolution. `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin, k, k]`,
    /// output is `[B, Cout, Ho, Wo]`. Bias, if any, is added by the caller.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let vw = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, cin, h, wd) = vx.dim();
        let (cout, wcin, k, k2) = vw.dim();
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert_eq!(k, spec.kernel, "conv2d kernel/spec mismatch");
        let ho = spec.out_size(h);
        let wo = spec.out_size(wd);

        let col = im2col(&vx.to_owned(), spec, ho, wo);
        let w2 = vw.into_shape_with_order((cout, cin * k * k)).unwrap();
        // [B*Ho*Wo, Cout]
        let y2 = col.dot(&w2.t());
        let out = y2
            .into_shape_with_order((bsz, ho, wo, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let (xi, wi) = (x.0, w.0);
        self.push_op(
            out,
            &[x, w],
            Box::new(move |t, g| {
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .into_shape_with_order((bsz * ho * wo, cout))
                    .unwrap()
                    .to_owned();
                let mut grads = Vec::with_capacity(2);
                if t.nodes[wi].needs_grad {
                    let gw2 = g2.t().dot(&col);
                    let gw = gw2
                        .into_shape_with_order((cout, cin, k, k))
                        .unwrap()
                        .into_dyn();
                    grads.push((wi, gw));
                }
                if t.nodes[xi].needs_grad {
                    let w4 = t.nodes[wi].value.view().into_dimensionality::<Ix4>().unwrap();
                    let w2 = w4.into_shape_with_order((cout, cin * k * k)).unwrap();
                    let gcol = g2.dot(&w2);
                    let gx = col2im(&gcol, (bsz, cin, h, wd), spec, ho, wo);
                    grads.push((xi, gx.into_dyn()));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, c, h, w) = vx.dim();
        let mut out = Array4::<f64>::zeros((bsz, c, 2 * h, 2 * w));
        for b in 0..bsz {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = vx[[b, ci, i, j]];
                        out[[b, ci, 2 * i, 2 * j]] = v;
                        out[[b, ci, 2 * i, 2 * j + 1]] = v;
                        out[[b, ci, 2 * i + 1, 2 * j]] = v;
                        out[[b, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let xi = x.0;
        self.push_op(
            out.into_dyn(),
            &[x],
            Box::new(move |_, g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = Array4::<f64>::zeros((bsz, c, h, w));
                for b in 0..bsz {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[[b, ci, i, j]] = g4[[b, ci, 2 * i, 2 * j]]
                                    + g4[[b, ci, 2 * i, 2 * j + 1]]
                                    + g4[[b, ci, 2 * i + 1, 2 * j]]
                                    + g4[[b, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![(xi, gx.into_dyn())]
            }),
        )
    }
}

/// Lower `[B, Cin, H, W]` to `[B*Ho*Wo, Cin*k*k]`; out-of-image taps stay zero.
fn im2col(x4: &Array4<f64>, spec: Conv2dSpec, ho: usize, wo: usize) -> Array2<f64> {
    let (bsz, cin, h, w) = x4.dim();
    let k = spec.kernel;
    let ckk = cin * k * k;
    let mut col = Array2::<f64>::zeros((bsz * ho * wo, ckk));
    let xs = x4.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for b in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * ckk;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = ((b * cin + ci) * h + iy as usize) * w;
                        let crow = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[crow + kx] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col`: scatter-add columns back into image layout.
fn col2im(
    gcol: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (bsz, cin, h, w) = dims;
    let k = spec.kernel;
    let ckk = cin * k * k;
    let mut gx = Array4::<f64>::zeros((bsz, cin, h, w));
    let gs = gcol.as_slice().unwrap();
    let out = gx.as_slice_mut().unwrap();
    for b in 0..bsz {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * ckk;
                for ci in 0..cin {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = ((b * cin + ci) * h + iy as usize) * w;
                        let crow = row + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[xrow + ix as usize] += gs[crow + kx];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::super::numeric_grad;
    use super::super::Arr;
    use super::*;
    use ndarray::IxDyn;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::GradCheck);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn conv_scalar(x: &Arr, w: &Arr, spec: Conv2dSpec) -> f64 {
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let vw = t.leaf(w.clone());
        let y = t.conv2d(vx, vw, spec);
        let sq = t.square(y);
        let s = t.sum_all(sq);
        t.value(s)[IxDyn(&[])]
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 batch, tiny kernel, checked against a hand loop
        let x = rand_arr(&[1, 2, 4, 4], 20);
        let w = rand_arr(&[3, 2, 3, 3], 21);
        let spec = Conv2dSpec { kernel: 3, stride: 1, pad: 1 };
        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let vw = t.constant(w.clone());
        let y = t.conv2d(vx, vw, spec);
        let yv = t.value(y);
        for co in 0..3 {
            for oy in 0..4usize {
                for ox in 0..4usize {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || iy >= 4 || ix < 0 || ix >= 4 {
                                    continue;
                                }
                                acc += x[IxDyn(&[0, ci, iy as usize, ix as usize])]
                                    * w[IxDyn(&[co, ci, ky, kx])];
                            }
                        }
                    }
                    let got = yv[IxDyn(&[0, co, oy, ox])];
                    assert!((got - acc).abs() < 1e-12, "({co},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv2d_grads_stride1() {
        let x = rand_arr(&[2, 2, 5, 5], 22);
        let w = rand_arr(&[3, 2, 3, 3], 23);
        let spec = Conv2dSpec { kernel: 3, stride: 1, pad: 1 };
        run_conv_gradcheck(x, w, spec);
    }

    #[test]
    fn conv2d_grads_stride2_no_pad() {
        let x = rand_arr(&[2, 3, 6, 6], 24);
        let w = rand_arr(&[2, 3, 2, 2], 25);
        let spec = Conv2dSpec { kernel: 2, stride: 2, pad: 0 };
        run_conv_gradcheck(x, w, spec);
    }

    fn run_conv_gradcheck(x: Arr, w: Arr, spec: Conv2dSpec) {
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let vw = t.leaf(w.clone());
        let y = t.conv2d(vx, vw, spec);
        let sq = t.square(y);
        let s = t.sum_all(sq);
        let grads = t.backward(s);

        let fx = {
            let w = w.clone();
            move |xv: &Arr| conv_scalar(xv, &w, spec)
        };
        let fw = {
            let x = x.clone();
            move |wv: &Arr| conv_scalar(&x, wv, spec)
        };
        let ngx = numeric_grad(&fx, &x, 1e-5);
        let ngw = numeric_grad(&fw, &w, 1e-5);
        for (a, n) in grads.get(vx).unwrap().iter().zip(ngx.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "gx {a} vs {n}");
        }
        for (a, n) in grads.get(vw).unwrap().iter().zip(ngw.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "gw {a} vs {n}");
        }
    }

    #[test]
    fn upsample2x_forward_and_grad() {
        let x = rand_arr(&[1, 2, 3, 3], 26);
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let y = t.upsample2x(vx);
        assert_eq!(t.shape(y), &[1, 2, 6, 6]);
        for ci in 0..2 {
            for i in 0..6usize {
                for j in 0..6usize {
                    assert_eq!(
                        t.value(y)[IxDyn(&[0, ci, i, j])],
                        x[IxDyn(&[0, ci, i / 2, j / 2])]
                    );
                }
            }
        }
        let sq = t.square(y);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let f = |xv: &Arr| {
            let mut t = Tape::new();
            let vx = t.leaf(xv.clone());
            let y = t.upsample2x(vx);
            let sq = t.square(y);
            let s = t.sum_all(sq);
            t.value(s)[IxDyn(&[])]
        };
        let ng = numeric_grad(&f, &x, 1e-6);
        for (a, n) in grads.get(vx).unwrap().iter().zip(ng.iter()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }
}

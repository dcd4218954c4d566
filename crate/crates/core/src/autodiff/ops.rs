//! Forward kernels and their exact adjoints.
//!
//! Layouts are channel-last: images are `H×W×C`, kernels `k×k×Cin×Cout`.
//! Convolutions are same-size with `(k-1)/2` zero padding.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, ProbabilityMap, Tensor};

fn conv_shapes(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<ConvShape> {
    let (h, w, cin) = input.hwc()?;
    let &[k, k2, kcin, cout] = kernel.dims() else {
        return Err(Error::Config(format!(
            "kernel must be k×k×Cin×Cout, got {:?}",
            kernel.dims()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::Config(format!("kernel must be square with odd size, got {k}×{k2}")));
    }
    if kcin != cin {
        return Err(Error::Config(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if bias.dims() != [cout] {
        return Err(Error::Config(format!(
            "bias must have {cout} entries, got dims {:?}",
            bias.dims()
        )));
    }
    Ok(ConvShape { h, w, cin, cout, k })
}

#[derive(Clone, Copy)]
struct ConvShape {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl ConvShape {
    /// Input coordinate hit by output `i` and kernel tap `u`, if inside the image.
    #[inline]
    fn source(i: usize, u: usize, r: usize, extent: usize) -> Option<usize> {
        (i + u).checked_sub(r).filter(|&s| s < extent)
    }
}

/// `out[i,j,o] = bias[o] + Σ input[i+u-r, j+v-r, c] · kernel[u,v,c,o]`, zero outside.
pub fn conv2d_fwd(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = conv_shapes(input, kernel, bias)?;
    let r = s.k / 2;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; s.h * s.w * s.cout];
    for i in 0..s.h {
        for j in 0..s.w {
            let acc = &mut out[(i * s.w + j) * s.cout..][..s.cout];
            acc.copy_from_slice(bias.data());
            for u in 0..s.k {
                let Some(ii) = ConvShape::source(i, u, r, s.h) else {
                    continue;
                };
                for v in 0..s.k {
                    let Some(jj) = ConvShape::source(j, v, r, s.w) else {
                        continue;
                    };
                    let xin = &x[(ii * s.w + jj) * s.cin..][..s.cin];
                    let taps = &kd[(u * s.k + v) * s.cin * s.cout..][..s.cin * s.cout];
                    for (&xv, krow) in xin.iter().zip(taps.chunks_exact(s.cout)) {
                        if xv == 0.0 {
                            continue;
                        }
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![s.h, s.w, s.cout], out)
}

/// Adjoints of [`conv2d_fwd`]. Each part is only computed when requested.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_bwd(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads> {
    let s = conv_shapes(input, kernel, bias)?;
    if grad_out.dims() != [s.h, s.w, s.cout] {
        return Err(Error::Internal(format!(
            "conv gradient has dims {:?}, forward output was {:?}",
            grad_out.dims(),
            [s.h, s.w, s.cout]
        )));
    }
    let r = s.k / 2;
    let x = input.data();
    let g = grad_out.data();

    let grad_input = want_input.then(|| {
        // kernel transposed to k×k×Cout×Cin so the inner update is contiguous in Cin
        let kd = kernel.data();
        let mut kt = vec![0.0f32; kd.len()];
        for tap in 0..s.k * s.k {
            for c in 0..s.cin {
                for o in 0..s.cout {
                    kt[(tap * s.cout + o) * s.cin + c] = kd[(tap * s.cin + c) * s.cout + o];
                }
            }
        }
        let mut gin = vec![0.0f32; x.len()];
        for i in 0..s.h {
            for j in 0..s.w {
                let gout = &g[(i * s.w + j) * s.cout..][..s.cout];
                for u in 0..s.k {
                    let Some(ii) = ConvShape::source(i, u, r, s.h) else {
                        continue;
                    };
                    for v in 0..s.k {
                        let Some(jj) = ConvShape::source(j, v, r, s.w) else {
                            continue;
                        };
                        let dst = &mut gin[(ii * s.w + jj) * s.cin..][..s.cin];
                        let taps = &kt[(u * s.k + v) * s.cout * s.cin..][..s.cout * s.cin];
                        for (&gv, krow) in gout.iter().zip(taps.chunks_exact(s.cin)) {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &kv) in dst.iter_mut().zip(krow) {
                                *d += gv * kv;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(input.dims().to_vec(), gin)
    });

    let (grad_kernel, grad_bias) = if want_params {
        let mut gk = vec![0.0f32; kernel.len()];
        let mut gb = vec![0.0f32; s.cout];
        for i in 0..s.h {
            for j in 0..s.w {
                let gout = &g[(i * s.w + j) * s.cout..][..s.cout];
                for (b, &gv) in gb.iter_mut().zip(gout) {
                    *b += gv;
                }
                for u in 0..s.k {
                    let Some(ii) = ConvShape::source(i, u, r, s.h) else {
                        continue;
                    };
                    for v in 0..s.k {
                        let Some(jj) = ConvShape::source(j, v, r, s.w) else {
                            continue;
                        };
                        let xin = &x[(ii * s.w + jj) * s.cin..][..s.cin];
                        let taps = &mut gk[(u * s.k + v) * s.cin * s.cout..][..s.cin * s.cout];
                        for (&xv, krow) in xin.iter().zip(taps.chunks_exact_mut(s.cout)) {
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in krow.iter_mut().zip(gout) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        (
            Some(Tensor::new(kernel.dims().to_vec(), gk)?),
            Some(Tensor::new(vec![s.cout], gb)?),
        )
    } else {
        (None, None)
    };

    Ok(ConvGrads {
        input: grad_input.transpose()?,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

pub fn relu_fwd(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.dims().to_vec(), data).expect("same dims")
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_bwd(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if !input.same_shape(grad_out) {
        return Err(Error::Internal("relu gradient shape mismatch".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// Per-pixel softmax over the class axis, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<ProbabilityMap> {
    let (h, w, c) = logits.hwc()?;
    let mut probs = vec![0.0f32; h * w * c];
    let mut exps = vec![0.0f64; c];
    for (row, prow) in logits.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (e, &l) in exps.iter_mut().zip(row) {
            *e = f64::from(l - max).exp();
            sum += *e;
        }
        for (p, e) in prow.iter_mut().zip(&exps) {
            *p = (e / sum) as f32;
        }
    }
    Ok(ProbabilityMap::from_softmax(Tensor::new(vec![h, w, c], probs)?))
}

/// Result of the weighted per-pixel softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct SoftmaxCe {
    /// `(1/|I|) Σ w_ij · CE_ij`
    pub loss: f64,
    pub probs: ProbabilityMap,
    /// `(softmax − onehot) · w_ij / |I|`
    pub grad_logits: Tensor,
}

pub fn softmax_ce(logits: &Tensor, target: &LabelMap, weights: &Tensor) -> Result<SoftmaxCe> {
    let (h, w, c) = logits.hwc()?;
    if target.height() != h || target.width() != w {
        return Err(Error::Config(format!(
            "target is {}×{}, logits are {h}×{w}",
            target.height(),
            target.width()
        )));
    }
    if weights.dims() != [h, w] {
        return Err(Error::Config(format!(
            "pixel weights must be {h}×{w}, got {:?}",
            weights.dims()
        )));
    }
    if let Some(bad) = weights.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("pixel weight {bad} is not a finite non-negative value")));
    }
    target.check_classes(c)?;

    let n = (h * w) as f64;
    let mut probs = vec![0.0f32; h * w * c];
    let mut grad = vec![0.0f32; h * w * c];
    let mut loss = 0.0f64;
    let mut exps = vec![0.0f64; c];
    for (px, ((row, prow), grow)) in logits
        .data()
        .chunks_exact(c)
        .zip(probs.chunks_exact_mut(c))
        .zip(grad.chunks_exact_mut(c))
        .enumerate()
    {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (e, &l) in exps.iter_mut().zip(row) {
            *e = f64::from(l - max).exp();
            sum += *e;
        }
        let y = usize::from(target.data()[px]);
        let wt = f64::from(weights.data()[px]);
        let scale = wt / n;
        for (k, (p, gr)) in prow.iter_mut().zip(grow.iter_mut()).enumerate() {
            let pk = exps[k] / sum;
            *p = pk as f32;
            let onehot = if k == y { 1.0 } else { 0.0 };
            *gr = ((pk - onehot) * scale) as f32;
        }
        if wt != 0.0 {
            loss += wt * (sum.ln() - f64::from(row[y] - max));
        }
    }
    Ok(SoftmaxCe {
        loss: loss / n,
        probs: ProbabilityMap::from_softmax(Tensor::new(vec![h, w, c], probs)?),
        grad_logits: Tensor::new(vec![h, w, c], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: Vec<usize>, lo: f32, hi: f32) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Direct `f64` evaluation of the convolution sum, independent of the kernel loops above.
    fn conv_oracle(x: &[f64], dims: [usize; 3], kern: &[f64], k: usize, cout: usize, b: &[f64]) -> Vec<f64> {
        let [h, w, cin] = dims;
        let r = k as isize / 2;
        let mut out = vec![0.0; h * w * cout];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for o in 0..cout {
                    let mut s = b[o];
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let (ii, jj) = (i + u - r, j + v - r);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let xi = (ii as usize * w + jj as usize) * cin + c;
                                let ki = ((u as usize * k + v as usize) * cin + c) * cout + o;
                                s += x[xi] * kern[ki];
                            }
                        }
                    }
                    out[(i as usize * w + j as usize) * cout + o] = s;
                }
            }
        }
        out
    }

    fn to64(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| f64::from(v)).collect()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new(vec![2, 3, 1], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_fwd(&x, &k, &b).unwrap();
        assert_eq!(y.data(), x.data());

        let g = Tensor::new(vec![2, 3, 1], vec![0.5, 1.5, -1.0, 2.0, 0.0, 3.0]).unwrap();
        let grads = conv2d_bwd(&x, &k, &b, &g, true, true).unwrap();
        assert_eq!(grads.input.unwrap().data(), g.data());
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::zeros(vec![4, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_tensor(&mut rng, vec![3, 3, 2, 3], -1.0, 1.0);
        let b = Tensor::new(vec![3], vec![0.25, -1.0, 2.0]).unwrap();
        let y = conv2d_fwd(&x, &k, &b).unwrap();
        for px in y.data().chunks_exact(3) {
            assert_eq!(px, b.data());
        }
    }

    #[test]
    fn ones_input_ones_kernel_counts_neighbours() {
        let x = Tensor::full(vec![3, 3, 1], 1.0);
        let k = Tensor::full(vec![3, 3, 1, 1], 1.0);
        let y = conv2d_fwd(&x, &k, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, vec![6, 5, 3], -2.0, 2.0);
        let k = random_tensor(&mut rng, vec![3, 3, 3, 4], -1.0, 1.0);
        let b = random_tensor(&mut rng, vec![4], -1.0, 1.0);
        let y = conv2d_fwd(&x, &k, &b).unwrap();
        let want = conv_oracle(&to64(&x), [6, 5, 3], &to64(&k), 3, 4, &to64(&b));
        for (a, e) in y.data().iter().zip(&want) {
            assert!((f64::from(*a) - e).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let x = Tensor::zeros(vec![4, 4, 2]);
        let k = Tensor::zeros(vec![3, 3, 3, 1]);
        assert!(matches!(conv2d_fwd(&x, &k, &Tensor::zeros(vec![1])), Err(Error::Config(_))));
        let even = Tensor::zeros(vec![2, 2, 2, 1]);
        assert!(conv2d_fwd(&x, &even, &Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn conv_bwd_rejects_bad_grad_shape() {
        let x = Tensor::zeros(vec![4, 4, 1]);
        let k = Tensor::zeros(vec![1, 1, 1, 1]);
        let g = Tensor::zeros(vec![4, 3, 1]);
        assert!(matches!(
            conv2d_bwd(&x, &k, &Tensor::zeros(vec![1]), &g, true, true),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn bias_gradient_sums_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![4, 4, 2], -1.0, 1.0);
        let k = random_tensor(&mut rng, vec![3, 3, 2, 3], -1.0, 1.0);
        let b = Tensor::zeros(vec![3]);
        let g = random_tensor(&mut rng, vec![4, 4, 3], -1.0, 1.0);
        let grads = conv2d_bwd(&x, &k, &b, &g, false, true).unwrap();
        let gb = grads.bias.unwrap();
        for o in 0..3 {
            let want: f32 = g.data().chunks_exact(3).map(|px| px[o]).sum();
            assert!((gb.data()[o] - want).abs() < 1e-5);
        }
        assert!(grads.input.is_none());
    }

    /// Central differences (h = 0.1 on the 0–255 scale) of the scalar
    /// `Σ r · conv(x)` evaluated in f64, against the analytic adjoints.
    #[test]
    fn conv_bwd_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_tensor(&mut rng, vec![5, 5, 3], 0.0, 255.0);
        let k = random_tensor(&mut rng, vec![3, 3, 3, 2], -0.1, 0.1);
        let b = random_tensor(&mut rng, vec![2], -1.0, 1.0);
        let r = random_tensor(&mut rng, vec![5, 5, 2], -1.0, 1.0);
        let grads = conv2d_bwd(&x, &k, &b, &r, true, true).unwrap();

        let (x64, k64, b64, r64) = (to64(&x), to64(&k), to64(&b), to64(&r));
        let objective = |xv: &[f64], kv: &[f64]| -> f64 {
            conv_oracle(xv, [5, 5, 3], kv, 3, 2, &b64)
                .iter()
                .zip(&r64)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 0.1;
        let rel = |a: f64, e: f64| (a - e).abs() / e.abs().max(1e-12);
        for idx in 0..x64.len() {
            let mut p = x64.clone();
            p[idx] += h;
            let mut m = x64.clone();
            m[idx] -= h;
            let fd = (objective(&p, &k64) - objective(&m, &k64)) / (2.0 * h);
            let an = f64::from(grads.input.as_ref().unwrap().data()[idx]);
            assert!(rel(an, fd) < 1e-2 || (an - fd).abs() < 1e-6, "input {idx}: {an} vs {fd}");
        }
        for idx in 0..k64.len() {
            let mut p = k64.clone();
            p[idx] += h;
            let mut m = k64.clone();
            m[idx] -= h;
            let fd = (objective(&x64, &p) - objective(&x64, &m)) / (2.0 * h);
            let an = f64::from(grads.kernel.as_ref().unwrap().data()[idx]);
            assert!(rel(an, fd) < 1e-2, "kernel {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::new(vec![3], vec![-1.0, -2.0, -0.5]).unwrap();
        assert!(relu_fwd(&neg).data().iter().all(|&v| v == 0.0));
        let g = Tensor::full(vec![3], 5.0);
        assert!(relu_bwd(&neg, &g).unwrap().data().iter().all(|&v| v == 0.0));

        let pos = Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(relu_fwd(&pos).data(), pos.data());
        assert_eq!(relu_bwd(&pos, &g).unwrap().data(), g.data());

        let mixed = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_bwd(&mixed, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(vec![2, 2, 4]);
        for y in 0..4u8 {
            let t = LabelMap::filled(2, 2, y);
            let out = softmax_ce(&logits, &t, &Tensor::full(vec![2, 2], 1.0)).unwrap();
            assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_tensor(&mut rng, vec![3, 3, 3], -5.0, 5.0);
        let t = LabelMap::filled(3, 3, 2);
        let out = softmax_ce(&logits, &t, &Tensor::zeros(vec![3, 3])).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_pixel_adjoint() {
        let logits = Tensor::zeros(vec![1, 1, 2]);
        let out = softmax_ce(&logits, &LabelMap::filled(1, 1, 0), &Tensor::full(vec![1, 1], 1.0)).unwrap();
        assert_eq!(out.grad_logits.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_out_of_range_target() {
        let logits = Tensor::zeros(vec![1, 1, 2]);
        let res = softmax_ce(&logits, &LabelMap::filled(1, 1, 2), &Tensor::full(vec![1, 1], 1.0));
        assert!(matches!(res, Err(Error::Input(_))));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let logits = Tensor::new(vec![1, 1, 3], vec![1000.0, 999.0, -1000.0]).unwrap();
        let out = softmax_ce(&logits, &LabelMap::filled(1, 1, 1), &Tensor::full(vec![1, 1], 1.0)).unwrap();
        assert!(out.loss.is_finite());
        assert!((out.loss - ((1.0 + (-1f64).exp()).ln() + 1.0)).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f32..30.0, 5 * 4)) {
            let logits = Tensor::new(vec![1, 5, 4], vals).unwrap();
            let out = softmax_ce(&logits, &LabelMap::filled(1, 5, 0), &Tensor::full(vec![1, 5], 1.0)).unwrap();
            for row in out.probs.rows() {
                let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                proptest::prop_assert!((s - 1.0).abs() <= 1e-6);
                proptest::prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }
}

//! Per-channel batch normalization over NCHW tensors.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array4, Axis, Ix1};
use rand::Rng;

use super::{init_normal, Param, Scalar};

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub ch: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    cache: Option<(Array4<F>, Array1<F>)>, // normalized input, inverse std
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(ch: usize, rng: &mut impl Rng) -> Self {
        let gamma = Param::new(init_normal(&[ch], 1.0, 0.02, rng));
        let beta = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[ch])));
        Self {
            ch,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta,
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.ch, "batchnorm channel mismatch");
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let eps = F::from_f64(self.eps);
        let mut out = x.clone();
        out.axis_iter_mut(Axis(1))
            .into_par_iter()
            .enumerate()
            .for_each(|(ci, mut plane)| {
                let inv = (self.running_var[ci] + eps).sqrt().recip();
                let mu = self.running_mean[ci];
                let g = gamma[ci];
                let b = beta[ci];
                plane.mapv_inplace(|v| (v - mu) * inv * g + b);
            });
        out
    }

    pub fn forward_train(&mut self, x: &Array4<F>, update_running: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.ch, "batchnorm channel mismatch");
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let m = (n * h * w) as f64;
        let eps = F::from_f64(self.eps);
        let mut xhat = x.clone();
        let mut invstd = Array1::zeros(c);
        let mut batch_mean = Array1::zeros(c);
        let mut batch_var = Array1::zeros(c);
        ndarray::Zip::from(xhat.axis_iter_mut(Axis(1)))
            .and(&mut invstd)
            .and(&mut batch_mean)
            .and(&mut batch_var)
            .par_for_each(|mut plane, inv, bm, bv| {
                let mut sum = F::zero();
                for v in plane.iter() {
                    sum = sum + *v;
                }
                let mu = sum / F::from_f64(m);
                let mut var = F::zero();
                for v in plane.iter() {
                    let d = *v - mu;
                    var = var + d * d;
                }
                let var = var / F::from_f64(m);
                let istd = (var + eps).sqrt().recip();
                plane.mapv_inplace(|v| (v - mu) * istd);
                *inv = istd;
                *bm = mu;
                *bv = var;
            });
        if update_running {
            let mom = F::from_f64(self.momentum);
            let keep = F::one() - mom;
            // PyTorch convention: running variance uses the unbiased
            // estimator.
            let unbias = if m > 1.0 {
                F::from_f64(m / (m - 1.0))
            } else {
                F::one()
            };
            for ci in 0..c {
                self.running_mean[ci] = keep * self.running_mean[ci] + mom * batch_mean[ci];
                self.running_var[ci] =
                    keep * self.running_var[ci] + mom * batch_var[ci] * unbias;
            }
        }
        let mut out = xhat.clone();
        out.axis_iter_mut(Axis(1))
            .into_par_iter()
            .enumerate()
            .for_each(|(ci, mut plane)| {
                let g = gamma[ci];
                let b = beta[ci];
                plane.mapv_inplace(|v| v * g + b);
            });
        self.cache = Some((xhat, invstd));
        out
    }

    pub fn backward(&mut self, gout: &Array4<F>, acc_params: bool) -> Array4<F> {
        let (xhat, invstd) = self
            .cache
            .as_ref()
            .expect("forward(train) must precede backward");
        let (n, c, h, w) = gout.dim();
        let m = F::from_f64((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dx = gout.clone();
        ndarray::Zip::from(dx.axis_iter_mut(Axis(1)))
            .and(xhat.axis_iter(Axis(1)))
            .and(&mut dgamma)
            .and(&mut dbeta)
            .and(&invstd.view())
            .and(&gamma)
            .par_for_each(|mut dplane, xplane, dg, db, istd, g| {
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                ndarray::Zip::from(&dplane).and(&xplane).for_each(|dy, xh| {
                    sum_dy = sum_dy + *dy;
                    sum_dy_xhat = sum_dy_xhat + *dy * *xh;
                });
                *dg = sum_dy_xhat;
                *db = sum_dy;
                let scale = *g * *istd;
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                ndarray::Zip::from(&mut dplane).and(&xplane).for_each(|dy, xh| {
                    *dy = scale * (*dy - mean_dy - *xh * mean_dy_xhat);
                });
            });

        if acc_params {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut bg = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gg += &dgamma;
            bg += &dbeta;
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, c, h, w), || rng.random::<f64>() * 3.0 - 1.0)
    }

    #[test]
    fn train_forward_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm2d::<f64>::new(3, &mut rng);
        bn.gamma.value.fill(1.0);
        bn.beta.value.fill(0.0);
        let x = rand4(4, 3, 5, 5, 2);
        let y = bn.forward_train(&x, true);
        for ci in 0..3 {
            let plane = y.index_axis(Axis(1), ci);
            let m: f64 = plane.iter().sum::<f64>() / plane.len() as f64;
            let v: f64 = plane.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / plane.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::<f64>::new(2, &mut rng);
        let x = rand4(3, 2, 4, 4, 5);
        let y = bn.forward_train(&x, false);
        // loss = sum(y * t) with a fixed random t, so dL/dy = t
        let t = rand4(3, 2, 4, 4, 99);
        let dx = bn.backward(&t, true);

        let h = 1e-6;
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| -> f64 {
            let y = bn.forward_train(x, false);
            y.iter().zip(t.iter()).map(|(a, b)| a * b).sum()
        };
        let _ = y;
        for idx in [0usize, 1] {
            let mut bp = bn.clone();
            let mut bm = bn.clone();
            bp.gamma.value.as_slice_mut().unwrap()[idx] += h;
            bm.gamma.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&mut bp, &x) - loss(&mut bm, &x)) / (2.0 * h);
            let an = bn.gamma.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "gamma[{idx}] fd={fd} an={an}");

            let mut bp = bn.clone();
            let mut bm = bn.clone();
            bp.beta.value.as_slice_mut().unwrap()[idx] += h;
            bm.beta.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&mut bp, &x) - loss(&mut bm, &x)) / (2.0 * h);
            let an = bn.beta.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "beta[{idx}] fd={fd} an={an}");
        }
        for idx in [0usize, 17, 40, 95] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let mut b = bn.clone();
            let fd = (loss(&mut b, &xp) - loss(&mut b, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1e-3) < 1e-5, "x[{idx}] fd={fd} an={an}");
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bn = BatchNorm2d::<f64>::new(1, &mut rng);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        bn.gamma.value.fill(1.0);
        bn.beta.value.fill(0.5);
        let x = Array4::from_elem((1, 1, 2, 2), 4.0);
        let y = bn.forward_eval(&x);
        // (4-2)/sqrt(4+eps) + 0.5 ~ 1.4999...
        assert!((y[[0, 0, 0, 0]] - 1.5).abs() < 1e-5);
    }
}

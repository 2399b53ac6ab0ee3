//! Fully-connected layer on (batch, features) matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Ix1, Ix2};
use rand::Rng;

use super::{init_normal, Param, Scalar};

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param<F>, // (out_dim, in_dim)
    pub bias: Param<F>,   // (out_dim)
    input_cache: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        let weight = Param::new(init_normal(&[out_dim, in_dim], 0.0, init_std, rng));
        let bias = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_dim])));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
            input_cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let (n, d) = x.dim();
        assert_eq!(d, self.in_dim, "linear input dim mismatch");
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array2::zeros((n, self.out_dim));
        general_mat_mul(F::one(), x, &wmat.t(), F::zero(), &mut out);
        for mut row in out.outer_iter_mut() {
            row += &bias;
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array2<F>) -> Array2<F> {
        let out = self.forward_eval(x);
        self.input_cache = Some(x.clone());
        out
    }

    pub fn backward(
        &mut self,
        gout: &Array2<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array2<F>> {
        let x = self
            .input_cache
            .as_ref()
            .expect("forward(train=true) must precede backward");
        if acc_params {
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(F::one(), &gout.t(), &x.view(), F::one(), &mut wg);
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let db: Array1<F> = gout.sum_axis(ndarray::Axis(0));
            bg += &db;
        }
        if !want_input_grad {
            return None;
        }
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx = Array2::zeros(x.raw_dim());
        general_mat_mul(F::one(), gout, &wmat, F::zero(), &mut dx);
        Some(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input_cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(3, 2, 0.5, &mut rng);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = lin.forward_eval(&x);
        let w = lin.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = lin.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for o in 0..2 {
            let want: f64 = (0..3).map(|i| x[[0, i]] * w[[o, i]]).sum::<f64>() + b[o];
            assert!((y[[0, o]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::new(4, 3, 0.3, &mut rng);
        let x = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            Array2::from_shape_simple_fn((2, 4), || r.random::<f64>() - 0.5)
        };
        let y = lin.forward_train(&x);
        let dx = lin.backward(&y.clone(), true, true).unwrap();

        let h = 1e-6;
        let loss = |l: &mut Linear<f64>, x: &Array2<f64>| -> f64 {
            let y = l.forward_eval(x);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        for idx in [0usize, 5, 11] {
            let mut lp = lin.clone();
            let mut lm = lin.clone();
            lp.weight.value.as_slice_mut().unwrap()[idx] += h;
            lm.weight.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&mut lp, &x) - loss(&mut lm, &x)) / (2.0 * h);
            let an = lin.weight.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6);
        }
        for idx in [0usize, 3, 7] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let mut l = lin.clone();
            let fd = (loss(&mut l, &xp) - loss(&mut l, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }
}

//! Minimal neural-network layers with explicit forward/backward passes.
//!
//! Everything is generic over the element type so the same layer code runs
//! in `f32` for training speed and in `f64` for finite-difference gradient
//! verification. Parallel sections are structured so that every output
//! element is produced by exactly one task with a fixed accumulation order,
//! which keeps results bitwise reproducible for a given thread-pool size.

pub mod batchnorm;
pub mod conv;
pub mod linear;

use ndarray::{ArrayD, ArrayViewMutD, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, ConvTranspose2d};
pub use linear::Linear;

/// Element type for all tensors: `f32` or `f64`.
pub trait Scalar: NdFloat + 'static {
    /// Bytes per element; doubles as the checkpoint dtype tag.
    const BYTE_WIDTH: u8;

    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite cast")
    }
    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("finite cast")
    }
    /// Exact little-endian serialization (bitwise, no precision change).
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTE_WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTE_WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A learnable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub adam_m: ArrayD<F>,
    pub adam_v: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let adam_m = ArrayD::zeros(value.raw_dim());
        let adam_v = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            adam_m,
            adam_v,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Callback used to walk every parameter of a module tree. Names are
/// slash-free dotted paths like `gen.enc2.conv.weight`.
pub type ParamFn<'a, F> = dyn FnMut(String, &mut Param<F>) + 'a;

/// Callback used to walk non-learnable state tensors (batch-norm running
/// statistics).
pub type BufferFn<'a, F> = dyn FnMut(String, ArrayViewMutD<'_, F>) + 'a;

/// Draws a tensor with i.i.d. normal entries; sampling happens in `f64` so
/// the stream of random draws is identical for every element type.
pub fn init_normal<F: Scalar>(
    shape: &[usize],
    mean: f64,
    std: f64,
    rng: &mut impl Rng,
) -> ArrayD<F> {
    let dist = Normal::new(mean, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || F::from_f64(dist.sample(rng)))
}

/// Activation applied at the end of a network stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Identity,
}

/// Negative slope for every LeakyReLU in the system.
pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    /// Applies the activation in place. Both LeakyReLU and sigmoid have
    /// derivatives expressible through their outputs, so the backward pass
    /// only needs the activated values.
    pub fn forward_inplace<F: Scalar, D: ndarray::Dimension>(&self, x: &mut ndarray::Array<F, D>) {
        let slope = F::from_f64(LEAKY_SLOPE);
        match self {
            Activation::LeakyRelu => x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope }),
            Activation::Sigmoid => x.mapv_inplace(sigmoid),
            Activation::Identity => {}
        }
    }

    /// Transforms upstream gradients in place given the cached outputs.
    pub fn backward_inplace<F: Scalar, D: ndarray::Dimension>(
        &self,
        grad: &mut ndarray::Array<F, D>,
        output: &ndarray::Array<F, D>,
    ) {
        let slope = F::from_f64(LEAKY_SLOPE);
        match self {
            Activation::LeakyRelu => {
                ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
                    if y <= F::zero() {
                        *g = *g * slope;
                    }
                });
            }
            Activation::Sigmoid => {
                ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
                    *g = *g * y * (F::one() - y);
                });
            }
            Activation::Identity => {}
        }
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Adam optimizer state for one parameter group (shared step counter,
/// per-parameter moments live on the parameters themselves).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before updating the group's parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single parameter from its accumulated
    /// gradient.
    pub fn update<F: Scalar>(&self, p: &mut Param<F>) {
        debug_assert!(self.t > 0, "begin_step must precede update");
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bias2_sqrt = F::from_f64((1.0 - self.beta2.powi(self.t as i32)).sqrt());
        let step = F::from_f64(self.lr) / bias1;
        let eps = F::from_f64(self.eps);
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(&mut p.adam_m)
            .and(&mut p.adam_v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let denom = v.sqrt() / bias2_sqrt + eps;
                *w = *w - step * *m / denom;
            });
    }
}

/// Splits `n` items into at most `rayon::current_num_threads()` contiguous
/// chunks. The per-chunk work order is fixed, so results do not depend on
/// scheduling; they depend only on the pool size, which callers pin when
/// bitwise reproducibility across machines-with-different-core-counts
/// matters.
pub(crate) fn batch_chunks(n: usize) -> usize {
    rayon::current_num_threads().clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_normal_is_dtype_agnostic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: ArrayD<f32> = init_normal(&[3, 4], 0.0, 0.02, &mut r1);
        let b: ArrayD<f64> = init_normal(&[3, 4], 0.0, 0.02, &mut r2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn leaky_relu_roundtrip_gradient() {
        let mut x: ArrayD<f64> = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[4]),
            vec![-2.0, -0.5, 0.5, 2.0],
        )
        .unwrap();
        Activation::LeakyRelu.forward_inplace(&mut x);
        assert_eq!(x.as_slice().unwrap(), &[-0.4, -0.1, 0.5, 2.0]);
        let mut g = ArrayD::from_elem(ndarray::IxDyn(&[4]), 1.0);
        Activation::LeakyRelu.backward_inplace(&mut g, &x);
        assert_eq!(g.as_slice().unwrap(), &[0.2, 0.2, 1.0, 1.0]);
    }

    #[test]
    fn adam_matches_reference_single_step() {
        // One Adam step with g=1 everywhere: update = lr * mhat/(sqrt(vhat)+eps)
        let mut p: Param<f64> = Param::new(ArrayD::zeros(ndarray::IxDyn(&[1])));
        p.grad.fill(1.0);
        let mut opt = Adam::new(0.001, 0.9, 0.999);
        opt.begin_step();
        opt.update(&mut p);
        // mhat = 1, vhat = 1 -> step ~ lr
        assert!((p.value[[0]] + 0.001).abs() < 1e-9, "got {}", p.value[[0]]);
    }

    #[test]
    fn sigmoid_is_bounded() {
        assert!(sigmoid(100.0f64) <= 1.0);
        assert!(sigmoid(-100.0f64) >= 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}

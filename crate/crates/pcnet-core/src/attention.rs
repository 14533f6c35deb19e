//! Channel attention: the efficient-channel-attention (ECA) block and the
//! mutual head that turns a pair of feature maps into a per-channel
//! comparison cue.
//!
//! ECA reads as GAP -> 1D cross-channel convolution (odd k, zero pad, no
//! bias) -> sigmoid -> channel-wise rescale of the map. The mutual head
//! concatenates the two maps along channels, runs ECA over the 2C channels,
//! pools, and reduces 2C -> C through a fully connected layer followed by a
//! sigmoid; the result lies strictly in (0,1) per channel.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Efficient channel attention block: a single learnable k-tap kernel.
#[derive(Clone, Debug)]
pub struct EcaModule<T> {
    kernel: Tensor<T>,
}

impl<T: Scalar> EcaModule<T> {
    /// Kernel drawn uniformly from `[-1/sqrt(k), 1/sqrt(k)]`; `k` must be odd.
    pub fn init<R: Rng>(k: usize, rng: &mut R) -> Result<Self> {
        Self::check_k(k)?;
        let bound = 1.0 / (k as f64).sqrt();
        Ok(EcaModule {
            kernel: Tensor::rand_uniform(&[k], -bound, bound, rng),
        })
    }

    pub fn zeros(k: usize) -> Result<Self> {
        Self::check_k(k)?;
        Ok(EcaModule {
            kernel: Tensor::zeros(&[k]),
        })
    }

    pub fn from_kernel(kernel: Tensor<T>) -> Result<Self> {
        Self::check_k(kernel.len())?;
        Ok(EcaModule { kernel })
    }

    fn check_k(k: usize) -> Result<()> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "ECA kernel size must be odd, got {}",
                k
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut Tensor<T> {
        &mut self.kernel
    }

    /// Channel weights `a = sigmoid(conv1d(GAP(f), kernel))`, shape `[B, C]`.
    pub fn weights(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let gap = ops::global_average_pool(f)?;
        let conv = ops::conv1d_rows(&gap, &self.kernel)?;
        Ok(ops::sigmoid(&conv))
    }

    /// Rescales each channel plane of `f` by its attention weight.
    pub fn apply(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.weights(f)?;
        ops::scale_channels(f, &a)
    }
}

/// The mutual head: ECA over the concatenated 2C channels plus the
/// dimension-reducing fully connected layer producing the comparison cue.
#[derive(Clone, Debug)]
pub struct MutualHead<T> {
    eca: EcaModule<T>,
    reduce_w: Tensor<T>,
    reduce_b: Tensor<T>,
}

impl<T: Scalar> MutualHead<T> {
    /// `channels` is C, the per-image channel count; the head operates on 2C.
    pub fn init<R: Rng>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        let eca = EcaModule::init(k, rng)?;
        let bound = 1.0 / ((2 * channels) as f64).sqrt();
        Ok(MutualHead {
            eca,
            reduce_w: Tensor::rand_uniform(&[channels, 2 * channels], -bound, bound, rng),
            reduce_b: Tensor::rand_uniform(&[channels], -bound, bound, rng),
        })
    }

    pub fn zeros(channels: usize, k: usize) -> Result<Self> {
        Ok(MutualHead {
            eca: EcaModule::zeros(k)?,
            reduce_w: Tensor::zeros(&[channels, 2 * channels]),
            reduce_b: Tensor::zeros(&[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce_w.shape()[0]
    }

    pub fn eca(&self) -> &EcaModule<T> {
        &self.eca
    }

    pub fn eca_mut(&mut self) -> &mut EcaModule<T> {
        &mut self.eca
    }

    pub fn reduce_w(&self) -> &Tensor<T> {
        &self.reduce_w
    }

    pub fn reduce_w_mut(&mut self) -> &mut Tensor<T> {
        &mut self.reduce_w
    }

    pub fn reduce_b(&self) -> &Tensor<T> {
        &self.reduce_b
    }

    pub fn reduce_b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.reduce_b
    }

    /// Simultaneous mutable access to `(eca kernel, reduce_w, reduce_b)`.
    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (
            self.eca.kernel_mut(),
            &mut self.reduce_w,
            &mut self.reduce_b,
        )
    }

    /// Comparison cue for the pair `(f1, f2)`, shape `[B, C]`, entries in (0,1).
    /// With `fc_only` the ECA step over the concatenation is skipped and the
    /// pooled concatenation feeds the reduction directly.
    pub fn cue(&self, f1: &Tensor<T>, f2: &Tensor<T>, fc_only: bool) -> Result<Tensor<T>> {
        let cat = ops::concat_channels(f1, f2)?;
        let attended = if fc_only { cat } else { self.eca.apply(&cat)? };
        let pooled = ops::global_average_pool(&attended)?;
        let z = ops::affine(&pooled, &self.reduce_w, &self.reduce_b)?;
        Ok(ops::sigmoid(&z))
    }
}

// ── tape-level builders (differentiable path) ───────────────────────────

/// Channel weights on the tape; `kernel` is the registered ECA kernel var.
pub fn eca_weights<T: Scalar>(tape: &mut Tape<T>, f: Var, kernel: Var) -> Result<Var> {
    let gap = tape.global_average_pool(f)?;
    let conv = tape.conv1d_channels(gap, kernel)?;
    Ok(tape.sigmoid(conv))
}

/// ECA rescale on the tape: `out[b,c,i,j] = a[b,c] * f[b,c,i,j]`.
pub fn eca_apply<T: Scalar>(tape: &mut Tape<T>, f: Var, kernel: Var) -> Result<Var> {
    let a = eca_weights(tape, f, kernel)?;
    tape.scale_channels(f, a)
}

/// Registered parameter vars of a [`MutualHead`].
#[derive(Clone, Copy, Debug)]
pub struct MutualVars {
    pub eca_kernel: Var,
    pub reduce_w: Var,
    pub reduce_b: Var,
}

/// Comparison cue on the tape.
pub fn mutual_cue<T: Scalar>(
    tape: &mut Tape<T>,
    f1: Var,
    f2: Var,
    head: MutualVars,
    fc_only: bool,
) -> Result<Var> {
    let cat = tape.concat_channels(f1, f2)?;
    let attended = if fc_only {
        cat
    } else {
        eca_apply(tape, cat, head.eca_kernel)?
    };
    let pooled = tape.global_average_pool(attended)?;
    let z = tape.affine(pooled, head.reduce_w, head.reduce_b)?;
    Ok(tape.sigmoid(z))
}

/// Applies one cue vector to both pooled features: `F_n^mut = F_n (.) a_mut`.
pub fn mutual_representations<T: Scalar>(
    tape: &mut Tape<T>,
    a_mut: Var,
    f1_gap: Var,
    f2_gap: Var,
) -> Result<(Var, Var)> {
    Ok((tape.mul(f1_gap, a_mut)?, tape.mul(f2_gap, a_mut)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_kernel_halves_the_map() {
        let eca = EcaModule::<f64>::zeros(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let out = eca.apply(&f).unwrap();
        for (o, &v) in out.data().iter().zip(f.data()) {
            assert_relative_eq!(o, &(0.5 * v), max_relative = 1e-15);
        }
    }

    #[test]
    fn zero_map_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eca = EcaModule::<f64>::init(5, &mut rng).unwrap();
        let f = Tensor::<f64>::zeros(&[1, 4, 3, 3]);
        let out = eca.apply(&f).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_scales_by_sigmoid_of_gap() {
        // A center-delta kernel makes the 1D conv an identity, so channel c is
        // scaled by sigmoid(GAP_c).
        let mut kernel = Tensor::<f64>::zeros(&[5]);
        kernel.data_mut()[2] = 1.0;
        let eca = EcaModule::from_kernel(kernel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::rand_uniform(&[1, 3, 2, 2], -2.0, 2.0, &mut rng);
        let gap = ops::global_average_pool(&f).unwrap();
        let out = eca.apply(&f).unwrap();
        for c in 0..3 {
            let a = 1.0 / (1.0 + (-gap.data()[c]).exp());
            for i in 0..4 {
                assert_relative_eq!(
                    out.data()[c * 4 + i],
                    a * f.data()[c * 4 + i],
                    max_relative = 1e-13
                );
            }
        }
    }

    #[test]
    fn even_kernel_size_is_rejected() {
        assert!(EcaModule::<f64>::init(4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn eca_contracts_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eca = EcaModule::<f64>::init(5, &mut rng).unwrap();
        let f = Tensor::rand_uniform(&[2, 4, 3, 3], -3.0, 3.0, &mut rng);
        let out = eca.apply(&f).unwrap();
        for (o, &v) in out.data().iter().zip(f.data()) {
            if v != 0.0 {
                assert!(o.abs() < v.abs());
            }
        }
    }

    #[test]
    fn zero_reduction_gives_half_cue() {
        let head = MutualHead::<f64>::zeros(4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let f2 = Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let cue = head.cue(&f1, &f2, false).unwrap();
        assert_eq!(cue.shape(), &[1, 4]);
        assert!(cue.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_inputs_reduce_to_sigmoid_of_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = MutualHead::<f64>::init(3, 5, &mut rng).unwrap();
        let f = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let cue = head.cue(&f, &f, false).unwrap();
        for (c, &v) in cue.data().iter().enumerate() {
            let expect = 1.0 / (1.0 + (-head.reduce_b().data()[c]).exp());
            assert_relative_eq!(v, expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn cue_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = MutualHead::<f64>::init(4, 5, &mut rng).unwrap();
        let f1 = Tensor::rand_uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let f2 = Tensor::rand_uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let cue = head.cue(&f1, &f2, false).unwrap();

        let cat = ops::concat_channels(&f1, &f2).unwrap();
        let gap = ops::global_average_pool(&cat).unwrap();
        let conv = ops::conv1d_rows(&gap, head.eca().kernel()).unwrap();
        let a = ops::sigmoid(&conv);
        let attended = ops::scale_channels(&cat, &a).unwrap();
        let pooled = ops::global_average_pool(&attended).unwrap();
        let z = ops::affine(&pooled, head.reduce_w(), head.reduce_b()).unwrap();
        let expect = ops::sigmoid(&z);
        assert!(cue.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn cue_in_open_unit_interval_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = MutualHead::<f64>::init(4, 5, &mut rng).unwrap();
        let f1 = Tensor::rand_uniform(&[1, 4, 4, 4], -5.0, 5.0, &mut rng);
        let f2 = Tensor::rand_uniform(&[1, 4, 4, 4], -5.0, 5.0, &mut rng);
        for cue in [
            head.cue(&f1, &f2, false).unwrap(),
            head.cue(&f2, &f1, false).unwrap(),
        ] {
            assert!(cue.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn tape_path_matches_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eca = EcaModule::<f64>::init(5, &mut rng).unwrap();
        let head = MutualHead::<f64>::init(4, 5, &mut rng).unwrap();
        let f1 = Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let f2 = Tensor::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let kv = tape.param(eca.kernel());
        let hv = MutualVars {
            eca_kernel: tape.param(head.eca().kernel()),
            reduce_w: tape.param(head.reduce_w()),
            reduce_b: tape.param(head.reduce_b()),
        };
        let f1v = tape.constant(f1.clone());
        let f2v = tape.constant(f2.clone());
        let applied = eca_apply(&mut tape, f1v, kv).unwrap();
        let cue = mutual_cue(&mut tape, f1v, f2v, hv, false).unwrap();

        assert!(tape.value(applied).max_abs_diff(&eca.apply(&f1).unwrap()) < 1e-14);
        assert!(tape.value(cue).max_abs_diff(&head.cue(&f1, &f2, false).unwrap()) < 1e-14);
    }

    #[test]
    fn gradients_reach_kernels_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let eca = EcaModule::<f64>::init(5, &mut rng).unwrap();
        let head = MutualHead::<f64>::init(3, 5, &mut rng).unwrap();
        let f1 = Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng).with_grad();
        let f2 = Tensor::rand_uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let kv = tape.param(eca.kernel());
        let hv = MutualVars {
            eca_kernel: tape.param(head.eca().kernel()),
            reduce_w: tape.param(head.reduce_w()),
            reduce_b: tape.param(head.reduce_b()),
        };
        let f1v = tape.param(&f1);
        let f2v = tape.constant(f2);
        let applied = eca_apply(&mut tape, f1v, kv).unwrap();
        let pooled = tape.global_average_pool(applied).unwrap();
        let cue = mutual_cue(&mut tape, f1v, f2v, hv, false).unwrap();
        let joined = tape.mul(pooled, cue).unwrap();
        let loss = tape.sum(joined);
        tape.backward(loss).unwrap();

        for v in [kv, hv.eca_kernel, hv.reduce_w, hv.reduce_b, f1v] {
            let g = tape.grad(v).expect("gradient populated");
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "no gradient reached {:?}",
                v
            );
        }
    }
}

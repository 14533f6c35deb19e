//! The classifier model: a small residual convolutional backbone, one shared
//! fully connected classifier that serves the plain inference path and all
//! four pair heads, and the cross-entropy / ranking / total losses.
//!
//! Deployment is asymmetric by design: training runs the pair pipeline with
//! attention, while inference scores a single image through backbone -> GAP
//! -> classifier -> softmax only.

use crate::attention::{self, EcaModule, MutualHead, MutualVars};
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Probabilities are clamped at this floor before the log in cross-entropy,
/// keeping the loss finite and bit-reproducible.
pub const PROB_FLOOR: f64 = 1e-12;

/// Geometry of the convolutional feature extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_hw: (usize, usize),
    /// Output channels per stage; each stage halves the spatial extents.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            input_hw: (64, 64),
            stage_channels: vec![16, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Spatial extents of the final feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw;
        for _ in &self.stage_channels {
            h = ops::conv_out_len(h, 3, 2, 1);
            w = ops::conv_out_len(w, 3, 2, 1);
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let (h, w) = self.feature_hw();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {}x{} collapses to an empty feature map after {} stages",
                self.input_hw.0,
                self.input_hw.1,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }
}

/// One backbone stage: a stride-2 downsampling convolution followed by a
/// same-size convolution whose rectified output is added back (the residual).
#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub down: Tensor<T>,
    pub residual: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for &c_out in &config.stage_channels {
            stages.push(Stage {
                // sqrt(6/fan_in) uniform keeps activation variance steady
                // through the rectifier; there is no normalization layer to
                // compensate a bad scale.
                down: conv_init(&[c_out, c_in, 3, 3], 6f64.sqrt(), rng),
                // The residual branch starts small so each stage is close to
                // its downsampling path early on.
                residual: conv_init(&[c_out, c_out, 3, 3], 0.3 * 6f64.sqrt(), rng),
            });
            c_in = c_out;
        }
        Ok(Backbone { config, stages })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for &c_out in &config.stage_channels {
            stages.push(Stage {
                down: Tensor::zeros(&[c_out, c_in, 3, 3]),
                residual: Tensor::zeros(&[c_out, c_out, 3, 3]),
            });
            c_in = c_out;
        }
        Ok(Backbone { config, stages })
    }

    /// Feature maps for a batch of images: `[B, 3, H, W] -> [B, C, h, w]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = None;
        for stage in &self.stages {
            let input = x.as_ref().unwrap_or(images);
            let h = ops::relu(&ops::conv2d(input, &stage.down, 2, 1)?);
            let r = ops::relu(&ops::conv2d(&h, &stage.residual, 1, 1)?);
            x = Some(ops::add(&h, &r)?);
        }
        x.ok_or_else(|| Error::Config("backbone has no stages".into()))
    }

    /// Pooled features `F_gap` for a batch: `[B, C]`.
    pub fn pooled_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_average_pool(&self.features(images)?)
    }
}

fn conv_init<T: Scalar, R: Rng>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = gain / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// The single shared fully connected classifier.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    /// Fan-in-scaled uniform weight, zero bias. A zero bias keeps the argmax
    /// of the shared classifier identical between the gated training features
    /// and the ungated deployment features while the attention gates sit at
    /// their neutral 0.5 starting point.
    pub fn init<R: Rng>(num_classes: usize, channels: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Classifier {
            weight: Tensor::rand_uniform(&[num_classes, channels], -bound, bound, rng),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        Classifier {
            weight: Tensor::zeros(&[num_classes, channels]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Class probabilities per row of pooled features: `[B, C] -> [B, N]`.
    pub fn probabilities(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = ops::affine(pooled, &self.weight, &self.bias)?;
        ops::softmax(&logits)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub eca_k: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        ModelConfig {
            backbone,
            num_classes,
            eca_k: 5,
        }
    }
}

/// The complete trainable state: backbone, shared classifier, per-image ECA
/// and the mutual head.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub classifier: Classifier<T>,
    pub eca: EcaModule<T>,
    pub mutual: MutualHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Draws all parameters from `rng` in the fixed order reported by
    /// [`Model::parameters`]. Attention kernels start at zero: both gates
    /// then open at exactly 0.5, so the gated training features are a pure
    /// rescale of the ungated deployment features until the gates learn to
    /// differentiate.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::init(config.backbone.clone(), rng)?;
        let channels = config.backbone.out_channels();
        let classifier = Classifier::init(config.num_classes, channels, rng);
        let eca = EcaModule::zeros(config.eca_k)?;
        let mut mutual = MutualHead::init(channels, config.eca_k, rng)?;
        *mutual.eca_mut().kernel_mut() = Tensor::zeros(&[config.eca_k]);
        Ok(Model {
            config,
            backbone,
            classifier,
            eca,
            mutual,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let backbone = Backbone::zeros(config.backbone.clone())?;
        let channels = config.backbone.out_channels();
        let classifier = Classifier::zeros(config.num_classes, channels);
        let eca = EcaModule::zeros(config.eca_k)?;
        let mutual = MutualHead::zeros(channels, config.eca_k)?;
        Ok(Model {
            config,
            backbone,
            classifier,
            eca,
            mutual,
        })
    }

    /// All learnable tensors with stable names, in a fixed order shared by
    /// initialization, the optimizer and checkpoints.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, stage) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.stage{}.down", i), &stage.down));
            out.push((format!("backbone.stage{}.residual", i), &stage.residual));
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out.push(("classifier.bias".to_string(), &self.classifier.bias));
        out.push(("eca.kernel".to_string(), self.eca.kernel()));
        out.push(("mutual.eca.kernel".to_string(), self.mutual.eca().kernel()));
        out.push(("mutual.reduce.weight".to_string(), self.mutual.reduce_w()));
        out.push(("mutual.reduce.bias".to_string(), self.mutual.reduce_b()));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, stage) in self.backbone.stages.iter_mut().enumerate() {
            out.push((format!("backbone.stage{}.down", i), &mut stage.down));
            out.push((format!("backbone.stage{}.residual", i), &mut stage.residual));
        }
        out.push((
            "classifier.weight".to_string(),
            &mut self.classifier.weight,
        ));
        out.push(("classifier.bias".to_string(), &mut self.classifier.bias));
        out.push(("eca.kernel".to_string(), self.eca.kernel_mut()));
        let (mut_kernel, reduce_w, reduce_b) = self.mutual.parts_mut();
        out.push(("mutual.eca.kernel".to_string(), mut_kernel));
        out.push(("mutual.reduce.weight".to_string(), reduce_w));
        out.push(("mutual.reduce.bias".to_string(), reduce_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(&self.backbone, &self.classifier, &self.eca, &self.mutual)
    }
}

/// Exact learnable element count across all four components.
pub fn count_parameters<T: Scalar>(
    backbone: &Backbone<T>,
    classifier: &Classifier<T>,
    eca: &EcaModule<T>,
    mutual: &MutualHead<T>,
) -> usize {
    let bk: usize = backbone
        .stages
        .iter()
        .map(|s| s.down.len() + s.residual.len())
        .sum();
    bk + classifier.weight.len()
        + classifier.bias.len()
        + eca.kernel().len()
        + mutual.eca().kernel().len()
        + mutual.reduce_w().len()
        + mutual.reduce_b().len()
}

/// The plain deployment path: `q = softmax(W GAP(backbone(I)) + b)` for one
/// image `[1, 3, H, W]`, no attention anywhere. Returns a rank-1 `[N]` vector.
pub fn single_branch_forward<T: Scalar>(
    backbone: &Backbone<T>,
    classifier: &Classifier<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    if image.shape().first() != Some(&1) {
        return Err(Error::shape(
            "single_branch_forward",
            format!("expected a single image [1,3,H,W], got {:?}", image.shape()),
        ));
    }
    let pooled = backbone.pooled_features(image)?;
    let q = classifier.probabilities(&pooled)?;
    let n = classifier.num_classes();
    q.reshaped(&[n])
}

/// The four per-pair representation vectors and their score vectors.
#[derive(Clone, Debug)]
pub struct RepresentationSet<T> {
    /// `F_n^self`, indexed by pair member (0 or 1).
    pub f_self: [Tensor<T>; 2],
    /// `F_n^mut`.
    pub f_mut: [Tensor<T>; 2],
    /// Score vectors from the self heads.
    pub q_self: [Tensor<T>; 2],
    /// Score vectors from the mutual heads.
    pub q_mut: [Tensor<T>; 2],
}

/// Pair heads as tape vars; used by the losses and the trainer.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub f_self: [Var; 2],
    pub f_mut: [Var; 2],
    pub q_self: [Var; 2],
    pub q_mut: [Var; 2],
}

/// Registered parameter vars of the whole model, in [`Model::parameters`]
/// order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stages: Vec<(Var, Var)>,
    pub cls_w: Var,
    pub cls_b: Var,
    pub eca_kernel: Var,
    pub mutual: MutualVars,
}

impl ModelVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>) -> Self {
        let stages = model
            .backbone
            .stages
            .iter()
            .map(|s| (tape.param(&s.down), tape.param(&s.residual)))
            .collect();
        ModelVars {
            stages,
            cls_w: tape.param(&model.classifier.weight),
            cls_b: tape.param(&model.classifier.bias),
            eca_kernel: tape.param(model.eca.kernel()),
            mutual: MutualVars {
                eca_kernel: tape.param(model.mutual.eca().kernel()),
                reduce_w: tape.param(model.mutual.reduce_w()),
                reduce_b: tape.param(model.mutual.reduce_b()),
            },
        }
    }

    /// All vars in [`Model::parameters`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (d, r) in &self.stages {
            out.push(*d);
            out.push(*r);
        }
        out.extend([
            self.cls_w,
            self.cls_b,
            self.eca_kernel,
            self.mutual.eca_kernel,
            self.mutual.reduce_w,
            self.mutual.reduce_b,
        ]);
        out
    }

    /// Accumulates tape gradients into the model's parameter grad buffers.
    pub fn accumulate_into<T: Scalar>(&self, tape: &Tape<T>, model: &mut Model<T>) {
        let vars = self.ordered();
        for ((_, param), var) in model.parameters_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g.data());
            }
        }
    }
}

/// Backbone forward on the tape.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    images: Var,
) -> Result<Var> {
    let mut x = images;
    for (down, residual) in &vars.stages {
        let c = tape.conv2d(x, *down, 2, 1)?;
        let h = tape.relu(c);
        let rc = tape.conv2d(h, *residual, 1, 1)?;
        let r = tape.relu(rc);
        x = tape.add(h, r)?;
    }
    Ok(x)
}

/// Shared-classifier head on the tape: pooled features `[M, C]` to
/// probabilities `[M, N]`.
pub fn classify<T: Scalar>(tape: &mut Tape<T>, vars: &ModelVars, pooled: Var) -> Result<Var> {
    let logits = tape.affine(pooled, vars.cls_w, vars.cls_b)?;
    tape.softmax(logits)
}

/// Full differentiable pair pipeline for a single image pair, producing all
/// four representations and score vectors through the one shared classifier.
pub fn pair_forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    img1: Var,
    img2: Var,
    mutual_fc_only: bool,
) -> Result<PairVars> {
    let f1 = backbone_forward(tape, vars, img1)?;
    let f2 = backbone_forward(tape, vars, img2)?;
    let gap1 = tape.global_average_pool(f1)?;
    let gap2 = tape.global_average_pool(f2)?;

    let a1 = attention::eca_apply(tape, f1, vars.eca_kernel)?;
    let a2 = attention::eca_apply(tape, f2, vars.eca_kernel)?;
    let f1_self = tape.global_average_pool(a1)?;
    let f2_self = tape.global_average_pool(a2)?;

    let cue = attention::mutual_cue(tape, f1, f2, vars.mutual, mutual_fc_only)?;
    let (f1_mut, f2_mut) = attention::mutual_representations(tape, cue, gap1, gap2)?;

    let q = [
        classify(tape, vars, f1_self)?,
        classify(tape, vars, f2_self)?,
        classify(tape, vars, f1_mut)?,
        classify(tape, vars, f2_mut)?,
    ];
    Ok(PairVars {
        f_self: [f1_self, f2_self],
        f_mut: [f1_mut, f2_mut],
        q_self: [q[0], q[1]],
        q_mut: [q[2], q[3]],
    })
}

impl<T: Scalar> Model<T> {
    /// Convenience pair forward returning plain values (builds a throwaway
    /// tape internally). Each output vector is rank-1 of length C or N.
    pub fn pair_forward(
        &self,
        img1: &Tensor<T>,
        img2: &Tensor<T>,
        mutual_fc_only: bool,
    ) -> Result<RepresentationSet<T>> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, self);
        let i1 = tape.constant(img1.clone());
        let i2 = tape.constant(img2.clone());
        let pair = pair_forward_on_tape(&mut tape, &vars, i1, i2, mutual_fc_only)?;
        let c = self.config.backbone.out_channels();
        let n = self.config.num_classes;
        let flat = |v: Var, len: usize| -> Result<Tensor<T>> {
            tape.value(v).clone().reshaped(&[len])
        };
        Ok(RepresentationSet {
            f_self: [flat(pair.f_self[0], c)?, flat(pair.f_self[1], c)?],
            f_mut: [flat(pair.f_mut[0], c)?, flat(pair.f_mut[1], c)?],
            q_self: [flat(pair.q_self[0], n)?, flat(pair.q_self[1], n)?],
            q_mut: [flat(pair.q_mut[0], n)?, flat(pair.q_mut[1], n)?],
        })
    }
}

// ── losses ───────────────────────────────────────────────────────────────

/// `-ln(max(q[class], 1e-12))` for a rank-1 probability vector.
pub fn cross_entropy<T: Scalar>(q: &Tensor<T>, class: usize) -> Result<T> {
    if class >= q.len() {
        return Err(Error::Config(format!(
            "class index {} out of range for {} classes",
            class,
            q.len()
        )));
    }
    let floor = T::from_f64(PROB_FLOOR);
    let p = q.data()[class];
    let clamped = if p > floor { p } else { floor };
    Ok(-clamped.ln())
}

/// Sum of the four cross-entropy terms of a pair (both members, both heads).
pub fn classification_loss<T: Scalar>(
    reps: &RepresentationSet<T>,
    labels: (usize, usize),
) -> Result<T> {
    let (c1, c2) = labels;
    Ok(cross_entropy(&reps.q_self[0], c1)?
        + cross_entropy(&reps.q_self[1], c2)?
        + cross_entropy(&reps.q_mut[0], c1)?
        + cross_entropy(&reps.q_mut[1], c2)?)
}

/// Hinge penalty asking each self head to beat its mutual head on the true
/// class by at least `epsilon`; subgradient 0 at the kink.
pub fn ranking_loss<T: Scalar>(
    reps: &RepresentationSet<T>,
    labels: (usize, usize),
    epsilon: T,
) -> Result<T> {
    if epsilon < T::zero() {
        return Err(Error::Config("ranking margin must be >= 0".into()));
    }
    let (c1, c2) = labels;
    let mut total = T::zero();
    for (n, &c) in [c1, c2].iter().enumerate() {
        if c >= reps.q_self[n].len() {
            return Err(Error::Config(format!(
                "class index {} out of range for {} classes",
                c,
                reps.q_self[n].len()
            )));
        }
        let margin = reps.q_mut[n].data()[c] - reps.q_self[n].data()[c] + epsilon;
        if margin > T::zero() {
            total += margin;
        }
    }
    Ok(total)
}

/// The combined objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle<T> {
    pub l_c: T,
    pub l_r: T,
    pub total: T,
    pub lambda: T,
    pub epsilon: T,
}

/// `L = L_c + lambda * L_r`, computed in the run's precision.
pub fn total_loss<T: Scalar>(l_c: T, l_r: T, lambda: T, epsilon: T) -> Result<LossBundle<T>> {
    if lambda < T::zero() {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    Ok(LossBundle {
        l_c,
        l_r,
        total: l_c + lambda * l_r,
        lambda,
        epsilon,
    })
}

// ── tape-level loss builders ─────────────────────────────────────────────

/// Sum over rows of `-ln(max(q[row, label[row]], 1e-12))` for `q: [M, N]`.
pub fn ce_sum_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q_rows: Var,
    labels: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(q_rows, labels.to_vec())?;
    let logs = tape.log_clamped(picked, T::from_f64(PROB_FLOOR));
    let s = tape.sum(logs);
    Ok(tape.scale(s, -T::one()))
}

/// Sum over rows of `max(0, q_mut - q_self + eps)` for two `[M]` vectors of
/// true-class probabilities.
pub fn hinge_sum_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    q_self_true: Var,
    q_mut_true: Var,
    epsilon: T,
) -> Result<Var> {
    let diff = tape.sub(q_mut_true, q_self_true)?;
    let shifted = tape.add_scalar(diff, epsilon);
    let hinged = tape.relu(shifted);
    Ok(tape.sum(hinged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(
            BackboneConfig {
                in_channels: 3,
                input_hw: (8, 8),
                stage_channels: vec![4],
            },
            3,
        )
    }

    fn tiny_model(seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(tiny_config(), &mut rng).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let model = Model::<f64>::zeros(tiny_config()).unwrap();
        let image = Tensor::filled(&[1, 3, 8, 8], 0.3);
        let q = single_branch_forward(&model.backbone, &model.classifier, &image).unwrap();
        assert_eq!(q.shape(), &[3]);
        for &v in q.data() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn single_branch_matches_primitive_composition() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let q = single_branch_forward(&model.backbone, &model.classifier, &image).unwrap();

        let f = model.backbone.features(&image).unwrap();
        let gap = ops::global_average_pool(&f).unwrap();
        let logits = ops::affine(&gap, &model.classifier.weight, &model.classifier.bias).unwrap();
        let expect = ops::softmax(&logits).unwrap();
        for (a, b) in q.data().iter().zip(expect.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_branch_is_bitwise_deterministic() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let a = single_branch_forward(&model.backbone, &model.classifier, &image).unwrap();
        let b = single_branch_forward(&model.backbone, &model.classifier, &image).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pair_forward_identical_inputs_identical_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = tiny_model(5);
        // Zero out the attention parameters so both branches share every
        // weight that touches the pair.
        *model.eca.kernel_mut() = Tensor::zeros(&[5]);
        *model.mutual.reduce_w_mut() =
            Tensor::zeros(&[model.mutual.channels(), 2 * model.mutual.channels()]);
        *model.mutual.reduce_b_mut() = Tensor::zeros(&[model.mutual.channels()]);
        let img = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let reps = model.pair_forward(&img, &img, false).unwrap();
        assert_eq!(reps.f_self[0].data(), reps.f_self[1].data());
        assert_eq!(reps.f_mut[0].data(), reps.f_mut[1].data());
    }

    #[test]
    fn pair_forward_scores_sum_to_one() {
        let model = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let i1 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let i2 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let reps = model.pair_forward(&i1, &i2, false).unwrap();
        for q in reps.q_self.iter().chain(reps.q_mut.iter()) {
            let s: f64 = q.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_forward_matches_manual_composition() {
        let model = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let i1 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let i2 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let reps = model.pair_forward(&i1, &i2, false).unwrap();

        let f1 = model.backbone.features(&i1).unwrap();
        let f2 = model.backbone.features(&i2).unwrap();
        let f1_self = ops::global_average_pool(&model.eca.apply(&f1).unwrap()).unwrap();
        let cue = model.mutual.cue(&f1, &f2, false).unwrap();
        let gap1 = ops::global_average_pool(&f1).unwrap();
        let f1_mut = ops::mul(&gap1, &cue).unwrap();
        let q1_self = model.classifier.probabilities(&f1_self).unwrap();
        let q1_mut = model.classifier.probabilities(&f1_mut).unwrap();

        assert!(reps.f_self[0].max_abs_diff(&f1_self.reshaped(&[4]).unwrap()) < 1e-13);
        assert!(reps.f_mut[0].max_abs_diff(&f1_mut.reshaped(&[4]).unwrap()) < 1e-13);
        assert!(reps.q_self[0].max_abs_diff(&q1_self.reshaped(&[3]).unwrap()) < 1e-13);
        assert!(reps.q_mut[0].max_abs_diff(&q1_mut.reshaped(&[3]).unwrap()) < 1e-13);
    }

    #[test]
    fn cross_entropy_reference_points() {
        let one_hot = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&one_hot, 0).unwrap(), 0.0);

        let even = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(
            cross_entropy(&even, 0).unwrap(),
            std::f64::consts::LN_2,
            max_relative = 1e-12
        );

        let soft = Tensor::from_vec(&[3], vec![0.09003057, 0.24472847, 0.66524096]).unwrap();
        assert_relative_eq!(
            cross_entropy(&soft, 2).unwrap(),
            0.4076059,
            max_relative = 1e-6
        );

        assert!(cross_entropy(&even, 5).is_err());
    }

    fn reps_from_probs(
        q_self: [Vec<f64>; 2],
        q_mut: [Vec<f64>; 2],
    ) -> RepresentationSet<f64> {
        let n = q_self[0].len();
        let c = 2;
        let t = |v: &Vec<f64>| Tensor::from_vec(&[n], v.clone()).unwrap();
        RepresentationSet {
            f_self: [Tensor::zeros(&[c]), Tensor::zeros(&[c])],
            f_mut: [Tensor::zeros(&[c]), Tensor::zeros(&[c])],
            q_self: [t(&q_self[0]), t(&q_self[1])],
            q_mut: [t(&q_mut[0]), t(&q_mut[1])],
        }
    }

    #[test]
    fn classification_loss_closed_forms() {
        let u4 = vec![0.25; 4];
        let reps = reps_from_probs([u4.clone(), u4.clone()], [u4.clone(), u4]);
        let l = classification_loss(&reps, (0, 1)).unwrap();
        assert_relative_eq!(l, 4.0 * (4.0f64).ln(), max_relative = 1e-12);

        let hot = vec![1.0, 0.0];
        let u2 = vec![0.5, 0.5];
        let reps = reps_from_probs([hot.clone(), hot], [u2.clone(), u2]);
        let l = classification_loss(&reps, (0, 0)).unwrap();
        assert_relative_eq!(l, 2.0 * std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn ranking_loss_hinge_cases() {
        // Margin satisfied: self 0.7 vs mut 0.6 with eps 0.05.
        let reps = reps_from_probs(
            [vec![0.7, 0.3], vec![0.7, 0.3]],
            [vec![0.6, 0.4], vec![0.6, 0.4]],
        );
        assert_eq!(ranking_loss(&reps, (0, 0), 0.05).unwrap(), 0.0);

        // Violated by 0.15 on both members.
        let reps = reps_from_probs(
            [vec![0.6, 0.4], vec![0.6, 0.4]],
            [vec![0.7, 0.3], vec![0.7, 0.3]],
        );
        assert_relative_eq!(
            ranking_loss(&reps, (0, 0), 0.05).unwrap(),
            0.30,
            max_relative = 1e-12
        );

        // Equal scores cost exactly 2 * eps.
        let reps = reps_from_probs(
            [vec![0.5, 0.5], vec![0.5, 0.5]],
            [vec![0.5, 0.5], vec![0.5, 0.5]],
        );
        assert_relative_eq!(
            ranking_loss(&reps, (0, 0), 0.05).unwrap(),
            0.10,
            max_relative = 1e-12
        );
    }

    #[test]
    fn total_loss_composition() {
        let b = total_loss(1.0f64, 0.3, 1.0, 0.05).unwrap();
        assert_eq!(b.total, 1.3);
        let b = total_loss(2.0f64, 0.5, 1.5, 0.05).unwrap();
        assert_eq!(b.total, 2.75);
        let b = total_loss(0.9f64, 123.0, 0.0, 0.05).unwrap();
        assert_eq!(b.total, 0.9);
        assert!(total_loss(1.0f64, 1.0, -0.1, 0.05).is_err());
        // Exactness in the run's own arithmetic.
        let b = total_loss(0.1f32, 0.7, 1.2, 0.05).unwrap();
        assert_eq!(b.total - (b.l_c + b.lambda * b.l_r), 0.0);
    }

    #[test]
    fn parameter_count_closed_forms() {
        let cls = Classifier::<f64>::zeros(3, 4);
        assert_eq!(cls.weight.len() + cls.bias.len(), 15);
        let eca = EcaModule::<f64>::zeros(5).unwrap();
        assert_eq!(eca.kernel().len(), 5);

        let model = tiny_model(10);
        // One stage: down 4*3*3*3 + residual 4*4*3*3; classifier 3*4+3;
        // eca 5; mutual eca 5 + reduce 4*8+4.
        let expect = (4 * 3 * 9 + 4 * 4 * 9) + (12 + 3) + 5 + (5 + 32 + 4);
        assert_eq!(model.num_parameters(), expect);
        assert_eq!(
            model.parameters().iter().map(|(_, t)| t.len()).sum::<usize>(),
            expect
        );
    }

    #[test]
    fn default_backbone_parameter_count_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model =
            Model::<f32>::init(ModelConfig::new(BackboneConfig::default(), 8), &mut rng).unwrap();
        // Stages 3->16->32->64, each a downsample conv plus a residual conv:
        let stage1 = 16 * 3 * 9 + 16 * 16 * 9;
        let stage2 = 32 * 16 * 9 + 32 * 32 * 9;
        let stage3 = 64 * 32 * 9 + 64 * 64 * 9;
        // Classifier 8x64 + 8; two k=5 attention kernels; reduce FC 64x128 + 64.
        let heads = (8 * 64 + 8) + 5 + 5 + (64 * 128 + 64);
        assert_eq!(model.num_parameters(), stage1 + stage2 + stage3 + heads);
        assert_eq!(model.num_parameters(), 80_642);
    }

    #[test]
    fn shared_classifier_touches_all_heads() {
        let mut model = tiny_model(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let i1 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let i2 = Tensor::rand_uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let before = model.pair_forward(&i1, &i2, false).unwrap();
        let q_before = single_branch_forward(&model.backbone, &model.classifier, &i1).unwrap();

        // Bump a single weight entry; a uniform shift would cancel in softmax.
        model.classifier.weight.data_mut()[0] += 0.25;
        let after = model.pair_forward(&i1, &i2, false).unwrap();
        let q_after = single_branch_forward(&model.backbone, &model.classifier, &i1).unwrap();

        assert_ne!(q_before.data(), q_after.data());
        for n in 0..2 {
            assert_ne!(before.q_self[n].data(), after.q_self[n].data());
            assert_ne!(before.q_mut[n].data(), after.q_mut[n].data());
        }
        // Representations below the classifier are untouched.
        for n in 0..2 {
            assert_eq!(before.f_self[n].data(), after.f_self[n].data());
            assert_eq!(before.f_mut[n].data(), after.f_mut[n].data());
        }
    }
}

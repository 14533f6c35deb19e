//! Central finite-difference verification of every differentiable operation
//! and of the full pair pipeline with its training objective.
//!
//! The oracle only ever evaluates the forward pass: each input coordinate is
//! perturbed by ±h and the loss difference quotient is compared against the
//! tape gradient. Samples whose rectifier (or hinge) inputs sit too close to
//! the kink are redrawn, since a two-sided difference straddling a kink does
//! not estimate the subgradient.

use crate::attention;
use crate::error::Result;
use crate::model::{self, BackboneConfig, Model, ModelConfig, ModelVars};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step (64-bit).
pub const FD_STEP: f64 = 1e-5;
/// Minimum distance of any rectifier input from its kink for a sample to count.
const KINK_GUARD: f64 = 1e-3;
const MAX_RESAMPLES: usize = 200;

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomly drawn check instance: differentiable inputs plus a builder
/// that assembles the scalar loss from their tape vars.
pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub draw: fn(&mut ChaCha8Rng) -> Instance,
}

/// Outcome of checking one operation over many instances.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(n: f64, a: f64) -> f64 {
    (n - a).abs() / (n.abs() + a.abs()).max(1e-4)
}

fn eval_loss(instance: &Instance, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = (instance.build)(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

/// Runs one operation's check: `instances` random draws, every coordinate of
/// every input compared against the central difference.
pub fn run_check(op: &OpCheck, instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    for _ in 0..instances {
        // Redraw until no rectifier input hugs its kink.
        let mut instance = (op.draw)(&mut rng);
        let mut guard_tries = 0;
        let analytic = loop {
            let mut tape = Tape::new();
            let vars: Vec<Var> = instance.inputs.iter().map(|t| tape.param(t)).collect();
            let loss = (instance.build)(&mut tape, &vars)?;
            let kink = tape.min_kink_distance().unwrap_or(f64::INFINITY);
            if kink >= KINK_GUARD {
                tape.backward(loss)?;
                break vars
                    .iter()
                    .map(|&v| tape.grad(v).expect("param gradient").clone())
                    .collect::<Vec<_>>();
            }
            guard_tries += 1;
            assert!(
                guard_tries <= MAX_RESAMPLES,
                "could not draw a kink-free sample for {}",
                op.name
            );
            instance = (op.draw)(&mut rng);
        };

        for (ti, grad) in analytic.iter().enumerate() {
            for ci in 0..grad.len() {
                let mut plus = instance.inputs.clone();
                plus[ti].data_mut()[ci] += FD_STEP;
                let mut minus = instance.inputs.clone();
                minus[ti].data_mut()[ci] -= FD_STEP;
                let numeric =
                    (eval_loss(&instance, &plus)? - eval_loss(&instance, &minus)?) / (2.0 * FD_STEP);
                let r = rel_error(numeric, grad.data()[ci]);
                max_rel = max_rel.max(r);
                coords += 1;
            }
        }
    }
    Ok(CheckResult {
        name: op.name.to_string(),
        instances,
        coordinates: coords,
        max_rel_error: max_rel,
        tolerance: op.tolerance,
        passed: max_rel < op.tolerance,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Random fixed projection that turns a tensor-valued output into a scalar.
fn projected_sum(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(proj.clone());
    let weighted = tape.mul(out, p)?;
    Ok(tape.sum(weighted))
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Instance {
    let stride = rng.gen_range(1..=2usize);
    let pad = rng.gen_range(0..=1usize);
    let input = uniform(&[2, 3, 6, 5], -1.0, 1.0, rng);
    let kernel = uniform(&[4, 3, 3, 3], -1.0, 1.0, rng);
    let out_h = crate::ops::conv_out_len(6, 3, stride, pad);
    let out_w = crate::ops::conv_out_len(5, 3, stride, pad);
    let proj = uniform(&[2, 4, out_h, out_w], -1.0, 1.0, rng);
    Instance {
        inputs: vec![input, kernel],
        build: Box::new(move |tape, vars| {
            let out = tape.conv2d(vars[0], vars[1], stride, pad)?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn conv1d_case(rng: &mut ChaCha8Rng) -> Instance {
    let v = uniform(&[7], -1.0, 1.0, rng);
    let k = uniform(&[5], -1.0, 1.0, rng);
    let proj = uniform(&[7], -1.0, 1.0, rng);
    Instance {
        inputs: vec![v, k],
        build: Box::new(move |tape, vars| {
            let out = tape.conv1d_channels(vars[0], vars[1])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn gap_case(rng: &mut ChaCha8Rng) -> Instance {
    let f = uniform(&[2, 3, 4, 5], -1.0, 1.0, rng);
    let proj = uniform(&[2, 3], -1.0, 1.0, rng);
    Instance {
        inputs: vec![f],
        build: Box::new(move |tape, vars| {
            let out = tape.global_average_pool(vars[0])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn affine_case(rng: &mut ChaCha8Rng) -> Instance {
    let x = uniform(&[3, 4], -1.0, 1.0, rng);
    let w = uniform(&[5, 4], -1.0, 1.0, rng);
    let b = uniform(&[5], -1.0, 1.0, rng);
    let proj = uniform(&[3, 5], -1.0, 1.0, rng);
    Instance {
        inputs: vec![x, w, b],
        build: Box::new(move |tape, vars| {
            let out = tape.affine(vars[0], vars[1], vars[2])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Instance {
    let z = uniform(&[6], -2.0, 2.0, rng);
    let proj = uniform(&[6], -1.0, 1.0, rng);
    Instance {
        inputs: vec![z],
        build: Box::new(move |tape, vars| {
            let out = tape.softmax(vars[0])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Instance {
    let z = uniform(&[2, 3], -3.0, 3.0, rng);
    let proj = uniform(&[2, 3], -1.0, 1.0, rng);
    Instance {
        inputs: vec![z],
        build: Box::new(move |tape, vars| {
            let out = tape.sigmoid(vars[0]);
            projected_sum(tape, out, &proj)
        }),
    }
}

fn relu_case(rng: &mut ChaCha8Rng) -> Instance {
    let z = uniform(&[3, 4], -2.0, 2.0, rng);
    let proj = uniform(&[3, 4], -1.0, 1.0, rng);
    Instance {
        inputs: vec![z],
        build: Box::new(move |tape, vars| {
            let out = tape.relu(vars[0]);
            projected_sum(tape, out, &proj)
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> Instance {
    let a = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
    let b = uniform(&[2, 3, 3, 3], -1.0, 1.0, rng);
    let proj = uniform(&[2, 5, 3, 3], -1.0, 1.0, rng);
    Instance {
        inputs: vec![a, b],
        build: Box::new(move |tape, vars| {
            let out = tape.concat_channels(vars[0], vars[1])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn elementwise_case(rng: &mut ChaCha8Rng) -> Instance {
    let a = uniform(&[2, 3], -1.0, 1.0, rng);
    let b = uniform(&[2, 3], -1.0, 1.0, rng);
    let proj = uniform(&[2, 3], -1.0, 1.0, rng);
    let c = rng.gen_range(-1.5..1.5);
    Instance {
        inputs: vec![a, b],
        build: Box::new(move |tape, vars| {
            let prod = tape.mul(vars[0], vars[1])?;
            let shifted = tape.add_scalar(prod, 0.3);
            let summed = tape.add(shifted, vars[0])?;
            let diffed = tape.sub(summed, vars[1])?;
            let scaled = tape.scale(diffed, c);
            projected_sum(tape, scaled, &proj)
        }),
    }
}

fn scale_channels_case(rng: &mut ChaCha8Rng) -> Instance {
    let f = uniform(&[2, 3, 2, 2], -1.0, 1.0, rng);
    let w = uniform(&[2, 3], -1.0, 1.0, rng);
    let proj = uniform(&[2, 3, 2, 2], -1.0, 1.0, rng);
    Instance {
        inputs: vec![f, w],
        build: Box::new(move |tape, vars| {
            let out = tape.scale_channels(vars[0], vars[1])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Instance {
    let z = uniform(&[3, 4], -2.0, 2.0, rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    Instance {
        inputs: vec![z],
        build: Box::new(move |tape, vars| {
            let q = tape.softmax(vars[0])?;
            model::ce_sum_on_tape(tape, q, &labels)
        }),
    }
}

fn hinge_case(rng: &mut ChaCha8Rng) -> Instance {
    let a = uniform(&[5], 0.0, 1.0, rng);
    let b = uniform(&[5], 0.0, 1.0, rng);
    Instance {
        inputs: vec![a, b],
        build: Box::new(move |tape, vars| {
            model::hinge_sum_on_tape(tape, vars[0], vars[1], 0.05)
        }),
    }
}

fn eca_apply_case(rng: &mut ChaCha8Rng) -> Instance {
    let f = uniform(&[1, 4, 3, 3], -1.0, 1.0, rng);
    let kernel = uniform(&[5], -0.5, 0.5, rng);
    let proj = uniform(&[1, 4, 3, 3], -1.0, 1.0, rng);
    Instance {
        inputs: vec![f, kernel],
        build: Box::new(move |tape, vars| {
            let out = attention::eca_apply(tape, vars[0], vars[1])?;
            projected_sum(tape, out, &proj)
        }),
    }
}

fn mutual_cue_case(rng: &mut ChaCha8Rng) -> Instance {
    let f1 = uniform(&[1, 3, 3, 3], -1.0, 1.0, rng);
    let f2 = uniform(&[1, 3, 3, 3], -1.0, 1.0, rng);
    let kernel = uniform(&[5], -0.5, 0.5, rng);
    let w = uniform(&[3, 6], -0.5, 0.5, rng);
    let b = uniform(&[3], -0.5, 0.5, rng);
    let proj = uniform(&[1, 3], -1.0, 1.0, rng);
    Instance {
        inputs: vec![f1, f2, kernel, w, b],
        build: Box::new(move |tape, vars| {
            let head = attention::MutualVars {
                eca_kernel: vars[2],
                reduce_w: vars[3],
                reduce_b: vars[4],
            };
            let cue = attention::mutual_cue(tape, vars[0], vars[1], head, false)?;
            projected_sum(tape, cue, &proj)
        }),
    }
}

fn mutual_representations_case(rng: &mut ChaCha8Rng) -> Instance {
    let cue = uniform(&[1, 4], 0.05, 0.95, rng);
    let f1 = uniform(&[1, 4], -1.0, 1.0, rng);
    let f2 = uniform(&[1, 4], -1.0, 1.0, rng);
    let p1 = uniform(&[1, 4], -1.0, 1.0, rng);
    let p2 = uniform(&[1, 4], -1.0, 1.0, rng);
    Instance {
        inputs: vec![cue, f1, f2],
        build: Box::new(move |tape, vars| {
            let (m1, m2) = attention::mutual_representations(tape, vars[0], vars[1], vars[2])?;
            let s1 = projected_sum(tape, m1, &p1)?;
            let s2 = projected_sum(tape, m2, &p2)?;
            tape.add(s1, s2)
        }),
    }
}

fn gradcheck_model(rng: &mut ChaCha8Rng) -> Model<f64> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            input_hw: (8, 8),
            stage_channels: vec![4],
        },
        num_classes: 3,
        eca_k: 5,
    };
    Model::init(config, rng).expect("valid gradcheck config")
}

/// The full training composite on one pair: every model parameter is
/// differentiated through the pair forward, the four-head cross-entropy, the
/// ranking hinge and the lambda-weighted total.
fn pair_loss_case(rng: &mut ChaCha8Rng) -> Instance {
    let model = gradcheck_model(rng);
    let img1 = uniform(&[1, 3, 8, 8], -1.0, 1.0, rng);
    let img2 = uniform(&[1, 3, 8, 8], -1.0, 1.0, rng);
    let c1 = rng.gen_range(0..3usize);
    let c2 = rng.gen_range(0..3usize);
    let lambda = 1.0;
    let epsilon = 0.05;
    let inputs: Vec<Tensor<f64>> = model
        .parameters()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();
    Instance {
        inputs,
        build: Box::new(move |tape, vars| {
            let model_vars = ModelVars {
                stages: vec![(vars[0], vars[1])],
                cls_w: vars[2],
                cls_b: vars[3],
                eca_kernel: vars[4],
                mutual: attention::MutualVars {
                    eca_kernel: vars[5],
                    reduce_w: vars[6],
                    reduce_b: vars[7],
                },
            };
            let i1 = tape.constant(img1.clone());
            let i2 = tape.constant(img2.clone());
            let pair = model::pair_forward_on_tape(tape, &model_vars, i1, i2, false)?;
            let ce1 = model::ce_sum_on_tape(tape, pair.q_self[0], &[c1])?;
            let ce2 = model::ce_sum_on_tape(tape, pair.q_self[1], &[c2])?;
            let ce3 = model::ce_sum_on_tape(tape, pair.q_mut[0], &[c1])?;
            let ce4 = model::ce_sum_on_tape(tape, pair.q_mut[1], &[c2])?;
            let s12 = tape.add(ce1, ce2)?;
            let s34 = tape.add(ce3, ce4)?;
            let l_c = tape.add(s12, s34)?;
            let q1s = tape.gather_rows(pair.q_self[0], vec![c1])?;
            let q1m = tape.gather_rows(pair.q_mut[0], vec![c1])?;
            let q2s = tape.gather_rows(pair.q_self[1], vec![c2])?;
            let q2m = tape.gather_rows(pair.q_mut[1], vec![c2])?;
            let h1 = model::hinge_sum_on_tape(tape, q1s, q1m, epsilon)?;
            let h2 = model::hinge_sum_on_tape(tape, q2s, q2m, epsilon)?;
            let l_r = tape.add(h1, h2)?;
            let weighted = tape.scale(l_r, lambda);
            tape.add(l_c, weighted)
        }),
    }
}

/// Every checked operation with its tolerance. Primitives check at 1e-5, the
/// full pair composite at 1e-4.
pub fn registry() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "conv2d", tolerance: 1e-5, draw: conv2d_case },
        OpCheck { name: "conv1d_channels", tolerance: 1e-5, draw: conv1d_case },
        OpCheck { name: "global_average_pool", tolerance: 1e-5, draw: gap_case },
        OpCheck { name: "affine", tolerance: 1e-5, draw: affine_case },
        OpCheck { name: "softmax", tolerance: 1e-5, draw: softmax_case },
        OpCheck { name: "sigmoid", tolerance: 1e-5, draw: sigmoid_case },
        OpCheck { name: "relu", tolerance: 1e-5, draw: relu_case },
        OpCheck { name: "concat_channels", tolerance: 1e-5, draw: concat_case },
        OpCheck { name: "elementwise", tolerance: 1e-5, draw: elementwise_case },
        OpCheck { name: "scale_channels", tolerance: 1e-5, draw: scale_channels_case },
        OpCheck { name: "cross_entropy", tolerance: 1e-5, draw: cross_entropy_case },
        OpCheck { name: "ranking_hinge", tolerance: 1e-5, draw: hinge_case },
        OpCheck { name: "eca_apply", tolerance: 1e-5, draw: eca_apply_case },
        OpCheck { name: "mutual_cue", tolerance: 1e-5, draw: mutual_cue_case },
        OpCheck {
            name: "mutual_representations",
            tolerance: 1e-5,
            draw: mutual_representations_case,
        },
        OpCheck { name: "pair_forward_total_loss", tolerance: 1e-4, draw: pair_loss_case },
    ]
}

/// Runs the whole registry with `instances` draws per operation.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (i, op) in registry().iter().enumerate() {
        results.push(run_check(op, instances, seed.wrapping_add(i as u64))?);
    }
    Ok(results)
}

/// Fixed-width report table, one line per operation.
pub fn table(results: &[CheckResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<26} {:>9} {:>12} {:>14} {:>10} {:>6}\n",
        "op", "instances", "coordinates", "max_rel_error", "tolerance", "status"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<26} {:>9} {:>12} {:>14.3e} {:>10.0e} {:>6}\n",
            r.name,
            r.instances,
            r.coordinates,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full registry at 20 instances runs in the acceptance suite; here a
    // quick pass over every op catches rule regressions early.
    #[test]
    fn registry_passes_at_low_instance_count() {
        for op in registry() {
            let r = run_check(&op, 3, 42).unwrap();
            assert!(
                r.passed,
                "{} failed: max rel error {:.3e} over {} coordinates",
                r.name, r.max_rel_error, r.coordinates
            );
        }
    }

    // The 32-bit stack gets a coarser finite-difference sanity check (the
    // full 64-bit suite is the acceptance gate): relative error under 1e-2.
    #[test]
    fn f32_gradients_match_coarse_finite_differences() {
        use crate::tape::Tape;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::rand_uniform(&[2], -1.0, 1.0, &mut rng);
        let proj = Tensor::<f32>::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng);

        let loss = |x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>| -> f32 {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
            let z = tape.affine(xv, wv, bv).unwrap();
            let s = tape.sigmoid(z);
            let p = tape.constant(proj.clone());
            let m = tape.mul(s, p).unwrap();
            let l = tape.sum(m);
            tape.scalar_value(l)
        };

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(&x), tape.param(&w), tape.param(&b));
        let z = tape.affine(xv, wv, bv).unwrap();
        let s = tape.sigmoid(z);
        let p = tape.constant(proj.clone());
        let m = tape.mul(s, p).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();

        let h = 1e-2f32;
        for (var, tensor, which) in [(xv, &x, 0usize), (wv, &w, 1), (bv, &b, 2)] {
            let grad = tape.grad(var).unwrap().clone();
            for ci in 0..tensor.len() {
                let perturb = |delta: f32| -> f32 {
                    let (mut xs, mut ws, mut bs) = (x.clone(), w.clone(), b.clone());
                    match which {
                        0 => xs.data_mut()[ci] += delta,
                        1 => ws.data_mut()[ci] += delta,
                        _ => bs.data_mut()[ci] += delta,
                    }
                    loss(&xs, &ws, &bs)
                };
                let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                let analytic = grad.data()[ci];
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-2);
                assert!(
                    rel < 1e-2,
                    "f32 gradient off at coord {}: numeric {} vs analytic {}",
                    ci,
                    numeric,
                    analytic
                );
            }
        }
    }

    #[test]
    fn report_table_lists_every_op() {
        let results = vec![CheckResult {
            name: "demo".into(),
            instances: 1,
            coordinates: 10,
            max_rel_error: 1e-9,
            tolerance: 1e-5,
            passed: true,
        }];
        let t = table(&results);
        assert!(t.contains("demo"));
        assert!(t.contains("ok"));
    }
}

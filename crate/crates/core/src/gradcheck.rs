//! Finite-difference verification of every gradient rule.
//!
//! Each check builds a scalar objective from fresh leaf tensors, takes the
//! analytic gradient off the tape, and compares it element by element
//! against central differences of the rebuilt objective. Inputs are nudged
//! away from non-smooth points (relu / l1 kinks) before checking.

use crate::rng::Rng;
use crate::tensor::{EngineResult, Tape, Tensor};

pub const FD_EPSILON: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

/// Outcome of checking one operation.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub elements: usize,
    pub passed: bool,
}

/// A scalar-valued graph builder over a fixed set of leaf inputs.
type Builder = fn(&mut Tape, &[Tensor]) -> EngineResult<Tensor>;

struct Case {
    label: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn rand_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Push values away from a kink at zero so the central difference stays on
/// one side of it.
fn clear_kink(t: &Tensor, margin: f64) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v.abs() < margin {
                v + if v >= 0.0 {
                    2.0 * margin
                } else {
                    -2.0 * margin
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Reduce an arbitrary tensor to a scalar in a way that weights every
/// element differently: mse against a fixed quasi-random target.
fn reduce(tape: &mut Tape, out: &Tensor) -> EngineResult<Tensor> {
    let n = out.len();
    let target: Vec<f64> = (0..n)
        .map(|i| ((i as f64 * 0.7311) + 0.13).sin() * 0.5)
        .collect();
    let t = Tensor::new(out.shape().to_vec(), target)?;
    tape.mse_loss(out, &t)
}

fn evaluate(case: &Case, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    (case.build)(&mut tape, &leaves)
        .expect("gradcheck forward failed")
        .item()
}

/// Max relative error across all elements of all inputs of one case.
#[allow(clippy::needless_range_loop)]
fn check_case(case: &Case) -> (f64, usize) {
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = (case.build)(&mut tape, &leaves).expect("gradcheck forward failed");
    let wanted: Vec<usize> = leaves.iter().map(|l| l.node_id().unwrap()).collect();
    let grads = tape
        .backward(&root, &wanted)
        .expect("gradcheck backward failed");

    let mut max_err = 0.0f64;
    let mut elements = 0;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = &grads[&leaf.node_id().unwrap()];
        for idx in 0..case.inputs[which].len() {
            let mut plus = case.inputs.to_vec();
            let mut minus = case.inputs.to_vec();
            plus[which] = perturb(&case.inputs[which], idx, FD_EPSILON);
            minus[which] = perturb(&case.inputs[which], idx, -FD_EPSILON);
            let numeric = (evaluate(case, &plus) - evaluate(case, &minus)) / (2.0 * FD_EPSILON);
            max_err = max_err.max(rel_err(analytic[idx], numeric));
            elements += 1;
        }
    }
    (max_err, elements)
}

fn perturb(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] += delta;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-9 && n.abs() < 1e-9 {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

fn cases_for(op: &str) -> Vec<Case> {
    let mut rng = Rng::new(0xC0FFEE ^ hash_label(op));
    let mut cases = Vec::new();
    match op {
        "conv2d" => {
            for (label, b, ci, h, w, co, k, s, p) in [
                ("2x3x5x5/4x3x3x3 s1 p1", 2, 3, 5, 5, 4, 3, 1usize, 1usize),
                ("1x2x6x6/3x2x4x4 s2 p1", 1, 2, 6, 6, 3, 4, 2, 1),
                ("2x1x5x4/2x1x3x3 s2 p0", 2, 1, 5, 4, 2, 3, 2, 0),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, vec![b, ci, h, w], -1.0, 1.0),
                        rand_tensor(&mut rng, vec![co, ci, k, k], -0.5, 0.5),
                        rand_tensor(&mut rng, vec![co], -0.2, 0.2),
                    ],
                    build: match (s, p) {
                        (1, 1) => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv2d(&x[0], &x[1], &x[2], 1, 1)?;
                            reduce(t, &y)
                        },
                        (2, 1) => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv2d(&x[0], &x[1], &x[2], 2, 1)?;
                            reduce(t, &y)
                        },
                        _ => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv2d(&x[0], &x[1], &x[2], 2, 0)?;
                            reduce(t, &y)
                        },
                    },
                });
            }
        }
        "conv_transpose2d" => {
            for (label, b, ci, h, w, co, k, s, p) in [
                ("2x3x4x4/3x2x3x3 s1 p1", 2, 3, 4, 4, 2, 3, 1usize, 1usize),
                ("1x2x3x4/2x3x4x4 s2 p1", 1, 2, 3, 4, 3, 4, 2, 1),
                ("2x2x3x3/2x1x3x3 s2 p0", 2, 2, 3, 3, 1, 3, 2, 0),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, vec![b, ci, h, w], -1.0, 1.0),
                        rand_tensor(&mut rng, vec![ci, co, k, k], -0.5, 0.5),
                        rand_tensor(&mut rng, vec![co], -0.2, 0.2),
                    ],
                    build: match (s, p) {
                        (1, 1) => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv_transpose2d(&x[0], &x[1], &x[2], 1, 1)?;
                            reduce(t, &y)
                        },
                        (2, 1) => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv_transpose2d(&x[0], &x[1], &x[2], 2, 1)?;
                            reduce(t, &y)
                        },
                        _ => |t: &mut Tape, x: &[Tensor]| {
                            let y = t.conv_transpose2d(&x[0], &x[1], &x[2], 2, 0)?;
                            reduce(t, &y)
                        },
                    },
                });
            }
        }
        "instance_norm" => {
            for (label, b, c, h, w) in [
                ("2x3x4x4", 2usize, 3usize, 4usize, 4usize),
                ("1x2x5x3", 1, 2, 5, 3),
                ("3x1x2x6", 3, 1, 2, 6),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                        rand_tensor(&mut rng, vec![c], 0.5, 1.5),
                        rand_tensor(&mut rng, vec![c], -0.5, 0.5),
                    ],
                    build: |t, x| {
                        let y = t.instance_norm(&x[0], &x[1], &x[2], 1e-5)?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "relu" => {
            for (label, n) in [("vec 17", 17usize), ("vec 8", 8), ("vec 31", 31)] {
                cases.push(Case {
                    label,
                    inputs: vec![clear_kink(&rand_tensor(&mut rng, vec![n], -1.0, 1.0), 1e-3)],
                    build: |t, x| {
                        let y = t.relu(&x[0])?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "leaky_relu" => {
            for (label, n) in [("vec 17", 17usize), ("vec 8", 8), ("vec 31", 31)] {
                cases.push(Case {
                    label,
                    inputs: vec![clear_kink(&rand_tensor(&mut rng, vec![n], -1.0, 1.0), 1e-3)],
                    build: |t, x| {
                        let y = t.leaky_relu(&x[0], 0.2)?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "tanh" => {
            for (label, n) in [("vec 17", 17usize), ("vec 8", 8), ("vec 31", 31)] {
                cases.push(Case {
                    label,
                    inputs: vec![rand_tensor(&mut rng, vec![n], -2.0, 2.0)],
                    build: |t, x| {
                        let y = t.tanh(&x[0])?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "add" => {
            for (label, shape) in [
                ("2x3", vec![2usize, 3usize]),
                ("4", vec![4]),
                ("1x2x2x2", vec![1, 2, 2, 2]),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, shape.clone(), -1.0, 1.0),
                        rand_tensor(&mut rng, shape, -1.0, 1.0),
                    ],
                    build: |t, x| {
                        let y = t.add(&x[0], &x[1])?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "scale" => {
            for (label, n) in [("vec 5", 5usize), ("vec 9", 9), ("vec 13", 13)] {
                cases.push(Case {
                    label,
                    inputs: vec![rand_tensor(&mut rng, vec![n], -1.0, 1.0)],
                    build: |t, x| {
                        let y = t.scale(&x[0], -2.5)?;
                        reduce(t, &y)
                    },
                });
            }
        }
        "sum" => {
            for (label, n) in [("vec 5", 5usize), ("vec 9", 9), ("vec 13", 13)] {
                cases.push(Case {
                    label,
                    inputs: vec![rand_tensor(&mut rng, vec![n], -1.0, 1.0)],
                    build: |t, x| t.sum(&x[0]),
                });
            }
        }
        "l1_loss" => {
            for (label, n) in [("vec 12", 12usize), ("vec 7", 7), ("vec 20", 20)] {
                // Keep |a - b| away from the kink.
                let b = rand_tensor(&mut rng, vec![n], -1.0, 1.0);
                let a_data: Vec<f64> = b
                    .data()
                    .iter()
                    .map(|&v| {
                        v + rng.uniform(0.05, 0.6) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }
                    })
                    .collect();
                let a = Tensor::new(vec![n], a_data).unwrap();
                cases.push(Case {
                    label,
                    inputs: vec![a, b],
                    build: |t, x| t.l1_loss(&x[0], &x[1]),
                });
            }
        }
        "mse_loss" => {
            for (label, n) in [("vec 12", 12usize), ("vec 7", 7), ("vec 20", 20)] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, vec![n], -1.0, 1.0),
                        rand_tensor(&mut rng, vec![n], -1.0, 1.0),
                    ],
                    build: |t, x| t.mse_loss(&x[0], &x[1]),
                });
            }
        }
        "bce_with_logits" => {
            for (label, n) in [
                ("vec 12 t=1", 12usize),
                ("vec 7 t=0", 7),
                ("vec 20 t=1", 20),
            ] {
                let target_one = label.ends_with("t=1");
                cases.push(Case {
                    label,
                    inputs: vec![rand_tensor(&mut rng, vec![n], -3.0, 3.0)],
                    build: if target_one {
                        |t, x| t.bce_with_logits(&x[0], 1.0)
                    } else {
                        |t, x| t.bce_with_logits(&x[0], 0.0)
                    },
                });
            }
        }
        _ => {}
    }
    cases
}

fn hash_label(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// All checkable operation names, in report order.
pub fn op_names() -> Vec<&'static str> {
    vec![
        "conv2d",
        "conv_transpose2d",
        "instance_norm",
        "relu",
        "leaky_relu",
        "tanh",
        "add",
        "scale",
        "sum",
        "l1_loss",
        "mse_loss",
        "bce_with_logits",
        "cyclic_loss",
        "deviation_loss",
        "adversarial_generator_loss",
        "adversarial_discriminator_loss",
    ]
}

/// Run the finite-difference suite, optionally restricted to one op.
/// Returns `Err` with the bad name if the filter matches nothing.
pub fn run(filter: Option<&str>) -> Result<Vec<CheckReport>, String> {
    let names = op_names();
    if let Some(f) = filter {
        if !names.contains(&f) {
            return Err(format!("unknown op '{f}' (known: {})", names.join(", ")));
        }
    }
    let mut reports = Vec::new();
    for name in names {
        if filter.is_some_and(|f| f != name) {
            continue;
        }
        let cases = if is_composite_loss(name) {
            composite_cases(name)
        } else {
            cases_for(name)
        };
        let mut max_err = 0.0f64;
        let mut elements = 0;
        for case in &cases {
            let (err, n) = check_case(case);
            max_err = max_err.max(err);
            elements += n;
            let _ = case.label;
        }
        reports.push(CheckReport {
            op: name.to_string(),
            max_rel_err: max_err,
            elements,
            passed: max_err <= REL_TOLERANCE,
        });
    }
    Ok(reports)
}

fn is_composite_loss(name: &str) -> bool {
    matches!(
        name,
        "cyclic_loss"
            | "deviation_loss"
            | "adversarial_generator_loss"
            | "adversarial_discriminator_loss"
    )
}

/// A tensor offset elementwise from `base` by at least `min_gap`, so L1
/// terms stay away from their kink.
fn offset_from(rng: &mut Rng, base: &Tensor, min_gap: f64, max_gap: f64) -> Tensor {
    let data: Vec<f64> = base
        .data()
        .iter()
        .map(|&v| v + rng.uniform(min_gap, max_gap) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 })
        .collect();
    Tensor::new(base.shape().to_vec(), data).unwrap()
}

fn composite_cases(op: &str) -> Vec<Case> {
    use crate::losses::{
        adversarial_discriminator_loss, adversarial_generator_loss, cyclic_loss, deviation_loss,
        LossWeights,
    };
    let mut rng = Rng::new(0xBEEF ^ hash_label(op));
    let mut cases = Vec::new();
    match op {
        "cyclic_loss" => {
            for (label, shape) in [
                ("1x3x4x4", vec![1usize, 3, 4, 4]),
                ("2x3x2x2", vec![2, 3, 2, 2]),
                ("vec 10", vec![10]),
            ] {
                let input = rand_tensor(&mut rng, shape, -1.0, 1.0);
                let cyclic = offset_from(&mut rng, &input, 0.05, 0.5);
                cases.push(Case {
                    label,
                    inputs: vec![input, cyclic],
                    build: |t, x| cyclic_loss(t, &x[0], &x[1], &LossWeights::default()),
                });
            }
        }
        "deviation_loss" => {
            for (label, enc_shape, img_shape) in [
                ("enc 1x4x3x3", vec![1usize, 4, 3, 3], vec![1usize, 3, 4, 4]),
                ("enc 2x2x2x2", vec![2, 2, 2, 2], vec![2, 3, 2, 2]),
                ("enc vec 9", vec![9], vec![6]),
            ] {
                let enc_b = rand_tensor(&mut rng, enc_shape, -1.0, 1.0);
                let trans = offset_from(&mut rng, &enc_b, 0.05, 0.5);
                let img = rand_tensor(&mut rng, img_shape, -1.0, 1.0);
                let cyc = offset_from(&mut rng, &img, 0.05, 0.5);
                cases.push(Case {
                    label,
                    inputs: vec![enc_b, trans, img, cyc],
                    build: |t, x| {
                        deviation_loss(t, &x[0], &x[1], &x[2], &x[3], &LossWeights::default())
                            .map(|d| d.total)
                    },
                });
            }
        }
        "adversarial_generator_loss" => {
            for (label, shape) in [
                ("1x1x2x2", vec![1usize, 1, 2, 2]),
                ("2x1x3x3", vec![2, 1, 3, 3]),
                ("vec 6", vec![6]),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![rand_tensor(&mut rng, shape, -2.0, 2.0)],
                    build: |t, x| adversarial_generator_loss(t, &x[0], &LossWeights::default()),
                });
            }
        }
        "adversarial_discriminator_loss" => {
            for (label, shape) in [
                ("1x1x2x2", vec![1usize, 1, 2, 2]),
                ("2x1x3x3", vec![2, 1, 3, 3]),
                ("vec 6", vec![6]),
            ] {
                cases.push(Case {
                    label,
                    inputs: vec![
                        rand_tensor(&mut rng, shape.clone(), -2.0, 2.0),
                        rand_tensor(&mut rng, shape, -2.0, 2.0),
                    ],
                    build: |t, x| {
                        adversarial_discriminator_loss(t, &x[0], &x[1], &LossWeights::default())
                    },
                });
            }
        }
        _ => {}
    }
    cases
}

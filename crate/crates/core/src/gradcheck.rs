//! Finite-difference verification of the analytic gradients.
//!
//! Central differences with h = 1e-5 at 64-bit. The error metric is
//! |analytic - numeric| / max(1, |analytic|, |numeric|), an absolute
//! tolerance near zero and a relative one for large entries. ReLU inputs are
//! sampled away from the kink, where finite differences are meaningless.

use std::rc::Rc;

use crate::data::{Batch, Vocab};
use crate::model::{model_forward, ModelParams, Mode, MscConfig};
use crate::rng::{sub_seed, Rng};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Tensor;
use crate::train::label_smoothed_cross_entropy;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub checked: usize,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: &str, max_err: f64, checked: usize) -> CheckReport {
        CheckReport { name: name.to_string(), max_err, checked, pass: max_err < FD_TOLERANCE }
    }
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must construct the same scalar loss from the leaves it is handed,
/// in order; it runs twice per checked component.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &mut dyn FnMut(&mut Tape<f64>, &[Var]) -> Var,
    components: Option<&[(usize, usize)]>,
) -> CheckReport {
    let mut eval = |tensors: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone().requires_grad())).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.value(loss).item();
        if !want_grads {
            return (value, Vec::new());
        }
        tape.backward(loss);
        let grads = vars.iter().map(|&v| tape.grad_tensor(v).values).collect();
        (value, grads)
    };

    let owned: Vec<(usize, usize)>;
    let components: &[(usize, usize)] = match components {
        Some(c) => c,
        None => {
            owned = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
                .collect();
            &owned
        }
    };

    let (_, analytic) = eval(inputs, true);
    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, k) in components {
        let orig = work[i].values[k];
        work[i].values[k] = orig + FD_STEP;
        let (fp, _) = eval(&work, false);
        work[i].values[k] = orig - FD_STEP;
        let (fm, _) = eval(&work, false);
        work[i].values[k] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        max_err = max_err.max(relative_error(analytic[i][k], numeric));
    }
    CheckReport::new(name, max_err, components.len())
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect())
}

/// Random tensor whose entries stay at least `margin` away from zero, for
/// kink-free ReLU checks.
fn rand_tensor_off_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.range(margin, 1.5)
        })
        .collect();
    Tensor::new(shape.to_vec(), values)
}

/// Weighted-sum loss so the output gradient is non-uniform.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, weights: Tensor<f64>) -> Var {
    let w = tape.constant(weights);
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

/// Finite-difference checks of every primitive, one seed each call.
pub fn primitive_suite(seed: u64) -> Vec<CheckReport> {
    let mut reports = Vec::new();
    let mut rng = Rng::new(sub_seed(seed, "gradcheck"));

    // matmul, 2d and batched-broadcast
    {
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        reports.push(check_gradients("matmul", &[a, b], &mut |t, v| {
            let c = t.matmul(v[0], v[1]);
            weighted_loss(t, c, w.clone())
        }, None));

        let a = rand_tensor(&mut rng, &[2, 2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 2], -1.0, 1.0);
        reports.push(check_gradients("matmul_batched", &[a, b], &mut |t, v| {
            let c = t.matmul(v[0], v[1]);
            weighted_loss(t, c, w.clone())
        }, None));

        let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
        reports.push(check_gradients("matmul_bt", &[a, b], &mut |t, v| {
            let c = t.matmul_bt(v[0], v[1]);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // add / mul with broadcasting
    for (name, shapes) in [
        ("add_same", (vec![2, 3], vec![2, 3])),
        ("add_suffix", (vec![2, 3], vec![3])),
        ("add_inner_one", (vec![2, 3], vec![2, 1])),
        ("mul_same", (vec![2, 3], vec![2, 3])),
        ("mul_suffix", (vec![2, 3], vec![3])),
    ] {
        let a = rand_tensor(&mut rng, &shapes.0, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &shapes.1, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &shapes.0, -1.0, 1.0);
        let is_mul = name.starts_with("mul");
        reports.push(check_gradients(name, &[a, b], &mut |t, v| {
            let c = if is_mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) };
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // scale / add_scalar
    {
        let a = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        reports.push(check_gradients("scale", std::slice::from_ref(&a), &mut |t, v| {
            let c = t.scale(v[0], -1.7);
            weighted_loss(t, c, w.clone())
        }, None));
        reports.push(check_gradients("add_scalar", &[a], &mut |t, v| {
            let c = t.add_scalar(v[0], 0.37);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // activations
    {
        let a = rand_tensor_off_zero(&mut rng, &[3, 3], 1e-3);
        let w = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        reports.push(check_gradients("relu", &[a], &mut |t, v| {
            let c = t.relu(v[0]);
            weighted_loss(t, c, w.clone())
        }, None));
        let a = rand_tensor(&mut rng, &[3, 3], -2.0, 2.0);
        reports.push(check_gradients("sigmoid", std::slice::from_ref(&a), &mut |t, v| {
            let c = t.sigmoid(v[0]);
            weighted_loss(t, c, w.clone())
        }, None));
        reports.push(check_gradients("tanh", &[a], &mut |t, v| {
            let c = t.tanh(v[0]);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // softmax / log_softmax, with and without mask
    {
        let a = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        reports.push(check_gradients("softmax", std::slice::from_ref(&a), &mut |t, v| {
            let c = t.softmax(v[0], 1, None);
            weighted_loss(t, c, w.clone())
        }, None));
        let mask = Rc::new(Mask::new(
            vec![2, 5],
            vec![true, true, false, true, true, false, false, true, true, true],
        ));
        reports.push(check_gradients("softmax_masked", std::slice::from_ref(&a), &mut |t, v| {
            let c = t.softmax(v[0], 1, Some(mask.clone()));
            weighted_loss(t, c, w.clone())
        }, None));
        reports.push(check_gradients("log_softmax", &[a], &mut |t, v| {
            let c = t.log_softmax(v[0], 1);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // layer norm (inputs with healthy variance)
    {
        let x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[6], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        reports.push(check_gradients("layer_norm", &[x, gamma, beta], &mut |t, v| {
            let c = t.layer_norm(v[0], v[1], v[2], 1e-6);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // reductions and shape ops
    {
        let a = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
        reports.push(check_gradients("sum", std::slice::from_ref(&a), &mut |t, v| t.sum(v[0]), None));
        let w = rand_tensor(&mut rng, &[12], -1.0, 1.0);
        reports.push(check_gradients("reshape", std::slice::from_ref(&a), &mut |t, v| {
            let c = t.reshape(v[0], &[12]);
            weighted_loss(t, c, w.clone())
        }, None));
        let w = rand_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
        reports.push(check_gradients("permute", &[a], &mut |t, v| {
            let c = t.permute(v[0], &[2, 0, 1]);
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // gather (repeated rows exercise scatter-add)
    {
        let table = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        let ids = Rc::new(vec![4, 0, 4, 2]);
        let w = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        reports.push(check_gradients("gather", &[table], &mut |t, v| {
            let c = t.gather(v[0], ids.clone());
            weighted_loss(t, c, w.clone())
        }, None));
    }

    // composite chain touching several rules at once
    {
        let x = rand_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let m = rand_tensor(&mut rng, &[4, 4], -0.7, 0.7);
        reports.push(check_gradients("composite", &[x, m], &mut |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.tanh(h);
            let s = t.softmax(h, 1, None);
            let q = t.mul(s, h);
            t.sum(q)
        }, None));
    }

    reports
}

/// A 2-block MSC config small enough for exhaustive FD sweeps.
pub fn tiny_msc_config() -> MscConfig {
    let mut cfg = MscConfig::toy(11);
    cfg.n_blocks = 2;
    cfg.layers_per_block = vec![1, 2];
    cfg.d_model = 16;
    cfg.d_ffn = 24;
    cfg.heads = 2;
    cfg.mode = Mode::Msc;
    cfg
}

/// Finite-difference check of the full model loss with respect to every
/// parameter. `samples_per_tensor` of 0 sweeps every component.
pub fn check_model(cfg: &MscConfig, seed: u64, samples_per_tensor: usize) -> CheckReport {
    let params = ModelParams::<Tensor<f64>>::init(cfg, seed);
    let mut rng = Rng::new(sub_seed(seed, "gradcheck.model"));
    // Random short batch with one padding row to exercise the masks.
    let v = cfg.vocab_size;
    let pairs = vec![
        (
            (0..4).map(|_| 4 + rng.below(v - 4)).collect::<Vec<_>>(),
            (0..5).map(|_| 4 + rng.below(v - 4)).collect::<Vec<_>>(),
        ),
        (
            (0..2).map(|_| 4 + rng.below(v - 4)).collect::<Vec<_>>(),
            (0..3).map(|_| 4 + rng.below(v - 4)).collect::<Vec<_>>(),
        ),
    ];
    let batch = Batch::from_pairs(&pairs);

    let inputs: Vec<Tensor<f64>> = {
        let mut t = Vec::new();
        params.for_each(&mut |_, p| t.push(p.clone()));
        t
    };
    let components: Option<Vec<(usize, usize)>> = if samples_per_tensor == 0 {
        None
    } else {
        let mut c = Vec::new();
        for (i, t) in inputs.iter().enumerate() {
            for _ in 0..samples_per_tensor.min(t.numel()) {
                c.push((i, rng.below(t.numel())));
            }
        }
        Some(c)
    };

    let template = params;
    let mut build = |tape: &mut Tape<f64>, vars: &[Var]| -> Var {
        let bound = template.unflatten(vars);
        let trace = model_forward(tape, &bound, cfg, &batch, None);
        label_smoothed_cross_entropy(tape, trace.logits, &batch.tgt_out, Vocab::PAD, 0.1)
    };
    check_gradients("model_loss", &inputs, &mut build, components.as_deref())
}

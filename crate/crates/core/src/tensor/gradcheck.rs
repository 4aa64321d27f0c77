//! Central finite-difference checks of reverse-mode gradients (f64).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Stencil half-width.
pub const H: f64 = 1e-5;

/// Number of distinct randomized cases in [`primitive_case`].
pub const CASES: usize = 24;

/// Builds an output from input variables.
pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Kept away from zero so kinks (relu) are never straddled by the stencil.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Evaluates `sum(out * probe)` so that every output element contributes.
pub fn loss_of(build: &Build, inputs: &[Tensor<f64>], probe: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> (Tape<f64>, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.shape(out).to_vec();
    let p = probe.get_or_insert_with(|| rand_tensor(rng, &shape)).clone();
    let p = tape.constant(p);
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    (tape, loss, vars)
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e-3)` between analytic and
/// numeric gradients over every input element.
pub fn max_rel_error(build: &Build, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    let mut probe = None;
    let (tape, loss, vars) = loss_of(build, &inputs, &mut probe, rng);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for j in 0..inputs[k].len() {
            let mut eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[j] += delta;
                let (t, l, _) = loss_of(build, &perturbed, &mut probe, rng);
                t.value(l).item()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..5)).collect()
}

/// Randomized case `idx % CASES`: (primitive name, builder, inputs).
pub fn primitive_case(idx: usize, rng: &mut ChaCha8Rng) -> (&'static str, Box<Build>, Vec<Tensor<f64>>) {
    let d = dims(rng, 4);
    let (a, b, c, e) = (d[0], d[1], d[2], d[3]);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);
    match idx % CASES {
        0 => ("matmul", Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()), vec![r(rng, &[a, b, c]), r(rng, &[c, e])]),
        1 => ("bmm", Box::new(|t, v| t.bmm(v[0], v[1]).unwrap()), vec![r(rng, &[a, b, c]), r(rng, &[a, c, e])]),
        2 => ("transpose", Box::new(|t, v| t.transpose(v[0]).unwrap()), vec![r(rng, &[a, b, c])]),
        3 => (
            "reshape",
            Box::new(move |t, v| t.reshape(v[0], &[b * a, c]).unwrap()),
            vec![r(rng, &[a, b, c])],
        ),
        4 => ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap()), vec![r(rng, &[a, b]), r(rng, &[a, b])]),
        5 => ("sub", Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), vec![r(rng, &[a, b]), r(rng, &[a, b])]),
        6 => ("add_row", Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()), vec![r(rng, &[a, b, c]), r(rng, &[c])]),
        7 => ("mul", Box::new(|t, v| t.mul(v[0], v[1]).unwrap()), vec![r(rng, &[a, b]), r(rng, &[a, b])]),
        8 => ("mul_row", Box::new(|t, v| t.mul_row(v[0], v[1]).unwrap()), vec![r(rng, &[a, b]), r(rng, &[b])]),
        9 => {
            let k: f64 = rng.gen_range(-2.0..2.0);
            ("scale", Box::new(move |t, v| t.scale(v[0], k)), vec![r(rng, &[a, b])])
        }
        10 => ("add_scalar", Box::new(|t, v| t.add_scalar(v[0], 0.7)), vec![r(rng, &[a, b])]),
        11 => {
            let axis = rng.gen_range(0..3);
            ("softmax", Box::new(move |t, v| t.softmax(v[0], axis).unwrap()), vec![r(rng, &[a, b + 1, c])])
        }
        12 => ("sigmoid", Box::new(|t, v| t.sigmoid(v[0])), vec![r(rng, &[a, b])]),
        13 => ("silu", Box::new(|t, v| t.silu(v[0])), vec![r(rng, &[a, b])]),
        14 => ("relu", Box::new(|t, v| t.relu(v[0])), vec![r(rng, &[a, b])]),
        15 => (
            "layer_norm",
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            vec![r(rng, &[a, b + 1]), r(rng, &[b + 1]), r(rng, &[b + 1])],
        ),
        16 => {
            let ids: Vec<usize> = (0..b + 2).map(|_| rng.gen_range(0..a)).collect();
            ("embedding", Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()), vec![r(rng, &[a, c])])
        }
        17 => {
            let axis = rng.gen_range(0..2);
            let (s1, s2) = if axis == 0 { ([a, c], [b, c]) } else { ([a, b], [a, c]) };
            (
                "concat",
                Box::new(move |t, v| t.concat(&[v[0], v[1], v[0]], axis).unwrap()),
                vec![r(rng, &s1), r(rng, &s2)],
            )
        }
        18 => {
            let full = b + 2;
            let start = rng.gen_range(0..full);
            let len = rng.gen_range(1..=full - start);
            ("slice", Box::new(move |t, v| t.slice(v[0], 1, start, len).unwrap()), vec![r(rng, &[a, full, c])])
        }
        19 => ("sum", Box::new(|t, v| t.sum(v[0])), vec![r(rng, &[a, b, c])]),
        20 => {
            let fill: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ("mix", Box::new(move |t, v| t.mix(v[0], v[1], &fill).unwrap()), vec![r(rng, &[a, b]), r(rng, &[b])])
        }
        21 => {
            let keep: Vec<bool> = (0..b).map(|_| rng.gen_bool(0.5)).collect();
            let fill: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (
                "select_cols",
                Box::new(move |t, v| t.select_cols(v[0], &keep, &fill).unwrap()),
                vec![r(rng, &[a, b])],
            )
        }
        22 => {
            let v = b + 1;
            let mut target = Vec::new();
            for _ in 0..a {
                let row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = row.iter().sum();
                target.extend(row.iter().map(|x| x / s));
            }
            let target = Tensor::new(&[a, v], target).unwrap();
            let weights: Vec<f64> = (0..a).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect();
            (
                "cross_entropy_soft",
                Box::new(move |t, vars| t.cross_entropy_soft(vars[0], &target, &weights, 2.5).unwrap()),
                vec![r(rng, &[a, v])],
            )
        }
        _ => (
            // A miniature attention block with a sigmoid-gated output.
            "attention_composite",
            Box::new(|t, v| {
                let q = t.matmul(v[0], v[1]).unwrap();
                let kt = t.transpose(q).unwrap();
                let s = t.bmm(q, kt).unwrap();
                let p = t.softmax(s, 2).unwrap();
                let o = t.bmm(p, v[0]).unwrap();
                let g = t.sigmoid(v[2]);
                let m = t.mix(o, g, &[0.3, -0.2, 0.1]).unwrap();
                t.silu(m)
            }),
            vec![r(rng, &[a, b + 1, 3]), r(rng, &[3, 3]), r(rng, &[3])],
        ),
    }
}


/// Runs `n` randomized primitive cases from `seed`; returns the worst
/// relative error with the primitive that produced it.
pub fn check_primitives(n: usize, seed: u64) -> (f64, &'static str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, "");
    for idx in 0..n {
        let (name, build, inputs) = primitive_case(idx, &mut rng);
        let err = max_rel_error(build.as_ref(), inputs, &mut rng);
        if worst.1.is_empty() || err > worst.0 {
            worst = (err, name);
        }
    }
    worst
}

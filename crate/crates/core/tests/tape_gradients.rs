//! Central-difference checks of every differentiable tape operation.

use survmix::numerics::{SeededRng, Tape, Tensor, Var};

type Op = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Projects the op output onto fixed random weights so every output entry carries gradient.
fn evaluate(
    op: &Op,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    rng: &mut SeededRng,
) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = op(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let w = weights.get_or_insert_with(|| random(rng, &shape, -1.0, 1.0)).clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    (tape.scalar_value(loss), vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn check(name: &str, op: &Op, inputs: Vec<Tensor<f64>>) {
    let mut rng = SeededRng::new(17);
    let mut weights = None;
    let (_, analytic) = evaluate(op, &inputs, &mut weights, &mut rng);
    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut shifted = inputs.clone();
            shifted[i].data_mut()[j] += h;
            let (up, _) = evaluate(op, &shifted, &mut weights, &mut rng);
            shifted[i].data_mut()[j] -= 2.0 * h;
            let (down, _) = evaluate(op, &shifted, &mut weights, &mut rng);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{name}: input {i} entry {j}: tape {a} vs differences {fd}"
            );
        }
    }
}

#[test]
fn binary_ops() {
    let mut rng = SeededRng::new(1);
    let (a, b) = (
        random(&mut rng, &[3, 4], -2.0, 2.0),
        random(&mut rng, &[3, 4], -2.0, 2.0),
    );
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), vec![a.clone(), b.clone()]);
    check("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), vec![a.clone(), b]);
    let c = random(&mut rng, &[4, 2], -2.0, 2.0);
    check("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), vec![a, c]);
}

#[test]
fn broadcasts() {
    let mut rng = SeededRng::new(2);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let row = random(&mut rng, &[1, 4], -2.0, 2.0);
    let col = random(&mut rng, &[3, 1], -2.0, 2.0);
    check(
        "add_row",
        &|t, v| t.add_row(v[0], v[1]).unwrap(),
        vec![a.clone(), row.clone()],
    );
    check("mul_row", &|t, v| t.mul_row(v[0], v[1]).unwrap(), vec![a.clone(), row]);
    check(
        "add_col",
        &|t, v| t.add_col(v[0], v[1]).unwrap(),
        vec![a.clone(), col.clone()],
    );
    check("mul_col", &|t, v| t.mul_col(v[0], v[1]).unwrap(), vec![a, col]);
}

#[test]
fn elementwise() {
    let mut rng = SeededRng::new(3);
    let any = random(&mut rng, &[2, 5], -2.0, 2.0);
    let positive = random(&mut rng, &[2, 5], 0.3, 3.0);
    check("scale", &|t, v| t.scale(v[0], -1.7), vec![any.clone()]);
    check("add_scalar", &|t, v| t.add_scalar(v[0], 0.4), vec![any.clone()]);
    check("neg", &|t, v| t.neg(v[0]), vec![any.clone()]);
    check("exp", &|t, v| t.exp(v[0]), vec![any.clone()]);
    check("softplus", &|t, v| t.softplus(v[0]), vec![any.clone()]);
    check("log", &|t, v| t.log(v[0]), vec![positive.clone()]);
    check("sqrt", &|t, v| t.sqrt(v[0]), vec![positive.clone()]);
    check("recip", &|t, v| t.recip(v[0]), vec![positive]);
    // Kinks sit at zero and at the floor; keep inputs away from both.
    let away = any.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check("relu", &|t, v| t.relu(v[0]), vec![away.clone()]);
    let floored = any.map(|x| if (x - 0.5).abs() < 0.1 { x + 0.3 } else { x });
    check("clamp_min", &|t, v| t.clamp_min(v[0], 0.5), vec![floored]);
}

#[test]
fn reductions_and_layout() {
    let mut rng = SeededRng::new(4);
    let a = random(&mut rng, &[3, 4], -2.0, 2.0);
    let b = random(&mut rng, &[3, 2], -2.0, 2.0);
    check("row_sum", &|t, v| t.row_sum(v[0]), vec![a.clone()]);
    check("sum", &|t, v| t.sum(v[0]), vec![a.clone()]);
    check("mean", &|t, v| t.mean(v[0]), vec![a.clone()]);
    check("transpose", &|t, v| t.transpose(v[0]), vec![a.clone()]);
    check("reshape", &|t, v| t.reshape(v[0], &[2, 6]).unwrap(), vec![a.clone()]);
    check(
        "concat_cols",
        &|t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
        vec![a.clone(), b],
    );
    check("slice_cols", &|t, v| t.slice_cols(v[0], 1, 3).unwrap(), vec![a]);
}

#[test]
fn row_normalizations() {
    let mut rng = SeededRng::new(5);
    let a = random(&mut rng, &[3, 4], -3.0, 3.0);
    check("softmax_rows", &|t, v| t.softmax_rows(v[0]).unwrap(), vec![a.clone()]);
    check("normalize_rows", &|t, v| t.normalize_rows(v[0], 1e-5).unwrap(), vec![a]);
}

#[test]
fn shared_input_accumulates() {
    let mut rng = SeededRng::new(6);
    let a = random(&mut rng, &[3, 3], -1.0, 1.0);
    check(
        "a·a + exp(a)",
        &|t, v| {
            let sq = t.matmul(v[0], v[0]).unwrap();
            let e = t.exp(v[0]);
            t.add(sq, e).unwrap()
        },
        vec![a],
    );
}

//! Tape gradients vs central finite differences for every op and layer.

use camgen::autodiff::check::{central_difference, check_params, relative_error};
use camgen::autodiff::init;
use camgen::autodiff::layers::{Activation, GruCell, Mlp};
use camgen::autodiff::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut init::SeededRng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d(sum(w ⊙ op(inputs)))/d(input k) for every input, with fixed random weights `w`
/// so that every output element contributes.
fn check_op(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = init::rng(99);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars);
        g.value(out).clone()
    };
    let weights = random(&mut rng, probe.rows(), probe.cols());

    let eval = |ins: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };

    let (mut g, vars, loss) = eval(&inputs);
    g.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = central_difference(
            |x| {
                let mut ins = inputs.clone();
                ins[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).unwrap();
                let (g, _, l) = eval(&ins);
                g.value(l).item().unwrap()
            },
            inputs[k].data(),
            H,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err <= TOL, "input {k}: relative error {err:e}\n{analytic:?}\n{numeric:?}");
    }
}

#[test]
fn matmul_variants() {
    let mut rng = init::rng(1);
    check_op(vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op(vec![random(&mut rng, 3, 4), random(&mut rng, 5, 4)], |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    check_op(vec![random(&mut rng, 3, 4)], |g, v| g.transpose(v[0]).unwrap());
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = init::rng(2);
    let (a, b, r) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4));
    check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), r.clone()], |g, v| g.add_row(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), r.clone()], |g, v| g.mul_row(v[0], v[1]).unwrap());
    check_op(vec![a.clone()], |g, v| g.affine_scalar(v[0], -1.7, 0.3));
    check_op(vec![a.clone()], |g, v| g.tanh(v[0]));
    check_op(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check_op(vec![a.clone()], |g, v| g.exp(v[0]));
    check_op(vec![a.map(|x| x.abs() + 0.5)], |g, v| g.log(v[0]));
    // keep away from the kink
    check_op(vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |g, v| g.relu(v[0]));
    check_op(vec![a.map(|x| if (x - 0.1).abs() < 0.05 { 0.3 } else { x })], |g, v| g.clamp_min(v[0], 0.1));
}

#[test]
fn reductions_and_normalizers() {
    let mut rng = init::rng(3);
    let a = random(&mut rng, 4, 5);
    check_op(vec![a.clone()], |g, v| g.sum(v[0]));
    check_op(vec![a.clone()], |g, v| g.mean(v[0]));
    check_op(vec![a.clone()], |g, v| g.sum_rows(v[0]).unwrap());
    check_op(vec![a.clone()], |g, v| g.mean_rows(v[0]).unwrap());
    check_op(vec![a.clone()], |g, v| g.softmax(v[0]).unwrap());
    check_op(vec![a.clone()], |g, v| g.log_softmax(v[0]).unwrap());
    check_op(vec![a.clone()], |g, v| g.layer_norm(v[0], 1e-5).unwrap());
    check_op(vec![random(&mut rng, 4, 4)], |g, v| g.causal_softmax(v[0]).unwrap());
    let divisor = Tensor::scalar(1.7);
    check_op(vec![a.clone(), divisor], |g, v| g.div_scalar(v[0], v[1]).unwrap());
}

#[test]
fn indexing_ops() {
    let mut rng = init::rng(4);
    let t = random(&mut rng, 5, 3);
    check_op(vec![t.clone()], |g, v| g.gather(v[0], &[4, 0, 4, 2]).unwrap());
    check_op(vec![t.clone()], |g, v| g.slice_cols(v[0], 1, 2).unwrap());
    check_op(vec![t.clone(), random(&mut rng, 5, 2)], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap());
    check_op(vec![t.clone(), random(&mut rng, 2, 3)], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
}

#[test]
fn cross_entropy_gradient_and_value() {
    let mut rng = init::rng(5);
    let logits = random(&mut rng, 3, 8);
    check_op(vec![logits.clone()], |g, v| g.cross_entropy(v[0], &[1, 7, 0]).unwrap());

    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros(&[1, 8]));
    let l = g.cross_entropy(u, &[3]).unwrap();
    assert!((g.value(l).item().unwrap() - 8f64.ln()).abs() < 1e-12);
    assert!(g.cross_entropy(u, &[8]).is_err());
}

#[test]
fn mlp_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = init::rng(6);
    let mlp = Mlp::new(&mut store, &mut rng, "mlp", 3, &[4, 4], 2, Activation::Tanh);
    let x = random(&mut rng, 5, 3);
    let report = check_params(&mut store, H, 64, |s| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = mlp.forward(&mut g, s, xv)?;
        let loss = g.cross_entropy(out, &[0, 1, 1, 0, 1])?;
        Ok((g, loss))
    })
    .unwrap();
    assert!(report.relative_error <= TOL, "{report:?}");
}

#[test]
fn gru_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = init::rng(7);
    let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 4);
    let xs: Vec<_> = (0..3).map(|_| random(&mut rng, 1, 3)).collect();
    let report = check_params(&mut store, H, 64, |s| {
        let mut g = Graph::new();
        let inputs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let h0 = g.constant(Tensor::zeros(&[1, 4]));
        let hs = cell.run(&mut g, s, &inputs, h0)?;
        let last = *hs.last().unwrap();
        let sq = g.mul(last, last)?;
        let loss = g.sum(sq);
        Ok((g, loss))
    })
    .unwrap();
    assert!(report.relative_error <= TOL, "{report:?}");
}

#[test]
fn backward_contract() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::row(&[0.3, -1.0, 2.0]));
    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let s = g.sum(pv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(pv).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let z = g.scale(pv, 0.0);
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert_eq!(g.grad(pv).unwrap().data(), &[0.0, 0.0, 0.0]);

    let mut g = Graph::new();
    let pv = g.param(&store, p);
    assert!(g.backward(pv).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn normalizer_invariants() {
    let mut rng = init::rng(8);
    let a = random(&mut rng, 6, 7).map(|x| 10.0 * x);
    let mut g = Graph::new();
    let v = g.constant(a);
    let sm = g.softmax(v).unwrap();
    for i in 0..6 {
        let s: f64 = g.value(sm).row_slice(i).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
    let ln = g.layer_norm(v, 1e-5).unwrap();
    for i in 0..6 {
        let row = g.value(ln).row_slice(i);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6, "{var}");
    }
    let sm0 = {
        let z = g.constant(Tensor::row(&[0.0, 0.0]));
        g.softmax(z).unwrap()
    };
    assert_eq!(g.value(sm0).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = init::rng(11);
        let mlp = Mlp::new(&mut store, &mut rng, "m", 4, &[8], 3, Activation::Relu);
        let x = random(&mut rng, 3, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = mlp.forward(&mut g, &store, xv).unwrap();
        let loss = g.cross_entropy(out, &[0, 1, 2]).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut store);
        let grads: Vec<u64> = store.iter().flat_map(|(_, p)| p.grad.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
        (g.value(loss).item().unwrap().to_bits(), grads)
    };
    assert_eq!(run(), run());
}

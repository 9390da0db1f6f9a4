//! Reverse-mode gradients against central finite differences
//! (step 1e-5, |analytic − numeric| / max(1, |analytic|) < 1e-4).

use sadm_core::attention::AttnConfig;
use sadm_core::ndcore::{BinaryOp, Rng, Tape, Tensor, UnaryOp, Var};
use sadm_core::network::{DenoiserConfig, ModelConfig, ParameterStore, Sadm};
use sadm_core::sequence::{IndexPartition, LongitudinalVolume};
use sadm_core::training::loss_step;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Reduce any output to a scalar with fixed random weights so every output
/// entry contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::randn(&shape, &mut Rng::new(999));
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// Check d(weighted_sum(f(inputs)))/d(inputs).
fn check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let y = f(&mut tape, &vars);
        let l = weighted_sum(&mut tape, y);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let y = f(&mut tape, &vars);
    let l = weighted_sum(&mut tape, y);
    let grads = tape.gradients(l).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += H;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * H;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(g.data()[i], numeric);
            assert!(e < TOL, "{name}: input {k}[{i}] analytic {} numeric {numeric} err {e}", g.data()[i]);
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut Rng::new(seed))
}

#[test]
fn unary_ops() {
    for op in [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Square,
        UnaryOp::Tanh,
        UnaryOp::Sigmoid,
        UnaryOp::Silu,
        UnaryOp::Gelu,
    ] {
        check(&format!("{op:?}"), &[randn(&[3, 4], 1)], |t, v| t.unary(op, v[0]));
    }
}

#[test]
fn binary_ops() {
    let b = randn(&[2, 5], 3).map(|v| v.abs() + 0.5);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        check(&format!("{op:?}"), &[randn(&[2, 5], 2), b.clone()], |t, v| t.binary(op, v[0], v[1]).unwrap());
    }
}

#[test]
fn scalar_ops() {
    check("scale", &[randn(&[4], 1)], |t, v| t.scale(v[0], -1.7));
    check("add_scalar", &[randn(&[4], 1)], |t, v| t.add_scalar(v[0], 0.3));
    check("sum", &[randn(&[2, 3], 1)], |t, v| t.sum(v[0]));
    check("mean", &[randn(&[2, 3], 1)], |t, v| t.mean(v[0]));
}

#[test]
fn broadcast_ops() {
    check("bias_add", &[randn(&[2, 3, 4], 1), randn(&[3], 2)], |t, v| t.bias_add(v[0], v[1], 1).unwrap());
    check("bias_mul", &[randn(&[2, 3, 4], 1), randn(&[3, 4], 2)], |t, v| t.bias_mul(v[0], v[1], 1).unwrap());
    check("expand", &[randn(&[2, 1, 3], 1)], |t, v| t.expand(v[0], &[2, 4, 3]).unwrap());
}

#[test]
fn matmul_variants() {
    check("matmul", &[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check("matmul_shared", &[randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check("matmul_batched", &[randn(&[2, 3, 4], 1), randn(&[2, 4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check("matmul_nt", &[randn(&[2, 3, 4], 1), randn(&[2, 5, 4], 2)], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
    check("linear", &[randn(&[3, 4], 1), randn(&[4, 2], 2), randn(&[2], 3)], |t, v| t.linear(v[0], v[1], v[2]).unwrap());
}

#[test]
fn sum_of_product_rule() {
    // d sum(A·B) / dA = row vector of B's row sums, broadcast over A's rows
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let mut tape = Tape::new();
    let (va, vb) = (tape.input(a), tape.input(b.clone()));
    let p = tape.matmul(va, vb).unwrap();
    let l = tape.sum(p);
    let g = tape.gradients(l).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((g.wrt(va).unwrap().data()[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn convolutions() {
    check("conv3d_same", &[randn(&[2, 4, 4, 3], 1), randn(&[3, 2, 3, 3, 3], 2)], |t, v| {
        t.conv3d(v[0], v[1], [1; 3], [1; 3]).unwrap()
    });
    check("conv3d_strided", &[randn(&[2, 4, 4, 2], 1), randn(&[2, 2, 2, 2, 2], 2)], |t, v| {
        t.conv3d(v[0], v[1], [2; 3], [0; 3]).unwrap()
    });
    check("conv3d_batched", &[randn(&[2, 1, 4, 4, 2], 1), randn(&[2, 1, 3, 3, 1], 2)], |t, v| {
        t.conv3d(v[0], v[1], [1; 3], [1, 1, 0]).unwrap()
    });
    check("conv4d", &[randn(&[2, 1, 4, 4, 2], 1), randn(&[3, 1, 1, 2, 2, 1], 2)], |t, v| {
        t.conv4d(v[0], v[1], [1, 2, 2, 1]).unwrap()
    });
}

#[test]
fn shape_ops() {
    check("reshape", &[randn(&[2, 6], 1)], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check("permute", &[randn(&[2, 3, 4], 1)], |t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    check("upsample", &[randn(&[2, 2, 3], 1)], |t, v| t.upsample(v[0], &[1, 2, 3]).unwrap());
    check("concat", &[randn(&[2, 3], 1), randn(&[2, 2], 2)], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check("narrow", &[randn(&[3, 5, 2], 1)], |t, v| t.narrow(v[0], 1, 1, 3).unwrap());
}

#[test]
fn normalizations() {
    check("softmax", &[randn(&[3, 4, 2], 1)], |t, v| t.softmax(v[0], 1).unwrap());
    check("layer_norm", &[randn(&[3, 5], 1)], |t, v| t.layer_norm(v[0], 1).unwrap());
    check("layer_norm_inner", &[randn(&[2, 4, 3], 1)], |t, v| t.layer_norm(v[0], 1).unwrap());
}

#[test]
fn three_layer_composite() {
    let inputs = [randn(&[5, 4], 1), randn(&[4, 6], 2), randn(&[6], 3), randn(&[6, 3], 4)];
    check("mlp", &inputs, |t, v| {
        let h = t.linear(v[0], v[1], v[2]).unwrap();
        let h = t.gelu(h);
        let h = t.layer_norm(h, 1).unwrap();
        let h = t.matmul(h, v[3]).unwrap();
        let h = t.softmax(h, 1).unwrap();
        t.square(h)
    });
}

#[test]
fn basic_backward_examples() {
    let mut store = ParameterStore::new();
    let x = store.insert("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let unused = store.insert("unused", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let uv = tape.param(&store, unused);
    let _ = uv;
    let sq = tape.square(xv);
    let l = tape.sum(sq);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(x).data(), &[2.0, 4.0]);
    assert_eq!(store.grad(unused).data(), &[0.0]);
    // repeated calls accumulate
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.grad(x).data(), &[4.0, 8.0]);
    // non-scalar losses are rejected
    assert!(tape.gradients(sq).is_err());
}

/// Compare parameter gradients of `loss(store)` against central differences
/// on a deterministic subset of entries of every parameter tensor.
fn check_params(name: &str, store: &ParameterStore, only: impl Fn(&str) -> bool, mut loss: impl FnMut(&ParameterStore, &mut ParameterStore) -> f64) {
    let mut with_grad = store.clone();
    with_grad.zero_grad();
    loss(store, &mut with_grad);
    let mut probe = store.clone();
    let mut sink = store.clone();
    let mut rng = Rng::new(5);
    let mut checked = 0;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| only(n)).collect();
    for pname in names {
        let id = store.id(&pname).unwrap();
        let n = store.value(id).numel();
        let picks: Vec<usize> = if n <= 4 { (0..n).collect() } else { (0..4).map(|_| rng.below(n)).collect() };
        for i in picks {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + H;
            let up = loss(&probe, &mut sink);
            probe.value_mut(id).data_mut()[i] = orig - H;
            let down = loss(&probe, &mut sink);
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = with_grad.grad(id).data()[i];
            let e = rel_err(analytic, numeric);
            assert!(e < TOL, "{name}: {pname}[{i}] analytic {analytic} numeric {numeric} err {e}");
            checked += 1;
        }
    }
    assert!(checked > 0, "{name}: nothing checked");
}

fn toy_model() -> Sadm {
    let cfg = ModelConfig {
        extents: [8, 8, 4],
        attention: AttnConfig {
            blocks: 1,
            dim: 8,
            heads: 2,
            window: [4, 4, 2],
            max_len: 4,
            mlp_ratio: 2,
        },
        denoiser: DenoiserConfig {
            base: 4,
            depth: 2,
            emb_width: 8,
        },
        ..ModelConfig::default()
    };
    Sadm::new(cfg, 3).unwrap()
}

fn toy_subject() -> LongitudinalVolume {
    let mut rng = Rng::new(17);
    LongitudinalVolume::new((0..2).map(|_| Tensor::rand_uniform(&[8, 8, 4], 0.0, 1.0, &mut rng)).collect()).unwrap()
}

#[test]
fn conditioner_signal_gradients() {
    let model = toy_model();
    let v = toy_subject();
    let target = randn(&[8, 8, 4], 8);
    let seq = vec![v.frame(1).clone()];
    check_params(
        "conditioner",
        &model.store,
        |n| n.starts_with("attn."),
        |store, sink| {
            let mut tape = Tape::new();
            let c = model.conditioner.condition(&mut tape, store, &seq).unwrap();
            let t = tape.constant(target.clone());
            let d = tape.sub(c, t).unwrap();
            let sq = tape.square(d);
            let l = tape.sum(sq);
            tape.backward(l, sink).unwrap();
            tape.value(l).item()
        },
    );
}

#[test]
fn denoiser_gradients() {
    let model = toy_model();
    let z = randn(&[8, 8, 4], 1);
    let c = Tensor::rand_uniform(&[8, 8, 4], 0.0, 1.0, &mut Rng::new(2));
    let eps = randn(&[8, 8, 4], 3);
    check_params(
        "denoiser",
        &model.store,
        |n| n.starts_with("den."),
        |store, sink| {
            let mut tape = Tape::new();
            let (zv, cv) = (tape.constant(z.clone()), tape.constant(c.clone()));
            let out = model.denoiser.forward(&mut tape, store, zv, cv, 1.3).unwrap();
            let e = tape.constant(eps.clone());
            let d = tape.sub(out, e).unwrap();
            let sq = tape.square(d);
            let l = tape.sum(sq);
            tape.backward(l, sink).unwrap();
            tape.value(l).item()
        },
    );
}

#[test]
fn end_to_end_loss_gradients() {
    let mut model = toy_model();
    let v = toy_subject();
    let p = IndexPartition::single(2);
    // parameters shared between the closure and the perturbed store
    let base = model.store.clone();
    check_params("end-to-end", &base, |_| true, |store, sink| {
        model.store = store.clone();
        let mut tape = Tape::new();
        let out = loss_step(&mut tape, &model, &v, &p, 0.0, &mut Rng::new(21)).unwrap();
        tape.backward(out.loss, sink).unwrap();
        tape.value(out.loss).item()
    });
}

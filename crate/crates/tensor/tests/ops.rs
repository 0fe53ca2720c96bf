use proptest::prelude::*;
use tokcomm_tensor::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use tokcomm_tensor::{
    Activation, Graph, Mlp, ParamStore, RandomSource, Tensor, TensorError, Var,
};

const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut RandomSource, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn assert_grad<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> tokcomm_tensor::Result<Var>,
{
    let report = check_inputs(f, inputs, DEFAULT_STEP).unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn softmax_symmetric_and_shift_invariant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[0.0, 0.0]));
    let y = g.softmax(x, 1, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    for t in [0.1, 1.0, 7.0] {
        let x = g.constant(Tensor::row(&[3.3, 3.3, 3.3]));
        let y = g.softmax(x, 1, t).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_peaked_row_matches_closed_form() {
    let mut g = Graph::new();
    let mut row = vec![0.0; 8];
    row[0] = 10.0;
    let x = g.constant(Tensor::row(&row));
    let y = g.softmax(x, 1, 1.5).unwrap();
    let e = (10.0_f64 / 1.5).exp();
    let expected = e / (e + 7.0);
    assert!((g.value(y).data()[0] - expected).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 1.0 / (e + 7.0)).abs() < 1e-15);
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(g.softmax(x, 1, 0.0), Err(TensorError::Domain(_))));
    assert!(matches!(g.softmax(x, 1, -1.0), Err(TensorError::Domain(_))));
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let y = g.max_axis(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);

    let x = g.constant(Tensor::new(&[3, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = g.max_axis(x, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn max_pool_tie_sends_gradient_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3, 1], vec![2.0, 2.0, 1.0]).unwrap());
    let y = g.max_axis(x, 0).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_simple_cases() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(3.0)).unwrap();
    let p = store.add("p", Tensor::scalar(-2.0)).unwrap();
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let _pv = g.param(&store, p);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut store);
    assert_eq!(store.get(w).grad.item(), 6.0);
    assert_eq!(store.get(p).grad.item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(&[1.0, 2.0]));
    let y = g.relu(x);
    assert!(matches!(g.backward(y), Err(TensorError::Contract(_))));
}

#[test]
fn linear_parameter_gradients() {
    let mut rng = RandomSource::new(11);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "lin", 4, &[3], Activation::None, Activation::None, &mut rng)
        .unwrap();
    let x = random_tensor(&mut rng, &[5, 4]);
    let report = check_params(
        &mut store,
        |g, s| {
            let xv = g.constant(x.clone());
            mlp.forward(g, s, xv)
        },
        None,
        &mut rng,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = RandomSource::new(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 4]);
    assert_grad(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let t = g.tanh(m);
            let r = g.relu(v[0]);
            let q = g.mul(t, r)?;
            let sc = g.scale(q, -2.5);
            Ok(g.abs(sc))
        },
        &[a, b],
    );
}

#[test]
fn matmul_and_bias_gradients() {
    let mut rng = RandomSource::new(2);
    let x = random_tensor(&mut rng, &[4, 3]);
    let w = random_tensor(&mut rng, &[3, 5]);
    let b = random_tensor(&mut rng, &[5]);
    assert_grad(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            Ok(g.tanh(h))
        },
        &[x, w, b],
    );
}

#[test]
fn softmax_gradients_along_each_axis() {
    let mut rng = RandomSource::new(3);
    let x = random_tensor(&mut rng, &[2, 3, 4]);
    let w = random_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        assert_grad(
            |g, v| {
                let y = g.softmax(v[0], axis, 1.5)?;
                g.mul(y, v[1])
            },
            &[x.clone(), w.clone()],
        );
    }
}

#[test]
fn reduction_and_layout_gradients() {
    let mut rng = RandomSource::new(4);
    let x = random_tensor(&mut rng, &[4, 3, 2]);
    let w = random_tensor(&mut rng, &[4, 2]);
    assert_grad(
        |g, v| {
            let m = g.max_axis(v[0], 1)?;
            let s = g.sum_axis(v[0], 1)?;
            let p = g.mul(m, v[1])?;
            let q = g.add(p, s)?;
            let r = g.reshape(q, &[2, 4])?;
            let c = g.concat_cols(&[r, r])?;
            let c = g.concat_rows(&[c, c])?;
            let sl = g.slice_cols(c, 1, 6)?;
            let sl = g.slice_rows(sl, 1, 3)?;
            let sl = g.pad_rows(sl, 5)?;
            let gathered = g.gather_rows(sl, &[0, 0, 1, 4])?;
            Ok(g.tanh(gathered))
        },
        &[x, w],
    );
}

#[test]
fn scalar_broadcast_gradients() {
    let mut rng = RandomSource::new(5);
    let x = random_tensor(&mut rng, &[3, 2]);
    let s = Tensor::scalar(0.7);
    let c = random_tensor(&mut rng, &[3, 1]);
    assert_grad(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let total = g.sum(sq);
            let inv = g.powf(total, -0.5);
            let y = g.mul_scalar(v[0], inv)?;
            let y = g.mul_scalar(y, v[1])?;
            let y = g.mul_col(y, v[2])?;
            Ok(g.tanh(y))
        },
        &[x, s, c],
    );
}

#[test]
fn chamfer_gradients_and_value() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    let cd = g.chamfer(a, b).unwrap();
    assert_eq!(g.value(cd).item(), 2.0);

    let mut rng = RandomSource::new(6);
    let x = random_tensor(&mut rng, &[7, 3]);
    let y = random_tensor(&mut rng, &[5, 3]);
    assert_grad(|g, v| g.chamfer(v[0], v[1]), &[x, y]);
}

#[test]
fn straight_through_forwards_given_value_and_passes_gradient() {
    let mut g = Graph::new();
    let s = g.input(Tensor::row(&[0.3, -0.2]));
    let sq = g.mul(s, s).unwrap();
    let st = g.straight_through(sq, Tensor::row(&[1.0, -1.0])).unwrap();
    assert_eq!(g.value(st).data(), &[1.0, -1.0]);
    let loss = g.sum(st);
    let grads = g.backward(loss).unwrap();
    let d = grads.wrt(&g, s).unwrap();
    assert!((d.data()[0] - 0.6).abs() < 1e-15);
    assert!((d.data()[1] + 0.4).abs() < 1e-15);
}

#[test]
fn detached_branch_has_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(&[1.0, 2.0]));
    let d = g.detach(x);
    let y = g.mul(d, d).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(&g, x).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        t in 0.05f64..5.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.softmax(x, 1, t).unwrap();
        for r in 0..3 {
            let row = g.value(y).row_slice(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_monotone_in_inputs(
        vals in proptest::collection::vec(-10.0f64..10.0, 5),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&vals));
        let y = g.softmax(x, 1, 1.0).unwrap();
        let out = g.value(y).data().to_vec();
        for i in 0..5 {
            for j in 0..5 {
                if vals[i] > vals[j] {
                    prop_assert!(out[i] >= out[j]);
                }
            }
        }
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Grad-checks `build` applied to random parameters of the given shapes.
/// Non-scalar outputs are reduced with a fixed random weighting.
fn check_with(seed: u64, shapes: &[&[usize]], build: &Build, faulty: Option<OpKind>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.add(format!("p{i}"), Tensor::new(s.to_vec(), data).unwrap());
    }
    let weights_seed = rng.random::<u64>();
    let loss_fn = |st: &mut ParamStore| {
        st.zero_grad();
        let mut g = match faulty {
            Some(k) => Graph::new().with_faulty_rule(k),
            None => Graph::new(),
        };
        let vars: Vec<Var> = (0..st.len()).map(|i| g.param(st, ParamId(i))).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).len() == 1 && g.value(out).rank() == 0 {
            out
        } else {
            let shape = g.value(out).shape().to_vec();
            let n = g.value(out).len();
            let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
            let w = Tensor::new(shape, (0..n).map(|_| wr.random_range(-1.0..1.0)).collect()).unwrap();
            let w = g.constant(w);
            g.dot(out, w).unwrap()
        };
        let v = g.scalar(loss);
        g.backward(loss);
        g.accumulate_into(st);
        v
    };
    grad_check(&mut store, loss_fn, GradCheck::default()).max_rel_error
}

fn check(seed: u64, shapes: &[&[usize]], build: &Build) -> f64 {
    check_with(seed, shapes, build, None)
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Box<Build>)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| g.matmul_t(v[0], v[1]).unwrap())),
        ("matvec", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.matvec(v[0], v[1]).unwrap())),
        ("vecmat", vec![vec![3], vec![3, 4]], Box::new(|g, v| g.vecmat(v[0], v[1]).unwrap())),
        ("add", vec![vec![5], vec![5]], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_bias", vec![vec![3, 4], vec![4]], Box::new(|g, v| g.add_bias(v[0], v[1]).unwrap())),
        ("scale", vec![vec![4]], Box::new(|g, v| g.scale(v[0], -2.5))),
        ("tanh", vec![vec![6]], Box::new(|g, v| g.tanh(v[0]))),
        ("sigmoid", vec![vec![6]], Box::new(|g, v| g.sigmoid(v[0]))),
        ("concat", vec![vec![2], vec![3]], Box::new(|g, v| g.concat(&[v[0], v[1], v[0]]).unwrap())),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap())),
        ("slice", vec![vec![7]], Box::new(|g, v| g.slice(v[0], 2, 3).unwrap())),
        ("row", vec![vec![3, 4]], Box::new(|g, v| g.row(v[0], 1).unwrap())),
        ("stack_rows", vec![vec![3], vec![3]], Box::new(|g, v| g.stack_rows(&[v[0], v[1], v[0]]).unwrap())),
        ("gather", vec![vec![4, 3]], Box::new(|g, v| g.gather(v[0], &[2, 0, 2, 3]).unwrap())),
        ("mean_rows", vec![vec![5, 3]], Box::new(|g, v| g.mean_rows(v[0], 1, 4).unwrap())),
        ("sum_rows", vec![vec![5, 3]], Box::new(|g, v| g.sum_rows(v[0], 0, 2).unwrap())),
        ("mean", vec![vec![4], vec![4]], Box::new(|g, v| g.mean(&[v[0], v[1]]).unwrap())),
        (
            "dropout",
            vec![vec![6]],
            Box::new(|g, v| g.apply_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])),
        ),
        (
            "noise",
            vec![vec![5]],
            Box::new(|g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(3);
                let n = g.gaussian_noise(v[0], 0.1, &mut r);
                g.tanh(n)
            }),
        ),
        ("dot", vec![vec![4], vec![4]], Box::new(|g, v| g.dot(v[0], v[1]).unwrap())),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| g.sum(v[0]))),
        (
            "add_n",
            vec![vec![], vec![]],
            Box::new(|g, v| {
                let t = g.tanh(v[0]);
                g.add_n(&[t, v[1], t]).unwrap()
            }),
        ),
        ("log_sum_exp", vec![vec![5]], Box::new(|g, v| g.log_sum_exp(v[0]).unwrap())),
        ("log_softmax", vec![vec![5]], Box::new(|g, v| g.log_softmax(v[0]).unwrap())),
        ("softmax", vec![vec![5]], Box::new(|g, v| g.softmax(v[0]).unwrap())),
        (
            "pick",
            vec![vec![5]],
            Box::new(|g, v| {
                let l = g.log_softmax(v[0]).unwrap();
                g.pick(l, 3).unwrap()
            }),
        ),
        ("lse_transition", vec![vec![4], vec![4, 4]], Box::new(|g, v| g.lse_transition(v[0], v[1]).unwrap())),
        (
            "lse_transition_masked",
            vec![vec![3], vec![3, 3]],
            Box::new(|g, v| {
                let ninf = f64::NEG_INFINITY;
                let mask = Tensor::matrix(3, 3, vec![0.0, ninf, 0.0, 0.0, 0.0, ninf, ninf, 0.0, 0.0]).unwrap();
                let mask = g.constant(mask);
                let t = g.add(v[1], mask).unwrap();
                g.lse_transition(v[0], t).unwrap()
            }),
        ),
        (
            "bce_with_logits",
            vec![vec![4]],
            Box::new(|g, v| {
                let s = g.scale(v[0], 3.0);
                g.bce_with_logits(s, vec![1.0, 0.0, 0.5, 1.0]).unwrap()
            }),
        ),
    ]
}

#[test]
fn every_backward_rule_matches_finite_differences() {
    for (name, shapes, build) in cases() {
        let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        for seed in 0..100 {
            let err = check(seed, &shapes, build.as_ref());
            assert!(err < 1e-6, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn corrupted_rule_is_detected() {
    let build: Box<Build> = Box::new(|g, v| {
        let t = g.tanh(v[0]);
        g.sum(t)
    });
    let err = check_with(1, &[&[5]], build.as_ref(), Some(OpKind::Tanh));
    assert!(err > 1e-2, "negative control not detected: {err}");
}

#[test]
fn linear_loss_gradient_is_exact() {
    let build: Box<Build> = Box::new(|g, v| {
        let c = g.constant(Tensor::vector(vec![0.5, -1.5, 2.0]));
        g.dot(v[0], c).unwrap()
    });
    assert!(check(4, &[&[3]], build.as_ref()) < 1e-10);
}

#[test]
fn identity_matmul_and_noop_regularizers() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let i = g.constant(Tensor::identity(3));
    let y = g.matmul(i, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = g.dropout(x, 0.0, &mut rng);
    assert_eq!(g.value(d), g.value(x));
    let n = g.gaussian_noise(x, 0.0, &mut rng);
    assert_eq!(g.value(n), g.value(x));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn dropout_scales_survivors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1000], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = g.dropout(x, 0.4, &mut rng);
    let vals = g.value(d).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
    let mean: f64 = vals.iter().sum::<f64>() / 1000.0;
    assert!((mean - 1.0).abs() < 0.1);
}

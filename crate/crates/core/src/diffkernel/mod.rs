//! Dense reverse-mode differentiation kernel.
//!
//! Tensors are row-major batches; a [`Tape`] is rebuilt for every batch and
//! swept backwards once to produce parameter gradients, which [`adam_step`]
//! then consumes. Matrix products go through `matrixmultiply`.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState, LrSchedule, ParamSet};
pub use tape::{sigmoid, softplus, Activation, CustomOp, Gradients, ParamId, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    fn forward_linear(w: Tensor<f64>, b: Tensor<f64>, x: Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new(false);
        let (w, b, x) = (tape.constant(w), tape.constant(b), tape.constant(x));
        let y = tape.linear(x, w, b).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn linear_forward_examples() {
        let y = forward_linear(mat(2, 2, &[1., 0., 0., 1.]), vec1(&[0., 0.]), mat(1, 2, &[1., 2.]));
        assert_eq!(y, vec![1.0, 2.0]);
        let y = forward_linear(mat(1, 1, &[2.]), vec1(&[1.]), mat(1, 1, &[3.]));
        assert_eq!(y, vec![7.0]);
        let y = forward_linear(mat(1, 2, &[1., 1.]), vec1(&[0.]), mat(1, 2, &[0.5, 0.5]));
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::<f64>::new(false);
        let w = tape.constant(mat(2, 3, &[0.; 6]));
        let b = tape.constant(vec1(&[0., 0.]));
        let x = tape.constant(mat(1, 2, &[1., 2.]));
        assert!(matches!(tape.linear(x, w, b), Err(KernelError::Shape(_))));
        let b3 = tape.constant(vec1(&[0., 0., 0.]));
        let x3 = tape.constant(mat(1, 3, &[1., 2., 3.]));
        assert!(matches!(tape.linear(x3, w, b3), Err(KernelError::Shape(_))));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert!((Activation::Softplus.apply(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
        // no overflow in the tails
        assert_eq!(Activation::Softplus.apply(1000.0f64), 1000.0);
        assert!(Activation::Sigmoid.apply(-1000.0f64) >= 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new(true);
        let x = tape.param(ParamId(0), Tensor::scalar(3.0f64));
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new(true);
        let p = tape.param(ParamId(0), vec1(&[1.0, 2.0]));
        let p2 = tape.param(ParamId(1), Tensor::scalar(5.0));
        let _unused = tape.mul(p, p).unwrap();
        let _also = tape.scale(p2, 2.0);
        let zero = tape.constant(Tensor::scalar(0.0));
        let grads = tape.backward(zero).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new(true);
        let p = tape.param(ParamId(0), vec1(&[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(KernelError::Contract(_))));
        let mut untraced = Tape::new(false);
        let q = untraced.param(ParamId(0), Tensor::scalar(1.0f64));
        assert!(matches!(untraced.backward(q), Err(KernelError::Contract(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(p) + sum(p * p), p used three times
        let mut tape = Tape::new(true);
        let p = tape.param(ParamId(0), vec1(&[1.0, -2.0]));
        let s1 = tape.sum(p);
        let pp = tape.mul(p, p).unwrap();
        let s2 = tape.sum(pp);
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape = Tape::new(true);
        let a = tape.param(ParamId(0), mat(2, 1, &[1., 2.]));
        let b = tape.param(ParamId(1), mat(2, 2, &[3., 4., 5., 6.]));
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = tape.slice_cols(c, 1, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[3., 5.]);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0., 0.]);
        assert_eq!(g.get(ParamId(1)).unwrap().data(), &[1., 0., 1., 0.]);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = ParamSet::default();
        let id = params.push("w", vec1(&[0.3, -0.7]));
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::default();
        grads.insert(id, vec1(&[0.0, 0.0]));
        adam_step(&mut params, &grads, &mut state, 0.01, &AdamConfig::default(), |_| true).unwrap();
        assert_eq!(params.get(id).data(), &[0.3, -0.7]);
        assert_eq!(state.step_count(id), 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut params = ParamSet::default();
        let id = params.push("x", Tensor::scalar(1.0f64));
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::scalar(0.1));
        adam_step(&mut params, &grads, &mut state, 0.01, &AdamConfig::default(), |_| true).unwrap();
        let delta = params.get(id).data()[0] - 1.0;
        // m̂ = g, v̂ = g², Δ = −lr·g/(|g| + ε)
        let expected = -0.01 * 0.1 / (0.1 + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
    }

    /// Scalar Adam written out longhand, independent of the tensor path.
    fn reference_adam_trace(x0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut trace = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            trace.push(x);
        }
        trace
    }

    #[test]
    fn adam_matches_reference_trace_on_parabola() {
        let expected = reference_adam_trace(1.0, 10, 0.1);
        let mut params = ParamSet::default();
        let id = params.push("x", Tensor::scalar(1.0f64));
        let mut state = AdamState::new(&params);
        for (step, want) in expected.iter().enumerate() {
            let mut tape = Tape::new(true);
            let x = tape.param(id, params.get(id).clone());
            let loss = tape.mul(x, x).unwrap();
            let grads = tape.backward(loss).unwrap();
            adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default(), |_| true)
                .unwrap();
            let got = params.get(id).data()[0];
            assert!((got - want).abs() < 1e-14, "step {step}: {got} vs {want}");
        }
        assert_eq!(state.step_count(id), 10);
    }

    #[test]
    fn adam_skips_inactive() {
        let mut params = ParamSet::default();
        let a = params.push("a", Tensor::scalar(1.0f64));
        let b = params.push("b", Tensor::scalar(1.0f64));
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::default();
        grads.insert(a, Tensor::scalar(1.0));
        grads.insert(b, Tensor::scalar(1.0));
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default(), |id| id == a)
            .unwrap();
        assert_ne!(params.get(a).data()[0], 1.0);
        assert_eq!(params.get(b).data()[0], 1.0);
        assert_eq!(state.step_count(b), 0);
    }

    #[test]
    fn cosine_schedule_examples() {
        let s = LrSchedule::new(1e-3, 100, 1e-5).unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(100) - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr(500), s.lr(100));
        let s0 = LrSchedule::new(2.0, 10, 0.0).unwrap();
        assert!((s0.lr(5) - 1.0).abs() < 1e-15);
        for step in 0..10 {
            assert!(s0.lr(step + 1) <= s0.lr(step));
        }
        assert!(LrSchedule::new(0.0, 10, 0.0).is_err());
        assert!(LrSchedule::new(1.0, 0, 0.0).is_err());
    }

    #[test]
    fn tracing_off_records_no_graph() {
        let mut tape = Tape::new(false);
        let p = tape.param(ParamId(0), Tensor::scalar(2.0f64));
        let y = tape.activation(Activation::Tanh, p);
        assert!((tape.value(y).data()[0] - 2.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn gemm_transposed_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        // c = a · bᵀ with b stored n×k
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, (&a, k as isize, 1), (&b, 1, k as isize), 0.0, (&mut c, n as isize, 1));
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[j * k + l]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    struct Mlp {
        layers: Vec<(Tensor<f64>, Tensor<f64>, Activation)>,
        input: Tensor<f64>,
    }

    fn mlp_loss(mlp: &Mlp, tracing: bool) -> (f64, Option<Gradients<f64>>) {
        let mut tape = Tape::new(tracing);
        let mut h = tape.constant(mlp.input.clone());
        for (i, (w, b, act)) in mlp.layers.iter().enumerate() {
            let w = tape.param(ParamId(2 * i), w.clone());
            let b = tape.param(ParamId(2 * i + 1), b.clone());
            let z = tape.linear(h, w, b).unwrap();
            h = tape.activation(*act, z);
        }
        let sq = tape.mul(h, h).unwrap();
        let loss = tape.mean(sq);
        let v = tape.value(loss).data()[0];
        (v, tracing.then(|| tape.backward(loss).unwrap()))
    }

    fn random_mlp(seed: u64, depth: usize, widths: &[usize], acts: &[usize]) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![widths[0]];
        dims.extend(widths[1..=depth].iter().copied());
        let mut layers = Vec::new();
        for l in 0..depth {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-1.0..1.0) / (fan_in as f64).sqrt()).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-0.5..0.5)).collect();
            layers.push((mat(fan_out, fan_in, &w), vec1(&b), Activation::ALL[acts[l] % Activation::ALL.len()]));
        }
        let x: Vec<f64> = (0..3 * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mlp { layers, input: mat(3, dims[0], &x) }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn mlp_gradients_match_finite_differences(
            seed in 0u64..10_000,
            depth in 1usize..=4,
            widths in proptest::collection::vec(1usize..=64, 5),
            acts in proptest::collection::vec(0usize..6, 4),
        ) {
            let mlp = random_mlp(seed, depth, &widths, &acts);
            let grads = mlp_loss(&mlp, true).1.unwrap();
            let h = 1e-6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for (li, (w, b, _)) in mlp.layers.iter().enumerate() {
                for (slot, t) in [(0, w), (1, b)] {
                    // a handful of coordinates per tensor keeps the check fast at width 64
                    for _ in 0..4 {
                        let k = rng.random_range(0..t.len());
                        let bump = |delta: f64| {
                            let mut m = Mlp { layers: mlp.layers.clone(), input: mlp.input.clone() };
                            let target = if slot == 0 { &mut m.layers[li].0 } else { &mut m.layers[li].1 };
                            target.data_mut()[k] += delta;
                            mlp_loss(&m, false).0
                        };
                        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                        let analytic = grads.get(ParamId(2 * li + slot)).unwrap().data()[k];
                        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                        proptest::prop_assert!(err < 1e-6, "layer {li} slot {slot} idx {k}: {analytic} vs {numeric}");
                    }
                }
            }
        }

        #[test]
        fn linear_is_linear_in_input(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            c in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zero = vec1(&[0.0; 3]);
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + c * q).collect();
            let lhs = forward_linear(mat(3, 4, &w), zero.clone(), mat(2, 4, &combo));
            let fx = forward_linear(mat(3, 4, &w), zero.clone(), mat(2, 4, &x));
            let fy = forward_linear(mat(3, 4, &w), zero, mat(2, 4, &y));
            for i in 0..6 {
                proptest::prop_assert!((lhs[i] - (a * fx[i] + c * fy[i])).abs() < 1e-12);
            }
        }
    }
}

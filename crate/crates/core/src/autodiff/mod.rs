//! Dense tensors and reverse-mode automatic differentiation.

mod tape;
mod tensor;

pub use tape::{concat, gelu, gelu_grad, sigmoid, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at every entry of every input.
    fn fd_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64, step: f64) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (k, x) in inputs.iter().enumerate() {
            let mut g = vec![0.0; x.len()];
            for i in 0..x.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut d = x.data().to_vec();
                d[i] += step;
                plus[k] = Tensor::new(x.shape().to_vec(), d.clone()).unwrap();
                d[i] -= 2.0 * step;
                minus[k] = Tensor::new(x.shape().to_vec(), d).unwrap();
                g[i] = (f(&plus) - f(&minus)) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    type Build = for<'t> fn(&[Var<'t>]) -> Var<'t>;

    fn check_primitive(name: &str, shapes: &[&[usize]], build: Build, trials: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..trials {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            // random projection so the scalar output touches every entry
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = build(&vars);
            let w = rand_tensor(&mut rng, y.shape());
            let out = y.mul(&tape.constant(w.clone())).unwrap().sum();
            let grads = tape.backward(&out).unwrap();

            let f = |xs: &[Tensor]| {
                let t = Tape::inference();
                let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let y = build(&v);
                y.value().data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = fd_grads(&inputs, &f, 1e-5);
            for (k, v) in vars.iter().enumerate() {
                let g = grads.get(v);
                let e = rel_err(g.data(), &fd[k]);
                assert!(e < 1e-6, "{name}: trial {trial} input {k}: rel err {e:e}");
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::inference();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = i.matmul(&x).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0]);
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn tanh_at_origin() {
        let tape = Tape::inference();
        let y = tape.constant(Tensor::vector(vec![0.0])).tanh();
        assert_eq!(y.value().data(), &[0.0]);
    }

    #[test]
    fn layer_norm_hand_values() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::vector(vec![1.0; 3]));
        let b = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = x.layer_norm(&g, &b).unwrap();
        // mean 2, biased variance 2/3
        let s = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let expect = [-s, 0.0, s];
        for (a, e) in y.value().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        let mean: f64 = y.value().data().iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(a.add(&c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = w.mul(&w).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&w).item(), Some(6.0));
    }

    #[test]
    fn sum_tanh_gradient_at_zero() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = w.tanh().sum();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = w.tanh();
        assert!(matches!(tape.backward(&y), Err(crate::Error::NonScalarOutput(_))));
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let y = w.detach().tanh().sum();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&w).data(), &[0.0, 0.0]);
        assert_eq!(g.get(&unused).data(), &[0.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let _ = w.tanh().sum();
        assert!(tape.is_empty());
        assert!(!w.is_tracked());
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let trials = 100;
        check_primitive("matmul", &[&[3, 4], &[4, 2]], |v| v[0].matmul(&v[1]).unwrap(), trials);
        check_primitive("matmul_tt", &[&[4, 3], &[2, 4]], |v| v[0].matmul_t(&v[1], true, true).unwrap(), trials);
        check_primitive("matmul_nt", &[&[3, 4], &[2, 4]], |v| v[0].matmul_t(&v[1], false, true).unwrap(), trials);
        check_primitive("add", &[&[2, 3], &[2, 3]], |v| v[0].add(&v[1]).unwrap(), trials);
        check_primitive("sub", &[&[2, 3], &[2, 3]], |v| v[0].sub(&v[1]).unwrap(), trials);
        check_primitive("mul", &[&[2, 3], &[2, 3]], |v| v[0].mul(&v[1]).unwrap(), trials);
        check_primitive("add_row", &[&[3, 4], &[4]], |v| v[0].add_row(&v[1]).unwrap(), trials);
        check_primitive("affine", &[&[2, 3]], |v| v[0].affine(-1.5, 0.25), trials);
        check_primitive("tanh", &[&[2, 3]], |v| v[0].tanh(), trials);
        check_primitive("sigmoid", &[&[2, 3]], |v| v[0].sigmoid(), trials);
        check_primitive("gelu", &[&[2, 3]], |v| v[0].gelu(), trials);
        check_primitive(
            "layer_norm",
            &[&[3, 5], &[5], &[5]],
            |v| v[0].layer_norm(&v[1], &v[2]).unwrap(),
            trials,
        );
        check_primitive("concat0", &[&[2, 3], &[1, 3]], |v| concat(&v[..2], 0).unwrap(), trials);
        check_primitive("concat1", &[&[2, 3], &[2, 1]], |v| concat(&v[..2], 1).unwrap(), trials);
        check_primitive("slice0", &[&[4, 3]], |v| v[0].slice(0, 1, 2).unwrap(), trials);
        check_primitive("slice1", &[&[4, 3]], |v| v[0].slice(1, 1, 2).unwrap(), trials);
        check_primitive("reshape", &[&[2, 6]], |v| v[0].reshape(&[3, 4]).unwrap(), trials);
        check_primitive("sum", &[&[2, 3]], |v| v[0].sum(), trials);
        check_primitive("mean", &[&[2, 3]], |v| v[0].mean(), trials);
        check_primitive("row_contract", &[&[2, 6], &[2, 3]], |v| v[0].row_contract(&v[1], 3).unwrap(), trials);
        check_primitive(
            "gather",
            &[&[3, 3]],
            |v| v[0].gather(Arc::new(vec![0, 4, 4, 8, 2]), &[5]).unwrap(),
            trials,
        );
        check_primitive(
            "sq_err_sum",
            &[&[2, 3]],
            |v| v[0].sq_err_sum(&Tensor::full(&[2, 3], 0.5)).unwrap(),
            trials,
        );
    }

    /// Forward pass of a small MLP with every kind of layer the models use.
    fn mlp<'t>(x: &Var<'t>, params: &[Var<'t>]) -> Var<'t> {
        let mut h = x.clone();
        for layer in 0..4 {
            let w = &params[3 * layer];
            let b = &params[3 * layer + 1];
            h = h.matmul(w).unwrap().add_row(b).unwrap();
            let g = &params[3 * layer + 2];
            h = h.layer_norm(g, b).unwrap().gelu();
        }
        h.matmul(&params[12]).unwrap().tanh()
    }

    #[test]
    fn five_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Vec::new();
        let width = 6;
        let mut fan_in = 3;
        for _ in 0..4 {
            params.push(rand_tensor(&mut rng, &[fan_in, width]));
            params.push(rand_tensor(&mut rng, &[width]));
            params.push(rand_tensor(&mut rng, &[width]));
            fan_in = width;
        }
        params.push(rand_tensor(&mut rng, &[width, 2]));
        let x = rand_tensor(&mut rng, &[4, 3]);

        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = mlp(&tape.constant(x.clone()), &vars).sum();
        let grads = tape.backward(&out).unwrap();

        let f = |ps: &[Tensor]| {
            let t = Tape::inference();
            let v: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
            mlp(&t.constant(x.clone()), &v).sum().value().item().unwrap()
        };
        let fd = fd_grads(&params, &f, 1e-5);
        for (k, v) in vars.iter().enumerate() {
            let e = rel_err(grads.get(v).data(), &fd[k]);
            assert!(e < 1e-6, "param {k}: rel err {e:e}");
        }
    }

    #[test]
    fn seeded_backward_is_a_vjp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 2]);
        let seed = rand_tensor(&mut rng, &[3, 2]);
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = x.tanh();
        let g = tape.backward_with_seed(&y, &seed).unwrap();
        for ((gi, ai), si) in g.get(&x).data().iter().zip(a.data()).zip(seed.data()) {
            let expect = si * (1.0 - ai.tanh().powi(2));
            assert!((gi - expect).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w0 = rand_tensor(&mut rng, &[3, 3]);
            let x0 = rand_tensor(&mut rng, &[2, 3]);

            let run = |ca: f64, cb: f64| {
                let tape = Tape::new();
                let w = tape.leaf(w0.clone());
                let x = tape.constant(x0.clone());
                let h = x.matmul(&w).unwrap();
                let f = h.tanh().sum();
                let g = h.gelu().mul(&h).unwrap().sum();
                let y = f.scale(ca).add(&g.scale(cb)).unwrap();
                tape.backward(&y).unwrap().get(&w)
            };
            let combined = run(a, b);
            let gf = run(1.0, 0.0);
            let gg = run(0.0, 1.0);
            for ((c, f), g) in combined.data().iter().zip(gf.data()).zip(gg.data()) {
                prop_assert!((c - (a * f + b * g)).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }

        #[test]
        fn same_inputs_give_identical_results(seed in any::<u64>()) {
            let build = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w0 = rand_tensor(&mut rng, &[4, 4]);
                let x0 = rand_tensor(&mut rng, &[3, 4]);
                let tape = Tape::new();
                let w = tape.leaf(w0);
                let y = tape.constant(x0).matmul(&w).unwrap().gelu().sum();
                let g = tape.backward(&y).unwrap().get(&w);
                (y.value().clone(), g)
            };
            let (y1, g1) = build();
            let (y2, g2) = build();
            prop_assert_eq!(y1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(g1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            g2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

use super::*;
use crate::linalg::{max_abs_diff, norm, standard_normal, sub};

fn net(sizes: &[usize], act: Activation, loss: LossKind) -> Mlp {
    Mlp::new(
        MlpArchitecture::new(sizes.to_vec(), act, loss).unwrap(),
        RegularizerMask::WeightsOnly,
    )
}

fn random_batch(rng: &mut Rng, n: usize, d: usize, c: usize) -> Batch {
    let inputs = Matrix::from_vec(n, d, standard_normal(rng, n * d)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    Batch::from_labels(inputs, &labels, c).unwrap()
}

fn random_params(mlp: &Mlp, rng: &mut Rng, sd: f64) -> ParamVector {
    let v = standard_normal(rng, mlp.n_params()).iter().map(|x| sd * x).collect();
    mlp.params(v).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    max_abs_diff(a, b) / scale
}

fn shifted(p: &ParamVector, v: &[f64], h: f64) -> ParamVector {
    let vals = p.values().iter().zip(v).map(|(a, b)| a + h * b).collect();
    p.with_values(vals).unwrap()
}

fn dense_of(p: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            f(&e)
        })
        .collect();
    Matrix::from_columns(&cols).unwrap()
}

#[test]
fn layout_partitions_parameters() {
    let mlp = net(&[3, 4, 2], Activation::Relu, LossKind::CrossEntropy);
    let layout = mlp.layout();
    assert_eq!(layout.len(), 3 * 4 + 4 + 4 * 2 + 2);
    let mut next = 0;
    for b in layout.blocks() {
        assert_eq!(b.offset, next);
        next += b.len();
        let all_weight = layout.weight_mask()[b.range()].iter().all(|m| *m);
        let none_weight = layout.weight_mask()[b.range()].iter().all(|m| !*m);
        match b.role {
            ParamRole::Weight => assert!(all_weight),
            ParamRole::Bias => assert!(none_weight),
        }
    }
    assert_eq!(next, layout.len());
}

#[test]
fn zero_network_is_uniform() {
    let mlp = net(&[5, 7, 10], Activation::Tanh, LossKind::CrossEntropy);
    let mut rng = Rng::new(1);
    let batch = random_batch(&mut rng, 6, 5, 10);
    let p = mlp.zero_params();
    let probs = mlp.predict_proba(&p, batch.inputs()).unwrap();
    assert!(probs.as_slice().iter().all(|v| (v - 0.1).abs() < 1e-15));
    let loss = mlp.loss(&p, &batch, 0.3).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn identity_layer_passes_input_through() {
    let mlp = net(&[3, 3], Activation::Relu, LossKind::Mse);
    let mut vals = vec![0.0; mlp.n_params()];
    for i in 0..3 {
        vals[i * 3 + i] = 1.0;
    }
    let p = mlp.params(vals).unwrap();
    let x = Matrix::from_rows(&[vec![1.5, -2.0, 0.25]]).unwrap();
    assert_eq!(mlp.forward(&p, &x).unwrap().row(0), &[1.5, -2.0, 0.25]);
}

#[test]
fn forward_matches_straight_line_evaluation() {
    let mlp = net(&[2, 3, 2], Activation::Relu, LossKind::CrossEntropy);
    let p = random_params(&mlp, &mut Rng::new(2), 1.0);
    let t = p.values();
    let x = [0.7, -1.3];
    // W1 at 0..6 (column-major 3×2), b1 at 6..9, W2 at 9..15 (2×3), b2 at 15..17
    let mut h = [0.0; 3];
    for (o, hv) in h.iter_mut().enumerate() {
        let z = t[o] * x[0] + t[3 + o] * x[1] + t[6 + o];
        *hv = z.max(0.0);
    }
    let mut f = [0.0; 2];
    for (o, fv) in f.iter_mut().enumerate() {
        *fv = t[9 + o] * h[0] + t[11 + o] * h[1] + t[13 + o] * h[2] + t[15 + o];
    }
    let xm = Matrix::from_rows(&[x.to_vec()]).unwrap();
    let out = mlp.forward(&p, &xm).unwrap();
    assert!(max_abs_diff(out.row(0), &f) < 1e-14);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mlp = net(&[3, 2], Activation::Relu, LossKind::Mse);
    let p = mlp.zero_params();
    assert!(mlp.forward(&p, &Matrix::zeros(1, 4)).is_err());
    assert!(mlp
        .hvp(&p, &random_batch(&mut Rng::new(0), 2, 3, 2), 0.0, &[0.0; 3])
        .is_err());
    assert!(mlp.loss(&p, &random_batch(&mut Rng::new(0), 2, 3, 2), -1.0).is_err());
}

#[test]
fn regularizer_gradient_hits_weights_only() {
    let mlp = net(&[3, 4, 2], Activation::Tanh, LossKind::CrossEntropy);
    let mut rng = Rng::new(3);
    let batch = random_batch(&mut rng, 5, 3, 2);
    let p = random_params(&mlp, &mut rng, 0.5);
    let (l0, g0) = mlp.loss_and_grad(&p, &batch, 0.0).unwrap();
    let beta = 0.7;
    let (l1, g1) = mlp.loss_and_grad(&p, &batch, beta).unwrap();
    let w2: f64 = p
        .values()
        .iter()
        .zip(mlp.layout().weight_mask())
        .filter(|(_, m)| **m)
        .map(|(v, _)| v * v)
        .sum();
    assert!((l1 - l0 - 0.5 * beta * w2).abs() < 1e-12);
    for i in 0..p.len() {
        let expected = if mlp.layout().weight_mask()[i] {
            beta * p.values()[i]
        } else {
            0.0
        };
        assert!((g1[i] - g0[i] - expected).abs() < 1e-14);
    }
}

#[test]
fn full_mask_regularizes_biases() {
    let arch = MlpArchitecture::new(vec![2, 2], Activation::Relu, LossKind::Mse).unwrap();
    let mlp = Mlp::new(arch, RegularizerMask::All);
    assert!(mlp.mask().iter().all(|m| *m == 1.0));
}

fn hundred_param_net(act: Activation) -> (Mlp, ParamVector, Batch) {
    // 4·8 + 8 + 8·6 + 6 + 6·2 + 2 = 108 parameters
    let mlp = net(&[4, 8, 6, 2], act, LossKind::CrossEntropy);
    let mut rng = Rng::new(4);
    let batch = random_batch(&mut rng, 12, 4, 2);
    let p = random_params(&mlp, &mut rng, 0.6);
    (mlp, p, batch)
}

#[test]
fn gradient_matches_central_differences() {
    for act in [Activation::Relu, Activation::Tanh] {
        let (mlp, p, batch) = hundred_param_net(act);
        let beta = 0.05;
        let (_, g) = mlp.loss_and_grad(&p, &batch, beta).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..p.len())
            .map(|i| {
                let mut e = vec![0.0; p.len()];
                e[i] = 1.0;
                let up = mlp.loss(&shifted(&p, &e, h), &batch, beta).unwrap();
                let dn = mlp.loss(&shifted(&p, &e, -h), &batch, beta).unwrap();
                (up - dn) / (2.0 * h)
            })
            .collect();
        assert!(rel(&g, &fd) <= 1e-5, "{act:?}: {}", rel(&g, &fd));
    }
}

#[test]
fn hvp_matches_differences_of_gradients() {
    for act in [Activation::Relu, Activation::Tanh] {
        let (mlp, p, batch) = hundred_param_net(act);
        let beta = 0.05;
        let mut rng = Rng::new(5);
        let v = standard_normal(&mut rng, p.len());
        let hv = mlp.hvp(&p, &batch, beta, &v).unwrap();
        let h = 1e-5;
        let (_, gu) = mlp.loss_and_grad(&shifted(&p, &v, h), &batch, beta).unwrap();
        let (_, gd) = mlp.loss_and_grad(&shifted(&p, &v, -h), &batch, beta).unwrap();
        let fd: Vec<f64> = gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(rel(&hv, &fd) <= 1e-5, "{act:?}: {}", rel(&hv, &fd));
    }
}

#[test]
fn zero_direction_gives_zero() {
    let (mlp, p, batch) = hundred_param_net(Activation::Tanh);
    let z = vec![0.0; p.len()];
    assert!(mlp.hvp(&p, &batch, 0.0, &z).unwrap().iter().all(|v| *v == 0.0));
    assert!(mlp.ggn_vp(&p, &batch, 0.0, &z).unwrap().iter().all(|v| *v == 0.0));
    assert!(mlp
        .jacobian_vp(&p, batch.inputs().row(0), &z)
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn linear_least_squares_hessian() {
    // f = W x + b, ℓ = ‖f − y‖²: H = (2/N) Σ [x;1][x;1]ᵀ ⊗ I_C on (W, b).
    let (d, c, n) = (3, 2, 7);
    let mlp = net(&[d, c], Activation::Relu, LossKind::Mse);
    let mut rng = Rng::new(6);
    let batch = random_batch(&mut rng, n, d, c);
    let beta = 0.2;
    let p_len = mlp.n_params();
    let mut dense = Matrix::zeros(p_len, p_len);
    let index = |i: usize, o: usize| if i < d { i * c + o } else { d * c + o };
    for r in 0..n {
        let mut xa = batch.inputs().row(r).to_vec();
        xa.push(1.0);
        for i in 0..=d {
            for k in 0..=d {
                for o in 0..c {
                    dense[(index(i, o), index(k, o))] += 2.0 / n as f64 * xa[i] * xa[k];
                }
            }
        }
    }
    for j in 0..d * c {
        dense[(j, j)] += beta;
    }
    for seed in 0..3 {
        let p = random_params(&mlp, &mut Rng::new(10 + seed), 1.0);
        let v = standard_normal(&mut rng, p_len);
        let hv = mlp.hvp(&p, &batch, beta, &v).unwrap();
        assert!(rel(&hv, &dense.matvec(&v)) < 1e-13);
    }
}

/// Explicit per-sample Jacobian of a one-hidden-layer net, by the chain rule.
fn explicit_jacobian(mlp: &Mlp, p: &ParamVector, x: &[f64]) -> Matrix {
    let sizes = &mlp.architecture().layer_sizes;
    let (d, h, c) = (sizes[0], sizes[1], sizes[2]);
    let act = mlp.architecture().activation;
    let t = p.values();
    let w1 = |o: usize, i: usize| t[i * h + o];
    let b1 = d * h;
    let w2_off = b1 + h;
    let w2 = |o: usize, i: usize| t[w2_off + i * c + o];
    let b2 = w2_off + h * c;
    let z1: Vec<f64> = (0..h)
        .map(|j| (0..d).map(|i| w1(j, i) * x[i]).sum::<f64>() + t[b1 + j])
        .collect();
    let a1: Vec<f64> = z1.iter().map(|z| act.eval(*z)).collect();
    let mut jac = Matrix::zeros(c, mlp.n_params());
    for o in 0..c {
        for j in 0..h {
            let back = w2(o, j) * act.d1(z1[j]);
            for i in 0..d {
                jac[(o, i * h + j)] = back * x[i];
            }
            jac[(o, b1 + j)] = back;
            jac[(o, w2_off + j * c + o)] = a1[j];
        }
        jac[(o, b2 + o)] = 1.0;
    }
    jac
}

fn loss_hessian(mlp: &Mlp, f: &[f64]) -> Matrix {
    let c = f.len();
    match mlp.architecture().loss {
        LossKind::CrossEntropy => {
            let p = softmax(f);
            Matrix::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
        }
        LossKind::Mse => Matrix::identity(c).scaled(2.0),
    }
}

fn explicit_ggn(mlp: &Mlp, p: &ParamVector, batch: &Batch) -> Matrix {
    let n_params = mlp.n_params();
    let mut g = Matrix::zeros(n_params, n_params);
    let logits = mlp.forward(p, batch.inputs()).unwrap();
    for r in 0..batch.len() {
        let jac = explicit_jacobian(mlp, p, batch.inputs().row(r));
        let hl = loss_hessian(mlp, logits.row(r));
        let term = jac.transpose().matmul(&hl).unwrap().matmul(&jac).unwrap();
        g = g.add(&term.scaled(1.0 / batch.len() as f64));
    }
    g
}

#[test]
fn ggn_matches_explicit_jacobian_assembly() {
    // 4·6 + 6 + 6·2 + 2 = 44 parameters
    for (act, loss) in [
        (Activation::Tanh, LossKind::CrossEntropy),
        (Activation::Relu, LossKind::CrossEntropy),
        (Activation::Tanh, LossKind::Mse),
    ] {
        let mlp = net(&[4, 6, 2], act, loss);
        let mut rng = Rng::new(7);
        let batch = random_batch(&mut rng, 9, 4, 2);
        let p = random_params(&mlp, &mut rng, 0.8);
        let oracle = explicit_ggn(&mlp, &p, &batch);
        let dense = dense_of(mlp.n_params(), |v| mlp.ggn_vp(&p, &batch, 0.0, v).unwrap());
        let err = dense.relative_frobenius_error(&oracle);
        assert!(err <= 1e-8, "{act:?}/{loss:?}: {err}");
    }
}

#[test]
fn jacobian_vp_matches_explicit_jacobian() {
    let mlp = net(&[4, 6, 3], Activation::Tanh, LossKind::CrossEntropy);
    let mut rng = Rng::new(8);
    let p = random_params(&mlp, &mut rng, 0.8);
    let x = standard_normal(&mut rng, 4);
    let v = standard_normal(&mut rng, mlp.n_params());
    let jv = mlp.jacobian_vp(&p, &x, &v).unwrap();
    let oracle = explicit_jacobian(&mlp, &p, &x).matvec(&v);
    assert!(rel(&jv, &oracle) < 1e-13);
}

#[test]
fn jacobian_vp_matches_central_differences() {
    let (mlp, p, batch) = hundred_param_net(Activation::Relu);
    let mut rng = Rng::new(9);
    let v = standard_normal(&mut rng, p.len());
    let h = 1e-6;
    for r in 0..batch.len() {
        let x = batch.inputs().row(r);
        let xm = Matrix::from_rows(&[x.to_vec()]).unwrap();
        let up = mlp.forward(&shifted(&p, &v, h), &xm).unwrap();
        let dn = mlp.forward(&shifted(&p, &v, -h), &xm).unwrap();
        let fd: Vec<f64> = up
            .row(0)
            .iter()
            .zip(dn.row(0))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let jv = mlp.jacobian_vp(&p, x, &v).unwrap();
        assert!(rel(&jv, &fd) <= 1e-5, "row {r}: {}", rel(&jv, &fd));
    }
}

#[test]
fn single_linear_layer_is_exactly_linear() {
    // Deeper identity-activation nets are linear in x but not in θ, so the
    // exactness claims only hold for one layer.
    let mlp = net(&[5, 3], Activation::Identity, LossKind::Mse);
    let mut rng = Rng::new(10);
    let batch = random_batch(&mut rng, 8, 5, 3);
    let p = random_params(&mlp, &mut rng, 1.0);
    let v = standard_normal(&mut rng, mlp.n_params());
    let hv = mlp.hvp(&p, &batch, 0.1, &v).unwrap();
    let gv = mlp.ggn_vp(&p, &batch, 0.1, &v).unwrap();
    assert!(rel(&gv, &hv) < 1e-14);

    let x = batch.inputs().row(0);
    let xm = Matrix::from_rows(&[x.to_vec()]).unwrap();
    let f0 = mlp.forward(&p, &xm).unwrap();
    let f1 = mlp.forward(&shifted(&p, &v, 1.0), &xm).unwrap();
    let jv = mlp.jacobian_vp(&p, x, &v).unwrap();
    assert!(max_abs_diff(&jv, &sub(f1.row(0), f0.row(0))) < 1e-12);
}

#[test]
fn curvature_products_are_linear_and_symmetric() {
    let (mlp, p, batch) = hundred_param_net(Activation::Tanh);
    let mut rng = Rng::new(11);
    let u = standard_normal(&mut rng, p.len());
    let v = standard_normal(&mut rng, p.len());
    let (a, b) = (1.7, -0.4);
    let comb: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
    type Op<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;
    let ops: [(&str, Op); 2] = [
        ("hvp", Box::new(|x: &[f64]| mlp.hvp(&p, &batch, 0.01, x).unwrap())),
        ("ggn", Box::new(|x: &[f64]| mlp.ggn_vp(&p, &batch, 0.01, x).unwrap())),
    ];
    for (name, op) in ops.iter() {
        let (ou, ov) = (op(&u), op(&v));
        let expected: Vec<f64> = ou.iter().zip(&ov).map(|(x, y)| a * x + b * y).collect();
        assert!(rel(&op(&comb), &expected) < 1e-10, "{name} linearity");
        let (l, r) = (dot(&u, &ov), dot(&v, &ou));
        assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()), "{name} symmetry");
    }
}

#[test]
fn ggn_is_positive_semidefinite() {
    let (mlp, p, batch) = hundred_param_net(Activation::Relu);
    let mut rng = Rng::new(12);
    for _ in 0..50 {
        let v = standard_normal(&mut rng, p.len());
        let q = dot(&v, &mlp.ggn_vp(&p, &batch, 0.0, &v).unwrap());
        assert!(q >= -1e-12, "{q}");
    }
}

#[test]
fn ggn_equals_sampled_fisher_for_cross_entropy() {
    // 3·5 + 5 + 5·3 + 3 = 38 parameters
    let mlp = net(&[3, 5, 3], Activation::Tanh, LossKind::CrossEntropy);
    let mut rng = Rng::new(13);
    let batch = random_batch(&mut rng, 10, 3, 3);
    let p = random_params(&mlp, &mut rng, 0.8);
    let n_params = mlp.n_params();
    let ggn = dense_of(n_params, |v| mlp.ggn_vp(&p, &batch, 0.0, v).unwrap());

    let probs = mlp.predict_proba(&p, batch.inputs()).unwrap();
    let draws = 100_000 / batch.len();
    let mut fisher = Matrix::zeros(n_params, n_params);
    for r in 0..batch.len() {
        let x = Matrix::from_rows(&[batch.inputs().row(r).to_vec()]).unwrap();
        // per-label gradients, weighted by how often each label is drawn
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let single = Batch::from_labels(x.clone(), &[k], 3).unwrap();
                mlp.loss_and_grad(&p, &single, 0.0).unwrap().1
            })
            .collect();
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[rng.categorical(probs.row(r))] += 1;
        }
        for (k, g) in grads.iter().enumerate() {
            let w = counts[k] as f64 / (draws * batch.len()) as f64;
            for i in 0..n_params {
                for j in 0..n_params {
                    fisher[(i, j)] += w * g[i] * g[j];
                }
            }
        }
    }
    let err = fisher.relative_frobenius_error(&ggn);
    assert!(err <= 0.02, "{err}");
}

#[test]
fn kfac_input_factor_is_gram_matrix() {
    let (d, c, n) = (4, 3, 11);
    let mlp = net(&[d, c], Activation::Relu, LossKind::Mse);
    let mut rng = Rng::new(14);
    let batch = random_batch(&mut rng, n, d, c);
    let p = random_params(&mlp, &mut rng, 1.0);
    let blocks = mlp.kfac_factors(&p, &batch, FisherMode::Empirical, &mut rng).unwrap();
    assert_eq!(blocks.len(), 1);
    let x = batch.inputs();
    let gram = x.transpose().matmul(x).unwrap().scaled(1.0 / n as f64);
    assert!(blocks[0].factor_a().matrix().relative_frobenius_error(&gram) < 1e-14);

    // B = (1/N) Σ g gᵀ with g = 2(f − y)
    let f = mlp.forward(&p, x).unwrap();
    let mut b = Matrix::zeros(c, c);
    for r in 0..n {
        let g: Vec<f64> = f
            .row(r)
            .iter()
            .zip(batch.targets().row(r))
            .map(|(a, y)| 2.0 * (a - y))
            .collect();
        for i in 0..c {
            for j in 0..c {
                b[(i, j)] += g[i] * g[j] / n as f64;
            }
        }
    }
    assert!(blocks[0].factor_b().matrix().relative_frobenius_error(&b) < 1e-13);
}

#[test]
fn kfac_factors_are_psd_and_seeded() {
    let (mlp, p, batch) = hundred_param_net(Activation::Relu);
    let a = mlp
        .kfac_factors(&p, &batch, FisherMode::McSample, &mut Rng::new(15))
        .unwrap();
    let b = mlp
        .kfac_factors(&p, &batch, FisherMode::McSample, &mut Rng::new(15))
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for blk in &a {
        for f in [blk.factor_a(), blk.factor_b()] {
            let e = crate::linalg::sym_eigh(f).unwrap();
            assert!(e.eigenvalues().iter().all(|v| *v >= -1e-10));
        }
    }
}

#[test]
fn kfac_mc_fisher_of_mse_matches_loss_hessian_on_average() {
    // E[g gᵀ] over y ~ N(f, ½I) is 2·2·½ = 2 per output: B → 2·(1/N)Σ δ-structure.
    let (d, c, n) = (2, 2, 4);
    let mlp = net(&[d, c], Activation::Identity, LossKind::Mse);
    let mut rng = Rng::new(16);
    let batch = random_batch(&mut rng, n, d, c);
    let p = random_params(&mlp, &mut rng, 1.0);
    let reps = 20_000;
    let mut mean_b = Matrix::zeros(c, c);
    for _ in 0..reps {
        let blocks = mlp.kfac_factors(&p, &batch, FisherMode::McSample, &mut rng).unwrap();
        mean_b = mean_b.add(&blocks[0].factor_b().matrix().scaled(1.0 / reps as f64));
    }
    let expected = Matrix::identity(c).scaled(2.0);
    assert!(mean_b.relative_frobenius_error(&expected) < 0.02);
}

#[test]
fn init_is_seeded_with_zero_biases() {
    let mlp = net(&[3, 16, 2], Activation::Relu, LossKind::CrossEntropy);
    let a = mlp.init_params(&mut Rng::new(17));
    assert_eq!(a, mlp.init_params(&mut Rng::new(17)));
    for b in mlp.layout().blocks().iter().filter(|b| b.role == ParamRole::Bias) {
        assert!(a.values()[b.range()].iter().all(|v| *v == 0.0));
    }
    assert!(norm(a.values()) > 0.0);
}

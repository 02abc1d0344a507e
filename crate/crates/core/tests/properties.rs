use proptest::prelude::*;

use mbq_core::cg::{cg_minimize, debiased_cg, CgConfig, DebiasMode};
use mbq_core::diagnostics::{eigendirection_scan, overlap_matrix, DirectionSet, ScanContext};
use mbq_core::laplace::{build_posterior, debias_kfac, KfacBlock};
use mbq_core::linalg::{
    axpy, dot, kron_dense, kron_matvec, lanczos_top_k, max_abs_diff, norm, standard_normal, sym_eigh, DenseSymMatrix,
    LanczosConfig, Matrix, Rng,
};
use mbq_core::metrics::{nll, ProbTable};
use mbq_core::model::{Activation, Batch, Dataset, LossKind, Mlp, MlpArchitecture, ParamVector, RegularizerMask};
use mbq_core::quadratic::{build_quadratic, CurvatureKind, CurvatureOperator, Direction, QuadraticModel};

fn random_sym(rng: &mut Rng, n: usize) -> Matrix {
    let a = Matrix::from_vec(n, n, standard_normal(rng, n * n)).unwrap();
    a.add(&a.transpose()).scaled(0.5)
}

fn random_spd(rng: &mut Rng, n: usize, shift: f64) -> Matrix {
    let a = Matrix::from_vec(n, n, standard_normal(rng, n * n)).unwrap();
    let mut m = a.transpose().matmul(&a).unwrap().scaled(1.0 / n as f64);
    m.shift_diagonal(shift);
    DenseSymMatrix::symmetrize(&m).unwrap().into_matrix()
}

fn net(sizes: &[usize], act: Activation) -> Mlp {
    Mlp::new(
        MlpArchitecture::new(sizes.to_vec(), act, LossKind::CrossEntropy).unwrap(),
        RegularizerMask::WeightsOnly,
    )
}

fn random_dataset(rng: &mut Rng, n: usize, d: usize, c: usize) -> Dataset {
    let inputs = Matrix::from_vec(n, d, standard_normal(rng, n * d)).unwrap();
    let labels = (0..n).map(|_| rng.below(c)).collect();
    Dataset::new(inputs, labels, c).unwrap()
}

fn random_params(mlp: &Mlp, rng: &mut Rng, sd: f64) -> ParamVector {
    mlp.params(standard_normal(rng, mlp.n_params()).iter().map(|x| sd * x).collect())
        .unwrap()
}

fn dense_q(h: Matrix, g: Vec<f64>) -> QuadraticModel {
    let n = g.len();
    let op = CurvatureOperator::dense(DenseSymMatrix::symmetrize(&h).unwrap(), None, 0.0, 0.0).unwrap();
    QuadraticModel::from_parts(vec![0.0; n], 0.0, g, op, "dense").unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eigh_reconstructs_symmetric_matrices(seed in any::<u64>(), n in 1usize..=200) {
        let mut rng = Rng::new(seed);
        let m = random_sym(&mut rng, n);
        let eig = sym_eigh(&DenseSymMatrix::symmetrize(&m).unwrap()).unwrap();
        prop_assert!(eig.reconstruct().relative_frobenius_error(&m) <= 1e-10);
        prop_assert!(eig.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn lanczos_agrees_with_dense_solver(seed in any::<u64>(), n in 8usize..=120, k in 1usize..=6) {
        let mut rng = Rng::new(seed);
        // well separated top of the spectrum
        let mut values: Vec<f64> = (0..n).map(|i| if i < k + 1 { 10.0 + 2.0 * (k - i.min(k)) as f64 } else { rng.uniform() }).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let basis = sym_eigh(&DenseSymMatrix::symmetrize(&random_sym(&mut rng, n)).unwrap()).unwrap().basis().clone();
        let m = basis.matmul(&Matrix::diag(&values)).unwrap().matmul(&basis.transpose()).unwrap();
        let m = DenseSymMatrix::symmetrize(&m).unwrap();
        let dense = sym_eigh(&m).unwrap();
        let top = lanczos_top_k(&m, k, &mut rng, &LanczosConfig::default()).unwrap();
        for i in 0..k {
            let (a, b) = (top.eigenvalues()[i], dense.eigenvalues()[i]);
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
            let c = dot(&top.vector(i), &dense.vector(i)).abs().min(1.0);
            prop_assert!(c.acos() <= 1e-6, "angle {}", c.acos());
        }
    }

    #[test]
    fn kron_matvec_matches_explicit_product(seed in any::<u64>(), m in 1usize..=8, n in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let a = Matrix::from_vec(m, m, standard_normal(&mut rng, m * m)).unwrap();
        let b = Matrix::from_vec(n, n, standard_normal(&mut rng, n * n)).unwrap();
        let w = standard_normal(&mut rng, m * n);
        let fast = kron_matvec(&a, &b, &w).unwrap();
        let slow = kron_dense(&a, &b).matvec(&w);
        prop_assert!(max_abs_diff(&fast, &slow) <= 1e-12 * (1.0 + norm(&slow)));
    }

    #[test]
    fn curvature_products_are_linear_and_symmetric(seed in any::<u64>(), tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let mlp = net(&[3, 5, 4, 3], act);
        let mut rng = Rng::new(seed);
        let batch = random_dataset(&mut rng, 10, 3, 3).full_batch().unwrap();
        let p = random_params(&mlp, &mut rng, 0.7);
        let (u, v) = (standard_normal(&mut rng, p.len()), standard_normal(&mut rng, p.len()));
        let (a, b) = (rng.normal(), rng.normal());
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        for ggn in [true, false] {
            let op = |x: &[f64]| if ggn { mlp.ggn_vp(&p, &batch, 0.01, x).unwrap() } else { mlp.hvp(&p, &batch, 0.01, x).unwrap() };
            let (ou, ov, om) = (op(&u), op(&v), op(&mix));
            let combined: Vec<f64> = ou.iter().zip(&ov).map(|(x, y)| a * x + b * y).collect();
            prop_assert!(max_abs_diff(&om, &combined) <= 1e-10 * norm(&combined).max(1e-300));
            let (uv, vu) = (dot(&u, &ov), dot(&v, &ou));
            prop_assert!((uv - vu).abs() <= 1e-10 * uv.abs().max(vu.abs()).max(1e-300));
        }
    }

    #[test]
    fn batch_mean_identity_holds_for_exact_curvatures(seed in any::<u64>(), n_batches in 2usize..=6, hessian in any::<bool>()) {
        let mlp = net(&[3, 6, 3], Activation::Tanh);
        let mut rng = Rng::new(seed);
        let data = random_dataset(&mut rng, 8 * n_batches, 3, 3);
        let theta = random_params(&mlp, &mut rng, 0.7);
        let batches = data.partition(8, &mut rng).unwrap();
        let kind = if hessian { CurvatureKind::Hessian } else { CurvatureKind::Ggn };
        let ctx = ScanContext::build(&mlp, &theta, &batches, &data, kind, 0.01, 0.0, 16).unwrap();
        for (_, report) in eigendirection_scan(&ctx, 4, seed).unwrap() {
            prop_assert!(report.batch_mean_deviation() <= 1e-10, "{}", report.batch_mean_deviation());
        }
    }

    #[test]
    fn quadratic_cut_is_exact(seed in any::<u64>(), tau in -3.0f64..3.0) {
        let mlp = net(&[3, 5, 3], Activation::Relu);
        let mut rng = Rng::new(seed);
        let batch = random_dataset(&mut rng, 12, 3, 3).full_batch().unwrap();
        let anchor = random_params(&mlp, &mut rng, 0.7);
        let q = build_quadratic(&mlp, &anchor, &batch, CurvatureKind::Ggn, 0.01, 0.0).unwrap();
        let theta: Vec<f64> = anchor.values().iter().map(|v| v + 0.1 * rng.normal()).collect();
        let d = Direction::normalize(&standard_normal(&mut rng, q.dim())).unwrap();
        let mut moved = theta.clone();
        axpy(tau, d.as_slice(), &mut moved);
        let predicted = 0.5 * tau * tau * q.directional_curvature(&d).unwrap()
            + tau * q.directional_slope(&theta, &d).unwrap()
            + q.value_at(&theta).unwrap();
        let direct = q.value_at(&moved).unwrap();
        prop_assert!(rel(predicted, direct) <= 1e-10, "{predicted} vs {direct}");
    }

    #[test]
    fn damping_bounds_directional_curvature(seed in any::<u64>(), delta in 1e-3f64..1.0) {
        let mlp = net(&[3, 5, 3], Activation::Tanh);
        let mut rng = Rng::new(seed);
        let batch = random_dataset(&mut rng, 12, 3, 3).full_batch().unwrap();
        let anchor = random_params(&mlp, &mut rng, 0.7);
        let q = build_quadratic(&mlp, &anchor, &batch, CurvatureKind::Ggn, 0.0, delta).unwrap();
        let d = Direction::normalize(&standard_normal(&mut rng, q.dim())).unwrap();
        prop_assert!(q.directional_curvature(&d).unwrap() >= delta * (1.0 - 1e-12));
    }

    #[test]
    fn cg_on_spd_systems_is_conjugate_and_descends(seed in any::<u64>(), n in 2usize..=100) {
        let mut rng = Rng::new(seed);
        let h = random_spd(&mut rng, n, 1.0);
        let g = standard_normal(&mut rng, n);
        let q = dense_q(h.clone(), g.clone());
        // conjugacy decays like eps·κ·‖r₀‖/‖r_p‖; stop while 1e-8 is resolvable
        let t = cg_minimize(&q, &CgConfig::new(1e-5 * norm(&g), 2 * n).unwrap()).unwrap();
        let hd: Vec<Vec<f64>> = t.directions.iter().map(|d| h.matvec(d.as_slice())).collect();
        for p in 0..t.iterations() {
            let d = &t.directions[p];
            prop_assert!(t.magnitudes[p] > 0.0);
            prop_assert!(q.directional_slope(&t.iterates[p], d).unwrap() <= 0.0);
            if t.residual_norms[p] >= 1e-5 * t.residual_norms[0] {
                let fresh = -q.directional_slope(&t.iterates[p], d).unwrap() / q.directional_curvature(d).unwrap();
                prop_assert!(rel(t.magnitudes[p], fresh) <= 1e-10);
            }
            let (v0, v1) = (q.value_at(&t.iterates[p]).unwrap(), q.value_at(&t.iterates[p + 1]).unwrap());
            prop_assert!(v1 <= v0 + 1e-12);
            for j in 0..p {
                let c = dot(t.directions[j].as_slice(), &hd[p]);
                let scale = (dot(t.directions[j].as_slice(), &hd[j]) * dot(d.as_slice(), &hd[p])).sqrt();
                prop_assert!(c.abs() <= 1e-8 * scale, "d{j}ᵀHd{p} = {c}");
            }
        }
    }

    #[test]
    fn debiased_iterates_follow_their_steps(seed in any::<u64>(), n in 2usize..=40, sequential in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let g = standard_normal(&mut rng, n);
        let q_dir = dense_q(random_spd(&mut rng, n, 0.5), g.clone());
        let q_mag = dense_q(random_spd(&mut rng, n, 0.5), standard_normal(&mut rng, n));
        let mode = if sequential { DebiasMode::Sequential } else { DebiasMode::Interleaved };
        let run = debiased_cg(&q_dir, &q_mag, n, &CgConfig::new(1e-10, n).unwrap(), mode).unwrap();
        let t = &run.debiased;
        for p in 0..t.iterations() {
            let mut next = t.iterates[p].clone();
            axpy(t.magnitudes[p], t.directions[p].as_slice(), &mut next);
            prop_assert_eq!(&next, &t.iterates[p + 1]);
        }
        prop_assert_eq!(run.total_matvecs(), run.directions.iterations() + t.iterations());
    }

    #[test]
    fn posterior_blocks_diagonalize_the_precision(seed in any::<u64>(), m in 1usize..=8, n in 1usize..=8, beta in 1e-3f64..2.0) {
        let mlp = net(&[m, n], Activation::Identity);
        let mut rng = Rng::new(seed);
        let mean = random_params(&mlp, &mut rng, 1.0);
        let block = KfacBlock::from_factors(0, random_spd(&mut rng, m, 0.01), random_spd(&mut rng, n, 0.01)).unwrap();
        let mut precision = block.to_dense();
        precision.shift_diagonal(beta);
        let post = build_posterior(vec![block], &mean, 7, beta).unwrap();
        let b = &post.blocks()[0];
        let (ea, eb) = (b.eig_a().unwrap(), b.eig_b().unwrap());
        let u = kron_dense(ea.basis(), eb.basis());
        let mut s = Vec::new();
        for sa in ea.eigenvalues() {
            for sb in eb.eigenvalues() {
                s.push(sa * sb + beta);
            }
        }
        let rebuilt = u.matmul(&Matrix::diag(&s)).unwrap().matmul(&u.transpose()).unwrap();
        prop_assert!(rebuilt.relative_frobenius_error(&precision) <= 1e-10);
    }

    #[test]
    fn debiasing_keeps_the_eigenbasis(seed in any::<u64>(), m in 1usize..=8, n in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let b = KfacBlock::from_factors(0, random_spd(&mut rng, m, 0.01), random_spd(&mut rng, n, 0.01)).unwrap().with_eigen().unwrap();
        let t = KfacBlock::from_factors(0, random_spd(&mut rng, m, 0.01), random_spd(&mut rng, n, 0.01)).unwrap();
        let h = debias_kfac(std::slice::from_ref(&b), &[t]).unwrap().remove(0);
        for (u, f) in [(b.eig_a().unwrap().basis(), h.factor_a().matrix()), (b.eig_b().unwrap().basis(), h.factor_b().matrix())] {
            let rotated = u.transpose().matmul(f).unwrap().matmul(u).unwrap();
            let off = Matrix::from_fn(rotated.rows(), rotated.cols(), |i, j| if i == j { 0.0 } else { rotated[(i, j)] });
            prop_assert!(off.frobenius_norm() <= 1e-10 * f.frobenius_norm());
        }
    }

    #[test]
    fn full_overlap_rows_are_distributions(seed in any::<u64>(), n in 1usize..=32) {
        let mut rng = Rng::new(seed);
        let a = sym_eigh(&DenseSymMatrix::symmetrize(&random_sym(&mut rng, n)).unwrap()).unwrap();
        let b = sym_eigh(&DenseSymMatrix::symmetrize(&random_sym(&mut rng, n)).unwrap()).unwrap();
        let o = overlap_matrix(&DirectionSet::from_eigen(0, &a).unwrap(), &DirectionSet::from_eigen(1, &b).unwrap()).unwrap();
        prop_assert!(o.omega().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..n {
            prop_assert!((o.omega().row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn nll_is_the_unregularized_training_loss(seed in any::<u64>(), rows in 1usize..=30) {
        let mlp = net(&[4, 6, 3], Activation::Tanh);
        let mut rng = Rng::new(seed);
        let data = random_dataset(&mut rng, rows, 4, 3);
        let batch: Batch = data.full_batch().unwrap();
        let p = random_params(&mlp, &mut rng, 1.0);
        let probs = mlp.predict_proba(&p, batch.inputs()).unwrap();
        let table = ProbTable::new(probs.clone(), batch.labels()).unwrap();
        let (loss, _) = mlp.loss_and_grad(&p, &batch, 0.0).unwrap();
        let metric = nll(&table).unwrap();
        prop_assert!((metric - loss).abs() <= 1e-10 * loss.max(1.0));
        let worst_row = (0..rows).map(|r| -probs[(r, batch.labels()[r])].ln()).fold(0.0, f64::max);
        prop_assert!(metric <= worst_row + 1e-12);
    }
}

/// With zero gradient, −N·q is the K-FAC Laplace log-density up to a constant.
#[test]
fn kfac_quadratic_is_the_laplace_log_density() {
    let mlp = net(&[3, 4, 2], Activation::Tanh);
    let mut rng = Rng::new(21);
    let mean = random_params(&mlp, &mut rng, 0.5);
    let (n_train, beta) = (30usize, 0.2);
    let sizes = mlp.architecture().layer_sizes.clone();
    let blocks: Vec<KfacBlock> = (0..2)
        .map(|l| {
            KfacBlock::from_factors(
                l,
                random_spd(&mut rng, sizes[l], 0.05),
                random_spd(&mut rng, sizes[l + 1], 0.05),
            )
            .unwrap()
        })
        .collect();
    let post = build_posterior(blocks.clone(), &mean, n_train, beta).unwrap();
    let op = CurvatureOperator::kfac(&mlp, blocks, beta, 0.0).unwrap();
    let q = QuadraticModel::from_parts(mean.values().to_vec(), 0.0, vec![0.0; mean.len()], op, "kfac").unwrap();

    let precisions: Vec<nalgebra::DMatrix<f64>> = (0..2)
        .map(|i| {
            let c = post.block_covariance_dense(i);
            nalgebra::DMatrix::from_row_slice(c.rows(), c.cols(), c.as_slice())
                .try_inverse()
                .unwrap()
        })
        .collect();
    let log_density = |theta: &[f64]| -> f64 {
        (0..2)
            .map(|l| {
                let r = mlp.layout().weight_block(l).range();
                let x = nalgebra::DVector::from_iterator(r.len(), r.clone().map(|i| theta[i] - mean.values()[i]));
                -0.5 * (x.transpose() * &precisions[l] * &x)[(0, 0)]
            })
            .sum()
    };
    let draw = |rng: &mut Rng| -> Vec<f64> {
        let mut t = mean.values().to_vec();
        for l in 0..2 {
            for i in mlp.layout().weight_block(l).range() {
                t[i] += 0.3 * rng.normal();
            }
        }
        t
    };
    for _ in 0..20 {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let from_q = -(n_train as f64) * (q.value_at(&a).unwrap() - q.value_at(&b).unwrap());
        let from_density = log_density(&a) - log_density(&b);
        assert!(
            (from_q - from_density).abs() <= 1e-8 * from_density.abs().max(1.0),
            "{from_q} vs {from_density}"
        );
    }
}

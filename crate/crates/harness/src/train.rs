//! Mini-batch SGD with heavy-ball momentum on the regularized loss.

use mbq_core::linalg::Rng;
use mbq_core::model::{Dataset, Mlp, ParamVector};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::TrainSpec;
use crate::error::{Context, HarnessError, Result};

/// Number of log-equidistant checkpoint epochs.
pub const N_CHECKPOINTS: usize = 10;

/// `count` epochs spread log-equidistantly over `[1, epochs]`, rounded and
/// deduplicated; always ends with `epochs`.
pub fn checkpoint_epochs(epochs: usize, count: usize) -> Vec<usize> {
    if epochs == 0 {
        return vec![0];
    }
    let top = (epochs as f64).ln();
    let mut out: Vec<usize> = (0..count)
        .map(|i| {
            let f = if count > 1 { i as f64 / (count - 1) as f64 } else { 1.0 };
            (top * f).exp().round() as usize
        })
        .collect();
    out.push(epochs);
    out.sort_unstable();
    out.dedup();
    out
}

/// `v ← μ v + g`, `θ ← θ − lr · v`.
pub fn sgd_step(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
}

/// Trains from a seeded initialization; see [`train_from`].
pub fn train(mlp: &Mlp, data: &Dataset, spec: &TrainSpec, config_digest: &str) -> Result<Vec<Checkpoint>> {
    let mut rng = Rng::new(spec.seed);
    let init = mlp.init_params(&mut rng);
    train_from(mlp, data, init, rng, spec, config_digest)
}

/// Runs `spec.epochs` epochs of reshuffled mini-batch SGD. Returns the
/// checkpoints of [`checkpoint_epochs`]; a 0-epoch run returns the start.
pub fn train_from(
    mlp: &Mlp,
    data: &Dataset,
    init: ParamVector,
    mut rng: Rng,
    spec: &TrainSpec,
    config_digest: &str,
) -> Result<Vec<Checkpoint>> {
    if spec.batch_size == 0 {
        return Err(HarnessError::validation("batch size must be positive"));
    }
    let wanted = checkpoint_epochs(spec.epochs, N_CHECKPOINTS);
    let snapshot = |epoch: usize, params: &ParamVector, rng: &Rng| Checkpoint {
        epoch,
        params: params.clone(),
        architecture: mlp.architecture().clone(),
        regularizer: mlp.regularizer_mask(),
        config_digest: config_digest.to_string(),
        rng: RngState::capture(rng),
    };
    let mut params = init;
    let mut velocity = vec![0.0; params.len()];
    let mut out = Vec::new();
    if wanted == [0] {
        out.push(snapshot(0, &params, &rng));
    }
    let mut ids: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=spec.epochs {
        rng.shuffle(&mut ids);
        let mut epoch_loss = 0.0;
        for chunk in ids.chunks(spec.batch_size) {
            let batch = data.subset(chunk).context(|| format!("epoch {epoch}"))?;
            let (loss, grad) = mlp
                .loss_and_grad(&params, &batch, spec.beta)
                .context(|| format!("epoch {epoch}"))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(HarnessError::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            sgd_step(params.values_mut(), &mut velocity, &grad, spec.lr, spec.momentum);
        }
        if params.values().iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Diverged { epoch, loss: f64::NAN });
        }
        log::debug!("epoch {epoch}: mean batch loss {:.6}", epoch_loss / data.len() as f64);
        if wanted.binary_search(&epoch).is_ok() {
            out.push(snapshot(epoch, &params, &rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbq_core::linalg::Matrix;
    use mbq_core::model::{Activation, LossKind, MlpArchitecture, RegularizerMask};

    fn net(sizes: &[usize]) -> Mlp {
        Mlp::new(
            MlpArchitecture::new(sizes.to_vec(), Activation::Relu, LossKind::CrossEntropy).unwrap(),
            RegularizerMask::WeightsOnly,
        )
    }

    fn toy_data() -> Dataset {
        let mut rng = Rng::new(3);
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let x: Vec<f64> = labels
            .iter()
            .flat_map(|&y| {
                let s = if y == 0 { -2.0 } else { 2.0 };
                [s + 0.3 * rng.normal(), 0.3 * rng.normal()]
            })
            .collect();
        Dataset::new(Matrix::from_vec(40, 2, x).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn checkpoint_schedule() {
        let e = checkpoint_epochs(100, 10);
        assert_eq!(e, vec![1, 2, 3, 5, 8, 13, 22, 36, 60, 100]);
        assert_eq!(checkpoint_epochs(3, 10), vec![1, 2, 3]);
        assert_eq!(checkpoint_epochs(0, 10), vec![0]);
    }

    #[test]
    fn one_step_on_half_square() {
        let mut theta = [1.0];
        let mut v = [0.0];
        let g = [theta[0]];
        sgd_step(&mut theta, &mut v, &g, 0.1, 0.0);
        assert!((theta[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut theta = [0.0];
        let mut v = [0.0];
        sgd_step(&mut theta, &mut v, &[1.0], 1.0, 0.5);
        sgd_step(&mut theta, &mut v, &[1.0], 1.0, 0.5);
        assert_eq!(theta[0], -2.5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mlp = net(&[2, 3, 2]);
        let spec = TrainSpec {
            lr: 0.0,
            epochs: 4,
            batch_size: 8,
            ..TrainSpec::default()
        };
        let mut rng = Rng::new(spec.seed);
        let init = mlp.init_params(&mut rng);
        let ckpts = train(&mlp, &toy_data(), &spec, "d").unwrap();
        assert_eq!(ckpts.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        for c in &ckpts {
            assert_eq!(c.params.values(), init.values());
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mlp = net(&[2, 8, 2]);
        let spec = TrainSpec {
            epochs: 20,
            batch_size: 8,
            ..TrainSpec::default()
        };
        let data = toy_data();
        let a = train(&mlp, &data, &spec, "d").unwrap();
        let b = train(&mlp, &data, &spec, "d").unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_as(y)));
        let last = &a.last().unwrap().params;
        let probs = mlp.predict_proba(last, data.inputs()).unwrap();
        let correct = (0..data.len())
            .filter(|&r| mbq_core::metrics::argmax(probs.row(r)).0 == data.labels()[r])
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mlp = net(&[2, 8, 2]);
        let spec = TrainSpec {
            lr: 1e6,
            momentum: 0.0,
            epochs: 50,
            batch_size: 40,
            beta: 1.0,
            ..TrainSpec::default()
        };
        match train(&mlp, &toy_data(), &spec, "d") {
            Err(HarnessError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

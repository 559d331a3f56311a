//! Generalization estimates: holdout split and k-fold cross-validation.

use crate::arch::ArchSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::mse_loss;
use crate::network::Network;
use crate::rng::SeededRng;
use crate::train::{fit_subset, init_network, EpochReport, TrainConfig};

/// Stream index used to shuffle indices for splits and folds.
pub const SPLIT_STREAM: u64 = 3;
const FOLD_STREAM_BASE: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KFoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl KFoldPlan {
    /// Indices of every fold except `fold`, in fold order.
    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect()
    }
}

/// Shuffle `0..m` and hold out `round(m·test_fraction)` indices for testing.
pub fn holdout_split(m: usize, test_fraction: f64, rng: &mut SeededRng) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let test_len = (m as f64 * test_fraction).round() as usize;
    if test_len == 0 || test_len >= m {
        return Err(Error::Config(format!(
            "holding out {test_len} of {m} examples leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let test = order.split_off(m - test_len);
    Ok(SplitPlan { train: order, test })
}

/// Shuffle `0..m` into `k` folds whose sizes differ by at most one; the
/// first `m mod k` folds take the extra element.
pub fn kfold_plan(m: usize, k: usize, rng: &mut SeededRng) -> Result<KFoldPlan> {
    if k < 2 || k > m {
        return Err(Error::Config(format!(
            "k-fold needs 2 ≤ k ≤ m, got k={k}, m={m}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let (base, extra) = (m / k, m % k);
    let mut folds = Vec::with_capacity(k);
    let mut rest = order.as_slice();
    for f in 0..k {
        let (head, tail) = rest.split_at(base + usize::from(f < extra));
        folds.push(head.to_vec());
        rest = tail;
    }
    Ok(KFoldPlan { folds })
}

/// Inference-mode MSE of `net` over the given examples.
pub fn evaluate_mse(net: &mut Network, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let mut preds = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        preds.push(net.forward(&data.images()[i], Mode::Infer)?);
        targets.push(data.targets()[i].clone());
    }
    net.clear_caches();
    Ok(mse_loss(&preds, &targets)?.value)
}

/// Number of examples whose largest absolute error exceeds `tol`.
pub fn misclassification_count(
    pred: &[crate::Tensor],
    target: &[crate::Tensor],
    tol: f64,
) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    pred.iter().zip(target).try_fold(0, |count, (p, t)| {
        let worst = p.max_abs_diff(t)?;
        Ok(count + usize::from(worst > tol))
    })
}

#[derive(Clone, Debug)]
pub struct HoldoutResult {
    pub plan: SplitPlan,
    pub reports: Vec<EpochReport>,
    pub test_mse: f64,
    pub network: Network,
}

/// Train a fresh network on the training side of a holdout split and report
/// the test MSE.
pub fn holdout_evaluate(
    arch: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    test_fraction: f64,
) -> Result<HoldoutResult> {
    let plan = holdout_split(
        data.len(),
        test_fraction,
        &mut SeededRng::derive(cfg.seed, SPLIT_STREAM),
    )?;
    let mut network = init_network(arch, data.image_shape(), cfg.seed)?;
    let reports = fit_subset(&mut network, data, &plan.train, cfg)?;
    let test_mse = evaluate_mse(&mut network, data, &plan.test)?;
    Ok(HoldoutResult {
        plan,
        reports,
        test_mse,
        network,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KFoldResult {
    pub fold_mse: Vec<f64>,
    pub mean_mse: f64,
}

/// Seed for fold `fold`, derived from the master seed.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    SeededRng::derive(master, FOLD_STREAM_BASE + fold as u64).next_u64()
}

/// Train on every fold but `fold` and return the test MSE on `fold`.
pub fn evaluate_fold(
    arch: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    plan: &KFoldPlan,
    fold: usize,
) -> Result<f64> {
    let fold_cfg = TrainConfig {
        seed: fold_seed(cfg.seed, fold),
        ..*cfg
    };
    let run = || {
        let mut net = init_network(arch, data.image_shape(), fold_cfg.seed)?;
        fit_subset(&mut net, data, &plan.training_indices(fold), &fold_cfg)?;
        evaluate_mse(&mut net, data, &plan.folds[fold])
    };
    run().map_err(|e| e.context(format_args!("fold {fold}")))
}

/// k-fold cross-validation: `k` fresh trainings, mean of the `k` test MSEs
/// (reduced in fold order).
pub fn kfold_evaluate(
    arch: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    k: usize,
) -> Result<KFoldResult> {
    kfold_evaluate_with(arch, data, cfg, k, |_, _| {})
}

/// As [`kfold_evaluate`], calling `on_fold(fold, mse)` after each fold.
pub fn kfold_evaluate_with(
    arch: &ArchSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    k: usize,
    mut on_fold: impl FnMut(usize, f64),
) -> Result<KFoldResult> {
    let plan = kfold_plan(
        data.len(),
        k,
        &mut SeededRng::derive(cfg.seed, SPLIT_STREAM),
    )?;
    let mut fold_mse = Vec::with_capacity(k);
    for fold in 0..k {
        let mse = evaluate_fold(arch, data, cfg, &plan, fold)?;
        on_fold(fold, mse);
        fold_mse.push(mse);
    }
    let mean_mse = fold_mse.iter().sum::<f64>() / k as f64;
    Ok(KFoldResult { fold_mse, mean_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptConfig;
    use crate::tensor::{Shape, Tensor};

    fn check_partition(parts: &[&[usize]], m: usize) {
        let mut seen = vec![false; m];
        for part in parts {
            for &i in *part {
                assert!(i < m && !seen[i], "index {i} repeated or out of range");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn holdout_examples() {
        let p = holdout_split(10, 0.2, &mut SeededRng::new(0)).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (8, 2));
        check_partition(&[&p.train, &p.test], 10);
        let p = holdout_split(2, 0.5, &mut SeededRng::new(0)).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (1, 1));
        assert_eq!(
            holdout_split(30, 0.3, &mut SeededRng::new(4)).unwrap(),
            holdout_split(30, 0.3, &mut SeededRng::new(4)).unwrap()
        );
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(
                holdout_split(10, bad, &mut SeededRng::new(0)),
                Err(Error::Config(_))
            ));
        }
        assert!(holdout_split(3, 0.1, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn kfold_examples() {
        let plan = kfold_plan(10, 5, &mut SeededRng::new(1)).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        let plan = kfold_plan(10, 3, &mut SeededRng::new(1)).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let parts: Vec<&[usize]> = plan.folds.iter().map(Vec::as_slice).collect();
        check_partition(&parts, 10);
        assert!(kfold_plan(3, 4, &mut SeededRng::new(0)).is_err());
        assert!(kfold_plan(3, 1, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn misclassification_examples() {
        let a = vec![
            Tensor::vector(&[1., 2.]).unwrap(),
            Tensor::vector(&[0., 0.]).unwrap(),
        ];
        let b: Vec<Tensor> = a.iter().map(|t| t.map(|v| v + 1.0)).collect();
        assert_eq!(misclassification_count(&a, &a, 0.0).unwrap(), 0);
        assert_eq!(misclassification_count(&a, &b, 0.5).unwrap(), 2);
        assert_eq!(misclassification_count(&a, &b, f64::INFINITY).unwrap(), 0);
        assert!(matches!(
            misclassification_count(&a, &b[..1], 0.5),
            Err(Error::Shape(_))
        ));
    }

    fn constant_target_data(m: usize) -> Dataset {
        let shape = Shape::new(&[2, 2, 1]).unwrap();
        Dataset::new(
            "const",
            (0..m).map(|_| Tensor::zeros(&shape)).collect(),
            (0..m)
                .map(|_| Tensor::vector(&[0.3, -0.7]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bias_only_model_learns_a_constant() {
        let data = constant_target_data(10);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 5,
            opt: OptConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
            seed: 2,
            shuffle: true,
        };
        let arch: ArchSpec = "flatten dense(2)".parse().unwrap();
        let res = kfold_evaluate(&arch, &data, &cfg, 5).unwrap();
        assert_eq!(res.fold_mse.len(), 5);
        assert!(res.mean_mse < 1e-12, "{}", res.mean_mse);
    }

    #[test]
    fn leave_one_out_runs_m_trainings() {
        let data = constant_target_data(4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut calls = 0;
        kfold_evaluate_with(
            &"flatten dense(2)".parse().unwrap(),
            &data,
            &cfg,
            4,
            |_, _| calls += 1,
        )
        .unwrap();
        assert_eq!(calls, 4);
    }

    #[test]
    fn fold_order_does_not_matter() {
        let data = crate::data::synth_shapes(12, 8, &mut SeededRng::new(3)).unwrap();
        let arch: ArchSpec = "flatten dense(4) relu dense(2)".parse().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let plan = kfold_plan(12, 3, &mut SeededRng::derive(cfg.seed, SPLIT_STREAM)).unwrap();
        let forward: Vec<f64> = (0..3)
            .map(|f| evaluate_fold(&arch, &data, &cfg, &plan, f).unwrap())
            .collect();
        let mut backward: Vec<f64> = (0..3)
            .rev()
            .map(|f| evaluate_fold(&arch, &data, &cfg, &plan, f).unwrap())
            .collect();
        backward.reverse();
        assert_eq!(forward, backward);
        let full = kfold_evaluate(&arch, &data, &cfg, 3).unwrap();
        assert_eq!(full.fold_mse, forward);
    }
}

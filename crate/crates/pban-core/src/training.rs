//! Optimization protocol: patch-level MOS regression with momentum SGD,
//! k-fold cross-validation over records, and patch-average image scoring.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Tape, Var};
use crate::data::checkpoint::save_checkpoint;
use crate::data::image::{extract_patches, ImageRGB};
use crate::data::manifest::Manifest;
use crate::data::read_image;
use crate::error::{PbanError, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{
    apply_bn_updates, init_weights, is_trainable, Forward, NamedWeights, PBANConfig, Variant,
    PATCH_SIZE,
};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Patches per eval-mode forward when scoring.
const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SGDConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SGDConfig {
    fn default() -> Self {
        SGDConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PbanError::Parameter(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PbanError::Parameter(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(PbanError::Parameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(PbanError::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PbanError::Parameter("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean squared error: pred [B,1] or [B] against targets [B].
pub fn mse_loss<T: Scalar>(pred: &Var<T>, targets: &Var<T>) -> Result<Var<T>> {
    let b = targets.shape().first().copied().unwrap_or(0);
    if targets.shape().len() != 1 || b == 0 {
        return Err(PbanError::Dimension {
            op: "mse_loss",
            msg: format!("targets must be non-empty rank 1, got {:?}", targets.shape()),
        });
    }
    let flat = match pred.shape() {
        s if s == [b] => pred.clone(),
        s if s == [b, 1] => ops::reshape(pred, &[b])?,
        s => {
            return Err(PbanError::Dimension {
                op: "mse_loss",
                msg: format!("predictions {s:?} do not pair with {b} targets"),
            })
        }
    };
    let diff = ops::sub(&flat, targets)?;
    ops::mean(&ops::mul(&diff, &diff)?)
}

/// One classical-momentum SGD update over every trainable tensor:
/// g' = g + weight_decay * p; v = momentum * v + g'; p = p - lr * v.
pub fn sgd_step<T: Scalar>(
    weights: &mut NamedWeights<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    velocity: &mut BTreeMap<String, Tensor<T>>,
    cfg: &SGDConfig,
) -> Result<()> {
    let lr = T::from_f64(cfg.lr);
    let momentum = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    let paths: Vec<String> = weights
        .iter()
        .filter(|(p, _)| is_trainable(p))
        .map(|(p, _)| p.clone())
        .collect();
    for path in paths {
        let p = weights.get(&path).unwrap();
        let g = grads.get(&path).ok_or_else(|| {
            PbanError::Contract(format!("sgd_step: no gradient for {path}"))
        })?;
        if g.shape() != p.shape() {
            return Err(PbanError::Contract(format!(
                "sgd_step: gradient shape {:?} vs parameter {:?} for {path}",
                g.shape(),
                p.shape()
            )));
        }
        let v = velocity
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let mut new_v = Vec::with_capacity(p.len());
        let mut new_p = Vec::with_capacity(p.len());
        for ((&pv, &gv), &vv) in p.as_slice().iter().zip(g.as_slice()).zip(v.as_slice()) {
            let adjusted = gv + wd * pv;
            let vel = momentum * vv + adjusted;
            new_v.push(vel);
            new_p.push(pv - lr * vel);
        }
        *v = Tensor::new(p.shape().to_vec(), new_v)?;
        let updated = Tensor::new(p.shape().to_vec(), new_p)?;
        updated.check_finite("sgd_step")?;
        weights.insert(path, updated);
    }
    Ok(())
}

/// Shuffles record indices with a seeded stream and deals them
/// round-robin into k folds, so sizes differ by at most one.
pub fn kfold_split(n_records: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(PbanError::Parameter(format!(
            "cross-validation needs at least 2 folds, got {k}"
        )));
    }
    if n_records < k {
        return Err(PbanError::Parameter(format!(
            "{n_records} records cannot fill {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, rec) in order.into_iter().enumerate() {
        folds[i % k].push(rec);
    }
    Ok(folds)
}

/// One aligned SR/HR patch pair, labeled by the record it came from.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub record: usize,
    pub sr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

/// Decoded training set: per-record subjective scores plus the flat
/// patch-pair list (every patch carries its image's MOS).
pub struct Dataset {
    pub mos: Vec<f64>,
    pub pairs: Vec<PatchPair>,
}

pub fn build_dataset(manifest: &Manifest) -> Result<Dataset> {
    if manifest.records.is_empty() {
        return Err(PbanError::Data("manifest has no records".into()));
    }
    let mut mos = Vec::with_capacity(manifest.records.len());
    let mut pairs = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let sr = read_image(&rec.sr_path)?;
        let hr = read_image(&rec.hr_path)?;
        if (sr.width, sr.height) != (hr.width, hr.height) {
            return Err(PbanError::Data(format!(
                "record {i} ({}): SR is {}x{} but HR is {}x{}",
                rec.sr_path.display(),
                sr.width,
                sr.height,
                hr.width,
                hr.height
            )));
        }
        let sr_patches = extract_patches(&sr, PATCH_SIZE)?;
        let hr_patches = extract_patches(&hr, PATCH_SIZE)?;
        if sr_patches.is_empty() {
            return Err(PbanError::Data(format!(
                "record {i} ({}): image {}x{} yields no {PATCH_SIZE}x{PATCH_SIZE} patches",
                rec.sr_path.display(),
                sr.width,
                sr.height
            )));
        }
        for (s, h) in sr_patches.into_iter().zip(hr_patches) {
            pairs.push(PatchPair {
                record: i,
                sr: s,
                hr: h,
            });
        }
        mos.push(rec.mos);
    }
    Ok(Dataset { mos, pairs })
}

fn stack_refs(side: impl Iterator<Item = Tensor<f32>> + ExactSizeIterator) -> Tensor<f32> {
    let n = side.len();
    let mut data = Vec::with_capacity(n * 3 * PATCH_SIZE * PATCH_SIZE);
    for t in side {
        data.extend_from_slice(t.as_slice());
    }
    Tensor::new(vec![n, 3, PATCH_SIZE, PATCH_SIZE], data).unwrap()
}

/// Momentum state plus hyperparameters; one instance per training run.
pub struct Optimizer {
    pub sgd: SGDConfig,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Optimizer {
    pub fn new(sgd: SGDConfig) -> Result<Self> {
        sgd.validate()?;
        Ok(Optimizer {
            sgd,
            velocity: BTreeMap::new(),
        })
    }

    /// One gradient step over a mini-batch; returns the batch loss.
    pub fn step(
        &mut self,
        weights: &mut NamedWeights<f32>,
        cfg: &PBANConfig,
        batch: &[&PatchPair],
        mos: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let sr = Var::constant(stack_refs(batch.iter().map(|p| p.sr.clone())));
        let targets = Var::constant(Tensor::from_fn(&[batch.len()], |i| {
            mos[batch[i].record] as f32
        }));
        let tape = Tape::new();
        let mut fwd = Forward::train(weights, cfg, tape, Some(rng));
        let pred = match cfg.variant {
            Variant::Fr => {
                let hr = Var::constant(stack_refs(batch.iter().map(|p| p.hr.clone())));
                fwd.fr(&hr, &sr)?
            }
            Variant::Nr => fwd.nr(&sr)?,
        };
        let loss = mse_loss(&pred, &targets)?;
        let grads = backward(&loss)?;
        let by_path = fwd.gradients_by_path(&grads);
        let bn = fwd.take_bn_updates();
        drop(fwd);
        sgd_step(weights, &by_path, &mut self.velocity, &self.sgd)?;
        apply_bn_updates(weights, bn);
        Ok(loss.value().as_slice()[0] as f64)
    }
}

/// One pass over the pairs in seeded-shuffled mini-batches; returns the
/// patch-weighted mean loss.
pub fn run_epoch(
    weights: &mut NamedWeights<f32>,
    cfg: &PBANConfig,
    opt: &mut Optimizer,
    pairs: &[&PatchPair],
    mos: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PbanError::Data("epoch over an empty patch list".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut weighted = 0f64;
    for chunk in order.chunks(opt.sgd.batch_size) {
        let batch: Vec<&PatchPair> = chunk.iter().map(|&i| pairs[i]).collect();
        let loss = opt.step(weights, cfg, &batch, mos, rng)?;
        weighted += loss * batch.len() as f64;
    }
    Ok(weighted / pairs.len() as f64)
}

/// Runs exactly `steps` mini-batch updates, reshuffling at each epoch
/// boundary; returns the per-step losses.
pub fn train_steps(
    weights: &mut NamedWeights<f32>,
    cfg: &PBANConfig,
    sgd: &SGDConfig,
    pairs: &[&PatchPair],
    mos: &[f64],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(PbanError::Data("training over an empty patch list".into()));
    }
    let mut opt = Optimizer::new(sgd.clone())?;
    let mut losses = Vec::with_capacity(steps);
    let mut queue: Vec<usize> = Vec::new();
    while losses.len() < steps {
        if queue.is_empty() {
            queue = (0..pairs.len()).collect();
            queue.shuffle(rng);
        }
        let take = opt.sgd.batch_size.min(queue.len());
        let chunk: Vec<usize> = queue.drain(..take).collect();
        let batch: Vec<&PatchPair> = chunk.iter().map(|&i| pairs[i]).collect();
        losses.push(opt.step(weights, cfg, &batch, mos, rng)?);
    }
    Ok(losses)
}

/// Train-mode MSE over the given pairs in one batch: the objective the
/// optimizer sees, with batch-population normalization statistics.
pub fn training_mse(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    pairs: &[&PatchPair],
    mos: &[f64],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PbanError::Data("loss over an empty patch list".into()));
    }
    let sr = Var::constant(stack_refs(pairs.iter().map(|p| p.sr.clone())));
    let targets = Var::constant(Tensor::from_fn(&[pairs.len()], |i| {
        mos[pairs[i].record] as f32
    }));
    let tape = Tape::new();
    let mut fwd = Forward::train(weights, cfg, tape, rng);
    let pred = match cfg.variant {
        Variant::Fr => {
            let hr = Var::constant(stack_refs(pairs.iter().map(|p| p.hr.clone())));
            fwd.fr(&hr, &sr)?
        }
        Variant::Nr => fwd.nr(&sr)?,
    };
    let loss = mse_loss(&pred, &targets)?;
    Ok(loss.value().as_slice()[0] as f64)
}

/// Eval-mode per-patch scores, chunked to bound peak memory. Predictions
/// are per-item (eval-mode normalization uses running statistics), so the
/// chunking never affects values.
pub fn score_pairs(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    pairs: &[&PatchPair],
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let sr = Var::constant(stack_refs(chunk.iter().map(|p| p.sr.clone())));
        let mut fwd = Forward::eval(weights, cfg);
        let pred = match cfg.variant {
            Variant::Fr => {
                let hr = Var::constant(stack_refs(chunk.iter().map(|p| p.hr.clone())));
                fwd.fr(&hr, &sr)?
            }
            Variant::Nr => fwd.nr(&sr)?,
        };
        scores.extend(pred.value().as_slice().iter().map(|&v| v as f64));
    }
    Ok(scores)
}

/// Patch-average score for one record's pairs.
pub fn predict_record(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    pairs: &[&PatchPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PbanError::Data("record has no patches".into()));
    }
    let scores = score_pairs(weights, cfg, pairs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Full-image quality score: mean eval-mode prediction over the aligned
/// patch grid of the pair.
pub fn predict_image(
    weights: &NamedWeights<f32>,
    cfg: &PBANConfig,
    sr: &ImageRGB,
    hr: &ImageRGB,
) -> Result<f64> {
    if (sr.width, sr.height) != (hr.width, hr.height) {
        return Err(PbanError::Data(format!(
            "image sizes differ: {}x{} vs reference {}x{}",
            sr.width, sr.height, hr.width, hr.height
        )));
    }
    let sr_patches = extract_patches(sr, PATCH_SIZE)?;
    let hr_patches = extract_patches(hr, PATCH_SIZE)?;
    if sr_patches.is_empty() {
        return Err(PbanError::Data(format!(
            "image {}x{} is smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch",
            sr.width, sr.height
        )));
    }
    let pairs: Vec<PatchPair> = sr_patches
        .into_iter()
        .zip(hr_patches)
        .map(|(s, h)| PatchPair {
            record: 0,
            sr: s,
            hr: h,
        })
        .collect();
    let refs: Vec<&PatchPair> = pairs.iter().collect();
    predict_record(weights, cfg, &refs)
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub epoch_losses: Vec<f64>,
    pub metrics: Option<MetricReport>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub records: usize,
    pub patch_pairs: usize,
    pub folds: Vec<FoldReport>,
    pub final_epoch_losses: Vec<f64>,
    pub checkpoint: String,
    pub wall_seconds: f64,
    pub final_fit_policy: String,
}

/// The full protocol: k-fold cross-validation for reporting, then a final
/// fit on every record, saved to `out`. Deterministic given the seed.
pub fn train(
    manifest: &Manifest,
    cfg: &PBANConfig,
    sgd: &SGDConfig,
    k: usize,
    out: &Path,
) -> Result<TrainReport> {
    let started = Instant::now();
    cfg.validate()?;
    sgd.validate()?;
    let dataset = build_dataset(manifest)?;
    let n = dataset.mos.len();
    let folds = kfold_split(n, k, sgd.seed)?;

    let mut fold_reports = Vec::with_capacity(k);
    for (f, val) in folds.iter().enumerate() {
        let in_val = |rec: usize| val.contains(&rec);
        let train_pairs: Vec<&PatchPair> = dataset
            .pairs
            .iter()
            .filter(|p| !in_val(p.record))
            .collect();
        let mut weights = init_weights::<f32>(cfg, sgd.seed)?;
        let mut opt = Optimizer::new(sgd.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(sgd.seed.wrapping_add(f as u64 + 1));
        let mut epoch_losses = Vec::with_capacity(sgd.epochs);
        for _ in 0..sgd.epochs {
            epoch_losses.push(run_epoch(
                &mut weights,
                cfg,
                &mut opt,
                &train_pairs,
                &dataset.mos,
                &mut rng,
            )?);
        }
        let mut preds = Vec::with_capacity(val.len());
        let mut val_mos = Vec::with_capacity(val.len());
        for &rec in val {
            let rec_pairs: Vec<&PatchPair> = dataset
                .pairs
                .iter()
                .filter(|p| p.record == rec)
                .collect();
            preds.push(predict_record(&weights, cfg, &rec_pairs)?);
            val_mos.push(dataset.mos[rec]);
        }
        let (metrics, note) = match evaluate(&preds, &val_mos) {
            Ok(m) => (Some(m), None),
            Err(PbanError::Undefined(msg)) => (None, Some(msg)),
            Err(other) => return Err(other),
        };
        fold_reports.push(FoldReport {
            fold: f,
            train_records: n - val.len(),
            val_records: val.len(),
            epoch_losses,
            metrics,
            note,
        });
    }

    // Final deliverable: same protocol, fitted on every record.
    let mut weights = init_weights::<f32>(cfg, sgd.seed)?;
    let mut opt = Optimizer::new(sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(sgd.seed.wrapping_add(k as u64 + 1));
    let all_pairs: Vec<&PatchPair> = dataset.pairs.iter().collect();
    let mut final_epoch_losses = Vec::with_capacity(sgd.epochs);
    for _ in 0..sgd.epochs {
        final_epoch_losses.push(run_epoch(
            &mut weights,
            cfg,
            &mut opt,
            &all_pairs,
            &dataset.mos,
            &mut rng,
        )?);
    }
    save_checkpoint(&weights, cfg, out)?;

    Ok(TrainReport {
        records: n,
        patch_pairs: dataset.pairs.len(),
        folds: fold_reports,
        final_epoch_losses,
        checkpoint: out.display().to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
        final_fit_policy:
            "cross-validation folds are reported for stability; the saved model is retrained on \
             all records with the same hyperparameters"
                .into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn mse_loss_matches_hand_arithmetic_and_gradient() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::new(vec![2, 1], vec![1.0f64, 2.0]).unwrap());
        let targets = Var::constant(Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap());
        let loss = mse_loss(&pred, &targets).unwrap();
        assert_eq!(loss.value().as_slice(), &[2.5]);
        let grads = backward(&loss).unwrap();
        let g = grads.get(&pred).unwrap();
        // d/dpred (1/B) sum (pred - mos)^2 = 2 (pred - mos) / B.
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn mse_loss_of_exact_predictions_is_zero() {
        let pred = Var::constant(Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let targets = Var::constant(Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap());
        assert_eq!(mse_loss(&pred, &targets).unwrap().value().as_slice(), &[0.0]);
    }

    #[test]
    fn mse_loss_rejects_mismatched_lengths() {
        let pred = Var::constant(Tensor::new(vec![2, 1], vec![1.0f64, 2.0]).unwrap());
        let targets = Var::constant(Tensor::new(vec![3], vec![0.0f64; 3]).unwrap());
        assert!(matches!(
            mse_loss(&pred, &targets),
            Err(PbanError::Dimension { .. })
        ));
    }

    fn single_param_weights(value: f64) -> NamedWeights<f64> {
        let mut w = NamedWeights::new();
        w.insert("p.weight".into(), Tensor::new(vec![1], vec![value]).unwrap());
        w
    }

    #[test]
    fn vanilla_sgd_is_plain_descent() {
        let mut w = single_param_weights(1.0);
        let mut grads = BTreeMap::new();
        grads.insert(
            "p.weight".to_string(),
            Tensor::new(vec![1], vec![0.25]).unwrap(),
        );
        let mut vel = BTreeMap::new();
        let cfg = SGDConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
            ..SGDConfig::default()
        };
        sgd_step(&mut w, &grads, &mut vel, &cfg).unwrap();
        assert_eq!(w.get("p.weight").unwrap().as_slice(), &[1.0 - 0.5 * 0.25]);
    }

    #[test]
    fn two_steps_of_constant_gradient_match_the_closed_form() {
        // Dyadic values keep every intermediate exact in binary arithmetic.
        let (p0, g, lr, m) = (1.0f64, 0.25f64, 0.5f64, 0.5f64);
        let mut w = single_param_weights(p0);
        let mut grads = BTreeMap::new();
        grads.insert("p.weight".to_string(), Tensor::new(vec![1], vec![g]).unwrap());
        let mut vel = BTreeMap::new();
        let cfg = SGDConfig {
            lr,
            momentum: m,
            weight_decay: 0.0,
            ..SGDConfig::default()
        };
        sgd_step(&mut w, &grads, &mut vel, &cfg).unwrap();
        sgd_step(&mut w, &grads, &mut vel, &cfg).unwrap();
        let expected = p0 - lr * g * (2.0 + m);
        assert_eq!(w.get("p.weight").unwrap().as_slice(), &[expected]);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let (p0, lr, wd) = (2.0f64, 0.5f64, 0.25f64);
        let mut w = single_param_weights(p0);
        let mut grads = BTreeMap::new();
        grads.insert("p.weight".to_string(), Tensor::zeros(&[1]));
        let mut vel = BTreeMap::new();
        let cfg = SGDConfig {
            lr,
            momentum: 0.0,
            weight_decay: wd,
            ..SGDConfig::default()
        };
        sgd_step(&mut w, &grads, &mut vel, &cfg).unwrap();
        assert_eq!(
            w.get("p.weight").unwrap().as_slice(),
            &[p0 * (1.0 - lr * wd)]
        );
        sgd_step(&mut w, &grads, &mut vel, &cfg).unwrap();
        assert_eq!(
            w.get("p.weight").unwrap().as_slice(),
            &[p0 * (1.0 - lr * wd) * (1.0 - lr * wd)]
        );
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut w = single_param_weights(1.0);
        let grads = BTreeMap::new();
        let mut vel = BTreeMap::new();
        let err = sgd_step(&mut w, &grads, &mut vel, &SGDConfig::default()).unwrap_err();
        assert!(matches!(err, PbanError::Contract(_)));
    }

    #[test]
    fn running_stats_are_not_touched_by_sgd() {
        let mut w = single_param_weights(1.0);
        w.insert(
            "p.running_mean".into(),
            Tensor::new(vec![1], vec![7.0]).unwrap(),
        );
        let mut grads = BTreeMap::new();
        grads.insert("p.weight".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut vel = BTreeMap::new();
        sgd_step(&mut w, &grads, &mut vel, &SGDConfig::default()).unwrap();
        assert_eq!(w.get("p.running_mean").unwrap().as_slice(), &[7.0]);
    }

    #[test]
    fn kfold_sizes_follow_round_robin() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let folds = kfold_split(7, 5, 3).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn kfold_is_deterministic_and_validates() {
        assert_eq!(kfold_split(9, 4, 42).unwrap(), kfold_split(9, 4, 42).unwrap());
        assert_ne!(kfold_split(9, 4, 1).unwrap(), kfold_split(9, 4, 2).unwrap());
        assert!(matches!(kfold_split(3, 5, 0), Err(PbanError::Parameter(_))));
        assert!(matches!(kfold_split(5, 1, 0), Err(PbanError::Parameter(_))));
    }

    proptest! {
        #[test]
        fn kfold_partitions_the_records(n in 2usize..60, k in 2usize..8, seed in 0u64..50) {
            prop_assume!(n >= k);
            let folds = kfold_split(n, k, seed).unwrap();
            let mut seen = BTreeSet::new();
            for fold in &folds {
                for &r in fold {
                    prop_assert!(seen.insert(r), "record {r} in two folds");
                }
            }
            prop_assert_eq!(seen.len(), n);
            let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "sizes {sizes:?}");
        }
    }

    fn synth_pair(seed: u64, record: usize) -> PatchPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_: usize| {
            use rand::Rng;
            rng.gen_range(0f32..1f32)
        };
        PatchPair {
            record,
            sr: Tensor::from_fn(&[3, PATCH_SIZE, PATCH_SIZE], &mut draw),
            hr: Tensor::from_fn(&[3, PATCH_SIZE, PATCH_SIZE], &mut draw),
        }
    }

    #[test]
    fn small_lr_descends_on_a_fixed_batch() {
        let cfg = PBANConfig::micro();
        let mut weights = init_weights::<f32>(&cfg, 0).unwrap();
        let pairs: Vec<PatchPair> = (0..2).map(|r| synth_pair(90 + r as u64, r)).collect();
        let refs: Vec<&PatchPair> = pairs.iter().collect();
        let mos = vec![0.2, 0.8];
        let sgd = SGDConfig {
            lr: 0.001,
            batch_size: 2,
            ..SGDConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let losses =
            train_steps(&mut weights, &cfg, &sgd, &refs, &mos, 10, &mut rng).unwrap();
        assert_eq!(losses.len(), 10);
        assert!(losses.iter().all(|l| l.is_finite()));
        let drops = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(drops >= 8, "non-increasing in only {drops}/9 steps: {losses:?}");
    }

    #[test]
    fn predict_image_is_the_mean_of_patch_scores() {
        let cfg = PBANConfig::micro();
        let weights = init_weights::<f32>(&cfg, 4).unwrap();
        // Two patches side by side.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draw = |_: usize| {
            use rand::Rng;
            rng.gen_range(0f32..1f32)
        };
        let sr = ImageRGB::from_pixels(Tensor::from_fn(&[3, 32, 64], &mut draw)).unwrap();
        let hr = ImageRGB::from_pixels(Tensor::from_fn(&[3, 32, 64], &mut draw)).unwrap();
        let whole = predict_image(&weights, &cfg, &sr, &hr).unwrap();

        let sr_p = extract_patches(&sr, 32).unwrap();
        let hr_p = extract_patches(&hr, 32).unwrap();
        let mut each = Vec::new();
        for (s, h) in sr_p.into_iter().zip(hr_p) {
            let p = PatchPair {
                record: 0,
                sr: s,
                hr: h,
            };
            each.push(predict_record(&weights, &cfg, &[&p]).unwrap());
        }
        assert_eq!(each.len(), 2);
        let mean = (each[0] + each[1]) / 2.0;
        assert!((whole - mean).abs() < 1e-6, "{whole} vs {mean}");
    }

    #[test]
    #[ignore = "timing probe, run on demand"]
    fn bench_components() {
        use crate::ops;
        let cfg = PBANConfig::micro();
        let weights = init_weights::<f32>(&cfg, 0).unwrap();
        let pair = synth_pair(1, 0);
        let mos = vec![0.5];

        let time = |label: &str, mut f: Box<dyn FnMut()>| {
            let t = Instant::now();
            let reps = 5;
            for _ in 0..reps {
                f();
            }
            println!("{label}: {:.1}ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        };

        let sr = Var::constant(stack_refs([pair.sr.clone()].into_iter()));
        let hr = Var::constant(stack_refs([pair.hr.clone()].into_iter()));
        {
            let (w, c, s, h) = (&weights, &cfg, &sr, &hr);
            time(
                "eval forward",
                Box::new(move || {
                    Forward::eval(w, c).fr(h, s).unwrap();
                }),
            );
        }
        {
            let (w, c) = (&weights, &cfg);
            let (p, m) = (&pair, &mos);
            time(
                "train fwd(+tape)",
                Box::new(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let sr = Var::constant(stack_refs([p.sr.clone()].into_iter()));
                    let hr = Var::constant(stack_refs([p.hr.clone()].into_iter()));
                    let tape = Tape::new();
                    let mut fwd = Forward::train(w, c, tape, Some(&mut rng));
                    let pred = fwd.fr(&hr, &sr).unwrap();
                    let t = Var::constant(Tensor::from_fn(&[1], |_| m[0] as f32));
                    mse_loss(&pred, &t).unwrap();
                }),
            );
        }
        {
            let (w, c) = (&weights, &cfg);
            let (p, m) = (&pair, &mos);
            time(
                "full step (fwd+bwd)",
                Box::new(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let sr = Var::constant(stack_refs([p.sr.clone()].into_iter()));
                    let hr = Var::constant(stack_refs([p.hr.clone()].into_iter()));
                    let tape = Tape::new();
                    let mut fwd = Forward::train(w, c, tape, Some(&mut rng));
                    let pred = fwd.fr(&hr, &sr).unwrap();
                    let t = Var::constant(Tensor::from_fn(&[1], |_| m[0] as f32));
                    let loss = mse_loss(&pred, &t).unwrap();
                    backward(&loss).unwrap();
                }),
            );
        }

        let mut mk = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            move |shape: &[usize]| {
                use rand::Rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-1f32..1.0))
            }
        };
        let q = mk(&[1, 1024, 16]);
        let k = mk(&[1, 1024, 16]);
        let logits = mk(&[1, 1024, 1024]);
        {
            let tape = Tape::new();
            let (qv, kv) = (tape.leaf(q.clone()), tape.leaf(k.clone()));
            time(
                "bmm_nt fwd [1024,16]x2",
                Box::new(move || {
                    ops::bmm_nt(&qv, &kv).unwrap();
                }),
            );
        }
        {
            let (q2, k2) = (q.clone(), k.clone());
            time(
                "bmm_nt fwd+bwd",
                Box::new(move || {
                    let tape = Tape::new();
                    let (qv, kv) = (tape.leaf(q2.clone()), tape.leaf(k2.clone()));
                    let y = ops::bmm_nt(&qv, &kv).unwrap();
                    let s = ops::mean(&y).unwrap();
                    backward(&s).unwrap();
                }),
            );
        }
        {
            let l = logits.clone();
            time(
                "softmax fwd+bwd [1024x1024]",
                Box::new(move || {
                    let tape = Tape::new();
                    let lv = tape.leaf(l.clone());
                    let y = ops::softmax_rows(&lv).unwrap();
                    let s = ops::mean(&y).unwrap();
                    backward(&s).unwrap();
                }),
            );
        }
        {
            let l = logits.clone();
            time(
                "variance_per_item fwd+bwd",
                Box::new(move || {
                    let tape = Tape::new();
                    let lv = tape.leaf(l.clone());
                    let y = ops::variance_per_item(&lv).unwrap();
                    let s = ops::mean(&y).unwrap();
                    backward(&s).unwrap();
                }),
            );
        }
        {
            let x = mk(&[1, 8, 32, 32]);
            let w7 = mk(&[147, 8, 3, 3]);
            let b7 = mk(&[147]);
            time(
                "offset conv 8->147 fwd+bwd",
                Box::new(move || {
                    let tape = Tape::new();
                    let xv = tape.leaf(x.clone());
                    let wv = tape.leaf(w7.clone());
                    let bv = tape.leaf(b7.clone());
                    let y = ops::conv2d(&xv, &wv, &bv, 1).unwrap();
                    let s = ops::mean(&y).unwrap();
                    backward(&s).unwrap();
                }),
            );
        }
        {
            let x = mk(&[1, 8, 32, 32]);
            let w7 = mk(&[8, 8, 7, 7]);
            let b7 = mk(&[8]);
            let off = mk(&[1, 98, 32, 32]);
            let m7 = mk(&[1, 49, 32, 32]);
            time(
                "deform 7x7 8ch fwd+bwd",
                Box::new(move || {
                    let tape = Tape::new();
                    let xv = tape.leaf(x.clone());
                    let wv = tape.leaf(w7.clone());
                    let bv = tape.leaf(b7.clone());
                    let ov = tape.leaf(off.clone());
                    let mv = tape.leaf(m7.clone());
                    let y = ops::deform_conv2d(&xv, &wv, &bv, &ov, &mv, 1).unwrap();
                    let s = ops::mean(&y).unwrap();
                    backward(&s).unwrap();
                }),
            );
        }
    }

    #[test]
    #[ignore = "convergence probe, run on demand"]
    fn probe_overfit() {
        let cfg = PBANConfig::micro();
        let pairs: Vec<PatchPair> = (0..8).map(|r| synth_pair(100 + r as u64, r)).collect();
        let refs: Vec<&PatchPair> = pairs.iter().collect();
        let mut mos_rng = ChaCha8Rng::seed_from_u64(777);
        let mos: Vec<f64> = (0..8)
            .map(|_| {
                use rand::Rng;
                mos_rng.gen_range(0f64..1.0)
            })
            .collect();
        for seed in [0u64, 1, 2] {
            let t = Instant::now();
            let mut weights = init_weights::<f32>(&cfg, seed).unwrap();
            let sgd = SGDConfig {
                batch_size: 1,
                seed,
                ..SGDConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let losses =
                train_steps(&mut weights, &cfg, &sgd, &refs, &mos, 500, &mut rng).unwrap();
            let final_mse = training_mse(&weights, &cfg, &refs, &mos, None).unwrap();
            println!(
                "seed {seed}: final training MSE {final_mse:.3e} (last step loss {:.3e}) in {:.0}s",
                losses.last().unwrap(),
                t.elapsed().as_secs_f64()
            );
        }
    }

    #[test]
    #[ignore = "timing probe, run on demand"]
    fn bench_step_cost() {
        let cfg = PBANConfig::micro();
        let mut weights = init_weights::<f32>(&cfg, 0).unwrap();
        let pairs: Vec<PatchPair> = (0..8).map(|r| synth_pair(r as u64, r)).collect();
        let refs: Vec<&PatchPair> = pairs.iter().collect();
        let mos: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bs in [1usize, 2, 4, 8] {
            let sgd = SGDConfig {
                batch_size: bs,
                ..SGDConfig::default()
            };
            let t = Instant::now();
            let steps = 12;
            train_steps(&mut weights, &cfg, &sgd, &refs, &mos, steps, &mut rng).unwrap();
            let dt = t.elapsed().as_secs_f64();
            println!(
                "batch {bs}: {:.3}s/step, {:.3}s/patch-step",
                dt / steps as f64,
                dt / (steps * bs) as f64
            );
        }
    }

    #[test]
    fn train_step_is_deterministic_given_seed() {
        let cfg = PBANConfig::micro();
        let pairs: Vec<PatchPair> = (0..2).map(|r| synth_pair(40 + r as u64, r)).collect();
        let refs: Vec<&PatchPair> = pairs.iter().collect();
        let mos = vec![0.3, 0.7];
        let sgd = SGDConfig {
            batch_size: 2,
            ..SGDConfig::default()
        };
        let run = || {
            let mut weights = init_weights::<f32>(&cfg, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            train_steps(&mut weights, &cfg, &sgd, &refs, &mos, 3, &mut rng).unwrap();
            weights
        };
        let (a, b) = (run(), run());
        for (name, t) in a.iter() {
            assert_eq!(t, b.get(name).unwrap(), "{name} diverged");
        }
    }
}

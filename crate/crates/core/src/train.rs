//! Loss, Adamax, reduce-on-plateau, the accuracy early-stop rule and the
//! epoch loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{mix, Batch, DataSource, Label, Split, DEFAULT_BATCH_SIZE};
use crate::model::{Head, ModelGraph};
use crate::{Error, Mode, Result, Tape, Tensor, Var};

pub const DEFAULT_CLAMP: f64 = 1e-12;

/// Mean cross-entropy of `probs` against `labels`, plus `l2_total`.
///
/// Softmax heads use categorical cross-entropy over `[N, 2]`; sigmoid heads
/// use binary cross-entropy with `probs[i]` = P(uninfected). Probabilities
/// are clamped to `[clamp, 1 - clamp]` before the log.
pub fn loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[Label],
    head: Head,
    l2_total: Var,
    clamp: f64,
) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let units = head.units();
    if shape.len() != 2 || shape[1] != units || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "loss: probs {shape:?} vs {} labels for a {units}-unit head",
            labels.len()
        )));
    }
    let n = labels.len();
    let p = tape.clamp(probs, clamp, 1.0 - clamp);
    let picked = match head {
        Head::Softmax2 => {
            let onehot = Tensor::from_fn(&[n, 2], |i| f64::from(labels[i / 2].index() == i % 2));
            let mask = tape.constant(onehot);
            let logp = tape.log(p)?;
            tape.mul(logp, mask)?
        }
        Head::Sigmoid1 => {
            let y = Tensor::from_fn(&[n, 1], |i| labels[i].index() as f64);
            let not_y = y.map(|v| 1.0 - v);
            let (y, not_y) = (tape.constant(y), tape.constant(not_y));
            let logp = tape.log(p)?;
            let neg = tape.scale(p, -1.0);
            let one_minus = tape.offset(neg, 1.0);
            let log1mp = tape.log(one_minus)?;
            let pos = tape.mul(logp, y)?;
            let negt = tape.mul(log1mp, not_y)?;
            tape.add(pos, negt)?
        }
    };
    let total = tape.sum_all(picked);
    let mean = tape.scale(total, -1.0 / n as f64);
    tape.add(mean, l2_total)
}

/// Predicted labels: argmax for softmax heads (ties to parasitized),
/// threshold 0.5 on P(uninfected) for sigmoid heads.
pub fn predict_labels(probs: &Tensor, head: Head) -> Vec<Label> {
    match head {
        Head::Softmax2 => probs
            .data()
            .chunks_exact(2)
            .map(|r| if r[1] > r[0] { Label::Uninfected } else { Label::Parasitized })
            .collect(),
        Head::Sigmoid1 => probs
            .data()
            .iter()
            .map(|&p| if p >= 0.5 { Label::Uninfected } else { Label::Parasitized })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Adamax

/// Adamax optimizer state: first moment `m`, infinity norm `u`, step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            u: Vec::new(),
        }
    }

    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.m.get(i).map(Vec::as_slice)
    }

    pub fn infinity_norm(&self, i: usize) -> Option<&[f64]> {
        self.u.get(i).map(Vec::as_slice)
    }
}

/// One Adamax update of `params` (positionally matched with `grads` and
/// the optimizer slots). Nothing is modified if any gradient is non-finite.
pub fn adamax_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamaxState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid("adamax: parameter and gradient counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("adamax slot {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter slot {i}")));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.u = params.iter().map(|p| vec![0.0; p.len()]).collect();
    } else if state.m.len() != params.len() {
        return Err(Error::invalid("adamax: parameter set changed between steps"));
    }
    state.t += 1;
    let step = state.lr / (1.0 - state.beta1.powi(state.t as i32));
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (((p, g), m), u) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.u) {
        for (((theta, &g), m), u) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(u.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *u = (b2 * *u).max(g.abs());
            *theta -= step * *m / (*u + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scheduling and early stopping

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            min_delta: 1e-4,
        }
    }
}

/// Reduce-on-plateau tracker for a lower-is-better metric (validation loss).
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub config: PlateauConfig,
    pub best: f64,
    pub epochs_since_improve: usize,
}

impl PlateauState {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            epochs_since_improve: 0,
        }
    }
}

/// Feeds one epoch's metric and returns the learning rate to use next.
pub fn reduce_lr_on_plateau(state: &mut PlateauState, val_metric: f64, current_lr: f64) -> f64 {
    let cfg = state.config;
    if state.best - val_metric > cfg.min_delta {
        state.best = val_metric;
        state.epochs_since_improve = 0;
        return current_lr;
    }
    state.epochs_since_improve += 1;
    if state.epochs_since_improve >= cfg.patience {
        state.epochs_since_improve = 0;
        return (current_lr * cfg.factor).max(cfg.min_lr).min(current_lr);
    }
    current_lr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Append-only per-epoch metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc,lr`
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True iff the latest epoch reached `threshold` accuracy on either split.
pub fn early_stop_check(history: &TrainHistory, threshold: f64) -> bool {
    history
        .last()
        .is_some_and(|r| r.train_acc >= threshold || r.val_acc >= threshold)
}

// ---------------------------------------------------------------------------
// epoch loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub plateau: PlateauConfig,
    pub early_stop_accuracy: f64,
    pub clamp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: 0.001,
            seed: 0,
            plateau: PlateauConfig::default(),
            early_stop_accuracy: 0.99,
            clamp: DEFAULT_CLAMP,
        }
    }
}

/// Loss and accuracy over one split in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub y_true: Vec<Label>,
    pub y_pred: Vec<Label>,
}

pub fn evaluate(model: &ModelGraph, data: &dyn DataSource, split: Split, batch_size: usize, clamp: f64) -> Result<Evaluation> {
    let mut loss_sum = 0.0;
    let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
    for batch in data.batches(split, batch_size, 0, 0)? {
        let Batch { images, labels } = batch?;
        let mut tape = Tape::new();
        let input = tape.constant(images);
        let pass = model.forward_on_tape(&mut tape, input, Mode::Infer, 0, false)?;
        let l = loss(&mut tape, pass.probs, &labels, model.head(), pass.l2, clamp)?;
        loss_sum += tape.value(l).item()? * labels.len() as f64;
        y_pred.extend(predict_labels(tape.value(pass.probs), model.head()));
        y_true.extend(labels);
    }
    let n = y_true.len() as f64;
    let correct = y_true.iter().zip(&y_pred).filter(|(a, b)| a == b).count() as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct / n,
        y_true,
        y_pred,
    })
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, loss, backward and Adamax on one batch, plus the batch-norm
/// running-statistics update.
pub fn train_step(
    model: &mut ModelGraph,
    batch: &Batch,
    optimizer: &mut AdamaxState,
    dropout_seed: u64,
    clamp: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let input = tape.constant(batch.images.clone());
    let pass = model.forward_on_tape(&mut tape, input, Mode::Train, dropout_seed, true)?;
    let root = loss(&mut tape, pass.probs, &batch.labels, model.head(), pass.l2, clamp)?;
    let value = tape.value(root).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    let correct = predict_labels(tape.value(pass.probs), model.head())
        .iter()
        .zip(&batch.labels)
        .filter(|(a, b)| a == b)
        .count();
    let mut grads = tape.backward(root)?;
    drop(tape);
    let names: Vec<String> = pass.params.keys().cloned().collect();
    let grad_tensors: Vec<Tensor> = pass
        .params
        .values()
        .map(|&v| {
            grads
                .take(v)
                .ok_or_else(|| Error::invalid("missing parameter gradient"))
        })
        .collect::<Result<_>>()?;
    // running stats first: they live in the same map as the trainable params
    model.apply_running_updates(pass.running_updates)?;
    let mut owned: Vec<Tensor> = names
        .iter()
        .map(|n| model.param(n).expect("known parameter").clone())
        .collect();
    {
        let mut refs: Vec<&mut Tensor> = owned.iter_mut().collect();
        let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
        adamax_step(&mut refs, &grad_refs, optimizer)?;
    }
    for (name, value) in names.iter().zip(owned) {
        model.set_param(name, value)?;
    }
    Ok(StepOutcome { loss: value, correct })
}

/// Runs the epoch loop; see [`train_with`].
pub fn train(model: ModelGraph, data: &dyn DataSource, config: &TrainConfig) -> Result<(ModelGraph, TrainHistory)> {
    train_with(model, data, config, |_| {})
}

/// Trains for up to `config.epochs` epochs over shuffled training batches,
/// validating after each epoch, reducing the learning rate on a validation
/// loss plateau and stopping once either accuracy reaches
/// `config.early_stop_accuracy`. `on_epoch` sees each finished record.
///
/// Single-threaded and bit-deterministic for a given seed.
pub fn train_with(
    mut model: ModelGraph,
    data: &dyn DataSource,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelGraph, TrainHistory)> {
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    for split in [Split::Train, Split::Val] {
        if data.split_len(split) == 0 {
            return Err(Error::invalid(format!("{split} split is empty")));
        }
    }
    let mut optimizer = AdamaxState::new(config.lr);
    let mut plateau = PlateauState::new(config.plateau);
    for epoch in 1..=config.epochs {
        let lr = optimizer.lr;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in data.batches(Split::Train, config.batch_size, config.seed, epoch)?.enumerate() {
            let batch = batch?;
            let dropout_seed = mix(config.seed, ((epoch as u64) << 32) | b as u64);
            let outcome = train_step(&mut model, &batch, &mut optimizer, dropout_seed, config.clamp).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged {
                    epoch,
                    batch: b,
                    detail,
                },
                other => other,
            })?;
            loss_sum += outcome.loss * batch.labels.len() as f64;
            correct += outcome.correct;
            seen += batch.labels.len();
        }
        let val = evaluate(&model, data, Split::Val, config.batch_size, config.clamp)?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                detail: format!("validation loss = {}", val.loss),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
        };
        history.records.push(record);
        on_epoch(&record);
        optimizer.lr = reduce_lr_on_plateau(&mut plateau, val.loss, lr);
        if early_stop_check(&history, config.early_stop_accuracy) {
            break;
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InMemoryDataset;
    use crate::model::ArchitectureConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval_loss(probs: &Tensor, labels: &[Label], head: Head, l2: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(probs.clone());
        let l = tape.constant(Tensor::scalar(l2));
        let out = loss(&mut tape, p, labels, head, l, DEFAULT_CLAMP).unwrap();
        tape.value(out).item().unwrap()
    }

    #[test]
    fn loss_perfect_and_uniform() {
        let labels = [Label::Parasitized, Label::Uninfected];
        let perfect = Tensor::new(&[2, 2], vec![1.0 - 1e-12, 1e-12, 1e-12, 1.0 - 1e-12]).unwrap();
        assert!(eval_loss(&perfect, &labels, Head::Softmax2, 0.0) < 1e-10);
        let uniform = Tensor::full(&[2, 2], 0.5);
        let l = eval_loss(&uniform, &labels, Head::Softmax2, 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let half = Tensor::full(&[2, 1], 0.5);
        assert!((eval_loss(&half, &labels, Head::Sigmoid1, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_per_sample_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 17;
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let p: f64 = rng.gen_range(0.01..0.99);
            probs.extend([p, 1.0 - p]);
            labels.push(if rng.gen_bool(0.5) { Label::Uninfected } else { Label::Parasitized });
        }
        let mut oracle = 0.0;
        for i in 0..n {
            oracle -= probs[2 * i + labels[i].index()].ln();
        }
        oracle = oracle / n as f64 + 0.37;
        let t = Tensor::new(&[n, 2], probs.clone()).unwrap();
        assert!((eval_loss(&t, &labels, Head::Softmax2, 0.37) - oracle).abs() < 1e-12);

        let sig: Vec<f64> = (0..n).map(|i| probs[2 * i + 1]).collect();
        let t = Tensor::new(&[n, 1], sig).unwrap();
        assert!((eval_loss(&t, &labels, Head::Sigmoid1, 0.37) - oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[3, 2], 0.5));
        let l = tape.constant(Tensor::scalar(0.0));
        assert!(loss(&mut tape, p, &[Label::Parasitized], Head::Softmax2, l, DEFAULT_CLAMP).is_err());
        assert!(loss(&mut tape, p, &[Label::Parasitized; 3], Head::Sigmoid1, l, DEFAULT_CLAMP).is_err());
    }

    #[test]
    fn adamax_single_step_by_hand() {
        let mut theta = Tensor::zeros(&[1]);
        let g = Tensor::ones(&[1]);
        let mut state = AdamaxState::new(0.001);
        adamax_step(&mut [&mut theta], &[&g], &mut state).unwrap();
        // m = 0.1, u = 1, bias factor 1/(1-0.9) = 10
        assert_eq!(state.t, 1);
        assert!((state.first_moment(0).unwrap()[0] - 0.1).abs() < 1e-15);
        assert_eq!(state.infinity_norm(0).unwrap()[0], 1.0);
        assert!((theta.data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adamax_zero_gradient_and_symmetry() {
        let mut theta = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = theta.clone();
        let mut state = AdamaxState::new(0.001);
        adamax_step(&mut [&mut theta], &[&Tensor::zeros(&[3])], &mut state).unwrap();
        assert_eq!(theta, before);

        let mut pair = Tensor::zeros(&[2]);
        let g = Tensor::new(&[2], vec![0.3, 0.3]).unwrap();
        let mut state = AdamaxState::new(0.001);
        for _ in 0..4 {
            adamax_step(&mut [&mut pair], &[&g], &mut state).unwrap();
        }
        assert_eq!(pair.data()[0], pair.data()[1]);
        assert_eq!(state.t, 4);
    }

    #[test]
    fn adamax_rejects_non_finite() {
        let mut theta = Tensor::zeros(&[2]);
        let g = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let mut state = AdamaxState::new(0.001);
        assert!(matches!(
            adamax_step(&mut [&mut theta], &[&g], &mut state),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(theta, Tensor::zeros(&[2]));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn plateau_rules() {
        let mut s = PlateauState::new(PlateauConfig::default());
        let mut lr = 0.001;
        for m in [1.0, 0.9, 0.8] {
            lr = reduce_lr_on_plateau(&mut s, m, lr);
        }
        assert_eq!(lr, 0.001);

        let mut s = PlateauState::new(PlateauConfig::default());
        let mut lrs = Vec::new();
        let mut lr = 0.001;
        for _ in 0..4 {
            lr = reduce_lr_on_plateau(&mut s, 1.0, lr);
            lrs.push(lr);
        }
        assert_eq!(lrs, [0.001, 0.001, 0.001, 0.0005]);

        let mut s = PlateauState::new(PlateauConfig::default());
        let mut lr = 1e-6;
        for _ in 0..10 {
            lr = reduce_lr_on_plateau(&mut s, 2.0, lr);
            assert_eq!(lr, 1e-6);
        }
    }

    #[test]
    fn early_stop_rule() {
        let mut h = TrainHistory::default();
        assert!(!early_stop_check(&h, 0.99));
        let rec = |t, v| EpochRecord {
            epoch: 1,
            train_loss: 0.1,
            train_acc: t,
            val_loss: 0.1,
            val_acc: v,
            lr: 0.001,
        };
        h.records.push(rec(0.992, 0.95));
        assert!(early_stop_check(&h, 0.99));
        h.records.push(rec(0.95, 0.991));
        assert!(early_stop_check(&h, 0.99));
        h.records.push(rec(0.989, 0.989));
        assert!(!early_stop_check(&h, 0.99));
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.75,
                val_loss: 0.25,
                val_acc: 1.0,
                lr: 0.001,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,train_loss,train_acc,val_loss,val_acc,lr\n1,0.5,0.75,0.25,1.0,0.001\n");
    }

    /// Tiny separable task: bright red square top-left vs bottom-right.
    fn toy_data(n: usize) -> InMemoryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut samples = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Parasitized } else { Label::Uninfected };
            let mut img = Tensor::from_fn(&[8, 8, 3], |_| rng.gen_range(0.0..0.2));
            let off = if label == Label::Parasitized { 0 } else { 4 };
            for y in off..off + 4 {
                for x in off..off + 4 {
                    img.data_mut()[(y * 8 + x) * 3] = 0.9;
                }
            }
            let split = match i % 5 {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            };
            samples.push((img, label, split));
        }
        InMemoryDataset { samples }
    }

    fn toy_model(head: Head) -> ModelGraph {
        ModelGraph::new(
            ArchitectureConfig {
                input_size: [8, 8, 3],
                block_filters: vec![4, 8],
                dense_units: vec![8],
                head,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn full_batch_loss_descends() {
        let data = toy_data(40);
        let samples: Vec<(Tensor, Label)> = data.samples.iter().map(|s| (s.0.clone(), s.1)).collect();
        let batch = Batch::from_samples(&samples).unwrap();
        for head in [Head::Softmax2, Head::Sigmoid1] {
            let mut model = toy_model(head);
            let mut opt = AdamaxState::new(0.001);
            let mut losses = Vec::new();
            for _ in 0..6 {
                losses.push(train_step(&mut model, &batch, &mut opt, 0, DEFAULT_CLAMP).unwrap().loss);
            }
            assert!(losses.windows(2).all(|w| w[1] < w[0]), "{head:?}: {losses:?}");
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let model = toy_model(Head::Softmax2);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, history) = train(model.clone(), &toy_data(10), &cfg).unwrap();
        assert_eq!(out, model);
        assert!(history.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = toy_data(60);
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            lr: 0.01,
            seed: 3,
            ..Default::default()
        };
        let (m1, h1) = train(toy_model(Head::Softmax2), &data, &cfg).unwrap();
        let (m2, h2) = train(toy_model(Head::Softmax2), &data, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        let last = h1.last().unwrap();
        assert!(last.train_acc >= 0.9 || last.val_acc >= 0.9, "{h1:?}");
        let lrs: Vec<f64> = h1.records.iter().map(|r| r.lr).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn training_requires_val_split() {
        let mut data = toy_data(10);
        data.samples.retain(|s| s.2 == Split::Train);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(train(toy_model(Head::Softmax2), &data, &cfg).is_err());
    }
}

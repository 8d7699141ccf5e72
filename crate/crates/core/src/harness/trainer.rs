use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{accuracy, auc_acc, avg_acc, last_acc};
use super::model::{Learner, LearnerConfig, Method};
use super::report::{RunReport, TaskRecord};
use super::schedule::TaskSchedule;
use crate::data::Dataset;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::LogitMask;
use crate::numerics::{adam_step, cosine_lr, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Evaluate on the seen classes every `1/online_points` of the training
    /// stream; `0` disables the online curve.
    pub online_points: usize,
    pub eval_batch: usize,
    /// Record wall-clock times. Off keeps reports byte-reproducible.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.001,
            online_points: 10,
            eval_batch: 64,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Usage(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// What a step observer sees: gradients are accumulated but not yet applied.
pub struct StepEvent<'a> {
    pub learner: &'a Learner,
    pub task: usize,
    pub step: usize,
    pub loss: f64,
    pub mask: &'a LogitMask,
}

pub type StepObserver<'a> = dyn FnMut(&StepEvent<'_>) -> Result<()> + 'a;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-epoch shuffled mini-batches over `0..n`.
fn batches(n: usize, cfg: &TrainConfig, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        out.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    out
}

/// Joint accuracy over every sample of `test` whose label `mask` allows.
/// Also returns each sample's prediction.
pub fn evaluate(
    learner: &Learner,
    test: &Dataset,
    mask: &LogitMask,
    eval_batch: usize,
) -> Result<(f64, Vec<usize>)> {
    let classes: Vec<usize> = (0..test.num_classes())
        .filter(|&c| mask.contains(c))
        .collect();
    let seen = test.subset_by_classes(&classes)?;
    if seen.is_empty() {
        return Err(Error::Usage("no test samples for the seen classes".into()));
    }
    let mut predicted = Vec::with_capacity(seen.len());
    let idx: Vec<usize> = (0..seen.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let (x, _) = seen.batch(chunk)?;
        predicted.extend(learner.predict(&x, mask)?);
    }
    Ok((accuracy(&predicted, seen.labels())?, predicted))
}

/// Accuracy restricted to samples of `classes`, given predictions over the
/// `seen` subset.
fn class_accuracy(labels: &[usize], predicted: &[usize], classes: &[usize]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (&l, &p) in labels.iter().zip(predicted) {
        if classes.contains(&l) {
            n += 1;
            hit += (l == p) as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Trains task `t` of the schedule: fresh Adam, cosine learning rate over the
/// task's steps, logits masked to the task's classes.
///
/// `on_samples` is called after every step with the number of samples just
/// consumed; `observer` sees each step before the update.
pub fn train_task(
    learner: &mut Learner,
    train: &Dataset,
    classes: &[usize],
    t: usize,
    cfg: &TrainConfig,
    seed: u64,
    observer: Option<&mut StepObserver<'_>>,
    on_samples: &mut dyn FnMut(&Learner, usize) -> Result<()>,
) -> Result<TaskTrainStats> {
    cfg.validate()?;
    if learner.current_task() != Some(t) {
        return Err(Error::Protocol(format!(
            "train_task({t}) without start_task({t})"
        )));
    }
    let data = train.subset_by_classes(classes)?;
    if data.is_empty() {
        return Err(Error::Usage(format!("task {t} has no training samples")));
    }
    let mask = LogitMask::from_classes(learner.num_classes(), classes)?;
    let plan = batches(data.len(), cfg, mix(seed, t as u64 + 1));
    let total = plan.len();
    let mut adam = AdamState::new(cfg.lr)?;
    let mut observer = observer;
    let mut loss_sum = 0.0;
    for (step, idx) in plan.iter().enumerate() {
        let (x, y) = data.batch(idx)?;
        let loss = learner.accumulate_step(&x, &y, &mask)?;
        loss_sum += loss;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepEvent {
                learner,
                task: t,
                step,
                loss,
                mask: &mask,
            })?;
        }
        let lr = cosine_lr(step, total, cfg.lr)?;
        adam_step(&mut learner.trainable_mut(), &mut adam, lr)?;
        on_samples(learner, idx.len())?;
    }
    Ok(TaskTrainStats {
        steps: total,
        mean_loss: loss_sum / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskTrainStats {
    pub steps: usize,
    pub mean_loss: f64,
}

/// Everything one continual run needs.
pub struct RunSpec<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub schedule: &'a TaskSchedule,
    pub backbone: &'a Encoder,
    pub learner: LearnerConfig,
    pub train_cfg: TrainConfig,
    pub seed: u64,
}

/// Trains every task of the schedule in order and evaluates on all seen
/// classes after each one.
pub fn run_continual(
    spec: &RunSpec<'_>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<(RunReport, Learner)> {
    let schedule = spec.schedule;
    let cfg = &spec.train_cfg;
    cfg.validate()?;
    if spec.train.num_classes() != schedule.total_classes
        || spec.test.num_classes() != schedule.total_classes
    {
        return Err(Error::Usage(format!(
            "schedule covers {} classes, datasets have {} and {}",
            schedule.total_classes,
            spec.train.num_classes(),
            spec.test.num_classes()
        )));
    }
    let mut learner = Learner::new(
        spec.learner.clone(),
        spec.backbone.clone(),
        schedule.total_classes,
        schedule.num_tasks(),
        spec.seed,
    )?;
    learner.encoder.reset_forward_passes();

    let counts = spec.train.class_counts();
    let stream: usize = schedule
        .tasks
        .iter()
        .map(|c| c.iter().map(|&k| counts[k]).sum::<usize>() * cfg.epochs)
        .sum();
    let checkpoints: Vec<usize> = (1..=cfg.online_points)
        .map(|k| (k * stream).div_ceil(cfg.online_points))
        .collect();
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let mut seen_samples = 0usize;
    let mut next_point = 0usize;
    let mut eval_passes = 0u64;

    let mut records = Vec::with_capacity(schedule.num_tasks());
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    let mut joint = Vec::new();
    let mut train_passes = 0u64;
    let run_start = Instant::now();
    for t in 0..schedule.num_tasks() {
        let task_start = Instant::now();
        learner.start_task(t)?;
        let seen_mask = LogitMask::from_classes(schedule.total_classes, &schedule.seen_classes(t))?;
        let before = learner.encoder.forward_passes();
        let mut online_passes = 0u64;
        let mut on_samples = |l: &Learner, n: usize| -> Result<()> {
            seen_samples += n;
            while next_point < checkpoints.len() && seen_samples >= checkpoints[next_point] {
                let p0 = l.encoder.forward_passes();
                let (acc, _) = evaluate(l, spec.test, &seen_mask, cfg.eval_batch)?;
                online_passes += l.encoder.forward_passes() - p0;
                curve.push((seen_samples, acc));
                next_point += 1;
            }
            Ok(())
        };
        let stats = train_task(
            &mut learner,
            spec.train,
            &schedule.tasks[t],
            t,
            cfg,
            spec.seed,
            observer.as_deref_mut(),
            &mut on_samples,
        )?;
        let task_train = learner.encoder.forward_passes() - before - online_passes;
        train_passes += task_train;
        eval_passes += online_passes;

        let p0 = learner.encoder.forward_passes();
        let (acc, predicted) = evaluate(&learner, spec.test, &seen_mask, cfg.eval_batch)?;
        let task_eval = learner.encoder.forward_passes() - p0;
        eval_passes += task_eval;
        let seen_test = spec.test.subset_by_classes(&schedule.seen_classes(t))?;
        let row: Vec<f64> = (0..=t)
            .map(|j| class_accuracy(seen_test.labels(), &predicted, &schedule.tasks[j]))
            .collect();
        joint.push(acc);
        matrix.push(row.clone());
        records.push(TaskRecord {
            task: t,
            classes: schedule.tasks[t].clone(),
            steps: stats.steps,
            mean_loss: stats.mean_loss,
            joint_acc: acc,
            per_task_acc: row,
            train_forward_passes: task_train,
            eval_forward_passes: task_eval,
            wall_ms: if cfg.timing {
                task_start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    let params = learner.param_counts();
    let auc = if curve.is_empty() {
        last_acc(&joint)?
    } else {
        auc_acc(&curve)?
    };
    let report = RunReport {
        seed: spec.seed,
        method: learner.method(),
        scenario: schedule.name.clone(),
        avg_acc: avg_acc(&joint)?,
        last_acc: last_acc(&joint)?,
        auc_acc: auc,
        joint_acc: joint,
        matrix,
        online_curve: curve,
        learnable_params: params.learnable,
        total_params: params.total,
        param_ratio: params.ratio(),
        train_forward_passes: train_passes,
        eval_forward_passes: eval_passes,
        wall_ms: if cfg.timing {
            run_start.elapsed().as_millis() as u64
        } else {
            0
        },
        tasks: records,
    };
    Ok((report, learner))
}

/// Settings for training the backbone on the pretraining classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.002,
            seed: 0,
        }
    }
}

/// Trains encoder and a temporary classifier with plain cross-entropy, then
/// discards the classifier and freezes the encoder. Returns the encoder and
/// its accuracy on `test`.
pub fn pretrain_backbone(
    train: &Dataset,
    test: &Dataset,
    encoder: EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(Encoder, f64)> {
    let enc = Encoder::new(encoder, cfg.seed)?;
    let lc = LearnerConfig {
        method: Method::Finetune,
        ..LearnerConfig::default()
    };
    let mut learner = Learner::new(lc, enc, train.num_classes(), 1, cfg.seed)?;
    learner.start_task(0)?;
    let classes: Vec<usize> = (0..train.num_classes()).collect();
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        online_points: 0,
        ..TrainConfig::default()
    };
    train_task(
        &mut learner,
        train,
        &classes,
        0,
        &tc,
        cfg.seed,
        None,
        &mut |_, _| Ok(()),
    )?;
    let (acc, _) = evaluate(
        &learner,
        test,
        &LogitMask::all(test.num_classes()),
        tc.eval_batch,
    )?;
    let mut encoder = learner.encoder;
    encoder.freeze();
    encoder.reset_forward_passes();
    Ok((encoder, acc))
}

//! Per-fold training with early stopping and the full cross-validation run.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::data::{LabeledDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::fbag::{read_bag, FeatureBag};
use crate::jsonfmt::to_stable_json;
use crate::metrics::{evaluate_scores, roc_curve, MetricSet, DEFAULT_THRESHOLD};
use crate::model::{
    init_model, loss_and_backward_into, InstanceLossConfig, LossConfig, MilModel, Params, DEFAULT_ATTENTION,
    DEFAULT_HIDDEN,
};
use crate::split::SplitPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub attention: usize,
    pub optimizer: AdamConfig,
    pub instance_loss: bool,
    pub instance_weight: f64,
    pub instance_k: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let inst = InstanceLossConfig::default();
        TrainConfig {
            max_epochs: 8,
            patience: 3,
            seed: 42,
            hidden: DEFAULT_HIDDEN,
            attention: DEFAULT_ATTENTION,
            optimizer: AdamConfig::default(),
            instance_loss: false,
            instance_weight: inst.weight,
            instance_k: inst.k,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("max_epochs and patience must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.hidden == 0 || self.attention == 0 {
            return Err(Error::invalid("hidden and attention sizes must be positive"));
        }
        let o = &self.optimizer;
        let positive = |v: f64| v > 0.0;
        if !positive(o.lr)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !positive(o.eps)
            || o.weight_decay < 0.0
        {
            return Err(Error::invalid(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weight_decay: self.optimizer.weight_decay,
            instance: self
                .instance_loss
                .then_some(InstanceLossConfig { k: self.instance_k, weight: self.instance_weight }),
        }
    }
}

/// Bags held in memory with their labels, in dataset order.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub task: String,
    pub slide_ids: Vec<String>,
    pub bags: Vec<FeatureBag>,
    pub labels: Vec<u8>,
}

impl TrainingData {
    pub fn new(task: impl Into<String>, bags: Vec<FeatureBag>, labels: Vec<u8>) -> Result<Self> {
        if bags.len() != labels.len() {
            return Err(Error::Shape(format!("{} bags for {} labels", bags.len(), labels.len())));
        }
        if let Some(first) = bags.first() {
            if let Some(bad) = bags.iter().find(|b| b.dim() != first.dim()) {
                return Err(Error::Shape(format!(
                    "bag {:?} has D={}, expected D={} from {:?}",
                    bad.slide_id,
                    bad.dim(),
                    first.dim(),
                    first.slide_id
                )));
            }
        }
        let slide_ids = bags.iter().map(|b| b.slide_id.clone()).collect();
        Ok(TrainingData { task: task.into(), slide_ids, bags, labels })
    }

    /// Reads every bag named by the dataset. Bag ids come from the manifest.
    pub fn load(dataset: &LabeledDataset) -> Result<Self> {
        let mut bags = Vec::with_capacity(dataset.len());
        for item in &dataset.items {
            let mut bag = read_bag(&item.bag_path)?;
            bag.slide_id = item.slide_id.clone();
            bags.push(bag);
        }
        Self::new(dataset.task.name.clone(), bags, dataset.labels())
    }

    pub fn dim(&self) -> usize {
        self.bags.first().map_or(0, |b| b.dim())
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub model: MilModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Mean bag cross-entropy over `indices`.
pub fn mean_cross_entropy(model: &MilModel, data: &TrainingData, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        let out = model.forward(&data.bags[i])?;
        total -= out.probs[data.labels[i] as usize].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / indices.len() as f64)
}

pub fn predict(model: &MilModel, data: &TrainingData, indices: &[usize]) -> Result<Vec<f64>> {
    indices.iter().map(|&i| Ok(model.forward(&data.bags[i])?.positive_prob())).collect()
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add(round as u64)
}

/// Trains one round: one bag per Adam step in a seeded shuffled order, keeping
/// the parameters with the lowest validation cross-entropy and stopping after
/// `patience` epochs without improvement.
pub fn train_fold(data: &TrainingData, plan: &SplitPlan, round: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    cfg.validate()?;
    if round >= plan.k {
        return Err(Error::invalid(format!("round {round} out of range for k={}", plan.k)));
    }
    if plan.len() != data.len() {
        return Err(Error::Shape(format!("plan covers {} items, dataset has {}", plan.len(), data.len())));
    }
    let train = plan.train_indices(round);
    let val = plan.val_indices(round);
    if train.is_empty() || val.is_empty() || plan.test_indices(round).is_empty() {
        return Err(Error::invalid(format!("round {round} has an empty train, validation or test partition")));
    }

    let seed = round_seed(cfg.seed, round);
    let mut model = init_model(data.dim(), cfg.hidden, cfg.attention, seed)?;
    let mut state = AdamState::new(&model, cfg.optimizer);
    let loss_cfg = cfg.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut grads = Params::zeros(&model.dims);
    let mut order = train.clone();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let loss = loss_and_backward_into(&model, &data.bags[i], data.labels[i], &loss_cfg, &mut grads)?;
            adam_step(&mut model, &grads, &mut state)?;
            train_loss += loss.total;
        }
        train_loss /= order.len() as f64;
        let val_loss = mean_cross_entropy(&model, data, &val)?;
        if !model.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters diverged in round {round} epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
        log::debug!("round {round} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(FoldResult { model: best.1, history, best_epoch: best.2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSlide {
    pub index: usize,
    pub slide_id: String,
    pub label: u8,
    pub score: f64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub test_fold: usize,
    pub val_fold: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: Vec<ScoredSlide>,
    /// Absent when the test fold holds a single class.
    pub metrics: Option<MetricSet>,
    pub roc: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReport {
    pub metrics: MetricSet,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub task: String,
    pub seed: u64,
    pub k: usize,
    pub n_items: usize,
    pub config: TrainConfig,
    pub rounds: Vec<RoundReport>,
    /// Every slide's test-time score, in dataset order.
    pub scores: Vec<ScoredSlide>,
    pub pooled: PooledReport,
}

impl CvReport {
    pub fn to_json(&self) -> String {
        to_stable_json(self).expect("report serializes")
    }

    pub fn pooled_scores(&self) -> (Vec<f64>, Vec<u8>) {
        (self.scores.iter().map(|s| s.score).collect(), self.scores.iter().map(|s| s.label).collect())
    }
}

pub struct CvOutput {
    pub report: CvReport,
    /// Best model of each round, in round order.
    pub models: Vec<MilModel>,
}

/// Runs every round of `plan` on up to `threads` workers. Rounds own their
/// model and PRNG, so the result does not depend on `threads`.
pub fn run_cross_validation(
    data: &TrainingData,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<CvOutput> {
    cfg.validate()?;
    let k = plan.k;
    type Slot = Option<Result<(FoldResult, Vec<f64>)>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..k).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let r = next.fetch_add(1, Ordering::SeqCst);
        if r >= k {
            break;
        }
        let result = train_fold(data, plan, r, cfg).and_then(|fold| {
            let scores = predict(&fold.model, data, &plan.test_indices(r))?;
            Ok((fold, scores))
        });
        slots.lock().expect("worker panicked")[r] = Some(result);
    };
    let threads = threads.clamp(1, k);
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }

    let mut rounds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    let mut pooled: Vec<Option<ScoredSlide>> = vec![None; data.len()];
    for (r, slot) in slots.into_inner().expect("worker panicked").into_iter().enumerate() {
        let (fold, scores) = slot.expect("every round ran")?;
        let test_idx = plan.test_indices(r);
        let test: Vec<ScoredSlide> = test_idx
            .iter()
            .zip(&scores)
            .map(|(&i, &score)| ScoredSlide {
                index: i,
                slide_id: data.slide_ids[i].clone(),
                label: data.labels[i],
                score,
                round: r,
            })
            .collect();
        for s in &test {
            if pooled[s.index].replace(s.clone()).is_some() {
                return Err(Error::invalid(format!("slide {} tested in more than one round", s.index)));
            }
        }
        let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
        let metrics = evaluate_scores(&scores, &labels, cfg.threshold).ok();
        let roc = roc_curve(&scores, &labels).ok().map(|c| c.points);
        rounds.push(RoundReport {
            round: r,
            test_fold: plan.rounds[r].test_fold,
            val_fold: plan.rounds[r].val_fold,
            best_epoch: fold.best_epoch,
            history: fold.history,
            test,
            metrics,
            roc,
        });
        models.push(fold.model);
    }
    let scores: Vec<ScoredSlide> = pooled
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::invalid(format!("slide {i} was never tested"))))
        .collect::<Result<_>>()?;
    let all_scores: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let all_labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    let pooled = PooledReport {
        metrics: evaluate_scores(&all_scores, &all_labels, cfg.threshold)?,
        roc: roc_curve(&all_scores, &all_labels)?.points,
    };
    let report = CvReport {
        task: data.task.clone(),
        seed: cfg.seed,
        k,
        n_items: data.len(),
        config: cfg.clone(),
        rounds,
        scores,
        pooled,
    };
    Ok(CvOutput { report, models })
}

/// Builds a task spec for the synthetic benchmark's `positive`/`negative` labels.
pub fn benchmark_task() -> TaskSpec {
    TaskSpec::new("witness", ["positive"], ["negative"]).expect("static task is valid")
}

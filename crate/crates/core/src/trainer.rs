//! Per-step training, optimizer, learning-rate schedule, labeled splits,
//! evaluation and the metrics log.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::{apply_weak, rotate90, sample_weak, strong_augment, weak_augment, Image};
use crate::config::{DatasetKind, Pairing, RotationOrder, Schedule, TrainConfig, NUM_SPLITS};
use crate::data::{generate_synthetic, read_cifar_binary, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{rotation_loss, supervised_loss, total_objective, unlabeled_loss, UnlabeledBatch};
use crate::model::{ema_update, save_checkpoint, EmaState, ModelState, NUM_ROTATIONS};
use crate::rng::{derive_seed, tag, Rng};
use crate::tensor::{Tape, Var};

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_sup,loss_pseudo,loss_dist,loss_rot,\
mask_rate,pseudo_err_all,pseudo_err_masked,eval_err_raw,eval_err_ema";

/// Learning rate at step `k` of `cfg.total_steps`.
pub fn lr_at(k: usize, cfg: &TrainConfig) -> Result<f64> {
    if k >= cfg.total_steps {
        return Err(Error::Invalid(format!("step {k} outside 0..{}", cfg.total_steps)));
    }
    Ok(lr_formula(k as f64 / cfg.total_steps as f64, cfg.lr0, cfg.schedule))
}

/// Schedule value at training progress `t = k/K`.
pub fn lr_formula(t: f64, lr0: f64, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Cosine => lr0 * (7.0 * std::f64::consts::PI * t / 16.0).cos(),
        Schedule::HalfCosine => lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
    }
}

/// SGD with momentum, optional Nesterov, and decoupled weight decay applied
/// to weights only.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(state: &ModelState, momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            velocity: state.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn from_config(state: &ModelState, cfg: &TrainConfig) -> Self {
        Sgd::new(state, cfg.momentum, cfg.nesterov, cfg.weight_decay)
    }

    /// `v ← μv + g;  w ← w − lr·(g + μv  |  v) − lr·wd·w`.
    pub fn step(&mut self, state: &mut ModelState, lr: f64) {
        let (m, lr32) = (self.momentum as f32, lr as f32);
        let decay = (lr * self.weight_decay) as f32;
        for i in 0..state.params().len() {
            let is_weight = state.is_weight(i);
            let p = &mut state.params_mut()[i];
            let g = p.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
            let vel = &mut self.velocity[i];
            for ((w, v), &gi) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(&g) {
                *v = m * *v + gi;
                let upd = if self.nesterov { gi + m * *v } else { *v };
                let shrink = if is_weight { decay * *w } else { 0.0 };
                *w -= lr32 * upd + shrink;
            }
            p.clear_grad();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// `n_splits` labeled/unlabeled partitions, each drawn from its own stream.
pub fn make_splits(labels: &[usize], labels_per_class: usize, n_splits: usize, seed: u64) -> Result<Vec<Split>> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < labels_per_class {
            return Err(Error::InsufficientClass { class: c, have: idx.len(), need: labels_per_class });
        }
    }
    Ok((0..n_splits)
        .map(|s| {
            let mut rng = Rng::substream(seed, s as u64, tag::SPLIT);
            let mut labeled = Vec::with_capacity(classes * labels_per_class);
            for idx in &by_class {
                let mut idx = idx.clone();
                rng.shuffle(&mut idx);
                labeled.extend_from_slice(&idx[..labels_per_class]);
            }
            labeled.sort_unstable();
            let mut is_labeled = vec![false; labels.len()];
            labeled.iter().for_each(|&i| is_labeled[i] = true);
            let unlabeled = (0..labels.len()).filter(|&i| !is_labeled[i]).collect();
            Split { labeled, unlabeled }
        })
        .collect())
}

/// Top-1 error of `state` on `test`.
pub fn evaluate(state: &ModelState, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty test set".into()));
    }
    let pred = state.predict(&test.image_refs())?;
    let wrong = pred.iter().zip(&test.labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / test.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_pseudo: f64,
    /// `None` when the distance term is disabled.
    pub loss_dist: Option<f64>,
    /// `None` when the rotation branch is disabled.
    pub loss_rot: Option<f64>,
    pub mask_rate: f64,
    pub pseudo_err_all: f64,
    /// `None` when no sample passed the threshold.
    pub pseudo_err_masked: Option<f64>,
    pub eval_err_raw: Option<f64>,
    pub eval_err_ema: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss_total,
            self.loss_sup,
            self.loss_pseudo,
            field(self.loss_dist),
            field(self.loss_rot),
            self.mask_rate,
            self.pseudo_err_all,
            field(self.pseudo_err_masked),
            field(self.eval_err_raw),
            field(self.eval_err_ema),
        )
    }
}

/// A batch sample: image plus its label (for unlabeled data the label is
/// only used for pseudo-label error metrics).
pub type Sample<'a> = (&'a Image, usize);

fn aug_rng(run_seed: u64, step: usize, sample: usize, tag: u64) -> Rng {
    Rng::new(derive_seed(run_seed, &[step as u64, sample as u64, tag]))
}

struct Views {
    labeled: Vec<Image>,
    first: Vec<Image>,
    second: Vec<Image>,
    rot: Vec<Image>,
    rot_targets: Vec<usize>,
}

fn make_views(labeled: &[Sample], unlabeled: &[Sample], cfg: &TrainConfig, run_seed: u64, step: usize) -> Result<Views> {
    let acfg = cfg.augment_config();
    let weak = |img: &Image, i: usize, t: u64| weak_augment(img, &mut aug_rng(run_seed, step, i, t), &acfg);
    let strong = |img: &Image, i: usize, t: u64| strong_augment(img, &mut aug_rng(run_seed, step, i, t), &acfg);

    let lab: Vec<Image> = labeled.iter().enumerate().map(|(i, (x, _))| weak(x, i, tag::LABELED_WEAK)).collect();
    let (first_strong, second_strong) = match cfg.pairing {
        Pairing::WeakStrong => (false, true),
        Pairing::WeakWeak => (false, false),
        Pairing::StrongStrong => (true, true),
    };
    let view = |img: &Image, i: usize, t: u64, s: bool| if s { strong(img, i, t) } else { weak(img, i, t) };
    let first: Vec<Image> = unlabeled
        .iter()
        .enumerate()
        .map(|(i, (x, _))| view(x, i, tag::UNLABELED_FIRST, first_strong))
        .collect();
    let second: Vec<Image> = unlabeled
        .iter()
        .enumerate()
        .map(|(i, (x, _))| view(x, i, tag::UNLABELED_SECOND, second_strong))
        .collect();

    let mut rot = Vec::new();
    let mut rot_targets = Vec::new();
    if cfg.lambda_r > 0.0 {
        let mut sources: Vec<(&Image, usize, u64)> =
            unlabeled.iter().enumerate().map(|(i, (x, _))| (*x, i, tag::ROTATION)).collect();
        if cfg.rot_includes_labeled {
            sources.extend(labeled.iter().enumerate().map(|(i, (x, _))| (*x, i, tag::LABELED_ROTATION)));
        }
        for (img, i, t) in sources {
            let mut rng = aug_rng(run_seed, step, i, t);
            let base = match cfg.rotation_order {
                RotationOrder::RotateThenAugment => img.clone(),
                RotationOrder::AugmentThenRotate => weak_augment(img, &mut rng, &acfg),
            };
            for r in 0..NUM_ROTATIONS {
                let turned = rotate90(&base, r)?;
                rot.push(match cfg.rotation_order {
                    RotationOrder::RotateThenAugment => {
                        let p = sample_weak(&mut rng, turned.height(), &acfg);
                        apply_weak(&turned, &p)
                    }
                    RotationOrder::AugmentThenRotate => turned,
                });
                rot_targets.push(r);
            }
        }
    }
    Ok(Views { labeled: lab, first, second, rot, rot_targets })
}

/// One optimization step on a labeled and an unlabeled batch: forward all
/// views in one pass, compute every loss term, backpropagate, update the
/// parameters with SGD at `lr_at(step)`, then update the EMA.
pub fn train_step(
    state: &mut ModelState,
    ema: &mut EmaState,
    opt: &mut Sgd,
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &TrainConfig,
    run_seed: u64,
    step: usize,
) -> Result<StepMetrics> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::Invalid("train_step needs non-empty labeled and unlabeled batches".into()));
    }
    let lr = lr_at(step, cfg)?;
    let views = make_views(labeled, unlabeled, cfg, run_seed, step)?;
    let (nl, nu, nr) = (views.labeled.len(), views.first.len(), views.rot.len());
    // the unlabeled branches only need gradients when they are weighted
    let grad_unlabeled = cfg.lambda_u > 0.0;

    let mut tape = Tape::<f32>::new();
    let vars = state.bind(&mut tape, true);
    let mut batch: Vec<&Image> = views.labeled.iter().collect();
    if grad_unlabeled {
        batch.extend(views.first.iter().chain(&views.second));
    }
    batch.extend(views.rot.iter());
    let x = state.batch_var(&mut tape, &batch)?;
    let fb = state.forward(&mut tape, &vars, x)?;

    let labels: Vec<usize> = labeled.iter().map(|s| s.1).collect();
    let lab_logits = tape.slice_rows(fb.logits, 0, nl)?;
    let l_s = supervised_loss(&mut tape, &labels, lab_logits)?;

    let mut frozen = Tape::<f32>::new();
    let (u_tape, ub, off) = if grad_unlabeled {
        let ub = UnlabeledBatch {
            weak_logits: tape.slice_rows(fb.logits, nl, nl + nu)?,
            strong_logits: tape.slice_rows(fb.logits, nl + nu, nl + 2 * nu)?,
            weak_proj: tape.slice_rows(fb.proj, nl, nl + nu)?,
            strong_proj: tape.slice_rows(fb.proj, nl + nu, nl + 2 * nu)?,
        };
        (&mut tape, ub, nl + 2 * nu)
    } else {
        let fvars = state.bind(&mut frozen, false);
        let refs: Vec<&Image> = views.first.iter().chain(&views.second).collect();
        let fx = state.batch_var(&mut frozen, &refs)?;
        let ff = state.forward(&mut frozen, &fvars, fx)?;
        let ub = UnlabeledBatch {
            weak_logits: frozen.slice_rows(ff.logits, 0, nu)?,
            strong_logits: frozen.slice_rows(ff.logits, nu, 2 * nu)?,
            weak_proj: frozen.slice_rows(ff.proj, 0, nu)?,
            strong_proj: frozen.slice_rows(ff.proj, nu, 2 * nu)?,
        };
        (&mut frozen, ub, nl)
    };
    let terms = unlabeled_loss(u_tape, &ub, cfg.tau, cfg.dist_metric, cfg.detach_weak)?;
    let u_pseudo = u_tape.item(terms.pseudo) as f64;
    let u_dist = terms.dist.map(|d| u_tape.item(d) as f64);

    let l_u: Var = if grad_unlabeled { terms.total } else { tape.scalar(0.0) };
    let l_rot = if nr > 0 {
        let feats = tape.slice_rows(fb.feat_b, off, off + nr)?;
        let rl = state.rot_forward(&mut tape, &vars, feats)?;
        Some(rotation_loss(&mut tape, rl, &views.rot_targets)?)
    } else {
        None
    };
    let rot_var = match l_rot {
        Some(v) => v,
        None => tape.scalar(0.0),
    };
    let total = total_objective(&mut tape, l_s, l_u, rot_var, cfg.lambda_u, cfg.lambda_r)?;
    let loss_total = tape.item(total) as f64;
    if !loss_total.is_finite() {
        return Err(Error::Diverged(step));
    }
    tape.backward(total)?;
    state.collect_grads(&tape, &vars)?;
    opt.step(state, lr);
    ema_update(ema, state, cfg.ema_decay)?;

    let passed = terms.mask.iter().filter(|&&m| m).count();
    let wrong = |only_masked: bool| {
        terms
            .labels
            .iter()
            .zip(unlabeled)
            .zip(&terms.mask)
            .filter(|&(_, &m)| m || !only_masked)
            .filter(|((p, s), _)| p.label != s.1)
            .count()
    };
    Ok(StepMetrics {
        step,
        lr,
        loss_total,
        loss_sup: tape.item(l_s) as f64,
        loss_pseudo: u_pseudo,
        loss_dist: u_dist,
        loss_rot: l_rot.map(|v| tape.item(v) as f64),
        mask_rate: passed as f64 / nu as f64,
        pseudo_err_all: wrong(false) as f64 / nu as f64,
        pseudo_err_masked: (passed > 0).then(|| wrong(true) as f64 / passed as f64),
        eval_err_raw: None,
        eval_err_ema: None,
    })
}

/// Loads the train and test sets named by `cfg`.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let c = cfg.num_classes;
            let per_class = cfg.labels_per_class + cfg.synthetic.unlabeled.div_ceil(c);
            let base = SyntheticSpec {
                num_classes: c,
                samples_per_class: per_class,
                image_size: cfg.synthetic.image_size,
                seed: derive_seed(cfg.seed, &[tag::DATA]),
                ..SyntheticSpec::default()
            };
            let train = generate_synthetic(&base)?;
            let test = generate_synthetic(&SyntheticSpec {
                samples_per_class: cfg.synthetic.test_per_class,
                seed: derive_seed(cfg.seed, &[tag::TEST_SET]),
                ..base
            })?;
            Ok((train, test))
        }
        DatasetKind::Cifar => {
            let dir = cfg
                .data_path
                .as_deref()
                .ok_or_else(|| Error::Config("dataset = cifar needs data_path".into()))?;
            let mut train: Option<Dataset> = None;
            for i in 1..=5 {
                let p = dir.join(format!("data_batch_{i}.bin"));
                if p.exists() {
                    let d = read_cifar_binary(&p)?;
                    train = Some(match train {
                        None => d,
                        Some(mut t) => {
                            t.images.extend(d.images);
                            t.labels.extend(d.labels);
                            t
                        }
                    });
                }
            }
            let train = train.ok_or_else(|| Error::format(dir, "no data_batch_*.bin files"))?;
            let test = read_cifar_binary(&dir.join("test_batch.bin"))?;
            Ok((train, test))
        }
    }
}

/// Seed for everything random within one run (init, batches, augmentation).
pub fn run_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, &[cfg.split_index as u64])
}

/// Labeled batches cycle through the labeled set, reshuffled every pass;
/// unlabeled batches are drawn with replacement.
struct Sampler {
    seed: u64,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl Sampler {
    fn new(split: &Split, seed: u64) -> Self {
        let mut s = Sampler {
            seed,
            labeled: split.labeled.clone(),
            unlabeled: split.unlabeled.clone(),
            order: Vec::new(),
            pos: 0,
            epoch: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.labeled.clone();
        Rng::substream(self.seed, self.epoch, tag::LABELED_BATCH).shuffle(&mut self.order);
        self.epoch += 1;
        self.pos = 0;
    }

    fn labeled_batch(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    fn unlabeled_batch(&self, step: usize, n: usize) -> Vec<usize> {
        let mut rng = Rng::substream(self.seed, step as u64, tag::UNLABELED_BATCH);
        (0..n).map(|_| self.unlabeled[rng.index(self.unlabeled.len())]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: ModelState,
    pub ema: EmaState,
    pub metrics: Vec<StepMetrics>,
    pub err_raw: f64,
    pub err_ema: f64,
    pub split: Split,
}

/// Writes metrics rows as they are produced.
pub struct MetricsLog {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog { path: path.to_path_buf(), file: std::io::BufWriter::new(f) };
        log.line(METRICS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(&mut self, m: &StepMetrics) -> Result<()> {
        self.line(&m.csv_row())
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Trains for `cfg.total_steps` on split `cfg.split_index` of `train`.
/// With `cfg.out_dir` set, writes `config.resolved`, `metrics.csv` and
/// `checkpoint.crmt` there.
pub fn run(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunResult> {
    cfg.validate()?;
    let size = train
        .image_size()
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    let splits = make_splits(&train.labels, cfg.labels_per_class, NUM_SPLITS, derive_seed(cfg.seed, &[tag::SPLIT]))?;
    let split = splits[cfg.split_index].clone();
    let seed = run_seed(cfg);
    let mut state = ModelState::init(&cfg.model_config(size), seed)?;
    let mut ema = EmaState::new(&state, cfg.ema_decay)?;
    let mut opt = Sgd::from_config(&state, cfg);
    let mut sampler = Sampler::new(&split, seed);

    let mut log = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("config.resolved");
            std::fs::write(&p, cfg.resolved_text()).map_err(|e| Error::io(&p, e))?;
            Some(MetricsLog::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };

    let mut rows = Vec::new();
    for k in 0..cfg.total_steps {
        let li = sampler.labeled_batch(cfg.b_s);
        let ui = sampler.unlabeled_batch(k, cfg.b_u());
        let lab: Vec<Sample> = li.iter().map(|&i| (&train.images[i], train.labels[i])).collect();
        let unl: Vec<Sample> = ui.iter().map(|&i| (&train.images[i], train.labels[i])).collect();
        let mut m = train_step(&mut state, &mut ema, &mut opt, &lab, &unl, cfg, seed, k)?;
        let last = k + 1 == cfg.total_steps;
        let do_eval = (k + 1) % cfg.eval_every == 0 || last;
        if do_eval {
            m.eval_err_raw = Some(evaluate(&state, test)?);
            m.eval_err_ema = Some(evaluate(&ema.to_state(&state)?, test)?);
        }
        if do_eval || (k + 1) % cfg.log_every == 0 {
            if let Some(log) = log.as_mut() {
                log.row(&m)?;
            }
            rows.push(m);
        }
    }
    if let Some(log) = log {
        log.finish()?;
    }
    let last = rows.last().cloned().unwrap_or_default();
    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(&dir.join("checkpoint.crmt"), &state, &ema)?;
    }
    Ok(RunResult {
        err_raw: last.eval_err_raw.unwrap_or(f64::NAN),
        err_ema: last.eval_err_ema.unwrap_or(f64::NAN),
        state,
        ema,
        metrics: rows,
        split,
    })
}

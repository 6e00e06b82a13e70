//! Alternating training of the two branches.
//!
//! Time slice 0 trains both backbones independently. Each later slice runs
//! one phase per branch; during a phase the other branch is frozen and only
//! supplies its cached hard predictions. After every phase the active
//! branch's predictions are recomputed for the whole corpus and the model
//! is evaluated and checkpointed.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, Backbone3dKind, DepthEncoding};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Tally};
use crate::model::{AblationConfig, Branch, Model, ModelSpec, PreparedSample};
use crate::nn::{sgd_step, softmax_cross_entropy, HasParams, SgdConfig};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrder {
    #[default]
    SscFirst,
    SsFirst,
}

impl PhaseOrder {
    pub fn branches(self) -> [Branch; 2] {
        match self {
            PhaseOrder::SscFirst => [Branch::Ssc, Branch::Ss],
            PhaseOrder::SsFirst => [Branch::Ss, Branch::Ssc],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Number of alternation slices `T` after the bootstrap.
    pub iterations: usize,
    pub epochs_per_phase: usize,
    pub seed: u64,
    pub phase_order: PhaseOrder,
    pub backbone3d: Backbone3dKind,
    pub encoding: DepthEncoding,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            iterations: 3,
            epochs_per_phase: 5,
            seed: 0,
            phase_order: PhaseOrder::SscFirst,
            backbone3d: Backbone3dKind::Dilated,
            encoding: DepthEncoding::Occupancy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} (config: {self:?})")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs_per_phase == 0 {
            return bad("batch_size and epochs_per_phase must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub t: usize,
    /// `bootstrap`, `ssc` or `ss`.
    pub branch: String,
    /// Mean training loss over the phase's steps (per branch for the bootstrap).
    pub ssc_loss: Option<f64>,
    pub ss_loss: Option<f64>,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Latest hard predictions of each branch for the training and
/// evaluation corpora.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationState {
    pub t: usize,
    pub train_f2d: Vec<Vec<u8>>,
    pub train_f3d: Vec<Vec<u8>>,
    pub eval_f2d: Vec<Vec<u8>>,
    pub eval_f3d: Vec<Vec<u8>>,
}

/// Micro-averaged metrics of cached predictions over a corpus.
pub fn evaluate_corpus(
    samples: &[PreparedSample],
    f2d: &[Vec<u8>],
    f3d: &[Vec<u8>],
    num_labels: usize,
) -> Result<MetricsReport> {
    let mut t3 = Tally::new(num_labels);
    let mut t2 = Tally::new(num_labels);
    for (i, s) in samples.iter().enumerate() {
        t3.add_scene(&f3d[i], &s.gt3d, &s.mask3d)?;
        t2.add_scene(&f2d[i], &s.gt2d, &s.mask2d)?;
    }
    Ok(MetricsReport {
        ssc: t3.ssc(),
        ss: t2.ss(),
    })
}

/// Runs the model's full inference chain on every sample and scores it.
pub fn evaluate_model(
    model: &Model<f32>,
    samples: &[PreparedSample],
    ablation: &AblationConfig,
    rounds: usize,
) -> Result<MetricsReport> {
    let (mut f2d, mut f3d) = (Vec::new(), Vec::new());
    for s in samples {
        let (a, b) = model.predict(s, ablation, rounds)?;
        f2d.push(a);
        f3d.push(b);
    }
    evaluate_corpus(samples, &f2d, &f3d, model.spec.num_labels)
}

#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub ablation: AblationConfig,
    pub state: IterationState,
    pub log: Vec<EvalRecord>,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<(Branch, f64)>,
    train: &'a [PreparedSample],
    eval: &'a [PreparedSample],
    rng: ChaCha8Rng,
    ckpt_dir: Option<PathBuf>,
    bootstrapped: bool,
}

impl<'a> Trainer<'a> {
    /// `eval` may be empty, in which case metrics are computed on `train`.
    pub fn new(
        train: &'a [PreparedSample],
        eval: &'a [PreparedSample],
        num_labels: usize,
        cfg: TrainConfig,
        ablation: AblationConfig,
        ckpt_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let spec = ModelSpec {
            num_labels,
            backbone3d: cfg.backbone3d,
            encoding: cfg.encoding,
        };
        Ok(Trainer {
            model: Model::new(spec, cfg.seed),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0ba7c4),
            cfg,
            ablation,
            state: IterationState::default(),
            log: Vec::new(),
            step_losses: Vec::new(),
            train,
            eval: if eval.is_empty() { train } else { eval },
            ckpt_dir: ckpt_dir.map(Path::to_path_buf),
            bootstrapped: false,
        })
    }

    /// Switches the ablation after a shared bootstrap.
    pub fn with_ablation(mut self, ablation: AblationConfig) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn set_checkpoint_dir(&mut self, dir: Option<&Path>) {
        self.ckpt_dir = dir.map(Path::to_path_buf);
    }

    pub fn eval_samples(&self) -> &'a [PreparedSample] {
        self.eval
    }

    /// Bootstrap, then (with iterative learning) `iterations` slices.
    pub fn run(&mut self) -> Result<()> {
        if !self.bootstrapped {
            self.bootstrap()?;
        }
        if self.ablation.iterative {
            while self.state.t < self.cfg.iterations {
                self.run_slice()?;
            }
        }
        Ok(())
    }

    /// Trains both backbones on their own and caches coarse predictions.
    pub fn bootstrap(&mut self) -> Result<()> {
        let mut losses = [None, None];
        for (slot, branch) in self.cfg.phase_order.branches().into_iter().enumerate() {
            losses[slot] = Some(self.train_epochs(branch, false)?);
        }
        let [a, b] = losses;
        let (ssc_loss, ss_loss) = match self.cfg.phase_order {
            PhaseOrder::SscFirst => (a, b),
            PhaseOrder::SsFirst => (b, a),
        };
        let (model, train, eval) = (&self.model, self.train, self.eval);
        let coarse = |s: &PreparedSample| -> Result<(Vec<u8>, Vec<u8>)> {
            Ok((model.predict_2d(s, None, false)?, model.predict_3d(s, None, false)?))
        };
        let (tr2, tr3): (Vec<_>, Vec<_>) = train.iter().map(coarse).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let (ev2, ev3): (Vec<_>, Vec<_>) = eval.iter().map(coarse).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        self.state = IterationState {
            t: 0,
            train_f2d: tr2,
            train_f3d: tr3,
            eval_f2d: ev2,
            eval_f3d: ev3,
        };
        self.bootstrapped = true;
        self.record("bootstrap", ssc_loss, ss_loss)?;
        self.checkpoint("bootstrap")
    }

    /// One time slice: a phase per branch in the configured order.
    pub fn run_slice(&mut self) -> Result<()> {
        if !self.bootstrapped {
            return Err(Error::Config("run_slice before bootstrap".into()));
        }
        self.state.t += 1;
        for branch in self.cfg.phase_order.branches() {
            self.run_phase(branch)?;
        }
        Ok(())
    }

    /// Trains one branch with the other frozen, then refreshes that branch's
    /// cached predictions, evaluates and checkpoints.
    pub fn run_phase(&mut self, branch: Branch) -> Result<()> {
        let other = match branch {
            Branch::Ss => Branch::Ssc,
            Branch::Ssc => Branch::Ss,
        };
        let snapshot: Vec<(Vec<f32>, Vec<f32>)> = self
            .model
            .branch_params(other)
            .iter()
            .map(|p| (p.value.data().to_vec(), p.velocity.data().to_vec()))
            .collect();
        self.model.branch_params_mut(other).into_iter().for_each(|p| p.frozen = true);
        let refine = match branch {
            Branch::Ss => self.ablation.dcp,
            Branch::Ssc => self.ablation.dda,
        };
        let trained = self.train_epochs(branch, refine);
        self.model.branch_params_mut(other).into_iter().for_each(|p| p.frozen = false);
        let loss = trained?;
        for (p, (v, m)) in self.model.branch_params(other).iter().zip(&snapshot) {
            if p.value.data() != v.as_slice() || p.velocity.data() != m.as_slice() {
                return Err(Error::FreezeViolation(p.name.clone()));
            }
        }

        self.refresh_cache(branch)?;
        match branch {
            Branch::Ssc => self.record("ssc", Some(loss), None)?,
            Branch::Ss => self.record("ss", None, Some(loss))?,
        }
        self.checkpoint(branch.name())
    }

    fn refresh_cache(&mut self, branch: Branch) -> Result<()> {
        let m = &self.model;
        let ab = self.ablation;
        let st = &mut self.state;
        match branch {
            Branch::Ssc => {
                for (i, s) in self.train.iter().enumerate() {
                    st.train_f3d[i] = m.predict_3d(s, Some(&st.train_f2d[i]), ab.dda)?;
                }
                for (i, s) in self.eval.iter().enumerate() {
                    st.eval_f3d[i] = m.predict_3d(s, Some(&st.eval_f2d[i]), ab.dda)?;
                }
            }
            Branch::Ss => {
                for (i, s) in self.train.iter().enumerate() {
                    st.train_f2d[i] = m.predict_2d(s, Some(&st.train_f3d[i]), ab.dcp)?;
                }
                for (i, s) in self.eval.iter().enumerate() {
                    st.eval_f2d[i] = m.predict_2d(s, Some(&st.eval_f3d[i]), ab.dcp)?;
                }
            }
        }
        Ok(())
    }

    /// `epochs_per_phase` passes over the training set in seeded random
    /// order. Returns the mean batch loss.
    fn train_epochs(&mut self, branch: Branch, refine: bool) -> Result<f64> {
        let sgd = self.cfg.sgd();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut total = 0.0;
        let mut steps = 0usize;
        for _ in 0..self.cfg.epochs_per_phase {
            order.shuffle(&mut self.rng);
            for batch in order.chunks(self.cfg.batch_size) {
                let loss = self.train_step(branch, refine, batch, &sgd)?;
                self.step_losses.push((branch, loss));
                total += loss;
                steps += 1;
            }
        }
        Ok(total / steps as f64)
    }

    fn train_step(&mut self, branch: Branch, refine: bool, batch: &[usize], sgd: &SgdConfig) -> Result<f64> {
        let model = &mut self.model;
        model.branch_params_mut(branch).into_iter().for_each(|p| p.zero_grad());
        let mut loss_sum = 0.0;
        for &i in batch {
            let s = &self.train[i];
            let loss = match branch {
                Branch::Ssc => {
                    let f3d = model.bb3d.forward(&s.depth_volume)?;
                    let logits = if refine {
                        model.dda.forward(&f3d, &self.state.train_f2d[i], &s.table)?
                    } else {
                        f3d
                    };
                    let (loss, g) = softmax_cross_entropy(&logits, &s.gt3d, &s.mask3d)?;
                    let g = if refine { model.dda.backward(&g) } else { g };
                    model.bb3d.backward(&g);
                    loss
                }
                Branch::Ss => {
                    let f2d = model.bb2d.forward(&s.rgb)?;
                    let logits = if refine {
                        model.dcp.forward(&f2d, &self.state.train_f3d[i], &s.table)?
                    } else {
                        f2d
                    };
                    let (loss, g) = softmax_cross_entropy(&logits, &s.gt2d, &s.mask2d)?;
                    let g = if refine { model.dcp.backward(&g) } else { g };
                    model.bb2d.backward(&g);
                    loss
                }
            };
            loss_sum += loss as f64;
        }
        let inv = 1.0 / batch.len() as f32;
        // unused refinement parameters are left out so weight decay cannot move them
        let mut params = match branch {
            Branch::Ssc => model.bb3d.params_mut(),
            Branch::Ss => model.bb2d.params_mut(),
        };
        if refine {
            match branch {
                Branch::Ssc => params.extend(model.dda.params_mut()),
                Branch::Ss => params.extend(model.dcp.params_mut()),
            }
        }
        for p in params.iter_mut() {
            p.grad.scale(inv);
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        sgd_step(params, sgd);
        Ok(loss_sum / batch.len() as f64)
    }

    fn record(&mut self, branch: &str, ssc_loss: Option<f64>, ss_loss: Option<f64>) -> Result<()> {
        let metrics = evaluate_corpus(
            self.eval,
            &self.state.eval_f2d,
            &self.state.eval_f3d,
            self.model.spec.num_labels,
        )?;
        self.log.push(EvalRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t: self.state.t,
            branch: branch.to_string(),
            ssc_loss,
            ss_loss,
            metrics,
        });
        Ok(())
    }

    fn checkpoint(&self, tag: &str) -> Result<()> {
        match &self.ckpt_dir {
            Some(dir) => save_checkpoint(&self.model, checkpoint_path(dir, self.state.t, tag)),
            None => Ok(()),
        }
    }

    /// Metrics of the latest record.
    pub fn latest(&self) -> Option<&EvalRecord> {
        self.log.last()
    }
}

pub fn checkpoint_path(dir: &Path, t: usize, tag: &str) -> PathBuf {
    dir.join(format!("t{t}_{tag}.bin"))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EvalRecord>,
    pub state: IterationState,
}

/// Bootstrap plus `cfg.iterations` slices (bootstrap only when the
/// ablation disables iterative learning).
pub fn run_iterative_training(
    train: &[PreparedSample],
    eval: &[PreparedSample],
    num_labels: usize,
    cfg: &TrainConfig,
    ablation: AblationConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(train, eval, num_labels, cfg.clone(), ablation, ckpt_dir)?;
    trainer.run()?;
    Ok(TrainOutcome {
        model: trainer.model,
        log: trainer.log,
        state: trainer.state,
    })
}

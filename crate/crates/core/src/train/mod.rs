//! Self-supervised training: fresh photon splits every step, masked loss,
//! AdamW, per-epoch validation on held-out frames.

mod loss;
mod optim;

use serde::{Deserialize, Serialize};

pub use loss::{masked_cross_entropy, masked_cross_entropy_sample, LossOutput};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::nn::{backward, forward, ModelConfig, ModelState, Tensor5};
use crate::rng::{tags, RandomSource};
use crate::sampler::{augment, draw_crop, sample_triple, SamplerConfig, SplitTriple};
use crate::stats::thin;
use crate::volume::BitVolume;

/// How input/target pairs are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairMode {
    /// A new random split of every crop at every step.
    Fresh,
    /// The training volume is split once with probability `p` before
    /// training; every step crops the same pair. Diagnostic only.
    Fixed { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Trailing fraction of frames held out (at least one crop depth).
    pub fraction: f64,
    /// Number of fixed validation triples.
    pub samples: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    /// When false every voxel counts in the loss (mask of all ones).
    pub masked: bool,
    pub pairs: PairMode,
    pub validation: Option<ValidationConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            steps_per_epoch: 250,
            batch: 4,
            optimizer: AdamWConfig::default(),
            patience: Some(20),
            seed: 0,
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            masked: true,
            pairs: PairMode::Fresh,
            validation: Some(ValidationConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("steps_per_epoch and batch must be positive".into()));
        }
        self.optimizer.validate()?;
        self.sampler.validate()?;
        self.model.validate()?;
        self.model.check_input(self.sampler.crop)?;
        if let PairMode::Fixed { p } = self.pairs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(p));
            }
        }
        if let Some(v) = &self.validation {
            if !(v.fraction > 0.0 && v.fraction < 1.0) || v.samples == 0 {
                return Err(Error::InvalidConfig(format!("bad validation settings {v:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,step,train_loss,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.train_loss, val));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub state: ModelState,
    pub epoch: usize,
    pub step: u64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub best: Option<BestState>,
    pub history: Vec<HistoryRow>,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// The best-validation state, or the final one without validation.
    pub fn best_state(&self) -> &ModelState {
        self.best.as_ref().map_or(&self.state, |b| &b.state)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    src: RandomSource,
    train: BitVolume,
    fixed: Option<(BitVolume, BitVolume)>,
    val: Vec<SplitTriple>,
    state: ModelState,
    opt: OptimizerState,
    history: Vec<HistoryRow>,
    step: u64,
    epoch: usize,
    best: Option<BestState>,
    stale: usize,
    stopped_early: bool,
}

impl Trainer {
    pub fn new(data: &BitVolume, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let src = RandomSource::new(cfg.seed);
        let shape = data.shape();
        let (train, val) = match &cfg.validation {
            Some(v) => {
                let held = ((shape.t as f64 * v.fraction).ceil() as usize).max(cfg.sampler.crop.t);
                if held + cfg.sampler.crop.t > shape.t {
                    return Err(Error::InvalidConfig(format!(
                        "{} frames cannot hold a training and a validation crop of depth {}",
                        shape.t, cfg.sampler.crop.t
                    )));
                }
                let split = shape.t - held;
                let val_data = data.frames(split, shape.t)?;
                let val_sampler = SamplerConfig {
                    augment_flip_transpose: false,
                    ..cfg.sampler
                };
                let mut triples = Vec::with_capacity(v.samples);
                for k in 0..v.samples {
                    let mut rng = src.derive(tags::VALIDATION, k as u64).rng();
                    let (t, _, _) = sample_triple(&val_data, &val_sampler, &mut rng)?;
                    triples.push(t);
                }
                (data.frames(0, split)?, triples)
            }
            None => (data.clone(), Vec::new()),
        };
        cfg.sampler.fits(train.shape())?;
        let fixed = match cfg.pairs {
            PairMode::Fresh => None,
            PairMode::Fixed { p } => Some(thin(&train, p, &mut src.derive(tags::FIXED_PAIRS, 0).rng())?),
        };
        let state = ModelState::init(&cfg.model, &src)?;
        let opt = OptimizerState::new(state.params());
        Ok(Self {
            cfg: cfg.clone(),
            src,
            train,
            fixed,
            val,
            state,
            opt,
            history: Vec::new(),
            step: 0,
            epoch: 0,
            best: None,
            stale: 0,
            stopped_early: false,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn with_mask(&self, mut t: SplitTriple) -> SplitTriple {
        if !self.cfg.masked {
            t.mask = BitVolume::ones(t.mask.shape());
        }
        t
    }

    fn draw_batch(&self) -> Result<Vec<SplitTriple>> {
        let mut rng = self.src.derive(tags::TRAIN_STEP, self.step).rng();
        let mut out = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let t = match &self.fixed {
                None => sample_triple(&self.train, &self.cfg.sampler, &mut rng)?.0,
                Some((input, target)) => {
                    let crop = draw_crop(self.train.shape(), self.cfg.sampler.crop, &mut rng)?;
                    let input = input.crop(&crop)?;
                    let t = SplitTriple {
                        mask: input.complement(),
                        target: target.crop(&crop)?,
                        input,
                    };
                    if self.cfg.sampler.augment_flip_transpose {
                        augment(&t, &mut rng)?
                    } else {
                        t
                    }
                }
            };
            out.push(self.with_mask(t));
        }
        Ok(out)
    }

    /// One optimizer step; returns the per-photon training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.draw_batch()?;
        let inputs: Vec<&BitVolume> = batch.iter().map(|t| &t.input).collect();
        let targets: Vec<&BitVolume> = batch.iter().map(|t| &t.target).collect();
        let masks: Vec<&BitVolume> = batch.iter().map(|t| &t.mask).collect();
        let x = Tensor5::from_bits(&inputs)?;
        let out = forward(&self.state, &x, true)?;
        if out.logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step + 1 });
        }
        let loss = masked_cross_entropy(&out.logits, &targets, &masks)?;
        let per_photon = loss.per_photon();
        if !per_photon.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1 });
        }
        let grads = backward(&self.state, out.cache.as_ref().expect("train mode"), &loss.grad)?;
        adamw_step(self.state.params_mut(), &grads, &mut self.opt, &self.cfg.optimizer)?;
        self.step += 1;
        self.history.push(HistoryRow {
            epoch: self.epoch + 1,
            step: self.step,
            train_loss: per_photon,
            val_loss: None,
        });
        Ok(per_photon)
    }

    /// Per-photon loss of the current state on the fixed validation set.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let (mut raw, mut weight) = (0.0, 0.0);
        for chunk in self.val.chunks(self.cfg.batch) {
            let chunk: Vec<SplitTriple> = chunk.iter().cloned().map(|t| self.with_mask(t)).collect();
            let inputs: Vec<&BitVolume> = chunk.iter().map(|t| &t.input).collect();
            let targets: Vec<&BitVolume> = chunk.iter().map(|t| &t.target).collect();
            let masks: Vec<&BitVolume> = chunk.iter().map(|t| &t.mask).collect();
            let out = forward(&self.state, &Tensor5::from_bits(&inputs)?, false)?;
            let l = masked_cross_entropy(&out.logits, &targets, &masks)?;
            raw += l.raw;
            weight += l.weight;
        }
        Ok(Some(if weight > 0.0 { raw / weight } else { 0.0 }))
    }

    /// Runs one epoch followed by validation. Returns false once training
    /// should stop.
    pub fn run_epoch(&mut self) -> Result<bool> {
        if self.epoch >= self.cfg.epochs || self.stopped_early {
            return Ok(false);
        }
        for _ in 0..self.cfg.steps_per_epoch {
            self.train_step()?;
        }
        self.epoch += 1;
        if let Some(v) = self.validation_loss()? {
            if let Some(last) = self.history.last_mut() {
                last.val_loss = Some(v);
            }
            if self.best.as_ref().is_none_or(|b| v < b.val_loss) {
                self.best = Some(BestState {
                    state: self.state.clone(),
                    epoch: self.epoch,
                    step: self.step,
                    val_loss: v,
                });
                self.stale = 0;
            } else {
                self.stale += 1;
                if self.cfg.patience.is_some_and(|p| self.stale >= p) {
                    self.stopped_early = true;
                }
            }
        }
        Ok(self.epoch < self.cfg.epochs && !self.stopped_early)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()? {}
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            state: self.state,
            best: self.best,
            history: self.history,
            steps: self.step,
            stopped_early: self.stopped_early,
        }
    }
}

/// Trains from scratch on `data` with the seed in `cfg`.
pub fn train_loop(data: &BitVolume, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, cfg)?;
    trainer.run()?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use crate::volume::Shape3;
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 3,
            batch: 2,
            sampler: SamplerConfig {
                crop: Shape3::new(4, 8, 8).unwrap(),
                ..Default::default()
            },
            model: ModelConfig {
                depth: 2,
                ..Default::default()
            },
            validation: Some(ValidationConfig {
                fraction: 0.25,
                samples: 2,
            }),
            seed: 5,
            ..Default::default()
        }
    }

    fn noise(s: Shape3, rate: f64, seed: u64) -> BitVolume {
        let mut rng = RandomSource::new(seed).rng();
        BitVolume::from_fn(s, |_, _, _| rng.gen::<f64>() < rate)
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 1);
        let out = train_loop(&data, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.state, ModelState::init(&cfg.model, &RandomSource::new(cfg.seed)).unwrap());
    }

    #[test]
    fn history_and_best_are_recorded() {
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 2);
        let out = train_loop(&data, &tiny_cfg()).unwrap();
        assert_eq!(out.history.len(), 6);
        assert_eq!(out.steps, 6);
        assert!(out.history[2].val_loss.is_some() && out.history[1].val_loss.is_none());
        assert!(out.best.is_some());
        let csv = history_csv(&out.history);
        assert!(csv.starts_with("epoch,step,train_loss,val_loss\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn training_is_reproducible() {
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 3);
        let a = train_loop(&data, &tiny_cfg()).unwrap();
        let b = train_loop(&data, &tiny_cfg()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn patience_stops_early() {
        // zero learning rate cannot improve on the first epoch
        let mut cfg = tiny_cfg();
        cfg.epochs = 10;
        cfg.steps_per_epoch = 1;
        cfg.optimizer.lr = 1e-30;
        cfg.optimizer.weight_decay = 0.0;
        cfg.patience = Some(2);
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 4);
        let out = train_loop(&data, &cfg).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.steps, 3);
    }

    #[test]
    fn unmasked_flag_changes_only_the_mask() {
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 6);
        let masked = Trainer::new(&data, &tiny_cfg()).unwrap();
        let unmasked = Trainer::new(
            &data,
            &TrainConfig {
                masked: false,
                ..tiny_cfg()
            },
        )
        .unwrap();
        let (a, b) = (masked.draw_batch().unwrap(), unmasked.draw_batch().unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input, y.input);
            assert_eq!(x.target, y.target);
            assert_eq!(x.mask, x.input.complement());
            assert_eq!(y.mask.popcount(), y.mask.shape().len() as u64);
        }
    }

    #[test]
    fn fixed_pairs_reuse_one_split() {
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.3, 7);
        let cfg = TrainConfig {
            pairs: PairMode::Fixed { p: 0.5 },
            sampler: SamplerConfig {
                crop: Shape3::new(4, 8, 8).unwrap(),
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let mut tr = Trainer::new(&data, &cfg).unwrap();
        let (input, target) = tr.fixed.clone().unwrap();
        for _ in 0..3 {
            for t in tr.draw_batch().unwrap() {
                // every crop is a window of the one fixed split
                let found = (0..=tr.train.shape().t - 4).any(|t0| {
                    let c = crate::volume::CropSpec::new([t0, 0, 0], t.input.shape());
                    input.crop(&c).unwrap() == t.input && target.crop(&c).unwrap() == t.target
                });
                assert!(found);
            }
            tr.step += 1;
        }
    }

    #[test]
    fn bad_configs_rejected() {
        let data = noise(Shape3::new(16, 8, 8).unwrap(), 0.1, 8);
        let mut c = tiny_cfg();
        c.batch = 0;
        assert!(Trainer::new(&data, &c).is_err());
        let mut c = tiny_cfg();
        c.sampler.crop = Shape3::new(4, 7, 8).unwrap();
        assert!(Trainer::new(&data, &c).is_err());
        let mut c = tiny_cfg();
        c.sampler.crop = Shape3::new(10, 8, 8).unwrap();
        assert!(Trainer::new(&data, &c).is_err(), "validation leaves too few frames");
        let json = r#"{"epochs": 1, "bogus": 2}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }
}

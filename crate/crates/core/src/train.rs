//! Optimizer, training loop, checkpoints and single-pair registration.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{load_json, save_json};
use crate::losses::{composite_loss, composite_loss_value};
use crate::metrics::{registration_report, spatial_dims, ssim, RegistrationReport};
use crate::model::NestedMorph;
use crate::nn::ParamStore;
use crate::optim::{optimizer_step, OptimizerState};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{as_channels, warp_trilinear};

pub type NamedGrads<T> = BTreeMap<String, Tensor<T>>;

/// One moving/fixed pair, each `[1, D, H, W]`.
#[derive(Clone, Debug)]
pub struct Pair<T> {
    pub moving: Tensor<T>,
    pub fixed: Tensor<T>,
}

impl<T: Scalar> Pair<T> {
    pub fn new(moving: Tensor<T>, fixed: Tensor<T>) -> Result<Self> {
        let (m, f) = (as_channels(&moving)?, as_channels(&fixed)?);
        if m.shape() != f.shape() || m.shape()[0] != 1 {
            return Err(Error::shape("pair", m.shape(), f.shape()));
        }
        Ok(Self { moving: m, fixed: f })
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.fixed.shape();
        [s[1], s[2], s[3]]
    }
}

/// Seeded shuffle, then the first `round(0.8·n)` (at least one) items
/// train and the rest validate.
pub fn split_train_val<I>(mut items: Vec<I>, seed: u64) -> (Vec<I>, Vec<I>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n = items.len();
    let n_train = ((8 * n + 5) / 10).max(1).min(n);
    let val = items.split_off(n_train);
    (items, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_ssim: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    /// Exact equality including the bit patterns of every value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && [a.train_loss, a.val_loss, a.train_ssim, a.val_ssim]
                        .iter()
                        .zip([b.train_loss, b.val_loss, b.train_ssim, b.val_ssim])
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Everything needed to reproduce a forward pass or resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, StoredTensor>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    /// Spatial extents the model was trained on.
    pub input_shape: Option<[usize; 3]>,
    pub curve: TrainingCurve,
    pub best_val_ssim: Option<f64>,
    pub optimizer: StoredOptimizerState,
}

/// Optimizer moments in checkpoint form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoredOptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, StoredTensor>,
    pub second: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        load_params(&self.params)
    }

    pub fn optimizer_state<T: Scalar>(&self) -> Result<OptimizerState<T>> {
        Ok(OptimizerState {
            step: self.optimizer.step,
            first: load_params(&self.optimizer.first)?,
            second: load_params(&self.optimizer.second)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = load_json(path)?;
        ck.config.validate()?;
        Ok(ck)
    }
}

fn load_params<T: Scalar>(stored: &BTreeMap<String, StoredTensor>) -> Result<ParamStore<T>> {
    let mut store = ParamStore::default();
    for (name, st) in stored {
        let t = Tensor::new(st.shape.clone(), st.data.iter().map(|&v| T::lit(v)).collect())?;
        store.insert(name.clone(), t);
    }
    Ok(store)
}

fn store_optimizer<T: Scalar>(s: &OptimizerState<T>) -> StoredOptimizerState {
    StoredOptimizerState {
        step: s.step,
        first: store_params(&s.first),
        second: store_params(&s.second),
    }
}

fn store_params<T: Scalar>(p: &ParamStore<T>) -> BTreeMap<String, StoredTensor> {
    p.iter()
        .map(|(k, t)| {
            let st = StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            };
            (k.clone(), st)
        })
        .collect()
}

/// Loss and SSIM of one pair under the current parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScore {
    pub loss: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
struct Snapshot<T> {
    params: ParamStore<T>,
    optimizer: OptimizerState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    curve: TrainingCurve,
    val_ssim: f64,
}

/// Stateful trainer: parameters, shuffle RNG and the curve so far.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    model: NestedMorph,
    params: ParamStore<T>,
    optimizer: OptimizerState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    curve: TrainingCurve,
    input_shape: Option<[usize; 3]>,
    best: Option<Snapshot<T>>,
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let model = NestedMorph::new(cfg)?;
        let params = model.init();
        Ok(Self {
            model,
            params,
            optimizer: OptimizerState::default(),
            rng: shuffle_rng(cfg.seed),
            epoch: 0,
            curve: TrainingCurve::default(),
            input_shape: None,
            best: None,
        })
    }

    /// Resumes from a checkpoint; continuing yields the same parameters as
    /// an uninterrupted run. The best-so-far snapshot restarts from the
    /// resumed state, keeping only its validation SSIM.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = NestedMorph::new(&ck.config)?;
        let params = ck.params()?;
        model.check_params(&params)?;
        let optimizer = ck.optimizer_state()?;
        let best = ck.best_val_ssim.map(|v| Snapshot {
            params: params.clone(),
            optimizer: optimizer.clone(),
            rng: ck.rng.clone(),
            epoch: ck.epoch,
            curve: ck.curve.clone(),
            val_ssim: v,
        });
        Ok(Self {
            model,
            params,
            optimizer,
            rng: ck.rng.clone(),
            epoch: ck.epoch,
            curve: ck.curve.clone(),
            input_shape: ck.input_shape,
            best,
        })
    }

    pub fn model(&self) -> &NestedMorph {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn curve(&self) -> &TrainingCurve {
        &self.curve
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn check_shapes(&mut self, pairs: &[Pair<T>]) -> Result<()> {
        for p in pairs {
            let s = p.spatial();
            match self.input_shape {
                None => {
                    self.model.config().encoder.stage_extents(s)?;
                    self.input_shape = Some(s);
                }
                Some(e) if e != s => {
                    return Err(Error::Config(format!(
                        "pair has extents {s:?}, expected {e:?}"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Forward and backward on one pair: loss, SSIM of warped vs fixed, and
    /// parameter gradients.
    pub fn pair_gradients(&self, pair: &Pair<T>) -> Result<(PairScore, NamedGrads<T>)> {
        let cfg = self.model.config();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let m = tape.constant(pair.moving.clone());
        let f = tape.constant(pair.fixed.clone());
        let field = self.model.forward(&mut tape, &p, m, f)?;
        let terms = composite_loss(&mut tape, f, m, field, &cfg.loss)?;
        let loss = tape.value(terms.total).item().as_f64();
        let score = PairScore {
            loss,
            ssim: if loss.is_finite() {
                ssim(tape.value(terms.warped), &pair.fixed)?
            } else {
                f64::NAN
            },
        };
        if !loss.is_finite() {
            return Ok((score, NamedGrads::new()));
        }
        let grads = tape.backward(terms.total)?;
        let named = p
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok((score, named))
    }

    /// Loss and SSIM without gradients.
    pub fn evaluate(&self, pair: &Pair<T>) -> Result<PairScore> {
        let field = self.model.predict(&self.params, &pair.moving, &pair.fixed)?;
        let (loss, _, _) = composite_loss_value(&pair.fixed, &pair.moving, &field, &self.model.config().loss)?;
        let warped = warp_trilinear(&pair.moving, &field)?;
        Ok(PairScore {
            loss,
            ssim: ssim(&warped, &pair.fixed)?,
        })
    }

    /// One pass over shuffled mini-batches followed by validation. An empty
    /// validation set falls back to the training pairs.
    pub fn run_epoch(&mut self, train: &[Pair<T>], val: &[Pair<T>]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::arg("train", "need at least one training pair"));
        }
        self.check_shapes(train)?;
        self.check_shapes(val)?;
        let epoch = self.epoch + 1;
        let opt = self.model.config().optimizer.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);

        let (mut loss_sum, mut ssim_sum) = (0.0, 0.0);
        for batch in order.chunks(opt.batch_size) {
            let mut acc: Option<NamedGrads<T>> = None;
            for &i in batch {
                let (score, grads) = self.pair_gradients(&train[i])?;
                let bad_grad = grads.iter().find(|(_, g)| !g.is_finite()).map(|(n, _)| n.clone());
                if !score.loss.is_finite() || bad_grad.is_some() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch.to_vec(),
                        detail: match bad_grad {
                            Some(n) => format!("pair {i}: non-finite gradient for {n} (loss {})", score.loss),
                            None => format!("pair {i}: loss {}", score.loss),
                        },
                    });
                }
                loss_sum += score.loss;
                ssim_sum += score.ssim;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (k, g) in grads {
                            a.get_mut(&k).expect("same names").add_assign(&g);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("nonempty batch");
            let inv = T::lit(1.0 / batch.len() as f64);
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }
            optimizer_step(
                opt.kind,
                &mut self.params,
                &grads,
                &mut self.optimizer,
                opt.learning_rate,
                opt.weight_decay,
                opt.momentum,
            )?;
        }

        let val = if val.is_empty() { train } else { val };
        let (mut vl, mut vs) = (0.0, 0.0);
        for pair in val {
            let s = self.evaluate(pair).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch,
                    batch: Vec::new(),
                    detail: format!("validation: non-finite {what}"),
                },
                other => other,
            })?;
            vl += s.loss;
            vs += s.ssim;
        }
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_loss: vl / val.len() as f64,
            train_ssim: ssim_sum / n,
            val_ssim: vs / val.len() as f64,
        };
        if !record.val_loss.is_finite() || !record.val_ssim.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: Vec::new(),
                detail: format!("validation produced {record:?}"),
            });
        }
        self.epoch = epoch;
        self.curve.records.push(record.clone());
        if self.best.as_ref().is_none_or(|b| record.val_ssim > b.val_ssim) {
            self.best = Some(Snapshot {
                params: self.params.clone(),
                optimizer: self.optimizer.clone(),
                rng: self.rng.clone(),
                epoch,
                curve: self.curve.clone(),
                val_ssim: record.val_ssim,
            });
        }
        log::info!(
            "epoch {epoch}: train loss {:.5} ssim {:.4} | val loss {:.5} ssim {:.4}",
            record.train_loss,
            record.train_ssim,
            record.val_loss,
            record.val_ssim
        );
        Ok(record)
    }

    /// Runs `epochs` more epochs.
    pub fn fit(&mut self, train: &[Pair<T>], val: &[Pair<T>], epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// State after the latest epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            params: store_params(&self.params),
            epoch: self.epoch,
            rng: self.rng.clone(),
            input_shape: self.input_shape,
            curve: self.curve.clone(),
            best_val_ssim: self.best.as_ref().map(|b| b.val_ssim),
            optimizer: store_optimizer(&self.optimizer),
        }
    }

    /// State at the epoch with the highest validation SSIM so far.
    pub fn best_checkpoint(&self) -> Checkpoint {
        match &self.best {
            None => self.checkpoint(),
            Some(b) => Checkpoint {
                config: self.model.config().clone(),
                params: store_params(&b.params),
                epoch: b.epoch,
                rng: b.rng.clone(),
                input_shape: self.input_shape,
                curve: b.curve.clone(),
                best_val_ssim: Some(b.val_ssim),
                optimizer: store_optimizer(&b.optimizer),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub curve: TrainingCurve,
}

/// Trains for `cfg.optimizer.epochs` epochs from a fresh initialization.
pub fn train<T: Scalar>(cfg: &ModelConfig, train: &[Pair<T>], val: &[Pair<T>]) -> Result<TrainOutcome> {
    let mut t = Trainer::<T>::new(cfg)?;
    t.fit(train, val, cfg.optimizer.epochs)?;
    Ok(TrainOutcome {
        last: t.checkpoint(),
        best: t.best_checkpoint(),
        curve: t.curve.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct Registration<T> {
    pub field: Tensor<T>,
    pub warped: Tensor<T>,
    pub report: RegistrationReport,
}

/// One forward pass of the checkpointed model, the warped moving volume
/// and every metric.
pub fn register<T: Scalar>(ck: &Checkpoint, moving: &Tensor<T>, fixed: &Tensor<T>) -> Result<Registration<T>> {
    let model = NestedMorph::new(&ck.config)?;
    let params = ck.params::<T>()?;
    let pair = Pair::new(moving.clone(), fixed.clone())?;
    let dims = spatial_dims(pair.fixed.shape())?;
    if let Some(expect) = ck.input_shape {
        if dims != expect {
            return Err(Error::Config(format!(
                "volumes have extents {dims:?}, the checkpoint expects [1, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }
    }
    let field = model.predict(&params, &pair.moving, &pair.fixed)?;
    let warped = warp_trilinear(&pair.moving, &field)?;
    let report = registration_report(&pair.fixed, &pair.moving, &warped, &field, &ck.config.loss)?;
    Ok(Registration { field, warped, report })
}

//! SGD training with step-decayed learning rate, dev-set model selection by
//! CIDEr, resumable state, and the learning-rate/decay sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageFeatures, TrainingTuple};
use crate::decoding::{beam_search_batch, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{cider, EvalInstance};
use crate::model::{CaptionModel, Example, Parameters};
use crate::tokenizer::{normalize, Vocab};

pub const PAPER_LEARNING_RATES: [f64; 7] = [0.0016, 0.008, 0.016, 0.048, 0.096, 0.128, 0.16];
pub const PAPER_DECAY_RATES: [f64; 2] = [0.90, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    /// Steps between decays; `None` means one epoch.
    pub decay_every_steps: Option<usize>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every_steps: usize,
    pub rng_seed: u64,
    pub beam_width: usize,
    /// Optional global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.128,
            decay_rate: 0.95,
            decay_every_steps: None,
            batch_size: 64,
            max_steps: 3000,
            eval_every_steps: 500,
            rng_seed: 0,
            beam_width: 5,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Contract(format!("decay rate {} outside (0, 1]", self.decay_rate)));
        }
        if self.batch_size == 0 || self.eval_every_steps == 0 || self.beam_width == 0 {
            return Err(Error::Contract("batch size, eval interval and beam width must be positive".into()));
        }
        if self.decay_every_steps == Some(0) {
            return Err(Error::Contract("decay interval must be positive".into()));
        }
        Ok(())
    }
}

/// `base × decay^(step div every)`.
pub fn learning_rate_at(base: f64, decay: f64, every: usize, step: usize) -> f64 {
    base * decay.powi((step / every.max(1)) as i32)
}

/// A tuple in token form.
#[derive(Clone, Debug)]
pub struct EncodedTuple {
    pub image_id: String,
    pub guiding_text: String,
    pub caption: String,
    pub features: Arc<ImageFeatures>,
    pub guide_ids: Vec<u32>,
    pub caption_ids: Vec<u32>,
}

impl EncodedTuple {
    pub fn example(&self) -> Example<'_> {
        Example { features: &self.features, guide_ids: &self.guide_ids, caption_ids: &self.caption_ids }
    }
}

/// Tokenises tuples; captions are cut to fit `max_caption_len` with BOS.
pub fn encode_tuples(tuples: &[TrainingTuple], vocab: &Vocab, max_caption_len: usize) -> Vec<EncodedTuple> {
    let mut cut = 0;
    let out = tuples
        .iter()
        .map(|t| {
            let mut caption_ids = vocab.encode(&t.caption);
            if caption_ids.len() + 1 > max_caption_len {
                caption_ids.truncate(max_caption_len - 1);
                cut += 1;
            }
            EncodedTuple {
                image_id: t.image_id.clone(),
                guiding_text: t.guiding_text.clone(),
                caption: t.caption.clone(),
                features: Arc::clone(&t.features),
                guide_ids: vocab.encode(&t.guiding_text),
                caption_ids,
            }
        })
        .collect();
    if cut > 0 {
        log::warn!("{cut} captions truncated to {} tokens", max_caption_len - 1);
    }
    out
}

/// One row of the metrics log. `dev_cider` is set on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dev_cider: Option<f64>,
}

pub const LOG_HEADER: &str = "step,loss,lr,dev_cider";

pub fn write_log<W: Write>(w: &mut W, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        let dev = r.dev_cider.map(|c| c.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{dev}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

/// Everything besides the parameters needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub best_dev_cider: Option<f64>,
    pub best_step: Option<usize>,
}

/// Decodes one caption per distinct (image, guide) pair; references are all
/// captions of that pair.
pub fn dev_instances(model: &CaptionModel, vocab: &Vocab, dev: &[EncodedTuple], beam: &BeamConfig) -> Result<Vec<EvalInstance>> {
    let mut groups: BTreeMap<(&str, String), (usize, Vec<&str>)> = BTreeMap::new();
    for (i, t) in dev.iter().enumerate() {
        groups
            .entry((t.image_id.as_str(), normalize(&t.guiding_text)))
            .or_insert((i, Vec::new()))
            .1
            .push(&t.caption);
    }
    let firsts: Vec<usize> = groups.values().map(|(i, _)| *i).collect();
    let items: Vec<(&ImageFeatures, &[u32])> =
        firsts.iter().map(|&i| (&*dev[i].features, dev[i].guide_ids.as_slice())).collect();
    let hyps = beam_search_batch(model, &items, beam)?;
    groups
        .into_iter()
        .zip(hyps)
        .map(|(((image_id, _), (i, refs)), h)| {
            Ok(EvalInstance {
                image_id: image_id.to_string(),
                guiding_text: dev[i].guiding_text.clone(),
                candidate: vocab.decode(h.caption_ids())?,
                references: refs.into_iter().map(str::to_string).collect(),
            })
        })
        .collect()
}

/// Share of tuples whose decoded caption equals the reference after normalisation.
pub fn exact_match_accuracy(model: &CaptionModel, vocab: &Vocab, data: &[EncodedTuple], beam: &BeamConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let items: Vec<(&ImageFeatures, &[u32])> = data.iter().map(|t| (&*t.features, t.guide_ids.as_slice())).collect();
    let hyps = beam_search_batch(model, &items, beam)?;
    let mut hits = 0;
    for (t, h) in data.iter().zip(hyps) {
        if normalize(&vocab.decode(h.caption_ids())?) == normalize(&t.caption) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub model: CaptionModel,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    best: Option<Parameters>,
    train: &'d [EncodedTuple],
    dev: &'d [EncodedTuple],
    vocab: &'d Vocab,
    epoch_cache: Option<(usize, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: CaptionModel,
        cfg: TrainConfig,
        vocab: &'d Vocab,
        train: &'d [EncodedTuple],
        dev: &'d [EncodedTuple],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Shape(format!(
                "vocabulary has {} pieces, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let state = TrainState { step: 0, lr: cfg.learning_rate, best_dev_cider: None, best_step: None };
        Ok(Trainer { cfg, model, state, log: Vec::new(), best: None, train, dev, vocab, epoch_cache: None })
    }

    /// Continues from saved parameters and state.
    pub fn resume(mut self, state: TrainState, best: Option<Parameters>) -> Self {
        self.state = state;
        self.best = best;
        self
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn decay_every(&self) -> usize {
        self.cfg.decay_every_steps.unwrap_or_else(|| self.steps_per_epoch())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        learning_rate_at(self.cfg.learning_rate, self.cfg.decay_rate, self.decay_every(), step)
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            let seed = self.cfg.rng_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    /// Indices of the batch used at `step`; a pure function of seed and step.
    pub fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let per = self.steps_per_epoch();
        let bs = self.cfg.batch_size;
        let k = step % per;
        let order = self.epoch_order(step / per);
        order[k * bs..((k + 1) * bs).min(order.len())].to_vec()
    }

    /// One SGD update. Returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let lr = self.lr_at(step);
        let idx = self.batch_indices(step);
        let batch: Vec<Example<'_>> = idx.iter().map(|&i| self.train[i].example()).collect();
        let (loss, mut grads) = self.model.loss_and_grads(&batch, None)?;
        let non_finite = || Error::NonFinite { step, loss: loss as f32 };
        if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(non_finite());
        }
        let mut scale = lr as f32;
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm > max {
                scale *= (max / norm) as f32;
            }
        }
        for (name, g) in grads.iter_mut() {
            let p = self.model.params.get_mut(name).expect("gradient for a known parameter");
            p.data_mut().iter_mut().zip(g.iter()).for_each(|(w, &d)| *w -= scale * d);
        }
        if !self.model.params.all_finite() {
            return Err(non_finite());
        }
        self.state.step += 1;
        self.state.lr = self.lr_at(self.state.step);
        self.log.push(LogRow { step: self.state.step, loss, lr, dev_cider: None });
        Ok(loss)
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.cfg.beam_width,
            max_len: self.model.config.max_caption_len,
            alpha: 0.0,
        }
    }

    /// Dev CIDEr of the current parameters; keeps them if they are the best so far.
    pub fn evaluate(&mut self) -> Result<Option<f64>> {
        if self.dev.is_empty() {
            return Ok(None);
        }
        let inst = dev_instances(&self.model, self.vocab, self.dev, &self.beam())?;
        let c = cider(&inst)?;
        if self.state.best_dev_cider.is_none_or(|b| c > b) {
            self.state.best_dev_cider = Some(c);
            self.state.best_step = Some(self.state.step);
            self.best = Some(self.model.params.clone());
        }
        if let Some(row) = self.log.last_mut().filter(|r| r.step == self.state.step) {
            row.dev_cider = Some(c);
        }
        Ok(Some(c))
    }

    /// Trains until `max_steps`, evaluating every `eval_every_steps` and at the end.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.max_steps)
    }

    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.state.step < until {
            self.step()?;
            let s = self.state.step;
            if s.is_multiple_of(self.cfg.eval_every_steps) || s == self.cfg.max_steps {
                self.evaluate()?;
            }
        }
        Ok(())
    }

    /// The selected model: best on dev, or the current one when there is no dev set.
    pub fn best_model(&self) -> CaptionModel {
        match &self.best {
            Some(p) => CaptionModel { config: self.model.config.clone(), params: p.clone() },
            None => {
                if self.dev.is_empty() {
                    log::warn!("no dev set: selecting the final parameters");
                }
                CaptionModel { config: self.model.config.clone(), params: self.model.params.clone() }
            }
        }
    }

    pub fn best_params(&self) -> Option<&Parameters> {
        self.best.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub learning_rate: f64,
    pub decay_rate: f64,
    /// `None` when the run aborted on a non-finite value.
    pub dev_cider: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: Option<usize>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str = "learning_rate,decay_rate,dev_cider";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for c in &self.cells {
            let v = c.dev_cider.map_or("nan".to_string(), |x| x.to_string());
            s.push_str(&format!("{},{},{v}\n", c.learning_rate, c.decay_rate));
        }
        s
    }
}

/// Trains every (learning rate, decay) cell, learning rates outermost, from
/// the same initial parameters; picks the cell with the highest dev CIDEr.
pub fn sweep(
    initial: &CaptionModel,
    base: &TrainConfig,
    learning_rates: &[f64],
    decay_rates: &[f64],
    vocab: &Vocab,
    train: &[EncodedTuple],
    dev: &[EncodedTuple],
) -> Result<SweepResult> {
    if learning_rates.is_empty() || decay_rates.is_empty() {
        return Err(Error::Input("sweep grid is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Input("sweep needs a dev set".into()));
    }
    let mut cells = Vec::new();
    for &lr in learning_rates {
        for &decay in decay_rates {
            let cfg = TrainConfig { learning_rate: lr, decay_rate: decay, ..base.clone() };
            let model = CaptionModel { config: initial.config.clone(), params: initial.params.clone() };
            let mut t = Trainer::new(model, cfg, vocab, train, dev)?;
            let dev_cider = match t.run() {
                Ok(()) => t.state.best_dev_cider,
                Err(Error::NonFinite { step, .. }) => {
                    log::warn!("lr {lr}, decay {decay}: non-finite at step {step}");
                    None
                }
                Err(e) => return Err(e),
            };
            cells.push(SweepCell { learning_rate: lr, decay_rate: decay, dev_cider });
        }
    }
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.dev_cider.map(|v| (i, v)))
        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i);
    Ok(SweepResult { cells, best })
}

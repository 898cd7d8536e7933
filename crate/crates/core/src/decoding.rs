//! Beam search, greedy decoding and the copy-the-guide baseline.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageFeatures;
use crate::error::{Error, Result};
use crate::model::CaptionModel;
use crate::numerics::{Graph, Scalar, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Most tokens generated per caption, EOS included.
    pub max_len: usize,
    /// Length normalisation exponent; 0 ranks by raw log-probability.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_width: 5, max_len: 32, alpha: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, alpha: f64) -> f64 {
        if alpha > 0.0 && self.generated() > 0 {
            self.log_prob / (self.generated() as f64).powf(alpha)
        } else {
            self.log_prob
        }
    }

    /// Caption tokens without BOS and EOS.
    pub fn caption_ids(&self) -> &[u32] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

/// Higher score first; equal scores go to the lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .partial_cmp(&a.score(alpha))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|x| x - z).collect()
}

/// Log-probabilities of the next token for each prefix; `owner[i]` picks
/// the encoder memory span of prefix `i`.
fn next_log_probs<T: Scalar>(
    model: &CaptionModel<T>,
    memory: &Tensor<T>,
    spans: &[(usize, usize)],
    prefixes: &[&[u32]],
    owner: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference();
    let b = model.bind(&mut g);
    let mem = g.leaf(memory.clone());
    let mem_spans: Vec<(usize, usize)> = owner.iter().map(|&o| spans[o]).collect();
    let h = model.decode_hidden(&mut g, &b, mem, &mem_spans, prefixes, None)?;
    let mut last = Vec::with_capacity(prefixes.len());
    let mut row = 0;
    for p in prefixes {
        row += p.len();
        last.push(row - 1);
    }
    let h = g.gather(h, &last)?;
    let logits = model.project(&mut g, &b, h)?;
    let v = model.config.vocab_size;
    let vals = g.value(logits);
    Ok((0..prefixes.len())
        .map(|i| {
            let mut lp = log_softmax(&vals[i * v..(i + 1) * v].iter().map(|x| x.as_f64()).collect::<Vec<_>>());
            // never emitted
            lp[PAD as usize] = f64::NEG_INFINITY;
            lp[BOS as usize] = f64::NEG_INFINITY;
            lp
        })
        .collect())
}

fn encode_memory<T: Scalar>(
    model: &CaptionModel<T>,
    items: &[(&ImageFeatures, &[u32])],
) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    let mut g = Graph::inference();
    let b = model.bind(&mut g);
    let input = model.encoder_input(&mut g, &b, items)?;
    let memory = model.encode(&mut g, &b, &input, None)?;
    Ok((g.tensor(memory), input.spans))
}

fn check(model_max: usize, cfg: &BeamConfig) -> Result<()> {
    if cfg.beam_width == 0 || cfg.max_len == 0 {
        return Err(Error::Contract("beam width and max_len must be at least 1".into()));
    }
    if cfg.max_len > model_max {
        return Err(Error::Contract(format!(
            "max_len {} exceeds the model's max_caption_len {model_max}",
            cfg.max_len
        )));
    }
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha {} must be >= 0", cfg.alpha)));
    }
    Ok(())
}

struct Search {
    live: Vec<Hypothesis>,
    finished: Vec<Hypothesis>,
}

impl Search {
    fn done(&self, alpha: f64) -> bool {
        if self.live.is_empty() {
            return true;
        }
        // log-probabilities only fall as tokens are added
        if alpha == 0.0 {
            let best_live = self.live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_done = self.finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            return best_done >= best_live;
        }
        false
    }

    /// Best of the finished hypotheses and those cut off at `max_len`.
    fn best(mut self, alpha: f64, max_len: usize) -> Hypothesis {
        let (cut, rest): (Vec<_>, Vec<_>) = self.live.into_iter().partition(|h| h.generated() == max_len);
        self.finished.extend(cut);
        if self.finished.is_empty() {
            self.finished = rest;
        }
        self.finished.sort_by(|a, b| rank(a, b, alpha));
        self.finished.swap_remove(0)
    }
}

/// Beam search over several inputs at once; one result per input.
pub fn beam_search_batch<T: Scalar>(
    model: &CaptionModel<T>,
    items: &[(&ImageFeatures, &[u32])],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    check(model.config.max_caption_len, cfg)?;
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        out.extend(beam_chunk(model, chunk, cfg)?);
    }
    Ok(out)
}

fn beam_chunk<T: Scalar>(
    model: &CaptionModel<T>,
    items: &[(&ImageFeatures, &[u32])],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    let (memory, spans) = encode_memory(model, items)?;
    let start = Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false };
    let mut searches: Vec<Search> =
        items.iter().map(|_| Search { live: vec![start.clone()], finished: Vec::new() }).collect();
    for _ in 0..cfg.max_len {
        let mut prefixes: Vec<&[u32]> = Vec::new();
        let mut owner = Vec::new();
        for (i, s) in searches.iter().enumerate() {
            if s.done(cfg.alpha) {
                continue;
            }
            for h in &s.live {
                prefixes.push(&h.tokens);
                owner.push(i);
            }
        }
        if prefixes.is_empty() {
            break;
        }
        let lps = next_log_probs(model, &memory, &spans, &prefixes, &owner)?;
        let mut at = 0;
        for (i, s) in searches.iter_mut().enumerate() {
            if owner.get(at) != Some(&i) {
                continue;
            }
            let mut cands: Vec<Hypothesis> = Vec::new();
            for h in &s.live {
                let lp = &lps[at];
                at += 1;
                // only the best `beam_width` tokens of each parent can survive
                let mut order: Vec<usize> = (0..lp.len()).filter(|&t| lp[t].is_finite()).collect();
                order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
                for &t in order.iter().take(cfg.beam_width) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t as u32);
                    cands.push(Hypothesis { tokens, log_prob: h.log_prob + lp[t], finished: t as u32 == EOS });
                }
            }
            cands.sort_by(|a, b| rank(a, b, cfg.alpha));
            cands.truncate(cfg.beam_width);
            let (done, live): (Vec<_>, Vec<_>) = cands.into_iter().partition(|h| h.finished);
            s.finished.extend(done);
            s.live = live;
        }
    }
    Ok(searches.into_iter().map(|s| s.best(cfg.alpha, cfg.max_len)).collect())
}

pub fn beam_search<T: Scalar>(
    model: &CaptionModel<T>,
    features: &ImageFeatures,
    guide_ids: &[u32],
    cfg: &BeamConfig,
) -> Result<Hypothesis> {
    Ok(beam_search_batch(model, &[(features, guide_ids)], cfg)?.remove(0))
}

/// Argmax decoding, lowest token id on ties.
pub fn greedy_decode<T: Scalar>(
    model: &CaptionModel<T>,
    features: &ImageFeatures,
    guide_ids: &[u32],
    max_len: usize,
) -> Result<Hypothesis> {
    check(model.config.max_caption_len, &BeamConfig { beam_width: 1, max_len, alpha: 0.0 })?;
    let (memory, spans) = encode_memory(model, &[(features, guide_ids)])?;
    let mut h = Hypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false };
    while h.generated() < max_len && !h.finished {
        let lp = next_log_probs(model, &memory, &spans, &[&h.tokens], &[0])?.remove(0);
        let mut best = 0;
        for t in 1..lp.len() {
            if lp[t] > lp[best] {
                best = t;
            }
        }
        h.tokens.push(best as u32);
        h.log_prob += lp[best];
        h.finished = best as u32 == EOS;
    }
    Ok(h)
}

/// The guide itself, used as a caption.
pub fn copy_baseline(guide_ids: &[u32]) -> Vec<u32> {
    guide_ids.to_vec()
}

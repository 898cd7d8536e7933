//! The multimodal encoder-decoder Transformer.
//!
//! The encoder reads the enabled inputs as one sequence (global vector,
//! regional rows, guide tokens); the decoder is autoregressive over caption
//! tokens and attends to the encoder output. Token embeddings are shared with
//! the output projection.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{InputFlags, ModelConfig, Segment};
pub use params::Parameters;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ImageFeatures;
use crate::error::{Error, Result};
use crate::numerics::{AttnBlock, Graph, Scalar, Tensor, Var};
use crate::tokenizer::{BOS, EOS, PAD};

/// One training example in token form. `caption_ids` carries no BOS/EOS.
#[derive(Clone, Copy, Debug)]
pub struct Example<'e> {
    pub features: &'e ImageFeatures,
    pub guide_ids: &'e [u32],
    pub caption_ids: &'e [u32],
}

/// Parameter handles of one model inside one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Encoder sequence of a ragged batch. Padded regions are never
/// materialised; `masks` shows where the valid positions sit in the full
/// layout `[G | R_GR × max_regions | R_FRCNN × max_regions | T]`.
pub struct EncoderInput {
    pub hidden: Var,
    /// Row range of each example inside `hidden`.
    pub spans: Vec<(usize, usize)>,
    pub masks: Vec<Vec<bool>>,
}

impl EncoderInput {
    pub fn full_len(&self, i: usize) -> usize {
        self.masks[i].len()
    }
}

/// Sinusoidal encoding of position `p` in `d` dimensions.
pub fn sinusoid(p: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = p as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CaptionModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Parameters<T>,
}

impl<T: Scalar> CaptionModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(CaptionModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(CaptionModel { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> CaptionModel<U> {
        CaptionModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Registers every parameter in `g` as a borrowed leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Bound {
        let vars = self.params.iter().map(|(name, t)| (name.to_string(), g.param(t))).collect();
        Bound { vars }
    }

    fn t(x: f64) -> T {
        T::from_f64_lossy(x)
    }

    fn dropout(&self, g: &mut Graph<'_, T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout as f64;
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = Self::t(1.0 / (1.0 - p));
        let n = g.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let m = g.constant(g.shape(x).to_vec(), mask)?;
        g.mul(x, m)
    }

    fn linear(&self, g: &mut Graph<'_, T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = g.matmul(x, b.get(&format!("{prefix}.w1")))?;
        let h = g.add_row(h, b.get(&format!("{prefix}.b1")))?;
        let h = g.relu(h);
        let h = g.matmul(h, b.get(&format!("{prefix}.w2")))?;
        g.add_row(h, b.get(&format!("{prefix}.b2")))
    }

    fn norm(&self, g: &mut Graph<'_, T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        g.layer_norm(x, b.get(&format!("{prefix}.gain")), b.get(&format!("{prefix}.bias")))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        prefix: &str,
        xq: Var,
        xkv: Var,
        blocks: &[AttnBlock],
        causal: bool,
    ) -> Result<Var> {
        let q = g.matmul(xq, b.get(&format!("{prefix}.wq")))?;
        let k = g.matmul(xkv, b.get(&format!("{prefix}.wk")))?;
        let v = g.matmul(xkv, b.get(&format!("{prefix}.wv")))?;
        let a = g.attention(q, k, v, blocks, self.config.n_heads, causal)?;
        g.matmul(a, b.get(&format!("{prefix}.wo")))
    }

    fn positions(&self, g: &mut Graph<'_, T>, rows: &[Option<usize>]) -> Result<Var> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        for r in rows {
            match r {
                Some(p) => data.extend(cache.entry(*p).or_insert_with(|| sinusoid(*p, d)).iter().map(|&x| Self::t(x))),
                None => data.extend(std::iter::repeat_n(T::zero(), d)),
            }
        }
        g.constant(vec![rows.len(), d], data)
    }

    /// Projects and arranges the enabled inputs of each item into one
    /// encoder sequence with type and position information added.
    pub fn encoder_input(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        items: &[(&ImageFeatures, &[u32])],
    ) -> Result<EncoderInput> {
        let cfg = &self.config;
        let flags = cfg.input_flags;
        let fd = cfg.feature_dims;
        if items.is_empty() {
            return Err(Error::Contract("encoder input needs at least one item".into()));
        }
        for (f, guide) in items {
            let have = f.dims();
            let check = |on: bool, want: usize, got: usize, what: &str| {
                if on && want != got {
                    Err(Error::Shape(format!("{what} width {got} does not match the configured {want}")))
                } else {
                    Ok(())
                }
            };
            check(flags.global, fd.global, have.global, "global feature")?;
            check(flags.regions_gr, fd.regional_gr, have.regional_gr, "R_GR")?;
            check(flags.regions_frcnn, fd.regional_frcnn, have.regional_frcnn, "R_FRCNN")?;
            if (flags.regions_gr || flags.regions_frcnn) && have.max_regions != fd.max_regions {
                return Err(Error::Shape(format!(
                    "{} region rows, configured {}",
                    have.max_regions, fd.max_regions
                )));
            }
            if flags.guide && guide.is_empty() {
                return Err(Error::Contract("guide input enabled but the guide is empty".into()));
            }
        }

        // project each segment for the whole batch at once
        let mut parts: Vec<Var> = Vec::new();
        let mut seg_offset: HashMap<Segment, usize> = HashMap::new();
        let mut total = 0usize;
        let mut add_part = |g: &mut Graph<'_, T>, seg: Segment, v: Var, parts: &mut Vec<Var>| {
            seg_offset.insert(seg, total);
            total += g.shape(v)[0];
            parts.push(v);
        };
        if flags.global {
            let data: Vec<T> = items.iter().flat_map(|(f, _)| f.g.data().iter().map(|&x| Self::t(x as f64))).collect();
            let x = g.constant(vec![items.len(), fd.global], data)?;
            let h = self.linear(g, b, "fc_g", x)?;
            add_part(g, Segment::Global, h, &mut parts);
        }
        for (seg, prefix, on) in [
            (Segment::RegionsGr, "fc_rgr", flags.regions_gr),
            (Segment::RegionsFrcnn, "fc_rfrcnn", flags.regions_frcnn),
        ] {
            if !on {
                continue;
            }
            let width = if seg == Segment::RegionsGr { fd.regional_gr } else { fd.regional_frcnn };
            let mut data = Vec::new();
            for (f, _) in items {
                let t = if seg == Segment::RegionsGr { &f.r_gr } else { &f.r_frcnn };
                data.extend(t.data()[..f.region_count * width].iter().map(|&x| Self::t(x as f64)));
            }
            if data.is_empty() {
                continue;
            }
            let x = g.constant(vec![data.len() / width, width], data)?;
            let h = self.linear(g, b, prefix, x)?;
            add_part(g, seg, h, &mut parts);
        }
        if flags.guide {
            let ids: Vec<u32> = items.iter().flat_map(|(_, t)| t.iter().copied()).collect();
            let e = g.embedding(b.get("embed.tokens"), &ids)?;
            let e = g.scale(e, Self::t((cfg.d_model as f64).sqrt()));
            add_part(g, Segment::Guide, e, &mut parts);
        }

        // interleave per item: G, R_GR rows, R_FRCNN rows, T tokens
        let mut order = Vec::new();
        let mut types = Vec::new();
        let mut pos: Vec<Option<usize>> = Vec::new();
        let mut spans = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        let mut region_cursor = 0usize;
        let mut guide_cursor = 0usize;
        for (i, (f, guide)) in items.iter().enumerate() {
            let start = order.len();
            let mut mask = Vec::with_capacity(cfg.encoder_len(guide.len()));
            if flags.global {
                order.push(seg_offset[&Segment::Global] + i);
                types.push(Segment::Global.type_id());
                pos.push(None);
                mask.push(true);
            }
            for seg in [Segment::RegionsGr, Segment::RegionsFrcnn] {
                if !flags.has(seg) {
                    continue;
                }
                for r in 0..f.region_count {
                    order.push(seg_offset[&seg] + region_cursor + r);
                    types.push(seg.type_id());
                    pos.push(Some(r));
                }
                mask.extend((0..fd.max_regions).map(|r| r < f.region_count));
            }
            region_cursor += f.region_count;
            if flags.guide {
                for p in 0..guide.len() {
                    order.push(seg_offset[&Segment::Guide] + guide_cursor + p);
                    types.push(Segment::Guide.type_id());
                    pos.push(Some(p));
                }
                guide_cursor += guide.len();
                mask.extend(std::iter::repeat_n(true, guide.len()));
            }
            if order.len() == start {
                return Err(Error::Contract(format!("item {i} has no valid encoder positions")));
            }
            spans.push((start, order.len() - start));
            masks.push(mask);
        }
        let cat = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let x = g.gather(cat, &order)?;
        let te = g.gather(b.get("embed.types"), &types)?;
        let x = g.add(x, te)?;
        let pe = self.positions(g, &pos)?;
        let hidden = g.add(x, pe)?;
        Ok(EncoderInput { hidden, spans, masks })
    }

    /// Runs the encoder stack; returns the normalised memory rows.
    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        input: &EncoderInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let blocks: Vec<AttnBlock> = input
            .spans
            .iter()
            .map(|&(s, n)| AttnBlock { q_start: s, q_len: n, k_start: s, k_len: n })
            .collect();
        let mut x = self.dropout(g, input.hidden, rng.as_deref_mut())?;
        for l in 0..self.config.n_layers {
            let p = format!("enc.{l}");
            let h = self.norm(g, b, &format!("{p}.ln_attn"), x)?;
            let a = self.attend(g, b, &format!("{p}.self"), h, h, &blocks, false)?;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("{p}.ln_ff"), x)?;
            let f = self.linear(g, b, &format!("{p}.ff"), h)?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        self.norm(g, b, "enc.ln_out", x)
    }

    /// Runs the decoder over `inputs` (each starting with BOS). Sequence `i`
    /// attends to memory rows `memory_spans[i]`. Returns the final hidden rows.
    pub fn decode_hidden(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        memory: Var,
        memory_spans: &[(usize, usize)],
        inputs: &[&[u32]],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if inputs.len() != memory_spans.len() || inputs.is_empty() {
            return Err(Error::Contract(format!(
                "{} decoder inputs for {} memory spans",
                inputs.len(),
                memory_spans.len()
            )));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut self_blocks = Vec::with_capacity(inputs.len());
        let mut cross_blocks = Vec::with_capacity(inputs.len());
        for (seq, &(ms, ml)) in inputs.iter().zip(memory_spans) {
            if seq.is_empty() || seq.len() > cfg.max_caption_len {
                return Err(Error::Contract(format!(
                    "decoder input of length {} outside 1..={}",
                    seq.len(),
                    cfg.max_caption_len
                )));
            }
            let start = ids.len();
            ids.extend_from_slice(seq);
            pos.extend((0..seq.len()).map(Some));
            self_blocks.push(AttnBlock { q_start: start, q_len: seq.len(), k_start: start, k_len: seq.len() });
            cross_blocks.push(AttnBlock { q_start: start, q_len: seq.len(), k_start: ms, k_len: ml });
        }
        let e = g.embedding(b.get("embed.tokens"), &ids)?;
        let e = g.scale(e, Self::t((cfg.d_model as f64).sqrt()));
        let pe = self.positions(g, &pos)?;
        let x = g.add(e, pe)?;
        let mut x = self.dropout(g, x, rng.as_deref_mut())?;
        for l in 0..cfg.n_layers {
            let p = format!("dec.{l}");
            let h = self.norm(g, b, &format!("{p}.ln_self"), x)?;
            let a = self.attend(g, b, &format!("{p}.self"), h, h, &self_blocks, true)?;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("{p}.ln_cross"), x)?;
            let a = self.attend(g, b, &format!("{p}.cross"), h, memory, &cross_blocks, false)?;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("{p}.ln_ff"), x)?;
            let f = self.linear(g, b, &format!("{p}.ff"), h)?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        self.norm(g, b, "dec.ln_out", x)
    }

    /// Vocabulary logits through the shared embedding table.
    pub fn project(&self, g: &mut Graph<'_, T>, b: &Bound, hidden: Var) -> Result<Var> {
        g.matmul_t(hidden, b.get("embed.tokens"))
    }

    /// Mean token cross-entropy of a batch, predicting `caption + EOS` from
    /// `BOS + caption`.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        batch: &[Example<'_>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let items: Vec<(&ImageFeatures, &[u32])> = batch.iter().map(|e| (e.features, e.guide_ids)).collect();
        let enc = self.encoder_input(g, b, &items)?;
        let memory = self.encode(g, b, &enc, rng.as_deref_mut())?;
        let inputs: Vec<Vec<u32>> = batch
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.caption_ids.iter().copied()).collect())
            .collect();
        let targets: Vec<u32> = batch
            .iter()
            .flat_map(|e| e.caption_ids.iter().copied().chain(std::iter::once(EOS)))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let h = self.decode_hidden(g, b, memory, &enc.spans, &refs, rng)?;
        let logits = self.project(g, b, h)?;
        g.cross_entropy(logits, &targets, PAD)
    }

    /// Loss of a batch without recording gradients.
    pub fn loss(&self, batch: &[Example<'_>]) -> Result<f64> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let l = self.batch_loss(&mut g, &b, batch, None)?;
        Ok(g.value(l)[0].as_f64())
    }

    /// Loss and the gradient of every parameter, keyed by name.
    pub fn loss_and_grads(
        &self,
        batch: &[Example<'_>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<(String, Vec<T>)>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let l = self.batch_loss(&mut g, &b, batch, rng)?;
        g.backward(l)?;
        let loss = g.value(l)[0].as_f64();
        let mut grads = Vec::with_capacity(self.params.len());
        for (name, _) in self.params.iter() {
            let v = b.get(name);
            let grad = g.take_grad(v).unwrap_or_else(|| vec![T::zero(); g.value(v).len()]);
            grads.push((name.to_string(), grad));
        }
        Ok((loss, grads))
    }

    /// Teacher-forced logits `[len(caption_in) × V]` for one example.
    pub fn forward(&self, features: &ImageFeatures, guide_ids: &[u32], caption_in: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let enc = self.encoder_input(&mut g, &b, &[(features, guide_ids)])?;
        let memory = self.encode(&mut g, &b, &enc, None)?;
        let h = self.decode_hidden(&mut g, &b, memory, &enc.spans, &[caption_in], None)?;
        let logits = self.project(&mut g, &b, h)?;
        Ok(g.tensor(logits))
    }
}

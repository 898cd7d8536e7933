//! Training tuples, guiding-text extraction and filtering, the synthetic
//! feature world, and corpus statistics.

mod io;
mod stats;
mod synth;

pub use io::{load_tuples, read_guide_file, save_tuples, write_guide_file, GuideEntry, MAX_GUIDES_PER_IMAGE};
pub use stats::{compute_corpus_stats, compute_overlap, CorpusStats, OverlapStats};
pub use synth::{generate_synthetic_corpus, split_by_image, SyntheticWorldSpec, ATTRIBUTE_WORDS, OBJECT_WORDS, PLACE_WORDS, RELATION_WORDS};

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::words;

/// Feature widths of one image. Defaults are the production extractor sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub global: usize,
    pub regional_gr: usize,
    pub regional_frcnn: usize,
    pub max_regions: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            global: 64,
            regional_gr: 64,
            regional_frcnn: 2048,
            max_regions: 16,
        }
    }
}

/// Precomputed image features: one global vector and two sets of regional
/// rows, zero-padded past `region_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub g: Tensor,
    pub r_gr: Tensor,
    pub r_frcnn: Tensor,
    pub region_count: usize,
}

impl ImageFeatures {
    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            global: self.g.len(),
            regional_gr: *self.r_gr.shape().last().unwrap_or(&0),
            regional_frcnn: *self.r_frcnn.shape().last().unwrap_or(&0),
            max_regions: self.r_gr.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.g.rank() != 1
            || self.r_gr.shape() != [d.max_regions, d.regional_gr]
            || self.r_frcnn.shape() != [d.max_regions, d.regional_frcnn]
        {
            return Err(Error::Shape(format!(
                "inconsistent feature shapes g {:?}, r_gr {:?}, r_frcnn {:?}",
                self.g.shape(),
                self.r_gr.shape(),
                self.r_frcnn.shape()
            )));
        }
        if self.region_count > d.max_regions {
            return Err(Error::Shape(format!(
                "{} regions exceed the {} available rows",
                self.region_count, d.max_regions
            )));
        }
        let padded_zero = |t: &Tensor| (self.region_count..d.max_regions).all(|r| t.row(r).iter().all(|&x| x == 0.0));
        if !padded_zero(&self.r_gr) || !padded_zero(&self.r_frcnn) {
            return Err(Error::Contract("padding rows must be zero".into()));
        }
        Ok(())
    }

    /// Number of valid rows, recovered from the zero padding.
    pub fn infer_region_count(r_gr: &Tensor, r_frcnn: &Tensor) -> usize {
        let rows = r_gr.shape()[0];
        (0..rows)
            .rev()
            .find(|&r| r_gr.row(r).iter().chain(r_frcnn.row(r)).any(|&x| x != 0.0))
            .map_or(0, |r| r + 1)
    }
}

/// One ⟨image, guiding text, caption⟩ example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    pub image_id: String,
    pub features: Arc<ImageFeatures>,
    pub guiding_text: String,
    pub caption: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WordClass {
    Break,
    Other,
}

fn function_words() -> &'static HashMap<&'static str, WordClass> {
    static WORDS: OnceLock<HashMap<&'static str, WordClass>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("function_words.txt")
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let (w, class) = l.split_once(' ').expect("word and class");
                let class = if class == "break" { WordClass::Break } else { WordClass::Other };
                (w, class)
            })
            .collect()
    })
}

pub fn is_function_word(w: &str) -> bool {
    function_words().contains_key(w)
}

/// Salient span of a caption: the longest run of content words before the
/// first verb or preposition (earliest on ties), else the first content word.
pub fn extract_guiding_text(caption: &str) -> Result<String> {
    let toks = words(caption);
    let table = function_words();
    let stop = toks
        .iter()
        .position(|t| table.get(t.as_str()) == Some(&WordClass::Break))
        .unwrap_or(toks.len());
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < stop {
        if table.contains_key(toks[i].as_str()) {
            i += 1;
            continue;
        }
        let start = i;
        while i < stop && !table.contains_key(toks[i].as_str()) {
            i += 1;
        }
        if best.is_none_or(|(s, e)| i - start > e - s) {
            best = Some((start, i));
        }
    }
    if let Some((s, e)) = best {
        return Ok(toks[s..e].join(" "));
    }
    toks.iter()
        .find(|t| !table.contains_key(t.as_str()))
        .cloned()
        .ok_or_else(|| Error::Extraction(caption.to_string()))
}

/// Whether `needle`'s normalised tokens occur contiguously in `haystack`'s.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let h = words(haystack);
    let n = words(needle);
    !n.is_empty() && h.windows(n.len()).any(|w| w == n.as_slice())
}

/// Keeps tuples whose guiding text appears verbatim in the caption.
pub fn text_match_filter(tuples: &[TrainingTuple]) -> Vec<TrainingTuple> {
    tuples
        .iter()
        .filter(|t| contains_phrase(&t.caption, &t.guiding_text))
        .cloned()
        .collect()
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::TrainingTuple;
use crate::error::{Error, Result};
use crate::tokenizer::{normalize, words};

/// Dataset-level counts, guide-length distribution and guide entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_images: usize,
    pub n_tuples: usize,
    pub n_unique_guiding_texts: usize,
    pub n_unique_tokens: usize,
    /// Fractions of guides with 1, 2 and 3+ whitespace tokens.
    pub guide_length_hist: [f64; 3],
    pub guide_entropy_bits: f64,
}

impl CorpusStats {
    pub const CSV_HEADER: &'static str = "n_images,n_tuples,n_unique_guiding_texts,n_unique_tokens,\
guide_length_hist_1,guide_length_hist_2,guide_length_hist_3plus,guide_entropy_bits";

    pub fn to_csv(&self) -> String {
        let h = self.guide_length_hist;
        format!(
            "{}\n{},{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.n_images,
            self.n_tuples,
            self.n_unique_guiding_texts,
            self.n_unique_tokens,
            h[0],
            h[1],
            h[2],
            self.guide_entropy_bits
        )
    }
}

/// Shannon entropy in bits of an empirical distribution given by counts.
pub(crate) fn entropy_bits<'a>(counts: impl IntoIterator<Item = &'a usize>) -> f64 {
    let counts: Vec<usize> = counts.into_iter().copied().collect();
    let total = counts.iter().sum::<usize>() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

pub fn compute_corpus_stats(tuples: &[TrainingTuple]) -> Result<CorpusStats> {
    if tuples.is_empty() {
        return Err(Error::Input("statistics need at least one tuple".into()));
    }
    let images: BTreeSet<&str> = tuples.iter().map(|t| t.image_id.as_str()).collect();
    let mut guide_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    let mut lengths = [0usize; 3];
    for t in tuples {
        let g = words(&t.guiding_text);
        lengths[g.len().clamp(1, 3) - 1] += 1;
        tokens.extend(g);
        tokens.extend(words(&t.caption));
        *guide_counts.entry(normalize(&t.guiding_text)).or_default() += 1;
    }
    let n = tuples.len() as f64;
    Ok(CorpusStats {
        n_images: images.len(),
        n_tuples: tuples.len(),
        n_unique_guiding_texts: guide_counts.len(),
        n_unique_tokens: tokens.len(),
        guide_length_hist: lengths.map(|c| c as f64 / n),
        guide_entropy_bits: entropy_bits(guide_counts.values()),
    })
}

/// How much of a test guide set was already seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub n_unique_test_guides: usize,
    pub pct_guides_seen_in_train: f64,
    pub n_unique_test_guide_tokens: usize,
    pub pct_tokens_seen_in_train: f64,
}

impl OverlapStats {
    pub const CSV_HEADER: &'static str =
        "n_unique_test_guides,pct_guides_seen_in_train,n_unique_test_guide_tokens,pct_tokens_seen_in_train";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{}\n",
            Self::CSV_HEADER,
            self.n_unique_test_guides,
            self.pct_guides_seen_in_train,
            self.n_unique_test_guide_tokens,
            self.pct_tokens_seen_in_train
        )
    }
}

pub fn compute_overlap<S: AsRef<str>>(train: &[TrainingTuple], test_guides: &[S]) -> Result<OverlapStats> {
    if test_guides.is_empty() {
        return Err(Error::Input("overlap needs at least one test guide".into()));
    }
    let train_guides: BTreeSet<String> = train.iter().map(|t| normalize(&t.guiding_text)).collect();
    let train_tokens: BTreeSet<String> = train_guides.iter().flat_map(|g| words(g)).collect();
    let test: BTreeSet<String> = test_guides.iter().map(|g| normalize(g.as_ref())).collect();
    let test_tokens: BTreeSet<String> = test.iter().flat_map(|g| words(g)).collect();
    let pct = |hit: usize, total: usize| if total == 0 { 0.0 } else { 100.0 * hit as f64 / total as f64 };
    Ok(OverlapStats {
        n_unique_test_guides: test.len(),
        pct_guides_seen_in_train: pct(test.iter().filter(|g| train_guides.contains(*g)).count(), test.len()),
        n_unique_test_guide_tokens: test_tokens.len(),
        pct_tokens_seen_in_train: pct(
            test_tokens.iter().filter(|t| train_tokens.contains(*t)).count(),
            test_tokens.len(),
        ),
    })
}

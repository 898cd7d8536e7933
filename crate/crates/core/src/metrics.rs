//! Caption metrics: CIDEr, ROUGE-L, METEOR (exact-match stage only),
//! Div-n and verbatim guide presence, plus report formatting.
//!
//! All metrics work on normalised whitespace words. Instances are put in a
//! canonical order before any reduction, so results do not depend on input
//! order down to the last bit.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::contains_phrase;
use crate::error::{Error, Result};
use crate::tokenizer::words;

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const CIDER_MAX_N: usize = 4;

/// One candidate caption with its references.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvalInstance {
    pub image_id: String,
    pub guiding_text: String,
    pub candidate: String,
    pub references: Vec<String>,
}

impl EvalInstance {
    pub fn new(image_id: &str, guiding_text: &str, candidate: &str, references: &[&str]) -> Self {
        EvalInstance {
            image_id: image_id.into(),
            guiding_text: guiding_text.into(),
            candidate: candidate.into(),
            references: references.iter().map(|r| r.to_string()).collect(),
        }
    }
}

struct Tokenized {
    cand: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn prepare(instances: &[EvalInstance]) -> Result<Vec<Tokenized>> {
    if instances.is_empty() {
        return Err(Error::Input("no instances to evaluate".into()));
    }
    let mut sorted: Vec<&EvalInstance> = instances.iter().collect();
    sorted.sort();
    sorted
        .into_iter()
        .map(|inst| {
            let refs: Vec<Vec<String>> = inst.references.iter().map(|r| words(r)).collect();
            if refs.is_empty() || refs.iter().any(Vec::is_empty) {
                return Err(Error::Input(format!(
                    "instance `{}` / `{}` needs at least one non-empty reference",
                    inst.image_id, inst.guiding_text
                )));
            }
            Ok(Tokenized { cand: words(&inst.candidate), refs })
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(toks: &[String], n: usize) -> Counts<'_> {
    let mut c = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *c.entry(w).or_insert(0) += 1;
        }
    }
    c
}

/// Cosine of the TF-IDF vectors of two n-gram count maps. Identical
/// non-empty count maps score exactly 1, even when every weight is zero.
fn tfidf_cosine(a: &Counts<'_>, b: &Counts<'_>, idf: &dyn Fn(&[String]) -> f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let norm = |c: &Counts<'_>| c.iter().map(|(g, &k)| (k as f64 * idf(g)).powi(2)).sum::<f64>();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &ka)| b.get(g).map(|&kb| (ka * kb) as f64 * idf(g).powi(2)))
        .sum();
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

/// Consensus CIDEr, ×10 scale, IDF from the evaluation set's references.
pub fn cider(instances: &[EvalInstance]) -> Result<f64> {
    let data = prepare(instances)?;
    let n_docs = data.len() as f64;
    let mut per_instance = vec![0.0; data.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for t in &data {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in &t.refs {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (t, score) in data.iter().zip(per_instance.iter_mut()) {
            let c = ngram_counts(&t.cand, n);
            let m = mean(t.refs.iter().map(|r| tfidf_cosine(&c, &ngram_counts(r, n), &idf)));
            *score += m;
        }
    }
    Ok(mean(per_instance.into_iter().map(|s| s * 10.0 / CIDER_MAX_N as f64)))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one candidate against one reference.
pub fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let denom = r + b2 * p;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

/// Mean over instances of the best ROUGE-L over references.
pub fn rouge_l(instances: &[EvalInstance]) -> Result<f64> {
    let data = prepare(instances)?;
    Ok(mean(data.iter().map(|t| {
        t.refs.iter().map(|r| rouge_l_pair(&t.cand, r)).fold(0.0, f64::max)
    })))
}

/// Exact-match alignment with the most matches and, among those, the fewest
/// chunks. Returns `(matches, chunks)`.
pub fn align(cand: &[String], reference: &[String]) -> (usize, usize) {
    // reference positions that can match anything in the candidate
    let slots: Vec<usize> = (0..reference.len()).filter(|&j| cand.contains(&reference[j])).collect();
    if slots.is_empty() {
        return (0, 0);
    }
    if slots.len() > 64 {
        return align_greedy(cand, reference);
    }
    let options: Vec<Vec<usize>> = cand
        .iter()
        .map(|w| (0..slots.len()).filter(|&s| &reference[slots[s]] == w).collect())
        .collect();
    let mut memo: HashMap<(usize, u64, Option<usize>), (usize, usize)> = HashMap::new();
    // best (matches, chunks) for cand[i..] given used slots and the ref
    // position cand[i-1] was aligned to
    fn go(
        i: usize,
        used: u64,
        prev: Option<usize>,
        options: &[Vec<usize>],
        slots: &[usize],
        memo: &mut HashMap<(usize, u64, Option<usize>), (usize, usize)>,
    ) -> (usize, usize) {
        if i == options.len() {
            return (0, 0);
        }
        if let Some(&r) = memo.get(&(i, used, prev)) {
            return r;
        }
        let better = |a: (usize, usize), b: (usize, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
        let mut best = go(i + 1, used, None, options, slots, memo);
        for &s in &options[i] {
            if used & (1 << s) != 0 {
                continue;
            }
            let j = slots[s];
            let (m, c) = go(i + 1, used | (1 << s), Some(j), options, slots, memo);
            let new_chunk = usize::from(prev.is_none_or(|p| p + 1 != j));
            let cand = (m + 1, c + new_chunk);
            if better(cand, best) {
                best = cand;
            }
        }
        memo.insert((i, used, prev), best);
        best
    }
    go(0, 0, None, &options, &slots, &mut memo)
}

fn align_greedy(cand: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut m, mut chunks) = (0, 0);
    for w in cand {
        let follow = prev.map(|p| p + 1).filter(|&j| j < reference.len() && !used[j] && &reference[j] == w);
        let pick = follow.or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == w));
        match pick {
            Some(j) => {
                if follow.is_none() {
                    chunks += 1;
                }
                used[j] = true;
                m += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (m, chunks)
}

/// METEOR of one pair, exact-match stage only.
pub fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite(instances: &[EvalInstance]) -> Result<f64> {
    let data = prepare(instances)?;
    Ok(mean(data.iter().map(|t| {
        t.refs.iter().map(|r| meteor_pair(&t.cand, r)).fold(0.0, f64::max)
    })))
}

/// Distinct over total n-grams in one group of captions; `None` if the
/// group has no n-grams at all.
pub fn ngram_diversity<S: AsRef<str>>(captions: &[S], n: usize) -> Option<f64> {
    let toks: Vec<Vec<String>> = captions.iter().map(|c| words(c.as_ref())).collect();
    let mut distinct: HashMap<&[String], ()> = HashMap::new();
    let mut total = 0usize;
    for t in &toks {
        if n == 0 || t.len() < n {
            continue;
        }
        for w in t.windows(n) {
            distinct.insert(w, ());
            total += 1;
        }
    }
    (total > 0).then(|| distinct.len() as f64 / total as f64)
}

/// Mean Div-n over images, grouping candidates by image id.
pub fn diversity(instances: &[EvalInstance], n: usize) -> f64 {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut sorted: Vec<&EvalInstance> = instances.iter().collect();
    sorted.sort();
    for inst in sorted {
        groups.entry(&inst.image_id).or_default().push(&inst.candidate);
    }
    mean(groups.values().filter_map(|caps| ngram_diversity(caps, n)))
}

/// Percentage of instances whose guide appears verbatim in the candidate.
pub fn presence_verbatim(instances: &[EvalInstance]) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = instances.iter().filter(|i| contains_phrase(&i.candidate, &i.guiding_text)).count();
    100.0 * hits as f64 / instances.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub div1: f64,
    pub div2: f64,
    pub presence_verbatim_pct: f64,
    pub n_instances: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "system,cider,rouge_l,meteor,div1,div2,presence_verbatim_pct,n_instances";

    pub fn compute(instances: &[EvalInstance]) -> Result<Self> {
        Ok(EvalReport {
            cider: cider(instances)?,
            rouge_l: rouge_l(instances)?,
            meteor: meteor_lite(instances)?,
            div1: diversity(instances, 1),
            div2: diversity(instances, 2),
            presence_verbatim_pct: presence_verbatim(instances),
            n_instances: instances.len(),
        })
    }

    pub fn csv_row(&self, system: &str) -> String {
        format!(
            "{system},{},{},{},{},{},{},{}",
            self.cider, self.rouge_l, self.meteor, self.div1, self.div2, self.presence_verbatim_pct, self.n_instances
        )
    }
}

pub fn reports_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&r.csv_row(name));
        out.push('\n');
    }
    out
}

/// Two Markdown tables: accuracy metrics, then diversity and guide presence.
pub fn reports_markdown(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str("| System | CIDEr | ROUGE-L | METEOR |\n|---|---:|---:|---:|\n");
    for (name, r) in rows {
        out.push_str(&format!("| {name} | {:.3} | {:.3} | {:.3} |\n", r.cider, r.rouge_l, r.meteor));
    }
    out.push_str("\nSPICE is not computed. METEOR uses exact matches only.\n\n");
    out.push_str("| System | Div-1 | Div-2 | T ∈ cap? (%) |\n|---|---:|---:|---:|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name} | {:.3} | {:.3} | {:.1} |\n",
            r.div1, r.div2, r.presence_verbatim_pct
        ));
    }
    out
}

pub fn write_instances(path: &Path, instances: &[EvalInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serialises");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<EvalInstance>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: EvalInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if inst.references.is_empty() {
            return Err(Error::Parse { path: path.to_path_buf(), line: i + 1, msg: "no references".into() });
        }
        out.push(inst);
    }
    Ok(out)
}

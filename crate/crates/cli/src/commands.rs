use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guidecap::corpus::{
    compute_corpus_stats, compute_overlap, generate_synthetic_corpus, load_tuples, read_guide_file, save_tuples,
    split_by_image, write_guide_file, CorpusStats, GuideEntry, ImageFeatures, OverlapStats, TrainingTuple,
    MAX_GUIDES_PER_IMAGE,
};
use guidecap::decoding::{beam_search_batch, copy_baseline};
use guidecap::metrics::{read_instances, reports_csv, reports_markdown, write_instances, EvalInstance, EvalReport};
use guidecap::model::{load_checkpoint, save_checkpoint, CaptionModel};
use guidecap::tokenizer::{normalize, Vocab, DEFAULT_VOCAB_SIZE};
use guidecap::training::{
    encode_tuples, sweep, write_log, TrainConfig, Trainer, PAPER_DECAY_RATES, PAPER_LEARNING_RATES,
};
use guidecap::Error;
use serde::Serialize;
use serde_json::json;

use crate::args::{DecodeArgs, EvalArgs, StatsArgs, SweepArgs, SynthArgs, TrainArgs, VocabArgs};
use crate::config::{parse_ablation, parse_floats, resolve_beam, resolve_model, resolve_synth, resolve_train, FileConfig};
use crate::error::{io_err, CliError};
use crate::manifest::RunManifest;

type Result<T> = std::result::Result<T, CliError>;

pub struct Ctx {
    pub file: FileConfig,
    pub out: PathBuf,
    pub force: bool,
    pub manifest: RunManifest,
}

impl Ctx {
    /// Creates the output directory, refusing a non-empty one without --force.
    pub fn prepare(&self) -> Result<()> {
        if let Ok(mut entries) = fs::read_dir(&self.out) {
            if entries.next().is_some() && !self.force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    self.out.display()
                )));
            }
        }
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
        self.manifest.output(name);
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.manifest.write(&self.out)
    }
}

fn spec_as_usage(e: Error) -> CliError {
    match e {
        Error::Spec(m) => CliError::Usage(m),
        other => CliError::Data(other),
    }
}

fn load_nonempty(path: &Path, what: &str) -> Result<Vec<TrainingTuple>> {
    let t = load_tuples(path)?;
    if t.is_empty() {
        return Err(Error::Input(format!("{what} file {} has no tuples", path.display())).into());
    }
    Ok(t)
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("rows serialize") + "\n").collect()
}

/// First-seen order of images with their distinct guides, capped at six.
fn guide_entries(tuples: &[TrainingTuple]) -> Vec<GuideEntry> {
    let mut out: Vec<GuideEntry> = Vec::new();
    for t in tuples {
        if out.last().map(|e| e.image_id != t.image_id).unwrap_or(true) {
            out.push(GuideEntry { image_id: t.image_id.clone(), guides: Vec::new() });
        }
        let e = out.last_mut().expect("pushed above");
        let g = normalize(&t.guiding_text);
        if e.guides.len() < MAX_GUIDES_PER_IMAGE && !e.guides.contains(&g) {
            e.guides.push(g);
        }
    }
    out
}

fn stats_markdown(s: &CorpusStats, o: Option<&OverlapStats>) -> String {
    let mut md = String::new();
    md.push_str("| Images | Tuples | Unique guiding texts | Unique tokens | Guide entropy (bits) |\n");
    md.push_str("|---:|---:|---:|---:|---:|\n");
    md.push_str(&format!(
        "| {} | {} | {} | {} | {:.3} |\n\n",
        s.n_images, s.n_tuples, s.n_unique_guiding_texts, s.n_unique_tokens, s.guide_entropy_bits
    ));
    md.push_str("| Guide length | 1 | 2 | 3+ |\n|---|---:|---:|---:|\n");
    let h = s.guide_length_hist;
    md.push_str(&format!("| Share (%) | {:.1} | {:.1} | {:.1} |\n", 100.0 * h[0], 100.0 * h[1], 100.0 * h[2]));
    if let Some(o) = o {
        md.push_str("\n| | Unique in test | Seen in train (%) |\n|---|---:|---:|\n");
        md.push_str(&format!("| Guiding texts | {} | {:.1} |\n", o.n_unique_test_guides, o.pct_guides_seen_in_train));
        md.push_str(&format!("| Tokens | {} | {:.1} |\n", o.n_unique_test_guide_tokens, o.pct_tokens_seen_in_train));
    }
    md
}

pub fn synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let cfg = resolve_synth(&ctx.file, a)?;
    let tuples = generate_synthetic_corpus(&cfg.world, cfg.n_images, cfg.guides_per_image).map_err(spec_as_usage)?;
    ctx.prepare()?;
    let parts = split_by_image(&tuples, &cfg.split);
    for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
        save_tuples(part, &ctx.path(&format!("{name}.jsonl")))?;
        ctx.manifest.output(&format!("{name}.jsonl"));
        ctx.manifest.output(&format!("{name}.features.gten"));
    }
    let guides = guide_entries(&parts[2]);
    write_guide_file(&ctx.path("test_guides.tsv"), &guides)?;
    ctx.manifest.output("test_guides.tsv");

    let stats = compute_corpus_stats(&parts[0])?;
    ctx.write("stats.csv", &stats.to_csv())?;
    let test_guides: Vec<&str> = guides.iter().flat_map(|e| e.guides.iter().map(String::as_str)).collect();
    let overlap = if test_guides.is_empty() { None } else { Some(compute_overlap(&parts[0], &test_guides)?) };
    if let Some(o) = &overlap {
        ctx.write("overlap.csv", &o.to_csv())?;
    }
    print!("{}", stats_markdown(&stats, overlap.as_ref()));
    ctx.manifest.rng_seed = Some(cfg.world.rng_seed);
    ctx.manifest.config(&cfg);
    Ok(())
}

pub fn vocab(ctx: &mut Ctx, a: &VocabArgs) -> Result<()> {
    let tuples = load_nonempty(&a.train, "training")?;
    let size = a.size.unwrap_or(DEFAULT_VOCAB_SIZE);
    let text: Vec<&str> = tuples.iter().flat_map(|t| [t.caption.as_str(), t.guiding_text.as_str()]).collect();
    let vocab = Vocab::train(&text, size)?;
    ctx.prepare()?;
    vocab.save(&ctx.path("vocab.txt"))?;
    ctx.manifest.output("vocab.txt");
    ctx.manifest.tuple_input(&a.train)?;
    ctx.manifest.config(json!({ "target_size": size }));
    println!("vocabulary: {} pieces", vocab.len());
    Ok(())
}

struct Prepared {
    vocab: Vocab,
    train: Vec<TrainingTuple>,
    dev: Vec<TrainingTuple>,
}

fn prepare_training(ctx: &mut Ctx, d: &crate::args::DataArgs) -> Result<Prepared> {
    let train = load_nonempty(&d.train, "training")?;
    let dev = match &d.dev {
        Some(p) => load_tuples(p)?,
        None => Vec::new(),
    };
    let vocab = Vocab::load(&d.vocab)?;
    ctx.manifest.tuple_input(&d.train)?;
    if let Some(p) = &d.dev {
        ctx.manifest.tuple_input(p)?;
    }
    ctx.manifest.input(&d.vocab)?;
    Ok(Prepared { vocab, train, dev })
}

fn checkpoint_meta(t: &Trainer<'_>, ablation: &str, kind: &str) -> serde_json::Value {
    json!({ "kind": kind, "ablation": ablation, "train_config": t.cfg, "train_state": t.state })
}

pub fn train(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    let p = prepare_training(ctx, &a.data)?;
    let (mcfg, ablation) = resolve_model(&ctx.file, &a.model, p.vocab.len(), p.train[0].features.dims())?;
    let tcfg = resolve_train(&ctx.file, &a.optim)?;
    ctx.prepare()?;
    let train = encode_tuples(&p.train, &p.vocab, mcfg.max_caption_len);
    let dev = encode_tuples(&p.dev, &p.vocab, mcfg.max_caption_len);
    let model = CaptionModel::new(mcfg.clone(), tcfg.rng_seed)?;
    let mut t = Trainer::new(model, tcfg.clone(), &p.vocab, &train, &dev)?;
    eprintln!("training {ablation}: {} parameters, {} tuples", t.model.parameter_count(), train.len());

    let mut outcome = Ok(());
    while t.state.step < tcfg.max_steps {
        let next = (t.state.step + tcfg.eval_every_steps).min(tcfg.max_steps);
        if let Err(e) = t.run_until(next) {
            outcome = Err(e);
            break;
        }
        if let Some(r) = t.log.last() {
            let cider = r.dev_cider.map_or("-".into(), |c| format!("{c:.4}"));
            eprintln!("step {} loss {:.4} lr {:.5} dev CIDEr {cider}", r.step, r.loss, r.lr);
        }
    }
    let mut log = Vec::new();
    write_log(&mut log, &t.log).expect("writing to memory");
    ctx.write("log.csv", &String::from_utf8(log).expect("log is text"))?;
    ctx.manifest.rng_seed = Some(tcfg.rng_seed);
    ctx.manifest.config(json!({ "ablation": ablation, "model": mcfg, "train": tcfg }));
    outcome?;

    save_checkpoint(&ctx.path("best.ckpt"), &t.best_model(), &checkpoint_meta(&t, ablation, "best"))?;
    save_checkpoint(&ctx.path("final.ckpt"), &t.model, &checkpoint_meta(&t, ablation, "final"))?;
    ctx.manifest.output("best.ckpt");
    ctx.manifest.output("final.ckpt");
    match (t.state.best_dev_cider, t.state.best_step) {
        (Some(c), Some(s)) => println!("best dev CIDEr {c:.4} at step {s}"),
        _ => println!("no dev set; kept the final parameters"),
    }
    Ok(())
}

pub fn sweep_cmd(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let p = prepare_training(ctx, &a.data)?;
    let (mcfg, ablation) = resolve_model(&ctx.file, &a.model, p.vocab.len(), p.train[0].features.dims())?;
    let tcfg: TrainConfig = resolve_train(&ctx.file, &a.optim)?;
    let lrs = match &a.lrs {
        Some(s) => parse_floats(s, "learning rates")?,
        None => PAPER_LEARNING_RATES.to_vec(),
    };
    let decays = match &a.decays {
        Some(s) => parse_floats(s, "decay rates")?,
        None => PAPER_DECAY_RATES.to_vec(),
    };
    ctx.prepare()?;
    let train = encode_tuples(&p.train, &p.vocab, mcfg.max_caption_len);
    let dev = encode_tuples(&p.dev, &p.vocab, mcfg.max_caption_len);
    let init = CaptionModel::new(mcfg.clone(), tcfg.rng_seed)?;
    let res = sweep(&init, &tcfg, &lrs, &decays, &p.vocab, &train, &dev)?;
    ctx.write("sweep.csv", &res.to_csv())?;
    ctx.manifest.rng_seed = Some(tcfg.rng_seed);
    ctx.manifest
        .config(json!({ "ablation": ablation, "model": mcfg, "train": tcfg, "learning_rates": lrs, "decay_rates": decays }));
    print!("{}", res.to_csv());
    match res.best {
        Some(i) => println!("best: learning rate {} decay {}", res.cells[i].learning_rate, res.cells[i].decay_rate),
        None => println!("every cell diverged"),
    }
    Ok(())
}

#[derive(Serialize)]
struct DecodeRow<'a> {
    image_id: &'a str,
    guiding_text: &'a str,
    caption: String,
    score: Option<f64>,
}

struct Item {
    image_id: String,
    guiding_text: String,
    features: Arc<ImageFeatures>,
    references: Vec<String>,
}

fn decode_items(data: &[TrainingTuple], guides: Option<&[GuideEntry]>) -> Result<Vec<Item>> {
    let mut by_pair: BTreeMap<(String, String), Item> = BTreeMap::new();
    for t in data {
        by_pair
            .entry((t.image_id.clone(), normalize(&t.guiding_text)))
            .or_insert_with(|| Item {
                image_id: t.image_id.clone(),
                guiding_text: t.guiding_text.clone(),
                features: t.features.clone(),
                references: Vec::new(),
            })
            .references
            .push(t.caption.clone());
    }
    let Some(guides) = guides else { return Ok(by_pair.into_values().collect()) };
    let features: BTreeMap<&str, &Arc<ImageFeatures>> = data.iter().map(|t| (t.image_id.as_str(), &t.features)).collect();
    let mut out = Vec::new();
    for e in guides {
        let f = features
            .get(e.image_id.as_str())
            .ok_or_else(|| Error::Input(format!("guide list names image `{}` missing from the data", e.image_id)))?;
        for g in &e.guides {
            let references = by_pair.get(&(e.image_id.clone(), normalize(g))).map(|i| i.references.clone());
            out.push(Item {
                image_id: e.image_id.clone(),
                guiding_text: g.clone(),
                features: (*f).clone(),
                references: references.unwrap_or_default(),
            });
        }
    }
    Ok(out)
}

pub fn decode(ctx: &mut Ctx, a: &DecodeArgs) -> Result<()> {
    let data = load_nonempty(&a.data, "data")?;
    let vocab = Vocab::load(&a.vocab)?;
    let ablation = a.ablation.as_deref().map(parse_ablation).transpose()?;
    let model = match (&a.checkpoint, ablation) {
        (Some(_), Some("copy")) => {
            return Err(CliError::Usage("--ablation copy takes no checkpoint".into()));
        }
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            if ck.model.config.vocab_size != vocab.len() {
                return Err(Error::Shape(format!(
                    "parameter `embed.tokens` has {} rows but the vocabulary has {} pieces",
                    ck.model.config.vocab_size,
                    vocab.len()
                ))
                .into());
            }
            ctx.manifest.input(path)?;
            Some(ck.model)
        }
        (None, Some("copy")) => None,
        (None, _) => return Err(CliError::Usage("decode needs --checkpoint or --ablation copy".into())),
    };
    let guides = a.guides.as_deref().map(read_guide_file).transpose()?;
    let items = decode_items(&data, guides.as_deref())?;
    ctx.prepare()?;

    let guide_ids: Vec<Vec<u32>> = items.iter().map(|i| vocab.encode(&i.guiding_text)).collect();
    let mut rows = Vec::with_capacity(items.len());
    let beam = model.as_ref().map(|m| resolve_beam(&ctx.file, a, m.config.max_caption_len));
    match (&model, &beam) {
        (Some(m), Some(beam)) => {
            let inputs: Vec<(&ImageFeatures, &[u32])> =
                items.iter().zip(&guide_ids).map(|(i, g)| (&*i.features, g.as_slice())).collect();
            let hyps = beam_search_batch(m, &inputs, beam)?;
            for (i, h) in items.iter().zip(hyps) {
                let caption = vocab.decode(h.caption_ids())?;
                rows.push(DecodeRow { image_id: &i.image_id, guiding_text: &i.guiding_text, caption, score: Some(h.score(beam.alpha)) });
            }
        }
        _ => {
            for (i, g) in items.iter().zip(&guide_ids) {
                let caption = vocab.decode(&copy_baseline(g))?;
                rows.push(DecodeRow { image_id: &i.image_id, guiding_text: &i.guiding_text, caption, score: None });
            }
        }
    }
    ctx.write("decodes.jsonl", &jsonl(&rows))?;

    let instances: Vec<EvalInstance> = items
        .iter()
        .zip(&rows)
        .filter(|(i, _)| !i.references.is_empty())
        .map(|(i, r)| EvalInstance {
            image_id: i.image_id.clone(),
            guiding_text: i.guiding_text.clone(),
            candidate: r.caption.clone(),
            references: i.references.clone(),
        })
        .collect();
    if instances.len() < items.len() {
        log::warn!("{} decoded guides have no reference caption and are left out of eval.jsonl", items.len() - instances.len());
    }
    write_instances(&ctx.path("eval.jsonl"), &instances)?;
    ctx.manifest.output("eval.jsonl");
    ctx.manifest.tuple_input(&a.data)?;
    ctx.manifest.input(&a.vocab)?;
    if let Some(g) = &a.guides {
        ctx.manifest.input(g)?;
    }
    ctx.manifest.config(json!({ "system": ablation.unwrap_or("checkpoint"), "beam": beam }));
    println!("decoded {} captions", rows.len());
    Ok(())
}

pub fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut systems = Vec::new();
    for s in &a.systems {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--system expects NAME=FILE, got `{s}`")))?;
        let path = Path::new(path);
        let inst = read_instances(path)?;
        reports.push((name.to_string(), EvalReport::compute(&inst)?));
        ctx.manifest.input(path)?;
        systems.push(name.to_string());
    }
    ctx.prepare()?;
    ctx.write("report.csv", &reports_csv(&reports))?;
    let md = reports_markdown(&reports);
    ctx.write("report.md", &md)?;
    ctx.manifest.config(json!({ "systems": systems }));
    print!("{md}");
    Ok(())
}

pub fn stats(ctx: &mut Ctx, a: &StatsArgs) -> Result<()> {
    let data = load_nonempty(&a.data, "data")?;
    let stats = compute_corpus_stats(&data)?;
    let overlap = match &a.test_guides {
        Some(p) => {
            let entries = read_guide_file(p)?;
            let guides: Vec<&str> = entries.iter().flat_map(|e| e.guides.iter().map(String::as_str)).collect();
            ctx.manifest.input(p)?;
            Some(compute_overlap(&data, &guides)?)
        }
        None => None,
    };
    ctx.prepare()?;
    ctx.write("stats.csv", &stats.to_csv())?;
    if let Some(o) = &overlap {
        ctx.write("overlap.csv", &o.to_csv())?;
    }
    let md = stats_markdown(&stats, overlap.as_ref());
    ctx.write("stats.md", &md)?;
    ctx.manifest.tuple_input(&a.data)?;
    ctx.manifest.config(json!({}));
    print!("{md}");
    Ok(())
}

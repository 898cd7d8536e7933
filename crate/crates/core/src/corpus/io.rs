//! Tuple files (JSON lines plus a GTEN feature file) and guide lists.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ImageFeatures, TrainingTuple};
use crate::error::{Error, Result};
use crate::numerics::gten;

/// Byte offsets of the three feature blocks of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureOffsets {
    pub g: u64,
    pub r_gr: u64,
    pub r_frcnn: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TupleRecord {
    image_id: String,
    guiding_text: String,
    caption: String,
    features_file: String,
    feature_offsets: FeatureOffsets,
}

/// Writes `tuples` as JSON lines to `path`, with features stored once per
/// image in `<stem>.features.gten` next to it.
pub fn save_tuples(tuples: &[TrainingTuple], path: &Path) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("tuples");
    let features_name = format!("{stem}.features.gten");
    let features_path = path.with_file_name(&features_name);
    let mut feats = BufWriter::new(File::create(&features_path).map_err(|e| Error::io(&features_path, e))?);
    let mut lines = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut written: HashMap<*const ImageFeatures, FeatureOffsets> = HashMap::new();
    let mut offset = 0u64;
    for t in tuples {
        let key = Arc::as_ptr(&t.features);
        let offsets = match written.get(&key) {
            Some(o) => *o,
            None => {
                let f = &t.features;
                let mut o = FeatureOffsets { g: offset, r_gr: 0, r_frcnn: 0 };
                offset += gten::encoded_len(f.g.shape()) as u64;
                o.r_gr = offset;
                offset += gten::encoded_len(f.r_gr.shape()) as u64;
                o.r_frcnn = offset;
                offset += gten::encoded_len(f.r_frcnn.shape()) as u64;
                for tensor in [&f.g, &f.r_gr, &f.r_frcnn] {
                    gten::write_tensor(&mut feats, tensor).map_err(|e| Error::io(&features_path, e))?;
                }
                written.insert(key, o);
                o
            }
        };
        let rec = TupleRecord {
            image_id: t.image_id.clone(),
            guiding_text: t.guiding_text.clone(),
            caption: t.caption.clone(),
            features_file: features_name.clone(),
            feature_offsets: offsets,
        };
        let line = serde_json::to_string(&rec).expect("record serialises");
        writeln!(lines, "{line}").map_err(|e| Error::io(path, e))?;
    }
    feats.flush().map_err(|e| Error::io(&features_path, e))?;
    lines.flush().map_err(|e| Error::io(path, e))
}

fn read_features(file: &mut BufReader<File>, offsets: FeatureOffsets, image_id: &str) -> Result<ImageFeatures> {
    let bad = |msg: String| Error::Features {
        image_id: image_id.to_string(),
        msg,
    };
    let mut block = |off: u64| {
        file.seek(SeekFrom::Start(off)).map_err(|e| bad(e.to_string()))?;
        gten::read_tensor(file).map_err(|e| bad(format!("block at byte {off}: {e}")))
    };
    let g = block(offsets.g)?;
    let r_gr = block(offsets.r_gr)?;
    let r_frcnn = block(offsets.r_frcnn)?;
    if r_gr.rank() != 2 || r_frcnn.rank() != 2 {
        return Err(bad("regional features must be matrices".into()));
    }
    let region_count = ImageFeatures::infer_region_count(&r_gr, &r_frcnn);
    let f = ImageFeatures { g, r_gr, r_frcnn, region_count };
    f.validate().map_err(|e| bad(e.to_string()))?;
    Ok(f)
}

/// Reads a tuple file written by [`save_tuples`]. Blank lines are skipped.
pub fn load_tuples(path: &Path) -> Result<Vec<TrainingTuple>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut files: HashMap<String, BufReader<File>> = HashMap::new();
    let mut cache: HashMap<(String, FeatureOffsets), Arc<ImageFeatures>> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TupleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let key = (rec.features_file.clone(), rec.feature_offsets);
        let features = match cache.get(&key) {
            Some(f) => Arc::clone(f),
            None => {
                if !files.contains_key(&rec.features_file) {
                    let fp: PathBuf = dir.join(&rec.features_file);
                    let f = File::open(&fp).map_err(|e| Error::io(&fp, e))?;
                    files.insert(rec.features_file.clone(), BufReader::new(f));
                }
                let file = files.get_mut(&rec.features_file).expect("opened above");
                let f = Arc::new(read_features(file, rec.feature_offsets, &rec.image_id)?);
                cache.insert(key, Arc::clone(&f));
                f
            }
        };
        out.push(TrainingTuple {
            image_id: rec.image_id,
            features,
            guiding_text: rec.guiding_text,
            caption: rec.caption,
        });
    }
    Ok(out)
}

pub const MAX_GUIDES_PER_IMAGE: usize = 6;

/// One line of a test guide list: an image id and its guiding texts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuideEntry {
    pub image_id: String,
    pub guides: Vec<String>,
}

/// Tab-separated `image_id<TAB>guide<TAB>guide...`, at most six guides.
pub fn write_guide_file(path: &Path, entries: &[GuideEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for e in entries {
        if e.guides.len() > MAX_GUIDES_PER_IMAGE || e.guides.iter().any(|g| g.contains('\t')) {
            return Err(Error::Input(format!("bad guide list for image `{}`", e.image_id)));
        }
        let mut line = e.image_id.clone();
        for g in &e.guides {
            line.push('\t');
            line.push_str(g);
        }
        writeln!(w, "{line}").map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_guide_file(path: &Path) -> Result<Vec<GuideEntry>> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let image_id = parts.next().unwrap_or_default().to_string();
        let guides: Vec<String> = parts.map(str::to_string).collect();
        if image_id.is_empty() || guides.len() > MAX_GUIDES_PER_IMAGE {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected an image id and 0..={MAX_GUIDES_PER_IMAGE} guides"),
            });
        }
        out.push(GuideEntry { image_id, guides });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, FeatureDims, SyntheticWorldSpec};

    fn spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            dims: FeatureDims { global: 8, regional_gr: 4, regional_frcnn: 6, max_regions: 5 },
            ..Default::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tuples = generate_synthetic_corpus(&spec(), 7, 2).unwrap();
        let path = dir.path().join("train.jsonl");
        save_tuples(&tuples, &path).unwrap();
        let back = load_tuples(&path).unwrap();
        assert_eq!(back, tuples);
        // tuples of one image share a single feature allocation
        assert!(Arc::ptr_eq(&back[0].features, &back[1].features));
    }

    #[test]
    fn empty_file_gives_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_tuples(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_features_name_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let tuples = generate_synthetic_corpus(&spec(), 3, 1).unwrap();
        let path = dir.path().join("t.jsonl");
        save_tuples(&tuples, &path).unwrap();
        let fp = dir.path().join("t.features.gten");
        let len = std::fs::metadata(&fp).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&fp).unwrap();
        f.set_len(len - 10).unwrap();
        match load_tuples(&path) {
            Err(Error::Features { image_id, .. }) => assert_eq!(image_id, tuples[2].image_id),
            other => panic!("expected feature error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_and_missing_features() {
        let dir = tempfile::tempdir().unwrap();
        let tuples = generate_synthetic_corpus(&spec(), 2, 1).unwrap();
        let path = dir.path().join("t.jsonl");
        save_tuples(&tuples, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, &text).unwrap();
        assert!(matches!(load_tuples(&path), Err(Error::Parse { line: 3, .. })));

        save_tuples(&tuples, &path).unwrap();
        std::fs::remove_file(dir.path().join("t.features.gten")).unwrap();
        assert!(matches!(load_tuples(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn guide_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("guides.tsv");
        let entries = vec![
            GuideEntry { image_id: "img1".into(), guides: vec!["dog".into(), "red car".into()] },
            GuideEntry { image_id: "img2".into(), guides: vec!["tree".into()] },
        ];
        write_guide_file(&path, &entries).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "img1\tdog\tred car\nimg2\ttree\n");
        assert_eq!(read_guide_file(&path).unwrap(), entries);
        let too_many = GuideEntry { image_id: "x".into(), guides: vec!["g".into(); 7] };
        assert!(write_guide_file(&path, &[too_many]).is_err());
    }
}

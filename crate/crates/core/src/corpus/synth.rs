//! Synthetic feature world.
//!
//! Each image shows a few objects, each with an attribute, in one place. The
//! global feature is the sum of the objects' and the place's embeddings; each
//! valid region row embeds one (object, attribute) pair. For a guide naming
//! object `i`, the caption is `a {attribute_i} {object_i} {relation_i} the
//! {place}`. The relation is a fixed property of the object, the attribute is
//! only visible in the regions and the place only in the global feature.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureDims, ImageFeatures, TrainingTuple};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const OBJECT_WORDS: [&str; 64] = [
    "dog", "cat", "car", "tree", "house", "boat", "bird", "horse", "chair", "table", "lamp", "book", "cup",
    "bottle", "bicycle", "bench", "clock", "flower", "kite", "train", "bus", "truck", "plane", "ball", "hat",
    "shirt", "bag", "umbrella", "phone", "laptop", "vase", "bowl", "apple", "banana", "pizza", "cake", "sofa",
    "bed", "door", "window", "fence", "bridge", "tower", "statue", "fountain", "mountain", "river", "lake",
    "rock", "cloud", "sign", "pole", "cow", "sheep", "elephant", "giraffe", "zebra", "bear", "duck", "fish",
    "guitar", "piano", "mirror", "basket",
];

pub const ATTRIBUTE_WORDS: [&str; 24] = [
    "red", "blue", "green", "yellow", "white", "black", "brown", "orange", "pink", "purple", "gray", "wooden",
    "metal", "small", "large", "old", "new", "shiny", "striped", "dotted", "tall", "short", "wet", "dry",
];

pub const PLACE_WORDS: [&str; 12] = [
    "beach", "street", "park", "kitchen", "field", "garden", "forest", "harbor", "market", "yard", "desert",
    "meadow",
];

pub const RELATION_WORDS: [&str; 12] = [
    "near", "under", "behind", "above", "beside", "below", "over", "on", "in", "at", "by", "with",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldSpec {
    pub rng_seed: u64,
    pub n_objects: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    pub n_places: usize,
    pub objects_per_image: (usize, usize),
    pub feature_noise_sigma: f32,
    pub dims: FeatureDims,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            rng_seed: 17,
            n_objects: 24,
            n_attributes: 12,
            n_relations: 8,
            n_places: 6,
            objects_per_image: (2, 4),
            feature_noise_sigma: 0.05,
            dims: FeatureDims::default(),
        }
    }
}

impl SyntheticWorldSpec {
    fn validate(&self, guides_per_image: usize) -> Result<()> {
        let (lo, hi) = self.objects_per_image;
        let checks = [
            (self.n_objects >= 2 && self.n_objects <= OBJECT_WORDS.len(), "n_objects must be in 2..=64"),
            (self.n_attributes >= 2 && self.n_attributes <= ATTRIBUTE_WORDS.len(), "n_attributes must be in 2..=24"),
            (self.n_relations >= 2 && self.n_relations <= RELATION_WORDS.len(), "n_relations must be in 2..=12"),
            (self.n_places >= 1 && self.n_places <= PLACE_WORDS.len(), "n_places must be in 1..=12"),
            (lo >= 2 && lo <= hi, "objects_per_image must be an ordered range starting at 2 or more"),
            (hi <= self.n_objects, "object inventory is smaller than objects_per_image"),
            (hi <= self.dims.max_regions, "more objects per image than region rows"),
            (guides_per_image <= hi, "more guides per image than objects in an image"),
            (self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite(), "noise sigma must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Spec((*msg).to_string())),
            None => Ok(()),
        }
    }
}

/// splitmix64 finaliser; mixes ids into independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unit-norm pseudo-random vector determined by `(seed, kind, id)`.
fn id_embedding(seed: u64, kind: u64, id: usize, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed ^ kind.rotate_left(32)) ^ id as u64));
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn unit_sum(a: &[f32], b: &[f32]) -> Vec<f32> {
    let s: Vec<f32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let norm = s.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    s.iter().map(|x| x / norm).collect()
}

const KIND_G_OBJECT: u64 = 1;
const KIND_GR_OBJECT: u64 = 2;
const KIND_GR_ATTR: u64 = 3;
const KIND_FRCNN_OBJECT: u64 = 4;
const KIND_FRCNN_ATTR: u64 = 5;
const KIND_G_PLACE: u64 = 6;

struct Embeddings {
    g_obj: Vec<Vec<f32>>,
    g_place: Vec<Vec<f32>>,
    gr_obj: Vec<Vec<f32>>,
    gr_attr: Vec<Vec<f32>>,
    fr_obj: Vec<Vec<f32>>,
    fr_attr: Vec<Vec<f32>>,
}

impl Embeddings {
    fn new(spec: &SyntheticWorldSpec) -> Self {
        let table = |kind, n, dim| (0..n).map(|i| id_embedding(spec.rng_seed, kind, i, dim)).collect();
        let d = spec.dims;
        Embeddings {
            g_obj: table(KIND_G_OBJECT, spec.n_objects, d.global),
            g_place: table(KIND_G_PLACE, spec.n_places, d.global),
            gr_obj: table(KIND_GR_OBJECT, spec.n_objects, d.regional_gr),
            gr_attr: table(KIND_GR_ATTR, spec.n_attributes, d.regional_gr),
            fr_obj: table(KIND_FRCNN_OBJECT, spec.n_objects, d.regional_frcnn),
            fr_attr: table(KIND_FRCNN_ATTR, spec.n_attributes, d.regional_frcnn),
        }
    }
}

/// Relation word tied to an object.
pub(crate) fn relation_of(spec: &SyntheticWorldSpec, object: usize) -> usize {
    object % spec.n_relations
}

#[cfg(test)]
/// Global feature of an object set in a place, before noise.
pub(crate) fn global_feature(spec: &SyntheticWorldSpec, objects: &[usize], place: usize) -> Vec<f32> {
    let mut g = id_embedding(spec.rng_seed, KIND_G_PLACE, place, spec.dims.global);
    for &o in objects {
        let e = id_embedding(spec.rng_seed, KIND_G_OBJECT, o, spec.dims.global);
        g.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
    }
    g
}

struct Scene {
    objects: Vec<usize>,
    attributes: Vec<usize>,
    place: usize,
}

fn add_noise(v: &mut [f32], noise: Option<&Normal<f32>>, rng: &mut ChaCha8Rng) {
    if let Some(n) = noise {
        v.iter_mut().for_each(|x| *x += n.sample(rng));
    }
}

fn render(spec: &SyntheticWorldSpec, emb: &Embeddings, scene: &Scene, rng: &mut ChaCha8Rng) -> ImageFeatures {
    let d = spec.dims;
    let noise = (spec.feature_noise_sigma > 0.0).then(|| Normal::new(0.0f32, spec.feature_noise_sigma).expect("sigma"));
    let mut g = emb.g_place[scene.place].clone();
    for &o in &scene.objects {
        g.iter_mut().zip(&emb.g_obj[o]).for_each(|(a, b)| *a += b);
    }
    add_noise(&mut g, noise.as_ref(), rng);
    let mut r_gr = vec![0.0f32; d.max_regions * d.regional_gr];
    let mut r_fr = vec![0.0f32; d.max_regions * d.regional_frcnn];
    for (i, (&o, &a)) in scene.objects.iter().zip(&scene.attributes).enumerate() {
        let row = &mut r_gr[i * d.regional_gr..(i + 1) * d.regional_gr];
        row.copy_from_slice(&unit_sum(&emb.gr_obj[o], &emb.gr_attr[a]));
        add_noise(row, noise.as_ref(), rng);
        let row = &mut r_fr[i * d.regional_frcnn..(i + 1) * d.regional_frcnn];
        row.copy_from_slice(&unit_sum(&emb.fr_obj[o], &emb.fr_attr[a]));
        add_noise(row, noise.as_ref(), rng);
    }
    ImageFeatures {
        g: Tensor::new(vec![d.global], g).expect("global shape"),
        r_gr: Tensor::new(vec![d.max_regions, d.regional_gr], r_gr).expect("gr shape"),
        r_frcnn: Tensor::new(vec![d.max_regions, d.regional_frcnn], r_fr).expect("frcnn shape"),
        region_count: scene.objects.len(),
    }
}

/// Generates `n_images` images with `guides_per_image` tuples each.
///
/// Images get between `max(lo, guides_per_image)` and `hi` objects so every
/// guide names a distinct object; guides follow the scene order.
pub fn generate_synthetic_corpus(
    spec: &SyntheticWorldSpec,
    n_images: usize,
    guides_per_image: usize,
) -> Result<Vec<TrainingTuple>> {
    if n_images == 0 || guides_per_image == 0 {
        return Err(Error::Spec("need at least one image and one guide per image".into()));
    }
    spec.validate(guides_per_image)?;
    let emb = Embeddings::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (lo, hi) = spec.objects_per_image;
    let lo = lo.max(guides_per_image);
    let width = (n_images - 1).to_string().len().max(6);
    let mut inventory: Vec<usize> = (0..spec.n_objects).collect();
    let mut out = Vec::with_capacity(n_images * guides_per_image);
    for img in 0..n_images {
        let k = rng.random_range(lo..=hi);
        inventory.shuffle(&mut rng);
        let objects = inventory[..k].to_vec();
        let attributes = (0..k).map(|_| rng.random_range(0..spec.n_attributes)).collect();
        let place = rng.random_range(0..spec.n_places);
        let scene = Scene { objects, attributes, place };
        let features = Arc::new(render(spec, &emb, &scene, &mut rng));
        let image_id = format!("img{img:0width$}");
        for i in 0..guides_per_image {
            let object = scene.objects[i];
            let caption = format!(
                "a {} {} {} the {}",
                ATTRIBUTE_WORDS[scene.attributes[i]],
                OBJECT_WORDS[object],
                RELATION_WORDS[relation_of(spec, object)],
                PLACE_WORDS[scene.place]
            );
            out.push(TrainingTuple {
                image_id: image_id.clone(),
                features: Arc::clone(&features),
                guiding_text: OBJECT_WORDS[object].to_string(),
                caption,
            });
        }
    }
    Ok(out)
}

/// Splits tuples into consecutive image groups by fraction, keeping all
/// tuples of one image together. Returns one vector per fraction; the last
/// split takes the remainder.
pub fn split_by_image(tuples: &[TrainingTuple], fractions: &[f64]) -> Vec<Vec<TrainingTuple>> {
    let mut images: BTreeMap<&str, Vec<&TrainingTuple>> = BTreeMap::new();
    for t in tuples {
        images.entry(t.image_id.as_str()).or_default().push(t);
    }
    let n = images.len();
    let mut bounds = Vec::with_capacity(fractions.len());
    let mut acc = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        bounds.push(if i + 1 == fractions.len() { n } else { ((acc * n as f64).round() as usize).min(n) });
    }
    let groups: Vec<Vec<&TrainingTuple>> = images.into_values().collect();
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for end in bounds {
        let end = end.max(start);
        out.push(groups[start..end].iter().flatten().map(|&t| t.clone()).collect());
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{contains_phrase, text_match_filter};

    fn small_spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            dims: FeatureDims {
                global: 16,
                regional_gr: 8,
                regional_frcnn: 12,
                max_regions: 4,
            },
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(&small_spec(), 20, 2).unwrap();
        let b = generate_synthetic_corpus(&small_spec(), 20, 2).unwrap();
        assert_eq!(a, b);
        let other = SyntheticWorldSpec { rng_seed: 99, ..small_spec() };
        assert_ne!(a, generate_synthetic_corpus(&other, 20, 2).unwrap());
    }

    #[test]
    fn every_tuple_passes_the_text_match_filter() {
        let tuples = generate_synthetic_corpus(&small_spec(), 50, 2).unwrap();
        assert_eq!(text_match_filter(&tuples).len(), tuples.len());
        assert!(tuples.iter().all(|t| contains_phrase(&t.caption, &t.guiding_text)));
    }

    #[test]
    fn features_respect_padding_and_dims() {
        let tuples = generate_synthetic_corpus(&small_spec(), 30, 1).unwrap();
        for t in &tuples {
            t.features.validate().unwrap();
            assert!((2..=4).contains(&t.features.region_count));
            let inferred = ImageFeatures::infer_region_count(&t.features.r_gr, &t.features.r_frcnn);
            assert_eq!(inferred, t.features.region_count);
        }
        let full = generate_synthetic_corpus(&SyntheticWorldSpec::default(), 1, 1).unwrap();
        assert_eq!(full[0].features.dims(), FeatureDims::default());
    }

    #[test]
    fn ground_truth_captions_are_diverse_per_image() {
        let tuples = generate_synthetic_corpus(&small_spec(), 100, 3).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for group in tuples.chunks(3) {
            let toks: Vec<String> = group.iter().flat_map(|t| crate::tokenizer::words(&t.caption)).collect();
            let distinct: std::collections::HashSet<&String> = toks.iter().collect();
            total += distinct.len() as f64 / toks.len() as f64;
            n += 1;
        }
        assert!(total / n as f64 > 0.3);
    }

    #[test]
    fn global_feature_is_injective_on_scenes() {
        // exhaustive over all 2..=4 subsets of a 10-object inventory in 3 places, sigma 0
        let spec = SyntheticWorldSpec { n_objects: 10, n_places: 3, ..small_spec() };
        let mut seen: Vec<((Vec<usize>, usize), Vec<f32>)> = Vec::new();
        for mask in 0u32..(1 << 10) {
            let objs: Vec<usize> = (0..10).filter(|i| mask & (1 << i) != 0).collect();
            if !(2..=4).contains(&objs.len()) {
                continue;
            }
            for place in 0..3 {
                seen.push(((objs.clone(), place), global_feature(&spec, &objs, place)));
            }
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                let dist: f32 = seen[i].1.iter().zip(&seen[j].1).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-3, "{:?} and {:?} collide", seen[i].0, seen[j].0);
            }
        }
    }

    #[test]
    fn spec_errors() {
        let bad = SyntheticWorldSpec { n_objects: 3, ..small_spec() };
        assert!(matches!(generate_synthetic_corpus(&bad, 5, 1), Err(Error::Spec(_))));
        assert!(matches!(generate_synthetic_corpus(&small_spec(), 5, 5), Err(Error::Spec(_))));
        assert!(generate_synthetic_corpus(&small_spec(), 0, 1).is_err());
    }

    #[test]
    fn split_keeps_images_whole() {
        let tuples = generate_synthetic_corpus(&small_spec(), 10, 2).unwrap();
        let parts = split_by_image(&tuples, &[0.8, 0.1, 0.1]);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 2, 2]);
        assert_eq!(parts.concat(), tuples);
    }
}

//! Synthetic pair generation, manifests and patch sampling.
//!
//! Every pair draws all of its randomness from a ChaCha8 stream seeded by
//! `pair_seed(global_seed, index)`, so a dataset is a pure function of its
//! settings and does not depend on generation order.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

use super::compose::{compose_additive, compose_heavy, MaskSpec, RainParams, RainRecipe};
use super::image::Image;
use super::streak::StreakSpec;

pub const MANIFEST_FORMAT: &str = "dpafnet-rain-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// SplitMix64 finalizer; decorrelates neighbouring integers.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn pair_seed(global_seed: u64, index: u64) -> u64 {
    splitmix64(global_seed ^ splitmix64(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// One streak layer added to the background.
    Additive,
    /// Several masked layers plus transmittance and atmospheric light.
    Heavy,
}

/// Sampling ranges for synthetic rain; `[lo, hi]` pairs are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainRanges {
    pub composition: Composition,
    pub transmittance: [f64; 2],
    pub layers: [usize; 2],
    /// Base streak direction; each layer adds up to ±`direction_jitter_deg`.
    pub direction_deg: [f64; 2],
    pub direction_jitter_deg: f64,
    pub density: [f64; 2],
    pub length_px: [usize; 2],
    pub intensity: [f64; 2],
    pub atmospheric_light: [f64; 2],
    /// Probability that rain covers only a rectangle instead of the frame.
    pub partial_mask_prob: f64,
}

impl Default for RainRanges {
    fn default() -> Self {
        RainRanges {
            composition: Composition::Heavy,
            transmittance: [0.8, 1.0],
            layers: [1, 3],
            direction_deg: [-25.0, 25.0],
            direction_jitter_deg: 8.0,
            density: [0.01, 0.05],
            length_px: [5, 15],
            intensity: [0.4, 0.9],
            atmospheric_light: [0.7, 1.0],
            partial_mask_prob: 0.25,
        }
    }
}

impl RainRanges {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, r: [f64; 2]| -> Result<()> {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(param_err!("{name} range {r:?} must satisfy 0 <= lo <= hi <= 1"));
            }
            Ok(())
        };
        unit("transmittance", self.transmittance)?;
        unit("density", self.density)?;
        unit("atmospheric_light", self.atmospheric_light)?;
        unit("partial_mask_prob", [self.partial_mask_prob, self.partial_mask_prob])?;
        if !(self.intensity[0] > 0.0 && self.intensity[0] <= self.intensity[1] && self.intensity[1] <= 1.0) {
            return Err(param_err!("intensity range {:?} must lie in (0, 1]", self.intensity));
        }
        if self.layers[0] == 0 || self.layers[0] > self.layers[1] {
            return Err(param_err!("layers range {:?} must satisfy 1 <= lo <= hi", self.layers));
        }
        if self.length_px[0] == 0 || self.length_px[0] > self.length_px[1] {
            return Err(param_err!("length_px range {:?} must satisfy 1 <= lo <= hi", self.length_px));
        }
        if !(self.direction_deg[0] <= self.direction_deg[1]) || !(self.direction_jitter_deg >= 0.0) {
            return Err(param_err!("direction range {:?} is invalid", self.direction_deg));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) }
}

/// Smooth colour field with a few soft shapes and a faint texture.
pub fn procedural_background(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.75));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)));

    struct Shape {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        disc: bool,
        color: [f64; 3],
        alpha: f64,
    }
    let n_shapes = rng.random_range(2..=6);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            cy: rng.random_range(0.0..1.0),
            cx: rng.random_range(0.0..1.0),
            ry: rng.random_range(0.08..0.35),
            rx: rng.random_range(0.08..0.35),
            disc: rng.random(),
            color: std::array::from_fn(|_| rng.random_range(0.0..0.9)),
            alpha: rng.random_range(0.4..0.9),
        })
        .collect();
    let (fy, fx, phase, amp) = (
        rng.random_range(2.0..12.0),
        rng.random_range(2.0..12.0),
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..0.06),
    );

    Image::from_fn(height, width, |c, y, x| {
        let v = (y as f64 + 0.5) / height as f64;
        let u = (x as f64 + 0.5) / width as f64;
        let mut p = base[c] + grad[c].0 * (v - 0.5) + grad[c].1 * (u - 0.5);
        for s in &shapes {
            let (dy, dx) = ((v - s.cy) / s.ry, (u - s.cx) / s.rx);
            let inside = if s.disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
            if inside {
                p = (1.0 - s.alpha) * p + s.alpha * s.color[c];
            }
        }
        p + amp * (fy * v * std::f64::consts::TAU + fx * u * std::f64::consts::TAU + phase).sin()
    })
}

/// Draws a rain recipe for an image of the given size.
pub fn sample_recipe(rng: &mut ChaCha8Rng, height: usize, width: usize, ranges: &RainRanges) -> RainRecipe {
    let n_layers = match ranges.composition {
        Composition::Additive => 1,
        Composition::Heavy => rng.random_range(ranges.layers[0]..=ranges.layers[1]),
    };
    let base_dir = uniform(rng, ranges.direction_deg);
    let layers = (0..n_layers)
        .map(|_| StreakSpec {
            direction_deg: base_dir + uniform(rng, [-ranges.direction_jitter_deg, ranges.direction_jitter_deg]),
            density: uniform(rng, ranges.density),
            length_px: rng.random_range(ranges.length_px[0]..=ranges.length_px[1]),
            intensity: uniform(rng, ranges.intensity),
            seed: rng.random(),
        })
        .collect();
    match ranges.composition {
        Composition::Additive => {
            RainRecipe { transmittance: 1.0, layers, mask: MaskSpec::Full, atmospheric_light: [1.0; 3] }
        }
        Composition::Heavy => {
            let transmittance = uniform(rng, ranges.transmittance);
            let a = uniform(rng, ranges.atmospheric_light);
            let mask = if rng.random::<f64>() < ranges.partial_mask_prob {
                let rh = rng.random_range((height / 2).max(1)..=height);
                let rw = rng.random_range((width / 2).max(1)..=width);
                MaskSpec::Rect {
                    top: rng.random_range(0..=height - rh),
                    left: rng.random_range(0..=width - rw),
                    height: rh,
                    width: rw,
                }
            } else {
                MaskSpec::Full
            };
            RainRecipe { transmittance, layers, mask, atmospheric_light: [a; 3] }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainyPair {
    pub rainy: Image,
    pub clean: Image,
    pub params: RainParams,
    pub seed: u64,
}

/// Renders a pair from its recipe and background seed.
pub fn render_pair(
    height: usize,
    width: usize,
    background_seed: u64,
    recipe: &RainRecipe,
    composition: Composition,
    seed: u64,
) -> Result<RainyPair> {
    let clean = procedural_background(height, width, background_seed)?;
    let params = recipe.render(height, width)?;
    let rainy = match composition {
        Composition::Additive => compose_additive(&clean, &params.layers[0])?,
        Composition::Heavy => compose_heavy(&clean, &params)?,
    };
    Ok(RainyPair { rainy, clean, params, seed })
}

/// Generates pair `index` of the dataset seeded with `global_seed`.
pub fn generate_pair(global_seed: u64, index: u64, height: usize, width: usize, ranges: &RainRanges) -> Result<(RainyPair, PairRecord)> {
    let seed = pair_seed(global_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background_seed: u64 = rng.random();
    let recipe = sample_recipe(&mut rng, height, width, ranges);
    let pair = render_pair(height, width, background_seed, &recipe, ranges.composition, seed)?;
    let id = format!("pair_{index:05}");
    let record = PairRecord {
        rainy: format!("{id}_rainy.png"),
        clean: format!("{id}_clean.png"),
        id,
        seed: Some(seed),
        background_seed: Some(background_seed),
        recipe: Some(recipe),
    };
    Ok((pair, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    /// Image paths, relative to the manifest directory unless absolute.
    pub rainy: String,
    pub clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<RainRecipe>,
}

/// Dataset index. Synthetic datasets record everything needed to re-render
/// each pair; imported ones only list file paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<RainRanges>,
    pub pairs: Vec<PairRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Re-renders a synthetic pair from its record.
    pub fn regenerate(&self, record: &PairRecord) -> Result<RainyPair> {
        let ([h, w], Some(ranges), Some(seed), Some(bg), Some(recipe)) = (
            self.image_size.unwrap_or([0, 0]),
            &self.ranges,
            record.seed,
            record.background_seed,
            &record.recipe,
        ) else {
            return Err(param_err!("pair `{}` carries no generation record", record.id));
        };
        render_pair(h, w, bg, recipe, ranges.composition, seed)
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_owned() } else { dir.join(p) }
}

/// Writes `n_pairs` PNG pairs and `manifest.json` into `out_dir`.
pub fn generate_dataset(
    n_pairs: usize,
    image_size: (usize, usize),
    ranges: &RainRanges,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_pairs == 0 {
        return Err(param_err!("a dataset needs at least one pair"));
    }
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(param_err!("image size must be positive, got {h}x{w}"));
    }
    ranges.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let (pair, record) = generate_pair(seed, i as u64, h, w, ranges)?;
        pair.rainy.save_png(&out_dir.join(&record.rainy))?;
        pair.clean.save_png(&out_dir.join(&record.clean))?;
        pairs.push(record);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        image_size: Some([h, w]),
        seed: Some(seed),
        ranges: Some(ranges.clone()),
        pairs,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Builds a manifest for user-supplied folders: every PNG in `rainy_dir`
/// with a same-named file in `clean_dir` becomes a pair.
pub fn import_folders(rainy_dir: &Path, clean_dir: &Path, manifest_path: &Path) -> Result<Manifest> {
    let mut names: Vec<String> = std::fs::read_dir(rainy_dir)
        .map_err(|e| Error::io(rainy_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png") && clean_dir.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(param_err!("no matching PNG pairs in {} and {}", rainy_dir.display(), clean_dir.display()));
    }
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let (rd, cd) = (abs(rainy_dir)?, abs(clean_dir)?);
    let pairs = names
        .iter()
        .map(|n| PairRecord {
            id: n.trim_end_matches(".png").trim_end_matches(".PNG").to_owned(),
            rainy: rd.join(n).to_string_lossy().into_owned(),
            clean: cd.join(n).to_string_lossy().into_owned(),
            seed: None,
            background_seed: None,
            recipe: None,
        })
        .collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        image_size: None,
        seed: None,
        ranges: None,
        pairs,
    };
    manifest.save(manifest_path)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPair {
    pub id: String,
    pub rainy: Image,
    pub clean: Image,
}

/// All pairs of a manifest, decoded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub pairs: Vec<LoadedPair>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::with_capacity(manifest.pairs.len());
        for r in &manifest.pairs {
            let rainy = Image::load_png(&resolve(dir, &r.rainy))?;
            let clean = Image::load_png(&resolve(dir, &r.clean))?;
            if (rainy.height(), rainy.width()) != (clean.height(), clean.width()) {
                return Err(Error::format(manifest_path, format!("pair `{}` has mismatched image sizes", r.id)));
            }
            pairs.push(LoadedPair { id: r.id.clone(), rainy, clean });
        }
        if pairs.is_empty() {
            return Err(param_err!("manifest {} lists no pairs", manifest_path.display()));
        }
        Ok(Dataset { manifest, pairs })
    }

    pub fn from_pairs(pairs: Vec<LoadedPair>) -> Self {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            image_size: None,
            seed: None,
            ranges: None,
            pairs: pairs
                .iter()
                .map(|p| PairRecord {
                    id: p.id.clone(),
                    rainy: String::new(),
                    clean: String::new(),
                    seed: None,
                    background_seed: None,
                    recipe: None,
                })
                .collect(),
        };
        Dataset { manifest, pairs }
    }

    /// The dataset [`generate_dataset`] would write, held in memory. Images
    /// are quantized to 8 bits so they match what loading the PNGs gives.
    pub fn synthetic(n_pairs: usize, image_size: (usize, usize), ranges: &RainRanges, seed: u64) -> Result<Self> {
        if n_pairs == 0 {
            return Err(param_err!("a dataset needs at least one pair"));
        }
        ranges.validate()?;
        let (h, w) = image_size;
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut records = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs {
            let (pair, record) = generate_pair(seed, i as u64, h, w, ranges)?;
            pairs.push(LoadedPair { id: record.id.clone(), rainy: pair.rainy.quantized(), clean: pair.clean.quantized() });
            records.push(record);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            image_size: Some([h, w]),
            seed: Some(seed),
            ranges: Some(ranges.clone()),
            pairs: records,
        };
        Ok(Dataset { manifest, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `held_out` pairs.
    pub fn split(mut self, held_out: usize) -> Result<(Dataset, Dataset)> {
        if held_out == 0 || held_out >= self.pairs.len() {
            return Err(param_err!("cannot hold out {held_out} of {} pairs", self.pairs.len()));
        }
        let test = self.pairs.split_off(self.pairs.len() - held_out);
        Ok((Dataset::from_pairs(self.pairs), Dataset::from_pairs(test)))
    }
}

/// Crop position and flip decision for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

pub fn patch_window(height: usize, width: usize, patch: usize, seed: u64, hflip: bool) -> Result<PatchWindow> {
    if patch == 0 || patch > height || patch > width {
        return Err(param_err!("patch {patch} does not fit a {height}x{width} image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=height - patch);
    let left = rng.random_range(0..=width - patch);
    let flip = hflip && rng.random::<bool>();
    Ok(PatchWindow { top, left, flip })
}

/// Same seeded crop (and, with `hflip`, the same random mirror) applied to
/// both images.
pub fn sample_patch(rainy: &Image, clean: &Image, patch: usize, seed: u64, hflip: bool) -> Result<(Image, Image)> {
    let win = patch_window(rainy.height(), rainy.width(), patch, seed, hflip)?;
    let r = rainy.crop(win.top, win.left, patch, patch)?;
    let c = clean.crop(win.top, win.left, patch, patch)?;
    Ok(if win.flip { (r.flip_horizontal(), c.flip_horizontal()) } else { (r, c) })
}

pub fn sample_training_patch(pair: &RainyPair, patch: usize, seed: u64, hflip: bool) -> Result<(Image, Image)> {
    sample_patch(&pair.rainy, &pair.clean, patch, seed, hflip)
}

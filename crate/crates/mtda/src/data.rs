//! Dataset abstractions: directory ingestion, synthetic multi-domain
//! generation with controlled shift magnitudes, and the source-heavy
//! minibatch sampler.
//!
//! Target samples never carry their class label; ground truth for target
//! domains, when known (synthetic data or a labeled benchmark tree), is held
//! in a side table that only evaluation and auditing may read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnet::stream_rng;

/// One image with optional label and its domain of origin (0 = source).
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[C, H, W]` pixels in `[0, 1]`.
    pub image: Array3<f32>,
    /// Class index in `[0, n_c)`; `None` for an unlabeled target sample.
    pub label: Option<usize>,
    pub domain_id: usize,
}

/// Identity of a sample inside a registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct SampleKey {
    pub domain_id: usize,
    pub index: usize,
}

/// The labeled source plus N unlabeled target datasets over a shared label
/// space. Immutable once constructed.
#[derive(Debug, Clone)]
pub struct DatasetRegistry {
    pub source: Vec<Sample>,
    pub targets: Vec<Vec<Sample>>,
    pub n_c: usize,
    pub class_names: Vec<String>,
    /// Per-target-domain, per-index true labels. Evaluation-only; training
    /// code must never read this.
    hidden_truth: Option<Vec<Vec<usize>>>,
}

impl DatasetRegistry {
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    /// Samples of one target domain; `domain_id` is 1-based (0 is the source).
    pub fn target(&self, domain_id: usize) -> &[Sample] {
        &self.targets[domain_id - 1]
    }

    pub fn sample(&self, key: SampleKey) -> &Sample {
        if key.domain_id == 0 {
            &self.source[key.index]
        } else {
            &self.targets[key.domain_id - 1][key.index]
        }
    }

    /// True label of a target sample, if ground truth is available.
    /// For audit and evaluation only.
    pub fn hidden_truth(&self, key: SampleKey) -> Option<usize> {
        if key.domain_id == 0 {
            return self.source[key.index].label;
        }
        self.hidden_truth
            .as_ref()
            .and_then(|t| t[key.domain_id - 1].get(key.index).copied())
    }

    pub fn has_hidden_truth(&self) -> bool {
        self.hidden_truth.is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("registry needs at least one target domain".into()));
        }
        for s in &self.source {
            match s.label {
                Some(l) if l < self.n_c => {}
                _ => return Err(Error::Contract("source sample without valid label".into())),
            }
        }
        for (j, t) in self.targets.iter().enumerate() {
            for s in t {
                if s.label.is_some() {
                    return Err(Error::Contract(format!(
                        "target domain {} sample carries a label into training",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Canvas side of generated images.
pub const SYNTH_IMG_SIDE: usize = 32;

/// Knobs of the parametric renderer. A shift magnitude `m` in `[0, 1]`
/// scales each domain transform linearly.
#[derive(Debug, Clone)]
pub struct SyntheticStyle {
    /// Maximum domain rotation in radians (applied at m = 1).
    pub rot_max: f64,
    /// Maximum hue rotation in turns (applied at m = 1).
    pub hue_max: f64,
    /// Maximum additive Gaussian noise sigma (applied at m = 1).
    pub noise_max: f64,
    /// Source hue palette width in turns; domains shift out of this band.
    pub palette_width: f64,
    /// Per-sample rotation jitter in radians, present in every domain.
    pub rot_jitter: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            rot_max: 0.8,
            hue_max: 0.18,
            noise_max: 0.05,
            palette_width: 0.40,
            rot_jitter: 0.17,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed distance of a point (in shape-local units, radius 1) to the class glyph.
fn shape_sdf(class: usize, x: f64, y: f64) -> f64 {
    match class {
        // disk
        0 => (x * x + y * y).sqrt() - 1.0,
        // square
        1 => x.abs().max(y.abs()) - 0.82,
        // equilateral triangle
        2 => {
            let k = 3.0_f64.sqrt();
            let r = 0.95;
            let mut px = x.abs() - r;
            let mut py = y + r / k;
            if px + k * py > 0.0 {
                let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                px = nx;
                py = ny;
            }
            px -= px.clamp(-2.0 * r, 0.0);
            -(px * px + py * py).sqrt() * py.signum()
        }
        // plus / cross
        3 => {
            let bar_a = (x.abs() - 1.0).max(y.abs() - 0.34);
            let bar_b = (x.abs() - 0.34).max(y.abs() - 1.0);
            bar_a.min(bar_b)
        }
        // ring
        4 => ((x * x + y * y).sqrt() - 0.75).abs() - 0.28,
        // two horizontal bars
        5 => {
            let top = (x.abs() - 0.9).max((y - 0.5).abs() - 0.25);
            let bot = (x.abs() - 0.9).max((y + 0.5).abs() - 0.25);
            top.min(bot)
        }
        // regular polygons for any further classes
        k => {
            let sides = (k - 3) as f64; // class 6 -> 3.. climbing
            let n = sides.max(3.0) + 2.0;
            let ang = y.atan2(x) + std::f64::consts::PI / n;
            let rad = (x * x + y * y).sqrt();
            let sector = std::f64::consts::TAU / n;
            let a = ang.rem_euclid(sector) - sector / 2.0;
            rad * a.cos() - 0.85 * (std::f64::consts::PI / n).cos()
        }
    }
}

fn render_sample(
    class: usize,
    shift: f64,
    style: &SyntheticStyle,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let side = SYNTH_IMG_SIDE;
    let cx = side as f64 / 2.0 + rng.random_range(-3.0..3.0);
    let cy = side as f64 / 2.0 + rng.random_range(-3.0..3.0);
    let radius = 9.0 * rng.random_range(0.85..1.15);
    let rot = shift * style.rot_max * rng.random_range(0.75..1.25)
        + rng.random_range(-style.rot_jitter..style.rot_jitter);
    let hue = rng.random_range(0.0..style.palette_width) + shift * style.hue_max;
    let sat = rng.random_range(0.6..0.95);
    let val = rng.random_range(0.7..1.0);
    let fg = hsv_to_rgb(hue, sat, val);
    let bg_level = rng.random_range(0.08..0.22);
    let bg_hue = rng.random_range(0.0..style.palette_width) + shift * style.hue_max;
    let bg = hsv_to_rgb(bg_hue, rng.random_range(0.0..0.15), bg_level);
    let sigma = shift * style.noise_max;

    let (sin_r, cos_r) = rot.sin_cos();
    let mut img = Array3::<f32>::zeros((3, side, side));
    // coverage per pixel, then color + per-pixel noise
    for py in 0..side {
        for px in 0..side {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            // rotate the query point by -rot so the glyph appears rotated by +rot
            let qx = (dx * cos_r + dy * sin_r) / radius;
            let qy = (-dx * sin_r + dy * cos_r) / radius;
            let d = shape_sdf(class, qx, qy) * radius;
            let cov = (0.5 - d / 1.4).clamp(0.0, 1.0);
            for ch in 0..3 {
                let base = bg[ch] + cov * (fg[ch] - bg[ch]);
                let noise = if sigma > 0.0 {
                    crate::nnet::normal::<f64>(rng) * sigma
                } else {
                    // keep the per-sample RNG consumption identical across domains
                    let _ = ();
                    0.0
                };
                img[[ch, py, px]] = (base + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn synth_class_names(n_c: usize) -> Vec<String> {
    const NAMED: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bars"];
    (0..n_c)
        .map(|k| {
            if k < NAMED.len() {
                NAMED[k].to_string()
            } else {
                format!("poly{}", k - 1)
            }
        })
        .collect()
}

/// Generate a source plus `n_targets` shifted target domains.
///
/// Domain `j` (1-based) applies rotation, hue shift and noise proportional to
/// `shift_magnitudes[j-1]`; magnitude 0 reproduces the source distribution.
/// Bit-identical output for identical arguments and seed.
pub fn make_synthetic(
    n_c: usize,
    n_targets: usize,
    shift_magnitudes: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<DatasetRegistry> {
    make_synthetic_styled(
        n_c,
        n_targets,
        shift_magnitudes,
        per_class,
        seed,
        &SyntheticStyle::default(),
    )
}

/// `make_synthetic` with explicit renderer knobs.
pub fn make_synthetic_styled(
    n_c: usize,
    n_targets: usize,
    shift_magnitudes: &[f64],
    per_class: usize,
    seed: u64,
    style: &SyntheticStyle,
) -> Result<DatasetRegistry> {
    if n_targets != shift_magnitudes.len() {
        return Err(Error::Config(format!(
            "shift_magnitudes has {} entries but N = {}",
            shift_magnitudes.len(),
            n_targets
        )));
    }
    if n_c < 2 {
        return Err(Error::Config("n_c must be at least 2".into()));
    }
    if per_class < 10 {
        return Err(Error::Config("per_class must be at least 10".into()));
    }
    let render_domain = |domain_id: usize, shift: f64| -> (Vec<Sample>, Vec<usize>) {
        let mut rng = stream_rng(seed, &format!("synth-domain-{domain_id}"));
        let mut samples = Vec::with_capacity(n_c * per_class);
        let mut labels = Vec::with_capacity(n_c * per_class);
        for class in 0..n_c {
            for _ in 0..per_class {
                let image = render_sample(class, shift, style, &mut rng);
                samples.push(Sample {
                    image,
                    label: if domain_id == 0 { Some(class) } else { None },
                    domain_id,
                });
                labels.push(class);
            }
        }
        (samples, labels)
    };

    let (source, _) = render_domain(0, 0.0);
    let mut targets = Vec::with_capacity(n_targets);
    let mut truth = Vec::with_capacity(n_targets);
    for (j, &m) in shift_magnitudes.iter().enumerate() {
        let (samples, labels) = render_domain(j + 1, m);
        targets.push(samples);
        truth.push(labels);
    }
    let registry = DatasetRegistry {
        source,
        targets,
        n_c,
        class_names: synth_class_names(n_c),
        hidden_truth: Some(truth),
    };
    registry.validate()?;
    Ok(registry)
}

// ---------------------------------------------------------------------------
// Directory ingestion / export
// ---------------------------------------------------------------------------

const IMG_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn list_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMG_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for y in 0..h as usize {
        for x in 0..w as usize {
            for ch in 0..3 {
                out[[ch, y, x]] = f32::from(raw[(y * w as usize + x) * 3 + ch]) / 255.0;
            }
        }
    }
    Ok(out)
}

/// Ingest `root/source/<class>/<img>` and `root/target_<name>/<class|unlabeled>/<img>`.
///
/// The class set is defined by the source tree. Class folders under a target
/// are retained only as hidden ground truth for evaluation; every target
/// sample enters the registry unlabeled.
pub fn ingest_directory(root: impl AsRef<Path>) -> Result<DatasetRegistry> {
    let root = root.as_ref();
    let source_dir = root.join("source");
    if !source_dir.is_dir() {
        return Err(Error::Config(format!(
            "label space undefined: missing `source/` under {}",
            root.display()
        )));
    }
    let class_dirs = list_dirs(&source_dir)?;
    if class_dirs.is_empty() {
        return Err(Error::Config(format!(
            "label space undefined: no class folders under {}",
            source_dir.display()
        )));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let class_index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut source = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        for img_path in list_images(dir)? {
            source.push(Sample {
                image: load_image(&img_path)?,
                label: Some(class),
                domain_id: 0,
            });
        }
    }
    if source.is_empty() {
        return Err(Error::Config(format!(
            "source tree {} contains no images",
            source_dir.display()
        )));
    }

    let mut target_roots: Vec<PathBuf> = list_dirs(root)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("target_"))
                .unwrap_or(false)
        })
        .collect();
    target_roots.sort();
    if target_roots.is_empty() {
        return Err(Error::Config(format!(
            "no `target_*` trees under {}",
            root.display()
        )));
    }

    let mut targets = Vec::new();
    let mut truth: Vec<Vec<usize>> = Vec::new();
    let mut any_unlabeled = false;
    for (j, troot) in target_roots.iter().enumerate() {
        let tname = troot.file_name().unwrap().to_string_lossy().into_owned();
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for sub in list_dirs(troot)? {
            let sub_name = sub.file_name().unwrap().to_string_lossy().into_owned();
            let class = if sub_name == "unlabeled" {
                None
            } else {
                match class_index.get(sub_name.as_str()) {
                    Some(&c) => Some(c),
                    None => {
                        return Err(Error::LabelMismatch {
                            class: sub_name,
                            tree: tname,
                        })
                    }
                }
            };
            for img_path in list_images(&sub)? {
                samples.push(Sample {
                    image: load_image(&img_path)?,
                    label: None,
                    domain_id: j + 1,
                });
                match class {
                    Some(c) => labels.push(c),
                    None => any_unlabeled = true,
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::Config(format!("target tree {tname} contains no images")));
        }
        targets.push(samples);
        truth.push(labels);
    }

    let hidden_truth = if any_unlabeled { None } else { Some(truth) };
    let registry = DatasetRegistry {
        source,
        targets,
        n_c: class_names.len(),
        class_names,
        hidden_truth,
    };
    registry.validate()?;
    Ok(registry)
}

fn save_image(img: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                raw[(y * w + x) * 3 + ch] = (img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer length matches dims")
        .save(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

/// Write a registry back out in the `ingest_directory` layout for inspection.
/// Target class folders are reconstructed from hidden truth when available,
/// otherwise everything lands under `unlabeled/`.
pub fn export_directory(registry: &DatasetRegistry, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for (i, s) in registry.source.iter().enumerate() {
        let class = &registry.class_names[s.label.expect("source labeled")];
        let dir = root.join("source").join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_image(&s.image, &dir.join(format!("s_{i:05}.png")))?;
    }
    for (j, samples) in registry.targets.iter().enumerate() {
        let tdir = root.join(format!("target_{:02}", j + 1));
        for (i, s) in samples.iter().enumerate() {
            let key = SampleKey {
                domain_id: j + 1,
                index: i,
            };
            let sub = match registry.hidden_truth(key) {
                Some(c) => registry.class_names[c].clone(),
                None => "unlabeled".to_string(),
            };
            let dir = tdir.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            save_image(&s.image, &dir.join(format!("t{}_{i:05}.png", j + 1)))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Minibatch sampling
// ---------------------------------------------------------------------------

/// A training minibatch: `B_s` ledger rows (labeled pseudo-source) followed by
/// `B_t` unlabeled rows from the domain currently being adapted.
#[derive(Debug, Clone)]
pub struct Minibatch {
    /// Indices into the pseudo-source ledger.
    pub ledger_rows: Vec<usize>,
    /// Sample indices within the current target domain.
    pub target_rows: Vec<usize>,
    pub domain_id: usize,
}

/// Without-replacement cursor that reshuffles at each epoch boundary.
#[derive(Debug, Clone)]
pub struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochCursor {
    pub fn new(len: usize, mut rng: ChaCha8Rng) -> Self {
        assert!(len > 0, "cannot sample from an empty set");
        let mut order: Vec<usize> = (0..len).collect();
        shuffle(&mut order, &mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            shuffle(&mut self.order, &mut self.rng);
            self.pos = 0;
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next()).collect()
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates, explicit so the byte stream is pinned by our RNG alone.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Draws `B_s` ledger + `B_t` domain samples per call. Each underlying pool is
/// cycled without replacement within an epoch and reshuffled across epochs.
#[derive(Debug)]
pub struct MinibatchSampler {
    ledger_cursor: EpochCursor,
    target_cursor: EpochCursor,
    pub batch_source: usize,
    pub batch_target: usize,
    pub domain_id: usize,
}

impl MinibatchSampler {
    /// `seed`/`tag` pin the shuffle streams; callers derive the tag from
    /// (reiteration, domain) so every pass is independently replayable.
    pub fn new(
        ledger_len: usize,
        domain_len: usize,
        domain_id: usize,
        batch_source: usize,
        batch_target: usize,
        seed: u64,
        tag: &str,
    ) -> Result<Self> {
        if ledger_len == 0 {
            return Err(Error::Contract("ledger is empty".into()));
        }
        if domain_len == 0 && batch_target > 0 {
            return Err(Error::Contract("target domain is empty".into()));
        }
        Ok(Self {
            ledger_cursor: EpochCursor::new(ledger_len, stream_rng(seed, &format!("{tag}-ledger"))),
            target_cursor: EpochCursor::new(
                domain_len.max(1),
                stream_rng(seed, &format!("{tag}-target")),
            ),
            batch_source,
            batch_target,
            domain_id,
        })
    }

    pub fn next(&mut self) -> Minibatch {
        Minibatch {
            ledger_rows: self.ledger_cursor.take(self.batch_source),
            target_rows: self.target_cursor.take(self.batch_target),
            domain_id: self.domain_id,
        }
    }
}

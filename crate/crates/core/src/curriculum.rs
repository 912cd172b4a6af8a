//! Partial curricula: easiness scores, threshold constraints and pairwise annotations.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::model::{Constraint, CurriculumConstraintSet, FeatureMatrix, GroupAssignment, Modality};

/// Smallest accepted raster side.
pub const MIN_RASTER_SIDE: usize = 8;

/// Number of top window densities whose median is the edgeness score.
pub const TOP_WINDOWS: usize = 30;

/// Grayscale sketch; `0` is background, anything else is stroke.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl SketchRaster {
    /// `pixels` is row-major, `width * height` long.
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        ensure!(
            width >= MIN_RASTER_SIDE && height >= MIN_RASTER_SIDE,
            Data,
            "raster {width}x{height} is smaller than {MIN_RASTER_SIDE}x{MIN_RASTER_SIDE}"
        );
        ensure!(
            pixels.len() == width * height,
            Format,
            "raster {width}x{height} has {} pixels",
            pixels.len()
        );
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn is_stroke(&self, x: usize, y: usize) -> bool {
        self.pixel(x, y) > 0
    }

    /// Swaps stroke and background, for dark-on-light drawings.
    pub fn inverted(&self, maxval: u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| maxval.saturating_sub(p))
                .collect(),
        }
    }

    /// Parses binary (`P5`) or ASCII (`P2`) PGM with `maxval ≤ 255`.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = pgm_token(bytes, &mut pos)?;
        let binary = match magic.as_str() {
            "P5" => true,
            "P2" => false,
            other => return Err(Error::Format(format!("unsupported PGM magic {other:?}"))),
        };
        let width = pgm_number(bytes, &mut pos)?;
        let height = pgm_number(bytes, &mut pos)?;
        let maxval = pgm_number(bytes, &mut pos)?;
        ensure!(
            (1..=255).contains(&maxval),
            Format,
            "PGM maxval {maxval} not in 1..=255"
        );
        let count = width
            .checked_mul(height)
            .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
        let pixels = if binary {
            // exactly one whitespace byte separates the header from the raster
            pos += 1;
            let data = bytes.get(pos..pos + count).ok_or_else(|| {
                Error::Format(format!("PGM raster truncated, {count} bytes expected"))
            })?;
            data.to_vec()
        } else {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let v = pgm_number(bytes, &mut pos)?;
                ensure!(
                    v <= maxval,
                    Format,
                    "PGM sample {v} exceeds maxval {maxval}"
                );
                out.push(v as u8);
            }
            out
        };
        ensure!(
            pixels.iter().all(|&p| p as usize <= maxval),
            Format,
            "PGM sample exceeds maxval {maxval}"
        );
        Self::new(width, height, pixels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }

    /// Binary PGM with `maxval = 255`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Count of stroke pixels in `[x0, x0+w) × [y0, y0+h)` for every window, via an
    /// integral image.
    fn integral(&self) -> Vec<u64> {
        let (w, h) = (self.width, self.height);
        let mut sat = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(self.is_stroke(x, y));
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        sat
    }
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    ensure!(*pos > start, Format, "PGM header truncated");
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PGM number {tok:?}")))
}

/// Square window `[x, x+side) × [y, y+side)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

/// Draws `n` windows with side `⌊u · min(w, h)⌋`, `u ~ U[0.2, 0.8]`, at uniform positions.
pub fn sample_windows(width: usize, height: usize, n: usize, rng_seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let short = width.min(height);
    (0..n)
        .map(|_| {
            let frac: f64 = rng.random_range(0.2..=0.8);
            let side = ((frac * short as f64).floor() as usize).clamp(1, short);
            let x = rng.random_range(0..=width - side);
            let y = rng.random_range(0..=height - side);
            Window { x, y, side }
        })
        .collect()
}

/// Median of the [`TOP_WINDOWS`] highest stroke densities over `n_windows` random windows.
pub fn edgeness_score(raster: &SketchRaster, n_windows: usize, rng_seed: u64) -> Result<f64> {
    ensure!(n_windows >= 1, InvalidArgument, "need at least one window");
    let sat = raster.integral();
    let stride = raster.width + 1;
    let mut densities: Vec<f64> = sample_windows(raster.width, raster.height, n_windows, rng_seed)
        .into_iter()
        .map(|w| {
            let (x1, y1) = (w.x + w.side, w.y + w.side);
            let count = sat[y1 * stride + x1] + sat[w.y * stride + w.x]
                - sat[w.y * stride + x1]
                - sat[y1 * stride + w.x];
            count as f64 / (w.side * w.side) as f64
        })
        .collect();
    densities.sort_by(|a, b| b.total_cmp(a));
    densities.truncate(TOP_WINDOWS);
    Ok(median(&mut densities))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-sample easiness of one modality; higher is easier.
#[derive(Debug, Clone, PartialEq)]
pub struct EasinessScores {
    pub modality: Modality,
    scores: Vec<f64>,
}

impl EasinessScores {
    pub fn new(modality: Modality, scores: Vec<f64>) -> Result<Self> {
        ensure!(
            scores.iter().all(|s| s.is_finite()),
            Data,
            "easiness scores must be finite"
        );
        Ok(Self { modality, scores })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `0.1 · (max − min)`, the default pairing threshold.
    pub fn default_delta(&self) -> f64 {
        let (lo, hi) = self
            .scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                (lo.min(s), hi.max(s))
            });
        if self.scores.is_empty() {
            0.0
        } else {
            0.1 * (hi - lo)
        }
    }
}

/// Pairs `(hard = k, easy = k')` with `score(k') − score(k) ≥ δ` and `score(k') > score(k)`,
/// keeping a seeded uniform fraction `ρ` of them.
pub fn constraints_from_scores(
    scores: &EasinessScores,
    delta: f64,
    rho: f64,
    rng_seed: u64,
) -> Result<CurriculumConstraintSet> {
    ensure!(
        delta >= 0.0,
        InvalidArgument,
        "delta must be >= 0, got {delta}"
    );
    ensure!(
        (0.0..=1.0).contains(&rho),
        InvalidArgument,
        "subsample ratio must lie in [0, 1], got {rho}"
    );
    let s = &scores.scores;
    let mut candidates = Vec::new();
    for hard in 0..s.len() {
        for easy in 0..s.len() {
            let gap = s[easy] - s[hard];
            if gap > 0.0 && gap >= delta {
                candidates.push(Constraint {
                    modality: scores.modality,
                    hard,
                    easy,
                });
            }
        }
    }
    let keep = (rho * candidates.len() as f64).round() as usize;
    let kept: Vec<Constraint> = if keep >= candidates.len() {
        candidates
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut picked = index::sample(&mut rng, candidates.len(), keep).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| candidates[i]).collect()
    };
    let mut set = CurriculumConstraintSet::new(kept);
    match scores.modality {
        Modality::Sketch => {
            set.delta_sketch = Some(delta);
            set.rho_sketch = Some(rho);
        }
        Modality::Image => {
            set.delta_image = Some(delta);
            set.rho_image = Some(rho);
        }
    }
    Ok(set)
}

/// For every sample, a pair with its nearest same-group neighbour (ties to the lower
/// index). Unordered duplicates are dropped; singletons get no pair.
pub fn propose_annotation_pairs(
    fs: &FeatureMatrix,
    groups: &GroupAssignment,
) -> Result<Vec<(usize, usize)>> {
    ensure!(
        groups.len() == fs.len(),
        Dimension,
        "{} group entries for {} samples",
        groups.len(),
        fs.len()
    );
    let members = groups.members();
    let f = fs.matrix();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for k in 0..fs.len() {
        let mut best: Option<(f64, usize)> = None;
        for &j in &members[&groups.group(k)] {
            if j == k {
                continue;
            }
            let d = (f.column(k) - f.column(j)).norm_squared();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            if seen.insert((k.min(j), k.max(j))) {
                pairs.push((k, j));
            }
        }
    }
    Ok(pairs)
}

/// Annotator verdict on a displayed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnnotationChoice {
    /// The left sketch is easier.
    Left,
    /// The right sketch is easier.
    Right,
    Skip,
}

impl AnnotationChoice {
    pub fn token(self) -> &'static str {
        match self {
            AnnotationChoice::Left => "left",
            AnnotationChoice::Right => "right",
            AnnotationChoice::Skip => "skip",
        }
    }
}

impl FromStr for AnnotationChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(AnnotationChoice::Left),
            "right" => Ok(AnnotationChoice::Right),
            "skip" => Ok(AnnotationChoice::Skip),
            other => Err(Error::Format(format!(
                "unknown choice {other:?}, expected left, right or skip"
            ))),
        }
    }
}

/// One answered pair `(left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Annotation {
    pub left: usize,
    pub right: usize,
    pub choice: AnnotationChoice,
}

/// The chosen sketch becomes the easy side; skips yield nothing.
pub fn constraints_from_annotations(
    answers: &[Annotation],
    modality: Modality,
) -> CurriculumConstraintSet {
    CurriculumConstraintSet::new(answers.iter().filter_map(|a| {
        let (hard, easy) = match a.choice {
            AnnotationChoice::Left => (a.right, a.left),
            AnnotationChoice::Right => (a.left, a.right),
            AnnotationChoice::Skip => return None,
        };
        Some(Constraint {
            modality,
            hard,
            easy,
        })
    }))
}

//! Seeded synthetic cross-modal data with planted coupled dictionaries.
//!
//! Matched sketch/image pairs share one sparse code. Each class fixes the support
//! and the signs of its codes; magnitudes vary per sample. A `hard_fraction` of each modality gets the larger noise level, and the
//! negated noise level serves as ground-truth easiness.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Result};
use crate::model::{FeatureMatrix, GroupAssignment, Matrix, Modality, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub sketches: usize,
    pub images: usize,
    pub dim_sketch: usize,
    pub dim_image: usize,
    /// Atoms of the planted dictionaries.
    pub n_true: usize,
    pub classes: usize,
    pub noise_easy: f64,
    pub noise_hard: f64,
    pub hard_fraction: f64,
    /// Matched pairs in the held-out split; zero disables it.
    pub test_pairs: usize,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sketches: 50,
            images: 50,
            dim_sketch: 12,
            dim_image: 12,
            n_true: 10,
            classes: 5,
            noise_easy: 0.05,
            noise_hard: 0.25,
            hard_fraction: 0.3,
            test_pairs: 0,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    /// Nonzeros per planted code.
    pub fn support_size(&self) -> usize {
        (self.n_true / 5).max(1)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.sketches >= 1 && self.images >= 1,
            InvalidArgument,
            "need at least one sample per modality"
        );
        ensure!(
            self.dim_sketch >= 1 && self.dim_image >= 1,
            InvalidArgument,
            "feature dimensions must be >= 1"
        );
        ensure!(self.n_true >= 1, InvalidArgument, "n_true must be >= 1");
        ensure!(
            self.classes >= 1,
            InvalidArgument,
            "need at least one class"
        );
        ensure!(
            self.noise_easy >= 0.0 && self.noise_easy.is_finite() && self.noise_hard.is_finite(),
            InvalidArgument,
            "noise levels must be finite and >= 0"
        );
        ensure!(
            self.noise_easy <= self.noise_hard,
            InvalidArgument,
            "noise_easy ({}) exceeds noise_hard ({})",
            self.noise_easy,
            self.noise_hard
        );
        ensure!(
            (0.0..=1.0).contains(&self.hard_fraction),
            InvalidArgument,
            "hard_fraction must lie in [0, 1]"
        );
        Ok(())
    }
}

/// One split of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub fs: FeatureMatrix,
    pub fi: FeatureMatrix,
    pub groups_sketch: GroupAssignment,
    pub groups_image: GroupAssignment,
    /// `(sketch, image)` pairs generated from the same code.
    pub matches: Vec<(usize, usize)>,
    pub easiness_sketch: Vec<f64>,
    pub easiness_image: Vec<f64>,
    pub hard_sketch: Vec<bool>,
    pub hard_image: Vec<bool>,
    pub codes_sketch: Matrix,
    pub codes_image: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub dict_sketch: Matrix,
    pub dict_image: Matrix,
    pub train: SynthSplit,
    pub test: Option<SynthSplit>,
}

fn unit_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut d = Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut c in d.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        } else {
            c[0] = 1.0;
        }
    }
    d
}

struct Planted<'a> {
    spec: &'a SynthSpec,
    /// Per class: `(atom, sign)` of every nonzero.
    supports: Vec<Vec<(usize, f64)>>,
    dict_sketch: &'a Matrix,
    dict_image: &'a Matrix,
}

impl Planted<'_> {
    fn code(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.spec.n_true];
        for &(a, sign) in &self.supports[class] {
            c[a] = sign * rng.random_range(0.5..=1.5);
        }
        c
    }

    fn split(&self, rng: &mut ChaCha8Rng, k: usize, l: usize) -> Result<SynthSplit> {
        let spec = self.spec;
        let classes = spec.classes;
        let paired = k.min(l);
        let mut codes_s = Matrix::zeros(spec.n_true, k);
        let mut codes_i = Matrix::zeros(spec.n_true, l);
        for j in 0..k.max(l) {
            let c = Vector::from_vec(self.code(rng, j % classes));
            if j < k {
                codes_s.set_column(j, &c);
            }
            if j < l {
                codes_i.set_column(j, &c);
            }
        }

        let mut modality = |n: usize, dict: &Matrix, codes: &Matrix, m: Modality| {
            let n_hard = (spec.hard_fraction * n as f64).round() as usize;
            let mut hard = vec![false; n];
            for i in index::sample(rng, n, n_hard) {
                hard[i] = true;
            }
            let mut f = dict * codes;
            let mut easiness = Vec::with_capacity(n);
            for (j, mut col) in f.column_iter_mut().enumerate() {
                let sigma = if hard[j] {
                    spec.noise_hard
                } else {
                    spec.noise_easy
                };
                easiness.push(-sigma);
                if sigma > 0.0 {
                    for x in col.iter_mut() {
                        *x += sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            let groups = GroupAssignment::new(m, (0..n).map(|j| j % classes).collect());
            FeatureMatrix::new(m, f).map(|f| (f, groups, easiness, hard))
        };
        let (fs, gs, es, hs) = modality(k, self.dict_sketch, &codes_s, Modality::Sketch)?;
        let (fi, gi, ei, hi) = modality(l, self.dict_image, &codes_i, Modality::Image)?;
        Ok(SynthSplit {
            fs,
            fi,
            groups_sketch: gs,
            groups_image: gi,
            matches: (0..paired).map(|j| (j, j)).collect(),
            easiness_sketch: es,
            easiness_image: ei,
            hard_sketch: hs,
            hard_image: hi,
            codes_sketch: codes_s,
            codes_image: codes_i,
        })
    }
}

/// Draws a dataset; identical specs give bit-identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let dict_sketch = unit_columns(&mut rng, spec.dim_sketch, spec.n_true);
    let dict_image = unit_columns(&mut rng, spec.dim_image, spec.n_true);
    let s = spec.support_size();
    let supports = (0..spec.classes)
        .map(|_| {
            let mut sup = index::sample(&mut rng, spec.n_true, s).into_vec();
            sup.sort_unstable();
            sup.into_iter()
                .map(|a| (a, if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
                .collect()
        })
        .collect();
    let planted = Planted {
        spec,
        supports,
        dict_sketch: &dict_sketch,
        dict_image: &dict_image,
    };
    let train = planted.split(&mut rng, spec.sketches, spec.images)?;
    let test = if spec.test_pairs > 0 {
        Some(planted.split(&mut rng, spec.test_pairs, spec.test_pairs)?)
    } else {
        None
    };
    Ok(SynthData {
        spec: spec.clone(),
        dict_sketch,
        dict_image,
        train,
        test,
    })
}

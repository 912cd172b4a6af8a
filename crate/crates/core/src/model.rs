//! Domain types shared by every stage of the pipeline.
//!
//! Matrices are `nalgebra::DMatrix<f64>` with one sample per column. Indices
//! are 0-based throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Column-norm slack tolerated on dictionary atoms.
pub const ATOM_NORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sketch,
    Image,
}

impl Modality {
    /// Single-letter token used in the CSV formats.
    pub fn token(self) -> &'static str {
        match self {
            Modality::Sketch => "S",
            Modality::Image => "I",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "S" | "s" | "sketch" => Ok(Modality::Sketch),
            "I" | "i" | "image" => Ok(Modality::Image),
            other => Err(Error::Format(format!("unknown modality `{other}`"))),
        }
    }
}

fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Per-sample feature columns of one modality (`m × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    modality: Modality,
    data: Matrix,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, data: Matrix) -> Result<Self> {
        ensure!(
            data.nrows() >= 1 && data.ncols() >= 1,
            Data,
            "feature matrix must be non-empty, got {}x{}",
            data.nrows(),
            data.ncols()
        );
        ensure!(
            all_finite(&data),
            Data,
            "feature matrix has non-finite entries"
        );
        Ok(Self { modality, data })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }
}

/// Atom matrix of one modality; every column has 2-norm at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    modality: Modality,
    atoms: Matrix,
}

impl Dictionary {
    pub fn new(modality: Modality, atoms: Matrix) -> Result<Self> {
        ensure!(
            all_finite(&atoms),
            Data,
            "dictionary has non-finite entries"
        );
        for (j, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            ensure!(
                norm <= 1.0 + ATOM_NORM_TOL,
                Data,
                "atom {j} has norm {norm} > 1"
            );
        }
        Ok(Self { modality, atoms })
    }

    /// Builds a dictionary by scaling every column with norm above one back onto the unit sphere.
    pub fn from_projected(modality: Modality, mut atoms: Matrix) -> Result<Self> {
        for mut col in atoms.column_iter_mut() {
            let norm = col.norm();
            if norm > 1.0 {
                col /= norm;
            }
        }
        Self::new(modality, atoms)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.atoms
    }

    pub fn into_matrix(self) -> Matrix {
        self.atoms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeLayout {
    Single(Modality),
    /// `[C^S C^I]` where the first `sketches` columns belong to the sketch modality.
    Joint {
        sketches: usize,
    },
}

/// Sparse codes, one column per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    layout: CodeLayout,
    codes: Matrix,
}

impl CodeMatrix {
    pub fn new(layout: CodeLayout, codes: Matrix) -> Result<Self> {
        ensure!(
            all_finite(&codes),
            Data,
            "code matrix has non-finite entries"
        );
        if let CodeLayout::Joint { sketches } = layout {
            ensure!(
                sketches <= codes.ncols(),
                Dimension,
                "joint code split {sketches} exceeds width {}",
                codes.ncols()
            );
        }
        Ok(Self { layout, codes })
    }

    /// Concatenates sketch and image codes column-wise.
    pub fn joint(sketch: &Matrix, image: &Matrix) -> Result<Self> {
        ensure!(
            sketch.nrows() == image.nrows(),
            Dimension,
            "code heights differ: {} vs {}",
            sketch.nrows(),
            image.nrows()
        );
        let k = sketch.ncols();
        let mut codes = Matrix::zeros(sketch.nrows(), k + image.ncols());
        codes.columns_mut(0, k).copy_from(sketch);
        codes.columns_mut(k, image.ncols()).copy_from(image);
        Self::new(CodeLayout::Joint { sketches: k }, codes)
    }

    pub fn layout(&self) -> CodeLayout {
        self.layout
    }

    pub fn n_atoms(&self) -> usize {
        self.codes.nrows()
    }

    pub fn len(&self) -> usize {
        self.codes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.ncols() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.codes
    }

    pub fn into_matrix(self) -> Matrix {
        self.codes
    }

    /// Number of sketch columns in a joint matrix.
    pub fn sketch_count(&self) -> usize {
        match self.layout {
            CodeLayout::Joint { sketches } => sketches,
            CodeLayout::Single(Modality::Sketch) => self.codes.ncols(),
            CodeLayout::Single(Modality::Image) => 0,
        }
    }

    pub fn sketch_codes(&self) -> Matrix {
        self.codes.columns(0, self.sketch_count()).into_owned()
    }

    pub fn image_codes(&self) -> Matrix {
        let k = self.sketch_count();
        self.codes.columns(k, self.codes.ncols() - k).into_owned()
    }
}

/// One partial-order pair: the sample `hard` should not be weighted above `easy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Constraint {
    pub modality: Modality,
    pub hard: usize,
    pub easy: usize,
}

/// Deduplicated list of ordering constraints. A constraint's id is its position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurriculumConstraintSet {
    constraints: Vec<Constraint>,
    pub delta_sketch: Option<f64>,
    pub delta_image: Option<f64>,
    pub rho_sketch: Option<f64>,
    pub rho_image: Option<f64>,
}

impl CurriculumConstraintSet {
    /// Drops self-pairs and repeated pairs, keeping first occurrences in order.
    pub fn new(constraints: impl IntoIterator<Item = Constraint>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let constraints = constraints
            .into_iter()
            .filter(|c| c.hard != c.easy && seen.insert(*c))
            .collect();
        Self {
            constraints,
            ..Self::default()
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter()
    }

    pub fn as_slice(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.constraints
            .iter()
            .filter(|c| c.modality == modality)
            .count()
    }

    /// Appends the constraints of `other`, keeping deduplication.
    pub fn merge(&self, other: &CurriculumConstraintSet) -> Self {
        let mut merged = Self::new(self.iter().chain(other.iter()).copied());
        merged.delta_sketch = self.delta_sketch.or(other.delta_sketch);
        merged.delta_image = self.delta_image.or(other.delta_image);
        merged.rho_sketch = self.rho_sketch.or(other.rho_sketch);
        merged.rho_image = self.rho_image.or(other.rho_image);
        merged
    }

    /// Checks every index against the modality sample counts.
    pub fn validate(&self, sketches: usize, images: usize) -> Result<()> {
        for c in &self.constraints {
            let n = match c.modality {
                Modality::Sketch => sketches,
                Modality::Image => images,
            };
            ensure!(
                c.hard < n && c.easy < n,
                Data,
                "constraint ({}, {}, {}) out of range for {n} samples",
                c.modality,
                c.hard,
                c.easy
            );
        }
        Ok(())
    }
}

/// Group (class or cluster) membership of every sample of one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    modality: Modality,
    group_of: Vec<usize>,
    sizes: BTreeMap<usize, usize>,
}

impl GroupAssignment {
    pub fn new(modality: Modality, group_of: Vec<usize>) -> Self {
        let mut sizes = BTreeMap::new();
        for &g in &group_of {
            *sizes.entry(g).or_insert(0) += 1;
        }
        Self {
            modality,
            group_of,
            sizes,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn group(&self, index: usize) -> usize {
        self.group_of[index]
    }

    pub fn groups(&self) -> &[usize] {
        &self.group_of
    }

    /// Size `E_g` of the group containing `index`.
    pub fn group_size_of(&self, index: usize) -> usize {
        self.sizes[&self.group_of[index]]
    }

    pub fn sizes(&self) -> &BTreeMap<usize, usize> {
        &self.sizes
    }

    /// Members of every group, ordered by group id then sample index.
    pub fn members(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &g) in self.group_of.iter().enumerate() {
            out.entry(g).or_default().push(i);
        }
        out
    }
}

/// Per-sample pacing weights and one slack per curriculum constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct PacingState {
    pub v_sketch: Vector,
    pub v_image: Vector,
    pub slacks: Vec<f64>,
}

impl PacingState {
    /// Every sample fully active, all slacks zero.
    pub fn full(sketches: usize, images: usize, constraints: usize) -> Self {
        Self {
            v_sketch: Vector::from_element(sketches, 1.0),
            v_image: Vector::from_element(images, 1.0),
            slacks: vec![0.0; constraints],
        }
    }

    /// Builds a state from weights, setting each slack to the smallest feasible value.
    pub fn with_tight_slacks(
        v_sketch: Vector,
        v_image: Vector,
        constraints: &CurriculumConstraintSet,
    ) -> Self {
        let mut state = Self {
            v_sketch,
            v_image,
            slacks: Vec::new(),
        };
        state.slacks = constraints
            .iter()
            .map(|c| (state.weight(c.modality, c.hard) - state.weight(c.modality, c.easy)).max(0.0))
            .collect();
        state
    }

    pub fn weight(&self, modality: Modality, index: usize) -> f64 {
        match modality {
            Modality::Sketch => self.v_sketch[index],
            Modality::Image => self.v_image[index],
        }
    }

    /// `[v^S; v^I]`.
    pub fn joint(&self) -> Vector {
        let k = self.v_sketch.len();
        let mut v = Vector::zeros(k + self.v_image.len());
        v.rows_mut(0, k).copy_from(&self.v_sketch);
        v.rows_mut(k, self.v_image.len()).copy_from(&self.v_image);
        v
    }

    pub fn min_weight(&self) -> f64 {
        self.v_sketch
            .iter()
            .chain(self.v_image.iter())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Box, slack sign and ordering rows, each within `tol`.
    pub fn check(&self, constraints: &CurriculumConstraintSet, tol: f64) -> Result<()> {
        for (i, &v) in self.v_sketch.iter().chain(self.v_image.iter()).enumerate() {
            ensure!(
                (-tol..=1.0 + tol).contains(&v),
                Data,
                "pacing weight {i} = {v} outside [0, 1]"
            );
        }
        ensure!(
            self.slacks.len() == constraints.len(),
            Dimension,
            "{} slacks for {} constraints",
            self.slacks.len(),
            constraints.len()
        );
        for (id, (c, &xi)) in constraints.iter().zip(&self.slacks).enumerate() {
            ensure!(xi >= -tol, Data, "slack {id} = {xi} is negative");
            let gap = self.weight(c.modality, c.hard) - self.weight(c.modality, c.easy);
            ensure!(
                gap <= xi + tol,
                Data,
                "constraint {id} violated: v_hard - v_easy = {gap} > slack {xi}"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    /// Group-normalized linear reward `-γ Σ v_k / E_g(k)`.
    A,
    /// Soft weighting `(γ/2) Σ (v² - 2v)`.
    B,
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Regularizer::A),
            "B" | "b" => Ok(Regularizer::B),
            other => Err(Error::InvalidArgument(format!(
                "unknown regularizer `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::A => "A",
            Regularizer::B => "B",
        })
    }
}

/// How the Laplacian coupling enters the pacing QP's quadratic matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianForm {
    /// Off-diagonal `β w_pq ‖c_p − c_q‖²`.
    Paper,
    /// The expansion of `Tr(C V L V C^T)` in `v`: `β L_pq c_p·c_q`.
    Exact,
}

impl FromStr for LaplacianForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" => Ok(LaplacianForm::Paper),
            "exact" => Ok(LaplacianForm::Exact),
            other => Err(Error::InvalidArgument(format!(
                "unknown laplacian form `{other}`"
            ))),
        }
    }
}

impl fmt::Display for LaplacianForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LaplacianForm::Paper => "paper",
            LaplacianForm::Exact => "exact",
        })
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Initial pace. Zero together with `mu = 0` disables pacing (all weights pinned to one).
    pub gamma0: f64,
    pub eta: f64,
    pub mu: f64,
    pub n_atoms: usize,
    pub sigma: f64,
    pub regularizer: Regularizer,
    pub laplacian_form: LaplacianForm,
    /// Use the literal `-(γ/2) Q(v)` sign for regularizer B.
    pub literal_sp_b: bool,
    pub max_outer_iters: usize,
    pub rel_tol: f64,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma0: 1.0,
            eta: 1.3,
            mu: 1.0,
            n_atoms: 50,
            sigma: 1.0,
            regularizer: Regularizer::B,
            laplacian_form: LaplacianForm::Paper,
            literal_sp_b: false,
            max_outer_iters: 60,
            rel_tol: 1e-4,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    /// True when `γ₀ = μ = 0`: plain coupled dictionary learning with all weights at one.
    pub fn is_ablation(&self) -> bool {
        self.gamma0 == 0.0 && self.mu == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0, InvalidArgument, "alpha must be >= 0");
        ensure!(self.beta >= 0.0, InvalidArgument, "beta must be >= 0");
        ensure!(
            self.gamma0 > 0.0 || self.is_ablation(),
            InvalidArgument,
            "gamma0 must be > 0 (or gamma0 = mu = 0 for the ablation)"
        );
        ensure!(self.eta > 1.0, InvalidArgument, "eta must be > 1");
        ensure!(self.mu >= 0.0, InvalidArgument, "mu must be >= 0");
        ensure!(
            self.n_atoms >= 1,
            InvalidArgument,
            "dictionary size must be >= 1"
        );
        ensure!(self.sigma > 0.0, InvalidArgument, "sigma must be > 0");
        ensure!(self.rel_tol > 0.0, InvalidArgument, "rel_tol must be > 0");
        ensure!(
            self.max_outer_iters >= 1,
            InvalidArgument,
            "max_outer_iters must be >= 1"
        );
        let finite = [
            self.alpha,
            self.beta,
            self.gamma0,
            self.eta,
            self.mu,
            self.sigma,
        ];
        ensure!(
            finite.iter().all(|x| x.is_finite()),
            InvalidArgument,
            "hyperparameters must be finite"
        );
        Ok(())
    }
}

//! Alternating minimization: pacing weights, then codes, then dictionaries, then pace.
//!
//! Every outer iteration is evaluated at a fixed pace `γ`. A pacing solution is kept
//! only when it does not raise the true objective; the literal ("paper") coupling in
//! `R` is a surrogate of the Laplacian term, so when it fails the exact expansion,
//! whose minimizer is optimal for the true objective, is tried instead.

use std::path::Path;

use log::{debug, info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dictionary::{update_dictionary, DictionarySolverConfig};
use crate::error::{ensure, Error, Result};
use crate::io::{self, MatrixFormat};
use crate::laplacian::GraphLaplacian;
use crate::model::{
    CodeMatrix, CurriculumConstraintSet, Dictionary, FeatureMatrix, GroupAssignment, LaplacianForm,
    Matrix, Modality, ModelConfig, PacingState, Vector,
};
use crate::pacing::{
    advance_pace, assemble_qp, per_sample_losses, self_paced_value, solve_pacing, PaceParams,
    QpSettings,
};
use crate::sparse_coding::{update_codes, CodeProblem, CodeSolverConfig, LassoEncoder};

/// Smallest weight at which the pace counts as saturated.
pub const SATURATION: f64 = 0.99;

/// Inner-solver settings shared by all outer iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerSettings {
    pub code: CodeSolverConfig,
    pub dictionary: DictionarySolverConfig,
    pub qp: QpSettings,
    /// Encode/dictionary alternations during initialization.
    pub warmup_iters: usize,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            code: CodeSolverConfig::default(),
            dictionary: DictionarySolverConfig::default(),
            qp: QpSettings::default(),
            warmup_iters: 10,
        }
    }
}

/// Inputs that stay fixed during training.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub fs: &'a FeatureMatrix,
    pub fi: &'a FeatureMatrix,
    pub lap: &'a GraphLaplacian,
    pub constraints: &'a CurriculumConstraintSet,
    /// Needed by regularizer A.
    pub groups: Option<(&'a GroupAssignment, &'a GroupAssignment)>,
}

impl TrainingData<'_> {
    fn validate(&self) -> Result<()> {
        let (k, l) = (self.fs.len(), self.fi.len());
        ensure!(
            self.fs.modality() == Modality::Sketch && self.fi.modality() == Modality::Image,
            InvalidArgument,
            "expected sketch then image features"
        );
        ensure!(
            self.lap.size() == k + l && self.lap.sketches() == k,
            Dimension,
            "graph has {} nodes ({} sketches) for {k} sketches and {l} images",
            self.lap.size(),
            self.lap.sketches()
        );
        self.constraints.validate(k, l)?;
        if let Some((gs, gi)) = self.groups {
            ensure!(
                gs.len() == k && gi.len() == l,
                Dimension,
                "groups cover ({}, {}) samples, expected ({k}, {l})",
                gs.len(),
                gi.len()
            );
        }
        Ok(())
    }
}

/// Terms of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub recon_sketch: f64,
    pub recon_image: f64,
    pub sparsity: f64,
    pub laplacian: f64,
    pub fsp: f64,
    pub fpc: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.recon_sketch + self.recon_image + self.sparsity + self.laplacian + self.fsp + self.fpc
    }
}

/// Objective at the start of an iteration and after each block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockObjectives {
    pub start: f64,
    pub after_pacing: f64,
    pub after_codes: f64,
    pub after_dictionary: f64,
}

impl BlockObjectives {
    pub fn sequence(&self) -> [f64; 4] {
        [
            self.start,
            self.after_pacing,
            self.after_codes,
            self.after_dictionary,
        ]
    }
}

/// Which pacing candidate an iteration kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacingOutcome {
    /// Ablation: weights pinned to one.
    Pinned,
    Accepted(LaplacianForm),
    /// No candidate lowered the objective; the previous weights stay.
    Kept,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub gamma: f64,
    /// Terms after the dictionary update.
    pub terms: ObjectiveTerms,
    pub blocks: BlockObjectives,
    pub pacing: PacingOutcome,
    pub min_weight: f64,
    pub max_slack: f64,
}

impl HistoryRow {
    pub fn objective(&self) -> f64 {
        self.terms.total()
    }

    /// `|J_start − J_end| / |J_start|` at this iteration's pace.
    pub fn relative_change(&self) -> f64 {
        let b = &self.blocks;
        (b.start - b.after_dictionary).abs() / b.start.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub dict_sketch: Dictionary,
    pub dict_image: Dictionary,
    pub codes: CodeMatrix,
    pub pacing: PacingState,
    pub gamma: f64,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    /// Warm-up LASSO objectives `Σ ‖f − D c‖² + α‖c‖₁`, one per encode pass.
    pub warmup_objectives: Vec<f64>,
    pub converged: bool,
    /// Solver error that ended training early.
    pub failure: Option<String>,
}

fn encode_all(d: &Matrix, f: &Matrix, alpha: f64) -> Result<(Matrix, f64)> {
    let enc = LassoEncoder::new(d, alpha)?;
    let cols: Vec<(Vector, f64)> = (0..f.ncols())
        .into_par_iter()
        .map(|j| {
            let c = enc.encode(f.column(j))?;
            let obj = enc.objective(f.column(j), &c);
            Ok((c, obj))
        })
        .collect::<Result<_>>()?;
    let total = cols.iter().map(|(_, o)| o).sum();
    let codes: Vec<Vector> = cols.into_iter().map(|(c, _)| c).collect();
    Ok((Matrix::from_columns(&codes), total))
}

/// Atoms from distinct random normalized columns; zero columns and atoms beyond the
/// sample count are Gaussian.
fn seed_atoms(f: &Matrix, n_atoms: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = f.nrows();
    let picked = index::sample(rng, f.ncols(), n_atoms.min(f.ncols())).into_vec();
    let mut d = Matrix::zeros(m, n_atoms);
    for a in 0..n_atoms {
        let mut col: Vector = match picked.get(a) {
            Some(&j) => f.column(j).into_owned(),
            None => Vector::zeros(m),
        };
        if col.norm() == 0.0 {
            col = Vector::from_fn(m, |_, _| rng.sample(StandardNormal));
        }
        let norm = col.norm();
        d.set_column(a, &(col / norm));
    }
    d
}

/// Learns one dictionary by alternating LASSO encoding and the unweighted dictionary
/// update, recording the LASSO objective after every encode.
fn warm_up(
    f: &FeatureMatrix,
    n_atoms: usize,
    alpha: f64,
    settings: &TrainerSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Dictionary, Vec<f64>)> {
    let mut dict = Dictionary::from_projected(f.modality(), seed_atoms(f.matrix(), n_atoms, rng))?;
    let ones = Vector::from_element(f.len(), 1.0);
    let mut objectives = Vec::with_capacity(settings.warmup_iters);
    for _ in 0..settings.warmup_iters {
        let (codes, obj) = encode_all(dict.matrix(), f.matrix(), alpha)?;
        objectives.push(obj);
        dict = update_dictionary(f, &codes, &ones, &dict, &settings.dictionary)?.dictionary;
    }
    Ok((dict, objectives))
}

fn relabel(d: &Dictionary, modality: Modality) -> Result<Dictionary> {
    Dictionary::new(modality, d.matrix().clone())
}

/// Dictionaries from seeded warm-up (joint when both modalities share a dimension),
/// codes from a final encode, all weights one, `γ = γ₀`.
pub fn initialize(
    fs: &FeatureMatrix,
    fi: &FeatureMatrix,
    cfg: &ModelConfig,
    settings: &TrainerSettings,
) -> Result<TrainState> {
    cfg.validate()?;
    ensure!(!fs.is_empty() && !fi.is_empty(), Data, "empty modality");
    if cfg.n_atoms > fs.len().min(fi.len()) {
        warn!(
            "dictionary size {} exceeds the smaller modality ({} samples)",
            cfg.n_atoms,
            fs.len().min(fi.len())
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (ds, di, warmup_objectives) = if fs.dim() == fi.dim() {
        let mut stacked = Matrix::zeros(fs.dim(), fs.len() + fi.len());
        stacked.columns_mut(0, fs.len()).copy_from(fs.matrix());
        stacked
            .columns_mut(fs.len(), fi.len())
            .copy_from(fi.matrix());
        let joint = FeatureMatrix::new(Modality::Sketch, stacked)?;
        let (d, objs) = warm_up(&joint, cfg.n_atoms, cfg.alpha, settings, &mut rng)?;
        (
            relabel(&d, Modality::Sketch)?,
            relabel(&d, Modality::Image)?,
            objs,
        )
    } else {
        let (ds, mut objs) = warm_up(fs, cfg.n_atoms, cfg.alpha, settings, &mut rng)?;
        let (di, objs_i) = warm_up(fi, cfg.n_atoms, cfg.alpha, settings, &mut rng)?;
        for (a, b) in objs.iter_mut().zip(objs_i) {
            *a += b;
        }
        (ds, di, objs)
    };
    let (cs, _) = encode_all(ds.matrix(), fs.matrix(), cfg.alpha)?;
    let (ci, _) = encode_all(di.matrix(), fi.matrix(), cfg.alpha)?;
    Ok(TrainState {
        dict_sketch: ds,
        dict_image: di,
        codes: CodeMatrix::joint(&cs, &ci)?,
        pacing: PacingState::full(fs.len(), fi.len(), 0),
        gamma: cfg.gamma0,
        iteration: 0,
        history: Vec::new(),
        warmup_objectives,
        converged: false,
        failure: None,
    })
}

struct Parts<'a> {
    ds: &'a Dictionary,
    di: &'a Dictionary,
    codes: &'a CodeMatrix,
    pacing: &'a PacingState,
}

fn objective_of(
    parts: &Parts<'_>,
    gamma: f64,
    data: &TrainingData<'_>,
    cfg: &ModelConfig,
) -> Result<ObjectiveTerms> {
    let problem = CodeProblem {
        ds: parts.ds,
        di: parts.di,
        fs: data.fs,
        fi: data.fi,
        pacing: parts.pacing,
        lap: data.lap,
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    let t = problem.terms(parts.codes.matrix())?;
    let fsp = if gamma == 0.0 {
        0.0
    } else {
        self_paced_value(
            &parts.pacing.v_sketch,
            &parts.pacing.v_image,
            data.groups,
            gamma,
            cfg.regularizer,
            cfg.literal_sp_b,
        )?
    };
    ensure!(
        parts.pacing.slacks.len() == data.constraints.len(),
        Dimension,
        "{} slacks for {} constraints",
        parts.pacing.slacks.len(),
        data.constraints.len()
    );
    Ok(ObjectiveTerms {
        recon_sketch: t.recon_sketch,
        recon_image: t.recon_image,
        sparsity: t.sparsity,
        laplacian: t.laplacian,
        fsp,
        fpc: cfg.mu * parts.pacing.slacks.iter().sum::<f64>(),
    })
}

/// Full objective at the state's current pace.
pub fn total_objective(
    state: &TrainState,
    data: &TrainingData<'_>,
    cfg: &ModelConfig,
) -> Result<ObjectiveTerms> {
    let parts = Parts {
        ds: &state.dict_sketch,
        di: &state.dict_image,
        codes: &state.codes,
        pacing: &state.pacing,
    };
    objective_of(&parts, state.gamma, data, cfg)
}

fn max_slack(p: &PacingState) -> f64 {
    p.slacks.iter().copied().fold(0.0, f64::max)
}

/// One outer iteration at the state's pace. Returns the history row.
fn step(
    state: &mut TrainState,
    data: &TrainingData<'_>,
    cfg: &ModelConfig,
    settings: &TrainerSettings,
) -> Result<HistoryRow> {
    let gamma = state.gamma;
    let eval = |pacing: &PacingState, codes: &CodeMatrix, ds: &Dictionary, di: &Dictionary| {
        objective_of(
            &Parts {
                ds,
                di,
                codes,
                pacing,
            },
            gamma,
            data,
            cfg,
        )
        .map(|t| t.total())
    };
    let start = eval(
        &state.pacing,
        &state.codes,
        &state.dict_sketch,
        &state.dict_image,
    )?;

    let outcome = if cfg.is_ablation() {
        PacingOutcome::Pinned
    } else {
        let (ls, li) = per_sample_losses(
            &state.dict_sketch,
            &state.dict_image,
            &state.codes,
            data.fs,
            data.fi,
        )?;
        let mut forms = vec![cfg.laplacian_form];
        if cfg.laplacian_form == LaplacianForm::Paper && cfg.beta != 0.0 {
            forms.push(LaplacianForm::Exact);
        }
        let mut outcome = PacingOutcome::Kept;
        for form in forms {
            let params = PaceParams {
                beta: cfg.beta,
                gamma,
                mu: cfg.mu,
                regularizer: cfg.regularizer,
                form,
                literal_sp_b: cfg.literal_sp_b,
            };
            let qp = assemble_qp(
                (&ls, &li),
                &state.codes,
                data.lap,
                data.groups,
                data.constraints,
                &params,
            )?;
            let sol = solve_pacing(&qp, Some(&state.pacing), &settings.qp)?;
            let candidate = PacingState::with_tight_slacks(
                sol.state.v_sketch,
                sol.state.v_image,
                data.constraints,
            );
            let value = eval(
                &candidate,
                &state.codes,
                &state.dict_sketch,
                &state.dict_image,
            )?;
            if value <= start {
                state.pacing = candidate;
                outcome = PacingOutcome::Accepted(form);
                break;
            }
            debug!("pacing candidate ({form}) raises the objective: {value} > {start}");
        }
        outcome
    };
    let after_pacing = eval(
        &state.pacing,
        &state.codes,
        &state.dict_sketch,
        &state.dict_image,
    )?;

    let problem = CodeProblem {
        ds: &state.dict_sketch,
        di: &state.dict_image,
        fs: data.fs,
        fi: data.fi,
        pacing: &state.pacing,
        lap: data.lap,
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    state.codes = update_codes(&problem, &state.codes, &settings.code)?.codes;
    let after_codes = eval(
        &state.pacing,
        &state.codes,
        &state.dict_sketch,
        &state.dict_image,
    )?;

    let (cs, ci) = (state.codes.sketch_codes(), state.codes.image_codes());
    let (us, ui) = rayon::join(
        || {
            update_dictionary(
                data.fs,
                &cs,
                &state.pacing.v_sketch,
                &state.dict_sketch,
                &settings.dictionary,
            )
        },
        || {
            update_dictionary(
                data.fi,
                &ci,
                &state.pacing.v_image,
                &state.dict_image,
                &settings.dictionary,
            )
        },
    );
    state.dict_sketch = us?.dictionary;
    state.dict_image = ui?.dictionary;

    let terms = total_objective(state, data, cfg)?;
    Ok(HistoryRow {
        iter: state.iteration,
        gamma,
        terms,
        blocks: BlockObjectives {
            start,
            after_pacing,
            after_codes,
            after_dictionary: terms.total(),
        },
        pacing: outcome,
        min_weight: state.pacing.min_weight(),
        max_slack: max_slack(&state.pacing),
    })
}

/// Runs outer iterations on an initialized state until the objective settles at a
/// saturated pace or `max_outer_iters` is reached. Solver errors end the run and are
/// recorded in `failure`.
pub fn train_from(
    mut state: TrainState,
    data: &TrainingData<'_>,
    cfg: &ModelConfig,
    settings: &TrainerSettings,
) -> Result<TrainState> {
    cfg.validate()?;
    data.validate()?;
    if cfg.is_ablation() {
        state.pacing = PacingState::full(data.fs.len(), data.fi.len(), data.constraints.len());
    } else if state.pacing.slacks.len() != data.constraints.len() {
        state.pacing = PacingState::with_tight_slacks(
            state.pacing.v_sketch.clone(),
            state.pacing.v_image.clone(),
            data.constraints,
        );
    }
    while state.iteration < cfg.max_outer_iters {
        state.iteration += 1;
        let row = match step(&mut state, data, cfg, settings) {
            Ok(row) => row,
            Err(e) => {
                warn!("training stopped at iteration {}: {e}", state.iteration);
                state.failure = Some(format!("iteration {}: {e}", state.iteration));
                break;
            }
        };
        let saturated = cfg.is_ablation() || row.min_weight >= SATURATION;
        let rel = row.relative_change();
        info!(
            "iter {:3}  gamma {:10.4}  objective {:.6e}  rel {:.2e}  min v {:.4}",
            row.iter,
            row.gamma,
            row.objective(),
            rel,
            row.min_weight
        );
        state.history.push(row);
        if saturated && rel < cfg.rel_tol {
            state.converged = true;
            break;
        }
        if !saturated {
            state.gamma = advance_pace(state.gamma, cfg.eta)?;
        }
    }
    Ok(state)
}

pub fn train(
    data: &TrainingData<'_>,
    cfg: &ModelConfig,
    settings: &TrainerSettings,
) -> Result<TrainState> {
    data.validate()?;
    let state = initialize(data.fs, data.fi, cfg, settings)?;
    train_from(state, data, cfg, settings)
}

pub const HISTORY_HEADER: &str = "iter,gamma,objective,recon_s,recon_i,sparsity,laplacian,fsp,fpc";

pub fn format_history(history: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let t = &r.terms;
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.iter,
            r.gamma,
            t.total(),
            t.recon_sketch,
            t.recon_image,
            t.sparsity,
            t.laplacian,
            t.fsp,
            t.fpc
        ));
    }
    out
}

/// File names inside a checkpoint directory.
pub mod checkpoint {
    pub const DICT_SKETCH: &str = "dict_sketch.cpm";
    pub const DICT_IMAGE: &str = "dict_image.cpm";
    pub const CODES: &str = "codes.cpm";
    pub const PACING: &str = "pacing.csv";
    pub const HISTORY: &str = "history.csv";
}

/// Writes dictionaries, codes, pacing weights and history into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::save_matrix(
        state.dict_sketch.matrix(),
        &dir.join(checkpoint::DICT_SKETCH),
        MatrixFormat::Binary,
    )?;
    io::save_matrix(
        state.dict_image.matrix(),
        &dir.join(checkpoint::DICT_IMAGE),
        MatrixFormat::Binary,
    )?;
    io::save_matrix(
        state.codes.matrix(),
        &dir.join(checkpoint::CODES),
        MatrixFormat::Binary,
    )?;
    io::write_atomic(
        &dir.join(checkpoint::PACING),
        io::format_pacing(&state.pacing).as_bytes(),
    )?;
    io::write_atomic(
        &dir.join(checkpoint::HISTORY),
        format_history(&state.history).as_bytes(),
    )?;
    Ok(())
}

/// Reads the two dictionaries of a checkpoint.
pub fn load_dictionaries(dir: &Path) -> Result<(Dictionary, Dictionary)> {
    let ds = io::load_matrix(&dir.join(checkpoint::DICT_SKETCH), MatrixFormat::Binary)?;
    let di = io::load_matrix(&dir.join(checkpoint::DICT_IMAGE), MatrixFormat::Binary)?;
    Ok((
        Dictionary::new(Modality::Sketch, ds)?,
        Dictionary::new(Modality::Image, di)?,
    ))
}

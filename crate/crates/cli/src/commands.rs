use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use cppcl::curriculum::{
    constraints_from_annotations, constraints_from_scores, edgeness_score, EasinessScores,
    SketchRaster,
};
use cppcl::io::{self, MatrixFormat};
use cppcl::laplacian::{build_weights, GraphLaplacian};
use cppcl::model::CodeLayout;
use cppcl::retrieval::{
    encode_gallery, evaluate_results, format_results, parse_results, retrieve_all,
};
use cppcl::synth::{generate, SynthSpec, SynthSplit};
use cppcl::trainer::{save_checkpoint, train, TrainerSettings, TrainingData};
use cppcl::{CurriculumConstraintSet, Dictionary, FeatureMatrix, Matrix, Modality, ModelConfig};
use log::info;

use crate::{
    BuildCurriculumArgs, BuildLaplacianArgs, Command, EncodeArgs, EvaluateArgs, GenSynthArgs,
    Preset, RetrieveArgs, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flag combination or value: exit code 2.
    Usage(String),
    Core(cppcl::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(cppcl::Error::InvalidArgument(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<cppcl::Error> for CliError {
    fn from(e: cppcl::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::GenSynth(a) => gen_synth(&a),
        Command::BuildLaplacian(a) => build_laplacian(&a),
        Command::BuildCurriculum(a) => build_curriculum(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Encode(a) => encode(&a),
        Command::Retrieve(a) => retrieve(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::AnnotateServe(a) => crate::serve::run(&a),
    }
}

fn load(path: &Path) -> CliResult<Matrix> {
    Ok(io::load_matrix(path, MatrixFormat::from_path(path))?)
}

fn save(m: &Matrix, path: &Path) -> CliResult {
    Ok(io::save_matrix(m, path, MatrixFormat::from_path(path))?)
}

pub fn load_features(path: &Path, modality: Modality) -> CliResult<FeatureMatrix> {
    Ok(FeatureMatrix::new(modality, load(path)?)?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(cppcl::Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

fn write_split(dir: &Path, prefix: &str, split: &SynthSplit) -> CliResult {
    let path = |name: &str| dir.join(format!("{prefix}{name}"));
    save(split.fs.matrix(), &path("fs.cpm"))?;
    save(split.fi.matrix(), &path("fi.cpm"))?;
    write_text(
        &path("groups.csv"),
        &io::format_groups(&split.groups_sketch, &split.groups_image),
    )?;
    write_text(
        &path("scores_sketch.csv"),
        &io::format_scores(&split.easiness_sketch),
    )?;
    write_text(
        &path("scores_image.csv"),
        &io::format_scores(&split.easiness_image),
    )?;
    write_text(&path("matches.csv"), &io::format_matches(&split.matches))
}

fn gen_synth(a: &GenSynthArgs) -> CliResult {
    let data = generate(&SynthSpec {
        sketches: a.sketches,
        images: a.images,
        dim_sketch: a.dim_sketch,
        dim_image: a.dim_image,
        n_true: a.n_true,
        classes: a.classes,
        noise_easy: a.noise_easy,
        noise_hard: a.noise_hard,
        hard_fraction: a.hard_fraction,
        test_pairs: a.test_pairs,
        rng_seed: a.seed,
    })?;
    create_dir(&a.out)?;
    write_split(&a.out, "", &data.train)?;
    if let Some(test) = &data.test {
        write_split(&a.out, "test_", test)?;
    }
    save(&data.dict_sketch, &a.out.join("true_dict_sketch.cpm"))?;
    save(&data.dict_image, &a.out.join("true_dict_image.cpm"))?;
    info!("wrote synthetic dataset to {}", a.out.display());
    Ok(())
}

fn build_laplacian(a: &BuildLaplacianArgs) -> CliResult {
    let fs = load_features(&a.fs, Modality::Sketch)?;
    let fi = load_features(&a.fi, Modality::Image)?;
    let (gs, gi) = io::parse_groups(&io::read_text(&a.groups)?)?;
    let lap = build_weights(&fs, &fi, &gs, &gi, a.sigma)?;
    save(lap.laplacian(), &a.out)
}

fn scores_from_pgm_dir(
    dir: &Path,
    invert: bool,
    n_windows: usize,
    seed: u64,
) -> CliResult<Vec<f64>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            CliError::Core(cppcl::Error::Io {
                path: dir.into(),
                source: e,
            })
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Core(cppcl::Error::Data(format!(
            "no .pgm files in {}",
            dir.display()
        ))));
    }
    files
        .iter()
        .map(|path| {
            let mut raster = SketchRaster::load(path)?;
            if invert {
                raster = raster.inverted(255);
            }
            Ok(edgeness_score(&raster, n_windows, seed)?)
        })
        .collect()
}

fn build_curriculum(a: &BuildCurriculumArgs) -> CliResult {
    let mut set = CurriculumConstraintSet::empty();
    let sketch_scores = match (&a.sketch_scores, &a.pgm_dir) {
        (Some(path), _) => Some(io::parse_scores(&io::read_text(path)?)?),
        (None, Some(dir)) => {
            let scores = scores_from_pgm_dir(dir, a.invert, a.n_windows, a.seed)?;
            if let Some(out) = &a.scores_out {
                write_text(out, &io::format_scores(&scores))?;
            }
            Some(scores)
        }
        (None, None) => None,
    };
    let sources = [
        (
            Modality::Sketch,
            sketch_scores,
            a.delta_sketch,
            a.rho_sketch,
        ),
        (
            Modality::Image,
            a.image_scores
                .as_ref()
                .map(|p| io::read_text(p).and_then(|t| io::parse_scores(&t)))
                .transpose()?,
            a.delta_image,
            a.rho_image,
        ),
    ];
    for (modality, scores, delta, rho) in sources {
        if let Some(scores) = scores {
            let scores = EasinessScores::new(modality, scores)?;
            let delta = delta.unwrap_or_else(|| scores.default_delta());
            set = set.merge(&constraints_from_scores(&scores, delta, rho, a.seed)?);
        }
    }
    if let Some(path) = &a.annotations {
        let answers = crate::serve::read_journal(path)?;
        let annotations: Vec<_> = answers
            .iter()
            .map(|r| r.annotation())
            .collect::<Result<_, _>>()?;
        set = set.merge(&constraints_from_annotations(
            &annotations,
            Modality::Sketch,
        ));
    }
    info!("{} constraints", set.len());
    write_text(&a.out, &io::format_constraints(&set))
}

fn apply_preset(cfg: &mut ModelConfig, preset: Preset) {
    match preset {
        Preset::Cufs => {
            cfg.alpha = 1.0;
            cfg.beta = 5.0;
            cfg.n_atoms = 50;
        }
        Preset::Flickr15k => {
            cfg.alpha = 2.0;
            cfg.beta = 25.0;
            cfg.gamma0 = 0.5;
            cfg.n_atoms = 1000;
        }
        Preset::Queenmary => {
            cfg.alpha = 6.0;
            cfg.beta = 8.0;
            cfg.gamma0 = 1.0;
            cfg.n_atoms = 1500;
        }
    }
}

/// Defaults, then config file, then preset, then individual flags.
fn model_config(a: &TrainArgs) -> CliResult<ModelConfig> {
    let mut cfg = match &a.config {
        Some(path) => io::parse_config(&io::read_text(path)?, ModelConfig::default())?,
        None => ModelConfig::default(),
    };
    if let Some(p) = a.preset {
        apply_preset(&mut cfg, p);
    }
    let mut set = |key: &str, value: Option<String>| -> CliResult {
        if let Some(v) = value {
            io::set_config_key(&mut cfg, key, &v).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    };
    let s = |x: Option<f64>| x.map(|v| format!("{v:?}"));
    set("alpha", s(a.alpha))?;
    set("beta", s(a.beta))?;
    set("gamma0", s(a.gamma0))?;
    set("eta", s(a.eta))?;
    set("mu", s(a.mu))?;
    set("n_atoms", a.atoms.map(|v| v.to_string()))?;
    set("regularizer", a.regularizer.clone())?;
    set("laplacian_form", a.laplacian_form.clone())?;
    set("max_outer_iters", a.max_iters.map(|v| v.to_string()))?;
    set("rel_tol", s(a.rel_tol))?;
    set("rng_seed", a.seed.map(|v| v.to_string()))?;
    if a.literal_sp_b {
        cfg.literal_sp_b = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> CliResult {
    let cfg = model_config(a)?;
    let fs = load_features(&a.fs, Modality::Sketch)?;
    let fi = load_features(&a.fi, Modality::Image)?;
    let lap = GraphLaplacian::from_laplacian(fs.len(), &load(&a.laplacian)?)?;
    let groups = a
        .groups
        .as_ref()
        .map(|p| io::read_text(p).and_then(|t| io::parse_groups(&t)))
        .transpose()?;
    let constraints = match &a.constraints {
        Some(p) => io::parse_constraints(&io::read_text(p)?)?,
        None => CurriculumConstraintSet::empty(),
    };
    let data = TrainingData {
        fs: &fs,
        fi: &fi,
        lap: &lap,
        constraints: &constraints,
        groups: groups.as_ref().map(|(s, i)| (s, i)),
    };
    let state = train(&data, &cfg, &TrainerSettings::default())?;
    save_checkpoint(&state, &a.out)?;
    write_text(&a.out.join("config.txt"), &io::format_config(&cfg))?;
    if let Some(f) = &state.failure {
        return Err(CliError::Core(cppcl::Error::Solver(f.clone())));
    }
    println!(
        "iterations {}  converged {}  objective {:?}",
        state.iteration,
        state.converged,
        state
            .history
            .last()
            .map(|r| r.objective())
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn encode(a: &EncodeArgs) -> CliResult {
    let f = load(&a.features)?;
    // the modality tag does not affect encoding
    let d = Dictionary::new(Modality::Sketch, load(&a.dictionary)?)?;
    let f = FeatureMatrix::new(Modality::Sketch, f)?;
    let codes = encode_gallery(&d, &f, a.alpha)?;
    debug_assert_eq!(codes.layout(), CodeLayout::Single(Modality::Sketch));
    save(codes.matrix(), &a.out)
}

fn retrieve(a: &RetrieveArgs) -> CliResult {
    let q = load(&a.queries)?;
    let g = load(&a.gallery)?;
    let (gs, gi) = io::parse_groups(&io::read_text(&a.groups)?)?;
    let k = a.k.unwrap_or(g.ncols());
    let rows = retrieve_all(&q, &g, gs.groups(), gi.groups(), k)?;
    write_text(&a.out, &format_results(&rows))
}

fn evaluate(a: &EvaluateArgs) -> CliResult {
    let rows = parse_results(&io::read_text(&a.results)?)?;
    let labels = a
        .groups
        .as_ref()
        .map(|p| io::read_text(p).and_then(|t| io::parse_groups(&t)))
        .transpose()?;
    let matches: Option<BTreeMap<usize, usize>> = a
        .matches
        .as_ref()
        .map(|p| io::read_text(p).and_then(|t| io::parse_matches(&t)))
        .transpose()?
        .map(|m| m.into_iter().collect());
    let eval = evaluate_results(
        &rows,
        labels.as_ref().map(|(s, _)| s.groups()),
        matches.as_ref(),
    )?;

    let mut report = format!(
        "queries = {}\nmap = {:?}\n",
        eval.per_query_ap.len(),
        eval.map
    );
    if let Some(r) = eval.recognition_rate {
        report.push_str(&format!("recognition_rate = {r:?}\n"));
    }
    for (class, ap) in &eval.per_class_ap {
        report.push_str(&format!("class_ap.{class} = {ap:?}\n"));
    }
    let mut macro_pr = String::from("recall,precision\n");
    for (r, p) in &eval.macro_pr {
        macro_pr.push_str(&format!("{r:?},{p:?}\n"));
    }
    let mut per_query = String::from("query_id,recall,precision\n");
    for (q, curve) in &eval.pr_curves {
        for (r, p) in curve {
            per_query.push_str(&format!("{q},{r:?},{p:?}\n"));
        }
    }
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("metrics.txt"), &report)?;
    write_text(&a.out_dir.join("pr_macro.csv"), &macro_pr)?;
    write_text(&a.out_dir.join("pr_queries.csv"), &per_query)?;
    print!("{report}");
    Ok(())
}

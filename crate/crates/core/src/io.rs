//! File formats: CPM1 binary matrices, CSV matrices and the small CSV side files.
//!
//! CPM1 layout: magic `CPM1`, `u32` LE rows, `u32` LE cols, then `rows * cols`
//! little-endian `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::model::{
    Constraint, CurriculumConstraintSet, GroupAssignment, LaplacianForm, Matrix, Modality,
    ModelConfig, PacingState, Regularizer,
};

pub const MAGIC: [u8; 4] = *b"CPM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Binary,
    Csv,
}

impl MatrixFormat {
    /// `.csv` → CSV, anything else → binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Binary,
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows())
        .map_err(|_| Error::InvalidArgument("too many rows for CPM1".into()))?;
    let cols = u32::try_from(m.ncols())
        .map_err(|_| Error::InvalidArgument("too many columns for CPM1".into()))?;
    let mut out = Vec::with_capacity(12 + 8 * m.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<Matrix> {
    ensure!(bytes.len() >= 12, Format, "CPM1 header truncated");
    ensure!(
        bytes[..4] == MAGIC,
        Format,
        "bad magic {:02x?}",
        &bytes[..4]
    );
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("CPM1 dimensions overflow".into()))?;
    ensure!(
        bytes.len() - 12 == expected,
        Format,
        "CPM1 payload is {} bytes, expected {expected} for {rows}x{cols}",
        bytes.len() - 12
    );
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ensure!(
        values.iter().all(|x| x.is_finite()),
        Data,
        "matrix contains non-finite values"
    );
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn encode_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> Result<Matrix> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| parse_f64(tok, lineno))
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) => ensure!(
                c == row.len(),
                Format,
                "line {}: {} fields, expected {c}",
                lineno + 1,
                row.len()
            ),
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Format("empty CSV matrix".into()))?;
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

fn parse_f64(tok: &str, lineno: usize) -> Result<f64> {
    let x: f64 = tok
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad number `{}`", lineno + 1, tok.trim())))?;
    ensure!(x.is_finite(), Data, "line {}: non-finite value", lineno + 1);
    Ok(x)
}

fn parse_usize(tok: &str, lineno: usize) -> Result<usize> {
    tok.trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad index `{}`", lineno + 1, tok.trim())))
}

pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<Matrix> {
    match format {
        MatrixFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
        MatrixFormat::Csv => decode_csv(&read_text(path)?),
    }
}

pub fn save_matrix(m: &Matrix, path: &Path, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Binary => write_atomic(path, &encode_binary(m)?),
        MatrixFormat::Csv => write_atomic(path, encode_csv(m).as_bytes()),
    }
}

/// Splits non-blank lines into exactly `n` comma-separated fields.
fn records(text: &str, n: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(lineno, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            ensure!(
                fields.len() == n,
                Format,
                "line {}: {} fields, expected {n}",
                lineno + 1,
                fields.len()
            );
            Ok((lineno, fields))
        })
}

/// `index,score` lines; every index in `0..n` must appear exactly once.
pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    let mut pairs = Vec::new();
    for rec in records(text, 2) {
        let (lineno, f) = rec?;
        pairs.push((parse_usize(f[0], lineno)?, parse_f64(f[1], lineno)?));
    }
    let mut scores = vec![None; pairs.len()];
    for (i, s) in pairs {
        ensure!(i < scores.len(), Data, "score index {i} out of range");
        ensure!(scores[i].is_none(), Data, "duplicate score index {i}");
        scores[i] = Some(s);
    }
    Ok(scores.into_iter().map(Option::unwrap).collect())
}

pub fn format_scores(scores: &[f64]) -> String {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i},{s:?}\n"))
        .collect()
}

/// `modality,index,group_id` lines → (sketch groups, image groups).
pub fn parse_groups(text: &str) -> Result<(GroupAssignment, GroupAssignment)> {
    let mut by_mod: [Vec<(usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for rec in records(text, 3) {
        let (lineno, f) = rec?;
        let m: Modality = f[0].parse()?;
        by_mod[m as usize].push((parse_usize(f[1], lineno)?, parse_usize(f[2], lineno)?));
    }
    let build = |m: Modality, entries: &[(usize, usize)]| -> Result<GroupAssignment> {
        let mut group_of = vec![None; entries.len()];
        for &(i, g) in entries {
            ensure!(i < group_of.len(), Data, "{m} group index {i} out of range");
            ensure!(group_of[i].is_none(), Data, "duplicate {m} group index {i}");
            group_of[i] = Some(g);
        }
        Ok(GroupAssignment::new(
            m,
            group_of.into_iter().map(Option::unwrap).collect(),
        ))
    };
    Ok((
        build(Modality::Sketch, &by_mod[0])?,
        build(Modality::Image, &by_mod[1])?,
    ))
}

pub fn format_groups(sketch: &GroupAssignment, image: &GroupAssignment) -> String {
    let mut out = String::new();
    for g in [sketch, image] {
        for (i, id) in g.groups().iter().enumerate() {
            out.push_str(&format!("{},{i},{id}\n", g.modality()));
        }
    }
    out
}

/// `modality,hard_index,easy_index` lines.
pub fn parse_constraints(text: &str) -> Result<CurriculumConstraintSet> {
    let mut out = Vec::new();
    for rec in records(text, 3) {
        let (lineno, f) = rec?;
        out.push(Constraint {
            modality: f[0].parse()?,
            hard: parse_usize(f[1], lineno)?,
            easy: parse_usize(f[2], lineno)?,
        });
    }
    Ok(CurriculumConstraintSet::new(out))
}

pub fn format_constraints(set: &CurriculumConstraintSet) -> String {
    set.iter()
        .map(|c| format!("{},{},{}\n", c.modality, c.hard, c.easy))
        .collect()
}

/// `sketch_id,image_id` lines.
pub fn parse_matches(text: &str) -> Result<Vec<(usize, usize)>> {
    records(text, 2)
        .map(|rec| {
            let (lineno, f) = rec?;
            Ok((parse_usize(f[0], lineno)?, parse_usize(f[1], lineno)?))
        })
        .collect()
}

pub fn format_matches(matches: &[(usize, usize)]) -> String {
    matches.iter().map(|(s, i)| format!("{s},{i}\n")).collect()
}

/// `modality,index,v` export with a header line.
pub fn format_pacing(state: &PacingState) -> String {
    let mut out = String::from("modality,index,v\n");
    for (m, v) in [
        (Modality::Sketch, &state.v_sketch),
        (Modality::Image, &state.v_image),
    ] {
        for (i, x) in v.iter().enumerate() {
            out.push_str(&format!("{m},{i},{x:?}\n"));
        }
    }
    out
}

/// Flat `key = value` lines; `#` starts a comment. Unknown keys are errors.
pub fn parse_config(text: &str, base: ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", lineno + 1)))?;
        set_config_key(&mut cfg, key.trim(), value.trim())
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(cfg)
}

pub fn set_config_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Format(format!("bad value `{value}` for `{key}`")))
    }
    match key {
        "alpha" => cfg.alpha = num(key, value)?,
        "beta" => cfg.beta = num(key, value)?,
        "gamma0" => cfg.gamma0 = num(key, value)?,
        "eta" => cfg.eta = num(key, value)?,
        "mu" => cfg.mu = num(key, value)?,
        "n_atoms" => cfg.n_atoms = num(key, value)?,
        "sigma" => cfg.sigma = num(key, value)?,
        "regularizer" => cfg.regularizer = value.parse::<Regularizer>()?,
        "laplacian_form" => cfg.laplacian_form = value.parse::<LaplacianForm>()?,
        "literal_sp_b" => cfg.literal_sp_b = num(key, value)?,
        "max_outer_iters" => cfg.max_outer_iters = num(key, value)?,
        "rel_tol" => cfg.rel_tol = num(key, value)?,
        "rng_seed" => cfg.rng_seed = num(key, value)?,
        other => return Err(Error::Format(format!("unknown config key `{other}`"))),
    }
    Ok(())
}

pub fn format_config(cfg: &ModelConfig) -> String {
    format!(
        "alpha = {:?}\nbeta = {:?}\ngamma0 = {:?}\neta = {:?}\nmu = {:?}\nn_atoms = {}\n\
         sigma = {:?}\nregularizer = {}\nlaplacian_form = {}\nliteral_sp_b = {}\n\
         max_outer_iters = {}\nrel_tol = {:?}\nrng_seed = {}\n",
        cfg.alpha,
        cfg.beta,
        cfg.gamma0,
        cfg.eta,
        cfg.mu,
        cfg.n_atoms,
        cfg.sigma,
        cfg.regularizer,
        cfg.laplacian_form,
        cfg.literal_sp_b,
        cfg.max_outer_iters,
        cfg.rel_tol,
        cfg.rng_seed
    )
}

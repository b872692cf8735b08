//! Run orchestration behind the command-line tool: training runs with
//! manifests, random hyperparameter search, eigenmode export, validation,
//! explanation and artifact export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{derive_seed, toml_error, EncoderConfig, TrainConfig};
use crate::eigen::{build_laplacian, smallest_eigenpairs, EigenOptions, GridSpec, ModeFile};
use crate::error::{Error, Result};
use crate::lrp::{coordinate_field, feature_attribution, field_to_pgm, RelevanceReport};
use crate::model::Model;
use crate::problems::{boundary_max_abs, grid_points, validation_grid_mse, Predictor};
use crate::trainer::{train, TrainSummary};

pub const OUT_ENV: &str = "DAFFPINN_OUT";

/// Output root: explicit flag, then the environment, then `./runs`.
pub fn out_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T, path: &Path) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub checkpoint: PathBuf,
    pub grid_n: usize,
    pub mse: f64,
    pub boundary_max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: TrainConfig,
    /// Hash of the config text and any mode file it references.
    pub input_hash: String,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub summary: PathBuf,
    pub wall_time: f64,
    pub files: Vec<FileEntry>,
    #[serde(default)]
    pub validations: Vec<ValidationRecord>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, to_json(self, path)?.as_bytes())
    }

    /// Checks that every listed file exists with a matching hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let got = sha256_hex(&read_file(&p)?);
            if got != f.sha256 {
                return Err(Error::Incompatible(format!("hash mismatch for {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Resolves a manifest argument that may name the file or its directory.
pub fn manifest_path(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        arg.join(MANIFEST_NAME)
    } else {
        arg.to_path_buf()
    }
}

fn input_hash(cfg: &TrainConfig, base: Option<&Path>) -> Result<String> {
    let mut bytes = cfg.to_toml().into_bytes();
    if let EncoderConfig::DaffNumeric {
        mode_file: Some(p), ..
    } = &cfg.encoder
    {
        let p = match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        };
        bytes.extend(read_file(&p)?);
    }
    Ok(sha256_hex(&bytes))
}

pub fn run_id(cfg: &TrainConfig, hash: &str) -> String {
    let stem = cfg.name.clone().unwrap_or_else(|| {
        let enc = match &cfg.encoder {
            EncoderConfig::Identity => "vanilla",
            EncoderConfig::Rff { .. } => "rff",
            EncoderConfig::Daff { .. } => "daff",
            EncoderConfig::DaffNumeric { .. } => "daffnum",
        };
        format!("{}-{enc}", cfg.problem.name())
    });
    format!("{stem}-{}", &hash[..12])
}

/// Trains a config and persists checkpoints, reports and a manifest under
/// `out/<run id>/`.
pub fn cmd_train(cfg: &TrainConfig, base: Option<&Path>, out: &Path) -> Result<(PathBuf, RunManifest)> {
    let hash = input_hash(cfg, base)?;
    let id = run_id(cfg, &hash);
    let dir = out.join(&id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log::info!("training run {id}");
    let outcome = train(cfg, base)?;

    let names = ["config.toml", "model.json", "best.json", "report.csv", "summary.json"];
    write_file(&dir.join(names[0]), cfg.to_toml().as_bytes())?;
    outcome.last.save(&dir.join(names[1]))?;
    outcome.best.save(&dir.join(names[2]))?;
    outcome.report.write(&dir.join(names[3]), &dir.join(names[4]))?;
    let files = names
        .iter()
        .map(|n| {
            Ok(FileEntry {
                path: PathBuf::from(n),
                sha256: sha256_hex(&read_file(&dir.join(n))?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        run_id: id,
        config: cfg.clone(),
        input_hash: hash,
        checkpoint: names[1].into(),
        best_checkpoint: names[2].into(),
        report_csv: names[3].into(),
        summary: names[4].into(),
        wall_time: outcome.report.wall_time,
        files,
        validations: Vec::new(),
    };
    let path = dir.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok((path, manifest))
}

pub fn load_summary(manifest_path: &Path) -> Result<TrainSummary> {
    let m = RunManifest::load(manifest_path)?;
    let p = parent(manifest_path).join(&m.summary);
    serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::Parse {
        path: p,
        message: e.to_string(),
    })
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Validation MSE and boundary maximum of a run's best checkpoint. The
/// record is stored in the manifest, replacing one for the same grid.
pub fn cmd_validate(manifest: &Path, grid_n: usize) -> Result<ValidationRecord> {
    let mut m = RunManifest::load(manifest)?;
    let dir = parent(manifest);
    let ckpt = dir.join(&m.best_checkpoint);
    if !ckpt.exists() {
        return Err(Error::io(&ckpt, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let model = Model::load(&ckpt)?;
    let rec = ValidationRecord {
        checkpoint: m.best_checkpoint.clone(),
        grid_n,
        mse: validation_grid_mse(&model, &model.problem, grid_n)?,
        boundary_max_abs: boundary_max_abs(&model, &model.problem, 250)?,
    };
    m.validations
        .retain(|v| !(v.checkpoint == rec.checkpoint && v.grid_n == rec.grid_n));
    m.validations.push(rec.clone());
    m.save(manifest)?;
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExplainMode {
    Field,
    Features,
}

impl std::str::FromStr for ExplainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "field" => Ok(ExplainMode::Field),
            "features" => Ok(ExplainMode::Features),
            other => Err(Error::config("mode", format!("unknown explain mode `{other}`"))),
        }
    }
}

/// Runs LRP over a run's best checkpoint and writes reports (and a PGM
/// image for fields) into `out`.
pub fn cmd_explain(
    manifest: &Path,
    mode: ExplainMode,
    eps: f64,
    threshold: Option<f64>,
    grid_n: usize,
    out: &Path,
) -> Result<(RelevanceReport, Vec<PathBuf>)> {
    let m = RunManifest::load(manifest)?;
    let model = Model::load(&parent(manifest).join(&m.best_checkpoint))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (report, stem) = match mode {
        ExplainMode::Field => (coordinate_field(&model, grid_n, eps, threshold)?, "relevance_field"),
        ExplainMode::Features => (feature_attribution(&model, grid_n, eps)?, "relevance_features"),
    };
    let mut written = report.write(out, stem)?;
    if let Some(field) = &report.field {
        let p = out.join(format!("{stem}.pgm"));
        write_file(&p, &field_to_pgm(field, grid_n)?)?;
        written.push(p);
    }
    Ok((report, written))
}

/// Solves for the `k` lowest Laplace eigenmodes on a lattice and writes the
/// mode file.
pub fn cmd_eigs(grid: &GridSpec, k: usize, out: &Path) -> Result<(PathBuf, ModeFile)> {
    let l = build_laplacian(grid)?;
    let modes = smallest_eigenpairs(&l, k, &EigenOptions::default())?;
    let file = ModeFile {
        grid: grid.clone(),
        modes,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("modes_{}_n{}_k{k}.txt", grid.bc_kind.as_str(), grid.n));
    file.save(&path)?;
    Ok((path, file))
}

/// Writes the encoder bank, a prediction grid (CSV and PGM) and a copy of
/// the summary for a run.
pub fn cmd_export(manifest: &Path, grid_n: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let m = RunManifest::load(manifest)?;
    let dir = parent(manifest);
    let model = Model::load(&dir.join(&m.best_checkpoint))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();

    let bank = out.join("encoder.json");
    model.encoder.save(&bank)?;
    written.push(bank);

    let pts = grid_points(&model.problem.domain(), grid_n);
    let pred = model.predict_batch(&pts)?;
    let mut csv = String::from("x,y,u,u_exact\n");
    for (p, u) in pts.iter().zip(&pred) {
        let _ = writeln!(csv, "{:e},{:e},{u:e},{:e}", p[0], p[1], model.problem.analytic_solution(p[0], p[1]));
    }
    let grid_csv = out.join("prediction.csv");
    write_file(&grid_csv, csv.as_bytes())?;
    written.push(grid_csv);
    let img = out.join("prediction.pgm");
    write_file(&img, &field_to_pgm(&pred, grid_n)?)?;
    written.push(img);

    let summary = out.join("summary.json");
    write_file(&summary, &read_file(&dir.join(&m.summary))?)?;
    written.push(summary);
    Ok(written)
}

/// Candidate lists of a random search. Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchAxes {
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub units: Vec<usize>,
    #[serde(default)]
    pub batch_size: Vec<usize>,
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub rff_variances: Vec<Vec<f64>>,
    #[serde(default)]
    pub rff_features_per_block: Vec<usize>,
    #[serde(default)]
    pub daff_comp_types: Vec<Vec<u8>>,
    #[serde(default)]
    pub daff_mn_values: Vec<Vec<i32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub master_seed: u64,
    pub budget: usize,
    pub base: TrainConfig,
    #[serde(default)]
    pub axes: SearchAxes,
}

/// One point of the Cartesian grid, as indices into each axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub grid_index: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl SearchSpace {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: SearchSpace = toml::from_str(text).map_err(toml_error)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    fn axis_lens(&self) -> Vec<usize> {
        let a = &self.axes;
        [
            a.layers.len(),
            a.units.len(),
            a.batch_size.len(),
            a.lr.len(),
            a.rff_variances.len(),
            a.rff_features_per_block.len(),
            a.daff_comp_types.len(),
            a.daff_mn_values.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .collect()
    }

    pub fn size(&self) -> usize {
        self.axis_lens().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.budget == 0 {
            return Err(Error::config("budget", "must be at least 1"));
        }
        if self.budget > self.size() {
            return Err(Error::config(
                "budget",
                format!("budget {} exceeds the {} configurations of the space", self.budget, self.size()),
            ));
        }
        let rff = matches!(self.base.encoder, EncoderConfig::Rff { .. });
        let daff = matches!(self.base.encoder, EncoderConfig::Daff { .. });
        let a = &self.axes;
        if !rff && (!a.rff_variances.is_empty() || !a.rff_features_per_block.is_empty()) {
            return Err(Error::config("axes.rff_variances", "RFF axes need an RFF base encoder"));
        }
        if !daff && (!a.daff_comp_types.is_empty() || !a.daff_mn_values.is_empty()) {
            return Err(Error::config("axes.daff_comp_types", "DaFF axes need a DaFF base encoder"));
        }
        Ok(())
    }

    /// Config at a grid index (mixed radix over the axes, first axis
    /// fastest).
    pub fn config_at(&self, index: usize) -> Result<TrainConfig> {
        let lens = self.axis_lens();
        let mut digits = Vec::with_capacity(lens.len());
        let mut rem = index;
        for n in &lens {
            digits.push(rem % n);
            rem /= n;
        }
        let a = &self.axes;
        let mut c = self.base.clone();
        if let Some(v) = a.layers.get(digits[0]) {
            c.network.layers = *v;
        }
        if let Some(v) = a.units.get(digits[1]) {
            c.network.units = *v;
        }
        if let Some(v) = a.batch_size.get(digits[2]) {
            c.training.batch_size = *v;
        }
        if let Some(v) = a.lr.get(digits[3]) {
            c.optimizer.lr = *v;
        }
        if let EncoderConfig::Rff {
            variances,
            features_per_block,
        } = &mut c.encoder
        {
            if let Some(v) = a.rff_variances.get(digits[4]) {
                *variances = v.clone();
            }
            if let Some(v) = a.rff_features_per_block.get(digits[5]) {
                *features_per_block = *v;
            }
        }
        if let EncoderConfig::Daff { comp_types, mn_values } = &mut c.encoder {
            if let Some(v) = a.daff_comp_types.get(digits[6]) {
                *comp_types = v.clone();
            }
            if let Some(v) = a.daff_mn_values.get(digits[7]) {
                *mn_values = v.clone();
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// `budget` distinct grid points drawn without replacement; each trial
    /// seed derives from the master seed and the grid index only.
    pub fn sample_trials(&self) -> Result<Vec<Trial>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        let mut idx = sample(&mut rng, self.size(), self.budget).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| {
                let mut config = self.config_at(i)?;
                let seed = derive_seed(self.master_seed, 1000 + i as u64);
                config.seed = seed;
                config.name = Some(format!("trial{i:05}"));
                Ok(Trial {
                    grid_index: i,
                    seed,
                    config,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub grid_index: usize,
    pub run_id: String,
    pub layers: usize,
    pub units: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder: String,
    pub best_validation: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub wall_time: f64,
}

fn encoder_desc(e: &EncoderConfig) -> String {
    match e {
        EncoderConfig::Identity => "identity".into(),
        EncoderConfig::Rff {
            variances,
            features_per_block,
        } => format!("rff var={variances:?} fpb={features_per_block}"),
        EncoderConfig::Daff { comp_types, mn_values } => format!("daff comp={comp_types:?} mn={mn_values:?}"),
        EncoderConfig::DaffNumeric { grid_n, modes, .. } => format!("daff_numeric n={grid_n} k={modes}"),
    }
}

/// Runs every sampled trial on `workers` threads and ranks the results by
/// best validation MSE (ties broken by run id).
pub fn cmd_search(space: &SearchSpace, base: Option<&Path>, out: &Path, workers: usize) -> Result<Vec<TrialResult>> {
    let trials = space.sample_trials()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let trial_dir = out.join("trials");
    let mut results = pool.install(|| {
        trials
            .par_iter()
            .map(|t| {
                let (_, m) = cmd_train(&t.config, base, &trial_dir)?;
                let summary = load_summary(&trial_dir.join(&m.run_id).join(MANIFEST_NAME))?;
                Ok(TrialResult {
                    grid_index: t.grid_index,
                    run_id: m.run_id,
                    layers: t.config.network.layers,
                    units: t.config.network.units,
                    batch_size: t.config.training.batch_size,
                    lr: t.config.optimizer.lr,
                    encoder: encoder_desc(&t.config.encoder),
                    best_validation: summary.best_validation,
                    final_train_loss: summary.final_terms.iter().sum(),
                    epochs_run: summary.epochs_run,
                    wall_time: summary.wall_time,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by(|a, b| {
        a.best_validation
            .total_cmp(&b.best_validation)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    write_file(&out.join("ranking.csv"), ranking_csv(space, &results).as_bytes())?;
    Ok(results)
}

pub fn ranking_csv(space: &SearchSpace, results: &[TrialResult]) -> String {
    let mut s = format!(
        "# random samples {} of {}\nrank,best,grid_index,run_id,layers,units,batch_size,lr,encoder,train_loss,val_mse,epochs,wall_s\n",
        results.len(),
        space.size()
    );
    for (k, r) in results.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:e},\"{}\",{:e},{:e},{},{:.1}",
            k + 1,
            if k == 0 { "*" } else { "" },
            r.grid_index,
            r.run_id,
            r.layers,
            r.units,
            r.batch_size,
            r.lr,
            r.encoder,
            r.final_train_loss,
            r.best_validation,
            r.epochs_run,
            r.wall_time
        );
    }
    s
}

//! A trained model: problem, encoder and network together, as checkpointed.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, streams, EncoderConfig, TrainConfig};
use crate::eigen::{build_laplacian, smallest_eigenpairs, EigenOptions, GridSpec, ModeFile, NumericDaff};
use crate::error::{Error, Result};
use crate::features::{Encoder, RffBank};
use crate::jet::Jet;
use crate::network::{forward, forward_batch_values, init_params, NetworkParams};
use crate::problems::{Predictor, Problem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub problem: Problem,
    pub encoder: Encoder,
    pub net: NetworkParams,
}

/// Builds the encoder a config asks for. Relative mode-file paths resolve
/// against `base`.
pub fn build_encoder(cfg: &TrainConfig, base: Option<&Path>) -> Result<Encoder> {
    Ok(match &cfg.encoder {
        EncoderConfig::Identity => Encoder::Identity,
        EncoderConfig::Rff {
            variances,
            features_per_block,
        } => Encoder::Rff(RffBank::sample(
            variances,
            *features_per_block,
            2,
            derive_seed(cfg.seed, streams::BANK),
        )?),
        EncoderConfig::Daff { comp_types, mn_values } => Encoder::Daff(cfg.problem.daff_bank(comp_types, mn_values)?),
        EncoderConfig::DaffNumeric {
            mode_file,
            grid_n,
            modes,
        } => {
            let file = match mode_file {
                Some(p) => {
                    let p = match base {
                        Some(b) if p.is_relative() => b.join(p),
                        _ => p.clone(),
                    };
                    let file = ModeFile::load(&p)?;
                    check_mode_grid(&cfg.problem, &file.grid)?;
                    file
                }
                None => {
                    let grid = problem_grid(&cfg.problem, *grid_n, crate::eigen::BcKind::Dirichlet)?;
                    let l = build_laplacian(&grid)?;
                    let modes = smallest_eigenpairs(&l, *modes, &EigenOptions::default())?;
                    ModeFile { grid, modes }
                }
            };
            Encoder::DaffNumeric(NumericDaff::from_modes(&file.modes, &file.grid)?)
        }
    })
}

fn check_mode_grid(problem: &Problem, grid: &GridSpec) -> Result<()> {
    let d = problem.domain();
    let side = grid.h * (grid.n + 1) as f64;
    let tol = 1e-9 * side.max(1.0);
    let fits = (grid.origin[0] - d.x.0).abs() < tol
        && (grid.origin[1] - d.y.0).abs() < tol
        && (grid.origin[0] + side - d.x.1).abs() < tol
        && (grid.origin[1] + side - d.y.1).abs() < tol;
    if !fits {
        return Err(Error::Incompatible(format!(
            "mode lattice [{}, {}] x [{}, {}] does not cover the {} domain",
            grid.origin[0],
            grid.origin[0] + side,
            grid.origin[1],
            grid.origin[1] + side,
            problem.name()
        )));
    }
    Ok(())
}

/// Lattice over a problem's (square) domain.
pub fn problem_grid(problem: &Problem, n: usize, bc: crate::eigen::BcKind) -> Result<GridSpec> {
    let d = problem.domain();
    let (wx, wy) = (d.x.1 - d.x.0, d.y.1 - d.y.0);
    if (wx - wy).abs() > 1e-12 {
        return Err(Error::config("encoder.kind", "numeric DaFFs need a square domain"));
    }
    let mut g = GridSpec::square(n, wx, bc)?;
    g.origin = [d.x.0, d.y.0];
    Ok(g)
}

impl Model {
    /// Fresh, untrained model for a config.
    pub fn from_config(cfg: &TrainConfig, base: Option<&Path>) -> Result<Self> {
        let encoder = build_encoder(cfg, base)?;
        let net = init_params(
            cfg.network.layers,
            cfg.network.units,
            encoder.dim(),
            derive_seed(cfg.seed, streams::NETWORK),
            cfg.use_bias(),
            cfg.skip_plan()?,
        )?;
        Ok(Model {
            problem: cfg.problem,
            encoder,
            net,
        })
    }

    pub fn predict(&self, x: f64, y: f64) -> Result<f64> {
        let enc = self.encoder.encode_values(x, y)?;
        Ok(crate::network::forward_record(&self.net, &enc)?.0)
    }

    /// Output jet about `(x, y)`.
    pub fn output_jet(&self, x: f64, y: f64, order: usize) -> Result<Jet> {
        let (xj, yj) = Jet::seed(x, y, order.max(2))?;
        let enc = self.encoder.encode(&xj.truncate(order), &yj.truncate(order))?;
        forward(&self.net, &enc)
    }

    /// Encoded values as an `input_dim x points` matrix.
    pub fn encode_points(&self, points: &[[f64; 2]]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.encoder.dim(), points.len()));
        for (p, pt) in points.iter().enumerate() {
            for (i, v) in self.encoder.encode_values(pt[0], pt[1])?.into_iter().enumerate() {
                out[[i, p]] = v;
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Model = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        m.net.validate()?;
        if m.net.input_dim() != m.encoder.dim() {
            return Err(Error::Incompatible(format!(
                "network input {} vs encoder width {}",
                m.net.input_dim(),
                m.encoder.dim()
            )));
        }
        Ok(m)
    }
}

impl Predictor for Model {
    fn predict_batch(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        // Chunked so the activations stay cache sized.
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(1024) {
            out.extend(forward_batch_values(&self.net, &self.encode_points(chunk)?)?);
        }
        Ok(out)
    }
}

//! Run configuration read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticConfig;
use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory. Loaded when `generate` is absent, otherwise the
    /// generated frames are written here.
    pub dir: Option<PathBuf>,
    pub generate: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub obj: PathBuf,
    pub blendshapes: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Checkpoint written after training.
    pub output: PathBuf,
    /// Optional loss-curve CSV.
    #[serde(default)]
    pub loss_csv: Option<PathBuf>,
    /// Mesh to bind; the procedural desk head when absent.
    #[serde(default)]
    pub mesh: Option<MeshSection>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let Some(p) = &mut self.loss_csv {
            fix(p);
        }
        if let Some(m) = &mut self.mesh {
            fix(&mut m.obj);
            if let Some(b) = &mut m.blendshapes {
                fix(b);
            }
        }
        if let Some(d) = &mut self.data.dir {
            fix(d);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        ensure!(
            self.data.dir.is_some() || self.data.generate.is_some(),
            Config,
            "[data] needs `dir`, `generate`, or both"
        );
        if let Some(g) = &self.data.generate {
            g.validate()?;
            ensure!(
                g.expr_dim == self.model.expr_dim,
                Config,
                "data.generate.expr_dim ({}) differs from model.expr_dim ({})",
                g.expr_dim,
                self.model.expr_dim
            );
        }
        Ok(())
    }
}

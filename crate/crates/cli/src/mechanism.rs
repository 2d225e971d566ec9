use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use corrnoise::io::{load_strategy_matrix, ParamsDocument};
use corrnoise::loss::{blt_mechanism_loss, dense_mechanism_loss};
use corrnoise::tree::eval_tree;
use corrnoise::{presets, BltParams, Matrix, MechanismLoss, ParticipationSchema};
use serde::{Deserialize, Serialize};

/// A mechanism named on the command line or in a sweep spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismSource {
    /// A parameters file written by `optimize`.
    Blt {
        path: PathBuf,
    },
    Preset {
        name: String,
    },
    Tree,
    Identity,
    /// A dense lower-triangular strategy matrix, binary container or CSV.
    Strategy {
        path: PathBuf,
    },
}

pub enum Mechanism {
    Blt {
        params: BltParams,
        schema: Option<ParticipationSchema>,
    },
    Tree,
    Dense(Matrix),
}

impl MechanismSource {
    pub fn label(&self) -> String {
        match self {
            Self::Blt { path } => format!("blt:{}", path.display()),
            Self::Preset { name } => format!("preset:{name}"),
            Self::Tree => "tree".into(),
            Self::Identity => "identity".into(),
            Self::Strategy { path } => format!("strategy:{}", path.display()),
        }
    }

    pub fn load(&self) -> Result<Mechanism> {
        Ok(match self {
            Self::Blt { path } => {
                let doc = ParamsDocument::read(path)
                    .with_context(|| format!("reading parameters from {}", path.display()))?;
                Mechanism::Blt {
                    params: doc.params()?,
                    schema: Some(doc.schema()?),
                }
            }
            Self::Preset { name } => {
                let Some(p) = presets::by_name(name) else {
                    let known: Vec<_> = presets::ALL.iter().map(|p| p.name).collect();
                    bail!(
                        "unknown preset '{name}', expected one of {}",
                        known.join(", ")
                    );
                };
                Mechanism::Blt {
                    params: p.params(),
                    schema: Some(p.schema()),
                }
            }
            Self::Tree => Mechanism::Tree,
            Self::Identity => Mechanism::Blt {
                params: BltParams::identity(),
                schema: None,
            },
            Self::Strategy { path } => Mechanism::Dense(
                load_strategy_matrix(path)
                    .with_context(|| format!("reading strategy from {}", path.display()))?,
            ),
        })
    }
}

impl Mechanism {
    /// Schema the mechanism was optimized for, if it records one.
    pub fn home_schema(&self) -> Option<ParticipationSchema> {
        match self {
            Self::Blt { schema, .. } => *schema,
            _ => None,
        }
    }

    pub fn blt(&self) -> Option<&BltParams> {
        match self {
            Self::Blt { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn evaluate(&self, schema: &ParticipationSchema) -> corrnoise::Result<MechanismLoss> {
        match self {
            Self::Blt { params, .. } => blt_mechanism_loss(params, schema),
            Self::Tree => eval_tree(schema),
            Self::Dense(c) => dense_mechanism_loss(c, schema),
        }
    }
}

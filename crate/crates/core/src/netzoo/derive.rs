use serde::{Deserialize, Serialize};

use super::{DeeperInsertion, GeneratorSpec, GeneratorStyle};
use crate::{Error, Result};

/// How a teacher generator is grown from the student spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherDerivation {
    /// Multiply every internal channel count by `eta`.
    Wider { eta: usize },
    /// Insert residual blocks at every resampling boundary.
    Deeper { blocks_per_site: usize },
}

pub fn derive_teacher(spec: &GeneratorSpec, derivation: TeacherDerivation) -> Result<GeneratorSpec> {
    spec.validate()?;
    let mut out = spec.clone();
    match derivation {
        TeacherDerivation::Wider { eta } => {
            if eta < 2 {
                return Err(Error::InvalidSpec(format!(
                    "wider derivation needs eta >= 2, got {eta}"
                )));
            }
            out.ngf = spec.ngf * eta;
        }
        TeacherDerivation::Deeper { blocks_per_site } => {
            if blocks_per_site == 0 {
                return Err(Error::InvalidSpec("deeper derivation needs blocks_per_site >= 1".into()));
            }
            if spec.style == GeneratorStyle::Resnet {
                return Err(Error::InvalidSpec(
                    "the resnet style has no deeper insertion sites".into(),
                ));
            }
            if spec.deeper.is_some() {
                return Err(Error::InvalidSpec("spec is already a deeper derivation".into()));
            }
            out.deeper = Some(DeeperInsertion { blocks_per_site });
        }
    }
    Ok(out)
}

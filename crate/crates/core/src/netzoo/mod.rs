//! Generators, teacher derivation, the partial-shared discriminator and channel adapters.

mod adapters;
mod derive;
mod discriminator;
mod generator;

pub use adapters::AdapterSet;
pub use derive::{derive_teacher, TeacherDerivation};
pub use discriminator::{SharedDiscriminator, SharedDiscriminatorSpec};
pub use generator::{DeeperInsertion, Generator, GeneratorSpec, GeneratorStyle, NormKind};

use crate::nn::ParamInit;
use crate::Result;

pub fn build_generator(spec: &GeneratorSpec, init: &mut ParamInit) -> Result<Generator> {
    Generator::build(spec, init)
}

pub fn build_shared_discriminator(spec: &SharedDiscriminatorSpec, init: &mut ParamInit) -> Result<SharedDiscriminator> {
    SharedDiscriminator::build(spec, init)
}

//! Generator, patch discriminator and classifier networks plus the
//! checkpoint container they serialise to.

mod checkpoint;
mod classifier;
mod discriminator;
mod generator;
mod init;

pub use checkpoint::{Arch, Checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use classifier::{Classifier, ClassifierConfig, ClassifierOutput};
pub use discriminator::{DiscriminatorOutput, PatchDiscriminator, PatchDiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};

/// Whether batch-norm layers use batch statistics (and update their
/// running estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

//! Class vocabulary and prompt-generation strategies.

mod generate;
pub mod manifest;
mod vocab;

pub use generate::{
    cosine_row, gen_mixup_class, gen_nclass, gen_single_class, gen_single_for_class, gen_variant, pair_classes, PairingMode,
    PairingPolicy, PromptRecord, PromptStrategy, PromptVariant,
};
pub use manifest::{load_manifest, read_manifest, save_manifest, write_manifest};
pub use vocab::{default_templates, ClassEntry, Meaning, Vocabulary};

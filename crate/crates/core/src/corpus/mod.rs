//! Synthetic hiring corpus: skill ontology, CV/JD documents, prompt
//! assembly, seeded dataset slices, and JSONL persistence.
//!
//! The world is small enough to regenerate in milliseconds but rich
//! enough that matching is non-trivial: eight job families over forty
//! skills, a deterministic rule deciding whether a CV suits a JD, and
//! renderers that turn both into token sequences over a closed
//! vocabulary. Everything downstream (fine-tuning, reward training,
//! policy rollouts, the recommender) consumes tensors built from these
//! documents, and the ground-truth rule doubles as the oracle that
//! evaluation stages score against.

pub mod datasets;
pub mod docs;
pub mod io;
pub mod ontology;
pub mod prompt;

pub use datasets::{
    make_datasets, CorpusConfig, DatasetBundle, RecPair, RecSplit, RmtTriple, SftExample,
};
pub use docs::{CVDoc, CorpusSampler, InteractionRecord, JDDoc, JobId, SeekerId};
pub use io::{read_bundle, verify_manifest, write_bundle, Manifest};
pub use ontology::{SkillOntology, Vocab, EOS, PAD, SEP};
pub use prompt::{assemble_prompt, PromptInstance, PromptTemplate};

//! Corpus generation and file formats.

pub mod checkpoint;
mod corpus;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use corpus::{
    decode_features, encode_features, gen_corpus, gen_split, read_jsonl, write_jsonl, Corpus, CorpusManifest,
    CorpusRecord, Family, Split, Task, TaskMix, World, ANSWER_LEN, CMD_ECHO, CMD_LOOK, CMD_RECALL, FIRST_WORD,
    MANIFEST, N_CLASSES, N_KEYS,
};

//! Differentially private synthetic text generation by private prediction.
//!
//! Private prompts are split into disjoint subsets of size `s`. For every
//! generated token, the language model's logits under each private prompt are
//! clipped and averaged, blended with the clipped logits of a public prompt,
//! and the token is sampled from a temperature softmax whose temperature is
//! chosen by the [`accountant`] to meet an `(epsilon, delta)` budget over at
//! most `T` tokens.
//!
//! Modules:
//! * [`mechanism`]: clipping, aggregation, blending, exponential-mechanism sampling
//! * [`accountant`]: temperature solving, composition, per-run budget ledger
//! * [`provider`]: logit providers (toy model, remote server) with prefix sessions
//! * [`pipeline`]: dataset partitioning, prompt templates, generation, corpus files
//! * [`eval`]: k-shot in-context-learning accuracy and structured-output rates
//! * [`attack`]: PII extraction and membership-inference attacks
//! * [`fixtures`]: memorizing toy model and attack datasets

pub mod accountant;
pub mod attack;
pub mod eval;
pub mod fixtures;
pub mod mechanism;
pub mod pipeline;
pub mod provider;

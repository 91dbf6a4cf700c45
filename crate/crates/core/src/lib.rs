//! Student-interaction simulation toolkit.
//!
//! The pipeline learns user and exercise embeddings online with a growing
//! matrix factorization ([`factor`]), trains success and dropout forests on
//! windowed histories ([`predict`]), wraps them in a reward-emitting
//! environment ([`sim`]) and trains exercise-sequencing agents against it
//! ([`agents`]). [`synth`] provides populations with known ground truth and
//! [`harness`] drives the whole chain from the command line.

pub mod factor;
pub mod ingest;
pub mod predict;
pub mod seed;
pub mod synth;
pub mod sim;
pub mod agents;
pub mod harness;

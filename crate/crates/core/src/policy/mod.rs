//! Monotonic attention: training-time expectations and inference-time
//! read/write decisions.

mod decide;
mod monotonic;
mod simulate;

pub use decide::{advance_head, infer_decide, Decider, Decision, EncoderSource, FixedSource, PolicyConfig};
pub use monotonic::{
    expected_alignment, monotonic_context, monotonic_energy, selection_prob, AlignmentMatrix, EnergyMatrix,
    PROB_EPS,
};
pub use simulate::{simulate_decode, DecisionTrace, EncoderMode, Event, StreamInput, StreamingEncoder};

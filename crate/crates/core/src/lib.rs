//! Training-free guidance decoding over three logit streams.
//!
//! At every step the engine evaluates an omni-conditioned base branch, the
//! same model on the text prefix alone (the negative branch) and a text-only
//! reasoning guide, fuses the three logit vectors with one of the strategies in
//! [`guidance`], samples a single token and broadcasts it to every branch.
//!
//! Model backends implement [`source::LogitSource`]. Two ship with the crate:
//! deterministic n-gram tables ([`source::toy`]) and a client for the line
//! protocol served by [`server`].

pub mod decoder;
pub mod guidance;
pub mod numerics;
pub mod protocol;
pub mod report;
pub mod sampler;
pub mod server;
pub mod source;

pub use decoder::{
    bench, caption_then_answer, decode, BenchJob, CaptionOptions, DecodeError, DecodeJob,
    DecodeResult, FinishReason, LatencyReport, NegativeInput,
};
pub use guidance::{Branch, GuidanceConfig, StepWeights, Strategy};
pub use numerics::{js_divergence, kl_divergence, softmax, LogitVector, ProbDist};
pub use report::StepTrace;
pub use sampler::{SamplerConfig, SamplingMode};
pub use source::{
    check_compatibility, prefill, LogitSource, OmniPayload, PromptInput, Session, SourceError,
    TokenId, Vocabulary,
};

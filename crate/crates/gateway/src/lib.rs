//! Chat-completion plumbing for structured extraction.
//!
//! Prompts are assembled from bundled assets, dispatched to any
//! OpenAI-compatible endpoint under a sliding-window rate limit, and the
//! completions are split into a reasoning trace plus the trailing record.

pub mod client;
pub mod exchange;
pub mod limiter;
pub mod profile;
pub mod prompt;
pub mod stub;
pub mod trace;

pub use client::{EndpointConfig, Gateway, GatewayError, RetryPolicy};
pub use exchange::{ExchangeLog, ExchangeRecord, ExchangeSink};
pub use limiter::RateLimiter;
pub use profile::DecodingProfile;
pub use prompt::{build_prompt, ChatMessage, PromptAssets, PromptBundle, PromptError, PromptMode};
pub use trace::{parse_trace, FeatureNote, ParsedCompletion, ReasoningTrace, Segment, SegmentKind, TraceError};

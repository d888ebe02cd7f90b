//! Evaluation harness for comparing prompting strategies on low-resource
//! language tasks.
//!
//! Three classification strategies are supported: direct prompting on the
//! source-language text, chain-of-translation prompting (translate to English
//! and classify in one prompt), and translate-and-test (an external MT system
//! translates first, then an all-English prompt is issued). Headline
//! generation is evaluated with three analogous strategies and scored with
//! ROUGE-L.
//!
//! The crate is organized bottom-up:
//!
//! - [`dataset`] loads and subsamples local dataset files.
//! - [`prompt`] renders a strategy and an example into a [`prompt::PromptSpec`].
//! - [`gateway`] sends prompts to a chat-completions endpoint or a fixture mock,
//!   with retries, a concurrency bound and a content-addressed cache.
//! - [`mt`] pre-translates text for the translate-and-test baseline.
//! - [`parser`] extracts labeled sections from raw model output.
//! - [`metrics`] implements ROUGE-L, error rate and weighted averages.
//! - [`runner`] and [`report`] orchestrate experiment grids and render tables.

pub mod config;
pub mod dataset;
pub mod gateway;
pub mod metrics;
pub mod mt;
pub mod parser;
pub mod prompt;
pub mod report;
pub mod retry;
pub mod runner;
pub mod store;

pub use dataset::{ClassificationExample, GenerationExample, LabelSet};
pub use prompt::{PromptSpec, Section, Strategy, TaskKind};

//! Test harness for the ingest server: a synthetic CMAF muxer that doubles as
//! a parsing oracle, and a small HTTP/1.1 client that drives interface-1 and
//! interface-2 ingests.

pub mod client;
pub mod push;
pub mod synth;

pub use push::{delete_interface2, push_interface1, push_interface2, FileReport, PushReport};
pub use synth::{synth_track, ExpectedChunk, SynthSpec, SynthTrack, TrackKind};

//! HTTP applications: CMAF ingest, DASH/HLS ingest and file serving.

pub mod cmaf;
pub mod dash_hls;
pub mod serve;

use crate::event::{Event, EventStream};

pub use cmaf::{parse_ingest_path, CmafIngest, IngestAddress, IngestPathError};
pub use dash_hls::DashHlsIngest;
pub use serve::{content_type_for, GenericServe};

/// Publishes an event, logging instead of failing when the stream is gone.
pub(crate) fn emit(events: &EventStream, event: Event) {
    if let Err(e) = events.publish(event) {
        tracing::debug!(stream = events.name(), error = %e, "event dropped");
    }
}

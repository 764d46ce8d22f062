//! Posts every event to a webhook as a structured-mode CloudEvent.
//!
//! Delivery is fire and forget: failures are logged and the event dropped.

use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::config::CloudEventOptions;
use crate::event::Event;
use crate::media::{FragmentInfo, TrackInfo};

use super::{event_loop, FunctionCtx, FunctionError};

pub const CONTENT_TYPE: &str = "application/cloudevents+json";
pub const TYPE_PREFIX: &str = "media.ingest";

pub struct CloudEvent {
    pub(crate) name: String,
    pub(crate) handle: JoinHandle<()>,
}

fn track_json(t: &TrackInfo) -> Value {
    json!({
        "presentation": t.presentation,
        "switchingSet": t.switching_set,
        "track": t.id,
        "handler": t.handler().as_str(),
        "timescale": t.timescale(),
    })
}

fn fragment_json(f: &FragmentInfo) -> Value {
    json!({
        "track": track_json(&f.track),
        "sequenceNumber": f.sequence_number,
        "startTime": f.start_time,
        "duration": f.duration,
        "size": f.size,
        "chunkCount": f.chunk_count,
    })
}

/// The event payload carried in the `data` attribute.
pub fn event_data(ev: &Event) -> Value {
    let mut data = match ev {
        Event::File { .. } => json!({}),
        Event::InitSegment { track, .. } => json!({ "track": track_json(track) }),
        Event::Fragment { fragment, .. } => json!({ "fragment": fragment_json(fragment) }),
        Event::Stream { presentation, .. } => json!({ "presentation": presentation.id }),
        Event::SwitchingSet { switching_set, .. } => json!({
            "presentation": switching_set.presentation,
            "switchingSet": switching_set.id,
        }),
        Event::Track { track, .. } => json!({ "track": track_json(track) }),
    };
    if let (Some(file), Some(obj)) = (ev.file(), data.as_object_mut()) {
        obj.insert("volume".into(), json!(file.volume.name()));
        obj.insert("path".into(), json!(file.path.as_str()));
    }
    data
}

fn subject(ev: &Event) -> Option<String> {
    match ev {
        Event::Stream { presentation, .. } => Some(presentation.id.clone()),
        Event::SwitchingSet { switching_set, .. } => {
            Some(format!("{}/{}", switching_set.presentation, switching_set.id))
        }
        Event::Track { track, .. } => Some(track.dir()),
        _ => ev.file().map(|f| f.path.to_string()),
    }
}

/// Encodes an event as a CloudEvents 1.0 JSON object.
pub fn cloud_event_json(ev: &Event, source: &str) -> Value {
    let mut out = json!({
        "specversion": "1.0",
        "id": uuid::Uuid::new_v4().to_string(),
        "type": format!("{TYPE_PREFIX}.{}.{}", ev.family(), ev.kind_name()),
        "source": source,
        "time": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        "datacontenttype": "application/json",
        "data": event_data(ev),
    });
    if let Some(s) = subject(ev) {
        out["subject"] = json!(s);
    }
    out
}

impl CloudEvent {
    pub fn spawn(name: String, ctx: FunctionCtx, opts: CloudEventOptions) -> Result<Self, FunctionError> {
        let sub = ctx.events.subscribe()?;
        let source = opts.source.clone().unwrap_or_else(|| format!("/apps/{}", ctx.app));
        let agent = ureq::AgentBuilder::new().timeout(opts.timeout.0).build();
        let fn_name = name.clone();
        let handle = ctx.tracker.spawn(&format!("fn-{name}"), move || {
            event_loop(sub, &ctx.cancel, |ev| {
                let body = cloud_event_json(&ev, &source);
                let result = agent
                    .post(&opts.url)
                    .set("content-type", CONTENT_TYPE)
                    .send_string(&body.to_string());
                match result {
                    Ok(_) => tracing::trace!(function = %fn_name, kind = %body["type"], "event delivered"),
                    Err(e) => tracing::warn!(function = %fn_name, error = %e, "event dropped"),
                }
            });
        })?;
        Ok(Self { name, handle })
    }
}

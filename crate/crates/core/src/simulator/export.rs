//! Timeline serialisation: Chrome trace-event JSON and a flat CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde_json::{json, Value};

use super::{Stream, TimelineEvent};
use crate::error::Result;

const PID: u32 = 1;

fn tid(stream: Stream) -> u32 {
    match stream {
        Stream::Load => 1,
        Stream::Compute => 2,
    }
}

/// Chrome trace (`chrome://tracing`, Perfetto) in the JSON object format:
/// one process with a `load` and a `compute` thread, one complete (`"X"`)
/// event per timeline event, timestamps in microseconds. `metadata` ends up
/// under `otherData`.
pub fn chrome_trace(events: &[TimelineEvent], metadata: &BTreeMap<String, String>) -> Value {
    let mut trace_events = vec![
        json!({"name": "process_name", "ph": "M", "pid": PID, "tid": 0, "args": {"name": "moe-offload"}}),
        json!({"name": "thread_name", "ph": "M", "pid": PID, "tid": tid(Stream::Load), "args": {"name": "load"}}),
        json!({"name": "thread_name", "ph": "M", "pid": PID, "tid": tid(Stream::Compute), "args": {"name": "compute"}}),
    ];
    trace_events.extend(events.iter().map(|e| {
        let (prefix, cat) = match e.stream {
            Stream::Load => ("L", "load"),
            Stream::Compute => ("C", "compute"),
        };
        json!({
            "name": format!("{prefix}{}", e.expert_id),
            "cat": cat,
            "ph": "X",
            "pid": PID,
            "tid": tid(e.stream),
            "ts": e.start * 1e6,
            "dur": (e.end - e.start) * 1e6,
            "args": {"layer": e.layer_id, "expert": e.expert_id},
        })
    }));
    json!({
        "traceEvents": trace_events,
        "displayTimeUnit": "ms",
        "otherData": metadata,
    })
}

/// Writes `stream,layer,expert,start_s,end_s` rows with a header.
pub fn write_events_csv<W: Write>(writer: W, events: &[TimelineEvent]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for e in events {
        wtr.serialize(e)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<TimelineEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let events = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Not exactly representable; exercises round-tripping.
    const BETA: f64 = 167_772_160.0 / 16e9;

    fn sample() -> Vec<TimelineEvent> {
        vec![
            TimelineEvent {
                stream: Stream::Load,
                layer_id: 0,
                expert_id: 3,
                start: 0.0,
                end: BETA,
            },
            TimelineEvent {
                stream: Stream::Compute,
                layer_id: 0,
                expert_id: 3,
                start: BETA,
                end: 0.1 + 0.2,
            },
        ]
    }

    #[test]
    fn csv_header_and_round_trip() {
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("stream,layer,expert,start_s,end_s\nload,0,3,"));
        assert_eq!(read_events_csv(buf.as_slice()).unwrap(), sample());
    }

    #[test]
    fn chrome_layout() {
        let meta = BTreeMap::from([("scenario".to_string(), "t".to_string())]);
        let trace = chrome_trace(&sample(), &meta);
        let events = trace["traceEvents"].as_array().unwrap();
        assert_eq!(events.len(), 5);
        assert_eq!(events[1]["args"]["name"], "load");
        assert_eq!(events[2]["args"]["name"], "compute");
        assert_eq!(events[3]["ph"], "X");
        assert_eq!(events[3]["name"], "L3");
        assert_eq!(events[4]["tid"], 2);
        assert_eq!(events[4]["ts"].as_f64().unwrap(), BETA * 1e6);
        assert_eq!(trace["otherData"]["scenario"], "t");
    }
}

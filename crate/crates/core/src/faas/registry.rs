use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use crate::sim::Millis;

/// Default service times for the three synthetic workload classes.
pub const CHATTY_MS: Millis = 2;
pub const DATA_INTENSIVE_MS: Millis = 25;
pub const COMPUTE_INTENSIVE_MS: Millis = 500;

/// What a handler sees: a snapshot of the object's structured state and the
/// call arguments. Unstructured state is reachable only through the gateway.
pub struct HandlerInput<'a> {
    pub object_id: &'a str,
    pub function: &'a str,
    pub structured: &'a Value,
    pub args: &'a Value,
}

/// Capability-scoped access to the object's unstructured state.
pub trait BlobGateway {
    fn read(&mut self, key: &str) -> Result<Vec<u8>, String>;
    fn write(&mut self, key: &str, bytes: Vec<u8>) -> Result<(), String>;
}

/// Gateway for handlers that never touch blobs.
pub struct NoBlobs;

impl BlobGateway for NoBlobs {
    fn read(&mut self, key: &str) -> Result<Vec<u8>, String> {
        Err(format!("no blob access granted for `{key}`"))
    }
    fn write(&mut self, key: &str, _: Vec<u8>) -> Result<(), String> {
        Err(format!("no blob access granted for `{key}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandlerOutput {
    /// Replacement structured state; `None` leaves it unchanged.
    pub structured: Option<Value>,
    /// Value returned to the caller.
    pub output: Option<Value>,
    /// Structured state of a new output object.
    pub new_object: Option<Value>,
}

pub type HandlerFn = Arc<
    dyn Fn(&HandlerInput<'_>, &mut dyn BlobGateway) -> Result<HandlerOutput, String> + Send + Sync,
>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceTime {
    Fixed(Millis),
    /// `base_ms` plus `per_kib_ms` for every KiB of the `size` argument.
    PerByte {
        base_ms: Millis,
        per_kib_ms: f64,
    },
}

impl ServiceTime {
    pub fn for_args(&self, args: &Value) -> Millis {
        match *self {
            ServiceTime::Fixed(ms) => ms,
            ServiceTime::PerByte {
                base_ms,
                per_kib_ms,
            } => {
                let bytes = args.get("size").and_then(Value::as_u64).unwrap_or(0);
                base_ms + (bytes as f64 / 1024.0 * per_kib_ms).ceil() as Millis
            }
        }
    }

    /// Nominal service time used for capacity planning.
    pub fn nominal_ms(&self) -> f64 {
        match *self {
            ServiceTime::Fixed(ms) => ms as f64,
            ServiceTime::PerByte { base_ms, .. } => base_ms as f64,
        }
    }
}

#[derive(Clone)]
pub struct Handler {
    pub service: ServiceTime,
    pub body: HandlerFn,
}

impl std::fmt::Debug for Handler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Handler")
            .field("service", &self.service)
            .finish()
    }
}

/// Handlers keyed by the handler id named in package files.
#[derive(Debug, Clone, Default)]
pub struct HandlerRegistry {
    handlers: BTreeMap<String, Handler>,
}

impl HandlerRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Built-in synthetic handlers: `json_update`, `counter_increment`,
    /// `echo`, `blob_rewrite`, the three workload classes (`chatty`,
    /// `data_intensive`, `compute_intensive`) and a three-stage frame
    /// pipeline (`split_frames`, `detect_faces`, `recognize_faces`).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("json_update", ServiceTime::Fixed(CHATTY_MS), json_update);
        r.register(
            "counter_increment",
            ServiceTime::Fixed(CHATTY_MS),
            counter_increment,
        );
        r.register("echo", ServiceTime::Fixed(CHATTY_MS), echo);
        r.register(
            "blob_rewrite",
            ServiceTime::PerByte {
                base_ms: DATA_INTENSIVE_MS,
                per_kib_ms: 0.05,
            },
            blob_rewrite,
        );
        r.register("chatty", ServiceTime::Fixed(CHATTY_MS), counter_increment);
        r.register(
            "data_intensive",
            ServiceTime::Fixed(DATA_INTENSIVE_MS),
            json_update,
        );
        r.register(
            "compute_intensive",
            ServiceTime::Fixed(COMPUTE_INTENSIVE_MS),
            echo,
        );
        r.register(
            "split_frames",
            ServiceTime::Fixed(DATA_INTENSIVE_MS),
            split_frames,
        );
        r.register(
            "detect_faces",
            ServiceTime::Fixed(COMPUTE_INTENSIVE_MS),
            detect_faces,
        );
        r.register(
            "recognize_faces",
            ServiceTime::Fixed(DATA_INTENSIVE_MS),
            recognize_faces,
        );
        r
    }

    pub fn register<F>(&mut self, id: &str, service: ServiceTime, body: F)
    where
        F: Fn(&HandlerInput<'_>, &mut dyn BlobGateway) -> Result<HandlerOutput, String>
            + Send
            + Sync
            + 'static,
    {
        self.handlers.insert(
            id.to_string(),
            Handler {
                service,
                body: Arc::new(body),
            },
        );
    }

    pub fn get(&self, id: &str) -> Option<&Handler> {
        self.handlers.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }
}

fn as_object(v: &Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap_or_default()
}

/// Merges `args` into the state. `{"append": {k: v}}` pushes onto arrays,
/// `{"set": {k: v}}` assigns, any other object is merged key by key.
pub fn json_update(
    input: &HandlerInput<'_>,
    _: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let mut state = as_object(input.structured);
    let args = input
        .args
        .as_object()
        .ok_or("json_update expects an object")?;
    let structured_ops = args.contains_key("append") || args.contains_key("set");
    if structured_ops {
        if let Some(set) = args.get("set").and_then(Value::as_object) {
            for (k, v) in set {
                state.insert(k.clone(), v.clone());
            }
        }
        if let Some(app) = args.get("append").and_then(Value::as_object) {
            for (k, v) in app {
                let slot = state
                    .entry(k.clone())
                    .or_insert_with(|| Value::Array(vec![]));
                match slot {
                    Value::Array(items) => items.push(v.clone()),
                    _ => return Err(format!("`{k}` is not a list")),
                }
            }
        }
    } else {
        for (k, v) in args {
            state.insert(k.clone(), v.clone());
        }
    }
    Ok(HandlerOutput {
        structured: Some(Value::Object(state)),
        output: None,
        new_object: None,
    })
}

/// Adds `args.by` (default 1) to the `count` field.
pub fn counter_increment(
    input: &HandlerInput<'_>,
    _: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let mut state = as_object(input.structured);
    let by = input.args.get("by").and_then(Value::as_i64).unwrap_or(1);
    let count = state.get("count").and_then(Value::as_i64).unwrap_or(0) + by;
    state.insert("count".into(), json!(count));
    Ok(HandlerOutput {
        structured: Some(Value::Object(state)),
        output: Some(json!(count)),
        new_object: None,
    })
}

pub fn echo(input: &HandlerInput<'_>, _: &mut dyn BlobGateway) -> Result<HandlerOutput, String> {
    Ok(HandlerOutput {
        structured: None,
        output: Some(input.args.clone()),
        new_object: None,
    })
}

/// Rewrites blob `args.key` to `args.content` (or its reversed bytes) and
/// bumps `revision` in the structured state.
pub fn blob_rewrite(
    input: &HandlerInput<'_>,
    blobs: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let key = input
        .args
        .get("key")
        .and_then(Value::as_str)
        .ok_or("blob_rewrite expects `key`")?;
    let bytes = match input.args.get("content").and_then(Value::as_str) {
        Some(c) => c.as_bytes().to_vec(),
        None => {
            let mut b = blobs.read(key).unwrap_or_default();
            b.reverse();
            b
        }
    };
    blobs.write(key, bytes)?;
    let mut state = as_object(input.structured);
    let rev = state.get("revision").and_then(Value::as_i64).unwrap_or(0) + 1;
    state.insert("revision".into(), json!(rev));
    Ok(HandlerOutput {
        structured: Some(Value::Object(state)),
        output: Some(json!(rev)),
        new_object: None,
    })
}

/// Splits `frames` (default 4) of the source into a new frame-set object.
pub fn split_frames(
    input: &HandlerInput<'_>,
    _: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let n = input
        .args
        .get("frames")
        .and_then(Value::as_u64)
        .or_else(|| input.structured.get("frames").and_then(Value::as_u64))
        .unwrap_or(4);
    let source = input
        .structured
        .get("name")
        .cloned()
        .unwrap_or(json!(input.object_id));
    let frames: Vec<Value> = (0..n)
        .map(|i| json!(format!("{}#{i}", source.as_str().unwrap_or("?"))))
        .collect();
    Ok(HandlerOutput {
        new_object: Some(json!({ "source": source, "frames": frames })),
        ..Default::default()
    })
}

/// Marks every third frame as containing a face.
pub fn detect_faces(
    input: &HandlerInput<'_>,
    _: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let frames = input
        .structured
        .get("frames")
        .and_then(Value::as_array)
        .ok_or("detect_faces expects frames")?;
    let faces: Vec<Value> = frames
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 3 == 0)
        .map(|(i, f)| json!({ "frame": f, "box": [i * 10, i * 10, 32, 32] }))
        .collect();
    Ok(HandlerOutput {
        new_object: Some(json!({ "source": input.structured.get("source"), "faces": faces })),
        ..Default::default()
    })
}

/// Labels each detected face using the `gallery` argument (a list of names).
pub fn recognize_faces(
    input: &HandlerInput<'_>,
    _: &mut dyn BlobGateway,
) -> Result<HandlerOutput, String> {
    let faces = input
        .structured
        .get("faces")
        .and_then(Value::as_array)
        .ok_or("recognize_faces expects faces")?;
    let gallery: Vec<String> = input
        .args
        .get("gallery")
        .and_then(Value::as_array)
        .map(|g| {
            g.iter()
                .filter_map(|v| v.as_str().map(String::from))
                .collect()
        })
        .unwrap_or_else(|| vec!["unknown".into()]);
    let labels: Vec<Value> = faces
        .iter()
        .enumerate()
        .map(|(i, f)| json!({ "frame": f["frame"], "who": gallery[i % gallery.len()] }))
        .collect();
    Ok(HandlerOutput {
        new_object: Some(json!({ "source": input.structured.get("source"), "labels": labels })),
        ..Default::default()
    })
}

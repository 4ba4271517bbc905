//! Simulated function execution plane: handler registry, container pools with
//! cold starts, reactive autoscaling and rate-guarantee pre-warming.

mod pool;
mod registry;

pub use pool::{
    contended_service_ms, warm_containers_for_rate, warm_containers_under_contention,
    ContainerPool, JobId, PoolConfig, PoolEffect, PoolStats,
};
pub use registry::{
    detect_faces, json_update, recognize_faces, split_frames, BlobGateway, Handler, HandlerFn,
    HandlerInput, HandlerOutput, HandlerRegistry, NoBlobs, ServiceTime, CHATTY_MS,
    COMPUTE_INTENSIVE_MS, DATA_INTENSIVE_MS,
};

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum FaasError {
    #[error("request waited longer than the {deadline_ms}ms deadline")]
    Timeout { deadline_ms: u64 },
    #[error("handler fault: {0}")]
    HandlerFault(String),
    #[error("no handler registered as `{0}`")]
    UnknownHandler(String),
    #[error("capacity exceeded: need {required_vcpu} vcpu, {available_vcpu} available")]
    CapacityExceeded {
        required_vcpu: u64,
        available_vcpu: u64,
    },
}

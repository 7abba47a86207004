//! Service layer: durable records, the platform actor and the `/v1` HTTP
//! endpoints.

pub mod routes;
pub mod service;
pub mod store;

pub use routes::{router, ApiError};
pub use service::{PlatformHandle, PlatformService, ServiceError, ServiceOptions, Snapshot};
pub use store::{ExperimentRecord, LoadReport, RecordStore, SCHEMA_VERSION};

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    handle: PlatformHandle,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(handle))
        .with_graceful_shutdown(shutdown)
        .await
}

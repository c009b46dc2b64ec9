//! HTTP verification service: enroll unmasked identities, match masked
//! probes, keep the gallery on disk.

pub mod http;
pub mod store;

pub use http::{router, serve, AppState, ImageEmbedder};
pub use store::{GalleryStore, Snapshot, StoreError};

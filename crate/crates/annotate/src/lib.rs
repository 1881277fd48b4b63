//! Rating campaigns over pipeline run logs, served over HTTP.
//!
//! Ratings are appended to a JSON Lines log and flushed to disk before they
//! are acknowledged; the service rebuilds its state from that log on start.

pub mod campaign;
pub mod service;
pub mod store;

pub use campaign::{load_campaign, AnnotationTask, Campaign, CampaignError, SessionState};
pub use service::{router, Metrics, ServiceState};
pub use store::{RatingStore, StoredRating, StoreError};

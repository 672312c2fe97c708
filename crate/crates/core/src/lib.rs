pub mod backend;
pub mod cli;
pub mod ingestion;
pub mod metrics;
pub mod model;
pub mod parsing;
pub mod pipeline;
pub mod reporting;
pub mod similarity;
pub mod transport;
pub mod uncertainty;

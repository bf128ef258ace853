//! Tabular data: schema, CSV ingestion, state codec, the mixed
//! Gaussian/multinomial diffusion model and synthetic generators.

pub mod codec;
pub mod dataset;
pub mod model;
pub mod schema;
pub mod synthetic;

pub use codec::{Block, StatePosition, TabularCodec};
pub use dataset::{ingest_csv, ingest_reader, Ingested, RowDiagnostic, Split, TabularDataset};
pub use model::{train_model, train_tabddpm, MixedLoss, TabularModel};
pub use schema::{Column, ColumnKind, TabularSchema};

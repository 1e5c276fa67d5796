//! Command-line workflow and HTTP service for the `calibra` pipeline.
//!
//! ```text
//! calibra gen-data --out data/
//! calibra train-vae --data data/ --out runs/vae.json
//! calibra train-predictor --latents runs/latents.csv --out runs/pred.json
//! calibra train-baseline --latents runs/latents.csv --out runs/base.json
//! calibra eval --model runs/pred.json --baseline runs/base.json --latents runs/latents.csv --out report/
//! calibra counterfact --model runs/pred.json --vae runs/vae.json --latents runs/latents.csv --sample s00042 --out cf/
//! calibra serve --data data/ --vae runs/vae.json --latents runs/latents.csv --model runs/pred.json
//! ```

pub mod api;
pub mod artifacts;
pub mod cli;
pub mod error;

pub use cli::{run, Cli};
pub use error::{CliError, CliResult};

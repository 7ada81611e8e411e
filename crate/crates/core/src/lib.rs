//! Structure learning for binary Bayesian networks whose conditional
//! probability tables have rank 2, from black-box conditional-probability
//! queries and, optionally, observational samples.
//!
//! The pipeline: [`network`] generates instances, [`oracle`] answers
//! queries, [`recovery`] and [`solver`] recover sparse Fourier spectra,
//! [`learn`] peels terminal nodes, [`markov_blanket`] shrinks the queries
//! using observational moments, and [`experiment`] runs seeded sweeps.

pub mod exec;
pub mod experiment;
pub mod fourier;
pub mod graph;
pub mod learn;
pub mod markov_blanket;
pub mod network;
pub mod oracle;
pub mod recovery;
pub mod rng;
pub mod solver;
pub mod subset;

use thiserror::Error;

/// Any library failure, for callers that only need a category and a
/// message.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Generation(#[from] graph::GenerationError),
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Fourier(#[from] fourier::FourierError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Dataset(#[from] oracle::DatasetError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
    #[error(transparent)]
    Recovery(#[from] recovery::RecoveryError),
    #[error(transparent)]
    Learn(#[from] learn::LearnError),
    #[error(transparent)]
    MarkovBlanket(#[from] markov_blanket::MbError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Graph(_) => "graph",
            Error::Generation(_) => "generation",
            Error::Network(_) => "network",
            Error::Fourier(_) => "fourier",
            Error::Oracle(_) => "oracle",
            Error::Dataset(_) => "dataset",
            Error::Solver(_) => "solver",
            Error::Recovery(_) => "recovery",
            Error::Learn(learn::LearnError::Stall { .. }) => "stall",
            Error::Learn(_) => "learn",
            Error::MarkovBlanket(_) => "markov_blanket",
            Error::Experiment(_) => "experiment",
            Error::Io { .. } => "io",
        }
    }
}

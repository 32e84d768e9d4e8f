//! Expectation-maximization for Gaussian mixtures with deterministic
//! annealing, classical (DSAEM) and quantum (DQAEM).
//!
//! The crate is split along the life of a fit:
//!
//! * [`model`]: parameters, datasets, densities and per-point energies
//! * [`linalg`]: Jacobi eigensolver and matrix-exponential oracle
//! * [`posteriors`]: classical, tempered and quantum E-steps, free energy
//! * [`estimators`]: shared M-step, annealing schedules and the fit loop
//! * [`data_io`]: synthetic data, CSV and JSON exchange
//! * [`bench`]: paired-trial success-ratio experiments
//!
//! ```
//! use dqaem::prelude::*;
//!
//! let data = sample_gmm(&GeneratorSpec::paper(1)).unwrap();
//! let init = random_init(&data, 3, 7).unwrap();
//! let result = fit(&data, &FitConfig::default_for(Algorithm::Dqaem), &init).unwrap();
//! assert_eq!(result.trace[0].gamma, Some(1.0));
//! assert_eq!(result.trace.last().unwrap().gamma, Some(0.0));
//! ```

pub mod bench;
pub mod data_io;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod posteriors;

pub use error::{Error, Result};

// Compiles and runs the code blocks of the guide in `book/` as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/posteriors.md")]
    mod posteriors {}
    #[doc = include_str!("../../../book/src/free_energy.md")]
    mod free_energy {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}

pub mod prelude {
    pub use crate::bench::{
        emit_trace_table, is_success, match_components, run_benchmark, BenchConfig, BenchReport,
        SuccessCriterion,
    };
    pub use crate::data_io::{read_csv, sample_gmm, write_csv, write_result_json, GeneratorSpec};
    pub use crate::estimators::{
        fit, m_step, make_schedule, random_init, Algorithm, FitConfig, FitResult, Schedule,
        ScheduleKind,
    };
    pub use crate::model::{hamiltonian_diag, log_gaussian, log_likelihood, Dataset, GmmParams};
    pub use crate::posteriors::{
        classical_posterior, entropy_term, posterior_from_energies, q_function, quantum_estep,
        tempered_posterior, u_function, CouplingMatrix, Kernel, Responsibilities,
    };
}

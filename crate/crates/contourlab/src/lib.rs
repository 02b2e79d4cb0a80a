//! Lattice contour toolkit.
//!
//! Periodic point sets, finite spin spaces and translation-invariant
//! interaction families with values in ℝ ∪ {+∞}; admissibility and richness
//! checking; periodic ground states; block recoding to an equivalent
//! nearest-cube model with constant ground states; contour extraction and
//! enumeration; exact contour-ensemble resummation of partition functions;
//! truncated polymer expansions of free energies; and brute-force enumeration
//! oracles that cross-check every other computation at desk scale.
//!
//! All arithmetic that feeds a verdict is exact (rationals, or integers
//! scaled by a common denominator); floating point appears only where a
//! quantity is irrational by nature (logs of partition sums), and those sums
//! are accumulated in high precision before rounding.

pub mod cli;
pub mod contours;
pub mod exact;
pub mod expansion;
pub mod geometry;
pub mod groundstates;
pub mod hp;
pub mod model;
pub mod reduction;

mod instance;
mod transfer;

use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to print a
/// actionable one-line message; operations that produce PASS/FAIL verdicts
/// return report structs instead (a failed check is a result, not an error).
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("enumeration cap exceeded: {what} needs {needed}, cap is {cap}")]
    CapExceeded {
        what: String,
        needed: String,
        cap: String,
    },
    #[error("boundary condition does not cover sites: {0}")]
    UncoveredSites(String),
    #[error("inadmissible input: {0}")]
    Inadmissible(String),
    #[error("region not aligned to block boundaries: {0}")]
    Misaligned(String),
    #[error("invalid contour family: {0}")]
    IncompatibleFamily(String),
    #[error("contour boundary touches the region edge; enlarge the box ({0})")]
    BoundaryTouchesEdge(String),
    #[error("{0}")]
    BadInput(String),
    #[error("internal inconsistency: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

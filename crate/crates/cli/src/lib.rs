//! Experiment harness for `hypermarg-core`: JSON configs in, CSV/JSON
//! artifacts out. The `hypermarg` binary is a thin shell over these modules.

pub mod bench;
pub mod error;
pub mod experiment;
pub mod output;
pub mod sample_size;
pub mod slice;

pub use error::{CliError, Result};

/// Environment variable capping the rayon pool used for probe parallelism.
pub const THREADS_ENV: &str = "HYPERMARG_THREADS";

/// Parse a thread-count value; empty means "let rayon decide".
pub fn parse_threads(value: &str) -> Result<Option<usize>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(None);
    }
    match v.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(Some(n)),
        _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{value}'"))),
    }
}

/// Size the global pool from the environment. Call once, before any work.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    if let Some(n) = parse_threads(&value)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_counts_parse_or_reject() {
        assert_eq!(parse_threads("").unwrap(), None);
        assert_eq!(parse_threads(" 3 ").unwrap(), Some(3));
        assert!(parse_threads("0").is_err());
        assert!(parse_threads("many").is_err());
    }
}

use prodg::ProdgError;

/// Bad flags, config or inputs; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A verification check failed; exit code 4.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub const OK: i32 = 0;
pub const FAILURE: i32 = 1;
pub const USAGE: i32 = 2;
pub const NUMERICAL: i32 = 3;
pub const VERIFICATION: i32 = 4;

pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<VerificationFailed>() {
            return VERIFICATION;
        }
        if let Some(e) = cause.downcast_ref::<ProdgError>() {
            return match e {
                ProdgError::Numerical { .. } => NUMERICAL,
                ProdgError::InvalidArgument(_)
                | ProdgError::InvalidConfig(_)
                | ProdgError::Load(_)
                | ProdgError::Backend(_) => USAGE,
                ProdgError::InvalidState(_) | ProdgError::Io(_) => FAILURE,
            };
        }
    }
    FAILURE
}

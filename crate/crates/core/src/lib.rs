pub mod clock;
pub mod dcci;
pub mod lms;
pub mod router;
pub mod wizard;
pub mod analytics;
pub mod pipeline;
pub mod gateway;

pub mod bp;
pub mod density;
pub mod linalg;
pub mod models;
pub mod pmbm_exact;
pub mod registry;
pub mod filter;
pub mod lp;
pub mod metrics;

pub mod gateway;
pub mod geometry;
pub mod matrix;
pub mod store;
pub mod pool;
pub mod retrieval;
pub mod prompting;
pub mod annotation;
pub mod metrics;

#[cfg(test)]
pub(crate) mod test_support;

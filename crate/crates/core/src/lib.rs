pub mod activation;
pub mod data_io;
pub mod empirical_ntk;
pub mod finite_net;
pub mod linalg;
pub mod meanfield;
pub mod lab;
pub mod ntk_theory;
pub mod quadrature;
pub mod rng;

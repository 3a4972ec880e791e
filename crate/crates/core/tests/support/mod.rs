//! Independent reference implementations shared by the integration and
//! acceptance suites.
#![allow(dead_code)]

pub mod instances;
pub mod pca_oracle;
pub mod qp;

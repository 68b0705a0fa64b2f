//! Oracle checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod grad;
pub mod metric;
pub mod optim;

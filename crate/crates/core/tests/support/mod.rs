#![allow(dead_code)]

pub mod fd;
pub mod fuzz;
pub mod netcase;
pub mod ssp;

#![allow(dead_code)]

pub mod criteria;
pub mod experiment;
pub mod gradcheck;
pub mod oracles;

#![allow(dead_code)]

pub mod bt_oracle;
pub mod fixtures;

pub mod adapters;
pub mod cli;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod prompting;
pub mod relsdata;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub mod ablation;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod matching;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

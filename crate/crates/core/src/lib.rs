//! Data discovery and preparation engine.
//!
//! A session reifies the user's information need as a target model `(T, S)`:
//! a set of view schemas `T` and a transformation `S` over them. Planners
//! retrieve and probe corpus tables, materialize each view through recorded
//! operators, and execute `S` to produce the answer [`model::Document`].

pub mod conductor;
pub mod context;
pub mod db;
pub mod lm;
pub mod materializer;
pub mod model;
pub mod retriever;
pub mod script;
pub mod value;

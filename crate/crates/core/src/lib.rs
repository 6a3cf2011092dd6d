pub mod alerting;
pub mod budget;
pub mod enforcement;
pub mod gate;
pub mod ingest;
pub mod model;
pub mod money;
pub mod monitor;
pub mod service;
pub mod storage;

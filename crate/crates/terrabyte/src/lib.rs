//! Object store, staging job engine, HTTPS gateway, download client and
//! command-line front end for the TerraByte image portal.

pub mod archive;
pub mod jobengine;
pub mod objectstore;
pub mod snapshot;
pub mod gateway;
pub mod cli;
pub mod client;
pub mod datagen;

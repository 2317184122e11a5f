//! Voltage monitoring simulator with a centralised client-server mode and a
//! decentralised mode built on a content-addressed store and a proof-of-work
//! hash registry.

pub mod bench;
pub mod castore;
pub mod chainledger;
pub mod config;
pub mod detector;
pub mod voltchain;
pub mod voltstar;
pub mod waveform;

pub mod batch;
pub mod cli;
pub mod controller;
pub mod droop;
pub mod fixtures;
pub mod format;
pub mod harness;
pub mod network;
pub mod oracle;
pub mod plant;
pub mod powerflow;
pub mod qp;
pub mod scenario;
pub mod sensitivity;
pub mod setpoint;

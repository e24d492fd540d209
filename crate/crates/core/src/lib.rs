pub mod ckpt;
pub mod coordinator;
pub mod fabric;
pub mod filltime;
pub mod harness;
pub mod virt;

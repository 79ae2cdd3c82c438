pub mod codec;
pub mod digest;
pub mod ledger;
pub mod primitives;
pub mod tee;
pub mod node;
pub mod superblock;
pub mod adversary;
pub mod scenario;
pub mod simnet;
pub mod luckstats;

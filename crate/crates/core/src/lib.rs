pub mod evalgen;
pub mod fttp;
pub mod idmodel;
pub mod linkage;
pub mod pprl;
pub mod pseudonym;
pub mod registry;
pub mod store;

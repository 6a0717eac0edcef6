pub mod mir;
pub mod symex;
pub mod features;
pub mod learn;
pub mod obfuscator;
pub mod corpus;
pub mod deobf;
pub mod rawdata;
pub mod cli;

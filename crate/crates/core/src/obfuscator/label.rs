use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Ground truth for one conditional jump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NORMAL")]
    Normal,
    /// Always takes the taken edge.
    #[serde(rename = "OP_TRUE")]
    OpTrue,
    /// Always takes the fallthrough edge.
    #[serde(rename = "OP_FALSE")]
    OpFalse,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "NORMAL",
            Label::OpTrue => "OP_TRUE",
            Label::OpFalse => "OP_FALSE",
        }
    }

    pub fn is_opaque(self) -> bool {
        self != Label::Normal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Label, String> {
        match s {
            "NORMAL" => Ok(Label::Normal),
            "OP_TRUE" => Ok(Label::OpTrue),
            "OP_FALSE" => Ok(Label::OpFalse),
            _ => Err(format!("unknown label `{s}`")),
        }
    }
}

/// Construction family of an injected predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpaqueKind {
    Arithmetic,
    #[serde(rename = "MBA")]
    Mba,
    Alias,
    Environment,
    BiOpaqueFloat,
    BiOpaqueSymMem,
}

impl OpaqueKind {
    pub const ALL: [OpaqueKind; 6] = [
        OpaqueKind::Arithmetic,
        OpaqueKind::Mba,
        OpaqueKind::Alias,
        OpaqueKind::Environment,
        OpaqueKind::BiOpaqueFloat,
        OpaqueKind::BiOpaqueSymMem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpaqueKind::Arithmetic => "Arithmetic",
            OpaqueKind::Mba => "MBA",
            OpaqueKind::Alias => "Alias",
            OpaqueKind::Environment => "Environment",
            OpaqueKind::BiOpaqueFloat => "BiOpaqueFloat",
            OpaqueKind::BiOpaqueSymMem => "BiOpaqueSymMem",
        }
    }
}

impl fmt::Display for OpaqueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpaqueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<OpaqueKind, String> {
        OpaqueKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown opaque kind `{s}`"))
    }
}

//! Request and response bodies of the model wire protocol (version 1).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::context::PromptSequence;

pub const PROTOCOL_VERSION: u32 = 1;

/// Default generation length cap sent when the caller sets none.
pub const DEFAULT_MAX_LENGTH: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Generate,
    Describe,
    EmbedText,
    EmbedImage,
}

impl Endpoint {
    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Generate => "/generate",
            Endpoint::Describe => "/describe",
            Endpoint::EmbedText => "/embed_text",
            Endpoint::EmbedImage => "/embed_image",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.path())
    }
}

/// Candidate decoding regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Beam { width: usize },
}

impl Decoding {
    pub fn width(self) -> usize {
        match self {
            Decoding::Greedy => 1,
            Decoding::Beam { width } => width,
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decoding::Greedy => f.write_str("greedy"),
            Decoding::Beam { width } => write!(f, "beam:{width}"),
        }
    }
}

impl std::str::FromStr for Decoding {
    type Err = String;

    /// `greedy` or `beam:<width>`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "greedy" {
            return Ok(Decoding::Greedy);
        }
        match s.strip_prefix("beam:").map(str::parse::<usize>) {
            Some(Ok(width)) if width >= 1 => Ok(Decoding::Beam { width }),
            _ => Err(format!("expected `greedy` or `beam:<width>`, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub version: u32,
    pub prompt: PromptSequence,
    pub decoding: Decoding,
    pub max_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCandidate {
    pub text: String,
    /// Sequence log-probability.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Best hypothesis first.
    pub candidates: Vec<WireCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    pub version: u32,
    pub segment: String,
    pub max_length: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub version: u32,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageRequest {
    pub version: u32,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

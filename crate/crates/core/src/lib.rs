//! Unsupervised generative adversarial cross-modal hashing.
//!
//! `xmash` learns binary hash functions for two paired feature modalities
//! (called *image* and *text* throughout) without any labels, then retrieves
//! across modalities by Hamming distance.
//!
//! Training is a two-player game between two copies of the same two-pathway
//! network ([`net::HashNet`]):
//!
//! - the *generator* scores unpaired candidates of the other modality with a
//!   softmax over relaxed-code distances and picks hard ones;
//! - the *discriminator* learns to rank a *manifold pair* (a neighbor drawn
//!   from the per-modality kNN [`graph::KnnGraph`], mapped to its paired
//!   counterpart) above the generated pick with a margin.
//!
//! The generator is updated by REINFORCE with the discriminator's softplus
//! relevance as reward. The trained discriminator is the hash function.
//!
//! | module | contents |
//! |--------|----------|
//! | [`dataio`] | feature/label/code files, synthetic data, db/query splits |
//! | [`graph`] | exact kNN correlation graph and manifold-positive sampling |
//! | [`net`] | the hashing network, its gradients, SGD and checkpoints |
//! | [`adversarial`] | the generator/discriminator game and training loop |
//! | [`index`] | bit packing and exhaustive Hamming search |
//! | [`eval`] | AP, MAP, PR curves and top-K precision |
//!
//! ```
//! use xmash::dataio::{generate_synthetic, Split, SyntheticConfig};
//! use xmash::index::{encode_corpus, search};
//! use xmash::net::{HashNet, NetDims};
//! use xmash::Modality;
//!
//! let data = generate_synthetic(&SyntheticConfig { num_pairs: 40, num_clusters: 4, ..Default::default() })?;
//! let split = Split::random(data.len(), 0.1, 0)?;
//! let net = HashNet::init(NetDims { dim_image: 64, dim_text: 32, dim_common: 16, bits: 8 }, 1)?;
//!
//! let db = encode_corpus(&net, &data.subset(&split.db)?.text(), Modality::Text)?;
//! let queries = encode_corpus(&net, &data.subset(&split.query)?.image(), Modality::Image)?;
//! let ranked = search(&db, queries.row(0), Some(5))?;
//! assert_eq!(ranked.len(), 5);
//! # Ok::<(), xmash::Error>(())
//! ```

pub mod adversarial;
pub mod dataio;
mod error;
pub mod eval;
pub mod graph;
pub mod index;
pub mod net;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "img" => Ok(Modality::Image),
            "text" | "txt" => Ok(Modality::Text),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}

/// A retrieval task: queries of one modality against a database of the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "image->text")]
    ImageToText,
    #[serde(rename = "text->image")]
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn query_modality(self) -> Modality {
        match self {
            Direction::ImageToText => Modality::Image,
            Direction::TextToImage => Modality::Text,
        }
    }

    pub fn target_modality(self) -> Modality {
        self.query_modality().other()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "image->text",
            Direction::TextToImage => "text->image",
        })
    }
}

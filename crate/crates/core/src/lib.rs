//! Regional internet-finance development analysis.
//!
//! The pipeline reads a region × business × month panel, turns it into
//! weighted relative coefficients, embeds the regions in two dimensions with
//! exact t-SNE (or PCA as a linear baseline), clusters the embedding with
//! k-means and ranks clusters into development tiers.

pub mod cli;
pub mod cluster;
pub mod error;
pub mod index;
pub mod linalg;
pub mod panel;
pub mod pca;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod synth;
pub mod tsne;

pub use error::{Error, Result};

/// A point in a two-dimensional embedding.
pub type Point2 = [f64; 2];

/// Region ids and 2-D coordinates, row aligned.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Embedding {
    pub region_ids: Vec<String>,
    pub coords: Vec<Point2>,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

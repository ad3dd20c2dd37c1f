//! The neighbour-sequence transformer encoder that turns a sequence of
//! retrieved neighbours into a single centroid vector.

mod encoder;
mod pe;
mod sequences;

pub use encoder::{EncoderLayer, MultiHeadAttention, TransformerEncoder, TransformerSpec};
pub use pe::sinusoidal_pe;
pub(crate) use sequences::centroids_from_stacked;
pub use sequences::{centroids_from_sequences, shift, Element, NeighbourSequences};

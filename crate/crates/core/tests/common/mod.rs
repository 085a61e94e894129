#![allow(dead_code)]

use put_core::io::Image;
use put_core::pvqvae::{DualCodebook, PVqVae, PvqvaeConfig};
use put_tensor::TensorError;

pub fn lift<T>(r: put_core::Result<T>) -> put_tensor::Result<T> {
    r.map_err(|e| TensorError::InvalidArgument(e.to_string()))
}

/// Untrained toy P-VQVAE whose first `e` rows are the features of `image`,
/// so the image tokenizes into one token per distinct patch.
pub fn seeded_pvqvae(image: &Image, seed: u64) -> PVqVae {
    let mut model = PVqVae::new(PvqvaeConfig::toy(), seed).unwrap();
    let f = model.encode(image).unwrap();
    let (cells, d) = (f.shape()[0], f.shape()[1]);
    let mut e = model.codebook().e().clone();
    e.data_mut()[..cells * d].copy_from_slice(f.data());
    let ep = model.codebook().e_prime().clone();
    *model.codebook_mut() = DualCodebook::from_tables(e, ep).unwrap();
    model
}

pub fn distinct(tokens: impl IntoIterator<Item = usize>) -> usize {
    tokens.into_iter().collect::<std::collections::BTreeSet<_>>().len()
}


use crate::codebook::{patchify, unpatchify};
use crate::error::Result;
use crate::numerics::Tensor;

pub const DEFAULT_PATCH: usize = 4;

/// Lossless stand-in for a VAE encoder: the image is cut into
/// `patch × patch` blocks and each block becomes one latent token.
pub fn encode_latent(image: &Tensor, patch: usize) -> Result<(Tensor, (usize, usize))> {
    patchify(image, patch)
}

pub fn decode_latent(latent: &Tensor, patch: usize, grid: (usize, usize)) -> Result<Tensor> {
    unpatchify(latent, patch, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rand_uniform, RngState};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngState::new(5);
        let img = rand_uniform(&[32, 32], 0.0, 1.0, &mut rng);
        let (z, grid) = encode_latent(&img, DEFAULT_PATCH).unwrap();
        assert_eq!(z.shape(), &[64, 16]);
        assert_eq!(decode_latent(&z, DEFAULT_PATCH, grid).unwrap(), img);
    }

    #[test]
    fn zero_image_zero_latent() {
        let (z, _) = encode_latent(&Tensor::zeros(&[32, 32]), DEFAULT_PATCH).unwrap();
        assert_eq!(z, Tensor::zeros(&[64, 16]));
        assert!(encode_latent(&Tensor::zeros(&[30, 32]), DEFAULT_PATCH).is_err());
    }
}

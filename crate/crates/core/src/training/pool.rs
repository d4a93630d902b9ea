use crate::tensor::{Element, Tensor};
use rand::Rng;

/// History of generated images shown to a discriminator. Once full, each
/// incoming image is, with probability ½, swapped for a stored one.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Element> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::new() }
    }

    pub fn with_images(capacity: usize, images: Vec<Tensor<T>>) -> Self {
        Self { capacity, images }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    /// Returns the image to use in place of `image`.
    pub fn query<R: Rng + ?Sized>(&mut self, image: Tensor<T>, rng: &mut R) -> Tensor<T> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if rng.random_bool(0.5) {
            let slot = rng.random_range(0..self.images.len());
            std::mem::replace(&mut self.images[slot], image)
        } else {
            image
        }
    }
}

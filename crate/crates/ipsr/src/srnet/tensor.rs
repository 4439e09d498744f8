//! Dense NCHW tensor. f64 throughout: the gradient checks compare
//! against central finite differences and need the headroom; weight
//! files still store f32.

use crate::imgcore::PlanarImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    /// Single-sample tensor from a planar image.
    pub fn from_image(img: &PlanarImage) -> Self {
        Tensor {
            n: 1,
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// First sample back to a planar image, clamped to [0,1].
    pub fn to_image(&self) -> PlanarImage {
        let plane = self.c * self.h * self.w;
        let data: Vec<f32> = self.data[..plane]
            .iter()
            .map(|&v| v.clamp(0.0, 1.0) as f32)
            .collect();
        PlanarImage::new(self.c, self.h, self.w, data).expect("valid dims")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let img = PlanarImage::new(3, 2, 2, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let t = Tensor::from_image(&img);
        assert_eq!((t.n, t.c, t.h, t.w), (1, 3, 2, 2));
        let back = t.to_image();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn indexing() {
        let t = Tensor::new(1, 2, 2, 3, (0..12).map(|i| i as f64).collect());
        assert_eq!(t.at(0, 1, 1, 2), 11.0);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
    }
}

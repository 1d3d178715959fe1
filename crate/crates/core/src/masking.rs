//! Foreground/background masks, their sizes, and masked image composites.

use std::path::Path;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pgm::GrayImage;

/// Evaluation threshold on the soft foreground mask.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Soft foreground mask `M+` over an `H x W` grid, living in a graph.
///
/// Entries are strictly inside `(0, 1)`. The background mask is `1 - M+`.
#[derive(Clone, Copy, Debug)]
pub struct Mask {
    plus: Var,
    height: usize,
    width: usize,
}

impl Mask {
    /// Wraps an existing `[h, w]` node after checking the open-interval invariant.
    pub fn new(g: &Graph, m_plus: Var) -> Result<Self> {
        let shape = g.shape(m_plus);
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "mask",
                msg: format!("expected [h, w], got {shape:?}"),
            });
        }
        if let Some(bad) = g.value(m_plus).data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain {
                op: "mask",
                msg: format!("entry {bad} not in (0, 1)"),
            });
        }
        Ok(Self {
            plus: m_plus,
            height: shape[0],
            width: shape[1],
        })
    }

    /// Sigmoid head over `[h, w]` logits.
    pub fn from_logits(g: &mut Graph, logits: Var) -> Result<Self> {
        let m = g.sigmoid(logits);
        Self::new(g, m)
    }

    pub fn plus(&self) -> Var {
        self.plus
    }

    pub fn minus(&self, g: &mut Graph) -> Result<Var> {
        complement(g, self.plus)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `|Omega|`, the number of pixels.
    pub fn omega(&self) -> usize {
        self.height * self.width
    }
}

/// `1 - m`, elementwise. Entries must lie in `[0, 1]`.
pub fn complement(g: &mut Graph, m: Var) -> Result<Var> {
    if let Some(bad) = g.value(m).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain {
            op: "complement",
            msg: format!("entry {bad} not in [0, 1]"),
        });
    }
    let neg = g.neg(m);
    Ok(g.add_scalar(neg, 1.0))
}

/// Soft size `sum_z m(z)` of an `[h, w]` mask.
pub fn mask_size(g: &mut Graph, m: Var) -> Result<Var> {
    let shape = g.shape(m);
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "mask_size",
            msg: format!("expected [h, w], got {shape:?}"),
        });
    }
    Ok(g.sum(m))
}

/// Pixel-space gating: `out(c, z) = x(c, z) * m(z)` for `x [c, h, w]`, `m [h, w]`.
pub fn compose(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    if g.shape(x).len() != 3 {
        return Err(Error::InvalidShape {
            op: "compose",
            msg: format!("expected image [c, h, w], got {:?}", g.shape(x)),
        });
    }
    g.gate(x, m)
}

/// Hard mask; `true` marks foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if height * width != pixels.len() || pixels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} mask cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, foreground: bool) -> Self {
        Self {
            height,
            width,
            pixels: vec![foreground; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|p| !p).collect(),
        }
    }

    /// 255 for foreground (white), 0 for background (black).
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    /// Any pixel at or above 128 counts as foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height,
            width: img.width,
            pixels: img.pixels.iter().map(|&p| p >= 128).collect(),
        }
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        GrayImage::read(path).map(|img| Self::from_gray(&img))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        self.to_gray().write(path)
    }
}

/// `pixel = m(z) >= threshold`; a value equal to the threshold is foreground.
pub fn binarize(m: &Tensor, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} not in (0, 1)"
        )));
    }
    let &[height, width] = m.shape() else {
        return Err(Error::InvalidShape {
            op: "binarize",
            msg: format!("expected [h, w], got {:?}", m.shape()),
        });
    };
    let pixels = m.data().iter().map(|&v| v >= threshold).collect();
    BinaryMask::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn complement_examples() {
        let mut g = Graph::new();
        let half = g.constant(Tensor::full(&[3, 3], 0.5));
        let c = complement(&mut g, half).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.5));

        let m = constant(&mut g, &[1, 2], &[0.9, 0.1]);
        let c = complement(&mut g, m).unwrap();
        let d = g.value(c).data();
        assert!((d[0] - 0.1).abs() < 1e-15 && (d[1] - 0.9).abs() < 1e-15);

        let bad = constant(&mut g, &[1, 2], &[1.5, 0.1]);
        assert!(complement(&mut g, bad).is_err());
    }

    #[test]
    fn complement_gradient_is_minus_one() {
        let mut g = Graph::new();
        let m = g.param(Tensor::full(&[2, 3], 0.3));
        let c = complement(&mut g, m).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(m).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn mask_size_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[4, 4]));
        let s = mask_size(&mut g, ones).unwrap();
        assert_eq!(g.scalar(s), 16.0);
        let zeros = g.constant(Tensor::zeros(&[4, 4]));
        let s = mask_size(&mut g, zeros).unwrap();
        assert_eq!(g.scalar(s), 0.0);
        let m = constant(&mut g, &[2, 2], &[0.25, 0.75, 0.5, 0.5]);
        let s = mask_size(&mut g, m).unwrap();
        assert_eq!(g.scalar(s), 2.0);
        let flat = g.constant(Tensor::ones(&[4]));
        assert!(mask_size(&mut g, flat).is_err());
    }

    #[test]
    fn mask_size_gradient_all_ones() {
        let mut g = Graph::new();
        let m = g.param(Tensor::full(&[3, 2], 0.4));
        let s = mask_size(&mut g, m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(m).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_examples() {
        let mut g = Graph::new();
        let x = constant(&mut g, &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = constant(&mut g, &[2, 2], &[0.5, 0.0, 1.0, 0.25]);
        let y = compose(&mut g, x, m).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.0, 3.0, 1.0]);

        let ones = g.constant(Tensor::ones(&[2, 2]));
        let y = compose(&mut g, x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let wrong = g.constant(Tensor::ones(&[2, 3]));
        assert!(compose(&mut g, x, wrong).is_err());
    }

    #[test]
    fn compose_differentiates_both_inputs() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.param(Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap());
        let y = compose(&mut g, x, m).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.5, 0.25, 0.5, 0.25]);
        assert_eq!(g.grad(m), &[4.0, 6.0]);
    }

    #[test]
    fn binarize_examples() {
        let m = Tensor::full(&[2, 2], 0.7);
        assert_eq!(binarize(&m, 0.5).unwrap().foreground_count(), 4);
        let m = Tensor::full(&[2, 2], 0.3);
        assert_eq!(binarize(&m, 0.5).unwrap().foreground_count(), 0);
        let m = Tensor::full(&[2, 2], 0.5);
        assert_eq!(binarize(&m, 0.5).unwrap().foreground_count(), 4);
        assert!(binarize(&m, 0.0).is_err());
        assert!(binarize(&m, 1.0).is_err());
    }

    #[test]
    fn binary_mask_pgm_convention() {
        let mask = BinaryMask::new(1, 3, vec![true, false, true]).unwrap();
        assert_eq!(mask.to_gray().pixels, vec![255, 0, 255]);
        assert_eq!(BinaryMask::from_gray(&mask.to_gray()), mask);
    }

    #[test]
    fn mask_rejects_closed_interval_values() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap());
        assert!(Mask::new(&g, m).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(-30.0f64..30.0, h * w))
        })
    }

    proptest! {
        #[test]
        fn complement_involution_and_size_partition((h, w, logits) in mask_strategy()) {
            let mut g = Graph::new();
            let z = g.constant(Tensor::new(vec![h, w], logits).unwrap());
            let mask = Mask::from_logits(&mut g, z).unwrap();
            let minus = mask.minus(&mut g).unwrap();
            let back = complement(&mut g, minus).unwrap();
            prop_assert_eq!(g.value(back), g.value(mask.plus()));

            let sp = mask_size(&mut g, mask.plus()).unwrap();
            let sm = mask_size(&mut g, minus).unwrap();
            let omega = (h * w) as f64;
            prop_assert!((g.scalar(sp) + g.scalar(sm) - omega).abs() <= 1e-9 * omega);
            prop_assert!(g.value(minus).data().iter().zip(g.value(mask.plus()).data())
                .all(|(a, b)| a + b == 1.0));
        }

        #[test]
        fn binarized_mask_and_complement_partition((h, w, mut vals) in mask_strategy(), ties in prop::collection::vec(any::<bool>(), 64)) {
            for (v, t) in vals.iter_mut().zip(&ties) {
                *v = if *t { 0.5 } else { 1.0 / (1.0 + (-*v).exp()) };
            }
            let m = Tensor::new(vec![h, w], vals.clone()).unwrap();
            let c = Tensor::new(vec![h, w], vals.iter().map(|v| 1.0 - v).collect()).unwrap();
            let fg = binarize(&m, 0.5).unwrap();
            let bg = binarize(&c, 0.5).unwrap();
            for ((a, b), v) in fg.pixels().iter().zip(bg.pixels()).zip(&vals) {
                if *v == 0.5 {
                    prop_assert!(*a && *b);
                } else {
                    prop_assert!(a ^ b);
                }
            }
        }

        #[test]
        fn compose_identity_and_zero((h, w, vals) in mask_strategy(), c in 1usize..3) {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..c).flat_map(|_| vals.iter().copied()).collect();
            let x = g.constant(Tensor::new(vec![c, h, w], data).unwrap());
            let ones = g.constant(Tensor::ones(&[h, w]));
            let zeros = g.constant(Tensor::zeros(&[h, w]));
            let same = compose(&mut g, x, ones).unwrap();
            let none = compose(&mut g, x, zeros).unwrap();
            prop_assert_eq!(g.value(same), g.value(x));
            prop_assert!(g.value(none).data().iter().all(|&v| v == 0.0));
        }
    }
}

//! Geometric augmentation applied identically to every modality and to
//! the label: per-axis flips and in-plane quarter turns.

use alloc::vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip: [bool; 3],
    /// Quarter turns in the `(H, W)` plane; only nonzero when `H == W`.
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Draws flips with probability 1/2 per axis and a uniform quarter turn
    /// when the plane is square.
    pub fn sample(rng: &mut SeededRng, dims: [usize; 3]) -> Self {
        let flip = [rng.bernoulli(0.5), rng.bernoulli(0.5), rng.bernoulli(0.5)];
        let quarter_turns = if dims[0] == dims[1] { rng.below(4) as u8 } else { 0 };
        Augmentation { flip, quarter_turns }
    }

    /// Applies the transform to a `[C, H, W, T]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 {
            return Err(Error::invalid(alloc::format!("augmentation expects [C,H,W,T], got {:?}", x.shape())));
        }
        let (c, h, w, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if self.quarter_turns % 4 != 0 && h != w {
            return Err(Error::invalid("quarter turns need a square (H, W) plane"));
        }
        let mut out = vec![0.0; x.numel()];
        let src = x.data();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    // source coordinate of output (i, j): undo rotation, then flips
                    let (mut si, mut sj) = (i, j);
                    for _ in 0..self.quarter_turns % 4 {
                        // output(i, j) = input(j, h - 1 - i) for one counter-clockwise turn
                        let (a, b) = (sj, h - 1 - si);
                        si = a;
                        sj = b;
                    }
                    if self.flip[0] {
                        si = h - 1 - si;
                    }
                    if self.flip[1] {
                        sj = w - 1 - sj;
                    }
                    for k in 0..t {
                        let sk = if self.flip[2] { t - 1 - k } else { k };
                        out[((ch * h + i) * w + j) * t + k] = src[((ch * h + si) * w + sj) * t + sk];
                    }
                }
            }
        }
        Tensor::from_vec(x.shape(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize, t: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w, t], (0..c * h * w * t).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn identity_and_involutions() {
        let x = ramp(2, 4, 4, 3);
        assert_eq!(Augmentation::default().apply(&x).unwrap(), x);
        let f = Augmentation { flip: [true, true, true], quarter_turns: 0 };
        assert_eq!(f.apply(&f.apply(&x).unwrap()).unwrap(), x);
        let r = Augmentation { flip: [false; 3], quarter_turns: 1 };
        let mut y = x.clone();
        for _ in 0..4 {
            y = r.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(r.apply(&x).unwrap(), x);
    }

    #[test]
    fn preserves_multiset_per_channel() {
        let x = ramp(2, 4, 4, 2);
        let a = Augmentation { flip: [true, false, true], quarter_turns: 3 };
        let y = a.apply(&x).unwrap();
        for ch in 0..2 {
            let mut s: alloc::vec::Vec<f64> = y.data()[ch * 32..(ch + 1) * 32].to_vec();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, x.data()[ch * 32..(ch + 1) * 32].to_vec());
        }
    }

    #[test]
    fn non_square_plane_never_rotated() {
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            assert_eq!(Augmentation::sample(&mut rng, [8, 4, 4]).quarter_turns, 0);
        }
        let r = Augmentation { flip: [false; 3], quarter_turns: 1 };
        assert!(r.apply(&ramp(1, 4, 2, 1)).is_err());
    }
}

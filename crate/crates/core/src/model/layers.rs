use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ring_len, Graph, PadFill, Tensor, Var};

/// Padding used by a layer when no user ring is supplied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseFill {
    #[default]
    Zero,
    Constant(f64),
    Reflect,
}

impl From<BaseFill> for PadFill {
    fn from(f: BaseFill) -> Self {
        match f {
            BaseFill::Zero => PadFill::Zero,
            BaseFill::Constant(c) => PadFill::Constant(c),
            BaseFill::Reflect => PadFill::Reflect,
        }
    }
}

/// Where a layer's border ring comes from.
#[derive(Clone, Copy, Debug)]
pub enum PaddingMode<'a> {
    Zero,
    Constant(f64),
    Reflect,
    /// Ring values `[C, ring_len]`, per channel in row-major scan order of the border cells.
    User(&'a Tensor),
}

#[derive(Clone, Copy, Debug)]
pub struct PaddingSource<'a> {
    pub mode: PaddingMode<'a>,
    pub width: usize,
}

impl<'a> PaddingSource<'a> {
    pub fn zero(width: usize) -> Self {
        PaddingSource {
            mode: PaddingMode::Zero,
            width,
        }
    }

    pub fn user(ring: &'a Tensor, width: usize) -> Self {
        PaddingSource {
            mode: PaddingMode::User(ring),
            width,
        }
    }
}

/// Builds the padded map `[C, H+2p, W+2p]` for a single `[C, H, W]` input.
pub fn assemble_padded_input(x: &Tensor, src: PaddingSource<'_>) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C, H, W], got {s:?}")));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.reshape(&[1, s[0], s[1], s[2]])?);
    let fill = match src.mode {
        PaddingMode::Zero => PadFill::Zero,
        PaddingMode::Constant(c) => PadFill::Constant(c),
        PaddingMode::Reflect => PadFill::Reflect,
        PaddingMode::User(ring) => {
            let expect = s[0] * ring_len(s[1], s[2], src.width);
            if ring.numel() != expect {
                return Err(Error::Shape(format!(
                    "ring has {} values, layer needs {expect}",
                    ring.numel()
                )));
            }
            let r = ring.reshape(&[s[0], expect / s[0].max(1)])?;
            PadFill::User(g.constant(r))
        }
    };
    let out = g.pad2d(xv, src.width, fill)?;
    let p = src.width;
    g.value(out).reshape(&[s[0], s[1] + 2 * p, s[2] + 2 * p])
}

/// Convolution whose border ring is supplied at call time.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedConv2d {
    /// `[Cout, Cin, k, k]`
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub fill: BaseFill,
    /// `(Cin, H, W)` the layer accepts.
    pub declared_input: (usize, usize, usize),
}

impl PaddedConv2d {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_hw(&self) -> (usize, usize) {
        let (_, h, w) = self.declared_input;
        conv_out_hw(h, w, self.kernel(), self.stride, self.padding)
    }

    /// Ring elements a user padding must provide for this layer.
    pub fn ring_len(&self) -> usize {
        let (c, h, w) = self.declared_input;
        c * ring_len(h, w, self.padding)
    }

    /// Pads and convolves `x: [N, Cin, H, W]` on the tape.
    ///
    /// `ring` (shape `[Cin, ring_len]`) replaces the layer's base fill when present.
    pub fn apply(
        &self,
        g: &mut Graph,
        x: Var,
        weight: Var,
        bias: Var,
        ring: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(x);
        let (c, h, w) = self.declared_input;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Dimension(format!(
                "layer declared for ({c}, {h}, {w}), got {s:?}"
            )));
        }
        let fill = match ring {
            Some(r) => PadFill::User(r),
            None => self.fill.into(),
        };
        let padded = g.pad2d(x, self.padding, fill)?;
        g.conv2d(padded, weight, bias, self.stride)
    }
}

pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, p: usize) -> (usize, usize) {
    ((h + 2 * p - k) / stride + 1, (w + 2 * p - k) / stride + 1)
}

/// Standalone forward of one layer on `x: [N, Cin, H, W]`.
pub fn conv2d_forward(layer: &PaddedConv2d, x: &Tensor, src: PaddingSource<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(layer.weight.clone());
    let b = g.constant(layer.bias.clone());
    let (c, h, wd) = layer.declared_input;
    let ring = match src.mode {
        PaddingMode::User(r) => {
            let n = c * ring_len(h, wd, src.width);
            if r.numel() != n {
                return Err(Error::Shape(format!(
                    "ring has {} values, layer needs {n}",
                    r.numel()
                )));
            }
            Some(g.constant(r.reshape(&[c, n / c.max(1)])?))
        }
        _ => None,
    };
    let mut l = layer.clone();
    l.padding = src.width;
    l.fill = match src.mode {
        PaddingMode::Zero | PaddingMode::User(_) => BaseFill::Zero,
        PaddingMode::Constant(v) => BaseFill::Constant(v),
        PaddingMode::Reflect => BaseFill::Reflect,
    };
    let y = l.apply(&mut g, xv, w, b, ring)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check;

    fn ones_layer(p: usize) -> PaddedConv2d {
        PaddedConv2d {
            weight: Tensor::full(&[1, 1, 3, 3], 1.0),
            bias: Tensor::zeros(&[1]),
            stride: 1,
            padding: p,
            fill: BaseFill::Zero,
            declared_input: (1, 3, 3),
        }
    }

    #[test]
    fn zero_width_is_identity() {
        let x = Tensor::new(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = assemble_padded_input(&x, PaddingSource::zero(0)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn constant_fill_around_single_pixel() {
        let x = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        let src = PaddingSource {
            mode: PaddingMode::Constant(2.0),
            width: 1,
        };
        let y = assemble_padded_input(&x, src).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), &[2.0, 2.0, 2.0, 2.0, 5.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn user_ring_corner_and_center() {
        // Corner window sees 4 interior ones and 5 ring cells; the center sees only interior.
        for c in [0.0, 1.0, -0.5, 3.25] {
            let ring = Tensor::full(&[1, 16], c);
            let x = Tensor::full(&[1, 1, 3, 3], 1.0);
            let y = conv2d_forward(&ones_layer(1), &x, PaddingSource::user(&ring, 1)).unwrap();
            assert_eq!(y.data()[0], 4.0 + 5.0 * c);
            assert_eq!(y.data()[4], 9.0);
        }
    }

    #[test]
    fn ring_size_mismatch() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let ring = Tensor::zeros(&[1, 15]);
        assert!(matches!(
            assemble_padded_input(&x, PaddingSource::user(&ring, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut l = ones_layer(1);
        l.weight = Tensor::zeros(&[1, 1, 3, 3]);
        l.bias = Tensor::new(&[1], vec![0.75]).unwrap();
        let x = Tensor::full(&[1, 1, 3, 3], 4.0);
        let y = conv2d_forward(&l, &x, PaddingSource::zero(1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn zero_ring_matches_zero_padding_bitwise() {
        let l = PaddedConv2d {
            weight: Tensor::new(
                &[2, 1, 3, 3],
                (0..18).map(|v| (v as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
            bias: Tensor::new(&[2], vec![0.1, -0.2]).unwrap(),
            stride: 2,
            padding: 1,
            fill: BaseFill::Zero,
            declared_input: (1, 5, 5),
        };
        let x = Tensor::new(&[1, 1, 5, 5], (0..25).map(|v| (v as f64).cos()).collect()).unwrap();
        let ring = Tensor::zeros(&[1, l.ring_len()]);
        let a = conv2d_forward(&l, &x, PaddingSource::zero(1)).unwrap();
        let b = conv2d_forward(&l, &x, PaddingSource::user(&ring, 1)).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn ring_gradient_matches_finite_differences() {
        let l = PaddedConv2d {
            weight: Tensor::new(
                &[3, 2, 3, 3],
                (0..54).map(|v| (v as f64 * 0.7).sin()).collect(),
            )
            .unwrap(),
            bias: Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap(),
            stride: 2,
            padding: 1,
            fill: BaseFill::Zero,
            declared_input: (2, 4, 5),
        };
        let x = Tensor::new(
            &[2, 2, 4, 5],
            (0..80).map(|v| (v as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
        let ring = Tensor::new(
            &[2, ring_len(4, 5, 1)],
            (0..2 * ring_len(4, 5, 1))
                .map(|v| (v as f64 * 1.3).sin())
                .collect(),
        )
        .unwrap();
        let r = check(&[ring], 1e-5, |g, v| {
            let xv = g.constant(x.clone());
            let w = g.constant(l.weight.clone());
            let b = g.constant(l.bias.clone());
            let y = l.apply(g, xv, w, b, Some(v[0]))?;
            let y = g.mul(y, y)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{:?}", r.rel_errors);
        // k=3, s=2 windows over the 6 padded rows stop at row 4: the bottom ring row gets no gradient.
        let grad = &r.analytic[0];
        let cells = crate::tensor::ring_cells(4, 5, 1);
        for (idx, &(i, _)) in cells.iter().enumerate() {
            if i == 5 {
                assert_eq!(grad.data()[idx], 0.0);
            }
        }
    }
}

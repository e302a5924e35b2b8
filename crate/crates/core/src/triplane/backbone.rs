//! Convolutional image backbone: a stem plus four residual blocks
//! producing a three-level feature pyramid at strides 1, 2, 4.

use crate::autodiff::nn::{register_conv, BoundParams, Conv2d, ParamStore};
use crate::autodiff::{Scalar, Var};
use rand::Rng;

pub struct Backbone<F: Scalar> {
    stem: Conv2d<F>,
    res: Vec<(Conv2d<F>, Conv2d<F>)>,
    down1: Conv2d<F>,
    down2: Conv2d<F>,
}

pub fn register_backbone<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
) {
    register_conv(store, rng, &format!("{prefix}.stem"), channels, 3, 3);
    for i in 0..4 {
        register_conv(store, rng, &format!("{prefix}.res{i}.a"), channels, channels, 3);
        register_conv(store, rng, &format!("{prefix}.res{i}.b"), channels, channels, 3);
    }
    register_conv(store, rng, &format!("{prefix}.down1"), channels, channels, 3);
    register_conv(store, rng, &format!("{prefix}.down2"), channels, channels, 3);
}

impl<F: Scalar> Backbone<F> {
    pub fn bind(params: &BoundParams<F>, prefix: &str) -> Self {
        let conv = |name: &str, stride: usize| Conv2d::bind(params, name, stride, 1);
        Backbone {
            stem: conv(&format!("{prefix}.stem"), 1),
            res: (0..4)
                .map(|i| {
                    (
                        conv(&format!("{prefix}.res{i}.a"), 1),
                        conv(&format!("{prefix}.res{i}.b"), 1),
                    )
                })
                .collect(),
            down1: conv(&format!("{prefix}.down1"), 2),
            down2: conv(&format!("{prefix}.down2"), 2),
        }
    }

    fn res_block(&self, i: usize, x: &Var<F>) -> Var<F> {
        let (a, b) = &self.res[i];
        x.add(&b.apply(&a.apply(x).relu())).relu()
    }

    /// Feature pyramid at strides {1, 2, 4}; input `[3, H, W]` with H and W
    /// divisible by 4 (the caller pads otherwise).
    pub fn apply(&self, image: &Var<F>) -> Vec<Var<F>> {
        let shape = image.shape();
        assert_eq!(shape.len(), 3, "backbone expects [3,H,W]");
        assert_eq!(shape[0], 3, "backbone expects RGB input");
        assert!(
            shape[1] % 4 == 0 && shape[2] % 4 == 0,
            "backbone input must be divisible by the total stride"
        );
        let x = self.stem.apply(image).relu();
        let x = self.res_block(0, &x);
        let l0 = self.res_block(1, &x);
        let x = self.down1.apply(&l0).relu();
        let l1 = self.res_block(2, &x);
        let x = self.down2.apply(&l1).relu();
        let l2 = self.res_block(3, &x);
        vec![l0, l1, l2]
    }
}

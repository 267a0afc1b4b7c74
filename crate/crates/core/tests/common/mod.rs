#![allow(dead_code)]

use diffcert::model::Layer;
use diffcert::{InputBox, Network, NetworkPair};
use ndarray::{arr1, arr2};

/// Two-input, two-hidden-layer pair used as the worked example throughout.
pub fn example_pair() -> NetworkPair {
    let f = Network::new(
        2,
        vec![
            Layer::new(arr2(&[[1.9, 1.1], [-1.9, 1.0]]), arr1(&[0.0, 0.0])),
            Layer::new(arr2(&[[2.1, 0.9], [-1.0, 1.1]]), arr1(&[0.0, 0.0])),
            Layer::new(arr2(&[[1.0], [-1.0]]), arr1(&[0.0])),
        ],
    )
    .unwrap();
    let g = Network::new(
        2,
        vec![
            Layer::new(arr2(&[[2.0, 1.0], [-2.0, 1.0]]), arr1(&[0.0, 0.0])),
            Layer::new(arr2(&[[2.0, 1.0], [-1.0, 1.0]]), arr1(&[0.0, 0.0])),
            Layer::new(arr2(&[[1.0], [-1.0]]), arr1(&[0.0])),
        ],
    )
    .unwrap();
    NetworkPair::new(f, g).unwrap()
}

pub fn example_box() -> InputBox {
    InputBox::uniform(2, -2.0, 2.0).unwrap()
}

/// Max of `|f'(x) - f(x)|` over a `steps x steps` grid of the box.
pub fn grid_max_gap(pair: &NetworkPair, b: &InputBox, steps: usize) -> f64 {
    let mut best = 0.0f64;
    let mut x = vec![0.0; b.dims()];
    assert_eq!(b.dims(), 2);
    for i in 0..steps {
        for j in 0..steps {
            x[0] = b.lo()[0] + b.width(0) * i as f64 / (steps - 1) as f64;
            x[1] = b.lo()[1] + b.width(1) * j as f64 / (steps - 1) as f64;
            let a = pair.original().evaluate(&x).unwrap();
            let c = pair.variant().evaluate(&x).unwrap();
            for (p, q) in a.iter().zip(&c) {
                best = best.max((q - p).abs());
            }
        }
    }
    best
}

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Graph, Mat, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 1/fan_in)`.
    Lecun,
    Normal(f64),
    Zeros,
}

impl Init {
    fn sample<T: Scalar, R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
        match self {
            Init::Lecun => Mat::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng),
            Init::Normal(std) => Mat::randn(rows, cols, std, rng),
            Init::Zeros => Mat::zeros(rows, cols),
        }
    }
}

pub fn add_param<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: impl Into<String>,
    rows: usize,
    cols: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    store.add(name, init.sample(rows, cols, rng))
}

/// `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = add_param(store, format!("{name}.w"), d_in, d_out, init, rng);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Linear layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Lecun };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    init,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.silu(x);
            }
            x = l.forward(g, x);
        }
        x
    }
}

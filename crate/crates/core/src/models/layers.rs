use heteroseg_autograd::{he_normal, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::Scalar;

/// `relu(conv3x3(relu(conv3x3(x, stride))) + skip(x))`, where the skip is a
/// strided 1x1 projection whenever the shape changes.
#[derive(Debug, Clone)]
pub(crate) struct ResStage {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    skip: Option<(ParamId, ParamId)>,
    stride: usize,
}

impl ResStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(format!("{name}.conv1.weight"), he_normal(&[cout, cin, 3, 3], cin * 9, 1.0, rng));
        let b1 = store.add(format!("{name}.conv1.bias"), Tensor::zeros(&[cout]));
        // Second conv starts small so each stage begins close to its skip path.
        let w2 = store.add(format!("{name}.conv2.weight"), he_normal(&[cout, cout, 3, 3], cout * 9, 0.5, rng));
        let b2 = store.add(format!("{name}.conv2.bias"), Tensor::zeros(&[cout]));
        let skip = (stride != 1 || cin != cout).then(|| {
            (
                store.add(format!("{name}.skip.weight"), he_normal(&[cout, cin, 1, 1], cin, 1.0, rng)),
                store.add(format!("{name}.skip.bias"), Tensor::zeros(&[cout])),
            )
        });
        Self { w1, b1, w2, b2, skip, stride }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = tape.conv2d(x, p.var(self.w1), Some(p.var(self.b1)), self.stride, 1);
        let h = tape.relu(h);
        let h = tape.conv2d(h, p.var(self.w2), Some(p.var(self.b2)), 1, 1);
        let s = match self.skip {
            Some((w, b)) => tape.conv2d(x, p.var(w), Some(p.var(b)), self.stride, 0),
            None => x,
        };
        let y = tape.add(h, s);
        tape.relu(y)
    }
}

/// Dense layer over the last axis.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(&[fin, fout], fin, gain, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    pub fn with_bias<T: Scalar>(self, store: &mut ParamStore<T>, value: T) -> Self {
        store.get_mut(self.b).data_mut().iter_mut().for_each(|v| *v = value);
        self
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

/// Chebyshev spectral graph convolution: `sum_k T_k(L) X W_k + b` with
/// `T_0 = I`, `T_1 = L`, `T_k = 2 L T_{k-1} - T_{k-2}`.
#[derive(Debug, Clone)]
pub(crate) struct ChebConv {
    weights: Vec<ParamId>,
    b: ParamId,
}

impl ChebConv {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        order: usize,
        rng: &mut R,
    ) -> Self {
        let weights = (0..order)
            .map(|k| store.add(format!("{name}.weight{k}"), he_normal(&[fin, fout], fin * order, 1.0, rng)))
            .collect();
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { weights, b }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, op: &std::sync::Arc<Vec<T>>) -> Var {
        let mut out = tape.linear(x, p.var(self.weights[0]), Some(p.var(self.b)));
        let mut prev2 = x;
        let mut prev1 = x;
        for (k, &w) in self.weights.iter().enumerate().skip(1) {
            let lx = tape.graph_prop(prev1, op);
            let tk = if k == 1 {
                lx
            } else {
                let twice = tape.scale(lx, T::lit(2.0));
                tape.sub(twice, prev2)
            };
            let term = tape.linear(tk, p.var(w), None);
            out = tape.add(out, term);
            prev2 = prev1;
            prev1 = tk;
        }
        out
    }
}

/// Stacks `[H, W]` images into an `[N, 1, H, W]` tensor.
pub(crate) fn image_batch<T: Scalar>(images: &[&crate::Grid<T>]) -> Tensor<T> {
    let (h, w) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data).expect("image batch shape")
}

//! Desk-scale feature extractors.
//!
//! `tiny-cnn` is four stride-2 conv blocks; `mini-resnet` adds two residual
//! blocks between downsampling stages. Both end in global average pooling,
//! so the embedding dimension equals the last block's channel count and the
//! nets accept any input large enough to survive the downsampling.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1};
use rand_chacha::ChaCha8Rng;

use super::nn::{
    dims4, global_avg_pool, global_avg_pool_backward, relu4, relu4_backward, Conv2d, Linear,
};
use super::{Backbone, BackboneActs};

fn add_map_grad(d: &mut Array4<f64>, map_grads: Option<&[Array4<f64>]>, idx: usize) {
    if let Some(grads) = map_grads {
        if let Some(g) = grads.get(idx) {
            *d += g;
        }
    }
}

/// Four conv blocks, channels 1 -> 8 -> 16 -> 32 -> `feature_dim`.
#[derive(Clone)]
pub struct TinyCnn {
    convs: Vec<Conv2d>,
    feature_dim: usize,
}

impl TinyCnn {
    pub fn new(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = [1, 8, 16, 32, feature_dim];
        let convs = (0..4)
            .map(|i| Conv2d::new(widths[i], widths[i + 1], 3, 2, 1, rng))
            .collect();
        Self { convs, feature_dim }
    }
}

impl Backbone for TinyCnn {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn param_count(&self) -> usize {
        self.convs.iter().map(Conv2d::param_count).sum()
    }

    fn forward(&self, x: &Array4<f64>) -> BackboneActs {
        let mut maps = Vec::with_capacity(4);
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = relu4(&conv.forward(&cur));
            maps.push(cur.clone());
        }
        let embeddings = global_avg_pool(&cur);
        BackboneActs {
            embeddings,
            maps,
            aux: Vec::new(),
        }
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        acts: &BackboneActs,
        grad_embeddings: &Array2<f64>,
        map_grads: Option<&[Array4<f64>]>,
    ) -> Array1<f64> {
        let last = &acts.maps[3];
        let (_, _, h, w) = dims4(last);
        let mut d_map = global_avg_pool_backward(grad_embeddings, h, w);

        // Walk blocks in reverse, collecting (dW, db) per conv.
        let mut grads_rev = Vec::with_capacity(4);
        for i in (0..4).rev() {
            add_map_grad(&mut d_map, map_grads, i);
            let d_pre = relu4_backward(&acts.maps[i], &d_map);
            let input = if i == 0 { x } else { &acts.maps[i - 1] };
            let (dw, db, dx) = self.convs[i].backward(input, &d_pre);
            grads_rev.push((dw, db));
            d_map = dx;
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in grads_rev.into_iter().rev() {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Array1::from_vec(flat)
    }

    fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for conv in &self.convs {
            conv.push_params(&mut out);
        }
        Array1::from_vec(out)
    }

    fn set_flat_params(&mut self, params: ArrayView1<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let slice = params
            .as_slice()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| params.to_vec());
        let mut it = slice.iter();
        for conv in &mut self.convs {
            conv.load_params(&mut it);
        }
    }

    fn named_params(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), conv.weight.clone().into_dyn()));
            out.push((format!("conv{i}.bias"), conv.bias.clone().into_dyn()));
        }
        out
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Stem + two residual blocks with downsampling stages in between.
#[derive(Clone)]
pub struct MiniResNet {
    stem: Conv2d, // 1 -> 16, stride 2
    block1: (Conv2d, Conv2d),
    down: Conv2d, // 16 -> 32, stride 2
    block2: (Conv2d, Conv2d),
    last: Conv2d, // 32 -> feature_dim, stride 2
    feature_dim: usize,
}

impl MiniResNet {
    pub fn new(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            stem: Conv2d::new(1, 16, 3, 2, 1, rng),
            block1: (
                Conv2d::new(16, 16, 3, 1, 1, rng),
                Conv2d::new(16, 16, 3, 1, 1, rng),
            ),
            down: Conv2d::new(16, 32, 3, 2, 1, rng),
            block2: (
                Conv2d::new(32, 32, 3, 1, 1, rng),
                Conv2d::new(32, 32, 3, 1, 1, rng),
            ),
            last: Conv2d::new(32, feature_dim, 3, 2, 1, rng),
            feature_dim,
        }
    }

    fn conv_slots(&self) -> [&Conv2d; 6] {
        [
            &self.stem,
            &self.block1.0,
            &self.block1.1,
            &self.down,
            &self.block2.0,
            &self.block2.1,
        ]
    }
}

impl Backbone for MiniResNet {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn param_count(&self) -> usize {
        self.conv_slots()
            .iter()
            .map(|c| c.param_count())
            .sum::<usize>()
            + self.last.param_count()
    }

    fn forward(&self, x: &Array4<f64>) -> BackboneActs {
        // maps: [stem, block1, down, block2, last]; aux: mid activations.
        let stem = relu4(&self.stem.forward(x));
        let mid1 = relu4(&self.block1.0.forward(&stem));
        let b1 = relu4(&(self.block1.1.forward(&mid1) + &stem));
        let down = relu4(&self.down.forward(&b1));
        let mid2 = relu4(&self.block2.0.forward(&down));
        let b2 = relu4(&(self.block2.1.forward(&mid2) + &down));
        let last = relu4(&self.last.forward(&b2));
        let embeddings = global_avg_pool(&last);
        BackboneActs {
            embeddings,
            maps: vec![stem, b1, down, b2, last],
            aux: vec![mid1, mid2],
        }
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        acts: &BackboneActs,
        grad_embeddings: &Array2<f64>,
        map_grads: Option<&[Array4<f64>]>,
    ) -> Array1<f64> {
        let [stem, b1, down, b2, last] = [
            &acts.maps[0],
            &acts.maps[1],
            &acts.maps[2],
            &acts.maps[3],
            &acts.maps[4],
        ];
        let (mid1, mid2) = (&acts.aux[0], &acts.aux[1]);

        let (_, _, h, w) = dims4(last);
        let mut d_last = global_avg_pool_backward(grad_embeddings, h, w);
        add_map_grad(&mut d_last, map_grads, 4);
        let d_pre_last = relu4_backward(last, &d_last);
        let (dw_last, db_last, mut d_b2) = self.last.backward(b2, &d_pre_last);

        add_map_grad(&mut d_b2, map_grads, 3);
        // Residual block 2: d flows through both conv path and skip.
        let d_sum2 = relu4_backward(b2, &d_b2);
        let (dw_b2b, db_b2b, d_mid2) = self.block2.1.backward(mid2, &d_sum2);
        let d_pre_mid2 = relu4_backward(mid2, &d_mid2);
        let (dw_b2a, db_b2a, d_down_path) = self.block2.0.backward(down, &d_pre_mid2);
        let mut d_down = d_down_path + &d_sum2;

        add_map_grad(&mut d_down, map_grads, 2);
        let d_pre_down = relu4_backward(down, &d_down);
        let (dw_down, db_down, mut d_b1) = self.down.backward(b1, &d_pre_down);

        add_map_grad(&mut d_b1, map_grads, 1);
        let d_sum1 = relu4_backward(b1, &d_b1);
        let (dw_b1b, db_b1b, d_mid1) = self.block1.1.backward(mid1, &d_sum1);
        let d_pre_mid1 = relu4_backward(mid1, &d_mid1);
        let (dw_b1a, db_b1a, d_stem_path) = self.block1.0.backward(stem, &d_pre_mid1);
        let mut d_stem = d_stem_path + &d_sum1;

        add_map_grad(&mut d_stem, map_grads, 0);
        let d_pre_stem = relu4_backward(stem, &d_stem);
        let (dw_stem, db_stem, _) = self.stem.backward(x, &d_pre_stem);

        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in [
            (dw_stem, db_stem),
            (dw_b1a, db_b1a),
            (dw_b1b, db_b1b),
            (dw_down, db_down),
            (dw_b2a, db_b2a),
            (dw_b2b, db_b2b),
            (dw_last, db_last),
        ] {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Array1::from_vec(flat)
    }

    fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for conv in self.conv_slots() {
            conv.push_params(&mut out);
        }
        self.last.push_params(&mut out);
        Array1::from_vec(out)
    }

    fn set_flat_params(&mut self, params: ArrayView1<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let slice = params.to_vec();
        let mut it = slice.iter();
        self.stem.load_params(&mut it);
        self.block1.0.load_params(&mut it);
        self.block1.1.load_params(&mut it);
        self.down.load_params(&mut it);
        self.block2.0.load_params(&mut it);
        self.block2.1.load_params(&mut it);
        self.last.load_params(&mut it);
    }

    fn named_params(&self) -> Vec<(String, ArrayD<f64>)> {
        let names = ["stem", "block1a", "block1b", "down", "block2a", "block2b"];
        let mut out = Vec::new();
        for (name, conv) in names.iter().zip(self.conv_slots()) {
            out.push((format!("{name}.weight"), conv.weight.clone().into_dyn()));
            out.push((format!("{name}.bias"), conv.bias.clone().into_dyn()));
        }
        out.push(("last.weight".into(), self.last.weight.clone().into_dyn()));
        out.push(("last.bias".into(), self.last.bias.clone().into_dyn()));
        out
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

/// Flattens the input and applies one linear map. Not part of the conv-net
/// registry; used where a cheap, analytically tractable backbone is enough
/// (unit tests, closed-form oracles).
#[derive(Clone)]
pub struct FlatLinear {
    linear: Linear,
    in_shape: (usize, usize),
}

impl FlatLinear {
    pub fn new(n_mels: usize, n_frames: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(n_mels * n_frames, feature_dim, rng),
            in_shape: (n_mels, n_frames),
        }
    }

    /// Direct access for tests that pin exact weights.
    pub fn linear_mut(&mut self) -> &mut Linear {
        &mut self.linear
    }

    fn flatten(&self, x: &Array4<f64>) -> Array2<f64> {
        let (b, c, h, w) = dims4(x);
        assert_eq!((h, w), self.in_shape, "input shape");
        x.view()
            .into_shape_with_order((b, c * h * w))
            .expect("standard layout input")
            .to_owned()
    }
}

impl Backbone for FlatLinear {
    fn feature_dim(&self) -> usize {
        self.linear.out_dim()
    }

    fn param_count(&self) -> usize {
        self.linear.param_count()
    }

    fn forward(&self, x: &Array4<f64>) -> BackboneActs {
        BackboneActs {
            embeddings: self.linear.forward(&self.flatten(x)),
            maps: Vec::new(),
            aux: Vec::new(),
        }
    }

    fn backward(
        &self,
        x: &Array4<f64>,
        _acts: &BackboneActs,
        grad_embeddings: &Array2<f64>,
        _map_grads: Option<&[Array4<f64>]>,
    ) -> Array1<f64> {
        let (dw, db, _) = self.linear.backward(&self.flatten(x), grad_embeddings);
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(dw.iter());
        flat.extend(db.iter());
        Array1::from_vec(flat)
    }

    fn flat_params(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.linear.push_params(&mut out);
        Array1::from_vec(out)
    }

    fn set_flat_params(&mut self, params: ArrayView1<f64>) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let slice = params.to_vec();
        self.linear.load_params(&mut slice.iter());
    }

    fn named_params(&self) -> Vec<(String, ArrayD<f64>)> {
        vec![
            (
                "linear.weight".into(),
                self.linear.weight.clone().into_dyn(),
            ),
            ("linear.bias".into(), self.linear.bias.clone().into_dyn()),
        ]
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    fn random_input(b: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "backbone-test");
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn((b, 1, h, w), |_| normal.sample(&mut r))
    }

    #[test]
    fn tiny_cnn_embedding_dim_matches_config() {
        let mut r = rng::stream(1, "init");
        let net = TinyCnn::new(24, &mut r);
        let x = random_input(3, 64, 101, 2);
        let acts = net.forward(&x);
        assert_eq!(acts.embeddings.shape(), &[3, 24]);
        assert_eq!(acts.maps.len(), 4);
    }

    #[test]
    fn mini_resnet_embedding_dim_matches_config() {
        let mut r = rng::stream(1, "init");
        let net = MiniResNet::new(16, &mut r);
        let x = random_input(2, 32, 51, 3);
        let acts = net.forward(&x);
        assert_eq!(acts.embeddings.shape(), &[2, 16]);
        assert_eq!(acts.maps.len(), 5);
    }

    fn backbone_fd_check(net: &dyn Backbone, x: &Array4<f64>, probes: &[usize]) {
        // Objective: weighted sum of embeddings.
        let acts = net.forward(x);
        let w = Array2::from_shape_fn(acts.embeddings.raw_dim(), |(i, j)| {
            ((i * 3 + j * 5) % 7) as f64 * 0.2 - 0.5
        });
        let grad = net.backward(x, &acts, &w, None);
        assert_eq!(grad.len(), net.param_count());

        let mut params = net.flat_params();
        let mut net = net.clone_box();
        let eps = 1e-5;
        for &idx in probes {
            let orig = params[idx];
            params[idx] = orig + eps;
            net.set_flat_params(params.view());
            let up = (net.forward(x).embeddings * &w).sum();
            params[idx] = orig - eps;
            net.set_flat_params(params.view());
            let down = (net.forward(x).embeddings * &w).sum();
            params[idx] = orig;
            net.set_flat_params(params.view());
            let fd = (up - down) / (2.0 * eps);
            let got = grad[idx];
            let tol = 1e-4 * (1.0 + fd.abs().max(got.abs()));
            assert!(
                (fd - got).abs() < tol,
                "param {idx}: fd {fd} vs analytic {got}"
            );
        }
    }

    #[test]
    fn tiny_cnn_gradients_match_finite_differences() {
        let mut r = rng::stream(11, "init");
        let net = TinyCnn::new(8, &mut r);
        let x = random_input(2, 20, 24, 5);
        let n = net.param_count();
        let probes: Vec<usize> = (0..12).map(|i| i * (n / 12)).collect();
        backbone_fd_check(&net, &x, &probes);
    }

    #[test]
    fn mini_resnet_gradients_match_finite_differences() {
        let mut r = rng::stream(13, "init");
        let net = MiniResNet::new(8, &mut r);
        let x = random_input(1, 20, 20, 7);
        let n = net.param_count();
        let probes: Vec<usize> = (0..12).map(|i| i * (n / 12)).collect();
        backbone_fd_check(&net, &x, &probes);
    }

    #[test]
    fn map_grads_inject_into_backward() {
        let mut r = rng::stream(17, "init");
        let net = TinyCnn::new(8, &mut r);
        let x = random_input(1, 16, 16, 9);
        let acts = net.forward(&x);
        let zero_emb = Array2::zeros(acts.embeddings.raw_dim());
        let plain = net.backward(&x, &acts, &zero_emb, None);
        assert!(plain.iter().all(|v| *v == 0.0));

        let map_grads: Vec<Array4<f64>> = acts
            .maps
            .iter()
            .map(|m| Array4::from_elem(m.raw_dim(), 0.1))
            .collect();
        let with_maps = net.backward(&x, &acts, &zero_emb, Some(&map_grads));
        assert!(with_maps.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut r = rng::stream(19, "init");
        let mut net = MiniResNet::new(8, &mut r);
        let p = net.flat_params();
        let doubled = &p * 2.0;
        net.set_flat_params(doubled.view());
        let q = net.flat_params();
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a * 2.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_linear_matches_manual_product() {
        let mut r = rng::stream(23, "init");
        let net = FlatLinear::new(2, 3, 4, &mut r);
        let x = random_input(2, 2, 3, 29);
        let acts = net.forward(&x);
        let flat_x = x.view().into_shape_with_order((2, 6)).unwrap().to_owned();
        let expect = flat_x.dot(&net.linear.weight.t()) + &net.linear.bias;
        assert_eq!(acts.embeddings, expect);
    }
}

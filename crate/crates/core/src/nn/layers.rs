use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::kernels::ConvGeom;
use super::params::{ParamId, ParamStore};

/// Convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_kaiming(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let b = store.add_zeros(&format!("{name}.bias"), &[cout]);
        Self { w, b, geom }
    }

    /// Stride-1 convolution that keeps the spatial size.
    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(store, name, cin, cout, k, ConvGeom::same(k), rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.geom)
    }
}

/// Fully connected layer on `[M, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_kaiming(&format!("{name}.weight"), &[cout, cin], cin, rng);
        let b = store.add_zeros(&format!("{name}.bias"), &[cout]);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w, true);
        g.add_row(y, b)
    }
}

//! Shared PointNet-style part encoder: per-point MLP, max-pool, projection.

use rand_chacha::ChaCha8Rng;

use crate::geom::PartCloud;
use crate::numerics::{Bound, Graph, Linear, NumericsError, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PartEncoder {
    point_layers: Vec<Linear>,
    out: Linear,
    points: usize,
}

impl PartEncoder {
    /// Widths `3 → w₀ → … → w_last`, then `w_last → w_last`.
    pub fn new(
        store: &mut ParamStore,
        widths: &[usize],
        points: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut point_layers = Vec::with_capacity(widths.len());
        let mut fan_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            point_layers.push(Linear::new(store, &format!("enc.point{i}"), fan_in, w, rng));
            fan_in = w;
        }
        let out = Linear::new(store, "enc.out", fan_in, fan_in, rng);
        Self {
            point_layers,
            out,
            points,
        }
    }

    pub fn width(&self) -> usize {
        self.out.fan_out
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// Features `[N, width]` for `N` clouds of exactly `points` points each.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        clouds: &[&PartCloud],
    ) -> Result<Var, NumericsError> {
        let n = clouds.len();
        let mut data = Vec::with_capacity(n * self.points * 3);
        for c in clouds {
            if c.len() != self.points {
                return Err(NumericsError::Shape {
                    op: "encode_part",
                    lhs: vec![c.len(), 3],
                    rhs: vec![self.points, 3],
                });
            }
            data.extend(c.points().iter().flatten());
        }
        let mut h = g.constant(Tensor::matrix(n * self.points, 3, data)?);
        for layer in &self.point_layers {
            let z = layer.forward(g, p, h)?;
            h = g.relu(z);
        }
        let c = g.shape(h)[1];
        let h = g.reshape(h, &[n, self.points, c])?;
        let pooled = g.max_axis(h, 1)?;
        self.out.forward(g, p, pooled)
    }
}

/// Feature vector of a single part under frozen parameters.
pub fn encode_part(
    enc: &PartEncoder,
    store: &ParamStore,
    cloud: &PartCloud,
) -> Result<Vec<f64>, NumericsError> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let v = enc.forward(&mut g, &p, &[cloud])?;
    Ok(g.value(v).data().to_vec())
}

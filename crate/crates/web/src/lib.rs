//! Browser demo bindings. A [`Scene`] holds one synthetic object, a predicted
//! pose per part, and the assembly sequence for a chosen pattern. The page can
//! regenerate the object, perturb the predictions and step through the sequence.

use partasm::data::{part_color, synth_object_with, AssemblyTask, Category, Pattern};
use partasm::geom::{apply_pose, Pose};
use partasm::metrics::{evaluate_object, MetricConfig, ObjectReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub struct Scene {
    task: AssemblyTask,
    order: Vec<usize>,
    pred: Vec<Pose>,
}

impl Scene {
    pub fn generate(kind: &str, seed: u64, pattern: &str) -> Result<Scene, String> {
        let kind = match kind {
            "table" => Category::Table,
            "chair" => Category::Chair,
            "shelf" => Category::Shelf,
            other => return Err(format!("unknown object kind {other:?}")),
        };
        let pattern: Pattern = pattern.parse().map_err(|e| format!("{e}"))?;
        let task = synth_object_with(kind, seed, pattern);
        let order = task.sequence(pattern, task.seed);
        let pred = task.gt.clone();
        Ok(Scene { task, order, pred })
    }

    pub fn parts(&self) -> usize {
        self.task.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Replaces the predictions with the GT poses moved by a random rotation of
    /// up to `angle` radians and a random offset of up to `offset`.
    pub fn perturb(&mut self, angle: f64, offset: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pred = self
            .task
            .gt
            .iter()
            .map(|g| {
                let axis = random_unit(&mut rng);
                let half = 0.5 * angle * rng.random::<f64>();
                let (s, c) = half.sin_cos();
                let dq = [c, s * axis[0], s * axis[1], s * axis[2]];
                let r = offset * rng.random::<f64>();
                let dir = random_unit(&mut rng);
                let t = [0, 1, 2].map(|k| g.translation[k] + r * dir[k]);
                Pose::from_raw(quat_mul(&dq, &g.rotation), t)
            })
            .collect();
    }

    pub fn report(&self) -> ObjectReport {
        let t = &self.task;
        evaluate_object(
            &t.id,
            &t.category,
            &t.parts,
            &t.gt,
            &self.pred,
            &t.grouping,
            &t.contacts,
            &MetricConfig::default(),
        )
    }

    /// Interleaved `x, y, z, r, g, b` for the first `steps` parts of the
    /// sequence under the predicted poses. Colors are in `[0, 1]`.
    pub fn vertices(&self, steps: usize) -> Vec<f32> {
        let mut out = Vec::new();
        for (rank, &k) in self.order.iter().take(steps).enumerate() {
            let c = part_color(rank).map(|v| v as f32 / 255.0);
            let placed = apply_pose(&self.pred[k], &self.task.parts[k]).expect("poses are unit");
            for p in placed.points() {
                out.extend([p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]]);
            }
        }
        out
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[wasm_bindgen]
pub struct Demo(Scene);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, seed: u32, pattern: &str) -> Result<Demo, JsError> {
        Scene::generate(kind, seed.into(), pattern)
            .map(Demo)
            .map_err(|e| JsError::new(&e))
    }

    pub fn parts(&self) -> usize {
        self.0.parts()
    }

    pub fn order(&self) -> Vec<u32> {
        self.0.order().iter().map(|&k| k as u32).collect()
    }

    pub fn perturb(&mut self, angle: f64, offset: f64, seed: u32) {
        self.0.perturb(angle, offset, seed.into());
    }

    /// Metric report of the current predictions as JSON.
    pub fn report(&self) -> String {
        serde_json::to_string(&self.0.report()).expect("report serializes")
    }

    pub fn vertices(&self, steps: usize) -> Vec<f32> {
        self.0.vertices(steps)
    }
}

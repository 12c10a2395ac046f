use super::{Grads, Matrix, ParamId, ParamStore};

/// Adaptive-moment gradient descent with optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from gradients collected into `accum`.
    ///
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, accum: &GradAccumulator) -> f64 {
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let norm = accum.global_norm();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in accum.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            if params.is_frozen(id) {
                continue;
            }
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let w = params.get_mut(id);
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Sums parameter gradients across the examples of a batch.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    grads: Vec<Option<Matrix>>,
}

impl GradAccumulator {
    pub fn new(num_params: usize) -> Self {
        GradAccumulator {
            grads: vec![None; num_params],
        }
    }

    pub fn add(&mut self, grads: &Grads) {
        for (id, g) in grads.param_grads() {
            let i = id.index();
            if i >= self.grads.len() {
                self.grads.resize(i + 1, None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

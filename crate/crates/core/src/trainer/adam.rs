use crate::network::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adaptive-moment optimiser state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Applies one update. Tensors for which `frozen(name)` holds are left
    /// untouched, moments included.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, frozen: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            if frozen(&params.tensor(i).name) {
                continue;
            }
            let g = grads.get(i);
            let m = self.first_moment.get_mut(i);
            for (mv, gv) in m.iter_mut().zip(g) {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            }
            let v = self.second_moment.get_mut(i);
            for (vv, gv) in v.iter_mut().zip(g) {
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            }
            let (m, v) = (self.first_moment.get(i), self.second_moment.get(i));
            for ((p, mv), vv) in params.get_mut(i).iter_mut().zip(m).zip(v) {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + EPSILON);
            }
        }
    }
}
